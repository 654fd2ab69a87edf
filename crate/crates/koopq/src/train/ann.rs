//! Plain feed-forward baseline: one independent network per stage mapping
//! process variables straight to that stage's quality labels, with no
//! latent space and no cross-stage operator. The cumulative mode feeds
//! stage `k` the concatenation of every stage's variables up to and
//! including its own; the local mode feeds it only its own.

use serde::{Deserialize, Serialize};

use super::{
    gather_x, gather_y, pool_metrics, shuffled_batches, sub_rng, EvalReport, MetricsAccum,
    TrainRecord, EVAL_CHUNK, SALT_ANN_INIT, SALT_ANN_SHUFFLE,
};
use crate::data::Dataset;
use crate::error::TrainError;
use crate::model::loss_pred;
use crate::nn::{Activation, Mlp};
use crate::numcore::{clip_global_norm, Adam, AdamConfig, ParamStore, Tape};

/// What each stage's baseline network sees.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnnInputs {
    /// Stage `k` consumes the concatenated variables of stages 1..=k.
    CumulativeConcat,
    /// Stage `k` consumes only its own variables.
    LocalOnly,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnConfig {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Stop a stage's training after this many epochs without a new best
    /// validation loss.
    pub patience: usize,
    pub batch: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub inputs: AnnInputs,
}

impl AnnConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            hidden: 256,
            lr: 1e-3,
            epochs: 500,
            patience: 20,
            batch: 64,
            grad_clip: 5.0,
            seed,
            inputs: AnnInputs::CumulativeConcat,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.hidden == 0 || self.batch == 0 || self.patience == 0 {
            return Err(TrainError::InvalidConfig(
                "hidden width, batch size, and patience must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "lr must be positive and finite, got {}",
                self.lr
            )));
        }
        if !(self.grad_clip > 0.0 && self.grad_clip.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "grad_clip must be positive and finite, got {}",
                self.grad_clip
            )));
        }
        Ok(())
    }
}

/// One trained baseline network per stage, each in its own store.
pub struct AnnBaseline {
    pub inputs: AnnInputs,
    pub nets: Vec<Mlp>,
    pub stores: Vec<ParamStore>,
    /// Per-stage (p, q) widths of the data the baseline was built for.
    pub dims: Vec<(usize, usize)>,
    pub record: TrainRecord,
}

fn input_width(dims: &[(usize, usize)], k: usize, inputs: AnnInputs) -> usize {
    match inputs {
        AnnInputs::CumulativeConcat => dims[..=k].iter().map(|&(p, _)| p).sum(),
        AnnInputs::LocalOnly => dims[k].0,
    }
}

fn gather_inputs(ds: &Dataset, k: usize, idx: &[usize], inputs: AnnInputs) -> Vec<f64> {
    match inputs {
        AnnInputs::LocalOnly => gather_x(&ds.stages[k], idx),
        AnnInputs::CumulativeConcat => {
            let width: usize = ds.stages[..=k].iter().map(|s| s.p).sum();
            let mut out = Vec::with_capacity(idx.len() * width);
            for &r in idx {
                for s in &ds.stages[..=k] {
                    out.extend_from_slice(s.x_row(r));
                }
            }
            out
        }
    }
}

fn val_pred_loss(net: &Mlp, store: &ParamStore, ds: &Dataset, k: usize, inputs: AnnInputs) -> f64 {
    let all: Vec<usize> = (0..ds.n).collect();
    let width = input_width(&ds.dims(), k, inputs);
    let mut num = 0.0;
    let mut den = 0usize;
    for chunk in all.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let x = tape.constant(&[chunk.len(), width], gather_inputs(ds, k, chunk, inputs));
        let y = tape.constant(&[chunk.len(), ds.stages[k].q], gather_y(&ds.stages[k], chunk));
        let mask = ds.stages[k].mask.select_rows(chunk);
        let y_hat = net.forward(&mut tape, store, x);
        let loss = loss_pred(&mut tape, y, y_hat, &mask);
        let valid = mask.valid_count();
        num += tape.value_scalar(loss) * valid as f64;
        den += valid;
    }
    if den == 0 {
        0.0
    } else {
        num / den as f64
    }
}

/// Trains the per-stage baseline networks, each with early stopping on its
/// own validation prediction loss and best-checkpoint restore.
pub fn train_ann(train: &Dataset, val: &Dataset, cfg: &AnnConfig) -> Result<AnnBaseline, TrainError> {
    cfg.validate()?;
    if train.n == 0 {
        return Err(TrainError::DataMismatch("training split is empty".into()));
    }
    if val.n == 0 {
        return Err(TrainError::DataMismatch("validation split is empty".into()));
    }
    let dims = train.dims();
    if val.dims() != dims {
        return Err(TrainError::DataMismatch(format!(
            "validation split has stage widths {:?}, training has {:?}",
            val.dims(),
            dims
        )));
    }
    let mut nets = Vec::with_capacity(dims.len());
    let mut stores = Vec::with_capacity(dims.len());
    let mut record = TrainRecord::default();
    for k in 0..dims.len() {
        let phase = format!("ann-{}", k + 1);
        let width = input_width(&dims, k, cfg.inputs);
        let q = dims[k].1;
        let mut store = ParamStore::new();
        let mut init = sub_rng(cfg.seed, SALT_ANN_INIT + k as u64);
        let net = Mlp::new(
            &mut store,
            &mut init,
            &format!("ann{}", k + 1),
            &[width, cfg.hidden, q],
            Activation::Relu,
        );
        let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
        let mut shuffle = sub_rng(cfg.seed, SALT_ANN_SHUFFLE + k as u64);

        let mut best_val = val_pred_loss(&net, &store, val, k, cfg.inputs);
        let mut best_snap = store.snapshot();
        let mut since_best = 0usize;

        for epoch in 1..=cfg.epochs {
            let mut num = 0.0;
            let mut den = 0usize;
            for b in shuffled_batches(train.n, cfg.batch, &mut shuffle) {
                let mut tape = Tape::new();
                let x = tape.constant(&[b.len(), width], gather_inputs(train, k, &b, cfg.inputs));
                let y = tape.constant(&[b.len(), q], gather_y(&train.stages[k], &b));
                let mask = train.stages[k].mask.select_rows(&b);
                let y_hat = net.forward(&mut tape, &store, x);
                let loss = loss_pred(&mut tape, y, y_hat, &mask);
                let v = tape.value_scalar(loss);
                if !v.is_finite() {
                    return Err(TrainError::Diverged {
                        phase: phase.clone(),
                        epoch,
                        loss: v,
                    });
                }
                tape.backward(loss);
                let mut grads = tape.param_grads();
                clip_global_norm(&mut grads, cfg.grad_clip);
                adam.step(&mut store, &grads)?;
                let valid = mask.valid_count();
                num += v * valid as f64;
                den += valid;
            }
            let train_loss = if den == 0 { 0.0 } else { num / den as f64 };
            let val_loss = val_pred_loss(&net, &store, val, k, cfg.inputs);
            record.push(&phase, epoch, train_loss, val_loss);
            if val_loss < best_val {
                best_val = val_loss;
                best_snap = store.snapshot();
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
        store.restore(&best_snap);
        nets.push(net);
        stores.push(store);
    }
    Ok(AnnBaseline {
        inputs: cfg.inputs,
        nets,
        stores,
        dims,
        record,
    })
}

/// Measures the baseline on a held-out split with the same valid-cell
/// metrics and pooling as the model report.
pub fn evaluate_ann(baseline: &AnnBaseline, ds: &Dataset) -> Result<EvalReport, TrainError> {
    if ds.n == 0 {
        return Err(TrainError::DataMismatch("evaluation split is empty".into()));
    }
    if ds.dims() != baseline.dims {
        return Err(TrainError::DataMismatch(format!(
            "evaluation split has stage widths {:?}, baseline expects {:?}",
            ds.dims(),
            baseline.dims
        )));
    }
    let mut accums = vec![MetricsAccum::default(); baseline.dims.len()];
    let all: Vec<usize> = (0..ds.n).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        for (k, (net, store)) in baseline.nets.iter().zip(&baseline.stores).enumerate() {
            let width = input_width(&baseline.dims, k, baseline.inputs);
            let mut tape = Tape::new();
            let x = tape.constant(&[chunk.len(), width], gather_inputs(ds, k, chunk, baseline.inputs));
            let y_hat = net.forward(&mut tape, store, x);
            let y = gather_y(&ds.stages[k], chunk);
            let mask = ds.stages[k].mask.select_rows(chunk);
            accums[k].add_batch(&y, tape.values(y_hat), &mask);
        }
    }
    let (stages, total_mse, total_mae) = pool_metrics(&accums);
    Ok(EvalReport {
        n_rows: ds.n,
        stages,
        total_mse,
        total_mae,
    })
}
