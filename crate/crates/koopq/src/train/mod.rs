//! Two-step training: per-stage pretraining, then joint fine-tuning.
//!
//! The pipeline follows the model's factored structure. Step one pretrains
//! each stage's autoencoder on its own process variables, then walks the
//! stages in line order training each (transition, predictor) pair against
//! that stage's quality labels with everything upstream frozen. Step two
//! fine-tunes all parameters jointly on the combined objective with early
//! stopping on the validation loss. [`evaluate`] reports per-stage and
//! pooled error on a held-out split, and [`run_experiment`] repeats the
//! whole pipeline over seeds and aggregates.
//!
//! Every random choice (init, shuffles, latent noise) derives from the one
//! run seed through fixed per-purpose salts, so a run is reproducible to
//! the byte and the phases stay decoupled: changing an epoch budget in one
//! phase does not shift the random stream of another.

mod ann;
mod pipeline;

pub use ann::{evaluate_ann, train_ann, AnnBaseline, AnnConfig, AnnInputs};
pub use pipeline::{
    finetune, pretrain_autoencoders, pretrain_predictors, train_full, TrainedModel,
};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::data::{Dataset, LabelMask, StageBlock};
use crate::error::TrainError;
use crate::model::{
    EpsilonSource, LossWeights, Mode, ModelConfig, MultistageModel, StageDims, Variant,
};
use crate::nn::Activation;
use crate::numcore::{ParamStore, Tape, TensorId};

/// Rows evaluated per forward pass when no gradient is needed.
pub(crate) const EVAL_CHUNK: usize = 512;

// Per-purpose salts for deriving independent random streams from one seed.
// Stage-indexed purposes add the zero-based stage index to the base salt.
// Model initialization consumes the bare run seed (salt 0).
pub(crate) const SALT_AE_SHUFFLE: u64 = 1;
pub(crate) const SALT_PRED_SHUFFLE: u64 = 100;
pub(crate) const SALT_PRED_NOISE: u64 = 200;
pub(crate) const SALT_FINETUNE_SHUFFLE: u64 = 300;
pub(crate) const SALT_FINETUNE_NOISE: u64 = 301;
pub(crate) const SALT_ANN_INIT: u64 = 400;
pub(crate) const SALT_ANN_SHUFFLE: u64 = 500;

/// Derives a named random stream from the run seed. Distinct salts give
/// streams that are decorrelated in practice (golden-ratio multiplier), and
/// salt 0 reproduces the bare seed.
pub fn sub_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn d_dh() -> usize {
    16
}
fn d_batch() -> usize {
    64
}
fn d_pretrain_lr() -> f64 {
    1e-3
}
fn d_finetune_lr() -> f64 {
    3e-4
}
fn d_rho() -> f64 {
    1.0
}
fn d_theta() -> f64 {
    0.1
}
fn d_omega() -> f64 {
    5e-5
}
fn d_ae_epochs() -> usize {
    200
}
fn d_pred_epochs() -> usize {
    200
}
fn d_finetune_epochs() -> usize {
    500
}
fn d_patience() -> usize {
    20
}
fn d_grad_clip() -> f64 {
    5.0
}
fn d_hidden_activation() -> Activation {
    Activation::Relu
}

/// Everything the pipeline needs besides the data. Deserializes from a
/// partial TOML table; omitted fields take the defaults below.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Latent width shared by all stages.
    #[serde(default = "d_dh")]
    pub d_h: usize,
    /// Hidden width of each prediction head; defaults to the latent width.
    #[serde(default)]
    pub pred_hidden: Option<usize>,
    #[serde(default = "d_hidden_activation")]
    pub hidden_activation: Activation,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_pretrain_lr")]
    pub pretrain_lr: f64,
    #[serde(default = "d_finetune_lr")]
    pub finetune_lr: f64,
    /// Weight on the prediction losses.
    #[serde(default = "d_rho")]
    pub rho: f64,
    /// Weight on the reconstruction group.
    #[serde(default = "d_theta")]
    pub theta: f64,
    /// Weight on the KLD inside the reconstruction group.
    #[serde(default = "d_omega")]
    pub omega: f64,
    #[serde(default = "d_ae_epochs")]
    pub pretrain_ae_epochs: usize,
    #[serde(default = "d_pred_epochs")]
    pub pretrain_pred_epochs: usize,
    #[serde(default = "d_finetune_epochs")]
    pub finetune_epochs: usize,
    /// Fine-tuning stops after this many epochs without a new best
    /// validation loss.
    #[serde(default = "d_patience")]
    pub patience: usize,
    /// Global gradient-norm ceiling applied in every phase.
    #[serde(default = "d_grad_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            d_h: d_dh(),
            pred_hidden: None,
            hidden_activation: d_hidden_activation(),
            batch: d_batch(),
            pretrain_lr: d_pretrain_lr(),
            finetune_lr: d_finetune_lr(),
            rho: d_rho(),
            theta: d_theta(),
            omega: d_omega(),
            pretrain_ae_epochs: d_ae_epochs(),
            pretrain_pred_epochs: d_pred_epochs(),
            finetune_epochs: d_finetune_epochs(),
            patience: d_patience(),
            grad_clip: d_grad_clip(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.d_h == 0 {
            return bad("latent width d_h must be positive".into());
        }
        if self.batch == 0 {
            return bad("batch size must be positive".into());
        }
        for (name, v) in [("pretrain_lr", self.pretrain_lr), ("finetune_lr", self.finetune_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        for (name, v) in [("rho", self.rho), ("theta", self.theta), ("omega", self.omega)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative and finite, got {v}"));
            }
        }
        if self.patience == 0 {
            return bad("patience must be positive".into());
        }
        if !(self.grad_clip > 0.0 && self.grad_clip.is_finite()) {
            return bad(format!("grad_clip must be positive and finite, got {}", self.grad_clip));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            rho: self.rho,
            theta: self.theta,
            omega: self.omega,
        }
    }

    /// Architecture for a dataset with the given per-stage (p, q) widths.
    pub fn model_config(&self, dims: &[(usize, usize)]) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            stages: dims.iter().map(|&(p, q)| StageDims { p, q }).collect(),
            d_h: self.d_h,
            pred_hidden: self.pred_hidden,
            hidden_activation: self.hidden_activation,
        }
    }
}

/// One row of the training history.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    /// `pretrain-ae-<stage>`, `pretrain-pred-<stage>`, or `finetune`.
    pub phase: String,
    /// 1-based epoch within the phase.
    pub epoch: usize,
    /// Phase objective averaged over the epoch's training batches.
    pub train_loss: f64,
    /// Phase objective on the validation split (no sampling noise).
    pub val_loss: f64,
}

/// Full per-epoch history of one training run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
}

impl TrainRecord {
    pub fn push(&mut self, phase: &str, epoch: usize, train_loss: f64, val_loss: f64) {
        self.epochs.push(EpochRecord {
            phase: phase.to_string(),
            epoch,
            train_loss,
            val_loss,
        });
    }

    /// Writes the history as `phase,epoch,train_loss,val_loss` rows.
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut f = BufWriter::new(File::create(path)?);
        writeln!(f, "phase,epoch,train_loss,val_loss")?;
        for r in &self.epochs {
            writeln!(f, "{},{},{},{}", r.phase, r.epoch, r.train_loss, r.val_loss)?;
        }
        f.flush()
    }
}

/// Error of one stage's quality predictions over the valid label cells.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StageMetrics {
    pub mse: f64,
    pub mae: f64,
    pub valid_cells: usize,
}

/// Held-out error report. Totals pool every valid cell across stages, so
/// each stage contributes in proportion to its surviving measurements.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_rows: usize,
    pub stages: Vec<StageMetrics>,
    pub total_mse: f64,
    pub total_mae: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Mean and sample standard deviation over completed seed runs (zero
/// deviation when only one run completed).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
}

/// What one seed run produced: a report, or the error that stopped it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

/// Multi-seed experiment summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AggregateReport {
    pub variant: Variant,
    pub repeats: usize,
    /// How many seed runs finished; aggregates cover only these.
    pub completed: usize,
    pub per_seed: Vec<SeedOutcome>,
    pub stage_mse: Vec<MetricSummary>,
    pub stage_mae: Vec<MetricSummary>,
    pub total_mse: MetricSummary,
    pub total_mae: MetricSummary,
}

impl AggregateReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

pub(crate) fn mean_std(xs: &[f64]) -> MetricSummary {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MetricSummary { mean, std }
}

/// Shuffles `0..n` and cuts it into training batches (last one may be short).
pub(crate) fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Row-major gather of selected process-variable rows.
pub(crate) fn gather_x(s: &StageBlock, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * s.p);
    for &r in idx {
        out.extend_from_slice(s.x_row(r));
    }
    out
}

/// Row-major gather of selected quality-label rows.
pub(crate) fn gather_y(s: &StageBlock, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * s.q);
    for &r in idx {
        out.extend_from_slice(s.y_row(r));
    }
    out
}

/// Splices a batch of every stage's inputs, labels, and masks onto a tape.
pub(crate) fn batch_tensors(
    tape: &mut Tape,
    ds: &Dataset,
    idx: &[usize],
) -> (Vec<TensorId>, Vec<TensorId>, Vec<LabelMask>) {
    let mut xs = Vec::with_capacity(ds.stages.len());
    let mut ys = Vec::with_capacity(ds.stages.len());
    let mut masks = Vec::with_capacity(ds.stages.len());
    for s in &ds.stages {
        xs.push(tape.constant(&[idx.len(), s.p], gather_x(s, idx)));
        ys.push(tape.constant(&[idx.len(), s.q], gather_y(s, idx)));
        masks.push(s.mask.select_rows(idx));
    }
    (xs, ys, masks)
}

/// Valid-cell error accumulator shared by the model and baseline reports.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct MetricsAccum {
    sum_sq: f64,
    sum_abs: f64,
    count: usize,
}

impl MetricsAccum {
    /// Folds in one batch of predictions, skipping masked cells.
    pub(crate) fn add_batch(&mut self, y: &[f64], y_hat: &[f64], mask: &LabelMask) {
        debug_assert_eq!(y.len(), mask.rows * mask.cols);
        debug_assert_eq!(y.len(), y_hat.len());
        for (i, w) in mask.weights.iter().enumerate() {
            if *w != 0.0 {
                let d = y[i] - y_hat[i];
                self.sum_sq += d * d;
                self.sum_abs += d.abs();
                self.count += 1;
            }
        }
    }

    pub(crate) fn metrics(&self) -> StageMetrics {
        if self.count == 0 {
            return StageMetrics {
                mse: 0.0,
                mae: 0.0,
                valid_cells: 0,
            };
        }
        StageMetrics {
            mse: self.sum_sq / self.count as f64,
            mae: self.sum_abs / self.count as f64,
            valid_cells: self.count,
        }
    }
}

pub(crate) fn pool_metrics(accums: &[MetricsAccum]) -> (Vec<StageMetrics>, f64, f64) {
    let stages: Vec<StageMetrics> = accums.iter().map(MetricsAccum::metrics).collect();
    let mut pooled = MetricsAccum::default();
    for a in accums {
        pooled.sum_sq += a.sum_sq;
        pooled.sum_abs += a.sum_abs;
        pooled.count += a.count;
    }
    let total = pooled.metrics();
    (stages, total.mse, total.mae)
}

pub(crate) fn check_dims(model_cfg: &ModelConfig, ds: &Dataset, what: &str) -> Result<(), TrainError> {
    let dims = ds.dims();
    let want: Vec<(usize, usize)> = model_cfg.stages.iter().map(|s| (s.p, s.q)).collect();
    if dims != want {
        return Err(TrainError::DataMismatch(format!(
            "{what} split has stage widths {dims:?}, model expects {want:?}"
        )));
    }
    Ok(())
}

/// Measures a model on a held-out split: per-stage and pooled MSE/MAE over
/// the valid label cells, with latent noise off.
pub fn evaluate(
    model: &MultistageModel,
    store: &ParamStore,
    ds: &Dataset,
) -> Result<EvalReport, TrainError> {
    if ds.n == 0 {
        return Err(TrainError::DataMismatch("evaluation split is empty".into()));
    }
    check_dims(&model.config, ds, "evaluation")?;
    let n_stages = ds.stages.len();
    let mut accums = vec![MetricsAccum::default(); n_stages];
    let all: Vec<usize> = (0..ds.n).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let (xs, _ys, masks) = batch_tensors(&mut tape, ds, chunk);
        let trace = model.forward_all(&mut tape, store, &xs, Mode::Eval, &mut EpsilonSource::Zero);
        for (k, st) in trace.stages.iter().enumerate() {
            let y = gather_y(&ds.stages[k], chunk);
            accums[k].add_batch(&y, tape.values(st.y_hat), &masks[k]);
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

/// Runs the full pipeline once per seed and aggregates the test reports.
///
/// Run `s` clones the base config with seed `base.seed + s`. A failed run is
/// recorded in its [`SeedOutcome`] and excluded from the aggregates; the call
/// errors only if every run failed. With the `parallel` feature the runs fan
/// out across threads; outcomes are identical either way because each run is
/// self-contained.
pub fn run_experiment(
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    base: &TrainConfig,
    repeats: usize,
) -> Result<AggregateReport, TrainError> {
    if repeats == 0 {
        return Err(TrainError::InvalidConfig("repeats must be positive".into()));
    }
    base.validate()?;
    let run_one = |s: usize| -> SeedOutcome {
        let mut cfg = base.clone();
        cfg.seed = base.seed + s as u64;
        let result = train_full(train, val, &cfg).and_then(|tm| evaluate(&tm.model, &tm.store, test));
        match result {
            Ok(report) => SeedOutcome {
                seed: cfg.seed,
                report: Some(report),
                error: None,
            },
            Err(e) => SeedOutcome {
                seed: cfg.seed,
                report: None,
                error: Some(e.to_string()),
            },
        }
    };

    #[cfg(feature = "parallel")]
    let per_seed: Vec<SeedOutcome> = (0..repeats).into_par_iter().map(run_one).collect();
    #[cfg(not(feature = "parallel"))]
    let per_seed: Vec<SeedOutcome> = (0..repeats).map(run_one).collect();

    let done: Vec<&EvalReport> = per_seed.iter().filter_map(|o| o.report.as_ref()).collect();
    if done.is_empty() {
        let first = per_seed[0].error.clone().unwrap_or_default();
        return Err(TrainError::AllSeedsFailed { repeats, first });
    }
    let n_stages = done[0].stages.len();
    let collect = |f: &dyn Fn(&EvalReport) -> f64| -> Vec<f64> { done.iter().map(|r| f(r)).collect() };
    let stage_mse = (0..n_stages)
        .map(|k| mean_std(&collect(&|r| r.stages[k].mse)))
        .collect();
    let stage_mae = (0..n_stages)
        .map(|k| mean_std(&collect(&|r| r.stages[k].mae)))
        .collect();
    let total_mse = mean_std(&collect(&|r| r.total_mse));
    let total_mae = mean_std(&collect(&|r| r.total_mae));
    Ok(AggregateReport {
        variant: base.variant,
        repeats,
        completed: done.len(),
        per_seed,
        stage_mse,
        stage_mae,
        total_mse,
        total_mae,
    })
}

#[cfg(test)]
mod tests;
