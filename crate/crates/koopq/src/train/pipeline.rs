//! The two-step pipeline itself: per-stage pretraining, stagewise predictor
//! pretraining with frozen upstream, and joint fine-tuning with early
//! stopping and best-checkpoint restore.

use std::collections::HashSet;

use rand_chacha::ChaCha8Rng;

use super::{
    batch_tensors, check_dims, shuffled_batches, sub_rng, TrainConfig, TrainRecord, EVAL_CHUNK,
    SALT_AE_SHUFFLE, SALT_FINETUNE_NOISE, SALT_FINETUNE_SHUFFLE, SALT_PRED_NOISE,
    SALT_PRED_SHUFFLE,
};
use crate::data::{Dataset, LabelMask, StageBlock};
use crate::error::TrainError;
use crate::model::{
    loss_kld, loss_pred, loss_recon, loss_total, EpsilonSource, LossWeights, Mode,
    MultistageModel,
};
use crate::numcore::{clip_global_norm, Adam, AdamConfig, ParamId, ParamStore, Tape, TensorId};

/// A trained model with its parameters and training history.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: MultistageModel,
    pub store: ParamStore,
    pub record: TrainRecord,
    /// Fine-tuning epoch whose checkpoint was kept (0 = the pretrained
    /// parameters were never beaten).
    pub best_epoch: usize,
    /// Validation objective of the kept checkpoint.
    pub best_val_loss: f64,
}

fn id_set(ids: &[ParamId]) -> HashSet<usize> {
    ids.iter().map(|p| p.index()).collect()
}

/// Clips and applies the tape's gradients, restricted to the allowed
/// parameters — everything outside the set stays frozen.
fn step_filtered(
    adam: &mut Adam,
    store: &mut ParamStore,
    tape: &Tape,
    allowed: &HashSet<usize>,
    clip: f64,
) -> Result<(), TrainError> {
    let mut grads: Vec<(ParamId, Vec<f64>)> = tape
        .param_grads()
        .into_iter()
        .filter(|(id, _)| allowed.contains(&id.index()))
        .collect();
    clip_global_norm(&mut grads, clip);
    adam.step(store, &grads)?;
    Ok(())
}

fn check_finite(v: f64, phase: &str, epoch: usize) -> Result<(), TrainError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Diverged {
            phase: phase.to_string(),
            epoch,
            loss: v,
        })
    }
}

/// Stage-local autoencoding objective on one batch: mean squared
/// reconstruction error, plus the weighted KLD when the stage carries a
/// Gaussian head. Deterministic — pretraining never samples the latent.
fn ae_objective(
    tape: &mut Tape,
    model: &MultistageModel,
    store: &ParamStore,
    block: &StageBlock,
    k: usize,
    idx: &[usize],
    omega: f64,
) -> TensorId {
    let x = tape.constant(&[idx.len(), block.p], super::gather_x(block, idx));
    let stage = &model.stages[k];
    let h_hat = stage.encoder.forward(tape, store, x);
    let x_recon = stage.decoder.forward(tape, store, h_hat);
    let recon = loss_recon(tape, x, x_recon);
    match &stage.gaussian {
        Some(head) => {
            let (mu_hat, ln_sigma_hat) = head.forward(tape, store, h_hat);
            let sigma_hat = tape.exp(ln_sigma_hat);
            let kld = loss_kld(tape, mu_hat, ln_sigma_hat, sigma_hat);
            let wk = tape.scale(kld, omega);
            tape.add(recon, wk)
        }
        None => recon,
    }
}

fn eval_ae_objective(
    model: &MultistageModel,
    store: &ParamStore,
    block: &StageBlock,
    k: usize,
    n: usize,
    omega: f64,
) -> f64 {
    let all: Vec<usize> = (0..n).collect();
    let mut sum = 0.0;
    for chunk in all.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let loss = ae_objective(&mut tape, model, store, block, k, chunk, omega);
        sum += tape.value_scalar(loss) * chunk.len() as f64;
    }
    sum / n as f64
}

/// Step one, part one: each stage's encoder/decoder (and Gaussian head)
/// learns to represent its own process variables.
pub fn pretrain_autoencoders(
    model: &MultistageModel,
    store: &mut ParamStore,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    record: &mut TrainRecord,
) -> Result<(), TrainError> {
    for k in 0..model.n_stages() {
        let phase = format!("pretrain-ae-{}", k + 1);
        let allowed = id_set(&model.ae_params(k));
        let mut adam = Adam::new(AdamConfig::with_lr(cfg.pretrain_lr));
        let mut shuffle = sub_rng(cfg.seed, SALT_AE_SHUFFLE + k as u64);
        for epoch in 1..=cfg.pretrain_ae_epochs {
            let mut loss_sum = 0.0;
            for b in shuffled_batches(train.n, cfg.batch, &mut shuffle) {
                let mut tape = Tape::new();
                let loss = ae_objective(&mut tape, model, store, &train.stages[k], k, &b, cfg.omega);
                let v = tape.value_scalar(loss);
                check_finite(v, &phase, epoch)?;
                tape.backward(loss);
                step_filtered(&mut adam, store, &tape, &allowed, cfg.grad_clip)?;
                loss_sum += v * b.len() as f64;
            }
            let val_loss = eval_ae_objective(model, store, &val.stages[k], k, val.n, cfg.omega);
            record.push(&phase, epoch, loss_sum / train.n as f64, val_loss);
        }
    }
    Ok(())
}

fn forward_batch(
    model: &MultistageModel,
    tape: &mut Tape,
    store: &ParamStore,
    xs: &[TensorId],
    noise: &mut ChaCha8Rng,
) -> crate::model::ForwardTrace {
    if model.config.variant.is_stochastic() {
        let mut eps = EpsilonSource::Sample(noise);
        model.forward_all(tape, store, xs, Mode::Train, &mut eps)
    } else {
        model.forward_all(tape, store, xs, Mode::Train, &mut EpsilonSource::Zero)
    }
}

/// Prediction objective of stage `k` on a whole split, noise off, pooled
/// exactly over chunks by valid-cell count.
pub(crate) fn eval_pred_objective(
    model: &MultistageModel,
    store: &ParamStore,
    ds: &Dataset,
    k: usize,
) -> f64 {
    let all: Vec<usize> = (0..ds.n).collect();
    let mut num = 0.0;
    let mut den = 0usize;
    for chunk in all.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let (xs, ys, masks) = batch_tensors(&mut tape, ds, chunk);
        let trace = model.forward_all(&mut tape, store, &xs, Mode::Eval, &mut EpsilonSource::Zero);
        let loss = loss_pred(&mut tape, ys[k], trace.stages[k].y_hat, &masks[k]);
        let valid = masks[k].valid_count();
        num += tape.value_scalar(loss) * valid as f64;
        den += valid;
    }
    if den == 0 {
        0.0
    } else {
        num / den as f64
    }
}

/// Step one, part two: walk the stages in line order and fit each
/// (inbound transition, predictor) pair against that stage's labels.
/// Everything upstream is frozen, so later stages adapt to — rather than
/// disturb — what earlier stages learned.
pub fn pretrain_predictors(
    model: &MultistageModel,
    store: &mut ParamStore,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    record: &mut TrainRecord,
) -> Result<(), TrainError> {
    for k in 0..model.n_stages() {
        let phase = format!("pretrain-pred-{}", k + 1);
        let allowed = id_set(&model.pred_pair_params(k));
        let mut adam = Adam::new(AdamConfig::with_lr(cfg.pretrain_lr));
        let mut shuffle = sub_rng(cfg.seed, SALT_PRED_SHUFFLE + k as u64);
        let mut noise = sub_rng(cfg.seed, SALT_PRED_NOISE + k as u64);
        for epoch in 1..=cfg.pretrain_pred_epochs {
            let mut num = 0.0;
            let mut den = 0usize;
            for b in shuffled_batches(train.n, cfg.batch, &mut shuffle) {
                let mut tape = Tape::new();
                let (xs, ys, masks) = batch_tensors(&mut tape, train, &b);
                let trace = forward_batch(model, &mut tape, store, &xs, &mut noise);
                let loss = loss_pred(&mut tape, ys[k], trace.stages[k].y_hat, &masks[k]);
                let v = tape.value_scalar(loss);
                check_finite(v, &phase, epoch)?;
                tape.backward(loss);
                step_filtered(&mut adam, store, &tape, &allowed, cfg.grad_clip)?;
                let valid = masks[k].valid_count();
                num += v * valid as f64;
                den += valid;
            }
            let train_loss = if den == 0 { 0.0 } else { num / den as f64 };
            let val_loss = eval_pred_objective(model, store, val, k);
            record.push(&phase, epoch, train_loss, val_loss);
        }
    }
    Ok(())
}

/// Full objective on a whole split, noise off. Each term is pooled exactly:
/// prediction losses by valid-cell count, reconstruction and KLD by rows.
pub(crate) fn eval_total_objective(
    model: &MultistageModel,
    store: &ParamStore,
    ds: &Dataset,
    weights: &LossWeights,
) -> f64 {
    let n_stages = ds.stages.len();
    let mut pred_num = vec![0.0; n_stages];
    let mut pred_den = vec![0usize; n_stages];
    let mut recon_sum = vec![0.0; n_stages];
    let mut kld_sum = vec![0.0; n_stages];
    let all: Vec<usize> = (0..ds.n).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let (xs, ys, masks) = batch_tensors(&mut tape, ds, chunk);
        let trace = model.forward_all(&mut tape, store, &xs, Mode::Eval, &mut EpsilonSource::Zero);
        let mask_refs: Vec<&LabelMask> = masks.iter().collect();
        let total = loss_total(&mut tape, &trace, &ys, &mask_refs, weights);
        let rows = chunk.len() as f64;
        for (k, sl) in total.stages.iter().enumerate() {
            let valid = masks[k].valid_count();
            pred_num[k] += tape.value_scalar(sl.pred) * valid as f64;
            pred_den[k] += valid;
            recon_sum[k] += tape.value_scalar(sl.recon) * rows;
            if let Some(kld) = sl.kld {
                kld_sum[k] += tape.value_scalar(kld) * rows;
            }
        }
    }
    let n = ds.n as f64;
    let mut total = 0.0;
    for k in 0..n_stages {
        let pred = if pred_den[k] == 0 { 0.0 } else { pred_num[k] / pred_den[k] as f64 };
        let recon = recon_sum[k] / n;
        let kld = kld_sum[k] / n;
        total += weights.rho * pred + weights.theta * (recon + weights.omega * kld);
    }
    total
}

/// Step two: joint fine-tuning of every parameter on the combined
/// objective. Keeps the best validation checkpoint seen (the pretrained
/// starting point included) and stops early once `patience` epochs pass
/// without improvement.
pub fn finetune(
    model: &MultistageModel,
    store: &mut ParamStore,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    record: &mut TrainRecord,
) -> Result<(usize, f64), TrainError> {
    let phase = "finetune";
    let allowed = id_set(&model.all_params());
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.finetune_lr));
    let mut shuffle = sub_rng(cfg.seed, SALT_FINETUNE_SHUFFLE);
    let mut noise = sub_rng(cfg.seed, SALT_FINETUNE_NOISE);
    let weights = cfg.weights();

    let mut best_val = eval_total_objective(model, store, val, &weights);
    let mut best_snap = store.snapshot();
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.finetune_epochs {
        let mut loss_sum = 0.0;
        for b in shuffled_batches(train.n, cfg.batch, &mut shuffle) {
            let mut tape = Tape::new();
            let (xs, ys, masks) = batch_tensors(&mut tape, train, &b);
            let trace = forward_batch(model, &mut tape, store, &xs, &mut noise);
            let mask_refs: Vec<&LabelMask> = masks.iter().collect();
            let total = loss_total(&mut tape, &trace, &ys, &mask_refs, &weights);
            let v = tape.value_scalar(total.total);
            check_finite(v, phase, epoch)?;
            tape.backward(total.total);
            step_filtered(&mut adam, store, &tape, &allowed, cfg.grad_clip)?;
            loss_sum += v * b.len() as f64;
        }
        let val_loss = eval_total_objective(model, store, val, &weights);
        record.push(phase, epoch, loss_sum / train.n as f64, val_loss);
        if val_loss < best_val {
            best_val = val_loss;
            best_snap = store.snapshot();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    store.restore(&best_snap);
    Ok((best_epoch, best_val))
}

/// Runs the whole pipeline: build the model from the training split's
/// widths, pretrain, fine-tune, and return the best checkpoint with its
/// history.
pub fn train_full(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainedModel, TrainError> {
    cfg.validate()?;
    if train.n == 0 {
        return Err(TrainError::DataMismatch("training split is empty".into()));
    }
    if val.n == 0 {
        return Err(TrainError::DataMismatch("validation split is empty".into()));
    }
    let model_cfg = cfg.model_config(&train.dims());
    check_dims(&model_cfg, val, "validation")?;
    let mut store = ParamStore::new();
    let model = MultistageModel::new(&mut store, &model_cfg, cfg.seed)?;
    let mut record = TrainRecord::default();
    pretrain_autoencoders(&model, &mut store, train, val, cfg, &mut record)?;
    pretrain_predictors(&model, &mut store, train, val, cfg, &mut record)?;
    let (best_epoch, best_val_loss) = finetune(&model, &mut store, train, val, cfg, &mut record)?;
    Ok(TrainedModel {
        model,
        store,
        record,
        best_epoch,
        best_val_loss,
    })
}
