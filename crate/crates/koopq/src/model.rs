//! Stage modules, the multistage forward pass, and the training losses.
//!
//! Stage `k` owns an encoder/decoder pair, a prediction head, for the
//! stochastic variant a Gaussian head, and (except for the last stage) the
//! outbound Koopman transition into stage `k+1`. The forward pass walks
//! stages in order: encode, propagate the upstream latent (stage 1 keeps
//! its own encoding), predict. Reconstruction always decodes the stage's
//! own encoding, so the quality prediction path is the only consumer of the
//! propagated latent, and a stage's outputs depend exclusively on process
//! variables from stages up to and including itself.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::LabelMask;
use crate::error::ModelError;
use crate::koopman::KoopmanTransition;
use crate::nn::{decoder_widths, draw_epsilon, encoder_widths, Activation, GaussianHead, Mlp};
use crate::numcore::{ParamId, ParamStore, Tape, TensorId};

/// Model family. The two deterministic variants differ only in their
/// transition operator; the stochastic variant propagates Gaussian beliefs
/// through an eigenvalue pair.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Static dense transition matrix; deterministic latents.
    SAek,
    /// Input-dependent diagonal transition; deterministic latents.
    EAek,
    /// Stochastic: Gaussian latents with an eigenvalue pair per transition.
    Sdk,
}

impl Variant {
    pub fn is_stochastic(self) -> bool {
        matches!(self, Variant::Sdk)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::SAek => "s-aek",
            Variant::EAek => "e-aek",
            Variant::Sdk => "sdk",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "s-aek" | "saek" => Ok(Variant::SAek),
            "e-aek" | "eaek" => Ok(Variant::EAek),
            "sdk" => Ok(Variant::Sdk),
            other => Err(format!("unknown variant '{other}' (expected s-aek, e-aek, or sdk)")),
        }
    }
}

/// Input and label widths of one stage.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct StageDims {
    pub p: usize,
    pub q: usize,
}

fn default_hidden_activation() -> Activation {
    Activation::Relu
}

/// Everything needed to rebuild a model's architecture.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub stages: Vec<StageDims>,
    pub d_h: usize,
    /// Hidden width of the prediction head; defaults to the latent width.
    #[serde(default)]
    pub pred_hidden: Option<usize>,
    /// Hidden activation of every MLP; identity exists for linear probes.
    #[serde(default = "default_hidden_activation")]
    pub hidden_activation: Activation,
}

impl ModelConfig {
    pub fn new(variant: Variant, stages: Vec<StageDims>, d_h: usize) -> Self {
        Self {
            variant,
            stages,
            d_h,
            pred_hidden: None,
            hidden_activation: Activation::Relu,
        }
    }

    pub fn pred_hidden(&self) -> usize {
        self.pred_hidden.unwrap_or(self.d_h)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.stages.is_empty() {
            return Err(ModelError::InvalidConfig("model needs at least one stage".into()));
        }
        if self.d_h == 0 {
            return Err(ModelError::InvalidConfig("latent width d_h must be positive".into()));
        }
        if self.pred_hidden() == 0 {
            return Err(ModelError::InvalidConfig("prediction hidden width must be positive".into()));
        }
        for (k, s) in self.stages.iter().enumerate() {
            if s.p == 0 || s.q == 0 {
                return Err(ModelError::InvalidConfig(format!(
                    "stage {} has p={} q={}; both must be positive",
                    k + 1,
                    s.p,
                    s.q
                )));
            }
        }
        Ok(())
    }
}

/// One stage's modules. The transition is outbound (into the next stage)
/// and absent on the final stage.
#[derive(Clone, Debug)]
pub struct StageModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub gaussian: Option<GaussianHead>,
    pub predictor: Mlp,
    pub transition: Option<KoopmanTransition>,
}

impl StageModel {
    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        if let Some(g) = &self.gaussian {
            p.extend(g.params());
        }
        p.extend(self.predictor.params());
        if let Some(t) = &self.transition {
            p.extend(t.params());
        }
        p
    }
}

/// The assembled multistage model. Parameters live in the store the model
/// was built against; the model itself only holds ids and layer layout.
#[derive(Clone, Debug)]
pub struct MultistageModel {
    pub config: ModelConfig,
    pub stages: Vec<StageModel>,
}

impl MultistageModel {
    /// Builds a freshly initialized model, registering its parameters in
    /// `store` under deterministic names (`stage{k}.{module}...`).
    pub fn new(store: &mut ParamStore, config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_h;
        let n_stages = config.stages.len();
        let mut stages = Vec::with_capacity(n_stages);
        for (k, dims) in config.stages.iter().enumerate() {
            let tag = format!("stage{}", k + 1);
            let encoder = Mlp::new(
                store,
                &mut rng,
                &format!("{tag}.encoder"),
                &encoder_widths(dims.p, d),
                config.hidden_activation,
            );
            let decoder = Mlp::new(
                store,
                &mut rng,
                &format!("{tag}.decoder"),
                &decoder_widths(dims.p, d),
                config.hidden_activation,
            );
            let gaussian = if config.variant.is_stochastic() {
                Some(GaussianHead::new(store, &mut rng, &format!("{tag}.gaussian"), d))
            } else {
                None
            };
            let predictor = Mlp::new(
                store,
                &mut rng,
                &format!("{tag}.predictor"),
                &[d, config.pred_hidden(), dims.q],
                config.hidden_activation,
            );
            let transition = if k + 1 < n_stages {
                let name = format!("{tag}.transition");
                Some(match config.variant {
                    Variant::SAek => KoopmanTransition::new_static_dense(store, &mut rng, &name, d),
                    Variant::EAek => KoopmanTransition::new_eigen_diagonal(store, &mut rng, &name, d),
                    Variant::Sdk => KoopmanTransition::new_stochastic_pair(store, &mut rng, &name, d),
                })
            } else {
                None
            };
            stages.push(StageModel {
                encoder,
                decoder,
                gaussian,
                predictor,
                transition,
            });
        }
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    /// Autoencoder parameters of one stage (encoder, decoder, and for the
    /// stochastic variant the Gaussian head) — the per-stage pretraining set.
    pub fn ae_params(&self, k: usize) -> Vec<ParamId> {
        let s = &self.stages[k];
        let mut p = s.encoder.params();
        p.extend(s.decoder.params());
        if let Some(g) = &s.gaussian {
            p.extend(g.params());
        }
        p
    }

    /// Prediction pair of stage `k`: its prediction head plus the inbound
    /// transition from stage `k-1` (stage 0 has no inbound transition).
    pub fn pred_pair_params(&self, k: usize) -> Vec<ParamId> {
        let mut p = self.stages[k].predictor.params();
        if k > 0 {
            if let Some(t) = &self.stages[k - 1].transition {
                p.extend(t.params());
            }
        }
        p
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        self.stages.iter().flat_map(StageModel::params).collect()
    }
}

/// Forward-pass mode: training samples the latent noise, evaluation pins
/// it to zero so the prediction head consumes the belief mean.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Where the reparameterization noise comes from during training.
pub enum EpsilonSource<'a> {
    /// No noise (makes training deterministic; evaluation always does this).
    Zero,
    /// Fresh standard-normal draws per stage and batch element.
    Sample(&'a mut ChaCha8Rng),
    /// Caller-frozen draws, one `n * d_h` block per stage (gradient checks).
    Fixed(&'a [Vec<f64>]),
}

/// Gaussian bookkeeping for one stage of a stochastic forward pass.
#[derive(Clone, Debug)]
pub struct StageGaussian {
    pub mu_hat: TensorId,
    pub ln_sigma_hat: TensorId,
    pub mu: TensorId,
    pub ln_sigma: TensorId,
    pub sigma: TensorId,
    pub lambda_mu: Option<TensorId>,
    pub lambda_sigma: Option<TensorId>,
    /// The noise actually used for this stage's sample.
    pub epsilon: Vec<f64>,
}

/// Tape handles produced for one stage by [`MultistageModel::forward_all`].
#[derive(Clone, Debug)]
pub struct StageTrace {
    pub x: TensorId,
    pub h_hat: TensorId,
    pub h: TensorId,
    /// Eigenvalue diagonal of the inbound transition (input-dependent
    /// deterministic variant only).
    pub lambda: Option<TensorId>,
    pub y_hat: TensorId,
    /// Reconstruction decoded from the carried latent `h`.
    pub x_recon: TensorId,
    pub gaussian: Option<StageGaussian>,
}

/// Handles for a whole forward pass, stage by stage.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub n: usize,
    pub stages: Vec<StageTrace>,
}

impl MultistageModel {
    /// Runs the stagewise forward pass over one batch.
    ///
    /// `xs` holds one tensor per stage, all with the same row count (their
    /// grad participation is up to the caller — constants for training,
    /// variables for input sensitivities).
    pub fn forward_all(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        xs: &[TensorId],
        mode: Mode,
        eps: &mut EpsilonSource<'_>,
    ) -> ForwardTrace {
        assert_eq!(
            xs.len(),
            self.stages.len(),
            "forward_all: {} stage inputs for a {}-stage model",
            xs.len(),
            self.stages.len()
        );
        let n = tape.shape(xs[0])[0];
        for (k, &x) in xs.iter().enumerate() {
            let shape = tape.shape(x);
            assert_eq!(shape[0], n, "forward_all: stage {} has {} rows, stage 1 has {}", k + 1, shape[0], n);
            assert_eq!(
                shape[1],
                self.config.stages[k].p,
                "forward_all: stage {} input width {} does not match config p={}",
                k + 1,
                shape[1],
                self.config.stages[k].p
            );
        }
        let d = self.config.d_h;
        let mut stages: Vec<StageTrace> = Vec::with_capacity(self.stages.len());

        for (k, stage) in self.stages.iter().enumerate() {
            let x = xs[k];
            let h_hat = stage.encoder.forward(tape, store, x);

            let (h, lambda, gaussian) = if let Some(head) = &stage.gaussian {
                let (mu_hat, ln_sigma_hat) = head.forward(tape, store, h_hat);
                let (mu, ln_sigma, lambda_mu, lambda_sigma) = if k == 0 {
                    (mu_hat, ln_sigma_hat, None, None)
                } else {
                    let prev = stages[k - 1].gaussian.as_ref().expect("stochastic stages carry beliefs");
                    let trans = self.stages[k - 1]
                        .transition
                        .as_ref()
                        .expect("non-final stages carry transitions");
                    let belief =
                        trans.propagate_gaussian(tape, store, mu_hat, ln_sigma_hat, prev.mu, prev.ln_sigma);
                    (
                        belief.mu,
                        belief.ln_sigma,
                        Some(belief.lambda_mu),
                        Some(belief.lambda_sigma),
                    )
                };
                let sigma = tape.exp(ln_sigma);
                let epsilon = match (mode, &mut *eps) {
                    (Mode::Eval, _) | (Mode::Train, EpsilonSource::Zero) => vec![0.0; n * d],
                    (Mode::Train, EpsilonSource::Sample(rng)) => draw_epsilon(rng, n, d),
                    (Mode::Train, EpsilonSource::Fixed(blocks)) => {
                        let block = &blocks[k];
                        assert_eq!(block.len(), n * d, "forward_all: frozen noise block for stage {} has wrong length", k + 1);
                        block.clone()
                    }
                };
                let h = if epsilon.iter().all(|&e| e == 0.0) {
                    mu
                } else {
                    let e = tape.constant(&[n, d], epsilon.clone());
                    let noise = tape.mul(e, sigma);
                    tape.add(mu, noise)
                };
                (
                    h,
                    None,
                    Some(StageGaussian {
                        mu_hat,
                        ln_sigma_hat,
                        mu,
                        ln_sigma,
                        sigma,
                        lambda_mu,
                        lambda_sigma,
                        epsilon,
                    }),
                )
            } else if k == 0 {
                (h_hat, None, None)
            } else {
                let trans = self.stages[k - 1]
                    .transition
                    .as_ref()
                    .expect("non-final stages carry transitions");
                let (h, lambda) = trans.propagate_deterministic(tape, store, h_hat, stages[k - 1].h);
                (h, lambda, None)
            };

            // The decoder reads the carried latent, not the local encoding:
            // reconstruction then certifies that the accumulated state still
            // describes this stage's measurements, which disciplines what the
            // transitions may carry forward.
            let x_recon = stage.decoder.forward(tape, store, h);
            let y_hat = stage.predictor.forward(tape, store, h);
            stages.push(StageTrace {
                x,
                h_hat,
                h,
                lambda,
                y_hat,
                x_recon,
                gaussian,
            });
        }
        ForwardTrace { n, stages }
    }
}

/// Loss weights: prediction rho, reconstruction group theta, and the KLD
/// share omega nested inside the reconstruction group.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub rho: f64,
    pub theta: f64,
    pub omega: f64,
}

/// Reconstruction loss: mean over the batch of squared row distance,
/// `(1/n) sum_i ||x_i - recon_i||^2`.
pub fn loss_recon(tape: &mut Tape, x: TensorId, x_recon: TensorId) -> TensorId {
    let n = tape.shape(x)[0];
    let d = tape.sub(x, x_recon);
    let sq = tape.mul(d, d);
    let s = tape.reduce_sum(sq);
    tape.scale(s, 1.0 / n as f64)
}

/// Prediction loss under a validity mask.
///
/// Generalizes `(1/n) sum_i ||y_i - yhat_i||^2` so masked cells drop out of
/// both the sum and the count: with q columns and `valid` surviving cells,
/// the loss is `q * sum(masked squared error) / valid`. With a full mask
/// this is exactly the row-mean form; with no valid cells it is zero and
/// carries no gradient.
pub fn loss_pred(tape: &mut Tape, y: TensorId, y_hat: TensorId, mask: &LabelMask) -> TensorId {
    let shape = tape.shape(y).to_vec();
    assert_eq!(
        shape,
        vec![mask.rows, mask.cols],
        "loss_pred: label shape does not match the mask",
    );
    let valid = mask.valid_count();
    if valid == 0 {
        return tape.scalar(0.0);
    }
    let m = tape.constant(&shape, mask.weights.clone());
    let d = tape.sub(y, y_hat);
    let sq = tape.mul(d, d);
    let masked = tape.mul(m, sq);
    let s = tape.reduce_sum(masked);
    tape.scale(s, mask.cols as f64 / valid as f64)
}

/// KL divergence of the local belief against the standard normal, averaged
/// over the batch: `(1/n) sum_i 0.5 sum_j (mu^2 + sigma^2 - 1 - ln sigma^2)`.
pub fn loss_kld(
    tape: &mut Tape,
    mu_hat: TensorId,
    ln_sigma_hat: TensorId,
    sigma_hat: TensorId,
) -> TensorId {
    let n = tape.shape(mu_hat)[0];
    let mu2 = tape.mul(mu_hat, mu_hat);
    let sig2 = tape.mul(sigma_hat, sigma_hat);
    let sum = tape.add(mu2, sig2);
    let shifted = tape.add_scalar(sum, -1.0);
    let ls2 = tape.scale(ln_sigma_hat, 2.0);
    let term = tape.sub(shifted, ls2);
    let s = tape.reduce_sum(term);
    tape.scale(s, 0.5 / n as f64)
}

/// Scalar handles for one stage's loss terms.
#[derive(Clone, Copy, Debug)]
pub struct StageLosses {
    pub pred: TensorId,
    pub recon: TensorId,
    pub kld: Option<TensorId>,
}

/// The combined training objective and its per-stage breakdown.
#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub total: TensorId,
    pub stages: Vec<StageLosses>,
}

/// Builds the full objective
/// `sum_k rho * pred_k + theta * (recon_k + omega * kld_k)`
/// over an existing forward trace. `ys` and `masks` are per stage.
pub fn loss_total(
    tape: &mut Tape,
    trace: &ForwardTrace,
    ys: &[TensorId],
    masks: &[&LabelMask],
    weights: &LossWeights,
) -> TotalLoss {
    assert_eq!(ys.len(), trace.stages.len(), "loss_total: one label tensor per stage");
    assert_eq!(masks.len(), trace.stages.len(), "loss_total: one mask per stage");
    let mut stages = Vec::with_capacity(trace.stages.len());
    let mut total: Option<TensorId> = None;
    for (k, st) in trace.stages.iter().enumerate() {
        let pred = loss_pred(tape, ys[k], st.y_hat, masks[k]);
        let recon = loss_recon(tape, st.x, st.x_recon);
        // The KLD consumes the local (pre-propagation) belief, so its
        // deviation comes from the local clamped log-deviation.
        let kld = match st.gaussian.as_ref() {
            Some(g) => {
                let sigma_hat = tape.exp(g.ln_sigma_hat);
                Some(loss_kld(tape, g.mu_hat, g.ln_sigma_hat, sigma_hat))
            }
            None => None,
        };
        let weighted_pred = tape.scale(pred, weights.rho);
        let inner = match kld {
            Some(kld_id) => {
                let wk = tape.scale(kld_id, weights.omega);
                tape.add(recon, wk)
            }
            None => recon,
        };
        let weighted_inner = tape.scale(inner, weights.theta);
        let stage_total = tape.add(weighted_pred, weighted_inner);
        total = Some(match total {
            Some(t) => tape.add(t, stage_total),
            None => stage_total,
        });
        stages.push(StageLosses { pred, recon, kld });
    }
    TotalLoss {
        total: total.expect("validated non-empty"),
        stages,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::finite_diff_check;

    fn config(variant: Variant) -> ModelConfig {
        ModelConfig::new(
            variant,
            vec![StageDims { p: 3, q: 2 }, StageDims { p: 2, q: 2 }],
            4,
        )
    }

    fn batch_inputs(tape: &mut Tape, n: usize) -> Vec<TensorId> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x1: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x2: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        vec![tape.constant(&[n, 3], x1), tape.constant(&[n, 2], x2)]
    }

    #[test]
    fn config_validation_rejects_degenerate_shapes() {
        let mut c = config(Variant::Sdk);
        c.d_h = 0;
        assert!(c.validate().is_err());
        let mut c = config(Variant::SAek);
        c.stages.clear();
        assert!(c.validate().is_err());
        let mut c = config(Variant::EAek);
        c.stages[1].q = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn param_names_are_unique_and_deterministic() {
        let mut store = ParamStore::new();
        let model = MultistageModel::new(&mut store, &config(Variant::Sdk), 0).unwrap();
        let names: Vec<String> = store.ids().map(|id| store.name(id).to_string()).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(names.len(), dedup.len(), "duplicate parameter names");
        assert_eq!(model.all_params().len(), store.len());

        let mut store2 = ParamStore::new();
        let _ = MultistageModel::new(&mut store2, &config(Variant::Sdk), 0).unwrap();
        for (a, b) in store.ids().zip(store2.ids()) {
            assert_eq!(store.values(a), store2.values(b));
        }
    }

    #[test]
    fn forward_shapes_per_variant() {
        for variant in [Variant::SAek, Variant::EAek, Variant::Sdk] {
            let mut store = ParamStore::new();
            let model = MultistageModel::new(&mut store, &config(variant), 1).unwrap();
            let mut tape = Tape::new();
            let xs = batch_inputs(&mut tape, 6);
            let trace = model.forward_all(&mut tape, &store, &xs, Mode::Eval, &mut EpsilonSource::Zero);
            assert_eq!(trace.n, 6);
            assert_eq!(tape.shape(trace.stages[0].y_hat), &[6, 2]);
            assert_eq!(tape.shape(trace.stages[1].y_hat), &[6, 2]);
            assert_eq!(tape.shape(trace.stages[0].x_recon), &[6, 3]);
            assert_eq!(tape.shape(trace.stages[1].x_recon), &[6, 2]);
            assert_eq!(tape.shape(trace.stages[0].h), &[6, 4]);
            assert_eq!(trace.stages[0].gaussian.is_some(), variant.is_stochastic());
        }
    }

    #[test]
    fn first_stage_latent_is_its_own_encoding() {
        for variant in [Variant::SAek, Variant::EAek] {
            let mut store = ParamStore::new();
            let model = MultistageModel::new(&mut store, &config(variant), 2).unwrap();
            let mut tape = Tape::new();
            let xs = batch_inputs(&mut tape, 4);
            let trace = model.forward_all(&mut tape, &store, &xs, Mode::Eval, &mut EpsilonSource::Zero);
            assert_eq!(trace.stages[0].h, trace.stages[0].h_hat);
        }
        let mut store = ParamStore::new();
        let model = MultistageModel::new(&mut store, &config(Variant::Sdk), 2).unwrap();
        let mut tape = Tape::new();
        let xs = batch_inputs(&mut tape, 4);
        let trace = model.forward_all(&mut tape, &store, &xs, Mode::Eval, &mut EpsilonSource::Zero);
        let g = trace.stages[0].gaussian.as_ref().unwrap();
        assert_eq!(g.mu, g.mu_hat);
        assert_eq!(g.ln_sigma, g.ln_sigma_hat);
    }

    #[test]
    fn downstream_inputs_never_reach_upstream_outputs() {
        for variant in [Variant::SAek, Variant::EAek, Variant::Sdk] {
            let mut store = ParamStore::new();
            let model = MultistageModel::new(&mut store, &config(variant), 3).unwrap();

            let run = |x2_fill: f64| {
                let mut tape = Tape::new();
                let x1: Vec<f64> = (0..4 * 3).map(|i| (i as f64) * 0.1 - 0.5).collect();
                let x2 = vec![x2_fill; 4 * 2];
                let xs = vec![tape.constant(&[4, 3], x1), tape.constant(&[4, 2], x2)];
                let trace = model.forward_all(&mut tape, &store, &xs, Mode::Eval, &mut EpsilonSource::Zero);
                tape.values(trace.stages[0].y_hat).to_vec()
            };

            assert_eq!(run(0.0), run(123.456), "variant {variant}");
        }
    }

    #[test]
    fn eval_forward_is_bitwise_reproducible() {
        let mut store = ParamStore::new();
        let model = MultistageModel::new(&mut store, &config(Variant::Sdk), 4).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let xs = batch_inputs(&mut tape, 5);
            let trace = model.forward_all(&mut tape, &store, &xs, Mode::Eval, &mut EpsilonSource::Zero);
            (
                tape.values(trace.stages[1].y_hat).to_vec(),
                tape.values(trace.stages[1].x_recon).to_vec(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sampled_training_pass_differs_from_eval() {
        let mut store = ParamStore::new();
        let model = MultistageModel::new(&mut store, &config(Variant::Sdk), 5).unwrap();
        let mut tape = Tape::new();
        let xs = batch_inputs(&mut tape, 5);
        let eval = model.forward_all(&mut tape, &store, &xs, Mode::Eval, &mut EpsilonSource::Zero);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape2 = Tape::new();
        let xs2 = batch_inputs(&mut tape2, 5);
        let train = model.forward_all(
            &mut tape2,
            &store,
            &xs2,
            Mode::Train,
            &mut EpsilonSource::Sample(&mut rng),
        );
        assert_ne!(
            tape.values(eval.stages[0].y_hat),
            tape2.values(train.stages[0].y_hat)
        );
        // The sample is mu + eps*sigma cell by cell.
        let g = train.stages[0].gaussian.as_ref().unwrap();
        let mu = tape2.values(g.mu);
        let sigma = tape2.values(g.sigma);
        let h = tape2.values(train.stages[0].h);
        for i in 0..h.len() {
            let want = mu[i] + g.epsilon[i] * sigma[i];
            assert!((h[i] - want).abs() <= 1e-15);
        }
    }

    #[test]
    fn eval_latent_is_the_belief_mean() {
        let mut store = ParamStore::new();
        let model = MultistageModel::new(&mut store, &config(Variant::Sdk), 6).unwrap();
        let mut tape = Tape::new();
        let xs = batch_inputs(&mut tape, 3);
        let trace = model.forward_all(&mut tape, &store, &xs, Mode::Eval, &mut EpsilonSource::Zero);
        for st in &trace.stages {
            let g = st.gaussian.as_ref().unwrap();
            assert_eq!(st.h, g.mu);
        }
    }

    #[test]
    fn recon_loss_is_mean_squared_row_distance() {
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 2], vec![1.0, 2.0, 0.0, 1.0]);
        let r = tape.constant(&[2, 2], vec![0.0; 4]);
        let l = loss_recon(&mut tape, x, r);
        assert_eq!(tape.value_scalar(l), 3.0); // (5 + 1) / 2
    }

    #[test]
    fn pred_loss_handles_masks() {
        // Unmasked: ||(1,2)||^2 / 1 = 5. One of two cells masked: 2*1/1 = 2.
        let y_vals = vec![1.0, 2.0];
        let mut tape = Tape::new();
        let y = tape.constant(&[1, 2], y_vals.clone());
        let yh = tape.constant(&[1, 2], vec![0.0, 0.0]);
        let full = LabelMask::all_valid(1, 2);
        let l = loss_pred(&mut tape, y, yh, &full);
        assert_eq!(tape.value_scalar(l), 5.0);

        let mut half = LabelMask::all_valid(1, 2);
        half.set_invalid(0, 1);
        let l = loss_pred(&mut tape, y, yh, &half);
        assert_eq!(tape.value_scalar(l), 2.0);

        let mut none = LabelMask::all_valid(1, 2);
        none.set_invalid(0, 0);
        none.set_invalid(0, 1);
        let l = loss_pred(&mut tape, y, yh, &none);
        assert_eq!(tape.value_scalar(l), 0.0);
    }

    #[test]
    fn excluded_row_contributes_nothing() {
        // Masking all of row 2 leaves exactly row 1's norm.
        let mut tape = Tape::new();
        let y = tape.constant(&[2, 2], vec![1.0, 2.0, 7.0, 7.0]);
        let yh = tape.constant(&[2, 2], vec![0.0; 4]);
        let mut mask = LabelMask::all_valid(2, 2);
        mask.set_invalid(1, 0);
        mask.set_invalid(1, 1);
        let l = loss_pred(&mut tape, y, yh, &mask);
        assert_eq!(tape.value_scalar(l), 5.0);
    }

    #[test]
    fn kld_closed_forms() {
        // Standard normal against itself is exactly zero.
        let mut tape = Tape::new();
        let mu = tape.constant(&[1, 2], vec![0.0, 0.0]);
        let ls = tape.constant(&[1, 2], vec![0.0, 0.0]);
        let sigma = tape.exp(ls);
        let l = loss_kld(&mut tape, mu, ls, sigma);
        assert!(tape.value_scalar(l).abs() <= 1e-15);

        // mu=1, sigma=1: 0.5*(1+1-1-0) = 0.5 per cell.
        let mu = tape.constant(&[1, 1], vec![1.0]);
        let ls = tape.constant(&[1, 1], vec![0.0]);
        let sigma = tape.exp(ls);
        let l = loss_kld(&mut tape, mu, ls, sigma);
        assert!((tape.value_scalar(l) - 0.5).abs() <= 1e-15);

        // mu=0, sigma^2=e: 0.5*(e-2).
        let mu = tape.constant(&[1, 1], vec![0.0]);
        let ls = tape.constant(&[1, 1], vec![0.5]);
        let sigma = tape.exp(ls);
        let l = loss_kld(&mut tape, mu, ls, sigma);
        assert!((tape.value_scalar(l) - 0.359_140_914_229_522_5).abs() <= 1e-15);
    }

    #[test]
    fn total_loss_composes_the_weighted_terms() {
        let mut store = ParamStore::new();
        let model = MultistageModel::new(&mut store, &config(Variant::Sdk), 7).unwrap();
        let mut tape = Tape::new();
        let xs = batch_inputs(&mut tape, 4);
        let ys = vec![
            tape.constant(&[4, 2], vec![0.3; 8]),
            tape.constant(&[4, 2], vec![-0.2; 8]),
        ];
        let masks: Vec<LabelMask> = vec![LabelMask::all_valid(4, 2), LabelMask::all_valid(4, 2)];
        let mask_refs: Vec<&LabelMask> = masks.iter().collect();
        let trace = model.forward_all(&mut tape, &store, &xs, Mode::Eval, &mut EpsilonSource::Zero);
        let w = LossWeights {
            rho: 1.0,
            theta: 0.1,
            omega: 5e-5,
        };
        let loss = loss_total(&mut tape, &trace, &ys, &mask_refs, &w);
        let mut want = 0.0;
        for st in &loss.stages {
            let p = tape.value_scalar(st.pred);
            let r = tape.value_scalar(st.recon);
            let k = tape.value_scalar(st.kld.unwrap());
            want += w.rho * p + w.theta * (r + w.omega * k);
        }
        let got = tape.value_scalar(loss.total);
        assert!((got - want).abs() <= 1e-15 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn gradients_certify_against_the_finite_difference_oracle() {
        // Small two-stage stochastic model, frozen noise, full objective.
        use rand::Rng;
        let cfg = config(Variant::Sdk);
        let mut store = ParamStore::new();
        let model = MultistageModel::new(&mut store, &cfg, 8).unwrap();
        // Central differences need an interior point: zero-initialized
        // biases can park rectifier preactivations exactly on the kink
        // (a fully clipped row feeds the next layer nothing but its bias),
        // where the numeric derivative is undefined. Jitter every
        // parameter off that set before checking.
        let mut jitter = ChaCha8Rng::seed_from_u64(77);
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.values_mut(id) {
                *v = jitter.gen_range(-0.3..0.3);
            }
        }
        let n = 4;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(31);
        let eps: Vec<Vec<f64>> = (0..2).map(|_| draw_epsilon(&mut noise_rng, n, cfg.d_h)).collect();
        let mut mask1 = LabelMask::all_valid(n, 2);
        mask1.set_invalid(2, 1); // keep the masked path on the gradient route
        let masks = vec![mask1, LabelMask::all_valid(n, 2)];

        let run = |s: &ParamStore, want_grads: bool| {
            let mut tape = Tape::new();
            let xs = batch_inputs(&mut tape, n);
            let ys = vec![
                tape.constant(&[n, 2], vec![0.25; n * 2]),
                tape.constant(&[n, 2], vec![-0.5; n * 2]),
            ];
            let mask_refs: Vec<&LabelMask> = masks.iter().collect();
            let trace = model.forward_all(&mut tape, s, &xs, Mode::Train, &mut EpsilonSource::Fixed(&eps));
            let w = LossWeights {
                rho: 1.0,
                theta: 0.1,
                omega: 5e-5,
            };
            let loss = loss_total(&mut tape, &trace, &ys, &mask_refs, &w);
            let val = tape.value_scalar(loss.total);
            if want_grads {
                tape.backward(loss.total);
                (val, tape.param_grads())
            } else {
                (val, Vec::new())
            }
        };

        let (_, grads) = run(&store, true);
        let report = finite_diff_check(&mut store, &grads, 1e-5, |s| run(s, false).0);
        assert!(
            report.within(1e-4),
            "max_rel_err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}
