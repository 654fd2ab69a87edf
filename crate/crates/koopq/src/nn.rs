//! Layers and small networks built on the autodiff tape.
//!
//! Parameters are registered in a [`ParamStore`] at construction time (with
//! deterministic names and ordering) and spliced onto a fresh tape at every
//! forward call. Initialization draws weights from U(-1/sqrt(fan_in),
//! +1/sqrt(fan_in)) and zeroes biases, from a caller-supplied seeded RNG.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numcore::{ParamId, ParamStore, Tape, TensorId};

/// Bounds applied to the log-deviation head output before exponentiation,
/// keeping deviations inside [e^-10, e^10].
pub const LOG_SIGMA_MIN: f64 = -10.0;
pub const LOG_SIGMA_MAX: f64 = 10.0;

/// Activation applied after a dense layer.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// One affine map `y = x W^T + b` with an optional activation.
/// The weight is stored out-by-in.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Self {
        assert!(in_dim > 0 && out_dim > 0, "dense layer '{name}': dims must be positive");
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weights: Vec<f64> = (0..out_dim * in_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        let weight = store.register(format!("{name}.weight"), vec![out_dim, in_dim], weights);
        let bias = store.register(format!("{name}.bias"), vec![out_dim], vec![0.0; out_dim]);
        Self {
            weight,
            bias,
            activation,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: TensorId) -> TensorId {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let lin = tape.matmul_tb(x, w);
        let pre = tape.add_row(lin, b);
        match self.activation {
            Activation::Relu => tape.relu(pre),
            Activation::Identity => pre,
        }
    }

    /// Forward returning the pre-activation as well (used by tests that
    /// check how far inputs sit from the ReLU kink).
    pub fn forward_with_preact(&self, tape: &mut Tape, store: &ParamStore, x: TensorId) -> (TensorId, TensorId) {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let lin = tape.matmul_tb(x, w);
        let pre = tape.add_row(lin, b);
        let out = match self.activation {
            Activation::Relu => tape.relu(pre),
            Activation::Identity => pre,
        };
        (out, pre)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// A stack of dense layers; hidden layers share one activation and the
/// final layer is linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// Builds from a width chain `[in, h1, ..., out]` (at least one layer).
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        widths: &[usize],
        hidden_activation: Activation,
    ) -> Self {
        assert!(widths.len() >= 2, "mlp '{name}': need at least an input and an output width");
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for i in 0..widths.len() - 1 {
            let act = if i + 2 == widths.len() {
                Activation::Identity
            } else {
                hidden_activation
            };
            layers.push(DenseLayer::new(
                store,
                rng,
                &format!("{name}.layer{i}"),
                widths[i],
                widths[i + 1],
                act,
            ));
        }
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: TensorId) -> TensorId {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, store, h);
        }
        h
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().expect("mlp has layers").in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("mlp has layers").out_dim
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(DenseLayer::params).collect()
    }
}

/// Width chain for a stage encoder: two hidden layers sharing the rounded
/// geometric mean of the input width and the latent width.
pub fn encoder_widths(p: usize, d_h: usize) -> Vec<usize> {
    let g = ((p as f64) * (d_h as f64)).sqrt().round().max(1.0) as usize;
    vec![p, g, g, d_h]
}

/// Width chain for the matching decoder (mirror of the encoder).
pub fn decoder_widths(p: usize, d_h: usize) -> Vec<usize> {
    let mut w = encoder_widths(p, d_h);
    w.reverse();
    w
}

/// Two single-layer affine heads mapping an encoded latent to the mean and
/// (clamped) log-deviation of its Gaussian belief.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub mu: DenseLayer,
    pub log_sigma: DenseLayer,
}

impl GaussianHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_h: usize) -> Self {
        Self {
            mu: DenseLayer::new(store, rng, &format!("{name}.mu"), d_h, d_h, Activation::Identity),
            log_sigma: DenseLayer::new(
                store,
                rng,
                &format!("{name}.log_sigma"),
                d_h,
                d_h,
                Activation::Identity,
            ),
        }
    }

    /// Returns `(mu, ln_sigma)`; `ln_sigma` is already clamped.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h_hat: TensorId) -> (TensorId, TensorId) {
        let mu = self.mu.forward(tape, store, h_hat);
        let raw = self.log_sigma.forward(tape, store, h_hat);
        let ln_sigma = tape.clamp(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX);
        (mu, ln_sigma)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.mu.params();
        p.extend(self.log_sigma.params());
        p
    }
}

/// Auxiliary network producing the diagonal of a Koopman operator from the
/// upstream latent: one hidden ReLU layer of the latent width.
///
/// The output layer starts at zero, so every operator begins with no
/// carry-over and coupling strength grows only where the loss asks for it —
/// the same near-zero start the dense operator uses. Latent directions whose
/// upstream content never helps downstream keep eigenvalues near zero
/// instead of holding a random initial magnitude forever.
#[derive(Clone, Debug)]
pub struct EigenNet {
    pub mlp: Mlp,
}

impl EigenNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_h: usize) -> Self {
        let mlp = Mlp::new(store, rng, name, &[d_h, d_h, d_h], Activation::Relu);
        let out = mlp.layers.last().expect("eigen net has layers");
        store.values_mut(out.weight).iter_mut().for_each(|v| *v = 0.0);
        Self { mlp }
    }

    /// Per-row eigenvalue diagonal, shape n-by-d.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h_prev: TensorId) -> TensorId {
        self.mlp.forward(tape, store, h_prev)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }
}

/// Draws one noise value per latent cell for the reparameterized sample.
pub fn draw_epsilon(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
    use rand_distr::StandardNormal;
    (0..n * d).map(|_| rng.sample(StandardNormal)).collect()
}
