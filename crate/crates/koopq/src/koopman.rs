//! Koopman transition operators between consecutive stages.
//!
//! In the latent space the stage-to-stage dynamics are linear: the next
//! stage's latent is its own encoding plus a Koopman operator applied to the
//! upstream latent. Three operator families are supported:
//!
//! - a static dense matrix, shared across all products;
//! - a diagonal whose eigenvalues an auxiliary network produces from the
//!   upstream latent, so the operator adapts to the operating condition;
//! - a stochastic pair of such diagonals, one propagating the Gaussian
//!   belief's mean and one its log-deviation.
//!
//! Latents are batch rows, so applying a diagonal is an elementwise product
//! and applying the dense operator `K` to row vectors is `h K^T`, which
//! matches the column-vector convention `K h`.

use rand_chacha::ChaCha8Rng;

use crate::nn::EigenNet;
use crate::numcore::{ParamId, ParamStore, Tape, TensorId};

/// Transition operator from one stage's latent into the next.
#[derive(Clone, Debug)]
pub enum KoopmanTransition {
    /// Trainable dense d-by-d matrix, identical for every product.
    StaticDense { weight: ParamId },
    /// Diagonal with eigenvalues produced from the upstream latent.
    EigenDiagonal { net: EigenNet },
    /// Stochastic pair: diagonals for the belief mean and log-deviation,
    /// both produced from the upstream mean.
    StochasticEigenPair { mu_net: EigenNet, sigma_net: EigenNet },
}

/// Initialization range for the static dense operator: U(-0.1/sqrt(d),
/// +0.1/sqrt(d)), an order of magnitude tighter than layer init so early
/// propagation starts near zero.
pub fn static_dense_init(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    use rand::Rng;
    let bound = 0.1 / (d as f64).sqrt();
    (0..d * d).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl KoopmanTransition {
    pub fn new_static_dense(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        let weight = store.register(format!("{name}.weight"), vec![d, d], static_dense_init(rng, d));
        Self::StaticDense { weight }
    }

    pub fn new_eigen_diagonal(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        Self::EigenDiagonal {
            net: EigenNet::new(store, rng, &format!("{name}.eigen"), d),
        }
    }

    pub fn new_stochastic_pair(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        Self::StochasticEigenPair {
            mu_net: EigenNet::new(store, rng, &format!("{name}.eigen_mu"), d),
            sigma_net: EigenNet::new(store, rng, &format!("{name}.eigen_sigma"), d),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Self::StaticDense { weight } => vec![*weight],
            Self::EigenDiagonal { net } => net.params(),
            Self::StochasticEigenPair { mu_net, sigma_net } => {
                let mut p = mu_net.params();
                p.extend(sigma_net.params());
                p
            }
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, Self::StochasticEigenPair { .. })
    }

    /// Deterministic propagation: `h = h_hat + K h_prev`.
    ///
    /// Returns the propagated latent and, for the eigen variant, the
    /// eigenvalue diagonal it used.
    pub fn propagate_deterministic(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h_hat: TensorId,
        h_prev: TensorId,
    ) -> (TensorId, Option<TensorId>) {
        match self {
            Self::StaticDense { weight } => {
                let k = tape.param(store, *weight);
                let carried = tape.matmul_tb(h_prev, k);
                (tape.add(h_hat, carried), None)
            }
            Self::EigenDiagonal { net } => {
                let lambda = net.forward(tape, store, h_prev);
                let carried = tape.mul(lambda, h_prev);
                (tape.add(h_hat, carried), Some(lambda))
            }
            Self::StochasticEigenPair { .. } => {
                panic!("propagate_deterministic: stochastic pair operators propagate Gaussian beliefs")
            }
        }
    }

    /// Gaussian propagation: `mu = mu_hat + K_mu mu_prev` and
    /// `ln_sigma = ln_sigma_hat + K_sigma ln_sigma_prev`, with both
    /// diagonals produced from the upstream mean.
    pub fn propagate_gaussian(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mu_hat: TensorId,
        ln_sigma_hat: TensorId,
        mu_prev: TensorId,
        ln_sigma_prev: TensorId,
    ) -> PropagatedBelief {
        match self {
            Self::StochasticEigenPair { mu_net, sigma_net } => {
                let lambda_mu = mu_net.forward(tape, store, mu_prev);
                let lambda_sigma = sigma_net.forward(tape, store, mu_prev);
                let carried_mu = tape.mul(lambda_mu, mu_prev);
                let mu = tape.add(mu_hat, carried_mu);
                let carried_ls = tape.mul(lambda_sigma, ln_sigma_prev);
                let ln_sigma = tape.add(ln_sigma_hat, carried_ls);
                PropagatedBelief {
                    mu,
                    ln_sigma,
                    lambda_mu,
                    lambda_sigma,
                }
            }
            _ => panic!("propagate_gaussian: only stochastic pair operators propagate Gaussian beliefs"),
        }
    }
}

/// Result of propagating a Gaussian belief through a transition.
#[derive(Clone, Copy, Debug)]
pub struct PropagatedBelief {
    pub mu: TensorId,
    pub ln_sigma: TensorId,
    pub lambda_mu: TensorId,
    pub lambda_sigma: TensorId,
}

/// Materializes the diagonal matrix for an eigenvalue vector. Off-diagonal
/// entries are exactly zero.
pub fn build_koopman(lambda: &[f64]) -> Vec<Vec<f64>> {
    let d = lambda.len();
    let mut k = vec![vec![0.0; d]; d];
    for (i, &l) in lambda.iter().enumerate() {
        k[i][i] = l;
    }
    k
}

/// Dense matrix-vector product in the column convention, `K h`.
pub fn apply_koopman(k: &[Vec<f64>], h: &[f64]) -> Vec<f64> {
    let d = h.len();
    assert_eq!(k.len(), d, "apply_koopman: operator is {}x? but latent has {} entries", k.len(), d);
    k.iter()
        .map(|row| {
            assert_eq!(row.len(), d, "apply_koopman: ragged operator row");
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(h) {
                acc += a * b;
            }
            acc
        })
        .collect()
}

/// Closed-form Gaussian propagation on plain slices (no tape), used as the
/// reference the tape path is checked against:
/// `mu = mu_hat + lambda_mu . mu_prev`,
/// `ln_sigma = ln_sigma_hat + lambda_sigma . ln_sigma_prev`.
pub fn propagate_gaussian_params(
    mu_hat: &[f64],
    ln_sigma_hat: &[f64],
    lambda_mu: &[f64],
    lambda_sigma: &[f64],
    mu_prev: &[f64],
    ln_sigma_prev: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let d = mu_hat.len();
    assert!(
        [ln_sigma_hat.len(), lambda_mu.len(), lambda_sigma.len(), mu_prev.len(), ln_sigma_prev.len()]
            .iter()
            .all(|&l| l == d),
        "propagate_gaussian_params: all inputs must share one width"
    );
    let mu = (0..d).map(|i| mu_hat[i] + lambda_mu[i] * mu_prev[i]).collect();
    let ln_sigma = (0..d)
        .map(|i| ln_sigma_hat[i] + lambda_sigma[i] * ln_sigma_prev[i])
        .collect();
    (mu, ln_sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn build_koopman_has_exact_zero_off_diagonals() {
        let k = build_koopman(&[2.0, -1.0, 0.5]);
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    assert_eq!(k[i][j], [2.0, -1.0, 0.5][i]);
                } else {
                    assert_eq!(k[i][j], 0.0);
                }
            }
        }
    }

    #[test]
    fn diagonal_application_is_elementwise_product() {
        let k = build_koopman(&[2.0, -1.0]);
        assert_eq!(apply_koopman(&k, &[3.0, 4.0]), vec![6.0, -4.0]);
    }

    #[test]
    fn static_dense_uses_column_convention() {
        // K = [[0,1],[1,0]] swaps latent coordinates: K [2,3] = [3,2].
        let mut store = ParamStore::new();
        let mut r = rng(0);
        let trans = KoopmanTransition::new_static_dense(&mut store, &mut r, "t", 2);
        let KoopmanTransition::StaticDense { weight } = &trans else {
            unreachable!()
        };
        store.values_mut(*weight).copy_from_slice(&[0.0, 1.0, 1.0, 0.0]);
        let mut tape = Tape::new();
        let h_hat = tape.constant(&[1, 2], vec![1.0, 0.0]);
        let h_prev = tape.constant(&[1, 2], vec![2.0, 3.0]);
        let (h, lambda) = trans.propagate_deterministic(&mut tape, &store, h_hat, h_prev);
        assert_eq!(tape.values(h), &[4.0, 2.0]);
        assert!(lambda.is_none());
    }

    #[test]
    fn eigen_diagonal_with_zero_net_passes_encoding_through() {
        let mut store = ParamStore::new();
        let mut r = rng(1);
        let trans = KoopmanTransition::new_eigen_diagonal(&mut store, &mut r, "t", 3);
        for pid in trans.params() {
            store.values_mut(pid).fill(0.0);
        }
        let mut tape = Tape::new();
        let h_hat = tape.constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let h_prev = tape.constant(&[2, 3], vec![9.0; 6]);
        let (h, lambda) = trans.propagate_deterministic(&mut tape, &store, h_hat, h_prev);
        assert_eq!(tape.values(h), tape.values(h_hat));
        assert!(tape.values(lambda.unwrap()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_propagation_matches_hand_trace() {
        // mu_hat=[1,0.5], lambda_mu=[0.5,1], mu_prev=[2,1] -> mu=[2,1.5]
        // ln_sigma_hat=[0,1], lambda_sigma=[1,1], ln_sigma_prev=[1,0]
        //   -> ln_sigma=[1,1] -> sigma=[e,e]
        let (mu, ln_sigma) = propagate_gaussian_params(
            &[1.0, 0.5],
            &[0.0, 1.0],
            &[0.5, 1.0],
            &[1.0, 1.0],
            &[2.0, 1.0],
            &[1.0, 0.0],
        );
        assert_eq!(mu, vec![2.0, 1.5]);
        assert_eq!(ln_sigma, vec![1.0, 1.0]);
        let e = std::f64::consts::E;
        for ls in ln_sigma {
            assert!((ls.exp() - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn stochastic_pair_rejects_deterministic_propagation() {
        let mut store = ParamStore::new();
        let mut r = rng(2);
        let trans = KoopmanTransition::new_stochastic_pair(&mut store, &mut r, "t", 2);
        let mut tape = Tape::new();
        let a = tape.constant(&[1, 2], vec![0.0; 2]);
        let b = tape.constant(&[1, 2], vec![0.0; 2]);
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            trans.propagate_deterministic(&mut tape, &store, a, b)
        }));
        assert!(result.is_err());
    }

    #[test]
    fn tape_propagation_matches_closed_form_on_random_beliefs() {
        use rand::Rng;
        let mut r = rng(3);
        let d = 5;
        let mut store = ParamStore::new();
        let trans = KoopmanTransition::new_stochastic_pair(&mut store, &mut r, "t", d);
        for _ in 0..100 {
            let mu_hat: Vec<f64> = (0..d).map(|_| r.gen_range(-3.0..3.0)).collect();
            let ls_hat: Vec<f64> = (0..d).map(|_| r.gen_range(-2.0..2.0)).collect();
            let mu_prev: Vec<f64> = (0..d).map(|_| r.gen_range(-3.0..3.0)).collect();
            let ls_prev: Vec<f64> = (0..d).map(|_| r.gen_range(-2.0..2.0)).collect();

            let mut tape = Tape::new();
            let mh = tape.constant(&[1, d], mu_hat.clone());
            let lh = tape.constant(&[1, d], ls_hat.clone());
            let mp = tape.constant(&[1, d], mu_prev.clone());
            let lp = tape.constant(&[1, d], ls_prev.clone());
            let belief = trans.propagate_gaussian(&mut tape, &store, mh, lh, mp, lp);

            let lam_mu = tape.values(belief.lambda_mu).to_vec();
            let lam_sigma = tape.values(belief.lambda_sigma).to_vec();
            let (want_mu, want_ls) =
                propagate_gaussian_params(&mu_hat, &ls_hat, &lam_mu, &lam_sigma, &mu_prev, &ls_prev);
            for i in 0..d {
                assert!((tape.values(belief.mu)[i] - want_mu[i]).abs() <= 1e-12);
                assert!((tape.values(belief.ln_sigma)[i] - want_ls[i]).abs() <= 1e-12);
            }
            // Deviations recovered from any ln_sigma are strictly positive.
            let sigma = tape.exp(belief.ln_sigma);
            assert!(tape.values(sigma).iter().all(|&s| s > 0.0));
        }
    }
}
