//! Post-training analysis: input sensitivities of the final-stage
//! predictions, the transition operators' eigenvalue spectra at a nominal
//! operating point, latent-width sweeps, and error binned by product
//! magnitude.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{ModelError, TrainError};
use crate::koopman::KoopmanTransition;
use crate::model::{EpsilonSource, Mode, MultistageModel, Variant};
use crate::nn::EigenNet;
use crate::numcore::{ParamStore, Tape};
use crate::train::{evaluate, train_full, TrainConfig};

/// Spacing of the magnitude-bin grid (bin windows span one step on each
/// side of their center, so neighbouring bins overlap).
pub const BIN_STEP: f64 = 0.1;

fn create_parent(path: &Path) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

/// Mean absolute influence of every process variable on every final-stage
/// quality prediction, over an evaluation split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SensitivityMap {
    /// Final-stage quality labels (one matrix row each).
    pub label_names: Vec<String>,
    /// Process variables of all stages, in line order (one column each).
    pub feature_names: Vec<String>,
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols` matrix of mean absolute derivatives.
    pub values: Vec<f64>,
}

impl SensitivityMap {
    pub fn at(&self, label: usize, feature: usize) -> f64 {
        self.values[label * self.cols + feature]
    }

    /// Writes a CSV with one row per final-stage label and one column per
    /// process variable.
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        create_parent(path)?;
        let mut f = BufWriter::new(File::create(path)?);
        writeln!(f, "label,{}", self.feature_names.join(","))?;
        for (j, name) in self.label_names.iter().enumerate() {
            let row: Vec<String> = (0..self.cols).map(|i| format!("{}", self.at(j, i))).collect();
            writeln!(f, "{},{}", name, row.join(","))?;
        }
        f.flush()
    }
}

/// Measures how strongly each process variable moves each final-stage
/// prediction: the derivative of every prediction with respect to every
/// input, absolute value averaged over the split's rows, with latent noise
/// off. Inputs are taken in the units the model consumes (standardized when
/// the split was standardized).
pub fn sensitivity(
    model: &MultistageModel,
    store: &ParamStore,
    ds: &Dataset,
) -> Result<SensitivityMap, TrainError> {
    if ds.n == 0 {
        return Err(TrainError::DataMismatch("sensitivity split is empty".into()));
    }
    crate::train::check_dims(&model.config, ds, "sensitivity")?;
    let last = ds.stages.len() - 1;
    let q = ds.stages[last].q;
    let cols: usize = ds.stages.iter().map(|s| s.p).sum();
    let mut sums = vec![0.0; q * cols];

    let all: Vec<usize> = (0..ds.n).collect();
    for chunk in all.chunks(crate::train::EVAL_CHUNK) {
        for j in 0..q {
            let mut tape = Tape::new();
            let xs: Vec<_> = ds
                .stages
                .iter()
                .map(|s| tape.variable(&[chunk.len(), s.p], crate::train::gather_x(s, chunk)))
                .collect();
            let trace = model.forward_all(&mut tape, store, &xs, Mode::Eval, &mut EpsilonSource::Zero);
            // Rows pass through the model independently, so the gradient of
            // the column sum recovers every row's own derivative.
            let mut pick = vec![0.0; chunk.len() * q];
            for r in 0..chunk.len() {
                pick[r * q + j] = 1.0;
            }
            let mask = tape.constant(&[chunk.len(), q], pick);
            let selected = tape.mul(trace.stages[last].y_hat, mask);
            let total = tape.reduce_sum(selected);
            tape.backward(total);
            let mut offset = 0;
            for (k, s) in ds.stages.iter().enumerate() {
                if let Some(g) = tape.grad(xs[k]) {
                    for r in 0..chunk.len() {
                        for i in 0..s.p {
                            sums[j * cols + offset + i] += g[r * s.p + i].abs();
                        }
                    }
                }
                offset += s.p;
            }
        }
    }
    let n = ds.n as f64;
    let values = sums.into_iter().map(|v| v / n).collect();
    let feature_names = ds
        .stages
        .iter()
        .flat_map(|s| s.feature_names.iter().cloned())
        .collect();
    Ok(SensitivityMap {
        label_names: ds.stages[last].label_names.clone(),
        feature_names,
        rows: q,
        cols,
        values,
    })
}

/// One eigenvalue family of one transition operator at the nominal point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumSide {
    /// Raw eigenvalue magnitudes `|lambda_i|`.
    pub magnitudes: Vec<f64>,
    /// Magnitudes divided by the largest one (all zeros when every
    /// magnitude is zero).
    pub normalized: Vec<f64>,
    /// How many normalized magnitudes exceed the threshold.
    pub active: usize,
}

fn spectrum_side(lambda: &[f64], tau: f64) -> SpectrumSide {
    let magnitudes: Vec<f64> = lambda.iter().map(|v| v.abs()).collect();
    let max = magnitudes.iter().cloned().fold(0.0, f64::max);
    let normalized: Vec<f64> = if max == 0.0 {
        vec![0.0; magnitudes.len()]
    } else {
        magnitudes.iter().map(|m| m / max).collect()
    };
    let active = normalized.iter().filter(|&&v| v > tau).count();
    SpectrumSide {
        magnitudes,
        normalized,
        active,
    }
}

/// Spectrum of the operator carrying stage `from_stage` into `to_stage`
/// (1-based), evaluated at the split's mean upstream latent.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransitionSpectrum {
    pub from_stage: usize,
    pub to_stage: usize,
    /// The operating point: mean over the split of the upstream latent fed
    /// to the eigenvalue networks.
    pub nominal: Vec<f64>,
    /// Mean-path eigenvalues (the only family for the deterministic eigen
    /// variant).
    pub mu: SpectrumSide,
    /// Deviation-path eigenvalues; present only for the stochastic variant.
    pub sigma: Option<SpectrumSide>,
}

/// All transition spectra of a model at one threshold.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KoopmanSpectrum {
    pub tau: f64,
    pub transitions: Vec<TransitionSpectrum>,
}

impl KoopmanSpectrum {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("spectrum serializes");
        s.push('\n');
        s
    }
}

fn eval_eigen_net(net: &EigenNet, store: &ParamStore, nominal: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(&[1, nominal.len()], nominal.to_vec());
    let out = net.forward(&mut tape, store, x);
    tape.values(out).to_vec()
}

/// Exports every transition operator's eigenvalue spectrum at the nominal
/// operating point of the given split.
///
/// The nominal point of the operator into stage `k+1` is the split mean of
/// the upstream latent its eigenvalue networks consume (the propagated
/// belief mean for the stochastic variant). Only eigenvalue-parameterized
/// operators have a spectrum to export; the static dense variant is
/// refused.
pub fn export_koopman(
    model: &MultistageModel,
    store: &ParamStore,
    ds: &Dataset,
    tau: f64,
) -> Result<KoopmanSpectrum, TrainError> {
    if model.config.variant == Variant::SAek {
        return Err(ModelError::NotEigenVariant { stage: 1 }.into());
    }
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(TrainError::InvalidConfig(format!(
            "spectrum threshold must be non-negative and finite, got {tau}"
        )));
    }
    if ds.n == 0 {
        return Err(TrainError::DataMismatch("spectrum split is empty".into()));
    }
    crate::train::check_dims(&model.config, ds, "spectrum")?;
    let d = model.config.d_h;
    let n_trans = model.n_stages() - 1;
    let mut sums = vec![vec![0.0; d]; n_trans];

    let all: Vec<usize> = (0..ds.n).collect();
    for chunk in all.chunks(crate::train::EVAL_CHUNK) {
        let mut tape = Tape::new();
        let xs: Vec<_> = ds
            .stages
            .iter()
            .map(|s| tape.constant(&[chunk.len(), s.p], crate::train::gather_x(s, chunk)))
            .collect();
        let trace = model.forward_all(&mut tape, store, &xs, Mode::Eval, &mut EpsilonSource::Zero);
        for (k, sum) in sums.iter_mut().enumerate() {
            // With noise off the latent equals the belief mean, so this is
            // exactly what the eigenvalue networks consume downstream.
            let h = tape.values(trace.stages[k].h);
            for r in 0..chunk.len() {
                for i in 0..d {
                    sum[i] += h[r * d + i];
                }
            }
        }
    }
    let n = ds.n as f64;
    let mut transitions = Vec::with_capacity(n_trans);
    for (k, sum) in sums.iter().enumerate() {
        let nominal: Vec<f64> = sum.iter().map(|v| v / n).collect();
        let trans = model.stages[k]
            .transition
            .as_ref()
            .expect("non-final stages carry transitions");
        let (mu, sigma) = match trans {
            KoopmanTransition::EigenDiagonal { net } => {
                (spectrum_side(&eval_eigen_net(net, store, &nominal), tau), None)
            }
            KoopmanTransition::StochasticEigenPair { mu_net, sigma_net } => (
                spectrum_side(&eval_eigen_net(mu_net, store, &nominal), tau),
                Some(spectrum_side(&eval_eigen_net(sigma_net, store, &nominal), tau)),
            ),
            KoopmanTransition::StaticDense { .. } => {
                return Err(ModelError::NotEigenVariant { stage: k + 1 }.into())
            }
        };
        transitions.push(TransitionSpectrum {
            from_stage: k + 1,
            to_stage: k + 2,
            nominal,
            mu,
            sigma,
        });
    }
    Ok(KoopmanSpectrum { tau, transitions })
}

/// Outcome of training one model at one latent width.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub d_h: usize,
    /// Wall-clock seconds spent training and evaluating this width.
    pub seconds: f64,
    /// Final-stage MSE on the validation split; absent when the run failed.
    pub last_stage_val_mse: Option<f64>,
    pub error: Option<String>,
}

/// Validation error and runtime across candidate latent widths.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatentSweep {
    pub points: Vec<SweepPoint>,
}

impl LatentSweep {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("sweep serializes");
        s.push('\n');
        s
    }

    /// Writes `d_h,last_stage_val_mse,seconds,error` rows (blank fields
    /// where a run failed).
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        create_parent(path)?;
        let mut f = BufWriter::new(File::create(path)?);
        writeln!(f, "d_h,last_stage_val_mse,seconds,error")?;
        for p in &self.points {
            let mse = p.last_stage_val_mse.map(|v| format!("{v}")).unwrap_or_default();
            let err = p.error.as_deref().unwrap_or("");
            writeln!(f, "{},{},{},{}", p.d_h, mse, p.seconds, err.replace(',', ";"))?;
        }
        f.flush()
    }
}

/// Trains one model per candidate latent width (same seed and budgets for
/// all) and records the final-stage validation MSE and the wall-clock cost.
/// A width that fails to train is recorded with its error and does not stop
/// the sweep.
pub fn latent_sweep(
    train: &Dataset,
    val: &Dataset,
    sizes: &[usize],
    base: &TrainConfig,
) -> LatentSweep {
    let mut points = Vec::with_capacity(sizes.len());
    for &d_h in sizes {
        let mut cfg = base.clone();
        cfg.d_h = d_h;
        let started = Instant::now();
        let result = train_full(train, val, &cfg).and_then(|tm| evaluate(&tm.model, &tm.store, val));
        let seconds = started.elapsed().as_secs_f64();
        match result {
            Ok(report) => points.push(SweepPoint {
                d_h,
                seconds,
                last_stage_val_mse: report.stages.last().map(|s| s.mse),
                error: None,
            }),
            Err(e) => points.push(SweepPoint {
                d_h,
                seconds,
                last_stage_val_mse: None,
                error: Some(e.to_string()),
            }),
        }
    }
    LatentSweep { points }
}

/// One magnitude bin: products whose final-stage label norm falls within
/// one grid step of the center.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaeBin {
    pub center: f64,
    /// Products in the window.
    pub count: usize,
    /// Mean over the window of each product's own mean absolute error.
    pub mean_mae: f64,
    /// Population deviation of the same per-product errors.
    pub std_mae: f64,
}

/// Final-stage absolute error grouped by product magnitude.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BinnedMae {
    pub bins: Vec<MaeBin>,
}

impl BinnedMae {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("bins serialize");
        s.push('\n');
        s
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        create_parent(path)?;
        let mut f = BufWriter::new(File::create(path)?);
        writeln!(f, "center,count,mean_mae,std_mae")?;
        for b in &self.bins {
            writeln!(f, "{},{},{},{}", b.center, b.count, b.mean_mae, b.std_mae)?;
        }
        f.flush()
    }
}

/// Groups final-stage prediction error by where each product sits in label
/// space: the x-axis is the Euclidean norm of the product's valid
/// final-stage labels, bins sit on a tenth-spaced grid spanning the
/// observed norms, and each window reaches one grid step to either side,
/// so neighbouring windows overlap. Products with no valid final-stage
/// labels are left out; empty windows are omitted.
pub fn binned_mae(
    model: &MultistageModel,
    store: &ParamStore,
    ds: &Dataset,
) -> Result<BinnedMae, TrainError> {
    if ds.n == 0 {
        return Err(TrainError::DataMismatch("binning split is empty".into()));
    }
    crate::train::check_dims(&model.config, ds, "binning")?;
    let last = ds.stages.len() - 1;
    let q = ds.stages[last].q;

    // Per product: norm of its valid labels and its mean absolute error.
    let mut rows: Vec<(f64, f64)> = Vec::with_capacity(ds.n);
    let all: Vec<usize> = (0..ds.n).collect();
    for chunk in all.chunks(crate::train::EVAL_CHUNK) {
        let mut tape = Tape::new();
        let xs: Vec<_> = ds
            .stages
            .iter()
            .map(|s| tape.constant(&[chunk.len(), s.p], crate::train::gather_x(s, chunk)))
            .collect();
        let trace = model.forward_all(&mut tape, store, &xs, Mode::Eval, &mut EpsilonSource::Zero);
        let y_hat = tape.values(trace.stages[last].y_hat);
        let block = &ds.stages[last];
        for (r_local, &r) in chunk.iter().enumerate() {
            let y = block.y_row(r);
            let mut sq = 0.0;
            let mut abs = 0.0;
            let mut valid = 0usize;
            for c in 0..q {
                if block.mask.is_valid(r, c) {
                    sq += y[c] * y[c];
                    abs += (y[c] - y_hat[r_local * q + c]).abs();
                    valid += 1;
                }
            }
            if valid > 0 {
                rows.push((sq.sqrt(), abs / valid as f64));
            }
        }
    }
    if rows.is_empty() {
        return Ok(BinnedMae { bins: Vec::new() });
    }

    let min = rows.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let max = rows.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let k_min = (min / BIN_STEP).floor() as i64;
    let k_max = (max / BIN_STEP).ceil() as i64;
    let mut bins = Vec::new();
    for k in k_min..=k_max {
        let center = k as f64 * BIN_STEP;
        let members: Vec<f64> = rows
            .iter()
            .filter(|(norm, _)| (norm - center).abs() <= BIN_STEP)
            .map(|&(_, mae)| mae)
            .collect();
        if members.is_empty() {
            continue;
        }
        let count = members.len();
        let mean = members.iter().sum::<f64>() / count as f64;
        let var = members.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / count as f64;
        bins.push(MaeBin {
            center,
            count,
            mean_mae: mean,
            std_mae: var.sqrt(),
        });
    }
    Ok(BinnedMae { bins })
}
