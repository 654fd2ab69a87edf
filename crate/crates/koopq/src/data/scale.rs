//! Feature standardization fit on the training split only.
//!
//! Features are z-scored; labels stay in native units so prediction errors
//! read directly in measurement units. A zero-deviation (constant) feature
//! maps to zero everywhere. Scaler parameters depend exclusively on
//! training-split rows — evaluation data never leaks into them.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;

/// Per-feature location and scale for one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageScaler {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// Standardization parameters for every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub stages: Vec<StageScaler>,
}

impl Scaler {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scaler serializes")
    }
}

/// Fits means and population deviations on the given training rows.
pub fn fit_scaler(ds: &Dataset, train_idx: &[usize]) -> Scaler {
    assert!(!train_idx.is_empty(), "fit_scaler: empty training split");
    let m = train_idx.len() as f64;
    let stages = ds
        .stages
        .iter()
        .map(|s| {
            let mut means = vec![0.0; s.p];
            let mut stds = vec![0.0; s.p];
            for j in 0..s.p {
                let mut sum = 0.0;
                for &r in train_idx {
                    sum += s.x[r * s.p + j];
                }
                let mean = sum / m;
                let mut ss = 0.0;
                for &r in train_idx {
                    let d = s.x[r * s.p + j] - mean;
                    ss += d * d;
                }
                means[j] = mean;
                stds[j] = (ss / m).sqrt();
            }
            StageScaler { means, stds }
        })
        .collect();
    Scaler { stages }
}

/// Standardizes every stage's features in place.
pub fn apply_scaler(ds: &mut Dataset, scaler: &Scaler) {
    assert_eq!(ds.stages.len(), scaler.stages.len(), "apply_scaler: stage count mismatch");
    for (s, sc) in ds.stages.iter_mut().zip(&scaler.stages) {
        assert_eq!(s.p, sc.means.len(), "apply_scaler: feature width mismatch");
        for r in 0..ds.n {
            for j in 0..s.p {
                let v = &mut s.x[r * s.p + j];
                *v = if sc.stds[j] > 0.0 {
                    (*v - sc.means[j]) / sc.stds[j]
                } else {
                    0.0
                };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabelMask, StageBlock};

    fn toy(x: Vec<f64>, p: usize) -> Dataset {
        let n = x.len() / p;
        Dataset {
            n,
            stages: vec![StageBlock {
                p,
                q: 1,
                x,
                y: vec![0.0; n],
                mask: LabelMask::all_valid(n, 1),
                feature_names: (0..p).map(|i| format!("f{i}")).collect(),
                label_names: vec!["y".into()],
            }],
        }
    }

    #[test]
    fn train_rows_standardize_to_zero_mean_unit_deviation() {
        let mut ds = toy(vec![1.0, 2.0, 3.0, 4.0, 100.0], 1);
        let train = [0, 1, 2, 3];
        let scaler = fit_scaler(&ds, &train);
        apply_scaler(&mut ds, &scaler);
        let mean: f64 = train.iter().map(|&r| ds.stages[0].x[r]).sum::<f64>() / 4.0;
        let var: f64 = train.iter().map(|&r| ds.stages[0].x[r].powi(2)).sum::<f64>() / 4.0 - mean * mean;
        assert!(mean.abs() <= 1e-12);
        assert!((var - 1.0).abs() <= 1e-12);
        // The held-out row keeps its offset: no re-centering around it.
        assert!(ds.stages[0].x[4] > 10.0);
    }

    #[test]
    fn constant_feature_maps_to_zero() {
        let mut ds = toy(vec![7.0; 6], 1);
        let scaler = fit_scaler(&ds, &[0, 1, 2]);
        apply_scaler(&mut ds, &scaler);
        assert_eq!(ds.stages[0].x, vec![0.0; 6]);
    }

    #[test]
    fn scaler_ignores_rows_outside_the_training_split() {
        let ds_a = toy(vec![1.0, 2.0, 3.0, 4.0, 5.0], 1);
        let mut ds_b = ds_a.clone();
        ds_b.stages[0].x[4] = 1e9; // perturb a held-out row only
        let sc_a = fit_scaler(&ds_a, &[0, 1, 2]);
        let sc_b = fit_scaler(&ds_b, &[0, 1, 2]);
        assert_eq!(sc_a, sc_b);
    }
}
