//! Label cleaning: dead-sensor column removal and outlier masking.
//!
//! Two rules, applied per stage in order:
//!
//! 1. A label column whose fraction of exact-zero readings exceeds 0.20 is
//!    removed outright (an intermittently dead sensor carries no signal).
//! 2. In every surviving column, a cell farther than 3.5 standard
//!    deviations from the column median is masked invalid. The deviation
//!    is the population standard deviation of the raw column, zeros
//!    included; values stay in place so the mask is auditable.
//!
//! Rows are never dropped. Applying the rules twice changes nothing: after
//! one pass no column has enough zeros left to trip rule 1, and rule 2
//! recomputes the same statistics from the same (unmodified) values.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelMask, StageBlock};

/// Zero-reading fraction above which a label column is removed.
pub const ZERO_FRACTION_LIMIT: f64 = 0.20;

/// Half-width of the plausibility window, in column standard deviations.
pub const OUTLIER_SIGMA: f64 = 3.5;

/// One removed label column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroppedColumn {
    pub name: String,
    pub zero_fraction: f64,
}

/// Outlier masking outcome for one surviving column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnOutliers {
    pub name: String,
    pub median: f64,
    pub std: f64,
    pub masked_cells: usize,
}

/// Cleaning outcome for one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCleaning {
    pub q_raw: usize,
    pub q_clean: usize,
    pub dropped: Vec<DroppedColumn>,
    pub outliers: Vec<ColumnOutliers>,
    /// Surviving columns with zero variance: exempt from rule 2 by
    /// arithmetic (no cell deviates), kept, and flagged for audit.
    pub zero_variance: Vec<String>,
}

/// Cleaning outcome for the whole dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub stages: Vec<StageCleaning>,
}

impl CleaningReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn column(values: &[f64], q: usize, col: usize, n: usize) -> Vec<f64> {
    (0..n).map(|r| values[r * q + col]).collect()
}

fn median_of(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite labels"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    var.sqrt()
}

/// Applies both rules to every stage's labels; features pass through
/// untouched. Existing invalid cells stay invalid.
pub fn clean_labels(ds: &Dataset) -> (Dataset, CleaningReport) {
    let mut stages_out = Vec::with_capacity(ds.stages.len());
    let mut report = Vec::with_capacity(ds.stages.len());
    for s in &ds.stages {
        let n = ds.n;
        // Rule 1: drop columns by zero fraction.
        let mut keep: Vec<usize> = Vec::with_capacity(s.q);
        let mut dropped = Vec::new();
        for c in 0..s.q {
            let zeros = (0..n).filter(|&r| s.y[r * s.q + c] == 0.0).count();
            let fraction = zeros as f64 / n as f64;
            if fraction > ZERO_FRACTION_LIMIT {
                dropped.push(DroppedColumn {
                    name: s.label_names[c].clone(),
                    zero_fraction: fraction,
                });
            } else {
                keep.push(c);
            }
        }
        let q_clean = keep.len();
        let mut y = Vec::with_capacity(n * q_clean);
        let mut mask = LabelMask::all_valid(n, q_clean);
        for r in 0..n {
            for (j, &c) in keep.iter().enumerate() {
                y.push(s.y[r * s.q + c]);
                if !s.mask.is_valid(r, c) {
                    mask.set_invalid(r, j);
                }
            }
        }
        let label_names: Vec<String> = keep.iter().map(|&c| s.label_names[c].clone()).collect();

        // Rule 2: mask cells implausibly far from the column median.
        let mut outliers = Vec::with_capacity(q_clean);
        let mut zero_variance = Vec::new();
        for j in 0..q_clean {
            let col = column(&y, q_clean, j, n);
            let median = median_of(col.clone());
            let std = population_std(&col);
            if std == 0.0 {
                zero_variance.push(label_names[j].clone());
            }
            let mut masked_cells = 0;
            let limit = OUTLIER_SIGMA * std;
            for (r, &v) in col.iter().enumerate() {
                if (v - median).abs() > limit {
                    if mask.is_valid(r, j) {
                        masked_cells += 1;
                    }
                    mask.set_invalid(r, j);
                }
            }
            outliers.push(ColumnOutliers {
                name: label_names[j].clone(),
                median,
                std,
                masked_cells,
            });
        }

        stages_out.push(StageBlock {
            p: s.p,
            q: q_clean,
            x: s.x.clone(),
            y,
            mask,
            feature_names: s.feature_names.clone(),
            label_names,
        });
        report.push(StageCleaning {
            q_raw: s.q,
            q_clean,
            dropped,
            outliers,
            zero_variance,
        });
    }
    (
        Dataset {
            n: ds.n,
            stages: stages_out,
        },
        CleaningReport { stages: report },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_stage(y: Vec<f64>, q: usize, names: Vec<&str>) -> Dataset {
        let n = y.len() / q;
        Dataset {
            n,
            stages: vec![
                StageBlock {
                    p: 1,
                    q,
                    x: vec![0.0; n],
                    y,
                    mask: LabelMask::all_valid(n, q),
                    feature_names: vec!["f".into()],
                    label_names: names.into_iter().map(String::from).collect(),
                },
                StageBlock {
                    p: 1,
                    q: 1,
                    x: vec![0.0; n],
                    y: vec![1.0; n],
                    mask: LabelMask::all_valid(n, 1),
                    feature_names: vec!["g".into()],
                    label_names: vec!["other".into()],
                },
            ],
        }
    }

    #[test]
    fn all_zero_column_is_dropped() {
        let n = 10;
        let mut y = Vec::new();
        for r in 0..n {
            y.push(0.0);
            y.push(r as f64 + 1.0);
        }
        let ds = one_stage(y, 2, vec!["dead", "live"]);
        let (clean, report) = clean_labels(&ds);
        assert_eq!(clean.stages[0].q, 1);
        assert_eq!(clean.stages[0].label_names, vec!["live"]);
        assert_eq!(report.stages[0].dropped.len(), 1);
        assert_eq!(report.stages[0].dropped[0].name, "dead");
        assert_eq!(report.stages[0].dropped[0].zero_fraction, 1.0);
        assert_eq!(report.stages[0].q_raw, 2);
        assert_eq!(report.stages[0].q_clean, 1);
    }

    #[test]
    fn zero_fraction_boundary_is_strict() {
        // Exactly 20% zeros stays; just above goes.
        let n = 10;
        let col = |zeros: usize| -> Vec<f64> {
            (0..n).map(|r| if r < zeros { 0.0 } else { r as f64 }).collect()
        };
        let interleave = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).flat_map(|(&x, &y)| [x, y]).collect()
        };
        let ds = one_stage(interleave(&col(2), &col(3)), 2, vec!["at20", "at30"]);
        let (clean, report) = clean_labels(&ds);
        assert_eq!(clean.stages[0].label_names, vec!["at20"]);
        assert_eq!(report.stages[0].dropped[0].name, "at30");
    }

    #[test]
    fn far_cell_is_masked_by_the_sigma_rule() {
        // 49 alternating +1/-1 readings and one 10.0: median 1, population
        // std sqrt(2.9316), so only the spike exceeds 3.5 deviations.
        let mut y: Vec<f64> = (0..49).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        y.push(10.0);
        let ds = one_stage(y, 1, vec!["v"]);
        let (clean, report) = clean_labels(&ds);
        assert_eq!(report.stages[0].outliers[0].masked_cells, 1);
        assert!(!clean.stages[0].mask.is_valid(49, 0));
        assert_eq!(clean.stages[0].mask.valid_count(), 49);
        assert_eq!(report.stages[0].outliers[0].median, 1.0);
        let expected_std = (2.9316f64).sqrt();
        assert!((report.stages[0].outliers[0].std - expected_std).abs() < 1e-12);
    }

    #[test]
    fn constant_column_is_kept_and_flagged() {
        let ds = one_stage(vec![5.0; 12], 1, vec!["const"]);
        let (clean, report) = clean_labels(&ds);
        assert_eq!(clean.stages[0].q, 1);
        assert_eq!(report.stages[0].zero_variance, vec!["const"]);
        assert_eq!(clean.stages[0].mask.valid_count(), 12);
    }

    #[test]
    fn cleaning_twice_changes_nothing() {
        let mut y: Vec<f64> = (0..49).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        y.push(10.0);
        let mut interleaved = Vec::new();
        for (i, v) in y.iter().enumerate() {
            interleaved.push(*v);
            interleaved.push(if i % 3 == 0 { 0.0 } else { 2.0 }); // 34% zeros: dropped
        }
        let ds = one_stage(interleaved, 2, vec!["v", "mostly_zero"]);
        let (once, report1) = clean_labels(&ds);
        let (twice, report2) = clean_labels(&once);
        assert_eq!(once.stages[0].y, twice.stages[0].y);
        assert_eq!(once.stages[0].mask, twice.stages[0].mask);
        assert_eq!(once.stages[0].label_names, twice.stages[0].label_names);
        // The second report sees already-clean input: nothing dropped, the
        // same cells already invalid.
        assert!(report2.stages[0].dropped.is_empty());
        assert_eq!(report1.stages[0].q_clean, report2.stages[0].q_clean);
        assert_eq!(report2.stages[0].outliers[0].masked_cells, 0);
    }

    #[test]
    fn features_and_other_stages_pass_through() {
        let ds = one_stage(vec![1.0; 10], 1, vec!["v"]);
        let (clean, _) = clean_labels(&ds);
        assert_eq!(clean.stages[0].x, ds.stages[0].x);
        assert_eq!(clean.stages[1].y, ds.stages[1].y);
        assert_eq!(clean.stages[1].q, 1);
    }
}
