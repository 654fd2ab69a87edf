//! Dataset handling: schema-driven CSV loading, label cleaning,
//! standardization, splitting, and synthetic process generation.
//!
//! One [`Dataset`] carries every stage's numeric block over a shared row
//! count (one row per product). Cleaning never drops rows: implausible
//! label cells are masked out instead, and the mask follows the data into
//! every loss and metric.

pub mod clean;
pub mod scale;
pub mod schema;
pub mod split;
pub mod synth;

pub use clean::{clean_labels, CleaningReport};
pub use scale::{apply_scaler, fit_scaler, Scaler};
pub use schema::{load_dataset, schema_of, write_dataset_csv, DatasetSchema, StageSchema};
pub use split::{split, SplitIndices};
pub use synth::{
    generate_synthetic, two_stage_line_surrogate, SurrogateConfig, SurrogateTruth, SyntheticConfig,
    SyntheticTruth,
};

/// Per-cell validity weights (1.0 valid, 0.0 masked) over an n-by-q label
/// matrix, stored row-major to line up with the label values.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

impl LabelMask {
    pub fn all_valid(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![1.0; rows * cols],
        }
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.weights[row * self.cols + col] != 0.0
    }

    pub fn set_invalid(&mut self, row: usize, col: usize) {
        self.weights[row * self.cols + col] = 0.0;
    }

    /// Number of valid cells overall.
    pub fn valid_count(&self) -> usize {
        self.weights.iter().filter(|&&w| w != 0.0).count()
    }

    /// Number of valid cells in one row.
    pub fn valid_in_row(&self, row: usize) -> usize {
        self.weights[row * self.cols..(row + 1) * self.cols]
            .iter()
            .filter(|&&w| w != 0.0)
            .count()
    }

    /// Restriction of the mask to a row subset, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut weights = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            weights.extend_from_slice(&self.weights[r * self.cols..(r + 1) * self.cols]);
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            weights,
        }
    }
}

/// One stage's block: process variables `x` (n-by-p), quality labels `y`
/// (n-by-q), and the label validity mask.
#[derive(Clone, Debug)]
pub struct StageBlock {
    pub p: usize,
    pub q: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub mask: LabelMask,
    pub feature_names: Vec<String>,
    pub label_names: Vec<String>,
}

impl StageBlock {
    pub fn x_row(&self, r: usize) -> &[f64] {
        &self.x[r * self.p..(r + 1) * self.p]
    }

    pub fn y_row(&self, r: usize) -> &[f64] {
        &self.y[r * self.q..(r + 1) * self.q]
    }
}

/// Multi-stage dataset over one shared set of products.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub n: usize,
    pub stages: Vec<StageBlock>,
}

impl Dataset {
    /// Row subset in the given order (used to materialize splits).
    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        let stages = self
            .stages
            .iter()
            .map(|s| {
                let mut x = Vec::with_capacity(idx.len() * s.p);
                let mut y = Vec::with_capacity(idx.len() * s.q);
                for &r in idx {
                    x.extend_from_slice(s.x_row(r));
                    y.extend_from_slice(s.y_row(r));
                }
                StageBlock {
                    p: s.p,
                    q: s.q,
                    x,
                    y,
                    mask: s.mask.select_rows(idx),
                    feature_names: s.feature_names.clone(),
                    label_names: s.label_names.clone(),
                }
            })
            .collect();
        Dataset {
            n: idx.len(),
            stages,
        }
    }

    /// (p, q) per stage, in stage order.
    pub fn dims(&self) -> Vec<(usize, usize)> {
        self.stages.iter().map(|s| (s.p, s.q)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_counts_and_row_selection() {
        let mut mask = LabelMask::all_valid(3, 2);
        mask.set_invalid(1, 0);
        assert_eq!(mask.valid_count(), 5);
        assert_eq!(mask.valid_in_row(1), 1);
        assert!(!mask.is_valid(1, 0));
        let sub = mask.select_rows(&[2, 1]);
        assert_eq!(sub.rows, 2);
        assert!(sub.is_valid(0, 0));
        assert!(!sub.is_valid(1, 0));
    }

    #[test]
    fn dataset_row_selection_keeps_stage_alignment() {
        let stage = StageBlock {
            p: 2,
            q: 1,
            x: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            y: vec![10.0, 20.0, 30.0],
            mask: LabelMask::all_valid(3, 1),
            feature_names: vec!["a".into(), "b".into()],
            label_names: vec!["y".into()],
        };
        let data = Dataset {
            n: 3,
            stages: vec![stage],
        };
        let sub = data.select_rows(&[2, 0]);
        assert_eq!(sub.n, 2);
        assert_eq!(sub.stages[0].x, vec![5.0, 6.0, 1.0, 2.0]);
        assert_eq!(sub.stages[0].y, vec![30.0, 10.0]);
    }
}
