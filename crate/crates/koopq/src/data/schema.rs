//! Declarative dataset schema and CSV ingestion.
//!
//! The schema is a user-editable TOML document assigning CSV columns to
//! stages, as features or as labels. Loading reads columns by header name,
//! so CSV column order never matters; every cell must parse as a number
//! with a `.` decimal separator.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelMask, StageBlock};
use crate::error::DataError;

/// Column roles of one stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSchema {
    pub features: Vec<String>,
    pub labels: Vec<String>,
}

/// Column roles of the whole line, in stage order. Rows are products.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    #[serde(rename = "stage")]
    pub stages: Vec<StageSchema>,
}

impl DatasetSchema {
    pub fn from_toml_str(text: &str) -> Result<Self, DataError> {
        let schema: DatasetSchema =
            toml::from_str(text).map_err(|e| DataError::Schema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("schema serializes")
    }

    /// Rejects empty stages, missing roles, and any column used twice.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.stages.len() < 2 {
            return Err(DataError::Schema(format!(
                "schema describes {} stage(s); a multistage line needs at least 2",
                self.stages.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for (k, stage) in self.stages.iter().enumerate() {
            if stage.features.is_empty() {
                return Err(DataError::Schema(format!("stage {} has no feature columns", k + 1)));
            }
            if stage.labels.is_empty() {
                return Err(DataError::Schema(format!("stage {} has no label columns", k + 1)));
            }
            for name in stage.features.iter().chain(stage.labels.iter()) {
                if !seen.insert(name.clone()) {
                    return Err(DataError::Schema(format!(
                        "column '{name}' is assigned to more than one role"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Derives the schema a dataset would round-trip through.
pub fn schema_of(ds: &Dataset) -> DatasetSchema {
    DatasetSchema {
        stages: ds
            .stages
            .iter()
            .map(|s| StageSchema {
                features: s.feature_names.clone(),
                labels: s.label_names.clone(),
            })
            .collect(),
    }
}

/// Loads a header-row CSV through a schema. Every row becomes one product;
/// label masks start all-valid (cleaning decides validity later). Data rows
/// are reported 1-based in errors.
pub fn load_dataset(csv_path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<Dataset, DataError> {
    let path = csv_path.as_ref();
    schema.validate()?;
    let file = std::fs::File::open(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut reader = csv::Reader::from_reader(file);
    let csv_err = |e: csv::Error| DataError::Csv {
        path: path.display().to_string(),
        source: e,
    };
    let headers = reader.headers().map_err(csv_err)?.clone();
    let col_index = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn { column: name.to_string() })
    };

    struct StagePlan {
        feature_cols: Vec<usize>,
        label_cols: Vec<usize>,
    }
    let mut plans = Vec::with_capacity(schema.stages.len());
    for stage in &schema.stages {
        let feature_cols = stage.features.iter().map(|n| col_index(n)).collect::<Result<Vec<_>, _>>()?;
        let label_cols = stage.labels.iter().map(|n| col_index(n)).collect::<Result<Vec<_>, _>>()?;
        plans.push(StagePlan { feature_cols, label_cols });
    }

    let mut xs: Vec<Vec<f64>> = schema.stages.iter().map(|_| Vec::new()).collect();
    let mut ys: Vec<Vec<f64>> = schema.stages.iter().map(|_| Vec::new()).collect();
    let mut n = 0usize;
    for (row_i, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let parse = |col: usize, name: &str| -> Result<f64, DataError> {
            let raw = record.get(col).unwrap_or("").trim();
            raw.parse::<f64>().map_err(|_| DataError::BadCell {
                row: row_i + 1,
                column: name.to_string(),
                value: raw.to_string(),
            })
        };
        for (k, plan) in plans.iter().enumerate() {
            for (j, &col) in plan.feature_cols.iter().enumerate() {
                xs[k].push(parse(col, &schema.stages[k].features[j])?);
            }
            for (j, &col) in plan.label_cols.iter().enumerate() {
                ys[k].push(parse(col, &schema.stages[k].labels[j])?);
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(DataError::TooFewRows { n: 0, min: 1 });
    }

    let stages = schema
        .stages
        .iter()
        .zip(xs.into_iter().zip(ys))
        .map(|(s, (x, y))| StageBlock {
            p: s.features.len(),
            q: s.labels.len(),
            x,
            y,
            mask: LabelMask::all_valid(n, s.labels.len()),
            feature_names: s.features.clone(),
            label_names: s.labels.clone(),
        })
        .collect();
    Ok(Dataset { n, stages })
}

/// Writes a dataset back to CSV: per stage, features then labels, using the
/// stored column names. Values print in shortest round-trip form, so a
/// write-then-load cycle reproduces every bit. Masked cells keep their
/// original value — the mask is recoverable by re-running the (idempotent)
/// cleaning rules.
pub fn write_dataset_csv(path: impl AsRef<Path>, ds: &Dataset) -> Result<(), DataError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| DataError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        }
    }
    let file = std::fs::File::create(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut writer = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| DataError::Csv {
        path: path.display().to_string(),
        source: e,
    };
    let mut header: Vec<&str> = Vec::new();
    for s in &ds.stages {
        header.extend(s.feature_names.iter().map(String::as_str));
        header.extend(s.label_names.iter().map(String::as_str));
    }
    writer.write_record(&header).map_err(csv_err)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for r in 0..ds.n {
        row.clear();
        for s in &ds.stages {
            row.extend(s.x_row(r).iter().map(|v| format!("{v}")));
            row.extend(s.y_row(r).iter().map(|v| format!("{v}")));
        }
        writer.write_record(&row).map_err(csv_err)?;
    }
    writer.flush().map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_schema() -> DatasetSchema {
        DatasetSchema {
            stages: vec![
                StageSchema {
                    features: vec!["f1".into(), "f2".into()],
                    labels: vec!["l1".into()],
                },
                StageSchema {
                    features: vec!["g1".into()],
                    labels: vec!["m1".into(), "m2".into()],
                },
            ],
        }
    }

    #[test]
    fn loads_columns_by_name_not_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        // Header deliberately scrambled relative to the schema order.
        std::fs::write(&path, "m2,f1,l1,g1,f2,m1\n6.0,1.0,3.0,4.0,2.0,5.0\n60,10,30,40,20,50\n").unwrap();
        let ds = load_dataset(&path, &toy_schema()).unwrap();
        assert_eq!(ds.n, 2);
        assert_eq!(ds.stages[0].x, vec![1.0, 2.0, 10.0, 20.0]);
        assert_eq!(ds.stages[0].y, vec![3.0, 30.0]);
        assert_eq!(ds.stages[1].x, vec![4.0, 40.0]);
        assert_eq!(ds.stages[1].y, vec![5.0, 6.0, 50.0, 60.0]);
        assert_eq!(ds.stages[1].mask.valid_count(), 4);
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, "f1,f2,l1,g1,m1\n1,2,3,4,5\n").unwrap();
        match load_dataset(&path, &toy_schema()) {
            Err(DataError::MissingColumn { column }) => assert_eq!(column, "m2"),
            other => panic!("expected a missing-column error, got {other:?}"),
        }
    }

    #[test]
    fn bad_cell_reports_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, "f1,f2,l1,g1,m1,m2\n1,2,3,4,5,6\n1,oops,3,4,5,6\n").unwrap();
        match load_dataset(&path, &toy_schema()) {
            Err(DataError::BadCell { row, column, value }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "f2");
                assert_eq!(value, "oops");
            }
            other => panic!("expected a bad-cell error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, "f1,f2,l1,g1,m1,m2\n").unwrap();
        assert!(matches!(
            load_dataset(&path, &toy_schema()),
            Err(DataError::TooFewRows { n: 0, .. })
        ));
    }

    #[test]
    fn schema_rejects_reused_columns_and_single_stage() {
        let mut s = toy_schema();
        s.stages[1].features[0] = "f1".into();
        assert!(matches!(s.validate(), Err(DataError::Schema(_))));

        let mut s = toy_schema();
        s.stages.truncate(1);
        assert!(matches!(s.validate(), Err(DataError::Schema(_))));
    }

    #[test]
    fn schema_toml_round_trip() {
        let s = toy_schema();
        let text = s.to_toml_string();
        let back = DatasetSchema::from_toml_str(&text).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn csv_write_then_load_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        let ds = Dataset {
            n: 3,
            stages: vec![
                StageBlock {
                    p: 2,
                    q: 1,
                    x: vec![0.1, -0.2, 1.0 / 3.0, 2.5e-17, f64::MIN_POSITIVE, 9.9],
                    y: vec![1.0, 2.0, 3.0],
                    mask: LabelMask::all_valid(3, 1),
                    feature_names: vec!["f1".into(), "f2".into()],
                    label_names: vec!["l1".into()],
                },
                StageBlock {
                    p: 1,
                    q: 2,
                    x: vec![-7.0, 0.125, 3.0],
                    y: vec![0.3, 0.7, -0.1, 1e-300, 4.0, 5.0],
                    mask: LabelMask::all_valid(3, 2),
                    feature_names: vec!["g1".into()],
                    label_names: vec!["m1".into(), "m2".into()],
                },
            ],
        };
        write_dataset_csv(&path, &ds).unwrap();
        let schema = schema_of(&ds);
        let back = load_dataset(&path, &schema).unwrap();
        assert_eq!(back.n, 3);
        for (a, b) in ds.stages.iter().zip(back.stages.iter()) {
            assert_eq!(a.x, b.x);
            assert_eq!(a.y, b.y);
        }
    }
}
