//! Shared plumbing: output-directory resolution, atomic file writes,
//! input hashing, run manifests, and dataset-bundle I/O.
//!
//! A *bundle* is the directory `preprocess` writes: `schema.toml`,
//! `{train,val,test}.csv`, and a `{split}.mask.txt` sidecar per split with
//! one line of `0`/`1` characters per product — one character per label
//! column, `0` marking cells that cleaning ruled implausible. The CSVs
//! keep every value in place, so the sidecar alone decides validity.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use koopq::data::{load_dataset, Dataset, DatasetSchema};
use koopq::train::EvalReport;
use serde::Serialize;

/// Where a subcommand writes: the explicit `--out`, else `<workdir>/<sub>`.
pub fn resolve_out(workdir: &Path, sub: &str, out: &Option<PathBuf>) -> PathBuf {
    out.clone().unwrap_or_else(|| workdir.join(sub))
}

/// Writes via a sibling temp file and rename, so a crash never leaves a
/// half-written artifact at the final path.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp_name = path.as_os_str().to_owned();
    tmp_name.push(".tmp");
    let tmp = PathBuf::from(tmp_name);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("finalizing {}", path.display()))?;
    Ok(())
}

/// 64-bit FNV-1a digest, printed as 16 hex digits.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn file_hash(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(format!("{:016x}", fnv1a64(&bytes)))
}

#[derive(Serialize)]
struct ManifestInput {
    path: String,
    fnv1a64: String,
}

/// What a run did: tool version, subcommand, resolved settings, the exact
/// input files (with content digests), and the artifacts produced.
#[derive(Serialize)]
struct RunManifest {
    tool: String,
    command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    settings: serde_json::Value,
    inputs: Vec<ManifestInput>,
    outputs: Vec<String>,
}

pub struct Manifest {
    inner: RunManifest,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            inner: RunManifest {
                tool: format!("koopq {}", env!("CARGO_PKG_VERSION")),
                command: command.to_string(),
                seed: None,
                settings: serde_json::Value::Null,
                inputs: Vec::new(),
                outputs: Vec::new(),
            },
        }
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.inner.seed = Some(seed);
        self
    }

    pub fn settings<T: Serialize>(&mut self, value: &T) -> &mut Self {
        self.inner.settings = serde_json::to_value(value).expect("settings serialize");
        self
    }

    /// Records an input file along with its content digest.
    pub fn input(&mut self, path: &Path) -> anyhow::Result<&mut Self> {
        self.inner.inputs.push(ManifestInput {
            path: path.display().to_string(),
            fnv1a64: file_hash(path)?,
        });
        Ok(self)
    }

    pub fn inputs(&mut self, paths: &[PathBuf]) -> anyhow::Result<&mut Self> {
        for p in paths {
            self.input(p)?;
        }
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.inner.outputs.push(path.display().to_string());
        self
    }

    /// Writes `manifest.json` into the output directory, atomically.
    pub fn write(&self, out_dir: &Path) -> anyhow::Result<()> {
        let mut text =
            serde_json::to_string_pretty(&self.inner).expect("manifest serializes");
        text.push('\n');
        write_atomic(&out_dir.join("manifest.json"), text.as_bytes())
    }
}

/// Writes the validity sidecar: one line per product, one `0`/`1` per
/// label column, stages concatenated in line order.
pub fn write_mask_file(path: &Path, ds: &Dataset) -> anyhow::Result<()> {
    let mut text = String::new();
    for r in 0..ds.n {
        for s in &ds.stages {
            for c in 0..s.q {
                text.push(if s.mask.is_valid(r, c) { '1' } else { '0' });
            }
        }
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Applies a validity sidecar to a freshly loaded dataset.
pub fn apply_mask_file(path: &Path, ds: &mut Dataset) -> anyhow::Result<()> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let q_total: usize = ds.stages.iter().map(|s| s.q).sum();
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != ds.n {
        bail!(
            "{}: {} lines for {} products",
            path.display(),
            lines.len(),
            ds.n
        );
    }
    for (r, line) in lines.iter().enumerate() {
        if line.chars().count() != q_total {
            bail!(
                "{}: line {} has {} cells, expected {}",
                path.display(),
                r + 1,
                line.chars().count(),
                q_total
            );
        }
        let mut cells = line.chars();
        for s in ds.stages.iter_mut() {
            for c in 0..s.q {
                match cells.next() {
                    Some('1') => {}
                    Some('0') => s.mask.set_invalid(r, c),
                    other => bail!(
                        "{}: line {} holds {:?}; only '0' and '1' are allowed",
                        path.display(),
                        r + 1,
                        other
                    ),
                }
            }
        }
    }
    Ok(())
}

/// One split read back from a bundle, with the files that defined it.
pub fn load_one(dir: &Path, split: &str) -> anyhow::Result<(Dataset, Vec<PathBuf>)> {
    let schema_path = dir.join("schema.toml");
    let schema = DatasetSchema::load(&schema_path)
        .with_context(|| format!("loading bundle schema {}", schema_path.display()))?;
    let csv_path = dir.join(format!("{split}.csv"));
    let mut ds = load_dataset(&csv_path, &schema)
        .with_context(|| format!("loading {}", csv_path.display()))?;
    let mut files = vec![schema_path, csv_path];
    let mask_path = dir.join(format!("{split}.mask.txt"));
    if mask_path.exists() {
        apply_mask_file(&mask_path, &mut ds)?;
        files.push(mask_path);
    }
    if ds.n == 0 {
        bail!("bundle split '{split}' in {} is empty", dir.display());
    }
    Ok((ds, files))
}

/// All three splits of a bundle.
pub struct Bundle {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Every file the bundle was read from, for manifest hashing.
    pub files: Vec<PathBuf>,
}

pub fn load_bundle(dir: &Path) -> anyhow::Result<Bundle> {
    let (train, mut files) = load_one(dir, "train")?;
    let (val, f) = load_one(dir, "val")?;
    files.extend(f);
    let (test, f) = load_one(dir, "test")?;
    files.extend(f);
    files.sort();
    files.dedup();
    Ok(Bundle {
        train,
        val,
        test,
        files,
    })
}

pub fn parse_ratios(text: &str) -> anyhow::Result<[f64; 3]> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        bail!("--ratios wants three comma-separated fractions, got '{text}'");
    }
    let mut r = [0.0; 3];
    for (i, p) in parts.iter().enumerate() {
        r[i] = p
            .parse::<f64>()
            .map_err(|_| anyhow::anyhow!("--ratios holds a non-number: '{p}'"))?;
    }
    Ok(r)
}

pub fn parse_sizes(text: &str) -> anyhow::Result<Vec<usize>> {
    let mut sizes = Vec::new();
    for p in text.split(',').map(str::trim) {
        if p.is_empty() {
            continue;
        }
        sizes.push(
            p.parse::<usize>()
                .map_err(|_| anyhow::anyhow!("--sizes holds a non-integer: '{p}'"))?,
        );
    }
    if sizes.is_empty() {
        bail!("--sizes names no widths");
    }
    Ok(sizes)
}

/// One-line-per-stage summary of an evaluation report, on stdout.
pub fn print_report(label: &str, r: &EvalReport) {
    println!("{label}: {} rows", r.n_rows);
    for (k, s) in r.stages.iter().enumerate() {
        println!(
            "  stage {}: mse {:.6}  mae {:.6}  ({} valid cells)",
            k + 1,
            s.mse,
            s.mae,
            s.valid_cells
        );
    }
    println!("  total:   mse {:.6}  mae {:.6}", r.total_mse, r.total_mae);
}

/// Mean and sample standard deviation (n−1); zero spread below two values.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Writes CSV-ish lines assembled in memory; callers build full rows.
pub fn write_lines(path: &Path, lines: &[String]) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    for l in lines {
        writeln!(buf, "{l}").expect("in-memory write");
    }
    write_atomic(path, &buf)
}
