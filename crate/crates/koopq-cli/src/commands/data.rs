//! Dataset creation (`synth`) and preparation (`preprocess`).

use std::path::Path;

use anyhow::{bail, Context};
use koopq::data::{
    apply_scaler, clean_labels, fit_scaler, generate_synthetic, load_dataset, schema_of, split,
    two_stage_line_surrogate, write_dataset_csv, DatasetSchema, SurrogateConfig, SyntheticConfig,
};
use serde_json::json;

use crate::support::{self, Manifest};
use crate::{PreprocessCmd, SynthCmd, SynthKind};

pub fn synth(workdir: &Path, args: &SynthCmd) -> anyhow::Result<()> {
    let out = support::resolve_out(workdir, "synth", &args.out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let mut manifest = Manifest::new("synth");
    manifest.seed(args.seed);
    let ds = match args.kind {
        SynthKind::Line => {
            if args.coupling.is_some() {
                bail!("--coupling only applies to --kind coupled");
            }
            let cfg = SurrogateConfig::new(args.n, args.seed);
            let (ds, _truth) = two_stage_line_surrogate(&cfg)?;
            manifest.settings(&cfg);
            ds
        }
        SynthKind::Coupled => {
            let mut cfg = SyntheticConfig::new(args.n, args.seed);
            if let Some(c) = args.coupling {
                cfg.coupling = c;
            }
            let (ds, _truth) = generate_synthetic(&cfg)?;
            manifest.settings(&cfg);
            ds
        }
    };

    let data_path = out.join("data.csv");
    write_dataset_csv(&data_path, &ds)?;
    let schema_path = out.join("schema.toml");
    support::write_atomic(&schema_path, schema_of(&ds).to_toml_string().as_bytes())?;
    manifest.output(&data_path).output(&schema_path);
    manifest.write(&out)?;

    println!(
        "generated {} products across {} stages -> {}",
        ds.n,
        ds.stages.len(),
        out.display()
    );
    Ok(())
}

pub fn preprocess(workdir: &Path, args: &PreprocessCmd) -> anyhow::Result<()> {
    let out = support::resolve_out(workdir, "preprocessed", &args.out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let ratios = support::parse_ratios(&args.ratios)?;

    let schema = DatasetSchema::load(&args.schema)
        .with_context(|| format!("loading schema {}", args.schema.display()))?;
    let raw = load_dataset(&args.input, &schema)
        .with_context(|| format!("loading {}", args.input.display()))?;

    let (cleaned, report) = clean_labels(&raw);
    let idx = split(cleaned.n, ratios, args.seed)?;
    let scaler = fit_scaler(&cleaned, &idx.train);
    let mut scaled = cleaned;
    apply_scaler(&mut scaled, &scaler);
    let (tr, va, te) = idx.materialize(&scaled);

    let mut manifest = Manifest::new("preprocess");
    manifest
        .seed(args.seed)
        .settings(&json!({ "ratios": ratios, "seed": args.seed }));
    manifest.input(&args.schema)?.input(&args.input)?;

    let schema_path = out.join("schema.toml");
    support::write_atomic(&schema_path, schema_of(&tr).to_toml_string().as_bytes())?;
    manifest.output(&schema_path);
    for (name, ds) in [("train", &tr), ("val", &va), ("test", &te)] {
        let csv = out.join(format!("{name}.csv"));
        write_dataset_csv(&csv, ds)?;
        let mask = out.join(format!("{name}.mask.txt"));
        support::write_mask_file(&mask, ds)?;
        manifest.output(&csv).output(&mask);
    }
    let cleaning_path = out.join("cleaning.json");
    support::write_atomic(&cleaning_path, report.to_json().as_bytes())?;
    let scaler_path = out.join("scaler.json");
    support::write_atomic(&scaler_path, scaler.to_json().as_bytes())?;
    manifest.output(&cleaning_path).output(&scaler_path);
    manifest.write(&out)?;

    let masked: usize = scaled
        .stages
        .iter()
        .map(|s| s.mask.rows * s.mask.cols - s.mask.valid_count())
        .sum();
    let kept: Vec<usize> = scaled.stages.iter().map(|s| s.q).collect();
    println!(
        "cleaned {} products: kept {:?} label columns per stage, masked {} cells",
        scaled.n, kept, masked
    );
    println!(
        "splits: train {} / val {} / test {} -> {}",
        tr.n,
        va.n,
        te.n,
        out.display()
    );
    Ok(())
}
