//! Model-inspection subcommands: `sensitivity`, `export-koopman`,
//! `sweep-latent`, `binned-mae`.

use std::path::Path;

use anyhow::Context;
use koopq::analysis;
use koopq::checkpoint;
use serde_json::json;

use crate::support::{self, load_bundle, load_one, Manifest};
use crate::{BinnedMaeCmd, ExportKoopmanCmd, SensitivityCmd, SweepLatentCmd};

pub fn sensitivity(workdir: &Path, args: &SensitivityCmd) -> anyhow::Result<()> {
    let out = support::resolve_out(workdir, "sensitivity", &args.out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let (model, store) = checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let (ds, files) = load_one(&args.data, args.split.name())?;

    let map = analysis::sensitivity(&model, &store, &ds)?;
    let csv = out.join("sensitivity.csv");
    map.write_csv(&csv)?;
    println!(
        "averaged |d label / d input| over {} rows: {} labels x {} inputs -> {}",
        ds.n,
        map.rows,
        map.cols,
        csv.display()
    );

    let mut manifest = Manifest::new("sensitivity");
    manifest
        .settings(&json!({ "split": args.split.name() }))
        .inputs(&files)?;
    manifest.input(&args.checkpoint)?;
    manifest.output(&csv);
    manifest.write(&out)?;
    Ok(())
}

pub fn export_koopman(workdir: &Path, args: &ExportKoopmanCmd) -> anyhow::Result<()> {
    let out = support::resolve_out(workdir, "export-koopman", &args.out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let (model, store) = checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let (ds, files) = load_one(&args.data, args.split.name())?;

    let spectrum = analysis::export_koopman(&model, &store, &ds, args.tau)?;
    let json_path = out.join("spectrum.json");
    support::write_atomic(&json_path, spectrum.to_json().as_bytes())?;
    for t in &spectrum.transitions {
        let width = t.mu.magnitudes.len();
        match &t.sigma {
            Some(sig) => println!(
                "transition {} -> {}: mean path {}/{} active, spread path {}/{} (tau {})",
                t.from_stage, t.to_stage, t.mu.active, width, sig.active, width, spectrum.tau
            ),
            None => println!(
                "transition {} -> {}: {}/{} active modes (tau {})",
                t.from_stage, t.to_stage, t.mu.active, width, spectrum.tau
            ),
        }
    }
    println!("spectra -> {}", json_path.display());

    let mut manifest = Manifest::new("export-koopman");
    manifest
        .settings(&json!({ "split": args.split.name(), "tau": args.tau }))
        .inputs(&files)?;
    manifest.input(&args.checkpoint)?;
    manifest.output(&json_path);
    manifest.write(&out)?;
    Ok(())
}

pub fn sweep_latent(workdir: &Path, args: &SweepLatentCmd) -> anyhow::Result<()> {
    let out = support::resolve_out(workdir, "sweep-latent", &args.out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let cfg = args.cfg.resolve()?;
    let sizes = support::parse_sizes(&args.sizes)?;
    let bundle = load_bundle(&args.data)?;

    let sweep = analysis::latent_sweep(&bundle.train, &bundle.val, &sizes, &cfg);
    for p in &sweep.points {
        match (&p.last_stage_val_mse, &p.error) {
            (Some(mse), _) => {
                println!("d_h {:>3}: final-stage val mse {:.6} in {:.1}s", p.d_h, mse, p.seconds)
            }
            (None, Some(e)) => println!("d_h {:>3}: failed ({e})", p.d_h),
            (None, None) => println!("d_h {:>3}: no result", p.d_h),
        }
    }
    let csv = out.join("sweep.csv");
    sweep.write_csv(&csv)?;
    let json_path = out.join("sweep.json");
    support::write_atomic(&json_path, sweep.to_json().as_bytes())?;
    println!("sweep -> {}", csv.display());

    let mut manifest = Manifest::new("sweep-latent");
    manifest
        .seed(cfg.seed)
        .settings(&json!({ "config": cfg, "sizes": sizes }))
        .inputs(&bundle.files)?;
    manifest.output(&csv).output(&json_path);
    manifest.write(&out)?;
    Ok(())
}

pub fn binned_mae(workdir: &Path, args: &BinnedMaeCmd) -> anyhow::Result<()> {
    let out = support::resolve_out(workdir, "binned-mae", &args.out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let (model, store) = checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let (ds, files) = load_one(&args.data, args.split.name())?;

    let binned = analysis::binned_mae(&model, &store, &ds)?;
    match (binned.bins.first(), binned.bins.last()) {
        (Some(first), Some(last)) => println!(
            "{} populated bins, norm centers {:.1} .. {:.1}",
            binned.bins.len(),
            first.center,
            last.center
        ),
        _ => println!("no populated bins (every label cell is masked)"),
    }
    let csv = out.join("bins.csv");
    binned.write_csv(&csv)?;
    let json_path = out.join("bins.json");
    support::write_atomic(&json_path, binned.to_json().as_bytes())?;
    println!("bins -> {}", csv.display());

    let mut manifest = Manifest::new("binned-mae");
    manifest
        .settings(&json!({ "split": args.split.name() }))
        .inputs(&files)?;
    manifest.input(&args.checkpoint)?;
    manifest.output(&csv).output(&json_path);
    manifest.write(&out)?;
    Ok(())
}
