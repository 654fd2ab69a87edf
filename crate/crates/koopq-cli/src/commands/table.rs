//! The headline benchmark: all three model families plus a plain
//! feedforward baseline on one shared two-stage production-line surrogate,
//! each repeated across seeds and summarized as mean ± spread.

use std::path::Path;

use anyhow::Context;
use koopq::data::{
    apply_scaler, clean_labels, fit_scaler, split, two_stage_line_surrogate, SurrogateConfig,
};
use koopq::model::Variant;
use koopq::train::{evaluate_ann, run_experiment, train_ann, AnnConfig, EvalReport, MetricSummary};
use serde::Serialize;
use serde_json::json;

use crate::support::{self, mean_std, Manifest};
use crate::ReproduceTable2Cmd;

#[derive(Serialize)]
struct TableRow {
    model: String,
    /// Seed runs that finished; the summaries cover only these.
    completed: usize,
    stage_mse: Vec<MetricSummary>,
    total_mse: MetricSummary,
}

fn variant_slug(v: Variant) -> &'static str {
    match v {
        Variant::SAek => "s-aek",
        Variant::EAek => "e-aek",
        Variant::Sdk => "sdk",
    }
}

fn summarize(model: &str, reports: &[EvalReport]) -> TableRow {
    let stages = reports.first().map(|r| r.stages.len()).unwrap_or(0);
    let stage_mse = (0..stages)
        .map(|k| {
            let xs: Vec<f64> = reports.iter().map(|r| r.stages[k].mse).collect();
            let (mean, std) = mean_std(&xs);
            MetricSummary { mean, std }
        })
        .collect();
    let totals: Vec<f64> = reports.iter().map(|r| r.total_mse).collect();
    let (mean, std) = mean_std(&totals);
    TableRow {
        model: model.to_string(),
        completed: reports.len(),
        stage_mse,
        total_mse: MetricSummary { mean, std },
    }
}

pub fn reproduce_table2(workdir: &Path, args: &ReproduceTable2Cmd) -> anyhow::Result<()> {
    anyhow::ensure!(args.repeats >= 1, "--repeats must be at least 1");
    let out = support::resolve_out(workdir, "table2", &args.out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let cfg0 = args.cfg.resolve()?;

    // One shared dataset for every contender.
    let generator = SurrogateConfig::new(args.n, cfg0.seed);
    let (raw, _truth) = two_stage_line_surrogate(&generator)?;
    let (cleaned, _report) = clean_labels(&raw);
    let idx = split(cleaned.n, [0.7, 0.1, 0.2], cfg0.seed)?;
    let scaler = fit_scaler(&cleaned, &idx.train);
    let mut scaled = cleaned;
    apply_scaler(&mut scaled, &scaler);
    let (tr, va, te) = idx.materialize(&scaled);
    println!(
        "surrogate line: {} products (train {} / val {} / test {})",
        scaled.n, tr.n, va.n, te.n
    );

    let mut rows = Vec::new();
    let mut outputs = Vec::new();
    for variant in [Variant::SAek, Variant::EAek, Variant::Sdk] {
        let mut cfg = cfg0.clone();
        cfg.variant = variant;
        println!("running {} x{} ...", variant_slug(variant), args.repeats);
        let agg = run_experiment(&tr, &va, &te, &cfg, args.repeats)?;
        let path = out.join(format!("aggregate-{}.json", variant_slug(variant)));
        support::write_atomic(&path, agg.to_json().as_bytes())?;
        outputs.push(path);
        let reports: Vec<EvalReport> = agg
            .per_seed
            .iter()
            .filter_map(|o| o.report.clone())
            .collect();
        rows.push(summarize(variant_slug(variant), &reports));
    }

    println!("running ann x{} ...", args.repeats);
    let mut ann_reports = Vec::new();
    for s in 0..args.repeats {
        let mut ann_cfg = AnnConfig::new(cfg0.seed + s as u64);
        ann_cfg.epochs = cfg0.finetune_epochs;
        ann_cfg.patience = cfg0.patience;
        ann_cfg.batch = cfg0.batch;
        match train_ann(&tr, &va, &ann_cfg).and_then(|ann| evaluate_ann(&ann, &te)) {
            Ok(report) => ann_reports.push(report),
            Err(e) => eprintln!("warning: baseline seed {} failed: {e}", ann_cfg.seed),
        }
    }
    rows.push(summarize("ann", &ann_reports));

    // Artifacts: one row per model.
    let stages = rows.iter().map(|r| r.stage_mse.len()).max().unwrap_or(0);
    let mut header = String::from("model,completed");
    for k in 1..=stages {
        header.push_str(&format!(",stage{k}_mse_mean,stage{k}_mse_std"));
    }
    header.push_str(",total_mse_mean,total_mse_std");
    let mut lines = vec![header];
    for r in &rows {
        let mut line = format!("{},{}", r.model, r.completed);
        for k in 0..stages {
            match r.stage_mse.get(k) {
                Some(m) => line.push_str(&format!(",{},{}", m.mean, m.std)),
                None => line.push_str(",,"),
            }
        }
        line.push_str(&format!(",{},{}", r.total_mse.mean, r.total_mse.std));
        lines.push(line);
    }
    let csv = out.join("table.csv");
    support::write_lines(&csv, &lines)?;
    let json_path = out.join("table.json");
    let mut text = serde_json::to_string_pretty(&rows).expect("rows serialize");
    text.push('\n');
    support::write_atomic(&json_path, text.as_bytes())?;
    outputs.push(csv.clone());
    outputs.push(json_path);

    // Console table.
    println!();
    let mut head = format!("{:<8} {:>3}", "model", "ok");
    for k in 1..=stages {
        head.push_str(&format!("  {:>20}", format!("stage-{k} mse")));
    }
    head.push_str(&format!("  {:>20}", "total mse"));
    println!("{head}");
    for r in &rows {
        let mut line = format!("{:<8} {:>3}", r.model, r.completed);
        for k in 0..stages {
            let cell = match r.stage_mse.get(k) {
                Some(m) => format!("{:.5} ± {:.5}", m.mean, m.std),
                None => "-".to_string(),
            };
            line.push_str(&format!("  {:>20}", cell));
        }
        let total = format!("{:.5} ± {:.5}", r.total_mse.mean, r.total_mse.std);
        line.push_str(&format!("  {:>20}", total));
        println!("{line}");
    }

    let mut manifest = Manifest::new("reproduce-table2");
    manifest.seed(cfg0.seed).settings(&json!({
        "n": args.n,
        "repeats": args.repeats,
        "generator": generator,
        "config": cfg0,
    }));
    for p in &outputs {
        manifest.output(p);
    }
    manifest.write(&out)?;
    println!("\ntable -> {}", csv.display());
    Ok(())
}
