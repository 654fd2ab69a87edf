//! Training-side subcommands: `pretrain`, `finetune`, `train`, `evaluate`.

use std::path::Path;

use anyhow::{ensure, Context};
use koopq::checkpoint;
use koopq::model::MultistageModel;
use koopq::numcore::ParamStore;
use koopq::train::{
    evaluate as score, finetune as finetune_phase, pretrain_autoencoders, pretrain_predictors,
    run_experiment, train_full, TrainRecord,
};
use serde_json::json;

use crate::support::{self, load_bundle, load_one, Manifest};
use crate::{EvaluateCmd, FinetuneCmd, PretrainCmd, TrainCmd};

pub fn pretrain(workdir: &Path, args: &PretrainCmd) -> anyhow::Result<()> {
    let out = support::resolve_out(workdir, "pretrain", &args.out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let cfg = args.cfg.resolve()?;
    let bundle = load_bundle(&args.data)?;

    let model_cfg = cfg.model_config(&bundle.train.dims());
    let mut store = ParamStore::new();
    let model = MultistageModel::new(&mut store, &model_cfg, cfg.seed)?;
    let mut record = TrainRecord::default();
    pretrain_autoencoders(&model, &mut store, &bundle.train, &bundle.val, &cfg, &mut record)?;
    pretrain_predictors(&model, &mut store, &bundle.train, &bundle.val, &cfg, &mut record)?;

    let ckpt = out.join("pretrained.json");
    checkpoint::save(&ckpt, &model.config, &store)?;
    let loss = out.join("loss.csv");
    record.write_csv(&loss)?;
    let report = score(&model, &store, &bundle.val)?;
    support::print_report("validation after pretraining", &report);

    let mut manifest = Manifest::new("pretrain");
    manifest.seed(cfg.seed).settings(&cfg).inputs(&bundle.files)?;
    manifest.output(&ckpt).output(&loss);
    manifest.write(&out)?;
    println!("checkpoint -> {}", ckpt.display());
    Ok(())
}

pub fn finetune(workdir: &Path, args: &FinetuneCmd) -> anyhow::Result<()> {
    let out = support::resolve_out(workdir, "finetune", &args.out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut cfg = args.cfg.resolve()?;
    let (model, mut store) = checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    // The checkpoint fixes the architecture; record what actually runs.
    cfg.variant = model.config.variant;
    cfg.d_h = model.config.d_h;
    let bundle = load_bundle(&args.data)?;

    // Scoring first also verifies the bundle matches the checkpoint's widths.
    let before = score(&model, &store, &bundle.val)?;
    support::print_report("validation before fine-tuning", &before);

    let mut record = TrainRecord::default();
    let (best_epoch, best_val) = finetune_phase(
        &model,
        &mut store,
        &bundle.train,
        &bundle.val,
        &cfg,
        &mut record,
    )?;

    let ckpt = out.join("checkpoint.json");
    checkpoint::save(&ckpt, &model.config, &store)?;
    let loss = out.join("loss.csv");
    record.write_csv(&loss)?;
    let report = score(&model, &store, &bundle.test)?;
    let report_path = out.join("report.json");
    support::write_atomic(&report_path, report.to_json().as_bytes())?;
    support::print_report("test", &report);
    println!("kept epoch {best_epoch} (validation objective {best_val:.6})");

    let mut manifest = Manifest::new("finetune");
    manifest.seed(cfg.seed).settings(&cfg).inputs(&bundle.files)?;
    manifest.input(&args.checkpoint)?;
    manifest.output(&ckpt).output(&loss).output(&report_path);
    manifest.write(&out)?;
    Ok(())
}

pub fn train(workdir: &Path, args: &TrainCmd) -> anyhow::Result<()> {
    ensure!(args.repeats >= 1, "--repeats must be at least 1");
    let out = support::resolve_out(workdir, "train", &args.out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let cfg = args.cfg.resolve()?;
    let bundle = load_bundle(&args.data)?;

    let mut manifest = Manifest::new("train");
    manifest
        .seed(cfg.seed)
        .settings(&json!({ "config": cfg, "repeats": args.repeats }))
        .inputs(&bundle.files)?;

    if args.repeats == 1 {
        let trained = train_full(&bundle.train, &bundle.val, &cfg)?;
        let ckpt = out.join("checkpoint.json");
        checkpoint::save(&ckpt, &trained.model.config, &trained.store)?;
        let loss = out.join("loss.csv");
        trained.record.write_csv(&loss)?;
        let report = score(&trained.model, &trained.store, &bundle.test)?;
        let report_path = out.join("report.json");
        support::write_atomic(&report_path, report.to_json().as_bytes())?;
        support::print_report("test", &report);
        println!("kept fine-tuning epoch {}", trained.best_epoch);
        manifest.output(&ckpt).output(&loss).output(&report_path);
    } else {
        let agg = run_experiment(&bundle.train, &bundle.val, &bundle.test, &cfg, args.repeats)?;
        let agg_path = out.join("aggregate.json");
        support::write_atomic(&agg_path, agg.to_json().as_bytes())?;
        println!("{} of {} seed runs completed", agg.completed, agg.repeats);
        println!(
            "total test mse {:.6} ± {:.6}, mae {:.6} ± {:.6}",
            agg.total_mse.mean, agg.total_mse.std, agg.total_mae.mean, agg.total_mae.std
        );
        manifest.output(&agg_path);
    }
    manifest.write(&out)?;
    Ok(())
}

pub fn evaluate(workdir: &Path, args: &EvaluateCmd) -> anyhow::Result<()> {
    let out = support::resolve_out(workdir, "evaluate", &args.out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let (model, store) = checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let (ds, files) = load_one(&args.data, args.split.name())?;

    let report = score(&model, &store, &ds)?;
    print!("{}", report.to_json());
    let report_path = out.join("report.json");
    support::write_atomic(&report_path, report.to_json().as_bytes())?;

    let mut manifest = Manifest::new("evaluate");
    manifest
        .settings(&json!({ "split": args.split.name() }))
        .inputs(&files)?;
    manifest.input(&args.checkpoint)?;
    manifest.output(&report_path);
    manifest.write(&out)?;
    Ok(())
}
