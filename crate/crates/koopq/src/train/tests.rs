use super::pipeline::{
    eval_pred_objective, eval_total_objective, pretrain_autoencoders, pretrain_predictors,
};
use super::*;
use crate::data::{generate_synthetic, split, SyntheticConfig};
use crate::error::TrainError;

fn small_splits(n: usize, seed: u64) -> (Dataset, Dataset, Dataset) {
    let (ds, _) = generate_synthetic(&SyntheticConfig::new(n, seed)).expect("generator accepts config");
    let idx = split(ds.n, [0.7, 0.1, 0.2], seed).expect("split accepts config");
    idx.materialize(&ds)
}

fn quick_cfg(variant: Variant) -> TrainConfig {
    let mut c = TrainConfig::new(variant);
    c.d_h = 6;
    c.batch = 16;
    c.pretrain_ae_epochs = 10;
    c.pretrain_pred_epochs = 10;
    c.finetune_epochs = 10;
    c.patience = 5;
    c
}

#[test]
fn autoencoder_pretraining_reduces_reconstruction_error() {
    let (train, val, _) = small_splits(80, 3);
    let mut cfg = quick_cfg(Variant::Sdk);
    cfg.pretrain_ae_epochs = 150;
    cfg.pretrain_pred_epochs = 0;
    cfg.finetune_epochs = 0;
    cfg.pretrain_lr = 3e-3;
    let tm = train_full(&train, &val, &cfg).expect("training succeeds");
    let ae1: Vec<&EpochRecord> = tm.record.epochs.iter().filter(|e| e.phase == "pretrain-ae-1").collect();
    let ae2: Vec<&EpochRecord> = tm.record.epochs.iter().filter(|e| e.phase == "pretrain-ae-2").collect();
    assert_eq!(ae1.len(), 150);
    assert_eq!(ae2.len(), 150);
    let first = ae1.first().expect("has epochs").train_loss;
    let last = ae1.last().expect("has epochs").train_loss;
    assert!(
        last < 0.5 * first,
        "reconstruction barely improved: first {first}, last {last}"
    );
    assert!(last.is_finite() && last > 0.0);
}

#[test]
fn stagewise_predictor_training_freezes_upstream_parameters() {
    let (train, val, _) = small_splits(80, 4);
    let mut cfg = quick_cfg(Variant::Sdk);
    let model_cfg = cfg.model_config(&train.dims());
    let mut store = ParamStore::new();
    let model = MultistageModel::new(&mut store, &model_cfg, cfg.seed).expect("model builds");
    let mut record = TrainRecord::default();
    cfg.pretrain_ae_epochs = 8;
    pretrain_autoencoders(&model, &mut store, &train, &val, &cfg, &mut record).expect("phase runs");

    let before = store.snapshot();
    let before_pred2 = eval_pred_objective(&model, &store, &val, 1);
    cfg.pretrain_pred_epochs = 12;
    pretrain_predictors(&model, &mut store, &train, &val, &cfg, &mut record).expect("phase runs");

    // Encoders, decoders, and Gaussian heads must sit exactly where the
    // autoencoding phase left them.
    for k in 0..2 {
        for id in model.ae_params(k) {
            assert_eq!(
                store.values(id),
                &before[id.index()][..],
                "parameter {} moved during predictor training",
                store.name(id)
            );
        }
    }
    // The predictors and the inbound transition were the trainable pair.
    let moved = |ids: Vec<crate::numcore::ParamId>| {
        ids.iter().any(|&id| store.values(id) != &before[id.index()][..])
    };
    assert!(moved(model.stages[0].predictor.params()), "stage 1 predictor never moved");
    assert!(moved(model.pred_pair_params(1)), "stage 2 pair never moved");
    assert!(
        moved(model.stages[0].transition.as_ref().expect("outbound transition").params()),
        "transition into stage 2 never moved"
    );

    let after_pred2 = eval_pred_objective(&model, &store, &val, 1);
    assert!(
        after_pred2 < before_pred2,
        "stage 2 validation prediction loss did not improve: {before_pred2} -> {after_pred2}"
    );
}

#[test]
fn zero_epoch_budgets_leave_parameters_at_initialization() {
    let (train, val, _) = small_splits(80, 5);
    let mut cfg = quick_cfg(Variant::EAek);
    cfg.pretrain_ae_epochs = 0;
    cfg.pretrain_pred_epochs = 0;
    cfg.finetune_epochs = 0;
    let tm = train_full(&train, &val, &cfg).expect("training succeeds");
    assert!(tm.record.epochs.is_empty());
    assert_eq!(tm.best_epoch, 0);

    let mut fresh_store = ParamStore::new();
    let _fresh = MultistageModel::new(&mut fresh_store, &cfg.model_config(&train.dims()), cfg.seed)
        .expect("model builds");
    assert_eq!(tm.store.snapshot(), fresh_store.snapshot());
}

#[test]
fn evaluation_matches_direct_per_cell_arithmetic() {
    let (train, val, test) = small_splits(80, 6);
    let mut cfg = quick_cfg(Variant::EAek);
    cfg.pretrain_ae_epochs = 3;
    cfg.pretrain_pred_epochs = 3;
    cfg.finetune_epochs = 3;
    let tm = train_full(&train, &val, &cfg).expect("training succeeds");

    let mut test = test;
    test.stages[0].mask.set_invalid(0, 1);
    test.stages[1].mask.set_invalid(2, 0);
    test.stages[1].mask.set_invalid(3, 2);
    let report = evaluate(&tm.model, &tm.store, &test).expect("evaluation succeeds");

    // Independent pass: one forward over the whole split, plain loops.
    let all: Vec<usize> = (0..test.n).collect();
    let mut tape = Tape::new();
    let (xs, _, _) = batch_tensors(&mut tape, &test, &all);
    let trace = tm
        .model
        .forward_all(&mut tape, &tm.store, &xs, Mode::Eval, &mut EpsilonSource::Zero);
    let mut pooled_sq = 0.0;
    let mut pooled_abs = 0.0;
    let mut pooled_count = 0usize;
    for (k, block) in test.stages.iter().enumerate() {
        let y_hat = tape.values(trace.stages[k].y_hat);
        let mut sq = 0.0;
        let mut ab = 0.0;
        let mut count = 0usize;
        for r in 0..test.n {
            for c in 0..block.q {
                if block.mask.is_valid(r, c) {
                    let d = block.y_row(r)[c] - y_hat[r * block.q + c];
                    sq += d * d;
                    ab += d.abs();
                    count += 1;
                }
            }
        }
        assert_eq!(report.stages[k].valid_cells, count);
        assert!((report.stages[k].mse - sq / count as f64).abs() <= 1e-12);
        assert!((report.stages[k].mae - ab / count as f64).abs() <= 1e-12);
        pooled_sq += sq;
        pooled_abs += ab;
        pooled_count += count;
    }
    assert_eq!(report.stages[0].valid_cells, test.n * 3 - 1);
    assert_eq!(report.stages[1].valid_cells, test.n * 3 - 2);
    assert!((report.total_mse - pooled_sq / pooled_count as f64).abs() <= 1e-12);
    assert!((report.total_mae - pooled_abs / pooled_count as f64).abs() <= 1e-12);
    assert_eq!(report.n_rows, test.n);
}

#[test]
fn constant_predictor_scores_zero_error_on_constant_labels() {
    use crate::data::{Dataset, LabelMask, StageBlock};
    let n = 5;
    let block = StageBlock {
        p: 2,
        q: 1,
        x: (0..n * 2).map(|i| i as f64 * 0.3 - 1.0).collect(),
        y: vec![0.37; n],
        mask: LabelMask::all_valid(n, 1),
        feature_names: vec!["f1".into(), "f2".into()],
        label_names: vec!["q1".into()],
    };
    let ds = Dataset {
        n,
        stages: vec![block],
    };
    let mut cfg = quick_cfg(Variant::SAek);
    cfg.d_h = 3;
    cfg.pretrain_ae_epochs = 0;
    cfg.pretrain_pred_epochs = 0;
    cfg.finetune_epochs = 0;
    let mut tm = train_full(&ds, &ds, &cfg).expect("training succeeds");
    let last = tm.model.stages[0].predictor.layers.last().expect("predictor has layers");
    tm.store.values_mut(last.weight).fill(0.0);
    tm.store.values_mut(last.bias).fill(0.37);
    let report = evaluate(&tm.model, &tm.store, &ds).expect("evaluation succeeds");
    assert_eq!(report.total_mse, 0.0);
    assert_eq!(report.total_mae, 0.0);
    assert_eq!(report.stages[0].valid_cells, n);
}

#[test]
fn finetuning_restores_the_best_validation_checkpoint() {
    let (train, val, _) = small_splits(80, 7);
    let mut cfg = quick_cfg(Variant::Sdk);
    cfg.finetune_epochs = 15;
    cfg.patience = 5;
    let tm = train_full(&train, &val, &cfg).expect("training succeeds");
    let recomputed = eval_total_objective(&tm.model, &tm.store, &val, &cfg.weights());
    assert_eq!(
        recomputed.to_bits(),
        tm.best_val_loss.to_bits(),
        "returned parameters do not reproduce the recorded best validation loss: {} vs {}",
        recomputed,
        tm.best_val_loss
    );
    let fine: Vec<&EpochRecord> = tm.record.epochs.iter().filter(|e| e.phase == "finetune").collect();
    assert!(!fine.is_empty());
    for e in &fine {
        assert!(tm.best_val_loss <= e.val_loss + 1e-15);
    }
}

#[test]
fn training_runs_are_reproducible_to_the_byte() {
    let (train, val, _) = small_splits(80, 8);
    let mut cfg = quick_cfg(Variant::Sdk);
    cfg.pretrain_ae_epochs = 4;
    cfg.pretrain_pred_epochs = 4;
    cfg.finetune_epochs = 4;
    let a = train_full(&train, &val, &cfg).expect("training succeeds");
    let b = train_full(&train, &val, &cfg).expect("training succeeds");
    assert_eq!(a.store.snapshot(), b.store.snapshot());
    assert_eq!(
        serde_json::to_string(&a.record).expect("serializes"),
        serde_json::to_string(&b.record).expect("serializes"),
    );
    assert_eq!(a.best_epoch, b.best_epoch);
}

#[test]
fn seed_experiments_aggregate_per_seed_reports() {
    let (train, val, test) = small_splits(80, 9);
    let mut cfg = quick_cfg(Variant::EAek);
    cfg.pretrain_ae_epochs = 2;
    cfg.pretrain_pred_epochs = 2;
    cfg.finetune_epochs = 2;

    let agg = run_experiment(&train, &val, &test, &cfg, 2).expect("experiment succeeds");
    assert_eq!(agg.repeats, 2);
    assert_eq!(agg.completed, 2);
    let seeds: Vec<u64> = agg.per_seed.iter().map(|o| o.seed).collect();
    assert_eq!(seeds, vec![0, 1]);
    let totals: Vec<f64> = agg
        .per_seed
        .iter()
        .map(|o| o.report.as_ref().expect("completed").total_mse)
        .collect();
    let mean = (totals[0] + totals[1]) / 2.0;
    assert!((agg.total_mse.mean - mean).abs() <= 1e-15);
    let var = (totals[0] - mean).powi(2) + (totals[1] - mean).powi(2);
    assert!((agg.total_mse.std - var.sqrt()).abs() <= 1e-15, "sample deviation over two runs");

    let single = run_experiment(&train, &val, &test, &cfg, 1).expect("experiment succeeds");
    assert_eq!(single.total_mse.std, 0.0);
    assert_eq!(single.total_mae.std, 0.0);

    let again = run_experiment(&train, &val, &test, &cfg, 2).expect("experiment succeeds");
    assert_eq!(agg.to_json(), again.to_json());
}

#[test]
fn baseline_networks_learn_and_respect_input_modes() {
    let (train, val, test) = small_splits(120, 10);
    let mut cfg = AnnConfig::new(0);
    cfg.hidden = 16;
    cfg.epochs = 30;
    cfg.batch = 16;

    let trained = train_ann(&train, &val, &cfg).expect("training succeeds");
    assert_eq!(trained.nets[0].in_dim(), 6);
    assert_eq!(trained.nets[1].in_dim(), 12, "cumulative inputs concatenate both stages");

    let mut untouched_cfg = cfg.clone();
    untouched_cfg.epochs = 0;
    let untouched = train_ann(&train, &val, &untouched_cfg).expect("training succeeds");

    let trained_report = evaluate_ann(&trained, &test).expect("evaluation succeeds");
    let untouched_report = evaluate_ann(&untouched, &test).expect("evaluation succeeds");
    assert!(
        trained_report.total_mse < untouched_report.total_mse,
        "training did not help: {} vs {}",
        trained_report.total_mse,
        untouched_report.total_mse
    );
    assert_eq!(trained_report.stages[0].valid_cells, test.n * 3);

    let mut local_cfg = cfg.clone();
    local_cfg.inputs = AnnInputs::LocalOnly;
    local_cfg.epochs = 1;
    let local = train_ann(&train, &val, &local_cfg).expect("training succeeds");
    assert_eq!(local.nets[1].in_dim(), 6, "local inputs stay within the stage");
}

#[test]
fn exploding_training_reports_divergence() {
    let (train, val, _) = small_splits(80, 11);
    let mut cfg = quick_cfg(Variant::EAek);
    cfg.pretrain_lr = 1e300;
    cfg.pretrain_ae_epochs = 5;
    let err = train_full(&train, &val, &cfg).expect_err("training must diverge");
    match err {
        TrainError::Diverged { phase, epoch, loss } => {
            assert_eq!(phase, "pretrain-ae-1");
            assert!(epoch >= 1);
            assert!(!loss.is_finite());
        }
        other => panic!("expected divergence, got: {other}"),
    }
}

#[test]
fn invalid_configurations_are_rejected() {
    let (train, val, test) = small_splits(80, 12);

    let mut cfg = quick_cfg(Variant::Sdk);
    cfg.batch = 0;
    assert!(matches!(train_full(&train, &val, &cfg), Err(TrainError::InvalidConfig(_))));

    let mut cfg = quick_cfg(Variant::Sdk);
    cfg.pretrain_lr = -1.0;
    assert!(matches!(train_full(&train, &val, &cfg), Err(TrainError::InvalidConfig(_))));

    let mut cfg = quick_cfg(Variant::Sdk);
    cfg.patience = 0;
    assert!(matches!(train_full(&train, &val, &cfg), Err(TrainError::InvalidConfig(_))));

    let cfg = quick_cfg(Variant::Sdk);
    assert!(matches!(
        run_experiment(&train, &val, &test, &cfg, 0),
        Err(TrainError::InvalidConfig(_))
    ));

    let empty = train.select_rows(&[]);
    assert!(matches!(
        train_full(&train, &empty, &cfg),
        Err(TrainError::DataMismatch(_))
    ));
    assert!(matches!(
        train_full(&empty, &val, &cfg),
        Err(TrainError::DataMismatch(_))
    ));

    let mut other = SyntheticConfig::new(40, 1);
    other.p1 = 5;
    let (narrow, _) = generate_synthetic(&other).expect("generator accepts config");
    assert!(matches!(
        train_full(&train, &narrow, &cfg),
        Err(TrainError::DataMismatch(_))
    ));

    let tm = train_full(&train, &val, &quick_zero()).expect("training succeeds");
    assert!(matches!(
        evaluate(&tm.model, &tm.store, &empty),
        Err(TrainError::DataMismatch(_))
    ));
    assert!(matches!(
        evaluate(&tm.model, &tm.store, &narrow),
        Err(TrainError::DataMismatch(_))
    ));
}

fn quick_zero() -> TrainConfig {
    let mut c = quick_cfg(Variant::SAek);
    c.pretrain_ae_epochs = 0;
    c.pretrain_pred_epochs = 0;
    c.finetune_epochs = 0;
    c
}
