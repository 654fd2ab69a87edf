//! `koopq` — command-line workflow around the multistage quality library.
//!
//! Every subcommand reads its inputs, writes fresh artifacts into its own
//! output directory — inputs are never modified — and drops a
//! `manifest.json` there recording the resolved settings, input file
//! hashes, and produced files, so any run can be traced and repeated.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error.

mod commands;
mod support;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use koopq::model::Variant;
use koopq::train::TrainConfig;

#[derive(Parser)]
#[command(
    name = "koopq",
    version,
    about = "Quality prediction across multistage manufacturing lines"
)]
struct Cli {
    /// Root directory for outputs (also read from KOOPQ_WORKDIR).
    #[arg(long, global = true, env = "KOOPQ_WORKDIR", default_value = "koopq-out")]
    workdir: PathBuf,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (raw CSV plus schema).
    Synth(SynthCmd),
    /// Clean labels, split, and standardize a raw dataset into a bundle.
    Preprocess(PreprocessCmd),
    /// Step one only: stage-local autoencoders, then stagewise predictors.
    Pretrain(PretrainCmd),
    /// Step two only: joint fine-tuning from a pretrained checkpoint.
    Finetune(FinetuneCmd),
    /// Full two-step training (optionally repeated across seeds).
    Train(TrainCmd),
    /// Score a checkpoint on one split of a bundle.
    Evaluate(EvaluateCmd),
    /// Mean absolute gradient of each final quality label w.r.t. every input.
    Sensitivity(SensitivityCmd),
    /// Export transition eigenvalue spectra and active-mode counts.
    ExportKoopman(ExportKoopmanCmd),
    /// Retrain across latent widths and compare validation error and runtime.
    SweepLatent(SweepLatentCmd),
    /// Final-stage error binned by label-vector norm in overlapping windows.
    BinnedMae(BinnedMaeCmd),
    /// End-to-end benchmark: surrogate line, three variants plus a plain
    /// network baseline, aggregated over seeds into one comparison table.
    #[command(name = "reproduce-table2")]
    ReproduceTable2(ReproduceTable2Cmd),
}

/// Model family, as spelled in configuration files.
#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    /// Static dense transition; deterministic latents.
    SAek,
    /// Input-dependent diagonal transition; deterministic latents.
    EAek,
    /// Stochastic latents with an eigenvalue pair per transition.
    Sdk,
}

impl VariantArg {
    fn to_variant(self) -> Variant {
        match self {
            VariantArg::SAek => Variant::SAek,
            VariantArg::EAek => Variant::EAek,
            VariantArg::Sdk => Variant::Sdk,
        }
    }
}

/// Which materialized split of a bundle to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
        }
    }
}

/// Training settings: an optional TOML file, with flags overriding
/// individual values. Without a file, defaults apply.
#[derive(Args)]
struct ConfigArgs {
    /// Training settings file (TOML); flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model family.
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Master random seed; every random choice in the run derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Latent width shared by all stages.
    #[arg(long)]
    d_h: Option<usize>,
    /// Minibatch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Autoencoder pretraining epochs per stage.
    #[arg(long)]
    ae_epochs: Option<usize>,
    /// Predictor pretraining epochs per stage.
    #[arg(long)]
    pred_epochs: Option<usize>,
    /// Joint fine-tuning epoch budget.
    #[arg(long)]
    finetune_epochs: Option<usize>,
    /// Fine-tuning stops after this many epochs without improvement.
    #[arg(long)]
    patience: Option<usize>,
}

impl ConfigArgs {
    /// File values first (or defaults), then flag overrides on top.
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| anyhow::anyhow!("reading settings file {}: {e}", path.display()))?;
                toml::from_str::<TrainConfig>(&text)
                    .map_err(|e| anyhow::anyhow!("parsing settings file {}: {e}", path.display()))?
            }
            None => TrainConfig::new(
                self.variant.map(VariantArg::to_variant).unwrap_or(Variant::Sdk),
            ),
        };
        if let Some(v) = self.variant {
            cfg.variant = v.to_variant();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = self.d_h {
            cfg.d_h = d;
        }
        if let Some(b) = self.batch {
            cfg.batch = b;
        }
        if let Some(e) = self.ae_epochs {
            cfg.pretrain_ae_epochs = e;
        }
        if let Some(e) = self.pred_epochs {
            cfg.pretrain_pred_epochs = e;
        }
        if let Some(e) = self.finetune_epochs {
            cfg.finetune_epochs = e;
        }
        if let Some(p) = self.patience {
            cfg.patience = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthCmd {
    /// Generator: the two-stage production-line surrogate, or the
    /// transparent coupled oracle with known coefficients.
    #[arg(long, value_enum, default_value_t = SynthKind::Line)]
    kind: SynthKind,
    /// Number of products to generate.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cross-stage coupling strength (coupled oracle only; 0 severs the stages).
    #[arg(long)]
    coupling: Option<f64>,
    /// Output directory; defaults to <workdir>/synth.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SynthKind {
    /// Two-stage production-line surrogate with dead sensors and spikes.
    Line,
    /// Transparent two-stage oracle with adjustable coupling.
    Coupled,
}

#[derive(Args)]
struct PreprocessCmd {
    /// Raw dataset CSV.
    #[arg(long)]
    input: PathBuf,
    /// Stage layout of the raw CSV (TOML).
    #[arg(long)]
    schema: PathBuf,
    /// Train/validation/test fractions (must sum to 1).
    #[arg(long, default_value = "0.7,0.1,0.2")]
    ratios: String,
    /// Shuffle seed for the split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; defaults to <workdir>/preprocessed.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainCmd {
    /// Preprocessed bundle directory (from `preprocess`).
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory; defaults to <workdir>/pretrain.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneCmd {
    /// Preprocessed bundle directory.
    #[arg(long)]
    data: PathBuf,
    /// Pretrained checkpoint to start from.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory; defaults to <workdir>/finetune.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainCmd {
    /// Preprocessed bundle directory.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Independent runs with seeds seed, seed+1, … aggregated together.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Output directory; defaults to <workdir>/train.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateCmd {
    /// Preprocessed bundle directory.
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to score.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Output directory; defaults to <workdir>/evaluate.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SensitivityCmd {
    /// Preprocessed bundle directory.
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to average gradients over.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Output directory; defaults to <workdir>/sensitivity.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportKoopmanCmd {
    /// Preprocessed bundle directory.
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint (eigenvalue-based variants only).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split whose mean latent state anchors the input-dependent spectra.
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
    /// A mode counts as active when its normalized magnitude exceeds this.
    #[arg(long, default_value_t = 0.01)]
    tau: f64,
    /// Output directory; defaults to <workdir>/export-koopman.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepLatentCmd {
    /// Preprocessed bundle directory.
    #[arg(long)]
    data: PathBuf,
    /// Latent widths to try, comma-separated.
    #[arg(long, default_value = "4,8,16")]
    sizes: String,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory; defaults to <workdir>/sweep-latent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BinnedMaeCmd {
    /// Preprocessed bundle directory.
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to bin.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Output directory; defaults to <workdir>/binned-mae.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReproduceTable2Cmd {
    /// Products in the generated surrogate dataset.
    #[arg(long, default_value_t = 1200)]
    n: usize,
    /// Seed runs per model.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory; defaults to <workdir>/table2.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let wd = &cli.workdir;
    match cli.cmd {
        Cmd::Synth(a) => commands::synth(wd, &a),
        Cmd::Preprocess(a) => commands::preprocess(wd, &a),
        Cmd::Pretrain(a) => commands::pretrain(wd, &a),
        Cmd::Finetune(a) => commands::finetune(wd, &a),
        Cmd::Train(a) => commands::train(wd, &a),
        Cmd::Evaluate(a) => commands::evaluate(wd, &a),
        Cmd::Sensitivity(a) => commands::sensitivity(wd, &a),
        Cmd::ExportKoopman(a) => commands::export_koopman(wd, &a),
        Cmd::SweepLatent(a) => commands::sweep_latent(wd, &a),
        Cmd::BinnedMae(a) => commands::binned_mae(wd, &a),
        Cmd::ReproduceTable2(a) => commands::reproduce_table2(wd, &a),
    }
}
