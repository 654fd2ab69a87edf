//! One function per subcommand. Each resolves its output directory,
//! does the work through the library, writes artifacts, and finishes by
//! dropping a `manifest.json` beside them.

mod analyze;
mod data;
mod fit;
mod table;

pub use analyze::{binned_mae, export_koopman, sensitivity, sweep_latent};
pub use data::{preprocess, synth};
pub use fit::{evaluate, finetune, pretrain, train};
pub use table::reproduce_table2;
