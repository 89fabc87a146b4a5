//! Training, evaluation, gradient checking, ablation sweeps and
//! checkpointing.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod train;

pub use ablate::{run_one, run_sweep, AblationRow, AblationTable, DataBundle, SweepSpec, SweepVariant};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{OptimConfig, TrainConfig};
pub use eval::{evaluate, evaluate_with_bins, recount_dump, relative_gain, BinStat, DumpRecord, EvalReport};
pub use gradcheck::{gradcheck_model, gradcheck_with_tamper, GradCheckReport};
pub use train::{anchors_from_samples, train, train_in_memory, LossRecord, TrainOutput, TrainResult};
