//! Experiment configuration, result files, gradient checks and the commands
//! behind the `tokengate` binary.

pub mod commands;
pub mod config;
pub mod gradcheck;
pub mod records;

pub use commands::{
    cmd_ablate, cmd_export_masks, cmd_gradcheck, cmd_pretrain, cmd_run, cmd_vp_validate, load_or_pretrain,
    AblationTable, MaskExport, MaskSummary, RunSummary,
};
pub use config::{parse_grid, parse_list, ExperimentConfig};
pub use gradcheck::{GradcheckReport, Scope};
pub use records::ResultRecord;
