//! Synthetic stand-in for a frozen vision-language backbone: a generator with
//! planted informative tokens, a small frozen predictor, and the training and
//! inference pipelines around the gate.

pub mod data;
pub mod downstream;
pub mod eval;
pub mod train;
pub mod vpcheck;

#[cfg(test)]
mod tests;

pub use data::{generate_dataset, DatasetManifest, TaskConfig, ToyDataset, ToySample};
pub use downstream::{
    accuracy, pretrain_downstream, DownstreamArch, DownstreamConfig, FrozenDownstream, PretrainConfig, PretrainEpoch,
    PretrainOutcome,
};
pub use eval::{eval_budgets, eval_inference, eval_with_scores, infer, score_samples, EvalMetrics, InferenceTrace};
pub use train::{
    batch_gradients, full_token_loss, train_gate, write_step_log, GateMode, GateTrainConfig, GateTrainOutput,
    StepRecord,
};
pub use vpcheck::{strategy_accuracy, summarize_gaps, vp_validate, GapSummary, Strategy, VpRecord, VpValidateConfig};
