//! Gradient-based document scoring and mixture-weight optimization.

mod mixture;
mod objective;
mod optimizer;
mod prop1;
mod scoring;

pub use mixture::{alpha_gradient, mixture_state, MixtureWeights};
pub use objective::{CallCounts, LanguageObjective, ModelCalls, ObjectiveKind, SquaredErrorSurrogate, StateObjective};
pub use optimizer::{optimize_weights, optimize_with, OptimizationTrace, OptimizerConfig, TraceStep};
pub use prop1::{loo_loss, loo_with, prop1_margin, prop1_margin_with, Prop1Entry};
pub use scoring::{grad_score, grad_score_with, rerank, warm_start, GradScore, InitMode};
