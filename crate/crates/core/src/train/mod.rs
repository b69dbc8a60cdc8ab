//! Objective, schedules, optimizer, training loop and evaluation.

mod eval;
mod loss;
mod optim;
mod schedule;
mod trainer;

pub use eval::{evaluate, score, EvalMode, Metrics, UtterancePrediction};
pub use loss::{total_loss, LossTerms, LossValues};
pub use optim::{clip_global_norm, Nesterov};
pub use schedule::{kl_weight, learning_rate, lr_multiplier};
pub use trainer::{build_terms, loss_values, step_seed, BuiltTerms, StepReport, TermOptions, Trainer, METRICS_HEADER};
