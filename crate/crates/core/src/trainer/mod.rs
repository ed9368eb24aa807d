//! Centralized training: episode replay, mixed TD loss with the leadership
//! auxiliary loss, target maintenance and the training loop.

pub mod config;
pub mod loss;
pub mod record;
pub mod run;

pub use config::{ModelDims, RunSpec, TrainConfig};
pub use loss::{
    leadership_loss, leadership_pseudo_labels, leadership_q_from_outputs, leadership_q_values, replay_aggregated_q,
    td_loss, td_target, total_loss, update_targets, LossAndGrads, LossReport,
};
pub use record::{run_episode, EpisodeRecord, EpisodeRngs, ReplayBuffer, StepRecord};
pub use run::{evaluate_episodes, summarize, train, EvalSummary, Learner, LogRow, RunStatus, TrainOutcome};
