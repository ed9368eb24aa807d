//! Shared fixtures for the criterion benchmarks.

use lctt_core::trainer::{run_episode, EpisodeRecord, EpisodeRngs, Learner};
use lctt_core::{rng, EnvConfig, RunSpec, TrainConfig};

/// Default 10x10 world with `n_leaders` leaders and square network widths `d`.
pub fn spec(n_leaders: usize, d: usize, batch_episodes: usize) -> RunSpec {
    RunSpec {
        label: format!("bench-{n_leaders}L"),
        n_leaders,
        env: EnvConfig::default(),
        train: TrainConfig { d_att: d, d_gru: d, batch_episodes, ..TrainConfig::default() },
    }
}

/// A fresh learner and `episodes` fully exploratory episodes from its policy.
pub fn learner_with_episodes(spec: &RunSpec, episodes: u64) -> (Learner, Vec<EpisodeRecord>) {
    let learner = Learner::new(spec.clone()).expect("valid bench spec");
    let policy = learner.policy();
    let records = (0..episodes)
        .map(|k| {
            let mut rngs = EpisodeRngs {
                env: rng::substream(1, rng::ENV, k),
                roles: rng::substream(1, rng::ROLES, k),
                exploration: rng::substream(1, rng::EXPLORATION, k),
            };
            run_episode(&spec.env, spec.n_leaders, &policy, 1.0, &mut rngs).expect("episode")
        })
        .collect();
    (learner, records)
}
