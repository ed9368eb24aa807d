use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, global_state, observe, visibility, EnvConfig, EnvState, Observation};
use crate::error::{Error, Result};
use crate::net::{HiddenState, InstructionPolicy};
use crate::protocol::{assign_initial_roles, execute_timestep, StepTrace};

/// One executed step. Observations and the global state are recomputed from
/// the stored world state on demand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub state: EnvState,
    pub trace: StepTrace,
    pub rewards: Vec<f64>,
    pub done: bool,
}

impl StepRecord {
    pub fn observations(&self) -> Vec<Observation> {
        (0..self.state.n_agents()).map(|i| observe(&self.state, i)).collect()
    }

    pub fn global_state(&self) -> Vec<f64> {
        global_state(&self.state)
    }

    pub fn visibility(&self) -> Vec<Vec<bool>> {
        visibility(&self.state)
    }

    pub fn team_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub steps: Vec<StepRecord>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn team_reward(&self) -> f64 {
        self.steps.iter().map(StepRecord::team_reward).sum()
    }

    pub fn traces(&self) -> impl Iterator<Item = &StepTrace> {
        self.steps.iter().map(|s| &s.trace)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.steps.last() else {
            return Err(Error::Training("empty episode record".into()));
        };
        if !last.done || self.steps[..self.steps.len() - 1].iter().any(|s| s.done) {
            return Err(Error::Training("episode record must end at its only done step".into()));
        }
        self.steps.iter().try_for_each(|s| s.trace.validate())
    }
}

/// Random streams consumed by one episode.
pub struct EpisodeRngs<R> {
    pub env: R,
    pub roles: R,
    pub exploration: R,
}

/// Roll out one episode under locally centralized execution.
pub fn run_episode<P: InstructionPolicy + ?Sized, R: Rng>(
    config: &EnvConfig,
    n_leaders: usize,
    policy: &P,
    epsilon: f64,
    rngs: &mut EpisodeRngs<R>,
) -> Result<EpisodeRecord> {
    let mut state = env::reset(config, &mut rngs.env)?;
    let mut roles = assign_initial_roles(config.n_agents, n_leaders, &mut rngs.roles)?;
    let mut hidden = vec![HiddenState::zeros(policy.hidden_dim()); config.n_agents];
    let mut steps = Vec::new();
    loop {
        let out = execute_timestep(&state, &roles, policy, &hidden, epsilon, &mut rngs.exploration)?;
        let result = env::step(&state, &out.actions)?;
        steps.push(StepRecord { state, trace: out.trace, rewards: result.rewards, done: result.done });
        if result.done {
            return Ok(EpisodeRecord { steps });
        }
        state = result.state;
        roles = out.next_roles;
        hidden = out.hidden;
    }
}

/// FIFO store of whole episodes.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<EpisodeRecord>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity: capacity.max(1), episodes: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn push(&mut self, episode: EpisodeRecord) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&EpisodeRecord> {
        self.episodes.get(i)
    }

    /// `k` distinct episodes chosen uniformly.
    pub fn sample(&self, k: usize, rng: &mut impl Rng) -> Result<Vec<&EpisodeRecord>> {
        if k > self.episodes.len() {
            return Err(Error::Training(format!("cannot sample {k} episodes from {}", self.episodes.len())));
        }
        Ok(index::sample(rng, self.episodes.len(), k).into_iter().map(|i| &self.episodes[i]).collect())
    }
}
