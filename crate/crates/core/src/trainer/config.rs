use serde::{Deserialize, Serialize};

use crate::diff::ParamStore;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::mixer::{self, MixerDims};
use crate::net::{self, NetDims};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr: f64,
    pub lambda: f64,
    pub batch_episodes: usize,
    pub buffer_capacity: usize,
    pub target_update_interval: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal_steps: u64,
    pub total_env_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub grad_clip: f64,
    pub d_att: usize,
    pub d_gru: usize,
    pub d_mix: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            lr: 5e-4,
            lambda: 0.1,
            batch_episodes: 32,
            buffer_capacity: 5000,
            target_update_interval: 200,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal_steps: 50_000,
            total_env_steps: 200_000,
            eval_interval: 5000,
            eval_episodes: 32,
            grad_clip: 10.0,
            d_att: 64,
            d_gru: 64,
            d_mix: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| if ok { Ok(()) } else { Err(Error::config(key, msg)) };
        check(self.gamma > 0.0 && self.gamma <= 1.0, "gamma", "must lie in (0, 1]")?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be positive")?;
        check(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda", "must be non-negative")?;
        check(self.batch_episodes >= 1, "batch_episodes", "must be at least 1")?;
        check(self.buffer_capacity >= self.batch_episodes, "buffer_capacity", "must hold at least one batch")?;
        check(self.target_update_interval >= 1, "target_update_interval", "must be at least 1")?;
        for (key, v) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            check((0.0..=1.0).contains(&v), key, "must lie in [0, 1]")?;
        }
        check(self.total_env_steps >= 1, "total_env_steps", "must be at least 1")?;
        check(self.eval_interval >= 1, "eval_interval", "must be at least 1")?;
        check(self.eval_episodes >= 1, "eval_episodes", "must be at least 1")?;
        check(self.grad_clip > 0.0, "grad_clip", "must be positive")?;
        for (key, v) in [("d_att", self.d_att), ("d_gru", self.d_gru), ("d_mix", self.d_mix)] {
            check(v >= 1, key, "must be at least 1")?;
        }
        Ok(())
    }

    /// Linear decay from `epsilon_start` to `epsilon_end`.
    pub fn epsilon(&self, env_steps: u64) -> f64 {
        if env_steps >= self.epsilon_anneal_steps {
            return self.epsilon_end;
        }
        let frac = (env_steps as f64 / self.epsilon_anneal_steps as f64).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// Everything a training run needs. The master seed is `env.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub label: String,
    pub n_leaders: usize,
    pub env: EnvConfig,
    pub train: TrainConfig,
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.train.validate()?;
        if self.n_leaders > self.env.n_agents {
            return Err(Error::config(
                "n_leaders",
                format!("{} leaders for {} agents", self.n_leaders, self.env.n_agents),
            ));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.env.seed
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims::new(&self.env, &self.train)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub net: NetDims,
    pub mixer: MixerDims,
}

impl ModelDims {
    pub fn new(env: &EnvConfig, train: &TrainConfig) -> Self {
        ModelDims {
            net: NetDims::new(env.n_agents, env.n_foods, train.d_att, train.d_gru),
            mixer: MixerDims { n_agents: env.n_agents, state_dim: env.state_dim(), d_mix: train.d_mix },
        }
    }

    /// Fresh network and mixer parameters in one store.
    pub fn init(&self, rng: &mut impl rand::Rng) -> ParamStore {
        let mut p = net::init_params(self.net, rng);
        p.extend(mixer::init_params(self.mixer, rng));
        p
    }

    /// Checks that `params` has exactly the expected names and shapes.
    pub fn check(&self, params: &ParamStore) -> Result<()> {
        self.init(&mut crate::rng::substream(0, crate::rng::INIT, 0)).check_compatible(params)
    }
}
