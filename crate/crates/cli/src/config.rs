//! Flat JSON run configuration.

use std::path::Path;

use lctt_core::{EnvConfig, Error, Result, RunSpec, TrainConfig};
use serde::{Deserialize, Serialize};

/// Every key is optional except `n_leaders`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub label: Option<String>,
    pub n_leaders: Option<usize>,

    pub grid_w: usize,
    pub grid_h: usize,
    pub n_agents: usize,
    pub n_foods: usize,
    pub sight_range: usize,
    pub max_steps: usize,
    pub agent_level_min: u32,
    pub agent_level_max: u32,
    pub seed: u64,

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

impl Default for RunConfig {
    fn default() -> Self {
        let e = EnvConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            label: None,
            n_leaders: None,
            grid_w: e.grid_w,
            grid_h: e.grid_h,
            n_agents: e.n_agents,
            n_foods: e.n_foods,
            sight_range: e.sight_range,
            max_steps: e.max_steps,
            agent_level_min: e.agent_level_min,
            agent_level_max: e.agent_level_max,
            seed: e.seed,
            gamma: t.gamma,
            lr: t.lr,
            lambda: t.lambda,
            batch_episodes: t.batch_episodes,
            buffer_capacity: t.buffer_capacity,
            target_update_interval: t.target_update_interval,
            epsilon_start: t.epsilon_start,
            epsilon_end: t.epsilon_end,
            epsilon_anneal_steps: t.epsilon_anneal_steps,
            total_env_steps: t.total_env_steps,
            eval_interval: t.eval_interval,
            eval_episodes: t.eval_episodes,
            grad_clip: t.grad_clip,
            d_att: t.d_att,
            d_gru: t.d_gru,
            d_mix: t.d_mix,
        }
    }
}

impl RunConfig {
    pub fn n_leaders(&self) -> Result<usize> {
        self.n_leaders.ok_or_else(|| Error::config("n_leaders", "missing required key"))
    }

    pub fn label(&self) -> Result<String> {
        Ok(self.label.clone().unwrap_or(format!("LCTT-{}L", self.n_leaders()?)))
    }

    pub fn env(&self) -> EnvConfig {
        EnvConfig {
            grid_w: self.grid_w,
            grid_h: self.grid_h,
            n_agents: self.n_agents,
            n_foods: self.n_foods,
            sight_range: self.sight_range,
            max_steps: self.max_steps,
            agent_level_min: self.agent_level_min,
            agent_level_max: self.agent_level_max,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            gamma: self.gamma,
            lr: self.lr,
            lambda: self.lambda,
            batch_episodes: self.batch_episodes,
            buffer_capacity: self.buffer_capacity,
            target_update_interval: self.target_update_interval,
            epsilon_start: self.epsilon_start,
            epsilon_end: self.epsilon_end,
            epsilon_anneal_steps: self.epsilon_anneal_steps,
            total_env_steps: self.total_env_steps,
            eval_interval: self.eval_interval,
            eval_episodes: self.eval_episodes,
            grad_clip: self.grad_clip,
            d_att: self.d_att,
            d_gru: self.d_gru,
            d_mix: self.d_mix,
        }
    }

    /// Validated run description; `seed` overrides the file's seed.
    pub fn to_spec(&self, seed: Option<u64>) -> Result<RunSpec> {
        let mut env = self.env();
        if let Some(s) = seed {
            env.seed = s;
        }
        let spec = RunSpec { label: self.label()?, n_leaders: self.n_leaders()?, env, train: self.train() };
        spec.validate()?;
        Ok(spec)
    }
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.to_string();
        // unknown and duplicate keys are reported at the enclosing level
        let key = quoted(&msg).filter(|_| key == "." || key.is_empty()).unwrap_or(key);
        Error::config(key, msg)
    })?;
    config.to_spec(None)?;
    Ok(config)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}

fn quoted(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}
