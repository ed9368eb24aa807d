use std::fs;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::checkpoint;
use crate::diff::{Adam, ParamStore};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::net::TTrans;
use crate::protocol::redundant_observation_ratio;
use crate::rng;
use crate::trainer::config::{ModelDims, RunSpec};
use crate::trainer::loss::{total_loss, update_targets, LossReport};
use crate::trainer::record::{run_episode, EpisodeRecord, EpisodeRngs, ReplayBuffer};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.json";

/// One CSV row, written at every evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub run_id: String,
    pub config_name: String,
    pub seed: u64,
    pub env_steps: u64,
    pub episodes: u64,
    pub epsilon: f64,
    pub loss_q: Option<f64>,
    pub loss_g: Option<f64>,
    pub mean_test_reward: f64,
    pub mean_test_rdd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub mean_rdd: f64,
    pub steps: usize,
}

/// Team reward statistics per episode and the mean per-step ratio over all
/// steps of all episodes.
pub fn summarize(episodes: &[EpisodeRecord]) -> EvalSummary {
    let rewards: Vec<f64> = episodes.iter().map(EpisodeRecord::team_reward).collect();
    let k = rewards.len().max(1) as f64;
    let mean = rewards.iter().sum::<f64>() / k;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / k;
    let ratios: Vec<f64> = episodes.iter().flat_map(|e| e.traces().map(redundant_observation_ratio)).collect();
    let mean_rdd = if ratios.is_empty() { 1.0 } else { ratios.iter().sum::<f64>() / ratios.len() as f64 };
    EvalSummary { episodes: rewards.len(), mean_reward: mean, std_reward: var.sqrt(), mean_rdd, steps: ratios.len() }
}

/// Rollout pool sized by `LCTT_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("LCTT_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::config("LCTT_THREADS", format!("`{v}` is not a positive integer")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Training(format!("thread pool: {e}")))
}

/// Greedy episodes; episode `k` of round `round` uses its own substream, so
/// the result does not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_episodes(
    params: &ParamStore,
    dims: ModelDims,
    env: &EnvConfig,
    n_leaders: usize,
    episodes: usize,
    seed: u64,
    round: u64,
    pool: &rayon::ThreadPool,
) -> Result<Vec<EpisodeRecord>> {
    let net = TTrans { dims: dims.net, params: params.clone() };
    pool.install(|| {
        (0..episodes)
            .into_par_iter()
            .map(|k| {
                let index = (round << 32) | k as u64;
                let mut rngs = EpisodeRngs {
                    env: rng::substream(seed, rng::EVAL, index),
                    roles: rng::substream(seed, rng::EVAL, index ^ (1 << 31)),
                    exploration: rng::substream(seed, rng::EVAL, index ^ (1 << 30)),
                };
                run_episode(env, n_leaders, &net, 0.0, &mut rngs)
            })
            .collect()
    })
}

/// Online and target parameters with their optimizer.
pub struct Learner {
    pub spec: RunSpec,
    pub dims: ModelDims,
    pub online: ParamStore,
    pub target: ParamStore,
    pub optimizer: Adam,
    pub train_steps: u64,
}

impl Learner {
    pub fn new(spec: RunSpec) -> Result<Self> {
        spec.validate()?;
        let dims = spec.dims();
        let online = dims.init(&mut rng::substream(spec.seed(), rng::INIT, 0));
        let target = online.clone();
        let optimizer = Adam::new(spec.train.lr, Some(spec.train.grad_clip));
        Ok(Learner { spec, dims, online, target, optimizer, train_steps: 0 })
    }

    pub fn policy(&self) -> TTrans {
        TTrans { dims: self.dims.net, params: self.online.clone() }
    }

    /// One gradient step on the combined loss; refreshes the target on schedule.
    pub fn train_step(&mut self, batch: &[&EpisodeRecord]) -> Result<LossReport> {
        let out =
            total_loss(batch, &self.online, &self.target, self.dims, self.spec.train.gamma, self.spec.train.lambda)?;
        let norm = self.optimizer.step(&mut self.online, &out.grads);
        if !norm.is_finite() {
            return Err(Error::Training(format!("non-finite gradient norm {norm}")));
        }
        self.train_steps += 1;
        if self.train_steps.is_multiple_of(self.spec.train.target_update_interval) {
            update_targets(&self.online, &mut self.target)?;
        }
        Ok(out.report)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Incomplete,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub status: RunStatus,
    pub rows: Vec<LogRow>,
    pub env_steps: u64,
    pub episodes: u64,
    pub train_steps: u64,
}

pub fn checkpoint_path(out_dir: &Path, env_steps: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("step_{env_steps:010}.ckpt"))
}

#[derive(Default)]
struct LossMeans {
    q: f64,
    g: f64,
    n: u64,
    has_g: bool,
}

impl LossMeans {
    fn add(&mut self, r: &LossReport) {
        self.q += r.td;
        if let Some(g) = r.leadership {
            self.g += g;
            self.has_g = true;
        }
        self.n += 1;
    }

    fn take(&mut self) -> (Option<f64>, Option<f64>) {
        let out = if self.n == 0 {
            (None, None)
        } else {
            let n = self.n as f64;
            (Some(self.q / n), self.has_g.then(|| self.g / n))
        };
        *self = LossMeans::default();
        out
    }
}

struct Loop<'a> {
    spec: &'a RunSpec,
    out_dir: &'a Path,
    learner: Learner,
    buffer: ReplayBuffer,
    replay_rng: rand_chacha::ChaCha8Rng,
    pool: rayon::ThreadPool,
    csv: csv::Writer<fs::File>,
    env_steps: u64,
    episodes: u64,
    evals: u64,
    losses: LossMeans,
    rows: Vec<LogRow>,
}

impl Loop<'_> {
    fn log_row(&mut self) -> Result<&LogRow> {
        let spec = self.spec;
        let records = evaluate_episodes(
            &self.learner.online,
            self.learner.dims,
            &spec.env,
            spec.n_leaders,
            spec.train.eval_episodes,
            spec.seed(),
            self.evals,
            &self.pool,
        )?;
        let summary = summarize(&records);
        self.evals += 1;
        let (loss_q, loss_g) = self.losses.take();
        let row = LogRow {
            run_id: format!("{}-s{}", spec.label, spec.seed()),
            config_name: spec.label.clone(),
            seed: spec.seed(),
            env_steps: self.env_steps,
            episodes: self.episodes,
            epsilon: spec.train.epsilon(self.env_steps),
            loss_q,
            loss_g,
            mean_test_reward: summary.mean_reward,
            mean_test_rdd: summary.mean_rdd,
        };
        self.csv.serialize(&row)?;
        self.csv.flush()?;
        checkpoint::save(checkpoint_path(self.out_dir, self.env_steps), &self.learner.online)?;
        self.rows.push(row);
        Ok(self.rows.last().expect("just pushed"))
    }

    fn collect_and_learn(&mut self) -> Result<()> {
        let spec = self.spec;
        let epsilon = spec.train.epsilon(self.env_steps);
        let policy = self.learner.policy();
        let mut rngs = EpisodeRngs {
            env: rng::substream(spec.seed(), rng::ENV, self.episodes),
            roles: rng::substream(spec.seed(), rng::ROLES, self.episodes),
            exploration: rng::substream(spec.seed(), rng::EXPLORATION, self.episodes),
        };
        let episode = run_episode(&spec.env, spec.n_leaders, &policy, epsilon, &mut rngs)?;
        drop(policy);
        self.env_steps += episode.len() as u64;
        self.episodes += 1;
        self.buffer.push(episode);
        if self.buffer.len() >= spec.train.batch_episodes {
            let batch = self.buffer.sample(spec.train.batch_episodes, &mut self.replay_rng)?;
            let report = self.learner.train_step(&batch)?;
            self.losses.add(&report);
        }
        Ok(())
    }

    fn write_diagnostic(&self, err: &Error) -> Result<()> {
        let norms: std::collections::BTreeMap<&String, f64> =
            self.learner.online.iter().map(|(k, t)| (k, t.data().iter().map(|v| v * v).sum::<f64>().sqrt())).collect();
        let dump = serde_json::json!({
            "error": err.to_string(),
            "env_steps": self.env_steps,
            "episodes": self.episodes,
            "train_steps": self.learner.train_steps,
            "epsilon": self.spec.train.epsilon(self.env_steps),
            "parameter_norms": norms,
        });
        let mut f = fs::File::create(self.out_dir.join(DIAGNOSTIC_FILE))?;
        writeln!(f, "{}", serde_json::to_string_pretty(&dump)?)?;
        Ok(())
    }
}

/// Train one configuration, writing the metrics CSV and checkpoints into
/// `out_dir`. `on_row` sees every row after it is flushed and may stop the
/// run early.
pub fn train(
    spec: &RunSpec,
    out_dir: &Path,
    mut on_row: impl FnMut(&LogRow) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    let learner = Learner::new(spec.clone())?;
    fs::create_dir_all(out_dir.join(CHECKPOINT_DIR))?;
    let csv = csv::Writer::from_writer(fs::File::create(out_dir.join(METRICS_FILE))?);
    let mut lp = Loop {
        spec,
        out_dir,
        learner,
        buffer: ReplayBuffer::new(spec.train.buffer_capacity),
        replay_rng: rng::substream(spec.seed(), rng::REPLAY, 0),
        pool: thread_pool()?,
        csv,
        env_steps: 0,
        episodes: 0,
        evals: 0,
        losses: LossMeans::default(),
        rows: Vec::new(),
    };

    let result = (|| -> Result<RunStatus> {
        let interval = spec.train.eval_interval;
        let mut next_eval = 0;
        loop {
            if lp.env_steps >= next_eval || lp.env_steps >= spec.train.total_env_steps {
                let row = lp.log_row()?;
                if on_row(row).is_break() {
                    return Ok(RunStatus::Incomplete);
                }
                next_eval = (lp.env_steps / interval + 1) * interval;
            }
            if lp.env_steps >= spec.train.total_env_steps {
                return Ok(RunStatus::Complete);
            }
            lp.collect_and_learn()?;
        }
    })();

    match result {
        Ok(status) => {
            if status == RunStatus::Complete {
                checkpoint::save(out_dir.join(FINAL_CHECKPOINT), &lp.learner.online)?;
            }
            Ok(TrainOutcome {
                status,
                rows: lp.rows,
                env_steps: lp.env_steps,
                episodes: lp.episodes,
                train_steps: lp.learner.train_steps,
            })
        }
        Err(e) => {
            if e.is_numeric() {
                lp.write_diagnostic(&e)?;
            }
            Err(e)
        }
    }
}
