//! Temporal-difference loss on the mixed team value plus the leadership
//! classification loss.

use std::collections::BTreeMap;

use crate::diff::ParamStore;
use crate::diff::{Tape, Tensor, Var};
use crate::env::{Observation, N_ACTIONS};
use crate::error::{Error, Result};
use crate::mixer::{mix_batch, mix_on_tape, MixerVars};
use crate::net::{forward_on_tape, ForwardVars, HiddenState, InstructionPolicy, PolicyOutput, TTrans, TTransVars};
use crate::protocol::{aggregate_instructions, masked_argmax};
use crate::trainer::config::ModelDims;
use crate::trainer::record::EpisodeRecord;

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// Mean squared TD residual over all batch steps.
    pub td: f64,
    /// Mean leadership cross-entropy over agents and non-terminal steps;
    /// `None` when the leadership term is disabled.
    pub leadership: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct LossAndGrads {
    pub report: LossReport,
    pub grads: BTreeMap<String, Tensor>,
}

/// Leadership Q-value of every agent `k`: the sum, over the agents `j` that
/// `k` sees, of `j`'s own value for the action `k` would instruct `j` to take.
pub fn leadership_q_from_outputs(outputs: &[PolicyOutput], visible: &[Vec<bool>]) -> Vec<f64> {
    let n = outputs.len();
    (0..n)
        .map(|k| {
            (0..n)
                .filter(|&j| visible[k][j])
                .map(|j| {
                    let a = masked_argmax(&outputs[k].instructions[j], |_| true).expect("nonempty action set");
                    outputs[j].instructions[j][a]
                })
                .sum()
        })
        .collect()
}

pub fn leadership_q_values<P: InstructionPolicy + ?Sized>(
    policy: &P,
    observations: &[Observation],
    hidden: &[HiddenState],
    visible: &[Vec<bool>],
) -> Result<Vec<f64>> {
    let outputs = observations.iter().zip(hidden).map(|(o, h)| policy.forward(o, h)).collect::<Result<Vec<_>>>()?;
    Ok(leadership_q_from_outputs(&outputs, visible))
}

/// Visible agent with the highest leadership Q-value, lowest id on ties.
pub fn pseudo_label(leadership_q: &[f64], visible: &[bool]) -> Result<usize> {
    masked_argmax(leadership_q, |k| visible.get(k).copied().unwrap_or(false))
        .ok_or_else(|| Error::Training("pseudo-label needs at least one visible agent".into()))
}

/// One-hot form of [`pseudo_label`].
pub fn leadership_pseudo_labels(leadership_q: &[f64], visible: &[bool]) -> Result<Vec<f64>> {
    let label = pseudo_label(leadership_q, visible)?;
    Ok((0..leadership_q.len()).map(|k| (k == label) as u8 as f64).collect())
}

/// Softmax over the visible entries; invisible entries get probability 0.
pub fn masked_softmax(scores: &[f64], visible: &[bool]) -> Vec<f64> {
    let max = scores.iter().zip(visible).filter(|(_, &v)| v).map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().zip(visible).map(|(s, &v)| if v { (s - max).exp() } else { 0.0 }).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Shannon entropy with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// `KL(p || q)` with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&a, _)| a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Cross-entropy between a one-hot label and the visible-only softmax of
/// the scores.
pub fn leadership_loss(scores: &[f64], visible: &[bool], label: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::row(scores.to_vec()));
    let l = tape.masked_cross_entropy(g, visible.to_vec(), label)?;
    Ok(tape.value(l).item())
}

/// Bootstrapped regression target; terminal steps use the reward alone.
pub fn td_target(team_reward: f64, done: bool, gamma: f64, next_target_q_tot: f64) -> f64 {
    if done {
        team_reward
    } else {
        team_reward + gamma * next_target_q_tot
    }
}

/// Hard copy of the online parameters into the target store.
pub fn update_targets(online: &ParamStore, target: &mut ParamStore) -> Result<()> {
    target.copy_from(online)
}

/// Target-network quantities along one recorded episode.
#[derive(Clone, Debug)]
pub struct TargetEpisode {
    /// Target team value at each step from the per-agent greedy values of the
    /// recorded routing.
    pub q_tot: Vec<f64>,
    /// Leadership Q-values at each step, when requested.
    pub leadership_q: Option<Vec<Vec<f64>>>,
}

pub fn target_episode(
    target: &ParamStore,
    dims: ModelDims,
    record: &EpisodeRecord,
    leadership: bool,
) -> Result<TargetEpisode> {
    let n = dims.net.n_agents;
    let net = TTrans { dims: dims.net, params: target.clone() };
    let mut hidden = vec![HiddenState::zeros(dims.net.d_gru); n];
    let mut greedy = Vec::with_capacity(record.len());
    let mut states = Vec::with_capacity(record.len());
    let mut lead = Vec::new();
    for step in &record.steps {
        let obs = step.observations();
        let outs = (0..n)
            .map(|i| (leadership || step.trace.observed[i]).then(|| net.forward(&obs[i], &hidden[i])).transpose())
            .collect::<Result<Vec<_>>>()?;
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            let received: Vec<[f64; N_ACTIONS]> = step.trace.senders[j]
                .iter()
                .map(|&k| outs[k].as_ref().map(|o| o.instructions[j]))
                .collect::<Option<_>>()
                .ok_or_else(|| Error::Training(format!("sender without a forward pass at t={}", step.state.t)))?;
            let agg = aggregate_instructions(&received)?;
            row.push(agg.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
        greedy.push(row);
        states.push(step.global_state());
        if leadership {
            let outs: Vec<PolicyOutput> = outs.iter().map(|o| o.clone().expect("all agents ran")).collect();
            lead.push(leadership_q_from_outputs(&outs, &step.visibility()));
        }
        for i in (0..n).filter(|&i| step.trace.observed[i]) {
            hidden[i] = outs[i].as_ref().expect("observer ran").hidden.clone();
        }
    }
    let q_tot = mix_batch(target, dims.mixer, &greedy, &states)?;
    Ok(TargetEpisode { q_tot, leadership_q: leadership.then_some(lead) })
}

/// Replays the recorded episode on a tape. Agents that ran at a step advance
/// their hidden state; with `all_agents` the others are also evaluated on
/// their stale state, without advancing it.
fn replay_on_tape(
    tape: &mut Tape,
    vars: &TTransVars,
    dims: ModelDims,
    record: &EpisodeRecord,
    all_agents: bool,
) -> Result<Vec<Vec<Option<ForwardVars>>>> {
    let n = dims.net.n_agents;
    let h0 = tape.constant(Tensor::zeros(vec![1, dims.net.d_gru]));
    let mut hidden = vec![h0; n];
    let mut out = Vec::with_capacity(record.len());
    for step in &record.steps {
        let obs = step.observations();
        let mut row = vec![None; n];
        for i in 0..n {
            let ran = step.trace.observed[i];
            if !ran && !all_agents {
                continue;
            }
            let o = tape.constant(obs[i].to_input());
            let f = forward_on_tape(tape, vars, dims.net, o, hidden[i])?;
            if ran {
                hidden[i] = f.hidden;
            }
            row[i] = Some(f);
        }
        out.push(row);
    }
    Ok(out)
}

/// Aggregated Q-vectors obtained by replaying the recorded routing with
/// `params`.
pub fn replay_aggregated_q(
    params: &ParamStore,
    dims: ModelDims,
    record: &EpisodeRecord,
) -> Result<Vec<Vec<[f64; N_ACTIONS]>>> {
    let mut tape = Tape::new();
    let vars = TTransVars::bind(&mut tape, params, dims.net, false)?;
    let fw = replay_on_tape(&mut tape, &vars, dims, record, false)?;
    record
        .steps
        .iter()
        .zip(&fw)
        .map(|(step, row)| {
            step.trace
                .senders
                .iter()
                .enumerate()
                .map(|(j, senders)| {
                    let received: Vec<[f64; N_ACTIONS]> = senders
                        .iter()
                        .map(|&k| {
                            let rows = tape.value(row[k].as_ref().expect("sender ran").instructions);
                            rows.row_slice(j).try_into().expect("action head width")
                        })
                        .collect();
                    aggregate_instructions(&received)
                })
                .collect()
        })
        .collect()
}

struct EpisodeTerms {
    squared: f64,
    cross_entropy: f64,
    grads: Option<BTreeMap<String, Tensor>>,
}

#[allow(clippy::too_many_arguments)]
fn episode_terms(
    online: &ParamStore,
    dims: ModelDims,
    record: &EpisodeRecord,
    target: &TargetEpisode,
    gamma: f64,
    td_weight: f64,
    lead_weight: Option<f64>,
    want_grads: bool,
) -> Result<EpisodeTerms> {
    let n = dims.net.n_agents;
    let mut tape = Tape::new();
    let bound = online.bind(&mut tape, want_grads);
    let tv = TTransVars::from_bound(&mut tape, &bound, dims.net)?;
    let mv = MixerVars::from_bound(&mut tape, &bound, dims.mixer)?;
    let fw = replay_on_tape(&mut tape, &tv, dims, record, lead_weight.is_some())?;

    let mut rows = Vec::with_capacity(record.len());
    let mut states = Vec::with_capacity(record.len() * dims.mixer.state_dim);
    let mut y = Vec::with_capacity(record.len());
    for (t, step) in record.steps.iter().enumerate() {
        let mut cols = Vec::with_capacity(n);
        for j in 0..n {
            let senders = &step.trace.senders[j];
            let a = step.trace.actions[j].index();
            let mut acc: Option<Var> = None;
            for &k in senders {
                let f = fw[t][k].as_ref().ok_or_else(|| Error::Training(format!("sender {k} did not run at t={t}")))?;
                let v = tape.gather(f.instructions, vec![j * N_ACTIONS + a])?;
                acc = Some(match acc {
                    Some(prev) => tape.add(prev, v)?,
                    None => v,
                });
            }
            let acc = acc.ok_or_else(|| Error::Training(format!("agent {j} has no instruction at t={t}")))?;
            cols.push(tape.scale(acc, 1.0 / senders.len() as f64)?);
        }
        rows.push(tape.concat_last(&cols)?);
        states.extend(step.global_state());
        let next = if step.done {
            0.0
        } else {
            *target.q_tot.get(t + 1).ok_or_else(|| Error::Training("non-terminal last step".into()))?
        };
        y.push(td_target(step.team_reward(), step.done, gamma, next));
    }
    let qs = tape.concat_rows(&rows)?;
    let s = tape.constant(Tensor::new(vec![record.len(), dims.mixer.state_dim], states)?);
    let q_tot = mix_on_tape(&mut tape, &mv, qs, s)?;
    let y = tape.constant(Tensor::new(vec![record.len(), 1], y)?);
    let sq = tape.squared_error(q_tot, y)?;
    let mut loss = tape.scale(sq, td_weight)?;

    let mut ce_value = 0.0;
    if let Some(w) = lead_weight {
        let lead = target.leadership_q.as_ref().ok_or_else(|| Error::Training("missing leadership targets".into()))?;
        let mut ce_sum: Option<Var> = None;
        for (t, step) in record.steps.iter().enumerate().filter(|(_, s)| !s.done) {
            let vis = step.visibility();
            for i in 0..n {
                let label = pseudo_label(&lead[t + 1], &vis[i])?;
                let f = fw[t][i].as_ref().expect("all agents evaluated");
                let ce = tape.masked_cross_entropy(f.scores, vis[i].clone(), label)?;
                ce_sum = Some(match ce_sum {
                    Some(prev) => tape.add(prev, ce)?,
                    None => ce,
                });
            }
        }
        if let Some(ce_sum) = ce_sum {
            ce_value = tape.value(ce_sum).item();
            let weighted = tape.scale(ce_sum, w)?;
            loss = tape.add(loss, weighted)?;
        }
    }

    let squared = tape.value(sq).item();
    let grads = if want_grads {
        let mut g = tape.backward(loss)?;
        Some(
            bound
                .iter()
                .map(|(name, &var)| {
                    let grad = g.take(var).unwrap_or_else(|| Tensor::zeros(tape.value(var).shape().to_vec()));
                    (name.clone(), grad)
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(EpisodeTerms { squared, cross_entropy: ce_value, grads })
}

fn batch_losses(
    batch: &[&EpisodeRecord],
    online: &ParamStore,
    target: &ParamStore,
    dims: ModelDims,
    gamma: f64,
    lambda: Option<f64>,
    want_grads: bool,
) -> Result<LossAndGrads> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    for ep in batch {
        ep.validate()?;
    }
    let n_td: usize = batch.iter().map(|e| e.len()).sum();
    let n_g: usize = batch.iter().map(|e| (e.len() - 1) * dims.net.n_agents).sum();
    let td_weight = 1.0 / n_td as f64;
    let lead_weight = lambda.map(|l| if n_g > 0 { l / n_g as f64 } else { 0.0 });

    let mut squared = 0.0;
    let mut ce = 0.0;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for ep in batch {
        let tgt = target_episode(target, dims, ep, lambda.is_some())?;
        let terms = episode_terms(online, dims, ep, &tgt, gamma, td_weight, lead_weight, want_grads)?;
        squared += terms.squared;
        ce += terms.cross_entropy;
        for (name, g) in terms.grads.into_iter().flatten() {
            match grads.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    grads.insert(name, g);
                }
            }
        }
    }
    let td = squared / n_td as f64;
    let leadership = lambda.map(|_| if n_g > 0 { ce / n_g as f64 } else { 0.0 });
    let total = td + lambda.zip(leadership).map_or(0.0, |(l, g)| l * g);
    if !total.is_finite() {
        return Err(Error::Training(format!("non-finite loss (td {td}, leadership {leadership:?})")));
    }
    Ok(LossAndGrads { report: LossReport { td, leadership, total }, grads })
}

/// Mean squared TD error of the mixed team value over every step of the batch.
pub fn td_loss(
    batch: &[&EpisodeRecord],
    online: &ParamStore,
    target: &ParamStore,
    dims: ModelDims,
    gamma: f64,
) -> Result<f64> {
    Ok(batch_losses(batch, online, target, dims, gamma, None, false)?.report.td)
}

/// `td + lambda * leadership` and its gradient with respect to the online
/// parameters. With `lambda == 0` the leadership term is not evaluated.
pub fn total_loss(
    batch: &[&EpisodeRecord],
    online: &ParamStore,
    target: &ParamStore,
    dims: ModelDims,
    gamma: f64,
    lambda: f64,
) -> Result<LossAndGrads> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::config("lambda", format!("{lambda} is negative")));
    }
    let lambda = (lambda > 0.0).then_some(lambda);
    batch_losses(batch, online, target, dims, gamma, lambda, true)
}

/// Loss values only, with the leadership term always evaluated.
pub fn loss_values(
    batch: &[&EpisodeRecord],
    online: &ParamStore,
    target: &ParamStore,
    dims: ModelDims,
    gamma: f64,
    lambda: f64,
) -> Result<LossReport> {
    Ok(batch_losses(batch, online, target, dims, gamma, Some(lambda), false)?.report)
}
