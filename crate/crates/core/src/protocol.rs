//! Locally centralized execution: leaders observe and instruct the agents
//! they see, uninstructed workers fall back to their own network, and
//! leadership is handed over each step by score-based nomination.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{observe, visibility, Action, EnvState, N_ACTIONS};
use crate::error::{Error, Result};
use crate::net::{HiddenState, InstructionPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Leader,
    Worker,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleAssignment {
    pub roles: Vec<Role>,
    /// Agents that became leaders by nomination in the shift that produced
    /// these roles. All false for an initial assignment.
    pub appointed: Vec<bool>,
}

impl RoleAssignment {
    pub fn from_leaders(n: usize, leaders: &[usize]) -> Result<Self> {
        let mut roles = vec![Role::Worker; n];
        for &i in leaders {
            if i >= n {
                return Err(Error::Protocol(format!("leader {i} out of range for {n} agents")));
            }
            roles[i] = Role::Leader;
        }
        Ok(RoleAssignment { roles, appointed: vec![false; n] })
    }

    pub fn n_agents(&self) -> usize {
        self.roles.len()
    }

    pub fn is_leader(&self, i: usize) -> bool {
        self.roles[i] == Role::Leader
    }

    /// Leader ids, ascending.
    pub fn leaders(&self) -> Vec<usize> {
        (0..self.roles.len()).filter(|&i| self.is_leader(i)).collect()
    }

    pub fn n_leaders(&self) -> usize {
        self.roles.iter().filter(|r| **r == Role::Leader).count()
    }
}

/// `l` leaders drawn uniformly without replacement.
pub fn assign_initial_roles(n: usize, l: usize, rng: &mut impl Rng) -> Result<RoleAssignment> {
    if l > n {
        return Err(Error::config("n_leaders", format!("{l} leaders requested for {n} agents")));
    }
    let leaders: Vec<usize> = index::sample(rng, n, l).into_iter().collect();
    RoleAssignment::from_leaders(n, &leaders)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionMessage {
    pub from: usize,
    pub to: usize,
    pub q_values: [f64; N_ACTIONS],
}

/// Elementwise mean of the received Q-vectors.
pub fn aggregate_instructions(messages: &[[f64; N_ACTIONS]]) -> Result<[f64; N_ACTIONS]> {
    if messages.is_empty() {
        return Err(Error::Protocol("cannot aggregate zero instructions".into()));
    }
    let mut q = [0.0; N_ACTIONS];
    for m in messages {
        for (acc, v) in q.iter_mut().zip(m) {
            *acc += v;
        }
    }
    let k = messages.len() as f64;
    Ok(q.map(|v| v / k))
}

/// Index of the largest entry among `allowed`, lowest index on ties.
pub(crate) fn masked_argmax(values: &[f64], allowed: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &v) in values.iter().enumerate() {
        if allowed(j) && best.is_none_or(|b| v > values[b]) {
            best = Some(j);
        }
    }
    best
}

pub fn greedy_action(q: &[f64; N_ACTIONS]) -> Action {
    Action::ALL[masked_argmax(q, |_| true).expect("nonempty action set")]
}

/// Hand leadership over for the next step.
///
/// Leaders are visited in ascending id. Each nominates the visible agent with
/// the highest score. Nominating itself, or an agent that is already
/// appointed, keeps it in charge; otherwise the nominee is appointed and the
/// nominator steps down unless an earlier leader appointed it. When
/// appointments collide and the count drops below the current one, the
/// lowest-id former leaders that were left out are reinstated.
pub fn leadership_shift(
    current: &RoleAssignment,
    scores: &[Vec<f64>],
    visible: &[Vec<bool>],
) -> Result<RoleAssignment> {
    let n = current.n_agents();
    if visible.len() != n || scores.len() != n {
        return Err(Error::Protocol(format!("leadership shift needs {n} score and visibility rows")));
    }
    let mut appointed = vec![false; n];
    let mut next = vec![false; n];
    for i in current.leaders() {
        if scores[i].len() != n || visible[i].len() != n {
            return Err(Error::Protocol(format!("leader {i} has malformed score or visibility row")));
        }
        if !visible[i][i] {
            return Err(Error::Protocol(format!("leader {i} does not see itself")));
        }
        let j = masked_argmax(&scores[i], |j| visible[i][j]).expect("self is visible");
        if j == i || appointed[j] {
            next[i] = true;
        } else {
            appointed[j] = true;
            next[j] = true;
            if !appointed[i] {
                next[i] = false;
            }
        }
    }
    let target = current.n_leaders();
    let mut count = next.iter().filter(|&&b| b).count();
    for i in current.leaders() {
        if count >= target {
            break;
        }
        if !next[i] {
            next[i] = true;
            count += 1;
        }
    }
    let roles = next.iter().map(|&b| if b { Role::Leader } else { Role::Worker }).collect();
    Ok(RoleAssignment { roles, appointed })
}

/// What happened in one execution step, serialized as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: usize,
    pub roles: Vec<Role>,
    /// Agent ran its own network on its own observation this step.
    pub observed: Vec<bool>,
    /// Visible entities in the agent's observation, self included, for observers.
    pub u: Vec<Option<usize>>,
    /// Instruction senders per receiving agent, ascending.
    pub senders: Vec<Vec<usize>>,
    pub actions: Vec<Action>,
    pub q: Vec<[f64; N_ACTIONS]>,
    /// Entity appears in at least one observer's view.
    pub delta: Vec<bool>,
}

impl StepTrace {
    pub fn received(&self, agent: usize) -> usize {
        self.senders[agent].len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.observed.len();
        if [self.u.len(), self.senders.len(), self.actions.len(), self.q.len(), self.roles.len()]
            .iter()
            .any(|&len| len != n)
        {
            return Err(Error::Protocol(format!("trace at t={} has inconsistent agent counts", self.t)));
        }
        for i in 0..n {
            if self.observed[i] != self.u[i].is_some() {
                return Err(Error::Protocol(format!("trace at t={}: U recorded iff agent {i} observed", self.t)));
            }
            if self.senders[i].is_empty() {
                return Err(Error::Protocol(format!("trace at t={}: agent {i} has no instruction", self.t)));
            }
        }
        Ok(())
    }
}

/// Everything one execution step produces.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub actions: Vec<Action>,
    pub trace: StepTrace,
    pub next_roles: RoleAssignment,
    pub hidden: Vec<HiddenState>,
    /// Leadership scores of the agents that ran, `None` for the rest.
    pub scores: Vec<Option<Vec<f64>>>,
}

/// One step of locally centralized execution.
pub fn execute_timestep<P: InstructionPolicy + ?Sized>(
    state: &EnvState,
    roles: &RoleAssignment,
    policy: &P,
    hidden: &[HiddenState],
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<StepOutcome> {
    let n = state.n_agents();
    if roles.n_agents() != n || hidden.len() != n || policy.n_agents() != n {
        return Err(Error::Protocol(format!("execution step expects {n} agents everywhere")));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::config("epsilon", format!("{epsilon} is outside [0, 1]")));
    }
    let vis = visibility(state);
    let mut inbox: Vec<Vec<(usize, [f64; N_ACTIONS])>> = vec![Vec::new(); n];
    let mut observed = vec![false; n];
    let mut u = vec![None; n];
    let mut delta = vec![false; state.n_entities()];
    let mut new_hidden = hidden.to_vec();
    let mut scores = vec![None; n];

    let mut run = |i: usize, observed: &mut Vec<bool>| -> Result<_> {
        let obs = observe(state, i);
        let out = policy.forward(&obs, &hidden[i])?;
        observed[i] = true;
        u[i] = Some(obs.visible_count());
        for (e, d) in delta.iter_mut().enumerate() {
            *d |= obs.is_visible(e);
        }
        new_hidden[i] = out.hidden.clone();
        scores[i] = Some(out.scores.clone());
        Ok(out)
    };

    for i in roles.leaders() {
        let out = run(i, &mut observed)?;
        for j in (0..n).filter(|&j| vis[i][j]) {
            inbox[j].push((i, out.instructions[j]));
        }
    }
    for (i, msgs) in inbox.iter_mut().enumerate() {
        if !roles.is_leader(i) && msgs.is_empty() {
            let out = run(i, &mut observed)?;
            msgs.push((i, out.instructions[i]));
        }
    }

    let mut q = Vec::with_capacity(n);
    let mut actions = Vec::with_capacity(n);
    for msgs in &inbox {
        let vectors: Vec<[f64; N_ACTIONS]> = msgs.iter().map(|m| m.1).collect();
        let agg = aggregate_instructions(&vectors)?;
        let action = if epsilon > 0.0 && rng.random_bool(epsilon) {
            Action::ALL[rng.random_range(0..N_ACTIONS)]
        } else {
            greedy_action(&agg)
        };
        q.push(agg);
        actions.push(action);
    }

    let masked: Vec<Vec<f64>> =
        scores.iter().map(|s| s.clone().unwrap_or_else(|| vec![f64::NEG_INFINITY; n])).collect();
    let next_roles = leadership_shift(roles, &masked, &vis)?;

    let mut senders: Vec<Vec<usize>> = inbox.iter().map(|m| m.iter().map(|x| x.0).collect()).collect();
    senders.iter_mut().for_each(|s| s.sort_unstable());
    let trace =
        StepTrace { t: state.t, roles: roles.roles.clone(), observed, u, senders, actions: actions.clone(), q, delta };
    Ok(StepOutcome { actions, trace, next_roles, hidden: new_hidden, scores })
}

/// Redundant observation ratio of one step: total entities processed by the
/// observers over the number of distinct entities observed; 1.0 when no entity
/// was observed.
pub fn redundant_observation_ratio(trace: &StepTrace) -> f64 {
    let num: usize = trace.u.iter().flatten().sum();
    let den = trace.delta.iter().filter(|&&d| d).count();
    if num == 0 && den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Mean of the per-step ratios; 1.0 for an empty list.
pub fn mean_redundant_observation_ratio(traces: &[StepTrace]) -> f64 {
    if traces.is_empty() {
        return 1.0;
    }
    traces.iter().map(redundant_observation_ratio).sum::<f64>() / traces.len() as f64
}
