//! State-conditioned monotonic mixing of per-agent values.
//!
//! Hypernetworks map the global state to the mixing weights; the weights that
//! touch agent values pass through `abs`, so `Q_tot` is non-decreasing in
//! every agent value.

use rand::Rng;

use crate::diff::params::glorot;
use crate::diff::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const PREFIX: &str = "mixer.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixerDims {
    pub n_agents: usize,
    pub state_dim: usize,
    pub d_mix: usize,
}

pub fn init_params(dims: MixerDims, rng: &mut impl Rng) -> ParamStore {
    let MixerDims { n_agents, state_dim, d_mix } = dims;
    let s = state_dim + 1;
    let mut p = ParamStore::new();
    p.insert("mixer.hyper_w1", glorot(s, n_agents * d_mix, true, rng));
    p.insert("mixer.hyper_b1", glorot(s, d_mix, true, rng));
    p.insert("mixer.hyper_w2", glorot(s, d_mix, true, rng));
    p.insert("mixer.hyper_b2.l1", glorot(s, d_mix, true, rng));
    p.insert("mixer.hyper_b2.l2", glorot(d_mix + 1, 1, true, rng));
    p
}

pub struct MixerVars {
    dims: MixerDims,
    w1: Var,
    b1: Var,
    w2: Var,
    b2_l1: Var,
    b2_l2: Var,
    ones_mix: Var,
}

impl MixerVars {
    pub fn bind(tape: &mut Tape, params: &ParamStore, dims: MixerDims, trainable: bool) -> Result<Self> {
        let bound = params.with_prefix(PREFIX).bind(tape, trainable);
        Self::from_bound(tape, &bound, dims)
    }

    pub fn from_bound(tape: &mut Tape, bound: &BoundParams, dims: MixerDims) -> Result<Self> {
        Ok(MixerVars {
            dims,
            w1: bound.var("mixer.hyper_w1")?,
            b1: bound.var("mixer.hyper_b1")?,
            w2: bound.var("mixer.hyper_w2")?,
            b2_l1: bound.var("mixer.hyper_b2.l1")?,
            b2_l2: bound.var("mixer.hyper_b2.l2")?,
            ones_mix: tape.constant(Tensor::full(vec![dims.d_mix, 1], 1.0)),
        })
    }

    pub fn all(&self) -> [Var; 5] {
        [self.w1, self.b1, self.w2, self.b2_l1, self.b2_l2]
    }
}

/// `qs` is `[T, n]`, `states` is `[T, state_dim]`; returns `[T, 1]`.
pub fn mix_on_tape(tape: &mut Tape, p: &MixerVars, qs: Var, states: Var) -> Result<Var> {
    let MixerDims { n_agents, state_dim, d_mix } = p.dims;
    let (qshape, sshape) = (tape.value(qs).shape().to_vec(), tape.value(states).shape().to_vec());
    if qshape.len() != 2 || qshape[1] != n_agents || sshape != [qshape[0], state_dim] {
        return Err(Error::shape("mixer", format!("agent values {qshape:?}, states {sshape:?}")));
    }
    let t = qshape[0];
    let ones = tape.constant(Tensor::full(vec![t, 1], 1.0));
    let s = tape.concat_last(&[states, ones])?;

    let w1 = tape.matmul(s, p.w1)?;
    let w1 = tape.abs(w1)?;
    let w1 = tape.reshape(w1, vec![t, n_agents, d_mix])?;
    let q3 = tape.reshape(qs, vec![t, 1, n_agents])?;
    let hidden = tape.matmul(q3, w1)?;
    let hidden = tape.reshape(hidden, vec![t, d_mix])?;
    let b1 = tape.matmul(s, p.b1)?;
    let hidden = tape.add(hidden, b1)?;
    let hidden = tape.elu(hidden)?;

    let w2 = tape.matmul(s, p.w2)?;
    let w2 = tape.abs(w2)?;
    let weighted = tape.mul(hidden, w2)?;
    let mixed = tape.matmul(weighted, p.ones_mix)?;

    let b2 = tape.matmul(s, p.b2_l1)?;
    let b2 = tape.elu(b2)?;
    let b2 = tape.concat_last(&[b2, ones])?;
    let b2 = tape.matmul(b2, p.b2_l2)?;
    tape.add(mixed, b2)
}

/// `Q_tot` for a single state.
pub fn mixing_forward(params: &ParamStore, dims: MixerDims, agent_qs: &[f64], state: &[f64]) -> Result<f64> {
    Ok(mix_batch(params, dims, &[agent_qs.to_vec()], &[state.to_vec()])?[0])
}

/// `Q_tot` for each (agent values, state) row, without gradients.
pub fn mix_batch(params: &ParamStore, dims: MixerDims, agent_qs: &[Vec<f64>], states: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = MixerVars::bind(&mut tape, params, dims, false)?;
    let q = tape.constant(Tensor::from_rows(agent_qs)?);
    let s = tape.constant(Tensor::from_rows(states)?);
    let out = mix_on_tape(&mut tape, &vars, q, s)?;
    Ok(tape.value(out).data().to_vec())
}
