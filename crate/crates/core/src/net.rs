//! Team transformer: the shared policy network.
//!
//! Per-entity linear encoding feeds a GRU cell; an attention block over the
//! encoded entities and the teammate-identity embeddings produces one
//! representation per teammate, and the action head turns each into that
//! teammate's instruction Q-vector. A small MLP on the GRU state gives the
//! leadership scores.

use rand::Rng;

use crate::diff::params::glorot;
use crate::diff::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::env::{Observation, INPUT_FEATURES, N_ACTIONS};
use crate::error::{Error, Result};

pub const PREFIX: &str = "ttrans.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetDims {
    pub n_agents: usize,
    pub n_entities: usize,
    pub d_att: usize,
    pub d_gru: usize,
}

impl NetDims {
    pub fn new(n_agents: usize, n_foods: usize, d_att: usize, d_gru: usize) -> Self {
        NetDims { n_agents, n_entities: n_agents + n_foods, d_att, d_gru }
    }
}

/// Recurrent state of one agent's network.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState(pub Vec<f64>);

impl HiddenState {
    pub fn zeros(d_gru: usize) -> Self {
        HiddenState(vec![0.0; d_gru])
    }
}

/// Output of one network evaluation for one observing agent.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    /// Row `j` is the instruction Q-vector for teammate `j`.
    pub instructions: Vec<[f64; N_ACTIONS]>,
    pub scores: Vec<f64>,
    pub hidden: HiddenState,
}

/// Anything that can turn an observation into instructions, scores and a
/// new hidden state.
pub trait InstructionPolicy {
    fn n_agents(&self) -> usize;
    fn hidden_dim(&self) -> usize;
    fn forward(&self, obs: &Observation, hidden: &HiddenState) -> Result<PolicyOutput>;

    /// The observer's instruction to itself.
    fn self_q(&self, agent: usize, obs: &Observation, hidden: &HiddenState) -> Result<[f64; N_ACTIONS]> {
        Ok(self.forward(obs, hidden)?.instructions[agent])
    }
}

/// Fresh `ttrans.*` parameters.
pub fn init_params(dims: NetDims, rng: &mut impl Rng) -> ParamStore {
    let NetDims { n_agents, n_entities, d_att, d_gru } = dims;
    let flat = n_entities * d_att;
    let mut p = ParamStore::new();
    p.insert("ttrans.encoder.w", glorot(INPUT_FEATURES, d_att, false, rng));
    for gate in ["z", "r", "h"] {
        p.insert(format!("ttrans.gru.w_{gate}"), glorot(flat, d_gru, false, rng));
        p.insert(format!("ttrans.gru.u_{gate}"), glorot(d_gru, d_gru, false, rng));
        p.insert(format!("ttrans.gru.b_{gate}"), Tensor::zeros(vec![1, d_gru]));
    }
    p.insert("ttrans.team.embed", glorot(n_agents, d_att, false, rng));
    p.insert("ttrans.attn.w_k", glorot(d_att, d_att, false, rng));
    p.insert("ttrans.attn.w_v", glorot(d_att, d_att, false, rng));
    p.insert("ttrans.attn.w_q", glorot(d_att, d_att, false, rng));
    p.insert("ttrans.attn.w_qh", glorot(d_gru, d_att, false, rng));
    p.insert("ttrans.head.action", glorot(d_att + d_gru + 1, N_ACTIONS, true, rng));
    p.insert("ttrans.head.lead1", glorot(d_gru + 1, d_gru, true, rng));
    p.insert("ttrans.head.lead2", glorot(d_gru + 1, n_agents, true, rng));
    p
}

/// Tape handles for the network parameters.
pub struct TTransVars {
    encoder: Var,
    w: [Var; 3],
    u: [Var; 3],
    b: [Var; 3],
    team: Var,
    w_k: Var,
    w_v: Var,
    w_q: Var,
    w_qh: Var,
    action: Var,
    lead1: Var,
    lead2: Var,
    ones_team: Var,
    one: Var,
}

impl TTransVars {
    pub fn bind(tape: &mut Tape, params: &ParamStore, dims: NetDims, trainable: bool) -> Result<Self> {
        let bound = params.with_prefix(PREFIX).bind(tape, trainable);
        Self::from_bound(tape, &bound, dims)
    }

    pub fn from_bound(tape: &mut Tape, bound: &BoundParams, dims: NetDims) -> Result<Self> {
        let get = |name: &str| bound.var(name);
        Ok(TTransVars {
            encoder: get("ttrans.encoder.w")?,
            w: [get("ttrans.gru.w_z")?, get("ttrans.gru.w_r")?, get("ttrans.gru.w_h")?],
            u: [get("ttrans.gru.u_z")?, get("ttrans.gru.u_r")?, get("ttrans.gru.u_h")?],
            b: [get("ttrans.gru.b_z")?, get("ttrans.gru.b_r")?, get("ttrans.gru.b_h")?],
            team: get("ttrans.team.embed")?,
            w_k: get("ttrans.attn.w_k")?,
            w_v: get("ttrans.attn.w_v")?,
            w_q: get("ttrans.attn.w_q")?,
            w_qh: get("ttrans.attn.w_qh")?,
            action: get("ttrans.head.action")?,
            lead1: get("ttrans.head.lead1")?,
            lead2: get("ttrans.head.lead2")?,
            ones_team: tape.constant(Tensor::full(vec![dims.n_agents, 1], 1.0)),
            one: tape.constant(Tensor::scalar(1.0)),
        })
    }

    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.encoder];
        v.extend(self.w);
        v.extend(self.u);
        v.extend(self.b);
        v.extend([self.team, self.w_k, self.w_v, self.w_q, self.w_qh, self.action, self.lead1, self.lead2]);
        v
    }
}

/// Tape outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[n, |A|]`
    pub instructions: Var,
    /// `[1, n]`
    pub scores: Var,
    /// `[1, d_gru]`
    pub hidden: Var,
}

/// `softmax(q k^T / sqrt(d)) v`, row-wise softmax, `d` = width of `q`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qs, ks, vs) = (tape.value(q).shape().to_vec(), tape.value(k).shape().to_vec(), tape.value(v).shape().to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::shape("attention", format!("q {qs:?}, k {ks:?}, v {vs:?}")));
    }
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / (qs[1] as f64).sqrt())?;
    let weights = tape.softmax(scaled)?;
    tape.matmul(weights, v)
}

/// Record one forward pass. `obs` is `[|E|, INPUT_FEATURES]`, `h` is `[1, d_gru]`.
pub fn forward_on_tape(tape: &mut Tape, p: &TTransVars, dims: NetDims, obs: Var, h: Var) -> Result<ForwardVars> {
    let obs_shape = tape.value(obs).shape();
    if obs_shape != [dims.n_entities, INPUT_FEATURES] {
        return Err(Error::shape(
            "ttrans.forward",
            format!("observation {obs_shape:?}, expected [{}, {INPUT_FEATURES}]", dims.n_entities),
        ));
    }
    if tape.value(h).shape() != [1, dims.d_gru] {
        return Err(Error::shape("ttrans.forward", format!("hidden {:?}", tape.value(h).shape())));
    }

    let enc = tape.matmul(obs, p.encoder)?;
    let x = tape.reshape(enc, vec![1, dims.n_entities * dims.d_att])?;

    // GRU cell
    let mut gates = [h; 2];
    for (g, gate) in gates.iter_mut().enumerate() {
        let xw = tape.matmul(x, p.w[g])?;
        let hu = tape.matmul(h, p.u[g])?;
        let pre = tape.add(xw, hu)?;
        let pre = tape.add(pre, p.b[g])?;
        *gate = tape.sigmoid(pre)?;
    }
    let [z, r] = gates;
    let rh = tape.mul(r, h)?;
    let xw = tape.matmul(x, p.w[2])?;
    let rhu = tape.matmul(rh, p.u[2])?;
    let pre = tape.add(xw, rhu)?;
    let pre = tape.add(pre, p.b[2])?;
    let cand = tape.tanh(pre)?;
    let delta = tape.sub(cand, h)?;
    let step = tape.mul(z, delta)?;
    let h_new = tape.add(h, step)?;

    // Attention over entities and teammate identities
    let kv_in = tape.concat_rows(&[enc, p.team])?;
    let k = tape.matmul(kv_in, p.w_k)?;
    let v = tape.matmul(kv_in, p.w_v)?;
    let q_team = tape.matmul(p.team, p.w_q)?;
    let q_h = tape.matmul(h_new, p.w_qh)?;
    let q_h = tape.matmul(p.ones_team, q_h)?;
    let q = tape.add(q_team, q_h)?;
    let z_att = attention(tape, q, k, v)?;

    let h_dup = tape.matmul(p.ones_team, h_new)?;
    let head_in = tape.concat_last(&[z_att, h_dup, p.ones_team])?;
    let instructions = tape.matmul(head_in, p.action)?;

    let c_in = tape.concat_last(&[h_new, p.one])?;
    let c1 = tape.matmul(c_in, p.lead1)?;
    let c1 = tape.tanh(c1)?;
    let c2_in = tape.concat_last(&[c1, p.one])?;
    let scores = tape.matmul(c2_in, p.lead2)?;

    Ok(ForwardVars { instructions, scores, hidden: h_new })
}

pub(crate) fn read_output(tape: &Tape, out: &ForwardVars) -> PolicyOutput {
    let instr = tape.value(out.instructions);
    let instructions = instr.data().chunks(N_ACTIONS).map(|row| row.try_into().expect("action head width")).collect();
    PolicyOutput {
        instructions,
        scores: tape.value(out.scores).data().to_vec(),
        hidden: HiddenState(tape.value(out.hidden).data().to_vec()),
    }
}

/// The network with a fixed parameter snapshot.
#[derive(Clone, Debug)]
pub struct TTrans {
    pub dims: NetDims,
    pub params: ParamStore,
}

impl TTrans {
    pub fn new(dims: NetDims, params: ParamStore) -> Result<Self> {
        let net = TTrans { dims, params };
        let expected = init_params(dims, &mut crate::rng::substream(0, crate::rng::INIT, 0));
        expected.check_compatible(&net.params.with_prefix(PREFIX))?;
        Ok(net)
    }

    pub fn random(dims: NetDims, rng: &mut impl Rng) -> Self {
        TTrans { dims, params: init_params(dims, rng) }
    }
}

impl InstructionPolicy for TTrans {
    fn n_agents(&self) -> usize {
        self.dims.n_agents
    }

    fn hidden_dim(&self) -> usize {
        self.dims.d_gru
    }

    fn forward(&self, obs: &Observation, hidden: &HiddenState) -> Result<PolicyOutput> {
        if obs.slots.len() != self.dims.n_entities {
            return Err(Error::shape(
                "ttrans.forward",
                format!("{} observation slots, expected {}", obs.slots.len(), self.dims.n_entities),
            ));
        }
        let mut tape = Tape::new();
        let vars = TTransVars::bind(&mut tape, &self.params, self.dims, false)?;
        let o = tape.constant(obs.to_input());
        let h = tape.constant(Tensor::row(hidden.0.clone()));
        let out = forward_on_tape(&mut tape, &vars, self.dims, o, h)?;
        Ok(read_output(&tape, &out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{observe, EnvConfig};
    use crate::rng;

    fn dims() -> NetDims {
        NetDims::new(4, 2, 8, 6)
    }

    fn sample_obs() -> Observation {
        let s = crate::env::reset(&EnvConfig::default(), &mut rng::substream(5, rng::ENV, 0)).unwrap();
        observe(&s, 0)
    }

    #[test]
    fn zero_params_halve_hidden_and_emit_zeros() {
        let net = TTrans::random(dims(), &mut rng::substream(1, rng::INIT, 0));
        let zero = TTrans { dims: dims(), params: net.params.zeros_like() };
        let h = HiddenState(vec![0.4, -0.2, 1.0, 0.0, -1.0, 0.3]);
        let out = zero.forward(&sample_obs(), &h).unwrap();
        assert!(out.instructions.iter().flatten().all(|&q| q == 0.0));
        assert!(out.scores.iter().all(|&g| g == 0.0));
        for (a, b) in out.hidden.0.iter().zip(&h.0) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
        assert_eq!(zero.self_q(0, &sample_obs(), &h).unwrap(), [0.0; N_ACTIONS]);
    }

    #[test]
    fn forward_is_deterministic() {
        let net = TTrans::random(dims(), &mut rng::substream(2, rng::INIT, 0));
        let h = HiddenState(vec![0.1; 6]);
        assert_eq!(net.forward(&sample_obs(), &h).unwrap(), net.forward(&sample_obs(), &h).unwrap());
    }

    #[test]
    fn self_q_is_the_own_row() {
        let net = TTrans::random(dims(), &mut rng::substream(3, rng::INIT, 0));
        let h = HiddenState::zeros(6);
        let obs = sample_obs();
        let out = net.forward(&obs, &h).unwrap();
        for i in 0..4 {
            assert_eq!(net.self_q(i, &obs, &h).unwrap(), out.instructions[i]);
        }
    }

    #[test]
    fn output_shapes() {
        let net = TTrans::random(dims(), &mut rng::substream(4, rng::INIT, 0));
        let out = net.forward(&sample_obs(), &HiddenState::zeros(6)).unwrap();
        assert_eq!(out.instructions.len(), 4);
        assert_eq!(out.scores.len(), 4);
        assert_eq!(out.hidden.0.len(), 6);
    }

    #[test]
    fn wrong_slot_count_is_a_shape_error() {
        let net = TTrans::random(dims(), &mut rng::substream(4, rng::INIT, 0));
        let mut obs = sample_obs();
        obs.slots.pop();
        assert!(matches!(net.forward(&obs, &HiddenState::zeros(6)), Err(Error::Shape { .. })));
    }

    #[test]
    fn uniform_attention_averages_values() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(vec![2, 3]));
        let k =
            tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 0.0], vec![5.0, 5.0, 5.0]]).unwrap());
        let v = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 3.0], vec![6.0, 3.0]]).unwrap());
        let z = attention(&mut tape, q, k, v).unwrap();
        for row in tape.value(z).data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12 && (row[1] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[vec![3.0, -1.0], vec![0.2, 9.0]]).unwrap());
        let k = tape.constant(Tensor::row(vec![0.5, 0.5]));
        let v = tape.constant(Tensor::row(vec![7.0, -2.0]));
        let z = attention(&mut tape, q, k, v).unwrap();
        assert_eq!(tape.value(z).data(), &[7.0, -2.0, 7.0, -2.0]);
    }

    #[test]
    fn two_by_two_attention_matches_hand_computation() {
        // Oracle: weights = softmax([1/sqrt(2), 0]) computed by hand.
        let a = (1.0 / 2f64.sqrt()).exp();
        let w0 = a / (a + 1.0);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::row(vec![1.0, 0.0]));
        let kv = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let k = tape.constant(kv.clone());
        let v = tape.constant(kv);
        let z = attention(&mut tape, q, k, v).unwrap();
        let z = tape.value(z).data();
        assert!((z[0] - w0).abs() < 1e-12);
        assert!((z[1] - (1.0 - w0)).abs() < 1e-12);
    }

    #[test]
    fn attention_rejects_mismatched_shapes() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(vec![2, 3]));
        let k = tape.constant(Tensor::zeros(vec![4, 2]));
        let v = tape.constant(Tensor::zeros(vec![4, 2]));
        assert!(attention(&mut tape, q, k, v).is_err());
    }
}
