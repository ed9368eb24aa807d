use lctt_core::diff::gradcheck::{relative_error, FD_STEP};
use lctt_core::diff::{ParamStore, Tape, Tensor};
use lctt_core::env::{self, observe, EnvConfig, Observation, Pos};
use lctt_core::net::{
    attention, forward_on_tape, init_params, HiddenState, InstructionPolicy, NetDims, TTrans, TTransVars,
};
use lctt_core::rng;
use proptest::prelude::*;
use rand::Rng;

fn small_dims() -> NetDims {
    NetDims::new(3, 2, 4, 3)
}

fn random_obs(dims: NetDims, r: &mut impl Rng) -> Observation {
    let cfg = EnvConfig { n_agents: dims.n_agents, n_foods: dims.n_entities - dims.n_agents, ..EnvConfig::default() };
    let s = env::reset(&cfg, r).unwrap();
    observe(&s, r.random_range(0..dims.n_agents))
}

fn random_row(n: usize, scale: f64, r: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-scale..scale)).collect()
}

/// Random linear functional of every forward output.
struct Readout {
    instr: Vec<f64>,
    scores: Vec<f64>,
    hidden: Vec<f64>,
}

impl Readout {
    fn random(dims: NetDims, r: &mut impl Rng) -> Self {
        Readout {
            instr: random_row(dims.n_agents * 6, 1.0, r),
            scores: random_row(dims.n_agents, 1.0, r),
            hidden: random_row(dims.d_gru, 1.0, r),
        }
    }

    /// Independent evaluation through the value-only policy interface.
    fn value(&self, net: &TTrans, obs: &Observation, h: &HiddenState) -> f64 {
        let out = net.forward(obs, h).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let flat: Vec<f64> = out.instructions.iter().flatten().copied().collect();
        dot(&flat, &self.instr) + dot(&out.scores, &self.scores) + dot(&out.hidden.0, &self.hidden)
    }
}

fn analytic_gradients(
    params: &ParamStore,
    dims: NetDims,
    obs: &Observation,
    h: &HiddenState,
    ro: &Readout,
) -> ParamStore {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let vars = TTransVars::from_bound(&mut tape, &bound, dims).unwrap();
    let o = tape.constant(obs.to_input());
    let hv = tape.constant(Tensor::row(h.0.clone()));
    let out = forward_on_tape(&mut tape, &vars, dims, o, hv).unwrap();
    let mut terms = Vec::new();
    for (var, w, shape) in [
        (out.instructions, &ro.instr, vec![dims.n_agents, 6]),
        (out.scores, &ro.scores, vec![1, dims.n_agents]),
        (out.hidden, &ro.hidden, vec![1, dims.d_gru]),
    ] {
        let c = tape.constant(Tensor::new(shape, w.clone()).unwrap());
        let m = tape.mul(var, c).unwrap();
        terms.push(tape.sum(m).unwrap());
    }
    let a = tape.add(terms[0], terms[1]).unwrap();
    let loss = tape.add(a, terms[2]).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut out = ParamStore::new();
    for (name, var) in bound.iter() {
        out.insert(
            name.clone(),
            grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(params.get(name).unwrap().shape().to_vec())),
        );
    }
    out
}

#[test]
fn full_forward_gradients_match_finite_differences() {
    let dims = small_dims();
    let mut r = rng::substream(21, rng::INIT, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let params = init_params(dims, &mut r);
        let obs = random_obs(dims, &mut r);
        let h = HiddenState(random_row(dims.d_gru, 0.9, &mut r));
        let ro = Readout::random(dims, &mut r);
        let grads = analytic_gradients(&params, dims, &obs, &h, &ro);
        let mut net = TTrans::new(dims, params.clone()).unwrap();
        for (name, g) in grads.iter() {
            for i in 0..g.numel() {
                let orig = params.get(name).unwrap().data()[i];
                net.params.get_mut(name).unwrap().data_mut()[i] = orig + FD_STEP;
                let plus = ro.value(&net, &obs, &h);
                net.params.get_mut(name).unwrap().data_mut()[i] = orig - FD_STEP;
                let minus = ro.value(&net, &obs, &h);
                net.params.get_mut(name).unwrap().data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                worst = worst.max(relative_error(g.data()[i], numeric));
            }
        }
    }
    assert!(worst <= 1e-4, "max relative error {worst}");
}

#[test]
fn every_parameter_receives_gradient() {
    let dims = small_dims();
    let mut r = rng::substream(22, rng::INIT, 0);
    let params = init_params(dims, &mut r);
    let obs = random_obs(dims, &mut r);
    let h = HiddenState(random_row(dims.d_gru, 0.9, &mut r));
    let grads = analytic_gradients(&params, dims, &obs, &h, &Readout::random(dims, &mut r));
    assert_eq!(grads.len(), params.len());
    for (name, g) in grads.iter() {
        assert!(g.data().iter().any(|&v| v != 0.0), "{name} has an all-zero gradient");
    }
}

#[test]
fn identical_food_slots_can_be_swapped() {
    let dims = small_dims();
    let mut r = rng::substream(23, rng::INIT, 0);
    let net = TTrans::random(dims, &mut r);
    let h = HiddenState(random_row(dims.d_gru, 0.5, &mut r));
    let mut obs = random_obs(dims, &mut r);
    let (f0, f1) = (dims.n_agents, dims.n_agents + 1);
    obs.slots[f0] = [1.0, 0.2, -0.4, 0.6, 0.0, 1.0, 0.0];
    obs.slots[f1] = obs.slots[f0];
    let mut swapped = obs.clone();
    swapped.slots.swap(f0, f1);
    assert_eq!(net.forward(&obs, &h).unwrap(), net.forward(&swapped, &h).unwrap());

    // distinct food features: the slot order reaches the GRU input
    obs.slots[f1] = [1.0, -0.2, 0.4, 0.2, 0.0, 1.0, 0.0];
    let mut swapped = obs.clone();
    swapped.slots.swap(f0, f1);
    assert_ne!(net.forward(&obs, &h).unwrap().hidden, net.forward(&swapped, &h).unwrap().hidden);
}

#[test]
fn entities_outside_the_window_do_not_matter() {
    let dims = NetDims::new(4, 2, 6, 5);
    let net = TTrans::random(dims, &mut rng::substream(24, rng::INIT, 0));
    let h = HiddenState(vec![0.3, -0.1, 0.0, 0.5, -0.7]);
    let mut r = rng::substream(24, rng::ENV, 0);
    let mut moved = 0;
    for _ in 0..300 {
        let s = env::reset(&EnvConfig::default(), &mut r).unwrap();
        let obs = observe(&s, 0);
        let Some(e) = (0..s.n_entities()).find(|&e| !obs.is_visible(e)) else { continue };
        // relocate the hidden entity to another unseen free cell
        let occupied: Vec<Pos> = s.agents.iter().map(|a| a.pos).chain(s.foods.iter().map(|f| f.pos)).collect();
        let me = s.agents[0].pos;
        let half = s.config.sight_range / 2;
        let target = (0..s.config.grid_w * s.config.grid_h)
            .map(|c| Pos::new(c % s.config.grid_w, c / s.config.grid_w))
            .find(|p| !occupied.contains(p) && (p.x.abs_diff(me.x) > half || p.y.abs_diff(me.y) > half));
        let Some(target) = target else { continue };
        let mut s2 = s.clone();
        if e < s.n_agents() {
            s2.agents[e].pos = target;
        } else {
            s2.foods[e - s.n_agents()].pos = target;
        }
        let obs2 = observe(&s2, 0);
        assert_eq!(obs, obs2);
        assert_eq!(net.forward(&obs, &h).unwrap(), net.forward(&obs2, &h).unwrap());

        // junk written into an unseen slot never reaches the network
        let mut junk = obs.clone();
        junk.slots[e] = [0.0, 3.0, -2.0, 5.0, 1.0, 1.0, 1.0];
        assert_eq!(net.forward(&obs, &h).unwrap(), net.forward(&junk, &h).unwrap());
        moved += 1;
    }
    assert!(moved > 50);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn hidden_state_stays_bounded(seed in any::<u64>(), scale in 0.1..3.0f64, param_scale in 0.1..10.0f64) {
        let dims = NetDims::new(4, 2, 6, 5);
        let mut r = rng::substream(seed, rng::INIT, 0);
        let mut net = TTrans::random(dims, &mut r);
        for (_, t) in net.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= param_scale);
        }
        let obs = random_obs(dims, &mut r);
        let h = HiddenState(random_row(dims.d_gru, scale, &mut r));
        let bound = h.0.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let out = net.forward(&obs, &h).unwrap();
        for v in &out.hidden.0 {
            prop_assert!(v.abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn attention_weights_are_row_distributions(seed in any::<u64>(), n in 1usize..6, m in 1usize..9, d in 1usize..8) {
        let mut r = rng::substream(seed, rng::INIT, 1);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(vec![n, d], random_row(n * d, 5.0, &mut r)).unwrap());
        let k = tape.constant(Tensor::new(vec![m, d], random_row(m * d, 5.0, &mut r)).unwrap());
        // identity values expose the weights themselves
        let mut eye = vec![0.0; m * m];
        for i in 0..m {
            eye[i * m + i] = 1.0;
        }
        let v = tape.constant(Tensor::new(vec![m, m], eye).unwrap());
        let z = attention(&mut tape, q, k, v).unwrap();
        let z = tape.value(z);
        for row in 0..n {
            let s: f64 = z.row_slice(row).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(z.row_slice(row).iter().all(|&w| w >= 0.0));
        }
    }
}
