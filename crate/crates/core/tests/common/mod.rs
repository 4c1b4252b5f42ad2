//! Randomized gradient-check instances shared by the gradcheck tests and the
//! acceptance suite.

#![allow(dead_code)]

use condyn::consistency::{closed_loop_rollout, EncoderMode, RolloutMode};
use condyn::dynmodel::{ActionBatch, DynamicsModel, Normalizer, Policy, TransitionBatch};
use condyn::envs::{reset, ActionKind, EnvSpec};
use condyn::ssm::{sequence_elbo, Recurrent, SsmDims, StateSpaceModel};
use condyn::trainers::{a2c_loss, action_batch, obs_consistency, A2cBatch, ObsAgent};
use diffcore::check::{check_entries, GradCheck};
use diffcore::rng::{stream, StreamRng};
use diffcore::{Graph, ParameterSet, Tensor};
use rand::seq::index::sample;
use rand::Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Entries differenced per parameter tensor; smaller tensors are swept fully.
pub const PER_TENSOR: usize = 12;

pub const LOSSES: [&str; 5] = ["dynamics_nll", "a2c", "consistency", "elbo", "imitation"];

fn envs() -> [EnvSpec; 3] {
    [EnvSpec::point_mass(), EnvSpec::pendulum(), EnvSpec::grid_nav()]
}

fn rows(rng: &mut StreamRng, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-scale..scale)).collect()).collect()
}

fn entries(ps: &ParameterSet, rng: &mut StreamRng, keep: impl Fn(&str) -> bool) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for name in ps.names().filter(|n| keep(n)) {
        let len = ps.get(name).unwrap().numel();
        if len <= PER_TENSOR {
            out.extend((0..len).map(|i| (name.to_string(), i)));
        } else {
            out.extend(sample(rng, len, PER_TENSOR).into_iter().map(|i| (name.to_string(), i)));
        }
    }
    out
}

fn random_normalizer(rng: &mut StreamRng, sd: usize, ad: usize) -> Normalizer {
    let mut batch = TransitionBatch::default();
    for _ in 0..rng.random_range(2..10) {
        let s = rows(rng, 1, sd, 2.0).remove(0);
        let a = rows(rng, 1, ad, 1.0).remove(0);
        let next: Vec<f64> = s.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
        batch.push(s, a, next);
    }
    let mut norm = Normalizer::new(sd, ad);
    norm.update(&batch).unwrap();
    norm
}

pub fn dynamics_nll(i: u64) -> GradCheck {
    let mut rng = stream(i, "gradcheck.dynamics", 0);
    let spec = envs()[i as usize % 3];
    let (sd, ad) = (spec.state_dim, spec.action_dim());
    let model = DynamicsModel::new(sd, ad);
    let mut ps = ParameterSet::new();
    model.init(&mut ps, &mut rng);
    let norm = random_normalizer(&mut rng, sd, ad);
    let mut batch = TransitionBatch::default();
    for _ in 0..rng.random_range(1..6) {
        let s = rows(&mut rng, 1, sd, 2.0).remove(0);
        let a = rows(&mut rng, 1, ad, 1.0).remove(0);
        let next = rows(&mut rng, 1, sd, 2.0).remove(0);
        batch.push(s, a, next);
    }
    let picks = entries(&ps, &mut rng, |_| true);
    check_entries(&ps, H, &picks, |g, p| Ok(condyn::dynmodel::dynamics_nll(g, &model, &norm, p, &batch).unwrap()))
        .unwrap()
}

pub fn a2c(i: u64) -> GradCheck {
    let mut rng = stream(i, "gradcheck.a2c", 0);
    let spec = envs()[i as usize % 3];
    let policy = Policy::for_env(&spec, spec.state_dim);
    let mut ps = ParameterSet::new();
    policy.init(&mut ps, &mut rng);
    let rollouts: Vec<_> = (0..rng.random_range(1..3))
        .map(|_| {
            let start = reset(&spec, &mut rng);
            let horizon = rng.random_range(1..5);
            closed_loop_rollout(&spec, &policy, &ps, start, horizon, RolloutMode::Sample, 0.99, &mut rng).unwrap()
        })
        .collect();
    let batch = A2cBatch::from_rollouts(&rollouts, 0.99);
    let states = Tensor::from_rows(&batch.states).unwrap();
    let mut g0 = Graph::inference();
    let s0 = g0.constant(states.clone());
    let v0 = policy.value(&mut g0, &ps, s0).unwrap();
    let v0 = g0.value(v0).clone();
    let picks = entries(&ps, &mut rng, |_| true);
    // The loss holds the advantage constant, so the numeric side must too:
    // subtracting mean(log π · (V − V₀)) with the factor detached cancels the
    // value's path through the advantage and has zero gradient at the base point.
    check_entries(&ps, H, &picks, |g, p| {
        let loss = a2c_loss(g, &policy, p, &batch, 0.5, 0.01).unwrap().loss;
        let s = g.constant(states.clone());
        let dist = policy.dist(g, p, s).unwrap();
        let actions = action_batch(g, &batch.actions).unwrap();
        let logp = policy.log_prob(g, dist, &actions).unwrap();
        let v = policy.value(g, p, s).unwrap();
        let base = g.constant(v0.clone());
        let shift = g.sub(v, base)?;
        let shift = g.detach(shift);
        let w = g.mul(logp, shift)?;
        let w = g.mean(w);
        g.sub(loss, w)
    })
    .unwrap()
}

pub fn consistency(i: u64) -> GradCheck {
    let mut rng = stream(i, "gradcheck.consistency", 0);
    // Grid actions enter as constants, so the check stays on continuous envs.
    let spec = [EnvSpec::point_mass(), EnvSpec::pendulum()][i as usize % 2];
    let mut agent = ObsAgent::new(spec, EncoderMode::Trained, i);
    agent.norm = random_normalizer(&mut rng, spec.state_dim, spec.action_dim());
    let rollouts: Vec<_> = (0..rng.random_range(1..4))
        .map(|_| {
            let start = reset(&spec, &mut rng);
            let horizon = rng.random_range(1..7);
            closed_loop_rollout(&spec, &agent.policy, &agent.params, start, horizon, RolloutMode::Sample, 0.99, &mut rng)
                .unwrap()
        })
        .collect();
    let k = rng.random_range(1..6);
    let policy_actions = rng.random_bool(0.5);
    let picks = entries(&agent.params, &mut rng, |_| true);
    let base = agent.params.clone();
    check_entries(&base, H, &picks, |g, p| {
        let mut a = agent.clone();
        a.params = p.clone();
        Ok(obs_consistency(g, &a, &rollouts, k, policy_actions).unwrap().loss)
    })
    .unwrap()
}

pub fn elbo(i: u64) -> GradCheck {
    let mut rng = stream(i, "gradcheck.elbo", 0);
    let dims = SsmDims { frame: 8, channels: 2, action_dim: 2 };
    let model = StateSpaceModel::new(dims).unwrap();
    let mut ps = ParameterSet::new();
    model.init(&mut ps, &mut rng);
    // Move the decoder variance off its initial value so its gradient is exercised.
    ps.get_mut(condyn::ssm::DEC_LOG_VAR).unwrap().data_mut()[0] = rng.random_range(-1.0..1.0);
    let n = rng.random_range(1..3);
    let t = rng.random_range(1..4);
    let obs: Vec<Tensor> = (0..t)
        .map(|_| Tensor::from_rows(&rows(&mut rng, n, dims.obs_len(), 1.0).iter().map(|r| r.iter().map(|v| v.abs()).collect()).collect::<Vec<_>>()).unwrap())
        .collect();
    let actions: Vec<Tensor> = (0..t).map(|_| Tensor::from_rows(&rows(&mut rng, n, 2, 1.0)).unwrap()).collect();
    let noise_seed = rng.random::<u64>();
    let picks = entries(&ps, &mut rng, |_| true);
    check_entries(&ps, H, &picks, |g, p| {
        let o: Vec<_> = obs.iter().map(|x| g.constant(x.clone())).collect();
        let a: Vec<_> = actions.iter().map(|x| g.constant(x.clone())).collect();
        let start = Recurrent::zeros(g, n);
        let mut noise = stream(noise_seed, "gradcheck.elbo.noise", 0);
        Ok(sequence_elbo(g, &model, p, start, &o, &a, &mut noise).unwrap().loss)
    })
    .unwrap()
}

pub fn imitation(i: u64) -> GradCheck {
    let mut rng = stream(i, "gradcheck.imitation", 0);
    let spec = envs()[i as usize % 3];
    let sd = rng.random_range(2..6);
    let policy = Policy::for_env(&spec, sd);
    let mut ps = ParameterSet::new();
    policy.init(&mut ps, &mut rng);
    let n = rng.random_range(1..6);
    let states = Tensor::from_rows(&rows(&mut rng, n, sd, 2.0)).unwrap();
    let discrete: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let continuous = Tensor::from_rows(&rows(&mut rng, n, spec.action_dim(), 1.5)).unwrap();
    let picks = entries(&ps, &mut rng, |name| name.starts_with("policy."));
    check_entries(&ps, H, &picks, |g, p| {
        let s = g.constant(states.clone());
        let actions = match spec.action {
            ActionKind::Continuous(_) => ActionBatch::Continuous(g.constant(continuous.clone())),
            ActionKind::Discrete(_) => ActionBatch::Discrete(discrete.clone()),
        };
        Ok(condyn::trainers::imitation_loss(g, &policy, p, s, &actions).unwrap())
    })
    .unwrap()
}

pub fn run(loss: &str, i: u64) -> GradCheck {
    match loss {
        "dynamics_nll" => dynamics_nll(i),
        "a2c" => a2c(i),
        "consistency" => consistency(i),
        "elbo" => elbo(i),
        "imitation" => imitation(i),
        other => panic!("unknown loss {other}"),
    }
}
