//! Training loops for the observation-space agent (A2C + dynamics NLL +
//! consistency) and the state-space agent (imitation + ELBO + consistency).

use std::time::Instant;

use diffcore::rng::stream;
use diffcore::{Adam, Graph, ParameterSet, Tensor, Var};
use rand::Rng;

use crate::config::{Pathway, RunConfig};
use crate::consistency::{
    closed_loop_rollout, collapse_monitor, consistency_terms, EncoderMode, LearnedDynamics, Rollout,
    RolloutMode, SeqEncoder, TransitionModel, COLLAPSE_THRESHOLD, ENCODER_PREFIX,
};
use crate::dataset::SsmTrajectory;
use crate::dynmodel::{dynamics_nll, ActionBatch, DynamicsModel, Normalizer, Policy, TransitionBatch};
use crate::envs::{reset, Action, ActionKind, EnvSpec};
use crate::error::{Error, Result};
use crate::metrics::{MetricsSink, TrainMetrics};
use crate::ssm::{
    imagination_log_likelihood, open_loop_generate, sequence_elbo, LatentMode, Recurrent, SsmDims,
    StateSpaceModel, DEC_LOG_VAR, STATE_DIM,
};

/// Open-loop horizon of the logged imagination metric.
pub const EVAL_HORIZON: usize = 10;

/// A2C batch: every transition of the collected episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct A2cBatch {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    /// Discounted return-to-go `R_t` within each episode.
    pub returns: Vec<f64>,
}

impl A2cBatch {
    pub fn from_rollouts(rollouts: &[Rollout], gamma: f64) -> Self {
        let mut batch = A2cBatch { states: Vec::new(), actions: Vec::new(), returns: Vec::new() };
        for r in rollouts {
            let traj = &r.trajectory;
            let mut togo = vec![0.0; traj.len()];
            let mut acc = 0.0;
            for t in (0..traj.len()).rev() {
                acc = traj.rewards[t] + gamma * acc;
                togo[t] = acc;
            }
            batch.states.extend(traj.all_states().take(traj.len()).map(|s| s.values.clone()));
            batch.actions.extend(traj.actions.iter().cloned());
            batch.returns.extend(togo);
        }
        batch
    }
}

/// Components of the A2C surrogate; every field is a scalar.
pub struct A2cTerms {
    pub loss: Var,
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
}

/// Constant action batch for log-probabilities.
pub fn action_batch(g: &mut Graph, actions: &[Action]) -> Result<ActionBatch> {
    match actions.first() {
        Some(Action::Discrete(_)) => actions
            .iter()
            .map(|a| match a {
                Action::Discrete(i) => Ok(*i),
                _ => Err(Error::Config("mixed action kinds".into())),
            })
            .collect::<Result<_>>()
            .map(ActionBatch::Discrete),
        _ => {
            let rows: Vec<Vec<f64>> = actions
                .iter()
                .map(|a| match a {
                    Action::Continuous(v) => Ok(v.clone()),
                    _ => Err(Error::Config("mixed action kinds".into())),
                })
                .collect::<Result<_>>()?;
            Ok(ActionBatch::Continuous(g.constant(Tensor::from_rows(&rows)?)))
        }
    }
}

/// `−mean(log π(a|s)·Â) + c_v·mean((V − R)²) − c_e·mean(H)` with
/// `Â = R − V` held constant.
pub fn a2c_loss(
    g: &mut Graph,
    policy: &Policy,
    ps: &ParameterSet,
    batch: &A2cBatch,
    value_coef: f64,
    entropy_coef: f64,
) -> Result<A2cTerms> {
    let n = batch.states.len();
    let states = g.constant(Tensor::from_rows(&batch.states)?);
    let returns = g.constant(Tensor::new(vec![n, 1], batch.returns.clone())?);
    let dist = policy.dist(g, ps, states)?;
    let actions = action_batch(g, &batch.actions)?;
    let logp = policy.log_prob(g, dist, &actions)?;
    let value = policy.value(g, ps, states)?;
    let value_const = g.detach(value);
    let adv = g.sub(returns, value_const)?;
    let weighted = g.mul(logp, adv)?;
    let pg = g.mean(weighted);
    let pg = g.neg(pg);
    let err = g.sub(value, returns)?;
    let sq = g.square(err);
    let value_term = g.mean(sq);
    let h = policy.entropy(g, dist);
    let entropy = g.mean(h);
    let v = g.scale(value_term, value_coef);
    let e = g.scale(entropy, -entropy_coef);
    let loss = g.add(pg, v)?;
    let loss = g.add(loss, e)?;
    Ok(A2cTerms { loss, policy: pg, value: value_term, entropy })
}

/// Mean over steps of `−log π(a^E_t | s_t)`.
pub fn imitation_loss(g: &mut Graph, policy: &Policy, ps: &ParameterSet, states: Var, actions: &ActionBatch) -> Result<Var> {
    let dist = policy.dist(g, ps, states)?;
    let logp = policy.log_prob(g, dist, actions)?;
    let mean = g.mean(logp);
    Ok(g.neg(mean))
}

/// Successful run: final parameters (normalizer statistics included).
pub struct TrainResult {
    pub snapshot: ParameterSet,
    pub updates: usize,
}

/// Failed run, with the parameters from before the failing update when any
/// update had started.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub last_good: Option<ParameterSet>,
    pub update: usize,
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        Self { error, last_good: None, update: 0 }
    }
}

fn learning_rate(config: &RunConfig, name: &str) -> Option<f64> {
    if name.starts_with(&format!("{ENCODER_PREFIX}.")) {
        (config.encoder_mode == EncoderMode::Trained).then_some(config.lr_encoder)
    } else if name.starts_with("policy.") || name.starts_with("value.") {
        Some(config.lr_policy)
    } else {
        Some(config.lr_model)
    }
}

fn optimize(config: &RunConfig, g: &Graph, loss: Var, ps: &mut ParameterSet, adam: &mut Adam) -> Result<()> {
    let mut grads = g.backward(loss, ps)?;
    if config.max_grad_norm > 0.0 {
        grads.clip_global_norm(config.max_grad_norm);
    }
    adam.step(ps, &grads, |name| learning_rate(config, name))?;
    Ok(())
}

fn warn_on_collapse(update: usize, monitor: f64) {
    if monitor < COLLAPSE_THRESHOLD {
        log::warn!("update {update}: sequence encoder output spread {monitor:e} suggests collapse");
    }
}

fn check_finite(update: usize, row: &TrainMetrics) -> Result<()> {
    if row.values().iter().flatten().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { step: update, detail: "non-finite metric".into() })
    }
}

/// Observation-space agent: policy, value head, dynamics model, sequence
/// encoder and input normalizer.
#[derive(Clone)]
pub struct ObsAgent {
    pub spec: EnvSpec,
    pub policy: Policy,
    pub model: DynamicsModel,
    pub encoder: SeqEncoder,
    pub norm: Normalizer,
    pub params: ParameterSet,
}

impl ObsAgent {
    pub fn new(spec: EnvSpec, encoder_mode: EncoderMode, seed: u64) -> Self {
        let policy = Policy::for_env(&spec, spec.state_dim);
        let model = DynamicsModel::new(spec.state_dim, spec.action_dim());
        let encoder = SeqEncoder::new(spec.state_dim, encoder_mode);
        let mut params = ParameterSet::new();
        policy.init(&mut params, &mut stream(seed, "init.policy", 0));
        model.init(&mut params, &mut stream(seed, "init.dynamics", 0));
        encoder.init(&mut params, &mut stream(seed, "init.encoder", 0));
        let norm = Normalizer::new(spec.state_dim, spec.action_dim());
        Self { spec, policy, model, encoder, norm, params }
    }

    pub fn snapshot(&self) -> ParameterSet {
        let mut ps = self.params.clone();
        self.norm.store(&mut ps);
        ps
    }

    pub fn collect(&self, config: &RunConfig, update: usize) -> Result<Vec<Rollout>> {
        (0..config.batch_size)
            .map(|e| {
                let mut rng = stream(config.seed, "episode", (update * config.batch_size + e) as u64);
                let start = reset(&self.spec, &mut rng);
                closed_loop_rollout(
                    &self.spec,
                    &self.policy,
                    &self.params,
                    start,
                    config.horizon,
                    RolloutMode::Sample,
                    config.gamma,
                    &mut rng,
                )
            })
            .collect()
    }
}

/// Consistency term over rollout pairs built from the first `k` steps of
/// each episode, grouped by effective length.
pub struct ObsConsistency {
    pub loss: Var,
    pub real_encodings: Tensor,
}

pub fn obs_consistency(
    g: &mut Graph,
    agent: &ObsAgent,
    rollouts: &[Rollout],
    k: usize,
    policy_actions: bool,
) -> Result<ObsConsistency> {
    let ps = &agent.params;
    let dynamics = LearnedDynamics { model: &agent.model, norm: &agent.norm };
    let mut lengths: Vec<usize> = rollouts.iter().map(|r| k.min(r.trajectory.len())).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let (mut rows, mut encodings) = (Vec::new(), Vec::new());
    for len in lengths {
        let group: Vec<&Rollout> = rollouts.iter().filter(|r| k.min(r.trajectory.len()) == len).collect();
        let state_rows = |t: usize| -> Vec<Vec<f64>> {
            group.iter().map(|r| r.trajectory.all_states().nth(t).expect("t <= len").values.clone()).collect()
        };
        let s0 = g.constant(Tensor::from_rows(&state_rows(0))?);
        let mut imagined = Vec::with_capacity(len);
        let mut real = Vec::with_capacity(len);
        let mut s = s0;
        for t in 0..len {
            let a = match agent.spec.action {
                ActionKind::Continuous(_) => {
                    let source = if policy_actions { s } else { g.constant(Tensor::from_rows(&state_rows(t))?) };
                    let eps: Vec<Vec<f64>> = group
                        .iter()
                        .map(|r| r.eps[t].clone().ok_or_else(|| Error::Config("rollout lacks action noise".into())))
                        .collect::<Result<_>>()?;
                    let dist = agent.policy.dist(g, ps, source)?;
                    let raw = agent.policy.reparam(g, dist, Tensor::from_rows(&eps)?)?;
                    g.clamp(raw, -1.0, 1.0)
                }
                ActionKind::Discrete(_) => {
                    let rows: Vec<Vec<f64>> =
                        group.iter().map(|r| r.trajectory.actions[t].features(&agent.spec)).collect();
                    g.constant(Tensor::from_rows(&rows)?)
                }
            };
            s = dynamics.step(g, ps, s, a, t)?;
            if !g.value(s).is_finite() {
                return Err(Error::Divergence { step: t + 1, detail: "non-finite imagined state".into() });
            }
            imagined.push(s);
            real.push(g.constant(Tensor::from_rows(&state_rows(t + 1))?));
        }
        let terms = consistency_terms(g, &agent.encoder, ps, &real, &imagined)?;
        rows.push(terms.rows);
        encodings.push(terms.real_encoding);
    }
    let rows = g.concat_rows(&rows)?;
    let loss = g.mean(rows);
    let enc = g.concat_rows(&encodings)?;
    Ok(ObsConsistency { loss, real_encodings: g.value(enc).clone() })
}

fn transitions(spec: &EnvSpec, rollouts: &[Rollout]) -> TransitionBatch {
    let mut batch = TransitionBatch::default();
    for r in rollouts {
        let t = &r.trajectory;
        for ((s, a), next) in t.all_states().zip(&t.actions).zip(&t.states) {
            batch.push(s.values.clone(), a.features(spec), next.values.clone());
        }
    }
    batch
}

pub fn train_obs_space(config: &RunConfig, sink: &mut dyn MetricsSink) -> Result<TrainResult, TrainFailure> {
    if config.pathway != Pathway::Obs {
        return Err(Error::Config("train_obs_space needs pathway = obs".into()).into());
    }
    let mut agent = ObsAgent::new(config.spec(), config.encoder_mode, config.seed);
    let mut adam = Adam::new();
    let started = Instant::now();
    for update in 0..config.updates {
        let before = agent.snapshot();
        let fail = |error| TrainFailure { error, last_good: Some(before.clone()), update };
        let row = obs_update(config, &mut agent, &mut adam, update).map_err(fail)?;
        let row = TrainMetrics { wallclock_s: config.record_wallclock.then(|| started.elapsed().as_secs_f64()), ..row };
        sink.record(&row).map_err(fail)?;
        if update % 100 == 0 {
            log::info!("update {update}: return {:.3}", row.avg_return.unwrap_or(f64::NAN));
        }
    }
    Ok(TrainResult { snapshot: agent.snapshot(), updates: config.updates })
}

fn obs_update(config: &RunConfig, agent: &mut ObsAgent, adam: &mut Adam, update: usize) -> Result<TrainMetrics> {
    let rollouts = agent.collect(config, update)?;
    agent.norm.update(&transitions(&agent.spec, &rollouts))?;
    let batch = A2cBatch::from_rollouts(&rollouts, config.gamma);

    let mut g = Graph::new();
    let a2c = a2c_loss(&mut g, &agent.policy, &agent.params, &batch, config.value_coef, config.entropy_coef)?;
    let model_nll = dynamics_nll(&mut g, &agent.model, &agent.norm, &agent.params, &transitions(&agent.spec, &rollouts))?;
    let base = g.add(a2c.loss, model_nll)?;
    let (loss, cc) = if config.baseline {
        let mut side = Graph::inference();
        let cc = obs_consistency(&mut side, agent, &rollouts, config.k, config.open_loop_policy_actions)?;
        (base, (side.value(cc.loss).item(), cc.real_encodings))
    } else {
        let cc = obs_consistency(&mut g, agent, &rollouts, config.k, config.open_loop_policy_actions)?;
        let value = g.value(cc.loss).item();
        let weighted = g.scale(cc.loss, config.alpha);
        (g.add(base, weighted)?, (value, cc.real_encodings))
    };
    let monitor = collapse_monitor(&cc.1);
    warn_on_collapse(update, monitor);
    let row = TrainMetrics {
        update,
        avg_return: Some(rollouts.iter().map(|r| r.trajectory.episode_return()).sum::<f64>() / rollouts.len() as f64),
        avg_discounted_return: Some(
            rollouts.iter().map(|r| r.trajectory.discounted_return()).sum::<f64>() / rollouts.len() as f64,
        ),
        rl_loss: Some(g.value(a2c.loss).item()),
        model_nll: Some(g.value(model_nll).item()),
        consistency_loss: Some(cc.0),
        collapse_monitor: Some(monitor),
        ..Default::default()
    };
    check_finite(update, &row)?;
    optimize(config, &g, loss, &mut agent.params, adam)?;
    Ok(row)
}

/// State-space agent: latent model, imitation policy on filtered states and
/// sequence encoder.
pub struct SsmAgent {
    pub model: StateSpaceModel,
    pub policy: Policy,
    pub encoder: SeqEncoder,
    pub params: ParameterSet,
}

impl SsmAgent {
    pub fn new(dims: SsmDims, encoder_mode: EncoderMode, seed: u64) -> Result<Self> {
        let model = StateSpaceModel::new(dims)?;
        let policy = Policy::new(STATE_DIM, ActionKind::Continuous(dims.action_dim));
        let encoder = SeqEncoder::new(STATE_DIM, encoder_mode);
        let mut params = ParameterSet::new();
        model.init(&mut params, &mut stream(seed, "init.ssm", 0));
        policy.init(&mut params, &mut stream(seed, "init.policy", 0));
        encoder.init(&mut params, &mut stream(seed, "init.encoder", 0));
        Ok(Self { model, policy, encoder, params })
    }
}

/// Segment of `len` steps: observations `o_off ..= o_{off+len}`.
fn sample_segments(data: &[SsmTrajectory], len: usize, count: usize, seed: u64, update: usize) -> Result<Vec<(usize, usize)>> {
    let eligible: Vec<usize> = (0..data.len()).filter(|&i| data[i].steps() >= len).collect();
    if eligible.is_empty() {
        return Err(Error::Dataset(format!("no trajectory has {len} steps")));
    }
    let mut rng = stream(seed, "segments", update as u64);
    Ok((0..count)
        .map(|_| {
            let i = eligible[rng.random_range(0..eligible.len())];
            (i, rng.random_range(0..=data[i].steps() - len))
        })
        .collect())
}

pub fn train_state_space(
    config: &RunConfig,
    train: &[SsmTrajectory],
    heldout: &[SsmTrajectory],
    sink: &mut dyn MetricsSink,
) -> Result<TrainResult, TrainFailure> {
    let spec = config.spec();
    if config.pathway != Pathway::Ssm {
        return Err(Error::Config("train_state_space needs pathway = ssm".into()).into());
    }
    if !spec.is_continuous() {
        return Err(Error::Unsupported { env: spec.name, what: "the state-space pathway" }.into());
    }
    let dims = SsmDims { frame: crate::envs::FRAME, channels: crate::envs::STACK, action_dim: spec.action_dim() };
    let mut agent = SsmAgent::new(dims, config.encoder_mode, config.seed)?;
    // Start the shared decoder variance at the data's pixel variance; from 0 it
    // would take thousands of steps to reach the scale of the images.
    let log_var = pixel_variance(train)?.ln().clamp(diffcore::LOG_VAR_MIN, diffcore::LOG_VAR_MAX);
    agent.params.get_mut(DEC_LOG_VAR).map_err(Error::from)?.data_mut()[0] = log_var;
    let mut adam = Adam::new();
    let started = Instant::now();
    for update in 0..config.updates {
        let before = agent.params.clone();
        let fail = |error| TrainFailure { error, last_good: Some(before.clone()), update };
        let mut row = ssm_update(config, &mut agent, &mut adam, train, update).map_err(fail)?;
        if (update + 1) % config.eval_every == 0 || update + 1 == config.updates {
            let ll = imagination_log_likelihood(&agent.model, &agent.params, heldout, EVAL_HORIZON, config.seed)
                .map_err(fail)?;
            row.imagination_ll = Some(ll);
        }
        row.wallclock_s = config.record_wallclock.then(|| started.elapsed().as_secs_f64());
        check_finite(update, &row).map_err(fail)?;
        sink.record(&row).map_err(fail)?;
        if update % 50 == 0 {
            log::info!("update {update}: elbo {:.3}", row.elbo.unwrap_or(f64::NAN));
        }
    }
    Ok(TrainResult { snapshot: agent.params, updates: config.updates })
}

fn ssm_update(
    config: &RunConfig,
    agent: &mut SsmAgent,
    adam: &mut Adam,
    data: &[SsmTrajectory],
    update: usize,
) -> Result<TrainMetrics> {
    let len = config.horizon;
    let segments = sample_segments(data, len, config.batch_size, config.seed, update)?;
    let n = segments.len();
    let a_dim = agent.model.dims().action_dim;
    let ps = &agent.params;
    let mut g = Graph::new();
    let obs: Vec<Var> = (0..=len)
        .map(|t| {
            let rows: Vec<Vec<f64>> = segments.iter().map(|&(i, off)| data[i].observations[off + t].clone()).collect();
            Ok(g.constant(Tensor::from_rows(&rows)?))
        })
        .collect::<Result<_>>()?;
    let action_rows = |t: usize| -> Vec<Vec<f64>> {
        segments.iter().map(|&(i, off)| data[i].actions[off + t].clone()).collect()
    };
    let actions: Vec<Var> =
        (0..len).map(|t| Ok(g.constant(Tensor::from_rows(&action_rows(t))?))).collect::<Result<_>>()?;
    let mut preceding = vec![g.constant(Tensor::zeros(&[n, a_dim]))];
    preceding.extend(&actions);

    let start = Recurrent::zeros(&mut g, n);
    let mut elbo_rng = stream(config.seed, "elbo", update as u64);
    let filtered = sequence_elbo(&mut g, &agent.model, ps, start, &obs, &preceding, &mut elbo_rng)?;

    let k = config.k.min(len);
    let mut imagine_rng = stream(config.seed, "imagine", update as u64);
    let imagined = open_loop_generate(
        &mut g,
        &agent.model,
        ps,
        filtered.states[0],
        &actions[..k],
        LatentMode::Sample,
        &mut imagine_rng,
    )?;
    let real: Vec<Var> = filtered.states[1..=k].iter().map(|r| r.s).collect();
    let fake: Vec<Var> = imagined.states.iter().map(|r| r.s).collect();
    let terms = consistency_terms(&mut g, &agent.encoder, ps, &real, &fake)?;
    let l_cc = g.mean(terms.rows);

    let policy_states: Vec<Var> = filtered.states[..len].iter().map(|r| r.s).collect();
    let policy_states = g.concat_rows(&policy_states)?;
    let expert: Vec<Vec<f64>> = (0..len).flat_map(action_rows).collect();
    let expert = ActionBatch::Continuous(g.constant(Tensor::from_rows(&expert)?));
    let imitation = imitation_loss(&mut g, &agent.policy, ps, policy_states, &expert)?;

    let base = g.add(imitation, filtered.loss)?;
    let loss = if config.baseline {
        base
    } else {
        let weighted = g.scale(l_cc, config.alpha);
        g.add(base, weighted)?
    };
    let monitor = collapse_monitor(g.value(terms.real_encoding));
    warn_on_collapse(update, monitor);
    let row = TrainMetrics {
        update,
        consistency_loss: Some(g.value(l_cc).item()),
        elbo: Some(g.value(filtered.loss).item()),
        imitation_loss: Some(g.value(imitation).item()),
        collapse_monitor: Some(monitor),
        ..Default::default()
    };
    check_finite(update, &row)?;
    optimize(config, &g, loss, &mut agent.params, adam)?;
    Ok(row)
}

/// Per-frame Gaussian NLL of the per-pixel training-set mean image under the
/// maximum-likelihood shared variance.
/// Variance of every pixel around the per-pixel mean image, pooled.
pub fn pixel_variance(data: &[SsmTrajectory]) -> Result<f64> {
    let frames: Vec<&Vec<f64>> = data.iter().flat_map(|t| &t.observations).collect();
    let Some(first) = frames.first() else {
        return Err(Error::Dataset("empty dataset".into()));
    };
    let d = first.len();
    let mut mean = vec![0.0; d];
    for f in &frames {
        for (m, v) in mean.iter_mut().zip(f.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= frames.len() as f64);
    let sq: f64 = frames.iter().map(|f| f.iter().zip(&mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>()).sum();
    Ok(sq / (frames.len() * d) as f64)
}

pub fn mean_image_nll(data: &[SsmTrajectory]) -> Result<f64> {
    let var = pixel_variance(data)?;
    let d = data[0].observations[0].len();
    Ok(0.5 * d as f64 * (var.ln() + 1.0 + diffcore::gaussian::ln_2pi()))
}

/// Mean undiscounted return of a uniformly random policy over `episodes`
/// fresh episodes.
pub fn random_policy_return(spec: &EnvSpec, episodes: usize, horizon: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for e in 0..episodes {
        let mut rng = stream(seed, "random-policy", e as u64);
        let mut state = reset(spec, &mut rng);
        for _ in 0..horizon {
            let action = match spec.action {
                ActionKind::Continuous(d) => Action::Continuous((0..d).map(|_| rng.random_range(-1.0..=1.0)).collect()),
                ActionKind::Discrete(n) => Action::Discrete(rng.random_range(0..n)),
            };
            let step = crate::envs::env_step(spec, &state, &action)?;
            total += step.reward;
            state = step.state;
            if step.done {
                break;
            }
        }
    }
    Ok(total / episodes as f64)
}

/// Policy evaluation helper: mean return of the deterministic (mean-mode)
/// policy stored in `snapshot`.
pub fn evaluate_policy(spec: &EnvSpec, snapshot: &ParameterSet, episodes: usize, seed: u64) -> Result<f64> {
    let policy = Policy::for_env(spec, spec.state_dim);
    let mut total = 0.0;
    for e in 0..episodes {
        let mut rng = stream(seed, "evaluate", e as u64);
        let start = reset(spec, &mut rng);
        let r = closed_loop_rollout(spec, &policy, snapshot, start, spec.horizon, RolloutMode::Mean, 0.99, &mut rng)?;
        total += r.trajectory.episode_return();
    }
    Ok(total / episodes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynmodel::LOG_STD_PARAM;

    /// Policy whose mean head outputs 0 and whose σ is 1.
    fn unit_policy(state_dim: usize, action_dim: usize) -> (Policy, ParameterSet) {
        let policy = Policy::new(state_dim, ActionKind::Continuous(action_dim));
        let mut ps = ParameterSet::new();
        policy.init(&mut ps, &mut stream(0, "init.policy", 0));
        for (name, t) in ps.iter_mut() {
            if name.starts_with("policy.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        (policy, ps)
    }

    fn imitation(policy: &Policy, ps: &ParameterSet, actions: &[Vec<f64>]) -> f64 {
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_rows(&vec![vec![0.3, -0.2]; actions.len()]).unwrap());
        let a = ActionBatch::Continuous(g.constant(Tensor::from_rows(actions).unwrap()));
        let l = imitation_loss(&mut g, policy, ps, s, &a).unwrap();
        g.value(l).item()
    }

    #[test]
    fn imitation_at_the_mean_is_log_two_pi() {
        let (policy, ps) = unit_policy(2, 2);
        assert_eq!(ps.get(LOG_STD_PARAM).unwrap().data(), &[0.0, 0.0]);
        let l = imitation(&policy, &ps, &[vec![0.0, 0.0], vec![0.0, 0.0]]);
        assert!((l - 1.837877).abs() < 1e-6, "{l}");
        let shifted = imitation(&policy, &ps, &[vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert!((shifted - l - 0.5).abs() < 1e-12);
    }

    fn batch_with_returns(returns: Vec<f64>) -> A2cBatch {
        let n = returns.len();
        A2cBatch {
            states: (0..n).map(|i| vec![0.1 * i as f64, -0.2]).collect(),
            actions: (0..n).map(|i| Action::Continuous(vec![0.3 - 0.1 * i as f64])).collect(),
            returns,
        }
    }

    #[test]
    fn zero_advantage_removes_the_policy_gradient_term() {
        let (policy, mut ps) = unit_policy(2, 1);
        for (name, t) in ps.iter_mut() {
            if name.starts_with("value.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        // V ≡ 0, so returns of 0 give zero advantage everywhere.
        let batch = batch_with_returns(vec![0.0; 3]);
        let mut g = Graph::new();
        let terms = a2c_loss(&mut g, &policy, &ps, &batch, 0.5, 0.0).unwrap();
        assert_eq!(g.value(terms.policy).item(), 0.0);
        let grads = g.backward(terms.policy, &ps).unwrap();
        for (name, t) in grads.iter() {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }

    #[test]
    fn unit_gaussian_entropy() {
        let (policy, ps) = unit_policy(2, 1);
        let batch = batch_with_returns(vec![1.0, -2.0]);
        let mut g = Graph::new();
        let terms = a2c_loss(&mut g, &policy, &ps, &batch, 0.5, 0.01).unwrap();
        assert!((g.value(terms.entropy).item() - 1.418939).abs() < 1e-6);
    }

    #[test]
    fn returns_to_go_restart_per_episode() {
        let spec = EnvSpec::point_mass();
        let policy = Policy::for_env(&spec, spec.state_dim);
        let mut ps = ParameterSet::new();
        policy.init(&mut ps, &mut stream(0, "init.policy", 0));
        let mut rng = stream(0, "episode", 0);
        let rollouts: Vec<Rollout> = (0..2)
            .map(|_| {
                let start = reset(&spec, &mut rng);
                closed_loop_rollout(&spec, &policy, &ps, start, 3, RolloutMode::Sample, 0.5, &mut rng).unwrap()
            })
            .collect();
        let batch = A2cBatch::from_rollouts(&rollouts, 0.5);
        assert_eq!(batch.states.len(), 6);
        let r = &rollouts[1].trajectory.rewards;
        assert!((batch.returns[3] - (r[0] + 0.5 * r[1] + 0.25 * r[2])).abs() < 1e-12);
        assert_eq!(batch.returns[5], r[2]);
    }

    #[test]
    fn mean_image_nll_matches_hand_computation() {
        // Two one-pixel frames 0 and 1: mean 0.5, variance 0.25.
        let t = SsmTrajectory { observations: vec![vec![0.0], vec![1.0]], actions: vec![vec![0.0]], rewards: vec![0.0] };
        let expected = 0.5 * (0.25f64.ln() + 1.0 + (2.0 * std::f64::consts::PI).ln());
        assert!((mean_image_nll(&[t]).unwrap() - expected).abs() < 1e-12);
    }
}
