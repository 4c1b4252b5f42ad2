//! Observation-space models: running normalizers, the Gaussian MLP
//! dynamics model over normalized state deltas, and the actor-critic policy.

use diffcore::gaussian::{diag_nll_rows, ln_2pi};
use diffcore::layers::Mlp;
use diffcore::{Graph, ParameterSet, Tensor, Var, LOG_VAR_MAX, LOG_VAR_MIN};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::envs::{Action, ActionKind, EnvSpec};
use crate::error::{Error, Result};

pub const HIDDEN: usize = 64;
pub const NORM_EPS: f64 = 1e-8;
pub const LOG_STD_INIT: f64 = -std::f64::consts::LN_2;

/// Per-dimension running mean and variance (Chan et al. batch merge).
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        Self { count: 0.0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    /// Statistics with the given mean and population standard deviation.
    pub fn with_moments(mean: Vec<f64>, std: &[f64]) -> Self {
        let m2 = std.iter().map(|s| s * s).collect();
        Self { count: 1.0, mean, m2 }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> Vec<f64> {
        if self.count == 0.0 {
            return vec![1.0; self.dim()];
        }
        self.m2.iter().map(|m| (m / self.count).sqrt()).collect()
    }

    pub fn update(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        if batch.is_empty() {
            return if self.count == 0.0 {
                Err(Error::Config("normalizer needs a non-empty first batch".into()))
            } else {
                Ok(())
            };
        }
        let d = self.dim();
        if let Some(bad) = batch.iter().find(|x| x.len() != d) {
            return Err(Error::Config(format!("normalizer expects {d} values, got {}", bad.len())));
        }
        let n_b = batch.len() as f64;
        let mut mean_b = vec![0.0; d];
        for x in batch {
            for (m, v) in mean_b.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean_b.iter_mut().for_each(|m| *m /= n_b);
        let mut m2_b = vec![0.0; d];
        for x in batch {
            for ((m2, v), m) in m2_b.iter_mut().zip(x).zip(&mean_b) {
                *m2 += (v - m) * (v - m);
            }
        }
        let total = self.count + n_b;
        for i in 0..d {
            let delta = mean_b[i] - self.mean[i];
            self.mean[i] += delta * n_b / total;
            self.m2[i] += m2_b[i] + delta * delta * self.count * n_b / total;
        }
        self.count = total;
        Ok(())
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let std = self.std();
        x.iter().zip(&self.mean).zip(&std).map(|((x, m), s)| (x - m) / (s + NORM_EPS)).collect()
    }

    pub fn invert(&self, y: &[f64]) -> Vec<f64> {
        let std = self.std();
        y.iter().zip(&self.mean).zip(&std).map(|((y, m), s)| y * (s + NORM_EPS) + m).collect()
    }

    /// Graph form of [`apply`](Self::apply) for `[n, dim]` inputs.
    pub fn apply_var(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let std = self.std();
        let scale: Vec<f64> = std.iter().map(|s| 1.0 / (s + NORM_EPS)).collect();
        let shift: Vec<f64> = self.mean.iter().zip(&scale).map(|(m, k)| -m * k).collect();
        Ok(g.affine(x, &scale, &shift)?)
    }

    /// Graph form of [`invert`](Self::invert).
    pub fn invert_var(&self, g: &mut Graph, y: Var) -> Result<Var> {
        let scale: Vec<f64> = self.std().iter().map(|s| s + NORM_EPS).collect();
        Ok(g.affine(y, &scale, &self.mean)?)
    }

    fn store(&self, prefix: &str, ps: &mut ParameterSet) {
        let d = self.dim();
        ps.insert(format!("{prefix}.count"), Tensor::scalar(self.count));
        ps.insert(format!("{prefix}.mean"), Tensor::new(vec![d], self.mean.clone()).expect("dim > 0"));
        ps.insert(format!("{prefix}.m2"), Tensor::new(vec![d], self.m2.clone()).expect("dim > 0"));
    }

    fn restore(prefix: &str, ps: &ParameterSet) -> Result<Self> {
        Ok(Self {
            count: ps.get(&format!("{prefix}.count"))?.item(),
            mean: ps.get(&format!("{prefix}.mean"))?.data().to_vec(),
            m2: ps.get(&format!("{prefix}.m2"))?.data().to_vec(),
        })
    }
}

/// Normalizes one batch after folding it into the running statistics.
pub fn normalizer_update_apply(stats: &mut RunningStats, batch: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    stats.update(batch)?;
    Ok(batch.iter().map(|x| stats.apply(x)).collect())
}

/// Statistics for model inputs and targets, refreshed from real transitions
/// only and held fixed during each optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub state: RunningStats,
    pub action: RunningStats,
    pub delta: RunningStats,
}

impl Normalizer {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state: RunningStats::new(state_dim),
            action: RunningStats::new(action_dim),
            delta: RunningStats::new(state_dim),
        }
    }

    pub fn update(&mut self, batch: &TransitionBatch) -> Result<()> {
        self.state.update(&batch.states)?;
        self.action.update(&batch.actions)?;
        self.delta.update(&batch.deltas())
    }

    pub fn store(&self, ps: &mut ParameterSet) {
        self.state.store("norm.state", ps);
        self.action.store("norm.action", ps);
        self.delta.store("norm.delta", ps);
    }

    pub fn restore(ps: &ParameterSet) -> Result<Self> {
        Ok(Self {
            state: RunningStats::restore("norm.state", ps)?,
            action: RunningStats::restore("norm.action", ps)?,
            delta: RunningStats::restore("norm.delta", ps)?,
        })
    }
}

/// Real transitions `(s, a, s')` with model-facing action features.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransitionBatch {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub next_states: Vec<Vec<f64>>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn push(&mut self, s: Vec<f64>, a: Vec<f64>, next: Vec<f64>) {
        self.states.push(s);
        self.actions.push(a);
        self.next_states.push(next);
    }

    pub fn deltas(&self) -> Vec<Vec<f64>> {
        self.states.iter().zip(&self.next_states).map(|(s, n)| n.iter().zip(s).map(|(n, s)| n - s).collect()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct DynamicsModel {
    mlp: Mlp,
    state_dim: usize,
    action_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictMode {
    Mean,
    Sample,
}

/// Output of a single-step prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaPrediction {
    /// Mean of the normalized delta.
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
    pub next_state: Vec<f64>,
}

impl DynamicsModel {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        let mlp = Mlp::new("dyn", &[state_dim + action_dim, HIDDEN, HIDDEN, 2 * state_dim]);
        Self { mlp, state_dim, action_dim }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn init<R: Rng>(&self, ps: &mut ParameterSet, rng: &mut R) {
        self.mlp.init(ps, rng);
    }

    /// `(μ_Δ, log_var_Δ)` over normalized deltas from normalized inputs.
    pub fn forward(&self, g: &mut Graph, ps: &ParameterSet, s_norm: Var, a_norm: Var) -> Result<(Var, Var)> {
        let x = g.concat_cols(&[s_norm, a_norm])?;
        let out = self.mlp.forward(g, ps, x)?;
        let mean = g.slice_cols(out, 0, self.state_dim)?;
        let raw = g.slice_cols(out, self.state_dim, self.state_dim)?;
        Ok((mean, g.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX)))
    }

    /// Normalized-delta distribution from raw `[n, s]` states and `[n, a]`
    /// action features.
    pub fn delta_dist(
        &self,
        g: &mut Graph,
        ps: &ParameterSet,
        norm: &Normalizer,
        s: Var,
        a: Var,
    ) -> Result<(Var, Var)> {
        let s_norm = norm.state.apply_var(g, s)?;
        let a_norm = norm.action.apply_var(g, a)?;
        self.forward(g, ps, s_norm, a_norm)
    }

    /// Mean next state `s + invert(μ_Δ)` on the graph.
    pub fn mean_next_state(&self, g: &mut Graph, ps: &ParameterSet, norm: &Normalizer, s: Var, a: Var) -> Result<Var> {
        let (mean, _) = self.delta_dist(g, ps, norm, s, a)?;
        let delta = norm.delta.invert_var(g, mean)?;
        Ok(g.add(s, delta)?)
    }
}

pub fn predict_delta<R: Rng>(
    model: &DynamicsModel,
    norm: &Normalizer,
    ps: &ParameterSet,
    s: &[f64],
    a: &[f64],
    mode: PredictMode,
    rng: &mut R,
) -> Result<DeltaPrediction> {
    let mut g = Graph::inference();
    let sv = g.constant(Tensor::row(s));
    let av = g.constant(Tensor::row(a));
    let (mean, log_var) = model.delta_dist(&mut g, ps, norm, sv, av)?;
    let mean = g.value(mean).data().to_vec();
    let log_var = g.value(log_var).data().to_vec();
    let delta_norm: Vec<f64> = match mode {
        PredictMode::Mean => mean.clone(),
        PredictMode::Sample => mean
            .iter()
            .zip(&log_var)
            .map(|(m, lv)| m + (0.5 * lv).exp() * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    };
    let delta = norm.delta.invert(&delta_norm);
    let next_state: Vec<f64> = s.iter().zip(&delta).map(|(s, d)| s + d).collect();
    if next_state.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { step: 0, detail: "non-finite predicted state".into() });
    }
    Ok(DeltaPrediction { mean, log_var, next_state })
}

/// Mean over transitions of the diagonal Gaussian NLL of the normalized
/// delta.
pub fn dynamics_nll(
    g: &mut Graph,
    model: &DynamicsModel,
    norm: &Normalizer,
    ps: &ParameterSet,
    batch: &TransitionBatch,
) -> Result<Var> {
    let targets: Vec<Vec<f64>> = batch.deltas().iter().map(|d| norm.delta.apply(d)).collect();
    let s = g.constant(Tensor::from_rows(&batch.states)?);
    let a = g.constant(Tensor::from_rows(&batch.actions)?);
    let target = g.constant(Tensor::from_rows(&targets)?);
    let (mean, log_var) = model.delta_dist(g, ps, norm, s, a)?;
    let rows = diag_nll_rows(g, target, mean, log_var)?;
    Ok(g.mean(rows))
}

#[derive(Clone, Debug, PartialEq)]
pub enum ActMode {
    Sample,
    Mean,
    /// Fixed standard-normal noise for a continuous policy.
    Reparam(Vec<f64>),
}

/// Distribution of a policy over a batch of states.
#[derive(Clone, Copy, Debug)]
pub enum PolicyDist {
    /// `[n, d]` mean and tiled `[n, d]` log standard deviation.
    Gaussian { mean: Var, log_std: Var },
    /// `[n, c]` log-probabilities.
    Categorical { log_probs: Var },
}

/// Actions aligned with a [`PolicyDist`].
#[derive(Clone, Debug)]
pub enum ActionBatch {
    Continuous(Var),
    Discrete(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyStep {
    pub action: Action,
    /// Standard-normal noise of a continuous sample.
    pub eps: Option<Vec<f64>>,
    pub log_prob: f64,
    pub entropy: f64,
    pub value: f64,
}

/// Gaussian (state-independent log-std) or categorical actor with a separate
/// value network.
#[derive(Clone, Debug)]
pub struct Policy {
    action: ActionKind,
    head: Mlp,
    value: Mlp,
}

pub const LOG_STD_PARAM: &str = "policy.log_std";

impl Policy {
    pub fn new(state_dim: usize, action: ActionKind) -> Self {
        let out = match action {
            ActionKind::Continuous(d) | ActionKind::Discrete(d) => d,
        };
        Self {
            action,
            head: Mlp::new("policy.mean", &[state_dim, HIDDEN, HIDDEN, out]),
            value: Mlp::new("value", &[state_dim, HIDDEN, HIDDEN, 1]),
        }
    }

    pub fn for_env(spec: &EnvSpec, state_dim: usize) -> Self {
        Self::new(state_dim, spec.action)
    }

    pub fn action_kind(&self) -> ActionKind {
        self.action
    }

    pub fn init<R: Rng>(&self, ps: &mut ParameterSet, rng: &mut R) {
        self.head.init(ps, rng);
        self.value.init(ps, rng);
        if let ActionKind::Continuous(d) = self.action {
            ps.insert(LOG_STD_PARAM, Tensor::full(&[1, d], LOG_STD_INIT));
        }
    }

    pub fn dist(&self, g: &mut Graph, ps: &ParameterSet, states: Var) -> Result<PolicyDist> {
        let out = self.head.forward(g, ps, states)?;
        match self.action {
            ActionKind::Continuous(d) => {
                let n = g.shape(states)[0];
                let raw = g.param(ps, LOG_STD_PARAM)?;
                let clamped = g.clamp(raw, 0.5 * LOG_VAR_MIN, 0.5 * LOG_VAR_MAX);
                let log_std = g.tile(clamped, &[n, d])?;
                Ok(PolicyDist::Gaussian { mean: out, log_std })
            }
            ActionKind::Discrete(_) => Ok(PolicyDist::Categorical { log_probs: g.log_softmax(out)? }),
        }
    }

    pub fn value(&self, g: &mut Graph, ps: &ParameterSet, states: Var) -> Result<Var> {
        Ok(self.value.forward(g, ps, states)?)
    }

    /// `a = μ + σ ⊙ ε` with constant noise `eps` (`[n, d]`).
    pub fn reparam(&self, g: &mut Graph, dist: PolicyDist, eps: Tensor) -> Result<Var> {
        let PolicyDist::Gaussian { mean, log_std } = dist else {
            return Err(Error::Config("reparameterized actions need a continuous policy".into()));
        };
        let std = g.exp(log_std);
        let eps = g.constant(eps);
        let noise = g.mul(std, eps)?;
        Ok(g.add(mean, noise)?)
    }

    /// Per-row `log π(a|s)`, `[n, 1]`, on unclipped actions.
    pub fn log_prob(&self, g: &mut Graph, dist: PolicyDist, actions: &ActionBatch) -> Result<Var> {
        match (dist, actions) {
            (PolicyDist::Gaussian { mean, log_std }, ActionBatch::Continuous(a)) => {
                let log_var = g.scale(log_std, 2.0);
                let nll = diag_nll_rows(g, *a, mean, log_var)?;
                Ok(g.neg(nll))
            }
            (PolicyDist::Categorical { log_probs }, ActionBatch::Discrete(idx)) => Ok(g.gather(log_probs, idx)?),
            _ => Err(Error::Config("action batch does not match the policy distribution".into())),
        }
    }

    /// Per-row entropy, `[n, 1]`.
    pub fn entropy(&self, g: &mut Graph, dist: PolicyDist) -> Var {
        match dist {
            PolicyDist::Gaussian { log_std, .. } => {
                let d = g.shape(log_std)[1] as f64;
                let rows = g.row_sum(log_std);
                g.add_scalar(rows, 0.5 * d * (1.0 + ln_2pi()))
            }
            PolicyDist::Categorical { log_probs } => {
                let p = g.exp(log_probs);
                let plogp = g.mul(p, log_probs).expect("same shape");
                let rows = g.row_sum(plogp);
                g.neg(rows)
            }
        }
    }

    /// Single-state action selection on an inference tape.
    pub fn act<R: Rng>(&self, ps: &ParameterSet, s: &[f64], mode: &ActMode, rng: &mut R) -> Result<PolicyStep> {
        let mut g = Graph::inference();
        let sv = g.constant(Tensor::row(s));
        let dist = self.dist(&mut g, ps, sv)?;
        let value = self.value(&mut g, ps, sv)?;
        let value = g.value(value).item();
        let entropy = self.entropy(&mut g, dist);
        let entropy = g.value(entropy).item();
        match dist {
            PolicyDist::Gaussian { mean, log_std } => {
                let mu = g.value(mean).data().to_vec();
                let eps = match mode {
                    ActMode::Mean => vec![0.0; mu.len()],
                    ActMode::Sample => (0..mu.len()).map(|_| rng.sample(StandardNormal)).collect(),
                    ActMode::Reparam(eps) if eps.len() == mu.len() => eps.clone(),
                    ActMode::Reparam(eps) => {
                        return Err(Error::Config(format!("noise has {} values, policy {}", eps.len(), mu.len())))
                    }
                };
                let a: Vec<f64> =
                    mu.iter().zip(g.value(log_std).data()).zip(&eps).map(|((m, ls), e)| m + ls.exp() * e).collect();
                let av = g.constant(Tensor::row(&a));
                let lp = self.log_prob(&mut g, dist, &ActionBatch::Continuous(av))?;
                let log_prob = g.value(lp).item();
                let eps = (!matches!(mode, ActMode::Mean)).then_some(eps);
                Ok(PolicyStep { action: Action::Continuous(a), eps, log_prob, entropy, value })
            }
            PolicyDist::Categorical { log_probs } => {
                let lp = g.value(log_probs).data().to_vec();
                let idx = match mode {
                    ActMode::Sample => {
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        let mut pick = lp.len() - 1;
                        for (i, l) in lp.iter().enumerate() {
                            acc += l.exp();
                            if u < acc {
                                pick = i;
                                break;
                            }
                        }
                        pick
                    }
                    _ => lp.iter().enumerate().fold(0, |best, (i, v)| if *v > lp[best] { i } else { best }),
                };
                Ok(PolicyStep { action: Action::Discrete(idx), eps: None, log_prob: lp[idx], entropy, value })
            }
        }
    }
}
