//! Closed-loop collection, open-loop imagination and the sequence
//! consistency loss.

use diffcore::cells::GruCell;
use diffcore::{Graph, ParameterSet, Tensor, Var};
use rand::Rng;

use crate::dynmodel::{ActMode, DynamicsModel, Normalizer, Policy};
use crate::envs::{env_step, EnvSpec, EnvState, Trajectory};
use crate::error::{Error, Result};

pub const ENCODER_HIDDEN: usize = 32;
pub const ENCODER_PREFIX: &str = "cc";

/// One-step transition function used by open-loop unrolls. Inputs and
/// output are `[n, state_dim]` raw states; `action` is `[n, action_dim]`.
pub trait TransitionModel {
    fn step(&self, g: &mut Graph, ps: &ParameterSet, state: Var, action: Var, t: usize) -> Result<Var>;
}

/// Learned Gaussian dynamics evaluated at its mean.
pub struct LearnedDynamics<'a> {
    pub model: &'a DynamicsModel,
    pub norm: &'a Normalizer,
}

impl TransitionModel for LearnedDynamics<'_> {
    fn step(&self, g: &mut Graph, ps: &ParameterSet, state: Var, action: Var, _t: usize) -> Result<Var> {
        self.model.mean_next_state(g, ps, self.norm, state, action)
    }
}

/// Unroll `model` from `s0` on the given actions: `s^I_{t+1} = f(s^I_t, a_t)`.
pub fn open_loop_rollout<M: TransitionModel + ?Sized>(
    g: &mut Graph,
    model: &M,
    ps: &ParameterSet,
    s0: Var,
    actions: &[Var],
) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(actions.len());
    let mut s = s0;
    for (t, &a) in actions.iter().enumerate() {
        s = model.step(g, ps, s, a, t)?;
        if !g.value(s).is_finite() {
            return Err(Error::Divergence { step: t + 1, detail: "non-finite imagined state".into() });
        }
        out.push(s);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EncoderMode {
    #[default]
    Trained,
    /// Fixed random projection: the optimizer never updates `cc.*`.
    Frozen,
}

pub trait SequenceEncoder {
    /// Encode a time-ordered sequence of `[n, d]` steps into `[n, h]`.
    fn encode(&self, g: &mut Graph, ps: &ParameterSet, seq: &[Var]) -> Result<Var>;
}

/// GRU over the sequence; the encoding is the final hidden state from zero.
#[derive(Clone, Debug)]
pub struct SeqEncoder {
    cell: GruCell,
    pub mode: EncoderMode,
}

impl SeqEncoder {
    pub fn new(d_in: usize, mode: EncoderMode) -> Self {
        Self { cell: GruCell::new(&format!("{ENCODER_PREFIX}.gru"), d_in, ENCODER_HIDDEN), mode }
    }

    pub fn init<R: Rng>(&self, ps: &mut ParameterSet, rng: &mut R) {
        self.cell.init(ps, rng);
    }

    pub fn cell(&self) -> &GruCell {
        &self.cell
    }
}

impl SequenceEncoder for SeqEncoder {
    fn encode(&self, g: &mut Graph, ps: &ParameterSet, seq: &[Var]) -> Result<Var> {
        let Some(first) = seq.first() else {
            return Err(Error::Config("cannot encode an empty sequence".into()));
        };
        let n = g.shape(*first)[0];
        let mut h = g.constant(Tensor::zeros(&[n, ENCODER_HIDDEN]));
        for &x in seq {
            h = self.cell.step(g, ps, x, h)?;
        }
        Ok(h)
    }
}

/// Passes the final element through unchanged; used to test the loss in
/// isolation from the recurrent encoder.
#[derive(Clone, Copy, Debug, Default)]
pub struct LastState;

impl SequenceEncoder for LastState {
    fn encode(&self, _g: &mut Graph, _ps: &ParameterSet, seq: &[Var]) -> Result<Var> {
        seq.last().copied().ok_or_else(|| Error::Config("cannot encode an empty sequence".into()))
    }
}

pub fn encode_sequence<E: SequenceEncoder + ?Sized>(
    g: &mut Graph,
    encoder: &E,
    ps: &ParameterSet,
    seq: &[Var],
) -> Result<Var> {
    encoder.encode(g, ps, seq)
}

/// Encodings of both branches and the per-row distance `[n, 1]`. The
/// closed-loop inputs are detached; the encoder itself still receives
/// gradient from both branches.
pub struct ConsistencyTerms {
    pub real_encoding: Var,
    pub imagined_encoding: Var,
    pub rows: Var,
}

pub fn consistency_terms<E: SequenceEncoder + ?Sized>(
    g: &mut Graph,
    encoder: &E,
    ps: &ParameterSet,
    real: &[Var],
    imagined: &[Var],
) -> Result<ConsistencyTerms> {
    if real.len() != imagined.len() {
        return Err(Error::Config(format!(
            "consistency sequences differ in length: {} vs {}",
            real.len(),
            imagined.len()
        )));
    }
    if let Some((r, i)) = real.iter().zip(imagined).find(|(r, i)| g.shape(**r) != g.shape(**i)) {
        return Err(Error::Config(format!(
            "consistency step shapes differ: {:?} vs {:?}",
            g.shape(*r),
            g.shape(*i)
        )));
    }
    let real: Vec<Var> = real.iter().map(|&v| g.detach(v)).collect();
    let real_encoding = encoder.encode(g, ps, &real)?;
    let imagined_encoding = encoder.encode(g, ps, imagined)?;
    let diff = g.sub(real_encoding, imagined_encoding)?;
    let rows = g.row_norm(diff);
    Ok(ConsistencyTerms { real_encoding, imagined_encoding, rows })
}

/// `l_cc = ‖enc(s_{1:k}) − enc(s^I_{1:k})‖₂`, averaged over the batch rows.
pub fn consistency_loss<E: SequenceEncoder + ?Sized>(
    g: &mut Graph,
    encoder: &E,
    ps: &ParameterSet,
    real: &[Var],
    imagined: &[Var],
) -> Result<Var> {
    let terms = consistency_terms(g, encoder, ps, real, imagined)?;
    Ok(g.mean(terms.rows))
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if alpha >= 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must be a finite value >= 0, got {alpha}")))
    }
}

/// `l_total = l_rl + α·l_cc`
pub fn total_loss(l_rl: f64, l_cc: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(l_rl + alpha * l_cc)
}

pub fn total_loss_var(g: &mut Graph, l_rl: Var, l_cc: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let weighted = g.scale(l_cc, alpha);
    Ok(g.add(l_rl, weighted)?)
}

/// Mean over dimensions of the across-row population standard deviation of
/// `[n, h]` encodings. Values near zero indicate a collapsed encoder.
pub fn collapse_monitor(encodings: &Tensor) -> f64 {
    let (n, h) = (encodings.rows(), encodings.cols());
    let data = encodings.data();
    let mut total = 0.0;
    for j in 0..h {
        let mean = (0..n).map(|i| data[i * h + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (data[i * h + j] - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    total / h as f64
}

pub const COLLAPSE_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    /// Reparameterized (continuous) or categorical samples.
    Sample,
    Mean,
}

/// Closed-loop episode plus the per-step policy record.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub trajectory: Trajectory,
    /// Noise behind each continuous action (`None` for mean or discrete).
    pub eps: Vec<Option<Vec<f64>>>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
}

/// Act from the real current state at each step, for at most `horizon`
/// steps or until the environment reports `done`.
pub fn closed_loop_rollout<R: Rng>(
    spec: &EnvSpec,
    policy: &Policy,
    ps: &ParameterSet,
    start: EnvState,
    horizon: usize,
    mode: RolloutMode,
    gamma: f64,
    rng: &mut R,
) -> Result<Rollout> {
    if horizon == 0 {
        return Err(Error::Config("rollout horizon must be >= 1".into()));
    }
    let act_mode = match mode {
        RolloutMode::Sample => ActMode::Sample,
        RolloutMode::Mean => ActMode::Mean,
    };
    let mut trajectory = Trajectory {
        start: start.clone(),
        states: Vec::new(),
        observations: None,
        actions: Vec::new(),
        rewards: Vec::new(),
        gamma,
    };
    let (mut eps, mut log_probs, mut values) = (Vec::new(), Vec::new(), Vec::new());
    let mut state = start;
    for t in 0..horizon {
        let step = policy.act(ps, &state.values, &act_mode, rng)?;
        let out = env_step(spec, &state, &step.action).map_err(|e| Error::Config(format!("step {t}: {e}")))?;
        trajectory.actions.push(step.action);
        trajectory.rewards.push(out.reward);
        trajectory.states.push(out.state.clone());
        eps.push(step.eps);
        log_probs.push(step.log_prob);
        values.push(step.value);
        state = out.state;
        if out.done {
            break;
        }
    }
    Ok(Rollout { trajectory, eps, log_probs, values })
}

/// Matched real and imagined sequences from the first `k` steps of one
/// trajectory, as plain data.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutPair {
    pub start: Vec<f64>,
    pub actions: Vec<Vec<f64>>,
    pub real: Vec<Vec<f64>>,
    pub imagined: Vec<Vec<f64>>,
    /// Index of each step in the source trajectory.
    pub alignment: Vec<usize>,
}

impl RolloutPair {
    pub fn len(&self) -> usize {
        self.real.len()
    }

    pub fn is_empty(&self) -> bool {
        self.real.is_empty()
    }
}

/// Replays the recorded actions of `traj` through `model` from its start
/// state. The model never sees the real states `s_{1:k}`.
pub fn build_rollout_pair<M: TransitionModel + ?Sized>(
    spec: &EnvSpec,
    traj: &Trajectory,
    model: &M,
    ps: &ParameterSet,
    k: usize,
) -> Result<RolloutPair> {
    if k == 0 || k > traj.len() {
        return Err(Error::Config(format!("unroll length {k} outside 1..={}", traj.len())));
    }
    let actions: Vec<Vec<f64>> = traj.actions[..k].iter().map(|a| a.features(spec)).collect();
    let mut g = Graph::inference();
    let s0 = g.constant(Tensor::row(&traj.start.values));
    let avars: Vec<Var> = actions.iter().map(|a| g.constant(Tensor::row(a))).collect();
    let imagined = open_loop_rollout(&mut g, model, ps, s0, &avars)?;
    Ok(RolloutPair {
        start: traj.start.values.clone(),
        actions,
        real: traj.states[..k].iter().map(|s| s.values.clone()).collect(),
        imagined: imagined.iter().map(|&v| g.value(v).data().to_vec()).collect(),
        alignment: (1..=k).collect(),
    })
}

/// Scalar `l_cc` of one pair on an inference tape.
pub fn pair_consistency<E: SequenceEncoder + ?Sized>(encoder: &E, ps: &ParameterSet, pair: &RolloutPair) -> Result<f64> {
    let mut g = Graph::inference();
    let real: Vec<Var> = pair.real.iter().map(|s| g.constant(Tensor::row(s))).collect();
    let imagined: Vec<Var> = pair.imagined.iter().map(|s| g.constant(Tensor::row(s))).collect();
    let loss = consistency_loss(&mut g, encoder, ps, &real, &imagined)?;
    Ok(g.value(loss).item())
}

#[cfg(test)]
mod tests {
    use std::cell::RefCell;

    use super::*;
    use crate::envs::{reset, Action, EnvKind};
    use diffcore::rng::stream;

    /// Ground-truth dynamics of the analytic environments.
    struct Oracle(EnvSpec);

    impl TransitionModel for Oracle {
        fn step(&self, g: &mut Graph, _ps: &ParameterSet, state: Var, action: Var, _t: usize) -> Result<Var> {
            let s = g.value(state).data().to_vec();
            let a = g.value(action).data().to_vec();
            let action = match self.0.kind {
                EnvKind::DiscreteGridNav => Action::Discrete(a.iter().position(|&v| v == 1.0).unwrap()),
                _ => Action::Continuous(a),
            };
            let next = env_step(&self.0, &EnvState::new(s), &action)?;
            Ok(g.constant(Tensor::row(&next.state.values)))
        }
    }

    /// Records every state it is asked to advance.
    struct Recorder(RefCell<Vec<Vec<f64>>>);

    impl TransitionModel for Recorder {
        fn step(&self, g: &mut Graph, _ps: &ParameterSet, state: Var, _action: Var, _t: usize) -> Result<Var> {
            self.0.borrow_mut().push(g.value(state).data().to_vec());
            let next = g.value(state).map(|v| v + 1.0);
            Ok(g.constant(next))
        }
    }

    fn policy_and_params(spec: &EnvSpec) -> (Policy, ParameterSet) {
        let policy = Policy::for_env(spec, spec.state_dim);
        let mut ps = ParameterSet::new();
        policy.init(&mut ps, &mut stream(3, "policy", 0));
        (policy, ps)
    }

    fn mean_rollout(spec: &EnvSpec, horizon: usize, seed: u64) -> Rollout {
        let (policy, ps) = policy_and_params(spec);
        let start = reset(spec, &mut stream(seed, "reset", 0));
        closed_loop_rollout(spec, &policy, &ps, start, horizon, RolloutMode::Mean, 0.99, &mut stream(seed, "act", 0))
            .unwrap()
    }

    #[test]
    fn closed_loop_examples() {
        let spec = EnvSpec::point_mass();
        assert_eq!(mean_rollout(&spec, 1, 0).trajectory.len(), 1);
        assert_eq!(mean_rollout(&spec, 30, 1), mean_rollout(&spec, 30, 1));
        let r = mean_rollout(&spec, 50, 2).trajectory;
        for (t, s) in r.all_states().zip(&r.actions).enumerate().map(|(t, x)| (t, x)) {
            let replay = env_step(&spec, s.0, s.1).unwrap();
            assert_eq!(replay.reward, r.rewards[t]);
            assert_eq!(replay.state, r.states[t]);
        }
    }

    #[test]
    fn sampled_rollout_records_noise() {
        let spec = EnvSpec::pendulum();
        let (policy, ps) = policy_and_params(&spec);
        let start = reset(&spec, &mut stream(0, "reset", 0));
        let r = closed_loop_rollout(&spec, &policy, &ps, start, 10, RolloutMode::Sample, 0.99, &mut stream(0, "a", 0))
            .unwrap();
        assert!(r.eps.iter().all(|e| e.as_ref().is_some_and(|e| e.len() == 1)));
        assert!(closed_loop_rollout(&spec, &policy, &ps, r.trajectory.start.clone(), 0, RolloutMode::Mean, 0.9, &mut stream(0, "a", 0))
            .is_err());
    }

    #[test]
    fn oracle_pairs_have_zero_consistency() {
        for spec in [EnvSpec::point_mass(), EnvSpec::pendulum(), EnvSpec::grid_nav()] {
            let encoder = SeqEncoder::new(spec.state_dim, EncoderMode::Trained);
            let mut ps = ParameterSet::new();
            encoder.init(&mut ps, &mut stream(1, "enc", 0));
            let traj = mean_rollout(&spec, 50, 4).trajectory;
            for k in [1, 5, 20, 50].into_iter().filter(|&k| k <= traj.len()) {
                let pair = build_rollout_pair(&spec, &traj, &Oracle(spec), &ps, k).unwrap();
                assert_eq!(pair.len(), k);
                assert_eq!(pair.real, pair.imagined);
                assert!(pair_consistency(&encoder, &ps, &pair).unwrap() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_weight_model_keeps_start_state() {
        let model = DynamicsModel::new(4, 2);
        let mut ps = ParameterSet::new();
        model.init(&mut ps, &mut stream(0, "m", 0));
        ps.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let norm = Normalizer::new(4, 2);
        let dynamics = LearnedDynamics { model: &model, norm: &norm };
        let mut g = Graph::new();
        let s0 = g.constant(Tensor::row(&[1.0, 2.0, 0.0, 0.0]));
        let actions: Vec<Var> = (0..3).map(|i| g.constant(Tensor::row(&[i as f64, -1.0]))).collect();
        let out = open_loop_rollout(&mut g, &dynamics, &ps, s0, &actions).unwrap();
        assert_eq!(out.len(), 3);
        for v in out {
            assert_eq!(g.value(v).data(), &[1.0, 2.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn open_loop_lengths_and_isolation() {
        let spec = EnvSpec::point_mass();
        let mut traj = mean_rollout(&spec, 50, 5).trajectory;
        for s in &mut traj.states {
            s.values.iter_mut().for_each(|v| *v = f64::NAN);
        }
        for k in [1, 5, 20, 50] {
            let recorder = Recorder(RefCell::new(Vec::new()));
            let pair = build_rollout_pair(&spec, &traj, &recorder, &ParameterSet::new(), k).unwrap();
            assert_eq!(pair.imagined.len(), k);
            assert!(pair.imagined.iter().flatten().all(|v| v.is_finite()));
            let seen = recorder.0.into_inner();
            assert_eq!(seen.len(), k);
            assert!(seen.iter().flatten().all(|v| v.is_finite()));
            assert_eq!(seen[0], traj.start.values);
        }
    }

    #[test]
    fn divergence_reports_step() {
        struct Blowup;
        impl TransitionModel for Blowup {
            fn step(&self, g: &mut Graph, _ps: &ParameterSet, s: Var, _a: Var, t: usize) -> Result<Var> {
                let v = if t == 2 { f64::INFINITY } else { 0.0 };
                let c = g.constant(Tensor::full(g.shape(s), v));
                Ok(g.add(s, c)?)
            }
        }
        let mut g = Graph::new();
        let s0 = g.constant(Tensor::row(&[0.0]));
        let acts: Vec<Var> = (0..5).map(|_| g.constant(Tensor::row(&[0.0]))).collect();
        let err = open_loop_rollout(&mut g, &Blowup, &ParameterSet::new(), s0, &acts).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 3, .. }), "{err}");
    }

    fn rows(g: &mut Graph, seq: &[[f64; 2]]) -> Vec<Var> {
        seq.iter().map(|s| g.constant(Tensor::row(s))).collect()
    }

    #[test]
    fn consistency_loss_examples() {
        let ps = ParameterSet::new();
        let mut g = Graph::new();
        let a = rows(&mut g, &[[1.0, 1.0], [2.0, 2.0]]);
        let b = rows(&mut g, &[[1.0, 1.0], [5.0, 6.0]]);
        let l = consistency_loss(&mut g, &LastState, &ps, &a, &b).unwrap();
        assert_eq!(g.value(l).item(), 5.0);
        let same = consistency_loss(&mut g, &LastState, &ps, &a, &a).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let ba = consistency_loss(&mut g, &LastState, &ps, &b, &a).unwrap();
        assert_eq!(g.value(ba).item(), 5.0);
        assert!(consistency_loss(&mut g, &LastState, &ps, &a, &b[..1]).is_err());
    }

    #[test]
    fn gru_encoder_examples() {
        let encoder = SeqEncoder::new(2, EncoderMode::Trained);
        let mut ps = ParameterSet::new();
        encoder.init(&mut ps, &mut stream(0, "enc", 0));
        let mut g = Graph::new();
        let seq = rows(&mut g, &[[0.3, -0.2], [1.0, 0.5], [0.0, 2.0]]);
        let e1 = encode_sequence(&mut g, &encoder, &ps, &seq).unwrap();
        let e2 = encode_sequence(&mut g, &encoder, &ps, &seq).unwrap();
        assert_eq!(g.shape(e1), &[1, ENCODER_HIDDEN]);
        assert_eq!(g.value(e1), g.value(e2));

        let single = encode_sequence(&mut g, &encoder, &ps, &seq[..1]).unwrap();
        let h0 = g.constant(Tensor::zeros(&[1, ENCODER_HIDDEN]));
        let direct = encoder.cell().step(&mut g, &ps, seq[0], h0).unwrap();
        assert_eq!(g.value(single), g.value(direct));

        let mut zero = ps.clone();
        zero.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let mut fresh = Graph::new();
        let seq = rows(&mut fresh, &[[0.3, -0.2], [1.0, 0.5], [0.0, 2.0]]);
        let z = encode_sequence(&mut fresh, &encoder, &zero, &seq).unwrap();
        assert!(fresh.value(z).data().iter().all(|&v| v == 0.0));
        assert!(encode_sequence(&mut g, &encoder, &ps, &[]).is_err());
    }

    #[test]
    fn real_branch_receives_no_gradient() {
        let encoder = SeqEncoder::new(2, EncoderMode::Trained);
        let mut ps = ParameterSet::new();
        encoder.init(&mut ps, &mut stream(0, "enc", 0));
        ps.insert("x.real", Tensor::row(&[0.5, -0.5]));
        ps.insert("x.imag", Tensor::row(&[0.1, 0.2]));
        let mut g = Graph::new();
        let r = g.param(&ps, "x.real").unwrap();
        let i = g.param(&ps, "x.imag").unwrap();
        let loss = consistency_loss(&mut g, &encoder, &ps, &[r, r], &[i, i]).unwrap();
        let grads = g.backward(loss, &ps).unwrap();
        assert!(grads.get("x.real").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.get("x.imag").unwrap().data().iter().any(|&v| v != 0.0));
        assert!(grads.get("cc.gru.w_z").unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.0, 2.0, 0.5).unwrap(), 2.0);
        assert_eq!(total_loss(1.5, 7.0, 0.0).unwrap(), 1.5);
        assert_eq!(total_loss(1.5, 0.0, 0.3).unwrap(), 1.5);
        assert!(matches!(total_loss(1.0, 1.0, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn collapse_monitor_values() {
        let constant = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(collapse_monitor(&constant), 0.0);
        let spread = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 4.0]]).unwrap();
        assert_eq!(collapse_monitor(&spread), 1.5);
    }
}
