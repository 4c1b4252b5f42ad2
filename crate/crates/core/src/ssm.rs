//! Latent state-space model over stacked frames: convolutional encoder,
//! prior/posterior latent networks, LSTM transition and a transposed-conv
//! Gaussian decoder with one shared log-variance.
//!
//! Time indexing: `z_t ~ q(z | e(o_t), s_{t-1}, a_{t-1})`,
//! `s_t = LSTM([z_t, a_{t-1}], s_{t-1})`, and the decoder reconstructs `o_t`
//! from `(s_t, z_t)`.

use diffcore::gaussian::{diag_kl_rows, diag_nll_rows};
use diffcore::layers::{Conv2d, ConvTranspose2d, Linear, Mlp};
use diffcore::cells::LstmCell;
use diffcore::rng::stream;
use diffcore::{Graph, ParameterSet, Tensor, Var, LOG_VAR_MAX, LOG_VAR_MIN};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::SsmTrajectory;
use crate::error::{Error, Result};

pub const FEATURE_DIM: usize = 32;
pub const LATENT_DIM: usize = 8;
pub const STATE_DIM: usize = 32;
pub const CONV_CHANNELS: usize = 16;
pub const HIDDEN: usize = 64;
pub const DEC_LOG_VAR: &str = "ssm.dec.log_var";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsmDims {
    /// Frame side; must be divisible by 4.
    pub frame: usize,
    /// Stacked frames per observation.
    pub channels: usize,
    pub action_dim: usize,
}

impl SsmDims {
    pub fn obs_len(&self) -> usize {
        self.channels * self.frame * self.frame
    }

    fn coarse(&self) -> usize {
        self.frame / 4
    }

    fn flat(&self) -> usize {
        CONV_CHANNELS * self.coarse() * self.coarse()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentMode {
    Sample,
    Mean,
}

#[derive(Clone, Copy, Debug)]
pub enum LatentInputs {
    Prior { s: Var, a: Var },
    Posterior { e: Var, s: Var, a: Var },
}

/// Recurrent state `s` together with the LSTM cell.
#[derive(Clone, Copy, Debug)]
pub struct Recurrent {
    pub s: Var,
    pub c: Var,
}

impl Recurrent {
    pub fn zeros(g: &mut Graph, n: usize) -> Self {
        Self { s: g.constant(Tensor::zeros(&[n, STATE_DIM])), c: g.constant(Tensor::zeros(&[n, STATE_DIM])) }
    }
}

#[derive(Clone, Debug)]
pub struct StateSpaceModel {
    dims: SsmDims,
    enc1: Conv2d,
    enc2: Conv2d,
    enc_fc: Linear,
    prior: Mlp,
    post: Mlp,
    trans: LstmCell,
    dec_fc: Linear,
    dec1: ConvTranspose2d,
    dec2: ConvTranspose2d,
}

impl StateSpaceModel {
    pub fn new(dims: SsmDims) -> Result<Self> {
        if dims.frame < 4 || dims.frame % 4 != 0 || dims.channels == 0 || dims.action_dim == 0 {
            return Err(Error::Config(format!("unsupported state-space model dimensions {dims:?}")));
        }
        let a = dims.action_dim;
        Ok(Self {
            dims,
            enc1: Conv2d::new("ssm.enc.c1", dims.channels, CONV_CHANNELS, 4, 2, 1),
            enc2: Conv2d::new("ssm.enc.c2", CONV_CHANNELS, CONV_CHANNELS, 4, 2, 1),
            enc_fc: Linear::new("ssm.enc.fc", dims.flat(), FEATURE_DIM),
            prior: Mlp::new("ssm.prior", &[STATE_DIM + a, HIDDEN, 2 * LATENT_DIM]),
            post: Mlp::new("ssm.post", &[FEATURE_DIM + STATE_DIM + a, HIDDEN, 2 * LATENT_DIM]),
            trans: LstmCell::new("ssm.trans", LATENT_DIM + a, STATE_DIM),
            dec_fc: Linear::new("ssm.dec.fc", STATE_DIM + LATENT_DIM, dims.flat()),
            dec1: ConvTranspose2d::new("ssm.dec.d1", CONV_CHANNELS, CONV_CHANNELS, 4, 2, 1),
            dec2: ConvTranspose2d::new("ssm.dec.d2", CONV_CHANNELS, dims.channels, 4, 2, 1),
        })
    }

    /// Recover the architecture from a parameter set.
    pub fn from_params(ps: &ParameterSet) -> Result<Self> {
        let channels = ps.get("ssm.enc.c1.w")?.shape()[1];
        let flat = ps.get("ssm.enc.fc.w")?.shape()[1];
        let prior_in = ps.get("ssm.prior.l0.w")?.shape()[1];
        let coarse = ((flat / CONV_CHANNELS) as f64).sqrt().round() as usize;
        let dims = SsmDims { frame: 4 * coarse, channels, action_dim: prior_in.saturating_sub(STATE_DIM) };
        if CONV_CHANNELS * coarse * coarse != flat {
            return Err(Error::Config(format!("encoder width {flat} is not a square feature map")));
        }
        Self::new(dims)
    }

    pub fn dims(&self) -> SsmDims {
        self.dims
    }

    pub fn init<R: Rng>(&self, ps: &mut ParameterSet, rng: &mut R) {
        self.enc1.init(ps, rng);
        self.enc2.init(ps, rng);
        self.enc_fc.init(ps, rng);
        self.prior.init(ps, rng);
        self.post.init(ps, rng);
        self.trans.init(ps, rng);
        self.dec_fc.init(ps, rng);
        self.dec1.init(ps, rng);
        self.dec2.init(ps, rng);
        ps.insert(DEC_LOG_VAR, Tensor::zeros(&[1, 1]));
    }

    /// `[n, obs_len] -> [n, 32]`
    pub fn encode_obs(&self, g: &mut Graph, ps: &ParameterSet, obs: Var) -> Result<Var> {
        let d = self.dims;
        let shape = g.shape(obs).to_vec();
        if shape.len() != 2 || shape[1] != d.obs_len() {
            return Err(Error::Config(format!("observation batch {shape:?} does not match {} values", d.obs_len())));
        }
        let x = g.reshape(obs, &[shape[0], d.channels, d.frame, d.frame])?;
        let h = self.enc1.forward(g, ps, x)?;
        let h = g.tanh(h);
        let h = self.enc2.forward(g, ps, h)?;
        let h = g.tanh(h);
        let h = g.reshape(h, &[shape[0], d.flat()])?;
        self.enc_fc.forward(g, ps, h).map_err(Into::into)
    }

    /// Diagonal Gaussian `(μ_z, log_var_z)` with the log-variance clamped.
    pub fn latent_params(&self, g: &mut Graph, ps: &ParameterSet, inputs: LatentInputs) -> Result<(Var, Var)> {
        let out = match inputs {
            LatentInputs::Prior { s, a } => {
                let x = g.concat_cols(&[s, a])?;
                self.prior.forward(g, ps, x)?
            }
            LatentInputs::Posterior { e, s, a } => {
                let x = g.concat_cols(&[e, s, a])?;
                self.post.forward(g, ps, x)?
            }
        };
        let mean = g.slice_cols(out, 0, LATENT_DIM)?;
        let raw = g.slice_cols(out, LATENT_DIM, LATENT_DIM)?;
        Ok((mean, g.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX)))
    }

    pub fn transition_step(
        &self,
        g: &mut Graph,
        ps: &ParameterSet,
        z: Var,
        prev: Recurrent,
        a_prev: Var,
    ) -> Result<Recurrent> {
        let x = g.concat_cols(&[z, a_prev])?;
        let (s, c) = self.trans.step(g, ps, x, prev.s, prev.c)?;
        Ok(Recurrent { s, c })
    }

    /// Per-pixel mean `[n, obs_len]` and the shared log-variance tiled to
    /// the same shape.
    pub fn decode_obs(&self, g: &mut Graph, ps: &ParameterSet, s: Var, z: Var) -> Result<(Var, Var)> {
        let d = self.dims;
        let n = g.shape(s)[0];
        let x = g.concat_cols(&[s, z])?;
        let h = self.dec_fc.forward(g, ps, x)?;
        let h = g.tanh(h);
        let h = g.reshape(h, &[n, CONV_CHANNELS, d.coarse(), d.coarse()])?;
        let h = self.dec1.forward(g, ps, h)?;
        let h = g.tanh(h);
        let h = self.dec2.forward(g, ps, h)?;
        let mean = g.reshape(h, &[n, d.obs_len()])?;
        let lv = g.param(ps, DEC_LOG_VAR)?;
        let lv = g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
        let log_var = g.tile(lv, &[n, d.obs_len()])?;
        Ok((mean, log_var))
    }

    /// Reconstruction NLL of `target` per row, `[n, 1]`.
    pub fn decode_nll_rows(&self, g: &mut Graph, ps: &ParameterSet, s: Var, z: Var, target: Var) -> Result<Var> {
        let (mean, log_var) = self.decode_obs(g, ps, s, z)?;
        Ok(diag_nll_rows(g, target, mean, log_var)?)
    }
}

fn draw<R: Rng>(g: &mut Graph, mean: Var, log_var: Var, mode: LatentMode, rng: &mut R) -> Result<Var> {
    match mode {
        LatentMode::Mean => Ok(mean),
        LatentMode::Sample => {
            let shape = g.shape(mean).to_vec();
            let eps: Vec<f64> = (0..shape.iter().product()).map(|_| rng.sample(StandardNormal)).collect();
            let eps = g.constant(Tensor::new(shape, eps)?);
            let half = g.scale(log_var, 0.5);
            let std = g.exp(half);
            let noise = g.mul(std, eps)?;
            Ok(g.add(mean, noise)?)
        }
    }
}

/// Output of closed-loop filtering.
#[derive(Clone, Debug)]
pub struct Filtered {
    /// Scalar `Σ_t (NLL_t + KL_t)`, averaged over rows.
    pub loss: Var,
    pub recon: Var,
    pub kl: Var,
    /// One entry per observation.
    pub states: Vec<Recurrent>,
    pub latents: Vec<Var>,
}

/// Filter `obs[t]` (each `[n, obs_len]`) given the preceding actions
/// `actions[t]` from `start`, with reparameterized posterior samples.
pub fn sequence_elbo<R: Rng>(
    g: &mut Graph,
    model: &StateSpaceModel,
    ps: &ParameterSet,
    start: Recurrent,
    obs: &[Var],
    actions: &[Var],
    rng: &mut R,
) -> Result<Filtered> {
    if obs.is_empty() || obs.len() != actions.len() {
        return Err(Error::Config(format!("sequence_elbo needs T >= 1 and matching actions ({} vs {})", obs.len(), actions.len())));
    }
    let n = g.shape(obs[0])[0] as f64;
    let mut prev = start;
    let (mut states, mut latents, mut nll_terms, mut kl_terms) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (t, (&o, &a)) in obs.iter().zip(actions).enumerate() {
        let e = model.encode_obs(g, ps, o)?;
        let (mu_q, lv_q) = model.latent_params(g, ps, LatentInputs::Posterior { e, s: prev.s, a })?;
        let (mu_p, lv_p) = model.latent_params(g, ps, LatentInputs::Prior { s: prev.s, a })?;
        let z = draw(g, mu_q, lv_q, LatentMode::Sample, rng)?;
        let next = model.transition_step(g, ps, z, prev, a)?;
        let nll = model.decode_nll_rows(g, ps, next.s, z, o)?;
        let kl = diag_kl_rows(g, mu_q, lv_q, mu_p, lv_p)?;
        let nll = g.sum(nll);
        let kl = g.sum(kl);
        let step_total = g.value(nll).item() + g.value(kl).item();
        if !step_total.is_finite() {
            return Err(Error::Divergence { step: t, detail: "non-finite ELBO term".into() });
        }
        nll_terms.push(nll);
        kl_terms.push(kl);
        states.push(next);
        latents.push(z);
        prev = next;
    }
    let recon = sum_all(g, &nll_terms)?;
    let recon = g.scale(recon, 1.0 / n);
    let kl = sum_all(g, &kl_terms)?;
    let kl = g.scale(kl, 1.0 / n);
    let loss = g.add(recon, kl)?;
    Ok(Filtered { loss, recon, kl, states, latents })
}

fn sum_all(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Prior-driven unroll from `start`; never reads an observation.
#[derive(Clone, Debug)]
pub struct Imagined {
    pub states: Vec<Recurrent>,
    pub latents: Vec<Var>,
}

pub fn open_loop_generate<R: Rng>(
    g: &mut Graph,
    model: &StateSpaceModel,
    ps: &ParameterSet,
    start: Recurrent,
    actions: &[Var],
    mode: LatentMode,
    rng: &mut R,
) -> Result<Imagined> {
    let mut prev = start;
    let (mut states, mut latents) = (Vec::new(), Vec::new());
    for (t, &a) in actions.iter().enumerate() {
        let (mu, lv) = model.latent_params(g, ps, LatentInputs::Prior { s: prev.s, a })?;
        let z = draw(g, mu, lv, mode, rng)?;
        let next = model.transition_step(g, ps, z, prev, a)?;
        if !g.value(next.s).is_finite() || !g.value(next.c).is_finite() {
            return Err(Error::Divergence { step: t + 1, detail: "non-finite imagined state".into() });
        }
        states.push(next);
        latents.push(z);
        prev = next;
    }
    Ok(Imagined { states, latents })
}

/// Average per-step `log p(o_t | s^I_t, z_t)` over open-loop windows of
/// length `k`. Each window starts at an offset `0, k, 2k, ...` of a
/// trajectory, takes its initial state by filtering that one observation
/// through the posterior, and then runs on prior latents only.
pub fn imagination_log_likelihood(
    model: &StateSpaceModel,
    ps: &ParameterSet,
    trajectories: &[SsmTrajectory],
    k: usize,
    seed: u64,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("imagination horizon must be >= 1".into()));
    }
    let short: Vec<usize> =
        trajectories.iter().enumerate().filter(|(_, t)| t.observations.len() < k + 1).map(|(i, _)| i).collect();
    if !short.is_empty() {
        return Err(Error::Dataset(format!("trajectories shorter than {} observations: {short:?}", k + 1)));
    }
    if trajectories.is_empty() {
        return Err(Error::Dataset("no trajectories to evaluate".into()));
    }
    let windows: Vec<(usize, usize)> = trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..).map(move |w| (i, w * k)).take_while(move |&(_, off)| off + k < t.observations.len()))
        .collect();
    let n = windows.len();
    let obs_at = |t: usize| -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = windows.iter().map(|&(i, off)| trajectories[i].observations[off + t].clone()).collect();
        Ok(Tensor::from_rows(&rows)?)
    };
    let act_at = |t: usize| -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = windows.iter().map(|&(i, off)| trajectories[i].actions[off + t].clone()).collect();
        Ok(Tensor::from_rows(&rows)?)
    };
    let a_dim = model.dims().action_dim;
    let mut rng = stream(seed, "imagination", 0);

    // Posterior filtering of the first observation from the zero state.
    let mut g = Graph::inference();
    let start = Recurrent::zeros(&mut g, n);
    let o0 = g.constant(obs_at(0)?);
    let a0 = g.constant(Tensor::zeros(&[n, a_dim]));
    let e = model.encode_obs(&mut g, ps, o0)?;
    let (mu, lv) = model.latent_params(&mut g, ps, LatentInputs::Posterior { e, s: start.s, a: a0 })?;
    let z = draw(&mut g, mu, lv, LatentMode::Sample, &mut rng)?;
    let first = model.transition_step(&mut g, ps, z, start, a0)?;
    let (mut s, mut c) = (g.value(first.s).clone(), g.value(first.c).clone());

    let mut total = 0.0;
    for t in 1..=k {
        let mut g = Graph::inference();
        let prev = Recurrent { s: g.constant(s), c: g.constant(c) };
        let a = g.constant(act_at(t - 1)?);
        let imagined = open_loop_generate(&mut g, model, ps, prev, &[a], LatentMode::Sample, &mut rng)?;
        let next = imagined.states[0];
        let target = g.constant(obs_at(t)?);
        let nll = model.decode_nll_rows(&mut g, ps, next.s, imagined.latents[0], target)?;
        total -= g.value(nll).data().iter().sum::<f64>();
        s = g.value(next.s).clone();
        c = g.value(next.c).clone();
    }
    Ok(total / (n * k) as f64)
}
