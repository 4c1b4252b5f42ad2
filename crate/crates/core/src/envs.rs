//! Analytic control tasks, a grid-frame renderer and scripted experts.
//!
//! State vectors:
//! - `PointMass2D`: `[px, py, vx, vy, gx, gy]`
//! - `PendulumSwingUp`: `[theta, theta_dot]`, `theta = 0` upright
//! - `DiscreteGridNav`: `[agent_x, agent_y, goal_x, goal_y]` on a 5×5 grid
//!
//! Every step function is pure: the same state and action always produce
//! bit-identical output.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};

pub const FRAME: usize = 16;
pub const STACK: usize = 4;
pub const OBS_LEN: usize = STACK * FRAME * FRAME;
pub const GRID: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvKind {
    PointMass2D,
    PendulumSwingUp,
    DiscreteGridNav,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionKind {
    /// Box `[-1, 1]^d`.
    Continuous(usize),
    /// `n` discrete choices.
    Discrete(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub name: &'static str,
    pub state_dim: usize,
    pub action: ActionKind,
    pub horizon: usize,
    pub dt: f64,
}

impl EnvSpec {
    pub fn point_mass() -> Self {
        Self {
            kind: EnvKind::PointMass2D,
            name: "PointMass2D",
            state_dim: 6,
            action: ActionKind::Continuous(2),
            horizon: 50,
            dt: 0.05,
        }
    }

    pub fn pendulum() -> Self {
        Self {
            kind: EnvKind::PendulumSwingUp,
            name: "PendulumSwingUp",
            state_dim: 2,
            action: ActionKind::Continuous(1),
            horizon: 100,
            dt: 0.05,
        }
    }

    pub fn grid_nav() -> Self {
        Self {
            kind: EnvKind::DiscreteGridNav,
            name: "DiscreteGridNav",
            state_dim: 4,
            action: ActionKind::Discrete(4),
            horizon: 30,
            dt: 1.0,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "PointMass2D" => Ok(Self::point_mass()),
            "PendulumSwingUp" => Ok(Self::pendulum()),
            "DiscreteGridNav" => Ok(Self::grid_nav()),
            other => Err(Error::Config(format!("unknown environment `{other}`"))),
        }
    }

    /// Width of the action as fed to models: the box dimension, or the
    /// number of choices for one-hot encoded discrete actions.
    pub fn action_dim(&self) -> usize {
        match self.action {
            ActionKind::Continuous(d) | ActionKind::Discrete(d) => d,
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self.action, ActionKind::Continuous(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Continuous(Vec<f64>),
    Discrete(usize),
}

impl Action {
    /// Model-facing features: the clipped box action, or a one-hot vector.
    pub fn features(&self, spec: &EnvSpec) -> Vec<f64> {
        match self {
            Action::Continuous(a) => a.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
            Action::Discrete(i) => {
                let mut v = vec![0.0; spec.action_dim()];
                v[*i] = 1.0;
                v
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub values: Vec<f64>,
    /// Steps taken since reset.
    pub t: usize,
}

impl EnvState {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, t: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
}

/// Closed-loop record of one episode or segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub start: EnvState,
    /// `s_1 .. s_T`
    pub states: Vec<EnvState>,
    /// Stacked frames `o_0 .. o_T`, when rendered.
    pub observations: Option<Vec<Vec<f64>>>,
    /// `a_0 .. a_{T-1}`
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub gamma: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// `s_0 .. s_T`
    pub fn all_states(&self) -> impl Iterator<Item = &EnvState> {
        std::iter::once(&self.start).chain(&self.states)
    }

    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn discounted_return(&self) -> f64 {
        discounted_sum(&self.rewards, self.gamma)
    }
}

/// Wrap an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let w = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

fn continuous(spec: &EnvSpec, action: &Action) -> Result<Vec<f64>> {
    match (spec.action, action) {
        (ActionKind::Continuous(d), Action::Continuous(a)) if a.len() == d => {
            Ok(a.iter().map(|v| v.clamp(-1.0, 1.0)).collect())
        }
        _ => Err(Error::Config(format!("{} expects a continuous action, got {action:?}", spec.name))),
    }
}

pub fn env_step(spec: &EnvSpec, state: &EnvState, action: &Action) -> Result<Step> {
    let s = &state.values;
    if s.len() != spec.state_dim {
        return Err(Error::Config(format!("{} state must have {} values", spec.name, spec.state_dim)));
    }
    let t = state.t + 1;
    let (values, reward, terminal) = match spec.kind {
        EnvKind::PointMass2D => {
            let a = continuous(spec, action)?;
            let dt = spec.dt;
            let v = [s[2] + dt * a[0], s[3] + dt * a[1]];
            let p = [s[0] + dt * v[0], s[1] + dt * v[1]];
            let dist2 = (p[0] - s[4]).powi(2) + (p[1] - s[5]).powi(2);
            let reward = -dist2 - 0.01 * (a[0] * a[0] + a[1] * a[1]);
            (vec![p[0], p[1], v[0], v[1], s[4], s[5]], reward, false)
        }
        EnvKind::PendulumSwingUp => {
            let a = continuous(spec, action)?[0];
            let (g, m, l) = (10.0, 1.0, 1.0);
            let torque = 2.0 * a;
            let acc = 3.0 * g / (2.0 * l) * s[0].sin() + 3.0 / (m * l * l) * torque;
            let omega = (s[1] + spec.dt * acc).clamp(-8.0, 8.0);
            let theta = wrap_angle(s[0] + spec.dt * omega);
            let reward = -(theta * theta + 0.1 * omega * omega + 0.001 * a * a);
            (vec![theta, omega], reward, false)
        }
        EnvKind::DiscreteGridNav => {
            let Action::Discrete(i) = *action else {
                return Err(Error::Config(format!("{} expects a discrete action", spec.name)));
            };
            let max = (GRID - 1) as f64;
            let (mut x, mut y) = (s[0], s[1]);
            match i {
                0 => x = (x + 1.0).min(max),
                1 => x = (x - 1.0).max(0.0),
                2 => y = (y + 1.0).min(max),
                3 => y = (y - 1.0).max(0.0),
                _ => return Err(Error::Config(format!("grid action {i} out of range"))),
            }
            let reached = x == s[2] && y == s[3];
            (vec![x, y, s[2], s[3]], if reached { 1.0 } else { -0.01 }, reached)
        }
    };
    Ok(Step { state: EnvState { values, t }, reward, done: terminal || t >= spec.horizon })
}

/// Initial state distribution: positions and goals uniform in `[-1, 1]²`
/// with zero velocity; pendulum angle uniform, angular velocity in
/// `[-1, 1]`; grid agent and goal on distinct uniform cells.
pub fn reset<R: Rng>(spec: &EnvSpec, rng: &mut R) -> EnvState {
    let values = match spec.kind {
        EnvKind::PointMass2D => {
            let mut u = || rng.random_range(-1.0..=1.0);
            let (px, py, gx, gy) = (u(), u(), u(), u());
            vec![px, py, 0.0, 0.0, gx, gy]
        }
        EnvKind::PendulumSwingUp => {
            vec![wrap_angle(rng.random_range(-PI..PI)), rng.random_range(-1.0..=1.0)]
        }
        EnvKind::DiscreteGridNav => loop {
            let cells: Vec<f64> = (0..4).map(|_| rng.random_range(0..GRID) as f64).collect();
            if cells[0] != cells[2] || cells[1] != cells[3] {
                break cells;
            }
        },
    };
    EnvState::new(values)
}

pub fn discounted_return(rewards: &[f64], gamma: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!("discount {gamma} outside [0, 1)")));
    }
    Ok(discounted_sum(rewards, gamma))
}

fn discounted_sum(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

/// Arena coordinate to pixel index.
pub fn pixel_index(coord: f64) -> usize {
    let raw = ((coord + 1.5) / 3.0 * FRAME as f64).floor();
    raw.clamp(0.0, (FRAME - 1) as f64) as usize
}

fn grid_pixel(cell: f64) -> usize {
    (((cell + 0.5) / GRID as f64) * FRAME as f64).floor().clamp(0.0, (FRAME - 1) as f64) as usize
}

/// Single 16×16 frame, row-major with the row index taken from the y
/// coordinate: goal cell 0.5, then the agent cell 1.0 on top.
pub fn render_frame(spec: &EnvSpec, state: &EnvState) -> Vec<f64> {
    let mut frame = vec![0.0; FRAME * FRAME];
    let s = &state.values;
    let mut put = |x: usize, y: usize, v: f64| frame[y * FRAME + x] = v;
    match spec.kind {
        EnvKind::PointMass2D => {
            put(pixel_index(s[4]), pixel_index(s[5]), 0.5);
            put(pixel_index(s[0]), pixel_index(s[1]), 1.0);
        }
        EnvKind::PendulumSwingUp => put(pixel_index(s[0].sin()), pixel_index(s[0].cos()), 1.0),
        EnvKind::DiscreteGridNav => {
            put(grid_pixel(s[2]), grid_pixel(s[3]), 0.5);
            put(grid_pixel(s[0]), grid_pixel(s[1]), 1.0);
        }
    }
    frame
}

/// Stack of the latest four frames, oldest first. Missing history is filled
/// by repeating the oldest available frame. Panics on an empty history.
pub fn render_observation(spec: &EnvSpec, history: &[EnvState]) -> Vec<f64> {
    assert!(!history.is_empty(), "render_observation needs at least one state");
    let start = history.len().saturating_sub(STACK);
    let recent = &history[start..];
    let pad = STACK - recent.len();
    let mut obs = Vec::with_capacity(OBS_LEN);
    for i in 0..STACK {
        let state = if i < pad { &recent[0] } else { &recent[i - pad] };
        obs.extend(render_frame(spec, state));
    }
    obs
}

/// Scripted controller for the continuous tasks.
pub fn expert_action(spec: &EnvSpec, state: &EnvState) -> Result<Action> {
    let s = &state.values;
    match spec.kind {
        EnvKind::PointMass2D => {
            let a = (0..2).map(|i| (2.0 * (s[4 + i] - s[i]) - 1.0 * s[2 + i]).clamp(-1.0, 1.0)).collect();
            Ok(Action::Continuous(a))
        }
        EnvKind::PendulumSwingUp => {
            let (theta, omega) = (s[0], s[1]);
            let a = if theta.abs() < 0.6 {
                -4.0 * theta - 1.0 * omega
            } else {
                // Pump energy towards the upright level (zero), kicking off
                // the resting state.
                let energy = omega * omega / 6.0 + 5.0 * (theta.cos() - 1.0);
                if omega.abs() < 0.1 {
                    1.0
                } else {
                    -2.0 * energy * omega
                }
            };
            Ok(Action::Continuous(vec![a.clamp(-1.0, 1.0)]))
        }
        EnvKind::DiscreteGridNav => Err(Error::Unsupported { env: spec.name, what: "scripted experts" }),
    }
}

/// Episode driven by the scripted expert, with rendered observations.
pub fn expert_trajectory(spec: &EnvSpec, start: EnvState, gamma: f64) -> Result<Trajectory> {
    let mut history = vec![start.clone()];
    let mut observations = vec![render_observation(spec, &history)];
    let (mut actions, mut rewards, mut states) = (Vec::new(), Vec::new(), Vec::new());
    let mut state = start.clone();
    for _ in 0..spec.horizon {
        let a = expert_action(spec, &state)?;
        let step = env_step(spec, &state, &a)?;
        history.push(step.state.clone());
        observations.push(render_observation(spec, &history));
        actions.push(a);
        rewards.push(step.reward);
        states.push(step.state.clone());
        state = step.state;
        if step.done {
            break;
        }
    }
    Ok(Trajectory { start, states, observations: Some(observations), actions, rewards, gamma })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm(p: [f64; 2], v: [f64; 2], g: [f64; 2]) -> EnvState {
        EnvState::new(vec![p[0], p[1], v[0], v[1], g[0], g[1]])
    }

    #[test]
    fn point_mass_step() {
        let spec = EnvSpec::point_mass();
        let out = env_step(&spec, &pm([0.0, 0.0], [0.0, 0.0], [1.0, 1.0]), &Action::Continuous(vec![1.0, 0.0])).unwrap();
        assert!((out.state.values[2] - 0.05).abs() < 1e-15);
        assert!((out.state.values[0] - 0.0025).abs() < 1e-15);
        let expected = -((0.0025f64 - 1.0).powi(2) + 1.0) - 0.01;
        assert!((out.reward - expected).abs() < 1e-12);
        assert!((out.reward + 2.005006).abs() < 1e-6);
    }

    #[test]
    fn continuous_actions_are_clipped() {
        let spec = EnvSpec::point_mass();
        let s = pm([0.0, 0.0], [0.0, 0.0], [1.0, 1.0]);
        let a = env_step(&spec, &s, &Action::Continuous(vec![5.0, -3.0])).unwrap();
        let b = env_step(&spec, &s, &Action::Continuous(vec![1.0, -1.0])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn point_mass_done_at_horizon() {
        let spec = EnvSpec::point_mass();
        let mut s = pm([0.0, 0.0], [0.0, 0.0], [1.0, 1.0]);
        for t in 1..=50 {
            let step = env_step(&spec, &s, &Action::Continuous(vec![0.0, 0.0])).unwrap();
            assert_eq!(step.done, t == 50);
            s = step.state;
        }
    }

    #[test]
    fn pendulum_equilibrium_and_fall() {
        let spec = EnvSpec::pendulum();
        let out = env_step(&spec, &EnvState::new(vec![0.0, 0.0]), &Action::Continuous(vec![0.0])).unwrap();
        assert_eq!(out.state.values, vec![0.0, 0.0]);
        assert_eq!(out.reward, 0.0);
        let out = env_step(&spec, &EnvState::new(vec![PI / 2.0, 0.0]), &Action::Continuous(vec![0.0])).unwrap();
        assert!((out.state.values[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn wrap_stays_in_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        for i in -100..100 {
            let w = wrap_angle(i as f64 * 0.37);
            assert!(w > -PI && w <= PI);
        }
    }

    #[test]
    fn grid_moves_clamp_and_terminate() {
        let spec = EnvSpec::grid_nav();
        let s = EnvState::new(vec![0.0, 0.0, 1.0, 0.0]);
        let wall = env_step(&spec, &s, &Action::Discrete(1)).unwrap();
        assert_eq!(wall.state.values[..2], [0.0, 0.0]);
        assert_eq!(wall.reward, -0.01);
        assert!(!wall.done);
        let goal = env_step(&spec, &s, &Action::Discrete(0)).unwrap();
        assert_eq!(goal.reward, 1.0);
        assert!(goal.done);
        assert!(env_step(&spec, &s, &Action::Continuous(vec![0.0])).is_err());
    }

    #[test]
    fn unknown_environment_is_config_error() {
        assert!(matches!(EnvSpec::by_name("Ant"), Err(Error::Config(_))));
    }

    #[test]
    fn discounted_returns() {
        assert!((discounted_return(&[1.0, 1.0, 1.0], 0.5).unwrap() - 1.75).abs() < 1e-15);
        assert_eq!(discounted_return(&[3.0, 9.0], 0.0).unwrap(), 3.0);
        assert_eq!(discounted_return(&[], 0.9).unwrap(), 0.0);
        assert!(discounted_return(&[1.0], 1.0).is_err());
        assert!(discounted_return(&[1.0], -0.1).is_err());
    }

    #[test]
    fn render_cells() {
        let spec = EnvSpec::point_mass();
        let f = render_frame(&spec, &pm([0.0, 0.0], [0.0, 0.0], [1.0, 1.0]));
        assert_eq!(f[8 * FRAME + 8], 1.0);
        assert_eq!(f[13 * FRAME + 13], 0.5);
        let f = render_frame(&spec, &pm([10.0, 10.0], [0.0, 0.0], [1.0, 1.0]));
        assert_eq!(f[15 * FRAME + 15], 1.0);
        assert!(f.iter().all(|&v| v == 0.0 || v == 0.5 || v == 1.0));
    }

    #[test]
    fn observation_pads_by_repeating_oldest_frame() {
        let spec = EnvSpec::point_mass();
        let a = pm([0.0, 0.0], [0.0, 0.0], [1.0, 1.0]);
        let b = pm([0.5, 0.0], [0.0, 0.0], [1.0, 1.0]);
        let obs = render_observation(&spec, &[a.clone(), b.clone()]);
        assert_eq!(obs.len(), OBS_LEN);
        let fa = render_frame(&spec, &a);
        let fb = render_frame(&spec, &b);
        let frames: Vec<&[f64]> = obs.chunks(FRAME * FRAME).collect();
        assert_eq!(frames, vec![&fa[..], &fa[..], &fa[..], &fb[..]]);
    }

    #[test]
    fn experts() {
        let spec = EnvSpec::point_mass();
        let at_goal = expert_action(&spec, &pm([0.3, 0.3], [0.0, 0.0], [0.3, 0.3])).unwrap();
        assert_eq!(at_goal, Action::Continuous(vec![0.0, 0.0]));
        let far = expert_action(&spec, &pm([0.0, 0.0], [0.0, 0.0], [1.0, 1.0])).unwrap();
        assert_eq!(far, Action::Continuous(vec![1.0, 1.0]));
        let pend = expert_action(&EnvSpec::pendulum(), &EnvState::new(vec![0.0, 0.0])).unwrap();
        assert_eq!(pend, Action::Continuous(vec![0.0]));
        assert!(matches!(
            expert_action(&EnvSpec::grid_nav(), &EnvState::new(vec![0.0; 4])),
            Err(Error::Unsupported { .. })
        ));
    }

    #[test]
    fn point_mass_expert_reaches_goal_from_grid_of_starts() {
        // Goal at the arena centre; success means the distance drops below
        // 0.1 at some step of the 50-step episode.
        let spec = EnvSpec::point_mass();
        for i in 0..10 {
            for j in 0..10 {
                let p = [-1.0 + 2.0 * i as f64 / 9.0, -1.0 + 2.0 * j as f64 / 9.0];
                let traj = expert_trajectory(&spec, pm(p, [0.0, 0.0], [0.0, 0.0]), 0.99).unwrap();
                assert_eq!(traj.len(), 50);
                let closest = traj
                    .states
                    .iter()
                    .map(|s| s.values[0].hypot(s.values[1]))
                    .fold(f64::INFINITY, f64::min);
                assert!(closest < 0.1, "start {p:?}: closest approach {closest}");
            }
        }
    }
}
