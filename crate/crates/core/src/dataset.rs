//! Rendered expert trajectory datasets and their binary file format.
//!
//! Layout (little-endian): the ASCII header `CONDYN-TRAJ1`, a `u32`
//! trajectory count, then per trajectory a `u32` step count `T` followed by
//! `(T+1)·obs_len` observation values, `T·action_dim` action values and `T`
//! rewards, all `f64`. The widths are not stored; readers supply them.

use std::fs;
use std::path::Path;

use diffcore::rng::stream;

use crate::envs::{expert_trajectory, reset, EnvSpec, Trajectory};
use crate::error::{Error, Result};

pub const HEADER: &[u8; 12] = b"CONDYN-TRAJ1";

#[derive(Clone, Debug, PartialEq)]
pub struct SsmTrajectory {
    /// `o_0 .. o_T`, each a flattened frame stack.
    pub observations: Vec<Vec<f64>>,
    /// `a_0 .. a_{T-1}` as model-facing features.
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

impl SsmTrajectory {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    pub fn from_trajectory(spec: &EnvSpec, traj: &Trajectory) -> Result<Self> {
        let observations =
            traj.observations.clone().ok_or_else(|| Error::Dataset("trajectory has no rendered observations".into()))?;
        Ok(Self {
            observations,
            actions: traj.actions.iter().map(|a| a.features(spec)).collect(),
            rewards: traj.rewards.clone(),
        })
    }
}

/// `count` scripted-expert episodes from starts drawn on stream `name`.
pub fn generate_expert_dataset(spec: &EnvSpec, count: usize, seed: u64, name: &str) -> Result<Vec<SsmTrajectory>> {
    let mut rng = stream(seed, name, 0);
    (0..count)
        .map(|_| {
            let start = reset(spec, &mut rng);
            SsmTrajectory::from_trajectory(spec, &expert_trajectory(spec, start, 0.99)?)
        })
        .collect()
}

pub fn encode_dataset(trajs: &[SsmTrajectory]) -> Result<Vec<u8>> {
    let mut out = HEADER.to_vec();
    let count = u32::try_from(trajs.len()).map_err(|_| Error::Dataset("too many trajectories".into()))?;
    out.extend(count.to_le_bytes());
    for (i, t) in trajs.iter().enumerate() {
        if t.observations.len() != t.steps() + 1 || t.rewards.len() != t.steps() {
            return Err(Error::Dataset(format!("trajectory {i} has inconsistent lengths")));
        }
        out.extend((t.steps() as u32).to_le_bytes());
        for v in t.observations.iter().chain(&t.actions).flatten().chain(&t.rewards) {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Dataset(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn rows(&mut self, count: usize, width: usize) -> Result<Vec<Vec<f64>>> {
        let bytes = self.take(count.checked_mul(width).and_then(|n| n.checked_mul(8)).unwrap_or(usize::MAX))?;
        let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(values.chunks(width.max(1)).map(<[f64]>::to_vec).take(count).collect())
    }
}

pub fn decode_dataset(bytes: &[u8], obs_len: usize, action_dim: usize) -> Result<Vec<SsmTrajectory>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(HEADER.len())? != HEADER {
        return Err(Error::Dataset("missing CONDYN-TRAJ1 header".into()));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let steps = r.u32()? as usize;
        let observations = r.rows(steps + 1, obs_len)?;
        let actions = r.rows(steps, action_dim)?;
        let rewards = r.rows(steps, 1)?.into_iter().map(|v| v[0]).collect();
        out.push(SsmTrajectory { observations, actions, rewards });
    }
    if r.pos != bytes.len() {
        return Err(Error::Dataset(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save_dataset(trajs: &[SsmTrajectory], path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(trajs)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path, obs_len: usize, action_dim: usize) -> Result<Vec<SsmTrajectory>> {
    decode_dataset(&fs::read(path)?, obs_len, action_dim)
}
