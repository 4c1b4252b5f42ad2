//! Run configuration: flat `key = value` lines with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::consistency::EncoderMode;
use crate::envs::EnvSpec;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pathway {
    Obs,
    Ssm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env: String,
    pub pathway: Pathway,
    pub alpha: f64,
    /// Open-loop unroll length.
    pub k: usize,
    /// Episode length (obs) or training segment length (ssm).
    pub horizon: usize,
    pub gamma: f64,
    pub seed: u64,
    pub updates: usize,
    /// Episodes (obs) or segments (ssm) per update.
    pub batch_size: usize,
    pub lr_policy: f64,
    pub lr_model: f64,
    pub lr_encoder: f64,
    pub encoder_mode: EncoderMode,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub eval_every: usize,
    pub out_dir: PathBuf,
    /// Leave the consistency term out of the objective entirely (it is still
    /// computed for logging).
    pub baseline: bool,
    /// Choose open-loop actions from the policy on imagined states instead
    /// of replaying the recorded ones.
    pub open_loop_policy_actions: bool,
    pub record_wallclock: bool,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
    pub dataset: Option<PathBuf>,
    pub eval_dataset: Option<PathBuf>,
    pub expert_trajectories: usize,
    pub eval_trajectories: usize,
}

const KEYS: &[&str] = &[
    "env",
    "pathway",
    "alpha",
    "k",
    "horizon",
    "gamma",
    "seed",
    "updates",
    "batch_size",
    "lr_policy",
    "lr_model",
    "lr_encoder",
    "encoder_mode",
    "entropy_coef",
    "value_coef",
    "eval_every",
    "out_dir",
    "baseline",
    "open_loop_policy_actions",
    "record_wallclock",
    "max_grad_norm",
    "dataset",
    "eval_dataset",
    "expert_trajectories",
    "eval_trajectories",
];

struct Entries(BTreeMap<String, (String, usize)>);

impl Entries {
    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        let Some((raw, line)) = self.0.get(key) else { return Ok(None) };
        raw.parse().map(Some).map_err(|_| Error::ConfigLine {
            line: *line,
            message: format!("invalid value `{raw}` for `{key}`"),
        })
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn line(&self, key: &str) -> usize {
        self.0.get(key).map_or(0, |(_, l)| *l)
    }

    fn invalid(&self, key: &str, message: String) -> Error {
        match self.line(key) {
            0 => Error::Config(message),
            line => Error::ConfigLine { line, message },
        }
    }
}

impl FromStr for Pathway {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "obs" => Ok(Pathway::Obs),
            "ssm" => Ok(Pathway::Ssm),
            _ => Err(()),
        }
    }
}

impl FromStr for EncoderMode {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "trained" => Ok(EncoderMode::Trained),
            "frozen" => Ok(EncoderMode::Frozen),
            _ => Err(()),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::parse("").expect("defaults are valid")
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::ConfigLine { line, message: format!("expected `key = value`, got `{content}`") });
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::ConfigLine { line, message: format!("unknown key `{key}`") });
            }
            if map.insert(key.to_string(), (value.to_string(), line)).is_some() {
                return Err(Error::ConfigLine { line, message: format!("duplicate key `{key}`") });
            }
        }
        let e = Entries(map);
        let env: String = e.or("env", "PointMass2D".to_string())?;
        let spec = EnvSpec::by_name(&env).map_err(|err| e.invalid("env", err.to_string()))?;
        let pathway = e.or("pathway", Pathway::Obs)?;
        let (k_default, horizon_default, updates_default) = match pathway {
            Pathway::Obs => (20, spec.horizon, 1000),
            Pathway::Ssm => (10, 10, 500),
        };
        let optional_path = |key: &str| -> Result<Option<PathBuf>> {
            Ok(e.get::<String>(key)?.filter(|s| !s.is_empty()).map(PathBuf::from))
        };
        let config = RunConfig {
            pathway,
            alpha: e.or("alpha", 0.5)?,
            k: e.or("k", k_default)?,
            horizon: e.or("horizon", horizon_default)?,
            gamma: e.or("gamma", 0.99)?,
            seed: e.or("seed", 0)?,
            updates: e.or("updates", updates_default)?,
            batch_size: e.or("batch_size", 8)?,
            lr_policy: e.or("lr_policy", 3e-4)?,
            lr_model: e.or("lr_model", 1e-3)?,
            lr_encoder: e.or("lr_encoder", 1e-3)?,
            encoder_mode: e.or("encoder_mode", EncoderMode::Trained)?,
            entropy_coef: e.or("entropy_coef", 0.01)?,
            value_coef: e.or("value_coef", 0.5)?,
            eval_every: e.or("eval_every", 50)?,
            out_dir: PathBuf::from(e.or("out_dir", "runs/default".to_string())?),
            baseline: e.or("baseline", false)?,
            open_loop_policy_actions: e.or("open_loop_policy_actions", false)?,
            record_wallclock: e.or("record_wallclock", false)?,
            max_grad_norm: e.or("max_grad_norm", 0.0)?,
            dataset: optional_path("dataset")?,
            eval_dataset: optional_path("eval_dataset")?,
            expert_trajectories: e.or("expert_trajectories", 200)?,
            eval_trajectories: e.or("eval_trajectories", 20)?,
            env,
        };
        config.validate().map_err(|(key, msg)| e.invalid(key, msg))?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|err| Error::Config(format!("cannot read {}: {err}", path.display())))?;
        Self::parse(&text)
    }

    fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        let positive = [
            ("k", self.k),
            ("horizon", self.horizon),
            ("updates", self.updates),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err((key, format!("`{key}` must be >= 1")));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(("alpha", format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(("gamma", format!("gamma must be in [0, 1), got {}", self.gamma)));
        }
        for (key, v) in [
            ("lr_policy", self.lr_policy),
            ("lr_model", self.lr_model),
            ("lr_encoder", self.lr_encoder),
            ("entropy_coef", self.entropy_coef),
            ("value_coef", self.value_coef),
            ("max_grad_norm", self.max_grad_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err((key, format!("`{key}` must be a finite value >= 0")));
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> EnvSpec {
        EnvSpec::by_name(&self.env).expect("validated at parse time")
    }

    /// Canonical text form; parsing it yields an identical config.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut out = String::new();
        let mut put = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
        put("env", self.env.clone());
        put("pathway", match self.pathway { Pathway::Obs => "obs", Pathway::Ssm => "ssm" }.into());
        put("alpha", self.alpha.to_string());
        put("k", self.k.to_string());
        put("horizon", self.horizon.to_string());
        put("gamma", self.gamma.to_string());
        put("seed", self.seed.to_string());
        put("updates", self.updates.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr_policy", self.lr_policy.to_string());
        put("lr_model", self.lr_model.to_string());
        put("lr_encoder", self.lr_encoder.to_string());
        put("encoder_mode", match self.encoder_mode { EncoderMode::Trained => "trained", EncoderMode::Frozen => "frozen" }.into());
        put("entropy_coef", self.entropy_coef.to_string());
        put("value_coef", self.value_coef.to_string());
        put("eval_every", self.eval_every.to_string());
        put("out_dir", self.out_dir.display().to_string());
        put("baseline", self.baseline.to_string());
        put("open_loop_policy_actions", self.open_loop_policy_actions.to_string());
        put("record_wallclock", self.record_wallclock.to_string());
        put("max_grad_norm", self.max_grad_norm.to_string());
        put("dataset", path(&self.dataset));
        put("eval_dataset", path(&self.eval_dataset));
        put("expert_trajectories", self.expert_trajectories.to_string());
        put("eval_trajectories", self.eval_trajectories.to_string());
        out
    }
}
