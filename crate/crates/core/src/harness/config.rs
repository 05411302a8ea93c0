//! Flat `key = value` run configuration with dotted namespaces.
//!
//! Precedence, lowest first: defaults, config file, `NSRENORM_*` environment
//! variables, command-line flags. An environment variable names a key in upper
//! case with `__` for each dot: `NSRENORM_FORCING__KIND=steady` sets `forcing.kind`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::certificate::{parse_key_values, RMode};
use crate::error::{Error, Result};
use crate::forcing::ForcingKind;

pub const ENV_PREFIX: &str = "NSRENORM_";

/// Viscosity, either absolute or as a multiple of the certificate's `ν_min`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NuSpec {
    Value(f64),
    /// `nu_min:<factor>`.
    NuMinFactor(f64),
}

impl NuSpec {
    pub fn resolve(&self, nu_min: f64) -> Result<f64> {
        let nu = match *self {
            NuSpec::Value(v) => v,
            NuSpec::NuMinFactor(k) => k * nu_min,
        };
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::param(
                "nu",
                format!("resolves to {nu:e}; nu_min:<k> needs nonzero forcing"),
            ));
        }
        Ok(nu)
    }
}

impl fmt::Display for NuSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NuSpec::Value(v) => write!(f, "{v:e}"),
            NuSpec::NuMinFactor(k) => write!(f, "nu_min:{k:e}"),
        }
    }
}

impl FromStr for NuSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(k) = s.strip_prefix("nu_min:") {
            let k = positive(k, "nu")?;
            return Ok(NuSpec::NuMinFactor(k));
        }
        Ok(NuSpec::Value(positive(s, "nu")?))
    }
}

fn num<T: FromStr>(s: &str, key: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    s.trim()
        .parse()
        .map_err(|e| Error::parse(key.to_string(), format!("`{s}`: {e}")))
}

fn positive(s: &str, key: &str) -> Result<f64> {
    let v: f64 = num(s, key)?;
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::parse(
            key.to_string(),
            format!("must be positive, got `{s}`"),
        ));
    }
    Ok(v)
}

fn nonneg(s: &str, key: &str) -> Result<f64> {
    let v: f64 = num(s, key)?;
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::parse(
            key.to_string(),
            format!("must be nonnegative, got `{s}`"),
        ));
    }
    Ok(v)
}

fn auto_or<T>(s: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Option<T>> {
    if s.trim() == "auto" || s.trim() == "none" {
        Ok(None)
    } else {
        parse(s).map(Some)
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:e}")
}

fn parse_list<T>(s: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(parse)
        .collect()
}

fn fmt_list<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// How `simulate` builds its initial state.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    /// Seeded random field with `‖u0‖_{H,1} = run.u0_fraction · u₊/2`.
    Random,
    /// The `k = (1, 0, 0)` Stokes eigenmode at the same norm.
    Eigenmode,
    /// A snapshot file.
    File(PathBuf),
}

impl fmt::Display for InitialState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialState::Random => f.write_str("random"),
            InitialState::Eigenmode => f.write_str("eigenmode"),
            InitialState::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

impl FromStr for InitialState {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "random" => Ok(InitialState::Random),
            "eigenmode" => Ok(InitialState::Eigenmode),
            other => other
                .strip_prefix("file:")
                .map(|p| InitialState::File(PathBuf::from(p)))
                .ok_or_else(|| {
                    Error::parse(
                        "run.u0",
                        format!("expected random, eigenmode or file:PATH, got `{s}`"),
                    )
                }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub grid_n: usize,
    pub box_l: f64,
    pub nu: NuSpec,
    pub r_mode: RMode,
    /// `None` means `ω = λ₁`.
    pub omega: Option<f64>,
    pub seed: u64,
    pub out_dir: PathBuf,

    pub forcing_kind: ForcingKind,
    pub forcing_amplitude: f64,
    pub forcing_theta: f64,
    pub forcing_t0: f64,
    pub forcing_seed: u64,
    pub forcing_decay: f64,

    pub estimator_samples: usize,
    pub estimator_climb_steps: u32,
    pub estimator_audit_samples: usize,
    pub estimator_rounds: usize,
    pub estimator_dissipativity_samples: usize,

    pub dt: Option<f64>,
    /// `None` means `50/(νλ₁)`.
    pub t_end: Option<f64>,
    pub sample_stride: usize,
    pub checkpoint_stride: Option<usize>,
    pub trajectories: usize,
    pub u0: InitialState,
    pub u0_fraction: f64,
    pub u0_decay: f64,
    /// Norm of `u0` when no certificate provides a radius.
    pub u0_norm: f64,

    pub sweep_nu_grid: Vec<NuSpec>,
    pub sweep_n_grid: Vec<usize>,
    pub sweep_workers: usize,
    pub sweep_simulate: bool,

    pub ou_gamma: f64,
    pub ou_samples: usize,
    pub ou_max_degree: u32,
    pub ou_max_degree_1d: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid_n: 16,
            box_l: std::f64::consts::TAU,
            nu: NuSpec::Value(0.05),
            r_mode: RMode::AutoRHat,
            omega: None,
            seed: 1,
            out_dir: PathBuf::from("out"),
            forcing_kind: ForcingKind::Zero,
            forcing_amplitude: 0.0,
            forcing_theta: 0.5,
            forcing_t0: 0.0,
            forcing_seed: 7,
            forcing_decay: 2.0,
            estimator_samples: 1000,
            estimator_climb_steps: 200,
            estimator_audit_samples: 1000,
            estimator_rounds: 3,
            estimator_dissipativity_samples: 100,
            dt: None,
            t_end: None,
            sample_stride: 1,
            checkpoint_stride: None,
            trajectories: 1,
            u0: InitialState::Random,
            u0_fraction: 1.0,
            u0_decay: 1.5,
            u0_norm: 1.0,
            sweep_nu_grid: Vec::new(),
            sweep_n_grid: Vec::new(),
            sweep_workers: 4,
            sweep_simulate: false,
            ou_gamma: 0.5,
            ou_samples: 1000,
            ou_max_degree: 8,
            ou_max_degree_1d: 20,
        }
    }
}

/// Every key, in file order.
pub const CONFIG_KEYS: &[&str] = &[
    "grid_n",
    "box_l",
    "nu",
    "r_mode",
    "omega_mode",
    "seed",
    "out_dir",
    "forcing.kind",
    "forcing.amplitude",
    "forcing.theta",
    "forcing.t0",
    "forcing.seed",
    "forcing.decay",
    "estimator.samples",
    "estimator.climb_steps",
    "estimator.audit_samples",
    "estimator.rounds",
    "estimator.dissipativity_samples",
    "run.dt",
    "run.t_end",
    "run.sample_stride",
    "run.checkpoint_stride",
    "run.trajectories",
    "run.u0",
    "run.u0_fraction",
    "run.u0_decay",
    "run.u0_norm",
    "sweep.nu_grid",
    "sweep.n_grid",
    "sweep.workers",
    "sweep.simulate",
    "ou.gamma",
    "ou.samples",
    "ou.max_degree",
    "ou.max_degree_1d",
];

impl RunConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "grid_n" => self.grid_n.to_string(),
            "box_l" => fmt_f(self.box_l),
            "nu" => self.nu.to_string(),
            "r_mode" => match self.r_mode {
                RMode::AutoRHat => "auto_r_hat".into(),
                RMode::Manual(r) => format!("manual:{r:e}"),
            },
            "omega_mode" => self
                .omega
                .map_or_else(|| "auto_lambda1".into(), |w| format!("manual:{w:e}")),
            "seed" => self.seed.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "forcing.kind" => self.forcing_kind.to_string(),
            "forcing.amplitude" => fmt_f(self.forcing_amplitude),
            "forcing.theta" => fmt_f(self.forcing_theta),
            "forcing.t0" => fmt_f(self.forcing_t0),
            "forcing.seed" => self.forcing_seed.to_string(),
            "forcing.decay" => fmt_f(self.forcing_decay),
            "estimator.samples" => self.estimator_samples.to_string(),
            "estimator.climb_steps" => self.estimator_climb_steps.to_string(),
            "estimator.audit_samples" => self.estimator_audit_samples.to_string(),
            "estimator.rounds" => self.estimator_rounds.to_string(),
            "estimator.dissipativity_samples" => self.estimator_dissipativity_samples.to_string(),
            "run.dt" => self.dt.map_or_else(|| "auto".into(), fmt_f),
            "run.t_end" => self.t_end.map_or_else(|| "auto".into(), fmt_f),
            "run.sample_stride" => self.sample_stride.to_string(),
            "run.checkpoint_stride" => self
                .checkpoint_stride
                .map_or_else(|| "none".into(), |k| k.to_string()),
            "run.trajectories" => self.trajectories.to_string(),
            "run.u0" => self.u0.to_string(),
            "run.u0_fraction" => fmt_f(self.u0_fraction),
            "run.u0_decay" => fmt_f(self.u0_decay),
            "run.u0_norm" => fmt_f(self.u0_norm),
            "sweep.nu_grid" => fmt_list(&self.sweep_nu_grid),
            "sweep.n_grid" => fmt_list(&self.sweep_n_grid),
            "sweep.workers" => self.sweep_workers.to_string(),
            "sweep.simulate" => self.sweep_simulate.to_string(),
            "ou.gamma" => fmt_f(self.ou_gamma),
            "ou.samples" => self.ou_samples.to_string(),
            "ou.max_degree" => self.ou_max_degree.to_string(),
            "ou.max_degree_1d" => self.ou_max_degree_1d.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "grid_n" => self.grid_n = num(v, key)?,
            "box_l" => self.box_l = positive(v, key)?,
            "nu" => self.nu = v.parse()?,
            "r_mode" => {
                self.r_mode = match v {
                    "auto_r_hat" | "auto" => RMode::AutoRHat,
                    _ => RMode::Manual(positive(
                        v.strip_prefix("manual:").ok_or_else(|| {
                            Error::parse(
                                key,
                                format!("expected auto_r_hat or manual:<r>, got `{v}`"),
                            )
                        })?,
                        key,
                    )?),
                }
            }
            "omega_mode" => {
                self.omega = match v {
                    "auto_lambda1" | "auto" => None,
                    _ => Some(nonneg(
                        v.strip_prefix("manual:").ok_or_else(|| {
                            Error::parse(
                                key,
                                format!("expected auto_lambda1 or manual:<w>, got `{v}`"),
                            )
                        })?,
                        key,
                    )?),
                }
            }
            "seed" => self.seed = num(v, key)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "forcing.kind" => self.forcing_kind = v.parse()?,
            "forcing.amplitude" => self.forcing_amplitude = nonneg(v, key)?,
            "forcing.theta" => self.forcing_theta = positive(v, key)?,
            "forcing.t0" => self.forcing_t0 = num(v, key)?,
            "forcing.seed" => self.forcing_seed = num(v, key)?,
            "forcing.decay" => self.forcing_decay = nonneg(v, key)?,
            "estimator.samples" => self.estimator_samples = num(v, key)?,
            "estimator.climb_steps" => self.estimator_climb_steps = num(v, key)?,
            "estimator.audit_samples" => self.estimator_audit_samples = num(v, key)?,
            "estimator.rounds" => self.estimator_rounds = num(v, key)?,
            "estimator.dissipativity_samples" => {
                self.estimator_dissipativity_samples = num(v, key)?
            }
            "run.dt" => self.dt = auto_or(v, |s| positive(s, key))?,
            "run.t_end" => self.t_end = auto_or(v, |s| positive(s, key))?,
            "run.sample_stride" => self.sample_stride = num(v, key)?,
            "run.checkpoint_stride" => self.checkpoint_stride = auto_or(v, |s| num(s, key))?,
            "run.trajectories" => self.trajectories = num(v, key)?,
            "run.u0" => self.u0 = v.parse()?,
            "run.u0_fraction" => self.u0_fraction = positive(v, key)?,
            "run.u0_decay" => self.u0_decay = nonneg(v, key)?,
            "run.u0_norm" => self.u0_norm = positive(v, key)?,
            "sweep.nu_grid" => self.sweep_nu_grid = parse_list(v, str::parse)?,
            "sweep.n_grid" => self.sweep_n_grid = parse_list(v, |s| num(s, key))?,
            "sweep.workers" => self.sweep_workers = num(v, key)?,
            "sweep.simulate" => self.sweep_simulate = num(v, key)?,
            "ou.gamma" => self.ou_gamma = positive(v, key)?,
            "ou.samples" => self.ou_samples = num(v, key)?,
            "ou.max_degree" => self.ou_max_degree = num(v, key)?,
            "ou.max_degree_1d" => self.ou_max_degree_1d = num(v, key)?,
            _ => return Err(Error::parse("config", format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Rejects values that parse but cannot run.
    pub fn validate(&self) -> Result<()> {
        if self.grid_n < 2 {
            return Err(Error::param(
                "grid_n",
                format!("must be at least 2, got {}", self.grid_n),
            ));
        }
        for (name, v) in [
            ("estimator.samples", self.estimator_samples),
            ("run.sample_stride", self.sample_stride),
            ("run.trajectories", self.trajectories),
            ("sweep.workers", self.sweep_workers),
        ] {
            if v == 0 {
                return Err(Error::param(name, "must be at least 1"));
            }
        }
        if self.forcing_kind == ForcingKind::HolderFamily && !(self.forcing_theta < 1.0) {
            return Err(Error::param(
                "forcing.theta",
                format!("must lie in (0, 1), got {}", self.forcing_theta),
            ));
        }
        if !(self.ou_gamma < 1.0) {
            return Err(Error::param(
                "ou.gamma",
                format!("must lie in (0, 1), got {}", self.ou_gamma),
            ));
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        CONFIG_KEYS
            .iter()
            .map(|k| {
                (
                    k.to_string(),
                    self.get(k).expect("every listed key has a value"),
                )
            })
            .collect()
    }

    /// Config file text, keys in [`CONFIG_KEYS`] order.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| {
                format!(
                    "{k} = {}\n",
                    self.get(k).expect("every listed key has a value")
                )
            })
            .collect()
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_key_values(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.merge_text(text)?;
        Ok(c)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_text(&text)
    }

    /// Applies `NSRENORM_*` variables; unknown names are an error so typos surface.
    pub fn merge_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = rest.to_ascii_lowercase().replace("__", ".");
            self.set(&key, &value)?;
        }
        Ok(())
    }

    /// Environment variable name for `key`.
    pub fn env_name(key: &str) -> String {
        format!(
            "{ENV_PREFIX}{}",
            key.to_ascii_uppercase().replace('.', "__")
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn modified_round_trips() {
        let mut c = RunConfig::default();
        c.set("nu", "nu_min:2").unwrap();
        c.set("r_mode", "manual:0.1").unwrap();
        c.set("omega_mode", "manual:0").unwrap();
        c.set("box_l", "3.3").unwrap();
        c.set("run.dt", "1e-3").unwrap();
        c.set("run.checkpoint_stride", "10").unwrap();
        c.set("run.u0", "file:/tmp/u0.snap").unwrap();
        c.set("sweep.nu_grid", "0.01, nu_min:0.5,nu_min:2").unwrap();
        c.set("sweep.n_grid", "8,16,32").unwrap();
        c.set("forcing.kind", "holder").unwrap();
        let text = c.to_text();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn env_overrides() {
        let mut c = RunConfig::default();
        c.merge_env([
            ("NSRENORM_FORCING__KIND".to_string(), "steady".to_string()),
            ("NSRENORM_GRID_N".to_string(), "8".to_string()),
            ("PATH".to_string(), "/bin".to_string()),
        ])
        .unwrap();
        assert_eq!(c.forcing_kind, ForcingKind::Steady);
        assert_eq!(c.grid_n, 8);
        assert_eq!(
            RunConfig::env_name("estimator.climb_steps"),
            "NSRENORM_ESTIMATOR__CLIMB_STEPS"
        );
        assert!(c
            .merge_env([("NSRENORM_BOGUS".to_string(), "1".to_string())])
            .is_err());
    }

    #[test]
    fn bad_values_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("nu", "-1").is_err());
        assert!(c.set("r_mode", "sometimes").is_err());
        assert!(c.set("grid_size", "3").is_err());
        assert!(NuSpec::NuMinFactor(2.0).resolve(0.0).is_err());
        c.ou_gamma = 1.0;
        assert!(c.validate().is_err());
    }
}
