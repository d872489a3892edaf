//! Flat key-value experiment configuration with strict parsing.
//!
//! The format is one `key = value` pair per line, `#` comments, blank lines
//! ignored. Unknown keys are rejected by name: a silent typo in `eta` or
//! `master_seed` would corrupt reproducibility.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// The experiments the harness can dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    StrongError,
    BiasCurve,
    SteinResidual,
    Decompose,
    Clt,
    TailRatio,
    ConcentrationG,
    ConcentrationStationary,
    RemainderTail,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::StrongError => "strong_error",
            ExperimentKind::BiasCurve => "bias_curve",
            ExperimentKind::SteinResidual => "stein_residual",
            ExperimentKind::Decompose => "decompose",
            ExperimentKind::Clt => "clt",
            ExperimentKind::TailRatio => "tail_ratio",
            ExperimentKind::ConcentrationG => "concentration_g",
            ExperimentKind::ConcentrationStationary => "concentration_stationary",
            ExperimentKind::RemainderTail => "remainder_tail",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Ok(match s {
            "strong_error" => ExperimentKind::StrongError,
            "bias_curve" => ExperimentKind::BiasCurve,
            "stein_residual" => ExperimentKind::SteinResidual,
            "decompose" => ExperimentKind::Decompose,
            "clt" => ExperimentKind::Clt,
            "tail_ratio" => ExperimentKind::TailRatio,
            "concentration_g" => ExperimentKind::ConcentrationG,
            "concentration_stationary" => ExperimentKind::ConcentrationStationary,
            "remainder_tail" => ExperimentKind::RemainderTail,
            other => return Err(ConfigError(format!("unknown experiment `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Ou,
    DoubleWell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservableKind {
    Linear,
    Quadratic,
    Tanh,
}

impl ObservableKind {
    pub fn name(&self) -> &'static str {
        match self {
            ObservableKind::Linear => "linear",
            ObservableKind::Quadratic => "quadratic",
            ObservableKind::Tanh => "tanh",
        }
    }
}

/// Fully resolved experiment parameters.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub model: ModelKind,
    /// OU mean-reversion rate
    pub a: f64,
    pub sigma: f64,
    pub observable: ObservableKind,
    pub eta: Option<f64>,
    pub eta_list: Vec<f64>,
    pub n_replicas: usize,
    pub draws: usize,
    pub n_trajectories: usize,
    pub burn_in_constant: f64,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub threads: usize,
    pub t_horizon: f64,
    pub quad_order: usize,
    pub m_override: Option<usize>,
    pub k_list: Vec<usize>,
    pub x_grid: Option<Vec<f64>>,
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_points: usize,
    /// raw key-value pairs, for the manifest snapshot
    pub raw: BTreeMap<String, String>,
}

const KNOWN_KEYS: &[&str] = &[
    "experiment",
    "model",
    "a",
    "sigma",
    "observable",
    "eta",
    "eta_list",
    "n_replicas",
    "draws",
    "n_trajectories",
    "burn_in_constant",
    "master_seed",
    "output_dir",
    "threads",
    "t_horizon",
    "quad_order",
    "m",
    "k_list",
    "x_grid",
    "grid_min",
    "grid_max",
    "grid_points",
];

fn parse_num<T: FromStr>(map: &BTreeMap<String, String>, key: &str, default: T) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse::<T>()
            .map_err(|e| ConfigError(format!("key `{key}`: cannot parse `{v}`: {e}"))),
    }
}

fn parse_list<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    match map.get(key) {
        None => Ok(Vec::new()),
        Some(v) => v
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<T>()
                    .map_err(|e| ConfigError(format!("key `{key}`: cannot parse `{s}`: {e}")))
            })
            .collect(),
    }
}

impl ExperimentConfig {
    /// Parses the flat key-value text, rejecting unknown keys by name.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)))?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(ConfigError(format!("unknown key `{key}` (line {})", lineno + 1)));
            }
            if map.insert(key.clone(), value).is_some() {
                return Err(ConfigError(format!("duplicate key `{key}` (line {})", lineno + 1)));
            }
        }
        ExperimentConfig::from_map(map)
    }

    pub fn from_map(map: BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let experiment = map
            .get("experiment")
            .ok_or_else(|| ConfigError("missing required key `experiment`".into()))?
            .parse::<ExperimentKind>()?;
        let model = match map.get("model").map(String::as_str).unwrap_or("ou") {
            "ou" => ModelKind::Ou,
            "double_well" => ModelKind::DoubleWell,
            other => return Err(ConfigError(format!("unknown model `{other}`"))),
        };
        let observable = match map.get("observable").map(String::as_str).unwrap_or("linear") {
            "linear" => ObservableKind::Linear,
            "quadratic" => ObservableKind::Quadratic,
            "tanh" => ObservableKind::Tanh,
            other => return Err(ConfigError(format!("unknown observable `{other}`"))),
        };
        let eta = match map.get("eta") {
            None => None,
            Some(v) => Some(
                v.parse::<f64>()
                    .map_err(|e| ConfigError(format!("key `eta`: cannot parse `{v}`: {e}")))?,
            ),
        };
        let eta_list: Vec<f64> = parse_list(&map, "eta_list")?;
        if let Some(e) = eta {
            if !(e > 0.0 && e < 1.0) {
                return Err(ConfigError(format!("eta must lie in (0,1), got {e}")));
            }
        }
        for &e in &eta_list {
            if !(e > 0.0 && e < 1.0) {
                return Err(ConfigError(format!("eta_list entry must lie in (0,1), got {e}")));
            }
        }
        let config = ExperimentConfig {
            experiment,
            model,
            a: parse_num(&map, "a", 1.0)?,
            sigma: parse_num(&map, "sigma", 1.0)?,
            observable,
            eta,
            eta_list,
            n_replicas: parse_num(&map, "n_replicas", 1000)?,
            draws: parse_num(&map, "draws", 10_000)?,
            n_trajectories: parse_num(&map, "n_trajectories", 100)?,
            burn_in_constant: parse_num(&map, "burn_in_constant", 20.0)?,
            master_seed: parse_num(&map, "master_seed", 0)?,
            output_dir: PathBuf::from(map.get("output_dir").cloned().unwrap_or_else(|| "out".into())),
            threads: parse_num(&map, "threads", 1)?,
            t_horizon: parse_num(&map, "t_horizon", 1.0)?,
            quad_order: parse_num(&map, "quad_order", 5)?,
            m_override: match map.get("m") {
                None => None,
                Some(v) => Some(
                    v.parse::<usize>()
                        .map_err(|e| ConfigError(format!("key `m`: cannot parse `{v}`: {e}")))?,
                ),
            },
            k_list: parse_list(&map, "k_list")?,
            x_grid: {
                let g: Vec<f64> = parse_list(&map, "x_grid")?;
                if g.is_empty() {
                    None
                } else {
                    Some(g)
                }
            },
            grid_min: parse_num(&map, "grid_min", -3.0)?,
            grid_max: parse_num(&map, "grid_max", 3.0)?,
            grid_points: parse_num(&map, "grid_points", 61)?,
            raw: map,
        };
        if config.threads == 0 {
            return Err(ConfigError("threads must be >= 1".into()));
        }
        if !(config.burn_in_constant > 0.0) {
            return Err(ConfigError("burn_in_constant must be > 0".into()));
        }
        if !(config.sigma != 0.0) {
            return Err(ConfigError("sigma must be nonzero".into()));
        }
        Ok(config)
    }

    /// Step size for single-eta experiments.
    pub fn require_eta(&self) -> Result<f64, ConfigError> {
        self.eta
            .ok_or_else(|| ConfigError(format!("experiment `{}` needs key `eta`", self.experiment.name())))
    }

    /// Step list for multi-eta experiments; a single `eta` is accepted too.
    pub fn require_eta_list(&self) -> Result<Vec<f64>, ConfigError> {
        if !self.eta_list.is_empty() {
            return Ok(self.eta_list.clone());
        }
        match self.eta {
            Some(e) => Ok(vec![e]),
            None => Err(ConfigError(format!(
                "experiment `{}` needs key `eta_list` (or `eta`)",
                self.experiment.name()
            ))),
        }
    }

    /// Applies command-line overrides, keeping the raw snapshot in sync.
    pub fn with_overrides(
        mut self,
        seed: Option<u64>,
        threads: Option<usize>,
        out: Option<PathBuf>,
    ) -> Self {
        if let Some(s) = seed {
            self.master_seed = s;
            self.raw.insert("master_seed".into(), s.to_string());
        }
        if let Some(t) = threads {
            self.threads = t.max(1);
            self.raw.insert("threads".into(), self.threads.to_string());
        }
        if let Some(o) = out {
            self.raw
                .insert("output_dir".into(), o.display().to_string());
            self.output_dir = o;
        }
        self
    }
}
