//! Run configuration: built-in defaults, overridden by a JSON config file,
//! overridden by command-line flags. The resolved value is what gets
//! written to each run's manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use epss_core::io::read_mixture;
use epss_core::model::TrainConfig;
use epss_core::{
    io, parse_schedule, CfgSpec, EpssPreset, Error, GaussianMixture, Method, MlpParams, Result, Schedule,
    SwayCoefficient, VectorField,
};

/// Environment variable naming the default output root.
pub const OUT_ROOT_VAR: &str = "EPSS_OUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `builtin:benchmark`, `builtin:toy`, a mixture JSON or a checkpoint JSON.
    pub field: String,
    /// Training data: `builtin:toy`, `builtin:benchmark`, a mixture JSON or a samples CSV.
    pub data: Option<String>,
    /// Preset name, `uniform:N`, an inline list, or `@file`.
    pub schedule: String,
    pub sway: f64,
    pub method: Method,
    pub cfg: CfgSpec,
    pub label: Option<u32>,
    pub seed: u64,
    pub batch: usize,
    /// Expected field dimension; checked when set.
    pub dim: Option<usize>,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
    pub prune: PruneSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            field: "builtin:benchmark".into(),
            data: None,
            schedule: "nfe7".into(),
            sway: -1.0,
            method: Method::Euler,
            cfg: CfgSpec::disabled(),
            label: None,
            seed: 0,
            batch: 256,
            dim: None,
            out: None,
            train: TrainConfig::default(),
            prune: PruneSection::default(),
            bench: BenchSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub reference: String,
    pub target_nfe: usize,
    pub valset: usize,
    pub exhaustive: bool,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self {
            reference: "nfe32".into(),
            target_nfe: 7,
            valset: 64,
            exhaustive: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub schedules: Vec<String>,
    pub repeats: usize,
    pub warmup: usize,
    /// Schedule used for the endpoint_l2 column; none leaves it empty.
    pub reference: Option<String>,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            schedules: EpssPreset::ALL.iter().map(|p| p.name().to_string()).collect(),
            repeats: 10,
            warmup: 3,
            reference: Some("nfe32".into()),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text).map_err(|e| Error::config("config", format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn sway(&self) -> Result<SwayCoefficient> {
        SwayCoefficient::new(self.sway).map_err(|e| Error::config("sway", e.to_string()))
    }

    /// Output directory: explicit setting, else `$EPSS_OUT_ROOT/<command>`,
    /// else `epss-out/<command>`.
    pub fn out_dir(&self, command: &str) -> PathBuf {
        if let Some(o) = &self.out {
            return o.clone();
        }
        let root = std::env::var_os(OUT_ROOT_VAR)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("epss-out"));
        root.join(command)
    }
}

/// Resolves a schedule spec. Presets and `uniform:N` are warped by `sway`;
/// explicit point lists are used as written.
pub fn resolve_schedule(spec: &str, sway: SwayCoefficient) -> Result<Schedule> {
    let spec = spec.trim();
    if let Some(path) = spec.strip_prefix('@') {
        return parse_schedule(&std::fs::read_to_string(path)?);
    }
    if let Some(n) = spec.strip_prefix("uniform:") {
        let n: usize = n
            .parse()
            .map_err(|_| Error::config("schedule", format!("bad step count in `{spec}`")))?;
        return Schedule::uniform(n)?.sway(sway);
    }
    if spec.starts_with('[') || spec.contains(',') {
        return parse_schedule(spec);
    }
    spec.parse::<EpssPreset>()?.schedule(sway)
}

/// A loaded velocity field.
pub enum Field {
    Mixture(GaussianMixture),
    Network(Box<MlpParams>),
}

impl Field {
    pub fn as_dyn(&self) -> &dyn VectorField {
        match self {
            Field::Mixture(g) => g,
            Field::Network(p) => p.as_ref(),
        }
    }

    pub fn mixture(&self) -> Option<&GaussianMixture> {
        match self {
            Field::Mixture(g) => Some(g),
            Field::Network(_) => None,
        }
    }
}

pub fn builtin_mixture(name: &str) -> Result<GaussianMixture> {
    match name {
        "benchmark" => Ok(GaussianMixture::benchmark()),
        "toy" => Ok(GaussianMixture::toy()),
        _ => Err(Error::NotFound {
            kind: "builtin field",
            name: name.into(),
            valid: "benchmark, toy".into(),
        }),
    }
}

pub fn load_field(spec: &str) -> Result<Field> {
    if let Some(name) = spec.strip_prefix("builtin:") {
        return builtin_mixture(name).map(Field::Mixture);
    }
    let path = Path::new(spec);
    let text = std::fs::read_to_string(path).map_err(|e| Error::config("field", format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::config("field", format!("{}: {e}", path.display())))?;
    if value.get("format").is_some() {
        let (params, _) = io::load_checkpoint(path)?;
        Ok(Field::Network(Box::new(params)))
    } else {
        Ok(Field::Mixture(read_mixture(path)?))
    }
}

pub fn check_dim(config: &RunConfig, field: &dyn VectorField) -> Result<()> {
    match config.dim {
        Some(d) if d != field.dim() => Err(Error::config(
            "dim",
            format!("config says {d}, field has {}", field.dim()),
        )),
        _ => Ok(()),
    }
}
