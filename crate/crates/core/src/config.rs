//! Run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::SelectionParams;
use crate::explain::RansacParams;
use crate::geometry::RESIDUAL_CLAMP;

/// Which tapped layer to explain at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerChoice {
    /// Pick the tap with the best ρ_res on a sample of train pairs.
    Auto,
    /// The model's declared default tap (or its middle tap).
    #[default]
    Default,
    Index(usize),
}

impl std::str::FromStr for LayerChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "auto" => Ok(LayerChoice::Auto),
            "default" => Ok(LayerChoice::Default),
            other => other.parse().map(LayerChoice::Index).map_err(|_| {
                Error::InvalidArgument(format!(
                    "layer must be a layer index, \"auto\" or \"default\", got {other:?}"
                ))
            }),
        }
    }
}

impl std::fmt::Display for LayerChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerChoice::Auto => f.write_str("auto"),
            LayerChoice::Default => f.write_str("default"),
            LayerChoice::Index(i) => write!(f, "{i}"),
        }
    }
}

impl Serialize for LayerChoice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LayerChoice::Index(i) => s.serialize_u64(*i as u64),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for LayerChoice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(usize),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(i) => Ok(LayerChoice::Index(i)),
            Raw::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model_path: Option<PathBuf>,
    pub layer: LayerChoice,
    pub n_matches: usize,
    pub correspondence_path: Option<PathBuf>,
    pub manifest_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub rng_seed: u64,
    /// Worker threads; `None` uses the machine's parallelism.
    pub thread_count: Option<usize>,
    /// S₁ reported when the summed residual is zero.
    pub metric_clamp: f64,
    pub ransac: RansacParams,
    pub selection: SelectionParams,
    /// Train pairs per class sampled for layer selection.
    pub layer_sample: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model_path: None,
            layer: LayerChoice::Default,
            n_matches: 20,
            correspondence_path: None,
            manifest_path: None,
            output_dir: PathBuf::from("."),
            rng_seed: 0,
            thread_count: None,
            metric_clamp: RESIDUAL_CLAMP,
            ransac: RansacParams::default(),
            selection: SelectionParams::default(),
            layer_sample: 250,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file. Relative paths inside it are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut cfg.model_path, &mut cfg.correspondence_path, &mut cfg.manifest_path]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut cfg.output_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_matches == 0 {
            return Err(Error::InvalidArgument("n_matches must be at least 1".into()));
        }
        if !(self.ransac.threshold > 0.0) || self.ransac.max_iters == 0 {
            return Err(Error::InvalidArgument(format!(
                "ransac threshold {} / max_iters {} must be positive",
                self.ransac.threshold, self.ransac.max_iters
            )));
        }
        if self.thread_count == Some(0) {
            return Err(Error::InvalidArgument("thread count must be at least 1".into()));
        }
        if !(self.metric_clamp > 0.0) {
            return Err(Error::InvalidArgument("metric_clamp must be positive".into()));
        }
        if self.layer_sample == 0 || self.selection.target == 0 {
            return Err(Error::InvalidArgument("pair sample sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn model_path(&self) -> Result<&Path> {
        self.model_path
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("a model path is required".into()))
    }

    /// The configuration as recorded in reports. Thread count and output
    /// directory are left out: they do not affect results, and leaving them
    /// out keeps reports byte-identical across machines and runs.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("thread_count");
            map.remove("output_dir");
        }
        v
    }
}
