//! TOML run configuration.
//!
//! ```toml
//! [scene]
//! n_row = 30
//! seed = 1
//!
//! [chain]
//! n_mc = 800
//! n_bi = 600
//!
//! [unmix]
//! method = "grca"
//! etas = [1.0, 2.0, 3.0]
//!
//! [paths]
//! scene_dir = "scene"
//! estimate_dir = "estimates"
//! report_dir = "report"
//!
//! [thresholds]
//! max_rnmse = 0.05
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::Baseline;
use crate::error::{Error, Result};
use crate::estimators::DEFAULT_ETA;
use crate::sampler::ChainConfig;
use crate::synth::SceneSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Generate,
    Unmix,
    Evaluate,
    Detect,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generate" => Ok(Mode::Generate),
            "unmix" => Ok(Mode::Unmix),
            "evaluate" => Ok(Mode::Evaluate),
            "detect" => Ok(Mode::Detect),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

/// Estimation method used by `unmix`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The MCMC sampler; the sign mode comes from `[chain]`.
    #[default]
    Grca,
    Ncls,
    Fcls,
    Nm,
}

impl Method {
    pub fn baseline(self) -> Option<Baseline> {
        match self {
            Method::Grca => None,
            Method::Ncls => Some(Baseline::Ncls),
            Method::Fcls => Some(Baseline::Fcls),
            Method::Nm => Some(Baseline::Nm),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnmixConfig {
    pub method: Method,
    /// Detection thresholds; a probability map is written for each, and the
    /// decision map uses the first.
    pub etas: Vec<f64>,
    pub a0: f64,
    pub a1: f64,
}

impl Default for UnmixConfig {
    fn default() -> Self {
        Self {
            method: Method::Grca,
            etas: vec![DEFAULT_ETA],
            a0: 1.0,
            a1: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Written by `generate`; read by `unmix` (cube, endmembers) and `evaluate` (truth).
    pub scene_dir: PathBuf,
    /// Written by `unmix` and `detect`; read by `evaluate` and `detect`.
    pub estimate_dir: PathBuf,
    /// Written by `evaluate`.
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            scene_dir: "scene".into(),
            estimate_dir: "estimates".into(),
            report_dir: "report".into(),
        }
    }
}

/// Limits checked by `evaluate`; unset limits are not checked.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub max_rnmse: Option<f64>,
    pub max_rnmse_per_class: Option<f64>,
    /// `[lo, hi]` bounds on `RE_k / sigma` for every class.
    pub re_over_sigma: Option<[f64; 2]>,
    pub max_p_fa: Option<f64>,
    pub min_p_d: Option<f64>,
}

/// Hash and seed of the config that produced a set of outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    pub scene: SceneSpec,
    pub chain: ChainConfig,
    pub unmix: UnmixConfig,
    pub paths: PathsConfig,
    pub thresholds: Thresholds,
    /// Filled in on written manifests; ignored when hashing.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<Manifest>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Load a config and resolve relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.scene_dir, &mut cfg.paths.estimate_dir, &mut cfg.paths.report_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }

    /// Override both the scene and the chain seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.scene.seed = seed;
        self.chain.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.chain.validate()?;
        if self.unmix.etas.is_empty() || self.unmix.etas.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Config(format!("unmix.etas must be positive and non-empty, got {:?}", self.unmix.etas)));
        }
        if !(self.unmix.a0 > 0.0 && self.unmix.a1 > 0.0) {
            return Err(Error::Config("unmix.a0 and unmix.a1 must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form, without the manifest table.
    pub fn hash(&self) -> String {
        let mut plain = self.clone();
        plain.manifest = None;
        let digest = Sha256::digest(plain.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copy of the config carrying its own hash and the chain seed.
    pub fn with_manifest(&self) -> Self {
        let mut out = self.clone();
        out.manifest = Some(Manifest {
            config_hash: self.hash(),
            seed: self.chain.seed,
        });
        out
    }
}
