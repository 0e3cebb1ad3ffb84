//! Run configuration: one TOML file covering every pipeline stage, with
//! command-line overrides applied on top. The resolved configuration is
//! written next to every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{Condition, GaitSample};
use crate::error::{Error, Result};
use crate::eval::SameViewPolicy;
use crate::geometry::{CameraRig, DEFAULT_RIG_RADIUS_M};
use crate::lugan::{GeneratorConfig, LuganTrainConfig};
use crate::recognizer::{RecognizerConfig, RecognizerTrainConfig, ViewMode};
use crate::synth::{SynthSpec, DEFAULT_FRAMES};

pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    /// Rig preset: casia-like, ou-like, acceptance or cocentered-k.
    pub preset: String,
    pub radius_m: f64,
    pub identities: usize,
    pub conditions: Vec<Condition>,
    pub runs: u32,
    pub frames: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            preset: "acceptance".into(),
            radius_m: DEFAULT_RIG_RADIUS_M,
            identities: 20,
            conditions: Condition::ALL.to_vec(),
            runs: 2,
            frames: DEFAULT_FRAMES,
        }
    }
}

impl SynthSection {
    pub fn rig(&self) -> Result<CameraRig> {
        CameraRig::preset(&self.preset, self.radius_m)
    }

    pub fn spec(&self, seed: u64) -> Result<SynthSpec> {
        Ok(SynthSpec {
            identities: self.identities,
            conditions: self.conditions.clone(),
            runs: self.runs,
            frames: self.frames,
            seed,
            rig: self.rig()?,
            rig_preset: Some(self.preset.clone()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSection {
    /// Identities (in sorted order) used for training; the rest are held
    /// out. 0 means the first half.
    pub train_identities: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { train_identities: 0 }
    }
}

impl SplitSection {
    /// `(train, held_out)` partition by identity.
    pub fn split(&self, records: &[GaitSample]) -> Result<(Vec<GaitSample>, Vec<GaitSample>)> {
        let mut ids: Vec<&str> = records.iter().map(|r| r.identity.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        let n = if self.train_identities == 0 { ids.len() / 2 } else { self.train_identities };
        if n == 0 || n >= ids.len() {
            return Err(Error::Config(format!("cannot hold out identities: {n} for training out of {}", ids.len())));
        }
        let train_ids: Vec<String> = ids[..n].iter().map(|s| s.to_string()).collect();
        Ok(records.iter().cloned().partition(|r| train_ids.contains(&r.identity)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolSection {
    pub same_view_policy: SameViewPolicy,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        ProtocolSection { same_view_policy: SameViewPolicy::Both }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsSection {
    pub dataset: Option<PathBuf>,
    pub lugan_checkpoint: Option<PathBuf>,
    pub recognizer_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub views: ViewMode,
    pub paths: PathsSection,
    pub synth: SynthSection,
    pub split: SplitSection,
    pub protocol: ProtocolSection,
    pub lugan: GeneratorConfig,
    pub lugan_train: LuganTrainConfig,
    pub recognizer: RecognizerConfig,
    pub recognizer_train: RecognizerTrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            views: ViewMode::Oracle,
            paths: PathsSection::default(),
            synth: SynthSection::default(),
            split: SplitSection::default(),
            protocol: ProtocolSection::default(),
            lugan: GeneratorConfig::default(),
            lugan_train: LuganTrainConfig::default(),
            recognizer: RecognizerConfig::default(),
            recognizer_train: RecognizerTrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the resolved configuration into `dir`, creating it.
    pub fn save_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
