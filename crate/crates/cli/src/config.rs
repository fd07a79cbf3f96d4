//! Run configuration: one JSON file, overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crowdlab_core::anomaly_net::{AnomalyModelConfig, AnomalyTrainConfig};
use crowdlab_core::density::DEFAULT_SIGMA;
use crowdlab_core::mcnn_fen::FenConfig;
use crowdlab_core::ot_stage2::{DensityHeadConfig, Stage2Config, SupervisedConfig};
use crowdlab_core::ssl_stage1::{RotationHeadConfig, Stage1Config};
use crowdlab_core::video_frames::{DEFAULT_FRAME_SIZE, DEFAULT_MAX_FRAMES};

use crate::error::{CliError, CliResult};

pub const DEFAULT_OUTPUT: &str = "runs";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Counting manifest (JSON).
    pub manifest: Option<PathBuf>,
    pub violent_dir: Option<PathBuf>,
    pub nonviolent_dir: Option<PathBuf>,
    /// A clip cache directory written by `extract-frames`.
    pub clips: Option<PathBuf>,
    pub stage1_checkpoint: Option<PathBuf>,
    pub pretrained_vgg: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensitySection {
    pub sigma: f64,
}

impl Default for DensitySection {
    fn default() -> Self {
        DensitySection { sigma: DEFAULT_SIGMA }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FramesSection {
    pub max_frames: usize,
    pub size: usize,
}

impl Default for FramesSection {
    fn default() -> Self {
        FramesSection {
            max_frames: DEFAULT_MAX_FRAMES,
            size: DEFAULT_FRAME_SIZE,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage2Mode {
    /// Sinkhorn matching against the count prior.
    #[default]
    Unsupervised,
    /// Pixel-wise regression onto annotated density maps.
    Supervised,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub data: DataConfig,
    pub density: DensitySection,
    pub fen: FenConfig,
    pub rotation_head: RotationHeadConfig,
    pub stage1: Stage1Config,
    pub density_head: DensityHeadConfig,
    pub stage2: Stage2Config,
    pub stage2_mode: Stage2Mode,
    pub supervised: SupervisedConfig,
    pub frames: FramesSection,
    pub anomaly: AnomalyModelConfig,
    pub anomaly_train: AnomalyTrainConfig,
}

impl RunConfig {
    /// Parses `path`; relative paths inside are taken relative to its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(v) = p {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        };
        fix(&mut self.output);
        let d = &mut self.data;
        for p in [
            &mut d.manifest,
            &mut d.violent_dir,
            &mut d.nonviolent_dir,
            &mut d.clips,
            &mut d.stage1_checkpoint,
            &mut d.pretrained_vgg,
        ] {
            fix(p);
        }
    }

    pub fn seed(&self) -> CliResult<u64> {
        self.seed
            .ok_or_else(|| CliError::MissingInput("seed: set \"seed\" in the config or pass --seed".into()))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        short_hash(self.to_json().as_bytes())
    }
}

pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

pub fn require<'a>(value: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::MissingInput(format!("data.{key} is not configured")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 3}"#).unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.frames.max_frames, 20);
        assert_eq!(cfg.stage2_mode, Stage2Mode::Unsupervised);
        assert_eq!(cfg.density.sigma, 4.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seed": 1, "sede": 2}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"stage1": {"stepz": 2}}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig {
            seed: Some(1),
            ..Default::default()
        };
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 12);
        b.seed = Some(2);
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"data": {"manifest": "m.json", "clips": "/abs/clips"}}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.data.manifest.as_deref(), Some(dir.path().join("m.json").as_path()));
        assert_eq!(cfg.data.clips.as_deref(), Some(Path::new("/abs/clips")));
        assert!(matches!(cfg.seed(), Err(CliError::MissingInput(_))));
    }
}
