//! `<out>/<UTC timestamp>-<config hash>/{config.json, logs, checkpoints, reports}`.

use std::collections::BTreeMap;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use chrono::Utc;
use serde::Serialize;

use crowdlab_core::dataset_io::{write_checkpoint, CheckpointArchive};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const LOGS: &str = "logs";
pub const CHECKPOINTS: &str = "checkpoints";
pub const REPORTS: &str = "reports";

#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub config_hash: String,
    seed: Option<u64>,
    command: String,
    logs: Vec<String>,
    checkpoints: Vec<String>,
    artifacts: Vec<String>,
    metrics: BTreeMap<String, f64>,
}

/// Summary written to `reports/run.json`; numbers are copied from persisted logs.
#[derive(Debug, Serialize)]
struct RunReport<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: &'a str,
    seed: Option<u64>,
    logs: &'a [String],
    checkpoints: &'a [String],
    artifacts: &'a [String],
    final_metrics: &'a BTreeMap<String, f64>,
}

impl RunDir {
    /// Creates a fresh directory, appending `-1`, `-2`, … on collision.
    pub fn create(config: &RunConfig, command: &str) -> CliResult<Self> {
        let out = config.output_dir();
        fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        let hash = config.hash();
        let base = format!("{}-{hash}", Utc::now().format("%Y%m%dT%H%M%SZ"));
        let mut root = out.join(&base);
        let mut n = 0;
        loop {
            match fs::create_dir(&root) {
                Ok(()) => break,
                Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                    n += 1;
                    root = out.join(format!("{base}-{n}"));
                }
                Err(e) => return Err(CliError::io(&root, e)),
            }
        }
        for sub in [LOGS, CHECKPOINTS, REPORTS] {
            let p = root.join(sub);
            fs::create_dir(&p).map_err(|e| CliError::io(&p, e))?;
        }
        let cfg_path = root.join("config.json");
        fs::write(&cfg_path, config.to_json()).map_err(|e| CliError::io(&cfg_path, e))?;
        Ok(RunDir {
            root,
            config_hash: hash,
            seed: config.seed,
            command: command.to_string(),
            logs: Vec::new(),
            checkpoints: Vec::new(),
            artifacts: Vec::new(),
            metrics: BTreeMap::new(),
        })
    }

    pub fn path(&self, sub: &str, name: &str) -> PathBuf {
        self.root.join(sub).join(name)
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).display().to_string()
    }

    pub fn write_log(&mut self, name: &str, csv: &str) -> CliResult<PathBuf> {
        let p = self.path(LOGS, name);
        fs::write(&p, csv).map_err(|e| CliError::io(&p, e))?;
        self.logs.push(self.rel(&p));
        Ok(p)
    }

    /// Adds seed, stage and config hash to the archive metadata before writing.
    pub fn write_checkpoint(&mut self, name: &str, stage: &str, mut archive: CheckpointArchive) -> CliResult<PathBuf> {
        let seed = self
            .seed
            .ok_or_else(|| CliError::MissingInput("seed: checkpoints record the seed that produced them".into()))?;
        archive.metadata.insert("seed".into(), seed.to_string());
        archive.metadata.insert("stage".into(), stage.into());
        archive.metadata.insert("config_hash".into(), self.config_hash.clone());
        let p = self.path(CHECKPOINTS, name);
        write_checkpoint(&archive, &p)?;
        self.checkpoints.push(self.rel(&p));
        Ok(p)
    }

    pub fn record_artifact(&mut self, p: &Path) {
        let r = self.rel(p);
        self.artifacts.push(r);
    }

    pub fn metric(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.into(), value);
    }

    pub fn finish(&self) -> CliResult<PathBuf> {
        let report = RunReport {
            command: &self.command,
            version: env!("CARGO_PKG_VERSION"),
            config_hash: &self.config_hash,
            seed: self.seed,
            logs: &self.logs,
            checkpoints: &self.checkpoints,
            artifacts: &self.artifacts,
            final_metrics: &self.metrics,
        };
        let p = self.path(REPORTS, "run.json");
        let json = serde_json::to_string_pretty(&report).expect("report serialises");
        fs::write(&p, json).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collisions_get_suffixes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            seed: Some(1),
            output: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let a = RunDir::create(&cfg, "t").unwrap();
        let b = RunDir::create(&cfg, "t").unwrap();
        assert_ne!(a.root, b.root);
        assert!(a.root.join("config.json").is_file());
        assert!(b.root.join(LOGS).is_dir());
        let name = a.root.file_name().unwrap().to_string_lossy().into_owned();
        assert!(name.contains(&cfg.hash()));
    }

    #[test]
    fn report_lists_relative_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            seed: Some(9),
            output: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let mut run = RunDir::create(&cfg, "t").unwrap();
        run.write_log("a.csv", "step,loss\n0,1\n").unwrap();
        run.metric("loss", 1.0);
        let p = run.finish().unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
        assert_eq!(v["logs"][0], "logs/a.csv");
        assert_eq!(v["seed"], 9);
        assert_eq!(v["final_metrics"]["loss"], 1.0);
    }
}
