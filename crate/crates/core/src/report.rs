//! Run directories and report files.
//!
//! A run directory is named `<UTC timestamp>-<config hash>` and holds
//! `report.json` plus the CSV tables of the command. Every table row carries
//! the config hash. Nothing inside the directory depends on the wall clock,
//! so reruns with the same config produce byte-identical files.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CprlError, Result};
use crate::metrics::{fmt_opt, MetricTriple};

pub const LOCK_FILE: &str = "run.lock";
pub const REPORT_FILE: &str = "report.json";

/// An exclusively created run directory; the lock file is removed on drop.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path, config_hash: &str) -> Result<Self> {
        let out_err = |path: &Path, e: std::io::Error| CprlError::Output {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        fs::create_dir_all(root).map_err(|e| out_err(root, e))?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S").to_string();
        let base = format!("{stamp}-{config_hash}");
        for attempt in 0..1000 {
            let name = if attempt == 0 {
                base.clone()
            } else {
                format!("{base}-{attempt}")
            };
            let path = root.join(name);
            match fs::create_dir(&path) {
                Ok(()) => {
                    OpenOptions::new()
                        .write(true)
                        .create_new(true)
                        .open(path.join(LOCK_FILE))
                        .map_err(|e| out_err(&path, e))?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(out_err(&path, e)),
            }
        }
        Err(CprlError::Output {
            path: root.to_path_buf(),
            reason: "could not find a free run directory name".into(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let path = self.join(name);
        fs::write(&path, text).map_err(|e| CprlError::Output {
            path,
            reason: e.to_string(),
        })
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    pub fn write_csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let path = self.join(name);
        let file = fs::File::create(&path).map_err(|e| CprlError::Output {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        if !header.is_empty() {
            w.write_record(header)?;
        }
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK_FILE));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub source: String,
    pub samples: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub train_scenes: Vec<u32>,
    pub test_scenes: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub config_hash: String,
    pub split: String,
    pub model: String,
    pub attack: String,
    pub epsilon: f64,
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
    pub mse: f64,
}

impl MetricRow {
    pub const HEADER: [&'static str; 8] = [
        "split",
        "model",
        "attack",
        "epsilon",
        "srcc",
        "plcc",
        "mse",
        "config_hash",
    ];

    pub fn new(
        hash: &str,
        split: &str,
        model: &str,
        attack: &str,
        epsilon: f64,
        m: MetricTriple,
    ) -> Self {
        Self {
            config_hash: hash.into(),
            split: split.into(),
            model: model.into(),
            attack: attack.into(),
            epsilon,
            srcc: m.srcc,
            plcc: m.plcc,
            mse: m.mse,
        }
    }

    pub fn csv(&self) -> Vec<String> {
        vec![
            self.split.clone(),
            self.model.clone(),
            self.attack.clone(),
            self.epsilon.to_string(),
            fmt_opt(self.srcc),
            fmt_opt(self.plcc),
            self.mse.to_string(),
            self.config_hash.clone(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub config_hash: String,
    pub epoch: usize,
    pub split: String,
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
    pub mse: f64,
    pub loss: f64,
    pub phase_counts: String,
}

impl CurveRecord {
    pub const HEADER: [&'static str; 8] = [
        "epoch",
        "split",
        "srcc",
        "plcc",
        "mse",
        "loss",
        "phase_counts",
        "config_hash",
    ];

    pub fn csv(&self) -> Vec<String> {
        vec![
            self.epoch.to_string(),
            self.split.clone(),
            fmt_opt(self.srcc),
            fmt_opt(self.plcc),
            self.mse.to_string(),
            self.loss.to_string(),
            self.phase_counts.clone(),
            self.config_hash.clone(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub config_hash: String,
    pub attack: String,
    pub epsilon: f64,
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
    pub mse: f64,
}

impl SweepRecord {
    pub const HEADER: [&'static str; 5] = ["epsilon", "srcc", "plcc", "mse", "config_hash"];

    pub fn csv(&self) -> Vec<String> {
        vec![
            self.epsilon.to_string(),
            fmt_opt(self.srcc),
            fmt_opt(self.plcc),
            self.mse.to_string(),
            self.config_hash.clone(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeRecord {
    pub config_hash: String,
    /// Index of the image within the held-out split.
    pub image: usize,
    pub label: f64,
    pub clean: f64,
    pub range: f64,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub config_hash: String,
    pub order: usize,
    pub channel: usize,
    pub clean: f64,
    pub adversarial: f64,
}

impl ActivationRecord {
    pub const HEADER: [&'static str; 5] =
        ["order", "channel", "clean", "adversarial", "config_hash"];

    pub fn csv(&self) -> Vec<String> {
        vec![
            self.order.to_string(),
            self.channel.to_string(),
            self.clean.to_string(),
            self.adversarial.to_string(),
            self.config_hash.clone(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub architecture: String,
    pub config: RunConfig,
    pub notes: Vec<String>,
    pub dataset: Option<DatasetSummary>,
    pub metrics: Vec<MetricRow>,
    pub curve: Vec<CurveRecord>,
    pub sweep: Vec<SweepRecord>,
    pub landscapes: Vec<LandscapeRecord>,
    pub activations: Vec<ActivationRecord>,
    /// Files written next to the report, in write order.
    pub artifacts: Vec<String>,
}

impl RunReport {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.into(),
            config_hash: config.hash(),
            seed: config.seed,
            architecture: config.model.architecture(),
            config: config.clone(),
            notes: Vec::new(),
            dataset: None,
            metrics: Vec::new(),
            curve: Vec::new(),
            sweep: Vec::new(),
            landscapes: Vec::new(),
            activations: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Writes a matrix of numbers as headerless CSV lines.
pub fn matrix_csv(rows: &[Vec<f64>]) -> String {
    let mut out = Vec::new();
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(",")).expect("writing to a vec");
    }
    String::from_utf8(out).expect("ascii")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_dirs_are_distinct_and_unlock_on_drop() {
        let root = tempfile::tempdir().unwrap();
        let a = RunDir::create(root.path(), "abc").unwrap();
        let b = RunDir::create(root.path(), "abc").unwrap();
        assert_ne!(a.path(), b.path());
        assert!(a.join(LOCK_FILE).exists());
        let p = a.path().to_path_buf();
        drop(a);
        assert!(!p.join(LOCK_FILE).exists());
    }

    #[test]
    fn matrix_lines() {
        assert_eq!(
            matrix_csv(&[vec![1.0, 0.5], vec![-2.0, 0.0]]),
            "1,0.5\n-2,0\n"
        );
    }
}
