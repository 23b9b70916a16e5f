//! CSV artifacts that carry their own provenance.
//!
//! Every file starts with `#` comment lines holding `key: value` metadata
//! (config hash, seed, algorithm) and the full config text, one line per
//! key prefixed with `# config: `. Nothing time-dependent is written, so a
//! rerun with the same config and seed reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::ff::EpochMetrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Ff,
    Bp,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Ff => "ff",
            Algorithm::Bp => "bp",
        }
    }
}

/// Write via a sibling temp file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// A CSV table with a metadata preamble.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CsvArtifact {
    pub meta: BTreeMap<String, String>,
    pub config_text: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvArtifact {
    /// Preamble for an artifact produced under `cfg`.
    pub fn for_config(cfg: &ExperimentConfig) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert("config_hash".into(), cfg.hash());
        meta.insert("seed".into(), cfg.train.seed.to_string());
        CsvArtifact {
            meta,
            config_text: cfg.results_text(),
            ..Default::default()
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.into(), value.to_string());
        self
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(s, "# {k}: {v}");
        }
        for line in self.config_text.lines() {
            let _ = writeln!(s, "# config: {line}");
        }
        let _ = writeln!(s, "{}", self.columns.join(","));
        for row in &self.rows {
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = CsvArtifact::default();
        let mut lines = text.lines();
        for line in lines.by_ref() {
            if let Some(rest) = line.strip_prefix("# config: ") {
                out.config_text.push_str(rest);
                out.config_text.push('\n');
            } else if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest.split_once(": ").ok_or_else(|| {
                    Error::InvalidArgument(format!("artifact preamble line '{line}'"))
                })?;
                out.meta.insert(k.into(), v.into());
            } else {
                out.columns = line.split(',').map(String::from).collect();
                break;
            }
        }
        for line in lines.filter(|l| !l.is_empty()) {
            let row: Vec<String> = line.split(',').map(String::from).collect();
            if row.len() != out.columns.len() {
                return Err(Error::InvalidArgument(format!(
                    "artifact row has {} fields, header has {}",
                    row.len(),
                    out.columns.len()
                )));
            }
            out.rows.push(row);
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.render().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Numeric column; empty cells become `None`.
    pub fn column(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let i = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no column '{name}'")))?;
        self.rows
            .iter()
            .map(|r| {
                let cell = r[i].trim();
                if cell.is_empty() {
                    Ok(None)
                } else {
                    cell.parse()
                        .map(Some)
                        .map_err(|_| Error::InvalidArgument(format!("{name}: '{cell}'")))
                }
            })
            .collect()
    }

    /// Value for `key` in a two-column `key,value` table.
    pub fn value(&self, key: &str) -> Option<&str> {
        self.rows
            .iter()
            .find(|r| r.first().map(String::as_str) == Some(key))
            .and_then(|r| r.get(1))
            .map(String::as_str)
    }

    /// The embedded config, parsed back.
    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(&self.config_text)
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub algorithm: Algorithm,
    pub layers: usize,
    pub epochs: Vec<EpochMetrics>,
}

impl RunMetrics {
    pub fn columns(&self) -> Vec<String> {
        let mut c = vec!["epoch".to_string(), "lr".into(), "network_loss".into()];
        for l in 1..=self.layers {
            c.push(format!("disc_loss_l{l}"));
            c.push(format!("disc_acc_l{l}"));
        }
        c.push("train_acc".into());
        c.push("val_acc".into());
        c
    }

    pub fn to_artifact(&self, cfg: &ExperimentConfig) -> CsvArtifact {
        let rows = self
            .epochs
            .iter()
            .map(|m| {
                let mut r = vec![
                    m.epoch.to_string(),
                    format!("{:e}", m.lr),
                    format!("{:.8}", m.network_loss),
                ];
                for l in 0..self.layers {
                    r.push(m.disc_loss.get(l).map_or(String::new(), |v| format!("{v:.8}")));
                    r.push(m.disc_acc.get(l).map_or(String::new(), |v| format!("{v:.4}")));
                }
                r.push(format!("{:.4}", m.train_acc));
                r.push(m.val_acc.map_or(String::new(), |v| format!("{v:.4}")));
                r
            })
            .collect();
        CsvArtifact {
            columns: self.columns(),
            rows,
            ..CsvArtifact::for_config(cfg).with_meta("algorithm", self.algorithm.as_str())
        }
    }
}

/// `key,value` table of end-of-run results.
pub fn results_artifact(cfg: &ExperimentConfig, algorithm: Algorithm, kv: &[(&str, String)]) -> CsvArtifact {
    CsvArtifact {
        columns: vec!["key".into(), "value".into()],
        rows: kv.iter().map(|(k, v)| vec![k.to_string(), v.clone()]).collect(),
        ..CsvArtifact::for_config(cfg).with_meta("algorithm", algorithm.as_str())
    }
}
