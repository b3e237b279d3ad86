//! Output plumbing: RFC-4180 CSVs, the manifest sidecar, significant-digit
//! formatting, and the config hash.
//!
//! Data CSVs are byte-identical across reruns with the same config and
//! master seed; anything time-dependent lives only in the manifest.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use crate::runner::Summary;

/// SHA-256 of the raw config file bytes, hex-encoded.
pub fn config_hash(raw: &[u8]) -> String {
    hex::encode(Sha256::digest(raw))
}

/// `mean(std)` with three significant digits, matching the convention of
/// published comparison tables (e.g. `1.2e-4(5e-5)`, `0.13(0.06)`).
pub fn format_mean_std(summary: &Summary) -> String {
    format!("{}({})", format_sig3(summary.mean), format_sig3(summary.std))
}

/// Three significant digits; plain notation in [1e-3, 1e4), scientific
/// outside.
pub fn format_sig3(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sign = if x < 0.0 { "-" } else { "" };
    let a = x.abs();
    let exp = a.log10().floor() as i32;
    if (-3..4).contains(&exp) {
        let decimals = (2 - exp).max(0) as usize;
        let s = format!("{a:.decimals$}");
        format!("{sign}{}", trim_zeros(&s))
    } else {
        let mantissa = a / 10f64.powi(exp);
        let s = format!("{mantissa:.2}");
        format!("{sign}{}e{exp}", trim_zeros(&s))
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

/// A CSV file under construction; always carries a header row.
pub struct CsvFile {
    writer: csv::Writer<Vec<u8>>,
    path: PathBuf,
}

impl CsvFile {
    pub fn create(path: impl Into<PathBuf>, header: &[&str]) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header)?;
        Ok(CsvFile { writer, path: path.into() })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        self.writer.write_record(fields)?;
        Ok(())
    }

    /// Writes the accumulated bytes to disk and returns the file name.
    pub fn finish(self) -> Result<PathBuf> {
        let bytes = self.writer.into_inner().context("flushing csv")?;
        if let Some(parent) = self.path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&self.path, bytes)?;
        Ok(self.path)
    }
}

/// Run metadata written next to the data files. Timestamps and wall time
/// live here, never in the data CSVs.
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    pub files: Vec<String>,
    pub elapsed_ms: u128,
}

impl Manifest {
    pub fn new(command: &str, config_hash: String, master_seed: u64) -> Self {
        Manifest {
            command: command.to_string(),
            config_hash,
            master_seed,
            seeds: Vec::new(),
            files: Vec::new(),
            elapsed_ms: 0,
        }
    }

    pub fn record_file(&mut self, path: &Path) {
        if let Some(name) = path.file_name() {
            self.files.push(name.to_string_lossy().into_owned());
        }
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let created = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut text = String::new();
        text.push_str(&format!("command = {:?}\n", self.command));
        text.push_str(&format!("format_version = 1\n"));
        text.push_str(&format!("code_version = {:?}\n", env!("CARGO_PKG_VERSION")));
        text.push_str(&format!("config_hash = {:?}\n", self.config_hash));
        text.push_str(&format!("master_seed = {}\n", self.master_seed));
        text.push_str(&format!(
            "seeds = [{}]\n",
            self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(", ")
        ));
        text.push_str(&format!(
            "files = [{}]\n",
            self.files.iter().map(|f| format!("{f:?}")).collect::<Vec<_>>().join(", ")
        ));
        text.push_str(&format!("created_unix = {created}\n"));
        text.push_str(&format!("elapsed_ms = {}\n", self.elapsed_ms));
        let path = out_dir.join("manifest.toml");
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

/// Formats an f64 with full round-trip precision for data CSVs.
pub fn full(v: f64) -> String {
    format!("{v}")
}
