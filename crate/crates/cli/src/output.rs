use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Mode;
use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Number formatting shared by all CSV cells: shortest round-trip form, in
/// exponent notation outside `[1e-4, 1e15)`.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || !a.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Stable file-name fragment for a parameter value.
pub fn tag(v: f64) -> String {
    num(v).replace('-', "m")
}

#[derive(Debug, Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    mode: &'static str,
    config_sha256: &'a str,
    seed: u64,
    deterministic: bool,
    anchors: &'a [&'static str],
    files: Vec<FileEntry>,
    warnings: &'a [String],
}

/// Output directory with the list of files written so far.
pub struct Artifacts {
    dir: PathBuf,
    files: Vec<PathBuf>,
    pub warnings: Vec<String>,
    pub deterministic: bool,
}

impl Artifacts {
    pub fn create(dir: &Path, deterministic: bool) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            warnings: Vec::new(),
            deterministic,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.record(name);
        Ok(())
    }

    /// Registers a file that was written by someone else (row workers, trace sinks).
    pub fn record(&mut self, name: &str) {
        let p = PathBuf::from(name);
        if !self.files.contains(&p) {
            self.files.push(p);
        }
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let bytes = csv_bytes(header, rows)?;
        self.write_bytes(name, &bytes)
    }

    pub fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warnings.push(msg);
    }

    pub fn finish(mut self, mode: Mode, config_sha256: &str, seed: u64, anchors: &[&'static str]) -> Result<(), CliError> {
        self.files.sort();
        let mut files = Vec::new();
        for f in &self.files {
            let bytes = fs::read(self.dir.join(f))?;
            files.push(FileEntry {
                path: f.to_string_lossy().replace('\\', "/"),
                sha256: sha256_hex(&bytes),
            });
        }
        let manifest = Manifest {
            tool: "eqsel",
            version: env!("CARGO_PKG_VERSION"),
            mode: mode.name(),
            config_sha256,
            seed,
            deterministic: self.deterministic,
            anchors,
            files,
            warnings: &self.warnings,
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        fs::write(self.dir.join("manifest.json"), text)?;
        Ok(())
    }
}

pub fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_quotes_and_uses_crlf() {
        let b = csv_bytes(&["a", "b"], &[vec!["1".into(), "x,y".into()]]).unwrap();
        assert_eq!(String::from_utf8(b).unwrap(), "a,b\r\n1,\"x,y\"\r\n");
    }

    #[test]
    fn tags_and_hashes() {
        assert_eq!(tag(-0.5), "m0.5");
        assert_eq!(num(1.0), "1");
        assert_eq!(num(3.5e-20), "3.5e-20");
        assert_eq!(num(0.25), "0.25");
        assert_eq!(num(-2e16), "-2e16");
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
