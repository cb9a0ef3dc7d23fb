//! Run records: what went in, what came out, and how to redo it.

use crate::config::RunConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const TOOL: &str = "drivesim";

#[derive(Clone, Debug, Serialize)]
pub struct Digest256 {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub config_hash: String,
    pub config: RunConfig,
    pub inputs: Vec<Digest256>,
    pub outputs: Vec<Digest256>,
    pub exit_code: u8,
    pub error: Option<String>,
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            files_under(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// SHA-256 of a file, or for a directory of every relative path and file
/// content in sorted order.
pub fn digest(path: &Path) -> std::io::Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        files_under(path, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(path).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(Sha256::digest(std::fs::read(&f)?));
        }
    } else {
        h.update(std::fs::read(path)?);
    }
    Ok(hex::encode(h.finalize()))
}

impl RunRecord {
    pub fn new(subcommand: &str, seed: u64, threads: Option<usize>, config: RunConfig) -> Self {
        Self {
            tool: TOOL,
            version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand.to_string(),
            argv: std::env::args().collect(),
            seed,
            threads,
            config_hash: config.hash(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            exit_code: 0,
            error: None,
        }
    }

    fn entry(path: &Path) -> Digest256 {
        Digest256 {
            path: path.display().to_string(),
            sha256: digest(path).unwrap_or_else(|e| format!("unreadable: {e}")),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(Self::entry(path));
    }

    /// Built-in data that has no file.
    pub fn builtin(&mut self, name: &str) {
        self.inputs.push(Digest256 {
            path: format!("builtin:{name}"),
            sha256: String::new(),
        });
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(Self::entry(path));
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut text = serde_json::to_string_pretty(self).expect("record serializes");
        text.push('\n');
        std::fs::write(path, text)
    }
}

/// `<output>.run.json` beside the primary output, else
/// `drivesim-<subcommand>.run.json` in the working directory.
pub fn default_path(subcommand: &str, output: Option<&Path>) -> PathBuf {
    match output {
        Some(o) => {
            let mut s = o.components().collect::<PathBuf>().into_os_string();
            s.push(".run.json");
            PathBuf::from(s)
        }
        None => PathBuf::from(format!("{TOOL}-{subcommand}.run.json")),
    }
}
