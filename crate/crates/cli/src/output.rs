//! Output files: every CSV starts with a comment header carrying the config
//! hash and the config itself; each run ends with a manifest.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub limit: f64,
}

impl Check {
    /// Passes when `value <= limit`.
    pub fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Check { name: name.into(), pass: value <= limit, value, limit }
    }

    /// Passes when `value >= limit`.
    pub fn at_least(name: &str, value: f64, limit: f64) -> Self {
        Check { name: name.into(), pass: value >= limit, value, limit }
    }

    pub fn flag(name: &str, pass: bool) -> Self {
        Check { name: name.into(), pass, value: pass as u8 as f64, limit: 1.0 }
    }
}

pub struct Sink {
    dir: PathBuf,
    header: String,
    pub files: Vec<String>,
    pub checks: Vec<Check>,
}

impl Sink {
    pub fn new(dir: &Path, subcommand: &str, cfg: &ExperimentConfig) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let header = format!(
            "# rwre-lab {subcommand}\n# config_sha256: {}\n# config: {}\n",
            cfg.hash(),
            cfg.canonical()
        );
        Ok(Sink { dir: dir.to_path_buf(), header, files: Vec::new(), checks: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes `name` with the comment header followed by `body`.
    pub fn csv<F>(&mut self, name: &str, body: F) -> anyhow::Result<()>
    where
        F: FnOnce(&mut dyn Write) -> anyhow::Result<()>,
    {
        let mut w = BufWriter::new(fs::File::create(self.dir.join(name))?);
        w.write_all(self.header.as_bytes())?;
        body(&mut w)?;
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn check(&mut self, c: Check) {
        self.checks.push(c);
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

#[derive(Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'a str,
    pub config_sha256: String,
    pub config: &'a ExperimentConfig,
    pub master_seed: u64,
    pub jobs: usize,
    pub files: &'a [String],
    pub checks: &'a [Check],
    pub status: i32,
    pub wall_time_s: f64,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    fs::write(path, s)
}
