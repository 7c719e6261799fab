//! Per-invocation output directory: config snapshot, event log, outputs and
//! a closing `run.json` manifest.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::{DateTime, Utc};
use serde::Serialize;
use serde_json::{json, Value};

use crate::settings::Settings;

/// Bumped whenever the layout of `run.log.jsonl` or `run.json` changes.
pub const LOG_VERSION: u32 = 1;

pub struct RunDir {
    root: PathBuf,
    log: File,
    command: String,
    started: DateTime<Utc>,
    outputs: Vec<String>,
}

fn default_root(command: &str, now: DateTime<Utc>) -> PathBuf {
    let base = PathBuf::from("runs").join(format!("{}-{command}", now.format("%Y%m%dT%H%M%S")));
    if !base.exists() {
        return base;
    }
    (2..)
        .map(|i| PathBuf::from(format!("{}-{i}", base.display())))
        .find(|p| !p.exists())
        .expect("some suffix is free")
}

impl RunDir {
    pub fn create(out: Option<&Path>, command: &str) -> anyhow::Result<Self> {
        let started = Utc::now();
        let root = match out {
            Some(p) => p.to_path_buf(),
            None => default_root(command, started),
        };
        fs::create_dir_all(&root)
            .with_context(|| format!("creating run directory {}", root.display()))?;
        let log_path = root.join("run.log.jsonl");
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .with_context(|| format!("opening {}", log_path.display()))?;
        let mut run = RunDir {
            root,
            log,
            command: command.to_string(),
            started,
            outputs: Vec::new(),
        };
        run.event("start", json!({ "command": command }));
        Ok(run)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn event(&mut self, event: &str, data: Value) {
        let line = json!({
            "v": LOG_VERSION,
            "ts": Utc::now().to_rfc3339(),
            "event": event,
            "data": data,
        });
        if let Err(e) = writeln!(self.log, "{line}") {
            log::warn!("could not append to run log: {e}");
        }
    }

    pub fn write(&mut self, name: &str, contents: &str) -> anyhow::Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, &text)
    }

    pub fn snapshot(&mut self, settings: &Settings) -> anyhow::Result<()> {
        self.write_json("config.json", settings)?;
        Ok(())
    }

    pub fn finish(mut self, exit_code: i32, error: Option<String>) {
        let finished = Utc::now();
        self.event("finish", json!({ "exit_code": exit_code, "error": error }));
        let manifest = json!({
            "log_version": LOG_VERSION,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "started": self.started.to_rfc3339(),
            "finished": finished.to_rfc3339(),
            "status": if exit_code == 0 { "ok" } else { "failed" },
            "exit_code": exit_code,
            "error": error,
            "outputs": self.outputs,
        });
        let p = self.path("run.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        if let Err(e) = File::create(&p).and_then(|mut f| f.write_all(text.as_bytes())) {
            log::warn!("could not write {}: {e}", p.display());
        }
    }
}
