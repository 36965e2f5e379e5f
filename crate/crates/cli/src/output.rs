use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};

pub const OUT_ENV: &str = "BIOOSS_OUT";
pub const DEFAULT_OUT: &str = "biooss_out";

/// `--out`, else `$BIOOSS_OUT`, else `./biooss_out`.
pub fn resolve_out(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Collects written files and timing for the run manifest.
pub struct Run {
    pub dir: PathBuf,
    pub command: &'static str,
    outputs: Vec<String>,
    started: Instant,
}

impl Run {
    pub fn new(dir: PathBuf, command: &'static str) -> CliResult<Self> {
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Run { dir, command, outputs: Vec::new(), started: Instant::now() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn record(&mut self, path: &Path) {
        let name = path.strip_prefix(&self.dir).unwrap_or(path).to_string_lossy().into_owned();
        if !self.outputs.contains(&name) {
            self.outputs.push(name);
        }
    }

    pub fn create(&mut self, name: &str) -> CliResult<BufWriter<File>> {
        let p = self.path(name);
        let f = File::create(&p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        self.record(&p);
        Ok(BufWriter::new(f))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    /// Writes `manifest.json`. Everything except the `timing` object is a
    /// function of the inputs.
    pub fn finish<C: Serialize>(mut self, config: &C, summary: Value) -> CliResult<PathBuf> {
        let elapsed = self.started.elapsed().as_secs_f64();
        let manifest = json!({
            "format": "biooss-manifest-v1",
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
            "outputs": self.outputs,
            "summary": summary,
            "timing": { "wall_seconds": elapsed },
        });
        let p = self.path("manifest.json");
        self.write_json("manifest.json", &manifest)?;
        Ok(p)
    }
}
