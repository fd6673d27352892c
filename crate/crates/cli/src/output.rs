//! Record writers. Every output carries a run manifest: a sidecar
//! `<name>.manifest.json` next to files in an output directory, or a header
//! line when writing to stdout.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{FileConfig, Format};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub timestamp: String,
    pub config: FileConfig,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &FileConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool: env!("CARGO_PKG_NAME"),
            tool_version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            seed,
            timestamp: chrono::Utc::now().to_rfc3339(),
            config: config.clone(),
        }
    }
}

/// Where records go.
pub struct Sink {
    dir: Option<PathBuf>,
    format: Format,
    manifest: RunManifest,
}

impl Sink {
    pub fn new(dir: Option<&Path>, format: Format, manifest: RunManifest) -> io::Result<Self> {
        if let Some(d) = dir {
            std::fs::create_dir_all(d)?;
        }
        Ok(Self {
            dir: dir.map(Path::to_path_buf),
            format,
            manifest,
        })
    }

    /// Write one table named `name`.
    pub fn table<R: Serialize>(&mut self, name: &str, rows: &[R]) -> io::Result<()> {
        let manifest = serde_json::to_string(&self.manifest).map_err(io::Error::other)?;
        match &self.dir {
            Some(dir) => {
                let ext = match self.format {
                    Format::Csv => "csv",
                    Format::Jsonl => "jsonl",
                };
                let path = dir.join(format!("{name}.{ext}"));
                write_rows(File::create(&path)?, self.format, rows)?;
                let side = dir.join(format!("{name}.manifest.json"));
                std::fs::write(
                    &side,
                    serde_json::to_string_pretty(&self.manifest).map_err(io::Error::other)?,
                )?;
            }
            None => {
                let mut out = io::stdout().lock();
                match self.format {
                    Format::Csv => writeln!(out, "# manifest: {manifest}")?,
                    Format::Jsonl => writeln!(out, "{{\"manifest\":{manifest}}}")?,
                }
                write_rows(&mut out, self.format, rows)?;
                out.flush()?;
            }
        }
        Ok(())
    }
}

pub fn write_rows<W: Write, R: Serialize>(mut w: W, format: Format, rows: &[R]) -> io::Result<()> {
    match format {
        Format::Csv => {
            let mut c = csv::Writer::from_writer(w);
            for r in rows {
                c.serialize(r).map_err(io::Error::other)?;
            }
            c.flush()
        }
        Format::Jsonl => {
            for r in rows {
                serde_json::to_writer(&mut w, r).map_err(io::Error::other)?;
                w.write_all(b"\n")?;
            }
            w.flush()
        }
    }
}
