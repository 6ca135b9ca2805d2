use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use vividtoy::io::RunConfig;
use vividtoy::{Error, Result};

/// A line-delimited JSON log whose first line is the reproducibility
/// header.
pub struct RunLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl RunLog {
    pub fn create(path: &Path, command: &str, cfg: &RunConfig, seed: u64, extra: Value) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let mut log = Self { path: path.to_path_buf(), out: BufWriter::new(file) };
        let ablation = &cfg.train.finetune.ablation;
        let mut header = json!({
            "header": true,
            "command": command,
            "config_hash": cfg.hash(),
            "seed": seed,
            "code_version": env!("CARGO_PKG_VERSION"),
            "projector_on": ablation.projector_on,
            "connector_mode": ablation.connector_mode.as_str(),
            "distill_on": cfg.train.finetune.distill_on,
            "config": serde_json::from_str::<Value>(&cfg.canonical_json()).expect("canonical config is JSON"),
        });
        if let (Value::Object(h), Value::Object(e)) = (&mut header, extra) {
            h.extend(e);
        }
        log.line(&header)?;
        Ok(log)
    }

    pub fn line(&mut self, v: &Value) -> Result<()> {
        writeln!(self.out, "{v}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::Io { path: self.path.clone(), source: e })
    }
}
