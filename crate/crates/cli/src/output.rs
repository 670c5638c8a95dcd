//! Number formatting, CSV writing and run manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

/// Value rounded to 9 significant digits.
pub fn sig9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().unwrap_or(v)
}

/// Text form of [`sig9`]; non-finite values print as `NaN` / `inf` / `-inf`.
pub fn fmt9(v: f64) -> String {
    let r = sig9(v);
    if r == 0.0 {
        "0".into()
    } else if r.is_finite() && (r.abs() < 1e-4 || r.abs() >= 1e15) {
        format!("{r:e}")
    } else {
        format!("{r}")
    }
}

/// Cost in $1k with two decimals.
pub fn fmt_k(cost: f64) -> String {
    format!("{:.2}", cost / 1000.0)
}

pub fn sig9_vec(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| sig9(x)).collect()
}

/// CSV table whose first column carries the schema name and version.
pub struct Csv {
    schema: &'static str,
    text: String,
}

impl Csv {
    pub fn new(schema: &'static str, columns: &[&str]) -> Self {
        let mut text = String::from("schema");
        for c in columns {
            text.push(',');
            text.push_str(c);
        }
        text.push('\n');
        Self { schema, text }
    }

    pub fn row<S: AsRef<str>>(&mut self, cells: &[S]) {
        self.text.push_str(self.schema);
        for c in cells {
            self.text.push(',');
            self.text.push_str(c.as_ref());
        }
        self.text.push('\n');
    }

    pub fn into_string(self) -> String {
        self.text
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects what went into a run and writes `<out>.manifest.json` next to
/// every output file.
pub struct Manifest {
    command: &'static str,
    config: Value,
    seeds: Value,
    inputs: Vec<(String, String)>,
    outputs: Vec<PathBuf>,
    start: Instant,
}

impl Manifest {
    pub fn new(command: &'static str, config: impl Serialize) -> Self {
        Self {
            command,
            config: serde_json::to_value(config).unwrap_or(Value::Null),
            seeds: Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            start: Instant::now(),
        }
    }

    pub fn seeds(&mut self, seeds: Value) {
        self.seeds = seeds;
    }

    pub fn input(&mut self, name: &str, bytes: &[u8]) {
        self.inputs.push((name.to_string(), sha256_hex(bytes)));
    }

    /// Writes `contents` to `path` and records it as an output.
    pub fn write(&mut self, path: &Path, contents: &str) -> Result<()> {
        fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        let inputs: serde_json::Map<String, Value> = self.inputs.into_iter().map(|(k, v)| (k, Value::String(v))).collect();
        let record = json!({
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "inputs_sha256": inputs,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "wall_seconds": self.start.elapsed().as_secs_f64(),
            "outputs": self.outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        });
        let text = serde_json::to_string_pretty(&record)? + "\n";
        for out in &self.outputs {
            let path = sidecar(out);
            fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }
}

pub fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
