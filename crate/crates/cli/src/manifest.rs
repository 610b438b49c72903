use std::path::Path;
use std::time::Duration;

use anyhow::Context;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use mfg_core::pipeline::to_stable_json;

/// Record of one invocation: resolved configuration, input digests, outputs,
/// timing and convergence summary.
pub struct RunManifest {
    doc: Map<String, Value>,
    inputs: Vec<Value>,
    outputs: Vec<Value>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        let mut doc = Map::new();
        doc.insert("command".into(), json!(command));
        doc.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
        Self {
            doc,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: Value) {
        self.doc.insert(key.into(), value);
    }

    pub fn add_input(&mut self, path: &Path, bytes: &[u8]) {
        let digest = Sha256::digest(bytes);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.inputs
            .push(json!({ "path": path.display().to_string(), "sha256": hex }));
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(json!(path.display().to_string()));
    }

    pub fn finish(&mut self, elapsed: Duration, failure: Option<(u8, String)>) {
        self.doc
            .insert("duration_seconds".into(), json!(elapsed.as_secs_f64()));
        let status = match failure {
            None => json!({ "exit_code": 0 }),
            Some((code, message)) => json!({ "exit_code": code, "error": message }),
        };
        self.doc.insert("status".into(), status);
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut doc = self.doc.clone();
        doc.insert("inputs".into(), Value::Array(self.inputs.clone()));
        doc.insert("outputs".into(), Value::Array(self.outputs.clone()));
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)
                .with_context(|| format!("cannot create {}", dir.display()))?;
        }
        let text = to_stable_json(&Value::Object(doc))?;
        std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
    }
}
