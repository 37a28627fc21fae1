//! Artifact writing. Every file carries the command, config fingerprint and
//! seed; nothing time- or host-dependent goes in.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Map, Value};

use sepeff::{Error, Result};

pub struct Output {
    dir: PathBuf,
    /// Explicit path for the command's main artifact, from `--out x.json`.
    primary: Option<PathBuf>,
    pub command: String,
    pub fingerprint: String,
    pub seed: u64,
}

impl Output {
    /// `out` naming a file (it has an extension) fixes the primary artifact's
    /// path; anything else is the directory for all artifacts.
    pub fn new(out: Option<&Path>, command: &str, fingerprint: String, seed: u64) -> Output {
        let out = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("out"));
        let (dir, primary) = if out.extension().is_some() {
            (out.parent().map(Path::to_path_buf).unwrap_or_default(), Some(out))
        } else {
            (out, None)
        };
        Output { dir, primary, command: command.to_string(), fingerprint, seed }
    }

    fn path(&self, name: &str, primary: bool) -> Result<PathBuf> {
        let p = match (&self.primary, primary) {
            (Some(p), true) => p.clone(),
            _ => self.dir.join(name),
        };
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    fn meta(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("command".into(), json!(self.command));
        m.insert("fingerprint".into(), json!(self.fingerprint));
        m.insert("seed".into(), json!(self.seed));
        m
    }

    /// Object payloads gain the metadata keys; anything else goes under `key`.
    pub fn json(&self, name: &str, primary: bool, key: &str, body: &impl Serialize) -> Result<PathBuf> {
        let mut m = self.meta();
        match serde_json::to_value(body)? {
            Value::Object(fields) => m.extend(fields),
            v => {
                m.insert(key.into(), v);
            }
        }
        let path = self.path(name, primary)?;
        let mut text = serde_json::to_string_pretty(&Value::Object(m))?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }

    /// CSV body behind a `#` metadata line.
    pub fn csv(&self, name: &str, primary: bool, body: &str) -> Result<PathBuf> {
        let path = self.path(name, primary)?;
        let head = format!("# sepeff command={} fingerprint={} seed={}\n", self.command, self.fingerprint, self.seed);
        std::fs::write(&path, head + body)?;
        Ok(path)
    }
}

/// Machine-readable form of an error.
pub fn error_json(e: &Error) -> Value {
    let mut v = json!({
        "error": e.kind(),
        "message": e.to_string(),
        "exit_code": e.exit_code(),
    });
    match e {
        Error::Validation(vs) => v["violations"] = json!(vs),
        Error::Input(problems) => v["problems"] = json!(problems),
        Error::Separation { term, detail } => v["term"] = json!({ "name": term, "detail": detail }),
        _ => {}
    }
    v
}
