//! Provenance stamping: every file written carries the configuration it was
//! produced under and sha256 digests of the inputs it was derived from.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Input {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    pub command: String,
    pub version: &'static str,
    pub config_sha256: String,
    pub inputs: Vec<Input>,
    pub config: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Read a file and return it together with its digest.
pub fn read_hashed(path: &Path) -> Result<(Vec<u8>, Input)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let input = Input {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    };
    Ok((bytes, input))
}

impl Provenance {
    pub fn new(command: &str, config_text: &str) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: sha256_hex(config_text.as_bytes()),
            inputs: Vec::new(),
            config: config_text.to_string(),
        }
    }

    pub fn add_input(&mut self, input: Input) {
        self.inputs.push(input);
    }

    fn lines(&self) -> Vec<String> {
        let mut out = vec![
            format!("latentfoil {} {}", self.version, self.command),
            format!("config_sha256 {}", self.config_sha256),
        ];
        for i in &self.inputs {
            out.push(format!("input {} sha256 {}", i.path, i.sha256));
        }
        out.push("config:".into());
        out.extend(self.config.lines().map(|l| format!("  {l}")));
        out
    }

    /// `# `-prefixed header block for CSV and text artifacts.
    pub fn comment_block(&self) -> String {
        self.lines().iter().map(|l| format!("# {l}\n")).collect()
    }
}

/// Writes stamped artifacts into one directory.
pub struct Writer {
    dir: PathBuf,
    prov: Provenance,
}

impl Writer {
    pub fn new(dir: &Path, prov: Provenance) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            prov,
        })
    }

    fn put(&mut self, name: &str, contents: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    /// CSV or plain text; the body follows the comment header.
    pub fn text(&mut self, name: &str, body: &str) -> Result<PathBuf> {
        let mut s = self.prov.comment_block();
        s.push_str(body);
        self.put(name, s.as_bytes())
    }

    /// JSON object with a `provenance` field added at top level.
    pub fn json(&mut self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let mut v = serde_json::to_value(value).context("serializing artifact")?;
        if let serde_json::Value::Object(map) = &mut v {
            map.insert("provenance".into(), serde_json::to_value(&self.prov)?);
        } else {
            v = serde_json::json!({ "data": v, "provenance": self.prov });
        }
        let s = serde_json::to_string_pretty(&v)?;
        self.put(name, s.as_bytes())
    }

    /// SVG with the provenance in a leading XML comment.
    pub fn svg(&mut self, name: &str, svg: &str) -> Result<PathBuf> {
        // "--" may not appear inside an XML comment
        let body: String = self
            .prov
            .lines()
            .iter()
            .map(|l| format!("  {}\n", l.replace("--", "- -")))
            .collect();
        let s = format!("<!--\n{body}-->\n{svg}");
        self.put(name, s.as_bytes())
    }
}

/// Strip `#` comment lines from a stamped CSV.
pub fn csv_body(text: &str) -> impl Iterator<Item = &str> {
    text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty())
}
