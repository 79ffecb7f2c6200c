//! Flat key=value configuration: file parsing, typed access, canonical
//! form, and the content hash stamped into every emitted CSV.

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse `key = value` lines; '#' starts a comment, blank lines ignored.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<Self> {
        let mut map = Self::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key=value, got '{raw}'", lineno + 1))
            })?;
            map.set(k.trim(), v.trim());
        }
        Ok(map)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Later maps win.
    pub fn merged_with(&self, overrides: &ConfigMap) -> ConfigMap {
        let mut out = self.clone();
        for (k, v) in &overrides.entries {
            out.entries.insert(k.clone(), v.clone());
        }
        out
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::InvalidConfig(format!("missing required key '{key}'")))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        parse(key, self.require(key)?)
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        parse(key, self.require(key)?)
    }

    pub fn get_u64_list(&self, key: &str) -> Result<Vec<u64>> {
        self.require(key)?
            .split(',')
            .map(|s| parse(key, s.trim()))
            .collect()
    }

    pub fn get_f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.require(key)?
            .split(',')
            .map(|s| parse(key, s.trim()))
            .collect()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Sorted `key = value` lines; the hashed canonical form.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::InvalidConfig(format!("key '{key}': cannot parse '{raw}'")))
}

/// Write a CSV with a header row and the config-hash footer comment.
pub fn write_csv(path: &Path, header: &str, rows: &[String], config_hash: &str) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{header}")?;
    for row in rows {
        writeln!(w, "{row}")?;
    }
    writeln!(w, "# config-hash: {config_hash}")?;
    w.flush()?;
    Ok(())
}

/// Read back a CSV written by [`write_csv`]: (header, rows, hash).
pub fn read_csv(path: &Path) -> Result<(String, Vec<Vec<String>>, Option<String>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Report(format!("{}: empty CSV", path.display())))?
        .to_string();
    let mut rows = Vec::new();
    let mut hash = None;
    for line in lines {
        if let Some(rest) = line.strip_prefix("# config-hash:") {
            hash = Some(rest.trim().to_string());
        } else if !line.trim().is_empty() && !line.starts_with('#') {
            rows.push(line.split(',').map(|s| s.to_string()).collect());
        }
    }
    Ok((header, rows, hash))
}
