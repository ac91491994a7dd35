//! Flat `section.key = value` run configuration: defaults, then file,
//! then command-line flags, each layer overriding the previous one.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Clone, Debug, Default)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Config {
    pub fn new() -> Config {
        Config::default()
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn set_opt(&mut self, key: &str, value: Option<impl Display>) {
        if let Some(v) = value {
            self.set(key, v);
        }
    }

    /// Overlays `key = value` lines from a file. `#` starts a comment.
    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "config {} line {}: expected 'key = value', got '{raw}'",
                    path.display(),
                    i + 1
                )));
            };
            self.set(key.trim(), value.trim());
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.get(key).ok_or_else(|| {
            CliError::Usage(format!("missing required setting '{key}' (flag or config file)"))
        })
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| CliError::Usage(format!("setting '{key}': bad value '{raw}'")))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    /// Echoes the fully resolved configuration into the run directory.
    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.render())
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}
