//! Reproducibility record written beside every output as `<output>.run.txt`.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};

pub struct Echo {
    lines: Vec<(String, String)>,
}

impl Echo {
    pub fn new(command: &str) -> Self {
        Self { lines: vec![("command".into(), command.into()), ("version".into(), env!("CARGO_PKG_VERSION").into())] }
    }

    /// Records a parameter; a repeated key keeps its first position and the
    /// latest value.
    pub fn set(&mut self, key: &str, value: impl Display) -> &mut Self {
        let value = value.to_string();
        match self.lines.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.lines.push((key.into(), value)),
        }
        self
    }

    pub fn path_for(output: &Path) -> PathBuf {
        let mut s = output.as_os_str().to_owned();
        s.push(".run.txt");
        PathBuf::from(s)
    }

    pub fn write(&self, output: &Path) -> Result<()> {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let mut text: String = self.lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        text.push_str(&format!("timestamp={secs}\n"));
        let path = Self::path_for(output);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
