//! Plain-text `key = value` config files merged under command-line flags.
//!
//! Keys are the long flag names; `_` and `-` are interchangeable. Blank lines
//! and lines starting with `#` are ignored. A key the command does not know
//! is an error.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{CliError, CliResult};

#[derive(Debug, Default)]
pub struct Settings {
    source: Option<PathBuf>,
    values: BTreeMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('_', "-")
}

impl Settings {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("reading config {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, source: &Path) -> CliResult<Self> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("{}:{}: expected `key = value`", source.display(), i + 1))
            })?;
            if values.insert(normalize(k), v.trim().to_string()).is_some() {
                return Err(CliError::Usage(format!("{}:{}: duplicate key `{}`", source.display(), i + 1, k.trim())));
            }
        }
        Ok(Self { source: Some(source.to_path_buf()), values })
    }

    fn origin(&self) -> String {
        self.source.as_ref().map_or_else(|| "config".into(), |p| p.display().to_string())
    }

    /// Removes and parses `key`.
    pub fn take<T: FromStr>(&mut self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: Display,
    {
        let Some(raw) = self.values.remove(key) else { return Ok(None) };
        raw.parse()
            .map(Some)
            .map_err(|e| CliError::Usage(format!("{}: bad value `{raw}` for `{key}`: {e}", self.origin())))
    }

    /// The flag if given, else the config value.
    pub fn pick<T: FromStr>(&mut self, flag: Option<T>, key: &str) -> CliResult<Option<T>>
    where
        T::Err: Display,
    {
        let from_file = self.take(key)?;
        Ok(flag.or(from_file))
    }

    /// A switch is on if either the flag or the config turns it on.
    pub fn switch(&mut self, flag: bool, key: &str) -> CliResult<bool> {
        Ok(flag || self.take::<bool>(key)?.unwrap_or(false))
    }

    /// Hands over every remaining entry.
    pub fn drain(&mut self) -> BTreeMap<String, String> {
        std::mem::take(&mut self.values)
    }

    /// Fails on keys nobody consumed.
    pub fn finish(self, command: &str) -> CliResult<()> {
        match self.values.keys().next() {
            None => Ok(()),
            Some(k) => Err(CliError::Usage(format!("{}: unknown key `{k}` for `{command}`", self.origin()))),
        }
    }
}
