//! `key = value` config files layered under command-line flags.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::Failure;

/// Parsed config file. Keys are the long flag names without dashes.
#[derive(Debug, Default)]
pub struct ConfigFile {
    entries: BTreeMap<String, (usize, String)>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|m| Failure::Usage(format!("{}: {m}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
            let key = k.trim().replace('_', "-");
            if entries
                .insert(key.clone(), (i + 1, v.trim().to_string()))
                .is_some()
            {
                return Err(format!("line {}: duplicate key '{key}'", i + 1));
            }
        }
        Ok(Self { entries })
    }

    /// The flag value if given, else the config value, removing the key.
    pub fn pick<T: FromStr>(&mut self, flag: Option<T>, key: &str) -> Result<Option<T>, Failure>
    where
        T::Err: std::fmt::Display,
    {
        let from_file = self.entries.remove(key);
        if flag.is_some() {
            return Ok(flag);
        }
        match from_file {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|e| {
                Failure::Usage(format!(
                    "config line {line}: bad value '{v}' for {key}: {e}"
                ))
            }),
        }
    }

    /// Boolean switches: a set flag wins, otherwise the config value.
    pub fn switch(&mut self, flag: bool, key: &str) -> Result<bool, Failure> {
        Ok(self.pick(flag.then_some(true), key)?.unwrap_or(false))
    }

    /// Fails on keys that no option consumed.
    pub fn finish(self) -> Result<(), Failure> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => Err(Failure::Usage(format!(
                "config line {line}: unknown key '{key}'"
            ))),
        }
    }
}
