//! Option resolution: a command-line flag wins over the config file, which
//! wins over the built-in default. Every resolved value is recorded so the
//! run can be replayed from its manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

/// Keys allowed at the top level of a config file.
pub const GLOBAL_KEYS: [&str; 4] = ["seed", "threads", "toy", "run-dir"];

#[derive(Debug, Clone, PartialEq)]
enum Resolved {
    Value(String),
    Switch(bool),
}

#[derive(Debug, Default)]
pub struct Settings {
    file: toml::Table,
    section: String,
    used: BTreeSet<String>,
    resolved: BTreeMap<String, Resolved>,
}

fn scalar_text(key: &str, v: &toml::Value) -> Result<String, CliError> {
    match v {
        toml::Value::String(s) => Ok(s.clone()),
        toml::Value::Integer(i) => Ok(i.to_string()),
        toml::Value::Float(f) => Ok(f.to_string()),
        toml::Value::Boolean(b) => Ok(b.to_string()),
        _ => Err(CliError::Usage(format!("config key `{key}` must be a scalar"))),
    }
}

impl Settings {
    /// Settings for subcommand `section`, reading `path` if given.
    pub fn load(path: Option<&Path>, section: &str) -> Result<Self, CliError> {
        let file = match path {
            None => toml::Table::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
        };
        Ok(Settings {
            file,
            section: section.to_string(),
            ..Default::default()
        })
    }

    fn lookup(&mut self, key: &str) -> Option<toml::Value> {
        self.used.insert(key.to_string());
        let scoped = self
            .file
            .get(&self.section)
            .and_then(|t| t.as_table())
            .and_then(|t| t.get(key));
        let global = if GLOBAL_KEYS.contains(&key) { self.file.get(key) } else { None };
        scoped.or(global).cloned()
    }

    fn parse<T: FromStr>(key: &str, text: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        text.parse()
            .map_err(|e| CliError::Usage(format!("invalid value `{text}` for `{key}`: {e}")))
    }

    /// An optional setting without a default.
    pub fn optional<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        let v = match (flag, self.lookup(key)) {
            (Some(v), _) => Some(v),
            (None, Some(v)) => Some(Self::parse(key, &scalar_text(key, &v)?)?),
            (None, None) => None,
        };
        if let Some(v) = &v {
            self.resolved.insert(key.to_string(), Resolved::Value(v.to_string()));
        }
        Ok(v)
    }

    pub fn value<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        match self.optional(key, flag)? {
            Some(v) => Ok(v),
            None => {
                self.resolved.insert(key.to_string(), Resolved::Value(default.to_string()));
                Ok(default)
            }
        }
    }

    /// A path option. Existing paths are recorded in absolute form so a
    /// manifest can be replayed from any working directory.
    pub fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
        let Some(p) = self.optional(key, flag.map(|p| p.display().to_string()))?.map(PathBuf::from) else {
            return Ok(None);
        };
        let p = std::fs::canonicalize(&p).unwrap_or(p);
        self.resolved
            .insert(key.to_string(), Resolved::Value(p.display().to_string()));
        Ok(Some(p))
    }

    pub fn required_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        self.path(key, flag)?
            .ok_or_else(|| CliError::Usage(format!("missing required option --{key}")))
    }

    /// A boolean switch: present on the command line means true.
    pub fn switch(&mut self, key: &str, given: bool) -> Result<bool, CliError> {
        let on = if given {
            true
        } else {
            match self.lookup(key) {
                Some(toml::Value::Boolean(b)) => b,
                Some(_) => return Err(CliError::Usage(format!("config key `{key}` must be true or false"))),
                None => false,
            }
        };
        self.resolved.insert(key.to_string(), Resolved::Switch(on));
        Ok(on)
    }

    /// Rejects config keys that no option consumed.
    pub fn finish(&self, sections: &[&str]) -> Result<(), CliError> {
        for (k, v) in &self.file {
            if v.is_table() {
                if !sections.contains(&k.as_str()) {
                    return Err(CliError::Usage(format!("unknown config section [{k}]")));
                }
                if *k == self.section {
                    for key in v.as_table().into_iter().flat_map(|t| t.keys()) {
                        if !self.used.contains(key) {
                            return Err(CliError::Usage(format!("unknown config key `{key}` in [{k}]")));
                        }
                    }
                }
            } else if !GLOBAL_KEYS.contains(&k.as_str()) {
                return Err(CliError::Usage(format!("unknown top-level config key `{k}`")));
            }
        }
        Ok(())
    }

    /// Resolved values as strings, switches as `true`/`false`.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        self.resolved
            .iter()
            .map(|(k, v)| {
                let s = match v {
                    Resolved::Value(s) => s.clone(),
                    Resolved::Switch(b) => b.to_string(),
                };
                (k.clone(), s)
            })
            .collect()
    }

    /// Command-line arguments that reproduce the resolved settings, minus
    /// the ones listed in `skip`.
    pub fn argv(&self, skip: &[&str]) -> Vec<String> {
        let mut out = vec![self.section.clone()];
        for (k, v) in &self.resolved {
            if skip.contains(&k.as_str()) {
                continue;
            }
            match v {
                Resolved::Value(s) => {
                    out.push(format!("--{k}"));
                    out.push(s.clone());
                }
                Resolved::Switch(true) => out.push(format!("--{k}")),
                Resolved::Switch(false) => {}
            }
        }
        out
    }
}
