//! Flag > file > default resolution over a flat `key = value` file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Values from an optional config file, plus the record of every value
/// actually used so the run can be replayed from it.
pub struct Settings {
    file: BTreeMap<String, String>,
    resolved: Vec<(String, String)>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are
/// skipped. Repeated keys are an error.
pub fn parse_file(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("config line {}: expected key = value", n + 1))
        })?;
        let key = normalize(k);
        if key.is_empty() {
            return Err(CliError::Usage(format!("config line {}: empty key", n + 1)));
        }
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::Usage(format!("config key `{key}` given twice")));
        }
    }
    Ok(map)
}

impl Settings {
    /// Loads `path` (if any) and rejects keys outside `allowed`.
    pub fn load(path: Option<&Path>, allowed: &[&str]) -> Result<Self, CliError> {
        let file = match path {
            None => BTreeMap::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Usage(format!("cannot read config {}: {e}", p.display()))
                })?;
                parse_file(&text)?
            }
        };
        if let Some(bad) = file.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(CliError::Usage(format!(
                "unknown config key `{bad}` (allowed: {})",
                allowed.join(", ")
            )));
        }
        Ok(Self {
            file,
            resolved: Vec::new(),
        })
    }

    fn from_file<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.file
            .get(key)
            .map(|raw| {
                raw.parse::<T>().map_err(|_| {
                    CliError::Usage(format!("config key `{key}`: cannot parse `{raw}`"))
                })
            })
            .transpose()
    }

    /// Flag, else file, else `fallback()`; `None` when all are absent.
    pub fn maybe<T: FromStr + Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
        fallback: impl FnOnce() -> Option<T>,
    ) -> Result<Option<T>, CliError> {
        let v = match flag {
            Some(v) => Some(v),
            None => match self.from_file(key)? {
                Some(v) => Some(v),
                None => fallback(),
            },
        };
        if let Some(v) = &v {
            self.resolved.push((key.to_string(), v.to_string()));
        }
        Ok(v)
    }

    pub fn get<T: FromStr + Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T, CliError> {
        Ok(self
            .maybe(key, flag, || Some(default))?
            .expect("default supplied"))
    }

    /// A value with no default; missing is a usage error.
    pub fn require<T: FromStr + Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> Result<T, CliError> {
        self.maybe(key, flag, || None)?
            .ok_or_else(|| CliError::Usage(format!("missing required setting `{key}`")))
    }

    /// The resolved settings as a config file.
    pub fn render(&self, command: &str) -> String {
        let mut s = format!("# resolved settings for `{command}`\n");
        for (k, v) in &self.resolved {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}
