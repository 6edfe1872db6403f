//! Layered run settings: built-in defaults, then a `key=value` file, then
//! command-line flags. The resolved set is written back as the manifest,
//! which is itself a valid config file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{CliError, Result};

/// Every key any subcommand understands. Keys from other subcommands are
/// tolerated in a shared config file; anything else is rejected.
const KNOWN_KEYS: &[&str] = &[
    "action-column", "arms", "coef-seed", "confounder", "cuts", "decay", "drop", "estimator", "experiment",
    "feature", "features", "floors", "gammas", "grid", "input", "k-folds", "n", "noise-sd", "output-dir",
    "overlap-floor", "pmin", "policy", "replications", "reveal", "reward-column", "ridge", "risk", "rho",
    "seed", "seeds", "step", "subsample", "sweeps", "update-mode", "warm-count", "weak-threshold",
];

/// A key accepted by one subcommand, with its default if it has one.
pub type KeySpec = (&'static str, Option<&'static str>);

#[derive(Debug, Clone)]
pub struct Settings {
    command: &'static str,
    values: BTreeMap<&'static str, String>,
}

impl Settings {
    pub fn resolve(
        command: &'static str,
        keys: &[KeySpec],
        file: Option<&Path>,
        flags: Vec<(&'static str, Option<String>)>,
    ) -> Result<Self> {
        let mut values: BTreeMap<&'static str, String> = keys
            .iter()
            .filter_map(|&(k, d)| d.map(|d| (k, d.to_string())))
            .collect();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            for (key, value) in parse_config(&text)? {
                if key == "command" {
                    if value != command {
                        return Err(CliError::Usage(format!(
                            "{} was written for `{value}`, not `{command}`",
                            path.display()
                        )));
                    }
                    continue;
                }
                if !KNOWN_KEYS.contains(&key.as_str()) {
                    let valid: Vec<&str> = keys.iter().map(|k| k.0).collect();
                    return Err(CliError::Usage(format!(
                        "unknown key `{key}` in {}; `{command}` accepts: {}",
                        path.display(),
                        valid.join(", ")
                    )));
                }
                if let Some(&(k, _)) = keys.iter().find(|(k, _)| *k == key) {
                    values.insert(k, value);
                }
            }
        }
        for (key, value) in flags {
            if let Some(v) = value {
                debug_assert!(keys.iter().any(|(k, _)| *k == key), "flag {key} missing from key list");
                values.insert(key, v);
            }
        }
        Ok(Self { command, values })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &'static str, value: impl Display) {
        self.values.insert(key, value.to_string());
    }

    pub fn get<T>(&self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.opt(key)?
            .ok_or_else(|| CliError::Usage(format!("`{}` needs --{key}", self.command)))
    }

    pub fn opt<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| CliError::Usage(format!("invalid value `{v}` for --{key}: {e}")))
            })
            .transpose()
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.get::<String>(key).map(PathBuf::from)
    }

    /// Comma-separated list; an empty value is an empty list.
    pub fn list<T>(&self, key: &str) -> Result<Vec<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(Vec::new()),
            Some(v) => split_list(v)
                .map(|item| {
                    item.parse()
                        .map_err(|e| CliError::Usage(format!("invalid item `{item}` in --{key}: {e}")))
                })
                .collect(),
        }
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        Ok(self.opt::<bool>(key)?.unwrap_or(false))
    }

    pub fn manifest(&self) -> String {
        let mut out = format!("# oplkit {}\ncommand={}\n", env!("CARGO_PKG_VERSION"), self.command);
        for (k, v) in &self.values {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

/// `key=value` lines; blank lines and `#` comments are skipped. Underscores
/// in keys are read as dashes.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value, got `{line}`", n + 1)))?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const KEYS: &[KeySpec] = &[("seed", Some("0")), ("ridge", Some("1")), ("input", None)];

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nseed = 5\nk_folds=3\nridge=2\n").unwrap();
        let s = Settings::resolve("fit", KEYS, Some(&path), vec![("ridge", Some("4".into()))]).unwrap();
        assert_eq!(s.get::<u64>("seed").unwrap(), 5);
        assert_eq!(s.get::<f64>("ridge").unwrap(), 4.0);
        assert!(s.raw("k-folds").is_none());
        assert!(matches!(s.get::<String>("input"), Err(CliError::Usage(_))));
    }

    #[test]
    fn manifest_round_trips() {
        let mut s = Settings::resolve("fit", KEYS, None, vec![("input", Some("a.csv".into()))]).unwrap();
        s.set("ridge", 0.5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        std::fs::write(&path, s.manifest()).unwrap();
        let back = Settings::resolve("fit", KEYS, Some(&path), vec![]).unwrap();
        assert_eq!(back.values, s.values);
        assert!(Settings::resolve("search", KEYS, Some(&path), vec![]).is_err());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        std::fs::write(&path, "sead=1\n").unwrap();
        assert!(matches!(Settings::resolve("fit", KEYS, Some(&path), vec![]), Err(CliError::Usage(_))));
        let s = Settings::resolve("fit", KEYS, None, vec![("seed", Some("x".into()))]).unwrap();
        assert!(matches!(s.get::<u64>("seed"), Err(CliError::Usage(_))));
        assert_eq!(parse_config("a=1\n\n b_c = 2 ").unwrap()[1], ("b-c".to_string(), "2".to_string()));
    }
}
