//! Run configuration merged from flags, a `key = value` file, `LRASR_*`
//! environment variables and defaults, in that order of precedence.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const ENV_PREFIX: &str = "LRASR_";

/// A configuration key. An empty default means "unset".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

impl Key {
    pub fn flag(&self) -> String {
        self.name.replace('_', "-")
    }

    pub fn env(&self) -> String {
        format!("{ENV_PREFIX}{}", self.name.to_ascii_uppercase())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    Default,
    Env,
    File,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::Env => "env",
            Source::File => "file",
            Source::Flag => "flag",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("config file line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("{key} ({origin}): cannot parse {value:?}: {message}")]
    Value { key: String, value: String, origin: Source, message: String },
    #[error("{0} is required")]
    Missing(String),
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { line: i + 1, message: "expected key = value".into() })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, message: "empty key".into() });
        }
        out.push((k.replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, (String, Source)>,
}

impl RunConfig {
    /// `known` lists every key the program accepts; `keys` those that affect
    /// this run. File entries outside `known` are rejected; known keys that
    /// do not apply here are ignored.
    pub fn resolve(
        keys: &[Key],
        known: &[Key],
        flags: &BTreeMap<String, String>,
        file: &[(String, String)],
        env: &BTreeMap<String, String>,
    ) -> Result<Self, ConfigError> {
        for (k, _) in file {
            if !known.iter().any(|key| key.name == k) {
                return Err(ConfigError::UnknownKey(k.clone()));
            }
        }
        for k in flags.keys() {
            if !keys.iter().any(|key| key.name == k) {
                return Err(ConfigError::UnknownKey(k.clone()));
            }
        }
        let mut values = BTreeMap::new();
        for key in keys {
            let from_file = file.iter().rev().find(|(k, _)| k == key.name).map(|(_, v)| v.clone());
            let picked = if let Some(v) = flags.get(key.name) {
                (v.clone(), Source::Flag)
            } else if let Some(v) = from_file {
                (v, Source::File)
            } else if let Some(v) = env.get(&key.env()) {
                (v.clone(), Source::Env)
            } else {
                (key.default.to_string(), Source::Default)
            };
            values.insert(key.name, picked);
        }
        Ok(Self { values })
    }

    fn entry(&self, key: &str) -> &(String, Source) {
        self.values.get(key).unwrap_or_else(|| panic!("config key {key} is not registered for this command"))
    }

    pub fn str(&self, key: &str) -> &str {
        &self.entry(key).0
    }

    pub fn opt(&self, key: &str) -> Option<&str> {
        Some(self.str(key)).filter(|v| !v.is_empty())
    }

    pub fn required(&self, key: &str) -> Result<&str, ConfigError> {
        self.opt(key).ok_or_else(|| ConfigError::Missing(format!("--{}", key.replace('_', "-"))))
    }

    pub fn source(&self, key: &str) -> Source {
        self.entry(key).1
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let (v, source) = self.entry(key);
        v.parse().map_err(|e: T::Err| ConfigError::Value {
            key: key.into(),
            value: v.clone(),
            origin: *source,
            message: e.to_string(),
        })
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        if self.opt(key).is_none() {
            return Ok(None);
        }
        self.get(key).map(Some)
    }

    pub fn bad(&self, key: &str, message: impl Into<String>) -> ConfigError {
        let (v, source) = self.entry(key);
        ConfigError::Value { key: key.into(), value: v.clone(), origin: *source, message: message.into() }
    }

    /// `key = value` lines in key order, each preceded by a comment naming
    /// where the value came from. Parseable as a config file.
    pub fn echo(&self) -> String {
        self.values.iter().map(|(k, (v, s))| format!("# {s}\n{k} = {v}\n")).collect()
    }

    /// The `key = value` pairs alone, for run-log headers.
    pub fn pairs(&self) -> Vec<(&'static str, &str)> {
        self.values.iter().map(|(k, (v, _))| (*k, v.as_str())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KEYS: [Key; 3] = [
        Key { name: "beam_width", default: "50", help: "" },
        Key { name: "lm_weight", default: "0.5", help: "" },
        Key { name: "lm", default: "", help: "" },
    ];

    fn map(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn precedence_flag_file_env_default() {
        let file = parse_config_file("# c\nbeam_width = 8\nlm-weight=0.9\n").unwrap();
        let env = map(&[("LRASR_BEAM_WIDTH", "4"), ("LRASR_LM_WEIGHT", "0.1"), ("LRASR_LM", "x.arpa")]);
        let flags = map(&[("beam_width", "16")]);
        let c = RunConfig::resolve(&KEYS, &KEYS, &flags, &file, &env).unwrap();
        assert_eq!(c.get::<usize>("beam_width").unwrap(), 16);
        assert_eq!(c.get::<f64>("lm_weight").unwrap(), 0.9);
        assert_eq!(c.opt("lm"), Some("x.arpa"));
        assert_eq!(c.source("lm"), Source::Env);
        let d = RunConfig::resolve(&KEYS, &KEYS, &BTreeMap::new(), &[], &BTreeMap::new()).unwrap();
        assert_eq!(d.str("beam_width"), "50");
        assert_eq!(d.opt("lm"), None);
        assert!(d.required("lm").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let file = parse_config_file("beam_wdth = 8").unwrap();
        let err = RunConfig::resolve(&KEYS, &KEYS, &BTreeMap::new(), &file, &BTreeMap::new()).unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey("beam_wdth".into()));
        assert!(matches!(parse_config_file("novalue"), Err(ConfigError::Syntax { line: 1, .. })));
    }

    #[test]
    fn known_keys_for_other_commands_are_ignored() {
        let file = parse_config_file("lm = a.arpa\nbeam_width = 3").unwrap();
        let c = RunConfig::resolve(&KEYS[..1], &KEYS, &BTreeMap::new(), &file, &BTreeMap::new()).unwrap();
        assert_eq!(c.pairs(), vec![("beam_width", "3")]);
    }

    #[test]
    fn echo_parses_back() {
        let c = RunConfig::resolve(&KEYS, &KEYS, &map(&[("lm", "m.arpa")]), &[], &BTreeMap::new()).unwrap();
        let echoed = c.echo();
        assert!(echoed.contains("# flag\nlm = m.arpa\n"), "{echoed}");
        let reparsed = parse_config_file(&echoed).unwrap();
        let again = RunConfig::resolve(&KEYS, &KEYS, &BTreeMap::new(), &reparsed, &BTreeMap::new()).unwrap();
        assert_eq!(again.pairs(), c.pairs());
        assert!(c.get::<usize>("lm").is_err());
    }
}
