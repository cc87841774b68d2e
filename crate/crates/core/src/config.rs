//! Plain-text `key = value` configuration with command-line overrides.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::datamodel::read_text;
use crate::error::{Error, Result};

/// Every key a config file may set.
pub const KNOWN_KEYS: &[&str] = &[
    "alpha",
    "audit",
    "beta1",
    "beta2",
    "dataset",
    "dither",
    "dump_payloads",
    "epsilon",
    "eta",
    "feeder",
    "gamma",
    "graph",
    "held_out",
    "horizon",
    "iters",
    "load_p",
    "load_q",
    "margin",
    "mode",
    "mu",
    "noise_std",
    "online_iters",
    "out",
    "partition",
    "probe_amplitude",
    "reference",
    "refresh_every",
    "retention",
    "scenario",
    "seed",
    "trace_every",
    "v_max",
    "v_min",
    "window",
];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Config::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(format!("line {}", no + 1), "expected `key = value`"))?;
            config
                .set(key.trim(), value.trim())
                .map_err(|e| Error::parse(format!("line {}", no + 1), e.to_string()))?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?).map_err(|e| match e {
            Error::Parse { location, message } => Error::Parse {
                location: format!("{}: {location}", path.display()),
                message,
            },
            other => other,
        })
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        self.entries.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Sets `key` only when `value` is present.
    pub fn set_opt<T: ToString>(&mut self, key: &str, value: Option<T>) -> Result<()> {
        match value {
            Some(v) => self.set(key, v.to_string()),
            None => Ok(()),
        }
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Typed lookup with a default for missing keys.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{raw}` for `{key}`"))),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// The config file text that reproduces this configuration.
    pub fn to_text(&self) -> String {
        self.entries().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_overrides() {
        let mut c = Config::parse("# solver\nalpha = 0.002\nmode=adam  # inline\n\niters = 10\n").unwrap();
        assert_eq!(c.get_or("alpha", 0.0).unwrap(), 0.002);
        assert_eq!(c.get_str("mode"), Some("adam"));
        c.set("iters", "20").unwrap();
        c.set_opt::<u64>("seed", None).unwrap();
        assert_eq!(c.get_or("iters", 0u64).unwrap(), 20);
        assert_eq!(c.get_or("seed", 5u64).unwrap(), 5);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(Config::parse("alpah = 1"), Err(Error::Parse { .. })));
        assert!(Config::parse("alpha 1").is_err());
        let c = Config::parse("iters = ten").unwrap();
        assert!(matches!(c.get_or("iters", 0u64), Err(Error::Config(_))));
    }

    #[test]
    fn text_round_trip() {
        let c = Config::parse("seed = 7\nalpha = 1e-3\ngraph = ring\n").unwrap();
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    }
}
