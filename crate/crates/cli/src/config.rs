//! `key = value` run configuration. Flags given on the command line win.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

pub const KEYS: &[&str] = &[
    "seed",
    "count",
    "frames",
    "d",
    "blocks",
    "heads",
    "factor",
    "ffn_mult",
    "lr",
    "batch",
    "steps",
    "shift",
    "grad_clip",
    "cosine_decay",
    "sample_steps",
    "width",
    "height",
    "focal",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("config line {}: expected key = value", i + 1))
            })?;
            let k = k.trim().replace('-', "_");
            if !KEYS.contains(&k.as_str()) {
                return Err(CliError::Usage(format!(
                    "config line {}: unknown key {k:?}",
                    i + 1
                )));
            }
            values.insert(k, v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The flag value if present, else the config value, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(s) => s
                .parse()
                .map_err(|_| CliError::Usage(format!("config key {key}: cannot parse {s:?}"))),
            None => Ok(default),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let c = RunConfig::parse("# run\nlr = 0.001\nsteps=50\n\nseed = 9 # trailing\n").unwrap();
        assert_eq!(c.pick(None, "lr", 5e-5).unwrap(), 0.001);
        assert_eq!(c.pick(Some(7u64), "seed", 0).unwrap(), 7);
        assert_eq!(c.pick(None, "seed", 0u64).unwrap(), 9);
        assert_eq!(c.pick(None, "batch", 16usize).unwrap(), 16);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(matches!(
            RunConfig::parse("colour = red"),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            RunConfig::parse("lr 0.1"),
            Err(CliError::Usage(_))
        ));
        let c = RunConfig::parse("lr = fast").unwrap();
        assert!(c.pick(None, "lr", 0.0f64).is_err());
    }
}
