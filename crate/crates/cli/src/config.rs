//! Settings shared by every subcommand.
//!
//! Each value is taken from the first source that sets it: command-line
//! flag, then the TOML config file, then a `TREEPROBE_*` environment
//! variable, then the built-in default. Credentials are never read from
//! here; only the *name* of the variable holding the key is configurable.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;

pub const CONFIG_ENV: &str = "TREEPROBE_CONFIG";

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub seed: Option<u64>,
    pub cache_dir: Option<PathBuf>,
    pub parallelism: Option<usize>,
    pub model: Option<String>,
    pub endpoint: Option<String>,
    pub api_key_env: Option<String>,
    pub prompt_budget: Option<usize>,
    pub timeout_ms: Option<u64>,
    pub min_interval_ms: Option<u64>,
}

impl Layer {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Reads `TREEPROBE_<FIELD>` variables through `get`.
    pub fn from_env(get: impl Fn(&str) -> Option<String>) -> anyhow::Result<Self> {
        fn parse<T: std::str::FromStr>(key: &str, value: Option<String>) -> anyhow::Result<Option<T>> {
            match value {
                None => Ok(None),
                Some(v) => match v.trim().parse() {
                    Ok(x) => Ok(Some(x)),
                    Err(_) => bail!("{key}={v:?} is not a valid value"),
                },
            }
        }
        let var = |name: &str| get(&format!("TREEPROBE_{name}")).filter(|v| !v.is_empty());
        Ok(Self {
            seed: parse("TREEPROBE_SEED", var("SEED"))?,
            cache_dir: var("CACHE_DIR").map(PathBuf::from),
            parallelism: parse("TREEPROBE_PARALLELISM", var("PARALLELISM"))?,
            model: var("MODEL"),
            endpoint: var("ENDPOINT"),
            api_key_env: var("API_KEY_ENV"),
            prompt_budget: parse("TREEPROBE_PROMPT_BUDGET", var("PROMPT_BUDGET"))?,
            timeout_ms: parse("TREEPROBE_TIMEOUT_MS", var("TIMEOUT_MS"))?,
            min_interval_ms: parse("TREEPROBE_MIN_INTERVAL_MS", var("MIN_INTERVAL_MS"))?,
        })
    }

    /// Fields set in `self` win over `lower`.
    pub fn over(self, lower: Layer) -> Layer {
        Layer {
            seed: self.seed.or(lower.seed),
            cache_dir: self.cache_dir.or(lower.cache_dir),
            parallelism: self.parallelism.or(lower.parallelism),
            model: self.model.or(lower.model),
            endpoint: self.endpoint.or(lower.endpoint),
            api_key_env: self.api_key_env.or(lower.api_key_env),
            prompt_budget: self.prompt_budget.or(lower.prompt_budget),
            timeout_ms: self.timeout_ms.or(lower.timeout_ms),
            min_interval_ms: self.min_interval_ms.or(lower.min_interval_ms),
        }
    }
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub cache_dir: Option<PathBuf>,
    pub parallelism: usize,
    pub model: String,
    pub endpoint: Option<String>,
    pub api_key_env: Option<String>,
    pub prompt_budget: Option<usize>,
    pub timeout_ms: Option<u64>,
    pub min_interval_ms: Option<u64>,
}

impl Settings {
    pub fn resolve(flags: Layer, config_path: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> anyhow::Result<Self> {
        let config_path = config_path.map(Path::to_path_buf).or_else(|| env(CONFIG_ENV).map(PathBuf::from));
        let file = match &config_path {
            Some(p) => Layer::from_file(p)?,
            None => Layer::default(),
        };
        let merged = flags.over(file).over(Layer::from_env(&env)?);
        let parallelism = merged.parallelism.unwrap_or(4);
        if parallelism == 0 {
            bail!("parallelism must be at least 1");
        }
        Ok(Self {
            seed: merged.seed.unwrap_or(0),
            cache_dir: merged.cache_dir,
            parallelism,
            model: merged.model.unwrap_or_else(|| "gpt-4o".to_string()),
            endpoint: merged.endpoint,
            api_key_env: merged.api_key_env,
            prompt_budget: merged.prompt_budget,
            timeout_ms: merged.timeout_ms,
            min_interval_ms: merged.min_interval_ms,
        })
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;

    fn env(pairs: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let map: HashMap<String, String> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        move |k| map.get(k).cloned()
    }

    #[test]
    fn flags_beat_file_beat_env() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 2\nparallelism = 8\nmodel = \"from-file\"\n").unwrap();
        let flags = Layer {
            seed: Some(1),
            ..Layer::default()
        };
        let e = env(&[("TREEPROBE_SEED", "3"), ("TREEPROBE_PARALLELISM", "16"), ("TREEPROBE_ENDPOINT", "http://x")]);
        let s = Settings::resolve(flags, Some(&path), e).unwrap();
        assert_eq!(s.seed, 1);
        assert_eq!(s.parallelism, 8);
        assert_eq!(s.model, "from-file");
        assert_eq!(s.endpoint.as_deref(), Some("http://x"));
    }

    #[test]
    fn config_path_from_env() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 9\n").unwrap();
        let s = Settings::resolve(Layer::default(), None, env(&[(CONFIG_ENV, path.to_str().unwrap())])).unwrap();
        assert_eq!(s.seed, 9);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(Settings::resolve(Layer::default(), None, env(&[("TREEPROBE_SEED", "x")])).is_err());
        let zero = Layer {
            parallelism: Some(0),
            ..Layer::default()
        };
        assert!(Settings::resolve(zero, None, env(&[])).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "api_key = \"secret\"\n").unwrap();
        assert!(Settings::resolve(Layer::default(), Some(&path), env(&[])).is_err());
    }
}
