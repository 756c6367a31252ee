//! Layered configuration: built-in defaults, then a TOML or JSON file,
//! then `FREETUMOR__*` environment variables, then `--set` pairs.
//! Every layer may only name keys the defaults already have.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use freetumor_core::adversarial::AdvConfig;
use freetumor_core::benchmark::BenchmarkConfig;
use freetumor_core::models::WindowParams;
use freetumor_core::phantom::PhantomConfig;
use freetumor_core::pipeline::SegTrainConfig;
use freetumor_core::volume::HuWindow;
use freetumor_turing::TuringDesign;

/// `FREETUMOR__SEG__EPOCHS=5` sets `seg.epochs`.
pub const ENV_PREFIX: &str = "FREETUMOR__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    /// Stage 1 and Stage 2 settings.
    pub adv: AdvConfig,
    /// Final segmentation training (baseline or augmented).
    pub seg: SegTrainConfig,
    pub infer: WindowParams,
    pub turing: TuringConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub phantom: PhantomConfig,
    pub window: HuWindow,
    /// Shares of `phantom-gen --count` that are labeled and test cases;
    /// the rest is the unlabeled pool.
    pub labeled_fraction: f64,
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuringConfig {
    pub design: TuringDesign,
    /// Base seed of per-session case orders.
    pub order_seed: u64,
    pub bind: String,
}

impl Default for Config {
    fn default() -> Self {
        let b = BenchmarkConfig::default();
        Config {
            data: DataConfig {
                phantom: b.phantom,
                window: b.window,
                labeled_fraction: 0.08,
                test_fraction: 0.12,
            },
            adv: b.adv,
            seg: b.seg,
            infer: b.infer,
            turing: TuringConfig {
                design: TuringDesign::default(),
                order_seed: 0,
                bind: "127.0.0.1".into(),
            },
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {reason}")]
    InvalidValue { key: String, reason: String },
    #[error("cannot read config {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("invalid override `{0}`: expected key=value")]
    MalformedOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug)]
pub struct Resolved {
    pub config: Config,
    pub value: Value,
    pub hash: String,
}

pub fn resolve(file: Option<&Path>, env: &[(String, String)], sets: &[String]) -> Result<Resolved, ConfigError> {
    let mut value = serde_json::to_value(Config::default()).expect("config serializes");
    if let Some(path) = file {
        let unreadable = |reason: String| ConfigError::Unreadable {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| unreadable(e.to_string()))?;
        let layer: Value = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| unreadable(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| unreadable(e.to_string()))?
        };
        merge(&mut value, layer, "")?;
    }
    let mut env: Vec<&(String, String)> = env.iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    env.sort();
    for (k, v) in env {
        let key = k[ENV_PREFIX.len()..].to_ascii_lowercase().replace("__", ".");
        set_path(&mut value, &key, v)?;
    }
    for s in sets {
        let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::MalformedOverride(s.clone()))?;
        set_path(&mut value, k.trim(), v)?;
    }
    let config: Config = serde_path_to_error::deserialize(value.clone()).map_err(|e| ConfigError::InvalidValue {
        key: e.path().to_string(),
        reason: e.inner().to_string(),
    })?;
    validate(&config)?;
    // Re-serialize so the hash covers the normalized form.
    let value = serde_json::to_value(&config).expect("config serializes");
    let hash = hex::encode(Sha256::digest(serde_json::to_vec(&value).expect("value serializes")));
    Ok(Resolved { config, value, hash })
}

fn validate(c: &Config) -> Result<(), ConfigError> {
    let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
    c.data.phantom.validate().map_err(|e| inv(&e))?;
    HuWindow::new(c.data.window.lo, c.data.window.hi).map_err(|e| inv(&e))?;
    let (l, t) = (c.data.labeled_fraction, c.data.test_fraction);
    if !(l > 0.0 && t >= 0.0 && l + t < 1.0) {
        return Err(ConfigError::Invalid(format!(
            "data fractions must satisfy labeled > 0, test >= 0, labeled + test < 1; got {l} and {t}"
        )));
    }
    c.adv.validate().map_err(|e| inv(&e))?;
    c.seg.validate().map_err(|e| inv(&e))?;
    c.infer.validate().map_err(|e| inv(&e))?;
    c.turing.design.validate().map_err(|e| inv(&e))
}

fn join(prefix: &str, k: &str) -> String {
    if prefix.is_empty() {
        k.to_string()
    } else {
        format!("{prefix}.{k}")
    }
}

fn merge(base: &mut Value, layer: Value, prefix: &str) -> Result<(), ConfigError> {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                let path = join(prefix, &k);
                let slot = b.get_mut(&k).ok_or_else(|| ConfigError::UnknownKey(path.clone()))?;
                merge(slot, v, &path)?;
            }
            Ok(())
        }
        (b, l) => {
            *b = l;
            Ok(())
        }
    }
}

/// Values parse as JSON when they can (`3`, `true`, `[32,32,32]`) and are
/// taken as strings otherwise.
fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<(), ConfigError> {
    let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut layer = v;
    for part in key.rsplit('.') {
        let mut m = Map::new();
        m.insert(part.to_string(), layer);
        layer = Value::Object(m);
    }
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::UnknownKey(key.to_string()));
    }
    merge(root, layer, "")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn defaults_resolve_and_hash_is_stable() {
        let a = resolve(None, &[], &[]).unwrap();
        let b = resolve(None, &env(&[("PATH", "/bin")]), &[]).unwrap();
        assert_eq!(a.config, Config::default());
        assert_eq!(a.hash, b.hash);
        assert_eq!(a.hash.len(), 64);
    }

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        std::fs::write(&f, "[seg]\nepochs = 3\nlr = 0.01\n[adv]\npatch = [16, 16, 16]\n").unwrap();
        let r = resolve(
            Some(&f),
            &env(&[("FREETUMOR__SEG__EPOCHS", "4")]),
            &["seg.epochs=5".into(), "turing.bind=0.0.0.0".into()],
        )
        .unwrap();
        assert_eq!((r.config.seg.epochs, r.config.seg.lr), (5, 0.01));
        assert_eq!(r.config.adv.patch, [16; 3]);
        assert_eq!(r.config.turing.bind, "0.0.0.0");
        assert_ne!(r.hash, resolve(None, &[], &[]).unwrap().hash);
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = resolve(None, &[], &["seg.epochz=3".into()]).unwrap_err();
        assert!(matches!(&e, ConfigError::UnknownKey(k) if k == "seg.epochz"), "{e}");
        let e = resolve(None, &env(&[("FREETUMOR__NOPE", "1")]), &[]).unwrap_err();
        assert!(e.to_string().contains("nope"));
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, r#"{"adv": {"lambda": 1}}"#).unwrap();
        assert!(matches!(resolve(Some(&f), &[], &[]), Err(ConfigError::UnknownKey(k)) if k == "adv.lambda"));
    }

    #[test]
    fn bad_values_name_their_path() {
        let e = resolve(None, &[], &["seg.epochs=many".into()]).unwrap_err();
        assert!(matches!(&e, ConfigError::InvalidValue { key, .. } if key == "seg.epochs"), "{e}");
        assert!(matches!(resolve(None, &[], &["seg.epochs=0".into()]), Err(ConfigError::Invalid(_))));
        assert!(matches!(resolve(None, &[], &["oops".into()]), Err(ConfigError::MalformedOverride(_))));
    }
}
