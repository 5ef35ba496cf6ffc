//! Plain-text `key = value` configuration with flag overrides.
//!
//! Blank lines and lines starting with `#` are ignored. A key may appear once
//! per file; overrides applied afterwards (command-line flags) replace file
//! values. Every key must be consumed by the config it is loaded into, so
//! typos fail loudly with the offending key name.

use std::collections::BTreeMap;
use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use r3_core::metrics::DEFAULT_TAU;
use r3_core::ppo::{KlControl, PpoConfig};
use r3_core::query_type::Fallback;
use r3_core::{
    ClassifierDescriptor, EmbedderDescriptor, EmbedderKind, RewardOptions, RewardVariant,
    Similarity,
};

pub const DEFAULT_MAX_BATCH: usize = 256;
pub const DEFAULT_MAX_TEXT_BYTES: usize = 32 * 1024;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{origin}: {message}")]
    Syntax { origin: String, message: String },
    #[error("{field} ({origin}): {message}")]
    Field {
        field: String,
        origin: String,
        message: String,
    },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("unknown config key {key} ({origin})")]
    UnknownKey { key: String, origin: String },
}

impl ConfigError {
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Field { field, .. } | ConfigError::Invalid { field, .. } => Some(field),
            ConfigError::UnknownKey { key, .. } => Some(key),
            _ => None,
        }
    }

    fn invalid(field: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Origin {
    File { path: String, line: usize },
    Flag,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::File { path, line } => write!(f, "{path}:{line}"),
            Origin::Flag => f.write_str("command line"),
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    origin: Origin,
}

/// Parsed key-value pairs awaiting consumption by a typed config.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, Entry>,
}

impl KeyValues {
    pub fn parse(text: &str, source: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let origin = Origin::File {
                path: source.to_owned(),
                line: i + 1,
            };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    origin: origin.to_string(),
                    message: format!("expected `key = value`, got {line:?}"),
                });
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    origin: origin.to_string(),
                    message: "empty key".into(),
                });
            }
            let entry = Entry {
                value: value.trim().to_owned(),
                origin,
            };
            if let Some(prev) = entries.insert(key.to_owned(), entry) {
                return Err(ConfigError::Syntax {
                    origin: format!("{source}:{}", i + 1),
                    message: format!("duplicate key {key} (first set at {})", prev.origin),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Loads `path` when given, else starts empty.
    pub fn load_optional(path: Option<&Path>) -> Result<Self, ConfigError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Sets `key` from a flag; replaces any file value.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(
            key.to_owned(),
            Entry {
                value: value.into(),
                origin: Origin::Flag,
            },
        );
    }

    /// Applies a `key=value` override string.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (key, value) = pair.split_once('=').ok_or_else(|| ConfigError::Syntax {
            origin: Origin::Flag.to_string(),
            message: format!("expected key=value, got {pair:?}"),
        })?;
        self.set(key.trim(), value.trim());
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Removes and parses `key`.
    pub fn take<T>(&mut self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        let Some(entry) = self.entries.remove(key) else {
            return Ok(None);
        };
        entry
            .value
            .parse()
            .map(Some)
            .map_err(|e: T::Err| ConfigError::Field {
                field: key.to_owned(),
                origin: entry.origin.to_string(),
                message: format!("invalid value {:?}: {e}", entry.value),
            })
    }

    fn take_with<T>(
        &mut self,
        key: &str,
        parse: impl FnOnce(&str) -> Result<T, String>,
    ) -> Result<Option<T>, ConfigError> {
        let Some(entry) = self.entries.remove(key) else {
            return Ok(None);
        };
        parse(&entry.value)
            .map(Some)
            .map_err(|message| ConfigError::Field {
                field: key.to_owned(),
                origin: entry.origin.to_string(),
                message,
            })
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<(), ConfigError> {
        match self.entries.into_iter().next() {
            Some((key, entry)) => Err(ConfigError::UnknownKey {
                key,
                origin: entry.origin.to_string(),
            }),
            None => Ok(()),
        }
    }
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got {s:?}")),
    }
}

fn parse_optional_f64(s: &str) -> Result<Option<f64>, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|e| format!("expected a number or `none`, got {s:?}: {e}"))
}

fn parse_embedder_kind(s: &str) -> Result<EmbedderKind, String> {
    match s {
        "builtin" | "builtin-hashed" | "hashed" => Ok(EmbedderKind::BuiltinHashed),
        "remote" => Ok(EmbedderKind::Remote),
        _ => Err(format!("expected builtin-hashed or remote, got {s:?}")),
    }
}

fn parse_fallback(s: &str) -> Result<Fallback, String> {
    match s {
        "none" => Ok(Fallback::None),
        "heuristic" => Ok(Fallback::Heuristic),
        "open-ended" | "open_ended" | "oe" => Ok(Fallback::OpenEnded),
        _ => Err(format!("expected none, heuristic or open-ended, got {s:?}")),
    }
}

fn parse_similarity(s: &str) -> Result<Similarity, String> {
    match s {
        "inner_product" | "inner-product" | "dot" => Ok(Similarity::InnerProduct),
        "cosine" => Ok(Similarity::Cosine),
        _ => Err(format!("expected inner_product or cosine, got {s:?}")),
    }
}

/// Reads the reward-option keys shared by the service and the PPO runner.
fn take_reward_options(kv: &mut KeyValues) -> Result<RewardOptions, ConfigError> {
    let mut options = RewardOptions::default();
    if let Some(s) = kv.take_with("similarity", parse_similarity)? {
        options.similarity = s;
    }
    if let Some(cap) = kv.take_with("li_cap", parse_optional_f64)? {
        options.li_cap = cap;
    }
    if let Some(rp) = kv.take_with("rp_enabled", parse_bool)? {
        options.rp_enabled = rp;
    }
    Ok(options)
}

fn take_embedder(kv: &mut KeyValues) -> Result<EmbedderDescriptor, ConfigError> {
    let mut desc = EmbedderDescriptor::default();
    if let Some(kind) = kv.take_with("embedder", parse_embedder_kind)? {
        desc.kind = kind;
        // Remote vectors are used as returned unless asked otherwise.
        desc.normalize = kind == EmbedderKind::BuiltinHashed;
    }
    if let Some(dim) = kv.take("embedder.dim")? {
        desc.dim = dim;
    }
    desc.endpoint = kv.take("embedder.endpoint")?;
    if let Some(n) = kv.take_with("embedder.normalize", parse_bool)? {
        desc.normalize = n;
    }
    desc.validate().map_err(|e| match e {
        r3_core::Error::Config { field, message } => ConfigError::Invalid { field, message },
        other => ConfigError::invalid("embedder", other.to_string()),
    })?;
    Ok(desc)
}

fn take_classifier(kv: &mut KeyValues) -> Result<ClassifierDescriptor, ConfigError> {
    let kind: String = kv.take("classifier")?.unwrap_or_else(|| "heuristic".into());
    let seed: Option<u64> = kv.take("classifier.seed")?;
    let endpoint: Option<String> = kv.take("classifier.endpoint")?;
    let fallback = kv.take_with("classifier.fallback", parse_fallback)?;
    let stray = |field: &str| {
        Err(ConfigError::invalid(
            field,
            format!("not used by the {kind} classifier"),
        ))
    };
    match kind.as_str() {
        "heuristic" => {
            if seed.is_some() {
                return stray("classifier.seed");
            }
            if endpoint.is_some() {
                return stray("classifier.endpoint");
            }
            Ok(ClassifierDescriptor::Heuristic)
        }
        "random" => {
            if endpoint.is_some() {
                return stray("classifier.endpoint");
            }
            Ok(ClassifierDescriptor::Random {
                seed: seed.unwrap_or(0),
            })
        }
        "external" => {
            if seed.is_some() {
                return stray("classifier.seed");
            }
            let endpoint = endpoint.ok_or_else(|| {
                ConfigError::invalid(
                    "classifier.endpoint",
                    "required for the external classifier",
                )
            })?;
            Ok(ClassifierDescriptor::External {
                endpoint,
                fallback: fallback.unwrap_or_default(),
            })
        }
        other => Err(ConfigError::invalid(
            "classifier",
            format!("expected heuristic, random or external, got {other:?}"),
        )),
    }
}

/// Everything the scoring engine and service need.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub embedder: EmbedderDescriptor,
    pub classifier: ClassifierDescriptor,
    pub calibration_path: Option<PathBuf>,
    pub variant: RewardVariant,
    pub options: RewardOptions,
    pub tau: f64,
    pub bind: SocketAddr,
    pub max_batch: usize,
    pub max_text_bytes: usize,
    pub max_in_flight: usize,
    /// Reject unknown request fields.
    pub strict: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            embedder: EmbedderDescriptor::default(),
            classifier: ClassifierDescriptor::Heuristic,
            calibration_path: None,
            variant: RewardVariant::R3,
            options: RewardOptions::default(),
            tau: DEFAULT_TAU,
            bind: DEFAULT_BIND.parse().expect("valid default address"),
            max_batch: DEFAULT_MAX_BATCH,
            max_text_bytes: DEFAULT_MAX_TEXT_BYTES,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            strict: true,
        }
    }
}

impl EngineConfig {
    /// Consumes every engine key from `kv`; unknown keys are an error.
    pub fn from_key_values(mut kv: KeyValues) -> Result<Self, ConfigError> {
        let d = Self::default();
        let cfg = Self {
            embedder: take_embedder(&mut kv)?,
            classifier: take_classifier(&mut kv)?,
            calibration_path: kv.take("calibration")?,
            variant: kv.take("variant")?.unwrap_or(d.variant),
            options: take_reward_options(&mut kv)?,
            tau: kv.take("tau")?.unwrap_or(d.tau),
            bind: kv.take("bind")?.unwrap_or(d.bind),
            max_batch: kv.take("max_batch")?.unwrap_or(d.max_batch),
            max_text_bytes: kv.take("max_text_bytes")?.unwrap_or(d.max_text_bytes),
            max_in_flight: kv.take("max_in_flight")?.unwrap_or(d.max_in_flight),
            strict: kv.take_with("strict", parse_bool)?.unwrap_or(d.strict),
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, v) in [
            ("max_batch", self.max_batch),
            ("max_text_bytes", self.max_text_bytes),
            ("max_in_flight", self.max_in_flight),
        ] {
            if v == 0 {
                return Err(ConfigError::invalid(field, "must be positive"));
            }
        }
        if !self.tau.is_finite() {
            return Err(ConfigError::invalid("tau", "must be finite"));
        }
        if let Some(p) = &self.calibration_path {
            if !p.is_file() {
                return Err(ConfigError::invalid(
                    "calibration",
                    format!("{} does not exist", p.display()),
                ));
            }
        }
        Ok(())
    }

    pub fn embedder_dim(&self) -> usize {
        self.embedder.dim
    }
}

/// PPO hyperparameters plus the reward setup for one sandbox run.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoRunConfig {
    pub ppo: PpoConfig,
    pub variant: RewardVariant,
    pub options: RewardOptions,
    pub tau: f64,
    pub embedder: EmbedderDescriptor,
    pub calibration_path: Option<PathBuf>,
}

impl PpoRunConfig {
    pub fn from_key_values(mut kv: KeyValues) -> Result<Self, ConfigError> {
        let mut ppo = PpoConfig::default();
        macro_rules! field {
            ($name:ident) => {
                if let Some(v) = kv.take(stringify!($name))? {
                    ppo.$name = v;
                }
            };
        }
        field!(clip_ratio);
        field!(kl_coeff);
        field!(ppo_epochs);
        field!(gamma);
        field!(batch_episodes);
        field!(learning_rate);
        field!(steps);
        field!(seed);
        field!(max_steps);
        field!(baseline_decay);
        field!(eval_episodes);
        let control: Option<String> = kv.take("kl_control")?;
        let target: Option<f64> = kv.take("kl_target")?;
        let horizon: Option<f64> = kv.take("kl_horizon")?;
        ppo.kl_control = match control.as_deref().unwrap_or("fixed") {
            "fixed" => {
                if target.is_some() || horizon.is_some() {
                    return Err(ConfigError::invalid(
                        "kl_target",
                        "only used when kl_control = adaptive",
                    ));
                }
                KlControl::Fixed
            }
            "adaptive" => KlControl::Adaptive {
                target: target.unwrap_or(6.0),
                horizon: horizon.unwrap_or(10_000.0),
            },
            other => {
                return Err(ConfigError::invalid(
                    "kl_control",
                    format!("expected fixed or adaptive, got {other:?}"),
                ))
            }
        };
        let cfg = Self {
            ppo,
            variant: kv.take("variant")?.unwrap_or(RewardVariant::R3),
            options: take_reward_options(&mut kv)?,
            tau: kv.take("tau")?.unwrap_or(DEFAULT_TAU),
            embedder: take_embedder(&mut kv)?,
            calibration_path: kv.take("calibration")?,
        };
        kv.finish()?;
        cfg.ppo.validate().map_err(|e| match e {
            r3_core::Error::Config { field, message } => ConfigError::Invalid { field, message },
            other => ConfigError::invalid("ppo", other.to_string()),
        })?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blank_lines_and_overrides() {
        let mut kv =
            KeyValues::parse("# engine\n\nvariant = rx_only\ntau=0.2\n", "t.conf").unwrap();
        kv.set("tau", "0.3");
        let cfg = EngineConfig::from_key_values(kv).unwrap();
        assert_eq!(cfg.variant, RewardVariant::RxOnly);
        assert_eq!(cfg.tau, 0.3);
        assert_eq!(cfg.max_batch, 256);
        assert_eq!(cfg.max_text_bytes, 32 * 1024);
        assert_eq!(cfg.max_in_flight, 8);
    }

    #[test]
    fn errors_name_the_field() {
        let kv = KeyValues::parse("max_batch = lots\n", "t.conf").unwrap();
        let err = EngineConfig::from_key_values(kv).unwrap_err();
        assert_eq!(err.field(), Some("max_batch"));
        assert!(err.to_string().contains("t.conf:1"));

        let kv = KeyValues::parse("max_batch = 0\n", "t.conf").unwrap();
        let err = EngineConfig::from_key_values(kv).unwrap_err();
        assert_eq!(err.field(), Some("max_batch"));

        let kv = KeyValues::parse("varient = r3\n", "t.conf").unwrap();
        let err = EngineConfig::from_key_values(kv).unwrap_err();
        assert_eq!(err.field(), Some("varient"));

        let kv = KeyValues::parse("embedder = remote\n", "t.conf").unwrap();
        let err = EngineConfig::from_key_values(kv).unwrap_err();
        assert_eq!(err.field(), Some("embedder.endpoint"));

        let kv = KeyValues::parse("calibration = /no/such/file.json\n", "t.conf").unwrap();
        let err = EngineConfig::from_key_values(kv).unwrap_err();
        assert_eq!(err.field(), Some("calibration"));
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = KeyValues::parse("a = 1\nnot a pair\n", "x.conf").unwrap_err();
        assert!(err.to_string().starts_with("x.conf:2"), "{err}");
        let err = KeyValues::parse("a = 1\na = 2\n", "x.conf").unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn classifier_keys() {
        let kv = KeyValues::parse(
            "classifier = external\nclassifier.endpoint = http://h:1\nclassifier.fallback = heuristic\n",
            "c",
        )
        .unwrap();
        let cfg = EngineConfig::from_key_values(kv).unwrap();
        assert_eq!(
            cfg.classifier,
            ClassifierDescriptor::External {
                endpoint: "http://h:1".into(),
                fallback: Fallback::Heuristic
            }
        );
        let kv = KeyValues::parse("classifier = random\nclassifier.seed = 4\n", "c").unwrap();
        let cfg = EngineConfig::from_key_values(kv).unwrap();
        assert_eq!(cfg.classifier, ClassifierDescriptor::Random { seed: 4 });
        let kv = KeyValues::parse("classifier.seed = 4\n", "c").unwrap();
        let err = EngineConfig::from_key_values(kv).unwrap_err();
        assert_eq!(err.field(), Some("classifier.seed"));
    }

    #[test]
    fn ppo_keys() {
        let kv = KeyValues::parse(
            "kl_coeff = 0.01\nsteps = 10\nvariant = li_only\nrp_enabled = false\n",
            "p",
        )
        .unwrap();
        let cfg = PpoRunConfig::from_key_values(kv).unwrap();
        assert_eq!(cfg.ppo.kl_coeff, 0.01);
        assert_eq!(cfg.ppo.steps, 10);
        assert_eq!(cfg.variant, RewardVariant::LiOnly);
        assert!(!cfg.options.rp_enabled);

        let kv = KeyValues::parse("gamma = 2\n", "p").unwrap();
        let err = PpoRunConfig::from_key_values(kv).unwrap_err();
        assert_eq!(err.field(), Some("gamma"));
    }
}
