//! Sectioned `key = value` run configuration with a fixed schema.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use dpal_core::data::{CorruptionFamily, IMAGE_SIZE, NUM_CLASSES};
use dpal_core::engine::{AdaptConfig, AdaptMode, TrainConfig};
use dpal_core::losses::default_e0;
use dpal_core::vit::ViTConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Usize,
    U64,
    F64,
    Str,
    Mode,
    UsizeList,
    U64List,
    ModeList,
    CorruptionList,
    DomainList,
}

impl Kind {
    fn describe(self) -> &'static str {
        match self {
            Kind::Usize | Kind::U64 => "a non-negative integer",
            Kind::F64 => "a number",
            Kind::Str => "a string",
            Kind::Mode => "an adaptation mode",
            Kind::UsizeList | Kind::U64List => "a comma-separated list of integers",
            Kind::ModeList => "a comma-separated list of adaptation modes",
            Kind::CorruptionList => "a comma-separated list of corruption families",
            Kind::DomainList => "a comma-separated list of corruption families or `clean`",
        }
    }
}

/// Key, type, default (none means required where used) and description.
pub const SCHEMA: &[(&str, Kind, Option<&str>, &str)] = &[
    ("model.patch_size", Kind::Usize, Some("4"), "patch side in pixels"),
    ("model.depth", Kind::Usize, Some("4"), "transformer layers"),
    ("model.dim", Kind::Usize, Some("64"), "token width"),
    ("model.heads", Kind::Usize, Some("4"), "attention heads"),
    ("model.mlp_ratio", Kind::Usize, Some("4"), "MLP hidden width over token width"),
    ("dataset.n", Kind::Usize, None, "training samples"),
    ("dataset.n_test", Kind::Usize, Some("640"), "test samples"),
    ("dataset.seed", Kind::U64, Some("0"), "generation seed"),
    ("train.epochs", Kind::Usize, Some("30"), "source training epochs"),
    ("train.batch_size", Kind::Usize, Some("64"), "source training batch"),
    ("train.lr", Kind::F64, Some("0.001"), "Adam learning rate"),
    ("train.final_lr_fraction", Kind::F64, Some("0.05"), "cosine floor as a fraction of lr"),
    ("train.weight_decay", Kind::F64, Some("0"), "decoupled weight decay"),
    ("train.seed", Kind::U64, Some("0"), "initialization and shuffling seed"),
    ("adapt.modes", Kind::ModeList, Some("dpal_full"), "adaptation modes"),
    ("adapt.corruptions", Kind::CorruptionList, Some("gaussian_noise"), "corruption families"),
    ("adapt.severities", Kind::UsizeList, Some("3"), "severities 0..5"),
    ("adapt.seeds", Kind::U64List, Some("0,1,2"), "adaptation seeds"),
    ("adapt.lr", Kind::F64, Some("0.01"), "adaptation learning rate"),
    ("adapt.rho", Kind::F64, Some("0.05"), "SAM radius of the smooth group"),
    ("adapt.batch_size", Kind::Usize, Some("64"), "stream batch size"),
    ("adapt.e0", Kind::F64, None, "entropy threshold, default 0.4 ln C"),
    ("adapt.hidden", Kind::Usize, None, "prediction MLP width, default dim/2"),
    ("paths.checkpoint", Kind::Str, None, "source checkpoint, default <out>/source.dplc"),
    ("theory.seed", Kind::U64, Some("0"), "battery seed"),
    ("theory.gap_trials", Kind::Usize, Some("200"), "gradient gap trials"),
    ("theory.gap_eta", Kind::F64, Some("0.0001"), "gradient gap step"),
    ("theory.gap_tolerance", Kind::F64, Some("0.01"), "maximal relative gap error"),
    ("theory.lsmooth_functions", Kind::Usize, Some("20"), "random quadratics"),
    ("theory.lsmooth_points", Kind::Usize, Some("1000"), "points per quadratic"),
    ("theory.lsmooth_scale", Kind::F64, Some("1"), "factor on the claimed smoothness constant"),
    ("theory.subopt_trials", Kind::Usize, Some("500"), "suboptimality trials"),
    ("theory.subopt_eta", Kind::F64, Some("0.001"), "suboptimality step"),
    ("theory.subopt_rho", Kind::F64, Some("0.1"), "suboptimality radius"),
    ("dump.mode", Kind::Mode, Some("frozen"), "model state for dumps"),
    ("dump.domains", Kind::DomainList, Some("clean,gaussian_noise"), "feature dump domains"),
    ("dump.severity", Kind::Usize, Some("3"), "severity for corrupted dump domains"),
    ("dump.samples", Kind::UsizeList, Some("0,1,2,3"), "test indices for attention dumps"),
    ("dump.corruption", Kind::CorruptionList, Some("gaussian_noise"), "domain adapted on before an attention dump"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    Syntax { line: usize, message: String },
    UnknownKey { key: String, line: Option<usize> },
    Duplicate { key: String, line: usize },
    Missing(String),
    Invalid { key: String, value: String, expected: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Syntax { line, message } => write!(f, "line {line}: {message}"),
            ConfigError::UnknownKey { key, line: Some(l) } => write!(f, "line {l}: unknown key `{key}`"),
            ConfigError::UnknownKey { key, line: None } => write!(f, "unknown key `{key}`"),
            ConfigError::Duplicate { key, line } => write!(f, "line {line}: duplicate key `{key}`"),
            ConfigError::Missing(key) => write!(f, "missing required key `{key}`"),
            ConfigError::Invalid { key, value, expected } => {
                write!(f, "`{key}` = {value:?} is not {expected}")
            }
        }
    }
}

impl std::error::Error for ConfigError {}

fn kind_of(key: &str) -> Option<Kind> {
    SCHEMA.iter().find(|(k, ..)| *k == key).map(|(_, kind, ..)| *kind)
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn parse_domain(s: &str) -> Option<Option<CorruptionFamily>> {
    if s == "clean" {
        Some(None)
    } else {
        s.parse().ok().map(Some)
    }
}

fn check(key: &str, kind: Kind, value: &str) -> Result<(), ConfigError> {
    let ok = match kind {
        Kind::Usize => value.parse::<usize>().is_ok(),
        Kind::U64 => value.parse::<u64>().is_ok(),
        Kind::F64 => value.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::Str => !value.is_empty(),
        Kind::Mode => value.parse::<AdaptMode>().is_ok(),
        Kind::UsizeList => split_list(value).all(|s| s.parse::<usize>().is_ok()) && split_list(value).next().is_some(),
        Kind::U64List => split_list(value).all(|s| s.parse::<u64>().is_ok()) && split_list(value).next().is_some(),
        Kind::ModeList => {
            split_list(value).all(|s| s.parse::<AdaptMode>().is_ok()) && split_list(value).next().is_some()
        }
        Kind::CorruptionList => {
            split_list(value).all(|s| s.parse::<CorruptionFamily>().is_ok()) && split_list(value).next().is_some()
        }
        Kind::DomainList => split_list(value).all(|s| parse_domain(s).is_some()) && split_list(value).next().is_some(),
    };
    if ok {
        Ok(())
    } else {
        Err(ConfigError::Invalid {
            key: key.into(),
            value: value.into(),
            expected: kind.describe().into(),
        })
    }
}

/// A validated set of explicit settings; everything else falls back to the schema defaults.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            if let Some(name) = body.strip_prefix('[') {
                let name = name.strip_suffix(']').map(str::trim).filter(|n| !n.is_empty()).ok_or_else(|| {
                    ConfigError::Syntax {
                        line,
                        message: format!("malformed section header {body:?}"),
                    }
                })?;
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                message: format!("expected `key = value`, got {body:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            let sec = section.as_deref().ok_or_else(|| ConfigError::Syntax {
                line,
                message: format!("key `{k}` outside a section"),
            })?;
            let key = format!("{sec}.{k}");
            let kind = kind_of(&key).ok_or(ConfigError::UnknownKey {
                key: key.clone(),
                line: Some(line),
            })?;
            check(&key, kind, v)?;
            if cfg.values.insert(key.clone(), v.to_string()).is_some() {
                return Err(ConfigError::Duplicate { key, line });
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, crate::CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| crate::CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies a `section.key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            message: format!("override {assignment:?} is not key=value"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        let kind = kind_of(k).ok_or(ConfigError::UnknownKey {
            key: k.into(),
            line: None,
        })?;
        check(k, kind, v)?;
        self.values.insert(k.into(), v.into());
        Ok(())
    }

    fn raw(&self, key: &str) -> Option<&str> {
        debug_assert!(kind_of(key).is_some(), "{key} not in schema");
        self.values.get(key).map(String::as_str).or_else(|| {
            SCHEMA
                .iter()
                .find(|(k, ..)| *k == key)
                .and_then(|(_, _, d, _)| *d)
        })
    }

    fn required(&self, key: &str) -> Result<&str, ConfigError> {
        self.raw(key).ok_or_else(|| ConfigError::Missing(key.into()))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        let v = self.required(key)?;
        v.parse().map_err(|_| ConfigError::Invalid {
            key: key.into(),
            value: v.into(),
            expected: kind_of(key).map(Kind::describe).unwrap_or("valid").into(),
        })
    }

    pub fn usize(&self, key: &str) -> Result<usize, ConfigError> {
        self.get(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64, ConfigError> {
        self.get(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64, ConfigError> {
        self.get(key)
    }

    pub fn string(&self, key: &str) -> Option<String> {
        self.raw(key).map(String::from)
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError> {
        let v = self.required(key)?;
        split_list(v)
            .map(|s| {
                s.parse().map_err(|_| ConfigError::Invalid {
                    key: key.into(),
                    value: s.into(),
                    expected: kind_of(key).map(Kind::describe).unwrap_or("valid").into(),
                })
            })
            .collect()
    }

    /// Dump domains; `None` stands for the clean split.
    pub fn domains(&self, key: &str) -> Result<Vec<Option<CorruptionFamily>>, ConfigError> {
        let v = self.required(key)?;
        Ok(split_list(v).filter_map(parse_domain).collect())
    }

    pub fn model(&self) -> Result<ViTConfig, ConfigError> {
        let cfg = ViTConfig {
            image_size: IMAGE_SIZE,
            channels: 1,
            patch_size: self.usize("model.patch_size")?,
            depth: self.usize("model.depth")?,
            dim: self.usize("model.dim")?,
            heads: self.usize("model.heads")?,
            mlp_ratio: self.usize("model.mlp_ratio")?,
            num_classes: NUM_CLASSES,
        };
        cfg.validate().map_err(|e| ConfigError::Invalid {
            key: "model".into(),
            value: format!("{cfg:?}"),
            expected: format!("a valid model ({e})"),
        })?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig, ConfigError> {
        Ok(TrainConfig {
            epochs: self.usize("train.epochs")?,
            batch_size: self.usize("train.batch_size")?,
            lr: self.f64("train.lr")?,
            final_lr_fraction: self.f64("train.final_lr_fraction")?,
            weight_decay: self.f64("train.weight_decay")?,
            seed: self.u64("train.seed")?,
        })
    }

    pub fn adapt(&self, model: &ViTConfig) -> Result<AdaptConfig, ConfigError> {
        let d = AdaptConfig::defaults(model);
        Ok(AdaptConfig {
            lr: self.f64("adapt.lr")?,
            rho: self.f64("adapt.rho")?,
            batch_size: self.usize("adapt.batch_size")?,
            e0: if self.values.contains_key("adapt.e0") {
                self.f64("adapt.e0")?
            } else {
                default_e0(model.num_classes)
            },
            hidden: if self.values.contains_key("adapt.hidden") {
                self.usize("adapt.hidden")?
            } else {
                d.hidden
            },
        })
    }

    /// Every schema key with its effective value, for echoing into reports.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        SCHEMA
            .iter()
            .filter_map(|(k, ..)| self.raw(k).map(|v| (k.to_string(), v.to_string())))
            .collect()
    }

    pub fn explicit(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_defaults() {
        let c = RunConfig::parse("# top\n[dataset]\nn = 4000 # inline\n\n[adapt]\nmodes = frozen, dpal_full\n").unwrap();
        assert_eq!(c.usize("dataset.n").unwrap(), 4000);
        assert_eq!(c.usize("dataset.n_test").unwrap(), 640);
        assert_eq!(
            c.list::<AdaptMode>("adapt.modes").unwrap(),
            vec![AdaptMode::Frozen, AdaptMode::DpalFull]
        );
        assert_eq!(c.model().unwrap(), ViTConfig::default());
        assert_eq!(c.train().unwrap(), TrainConfig::default());
        assert_eq!(c.adapt(&ViTConfig::default()).unwrap(), AdaptConfig::defaults(&ViTConfig::default()));
    }

    #[test]
    fn missing_required_key_is_named() {
        let c = RunConfig::parse("[train]\nepochs = 1\n").unwrap();
        let e = c.usize("dataset.n").unwrap_err();
        assert_eq!(e, ConfigError::Missing("dataset.n".into()));
        assert!(e.to_string().contains("dataset.n"));
    }

    #[test]
    fn schema_violations() {
        assert!(matches!(
            RunConfig::parse("[train]\nepoch = 1\n"),
            Err(ConfigError::UnknownKey { line: Some(2), .. })
        ));
        assert!(matches!(RunConfig::parse("n = 1\n"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(
            RunConfig::parse("[dataset]\nn = 1\nn = 2\n"),
            Err(ConfigError::Duplicate { line: 3, .. })
        ));
        assert!(matches!(
            RunConfig::parse("[dataset]\nn = -4\n"),
            Err(ConfigError::Invalid { .. })
        ));
        assert!(RunConfig::parse("[adapt]\ncorruptions = fog\n").is_err());
        assert!(RunConfig::parse("[adapt]\nseeds =\n").is_err());
        assert!(RunConfig::parse("[dataset\nn = 1\n").is_err());
    }

    #[test]
    fn overrides_are_validated() {
        let mut c = RunConfig::default();
        c.set("dataset.n=800").unwrap();
        c.set(" adapt.modes = dpal_smooth_pred(0.2) ").unwrap();
        assert_eq!(c.usize("dataset.n").unwrap(), 800);
        assert_eq!(c.list::<AdaptMode>("adapt.modes").unwrap(), vec![AdaptMode::DpalSmoothPred(0.2)]);
        assert!(c.set("nope.key=1").is_err());
        assert!(c.set("dataset.n").is_err());
        assert!(c.set("train.lr=abc").is_err());
        let r = c.resolved();
        assert_eq!(r["dataset.n"], "800");
        assert!(!r.contains_key("adapt.e0"));
    }

    #[test]
    fn invalid_models_are_reported() {
        let mut c = RunConfig::default();
        c.set("model.heads=3").unwrap();
        assert!(c.model().is_err());
    }

    #[test]
    fn domains_include_clean() {
        let c = RunConfig::default();
        assert_eq!(c.domains("dump.domains").unwrap(), vec![None, Some(CorruptionFamily::GaussianNoise)]);
    }
}
