//! Declarative run configuration.
//!
//! The file format is one `key = value` per line; `#` starts a comment and
//! blank lines are ignored. Lists are comma-separated; `sweep.orders` also
//! accepts an inclusive range such as `0..4`. Empty path values mean unset.
//!
//! Assignments apply in order: the `preset` key first, then the file, then
//! command-line flags, so a flag always wins over the file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use taylorfold::checkpoint::{parse_seed_term, parse_variant, seed_term_name, variant_name};
use taylorfold::composer::MAX_ORDER;
use taylorfold::degrade::{BlurKernelKind, DegradationKind, DegradationSpec};
use taylorfold::nets::DerivativeNet;
use taylorfold::train::TrainConfig;
use taylorfold::{ComposerConfig, ModelSpec};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: String, line: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out: PathBuf,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub degradation: DegradationSpec,
    pub model: ModelSpec,
    pub composer: ComposerConfig,
    pub train: TrainConfig,
    pub train_corpus: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
    pub eval_checkpoint: Option<PathBuf>,
    pub sweep_orders: Vec<usize>,
    pub sweep_jobs: usize,
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "preset",
    "seed",
    "out",
    "data.kind",
    "data.count",
    "data.height",
    "data.width",
    "rain.streaks_min",
    "rain.streaks_max",
    "rain.length_min",
    "rain.length_max",
    "rain.angle_min",
    "rain.angle_max",
    "rain.intensity_min",
    "rain.intensity_max",
    "rain.thickness",
    "blur.kernel",
    "blur.size",
    "blur.sigma",
    "blur.motion_length",
    "blur.motion_angle",
    "blur.noise_sigma",
    "model.f_features",
    "model.f_blocks",
    "model.g_features",
    "composer.order",
    "composer.lambda",
    "composer.variant",
    "composer.seed_term",
    "train.corpus",
    "train.resume",
    "train.patch",
    "train.batch",
    "train.lr",
    "train.decay_epochs",
    "train.decay_factor",
    "train.epochs",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.checkpoint_every",
    "train.frozen",
    "train.output_init_scale",
    "eval.corpus",
    "eval.checkpoint",
    "sweep.orders",
    "sweep.jobs",
];

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, train) = match preset {
            Preset::Paper => (ModelSpec::default(), TrainConfig::default()),
            Preset::Desk => (ModelSpec::desk(), TrainConfig::desk()),
        };
        Self {
            preset,
            seed: 0,
            out: PathBuf::from("."),
            count: 8,
            height: 64,
            width: 64,
            degradation: DegradationSpec::rain(0),
            model,
            composer: ComposerConfig::default(),
            train,
            train_corpus: None,
            resume: None,
            eval_corpus: None,
            eval_checkpoint: None,
            sweep_orders: (0..=6).collect(),
            sweep_jobs: 1,
        }
    }

    /// Builds a config from `(key, value)` assignments applied in order,
    /// except that `preset` is resolved before everything else.
    pub fn from_assignments(assignments: &[(String, String)]) -> Result<Self, ConfigError> {
        let preset = match assignments.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, v)) => parse_preset(v)?,
            None => Preset::Paper,
        };
        let mut cfg = Self::preset(preset);
        for (k, v) in assignments {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }

    /// The seed drives corpus synthesis, initialization and batch sampling.
    pub fn degradation_spec(&self) -> DegradationSpec {
        self.degradation.with_seed(self.seed)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let r = &mut self.degradation.rain;
        let b = &mut self.degradation.blur;
        match key {
            "preset" => self.preset = parse_preset(v)?,
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "data.kind" => self.degradation.kind = parse_with(key, v, DegradationKind::from_str)?,
            "data.count" => self.count = parse(key, v)?,
            "data.height" => self.height = parse(key, v)?,
            "data.width" => self.width = parse(key, v)?,
            "rain.streaks_min" => r.streaks.0 = parse(key, v)?,
            "rain.streaks_max" => r.streaks.1 = parse(key, v)?,
            "rain.length_min" => r.length.0 = parse(key, v)?,
            "rain.length_max" => r.length.1 = parse(key, v)?,
            "rain.angle_min" => r.angle_deg.0 = parse(key, v)?,
            "rain.angle_max" => r.angle_deg.1 = parse(key, v)?,
            "rain.intensity_min" => r.intensity.0 = parse(key, v)?,
            "rain.intensity_max" => r.intensity.1 = parse(key, v)?,
            "rain.thickness" => r.thickness = parse(key, v)?,
            "blur.kernel" => b.kernel = parse_with(key, v, BlurKernelKind::from_str)?,
            "blur.size" => b.size = parse(key, v)?,
            "blur.sigma" => b.sigma = parse(key, v)?,
            "blur.motion_length" => b.motion_length = parse(key, v)?,
            "blur.motion_angle" => b.motion_angle_deg = parse(key, v)?,
            "blur.noise_sigma" => b.noise_sigma = parse(key, v)?,
            "model.f_features" => self.model.mapping.features = parse(key, v)?,
            "model.f_blocks" => self.model.mapping.blocks = parse(key, v)?,
            "model.g_features" => {
                self.model.derivative = if v == "none" {
                    None
                } else {
                    Some(DerivativeNet {
                        features: parse(key, v)?,
                    })
                }
            }
            "composer.order" => self.composer.order = parse(key, v)?,
            "composer.lambda" => self.composer.lambda = parse(key, v)?,
            "composer.variant" => {
                self.composer.variant = parse_variant(v).ok_or_else(|| bad(key, v, "expected with_k_residual or concat_only"))?
            }
            "composer.seed_term" => {
                self.composer.seed_term =
                    parse_seed_term(v).ok_or_else(|| bad(key, v, "expected f_out or input"))?
            }
            "train.corpus" => self.train_corpus = opt_path(v),
            "train.resume" => self.resume = opt_path(v),
            "train.patch" => self.train.patch = parse(key, v)?,
            "train.batch" => self.train.batch = parse(key, v)?,
            "train.lr" => self.train.lr0 = parse(key, v)?,
            "train.decay_epochs" => self.train.decay_epochs = parse_list(key, v)?,
            "train.decay_factor" => self.train.decay_factor = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.beta1" => self.train.adam.beta1 = parse(key, v)?,
            "train.beta2" => self.train.adam.beta2 = parse(key, v)?,
            "train.eps" => self.train.adam.eps = parse(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "train.frozen" => {
                self.train.frozen = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_owned)
                    .collect()
            }
            "train.output_init_scale" => self.train.output_init_scale = parse(key, v)?,
            "eval.corpus" => self.eval_corpus = opt_path(v),
            "eval.checkpoint" => self.eval_checkpoint = opt_path(v),
            "sweep.orders" => self.sweep_orders = parse_orders(key, v)?,
            "sweep.jobs" => self.sweep_jobs = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_owned())),
        }
        Ok(())
    }

    /// Current value of `key`, formatted so that `set(key, get(key))` is a
    /// no-op.
    pub fn get(&self, key: &str) -> Option<String> {
        let r = &self.degradation.rain;
        let b = &self.degradation.blur;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let list = |xs: &[usize]| xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        Some(match key {
            "preset" => match self.preset {
                Preset::Paper => "paper".into(),
                Preset::Desk => "desk".into(),
            },
            "seed" => self.seed.to_string(),
            "out" => self.out.display().to_string(),
            "data.kind" => self.degradation.kind.to_string(),
            "data.count" => self.count.to_string(),
            "data.height" => self.height.to_string(),
            "data.width" => self.width.to_string(),
            "rain.streaks_min" => r.streaks.0.to_string(),
            "rain.streaks_max" => r.streaks.1.to_string(),
            "rain.length_min" => r.length.0.to_string(),
            "rain.length_max" => r.length.1.to_string(),
            "rain.angle_min" => r.angle_deg.0.to_string(),
            "rain.angle_max" => r.angle_deg.1.to_string(),
            "rain.intensity_min" => r.intensity.0.to_string(),
            "rain.intensity_max" => r.intensity.1.to_string(),
            "rain.thickness" => r.thickness.to_string(),
            "blur.kernel" => b.kernel.to_string(),
            "blur.size" => b.size.to_string(),
            "blur.sigma" => b.sigma.to_string(),
            "blur.motion_length" => b.motion_length.to_string(),
            "blur.motion_angle" => b.motion_angle_deg.to_string(),
            "blur.noise_sigma" => b.noise_sigma.to_string(),
            "model.f_features" => self.model.mapping.features.to_string(),
            "model.f_blocks" => self.model.mapping.blocks.to_string(),
            "model.g_features" => self
                .model
                .derivative
                .map_or("none".into(), |d| d.features.to_string()),
            "composer.order" => self.composer.order.to_string(),
            "composer.lambda" => self.composer.lambda.to_string(),
            "composer.variant" => variant_name(self.composer.variant).into(),
            "composer.seed_term" => seed_term_name(self.composer.seed_term).into(),
            "train.corpus" => path(&self.train_corpus),
            "train.resume" => path(&self.resume),
            "train.patch" => self.train.patch.to_string(),
            "train.batch" => self.train.batch.to_string(),
            "train.lr" => self.train.lr0.to_string(),
            "train.decay_epochs" => list(&self.train.decay_epochs),
            "train.decay_factor" => self.train.decay_factor.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.beta1" => self.train.adam.beta1.to_string(),
            "train.beta2" => self.train.adam.beta2.to_string(),
            "train.eps" => self.train.adam.eps.to_string(),
            "train.checkpoint_every" => self.train.checkpoint_every.to_string(),
            "train.frozen" => self.train.frozen.join(","),
            "train.output_init_scale" => self.train.output_init_scale.to_string(),
            "eval.corpus" => path(&self.eval_corpus),
            "eval.checkpoint" => path(&self.eval_checkpoint),
            "sweep.orders" => list(&self.sweep_orders),
            "sweep.jobs" => self.sweep_jobs.to_string(),
            _ => return None,
        })
    }

    /// The effective configuration in the file format, one key per line.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).unwrap_or_default());
        }
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: taylorfold::Error| ConfigError::Invalid(e.to_string());
        if self.count == 0 {
            return Err(ConfigError::Invalid("data.count must be at least 1".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(ConfigError::Invalid("data.height and data.width must be positive".into()));
        }
        self.degradation.validate().map_err(invalid)?;
        self.composer.validate().map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        if self.composer.order > 0 && self.model.derivative.is_none() {
            return Err(ConfigError::Invalid(
                "composer.order > 0 needs a derivative network (model.g_features)".into(),
            ));
        }
        if self.sweep_jobs == 0 {
            return Err(ConfigError::Invalid("sweep.jobs must be at least 1".into()));
        }
        if let Some(&o) = self.sweep_orders.iter().find(|&&o| o > MAX_ORDER) {
            return Err(ConfigError::Invalid(format!(
                "sweep order {o} outside 0..={MAX_ORDER}"
            )));
        }
        Ok(())
    }
}

/// Parses the `key = value` file format into ordered assignments.
pub fn parse_config_text(text: &str, origin: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            path: origin.to_owned(),
            line: n + 1,
        })?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(ConfigError::UnknownKey(k.to_owned()));
        }
        out.push((k.to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_text(&text, &path.display().to_string())
}

fn parse_preset(v: &str) -> Result<Preset, ConfigError> {
    match v.trim() {
        "paper" => Ok(Preset::Paper),
        "desk" => Ok(Preset::Desk),
        _ => Err(bad("preset", v, "expected paper or desk")),
    }
}

fn bad(key: &str, value: &str, reason: impl ToString) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_owned(),
        value: value.to_owned(),
        reason: reason.to_string(),
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| bad(key, v, e))
}

fn parse_with<T, E: std::fmt::Display>(
    key: &str,
    v: &str,
    f: impl Fn(&str) -> Result<T, E>,
) -> Result<T, ConfigError> {
    f(v).map_err(|e| bad(key, v, e))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>, ConfigError> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_orders(key: &str, v: &str) -> Result<Vec<usize>, ConfigError> {
    if let Some((lo, hi)) = v.split_once("..") {
        let lo: usize = parse(key, lo.trim())?;
        let hi: usize = parse(key, hi.trim())?;
        if lo > hi {
            return Err(bad(key, v, "empty range"));
        }
        return Ok((lo..=hi).collect());
    }
    parse_list(key, v)
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}
