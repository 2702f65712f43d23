//! Flat key/value experiment configuration.
//!
//! A config file is a TOML document with top-level keys only; see
//! `schema/config.md` for every key. Command-line `--set key=value`
//! overrides are applied on top of the file before validation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::schedules::{scaled_decay_epochs, scaled_warmup_epochs, LambdaSchedule, LrSchedule};
use crate::synthdata::{DatasetSpec, ViewConfig};
use crate::trainer::{Objective, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Infonce,
    Simcon,
    MvSimcon,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "infonce" => Ok(Self::Infonce),
            "simcon" => Ok(Self::Simcon),
            "mv_simcon" => Ok(Self::MvSimcon),
            other => Err(Error::Config(format!(
                "loss_kind: unknown value {other:?} (expected infonce, simcon or mv_simcon)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Infonce => "infonce",
            Self::Simcon => "simcon",
            Self::MvSimcon => "mv_simcon",
        }
    }
}

/// Raw file contents; every key except `loss_kind` may be omitted.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    loss_kind: Option<LossKind>,
    use_multiple_views: Option<bool>,
    use_ncs: Option<bool>,
    use_joint_positives: Option<bool>,
    classes: Option<usize>,
    samples: Option<usize>,
    image_dim: Option<usize>,
    text_dim: Option<usize>,
    within_class_sigma: Option<f64>,
    swap_prob: Option<f64>,
    eval_samples: Option<usize>,
    view_noise_sigma: Option<f64>,
    view_drop_prob: Option<f64>,
    image_hidden: Option<Vec<usize>>,
    text_hidden: Option<Vec<usize>>,
    embed_dim: Option<usize>,
    head_hidden: Option<usize>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    seeds: Option<Vec<u64>>,
    lambda_initial: Option<f64>,
    lambda_step_decrement: Option<f64>,
    lambda_decay_epochs: Option<Vec<usize>>,
    lambda_floor: Option<f64>,
    lr_init: Option<f64>,
    lr_max: Option<f64>,
    lr_min: Option<f64>,
    warmup_epochs: Option<usize>,
    tau_init: Option<f64>,
    learn_tau: Option<bool>,
    weight_decay: Option<f64>,
    recall_threshold: Option<f64>,
    out_dir: Option<String>,
}

/// A validated experiment: one training config replicated over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub loss_kind: LossKind,
    /// Seed-independent training settings; `seed` fields are overwritten per
    /// run.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub recall_threshold: Option<f64>,
    pub out_dir: Option<String>,
}

/// 1-based line of `key = ...` in `text`, if present.
fn line_of(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
}

/// Prefixes the line of the first key named in `msg` that the file sets.
fn locate(msg: String, text: &str) -> String {
    let line = msg
        .split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .find_map(|w| line_of(text, w));
    match line {
        Some(line) => format!("line {line}: {msg}"),
        None => msg,
    }
}

/// Parses one `key=value` override; values use TOML syntax, and bare words
/// are taken as strings.
fn parse_override(item: &str) -> Result<(String, toml::Value)> {
    let (key, value) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} is not of the form key=value")))?;
    let key = key.trim().to_owned();
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_owned()));
    Ok((key, parsed))
}

impl ExperimentConfig {
    /// Parses file text plus overrides.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for item in overrides {
            let (key, value) = parse_override(item)?;
            table.insert(key, value);
        }
        let raw: RawConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(locate(e.message().to_owned(), text)))?;
        Self::resolve(raw).map_err(|e| match e {
            Error::Config(msg) => Error::Config(locate(msg, text)),
            other => other,
        })
    }

    pub fn from_file(path: &std::path::Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    fn resolve(raw: RawConfig) -> Result<Self> {
        let loss_kind = raw
            .loss_kind
            .ok_or_else(|| Error::Config("missing required field `loss_kind`".into()))?;
        let objective = resolve_objective(
            loss_kind,
            raw.use_multiple_views,
            raw.use_ncs,
            raw.use_joint_positives,
        )?;

        let d = TrainConfig::default();
        let ds = DatasetSpec::default();
        let vw = ViewConfig::default();
        let epochs = raw.epochs.unwrap_or(d.epochs);
        let embed_dim = raw.embed_dim.unwrap_or(d.embed_dim);
        let lambda_default = LambdaSchedule::default();
        let lr_default = LrSchedule::default();
        let train = TrainConfig {
            objective,
            dataset: DatasetSpec {
                classes: raw.classes.unwrap_or(ds.classes),
                samples: raw.samples.unwrap_or(ds.samples),
                image_dim: raw.image_dim.unwrap_or(ds.image_dim),
                text_dim: raw.text_dim.unwrap_or(ds.text_dim),
                within_class_sigma: raw.within_class_sigma.unwrap_or(ds.within_class_sigma),
                swap_prob: raw.swap_prob.unwrap_or(ds.swap_prob),
                seed: 0,
            },
            eval_samples: raw.eval_samples.unwrap_or(d.eval_samples),
            views: ViewConfig {
                noise_sigma: raw.view_noise_sigma.unwrap_or(vw.noise_sigma),
                coordinate_drop_prob: raw.view_drop_prob.unwrap_or(vw.coordinate_drop_prob),
            },
            image_hidden: raw.image_hidden.unwrap_or(d.image_hidden),
            text_hidden: raw.text_hidden.unwrap_or(d.text_hidden),
            embed_dim,
            head_hidden: raw.head_hidden.unwrap_or(2 * embed_dim),
            batch_size: raw.batch_size.unwrap_or(d.batch_size),
            epochs,
            seed: 0,
            lambda: LambdaSchedule {
                initial: raw.lambda_initial.unwrap_or(lambda_default.initial),
                step_decrement: raw
                    .lambda_step_decrement
                    .unwrap_or(lambda_default.step_decrement),
                decay_epochs: raw
                    .lambda_decay_epochs
                    .unwrap_or_else(|| scaled_decay_epochs(epochs)),
                floor: raw.lambda_floor.unwrap_or(lambda_default.floor),
            },
            lr: LrSchedule {
                init_lr: raw.lr_init.unwrap_or(lr_default.init_lr),
                max_lr: raw.lr_max.unwrap_or(lr_default.max_lr),
                warmup_epochs: raw
                    .warmup_epochs
                    .unwrap_or_else(|| scaled_warmup_epochs(epochs)),
                total_epochs: epochs,
                min_lr: raw.lr_min.unwrap_or(lr_default.min_lr),
            },
            tau_init: raw.tau_init.unwrap_or(d.tau_init),
            learn_tau: raw.learn_tau.unwrap_or(d.learn_tau),
            weight_decay: raw.weight_decay.unwrap_or(d.weight_decay),
        };
        train.validate()?;
        let seeds = raw.seeds.unwrap_or_else(|| vec![0]);
        if seeds.is_empty() {
            return Err(Error::Config("`seeds` must not be empty".into()));
        }
        if let Some(t) = raw.recall_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!(
                    "`recall_threshold` {t} must lie in [0, 1]"
                )));
            }
        }
        Ok(Self {
            loss_kind,
            train,
            seeds,
            recall_threshold: raw.recall_threshold,
            out_dir: raw.out_dir,
        })
    }

    /// Training config for one seed: the dataset, initialization, batching
    /// and augmentation all follow it.
    pub fn for_seed(&self, seed: u64) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.seed = seed;
        cfg.dataset.seed = seed;
        cfg
    }

    /// Every resolved setting as `(key, value)` in file syntax, lists joined
    /// by `;`. Seeds and output location are excluded.
    pub fn fields(&self) -> Vec<(&'static str, String)> {
        train_fields(self.loss_kind, &self.train)
    }

    /// First 16 hex digits of the SHA-256 of [`Self::fields`].
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.fields() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn resolve_objective(
    kind: LossKind,
    views: Option<bool>,
    ncs: Option<bool>,
    joint: Option<bool>,
) -> Result<Objective> {
    let flag_err = |msg: &str| {
        Err(Error::Config(format!(
            "{msg} (loss_kind = {})",
            kind.name()
        )))
    };
    match kind {
        LossKind::Infonce => {
            if views == Some(true) || ncs == Some(true) || joint == Some(true) {
                return flag_err(
                    "`use_multiple_views`, `use_ncs` and `use_joint_positives` need a SimCon loss",
                );
            }
            Ok(Objective::InfoNce)
        }
        LossKind::Simcon => {
            if views.unwrap_or(false) {
                Ok(Objective::MultiView {
                    ncs: ncs.unwrap_or(false),
                    joint_positives: joint.unwrap_or(false),
                })
            } else if ncs == Some(true) || joint == Some(true) {
                flag_err("`use_ncs` and `use_joint_positives` need `use_multiple_views = true`")
            } else {
                Ok(Objective::SimCon)
            }
        }
        LossKind::MvSimcon => {
            if views == Some(false) {
                return flag_err("`use_multiple_views` cannot be false");
            }
            Ok(Objective::MultiView {
                ncs: ncs.unwrap_or(true),
                joint_positives: joint.unwrap_or(true),
            })
        }
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

/// Flattened settings of one training config.
pub fn train_fields(kind: LossKind, c: &TrainConfig) -> Vec<(&'static str, String)> {
    let (views, ncs, joint) = match c.objective {
        Objective::InfoNce | Objective::SimCon => (false, false, false),
        Objective::MultiView {
            ncs,
            joint_positives,
        } => (true, ncs, joint_positives),
    };
    vec![
        ("loss_kind", kind.name().to_owned()),
        ("use_multiple_views", views.to_string()),
        ("use_ncs", ncs.to_string()),
        ("use_joint_positives", joint.to_string()),
        ("classes", c.dataset.classes.to_string()),
        ("samples", c.dataset.samples.to_string()),
        ("image_dim", c.dataset.image_dim.to_string()),
        ("text_dim", c.dataset.text_dim.to_string()),
        (
            "within_class_sigma",
            c.dataset.within_class_sigma.to_string(),
        ),
        ("swap_prob", c.dataset.swap_prob.to_string()),
        ("eval_samples", c.eval_samples.to_string()),
        ("view_noise_sigma", c.views.noise_sigma.to_string()),
        ("view_drop_prob", c.views.coordinate_drop_prob.to_string()),
        ("image_hidden", list(&c.image_hidden)),
        ("text_hidden", list(&c.text_hidden)),
        ("embed_dim", c.embed_dim.to_string()),
        ("head_hidden", c.head_hidden.to_string()),
        ("batch_size", c.batch_size.to_string()),
        ("epochs", c.epochs.to_string()),
        ("lambda_initial", c.lambda.initial.to_string()),
        ("lambda_step_decrement", c.lambda.step_decrement.to_string()),
        ("lambda_decay_epochs", list(&c.lambda.decay_epochs)),
        ("lambda_floor", c.lambda.floor.to_string()),
        ("lr_init", c.lr.init_lr.to_string()),
        ("lr_max", c.lr.max_lr.to_string()),
        ("lr_min", c.lr.min_lr.to_string()),
        ("warmup_epochs", c.lr.warmup_epochs.to_string()),
        ("tau_init", c.tau_init.to_string()),
        ("learn_tau", c.learn_tau.to_string()),
        ("weight_decay", c.weight_decay.to_string()),
    ]
}
