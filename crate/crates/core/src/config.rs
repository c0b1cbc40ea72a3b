//! Experiment configuration: plain `key = value` lines, full-line `#`
//! comments, dotted keys. Parsing is strict — unknown or unused keys are
//! errors with line numbers — and `render` emits a canonical resolved copy
//! that parses back to the same configuration.

use crate::data::{parse_idx, synth_blobs, Dataset};
use crate::error::{Error, Result};
use crate::losses::MarginVariant;
use crate::training::{BackboneConfig, BackboneKind, LossSpec, OptimizerConfig};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetConfig {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep only the first n training samples (e.g. 50,000 of 60,000).
        train_limit: Option<usize>,
    },
    Synth {
        classes: usize,
        dim: usize,
        n_per_class: usize,
        noise_good: f64,
        noise_low: f64,
        low_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub loss: LossSpec,
    pub optimizer: OptimizerConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub fraction: f64,
}

struct Raw {
    entries: BTreeMap<String, (String, usize)>,
    consumed: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl Raw {
    fn parse(text: &str) -> Result<Raw> {
        let mut entries = BTreeMap::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {line_no}: expected `key = value`, got `{line}`"
                )));
            };
            let key = k.trim().to_string();
            let value = v.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {line_no}: empty key")));
            }
            if let Some((_, first)) = entries.insert(key.clone(), (value, line_no)) {
                return Err(Error::Config(format!(
                    "line {line_no}: duplicate key `{key}` (first set on line {first})"
                )));
            }
        }
        Ok(Raw {
            entries,
            consumed: Default::default(),
        })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.consumed.borrow_mut().insert(key.to_string());
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    fn line(&self, key: &str) -> usize {
        self.entries.get(key).map(|(_, l)| *l).unwrap_or(0)
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn parse_num<T: std::str::FromStr>(&self, key: &str, value: &str) -> Result<T> {
        value.parse::<T>().map_err(|_| {
            Error::Config(format!(
                "line {}: {key}: invalid value `{value}`",
                self.line(key)
            ))
        })
    }

    fn num<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => self.parse_num(key, v),
        }
    }

    fn num_required<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.require(key)?;
        self.parse_num(key, v)
    }

    fn list(&self, key: &str, default: Vec<usize>) -> Result<Vec<usize>> {
        match self.get(key) {
            None => Ok(default),
            Some("") => Ok(vec![]),
            Some(v) => v
                .split(',')
                .map(|part| {
                    part.trim().parse::<usize>().map_err(|_| {
                        Error::Config(format!(
                            "line {}: {key}: invalid list entry `{part}`",
                            self.line(key)
                        ))
                    })
                })
                .collect(),
        }
    }

    fn finish(self) -> Result<()> {
        let consumed = self.consumed.borrow();
        for (key, (_, line)) in &self.entries {
            if !consumed.contains(key) {
                return Err(Error::Config(format!(
                    "line {line}: unexpected key `{key}`"
                )));
            }
        }
        Ok(())
    }
}

fn parse_variant(raw: &Raw, key: &str) -> Result<MarginVariant> {
    match raw.get(key) {
        None => Ok(MarginVariant::AdditiveAngle),
        Some("additive_angle") => Ok(MarginVariant::AdditiveAngle),
        Some("additive_cosine") => Ok(MarginVariant::AdditiveCosine),
        Some(other) => Err(Error::Config(format!(
            "line {}: {key}: unknown margin variant `{other}`",
            raw.line(key)
        ))),
    }
}

/// Parses a configuration file; `dir` anchors relative dataset paths.
pub fn parse_config(text: &str, dir: &Path) -> Result<ExperimentConfig> {
    let raw = Raw::parse(text)?;

    let dataset = match raw.require("dataset.kind")? {
        "idx" => {
            let path = |key: &str| -> Result<PathBuf> {
                let p = dir.join(raw.require(key)?);
                if !p.exists() {
                    return Err(Error::Config(format!(
                        "line {}: {key}: path `{}` does not exist",
                        raw.line(key),
                        p.display()
                    )));
                }
                Ok(p)
            };
            DatasetConfig::Idx {
                train_images: path("dataset.train_images")?,
                train_labels: path("dataset.train_labels")?,
                test_images: path("dataset.test_images")?,
                test_labels: path("dataset.test_labels")?,
                train_limit: match raw.get("dataset.train_limit") {
                    None => None,
                    Some(v) => Some(raw.parse_num("dataset.train_limit", v)?),
                },
            }
        }
        "synth" => DatasetConfig::Synth {
            classes: raw.num_required("dataset.classes")?,
            dim: raw.num_required("dataset.dim")?,
            n_per_class: raw.num_required("dataset.n_per_class")?,
            noise_good: raw.num("dataset.noise_good", 0.05)?,
            noise_low: raw.num("dataset.noise_low", 0.5)?,
            low_fraction: raw.num("dataset.low_fraction", 0.2)?,
        },
        other => {
            return Err(Error::Config(format!(
                "line {}: dataset.kind: unknown dataset kind `{other}`",
                raw.line("dataset.kind")
            )))
        }
    };

    let default_backbone_kind = match dataset {
        DatasetConfig::Idx { .. } => "cnn",
        DatasetConfig::Synth { .. } => "mlp",
    };
    let feature_dim = raw.num("backbone.feature_dim", 2)?;
    let backbone = match raw.get("backbone.kind").unwrap_or(default_backbone_kind) {
        "cnn" => BackboneConfig::cnn(raw.list("backbone.stages", vec![32, 64, 128])?, feature_dim),
        "mlp" => BackboneConfig::mlp(raw.list("backbone.hidden", vec![16])?, feature_dim),
        other => {
            return Err(Error::Config(format!(
                "line {}: backbone.kind: unknown backbone `{other}`",
                raw.line("backbone.kind")
            )))
        }
    };
    backbone.validate().map_err(|e| Error::Config(e.to_string()))?;

    let loss = match raw.require("loss.kind")? {
        "softmax" => LossSpec::Softmax,
        "fixed_norm" => LossSpec::FixedNorm {
            s: raw.num("loss.s", 10.0)?,
        },
        "cm_softmax" => LossSpec::CmSoftmax {
            p: raw.num("loss.p", 0.9)?,
            gamma: raw.num("loss.gamma", 1.0)?,
        },
        "cm_margin" => LossSpec::CmMargin {
            p: raw.num("loss.p", 0.9)?,
            gamma: raw.num("loss.gamma", 1.0)?,
            variant: parse_variant(&raw, "loss.variant")?,
            margin: raw.num("loss.m", 0.5)?,
        },
        "fixed_margin" => LossSpec::FixedMargin {
            s: raw.num("loss.s", 10.0)?,
            variant: parse_variant(&raw, "loss.variant")?,
            margin: raw.num("loss.m", 0.5)?,
        },
        other => {
            return Err(Error::Config(format!(
                "line {}: loss.kind: unknown loss `{other}`",
                raw.line("loss.kind")
            )))
        }
    };

    let optimizer = OptimizerConfig {
        learning_rate: raw.num("optim.lr", 0.05)?,
        decay_epochs: raw.list("optim.decay_epochs", vec![12, 17])?,
        decay_factor: raw.num("optim.decay_factor", 0.1)?,
        momentum: raw.num("optim.momentum", 0.9)?,
        weight_decay: raw.num("optim.weight_decay", 5e-4)?,
        epochs: raw.num("optim.epochs", 20)?,
        batch_size: raw.num("optim.batch_size", 128)?,
        seed: raw.num("seed", 0)?,
    };
    optimizer.validate().map_err(|e| Error::Config(e.to_string()))?;

    let out_dir = dir.join(raw.get("out").unwrap_or("out"));
    let fraction = raw.num("fraction", 0.2)?;
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let seed = optimizer.seed;

    raw.finish()?;
    Ok(ExperimentConfig {
        dataset,
        backbone,
        loss,
        optimizer,
        out_dir,
        seed,
        fraction,
    })
}

/// Reads and parses a configuration file, anchoring relative paths at the
/// file's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, dir)
}

/// Canonical resolved form; parsing it back yields the same configuration.
pub fn render(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    let mut push = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };

    match &cfg.dataset {
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            train_limit,
        } => {
            push("dataset.kind", "idx".into());
            push("dataset.train_images", train_images.display().to_string());
            push("dataset.train_labels", train_labels.display().to_string());
            push("dataset.test_images", test_images.display().to_string());
            push("dataset.test_labels", test_labels.display().to_string());
            if let Some(limit) = train_limit {
                push("dataset.train_limit", limit.to_string());
            }
        }
        DatasetConfig::Synth {
            classes,
            dim,
            n_per_class,
            noise_good,
            noise_low,
            low_fraction,
        } => {
            push("dataset.kind", "synth".into());
            push("dataset.classes", classes.to_string());
            push("dataset.dim", dim.to_string());
            push("dataset.n_per_class", n_per_class.to_string());
            push("dataset.noise_good", noise_good.to_string());
            push("dataset.noise_low", noise_low.to_string());
            push("dataset.low_fraction", low_fraction.to_string());
        }
    }

    let join = |v: &[usize]| {
        v.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    match cfg.backbone.kind {
        BackboneKind::Cnn => {
            push("backbone.kind", "cnn".into());
            push("backbone.stages", join(&cfg.backbone.stages));
        }
        BackboneKind::Mlp => {
            push("backbone.kind", "mlp".into());
            push("backbone.hidden", join(&cfg.backbone.hidden));
        }
    }
    push("backbone.feature_dim", cfg.backbone.feature_dim.to_string());

    let variant_name = |v: &MarginVariant| match v {
        MarginVariant::AdditiveAngle => "additive_angle",
        MarginVariant::AdditiveCosine => "additive_cosine",
    };
    push("loss.kind", cfg.loss.name().into());
    match &cfg.loss {
        LossSpec::Softmax => {}
        LossSpec::FixedNorm { s } => push("loss.s", s.to_string()),
        LossSpec::CmSoftmax { p, gamma } => {
            push("loss.p", p.to_string());
            push("loss.gamma", gamma.to_string());
        }
        LossSpec::CmMargin {
            p,
            gamma,
            variant,
            margin,
        } => {
            push("loss.p", p.to_string());
            push("loss.gamma", gamma.to_string());
            push("loss.variant", variant_name(variant).into());
            push("loss.m", margin.to_string());
        }
        LossSpec::FixedMargin { s, variant, margin } => {
            push("loss.s", s.to_string());
            push("loss.variant", variant_name(variant).into());
            push("loss.m", margin.to_string());
        }
    }

    let o = &cfg.optimizer;
    push("optim.lr", o.learning_rate.to_string());
    push("optim.decay_epochs", join(&o.decay_epochs));
    push("optim.decay_factor", o.decay_factor.to_string());
    push("optim.momentum", o.momentum.to_string());
    push("optim.weight_decay", o.weight_decay.to_string());
    push("optim.epochs", o.epochs.to_string());
    push("optim.batch_size", o.batch_size.to_string());
    push("seed", cfg.seed.to_string());
    push("fraction", cfg.fraction.to_string());
    push("out", cfg.out_dir.display().to_string());
    out
}

/// Loads the training split described by the configuration.
pub fn load_train_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetConfig::Idx {
            train_images,
            train_labels,
            train_limit,
            ..
        } => {
            let mut ds = parse_idx(train_images, train_labels)?;
            if let Some(limit) = train_limit {
                ds.truncate(*limit);
            }
            Ok(ds)
        }
        DatasetConfig::Synth {
            classes,
            dim,
            n_per_class,
            noise_good,
            noise_low,
            low_fraction,
        } => synth_blobs(
            *classes,
            *dim,
            *n_per_class,
            *noise_good,
            *noise_low,
            *low_fraction,
            cfg.seed,
        ),
    }
}

/// Loads the held-out split: the IDX test files, or a fresh synthetic draw
/// from seed + 1.
pub fn load_test_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetConfig::Idx {
            test_images,
            test_labels,
            ..
        } => parse_idx(test_images, test_labels),
        DatasetConfig::Synth {
            classes,
            dim,
            n_per_class,
            noise_good,
            noise_low,
            low_fraction,
        } => synth_blobs(
            *classes,
            *dim,
            *n_per_class,
            *noise_good,
            *noise_low,
            *low_fraction,
            cfg.seed.wrapping_add(1),
        ),
    }
}
