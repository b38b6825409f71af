//! Flat `key=value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error; missing keys keep their defaults. Recognised keys:
//!
//! | key | meaning | default |
//! |-----|---------|---------|
//! | `seed` | dataset, initialization and batching seed | `7` |
//! | `dim` | embedding width C | `64` |
//! | `tokens` | image-embedding tokens M | `4` |
//! | `patch` | backbone patch size | `8` |
//! | `encoder_layers` | encoder depth E | `2` |
//! | `decoder_layers` | decoder depth L | `3` |
//! | `use_hcmi`, `use_dsfr`, `use_learnable_weights` | ablation flags | `true` |
//! | `hcmi_residual`, `outer_residual` | residual switches | `true` |
//! | `offset_radius` | offset correction limit, cells | `2` |
//! | `noise_kind` | `none`, `class` or `typo` | `none` |
//! | `noise_rate` | fraction of prompts perturbed | `0` |
//! | `train_categories`, `val_categories`, `test_categories` | comma-separated ids | `0..8`, `8,9`, `10..14` |
//! | `instances_per_category` | training instances per category | `1` |
//! | `heldout_instances` | extra instances per training category for held-out eval | `0` |
//! | `steps`, `batch_size`, `lr` | optimisation | `2000`, `8`, `0.001` |
//! | `lambda_heatmap`, `sigma`, `heatmap_norm` | loss (`l2` or `l1`) | `2`, `1.5`, `l2` |
//! | `data` | dataset directory; generated from `seed` when absent | none |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::dsfr::AblationFlags;
use crate::error::{Error, Result};
use crate::pipeline::ModelConfig;
use crate::training::{HeatmapNorm, LossConfig, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NoiseKind {
    #[default]
    None,
    ClassSubstitute,
    Typo,
}

impl NoiseKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NoiseKind::None),
            "class" => Ok(NoiseKind::ClassSubstitute),
            "typo" => Ok(NoiseKind::Typo),
            other => Err(Error::Config(format!("unknown noise kind `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::None => "none",
            NoiseKind::ClassSubstitute => "class",
            NoiseKind::Typo => "typo",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: (0..8).collect(),
            val: vec![8, 9],
            test: (10..14).collect(),
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Config("train split is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(*id) {
                return Err(Error::Config(format!("category {id} appears in more than one split")));
            }
        }
        Ok(())
    }

    pub fn category_count(&self) -> usize {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .max()
            .map_or(0, |m| m + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub noise: NoiseSpec,
    pub splits: SplitSpec,
    pub instances_per_category: usize,
    pub heldout_instances: usize,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let seed = 7;
        ExperimentConfig {
            seed,
            model: ModelConfig::default(),
            noise: NoiseSpec::default(),
            splits: SplitSpec::default(),
            instances_per_category: 1,
            heldout_instances: 0,
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            data: None,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects a boolean, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            if entries.insert(k.trim().to_owned(), v.trim().to_owned()).is_some() {
                return Err(Error::Config(format!("duplicate key `{}`", k.trim())));
            }
        }

        let mut c = ExperimentConfig::default();
        let mut train_seed_set = false;
        for (k, v) in &entries {
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "seed" => c.seed = parse_num(k, v)?,
                "dim" => c.model.dim = parse_num(k, v)?,
                "tokens" => c.model.tokens = parse_num(k, v)?,
                "patch" => c.model.patch = parse_num(k, v)?,
                "encoder_layers" => c.model.encoder_layers = parse_num(k, v)?,
                "decoder_layers" => c.model.decoder_layers = parse_num(k, v)?,
                "use_hcmi" => c.model.flags.use_hcmi = parse_bool(k, v)?,
                "use_dsfr" => c.model.flags.use_dsfr = parse_bool(k, v)?,
                "use_learnable_weights" => c.model.flags.use_learnable_weights = parse_bool(k, v)?,
                "hcmi_residual" => c.model.hcmi_residual = parse_bool(k, v)?,
                "outer_residual" => c.model.outer_residual = parse_bool(k, v)?,
                "offset_radius" => c.model.offset_radius = parse_num(k, v)?,
                "noise_kind" => c.noise.kind = NoiseKind::parse(v)?,
                "noise_rate" => c.noise.rate = parse_num(k, v)?,
                "train_categories" => c.splits.train = parse_list(k, v)?,
                "val_categories" => c.splits.val = parse_list(k, v)?,
                "test_categories" => c.splits.test = parse_list(k, v)?,
                "instances_per_category" => c.instances_per_category = parse_num(k, v)?,
                "heldout_instances" => c.heldout_instances = parse_num(k, v)?,
                "steps" => c.train.steps = parse_num(k, v)?,
                "batch_size" => c.train.batch_size = parse_num(k, v)?,
                "lr" => c.train.base_lr = parse_num(k, v)?,
                "train_seed" => {
                    c.train.seed = parse_num(k, v)?;
                    train_seed_set = true;
                }
                "lambda_heatmap" => c.train.loss.lambda_heatmap = parse_num(k, v)?,
                "sigma" => c.train.loss.sigma = parse_num(k, v)?,
                "heatmap_norm" => {
                    c.train.loss.norm = match v {
                        "l2" => HeatmapNorm::L2,
                        "l1" => HeatmapNorm::L1,
                        _ => return Err(Error::Config(format!("unknown heatmap_norm `{v}`"))),
                    }
                }
                "data" => c.data = Some(PathBuf::from(v)),
                other => return Err(Error::Config(format!("unknown key `{other}`"))),
            }
        }
        if !train_seed_set {
            c.train.seed = c.seed;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.splits.validate()?;
        if self.model.image_size != super::dataset::IMAGE_SIZE {
            return Err(Error::Config(format!(
                "image_size is fixed at {}",
                super::dataset::IMAGE_SIZE
            )));
        }
        if self.instances_per_category == 0 {
            return Err(Error::Config("instances_per_category must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise.rate) {
            return Err(Error::Config("noise_rate must lie in [0, 1]".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.train.base_lr > 0.0) || !(self.train.loss.sigma > 0.0) || !(self.train.loss.lambda_heatmap >= 0.0) {
            return Err(Error::Config("lr and sigma must be positive, lambda_heatmap non-negative".into()));
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k}={v}").expect("write to string");
        kv("seed", self.seed.to_string());
        kv("dim", m.dim.to_string());
        kv("tokens", m.tokens.to_string());
        kv("patch", m.patch.to_string());
        kv("encoder_layers", m.encoder_layers.to_string());
        kv("decoder_layers", m.decoder_layers.to_string());
        kv("use_hcmi", m.flags.use_hcmi.to_string());
        kv("use_dsfr", m.flags.use_dsfr.to_string());
        kv("use_learnable_weights", m.flags.use_learnable_weights.to_string());
        kv("hcmi_residual", m.hcmi_residual.to_string());
        kv("outer_residual", m.outer_residual.to_string());
        kv("offset_radius", m.offset_radius.to_string());
        kv("noise_kind", self.noise.kind.as_str().to_owned());
        kv("noise_rate", self.noise.rate.to_string());
        kv("train_categories", join(&self.splits.train));
        kv("val_categories", join(&self.splits.val));
        kv("test_categories", join(&self.splits.test));
        kv("instances_per_category", self.instances_per_category.to_string());
        kv("heldout_instances", self.heldout_instances.to_string());
        kv("steps", t.steps.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.base_lr.to_string());
        kv("train_seed", t.seed.to_string());
        kv("lambda_heatmap", t.loss.lambda_heatmap.to_string());
        kv("sigma", t.loss.sigma.to_string());
        kv(
            "heatmap_norm",
            match t.loss.norm {
                HeatmapNorm::L2 => "l2",
                HeatmapNorm::L1 => "l1",
            }
            .to_owned(),
        );
        if let Some(d) = &self.data {
            kv("data", d.display().to_string());
        }
        out
    }

    pub fn loss(&self) -> LossConfig {
        self.train.loss
    }

    pub fn with_flags(&self, flags: AblationFlags) -> Self {
        let mut c = self.clone();
        c.model.flags = flags;
        c
    }
}
