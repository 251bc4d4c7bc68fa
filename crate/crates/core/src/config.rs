//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown keys are rejected. Every key has a default, listed in [`KEYS`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::BlockMaskParams;
use crate::error::{Error, Result};
use crate::eval::FeatureSource;
use crate::model::{ModelConfig, TargetMode, ViTConfig};
use crate::posembed::{EmbedKind, NoiseTarget, StopSettings};
use crate::trainer::Reg;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Block,
    Random,
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" => Ok(MaskKind::Block),
            "random" => Ok(MaskKind::Random),
            _ => Err(Error::Config(format!(
                "unknown mask kind '{s}' (expected block or random)"
            ))),
        }
    }
}

impl std::fmt::Display for MaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskKind::Block => "block",
            MaskKind::Random => "random",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub patch: usize,
    pub mask: MaskKind,
    pub mask_ratio: f64,
    pub block: BlockMaskParams,
    pub mask_per_image: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub ckpt_every: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_frac: f64,
    pub wd_start: f64,
    pub wd_end: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub reg: Reg,
    pub reg_coeff: f64,
}

impl TrainConfig {
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.steps as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub source: FeatureSource,
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathsConfig {
    /// Empty means "generate synthetic data in memory".
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    pub run_dir: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

/// Every accepted key with a one-line description, in echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("data.height", "image height in pixels (synthetic data)"),
    ("data.width", "image width in pixels (synthetic data)"),
    ("data.classes", "number of synthetic classes"),
    ("data.n_train", "synthetic training images"),
    ("data.n_test", "synthetic test images"),
    ("data.seed", "seed of the synthetic generator"),
    ("data.patch", "patch side in pixels"),
    ("data.mask", "masking strategy: block or random"),
    ("data.mask_ratio", "target fraction for random masking"),
    ("data.mask_blocks", "target blocks per image for block masking"),
    (
        "data.mask_scale_min",
        "smallest target block area as a fraction of the grid",
    ),
    (
        "data.mask_scale_max",
        "largest target block area as a fraction of the grid",
    ),
    ("data.mask_aspect_min", "smallest target block aspect ratio"),
    ("data.mask_aspect_max", "largest target block aspect ratio"),
    ("data.mask_per_image", "draw a separate mask for every image in a batch"),
    ("model.enc_depth", "encoder blocks"),
    ("model.enc_dim", "encoder width d_e"),
    ("model.enc_heads", "encoder attention heads"),
    ("model.pred_depth", "predictor blocks"),
    ("model.pred_dim", "predictor width d_p"),
    ("model.pred_heads", "predictor attention heads"),
    ("model.mlp_ratio", "MLP hidden width as a multiple of the model width"),
    ("model.target", "regression targets: latent_ema or pixel"),
    ("model.target_norm", "layer-normalize targets before the loss"),
    ("stop.sigma", "positional noise variance sigma"),
    (
        "stop.noise_target",
        "tokens receiving noise: masked_only, context_only, both or none",
    ),
    (
        "stop.embed_kind",
        "positions at the predictor: sincos, learned, stop or fixed_cov",
    ),
    ("optim.lr", "peak learning rate"),
    ("optim.lr_min", "final learning rate of the cosine decay"),
    ("optim.warmup_frac", "fraction of steps spent in linear warmup"),
    ("optim.wd_start", "weight decay at step 0"),
    ("optim.wd_end", "weight decay at the last step"),
    ("optim.ema_start", "target-encoder EMA momentum at step 0"),
    ("optim.ema_end", "target-encoder EMA momentum at the last step"),
    ("optim.reg", "explicit penalty on A: none, l1 or l2"),
    ("optim.reg_coeff", "coefficient of the penalty on A"),
    ("train.steps", "optimization steps"),
    ("train.batch", "images per step"),
    ("train.seed", "seed for initialization, batches, masks and noise"),
    ("train.ckpt_every", "checkpoint period in steps (0: final only)"),
    ("eval.source", "probe features: last_layer or last4"),
    ("eval.epochs", "full-batch gradient steps of the linear probe"),
    ("eval.lr", "linear probe learning rate"),
    ("eval.l2", "linear probe L2 penalty"),
    ("paths.train_images", "training images IDX file (empty: synthetic)"),
    ("paths.train_labels", "training labels IDX file"),
    ("paths.test_images", "test images IDX file (empty: synthetic)"),
    ("paths.test_labels", "test labels IDX file"),
    ("paths.run_dir", "output directory of a run"),
];

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig {
                height: 16,
                width: 16,
                classes: 4,
                n_train: 4096,
                n_test: 1024,
                seed: 0,
                patch: 4,
                mask: MaskKind::Block,
                mask_ratio: 0.75,
                block: BlockMaskParams::default(),
                mask_per_image: true,
            },
            model: ModelConfig {
                grid_h: 4,
                grid_w: 4,
                patch_dim: 16,
                encoder: ViTConfig {
                    depth: 4,
                    heads: 4,
                    dim: 64,
                    mlp_ratio: 4.0,
                },
                predictor: ViTConfig {
                    depth: 2,
                    heads: 4,
                    dim: 32,
                    mlp_ratio: 4.0,
                },
                target_mode: TargetMode::LatentEma,
                target_norm: true,
                stop: StopSettings {
                    sigma: 0.25,
                    noise_target: NoiseTarget::MaskedOnly,
                    embed_kind: EmbedKind::Stop,
                },
            },
            train: TrainConfig {
                steps: 2000,
                batch: 64,
                seed: 0,
                ckpt_every: 500,
                lr: 1e-3,
                lr_min: 0.0,
                warmup_frac: 0.05,
                wd_start: 0.04,
                wd_end: 0.4,
                ema_start: 0.996,
                ema_end: 1.0,
                reg: Reg::None,
                reg_coeff: 0.0,
            },
            eval: EvalConfig {
                source: FeatureSource::LastLayer,
                epochs: 300,
                lr: 0.5,
                l2: 0.0,
            },
            paths: PathsConfig {
                train_images: String::new(),
                train_labels: String::new(),
                test_images: String::new(),
                test_labels: String::new(),
                run_dir: "runs/stop".into(),
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
}

fn parse_enum<T: FromStr<Err = Error>>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|e: Error| Error::Config(format!("key '{key}': {e}")))
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let d = &mut self.data;
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "data.height" => d.height = parse(key, v)?,
            "data.width" => d.width = parse(key, v)?,
            "data.classes" => d.classes = parse(key, v)?,
            "data.n_train" => d.n_train = parse(key, v)?,
            "data.n_test" => d.n_test = parse(key, v)?,
            "data.seed" => d.seed = parse(key, v)?,
            "data.patch" => d.patch = parse(key, v)?,
            "data.mask" => d.mask = parse_enum(key, v)?,
            "data.mask_ratio" => d.mask_ratio = parse(key, v)?,
            "data.mask_blocks" => d.block.num_targets = parse(key, v)?,
            "data.mask_scale_min" => d.block.scale.0 = parse(key, v)?,
            "data.mask_scale_max" => d.block.scale.1 = parse(key, v)?,
            "data.mask_aspect_min" => d.block.aspect.0 = parse(key, v)?,
            "data.mask_aspect_max" => d.block.aspect.1 = parse(key, v)?,
            "data.mask_per_image" => d.mask_per_image = parse(key, v)?,
            "model.enc_depth" => m.encoder.depth = parse(key, v)?,
            "model.enc_dim" => m.encoder.dim = parse(key, v)?,
            "model.enc_heads" => m.encoder.heads = parse(key, v)?,
            "model.pred_depth" => m.predictor.depth = parse(key, v)?,
            "model.pred_dim" => m.predictor.dim = parse(key, v)?,
            "model.pred_heads" => m.predictor.heads = parse(key, v)?,
            "model.mlp_ratio" => {
                let r: f64 = parse(key, v)?;
                m.encoder.mlp_ratio = r;
                m.predictor.mlp_ratio = r;
            }
            "model.target" => m.target_mode = parse_enum(key, v)?,
            "model.target_norm" => m.target_norm = parse(key, v)?,
            "stop.sigma" => m.stop.sigma = parse(key, v)?,
            "stop.noise_target" => m.stop.noise_target = parse_enum(key, v)?,
            "stop.embed_kind" => m.stop.embed_kind = parse_enum(key, v)?,
            "optim.lr" => t.lr = parse(key, v)?,
            "optim.lr_min" => t.lr_min = parse(key, v)?,
            "optim.warmup_frac" => t.warmup_frac = parse(key, v)?,
            "optim.wd_start" => t.wd_start = parse(key, v)?,
            "optim.wd_end" => t.wd_end = parse(key, v)?,
            "optim.ema_start" => t.ema_start = parse(key, v)?,
            "optim.ema_end" => t.ema_end = parse(key, v)?,
            "optim.reg" => t.reg = parse_enum(key, v)?,
            "optim.reg_coeff" => t.reg_coeff = parse(key, v)?,
            "train.steps" => t.steps = parse(key, v)?,
            "train.batch" => t.batch = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.ckpt_every" => t.ckpt_every = parse(key, v)?,
            "eval.source" => self.eval.source = parse_enum(key, v)?,
            "eval.epochs" => self.eval.epochs = parse(key, v)?,
            "eval.lr" => self.eval.lr = parse(key, v)?,
            "eval.l2" => self.eval.l2 = parse(key, v)?,
            "paths.train_images" => self.paths.train_images = v.to_string(),
            "paths.train_labels" => self.paths.train_labels = v.to_string(),
            "paths.test_images" => self.paths.test_images = v.to_string(),
            "paths.test_labels" => self.paths.test_labels = v.to_string(),
            "paths.run_dir" => self.paths.run_dir = v.to_string(),
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        self.sync_derived();
        Ok(())
    }

    /// Textual value of a key, in the form [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Result<String> {
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        Ok(match key {
            "data.height" => d.height.to_string(),
            "data.width" => d.width.to_string(),
            "data.classes" => d.classes.to_string(),
            "data.n_train" => d.n_train.to_string(),
            "data.n_test" => d.n_test.to_string(),
            "data.seed" => d.seed.to_string(),
            "data.patch" => d.patch.to_string(),
            "data.mask" => d.mask.to_string(),
            "data.mask_ratio" => d.mask_ratio.to_string(),
            "data.mask_blocks" => d.block.num_targets.to_string(),
            "data.mask_scale_min" => d.block.scale.0.to_string(),
            "data.mask_scale_max" => d.block.scale.1.to_string(),
            "data.mask_aspect_min" => d.block.aspect.0.to_string(),
            "data.mask_aspect_max" => d.block.aspect.1.to_string(),
            "data.mask_per_image" => d.mask_per_image.to_string(),
            "model.enc_depth" => m.encoder.depth.to_string(),
            "model.enc_dim" => m.encoder.dim.to_string(),
            "model.enc_heads" => m.encoder.heads.to_string(),
            "model.pred_depth" => m.predictor.depth.to_string(),
            "model.pred_dim" => m.predictor.dim.to_string(),
            "model.pred_heads" => m.predictor.heads.to_string(),
            "model.mlp_ratio" => m.encoder.mlp_ratio.to_string(),
            "model.target" => m.target_mode.to_string(),
            "model.target_norm" => m.target_norm.to_string(),
            "stop.sigma" => m.stop.sigma.to_string(),
            "stop.noise_target" => m.stop.noise_target.to_string(),
            "stop.embed_kind" => m.stop.embed_kind.to_string(),
            "optim.lr" => t.lr.to_string(),
            "optim.lr_min" => t.lr_min.to_string(),
            "optim.warmup_frac" => t.warmup_frac.to_string(),
            "optim.wd_start" => t.wd_start.to_string(),
            "optim.wd_end" => t.wd_end.to_string(),
            "optim.ema_start" => t.ema_start.to_string(),
            "optim.ema_end" => t.ema_end.to_string(),
            "optim.reg" => t.reg.to_string(),
            "optim.reg_coeff" => t.reg_coeff.to_string(),
            "train.steps" => t.steps.to_string(),
            "train.batch" => t.batch.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.ckpt_every" => t.ckpt_every.to_string(),
            "eval.source" => self.eval.source.to_string(),
            "eval.epochs" => self.eval.epochs.to_string(),
            "eval.lr" => self.eval.lr.to_string(),
            "eval.l2" => self.eval.l2.to_string(),
            "paths.train_images" => self.paths.train_images.clone(),
            "paths.train_labels" => self.paths.train_labels.clone(),
            "paths.test_images" => self.paths.test_images.clone(),
            "paths.test_labels" => self.paths.test_labels.clone(),
            "paths.run_dir" => self.paths.run_dir.clone(),
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        })
    }

    /// Grid and patch sizes follow from the image and patch sides.
    fn sync_derived(&mut self) {
        let p = self.data.patch.max(1);
        self.model.grid_h = self.data.height / p;
        self.model.grid_w = self.data.width / p;
        self.model.patch_dim = p * p;
    }

    /// Parses config text on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip_config_prefix(e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse_str(&text)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// The fully resolved config, one `key = value` line per key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("listed key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.patch == 0 || !d.height.is_multiple_of(d.patch) || !d.width.is_multiple_of(d.patch) {
            return Err(Error::Config(format!(
                "data.patch = {} must divide the {}x{} images",
                d.patch, d.height, d.width
            )));
        }
        if !(d.mask_ratio > 0.0 && d.mask_ratio < 1.0) {
            return Err(Error::Config(format!(
                "data.mask_ratio must be in (0, 1), got {}",
                d.mask_ratio
            )));
        }
        self.model.validate()?;
        let t = &self.train;
        if t.batch == 0 {
            return Err(Error::Config("train.batch must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&t.warmup_frac) {
            return Err(Error::Config(format!(
                "optim.warmup_frac must be in [0, 1], got {}",
                t.warmup_frac
            )));
        }
        for (k, v) in [("optim.ema_start", t.ema_start), ("optim.ema_end", t.ema_end)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{k} must be in [0, 1], got {v}")));
            }
        }
        if !(t.lr >= 0.0 && t.lr_min >= 0.0 && t.wd_start >= 0.0 && t.wd_end >= 0.0 && t.reg_coeff >= 0.0) {
            return Err(Error::Config(
                "learning rates, weight decays and reg_coeff must be >= 0".into(),
            ));
        }
        if self.eval.source == FeatureSource::Last4 && self.model.encoder.depth < 4 {
            return Err(Error::Config("eval.source = last4 needs model.enc_depth >= 4".into()));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        PathBuf::from(&self.paths.run_dir)
    }
}

fn strip_config_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// Help text listing every key with its default.
pub fn keys_help() -> String {
    let defaults = RunConfig::default();
    let mut out = String::from("Config keys (key = default: description):\n");
    for (k, doc) in KEYS {
        let _ = writeln!(out, "  {k} = {}: {doc}", defaults.get(k).expect("listed key"));
    }
    out
}
