//! Plain-text `key = value` configuration with dotted keys and `#`
//! comments. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::head::{Similarity, ThresholdMode, DEFAULT_FIXED_THRESHOLD};
use crate::superpixel::FelzParams;
use crate::training::TrainConfig;

/// Cross-validation split of the dataset's scans.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub num_folds: usize,
    /// Index of the held-out fold.
    pub fold: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { num_folds: 4, fold: 3 }
    }
}

/// Felzenszwalb settings used by `pseudo-label`; `min_size` is given at
/// 256×256 and rescaled by slice area.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperpixelConfig {
    pub scale: f64,
    pub sigma: f64,
    pub min_size: usize,
}

impl Default for SuperpixelConfig {
    fn default() -> Self {
        let p = FelzParams::default();
        SuperpixelConfig {
            scale: p.scale,
            sigma: p.sigma,
            min_size: p.min_size,
        }
    }
}

/// Everything a run is configured by.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub superpixel: SuperpixelConfig,
}

/// Every key with its description, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("train.iterations", "number of SGD iterations"),
    ("train.lr0", "initial learning rate"),
    ("train.decay", "learning-rate factor applied every 1000 iterations"),
    ("train.class_weight_bg", "query-loss weight of background pixels"),
    ("train.class_weight_fg", "query-loss weight of foreground pixels"),
    ("train.ccr_enabled", "add the cyclic support re-segmentation loss"),
    ("train.ccr_threshold", "fixed mask threshold used by the cyclic loss"),
    ("train.seed", "seed for weights and episode sampling"),
    ("train.checkpoint_every", "iterations between checkpoints"),
    ("train.min_fg_pixels", "smallest pseudo-mask in pixels at 256x256"),
    (
        "train.identity_transforms",
        "use the support itself as query (debugging)",
    ),
    (
        "train.exclude_organs",
        "comma-separated organs whose slices are not trained on",
    ),
    ("encoder.in_channels", "image channels"),
    (
        "encoder.feature_dim",
        "feature channels; must equal the last block width",
    ),
    ("encoder.block_channels", "output channels of the four conv blocks"),
    ("encoder.dilations", "dilation of the four conv blocks"),
    ("encoder.strides", "stride of the four conv blocks; product must be 8"),
    ("head.temperature", "softmax temperature over prototypes"),
    ("head.window", "mask pooling window"),
    ("head.threshold", "mask binarization: dynamic or fixed"),
    ("head.fixed_threshold", "threshold used when head.threshold = fixed"),
    (
        "head.top_k_fraction",
        "fraction of most similar prototypes kept per pixel",
    ),
    ("head.similarity", "cosine or dot"),
    ("head.logit_scale", "score multiplier before the final two-way softmax"),
    (
        "head.global_prototype",
        "append the masked-average prototype to the foreground bag",
    ),
    ("transforms.rotation_deg", "max absolute rotation in degrees"),
    (
        "transforms.translation",
        "max absolute translation as a fraction of the extent",
    ),
    ("transforms.scale_min", "smallest scale factor"),
    ("transforms.scale_max", "largest scale factor"),
    ("transforms.shear_deg", "max absolute shear in degrees"),
    ("transforms.elastic_alpha", "elastic displacement magnitude in pixels"),
    ("transforms.elastic_sigma", "elastic displacement smoothness in pixels"),
    ("transforms.gamma_min", "smallest gamma (log-uniform)"),
    ("transforms.gamma_max", "largest gamma (log-uniform)"),
    ("data.num_folds", "number of contiguous scan folds"),
    ("data.fold", "held-out fold index"),
    ("superpixel.scale", "Felzenszwalb merge scale"),
    ("superpixel.sigma", "Gaussian pre-smoothing"),
    ("superpixel.min_size", "smallest segment in pixels at 256x256"),
];

fn list<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn value_of(c: &RunConfig, key: &str) -> String {
    let t = &c.train;
    match key {
        "train.iterations" => t.iterations.to_string(),
        "train.lr0" => t.lr0.to_string(),
        "train.decay" => t.decay.to_string(),
        "train.class_weight_bg" => t.class_weights[0].to_string(),
        "train.class_weight_fg" => t.class_weights[1].to_string(),
        "train.ccr_enabled" => t.ccr_enabled.to_string(),
        "train.ccr_threshold" => t.ccr_threshold.to_string(),
        "train.seed" => t.seed.to_string(),
        "train.checkpoint_every" => t.checkpoint_every.to_string(),
        "train.min_fg_pixels" => t.min_fg_pixels.to_string(),
        "train.identity_transforms" => t.identity_transforms.to_string(),
        "train.exclude_organs" => t.exclude_organs.join(","),
        "encoder.in_channels" => t.encoder.in_channels.to_string(),
        "encoder.feature_dim" => t.encoder.feature_dim.to_string(),
        "encoder.block_channels" => list(&t.encoder.block_channels),
        "encoder.dilations" => list(&t.encoder.dilations),
        "encoder.strides" => list(&t.encoder.strides),
        "head.temperature" => t.head.temperature.to_string(),
        "head.window" => t.head.window.to_string(),
        "head.threshold" => match t.head.threshold {
            ThresholdMode::Dynamic => "dynamic".into(),
            ThresholdMode::Fixed(_) => "fixed".into(),
        },
        "head.fixed_threshold" => match t.head.threshold {
            ThresholdMode::Fixed(v) => v.to_string(),
            ThresholdMode::Dynamic => DEFAULT_FIXED_THRESHOLD.to_string(),
        },
        "head.top_k_fraction" => t.head.top_k_fraction.to_string(),
        "head.similarity" => match t.head.similarity {
            Similarity::Cosine => "cosine".into(),
            Similarity::Dot => "dot".into(),
        },
        "head.logit_scale" => t.head.logit_scale.to_string(),
        "head.global_prototype" => t.head.global_prototype.to_string(),
        "transforms.rotation_deg" => t.geo.rotation_deg.to_string(),
        "transforms.translation" => t.geo.translation.to_string(),
        "transforms.scale_min" => t.geo.scale_min.to_string(),
        "transforms.scale_max" => t.geo.scale_max.to_string(),
        "transforms.shear_deg" => t.geo.shear_deg.to_string(),
        "transforms.elastic_alpha" => t.geo.elastic_alpha.to_string(),
        "transforms.elastic_sigma" => t.geo.elastic_sigma.to_string(),
        "transforms.gamma_min" => t.gamma.min.to_string(),
        "transforms.gamma_max" => t.gamma.max.to_string(),
        "data.num_folds" => c.data.num_folds.to_string(),
        "data.fold" => c.data.fold.to_string(),
        "superpixel.scale" => c.superpixel.scale.to_string(),
        "superpixel.sigma" => c.superpixel.sigma.to_string(),
        "superpixel.min_size" => c.superpixel.min_size.to_string(),
        _ => unreachable!("key table and serializer disagree on {key}"),
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_four(key: &str, value: &str) -> Result<[usize; 4]> {
    let items: Vec<usize> = value.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected four comma-separated values")))
}

/// Pending fixed-threshold value, applied after all keys are read so that
/// `head.threshold` and `head.fixed_threshold` can come in any order.
struct Pending {
    fixed: Option<f64>,
    mode_fixed: Option<bool>,
}

fn set(c: &mut RunConfig, pending: &mut Pending, key: &str, value: &str) -> Result<()> {
    let t = &mut c.train;
    match key {
        "train.iterations" => t.iterations = parse(key, value)?,
        "train.lr0" => t.lr0 = parse(key, value)?,
        "train.decay" => t.decay = parse(key, value)?,
        "train.class_weight_bg" => t.class_weights[0] = parse(key, value)?,
        "train.class_weight_fg" => t.class_weights[1] = parse(key, value)?,
        "train.ccr_enabled" => t.ccr_enabled = parse_bool(key, value)?,
        "train.ccr_threshold" => t.ccr_threshold = parse(key, value)?,
        "train.seed" => t.seed = parse(key, value)?,
        "train.checkpoint_every" => t.checkpoint_every = parse(key, value)?,
        "train.min_fg_pixels" => t.min_fg_pixels = parse(key, value)?,
        "train.identity_transforms" => t.identity_transforms = parse_bool(key, value)?,
        "train.exclude_organs" => {
            t.exclude_organs = value
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect()
        }
        "encoder.in_channels" => t.encoder.in_channels = parse(key, value)?,
        "encoder.feature_dim" => t.encoder.feature_dim = parse(key, value)?,
        "encoder.block_channels" => t.encoder.block_channels = parse_four(key, value)?,
        "encoder.dilations" => t.encoder.dilations = parse_four(key, value)?,
        "encoder.strides" => t.encoder.strides = parse_four(key, value)?,
        "head.temperature" => t.head.temperature = parse(key, value)?,
        "head.window" => t.head.window = parse(key, value)?,
        "head.threshold" => {
            pending.mode_fixed = Some(match value {
                "dynamic" => false,
                "fixed" => true,
                _ => {
                    return Err(Error::Config(format!(
                        "{key}: expected dynamic or fixed, got {value:?}"
                    )))
                }
            })
        }
        "head.fixed_threshold" => pending.fixed = Some(parse(key, value)?),
        "head.top_k_fraction" => t.head.top_k_fraction = parse(key, value)?,
        "head.similarity" => {
            t.head.similarity = match value {
                "cosine" => Similarity::Cosine,
                "dot" => Similarity::Dot,
                _ => return Err(Error::Config(format!("{key}: expected cosine or dot, got {value:?}"))),
            }
        }
        "head.logit_scale" => t.head.logit_scale = parse(key, value)?,
        "head.global_prototype" => t.head.global_prototype = parse_bool(key, value)?,
        "transforms.rotation_deg" => t.geo.rotation_deg = parse(key, value)?,
        "transforms.translation" => t.geo.translation = parse(key, value)?,
        "transforms.scale_min" => t.geo.scale_min = parse(key, value)?,
        "transforms.scale_max" => t.geo.scale_max = parse(key, value)?,
        "transforms.shear_deg" => t.geo.shear_deg = parse(key, value)?,
        "transforms.elastic_alpha" => t.geo.elastic_alpha = parse(key, value)?,
        "transforms.elastic_sigma" => t.geo.elastic_sigma = parse(key, value)?,
        "transforms.gamma_min" => t.gamma.min = parse(key, value)?,
        "transforms.gamma_max" => t.gamma.max = parse(key, value)?,
        "data.num_folds" => c.data.num_folds = parse(key, value)?,
        "data.fold" => c.data.fold = parse(key, value)?,
        "superpixel.scale" => c.superpixel.scale = parse(key, value)?,
        "superpixel.sigma" => c.superpixel.sigma = parse(key, value)?,
        "superpixel.min_size" => c.superpixel.min_size = parse(key, value)?,
        _ => return Err(Error::Config(format!("unknown key {key:?}"))),
    }
    Ok(())
}

impl RunConfig {
    /// Parses a config file body; keys not given keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut pending = Pending {
            fixed: None,
            mode_fixed: None,
        };
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            set(&mut c, &mut pending, key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip_prefix(e))))?;
        }
        let fixed = pending.fixed.unwrap_or(DEFAULT_FIXED_THRESHOLD);
        match pending.mode_fixed {
            Some(true) => c.train.head.threshold = ThresholdMode::Fixed(fixed),
            Some(false) => c.train.head.threshold = ThresholdMode::Dynamic,
            None if pending.fixed.is_some() => c.train.head.threshold = ThresholdMode::Fixed(fixed),
            None => {}
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.data.num_folds == 0 || self.data.fold >= self.data.num_folds {
            return Err(Error::Config(format!(
                "data.fold {} must be below data.num_folds {}",
                self.data.fold, self.data.num_folds
            )));
        }
        FelzParams {
            scale: self.superpixel.scale,
            sigma: self.superpixel.sigma,
            min_size: self.superpixel.min_size,
        }
        .validate()
    }

    /// Every key, each preceded by its description.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, doc) in KEYS {
            let _ = writeln!(out, "# {doc}\n{key} = {}", value_of(self, key));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Felzenszwalb parameters for a slice of the given extent.
    pub fn felz_params(&self, height: usize, width: usize) -> FelzParams {
        FelzParams {
            scale: self.superpixel.scale,
            sigma: self.superpixel.sigma,
            min_size: crate::superpixel::scaled_min_size(self.superpixel.min_size, height, width),
        }
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
