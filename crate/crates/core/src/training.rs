//! Episodic self-supervised training.
//!
//! Every iteration draws a slice, picks one of its superpixels as the support
//! mask, manufactures a query by transforming the support, and minimizes a
//! class-weighted cross-entropy on the query plus a cyclic term that
//! re-segments the support from the predicted query mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{init_weights, BoundEncoder, EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::head::{align_mask, downsample_mask, BagKind, HeadConfig, ThresholdMode};
use crate::mask::{spatial_extent, BinaryMask};
use crate::model::{prediction_mask, segment_features};
use crate::numerics::gradcheck::{relative_error, GradCheck, COMPOSED_EPS, DEFAULT_TOLERANCE};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::superpixel::{sample_pseudo_mask_with, scaled_min_size, LabelMap};
use crate::transforms::{make_query, GammaRange, GeoParams, GeoRanges, IntParams};

/// Iterations between learning-rate decays.
pub const DECAY_INTERVAL: usize = 1000;

/// Where a training slice came from.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SliceId {
    pub scan: String,
    pub index: usize,
}

impl std::fmt::Display for SliceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.scan, self.index)
    }
}

/// One slice available for episode sampling.
#[derive(Clone, Debug)]
pub struct TrainingSlice {
    pub id: SliceId,
    /// `[1, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub labels: LabelMap,
}

#[derive(Clone, Debug)]
pub struct Episode<T> {
    pub support_image: Tensor<T>,
    pub support_mask: BinaryMask,
    pub query_image: Tensor<T>,
    pub query_gt: BinaryMask,
    pub slice_id: SliceId,
}

impl<T: Scalar> Episode<T> {
    pub fn cast<U: Scalar>(&self) -> Episode<U> {
        Episode {
            support_image: self.support_image.cast(),
            support_mask: self.support_mask.clone(),
            query_image: self.query_image.cast(),
            query_gt: self.query_gt.clone(),
            slice_id: self.slice_id.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr0: f64,
    /// Learning-rate factor applied every [`DECAY_INTERVAL`] iterations.
    pub decay: f64,
    /// `[background, foreground]` weights of the query loss.
    pub class_weights: [f64; 2],
    pub ccr_enabled: bool,
    /// Fixed binarization threshold used when re-segmenting the support.
    pub ccr_threshold: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Smallest usable pseudo-mask, in pixels at 256×256 (rescaled by area).
    pub min_fg_pixels: usize,
    /// Use the support itself as the query (debugging aid).
    pub identity_transforms: bool,
    /// Slices whose ground truth contains any of these organs are never
    /// used for training.
    pub exclude_organs: Vec<String>,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub geo: GeoRanges,
    pub gamma: GammaRange,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            lr0: 1e-3,
            decay: 0.95,
            class_weights: [0.05, 1.0],
            ccr_enabled: true,
            ccr_threshold: 0.95,
            seed: 0,
            checkpoint_every: 500,
            min_fg_pixels: 100,
            identity_transforms: false,
            exclude_organs: Vec::new(),
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            geo: GeoRanges::default(),
            gamma: GammaRange::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay must be in (0, 1], got {}", self.decay)));
        }
        if !(self.class_weights[0] > 0.0 && self.class_weights[1] > 0.0) {
            return Err(Error::Config("class weights must be > 0".into()));
        }
        if !(self.ccr_threshold > 0.0 && self.ccr_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "ccr_threshold must be in (0, 1], got {}",
                self.ccr_threshold
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be ≥ 1".into()));
        }
        self.encoder.validate()?;
        self.head.validate()?;
        self.geo.validate()?;
        self.gamma.validate()?;
        Ok(())
    }
}

/// `lr0 · decay^⌊iteration / 1000⌋`.
pub fn learning_rate(config: &TrainConfig, iteration: usize) -> f64 {
    config.lr0 * config.decay.powi((iteration / DECAY_INTERVAL) as i32)
}

/// Whether the head can build both prototype bags from this support mask.
fn support_is_usable(mask: &BinaryMask, feat_h: usize, feat_w: usize, head: &HeadConfig) -> Result<bool> {
    let aligned = align_mask(mask, feat_h, feat_w, head.window);
    let (bg, _) = downsample_mask(&aligned.invert(), head.window, head.threshold, BagKind::Background)?;
    if bg.is_empty() {
        return Ok(false);
    }
    if !head.global_prototype {
        let (fg, _) = downsample_mask(&aligned, head.window, head.threshold, BagKind::Foreground)?;
        return Ok(!fg.is_empty());
    }
    Ok(true)
}

/// Pseudo-mask draws per slice before it is declared unusable.
const MASK_ATTEMPTS: usize = 8;

/// Samples a pseudo-mask on one slice and transforms the pair into a query.
/// Redraws masks that leave the head without prototypes or whose
/// transformed copy leaves the frame.
pub fn build_episode<R: Rng>(slice: &TrainingSlice, rng: &mut R, config: &TrainConfig) -> Result<Episode<f32>> {
    let (h, w) = spatial_extent(slice.image.shape())?;
    let feat = (h / crate::encoder::REDUCTION, w / crate::encoder::REDUCTION);
    let min_fg = scaled_min_size(config.min_fg_pixels, h, w);
    for _ in 0..MASK_ATTEMPTS {
        let mask = sample_pseudo_mask_with(&slice.labels, rng, min_fg)?;
        let geo = config.geo.sample(rng);
        let int = config.gamma.sample(rng);
        if !support_is_usable(&mask, feat.0, feat.1, &config.head)? {
            continue;
        }
        let (query_image, query_gt) = if config.identity_transforms {
            (slice.image.clone(), mask.clone())
        } else {
            make_query(&slice.image, &mask, &geo, &int)?
        };
        if query_gt.is_empty() {
            continue;
        }
        return Ok(Episode {
            support_image: slice.image.clone(),
            support_mask: mask,
            query_image,
            query_gt,
            slice_id: slice.id.clone(),
        });
    }
    Err(Error::UnusableSlice(format!("{}: no usable pseudo-mask", slice.id)))
}

/// Draws slices uniformly until one yields an episode.
pub fn sample_episode<R: Rng>(
    pool: &[TrainingSlice],
    rng: &mut R,
    config: &TrainConfig,
) -> Result<(Episode<f32>, usize)> {
    if pool.is_empty() {
        return Err(Error::invalid("training pool is empty"));
    }
    let mut skipped = 0;
    for _ in 0..pool.len() * 4 {
        let slice = &pool[rng.gen_range(0..pool.len())];
        match build_episode(slice, rng, config) {
            Ok(ep) => return Ok((ep, skipped)),
            Err(Error::UnusableSlice(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Err(Error::UnusableSlice(format!(
        "{skipped} consecutive slices were unusable"
    )))
}

/// Class-weighted cross-entropy of `[2, H, W]` probabilities against `gt`.
pub fn ssl_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var, gt: &BinaryMask, class_weights: [f64; 2]) -> Result<Var> {
    tape.weighted_cross_entropy(
        probs,
        gt.bits(),
        [T::from_f64(class_weights[0]), T::from_f64(class_weights[1])],
    )
}

/// Re-segments the support from the query and its predicted mask, with a
/// fixed threshold and unweighted classes. `None` when the predicted mask
/// cannot serve as a support.
pub fn ccr_loss<T: Scalar>(
    tape: &mut Tape<T>,
    query_feat: Var,
    predicted_query_mask: &BinaryMask,
    support_feat: Var,
    support_mask: &BinaryMask,
    head: &HeadConfig,
    threshold: f64,
) -> Result<Option<Var>> {
    if predicted_query_mask.is_empty() {
        return Ok(None);
    }
    let config = HeadConfig {
        threshold: ThresholdMode::Fixed(threshold),
        ..head.clone()
    };
    let seg = match segment_features(
        tape,
        query_feat,
        predicted_query_mask,
        support_feat,
        &config,
        support_mask.height(),
        support_mask.width(),
    ) {
        Ok(seg) => seg,
        Err(Error::DegenerateSupport(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    Ok(Some(tape.weighted_cross_entropy(
        seg.probs,
        support_mask.bits(),
        [T::one(), T::one()],
    )?))
}

#[derive(Clone, Debug)]
pub struct EpisodeLoss {
    pub total: Var,
    pub ssl: Var,
    pub ccr: Option<Var>,
    pub query_prediction: BinaryMask,
}

/// Forward pass and losses of one episode, recorded on `tape`.
pub fn episode_loss<T: Scalar>(
    tape: &mut Tape<T>,
    encoder: &BoundEncoder,
    episode: &Episode<T>,
    config: &TrainConfig,
) -> Result<EpisodeLoss> {
    let (h, w) = spatial_extent(episode.query_image.shape())?;
    let s_img = tape.constant(crate::model::as_chw(&episode.support_image)?);
    let q_img = tape.constant(crate::model::as_chw(&episode.query_image)?);
    let fs = encoder.encode(tape, s_img)?;
    let fq = encoder.encode(tape, q_img)?;
    let seg = segment_features(tape, fs, &episode.support_mask, fq, &config.head, h, w)?;
    let ssl = ssl_loss(tape, seg.probs, &episode.query_gt, config.class_weights)?;
    let query_prediction = prediction_mask(tape.value(seg.fg_prob))?;
    let ccr = if config.ccr_enabled {
        ccr_loss(
            tape,
            fq,
            &query_prediction,
            fs,
            &episode.support_mask,
            &config.head,
            config.ccr_threshold,
        )?
    } else {
        None
    };
    let total = match ccr {
        Some(c) => tape.add(ssl, c)?,
        None => ssl,
    };
    Ok(EpisodeLoss {
        total,
        ssl,
        ccr,
        query_prediction,
    })
}

/// `w ← w − lr · g` for every parameter with a gradient on `tape`.
pub fn sgd_step(weights: &mut EncoderWeights<f32>, tape: &Tape<f32>, bound: &BoundEncoder, lr: f64) {
    let lr = lr as f32;
    for (name, var) in bound.vars() {
        let (Some(g), Some(w)) = (tape.grad(*var), weights.get_mut(name)) else {
            continue;
        };
        for (wi, gi) in w.data_mut().iter_mut().zip(g.data()) {
            *wi -= lr * gi;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Zero-based index of the iteration just completed.
    pub iteration: usize,
    pub ssl: f64,
    /// Zero when the cyclic term was skipped.
    pub ccr: f64,
    pub ccr_skipped: bool,
    pub total: f64,
    pub lr: f64,
    pub slice: SliceId,
}

/// Counters accumulated over a run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Telemetry {
    pub ccr_skipped: usize,
    pub slices_skipped: usize,
}

/// The random stream of one iteration depends only on `(seed, iteration)`,
/// so a run resumed from a checkpoint replays the uninterrupted run.
fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

pub struct Trainer<'a> {
    pool: &'a [TrainingSlice],
    config: TrainConfig,
    weights: EncoderWeights<f32>,
    iteration: usize,
    telemetry: Telemetry,
}

impl<'a> Trainer<'a> {
    /// Fresh weights drawn from the configured seed.
    pub fn new(pool: &'a [TrainingSlice], config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let weights = init_weights(&config.encoder, config.seed)?;
        Self::resume(pool, config, weights, 0)
    }

    /// Continues after `iteration` completed iterations.
    pub fn resume(
        pool: &'a [TrainingSlice],
        config: TrainConfig,
        weights: EncoderWeights<f32>,
        iteration: usize,
    ) -> Result<Self> {
        config.validate()?;
        if weights.config() != &config.encoder {
            return Err(Error::Config(
                "checkpoint encoder does not match the configuration".into(),
            ));
        }
        if pool.is_empty() {
            return Err(Error::invalid("training pool is empty"));
        }
        Ok(Trainer {
            pool,
            config,
            weights,
            iteration,
            telemetry: Telemetry::default(),
        })
    }

    pub fn weights(&self) -> &EncoderWeights<f32> {
        &self.weights
    }

    pub fn into_weights(self) -> EncoderWeights<f32> {
        self.weights
    }

    /// Completed iterations.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn telemetry(&self) -> &Telemetry {
        &self.telemetry
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let it = self.iteration;
        let mut rng = iteration_rng(self.config.seed, it);
        let (episode, skipped) = sample_episode(self.pool, &mut rng, &self.config)?;
        self.telemetry.slices_skipped += skipped;

        let mut tape = Tape::new();
        let bound = self.weights.bind(&mut tape, true);
        let loss = episode_loss(&mut tape, &bound, &episode, &self.config)?;
        tape.backward(loss.total)?;
        let lr = learning_rate(&self.config, it);
        sgd_step(&mut self.weights, &tape, &bound, lr);
        if !self.weights.is_finite() {
            return Err(Error::invalid(format!("non-finite parameters after iteration {it}")));
        }

        let ccr_skipped = self.config.ccr_enabled && loss.ccr.is_none();
        if ccr_skipped {
            self.telemetry.ccr_skipped += 1;
        }
        self.iteration += 1;
        Ok(StepRecord {
            iteration: it,
            ssl: tape.value(loss.ssl).item().as_f64(),
            ccr: loss.ccr.map_or(0.0, |c| tape.value(c).item().as_f64()),
            ccr_skipped,
            total: tape.value(loss.total).item().as_f64(),
            lr,
            slice: episode.slice_id,
        })
    }

    /// Runs to the configured iteration count, calling `on_step` after each
    /// iteration with the record and the updated weights.
    pub fn run<F>(&mut self, mut on_step: F) -> Result<()>
    where
        F: FnMut(&StepRecord, &Trainer<'a>) -> Result<()>,
    {
        while !self.is_done() {
            let record = self.step()?;
            on_step(&record, self)?;
        }
        Ok(())
    }
}

/// True when a checkpoint is due after `completed` iterations.
pub fn checkpoint_due(config: &TrainConfig, completed: usize) -> bool {
    completed.is_multiple_of(config.checkpoint_every) || completed == config.iterations
}

/// Finite-difference check of the full training loss (encoder, head, both
/// loss terms) with respect to every encoder parameter, in `f64`.
///
/// Uses a reduced encoder on a 32×32 episode so that the check stays fast.
pub fn pipeline_gradcheck(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = EncoderConfig {
        in_channels: 1,
        feature_dim: 4,
        block_channels: [3, 4, 4, 4],
        dilations: [1, 1, 2, 4],
        strides: [2, 2, 2, 1],
    };
    let mut weights = init_weights(&encoder, seed)?.cast::<f64>();
    for b in 0..4 {
        // Positive biases keep pre-activations off the ReLU kink.
        if let Some(t) = weights.get_mut(&format!("block{b}.bias")) {
            for v in t.data_mut() {
                *v = rng.gen_range(0.05..0.2);
            }
        }
    }
    let n = 32;
    let image = Tensor::from_fn(&[1, n, n], |i| {
        let (y, x) = ((i / n) as f64, (i % n) as f64);
        let blob = if (y - 14.0).powi(2) + (x - 12.0).powi(2) < 60.0 {
            0.6
        } else {
            0.0
        };
        0.2 + blob + 0.1 * rng.gen_range(0.0..1.0)
    });
    let mask = BinaryMask::from_fn(n, n, |y, x| {
        (y as f64 - 14.0).powi(2) + (x as f64 - 12.0).powi(2) < 60.0
    });
    let geo = GeoParams {
        rotation: 0.1,
        translation: [0.03, -0.02],
        scale: [1.05, 0.95],
        shear: 0.03,
        elastic_alpha: 2.0,
        elastic_sigma: 4.0,
        seed,
    };
    let int = IntParams { gamma: 1.2, seed };
    let (query_image, query_gt) = make_query(&image, &mask, &geo, &int)?;
    let episode = Episode {
        support_image: image,
        support_mask: mask,
        query_image,
        query_gt,
        slice_id: SliceId {
            scan: "gradcheck".into(),
            index: 0,
        },
    };
    let config = TrainConfig {
        encoder: encoder.clone(),
        head: HeadConfig {
            window: 2,
            temperature: 0.5,
            logit_scale: 5.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let names: Vec<String> = weights.params().keys().cloned().collect();
    let inputs: Vec<Tensor<f64>> = weights.params().values().cloned().collect();
    let err = relative_error(&inputs, COMPOSED_EPS, |tape, vars| {
        let map = names.iter().cloned().zip(vars.iter().copied()).collect();
        let bound = BoundEncoder::from_vars(tape, encoder.clone(), map)?;
        Ok(episode_loss(tape, &bound, &episode, &config)?.total)
    })?;
    Ok(GradCheck {
        name: "encoder+head+losses".into(),
        seed,
        max_rel_error: err,
        passed: err < DEFAULT_TOLERANCE,
    })
}
