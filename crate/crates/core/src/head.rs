//! Correlation-weighted prototype aggregation.
//!
//! Given support features, a support mask and query features, the head
//!
//! 1. pools the mask to feature resolution and binarizes it,
//! 2. takes the support feature vectors under the binarized mask as a bag of
//!    prototypes (foreground bags also get the masked-average prototype),
//! 3. centers prototypes and query pixels along the channel axis,
//! 4. correlates every query pixel with every prototype,
//! 5. turns correlations into per-pixel prototype probabilities with a
//!    temperature softmax (optionally over the top-k prototypes only),
//! 6. aggregates a per-pixel prototype as the probability-weighted average,
//! 7. scores each pixel against its aggregated prototype, and
//! 8. classifies with a two-way softmax over scaled background/foreground scores.
//!
//! Everything is recorded on a [`Tape`] and is differentiable with respect
//! to both feature maps.

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::numerics::{Scalar, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Similarity {
    /// Cosine of channel-centered vectors (a Pearson correlation).
    Cosine,
    /// Raw inner product of channel-centered vectors.
    Dot,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdMode {
    /// Foreground: `0.8 · max(pooled)`; background: `mean(pooled)`.
    Dynamic,
    /// The same constant for both bags.
    Fixed(f64),
}

pub const DEFAULT_FIXED_THRESHOLD: f64 = 0.95;
pub const DYNAMIC_FG_RATIO: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BagKind {
    Foreground,
    Background,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub temperature: f64,
    pub window: usize,
    pub threshold: ThresholdMode,
    pub top_k_fraction: f64,
    pub similarity: Similarity,
    /// Multiplies both scores before the final two-way softmax.
    pub logit_scale: f64,
    /// Append the masked-average prototype to the foreground bag.
    pub global_prototype: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            temperature: 0.05,
            window: 4,
            threshold: ThresholdMode::Dynamic,
            top_k_fraction: 1.0,
            similarity: Similarity::Cosine,
            logit_scale: 20.0,
            global_prototype: true,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::invalid(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.window < 1 {
            return Err(Error::invalid("window must be ≥ 1"));
        }
        if !(self.top_k_fraction > 0.0 && self.top_k_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "top_k_fraction must be in (0, 1], got {}",
                self.top_k_fraction
            )));
        }
        if let ThresholdMode::Fixed(v) = self.threshold {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(format!("fixed threshold must be in (0, 1], got {v}")));
            }
        }
        if !(self.logit_scale > 0.0) {
            return Err(Error::invalid("logit_scale must be > 0"));
        }
        Ok(())
    }
}

/// Average-pools a binary mask with a `window × window` cell and binarizes
/// the pooled map with a strict `>` against the mode's threshold.
///
/// Returns the binarized map and the pooled (soft) values.
pub fn downsample_mask(
    mask: &BinaryMask,
    window: usize,
    threshold: ThresholdMode,
    kind: BagKind,
) -> Result<(BinaryMask, Vec<f64>)> {
    if window < 1 {
        return Err(Error::invalid("window must be ≥ 1"));
    }
    let (h, w) = (mask.height(), mask.width());
    if h % window != 0 || w % window != 0 {
        return Err(Error::shape(format!(
            "mask {h}×{w} is not divisible by window {window}"
        )));
    }
    let (oh, ow) = (h / window, w / window);
    let mut pooled = vec![0.0; oh * ow];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                pooled[(y / window) * ow + x / window] += 1.0;
            }
        }
    }
    let cell = (window * window) as f64;
    for v in &mut pooled {
        *v /= cell;
    }
    let tau = match (threshold, kind) {
        (ThresholdMode::Fixed(v), _) => v,
        (ThresholdMode::Dynamic, BagKind::Foreground) => DYNAMIC_FG_RATIO * pooled.iter().copied().fold(0.0, f64::max),
        (ThresholdMode::Dynamic, BagKind::Background) => pooled.iter().sum::<f64>() / pooled.len() as f64,
    };
    let bits = pooled.iter().map(|&v| v > tau).collect();
    Ok((BinaryMask::new(oh, ow, bits)?, pooled))
}

/// Nearest-neighbour resamples a full-resolution mask to `window` times the
/// feature extent, the resolution [`downsample_mask`] expects.
pub fn align_mask(mask: &BinaryMask, feat_h: usize, feat_w: usize, window: usize) -> BinaryMask {
    let (h, w) = (feat_h * window, feat_w * window);
    if mask.height() == h && mask.width() == w {
        mask.clone()
    } else {
        mask.resize_nearest(h, w)
    }
}

/// A `[D, N]` matrix of prototype columns on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PrototypeBag {
    pub vectors: Var,
    pub kind: BagKind,
    pub includes_global: bool,
}

impl PrototypeBag {
    pub fn len<T: Scalar>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.vectors)[1]
    }
}

/// Gathers feature columns where `mask_small` is set; foreground bags also
/// receive the average of the features weighted by `soft_weights`.
pub fn extract_prototypes<T: Scalar>(
    tape: &mut Tape<T>,
    feature: Var,
    mask_small: &BinaryMask,
    soft_weights: &[f64],
    kind: BagKind,
    include_global: bool,
) -> Result<PrototypeBag> {
    let shape = tape.shape(feature).to_vec();
    if shape.len() != 3 || shape[1] != mask_small.height() || shape[2] != mask_small.width() {
        return Err(Error::shape(format!(
            "features {shape:?} vs mask {}×{}",
            mask_small.height(),
            mask_small.width()
        )));
    }
    let cols: Vec<usize> = (0..mask_small.bits().len()).filter(|&i| mask_small.bits()[i]).collect();
    let local = if cols.is_empty() {
        None
    } else {
        Some(tape.gather_columns(feature, &cols)?)
    };
    match kind {
        BagKind::Background => {
            let vectors = local.ok_or_else(|| Error::DegenerateSupport("background prototype bag is empty".into()))?;
            Ok(PrototypeBag {
                vectors,
                kind,
                includes_global: false,
            })
        }
        BagKind::Foreground => {
            if !include_global {
                let vectors =
                    local.ok_or_else(|| Error::DegenerateSupport("foreground prototype bag is empty".into()))?;
                return Ok(PrototypeBag {
                    vectors,
                    kind,
                    includes_global: false,
                });
            }
            let weights: Vec<T> = soft_weights.iter().map(|&w| T::from_f64(w)).collect();
            let global = tape.weighted_mean(feature, &weights)?;
            let vectors = match local {
                Some(l) => tape.concat_columns(&[l, global])?,
                None => global,
            };
            Ok(PrototypeBag {
                vectors,
                kind,
                includes_global: true,
            })
        }
    }
}

/// Subtracts the channel mean from every column of a `[D, ...]` tensor.
pub fn center<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.center(x)
}

/// Correlation of every query column (`[D, M]`) with every prototype, `[N, M]`.
pub fn correlation<T: Scalar>(tape: &mut Tape<T>, query: Var, bag: Var, similarity: Similarity) -> Result<Var> {
    let (dq, dp) = (tape.shape(query)[0], tape.shape(bag)[0]);
    if dq != dp {
        return Err(Error::shape(format!("query dim {dq} vs prototype dim {dp}")));
    }
    match similarity {
        Similarity::Cosine => tape.cosine_matrix(query, bag),
        Similarity::Dot => {
            let pt = tape.transpose(bag)?;
            tape.matmul(pt, query)
        }
    }
}

/// Number of prototypes kept per pixel for a top-k fraction.
pub fn top_k_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Keep-mask over `[N, M]` marking, in every column, the `k` largest
/// values (ties go to the lower prototype index).
fn top_k_keep<T: Scalar>(corr: &[T], n: usize, m: usize, k: usize) -> Vec<bool> {
    let mut keep = vec![false; n * m];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for col in 0..m {
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| {
            corr[b * m + col]
                .partial_cmp(&corr[a * m + col])
                .unwrap()
                .then(a.cmp(&b))
        });
        for &j in &order[..k] {
            keep[j * m + col] = true;
        }
    }
    keep
}

/// Per-pixel prototype probabilities: temperature softmax over the leading
/// (prototype) axis, restricted to the top `ceil(fraction · N)` prototypes.
pub fn probability_scores<T: Scalar>(
    tape: &mut Tape<T>,
    corr: Var,
    temperature: f64,
    top_k_fraction: f64,
) -> Result<Var> {
    let (n, m) = (tape.shape(corr)[0], tape.shape(corr)[1]);
    let k = top_k_count(top_k_fraction, n);
    let t = T::from_f64(temperature);
    if k == n {
        tape.softmax(corr, 0, t)
    } else {
        let keep = top_k_keep(tape.value(corr).data(), n, m, k);
        tape.softmax_masked(corr, 0, t, Some(&keep))
    }
}

/// Per-pixel convex combination of prototypes: `[D, N] × [N, M] -> [D, M]`.
pub fn aggregate<T: Scalar>(tape: &mut Tape<T>, bag: Var, probs: Var) -> Result<Var> {
    tape.matmul(bag, probs)
}

/// Per-pixel similarity of aggregated prototypes and query features, `[M]`.
pub fn score<T: Scalar>(tape: &mut Tape<T>, aggregated: Var, query: Var, similarity: Similarity) -> Result<Var> {
    match similarity {
        Similarity::Cosine => tape.cosine_columns(aggregated, query),
        Similarity::Dot => {
            let prod = tape.mul(aggregated, query)?;
            tape.sum_axis0(prod)
        }
    }
}

/// Intermediate and final quantities of one head evaluation.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    /// `[H, W]` foreground probability at feature resolution.
    pub fg_prob: Var,
    /// `[2, H, W]` background/foreground probabilities.
    pub probs: Var,
    pub s_fg: Var,
    pub s_bg: Var,
    pub fg_bag: PrototypeBag,
    pub bg_bag: PrototypeBag,
    /// `[N_fg, H·W]` prototype probabilities of the foreground bag.
    pub fg_weights: Var,
    pub bg_weights: Var,
    pub fg_aggregated: Var,
    pub bg_aggregated: Var,
}

/// Runs the head on support features `[D, H, W]`, a support mask at
/// `window` times the feature extent, and query features `[D, H', W']`.
pub fn head_forward<T: Scalar>(
    tape: &mut Tape<T>,
    support_feat: Var,
    support_mask: &BinaryMask,
    query_feat: Var,
    config: &HeadConfig,
) -> Result<HeadOutput> {
    config.validate()?;
    let s = tape.shape(support_feat).to_vec();
    let q = tape.shape(query_feat).to_vec();
    if s.len() != 3 || q.len() != 3 || s[0] != q[0] {
        return Err(Error::shape(format!("support features {s:?}, query features {q:?}")));
    }
    if support_mask.height() != s[1] * config.window || support_mask.width() != s[2] * config.window {
        return Err(Error::shape(format!(
            "support mask {}×{} is not window {} × features {}×{}",
            support_mask.height(),
            support_mask.width(),
            config.window,
            s[1],
            s[2]
        )));
    }
    let (d, qh, qw) = (q[0], q[1], q[2]);

    let (fg_small, fg_soft) = downsample_mask(support_mask, config.window, config.threshold, BagKind::Foreground)?;
    let (bg_small, bg_soft) = downsample_mask(
        &support_mask.invert(),
        config.window,
        config.threshold,
        BagKind::Background,
    )?;
    let fg_bag = extract_prototypes(
        tape,
        support_feat,
        &fg_small,
        &fg_soft,
        BagKind::Foreground,
        config.global_prototype,
    )?;
    let bg_bag = extract_prototypes(tape, support_feat, &bg_small, &bg_soft, BagKind::Background, false)?;

    let query_flat = tape.reshape(query_feat, &[d, qh * qw])?;
    let query_c = center(tape, query_flat)?;

    let branch = |tape: &mut Tape<T>, bag: &PrototypeBag| -> Result<(Var, Var, Var)> {
        let protos = center(tape, bag.vectors)?;
        let corr = correlation(tape, query_c, protos, config.similarity)?;
        let weights = probability_scores(tape, corr, config.temperature, config.top_k_fraction)?;
        let agg = aggregate(tape, protos, weights)?;
        let s = score(tape, agg, query_c, config.similarity)?;
        Ok((s, weights, agg))
    };
    let (s_fg, fg_weights, fg_aggregated) = branch(tape, &fg_bag)?;
    let (s_bg, bg_weights, bg_aggregated) = branch(tape, &bg_bag)?;

    let logits = tape.stack(&[s_bg, s_fg])?;
    let logits = tape.scale(logits, T::from_f64(config.logit_scale));
    let probs = tape.softmax(logits, 0, T::one())?;
    let probs = tape.reshape(probs, &[2, qh, qw])?;
    let fg_prob = tape.select(probs, 1)?;
    let s_fg = tape.reshape(s_fg, &[qh, qw])?;
    let s_bg = tape.reshape(s_bg, &[qh, qw])?;
    Ok(HeadOutput {
        fg_prob,
        probs,
        s_fg,
        s_bg,
        fg_bag,
        bg_bag,
        fg_weights,
        bg_weights,
        fg_aggregated,
        bg_aggregated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_feat(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[d, h, w], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn downsample_examples() {
        let ones = BinaryMask::ones(4, 4);
        let (m, p) = downsample_mask(&ones, 4, ThresholdMode::Fixed(0.95), BagKind::Foreground).unwrap();
        assert_eq!(m.bits(), &[true]);
        assert_eq!(p, vec![1.0]);

        let single = BinaryMask::from_fn(4, 4, |y, x| y == 2 && x == 1);
        let (m, p) = downsample_mask(&single, 4, ThresholdMode::Fixed(0.95), BagKind::Foreground).unwrap();
        assert_eq!(p, vec![1.0 / 16.0]);
        assert_eq!(m.bits(), &[false]);

        assert!(downsample_mask(&ones, 3, ThresholdMode::Dynamic, BagKind::Foreground).is_err());
    }

    #[test]
    fn dynamic_background_on_constant_map_selects_nothing() {
        let ones = BinaryMask::ones(8, 8);
        let (m, _) = downsample_mask(&ones, 4, ThresholdMode::Dynamic, BagKind::Background).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn dynamic_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let mask = BinaryMask::from_fn(32, 32, |_, _| rng.gen_bool(0.3));
            for kind in [BagKind::Foreground, BagKind::Background] {
                let (m, _) = downsample_mask(&mask, 4, ThresholdMode::Dynamic, kind).unwrap();
                let mut pooled = [[0.0f64; 8]; 8];
                for (cy, row) in pooled.iter_mut().enumerate() {
                    for (cx, cell) in row.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for y in 0..4 {
                            for x in 0..4 {
                                if mask.get(cy * 4 + y, cx * 4 + x) {
                                    s += 1.0;
                                }
                            }
                        }
                        *cell = s / 16.0;
                    }
                }
                let flat: Vec<f64> = pooled.iter().flatten().copied().collect();
                let tau = match kind {
                    BagKind::Foreground => 0.8 * flat.iter().cloned().fold(0.0, f64::max),
                    BagKind::Background => flat.iter().sum::<f64>() / 64.0,
                };
                let expect: Vec<bool> = flat.iter().map(|&v| v > tau).collect();
                assert_eq!(m.bits(), expect.as_slice());
            }
        }
    }

    #[test]
    fn prototype_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feat = random_feat(&mut rng, 5, 4, 4);
        let mut tape = Tape::new();
        let f = tape.constant(feat);
        let small = BinaryMask::from_fn(4, 4, |y, x| (y, x) == (0, 0) || (y, x) == (1, 2) || (y, x) == (3, 3));
        let soft = vec![0.5; 16];
        let fg = extract_prototypes(&mut tape, f, &small, &soft, BagKind::Foreground, true).unwrap();
        assert_eq!(fg.len(&tape), 4);
        assert!(fg.includes_global);
        let bg = extract_prototypes(&mut tape, f, &small, &soft, BagKind::Background, false).unwrap();
        assert_eq!(bg.len(&tape), 3);

        let empty = BinaryMask::zeros(4, 4);
        let fg = extract_prototypes(&mut tape, f, &empty, &soft, BagKind::Foreground, true).unwrap();
        assert_eq!(fg.len(&tape), 1);
        let err = extract_prototypes(&mut tape, f, &empty, &soft, BagKind::Background, false);
        assert!(matches!(err, Err(Error::DegenerateSupport(_))));
    }

    #[test]
    fn global_prototype_is_soft_masked_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feat = random_feat(&mut rng, 3, 2, 2);
        let soft = vec![0.0, 0.25, 0.75, 0.0];
        let mut tape = Tape::new();
        let f = tape.constant(feat.clone());
        let bag = extract_prototypes(&mut tape, f, &BinaryMask::zeros(2, 2), &soft, BagKind::Foreground, true).unwrap();
        let g = tape.value(bag.vectors);
        for c in 0..3 {
            let expect = 0.25 * feat.at3(c, 0, 1) + 0.75 * feat.at3(c, 1, 0);
            assert!((g.at2(c, 0) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_features_give_identical_prototypes() {
        let feat = Tensor::<f64>::from_fn(&[4, 4, 4], |i| (i / 16) as f64);
        let mut tape = Tape::new();
        let f = tape.constant(feat);
        let small = BinaryMask::from_fn(4, 4, |y, _| y < 2);
        let bag = extract_prototypes(&mut tape, f, &small, &[1.0; 16], BagKind::Foreground, true).unwrap();
        let v = tape.value(bag.vectors);
        for j in 1..v.shape()[1] {
            for c in 0..4 {
                assert!((v.at2(c, j) - v.at2(c, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn centering_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[3, 2], vec![2.0, 1.0, 2.0, 0.0, 2.0, -1.0]).unwrap());
        let c = center(&mut tape, x).unwrap();
        assert_eq!(tape.value(c).data(), &[0.0, 1.0, 0.0, 0.0, 0.0, -1.0]);
        let cc = center(&mut tape, c).unwrap();
        assert_eq!(tape.value(cc), tape.value(c));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = tape.constant(random_feat(&mut rng, 7, 3, 3));
        let c = center(&mut tape, r).unwrap();
        let v = tape.value(c);
        for col in 0..9 {
            let mean: f64 = (0..7).map(|d| v.data()[d * 9 + col]).sum::<f64>() / 7.0;
            assert!(mean.abs() < 1e-7);
        }
    }

    #[test]
    fn correlation_examples() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::new(&[3, 2], vec![1.0, 1.0, -1.0, 0.0, 0.0, -1.0]).unwrap());
        let p = tape.constant(Tensor::new(&[3, 1], vec![1.0, -1.0, 0.0]).unwrap());
        let c = correlation(&mut tape, q, p, Similarity::Cosine).unwrap();
        let v = tape.value(c).data();
        assert!((v[0] - 1.0).abs() < 1e-6);
        // (1, 0, -1)·(1, -1, 0) / (√2·√2)
        assert!((v[1] - 0.5).abs() < 1e-6);

        let p = tape.constant(Tensor::new(&[3, 1], vec![1.0, 1.0, -2.0]).unwrap());
        let o = tape.constant(Tensor::new(&[3, 1], vec![1.0, -1.0, 0.0]).unwrap());
        let c = correlation(&mut tape, o, p, Similarity::Cosine).unwrap();
        assert!(tape.value(c).data()[0].abs() < 1e-12);

        let bad = tape.constant(Tensor::ones(&[2, 1]));
        assert!(correlation(&mut tape, q, bad, Similarity::Cosine).is_err());
    }

    #[test]
    fn probability_examples() {
        let mut tape = Tape::<f64>::new();
        let one = tape.constant(Tensor::new(&[1, 3], vec![0.3, -0.2, 0.9]).unwrap());
        let p = probability_scores(&mut tape, one, 0.05, 1.0).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 1.0, 1.0]);

        let eq = tape.constant(Tensor::full(&[4, 2], 0.4));
        let p = probability_scores(&mut tape, eq, 0.05, 1.0).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = tape.constant(Tensor::from_fn(&[4, 5], |_| rng.gen_range(-1.0..1.0)));
        let p = probability_scores(&mut tape, r, 0.1, 0.5).unwrap();
        let v = tape.value(p);
        for col in 0..5 {
            let nz = (0..4).filter(|&j| v.at2(j, col) > 0.0).count();
            let s: f64 = (0..4).map(|j| v.at2(j, col)).sum();
            assert_eq!(nz, 2);
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    /// Random `[n, m]` correlations whose per-column best entry leads the
    /// runner-up by at least `gap`.
    fn untied(seed: u64, n: usize, m: usize, gap: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::from_fn(&[n, m], |_| rng.gen_range(-1.0..1.0 - gap));
        for col in 0..m {
            let best = (0..n).max_by(|&a, &b| t.at2(a, col).total_cmp(&t.at2(b, col))).unwrap();
            t.data_mut()[best * m + col] += gap;
        }
        t
    }

    proptest::proptest! {
        #[test]
        fn ranking_is_invariant_under_temperature(seed in 0u64..1000, t1 in 0.01f64..2.0, t2 in 0.01f64..2.0) {
            let corr = untied(seed, 6, 5, 0.01);
            let mut tape = Tape::<f64>::new();
            let c = tape.constant(corr.clone());
            let a = probability_scores(&mut tape, c, t1, 1.0).unwrap();
            let b = probability_scores(&mut tape, c, t2, 1.0).unwrap();
            let (a, b) = (tape.value(a), tape.value(b));
            for col in 0..5 {
                for i in 0..6 {
                    for j in 0..6 {
                        if corr.at2(i, col) > corr.at2(j, col) {
                            proptest::prop_assert!(a.at2(i, col) > a.at2(j, col));
                            proptest::prop_assert!(b.at2(i, col) > b.at2(j, col));
                        }
                    }
                }
            }
        }

        #[test]
        fn low_temperature_concentrates_on_the_best_prototype(seed in 0u64..1000, n in 2usize..20) {
            let corr = untied(seed, n, 8, 0.02);
            let mut tape = Tape::<f64>::new();
            let c = tape.constant(corr);
            let p = probability_scores(&mut tape, c, 1e-3, 1.0).unwrap();
            let p = tape.value(p);
            for col in 0..8 {
                let peak = (0..n).map(|i| p.at2(i, col)).fold(0.0, f64::max);
                proptest::prop_assert!(peak > 0.99, "column {col}: {peak}");
            }
        }

        #[test]
        fn cosine_ignores_query_pixel_scale(seed in 0u64..1000, lambda in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = Tensor::from_fn(&[8, 5], |_| rng.gen_range(-1.0..1.0));
            let bag = Tensor::from_fn(&[8, 3], |_| rng.gen_range(-1.0..1.0));
            let mut scaled = q.clone();
            for c in 0..8 {
                scaled.data_mut()[c * 5 + 2] *= lambda;
            }
            let run = |query: Tensor<f64>| {
                let mut tape = Tape::<f64>::new();
                let q = tape.constant(query);
                let b = tape.constant(bag.clone());
                let (q, b) = (center(&mut tape, q).unwrap(), center(&mut tape, b).unwrap());
                let c = correlation(&mut tape, q, b, Similarity::Cosine).unwrap();
                tape.value(c).clone()
            };
            let (a, b) = (run(q), run(scaled));
            for (x, y) in a.data().iter().zip(b.data()) {
                proptest::prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn top_k_counts() {
        assert_eq!(top_k_count(1.0, 7), 7);
        assert_eq!(top_k_count(0.5, 4), 2);
        assert_eq!(top_k_count(0.1, 10), 1);
        assert_eq!(top_k_count(0.02, 10), 1);
        assert_eq!(top_k_count(0.07, 100), 7);
        assert_eq!(top_k_count(0.5, 5), 3);
    }

    #[test]
    fn aggregation_examples() {
        let mut tape = Tape::<f64>::new();
        let bag = tape.constant(Tensor::new(&[2, 1], vec![0.5, -0.5]).unwrap());
        let probs = tape.constant(Tensor::ones(&[1, 3]));
        let a = aggregate(&mut tape, bag, probs).unwrap();
        assert_eq!(tape.value(a).data(), &[0.5, 0.5, 0.5, -0.5, -0.5, -0.5]);

        let bag = tape.constant(Tensor::new(&[2, 2], vec![1.0, 3.0, -1.0, 5.0]).unwrap());
        let probs = tape.constant(Tensor::full(&[2, 1], 0.5));
        let a = aggregate(&mut tape, bag, probs).unwrap();
        assert_eq!(tape.value(a).data(), &[2.0, 2.0]);
    }

    #[test]
    fn score_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_fn(&[4, 6], |_| rng.gen_range(-1.0..1.0)));
        let s = score(&mut tape, q, q, Similarity::Cosine).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| (v - 1.0).abs() < 1e-6));

        let a = tape.constant(Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::new(&[2, 1], vec![0.0, 3.0]).unwrap());
        let s = score(&mut tape, a, b, Similarity::Cosine).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0]);
        let s = score(&mut tape, a, a, Similarity::Dot).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0]);
    }

    #[test]
    fn swapping_masks_swaps_scores() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sf = random_feat(&mut rng, 8, 4, 4);
            let qf = random_feat(&mut rng, 8, 4, 4);
            let mask = BinaryMask::from_fn(16, 16, |y, x| y < 8 && x < 12);
            let config = HeadConfig {
                threshold: ThresholdMode::Fixed(0.95),
                global_prototype: false,
                ..Default::default()
            };
            let mut tape = Tape::new();
            let (s, q) = (tape.constant(sf), tape.constant(qf));
            let a = head_forward(&mut tape, s, &mask, q, &config).unwrap();
            let b = head_forward(&mut tape, s, &mask.invert(), q, &config).unwrap();
            assert_eq!(tape.value(a.s_fg), tape.value(b.s_bg));
            assert_eq!(tape.value(a.s_bg), tape.value(b.s_fg));
        }
    }

    #[test]
    fn self_prototype_pixels_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let feat = random_feat(&mut rng, 16, 8, 8);
        let mask = BinaryMask::from_fn(32, 32, |y, x| (8..24).contains(&y) && (4..20).contains(&x));
        let config = HeadConfig {
            threshold: ThresholdMode::Fixed(0.95),
            ..Default::default()
        };
        let mut tape = Tape::new();
        let f = tape.constant(feat);
        let out = head_forward(&mut tape, f, &mask, f, &config).unwrap();
        let (small, _) = downsample_mask(&mask, 4, config.threshold, BagKind::Foreground).unwrap();
        for (i, &on) in small.bits().iter().enumerate() {
            if on {
                assert!(tape.value(out.s_fg).data()[i] > 0.999);
                assert!(tape.value(out.fg_prob).data()[i] > 0.5);
            }
        }
    }

    #[test]
    fn config_validation() {
        let ok = HeadConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            HeadConfig {
                temperature: 0.0,
                ..ok.clone()
            },
            HeadConfig {
                window: 0,
                ..ok.clone()
            },
            HeadConfig {
                top_k_fraction: 0.0,
                ..ok.clone()
            },
            HeadConfig {
                top_k_fraction: 1.5,
                ..ok.clone()
            },
            HeadConfig {
                threshold: ThresholdMode::Fixed(0.0),
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        use crate::numerics::gradcheck::relative_error;
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sf = random_feat(&mut rng, 6, 4, 4);
            let qf = random_feat(&mut rng, 6, 4, 4);
            let mask = BinaryMask::from_fn(8, 8, |y, x| y + x < 7);
            let target: Vec<bool> = (0..16).map(|i| i % 4 + i / 4 < 4).collect();
            let config = HeadConfig {
                window: 2,
                temperature: 0.5,
                ..Default::default()
            };
            let err = relative_error(&[sf, qf], 1e-5, |tape, v| {
                let out = head_forward(tape, v[0], &mask, v[1], &config)?;
                tape.weighted_cross_entropy(out.probs, &target, [0.05, 1.0])
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
