//! Random head inputs and the property checks built on them.

#![allow(dead_code)]

use super::naive_head::{naive_head, Feat, NaiveConfig};
use cowpro::head::{head_forward, HeadConfig, Similarity, ThresholdMode};
use cowpro::{BinaryMask, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CHANNELS: usize = 16;
pub const EXTENT: usize = 8;

pub struct Case {
    pub support: Tensor<f64>,
    pub query: Tensor<f64>,
    pub mask: BinaryMask,
}

/// 16-channel 8×8 features and a random rectangular support mask at
/// `window` times the feature extent.
pub fn random_case(seed: u64, window: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [CHANNELS, EXTENT, EXTENT];
    let support = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let query = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let side = EXTENT * window;
    let (h, w) = (
        rng.gen_range(side / 4..=side * 3 / 5),
        rng.gen_range(side / 4..=side * 3 / 5),
    );
    let (y0, x0) = (rng.gen_range(0..=side - h), rng.gen_range(0..=side - w));
    let mask = BinaryMask::from_fn(side, side, |y, x| {
        (y0..y0 + h).contains(&y) && (x0..x0 + w).contains(&x)
    });
    Case { support, query, mask }
}

pub fn to_feat(t: &Tensor<f64>) -> Feat {
    let s = t.shape();
    (0..s[0])
        .map(|c| (0..s[1]).map(|y| (0..s[2]).map(|x| t.at3(c, y, x)).collect()).collect())
        .collect()
}

pub fn mask_rows(m: &BinaryMask) -> Vec<Vec<bool>> {
    (0..m.height())
        .map(|y| (0..m.width()).map(|x| m.get(y, x)).collect())
        .collect()
}

pub fn naive_config(c: &HeadConfig) -> NaiveConfig {
    NaiveConfig {
        temperature: c.temperature,
        window: c.window,
        fixed_threshold: match c.threshold {
            ThresholdMode::Fixed(v) => Some(v),
            ThresholdMode::Dynamic => None,
        },
        top_k_fraction: c.top_k_fraction,
        cosine: c.similarity == Similarity::Cosine,
        logit_scale: c.logit_scale,
        global_prototype: c.global_prototype,
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest absolute difference between the tape head and the naive oracle
/// over foreground probability and both score maps.
pub fn oracle_difference(case: &Case, config: &HeadConfig) -> f64 {
    let mut tape = Tape::new();
    let s = tape.constant(case.support.clone());
    let q = tape.constant(case.query.clone());
    let out = head_forward(&mut tape, s, &case.mask, q, config).expect("head forward");
    let naive = naive_head(
        &to_feat(&case.support),
        &mask_rows(&case.mask),
        &to_feat(&case.query),
        &naive_config(config),
    );
    max_diff(tape.value(out.fg_prob).data(), &naive.fg_prob)
        .max(max_diff(tape.value(out.s_fg).data(), &naive.s_fg))
        .max(max_diff(tape.value(out.s_bg).data(), &naive.s_bg))
}

/// The sweep of head settings exercised against the oracle.
pub fn oracle_configs() -> Vec<HeadConfig> {
    let mut out = Vec::new();
    for threshold in [ThresholdMode::Fixed(0.95), ThresholdMode::Dynamic] {
        for window in [2, 4] {
            for top_k_fraction in [1.0, 0.5, 0.1] {
                out.push(HeadConfig {
                    threshold,
                    window,
                    top_k_fraction,
                    ..Default::default()
                });
            }
        }
    }
    out
}

/// Worst column-sum error of the prototype probabilities and whether every
/// aggregated channel stayed inside the centered prototypes' range.
pub fn convexity(seed: u64) -> (f64, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let config = HeadConfig {
        temperature: [0.02, 0.05, 0.1, 0.5][rng.gen_range(0..4)],
        window: [2, 4][rng.gen_range(0..2)],
        top_k_fraction: [1.0, 0.5, 0.1][rng.gen_range(0..3)],
        ..Default::default()
    };
    let case = random_case(seed, config.window);
    let mut tape = Tape::new();
    let s = tape.constant(case.support);
    let q = tape.constant(case.query);
    let out = head_forward(&mut tape, s, &case.mask, q, &config).expect("head forward");
    let mut worst = 0.0f64;
    let mut inside = true;
    for (bag, weights, agg) in [
        (out.fg_bag, out.fg_weights, out.fg_aggregated),
        (out.bg_bag, out.bg_weights, out.bg_aggregated),
    ] {
        let w = tape.value(weights);
        let (n, m) = (w.shape()[0], w.shape()[1]);
        for col in 0..m {
            let s: f64 = (0..n).map(|j| w.at2(j, col)).sum();
            worst = worst.max((s - 1.0).abs());
        }
        let raw = tape.value(bag.vectors).clone();
        let d = raw.shape()[0];
        let a = tape.value(agg);
        for c in 0..d {
            let centered = |j: usize| raw.at2(c, j) - (0..d).map(|r| raw.at2(r, j)).sum::<f64>() / d as f64;
            let lo = (0..n).map(centered).fold(f64::INFINITY, f64::min);
            let hi = (0..n).map(centered).fold(f64::NEG_INFINITY, f64::max);
            for col in 0..m {
                let v = a.at2(c, col);
                if v < lo - 1e-12 || v > hi + 1e-12 {
                    inside = false;
                }
            }
        }
    }
    (worst, inside)
}

/// Largest change of the head outputs when every feature column gets its
/// own channel-constant offset.
pub fn shift_change(seed: u64) -> f64 {
    let case = random_case(seed, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1 << 32));
    let shift = |t: &Tensor<f64>, rng: &mut ChaCha8Rng| {
        let (d, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let offsets: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut out = t.clone();
        for c in 0..d {
            for p in 0..h * w {
                out.data_mut()[c * h * w + p] += offsets[p];
            }
        }
        out
    };
    let shifted = Case {
        support: shift(&case.support, &mut rng),
        query: shift(&case.query, &mut rng),
        mask: case.mask.clone(),
    };
    let config = HeadConfig::default();
    let run = |c: &Case| {
        let mut tape = Tape::new();
        let s = tape.constant(c.support.clone());
        let q = tape.constant(c.query.clone());
        let out = head_forward(&mut tape, s, &c.mask, q, &config).expect("head forward");
        (
            tape.value(out.fg_prob).clone(),
            tape.value(out.s_fg).clone(),
            tape.value(out.s_bg).clone(),
        )
    };
    let (a, b) = (run(&case), run(&shifted));
    a.0.max_abs_diff(&b.0)
        .max(a.1.max_abs_diff(&b.1))
        .max(a.2.max_abs_diff(&b.2))
}
