//! Textbook graph segmentation with explicit component labels, used as an
//! oracle for the union-find version. Quadratic on purpose.

#![allow(dead_code)]

use cowpro::superpixel::{smooth, FelzParams};
use cowpro::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Component label per pixel, relabelled densely by first appearance.
pub fn naive_felzenszwalb(image: &Tensor<f64>, params: &FelzParams) -> Vec<u32> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let px = smooth(image, params.sigma).unwrap();

    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let a = y * w + x;
            let mut targets = Vec::new();
            if x + 1 < w {
                targets.push(a + 1);
            }
            if y + 1 < h {
                targets.push(a + w);
                if x + 1 < w {
                    targets.push(a + w + 1);
                }
                if x > 0 {
                    targets.push(a + w - 1);
                }
            }
            for b in targets {
                edges.push((a, b, (px[a] - px[b]).abs()));
            }
        }
    }
    // Insertion sort keeps equal weights in construction order.
    for i in 1..edges.len() {
        let mut j = i;
        while j > 0 && edges[j - 1].2 > edges[j].2 {
            edges.swap(j - 1, j);
            j -= 1;
        }
    }

    let n = h * w;
    let mut comp: Vec<usize> = (0..n).collect();
    let mut internal = vec![0.0f64; n];
    let size_of = |comp: &[usize], c: usize| comp.iter().filter(|&&v| v == c).count();
    let merge = |comp: &mut Vec<usize>, from: usize, to: usize| {
        for v in comp.iter_mut() {
            if *v == from {
                *v = to;
            }
        }
    };
    let k = params.scale / 255.0;
    for &(a, b, wgt) in &edges {
        let (ca, cb) = (comp[a], comp[b]);
        if ca == cb {
            continue;
        }
        let ta = internal[ca] + k / size_of(&comp, ca) as f64;
        let tb = internal[cb] + k / size_of(&comp, cb) as f64;
        if wgt <= ta.min(tb) {
            merge(&mut comp, cb, ca);
            internal[ca] = wgt;
        }
    }
    for &(a, b, _) in &edges {
        let (ca, cb) = (comp[a], comp[b]);
        if ca != cb && (size_of(&comp, ca) < params.min_size || size_of(&comp, cb) < params.min_size) {
            merge(&mut comp, cb, ca);
        }
    }

    let mut seen: Vec<usize> = Vec::new();
    comp.iter()
        .map(|c| match seen.iter().position(|s| s == c) {
            Some(i) => i as u32,
            None => {
                seen.push(*c);
                (seen.len() - 1) as u32
            }
        })
        .collect()
}

/// Random 16×16 test image: even seeds are white noise, odd seeds are a few
/// noisy flat patches.
pub fn random_image(seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 16;
    if seed.is_multiple_of(2) {
        return Tensor::from_fn(&[1, n, n], |_| rng.gen_range(0.0..1.0));
    }
    let centres: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.0..16.0),
                rng.gen_range(0.0..16.0),
                rng.gen_range(0.0..1.0),
            )
        })
        .collect();
    Tensor::from_fn(&[1, n, n], |i| {
        let (y, x) = ((i / n) as f64, (i % n) as f64);
        let nearest = centres
            .iter()
            .min_by(|a, b| {
                let da = (a.0 - y).powi(2) + (a.1 - x).powi(2);
                let db = (b.0 - y).powi(2) + (b.1 - x).powi(2);
                da.total_cmp(&db)
            })
            .unwrap();
        nearest.2 + rng.gen_range(-0.05..0.05)
    })
}

/// The three parameter settings compared against the oracle.
pub fn oracle_params() -> [FelzParams; 3] {
    [
        FelzParams {
            scale: 100.0,
            sigma: 0.8,
            min_size: 5,
        },
        FelzParams {
            scale: 20.0,
            sigma: 0.0,
            min_size: 1,
        },
        FelzParams {
            scale: 400.0,
            sigma: 1.5,
            min_size: 12,
        },
    ]
}
