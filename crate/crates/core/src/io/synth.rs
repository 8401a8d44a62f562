//! Synthetic abdominal-like scans: a textured elliptical body containing
//! two to four ellipsoidal organs of distinct brightness.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{write_quadrant_map, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::{QuadrantMap, ScanVolume};
use crate::mask::BinaryMask;
use crate::numerics::Tensor;
use crate::superpixel::gaussian_blur;

/// Organ names, largest first.
pub const ORGANS: [&str; 4] = ["liver", "spleen", "kidney_right", "kidney_left"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub scans: usize,
    pub slices: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            scans: 20,
            slices: 12,
            size: 64,
            seed: 0,
        }
    }
}

struct Organ {
    /// Center `(z, y, x)` and radii, in pixels/slices.
    center: [f64; 3],
    radii: [f64; 3],
    intensity: f64,
}

/// Nominal placement as fractions of the extent: `(cy, cx, ry, rx, rz, intensity, presence)`.
const LAYOUT: [(f64, f64, f64, f64, f64, f64, f64); 4] = [
    (0.45, 0.32, 0.22, 0.17, 0.50, 0.72, 1.0),
    (0.38, 0.72, 0.10, 0.08, 0.35, 0.52, 0.75),
    (0.70, 0.30, 0.08, 0.06, 0.35, 0.88, 0.75),
    (0.70, 0.70, 0.08, 0.06, 0.35, 0.88, 0.75),
];

fn organ_mask(o: &Organ, z: usize, n: usize) -> BinaryMask {
    let dz = (z as f64 - o.center[0]) / o.radii[0];
    let r2 = 1.0 - dz * dz;
    BinaryMask::from_fn(n, n, |y, x| {
        let dy = (y as f64 - o.center[1]) / o.radii[1];
        let dx = (x as f64 - o.center[2]) / o.radii[2];
        r2 > 0.0 && dy * dy + dx * dx <= r2
    })
}

fn longest_run(masks: &[BinaryMask]) -> usize {
    let (mut best, mut run) = (0, 0);
    for m in masks {
        run = if m.is_empty() { 0 } else { run + 1 };
        best = best.max(run);
    }
    best
}

/// One scan, deterministic in `(seed, index)`.
pub fn synth_scan(spec: &SynthSpec, index: usize) -> Result<ScanVolume> {
    let (n, s) = (spec.size, spec.slices);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let nf = n as f64;
    let sf = s as f64;

    let body_c = (nf / 2.0 + rng.gen_range(-0.02..0.02) * nf, nf / 2.0);
    let body_r = (
        0.42 * nf * rng.gen_range(0.95..1.05),
        0.46 * nf * rng.gen_range(0.95..1.05),
    );
    let body_level = 0.35 + rng.gen_range(-0.04..0.04);
    let gain = rng.gen_range(0.92..1.08);

    let mut present: Vec<bool> = LAYOUT.iter().map(|l| rng.gen_bool(l.6)).collect();
    if present.iter().filter(|&&p| p).count() < 2 {
        present[1] = true;
    }
    let mut organs: Vec<(usize, Organ)> = Vec::new();
    for (k, l) in LAYOUT.iter().enumerate() {
        let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(-0.03..0.03) * nf;
        let organ = Organ {
            center: [
                sf / 2.0 - 0.5 + rng.gen_range(-0.1..0.1) * sf,
                l.0 * nf + jitter(&mut rng),
                l.1 * nf + jitter(&mut rng),
            ],
            radii: [
                (l.4 * sf * rng.gen_range(0.9..1.1)).max(2.0),
                l.2 * nf * rng.gen_range(0.9..1.1),
                l.3 * nf * rng.gen_range(0.9..1.1),
            ],
            intensity: l.5 + rng.gen_range(-0.05..0.05),
        };
        if present[k] {
            organs.push((k, organ));
        }
    }

    let mut slices = Vec::with_capacity(s);
    let mut masks: BTreeMap<String, Vec<BinaryMask>> = organs
        .iter()
        .map(|(k, _)| (ORGANS[*k].to_string(), Vec::with_capacity(s)))
        .collect();
    for z in 0..s {
        let noise: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let texture = gaussian_blur(&noise, n, n, 2.0);
        let mut owner: Vec<Option<usize>> = vec![None; n * n];
        let organ_masks: Vec<BinaryMask> = organs.iter().map(|(_, o)| organ_mask(o, z, n)).collect();
        for (i, m) in organ_masks.iter().enumerate() {
            for (p, &b) in m.bits().iter().enumerate() {
                if b {
                    owner[p] = Some(i);
                }
            }
        }
        let mut pixels = Vec::with_capacity(n * n);
        for p in 0..n * n {
            let (y, x) = ((p / n) as f64, (p % n) as f64);
            let (dy, dx) = ((y - body_c.0) / body_r.0, (x - body_c.1) / body_r.1);
            let base = match owner[p] {
                Some(i) => organs[i].1.intensity + 0.4 * texture[p],
                None if dy * dy + dx * dx <= 1.0 => body_level + 0.8 * texture[p],
                None => 0.05 + 0.2 * texture[p],
            };
            let v = gain * base + rng.gen_range(-0.02..0.02);
            pixels.push(v.clamp(0.0, 1.0) as f32);
        }
        slices.push(Tensor::new(&[1, n, n], pixels)?);
        for (i, (k, _)) in organs.iter().enumerate() {
            let m = BinaryMask::from_fn(n, n, |y, x| owner[y * n + x] == Some(i));
            masks.get_mut(ORGANS[*k]).expect("organ listed").push(m);
        }
    }
    for (organ, m) in &masks {
        if longest_run(m) < 3 {
            return Err(Error::invalid(format!(
                "synthetic scan {index}: {organ} spans fewer than 3 consecutive slices"
            )));
        }
    }
    Ok(ScanVolume {
        scan_id: format!("scan_{index:03}"),
        slices,
        organ_masks: masks,
    })
}

/// Generates and writes a dataset plus a quadrant map derived from its
/// ground truth.
pub fn synth_dataset(out_dir: &Path, spec: &SynthSpec) -> Result<Dataset> {
    if spec.size == 0 || !spec.size.is_multiple_of(8) {
        return Err(Error::invalid(format!(
            "image size {} must be a positive multiple of 8",
            spec.size
        )));
    }
    if spec.scans == 0 || spec.slices < 3 {
        return Err(Error::invalid("need at least one scan and three slices"));
    }
    let scans = (0..spec.scans)
        .map(|i| synth_scan(spec, i))
        .collect::<Result<Vec<_>>>()?;
    let ids = scans.iter().map(|s| s.scan_id.clone()).collect();
    let organs = ORGANS.iter().map(|s| s.to_string()).collect();
    let ds = Dataset::create(out_dir, ids, organs)?;
    for scan in &scans {
        ds.write_scan(scan)?;
    }
    write_quadrant_map(&ds.quadrant_path(), &QuadrantMap::from_ground_truth(&scans))?;
    Ok(ds)
}
