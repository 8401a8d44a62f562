//! Felzenszwalb–Huttenlocher graph segmentation and superpixel pseudo-masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::{spatial_extent, BinaryMask};
use crate::numerics::{Scalar, Tensor};

/// Segmentation parameters.
///
/// `scale` is expressed in 8-bit intensity units: the merge threshold of a
/// component `C` is `scale / 255 / |C|` on the `[0, 1]`-normalized image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FelzParams {
    pub scale: f64,
    pub sigma: f64,
    pub min_size: usize,
}

impl Default for FelzParams {
    fn default() -> Self {
        FelzParams {
            scale: 100.0,
            sigma: 0.8,
            min_size: 400,
        }
    }
}

impl FelzParams {
    /// Defaults with `min_size` scaled from 400 pixels at 256×256 to the given extent.
    pub fn for_extent(height: usize, width: usize) -> Self {
        FelzParams {
            min_size: scaled_min_size(400, height, width),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::invalid(format!("scale must be > 0, got {}", self.scale)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!("sigma must be ≥ 0, got {}", self.sigma)));
        }
        if self.min_size < 1 {
            return Err(Error::invalid("min_size must be ≥ 1"));
        }
        Ok(())
    }
}

/// Rescales a pixel count given at 256×256 to another image area (at least 1).
pub fn scaled_min_size(at_256: usize, height: usize, width: usize) -> usize {
    ((at_256 * height * width) as f64 / 65536.0).round().max(1.0) as usize
}

/// Dense segment ids per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    num_segments: usize,
}

impl LabelMap {
    /// Validates density; connectivity is checked by [`LabelMap::is_connected`].
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::shape(format!(
                "label map {height}×{width} with {} labels",
                labels.len()
            )));
        }
        let num_segments = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let mut seen = vec![false; num_segments];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("segment ids are not dense"));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
            num_segments,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn num_segments(&self) -> usize {
        self.num_segments
    }

    pub fn segment_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_segments];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    pub fn segment_mask(&self, id: u32) -> BinaryMask {
        let bits = self.labels.iter().map(|&l| l == id).collect();
        BinaryMask::new(self.height, self.width, bits).expect("extent checked at construction")
    }

    /// True if every segment is a single connected region under 4- or
    /// 8-neighbourhood connectivity.
    pub fn is_connected(&self, eight: bool) -> bool {
        let (h, w) = (self.height, self.width);
        let mut visited = vec![false; h * w];
        let mut found = vec![false; self.num_segments];
        let mut stack = Vec::new();
        for start in 0..h * w {
            if visited[start] {
                continue;
            }
            let id = self.labels[start] as usize;
            if found[id] {
                return false;
            }
            found[id] = true;
            visited[start] = true;
            stack.push(start);
            while let Some(p) = stack.pop() {
                let (y, x) = ((p / w) as isize, (p % w) as isize);
                for (dy, dx) in neighbour_offsets(eight) {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if !visited[q] && self.labels[q] as usize == id {
                        visited[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        true
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width], |i| T::from_usize(self.labels[i] as usize))
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = spatial_extent(t.shape())?;
        let mut labels = Vec::with_capacity(h * w);
        for &v in t.data() {
            let f = v.as_f64();
            if !(f >= 0.0) || f.fract() != 0.0 || f > u32::MAX as f64 {
                return Err(Error::invalid(format!("label {f} is not a segment id")));
            }
            labels.push(f as u32);
        }
        LabelMap::new(h, w, labels)
    }
}

fn neighbour_offsets(eight: bool) -> impl Iterator<Item = (isize, isize)> {
    const FOUR: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
    const DIAG: [(isize, isize); 4] = [(-1, -1), (-1, 1), (1, -1), (1, 1)];
    FOUR.into_iter().chain(DIAG.into_iter().take(if eight { 4 } else { 0 }))
}

/// Min-max normalization to `[0, 1]`; constant images map to zeros.
pub(crate) fn normalize_unit(data: &[f64]) -> Vec<f64> {
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range > 0.0 {
        data.iter().map(|v| (v - lo) / range).collect()
    } else {
        vec![0.0; data.len()]
    }
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with replicated borders.
pub(crate) fn gaussian_blur(data: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * data[y * w + clamp(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[clamp(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Edge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// 8-neighbour grid edges in construction order (right, down, down-right,
/// down-left per pixel in raster order), stably sorted by weight.
pub(crate) fn sorted_edges(pixels: &[f64], h: usize, w: usize) -> Vec<Edge> {
    let mut edges = Vec::with_capacity(4 * h * w);
    for y in 0..h {
        for x in 0..w {
            let a = y * w + x;
            let mut link = |b: usize| {
                edges.push(Edge {
                    a,
                    b,
                    weight: (pixels[a] - pixels[b]).abs(),
                })
            };
            if x + 1 < w {
                link(a + 1);
            }
            if y + 1 < h {
                link(a + w);
                if x + 1 < w {
                    link(a + w + 1);
                }
                if x > 0 {
                    link(a + w - 1);
                }
            }
        }
    }
    edges.sort_by(|p, q| p.weight.total_cmp(&q.weight));
    edges
}

struct Forest {
    parent: Vec<usize>,
    rank: Vec<u8>,
    size: Vec<usize>,
    internal: Vec<f64>,
}

impl Forest {
    fn new(n: usize) -> Self {
        Forest {
            parent: (0..n).collect(),
            rank: vec![0; n],
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize, weight: f64) {
        let (hi, lo) = if self.rank[a] >= self.rank[b] { (a, b) } else { (b, a) };
        self.parent[lo] = hi;
        if self.rank[hi] == self.rank[lo] {
            self.rank[hi] += 1;
        }
        self.size[hi] += self.size[lo];
        self.internal[hi] = self.internal[hi].max(self.internal[lo]).max(weight);
    }
}

/// Relabels arbitrary component representatives densely in raster order of
/// first appearance.
pub(crate) fn densify(reps: &[usize], h: usize, w: usize) -> LabelMap {
    let mut remap = std::collections::HashMap::new();
    let labels = reps
        .iter()
        .map(|r| {
            let next = remap.len() as u32;
            *remap.entry(*r).or_insert(next)
        })
        .collect();
    LabelMap {
        height: h,
        width: w,
        labels,
        num_segments: remap.len(),
    }
}

/// The graph input: the image min-max normalized to `[0, 1]` and blurred
/// with a Gaussian of `sigma`, flattened in raster order.
pub fn smooth<T: Scalar>(image: &Tensor<T>, sigma: f64) -> Result<Vec<f64>> {
    let (h, w) = spatial_extent(image.shape())?;
    let raw: Vec<f64> = image.data().iter().map(|v| v.as_f64()).collect();
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("image contains non-finite values"));
    }
    Ok(gaussian_blur(&normalize_unit(&raw), h, w, sigma))
}

/// Segments a single-channel image (`[H, W]` or `[1, H, W]`).
pub fn felzenszwalb<T: Scalar>(image: &Tensor<T>, params: &FelzParams) -> Result<LabelMap> {
    params.validate()?;
    let (h, w) = spatial_extent(image.shape())?;
    let pixels = smooth(image, params.sigma)?;
    let edges = sorted_edges(&pixels, h, w);
    let k = params.scale / 255.0;

    let mut forest = Forest::new(h * w);
    for e in &edges {
        let (ra, rb) = (forest.find(e.a), forest.find(e.b));
        if ra == rb {
            continue;
        }
        let ta = forest.internal[ra] + k / forest.size[ra] as f64;
        let tb = forest.internal[rb] + k / forest.size[rb] as f64;
        if e.weight <= ta.min(tb) {
            forest.union(ra, rb, e.weight);
        }
    }
    for e in &edges {
        let (ra, rb) = (forest.find(e.a), forest.find(e.b));
        if ra != rb && (forest.size[ra] < params.min_size || forest.size[rb] < params.min_size) {
            forest.union(ra, rb, e.weight);
        }
    }
    let reps: Vec<usize> = (0..h * w).map(|p| forest.find(p)).collect();
    Ok(densify(&reps, h, w))
}

/// Picks a superpixel uniformly at random and returns it as a binary mask,
/// redrawing (at most `num_segments` draws) until one has at least
/// `min_fg_pixels` pixels.
pub fn sample_pseudo_mask_with<R: Rng>(labels: &LabelMap, rng: &mut R, min_fg_pixels: usize) -> Result<BinaryMask> {
    let sizes = labels.segment_sizes();
    for _ in 0..labels.num_segments {
        let id = rng.gen_range(0..labels.num_segments);
        if sizes[id] >= min_fg_pixels {
            return Ok(labels.segment_mask(id as u32));
        }
    }
    Err(Error::UnusableSlice(format!(
        "no superpixel with ≥ {min_fg_pixels} pixels drawn in {} tries",
        labels.num_segments
    )))
}

pub fn sample_pseudo_mask(labels: &LabelMap, rng_seed: u64, min_fg_pixels: usize) -> Result<BinaryMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_pseudo_mask_with(labels, &mut rng, min_fg_pixels)
}
