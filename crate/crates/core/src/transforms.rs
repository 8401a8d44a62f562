//! Geometric and intensity augmentations used to manufacture a query image
//! from a support image during self-supervised training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::{spatial_extent, BinaryMask};
use crate::numerics::{Scalar, Tensor};
use crate::superpixel::{gaussian_blur, normalize_unit};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

/// One concrete geometric transform: an affine map about the image center
/// followed by a smooth random displacement field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoParams {
    /// Radians, counter-clockwise in image coordinates.
    pub rotation: f64,
    /// Fraction of the extent along `(x, y)`.
    pub translation: [f64; 2],
    /// Scale along `(x, y)`.
    pub scale: [f64; 2],
    /// Radians.
    pub shear: f64,
    /// Displacement magnitude in pixels.
    pub elastic_alpha: f64,
    /// Displacement smoothness in pixels.
    pub elastic_sigma: f64,
    pub seed: u64,
}

impl GeoParams {
    pub fn identity() -> Self {
        GeoParams {
            rotation: 0.0,
            translation: [0.0, 0.0],
            scale: [1.0, 1.0],
            shear: 0.0,
            elastic_alpha: 0.0,
            elastic_sigma: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale[0] > 0.0 && self.scale[1] > 0.0) {
            return Err(Error::invalid(format!("scale must be > 0, got {:?}", self.scale)));
        }
        if !(self.elastic_sigma > 0.0) {
            return Err(Error::invalid("elastic_sigma must be > 0"));
        }
        if !(self.elastic_alpha >= 0.0) {
            return Err(Error::invalid("elastic_alpha must be ≥ 0"));
        }
        Ok(())
    }

    /// Inverse of the forward linear part `R(rotation)·Shear·Scale`.
    fn inverse_linear(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation.sin_cos();
        let k = self.shear.tan();
        let (sx, sy) = (self.scale[0], self.scale[1]);
        // [[c, -s], [s, c]] · [[1, k], [0, 1]] · diag(sx, sy)
        let a = [[c * sx, (c * k - s) * sy], [s * sx, (s * k + c) * sy]];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntParams {
    pub gamma: f64,
    pub seed: u64,
}

/// Sampling ranges for random geometric transforms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoRanges {
    pub rotation_deg: f64,
    pub translation: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub shear_deg: f64,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
}

impl Default for GeoRanges {
    fn default() -> Self {
        GeoRanges {
            rotation_deg: 15.0,
            translation: 0.05,
            scale_min: 0.9,
            scale_max: 1.1,
            shear_deg: 5.0,
            elastic_alpha: 15.0,
            elastic_sigma: 5.0,
        }
    }
}

fn symmetric<R: Rng>(rng: &mut R, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.gen_range(-half_width..=half_width)
    } else {
        0.0
    }
}

impl GeoRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rotation_deg >= 0.0
            && self.translation >= 0.0
            && self.shear_deg >= 0.0
            && self.scale_min > 0.0
            && self.scale_min <= self.scale_max
            && self.elastic_alpha >= 0.0
            && self.elastic_sigma > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid geometric ranges {self:?}")))
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> GeoParams {
        let scale = |rng: &mut R| {
            if self.scale_max > self.scale_min {
                rng.gen_range(self.scale_min..=self.scale_max)
            } else {
                self.scale_min
            }
        };
        GeoParams {
            rotation: symmetric(rng, self.rotation_deg).to_radians(),
            translation: [symmetric(rng, self.translation), symmetric(rng, self.translation)],
            scale: [scale(rng), scale(rng)],
            shear: symmetric(rng, self.shear_deg).to_radians(),
            elastic_alpha: self.elastic_alpha,
            elastic_sigma: self.elastic_sigma,
            seed: rng.gen(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaRange {
    pub min: f64,
    pub max: f64,
}

impl Default for GammaRange {
    fn default() -> Self {
        GammaRange { min: 0.6, max: 1.67 }
    }
}

impl GammaRange {
    pub fn validate(&self) -> Result<()> {
        if self.min > 0.0 && self.min <= self.max {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid gamma range {self:?}")))
        }
    }

    /// Log-uniform draw from `[min, max]`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> IntParams {
        let (lo, hi) = (self.min.ln(), self.max.ln());
        let gamma = if hi > lo {
            rng.gen_range(lo..=hi).exp()
        } else {
            self.min
        };
        IntParams { gamma, seed: rng.gen() }
    }
}

/// Smoothed uniform noise field scaled by `alpha`, one per axis.
fn displacement_field(h: usize, w: usize, p: &GeoParams) -> (Vec<f64>, Vec<f64>) {
    if p.elastic_alpha == 0.0 {
        return (vec![0.0; h * w], vec![0.0; h * w]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut field = || {
        let raw: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        gaussian_blur(&raw, h, w, p.elastic_sigma)
            .into_iter()
            .map(|v| v * p.elastic_alpha)
            .collect::<Vec<f64>>()
    };
    let dx = field();
    let dy = field();
    (dx, dy)
}

fn sample_at(src: &[f64], h: usize, w: usize, x: f64, y: f64, interp: Interp) -> f64 {
    let pixel = |yy: isize, xx: isize| {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            src[yy as usize * w + xx as usize]
        }
    };
    match interp {
        Interp::Nearest => pixel((y + 0.5).floor() as isize, (x + 0.5).floor() as isize),
        Interp::Bilinear => {
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            let (xi, yi) = (x0 as isize, y0 as isize);
            let top = pixel(yi, xi) * (1.0 - fx) + if fx > 0.0 { pixel(yi, xi + 1) * fx } else { 0.0 };
            if fy > 0.0 {
                let bot = pixel(yi + 1, xi) * (1.0 - fx) + if fx > 0.0 { pixel(yi + 1, xi + 1) * fx } else { 0.0 };
                top * (1.0 - fy) + bot * fy
            } else {
                top
            }
        }
    }
}

/// Warps a single-channel image or mask. Pixels mapped from outside the
/// frame are 0.
pub fn apply_geo<T: Scalar>(image: &Tensor<T>, params: &GeoParams, interp: Interp) -> Result<Tensor<T>> {
    params.validate()?;
    let (h, w) = spatial_extent(image.shape())?;
    let src: Vec<f64> = image.data().iter().map(|v| v.as_f64()).collect();
    let inv = params.inverse_linear();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (tx, ty) = (params.translation[0] * w as f64, params.translation[1] * h as f64);
    let (dx, dy) = displacement_field(h, w, params);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let qx = x as f64 + dx[i] - cx - tx;
            let qy = y as f64 + dy[i] - cy - ty;
            let sx = inv[0][0] * qx + inv[0][1] * qy + cx;
            let sy = inv[1][0] * qx + inv[1][1] * qy + cy;
            out.push(T::from_f64(sample_at(&src, h, w, sx, sy, interp)));
        }
    }
    Tensor::new(image.shape(), out)
}

pub fn apply_geo_mask(mask: &BinaryMask, params: &GeoParams) -> Result<BinaryMask> {
    let warped = apply_geo::<f32>(&mask.to_tensor(), params, Interp::Nearest)?;
    BinaryMask::from_tensor(&warped, 0.5)
}

/// Min-max normalizes to `[0, 1]`, then raises every pixel to `gamma`.
pub fn apply_gamma<T: Scalar>(image: &Tensor<T>, params: &IntParams) -> Result<Tensor<T>> {
    if !(params.gamma > 0.0) {
        return Err(Error::invalid(format!("gamma must be > 0, got {}", params.gamma)));
    }
    let raw: Vec<f64> = image.data().iter().map(|v| v.as_f64()).collect();
    let out = normalize_unit(&raw)
        .into_iter()
        .map(|v| T::from_f64(v.powf(params.gamma)))
        .collect();
    Tensor::new(image.shape(), out)
}

/// `query = geo(gamma(image))`, `query_gt = geo(mask)` with the same geometric draw.
pub fn make_query<T: Scalar>(
    image: &Tensor<T>,
    mask: &BinaryMask,
    geo: &GeoParams,
    int: &IntParams,
) -> Result<(Tensor<T>, BinaryMask)> {
    let query = apply_geo(&apply_gamma(image, int)?, geo, Interp::Bilinear)?;
    let gt = apply_geo_mask(mask, geo)?;
    Ok((query, gt))
}
