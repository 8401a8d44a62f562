use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Two-dimensional binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::shape(format!(
                "mask {height}×{width} with {} pixels",
                bits.len()
            )));
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        BinaryMask { height, width, bits }
    }

    /// Pixels strictly above `threshold` are set. Accepts `[H, W]` or `[1, H, W]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, threshold: T) -> Result<Self> {
        let (h, w) = spatial_extent(t.shape())?;
        Ok(BinaryMask {
            height: h,
            width: w,
            bits: t.data().iter().map(|&v| v > threshold).collect(),
        })
    }

    /// `[1, H, W]` tensor of zeros and ones.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .bits
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect();
        Tensor::new(&[1, self.height, self.width], data).expect("mask extents are positive")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn invert(&self) -> Self {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    /// Nearest-neighbour resampling with half-pixel centers.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        BinaryMask::from_fn(height, width, |y, x| {
            let iy = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            let ix = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
            self.get(iy, ix)
        })
    }
}

pub(crate) fn spatial_extent(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [h, w] | [1, h, w] => Ok((*h, *w)),
        _ => Err(Error::shape(format!("expected [H,W] or [1,H,W], got {shape:?}"))),
    }
}
