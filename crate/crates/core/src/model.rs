//! Encoder plus head: full-resolution segmentation of a query given one
//! annotated support image.

use crate::encoder::{encode, EncoderWeights};
use crate::error::{Error, Result};
use crate::head::{align_mask, head_forward, HeadConfig, HeadOutput};
use crate::mask::{spatial_extent, BinaryMask};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Probability above which a pixel is predicted foreground.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct Segmentation {
    /// `[2, H, W]` background/foreground probabilities at image resolution.
    pub probs: Var,
    /// `[H, W]` foreground probability at image resolution.
    pub fg_prob: Var,
    pub head: HeadOutput,
}

/// Runs the head on encoded features and bilinearly upsamples the class
/// probabilities to `out_h × out_w`. `support_mask` may be at any
/// resolution; it is resampled to what the head expects.
pub fn segment_features<T: Scalar>(
    tape: &mut Tape<T>,
    support_feat: Var,
    support_mask: &BinaryMask,
    query_feat: Var,
    head: &HeadConfig,
    out_h: usize,
    out_w: usize,
) -> Result<Segmentation> {
    let s = tape.shape(support_feat).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("support features {s:?}")));
    }
    let mask = align_mask(support_mask, s[1], s[2], head.window);
    let out = head_forward(tape, support_feat, &mask, query_feat, head)?;
    let probs = tape.bilinear_resize(out.probs, out_h, out_w)?;
    let fg_prob = tape.select(probs, 1)?;
    Ok(Segmentation {
        probs,
        fg_prob,
        head: out,
    })
}

/// Foreground where the probability exceeds [`DECISION_THRESHOLD`].
pub fn prediction_mask<T: Scalar>(fg_prob: &Tensor<T>) -> Result<BinaryMask> {
    BinaryMask::from_tensor(fg_prob, T::from_f64(DECISION_THRESHOLD))
}

#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[H, W]`.
    pub fg_prob: Tensor<f32>,
    pub mask: BinaryMask,
}

/// Segments a query from precomputed support and query features.
pub fn predict_from_features(
    support_feat: &Tensor<f32>,
    support_mask: &BinaryMask,
    query_feat: &Tensor<f32>,
    head: &HeadConfig,
    out_h: usize,
    out_w: usize,
) -> Result<Prediction> {
    let mut tape = Tape::new();
    let s = tape.constant(support_feat.clone());
    let q = tape.constant(query_feat.clone());
    let seg = segment_features(&mut tape, s, support_mask, q, head, out_h, out_w)?;
    let fg_prob = tape.value(seg.fg_prob).clone();
    let mask = prediction_mask(&fg_prob)?;
    Ok(Prediction { fg_prob, mask })
}

/// Segments `query_img` (`[1, H, W]`) using `support_img` and its mask.
pub fn predict(
    weights: &EncoderWeights<f32>,
    head: &HeadConfig,
    support_img: &Tensor<f32>,
    support_mask: &BinaryMask,
    query_img: &Tensor<f32>,
) -> Result<Prediction> {
    let (h, w) = spatial_extent(query_img.shape())?;
    let (sh, sw) = spatial_extent(support_img.shape())?;
    if support_mask.height() != sh || support_mask.width() != sw {
        return Err(Error::shape(format!(
            "support mask {}×{} vs support image {sh}×{sw}",
            support_mask.height(),
            support_mask.width()
        )));
    }
    let sf = encode(weights, &as_chw(support_img)?)?;
    let qf = encode(weights, &as_chw(query_img)?)?;
    predict_from_features(&sf, support_mask, &qf, head, h, w)
}

/// Accepts `[H, W]` or `[1, H, W]` and returns `[1, H, W]`.
pub fn as_chw<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = spatial_extent(image.shape())?;
    image.reshape(&[1, h, w])
}
