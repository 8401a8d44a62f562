//! One-shot evaluation without fine-tuning.
//!
//! For an organ, the slice range where it is present is split into three
//! contiguous parts. The middle slice of each part of the support scan, with
//! its ground-truth mask, segments every slice of the same part of every
//! query scan. Predictions can be restricted to the image quadrants the
//! organ is known to occupy, and each scan is scored by volume Dice.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::encoder::{encode, EncoderWeights};
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::mask::{spatial_extent, BinaryMask};
use crate::model::{as_chw, predict_from_features};
use crate::numerics::Tensor;

/// Number of parts the organ's slice range is divided into.
pub const PARTS: usize = 3;

#[derive(Clone, Debug)]
pub struct ScanVolume {
    pub scan_id: String,
    /// `[1, H, W]` slices in axial order.
    pub slices: Vec<Tensor<f32>>,
    pub organ_masks: BTreeMap<String, Vec<BinaryMask>>,
}

impl ScanVolume {
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.slices.first() else {
            return Err(Error::invalid(format!("scan {} has no slices", self.scan_id)));
        };
        let (h, w) = spatial_extent(first.shape())?;
        for s in &self.slices {
            if spatial_extent(s.shape())? != (h, w) {
                return Err(Error::shape(format!("scan {}: slices differ in shape", self.scan_id)));
            }
        }
        for (organ, masks) in &self.organ_masks {
            if masks.len() != self.slices.len() || masks.iter().any(|m| m.height() != h || m.width() != w) {
                return Err(Error::shape(format!(
                    "scan {}: {organ} masks do not align with the slices",
                    self.scan_id
                )));
            }
        }
        Ok(())
    }

    pub fn extent(&self) -> Result<(usize, usize)> {
        spatial_extent(self.slices.first().map_or(&[][..], |s| s.shape()))
    }

    /// Inclusive `[z_min, z_max]` of slices where `organ` is present.
    pub fn organ_range(&self, organ: &str) -> Option<(usize, usize)> {
        let masks = self.organ_masks.get(organ)?;
        let first = masks.iter().position(|m| !m.is_empty())?;
        let last = masks.iter().rposition(|m| !m.is_empty())?;
        Some((first, last))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::TopLeft,
        Quadrant::TopRight,
        Quadrant::BottomLeft,
        Quadrant::BottomRight,
    ];

    /// Quadrant of pixel `(y, x)`; the boundaries are at `h/2` and `w/2`.
    pub fn of(y: usize, x: usize, h: usize, w: usize) -> Self {
        match (y >= h / 2, x >= w / 2) {
            (false, false) => Quadrant::TopLeft,
            (false, true) => Quadrant::TopRight,
            (true, false) => Quadrant::BottomLeft,
            (true, true) => Quadrant::BottomRight,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Quadrant::TopLeft => "TL",
            Quadrant::TopRight => "TR",
            Quadrant::BottomLeft => "BL",
            Quadrant::BottomRight => "BR",
        }
    }
}

impl fmt::Display for Quadrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Quadrant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TL" => Ok(Quadrant::TopLeft),
            "TR" => Ok(Quadrant::TopRight),
            "BL" => Ok(Quadrant::BottomLeft),
            "BR" => Ok(Quadrant::BottomRight),
            other => Err(Error::Config(format!("unknown quadrant {other:?}"))),
        }
    }
}

/// Allowed quadrants per organ. Organs without an entry are not masked.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct QuadrantMap {
    allowed: BTreeMap<String, BTreeSet<Quadrant>>,
}

impl QuadrantMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, organ: &str, quadrants: impl IntoIterator<Item = Quadrant>) -> Result<()> {
        let set: BTreeSet<Quadrant> = quadrants.into_iter().collect();
        if set.is_empty() {
            return Err(Error::Config(format!("{organ}: empty quadrant set")));
        }
        self.allowed.insert(organ.to_string(), set);
        Ok(())
    }

    pub fn allowed(&self, organ: &str) -> Option<&BTreeSet<Quadrant>> {
        self.allowed.get(organ)
    }

    pub fn organs(&self) -> impl Iterator<Item = (&String, &BTreeSet<Quadrant>)> {
        self.allowed.iter()
    }

    /// Every listed organ allowed everywhere.
    pub fn all_quadrants<'a>(organs: impl IntoIterator<Item = &'a str>) -> Self {
        let mut map = Self::new();
        for organ in organs {
            map.allowed
                .insert(organ.to_string(), Quadrant::ALL.into_iter().collect());
        }
        map
    }

    /// Allows, per organ, each quadrant in which that organ's ground truth
    /// appears on any slice of any scan.
    pub fn from_ground_truth(scans: &[ScanVolume]) -> Self {
        let mut allowed: BTreeMap<String, BTreeSet<Quadrant>> = BTreeMap::new();
        for scan in scans {
            for (organ, masks) in &scan.organ_masks {
                let set = allowed.entry(organ.clone()).or_default();
                for m in masks {
                    for y in 0..m.height() {
                        for x in 0..m.width() {
                            if m.get(y, x) {
                                set.insert(Quadrant::of(y, x, m.height(), m.width()));
                            }
                        }
                    }
                }
            }
        }
        allowed.retain(|_, s| !s.is_empty());
        QuadrantMap { allowed }
    }
}

/// Zeroes predictions outside the organ's allowed quadrants.
pub fn quadrant_mask(pred: &BinaryMask, organ: &str, qmap: &QuadrantMap) -> Result<BinaryMask> {
    let (h, w) = (pred.height(), pred.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "quadrant masking needs even extents, got {h}×{w}"
        )));
    }
    let Some(allowed) = qmap.allowed(organ) else {
        return Ok(pred.clone());
    };
    Ok(BinaryMask::from_fn(h, w, |y, x| {
        pred.get(y, x) && allowed.contains(&Quadrant::of(y, x, h, w))
    }))
}

/// Volume Dice `2|P∩G| / (|P|+|G|)`; two empty volumes score 1.
pub fn dice(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "{} predicted slices vs {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        if p.height() != g.height() || p.width() != g.width() {
            return Err(Error::shape("prediction and ground truth differ in shape"));
        }
        inter += p.bits().iter().zip(g.bits()).filter(|(a, b)| **a && **b).count();
        total += p.count() + g.count();
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Splits `[z_min, z_max]` into `parts` contiguous ranges; earlier parts take
/// the remainder. Ranges are empty when there are fewer slices than parts.
pub fn split_parts(z_min: usize, z_max: usize, parts: usize) -> Vec<Range<usize>> {
    let n = z_max + 1 - z_min;
    let (base, extra) = (n / parts, n % parts);
    let mut start = z_min;
    (0..parts)
        .map(|p| {
            let len = base + usize::from(p < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Middle slice of a part (the lower one for even lengths).
pub fn part_middle(part: &Range<usize>) -> Option<usize> {
    (!part.is_empty()).then(|| part.start + (part.len() - 1) / 2)
}

/// Inference-time replacements for head settings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeadOverrides {
    pub top_k_fraction: Option<f64>,
    pub window: Option<usize>,
    pub temperature: Option<f64>,
}

impl HeadOverrides {
    pub fn apply(&self, head: &HeadConfig) -> HeadConfig {
        HeadConfig {
            top_k_fraction: self.top_k_fraction.unwrap_or(head.top_k_fraction),
            window: self.window.unwrap_or(head.window),
            temperature: self.temperature.unwrap_or(head.temperature),
            ..head.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartDice {
    pub part: usize,
    /// Support slice used for this part.
    pub support_index: usize,
    pub slices: Range<usize>,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanDice {
    pub scan_id: String,
    pub dice: f64,
    pub parts: Vec<PartDice>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub organ: String,
    pub support_scan: String,
    /// Support slice index per part; `None` for empty parts.
    pub support_indices: Vec<Option<usize>>,
    pub scans: Vec<ScanDice>,
    pub notes: Vec<String>,
}

impl EvalReport {
    /// Mean per-scan Dice; `None` when no scan was evaluated.
    pub fn mean_dice(&self) -> Option<f64> {
        (!self.scans.is_empty()).then(|| self.scans.iter().map(|s| s.dice).sum::<f64>() / self.scans.len() as f64)
    }

    /// Line-oriented records `scan_id organ part dice`; `part` is `all`
    /// for the volume score.
    pub fn records(&self) -> String {
        let mut out = String::new();
        for s in &self.scans {
            for p in &s.parts {
                out.push_str(&format!("{} {} {} {:.6}\n", s.scan_id, self.organ, p.part, p.dice));
            }
            out.push_str(&format!("{} {} all {:.6}\n", s.scan_id, self.organ, s.dice));
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "organ: {}", self.organ)?;
        let supports: Vec<String> = self
            .support_indices
            .iter()
            .map(|s| s.map_or("-".into(), |i| i.to_string()))
            .collect();
        writeln!(
            f,
            "support scan: {} (slices {})",
            self.support_scan,
            supports.join(", ")
        )?;
        for s in &self.scans {
            let parts: Vec<String> = s.parts.iter().map(|p| format!("{:.4}", p.dice)).collect();
            writeln!(
                f,
                "  {:<12} dice {:.4}  parts [{}]",
                s.scan_id,
                s.dice,
                parts.join(", ")
            )?;
        }
        for n in &self.notes {
            writeln!(f, "  note: {n}")?;
        }
        match self.mean_dice() {
            Some(m) => write!(f, "mean dice: {m:.4}"),
            None => write!(f, "mean dice: n/a"),
        }
    }
}

fn features(weights: &EncoderWeights<f32>, slice: &Tensor<f32>) -> Result<Tensor<f32>> {
    encode(weights, &as_chw(slice)?)
}

/// Evaluates `organ` on every query scan with supports from `support_scan`.
/// With `qmap` set, predictions are quadrant-masked before scoring.
pub fn one_shot_eval(
    support_scan: &ScanVolume,
    query_scans: &[ScanVolume],
    organ: &str,
    weights: &EncoderWeights<f32>,
    head: &HeadConfig,
    qmap: Option<&QuadrantMap>,
) -> Result<EvalReport> {
    head.validate()?;
    support_scan.validate()?;
    let (z0, z1) = support_scan.organ_range(organ).ok_or_else(|| {
        Error::invalid(format!(
            "organ {organ} is absent from support scan {}",
            support_scan.scan_id
        ))
    })?;
    let support_masks = &support_scan.organ_masks[organ];
    let mut supports = Vec::with_capacity(PARTS);
    for part in split_parts(z0, z1, PARTS) {
        supports.push(match part_middle(&part) {
            Some(i) => Some((i, features(weights, &support_scan.slices[i])?, &support_masks[i])),
            None => None,
        });
    }

    let mut report = EvalReport {
        organ: organ.to_string(),
        support_scan: support_scan.scan_id.clone(),
        support_indices: supports.iter().map(|s| s.as_ref().map(|s| s.0)).collect(),
        scans: Vec::new(),
        notes: Vec::new(),
    };
    for scan in query_scans {
        scan.validate()?;
        let Some((q0, q1)) = scan.organ_range(organ) else {
            report.notes.push(format!("{}: {organ} absent, skipped", scan.scan_id));
            continue;
        };
        let (h, w) = scan.extent()?;
        let gt_all = &scan.organ_masks[organ];
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        let mut parts = Vec::new();
        for (p, range) in split_parts(q0, q1, PARTS).into_iter().enumerate() {
            if range.is_empty() {
                continue;
            }
            // Fewer support slices than parts: fall back to the nearest earlier part.
            let (support_index, sf, smask) = supports[..=p]
                .iter()
                .rev()
                .flatten()
                .next()
                .ok_or_else(|| Error::invalid("support scan has no usable part"))?;
            let mut part_preds = Vec::with_capacity(range.len());
            for z in range.clone() {
                let qf = features(weights, &scan.slices[z])?;
                let pred = predict_from_features(sf, smask, &qf, head, h, w)?.mask;
                let pred = match qmap {
                    Some(q) => quadrant_mask(&pred, organ, q)?,
                    None => pred,
                };
                part_preds.push(pred);
            }
            let part_gt = &gt_all[range.clone()];
            parts.push(PartDice {
                part: p,
                support_index: *support_index,
                slices: range.clone(),
                dice: dice(&part_preds, part_gt)?,
            });
            preds.extend(part_preds);
            gts.extend_from_slice(part_gt);
        }
        report.scans.push(ScanDice {
            scan_id: scan.scan_id.clone(),
            dice: dice(&preds, &gts)?,
            parts,
        });
    }
    Ok(report)
}
