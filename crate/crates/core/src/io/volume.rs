//! `CWPV` volume files: a small little-endian header followed by row-major
//! `float32` or `uint8` data.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::numerics::Tensor;
use crate::superpixel::LabelMap;

pub const VOLUME_MAGIC: &[u8; 4] = b"CWPV";
pub const VOLUME_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl VolumeData {
    fn code(&self) -> u8 {
        match self {
            VolumeData::F32(_) => 0,
            VolumeData::U8(_) => 1,
        }
    }

    fn len(&self) -> usize {
        match self {
            VolumeData::F32(v) => v.len(),
            VolumeData::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: Vec<usize>,
    pub data: VolumeData,
}

impl Volume {
    pub fn new(dims: Vec<usize>, data: VolumeData) -> Result<Self> {
        if dims.is_empty() || dims.len() > u8::MAX as usize {
            return Err(Error::shape(format!("volume rank {} out of range", dims.len())));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::shape("volume extent exceeds u32"));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("dims {dims:?} vs {} values", data.len())));
        }
        Ok(Volume { dims, data })
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Self {
        Volume {
            dims: t.shape().to_vec(),
            data: VolumeData::F32(t.data().to_vec()),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        match &self.data {
            VolumeData::F32(v) => Tensor::new(&self.dims, v.clone()),
            VolumeData::U8(v) => Tensor::new(&self.dims, v.iter().map(|&b| f32::from(b)).collect()),
        }
    }

    /// `uint8` `[H, W]` with 0/1 values.
    pub fn from_mask(m: &BinaryMask) -> Self {
        Volume {
            dims: vec![m.height(), m.width()],
            data: VolumeData::U8(m.bits().iter().map(|&b| u8::from(b)).collect()),
        }
    }

    /// `uint8` `[S, H, W]` with 0/1 values.
    pub fn from_masks(masks: &[BinaryMask]) -> Result<Self> {
        let first = masks.first().ok_or_else(|| Error::shape("no masks"))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(masks.len() * h * w);
        for m in masks {
            if m.height() != h || m.width() != w {
                return Err(Error::shape("masks differ in shape"));
            }
            data.extend(m.bits().iter().map(|&b| u8::from(b)));
        }
        Volume::new(vec![masks.len(), h, w], VolumeData::U8(data))
    }

    /// Reads `[H, W]` or `[1, H, W]`; any nonzero value is foreground.
    pub fn to_mask(&self) -> Result<BinaryMask> {
        let (h, w) = crate::mask::spatial_extent(&self.dims)?;
        BinaryMask::new(h, w, self.nonzero())
    }

    /// Splits `[S, H, W]` into slices; any nonzero value is foreground.
    pub fn to_masks(&self) -> Result<Vec<BinaryMask>> {
        if self.dims.len() != 3 {
            return Err(Error::shape(format!("expected [S, H, W], got {:?}", self.dims)));
        }
        let (h, w) = (self.dims[1], self.dims[2]);
        let bits = self.nonzero();
        bits.chunks(h * w).map(|c| BinaryMask::new(h, w, c.to_vec())).collect()
    }

    fn nonzero(&self) -> Vec<bool> {
        match &self.data {
            VolumeData::F32(v) => v.iter().map(|&x| x != 0.0).collect(),
            VolumeData::U8(v) => v.iter().map(|&x| x != 0).collect(),
        }
    }

    /// Segment ids stored exactly as `float32` `[H, W]`.
    pub fn from_labels(labels: &LabelMap) -> Self {
        Volume::from_tensor(&labels.to_tensor::<f32>())
    }

    pub fn to_labels(&self) -> Result<LabelMap> {
        LabelMap::from_tensor(&self.to_tensor()?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(VOLUME_MAGIC);
        out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
        out.push(self.data.code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            VolumeData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            VolumeData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    /// `path` only labels error messages.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(path, reason);
        let mut r = Reader::new(bytes);
        let magic = r.take(4).ok_or_else(|| bad("truncated header".into()))?;
        if magic != VOLUME_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header".into()))?;
        if version != VOLUME_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let code = r.u8().ok_or_else(|| bad("truncated header".into()))?;
        let ndim = r.u8().ok_or_else(|| bad("truncated header".into()))? as usize;
        if ndim == 0 {
            return Err(bad("zero-rank volume".into()));
        }
        let dims: Vec<usize> = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Option<_>>()
            .ok_or_else(|| bad("truncated dims".into()))?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("dims overflow".into()))?;
        let data = match code {
            0 => {
                let raw = r.take(n * 4).ok_or_else(|| bad("truncated payload".into()))?;
                VolumeData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            1 => VolumeData::U8(r.take(n).ok_or_else(|| bad("truncated payload".into()))?.to_vec()),
            other => return Err(bad(format!("unknown dtype code {other}"))),
        };
        if !r.is_at_end() {
            return Err(bad("trailing bytes after payload".into()));
        }
        Volume::new(dims, data).map_err(|e| bad(e.to_string()))
    }
}

pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    super::write_bytes(path, &volume.encode())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Volume::decode(&bytes, path)
}

/// Cursor over a byte slice for the binary formats.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    pub fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    pub fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
