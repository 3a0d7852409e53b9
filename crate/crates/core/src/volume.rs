//! 3D scalar volumes and their on-disk format.
//!
//! File layout (all integers and floats little-endian):
//!
//! | offset | size | field                                              |
//! |--------|------|----------------------------------------------------|
//! | 0      | 4    | magic `VPBV`                                       |
//! | 4      | 2    | format version, currently 1                        |
//! | 6      | 1    | byte order, 0 = little-endian (only value allowed) |
//! | 7      | 1    | kind: 0 intensity, 1 label, 2 probability          |
//! | 8      | 1    | dtype: 0 = f32, 1 = u8                             |
//! | 9      | 3    | reserved, zero                                     |
//! | 12     | 12   | dims `D, H, W` as u32                              |
//! | 24     | 12   | voxel spacing in micrometers as f32                |
//! | 36     | 8    | payload length in bytes as u64                     |
//! | 44     | ...  | payload, z-major then y then x                     |
//!
//! Labels are stored as u8, intensities and probabilities as f32. Readers
//! reject trailing bytes as well as short payloads.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"VPBV";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 44;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeKind {
    Intensity,
    Label,
    Probability,
}

impl VolumeKind {
    fn code(self) -> u8 {
        match self {
            VolumeKind::Intensity => 0,
            VolumeKind::Label => 1,
            VolumeKind::Probability => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(VolumeKind::Intensity),
            1 => Some(VolumeKind::Label),
            2 => Some(VolumeKind::Probability),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Voxels {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl Voxels {
    pub fn len(&self) -> usize {
        match self {
            Voxels::F32(v) => v.len(),
            Voxels::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A `D x H x W` scalar field with physical voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing_um: [f32; 3],
    pub kind: VolumeKind,
    pub voxels: Voxels,
}

impl Volume {
    pub fn intensity(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        Self::checked(dims, VolumeKind::Intensity, Voxels::F32(data))
    }

    pub fn probability(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        Self::checked(dims, VolumeKind::Probability, Voxels::F32(data))
    }

    pub fn label(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        Self::checked(dims, VolumeKind::Label, Voxels::U8(data))
    }

    fn checked(dims: [usize; 3], kind: VolumeKind, voxels: Voxels) -> Result<Self> {
        let v = Self {
            dims,
            spacing_um: [1.0; 3],
            kind,
            voxels,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn with_spacing(mut self, spacing_um: [f32; 3]) -> Self {
        self.spacing_um = spacing_um;
        self
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    /// Checks the storage type and value range implied by `kind`.
    pub fn validate(&self) -> Result<()> {
        if self.voxels.len() != self.len() {
            return Err(Error::Validation(format!(
                "dims {:?} need {} voxels, found {}",
                self.dims,
                self.len(),
                self.voxels.len()
            )));
        }
        if self.spacing_um.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Validation(format!(
                "invalid spacing {:?}",
                self.spacing_um
            )));
        }
        match (self.kind, &self.voxels) {
            (VolumeKind::Label, Voxels::U8(v)) => {
                if let Some(bad) = v.iter().find(|&&b| b > 1) {
                    return Err(Error::Validation(format!(
                        "label value {bad} outside {{0, 1}}"
                    )));
                }
            }
            (VolumeKind::Probability, Voxels::F32(v)) => {
                if let Some(bad) = v.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                    return Err(Error::Validation(format!(
                        "probability {bad} outside [0, 1]"
                    )));
                }
            }
            (VolumeKind::Intensity, Voxels::F32(v)) => {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Validation("non-finite intensity".into()));
                }
            }
            (kind, _) => {
                return Err(Error::Validation(format!(
                    "{kind:?} volume with wrong voxel type"
                )));
            }
        }
        Ok(())
    }

    /// Voxel values as `f64`, whatever the storage type.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.voxels {
            Voxels::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Voxels::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.voxels {
            Voxels::F32(v) => Some(v),
            Voxels::U8(_) => None,
        }
    }

    pub fn as_labels(&self) -> Option<&[u8]> {
        match &self.voxels {
            Voxels::U8(v) => Some(v),
            Voxels::F32(_) => None,
        }
    }

    /// Binary mask: labels as-is, other kinds thresholded at `threshold`
    /// (values `>= threshold` are foreground).
    pub fn to_mask(&self, threshold: f32) -> Vec<bool> {
        match &self.voxels {
            Voxels::U8(v) => v.iter().map(|&b| b != 0).collect(),
            Voxels::F32(v) => v.iter().map(|&p| p >= threshold).collect(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.voxels.len() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(0);
        out.push(self.kind.code());
        out.push(match self.voxels {
            Voxels::F32(_) => 0,
            Voxels::U8(_) => 1,
        });
        out.extend_from_slice(&[0; 3]);
        for &d in &self.dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::Validation(format!("extent {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for s in self.spacing_um {
            out.extend_from_slice(&s.to_le_bytes());
        }
        let payload_len = match &self.voxels {
            Voxels::F32(v) => v.len() * 4,
            Voxels::U8(v) => v.len(),
        };
        out.extend_from_slice(&(payload_len as u64).to_le_bytes());
        match &self.voxels {
            Voxels::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Voxels::U8(v) => out.extend_from_slice(v),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "header truncated at {} bytes",
                bytes.len()
            )));
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::Format("bad magic number".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        if bytes[6] != 0 {
            return Err(Error::Format(
                "only little-endian payloads are supported".into(),
            ));
        }
        let kind = VolumeKind::from_code(bytes[7])
            .ok_or_else(|| Error::Format(format!("unknown volume kind {}", bytes[7])))?;
        let dtype = bytes[8];
        if bytes[9..12] != [0, 0, 0] {
            return Err(Error::Format("reserved header bytes are not zero".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let dims = [
            u32_at(12) as usize,
            u32_at(16) as usize,
            u32_at(20) as usize,
        ];
        let spacing_um = [f32_at(24), f32_at(28), f32_at(32)];
        let declared = u64::from_le_bytes(bytes[36..44].try_into().unwrap());
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
        let width = match dtype {
            0 => 4,
            1 => 1,
            d => return Err(Error::Format(format!("unknown dtype {d}"))),
        };
        let expected = count
            .checked_mul(width)
            .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
        if declared != expected as u64 {
            return Err(Error::Format(format!(
                "payload length {declared} does not match dims {dims:?}"
            )));
        }
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < expected {
            return Err(Error::Format(format!(
                "payload truncated: {} of {expected} bytes",
                payload.len()
            )));
        }
        if payload.len() > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                payload.len() - expected
            )));
        }
        let voxels = match dtype {
            0 => Voxels::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => Voxels::U8(payload.to_vec()),
        };
        let v = Volume {
            dims,
            spacing_um,
            kind,
            voxels,
        };
        v.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(v)
    }
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = v.encode()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Volume::decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Nearest-rank percentile: the smallest value with at least `pct` percent
/// of the samples at or below it.
pub fn nearest_rank_percentile(sorted: &[f32], pct: f64) -> f32 {
    let n = sorted.len();
    let rank = ((pct / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Clips intensities above the `pct`-th percentile, then min-max scales
/// the clipped volume to `[0, 1]`. A constant volume maps to all zeros.
pub fn percentile_clip_normalize(v: &Volume, pct: f64) -> Result<Volume> {
    if v.kind != VolumeKind::Intensity {
        return Err(Error::Validation(format!(
            "cannot normalize a {:?} volume",
            v.kind
        )));
    }
    if !(pct > 0.0 && pct <= 100.0) {
        return Err(Error::Config(format!("percentile {pct} outside (0, 100]")));
    }
    let data = v.as_f32().expect("intensity volumes hold f32");
    if data.is_empty() {
        return Ok(v.clone());
    }
    let mut sorted = data.to_vec();
    sorted.sort_by(f32::total_cmp);
    let ceiling = nearest_rank_percentile(&sorted, pct);
    let lo = sorted[0];
    let hi = ceiling;
    let range = hi - lo;
    let out = data
        .iter()
        .map(|&x| {
            if range > 0.0 {
                ((x.min(ceiling) - lo) / range).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    Ok(Volume {
        dims: v.dims,
        spacing_um: v.spacing_um,
        kind: VolumeKind::Intensity,
        voxels: Voxels::F32(out),
    })
}
