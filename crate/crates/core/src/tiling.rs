//! Deterministic cube tiling of volumes and overlap-averaged stitching.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeKind, Voxels};

/// One cube of a tiling plan. Tiles hanging over the volume edge are
/// zero-padded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TileIndex {
    pub origin: [usize; 3],
    pub size: usize,
    pub overlap: usize,
    pub volume_dims: [usize; 3],
}

/// Tile origins along one axis: step `size - overlap`, last tile may pad.
fn axis_origins(extent: usize, size: usize, overlap: usize) -> Vec<usize> {
    let step = size - overlap;
    let count = if extent <= size {
        1
    } else {
        1 + (extent - size).div_ceil(step)
    };
    (0..count).map(|i| i * step).collect()
}

/// Raster-ordered (z, then y, then x) tile layout for a volume.
pub fn plan(dims: [usize; 3], size: usize, overlap: usize) -> Result<Vec<TileIndex>> {
    if size == 0 || overlap >= size {
        return Err(Error::Config(format!(
            "tile size {size} must exceed overlap {overlap}"
        )));
    }
    let [oz, oy, ox] = [0, 1, 2].map(|a| axis_origins(dims[a], size, overlap));
    let mut out = Vec::with_capacity(oz.len() * oy.len() * ox.len());
    for &z in &oz {
        for &y in &oy {
            for &x in &ox {
                out.push(TileIndex {
                    origin: [z, y, x],
                    size,
                    overlap,
                    volume_dims: dims,
                });
            }
        }
    }
    Ok(out)
}

/// Cuts `v` into `size³` cubes overlapping by `overlap` voxels.
pub fn tile(v: &Volume, size: usize, overlap: usize) -> Result<Vec<(TileIndex, Volume)>> {
    let tiles = plan(v.dims, size, overlap)?;
    let [d, h, w] = v.dims;
    let n = size * size * size;
    let extract = |t: &TileIndex| -> Voxels {
        let inside = |z: usize, y: usize, x: usize| {
            let (gz, gy, gx) = (t.origin[0] + z, t.origin[1] + y, t.origin[2] + x);
            (gz < d && gy < h && gx < w).then(|| (gz * h + gy) * w + gx)
        };
        match &v.voxels {
            Voxels::F32(src) => {
                let mut out = vec![0.0f32; n];
                fill(&mut out, size, |z, y, x| inside(z, y, x).map(|i| src[i]));
                Voxels::F32(out)
            }
            Voxels::U8(src) => {
                let mut out = vec![0u8; n];
                fill(&mut out, size, |z, y, x| inside(z, y, x).map(|i| src[i]));
                Voxels::U8(out)
            }
        }
    };
    Ok(tiles
        .into_iter()
        .map(|t| {
            let cube = Volume {
                dims: [size; 3],
                spacing_um: v.spacing_um,
                kind: v.kind,
                voxels: extract(&t),
            };
            (t, cube)
        })
        .collect())
}

fn fill<T: Copy>(out: &mut [T], size: usize, get: impl Fn(usize, usize, usize) -> Option<T>) {
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                if let Some(v) = get(z, y, x) {
                    out[(z * size + y) * size + x] = v;
                }
            }
        }
    }
}

/// Reassembles tiles from one plan, averaging overlapping voxels and
/// discarding padding.
pub fn stitch(tiles: &[(TileIndex, Volume)]) -> Result<Volume> {
    let Some((first, first_vol)) = tiles.first() else {
        return Err(Error::Stitch("no tiles".into()));
    };
    let (dims, size, overlap) = (first.volume_dims, first.size, first.overlap);
    let kind = first_vol.kind;
    if kind == VolumeKind::Label {
        return Err(Error::Stitch("label tiles cannot be averaged".into()));
    }
    let expected: BTreeSet<TileIndex> = plan(dims, size, overlap)
        .map_err(|e| Error::Stitch(e.to_string()))?
        .into_iter()
        .collect();
    let mut seen = BTreeSet::new();
    let [d, h, w] = dims;
    let mut sum = vec![0.0f64; d * h * w];
    let mut count = vec![0u32; d * h * w];
    for (t, vol) in tiles {
        if !expected.contains(t) {
            return Err(Error::Stitch(format!(
                "tile at {:?} is not part of the plan",
                t.origin
            )));
        }
        if !seen.insert(*t) {
            return Err(Error::Stitch(format!("duplicate tile at {:?}", t.origin)));
        }
        if vol.dims != [size; 3] || vol.kind != kind {
            return Err(Error::Stitch(format!(
                "tile at {:?} has dims {:?} / kind {:?}",
                t.origin, vol.dims, vol.kind
            )));
        }
        let data = vol
            .as_f32()
            .ok_or_else(|| Error::Stitch("tile without float voxels".into()))?;
        for z in 0..size {
            let gz = t.origin[0] + z;
            if gz >= d {
                break;
            }
            for y in 0..size {
                let gy = t.origin[1] + y;
                if gy >= h {
                    break;
                }
                for x in 0..size {
                    let gx = t.origin[2] + x;
                    if gx >= w {
                        break;
                    }
                    let gi = (gz * h + gy) * w + gx;
                    sum[gi] += data[(z * size + y) * size + x] as f64;
                    count[gi] += 1;
                }
            }
        }
    }
    if seen.len() != expected.len() {
        return Err(Error::Stitch(format!(
            "{} of {} planned tiles supplied",
            seen.len(),
            expected.len()
        )));
    }
    let out = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| (s / c as f64) as f32)
        .collect();
    let v = Volume {
        dims,
        spacing_um: first_vol.spacing_um,
        kind,
        voxels: Voxels::F32(out),
    };
    v.validate()?;
    Ok(v)
}
