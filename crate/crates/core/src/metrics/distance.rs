//! Surface extraction, exact Euclidean distance transforms and HD95.

/// Foreground voxels with at least one 6-neighbour in the background;
/// voxels on the volume edge count as boundary.
pub fn surface(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = dims;
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if !mask[i] {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                out[i] = edge
                    || !mask[i - h * w]
                    || !mask[i + h * w]
                    || !mask[i - w]
                    || !mask[i + w]
                    || !mask[i - 1]
                    || !mask[i + 1];
            }
        }
    }
    out
}

/// One pass of the lower-envelope transform along a line with sample
/// positions `k * step`.
fn envelope_1d(f: &[f64], step: f64, out: &mut [f64], v: &mut [usize], zs: &mut [f64]) {
    let n = f.len();
    let pos = |q: usize| q as f64 * step;
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(first) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = first;
    zs[0] = f64::NEG_INFINITY;
    zs[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s =
                ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            // zs[0] is -inf, so this never pops past the first parabola
            if s <= zs[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            zs[k] = s;
            zs[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while zs[k + 1] < pos(q) {
            k += 1;
        }
        let dq = pos(q) - pos(v[k]);
        *o = dq * dq + f[v[k]];
    }
}

/// Squared Euclidean distance from every voxel to the nearest `true`
/// voxel of `sites`, with physical voxel spacing. Infinite when `sites`
/// is empty.
pub fn squared_edt(sites: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut f: Vec<f64> = sites
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let longest = *dims.iter().max().unwrap_or(&0);
    let (mut line, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut zs) = (vec![0usize; longest], vec![0.0; longest + 1]);
    for axis in 0..3 {
        let n = dims[axis];
        let st = strides[axis];
        for start in 0..f.len() {
            if (start / st) % n != 0 {
                continue;
            }
            for q in 0..n {
                line[q] = f[start + q * st];
            }
            envelope_1d(&line[..n], spacing[axis], &mut out[..n], &mut v, &mut zs);
            for q in 0..n {
                f[start + q * st] = out[q];
            }
        }
    }
    f
}

/// Linear-interpolation percentile of unsorted samples.
pub fn percentile_linear(values: &mut [f64], pct: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let rank = pct / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (rank - lo as f64) * (values[hi] - values[lo])
}

/// Pooled directed surface distances in both directions.
pub fn surface_distances(
    pred: &[bool],
    gt: &[bool],
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Vec<f64> {
    let (sp, sg) = (surface(pred, dims), surface(gt, dims));
    let (to_gt, to_pred) = (
        squared_edt(&sg, dims, spacing),
        squared_edt(&sp, dims, spacing),
    );
    let mut d = Vec::new();
    for i in 0..pred.len() {
        if sp[i] {
            d.push(to_gt[i].sqrt());
        }
        if sg[i] {
            d.push(to_pred[i].sqrt());
        }
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hd95 {
    /// Infinite when either mask is empty.
    pub value: f64,
    pub empty_mask: bool,
}

pub fn hd95(pred: &[bool], gt: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Hd95 {
    if !pred.iter().any(|&p| p) || !gt.iter().any(|&g| g) {
        return Hd95 {
            value: f64::INFINITY,
            empty_mask: true,
        };
    }
    let mut d = surface_distances(pred, gt, dims, spacing);
    Hd95 {
        value: percentile_linear(&mut d, 95.0),
        empty_mask: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edt_matches_brute_force_with_anisotropy() {
        let dims = [4, 5, 6];
        let spacing = [2.0, 0.5, 1.25];
        let n = 120;
        let sites: Vec<bool> = (0..n).map(|i| (i * 37 + 11) % 17 == 0).collect();
        let got = squared_edt(&sites, dims, spacing);
        let coord = |i: usize| [i / 30, (i / 6) % 5, i % 6];
        for i in 0..n {
            let c = coord(i);
            let best = (0..n)
                .filter(|&j| sites[j])
                .map(|j| {
                    let s = coord(j);
                    (0..3)
                        .map(|k| ((c[k] as f64 - s[k] as f64) * spacing[k]).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            assert!((got[i] - best).abs() < 1e-9, "{i}: {} vs {best}", got[i]);
        }
    }

    #[test]
    fn linear_percentile() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(percentile_linear(&mut v, 50.0), 3.0);
        assert!((percentile_linear(&mut v, 95.0) - 4.8).abs() < 1e-12);
    }
}
