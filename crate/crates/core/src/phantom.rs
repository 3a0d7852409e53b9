//! Synthetic vascular phantoms: random tapering tube trees, their
//! rasterized masks, and a light-sheet-like intensity rendering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    /// Radius of the first node, in voxels.
    pub root_radius: f64,
    /// Number of branching generations; 1 means a single tube.
    pub levels: usize,
    /// Probability that a segment end splits in two rather than continuing as one.
    pub branch_prob: f64,
    /// Standard deviation of the per-step direction perturbation.
    pub tortuosity: f64,
    pub steps_per_segment: usize,
    /// Distance between consecutive nodes, in voxels.
    pub step_length: f64,
    /// Radius factor per step along a segment.
    pub taper: f64,
    /// Radius factor from a parent's last node to a child's first node.
    pub child_ratio: f64,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            root_radius: 3.0,
            levels: 4,
            branch_prob: 0.9,
            tortuosity: 0.15,
            steps_per_segment: 6,
            step_length: 2.5,
            taper: 0.97,
            child_ratio: 0.79,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TubeNode {
    pub pos: [f64; 3],
    pub radius: f64,
}

/// Nodes in creation order; every edge is `(parent, child)` with
/// `parent < child`.
#[derive(Debug, Clone, PartialEq)]
pub struct TubeTree {
    pub nodes: Vec<TubeNode>,
    pub edges: Vec<(usize, usize)>,
    pub branching_levels: usize,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n < 1e-12 {
        [1.0, 0.0, 0.0]
    } else {
        [v[0] / n, v[1] / n, v[2] / n]
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Rotates `dir` by `angle` towards a random perpendicular direction.
fn deflect(dir: [f64; 3], angle: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let r: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let perp = normalize(cross(dir, r));
    let (s, c) = angle.sin_cos();
    normalize(std::array::from_fn(|i| c * dir[i] + s * perp[i]))
}

pub fn sample_tree(seed: u64, dims: [usize; 3], p: &TreeParams) -> Result<TubeTree> {
    if !(p.root_radius >= 1.0) {
        return Err(Error::Generation(format!(
            "root radius {} below one voxel",
            p.root_radius
        )));
    }
    if p.levels == 0 || p.steps_per_segment == 0 {
        return Err(Error::Generation("tree parameters produce no nodes".into()));
    }
    if !(p.step_length > 0.0) || !(0.0..=1.0).contains(&p.branch_prob) || p.tortuosity < 0.0 {
        return Err(Error::Generation(format!("invalid tree parameters {p:?}")));
    }
    if !(p.taper > 0.0 && p.taper < 1.0 && p.child_ratio > 0.0 && p.child_ratio < 1.0) {
        return Err(Error::Generation(
            "taper and child ratio must lie in (0, 1)".into(),
        ));
    }
    if dims.iter().any(|&d| d < 3) {
        return Err(Error::Generation(format!(
            "volume {dims:?} too small for a tree"
        )));
    }
    let mut rng = rng_for(seed, 0);
    let lo = [1.0; 3];
    let hi: [f64; 3] = std::array::from_fn(|i| dims[i] as f64 - 2.0);

    // Root enters near the z = 0 face heading inward.
    let start = [
        rng.random_range(lo[0]..=(hi[0] * 0.15).max(lo[0])),
        rng.random_range(dims[1] as f64 * 0.3..=dims[1] as f64 * 0.7),
        rng.random_range(dims[2] as f64 * 0.3..=dims[2] as f64 * 0.7),
    ];
    let dir0 = deflect([1.0, 0.0, 0.0], rng.random_range(0.0..0.4), &mut rng);
    let mut nodes = vec![TubeNode {
        pos: start,
        radius: p.root_radius,
    }];
    let mut edges = Vec::new();
    let noise = Normal::new(0.0, p.tortuosity.max(1e-300)).expect("finite sigma");

    // (parent node, direction, first radius, level)
    let mut pending = vec![(0usize, dir0, p.root_radius * p.taper, 1usize)];
    while let Some((parent, mut dir, mut radius, level)) = pending.pop() {
        let mut last = parent;
        for _ in 0..p.steps_per_segment {
            if p.tortuosity > 0.0 {
                dir = normalize(std::array::from_fn(|i| dir[i] + noise.sample(&mut rng)));
            }
            let from = nodes[last].pos;
            let mut next: [f64; 3] = std::array::from_fn(|i| from[i] + p.step_length * dir[i]);
            for i in 0..3 {
                if next[i] < lo[i] || next[i] > hi[i] {
                    dir[i] = -dir[i];
                    next[i] = (from[i] + p.step_length * dir[i]).clamp(lo[i], hi[i]);
                }
            }
            nodes.push(TubeNode { pos: next, radius });
            edges.push((last, nodes.len() - 1));
            last = nodes.len() - 1;
            radius *= p.taper;
        }
        if level < p.levels {
            let end_radius = nodes[last].radius * p.child_ratio;
            let children = if rng.random_bool(p.branch_prob) { 2 } else { 1 };
            // Push in reverse so the first child is expanded first.
            let mut kids = Vec::with_capacity(children);
            for _ in 0..children {
                let angle = if children == 2 {
                    rng.random_range(0.4..0.8)
                } else {
                    rng.random_range(0.0..0.3)
                };
                kids.push((last, deflect(dir, angle, &mut rng), end_radius, level + 1));
            }
            pending.extend(kids.into_iter().rev());
        }
    }
    Ok(TubeTree {
        nodes,
        edges,
        branching_levels: p.levels,
    })
}

/// Distance from `q` to the segment `a`-`b` and the clamped segment parameter.
fn segment_distance(q: [f64; 3], a: [f64; 3], b: [f64; 3]) -> (f64, f64) {
    let ab: [f64; 3] = std::array::from_fn(|i| b[i] - a[i]);
    let aq: [f64; 3] = std::array::from_fn(|i| q[i] - a[i]);
    let len2: f64 = ab.iter().map(|x| x * x).sum();
    let t = if len2 > 0.0 {
        (aq.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d2: f64 = (0..3).map(|i| (q[i] - (a[i] + t * ab[i])).powi(2)).sum();
    (d2.sqrt(), t)
}

/// Label mask plus centerline samples spaced half a voxel apart. A voxel
/// is foreground when its distance to some edge is within the radius
/// interpolated at the closest point; voxels holding a centerline sample
/// are always foreground.
pub fn rasterize(tree: &TubeTree, dims: [usize; 3]) -> Result<(Volume, Vec<[f64; 3]>)> {
    let [d, h, w] = dims;
    let mut mask = vec![0u8; d * h * w];
    let mut skeleton = Vec::new();
    for (e, &(pa, pb)) in tree.edges.iter().enumerate() {
        let (a, b) = (tree.nodes[pa], tree.nodes[pb]);
        let reach = a.radius.max(b.radius);
        let bound = |i: usize, ext: usize| {
            let lo = (a.pos[i].min(b.pos[i]) - reach).floor().max(0.0) as usize;
            let hi = ((a.pos[i].max(b.pos[i]) + reach).ceil().max(0.0) as usize).min(ext - 1);
            lo..=hi
        };
        for z in bound(0, d) {
            for y in bound(1, h) {
                for x in bound(2, w) {
                    let (dist, t) = segment_distance([z as f64, y as f64, x as f64], a.pos, b.pos);
                    if dist <= a.radius + t * (b.radius - a.radius) {
                        mask[(z * h + y) * w + x] = 1;
                    }
                }
            }
        }
        let len = segment_distance(a.pos, b.pos, b.pos).0;
        let samples = (len / 0.5).ceil().max(1.0) as usize;
        // Each edge owns its far endpoint; only the first edge adds the root.
        for s in usize::from(e > 0)..=samples {
            let t = s as f64 / samples as f64;
            let q: [f64; 3] = std::array::from_fn(|i| a.pos[i] + t * (b.pos[i] - a.pos[i]));
            let v: [usize; 3] =
                std::array::from_fn(|i| (q[i].round().max(0.0) as usize).min(dims[i] - 1));
            mask[(v[0] * h + v[1]) * w + v[2]] = 1;
            skeleton.push(q);
        }
    }
    Ok((Volume::label(dims, mask)?, skeleton))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub contrast: f64,
    pub noise_sigma: f64,
    /// Amplitude of the multiplicative low-frequency illumination field.
    pub bias_strength: f64,
    /// Gaussian point-spread sigma in voxels; 0 disables blurring.
    pub psf_sigma: f64,
    /// Extra brightness on centerline voxels, as a fraction of `contrast`.
    pub centerline_gain: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            contrast: 1.0,
            noise_sigma: 0.08,
            bias_strength: 0.2,
            psf_sigma: 0.6,
            centerline_gain: 0.0,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with zero boundary.
fn blur(data: &mut [f64], dims: [usize; 3], sigma: f64) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut tmp = vec![0.0; data.len()];
    for axis in 0..3 {
        let (n, st) = (dims[axis] as isize, strides[axis]);
        for (i, out) in tmp.iter_mut().enumerate() {
            let pos = ((i / st) % dims[axis]) as isize;
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let q = pos + j as isize - r;
                if (0..n).contains(&q) {
                    acc += kv * data[(i as isize + (q - pos) * st as isize) as usize];
                }
            }
            *out = acc;
        }
        data.copy_from_slice(&tmp);
    }
}

pub fn render_intensity(
    label: &Volume,
    skeleton: &[[f64; 3]],
    seed: u64,
    p: &RenderParams,
) -> Result<Volume> {
    let fields = [
        p.contrast,
        p.noise_sigma,
        p.bias_strength,
        p.psf_sigma,
        p.centerline_gain,
    ];
    if fields.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Generation(format!(
            "render parameters must be non-negative: {p:?}"
        )));
    }
    let labels = label
        .as_labels()
        .ok_or_else(|| Error::Validation("render_intensity needs a label volume".into()))?;
    let dims = label.dims;
    let [_, h, w] = dims;
    let mut rng = rng_for(seed, 1);
    let mut img: Vec<f64> = labels.iter().map(|&l| p.contrast * l as f64).collect();
    if p.centerline_gain > 0.0 {
        for q in skeleton {
            let v: [usize; 3] =
                std::array::from_fn(|i| (q[i].round().max(0.0) as usize).min(dims[i] - 1));
            img[(v[0] * h + v[1]) * w + v[2]] = p.contrast * (1.0 + p.centerline_gain);
        }
    }
    if p.bias_strength > 0.0 {
        // A few random low-frequency cosines, normalized to [-1, 1].
        let waves: Vec<([f64; 3], f64)> = (0..3)
            .map(|_| {
                let k = std::array::from_fn(|i| {
                    rng.random_range(0.5..1.5) * std::f64::consts::PI / dims[i] as f64
                });
                (k, rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        for (i, v) in img.iter_mut().enumerate() {
            let c = [(i / (h * w)) as f64, ((i / w) % h) as f64, (i % w) as f64];
            let f: f64 = waves
                .iter()
                .map(|(k, ph)| (k[0] * c[0] + k[1] * c[1] + k[2] * c[2] + ph).cos())
                .sum::<f64>()
                / waves.len() as f64;
            *v *= 1.0 + p.bias_strength * f;
        }
    }
    if p.psf_sigma > 0.0 {
        blur(&mut img, dims, p.psf_sigma);
    }
    if p.noise_sigma > 0.0 {
        let n = Normal::new(0.0, p.noise_sigma).expect("finite sigma");
        img.iter_mut().for_each(|v| *v += n.sample(&mut rng));
    }
    let out = img.into_iter().map(|v| v.max(0.0) as f32).collect();
    Ok(Volume::intensity(dims, out)?.with_spacing(label.spacing_um))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub tree: TreeParams,
    pub render: RenderParams,
    /// Accepted range of the label foreground fraction.
    pub foreground_band: (f64, f64),
    /// Tree resampling attempts before giving up on the band.
    pub max_attempts: usize,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            tree: TreeParams::default(),
            render: RenderParams::default(),
            foreground_band: (0.005, 0.10),
            max_attempts: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: Volume,
    pub label: Volume,
    pub skeleton: Vec<[f64; 3]>,
    pub tree: TubeTree,
}

pub fn foreground_fraction(label: &Volume) -> f64 {
    let l = label.as_labels().unwrap_or(&[]);
    l.iter().filter(|&&v| v != 0).count() as f64 / l.len().max(1) as f64
}

/// One phantom, fully determined by `seed`: trees are resampled until the
/// label foreground fraction falls inside the configured band.
pub fn generate(seed: u64, dims: [usize; 3], p: &PhantomParams) -> Result<Phantom> {
    let (lo, hi) = p.foreground_band;
    for attempt in 0..p.max_attempts.max(1) as u64 {
        let tree_seed = seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(attempt);
        let tree = sample_tree(tree_seed, dims, &p.tree)?;
        let (label, skeleton) = rasterize(&tree, dims)?;
        let f = foreground_fraction(&label);
        if f >= lo && f <= hi {
            let image = render_intensity(&label, &skeleton, seed, &p.render)?;
            return Ok(Phantom {
                image,
                label,
                skeleton,
                tree,
            });
        }
    }
    Err(Error::Generation(format!(
        "no tree within foreground band {lo}..{hi} after {} attempts",
        p.max_attempts
    )))
}
