//! Vessel-pattern codebook: channel alignment between teacher and student
//! widths, Gumbel-Softmax quantization with straight-through gradients, the
//! codebook loss and usage diagnostics.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vpbsd_tensor::{squared_distance, Bound, Graph, ParamId, ParamSet, Tensor, Var};

use crate::error::{Error, Result};
use crate::networks::ConvUnit;

pub const CODEBOOK_PARAM: &str = "codebook.v";
pub const ALIGN_PREFIX: &str = "align.";

/// 1×1×1 convolutions mapping the teacher bottleneck width `d_t` to the
/// codebook width `d_s` and back.
pub struct AlignmentPair {
    pub params: ParamSet,
    pub d_t: usize,
    pub d_s: usize,
    down: ConvUnit,
    up: ConvUnit,
}

impl AlignmentPair {
    pub fn new(d_t: usize, d_s: usize, seed: u64) -> Result<Self> {
        if d_t == 0 || d_s == 0 {
            return Err(Error::Config(format!(
                "alignment widths {d_t} -> {d_s} must be positive"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let down = ConvUnit::new(&mut params, &mut rng, "align.down", d_t, d_s, 1, None);
        let up = ConvUnit::new(&mut params, &mut rng, "align.up", d_s, d_t, 1, None);
        Ok(Self {
            params,
            d_t,
            d_s,
            down,
            up,
        })
    }

    pub fn down(&self, g: &mut Graph, b: &Bound, z: Var) -> Result<Var> {
        self.down.linear(g, b, z, 1)
    }

    pub fn up(&self, g: &mut Graph, b: &Bound, zq: Var) -> Result<Var> {
        self.up.linear(g, b, zq, 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookInit {
    Uniform,
    KmeansWarmstart,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuantMode {
    /// Gumbel-perturbed hard selection; gradients follow the tempered softmax.
    GumbelTrain { noise: bool },
    /// Nearest code.
    ArgmaxEval,
    /// Nearest code with the identity straight-through estimator, the
    /// classic VQ training rule. Kept as an ablation of Gumbel selection.
    HardTrain,
}

/// `N × M` table of code vectors plus usage statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub params: ParamSet,
    pub usage: Vec<u64>,
    pub temperature: f64,
    id: ParamId,
}

pub struct Quantized {
    /// Quantized features with the input's `[B, M, spatial...]` layout.
    pub z_q: Var,
    /// Input features flattened to `[P, M]` rows.
    pub rows: Var,
    /// Quantized rows `[P, M]`.
    pub rows_q: Var,
    /// Straight-through one-hot selection `[P, N]`; `None` for nearest-code modes.
    pub one_hot: Option<Var>,
    pub codes: Vec<usize>,
}

pub struct CodebookLoss {
    pub total: Var,
    /// `‖sg[z] − v‖²`, reaches only the code vectors.
    pub codebook: Var,
    /// `‖z − sg[v]‖²`, reaches only the features.
    pub commitment: Var,
}

impl Codebook {
    pub fn from_entries(n: usize, m: usize, entries: Vec<f64>, temperature: f64) -> Result<Self> {
        if n < 2 || m == 0 {
            return Err(Error::Config(format!(
                "codebook needs at least 2 codes of positive width, got {n}x{m}"
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("codebook entries must be finite".into()));
        }
        let mut params = ParamSet::new();
        let id = params.insert(CODEBOOK_PARAM, Tensor::new([n, m], entries)?);
        Ok(Self {
            params,
            usage: vec![0; n],
            temperature,
            id,
        })
    }

    /// Rebuilds a codebook around a stored parameter set.
    pub fn from_params(params: ParamSet, usage: Vec<u64>, temperature: f64) -> Result<Self> {
        let id = params
            .id(CODEBOOK_PARAM)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {CODEBOOK_PARAM}")))?;
        let shape = params.get(id).shape();
        if shape.len() != 2 || shape[0] < 2 || usage.len() != shape[0] {
            return Err(Error::Checkpoint(format!(
                "codebook shape {shape:?} with {} usage counters",
                usage.len()
            )));
        }
        Ok(Self {
            params,
            usage,
            temperature,
            id,
        })
    }

    pub fn len(&self) -> usize {
        self.params.get(self.id).shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.params.get(self.id).shape()[1]
    }

    pub fn entries(&self) -> &[f64] {
        self.params.get(self.id).data()
    }

    pub fn entry(&self, j: usize) -> &[f64] {
        let m = self.dim();
        &self.entries()[j * m..(j + 1) * m]
    }

    /// Handle of the code table inside a graph bound from `self.params`.
    pub fn table(&self, b: &Bound) -> Var {
        b[self.id]
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|c| *c = 0);
    }

    pub fn perplexity(&self) -> f64 {
        code_perplexity(&self.usage)
    }

    /// Index of the nearest code; ties resolve to the lowest index.
    pub fn nearest(&self, z: &[f64]) -> usize {
        nearest_row(self.entries(), self.dim(), z)
    }

    /// Quantizes `z [B, M, spatial...]` against the bound table `table`.
    pub fn quantize(
        &mut self,
        g: &mut Graph,
        table: Var,
        z: Var,
        mode: QuantMode,
        rng: &mut impl Rng,
    ) -> Result<Quantized> {
        let (n, m) = (self.len(), self.dim());
        let shape = g.shape(z).to_vec();
        if shape.len() < 3 || shape[1] != m {
            return Err(Error::Validation(format!(
                "quantizer expects [B, {m}, spatial...], got {shape:?}"
            )));
        }
        let spatial = shape[2..].to_vec();
        let tokens = g.channels_to_tokens(z)?;
        let p = shape[0] * spatial.iter().product::<usize>();
        let rows = g.reshape(tokens, [p, m])?;
        let frozen = g.detach(table);

        let (rows_q, one_hot, codes) = match mode {
            QuantMode::GumbelTrain { noise } => {
                if !(self.temperature > 0.0) {
                    return Err(Error::Config(format!(
                        "Gumbel temperature {} must be positive",
                        self.temperature
                    )));
                }
                let d = g.sq_dist(rows, frozen)?;
                let mut logits = g.scale(d, -1.0);
                if noise {
                    let gum: Vec<f64> = (0..p * n).map(|_| gumbel(rng)).collect();
                    let gv = g.constant([p, n], gum)?;
                    logits = g.add(logits, gv)?;
                }
                let codes = row_argmax(g.value(logits), n);
                let tempered = g.scale(logits, 1.0 / self.temperature);
                let soft = g.softmax(tempered, 1)?;
                let mut hard = vec![0.0; p * n];
                codes
                    .iter()
                    .enumerate()
                    .for_each(|(i, &c)| hard[i * n + c] = 1.0);
                let oh = g.straight_through(soft, hard)?;
                (g.matmul(oh, frozen)?, Some(oh), codes)
            }
            QuantMode::ArgmaxEval | QuantMode::HardTrain => {
                let codes: Vec<usize> = g
                    .value(rows)
                    .chunks(m)
                    .map(|r| nearest_row(self.entries(), m, r))
                    .collect();
                let lookup = g.gather_rows(frozen, &codes)?;
                let vals = g.value(lookup).to_vec();
                (g.straight_through(rows, vals)?, None, codes)
            }
        };
        for &c in &codes {
            self.usage[c] += 1;
        }
        let t = g.reshape(rows_q, [shape[0], p / shape[0], m])?;
        let z_q = g.tokens_to_channels(t, &spatial)?;
        Ok(Quantized {
            z_q,
            rows,
            rows_q,
            one_hot,
            codes,
        })
    }
}

/// Mean over voxels of `‖sg[z] − v_c‖² + λ‖z − sg[v_c]‖²`.
pub fn codebook_loss(
    g: &mut Graph,
    table: Var,
    q: &Quantized,
    lambda: f64,
) -> Result<CodebookLoss> {
    let m = g.shape(q.rows)[1] as f64;
    let looked = g.gather_rows(table, &q.codes)?;
    let z_sg = g.detach(q.rows);
    let d1 = g.sub(z_sg, looked)?;
    let s1 = g.square(d1);
    let mean1 = g.mean(s1);
    let codebook = g.scale(mean1, m);
    let v_sg = g.detach(looked);
    let d2 = g.sub(q.rows, v_sg)?;
    let s2 = g.square(d2);
    let mean2 = g.mean(s2);
    let commitment = g.scale(mean2, m);
    let weighted = g.scale(commitment, lambda);
    let total = g.add(codebook, weighted)?;
    Ok(CodebookLoss {
        total,
        codebook,
        commitment,
    })
}

/// `exp` of the entropy of the empirical code distribution; 1 for a single
/// code, `N` for uniform usage, 0 for an empty window.
pub fn code_perplexity(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

pub fn usage_histogram(codes: &[usize], n: usize) -> Vec<u64> {
    let mut h = vec![0; n];
    codes.iter().for_each(|&c| h[c] += 1);
    h
}

/// `N` codes of width `M`. `features` (rows of width `M`) is required for
/// the k-means warm start and ignored otherwise.
pub fn init_codebook(
    seed: u64,
    n: usize,
    m: usize,
    strategy: CodebookInit,
    features: Option<&[f64]>,
    temperature: f64,
) -> Result<Codebook> {
    if n < 2 {
        return Err(Error::Config(format!(
            "codebook size {n} must be at least 2"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / n as f64;
    let entries = match strategy {
        CodebookInit::Uniform => (0..n * m)
            .map(|_| rng.random_range(-bound..bound))
            .collect(),
        CodebookInit::KmeansWarmstart => {
            let f = features
                .ok_or_else(|| Error::Config("k-means warm start needs features".into()))?;
            if m == 0 || f.is_empty() || f.len() % m != 0 {
                return Err(Error::Validation(format!(
                    "{} feature values do not form rows of width {m}",
                    f.len()
                )));
            }
            kmeans(f, m, n, KMEANS_ITERS, &mut rng)
        }
    };
    Codebook::from_entries(n, m, entries, temperature)
}

pub const KMEANS_ITERS: usize = 25;

/// Lloyd iterations from a k-means++ seeding. When there are fewer
/// distinct rows than centroids the remainder start as jittered copies.
/// Empty clusters keep their previous centroid.
pub fn kmeans(rows: &[f64], m: usize, k: usize, iters: usize, rng: &mut impl Rng) -> Vec<f64> {
    let p = rows.len() / m;
    let row = |i: usize| &rows[i * m..(i + 1) * m];
    let mut cent: Vec<f64> = Vec::with_capacity(k * m);
    let first = rng.random_range(0..p);
    cent.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..p)
        .map(|i| squared_distance(row(i), row(first)))
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            d2.iter()
                .position(|&d| {
                    r -= d;
                    r < 0.0
                })
                .unwrap_or(p - 1)
        } else {
            sample(rng, p, 1).index(0)
        };
        let start = cent.len();
        cent.extend_from_slice(row(pick));
        if total <= 0.0 {
            let jitter = 1e-3;
            cent[start..]
                .iter_mut()
                .for_each(|c| *c += rng.random_range(-jitter..jitter));
        }
        let c = cent[start..].to_vec();
        d2.iter_mut()
            .enumerate()
            .for_each(|(i, d)| *d = d.min(squared_distance(row(i), &c)));
    }
    let mut assign = vec![0; p];
    for _ in 0..iters {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = nearest_row(&cent, m, row(i));
        }
        let mut sums = vec![0.0; k * m];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            sums[a * m..(a + 1) * m]
                .iter_mut()
                .zip(row(i))
                .for_each(|(s, v)| *s += v);
        }
        for j in 0..k {
            if counts[j] > 0 {
                for t in 0..m {
                    cent[j * m + t] = sums[j * m + t] / counts[j] as f64;
                }
            }
        }
    }
    cent
}

fn nearest_row(table: &[f64], m: usize, z: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, v) in table.chunks(m).enumerate() {
        let d = squared_distance(z, v);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

fn row_argmax(values: &[f64], n: usize) -> Vec<usize> {
    values
        .chunks(n)
        .map(|r| {
            let mut best = 0;
            for (j, &x) in r.iter().enumerate() {
                if x > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn gumbel(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    -(-u.ln()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_book(values: &[f64]) -> Codebook {
        Codebook::from_entries(values.len(), 1, values.to_vec(), 1.0).unwrap()
    }

    fn quantize_rows(cb: &mut Codebook, rows: &[f64], mode: QuantMode) -> (Vec<usize>, Vec<f64>) {
        let m = cb.dim();
        let p = rows.len() / m;
        let mut g = Graph::new();
        let b = cb.params.bind(&mut g);
        let t = cb.table(&b);
        let z = g.constant([1, m, p, 1, 1], channel_major(rows, m)).unwrap();
        let q = cb
            .quantize(&mut g, t, z, mode, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        (q.codes.clone(), g.value(q.rows_q).to_vec())
    }

    /// `[P, M]` rows into `[M, P]` channel-major order.
    fn channel_major(rows: &[f64], m: usize) -> Vec<f64> {
        let p = rows.len() / m;
        (0..m)
            .flat_map(|c| (0..p).map(move |i| rows[i * m + c]))
            .collect()
    }

    #[test]
    fn exact_match_selects_that_code() {
        let mut cb = init_codebook(1, 8, 3, CodebookInit::Uniform, None, 1.0).unwrap();
        let v3 = cb.entry(3).to_vec();
        let (codes, zq) = quantize_rows(&mut cb, &v3, QuantMode::ArgmaxEval);
        assert_eq!(codes, vec![3]);
        assert_eq!(zq, v3);
        assert_eq!(cb.usage[3], 1);
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let mut cb = scalar_book(&[-1.0, 1.0, 1.0]);
        let (codes, _) = quantize_rows(&mut cb, &[0.0, 1.0], QuantMode::ArgmaxEval);
        assert_eq!(codes, vec![0, 1]);
    }

    #[test]
    fn cold_temperature_matches_nearest() {
        let mut cb = init_codebook(4, 16, 4, CodebookInit::Uniform, None, 1e-4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<f64> = (0..40).map(|_| rng.random_range(-0.1..0.1)).collect();
        let (a, _) = quantize_rows(&mut cb, &rows, QuantMode::ArgmaxEval);
        let (b, zq) = quantize_rows(&mut cb, &rows, QuantMode::GumbelTrain { noise: false });
        assert_eq!(a, b);
        for (i, &c) in b.iter().enumerate() {
            assert_eq!(&zq[i * 4..(i + 1) * 4], cb.entry(c));
        }
    }

    #[test]
    fn scalar_loss_by_hand() {
        let mut cb = scalar_book(&[0.0, 5.0]);
        let mut g = Graph::new();
        let b = cb.params.bind(&mut g);
        let t = cb.table(&b);
        let z = g.constant([1, 1, 1, 1, 1], vec![1.0]).unwrap();
        let q = cb
            .quantize(
                &mut g,
                t,
                z,
                QuantMode::ArgmaxEval,
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
        let l = codebook_loss(&mut g, t, &q, 0.25).unwrap();
        assert_eq!(g.item(l.total), 1.25);
    }

    #[test]
    fn perplexity_values() {
        assert_eq!(code_perplexity(&[0, 12, 0]), 1.0);
        assert!((code_perplexity(&[3; 8]) - 8.0).abs() < 1e-12);
        let h: f64 = -(0.5f64 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert!((code_perplexity(&[2, 1, 1, 0, 0]) - h.exp()).abs() < 1e-12);
        assert!((h.exp() - 2.0f64.powf(1.5)).abs() < 1e-12);
    }

    #[test]
    fn uniform_init_bounds_and_determinism() {
        let a = init_codebook(5, 64, 8, CodebookInit::Uniform, None, 1.0).unwrap();
        let b = init_codebook(5, 64, 8, CodebookInit::Uniform, None, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(a.entries().iter().all(|v| v.abs() <= 1.0 / 64.0));
        assert!(init_codebook(5, 1, 8, CodebookInit::Uniform, None, 1.0).is_err());
    }

    #[test]
    fn kmeans_recovers_cluster_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rows = Vec::new();
        let (mut s0, mut s1) = ([0.0; 2], [0.0; 2]);
        for i in 0..60 {
            let c = if i % 2 == 0 { -10.0 } else { 10.0 };
            let p = [
                c + rng.random_range(-1.0..1.0),
                c + rng.random_range(-1.0..1.0),
            ];
            let s = if i % 2 == 0 { &mut s0 } else { &mut s1 };
            s[0] += p[0] / 30.0;
            s[1] += p[1] / 30.0;
            rows.extend_from_slice(&p);
        }
        let cb = init_codebook(3, 2, 2, CodebookInit::KmeansWarmstart, Some(&rows), 1.0).unwrap();
        let (lo, hi) = if cb.entry(0)[0] < 0.0 { (0, 1) } else { (1, 0) };
        for t in 0..2 {
            assert!((cb.entry(lo)[t] - s0[t]).abs() < 1e-6);
            assert!((cb.entry(hi)[t] - s1[t]).abs() < 1e-6);
        }
    }

    #[test]
    fn alignment_identity_and_shape() {
        let mut a = AlignmentPair::new(3, 3, 0).unwrap();
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        a.params.assign("align.down.w", &eye).unwrap();
        let mut g = Graph::new();
        let b = a.params.bind(&mut g);
        let data: Vec<f64> = (0..3 * 8).map(|i| i as f64 * 0.1).collect();
        let x = g.constant([1, 3, 2, 2, 2], data.clone()).unwrap();
        let y = a.down(&mut g, &b, x).unwrap();
        assert_eq!(g.value(y), &data[..]);
        let u = a.up(&mut g, &b, y).unwrap();
        assert_eq!(g.shape(u), &[1, 3, 2, 2, 2]);
    }
}
