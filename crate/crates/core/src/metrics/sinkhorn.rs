//! Entropic optimal transport between uniform point clouds.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornParams {
    /// Entropic regularization, in squared voxel units.
    pub epsilon: f64,
    pub max_iter: usize,
    /// Stop once the L1 row-marginal violation falls below this.
    pub tol: f64,
    /// Clouds above this size are subsampled with a uniform stride.
    pub max_points: usize,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            max_iter: 500,
            tol: 1e-6,
            max_points: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transport {
    /// `<P, C>` for the final plan.
    pub cost: f64,
    /// Dual objective `<a, f> + <b, g>`, the entropic transport value.
    pub dual: f64,
    pub converged: bool,
    pub iterations: usize,
}

const ANNEAL_FACTOR: f64 = 0.5;
const ANNEAL_SWEEPS: usize = 20;

/// Every `ceil(n / max)`-th point, so at most `max` remain.
pub fn subsample(points: &[[f64; 3]], max: usize) -> Vec<[f64; 3]> {
    if points.len() <= max || max == 0 {
        return points.to_vec();
    }
    let stride = points.len().div_ceil(max);
    points.iter().step_by(stride).copied().collect()
}

fn logsumexp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn with squared Euclidean ground cost. Both clouds
/// must be non-empty and `epsilon > 0`.
pub fn sinkhorn(a: &[[f64; 3]], b: &[[f64; 3]], p: &SinkhornParams) -> Transport {
    assert!(
        !a.is_empty() && !b.is_empty(),
        "sinkhorn needs non-empty clouds"
    );
    assert!(p.epsilon > 0.0, "epsilon must be positive");
    let a = subsample(a, p.max_points);
    let b = subsample(b, p.max_points);
    let (n, m) = (a.len(), b.len());
    let cost: Vec<f64> = a
        .iter()
        .flat_map(|x| {
            b.iter()
                .map(move |y| (0..3).map(|k| (x[k] - y[k]).powi(2)).sum::<f64>())
        })
        .collect();
    let (log_a, log_b) = (-(n as f64).ln(), -(m as f64).ln());
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    // One pair of dual updates at `eps`; returns the L1 row-marginal
    // violation (columns are exact after the g update).
    let sweep = |eps: f64, f: &mut [f64], g: &mut [f64]| -> f64 {
        for i in 0..n {
            let row = &cost[i * m..(i + 1) * m];
            f[i] = eps * log_a - eps * logsumexp((0..m).map(|j| (g[j] - row[j]) / eps));
        }
        for j in 0..m {
            g[j] = eps * log_b - eps * logsumexp((0..n).map(|i| (f[i] - cost[i * m + j]) / eps));
        }
        (0..n)
            .map(|i| {
                let r: f64 = (0..m)
                    .map(|j| ((f[i] + g[j] - cost[i * m + j]) / eps).exp())
                    .sum();
                (r - 1.0 / n as f64).abs()
            })
            .sum()
    };
    let eps = p.epsilon;
    let mut converged = false;
    let mut iterations = 0;
    // Anneal from the cost scale down to the target, warm-starting the
    // potentials; small targets barely move from a cold start.
    let c_max = cost.iter().cloned().fold(0.0, f64::max);
    let mut stage = c_max.max(eps);
    while stage > eps && iterations < p.max_iter {
        for _ in 0..ANNEAL_SWEEPS.min(p.max_iter - iterations) {
            iterations += 1;
            if sweep(stage, &mut f, &mut g) < p.tol {
                break;
            }
        }
        stage = (stage * ANNEAL_FACTOR).max(eps);
    }
    while iterations < p.max_iter {
        iterations += 1;
        if sweep(eps, &mut f, &mut g) < p.tol {
            converged = true;
            break;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let c = cost[i * m + j];
            total += ((f[i] + g[j] - c) / eps).exp() * c;
        }
    }
    let dual = f.iter().sum::<f64>() / n as f64 + g.iter().sum::<f64>() / m as f64;
    Transport {
        cost: total,
        dual,
        converged,
        iterations,
    }
}

/// Debiased entropic transport `OT(a, b) - (OT(a, a) + OT(b, b)) / 2`,
/// zero for identical clouds and tending to exact transport as epsilon
/// shrinks. The `converged` flag covers all three solves.
pub fn sinkhorn_divergence(a: &[[f64; 3]], b: &[[f64; 3]], p: &SinkhornParams) -> Transport {
    let ab = sinkhorn(a, b, p);
    let aa = sinkhorn(a, a, p);
    let bb = sinkhorn(b, b, p);
    let value = (ab.dual - 0.5 * (aa.dual + bb.dual)).max(0.0);
    Transport {
        cost: value,
        dual: value,
        converged: ab.converged && aa.converged && bb.converged,
        iterations: ab.iterations + aa.iterations + bb.iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_points_pay_squared_distance() {
        let t = sinkhorn(
            &[[0.0, 0.0, 0.0]],
            &[[3.0, 4.0, 0.0]],
            &SinkhornParams::default(),
        );
        assert!((t.cost - 25.0).abs() < 1e-12);
        assert!(t.converged);
    }

    #[test]
    fn identical_clouds_cost_nearly_nothing() {
        let pts: Vec<[f64; 3]> = (0..10).map(|i| [i as f64 * 3.0, 0.0, 0.0]).collect();
        let t = sinkhorn(
            &pts,
            &pts,
            &SinkhornParams {
                epsilon: 0.1,
                ..Default::default()
            },
        );
        assert!(t.cost < 1e-6, "{}", t.cost);
        let d = sinkhorn_divergence(&pts, &pts, &SinkhornParams::default());
        assert_eq!(d.cost, 0.0);
    }

    #[test]
    fn divergence_of_single_points_is_squared_distance() {
        let d = sinkhorn_divergence(&[[0.0; 3]], &[[0.0, 2.0, 0.0]], &SinkhornParams::default());
        assert!((d.cost - 4.0).abs() < 1e-12, "{}", d.cost);
    }

    #[test]
    fn subsampling_bounds_size() {
        let pts: Vec<[f64; 3]> = (0..4999).map(|i| [i as f64, 0.0, 0.0]).collect();
        let s = subsample(&pts, 2000);
        assert!(s.len() <= 2000);
        assert_eq!(s[1][0], 3.0);
    }
}
