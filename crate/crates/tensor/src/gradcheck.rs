//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values on fresh graphs, so it
//! stays independent of the backward rules it is checking.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Relative error floor: gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    /// Analytic and numeric derivative at the worst element.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares backward gradients of the scalar `f(inputs)` with central
/// differences of step `h` for every element of every input.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.variable(t.shape().to_vec(), t.data().to_vec()))
        .collect::<Result<_>>()?;
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed
            .iter()
            .map(|t| g.constant(t.shape().to_vec(), t.data().to_vec()))
            .collect::<Result<_>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.item(out))
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic[i][j], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, j);
                report.worst_values = (analytic[i][j], numeric);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
