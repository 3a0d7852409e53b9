use rand::Rng;
use rand_distr::{Distribution, Normal};
use vpbsd_tensor::{Bound, Graph, ParamId, ParamSet, Tensor, Var};

use super::{GN_EPS, SLOPE};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

/// Convolution with bias, optionally followed by group norm.
#[derive(Debug, Clone, Copy)]
pub struct ConvUnit {
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: Option<Norm>,
    pub kernel: usize,
}

impl ConvUnit {
    /// Registers `{name}.w`, `{name}.b` and, when `groups` is set,
    /// `{name}.gn.gamma`, `{name}.gn.beta`. Weights use fan-in Kaiming
    /// initialization, biases and shifts start at zero, scales at one.
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        groups: Option<usize>,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel * kernel) as f64;
        let std = (2.0 / ((1.0 + SLOPE * SLOPE) * fan_in)).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = c_out * c_in * kernel * kernel * kernel;
        let w: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        let shape = vec![c_out, c_in, kernel, kernel, kernel];
        let weight = ps.insert(
            format!("{name}.w"),
            Tensor::new(shape, w).expect("shape matches"),
        );
        let bias = ps.insert(format!("{name}.b"), Tensor::zeros([c_out]));
        let norm = groups.map(|groups| Norm {
            gamma: ps.insert(format!("{name}.gn.gamma"), Tensor::full([c_out], 1.0)),
            beta: ps.insert(format!("{name}.gn.beta"), Tensor::zeros([c_out])),
            groups,
        });
        Self {
            weight,
            bias,
            norm,
            kernel,
        }
    }

    /// Convolution (same padding) and group norm, no activation.
    pub fn linear(&self, g: &mut Graph, b: &Bound, x: Var, stride: usize) -> Result<Var> {
        let y = g.conv3(
            x,
            b[self.weight],
            Some(b[self.bias]),
            stride,
            self.kernel / 2,
        )?;
        Ok(match self.norm {
            Some(n) => g.group_norm(y, n.groups, b[n.gamma], b[n.beta], GN_EPS)?,
            None => y,
        })
    }

    /// Convolution, group norm and leaky ReLU.
    pub fn act(&self, g: &mut Graph, b: &Bound, x: Var, stride: usize) -> Result<Var> {
        let y = self.linear(g, b, x, stride)?;
        Ok(g.leaky_relu(y, SLOPE)?)
    }
}
