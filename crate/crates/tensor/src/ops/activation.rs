use crate::error::{check_rank, config, Result};
use crate::graph::{accumulate, Graph, Node, Op, Var};

impl Graph {
    /// `x` for `x >= 0`, `slope * x` otherwise. The derivative at exactly 0
    /// is taken as `slope`.
    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope <= 1.0) {
            return Err(config(
                "leaky_relu",
                format!("slope {slope} outside (0, 1]"),
            ));
        }
        let n = &self.nodes[input.0];
        let out = n
            .data
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let shape = n.shape.clone();
        Ok(self.push(
            shape,
            out,
            Op::LeakyRelu {
                input: input.0,
                slope,
            },
            &[input.0],
        ))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let n = &self.nodes[input.0];
        let out = n.data.iter().map(|&v| sigmoid(v)).collect();
        let shape = n.shape.clone();
        self.push(shape, out, Op::Sigmoid(input.0), &[input.0])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(config(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = &self.nodes[input.0].data;
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                input: input.0,
                axis,
            },
            &[input.0],
        ))
    }

    /// Nearest-neighbour upsampling of `[B, C, D, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        check_rank("upsample_nearest", &shape, 5)?;
        if factor == 0 {
            return Err(config("upsample_nearest", "factor must be at least 1"));
        }
        let [b, c, d, h, w] = [shape[0], shape[1], shape[2], shape[3], shape[4]];
        let (od, oh, ow) = (d * factor, h * factor, w * factor);
        let x = &self.nodes[input.0].data;
        let mut out = vec![0.0; b * c * od * oh * ow];
        for bc in 0..b * c {
            let src = &x[bc * d * h * w..(bc + 1) * d * h * w];
            let dst = &mut out[bc * od * oh * ow..(bc + 1) * od * oh * ow];
            for z in 0..od {
                for y in 0..oh {
                    let row = ((z / factor) * h + y / factor) * w;
                    let drow = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                    for (xo, v) in drow.iter_mut().enumerate() {
                        *v = src[row + xo / factor];
                    }
                }
            }
        }
        Ok(self.push(
            vec![b, c, od, oh, ow],
            out,
            Op::UpsampleNearest {
                input: input.0,
                factor,
            },
            &[input.0],
        ))
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn backward(
    nodes: &[Node],
    out_id: usize,
    gout: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let out = &nodes[out_id];
    match out.op {
        Op::LeakyRelu { input, slope } => {
            let x = &nodes[input].data;
            accumulate(nodes, grads, input, |d| {
                for ((d, &g), &v) in d.iter_mut().zip(gout).zip(x) {
                    *d += if v > 0.0 { g } else { slope * g };
                }
            });
        }
        Op::Sigmoid(input) => {
            let y = &out.data;
            accumulate(nodes, grads, input, |d| {
                for ((d, &g), &s) in d.iter_mut().zip(gout).zip(y) {
                    *d += g * s * (1.0 - s);
                }
            });
        }
        Op::Softmax { input, axis } => {
            let (outer, len, inner) = split_axis(&out.shape, axis);
            let y = &out.data;
            accumulate(nodes, grads, input, |d| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| gout[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            d[at(j)] += y[at(j)] * (gout[at(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::UpsampleNearest { input, factor } => {
            let s = &nodes[input].shape;
            let [b, c, d, h, w] = [s[0], s[1], s[2], s[3], s[4]];
            let (od, oh, ow) = (d * factor, h * factor, w * factor);
            accumulate(nodes, grads, input, |dx| {
                for bc in 0..b * c {
                    let src = &gout[bc * od * oh * ow..(bc + 1) * od * oh * ow];
                    let dst = &mut dx[bc * d * h * w..(bc + 1) * d * h * w];
                    for z in 0..od {
                        for y in 0..oh {
                            let row = ((z / factor) * h + y / factor) * w;
                            let srow = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            for (xo, g) in srow.iter().enumerate() {
                                dst[row + xo / factor] += g;
                            }
                        }
                    }
                }
            });
        }
        _ => unreachable!(),
    }
}
