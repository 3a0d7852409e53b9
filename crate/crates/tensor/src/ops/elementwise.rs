use crate::error::{check_dim, Result, TensorError};
use crate::graph::{accumulate, Graph, Node, Op, Var};

impl Graph {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(TensorError::Rank {
                op,
                expected: sa.len(),
                shape: sb.to_vec(),
            });
        }
        for (i, (&x, &y)) in sa.iter().zip(sb).enumerate() {
            check_dim(op, AXES.get(i).copied().unwrap_or("trailing"), x, y)?;
        }
        Ok(sa.to_vec())
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        node: Op,
    ) -> Result<Var> {
        let shape = self.same_shape(op, a, b)?;
        let (x, y) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let out = x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect();
        Ok(self.push(shape, out, node, &[a.0, b.0]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, node: Op) -> Var {
        let n = &self.nodes[a.0];
        let out = n.data.iter().map(|&v| f(v)).collect();
        let shape = n.shape.clone();
        self.push(shape, out, node, &[a.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |p, q| p / q, Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |v| v * c, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |v| v + c, Op::AddScalar(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a.0))
    }

    /// `|x|`; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].data.iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = &self.nodes[a.0].data;
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Vec::new(), vec![m], Op::Mean(a.0), &[a.0])
    }
}

const AXES: [&str; 5] = ["batch", "channel", "depth", "height", "width"];

fn add_into(d: &mut [f64], g: &[f64], c: f64) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
}

pub(crate) fn backward(
    nodes: &[Node],
    out_id: usize,
    gout: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    match nodes[out_id].op {
        Op::Add(a, b) => {
            accumulate(nodes, grads, a, |d| add_into(d, gout, 1.0));
            accumulate(nodes, grads, b, |d| add_into(d, gout, 1.0));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, a, |d| add_into(d, gout, 1.0));
            accumulate(nodes, grads, b, |d| add_into(d, gout, -1.0));
        }
        Op::Mul(a, b) => {
            let (x, y) = (&nodes[a].data, &nodes[b].data);
            accumulate(nodes, grads, a, |d| {
                for ((d, g), y) in d.iter_mut().zip(gout).zip(y) {
                    *d += g * y;
                }
            });
            accumulate(nodes, grads, b, |d| {
                for ((d, g), x) in d.iter_mut().zip(gout).zip(x) {
                    *d += g * x;
                }
            });
        }
        Op::Div(a, b) => {
            let (x, y) = (&nodes[a].data, &nodes[b].data);
            accumulate(nodes, grads, a, |d| {
                for ((d, g), y) in d.iter_mut().zip(gout).zip(y) {
                    *d += g / y;
                }
            });
            accumulate(nodes, grads, b, |d| {
                for (((d, g), x), y) in d.iter_mut().zip(gout).zip(x).zip(y) {
                    *d -= g * x / (y * y);
                }
            });
        }
        Op::Scale(a, c) => accumulate(nodes, grads, a, |d| add_into(d, gout, c)),
        Op::AddScalar(a) => accumulate(nodes, grads, a, |d| add_into(d, gout, 1.0)),
        Op::Square(a) => {
            let x = &nodes[a].data;
            accumulate(nodes, grads, a, |d| {
                for ((d, g), x) in d.iter_mut().zip(gout).zip(x) {
                    *d += 2.0 * g * x;
                }
            });
        }
        Op::Abs(a) => {
            let x = &nodes[a].data;
            accumulate(nodes, grads, a, |d| {
                for ((d, g), &x) in d.iter_mut().zip(gout).zip(x) {
                    if x > 0.0 {
                        *d += g;
                    } else if x < 0.0 {
                        *d -= g;
                    }
                }
            });
        }
        Op::Sum(a) => {
            let g = gout[0];
            accumulate(nodes, grads, a, |d| d.iter_mut().for_each(|d| *d += g));
        }
        Op::Mean(a) => {
            let g = gout[0] / nodes[a].data.len() as f64;
            accumulate(nodes, grads, a, |d| d.iter_mut().for_each(|d| *d += g));
        }
        _ => unreachable!(),
    }
}
