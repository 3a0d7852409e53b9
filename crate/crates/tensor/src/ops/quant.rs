//! Primitives behind vector quantization: pairwise distances, row lookup and
//! the straight-through identity.

use crate::error::{check_dim, check_rank, Result, TensorError};
use crate::graph::{accumulate, Graph, Node, Op, Var};

impl Graph {
    /// Squared Euclidean distances `[P, N]` between rows of `z [P, M]` and
    /// rows of `v [N, M]`, summed coordinate by coordinate in index order.
    pub fn sq_dist(&mut self, z: Var, v: Var) -> Result<Var> {
        const OP: &str = "sq_dist";
        let sz = self.shape(z).to_vec();
        let sv = self.shape(v).to_vec();
        check_rank(OP, &sz, 2)?;
        check_rank(OP, &sv, 2)?;
        check_dim(OP, "embedding", sv[1], sz[1])?;
        let (p, n, m) = (sz[0], sv[0], sz[1]);
        let (zd, vd) = (&self.nodes[z.0].data, &self.nodes[v.0].data);
        let mut out = vec![0.0; p * n];
        for i in 0..p {
            let zi = &zd[i * m..(i + 1) * m];
            for j in 0..n {
                out[i * n + j] = squared_distance(zi, &vd[j * m..(j + 1) * m]);
            }
        }
        Ok(self.push(vec![p, n], out, Op::SqDist { z: z.0, v: v.0 }, &[z.0, v.0]))
    }

    /// Rows `table[index[i]]`, stacked into `[P, M]`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        check_rank("gather_rows", &st, 2)?;
        let (rows, m) = (st[0], st[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Contract(format!(
                "row {bad} out of range for {rows} rows"
            )));
        }
        let t = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(index.len() * m);
        for &i in index {
            out.extend_from_slice(&t[i * m..(i + 1) * m]);
        }
        Ok(self.push(
            vec![index.len(), m],
            out,
            Op::GatherRows {
                table: table.0,
                index: index.to_vec(),
            },
            &[table.0],
        ))
    }

    /// Forward value `hard`, backward gradient routed to `soft` unchanged:
    /// `hard + soft - sg[soft]`.
    pub fn straight_through(&mut self, soft: Var, hard: Vec<f64>) -> Result<Var> {
        let shape = self.shape(soft).to_vec();
        if hard.len() != self.nodes[soft.0].data.len() {
            return Err(TensorError::Contract(format!(
                "straight-through value of length {} for shape {shape:?}",
                hard.len()
            )));
        }
        Ok(self.push(shape, hard, Op::StraightThrough { soft: soft.0 }, &[soft.0]))
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn backward(
    nodes: &[Node],
    out_id: usize,
    gout: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    match nodes[out_id].op {
        Op::SqDist { z, v } => {
            let (zd, vd) = (&nodes[z].data, &nodes[v].data);
            let m = nodes[z].shape[1];
            let (p, n) = (nodes[z].shape[0], nodes[v].shape[0]);
            accumulate(nodes, grads, z, |dz| {
                for i in 0..p {
                    for j in 0..n {
                        let g = 2.0 * gout[i * n + j];
                        for k in 0..m {
                            dz[i * m + k] += g * (zd[i * m + k] - vd[j * m + k]);
                        }
                    }
                }
            });
            accumulate(nodes, grads, v, |dv| {
                for i in 0..p {
                    for j in 0..n {
                        let g = 2.0 * gout[i * n + j];
                        for k in 0..m {
                            dv[j * m + k] += g * (vd[j * m + k] - zd[i * m + k]);
                        }
                    }
                }
            });
        }
        Op::GatherRows { table, ref index } => {
            let m = nodes[table].shape[1];
            accumulate(nodes, grads, table, |dt| {
                for (r, &i) in index.iter().enumerate() {
                    for k in 0..m {
                        dt[i * m + k] += gout[r * m + k];
                    }
                }
            });
        }
        Op::StraightThrough { soft } => {
            accumulate(nodes, grads, soft, |d| {
                d.iter_mut().zip(gout).for_each(|(d, g)| *d += g)
            });
        }
        _ => unreachable!(),
    }
}
