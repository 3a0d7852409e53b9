use crate::error::{check_dim, check_rank, Result, TensorError};
use crate::gemm::{gemm, Mat};
use crate::graph::{accumulate, Graph, Node, Op, Var};
use crate::tensor::numel;

impl Graph {
    /// `a [..., k] x b [k, n] -> [..., n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "matmul";
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        check_rank(OP, &sb, 2)?;
        let Some(&inner) = sa.last() else {
            return Err(TensorError::Rank {
                op: OP,
                expected: 2,
                shape: sa,
            });
        };
        check_dim(OP, "inner", sb[0], inner)?;
        let rows = numel(&sa) / inner.max(1);
        let cols = sb[1];
        let mut out = vec![0.0; rows * cols];
        gemm(
            rows,
            inner,
            cols,
            Mat::rm(&self.nodes[a.0].data, inner),
            Mat::rm(&self.nodes[b.0].data, cols),
            0.0,
            &mut out,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = cols;
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                rows,
                inner,
                cols,
            },
            &[a.0, b.0],
        ))
    }

    /// Batched product `a [B, m, k] x b [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "bmm";
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        check_rank(OP, &sa, 3)?;
        check_rank(OP, &sb, 3)?;
        check_dim(OP, "batch", sa[0], sb[0])?;
        check_dim(OP, "inner", sa[2], sb[1])?;
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (x, y) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    Mat::rm(&x[i * m * k..(i + 1) * m * k], k),
                    Mat::rm(&y[i * k * n..(i + 1) * k * n], n),
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        Ok(self.push(
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
            },
            &[a.0, b.0],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Rank {
                op: "transpose",
                expected: 2,
                shape,
            });
        }
        let r = shape.len();
        let (m, n) = (shape[r - 2], shape[r - 1]);
        let x = &self.nodes[a.0].data;
        let mut out = vec![0.0; x.len()];
        transpose_blocks(x, &mut out, m, n);
        let mut s = shape;
        s.swap(r - 2, r - 1);
        Ok(self.push(s, out, Op::TransposeLast2(a.0), &[a.0]))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let n = &self.nodes[a.0];
        if numel(&shape) != n.data.len() {
            return Err(TensorError::Contract(format!(
                "cannot reshape {:?} into {shape:?}",
                n.shape
            )));
        }
        let data = n.data.clone();
        Ok(self.push(shape, data, Op::Reshape(a.0), &[a.0]))
    }

    /// `[B, C, spatial...] -> [B, S, C]` with `S` the flattened spatial size.
    pub fn channels_to_tokens(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 3 {
            return Err(TensorError::Rank {
                op: "channels_to_tokens",
                expected: 5,
                shape,
            });
        }
        let (b, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let x = &self.nodes[a.0].data;
        let mut out = vec![0.0; x.len()];
        for i in 0..b {
            transpose_blocks(
                &x[i * c * s..(i + 1) * c * s],
                &mut out[i * c * s..(i + 1) * c * s],
                c,
                s,
            );
        }
        Ok(self.push(vec![b, s, c], out, Op::ChannelsToTokens(a.0), &[a.0]))
    }

    /// Inverse of [`Graph::channels_to_tokens`]: `[B, S, C] -> [B, C, spatial...]`.
    pub fn tokens_to_channels(&mut self, a: Var, spatial: &[usize]) -> Result<Var> {
        const OP: &str = "tokens_to_channels";
        let shape = self.shape(a).to_vec();
        check_rank(OP, &shape, 3)?;
        check_dim(OP, "token", shape[1], spatial.iter().product())?;
        let (b, s, c) = (shape[0], shape[1], shape[2]);
        let x = &self.nodes[a.0].data;
        let mut out = vec![0.0; x.len()];
        for i in 0..b {
            transpose_blocks(
                &x[i * c * s..(i + 1) * c * s],
                &mut out[i * c * s..(i + 1) * c * s],
                s,
                c,
            );
        }
        let mut out_shape = vec![b, c];
        out_shape.extend_from_slice(spatial);
        Ok(self.push(out_shape, out, Op::TokensToChannels(a.0), &[a.0]))
    }
}

/// Transposes every contiguous `m x n` block of `src` into `dst`.
fn transpose_blocks(src: &[f64], dst: &mut [f64], m: usize, n: usize) {
    let block = m * n;
    if block == 0 {
        return;
    }
    for (s, d) in src.chunks(block).zip(dst.chunks_mut(block)) {
        for i in 0..m {
            for j in 0..n {
                d[j * m + i] = s[i * n + j];
            }
        }
    }
}

pub(crate) fn backward(
    nodes: &[Node],
    out_id: usize,
    gout: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    match nodes[out_id].op {
        Op::MatMul {
            a,
            b,
            rows,
            inner,
            cols,
        } => {
            let (x, y) = (&nodes[a].data, &nodes[b].data);
            accumulate(nodes, grads, a, |d| {
                gemm(
                    rows,
                    cols,
                    inner,
                    Mat::rm(gout, cols),
                    Mat::tr(y, cols),
                    1.0,
                    d,
                );
            });
            accumulate(nodes, grads, b, |d| {
                gemm(
                    inner,
                    rows,
                    cols,
                    Mat::tr(x, inner),
                    Mat::rm(gout, cols),
                    1.0,
                    d,
                );
            });
        }
        Op::BatchMatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
        } => {
            let (x, y) = (&nodes[a].data, &nodes[b].data);
            accumulate(nodes, grads, a, |d| {
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        Mat::rm(&gout[i * m * n..(i + 1) * m * n], n),
                        Mat::tr(&y[i * k * n..(i + 1) * k * n], n),
                        1.0,
                        &mut d[i * m * k..(i + 1) * m * k],
                    );
                }
            });
            accumulate(nodes, grads, b, |d| {
                for i in 0..batch {
                    gemm(
                        k,
                        m,
                        n,
                        Mat::tr(&x[i * m * k..(i + 1) * m * k], k),
                        Mat::rm(&gout[i * m * n..(i + 1) * m * n], n),
                        1.0,
                        &mut d[i * k * n..(i + 1) * k * n],
                    );
                }
            });
        }
        Op::TransposeLast2(a) => {
            let s = &nodes[out_id].shape;
            let r = s.len();
            let (m, n) = (s[r - 2], s[r - 1]);
            let mut tmp = vec![0.0; gout.len()];
            transpose_blocks(gout, &mut tmp, m, n);
            accumulate(nodes, grads, a, |d| {
                d.iter_mut().zip(&tmp).for_each(|(d, t)| *d += t)
            });
        }
        Op::Reshape(a) => {
            accumulate(nodes, grads, a, |d| {
                d.iter_mut().zip(gout).for_each(|(d, g)| *d += g)
            });
        }
        Op::ChannelsToTokens(a) => {
            let s = &nodes[out_id].shape;
            let (b, tokens, c) = (s[0], s[1], s[2]);
            let mut tmp = vec![0.0; gout.len()];
            for i in 0..b {
                let r = i * c * tokens..(i + 1) * c * tokens;
                transpose_blocks(&gout[r.clone()], &mut tmp[r], tokens, c);
            }
            accumulate(nodes, grads, a, |d| {
                d.iter_mut().zip(&tmp).for_each(|(d, t)| *d += t)
            });
        }
        Op::TokensToChannels(a) => {
            let s = &nodes[a].shape;
            let (b, tokens, c) = (s[0], s[1], s[2]);
            let mut tmp = vec![0.0; gout.len()];
            for i in 0..b {
                let r = i * c * tokens..(i + 1) * c * tokens;
                transpose_blocks(&gout[r.clone()], &mut tmp[r], c, tokens);
            }
            accumulate(nodes, grads, a, |d| {
                d.iter_mut().zip(&tmp).for_each(|(d, t)| *d += t)
            });
        }
        _ => unreachable!(),
    }
}
