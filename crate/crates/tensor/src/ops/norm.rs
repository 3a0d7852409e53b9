use crate::error::{check_dim, config, Result, TensorError};
use crate::graph::{accumulate, Graph, Node, Op, Var};

impl Graph {
    /// Group normalization over `[B, C, ...]` with per-channel affine.
    pub fn group_norm(
        &mut self,
        input: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        const OP: &str = "group_norm";
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Rank {
                op: OP,
                expected: 5,
                shape,
            });
        }
        let (batch, channels) = (shape[0], shape[1]);
        if groups == 0 || channels % groups != 0 {
            return Err(config(
                OP,
                format!("{channels} channels not divisible into {groups} groups"),
            ));
        }
        if eps <= 0.0 {
            return Err(config(OP, "eps must be positive"));
        }
        check_dim(OP, "gamma", channels, self.shape(gamma).iter().product())?;
        check_dim(OP, "beta", channels, self.shape(beta).iter().product())?;
        let spatial: usize = shape[2..].iter().product();
        let group_len = channels / groups * spatial;
        let x = &self.nodes[input.0].data;
        let gm = &self.nodes[gamma.0].data;
        let bt = &self.nodes[beta.0].data;
        let mut out = vec![0.0; x.len()];
        let mut means = Vec::with_capacity(batch * groups);
        let mut rstds = Vec::with_capacity(batch * groups);
        for b in 0..batch {
            for g in 0..groups {
                let start = (b * groups + g) * group_len;
                let xs = &x[start..start + group_len];
                let mean = xs.iter().sum::<f64>() / group_len as f64;
                let var =
                    xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / group_len as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                for (i, (o, &v)) in out[start..start + group_len].iter_mut().zip(xs).enumerate() {
                    let c = g * (channels / groups) + i / spatial;
                    *o = (v - mean) * rstd * gm[c] + bt[c];
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::GroupNorm {
                input: input.0,
                gamma: gamma.0,
                beta: beta.0,
                groups,
                mean: means,
                rstd: rstds,
            },
            &[input.0, gamma.0, beta.0],
        ))
    }
}

pub(crate) fn group_norm_backward(
    nodes: &[Node],
    out_id: usize,
    gout: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let Op::GroupNorm {
        input,
        gamma,
        beta,
        groups,
        ref mean,
        ref rstd,
    } = nodes[out_id].op
    else {
        unreachable!()
    };
    let shape = &nodes[input].shape;
    let (batch, channels) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let per_group = channels / groups;
    let group_len = per_group * spatial;
    let x = &nodes[input].data;
    let gm = &nodes[gamma].data;

    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    let mut dx = vec![0.0; x.len()];
    let n = group_len as f64;
    for b in 0..batch {
        for g in 0..groups {
            let gi = b * groups + g;
            let start = gi * group_len;
            let (mu, rs) = (mean[gi], rstd[gi]);
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for i in 0..group_len {
                let c = g * per_group + i / spatial;
                let xhat = (x[start + i] - mu) * rs;
                let go = gout[start + i];
                dgamma[c] += go * xhat;
                dbeta[c] += go;
                let dxhat = go * gm[c];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            for i in 0..group_len {
                let c = g * per_group + i / spatial;
                let xhat = (x[start + i] - mu) * rs;
                let dxhat = gout[start + i] * gm[c];
                dx[start + i] = rs / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
            }
        }
    }
    accumulate(nodes, grads, input, |d| {
        d.iter_mut().zip(&dx).for_each(|(a, b)| *a += b)
    });
    accumulate(nodes, grads, gamma, |d| {
        d.iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b)
    });
    accumulate(nodes, grads, beta, |d| {
        d.iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b)
    });
}
