use crate::error::{check_dim, check_rank, config, Result};
use crate::gemm::{gemm, Mat};
use crate::graph::{accumulate, Graph, Node, Op, Var};

/// The direct path serves single-output heads, where the unfolded matrix
/// product degenerates to a matrix-vector product.
const DIRECT_MAX_CHANNELS: usize = 8;
const DIRECT_MIN_ROW: usize = 8;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    fn in_len(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k * self.k
    }

    /// 1x1x1 unit-stride kernels read the input directly, no column buffer.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    fn is_direct(&self, c_out: usize) -> bool {
        !self.is_pointwise()
            && c_out == 1
            && self.c_in <= DIRECT_MAX_CHANNELS
            && self.out_dims[2] >= DIRECT_MIN_ROW
    }
}

pub(crate) fn out_extent(input: usize, k: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - k) / stride + 1
}

/// Unfolds one batch item (`c_in x in_dims`) into `patch_len x out_len`.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let [d, h, w] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let p = g.out_len();
    let (k, s, pad) = (g.k, g.stride, g.padding);
    let kxr: Vec<(usize, usize)> = (0..k).map(|kx| valid_range(w, ow, kx, s, pad)).collect();
    let mut row = 0;
    for c in 0..g.c_in {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for (kx, &(lo, hi)) in kxr.iter().enumerate() {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oz in 0..od {
                        let plane = &mut dst[oz * oh * ow..(oz + 1) * oh * ow];
                        let Some(iz) = (oz * s + kz).checked_sub(pad).filter(|&i| i < d) else {
                            plane.fill(0.0);
                            continue;
                        };
                        for oy in 0..oh {
                            let out = &mut plane[oy * ow..(oy + 1) * ow];
                            let Some(iy) = (oy * s + ky).checked_sub(pad).filter(|&i| i < h) else {
                                out.fill(0.0);
                                continue;
                            };
                            let src = &xc[(iz * h + iy) * w..][..w];
                            out[..lo].fill(0.0);
                            out[hi..].fill(0.0);
                            if s == 1 {
                                out[lo..hi].copy_from_slice(&src[lo + kx - pad..hi + kx - pad]);
                            } else {
                                for (ox, o) in out[lo..hi].iter_mut().enumerate() {
                                    *o = src[(lo + ox) * s + kx - pad];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let [d, h, w] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let p = g.out_len();
    let (k, s, pad) = (g.k, g.stride, g.padding);
    let kxr: Vec<(usize, usize)> = (0..k).map(|kx| valid_range(w, ow, kx, s, pad)).collect();
    let mut row = 0;
    for c in 0..g.c_in {
        let dxc = &mut dx[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for (kx, &(lo, hi)) in kxr.iter().enumerate() {
                    let src = &cols[row * p..(row + 1) * p];
                    row += 1;
                    for oz in 0..od {
                        let Some(iz) = (oz * s + kz).checked_sub(pad).filter(|&i| i < d) else {
                            continue;
                        };
                        for oy in 0..oh {
                            let Some(iy) = (oy * s + ky).checked_sub(pad).filter(|&i| i < h) else {
                                continue;
                            };
                            let dst = &mut dxc[(iz * h + iy) * w..][..w];
                            let from = &src[(oz * oh + oy) * ow..][..ow];
                            if s == 1 {
                                dst[lo + kx - pad..hi + kx - pad]
                                    .iter_mut()
                                    .zip(&from[lo..hi])
                                    .for_each(|(d, v)| *d += v);
                            } else {
                                for ox in lo..hi {
                                    dst[ox * s + kx - pad] += from[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output positions `o` along one axis whose input index `o·s + kk − pad`
/// falls inside `[0, extent)`.
fn valid_range(extent: usize, out: usize, kk: usize, s: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > kk { (pad - kk).div_ceil(s) } else { 0 };
    let hi = (extent + pad).saturating_sub(kk).div_ceil(s).min(out);
    (lo, hi.max(lo))
}

/// Direct convolution of one batch item, accumulated row by row. Faster
/// than unfolding when the channel product is small and rows are long.
fn direct_forward(x: &[f64], w: &[f64], g: &ConvGeom, c_out: usize, out: &mut [f64]) {
    let [d, h, wd] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let (k, s, pad) = (g.k, g.stride, g.padding);
    let kxr: Vec<(usize, usize)> = (0..k).map(|kx| valid_range(wd, ow, kx, s, pad)).collect();
    for co in 0..c_out {
        for oz in 0..od {
            for oy in 0..oh {
                let orow = &mut out[((co * od + oz) * oh + oy) * ow..][..ow];
                for ci in 0..g.c_in {
                    for kz in 0..k {
                        let Some(iz) = (oz * s + kz).checked_sub(pad).filter(|&i| i < d) else {
                            continue;
                        };
                        for ky in 0..k {
                            let Some(iy) = (oy * s + ky).checked_sub(pad).filter(|&i| i < h) else {
                                continue;
                            };
                            let irow = &x[((ci * d + iz) * h + iy) * wd..][..wd];
                            let wk = &w[(((co * g.c_in + ci) * k + kz) * k + ky) * k..][..k];
                            for (kx, &wv) in wk.iter().enumerate() {
                                let (lo, hi) = kxr[kx];
                                if s == 1 {
                                    let src = &irow[lo + kx - pad..hi + kx - pad];
                                    orow[lo..hi]
                                        .iter_mut()
                                        .zip(src)
                                        .for_each(|(o, &v)| *o += wv * v);
                                } else {
                                    for ox in lo..hi {
                                        orow[ox] += wv * irow[ox * s + kx - pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`direct_forward`] for one batch item.
fn direct_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    g: &ConvGeom,
    c_out: usize,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let [d, h, wd] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let (k, s, pad) = (g.k, g.stride, g.padding);
    let kxr: Vec<(usize, usize)> = (0..k).map(|kx| valid_range(wd, ow, kx, s, pad)).collect();
    for co in 0..c_out {
        for oz in 0..od {
            for oy in 0..oh {
                let grow = &gy[((co * od + oz) * oh + oy) * ow..][..ow];
                for ci in 0..g.c_in {
                    for kz in 0..k {
                        let Some(iz) = (oz * s + kz).checked_sub(pad).filter(|&i| i < d) else {
                            continue;
                        };
                        for ky in 0..k {
                            let Some(iy) = (oy * s + ky).checked_sub(pad).filter(|&i| i < h) else {
                                continue;
                            };
                            let base = ((ci * d + iz) * h + iy) * wd;
                            let widx = (((co * g.c_in + ci) * k + kz) * k + ky) * k;
                            for kx in 0..k {
                                let (lo, hi) = kxr[kx];
                                if let Some(dw) = dw.as_deref_mut() {
                                    let irow = &x[base..base + wd];
                                    let acc: f64 = if s == 1 {
                                        grow[lo..hi]
                                            .iter()
                                            .zip(&irow[lo + kx - pad..hi + kx - pad])
                                            .map(|(a, b)| a * b)
                                            .sum()
                                    } else {
                                        (lo..hi).map(|ox| grow[ox] * irow[ox * s + kx - pad]).sum()
                                    };
                                    dw[widx + kx] += acc;
                                }
                                if let Some(dx) = dx.as_deref_mut() {
                                    let wv = w[widx + kx];
                                    let drow = &mut dx[base..base + wd];
                                    if s == 1 {
                                        drow[lo + kx - pad..hi + kx - pad]
                                            .iter_mut()
                                            .zip(&grow[lo..hi])
                                            .for_each(|(o, &v)| *o += wv * v);
                                    } else {
                                        for ox in lo..hi {
                                            drow[ox * s + kx - pad] += wv * grow[ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// 3D cross-correlation of `input [B,C,D,H,W]` with `kernel [C',C,k,k,k]`.
    pub fn conv3(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv3";
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        check_rank(OP, &xs, 5)?;
        check_rank(OP, &ks, 5)?;
        let (batch, c_in) = (xs[0], xs[1]);
        let (c_out, k) = (ks[0], ks[2]);
        check_dim(OP, "input channel", ks[1], c_in)?;
        check_dim(OP, "kernel height", k, ks[3])?;
        check_dim(OP, "kernel width", k, ks[4])?;
        if k % 2 == 0 {
            return Err(config(OP, format!("kernel extent {k} must be odd")));
        }
        if stride != 1 && stride != 2 {
            return Err(config(OP, format!("stride {stride} must be 1 or 2")));
        }
        for (axis, &e) in ["depth", "height", "width"].iter().zip(&xs[2..]) {
            if e + 2 * padding < k {
                return Err(config(
                    OP,
                    format!("{axis} extent {e} too small for kernel {k} with padding {padding}"),
                ));
            }
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            check_rank(OP, bs, 1)?;
            check_dim(OP, "bias", c_out, bs[0])?;
        }
        let out_dims = [
            out_extent(xs[2], k, stride, padding),
            out_extent(xs[3], k, stride, padding),
            out_extent(xs[4], k, stride, padding),
        ];
        let geom = ConvGeom {
            c_in,
            k,
            stride,
            padding,
            in_dims: [xs[2], xs[3], xs[4]],
            out_dims,
        };
        let (in_len, out_len, patch) = (geom.in_len(), geom.out_len(), geom.patch_len());
        let mut out = vec![0.0; batch * c_out * out_len];
        let direct = geom.is_direct(c_out);
        let mut cols = if geom.is_pointwise() || direct {
            Vec::new()
        } else {
            vec![0.0; patch * out_len]
        };
        {
            let x = &self.nodes[input.0].data;
            let w = &self.nodes[kernel.0].data;
            for b in 0..batch {
                let xb = &x[b * c_in * in_len..(b + 1) * c_in * in_len];
                let ob = &mut out[b * c_out * out_len..(b + 1) * c_out * out_len];
                if direct {
                    direct_forward(xb, w, &geom, c_out, ob);
                    continue;
                }
                let src: &[f64] = if geom.is_pointwise() {
                    xb
                } else {
                    im2col(xb, &geom, &mut cols);
                    &cols
                };
                gemm(
                    c_out,
                    patch,
                    out_len,
                    Mat::rm(w, patch),
                    Mat::rm(src, out_len),
                    0.0,
                    ob,
                );
            }
            if let Some(bv) = bias {
                let bias = &self.nodes[bv.0].data;
                for b in 0..batch {
                    for (co, &bc) in bias.iter().enumerate() {
                        let start = (b * c_out + co) * out_len;
                        out[start..start + out_len]
                            .iter_mut()
                            .for_each(|v| *v += bc);
                    }
                }
            }
        }
        let mut inputs = vec![input.0, kernel.0];
        inputs.extend(bias.map(|b| b.0));
        Ok(self.push(
            vec![batch, c_out, out_dims[0], out_dims[1], out_dims[2]],
            out,
            Op::Conv3 {
                input: input.0,
                kernel: kernel.0,
                bias: bias.map(|b| b.0),
                stride,
                padding,
            },
            &inputs,
        ))
    }
}

pub(crate) fn conv3_backward(
    nodes: &[Node],
    out_id: usize,
    gout: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let Op::Conv3 {
        input,
        kernel,
        bias,
        stride,
        padding,
    } = nodes[out_id].op
    else {
        unreachable!()
    };
    let xs = &nodes[input].shape;
    let ks = &nodes[kernel].shape;
    let os = &nodes[out_id].shape;
    let geom = ConvGeom {
        c_in: xs[1],
        k: ks[2],
        stride,
        padding,
        in_dims: [xs[2], xs[3], xs[4]],
        out_dims: [os[2], os[3], os[4]],
    };
    let (batch, c_out) = (xs[0], ks[0]);
    let (in_len, out_len, patch) = (geom.in_len(), geom.out_len(), geom.patch_len());

    if let Some(bid) = bias {
        accumulate(nodes, grads, bid, |db| {
            for b in 0..batch {
                for (co, d) in db.iter_mut().enumerate() {
                    let start = (b * c_out + co) * out_len;
                    *d += gout[start..start + out_len].iter().sum::<f64>();
                }
            }
        });
    }

    let need_w = nodes[kernel].requires_grad;
    let need_x = nodes[input].requires_grad;
    if !need_w && !need_x {
        return;
    }
    let x = &nodes[input].data;
    let w = &nodes[kernel].data;
    let mut dw = if need_w {
        vec![0.0; w.len()]
    } else {
        Vec::new()
    };
    let mut dx = if need_x {
        vec![0.0; x.len()]
    } else {
        Vec::new()
    };
    if geom.is_direct(c_out) {
        let cl = geom.c_in * in_len;
        for b in 0..batch {
            direct_backward(
                &x[b * cl..(b + 1) * cl],
                w,
                &gout[b * c_out * out_len..(b + 1) * c_out * out_len],
                &geom,
                c_out,
                need_x.then(|| &mut dx[b * cl..(b + 1) * cl]),
                need_w.then_some(dw.as_mut_slice()),
            );
        }
    } else {
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; patch * out_len]
        };
        let mut dcols = vec![0.0; patch * out_len];
        for b in 0..batch {
            let gb = &gout[b * c_out * out_len..(b + 1) * c_out * out_len];
            if need_w {
                let xb = &x[b * geom.c_in * in_len..(b + 1) * geom.c_in * in_len];
                let src: &[f64] = if geom.is_pointwise() {
                    xb
                } else {
                    im2col(xb, &geom, &mut cols);
                    &cols
                };
                // dW += gout · colsᵀ
                gemm(
                    c_out,
                    out_len,
                    patch,
                    Mat::rm(gb, out_len),
                    Mat::tr(src, out_len),
                    1.0,
                    &mut dw,
                );
            }
            if need_x {
                // dcols = Wᵀ · gout
                gemm(
                    patch,
                    c_out,
                    out_len,
                    Mat::tr(w, patch),
                    Mat::rm(gb, out_len),
                    0.0,
                    &mut dcols,
                );
                let dxb = &mut dx[b * geom.c_in * in_len..(b + 1) * geom.c_in * in_len];
                if geom.is_pointwise() {
                    dxb.iter_mut().zip(&dcols).for_each(|(d, c)| *d += c);
                } else {
                    col2im(&dcols, &geom, dxb);
                }
            }
        }
    }
    if need_w {
        accumulate(nodes, grads, kernel, |g| {
            g.iter_mut().zip(&dw).for_each(|(a, b)| *a += b)
        });
    }
    if need_x {
        accumulate(nodes, grads, input, |g| {
            g.iter_mut().zip(&dx).for_each(|(a, b)| *a += b)
        });
    }
}
