//! 2-D convolution, pooling and batch normalization for the block
//! relevance predictor. Inputs are `[C,H,W]` or batched `[B,C,H,W]`.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Tensor};
use crate::numerics::tensor::TensorData;
use crate::scalar::Scalar;

/// `(batch, channels, h, w, batched?)` view of a rank-3/4 shape.
fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match shape.len() {
        3 => Ok((1, shape[0], shape[1], shape[2], false)),
        4 => Ok((shape[0], shape[1], shape[2], shape[3], true)),
        _ => Err(Error::Dimension(format!(
            "expected [C,H,W] or [B,C,H,W], got {:?}",
            shape
        ))),
    }
}

impl<S: Scalar> Graph<S> {
    /// Cross-correlation (no kernel flip) with symmetric zero padding.
    /// `weight` is `[C_out, C_in, kh, kw]`; output spatial size is
    /// `H + 2*padding - kh + 1` (same for W).
    pub fn conv2d(&mut self, x: Tensor, weight: Tensor, padding: usize) -> Result<Tensor> {
        let xsh = self.shape(x).to_vec();
        let wsh = self.shape(weight).to_vec();
        let (bsz, cin, h, w, batched) = image_dims(&xsh)?;
        if wsh.len() != 4 || wsh[1] != cin {
            return Err(Error::Dimension(format!(
                "conv2d: weight {:?} incompatible with input {:?}",
                wsh, xsh
            )));
        }
        let (cout, kh, kw) = (wsh[0], wsh[2], wsh[3]);
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if kh > ph || kw > pw {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {}x{} larger than padded input {}x{}",
                kh, kw, ph, pw
            )));
        }
        let (oh, ow) = (ph - kh + 1, pw - kw + 1);

        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let mut out = vec![S::zero(); bsz * cout * oh * ow];
        conv_forward(
            xv, wv, &mut out, bsz, cin, h, w, cout, kh, kw, padding, oh, ow,
        );
        let oshape = if batched {
            vec![bsz, cout, oh, ow]
        } else {
            vec![cout, oh, ow]
        };
        let value = TensorData::new(oshape, out)?;
        let (xi, wi) = (x.id(), weight.id());
        let p = padding;
        self.emit_external("conv2d", value, &[x, weight], move |vals, g| {
            let xv = vals[xi].data();
            let wv = vals[wi].data();
            let mut dx = vec![S::zero(); xv.len()];
            let mut dw = vec![S::zero(); wv.len()];
            for b in 0..bsz {
                for co in 0..cout {
                    let gbase = ((b * cout) + co) * oh * ow;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[gbase + oy * ow + ox];
                            if gv == S::zero() {
                                continue;
                            }
                            for ci in 0..cin {
                                let xbase = ((b * cin) + ci) * h * w;
                                let wbase = ((co * cin) + ci) * kh * kw;
                                for ky in 0..kh {
                                    let iy = (oy + ky) as isize - p as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox + kx) as isize - p as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xid = xbase + iy as usize * w + ix as usize;
                                        dw[wbase + ky * kw + kx] += gv * xv[xid];
                                        dx[xid] += gv * wv[wbase + ky * kw + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![(xi, dx), (wi, dw)]
        })
    }

    /// Add a per-channel bias to a `[C,H,W]` / `[B,C,H,W]` feature map.
    pub fn add_channel_bias(&mut self, x: Tensor, bias: Tensor) -> Result<Tensor> {
        let xsh = self.shape(x).to_vec();
        let (bsz, c, h, w, _) = image_dims(&xsh)?;
        if self.shape(bias) != [c] {
            return Err(Error::Dimension(format!(
                "add_channel_bias: bias {:?} for {} channels",
                self.shape(bias),
                c
            )));
        }
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        {
            let od = out.data_mut();
            for b in 0..bsz {
                for ci in 0..c {
                    let base = ((b * c) + ci) * h * w;
                    for v in &mut od[base..base + h * w] {
                        *v += bv[ci];
                    }
                }
            }
        }
        let (xi, bi) = (x.id(), bias.id());
        self.emit_external("add_channel_bias", out, &[x, bias], move |_, g| {
            let mut db = vec![S::zero(); c];
            for b in 0..bsz {
                for ci in 0..c {
                    let base = ((b * c) + ci) * h * w;
                    db[ci] += g[base..base + h * w].iter().copied().sum::<S>();
                }
            }
            vec![(xi, g.to_vec()), (bi, db)]
        })
    }

    /// 2x2 average pooling with stride 2; odd trailing row/column dropped.
    /// Requires H >= 2 and W >= 2 (callers skip pooling below that).
    pub fn avg_pool_2x2(&mut self, x: Tensor) -> Result<Tensor> {
        let xsh = self.shape(x).to_vec();
        let (bsz, c, h, w, batched) = image_dims(&xsh)?;
        if h < 2 || w < 2 {
            return Err(Error::Dimension(format!(
                "avg_pool_2x2: spatial extent {}x{} below 2x2",
                h, w
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); bsz * c * oh * ow];
        let quarter = S::from_f64_c(0.25);
        for bc in 0..bsz * c {
            let ibase = bc * h * w;
            let obase = bc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i0 = ibase + (2 * oy) * w + 2 * ox;
                    let s = xv[i0] + xv[i0 + 1] + xv[i0 + w] + xv[i0 + w + 1];
                    out[obase + oy * ow + ox] = s * quarter;
                }
            }
        }
        let oshape = if batched {
            vec![bsz, c, oh, ow]
        } else {
            vec![c, oh, ow]
        };
        let value = TensorData::new(oshape, out)?;
        let xi = x.id();
        self.emit_external("avg_pool_2x2", value, &[x], move |vals, g| {
            let mut dx = vec![S::zero(); vals[xi].numel()];
            let quarter = S::from_f64_c(0.25);
            for bc in 0..bsz * c {
                let ibase = bc * h * w;
                let obase = bc * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[obase + oy * ow + ox] * quarter;
                        let i0 = ibase + (2 * oy) * w + 2 * ox;
                        dx[i0] += gv;
                        dx[i0 + 1] += gv;
                        dx[i0 + w] += gv;
                        dx[i0 + w + 1] += gv;
                    }
                }
            }
            vec![(xi, dx)]
        })
    }

    /// Batch normalization in training mode: normalizes each channel by
    /// statistics over the batch and spatial axes (biased variance) and
    /// returns those statistics so the caller can fold them into running
    /// estimates.
    pub fn batchnorm_train(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        eps: S,
    ) -> Result<(Tensor, Vec<S>, Vec<S>)> {
        let xsh = self.shape(x).to_vec();
        let (bsz, c, h, w, _) = image_dims(&xsh)?;
        self.check_bn_params(c, gamma, beta)?;
        let n = bsz * h * w;
        let nf = S::from_usize(n).unwrap();
        let xv = self.value(x).data();
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for ci in 0..c {
            let mut s = S::zero();
            for b in 0..bsz {
                let base = ((b * c) + ci) * h * w;
                s += xv[base..base + h * w].iter().copied().sum::<S>();
            }
            mean[ci] = s / nf;
            let mut v = S::zero();
            for b in 0..bsz {
                let base = ((b * c) + ci) * h * w;
                for &xe in &xv[base..base + h * w] {
                    let d = xe - mean[ci];
                    v += d * d;
                }
            }
            var[ci] = v / nf;
        }
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = vec![S::zero(); xv.len()];
        for b in 0..bsz {
            for ci in 0..c {
                let inv = (var[ci] + eps).sqrt().recip();
                let base = ((b * c) + ci) * h * w;
                for k in 0..h * w {
                    out[base + k] = gv[ci] * ((xv[base + k] - mean[ci]) * inv) + bv[ci];
                }
            }
        }
        let value = TensorData::new(xsh, out)?;
        let (xi, gi, bi) = (x.id(), gamma.id(), beta.id());
        let (mean_c, var_c) = (mean.clone(), var.clone());
        let t = self.emit_external("batchnorm", value, &[x, gamma, beta], move |vals, g| {
            let xv = vals[xi].data();
            let gvv = vals[gi].data();
            let mut dx = vec![S::zero(); xv.len()];
            let mut dgamma = vec![S::zero(); c];
            let mut dbeta = vec![S::zero(); c];
            for ci in 0..c {
                let inv = (var_c[ci] + eps).sqrt().recip();
                // channel means of h = g*gamma and of h*xhat
                let mut mean_h = S::zero();
                let mut mean_hx = S::zero();
                for b in 0..bsz {
                    let base = ((b * c) + ci) * h * w;
                    for k in 0..h * w {
                        let xh = (xv[base + k] - mean_c[ci]) * inv;
                        let hv = g[base + k] * gvv[ci];
                        dgamma[ci] += g[base + k] * xh;
                        dbeta[ci] += g[base + k];
                        mean_h += hv;
                        mean_hx += hv * xh;
                    }
                }
                mean_h = mean_h / nf;
                mean_hx = mean_hx / nf;
                for b in 0..bsz {
                    let base = ((b * c) + ci) * h * w;
                    for k in 0..h * w {
                        let xh = (xv[base + k] - mean_c[ci]) * inv;
                        let hv = g[base + k] * gvv[ci];
                        dx[base + k] = (hv - mean_h - xh * mean_hx) * inv;
                    }
                }
            }
            vec![(xi, dx), (gi, dgamma), (bi, dbeta)]
        })?;
        Ok((t, mean, var))
    }

    /// Batch normalization in inference mode, using running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        running_mean: &[S],
        running_var: &[S],
        eps: S,
    ) -> Result<Tensor> {
        let xsh = self.shape(x).to_vec();
        let (bsz, c, h, w, _) = image_dims(&xsh)?;
        self.check_bn_params(c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Dimension(
                "batchnorm_eval: running stats length mismatch".into(),
            ));
        }
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); xv.len()];
        let inv: Vec<S> = running_var
            .iter()
            .map(|v| (*v + eps).sqrt().recip())
            .collect();
        for b in 0..bsz {
            for ci in 0..c {
                let base = ((b * c) + ci) * h * w;
                for k in 0..h * w {
                    out[base + k] = gv[ci] * ((xv[base + k] - running_mean[ci]) * inv[ci]) + bv[ci];
                }
            }
        }
        let value = TensorData::new(xsh, out)?;
        let (xi, gi, bi) = (x.id(), gamma.id(), beta.id());
        let mean_c = running_mean.to_vec();
        let inv_c = inv;
        self.emit_external("batchnorm_eval", value, &[x, gamma, beta], move |vals, g| {
            let xv = vals[xi].data();
            let gvv = vals[gi].data();
            let mut dx = vec![S::zero(); xv.len()];
            let mut dgamma = vec![S::zero(); c];
            let mut dbeta = vec![S::zero(); c];
            for b in 0..bsz {
                for ci in 0..c {
                    let base = ((b * c) + ci) * h * w;
                    for k in 0..h * w {
                        let xh = (xv[base + k] - mean_c[ci]) * inv_c[ci];
                        dgamma[ci] += g[base + k] * xh;
                        dbeta[ci] += g[base + k];
                        dx[base + k] = g[base + k] * gvv[ci] * inv_c[ci];
                    }
                }
            }
            vec![(xi, dx), (gi, dgamma), (bi, dbeta)]
        })
    }

    fn check_bn_params(&self, c: usize, gamma: Tensor, beta: Tensor) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Dimension(format!(
                "batchnorm: gamma {:?} / beta {:?} for {} channels",
                self.shape(gamma),
                self.shape(beta),
                c
            )));
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<S: Scalar>(
    x: &[S],
    w: &[S],
    out: &mut [S],
    bsz: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    p: usize,
    oh: usize,
    ow: usize,
) {
    for b in 0..bsz {
        for co in 0..cout {
            let obase = ((b * cout) + co) * oh * ow;
            for ci in 0..cin {
                let xbase = ((b * cin) + ci) * h * wd;
                let wbase = ((co * cin) + ci) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w[wbase + ky * kw + kx];
                        if wv == S::zero() {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * wd;
                            let orow = obase + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox + kx) as isize - p as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                out[orow + ox] += wv * x[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}
