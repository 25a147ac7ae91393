use crate::error::{Error, Result};
use crate::numerics::ops::{rows_of, shape_err};
use crate::numerics::{check_finite, record, tape_active, OpRecord, Tensor};

impl Tensor {
    /// Softmax over the last axis, computed with max-subtraction so inputs
    /// with magnitude up to ~1e4 neither overflow nor underflow to NaN.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let (rows, w) = rows_of(self.shape());
        let mut data = vec![0.0f32; self.numel()];
        for r in 0..rows {
            let src = &self.data()[r * w..(r + 1) * w];
            let dst = &mut data[r * w..(r + 1) * w];
            let m = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for (d, &s) in dst.iter_mut().zip(src.iter()) {
                let e = (s - m).exp();
                *d = e;
                sum += e;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        check_finite("softmax", &data)?;
        let rg = tape_active() && self.requires_grad();
        let out = Tensor::from_op(self.shape().to_vec(), data, rg);
        if rg {
            let aid = self.id();
            let y = out.data_arc();
            record(OpRecord {
                name: "softmax",
                output: out.id(),
                backward: Box::new(move |g| {
                    let mut da = vec![0.0f32; g.len()];
                    for r in 0..rows {
                        let yr = &y[r * w..(r + 1) * w];
                        let gr = &g[r * w..(r + 1) * w];
                        let dot: f32 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                        let dst = &mut da[r * w..(r + 1) * w];
                        for ((d, &yv), &gv) in dst.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                            *d = yv * (gv - dot);
                        }
                    }
                    vec![(aid, da)]
                }),
            });
        }
        Ok(out)
    }

    /// Softmax along an arbitrary axis; delegates to the contiguous fast
    /// path for the last axis, otherwise works lane-wise over strides.
    pub fn softmax_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(Error::InvalidArg {
                op: "softmax",
                msg: format!("axis {} out of range for shape {:?}", axis, self.shape()),
            });
        }
        if axis == self.ndim() - 1 {
            return self.softmax_last();
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let len = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut data = vec![0.0f32; self.numel()];
        let mut lane = vec![0.0f32; len];
        for o in 0..outer {
            for i in 0..inner {
                for a in 0..len {
                    lane[a] = self.data()[(o * len + a) * inner + i];
                }
                let m = lane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f32;
                for v in lane.iter_mut() {
                    *v = (*v - m).exp();
                    sum += *v;
                }
                for (a, v) in lane.iter().enumerate() {
                    data[(o * len + a) * inner + i] = v / sum;
                }
            }
        }
        check_finite("softmax", &data)?;
        let rg = tape_active() && self.requires_grad();
        let out = Tensor::from_op(self.shape().to_vec(), data, rg);
        if rg {
            let aid = self.id();
            let y = out.data_arc();
            record(OpRecord {
                name: "softmax",
                output: out.id(),
                backward: Box::new(move |g| {
                    let mut da = vec![0.0f32; g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut dot = 0.0f32;
                            for a in 0..len {
                                let idx = (o * len + a) * inner + i;
                                dot += y[idx] * g[idx];
                            }
                            for a in 0..len {
                                let idx = (o * len + a) * inner + i;
                                da[idx] = y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    vec![(aid, da)]
                }),
            });
        }
        Ok(out)
    }

    /// Layer normalization over the last axis: per-vector zero mean and unit
    /// variance (biased, eps inside the sqrt), then affine gain/bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
        let (rows, w) = rows_of(self.shape());
        if gain.numel() != w {
            return Err(shape_err("layer_norm", self, gain));
        }
        if bias.numel() != w {
            return Err(shape_err("layer_norm", self, bias));
        }
        let mut data = vec![0.0f32; self.numel()];
        let mut xhat = vec![0.0f32; self.numel()];
        let mut inv = vec![0.0f32; rows];
        for r in 0..rows {
            let src = &self.data()[r * w..(r + 1) * w];
            let mean = src.iter().sum::<f32>() / w as f32;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / w as f32;
            let iv = 1.0 / (var + eps).sqrt();
            inv[r] = iv;
            for j in 0..w {
                let xh = (src[j] - mean) * iv;
                xhat[r * w + j] = xh;
                data[r * w + j] = xh * gain.data()[j] + bias.data()[j];
            }
        }
        check_finite("layer_norm", &data)?;
        let (nx, ng, nb) = (
            self.requires_grad(),
            gain.requires_grad(),
            bias.requires_grad(),
        );
        let rg = tape_active() && (nx || ng || nb);
        let out = Tensor::from_op(self.shape().to_vec(), data, rg);
        if rg {
            let (xid, gid, bid) = (self.id(), gain.id(), bias.id());
            let gd = gain.data_arc();
            record(OpRecord {
                name: "layer_norm",
                output: out.id(),
                backward: Box::new(move |g| {
                    let mut c = Vec::new();
                    if nx {
                        let mut dx = vec![0.0f32; g.len()];
                        for r in 0..rows {
                            let gr = &g[r * w..(r + 1) * w];
                            let xh = &xhat[r * w..(r + 1) * w];
                            let mut m1 = 0.0f32; // mean of γ⊙g
                            let mut m2 = 0.0f32; // mean of γ⊙g⊙x̂
                            for j in 0..w {
                                let gg = gd[j] * gr[j];
                                m1 += gg;
                                m2 += gg * xh[j];
                            }
                            m1 /= w as f32;
                            m2 /= w as f32;
                            let dst = &mut dx[r * w..(r + 1) * w];
                            for j in 0..w {
                                dst[j] = inv[r] * (gd[j] * gr[j] - m1 - xh[j] * m2);
                            }
                        }
                        c.push((xid, dx));
                    }
                    if ng {
                        let mut dg = vec![0.0f32; w];
                        for r in 0..rows {
                            for j in 0..w {
                                dg[j] += g[r * w + j] * xhat[r * w + j];
                            }
                        }
                        c.push((gid, dg));
                    }
                    if nb {
                        let mut db = vec![0.0f32; w];
                        for r in 0..rows {
                            for j in 0..w {
                                db[j] += g[r * w + j];
                            }
                        }
                        c.push((bid, db));
                    }
                    c
                }),
            });
        }
        Ok(out)
    }

    /// L2-normalizes each vector along the last axis; a zero-norm vector is
    /// guarded by `eps` in the denominator rather than producing NaN.
    pub fn l2_normalize_last(&self, eps: f32) -> Result<Tensor> {
        let (rows, w) = rows_of(self.shape());
        let mut data = vec![0.0f32; self.numel()];
        let mut norms = vec![0.0f32; rows];
        for r in 0..rows {
            let src = &self.data()[r * w..(r + 1) * w];
            let norm = src.iter().map(|v| v * v).sum::<f32>().sqrt();
            norms[r] = norm;
            let denom = norm.max(eps);
            for j in 0..w {
                data[r * w + j] = src[j] / denom;
            }
        }
        check_finite("l2_normalize", &data)?;
        let rg = tape_active() && self.requires_grad();
        let out = Tensor::from_op(self.shape().to_vec(), data, rg);
        if rg {
            let aid = self.id();
            let u = out.data_arc();
            record(OpRecord {
                name: "l2_normalize",
                output: out.id(),
                backward: Box::new(move |g| {
                    vec![(aid, l2_normalize_vjp(g, &u, &norms, rows, w, eps))]
                }),
            });
        }
        Ok(out)
    }

    /// Scales each row of the trailing matrix: `out[..., i, j] = x[..., i, j]
    /// · s[..., i]`. `s` must have the shape of `x` minus its last axis.
    pub fn scale_rows(&self, s: &Tensor) -> Result<Tensor> {
        if self.ndim() < 2 || s.shape() != &self.shape()[..self.ndim() - 1] {
            return Err(shape_err("scale_rows", self, s));
        }
        let w = *self.shape().last().unwrap();
        let rows = self.numel() / w;
        let mut data = vec![0.0f32; self.numel()];
        for r in 0..rows {
            let sv = s.data()[r];
            for j in 0..w {
                data[r * w + j] = self.data()[r * w + j] * sv;
            }
        }
        check_finite("scale_rows", &data)?;
        let (nx, ns) = (self.requires_grad(), s.requires_grad());
        let rg = tape_active() && (nx || ns);
        let out = Tensor::from_op(self.shape().to_vec(), data, rg);
        if rg {
            let (xid, sid) = (self.id(), s.id());
            let (xd, sd) = (self.data_arc(), s.data_arc());
            record(OpRecord {
                name: "scale_rows",
                output: out.id(),
                backward: Box::new(move |g| {
                    let mut c = Vec::new();
                    if nx {
                        let mut dx = vec![0.0f32; g.len()];
                        for r in 0..rows {
                            for j in 0..w {
                                dx[r * w + j] = g[r * w + j] * sd[r];
                            }
                        }
                        c.push((xid, dx));
                    }
                    if ns {
                        let mut ds = vec![0.0f32; rows];
                        for r in 0..rows {
                            for j in 0..w {
                                ds[r] += g[r * w + j] * xd[r * w + j];
                            }
                        }
                        c.push((sid, ds));
                    }
                    c
                }),
            });
        }
        Ok(out)
    }

    /// Scales each column of the trailing matrix: `out[..., i, j] =
    /// x[..., i, j] · s[..., j]`. `s` must have the shape of `x` minus its
    /// second-to-last axis.
    pub fn scale_cols(&self, s: &Tensor) -> Result<Tensor> {
        if self.ndim() < 2 {
            return Err(shape_err("scale_cols", self, s));
        }
        let d = self.ndim();
        let mut expect = self.shape().to_vec();
        expect.remove(d - 2);
        if s.shape() != expect.as_slice() {
            return Err(shape_err("scale_cols", self, s));
        }
        let w = self.shape()[d - 1];
        let n = self.shape()[d - 2];
        let batch = self.numel() / (n * w);
        let mut data = vec![0.0f32; self.numel()];
        for b in 0..batch {
            let sv = &s.data()[b * w..(b + 1) * w];
            for i in 0..n {
                let base = (b * n + i) * w;
                for j in 0..w {
                    data[base + j] = self.data()[base + j] * sv[j];
                }
            }
        }
        check_finite("scale_cols", &data)?;
        let (nx, ns) = (self.requires_grad(), s.requires_grad());
        let rg = tape_active() && (nx || ns);
        let out = Tensor::from_op(self.shape().to_vec(), data, rg);
        if rg {
            let (xid, sid) = (self.id(), s.id());
            let (xd, sd) = (self.data_arc(), s.data_arc());
            record(OpRecord {
                name: "scale_cols",
                output: out.id(),
                backward: Box::new(move |g| {
                    let mut c = Vec::new();
                    if nx {
                        let mut dx = vec![0.0f32; g.len()];
                        for b in 0..batch {
                            for i in 0..n {
                                let base = (b * n + i) * w;
                                for j in 0..w {
                                    dx[base + j] = g[base + j] * sd[b * w + j];
                                }
                            }
                        }
                        c.push((xid, dx));
                    }
                    if ns {
                        let mut ds = vec![0.0f32; batch * w];
                        for b in 0..batch {
                            for i in 0..n {
                                let base = (b * n + i) * w;
                                for j in 0..w {
                                    ds[b * w + j] += g[base + j] * xd[base + j];
                                }
                            }
                        }
                        c.push((sid, ds));
                    }
                    c
                }),
            });
        }
        Ok(out)
    }
}

pub(crate) fn l2_normalize_vjp(
    g: &[f32],
    u: &[f32],
    norms: &[f32],
    rows: usize,
    w: usize,
    eps: f32,
) -> Vec<f32> {
    let mut da = vec![0.0f32; g.len()];
    for r in 0..rows {
        let gr = &g[r * w..(r + 1) * w];
        let ur = &u[r * w..(r + 1) * w];
        let dst = &mut da[r * w..(r + 1) * w];
        if norms[r] > eps {
            let dot: f32 = gr.iter().zip(ur.iter()).map(|(g, u)| g * u).sum();
            for j in 0..w {
                dst[j] = (gr[j] - dot * ur[j]) / norms[r];
            }
        } else {
            for j in 0..w {
                dst[j] = gr[j] / eps;
            }
        }
    }
    da
}

/// Per-feature batch statistics produced by a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl Tensor {
    /// Train-mode batch norm over `[B, D]`: per-feature batch statistics
    /// (biased variance), then affine. Also returns the statistics so the
    /// caller can update running estimates.
    pub fn batch_norm_train(
        &self,
        gain: &Tensor,
        bias: &Tensor,
        eps: f32,
    ) -> Result<(Tensor, BatchStats)> {
        if self.ndim() != 2 {
            return Err(Error::InvalidArg {
                op: "batch_norm",
                msg: format!("expected [B, D], got {:?}", self.shape()),
            });
        }
        let (b, d) = (self.shape()[0], self.shape()[1]);
        if gain.numel() != d || bias.numel() != d {
            return Err(shape_err("batch_norm", self, gain));
        }
        let mut mean = vec![0.0f32; d];
        let mut var = vec![0.0f32; d];
        for row in 0..b {
            for j in 0..d {
                mean[j] += self.data()[row * d + j];
            }
        }
        for m in mean.iter_mut() {
            *m /= b as f32;
        }
        for row in 0..b {
            for j in 0..d {
                let c = self.data()[row * d + j] - mean[j];
                var[j] += c * c;
            }
        }
        for v in var.iter_mut() {
            *v /= b as f32;
        }
        let inv: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0f32; b * d];
        let mut data = vec![0.0f32; b * d];
        for row in 0..b {
            for j in 0..d {
                let xh = (self.data()[row * d + j] - mean[j]) * inv[j];
                xhat[row * d + j] = xh;
                data[row * d + j] = xh * gain.data()[j] + bias.data()[j];
            }
        }
        check_finite("batch_norm", &data)?;
        let (nx, ng, nb) = (
            self.requires_grad(),
            gain.requires_grad(),
            bias.requires_grad(),
        );
        let rg = tape_active() && (nx || ng || nb);
        let out = Tensor::from_op(self.shape().to_vec(), data, rg);
        if rg {
            let (xid, gid, bid) = (self.id(), gain.id(), bias.id());
            let gd = gain.data_arc();
            let inv_c = inv.clone();
            let xhat_c = xhat.clone();
            record(OpRecord {
                name: "batch_norm",
                output: out.id(),
                backward: Box::new(move |g| {
                    let mut c = Vec::new();
                    if nx {
                        let mut dx = vec![0.0f32; g.len()];
                        for j in 0..d {
                            let mut m1 = 0.0f32;
                            let mut m2 = 0.0f32;
                            for row in 0..b {
                                let gv = g[row * d + j];
                                m1 += gv;
                                m2 += gv * xhat_c[row * d + j];
                            }
                            m1 /= b as f32;
                            m2 /= b as f32;
                            for row in 0..b {
                                dx[row * d + j] = gd[j]
                                    * inv_c[j]
                                    * (g[row * d + j] - m1 - xhat_c[row * d + j] * m2);
                            }
                        }
                        c.push((xid, dx));
                    }
                    if ng {
                        let mut dg = vec![0.0f32; d];
                        for row in 0..b {
                            for j in 0..d {
                                dg[j] += g[row * d + j] * xhat_c[row * d + j];
                            }
                        }
                        c.push((gid, dg));
                    }
                    if nb {
                        let mut db = vec![0.0f32; d];
                        for row in 0..b {
                            for j in 0..d {
                                db[j] += g[row * d + j];
                            }
                        }
                        c.push((bid, db));
                    }
                    c
                }),
            });
        }
        Ok((out, BatchStats { mean, var }))
    }

    /// Inference-mode batch norm: affine transform with frozen running
    /// statistics.
    pub fn batch_norm_infer(
        &self,
        gain: &Tensor,
        bias: &Tensor,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f32,
    ) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(Error::InvalidArg {
                op: "batch_norm_infer",
                msg: format!("expected [B, D], got {:?}", self.shape()),
            });
        }
        let (b, d) = (self.shape()[0], self.shape()[1]);
        if gain.numel() != d
            || bias.numel() != d
            || running_mean.numel() != d
            || running_var.numel() != d
        {
            return Err(shape_err("batch_norm_infer", self, gain));
        }
        let inv: Vec<f32> = running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v + eps).sqrt())
            .collect();
        let mut xhat = vec![0.0f32; b * d];
        let mut data = vec![0.0f32; b * d];
        for row in 0..b {
            for j in 0..d {
                let xh = (self.data()[row * d + j] - running_mean.data()[j]) * inv[j];
                xhat[row * d + j] = xh;
                data[row * d + j] = xh * gain.data()[j] + bias.data()[j];
            }
        }
        check_finite("batch_norm_infer", &data)?;
        let (nx, ng, nb) = (
            self.requires_grad(),
            gain.requires_grad(),
            bias.requires_grad(),
        );
        let rg = tape_active() && (nx || ng || nb);
        let out = Tensor::from_op(self.shape().to_vec(), data, rg);
        if rg {
            let (xid, gid, bid) = (self.id(), gain.id(), bias.id());
            let gd = gain.data_arc();
            record(OpRecord {
                name: "batch_norm_infer",
                output: out.id(),
                backward: Box::new(move |g| {
                    let mut c = Vec::new();
                    if nx {
                        let mut dx = vec![0.0f32; g.len()];
                        for row in 0..b {
                            for j in 0..d {
                                dx[row * d + j] = g[row * d + j] * gd[j] * inv[j];
                            }
                        }
                        c.push((xid, dx));
                    }
                    if ng {
                        let mut dg = vec![0.0f32; d];
                        for row in 0..b {
                            for j in 0..d {
                                dg[j] += g[row * d + j] * xhat[row * d + j];
                            }
                        }
                        c.push((gid, dg));
                    }
                    if nb {
                        let mut db = vec![0.0f32; d];
                        for row in 0..b {
                            for j in 0..d {
                                db[j] += g[row * d + j];
                            }
                        }
                        c.push((bid, db));
                    }
                    c
                }),
            });
        }
        Ok(out)
    }
}
