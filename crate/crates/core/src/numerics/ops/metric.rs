use crate::error::{Error, Result};
use crate::numerics::ops::normalize::l2_normalize_vjp;
use crate::numerics::ops::{logsumexp_row, rows_of};
use crate::numerics::{check_finite, record, tape_active, OpRecord, Tensor};

impl Tensor {
    /// Pairwise cosine similarities of the row vectors of the trailing
    /// matrix: `out[..., i, j] = ⟨vᵢ, vⱼ⟩ / (‖vᵢ‖‖vⱼ‖)`, with zero norms
    /// guarded by `eps` in the denominator.
    pub fn cosine_matrix(&self, eps: f32) -> Result<Tensor> {
        if self.ndim() < 2 {
            return Err(Error::InvalidArg {
                op: "cosine_matrix",
                msg: format!("expected at least rank 2, got {:?}", self.shape()),
            });
        }
        let d = *self.shape().last().unwrap();
        let n = self.shape()[self.ndim() - 2];
        let batch = self.numel() / (n * d);
        let (rows, _) = rows_of(self.shape());

        // Row-normalized copy of the input, plus per-row norms.
        let mut u = vec![0.0f32; self.numel()];
        let mut norms = vec![0.0f32; rows];
        for r in 0..rows {
            let src = &self.data()[r * d..(r + 1) * d];
            let norm = src.iter().map(|v| v * v).sum::<f32>().sqrt();
            norms[r] = norm;
            let denom = norm.max(eps);
            for j in 0..d {
                u[r * d + j] = src[j] / denom;
            }
        }

        let mut data = vec![0.0f32; batch * n * n];
        for b in 0..batch {
            let ub = &u[b * n * d..(b + 1) * n * d];
            let cb = &mut data[b * n * n..(b + 1) * n * n];
            for i in 0..n {
                for j in 0..n {
                    let mut s = 0.0f32;
                    for k in 0..d {
                        s += ub[i * d + k] * ub[j * d + k];
                    }
                    cb[i * n + j] = s;
                }
            }
        }
        check_finite("cosine_matrix", &data)?;

        let mut out_shape = self.shape().to_vec();
        let nd = out_shape.len();
        out_shape[nd - 1] = n;
        let rg = tape_active() && self.requires_grad();
        let out = Tensor::from_op(out_shape, data, rg);
        if rg {
            let aid = self.id();
            record(OpRecord {
                name: "cosine_matrix",
                output: out.id(),
                backward: Box::new(move |g| {
                    // dL/dU = (G + Gᵀ)·U per batch, then backprop the row
                    // normalization u = v / max(‖v‖, eps).
                    let mut gu = vec![0.0f32; u.len()];
                    for b in 0..batch {
                        let gb = &g[b * n * n..(b + 1) * n * n];
                        let ub = &u[b * n * d..(b + 1) * n * d];
                        let gub = &mut gu[b * n * d..(b + 1) * n * d];
                        for i in 0..n {
                            for j in 0..n {
                                let w = gb[i * n + j] + gb[j * n + i];
                                if w != 0.0 {
                                    for k in 0..d {
                                        gub[i * d + k] += w * ub[j * d + k];
                                    }
                                }
                            }
                        }
                    }
                    vec![(aid, l2_normalize_vjp(&gu, &u, &norms, rows, d, eps))]
                }),
            });
        }
        Ok(out)
    }

    /// All-pairs Euclidean (non-squared) distances of the rows of `[B, D]`,
    /// stabilized as `sqrt(‖fᵢ−fⱼ‖² + eps)` so the diagonal stays
    /// differentiable.
    pub fn pairwise_distances(&self, eps: f32) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(Error::InvalidArg {
                op: "pairwise_distances",
                msg: format!("expected [B, D], got {:?}", self.shape()),
            });
        }
        let (b, d) = (self.shape()[0], self.shape()[1]);
        let mut data = vec![0.0f32; b * b];
        for i in 0..b {
            for j in 0..b {
                let mut s = 0.0f32;
                for k in 0..d {
                    let c = self.data()[i * d + k] - self.data()[j * d + k];
                    s += c * c;
                }
                data[i * b + j] = (s + eps).sqrt();
            }
        }
        check_finite("pairwise_distances", &data)?;
        let rg = tape_active() && self.requires_grad();
        let out = Tensor::from_op(vec![b, b], data, rg);
        if rg {
            let aid = self.id();
            let x = self.data_arc();
            let dist = out.data_arc();
            record(OpRecord {
                name: "pairwise_distances",
                output: out.id(),
                backward: Box::new(move |g| {
                    let mut dx = vec![0.0f32; b * d];
                    for i in 0..b {
                        for j in 0..b {
                            let w = g[i * b + j] + g[j * b + i];
                            if w != 0.0 {
                                let inv = 1.0 / dist[i * b + j];
                                for k in 0..d {
                                    let diff = x[i * d + k] - x[j * d + k];
                                    dx[i * d + k] += w * diff * inv;
                                }
                            }
                        }
                    }
                    vec![(aid, dx)]
                }),
            });
        }
        Ok(out)
    }
}

/// Batch-mean cross-entropy of logits `[B, K]` against integer labels,
/// computed with a stable log-sum-exp. Out-of-range labels are a contract
/// error.
pub(crate) fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if logits.ndim() != 2 {
        return Err(Error::InvalidArg {
            op: "cross_entropy",
            msg: format!("expected [B, K] logits, got {:?}", logits.shape()),
        });
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::InvalidArg {
            op: "cross_entropy",
            msg: format!("{} labels for batch of {}", labels.len(), b),
        });
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!(
            "cross_entropy: label {} out of range [0, {})",
            bad, k
        )));
    }
    let mut total = 0.0f32;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        total += logsumexp_row(row) - row[y];
    }
    let loss = total / b as f32;
    check_finite("cross_entropy", &[loss])?;
    let rg = tape_active() && logits.requires_grad();
    let out = Tensor::from_op(vec![1], vec![loss], rg);
    if rg {
        let lid = logits.id();
        let ld = logits.data_arc();
        let labels = labels.to_vec();
        record(OpRecord {
            name: "cross_entropy",
            output: out.id(),
            backward: Box::new(move |g| {
                let scale = g[0] / b as f32;
                let mut dl = vec![0.0f32; b * k];
                for (i, &y) in labels.iter().enumerate() {
                    let row = &ld[i * k..(i + 1) * k];
                    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let sum: f32 = row.iter().map(|&v| (v - m).exp()).sum();
                    for j in 0..k {
                        let p = (row[j] - m).exp() / sum;
                        dl[i * k + j] = scale * (p - if j == y { 1.0 } else { 0.0 });
                    }
                }
                vec![(lid, dl)]
            }),
        });
    }
    Ok(out)
}
