use crate::error::{Error, Result};
use crate::numerics::{record, tape_active, OpRecord, Tensor};

impl Tensor {
    /// Lossless reinterpretation of the buffer under a new shape with the
    /// same element count. Bit-exact round trips by construction.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::InvalidArg {
                op: "reshape",
                msg: format!("cannot reshape {:?} into {:?}", self.shape(), shape),
            });
        }
        let rg = tape_active() && self.requires_grad();
        let out = Tensor::from_op(shape.to_vec(), self.data().to_vec(), rg);
        if rg {
            let aid = self.id();
            record(OpRecord {
                name: "reshape",
                output: out.id(),
                backward: Box::new(move |g| vec![(aid, g.to_vec())]),
            });
        }
        Ok(out)
    }

    /// Reorders the last axis: `out[..., k] = self[..., perm[k]]`.
    /// `perm` must be a permutation of `0..last_extent`.
    pub fn permute_last(&self, perm: &[usize]) -> Result<Tensor> {
        let w = *self.shape().last().ok_or(Error::InvalidArg {
            op: "permute_last",
            msg: "0-d tensor".into(),
        })?;
        if perm.len() != w {
            return Err(Error::InvalidArg {
                op: "permute_last",
                msg: format!("perm length {} vs last extent {}", perm.len(), w),
            });
        }
        let rows = self.numel() / w;
        let mut data = vec![0.0f32; self.numel()];
        for r in 0..rows {
            let src = &self.data()[r * w..(r + 1) * w];
            let dst = &mut data[r * w..(r + 1) * w];
            for (k, &p) in perm.iter().enumerate() {
                dst[k] = src[p];
            }
        }
        let rg = tape_active() && self.requires_grad();
        let out = Tensor::from_op(self.shape().to_vec(), data, rg);
        if rg {
            let aid = self.id();
            let perm = perm.to_vec();
            record(OpRecord {
                name: "permute_last",
                output: out.id(),
                backward: Box::new(move |g| {
                    let mut da = vec![0.0f32; g.len()];
                    for r in 0..rows {
                        let gsrc = &g[r * w..(r + 1) * w];
                        let dst = &mut da[r * w..(r + 1) * w];
                        for (k, &p) in perm.iter().enumerate() {
                            dst[p] = gsrc[k];
                        }
                    }
                    vec![(aid, da)]
                }),
            });
        }
        Ok(out)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.ndim() || start + len > self.shape()[axis] {
            return Err(Error::InvalidArg {
                op: "slice_axis",
                msg: format!(
                    "slice [{}, {}) on axis {} of shape {:?}",
                    start,
                    start + len,
                    axis,
                    self.shape()
                ),
            });
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let extent = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let rg = tape_active() && self.requires_grad();
        let out = Tensor::from_op(out_shape, data, rg);
        if rg {
            let aid = self.id();
            let total = self.numel();
            record(OpRecord {
                name: "slice_axis",
                output: out.id(),
                backward: Box::new(move |g| {
                    let mut da = vec![0.0f32; total];
                    for o in 0..outer {
                        let base = (o * extent + start) * inner;
                        let gbase = o * len * inner;
                        da[base..base + len * inner]
                            .copy_from_slice(&g[gbase..gbase + len * inner]);
                    }
                    vec![(aid, da)]
                }),
            });
        }
        Ok(out)
    }

    /// Gathers entries of a square `[B, B]` matrix at the given (row, col)
    /// pairs into a vector of length `pairs.len()`.
    pub fn select_pairs(&self, pairs: &[(usize, usize)]) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(Error::InvalidArg {
                op: "select_pairs",
                msg: format!("expected a matrix, got {:?}", self.shape()),
            });
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let mut data = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs {
            if i >= r || j >= c {
                return Err(Error::InvalidArg {
                    op: "select_pairs",
                    msg: format!("pair ({}, {}) out of range for {:?}", i, j, self.shape()),
                });
            }
            data.push(self.data()[i * c + j]);
        }
        let rg = tape_active() && self.requires_grad();
        let out = Tensor::from_op(vec![pairs.len()], data, rg);
        if rg {
            let aid = self.id();
            let pairs = pairs.to_vec();
            let total = self.numel();
            record(OpRecord {
                name: "select_pairs",
                output: out.id(),
                backward: Box::new(move |g| {
                    let mut da = vec![0.0f32; total];
                    for (t, &(i, j)) in pairs.iter().enumerate() {
                        da[i * c + j] += g[t];
                    }
                    vec![(aid, da)]
                }),
            });
        }
        Ok(out)
    }
}

/// Concatenate tensors along `axis`; all other extents must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::InvalidArg {
            op: "concat",
            msg: "no tensors given".into(),
        });
    }
    let first = parts[0];
    if axis >= first.ndim() {
        return Err(Error::InvalidArg {
            op: "concat",
            msg: format!("axis {} out of range for {:?}", axis, first.shape()),
        });
    }
    for p in parts {
        if p.ndim() != first.ndim()
            || p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total_extent: usize = extents.iter().sum();

    let mut data = Vec::with_capacity(outer * total_extent * inner);
    for o in 0..outer {
        for (p, ext) in parts.iter().zip(&extents) {
            let base = o * ext * inner;
            data.extend_from_slice(&p.data()[base..base + ext * inner]);
        }
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = total_extent;

    let needs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
    let rg = tape_active() && needs.iter().any(|&b| b);
    let out = Tensor::from_op(out_shape, data, rg);
    if rg {
        let ids: Vec<_> = parts.iter().map(|p| p.id()).collect();
        let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        record(OpRecord {
            name: "concat",
            output: out.id(),
            backward: Box::new(move |g| {
                let mut grads: Vec<Vec<f32>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
                let mut cursor = 0usize;
                for o in 0..outer {
                    for (pi, ext) in extents.iter().enumerate() {
                        let base = o * ext * inner;
                        grads[pi][base..base + ext * inner]
                            .copy_from_slice(&g[cursor..cursor + ext * inner]);
                        cursor += ext * inner;
                    }
                }
                ids.iter()
                    .zip(grads)
                    .zip(&needs)
                    .filter(|(_, &need)| need)
                    .map(|((id, gr), _)| (*id, gr))
                    .collect()
            }),
        });
    }
    Ok(out)
}
