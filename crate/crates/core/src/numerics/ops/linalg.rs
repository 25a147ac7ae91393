use crate::error::{Error, Result};
use crate::numerics::ops::shape_err;
use crate::numerics::{check_finite, record, tape_active, OpRecord, Tensor};

/// C[m,n] += A[m,k] · B[k,n]
pub(crate) fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// C[m,k] += A[m,n] · B[k,n]ᵀ
fn mm_abt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0f32;
            for (av, bv) in arow.iter().zip(brow.iter()) {
                s += av * bv;
            }
            *o += s;
        }
    }
}

/// C[k,n] += A[m,k]ᵀ · B[m,n]
fn mm_atb(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// Shapes a matmul supports: 2-d × 2-d, batched × batched (equal batch),
/// batched × 2-d (rhs shared across the batch).
struct MatmulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    lhs_batched: bool,
    rhs_batched: bool,
    out_shape: Vec<usize>,
}

fn plan_matmul(a: &Tensor, b: &Tensor) -> Result<MatmulPlan> {
    let (ash, bsh) = (a.shape(), b.shape());
    match (ash.len(), bsh.len()) {
        (2, 2) => {
            if ash[1] != bsh[0] {
                return Err(shape_err("matmul", a, b));
            }
            Ok(MatmulPlan {
                batch: 1,
                m: ash[0],
                k: ash[1],
                n: bsh[1],
                lhs_batched: false,
                rhs_batched: false,
                out_shape: vec![ash[0], bsh[1]],
            })
        }
        (3, 3) => {
            if ash[0] != bsh[0] || ash[2] != bsh[1] {
                return Err(shape_err("matmul", a, b));
            }
            Ok(MatmulPlan {
                batch: ash[0],
                m: ash[1],
                k: ash[2],
                n: bsh[2],
                lhs_batched: true,
                rhs_batched: true,
                out_shape: vec![ash[0], ash[1], bsh[2]],
            })
        }
        (3, 2) => {
            if ash[2] != bsh[0] {
                return Err(shape_err("matmul", a, b));
            }
            Ok(MatmulPlan {
                batch: ash[0],
                m: ash[1],
                k: ash[2],
                n: bsh[1],
                lhs_batched: true,
                rhs_batched: false,
                out_shape: vec![ash[0], ash[1], bsh[1]],
            })
        }
        _ => Err(Error::InvalidArg {
            op: "matmul",
            msg: format!("unsupported ranks: {:?} × {:?}", ash, bsh),
        }),
    }
}

impl Tensor {
    /// Batched matrix product. The inner extents must match; the error
    /// names both shapes.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let plan = plan_matmul(self, rhs)?;
        let MatmulPlan {
            batch,
            m,
            k,
            n,
            lhs_batched,
            rhs_batched,
            out_shape,
        } = plan;
        let mut data = vec![0.0f32; batch * m * n];
        for bi in 0..batch {
            let ab = if lhs_batched {
                &self.data()[bi * m * k..(bi + 1) * m * k]
            } else {
                self.data()
            };
            let bb = if rhs_batched {
                &rhs.data()[bi * k * n..(bi + 1) * k * n]
            } else {
                rhs.data()
            };
            mm(ab, bb, m, k, n, &mut data[bi * m * n..(bi + 1) * m * n]);
        }
        check_finite("matmul", &data)?;
        let (na, nb) = (self.requires_grad(), rhs.requires_grad());
        let rg = tape_active() && (na || nb);
        let out = Tensor::from_op(out_shape, data, rg);
        if rg {
            let (aid, bid) = (self.id(), rhs.id());
            let (ad, bd) = (self.data_arc(), rhs.data_arc());
            record(OpRecord {
                name: "matmul",
                output: out.id(),
                backward: Box::new(move |g| {
                    let mut c = Vec::new();
                    if na {
                        // dA = G · Bᵀ (accumulated over the batch when A is shared)
                        let mut da = vec![0.0f32; ad.len()];
                        for bi in 0..batch {
                            let gb = &g[bi * m * n..(bi + 1) * m * n];
                            let bb = if rhs_batched {
                                &bd[bi * k * n..(bi + 1) * k * n]
                            } else {
                                &bd[..]
                            };
                            let dst = if lhs_batched {
                                &mut da[bi * m * k..(bi + 1) * m * k]
                            } else {
                                &mut da[..]
                            };
                            mm_abt(gb, bb, m, n, k, dst);
                        }
                        c.push((aid, da));
                    }
                    if nb {
                        // dB = Aᵀ · G (accumulated over the batch when B is shared)
                        let mut db = vec![0.0f32; bd.len()];
                        for bi in 0..batch {
                            let gb = &g[bi * m * n..(bi + 1) * m * n];
                            let ab = if lhs_batched {
                                &ad[bi * m * k..(bi + 1) * m * k]
                            } else {
                                &ad[..]
                            };
                            let dst = if rhs_batched {
                                &mut db[bi * k * n..(bi + 1) * k * n]
                            } else {
                                &mut db[..]
                            };
                            mm_atb(ab, gb, m, k, n, dst);
                        }
                        c.push((bid, db));
                    }
                    c
                }),
            });
        }
        Ok(out)
    }

    /// Swap the last two axes (rank 2 or 3).
    pub fn transpose(&self) -> Result<Tensor> {
        let sh = self.shape();
        if sh.len() != 2 && sh.len() != 3 {
            return Err(Error::InvalidArg {
                op: "transpose",
                msg: format!("expected rank 2 or 3, got {:?}", sh),
            });
        }
        let (batch, r, c) = if sh.len() == 2 {
            (1, sh[0], sh[1])
        } else {
            (sh[0], sh[1], sh[2])
        };
        let mut data = vec![0.0f32; self.numel()];
        for bi in 0..batch {
            let src = &self.data()[bi * r * c..(bi + 1) * r * c];
            let dst = &mut data[bi * r * c..(bi + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut out_shape = sh.to_vec();
        let d = out_shape.len();
        out_shape.swap(d - 1, d - 2);
        let rg = tape_active() && self.requires_grad();
        let out = Tensor::from_op(out_shape, data, rg);
        if rg {
            let aid = self.id();
            record(OpRecord {
                name: "transpose",
                output: out.id(),
                backward: Box::new(move |g| {
                    let mut da = vec![0.0f32; g.len()];
                    for bi in 0..batch {
                        let gsrc = &g[bi * r * c..(bi + 1) * r * c];
                        let dst = &mut da[bi * r * c..(bi + 1) * r * c];
                        for j in 0..c {
                            for i in 0..r {
                                dst[i * c + j] = gsrc[j * r + i];
                            }
                        }
                    }
                    vec![(aid, da)]
                }),
            });
        }
        Ok(out)
    }
}
