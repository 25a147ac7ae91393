use crate::error::{Error, Result};
use crate::numerics::ops::shape_err;
use crate::numerics::{check_finite, record, tape_active, OpRecord, Tensor};

/// `true` when `small` is a suffix of `big` (broadcast over leading axes).
fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn sum_to_suffix(g: &[f32], suffix_len: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; suffix_len];
    for (i, v) in g.iter().enumerate() {
        out[i % suffix_len] += v;
    }
    out
}

impl Tensor {
    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(shape_err("add", self, rhs));
        }
        let data: Vec<f32> = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| a + b)
            .collect();
        check_finite("add", &data)?;
        let (na, nb) = (self.requires_grad(), rhs.requires_grad());
        let rg = tape_active() && (na || nb);
        let out = Tensor::from_op(self.shape().to_vec(), data, rg);
        if rg {
            let (aid, bid) = (self.id(), rhs.id());
            record(OpRecord {
                name: "add",
                output: out.id(),
                backward: Box::new(move |g| {
                    let mut c = Vec::new();
                    if na {
                        c.push((aid, g.to_vec()));
                    }
                    if nb {
                        c.push((bid, g.to_vec()));
                    }
                    c
                }),
            });
        }
        Ok(out)
    }

    /// Elementwise sum with `rhs` broadcast over the leading axes
    /// (its shape must be a suffix of `self`'s).
    pub fn add_bcast(&self, rhs: &Tensor) -> Result<Tensor> {
        if !is_suffix(self.shape(), rhs.shape()) {
            return Err(shape_err("add_bcast", self, rhs));
        }
        let w = rhs.numel();
        let data: Vec<f32> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a + rhs.data()[i % w])
            .collect();
        check_finite("add_bcast", &data)?;
        let (na, nb) = (self.requires_grad(), rhs.requires_grad());
        let rg = tape_active() && (na || nb);
        let out = Tensor::from_op(self.shape().to_vec(), data, rg);
        if rg {
            let (aid, bid) = (self.id(), rhs.id());
            record(OpRecord {
                name: "add_bcast",
                output: out.id(),
                backward: Box::new(move |g| {
                    let mut c = Vec::new();
                    if na {
                        c.push((aid, g.to_vec()));
                    }
                    if nb {
                        c.push((bid, sum_to_suffix(g, w)));
                    }
                    c
                }),
            });
        }
        Ok(out)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(shape_err("sub", self, rhs));
        }
        let data: Vec<f32> = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| a - b)
            .collect();
        check_finite("sub", &data)?;
        let (na, nb) = (self.requires_grad(), rhs.requires_grad());
        let rg = tape_active() && (na || nb);
        let out = Tensor::from_op(self.shape().to_vec(), data, rg);
        if rg {
            let (aid, bid) = (self.id(), rhs.id());
            record(OpRecord {
                name: "sub",
                output: out.id(),
                backward: Box::new(move |g| {
                    let mut c = Vec::new();
                    if na {
                        c.push((aid, g.to_vec()));
                    }
                    if nb {
                        c.push((bid, g.iter().map(|v| -v).collect()));
                    }
                    c
                }),
            });
        }
        Ok(out)
    }

    /// Hadamard (elementwise) product; shapes must match exactly.
    pub fn hadamard(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(shape_err("hadamard", self, rhs));
        }
        let data: Vec<f32> = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| a * b)
            .collect();
        check_finite("hadamard", &data)?;
        let (na, nb) = (self.requires_grad(), rhs.requires_grad());
        let rg = tape_active() && (na || nb);
        let out = Tensor::from_op(self.shape().to_vec(), data, rg);
        if rg {
            let (aid, bid) = (self.id(), rhs.id());
            let (ad, bd) = (self.data_arc(), rhs.data_arc());
            record(OpRecord {
                name: "hadamard",
                output: out.id(),
                backward: Box::new(move |g| {
                    let mut c = Vec::new();
                    if na {
                        c.push((aid, g.iter().zip(bd.iter()).map(|(g, b)| g * b).collect()));
                    }
                    if nb {
                        c.push((bid, g.iter().zip(ad.iter()).map(|(g, a)| g * a).collect()));
                    }
                    c
                }),
            });
        }
        Ok(out)
    }

    /// Hadamard product with `rhs` broadcast over leading axes.
    pub fn hadamard_bcast(&self, rhs: &Tensor) -> Result<Tensor> {
        if !is_suffix(self.shape(), rhs.shape()) {
            return Err(shape_err("hadamard_bcast", self, rhs));
        }
        let w = rhs.numel();
        let data: Vec<f32> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a * rhs.data()[i % w])
            .collect();
        check_finite("hadamard_bcast", &data)?;
        let (na, nb) = (self.requires_grad(), rhs.requires_grad());
        let rg = tape_active() && (na || nb);
        let out = Tensor::from_op(self.shape().to_vec(), data, rg);
        if rg {
            let (aid, bid) = (self.id(), rhs.id());
            let (ad, bd) = (self.data_arc(), rhs.data_arc());
            record(OpRecord {
                name: "hadamard_bcast",
                output: out.id(),
                backward: Box::new(move |g| {
                    let mut c = Vec::new();
                    if na {
                        c.push((
                            aid,
                            g.iter()
                                .enumerate()
                                .map(|(i, g)| g * bd[i % w])
                                .collect(),
                        ));
                    }
                    if nb {
                        let mut db = vec![0.0f32; w];
                        for (i, g) in g.iter().enumerate() {
                            db[i % w] += g * ad[i];
                        }
                        c.push((bid, db));
                    }
                    c
                }),
            });
        }
        Ok(out)
    }

    /// Multiply every element by a finite scalar.
    pub fn scale(&self, c: f32) -> Result<Tensor> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let data: Vec<f32> = self.data().iter().map(|a| a * c).collect();
        check_finite("scale", &data)?;
        let rg = tape_active() && self.requires_grad();
        let out = Tensor::from_op(self.shape().to_vec(), data, rg);
        if rg {
            let aid = self.id();
            record(OpRecord {
                name: "scale",
                output: out.id(),
                backward: Box::new(move |g| vec![(aid, g.iter().map(|v| v * c).collect())]),
            });
        }
        Ok(out)
    }

    pub fn add_scalar(&self, c: f32) -> Result<Tensor> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "add_scalar" });
        }
        let data: Vec<f32> = self.data().iter().map(|a| a + c).collect();
        check_finite("add_scalar", &data)?;
        let rg = tape_active() && self.requires_grad();
        let out = Tensor::from_op(self.shape().to_vec(), data, rg);
        if rg {
            let aid = self.id();
            record(OpRecord {
                name: "add_scalar",
                output: out.id(),
                backward: Box::new(move |g| vec![(aid, g.to_vec())]),
            });
        }
        Ok(out)
    }

    pub fn exp(&self) -> Result<Tensor> {
        let data: Vec<f32> = self.data().iter().map(|a| a.exp()).collect();
        check_finite("exp", &data)?;
        let rg = tape_active() && self.requires_grad();
        let out = Tensor::from_op(self.shape().to_vec(), data, rg);
        if rg {
            let aid = self.id();
            let y = out.data_arc();
            record(OpRecord {
                name: "exp",
                output: out.id(),
                backward: Box::new(move |g| {
                    vec![(aid, g.iter().zip(y.iter()).map(|(g, y)| g * y).collect())]
                }),
            });
        }
        Ok(out)
    }

    /// Elementwise square root; negative inputs surface as a non-finite error.
    pub fn sqrt(&self) -> Result<Tensor> {
        let data: Vec<f32> = self.data().iter().map(|a| a.sqrt()).collect();
        check_finite("sqrt", &data)?;
        let rg = tape_active() && self.requires_grad();
        let out = Tensor::from_op(self.shape().to_vec(), data, rg);
        if rg {
            let aid = self.id();
            let y = out.data_arc();
            record(OpRecord {
                name: "sqrt",
                output: out.id(),
                backward: Box::new(move |g| {
                    vec![(
                        aid,
                        g.iter()
                            .zip(y.iter())
                            .map(|(g, y)| g * 0.5 / y)
                            .collect(),
                    )]
                }),
            });
        }
        Ok(out)
    }

    /// Elementwise 1/sqrt(x).
    pub fn rsqrt(&self) -> Result<Tensor> {
        let data: Vec<f32> = self.data().iter().map(|a| 1.0 / a.sqrt()).collect();
        check_finite("rsqrt", &data)?;
        let rg = tape_active() && self.requires_grad();
        let out = Tensor::from_op(self.shape().to_vec(), data, rg);
        if rg {
            let aid = self.id();
            let x = self.data_arc();
            let y = out.data_arc();
            record(OpRecord {
                name: "rsqrt",
                output: out.id(),
                backward: Box::new(move |g| {
                    vec![(
                        aid,
                        g.iter()
                            .zip(y.iter().zip(x.iter()))
                            .map(|(g, (y, x))| -0.5 * g * y / x)
                            .collect(),
                    )]
                }),
            });
        }
        Ok(out)
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data: Vec<f32> = self.data().iter().map(|a| a.max(0.0)).collect();
        check_finite("relu", &data)?;
        let rg = tape_active() && self.requires_grad();
        let out = Tensor::from_op(self.shape().to_vec(), data, rg);
        if rg {
            let aid = self.id();
            let x = self.data_arc();
            record(OpRecord {
                name: "relu",
                output: out.id(),
                backward: Box::new(move |g| {
                    vec![(
                        aid,
                        g.iter()
                            .zip(x.iter())
                            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                            .collect(),
                    )]
                }),
            });
        }
        Ok(out)
    }

    /// Numerically stable softplus ln(1 + eˣ).
    pub fn softplus(&self) -> Result<Tensor> {
        let data: Vec<f32> = self
            .data()
            .iter()
            .map(|&a| a.max(0.0) + (-a.abs()).exp().ln_1p())
            .collect();
        check_finite("softplus", &data)?;
        let rg = tape_active() && self.requires_grad();
        let out = Tensor::from_op(self.shape().to_vec(), data, rg);
        if rg {
            let aid = self.id();
            let x = self.data_arc();
            record(OpRecord {
                name: "softplus",
                output: out.id(),
                backward: Box::new(move |g| {
                    vec![(
                        aid,
                        g.iter()
                            .zip(x.iter())
                            .map(|(g, &x)| {
                                let s = if x >= 0.0 {
                                    1.0 / (1.0 + (-x).exp())
                                } else {
                                    let e = x.exp();
                                    e / (1.0 + e)
                                };
                                g * s
                            })
                            .collect(),
                    )]
                }),
            });
        }
        Ok(out)
    }

    /// Exact erf-based GELU: x·Φ(x). Evaluated through f64 erf.
    pub fn gelu(&self) -> Result<Tensor> {
        let data: Vec<f32> = self.data().iter().map(|&a| gelu_f64(a as f64) as f32).collect();
        check_finite("gelu", &data)?;
        let rg = tape_active() && self.requires_grad();
        let out = Tensor::from_op(self.shape().to_vec(), data, rg);
        if rg {
            let aid = self.id();
            let x = self.data_arc();
            record(OpRecord {
                name: "gelu",
                output: out.id(),
                backward: Box::new(move |g| {
                    vec![(
                        aid,
                        g.iter()
                            .zip(x.iter())
                            .map(|(g, &x)| g * gelu_grad_f64(x as f64) as f32)
                            .collect(),
                    )]
                }),
            });
        }
        Ok(out)
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.3989422804014327;

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_f64(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

fn gelu_grad_f64(x: f64) -> f64 {
    std_normal_cdf(x) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}
