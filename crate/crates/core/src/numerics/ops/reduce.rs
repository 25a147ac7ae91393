use crate::error::{Error, Result};
use crate::numerics::{check_finite, record, tape_active, OpRecord, Tensor};

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

impl Tensor {
    fn reduce_axis(&self, op: &'static str, axis: usize, mean: bool) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(Error::InvalidArg {
                op,
                msg: format!("axis {} out of range for shape {:?}", axis, self.shape()),
            });
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let scale = if mean { 1.0 / len as f32 } else { 1.0 };
        let mut data = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, v) in dst.iter_mut().zip(&self.data()[base..base + inner]) {
                    *d += v;
                }
            }
        }
        if mean {
            for d in data.iter_mut() {
                *d *= scale;
            }
        }
        check_finite(op, &data)?;
        let rg = tape_active() && self.requires_grad();
        let out = Tensor::from_op(reduced_shape(self.shape(), axis), data, rg);
        if rg {
            let aid = self.id();
            let total = self.numel();
            record(OpRecord {
                name: op,
                output: out.id(),
                backward: Box::new(move |g| {
                    let mut da = vec![0.0f32; total];
                    for o in 0..outer {
                        for a in 0..len {
                            let base = (o * len + a) * inner;
                            for i in 0..inner {
                                da[base + i] = g[o * inner + i] * scale;
                            }
                        }
                    }
                    vec![(aid, da)]
                }),
            });
        }
        Ok(out)
    }

    /// Sum along one axis; the axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis("sum_axis", axis, false)
    }

    /// Mean along one axis; the axis is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis("mean_axis", axis, true)
    }

    /// Sum of all elements, as a scalar tensor of shape `[1]`.
    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f32 = self.data().iter().sum();
        check_finite("sum_all", &[s])?;
        let rg = tape_active() && self.requires_grad();
        let out = Tensor::from_op(vec![1], vec![s], rg);
        if rg {
            let aid = self.id();
            let n = self.numel();
            record(OpRecord {
                name: "sum_all",
                output: out.id(),
                backward: Box::new(move |g| vec![(aid, vec![g[0]; n])]),
            });
        }
        Ok(out)
    }

    /// Mean of all elements, as a scalar tensor of shape `[1]`.
    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel();
        let s: f32 = self.data().iter().sum::<f32>() / n as f32;
        check_finite("mean_all", &[s])?;
        let rg = tape_active() && self.requires_grad();
        let out = Tensor::from_op(vec![1], vec![s], rg);
        if rg {
            let aid = self.id();
            record(OpRecord {
                name: "mean_all",
                output: out.id(),
                backward: Box::new(move |g| vec![(aid, vec![g[0] / n as f32; n])]),
            });
        }
        Ok(out)
    }
}
