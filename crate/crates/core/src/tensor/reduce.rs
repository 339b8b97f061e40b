use std::sync::Arc;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Output shape and per-input-element destination index for a reduction.
fn reduction_plan(shape: &[usize], axes: &[usize], keepdim: bool) -> (Vec<usize>, Vec<usize>) {
    let nd = shape.len();
    let reduced: Vec<bool> = (0..nd).map(|d| axes.contains(&d)).collect();
    let kept_shape: Vec<usize> = (0..nd)
        .map(|d| if reduced[d] { 1 } else { shape[d] })
        .collect();
    let mut out_strides = vec![0usize; nd];
    let mut acc = 1;
    for d in (0..nd).rev() {
        out_strides[d] = if reduced[d] { 0 } else { acc };
        acc *= kept_shape[d];
    }
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut pos = 0usize;
    for _ in 0..total {
        map.push(pos);
        for d in (0..nd).rev() {
            idx[d] += 1;
            pos += out_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            pos -= out_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    let out_shape = if keepdim {
        kept_shape
    } else {
        (0..nd).filter(|d| !reduced[*d]).map(|d| shape[d]).collect()
    };
    (out_shape, map)
}

/// `(outer, len, inner)` decomposition around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<F: Element> Tensor<F> {
    fn check_axes(&self, op: &'static str, axes: &[usize]) -> Result<()> {
        if let Some(&bad) = axes.iter().find(|&&a| a >= self.ndim()) {
            return Err(Error::shape(op, &self.shape, &[bad]));
        }
        Ok(())
    }

    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<F>> {
        self.check_axes("sum_axes", axes)?;
        let (out_shape, map) = reduction_plan(&self.shape, axes, keepdim);
        let n_out: usize = out_shape.iter().product();
        let mut out = vec![F::zero(); n_out];
        for (&v, &o) in self.data.iter().zip(&map) {
            out[o] += v;
        }
        Tensor::from_op("sum_axes", out_shape, Arc::new(out), &[self], move |g, _| {
            vec![Some(map.iter().map(|&o| g[o]).collect())]
        })
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<F>> {
        self.check_axes("mean_axes", axes)?;
        let count: usize = axes.iter().map(|&a| self.shape[a]).product();
        Ok(self.sum_axes(axes, keepdim)?.scale(F::one() / F::c(count.max(1) as f64)))
    }

    pub fn sum_all(&self) -> Tensor<F> {
        let total = self.data.iter().fold(F::zero(), |a, &b| a + b);
        let n = self.numel();
        Tensor::from_op("sum_all", vec![], Arc::new(vec![total]), &[self], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
        .expect("single input")
    }

    pub fn mean_all(&self) -> Tensor<F> {
        let n = self.numel().max(1);
        self.sum_all().scale(F::one() / F::c(n as f64))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor<F>> {
        self.check_axes("softmax", &[axis])?;
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let mut out = vec![F::zero(); self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let m = (0..len).map(|j| self.data[at(j)]).fold(F::neg_infinity(), F::max);
                let mut s = F::zero();
                for j in 0..len {
                    let e = (self.data[at(j)] - m).exp();
                    out[at(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / s;
                }
            }
        }
        let out = Arc::new(out);
        let y = Arc::clone(&out);
        Tensor::from_op("softmax", self.shape.clone(), out, &[self], move |g, _| {
            let mut gx = vec![F::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let dot = (0..len).fold(F::zero(), |acc, j| acc + g[at(j)] * y[at(j)]);
                    for j in 0..len {
                        gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<F>> {
        self.check_axes("log_softmax", &[axis])?;
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let mut out = vec![F::zero(); self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let m = (0..len).map(|j| self.data[at(j)]).fold(F::neg_infinity(), F::max);
                let s = (0..len).fold(F::zero(), |acc, j| acc + (self.data[at(j)] - m).exp());
                let lse = m + s.ln();
                for j in 0..len {
                    out[at(j)] = self.data[at(j)] - lse;
                }
            }
        }
        let out = Arc::new(out);
        let y = Arc::clone(&out);
        Tensor::from_op("log_softmax", self.shape.clone(), out, &[self], move |g, _| {
            let mut gx = vec![F::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let gs = (0..len).fold(F::zero(), |acc, j| acc + g[at(j)]);
                    for j in 0..len {
                        gx[at(j)] = g[at(j)] - y[at(j)].exp() * gs;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Divides each slice along `axis` by its Euclidean norm (floored at `eps`).
    pub fn l2_normalize(&self, axis: usize, eps: F) -> Result<Tensor<F>> {
        self.check_axes("l2_normalize", &[axis])?;
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let mut out = vec![F::zero(); self.numel()];
        let mut norms = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let n = (0..len)
                    .fold(F::zero(), |acc, j| acc + self.data[at(j)] * self.data[at(j)])
                    .sqrt();
                norms[o * inner + i] = n;
                let d = n.max(eps);
                for j in 0..len {
                    out[at(j)] = self.data[at(j)] / d;
                }
            }
        }
        let out = Arc::new(out);
        let y = Arc::clone(&out);
        Tensor::from_op("l2_normalize", self.shape.clone(), out, &[self], move |g, _| {
            let mut gx = vec![F::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let n = norms[o * inner + i];
                    if n > eps {
                        let dot = (0..len).fold(F::zero(), |acc, j| acc + g[at(j)] * y[at(j)]);
                        for j in 0..len {
                            gx[at(j)] = (g[at(j)] - y[at(j)] * dot) / n;
                        }
                    } else {
                        for j in 0..len {
                            gx[at(j)] = g[at(j)] / eps;
                        }
                    }
                }
            }
            vec![Some(gx)]
        })
    }
}
