use std::sync::Arc;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Per-channel batch statistics (biased variance) from a training-mode
/// batch-norm call.
#[derive(Debug, Clone)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

/// `(N, C, spatial)` view of an `[N, C]` or `[N, C, H, W]` tensor.
fn channel_layout(op: &'static str, shape: &[usize], c: usize) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, ch] if ch == c => Ok((n, ch, 1)),
        [n, ch, h, w] if ch == c => Ok((n, ch, h * w)),
        _ => Err(Error::shape(op, shape, &[c])),
    }
}

/// Output value of `forward_fn(input)` with the gradient of
/// `surrogate_fn(input)`.
pub fn straight_through<F, Fwd, Sur>(forward_fn: Fwd, surrogate_fn: Sur, input: &Tensor<F>) -> Result<Tensor<F>>
where
    F: Element,
    Fwd: FnOnce(&Tensor<F>) -> Result<Tensor<F>>,
    Sur: FnOnce(&Tensor<F>) -> Result<Tensor<F>>,
{
    let value = forward_fn(&input.detach())?;
    let surrogate = surrogate_fn(input)?;
    surrogate.with_value(&value)
}

impl<F: Element> Tensor<F> {
    /// Replaces this tensor's values by `value` while routing gradients to
    /// `self` unchanged.
    pub fn with_value(&self, value: &Tensor<F>) -> Result<Tensor<F>> {
        if value.shape != self.shape {
            return Err(Error::shape("straight_through", &value.shape, &self.shape));
        }
        Tensor::from_op(
            "straight_through",
            self.shape.clone(),
            Arc::clone(&value.data),
            &[self],
            |g, _| vec![Some(g.to_vec())],
        )
    }

    /// Values unchanged, gradient blocked.
    pub fn stop_gradient(&self) -> Tensor<F> {
        self.detach()
    }

    /// Batch normalisation using the batch's own statistics.
    pub fn batch_norm_train(
        &self,
        gamma: &Tensor<F>,
        beta: &Tensor<F>,
        eps: F,
    ) -> Result<(Tensor<F>, BatchStats<F>)> {
        let c = gamma.numel();
        let (n, _, sp) = channel_layout("batch_norm", &self.shape, c)?;
        if beta.numel() != c {
            return Err(Error::shape("batch_norm", &gamma.shape, &beta.shape));
        }
        let count = F::c((n * sp) as f64);
        let x = &self.data;
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for ch in 0..c {
            let mut s = F::zero();
            for img in 0..n {
                s += x[(img * c + ch) * sp..][..sp].iter().copied().sum::<F>();
            }
            let m = s / count;
            let mut v = F::zero();
            for img in 0..n {
                v += x[(img * c + ch) * sp..][..sp]
                    .iter()
                    .map(|&t| (t - m) * (t - m))
                    .sum::<F>();
            }
            mean[ch] = m;
            var[ch] = v / count;
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![F::zero(); x.len()];
        let mut out = vec![F::zero(); x.len()];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * sp;
                for p in base..base + sp {
                    xhat[p] = (x[p] - mean[ch]) * inv_std[ch];
                    out[p] = xhat[p] * gamma.data[ch] + beta.data[ch];
                }
            }
        }
        let gam = Arc::clone(&gamma.data);
        let y = Tensor::from_op(
            "batch_norm",
            self.shape.clone(),
            Arc::new(out),
            &[self, gamma, beta],
            move |g, needs| {
                let mut sum_g = vec![F::zero(); c];
                let mut sum_gx = vec![F::zero(); c];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * sp;
                        for p in base..base + sp {
                            sum_g[ch] += g[p];
                            sum_gx[ch] += g[p] * xhat[p];
                        }
                    }
                }
                let gx = needs[0].then(|| {
                    let mut gx = vec![F::zero(); g.len()];
                    for img in 0..n {
                        for ch in 0..c {
                            let k = gam[ch] * inv_std[ch] / count;
                            let base = (img * c + ch) * sp;
                            for p in base..base + sp {
                                gx[p] = k * (count * g[p] - sum_g[ch] - xhat[p] * sum_gx[ch]);
                            }
                        }
                    }
                    gx
                });
                vec![gx, needs[1].then(|| sum_gx.clone()), needs[2].then(|| sum_g.clone())]
            },
        )?;
        Ok((y, BatchStats { mean, var }))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Tensor<F>,
        beta: &Tensor<F>,
        mean: &[F],
        var: &[F],
        eps: F,
    ) -> Result<Tensor<F>> {
        let c = gamma.numel();
        let (n, _, sp) = channel_layout("batch_norm", &self.shape, c)?;
        if beta.numel() != c || mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", &gamma.shape, &beta.shape));
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let x = Arc::clone(&self.data);
        let mut out = vec![F::zero(); x.len()];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * sp;
                for p in base..base + sp {
                    out[p] = (x[p] - mean[ch]) * inv_std[ch] * gamma.data[ch] + beta.data[ch];
                }
            }
        }
        let gam = Arc::clone(&gamma.data);
        Tensor::from_op(
            "batch_norm_eval",
            self.shape.clone(),
            Arc::new(out),
            &[self, gamma, beta],
            move |g, needs| {
                let mut gx = needs[0].then(|| vec![F::zero(); g.len()]);
                let mut ggam = vec![F::zero(); c];
                let mut gbeta = vec![F::zero(); c];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * sp;
                        for p in base..base + sp {
                            if let Some(gx) = gx.as_mut() {
                                gx[p] = g[p] * gam[ch] * inv_std[ch];
                            }
                            ggam[ch] += g[p] * (x[p] - mean[ch]) * inv_std[ch];
                            gbeta[ch] += g[p];
                        }
                    }
                }
                vec![gx.take(), needs[1].then_some(ggam), needs[2].then_some(gbeta)]
            },
        )
    }

    /// Non-overlapping `k x k` average pooling of NCHW input (trailing
    /// rows/columns that do not fill a window are dropped).
    pub fn avg_pool2d(&self, k: usize) -> Result<Tensor<F>> {
        if self.ndim() != 4 || k == 0 || self.shape[2] < k || self.shape[3] < k {
            return Err(Error::shape("avg_pool2d", &self.shape, &[k]));
        }
        let [n, c, h, w] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        let (ho, wo) = (h / k, w / k);
        let inv = F::one() / F::c((k * k) as f64);
        let mut out = vec![F::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            let src = &self.data[plane * h * w..][..h * w];
            let dst = &mut out[plane * ho * wo..][..ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = F::zero();
                    for dy in 0..k {
                        for dx in 0..k {
                            s += src[(oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    dst[oy * wo + ox] = s * inv;
                }
            }
        }
        Tensor::from_op("avg_pool2d", vec![n, c, ho, wo], Arc::new(out), &[self], move |g, _| {
            let mut gx = vec![F::zero(); n * c * h * w];
            for plane in 0..n * c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let v = g[plane * ho * wo + oy * wo + ox] * inv;
                        for dy in 0..k {
                            for dx in 0..k {
                                gx[plane * h * w + (oy * k + dy) * w + ox * k + dx] = v;
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Same 2-D filter applied to every channel with replicate padding,
    /// evaluated in residual form `x_p + sum_i w_i (x_{p+i} - x_p)` so that
    /// constant regions come out bit-exact whenever the kernel sums to one.
    pub fn filter2d(&self, kernel: &Tensor<F>) -> Result<Tensor<F>> {
        if self.ndim() != 4
            || kernel.ndim() != 2
            || kernel.shape[0] % 2 == 0
            || kernel.shape[1] % 2 == 0
        {
            return Err(Error::shape("filter2d", &self.shape, &kernel.shape));
        }
        let [n, c, h, w] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        let (kh, kw) = (kernel.shape[0], kernel.shape[1]);
        let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
        let clampi = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
        // neighbour source index per (tap, pixel) within a plane
        let mut taps = Vec::with_capacity(kh * kw);
        for ky in 0..kh {
            for kx in 0..kw {
                let (dy, dx) = (ky as isize - ry, kx as isize - rx);
                let map: Vec<usize> = (0..h * w)
                    .map(|p| {
                        let (y, x) = ((p / w) as isize, (p % w) as isize);
                        clampi(y + dy, h) * w + clampi(x + dx, w)
                    })
                    .collect();
                taps.push(map);
            }
        }
        let taps = Arc::new(taps);
        let xs = Arc::clone(&self.data);
        let ks = Arc::clone(&kernel.data);
        let mut out = xs.as_ref().clone();
        for plane in 0..n * c {
            let src = &xs[plane * h * w..][..h * w];
            let dst = &mut out[plane * h * w..][..h * w];
            for (t, map) in taps.iter().enumerate() {
                let wt = ks[t];
                if wt == F::zero() {
                    continue;
                }
                for p in 0..h * w {
                    dst[p] += wt * (src[map[p]] - src[p]);
                }
            }
        }
        Tensor::from_op(
            "filter2d",
            self.shape.clone(),
            Arc::new(out),
            &[self, kernel],
            move |g, needs| {
                let ksum: F = ks.iter().copied().sum();
                let gx = needs[0].then(|| {
                    let mut gx: Vec<F> = g.iter().map(|&v| v * (F::one() - ksum)).collect();
                    for plane in 0..n * c {
                        let gp = &g[plane * h * w..][..h * w];
                        let gxp = &mut gx[plane * h * w..][..h * w];
                        for (t, map) in taps.iter().enumerate() {
                            let wt = ks[t];
                            for p in 0..h * w {
                                gxp[map[p]] += wt * gp[p];
                            }
                        }
                    }
                    gx
                });
                let gk = needs[1].then(|| {
                    taps.iter()
                        .map(|map| {
                            let mut s = F::zero();
                            for plane in 0..n * c {
                                let src = &xs[plane * h * w..][..h * w];
                                let gp = &g[plane * h * w..][..h * w];
                                for p in 0..h * w {
                                    s += gp[p] * (src[map[p]] - src[p]);
                                }
                            }
                            s
                        })
                        .collect()
                });
                vec![gx, gk]
            },
        )
    }
}
