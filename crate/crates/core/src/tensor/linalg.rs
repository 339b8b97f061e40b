use std::sync::Arc;

use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds the input into a `[C*kh*kw, N*Ho*Wo]` matrix.
    fn im2col<F: Element>(&self, x: &[F]) -> Vec<F> {
        let hw = self.positions();
        let cols_n = self.n * hw;
        let mut cols = vec![F::zero(); self.ckk() * cols_n];
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                    for n in 0..self.n {
                        let src = &x[(n * self.c + c) * self.h * self.w..][..self.h * self.w];
                        let dst = &mut dst_row[n * hw..(n + 1) * hw];
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * self.w..][..self.w];
                            for ox in 0..self.wo {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    dst[oy * self.wo + ox] = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<F: Element>(&self, cols: &[F]) -> Vec<F> {
        let hw = self.positions();
        let cols_n = self.n * hw;
        let mut x = vec![F::zero(); self.n * self.c * self.h * self.w];
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                    for n in 0..self.n {
                        let dst = &mut x[(n * self.c + c) * self.h * self.w..][..self.h * self.w];
                        let src = &src_row[n * hw..(n + 1) * hw];
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for ox in 0..self.wo {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    dst[iy as usize * self.w + ix as usize] += src[oy * self.wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

impl<F: Element> Tensor<F> {
    /// `[m, k] @ [k, n] -> [m, n]`
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![F::zero(); m * n];
        let k_i = k as isize;
        let n_i = n as isize;
        F::gemm(
            m,
            k,
            n,
            F::one(),
            &self.data,
            (k_i, 1),
            &other.data,
            (n_i, 1),
            F::zero(),
            &mut out,
            (n_i, 1),
        );
        let (a, b) = (Arc::clone(&self.data), Arc::clone(&other.data));
        Tensor::from_op("matmul", vec![m, n], Arc::new(out), &[self, other], move |g, needs| {
            let ga = needs[0].then(|| {
                // g [m,n] @ b^T [n,k]
                let mut ga = vec![F::zero(); m * k];
                F::gemm(m, n, k, F::one(), g, (n_i, 1), &b, (1, n_i), F::zero(), &mut ga, (k_i, 1));
                ga
            });
            let gb = needs[1].then(|| {
                // a^T [k,m] @ g [m,n]
                let mut gb = vec![F::zero(); k * n];
                F::gemm(k, m, n, F::one(), &a, (1, k_i), g, (n_i, 1), F::zero(), &mut gb, (n_i, 1));
                gb
            });
            vec![ga, gb]
        })
    }

    /// Direct 2-D convolution of NCHW input with `[O, C, kh, kw]` weights and
    /// symmetric zero padding.
    pub fn conv2d(
        &self,
        weight: &Tensor<F>,
        bias: Option<&Tensor<F>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<F>> {
        if self.ndim() != 4 || weight.ndim() != 4 || self.shape[1] != weight.shape[1] {
            return Err(Error::shape("conv2d", &self.shape, &weight.shape));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be positive"));
        }
        let [n, c, h, w] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        let [o, _, kh, kw] = [weight.shape[0], weight.shape[1], weight.shape[2], weight.shape[3]];
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape("conv2d", &self.shape, &weight.shape));
        }
        if let Some(b) = bias {
            if b.shape != [o] {
                return Err(Error::shape("conv2d bias", &b.shape, &[o]));
            }
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let hw = geom.positions();
        let cols_n = (n * hw) as isize;
        let ckk = geom.ckk();
        let cols = geom.im2col(&self.data);
        let mut mat = vec![F::zero(); o * n * hw];
        F::gemm(
            o,
            ckk,
            n * hw,
            F::one(),
            &weight.data,
            (ckk as isize, 1),
            &cols,
            (cols_n, 1),
            F::zero(),
            &mut mat,
            (cols_n, 1),
        );
        drop(cols);
        let mut out = vec![F::zero(); n * o * hw];
        for oc in 0..o {
            let bv = bias.map_or(F::zero(), |b| b.data[oc]);
            for img in 0..n {
                let src = &mat[oc * n * hw + img * hw..][..hw];
                let dst = &mut out[(img * o + oc) * hw..][..hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }

        let x = Arc::clone(&self.data);
        let wt = Arc::clone(&weight.data);
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Tensor::from_op(
            "conv2d",
            vec![n, o, geom.ho, geom.wo],
            Arc::new(out),
            &inputs,
            move |g, needs| {
                // g [N, O, HW] -> [O, N*HW]
                let mut gmat = vec![F::zero(); o * n * hw];
                for oc in 0..o {
                    for img in 0..n {
                        gmat[oc * n * hw + img * hw..][..hw]
                            .copy_from_slice(&g[(img * o + oc) * hw..][..hw]);
                    }
                }
                let gx = needs[0].then(|| {
                    let mut gcols = vec![F::zero(); ckk * n * hw];
                    F::gemm(
                        ckk,
                        o,
                        n * hw,
                        F::one(),
                        &wt,
                        (1, ckk as isize),
                        &gmat,
                        (cols_n, 1),
                        F::zero(),
                        &mut gcols,
                        (cols_n, 1),
                    );
                    geom.col2im(&gcols)
                });
                let gw = needs[1].then(|| {
                    let cols = geom.im2col(&x);
                    let mut gw = vec![F::zero(); o * ckk];
                    F::gemm(
                        o,
                        n * hw,
                        ckk,
                        F::one(),
                        &gmat,
                        (cols_n, 1),
                        &cols,
                        (1, cols_n),
                        F::zero(),
                        &mut gw,
                        (ckk as isize, 1),
                    );
                    gw
                });
                let mut res = vec![gx, gw];
                if needs.len() == 3 {
                    res.push(needs[2].then(|| {
                        (0..o)
                            .map(|oc| gmat[oc * n * hw..(oc + 1) * n * hw].iter().copied().sum())
                            .collect()
                    }));
                }
                res
            },
        )
    }

    /// Squared Euclidean distances between all rows of an `[M, d]` matrix,
    /// computed from coordinate differences so duplicate rows give exact zeros.
    pub fn pairwise_sq_distances(&self) -> Result<Tensor<F>> {
        if self.ndim() != 2 || self.shape[1] == 0 {
            return Err(Error::shape("pairwise_sq_distances", &self.shape, &[]));
        }
        let (m, d) = (self.shape[0], self.shape[1]);
        let z = Arc::clone(&self.data);
        let mut out = vec![F::zero(); m * m];
        for i in 0..m {
            for j in (i + 1)..m {
                let (a, b) = (&z[i * d..(i + 1) * d], &z[j * d..(j + 1) * d]);
                let s = a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
                out[i * m + j] = s;
                out[j * m + i] = s;
            }
        }
        Tensor::from_op("pairwise_sq_distances", vec![m, m], Arc::new(out), &[self], move |g, _| {
            let mut gz = vec![F::zero(); m * d];
            let two = F::c(2.0);
            for i in 0..m {
                for j in 0..m {
                    if i == j {
                        continue;
                    }
                    let coef = two * (g[i * m + j] + g[j * m + i]);
                    if coef == F::zero() {
                        continue;
                    }
                    for t in 0..d {
                        let diff = z[i * d + t] - z[j * d + t];
                        gz[i * d + t] += coef * diff;
                    }
                }
            }
            vec![Some(gz)]
        })
    }
}
