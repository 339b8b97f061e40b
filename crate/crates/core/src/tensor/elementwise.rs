use std::sync::Arc;

use super::{DomainMode, Element, Tensor};
use crate::error::{Error, Result};

/// Maps each output position to the position in one broadcast input.
#[derive(Clone)]
enum Index {
    Same,
    Scalar,
    Map(Arc<Vec<usize>>),
}

impl Index {
    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Index::Same => i,
            Index::Scalar => 0,
            Index::Map(m) => m[i],
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn index_for(input: &[usize], out: &[usize]) -> Index {
    let n_in: usize = input.iter().product();
    if input == out {
        return Index::Same;
    }
    if n_in == 1 {
        return Index::Scalar;
    }
    let nd = out.len();
    let offset = nd - input.len();
    // input strides aligned to output dims, zero where broadcast
    let mut strides = vec![0usize; nd];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        if input[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= input[i];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut pos = 0usize;
    for _ in 0..total {
        map.push(pos);
        for d in (0..nd).rev() {
            idx[d] += 1;
            pos += strides[d];
            if idx[d] < out[d] {
                break;
            }
            pos -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    Index::Map(Arc::new(map))
}

/// Sums an output-shaped gradient back onto an input through its index map.
fn unbroadcast<F: Element>(g: &[F], index: &Index, n_in: usize, scale: impl Fn(usize) -> F) -> Vec<F> {
    match index {
        Index::Same => g.iter().enumerate().map(|(i, &v)| v * scale(i)).collect(),
        Index::Scalar => {
            let mut s = F::zero();
            for (i, &v) in g.iter().enumerate() {
                s += v * scale(i);
            }
            vec![s]
        }
        Index::Map(m) => {
            let mut out = vec![F::zero(); n_in];
            for (i, &v) in g.iter().enumerate() {
                out[m[i]] += v * scale(i);
            }
            out
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
            BinOp::Pow => "pow",
        }
    }
}

/// Training-mode replacement for a denominator too close to zero.
#[inline]
fn guard_denominator<F: Element>(b: F, eps: F) -> F {
    if b.abs() >= eps {
        b
    } else if b < F::zero() {
        -eps
    } else {
        eps
    }
}

impl<F: Element> Tensor<F> {
    fn binary(&self, other: &Tensor<F>, op: BinOp) -> Result<Tensor<F>> {
        let shape = broadcast_shape(&self.shape, &other.shape)
            .ok_or_else(|| Error::shape(op.name(), &self.shape, &other.shape))?;
        let ia = index_for(&self.shape, &shape);
        let ib = index_for(&other.shape, &shape);
        let n: usize = shape.iter().product();
        let (a, b) = (Arc::clone(&self.data), Arc::clone(&other.data));
        let mode = Tensor::mode_of(&[self, other]);
        let eps = F::c(F::DOMAIN_EPS);

        let mut b_eff: Option<Arc<Vec<F>>> = None;
        if let BinOp::Div = op {
            if b.iter().any(|v| v.abs() < eps) {
                if mode == DomainMode::Strict {
                    return Err(Error::Domain {
                        op: "div",
                        detail: "denominator is zero".into(),
                    });
                }
                b_eff = Some(Arc::new(b.iter().map(|&v| guard_denominator(v, eps)).collect()));
            }
        }
        if let BinOp::Pow = op {
            let bad = (0..n).any(|i| a[ia.at(i)] < F::zero() && b[ib.at(i)].fract() != F::zero());
            if bad {
                return Err(Error::Domain {
                    op: "pow",
                    detail: "negative base with fractional exponent".into(),
                });
            }
        }
        let bd = b_eff.unwrap_or_else(|| Arc::clone(&b));
        let out: Vec<F> = (0..n)
            .map(|i| {
                let (x, y) = (a[ia.at(i)], bd[ib.at(i)]);
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                    BinOp::Pow => x.powf(y),
                }
            })
            .collect();
        let out = Arc::new(out);
        let out_c = Arc::clone(&out);
        let (na, nb) = (self.numel(), other.numel());
        Tensor::from_op(op.name(), shape, out, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| match op {
                BinOp::Add | BinOp::Sub => unbroadcast(g, &ia, na, |_| F::one()),
                BinOp::Mul => unbroadcast(g, &ia, na, |i| bd[ib.at(i)]),
                BinOp::Div => unbroadcast(g, &ia, na, |i| F::one() / bd[ib.at(i)]),
                BinOp::Pow => unbroadcast(g, &ia, na, |i| {
                    let (x, y) = (a[ia.at(i)], bd[ib.at(i)]);
                    if y == F::zero() {
                        F::zero()
                    } else {
                        y * x.powf(y - F::one())
                    }
                }),
            });
            let gb = needs[1].then(|| match op {
                BinOp::Add => unbroadcast(g, &ib, nb, |_| F::one()),
                BinOp::Sub => unbroadcast(g, &ib, nb, |_| -F::one()),
                BinOp::Mul => unbroadcast(g, &ib, nb, |i| a[ia.at(i)]),
                BinOp::Div => unbroadcast(g, &ib, nb, |i| {
                    let y = bd[ib.at(i)];
                    -a[ia.at(i)] / (y * y)
                }),
                BinOp::Pow => unbroadcast(g, &ib, nb, |i| {
                    let x = a[ia.at(i)];
                    if x > F::zero() {
                        out_c[i] * x.ln()
                    } else {
                        F::zero()
                    }
                }),
            });
            vec![ga, gb]
        })
    }

    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(other, BinOp::Mul)
    }

    pub fn div(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(other, BinOp::Div)
    }

    pub fn pow(&self, exponent: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(exponent, BinOp::Pow)
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub(crate) fn unary(
        &self,
        op: &'static str,
        f: impl Fn(F) -> F,
        df: impl Fn(F, F) -> F + Send + Sync + 'static,
    ) -> Tensor<F> {
        let out = Arc::new(self.data.iter().map(|&x| f(x)).collect::<Vec<_>>());
        let x = Arc::clone(&self.data);
        let y = Arc::clone(&out);
        Tensor::from_op(op, self.shape.clone(), out, &[self], move |g, _| {
            vec![Some(
                g.iter()
                    .zip(x.iter().zip(y.iter()))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect(),
            )]
        })
        .expect("single input cannot mismatch tapes")
    }

    pub fn neg(&self) -> Tensor<F> {
        self.unary("neg", |x| -x, |_, _| -F::one())
    }

    pub fn exp(&self) -> Tensor<F> {
        self.unary("exp", F::exp, |_, y| y)
    }

    /// Natural log. In training mode arguments below `DOMAIN_EPS` are clamped
    /// (zero gradient there); in strict mode they are an error.
    pub fn log(&self) -> Result<Tensor<F>> {
        let eps = F::c(F::DOMAIN_EPS);
        if self.data.iter().any(|&v| v <= F::zero() || v.is_nan()) {
            if Tensor::mode_of(&[self]) == DomainMode::Strict {
                return Err(Error::Domain {
                    op: "log",
                    detail: "non-positive argument".into(),
                });
            }
        }
        Ok(self.unary(
            "log",
            |x| x.max(eps).ln(),
            move |x, _| if x >= eps { F::one() / x } else { F::zero() },
        ))
    }

    /// Square root with zero subgradient at 0.
    pub fn sqrt(&self) -> Result<Tensor<F>> {
        if self.data.iter().any(|&v| v < F::zero()) {
            if Tensor::mode_of(&[self]) == DomainMode::Strict {
                return Err(Error::Domain {
                    op: "sqrt",
                    detail: "negative argument".into(),
                });
            }
        }
        let half = F::c(0.5);
        Ok(self.unary(
            "sqrt",
            |x| x.max(F::zero()).sqrt(),
            move |_, y| if y > F::zero() { half / y } else { F::zero() },
        ))
    }

    pub fn relu(&self) -> Tensor<F> {
        self.unary(
            "relu",
            |x| x.max(F::zero()),
            |x, _| if x > F::zero() { F::one() } else { F::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        self.unary("sigmoid", sigmoid, |_, y| y * (F::one() - y))
    }

    pub fn softplus(&self) -> Tensor<F> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn sin(&self) -> Tensor<F> {
        self.unary("sin", F::sin, |x, _| x.cos())
    }

    pub fn cos(&self) -> Tensor<F> {
        self.unary("cos", F::cos, |x, _| -x.sin())
    }

    pub fn square(&self) -> Tensor<F> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn powf(&self, p: F) -> Tensor<F> {
        self.unary("powf", move |x| x.powf(p), move |x, _| p * x.powf(p - F::one()))
    }

    /// Clamp to `[lo, hi]`; gradient passes where `lo <= x <= hi`.
    pub fn clamp(&self, lo: F, hi: F) -> Tensor<F> {
        self.unary(
            "clamp",
            move |x| x.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { F::one() } else { F::zero() },
        )
    }

    pub fn scale(&self, a: F) -> Tensor<F> {
        self.unary("scale", move |x| x * a, move |_, _| a)
    }

    pub fn add_scalar(&self, b: F) -> Tensor<F> {
        self.unary("add_scalar", move |x| x + b, |_, _| F::one())
    }

    /// `a * x + b`
    pub fn affine(&self, a: F, b: F) -> Tensor<F> {
        self.unary("affine", move |x| a * x + b, move |_, _| a)
    }

    /// Value-only elementwise map: the result is a constant.
    pub fn map_detached(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        let data = self.data.iter().map(|&x| f(x)).collect();
        Tensor::new(&self.shape, data).expect("same shape")
    }
}

#[inline]
pub(crate) fn sigmoid<F: Element>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<F: Element>(x: F) -> F {
    // log(1 + e^x) = max(x, 0) + log(1 + e^-|x|)
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn shape_error_names_op_and_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4]);
        let msg = a.mul(&b).unwrap_err().to_string();
        assert!(msg.contains("mul") && msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn broadcast_add_gradient_sums_over_rows() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(&Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.leaf(&Tensor::from_vec(vec![10., 20., 30.]));
        let y = a.add(&b).unwrap().sum_all();
        let g = y.backward().unwrap();
        assert_eq!(g.get(&b).unwrap().data(), &[2., 2., 2.]);
        assert_eq!(g.get(&a).unwrap().data(), &[1.; 6]);
    }

    #[test]
    fn strict_mode_rejects_log_of_zero() {
        let tape = Tape::<f64>::strict();
        let x = tape.leaf(&Tensor::from_vec(vec![0.0, 1.0]));
        assert!(matches!(x.log(), Err(Error::Domain { op: "log", .. })));
        let d = tape.leaf(&Tensor::from_vec(vec![0.0]));
        assert!(x.div(&d).is_err());
    }

    #[test]
    fn training_mode_clamps_log_and_div() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::from_vec(vec![0.0f32, 1.0]));
        let y = x.log().unwrap();
        assert!((y.data()[0] - (1e-7f32).ln()).abs() < 1e-3);
        let z = Tensor::from_vec(vec![1.0f32]).div(&Tensor::from_vec(vec![0.0])).unwrap();
        assert!(z.data()[0].is_finite());
    }
}
