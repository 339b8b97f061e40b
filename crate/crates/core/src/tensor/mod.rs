//! Dense row-major tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable value. When any input of an operation lives on
//! a [`Tape`], the result is recorded on the same tape together with a
//! pullback closure; [`Tape::backward`] later walks the recorded nodes in
//! reverse order. Tensors that never touch a tape are plain constants.
//!
//! Images are NCHW. Both `f32` (training) and `f64` (gradient checks) are
//! supported through the [`Element`] trait.

mod elementwise;
mod linalg;
mod nn;
mod reduce;
mod shape_ops;
mod tape;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use nn::{straight_through, BatchStats};
pub use tape::{DomainMode, Gradients, Tape};

use tape::NodeRef;

/// Scalar types a [`Tensor`] can hold.
pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// Clamp applied to `log`/`div` arguments in training mode.
    const DOMAIN_EPS: f64;

    /// `c = alpha * a @ b + beta * c` on strided row-major views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    #[inline]
    fn c(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite constant")
    }

    #[inline]
    fn f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

fn check_gemm_bounds(len: usize, rows: usize, cols: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * strides.0 + (cols - 1) as isize * strides.1;
    assert!(
        strides.0 >= 0 && strides.1 >= 0 && (last as usize) < len,
        "gemm view out of bounds"
    );
}

macro_rules! impl_element {
    ($t:ty, $eps:expr, $gemm:path) => {
        impl Element for $t {
            const DOMAIN_EPS: f64 = $eps;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_gemm_bounds(a.len(), m, k, a_strides);
                check_gemm_bounds(b.len(), k, n, b_strides);
                check_gemm_bounds(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every view was bounds-checked against its slice above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, 1e-7, matrixmultiply::sgemm);
impl_element!(f64, 1e-12, matrixmultiply::dgemm);

/// Dense n-dimensional array, optionally recorded on a gradient tape.
#[derive(Clone)]
pub struct Tensor<F: Element = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
    node: Option<NodeRef<F>>,
}

impl<F: Element> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if self.data.len() <= 16 {
            s.field("data", &self.data);
        }
        s.field("requires_grad", &self.requires_grad()).finish()
    }
}

impl<F: Element> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn from_vec(data: Vec<F>) -> Self {
        let n = data.len();
        Self::new(&[n], data).expect("1-d shape always matches")
    }

    pub fn scalar(v: F) -> Self {
        Self::new(&[], vec![v]).expect("scalar shape")
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n]).expect("full shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.data.as_ref().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.data.len() != 1 {
            return Err(Error::invalid(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape<F>> {
        self.node.as_ref().map(|n| &n.tape)
    }

    /// Handle of this tensor's node on its tape.
    pub fn tape_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    /// Same values, no tape participation.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Mutable access to the buffer of an untracked tensor (optimizer updates).
    pub fn data_mut(&mut self) -> Result<&mut [F]> {
        if self.node.is_some() {
            return Err(Error::invalid("cannot mutate a tensor recorded on a tape"));
        }
        Ok(Arc::make_mut(&mut self.data).as_mut_slice())
    }

    pub fn cast<G: Element>(&self) -> Tensor<G> {
        let data = self.data.iter().map(|&v| G::c(v.f64())).collect();
        Tensor::new(&self.shape, data).expect("same shape")
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Records a new tensor computed from `inputs`. When none of the inputs is
    /// on a tape the pullback is dropped and a constant is returned.
    pub(crate) fn from_op<B>(
        op: &'static str,
        shape: Vec<usize>,
        data: Arc<Vec<F>>,
        inputs: &[&Tensor<F>],
        backward: B,
    ) -> Result<Self>
    where
        B: Fn(&[F], &[bool]) -> Vec<Option<Vec<F>>> + Send + Sync + 'static,
    {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let node = match tape::common_tape(op, inputs)? {
            None => None,
            Some(tape) => {
                let ids = inputs
                    .iter()
                    .map(|t| t.node.as_ref().map(|n| n.id))
                    .collect();
                let id = tape.push_op(ids, shape.clone(), Box::new(backward));
                Some(NodeRef { tape, id })
            }
        };
        Ok(Self { shape, data, node })
    }

    /// Domain-guard policy for an op on these inputs.
    pub(crate) fn mode_of(inputs: &[&Tensor<F>]) -> DomainMode {
        inputs
            .iter()
            .find_map(|t| t.tape().map(|tape| tape.mode()))
            .unwrap_or(DomainMode::Training)
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}
