//! Dense tensors and a tape-based reverse-mode autodiff engine.
//!
//! Values live in plain row-major buffers. A [`Graph`] records every
//! operation applied to its [`Var`] handles and replays them backwards in
//! [`Graph::backward`]. Training runs in `f32`; every verification path
//! instantiates the same code with `f64`.

mod gradcheck;
mod graph;

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckReport, TensorCheck};
pub(crate) use graph::softmax_in_place;
pub use graph::{Graph, TokenIndex, Var};

/// Numeric element type of a tensor.
pub trait Scalar:
    num_traits::Float + AddAssign + SubAssign + MulAssign + Default + Debug + Display + Send + Sync + 'static
{
    /// `c = alpha * a @ b + beta * c` on arbitrary strided layouts.
    ///
    /// Panics if a strided view would reach outside its slice.
    #[allow(clippy::too_many_arguments)]
    fn gemm_ex(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    /// `c = a @ b + beta * c` with `c` dense row-major `[m, n]`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        Self::gemm_ex(
            m,
            k,
            n,
            Self::one(),
            a,
            (rsa as usize, csa as usize),
            b,
            (rsb as usize, csb as usize),
            beta,
            c,
            (n, 1),
        )
    }

    /// `tanh`, possibly by a faster approximation accurate to the type's precision.
    fn fast_tanh(self) -> Self {
        self.tanh()
    }

    fn of(v: f64) -> Self;

    fn f64(self) -> f64;
}

impl Scalar for f32 {
    fn gemm_ex(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        (rsa, csa): (usize, usize),
        b: &[f32],
        (rsb, csb): (usize, usize),
        beta: f32,
        c: &mut [f32],
        (rsc, csc): (usize, usize),
    ) {
        if m == 0 || n == 0 {
            return;
        }
        check_view(a.len(), m, k, rsa, csa);
        check_view(b.len(), k, n, rsb, csb);
        check_view(c.len(), m, n, rsc, csc);
        // SAFETY: check_view guarantees every strided access stays inside its slice.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c.as_mut_ptr(),
                rsc as isize,
                csc as isize,
            )
        }
    }

    fn of(v: f64) -> Self {
        v as f32
    }

    fn fast_tanh(self) -> Self {
        tanh_f32(self)
    }

    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn gemm_ex(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        (rsa, csa): (usize, usize),
        b: &[f64],
        (rsb, csb): (usize, usize),
        beta: f64,
        c: &mut [f64],
        (rsc, csc): (usize, usize),
    ) {
        if m == 0 || n == 0 {
            return;
        }
        check_view(a.len(), m, k, rsa, csa);
        check_view(b.len(), k, n, rsb, csb);
        check_view(c.len(), m, n, rsc, csc);
        // SAFETY: check_view guarantees every strided access stays inside its slice.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c.as_mut_ptr(),
                rsc as isize,
                csc as isize,
            )
        }
    }

    fn of(v: f64) -> Self {
        v
    }

    fn f64(self) -> f64 {
        self
    }
}

fn check_view(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) * rs + (cols - 1) * cs;
        assert!(
            last < len,
            "gemm view {rows}x{cols} (strides {rs}, {cs}) exceeds buffer of {len}"
        );
    }
}

/// Odd rational approximation of `tanh` on `[-7.9, 7.9]`, saturating
/// outside; within a few ulps of the correctly rounded value.
fn tanh_f32(x: f32) -> f32 {
    const CLAMP: f32 = 7.998_811_7;
    const A: [f32; 7] = [
        4.893_524_6e-3,
        6.372_619_3e-4,
        1.485_722_4e-5,
        5.122_297e-8,
        -8.604_672e-11,
        2.000_188e-13,
        -2.760_768_5e-16,
    ];
    const B: [f32; 4] = [4.893_525e-3, 2.268_434_6e-3, 1.185_347_1e-4, 1.198_258_4e-6];
    if x.abs() < 4e-4 {
        return x;
    }
    let x = x.clamp(-CLAMP, CLAMP);
    let x2 = x * x;
    let mut p = A[6];
    for &c in A[..6].iter().rev() {
        p = p * x2 + c;
    }
    let mut q = B[3];
    for &c in B[..3].iter().rev() {
        q = q * x2 + c;
    }
    x * p / q
}

/// A dense row-major tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {numel} elements but buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::dim("accumulate_grad", &self.shape, &[g.len()]));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Rows `idx` of the leading axis, as a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let lead = *self
            .shape
            .first()
            .ok_or_else(|| Error::Usage("select_rows on a scalar".into()))?;
        let row = self.data.len() / lead.max(1);
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            if i >= lead {
                return Err(Error::Dimension(format!("row {i} out of range for {:?}", self.shape)));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor::new(&shape, data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
            grad: self.grad.as_ref().map(|g| g.iter().map(|v| U::of(v.f64())).collect()),
            requires_grad: self.requires_grad,
        }
    }

    /// Frobenius / L2 norm of the flattened values, accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Naive triple-loop reference product of row-major `[m,k]` by `[k,n]`.
pub fn matmul_reference<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}
