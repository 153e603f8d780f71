//! Dense tensors, named parameters, and a reverse-mode tape.
//!
//! Tensors are row-major f32 buffers by default; the whole engine is generic
//! over [`Element`] so tests can drive the identical code paths at f64 when
//! comparing gradients against high-precision finite differences.

mod adam;
mod tape;

pub use adam::{Adam, AdamState};
pub use tape::{Session, Tape, Var};

use std::collections::HashMap;
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{CoreError, Result};
use crate::rng::Rng;

/// Scalar types the engine runs on. Production code uses f32; the gradient
/// oracle instantiates the same kernels at f64.
pub trait Element:
    Copy
    + PartialOrd
    + PartialEq
    + fmt::Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;

    /// C = alpha * A(m,k) * B(k,n) + beta * C(m,n), arbitrary strides.
    ///
    /// # Safety
    /// Pointers must cover the strided index ranges implied by (m, k, n).
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense n-dimensional array with an optional gradient buffer of equal size.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
    grad: Option<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::ZERO; n],
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], v: E) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
        }
    }

    /// Standard-normal entries drawn from `rng`.
    pub fn randn(shape: &[usize], rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(E::from_f64(rng.normal()));
        }
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated zeroed on first use.
    pub fn grad_mut(&mut self) -> &mut [E] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![E::ZERO; n])
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn zero_grad(&mut self) {
        let n = self.data.len();
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = E::ZERO),
            None => self.grad = Some(vec![E::ZERO; n]),
        }
    }

    /// Interprets the tensor as (batch, channels, height, width).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(CoreError::Dimension(format!(
                "expected 4-d tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scalar_value(&self) -> Result<E> {
        if self.data.len() != 1 {
            return Err(CoreError::Contract(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Lossy element-type conversion (used when mirroring f32 values into the
    /// f64 test path).
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
            grad: None,
        }
    }
}

/// A named, optionally trainable tensor.
#[derive(Debug, Clone)]
pub struct Parameter<E: Element = f32> {
    pub name: String,
    pub tensor: Tensor<E>,
    pub trainable: bool,
}

/// Insertion-ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<E: Element = f32> {
    params: Vec<Parameter<E>>,
    index: HashMap<String, usize>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<E>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(CoreError::Contract(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            trainable: true,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<E>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| CoreError::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<E>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(CoreError::Contract(format!("unknown parameter {name:?}"))),
        }
    }

    pub fn at(&self, idx: usize) -> &Parameter<E> {
        &self.params[idx]
    }

    pub fn at_mut(&mut self, idx: usize) -> &mut Parameter<E> {
        &mut self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<E>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<E>> {
        self.params.iter_mut()
    }

    /// Zeroes gradients on trainable parameters, clears the rest.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if p.trainable {
                p.tensor.zero_grad();
            } else {
                p.tensor.clear_grad();
            }
        }
    }

    /// Marks exactly the parameters matching `keep` as trainable.
    pub fn set_trainable_where(&mut self, keep: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = keep(&p.name);
        }
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

/// Sinusoidal embedding of an integer timestep: first half sine, second half
/// cosine, frequencies spaced geometrically from 1 down to 1/10000.
pub fn sinusoidal_time_embed<E: Element>(t: usize, dim: usize) -> Result<Tensor<E>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(CoreError::Configuration(format!(
            "time embedding dim must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut data = vec![E::ZERO; dim];
    for j in 0..half {
        let exponent = if half > 1 {
            j as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq = 10_000f64.powf(-exponent);
        let angle = t as f64 * freq;
        data[j] = E::from_f64(angle.sin());
        data[half + j] = E::from_f64(angle.cos());
    }
    Tensor::from_vec(&[dim], data)
}

/// Stacked sinusoidal embeddings for a batch of timesteps: shape [B, dim].
pub fn time_embed_batch<E: Element>(ts: &[usize], dim: usize) -> Result<Tensor<E>> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend_from_slice(sinusoidal_time_embed::<E>(t, dim)?.data());
    }
    Tensor::from_vec(&[ts.len(), dim], data)
}
