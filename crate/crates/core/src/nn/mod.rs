//! Minimal layer library with explicit backward passes.
//!
//! Activations use NHWC layout throughout so that im2col rows are output
//! pixels and every GEMM operates on contiguous memory. Each layer offers an
//! inference `forward`, a `forward_train` that returns the cache its
//! `backward` needs, and a `backward` that accumulates parameter gradients and
//! returns the input gradient.

mod backbone;
mod conv;
mod layers;
mod linear;
mod optim;

pub use backbone::{Backbone, BackboneCache, BackboneKind};
pub use conv::{Conv2d, ConvCache};
pub use layers::{
    global_avg_pool, global_avg_pool_backward, leaky_relu, leaky_relu_backward, BatchNorm2d,
    BnCache, MaxPool2, PoolCache,
};
pub use linear::Linear;
pub use optim::{cosine_lr, Sgd, SgdConfig};

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A trainable tensor stored flat in row-major order together with its
/// accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    /// Whether weight decay applies (weights yes, biases and norm affine no).
    pub decay: bool,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: &[usize], decay: bool) -> Self {
        let numel = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![0.0; numel],
            grad: vec![0.0; numel],
            decay,
        }
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], value: f32, decay: bool) -> Self {
        let mut p = Self::zeros(name, shape, decay);
        p.value.fill(value);
        p
    }

    pub fn normal<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: &[usize],
        std: f32,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(name, shape, true);
        let dist = Normal::new(0.0f32, std).expect("finite std");
        for v in &mut p.value {
            *v = dist.sample(rng);
        }
        p
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// View of a rank-2 parameter.
    pub fn view2(&self) -> ArrayView2<'_, f32> {
        debug_assert_eq!(self.shape.len(), 2);
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.value)
            .expect("param shape matches storage")
    }

    pub fn grad_view2_mut(&mut self) -> ArrayViewMut2<'_, f32> {
        debug_assert_eq!(self.shape.len(), 2);
        ArrayViewMut2::from_shape((self.shape[0], self.shape[1]), &mut self.grad)
            .expect("param shape matches storage")
    }
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Vec<f32>,
}

/// Uniform access to the parameters and buffers of a network component.
pub trait Parameters {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn buffers(&self) -> Vec<&Buffer> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        Vec::new()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}
