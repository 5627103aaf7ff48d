//! A small CPU training substrate.
//!
//! Layers own their parameters and return an explicit cache from `forward`;
//! `backward` consumes that cache, accumulates parameter gradients and returns
//! the input gradient. Spatial activations use a channel-major layout
//! `[C, B, D, H, W]` so convolution outputs come straight out of one matrix
//! product; dense activations are `[B, F]`. Images are the `D = 1` case.
//!
//! Everything runs single-threaded through `matrixmultiply` and is
//! bit-reproducible for a given input.

mod layers;
mod loss;
mod optim;
mod spectral;

pub use layers::{
    flatten, leaky_relu, leaky_relu_backward, relu, relu_backward, sigmoid, sigmoid_backward, unflatten,
    BatchNorm, BatchNormCache, Conv, ConvCache, ConvTranspose, ConvTransposeCache, Dense, DenseCache, Weights,
};
pub use loss::{log_sigmoid, log_sigmoid_grad, softmax_rows, softmax_cross_entropy};
pub use optim::Adam;
pub use spectral::{top_singular_value, SpectralNorm};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} vs {} values", data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![0.0; len] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub shape: Vec<usize>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self { value, grad, shape }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    pub fn normal<R: Rng + ?Sized>(shape: Vec<usize>, std: f32, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let value = (0..len).map(|_| std * Distribution::<f32>::sample(&StandardNormal, rng)).collect::<Vec<f32>>();
        Self::new(shape, value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Receives every named parameter and state buffer of a network, in a fixed order.
pub trait Visitor {
    fn param(&mut self, name: &str, param: &mut Param);
    fn buffer(&mut self, name: &str, shape: &[usize], data: &mut Vec<f32>);
}

pub trait Module {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor);

    fn zero_grad(&mut self) {
        struct Z;
        impl Visitor for Z {
            fn param(&mut self, _: &str, p: &mut Param) {
                p.zero_grad();
            }
            fn buffer(&mut self, _: &str, _: &[usize], _: &mut Vec<f32>) {}
        }
        self.visit("", &mut Z);
    }

    fn param_count(&mut self) -> usize {
        struct C(usize);
        impl Visitor for C {
            fn param(&mut self, _: &str, p: &mut Param) {
                self.0 += p.value.len();
            }
            fn buffer(&mut self, _: &str, _: &[usize], _: &mut Vec<f32>) {}
        }
        let mut c = C(0);
        self.visit("", &mut c);
        c.0
    }

    /// Order-sensitive FNV-1a digest over parameter and buffer bits.
    fn checksum(&mut self) -> u64 {
        struct H(u64);
        impl H {
            fn eat(&mut self, data: &[f32]) {
                for v in data {
                    for b in v.to_bits().to_le_bytes() {
                        self.0 ^= b as u64;
                        self.0 = self.0.wrapping_mul(0x100_0000_01b3);
                    }
                }
            }
        }
        impl Visitor for H {
            fn param(&mut self, _: &str, p: &mut Param) {
                self.eat(&p.value);
            }
            fn buffer(&mut self, _: &str, _: &[usize], d: &mut Vec<f32>) {
                self.eat(d);
            }
        }
        let mut h = H(0xcbf2_9ce4_8422_2325);
        self.visit("", &mut h);
        h.0
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Row-major `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of shape
/// `[m, k]` and `op(b)` of shape `[k, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly the extents described by the strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
