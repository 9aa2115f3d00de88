//! A deliberately small CPU network engine: planar batch tensors, im2col
//! convolution with hand-written backward passes, and the two optimizers the
//! trainer needs. Every op is single-threaded and order-deterministic, so
//! training runs replay bit for bit.

mod conv;
mod ops;
mod optim;
mod scalar;
mod tensor;

pub use conv::{Conv2d, ConvGeometry};
pub use ops::{
    leaky_relu, leaky_relu_backward, relu, relu_backward, upsample_bilinear,
    upsample_bilinear_backward, BilinearAxis,
};
pub use optim::{Adam, AdamConfig, Sgd, SgdConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// A named trainable buffer with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: String, shape: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self {
            name,
            shape,
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Anything that owns an ordered list of parameters.
pub trait Parameterized<T: Scalar> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Order-sensitive digest of every parameter bit pattern.
    fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params() {
            for v in &p.value {
                h ^= v.as_f64().to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}
