//! A small differentiable numerical core: dense tensors, a reverse-mode
//! tape, the layers the association network needs, Adam, and a
//! finite-difference gradient checker.
//!
//! Everything is generic over [`Scalar`] so the same code trains in `f32`
//! and is verified in `f64`.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod params;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{bce, ce_term, Graph, Var, PROB_EPS};
pub use layers::{Attention, AttentionMemory, BiLstm, Dense, Lstm};
pub use params::{AdamConfig, Gradients, Init, Param, ParamId, ParamStore};
pub use tensor::Tensor;

/// Floating-point element type of tensors.
pub trait Scalar:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + AddAssign
        + SubAssign
        + MulAssign
        + Sum
        + Default
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}

/// Elementwise activations outside the tape.
pub mod activations {
    use super::Scalar;

    pub fn relu<T: Scalar>(x: T) -> T {
        x.max(T::zero())
    }

    pub fn sigmoid<T: Scalar>(x: T) -> T {
        if x >= T::zero() {
            T::one() / (T::one() + (-x).exp())
        } else {
            let e = x.exp();
            e / (T::one() + e)
        }
    }

    pub fn tanh<T: Scalar>(x: T) -> T {
        x.tanh()
    }

    /// Max-subtracted softmax.
    pub fn softmax<T: Scalar>(xs: &[T]) -> Vec<T> {
        let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = xs.iter().map(|&x| (x - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    #[cfg(test)]
    mod tests {
        use super::*;

        #[test]
        fn examples() {
            assert_eq!(sigmoid(0.0f64), 0.5);
            assert_eq!(relu(-2.0f64), 0.0);
            assert_eq!(relu(3.0f64), 3.0);
            let s = softmax(&[0.0f64, 0.0, 0.0]);
            assert!(s.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
            let big = softmax(&[1000.0f64, 1000.0]);
            assert_eq!(big, vec![0.5, 0.5]);
        }
    }
}
