//! Forward and backward kernels for the classification layers.
//!
//! Each layer returns its output together with a cache holding exactly what
//! its backward pass needs. Backward consumes the cache, so one forward call
//! feeds at most one backward call.

mod conv;
mod dropout;
mod linear;
mod loss;
mod pool;
mod relu;

pub use conv::{Conv2d, ConvCache, ConvGrads};
pub use dropout::{Dropout, DropoutCache};
pub use linear::{Linear, LinearCache, LinearGrads};
pub use loss::{softmax, softmax_cross_entropy};
pub use pool::{maxpool2_backward, maxpool2_forward, maxpool2_output, MaxPoolCache};
pub use relu::{relu_backward, relu_eval, relu_forward, ReluCache};

/// Whether stochastic layers sample (train) or pass through (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;
use crate::Scalar;

pub(crate) fn expect_shape<T: Scalar>(t: &Tensor<T>, shape: &[usize], what: &str) -> Result<()> {
    if t.shape() != shape {
        return Err(shape_err!("{what}: expected shape {shape:?}, got {:?}", t.shape()));
    }
    Ok(())
}
