use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;
use crate::Scalar;

/// Which inputs were strictly positive.
#[derive(Debug)]
pub struct ReluCache {
    shape: Vec<usize>,
    positive: Vec<bool>,
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, ReluCache)> {
    let positive: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
    let y = x
        .data()
        .iter()
        .zip(&positive)
        .map(|(&v, &p)| if p { v } else { T::zero() })
        .collect();
    Ok((Tensor::from_vec(x.shape(), y)?, ReluCache { shape: x.shape().to_vec(), positive }))
}

pub fn relu_eval<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let y = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::from_vec(x.shape(), y)
}

/// Passes gradient where the input was > 0; the subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(grad_y: &Tensor<T>, cache: ReluCache) -> Result<Tensor<T>> {
    if grad_y.shape() != cache.shape.as_slice() {
        return Err(shape_err!(
            "relu backward: grad shape {:?} != cached {:?}",
            grad_y.shape(),
            cache.shape
        ));
    }
    let g = grad_y
        .data()
        .iter()
        .zip(&cache.positive)
        .map(|(&g, &p)| if p { g } else { T::zero() })
        .collect();
    Tensor::from_vec(&cache.shape, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn forward_and_backward() {
        let x = Tensor::<f32>::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let (y, cache) = relu_forward(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&Tensor::full(&[3], 5.0).unwrap(), cache).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 5.0]);
    }
}
