use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{param_err, shape_err, Result};
use crate::layers::Mode;
use crate::rng;
use crate::tensor::Tensor;
use crate::Scalar;

/// Inverted dropout: kept units are scaled by `1/(1-rate)` at train time,
/// so evaluation is the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    rate: f64,
}

/// Scaled keep-mask of a train-mode call; `None` for the identity (eval or rate 0).
#[derive(Debug)]
pub struct DropoutCache<T> {
    shape: Vec<usize>,
    mask: Option<Vec<T>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(param_err!("dropout rate must lie in [0, 1), got {rate}"));
        }
        Ok(Dropout { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn forward<T: Scalar>(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        seed: u64,
    ) -> Result<(Tensor<T>, DropoutCache<T>)> {
        if mode == Mode::Eval || self.rate == 0.0 {
            return Ok((x.clone(), DropoutCache { shape: x.shape().to_vec(), mask: None }));
        }
        let keep = 1.0 - self.rate;
        let scale = T::from_f64_lossy(1.0 / keep);
        let mut r = rng::seeded(seed);
        let mask: Vec<T> = (0..x.len())
            .map(|_| if r.random::<f64>() < keep { scale } else { T::zero() })
            .collect();
        let y = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        Ok((
            Tensor::from_vec(x.shape(), y)?,
            DropoutCache { shape: x.shape().to_vec(), mask: Some(mask) },
        ))
    }

    pub fn backward<T: Scalar>(&self, grad_y: &Tensor<T>, cache: DropoutCache<T>) -> Result<Tensor<T>> {
        if grad_y.shape() != cache.shape.as_slice() {
            return Err(shape_err!(
                "dropout backward: grad shape {:?} != cached {:?}",
                grad_y.shape(),
                cache.shape
            ));
        }
        match cache.mask {
            None => Ok(grad_y.clone()),
            Some(mask) => {
                let g = grad_y.data().iter().zip(&mask).map(|(&g, &m)| g * m).collect();
                Tensor::from_vec(&cache.shape, g)
            }
        }
    }
}
