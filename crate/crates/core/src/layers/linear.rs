use alloc::vec;

use crate::error::{shape_err, Result};
use crate::layers::expect_shape;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::Scalar;

/// Fully-connected layer `y = x·Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `out×in`
    pub weight: Tensor<T>,
    /// `out`
    pub bias: Tensor<T>,
}

#[derive(Debug)]
pub struct LinearCache<T> {
    input: Tensor<T>,
}

#[derive(Debug)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(inputs: usize, outputs: usize) -> Result<Self> {
        Ok(Linear { weight: Tensor::zeros(&[outputs, inputs])?, bias: Tensor::zeros(&[outputs])? })
    }

    pub fn gaussian(inputs: usize, outputs: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        Ok(Linear {
            weight: Tensor::random_gaussian_with(&[outputs, inputs], 0.0, std, rng)?,
            bias: Tensor::zeros(&[outputs])?,
        })
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (out, _) = weight.dims2()?;
        expect_shape(&bias, &[out], "linear bias")?;
        Ok(Linear { weight, bias })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }
    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, d) = x.dims2()?;
        if d != self.inputs() {
            return Err(shape_err!("linear: input width {d}, layer expects {}", self.inputs()));
        }
        let out = self.outputs();
        let wd = self.weight.data();
        let mut y = vec![T::zero(); n * out];
        for b in 0..n {
            let row = &x.data()[b * d..(b + 1) * d];
            for o in 0..out {
                let wrow = &wd[o * d..(o + 1) * d];
                let dot = row.iter().zip(wrow).fold(T::zero(), |acc, (&a, &w)| acc + a * w);
                y[b * out + o] = dot + self.bias.data()[o];
            }
        }
        Tensor::from_vec(&[n, out], y)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LinearCache<T>)> {
        let y = self.forward_eval(x)?;
        Ok((y, LinearCache { input: x.clone() }))
    }

    pub fn backward(&self, grad_y: &Tensor<T>, cache: LinearCache<T>) -> Result<LinearGrads<T>> {
        let x = cache.input;
        let (n, d) = x.dims2()?;
        let out = self.outputs();
        expect_shape(grad_y, &[n, out], "linear backward grad_y")?;
        let wd = self.weight.data();
        let gy = grad_y.data();
        let mut gx = vec![T::zero(); n * d];
        let mut gw = vec![T::zero(); out * d];
        let mut gb = vec![T::zero(); out];
        for b in 0..n {
            let xrow = &x.data()[b * d..(b + 1) * d];
            let gxrow = &mut gx[b * d..(b + 1) * d];
            for o in 0..out {
                let g = gy[b * out + o];
                gb[o] = gb[o] + g;
                let wrow = &wd[o * d..(o + 1) * d];
                let gwrow = &mut gw[o * d..(o + 1) * d];
                for i in 0..d {
                    gxrow[i] = gxrow[i] + g * wrow[i];
                    gwrow[i] = gwrow[i] + g * xrow[i];
                }
            }
        }
        Ok(LinearGrads {
            input: Tensor::from_vec(&[n, d], gx)?,
            weight: Tensor::from_vec(self.weight.shape(), gw)?,
            bias: Tensor::from_vec(&[out], gb)?,
        })
    }
}
