use alloc::vec;

use crate::error::{shape_err, Result};
use crate::layers::expect_shape;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::Scalar;

/// Valid (unpadded), stride-1 2-D convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    /// `C_out×C_in×k×k`
    pub weight: Tensor<T>,
    /// `C_out`
    pub bias: Tensor<T>,
}

/// Saved input of one forward call.
#[derive(Debug)]
pub struct ConvCache<T> {
    input: Tensor<T>,
}

#[derive(Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv2d<T> {
    /// Zero-initialised layer.
    pub fn new(c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Ok(Conv2d { weight: Tensor::zeros(&[c_out, c_in, k, k])?, bias: Tensor::zeros(&[c_out])? })
    }

    /// Gaussian(0, std) weights, zero bias.
    pub fn gaussian(c_in: usize, c_out: usize, k: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        Ok(Conv2d {
            weight: Tensor::random_gaussian_with(&[c_out, c_in, k, k], 0.0, std, rng)?,
            bias: Tensor::zeros(&[c_out])?,
        })
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let shape = weight.shape();
        if shape.len() != 4 || shape[2] != shape[3] {
            return Err(shape_err!("conv weight must be C_out×C_in×k×k, got {shape:?}"));
        }
        expect_shape(&bias, &[shape[0]], "conv bias")?;
        Ok(Conv2d { weight, bias })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Output `(H', W')` for an `H×W` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        if h < k || w < k {
            return Err(shape_err!("conv: input {h}×{w} is smaller than the {k}×{k} kernel"));
        }
        Ok((h - k + 1, w - k + 1))
    }

    /// Forward pass without saving state.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c_in, h, w) = x.dims4()?;
        if c_in != self.in_channels() {
            return Err(shape_err!(
                "conv: input has {c_in} channels, layer expects {}",
                self.in_channels()
            ));
        }
        let (ho, wo) = self.output_hw(h, w)?;
        let c_out = self.out_channels();
        let k = self.kernel();
        let xd = x.data();
        let wd = self.weight.data();
        let mut y = vec![T::zero(); n * c_out * ho * wo];
        for b in 0..n {
            for o in 0..c_out {
                let out = &mut y[(b * c_out + o) * ho * wo..(b * c_out + o + 1) * ho * wo];
                out.fill(self.bias.data()[o]);
                for c in 0..c_in {
                    let plane = &xd[(b * c_in + c) * h * w..(b * c_in + c + 1) * h * w];
                    for u in 0..k {
                        for v in 0..k {
                            let wt = wd[((o * c_in + c) * k + u) * k + v];
                            for i in 0..ho {
                                let src = &plane[(i + u) * w + v..(i + u) * w + v + wo];
                                let dst = &mut out[i * wo..(i + 1) * wo];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d = *d + wt * s;
                                }
                            }
                        }
                    }
                }
            }
        }
        let y = Tensor::from_vec(&[n, c_out, ho, wo], y)?;
        Ok(y)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        let y = self.forward_eval(x)?;
        Ok((y, ConvCache { input: x.clone() }))
    }

    pub fn backward(&self, grad_y: &Tensor<T>, cache: ConvCache<T>) -> Result<ConvGrads<T>> {
        let x = cache.input;
        let (n, c_in, h, w) = x.dims4()?;
        let (ho, wo) = self.output_hw(h, w)?;
        let c_out = self.out_channels();
        let k = self.kernel();
        expect_shape(grad_y, &[n, c_out, ho, wo], "conv backward grad_y")?;

        let xd = x.data();
        let gy = grad_y.data();
        let wd = self.weight.data();
        let mut gx = vec![T::zero(); x.len()];
        let mut gw = vec![T::zero(); self.weight.len()];
        let mut gb = vec![T::zero(); c_out];

        for b in 0..n {
            for o in 0..c_out {
                let g = &gy[(b * c_out + o) * ho * wo..(b * c_out + o + 1) * ho * wo];
                gb[o] = g.iter().fold(gb[o], |acc, &v| acc + v);
                for c in 0..c_in {
                    let base = (b * c_in + c) * h * w;
                    for u in 0..k {
                        for v in 0..k {
                            let widx = ((o * c_in + c) * k + u) * k + v;
                            let wt = wd[widx];
                            let mut acc = T::zero();
                            for i in 0..ho {
                                let row = base + (i + u) * w + v;
                                let grow = &g[i * wo..(i + 1) * wo];
                                let xs = &xd[row..row + wo];
                                for (&gv, &xv) in grow.iter().zip(xs) {
                                    acc = acc + gv * xv;
                                }
                                let gxs = &mut gx[row..row + wo];
                                for (d, &gv) in gxs.iter_mut().zip(grow) {
                                    *d = *d + wt * gv;
                                }
                            }
                            gw[widx] = gw[widx] + acc;
                        }
                    }
                }
            }
        }
        Ok(ConvGrads {
            input: Tensor::from_vec(x.shape(), gx)?,
            weight: Tensor::from_vec(self.weight.shape(), gw)?,
            bias: Tensor::from_vec(&[c_out], gb)?,
        })
    }
}
