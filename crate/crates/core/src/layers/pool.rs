use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::layers::expect_shape;
use crate::tensor::Tensor;
use crate::Scalar;

/// Argmax positions (flat input indices) of one 2×2 max-pool call.
#[derive(Debug)]
pub struct MaxPoolCache {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// Output extent of a 2×2/stride-2 pool; odd extents drop the trailing row/column.
pub fn maxpool2_output(h: usize, w: usize) -> Result<(usize, usize)> {
    if h < 2 || w < 2 {
        return Err(shape_err!("maxpool: input {h}×{w} is smaller than the 2×2 window"));
    }
    Ok((h / 2, w / 2))
}

/// 2×2 max-pool with stride 2. Ties resolve to the first element in row-major order.
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, MaxPoolCache)> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = maxpool2_output(h, w)?;
    let xd = x.data();
    let mut y = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                y.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::from_vec(&[n, c, ho, wo], y)?,
        MaxPoolCache { input_shape: x.shape().to_vec(), argmax },
    ))
}

/// Routes each upstream gradient to the recorded argmax position.
pub fn maxpool2_backward<T: Scalar>(grad_y: &Tensor<T>, cache: MaxPoolCache) -> Result<Tensor<T>> {
    let (n, c, h, w) = match cache.input_shape[..] {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(shape_err!("maxpool cache holds a non 4-D shape")),
    };
    expect_shape(grad_y, &[n, c, h / 2, w / 2], "maxpool backward grad_y")?;
    let mut gx = vec![T::zero(); n * c * h * w];
    for (&idx, &g) in cache.argmax.iter().zip(grad_y.data()) {
        gx[idx] = gx[idx] + g;
    }
    Tensor::from_vec(&cache.input_shape, gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input() {
        let x = Tensor::<f32>::full(&[1, 2, 4, 6], 1.5).unwrap();
        let (y, _) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 3]);
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn unique_max_routing() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, cache) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = maxpool2_backward(&Tensor::full(&[1, 1, 1, 1], 1.0).unwrap(), cache).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn ties_go_to_first_in_scan_order() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 2, 2], vec![0.0, 7.0, 7.0, 7.0]).unwrap();
        let (_, cache) = maxpool2_forward(&x).unwrap();
        let g = maxpool2_backward(&Tensor::full(&[1, 1, 1, 1], 1.0).unwrap(), cache).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn naive_window_scan() {
        let x = Tensor::<f32>::random_uniform(&[1, 1, 4, 4], -1.0, 1.0, 3).unwrap();
        let (y, _) = maxpool2_forward(&x).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut m = f32::NEG_INFINITY;
                for di in 0..2 {
                    for dj in 0..2 {
                        m = m.max(x.data()[(2 * i + di) * 4 + 2 * j + dj]);
                    }
                }
                assert_eq!(y.data()[i * 2 + j], m);
            }
        }
    }

    #[test]
    fn odd_extent_floors() {
        let x = Tensor::<f32>::random_uniform(&[1, 1, 5, 3], -1.0, 1.0, 4).unwrap();
        let (y, cache) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 1]);
        let g = maxpool2_backward(&Tensor::full(y.shape(), 1.0).unwrap(), cache).unwrap();
        // last row and column never receive gradient
        for j in 0..3 {
            assert_eq!(g.data()[4 * 3 + j], 0.0);
        }
        for i in 0..5 {
            assert_eq!(g.data()[i * 3 + 2], 0.0);
        }
        assert!(maxpool2_forward(&Tensor::<f32>::zeros(&[1, 1, 1, 4]).unwrap()).is_err());
    }
}
