//! Dense row-major tensors.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand_distr::{Distribution, Normal};

use crate::error::{param_err, shape_err, Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Dense N-dimensional array stored contiguously in row-major order.
///
/// Image batches use the `N×C×H×W` layout, matrices `R×C`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_extents(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(shape_err!("tensor shape must have at least one extent"));
    }
    if let Some(i) = shape.iter().position(|&d| d == 0) {
        return Err(shape_err!("extent {i} of shape {shape:?} is zero"));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    /// Wraps `data` with the given shape, validating size and finiteness.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_extents(shape)?;
        if len != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {len} scalars, got {}",
                data.len()
            ));
        }
        let t = Tensor { shape: shape.to_vec(), data };
        t.check_finite("from_vec")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let len = check_extents(shape)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(alloc::format!("fill value {value}")));
        }
        Ok(Tensor { shape: shape.to_vec(), data: vec![value; len] })
    }

    pub fn zeros_like(other: &Self) -> Self {
        Tensor { shape: other.shape.clone(), data: vec![T::zero(); other.data.len()] }
    }

    /// Independent Gaussian draws from ChaCha8 seeded with `seed`.
    pub fn random_gaussian(shape: &[usize], mean: f64, std: f64, seed: u64) -> Result<Self> {
        let mut r = rng::seeded(seed);
        Self::random_gaussian_with(shape, mean, std, &mut r)
    }

    pub fn random_gaussian_with(
        shape: &[usize],
        mean: f64,
        std: f64,
        r: &mut rng::Rng,
    ) -> Result<Self> {
        let len = check_extents(shape)?;
        if !std.is_finite() || std < 0.0 || !mean.is_finite() {
            return Err(param_err!("gaussian needs finite mean and std >= 0, got ({mean}, {std})"));
        }
        let data = if std == 0.0 {
            vec![T::from_f64_lossy(mean); len]
        } else {
            let normal = Normal::new(mean, std).map_err(|e| param_err!("{e}"))?;
            (0..len).map(|_| T::from_f64_lossy(normal.sample(r))).collect()
        };
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Uniform draws in `[lo, hi)`.
    pub fn random_uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Result<Self> {
        use rand::Rng as _;
        let len = check_extents(shape)?;
        let mut r = rng::seeded(seed);
        let data = (0..len).map(|_| T::from_f64_lossy(r.random_range(lo..hi))).collect();
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access for in-place parameter updates.
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_extents(shape)?;
        if len != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err!("expected N×C×H×W tensor, got {:?}", self.shape)),
        }
    }

    /// `(R, C)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(shape_err!("expected R×C tensor, got {:?}", self.shape)),
        }
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(alloc::format!(
                "{what}: element {i} is {}",
                self.data[i]
            ))),
        }
    }

    fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("{op}: shapes {:?} and {:?} differ", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        let t = Tensor { shape: self.shape.clone(), data };
        t.check_finite("add")?;
        Ok(t)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        let t = Tensor { shape: self.shape.clone(), data };
        t.check_finite("sub")?;
        Ok(t)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        self.check_finite("add_assign")
    }

    pub fn mul_scalar(&self, k: T) -> Result<Self> {
        let data = self.data.iter().map(|&a| a * k).collect();
        let t = Tensor { shape: self.shape.clone(), data };
        t.check_finite("mul_scalar")?;
        Ok(t)
    }

    /// Σᵢ aᵢ², accumulated in index order.
    pub fn sum_squares(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &a| acc + a * a)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &a| acc + a)
    }

    /// `R×K · K×C`. Each output is accumulated over `k` in increasing order.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (r, k) = self.dims2()?;
        let (k2, c) = other.dims2()?;
        if k != k2 {
            return Err(shape_err!("matmul inner extents differ: {r}×{k} · {k2}×{c}"));
        }
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &self.data[i * k..(i + 1) * k];
            let dst = &mut out[i * c..(i + 1) * c];
            for (kk, &a) in row.iter().enumerate() {
                let brow = &other.data[kk * c..(kk + 1) * c];
                for (o, &b) in dst.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        }
        let t = Tensor { shape: alloc::vec![r, c], data: out };
        t.check_finite("matmul")?;
        Ok(t)
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: alloc::vec![c, r], data: out })
    }

    /// Converts every scalar to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max))
    }

    /// Bitwise equality of shape and every scalar.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits_u64() == b.to_bits_u64())
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", … ({} total)", self.data.len())?;
        }
        f.write_str("]")
    }
}
