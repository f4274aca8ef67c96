//! Spatial transformer: localization network, affine grid generator and
//! differentiable bilinear sampler.
//!
//! Coordinates are normalized to `[-1, 1]²` with `(-1, -1)` at the centre of
//! the top-left pixel and `(1, 1)` at the centre of the bottom-right pixel.
//! A transform `[[a, b, tx], [c, d, ty]]` maps output coordinates to source
//! coordinates. The same convention drives training-time augmentation.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{param_err, shape_err, Result};
use crate::layers::{
    maxpool2_backward, maxpool2_forward, maxpool2_output, relu_backward, relu_eval, relu_forward,
    Conv2d, ConvCache, Linear, LinearCache, MaxPoolCache, ReluCache,
};
use crate::layers::expect_shape;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::Scalar;

/// `[a, b, tx, c, d, ty]` of the identity transform.
pub const IDENTITY_THETA: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// One affine transform in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub c: f64,
    pub d: f64,
    pub ty: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { a: 1.0, b: 0.0, tx: 0.0, c: 0.0, d: 1.0, ty: 0.0 };

    pub fn from_row(theta: [f64; 6]) -> Self {
        let [a, b, tx, c, d, ty] = theta;
        Affine { a, b, tx, c, d, ty }
    }

    pub fn to_row(self) -> [f64; 6] {
        [self.a, self.b, self.tx, self.c, self.d, self.ty]
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(self, other: Affine) -> Affine {
        Affine {
            a: self.a * other.a + self.b * other.c,
            b: self.a * other.b + self.b * other.d,
            tx: self.a * other.tx + self.b * other.ty + self.tx,
            c: self.c * other.a + self.d * other.c,
            d: self.c * other.b + self.d * other.d,
            ty: self.c * other.tx + self.d * other.ty + self.ty,
        }
    }

    /// `N×6` tensor repeating this transform.
    pub fn batch<T: Scalar>(self, n: usize) -> Result<Tensor<T>> {
        let row = self.to_row();
        let data = (0..n).flat_map(|_| row.iter().map(|&v| T::from_f64_lossy(v))).collect();
        Tensor::from_vec(&[n, 6], data)
    }
}

fn base_coord<T: Scalar>(idx: usize, extent: usize) -> T {
    // exact integer numerator keeps the base grid symmetric
    let num = T::from_f64_lossy(2.0 * idx as f64 - (extent - 1) as f64);
    num / T::from_f64_lossy((extent - 1) as f64)
}

fn check_grid_extent(h: usize, w: usize) -> Result<()> {
    if h < 2 || w < 2 {
        return Err(param_err!("sampling grid needs H, W >= 2, got {h}×{w}"));
    }
    Ok(())
}

/// Sampling grid `N×H×W×2` of source coordinates `(x_s, y_s)` for `theta: N×6`.
pub fn affine_grid<T: Scalar>(theta: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    check_grid_extent(h, w)?;
    let (n, six) = theta.dims2()?;
    if six != 6 {
        return Err(shape_err!("theta must be N×6, got {:?}", theta.shape()));
    }
    let xs: Vec<T> = (0..w).map(|j| base_coord(j, w)).collect();
    let ys: Vec<T> = (0..h).map(|i| base_coord(i, h)).collect();
    let mut grid = Vec::with_capacity(n * h * w * 2);
    for b in 0..n {
        let t = &theta.data()[b * 6..b * 6 + 6];
        for &yt in &ys {
            for &xt in &xs {
                grid.push(t[0] * xt + t[1] * yt + t[2]);
                grid.push(t[3] * xt + t[4] * yt + t[5]);
            }
        }
    }
    Tensor::from_vec(&[n, h, w, 2], grid)
}

/// Gradient of a scalar loss wrt `theta`, given its gradient wrt the grid.
pub fn affine_grid_backward<T: Scalar>(grad_grid: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, w) = match grad_grid.shape() {
        &[n, h, w, 2] => (n, h, w),
        s => return Err(shape_err!("grid gradient must be N×H×W×2, got {s:?}")),
    };
    check_grid_extent(h, w)?;
    let xs: Vec<T> = (0..w).map(|j| base_coord(j, w)).collect();
    let ys: Vec<T> = (0..h).map(|i| base_coord(i, h)).collect();
    let g = grad_grid.data();
    let mut out = vec![T::zero(); n * 6];
    for b in 0..n {
        let mut acc = [T::zero(); 6];
        for (i, &yt) in ys.iter().enumerate() {
            for (j, &xt) in xs.iter().enumerate() {
                let k = ((b * h + i) * w + j) * 2;
                let (gx, gy) = (g[k], g[k + 1]);
                acc[0] = acc[0] + gx * xt;
                acc[1] = acc[1] + gx * yt;
                acc[2] = acc[2] + gx;
                acc[3] = acc[3] + gy * xt;
                acc[4] = acc[4] + gy * yt;
                acc[5] = acc[5] + gy;
            }
        }
        out[b * 6..b * 6 + 6].copy_from_slice(&acc);
    }
    Tensor::from_vec(&[n, 6], out)
}

/// Normalized coordinate to pixel space. Values within a few ulps of an
/// integer snap to it so identity and whole-pixel warps reproduce pixels exactly.
#[inline]
fn to_pixel<T: Scalar>(s: T, extent: usize) -> T {
    let half = T::from_f64_lossy((extent - 1) as f64 * 0.5);
    let u = (s + T::one()) * half;
    let r = u.round();
    let tol = T::from_f64_lossy(8.0) * T::epsilon() * T::one().max(u.abs());
    if (u - r).abs() <= tol {
        r
    } else {
        u
    }
}

/// Bilinear interpolation stencil at pixel-space `(u, v)`.
struct Stencil<T> {
    x0: isize,
    y0: isize,
    fu: T,
    fv: T,
}

impl<T: Scalar> Stencil<T> {
    fn at(u: T, v: T) -> Self {
        let (uf, vf) = (u.floor(), v.floor());
        Stencil {
            x0: uf.to_isize().unwrap_or(isize::MIN / 2),
            y0: vf.to_isize().unwrap_or(isize::MIN / 2),
            fu: u - uf,
            fv: v - vf,
        }
    }
}

#[inline]
fn pixel<T: Scalar>(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
        plane[y as usize * w + x as usize]
    } else {
        T::zero()
    }
}

/// Saved input and grid of one sampling call.
#[derive(Debug)]
pub struct SampleCache<T> {
    input: Tensor<T>,
    grid: Tensor<T>,
}

fn check_sample_shapes<T: Scalar>(x: &Tensor<T>, grid: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    check_grid_extent(h, w)?;
    if grid.shape() != [n, h, w, 2] {
        return Err(shape_err!(
            "grid shape {:?} does not match input {:?} (expected [{n}, {h}, {w}, 2])",
            grid.shape(),
            x.shape()
        ));
    }
    Ok((n, c, h, w))
}

/// Samples `x` at the grid positions; out-of-image neighbours read as 0.
pub fn bilinear_sample_eval<T: Scalar>(x: &Tensor<T>, grid: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_sample_shapes(x, grid)?;
    let mut y = vec![T::zero(); x.len()];
    let g = grid.data();
    for b in 0..n {
        for p in 0..h * w {
            let k = (b * h * w + p) * 2;
            let s = Stencil::at(to_pixel(g[k], w), to_pixel(g[k + 1], h));
            let (w00, w01) = ((T::one() - s.fu) * (T::one() - s.fv), s.fu * (T::one() - s.fv));
            let (w10, w11) = ((T::one() - s.fu) * s.fv, s.fu * s.fv);
            for ch in 0..c {
                let plane = &x.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                let mut acc = w00 * pixel(plane, h, w, s.y0, s.x0);
                if s.fu != T::zero() {
                    acc = acc + w01 * pixel(plane, h, w, s.y0, s.x0 + 1);
                }
                if s.fv != T::zero() {
                    acc = acc + w10 * pixel(plane, h, w, s.y0 + 1, s.x0);
                    if s.fu != T::zero() {
                        acc = acc + w11 * pixel(plane, h, w, s.y0 + 1, s.x0 + 1);
                    }
                }
                y[(b * c + ch) * h * w + p] = acc;
            }
        }
    }
    Tensor::from_vec(x.shape(), y)
}

pub fn bilinear_sample<T: Scalar>(x: &Tensor<T>, grid: &Tensor<T>) -> Result<(Tensor<T>, SampleCache<T>)> {
    let y = bilinear_sample_eval(x, grid)?;
    Ok((y, SampleCache { input: x.clone(), grid: grid.clone() }))
}

/// Gradients wrt the sampled image and wrt the grid coordinates.
pub fn bilinear_sample_backward<T: Scalar>(
    grad_y: &Tensor<T>,
    cache: SampleCache<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let SampleCache { input: x, grid } = cache;
    let (n, c, h, w) = check_sample_shapes(&x, &grid)?;
    expect_shape(grad_y, x.shape(), "bilinear backward grad_y")?;
    let half_w = T::from_f64_lossy((w - 1) as f64 * 0.5);
    let half_h = T::from_f64_lossy((h - 1) as f64 * 0.5);
    let g = grid.data();
    let gy = grad_y.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut ggrid = vec![T::zero(); grid.len()];
    for b in 0..n {
        for p in 0..h * w {
            let k = (b * h * w + p) * 2;
            let s = Stencil::at(to_pixel(g[k], w), to_pixel(g[k + 1], h));
            let one = T::one();
            let corners = [
                (s.y0, s.x0, (one - s.fu) * (one - s.fv)),
                (s.y0, s.x0 + 1, s.fu * (one - s.fv)),
                (s.y0 + 1, s.x0, (one - s.fu) * s.fv),
                (s.y0 + 1, s.x0 + 1, s.fu * s.fv),
            ];
            let mut du = T::zero();
            let mut dv = T::zero();
            for ch in 0..c {
                let off = (b * c + ch) * h * w;
                let plane = &x.data()[off..off + h * w];
                let go = gy[off + p];
                let v00 = pixel(plane, h, w, s.y0, s.x0);
                let v01 = pixel(plane, h, w, s.y0, s.x0 + 1);
                let v10 = pixel(plane, h, w, s.y0 + 1, s.x0);
                let v11 = pixel(plane, h, w, s.y0 + 1, s.x0 + 1);
                du = du + go * ((one - s.fv) * (v01 - v00) + s.fv * (v11 - v10));
                dv = dv + go * ((one - s.fu) * (v10 - v00) + s.fu * (v11 - v01));
                for &(yy, xx, wt) in &corners {
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        let idx = off + yy as usize * w + xx as usize;
                        gx[idx] = gx[idx] + wt * go;
                    }
                }
            }
            ggrid[k] = du * half_w;
            ggrid[k + 1] = dv * half_h;
        }
    }
    Ok((Tensor::from_vec(x.shape(), gx)?, Tensor::from_vec(grid.shape(), ggrid)?))
}

/// Geometry of the localization network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalizationConfig {
    pub conv1_channels: usize,
    pub conv1_kernel: usize,
    pub conv2_channels: usize,
    pub conv2_kernel: usize,
    pub hidden: usize,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        LocalizationConfig {
            conv1_channels: 8,
            conv1_kernel: 7,
            conv2_channels: 10,
            conv2_kernel: 5,
            hidden: 32,
        }
    }
}

impl LocalizationConfig {
    /// Flattened feature length for an `h×w` input, or the first failing stage.
    pub fn flat_features(&self, h: usize, w: usize) -> core::result::Result<usize, String> {
        use alloc::format;
        let conv = |h: usize, w: usize, k: usize, name: &str| {
            if k == 0 || h < k || w < k {
                Err(format!("{name}: input {h}×{w} smaller than kernel {k}"))
            } else {
                Ok((h - k + 1, w - k + 1))
            }
        };
        let pool = |h: usize, w: usize, name: &str| {
            maxpool2_output(h, w).map_err(|_| format!("{name}: input {h}×{w} too small to pool"))
        };
        let (h, w) = conv(h, w, self.conv1_kernel, "loc.conv1")?;
        let (h, w) = pool(h, w, "loc.pool1")?;
        let (h, w) = conv(h, w, self.conv2_kernel, "loc.conv2")?;
        let (h, w) = pool(h, w, "loc.pool2")?;
        Ok(self.conv2_channels * h * w)
    }
}

/// Localization network regressing `θ` from the raw input:
/// conv → pool → ReLU → conv → pool → ReLU → FC → ReLU → FC(6).
#[derive(Debug, Clone, PartialEq)]
pub struct Localization<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug)]
pub struct LocalizationCache<T> {
    conv1: ConvCache<T>,
    pool1: MaxPoolCache,
    relu1: ReluCache,
    conv2: ConvCache<T>,
    pool2: MaxPoolCache,
    relu2: ReluCache,
    feature_shape: Vec<usize>,
    fc1: LinearCache<T>,
    relu3: ReluCache,
    fc2: LinearCache<T>,
}

/// Parameter gradients of the localization network.
#[derive(Debug)]
pub struct LocalizationGrads<T> {
    pub conv1: (Tensor<T>, Tensor<T>),
    pub conv2: (Tensor<T>, Tensor<T>),
    pub fc1: (Tensor<T>, Tensor<T>),
    pub fc2: (Tensor<T>, Tensor<T>),
}

impl<T: Scalar> Localization<T> {
    /// Gaussian(0, std) weights everywhere except the output layer, which
    /// starts at zero weights and identity bias.
    pub fn new(cfg: &LocalizationConfig, in_h: usize, in_w: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        let flat = cfg.flat_features(in_h, in_w).map_err(crate::Error::Config)?;
        let conv1 = Conv2d::gaussian(1, cfg.conv1_channels, cfg.conv1_kernel, std, rng)?;
        let conv2 = Conv2d::gaussian(cfg.conv1_channels, cfg.conv2_channels, cfg.conv2_kernel, std, rng)?;
        let fc1 = Linear::gaussian(flat, cfg.hidden, std, rng)?;
        let mut fc2 = Linear::new(cfg.hidden, 6)?;
        for (b, &v) in fc2.bias.data_mut().iter_mut().zip(&IDENTITY_THETA) {
            *b = T::from_f64_lossy(v);
        }
        Ok(Localization { conv1, conv2, fc1, fc2 })
    }

    fn features_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.conv1.forward_eval(x)?;
        let (h, _) = maxpool2_forward(&h)?;
        let h = relu_eval(&h)?;
        let h = self.conv2.forward_eval(&h)?;
        let (h, _) = maxpool2_forward(&h)?;
        relu_eval(&h)
    }

    fn flatten(&self, h: Tensor<T>) -> Result<Tensor<T>> {
        let n = h.shape()[0];
        let flat = h.len() / n;
        if flat != self.fc1.inputs() {
            return Err(shape_err!(
                "localization: {flat} features reach fc1, which expects {}",
                self.fc1.inputs()
            ));
        }
        h.reshape(&[n, flat])
    }

    /// `θ` (`N×6`) without saving state.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.flatten(self.features_eval(x)?)?;
        let h = relu_eval(&self.fc1.forward_eval(&h)?)?;
        self.fc2.forward_eval(&h)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LocalizationCache<T>)> {
        let (h, conv1) = self.conv1.forward(x)?;
        let (h, pool1) = maxpool2_forward(&h)?;
        let (h, relu1) = relu_forward(&h)?;
        let (h, conv2) = self.conv2.forward(&h)?;
        let (h, pool2) = maxpool2_forward(&h)?;
        let (h, relu2) = relu_forward(&h)?;
        let feature_shape = h.shape().to_vec();
        let h = self.flatten(h)?;
        let (h, fc1) = self.fc1.forward(&h)?;
        let (h, relu3) = relu_forward(&h)?;
        let (theta, fc2) = self.fc2.forward(&h)?;
        Ok((
            theta,
            LocalizationCache { conv1, pool1, relu1, conv2, pool2, relu2, feature_shape, fc1, relu3, fc2 },
        ))
    }

    pub fn backward(&self, grad_theta: &Tensor<T>, cache: LocalizationCache<T>) -> Result<LocalizationGrads<T>> {
        let g2 = self.fc2.backward(grad_theta, cache.fc2)?;
        let g = relu_backward(&g2.input, cache.relu3)?;
        let g1 = self.fc1.backward(&g, cache.fc1)?;
        let g = g1.input.reshape(&cache.feature_shape)?;
        let g = relu_backward(&g, cache.relu2)?;
        let g = maxpool2_backward(&g, cache.pool2)?;
        let c2 = self.conv2.backward(&g, cache.conv2)?;
        let g = relu_backward(&c2.input, cache.relu1)?;
        let g = maxpool2_backward(&g, cache.pool1)?;
        let c1 = self.conv1.backward(&g, cache.conv1)?;
        Ok(LocalizationGrads {
            conv1: (c1.weight, c1.bias),
            conv2: (c2.weight, c2.bias),
            fc1: (g1.weight, g1.bias),
            fc2: (g2.weight, g2.bias),
        })
    }
}
