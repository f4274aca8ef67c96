//! Training-time augmentation: random horizontal flip, small rotation and
//! translation, composed into one affine warp and applied with the spatial
//! transformer's bilinear sampler.

use alloc::vec::Vec;

use rand::Rng as _;

use crate::data::LabeledImage;
use crate::error::{config_err, Result};
use crate::rng;
use crate::stn::{affine_grid, bilinear_sample_eval, Affine};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_prob: f64,
    /// Rotation is drawn uniformly from `±max_rotation_deg`.
    pub max_rotation_deg: f64,
    /// Translation is drawn uniformly from `±max_translation_frac` of width/height.
    pub max_translation_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { enabled: true, flip_prob: 0.5, max_rotation_deg: 10.0, max_translation_frac: 0.1 }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(config_err!("flip_prob must lie in [0, 1]"));
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg.is_finite()) {
            return Err(config_err!("max_rotation_deg must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.max_translation_frac) {
            return Err(config_err!("max_translation_frac must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One sampled set of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    /// Counter-clockwise rotation of the content, in degrees.
    pub rotation_deg: f64,
    /// Content shift in pixels (positive moves content right / down).
    pub shift_x: f64,
    pub shift_y: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw { flip: false, rotation_deg: 0.0, shift_x: 0.0, shift_y: 0.0 };

    pub fn sample(cfg: &AugmentConfig, h: usize, w: usize, r: &mut rng::Rng) -> Self {
        let flip = r.random::<f64>() < cfg.flip_prob;
        let mut sym = |max: f64| if max > 0.0 { r.random_range(-max..=max) } else { 0.0 };
        let rotation_deg = sym(cfg.max_rotation_deg);
        let shift_x = sym(cfg.max_translation_frac * w as f64);
        let shift_y = sym(cfg.max_translation_frac * h as f64);
        AugmentDraw { flip, rotation_deg, shift_x, shift_y }
    }

    /// Output→source transform for an `h×w` image: undo the shift, undo the
    /// rotation, then mirror.
    pub fn to_affine(&self, h: usize, w: usize) -> Affine {
        let shift = Affine {
            tx: -2.0 * self.shift_x / (w as f64 - 1.0),
            ty: -2.0 * self.shift_y / (h as f64 - 1.0),
            ..Affine::IDENTITY
        };
        let rad = self.rotation_deg.to_radians();
        let (s, c) = (num_traits::Float::sin(rad), num_traits::Float::cos(rad));
        // image y points down, so a counter-clockwise content rotation samples
        // the source at R(+α) in these coordinates
        let rot = if self.rotation_deg == 0.0 {
            Affine::IDENTITY
        } else {
            Affine { a: c, b: -s, tx: 0.0, c: s, d: c, ty: 0.0 }
        };
        let flip = if self.flip { Affine { a: -1.0, ..Affine::IDENTITY } } else { Affine::IDENTITY };
        flip.compose(rot.compose(shift))
    }
}

/// Warps one `h×w` plane by `draw` and clamps the result to `[0, 1]`.
pub fn apply_draw(pixels: &[f32], h: usize, w: usize, draw: &AugmentDraw) -> Result<Vec<f32>> {
    if *draw == AugmentDraw::IDENTITY {
        return Ok(pixels.to_vec());
    }
    let x = Tensor::<f32>::from_vec(&[1, 1, h, w], pixels.to_vec())?;
    let theta = draw.to_affine(h, w).batch::<f32>(1)?;
    let grid = affine_grid(&theta, h, w)?;
    let y = bilinear_sample_eval(&x, &grid)?;
    Ok(y.into_data().into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Augmented copy of `img`; a pure function of `(img, cfg, seed)`. The label
/// and source id are unchanged.
pub fn augment(img: &LabeledImage, cfg: &AugmentConfig, seed: u64) -> Result<LabeledImage> {
    if !cfg.enabled {
        return Ok(img.clone());
    }
    let mut r = rng::stream(seed, rng::streams::AUGMENT);
    let draw = AugmentDraw::sample(cfg, img.height, img.width, &mut r);
    augment_with(img, &draw)
}

pub fn augment_with(img: &LabeledImage, draw: &AugmentDraw) -> Result<LabeledImage> {
    let pixels = apply_draw(&img.pixels, img.height, img.width, draw)?;
    Ok(LabeledImage { pixels, ..img.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Emotion;
    use alloc::string::ToString;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    fn noise_image(seed: u64, h: usize, w: usize) -> LabeledImage {
        let t = Tensor::<f32>::random_uniform(&[h * w], 0.0, 1.0, seed).unwrap();
        LabeledImage::new(t.into_data(), h, w, Emotion::Happy, "img".to_string()).unwrap()
    }

    #[test]
    fn identity_draw_is_identity() {
        let img = noise_image(1, 48, 48);
        let out = augment_with(&img, &AugmentDraw::IDENTITY).unwrap();
        assert_eq!(out, img);
        // zero magnitudes through the full sampler path
        let theta_draw = AugmentDraw { rotation_deg: 0.0, shift_x: 0.0, shift_y: 0.0, flip: false };
        let a = theta_draw.to_affine(48, 48);
        assert_eq!(a, Affine::IDENTITY);
        let cfg = AugmentConfig { flip_prob: 0.0, max_rotation_deg: 0.0, max_translation_frac: 0.0, enabled: true };
        let out = augment(&img, &cfg, 99).unwrap();
        for (a, b) in out.pixels.iter().zip(&img.pixels) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn flip_mirrors_columns_exactly() {
        let (h, w) = (48, 48);
        let img = noise_image(2, h, w);
        let draw = AugmentDraw { flip: true, ..AugmentDraw::IDENTITY };
        let out = augment_with(&img, &draw).unwrap();
        for i in 0..h {
            for j in 0..w {
                assert_eq!(out.pixels[i * w + j], img.pixels[i * w + (w - 1 - j)]);
            }
        }
    }

    #[test]
    fn one_pixel_translation() {
        let (h, w) = (48, 48);
        let img = noise_image(3, h, w);
        let draw = AugmentDraw { shift_x: 1.0, shift_y: 0.0, ..AugmentDraw::IDENTITY };
        let out = augment_with(&img, &draw).unwrap();
        for i in 0..h {
            for j in 1..w {
                assert!((out.pixels[i * w + j] - img.pixels[i * w + j - 1]).abs() <= 1e-5);
            }
            assert_eq!(out.pixels[i * w], 0.0);
        }
        let draw = AugmentDraw { shift_x: 0.0, shift_y: -1.0, ..AugmentDraw::IDENTITY };
        let out = augment_with(&img, &draw).unwrap();
        for i in 0..h - 1 {
            for j in 0..w {
                assert!((out.pixels[i * w + j] - img.pixels[(i + 1) * w + j]).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn small_rotation_moves_content_counter_clockwise() {
        let (h, w) = (33, 33);
        let mut px = alloc::vec![0.0f32; h * w];
        // bright dot right of centre
        px[16 * w + 28] = 1.0;
        let img = LabeledImage::new(px, h, w, Emotion::Sad, "dot".to_string()).unwrap();
        let draw = AugmentDraw { rotation_deg: 90.0, ..AugmentDraw::IDENTITY };
        let out = augment_with(&img, &draw).unwrap();
        let (idx, _) = out
            .pixels
            .iter()
            .enumerate()
            .fold((0, f32::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        // counter-clockwise on screen: right of centre moves above centre
        assert_eq!((idx / w, idx % w), (4, 16));
    }

    proptest! {
        #[test]
        fn preserves_label_shape_and_range(seed in 0u64..10_000) {
            let img = noise_image(seed, 20, 20);
            let out = augment(&img, &AugmentConfig::default(), seed).unwrap();
            prop_assert_eq!(out.label, img.label);
            prop_assert_eq!(out.pixels.len(), img.pixels.len());
            prop_assert_eq!((out.height, out.width), (img.height, img.width));
            prop_assert!(out.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let again = augment(&img, &AugmentConfig::default(), seed).unwrap();
            let same: Vec<bool> = out.pixels.iter().zip(&again.pixels).map(|(a, b)| a.to_bits() == b.to_bits()).collect();
            prop_assert!(same.iter().all(|&s| s));
        }
    }
}
