//! Occlusion-window saliency: zero an `N×N` window at every stride-`s`
//! position and mark the pixels whose occlusion changes the prediction.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::{batch_tensor, LabeledImage};
use crate::error::{param_err, Result};
use crate::traineval::{argmax_rows, Classifier};
use crate::Scalar;

/// What an occluded prediction is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReferenceMode {
    /// The model's prediction on the unoccluded image (needs no label).
    #[default]
    UnoccludedPrediction,
    /// The image's ground-truth label.
    GroundTruthLabel,
}

impl ReferenceMode {
    pub fn name(self) -> &'static str {
        match self {
            ReferenceMode::UnoccludedPrediction => "unoccluded-prediction",
            ReferenceMode::GroundTruthLabel => "ground-truth-label",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "unoccluded-prediction" | "prediction" => Some(ReferenceMode::UnoccludedPrediction),
            "ground-truth-label" | "label" => Some(ReferenceMode::GroundTruthLabel),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SaliencyConfig {
    pub window: usize,
    pub stride: usize,
    pub reference: ReferenceMode,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        SaliencyConfig { window: 8, stride: 4, reference: ReferenceMode::UnoccludedPrediction }
    }
}

impl SaliencyConfig {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.window == 0 || self.stride == 0 {
            return Err(param_err!("window and stride must be at least 1"));
        }
        if self.window > h || self.window > w {
            return Err(param_err!("window {} does not fit a {h}×{w} image", self.window));
        }
        Ok(())
    }
}

/// Window offsets `0, s, 2s, …` along one axis, plus a final window flush
/// with the far edge. Every pixel is covered whenever `s <= N`.
pub fn window_offsets(extent: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window == 0 || stride == 0 || window > extent {
        return Err(param_err!("window {window} / stride {stride} invalid for extent {extent}"));
    }
    let last = extent - window;
    let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
    if v.last() != Some(&last) {
        v.push(last);
    }
    Ok(v)
}

/// All `(top, left)` window positions in row-major order.
pub fn window_positions(h: usize, w: usize, cfg: &SaliencyConfig) -> Result<Vec<(usize, usize)>> {
    cfg.validate(h, w)?;
    let rows = window_offsets(h, cfg.window, cfg.stride)?;
    let cols = window_offsets(w, cfg.window, cfg.stride)?;
    Ok(rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect())
}

/// Per-pixel flip and coverage counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub flips: Vec<u32>,
    pub coverage: Vec<u32>,
    pub windows: usize,
    pub flipped_windows: usize,
}

impl SaliencyMap {
    pub fn empty(height: usize, width: usize, window: usize) -> Self {
        SaliencyMap {
            height,
            width,
            window,
            flips: vec![0; height * width],
            coverage: vec![0; height * width],
            windows: 0,
            flipped_windows: 0,
        }
    }

    /// Adds one window outcome.
    pub fn record(&mut self, (top, left): (usize, usize), flipped: bool) {
        for i in top..top + self.window {
            for j in left..left + self.window {
                let k = i * self.width + j;
                self.coverage[k] += 1;
                if flipped {
                    self.flips[k] += 1;
                }
            }
        }
        self.windows += 1;
        if flipped {
            self.flipped_windows += 1;
        }
    }

    /// Sums counts from another partial sweep over the same image.
    pub fn merge(&mut self, other: &SaliencyMap) -> Result<()> {
        if (self.height, self.width, self.window) != (other.height, other.width, other.window) {
            return Err(param_err!("cannot merge saliency maps of different geometry"));
        }
        for (a, b) in self.flips.iter_mut().zip(&other.flips) {
            *a += b;
        }
        for (a, b) in self.coverage.iter_mut().zip(&other.coverage) {
            *a += b;
        }
        self.windows += other.windows;
        self.flipped_windows += other.flipped_windows;
        Ok(())
    }

    /// `flips / coverage` per pixel, in `[0, 1]`; uncovered pixels are 0.
    pub fn normalized(&self) -> Vec<f64> {
        self.flips
            .iter()
            .zip(&self.coverage)
            .map(|(&f, &c)| if c == 0 { 0.0 } else { f as f64 / c as f64 })
            .collect()
    }

    pub fn flip_fraction(&self) -> f64 {
        if self.windows == 0 {
            0.0
        } else {
            self.flipped_windows as f64 / self.windows as f64
        }
    }

    /// Share of the normalized mass inside the given row and column ranges.
    pub fn mass_fraction(&self, rows: core::ops::Range<usize>, cols: core::ops::Range<usize>) -> f64 {
        let n = self.normalized();
        let total: f64 = n.iter().sum();
        if total == 0.0 {
            return 0.0;
        }
        let inside: f64 = rows
            .flat_map(|i| cols.clone().map(move |j| (i, j)))
            .filter(|&(i, j)| i < self.height && j < self.width)
            .map(|(i, j)| n[i * self.width + j])
            .sum();
        inside / total
    }
}

/// Class every occluded prediction is compared with.
pub fn reference_class<T: Scalar, C: Classifier<T> + ?Sized>(
    model: &C,
    img: &LabeledImage,
    mode: ReferenceMode,
) -> Result<usize> {
    match mode {
        ReferenceMode::GroundTruthLabel => Ok(img.label.index()),
        ReferenceMode::UnoccludedPrediction => {
            let x = batch_tensor::<T>(&[img])?;
            Ok(argmax_rows(&model.logits(&x)?)?[0])
        }
    }
}

const SWEEP_BATCH: usize = 32;

/// Predicted class with each window zeroed, in the order given.
pub fn occluded_predictions<T: Scalar, C: Classifier<T> + ?Sized>(
    model: &C,
    img: &LabeledImage,
    window: usize,
    positions: &[(usize, usize)],
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(positions.len());
    for chunk in positions.chunks(SWEEP_BATCH) {
        let occluded: Vec<LabeledImage> = chunk
            .iter()
            .map(|&(top, left)| {
                let mut o = img.clone();
                for i in top..top + window {
                    o.pixels[i * img.width + left..i * img.width + left + window].fill(0.0);
                }
                o
            })
            .collect();
        let refs: Vec<&LabeledImage> = occluded.iter().collect();
        out.extend(argmax_rows(&model.logits(&batch_tensor::<T>(&refs)?)?)?);
    }
    Ok(out)
}

/// Sweeps all windows over `img`.
pub fn occlusion_sweep<T: Scalar, C: Classifier<T> + ?Sized>(
    model: &C,
    img: &LabeledImage,
    cfg: &SaliencyConfig,
) -> Result<SaliencyMap> {
    let positions = window_positions(img.height, img.width, cfg)?;
    let reference = reference_class(model, img, cfg.reference)?;
    let preds = occluded_predictions(model, img, cfg.window, &positions)?;
    let mut map = SaliencyMap::empty(img.height, img.width, cfg.window);
    for (&pos, p) in positions.iter().zip(preds) {
        map.record(pos, p != reference);
    }
    Ok(map)
}
