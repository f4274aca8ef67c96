//! Labelled images, the split rules for each dataset, and image geometry helpers.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;

use crate::error::{data_err, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::{Scalar, NUM_CLASSES};

/// Emotion classes in FER-2013 index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Emotion {
    Angry = 0,
    Disgust = 1,
    Fear = 2,
    Happy = 3,
    Sad = 4,
    Surprise = 5,
    Neutral = 6,
}

impl Emotion {
    pub const ALL: [Emotion; NUM_CLASSES] = [
        Emotion::Angry,
        Emotion::Disgust,
        Emotion::Fear,
        Emotion::Happy,
        Emotion::Sad,
        Emotion::Surprise,
        Emotion::Neutral,
    ];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Angry => "angry",
            Emotion::Disgust => "disgust",
            Emotion::Fear => "fear",
            Emotion::Happy => "happy",
            Emotion::Sad => "sad",
            Emotion::Surprise => "surprise",
            Emotion::Neutral => "neutral",
        }
    }

    /// Accepts the canonical name (any case), common synonyms, or the index digit.
    pub fn parse(s: &str) -> Option<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let e = match lower.as_str() {
            "0" | "angry" | "anger" | "an" => Emotion::Angry,
            "1" | "disgust" | "disgusted" | "di" => Emotion::Disgust,
            "2" | "fear" | "fearful" | "afraid" | "fe" => Emotion::Fear,
            "3" | "happy" | "happiness" | "joy" | "ha" => Emotion::Happy,
            "4" | "sad" | "sadness" | "sa" => Emotion::Sad,
            "5" | "surprise" | "surprised" | "su" => Emotion::Surprise,
            "6" | "neutral" | "ne" => Emotion::Neutral,
            _ => return None,
        };
        Some(e)
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One grayscale face with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub label: Emotion,
    pub source_id: String,
}

impl LabeledImage {
    pub fn new(pixels: Vec<f32>, height: usize, width: usize, label: Emotion, source_id: String) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(data_err!(
                "{source_id}: {} pixels do not form a {height}×{width} image",
                pixels.len()
            ));
        }
        if let Some(i) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(data_err!("{source_id}: pixel {i} = {} lies outside [0, 1]", pixels[i]));
        }
        Ok(LabeledImage { pixels, height, width, label, source_id })
    }
}

/// Stacks images into an `N×1×H×W` batch.
pub fn batch_tensor<T: Scalar>(images: &[&LabeledImage]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| data_err!("cannot batch zero images"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(data_err!("{}: {}×{} image in a {h}×{w} batch", img.source_id, img.height, img.width));
        }
        data.extend(img.pixels.iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Tensor::from_vec(&[images.len(), 1, h, w], data)
}

/// Center-crops an 8-bit plane to a square, then nearest-neighbour resizes it
/// to `target_h×target_w`, scaling values to `[0, 1]`.
pub fn center_crop_resize(src: &[u8], h: usize, w: usize, target_h: usize, target_w: usize) -> Result<Vec<f32>> {
    if src.len() != h * w || h == 0 || w == 0 {
        return Err(data_err!("image buffer of {} bytes is not {h}×{w}", src.len()));
    }
    let side = h.min(w);
    let (top, left) = ((h - side) / 2, (w - side) / 2);
    let mut out = Vec::with_capacity(target_h * target_w);
    for i in 0..target_h {
        let si = top + (i * side) / target_h;
        for j in 0..target_w {
            let sj = left + (j * side) / target_w;
            out.push(src[si * w + sj] as f32 / 255.0);
        }
    }
    Ok(out)
}

/// Which partition a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

/// How a split was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitProvenance {
    pub rule: String,
    pub seed: u64,
}

/// Train/val/test partitions, pairwise disjoint by `source_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub provenance: SplitProvenance,
}

impl DatasetSplit {
    pub fn new(
        train: Vec<LabeledImage>,
        val: Vec<LabeledImage>,
        test: Vec<LabeledImage>,
        provenance: SplitProvenance,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for img in train.iter().chain(&val).chain(&test) {
            if !seen.insert(img.source_id.as_str()) {
                return Err(data_err!("source id {:?} appears more than once in the split", img.source_id));
            }
        }
        Ok(DatasetSplit { train, val, test, provenance })
    }

    pub fn partition(&self, p: Partition) -> &[LabeledImage] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    /// Audit manifest: provenance header, then one `partition<TAB>label<TAB>source_id` line per sample.
    pub fn manifest(&self) -> String {
        let mut s = format!(
            "# rule: {}\n# seed: {}\n# sizes: train={} val={} test={}\n",
            self.provenance.rule,
            self.provenance.seed,
            self.train.len(),
            self.val.len(),
            self.test.len()
        );
        for p in [Partition::Train, Partition::Val, Partition::Test] {
            for img in self.partition(p) {
                s.push_str(&format!("{}\t{}\t{}\n", p.name(), img.label.index(), img.source_id));
            }
        }
        s
    }
}

/// One frame of an expression sequence (CK+ layout).
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFrame {
    pub sequence: String,
    pub frame: u64,
    pub image: LabeledImage,
}

/// Partitioning protocol for a dataset directory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitRule {
    /// Fixed test count per class, fixed validation count, rest train.
    Jaffe { test_per_class: usize, val: usize },
    /// Last frame of each sequence, then random train/val/test fractions.
    CkPlus { train: f64, val: f64 },
    /// Fixed test count per class, a fraction of the remainder for validation.
    Ferg { test_per_class: usize, val_fraction: f64 },
    /// Plain random train/val/test fractions.
    Fractions { train: f64, val: f64 },
}

impl SplitRule {
    /// 120 train / 23 val / 70 test (10 per emotion) on the 213-image set.
    pub const JAFFE: SplitRule = SplitRule::Jaffe { test_per_class: 10, val: 23 };
    /// 70% / 10% / 20%.
    pub const CK_PLUS: SplitRule = SplitRule::CkPlus { train: 0.7, val: 0.1 };
    /// 1k test images per expression; ~14k of the remaining ~48k for validation.
    pub const FERG: SplitRule = SplitRule::Ferg { test_per_class: 1000, val_fraction: 14.0 / 48.0 };

    pub fn describe(&self) -> String {
        match *self {
            SplitRule::Jaffe { test_per_class, val } => {
                format!("jaffe(test_per_class={test_per_class}, val={val})")
            }
            SplitRule::CkPlus { train, val } => {
                format!("ckplus(last_frame, train={train}, val={val}, test={:.3})", 1.0 - train - val)
            }
            SplitRule::Ferg { test_per_class, val_fraction } => {
                format!("ferg(test_per_class={test_per_class}, val_fraction={val_fraction:.4})")
            }
            SplitRule::Fractions { train, val } => {
                format!("fractions(train={train}, val={val}, test={:.3})", 1.0 - train - val)
            }
        }
    }

    /// Applies the rule. Input order does not matter: samples are sorted by
    /// source id before the seeded shuffle.
    pub fn apply(&self, frames: Vec<SequenceFrame>, seed: u64) -> Result<DatasetSplit> {
        let provenance = SplitProvenance { rule: self.describe(), seed };
        let mut r = rng::stream(seed, rng::streams::SPLIT);
        match *self {
            SplitRule::CkPlus { train, val } => {
                let images = last_frames(frames);
                let (tr, va, te) = split_fractions(images, train, val, &mut r)?;
                DatasetSplit::new(tr, va, te, provenance)
            }
            SplitRule::Fractions { train, val } => {
                let images = sorted(frames.into_iter().map(|f| f.image).collect());
                let (tr, va, te) = split_fractions(images, train, val, &mut r)?;
                DatasetSplit::new(tr, va, te, provenance)
            }
            SplitRule::Jaffe { test_per_class, val } => {
                let images = sorted(frames.into_iter().map(|f| f.image).collect());
                let (test, mut rest) = take_per_class(images, test_per_class, &mut r)?;
                if rest.len() <= val {
                    return Err(data_err!(
                        "{} images remain after the test split; need more than {val} for validation",
                        rest.len()
                    ));
                }
                rest.shuffle(&mut r);
                let train = rest.split_off(val);
                DatasetSplit::new(train, rest, test, provenance)
            }
            SplitRule::Ferg { test_per_class, val_fraction } => {
                if !(0.0..1.0).contains(&val_fraction) {
                    return Err(data_err!("val_fraction must lie in [0, 1)"));
                }
                let images = sorted(frames.into_iter().map(|f| f.image).collect());
                let (test, mut rest) = take_per_class(images, test_per_class, &mut r)?;
                rest.shuffle(&mut r);
                let n_val = num_traits::Float::round(val_fraction * rest.len() as f64) as usize;
                if n_val == 0 || n_val >= rest.len() {
                    return Err(data_err!("{} images remain; cannot carve a validation set", rest.len()));
                }
                let train = rest.split_off(n_val);
                DatasetSplit::new(train, rest, test, provenance)
            }
        }
    }
}

fn sorted(mut images: Vec<LabeledImage>) -> Vec<LabeledImage> {
    images.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    images
}

/// Keeps only the highest-numbered frame of each sequence.
fn last_frames(frames: Vec<SequenceFrame>) -> Vec<LabeledImage> {
    let mut best: BTreeMap<String, SequenceFrame> = BTreeMap::new();
    for f in frames {
        match best.get(&f.sequence) {
            Some(b) if b.frame > f.frame || (b.frame == f.frame && b.image.source_id >= f.image.source_id) => {}
            _ => {
                best.insert(f.sequence.clone(), f);
            }
        }
    }
    // BTreeMap iteration is ordered by sequence id
    best.into_values().map(|f| f.image).collect()
}

fn split_fractions(
    mut images: Vec<LabeledImage>,
    train: f64,
    val: f64,
    r: &mut rng::Rng,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>, Vec<LabeledImage>)> {
    if !(train > 0.0 && val > 0.0 && train + val < 1.0 + 1e-12) {
        return Err(data_err!("split fractions train={train}, val={val} are invalid"));
    }
    let n = images.len();
    let n_train = num_traits::Float::round(train * n as f64) as usize;
    let n_val = num_traits::Float::round(val * n as f64) as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val > n {
        return Err(data_err!("{n} images are too few for a train={train}/val={val} split"));
    }
    images.shuffle(r);
    let mut rest = images.split_off(n_train);
    let test = rest.split_off(n_val);
    Ok((images, rest, test))
}

fn take_per_class(
    images: Vec<LabeledImage>,
    per_class: usize,
    r: &mut rng::Rng,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let mut by_class: Vec<Vec<LabeledImage>> = (0..NUM_CLASSES).map(|_| Vec::new()).collect();
    for img in images {
        by_class[img.label.index()].push(img);
    }
    let mut taken = Vec::new();
    let mut rest = Vec::new();
    for (c, mut group) in by_class.into_iter().enumerate() {
        if group.len() < per_class {
            return Err(data_err!(
                "class {} has {} images; the split needs at least {per_class}",
                Emotion::ALL[c],
                group.len()
            ));
        }
        group.shuffle(r);
        let remainder = group.split_off(per_class);
        taken.extend(group);
        rest.extend(remainder);
    }
    Ok((taken, rest))
}

/// Wraps still images (no sequence structure) as single-frame sequences.
pub fn as_frames(images: Vec<LabeledImage>) -> Vec<SequenceFrame> {
    images
        .into_iter()
        .map(|image| SequenceFrame { sequence: image.source_id.to_string(), frame: 0, image })
        .collect()
}
