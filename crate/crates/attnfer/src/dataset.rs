//! Dataset directories and their split protocols.

use std::path::{Path, PathBuf};

use attnfer_core::data::{DatasetSplit, Emotion, LabeledImage, SequenceFrame, SplitRule};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::formats::{is_image, load_fer_csv, read_gray};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DatasetKind {
    /// FER-2013 CSV file.
    Fer,
    /// JAFFE: expression code in the file name (`KA.AN1.39.tiff`).
    Jaffe,
    /// CK+: one directory per class, files named `<sequence>_<frame>`.
    Ckplus,
    /// FERG: one directory per character and class (`aia/aia_anger/…`).
    Ferg,
    /// Any tree with one directory per class.
    Dir,
}

/// Where an image's label comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Nearest ancestor directory whose name mentions an emotion.
    ClassDirs,
    /// A token of the file name.
    LabelInFilename,
}

impl DatasetKind {
    pub fn layout(self) -> Layout {
        match self {
            DatasetKind::Jaffe => Layout::LabelInFilename,
            _ => Layout::ClassDirs,
        }
    }

    pub fn rule(self) -> SplitRule {
        match self {
            DatasetKind::Jaffe => SplitRule::JAFFE,
            DatasetKind::Ckplus => SplitRule::CK_PLUS,
            DatasetKind::Ferg => SplitRule::FERG,
            DatasetKind::Fer | DatasetKind::Dir => SplitRule::Fractions { train: 0.7, val: 0.1 },
        }
    }
}

/// First emotion named by a token of `name`; tokens split on punctuation and
/// lose trailing digits (`AN1` reads as `AN`).
pub fn emotion_in_name(name: &str) -> Option<Emotion> {
    name.split(|c: char| !c.is_ascii_alphanumeric())
        .map(|t| t.trim_end_matches(|c: char| c.is_ascii_digit()))
        .filter(|t| t.len() >= 2)
        .find_map(Emotion::parse)
}

/// Splits a file stem `<sequence>_<frame>` into its parts.
pub fn sequence_and_frame(stem: &str) -> (String, u64) {
    match stem.rsplit_once('_') {
        Some((seq, frame)) if !seq.is_empty() => match frame.parse() {
            Ok(f) => (seq.to_string(), f),
            Err(_) => (stem.to_string(), 0),
        },
        _ => (stem.to_string(), 0),
    }
}

/// Labelled image files under `root`, sorted by path. Files outside any
/// class directory are skipped for `ClassDirs`; for `LabelInFilename` an
/// unlabelled file is an error.
pub fn scan(root: &Path, layout: Layout) -> Result<Vec<(PathBuf, Emotion)>> {
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory")));
    }
    let mut out = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::format(root, e.to_string()))?;
        let path = entry.path();
        if !entry.file_type().is_file() || !is_image(path) {
            continue;
        }
        let rel = path.strip_prefix(root).unwrap_or(path);
        let label = match layout {
            Layout::LabelInFilename => {
                let name = rel.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                Some(emotion_in_name(name).ok_or_else(|| Error::format(path, "no expression code in the file name"))?)
            }
            Layout::ClassDirs => rel
                .parent()
                .into_iter()
                .flat_map(|p| p.ancestors())
                .filter_map(|a| a.file_name().and_then(|n| n.to_str()))
                .find_map(emotion_in_name),
        };
        if let Some(label) = label {
            out.push((path.to_path_buf(), label));
        }
    }
    if out.is_empty() {
        return Err(Error::format(root, "no labelled images found"));
    }
    Ok(out)
}

/// Loads every labelled image under `root` and partitions them with `rule`.
pub fn load_image_dir(
    root: &Path,
    layout: Layout,
    rule: SplitRule,
    seed: u64,
    height: usize,
    width: usize,
) -> Result<DatasetSplit> {
    let mut frames = Vec::new();
    for (path, label) in scan(root, layout)? {
        let rel = path.strip_prefix(root).unwrap_or(&path);
        let id = rel.to_string_lossy().replace('\\', "/");
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let (sequence, frame) = sequence_and_frame(stem);
        let sequence = match rel.parent() {
            Some(p) if !p.as_os_str().is_empty() => format!("{}/{sequence}", p.to_string_lossy()),
            _ => sequence,
        };
        let pixels = read_gray(&path, height, width)?;
        let image = LabeledImage::new(pixels, height, width, label, id).map_err(|e| Error::format(&path, e.to_string()))?;
        frames.push(SequenceFrame { sequence, frame, image });
    }
    Ok(rule.apply(frames, seed)?)
}

/// Loads a dataset of the given kind at the model's input size.
pub fn load_dataset(kind: DatasetKind, root: &Path, seed: u64, height: usize, width: usize) -> Result<DatasetSplit> {
    match kind {
        DatasetKind::Fer => {
            if (height, width) != (48, 48) {
                return Err(Error::Usage(format!("FER-2013 images are 48×48, model expects {height}×{width}")));
            }
            load_fer_csv(root)
        }
        _ => load_image_dir(root, kind.layout(), kind.rule(), seed, height, width),
    }
}
