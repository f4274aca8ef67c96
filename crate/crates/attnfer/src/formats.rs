//! Image files and the FER-2013 CSV.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use attnfer_core::data::{center_crop_resize, DatasetSplit, Emotion, LabeledImage, SplitProvenance};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};

/// Extensions treated as images when scanning directories.
pub const IMAGE_EXTENSIONS: [&str; 9] = ["png", "jpg", "jpeg", "tif", "tiff", "pgm", "ppm", "pnm", "bmp"];

pub fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Decodes any supported image to 8-bit luminance; returns `(height, width, bytes)`.
pub fn read_luma(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let g = img.to_luma8();
    Ok((g.height() as usize, g.width() as usize, g.into_raw()))
}

/// Loads an image as a `target_h×target_w` plane in `[0, 1]` (centre crop, nearest resize).
pub fn read_gray(path: &Path, target_h: usize, target_w: usize) -> Result<Vec<f32>> {
    let (h, w, bytes) = read_luma(path)?;
    Ok(center_crop_resize(&bytes, h, w, target_h, target_w)?)
}

fn encode_pnm(path: &Path, width: usize, height: usize, bytes: &[u8], subtype: PnmSubtype, color: ExtendedColorType) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(bytes, width as u32, height as u32, color)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Binary 8-bit PGM (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    encode_pnm(path, width, height, gray, PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
}

/// Binary 8-bit PPM (P6), interleaved RGB.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    encode_pnm(path, width, height, rgb, PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
}

/// Quantizes `[0, 1]` values to bytes.
pub fn to_bytes(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn usage_partition(usage: &str) -> Option<usize> {
    match usage.trim() {
        "Training" => Some(0),
        "PublicTest" => Some(1),
        "PrivateTest" => Some(2),
        _ => None,
    }
}

/// Parses the FER-2013 CSV (`emotion,pixels,Usage`). Training rows form the
/// train partition, PublicTest the validation and PrivateTest the test set.
pub fn load_fer_csv(path: &Path) -> Result<DatasetSplit> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::new(file));
    let headers = reader.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::format(path, format!("missing column {name:?}")))
    };
    let (ci, pi, ui) = (column("emotion")?, column("pixels")?, column("usage")?);
    let mut parts: [Vec<LabeledImage>; 3] = Default::default();
    for record in reader.records() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |msg: String| Error::format(path, format!("line {line}: {msg}"));
        let field = |i: usize| record.get(i).ok_or_else(|| bad(format!("missing field {i}")));
        let label = field(ci)?
            .trim()
            .parse::<usize>()
            .ok()
            .and_then(Emotion::from_index)
            .ok_or_else(|| bad(format!("bad emotion {:?}", record.get(ci))))?;
        let pixels = field(pi)?
            .split_whitespace()
            .map(|t| t.parse::<u8>().map(|v| v as f32 / 255.0))
            .collect::<std::result::Result<Vec<f32>, _>>()
            .map_err(|e| bad(format!("bad pixel value: {e}")))?;
        if pixels.len() != 48 * 48 {
            return Err(bad(format!("expected 2304 pixels, found {}", pixels.len())));
        }
        let usage = field(ui)?;
        let part = usage_partition(usage).ok_or_else(|| bad(format!("unknown usage {usage:?}")))?;
        let image = LabeledImage::new(pixels, 48, 48, label, format!("fer:{line}")).map_err(|e| bad(e.to_string()))?;
        parts[part].push(image);
    }
    let [train, val, test] = parts;
    if train.is_empty() && val.is_empty() && test.is_empty() {
        return Err(Error::format(path, "no rows"));
    }
    let provenance = SplitProvenance { rule: "fer2013 usage column".into(), seed: 0 };
    Ok(DatasetSplit::new(train, val, test, provenance)?)
}
