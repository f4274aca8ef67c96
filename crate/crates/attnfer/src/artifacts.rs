//! Output files: checkpoints, run logs, confusion matrices, heatmaps and the
//! manifest that lists them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use attnfer_core::checkpoint::{self, Decoded};
use attnfer_core::data::LabeledImage;
use attnfer_core::model::DeepEmotionModel;
use attnfer_core::optim::TrainConfig;
use attnfer_core::saliency::{ReferenceMode, SaliencyMap};
use attnfer_core::traineval::ConfusionMatrix;

use crate::error::{Error, Result};
use crate::formats::{to_bytes, write_pgm, write_ppm};

/// Environment variable that replaces the default output root.
pub const OUT_ENV: &str = "ATTNFER_OUT";

/// `--out` if given, else `$ATTNFER_OUT`, else `./attnfer-out`.
pub fn output_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("attnfer-out"))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(path: &Path, model: &DeepEmotionModel<f32>, train: Option<&TrainConfig>) -> Result<()> {
    fs::write(path, checkpoint::encode(model, train)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Decoded<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(checkpoint::decode(&bytes)?)
}

/// Writes `<stem>.txt` (aligned table) and `<stem>.csv` (count grid).
pub fn write_confusion(dir: &Path, stem: &str, cm: &ConfusionMatrix) -> Result<[PathBuf; 2]> {
    let table = dir.join(format!("{stem}.txt"));
    let grid = dir.join(format!("{stem}.csv"));
    write_text(&table, &cm.to_table())?;
    write_text(&grid, &cm.to_grid())?;
    Ok([table, grid])
}

/// Grayscale copy of `img` with the red channel raised towards 255 in
/// proportion to the saliency value.
pub fn overlay_rgb(map: &SaliencyMap, img: &LabeledImage) -> Vec<u8> {
    let gray = to_bytes(img.pixels.iter().map(|&v| v as f64));
    let mut rgb = Vec::with_capacity(gray.len() * 3);
    for (&g, s) in gray.iter().zip(map.normalized()) {
        let red = g as f64 + (255.0 - g as f64) * s.clamp(0.0, 1.0);
        rgb.extend_from_slice(&[red.round() as u8, g, g]);
    }
    rgb
}

/// Details recorded next to a heatmap.
#[derive(Debug, Clone)]
pub struct HeatmapInfo<'a> {
    pub source: &'a str,
    pub stride: usize,
    pub mode: ReferenceMode,
    pub reference_class: usize,
}

/// Writes `<stem>_map.pgm`, `<stem>_overlay.ppm` and the `<stem>_saliency.txt` sidecar.
pub fn render_heatmap(
    map: &SaliencyMap,
    img: &LabeledImage,
    dir: &Path,
    stem: &str,
    info: &HeatmapInfo<'_>,
) -> Result<[PathBuf; 3]> {
    let map_path = dir.join(format!("{stem}_map.pgm"));
    let overlay_path = dir.join(format!("{stem}_overlay.ppm"));
    let sidecar = dir.join(format!("{stem}_saliency.txt"));
    write_pgm(&map_path, map.width, map.height, &to_bytes(map.normalized()))?;
    write_ppm(&overlay_path, map.width, map.height, &overlay_rgb(map, img))?;
    let class = attnfer_core::data::Emotion::from_index(info.reference_class).map_or("?", |e| e.name());
    let text = format!(
        "source={}\nwindow={}\nstride={}\nreference_mode={}\nreference_class={} ({class})\nwindows={}\nflipped_windows={}\nflip_fraction={:.6}\n",
        info.source,
        map.window,
        info.stride,
        info.mode.name(),
        info.reference_class,
        map.windows,
        map.flipped_windows,
        map.flip_fraction(),
    );
    write_text(&sidecar, &text)?;
    Ok([map_path, overlay_path, sidecar])
}

/// Inventory of a run's output files.
#[derive(Debug, Default)]
pub struct Manifest {
    header: Vec<(String, String)>,
    files: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Manifest { header: vec![("command".into(), command.into())], files: Vec::new() }
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.header.push((key.into(), value.to_string()));
    }

    pub fn add(&mut self, path: impl Into<PathBuf>) {
        self.files.push(path.into());
    }

    pub fn extend(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        self.files.extend(paths);
    }

    /// Writes `manifest.txt` in `dir`: header lines, then one
    /// `name<TAB>bytes<TAB>crc32` line per file.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let mut s = String::new();
        for (k, v) in &self.header {
            let _ = writeln!(s, "# {k}: {v}");
        }
        for f in &self.files {
            let bytes = fs::read(f).map_err(|e| Error::io(f, e))?;
            let name = f.strip_prefix(dir).unwrap_or(f).to_string_lossy();
            let _ = writeln!(s, "{name}\t{}\t{:08x}", bytes.len(), crc32fast::hash(&bytes));
        }
        let path = dir.join("manifest.txt");
        write_text(&path, &s)?;
        Ok(path)
    }
}
