//! Thread-sharded evaluation and saliency sweeps. Shards only produce
//! integer counts, so results do not depend on the thread count.

use std::thread;

use attnfer_core::data::LabeledImage;
use attnfer_core::saliency::{occluded_predictions, reference_class, window_positions, SaliencyConfig, SaliencyMap};
use attnfer_core::traineval::{eval_pass, Classifier, ConfusionMatrix};
use attnfer_core::{Error, Result};

fn shard_len(n: usize, threads: usize) -> usize {
    n.div_ceil(threads.max(1)).max(1)
}

/// Accuracy and confusion matrix, sharding samples over `threads` threads.
pub fn evaluate<C: Classifier<f32> + Sync>(
    model: &C,
    samples: &[LabeledImage],
    threads: usize,
) -> Result<(f64, ConfusionMatrix)> {
    if samples.is_empty() {
        return Err(Error::Param("cannot evaluate on an empty sample list".into()));
    }
    let parts: Vec<Result<ConfusionMatrix>> = thread::scope(|s| {
        let handles: Vec<_> = samples
            .chunks(shard_len(samples.len(), threads))
            .map(|chunk| s.spawn(move || eval_pass(model, chunk).map(|(_, cm)| cm)))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p))).collect()
    });
    let mut cm = ConfusionMatrix::default();
    for p in parts {
        cm.merge(&p?);
    }
    Ok((cm.accuracy(), cm))
}

/// Occlusion sweep with the windows sharded over `threads` threads.
pub fn occlusion_sweep<C: Classifier<f32> + Sync>(
    model: &C,
    img: &LabeledImage,
    cfg: &SaliencyConfig,
    threads: usize,
) -> Result<(SaliencyMap, usize)> {
    let positions = window_positions(img.height, img.width, cfg)?;
    let reference = reference_class(model, img, cfg.reference)?;
    let parts: Vec<Result<Vec<usize>>> = thread::scope(|s| {
        let handles: Vec<_> = positions
            .chunks(shard_len(positions.len(), threads))
            .map(|chunk| s.spawn(move || occluded_predictions(model, img, cfg.window, chunk)))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p))).collect()
    });
    let mut preds = Vec::with_capacity(positions.len());
    for p in parts {
        preds.extend(p?);
    }
    let mut map = SaliencyMap::empty(img.height, img.width, cfg.window);
    for (&pos, p) in positions.iter().zip(preds) {
        map.record(pos, p != reference);
    }
    Ok((map, reference))
}
