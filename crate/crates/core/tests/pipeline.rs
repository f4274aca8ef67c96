//! End-to-end use of the public API: train, checkpoint, reload, evaluate,
//! sweep, verify.

use attnfer_core::augment::AugmentConfig;
use attnfer_core::checkpoint::{decode, encode};
use attnfer_core::data::{DatasetSplit, Emotion, LabeledImage, SplitProvenance};
use attnfer_core::model::{DeepEmotionModel, ModelConfig};
use attnfer_core::optim::TrainConfig;
use attnfer_core::saliency::{occlusion_sweep, SaliencyConfig};
use attnfer_core::traineval::{evaluate, train, NoHooks};
use attnfer_core::verify::{run_all, VerifyOptions};
use attnfer_core::{Error, NUM_CLASSES};
use proptest::prelude::*;

fn image(class: usize, variant: usize, tag: &str) -> LabeledImage {
    let px = (0..144)
        .map(|p| {
            let (i, j) = (p / 12, p % 12);
            let on = match class {
                0 => i < 6,
                1 => j < 6,
                2 => (i + j) % 2 == 0,
                3 => i % 3 == 0,
                4 => j % 3 == 0,
                5 => i == j,
                _ => (3..9).contains(&i) && (3..9).contains(&j),
            };
            if on { 0.9 - 0.05 * variant as f32 } else { 0.1 }
        })
        .collect();
    LabeledImage::new(px, 12, 12, Emotion::from_index(class).unwrap(), format!("{tag}/{class}/{variant}")).unwrap()
}

fn split() -> DatasetSplit {
    let part = |tag: &str| (0..NUM_CLASSES).flat_map(|c| (0..2).map(move |v| (c, v))).map(|(c, v)| image(c, v, tag)).collect();
    DatasetSplit::new(part("train"), part("val"), part("test"), SplitProvenance { rule: "synthetic".into(), seed: 0 }).unwrap()
}

fn small_train(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 7, augment: AugmentConfig::disabled(), ..TrainConfig::default() }
}

#[test]
fn trained_model_survives_checkpoint_round_trip() {
    let split = split();
    let cfg = small_train(5);
    let model = DeepEmotionModel::<f32>::build(ModelConfig::tiny(), 4).unwrap();
    let out = train(model, &split, &cfg, 4, &mut NoHooks).unwrap();
    assert_eq!(out.log.records.len(), 5);

    let bytes = encode(&out.model, Some(&cfg));
    let back = decode::<f32>(&bytes).unwrap();
    assert_eq!(back.train, Some(cfg));
    assert_eq!(encode(&back.model, back.train.as_ref()), bytes);

    let refs: Vec<&LabeledImage> = split.test.iter().collect();
    let x = attnfer_core::data::batch_tensor::<f32>(&refs).unwrap();
    assert!(out.model.logits_eval(&x).unwrap().bit_eq(&back.model.logits_eval(&x).unwrap()));
    assert_eq!(evaluate(&out.model, &split.test).unwrap(), evaluate(&back.model, &split.test).unwrap());
}

#[test]
fn checkpoint_of_one_precision_does_not_load_as_another() {
    let model = DeepEmotionModel::<f32>::build(ModelConfig::tiny(), 1).unwrap();
    let err = decode::<f64>(&encode(&model, None)).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
}

#[test]
fn sweep_on_trained_model_covers_every_pixel() {
    let split = split();
    let model = DeepEmotionModel::<f32>::build(ModelConfig::tiny(), 2).unwrap();
    let model = train(model, &split, &small_train(3), 2, &mut NoHooks).unwrap().model;
    let cfg = SaliencyConfig { window: 4, stride: 2, ..SaliencyConfig::default() };
    let map = occlusion_sweep(&model, &split.test[0], &cfg).unwrap();
    assert_eq!(map.windows, 25);
    assert!(map.coverage.iter().all(|&c| c > 0));
    assert!(map.normalized().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn verify_suites_pass_and_detect_a_faulty_gradient() {
    let clean = run_all(&VerifyOptions { instances: 3, ..VerifyOptions::default() }).unwrap();
    assert!(clean.passed(), "{}", clean.to_text());
    let faulty = VerifyOptions { instances: 3, fault: Some("linear.weight".into()), ..VerifyOptions::default() };
    let report = run_all(&faulty).unwrap();
    assert!(!report.passed());
    let failing: Vec<_> = report.suites.iter().flat_map(|s| &s.checks).filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    assert_eq!(failing, ["linear.weight"]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_round_trip_for_any_seed(seed in any::<u64>(), lr in 1e-4f64..1e-1) {
        let model = DeepEmotionModel::<f32>::build(ModelConfig::tiny(), seed).unwrap();
        let cfg = TrainConfig { learning_rate: lr, ..TrainConfig::default() };
        let bytes = encode(&model, Some(&cfg));
        let back = decode::<f32>(&bytes).unwrap();
        prop_assert_eq!(back.train, Some(cfg));
        for ((name, a), (_, b)) in model.params().into_iter().zip(back.model.params()) {
            prop_assert!(a.bit_eq(b), "{} differs", name);
        }
    }

    #[test]
    fn any_flipped_byte_is_rejected(seed in 0u64..4, pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let model = DeepEmotionModel::<f32>::build(ModelConfig::tiny(), seed).unwrap();
        let mut bytes = encode(&model, None);
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(decode::<f32>(&bytes).is_err());
    }

    #[test]
    fn zero_epochs_leave_parameters_untouched(seed in any::<u64>()) {
        let model = DeepEmotionModel::<f32>::build(ModelConfig::tiny(), seed).unwrap();
        let out = train(model.clone(), &split(), &small_train(0), seed, &mut NoHooks).unwrap();
        prop_assert_eq!(encode(&out.model, None), encode(&model, None));
        prop_assert!(out.log.records.is_empty());
    }
}
