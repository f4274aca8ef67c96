//! Acceptance checks. Prints one `PASS` / `FAIL` / `NOT RUN` line per
//! criterion and exits non-zero if any required criterion fails.
//!
//! Criteria that need licensed data run only when the data is pointed to:
//! `ATTNFER_JAFFE_ROOT` (JAFFE directory) and `ATTNFER_FER_CSV` (FER-2013 CSV).

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use attnfer::dataset::{load_dataset, DatasetKind};
use attnfer::formats::load_fer_csv;
use attnfer_core::checkpoint;
use attnfer_core::data::{DatasetSplit, Emotion, LabeledImage, SplitProvenance};
use attnfer_core::layers::{maxpool2_forward, softmax_cross_entropy, Conv2d};
use attnfer_core::model::{DeepEmotionModel, ModelConfig, PARAM_NAMES, PENALIZED};
use attnfer_core::optim::{add_regularization_gradient, overall_loss, penalty, regularization_gradient, TrainConfig};
use attnfer_core::rng;
use attnfer_core::saliency::{occlusion_sweep, SaliencyConfig, SaliencyMap};
use attnfer_core::stn::{affine_grid, bilinear_sample_eval, Affine};
use attnfer_core::traineval::{evaluate, train, EpochRecord, NoHooks, RunLog, TrainHooks};
use attnfer_core::verify::{gradient_suite, VerifyOptions};
use attnfer_core::{Result, Scalar, Tensor, NUM_CLASSES};
use rand::Rng as _;

const LAYER_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;
const MIN_INSTANCES: usize = 20;
const ORACLE_TOL_F32: f64 = 1e-5;
const ORACLE_TOL_F64: f64 = 1e-12;
const IDENTITY_TOL: f64 = 1e-6;
const TRANSLATION_TOL: f64 = 1e-5;
const OVERFIT_EPOCHS: usize = 200;
const OVERFIT_SEEDS: [u64; 3] = [1, 2, 3];
const JAFFE_TARGET: f64 = 0.80;
const JAFFE_EPOCHS: usize = 500;
const FER_TARGET: f64 = 0.60;
const SALIENCY_MASS: f64 = 0.70;

enum Status {
    Pass,
    Fail,
    NotRun,
}

struct Outcome {
    id: &'static str,
    title: &'static str,
    status: Status,
    detail: String,
    /// Optional criteria are reported but never fail the run.
    optional: bool,
}

fn judge(ok: bool) -> Status {
    if ok {
        Status::Pass
    } else {
        Status::Fail
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------- 1

fn gradient_fidelity() -> Result<(Status, String)> {
    let start = Instant::now();
    let report = gradient_suite(&VerifyOptions { instances: MIN_INSTANCES, seed: 0, fault: None })?;
    let elapsed = start.elapsed();
    let mut worst_layer = 0.0f64;
    let mut worst_model = 0.0f64;
    let mut bad = Vec::new();
    // whole-model probes pick a random parameter per coordinate, so instances
    // are counted per family rather than per parameter name
    let mut family_instances = [0usize; 2];
    for c in &report.checks {
        let whole_model = c.name.starts_with("model.") || c.name.starts_with("regularized.");
        if whole_model {
            family_instances[usize::from(c.name.starts_with("regularized."))] += c.instances;
        }
        let pinned = if whole_model { MODEL_TOL } else { LAYER_TOL };
        if whole_model {
            worst_model = worst_model.max(c.max_error);
        } else {
            worst_layer = worst_layer.max(c.max_error);
        }
        let within = c.max_error <= pinned && c.tolerance <= pinned && c.passed();
        if !within || (!whole_model && c.instances < MIN_INSTANCES) {
            bad.push(c.name.clone());
        }
    }
    if family_instances.iter().any(|&n| n < MIN_INSTANCES) {
        bad.push(format!("whole-model probes {family_instances:?}"));
    }
    let ok = bad.is_empty() && elapsed < Duration::from_secs(120);
    Ok((
        judge(ok),
        format!(
            "{} checks, worst layer {worst_layer:.2e} (≤{LAYER_TOL:.0e}), worst model {worst_model:.2e} (≤{MODEL_TOL:.0e}), {:.1}s{}",
            report.checks.len(),
            secs(elapsed),
            if bad.is_empty() { String::new() } else { format!(", failing: {}", bad.join(" ")) }
        ),
    ))
}

// ---------------------------------------------------------------- 2

/// Uniform `[-1, 1)` values that are exactly representable in `T`.
fn inputs<T: Scalar>(shape: &[usize], r: &mut rng::Rng) -> Result<(Tensor<T>, Vec<f64>)> {
    let t = Tensor::<f64>::random_uniform(shape, -1.0, 1.0, r.random())?.cast::<T>();
    let exact = t.data().iter().map(|v| v.as_f64()).collect();
    Ok((t, exact))
}

/// Largest `|got - want| / max(1, |want|)`.
fn scaled_diff<T: Scalar>(got: &[T], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter()
        .zip(want)
        .map(|(g, w)| (g.as_f64() - w).abs() / w.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn naive_conv(x: &[f64], w: &[f64], b: &[f64], dims: [usize; 6]) -> Vec<f64> {
    let [n, ci, co, h, wd, k] = dims;
    let (ho, wo) = (h - k + 1, wd - k + 1);
    let mut y = Vec::new();
    for s in 0..n {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for u in 0..k {
                            for v in 0..k {
                                acc += x[((s * ci + c) * h + i + u) * wd + j + v] * w[((o * ci + c) * k + u) * k + v];
                            }
                        }
                    }
                    y.push(acc);
                }
            }
        }
    }
    y
}

fn naive_pool(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut y = Vec::new();
    for p in 0..n * c {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let at = |u: usize, v: usize| x[p * h * w + (2 * i + u) * w + 2 * j + v];
                y.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    y
}

fn naive_softmax_ce(z: &[f64], labels: &[usize], c: usize) -> (f64, Vec<f64>) {
    let n = labels.len();
    let mut loss = 0.0;
    let mut grad = Vec::new();
    for (row, &l) in z.chunks(c).zip(labels) {
        let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
        let total: f64 = e.iter().sum();
        loss += -(e[l] / total).ln();
        grad.extend(e.iter().enumerate().map(|(j, v)| (v / total - if j == l { 1.0 } else { 0.0 }) / n as f64));
    }
    (loss / n as f64, grad)
}

/// Worst scaled deviation over every oracle shape for scalar type `T`.
fn oracle_worst<T: Scalar>(seed: u64) -> Result<(f64, usize)> {
    let mut r = rng::seeded(seed);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for m in 1..=6 {
        for k in 1..=6 {
            for n in 1..=6 {
                let (a, ae) = inputs::<T>(&[m, k], &mut r)?;
                let (b, be) = inputs::<T>(&[k, n], &mut r)?;
                let want: Vec<f64> = (0..m * n)
                    .map(|ij| (0..k).map(|t| ae[(ij / n) * k + t] * be[t * n + ij % n]).sum())
                    .collect();
                worst = worst.max(scaled_diff(a.matmul(&b)?.data(), &want));
                cases += 1;
            }
        }
    }
    for h in 1..=6 {
        for w in 1..=6 {
            for k in 1..=h.min(w) {
                for (n, ci, co) in [(1, 1, 1), (2, 1, 3), (1, 3, 2), (2, 2, 2)] {
                    let (x, xe) = inputs::<T>(&[n, ci, h, w], &mut r)?;
                    let (wt, we) = inputs::<T>(&[co, ci, k, k], &mut r)?;
                    let (bias, bie) = inputs::<T>(&[co], &mut r)?;
                    let got = Conv2d::from_parts(wt, bias)?.forward_eval(&x)?;
                    worst = worst.max(scaled_diff(got.data(), &naive_conv(&xe, &we, &bie, [n, ci, co, h, w, k])));
                    cases += 1;
                }
            }
        }
    }
    for h in 2..=6 {
        for w in 2..=6 {
            for (n, c) in [(1, 1), (2, 3)] {
                let (x, xe) = inputs::<T>(&[n, c, h, w], &mut r)?;
                let got = maxpool2_forward(&x)?.0;
                worst = worst.max(scaled_diff(got.data(), &naive_pool(&xe, n, c, h, w)));
                cases += 1;
            }
        }
    }
    for n in 1..=6 {
        for c in 1..=6 {
            let (z, ze) = inputs::<T>(&[n, c], &mut r)?;
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
            let (loss, grad) = softmax_cross_entropy(&z, &labels)?;
            let (want_loss, want_grad) = naive_softmax_ce(&ze, &labels, c);
            worst = worst.max(scaled_diff(&[loss], &[want_loss])).max(scaled_diff(grad.data(), &want_grad));
            cases += 1;
        }
    }
    Ok((worst, cases))
}

fn oracle_equivalence() -> Result<(Status, String)> {
    let start = Instant::now();
    let (w32, n32) = oracle_worst::<f32>(11)?;
    let (w64, n64) = oracle_worst::<f64>(12)?;
    let elapsed = start.elapsed();
    let ok = w32 <= ORACLE_TOL_F32 && w64 <= ORACLE_TOL_F64 && elapsed < Duration::from_secs(60);
    Ok((
        judge(ok),
        format!(
            "f32 {w32:.2e} (≤{ORACLE_TOL_F32:.0e}, {n32} shapes), f64 {w64:.2e} (≤{ORACLE_TOL_F64:.0e}, {n64} shapes), {:.1}s",
            secs(elapsed)
        ),
    ))
}

// ---------------------------------------------------------------- 3

fn warp<T: Scalar>(x: &Tensor<T>, affine: Affine) -> Result<Tensor<T>> {
    let (n, _, h, w) = x.dims4()?;
    bilinear_sample_eval(x, &affine_grid(&affine.batch::<T>(n)?, h, w)?)
}

fn identity_error<T: Scalar>(seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for (h, w) in [(2, 2), (5, 7), (12, 12), (48, 48)] {
        let x = Tensor::<f64>::random_uniform(&[2, 3, h, w], -1.0, 1.0, seed + h as u64)?.cast::<T>();
        worst = worst.max(warp(&x, Affine::IDENTITY)?.max_abs_diff(&x)?);
    }
    Ok(worst)
}

fn stn_identity() -> Result<(Status, String)> {
    let ident = identity_error::<f64>(3)?.max(identity_error::<f32>(4)?);

    let mut theta_exact = true;
    for seed in 0..5 {
        let model = DeepEmotionModel::<f32>::build(ModelConfig::default(), seed)?;
        let x = Tensor::<f32>::random_uniform(&[3, 1, 48, 48], 0.0, 1.0, 100 + seed)?;
        let theta = model.theta(&x)?;
        theta_exact &= theta.data().chunks(6).all(|row| row == [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    let (h, w) = (16, 20);
    let x = Tensor::<f64>::random_uniform(&[1, 2, h, w], 0.0, 1.0, 9)?;
    let mut shift = 0.0f64;
    for (dx, dy) in [(1i64, 0i64), (0, 2), (-3, 1), (2, -2)] {
        let affine = Affine { tx: 2.0 * dx as f64 / (w - 1) as f64, ty: 2.0 * dy as f64 / (h - 1) as f64, ..Affine::IDENTITY };
        let y = warp(&x, affine)?;
        for c in 0..2 {
            for i in 0..h as i64 {
                for j in 0..w as i64 {
                    let (si, sj) = (i + dy, j + dx);
                    if si < 0 || sj < 0 || si >= h as i64 || sj >= w as i64 {
                        continue;
                    }
                    let at = |t: &Tensor<f64>, a: i64, b: i64| t.data()[(c * h + a as usize) * w + b as usize];
                    shift = shift.max((at(&y, i, j) - at(&x, si, sj)).abs());
                }
            }
        }
    }
    let ok = ident <= IDENTITY_TOL && theta_exact && shift <= TRANSLATION_TOL;
    Ok((
        judge(ok),
        format!(
            "identity warp {ident:.2e} (≤{IDENTITY_TOL:.0e}), initial theta exact: {theta_exact}, translation {shift:.2e} (≤{TRANSLATION_TOL:.0e})"
        ),
    ))
}

// ---------------------------------------------------------------- 4

struct LossProbe {
    model: DeepEmotionModel<f64>,
    x: Tensor<f64>,
    labels: Vec<usize>,
    lambda: f64,
}

impl LossProbe {
    fn loss(&self) -> Result<f64> {
        let (logits, _) = self.model.forward_train(&self.x, 5)?;
        let (ce, _) = softmax_cross_entropy(&logits, &self.labels)?;
        overall_loss(ce, &self.model, self.lambda)
    }

    fn nudge(&mut self, name: &str, i: usize, delta: f64) {
        self.model.param_mut(name).expect("known parameter").data_mut()[i] += delta;
    }

    fn loss_at(&mut self, name: &str, i: usize, delta: f64) -> Result<f64> {
        self.nudge(name, i, delta);
        let l = self.loss();
        self.nudge(name, i, -delta);
        l
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn loss_consistency() -> Result<(Status, String)> {
    const STEP: f64 = 1e-5;
    let cfg = ModelConfig { init_std: 0.3, ..ModelConfig::tiny() };
    let mut r = rng::seeded(77);
    let x = Tensor::<f64>::random_uniform(&[4, 1, 12, 12], 0.0, 1.0, 78)?;
    let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..NUM_CLASSES)).collect();
    let mut probe = LossProbe { model: DeepEmotionModel::<f64>::build(cfg, 79)?, x, labels, lambda: 1e-2 };

    // penalty gradient: 2λw on fc1/fc2 weights, zero on every other tensor
    let reg = regularization_gradient(&probe.model, probe.lambda)?;
    let mut reg_exact = true;
    for name in PARAM_NAMES {
        let g = reg.get(name).expect("gradient entry");
        let w = probe.model.param(name).expect("parameter");
        reg_exact &= if PENALIZED.contains(&name) {
            g.data().iter().zip(w.data()).all(|(g, w)| *g == 2.0 * probe.lambda * w)
        } else {
            g.data().iter().all(|v| *v == 0.0)
        };
    }
    let p0 = penalty(&probe.model);
    let direct: f64 = PENALIZED.iter().flat_map(|n| probe.model.param(n).unwrap().data()).map(|v| v * v).sum();
    reg_exact &= (p0 - direct).abs() <= 1e-12 * direct.max(1.0);

    // full regularized gradient against central differences
    let (logits, cache) = probe.model.forward_train(&probe.x, 5)?;
    let (_, grad_logits) = softmax_cross_entropy(&logits, &probe.labels)?;
    let mut grads = probe.model.backward(&grad_logits, cache)?;
    add_regularization_gradient(&mut grads, &probe.model, probe.lambda)?;
    let mut worst = 0.0f64;
    let (mut compared, mut kinks) = (0usize, 0usize);
    for name in PARAM_NAMES {
        let len = probe.model.param(name).unwrap().len();
        let coords: Vec<usize> = if PENALIZED.contains(&name) { (0..len).collect() } else { (0..4).map(|_| r.random_range(0..len)).collect() };
        for i in coords {
            let l0 = probe.loss()?;
            let (lp, lm) = (probe.loss_at(name, i, STEP)?, probe.loss_at(name, i, -STEP)?);
            let (right, left) = ((lp - l0) / STEP, (l0 - lm) / STEP);
            if (right - left).abs() > 1e-2 * right.abs().max(left.abs()) + 1e-4 {
                kinks += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * STEP);
            worst = worst.max(rel_err(grads.get(name).unwrap().data()[i], numeric));
            compared += 1;
        }
    }

    // λ = 0 leaves cross-entropy untouched, bit for bit
    let (logits, _) = probe.model.forward_train(&probe.x, 5)?;
    let (ce, _) = softmax_cross_entropy(&logits, &probe.labels)?;
    let lambda_zero = overall_loss(ce, &probe.model, 0.0)?.to_bits() == ce.to_bits();

    let ok = reg_exact && lambda_zero && worst <= MODEL_TOL && kinks * 10 <= compared + kinks;
    Ok((
        judge(ok),
        format!(
            "penalty gradient 2λw on fc1/fc2 only: {reg_exact}, loss FD {worst:.2e} (≤{MODEL_TOL:.0e}) over {compared} coords ({kinks} kinks skipped), λ=0 bit-exact: {lambda_zero}"
        ),
    ))
}

// ---------------------------------------------------------------- 5, 9

const SIDE: usize = 48;

/// Grayscale textures that stay distinguishable under flips, small
/// rotations and shifts.
fn texture(class: usize, variant: usize, i: usize, j: usize) -> f32 {
    let (y, x) = (i as f64, j as f64);
    let phase = variant as f64 * 1.5;
    let v = match class {
        0 => 0.15 + 0.05 * variant as f64,
        1 => 0.85 - 0.05 * variant as f64,
        2 => 0.5 + 0.45 * ((y + phase) * std::f64::consts::TAU / 8.0).sin(),
        3 => 0.5 + 0.45 * ((x + phase) * std::f64::consts::TAU / 8.0).sin(),
        4 => {
            if ((i + variant) / 6 + (j + variant) / 6).is_multiple_of(2) {
                0.9
            } else {
                0.1
            }
        }
        5 => {
            let d = ((y - 23.5).powi(2) + (x - 23.5).powi(2)).sqrt();
            if d < 12.0 + variant as f64 {
                0.95
            } else {
                0.05
            }
        }
        _ => 0.5 + 0.45 * ((y + phase) * std::f64::consts::TAU / 3.0).sin() * ((x + phase) * std::f64::consts::TAU / 3.0).sin(),
    };
    v.clamp(0.0, 1.0) as f32
}

fn texture_image(class: usize, variant: usize, tag: &str) -> LabeledImage {
    let px = (0..SIDE * SIDE).map(|p| texture(class, variant, p / SIDE, p % SIDE)).collect();
    let label = Emotion::from_index(class).expect("class index");
    LabeledImage::new(px, SIDE, SIDE, label, format!("{tag}/{class}-{variant}")).expect("valid image")
}

fn overfit_split() -> DatasetSplit {
    let make = |tag: &str| -> Vec<LabeledImage> {
        (0..NUM_CLASSES).flat_map(|c| (0..2).map(move |v| (c, v))).map(|(c, v)| texture_image(c, v, tag)).collect()
    };
    let provenance = SplitProvenance { rule: "overfit probe".into(), seed: 0 };
    DatasetSplit::new(make("train"), make("val"), make("test"), provenance).expect("disjoint ids")
}

/// Records the first epoch whose eval-mode train accuracy reaches 1.0.
struct FirstPerfect<'a> {
    train: &'a [LabeledImage],
    epoch: Option<usize>,
    best_acc: f64,
}

impl TrainHooks<f32> for FirstPerfect<'_> {
    fn on_epoch(&mut self, record: &EpochRecord, model: &DeepEmotionModel<f32>) {
        if self.epoch.is_some() {
            return;
        }
        let acc = evaluate(model, self.train).map_or(0.0, |(a, _)| a);
        self.best_acc = self.best_acc.max(acc);
        if acc == 1.0 {
            self.epoch = Some(record.epoch);
        }
    }
}

fn overfit_config() -> TrainConfig {
    TrainConfig { epochs: OVERFIT_EPOCHS, ..TrainConfig::default() }
}

struct OverfitRun {
    checkpoint: Vec<u8>,
    log: String,
}

fn overfit_run(split: &DatasetSplit, seed: u64, hooks: &mut dyn TrainHooks<f32>) -> Result<OverfitRun> {
    let model = DeepEmotionModel::<f32>::build(ModelConfig::default(), seed)?;
    let cfg = overfit_config();
    let out = train(model, split, &cfg, seed, hooks)?;
    Ok(OverfitRun { checkpoint: checkpoint::encode(&out.model, Some(&cfg)), log: out.log.to_text(false) })
}

/// Seed and run of the first seed that reached perfect train accuracy.
type Winner = Option<(u64, OverfitRun)>;

fn overfit_probe(split: &DatasetSplit) -> Result<(Status, String, Winner)> {
    let start = Instant::now();
    let mut notes = Vec::new();
    let mut winner = None;
    for seed in OVERFIT_SEEDS {
        let mut hook = FirstPerfect { train: &split.train, epoch: None, best_acc: 0.0 };
        let run = overfit_run(split, seed, &mut hook)?;
        match hook.epoch {
            Some(e) => notes.push(format!("seed {seed}: 1.0 at epoch {e}")),
            None => notes.push(format!("seed {seed}: best {:.3}", hook.best_acc)),
        }
        if hook.epoch.is_some() {
            winner = Some((seed, run));
            break;
        }
    }
    let elapsed = start.elapsed();
    let ok = winner.is_some() && elapsed < Duration::from_secs(300);
    Ok((judge(ok), format!("{} images, {}, {:.1}s", split.train.len(), notes.join("; "), secs(elapsed)), winner))
}

fn reproducibility(split: &DatasetSplit, first: Winner) -> Result<(Status, String)> {
    let (seed, first) = match first {
        Some(f) => f,
        None => {
            let run = overfit_run(split, OVERFIT_SEEDS[0], &mut NoHooks)?;
            (OVERFIT_SEEDS[0], run)
        }
    };
    let again = overfit_run(split, seed, &mut NoHooks)?;
    let same_ckpt = first.checkpoint == again.checkpoint;
    let same_log = first.log == again.log;
    Ok((
        judge(same_ckpt && same_log),
        format!(
            "seed {seed}, threads 1: checkpoint {} bytes identical: {same_ckpt}, run log {} bytes identical: {same_log}",
            first.checkpoint.len(),
            first.log.len()
        ),
    ))
}

// ---------------------------------------------------------------- 6, 7

fn env_path(var: &str) -> Option<PathBuf> {
    std::env::var_os(var).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn best_test_accuracy(log: &RunLog) -> f64 {
    log.best_test.as_ref().map_or(0.0, |m| m.accuracy)
}

fn jaffe() -> Result<(Status, String)> {
    let Some(root) = env_path("ATTNFER_JAFFE_ROOT") else {
        return Ok((Status::NotRun, "ATTNFER_JAFFE_ROOT not set; JAFFE images are not bundled".into()));
    };
    let start = Instant::now();
    let mut notes = Vec::new();
    let mut best = 0.0f64;
    for seed in [1u64, 2, 3] {
        let split = load_dataset(DatasetKind::Jaffe, &root, seed, SIDE, SIDE).map_err(|e| attnfer_core::Error::Data(e.to_string()))?;
        let model = DeepEmotionModel::<f32>::build(ModelConfig::default(), seed)?;
        let cfg = TrainConfig { epochs: JAFFE_EPOCHS, ..TrainConfig::default() };
        let out = train(model, &split, &cfg, seed, &mut NoHooks)?;
        let acc = best_test_accuracy(&out.log);
        notes.push(format!(
            "seed {seed}: {}/{}/{} split, test {acc:.3}",
            split.train.len(),
            split.val.len(),
            split.test.len()
        ));
        best = best.max(acc);
        if acc >= JAFFE_TARGET {
            break;
        }
    }
    Ok((judge(best >= JAFFE_TARGET), format!("{} (≥{JAFFE_TARGET}), {:.0}s", notes.join("; "), secs(start.elapsed()))))
}

fn fer_optional() -> Result<(Status, String)> {
    let Some(csv) = env_path("ATTNFER_FER_CSV") else {
        return Ok((Status::NotRun, "ATTNFER_FER_CSV not set; optional long run skipped".into()));
    };
    let epochs = std::env::var("ATTNFER_FER_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(TrainConfig::default().epochs);
    let start = Instant::now();
    let split = load_fer_csv(&csv).map_err(|e| attnfer_core::Error::Data(e.to_string()))?;
    let model = DeepEmotionModel::<f32>::build(ModelConfig::default(), 1)?;
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let out = train(model, &split, &cfg, 1, &mut NoHooks)?;
    let acc = best_test_accuracy(&out.log);
    Ok((judge(acc >= FER_TARGET), format!("{epochs} epochs, test {acc:.3} (≥{FER_TARGET}), {:.0}s", secs(start.elapsed()))))
}

// ---------------------------------------------------------------- 8

const KEY: usize = 8;

/// Binary 8×8 key pattern of each class.
fn key_bit(class: usize, i: usize, j: usize) -> bool {
    match class {
        0 => i.is_multiple_of(2),
        1 => j.is_multiple_of(2),
        2 => (i + j).is_multiple_of(2),
        3 => (i / 2 + j / 2).is_multiple_of(2),
        4 => i < KEY / 2,
        5 => j < KEY / 2,
        _ => i == j || i + j == KEY - 1,
    }
}

/// Key pattern in the top-left corner encodes the class; everything else is
/// noise of random brightness that carries no label information. `blanks`
/// black squares are dropped on the background so the classifier learns to
/// ignore background occlusion.
fn keyed_image(class: usize, blanks: usize, r: &mut rng::Rng, id: String) -> LabeledImage {
    let level = r.random_range(0.05..0.4f32);
    let mut px: Vec<f32> = (0..SIDE * SIDE)
        .map(|p| {
            let (i, j) = (p / SIDE, p % SIDE);
            if i < KEY && j < KEY {
                if key_bit(class, i, j) { 1.0 } else { 0.0 }
            } else {
                r.random_range(0.0..level)
            }
        })
        .collect();
    for _ in 0..blanks {
        let (top, left) = (r.random_range(0..=SIDE - KEY), r.random_range(0..=SIDE - KEY));
        for i in top..top + KEY {
            for j in left..left + KEY {
                if i >= KEY || j >= KEY {
                    px[i * SIDE + j] = 0.0;
                }
            }
        }
    }
    LabeledImage::new(px, SIDE, SIDE, Emotion::from_index(class).unwrap(), id).expect("valid image")
}

fn keyed_set(per_class: usize, blanks: usize, tag: &str, r: &mut rng::Rng) -> Vec<LabeledImage> {
    (0..per_class * NUM_CLASSES).map(|i| keyed_image(i % NUM_CLASSES, i % (blanks + 1), r, format!("{tag}/{i}"))).collect()
}

/// Share of the summed normalized maps that lies in `[0, limit)²`.
fn aggregate_mass(maps: &[SaliencyMap], limit: usize) -> f64 {
    let (mut inside, mut total) = (0.0, 0.0);
    for m in maps {
        for (p, v) in m.normalized().into_iter().enumerate() {
            total += v;
            if p / m.width < limit && p % m.width < limit {
                inside += v;
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        inside / total
    }
}

fn saliency_sanity() -> Result<(Status, String)> {
    let start = Instant::now();
    let mut r = rng::seeded(808);
    let split = DatasetSplit::new(
        keyed_set(20, 3, "train", &mut r),
        keyed_set(3, 0, "val", &mut r),
        keyed_set(3, 0, "test", &mut r),
        SplitProvenance { rule: "keyed patch".into(), seed: 808 },
    )?;
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 32,
        learning_rate: 1e-3,
        augment: attnfer_core::augment::AugmentConfig::disabled(),
        ..TrainConfig::default()
    };
    let out = train(DeepEmotionModel::<f32>::build(ModelConfig::default(), 1)?, &split, &cfg, 1, &mut NoHooks)?;
    let model = out.model;
    let (test_acc, _) = evaluate(&model, &split.test)?;

    let sweep = SaliencyConfig::default();
    let maps = split.test.iter().map(|img| occlusion_sweep(&model, img, &sweep)).collect::<Result<Vec<_>>>()?;
    let limit = KEY + sweep.window;
    let mass = aggregate_mass(&maps, limit);

    let mut constant = model.clone();
    for name in ["fc2.weight", "fc2.bias"] {
        let zero = Tensor::zeros_like(constant.param(name).unwrap());
        constant.set_param(name, zero)?;
    }
    let all_zero = split
        .test
        .iter()
        .map(|img| occlusion_sweep(&constant, img, &sweep))
        .collect::<Result<Vec<_>>>()?
        .iter()
        .all(|m| m.normalized().iter().all(|&v| v == 0.0));

    let elapsed = start.elapsed();
    let ok = mass >= SALIENCY_MASS && all_zero && elapsed < Duration::from_secs(300);
    Ok((
        judge(ok),
        format!(
            "keyed model test acc {test_acc:.3}, mass in [0,{limit})² {mass:.3} (≥{SALIENCY_MASS}), constant model all-zero: {all_zero}, {:.1}s",
            secs(elapsed)
        ),
    ))
}

// ----------------------------------------------------------------

fn run(id: &'static str, title: &'static str, optional: bool, f: impl FnOnce() -> Result<(Status, String)>) -> Outcome {
    let (status, detail) = match f() {
        Ok(r) => r,
        Err(e) => (Status::Fail, format!("error: {e}")),
    };
    Outcome { id, title, status, detail, optional }
}

fn report(o: &Outcome) {
    let tag = match (&o.status, o.optional) {
        (Status::Pass, _) => "PASS",
        (Status::Fail, false) => "FAIL",
        (Status::Fail, true) => "FAIL (optional)",
        (Status::NotRun, _) => "NOT RUN",
    };
    println!("[{tag}] {} {}: {}", o.id, o.title, o.detail);
}

fn main() -> ExitCode {
    // `ATTNFER_ACCEPTANCE_ONLY=1,8` runs a subset
    let only: Option<Vec<String>> =
        std::env::var("ATTNFER_ACCEPTANCE_ONLY").ok().map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let selected = |id: &str| only.as_ref().is_none_or(|ids| ids.iter().any(|i| i == id));
    let mut outcomes = Vec::new();
    let mut push = |o: Outcome| {
        report(&o);
        outcomes.push(o);
    };
    let run = |id: &'static str, title: &'static str, optional: bool, f: &mut dyn FnMut() -> Result<(Status, String)>| {
        if selected(id) {
            run(id, title, optional, f)
        } else {
            Outcome { id, title, status: Status::NotRun, detail: "not selected".into(), optional }
        }
    };
    push(run("1", "gradient fidelity", false, &mut gradient_fidelity));
    push(run("2", "oracle equivalence", false, &mut oracle_equivalence));
    push(run("3", "spatial transformer identity", false, &mut stn_identity));
    push(run("4", "regularized loss consistency", false, &mut loss_consistency));

    let split = overfit_split();
    let mut first = None;
    push(run("5", "overfit probe", false, &mut || {
        let (status, detail, winner) = overfit_probe(&split)?;
        first = winner;
        Ok((status, detail))
    }));
    push(run("6", "JAFFE test accuracy", false, &mut jaffe));
    push(run("7", "FER-2013 long run", true, &mut fer_optional));
    push(run("8", "saliency sanity", false, &mut saliency_sanity));
    push(run("9", "reproducibility", false, &mut || reproducibility(&split, first.take())));

    let failed = outcomes.iter().filter(|o| matches!(o.status, Status::Fail) && !o.optional).count();
    let not_run = outcomes.iter().filter(|o| matches!(o.status, Status::NotRun)).count();
    let passed = outcomes.iter().filter(|o| matches!(o.status, Status::Pass)).count();
    println!("acceptance: {passed} passed, {failed} failed, {not_run} not run");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
