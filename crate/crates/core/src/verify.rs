//! Self-checks in double precision: finite-difference gradient checks for
//! every layer and the whole model, brute-force oracle comparisons, and the
//! spatial transformer identity properties.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::Rng as _;

use crate::error::Result;
use crate::layers::{
    maxpool2_backward, maxpool2_forward, relu_backward, relu_eval, relu_forward, softmax_cross_entropy, Conv2d,
    Dropout, Linear, Mode,
};
use crate::model::{DeepEmotionModel, ModelConfig, PARAM_NAMES, PENALIZED};
use crate::optim::{add_regularization_gradient, overall_loss, regularization_gradient};
use crate::rng::{self, Rng};
use crate::stn::{
    affine_grid, affine_grid_backward, bilinear_sample, bilinear_sample_backward, bilinear_sample_eval, Affine,
    Localization, LocalizationConfig, IDENTITY_THETA,
};
use crate::tensor::Tensor;
use crate::Scalar;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Max relative error allowed for single layers and the transformer path.
pub const LAYER_TOLERANCE: f64 = 1e-4;
/// Max relative error allowed for whole-model checks.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Pairs where both gradients are below this magnitude are not compared.
pub const EXEMPT_BELOW: f64 = 1e-8;
/// Scale applied to analytic gradients of the check named by `VerifyOptions::fault`.
pub const FAULT_SCALE: f64 = 1.05;

/// `|a - n| / max(|a|, |n|)`, or `None` when both are negligible.
pub fn relative_error(analytic: f64, numeric: f64) -> Option<f64> {
    let scale = analytic.abs().max(numeric.abs());
    if scale < EXEMPT_BELOW {
        None
    } else {
        Some((analytic - numeric).abs() / scale)
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Random instances per gradient check.
    pub instances: usize,
    pub seed: u64,
    /// Name prefix of checks whose analytic gradient is deliberately scaled,
    /// to prove the harness catches a broken backward pass.
    pub fault: Option<String>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { instances: 20, seed: 0, fault: None }
    }
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Worst observed error (relative for gradient checks, scaled absolute otherwise).
    pub max_error: f64,
    pub tolerance: f64,
    pub instances: usize,
    pub compared: usize,
    pub exempt: usize,
    /// Coordinates skipped because the loss is not differentiable within the step.
    pub kinks: usize,
    /// For boolean checks: whether an exact property held.
    pub exact_ok: bool,
}

impl CheckResult {
    fn new(name: &str, tolerance: f64) -> Self {
        CheckResult {
            name: String::from(name),
            max_error: 0.0,
            tolerance,
            instances: 0,
            compared: 0,
            exempt: 0,
            kinks: 0,
            exact_ok: true,
        }
    }

    /// Error within tolerance, something was compared, and at most one in
    /// ten probes fell on a kink.
    pub fn passed(&self) -> bool {
        self.exact_ok
            && self.max_error <= self.tolerance
            && self.compared + self.exempt > 0
            && self.kinks * 10 <= self.compared + self.exempt + self.kinks
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "suite {}: {}", self.name, if self.passed() { "PASS" } else { "FAIL" });
        for c in &self.checks {
            let _ = writeln!(
                s,
                "  {:<28} max_err={:.3e} tol={:.0e} instances={} compared={} exempt={} kinks={} {}",
                c.name,
                c.max_error,
                c.tolerance,
                c.instances,
                c.compared,
                c.exempt,
                c.kinks,
                if c.passed() { "ok" } else { "FAIL" }
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::passed)
    }

    pub fn to_text(&self) -> String {
        self.suites.iter().map(SuiteReport::to_text).collect()
    }
}

/// Accumulates check results by name, in first-seen order.
struct Checks<'o> {
    opts: &'o VerifyOptions,
    results: Vec<CheckResult>,
}

impl<'o> Checks<'o> {
    fn new(opts: &'o VerifyOptions) -> Self {
        Checks { opts, results: Vec::new() }
    }

    fn slot(&mut self, name: &str, tol: f64) -> &mut CheckResult {
        let i = match self.results.iter().position(|c| c.name == name) {
            Some(i) => i,
            None => {
                self.results.push(CheckResult::new(name, tol));
                self.results.len() - 1
            }
        };
        &mut self.results[i]
    }

    /// Compares `analytic[i]` with a central difference of `f` at `x0` for
    /// each `i` in `indices` (all coordinates when `None`).
    fn probe(
        &mut self,
        name: &str,
        tol: f64,
        x0: &[f64],
        analytic: &[f64],
        indices: Option<&[usize]>,
        mut f: impl FnMut(&[f64]) -> Result<f64>,
    ) -> Result<()> {
        let scale = match &self.opts.fault {
            Some(prefix) if name.starts_with(prefix.as_str()) => FAULT_SCALE,
            _ => 1.0,
        };
        let all: Vec<usize> = (0..x0.len()).collect();
        let indices = indices.unwrap_or(&all);
        let mut x = x0.to_vec();
        let f0 = f(&x)?;
        let slot = self.slot(name, tol);
        slot.instances += 1;
        for &i in indices {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let fp = f(&x)?;
            x[i] = orig - FD_STEP;
            let fm = f(&x)?;
            x[i] = orig;
            let fwd = (fp - f0) / FD_STEP;
            let bwd = (f0 - fm) / FD_STEP;
            let slot = self.slot(name, tol);
            if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()) + 1e-4 {
                slot.kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            match relative_error(analytic[i] * scale, numeric) {
                Some(e) => {
                    slot.compared += 1;
                    slot.max_error = slot.max_error.max(e);
                }
                None => slot.exempt += 1,
            }
        }
        Ok(())
    }

    fn exact(&mut self, name: &str, ok: bool) {
        let slot = self.slot(name, 0.0);
        slot.instances += 1;
        slot.compared += 1;
        slot.exact_ok &= ok;
    }

    fn error(&mut self, name: &str, tol: f64, err: f64) {
        let slot = self.slot(name, tol);
        slot.instances += 1;
        slot.compared += 1;
        if err.is_nan() {
            slot.max_error = f64::INFINITY;
        } else {
            slot.max_error = slot.max_error.max(err);
        }
    }

    fn finish(self, name: &'static str) -> SuiteReport {
        SuiteReport { name, checks: self.results }
    }
}

fn gauss(shape: &[usize], std: f64, r: &mut Rng) -> Result<Tensor<f64>> {
    Tensor::random_gaussian_with(shape, 0.0, std, r)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with_data(like: &Tensor<f64>, v: &[f64]) -> Result<Tensor<f64>> {
    Tensor::from_vec(like.shape(), v.to_vec())
}

fn instance_rng(opts: &VerifyOptions, check: u64, instance: usize) -> Rng {
    rng::seeded(rng::derive_seed(&[opts.seed, check, instance as u64]))
}

fn check_conv(c: &mut Checks<'_>, r: &mut Rng) -> Result<()> {
    let (n, cin, cout, k) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=3));
    let (h, w) = (r.random_range(k..=k + 4), r.random_range(k..=k + 4));
    let x = gauss(&[n, cin, h, w], 1.0, r)?;
    let conv = Conv2d::from_parts(gauss(&[cout, cin, k, k], 1.0, r)?, gauss(&[cout], 1.0, r)?)?;
    let (y, cache) = conv.forward(&x)?;
    let ry = gauss(y.shape(), 1.0, r)?;
    let g = conv.backward(&ry, cache)?;
    let tol = LAYER_TOLERANCE;
    c.probe("conv2d.input", tol, x.data(), g.input.data(), None, |v| {
        Ok(dot(&conv.forward_eval(&with_data(&x, v)?)?, &ry))
    })?;
    c.probe("conv2d.weight", tol, conv.weight.data(), g.weight.data(), None, |v| {
        let l = Conv2d::from_parts(with_data(&conv.weight, v)?, conv.bias.clone())?;
        Ok(dot(&l.forward_eval(&x)?, &ry))
    })?;
    c.probe("conv2d.bias", tol, conv.bias.data(), g.bias.data(), None, |v| {
        let l = Conv2d::from_parts(conv.weight.clone(), with_data(&conv.bias, v)?)?;
        Ok(dot(&l.forward_eval(&x)?, &ry))
    })
}

fn check_linear(c: &mut Checks<'_>, r: &mut Rng) -> Result<()> {
    let (n, i, o) = (r.random_range(1..=4), r.random_range(1..=8), r.random_range(1..=8));
    let x = gauss(&[n, i], 1.0, r)?;
    let lin = Linear::from_parts(gauss(&[o, i], 1.0, r)?, gauss(&[o], 1.0, r)?)?;
    let (y, cache) = lin.forward(&x)?;
    let ry = gauss(y.shape(), 1.0, r)?;
    let g = lin.backward(&ry, cache)?;
    let tol = LAYER_TOLERANCE;
    c.probe("linear.input", tol, x.data(), g.input.data(), None, |v| {
        Ok(dot(&lin.forward_eval(&with_data(&x, v)?)?, &ry))
    })?;
    c.probe("linear.weight", tol, lin.weight.data(), g.weight.data(), None, |v| {
        let l = Linear::from_parts(with_data(&lin.weight, v)?, lin.bias.clone())?;
        Ok(dot(&l.forward_eval(&x)?, &ry))
    })?;
    c.probe("linear.bias", tol, lin.bias.data(), g.bias.data(), None, |v| {
        let l = Linear::from_parts(lin.weight.clone(), with_data(&lin.bias, v)?)?;
        Ok(dot(&l.forward_eval(&x)?, &ry))
    })
}

fn check_pool_relu_dropout(c: &mut Checks<'_>, r: &mut Rng) -> Result<()> {
    let shape = [r.random_range(1..=2), r.random_range(1..=3), r.random_range(2..=7), r.random_range(2..=7)];
    let x = gauss(&shape, 1.0, r)?;

    let (y, cache) = maxpool2_forward(&x)?;
    let ry = gauss(y.shape(), 1.0, r)?;
    let g = maxpool2_backward(&ry, cache)?;
    c.probe("maxpool2.input", LAYER_TOLERANCE, x.data(), g.data(), None, |v| {
        Ok(dot(&maxpool2_forward(&with_data(&x, v)?)?.0, &ry))
    })?;

    let (_, cache) = relu_forward(&x)?;
    let rx = gauss(x.shape(), 1.0, r)?;
    let g = relu_backward(&rx, cache)?;
    c.probe("relu.input", LAYER_TOLERANCE, x.data(), g.data(), None, |v| {
        Ok(dot(&relu_eval(&with_data(&x, v)?)?, &rx))
    })?;

    let drop = Dropout::new(0.5)?;
    let seed = r.random::<u64>();
    let (_, cache) = drop.forward(&x, Mode::Train, seed)?;
    let g = drop.backward(&rx, cache)?;
    c.probe("dropout.input", LAYER_TOLERANCE, x.data(), g.data(), None, |v| {
        Ok(dot(&drop.forward(&with_data(&x, v)?, Mode::Train, seed)?.0, &rx))
    })
}

fn check_softmax_ce(c: &mut Checks<'_>, r: &mut Rng) -> Result<()> {
    let (n, k) = (r.random_range(1..=5), r.random_range(2..=7));
    let logits = gauss(&[n, k], 2.0, r)?;
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let (_, g) = softmax_cross_entropy(&logits, &labels)?;
    c.probe("softmax_ce.logits", LAYER_TOLERANCE, logits.data(), g.data(), None, |v| {
        Ok(softmax_cross_entropy(&with_data(&logits, v)?, &labels)?.0)
    })
}

fn perturbed_theta(n: usize, noise: f64, r: &mut Rng) -> Result<Tensor<f64>> {
    let mut theta = Affine::IDENTITY.batch::<f64>(n)?;
    for (t, e) in theta.data_mut().iter_mut().zip(gauss(&[n * 6], noise, r)?.data()) {
        *t += e;
    }
    Ok(theta)
}

fn check_stn(c: &mut Checks<'_>, r: &mut Rng) -> Result<()> {
    let (n, ch, h, w) = (r.random_range(1..=2), r.random_range(1..=2), r.random_range(3..=8), r.random_range(3..=8));
    let tol = LAYER_TOLERANCE;

    let theta = perturbed_theta(n, 0.2, r)?;
    let grid = affine_grid(&theta, h, w)?;
    let rg = gauss(grid.shape(), 1.0, r)?;
    let g = affine_grid_backward(&rg)?;
    c.probe("affine_grid.theta", tol, theta.data(), g.data(), None, |v| {
        Ok(dot(&affine_grid(&with_data(&theta, v)?, h, w)?, &rg))
    })?;

    let x = gauss(&[n, ch, h, w], 1.0, r)?;
    let grid = Tensor::random_uniform(&[n, h, w, 2], -1.2, 1.2, r.random())?;
    let (y, cache) = bilinear_sample(&x, &grid)?;
    let ry = gauss(y.shape(), 1.0, r)?;
    let (gx, gg) = bilinear_sample_backward(&ry, cache)?;
    c.probe("bilinear.input", tol, x.data(), gx.data(), None, |v| {
        Ok(dot(&bilinear_sample_eval(&with_data(&x, v)?, &grid)?, &ry))
    })?;
    c.probe("bilinear.grid", tol, grid.data(), gg.data(), None, |v| {
        Ok(dot(&bilinear_sample_eval(&x, &with_data(&grid, v)?)?, &ry))
    })?;

    // loss = sum(sample(x, grid(theta))) differentiated wrt theta
    let theta = perturbed_theta(n, 0.1, r)?;
    let grid = affine_grid(&theta, h, w)?;
    let (y, cache) = bilinear_sample(&x, &grid)?;
    let ones = Tensor::full(y.shape(), 1.0)?;
    let (_, gg) = bilinear_sample_backward(&ones, cache)?;
    let gt = affine_grid_backward(&gg)?;
    c.probe("stn_path.theta", tol, theta.data(), gt.data(), None, |v| {
        Ok(bilinear_sample_eval(&x, &affine_grid(&with_data(&theta, v)?, h, w)?)?.sum())
    })
}

/// Weight and bias gradients of one named layer.
type NamedGrads<'a> = (&'a str, (&'a Tensor<f64>, &'a Tensor<f64>));

fn check_localization(c: &mut Checks<'_>, r: &mut Rng) -> Result<()> {
    let cfg = ModelConfig::tiny().localization;
    let (h, w) = (12, 12);
    let mut loc = Localization::<f64>::new(&cfg, h, w, 0.5, r)?;
    loc.fc2.weight = gauss(loc.fc2.weight.shape(), 0.5, r)?;
    let x = Tensor::random_uniform(&[2, 1, h, w], 0.0, 1.0, r.random())?;
    let (theta, cache) = loc.forward(&x)?;
    let rt = gauss(theta.shape(), 1.0, r)?;
    let g = loc.backward(&rt, cache)?;
    let layers: [NamedGrads<'_>; 4] = [
        ("localization.conv1", (&g.conv1.0, &g.conv1.1)),
        ("localization.conv2", (&g.conv2.0, &g.conv2.1)),
        ("localization.fc1", (&g.fc1.0, &g.fc1.1)),
        ("localization.fc2", (&g.fc2.0, &g.fc2.1)),
    ];
    for (li, (name, (gw, gb))) in layers.iter().enumerate() {
        for (pi, grad) in [*gw, *gb].into_iter().enumerate() {
            let current = param_of(&loc, li, pi).clone();
            c.probe(name, LAYER_TOLERANCE, current.data(), grad.data(), None, |v| {
                let mut l = loc.clone();
                *param_of_mut(&mut l, li, pi) = with_data(&current, v)?;
                Ok(dot(&l.forward_eval(&x)?, &rt))
            })?;
        }
    }
    Ok(())
}

fn param_of<T>(l: &Localization<T>, layer: usize, which: usize) -> &Tensor<T> {
    match (layer, which) {
        (0, 0) => &l.conv1.weight,
        (0, _) => &l.conv1.bias,
        (1, 0) => &l.conv2.weight,
        (1, _) => &l.conv2.bias,
        (2, 0) => &l.fc1.weight,
        (2, _) => &l.fc1.bias,
        (_, 0) => &l.fc2.weight,
        _ => &l.fc2.bias,
    }
}

fn param_of_mut<T>(l: &mut Localization<T>, layer: usize, which: usize) -> &mut Tensor<T> {
    match (layer, which) {
        (0, 0) => &mut l.conv1.weight,
        (0, _) => &mut l.conv1.bias,
        (1, 0) => &mut l.conv2.weight,
        (1, _) => &mut l.conv2.bias,
        (2, 0) => &mut l.fc1.weight,
        (2, _) => &mut l.fc1.bias,
        (_, 0) => &mut l.fc2.weight,
        _ => &mut l.fc2.bias,
    }
}

/// Tiny double-precision model whose transformer branch is not at its fixed
/// point, so every parameter receives gradient.
fn probe_model(r: &mut Rng) -> Result<DeepEmotionModel<f64>> {
    let cfg = ModelConfig { init_std: 0.3, ..ModelConfig::tiny() };
    let mut m = DeepEmotionModel::<f64>::build(cfg, r.random())?;
    for name in PARAM_NAMES.iter().filter(|n| n.ends_with(".bias")) {
        let t = m.param(name).cloned().unwrap_or_else(|| unreachable!());
        let mut noisy = gauss(t.shape(), 0.1, r)?;
        noisy.add_assign(&t)?;
        m.set_param(name, noisy)?;
    }
    let w = m.param("loc.fc2.weight").map(|t| t.shape().to_vec()).unwrap_or_default();
    m.set_param("loc.fc2.weight", gauss(&w, 0.05, r)?)?;
    Ok(m)
}

/// Whole-model checks on `coords` random registry coordinates. With
/// `lambda` set the loss is cross-entropy plus the L2 term.
fn check_model(c: &mut Checks<'_>, r: &mut Rng, coords: usize, lambda: Option<f64>) -> Result<()> {
    let model = probe_model(r)?;
    let cfg = *model.config();
    let x = Tensor::random_uniform(&[3, 1, cfg.input_h, cfg.input_w], 0.0, 1.0, r.random())?;
    let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..7)).collect();
    let seed = r.random::<u64>();
    let loss_of = |m: &DeepEmotionModel<f64>| -> Result<f64> {
        let (logits, _) = m.forward_train(&x, seed)?;
        let (ce, _) = softmax_cross_entropy(&logits, &labels)?;
        match lambda {
            Some(l) => overall_loss(ce, m, l),
            None => Ok(ce),
        }
    };
    let (logits, cache) = model.forward_train(&x, seed)?;
    let (_, gl) = softmax_cross_entropy(&logits, &labels)?;
    let mut grads = model.backward(&gl, cache)?;
    let prefix = match lambda {
        Some(l) => {
            add_regularization_gradient(&mut grads, &model, l)?;
            "regularized"
        }
        None => "model",
    };
    for k in 0..coords {
        // cycle through the penalized layers first so they are always covered
        let name = match PENALIZED.get(k) {
            Some(&n) if lambda.is_some() => n,
            _ => PARAM_NAMES[r.random_range(0..PARAM_NAMES.len())],
        };
        let current = model.param(name).cloned().unwrap_or_else(|| unreachable!());
        let analytic = grads.get(name).cloned().unwrap_or_else(|| unreachable!());
        let idx = [r.random_range(0..current.len())];
        let tol = MODEL_TOLERANCE;
        c.probe(&format!("{prefix}.{name}"), tol, current.data(), analytic.data(), Some(&idx), |v| {
            let mut m = model.clone();
            m.set_param(name, with_data(&current, v)?)?;
            loss_of(&m)
        })?;
    }
    Ok(())
}

fn check_penalty(c: &mut Checks<'_>, r: &mut Rng) -> Result<()> {
    let model = probe_model(r)?;
    let lambda = [1e-1, 1e-2, 1e-3, 1e-4][r.random_range(0..4)];
    let g = regularization_gradient(&model, lambda)?;
    for name in PARAM_NAMES {
        let current = model.param(name).cloned().unwrap_or_else(|| unreachable!());
        let analytic = g.get(name).cloned().unwrap_or_else(|| Tensor::zeros_like(&current));
        let idx: Vec<usize> = (0..current.len().min(8)).collect();
        c.probe("penalty", LAYER_TOLERANCE, current.data(), analytic.data(), Some(&idx), |v| {
            let mut m = model.clone();
            m.set_param(name, with_data(&current, v)?)?;
            overall_loss(0.0, &m, lambda)
        })?;
    }
    let ce = r.random::<f64>() * 3.0;
    c.exact("lambda_zero_is_ce", overall_loss(ce, &model, 0.0)?.to_bits() == ce.to_bits());
    Ok(())
}

/// Finite-difference checks for every layer, the transformer path, the
/// localization network, the whole model and the regularized loss.
pub fn gradient_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut c = Checks::new(opts);
    for i in 0..opts.instances {
        check_conv(&mut c, &mut instance_rng(opts, 1, i))?;
        check_linear(&mut c, &mut instance_rng(opts, 2, i))?;
        check_pool_relu_dropout(&mut c, &mut instance_rng(opts, 3, i))?;
        check_softmax_ce(&mut c, &mut instance_rng(opts, 4, i))?;
        check_stn(&mut c, &mut instance_rng(opts, 5, i))?;
        check_localization(&mut c, &mut instance_rng(opts, 6, i))?;
        check_model(&mut c, &mut instance_rng(opts, 7, i), 20, None)?;
        check_model(&mut c, &mut instance_rng(opts, 8, i), 6, Some(1e-2))?;
        check_penalty(&mut c, &mut instance_rng(opts, 9, i))?;
    }
    Ok(c.finish("gradients"))
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let s = x.shape();
    let ws = w.shape();
    let (n, cin, h, wd) = (s[0], s[1], s[2], s[3]);
    let (cout, k) = (ws[0], ws[2]);
    let (oh, ow) = (h - k + 1, wd - k + 1);
    let mut out = vec![0.0; n * cout * oh * ow];
    for bi in 0..n {
        for co in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for di in 0..k {
                            for dj in 0..k {
                                acc += x.data()[((bi * cin + ci) * h + i + di) * wd + j + dj]
                                    * w.data()[((co * cin + ci) * k + di) * k + dj];
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

fn naive_pool(x: &Tensor<f64>) -> Vec<f64> {
    let s = x.shape();
    let (n, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::new();
    for p in 0..n * ch {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let at = |di: usize, dj: usize| x.data()[(p * h + 2 * i + di) * w + 2 * j + dj];
                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    out
}

fn naive_ce(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate().take(n) {
        let row = &logits.data()[b * k..(b + 1) * k];
        let z: f64 = row.iter().map(|v| num_traits::Float::exp(*v)).sum();
        total += num_traits::Float::ln(z) - row[label];
    }
    total / n as f64
}


fn scaled_error<T: Scalar>(got: &[T], want: &[f64]) -> f64 {
    if got.len() != want.len() {
        return f64::INFINITY;
    }
    got.iter()
        .zip(want)
        .map(|(g, w)| (g.as_f64() - w).abs() / w.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Uniform values in `[-scale, scale]` that are exactly representable in `T`.
fn representable<T: Scalar>(shape: &[usize], scale: f64, r: &mut Rng) -> Result<Tensor<f64>> {
    Ok(Tensor::<f64>::random_uniform(shape, -scale, scale, r.random())?.cast::<T>().cast::<f64>())
}

fn oracle_shapes<T: Scalar>(c: &mut Checks<'_>, tag: &str, tol: f64, seed: u64) -> Result<()> {
    let mut r = rng::seeded(seed);
    for m in 1..=6 {
        for k in 1..=6 {
            for n in 1..=6 {
                let a = representable::<T>(&[m, k], 1.0, &mut r)?;
                let b = representable::<T>(&[k, n], 1.0, &mut r)?;
                let mut want = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        want[i * n + j] = (0..k).map(|t| a.data()[i * k + t] * b.data()[t * n + j]).sum();
                    }
                }
                let got = a.cast::<T>().matmul(&b.cast::<T>())?;
                c.error(&format!("matmul.{tag}"), tol, scaled_error(got.data(), &want));
            }
        }
    }
    for batch in 1..=2 {
        for cin in 1..=2 {
            for cout in 1..=2 {
                for h in 1..=6 {
                    for w in 1..=6 {
                        for k in 1..=h.min(w) {
                            let x = representable::<T>(&[batch, cin, h, w], 1.0, &mut r)?;
                            let wt = representable::<T>(&[cout, cin, k, k], 1.0, &mut r)?;
                            let b = representable::<T>(&[cout], 1.0, &mut r)?;
                            let want = naive_conv(&x, &wt, &b);
                            let conv = Conv2d::from_parts(wt.cast::<T>(), b.cast::<T>())?;
                            let got = conv.forward_eval(&x.cast::<T>())?;
                            c.error(&format!("conv2d.{tag}"), tol, scaled_error(got.data(), &want));
                        }
                    }
                }
            }
        }
    }
    for batch in 1..=2 {
        for ch in 1..=2 {
            for h in 2..=6 {
                for w in 2..=6 {
                    let x = representable::<T>(&[batch, ch, h, w], 1.0, &mut r)?;
                    let got = maxpool2_forward(&x.cast::<T>())?.0;
                    c.error(&format!("maxpool2.{tag}"), tol, scaled_error(got.data(), &naive_pool(&x)));
                }
            }
        }
    }
    for n in 1..=6 {
        for k in 1..=6 {
            let logits = representable::<T>(&[n, k], 4.0, &mut r)?;
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            let (got, _) = softmax_cross_entropy(&logits.cast::<T>(), &labels)?;
            c.error(&format!("softmax_ce.{tag}"), tol, scaled_error(&[got], &[naive_ce(&logits, &labels)]));
        }
    }
    Ok(())
}

/// Brute-force comparisons over every small shape (extents up to 6), in
/// single and double precision.
pub fn oracle_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut c = Checks::new(opts);
    oracle_shapes::<f32>(&mut c, "f32", 1e-5, rng::derive_seed(&[opts.seed, 32]))?;
    oracle_shapes::<f64>(&mut c, "f64", 1e-12, rng::derive_seed(&[opts.seed, 64]))?;
    Ok(c.finish("oracles"))
}

/// Identity warps, identity initialisation and whole-pixel translations.
pub fn stn_identity_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut c = Checks::new(opts);
    let mut r = rng::seeded(rng::derive_seed(&[opts.seed, 77]));
    let mut sizes: Vec<(usize, usize)> = (0..opts.instances).map(|_| (r.random_range(2..=20), r.random_range(2..=20))).collect();
    sizes.push((48, 48));
    for &(h, w) in &sizes {
        let x = Tensor::random_uniform(&[2, 1, h, w], 0.0, 1.0, r.random())?;
        let grid = affine_grid(&Affine::IDENTITY.batch::<f64>(2)?, h, w)?;
        c.error("identity_warp.f64", 1e-6, bilinear_sample_eval(&x, &grid)?.max_abs_diff(&x)?);
        let xf = x.cast::<f32>();
        let grid = affine_grid(&Affine::IDENTITY.batch::<f32>(2)?, h, w)?;
        c.error("identity_warp.f32", 1e-6, bilinear_sample_eval(&xf, &grid)?.max_abs_diff(&xf)?);

        let k = r.random_range(-3i64..=3);
        let m = r.random_range(-3i64..=3);
        let shift = Affine { tx: 2.0 * k as f64 / (w - 1) as f64, ty: 2.0 * m as f64 / (h - 1) as f64, ..Affine::IDENTITY };
        let y = bilinear_sample_eval(&xf, &affine_grid(&shift.batch::<f32>(2)?, h, w)?)?;
        let mut worst = 0.0f64;
        for b in 0..2 {
            for i in 0..h as i64 {
                for j in 0..w as i64 {
                    let (si, sj) = (i + m, j + k);
                    if (0..h as i64).contains(&si) && (0..w as i64).contains(&sj) {
                        let got = y.data()[(b * h + i as usize) * w + j as usize];
                        let want = xf.data()[(b * h + si as usize) * w + sj as usize];
                        worst = worst.max((got - want).abs() as f64);
                    }
                }
            }
        }
        c.error("integer_translation", 1e-5, worst);
    }
    let cfg = LocalizationConfig::default();
    for _ in 0..opts.instances.max(1) {
        let loc = Localization::<f32>::new(&cfg, 48, 48, 0.05, &mut r)?;
        let x = Tensor::<f32>::random_uniform(&[3, 1, 48, 48], 0.0, 1.0, r.random())?;
        let theta = loc.forward_eval(&x)?;
        let ok = theta
            .data()
            .chunks(6)
            .all(|row| row.iter().zip(IDENTITY_THETA).all(|(&a, b)| a.as_f64() == b));
        c.exact("identity_initialization", ok);
    }
    Ok(c.finish("stn_identity"))
}

/// All three suites.
pub fn run_all(opts: &VerifyOptions) -> Result<VerifyReport> {
    Ok(VerifyReport { suites: vec![gradient_suite(opts)?, oracle_suite(opts)?, stn_identity_suite(opts)?] })
}
