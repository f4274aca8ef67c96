//! End-to-end attentional network: spatial transformer followed by the
//! four-convolution classifier.
//!
//! Forward pipeline (train and eval):
//! STN warp → conv1 → conv2 → pool → ReLU → conv3 → conv4 → pool → ReLU →
//! flatten → dropout → fc1 → ReLU → fc2 → logits.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{config_err, shape_err, state_err, Error, Result};
use crate::layers::{
    maxpool2_backward, maxpool2_forward, maxpool2_output, relu_backward, relu_eval, relu_forward,
    Conv2d, ConvCache, Dropout, DropoutCache, Linear, LinearCache, MaxPoolCache, Mode, ReluCache,
};
use crate::rng;
use crate::stn::{
    affine_grid, affine_grid_backward, bilinear_sample, bilinear_sample_backward,
    bilinear_sample_eval, Localization, LocalizationCache, LocalizationConfig, SampleCache,
};
use crate::tensor::Tensor;
use crate::{Scalar, NUM_CLASSES};

/// Architecture and initialisation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    /// Output channels of conv1..conv4.
    pub channels: [usize; 4],
    pub kernel: usize,
    pub fc_hidden: usize,
    pub n_classes: usize,
    pub dropout_rate: f64,
    pub localization: LocalizationConfig,
    /// Standard deviation of the Gaussian weight initialisation.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_h: 48,
            input_w: 48,
            channels: [10, 10, 10, 10],
            kernel: 3,
            fc_hidden: 50,
            n_classes: NUM_CLASSES,
            dropout_rate: 0.5,
            localization: LocalizationConfig::default(),
            init_std: 0.05,
            seed: 0,
        }
    }
}

/// Spatial extents after every classifier stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Geometry {
    /// `(name, h, w)` after conv1, conv2, pool1, conv3, conv4, pool2.
    pub stages: Vec<(&'static str, usize, usize)>,
    pub flat_features: usize,
    pub loc_flat_features: usize,
}

impl ModelConfig {
    /// Small 12×12 configuration for whole-model gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            input_h: 12,
            input_w: 12,
            channels: [3, 3, 4, 4],
            kernel: 2,
            fc_hidden: 6,
            localization: LocalizationConfig {
                conv1_channels: 2,
                conv1_kernel: 3,
                conv2_channels: 2,
                conv2_kernel: 2,
                hidden: 4,
            },
            ..ModelConfig::default()
        }
    }

    /// Walks the layer chain; fails naming the first layer that cannot fit.
    pub fn geometry(&self) -> Result<Geometry> {
        if self.n_classes != NUM_CLASSES {
            return Err(config_err!("n_classes must be {NUM_CLASSES}, got {}", self.n_classes));
        }
        if self.channels.contains(&0) || self.fc_hidden == 0 || self.kernel == 0 {
            return Err(config_err!("channel counts, fc_hidden and kernel must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(config_err!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(config_err!("init_std must be finite and >= 0"));
        }
        let loc = &self.localization;
        if loc.conv1_channels == 0 || loc.conv2_channels == 0 || loc.hidden == 0 {
            return Err(config_err!("localization widths must be positive"));
        }
        let k = self.kernel;
        let (mut h, mut w) = (self.input_h, self.input_w);
        let mut stages = Vec::new();
        for name in ["conv1", "conv2", "pool1", "conv3", "conv4", "pool2"] {
            if name.starts_with("pool") {
                (h, w) = maxpool2_output(h, w)
                    .map_err(|_| config_err!("{name}: input {h}×{w} is too small to pool"))?;
            } else {
                if h < k || w < k {
                    return Err(config_err!("{name}: input {h}×{w} is smaller than the {k}×{k} kernel"));
                }
                (h, w) = (h - k + 1, w - k + 1);
            }
            stages.push((name, h, w));
        }
        let loc_flat_features = loc.flat_features(self.input_h, self.input_w).map_err(Error::Config)?;
        if self.input_h < 2 || self.input_w < 2 {
            return Err(config_err!("input must be at least 2×2 for the sampling grid"));
        }
        Ok(Geometry { stages, flat_features: self.channels[3] * h * w, loc_flat_features })
    }

    /// Trainable scalar count implied by the configuration.
    pub fn parameter_count(&self) -> Result<usize> {
        let g = self.geometry()?;
        let k2 = self.kernel * self.kernel;
        let c = self.channels;
        let conv = |cin: usize, cout: usize, kk: usize| cout * cin * kk + cout;
        let loc = &self.localization;
        Ok(conv(1, c[0], k2)
            + conv(c[0], c[1], k2)
            + conv(c[1], c[2], k2)
            + conv(c[2], c[3], k2)
            + g.flat_features * self.fc_hidden
            + self.fc_hidden
            + self.fc_hidden * self.n_classes
            + self.n_classes
            + conv(1, loc.conv1_channels, loc.conv1_kernel * loc.conv1_kernel)
            + conv(loc.conv1_channels, loc.conv2_channels, loc.conv2_kernel * loc.conv2_kernel)
            + g.loc_flat_features * loc.hidden
            + loc.hidden
            + loc.hidden * 6
            + 6)
    }

    /// `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let l = &self.localization;
        format!(
            "input_h={}\ninput_w={}\nchannels={},{},{},{}\nkernel={}\nfc_hidden={}\nn_classes={}\n\
             dropout_rate={:?}\nloc_conv1_channels={}\nloc_conv1_kernel={}\nloc_conv2_channels={}\n\
             loc_conv2_kernel={}\nloc_hidden={}\ninit_std={:?}\nseed={}\n",
            self.input_h,
            self.input_w,
            self.channels[0],
            self.channels[1],
            self.channels[2],
            self.channels[3],
            self.kernel,
            self.fc_hidden,
            self.n_classes,
            self.dropout_rate,
            l.conv1_channels,
            l.conv1_kernel,
            l.conv2_channels,
            l.conv2_kernel,
            l.hidden,
            self.init_std,
            self.seed,
        )
    }

    /// Parses the output of [`ModelConfig::to_kv`]; unknown keys are errors.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (key, value) in kv_pairs(text)? {
            let int = || value.parse::<usize>().map_err(|_| config_err!("bad integer for {key}: {value:?}"));
            let float = || value.parse::<f64>().map_err(|_| config_err!("bad number for {key}: {value:?}"));
            match key {
                "input_h" => cfg.input_h = int()?,
                "input_w" => cfg.input_w = int()?,
                "channels" => {
                    let parts: Vec<&str> = value.split(',').collect();
                    if parts.len() != 4 {
                        return Err(config_err!("channels needs four values, got {value:?}"));
                    }
                    for (slot, p) in cfg.channels.iter_mut().zip(parts) {
                        *slot = p.trim().parse().map_err(|_| config_err!("bad channel count {p:?}"))?;
                    }
                }
                "kernel" => cfg.kernel = int()?,
                "fc_hidden" => cfg.fc_hidden = int()?,
                "n_classes" => cfg.n_classes = int()?,
                "dropout_rate" => cfg.dropout_rate = float()?,
                "loc_conv1_channels" => cfg.localization.conv1_channels = int()?,
                "loc_conv1_kernel" => cfg.localization.conv1_kernel = int()?,
                "loc_conv2_channels" => cfg.localization.conv2_channels = int()?,
                "loc_conv2_kernel" => cfg.localization.conv2_kernel = int()?,
                "loc_hidden" => cfg.localization.hidden = int()?,
                "init_std" => cfg.init_std = float()?,
                "seed" => cfg.seed = value.parse().map_err(|_| config_err!("bad seed {value:?}"))?,
                _ => return Err(config_err!("unknown model config key {key:?}")),
            }
        }
        Ok(cfg)
    }
}

/// Splits `key=value` lines, skipping blanks and `#` comments.
pub(crate) fn kv_pairs(text: &str) -> Result<Vec<(&str, &str)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| config_err!("expected key=value, got {l:?}"))
        })
        .collect()
}

/// Registry names in canonical order.
pub const PARAM_NAMES: [&str; 20] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "conv4.weight",
    "conv4.bias",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
    "loc.conv1.weight",
    "loc.conv1.bias",
    "loc.conv2.weight",
    "loc.conv2.bias",
    "loc.fc1.weight",
    "loc.fc1.bias",
    "loc.fc2.weight",
    "loc.fc2.bias",
];

/// Registry entries penalised by the L2 term of the training loss.
pub const PENALIZED: [&str; 2] = ["fc1.weight", "fc2.weight"];

/// Named tensors aligned with a parameter registry.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    entries: Vec<(&'static str, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new(entries: Vec<(&'static str, Tensor<T>)>) -> Self {
        Gradients { entries }
    }

    /// Zero tensors shaped like each registry entry.
    pub fn zeros_like(params: &[(&'static str, &Tensor<T>)]) -> Self {
        Gradients { entries: params.iter().map(|(n, t)| (*n, Tensor::zeros_like(t))).collect() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (*n, t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds `other` entry-wise; names and shapes must line up.
    pub fn accumulate(&mut self, other: &Gradients<T>) -> Result<()> {
        if self.names() != other.names() {
            return Err(state_err!("gradient registries differ"));
        }
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            a.add_assign(b)?;
        }
        Ok(())
    }
}

/// The attentional classification network.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepEmotionModel<T> {
    config: ModelConfig,
    loc: Localization<T>,
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    conv3: Conv2d<T>,
    conv4: Conv2d<T>,
    fc1: Linear<T>,
    fc2: Linear<T>,
    dropout: Dropout,
    mode: Mode,
    /// Bumped on every mutable parameter access; caches remember it.
    version: u64,
}

/// Everything one train-mode forward call saved for backward.
#[derive(Debug)]
pub struct ModelCache<T> {
    version: u64,
    loc: LocalizationCache<T>,
    sample: SampleCache<T>,
    conv1: ConvCache<T>,
    conv2: ConvCache<T>,
    pool1: MaxPoolCache,
    relu1: ReluCache,
    conv3: ConvCache<T>,
    conv4: ConvCache<T>,
    pool2: MaxPoolCache,
    relu2: ReluCache,
    feature_shape: Vec<usize>,
    dropout: DropoutCache<T>,
    fc1: LinearCache<T>,
    relu3: ReluCache,
    fc2: LinearCache<T>,
}

impl<T: Scalar> DeepEmotionModel<T> {
    /// Gaussian(0, init_std) weights and zero biases from `seed`; the
    /// localization output layer starts at the identity transform.
    pub fn build(mut config: ModelConfig, seed: u64) -> Result<Self> {
        config.seed = seed;
        let geo = config.geometry()?;
        let std = config.init_std;
        let mut r = rng::stream(seed, rng::streams::INIT);
        let c = config.channels;
        let k = config.kernel;
        let conv1 = Conv2d::gaussian(1, c[0], k, std, &mut r)?;
        let conv2 = Conv2d::gaussian(c[0], c[1], k, std, &mut r)?;
        let conv3 = Conv2d::gaussian(c[1], c[2], k, std, &mut r)?;
        let conv4 = Conv2d::gaussian(c[2], c[3], k, std, &mut r)?;
        let fc1 = Linear::gaussian(geo.flat_features, config.fc_hidden, std, &mut r)?;
        let fc2 = Linear::gaussian(config.fc_hidden, config.n_classes, std, &mut r)?;
        let loc = Localization::new(&config.localization, config.input_h, config.input_w, std, &mut r)?;
        Ok(DeepEmotionModel {
            config,
            loc,
            conv1,
            conv2,
            conv3,
            conv4,
            fc1,
            fc2,
            dropout: Dropout::new(config.dropout_rate)?,
            mode: Mode::Eval,
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Parameter registry in canonical order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let l = &self.loc;
        let tensors = [
            &self.conv1.weight,
            &self.conv1.bias,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.conv3.weight,
            &self.conv3.bias,
            &self.conv4.weight,
            &self.conv4.bias,
            &self.fc1.weight,
            &self.fc1.bias,
            &self.fc2.weight,
            &self.fc2.bias,
            &l.conv1.weight,
            &l.conv1.bias,
            &l.conv2.weight,
            &l.conv2.bias,
            &l.fc1.weight,
            &l.fc1.bias,
            &l.fc2.weight,
            &l.fc2.bias,
        ];
        PARAM_NAMES.iter().copied().zip(tensors).collect()
    }

    /// Mutable registry; invalidates caches from earlier forward calls.
    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        self.version += 1;
        let l = &mut self.loc;
        let tensors = [
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.conv3.weight,
            &mut self.conv3.bias,
            &mut self.conv4.weight,
            &mut self.conv4.bias,
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
            &mut l.conv1.weight,
            &mut l.conv1.bias,
            &mut l.conv2.weight,
            &mut l.conv2.bias,
            &mut l.fc1.weight,
            &mut l.fc1.bias,
            &mut l.fc2.weight,
            &mut l.fc2.bias,
        ];
        PARAM_NAMES.iter().copied().zip(tensors).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params_mut().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    /// Replaces one registry entry, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.param_mut(name).ok_or_else(|| state_err!("no parameter named {name:?}"))?;
        if slot.shape() != value.shape() {
            return Err(shape_err!(
                "parameter {name}: expected shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Scalar>(&self) -> DeepEmotionModel<U> {
        let conv = |c: &Conv2d<T>| Conv2d { weight: c.weight.cast(), bias: c.bias.cast() };
        let lin = |l: &Linear<T>| Linear { weight: l.weight.cast(), bias: l.bias.cast() };
        DeepEmotionModel {
            config: self.config,
            loc: Localization {
                conv1: conv(&self.loc.conv1),
                conv2: conv(&self.loc.conv2),
                fc1: lin(&self.loc.fc1),
                fc2: lin(&self.loc.fc2),
            },
            conv1: conv(&self.conv1),
            conv2: conv(&self.conv2),
            conv3: conv(&self.conv3),
            conv4: conv(&self.conv4),
            fc1: lin(&self.fc1),
            fc2: lin(&self.fc2),
            dropout: self.dropout,
            mode: self.mode,
            version: 0,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let (n, c, h, w) = x.dims4()?;
        if c != 1 || h != self.config.input_h || w != self.config.input_w {
            return Err(shape_err!(
                "model expects N×1×{}×{} input, got {:?}",
                self.config.input_h,
                self.config.input_w,
                x.shape()
            ));
        }
        Ok(n)
    }

    /// Affine parameters `N×6` the localization network predicts for `x`.
    pub fn theta(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.loc.forward_eval(x)
    }

    /// Warped input the classifier sees.
    pub fn warp(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let theta = self.theta(x)?;
        let grid = affine_grid(&theta, self.config.input_h, self.config.input_w)?;
        bilinear_sample_eval(x, &grid)
    }

    /// Classification branch alone (no spatial transformer), eval semantics.
    pub fn classify_unwarped(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_input(x)?;
        let h = self.conv2.forward_eval(&self.conv1.forward_eval(x)?)?;
        let h = relu_eval(&maxpool2_forward(&h)?.0)?;
        let h = self.conv4.forward_eval(&self.conv3.forward_eval(&h)?)?;
        let h = relu_eval(&maxpool2_forward(&h)?.0)?;
        let h = h.reshape(&[n, self.fc1.inputs()])?;
        let h = relu_eval(&self.fc1.forward_eval(&h)?)?;
        self.fc2.forward_eval(&h)
    }

    /// Eval-mode logits regardless of the mode flag.
    pub fn logits_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let warped = self.warp(x)?;
        self.classify_unwarped(&warped)
    }

    /// Forward pass honouring the mode flag. Train mode needs a dropout seed
    /// and returns the cache for [`DeepEmotionModel::backward`].
    pub fn forward(&self, x: &Tensor<T>, dropout_seed: Option<u64>) -> Result<(Tensor<T>, Option<ModelCache<T>>)> {
        match self.mode {
            Mode::Eval => Ok((self.logits_eval(x)?, None)),
            Mode::Train => {
                let seed = dropout_seed.ok_or_else(|| state_err!("train-mode forward needs a dropout seed"))?;
                let (logits, cache) = self.forward_train(x, seed)?;
                Ok((logits, Some(cache)))
            }
        }
    }

    /// Train-mode forward regardless of the mode flag.
    pub fn forward_train(&self, x: &Tensor<T>, dropout_seed: u64) -> Result<(Tensor<T>, ModelCache<T>)> {
        let n = self.check_input(x)?;
        let (theta, loc) = self.loc.forward(x)?;
        let grid = affine_grid(&theta, self.config.input_h, self.config.input_w)?;
        let (h, sample) = bilinear_sample(x, &grid)?;
        let (h, conv1) = self.conv1.forward(&h)?;
        let (h, conv2) = self.conv2.forward(&h)?;
        let (h, pool1) = maxpool2_forward(&h)?;
        let (h, relu1) = relu_forward(&h)?;
        let (h, conv3) = self.conv3.forward(&h)?;
        let (h, conv4) = self.conv4.forward(&h)?;
        let (h, pool2) = maxpool2_forward(&h)?;
        let (h, relu2) = relu_forward(&h)?;
        let feature_shape = h.shape().to_vec();
        let h = h.reshape(&[n, self.fc1.inputs()])?;
        let (h, dropout) = self.dropout.forward(&h, Mode::Train, dropout_seed)?;
        let (h, fc1) = self.fc1.forward(&h)?;
        let (h, relu3) = relu_forward(&h)?;
        let (logits, fc2) = self.fc2.forward(&h)?;
        let cache = ModelCache {
            version: self.version,
            loc,
            sample,
            conv1,
            conv2,
            pool1,
            relu1,
            conv3,
            conv4,
            pool2,
            relu2,
            feature_shape,
            dropout,
            fc1,
            relu3,
            fc2,
        };
        Ok((logits, cache))
    }

    /// Gradients of every registry entry given `dLoss/dlogits`.
    pub fn backward(&self, grad_logits: &Tensor<T>, cache: ModelCache<T>) -> Result<Gradients<T>> {
        if cache.version != self.version {
            return Err(state_err!(
                "cache was produced before the parameters changed (version {} vs {})",
                cache.version,
                self.version
            ));
        }
        let fc2 = self.fc2.backward(grad_logits, cache.fc2)?;
        let g = relu_backward(&fc2.input, cache.relu3)?;
        let fc1 = self.fc1.backward(&g, cache.fc1)?;
        let g = self.dropout.backward(&fc1.input, cache.dropout)?;
        let g = g.reshape(&cache.feature_shape)?;
        let g = relu_backward(&g, cache.relu2)?;
        let g = maxpool2_backward(&g, cache.pool2)?;
        let c4 = self.conv4.backward(&g, cache.conv4)?;
        let c3 = self.conv3.backward(&c4.input, cache.conv3)?;
        let g = relu_backward(&c3.input, cache.relu1)?;
        let g = maxpool2_backward(&g, cache.pool1)?;
        let c2 = self.conv2.backward(&g, cache.conv2)?;
        let c1 = self.conv1.backward(&c2.input, cache.conv1)?;
        let (_, grad_grid) = bilinear_sample_backward(&c1.input, cache.sample)?;
        let grad_theta = affine_grid_backward(&grad_grid)?;
        let loc = self.loc.backward(&grad_theta, cache.loc)?;
        let tensors = [
            c1.weight, c1.bias, c2.weight, c2.bias, c3.weight, c3.bias, c4.weight, c4.bias,
            fc1.weight, fc1.bias, fc2.weight, fc2.bias,
            loc.conv1.0, loc.conv1.1, loc.conv2.0, loc.conv2.1, loc.fc1.0, loc.fc1.1, loc.fc2.0, loc.fc2.1,
        ];
        Ok(Gradients::new(PARAM_NAMES.iter().copied().zip(tensors).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stn::Affine;

    #[test]
    fn default_geometry_chain() {
        let g = ModelConfig::default().geometry().unwrap();
        let extents: Vec<usize> = g.stages.iter().map(|s| s.1).collect();
        assert_eq!(extents, [46, 44, 22, 20, 18, 9]);
        assert_eq!(g.flat_features, 810);
        assert_eq!(g.loc_flat_features, 640);
    }

    #[test]
    fn default_parameter_count() {
        // classifier: 100 + 3·910 + (810·50 + 50) + (50·7 + 7) = 43 737
        // localization: (8·49 + 8) + (10·8·25 + 10) + (640·32 + 32) + (32·6 + 6) = 23 120
        let cfg = ModelConfig::default();
        assert_eq!(cfg.parameter_count().unwrap(), 66_857);
        let m = DeepEmotionModel::<f32>::build(cfg, 1).unwrap();
        assert_eq!(m.parameter_count(), 66_857);
    }

    #[test]
    fn seven_by_seven_input_fails_naming_layer() {
        let cfg = ModelConfig { input_h: 7, input_w: 7, ..ModelConfig::default() };
        match DeepEmotionModel::<f32>::build(cfg, 0) {
            Err(Error::Config(msg)) => assert!(msg.contains("conv3") || msg.contains("pool"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = DeepEmotionModel::<f32>::build(ModelConfig::default(), 9).unwrap();
        let b = DeepEmotionModel::<f32>::build(ModelConfig::default(), 9).unwrap();
        let c = DeepEmotionModel::<f32>::build(ModelConfig::default(), 10).unwrap();
        for ((_, x), (_, y)) in a.params().iter().zip(b.params()) {
            assert!(x.bit_eq(y));
        }
        assert!(!a.params()[0].1.bit_eq(c.params()[0].1));
        for (name, t) in a.params() {
            if name.ends_with("bias") && name != "loc.fc2.bias" {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        assert!(a.param("loc.fc2.weight").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logits_shape_and_fresh_stn_bypass() {
        let m = DeepEmotionModel::<f32>::build(ModelConfig::default(), 2).unwrap();
        let x = Tensor::random_uniform(&[3, 1, 48, 48], 0.0, 1.0, 4).unwrap();
        let (logits, cache) = m.forward(&x, None).unwrap();
        assert!(cache.is_none());
        assert_eq!(logits.shape(), &[3, 7]);
        let raw = m.classify_unwarped(&x).unwrap();
        assert!(logits.max_abs_diff(&raw).unwrap() <= 1e-6);
        let again = m.forward(&x, None).unwrap().0;
        assert!(again.bit_eq(&logits));
    }

    #[test]
    fn wrong_geometry_and_missing_seed() {
        let mut m = DeepEmotionModel::<f32>::build(ModelConfig::default(), 2).unwrap();
        let x = Tensor::zeros(&[1, 1, 40, 48]).unwrap();
        assert!(matches!(m.forward(&x, None), Err(Error::Shape(_))));
        m.set_mode(Mode::Train);
        let x = Tensor::zeros(&[1, 1, 48, 48]).unwrap();
        assert!(matches!(m.forward(&x, None), Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients_with_matching_keys() {
        let mut m = DeepEmotionModel::<f64>::build(ModelConfig::tiny(), 2).unwrap();
        m.set_mode(Mode::Train);
        let x = Tensor::random_uniform(&[2, 1, 12, 12], 0.0, 1.0, 4).unwrap();
        let (logits, cache) = m.forward(&x, Some(5)).unwrap();
        let g = m.backward(&Tensor::zeros_like(&logits), cache.unwrap()).unwrap();
        assert_eq!(g.names(), PARAM_NAMES.to_vec());
        for ((name, t), (_, p)) in g.iter().zip(m.params()) {
            assert_eq!(t.shape(), p.shape(), "{name}");
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = DeepEmotionModel::<f64>::build(ModelConfig::tiny(), 2).unwrap();
        let x = Tensor::random_uniform(&[1, 1, 12, 12], 0.0, 1.0, 4).unwrap();
        let (logits, cache) = m.forward_train(&x, 1).unwrap();
        m.param_mut("fc2.bias").unwrap().data_mut()[0] += 1.0;
        assert!(matches!(m.backward(&logits, cache), Err(Error::State(_))));
    }

    #[test]
    fn eval_is_batch_permutation_equivariant() {
        let m = DeepEmotionModel::<f32>::build(ModelConfig::default(), 6).unwrap();
        let x = Tensor::<f32>::random_uniform(&[3, 1, 48, 48], 0.0, 1.0, 8).unwrap();
        let plane = 48 * 48;
        let perm = [2usize, 0, 1];
        let mut px = Vec::new();
        for &p in &perm {
            px.extend_from_slice(&x.data()[p * plane..(p + 1) * plane]);
        }
        let px = Tensor::from_vec(&[3, 1, 48, 48], px).unwrap();
        let a = m.logits_eval(&x).unwrap();
        let b = m.logits_eval(&px).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(&b.data()[i * 7..(i + 1) * 7], &a.data()[p * 7..(p + 1) * 7]);
        }
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = ModelConfig { seed: 77, dropout_rate: 0.25, ..ModelConfig::tiny() };
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert!(ModelConfig::from_kv("bogus=1").is_err());
    }

    #[test]
    fn theta_of_fresh_model_is_identity() {
        let m = DeepEmotionModel::<f32>::build(ModelConfig::default(), 1).unwrap();
        let x = Tensor::random_uniform(&[2, 1, 48, 48], 0.0, 1.0, 3).unwrap();
        let theta = m.theta(&x).unwrap();
        let id = Affine::IDENTITY.batch::<f32>(2).unwrap();
        assert!(theta.bit_eq(&id));
    }
}
