//! 4-level encoder/decoder U-Net.
//!
//! Topology for `depth = D` and `base_filters = F` (level `L` has
//! `F * 2^L` filters):
//!
//! * encoder level `L`: two 3x3 same-padded conv + ReLU, then 2x2 max pool
//! * bottleneck: two 3x3 conv + ReLU at `F * 2^D` filters
//! * decoder level `L` (from `D - 1` down to 0): 2x nearest upsample,
//!   3x3 conv + ReLU to `F * 2^L`, concatenate `[skip_L, up]`, two 3x3
//!   conv + ReLU
//! * head: 1x1 conv to one channel + sigmoid
//!
//! Parameters are stored as named `f32` tensors; conv weights have shape
//! `[3, 3, in, out]`.

mod engine;
pub(crate) mod network;
pub mod weights;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::preprocess::{SlideSample, SAMPLE_SIZE};

pub use weights::{load_weights, save_weights, WEIGHTS_FORMAT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_filters: usize,
    pub kernel_size: usize,
    pub inner_activation: Activation,
    pub head_activation: Activation,
    pub input_channels: usize,
    pub output_channels: usize,
    /// Square input edge; must be divisible by `2^depth`.
    pub input_size: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_filters: 32,
            kernel_size: 3,
            inner_activation: Activation::Relu,
            head_activation: Activation::Sigmoid,
            input_channels: 2,
            output_channels: 1,
            input_size: SAMPLE_SIZE,
        }
    }
}

impl UNetConfig {
    pub fn new(depth: usize, base_filters: usize, input_size: usize) -> Self {
        Self { depth, base_filters, input_size, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.depth < 1 || self.base_filters < 1 {
            return bad(format!("depth {} and base_filters {} must be >= 1", self.depth, self.base_filters));
        }
        if self.depth > 16 {
            return bad(format!("depth {} is unreasonably deep", self.depth));
        }
        let stride = 1usize << self.depth;
        if self.input_size == 0 || self.input_size % stride != 0 {
            return bad(format!("input size {} is not divisible by 2^{} = {stride}", self.input_size, self.depth));
        }
        if self.kernel_size != 3
            || self.inner_activation != Activation::Relu
            || self.head_activation != Activation::Sigmoid
            || self.output_channels != 1
            || self.input_channels == 0
        {
            return bad("only 3x3 kernels, ReLU body, sigmoid head and one output channel are supported".into());
        }
        Ok(())
    }

    /// Filters at encoder level `level` (the bottleneck is level `depth`).
    pub fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Pixels per output map.
    pub fn pixels(&self) -> usize {
        self.input_size * self.input_size
    }

    /// Trainable parameter count in closed form.
    pub fn parameter_count(&self) -> usize {
        let conv = |cin: usize, cout: usize| 9 * cin * cout + cout;
        let mut total = 0;
        for l in 0..self.depth {
            let cin = if l == 0 { self.input_channels } else { self.filters(l - 1) };
            let f = self.filters(l);
            total += conv(cin, f) + conv(f, f);
            total += conv(self.filters(l + 1), f) + conv(2 * f, f) + conv(f, f);
        }
        let (fb, fp) = (self.filters(self.depth), self.filters(self.depth - 1));
        total += conv(fp, fb) + conv(fb, fb);
        total + self.filters(0) + 1
    }

    /// Names and shapes of every parameter tensor in storage order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize| {
            out.push((format!("{name}.weight"), vec![3, 3, cin, cout]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        for l in 0..self.depth {
            let cin = if l == 0 { self.input_channels } else { self.filters(l - 1) };
            conv(format!("enc{l}.conv1"), cin, self.filters(l));
            conv(format!("enc{l}.conv2"), self.filters(l), self.filters(l));
        }
        let (fb, fp) = (self.filters(self.depth), self.filters(self.depth - 1));
        conv("bottleneck.conv1".into(), fp, fb);
        conv("bottleneck.conv2".into(), fb, fb);
        for l in (0..self.depth).rev() {
            let f = self.filters(l);
            conv(format!("dec{l}.up"), self.filters(l + 1), f);
            conv(format!("dec{l}.conv1"), 2 * f, f);
            conv(format!("dec{l}.conv2"), f, f);
        }
        out.push(("head.weight".into(), vec![1, 1, self.filters(0), 1]));
        out.push(("head.bias".into(), vec![1]));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Network configuration with its ordered weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: UNetConfig,
    pub tensors: Vec<NamedTensor>,
    pub training_epochs_consumed: usize,
}

impl ModelState {
    /// Checks that tensor names and shapes are exactly those of `config`.
    pub fn check_shapes(&self) -> Result<()> {
        self.config.validate().map_err(|e| Error::IncompatibleWeights(e.to_string()))?;
        let layout = self.config.parameter_layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::IncompatibleWeights(format!(
                "config implies {} tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&self.tensors) {
            let len: usize = shape.iter().product();
            if *name != t.name || *shape != t.shape || t.data.len() != len {
                return Err(Error::IncompatibleWeights(format!(
                    "expected {name} {shape:?}, found {} {:?} with {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub(crate) fn params(&self) -> Vec<&[f32]> {
        self.tensors.iter().map(|t| t.data.as_slice()).collect()
    }
}

/// Foreground probability the head bias encodes at initialization.
///
/// Lesion pixels are around 1% of a slide. With a zero head bias, any pixel
/// whose last-layer features are all dead ReLUs (typically an image corner
/// surrounded by padding and air) predicts exactly the bias, hovers at 0.5 and
/// becomes a false positive on every slide. Starting the bias at the prior
/// log-odds makes such pixels background from the first step.
pub const HEAD_PRIOR: f64 = 0.01;

/// Builds a freshly initialized network.
///
/// Conv weights are drawn from `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, the
/// head from `U(-sqrt(3 / fan_in), sqrt(3 / fan_in))`. Conv biases start at
/// zero and the head bias at `logit(HEAD_PRIOR)`.
pub fn build_unet(config: &UNetConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = config
        .parameter_layout()
        .into_iter()
        .map(|(name, shape)| {
            let len: usize = shape.iter().product();
            let data = if name == "head.bias" {
                vec![(HEAD_PRIOR / (1.0 - HEAD_PRIOR)).ln() as f32; len]
            } else if name.ends_with(".bias") {
                vec![0.0; len]
            } else {
                let fan_in = (shape[0] * shape[1] * shape[2]) as f64;
                let gain = if name.starts_with("head") { 3.0 } else { 6.0 };
                let limit = (gain / fan_in).sqrt();
                (0..len).map(|_| rng.random_range(-limit..limit) as f32).collect()
            };
            NamedTensor { name, shape, data }
        })
        .collect();
    Ok(ModelState { config: config.clone(), tensors, training_epochs_consumed: 0 })
}

/// Evaluates a batch laid out `N x H x W x C` (channels last).
/// Returns `N x H x W` probabilities, each strictly inside (0, 1) for
/// finite inputs.
pub fn forward(model: &ModelState, batch: &[f32]) -> Result<Vec<f32>> {
    let cfg = &model.config;
    let per = cfg.pixels() * cfg.input_channels;
    if batch.is_empty() || batch.len() % per != 0 {
        return Err(Error::Shape(format!(
            "batch of {} values is not N x {s} x {s} x {}",
            batch.len(),
            cfg.input_channels,
            s = cfg.input_size
        )));
    }
    let samples: Vec<&[f32]> = batch.chunks_exact(per).collect();
    let params = model.params();
    let maps = crate::par::map(&samples, |x| network::predict(cfg, &params, x));
    Ok(maps.concat())
}

/// Probability map for each sample, in order.
pub fn predict_samples(model: &ModelState, samples: &[SlideSample]) -> Result<Vec<Vec<f32>>> {
    let cfg = &model.config;
    for s in samples {
        if s.size != cfg.input_size || s.input.len() != cfg.pixels() * cfg.input_channels {
            return Err(Error::Shape(format!(
                "sample {}:{} is {}x{}, network expects {}x{}",
                s.volume_id, s.slide_index, s.size, s.size, cfg.input_size, cfg.input_size
            )));
        }
    }
    let params = model.params();
    Ok(crate::par::map(samples, |s| network::predict(cfg, &params, &s.input)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_four_base_sixteen_parameter_count() {
        let cfg = UNetConfig::new(4, 16, 320);
        let m = build_unet(&cfg, 0).unwrap();
        // Independently enumerated layer by layer (see integration tests).
        assert_eq!(cfg.parameter_count(), 2_158_561);
        assert_eq!(m.parameter_count(), 2_158_561);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let cfg = UNetConfig::new(4, 8, 100);
        assert!(matches!(build_unet(&cfg, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn smallest_network_runs() {
        let cfg = UNetConfig::new(1, 1, 8);
        let m = build_unet(&cfg, 3).unwrap();
        let out = forward(&m, &vec![0.25; 8 * 8 * 2]).unwrap();
        assert_eq!(out.len(), 64);
        assert!(out.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn saturated_logits_stay_inside_the_open_interval() {
        let mut m = build_unet(&UNetConfig::new(1, 1, 8), 3).unwrap();
        for bias in [500.0, -500.0] {
            *m.tensors.last_mut().unwrap().data.first_mut().unwrap() = bias;
            let out = forward(&m, &vec![0.5; 8 * 8 * 2]).unwrap();
            assert!(out.iter().all(|&p| p > 0.0 && p < 1.0), "bias {bias}: {:?}", &out[..4]);
        }
    }

    #[test]
    fn wrong_batch_length_is_shape_error() {
        let m = build_unet(&UNetConfig::new(1, 1, 8), 3).unwrap();
        assert!(matches!(forward(&m, &[0.0; 100]), Err(Error::Shape(_))));
        assert!(matches!(forward(&m, &[]), Err(Error::Shape(_))));
    }

    #[test]
    fn initialization_is_seeded() {
        let cfg = UNetConfig::new(2, 2, 16);
        assert_eq!(build_unet(&cfg, 5).unwrap(), build_unet(&cfg, 5).unwrap());
        assert_ne!(build_unet(&cfg, 5).unwrap(), build_unet(&cfg, 6).unwrap());
    }

    #[test]
    fn dead_features_predict_the_prior() {
        let mut m = build_unet(&UNetConfig::new(2, 2, 16), 1).unwrap();
        for t in m.tensors.iter_mut().filter(|t| t.name != "head.bias") {
            t.data.fill(0.0);
        }
        let out = forward(&m, &[0.7; 16 * 16 * 2]).unwrap();
        assert!(out.iter().all(|&p| (p as f64 - HEAD_PRIOR).abs() < 1e-7), "{:?}", &out[..4]);
    }

    #[test]
    fn shape_check_catches_tampering() {
        let mut m = build_unet(&UNetConfig::new(1, 2, 8), 0).unwrap();
        m.check_shapes().unwrap();
        m.tensors[0].data.pop();
        assert!(matches!(m.check_shapes(), Err(Error::IncompatibleWeights(_))));
    }
}
