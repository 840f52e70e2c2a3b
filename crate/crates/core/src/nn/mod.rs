//! Miniature CNN-LSTM location classifier.
//!
//! Each timestep's proposal tensor goes through a small convolution stack,
//! is flattened, and feeds a stack of LSTM layers whose hidden state threads
//! across the sequence. An affine read-out and softmax give one belief
//! vector per timestep over `L` locations plus the null class.
//!
//! With no convolution layers and a `1 x 1 x C` input the same machinery is
//! the LSTM-only baseline over raw fingerprints.
//!
//! Parameters are stored as named, shaped `f64` tensors so that models
//! serialize losslessly and gradients can be checked entry by entry.

mod backprop;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backprop::{loss_and_gradients, Gradients, LossBreakdown};
pub use train::{accuracy, train, TrainParams, TrainReport};

use crate::error::{Error, Result};
use crate::fingerprint::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub out_channels: usize,
    pub activation: Activation,
    pub padding: Padding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `(U, V, C)`.
    pub input_shape: (usize, usize, usize),
    pub conv_layers: Vec<ConvSpec>,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    /// `L + 1`, the last class being "no location".
    pub n_classes: usize,
    pub l2_base: f64,
    /// Penalty on the forget-gate recurrent weights, replacing `l2_base` there.
    pub l2_forget_factor: f64,
    pub sequence_length: usize,
}

impl ModelConfig {
    /// Two same-padded 3x3 convolutions (16 then 8 channels, ReLU), one
    /// 32-unit LSTM layer, sequences of 4.
    pub fn cnn_lstm(input_shape: (usize, usize, usize), n_classes: usize) -> Self {
        let conv = |out_channels| ConvSpec { kernel: (3, 3), out_channels, activation: Activation::Relu, padding: Padding::Same };
        Self {
            input_shape,
            conv_layers: vec![conv(16), conv(8)],
            lstm_hidden: 32,
            lstm_layers: 1,
            n_classes,
            l2_base: 0.001,
            l2_forget_factor: 0.002,
            sequence_length: 4,
        }
    }

    /// Temporal-only baseline over raw `C`-vectors.
    pub fn lstm_only(channels: usize, n_classes: usize) -> Self {
        Self { input_shape: (1, 1, channels), conv_layers: Vec::new(), ..Self::cnn_lstm((1, 1, channels), n_classes) }
    }

    pub fn validate(&self) -> Result<()> {
        let (u, v, c) = self.input_shape;
        if u == 0 || v == 0 || c == 0 {
            return Err(Error::config("model.input_shape", "dimensions must be positive"));
        }
        if self.lstm_hidden == 0 || self.lstm_layers == 0 {
            return Err(Error::config("model.lstm", "need at least one layer with at least one unit"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("model.n_classes", "need at least 2 classes"));
        }
        if self.sequence_length == 0 {
            return Err(Error::config("model.sequence_length", "must be positive"));
        }
        if !(self.l2_base >= 0.0 && self.l2_forget_factor >= 0.0) {
            return Err(Error::config("model.l2", "regularization factors must be >= 0"));
        }
        let mut shape = self.input_shape;
        for (l, spec) in self.conv_layers.iter().enumerate() {
            if spec.out_channels == 0 || spec.kernel.0 == 0 || spec.kernel.1 == 0 {
                return Err(Error::config(format!("model.conv_layers[{l}]"), "kernel and channels must be positive"));
            }
            shape = conv_output_shape(shape, spec)
                .ok_or_else(|| Error::config(format!("model.conv_layers[{l}]"), "kernel larger than its input"))?;
        }
        Ok(())
    }

    /// Length of the flattened feature vector entering the first LSTM layer.
    pub fn feature_len(&self) -> usize {
        let (r, c, ch) = self
            .conv_layers
            .iter()
            .try_fold(self.input_shape, conv_output_shape)
            .expect("validated config");
        r * c * ch
    }
}

fn conv_output_shape((rows, cols, _): (usize, usize, usize), spec: &ConvSpec) -> Option<(usize, usize, usize)> {
    match spec.padding {
        Padding::Same => Some((rows, cols, spec.out_channels)),
        Padding::Valid => {
            let r = rows.checked_sub(spec.kernel.0 - 1).filter(|&r| r > 0)?;
            let c = cols.checked_sub(spec.kernel.1 - 1).filter(|&c| c > 0)?;
            Some((r, c, spec.out_channels))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Whether the uniform L2 penalty applies (weights yes, biases no).
    #[serde(skip)]
    pub regularized: bool,
}

impl Param {
    fn zeros(name: String, shape: Vec<usize>, regularized: bool) -> Self {
        let n = shape.iter().product();
        Self { name, shape, data: vec![0.0; n], regularized }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeliefVector {
    pub t: usize,
    pub probs: Vec<f64>,
}

impl BeliefVector {
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in v.iter().enumerate() {
        if p > v[best] {
            best = i;
        }
    }
    best
}

/// One labelled training sequence of `T` proposal tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub inputs: Vec<Tensor3>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
}

/// Parameter tensor positions for each layer.
pub(crate) struct ParamIndex;

impl ParamIndex {
    pub(crate) fn conv_w(l: usize) -> usize {
        2 * l
    }
    pub(crate) fn conv_b(l: usize) -> usize {
        2 * l + 1
    }
    pub(crate) fn lstm_ih(cfg: &ModelConfig, k: usize) -> usize {
        2 * cfg.conv_layers.len() + 3 * k
    }
    pub(crate) fn lstm_hh(cfg: &ModelConfig, k: usize) -> usize {
        Self::lstm_ih(cfg, k) + 1
    }
    pub(crate) fn lstm_b(cfg: &ModelConfig, k: usize) -> usize {
        Self::lstm_ih(cfg, k) + 2
    }
    pub(crate) fn fc_w(cfg: &ModelConfig) -> usize {
        2 * cfg.conv_layers.len() + 3 * cfg.lstm_layers
    }
    pub(crate) fn fc_b(cfg: &ModelConfig) -> usize {
        Self::fc_w(cfg) + 1
    }
}

fn param_layout(cfg: &ModelConfig) -> Vec<Param> {
    let mut params = Vec::new();
    let mut in_ch = cfg.input_shape.2;
    for (l, spec) in cfg.conv_layers.iter().enumerate() {
        let (kh, kw) = spec.kernel;
        params.push(Param::zeros(format!("conv{l}.weight"), vec![spec.out_channels, kh, kw, in_ch], true));
        params.push(Param::zeros(format!("conv{l}.bias"), vec![spec.out_channels], false));
        in_ch = spec.out_channels;
    }
    let h = cfg.lstm_hidden;
    let mut d = cfg.feature_len();
    for k in 0..cfg.lstm_layers {
        params.push(Param::zeros(format!("lstm{k}.w_ih"), vec![4 * h, d], true));
        params.push(Param::zeros(format!("lstm{k}.w_hh"), vec![4 * h, h], true));
        params.push(Param::zeros(format!("lstm{k}.bias"), vec![4 * h], false));
        d = h;
    }
    params.push(Param::zeros("fc.weight".into(), vec![cfg.n_classes, h], true));
    params.push(Param::zeros("fc.bias".into(), vec![cfg.n_classes], false));
    params
}

/// Fan-in of each parameter tensor, for initialisation.
fn fan_in(cfg: &ModelConfig, index: usize) -> usize {
    let conv = cfg.conv_layers.len();
    if index < 2 * conv {
        let l = index / 2;
        let (kh, kw) = cfg.conv_layers[l].kernel;
        let in_ch = if l == 0 { cfg.input_shape.2 } else { cfg.conv_layers[l - 1].out_channels };
        kh * kw * in_ch
    } else if index < 2 * conv + 3 * cfg.lstm_layers {
        // w_ih rows see the layer input plus the recurrent state
        let k = (index - 2 * conv) / 3;
        let d = if k == 0 { cfg.feature_len() } else { cfg.lstm_hidden };
        d + cfg.lstm_hidden
    } else {
        cfg.lstm_hidden
    }
}

impl Model {
    /// All parameters zero: every belief is uniform.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = param_layout(&config);
        Ok(Self { config, params })
    }

    /// Uniform `[-r, r]` initialisation with `r = 1 / sqrt(fan_in)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..model.params.len() {
            let r = 1.0 / (fan_in(&model.config, i) as f64).sqrt();
            for w in &mut model.params[i].data {
                *w = rng.random_range(-r..=r);
            }
        }
        Ok(model)
    }

    /// Rebuilds a model from serialized tensors, validating every shape.
    pub fn from_params(config: ModelConfig, params: Vec<Param>) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        if params.len() != model.params.len() {
            return Err(Error::ShapeMismatch(format!("expected {} tensors, got {}", model.params.len(), params.len())));
        }
        for (slot, p) in model.params.iter_mut().zip(params) {
            if p.name != slot.name || p.shape != slot.shape || p.data.len() != slot.data.len() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    p.name, p.shape, slot.name, slot.shape
                )));
            }
            slot.data = p.data;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub(crate) fn check_input(&self, x: &Tensor3) -> Result<()> {
        if x.shape() != self.config.input_shape {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} does not match model input {:?}",
                x.shape(),
                self.config.input_shape
            )));
        }
        Ok(())
    }

    /// Beliefs for every timestep of one sequence.
    pub fn forward(&self, sequence: &[Tensor3]) -> Result<Vec<BeliefVector>> {
        let trace = backprop::Trace::run(self, sequence)?;
        Ok(trace
            .probs
            .into_iter()
            .enumerate()
            .map(|(t, probs)| BeliefVector { t, probs })
            .collect())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Versioned on-disk representation.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<Param>,
}

pub const MODEL_FORMAT: &str = "csiloc-model";
pub const MODEL_VERSION: u32 = 1;

impl Model {
    pub fn to_file(&self) -> ModelFile {
        ModelFile { format: MODEL_FORMAT.into(), version: MODEL_VERSION, config: self.config.clone(), params: self.params.clone() }
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::InvalidInput(format!("unsupported model file {} v{}", file.format, file.version)));
        }
        Self::from_params(file.config, file.params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }
}
