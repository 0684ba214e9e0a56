//! The two-branch adversarial-erasing embedding head.
//!
//! ```text
//!                       ┌─ localize ─ pool ─ mean ─ dropout ─ scores (bottom)
//! S ─ conv3x3 + ReLU ─ X┤                                                    ├─ avg
//!                       └─ C-ReLU ─ localize ─ pool ─ mean ─ dropout ─ scores (top)
//! ```
//!
//! Both branches score their embedding against the same fixed
//! [`ClassMatrix`]; the training loss is the sum of the two softmax
//! cross-entropies. Gradients are hand-written in [`backward`].

mod layers;
mod model;

pub use layers::{
    aggregate, c_relu, class_scores, conv3x3, localize, max_pool5, predict, SignMask, POOL_KERNEL,
};
pub use model::{backward, backward_from_upstream, forward, forward_eval, loss, ForwardOutput, ParamTensors};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::{AttributeError, ClassMatrix};
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    Shape { what: &'static str, expected: usize, found: usize },
    #[error("label {label} is not among the {count} candidate classes")]
    Label { label: usize, count: usize },
    #[error("class index {0} is out of range")]
    ClassOutOfRange(usize),
    #[error("candidate class set is empty")]
    EmptyCandidates,
    #[error("forward cache is missing; run forward before backward")]
    MissingCache,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    ClassMatrix(#[from] AttributeError),
}

/// `K × H × H` activations, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    size: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, size: usize, data: Vec<f64>) -> Result<Self, NetworkError> {
        if channels == 0 || size == 0 {
            return Err(NetworkError::InvalidParam("feature map needs at least one channel and H >= 1".into()));
        }
        if data.len() != channels * size * size {
            return Err(NetworkError::Shape {
                what: "feature map data",
                expected: channels * size * size,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NetworkError::NonFinite("feature map"));
        }
        Ok(Self { channels, size, data })
    }

    pub fn zeros(channels: usize, size: usize) -> Self {
        Self { channels, size, data: vec![0.0; channels * size * size] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let a = self.size * self.size;
        &self.data[k * a..(k + 1) * a]
    }

    pub fn at(&self, k: usize, row: usize, col: usize) -> f64 {
        self.data[(k * self.size + row) * self.size + col]
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { channels: self.channels, size: self.size, data: self.data.iter().map(|v| v * c).collect() }
    }
}

/// `D` spatial maps of side `size`, one per attribute dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMaps {
    count: usize,
    size: usize,
    data: Vec<f64>,
}

impl LocalizationMaps {
    pub(crate) fn from_raw(count: usize, size: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), count * size * size);
        Self { count, size, data }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn map(&self, c: usize) -> &[f64] {
        let a = self.size * self.size;
        &self.data[c * a..(c + 1) * a]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// 1×1 aggregation weights `W[k][c]`, stored `k`-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvWeights {
    in_channels: usize,
    out_channels: usize,
    data: Vec<f64>,
}

impl ConvWeights {
    pub fn new(in_channels: usize, out_channels: usize, data: Vec<f64>) -> Result<Self, NetworkError> {
        let w = Self { in_channels, out_channels, data };
        w.validate()?;
        Ok(w)
    }

    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self { in_channels, out_channels, data: vec![0.0; in_channels * out_channels] }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn get(&self, k: usize, c: usize) -> f64 {
        self.data[k * self.out_channels + c]
    }

    pub fn set(&mut self, k: usize, c: usize, v: f64) {
        self.data[k * self.out_channels + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn validate(&self) -> Result<(), NetworkError> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(NetworkError::InvalidParam("1x1 weights need non-zero dimensions".into()));
        }
        if self.data.len() != self.in_channels * self.out_channels {
            return Err(NetworkError::Shape {
                what: "1x1 weights",
                expected: self.in_channels * self.out_channels,
                found: self.data.len(),
            });
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(NetworkError::NonFinite("1x1 weights"));
        }
        Ok(())
    }
}

/// Shared `K → K` 3×3 convolution, kernel laid out `[out][in][dy][dx]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv3x3 {
    channels: usize,
    kernel: Vec<f64>,
    bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn new(channels: usize, kernel: Vec<f64>, bias: Vec<f64>) -> Result<Self, NetworkError> {
        let c = Self { channels, kernel, bias };
        c.validate()?;
        Ok(c)
    }

    /// Center tap 1 on the matching channel, everything else zero.
    pub fn identity(channels: usize) -> Self {
        let mut kernel = vec![0.0; channels * channels * 9];
        for k in 0..channels {
            kernel[(k * channels + k) * 9 + 4] = 1.0;
        }
        Self { channels, kernel, bias: vec![0.0; channels] }
    }

    pub fn zeros(channels: usize) -> Self {
        Self { channels, kernel: vec![0.0; channels * channels * 9], bias: vec![0.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn tap(&self, out: usize, inp: usize, dy: usize, dx: usize) -> f64 {
        self.kernel[((out * self.channels + inp) * 3 + dy) * 3 + dx]
    }

    pub fn tap_mut(&mut self, out: usize, inp: usize, dy: usize, dx: usize) -> &mut f64 {
        &mut self.kernel[((out * self.channels + inp) * 3 + dy) * 3 + dx]
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn validate(&self) -> Result<(), NetworkError> {
        if self.channels == 0 {
            return Err(NetworkError::InvalidParam("3x3 conv needs at least one channel".into()));
        }
        let k = self.channels * self.channels * 9;
        if self.kernel.len() != k {
            return Err(NetworkError::Shape { what: "3x3 kernel", expected: k, found: self.kernel.len() });
        }
        if self.bias.len() != self.channels {
            return Err(NetworkError::Shape { what: "3x3 bias", expected: self.channels, found: self.bias.len() });
        }
        if self.kernel.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(NetworkError::NonFinite("3x3 conv"));
        }
        Ok(())
    }
}

/// Which activations the C-ReLU mask negates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErasePolarity {
    /// `θ = 1` for `x ≥ δ`, `−1` below: sub-threshold activations flip sign.
    #[default]
    BelowThreshold,
    /// `θ = −1` for `x ≥ δ`, `1` below: the strongest activations flip sign.
    AboveThreshold,
}

/// Everything the head needs: learnable convolutions, erase ratio, and the
/// fixed class matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub shared: Conv3x3,
    pub top: ConvWeights,
    pub bottom: ConvWeights,
    /// Erase threshold as a fraction of each channel's maximum.
    pub xi: f64,
    pub class_matrix: ClassMatrix,
    pub dropout_rate: f64,
    #[serde(default)]
    pub polarity: ErasePolarity,
}

pub const DEFAULT_DROPOUT: f64 = 0.4;

impl NetworkParams {
    pub fn new(
        shared: Conv3x3,
        top: ConvWeights,
        bottom: ConvWeights,
        xi: f64,
        class_matrix: ClassMatrix,
    ) -> Result<Self, NetworkError> {
        let p = Self {
            shared,
            top,
            bottom,
            xi,
            class_matrix,
            dropout_rate: DEFAULT_DROPOUT,
            polarity: ErasePolarity::default(),
        };
        p.validate()?;
        Ok(p)
    }

    /// Seeded initialization: near-identity shared conv, small Gaussian
    /// branch weights (both branches start from the same draw).
    pub fn initialize(
        channels: usize,
        class_matrix: ClassMatrix,
        xi: f64,
        seed: u64,
    ) -> Result<Self, NetworkError> {
        let dim = class_matrix.dim();
        let mut rng = seed::rng(seed::derive(seed, seed::STREAM_INIT));
        let conv_noise = Normal::new(0.0, 0.01).expect("valid std");
        let mut shared = Conv3x3::identity(channels);
        shared.kernel.iter_mut().for_each(|v| *v += conv_noise.sample(&mut rng));
        let w_noise = Normal::new(0.0, 0.1 / (channels as f64).sqrt()).expect("valid std");
        let w: Vec<f64> = (0..channels * dim).map(|_| w_noise.sample(&mut rng)).collect();
        let top = ConvWeights::new(channels, dim, w.clone())?;
        let bottom = ConvWeights::new(channels, dim, w)?;
        Self::new(shared, top, bottom, xi, class_matrix)
    }

    pub fn channels(&self) -> usize {
        self.shared.channels
    }

    pub fn embed_dim(&self) -> usize {
        self.class_matrix.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.class_matrix.num_classes()
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        self.shared.validate()?;
        self.top.validate()?;
        self.bottom.validate()?;
        self.class_matrix.validate()?;
        let k = self.shared.channels;
        for (name, w) in [("top branch", &self.top), ("bottom branch", &self.bottom)] {
            if w.in_channels != k {
                return Err(NetworkError::Shape { what: name, expected: k, found: w.in_channels });
            }
            if w.out_channels != self.class_matrix.dim() {
                return Err(NetworkError::Shape {
                    what: name,
                    expected: self.class_matrix.dim(),
                    found: w.out_channels,
                });
            }
        }
        if !(self.xi.is_finite() && self.xi >= 0.0) {
            return Err(NetworkError::InvalidParam(format!("xi must be >= 0, got {}", self.xi)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NetworkError::InvalidParam(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Learnable buffers in a fixed order: shared kernel, shared bias, top, bottom.
    /// The class matrix is not among them.
    pub fn learnable_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.shared.kernel, &mut self.shared.bias, &mut self.top.data, &mut self.bottom.data]
    }

    pub fn learnable(&self) -> [&[f64]; 4] {
        [&self.shared.kernel, &self.shared.bias, &self.top.data, &self.bottom.data]
    }
}
