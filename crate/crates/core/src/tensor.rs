//! Dense analog tensors and byte-per-element spike tensors.
//!
//! Spiking layers exchange [`SpikeTensor`]s. Internally every activation is
//! kept image-form `(T, B, C, H, W)`; token-form `(T, B, N, D)` is a view
//! change with `N = H * W` and `D = C`.

use crate::error::{Error, Result};

/// Real-valued tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// True when every element is a non-negative integer.
    pub fn is_integer_valued(&self) -> bool {
        self.data.iter().all(|&v| v >= 0.0 && v.fract() == 0.0)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Memory layout of a [`SpikeTensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout {
    /// `(T, B, N, D)`
    Token,
    /// `(T, B, C, H, W)`
    Image,
}

impl Layout {
    fn rank(self) -> usize {
        match self {
            Layout::Token => 4,
            Layout::Image => 5,
        }
    }
}

/// Spike activations stored one byte per element.
///
/// Values are `{0, 1}` when emitted by a neuron layer and small integers on
/// residual edges, where `k` summed branches allow values up to `k`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SpikeTensor {
    shape: Vec<usize>,
    data: Vec<u8>,
    layout: Layout,
}

impl SpikeTensor {
    pub fn new(shape: Vec<usize>, data: Vec<u8>, layout: Layout) -> Result<Self> {
        if shape.len() != layout.rank() {
            return Err(Error::shape(format!(
                "{layout:?} layout needs rank {}, got shape {shape:?}",
                layout.rank()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::shape(format!(
                "degenerate spike tensor shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            layout,
        })
    }

    pub fn zeros(shape: Vec<usize>, layout: Layout) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0; n], layout)
    }

    /// Converts an integer-valued analog tensor. Fails on negative,
    /// fractional, or out-of-range entries.
    pub fn from_analog(t: &Tensor, layout: Layout) -> Result<Self> {
        let mut data = Vec::with_capacity(t.numel());
        for &v in t.data() {
            if !(v >= 0.0 && v.fract() == 0.0 && v <= u8::MAX as f64) {
                return Err(Error::InvalidValue(format!(
                    "{v} is not a valid spike count"
                )));
            }
            data.push(v as u8);
        }
        Self::new(t.shape().to_vec(), data, layout)
    }

    pub fn to_analog(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn timesteps(&self) -> usize {
        self.shape[0]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn max_value(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Total spike count; a value of `k` counts as `k` spikes.
    pub fn spike_count(&self) -> u64 {
        self.data.iter().map(|&v| v as u64).sum()
    }

    /// `(T, B, C, H, W)` to `(T, B, H*W, C)`.
    pub fn to_token_form(&self) -> Result<Self> {
        if self.layout != Layout::Image {
            return Err(Error::shape("to_token_form needs an image-form tensor"));
        }
        let [t, b, c, h, w] = [
            self.shape[0],
            self.shape[1],
            self.shape[2],
            self.shape[3],
            self.shape[4],
        ];
        let n = h * w;
        let mut out = vec![0u8; self.data.len()];
        for tb in 0..t * b {
            let src = &self.data[tb * c * n..(tb + 1) * c * n];
            let dst = &mut out[tb * c * n..(tb + 1) * c * n];
            for ch in 0..c {
                for tok in 0..n {
                    dst[tok * c + ch] = src[ch * n + tok];
                }
            }
        }
        Self::new(vec![t, b, n, c], out, Layout::Token)
    }

    /// `(T, B, N, D)` to `(T, B, D, H, W)` for an `H x W` token grid.
    pub fn to_image_form(&self, h: usize, w: usize) -> Result<Self> {
        if self.layout != Layout::Token {
            return Err(Error::shape("to_image_form needs a token-form tensor"));
        }
        let [t, b, n, d] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        if h * w != n {
            return Err(Error::shape(format!(
                "{n} tokens do not form a {h}x{w} grid"
            )));
        }
        let mut out = vec![0u8; self.data.len()];
        for tb in 0..t * b {
            let src = &self.data[tb * d * n..(tb + 1) * d * n];
            let dst = &mut out[tb * d * n..(tb + 1) * d * n];
            for tok in 0..n {
                for ch in 0..d {
                    dst[ch * n + tok] = src[tok * d + ch];
                }
            }
        }
        Self::new(vec![t, b, d, h, w], out, Layout::Image)
    }

    /// Elementwise integer sum (residual addition).
    pub fn residual_add(&self, other: &SpikeTensor) -> Result<Self> {
        if self.shape != other.shape || self.layout != other.layout {
            return Err(Error::shape(format!(
                "residual add of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                a.checked_add(b)
                    .ok_or_else(|| Error::InvalidValue("spike count overflow".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.shape.clone(), data, self.layout)
    }

    /// Elementwise logical OR of two binary tensors.
    pub fn or(&self, other: &SpikeTensor) -> Result<Self> {
        if self.shape != other.shape || self.layout != other.layout {
            return Err(Error::shape(format!(
                "OR of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| ((a | b) != 0) as u8)
            .collect();
        Self::new(self.shape.clone(), data, self.layout)
    }
}
