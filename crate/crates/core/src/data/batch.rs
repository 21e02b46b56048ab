//! Shuffled mini-batches shaped `[T, B, C, H, W]`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ChannelStats, Sample, SampleInput};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub input: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub timesteps: usize,
    pub shuffle: bool,
    pub seed: u64,
    pub epoch: u64,
    /// Random horizontal flip and 4-pixel pad-crop, static images only.
    pub augment: bool,
    /// Per-channel standardization of static images.
    pub normalize: Option<ChannelStats>,
}

impl BatchSpec {
    pub fn new(batch_size: usize, timesteps: usize) -> Self {
        Self {
            batch_size,
            timesteps,
            shuffle: false,
            seed: 0,
            epoch: 0,
            augment: false,
            normalize: None,
        }
    }
}

/// Iterates over batches; the `(samples, seed, epoch)` triple fixes the
/// order and the augmentation draws. The last batch may be partial.
pub struct Batcher<'a> {
    samples: &'a [Sample],
    order: Vec<usize>,
    spec: BatchSpec,
    pos: usize,
    rng: ChaCha8Rng,
}

const PAD: usize = 4;

impl<'a> Batcher<'a> {
    pub fn new(samples: &'a [Sample], spec: BatchSpec) -> Result<Self> {
        if spec.batch_size == 0 {
            return Err(Error::InvalidValue("batch size must be at least 1".into()));
        }
        if spec.timesteps == 0 {
            return Err(Error::InvalidValue("timesteps must be at least 1".into()));
        }
        if let Some(first) = samples.first() {
            let shape = first.frame_shape();
            if samples.iter().any(|s| s.frame_shape() != shape) {
                return Err(Error::shape("samples differ in frame shape"));
            }
            for s in samples {
                if let SampleInput::Frames(f) = &s.input {
                    if f.shape()[0] != spec.timesteps {
                        return Err(Error::shape(format!(
                            "event sample has {} frames, batches need {}",
                            f.shape()[0],
                            spec.timesteps
                        )));
                    }
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(spec.epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        if spec.shuffle {
            order.shuffle(&mut rng);
        }
        Ok(Self {
            samples,
            order,
            spec,
            pos: 0,
            rng,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.samples.len().div_ceil(self.spec.batch_size)
    }

    fn frame(&mut self, s: &Sample) -> Vec<f64> {
        let SampleInput::Image(img) = &s.input else {
            unreachable!("only called for images")
        };
        let (c, h, w) = s.frame_shape();
        let mut px = img.data().to_vec();
        if self.spec.augment {
            let flip = self.rng.random::<bool>();
            let dy = self.rng.random_range(0..=2 * PAD) as isize - PAD as isize;
            let dx = self.rng.random_range(0..=2 * PAD) as isize - PAD as isize;
            let src = px.clone();
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sy = y as isize + dy;
                        let sx0 = x as isize + dx;
                        let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                        let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                        px[(ch * h + y) * w + x] = if inside {
                            src[(ch * h + sy as usize) * w + sx as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
        if let Some(stats) = &self.spec.normalize {
            stats.apply(&mut px, c);
        }
        px
    }
}

impl Iterator for Batcher<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.spec.batch_size).min(self.order.len());
        let idx: Vec<usize> = self.order[self.pos..end].to_vec();
        self.pos = end;
        let b = idx.len();
        let t = self.spec.timesteps;
        let (c, h, w) = self.samples[idx[0]].frame_shape();
        let plane = c * h * w;
        let mut data = vec![0.0; t * b * plane];
        let mut labels = Vec::with_capacity(b);
        for (bi, &i) in idx.iter().enumerate() {
            let s = &self.samples[i];
            labels.push(s.label);
            match &s.input {
                SampleInput::Image(_) => {
                    let px = self.frame(s);
                    for ti in 0..t {
                        data[(ti * b + bi) * plane..][..plane].copy_from_slice(&px);
                    }
                }
                SampleInput::Frames(f) => {
                    for ti in 0..t {
                        data[(ti * b + bi) * plane..][..plane]
                            .copy_from_slice(&f.data()[ti * plane..][..plane]);
                    }
                }
            }
        }
        let input = Tensor::new(vec![t, b, c, h, w], data).expect("sized above");
        Some(Batch { input, labels })
    }
}
