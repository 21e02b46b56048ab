//! Datasets: CIFAR-10 binary files, synthetic event streams, and batching.

mod batch;
mod cifar;
mod events;

pub use batch::{Batch, BatchSpec, Batcher};
pub use cifar::{
    class_subset, load_cifar10_binary, parse_cifar_records, read_cifar_file, ChannelStats, Split,
    CIFAR_CLASSES, CIFAR_RECORDS_PER_FILE, CIFAR_RECORD_LEN,
};
pub use events::{
    events_to_frames, read_events_csv, synth_dataset, synth_events, synth_events_with,
    write_events_csv, Event, EventStream, SynthClass, SynthSpec,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Environment variable naming the dataset root.
pub const DATA_DIR_ENV: &str = "MSVIT_DATA_DIR";

#[derive(Debug, Clone, PartialEq)]
pub enum SampleInput {
    /// `[C, H, W]` with values in `[0, 1]`.
    Image(Tensor),
    /// `[T, 2, H, W]` binary event frames.
    Frames(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: SampleInput,
    pub label: usize,
}

impl Sample {
    pub fn image(pixels: Tensor, label: usize) -> Result<Self> {
        if pixels.shape().len() != 3 {
            return Err(Error::shape(format!(
                "image sample must be [C, H, W], got {:?}",
                pixels.shape()
            )));
        }
        if pixels.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidValue("image pixels must lie in [0, 1]".into()));
        }
        Ok(Self {
            input: SampleInput::Image(pixels),
            label,
        })
    }

    pub fn frames(frames: Tensor, label: usize) -> Result<Self> {
        if frames.shape().len() != 4 || frames.shape()[1] != 2 {
            return Err(Error::shape(format!(
                "event sample must be [T, 2, H, W], got {:?}",
                frames.shape()
            )));
        }
        if frames.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidValue("event frames must be binary".into()));
        }
        Ok(Self {
            input: SampleInput::Frames(frames),
            label,
        })
    }

    /// `(C, H, W)` of one frame.
    pub fn frame_shape(&self) -> (usize, usize, usize) {
        match &self.input {
            SampleInput::Image(t) => (t.shape()[0], t.shape()[1], t.shape()[2]),
            SampleInput::Frames(t) => (t.shape()[1], t.shape()[2], t.shape()[3]),
        }
    }
}
