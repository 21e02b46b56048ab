//! CIFAR-10 binary format: records of one label byte followed by 3072 pixel
//! bytes, channel-planar R, G, B, each 32x32 row-major.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Sample, SampleInput};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;
pub const CIFAR_RECORD_LEN: usize = 1 + PIXELS;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn files(self) -> Vec<String> {
        match self {
            Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            Split::Test => vec!["test_batch.bin".to_string()],
        }
    }
}

/// Decodes raw records. `path` only labels errors.
pub fn parse_cifar_records(bytes: &[u8], path: &Path) -> Result<Vec<Sample>> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        return Err(Error::dataset(
            path,
            format!(
                "{} bytes is not a whole number of {CIFAR_RECORD_LEN}-byte records",
                bytes.len()
            ),
        ));
    }
    bytes
        .chunks_exact(CIFAR_RECORD_LEN)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(Error::dataset(
                    path,
                    format!("record {i} has label {label}, expected 0..=9"),
                ));
            }
            let pixels = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
            Ok(Sample {
                input: SampleInput::Image(Tensor::new(vec![3, SIDE, SIDE], pixels)?),
                label,
            })
        })
        .collect()
}

/// Reads one file of any whole number of records.
pub fn read_cifar_file(path: &Path) -> Result<Vec<Sample>> {
    let bytes = fs::read(path).map_err(|e| Error::dataset(path, e.to_string()))?;
    parse_cifar_records(&bytes, path)
}

fn resolve_root(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Loads a canonical split from `dir` (or its `cifar-10-batches-bin`
/// subdirectory). Every file must hold exactly 10000 records.
pub fn load_cifar10_binary(dir: &Path, split: Split) -> Result<Vec<Sample>> {
    let root = resolve_root(dir);
    let mut out = Vec::new();
    for name in split.files() {
        let path = root.join(name);
        let samples = read_cifar_file(&path)?;
        if samples.len() != CIFAR_RECORDS_PER_FILE {
            return Err(Error::dataset(
                &path,
                format!(
                    "{} records, expected {CIFAR_RECORDS_PER_FILE}",
                    samples.len()
                ),
            ));
        }
        out.extend(samples);
    }
    Ok(out)
}

/// The first `per_class` samples of each listed class, relabeled to the
/// class's position in `classes`, in original order.
pub fn class_subset(samples: &[Sample], classes: &[usize], per_class: usize) -> Vec<Sample> {
    let mut taken = vec![0usize; classes.len()];
    let mut out = Vec::new();
    for s in samples {
        if let Some(k) = classes.iter().position(|&c| c == s.label) {
            if taken[k] < per_class {
                taken[k] += 1;
                out.push(Sample {
                    input: s.input.clone(),
                    label: k,
                });
            }
        }
    }
    out
}

/// Per-channel mean and standard deviation of `[C, H, W]` images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Computed over every image sample; event samples are ignored.
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for s in samples {
            let SampleInput::Image(t) = &s.input else { continue };
            let (c, plane) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sum.len() != c {
                return Err(Error::shape("images differ in channel count"));
            }
            for ch in 0..c {
                for &v in &t.data()[ch * plane..(ch + 1) * plane] {
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            count += plane;
        }
        if count == 0 {
            return Err(Error::InvalidValue("no image samples to compute statistics".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        Ok(Self { mean, std })
    }

    /// Standardizes a `[C, H, W]` image in place.
    pub fn apply(&self, img: &mut [f64], channels: usize) {
        let plane = img.len() / channels;
        for ch in 0..channels {
            for v in &mut img[ch * plane..(ch + 1) * plane] {
                *v = (*v - self.mean[ch]) / self.std[ch];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..PIXELS).map(fill));
        r
    }

    #[test]
    fn decodes_hand_built_records() {
        let mut bytes = record(3, |i| (i % 256) as u8);
        bytes.extend(record(9, |_| 255));
        let s = parse_cifar_records(&bytes, Path::new("fixture.bin")).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].label, 3);
        let SampleInput::Image(t) = &s[0].input else { panic!() };
        assert_eq!(t.shape(), &[3, 32, 32]);
        // Green plane, row 1, column 2 sits at byte offset 1024 + 32 + 2.
        assert_eq!(t.data()[1024 + 32 + 2], ((1024 + 32 + 2) % 256) as f64 / 255.0);
        let SampleInput::Image(t) = &s[1].input else { panic!() };
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bad_label_and_truncation_name_the_file() {
        let bytes = record(255, |_| 0);
        let err = parse_cifar_records(&bytes, Path::new("x/data_batch_1.bin")).unwrap_err();
        assert!(err.to_string().contains("data_batch_1.bin"));
        assert!(err.to_string().contains("255"));
        let err = parse_cifar_records(&bytes[..100], Path::new("short.bin")).unwrap_err();
        assert!(err.to_string().contains("short.bin"));
    }

    #[test]
    fn subset_relabels_and_caps() {
        let bytes: Vec<u8> = [1u8, 5, 1, 7, 5, 1]
            .iter()
            .flat_map(|&l| record(l, |_| 0))
            .collect();
        let s = parse_cifar_records(&bytes, Path::new("f")).unwrap();
        let sub = class_subset(&s, &[5, 1], 2);
        assert_eq!(sub.iter().map(|s| s.label).collect::<Vec<_>>(), vec![1, 0, 1, 0]);
    }

    #[test]
    fn channel_stats_standardize() {
        let bytes: Vec<u8> = (0..4u8)
            .flat_map(|k| record(0, move |i| if i < 1024 { 64 * k } else { 10 }))
            .collect();
        let s = parse_cifar_records(&bytes, Path::new("f")).unwrap();
        let st = ChannelStats::from_samples(&s).unwrap();
        assert!((st.mean[0] - 96.0 / 255.0).abs() < 1e-12);
        assert!((st.mean[1] - 10.0 / 255.0).abs() < 1e-12);
        assert!(st.std[1] <= 1e-6);
    }
}
