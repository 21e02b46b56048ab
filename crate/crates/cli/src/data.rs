//! Dataset selection shared by the commands.

use std::fs::File;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use msvit_core::data::{
    class_subset, events_to_frames, load_cifar10_binary, read_events_csv, synth_dataset,
    write_events_csv, ChannelStats, Sample, Split, SynthClass, SynthSpec, DATA_DIR_ENV,
    CIFAR_CLASSES,
};
use msvit_core::model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Seed offset of generated test streams; train streams start at the base seed.
pub const TEST_SEED_OFFSET: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    /// Synthetic event streams generated in memory.
    Synth,
    /// Event-stream CSV files written by `synth-data`.
    Events,
    /// CIFAR-10 binary batches.
    Cifar10,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    /// Dataset root for `events` and `cifar10`.
    #[arg(long, env = DATA_DIR_ENV)]
    pub data_dir: Option<PathBuf>,
    /// Training samples per class (synth: streams to generate).
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Test samples per class.
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// CIFAR-10 classes to keep, relabeled in the listed order.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<usize>>,
    /// First generator seed of the synthetic training streams.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub normalize: Option<ChannelStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Need {
    Train,
    Test,
}

impl DataArgs {
    pub fn is_set(&self) -> bool {
        self.dataset.is_some()
    }

    /// Checks flags and paths against the model before any work starts.
    pub fn validate(&self, cfg: &ModelConfig, errs: &mut Vec<String>) {
        let Some(kind) = self.dataset else { return };
        match kind {
            DatasetKind::Synth | DatasetKind::Events => {
                if cfg.in_channels != 2 {
                    errs.push(format!(
                        "event data has 2 polarity channels but the model expects {}",
                        cfg.in_channels
                    ));
                }
                if cfg.num_classes < SynthClass::ALL.len() {
                    errs.push(format!(
                        "event data has {} classes but the model has {}",
                        SynthClass::ALL.len(),
                        cfg.num_classes
                    ));
                }
                if self.classes.is_some() {
                    errs.push("--classes applies to cifar10 only".into());
                }
            }
            DatasetKind::Cifar10 => {
                if cfg.in_channels != 3 {
                    errs.push(format!(
                        "CIFAR-10 images have 3 channels but the model expects {}",
                        cfg.in_channels
                    ));
                }
                if (cfg.height, cfg.width) != (32, 32) {
                    errs.push(format!(
                        "CIFAR-10 images are 32x32 but the model expects {}x{}",
                        cfg.height, cfg.width
                    ));
                }
                let classes = self.cifar_classes();
                if let Some(bad) = classes.iter().find(|&&c| c >= CIFAR_CLASSES) {
                    errs.push(format!("--classes holds {bad}, expected 0..=9"));
                }
                if cfg.num_classes < classes.len() {
                    errs.push(format!(
                        "{} classes selected but the model has {}",
                        classes.len(),
                        cfg.num_classes
                    ));
                }
            }
        }
        if matches!(kind, DatasetKind::Events | DatasetKind::Cifar10) {
            match &self.data_dir {
                None => errs.push(format!("--data-dir (or {DATA_DIR_ENV}) is required")),
                Some(d) if !d.is_dir() => {
                    errs.push(format!("data directory {} does not exist", d.display()))
                }
                Some(_) => {}
            }
        }
    }

    fn cifar_classes(&self) -> Vec<usize> {
        self.classes
            .clone()
            .unwrap_or_else(|| (0..CIFAR_CLASSES).collect())
    }

    pub fn load(&self, cfg: &ModelConfig, need: &[Need]) -> Result<Dataset, Failure> {
        let want = |n: Need| need.contains(&n);
        let (t, h, w) = (cfg.timesteps, cfg.height, cfg.width);
        let kind = self
            .dataset
            .ok_or_else(|| Failure::config("--dataset is required"))?;
        let mut ds = Dataset {
            train: Vec::new(),
            test: Vec::new(),
            normalize: None,
        };
        match kind {
            DatasetKind::Synth => {
                let spec = SynthSpec::default();
                if want(Need::Train) {
                    ds.train =
                        synth_dataset(&spec, self.per_class.unwrap_or(100), self.data_seed, t, h, w)?;
                }
                if want(Need::Test) {
                    let base = self.data_seed + TEST_SEED_OFFSET;
                    ds.test = synth_dataset(&spec, self.test_per_class.unwrap_or(30), base, t, h, w)?;
                }
            }
            DatasetKind::Events => {
                let root = self.data_dir.as_deref().expect("validated");
                if want(Need::Train) {
                    ds.train = read_event_split(&root.join("train"), self.per_class, cfg)?;
                }
                if want(Need::Test) {
                    ds.test = read_event_split(&root.join("test"), self.test_per_class, cfg)?;
                }
            }
            DatasetKind::Cifar10 => {
                let root = self.data_dir.as_deref().expect("validated");
                let classes = self.cifar_classes();
                // Normalization statistics always come from the training split.
                let train = class_subset(
                    &load_cifar10_binary(root, Split::Train)?,
                    &classes,
                    self.per_class.unwrap_or(usize::MAX),
                );
                ds.normalize = Some(ChannelStats::from_samples(&train)?);
                if want(Need::Train) {
                    ds.train = train;
                }
                if want(Need::Test) {
                    ds.test = class_subset(
                        &load_cifar10_binary(root, Split::Test)?,
                        &classes,
                        self.test_per_class.unwrap_or(usize::MAX),
                    );
                }
            }
        }
        Ok(ds)
    }
}

/// One line of a split's `labels.csv`.
#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    file: String,
    label: usize,
    width: usize,
    height: usize,
}

fn read_event_split(
    dir: &Path,
    per_class: Option<usize>,
    cfg: &ModelConfig,
) -> Result<Vec<Sample>, Failure> {
    let index = dir.join("labels.csv");
    let file = File::open(&index)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", index.display())))?;
    let mut taken = vec![0usize; cfg.num_classes];
    let mut out = Vec::new();
    for row in csv::Reader::from_reader(file).deserialize::<LabelRow>() {
        let row = row.map_err(|e| Failure::Runtime(format!("{}: {e}", index.display())))?;
        if row.label >= cfg.num_classes {
            return Err(Failure::Runtime(format!(
                "{}: label {} is out of range for {} classes",
                index.display(),
                row.label,
                cfg.num_classes
            )));
        }
        if per_class.is_some_and(|cap| taken[row.label] >= cap) {
            continue;
        }
        taken[row.label] += 1;
        let path = dir.join(&row.file);
        let f = File::open(&path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        let stream = read_events_csv(f, row.width, row.height)?;
        let frames = events_to_frames(&stream, cfg.timesteps, cfg.height, cfg.width)?;
        out.push(Sample::frames(frames, row.label)?);
    }
    Ok(out)
}

/// Writes `per_class` streams per class with seeds `seed..` as CSV files
/// plus a `labels.csv` index into `dir`. Returns the number of streams.
pub fn write_event_split(
    dir: &Path,
    per_class: usize,
    seed: u64,
    spec: &SynthSpec,
) -> Result<usize, Failure> {
    let io = |p: &Path, e: std::io::Error| Failure::Runtime(format!("{}: {e}", p.display()));
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let index = dir.join("labels.csv");
    let mut labels = csv::Writer::from_path(&index)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", index.display())))?;
    let mut n = 0;
    for i in 0..per_class as u64 {
        for class in SynthClass::ALL {
            let s = msvit_core::data::synth_events_with(spec, class, seed + i);
            let name = format!("{}-{:06}.csv", class_slug(class), seed + i);
            let path = dir.join(&name);
            let f = File::create(&path).map_err(|e| io(&path, e))?;
            write_events_csv(&s, f)?;
            labels
                .serialize(LabelRow {
                    file: name,
                    label: class.index(),
                    width: s.width,
                    height: s.height,
                })
                .map_err(|e| Failure::Runtime(format!("{}: {e}", index.display())))?;
            n += 1;
        }
    }
    labels.flush().map_err(|e| io(&index, e))?;
    Ok(n)
}

fn class_slug(c: SynthClass) -> &'static str {
    match c {
        SynthClass::BarUp => "bar-up",
        SynthClass::BarDown => "bar-down",
        SynthClass::BarLeft => "bar-left",
        SynthClass::BarRight => "bar-right",
        SynthClass::DotCw => "dot-cw",
        SynthClass::DotCcw => "dot-ccw",
    }
}
