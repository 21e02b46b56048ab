//! Event streams, a deterministic synthetic event generator, and frame
//! aggregation.
//!
//! Synthetic classes differ only in the temporal order of their events:
//! opposite bar directions sweep the same region, and the arcs traced by the
//! two rotation senses share one distribution. Polarity is random, so a time-collapsed image
//! cannot tell the members of a pair apart.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    /// Microseconds.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    /// 1 for a positive (ON) event, 0 for negative.
    pub p: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EventStream {
    pub width: usize,
    pub height: usize,
    pub events: Vec<Event>,
}

impl EventStream {
    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.events.iter().enumerate() {
            if e.x as usize >= self.width || e.y as usize >= self.height {
                return Err(Error::InvalidValue(format!(
                    "event {i} at ({}, {}) outside the {}x{} sensor",
                    e.x, e.y, self.width, self.height
                )));
            }
            if e.p > 1 {
                return Err(Error::InvalidValue(format!("event {i} has polarity {}", e.p)));
            }
            if i > 0 && e.t < self.events[i - 1].t {
                return Err(Error::InvalidValue(format!(
                    "event {i} timestamp {} precedes {}",
                    e.t,
                    self.events[i - 1].t
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthClass {
    BarUp,
    BarDown,
    BarLeft,
    BarRight,
    DotCw,
    DotCcw,
}

impl SynthClass {
    pub const ALL: [SynthClass; 6] = [
        Self::BarUp,
        Self::BarDown,
        Self::BarLeft,
        Self::BarRight,
        Self::DotCw,
        Self::DotCcw,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed")
    }
}

/// Generator parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub duration_us: u64,
    /// Time samples at which the moving object emits events.
    pub steps: usize,
    /// Probability that a covered pixel emits at a time sample.
    pub emit_prob: f64,
    /// Uniform background events as a fraction of object events.
    pub noise_frac: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            width: 16,
            height: 16,
            duration_us: 100_000,
            steps: 48,
            emit_prob: 0.6,
            noise_frac: 0.03,
        }
    }
}

pub fn synth_events(class: SynthClass, seed: u64) -> EventStream {
    synth_events_with(&SynthSpec::default(), class, seed)
}

/// Deterministic per `(spec, class, seed)`.
pub fn synth_events_with(spec: &SynthSpec, class: SynthClass, seed: u64) -> EventStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class.index() as u64 + 1);
    let (w, h) = (spec.width as f64, spec.height as f64);
    let mut events = Vec::new();
    let dt = spec.duration_us as f64 / spec.steps as f64;

    // Bar geometry: thickness 2, travelling 60% of the sensor from a random
    // start, spanning a random segment of at least half the sensor.
    let along = |horizontal: bool| if horizontal { w } else { h };
    let horizontal_motion = matches!(class, SynthClass::BarLeft | SynthClass::BarRight);
    let extent = along(horizontal_motion);
    let cross = along(!horizontal_motion);
    let travel = (0.6 * extent).round();
    let start = rng.random_range(0.0..=(extent - travel - 2.0).max(0.0));
    let seg_len = rng.random_range((cross / 2.0).round()..=cross);
    let seg_start = rng.random_range(0.0..=(cross - seg_len));
    // Dot geometry: 2x2 dot on a circle about the center.
    let radius = rng.random_range(0.15..0.22) * w.min(h);
    let phase = rng.random_range(0.0..2.0 * PI);
    // Three quarters of a turn; the random phase spreads the arc over the
    // whole circle across seeds.
    let sweep = 1.5 * PI;

    for step in 0..spec.steps {
        let frac = (step as f64 + 0.5) / spec.steps as f64;
        let mut pixels: Vec<(f64, f64)> = Vec::new();
        match class {
            SynthClass::BarUp | SynthClass::BarDown | SynthClass::BarLeft | SynthClass::BarRight => {
                let forward = matches!(class, SynthClass::BarDown | SynthClass::BarRight);
                let pos = if forward {
                    start + travel * frac
                } else {
                    start + travel * (1.0 - frac)
                };
                for k in 0..2 {
                    let a = pos.floor() + k as f64;
                    for c in 0..seg_len as usize {
                        let b = seg_start + c as f64;
                        pixels.push(if horizontal_motion { (a, b) } else { (b, a) });
                    }
                }
            }
            SynthClass::DotCw | SynthClass::DotCcw => {
                // Image y grows downward, so increasing angle turns clockwise.
                let sign = if class == SynthClass::DotCw { 1.0 } else { -1.0 };
                let ang = phase + sign * sweep * frac;
                let cx = w / 2.0 - 1.0 + radius * ang.cos();
                let cy = h / 2.0 - 1.0 + radius * ang.sin();
                for dx in 0..2 {
                    for dy in 0..2 {
                        pixels.push((cx.round() + dx as f64, cy.round() + dy as f64));
                    }
                }
            }
        }
        let t0 = step as f64 * dt;
        for (x, y) in pixels {
            if x < 0.0 || y < 0.0 || x >= w || y >= h || rng.random::<f64>() >= spec.emit_prob {
                continue;
            }
            events.push(Event {
                t: (t0 + rng.random_range(0.0..dt)) as u64,
                x: x as u16,
                y: y as u16,
                p: rng.random_range(0..2),
            });
        }
    }
    let noise = (events.len() as f64 * spec.noise_frac).round() as usize;
    for _ in 0..noise {
        events.push(Event {
            t: rng.random_range(0..spec.duration_us),
            x: rng.random_range(0..spec.width) as u16,
            y: rng.random_range(0..spec.height) as u16,
            p: rng.random_range(0..2),
        });
    }
    events.sort_by_key(|e| (e.t, e.y, e.x, e.p));
    EventStream {
        width: spec.width,
        height: spec.height,
        events,
    }
}

/// Aggregates events into `[T, 2, H, W]` presence frames. The stream's time
/// range is split into `T` equal bins; channel 0 marks positive events and
/// channel 1 negative ones. Sensor coordinates are rescaled to `H x W`.
pub fn events_to_frames(s: &EventStream, t: usize, h: usize, w: usize) -> Result<Tensor> {
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidValue(format!(
            "frame grid {t}x{h}x{w} must be non-empty"
        )));
    }
    s.validate()?;
    let mut out = Tensor::zeros(&[t, 2, h, w]);
    let (Some(first), Some(last)) = (s.events.first(), s.events.last()) else {
        return Ok(out);
    };
    let span = (last.t - first.t + 1) as u128;
    let data = out.data_mut();
    for e in &s.events {
        let bin = ((e.t - first.t) as u128 * t as u128 / span) as usize;
        let x = e.x as usize * w / s.width;
        let y = e.y as usize * h / s.height;
        let ch = if e.p == 1 { 0 } else { 1 };
        data[((bin * 2 + ch) * h + y) * w + x] = 1.0;
    }
    Ok(out)
}

/// `per_class` streams of each class with seeds `seed_base..`, as frame
/// samples labeled by [`SynthClass::index`].
pub fn synth_dataset(
    spec: &SynthSpec,
    per_class: usize,
    seed_base: u64,
    t: usize,
    h: usize,
    w: usize,
) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(per_class * SynthClass::ALL.len());
    for i in 0..per_class {
        for class in SynthClass::ALL {
            let stream = synth_events_with(spec, class, seed_base + i as u64);
            out.push(Sample::frames(events_to_frames(&stream, t, h, w)?, class.index())?);
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct EventRow {
    t: u64,
    x: u16,
    y: u16,
    p: u8,
}

/// CSV with header `t,x,y,p`.
pub fn write_events_csv<W: Write>(s: &EventStream, out: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    for e in &s.events {
        wr.serialize(EventRow {
            t: e.t,
            x: e.x,
            y: e.y,
            p: e.p,
        })?;
    }
    if s.events.is_empty() {
        wr.write_record(["t", "x", "y", "p"])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_events_csv<R: Read>(input: R, width: usize, height: usize) -> Result<EventStream> {
    let mut rd = csv::Reader::from_reader(input);
    let headers = rd.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["t", "x", "y", "p"] {
        return Err(Error::InvalidValue(format!(
            "event CSV header must be `t,x,y,p`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let events = rd
        .deserialize::<EventRow>()
        .map(|r| {
            r.map(|r| Event {
                t: r.t,
                x: r.x,
                y: r.y,
                p: r.p,
            })
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let s = EventStream {
        width,
        height,
        events,
    };
    s.validate()?;
    Ok(s)
}
