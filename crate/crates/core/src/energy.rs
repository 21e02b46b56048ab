//! Synaptic-operation and energy accounting.
//!
//! A layer whose input is spike-valued is charged per synaptic operation
//! (`SOP = fr * T * FLOPs`, one accumulate each); a layer fed with analog
//! values (the entrance convolution on static images) is charged per
//! multiply-accumulate. Batch norm, pooling, and the neuron updates are free.

use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Energy per multiply-accumulate on a 45 nm process, in picojoules.
pub const E_MAC_PJ: f64 = 4.6;
/// Energy per accumulate on a 45 nm process, in picojoules.
pub const E_AC_PJ: f64 = 0.9;

const PJ_PER_MJ: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Linear,
    /// Per-token channel sums of the MSSA branches.
    MssaColumnSum,
    /// Applying the MSSA token gate to `V`.
    MssaGate,
    /// The `Q K^T` product of spiking self-attention.
    SsaScores,
    /// The `(Q K^T) V` product of spiking self-attention.
    SsaWeighting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Charge {
    /// Multiply-accumulate, analog input.
    Mac,
    /// Accumulate, spike input.
    Ac,
}

/// Static description of a layer, enough to count its operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerDesc {
    Conv {
        kernel: usize,
        c_in: usize,
        c_out: usize,
        h_out: usize,
        w_out: usize,
    },
    Linear {
        d_in: usize,
        d_out: usize,
        tokens: usize,
    },
    MssaColumnSum {
        tokens: usize,
        dim: usize,
        branches: usize,
    },
    MssaGate {
        tokens: usize,
        dim: usize,
    },
    SsaScores {
        tokens: usize,
        dim: usize,
    },
    SsaWeighting {
        tokens: usize,
        dim: usize,
    },
}

const KNOWN_KINDS: [&str; 6] = [
    "conv",
    "linear",
    "mssa_column_sum",
    "mssa_gate",
    "ssa_scores",
    "ssa_weighting",
];

impl LayerDesc {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let kind = value
            .get("kind")
            .and_then(|k| k.as_str())
            .ok_or_else(|| Error::UnknownLayerKind("<missing>".into()))?;
        if !KNOWN_KINDS.contains(&kind) {
            return Err(Error::UnknownLayerKind(kind.to_string()));
        }
        Ok(serde_json::from_value(value)?)
    }
}

/// Operations per sample per timestep.
pub fn count_flops(desc: &LayerDesc) -> u64 {
    let ops = match *desc {
        LayerDesc::Conv {
            kernel,
            c_in,
            c_out,
            h_out,
            w_out,
        } => kernel * kernel * c_in * c_out * h_out * w_out,
        LayerDesc::Linear {
            d_in,
            d_out,
            tokens,
        } => d_in * d_out * tokens,
        LayerDesc::MssaColumnSum {
            tokens,
            dim,
            branches,
        } => branches * tokens * dim,
        LayerDesc::MssaGate { tokens, dim } => tokens * dim,
        LayerDesc::SsaScores { tokens, dim } | LayerDesc::SsaWeighting { tokens, dim } => {
            tokens * tokens * dim
        }
    };
    ops as u64
}

/// One execution of a layer as seen by the profiler.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub path: &'a str,
    pub kind: LayerKind,
    pub charge: Charge,
    pub flops_per_step: u64,
    pub timesteps: usize,
    pub samples: usize,
    /// Sum of input values; an integer residual value `k` counts `k` spikes.
    pub spikes: f64,
    pub elements: u64,
    pub realized_sops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCounter {
    pub path: String,
    pub kind: LayerKind,
    pub charge: Charge,
    /// Static operations per sample per timestep.
    pub flops_per_step: u64,
    pub timesteps: usize,
    pub samples: u64,
    pub spikes: f64,
    pub elements: u64,
    /// Accumulates actually triggered, summed over all samples.
    pub realized_sops: f64,
}

impl LayerCounter {
    /// Mean input value. For binary inputs this is the fraction of elements
    /// that spiked; on integer residual edges it may exceed one.
    pub fn firing_rate(&self) -> Option<f64> {
        (self.elements > 0).then(|| self.spikes / self.elements as f64)
    }

    pub fn merge(&mut self, other: &LayerCounter) {
        debug_assert_eq!(self.kind, other.kind);
        debug_assert_eq!(self.flops_per_step, other.flops_per_step);
        self.samples += other.samples;
        self.spikes += other.spikes;
        self.elements += other.elements;
        self.realized_sops += other.realized_sops;
        if other.charge == Charge::Mac {
            self.charge = Charge::Mac;
        }
    }
}

/// Per-layer counters keyed by layer path, in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Profiler {
    layers: IndexMap<String, LayerCounter>,
}

impl Profiler {
    pub fn record(&mut self, obs: Observation<'_>) {
        let fresh = LayerCounter {
            path: obs.path.to_string(),
            kind: obs.kind,
            charge: obs.charge,
            flops_per_step: obs.flops_per_step,
            timesteps: obs.timesteps,
            samples: obs.samples as u64,
            spikes: obs.spikes,
            elements: obs.elements,
            realized_sops: obs.realized_sops,
        };
        match self.layers.get_mut(obs.path) {
            Some(c) => c.merge(&fresh),
            None => {
                self.layers.insert(fresh.path.clone(), fresh);
            }
        }
    }

    pub fn layers(&self) -> &IndexMap<String, LayerCounter> {
        &self.layers
    }

    pub fn merge(&mut self, other: &Profiler) {
        for (path, c) in &other.layers {
            match self.layers.get_mut(path) {
                Some(mine) => mine.merge(c),
                None => {
                    self.layers.insert(path.clone(), c.clone());
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn firing_rates(&self) -> FiringRates {
        measure_firing_rate(self)
    }

    pub fn energy_inputs(&self) -> Vec<EnergyInput> {
        self.layers
            .values()
            .map(|c| EnergyInput {
                path: c.path.clone(),
                kind: c.kind,
                charge: c.charge,
                flops: c.flops_per_step,
                timesteps: c.timesteps,
                firing_rate: match c.charge {
                    Charge::Ac => c.firing_rate(),
                    Charge::Mac => None,
                },
            })
            .collect()
    }

    pub fn energy_report(&self) -> Result<EnergyReport> {
        compute_energy(&self.energy_inputs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiringRates {
    pub per_layer: IndexMap<String, Option<f64>>,
    /// Total input spikes over total input elements across spike-fed layers.
    pub model_mean: Option<f64>,
}

/// Firing rate of every spike-fed layer's input. Layers without observed
/// elements report `None`.
pub fn measure_firing_rate(profiler: &Profiler) -> FiringRates {
    let mut per_layer = IndexMap::new();
    let mut spikes = 0.0;
    let mut elements = 0u64;
    for c in profiler.layers.values().filter(|c| c.charge == Charge::Ac) {
        per_layer.insert(c.path.clone(), c.firing_rate());
        spikes += c.spikes;
        elements += c.elements;
    }
    FiringRates {
        per_layer,
        model_mean: (elements > 0).then(|| spikes / elements as f64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyInput {
    pub path: String,
    pub kind: LayerKind,
    pub charge: Charge,
    /// Operations per sample per timestep.
    pub flops: u64,
    pub timesteps: usize,
    pub firing_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub path: String,
    pub kind: LayerKind,
    pub charge: Charge,
    pub flops: u64,
    pub firing_rate: Option<f64>,
    pub timesteps: usize,
    pub sops: f64,
    pub energy_pj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub layers: Vec<LayerEnergy>,
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
    pub total_flops: u64,
    pub total_sops: f64,
    /// `E_AC * sum(SOPs)` over spike-fed layers.
    pub ac_energy_pj: f64,
    /// `E_MAC * FLOPs` over analog-fed (entrance) layers.
    pub mac_energy_pj: f64,
    pub total_pj: f64,
    pub total_mj: f64,
    /// `E_MAC * sum(FLOPs)` over every layer, as if run by a non-spiking network.
    pub ann_equivalent_pj: f64,
    pub ann_equivalent_mj: f64,
}

/// Energy per sample.
pub fn compute_energy(inputs: &[EnergyInput]) -> Result<EnergyReport> {
    let mut layers = Vec::with_capacity(inputs.len());
    let mut total_sops = 0.0;
    let mut total_flops = 0u64;
    let mut mac_flops = 0u64;
    for inp in inputs {
        total_flops += inp.flops;
        let (sops, energy) = match inp.charge {
            Charge::Ac => {
                let fr = inp
                    .firing_rate
                    .ok_or_else(|| Error::MissingFiringRate(inp.path.clone()))?;
                let sops = fr * inp.timesteps as f64 * inp.flops as f64;
                total_sops += sops;
                (sops, E_AC_PJ * sops)
            }
            Charge::Mac => {
                mac_flops += inp.flops;
                (0.0, E_MAC_PJ * inp.flops as f64)
            }
        };
        layers.push(LayerEnergy {
            path: inp.path.clone(),
            kind: inp.kind,
            charge: inp.charge,
            flops: inp.flops,
            firing_rate: inp.firing_rate,
            timesteps: inp.timesteps,
            sops,
            energy_pj: energy,
        });
    }
    let ac_energy_pj = E_AC_PJ * total_sops;
    let mac_energy_pj = E_MAC_PJ * mac_flops as f64;
    let total_pj = ac_energy_pj + mac_energy_pj;
    let ann_equivalent_pj = E_MAC_PJ * total_flops as f64;
    Ok(EnergyReport {
        layers,
        e_mac_pj: E_MAC_PJ,
        e_ac_pj: E_AC_PJ,
        total_flops,
        total_sops,
        ac_energy_pj,
        mac_energy_pj,
        total_pj,
        total_mj: total_pj / PJ_PER_MJ,
        ann_equivalent_pj,
        ann_equivalent_mj: ann_equivalent_pj / PJ_PER_MJ,
    })
}

impl EnergyReport {
    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let width = self
            .layers
            .iter()
            .map(|l| l.path.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>15}  {:>6}  {:>8}  {:>3}  {:>15}  {:>14}",
            "layer", "kind", "charge", "fr", "T", "SOPs", "energy (pJ)"
        );
        for l in &self.layers {
            let kind = serde_json::to_value(l.kind)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            let charge = match l.charge {
                Charge::Ac => "AC",
                Charge::Mac => "MAC",
            };
            let fr = l
                .firing_rate
                .map(|f| format!("{f:.4}"))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<width$}  {:>15}  {:>6}  {:>8}  {:>3}  {:>15.1}  {:>14.1}",
                l.path, kind, charge, fr, l.timesteps, l.sops, l.energy_pj
            );
        }
        let _ = writeln!(s, "total FLOPs       {}", self.total_flops);
        let _ = writeln!(s, "total SOPs        {:.1}", self.total_sops);
        let _ = writeln!(
            s,
            "SNN energy        {:.4} mJ ({:.1} pJ AC + {:.1} pJ MAC)",
            self.total_mj, self.ac_energy_pj, self.mac_energy_pj
        );
        let _ = writeln!(s, "ANN-equivalent    {:.4} mJ", self.ann_equivalent_mj);
        s
    }
}
