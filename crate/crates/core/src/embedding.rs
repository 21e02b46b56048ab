//! Spiking patch embedding with multi-scale fusion (SPEMSF).
//!
//! Each block halves the spatial size. A strided 1x1 branch `F` and a 3x3
//! convolution branch `G` (with a 2x2 max-pool) both emit spikes of the same
//! shape; the block output is their logical OR.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{EdgeKind, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{ConvBn, ConvBnLif, LayerRow};
use crate::neuron::LifParams;
use crate::norm::Mode;
use crate::params::ParamStore;
use crate::tensor::{Layout, SpikeTensor, Tensor};

/// Ordering of pooling and firing inside the `G` branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GVariant {
    /// conv3x3 - BN - maxpool - SN - conv3x3 - BN - SN
    #[default]
    G1,
    /// conv3x3 - BN - SN - conv3x3 - BN - maxpool - SN
    G2,
}

impl fmt::Display for GVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GVariant::G1 => "g1",
            GVariant::G2 => "g2",
        })
    }
}

impl FromStr for GVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "g1" => Ok(GVariant::G1),
            "g2" => Ok(GVariant::G2),
            _ => Err(Error::InvalidValue(format!("unknown G-branch variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpemsfBlock {
    pub path: String,
    pub c_in: usize,
    pub c_out: usize,
    pub variant: GVariant,
    f: ConvBnLif,
    g1: ConvBn,
    g2: ConvBn,
    lif: LifParams,
}

impl SpemsfBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        path: &str,
        c_in: usize,
        c_out: usize,
        variant: GVariant,
        lif: LifParams,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::Config(vec![format!(
                "{path}: SPEMSF channels must be positive, got {c_in} -> {c_out}"
            )]));
        }
        let f = ConvBnLif::new(store, rng, &format!("{path}.f"), c_in, c_out, 1, 2, 0, lif);
        let g1 = ConvBn::new(store, rng, &format!("{path}.g.conv1"), c_in, c_out, 3, 1, 1);
        let g2 = ConvBn::new(store, rng, &format!("{path}.g.conv2"), c_out, c_out, 3, 1, 1);
        Ok(Self {
            path: path.to_string(),
            c_in,
            c_out,
            variant,
            f,
            g1,
            g2,
            lif,
        })
    }

    fn fire(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let s = tape.lif(x, &self.lif)?;
        tape.audit_edge(&format!("{}.{name}", self.path), s, EdgeKind::Spike);
        Ok(s)
    }

    fn g_branch(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self.variant {
            GVariant::G1 => {
                let a = self.g1.forward(tape, store, x)?;
                let a = tape.maxpool2(a)?;
                let a = self.fire(tape, a, "g.sn1")?;
                let b = self.g2.forward(tape, store, a)?;
                self.fire(tape, b, "g.sn2")
            }
            GVariant::G2 => {
                let a = self.g1.forward(tape, store, x)?;
                let a = self.fire(tape, a, "g.sn1")?;
                let b = self.g2.forward(tape, store, a)?;
                let b = tape.maxpool2(b)?;
                self.fire(tape, b, "g.sn2")
            }
        }
    }

    /// Input `[T, B, C_in, H, W]` with even `H` and `W`; output
    /// `[T, B, C_out, H/2, W/2]` spikes.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 5 || shape[2] != self.c_in {
            return Err(Error::shape(format!(
                "{} expects [T, B, {}, H, W], got {shape:?}",
                self.path, self.c_in
            )));
        }
        if !shape[3].is_multiple_of(2) || !shape[4].is_multiple_of(2) {
            return Err(Error::shape(format!(
                "{} needs even spatial size, got {}x{}",
                self.path, shape[3], shape[4]
            )));
        }
        let f = self.f.forward(tape, store, x)?;
        let g = self.g_branch(tape, store, x)?;
        if tape.value(f).shape() != tape.value(g).shape() {
            return Err(Error::shape(format!(
                "{}: branch outputs {:?} and {:?} differ",
                self.path,
                tape.value(f).shape(),
                tape.value(g).shape()
            )));
        }
        let y = tape.or(f, g)?;
        tape.audit_edge(&format!("{}.out", self.path), y, EdgeKind::Spike);
        Ok(y)
    }

    pub fn param_count(&self) -> usize {
        self.f.param_count() + self.g1.param_count() + self.g2.param_count()
    }

    /// Appends cost rows for an `h x w` input.
    pub fn describe(&self, h: usize, w: usize, rows: &mut Vec<LayerRow>) {
        self.f.describe(h, w, rows);
        match self.variant {
            GVariant::G1 => {
                self.g1.describe(h, w, rows);
                self.g2.describe(h / 2, w / 2, rows);
            }
            GVariant::G2 => {
                self.g1.describe(h, w, rows);
                self.g2.describe(h, w, rows);
            }
        }
    }
}

/// Logical OR of the two branch outputs; shapes must agree.
pub fn fuse_branches(f: &SpikeTensor, g: &SpikeTensor) -> Result<SpikeTensor> {
    if !f.is_binary() || !g.is_binary() {
        return Err(Error::InvalidValue("fusion inputs must be binary spikes".into()));
    }
    f.or(g)
}

fn run_image(
    x: &Tensor,
    mode: Mode,
    f: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<SpikeTensor> {
    let mut tape = Tape::new(mode);
    let input = tape.input(x.clone());
    let out = f(&mut tape, input)?;
    SpikeTensor::from_analog(tape.value(out), Layout::Image)
}

/// One SPEMSF block on an image-form input, analog or spikes.
pub fn spemsf_forward(
    x: &Tensor,
    block: &SpemsfBlock,
    store: &ParamStore,
    mode: Mode,
) -> Result<SpikeTensor> {
    run_image(x, mode, |t, v| block.forward(t, store, v))
}

/// The stage-1 embedding: two blocks, `C0 -> C1/2 -> C1`, spatial `/4`.
pub fn spemsf_stage1(
    x: &Tensor,
    blocks: &[SpemsfBlock; 2],
    store: &ParamStore,
    mode: Mode,
) -> Result<SpikeTensor> {
    run_image(x, mode, |t, v| {
        let a = blocks[0].forward(t, store, v)?;
        blocks[1].forward(t, store, a)
    })
}

/// Stage transition on token-form spikes laid out on an `H x W` grid;
/// returns token-form spikes on the `H/2 x W/2` grid.
pub fn spemsf_downsample(
    x: &SpikeTensor,
    grid: (usize, usize),
    block: &SpemsfBlock,
    store: &ParamStore,
    mode: Mode,
) -> Result<SpikeTensor> {
    let img = x.to_image_form(grid.0, grid.1)?;
    spemsf_forward(&img.to_analog(), block, store, mode)?.to_token_form()
}
