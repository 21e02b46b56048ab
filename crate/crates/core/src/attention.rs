//! Token mixers (MSSA and SSA), the spiking MLP, and the residual block.
//!
//! Blocks record onto a [`Tape`]; the `*_forward` functions wrap them for
//! standalone use on token-form [`SpikeTensor`]s `(T, B, N, D)` laid out on an
//! `H x W` grid.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{EdgeKind, Tape, Var};
use crate::energy::LayerDesc;
use crate::error::{Error, Result};
use crate::layers::{ConvBnLif, LayerRow};
use crate::neuron::LifParams;
use crate::norm::Mode;
use crate::params::ParamStore;
use crate::tensor::{Layout, SpikeTensor, Tensor};

/// Branch combination feeding the MSSA token gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MssaVariant {
    /// 3x3 local branch plus 1x1 pointwise branch.
    #[default]
    #[serde(rename = "p+q")]
    PQ,
    #[serde(rename = "p+p")]
    PP,
    #[serde(rename = "q+q")]
    QQ,
    #[serde(rename = "p")]
    P,
    #[serde(rename = "q")]
    Q,
}

impl MssaVariant {
    pub const ALL: [MssaVariant; 5] = [Self::PQ, Self::PP, Self::QQ, Self::P, Self::Q];

    /// Kernel size of each gate branch.
    pub fn branch_kernels(self) -> &'static [usize] {
        match self {
            Self::PQ => &[3, 1],
            Self::PP => &[3, 3],
            Self::QQ => &[1, 1],
            Self::P => &[3],
            Self::Q => &[1],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::PQ => "p+q",
            Self::PP => "p+p",
            Self::QQ => "q+q",
            Self::P => "p",
            Self::Q => "q",
        }
    }
}

impl fmt::Display for MssaVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MssaVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidValue(format!("unknown MSSA variant `{s}`")))
    }
}

fn branch_paths(path: &str, kernels: &[usize]) -> Vec<String> {
    let letter = |k: usize| if k == 1 { "q" } else { "p" };
    if kernels.len() == 2 && kernels[0] == kernels[1] {
        (0..2)
            .map(|i| format!("{path}.{}{i}", letter(kernels[i])))
            .collect()
    } else {
        kernels
            .iter()
            .map(|&k| format!("{path}.{}", letter(k)))
            .collect()
    }
}

/// Per-token column sums of each branch, summed, gate an LIF that selects
/// which tokens of `V` pass.
#[derive(Debug, Clone)]
pub struct MssaBlock {
    pub path: String,
    pub dim: usize,
    pub variant: MssaVariant,
    branches: Vec<ConvBnLif>,
    v: ConvBnLif,
    pub gate_lif: LifParams,
    proj: Option<ConvBnLif>,
}

impl MssaBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        path: &str,
        dim: usize,
        variant: MssaVariant,
        projection: bool,
        lif: LifParams,
    ) -> Self {
        let kernels = variant.branch_kernels();
        let branches = branch_paths(path, kernels)
            .iter()
            .zip(kernels)
            .map(|(p, &k)| ConvBnLif::new(store, rng, p, dim, dim, k, 1, k / 2, lif))
            .collect();
        let v = ConvBnLif::pointwise(store, rng, &format!("{path}.v"), dim, dim, lif);
        let proj = projection
            .then(|| ConvBnLif::pointwise(store, rng, &format!("{path}.proj"), dim, dim, lif));
        Self {
            path: path.to_string(),
            dim,
            variant,
            branches,
            v,
            gate_lif: lif,
            proj,
        }
    }

    pub fn has_projection(&self) -> bool {
        self.proj.is_some()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut alpha: Option<Var> = None;
        for branch in &self.branches {
            let s = branch.forward(tape, store, x)?;
            let a = tape.channel_sum(&format!("{}.colsum", branch.path()), s)?;
            alpha = Some(match alpha {
                Some(prev) => tape.add(prev, a)?,
                None => a,
            });
        }
        let v = self.v.forward(tape, store, x)?;
        let alpha = alpha.expect("at least one branch");
        let out = mssa_gate(tape, &self.path, alpha, v, &self.gate_lif)?;
        match &self.proj {
            Some(p) => p.forward(tape, store, out),
            None => Ok(out),
        }
    }

    pub fn describe(&self, h: usize, w: usize, rows: &mut Vec<LayerRow>) {
        let tokens = h * w;
        for b in &self.branches {
            b.describe(h, w, rows);
            rows.push(LayerRow {
                path: format!("{}.colsum", b.path()),
                desc: LayerDesc::MssaColumnSum {
                    tokens,
                    dim: self.dim,
                    branches: 1,
                },
                params: 0,
            });
        }
        self.v.describe(h, w, rows);
        rows.push(LayerRow {
            path: format!("{}.gate", self.path),
            desc: LayerDesc::MssaGate {
                tokens,
                dim: self.dim,
            },
            params: 0,
        });
        if let Some(p) = &self.proj {
            p.describe(h, w, rows);
        }
    }
}

/// Fires the token gate from the summed column sums `alpha [T,B,1,H,W]` and
/// masks `v`.
fn mssa_gate(tape: &mut Tape, path: &str, alpha: Var, v: Var, lif: &LifParams) -> Result<Var> {
    let gate = tape.lif(alpha, lif)?;
    tape.audit_edge(&format!("{path}.gate_spikes"), gate, EdgeKind::Spike);
    let out = tape.gate_mul(&format!("{path}.gate"), gate, v)?;
    tape.audit_edge(&format!("{path}.out"), out, EdgeKind::Spike);
    Ok(out)
}

/// Spiking self-attention: `SN((Q K^T) V * scale)` per head, then a
/// pointwise projection.
#[derive(Debug, Clone)]
pub struct SsaBlock {
    pub path: String,
    pub dim: usize,
    pub heads: usize,
    pub scale: f64,
    q: ConvBnLif,
    k: ConvBnLif,
    v: ConvBnLif,
    pub attn_lif: LifParams,
    proj: ConvBnLif,
}

impl SsaBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        path: &str,
        dim: usize,
        heads: usize,
        scale: f64,
        lif: LifParams,
    ) -> Self {
        let unit = |store: &mut ParamStore, rng: &mut R, name: &str| {
            ConvBnLif::pointwise(store, rng, &format!("{path}.{name}"), dim, dim, lif)
        };
        let q = unit(store, rng, "q");
        let k = unit(store, rng, "k");
        let v = unit(store, rng, "v");
        let proj = unit(store, rng, "proj");
        Self {
            path: path.to_string(),
            dim,
            heads,
            scale,
            q,
            k,
            v,
            attn_lif: lif,
            proj,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, x)?;
        let v = self.v.forward(tape, store, x)?;
        let attn = ssa_core(tape, &self.path, q, k, v, self.heads, self.scale, &self.attn_lif)?;
        self.proj.forward(tape, store, attn)
    }

    pub fn describe(&self, h: usize, w: usize, rows: &mut Vec<LayerRow>) {
        let tokens = h * w;
        self.q.describe(h, w, rows);
        self.k.describe(h, w, rows);
        self.v.describe(h, w, rows);
        rows.push(LayerRow {
            path: format!("{}.scores", self.path),
            desc: LayerDesc::SsaScores {
                tokens,
                dim: self.dim,
            },
            params: 0,
        });
        rows.push(LayerRow {
            path: format!("{}.weighting", self.path),
            desc: LayerDesc::SsaWeighting {
                tokens,
                dim: self.dim,
            },
            params: 0,
        });
        self.proj.describe(h, w, rows);
    }
}

#[allow(clippy::too_many_arguments)]
fn ssa_core(
    tape: &mut Tape,
    path: &str,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    scale: f64,
    lif: &LifParams,
) -> Result<Var> {
    let a = tape.spiking_attention(path, q, k, v, heads, scale)?;
    let s = tape.lif(a, lif)?;
    tape.audit_edge(&format!("{path}.attn_spikes"), s, EdgeKind::Spike);
    Ok(s)
}

/// Two pointwise conv-BN-LIF layers, `D -> ratio*D -> D`.
#[derive(Debug, Clone)]
pub struct Smlp {
    pub path: String,
    fc1: ConvBnLif,
    fc2: ConvBnLif,
}

impl Smlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        path: &str,
        dim: usize,
        ratio: usize,
        lif: LifParams,
    ) -> Self {
        let hidden = dim * ratio;
        Self {
            path: path.to_string(),
            fc1: ConvBnLif::pointwise(store, rng, &format!("{path}.fc1"), dim, hidden, lif),
            fc2: ConvBnLif::pointwise(store, rng, &format!("{path}.fc2"), hidden, dim, lif),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        self.fc2.forward(tape, store, h)
    }

    pub fn describe(&self, h: usize, w: usize, rows: &mut Vec<LayerRow>) {
        self.fc1.describe(h, w, rows);
        self.fc2.describe(h, w, rows);
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Mixer {
    Mssa(MssaBlock),
    Ssa(SsaBlock),
}

impl Mixer {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Mixer::Mssa(m) => m.forward(tape, store, x),
            Mixer::Ssa(s) => s.forward(tape, store, x),
        }
    }

    pub fn describe(&self, h: usize, w: usize, rows: &mut Vec<LayerRow>) {
        match self {
            Mixer::Mssa(m) => m.describe(h, w, rows),
            Mixer::Ssa(s) => s.describe(h, w, rows),
        }
    }
}

/// `y' = mixer(x) + x; y = smlp(y') + y'`, summing spikes as integers.
#[derive(Debug, Clone)]
pub struct MsformerBlock {
    pub path: String,
    pub mixer: Mixer,
    pub mlp: Smlp,
}

impl MsformerBlock {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let m = self.mixer.forward(tape, store, x)?;
        let y1 = tape.add(m, x)?;
        tape.audit_edge(&format!("{}.res1", self.path), y1, EdgeKind::Residual);
        let f = self.mlp.forward(tape, store, y1)?;
        let y = tape.add(f, y1)?;
        tape.audit_edge(&format!("{}.res2", self.path), y, EdgeKind::Residual);
        Ok(y)
    }

    pub fn describe(&self, h: usize, w: usize, rows: &mut Vec<LayerRow>) {
        self.mixer.describe(h, w, rows);
        self.mlp.describe(h, w, rows);
    }
}

fn token_input(tape: &mut Tape, x: &SpikeTensor, grid: (usize, usize), dim: usize) -> Result<Var> {
    if x.layout() != Layout::Token {
        return Err(Error::shape("expected a token-form (T, B, N, D) spike tensor"));
    }
    if x.shape()[3] != dim {
        return Err(Error::shape(format!(
            "block expects D = {dim}, input has D = {}",
            x.shape()[3]
        )));
    }
    let img = x.to_image_form(grid.0, grid.1)?;
    Ok(tape.input(img.to_analog()))
}

fn token_output(t: &Tensor) -> Result<SpikeTensor> {
    SpikeTensor::from_analog(t, Layout::Image)?.to_token_form()
}

fn run_tokens(
    x: &SpikeTensor,
    grid: (usize, usize),
    dim: usize,
    mode: Mode,
    f: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<SpikeTensor> {
    let mut tape = Tape::new(mode);
    let input = token_input(&mut tape, x, grid, dim)?;
    let out = f(&mut tape, input)?;
    token_output(tape.value(out))
}

/// MSSA on token-form spikes. Fails unless `N = H * W` for `grid = (H, W)`.
pub fn mssa_forward(
    x: &SpikeTensor,
    grid: (usize, usize),
    block: &MssaBlock,
    store: &ParamStore,
    mode: Mode,
) -> Result<SpikeTensor> {
    run_tokens(x, grid, block.dim, mode, |t, v| block.forward(t, store, v))
}

pub fn ssa_forward(
    x: &SpikeTensor,
    grid: (usize, usize),
    block: &SsaBlock,
    store: &ParamStore,
    mode: Mode,
) -> Result<SpikeTensor> {
    run_tokens(x, grid, block.dim, mode, |t, v| block.forward(t, store, v))
}

pub fn smlp_forward(
    x: &SpikeTensor,
    grid: (usize, usize),
    mlp: &Smlp,
    store: &ParamStore,
    mode: Mode,
) -> Result<SpikeTensor> {
    let dim = x.shape().get(3).copied().unwrap_or(0);
    run_tokens(x, grid, dim, mode, |t, v| mlp.forward(t, store, v))
}

pub fn msformer_block(
    x: &SpikeTensor,
    grid: (usize, usize),
    block: &MsformerBlock,
    store: &ParamStore,
    mode: Mode,
) -> Result<SpikeTensor> {
    let dim = x.shape().get(3).copied().unwrap_or(0);
    run_tokens(x, grid, dim, mode, |t, v| block.forward(t, store, v))
}

fn same_shapes(ts: &[&SpikeTensor]) -> Result<()> {
    let first = ts[0];
    if first.layout() != Layout::Token {
        return Err(Error::shape("expected token-form spike tensors"));
    }
    if ts.iter().any(|t| t.shape() != first.shape() || t.layout() != first.layout()) {
        return Err(Error::shape("branch spike tensors differ in shape"));
    }
    Ok(())
}

/// The MSSA gating step applied to precomputed branch spikes: the gate LIF is
/// driven by the per-token channel sums of `branches`, and the gate masks `v`.
pub fn mssa_attend(
    branches: &[&SpikeTensor],
    v: &SpikeTensor,
    lif: &LifParams,
) -> Result<SpikeTensor> {
    if branches.is_empty() {
        return Err(Error::InvalidValue("MSSA needs at least one branch".into()));
    }
    let mut all = branches.to_vec();
    all.push(v);
    same_shapes(&all)?;
    let n = v.shape()[2];
    let mut tape = Tape::new(Mode::Infer);
    let mut alpha = None;
    for (i, b) in branches.iter().enumerate() {
        let img = tape.input(b.to_image_form(1, n)?.to_analog());
        let a = tape.channel_sum(&format!("branch{i}"), img)?;
        alpha = Some(match alpha {
            Some(prev) => tape.add(prev, a)?,
            None => a,
        });
    }
    let vv = tape.input(v.to_image_form(1, n)?.to_analog());
    let out = mssa_gate(&mut tape, "mssa", alpha.expect("non-empty"), vv, lif)?;
    token_output(tape.value(out))
}

/// The SSA attention step applied to precomputed `Q`, `K`, `V` spikes.
pub fn ssa_attend(
    q: &SpikeTensor,
    k: &SpikeTensor,
    v: &SpikeTensor,
    heads: usize,
    scale: f64,
    lif: &LifParams,
) -> Result<SpikeTensor> {
    same_shapes(&[q, k, v])?;
    let n = q.shape()[2];
    let mut tape = Tape::new(Mode::Infer);
    let [qv, kv, vv] = [q, k, v].map(|s| {
        s.to_image_form(1, n)
            .map(|img| tape.input(img.to_analog()))
    });
    let out = ssa_core(&mut tape, "ssa", qv?, kv?, vv?, heads, scale, lif)?;
    token_output(tape.value(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tokens(t: usize, n: usize, d: usize, data: &[u8]) -> SpikeTensor {
        SpikeTensor::new(vec![t, 1, n, d], data.to_vec(), Layout::Token).unwrap()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in MssaVariant::ALL {
            assert_eq!(v.name().parse::<MssaVariant>().unwrap(), v);
        }
        assert!("k+v".parse::<MssaVariant>().is_err());
    }

    #[test]
    fn gate_selects_tokens_with_enough_column_mass() {
        // Token 0 has column sum 2 (fires at once), token 1 has 0.
        let q = tokens(1, 2, 2, &[1, 1, 0, 0]);
        let v = tokens(1, 2, 2, &[1, 0, 1, 1]);
        let out = mssa_attend(&[&q], &v, &LifParams::default()).unwrap();
        assert_eq!(out.data(), &[1, 0, 0, 0]);
    }

    #[test]
    fn two_branches_add_before_the_gate() {
        // Each branch alone gives 1 per token: below threshold after the
        // leak (h = 0.5); together they reach 1.
        let q = tokens(1, 1, 2, &[1, 0]);
        let p = tokens(1, 1, 2, &[0, 1]);
        let v = tokens(1, 1, 2, &[1, 1]);
        let lif = LifParams::default();
        assert_eq!(mssa_attend(&[&q], &v, &lif).unwrap().data(), &[0, 0]);
        assert_eq!(mssa_attend(&[&q, &p], &v, &lif).unwrap().data(), &[1, 1]);
    }

    #[test]
    fn mismatched_branch_shapes_fail() {
        let q = tokens(1, 2, 2, &[1, 1, 0, 0]);
        let v = tokens(1, 1, 2, &[1, 1]);
        assert!(mssa_attend(&[&q], &v, &LifParams::default()).is_err());
    }

    #[test]
    fn ssa_attend_matches_hand_computed_scores() {
        // One head, N = 2, D = 2. A = Q K^T = [[1,1],[0,0]]; A V = [[2,1],[0,0]].
        let q = tokens(1, 2, 2, &[1, 0, 0, 0]);
        let k = tokens(1, 2, 2, &[1, 1, 1, 0]);
        let v = tokens(1, 2, 2, &[1, 1, 1, 0]);
        let lif = LifParams::default();
        // scale 1: membrane 2 and 1 -> h = 1 and 0.5; only the first fires.
        let out = ssa_attend(&q, &k, &v, 1, 1.0, &lif).unwrap();
        assert_eq!(out.data(), &[1, 0, 0, 0]);
        assert!(ssa_attend(&q, &k, &v, 3, 1.0, &lif).is_err());
    }

    #[test]
    fn grid_must_cover_tokens() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lif = LifParams::default();
        let block = MssaBlock::new(&mut store, &mut rng, "m", 4, MssaVariant::PQ, true, lif);
        let x = SpikeTensor::zeros(vec![2, 1, 6, 4], Layout::Token).unwrap();
        assert!(mssa_forward(&x, (2, 2), &block, &store, Mode::Infer).is_err());
        assert!(mssa_forward(&x, (2, 3), &block, &store, Mode::Infer).is_ok());
    }

    #[test]
    fn every_variant_keeps_shape_and_binary_output() {
        let lif = LifParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<u8> = (0..2 * 2 * 9 * 8).map(|_| rng.random_range(0..2)).collect();
        let x = SpikeTensor::new(vec![2, 2, 9, 8], data, Layout::Token).unwrap();
        for variant in MssaVariant::ALL {
            for proj in [false, true] {
                let mut store = ParamStore::default();
                let block = MssaBlock::new(&mut store, &mut rng, "m", 8, variant, proj, lif);
                let y = mssa_forward(&x, (3, 3), &block, &store, Mode::Train).unwrap();
                assert_eq!(y.shape(), x.shape());
                assert!(y.is_binary());
            }
        }
    }
}
