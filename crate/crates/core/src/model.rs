//! The three-stage hierarchical network and its configuration.
//!
//! ```text
//! SPEMSF-1 (x2, /4) -> stage 1 blocks -> SPEMSF-2 (/2) -> stage 2 blocks
//!   -> SPEMSF-3 (/2) -> stage 3 blocks -> time+token mean pool -> linear
//! ```
//!
//! Stage `i` works on `C_i` channels over `H/2^(i+1) x W/2^(i+1)` tokens,
//! so token counts follow `N, N/4, N/16` with `N = H/4 * W/4`.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Mixer, MsformerBlock, MssaBlock, MssaVariant, Smlp, SsaBlock};
use crate::autograd::{EdgeKind, Tape, Var};
use crate::embedding::{GVariant, SpemsfBlock};
use crate::energy::LayerDesc;
use crate::error::{Error, Result};
use crate::layers::LayerRow;
use crate::neuron::LifParams;
use crate::norm::{self, Mode};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Mssa,
    Ssa,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Mssa => "mssa",
            AttentionKind::Ssa => "ssa",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub timesteps: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channels of stages 1 to 3.
    pub dims: [usize; 3],
    pub depths: [usize; 3],
    pub attention: [AttentionKind; 3],
    pub mssa_variant: MssaVariant,
    pub mssa_projection: bool,
    pub spemsf_variant: GVariant,
    pub mlp_ratio: usize,
    pub ssa_heads: usize,
    pub ssa_scale: f64,
    pub num_classes: usize,
    pub seed: u64,
    pub lif: LifParams,
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.timesteps == 0 {
            errs.push("timesteps must be at least 1".to_string());
        }
        if self.in_channels == 0 {
            errs.push("in_channels must be at least 1".to_string());
        }
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % 16 != 0 {
                errs.push(format!("{name} must be a positive multiple of 16, got {v}"));
            }
        }
        for (i, &d) in self.dims.iter().enumerate() {
            if d == 0 {
                errs.push(format!("dims[{i}] must be positive"));
            }
        }
        if !self.dims[0].is_multiple_of(2) {
            errs.push(format!(
                "dims[0] must be even (the first embedding block emits dims[0]/2), got {}",
                self.dims[0]
            ));
        }
        if self.depths.iter().all(|&d| d == 0) {
            errs.push("at least one stage needs depth >= 1".to_string());
        }
        if self.ssa_heads == 0 {
            errs.push("ssa_heads must be at least 1".to_string());
        } else {
            for i in 0..3 {
                if self.attention[i] == AttentionKind::Ssa
                    && self.depths[i] > 0
                    && !self.dims[i].is_multiple_of(self.ssa_heads)
                {
                    errs.push(format!(
                        "dims[{i}] = {} is not divisible by ssa_heads = {}",
                        self.dims[i], self.ssa_heads
                    ));
                }
            }
        }
        if !(self.ssa_scale.is_finite() && self.ssa_scale > 0.0) {
            errs.push(format!("ssa_scale must be positive, got {}", self.ssa_scale));
        }
        if self.mlp_ratio == 0 {
            errs.push("mlp_ratio must be at least 1".to_string());
        }
        if self.num_classes == 0 {
            errs.push("num_classes must be at least 1".to_string());
        }
        if let Err(Error::Config(lif_errs)) = self.lif.validate() {
            errs.extend(lif_errs);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Equal up to name and seed: the two configs build models with the same
    /// tensors.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        let strip = |c: &ModelConfig| ModelConfig {
            name: String::new(),
            seed: 0,
            ..c.clone()
        };
        strip(self) == strip(other)
    }

    /// Token grid `(H, W)` of stage `i` (0-based).
    pub fn stage_grid(&self, i: usize) -> (usize, usize) {
        let f = 1 << (i + 2);
        (self.height / f, self.width / f)
    }

    pub fn stages(&self) -> [StageShape; 3] {
        std::array::from_fn(|i| {
            let (h, w) = self.stage_grid(i);
            StageShape {
                dim: self.dims[i],
                depth: self.depths[i],
                attention: self.attention[i],
                height: h,
                width: w,
                tokens: h * w,
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageShape {
    pub dim: usize,
    pub depth: usize,
    pub attention: AttentionKind,
    pub height: usize,
    pub width: usize,
    pub tokens: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    stem: [SpemsfBlock; 2],
    downsample: [SpemsfBlock; 2],
    stages: [Vec<MsformerBlock>; 3],
    head_w: ParamId,
    head_b: ParamId,
}

/// Builds a model; identical configs (including seed) give identical weights.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::default();
    let lif = cfg.lif;
    let [c1, _, c3] = cfg.dims;
    let g = cfg.spemsf_variant;
    let stem = [
        SpemsfBlock::new(&mut store, &mut rng, "embed1.0", cfg.in_channels, c1 / 2, g, lif)?,
        SpemsfBlock::new(&mut store, &mut rng, "embed1.1", c1 / 2, c1, g, lif)?,
    ];
    let mut downsample = Vec::with_capacity(2);
    let mut stages: [Vec<MsformerBlock>; 3] = Default::default();
    for (i, stage) in stages.iter_mut().enumerate() {
        if i > 0 {
            downsample.push(SpemsfBlock::new(
                &mut store,
                &mut rng,
                &format!("embed{}", i + 1),
                cfg.dims[i - 1],
                cfg.dims[i],
                g,
                lif,
            )?);
        }
        let dim = cfg.dims[i];
        for j in 0..cfg.depths[i] {
            let path = format!("stage{}.{j}", i + 1);
            let mixer = match cfg.attention[i] {
                AttentionKind::Mssa => Mixer::Mssa(MssaBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("{path}.mssa"),
                    dim,
                    cfg.mssa_variant,
                    cfg.mssa_projection,
                    lif,
                )),
                AttentionKind::Ssa => Mixer::Ssa(SsaBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("{path}.ssa"),
                    dim,
                    cfg.ssa_heads,
                    cfg.ssa_scale,
                    lif,
                )),
            };
            let mlp = Smlp::new(
                &mut store,
                &mut rng,
                &format!("{path}.mlp"),
                dim,
                cfg.mlp_ratio,
                lif,
            );
            stage.push(MsformerBlock { path, mixer, mlp });
        }
    }
    let head_w = store.add_fan_in_normal("head.weight", &[cfg.num_classes, c3], c3, &mut rng);
    let head_b = store.add_param("head.bias", Tensor::zeros(&[cfg.num_classes]));
    let [d2, d3] = <[SpemsfBlock; 2]>::try_from(downsample).expect("two transitions");
    Ok(Model {
        cfg: cfg.clone(),
        store,
        stem,
        downsample: [d2, d3],
        stages,
        head_w,
        head_b,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// SHA-256 over all weights and buffers.
    pub fn hash(&self) -> String {
        self.store.content_hash()
    }

    pub fn head_params(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }

    /// Lifts `[B, C0, H, W]` static input to `[T, B, C0, H, W]` by repeating
    /// the frame; `[T, B, C0, H, W]` input must already match `T`.
    pub fn prepare_input(&self, x: &Tensor) -> Result<Tensor> {
        let c = &self.cfg;
        let expect = (c.in_channels, c.height, c.width);
        match *x.shape() {
            [b, ch, h, w] if (ch, h, w) == expect => {
                let frame = x.data();
                let mut data = Vec::with_capacity(frame.len() * c.timesteps);
                for _ in 0..c.timesteps {
                    data.extend_from_slice(frame);
                }
                Tensor::new(vec![c.timesteps, b, ch, h, w], data)
            }
            [t, _, ch, h, w] if t == c.timesteps && (ch, h, w) == expect => Ok(x.clone()),
            ref s => Err(Error::shape(format!(
                "model `{}` expects [B, {}, {}, {}] or [{}, B, {}, {}, {}] input, got {s:?}",
                c.name, c.in_channels, c.height, c.width, c.timesteps, c.in_channels, c.height,
                c.width
            ))),
        }
    }

    /// Runs every block and returns the final-stage activations
    /// `[T, B, C3, H/16, W/16]`.
    pub fn forward_features(&self, tape: &mut Tape, x: &Tensor) -> Result<Var> {
        let input = self.prepare_input(x)?;
        let mut h = tape.input(input);
        let store = &self.store;
        h = self.stem[0].forward(tape, store, h)?;
        h = self.stem[1].forward(tape, store, h)?;
        for (i, blocks) in self.stages.iter().enumerate() {
            if i > 0 {
                h = self.downsample[i - 1].forward(tape, store, h)?;
            }
            tape.audit_edge(&format!("stage{}.input", i + 1), h, EdgeKind::Spike);
            for block in blocks {
                h = block.forward(tape, store, h)?;
            }
        }
        Ok(h)
    }

    /// Logits `[B, classes]` on the tape.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Var> {
        let h = self.forward_features(tape, x)?;
        let pooled = tape.mean_pool(h)?;
        let w = tape.param(&self.store, self.head_w);
        let b = tape.param(&self.store, self.head_b);
        tape.linear("head", pooled, w, b)
    }

    /// Inference-mode logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(Mode::Infer);
        let out = self.forward(&mut tape, x)?;
        let logits = tape.value(out).clone();
        logits.check_finite("logits")?;
        Ok(logits)
    }

    /// Folds the batch statistics recorded by a train-mode forward into the
    /// running statistics.
    pub fn commit_bn_updates(&mut self, tape: &Tape) {
        for u in tape.bn_updates() {
            let mut mean = self.store.buffer(u.mean).clone();
            let mut var = self.store.buffer(u.var).clone();
            norm::update_running(
                mean.data_mut(),
                var.data_mut(),
                &u.batch_mean,
                &u.batch_var,
                u.count,
                norm::BN_MOMENTUM,
            );
            *self.store.buffer_mut(u.mean) = mean;
            *self.store.buffer_mut(u.var) = var;
        }
    }

    /// Static per-layer cost table for one sample and one timestep.
    pub fn layer_table(&self) -> Vec<LayerRow> {
        let c = &self.cfg;
        let mut rows = Vec::new();
        self.stem[0].describe(c.height, c.width, &mut rows);
        self.stem[1].describe(c.height / 2, c.width / 2, &mut rows);
        for (i, blocks) in self.stages.iter().enumerate() {
            let (h, w) = c.stage_grid(i);
            if i > 0 {
                self.downsample[i - 1].describe(h * 2, w * 2, &mut rows);
            }
            for b in blocks {
                b.describe(h, w, &mut rows);
            }
        }
        rows.push(LayerRow {
            path: "head".into(),
            desc: LayerDesc::Linear {
                d_in: c.dims[2],
                d_out: c.num_classes,
                tokens: 1,
            },
            params: c.dims[2] * c.num_classes + c.num_classes,
        });
        rows
    }
}
