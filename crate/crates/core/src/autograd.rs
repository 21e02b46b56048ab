//! Reverse-mode differentiation over a linear tape of recorded operations.
//!
//! Activations are image-form `[T, B, C, H, W]` analog tensors. Every forward
//! op appends a node holding its output and whatever it needs for backward;
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients
//! additively wherever a value fans out.

use crate::energy::{Charge, LayerKind, Observation, Profiler};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::neuron::{lif_scan, lif_scan_backward, LifParams};
use crate::norm::{self, Mode};
use crate::params::{BufferId, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which kind of edge an audited activation sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    /// Output of a spiking neuron layer; must be binary.
    Spike,
    /// Sum of spike tensors on a residual path; small non-negative integers.
    Residual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditEntry {
    pub path: String,
    pub edge: EdgeKind,
    pub shape: Vec<usize>,
    pub max_value: f64,
    pub integer_valued: bool,
}

/// Running-statistics update produced by a train-mode batch norm.
#[derive(Debug, Clone)]
pub(crate) struct BnUpdate {
    pub mean: BufferId,
    pub var: BufferId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeom,
        n: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        dims: (usize, usize, usize),
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Lif {
        x: Var,
        params: LifParams,
        h: Vec<f64>,
        neurons: usize,
        detach_reset: bool,
    },
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Or {
        a: Var,
        b: Var,
    },
    ChannelSum {
        x: Var,
        dims: (usize, usize, usize),
    },
    GateMul {
        gate: Var,
        v: Var,
        dims: (usize, usize, usize),
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        dims: (usize, usize, usize),
    },
    MeanPool {
        x: Var,
        t: usize,
        b: usize,
        c: usize,
        inner: usize,
    },
    Linear {
        x: Var,
        w: Var,
        bias: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients for every parameter reached by backward, indexed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    fn add(&mut self, id: ParamId, g: Tensor) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// `self += factor * other`.
    pub fn accumulate(&mut self, other: &Gradients, factor: f64) {
        for (id, g) in other.iter() {
            let mut scaled = g.clone();
            scaled.scale(factor);
            self.add(id, scaled);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.data().iter().all(|v| v.is_finite()))
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    mode: Mode,
    smoothed: bool,
    profiler: Option<Profiler>,
    audit: Option<Vec<AuditEntry>>,
    bn_updates: Vec<BnUpdate>,
}

impl Tape {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            smoothed: false,
            profiler: None,
            audit: None,
            bn_updates: Vec::new(),
        }
    }

    /// Replace the Heaviside step by its smooth surrogate primitive in the
    /// forward pass as well. Only for gradient verification: activations are
    /// no longer spikes.
    pub fn smoothed(mut self, on: bool) -> Self {
        self.smoothed = on;
        self
    }

    pub fn with_profiler(mut self) -> Self {
        self.profiler = Some(Profiler::default());
        self
    }

    pub fn with_audit(mut self) -> Self {
        self.audit = Some(Vec::new());
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_smoothed(&self) -> bool {
        self.smoothed
    }

    pub fn profiler(&self) -> Option<&Profiler> {
        self.profiler.as_ref()
    }

    pub fn take_profiler(&mut self) -> Option<Profiler> {
        self.profiler.take()
    }

    pub fn audit(&self) -> Option<&[AuditEntry]> {
        self.audit.as_deref()
    }

    pub(crate) fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.param(id).clone(), Op::Param(id), true)
    }

    /// Records an activation for the spike-purity audit, when enabled.
    pub fn audit_edge(&mut self, path: &str, v: Var, edge: EdgeKind) {
        if self.audit.is_none() {
            return;
        }
        let t = &self.nodes[v.0].value;
        let entry = AuditEntry {
            path: path.to_string(),
            edge,
            shape: t.shape().to_vec(),
            max_value: t.data().iter().copied().fold(0.0, f64::max),
            integer_valued: t.is_integer_valued(),
        };
        self.audit.as_mut().expect("checked").push(entry);
    }

    fn shape5(&self, v: Var, what: &str) -> Result<[usize; 5]> {
        match *self.value(v).shape() {
            [t, b, c, h, w] => Ok([t, b, c, h, w]),
            ref s => Err(Error::shape(format!("{what} expects [T,B,C,H,W], got {s:?}"))),
        }
    }

    pub fn conv2d(&mut self, path: &str, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let [t, b, c, h, wd] = self.shape5(x, "conv2d")?;
        let &[c_out, c_in, k, k2] = self.value(w).shape() else {
            return Err(Error::shape("conv weight must be [C_out, C_in, k, k]"));
        };
        if c_in != c || k != k2 {
            return Err(Error::shape(format!(
                "{path}: weight {:?} incompatible with input channels {c}",
                self.value(w).shape()
            )));
        }
        let geom = ConvGeom {
            c_in,
            c_out,
            kernel: k,
            stride,
            pad,
            h,
            w: wd,
        };
        geom.validate()?;
        let n = t * b;
        let out = kernels::conv2d_forward(self.value(x).data(), n, &geom, self.value(w).data());
        if let Some(prof) = self.profiler.as_mut() {
            kernels::profile_conv(prof, path, self.nodes[x.0].value.data(), t, b, &geom);
        }
        let value = Tensor::new(vec![t, b, c_out, geom.out_h(), geom.out_w()], out)?;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(value, Op::Conv { x, w, geom, n }, needs))
    }

    /// Batch norm over the channel axis. Train mode normalizes with batch
    /// statistics and queues a running-statistics update.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (BufferId, BufferId),
        store: &ParamStore,
    ) -> Result<Var> {
        let [t, b, c, h, w] = self.shape5(x, "batch_norm")?;
        let dims = (t * b, c, h * w);
        if self.value(gamma).numel() != c {
            return Err(Error::shape("batch norm gamma does not match channels"));
        }
        let (out, xhat, inv_std, batch_stats) = match self.mode {
            Mode::Train => {
                let r = norm::bn_train_forward(
                    self.value(x).data(),
                    dims,
                    self.value(gamma).data(),
                    self.value(beta).data(),
                    norm::BN_EPS,
                );
                self.bn_updates.push(BnUpdate {
                    mean: running.0,
                    var: running.1,
                    batch_mean: r.mean,
                    batch_var: r.var,
                    count: dims.0 * dims.2,
                });
                (r.out, r.xhat, r.inv_std, true)
            }
            Mode::Infer => {
                let (out, xhat, inv_std) = norm::bn_infer_forward(
                    self.value(x).data(),
                    dims,
                    self.value(gamma).data(),
                    self.value(beta).data(),
                    store.buffer(running.0).data(),
                    store.buffer(running.1).data(),
                    norm::BN_EPS,
                );
                (out, xhat, inv_std, false)
            }
        };
        let value = Tensor::new(vec![t, b, c, h, w], out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                dims,
                xhat,
                inv_std,
                batch_stats,
            },
            needs,
        ))
    }

    /// LIF neurons over the leading time axis, starting from `v_reset`.
    pub fn lif(&mut self, x: Var, params: &LifParams) -> Result<Var> {
        let xv = self.value(x);
        let steps = xv.shape()[0];
        let neurons = xv.numel() / steps.max(1);
        let mut v = vec![params.v_reset; neurons];
        let mut s = vec![0.0; xv.numel()];
        let mut h = vec![0.0; xv.numel()];
        lif_scan(params, xv.data(), &mut v, &mut s, Some(&mut h), self.smoothed);
        let value = Tensor::new(xv.shape().to_vec(), s)?;
        let needs = self.needs(x);
        Ok(self.push(
            value,
            Op::Lif {
                x,
                params: *params,
                h,
                neurons,
                detach_reset: !self.smoothed,
            },
            needs,
        ))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let [t, b, c, h, w] = self.shape5(x, "maxpool2")?;
        let (out, arg) = kernels::maxpool2_forward(self.value(x).data(), t * b * c, h, w);
        let value = Tensor::new(vec![t, b, c, h.div_ceil(2), w.div_ceil(2)], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::MaxPool { x, arg }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "add of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    /// `a + b - a*b`: logical OR on binary inputs, smooth otherwise.
    pub fn or(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "or of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y - x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Or { a, b }, needs))
    }

    /// Per-token sum over the channel axis: `[T,B,C,H,W] -> [T,B,1,H,W]`.
    pub fn channel_sum(&mut self, path: &str, x: Var) -> Result<Var> {
        let [t, b, c, h, w] = self.shape5(x, "channel_sum")?;
        let inner = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; t * b * inner];
        for o in 0..t * b {
            let dst = &mut out[o * inner..][..inner];
            for ch in 0..c {
                for (d, s) in dst.iter_mut().zip(&xv[(o * c + ch) * inner..][..inner]) {
                    *d += s;
                }
            }
        }
        self.observe(path, LayerKind::MssaColumnSum, x, (inner * c) as u64);
        let value = Tensor::new(vec![t, b, 1, h, w], out)?;
        let needs = self.needs(x);
        Ok(self.push(
            value,
            Op::ChannelSum {
                x,
                dims: (t * b, c, inner),
            },
            needs,
        ))
    }

    /// Broadcasts a per-token gate `[T,B,1,H,W]` over the channels of `v`.
    pub fn gate_mul(&mut self, path: &str, gate: Var, v: Var) -> Result<Var> {
        let [t, b, c, h, w] = self.shape5(v, "gate_mul")?;
        if self.value(gate).shape() != [t, b, 1, h, w] {
            return Err(Error::shape(format!(
                "gate {:?} does not broadcast over {:?}",
                self.value(gate).shape(),
                self.value(v).shape()
            )));
        }
        let inner = h * w;
        let g = self.value(gate).data();
        let vv = self.value(v).data();
        let mut out = vec![0.0; vv.len()];
        for o in 0..t * b {
            let gr = &g[o * inner..][..inner];
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in 0..inner {
                    out[base + i] = gr[i] * vv[base + i];
                }
            }
        }
        self.observe(path, LayerKind::MssaGate, v, (inner * c) as u64);
        let value = Tensor::new(vec![t, b, c, h, w], out)?;
        let needs = self.needs(gate) || self.needs(v);
        Ok(self.push(
            value,
            Op::GateMul {
                gate,
                v,
                dims: (t * b, c, inner),
            },
            needs,
        ))
    }

    /// Softmax-free attention: per head, `(Q K^T) V * scale` over the tokens.
    pub fn spiking_attention(
        &mut self,
        path: &str,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
    ) -> Result<Var> {
        let [t, b, c, h, w] = self.shape5(q, "spiking_attention")?;
        if self.value(k).shape() != self.value(q).shape()
            || self.value(v).shape() != self.value(q).shape()
        {
            return Err(Error::shape("Q, K, V shapes differ"));
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::shape(format!(
                "{c} channels cannot be split into {heads} heads"
            )));
        }
        let n = h * w;
        let dh = c / heads;
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; qv.len()];
        let mut a = vec![0.0; n * n];
        for o in 0..t * b {
            for head in 0..heads {
                attention_scores(qv, kv, o, head, dh, c, n, &mut a);
                for d in head * dh..(head + 1) * dh {
                    let vrow = &vv[(o * c + d) * n..][..n];
                    let orow = &mut out[(o * c + d) * n..][..n];
                    for (i, or) in orow.iter_mut().enumerate() {
                        let arow = &a[i * n..][..n];
                        let acc: f64 = arow.iter().zip(vrow).map(|(x, y)| x * y).sum();
                        *or = acc * scale;
                    }
                }
            }
        }
        let nd = (n * n * c) as u64;
        self.observe(&format!("{path}.scores"), LayerKind::SsaScores, q, nd);
        self.observe(&format!("{path}.weighting"), LayerKind::SsaWeighting, v, nd);
        let value = Tensor::new(vec![t, b, c, h, w], out)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                dims: (t * b, c, n),
            },
            needs,
        ))
    }

    /// Mean over time and tokens: `[T,B,C,H,W] -> [B,C]`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let [t, b, c, h, w] = self.shape5(x, "mean_pool")?;
        let inner = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * c];
        let norm = 1.0 / (t * inner) as f64;
        for ti in 0..t {
            for bi in 0..b {
                for ch in 0..c {
                    let base = ((ti * b + bi) * c + ch) * inner;
                    out[bi * c + ch] += xv[base..base + inner].iter().sum::<f64>();
                }
            }
        }
        for o in &mut out {
            *o *= norm;
        }
        let value = Tensor::new(vec![b, c], out)?;
        let needs = self.needs(x);
        Ok(self.push(
            value,
            Op::MeanPool {
                x,
                t,
                b,
                c,
                inner,
            },
            needs,
        ))
    }

    /// `x [B, D_in] @ w^T + bias` with `w [D_out, D_in]`.
    pub fn linear(&mut self, path: &str, x: Var, w: Var, bias: Var) -> Result<Var> {
        let &[b, d_in] = self.value(x).shape() else {
            return Err(Error::shape("linear input must be [B, D]"));
        };
        let &[d_out, w_in] = self.value(w).shape() else {
            return Err(Error::shape("linear weight must be [D_out, D_in]"));
        };
        if w_in != d_in || self.value(bias).numel() != d_out {
            return Err(Error::shape(format!(
                "linear weight {:?} / bias {:?} incompatible with input {:?}",
                self.value(w).shape(),
                self.value(bias).shape(),
                self.value(x).shape()
            )));
        }
        let (xv, wv, bv) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(bias).data(),
        );
        let mut out = vec![0.0; b * d_out];
        for i in 0..b {
            let xr = &xv[i * d_in..][..d_in];
            for j in 0..d_out {
                let wr = &wv[j * d_in..][..d_in];
                out[i * d_out + j] = xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>() + bv[j];
            }
        }
        self.observe(path, LayerKind::Linear, x, (d_in * d_out) as u64);
        let value = Tensor::new(vec![b, d_out], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(bias);
        Ok(self.push(value, Op::Linear { x, w, bias }, needs))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let &[b, k] = self.value(logits).shape() else {
            return Err(Error::shape("logits must be [B, classes]"));
        };
        if labels.len() != b {
            return Err(Error::shape(format!(
                "{} labels for a batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidValue(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &lv[i * k..][..k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / z;
            }
            loss += -(row[labels[i]] - max - z.ln());
        }
        loss /= b as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    fn observe(&mut self, path: &str, kind: LayerKind, input: Var, flops: u64) {
        let Some(prof) = self.profiler.as_mut() else {
            return;
        };
        let x = &self.nodes[input.0].value;
        let shape = x.shape();
        // Pooled `[B, D]` features count as a single timestep.
        let (t, b) = match *shape {
            [b, _] => (1, b),
            _ => (shape[0], shape[1]),
        };
        let spikes = x.sum();
        let integer = x.is_integer_valued();
        // Each Q (or V) spike in attention touches every token of the other operand.
        let realized = match kind {
            LayerKind::SsaScores | LayerKind::SsaWeighting => spikes * (shape[3] * shape[4]) as f64,
            _ => spikes,
        };
        prof.record(Observation {
            path,
            kind,
            charge: if integer { Charge::Ac } else { Charge::Mac },
            flops_per_step: flops,
            timesteps: t,
            samples: b,
            spikes,
            elements: x.numel() as u64,
            realized_sops: realized,
        });
    }

    /// Backpropagates from a scalar `loss`, seeding its gradient with `seed`.
    pub fn backward_with(&self, loss: Var, seed: f64) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::MissingForward(
                "loss variable is not on this tape".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![seed]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_with(loss, 1.0)
    }

    fn backward_node(
        &self,
        node: &Node,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) -> Result<()> {
        let mut send = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, d) in acc.iter_mut().zip(delta) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                out.add(*id, Tensor::new(node.value.shape().to_vec(), g)?);
            }
            Op::Conv { x, w, geom, n } => {
                if self.needs(*x) {
                    send(
                        *x,
                        kernels::conv2d_backward_input(&g, *n, geom, self.value(*w).data()),
                    );
                }
                if self.needs(*w) {
                    send(
                        *w,
                        kernels::conv2d_backward_weight(&g, self.value(*x).data(), *n, geom),
                    );
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                dims,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (dx, dgamma, dbeta) = norm::bn_backward(
                    &g,
                    xhat,
                    inv_std,
                    self.value(*gamma).data(),
                    *dims,
                    *batch_stats,
                );
                send(*x, dx);
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::Lif {
                x,
                params,
                h,
                neurons,
                detach_reset,
            } => {
                let mut dx = vec![0.0; g.len()];
                lif_scan_backward(
                    params,
                    h,
                    node.value.data(),
                    &g,
                    &mut dx,
                    *neurons,
                    *detach_reset,
                );
                send(*x, dx);
            }
            Op::MaxPool { x, arg } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (gi, &src) in g.iter().zip(arg) {
                    dx[src] += gi;
                }
                send(*x, dx);
            }
            Op::Add { a, b } => {
                send(*b, g.clone());
                send(*a, g);
            }
            Op::Or { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, g.iter().zip(bv).map(|(gi, y)| gi * (1.0 - y)).collect());
                send(*b, g.iter().zip(av).map(|(gi, x)| gi * (1.0 - x)).collect());
            }
            Op::ChannelSum { x, dims } => {
                let (outer, c, inner) = *dims;
                let mut dx = vec![0.0; outer * c * inner];
                for o in 0..outer {
                    for ch in 0..c {
                        dx[(o * c + ch) * inner..][..inner]
                            .copy_from_slice(&g[o * inner..][..inner]);
                    }
                }
                send(*x, dx);
            }
            Op::GateMul { gate, v, dims } => {
                let (outer, c, inner) = *dims;
                let (gv, vv) = (self.value(*gate).data(), self.value(*v).data());
                let mut dgate = vec![0.0; outer * inner];
                let mut dv = vec![0.0; vv.len()];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in 0..inner {
                            dgate[o * inner + i] += g[base + i] * vv[base + i];
                            dv[base + i] = g[base + i] * gv[o * inner + i];
                        }
                    }
                }
                send(*gate, dgate);
                send(*v, dv);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                dims,
            } => {
                let (outer, c, n) = *dims;
                let dh = c / heads;
                let (qv, kv, vv) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let mut a = vec![0.0; n * n];
                let mut da = vec![0.0; n * n];
                for o in 0..outer {
                    for head in 0..*heads {
                        attention_scores(qv, kv, o, head, dh, c, n, &mut a);
                        da.iter_mut().for_each(|x| *x = 0.0);
                        for d in head * dh..(head + 1) * dh {
                            let base = (o * c + d) * n;
                            let grow = &g[base..][..n];
                            let vrow = &vv[base..][..n];
                            for i in 0..n {
                                let gi = grow[i] * scale;
                                if gi == 0.0 {
                                    continue;
                                }
                                let darow = &mut da[i * n..][..n];
                                for (dj, vj) in darow.iter_mut().zip(vrow) {
                                    *dj += gi * vj;
                                }
                                let arow = &a[i * n..][..n];
                                for (dvj, aj) in dv[base..][..n].iter_mut().zip(arow) {
                                    *dvj += gi * aj;
                                }
                            }
                        }
                        for d in head * dh..(head + 1) * dh {
                            let base = (o * c + d) * n;
                            for i in 0..n {
                                let darow = &da[i * n..][..n];
                                let krow = &kv[base..][..n];
                                dq[base + i] += darow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>();
                                let qi = qv[base + i];
                                if qi != 0.0 {
                                    for (dkj, daj) in dk[base..][..n].iter_mut().zip(darow) {
                                        *dkj += daj * qi;
                                    }
                                }
                            }
                        }
                    }
                }
                send(*q, dq);
                send(*k, dk);
                send(*v, dv);
            }
            Op::MeanPool {
                x,
                t,
                b,
                c,
                inner,
            } => {
                let norm = 1.0 / (t * inner) as f64;
                let mut dx = vec![0.0; t * b * c * inner];
                for ti in 0..*t {
                    for bi in 0..*b {
                        for ch in 0..*c {
                            let gv = g[bi * c + ch] * norm;
                            let base = ((ti * b + bi) * c + ch) * inner;
                            dx[base..base + inner].iter_mut().for_each(|d| *d = gv);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Linear { x, w, bias } => {
                let &[b, d_in] = self.value(*x).shape() else {
                    unreachable!()
                };
                let d_out = self.value(*bias).numel();
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = vec![0.0; b * d_in];
                let mut dw = vec![0.0; d_out * d_in];
                let mut db = vec![0.0; d_out];
                for i in 0..b {
                    for j in 0..d_out {
                        let gij = g[i * d_out + j];
                        db[j] += gij;
                        for p in 0..d_in {
                            dx[i * d_in + p] += gij * wv[j * d_in + p];
                            dw[j * d_in + p] += gij * xv[i * d_in + p];
                        }
                    }
                }
                send(*x, dx);
                send(*w, dw);
                send(*bias, db);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let k = probs.len() / b;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= 1.0;
                }
                let factor = g[0] / b as f64;
                d.iter_mut().for_each(|v| *v *= factor);
                send(*logits, d);
            }
        }
        Ok(())
    }
}

/// `A[i][j] = sum_{d in head} Q[d][i] K[d][j]` for one `(t, b)` slice.
#[allow(clippy::too_many_arguments)]
fn attention_scores(
    q: &[f64],
    k: &[f64],
    o: usize,
    head: usize,
    dh: usize,
    c: usize,
    n: usize,
    a: &mut [f64],
) {
    a.iter_mut().for_each(|x| *x = 0.0);
    for d in head * dh..(head + 1) * dh {
        let base = (o * c + d) * n;
        let qrow = &q[base..][..n];
        let krow = &k[base..][..n];
        for (i, &qi) in qrow.iter().enumerate() {
            if qi == 0.0 {
                continue;
            }
            let arow = &mut a[i * n..][..n];
            for (aij, kj) in arow.iter_mut().zip(krow) {
                *aij += qi * kj;
            }
        }
    }
}
