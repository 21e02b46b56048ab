//! Conv + batch-norm (+ LIF) units shared by every block.

use rand::Rng;

use crate::autograd::{EdgeKind, Tape, Var};
use crate::energy::LayerDesc;
use crate::error::Result;
use crate::neuron::LifParams;
use crate::params::{BufferId, ParamId, ParamStore};
use crate::tensor::Tensor;

/// One row of the static per-layer cost table.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRow {
    pub path: String,
    pub desc: LayerDesc,
    pub params: usize,
}

/// Convolution without bias followed by batch norm.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub path: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        path: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let weight = store.add_fan_in_normal(
            format!("{path}.weight"),
            &[c_out, c_in, kernel, kernel],
            c_in * kernel * kernel,
            rng,
        );
        let gamma = store.add_param(format!("{path}.bn.gamma"), Tensor::full(&[c_out], 1.0));
        let beta = store.add_param(format!("{path}.bn.beta"), Tensor::zeros(&[c_out]));
        let running_mean =
            store.add_buffer(format!("{path}.bn.running_mean"), Tensor::zeros(&[c_out]));
        let running_var =
            store.add_buffer(format!("{path}.bn.running_var"), Tensor::full(&[c_out], 1.0));
        Self {
            path: path.to_string(),
            c_in,
            c_out,
            kernel,
            stride,
            pad,
            weight,
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.conv2d(&self.path, x, w, self.stride, self.pad)?;
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        tape.batch_norm(y, gamma, beta, (self.running_mean, self.running_var), store)
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bn_params(&self) -> (ParamId, ParamId) {
        (self.gamma, self.beta)
    }

    pub fn param_count(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel + 2 * self.c_out
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn describe(&self, h: usize, w: usize, rows: &mut Vec<LayerRow>) {
        let (h_out, w_out) = self.out_size(h, w);
        rows.push(LayerRow {
            path: self.path.clone(),
            desc: LayerDesc::Conv {
                kernel: self.kernel,
                c_in: self.c_in,
                c_out: self.c_out,
                h_out,
                w_out,
            },
            params: self.param_count(),
        });
    }
}

/// `SN(BN(conv(x)))`.
#[derive(Debug, Clone)]
pub struct ConvBnLif {
    pub conv: ConvBn,
    pub lif: LifParams,
}

impl ConvBnLif {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        path: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        lif: LifParams,
    ) -> Self {
        Self {
            conv: ConvBn::new(store, rng, path, c_in, c_out, kernel, stride, pad),
            lif,
        }
    }

    /// Pointwise (1x1, stride 1) unit; acts as a per-token linear map.
    pub fn pointwise<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        path: &str,
        c_in: usize,
        c_out: usize,
        lif: LifParams,
    ) -> Self {
        Self::new(store, rng, path, c_in, c_out, 1, 1, 0, lif)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        let s = tape.lif(y, &self.lif)?;
        tape.audit_edge(&format!("{}.spikes", self.conv.path), s, EdgeKind::Spike);
        Ok(s)
    }

    pub fn path(&self) -> &str {
        &self.conv.path
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
    }

    pub fn describe(&self, h: usize, w: usize, rows: &mut Vec<LayerRow>) {
        self.conv.describe(h, w, rows);
    }
}
