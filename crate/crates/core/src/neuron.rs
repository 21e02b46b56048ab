//! Leaky integrate-and-fire neurons with hard reset.
//!
//! Per timestep:
//!
//! ```text
//! H[t] = V[t-1] + (X[t] - (V[t-1] - V_reset)) / tau
//! S[t] = H[t] >= V_th
//! V[t] = H[t] * (1 - S[t]) + V_reset * S[t]
//! ```
//!
//! Backward passes replace dS/dH with the derivative of an arctangent
//! surrogate and treat the reset's dependence on `S` as constant.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Layout, SpikeTensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LifParams {
    pub tau: f64,
    pub v_th: f64,
    pub v_reset: f64,
    pub surrogate_alpha: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            tau: 2.0,
            v_th: 1.0,
            v_reset: 0.0,
            surrogate_alpha: 2.0,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.tau.is_finite() && self.tau > 0.0) {
            errs.push(format!("lif.tau must be positive, got {}", self.tau));
        }
        if !(self.v_th.is_finite() && self.v_reset.is_finite() && self.v_th > self.v_reset) {
            errs.push(format!(
                "lif.v_th ({}) must exceed lif.v_reset ({})",
                self.v_th, self.v_reset
            ));
        }
        if !(self.surrogate_alpha.is_finite() && self.surrogate_alpha > 0.0) {
            errs.push(format!(
                "lif.surrogate_alpha must be positive, got {}",
                self.surrogate_alpha
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Smooth stand-in for the Heaviside step, centered on the threshold.
    pub fn surrogate(&self, h: f64) -> f64 {
        (PI * self.surrogate_alpha * (h - self.v_th) / 2.0).atan() / PI + 0.5
    }

    /// Derivative of [`LifParams::surrogate`]: `alpha / (2 (1 + (pi alpha x / 2)^2))`.
    pub fn surrogate_grad(&self, h: f64) -> f64 {
        let a = self.surrogate_alpha;
        let z = PI * a * (h - self.v_th) / 2.0;
        a / (2.0 * (1.0 + z * z))
    }
}

/// Saved pre-threshold membrane `H` and emitted spikes, `(T, neurons)`.
#[derive(Debug, Clone, Default)]
pub struct LifTrace {
    pub h: Vec<f64>,
    pub s: Vec<f64>,
    pub steps: usize,
}

/// Membrane state carried across calls to [`lif_forward`].
#[derive(Debug, Clone)]
pub struct LifState {
    pub v: Tensor,
    pub step: usize,
    trace: Option<LifTrace>,
}

impl LifState {
    /// All neurons start at `v_reset`. `neuron_shape` excludes the time axis.
    pub fn new(params: &LifParams, neuron_shape: &[usize]) -> Self {
        Self {
            v: Tensor::full(neuron_shape, params.v_reset),
            step: 0,
            trace: Some(LifTrace::default()),
        }
    }

    /// Same as [`LifState::new`] but without recording a backward trace.
    pub fn untraced(params: &LifParams, neuron_shape: &[usize]) -> Self {
        Self {
            trace: None,
            ..Self::new(params, neuron_shape)
        }
    }

    pub fn trace(&self) -> Option<&LifTrace> {
        self.trace.as_ref()
    }
}

/// Runs `T` timesteps over a `[T, neurons]` current buffer.
///
/// `spikes` receives `S[t]`; `h_out`, when given, receives `H[t]`. In
/// smoothed mode `S[t]` is the surrogate primitive instead of the step.
pub(crate) fn lif_scan(
    params: &LifParams,
    current: &[f64],
    v: &mut [f64],
    spikes: &mut [f64],
    mut h_out: Option<&mut [f64]>,
    smoothed: bool,
) {
    let m = v.len();
    if m == 0 {
        return;
    }
    let inv_tau = 1.0 / params.tau;
    let vr = params.v_reset;
    for (t, (x_t, s_t)) in current.chunks_exact(m).zip(spikes.chunks_exact_mut(m)).enumerate() {
        for i in 0..m {
            let h = v[i] + inv_tau * (x_t[i] - (v[i] - vr));
            let s = if smoothed {
                params.surrogate(h)
            } else if h >= params.v_th {
                1.0
            } else {
                0.0
            };
            s_t[i] = s;
            v[i] = h * (1.0 - s) + vr * s;
            if let Some(ho) = h_out.as_deref_mut() {
                ho[t * m + i] = h;
            }
        }
    }
}

/// Backpropagates through `T` LIF steps.
///
/// Returns dL/dX given dL/dS. With `detach_reset` the reset's dependence on
/// `S` is treated as constant; otherwise the exact derivative of the forward
/// is used (needed to verify smoothed mode against finite differences).
pub(crate) fn lif_scan_backward(
    params: &LifParams,
    h: &[f64],
    s: &[f64],
    grad_s: &[f64],
    grad_x: &mut [f64],
    m: usize,
    detach_reset: bool,
) {
    if m == 0 {
        return;
    }
    let steps = h.len() / m;
    let inv_tau = 1.0 / params.tau;
    let mut grad_v = vec![0.0; m];
    for t in (0..steps).rev() {
        let off = t * m;
        for i in 0..m {
            let ht = h[off + i];
            let st = s[off + i];
            let sg = params.surrogate_grad(ht);
            let mut dv_dh = 1.0 - st;
            if !detach_reset {
                dv_dh += (params.v_reset - ht) * sg;
            }
            let gh = grad_s[off + i] * sg + grad_v[i] * dv_dh;
            grad_x[off + i] = gh * inv_tau;
            grad_v[i] = gh * (1.0 - inv_tau);
        }
    }
}

fn layout_for_rank(rank: usize) -> Result<Layout> {
    match rank {
        4 => Ok(Layout::Token),
        5 => Ok(Layout::Image),
        r => Err(Error::shape(format!(
            "LIF input must be token-form (rank 4) or image-form (rank 5), got rank {r}"
        ))),
    }
}

/// Drives the neurons in `state` with `current` (leading axis = time).
pub fn lif_forward(
    current: &Tensor,
    params: &LifParams,
    state: &mut LifState,
) -> Result<SpikeTensor> {
    params.validate()?;
    let layout = layout_for_rank(current.shape().len())?;
    current.check_finite("LIF input current")?;
    if current.shape()[1..] != *state.v.shape() {
        return Err(Error::shape(format!(
            "current {:?} does not match neuron state {:?}",
            current.shape(),
            state.v.shape()
        )));
    }
    let steps = current.shape()[0];
    let m = state.v.numel();
    let mut spikes = vec![0.0; current.numel()];
    let mut h = vec![0.0; current.numel()];
    lif_scan(
        params,
        current.data(),
        state.v.data_mut(),
        &mut spikes,
        Some(&mut h),
        false,
    );
    state.step += steps;
    if let Some(trace) = state.trace.as_mut() {
        trace.h.extend_from_slice(&h);
        trace.s.extend_from_slice(&spikes);
        trace.steps += steps;
    }
    debug_assert_eq!(spikes.len(), steps * m);
    SpikeTensor::new(
        current.shape().to_vec(),
        spikes.into_iter().map(|v| v as u8).collect(),
        layout,
    )
}

/// Gradient of the loss with respect to the input current of every step
/// recorded in `state`, given the gradient with respect to the spikes.
pub fn lif_surrogate_backward(
    grad_out: &Tensor,
    state: &LifState,
    params: &LifParams,
) -> Result<Tensor> {
    let trace = state
        .trace
        .as_ref()
        .filter(|t| t.steps > 0)
        .ok_or_else(|| Error::MissingForward("LIF state holds no saved membrane trace".into()))?;
    if grad_out.numel() != trace.h.len() {
        return Err(Error::shape(format!(
            "gradient {:?} does not cover the {} recorded steps",
            grad_out.shape(),
            trace.steps
        )));
    }
    let mut grad_x = vec![0.0; trace.h.len()];
    lif_scan_backward(
        params,
        &trace.h,
        &trace.s,
        grad_out.data(),
        &mut grad_x,
        state.v.numel(),
        true,
    );
    Tensor::new(grad_out.shape().to_vec(), grad_x)
}
