//! Python bindings. Tensors cross the boundary as flat lists plus a shape.

use std::path::PathBuf;

use msvit_core::attention::mssa_attend;
use msvit_core::checkpoint::{load_checkpoint, save_checkpoint};
use msvit_core::config::{profile, profile_names};
use msvit_core::data::{events_to_frames, synth_events, Event, EventStream, SynthClass};
use msvit_core::energy::{compute_energy, Charge, EnergyInput, LayerKind};
use msvit_core::model::{build_model, Model, ModelConfig};
use msvit_core::neuron::{lif_forward, LifParams, LifState};
use msvit_core::tensor::{Layout, SpikeTensor, Tensor};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: msvit_core::Error) -> PyErr {
    match e {
        msvit_core::Error::Config(_)
        | msvit_core::Error::Shape(_)
        | msvit_core::Error::InvalidValue(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn tensor(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(err)
}

fn spikes(data: &[u32], shape: &[usize]) -> PyResult<SpikeTensor> {
    let bytes = data
        .iter()
        .map(|&v| u8::try_from(v).map_err(|_| PyValueError::new_err("spike value out of range")))
        .collect::<PyResult<Vec<u8>>>()?;
    SpikeTensor::new(shape.to_vec(), bytes, Layout::Token).map_err(err)
}

/// Model hyperparameters; see the TOML profiles for the fields.
#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    /// A named profile shipped with the library.
    #[staticmethod]
    fn profile(name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: profile(name).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ModelConfig::from_toml(text).map_err(err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn timesteps(&self) -> usize {
        self.inner.timesteps
    }

    #[setter]
    fn set_timesteps(&mut self, t: usize) {
        self.inner.timesteps = t;
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims
    }

    #[getter]
    fn depths(&self) -> [usize; 3] {
        self.inner.depths
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        (self.inner.in_channels, self.inner.height, self.inner.width)
    }

    /// Per stage: `(dim, depth, attention, tokens)`.
    fn stages(&self) -> Vec<(usize, usize, String, usize)> {
        self.inner
            .stages()
            .iter()
            .map(|s| {
                let kind = match s.attention {
                    msvit_core::model::AttentionKind::Mssa => "mssa",
                    msvit_core::model::AttentionKind::Ssa => "ssa",
                };
                (s.dim, s.depth, kind.to_string(), s.tokens)
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelConfig(name={:?}, dims={:?}, depths={:?}, T={})",
            self.inner.name, self.inner.dims, self.inner.depths, self.inner.timesteps
        )
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// Builds a freshly initialized model; equal configs give equal weights.
    #[new]
    fn new(config: &PyModelConfig) -> PyResult<Self> {
        Ok(Self {
            inner: build_model(&config.inner).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path, None).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.inner.config().clone(),
        }
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Content hash of the weights.
    fn hash(&self) -> String {
        self.inner.hash()
    }

    /// Inference-mode logits for `[B, C, H, W]` images or `[T, B, C, H, W]`
    /// frames; returns a flat `[B, classes]` list.
    fn logits(&self, data: Vec<f64>, shape: Vec<usize>) -> PyResult<Vec<f64>> {
        let x = tensor(data, shape)?;
        Ok(self.inner.logits(&x).map_err(err)?.into_data())
    }

    /// `(path, kind, flops_per_step, params)` per layer.
    fn layer_table(&self) -> Vec<(String, String, u64, usize)> {
        self.inner
            .layer_table()
            .into_iter()
            .map(|r| {
                let kind = format!("{:?}", r.desc);
                let kind = kind.split([' ', '{']).next().unwrap_or_default().to_string();
                (r.path, kind, msvit_core::energy::count_flops(&r.desc), r.params)
            })
            .collect()
    }
}

/// Spikes of a hard-reset LIF population driven by `currents` of shape
/// `[T, B, N, D]` or `[T, B, C, H, W]`.
#[pyfunction]
#[pyo3(signature = (currents, shape, tau=2.0, v_th=1.0, v_reset=0.0))]
fn lif(currents: Vec<f64>, shape: Vec<usize>, tau: f64, v_th: f64, v_reset: f64) -> PyResult<Vec<u32>> {
    let params = LifParams {
        tau,
        v_th,
        v_reset,
        ..LifParams::default()
    };
    let x = tensor(currents, shape)?;
    let mut state = LifState::untraced(&params, &x.shape()[1..]);
    let s = lif_forward(&x, &params, &mut state).map_err(err)?;
    Ok(s.data().iter().map(|&v| u32::from(v)).collect())
}

/// MSSA gating on precomputed `[T, B, N, D]` branch and `V` spikes.
#[pyfunction]
fn mssa_gate(branches: Vec<Vec<u32>>, v: Vec<u32>, shape: Vec<usize>) -> PyResult<Vec<u32>> {
    let bs = branches
        .iter()
        .map(|b| spikes(b, &shape))
        .collect::<PyResult<Vec<_>>>()?;
    let refs: Vec<&SpikeTensor> = bs.iter().collect();
    let out = mssa_attend(&refs, &spikes(&v, &shape)?, &LifParams::default()).map_err(err)?;
    Ok(out.data().iter().map(|&v| u32::from(v)).collect())
}

/// Energy of a list of layers, each a dict with `flops`, `timesteps`,
/// `charge` (`"ac"` or `"mac"`), and `firing_rate` for `"ac"` layers.
#[pyfunction]
fn energy<'py>(py: Python<'py>, layers: Vec<Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyDict>> {
    let mut inputs = Vec::new();
    for (i, l) in layers.iter().enumerate() {
        let get = |k: &str| -> PyResult<Bound<'py, PyAny>> {
            l.get_item(k)?
                .ok_or_else(|| PyValueError::new_err(format!("layer {i} lacks `{k}`")))
        };
        let charge = match get("charge")?.extract::<String>()?.as_str() {
            "ac" => Charge::Ac,
            "mac" => Charge::Mac,
            other => return Err(PyValueError::new_err(format!("unknown charge `{other}`"))),
        };
        let firing_rate = match l.get_item("firing_rate")? {
            Some(v) if !v.is_none() => Some(v.extract::<f64>()?),
            _ => None,
        };
        inputs.push(EnergyInput {
            path: format!("layer{i}"),
            kind: LayerKind::Linear,
            charge,
            flops: get("flops")?.extract()?,
            timesteps: get("timesteps")?.extract()?,
            firing_rate,
        });
    }
    let r = compute_energy(&inputs).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("total_pj", r.total_pj)?;
    d.set_item("ac_energy_pj", r.ac_energy_pj)?;
    d.set_item("mac_energy_pj", r.mac_energy_pj)?;
    d.set_item("total_sops", r.total_sops)?;
    d.set_item("total_flops", r.total_flops)?;
    d.set_item("ann_equivalent_pj", r.ann_equivalent_pj)?;
    Ok(d)
}

type EventTuple = (u64, u16, u16, u8);

/// Synthetic stream of class `class_index` (0..6) as `(t, x, y, p)` tuples,
/// with the sensor size.
#[pyfunction]
fn synth_stream(class_index: usize, seed: u64) -> PyResult<(Vec<EventTuple>, usize, usize)> {
    let class = *SynthClass::ALL
        .get(class_index)
        .ok_or_else(|| PyValueError::new_err(format!("class {class_index} is not in 0..6")))?;
    let s = synth_events(class, seed);
    let events = s.events.iter().map(|e| (e.t, e.x, e.y, e.p)).collect();
    Ok((events, s.width, s.height))
}

/// `[T, 2, H, W]` presence frames, flattened.
#[pyfunction]
fn frames(
    events: Vec<EventTuple>,
    width: usize,
    height: usize,
    t: usize,
    h: usize,
    w: usize,
) -> PyResult<Vec<f64>> {
    let stream = EventStream {
        width,
        height,
        events: events
            .into_iter()
            .map(|(t, x, y, p)| Event { t, x, y, p })
            .collect(),
    };
    Ok(events_to_frames(&stream, t, h, w).map_err(err)?.into_data())
}

#[pyfunction(name = "profile_names")]
fn names() -> Vec<&'static str> {
    profile_names().collect()
}

#[pymodule]
fn msvit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(names, m)?)?;
    m.add_function(wrap_pyfunction!(lif, m)?)?;
    m.add_function(wrap_pyfunction!(mssa_gate, m)?)?;
    m.add_function(wrap_pyfunction!(energy, m)?)?;
    m.add_function(wrap_pyfunction!(synth_stream, m)?)?;
    m.add_function(wrap_pyfunction!(frames, m)?)?;
    Ok(())
}
