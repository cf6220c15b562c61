//! Python bindings for the editing pipeline.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use i2v_core::injection::{FeatureKind, InjectionPlan};
use i2v_core::media::{self, FrameSequence, PatchCodec};
use i2v_core::metrics::{self, PatchEmbedder};
use i2v_core::pipeline::{self, EditRequest, Pipeline, SourceTrajectory};
use i2v_core::scheduler::{self, NoiseSchedule};
use i2v_core::unet::{NoHooks, UNet, UNetConfig};
use i2v_core::{Error, Tensor, VideoLatent};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        e if e.is_usage() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Dense row-major float64 array.
#[pyclass(name = "Tensor", module = "i2v_edit", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTensor(Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(dims: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Tensor::new(dims, data).map(Self).map_err(value_err)
    }

    #[staticmethod]
    fn zeros(dims: Vec<usize>) -> Self {
        Self(Tensor::zeros(&dims))
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.0.dims().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn l2_norm(&self) -> f64 {
        self.0.l2_norm()
    }

    fn max_abs_diff(&self, other: PyRef<'_, PyTensor>) -> f64 {
        self.0.max_abs_diff(&other.0)
    }

    fn bitwise_eq(&self, other: PyRef<'_, PyTensor>) -> bool {
        self.0.bitwise_eq(&other.0)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(dims={:?})", self.0.dims())
    }
}

/// Video latent of shape `[F, C, H, W]`.
#[pyclass(name = "VideoLatent", module = "i2v_edit", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyVideoLatent(VideoLatent);

#[pymethods]
impl PyVideoLatent {
    #[new]
    fn new(tensor: PyRef<'_, PyTensor>) -> PyResult<Self> {
        VideoLatent::new(tensor.0.clone()).map(Self).map_err(py_err)
    }

    #[getter]
    fn frames(&self) -> usize {
        self.0.frames()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.0.channels()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    fn frame(&self, i: usize) -> PyResult<PyTensor> {
        if i >= self.0.frames() {
            return Err(value_err(format!(
                "frame {i} out of range for {} frames",
                self.0.frames()
            )));
        }
        Ok(PyTensor(self.0.frame(i)))
    }

    fn tensor(&self) -> PyTensor {
        PyTensor(self.0.as_tensor().clone())
    }

    fn relative_error(&self, reference: PyRef<'_, PyVideoLatent>) -> PyResult<f64> {
        self.0.relative_error(&reference.0).map_err(py_err)
    }

    fn bitwise_eq(&self, other: PyRef<'_, PyVideoLatent>) -> bool {
        self.0.bitwise_eq(&other.0)
    }

    fn __repr__(&self) -> String {
        format!("VideoLatent(dims={:?})", self.0.dims())
    }
}

#[pyclass(name = "NoiseSchedule", module = "i2v_edit", frozen)]
struct PyNoiseSchedule(NoiseSchedule);

#[pymethods]
impl PyNoiseSchedule {
    #[new]
    #[pyo3(signature = (steps = 50, t_train = 1000, beta_start = 0.00085, beta_end = 0.012))]
    fn new(steps: usize, t_train: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        NoiseSchedule::new(t_train, beta_start, beta_end, steps)
            .map(Self)
            .map_err(py_err)
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.steps()
    }

    fn alpha_bar_at(&self, t: i64) -> PyResult<f64> {
        self.0.alpha_bar_at(t).map_err(py_err)
    }

    fn ladder_timestep(&self, k: usize) -> PyResult<i64> {
        if k > self.0.steps() {
            return Err(value_err(format!("rung {k} beyond T = {}", self.0.steps())));
        }
        Ok(self.0.ladder_timestep(k))
    }
}

#[pyfunction]
fn ddim_denoise_step(
    z_t: PyRef<'_, PyVideoLatent>,
    eps: PyRef<'_, PyVideoLatent>,
    t: i64,
    t_prev: i64,
    schedule: PyRef<'_, PyNoiseSchedule>,
) -> PyResult<PyVideoLatent> {
    scheduler::ddim_denoise_step(&z_t.0, &eps.0, t, t_prev, &schedule.0)
        .map(PyVideoLatent)
        .map_err(py_err)
}

#[pyfunction]
fn ddim_invert_step(
    z_t: PyRef<'_, PyVideoLatent>,
    eps: PyRef<'_, PyVideoLatent>,
    t: i64,
    t_next: i64,
    schedule: PyRef<'_, PyNoiseSchedule>,
) -> PyResult<PyVideoLatent> {
    scheduler::ddim_invert_step(&z_t.0, &eps.0, t, t_next, &schedule.0)
        .map(PyVideoLatent)
        .map_err(py_err)
}

/// Seeded toy denoiser.
#[pyclass(name = "UNet", module = "i2v_edit", frozen)]
struct PyUNet(UNet);

#[pymethods]
impl PyUNet {
    #[new]
    #[pyo3(signature = (latent_channels = 16, seed = 0, small = false))]
    fn new(latent_channels: usize, seed: u64, small: bool) -> PyResult<Self> {
        let base = if small {
            UNetConfig::small()
        } else {
            UNetConfig::default()
        };
        let config = UNetConfig {
            latent_channels,
            seed,
            ..base
        };
        UNet::new(config).map(Self).map_err(py_err)
    }

    #[getter]
    fn decoder_layer_count(&self) -> usize {
        self.0.config().decoder_layer_count
    }

    /// Noise prediction for `z_t` at timestep `t`.
    #[pyo3(signature = (z_t, first_frame, t, prompt = ""))]
    fn forward(
        &self,
        z_t: PyRef<'_, PyVideoLatent>,
        first_frame: PyRef<'_, PyTensor>,
        t: i64,
        prompt: &str,
    ) -> PyResult<PyVideoLatent> {
        let cond = self.0.conditioning(first_frame.0.clone(), prompt);
        self.0
            .forward(&z_t.0, &cond, t, &mut NoHooks)
            .map(PyVideoLatent)
            .map_err(py_err)
    }
}

/// Which layers and steps receive cached source features.
#[pyclass(name = "InjectionPlan", module = "i2v_edit", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyInjectionPlan(InjectionPlan);

fn parse_kind(kind: &str) -> PyResult<FeatureKind> {
    kind.parse().map_err(py_err)
}

#[pymethods]
impl PyInjectionPlan {
    #[new]
    #[pyo3(signature = (steps = 50, tau_conv = None, tau_sa = None, tau_ta = None, conv_layers = None, spatial_layers = None, temporal_layers = None))]
    fn new(
        steps: usize,
        tau_conv: Option<f64>,
        tau_sa: Option<f64>,
        tau_ta: Option<f64>,
        conv_layers: Option<Vec<usize>>,
        spatial_layers: Option<Vec<usize>>,
        temporal_layers: Option<Vec<usize>>,
    ) -> Self {
        let mut plan = InjectionPlan::with_steps(steps);
        plan.tau_conv = tau_conv.unwrap_or(plan.tau_conv);
        plan.tau_sa = tau_sa.unwrap_or(plan.tau_sa);
        plan.tau_ta = tau_ta.unwrap_or(plan.tau_ta);
        if let Some(l) = conv_layers {
            plan.conv_layers = l.into_iter().collect();
        }
        if let Some(l) = spatial_layers {
            plan.spatial_layers = l.into_iter().collect();
        }
        if let Some(l) = temporal_layers {
            plan.temporal_layers = l.into_iter().collect();
        }
        Self(plan)
    }

    fn disabled(&self) -> Self {
        Self(self.0.disabled())
    }

    fn remap_layers(&self, from: usize, to: usize) -> Self {
        Self(self.0.remap_layers(from, to))
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.steps
    }

    fn active_steps(&self, kind: &str) -> PyResult<usize> {
        Ok(self.0.active_steps(parse_kind(kind)?))
    }

    fn should_inject(&self, kind: &str, layer: usize, step: usize) -> PyResult<bool> {
        Ok(self.0.should_inject(parse_kind(kind)?, layer, step))
    }

    fn expected_entries(&self) -> usize {
        self.0.expected_entries()
    }
}

/// Orthogonal patch projection between pixel frames and latents.
#[pyclass(name = "PatchCodec", module = "i2v_edit", frozen)]
struct PyPatchCodec(PatchCodec);

#[pymethods]
impl PyPatchCodec {
    #[new]
    #[pyo3(signature = (patch = 8, seed = 0))]
    fn new(patch: usize, seed: u64) -> PyResult<Self> {
        PatchCodec::new(patch, seed).map(Self).map_err(py_err)
    }

    #[getter]
    fn latent_channels(&self) -> usize {
        self.0.latent_channels()
    }

    fn encode_frame(&self, frame: PyRef<'_, PyTensor>) -> PyResult<PyTensor> {
        self.0.encode_frame(&frame.0).map(PyTensor).map_err(py_err)
    }

    fn encode_video(&self, frames: Vec<PyRef<'_, PyTensor>>) -> PyResult<PyVideoLatent> {
        let fs = frame_sequence(frames)?;
        self.0.encode_video(&fs).map(PyVideoLatent).map_err(py_err)
    }

    fn decode_video(&self, latent: PyRef<'_, PyVideoLatent>) -> PyResult<Vec<PyTensor>> {
        let fs = self.0.decode_video(&latent.0).map_err(py_err)?;
        Ok(fs.frames().iter().cloned().map(PyTensor).collect())
    }
}

fn frame_sequence(frames: Vec<PyRef<'_, PyTensor>>) -> PyResult<FrameSequence> {
    FrameSequence::new(frames.iter().map(|f| f.0.clone()).collect()).map_err(value_err)
}

/// Result of a full invert, reconstruct and edit run.
#[pyclass(name = "EditResult", module = "i2v_edit", frozen, get_all)]
struct PyEditResult {
    edited: PyVideoLatent,
    reconstruction: PyVideoLatent,
    start_step: usize,
    cache_entries: usize,
    checked_sites: usize,
    mismatched_sites: usize,
    trajectory_distance: f64,
}

#[pyfunction]
#[pyo3(signature = (model, schedule, source, edited_first_frame, prompt, negative_prompt = None, guidance_scale = pipeline::DEFAULT_GUIDANCE_SCALE, t_prime_fraction = 1.0, plan = None, source_trajectory = "self"))]
#[allow(clippy::too_many_arguments)]
fn edit(
    py: Python<'_>,
    model: PyRef<'_, PyUNet>,
    schedule: PyRef<'_, PyNoiseSchedule>,
    source: PyRef<'_, PyVideoLatent>,
    edited_first_frame: PyRef<'_, PyTensor>,
    prompt: &str,
    negative_prompt: Option<String>,
    guidance_scale: f64,
    t_prime_fraction: f64,
    plan: Option<PyRef<'_, PyInjectionPlan>>,
    source_trajectory: &str,
) -> PyResult<PyEditResult> {
    let mode: SourceTrajectory = source_trajectory.parse().map_err(py_err)?;
    let mut req = EditRequest::new(source.0.clone(), edited_first_frame.0.clone(), prompt);
    if let Some(n) = negative_prompt {
        req.negative_prompt = n;
    }
    req.guidance_scale = guidance_scale;
    req.t_prime_fraction = t_prime_fraction;
    req.plan = match plan {
        Some(p) => p.0.clone(),
        None => InjectionPlan::with_steps(schedule.0.steps()),
    };
    let (model, schedule) = (&model.0, &schedule.0);
    let run = py
        .detach(|| Pipeline::new(model, schedule).with_source_mode(mode).run(&req))
        .map_err(py_err)?;
    let trajectory_distance = run.edit.trajectory_distance(&run.source).map_err(py_err)?;
    Ok(PyEditResult {
        start_step: run.edit.start_step,
        cache_entries: run.cache.len(),
        checked_sites: run.edit.probe.total_checked(),
        mismatched_sites: run.edit.probe.mismatches.len(),
        trajectory_distance,
        edited: PyVideoLatent(run.edit.latent),
        reconstruction: PyVideoLatent(run.source.latent),
    })
}

/// Inverts `source` and denoises it back without editing.
#[pyfunction]
fn reconstruct(
    py: Python<'_>,
    model: PyRef<'_, PyUNet>,
    schedule: PyRef<'_, PyNoiseSchedule>,
    source: PyRef<'_, PyVideoLatent>,
) -> PyResult<PyVideoLatent> {
    let (model, schedule, source) = (&model.0, &schedule.0, &source.0);
    py.detach(|| {
        let mut p = Pipeline::new(model, schedule);
        let inv = p.invert_video(source, &source.frame(0))?;
        p.reconstruct(&inv, None)
    })
    .map(|r| PyVideoLatent(r.latent))
    .map_err(py_err)
}

/// Mean cosine similarity of consecutive frames under the built-in embedder.
#[pyfunction]
fn frame_consistency(frames: Vec<PyRef<'_, PyTensor>>) -> PyResult<f64> {
    let fs = frame_sequence(frames)?;
    metrics::frame_consistency(&fs, &PatchEmbedder::default()).map_err(py_err)
}

#[pyfunction]
fn write_tensor(path: PathBuf, tensor: PyRef<'_, PyTensor>) -> PyResult<()> {
    media::write_tensor(&path, &tensor.0).map_err(py_err)
}

#[pyfunction]
fn read_tensor(path: PathBuf) -> PyResult<PyTensor> {
    media::read_tensor(&path).map(PyTensor).map_err(py_err)
}

#[pyfunction]
fn encode_tensor(tensor: PyRef<'_, PyTensor>) -> Vec<u8> {
    media::encode_tensor(&tensor.0)
}

#[pyfunction]
fn decode_tensor(bytes: Vec<u8>) -> PyResult<PyTensor> {
    media::decode_tensor(&bytes).map(PyTensor).map_err(value_err)
}

#[pymodule]
fn i2v_edit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyVideoLatent>()?;
    m.add_class::<PyNoiseSchedule>()?;
    m.add_class::<PyUNet>()?;
    m.add_class::<PyInjectionPlan>()?;
    m.add_class::<PyPatchCodec>()?;
    m.add_class::<PyEditResult>()?;
    m.add_function(wrap_pyfunction!(ddim_denoise_step, m)?)?;
    m.add_function(wrap_pyfunction!(ddim_invert_step, m)?)?;
    m.add_function(wrap_pyfunction!(edit, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(frame_consistency, m)?)?;
    m.add_function(wrap_pyfunction!(write_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(read_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(encode_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(decode_tensor, m)?)?;
    m.add("DEFAULT_NEGATIVE_PROMPT", pipeline::DEFAULT_NEGATIVE_PROMPT)?;
    Ok(())
}
