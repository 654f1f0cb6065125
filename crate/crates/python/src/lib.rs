//! Python module `kspace`.
//!
//! Grids cross the boundary as flat row-major lists of floats; complex grids
//! as `(re, im)` pairs of such lists.

use std::path::PathBuf;

use kspace_core::bench::{analytic_cost_hier, analytic_cost_standard};
use kspace_core::data::{generate_phantom, PhantomSample};
use kspace_core::eval::{evaluate, reconstruct};
use kspace_core::fourier::{fft2_centered, ifft2_centered, ComplexGrid};
use kspace_core::io::{load_mask, load_sample, save_mask, save_sample, Checkpoint, RunConfig};
use kspace_core::metrics;
use kspace_core::model::init_params;
use kspace_core::sampling::{self, MaskKind, MaskSpec};
use kspace_core::train::{AdamState, TrainState, Trainer};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Pair = (Vec<f64>, Vec<f64>);

fn err(e: kspace_core::Error) -> PyErr {
    match e {
        kspace_core::Error::Io { .. } | kspace_core::Error::NonFiniteLoss { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn grid(re: Vec<f64>, im: Vec<f64>, height: usize, width: usize) -> PyResult<ComplexGrid<f64>> {
    ComplexGrid::new(height, width, re, im).map_err(err)
}

fn pair<T: kspace_core::Real>(g: &ComplexGrid<T>) -> Pair {
    let g = g.cast::<f64>();
    (g.re().to_vec(), g.im().to_vec())
}

/// Centered orthonormal 2D FFT.
#[pyfunction]
fn fft2(re: Vec<f64>, im: Vec<f64>, height: usize, width: usize) -> PyResult<Pair> {
    Ok(pair(&fft2_centered(&grid(re, im, height, width)?).map_err(err)?))
}

/// Centered orthonormal 2D inverse FFT.
#[pyfunction]
fn ifft2(re: Vec<f64>, im: Vec<f64>, height: usize, width: usize) -> PyResult<Pair> {
    Ok(pair(&ifft2_centered(&grid(re, im, height, width)?).map_err(err)?))
}

/// PSNR in dB with the reference maximum as peak; `inf` for identical inputs.
#[pyfunction]
fn psnr(x: Vec<f64>, reference: Vec<f64>) -> PyResult<f64> {
    metrics::psnr(&x, &reference).map_err(err)
}

/// Gaussian-window SSIM over valid 11x11 windows.
#[pyfunction]
fn ssim(x: Vec<f64>, reference: Vec<f64>, height: usize, width: usize) -> PyResult<f64> {
    metrics::ssim(&x, &reference, height, width).map_err(err)
}

/// Multiply-add counts of the score matrices for both decoder designs.
#[pyfunction]
#[pyo3(signature = (m, n, l, d, lr_layers, hr_layers, standard_layers))]
fn attention_cost<'py>(
    py: Python<'py>,
    m: usize,
    n: usize,
    l: usize,
    d: usize,
    lr_layers: usize,
    hr_layers: usize,
    standard_layers: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let h = analytic_cost_hier(m, n, l, d, lr_layers, hr_layers).map_err(err)?;
    let s = analytic_cost_standard(m, n, d, standard_layers).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("hierarchical", h.total())?;
    out.set_item("standard", s.total())?;
    out.set_item("hierarchical_peak", h.per_layer_peak)?;
    out.set_item("standard_peak", s.per_layer_peak)?;
    Ok(out)
}

/// Binary k-space sampling mask.
#[pyclass(name = "Mask", module = "kspace", frozen)]
struct PyMask(sampling::Mask);

#[pymethods]
impl PyMask {
    /// Equispaced column mask with a fully sampled center band.
    #[staticmethod]
    #[pyo3(signature = (height, width, acceleration, center_fraction=None, offset=0))]
    fn uniform(height: usize, width: usize, acceleration: f64, center_fraction: Option<f64>, offset: usize) -> PyResult<Self> {
        let mut spec = MaskSpec::uniform(acceleration);
        if let Some(c) = center_fraction {
            spec.center_fraction = c;
        }
        spec.offset = offset;
        spec.build(height, width).map(PyMask).map_err(err)
    }

    /// Variable-density random mask drawn from a centered Gaussian.
    #[staticmethod]
    #[pyo3(signature = (height, width, acceleration, seed=0, sigma_fraction=None))]
    fn gaussian(height: usize, width: usize, acceleration: f64, seed: u64, sigma_fraction: Option<f64>) -> PyResult<Self> {
        let mut spec = MaskSpec::gaussian(acceleration, seed);
        if let Some(s) = sigma_fraction {
            spec.sigma_fraction = s;
        }
        spec.build(height, width).map(PyMask).map_err(err)
    }

    #[staticmethod]
    fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> PyResult<Self> {
        sampling::Mask::from_bits(height, width, bits).map(PyMask).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_mask(&path).map(PyMask).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_mask(&path, &self.0).map_err(err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    /// Total bins over sampled bins.
    #[getter]
    fn acceleration(&self) -> f64 {
        self.0.acceleration()
    }

    #[getter]
    fn count(&self) -> usize {
        self.0.count_ones()
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.0.meta().kind {
            MaskKind::Uniform1d => "uniform",
            MaskKind::Gaussian2d => "gaussian",
            MaskKind::Custom => "custom",
        }
    }

    fn bits(&self) -> Vec<bool> {
        self.0.bits().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "Mask({}x{}, {}, acceleration={:.3})",
            self.0.height(),
            self.0.width(),
            self.kind(),
            self.0.acceleration()
        )
    }
}

/// Synthetic complex-valued phantom and its centered spectrum.
#[pyclass(name = "Phantom", module = "kspace", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPhantom(PhantomSample);

#[pymethods]
impl PyPhantom {
    #[new]
    #[pyo3(signature = (height, width, seed=0, index=0))]
    fn new(height: usize, width: usize, seed: u64, index: usize) -> PyResult<Self> {
        generate_phantom(height, width, seed, index).map(PyPhantom).map_err(err)
    }

    /// A phantom from a complex image given as `(re, im)`.
    #[staticmethod]
    fn from_image(re: Vec<f64>, im: Vec<f64>, height: usize, width: usize) -> PyResult<Self> {
        let image = grid(re, im, height, width)?;
        let phase = kspace_core::data::PhaseField {
            offset: 0.0,
            coefficients: [0.0; 3],
        };
        PhantomSample::from_image(0, 0, Vec::new(), phase, image).map(PyPhantom).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_sample(&path).map(PyPhantom).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_sample(&path, &self.0).map_err(err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.dims().0
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.dims().1
    }

    #[getter]
    fn image(&self) -> Pair {
        pair(&self.0.image)
    }

    #[getter]
    fn spectrum(&self) -> Pair {
        pair(&self.0.spectrum)
    }

    fn magnitude(&self) -> Vec<f64> {
        metrics::magnitude_f64(&self.0.image)
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.0.dims();
        format!("Phantom({h}x{w}, seed={}, index={})", self.0.seed, self.0.index)
    }
}

/// Model weights with their configuration and optimizer state.
#[pyclass(name = "Model", module = "kspace")]
struct PyModel {
    config: RunConfig,
    state: TrainState<f32>,
}

fn parse_config(config: Option<&str>) -> PyResult<RunConfig> {
    match config {
        Some(text) => RunConfig::from_toml(text).map_err(err),
        None => Ok(RunConfig::default()),
    }
}

fn phantoms(list: &[Py<PyPhantom>], py: Python<'_>) -> Vec<PhantomSample> {
    list.iter().map(|p| p.bind(py).get().0.clone()).collect()
}

#[pymethods]
impl PyModel {
    /// Freshly initialized weights for a TOML run configuration.
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let config = parse_config(config)?;
        let params = init_params::<f32>(&config.model, seed).map_err(err)?;
        let optimizer = AdamState::new(&params);
        Ok(PyModel {
            config,
            state: TrainState { params, optimizer, step: 0 },
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        let config = RunConfig {
            model: ck.model.clone(),
            train: ck.train.clone(),
            ..RunConfig::default()
        };
        Ok(PyModel {
            config,
            state: ck.to_state(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_state(&self.config.model, &self.config.train, &self.state)
            .save(&path)
            .map_err(err)
    }

    /// The run configuration as TOML.
    #[getter]
    fn config(&self) -> PyResult<String> {
        self.config.to_toml().map_err(err)
    }

    #[getter]
    fn step(&self) -> usize {
        self.state.step
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.state.params.num_scalars()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.state.params.names().cloned().collect()
    }

    #[getter]
    fn data_consistency(&self) -> bool {
        self.config.model.data_consistency
    }

    #[setter]
    fn set_data_consistency(&mut self, on: bool) {
        self.config.model.data_consistency = on;
    }

    /// Train for the configured number of epochs, continuing from the current
    /// step. Returns the per-step losses.
    fn train(&mut self, py: Python<'_>, dataset: Vec<Py<PyPhantom>>) -> PyResult<Vec<f64>> {
        let data = phantoms(&dataset, py);
        let model = self.config.model.clone();
        let train = self.config.train.clone();
        let state = self.state.clone();
        let (state, losses) = py
            .detach(move || -> kspace_core::Result<_> {
                let mut trainer = Trainer::resume(model, train, &data, state)?;
                let mut losses = Vec::new();
                while !trainer.is_done() {
                    losses.push(trainer.step()?.loss);
                }
                Ok((trainer.into_state(), losses))
            })
            .map_err(err)?;
        self.state = state;
        Ok(losses)
    }

    /// Reconstruct one phantom from the bins selected by `mask`.
    ///
    /// Returns a dict with `image`, `zero_filled`, `layer_images` and
    /// `lr_spectrograms`, all as `(re, im)` pairs.
    fn reconstruct<'py>(&self, py: Python<'py>, phantom: &PyPhantom, mask: &PyMask) -> PyResult<Bound<'py, PyDict>> {
        let params = self.state.params.cast::<f64>();
        let r = reconstruct(&params, &self.config.model, &phantom.0, &mask.0, false).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("image", pair(&r.outputs.final_image))?;
        out.set_item("zero_filled", pair(&r.zero_filled))?;
        out.set_item("layer_images", r.outputs.hr_images.iter().map(pair).collect::<Vec<_>>())?;
        out.set_item("lr_spectrograms", r.outputs.lr_spectrograms.iter().map(pair).collect::<Vec<_>>())?;
        Ok(out)
    }

    /// Mean PSNR/SSIM against the zero-filled baseline.
    fn evaluate<'py>(&self, py: Python<'py>, dataset: Vec<Py<PyPhantom>>, mask: &PyMask) -> PyResult<Bound<'py, PyDict>> {
        let data = phantoms(&dataset, py);
        let r = evaluate(&self.state.params, &self.config.model, &data, &mask.0).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("psnr", r.psnr.mean)?;
        out.set_item("ssim", r.ssim.mean)?;
        out.set_item("zero_filled_psnr", r.zero_filled_psnr.mean)?;
        out.set_item("zero_filled_ssim", r.zero_filled_ssim.mean)?;
        out.set_item("layer_psnr", r.layer_psnr)?;
        Ok(out)
    }

    fn __repr__(&self) -> String {
        let m = &self.config.model;
        format!(
            "Model(grid={}x{}, d={}, heads={}, layers={}/{}/{}, step={})",
            m.hr_grid[0], m.hr_grid[1], m.d, m.n_heads, m.n_enc, m.n_lr, m.n_hr, self.state.step
        )
    }
}

#[pymodule]
fn kspace(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(fft2, m)?)?;
    m.add_function(wrap_pyfunction!(ifft2, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(attention_cost, m)?)?;
    m.add_class::<PyMask>()?;
    m.add_class::<PyPhantom>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
