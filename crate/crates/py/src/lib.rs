//! Python bindings. Tensors cross the boundary as flat float lists plus a
//! shape; everything else maps to plain Python values.

use std::path::PathBuf;

use fpcm_core::advtrain::{self, AttackConfig};
use fpcm_core::analysis;
use fpcm_core::config::{ConfigBuilder, RunConfig};
use fpcm_core::data::{self, Split};
use fpcm_core::fpcm::{fpcm_forward as core_fpcm_forward, AlphaMode, CutoffState, FpcmParams};
use fpcm_core::model::{self, Network, EVAL_BETA};
use fpcm_core::persist::{self, CheckpointMeta};
use fpcm_core::spectral::{self, FilterKind};
use fpcm_core::Error;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(fpcm, FpcmError, PyException);
create_exception!(fpcm, ShapeError, FpcmError);
create_exception!(fpcm, ContractError, FpcmError);
create_exception!(fpcm, ConfigError, FpcmError);
create_exception!(fpcm, FormatError, FpcmError);
create_exception!(fpcm, TrainingError, FpcmError);

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Shape(_) => ShapeError::new_err(msg),
        Error::Contract(_) => ContractError::new_err(msg),
        Error::Config(_) => ConfigError::new_err(msg),
        Error::Symmetry { .. } | Error::Format(_) | Error::Checksum { .. } | Error::Version(_) => {
            FormatError::new_err(msg)
        }
        Error::Training { .. } => TrainingError::new_err(msg),
        Error::Io { .. } => PyOSError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for fpcm_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn parse_split(split: &str) -> PyResult<Split> {
    match split {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(ConfigError::new_err(format!("split must be \"train\" or \"test\", got {other:?}"))),
    }
}

fn parse_filter(kind: &str) -> PyResult<FilterKind> {
    match kind {
        "gaussian" => Ok(FilterKind::Gaussian),
        "allpass" => Ok(FilterKind::AllPass),
        other => Err(ConfigError::new_err(format!("filter must be \"gaussian\" or \"allpass\", got {other:?}"))),
    }
}

/// Dense row-major float tensor.
#[pyclass(name = "Tensor", module = "fpcm", from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: fpcm_core::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: fpcm_core::Tensor::new(shape, data).py()?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self {
            inner: fpcm_core::Tensor::zeros(&shape),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn numel(&self) -> usize {
        self.inner.numel()
    }

    fn frobenius_norm(&self) -> f64 {
        self.inner.frobenius_norm()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> PyResult<f64> {
        self.inner.max_abs_diff(&other.inner).py()
    }

    fn __len__(&self) -> usize {
        self.inner.shape().first().copied().unwrap_or(0)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn wrap(t: fpcm_core::Tensor) -> PyTensor {
    PyTensor { inner: t }
}

/// Resolved run configuration: defaults, then an optional TOML document,
/// then `key=value` overrides.
#[pyclass(name = "Config", module = "fpcm", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = "", overrides = Vec::new()))]
    fn new(toml: &str, overrides: Vec<String>) -> PyResult<Self> {
        let mut b = ConfigBuilder::default();
        b.merge_toml(toml).py()?;
        for o in &overrides {
            b.set_str(o).py()?;
        }
        Ok(Self { inner: b.build().py()? })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    /// Training or test split as configured (synthetic or CIFAR-10).
    #[pyo3(signature = (split = "train"))]
    fn load_data(&self, split: &str) -> PyResult<PyDataset> {
        Ok(PyDataset {
            inner: self.inner.load_data(parse_split(split)?).py()?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={})", self.inner.seed)
    }
}

#[pyclass(name = "Dataset", module = "fpcm", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Class-dependent 2D sinusoids with random phase plus uniform noise.
    #[staticmethod]
    #[pyo3(signature = (classes = 10, per_class = 20, side = 16, noise = 0.1, seed = 0, split = "train"))]
    fn synthetic(classes: usize, per_class: usize, side: usize, noise: f64, seed: u64, split: &str) -> PyResult<Self> {
        let spec = data::SynthSpec::new(classes, per_class, side, noise, seed);
        Ok(Self {
            inner: data::synth_dataset(&spec, parse_split(split)?).py()?,
        })
    }

    /// Reads the CIFAR-10 binary batches in `directory`.
    #[staticmethod]
    #[pyo3(signature = (directory, split = "train", limit = None))]
    fn cifar10(directory: PathBuf, split: &str, limit: Option<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: data::load_cifar10(&directory, parse_split(split)?, limit).py()?,
        })
    }

    #[getter]
    fn images(&self) -> PyTensor {
        wrap(self.inner.images().clone())
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    /// The first `n` samples as a new dataset.
    fn head(&self, n: usize) -> PyResult<Self> {
        let b = self.inner.head(n).py()?;
        Ok(Self {
            inner: data::Dataset::new(b.images, b.labels, self.inner.classes(), self.inner.split()).py()?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Residual classifier with optional frequency preference layers.
#[pyclass(name = "Model", module = "fpcm", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: model::Model,
}

fn attack(cfg: &RunConfig, steps: Option<usize>) -> AttackConfig {
    cfg.attack_config(steps.unwrap_or(cfg.attack.eval_steps))
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed = None))]
    fn new(config: &PyConfig, seed: Option<u64>) -> PyResult<Self> {
        let cfg = config.inner.model_config().py()?;
        Ok(Self {
            inner: model::Model::build(&cfg, seed.unwrap_or(config.inner.seed)).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: persist::load(&path).py()?.model,
        })
    }

    #[pyo3(signature = (path, epoch = 0, seed = 0))]
    fn save(&self, path: PathBuf, epoch: usize, seed: u64) -> PyResult<()> {
        let meta = CheckpointMeta {
            epoch,
            beta: self.inner.scheduled_beta(),
            seed,
        };
        persist::save(&self.inner, &meta, None, &path).py()
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn fpcm_count(&self) -> usize {
        self.inner.fpcm_count()
    }

    fn fpcm_param_count(&self) -> usize {
        self.inner.fpcm_param_count()
    }

    /// Cutoff shared by the scheduled layers, if any.
    #[getter]
    fn beta(&self) -> Option<f64> {
        self.inner.scheduled_beta()
    }

    #[setter]
    fn set_beta(&mut self, beta: f64) -> PyResult<()> {
        self.inner.set_scheduled_beta(beta).py()
    }

    fn logits(&self, x: &PyTensor) -> PyResult<PyTensor> {
        Ok(wrap(self.inner.logits(&x.inner).py()?))
    }

    fn predict(&self, x: &PyTensor) -> PyResult<Vec<usize>> {
        self.inner.predict(&x.inner).py()
    }

    /// Per-site channel weights on `x`, as `(site, stage, values)`.
    fn alphas(&self, x: &PyTensor) -> PyResult<Vec<(usize, usize, PyTensor)>> {
        let out = self.inner.forward(&x.inner, false).py()?;
        Ok(out.alphas.into_iter().map(|a| (a.site, a.stage, wrap(a.values))).collect())
    }

    /// Trains in place and returns one dict per epoch.
    fn train<'py>(&mut self, py: Python<'py>, data: &PyDataset, config: &PyConfig) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let cfg = &config.inner;
        let tc = cfg.train_config().py()?;
        let report = advtrain::train(&mut self.inner, &data.inner, &tc, &cfg.attack_config(cfg.attack.train_steps), None).py()?;
        report
            .epochs
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("epoch", r.epoch)?;
                d.set_item("beta", r.beta)?;
                d.set_item("lr", r.lr)?;
                d.set_item("train_loss", r.train_loss)?;
                d.set_item("train_robust_acc", r.train_robust_acc)?;
                Ok(d)
            })
            .collect()
    }

    /// Clean and PGD accuracy at the evaluation cutoff.
    #[pyo3(signature = (data, config, steps = None, attack = true))]
    fn evaluate(&self, data: &PyDataset, config: &PyConfig, steps: Option<usize>, attack: bool) -> PyResult<(f64, Option<f64>)> {
        let cfg = &config.inner;
        let a = attack.then(|| self::attack(cfg, steps));
        let r = advtrain::evaluate_model(&self.inner, &data.inner, cfg.eval.batch_size, a.as_ref(), cfg.seed).py()?;
        Ok((r.clean_acc, r.robust_acc))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(params={}, fpcm_sites={})",
            self.inner.param_count(),
            self.inner.fpcm_count()
        )
    }
}

fn eval_copy(m: &PyModel) -> PyResult<model::Model> {
    let mut m = m.inner.clone();
    if m.scheduled_beta().is_some() {
        m.set_scheduled_beta(EVAL_BETA).py()?;
    }
    Ok(m)
}

#[pyfunction]
fn fgsm(model: &PyModel, x: &PyTensor, labels: Vec<usize>, epsilon: f64) -> PyResult<PyTensor> {
    Ok(wrap(advtrain::fgsm(&eval_copy(model)?, &x.inner, &labels, epsilon).py()?))
}

#[pyfunction]
#[pyo3(signature = (model, x, labels, epsilon = 8.0 / 255.0, step_size = 2.0 / 255.0, steps = 10, random_start = true, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn pgd(
    model: &PyModel,
    x: &PyTensor,
    labels: Vec<usize>,
    epsilon: f64,
    step_size: f64,
    steps: usize,
    random_start: bool,
    seed: u64,
) -> PyResult<PyTensor> {
    use rand::SeedableRng;
    let cfg = AttackConfig {
        epsilon,
        step_size,
        steps,
        random_start,
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Ok(wrap(advtrain::pgd(&eval_copy(model)?, &x.inner, &labels, &cfg, &mut rng).py()?))
}

/// Unnormalized 2D DFT of every trailing plane, returned
/// as `(real, imag)` tensors.
#[pyfunction]
fn dft2(x: &PyTensor) -> PyResult<(PyTensor, PyTensor)> {
    let s = spectral::dft2(&x.inner).py()?;
    let shape = s.shape().to_vec();
    let re = s.data().iter().map(|z| z.re).collect();
    let im = s.data().iter().map(|z| z.im).collect();
    Ok((
        wrap(fpcm_core::Tensor::new(shape.clone(), re).py()?),
        wrap(fpcm_core::Tensor::new(shape, im).py()?),
    ))
}

#[pyfunction]
#[pyo3(signature = (h, w, beta, kind = "gaussian"))]
fn make_filter(h: usize, w: usize, beta: f64, kind: &str) -> PyResult<PyTensor> {
    let f = spectral::make_filter(h, w, beta, parse_filter(kind)?).py()?;
    Ok(wrap(fpcm_core::Tensor::new(vec![h, w], f.values().to_vec()).py()?))
}

#[pyfunction]
fn band_split(x: &PyTensor, beta: f64) -> PyResult<(PyTensor, PyTensor)> {
    let s = x.inner.shape();
    if s.len() < 2 {
        return Err(ShapeError::new_err("band_split needs at least two dimensions"));
    }
    let f = spectral::make_filter(s[s.len() - 2], s[s.len() - 1], beta, FilterKind::Gaussian).py()?;
    let (low, high) = spectral::band_split(&x.inner, &f).py()?;
    Ok((wrap(low), wrap(high)))
}

#[pyfunction]
fn high_freq_norm(x: &PyTensor, beta: f64) -> PyResult<f64> {
    spectral::high_freq_norm(&x.inner, beta).py()
}

/// The layer with a fixed channel weight on a `C x H x W` or
/// `N x C x H x W` input.
#[pyfunction]
#[pyo3(signature = (x, alpha, beta, kind = "gaussian"))]
fn fpcm_forward(x: &PyTensor, alpha: f64, beta: f64, kind: &str) -> PyResult<PyTensor> {
    let s = x.inner.shape();
    let channels = if s.len() >= 3 { s[s.len() - 3] } else { 1 };
    let mut p = FpcmParams::new(AlphaMode::Fixed(alpha), channels).py()?;
    p.filter = parse_filter(kind)?;
    Ok(wrap(core_fpcm_forward(&x.inner, &p, &CutoffState::new(beta).py()?).py()?))
}

#[pyfunction]
fn cutoff_schedule(t: usize, total: usize) -> PyResult<f64> {
    advtrain::cutoff_schedule(t, total).py()
}

#[pyfunction]
#[pyo3(signature = (clean, robust, pi_nat = 0.5, pi_adv = 0.5))]
fn w_robust(clean: f64, robust: f64, pi_nat: f64, pi_adv: f64) -> PyResult<f64> {
    analysis::w_robust(clean, robust, pi_nat, pi_adv).py()
}

#[pyfunction]
fn format_percent(v: f64) -> String {
    analysis::format_percent(v)
}

/// High-frequency norm per tapped layer: `(layer, stage, is_stage_end, norm)`.
#[pyfunction]
#[pyo3(signature = (model, x, beta = EVAL_BETA))]
fn layer_freq_profile(model: &PyModel, x: &PyTensor, beta: f64) -> PyResult<Vec<(usize, usize, bool, f64)>> {
    let p = analysis::layer_freq_profile(&eval_copy(model)?, &x.inner, beta).py()?;
    Ok(p.rows.iter().map(|r| (r.layer, r.stage, r.is_stage_end, r.hf_norm)).collect())
}

/// Attack success rate of low-passed random noise: `(beta, rate)` pairs.
#[pyfunction]
#[pyo3(signature = (model, data, betas, epsilon = 16.0 / 255.0, draws = 3, seed = 0))]
fn freq_noise_sweep(model: &PyModel, data: &PyDataset, betas: Vec<f64>, epsilon: f64, draws: usize, seed: u64) -> PyResult<Vec<(f64, f64)>> {
    let d = &data.inner;
    let r = analysis::freq_noise_sweep(&eval_copy(model)?, d.images(), d.labels(), &betas, epsilon, draws, seed).py()?;
    Ok(r.points.iter().map(|p| (p.beta, p.success_rate)).collect())
}

/// Per-stage channel weight statistics: `(stage, max, min, mean, var, sample_var)`.
#[pyfunction]
fn alpha_stats(model: &PyModel, x: &PyTensor) -> PyResult<Vec<(usize, f64, f64, f64, f64, f64)>> {
    let s = analysis::alpha_stats(&eval_copy(model)?, &x.inner).py()?;
    Ok(s.stages.iter().map(|r| (r.stage, r.max, r.min, r.mean, r.var, r.sample_var)).collect())
}

#[pymodule]
fn fpcm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("FpcmError", py.get_type::<FpcmError>())?;
    m.add("ShapeError", py.get_type::<ShapeError>())?;
    m.add("ContractError", py.get_type::<ContractError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("FormatError", py.get_type::<FormatError>())?;
    m.add("TrainingError", py.get_type::<TrainingError>())?;
    m.add("EVAL_BETA", EVAL_BETA)?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(fgsm, m)?)?;
    m.add_function(wrap_pyfunction!(pgd, m)?)?;
    m.add_function(wrap_pyfunction!(dft2, m)?)?;
    m.add_function(wrap_pyfunction!(make_filter, m)?)?;
    m.add_function(wrap_pyfunction!(band_split, m)?)?;
    m.add_function(wrap_pyfunction!(high_freq_norm, m)?)?;
    m.add_function(wrap_pyfunction!(fpcm_forward, m)?)?;
    m.add_function(wrap_pyfunction!(cutoff_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(w_robust, m)?)?;
    m.add_function(wrap_pyfunction!(format_percent, m)?)?;
    m.add_function(wrap_pyfunction!(layer_freq_profile, m)?)?;
    m.add_function(wrap_pyfunction!(freq_noise_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_stats, m)?)?;
    Ok(())
}
