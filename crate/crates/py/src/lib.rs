//! Python bindings. Arrays cross the boundary as nested lists of floats;
//! conditions are class indices, with `None` for the null condition.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use selfnpo::checkpoint::{self as ckpt, DType};
use selfnpo::diffusion::{self, Corruption, Guided};
use selfnpo::eval::{self, BinSpec, RewardFn};
use selfnpo::nn::{Arch, ScoreNet};
use selfnpo::npo::{self as npo_ops, WeightOffsets};
use selfnpo::oracle::GaussianMixture;
use selfnpo::schedule::{NoiseSchedule, ScheduleKind, StepGrid};
use selfnpo::tdft::{self as tdft_ops, FineTuneConfig, PlanMode};
use selfnpo::train::{self as train_ops, BaseTrainConfig};
use selfnpo::{Condition, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        Error::TrainingDivergence(_) | Error::SamplerDivergence { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn cond_of(c: Option<usize>) -> Condition {
    c.map_or(Condition::Null, Condition::Class)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[pyclass(name = "NoiseSchedule", module = "selfnpo", frozen)]
struct PySchedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (t_max = 1000, kind = "cosine"))]
    fn new(t_max: usize, kind: &str) -> PyResult<Self> {
        let kind: ScheduleKind = kind.parse().map_err(to_py)?;
        Ok(Self {
            inner: NoiseSchedule::new(kind, t_max).map_err(to_py)?,
        })
    }

    #[getter]
    fn t_max(&self) -> usize {
        self.inner.t_max()
    }

    fn alpha(&self, t: usize) -> PyResult<f64> {
        self.inner.check_t(t).map_err(to_py)?;
        Ok(self.inner.alpha(t))
    }

    fn sigma(&self, t: usize) -> PyResult<f64> {
        self.inner.check_t(t).map_err(to_py)?;
        Ok(self.inner.sigma(t))
    }

    fn snr(&self, t: usize) -> PyResult<f64> {
        self.inner.check_t(t).map_err(to_py)?;
        Ok(self.inner.snr(t))
    }

    fn add_noise(&self, x0: Vec<f64>, t: usize, eps: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.add_noise(&x0, t, &eps).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "NoiseSchedule(t_max={}, kind='{}')",
            self.inner.t_max(),
            self.inner.kind()
        )
    }
}

#[pyclass(name = "GaussianMixture", module = "selfnpo", frozen)]
struct PyMixture {
    inner: GaussianMixture,
}

#[pymethods]
impl PyMixture {
    #[staticmethod]
    #[pyo3(signature = (modes = 8, radius = 1.0, std = 0.05))]
    fn ring(modes: usize, radius: f64, std: f64) -> PyResult<Self> {
        Ok(Self {
            inner: GaussianMixture::ring(modes, radius, std).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn single(mean: Vec<f64>, std: f64) -> PyResult<Self> {
        Ok(Self {
            inner: GaussianMixture::single(mean, std).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: GaussianMixture::from_text(text).map_err(to_py)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn classes(&self) -> Vec<usize> {
        self.inner.classes()
    }

    #[pyo3(signature = (schedule, x, t, cond = None))]
    fn posterior_mean(
        &self,
        schedule: &PySchedule,
        x: Vec<f64>,
        t: usize,
        cond: Option<usize>,
    ) -> PyResult<Vec<f64>> {
        self.inner
            .posterior_mean(&schedule.inner, &x, t, cond_of(cond))
            .map_err(to_py)
    }

    #[pyo3(signature = (schedule, x, t, cond = None))]
    fn marginal_score(
        &self,
        schedule: &PySchedule,
        x: Vec<f64>,
        t: usize,
        cond: Option<usize>,
    ) -> PyResult<Vec<f64>> {
        self.inner
            .marginal_score(&schedule.inner, &x, t, cond_of(cond))
            .map_err(to_py)
    }

    #[pyo3(signature = (n, cond = None, seed = 0))]
    fn sample(&self, n: usize, cond: Option<usize>, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = self
            .inner
            .sample_data(cond_of(cond), &mut rng, n)
            .map_err(to_py)?;
        Ok(rows(&x))
    }
}

#[pyclass(name = "ScoreNet", module = "selfnpo", frozen)]
struct PyNet {
    inner: ScoreNet,
}

#[pymethods]
impl PyNet {
    /// Freshly initialised network; `hidden=None` gives the toy default.
    #[staticmethod]
    #[pyo3(signature = (seed = 0, t_max = 1000, input_dim = 2, num_classes = 8, hidden = None))]
    fn init(
        seed: u64,
        t_max: usize,
        input_dim: usize,
        num_classes: usize,
        hidden: Option<Vec<usize>>,
    ) -> PyResult<Self> {
        let mut arch = Arch::toy_default(t_max);
        arch.input_dim = input_dim;
        arch.num_classes = num_classes;
        if let Some(h) = hidden {
            arch.hidden = h;
        }
        let inner = ScoreNet::init(arch, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ckpt::load_net(&path).map_err(to_py)?,
        })
    }

    /// Writes the JSON manifest at `path` and the tensor blob next to it;
    /// returns the SHA-256 of the blob.
    #[pyo3(signature = (path, dtype = "f64"))]
    fn save(&self, path: PathBuf, dtype: &str) -> PyResult<String> {
        let dtype = match dtype {
            "f64" => DType::F64,
            "f32" => DType::F32,
            other => return Err(PyValueError::new_err(format!("unknown dtype {other}"))),
        };
        Ok(ckpt::save_net(&path, &self.inner, dtype)
            .map_err(to_py)?
            .blob)
    }

    fn forward(
        &self,
        x: Vec<Vec<f64>>,
        t: Vec<usize>,
        cond: Vec<Option<usize>>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix(x)?;
        let cond: Vec<Condition> = cond.into_iter().map(cond_of).collect();
        let out = self
            .inner
            .forward_batch(x.view(), &t, &cond)
            .map_err(to_py)?;
        Ok(rows(&out))
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params().num_scalars()
    }

    #[getter]
    fn t_max(&self) -> usize {
        self.inner.arch().t_max
    }

    fn max_abs_diff(&self, other: &PyNet) -> PyResult<f64> {
        self.inner
            .params()
            .max_abs_diff(other.inner.params())
            .map_err(to_py)
    }
}

#[pyfunction]
fn eps_to_x0(eps: Vec<f64>, x_t: Vec<f64>, schedule: &PySchedule, t: usize) -> PyResult<Vec<f64>> {
    diffusion::eps_to_x0(&eps, &x_t, &schedule.inner, t).map_err(to_py)
}

#[pyfunction]
fn tweedie_x0(
    x_t: Vec<f64>,
    score: Vec<f64>,
    schedule: &PySchedule,
    t: usize,
) -> PyResult<Vec<f64>> {
    diffusion::tweedie_x0(&x_t, &score, &schedule.inner, t).map_err(to_py)
}

#[pyfunction]
fn cfg_combine(eps_pos: Vec<f64>, eps_neg: Vec<f64>, omega: f64) -> PyResult<Vec<f64>> {
    diffusion::cfg_combine(&eps_pos, &eps_neg, omega).map_err(to_py)
}

#[pyfunction]
fn ddim_update(
    schedule: &PySchedule,
    x_t: Vec<f64>,
    eps: Vec<f64>,
    t_from: usize,
    t_to: usize,
) -> PyResult<Vec<f64>> {
    diffusion::ddim_update(&schedule.inner, &x_t, &eps, t_from, t_to).map_err(to_py)
}

#[pyfunction]
fn renoise_corrected(
    x_t: Vec<f64>,
    schedule: &PySchedule,
    t: usize,
    s: usize,
    noise: Vec<f64>,
) -> PyResult<Vec<f64>> {
    tdft_ops::renoise_corrected(&x_t, &schedule.inner, t, s, &noise).map_err(to_py)
}

#[pyfunction]
fn renoise_naive(
    x0: Vec<f64>,
    schedule: &PySchedule,
    s: usize,
    noise: Vec<f64>,
) -> PyResult<Vec<f64>> {
    tdft_ops::renoise_naive(&x0, &schedule.inner, s, &noise).map_err(to_py)
}

/// DDIM samples from `pos` guided against `neg` (or `pos` itself); returns
/// the samples and the network evaluations per sample.
#[pyfunction]
#[pyo3(signature = (pos, schedule, cond, k = 25, omega = 2.0, neg = None, neg_cond = None, seed = 0, clip_x0 = Some(2.0)))]
#[allow(clippy::too_many_arguments)]
fn sample(
    pos: &PyNet,
    schedule: &PySchedule,
    cond: Vec<Option<usize>>,
    k: usize,
    omega: f64,
    neg: Option<&PyNet>,
    neg_cond: Option<usize>,
    seed: u64,
    clip_x0: Option<f64>,
) -> PyResult<(Vec<Vec<f64>>, u64)> {
    let neg = neg.unwrap_or(pos);
    let grid = StepGrid::full(&schedule.inner, k).map_err(to_py)?;
    let cond: Vec<Condition> = cond.into_iter().map(cond_of).collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..cond.len())
        .map(|i| ChaCha8Rng::seed_from_u64(selfnpo::cli::chain_seed(seed, i)))
        .collect();
    let out = npo_ops::guided_sample(
        &pos.inner,
        &neg.inner,
        &schedule.inner,
        &grid,
        &cond,
        omega,
        cond_of(neg_cond),
        clip_x0,
        &mut rngs,
    )
    .map_err(to_py)?;
    Ok((rows(&out.x0), out.nfe))
}

/// `theta + alpha (pos - theta) + beta (neg - theta)`.
#[pyfunction]
#[pyo3(signature = (theta, neg, beta = 1.0, pos = None, alpha = 0.0))]
fn mix_negative(
    theta: &PyNet,
    neg: &PyNet,
    beta: f64,
    pos: Option<&PyNet>,
    alpha: f64,
) -> PyResult<PyNet> {
    let offsets = WeightOffsets::from_checkpoints(
        theta.inner.params(),
        pos.map(|p| p.inner.params()),
        neg.inner.params(),
    )
    .map_err(to_py)?;
    let params = npo_ops::mix_negative(&offsets, alpha, beta).map_err(to_py)?;
    Ok(PyNet {
        inner: theta.inner.with_params(params).map_err(to_py)?,
    })
}

#[pyfunction]
#[pyo3(signature = (mixture, schedule, iterations = 3000, batch_size = 256, lr = 1e-3, seed = 0))]
fn train_base(
    mixture: &PyMixture,
    schedule: &PySchedule,
    iterations: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> PyResult<(PyNet, f64, f64)> {
    let mut arch = Arch::toy_default(schedule.inner.t_max());
    arch.input_dim = mixture.inner.dim();
    arch.num_classes = mixture.inner.num_classes();
    let cfg = BaseTrainConfig {
        iterations,
        batch_size,
        lr,
        seed,
        ..BaseTrainConfig::default()
    };
    let out = train_ops::train_base(arch, &mixture.inner, &schedule.inner, &cfg).map_err(to_py)?;
    if let Some(reason) = out.divergence {
        return Err(PyRuntimeError::new_err(reason));
    }
    Ok((
        PyNet { inner: out.net },
        out.initial_eval_loss,
        out.final_eval_loss,
    ))
}

/// Self-NPO fine-tuning; returns the fine-tuned network, the per-iteration
/// losses and the generation / training NFE counters.
#[pyfunction]
#[pyo3(signature = (base, mixture, schedule, iterations = 1000, batch_size = 80, lr = 1e-4, k = 5, seed = 0, full_simulation = false, omega = 2.0, corruption = "none", clip_x0 = Some(2.0)))]
#[allow(clippy::too_many_arguments)]
fn self_npo_train(
    base: &PyNet,
    mixture: &PyMixture,
    schedule: &PySchedule,
    iterations: usize,
    batch_size: usize,
    lr: f64,
    k: usize,
    seed: u64,
    full_simulation: bool,
    omega: f64,
    corruption: &str,
    clip_x0: Option<f64>,
) -> PyResult<(PyNet, Vec<f64>, u64, u64)> {
    let cfg = FineTuneConfig {
        iterations,
        batch_size,
        lr,
        k,
        seed,
        mode: if full_simulation {
            PlanMode::FullSimulation
        } else {
            PlanMode::Truncated
        },
        omega,
        corruption: corruption.parse::<Corruption>().map_err(to_py)?,
        clip_x0,
        ..FineTuneConfig::default()
    };
    let out = tdft_ops::self_npo_train(&base.inner, &mixture.inner, &schedule.inner, &cfg)
        .map_err(to_py)?;
    if let Some(reason) = out.divergence {
        return Err(PyRuntimeError::new_err(reason));
    }
    Ok((
        PyNet { inner: out.student },
        out.losses,
        out.generation_nfe,
        out.training_nfe,
    ))
}

#[pyfunction]
fn rewards(
    mixture: &PyMixture,
    samples: Vec<Vec<f64>>,
    cond: Vec<Option<usize>>,
) -> PyResult<Vec<f64>> {
    let r = RewardFn::mode_proximity(mixture.inner.clone());
    let x = matrix(samples)?;
    let cond: Vec<Condition> = cond.into_iter().map(cond_of).collect();
    eval::rewards(&r, x.view(), &cond).map_err(to_py)
}

#[pyfunction]
fn winning_ratio(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    eval::winning_ratio(&a, &b).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (p, q, lo = -1.6, hi = 1.6, bins = 64))]
fn kl_histogram(
    p: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    lo: f64,
    hi: f64,
    bins: usize,
) -> PyResult<f64> {
    let (p, q) = (matrix(p)?, matrix(q)?);
    let spec = BinSpec::square(lo, hi, bins, p.ncols());
    eval::kl_histogram(p.view(), q.view(), &spec).map_err(to_py)
}

/// Runs a command-line invocation in-process and returns the manifest path.
#[pyfunction]
fn run_cli(args: Vec<String>) -> PyResult<String> {
    let argv = std::iter::once("selfnpo".to_string()).chain(args);
    let summary = selfnpo::cli::run_from(argv).map_err(to_py)?;
    Ok(summary.manifest_path.display().to_string())
}

/// Single-model guided epsilon, for checking guidance by hand.
#[pyfunction]
#[pyo3(signature = (net, x, t, cond, omega, neg_cond = None))]
fn guided_eps(
    net: &PyNet,
    x: Vec<Vec<f64>>,
    t: usize,
    cond: Vec<Option<usize>>,
    omega: f64,
    neg_cond: Option<usize>,
) -> PyResult<Vec<Vec<f64>>> {
    let x = matrix(x)?;
    let cond: Vec<Condition> = cond.into_iter().map(cond_of).collect();
    let guide = Guided::single(&net.inner, omega, cond_of(neg_cond));
    let mut nfe = 0;
    let out = guide.eps(x.view(), t, &cond, &mut nfe).map_err(to_py)?;
    Ok(rows(&out))
}

#[pymodule(name = "selfnpo")]
pub fn selfnpo_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyMixture>()?;
    m.add_class::<PyNet>()?;
    m.add_function(wrap_pyfunction!(eps_to_x0, m)?)?;
    m.add_function(wrap_pyfunction!(tweedie_x0, m)?)?;
    m.add_function(wrap_pyfunction!(cfg_combine, m)?)?;
    m.add_function(wrap_pyfunction!(ddim_update, m)?)?;
    m.add_function(wrap_pyfunction!(renoise_corrected, m)?)?;
    m.add_function(wrap_pyfunction!(renoise_naive, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(mix_negative, m)?)?;
    m.add_function(wrap_pyfunction!(train_base, m)?)?;
    m.add_function(wrap_pyfunction!(self_npo_train, m)?)?;
    m.add_function(wrap_pyfunction!(rewards, m)?)?;
    m.add_function(wrap_pyfunction!(winning_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(kl_histogram, m)?)?;
    m.add_function(wrap_pyfunction!(guided_eps, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
