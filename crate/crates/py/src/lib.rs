//! Python bindings: attention variants, binarization, the energy model,
//! gradient checks and the toy training harness.

use std::path::PathBuf;

use eatt::attention::{causal_mask, AttentionConfig};
use eatt::binarize::{self, BinarizeSpec};
use eatt::energy::{self, Chip};
use eatt::gradcheck::{run_gradcheck, GradOp};
use eatt::harness::{
    collect_binarization_stats, generate_task, Architecture, ModelConfig, RoleKinds, Task, ToyTaskConfig, TrainOptions,
    TrainState,
};
use eatt::{AttentionKind, AttentionVariant, CostLevel, Error, Tensor};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

create_exception!(eatt, EattError, PyException);
create_exception!(eatt, DivergenceError, EattError);

fn err(e: Error) -> PyErr {
    match e {
        Error::Divergence { .. } => DivergenceError::new_err(e.to_string()),
        Error::Dimension { .. }
        | Error::Shape(_)
        | Error::Domain(_)
        | Error::Config(_)
        | Error::Capacity { .. }
        | Error::Divisibility { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => EattError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

fn to_py_json<'py, S: serde::Serialize>(py: Python<'py>, v: &S) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| EattError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor<f64>> {
    Tensor::from_rows(&rows).map_err(err)
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let w = t.last_dim();
    t.data().chunks(w).map(<[f64]>::to_vec).collect()
}

/// One attention module in 64-bit precision on `[l, d]` inputs.
#[pyclass(name = "Attention")]
struct PyAttention {
    inner: AttentionVariant<f64>,
}

#[pymethods]
impl PyAttention {
    #[new]
    #[pyo3(signature = (kind, d, heads=1, max_len=64, seed=0))]
    fn new(kind: &str, d: usize, heads: usize, max_len: usize, seed: u64) -> PyResult<Self> {
        let cfg = AttentionConfig::new(parse(kind)?, d, heads, max_len).map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self { inner: AttentionVariant::new(cfg, &mut rng).map_err(err)? })
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind().to_string()
    }

    #[getter]
    fn param_names(&self) -> Vec<String> {
        self.inner.params.iter().map(|(n, _)| n.to_string()).collect()
    }

    fn get_param(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let t = self.inner.params.get(name).map_err(err)?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    fn set_param(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> PyResult<()> {
        let mut params = self.inner.params.clone();
        params.insert(name, Tensor::new(shape, data).map_err(err)?);
        self.inner = AttentionVariant::from_params(self.inner.config, params).map_err(err)?;
        Ok(())
    }

    /// Returns `(output, weights)`; weights are per head when `heads > 1`.
    #[pyo3(signature = (x, y=None, causal=false))]
    fn forward<'py>(
        &self,
        py: Python<'py>,
        x: Vec<Vec<f64>>,
        y: Option<Vec<Vec<f64>>>,
        causal: bool,
    ) -> PyResult<(Vec<Vec<f64>>, Bound<'py, PyAny>)> {
        let x = matrix(x)?;
        let y = match y {
            Some(y) => matrix(y)?,
            None => x.clone(),
        };
        let mask = causal.then(|| causal_mask::<f64>(x.shape()[0]));
        let out = self.inner.forward(&x, &y, mask.as_ref()).map_err(err)?;
        let w = &out.weights;
        let weights = if w.rank() == 2 {
            rows(w).into_pyobject(py)?.into_any()
        } else {
            let (l1, l2) = (w.shape()[1], w.shape()[2]);
            let heads: Vec<Vec<Vec<f64>>> =
                w.data().chunks(l1 * l2).map(|h| h.chunks(l2).map(<[f64]>::to_vec).collect()).collect();
            heads.into_pyobject(py)?.into_any()
        };
        Ok((rows(&out.output), weights))
    }

    fn with_heads(&self, heads: usize) -> PyResult<Self> {
        Ok(Self { inner: self.inner.with_heads(heads).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!("Attention(kind='{}', d={}, heads={}, max_len={})", c.kind, c.d, c.heads, c.max_len)
    }
}

#[pyfunction]
#[pyo3(name = "binarize")]
#[pyo3(signature = (x, tau=1.0))]
fn py_binarize(x: Vec<f64>, tau: f64) -> PyResult<Vec<f64>> {
    let t = Tensor::new(vec![x.len()], x).map_err(err)?;
    Ok(binarize::binarize(&t, BinarizeSpec::new(tau).map_err(err)?).map_err(err)?.into_data())
}

#[pyfunction]
#[pyo3(name = "surrogate_grad")]
#[pyo3(signature = (x, upstream, tau=1.0))]
fn py_surrogate_grad(x: Vec<f64>, upstream: Vec<f64>, tau: f64) -> PyResult<Vec<f64>> {
    let t = Tensor::new(vec![x.len()], x).map_err(err)?;
    let u = Tensor::new(vec![upstream.len()], upstream).map_err(err)?;
    Ok(binarize::surrogate_grad(&t, &u, BinarizeSpec::new(tau).map_err(err)?).map_err(err)?.into_data())
}

#[pyfunction]
#[pyo3(name = "selective_project")]
fn py_selective_project(x_bin: Vec<Vec<f64>>, w: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&binarize::selective_project(&matrix(x_bin)?, &matrix(w)?).map_err(err)?))
}

#[pyfunction]
#[pyo3(name = "nonzero_ratio")]
fn py_nonzero_ratio(x_bin: Vec<f64>) -> PyResult<f64> {
    binarize::nonzero_ratio(&Tensor::new(vec![x_bin.len()], x_bin).map_err(err)?).map_err(err)
}

/// `(additions, multiplications)` for one configuration.
#[pyfunction]
#[pyo3(name = "count_ops")]
#[pyo3(signature = (variant, level, l, d, exact=true))]
fn py_count_ops(variant: &str, level: &str, l: u64, d: u64, exact: bool) -> PyResult<(u64, u64)> {
    let c = energy::count_ops(parse(variant)?, parse(level)?, l, d, exact).map_err(err)?;
    Ok((c.additions, c.multiplications))
}

#[pyfunction]
#[pyo3(name = "energy_ratio")]
#[pyo3(signature = (variant, level, l, d, chip="asic"))]
fn py_energy_ratio(variant: &str, level: &str, l: u64, d: u64, chip: &str) -> PyResult<f64> {
    let chip: Chip = parse(chip)?;
    energy::energy_ratio(parse(variant)?, parse(level)?, &chip.profile(), l, d).map_err(err)
}

/// List of report dicts over the cartesian product of the arguments.
#[pyfunction]
#[pyo3(name = "energy_report")]
fn py_energy_report<'py>(
    py: Python<'py>,
    variants: Vec<String>,
    levels: Vec<String>,
    chips: Vec<String>,
    ls: Vec<u64>,
    ds: Vec<u64>,
) -> PyResult<Bound<'py, PyAny>> {
    let variants = variants.iter().map(|s| parse::<AttentionKind>(s)).collect::<PyResult<Vec<_>>>()?;
    let levels = levels.iter().map(|s| parse::<CostLevel>(s)).collect::<PyResult<Vec<_>>>()?;
    let chips = chips.iter().map(|s| parse::<Chip>(s).map(Chip::profile)).collect::<PyResult<Vec<_>>>()?;
    let rows = energy::report_sweep(&variants, &levels, &chips, &ls, &ds).map_err(err)?;
    to_py_json(py, &rows)
}

/// Counts the scalar operations of one instrumented forward pass.
#[pyfunction]
#[pyo3(name = "measure_ops")]
#[pyo3(signature = (variant, level, l, d, seed=0))]
fn py_measure_ops<'py>(py: Python<'py>, variant: &str, level: &str, l: usize, d: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    to_py_json(py, &energy::measure_ops(parse(variant)?, parse(level)?, l, d, seed).map_err(err)?)
}

#[pyfunction]
#[pyo3(name = "gradcheck")]
#[pyo3(signature = (op, seed=7, trials=3))]
fn py_gradcheck<'py>(py: Python<'py>, op: &str, seed: u64, trials: usize) -> PyResult<Bound<'py, PyAny>> {
    let op: GradOp = parse(op)?;
    to_py_json(py, &run_gradcheck(op, seed, trials).map_err(err)?)
}

/// Toy-task training state. Construct, call `run`, inspect `history`.
#[pyclass(name = "Trainer")]
struct PyTrainer {
    state: TrainState,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (task="copy", attention="all=vanilla", steps=3000, d=32, layers=2, heads=2, seed=1,
                        batch_size=32, train_examples=20000, eval_examples=256, min_len=None, encoder_only=false))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        task: &str,
        attention: &str,
        steps: u64,
        d: usize,
        layers: usize,
        heads: usize,
        seed: u64,
        batch_size: usize,
        train_examples: usize,
        eval_examples: usize,
        min_len: Option<usize>,
        encoder_only: bool,
    ) -> PyResult<Self> {
        let task = ToyTaskConfig {
            task: parse::<Task>(task)?,
            seed,
            train_examples,
            eval_examples,
            min_len,
            ..Default::default()
        };
        let model = ModelConfig {
            d,
            layers,
            heads,
            ffn_dim: 4 * d,
            attention: RoleKinds::all(AttentionKind::Vanilla).parse_onto(attention).map_err(err)?,
            architecture: if encoder_only { Architecture::EncoderOnly } else { Architecture::EncoderDecoder },
            ..Default::default()
        };
        let options = TrainOptions { steps, batch_size, ..Default::default() };
        Ok(Self { state: TrainState::new(&model, &task, &options).map_err(err)? })
    }

    /// Trains for `steps` more steps (default: the configured total).
    #[pyo3(signature = (steps=None))]
    fn run(&mut self, py: Python<'_>, steps: Option<u64>) -> PyResult<()> {
        let data = generate_task(&self.state.task).map_err(err)?;
        let steps = steps.unwrap_or(self.state.options.steps);
        let state = &mut self.state;
        py.detach(|| state.run(&data, steps)).map_err(err)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.state.step
    }

    #[getter]
    fn final_accuracy(&self) -> Option<f64> {
        self.state.final_accuracy()
    }

    #[getter]
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py_json(py, &self.state.history)
    }

    fn binarization_stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let data = generate_task(&self.state.task).map_err(err)?;
        to_py_json(py, &collect_binarization_stats(&self.state, &data.eval).map_err(err)?)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.state.save(&dir).map_err(err)
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self { state: TrainState::load(&dir).map_err(err)? })
    }
}

#[pymodule]
#[pyo3(name = "eatt")]
fn eatt_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyAttention>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(py_binarize, m)?)?;
    m.add_function(wrap_pyfunction!(py_surrogate_grad, m)?)?;
    m.add_function(wrap_pyfunction!(py_selective_project, m)?)?;
    m.add_function(wrap_pyfunction!(py_nonzero_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(py_count_ops, m)?)?;
    m.add_function(wrap_pyfunction!(py_energy_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(py_energy_report, m)?)?;
    m.add_function(wrap_pyfunction!(py_measure_ops, m)?)?;
    m.add_function(wrap_pyfunction!(py_gradcheck, m)?)?;
    m.add("EattError", m.py().get_type::<EattError>())?;
    m.add("DivergenceError", m.py().get_type::<DivergenceError>())?;
    Ok(())
}
