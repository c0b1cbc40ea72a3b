//! Python bindings: norm bounds, the contraction mapping, the loss family
//! (values and gradients), and the FROC/CPM detection metrics.
//!
//! Matrices cross the boundary as nested lists; features are [m][d], weights
//! are [d][c] with column j holding the class-j weight vector.

use cmsoftmax::analysis::{cpm as cpm_impl, froc as froc_impl, FrocCandidate, FrocInput};
use cmsoftmax::autodiff::Graph;
use cmsoftmax::losses::{
    cm_margin_softmax_loss, cm_softmax_loss, fixed_margin_loss, fixed_norm_loss, lower_bound,
    plain_softmax_loss, upper_bound, ClassifierHead, ContractionSpec, FixedNormSpec, LossOutput,
    MarginSpec, MarginVariant,
};
use cmsoftmax::{Error, Tensor};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_variant(name: &str) -> PyResult<MarginVariant> {
    match name {
        "additive_angle" => Ok(MarginVariant::AdditiveAngle),
        "additive_cosine" => Ok(MarginVariant::AdditiveCosine),
        other => Err(PyValueError::new_err(format!(
            "unknown margin variant `{other}` (use additive_angle or additive_cosine)"
        ))),
    }
}

/// (s_lower, s_upper) for a designated true-class probability and class count.
#[pyfunction]
fn bounds(p: f64, classes: usize) -> PyResult<(f64, f64)> {
    let lo = lower_bound(p, classes).map_err(to_py)?;
    let hi = upper_bound(lo).map_err(to_py)?;
    Ok((lo, hi))
}

/// Feature-norm compression map with cached bounds.
#[pyclass(name = "ContractionSpec")]
struct PyContractionSpec {
    inner: ContractionSpec,
}

#[pymethods]
impl PyContractionSpec {
    #[new]
    #[pyo3(signature = (p, classes, gamma=1.0))]
    fn new(p: f64, classes: usize, gamma: f64) -> PyResult<Self> {
        Ok(PyContractionSpec {
            inner: ContractionSpec::new(p, classes, gamma).map_err(to_py)?,
        })
    }

    #[getter]
    fn s_lower(&self) -> f64 {
        self.inner.s_lower()
    }

    #[getter]
    fn s_upper(&self) -> f64 {
        self.inner.s_upper()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma()
    }

    fn apply(&self, norm: f64) -> PyResult<f64> {
        self.inner.apply(norm).map_err(to_py)
    }

    fn apply_many(&self, norms: Vec<f64>) -> PyResult<Vec<f64>> {
        norms
            .into_iter()
            .map(|n| self.inner.apply(n).map_err(to_py))
            .collect()
    }

    fn derivative(&self, norm: f64) -> f64 {
        self.inner.derivative(norm)
    }

    fn __repr__(&self) -> String {
        format!(
            "ContractionSpec(p={}, classes={}, gamma={}, s_lower={:.6}, s_upper={:.6})",
            self.inner.p(),
            self.inner.classes(),
            self.inner.gamma(),
            self.inner.s_lower(),
            self.inner.s_upper()
        )
    }
}

/// Angular / cosine margin on the true-class score.
#[pyclass(name = "MarginSpec")]
struct PyMarginSpec {
    inner: MarginSpec,
}

#[pymethods]
impl PyMarginSpec {
    #[new]
    fn new(variant: &str, margin: f64) -> PyResult<Self> {
        Ok(PyMarginSpec {
            inner: MarginSpec::new(parse_variant(variant)?, margin).map_err(to_py)?,
        })
    }

    fn psi(&self, cosine: f64) -> f64 {
        self.inner.psi(cosine)
    }
}

/// Loss value plus everything backward produced.
#[pyclass]
struct LossResult {
    #[pyo3(get)]
    loss: f64,
    /// P_{y_i} per sample.
    #[pyo3(get)]
    probabilities: Vec<f64>,
    #[pyo3(get)]
    norms: Vec<f64>,
    #[pyo3(get)]
    cosines: Vec<Vec<f64>>,
    #[pyo3(get)]
    logits: Vec<Vec<f64>>,
    #[pyo3(get)]
    grad_features: Vec<Vec<f64>>,
    #[pyo3(get)]
    grad_weights: Vec<Vec<f64>>,
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let (n, c) = (t.shape()[0], t.shape()[1]);
    (0..n)
        .map(|i| (0..c).map(|j| t.at2(i, j)).collect())
        .collect()
}

fn run_loss<F>(
    features: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
    labels: Vec<usize>,
    build: F,
) -> PyResult<LossResult>
where
    F: FnOnce(
        &mut Graph,
        cmsoftmax::autodiff::NodeId,
        &ClassifierHead,
        &[usize],
    ) -> cmsoftmax::Result<LossOutput>,
{
    let x = Tensor::from_rows(&features).map_err(to_py)?;
    let w = Tensor::from_rows(&weights).map_err(to_py)?;
    let mut g = Graph::new();
    let xn = g.param(x);
    let wn = g.param(w);
    let head = ClassifierHead::new(&g, wn).map_err(to_py)?;
    let out = build(&mut g, xn, &head, &labels).map_err(to_py)?;
    g.backward(out.loss).map_err(to_py)?;
    Ok(LossResult {
        loss: out.loss_value,
        probabilities: out.probabilities.data().to_vec(),
        norms: out.norms.data().to_vec(),
        cosines: rows_of(&out.cosines),
        logits: rows_of(&out.logits),
        grad_features: rows_of(g.grad(xn).expect("grad populated")),
        grad_weights: rows_of(g.grad(wn).expect("grad populated")),
    })
}

/// Softmax over ||x|| * cos(theta) (zero bias, unit weight columns).
#[pyfunction]
fn plain_softmax(
    features: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
    labels: Vec<usize>,
) -> PyResult<LossResult> {
    run_loss(features, weights, labels, |g, x, head, y| {
        plain_softmax_loss(g, x, head, y)
    })
}

/// Softmax over s * cos(theta).
#[pyfunction]
#[pyo3(signature = (features, weights, labels, s=10.0))]
fn fixed_norm_softmax(
    features: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
    labels: Vec<usize>,
    s: f64,
) -> PyResult<LossResult> {
    let spec = FixedNormSpec::new(s).map_err(to_py)?;
    run_loss(features, weights, labels, |g, x, head, y| {
        fixed_norm_loss(g, x, head, y, &spec)
    })
}

/// Softmax over f(||x||) * cos(theta); bounds use the head's class count.
#[pyfunction]
#[pyo3(signature = (features, weights, labels, p=0.9, gamma=1.0))]
fn cm_softmax(
    features: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
    labels: Vec<usize>,
    p: f64,
    gamma: f64,
) -> PyResult<LossResult> {
    let classes = weights.first().map_or(0, Vec::len);
    let spec = ContractionSpec::new(p, classes, gamma).map_err(to_py)?;
    run_loss(features, weights, labels, |g, x, head, y| {
        cm_softmax_loss(g, x, head, y, &spec)
    })
}

/// Contraction-mapped softmax with a true-class margin.
#[pyfunction]
#[pyo3(signature = (features, weights, labels, p=0.9, gamma=1.0, variant="additive_angle", margin=0.5))]
fn cm_margin_softmax(
    features: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
    labels: Vec<usize>,
    p: f64,
    gamma: f64,
    variant: &str,
    margin: f64,
) -> PyResult<LossResult> {
    let classes = weights.first().map_or(0, Vec::len);
    let spec = ContractionSpec::new(p, classes, gamma).map_err(to_py)?;
    let margin = MarginSpec::new(parse_variant(variant)?, margin).map_err(to_py)?;
    run_loss(features, weights, labels, |g, x, head, y| {
        cm_margin_softmax_loss(g, x, head, y, &spec, &margin)
    })
}

/// Fixed-norm softmax with a true-class margin.
#[pyfunction]
#[pyo3(signature = (features, weights, labels, s=10.0, variant="additive_angle", margin=0.5))]
fn fixed_margin_softmax(
    features: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
    labels: Vec<usize>,
    s: f64,
    variant: &str,
    margin: f64,
) -> PyResult<LossResult> {
    let spec = FixedNormSpec::new(s).map_err(to_py)?;
    let margin = MarginSpec::new(parse_variant(variant)?, margin).map_err(to_py)?;
    run_loss(features, weights, labels, |g, x, head, y| {
        fixed_margin_loss(g, x, head, y, &spec, &margin)
    })
}

/// FROC curve from (scan_id, score, is_true_nodule) candidates:
/// [(fps_per_scan, sensitivity), ...] over descending score thresholds.
#[pyfunction]
fn froc(
    candidates: Vec<(usize, f64, bool)>,
    n_scans: usize,
    n_ground_truth: usize,
) -> PyResult<Vec<(f64, f64)>> {
    let candidates = candidates
        .into_iter()
        .map(|(scan_id, score, is_true_nodule)| FrocCandidate {
            scan_id,
            score,
            is_true_nodule,
        })
        .collect();
    let input = FrocInput::new(candidates, n_scans, n_ground_truth).map_err(to_py)?;
    Ok(froc_impl(&input))
}

/// Mean sensitivity at FPs/scan in {1/8, 1/4, 1/2, 1, 2, 4, 8}, linearly
/// interpolated on the curve.
#[pyfunction]
fn cpm(curve: Vec<(f64, f64)>) -> PyResult<f64> {
    cpm_impl(&curve).map_err(to_py)
}

#[pymodule]
fn cmsoftmax_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyContractionSpec>()?;
    m.add_class::<PyMarginSpec>()?;
    m.add_class::<LossResult>()?;
    m.add_function(wrap_pyfunction!(bounds, m)?)?;
    m.add_function(wrap_pyfunction!(plain_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(fixed_norm_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(cm_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(cm_margin_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(fixed_margin_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(froc, m)?)?;
    m.add_function(wrap_pyfunction!(cpm, m)?)?;
    Ok(())
}
