//! Python bindings. Arrays cross the boundary as nested lists of floats.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use mrdl_core::checkpoint::Checkpoint;
use mrdl_core::encoding::{self, DescriptorBatch};
use mrdl_core::fusion::{parse_levels, Model};
use mrdl_core::numkernel::{Matrix, Tensor4};
use mrdl_core::optim::{self, RngState, TrainConfig};
use mrdl_core::texdata::{self, Dataset, LabeledImage, SyntheticSpec};
use mrdl_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Matrix::from_vec(n, d, rows.concat()).map_err(py_err)
}

fn nested(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn image(pixels: &[Vec<f64>]) -> PyResult<Tensor4> {
    let side = pixels.len();
    if pixels.iter().any(|r| r.len() != side) {
        return Err(PyValueError::new_err("image must be square"));
    }
    Tensor4::from_vec([1, 1, side, side], pixels.concat()).map_err(py_err)
}

/// K codewords of dimension D with one smoothing factor each.
#[pyclass(name = "Codebook", module = "mrdl", skip_from_py_object)]
#[derive(Clone)]
struct PyCodebook {
    inner: encoding::Codebook,
}

#[pymethods]
impl PyCodebook {
    #[new]
    fn new(codewords: Vec<Vec<f64>>, smoothing: Vec<f64>) -> PyResult<Self> {
        let inner = encoding::Codebook::new(matrix(&codewords)?, smoothing).map_err(py_err)?;
        Ok(PyCodebook { inner })
    }

    /// Codewords uniform in ±1/√K, smoothing factors in (0, 1].
    #[staticmethod]
    fn random(k: usize, d: usize, seed: u64) -> PyResult<Self> {
        let inner = encoding::init_codebook(k, d, seed).map_err(py_err)?;
        Ok(PyCodebook { inner })
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn codewords(&self) -> Vec<Vec<f64>> {
        nested(self.inner.codewords())
    }

    #[getter]
    fn smoothing(&self) -> Vec<f64> {
        self.inner.smoothing().to_vec()
    }

    /// N×K soft-assignment weights.
    fn assign(&self, descriptors: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let batch = DescriptorBatch::new(matrix(&descriptors)?).map_err(py_err)?;
        let a = encoding::soft_assign(&batch, &self.inner).map_err(py_err)?;
        Ok(nested(a.assignments()))
    }

    /// Normalized K·D encoding of an N×D descriptor set.
    fn encode(&self, descriptors: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let batch = DescriptorBatch::new(matrix(&descriptors)?).map_err(py_err)?;
        let (e, _) = encoding::encode_forward(&batch, &self.inner).map_err(py_err)?;
        Ok(e.into_vec())
    }

    fn __repr__(&self) -> String {
        format!("Codebook(k={}, d={})", self.inner.k(), self.inner.d())
    }
}

/// Backbone, per-level encoders and fused classifier.
#[pyclass(name = "Model", module = "mrdl", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: Model,
    config: TrainConfig,
    rng: Option<RngState>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (levels="1,2,3", dict_size=8, image_size=32, classes=4, shared_dim=64, seed=0))]
    fn new(
        levels: &str,
        dict_size: usize,
        image_size: usize,
        classes: usize,
        shared_dim: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let config = TrainConfig {
            levels: parse_levels(levels).map_err(py_err)?,
            dict_size,
            shared_dim,
            seed,
            ..TrainConfig::default()
        };
        let mc = config.model_config(image_size, classes).map_err(py_err)?;
        let inner = Model::new(mc, seed).map_err(py_err)?;
        Ok(PyModel {
            inner,
            config,
            rng: None,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(py_err)?;
        Ok(PyModel {
            inner: ck.model().map_err(py_err)?,
            config: ck.config,
            rng: Some(ck.rng),
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let rng = self
            .rng
            .clone()
            .unwrap_or_else(|| RngState::initial(self.config.seed));
        Checkpoint::new(self.config.clone(), &self.inner, rng)
            .save(path)
            .map_err(py_err)
    }

    #[getter]
    fn levels(&self) -> Vec<usize> {
        self.inner.config.levels.clone()
    }

    #[getter]
    fn omega(&self) -> Vec<f64> {
        self.inner.omega()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.params.param_count()
    }

    fn logits(&self, pixels: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        Ok(self.inner.forward(&image(&pixels)?).map_err(py_err)?.0.logits)
    }

    /// Fused M-dimensional feature vector.
    fn features(&self, pixels: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        Ok(self.inner.forward(&image(&pixels)?).map_err(py_err)?.0.fused)
    }

    fn predict(&self, pixels: Vec<Vec<f64>>) -> PyResult<usize> {
        self.inner.predict(&image(&pixels)?).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(levels={:?}, dict_size={}, params={})",
            self.inner.config.levels,
            self.inner.config.dict_size,
            self.inner.params.param_count()
        )
    }
}

type Sample = (Vec<Vec<f64>>, usize, u64);

fn to_samples(d: &Dataset) -> Vec<Sample> {
    d.images
        .iter()
        .map(|img| {
            let s = img.size();
            let rows = img.pixels.data().chunks(s).map(<[f64]>::to_vec).collect();
            (rows, img.label, img.group)
        })
        .collect()
}

fn to_dataset(samples: &[Sample]) -> PyResult<Dataset> {
    let Some(first) = samples.first() else {
        return Err(PyValueError::new_err("empty dataset"));
    };
    let size = first.0.len();
    let images = samples
        .iter()
        .map(|(px, label, group)| {
            let t = image(px)?;
            LabeledImage::new(t.height(), t.into_vec(), *label, *group).map_err(py_err)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let classes = images.iter().map(|i| i.label).max().unwrap_or(0) + 1;
    Dataset::new(classes.max(2), size, images).map_err(py_err)
}

/// The default four-class texture set as `(pixels, label, group)` tuples.
#[pyfunction]
#[pyo3(signature = (n_per_class, seed=0))]
fn generate(n_per_class: usize, seed: u64) -> PyResult<Vec<Sample>> {
    let d = texdata::generate(&SyntheticSpec::default_with_seed(seed), n_per_class).map_err(py_err)?;
    Ok(to_samples(&d))
}

/// Trains a fresh model; returns it with per-epoch loss, accuracy and ω.
#[pyfunction]
#[pyo3(signature = (train, val, levels="1,2,3", dict_size=8, epochs=10, lr=0.05, batch_size=16, seed=0, grad_clip=Some(1.0)))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    train: Vec<Sample>,
    val: Vec<Sample>,
    levels: &str,
    dict_size: usize,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    grad_clip: Option<f64>,
) -> PyResult<(PyModel, Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    let cfg = TrainConfig {
        levels: parse_levels(levels).map_err(py_err)?,
        dict_size,
        epochs,
        lr,
        batch_size,
        seed,
        grad_clip,
        ..TrainConfig::default()
    };
    let train_set = to_dataset(&train)?;
    let val_set = to_dataset(&val)?;
    let out = py
        .detach(|| optim::fit(&train_set, &val_set, &cfg))
        .map_err(py_err)?;
    let m = out.metrics;
    Ok((
        PyModel {
            inner: out.model,
            config: cfg,
            rng: Some(out.rng),
        },
        m.loss,
        m.val_acc,
        m.omega,
    ))
}

/// Most frequent label; ties go to the lowest label.
#[pyfunction]
fn majority_vote(labels: Vec<usize>) -> PyResult<usize> {
    texdata::majority_vote(&labels).map_err(py_err)
}

/// Finite-difference check of the full model; returns
/// `(all_passed, {group: max_rel_err})`.
#[pyfunction]
#[pyo3(signature = (levels="1,2,3", dict_size=2, seed=0, tol=1e-4))]
fn gradcheck(
    levels: &str,
    dict_size: usize,
    seed: u64,
    tol: f64,
) -> PyResult<(bool, Vec<(String, f64)>)> {
    let cfg = mrdl_core::fusion::ModelConfig {
        image_size: 8,
        widths: [4, 8, 16],
        levels: parse_levels(levels).map_err(py_err)?,
        dict_size,
        shared_dim: 8,
        classes: 2,
        ..Default::default()
    };
    let r = optim::gradcheck(&cfg, seed, tol).map_err(py_err)?;
    let groups = r.groups.iter().map(|g| (g.name.clone(), g.max_rel_err)).collect();
    Ok((r.all_passed(), groups))
}

#[pymodule]
fn mrdl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCodebook>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(majority_vote, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
