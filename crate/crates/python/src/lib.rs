use mosgplda::corpus::{self, LabeledVectorSet, SpeakerGroup, SynthConfig, Trial, TrialLabel, TrialList, VectorFormat};
use mosgplda::metrics::{self, DcfParams};
use mosgplda::plda::{self, PldaModel, SelectionStrategy, TrainConfig, TrainingLog};
use mosgplda::preprocess::{self, LdaTransform};
use mosgplda::scoring::{self, EnrollPooling, KernelMode};
use mosgplda::Error;
use nalgebra::DVector;
use pyo3::exceptions::{PyIOError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::MissingIds(_) => PyKeyError::new_err(e.to_string()),
        Error::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

fn vector(v: Vec<f64>) -> DVector<f64> {
    DVector::from_vec(v)
}

/// Speaker-labeled vectors.
#[pyclass(name = "VectorSet", module = "pymosgplda", frozen)]
struct PyVectorSet {
    inner: LabeledVectorSet,
}

#[pymethods]
impl PyVectorSet {
    /// Builds a set from `(speaker_id, segment_id, vector)` records; speakers
    /// keep their first-seen order.
    #[staticmethod]
    fn from_records(records: Vec<(String, String, Vec<f64>)>) -> PyResult<Self> {
        let dim = records.first().map(|r| r.2.len()).ok_or_else(|| to_py(Error::Empty))?;
        let mut speakers: Vec<SpeakerGroup> = Vec::new();
        for (spk, seg, v) in records {
            let pos = match speakers.iter().position(|g| g.speaker_id == spk) {
                Some(p) => p,
                None => {
                    speakers.push(SpeakerGroup { speaker_id: spk, segment_ids: vec![], vectors: vec![] });
                    speakers.len() - 1
                }
            };
            speakers[pos].segment_ids.push(seg);
            speakers[pos].vectors.push(vector(v));
        }
        LabeledVectorSet::new(dim, speakers).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let format = VectorFormat::from_path(path.as_ref());
        corpus::load_vectors(path, format).map(|inner| Self { inner }).map_err(to_py)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        corpus::save_vectors(&self.inner, path, VectorFormat::from_path(path.as_ref())).map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn n_speakers(&self) -> usize {
        self.inner.n_speakers()
    }

    #[getter]
    fn n_vectors(&self) -> usize {
        self.inner.n_vectors()
    }

    fn speaker_ids(&self) -> Vec<String> {
        self.inner.speakers().iter().map(|g| g.speaker_id.clone()).collect()
    }

    /// `(speaker_id, segment_id, vector)` for every vector in storage order.
    fn records(&self) -> Vec<(String, String, Vec<f64>)> {
        self.inner
            .speakers()
            .iter()
            .flat_map(|g| {
                g.segment_ids
                    .iter()
                    .zip(&g.vectors)
                    .map(move |(s, v)| (g.speaker_id.clone(), s.clone(), v.iter().copied().collect()))
            })
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.n_vectors()
    }

    fn __repr__(&self) -> String {
        format!("VectorSet(dim={}, speakers={}, vectors={})", self.inner.dim(), self.inner.n_speakers(), self.inner.n_vectors())
    }
}

/// A trained backend: the sGPLDA parameters plus the optional LDA front end.
#[pyclass(name = "Model", module = "pymosgplda", frozen)]
struct PyModel {
    model: PldaModel,
    lda: Option<LdaTransform>,
    log: Option<TrainingLog>,
}

#[pymethods]
impl PyModel {
    /// Length-normalizes, optionally applies LDA and re-normalizes, then
    /// trains with the single (`"so"`) or multi-objective (`"mo"`) criterion.
    #[staticmethod]
    #[pyo3(signature = (data, rank, mode = "so", alpha = 1.7, iterations = 10, select = "nearest", seed = 0, lda_dim = None))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        data: &PyVectorSet,
        rank: usize,
        mode: &str,
        alpha: f64,
        iterations: usize,
        select: &str,
        seed: u64,
        lda_dim: Option<usize>,
    ) -> PyResult<Self> {
        let cfg = TrainConfig {
            rank,
            alpha,
            iterations,
            selection: parse::<SelectionStrategy>(select)?,
            seed,
            ..TrainConfig::default()
        };
        let (prepared, lda) = preprocess::prepare_training(&data.inner, lda_dim).map_err(to_py)?;
        let (model, log) = match mode {
            "so" => plda::train_so(&prepared, &cfg),
            "mo" => plda::train_mo(&prepared, &cfg),
            other => return Err(PyValueError::new_err(format!("mode must be \"so\" or \"mo\", got {other:?}"))),
        }
        .map_err(to_py)?;
        Ok(Self { model, lda, log: Some(log) })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (model, lda) = plda::load_model(path).map_err(to_py)?;
        Ok(Self { model, lda, log: None })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        plda::save_model(&self.model, self.lda.as_ref(), path).map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.model.dim()
    }

    #[getter]
    fn rank(&self) -> usize {
        self.model.rank()
    }

    #[getter]
    fn alpha(&self) -> Option<f64> {
        self.model.alpha
    }

    #[getter]
    fn lda_dim(&self) -> Option<usize> {
        self.lda.as_ref().map(LdaTransform::out_dim)
    }

    /// Speaker space `F` as a list of rows.
    #[getter]
    fn speaker_space(&self) -> Vec<Vec<f64>> {
        self.model.f.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    /// `(iteration, f, g, combined)` per EM iteration; empty for loaded models.
    #[getter]
    fn training_log(&self) -> Vec<(usize, f64, Option<f64>, Option<f64>)> {
        self.log
            .iter()
            .flat_map(|l| l.iterations.iter())
            .map(|r| (r.iteration, r.f_value, r.g_value, r.combined))
            .collect()
    }

    /// Raw kernel score of two vectors already in model space.
    #[pyo3(signature = (x1, x2, kernel = "between"))]
    fn score_pair(&self, x1: Vec<f64>, x2: Vec<f64>, kernel: &str) -> PyResult<f64> {
        let k = scoring::build_kernel(&self.model, parse::<KernelMode>(kernel)?).map_err(to_py)?;
        k.score_pair(&vector(x1), &vector(x2)).map_err(to_py)
    }

    /// Scores `(model_id, segment_id)` pairs after the model's preprocessing.
    #[pyo3(signature = (enroll, test, trials, kernel = "between", pooling = "mean"))]
    fn score_trials(
        &self,
        enroll: &PyVectorSet,
        test: &PyVectorSet,
        trials: Vec<(String, String)>,
        kernel: &str,
        pooling: &str,
    ) -> PyResult<Vec<f64>> {
        let enroll = preprocess::prepare_vectors(&enroll.inner, self.lda.as_ref()).map_err(to_py)?;
        let test = preprocess::prepare_vectors(&test.inner, self.lda.as_ref()).map_err(to_py)?;
        let list = TrialList::new(
            trials
                .into_iter()
                .map(|(model_id, segment_id)| Trial { model_id, segment_id, label: TrialLabel::Unknown })
                .collect(),
        )
        .map_err(to_py)?;
        let k = scoring::build_kernel(&self.model, parse::<KernelMode>(kernel)?).map_err(to_py)?;
        let scores = scoring::score_trials(&k, &enroll, &test, &list, parse::<EnrollPooling>(pooling)?).map_err(to_py)?;
        Ok(scores.values())
    }

    fn __repr__(&self) -> String {
        format!("Model(dim={}, rank={}, alpha={:?}, lda_dim={:?})", self.model.dim(), self.model.rank(), self.model.alpha, self.lda_dim())
    }
}

#[pyfunction]
#[pyo3(signature = (n_speakers, sessions, dim, rank, noise_scale = 1.0, seed = 0))]
fn generate_synthetic(n_speakers: usize, sessions: usize, dim: usize, rank: usize, noise_scale: f64, seed: u64) -> PyResult<PyVectorSet> {
    let cfg = SynthConfig { n_speakers, sessions_per_speaker: sessions, dim, rank, noise_scale, seed };
    let (inner, _) = corpus::generate_synthetic(&cfg).map_err(to_py)?;
    Ok(PyVectorSet { inner })
}

#[pyfunction]
fn length_normalize(x: Vec<f64>) -> PyResult<Vec<f64>> {
    preprocess::length_normalize(&vector(x)).map(|v| v.iter().copied().collect()).map_err(to_py)
}

/// `(threshold, p_miss, p_fa)` points, ending with the reject-all point.
#[pyfunction]
fn det_curve(targets: Vec<f64>, nontargets: Vec<f64>) -> PyResult<Vec<(f64, f64, f64)>> {
    let pts = metrics::det_curve(&targets, &nontargets).map_err(to_py)?;
    Ok(pts.into_iter().map(|p| (p.threshold, p.p_miss, p.p_fa)).collect())
}

#[pyfunction]
fn eer(targets: Vec<f64>, nontargets: Vec<f64>) -> PyResult<f64> {
    Ok(metrics::eer_from_det(&metrics::det_curve(&targets, &nontargets).map_err(to_py)?))
}

#[pyfunction]
#[pyo3(signature = (targets, nontargets, fa_weight = 100.0, miss_weight = 1.0))]
fn min_dcf(targets: Vec<f64>, nontargets: Vec<f64>, fa_weight: f64, miss_weight: f64) -> PyResult<f64> {
    let params = DcfParams { fa_weight, miss_weight };
    params.validate().map_err(to_py)?;
    Ok(metrics::min_dcf_from_det(&metrics::det_curve(&targets, &nontargets).map_err(to_py)?, &params))
}

#[pymodule]
fn pymosgplda(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVectorSet>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(length_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(det_curve, m)?)?;
    m.add_function(wrap_pyfunction!(eer, m)?)?;
    m.add_function(wrap_pyfunction!(min_dcf, m)?)?;
    Ok(())
}
