//! Python bindings: corpora, models, training, evaluation and gradient
//! checks.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use stlstm::cells::{ConstraintTarget, GateAblation, Variant};
use stlstm::checkpoint::Checkpoint;
use stlstm::cli::gradcheck_suite;
use stlstm::data::{
    build_corpus, clean, haversine as haversine_km, load_checkins, synth_corpus, Corpus, GeoPoint, InputFormat,
    SynthConfig, SynthPattern, TransitionTriple,
};
use stlstm::error::Error;
use stlstm::eval::{evaluate, Cohort, EvalConfig, ModelRecommender};
use stlstm::model::{predict_topk, ModelConfig};
use stlstm::numkit::ParamSet;
use stlstm::optim::AdamConfig;
use stlstm::train::{train, TrainConfig, TrainState};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

/// Preprocessed check-in corpus with a chronological train/test split per user.
#[pyclass(name = "Corpus", module = "stlstm_py", frozen)]
pub struct PyCorpus {
    inner: Corpus,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCorpus {
            inner: Corpus::load(&path).map_err(py_err)?,
        })
    }

    /// Loads raw check-ins, cleans them to the fixed point and builds a corpus.
    #[staticmethod]
    #[pyo3(signature = (path, format = "snap", min_user_checkins = 10, min_poi_users = 10, train_frac = 0.7))]
    fn from_checkins(
        path: PathBuf,
        format: &str,
        min_user_checkins: usize,
        min_poi_users: usize,
        train_frac: f64,
    ) -> PyResult<Self> {
        let format: InputFormat = parse(format)?;
        let raw = load_checkins(&path, format).map_err(py_err)?;
        let cleaned = clean(&raw, min_user_checkins, min_poi_users);
        Ok(PyCorpus {
            inner: build_corpus(&cleaned, train_frac),
        })
    }

    #[staticmethod]
    #[pyo3(signature = (seed, n_users, n_pois, cycle_len = 3, checkins_per_user = 30, jump_prob = 0.0))]
    fn periodic(
        seed: u64,
        n_users: usize,
        n_pois: usize,
        cycle_len: usize,
        checkins_per_user: usize,
        jump_prob: f64,
    ) -> Self {
        let mut cfg = SynthConfig::periodic(seed, n_users, n_pois, cycle_len);
        cfg.checkins_per_user = checkins_per_user;
        cfg.pattern = SynthPattern::Periodic { cycle_len, jump_prob };
        PyCorpus {
            inner: synth_corpus(&cfg),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (seed, n_users, n_pois, switch_prob = 0.3, checkins_per_user = 40))]
    fn interval_switch(seed: u64, n_users: usize, n_pois: usize, switch_prob: f64, checkins_per_user: usize) -> Self {
        let mut cfg = SynthConfig::interval_switch(seed, n_users, n_pois);
        cfg.checkins_per_user = checkins_per_user;
        if let SynthPattern::IntervalSwitch { cluster_size, .. } = cfg.pattern {
            cfg.pattern = SynthPattern::IntervalSwitch {
                cluster_size,
                switch_prob,
            };
        }
        PyCorpus {
            inner: synth_corpus(&cfg),
        }
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn n_pois(&self) -> usize {
        self.inner.n_pois()
    }

    #[getter]
    fn n_users(&self) -> usize {
        self.inner.users.len()
    }

    #[getter]
    fn n_checkins(&self) -> usize {
        self.inner.n_checkins()
    }

    #[getter]
    fn vocab(&self) -> Vec<String> {
        self.inner.vocab.clone()
    }

    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    /// `(user id, dense POI ids, number of training check-ins)`.
    fn user(&self, index: usize) -> PyResult<(String, Vec<usize>, usize)> {
        let u = self
            .inner
            .users
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("user index {index} out of range")))?;
        Ok((u.user.clone(), u.pois.clone(), u.n_train))
    }

    fn __len__(&self) -> usize {
        self.inner.users.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Corpus(users={}, pois={}, checkins={})",
            self.inner.users.len(),
            self.inner.n_pois(),
            self.inner.n_checkins()
        )
    }
}

/// A next-POI model together with its optimizer state.
#[pyclass(name = "Model", module = "stlstm_py")]
pub struct PyModel {
    config: ModelConfig,
    state: TrainState,
    seed: u64,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (variant, vocab, cell_size = 128, embed_size = 128, ablation = "full", constraint_target = "interval", seed = 0, lr = 1e-3))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        variant: &str,
        vocab: usize,
        cell_size: usize,
        embed_size: usize,
        ablation: &str,
        constraint_target: &str,
        seed: u64,
        lr: f64,
    ) -> PyResult<Self> {
        let variant: Variant = parse(variant)?;
        let mut config = ModelConfig::new(variant, vocab).with_sizes(embed_size, cell_size);
        config.ablation = parse::<GateAblation>(ablation)?;
        config.constraint_target = parse::<ConstraintTarget>(constraint_target)?;
        let tcfg = TrainConfig {
            seed,
            adam: AdamConfig {
                lr,
                ..Default::default()
            },
            ..Default::default()
        };
        let state = TrainState::new(&config, &tcfg).map_err(py_err)?;
        Ok(PyModel { config, state, seed })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        let (config, seed) = (ck.config, ck.seed);
        let state = match ck.optimizer {
            Some(_) => TrainState::from_checkpoint(ck).map_err(py_err)?,
            None => {
                let mut st = TrainState::from_params(ck.params, AdamConfig::default());
                st.epochs_completed = ck.epochs_completed as usize;
                st
            }
        };
        Ok(PyModel { config, state, seed })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.state
            .checkpoint(&self.config, self.seed)
            .save(&path)
            .map_err(py_err)
    }

    /// Trains for `epochs` more epochs and returns the mean loss of each.
    #[pyo3(signature = (corpus, epochs, batch_size = 10, clip_norm = Some(5.0), parallel = false))]
    fn train(
        &mut self,
        py: Python<'_>,
        corpus: &PyCorpus,
        epochs: usize,
        batch_size: usize,
        clip_norm: Option<f64>,
        parallel: bool,
    ) -> PyResult<Vec<f64>> {
        let cfg = TrainConfig {
            epochs: self.state.epochs_completed + epochs,
            batch_size,
            adam: self.state.adam.config,
            clip_norm,
            seed: self.seed,
            parallel,
            ..Default::default()
        };
        let (state, config, corpus) = (&mut self.state, &self.config, &corpus.inner);
        let out = py
            .detach(|| train(state, config, &cfg, corpus, |_, _| Ok(())))
            .map_err(py_err)?;
        Ok(out.logs.iter().map(|l| l.mean_loss).collect())
    }

    /// Held-out metrics as a dict with `acc@K` keys, `map`, `n_instances`
    /// and `n_users`.
    #[pyo3(signature = (corpus, cohort = "all", cold_threshold = 5, exclude_visited = false))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        corpus: &PyCorpus,
        cohort: &str,
        cold_threshold: usize,
        exclude_visited: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let cohort: Cohort = parse(cohort)?;
        let cfg = EvalConfig {
            cold_threshold,
            exclude_visited,
            parallel: false,
        };
        let rec = ModelRecommender {
            params: &self.state.params,
            config: &self.config,
        };
        let corpus = &corpus.inner;
        let (report, _) = py.detach(|| evaluate(&rec, corpus, cohort, &cfg)).map_err(py_err)?;
        let d = PyDict::new(py);
        for (k, a) in &report.acc {
            d.set_item(format!("acc@{k}"), a)?;
        }
        d.set_item("map", report.map)?;
        d.set_item("n_instances", report.n_instances)?;
        d.set_item("n_users", report.n_users)?;
        Ok(d)
    }

    /// Top-k POI ids after a history of `(poi, dt_hours, dd_km)` steps.
    fn predict_topk(&self, history: Vec<(usize, f64, f64)>, k: usize) -> PyResult<Vec<usize>> {
        let seq: Vec<TransitionTriple> = history
            .into_iter()
            .map(|(poi, dt, dd)| TransitionTriple { poi, dt, dd })
            .collect();
        predict_topk(&self.state.params, &seq, k, &self.config).map_err(py_err)
    }

    /// Flat values and shape of a named parameter tensor.
    fn tensor(&self, name: &str) -> PyResult<(Vec<f64>, Vec<usize>)> {
        self.state
            .params
            .tensors()
            .into_iter()
            .find(|t| t.name == name)
            .map(|t| (t.data.to_vec(), t.shape.dims()))
            .ok_or_else(|| PyValueError::new_err(format!("no tensor named `{name}`")))
    }

    fn tensor_names(&self) -> Vec<&'static str> {
        self.state.params.tensors().iter().map(|t| t.name).collect()
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.config.variant.name()
    }

    #[getter]
    fn ablation(&self) -> String {
        self.config.ablation.label()
    }

    #[getter]
    fn epochs_completed(&self) -> usize {
        self.state.epochs_completed
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.state.params.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(variant={}, ablation={}, vocab={}, cell={}, embed={}, epochs={})",
            self.config.variant.name(),
            self.config.ablation.label(),
            self.config.vocab,
            self.config.n_c,
            self.config.n_i,
            self.state.epochs_completed
        )
    }
}

/// Great-circle distance in kilometres.
#[pyfunction]
fn haversine(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    haversine_km(GeoPoint::new(lat1, lon1), GeoPoint::new(lat2, lon2))
}

/// Finite-difference check of every variant and ablation. Returns
/// `(variant, ablation, max relative error, passed)` per case.
#[pyfunction]
#[pyo3(signature = (eps = 1e-5, tol = 1e-4, seed = 0))]
fn gradcheck(py: Python<'_>, eps: f64, tol: f64, seed: u64) -> PyResult<Vec<(String, String, f64, bool)>> {
    let cases = py.detach(|| gradcheck_suite(eps, tol, seed)).map_err(py_err)?;
    Ok(cases
        .into_iter()
        .map(|(v, a, r)| (v.name().to_string(), a.label(), r.max_rel_error, r.passed()))
        .collect())
}

#[pymodule]
pub fn stlstm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(haversine, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
