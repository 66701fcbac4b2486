//! Python bindings: graphs, TR3 generation, predictor and generator
//! training, explainers, DSE scoring and full experiment runs.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use dse_core::cvgae::{self, Cvgae, GeneratorConfig, IdentityGenerator, RandomGenerator, SurrogateGenerator};
use dse_core::explainers::{self, ExplainerConfig, ExplainerKind};
use dse_core::frontdoor::{Dse, DseConfig, Estimator};
use dse_core::graph::{parse_dataset, serialize_dataset, Edge, EdgeMask};
use dse_core::nn::Checkpoint;
use dse_core::predictor::{self, PredictorConfig};
use dse_core::tr3::{self, Tr3Config};

create_exception!(dse_py, DseError, PyException);

fn err(e: dse_core::DseError) -> PyErr {
    DseError::new_err(e.to_string())
}

fn edge_list(edges: impl IntoIterator<Item = Edge>) -> Vec<(usize, usize)> {
    edges.into_iter().map(|e| (e.0, e.1)).collect()
}

/// An undirected graph with node features, a class label and an optional
/// ground-truth edge set.
#[pyclass(name = "Graph", module = "dse_py", from_py_object)]
#[derive(Clone)]
pub struct PyGraph {
    inner: dse_core::Graph,
}

#[pymethods]
impl PyGraph {
    #[new]
    #[pyo3(signature = (id, node_count, edges, features, label, ground_truth=None))]
    fn new(
        id: String,
        node_count: usize,
        edges: Vec<(usize, usize)>,
        features: Vec<Vec<f64>>,
        label: usize,
        ground_truth: Option<Vec<(usize, usize)>>,
    ) -> PyResult<Self> {
        let dim = features.first().map_or(0, Vec::len);
        if features.iter().any(|r| r.len() != dim) {
            return Err(DseError::new_err("feature rows must have equal length"));
        }
        let flat: Vec<f64> = features.into_iter().flatten().collect();
        let feats = Array2::from_shape_vec((flat.len() / dim.max(1), dim), flat)
            .map_err(|e| DseError::new_err(e.to_string()))?;
        let inner = dse_core::Graph::new(id, node_count, edges, feats, label, ground_truth).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn id(&self) -> &str {
        self.inner.id()
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    #[getter]
    fn label(&self) -> usize {
        self.inner.label()
    }

    #[getter]
    fn edges(&self) -> Vec<(usize, usize)> {
        edge_list(self.inner.edges().iter().copied())
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        self.inner.features().rows().into_iter().map(|r| r.to_vec()).collect()
    }

    #[getter]
    fn ground_truth(&self) -> Option<Vec<(usize, usize)>> {
        self.inner.ground_truth().map(|s| edge_list(s.iter().copied()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Graph(id={:?}, nodes={}, edges={}, label={})",
            self.inner.id(),
            self.inner.node_count(),
            self.inner.edge_count(),
            self.inner.label()
        )
    }
}

fn unwrap_graphs(graphs: &[PyGraph]) -> Vec<dse_core::Graph> {
    graphs.iter().map(|g| g.inner.clone()).collect()
}

/// Generates a TR3 dataset (tree base graphs with house, cycle or crane motifs).
#[pyfunction]
#[pyo3(signature = (num_graphs=3000, seed=17))]
fn generate_tr3(num_graphs: usize, seed: u64) -> PyResult<Vec<PyGraph>> {
    let cfg = Tr3Config {
        num_graphs,
        seed,
        ..Default::default()
    };
    let graphs = tr3::generate_dataset(&cfg).map_err(err)?;
    Ok(graphs.into_iter().map(|inner| PyGraph { inner }).collect())
}

#[pyfunction]
fn save_dataset(graphs: Vec<PyGraph>, path: PathBuf) -> PyResult<()> {
    std::fs::write(path, serialize_dataset(&unwrap_graphs(&graphs)))?;
    Ok(())
}

#[pyfunction]
fn load_dataset(path: PathBuf) -> PyResult<Vec<PyGraph>> {
    let bytes = std::fs::read(&path)?;
    let graphs = parse_dataset(&bytes).map_err(err)?;
    Ok(graphs.into_iter().map(|inner| PyGraph { inner }).collect())
}

/// Message-passing graph classifier.
#[pyclass(name = "Predictor", module = "dse_py")]
pub struct PyPredictor {
    inner: predictor::Predictor,
}

#[pymethods]
impl PyPredictor {
    #[staticmethod]
    #[pyo3(signature = (graphs, max_epochs=100, hidden_dim=64, learning_rate=1e-3, seed=0))]
    fn train(graphs: Vec<PyGraph>, max_epochs: usize, hidden_dim: usize, learning_rate: f64, seed: u64) -> PyResult<Self> {
        let cfg = PredictorConfig {
            max_epochs,
            hidden_dim,
            learning_rate,
            seed,
            ..Default::default()
        };
        let inner = predictor::train(&unwrap_graphs(&graphs), &cfg).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        Ok(Self {
            inner: predictor::Predictor::from_checkpoint(&ck).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_checkpoint().save(&path).map_err(err)
    }

    /// Class probabilities of `graph`.
    fn forward(&self, graph: &PyGraph) -> PyResult<Vec<f64>> {
        self.inner.forward(&graph.inner).map_err(err)
    }

    fn accuracy(&self, graphs: Vec<PyGraph>) -> PyResult<f64> {
        self.inner.accuracy(&unwrap_graphs(&graphs)).map_err(err)
    }

    #[getter]
    fn train_accuracy(&self) -> f64 {
        self.inner.metrics.train_accuracy
    }

    #[getter]
    fn test_accuracy(&self) -> Option<f64> {
        self.inner.metrics.test_accuracy
    }

    #[getter]
    fn test_ids(&self) -> Vec<String> {
        self.inner.metrics.test_ids.clone()
    }
}

/// Conditional VGAE surrogate generator.
#[pyclass(name = "Generator", module = "dse_py")]
pub struct PyGenerator {
    inner: Cvgae,
}

#[pymethods]
impl PyGenerator {
    /// Trains a CVGAE; weights default to the library defaults.
    #[staticmethod]
    #[pyo3(signature = (graphs, max_epochs=100, encode_dim=256, gamma=3.0, omega=5.0, lam=5.0, tau=0.1, ratio=0.3, beta=1e-4, learning_rate=2e-4, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        graphs: Vec<PyGraph>,
        max_epochs: usize,
        encode_dim: usize,
        gamma: f64,
        omega: f64,
        lam: f64,
        tau: f64,
        ratio: f64,
        beta: f64,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = GeneratorConfig {
            max_epochs,
            encode_dim,
            contrastive_weight: gamma,
            adversarial_weight: omega,
            penalty_weight: lam,
            temperature: tau,
            masking_ratio: ratio,
            kl_weight: beta,
            learning_rate,
            seed,
            ..Default::default()
        };
        let trained = cvgae::train_generator(&unwrap_graphs(&graphs), &cfg).map_err(err)?;
        Ok(Self {
            inner: trained.generator,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        Ok(Self {
            inner: Cvgae::from_checkpoint(&ck).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_checkpoint().save(&path).map_err(err)
    }

    /// Edges of one surrogate completing `selected` within `graph`.
    #[pyo3(signature = (graph, selected, seed=0))]
    fn sample(&self, graph: &PyGraph, selected: Vec<(usize, usize)>, seed: u64) -> PyResult<Vec<(usize, usize)>> {
        let mask = mask_of(&graph.inner, selected)?;
        let mut rng = dse_core::seeds::rng_for(seed, graph.inner.id(), 0);
        let s = cvgae::sample_surrogate(&self.inner, &graph.inner, &mask, &mut rng).map_err(err)?;
        Ok(edge_list(s.edges))
    }
}

fn mask_of(g: &dse_core::Graph, selected: Vec<(usize, usize)>) -> PyResult<EdgeMask> {
    EdgeMask::from_selection(g, selected.into_iter().map(|(u, v)| Edge::new(u, v))).map_err(err)
}

/// Selected edges of one explainer (`sa`, `gradcam`, `maskopt`,
/// `occlusion`, `screener`, `random`) for the graph's label.
#[pyfunction]
#[pyo3(signature = (predictor, graph, kind, ratio=0.15, seed=0))]
fn explain(predictor: &PyPredictor, graph: &PyGraph, kind: &str, ratio: f64, seed: u64) -> PyResult<Vec<(usize, usize)>> {
    let kind: ExplainerKind = kind.parse().map_err(err)?;
    let cfg = ExplainerConfig {
        mask_ratio: ratio,
        seed,
        ..Default::default()
    };
    let mask = explainers::explain(&predictor.inner, &graph.inner, graph.inner.label(), kind, &cfg).map_err(err)?;
    Ok(edge_list(mask.selected))
}

/// Removal, DSE and deletion importance of `selected` for the graph's label.
/// `generator` is a trained `Generator`, or None for the random baseline.
#[pyfunction]
#[pyo3(signature = (predictor, graph, selected, generator=None, num_surrogates=50, estimator="reduced", identity=false, seed=0))]
#[allow(clippy::too_many_arguments)]
fn importance(
    predictor: &PyPredictor,
    graph: &PyGraph,
    selected: Vec<(usize, usize)>,
    generator: Option<PyRef<'_, PyGenerator>>,
    num_surrogates: usize,
    estimator: &str,
    identity: bool,
    seed: u64,
) -> PyResult<(f64, f64, f64)> {
    let mask = mask_of(&graph.inner, selected)?;
    let gen: &dyn SurrogateGenerator = match (&generator, identity) {
        (Some(g), _) => &g.inner,
        (None, true) => &IdentityGenerator,
        (None, false) => &RandomGenerator,
    };
    let cfg = DseConfig {
        num_surrogates,
        estimator: estimator.parse::<Estimator>().map_err(err)?,
        seed,
        ..Default::default()
    };
    let dse = Dse::new(&predictor.inner, gen, cfg).map_err(err)?;
    let r = dse.record(&graph.inner, &mask, ExplainerKind::Random).map_err(err)?;
    Ok((r.imp_re, r.imp_dse, r.imp_dse_deletion))
}

/// Runs an experiment config and returns the report as JSON.
#[pyfunction]
fn run_experiment(config: PathBuf) -> PyResult<String> {
    let out = dse_core::evalharness::run_experiment(&config).map_err(err)?;
    serde_json::to_string(&out.report).map_err(|e| DseError::new_err(e.to_string()))
}

#[pymodule]
fn dse_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DseError", m.py().get_type::<DseError>())?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PyPredictor>()?;
    m.add_class::<PyGenerator>()?;
    m.add_function(wrap_pyfunction!(generate_tr3, m)?)?;
    m.add_function(wrap_pyfunction!(save_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(explain, m)?)?;
    m.add_function(wrap_pyfunction!(importance, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
