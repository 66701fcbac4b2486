//! Message-passing graph classifier `f(G)` whose explanations are evaluated.
//!
//! `num_layers` layers of `relu(h W_self + (sum_j w_ij h_j) W_nb + b)`, mean
//! pooling, and a zero-initialised linear readout. Edge weights default to 1
//! and are exposed so explainers can differentiate with respect to them.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{DseError, Result};
use crate::graph::{induce_subgraph, EdgeMask, Graph};
use crate::nn::{self, Adam, Bound, Checkpoint, ParamStore, Topology};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            num_layers: 3,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            max_epochs: 100,
            batch_size: 32,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_layers == 0 || self.batch_size == 0 {
            return Err(DseError::Config("predictor dims must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(DseError::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(DseError::Config("test_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetrics {
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub epoch_losses: Vec<f64>,
    pub split_seed: u64,
    pub train_ids: usize,
    pub test_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub config: PredictorConfig,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub params: ParamStore,
    pub metrics: TrainingMetrics,
}

/// Intermediate values of one forward pass.
pub struct Forward<'t> {
    /// `graphs × classes`, pre-softmax.
    pub logits: Var<'t>,
    /// Output of the last message-passing layer, `nodes × hidden`.
    pub node_embeddings: Var<'t>,
}

impl Predictor {
    pub fn new(config: PredictorConfig, feature_dim: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut fan_in = feature_dim;
        for l in 0..config.num_layers {
            nn::init_message_passing(&mut params, &format!("mp{l}"), fan_in, config.hidden_dim, &mut rng);
            fan_in = config.hidden_dim;
        }
        params.init_zeros("readout.w", config.hidden_dim, num_classes);
        params.init_zeros("readout.b", 1, num_classes);
        Ok(Self {
            config,
            feature_dim,
            num_classes,
            params,
            metrics: TrainingMetrics::default(),
        })
    }

    fn check_dim(&self, g: &Graph) -> Result<()> {
        if g.feature_dim() != self.feature_dim {
            return Err(DseError::Shape(format!(
                "graph `{}` has {} features, model expects {}",
                g.id(),
                g.feature_dim(),
                self.feature_dim
            )));
        }
        Ok(())
    }

    /// Forward pass over a batch described by `topo`, with per-edge weights.
    pub fn forward_with<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        topo: &Topology,
        features: Var<'t>,
        edge_weight: Var<'t>,
    ) -> Forward<'t> {
        let mut h = features;
        for l in 0..self.config.num_layers {
            h = nn::message_passing(p, &format!("mp{l}"), topo, h, edge_weight, true);
        }
        let pooled = topo.mean_pool(tape, h);
        Forward {
            logits: nn::linear(p, "readout", pooled),
            node_embeddings: h,
        }
    }

    /// Class probabilities of `g`.
    pub fn forward(&self, g: &Graph) -> Result<Vec<f64>> {
        self.check_dim(g)?;
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let topo = Topology::of_graph(g);
        let x = tape.constant(g.features().clone());
        let out = self.forward_with(&tape, &p, &topo, x, topo.unit_weights(&tape));
        Ok(softmax_row(&out.logits.value(), 0))
    }

    /// Class probabilities of `g` with a weight on every edge (in
    /// [`Graph::edges`] order).
    pub fn forward_weighted(&self, g: &Graph, weights: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(g)?;
        if weights.len() != g.edge_count() {
            return Err(DseError::Shape(format!(
                "{} edge weights for {} edges",
                weights.len(),
                g.edge_count()
            )));
        }
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let topo = Topology::of_graph(g);
        let x = tape.constant(g.features().clone());
        let w = tape.constant(Array2::from_shape_vec((weights.len(), 1), weights.to_vec()).unwrap());
        let out = self.forward_with(&tape, &p, &topo, x, w);
        Ok(softmax_row(&out.logits.value(), 0))
    }

    /// Batched class probabilities; one row per graph.
    pub fn predict_batch(&self, graphs: &[&Graph]) -> Result<Vec<Vec<f64>>> {
        for g in graphs {
            self.check_dim(g)?;
        }
        if graphs.is_empty() {
            return Ok(Vec::new());
        }
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let topo = Topology::of_graphs(graphs);
        let x = tape.constant(nn::stack_features(graphs));
        let out = self.forward_with(&tape, &p, &topo, x, topo.unit_weights(&tape));
        let logits = out.logits.value();
        Ok((0..graphs.len()).map(|i| softmax_row(&logits, i)).collect())
    }

    /// Probabilities for many graphs, chunked and run in parallel.
    pub fn predict_all(&self, graphs: &[Graph]) -> Result<Vec<Vec<f64>>> {
        let chunks: Vec<Result<Vec<Vec<f64>>>> = graphs
            .par_chunks(64)
            .map(|c| self.predict_batch(&c.iter().collect::<Vec<_>>()))
            .collect();
        let mut out = Vec::with_capacity(graphs.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    pub fn accuracy(&self, graphs: &[Graph]) -> Result<f64> {
        if graphs.is_empty() {
            return Err(DseError::EmptyInput("accuracy over no graphs"));
        }
        let probs = self.predict_all(graphs)?;
        let correct = graphs
            .iter()
            .zip(&probs)
            .filter(|(g, p)| argmax(p) == g.label())
            .count();
        Ok(correct as f64 / graphs.len() as f64)
    }

    /// Removal-based importance: the target probability of the masked graph
    /// fed to the predictor on its own.
    pub fn importance_removal(&self, mask: &EdgeMask, g: &Graph, target: usize) -> Result<f64> {
        let sub = induce_subgraph(g, mask)?;
        let p = self.forward(&sub)?;
        p.get(target)
            .copied()
            .ok_or_else(|| DseError::Shape(format!("class {target} out of range")))
    }

    /// Mean cross-entropy over a batch.
    pub fn batch_loss<'t>(&self, tape: &'t Tape, p: &Bound<'t>, graphs: &[&Graph]) -> Var<'t> {
        let topo = Topology::of_graphs(graphs);
        let x = tape.constant(nn::stack_features(graphs));
        let out = self.forward_with(tape, p, &topo, x, topo.unit_weights(tape));
        cross_entropy(tape, out.logits, &graphs.iter().map(|g| g.label()).collect::<Vec<_>>())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            metadata: serde_json::json!({
                "kind": "predictor",
                "config": self.config,
                "feature_dim": self.feature_dim,
                "num_classes": self.num_classes,
                "metrics": self.metrics,
            }),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.metadata;
        if meta["kind"] != "predictor" {
            return Err(DseError::Checkpoint("not a predictor checkpoint".into()));
        }
        let get_usize = |k: &str| {
            meta[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| DseError::Checkpoint(format!("metadata missing `{k}`")))
        };
        let config: PredictorConfig = serde_json::from_value(meta["config"].clone())?;
        let metrics: TrainingMetrics = serde_json::from_value(meta["metrics"].clone())?;
        let model = Self {
            config,
            feature_dim: get_usize("feature_dim")?,
            num_classes: get_usize("num_classes")?,
            params: ck.params.clone(),
            metrics,
        };
        let fresh = Predictor::new(model.config.clone(), model.feature_dim, model.num_classes)?;
        for (name, arr) in fresh.params.iter() {
            match model.params.get(name) {
                Some(a) if a.dim() == arr.dim() => {}
                _ => {
                    return Err(DseError::Checkpoint(format!(
                        "parameter `{name}` missing or wrongly shaped"
                    )))
                }
            }
        }
        Ok(model)
    }
}

/// Row `i` of `logits` through a softmax.
pub fn softmax_row(logits: &Array2<f64>, i: usize) -> Vec<f64> {
    let row = logits.row(i);
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Mean negative log-likelihood of `labels` under row-wise softmax.
pub fn cross_entropy<'t>(tape: &'t Tape, logits: Var<'t>, labels: &[usize]) -> Var<'t> {
    let (n, k) = logits.shape();
    let onehot = Array2::from_shape_fn((n, k), |(i, j)| if labels[i] == j { 1.0 } else { 0.0 });
    logits
        .log_softmax_rows()
        .mul(tape.constant(onehot))
        .sum()
        .scale(-1.0 / n as f64)
}

/// Deterministic train/test split: shuffles indices with `seed`.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let n_test = if n > 1 { n_test.min(n - 1) } else { 0 };
    let test = idx[..n_test].to_vec();
    let train = idx[n_test..].to_vec();
    (train, test)
}

/// Trains a predictor with Adam on a seeded train/test split.
pub fn train(dataset: &[Graph], cfg: &PredictorConfig) -> Result<Predictor> {
    train_with_progress(dataset, cfg, |_, _| {})
}

pub fn train_with_progress(
    dataset: &[Graph],
    cfg: &PredictorConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Predictor> {
    let first = dataset.first().ok_or(DseError::EmptyInput("training dataset"))?;
    let feature_dim = first.feature_dim();
    let num_classes = dataset.iter().map(|g| g.label()).max().unwrap() + 1;
    let mut model = Predictor::new(cfg.clone(), feature_dim.max(1), num_classes.max(2))?;
    for g in dataset {
        model.check_dim(g)?;
    }

    let split_seed = cfg.seed.wrapping_add(1);
    let (train_idx, test_idx) = split_indices(dataset.len(), cfg.test_fraction, split_seed);
    let mut opt = Adam::new(cfg.learning_rate, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut order = train_idx.clone();
    let mut losses = Vec::with_capacity(cfg.max_epochs);
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Graph> = chunk.iter().map(|&i| &dataset[i]).collect();
            let tape = Tape::new();
            let p = model.params.bind(&tape);
            let loss = model.batch_loss(&tape, &p, &batch);
            let l = loss.item();
            if !l.is_finite() {
                return Err(DseError::Training {
                    epoch,
                    step,
                    message: format!("loss is {l}"),
                });
            }
            total += l * chunk.len() as f64;
            let grads = p.grads(&tape, loss);
            opt.step(&mut model.params, &grads);
        }
        let mean = total / order.len().max(1) as f64;
        losses.push(mean);
        on_epoch(epoch, mean);
    }

    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset[i].clone()).collect::<Vec<_>>();
    let train_set = pick(&train_idx);
    let test_set = pick(&test_idx);
    model.metrics = TrainingMetrics {
        train_accuracy: model.accuracy(&train_set)?,
        test_accuracy: if test_set.is_empty() {
            None
        } else {
            Some(model.accuracy(&test_set)?)
        },
        epoch_losses: losses,
        split_seed,
        train_ids: train_set.len(),
        test_ids: test_set.iter().map(|g| g.id().to_string()).collect(),
    };
    Ok(model)
}
