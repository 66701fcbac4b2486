//! Front-door importance of an explanatory subgraph.
//!
//! Surrogates `G*` are drawn from a generator conditioned on `(G, G_s)` and
//! fed to the predictor. The reduced estimator averages `f(G*)[y]`; the
//! weighted estimator additionally adjusts over a pool of alternative
//! subgraphs `G'` with importance weights `P(G') / P(G' | G*)`.

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cvgae::{random_mask, sample_from_probs, EdgeProbMatrix, SurrogateGenerator};
use crate::error::{DseError, Result};
use crate::explainers::{ExplainerKind, MaskRecord};
use crate::graph::{all_pairs, induce_subgraph, Edge, EdgeMask, Graph};
use crate::predictor::Predictor;
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Reduced,
    Weighted,
}

impl std::str::FromStr for Estimator {
    type Err = DseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reduced" => Ok(Estimator::Reduced),
            "weighted" => Ok(Estimator::Weighted),
            _ => Err(DseError::Config(format!("unknown estimator `{s}`"))),
        }
    }
}

/// How surrogates are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    /// `num_surrogates` independent draws, each with a fresh latent sample.
    MonteCarlo,
    /// Every completion of the free pairs, weighted by its probability at the
    /// latent mean. Only feasible for tiny graphs.
    Exhaustive,
}

/// Free pairs beyond this make exhaustive enumeration refuse to run.
pub const MAX_EXHAUSTIVE_PAIRS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DseConfig {
    pub num_surrogates: usize,
    pub estimator: Estimator,
    pub pool_size: usize,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Default for DseConfig {
    fn default() -> Self {
        Self {
            num_surrogates: 50,
            estimator: Estimator::Reduced,
            pool_size: 32,
            sampling: Sampling::MonteCarlo,
            seed: 0,
        }
    }
}

impl DseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_surrogates == 0 || self.pool_size == 0 {
            return Err(DseError::Config("num_surrogates and pool_size must be positive".into()));
        }
        Ok(())
    }
}

/// Surrogate graphs with their averaging weights (summing to 1).
#[derive(Debug, Clone)]
pub struct SurrogateSet {
    pub graphs: Vec<Graph>,
    pub weights: Vec<f64>,
}

/// Weighted mean shared by every estimator so they agree bit for bit when
/// their per-surrogate values do.
fn weighted_mean(values: &[f64], weights: &[f64]) -> f64 {
    values.iter().zip(weights).map(|(v, w)| v * w).sum()
}

/// Free pairs of `g` given the selection: every pair not in `selected`.
fn free_pairs(g: &Graph, selected: &BTreeSet<Edge>) -> Vec<(usize, Edge)> {
    all_pairs(g.node_count())
        .into_iter()
        .enumerate()
        .filter(|(_, e)| !selected.contains(e))
        .collect()
}

/// Every completion of `mask` with its probability under `probs`.
pub fn enumerate_surrogates(g: &Graph, mask: &EdgeMask, probs: &EdgeProbMatrix) -> Result<SurrogateSet> {
    let free = free_pairs(g, &mask.selected);
    if free.len() > MAX_EXHAUSTIVE_PAIRS {
        return Err(DseError::Config(format!(
            "exhaustive sampling over {} free pairs exceeds the limit of {MAX_EXHAUSTIVE_PAIRS}",
            free.len()
        )));
    }
    let mut graphs = Vec::with_capacity(1 << free.len());
    let mut weights = Vec::with_capacity(1 << free.len());
    for bits in 0u32..(1 << free.len()) {
        let mut edges = mask.selected.clone();
        let mut p = 1.0;
        for (k, (idx, e)) in free.iter().enumerate() {
            let q = probs.probs[*idx];
            if bits >> k & 1 == 1 {
                edges.insert(*e);
                p *= q;
            } else {
                p *= 1.0 - q;
            }
        }
        graphs.push(g.with_edges(edges)?);
        weights.push(p);
    }
    Ok(SurrogateSet { graphs, weights })
}

/// DSE estimators bound to a frozen predictor and generator.
pub struct Dse<'a> {
    pub predictor: &'a Predictor,
    pub generator: &'a dyn SurrogateGenerator,
    pub config: DseConfig,
}

impl<'a> Dse<'a> {
    pub fn new(predictor: &'a Predictor, generator: &'a dyn SurrogateGenerator, config: DseConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            predictor,
            generator,
            config,
        })
    }

    fn rng(&self, g: &Graph, stream: &str, index: u64) -> ChaCha8Rng {
        seeds::rng_for(self.config.seed, &format!("{}/{stream}", g.id()), index)
    }

    /// Surrogates of `mask` drawn from the generator.
    pub fn surrogates(&self, g: &Graph, mask: &EdgeMask, stream: &str) -> Result<SurrogateSet> {
        let cond = self.generator.condition(g, mask)?;
        match self.config.sampling {
            Sampling::Exhaustive => enumerate_surrogates(g, mask, &cond.mean()),
            Sampling::MonteCarlo => {
                let n = self.config.num_surrogates;
                let graphs = (0..n)
                    .map(|k| {
                        let mut rng = self.rng(g, stream, k as u64);
                        let probs = cond.draw(&mut rng);
                        sample_from_probs(g, mask, &probs, &mut rng).to_graph(g)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(SurrogateSet {
                    graphs,
                    weights: vec![1.0 / n as f64; n],
                })
            }
        }
    }

    /// Class probabilities of every surrogate.
    pub fn surrogate_probs(&self, set: &SurrogateSet) -> Result<Vec<Vec<f64>>> {
        self.predictor.predict_batch(&set.graphs.iter().collect::<Vec<_>>())
    }

    /// Reduced estimator with an arbitrary outcome of the surrogate.
    pub fn reduced_with(
        &self,
        g: &Graph,
        mask: &EdgeMask,
        stream: &str,
        outcome: &dyn Fn(&Graph) -> Result<f64>,
    ) -> Result<f64> {
        let set = self.surrogates(g, mask, stream)?;
        let values = set.graphs.iter().map(outcome).collect::<Result<Vec<_>>>()?;
        Ok(weighted_mean(&values, &set.weights))
    }

    /// Mean target probability over surrogates of `mask`.
    pub fn reduced(&self, g: &Graph, mask: &EdgeMask, target: usize, stream: &str) -> Result<f64> {
        let set = self.surrogates(g, mask, stream)?;
        let values: Vec<f64> = self.surrogate_probs(&set)?.iter().map(|p| p[target]).collect();
        Ok(weighted_mean(&values, &set.weights))
    }

    /// Pool of alternative subgraphs `G'`: random masks of `g` with as many
    /// edges as `mask`, under a uniform prior.
    pub fn adjustment_pool(&self, g: &Graph, mask: &EdgeMask, stream: &str) -> Vec<EdgeMask> {
        let ratio = if g.edge_count() == 0 {
            0.0
        } else {
            mask.selected.len() as f64 / g.edge_count() as f64
        };
        let mut rng = self.rng(g, &format!("{stream}/pool"), 0);
        (0..self.config.pool_size).map(|_| random_mask(g, ratio, &mut rng)).collect()
    }

    /// Normalised importance weights `P(G'_k) / P(G'_k | G*)`, one per pool
    /// member. `P(G'_k | G*)` is the decoder likelihood of `G'_k` under the
    /// code of `(G*, G'_k)`, normalised over the pool; the prior is uniform.
    pub fn adjustment_weights(&self, surrogate: &Graph, pool: &[EdgeMask]) -> Result<Vec<f64>> {
        let k = pool.len();
        if k == 1 {
            return Ok(vec![1.0]);
        }
        let mut log_lik = Vec::with_capacity(k);
        for m in pool {
            let sub = surrogate.with_edges(m.selected.iter().copied())?;
            let cond = self.generator.condition_on(surrogate, &sub)?;
            log_lik.push(cond.mean().log_likelihood(&m.selected));
        }
        // A zero posterior would need an infinite weight.
        if log_lik.iter().any(|l| !l.is_finite()) {
            return Err(DseError::DegenerateWeights);
        }
        // The uniform prior and the posterior normaliser cancel on
        // normalisation, leaving weights proportional to 1 / likelihood.
        let min = log_lik.iter().copied().fold(f64::INFINITY, f64::min);
        let raw: Vec<f64> = log_lik.iter().map(|l| (min - l).exp()).collect();
        let total: f64 = raw.iter().sum();
        Ok(raw.into_iter().map(|w| w / total).collect())
    }

    /// Weighted estimator with an outcome that may depend on both the
    /// surrogate and the adjusted subgraph `G'`.
    pub fn weighted_with(
        &self,
        g: &Graph,
        mask: &EdgeMask,
        stream: &str,
        outcome: &dyn Fn(&Graph, &EdgeMask) -> Result<f64>,
    ) -> Result<f64> {
        let set = self.surrogates(g, mask, stream)?;
        let pool = self.adjustment_pool(g, mask, stream);
        let values = set
            .graphs
            .iter()
            .map(|s| {
                let w = self.adjustment_weights(s, &pool)?;
                let inner = pool
                    .iter()
                    .zip(&w)
                    .map(|(m, w)| Ok(outcome(s, m)? * w))
                    .collect::<Result<Vec<f64>>>()?;
                Ok(inner.iter().sum())
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(weighted_mean(&values, &set.weights))
    }

    /// Weighted estimator; the predictor reads only the surrogate.
    pub fn weighted(&self, g: &Graph, mask: &EdgeMask, target: usize, stream: &str) -> Result<f64> {
        let set = self.surrogates(g, mask, stream)?;
        let probs = self.surrogate_probs(&set)?;
        let pool = self.adjustment_pool(g, mask, stream);
        let values = set
            .graphs
            .iter()
            .zip(&probs)
            .map(|(s, p)| {
                let w = self.adjustment_weights(s, &pool)?;
                Ok(w.iter().map(|w| p[target] * w).sum())
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(weighted_mean(&values, &set.weights))
    }

    /// The configured estimator.
    pub fn importance(&self, g: &Graph, mask: &EdgeMask, target: usize, stream: &str) -> Result<f64> {
        match self.config.estimator {
            Estimator::Reduced => self.reduced(g, mask, target, stream),
            Estimator::Weighted => self.weighted(g, mask, target, stream),
        }
    }

    /// `f(G)[y]` minus the reduced importance of the complement of `mask`.
    pub fn deletion(&self, g: &Graph, mask: &EdgeMask, target: usize, stream: &str) -> Result<f64> {
        let full = self.predictor.forward(g)?[target];
        let rest = self.reduced(g, &mask.complement(), target, &format!("{stream}/deletion"))?;
        Ok(full - rest)
    }

    /// Every importance of one explanation.
    pub fn record(&self, g: &Graph, mask: &EdgeMask, explainer: ExplainerKind) -> Result<ImportanceRecord> {
        mask.check_complete(g)?;
        let target = g.label();
        let stream = explainer.name();
        let imp_re = self.predictor.importance_removal(mask, g, target)?;
        let set = self.surrogates(g, mask, stream)?;
        let probs = self.surrogate_probs(&set)?;
        let imp_dse = match self.config.estimator {
            Estimator::Reduced => {
                let values: Vec<f64> = probs.iter().map(|p| p[target]).collect();
                weighted_mean(&values, &set.weights)
            }
            Estimator::Weighted => self.weighted(g, mask, target, stream)?,
        };
        Ok(ImportanceRecord {
            graph_id: g.id().to_string(),
            explainer,
            target,
            imp_re,
            imp_dse,
            imp_dse_deletion: self.deletion(g, mask, target, stream)?,
            full_prob: self.predictor.forward(g)?[target],
            surrogate_probs: probs,
            estimator: self.config.estimator,
        })
    }
}

/// Importance estimates of one (graph, explainer) explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRecord {
    pub graph_id: String,
    pub explainer: ExplainerKind,
    pub target: usize,
    pub imp_re: f64,
    pub imp_dse: f64,
    pub imp_dse_deletion: f64,
    /// `f(G)[target]` on the unmasked graph.
    pub full_prob: f64,
    pub surrogate_probs: Vec<Vec<f64>>,
    pub estimator: Estimator,
}

/// One record per mask, ordered by graph id then explainer.
pub fn evaluate_all(dse: &Dse<'_>, dataset: &[Graph], masks: &[MaskRecord]) -> Result<Vec<ImportanceRecord>> {
    let by_id: std::collections::HashMap<&str, &Graph> = dataset.iter().map(|g| (g.id(), g)).collect();
    let mut records = masks
        .par_iter()
        .map(|m| {
            let g = by_id
                .get(m.graph_id.as_str())
                .ok_or_else(|| DseError::Config(format!("mask refers to unknown graph `{}`", m.graph_id)))?;
            dse.record(g, &m.to_mask(), m.explainer)
        })
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|a, b| (&a.graph_id, a.explainer).cmp(&(&b.graph_id, b.explainer)));
    Ok(records)
}

pub fn write_records_jsonl(records: &[ImportanceRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_records_jsonl(text: &str) -> Result<Vec<ImportanceRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Removal importance and surrogate average for the same masks, used by
/// generator metrics: `(f(G_s)[y], mean f(G*)[y])`.
pub fn removal_and_dse(dse: &Dse<'_>, g: &Graph, mask: &EdgeMask, stream: &str) -> Result<(f64, f64)> {
    let target = g.label();
    let sub = induce_subgraph(g, mask)?;
    let re = dse.predictor.forward(&sub)?[target];
    Ok((re, dse.reduced(g, mask, target, stream)?))
}
