//! Edge-importance explainers for a frozen [`Predictor`].
//!
//! Each explainer scores every edge of the parent graph; the selected subgraph
//! is the top `mask_ratio` fraction of those scores.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{DseError, Result};
use crate::graph::{selection_size, top_fraction_mask, Edge, EdgeMask, Graph};
use crate::nn::{Adam, ParamStore, Topology};
use crate::predictor::Predictor;
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplainerKind {
    Sa,
    Gradcam,
    Maskopt,
    Occlusion,
    Screener,
    Random,
}

impl ExplainerKind {
    pub const ALL: [ExplainerKind; 6] = [
        ExplainerKind::Sa,
        ExplainerKind::Gradcam,
        ExplainerKind::Maskopt,
        ExplainerKind::Occlusion,
        ExplainerKind::Screener,
        ExplainerKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExplainerKind::Sa => "sa",
            ExplainerKind::Gradcam => "gradcam",
            ExplainerKind::Maskopt => "maskopt",
            ExplainerKind::Occlusion => "occlusion",
            ExplainerKind::Screener => "screener",
            ExplainerKind::Random => "random",
        }
    }

    /// Parses a comma-separated list such as `sa,gradcam`.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for ExplainerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExplainerKind {
    type Err = DseError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DseError::Config(format!("unknown explainer `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainerConfig {
    pub mask_ratio: f64,
    pub maskopt_steps: usize,
    pub maskopt_lr: f64,
    pub maskopt_sparsity_coeff: f64,
    pub seed: u64,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.15,
            maskopt_steps: 200,
            maskopt_lr: 0.01,
            maskopt_sparsity_coeff: 0.005,
            seed: 0,
        }
    }
}

impl ExplainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return Err(DseError::Config(format!("mask_ratio {} outside (0, 1]", self.mask_ratio)));
        }
        if !(self.maskopt_lr > 0.0) || self.maskopt_sparsity_coeff < 0.0 {
            return Err(DseError::Config("invalid mask optimisation settings".into()));
        }
        Ok(())
    }
}

fn to_mask(g: &Graph, scores: Vec<f64>, ratio: f64) -> Result<EdgeMask> {
    if g.edge_count() == 0 {
        return Ok(EdgeMask::none(g));
    }
    let map: BTreeMap<Edge, f64> = g.edges().iter().copied().zip(scores).collect();
    top_fraction_mask(g.id(), map, ratio)
}

fn check_target(model: &Predictor, target: usize) -> Result<()> {
    if target >= model.num_classes {
        return Err(DseError::Shape(format!(
            "target class {target} out of range for {} classes",
            model.num_classes
        )));
    }
    Ok(())
}

/// `|d logit_target / d w_e|` at unit edge weights.
pub fn sa_scores(model: &Predictor, g: &Graph, target: usize) -> Result<Vec<f64>> {
    check_target(model, target)?;
    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let topo = Topology::of_graph(g);
    let x = tape.constant(g.features().clone());
    let w = tape.var(Array2::ones((g.edge_count(), 1)));
    let out = model.forward_with(&tape, &p, &topo, x, w);
    let logit = out.logits.slice_cols(target, 1);
    let grad = tape.grad(logit, &[w])[0].value();
    Ok(grad.iter().map(|v| v.abs()).collect())
}

/// Grad-CAM on the last message-passing layer; an edge scores the mean of its
/// endpoints' activation maps.
pub fn gradcam_node_scores(model: &Predictor, g: &Graph, target: usize) -> Result<Vec<f64>> {
    check_target(model, target)?;
    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let topo = Topology::of_graph(g);
    let x = tape.var(g.features().clone());
    let out = model.forward_with(&tape, &p, &topo, x, topo.unit_weights(&tape));
    let logit = out.logits.slice_cols(target, 1);
    let fmap = out.node_embeddings;
    let grad = tape.grad(logit, &[fmap])[0].value();
    let alpha = grad.mean_axis(ndarray::Axis(0)).expect("non-empty graph");
    let f = fmap.value();
    Ok(f.rows()
        .into_iter()
        .map(|row| row.dot(&alpha).max(0.0))
        .collect())
}

pub fn gradcam_scores(model: &Predictor, g: &Graph, target: usize) -> Result<Vec<f64>> {
    let nodes = gradcam_node_scores(model, g, target)?;
    Ok(g.edges().iter().map(|e| 0.5 * (nodes[e.0] + nodes[e.1])).collect())
}

/// Optimises a sigmoid edge mask to keep the target class likely while
/// penalising the mask's total mass.
pub fn maskopt_scores(model: &Predictor, g: &Graph, target: usize, cfg: &ExplainerConfig) -> Result<Vec<f64>> {
    check_target(model, target)?;
    let e = g.edge_count();
    let mut store = ParamStore::new();
    store.init_zeros("mask", e, 1);
    let mut opt = Adam::new(cfg.maskopt_lr, 0.0);
    let topo = Topology::of_graph(g);
    for step in 0..cfg.maskopt_steps {
        let tape = Tape::new();
        let p = model.params.bind_frozen(&tape);
        let m = store.bind(&tape);
        let weights = m.get("mask").sigmoid();
        let x = tape.constant(g.features().clone());
        let out = model.forward_with(&tape, &p, &topo, x, weights);
        let log_p = out.logits.log_softmax_rows().slice_cols(target, 1);
        let loss = log_p
            .scale(-1.0)
            .add(weights.sum().scale(cfg.maskopt_sparsity_coeff));
        let l = loss.item();
        if !l.is_finite() {
            return Err(DseError::Optimization {
                step,
                message: format!("mask loss is {l}"),
            });
        }
        let grads = m.grads(&tape, loss);
        opt.step(&mut store, &grads);
    }
    Ok(store
        .get("mask")
        .unwrap()
        .iter()
        .map(|v| 1.0 / (1.0 + (-v).exp()))
        .collect())
}

/// `p_target(g) - p_target(g - e)` for every edge.
pub fn occlusion_scores(model: &Predictor, g: &Graph, target: usize) -> Result<Vec<f64>> {
    check_target(model, target)?;
    let base = model.forward(g)?[target];
    (0..g.edge_count())
        .map(|skip| {
            let reduced = g.with_edges(
                g.edges()
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != skip)
                    .map(|(_, e)| *e),
            )?;
            Ok(base - model.forward(&reduced)?[target])
        })
        .collect()
}

/// Greedy forward selection: repeatedly adds the edge that maximises the
/// target probability of the selected subgraph. The `t`-th pick (0-based)
/// scores `(|E| - t) / |E|`, unpicked edges score 0.
pub fn screener_scores(model: &Predictor, g: &Graph, target: usize, budget: usize) -> Result<Vec<f64>> {
    check_target(model, target)?;
    let e = g.edge_count();
    let budget = budget.min(e);
    let mut chosen: Vec<usize> = Vec::with_capacity(budget);
    let mut scores = vec![0.0; e];
    for t in 0..budget {
        let mut best: Option<(usize, f64)> = None;
        for cand in (0..e).filter(|c| !chosen.contains(c)) {
            let sub = g.with_edges(chosen.iter().chain([&cand]).map(|&i| g.edges()[i]))?;
            let p = model.forward(&sub)?[target];
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((cand, p));
            }
        }
        let (pick, _) = best.expect("budget <= |E|");
        chosen.push(pick);
        scores[pick] = (e - t) as f64 / e as f64;
    }
    Ok(scores)
}

/// I.i.d. uniform scores; the stream depends on `seed` and the graph id.
pub fn random_scores(g: &Graph, seed: u64) -> Vec<f64> {
    let mut rng = seeds::rng_for(seed, g.id(), 0);
    (0..g.edge_count()).map(|_| rng.random::<f64>()).collect()
}

pub fn explain_sa(model: &Predictor, g: &Graph, target: usize, ratio: f64) -> Result<EdgeMask> {
    to_mask(g, sa_scores(model, g, target)?, ratio)
}

pub fn explain_gradcam(model: &Predictor, g: &Graph, target: usize, ratio: f64) -> Result<EdgeMask> {
    to_mask(g, gradcam_scores(model, g, target)?, ratio)
}

pub fn explain_maskopt(model: &Predictor, g: &Graph, target: usize, cfg: &ExplainerConfig) -> Result<EdgeMask> {
    to_mask(g, maskopt_scores(model, g, target, cfg)?, cfg.mask_ratio)
}

pub fn explain_occlusion(model: &Predictor, g: &Graph, target: usize, ratio: f64) -> Result<EdgeMask> {
    to_mask(g, occlusion_scores(model, g, target)?, ratio)
}

pub fn explain_screener(model: &Predictor, g: &Graph, target: usize, ratio: f64) -> Result<EdgeMask> {
    let budget = selection_size(g.edge_count(), ratio);
    to_mask(g, screener_scores(model, g, target, budget)?, ratio)
}

pub fn explain_random(g: &Graph, seed: u64, ratio: f64) -> Result<EdgeMask> {
    to_mask(g, random_scores(g, seed), ratio)
}

/// Runs one explainer on `g` for class `target`.
pub fn explain(
    model: &Predictor,
    g: &Graph,
    target: usize,
    kind: ExplainerKind,
    cfg: &ExplainerConfig,
) -> Result<EdgeMask> {
    cfg.validate()?;
    let r = cfg.mask_ratio;
    match kind {
        ExplainerKind::Sa => explain_sa(model, g, target, r),
        ExplainerKind::Gradcam => explain_gradcam(model, g, target, r),
        ExplainerKind::Maskopt => explain_maskopt(model, g, target, cfg),
        ExplainerKind::Occlusion => explain_occlusion(model, g, target, r),
        ExplainerKind::Screener => explain_screener(model, g, target, r),
        ExplainerKind::Random => explain_random(g, cfg.seed, r),
    }
}

/// Explains every graph (for its own label) with every requested explainer.
/// Records come back ordered by graph then by explainer.
pub fn explain_all(
    model: &Predictor,
    graphs: &[Graph],
    kinds: &[ExplainerKind],
    cfg: &ExplainerConfig,
) -> Result<Vec<MaskRecord>> {
    cfg.validate()?;
    let jobs: Vec<(usize, ExplainerKind)> = (0..graphs.len())
        .flat_map(|i| kinds.iter().map(move |&k| (i, k)))
        .collect();
    jobs.par_iter()
        .map(|&(i, kind)| {
            let g = &graphs[i];
            let mask = explain(model, g, g.label(), kind, cfg)?;
            Ok(MaskRecord::new(kind, cfg.mask_ratio, &mask))
        })
        .collect()
}

/// One line of a masks JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub graph_id: String,
    pub explainer: ExplainerKind,
    pub ratio: f64,
    /// `[u, v, score]` per parent edge, in edge order.
    pub scores: Vec<(usize, usize, f64)>,
    pub selected: Vec<(usize, usize)>,
}

impl MaskRecord {
    pub fn new(explainer: ExplainerKind, ratio: f64, mask: &EdgeMask) -> Self {
        Self {
            graph_id: mask.parent_id.clone(),
            explainer,
            ratio,
            scores: mask.scores.iter().map(|(e, s)| (e.0, e.1, *s)).collect(),
            selected: mask.selected.iter().map(|e| (e.0, e.1)).collect(),
        }
    }

    pub fn to_mask(&self) -> EdgeMask {
        EdgeMask {
            parent_id: self.graph_id.clone(),
            scores: self.scores.iter().map(|&(u, v, s)| (Edge::new(u, v), s)).collect(),
            selected: self.selected.iter().map(|&(u, v)| Edge::new(u, v)).collect(),
        }
    }
}

pub fn write_masks_jsonl(records: &[MaskRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_masks_jsonl(text: &str) -> Result<Vec<MaskRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::PredictorConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> Predictor {
        let cfg = PredictorConfig {
            hidden_dim: 8,
            seed,
            ..Default::default()
        };
        let mut m = Predictor::new(cfg, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        m.params.init_glorot("readout.w", 8, 3, &mut rng);
        m
    }

    fn probe() -> Graph {
        let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (1, 3), (4, 5)];
        let deg = [1.0, 3.0, 2.0, 3.0, 2.0, 1.0];
        let feats = Array2::from_shape_fn((6, 2), |(i, j)| if j == 0 { 1.0 } else { deg[i] });
        Graph::new("probe", 6, edges, feats, 0, Some(vec![(1, 2), (2, 3), (1, 3)])).unwrap()
    }

    #[test]
    fn parse_kinds() {
        assert_eq!(
            ExplainerKind::parse_list("sa, random").unwrap(),
            vec![ExplainerKind::Sa, ExplainerKind::Random]
        );
        assert!("pgm".parse::<ExplainerKind>().is_err());
    }

    #[test]
    fn every_explainer_scores_every_edge() {
        let m = model(3);
        let g = probe();
        for kind in ExplainerKind::ALL {
            let mask = explain(&m, &g, 0, kind, &ExplainerConfig::default()).unwrap();
            mask.check_complete(&g).unwrap();
            assert_eq!(mask.selected.len(), 1, "{kind}");
            let again = explain(&m, &g, 0, kind, &ExplainerConfig::default()).unwrap();
            assert_eq!(mask, again, "{kind}");
        }
    }

    #[test]
    fn isolated_featureless_edge_has_zero_saliency() {
        let m = model(4);
        let feats = ndarray::arr2(&[[1.0, 1.0], [1.0, 1.0], [0.0, 0.0], [0.0, 0.0]]);
        let g = Graph::new("split", 4, [(0, 1), (2, 3)], feats, 0, None).unwrap();
        // Zero features and zero biases keep the second component at zero.
        let mut m = m;
        for (name, _) in m.params.clone().iter() {
            if name.ends_with(".b") && name.starts_with("mp") {
                let shape = m.params.get(name).unwrap().dim();
                m.params.insert(name.clone(), Array2::zeros(shape));
            }
        }
        let s = sa_scores(&m, &g, 1).unwrap();
        assert_eq!(s[1], 0.0);
    }

    #[test]
    fn zero_readout_gradcam_is_zero() {
        let m = Predictor::new(PredictorConfig::default(), 2, 3).unwrap();
        assert!(gradcam_scores(&m, &probe(), 0).unwrap().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn gradcam_edge_is_mean_of_endpoints() {
        let m = model(6);
        let g = probe();
        let nodes = gradcam_node_scores(&m, &g, 2).unwrap();
        let edges = gradcam_scores(&m, &g, 2).unwrap();
        for (e, s) in g.edges().iter().zip(edges) {
            assert_eq!(s, (nodes[e.0] + nodes[e.1]) / 2.0);
        }
    }

    #[test]
    fn maskopt_zero_steps_is_half() {
        let cfg = ExplainerConfig {
            maskopt_steps: 0,
            ..Default::default()
        };
        let s = maskopt_scores(&model(1), &probe(), 0, &cfg).unwrap();
        assert!(s.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn maskopt_without_sparsity_keeps_target_probability() {
        let m = model(8);
        let g = probe();
        let cfg = ExplainerConfig {
            maskopt_steps: 1000,
            maskopt_lr: 0.05,
            maskopt_sparsity_coeff: 0.0,
            ..Default::default()
        };
        for target in 0..3 {
            let s = maskopt_scores(&m, &g, target, &cfg).unwrap();
            let soft = m.forward_weighted(&g, &s).unwrap()[target];
            let full = m.forward(&g).unwrap()[target];
            assert!(soft >= full - 0.05, "class {target}: {soft} vs {full}");
        }
    }

    #[test]
    fn occlusion_matches_brute_force() {
        let m = model(9);
        let g = probe();
        let fast = occlusion_scores(&m, &g, 1).unwrap();
        let base = m.forward(&g).unwrap()[1];
        for (i, e) in g.edges().iter().enumerate() {
            let kept: Vec<(usize, usize)> = g.edges().iter().filter(|x| *x != e).map(|x| (x.0, x.1)).collect();
            let h = Graph::new("h", 6, kept, g.features().clone(), 0, None).unwrap();
            assert_eq!(fast[i], base - m.forward(&h).unwrap()[1]);
        }
    }

    #[test]
    fn screener_budget_one_is_best_single_edge() {
        let m = model(10);
        let feats = Array2::from_shape_fn((4, 2), |(i, j)| if j == 0 { 1.0 } else { i as f64 });
        let g = Graph::new("tri", 4, [(0, 1), (1, 2), (2, 3)], feats, 0, None).unwrap();
        let s = screener_scores(&m, &g, 2, 1).unwrap();
        let probs: Vec<f64> = g
            .edges()
            .iter()
            .map(|e| m.forward(&g.with_edges([*e]).unwrap()).unwrap()[2])
            .collect();
        let best = (0..3).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
        assert_eq!(s.iter().filter(|&&v| v > 0.0).count(), 1);
        assert_eq!(s[best], 1.0);
    }

    #[test]
    fn screener_full_budget_selects_all() {
        let m = model(11);
        let g = probe();
        let mask = explain_screener(&m, &g, 0, 1.0).unwrap();
        assert_eq!(mask.selected.len(), g.edge_count());
        let mut ranks: Vec<f64> = mask.scores.values().copied().collect();
        ranks.sort_by(f64::total_cmp);
        let expected: Vec<f64> = (1..=6).map(|k| k as f64 / 6.0).collect();
        assert_eq!(ranks, expected);
    }

    #[test]
    fn random_depends_on_seed() {
        let g = probe();
        let a = random_scores(&g, 1);
        assert_eq!(a, random_scores(&g, 1));
        assert_ne!(a, random_scores(&g, 2));
        assert_ne!(random_scores(&g, 2), random_scores(&g, 3));
    }

    #[test]
    fn mask_records_roundtrip() {
        let m = model(12);
        let g = probe();
        let recs = explain_all(&m, std::slice::from_ref(&g), &ExplainerKind::ALL, &ExplainerConfig::default()).unwrap();
        assert_eq!(recs.len(), 6);
        let text = write_masks_jsonl(&recs).unwrap();
        let back = read_masks_jsonl(&text).unwrap();
        assert_eq!(back, recs);
        back[0].to_mask().check_complete(&g).unwrap();
    }
}
