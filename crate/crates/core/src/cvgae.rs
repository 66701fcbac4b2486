//! Conditional variational graph auto-encoder with a class-conditional
//! Wasserstein critic, plus the baseline generators it is compared against.
//!
//! The encoder runs two message-passing networks `f_mu` and `f_sigma` on both
//! the full graph `G` and a subgraph `G_s`; each node gets the latent
//! `z_i ~ N([mu1_i, mu2_i], diag(sigma1_i^2, sigma2_i^2))`. A two-layer MLP over
//! `[z_i, z_j]` scores every node pair. Surrogates keep every edge of `G_s` and
//! draw the remaining pairs independently from the decoder.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::rc::Rc;

use ndarray::{Array2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{DseError, Result};
use crate::graph::{all_pairs, selection_size, Edge, EdgeMask, Graph};
use crate::nn::{self, Adam, Bound, Checkpoint, ParamStore, Topology};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Width of each encoder head, of the hidden layers and of the decoder.
    pub encode_dim: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub kl_weight: f64,
    pub contrastive_weight: f64,
    pub adversarial_weight: f64,
    pub penalty_weight: f64,
    pub temperature: f64,
    /// Fraction of edges kept in the random training subgraphs.
    pub masking_ratio: f64,
    pub max_epochs: usize,
    /// Stop once the relative change of the epoch objective stays below this
    /// for three epochs; 0 disables.
    pub convergence_tol: f64,
    pub critic_dim: usize,
    /// Random identifier channels appended to the encoder input; 0 disables.
    pub node_id_dim: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            encode_dim: 256,
            batch_size: 256,
            learning_rate: 2e-4,
            weight_decay: 1e-5,
            kl_weight: 1e-4,
            contrastive_weight: 3.0,
            adversarial_weight: 5.0,
            penalty_weight: 5.0,
            temperature: 0.1,
            masking_ratio: 0.3,
            max_epochs: 100,
            convergence_tol: 0.0,
            critic_dim: 64,
            node_id_dim: 32,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DseError::Config(m.to_string()));
        if self.encode_dim == 0 || self.batch_size == 0 || self.critic_dim == 0 {
            return bad("generator dims must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.temperature > 0.0) {
            return bad("learning rate and temperature must be positive");
        }
        if !(self.masking_ratio > 0.0 && self.masking_ratio < 1.0) {
            return bad("masking ratio must lie in (0, 1)");
        }
        let weights = [
            self.weight_decay,
            self.kl_weight,
            self.contrastive_weight,
            self.adversarial_weight,
            self.penalty_weight,
            self.convergence_tol,
        ];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }
}

/// Index of the unordered pair `(i, j)`, `i < j`, in [`all_pairs`] order.
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i < j { (i, j) } else { (j, i) };
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

/// Edge probabilities for every unordered node pair, in [`all_pairs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeProbMatrix {
    pub node_count: usize,
    pub probs: Vec<f64>,
}

impl EdgeProbMatrix {
    pub fn constant(node_count: usize, p: f64) -> Self {
        Self {
            node_count,
            probs: vec![p; node_count * node_count.saturating_sub(1) / 2],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert_ne!(i, j, "no self pairs");
        self.probs[pair_index(self.node_count, i, j)]
    }

    /// `log p(A = edges)` over every pair.
    pub fn log_likelihood(&self, edges: &BTreeSet<Edge>) -> f64 {
        all_pairs(self.node_count)
            .iter()
            .zip(&self.probs)
            .map(|(e, &p)| bernoulli_ln(p, edges.contains(e)))
            .sum()
    }
}

fn bernoulli_ln(p: f64, present: bool) -> f64 {
    if present {
        p.ln()
    } else {
        (1.0 - p).ln()
    }
}

/// A generated completion of a subgraph over the parent's node set.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateSample {
    pub parent_id: String,
    pub edges: BTreeSet<Edge>,
    /// Sum of the Bernoulli log-probabilities of the free-pair draws.
    pub log_likelihood: f64,
    pub contains_subgraph: bool,
}

impl SurrogateSample {
    pub fn to_graph(&self, g: &Graph) -> Result<Graph> {
        g.with_edges(self.edges.iter().copied())
    }
}

/// Forces in `mask.selected` and draws every other pair from `probs`.
pub fn sample_from_probs(g: &Graph, mask: &EdgeMask, probs: &EdgeProbMatrix, rng: &mut impl Rng) -> SurrogateSample {
    let mut edges = BTreeSet::new();
    let mut ll = 0.0;
    for (e, &p) in all_pairs(g.node_count()).iter().zip(&probs.probs) {
        if mask.selected.contains(e) {
            edges.insert(*e);
            continue;
        }
        let present = rng.random::<f64>() < p;
        if present {
            edges.insert(*e);
        }
        ll += bernoulli_ln(p, present);
    }
    let contains_subgraph = mask.selected.is_subset(&edges);
    SurrogateSample {
        parent_id: g.id().to_string(),
        edges,
        log_likelihood: ll,
        contains_subgraph,
    }
}

/// A generator's edge distribution after conditioning on `(G, G_s)`.
pub trait Conditional {
    /// Pair probabilities for one stochastic latent draw.
    fn draw(&self, rng: &mut ChaCha8Rng) -> EdgeProbMatrix;
    /// Pair probabilities at the latent mean.
    fn mean(&self) -> EdgeProbMatrix;
}

/// Anything that can complete a subgraph into a surrogate graph.
pub trait SurrogateGenerator: Send + Sync {
    fn name(&self) -> &str;

    /// Conditions on a graph and a second graph over the same node set,
    /// usually one of its subgraphs.
    fn condition_on<'a>(&'a self, g: &Graph, sub: &Graph) -> Result<Box<dyn Conditional + 'a>>;

    fn condition<'a>(&'a self, g: &Graph, mask: &EdgeMask) -> Result<Box<dyn Conditional + 'a>> {
        self.condition_on(g, &crate::graph::induce_subgraph(g, mask)?)
    }
}

pub fn sample_surrogate(
    generator: &dyn SurrogateGenerator,
    g: &Graph,
    mask: &EdgeMask,
    rng: &mut ChaCha8Rng,
) -> Result<SurrogateSample> {
    let cond = generator.condition(g, mask)?;
    let probs = cond.draw(rng);
    Ok(sample_from_probs(g, mask, &probs, rng))
}

struct Fixed(EdgeProbMatrix);

impl Conditional for Fixed {
    fn draw(&self, _rng: &mut ChaCha8Rng) -> EdgeProbMatrix {
        self.0.clone()
    }

    fn mean(&self) -> EdgeProbMatrix {
        self.0.clone()
    }
}

/// Fills free pairs uniformly at random so the expected edge count matches `G`.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomGenerator;

impl SurrogateGenerator for RandomGenerator {
    fn name(&self) -> &str {
        "random"
    }

    fn condition_on<'a>(&'a self, g: &Graph, sub: &Graph) -> Result<Box<dyn Conditional + 'a>> {
        let n = g.node_count();
        let free = (n * n.saturating_sub(1) / 2).saturating_sub(sub.edge_count());
        let missing = g.edge_count().saturating_sub(sub.edge_count());
        let p = if free == 0 { 0.0 } else { missing as f64 / free as f64 };
        Ok(Box::new(Fixed(EdgeProbMatrix::constant(n, p))))
    }
}

/// Returns `G_s` unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityGenerator;

impl SurrogateGenerator for IdentityGenerator {
    fn name(&self) -> &str {
        "identity"
    }

    fn condition_on<'a>(&'a self, g: &Graph, _sub: &Graph) -> Result<Box<dyn Conditional + 'a>> {
        Ok(Box::new(Fixed(EdgeProbMatrix::constant(g.node_count(), 0.0))))
    }
}

/// Reproduces `G` exactly.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleGenerator;

impl SurrogateGenerator for OracleGenerator {
    fn name(&self) -> &str {
        "oracle"
    }

    fn condition_on<'a>(&'a self, g: &Graph, _sub: &Graph) -> Result<Box<dyn Conditional + 'a>> {
        let n = g.node_count();
        let probs = all_pairs(n)
            .iter()
            .map(|e| if g.has_edge(*e) { 1.0 } else { 0.0 })
            .collect();
        Ok(Box::new(Fixed(EdgeProbMatrix { node_count: n, probs })))
    }
}

/// Per-node Gaussian posterior and one reparameterised draw.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub mu: Array2<f64>,
    pub log_sigma: Array2<f64>,
    pub z: Array2<f64>,
}

/// Closed-form `KL(N(mu, sigma^2) || N(0, 1))` summed over every entry.
pub fn kl_divergence(mu: &Array2<f64>, log_sigma: &Array2<f64>) -> f64 {
    mu.iter()
        .zip(log_sigma)
        .map(|(&m, &ls)| 0.5 * (m * m + (2.0 * ls).exp() - 1.0) - ls)
        .sum()
}

/// Binary cross-entropy of `probs` against 0/1 `targets`.
pub fn bce(probs: &[f64], targets: &[bool]) -> f64 {
    probs.iter().zip(targets).map(|(&p, &t)| -bernoulli_ln(p, t)).sum()
}

/// Supervised contrastive loss over graph embeddings (one row per graph)
/// with inner-product similarity. Anchors without a same-class partner are
/// skipped; returns 0 when no anchor qualifies.
pub fn contrastive_loss<'t>(tape: &'t Tape, emb: Var<'t>, labels: &[usize], tau: f64) -> Var<'t> {
    let b = labels.len();
    const OFF: f64 = -1e30;
    let sim = emb.matmul(emb.t()).scale(1.0 / tau);
    let others = Array2::from_shape_fn((b, b), |(i, j)| if i == j { OFF } else { 0.0 });
    let positives = Array2::from_shape_fn((b, b), |(i, j)| {
        if i != j && labels[i] == labels[j] {
            0.0
        } else {
            OFF
        }
    });
    let active: Vec<f64> = (0..b)
        .map(|i| (0..b).any(|j| j != i && labels[j] == labels[i]) as u8 as f64)
        .collect();
    let count: f64 = active.iter().sum();
    if count == 0.0 {
        return tape.scalar(0.0);
    }
    let lse_all = sim.add(tape.constant(others)).logsumexp_rows();
    let lse_pos = sim.add(tape.constant(positives)).logsumexp_rows();
    lse_all
        .sub(lse_pos)
        .mul(tape.constant(Array2::from_shape_vec((b, 1), active).unwrap()))
        .sum()
        .scale(1.0 / count)
}

pub fn contrastive_loss_value(emb: &Array2<f64>, labels: &[usize], tau: f64) -> f64 {
    let tape = Tape::new();
    contrastive_loss(&tape, tape.constant(emb.clone()), labels, tau).item()
}

/// Everything the losses need about a batch of `(G, G_s)` pairs.
pub struct Batch {
    pub labels: Vec<usize>,
    features: Array2<f64>,
    critic_features: Array2<f64>,
    topo_full: Topology,
    topo_sub: Topology,
    topo_pairs: Topology,
    pair_i: Rc<Vec<usize>>,
    pair_j: Rc<Vec<usize>>,
    pair_graph: Rc<Vec<usize>>,
    /// 1 where the pair is an edge of `G`.
    real: Array2<f64>,
    /// 1 where the pair is an edge of `G_s`.
    forced: Array2<f64>,
    free: Rc<Array2<f64>>,
    /// `1 / (n - 1)` per pair so critic messages average over neighbours.
    pair_scale: Array2<f64>,
    node_counts: Vec<usize>,
    node_ids: Option<Array2<f64>>,
    num_nodes: usize,
}

impl Batch {
    pub fn new(graphs: &[&Graph], subs: &[&Graph], num_classes: usize) -> Result<Self> {
        if graphs.is_empty() {
            return Err(DseError::EmptyInput("generator batch"));
        }
        if graphs.len() != subs.len() {
            return Err(DseError::Shape("one conditioning graph per graph required".into()));
        }
        for (g, s) in graphs.iter().zip(subs) {
            if g.node_count() != s.node_count() {
                return Err(DseError::Shape(format!(
                    "conditioning graph for `{}` has {} nodes, expected {}",
                    g.id(),
                    s.node_count(),
                    g.node_count()
                )));
            }
        }
        let pair_lists: Vec<Vec<Edge>> = graphs.iter().map(|g| all_pairs(g.node_count())).collect();
        let (mut pi, mut pj, mut pg, mut real, mut forced) = (vec![], vec![], vec![], vec![], vec![]);
        let mut scale = vec![];
        let mut offset = 0;
        for (b, ((g, s), pairs)) in graphs.iter().zip(subs).zip(&pair_lists).enumerate() {
            for e in pairs {
                pi.push(offset + e.0);
                pj.push(offset + e.1);
                pg.push(b);
                real.push(g.has_edge(*e) as u8 as f64);
                forced.push(s.has_edge(*e) as u8 as f64);
                scale.push(1.0 / (g.node_count() - 1) as f64);
            }
            offset += g.node_count();
        }
        let p = pi.len();
        let real = Array2::from_shape_vec((p, 1), real).unwrap();
        let forced = Array2::from_shape_vec((p, 1), forced).unwrap();
        let free = forced.mapv(|f| 1.0 - f);
        let features = nn::stack_features(graphs);
        let labels: Vec<usize> = graphs.iter().map(|g| g.label()).collect();
        let critic_features = critic_features(graphs, num_classes);
        Ok(Self {
            topo_full: Topology::of_graphs(graphs),
            topo_sub: Topology::of_graphs(subs),
            topo_pairs: Topology::new(graphs.iter().zip(&pair_lists).map(|(g, p)| (g.node_count(), p.as_slice()))),
            labels,
            features,
            critic_features,
            pair_i: Rc::new(pi),
            pair_j: Rc::new(pj),
            pair_graph: Rc::new(pg),
            real,
            forced,
            free: Rc::new(free),
            pair_scale: Array2::from_shape_vec((p, 1), scale).unwrap(),
            node_counts: graphs.iter().map(|g| g.node_count()).collect(),
            node_ids: None,
            num_nodes: offset,
        })
    }

    pub fn num_graphs(&self) -> usize {
        self.labels.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.pair_i.len()
    }

    pub fn real_weights(&self) -> &Array2<f64> {
        &self.real
    }

    /// Uses `ids` (one row per node) as the encoder's identifier channels
    /// instead of the model's fixed draw.
    pub fn with_node_ids(mut self, ids: Array2<f64>) -> Self {
        self.node_ids = Some(ids);
        self
    }
}

/// One-hot identifier rows: each graph's nodes get distinct random slots
/// (slots repeat only when a graph has more nodes than `dim`).
fn random_ids(node_counts: &[usize], dim: usize, rng: &mut impl Rng) -> Array2<f64> {
    let total: usize = node_counts.iter().sum();
    let mut ids = Array2::zeros((total, dim));
    if dim == 0 {
        return ids;
    }
    let mut row = 0;
    for &n in node_counts {
        let mut slots: Vec<usize> = (0..dim).collect();
        for i in 0..n {
            if i % dim == 0 {
                slots.shuffle(rng);
            }
            ids[[row, slots[i % dim]]] = 1.0;
            row += 1;
        }
    }
    ids
}

fn critic_features(graphs: &[&Graph], num_classes: usize) -> Array2<f64> {
    let feats = nn::stack_features(graphs);
    let mut onehot = Array2::zeros((feats.nrows(), num_classes));
    let mut row = 0;
    for g in graphs {
        for _ in 0..g.node_count() {
            onehot[[row, g.label()]] = 1.0;
            row += 1;
        }
    }
    ndarray::concatenate(Axis(1), &[feats.view(), onehot.view()]).unwrap()
}

/// Class-conditional critic scoring a weighted complete graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub params: ParamStore,
}

const CRITIC_LAYERS: usize = 3;

impl Critic {
    pub fn new(feature_dim: usize, num_classes: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let mut fan_in = feature_dim + num_classes;
        for l in 0..CRITIC_LAYERS {
            nn::init_message_passing(&mut params, &format!("critic.mp{l}"), fan_in, dim, rng);
            fan_in = dim;
        }
        nn::init_linear(&mut params, "critic.out", dim, 1, rng);
        Self {
            feature_dim,
            num_classes,
            dim,
            params,
        }
    }

    /// One unbounded score per graph, `graphs × 1`.
    pub fn score<'t>(&self, tape: &'t Tape, p: &Bound<'t>, batch: &Batch, weights: Var<'t>) -> Var<'t> {
        let topo = &batch.topo_pairs;
        let weights = weights.mul_col(tape.constant(batch.pair_scale.clone()));
        let mut h = tape.constant(batch.critic_features.clone());
        for l in 0..CRITIC_LAYERS {
            h = nn::message_passing(p, &format!("critic.mp{l}"), topo, h, weights, true);
        }
        nn::linear(p, "critic.out", topo.mean_pool(tape, h))
    }

    /// `lambda * mean_b (||d d(w_hat_b) / d w_hat_b|| - 1)^2` at `w_hat`.
    pub fn gradient_penalty<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        batch: &Batch,
        w_hat: Var<'t>,
        lambda: f64,
    ) -> Var<'t> {
        let d = self.score(tape, p, batch, w_hat);
        let grad = tape.grad(d.sum(), &[w_hat])[0];
        let sq = grad
            .square()
            .scatter_add_rc(Rc::clone(&batch.pair_graph), batch.num_graphs());
        sq.affine(1.0, 1e-12).sqrt().affine(1.0, -1.0).square().mean().scale(lambda)
    }

    /// Critic objective to minimise: `mean d(fake) - mean d(real) + GP`, with
    /// the penalty taken at `eps_b * real + (1 - eps_b) * fake`. Returns the
    /// loss and the penalty separately.
    pub fn loss<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        batch: &Batch,
        fake: &Array2<f64>,
        interp: &[f64],
        lambda: f64,
    ) -> (Var<'t>, Var<'t>) {
        let d_real = self.score(tape, p, batch, tape.constant(batch.real.clone()));
        let d_fake = self.score(tape, p, batch, tape.constant(fake.clone()));
        let w_hat = Array2::from_shape_fn(fake.dim(), |(k, _)| {
            let e = interp[batch.pair_graph[k]];
            e * batch.real[[k, 0]] + (1.0 - e) * fake[[k, 0]]
        });
        let gp = if lambda > 0.0 {
            self.gradient_penalty(tape, p, batch, tape.var(w_hat), lambda)
        } else {
            tape.scalar(0.0)
        };
        (d_fake.mean().sub(d_real.mean()).add(gp), gp)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            metadata: serde_json::json!({
                "kind": "critic",
                "feature_dim": self.feature_dim,
                "num_classes": self.num_classes,
                "dim": self.dim,
            }),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.metadata;
        if meta["kind"] != "critic" {
            return Err(DseError::Checkpoint("not a critic checkpoint".into()));
        }
        let get = |k: &str| {
            meta[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| DseError::Checkpoint(format!("metadata missing `{k}`")))
        };
        Ok(Self {
            feature_dim: get("feature_dim")?,
            num_classes: get("num_classes")?,
            dim: get("dim")?,
            params: ck.params.clone(),
        })
    }
}

const ENC_LAYERS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Cvgae {
    pub config: GeneratorConfig,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub params: ParamStore,
    /// Label used in reports and CSV rows.
    pub label: String,
}

impl Cvgae {
    pub fn new(config: GeneratorConfig, feature_dim: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let d = config.encode_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        for head in ["mu", "ls"] {
            let mut fan_in = feature_dim + config.node_id_dim;
            for l in 0..ENC_LAYERS {
                nn::init_message_passing(&mut params, &format!("{head}.mp{l}"), fan_in, d, &mut rng);
                fan_in = d;
            }
            // Start from the prior: mu = 0, log sigma = 0.
            let last = ENC_LAYERS - 1;
            params.init_zeros(&format!("{head}.mp{last}.w_self"), d, d);
            params.init_zeros(&format!("{head}.mp{last}.w_nb"), d, d);
        }
        params.init_glorot("dec.a", 2 * d, d, &mut rng);
        params.init_glorot("dec.b", 2 * d, d, &mut rng);
        params.init_zeros("dec.b1", 1, d);
        params.init_glorot("dec.w2", d, 1, &mut rng);
        params.init_zeros("dec.c", 1, 1);
        Ok(Self {
            config,
            feature_dim,
            num_classes,
            params,
            label: "cvgae".into(),
        })
    }

    pub fn latent_dim(&self) -> usize {
        2 * self.config.encode_dim
    }

    fn head<'t>(&self, p: &Bound<'t>, head: &str, topo: &Topology, x: Var<'t>, tape: &'t Tape) -> Var<'t> {
        let mut h = x;
        for l in 0..ENC_LAYERS {
            h = nn::message_passing(p, &format!("{head}.mp{l}"), topo, h, topo.unit_weights(tape), l + 1 < ENC_LAYERS);
        }
        h
    }

    /// `(mu, log_sigma)`, each `nodes × 2·encode_dim`.
    pub fn encode_vars<'t>(&self, tape: &'t Tape, p: &Bound<'t>, batch: &Batch) -> (Var<'t>, Var<'t>) {
        let x = tape.constant(self.encoder_input(batch));
        let mu = self
            .head(p, "mu", &batch.topo_full, x, tape)
            .concat_cols(self.head(p, "mu", &batch.topo_sub, x, tape));
        let ls = self
            .head(p, "ls", &batch.topo_full, x, tape)
            .concat_cols(self.head(p, "ls", &batch.topo_sub, x, tape));
        (mu, bound_log_sigma(ls))
    }

    /// Identifier channels used at inference: a fixed draw per node count, so
    /// graphs over the same node set always see the same identifiers.
    pub fn fixed_node_ids(&self, n: usize) -> Array2<f64> {
        let mut rng = crate::seeds::rng_for(self.config.seed, "node-ids", n as u64);
        random_ids(&[n], self.config.node_id_dim, &mut rng)
    }

    fn encoder_input(&self, batch: &Batch) -> Array2<f64> {
        if self.config.node_id_dim == 0 {
            return batch.features.clone();
        }
        let ids = match &batch.node_ids {
            Some(ids) => ids.clone(),
            None => {
                let blocks: Vec<Array2<f64>> = batch.node_counts.iter().map(|&n| self.fixed_node_ids(n)).collect();
                let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
                ndarray::concatenate(Axis(0), &views).unwrap()
            }
        };
        ndarray::concatenate(Axis(1), &[batch.features.view(), ids.view()]).unwrap()
    }

    /// Symmetrised pair logits, `pairs × 1`.
    pub fn decode_vars<'t>(&self, p: &Bound<'t>, z: Var<'t>, pi: &Rc<Vec<usize>>, pj: &Rc<Vec<usize>>) -> Var<'t> {
        let u = z.matmul(p.get("dec.a"));
        let v = z.matmul(p.get("dec.b"));
        let b1 = p.get("dec.b1");
        let (ui, uj) = (u.gather_rc(Rc::clone(pi)), u.gather_rc(Rc::clone(pj)));
        let (vi, vj) = (v.gather_rc(Rc::clone(pi)), v.gather_rc(Rc::clone(pj)));
        let h_ij = ui.add(vj).add_row(b1).relu();
        let h_ji = uj.add(vi).add_row(b1).relu();
        let w2 = p.get("dec.w2");
        h_ij.matmul(w2)
            .add(h_ji.matmul(w2))
            .scale(0.5)
            .add_row(p.get("dec.c"))
    }

    /// Reconstruction (summed BCE over free pairs) and KL, both averaged over
    /// graphs, for a fixed noise draw `eps`. Also returns `Z` and the logits.
    pub fn vae_terms<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        batch: &Batch,
        mu: Var<'t>,
        ls: Var<'t>,
        eps: &Array2<f64>,
    ) -> VaeTerms<'t> {
        let b = batch.num_graphs() as f64;
        let z = mu.add(ls.exp().mul(tape.constant(eps.clone())));
        let logits = self.decode_vars(p, z, &batch.pair_i, &batch.pair_j);
        // BCE with logits: softplus(x) - y x.
        let recon = logits
            .softplus()
            .sub(logits.mul(tape.constant(batch.real.clone())))
            .mul_const(Rc::clone(&batch.free))
            .sum()
            .scale(1.0 / b);
        let kl = mu
            .square()
            .add(ls.scale(2.0).exp())
            .affine(0.5, -0.5)
            .sub(ls)
            .sum()
            .scale(1.0 / b);
        VaeTerms { z, logits, recon, kl }
    }

    /// Soft surrogate weights: 1 on `G_s` pairs, decoder probability elsewhere.
    pub fn soft_weights<'t>(&self, tape: &'t Tape, batch: &Batch, logits: Var<'t>) -> Var<'t> {
        logits
            .sigmoid()
            .mul_const(Rc::clone(&batch.free))
            .add(tape.constant(batch.forced.clone()))
    }

    fn noise(&self, rows: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, self.latent_dim()), || rng.sample(StandardNormal))
    }

    /// Reparameterised latent code of `(g, g_s)`.
    pub fn encode(&self, g: &Graph, g_s: &Graph, rng: &mut impl Rng) -> Result<LatentCode> {
        self.check(g)?;
        let batch = Batch::new(&[g], &[g_s], self.num_classes)?;
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let (mu, ls) = self.encode_vars(&tape, &p, &batch);
        let (mu, ls) = ((*mu.value()).clone(), (*ls.value()).clone());
        let eps = self.noise(g.node_count(), rng);
        let z = &mu + &(ls.mapv(f64::exp) * &eps);
        Ok(LatentCode { mu, log_sigma: ls, z })
    }

    /// Pair probabilities for latent rows `z`.
    pub fn decode(&self, z: &Array2<f64>) -> EdgeProbMatrix {
        let n = z.nrows();
        let pairs = all_pairs(n);
        let pi = Rc::new(pairs.iter().map(|e| e.0).collect::<Vec<_>>());
        let pj = Rc::new(pairs.iter().map(|e| e.1).collect::<Vec<_>>());
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let logits = self.decode_vars(&p, tape.constant(z.clone()), &pi, &pj);
        let probs = logits.value().iter().map(|&x| sigmoid(x)).collect();
        EdgeProbMatrix { node_count: n, probs }
    }

    fn check(&self, g: &Graph) -> Result<()> {
        if g.feature_dim() != self.feature_dim {
            return Err(DseError::Shape(format!(
                "graph `{}` has {} features, generator expects {}",
                g.id(),
                g.feature_dim(),
                self.feature_dim
            )));
        }
        if g.label() >= self.num_classes {
            return Err(DseError::InvalidGraph {
                id: g.id().to_string(),
                reason: format!("label {} outside the generator's {} classes", g.label(), self.num_classes),
            });
        }
        Ok(())
    }

    /// `beta`-weighted VAE loss of a batch for one noise draw.
    pub fn loss_vae(&self, batch: &Batch, rng: &mut impl Rng) -> f64 {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let (mu, ls) = self.encode_vars(&tape, &p, batch);
        let eps = self.noise(batch.num_nodes, rng);
        let t = self.vae_terms(&tape, &p, batch, mu, ls, &eps);
        t.recon.item() + self.config.kl_weight * t.kl.item()
    }

    /// Contrastive loss of a batch for one noise draw.
    pub fn loss_contrastive(&self, batch: &Batch, rng: &mut impl Rng) -> f64 {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let (mu, ls) = self.encode_vars(&tape, &p, batch);
        let eps = self.noise(batch.num_nodes, rng);
        let t = self.vae_terms(&tape, &p, batch, mu, ls, &eps);
        let emb = batch.topo_full.mean_pool(&tape, t.z);
        contrastive_loss(&tape, emb, &batch.labels, self.config.temperature).item()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            metadata: serde_json::json!({
                "kind": "generator",
                "label": self.label,
                "config": self.config,
                "feature_dim": self.feature_dim,
                "num_classes": self.num_classes,
            }),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.metadata;
        if meta["kind"] != "generator" {
            return Err(DseError::Checkpoint("not a generator checkpoint".into()));
        }
        let get = |k: &str| {
            meta[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| DseError::Checkpoint(format!("metadata missing `{k}`")))
        };
        let config: GeneratorConfig = serde_json::from_value(meta["config"].clone())?;
        let fresh = Cvgae::new(config.clone(), get("feature_dim")?, get("num_classes")?)?;
        for (name, arr) in fresh.params.iter() {
            if ck.params.get(name).map(|a| a.dim()) != Some(arr.dim()) {
                return Err(DseError::Checkpoint(format!("parameter `{name}` missing or wrongly shaped")));
            }
        }
        Ok(Self {
            params: ck.params.clone(),
            label: meta["label"].as_str().unwrap_or("cvgae").to_string(),
            ..fresh
        })
    }
}

/// Largest `|log sigma|` the encoder can emit.
pub const LOG_SIGMA_BOUND: f64 = 6.0;

/// `B tanh(x / B)`, written with the sigmoid the tape provides.
fn bound_log_sigma(raw: Var<'_>) -> Var<'_> {
    raw.scale(2.0 / LOG_SIGMA_BOUND)
        .sigmoid()
        .affine(2.0 * LOG_SIGMA_BOUND, -LOG_SIGMA_BOUND)
}

pub struct VaeTerms<'t> {
    pub z: Var<'t>,
    pub logits: Var<'t>,
    pub recon: Var<'t>,
    pub kl: Var<'t>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct CvgaeConditional<'a> {
    model: &'a Cvgae,
    mu: Array2<f64>,
    sigma: Array2<f64>,
}

impl Conditional for CvgaeConditional<'_> {
    fn draw(&self, rng: &mut ChaCha8Rng) -> EdgeProbMatrix {
        let eps = self.model.noise(self.mu.nrows(), rng);
        self.model.decode(&(&self.mu + &(&self.sigma * &eps)))
    }

    fn mean(&self) -> EdgeProbMatrix {
        self.model.decode(&self.mu)
    }
}

impl SurrogateGenerator for Cvgae {
    fn name(&self) -> &str {
        &self.label
    }

    fn condition_on<'a>(&'a self, g: &Graph, sub: &Graph) -> Result<Box<dyn Conditional + 'a>> {
        let code = self.encode(g, sub, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(Box::new(CvgaeConditional {
            model: self,
            sigma: code.log_sigma.mapv(f64::exp),
            mu: code.mu,
        }))
    }
}

/// Mean losses of one training epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub vae: f64,
    pub contrastive: f64,
    /// Critic objective `E[d(G) - d(G*) - GP]`.
    pub discriminator: f64,
    /// Generator objective `L_VAE + gamma L_C - omega E[d(G*)]`.
    pub total: f64,
}

pub fn losses_csv(losses: &[EpochLosses]) -> String {
    let mut out = String::from("epoch,l_vae,l_c,l_d,total\n");
    for l in losses {
        writeln!(out, "{},{},{},{},{}", l.epoch, l.vae, l.contrastive, l.discriminator, l.total).unwrap();
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainedGenerator {
    pub generator: Cvgae,
    pub critic: Critic,
    pub losses: Vec<EpochLosses>,
}

/// Random subgraph keeping `selection_size(|E|, ratio)` edges chosen uniformly.
pub fn random_subgraph(g: &Graph, ratio: f64, rng: &mut impl Rng) -> Graph {
    crate::graph::induce_subgraph(g, &random_mask(g, ratio, rng)).expect("own mask")
}

pub fn random_mask(g: &Graph, ratio: f64, rng: &mut impl Rng) -> EdgeMask {
    let k = selection_size(g.edge_count(), ratio);
    let kept: Vec<Edge> = g.edges().choose_multiple(rng, k).copied().collect();
    EdgeMask::from_selection(g, kept).expect("edges of g")
}

fn make_batch(graphs: &[&Graph], cfg: &GeneratorConfig, num_classes: usize, rng: &mut impl Rng) -> Result<Batch> {
    let subs: Vec<Graph> = graphs.iter().map(|g| random_subgraph(g, cfg.masking_ratio, rng)).collect();
    let batch = Batch::new(graphs, &subs.iter().collect::<Vec<_>>(), num_classes)?;
    let ids = random_ids(&batch.node_counts, cfg.node_id_dim, rng);
    Ok(batch.with_node_ids(ids))
}

/// Alternating critic / generator training on random subgraphs.
pub fn train_generator(dataset: &[Graph], cfg: &GeneratorConfig) -> Result<TrainedGenerator> {
    train_generator_with_progress(dataset, cfg, |_| {})
}

pub fn train_generator_with_progress(
    dataset: &[Graph],
    cfg: &GeneratorConfig,
    mut on_epoch: impl FnMut(&EpochLosses),
) -> Result<TrainedGenerator> {
    cfg.validate()?;
    let first = dataset.first().ok_or(DseError::EmptyInput("generator training set"))?;
    let feature_dim = first.feature_dim();
    let num_classes = dataset.iter().map(|g| g.label()).max().unwrap() + 1;
    let mut model = Cvgae::new(cfg.clone(), feature_dim, num_classes)?;
    for g in dataset {
        model.check(g)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut critic = Critic::new(feature_dim, num_classes, cfg.critic_dim, &mut rng);
    let mut opt_g = Adam::new(cfg.learning_rate, cfg.weight_decay);
    let mut opt_d = Adam::new(cfg.learning_rate, cfg.weight_decay);
    let adversarial = cfg.adversarial_weight > 0.0;

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut losses = Vec::new();
    let mut calm_epochs = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let fail = |what: &str, v: f64| DseError::Training {
                epoch,
                step,
                message: format!("{what} is {v}"),
            };

            let mut l_d = 0.0;
            if adversarial {
                let graphs: Vec<&Graph> = chunk.iter().map(|&i| &dataset[i]).collect();
                let batch = make_batch(&graphs, cfg, num_classes, &mut rng)?;
                let fake = {
                    let tape = Tape::new();
                    let p = model.params.bind_frozen(&tape);
                    let (mu, ls) = model.encode_vars(&tape, &p, &batch);
                    let eps = model.noise(batch.num_nodes, &mut rng);
                    let t = model.vae_terms(&tape, &p, &batch, mu, ls, &eps);
                    (*model.soft_weights(&tape, &batch, t.logits).value()).clone()
                };
                let interp: Vec<f64> = (0..batch.num_graphs()).map(|_| rng.random::<f64>()).collect();
                let tape = Tape::new();
                let p = critic.params.bind(&tape);
                let (loss, _) = critic.loss(&tape, &p, &batch, &fake, &interp, cfg.penalty_weight);
                l_d = -loss.item();
                if !l_d.is_finite() {
                    return Err(fail("critic loss", l_d));
                }
                let grads = p.grads(&tape, loss);
                opt_d.step(&mut critic.params, &grads);
            }

            let picks: Vec<&Graph> = (0..chunk.len())
                .map(|_| &dataset[rng.random_range(0..dataset.len())])
                .collect();
            let batch = make_batch(&picks, cfg, num_classes, &mut rng)?;
            let tape = Tape::new();
            let p = model.params.bind(&tape);
            let (mu, ls) = model.encode_vars(&tape, &p, &batch);
            let eps = model.noise(batch.num_nodes, &mut rng);
            let t = model.vae_terms(&tape, &p, &batch, mu, ls, &eps);
            let l_vae = t.recon.add(t.kl.scale(cfg.kl_weight));
            let emb = batch.topo_full.mean_pool(&tape, t.z);
            let l_c = contrastive_loss(&tape, emb, &batch.labels, cfg.temperature);
            let mut total = l_vae.add(l_c.scale(cfg.contrastive_weight));
            if adversarial {
                let cp = critic.params.bind_frozen(&tape);
                let fake = model.soft_weights(&tape, &batch, t.logits);
                let d_fake = critic.score(&tape, &cp, &batch, fake).mean();
                total = total.sub(d_fake.scale(cfg.adversarial_weight));
            }
            let (v, c, tot) = (l_vae.item(), l_c.item(), total.item());
            for (what, x) in [("VAE loss", v), ("contrastive loss", c), ("generator loss", tot)] {
                if !x.is_finite() {
                    return Err(fail(what, x));
                }
            }
            let grads = p.grads(&tape, total);
            opt_g.step(&mut model.params, &grads);
            for (s, x) in sums.iter_mut().zip([v, c, l_d, tot]) {
                *s += x;
            }
            steps += 1;
        }
        let k = steps.max(1) as f64;
        let record = EpochLosses {
            epoch: epoch + 1,
            vae: sums[0] / k,
            contrastive: sums[1] / k,
            discriminator: sums[2] / k,
            total: sums[3] / k,
        };
        on_epoch(&record);
        if let Some(prev) = losses.last().map(|l: &EpochLosses| l.total) {
            let rel = (record.total - prev).abs() / prev.abs().max(1e-12);
            calm_epochs = if rel < cfg.convergence_tol { calm_epochs + 1 } else { 0 };
        }
        losses.push(record);
        if cfg.convergence_tol > 0.0 && calm_epochs >= 3 {
            break;
        }
    }
    Ok(TrainedGenerator {
        generator: model,
        critic,
        losses,
    })
}
