//! Three-class synthetic dataset: a random tree with one attached motif
//! (house, cycle or crane). The motif type is the label and the motif edges
//! are the ground-truth explanation.

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DseError, Result};
use crate::graph::{Edge, Graph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motif {
    House,
    Cycle,
    Crane,
}

impl Motif {
    pub const ALL: [Motif; 3] = [Motif::House, Motif::Cycle, Motif::Crane];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Motif::House => "house",
            Motif::Cycle => "cycle",
            Motif::Crane => "crane",
        }
    }

    pub fn parse(kind: &str) -> Result<Self> {
        match kind {
            "house" => Ok(Motif::House),
            "cycle" => Ok(Motif::Cycle),
            "crane" => Ok(Motif::Crane),
            other => Err(DseError::Config(format!("unknown motif `{other}`"))),
        }
    }
}

/// Node count and edge list of a motif, in local indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MotifTemplate {
    pub nodes: usize,
    pub edges: Vec<Edge>,
}

/// Fixed motif shapes.
///
/// - house: square `0-1-2-3` with roof apex `4` on the top pair `(0, 1)`;
///   5 nodes, 6 edges.
/// - cycle: hexagon; 6 nodes, 6 edges.
/// - crane: triangle `0-1-2`, neck `2-3-4`, triangle `4-5-6`, leg `6-7`;
///   8 nodes, 9 edges.
pub fn motif_template(kind: Motif) -> MotifTemplate {
    let pairs: &[(usize, usize)] = match kind {
        Motif::House => &[(0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (1, 4)],
        Motif::Cycle => &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0)],
        Motif::Crane => &[
            (0, 1),
            (1, 2),
            (0, 2),
            (2, 3),
            (3, 4),
            (4, 5),
            (5, 6),
            (4, 6),
            (6, 7),
        ],
    };
    let edges: Vec<Edge> = pairs.iter().map(|&(u, v)| Edge::new(u, v)).collect();
    let nodes = pairs.iter().map(|&(u, v)| u.max(v)).max().unwrap() + 1;
    MotifTemplate { nodes, edges }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeFeatures {
    /// `[1, degree]`.
    OnesAndDegree,
    /// `[1]`.
    Ones,
}

impl NodeFeatures {
    pub fn dim(self) -> usize {
        match self {
            NodeFeatures::OnesAndDegree => 2,
            NodeFeatures::Ones => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tr3Config {
    pub num_graphs: usize,
    pub base_nodes_min: usize,
    pub base_nodes_max: usize,
    pub seed: u64,
    pub node_features: NodeFeatures,
}

impl Default for Tr3Config {
    fn default() -> Self {
        Self {
            num_graphs: 3000,
            base_nodes_min: 8,
            base_nodes_max: 15,
            seed: 17,
            node_features: NodeFeatures::Ones,
        }
    }
}

impl Tr3Config {
    pub fn feature_dim(&self) -> usize {
        self.node_features.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_graphs == 0 || self.num_graphs % 3 != 0 {
            return Err(DseError::Config(format!(
                "num_graphs must be a positive multiple of 3, got {}",
                self.num_graphs
            )));
        }
        if self.base_nodes_min < 3 || self.base_nodes_max < self.base_nodes_min {
            return Err(DseError::Config(format!(
                "tree size range {}..={} invalid (min >= 3, max >= min)",
                self.base_nodes_min, self.base_nodes_max
            )));
        }
        Ok(())
    }
}

/// Decodes a Prüfer sequence over `n = seq.len() + 2` nodes.
pub fn prufer_to_tree(seq: &[usize]) -> Vec<Edge> {
    let n = seq.len() + 2;
    let mut degree = vec![1usize; n];
    for &s in seq {
        degree[s] += 1;
    }
    let mut edges = Vec::with_capacity(n - 1);
    for &s in seq {
        let leaf = (0..n).find(|&i| degree[i] == 1).expect("a leaf always exists");
        edges.push(Edge::new(leaf, s));
        degree[leaf] -= 1;
        degree[s] -= 1;
    }
    let rest: Vec<usize> = (0..n).filter(|&i| degree[i] == 1).collect();
    edges.push(Edge::new(rest[0], rest[1]));
    edges
}

fn random_tree(n: usize, rng: &mut impl Rng) -> Vec<Edge> {
    if n == 2 {
        return vec![Edge(0, 1)];
    }
    let seq: Vec<usize> = (0..n - 2).map(|_| rng.random_range(0..n)).collect();
    prufer_to_tree(&seq)
}

/// Per-graph seed so graphs can be generated independently.
fn graph_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64)
}

fn generate_one(cfg: &Tr3Config, index: usize) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(graph_seed(cfg.seed, index));
    let motif = Motif::ALL[index % 3];
    let base = rng.random_range(cfg.base_nodes_min..=cfg.base_nodes_max);
    let template = motif_template(motif);
    let mut edges = random_tree(base, &mut rng);
    let motif_edges: Vec<Edge> = template
        .edges
        .iter()
        .map(|e| Edge(e.0 + base, e.1 + base))
        .collect();
    edges.extend(&motif_edges);
    let tree_node = rng.random_range(0..base);
    let motif_node = base + *(0..template.nodes).collect::<Vec<_>>().choose(&mut rng).unwrap();
    edges.push(Edge::new(tree_node, motif_node));

    let n = base + template.nodes;
    let mut degree = vec![0.0; n];
    for e in &edges {
        degree[e.0] += 1.0;
        degree[e.1] += 1.0;
    }
    let features = match cfg.node_features {
        NodeFeatures::OnesAndDegree => Array2::from_shape_fn((n, 2), |(i, j)| {
            if j == 0 {
                1.0
            } else {
                degree[i]
            }
        }),
        NodeFeatures::Ones => Array2::ones((n, 1)),
    };
    Graph::new(
        format!("tr3-{index:05}"),
        n,
        edges.iter().map(|e| (e.0, e.1)),
        features,
        motif.label(),
        Some(motif_edges.iter().map(|e| (e.0, e.1)).collect()),
    )
    .expect("generated graphs are valid by construction")
}

pub fn generate_dataset(cfg: &Tr3Config) -> Result<Vec<Graph>> {
    cfg.validate()?;
    Ok((0..cfg.num_graphs)
        .into_par_iter()
        .map(|i| generate_one(cfg, i))
        .collect())
}

pub fn class_counts(graphs: &[Graph], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for g in graphs {
        if g.label() < num_classes {
            counts[g.label()] += 1;
        }
    }
    counts
}

/// JSON manifest written next to a generated dataset.
pub fn manifest(cfg: &Tr3Config, graphs: &[Graph]) -> serde_json::Value {
    let counts = class_counts(graphs, 3);
    let motifs: serde_json::Map<String, serde_json::Value> = Motif::ALL
        .iter()
        .map(|m| {
            let t = motif_template(*m);
            (
                m.name().to_string(),
                serde_json::json!({
                    "label": m.label(),
                    "nodes": t.nodes,
                    "edges": t.edges.iter().map(|e| [e.0, e.1]).collect::<Vec<_>>(),
                }),
            )
        })
        .collect();
    serde_json::json!({
        "dataset": "tr3",
        "config": cfg,
        "feature_dim": cfg.feature_dim(),
        "num_graphs": graphs.len(),
        "class_counts": Motif::ALL.iter().map(|m| (m.name(), counts[m.label()])).collect::<std::collections::BTreeMap<_, _>>(),
        "motifs": motifs,
        "notes": [
            "motif topologies and node features are fixed choices of this toolkit; absolute numbers are comparable in direction only",
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeSet, VecDeque};

    fn connected(n: usize, edges: &[Edge]) -> bool {
        let mut adj = vec![Vec::new(); n];
        for e in edges {
            adj[e.0].push(e.1);
            adj[e.1].push(e.0);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    #[test]
    fn templates() {
        let house = motif_template(Motif::House);
        assert_eq!((house.nodes, house.edges.len()), (5, 6));

        let cycle = motif_template(Motif::Cycle);
        let mut deg = vec![0; cycle.nodes];
        for e in &cycle.edges {
            deg[e.0] += 1;
            deg[e.1] += 1;
        }
        assert!(deg.iter().all(|&d| d == 2));

        let crane = motif_template(Motif::Crane);
        assert_eq!(crane.nodes, 8);
        assert!(connected(crane.nodes, &crane.edges));
        assert!(Motif::parse("star").is_err());
    }

    #[test]
    fn prufer_decodes_known_tree() {
        // Sequence [3, 3, 3] over 5 nodes is the star centred on 3.
        let t = prufer_to_tree(&[3, 3, 3]);
        let set: BTreeSet<Edge> = t.into_iter().collect();
        assert_eq!(set, BTreeSet::from([Edge(0, 3), Edge(1, 3), Edge(2, 3), Edge(3, 4)]));
    }

    #[test]
    fn dataset_properties() {
        let cfg = Tr3Config {
            num_graphs: 300,
            ..Default::default()
        };
        let graphs = generate_dataset(&cfg).unwrap();
        assert_eq!(graphs.len(), 300);
        assert_eq!(class_counts(&graphs, 3), vec![100, 100, 100]);
        for g in &graphs {
            let t = motif_template(Motif::ALL[g.label()]);
            let gt = g.ground_truth().unwrap();
            assert_eq!(gt.len(), t.edges.len());
            assert!(gt.iter().all(|e| g.has_edge(*e)));
            assert!(connected(g.node_count(), g.edges()));
            // tree (n_base - 1) + motif + one attachment edge
            let base = g.node_count() - t.nodes;
            assert!((cfg.base_nodes_min..=cfg.base_nodes_max).contains(&base));
            assert_eq!(g.edge_count(), base - 1 + t.edges.len() + 1);
            assert_eq!(g.features().dim(), (g.node_count(), 1));
            assert!(g.features().iter().all(|&x| x == 1.0));
        }

        let cfg = Tr3Config {
            num_graphs: 30,
            node_features: NodeFeatures::OnesAndDegree,
            ..Default::default()
        };
        for g in &generate_dataset(&cfg).unwrap() {
            assert_eq!(g.features().dim(), (g.node_count(), 2));
            let deg = g.degrees();
            for i in 0..g.node_count() {
                assert_eq!(g.features()[[i, 0]], 1.0);
                assert_eq!(g.features()[[i, 1]], deg[i] as f64);
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = Tr3Config {
            num_graphs: 30,
            ..Default::default()
        };
        assert_eq!(generate_dataset(&cfg).unwrap(), generate_dataset(&cfg).unwrap());
        let other = Tr3Config { seed: 18, ..cfg.clone() };
        assert_ne!(generate_dataset(&cfg).unwrap(), generate_dataset(&other).unwrap());
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate_dataset(&Tr3Config { num_graphs: 10, ..Default::default() }).is_err());
        assert!(generate_dataset(&Tr3Config { base_nodes_min: 2, ..Default::default() }).is_err());
    }
}
