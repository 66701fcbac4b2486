//! Undirected attributed graphs, edge masks over them, and the line-oriented
//! text format used for datasets.
//!
//! ```text
//! graph <id> <node_count> <label>
//! feat <i> v1 v2 ...
//! edge <u> <v>
//! gt <u> <v>
//! ```
//!
//! A dataset file is a concatenation of such blocks separated by blank lines.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DseError, Result};

/// Unordered node pair stored as `(min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge(pub usize, pub usize);

impl Edge {
    pub fn new(u: usize, v: usize) -> Self {
        if u <= v {
            Edge(u, v)
        } else {
            Edge(v, u)
        }
    }

    pub fn contains(&self, node: usize) -> bool {
        self.0 == node || self.1 == node
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    id: String,
    node_count: usize,
    edges: Vec<Edge>,
    features: Array2<f64>,
    label: usize,
    ground_truth: Option<BTreeSet<Edge>>,
}

impl Graph {
    /// Builds a graph, canonicalising and sorting the edge list.
    pub fn new(
        id: impl Into<String>,
        node_count: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: Array2<f64>,
        label: usize,
        ground_truth: Option<Vec<(usize, usize)>>,
    ) -> Result<Self> {
        let id = id.into();
        let invalid = |reason: String| DseError::InvalidGraph {
            id: id.clone(),
            reason,
        };
        if node_count == 0 {
            return Err(invalid("node_count must be positive".into()));
        }
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(invalid("graph id must be non-empty without whitespace".into()));
        }
        if features.nrows() != node_count {
            return Err(invalid(format!(
                "{} feature rows for {} nodes",
                features.nrows(),
                node_count
            )));
        }
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u == v {
                return Err(invalid(format!("self-loop on node {u}")));
            }
            if u >= node_count || v >= node_count {
                return Err(invalid(format!("edge ({u},{v}) out of range")));
            }
            if !set.insert(Edge::new(u, v)) {
                return Err(invalid(format!("duplicate edge ({u},{v})")));
            }
        }
        let ground_truth = match ground_truth {
            None => None,
            Some(gt) => {
                let mut out = BTreeSet::new();
                for (u, v) in gt {
                    let e = Edge::new(u, v);
                    if !set.contains(&e) {
                        return Err(invalid(format!("ground-truth edge ({u},{v}) not in graph")));
                    }
                    out.insert(e);
                }
                // The text format cannot tell an empty set from no ground truth.
                (!out.is_empty()).then_some(out)
            }
        };
        Ok(Self {
            id,
            node_count,
            edges: set.into_iter().collect(),
            features,
            label,
            ground_truth,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Edges in lexicographic order.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn ground_truth(&self) -> Option<&BTreeSet<Edge>> {
        self.ground_truth.as_ref()
    }

    pub fn has_edge(&self, e: Edge) -> bool {
        self.edges.binary_search(&e).is_ok()
    }

    /// Position of `e` in [`Graph::edges`].
    pub fn edge_index(&self, e: Edge) -> Option<usize> {
        self.edges.binary_search(&e).ok()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count];
        for e in &self.edges {
            deg[e.0] += 1;
            deg[e.1] += 1;
        }
        deg
    }

    /// Same nodes, features and label with a different edge set. The ground
    /// truth is restricted to the surviving edges.
    pub fn with_edges(&self, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let edges: BTreeSet<Edge> = edges.into_iter().collect();
        let gt = self
            .ground_truth
            .as_ref()
            .map(|gt| gt.intersection(&edges).map(|e| (e.0, e.1)).collect());
        Graph::new(
            self.id.clone(),
            self.node_count,
            edges.iter().map(|e| (e.0, e.1)),
            self.features.clone(),
            self.label,
            gt,
        )
    }

    /// All unordered node pairs `(i, j)` with `i < j`, lexicographic.
    pub fn all_pairs(&self) -> Vec<Edge> {
        all_pairs(self.node_count)
    }
}

pub fn all_pairs(n: usize) -> Vec<Edge> {
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(Edge(i, j));
        }
    }
    out
}

/// Per-edge scores over a parent graph plus the selected subgraph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeMask {
    pub parent_id: String,
    pub scores: BTreeMap<Edge, f64>,
    pub selected: BTreeSet<Edge>,
}

impl EdgeMask {
    /// Mask with score 1 on `selected` and 0 elsewhere.
    pub fn from_selection(g: &Graph, selected: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let selected: BTreeSet<Edge> = selected.into_iter().collect();
        if let Some(e) = selected.iter().find(|e| !g.has_edge(**e)) {
            return Err(DseError::InvalidGraph {
                id: g.id().to_string(),
                reason: format!("selected edge ({},{}) not in graph", e.0, e.1),
            });
        }
        let scores = g
            .edges()
            .iter()
            .map(|e| (*e, if selected.contains(e) { 1.0 } else { 0.0 }))
            .collect();
        Ok(Self {
            parent_id: g.id().to_string(),
            scores,
            selected,
        })
    }

    pub fn all(g: &Graph) -> Self {
        Self::from_selection(g, g.edges().iter().copied()).expect("own edges")
    }

    pub fn none(g: &Graph) -> Self {
        Self::from_selection(g, std::iter::empty()).expect("empty selection")
    }

    /// Ground-truth explanation of `g` as a mask, if it has one.
    pub fn ground_truth(g: &Graph) -> Option<Self> {
        g.ground_truth()
            .map(|gt| Self::from_selection(g, gt.iter().copied()).expect("gt ⊆ edges"))
    }

    /// Mask selecting every parent edge not selected here.
    pub fn complement(&self) -> Self {
        let selected = self
            .scores
            .keys()
            .filter(|e| !self.selected.contains(e))
            .copied()
            .collect::<BTreeSet<_>>();
        let scores = self
            .scores
            .keys()
            .map(|e| (*e, if selected.contains(e) { 1.0 } else { 0.0 }))
            .collect();
        Self {
            parent_id: self.parent_id.clone(),
            scores,
            selected,
        }
    }

    /// Checks that the score keys are exactly the edges of `g`.
    pub fn check_complete(&self, g: &Graph) -> Result<()> {
        if self.parent_id != g.id() {
            return Err(DseError::Identity {
                mask: self.parent_id.clone(),
                graph: g.id().to_string(),
            });
        }
        if self.scores.len() != g.edge_count() || !g.edges().iter().all(|e| self.scores.contains_key(e)) {
            return Err(DseError::Shape(format!(
                "mask over `{}` does not score every edge exactly once",
                g.id()
            )));
        }
        Ok(())
    }
}

/// Selects the `ceil(ratio * |edges|)` highest-scoring edges. Ties go to the
/// lexicographically smaller edge.
pub fn top_fraction_mask(
    parent_id: &str,
    scores: BTreeMap<Edge, f64>,
    ratio: f64,
) -> Result<EdgeMask> {
    if scores.is_empty() {
        return Err(DseError::EmptyInput("edge scores"));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(DseError::Config(format!("mask ratio {ratio} outside (0, 1]")));
    }
    let k = selection_size(scores.len(), ratio);
    let mut ranked: Vec<(Edge, f64)> = scores.iter().map(|(e, s)| (*e, *s)).collect();
    // BTreeMap iteration is already lexicographic; a stable sort keeps it for ties.
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    let selected = ranked.iter().take(k).map(|(e, _)| *e).collect();
    Ok(EdgeMask {
        parent_id: parent_id.to_string(),
        scores,
        selected,
    })
}

/// `ceil(ratio * n)`, clamped to `n`.
pub fn selection_size(n: usize, ratio: f64) -> usize {
    // Guard against 0.15 * 20 = 3.0000000000000004 rounding up to 4.
    let raw = ratio * n as f64;
    let k = (raw - 1e-9).ceil().max(0.0) as usize;
    k.min(n)
}

/// Keeps every node and feature of `g` but only the selected edges.
pub fn induce_subgraph(g: &Graph, mask: &EdgeMask) -> Result<Graph> {
    if mask.parent_id != g.id() {
        return Err(DseError::Identity {
            mask: mask.parent_id.clone(),
            graph: g.id().to_string(),
        });
    }
    g.with_edges(mask.selected.iter().copied())
}

pub fn serialize_graph(g: &Graph) -> Vec<u8> {
    let mut s = String::new();
    write_graph(&mut s, g);
    s.into_bytes()
}

fn write_graph(s: &mut String, g: &Graph) {
    let _ = writeln!(s, "graph {} {} {}", g.id, g.node_count, g.label);
    for (i, row) in g.features.rows().into_iter().enumerate() {
        let _ = write!(s, "feat {i}");
        for v in row {
            let _ = write!(s, " {v:?}");
        }
        s.push('\n');
    }
    for e in &g.edges {
        let _ = writeln!(s, "edge {} {}", e.0, e.1);
    }
    if let Some(gt) = &g.ground_truth {
        for e in gt {
            let _ = writeln!(s, "gt {} {}", e.0, e.1);
        }
    }
}

pub fn serialize_dataset(graphs: &[Graph]) -> Vec<u8> {
    let mut s = String::new();
    for (i, g) in graphs.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        write_graph(&mut s, g);
    }
    s.into_bytes()
}

/// Parses exactly one graph block.
pub fn parse_graph(bytes: &[u8]) -> Result<Graph> {
    let mut graphs = parse_dataset(bytes)?;
    match graphs.len() {
        1 => Ok(graphs.pop().unwrap()),
        0 => Err(DseError::Parse {
            offset: 0,
            message: "no graph header".into(),
        }),
        n => Err(DseError::Parse {
            offset: 0,
            message: format!("expected one graph, found {n}"),
        }),
    }
}

pub fn parse_dataset(bytes: &[u8]) -> Result<Vec<Graph>> {
    let text = std::str::from_utf8(bytes).map_err(|e| DseError::Parse {
        offset: e.valid_up_to(),
        message: "invalid utf-8".into(),
    })?;
    let mut graphs = Vec::new();
    let mut current: Option<Block> = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let line_offset = offset;
        offset += line.len();
        let trimmed = line.trim();
        if trimmed.is_empty() {
            if let Some(b) = current.take() {
                graphs.push(b.finish()?);
            }
            continue;
        }
        let err = |message: String| DseError::Parse {
            offset: line_offset,
            message,
        };
        let mut tokens = trimmed.split_ascii_whitespace();
        let keyword = tokens.next().unwrap();
        let rest: Vec<&str> = tokens.collect();
        match keyword {
            "graph" => {
                if let Some(b) = current.take() {
                    graphs.push(b.finish()?);
                }
                let [id, n, label] = rest[..] else {
                    return Err(err("header needs `graph <id> <node_count> <label>`".into()));
                };
                current = Some(Block {
                    offset: line_offset,
                    id: id.to_string(),
                    node_count: parse_num(n, line_offset)?,
                    label: parse_num(label, line_offset)?,
                    feats: Vec::new(),
                    edges: Vec::new(),
                    gt: Vec::new(),
                });
            }
            "feat" | "edge" | "gt" => {
                let Some(b) = current.as_mut() else {
                    return Err(err(format!("`{keyword}` line before any graph header")));
                };
                if keyword == "feat" {
                    let Some((idx, vals)) = rest.split_first() else {
                        return Err(err("feat line needs a node index".into()));
                    };
                    let idx: usize = parse_num(idx, line_offset)?;
                    if idx != b.feats.len() {
                        return Err(err(format!("feat for node {idx}, expected node {}", b.feats.len())));
                    }
                    let row = vals
                        .iter()
                        .map(|v| {
                            v.parse::<f64>()
                                .map_err(|_| err(format!("bad feature value `{v}`")))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    b.feats.push(row);
                } else {
                    let [u, v] = rest[..] else {
                        return Err(err(format!("`{keyword}` line needs two node indices")));
                    };
                    let pair = (parse_num(u, line_offset)?, parse_num(v, line_offset)?);
                    if keyword == "edge" {
                        b.edges.push(pair);
                    } else {
                        b.gt.push(pair);
                    }
                }
            }
            other => return Err(err(format!("unknown keyword `{other}`"))),
        }
    }
    if let Some(b) = current.take() {
        graphs.push(b.finish()?);
    }
    Ok(graphs)
}

fn parse_num<T: std::str::FromStr>(tok: &str, offset: usize) -> Result<T> {
    tok.parse().map_err(|_| DseError::Parse {
        offset,
        message: format!("expected a non-negative integer, got `{tok}`"),
    })
}

struct Block {
    offset: usize,
    id: String,
    node_count: usize,
    label: usize,
    feats: Vec<Vec<f64>>,
    edges: Vec<(usize, usize)>,
    gt: Vec<(usize, usize)>,
}

impl Block {
    fn finish(self) -> Result<Graph> {
        let err = |message: String| DseError::Parse {
            offset: self.offset,
            message,
        };
        if self.feats.len() != self.node_count {
            return Err(err(format!(
                "graph `{}` declares {} nodes but has {} feat lines",
                self.id,
                self.node_count,
                self.feats.len()
            )));
        }
        let dim = self.feats.first().map_or(0, Vec::len);
        if self.feats.iter().any(|r| r.len() != dim) {
            return Err(err(format!("graph `{}` has ragged feature rows", self.id)));
        }
        let flat: Vec<f64> = self.feats.into_iter().flatten().collect();
        let features = Array2::from_shape_vec((self.node_count, dim), flat)
            .map_err(|e| err(e.to_string()))?;
        let gt = (!self.gt.is_empty()).then_some(self.gt);
        Graph::new(self.id, self.node_count, self.edges, features, self.label, gt).map_err(|e| {
            DseError::Parse {
                offset: self.offset,
                message: e.to_string(),
            }
        })
    }
}
