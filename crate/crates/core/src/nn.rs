//! Parameters, optimiser, batching and message-passing layers shared by the
//! predictor, the generator and the critic.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::Rng;
use serde_json::Value;

use crate::autodiff::{Tape, Var};
use crate::error::{DseError, Result};
use crate::graph::{Edge, Graph};

/// Rounds to the nearest `f32`. Parameters live on the `f32` grid so the
/// checkpoint archive stores them without loss.
pub fn to_f32_grid(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut value: Array2<f64>) {
        value.mapv_inplace(to_f32_grid);
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Glorot-uniform weight matrix.
    pub fn init_glorot(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let w = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit));
        self.insert(name, w);
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::zeros((rows, cols)));
    }

    /// Places every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.var(v.clone())))
                .collect(),
        }
    }

    /// Places every parameter on `tape` as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }

    /// Copies every parameter whose name starts with `prefix`.
    pub fn extract(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

/// Parameters bound to one tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    /// Gradients of `loss` for every bound parameter, keyed by name.
    pub fn grads(&self, tape: &'t Tape, loss: Var<'t>) -> BTreeMap<String, Array2<f64>> {
        let names: Vec<&String> = self.vars.keys().collect();
        let vars: Vec<Var<'t>> = self.vars.values().copied().collect();
        let grads = tape.grad(loss, &vars);
        names
            .into_iter()
            .zip(grads)
            .map(|(n, g)| (n.clone(), (*g.value()).clone()))
            .collect()
    }
}

/// Adam with L2 weight decay added to the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Array2<f64>, Array2<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Array2<f64>>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Array2::zeros(p.dim()), Array2::zeros(p.dim())));
            ndarray::Zip::from(&mut *p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = g + self.weight_decay * *p;
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let update = self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                    *p = to_f32_grid(*p - update);
                });
        }
    }
}

/// Message-passing structure for one or more disjoint graphs.
///
/// Every undirected edge `k` produces two directed messages. Edge weights are
/// supplied per undirected edge at forward time.
#[derive(Debug, Clone)]
pub struct Topology {
    pub num_nodes: usize,
    pub num_edges: usize,
    pub num_graphs: usize,
    src: Rc<Vec<usize>>,
    dst: Rc<Vec<usize>>,
    message_edge: Rc<Vec<usize>>,
    graph_of_node: Rc<Vec<usize>>,
    nodes_per_graph: Vec<usize>,
    node_offsets: Vec<usize>,
}

impl Topology {
    /// `graphs[g]` is `(node_count, edges)` in local indices.
    pub fn new<'a>(graphs: impl IntoIterator<Item = (usize, &'a [Edge])>) -> Self {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut message_edge = Vec::new();
        let mut graph_of_node = Vec::new();
        let mut nodes_per_graph = Vec::new();
        let mut node_offsets = Vec::new();
        let mut offset = 0;
        let mut num_edges = 0;
        for (gi, (n, edges)) in graphs.into_iter().enumerate() {
            node_offsets.push(offset);
            for e in edges {
                src.push(offset + e.0);
                dst.push(offset + e.1);
                message_edge.push(num_edges);
                src.push(offset + e.1);
                dst.push(offset + e.0);
                message_edge.push(num_edges);
                num_edges += 1;
            }
            graph_of_node.extend(std::iter::repeat_n(gi, n));
            nodes_per_graph.push(n);
            offset += n;
        }
        Self {
            num_nodes: offset,
            num_edges,
            num_graphs: nodes_per_graph.len(),
            src: Rc::new(src),
            dst: Rc::new(dst),
            message_edge: Rc::new(message_edge),
            graph_of_node: Rc::new(graph_of_node),
            nodes_per_graph,
            node_offsets,
        }
    }

    pub fn of_graph(g: &Graph) -> Self {
        Self::new([(g.node_count(), g.edges())])
    }

    pub fn of_graphs(gs: &[&Graph]) -> Self {
        Self::new(gs.iter().map(|g| (g.node_count(), g.edges())))
    }

    pub fn nodes_per_graph(&self) -> &[usize] {
        &self.nodes_per_graph
    }

    pub fn node_offsets(&self) -> &[usize] {
        &self.node_offsets
    }

    pub fn graph_of_node(&self) -> &[usize] {
        &self.graph_of_node
    }

    /// `sum_j w_ij h_j` for each node `i`.
    pub fn aggregate<'t>(&self, h: Var<'t>, edge_weight: Var<'t>) -> Var<'t> {
        let w = edge_weight.gather_rc(Rc::clone(&self.message_edge));
        h.gather_rc(Rc::clone(&self.src))
            .mul_col(w)
            .scatter_add_rc(Rc::clone(&self.dst), self.num_nodes)
    }

    /// Per-graph mean of node rows.
    pub fn mean_pool<'t>(&self, tape: &'t Tape, h: Var<'t>) -> Var<'t> {
        let summed = h.scatter_add_rc(Rc::clone(&self.graph_of_node), self.num_graphs);
        let inv = Array2::from_shape_fn((self.num_graphs, 1), |(g, _)| {
            1.0 / self.nodes_per_graph[g].max(1) as f64
        });
        summed.mul_col(tape.constant(inv))
    }

    /// Sum of rows per graph.
    pub fn sum_pool<'t>(&self, h: Var<'t>) -> Var<'t> {
        h.scatter_add_rc(Rc::clone(&self.graph_of_node), self.num_graphs)
    }

    pub fn unit_weights<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.constant(Array2::ones((self.num_edges, 1)))
    }
}

/// Dense layer `x W + b`.
pub fn linear<'t>(p: &Bound<'t>, prefix: &str, x: Var<'t>) -> Var<'t> {
    x.matmul(p.get(&format!("{prefix}.w")))
        .add_row(p.get(&format!("{prefix}.b")))
}

pub fn init_linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    store.init_glorot(&format!("{prefix}.w"), fan_in, fan_out, rng);
    store.init_zeros(&format!("{prefix}.b"), 1, fan_out);
}

/// `h_i' = act(h_i W_self + (sum_j w_ij h_j) W_nb + b)`.
pub fn message_passing<'t>(
    p: &Bound<'t>,
    prefix: &str,
    topo: &Topology,
    h: Var<'t>,
    edge_weight: Var<'t>,
    activate: bool,
) -> Var<'t> {
    let agg = topo.aggregate(h, edge_weight);
    let out = h
        .matmul(p.get(&format!("{prefix}.w_self")))
        .add(agg.matmul(p.get(&format!("{prefix}.w_nb"))))
        .add_row(p.get(&format!("{prefix}.b")));
    if activate {
        out.relu()
    } else {
        out
    }
}

pub fn init_message_passing(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) {
    store.init_glorot(&format!("{prefix}.w_self"), fan_in, fan_out, rng);
    store.init_glorot(&format!("{prefix}.w_nb"), fan_in, fan_out, rng);
    store.init_zeros(&format!("{prefix}.b"), 1, fan_out);
}

/// Stacks the node features of several graphs.
pub fn stack_features(gs: &[&Graph]) -> Array2<f64> {
    let views: Vec<_> = gs.iter().map(|g| g.features().view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("feature widths differ")
}

const MAGIC: &[u8; 8] = b"DSECKPT\0";
const FORMAT_VERSION: u32 = 1;

/// Named parameters plus a JSON metadata block.
///
/// Archive layout, all integers little-endian:
///
/// ```text
/// magic "DSECKPT\0" | u32 version | u32 len | metadata JSON
/// u32 count | count × (u32 len | name | u32 rows | u32 cols | rows·cols × f32)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        let meta = serde_json::to_vec(&self.metadata)?;
        w.write_u32::<LittleEndian>(meta.len() as u32)?;
        w.write_all(&meta)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, arr) in self.params.iter() {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(arr.nrows() as u32)?;
            w.write_u32::<LittleEndian>(arr.ncols() as u32)?;
            for &x in arr.iter() {
                w.write_f32::<LittleEndian>(x as f32)?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read(&mut std::io::Cursor::new(bytes))
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| DseError::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(DseError::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.read_u32::<LittleEndian>()? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(|_| bad("truncated metadata"))?;
        let metadata = serde_json::from_slice(&meta)?;
        let count = r.read_u32::<LittleEndian>()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|_| bad("truncated tensor name"))?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not utf-8"))?;
            let rows = r.read_u32::<LittleEndian>()? as usize;
            let cols = r.read_u32::<LittleEndian>()? as usize;
            let mut data = vec![0f32; rows * cols];
            r.read_f32_into::<LittleEndian>(&mut data)
                .map_err(|_| DseError::Checkpoint(format!("truncated tensor `{name}`")))?;
            let arr = Array2::from_shape_vec((rows, cols), data.into_iter().map(f64::from).collect())
                .map_err(|e| DseError::Checkpoint(e.to_string()))?;
            params.insert(name, arr);
        }
        Ok(Self { metadata, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(DseError::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}
