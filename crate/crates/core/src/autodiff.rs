//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every backward rule is expressed with the same recorded operations as the
//! forward pass, so a gradient returned by [`Tape::grad`] is itself a [`Var`]
//! on the tape and can be differentiated again. The critic's gradient penalty
//! depends on this.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array2, Axis, Zip};

type Mat = Array2<f64>;

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    /// `a (n×m) + b (1×m)` broadcast over rows.
    AddRow(usize, usize),
    /// `a (n×m) * b (n×1)` broadcast over columns.
    MulCol(usize, usize),
    /// `scale * a + shift`.
    Affine(usize, f64),
    /// Elementwise multiply by a constant matrix.
    MulConst(usize, Rc<Mat>),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Recip(usize),
    Sqrt(usize),
    Softplus(usize),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    Expand(usize),
    ExpandRows(usize),
    ExpandCols(usize),
    Gather(usize, Rc<Vec<usize>>),
    ScatterAdd(usize, Rc<Vec<usize>>),
    ConcatCols(usize, usize),
    SliceCols(usize, usize),
    PadCols(usize, usize),
}

struct Node {
    value: Rc<Mat>,
    op: Op,
    tracked: bool,
}

/// Records operations for later differentiation. Not thread-safe; build one
/// per worker.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable leaf.
    pub fn var(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; gradients never flow into it.
    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Array2::from_elem((1, 1), v))
    }

    fn value(&self, id: usize) -> Rc<Mat> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// Leaves that `output` does not depend on get a zero gradient.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Vec<Var<'t>> {
        assert_eq!(output.shape(), (1, 1), "grad needs a scalar output");
        let end = output.id + 1;
        let mut grads: Vec<Option<Var<'t>>> = vec![None; end];
        grads[output.id] = Some(self.scalar(1.0));
        // Nodes an output can reach are exactly those with smaller ids.
        let mut needed = vec![false; end];
        for w in wrt {
            if w.id < end {
                needed[w.id] = true;
            }
        }
        let ops: Vec<(Op, bool)> = {
            let nodes = self.nodes.borrow();
            nodes[..end].iter().map(|n| (n.op.clone(), n.tracked)).collect()
        };
        // Forward sweep: mark nodes that depend on any requested leaf.
        for id in 0..end {
            if needed[id] {
                continue;
            }
            needed[id] = inputs(&ops[id].0).iter().any(|&i| needed[i]);
        }
        for id in (0..end).rev() {
            let Some(g) = grads[id] else { continue };
            if !needed[id] || !ops[id].1 {
                continue;
            }
            let me = Var { tape: self, id };
            let mut send = |target: usize, contrib: &dyn Fn() -> Var<'t>| {
                if !needed[target] || !ops[target].1 {
                    return;
                }
                let contrib = contrib();
                grads[target] = Some(match grads[target] {
                    Some(prev) => prev.add(contrib),
                    None => contrib,
                });
            };
            let v = |i: usize| Var { tape: self, id: i };
            match &ops[id].0 {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    send(*a, &|| g);
                    send(*b, &|| g);
                }
                Op::Sub(a, b) => {
                    send(*a, &|| g);
                    send(*b, &|| g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    send(*a, &|| g.mul(v(*b)));
                    send(*b, &|| g.mul(v(*a)));
                }
                Op::MatMul(a, b) => {
                    send(*a, &|| g.matmul(v(*b).t()));
                    send(*b, &|| v(*a).t().matmul(g));
                }
                Op::Transpose(a) => send(*a, &|| g.t()),
                Op::AddRow(a, b) => {
                    send(*a, &|| g);
                    send(*b, &|| g.sum_rows());
                }
                Op::MulCol(a, b) => {
                    send(*a, &|| g.mul_col(v(*b)));
                    send(*b, &|| g.mul(v(*a)).sum_cols());
                }
                Op::Affine(a, scale) => send(*a, &|| g.scale(*scale)),
                Op::MulConst(a, c) => send(*a, &|| g.mul_const(Rc::clone(c))),
                Op::Sigmoid(a) => {
                    let one_minus = me.affine(-1.0, 1.0);
                    send(*a, &|| g.mul(me).mul(one_minus));
                }
                Op::Exp(a) => send(*a, &|| g.mul(me)),
                Op::Ln(a) => send(*a, &|| g.mul(v(*a).recip())),
                Op::Recip(a) => send(*a, &|| g.mul(me).mul(me).scale(-1.0)),
                Op::Sqrt(a) => send(*a, &|| g.mul(me.recip()).scale(0.5)),
                Op::Softplus(a) => send(*a, &|| g.mul(v(*a).sigmoid())),
                Op::SumAll(a) => {
                    let (r, c) = v(*a).shape();
                    send(*a, &|| g.expand(r, c));
                }
                Op::SumRows(a) => {
                    let (r, _) = v(*a).shape();
                    send(*a, &|| g.expand_rows(r));
                }
                Op::SumCols(a) => {
                    let (_, c) = v(*a).shape();
                    send(*a, &|| g.expand_cols(c));
                }
                Op::Expand(a) => send(*a, &|| g.sum()),
                Op::ExpandRows(a) => send(*a, &|| g.sum_rows()),
                Op::ExpandCols(a) => send(*a, &|| g.sum_cols()),
                Op::Gather(a, idx) => {
                    let (r, _) = v(*a).shape();
                    send(*a, &|| g.scatter_add_rc(Rc::clone(idx), r));
                }
                Op::ScatterAdd(a, idx) => send(*a, &|| g.gather_rc(Rc::clone(idx))),
                Op::ConcatCols(a, b) => {
                    let (_, ca) = v(*a).shape();
                    let (_, cb) = v(*b).shape();
                    send(*a, &|| g.slice_cols(0, ca));
                    send(*b, &|| g.slice_cols(ca, cb));
                }
                Op::SliceCols(a, start) => {
                    let (_, total) = v(*a).shape();
                    send(*a, &|| g.pad_cols(*start, total));
                }
                Op::PadCols(a, start) => {
                    let (_, c) = v(*a).shape();
                    send(*a, &|| g.slice_cols(*start, c));
                }
            }
        }
        wrt.iter()
            .map(|w| {
                grads
                    .get(w.id)
                    .copied()
                    .flatten()
                    .unwrap_or_else(|| {
                        let (r, c) = w.shape();
                        self.constant(Array2::zeros((r, c)))
                    })
            })
            .collect()
    }
}

fn inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::MatMul(a, b)
        | Op::AddRow(a, b)
        | Op::MulCol(a, b)
        | Op::ConcatCols(a, b) => vec![*a, *b],
        Op::Transpose(a)
        | Op::Affine(a, _)
        | Op::MulConst(a, _)
        | Op::Sigmoid(a)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::Recip(a)
        | Op::Sqrt(a)
        | Op::Softplus(a)
        | Op::SumAll(a)
        | Op::SumRows(a)
        | Op::SumCols(a)
        | Op::Expand(a)
        | Op::ExpandRows(a)
        | Op::ExpandCols(a)
        | Op::Gather(a, _)
        | Op::ScatterAdd(a, _)
        | Op::SliceCols(a, _)
        | Op::PadCols(a, _) => vec![*a],
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Mat> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dim()
    }

    /// The single entry of a 1×1 variable.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1), "item() on a non-scalar");
        v[[0, 0]]
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn unary(&self, value: Mat, op: Op) -> Var<'t> {
        let tracked = self.tape.tracked(self.id);
        self.tape.push(value, op, tracked)
    }

    fn binary(&self, other: Var<'t>, value: Mat, op: Op) -> Var<'t> {
        let tracked = self.tape.tracked(self.id) || self.tape.tracked(other.id);
        self.tape.push(value, op, tracked)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() + &*other.value();
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() - &*other.value();
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.dim(), b.dim(), "mul shape mismatch");
        let v = &*a * &*b;
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().dot(&*other.value());
        self.binary(other, v, Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Var<'t> {
        let v = self.value().t().to_owned();
        self.unary(v, Op::Transpose(self.id))
    }

    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), row.value());
        assert_eq!(b.nrows(), 1, "add_row expects a 1×m row");
        let v = &*a + &*b;
        self.binary(row, v, Op::AddRow(self.id, row.id))
    }

    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), col.value());
        assert_eq!((b.nrows(), b.ncols()), (a.nrows(), 1), "mul_col expects an n×1 column");
        let mut v = a.as_standard_layout().into_owned();
        for (mut row, &w) in v.rows_mut().into_iter().zip(b.iter()) {
            row.iter_mut().for_each(|x| *x *= w);
        }
        drop(a);
        self.binary(col, v, Op::MulCol(self.id, col.id))
    }

    /// `scale * self + shift`.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        let v = self.value().mapv(|x| scale * x + shift);
        self.unary(v, Op::Affine(self.id, scale))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.affine(s, 0.0)
    }

    pub fn mul_const(self, c: Rc<Mat>) -> Var<'t> {
        let v = &*self.value() * &*c;
        self.unary(v, Op::MulConst(self.id, c))
    }

    pub fn relu(self) -> Var<'t> {
        let mask = self.value().mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.mul_const(Rc::new(mask))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().mapv(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().mapv(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().mapv(f64::ln);
        self.unary(v, Op::Ln(self.id))
    }

    pub fn recip(self) -> Var<'t> {
        let v = self.value().mapv(f64::recip);
        self.unary(v, Op::Recip(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.value().mapv(f64::sqrt);
        self.unary(v, Op::Sqrt(self.id))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(self) -> Var<'t> {
        let v = self.value().mapv(softplus);
        self.unary(v, Op::Softplus(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self)
    }

    pub fn sum(self) -> Var<'t> {
        let v = Array2::from_elem((1, 1), self.value().sum());
        self.unary(v, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let (r, c) = self.shape();
        self.sum().scale(1.0 / (r * c) as f64)
    }

    /// Column sums as a 1×m row.
    pub fn sum_rows(self) -> Var<'t> {
        let v = self.value().sum_axis(Axis(0)).insert_axis(Axis(0));
        self.unary(v, Op::SumRows(self.id))
    }

    /// Row sums as an n×1 column.
    pub fn sum_cols(self) -> Var<'t> {
        let v = self.value().map_axis(Axis(1), |row| row.iter().sum::<f64>()).insert_axis(Axis(1));
        self.unary(v, Op::SumCols(self.id))
    }

    /// Broadcast a 1×1 to r×c.
    pub fn expand(self, r: usize, c: usize) -> Var<'t> {
        let x = self.item();
        self.unary(Array2::from_elem((r, c), x), Op::Expand(self.id))
    }

    /// Broadcast a 1×m row to r×m.
    pub fn expand_rows(self, r: usize) -> Var<'t> {
        let row = self.value();
        assert_eq!(row.nrows(), 1);
        let v = row.broadcast((r, row.ncols())).unwrap().to_owned();
        self.unary(v, Op::ExpandRows(self.id))
    }

    /// Broadcast an n×1 column to n×c.
    pub fn expand_cols(self, c: usize) -> Var<'t> {
        let col = self.value();
        assert_eq!(col.ncols(), 1);
        let v = col.broadcast((col.nrows(), c)).unwrap().to_owned();
        self.unary(v, Op::ExpandCols(self.id))
    }

    /// Rows `idx[k]` of `self`, in order.
    pub fn gather(self, idx: &[usize]) -> Var<'t> {
        self.gather_rc(Rc::new(idx.to_vec()))
    }

    pub fn gather_rc(self, idx: Rc<Vec<usize>>) -> Var<'t> {
        let src = self.value();
        let c = src.ncols();
        let flat = src.as_standard_layout();
        let flat = flat.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(&flat[i * c..(i + 1) * c]);
        }
        let out = Array2::from_shape_vec((idx.len(), c), out).unwrap();
        self.unary(out, Op::Gather(self.id, idx))
    }

    /// `out[idx[k]] += self[k]` into an `rows`-row result.
    pub fn scatter_add(self, idx: &[usize], rows: usize) -> Var<'t> {
        self.scatter_add_rc(Rc::new(idx.to_vec()), rows)
    }

    pub fn scatter_add_rc(self, idx: Rc<Vec<usize>>, rows: usize) -> Var<'t> {
        let src = self.value();
        assert_eq!(src.nrows(), idx.len(), "scatter index length");
        let c = src.ncols();
        let flat = src.as_standard_layout();
        let flat = flat.as_slice().expect("standard layout");
        let mut out = vec![0.0; rows * c];
        for (k, &i) in idx.iter().enumerate() {
            for (d, s) in out[i * c..(i + 1) * c].iter_mut().zip(&flat[k * c..(k + 1) * c]) {
                *d += s;
            }
        }
        let out = Array2::from_shape_vec((rows, c), out).unwrap();
        self.unary(out, Op::ScatterAdd(self.id, idx))
    }

    pub fn concat_cols(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let v = ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("row counts differ");
        self.binary(other, v, Op::ConcatCols(self.id, other.id))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        let v = self
            .value()
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.unary(v, Op::SliceCols(self.id, start))
    }

    fn pad_cols(self, start: usize, total: usize) -> Var<'t> {
        let src = self.value();
        let mut out = Array2::zeros((src.nrows(), total));
        out.slice_mut(ndarray::s![.., start..start + src.ncols()])
            .assign(&*src);
        self.unary(out, Op::PadCols(self.id, start))
    }

    /// Row-wise `log(sum(exp(x)))` as an n×1 column.
    pub fn logsumexp_rows(self) -> Var<'t> {
        let x = self.value();
        let mut maxes = Array2::zeros((x.nrows(), 1));
        Zip::from(maxes.rows_mut())
            .and(x.rows())
            .for_each(|mut m, row| {
                let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                m[0] = if mx.is_finite() { mx } else { 0.0 };
            });
        let c = x.ncols();
        let shift = self.tape.constant(maxes);
        let shifted = self.sub(shift.expand_cols(c));
        shifted.exp().sum_cols().ln().add(shift)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(self) -> Var<'t> {
        let c = self.shape().1;
        let lse = self.logsumexp_rows();
        self.sub(lse.expand_cols(c))
    }
}
