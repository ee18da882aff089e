//! Reverse-mode differentiation over matrix expressions.
//!
//! Values are computed eagerly as nodes are pushed; `backward` walks the
//! node list in reverse, so the gradient of every reachable leaf comes out
//! of one pass. Leaves created through [`Tape::param`] remember the store
//! name they were lifted from, which is how gradients find their way back
//! into a [`ParamStore`](crate::numerics::ParamStore).

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// (d x l) plus a (d x 1) column vector broadcast over the l columns.
    AddColVec(Var, Var),
    Silu(Var),
    Scale(Var, f64),
    /// Matrix scaled by a 1x1 variable.
    ScaleByScalar(Var, Var),
    /// (k x l) -> (k x 1) mean over columns.
    MeanCols(Var),
    /// Row `r` of a (n x w) matrix, transposed to (w x 1).
    RowAsCol(Var, usize),
    /// Single element as a 1x1 matrix.
    Entry(Var, usize, usize),
    /// Sum of squared entries as a 1x1 matrix.
    SumSq(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    param: Option<String>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op, param: Option<String>) -> Var {
        self.nodes.push(Node { value, op, param });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar payload of a 1x1 variable.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.value(v).len(), 1);
        self.value(v).data()[0]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, None)
    }

    /// Lift a store tensor onto the tape as a named leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        Ok(self.push(value, Op::Leaf, Some(name.to_string())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), None))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b), None))
    }

    pub fn add_col_vec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (mm, vv) = (self.value(m), self.value(v));
        if vv.cols() != 1 || vv.rows() != mm.rows() {
            return Err(Error::ShapeMismatch {
                op: "add_col_vec",
                lhs_rows: mm.rows(),
                lhs_cols: mm.cols(),
                rhs_rows: vv.rows(),
                rhs_cols: vv.cols(),
            });
        }
        let mut out = mm.clone();
        for i in 0..out.rows() {
            let b = vv.get(i, 0);
            for j in 0..out.cols() {
                out.set(i, j, out.get(i, j) + b);
            }
        }
        Ok(self.push(out, Op::AddColVec(m, v), None))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v *= sigmoid(*v);
        }
        self.push(out, Op::Silu(a), None)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c), None)
    }

    pub fn scale_by_scalar(&mut self, m: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::InvalidArg(
                "scale_by_scalar expects a 1x1 scalar variable".into(),
            ));
        }
        let c = self.scalar(s);
        let value = self.value(m).scale(c);
        Ok(self.push(value, Op::ScaleByScalar(m, s), None))
    }

    pub fn mean_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let l = m.cols().max(1) as f64;
        let mut out = Matrix::zeros(m.rows(), 1);
        for i in 0..m.rows() {
            let mut acc = 0.0;
            for j in 0..m.cols() {
                acc += m.get(i, j);
            }
            out.set(i, 0, acc / l);
        }
        self.push(out, Op::MeanCols(a), None)
    }

    pub fn row_as_col(&mut self, table: Var, row: usize) -> Result<Var> {
        let t = self.value(table);
        if row >= t.rows() {
            return Err(Error::OutOfRange {
                what: "row",
                value: row as i64,
                lo: 0,
                hi: t.rows() as i64 - 1,
            });
        }
        let mut out = Matrix::zeros(t.cols(), 1);
        for j in 0..t.cols() {
            out.set(j, 0, t.get(row, j));
        }
        Ok(self.push(out, Op::RowAsCol(table, row), None))
    }

    pub fn entry(&mut self, m: Var, i: usize, j: usize) -> Result<Var> {
        let mm = self.value(m);
        if i >= mm.rows() || j >= mm.cols() {
            return Err(Error::InvalidArg(format!(
                "entry ({i},{j}) out of bounds for {}x{}",
                mm.rows(),
                mm.cols()
            )));
        }
        let out = Matrix::from_vec(1, 1, vec![mm.get(i, j)])?;
        Ok(self.push(out, Op::Entry(m, i, j), None))
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_sq();
        let out = Matrix::from_vec(1, 1, vec![s]).unwrap();
        self.push(out, Op::SumSq(a), None)
    }

    /// Reverse pass from a 1x1 loss variable.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArg("backward target must be 1x1".into()));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0])?);

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.nodes[b.0].value.transpose())?;
                    let db = self.nodes[a.0].value.transpose().matmul(&g)?;
                    Self::accumulate(&mut grads, a.0, da)?;
                    Self::accumulate(&mut grads, b.0, db)?;
                }
                Op::Add(a, b) => {
                    Self::accumulate(&mut grads, a.0, g.clone())?;
                    Self::accumulate(&mut grads, b.0, g)?;
                }
                Op::Sub(a, b) => {
                    Self::accumulate(&mut grads, a.0, g.clone())?;
                    Self::accumulate(&mut grads, b.0, g.scale(-1.0))?;
                }
                Op::AddColVec(m, v) => {
                    let mut dv = Matrix::zeros(g.rows(), 1);
                    for i in 0..g.rows() {
                        let mut acc = 0.0;
                        for j in 0..g.cols() {
                            acc += g.get(i, j);
                        }
                        dv.set(i, 0, acc);
                    }
                    Self::accumulate(&mut grads, m.0, g)?;
                    Self::accumulate(&mut grads, v.0, dv)?;
                }
                Op::Silu(a) => {
                    let x = &self.nodes[a.0].value;
                    let mut da = g;
                    for (dv, &xv) in da.data_mut().iter_mut().zip(x.data()) {
                        let s = sigmoid(xv);
                        *dv *= s * (1.0 + xv * (1.0 - s));
                    }
                    Self::accumulate(&mut grads, a.0, da)?;
                }
                Op::Scale(a, c) => {
                    Self::accumulate(&mut grads, a.0, g.scale(c))?;
                }
                Op::ScaleByScalar(m, s) => {
                    let c = self.nodes[s.0].value.data()[0];
                    let mv = &self.nodes[m.0].value;
                    let mut ds = 0.0;
                    for (gv, xv) in g.data().iter().zip(mv.data()) {
                        ds += gv * xv;
                    }
                    Self::accumulate(&mut grads, m.0, g.scale(c))?;
                    Self::accumulate(&mut grads, s.0, Matrix::from_vec(1, 1, vec![ds])?)?;
                }
                Op::MeanCols(a) => {
                    let src = &self.nodes[a.0].value;
                    let l = src.cols().max(1) as f64;
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..src.rows() {
                        let gi = g.get(i, 0) / l;
                        for j in 0..src.cols() {
                            da.set(i, j, gi);
                        }
                    }
                    Self::accumulate(&mut grads, a.0, da)?;
                }
                Op::RowAsCol(table, row) => {
                    let t = &self.nodes[table.0].value;
                    let mut dt = Matrix::zeros(t.rows(), t.cols());
                    for j in 0..t.cols() {
                        dt.set(row, j, g.get(j, 0));
                    }
                    Self::accumulate(&mut grads, table.0, dt)?;
                }
                Op::Entry(m, i, j) => {
                    let src = &self.nodes[m.0].value;
                    let mut dm = Matrix::zeros(src.rows(), src.cols());
                    dm.set(i, j, g.data()[0]);
                    Self::accumulate(&mut grads, m.0, dm)?;
                }
                Op::SumSq(a) => {
                    let gs = g.data()[0];
                    let da = self.nodes[a.0].value.scale(2.0 * gs);
                    Self::accumulate(&mut grads, a.0, da)?;
                }
            }
        }
        Ok(Grads { grads })
    }

    fn accumulate(grads: &mut [Option<Matrix>], idx: usize, delta: Matrix) -> Result<()> {
        match &mut grads[idx] {
            Some(g) => g.add_assign(&delta)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    /// Push the gradient of every named leaf into the store. Frozen tensors
    /// are skipped by the store itself.
    pub fn accumulate_into_store(&self, grads: &Grads, store: &mut ParamStore) -> Result<()> {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                if let Some(g) = &grads.grads[idx] {
                    store.accumulate_grad(name, g)?;
                }
            }
        }
        Ok(())
    }
}

pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}
