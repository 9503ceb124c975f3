//! Tape recording for reverse-mode differentiation.
//!
//! A [`Graph`] owns every intermediate value. Each recorded node only refers
//! to nodes created before it, so the node vector is already in topological
//! order and `backward` is a single reverse sweep.

use std::collections::HashMap;
use std::sync::Arc;

use super::{mismatch, ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Constant sparse matrix, one list of `(column, value)` pairs per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    pub cols: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    Tanh(Var),
    Sigmoid(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Mul(Var, Var),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    SparseMatMul(Arc<SparseRows>, Var),
    Sum(Var),
    WeightedBce { scores: Var, labels: Vec<f64>, lambda: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Scores are clamped into `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let out = va.add(vb)?;
            Ok(self.push(out, Op::Add(a, b)))
        } else {
            let out = va.add(vb)?;
            Ok(self.push(out, Op::AddRow(a, b)))
        }
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let out = self.value(a).row_softmax();
        self.push(out, Op::Softmax(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).tanh();
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).sigmoid();
        self.push(out, Op::Sigmoid(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&values)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&values)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mean_rows()?;
        Ok(self.push(out, Op::MeanRows(a)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let out = self.value(a).gather_rows(index)?;
        Ok(self.push(out, Op::GatherRows(a, index.to_vec())))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        self.gather_rows(a, &[r])
    }

    /// `x · w` for a constant sparse `x` and a dense (usually parameter) `w`.
    pub fn sparse_matmul(&mut self, x: Arc<SparseRows>, w: Var) -> Result<Var> {
        let wv = self.value(w);
        if x.cols != wv.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "sparse_matmul",
                left: (x.rows.len(), x.cols),
                right: wv.shape(),
            });
        }
        let d = wv.cols();
        let mut out = Tensor::zeros(x.rows.len(), d);
        for (i, row) in x.rows.iter().enumerate() {
            let dst = &mut out.data_mut()[i * d..(i + 1) * d];
            for &(c, v) in row {
                for (o, wj) in dst.iter_mut().zip(wv.row(c)) {
                    *o += v * wj;
                }
            }
        }
        Ok(self.push(out, Op::SparseMatMul(x, w)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// `-Σ (λ·y·ln s + (1-y)·ln(1-s))` over a column or row of scores.
    pub fn weighted_bce(&mut self, scores: Var, labels: &[f64], lambda: f64) -> Result<Var> {
        let s = self.value(scores);
        if s.data().len() != labels.len() || (s.rows() != 1 && s.cols() != 1) {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_bce",
                left: s.shape(),
                right: (labels.len(), 1),
            });
        }
        let loss = weighted_bce_value(s.data(), labels, lambda);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedBce {
                scores,
                labels: labels.to_vec(),
                lambda,
            },
        ))
    }

    /// Accumulates `∂loss/∂θ` into the gradient of every parameter reachable
    /// from `loss`. Grads are added, never overwritten.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut send = |v: Var, t: Tensor| {
                assert!(v.0 < idx, "tape is not topologically ordered");
                accumulate(&mut grads[v.0], t);
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    for (dst, src) in p.grad.data_mut().iter_mut().zip(g.data()) {
                        *dst += src;
                    }
                }
                Op::MatMul(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    send(*a, g.matmul(&vb.transpose())?);
                    send(*b, va.transpose().matmul(&g)?);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::AddRow(a, b) => {
                    let mut col = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (c, v) in g.row(r).iter().enumerate() {
                            col.data_mut()[c] += v;
                        }
                    }
                    send(*a, g);
                    send(*b, col);
                }
                Op::Scale(a, c) => send(*a, g.scale(*c)),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols() {
                            dx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    send(*a, dx);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let dx = zip_with(&g, y, |gv, yv| gv * (1.0 - yv * yv));
                    send(*a, dx);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let dx = zip_with(&g, y, |gv, yv| gv * yv * (1.0 - yv));
                    send(*a, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut piece = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            for c in 0..w {
                                piece.set(r, c, g.get(r, offset + c));
                            }
                        }
                        offset += w;
                        send(p, piece);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.value(p).rows();
                        let index: Vec<usize> = (offset..offset + h).collect();
                        offset += h;
                        send(p, g.gather_rows(&index)?);
                    }
                }
                Op::MeanRows(a) => {
                    let n = self.value(*a).rows();
                    let mut dx = Tensor::zeros(n, g.cols());
                    for r in 0..n {
                        for c in 0..g.cols() {
                            dx.set(r, c, g.get(0, c) / n as f64);
                        }
                    }
                    send(*a, dx);
                }
                Op::Mul(a, b) => {
                    let da = g.mul(self.value(*b))?;
                    let db = g.mul(self.value(*a))?;
                    send(*a, da);
                    send(*b, db);
                }
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::GatherRows(a, index) => {
                    let src = self.value(*a);
                    let mut dx = Tensor::zeros(src.rows(), src.cols());
                    for (i, &r) in index.iter().enumerate() {
                        for c in 0..src.cols() {
                            let v = dx.get(r, c) + g.get(i, c);
                            dx.set(r, c, v);
                        }
                    }
                    send(*a, dx);
                }
                Op::SparseMatMul(x, w) => {
                    let wv = self.value(*w);
                    let d = wv.cols();
                    let mut dw = Tensor::zeros(wv.rows(), d);
                    for (i, row) in x.rows.iter().enumerate() {
                        let gi = g.row(i);
                        for &(c, v) in row {
                            let dst = &mut dw.data_mut()[c * d..(c + 1) * d];
                            for (o, gv) in dst.iter_mut().zip(gi) {
                                *o += v * gv;
                            }
                        }
                    }
                    send(*w, dw);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    send(*a, Tensor::filled(r, c, g.item()));
                }
                Op::WeightedBce { scores, labels, lambda } => {
                    let s = self.value(*scores);
                    let upstream = g.item();
                    let data = s
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&sv, &y)| upstream * weighted_bce_grad(sv, y, *lambda))
                        .collect();
                    send(*scores, Tensor::from_vec(s.rows(), s.cols(), data)?);
                }
            }
        }
        Ok(())
    }
}

pub fn weighted_bce_value(scores: &[f64], labels: &[f64], lambda: f64) -> f64 {
    -scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let s = s.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            lambda * y * s.ln() + (1.0 - y) * (1.0 - s).ln()
        })
        .sum::<f64>()
}

fn weighted_bce_grad(s: f64, y: f64, lambda: f64) -> f64 {
    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&s) {
        return 0.0;
    }
    -lambda * y / s + (1.0 - y) / (1.0 - s)
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
        None => *slot = Some(t),
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape(), "{}", mismatch("zip", a, b));
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0)).unwrap();
        let mut g = Graph::new();
        let xv = g.param(&store, x);
        let y = g.mul(xv, xv).unwrap();
        g.backward(y, &mut store).unwrap();
        assert_eq!(store.get(x).grad.item(), 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(0.0)).unwrap();
        let mut g = Graph::new();
        let xv = g.param(&store, x);
        let y = g.sigmoid(xv);
        g.backward(y, &mut store).unwrap();
        assert_eq!(store.get(x).grad.item(), 0.25);
    }

    #[test]
    fn backward_twice_doubles_exactly() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row_vector(vec![0.3, -1.2, 2.0])).unwrap();
        let mut g = Graph::new();
        let xv = g.param(&store, x);
        let t = g.tanh(xv);
        let sq = g.mul(t, xv).unwrap();
        let loss = g.sum(sq);
        g.backward(loss, &mut store).unwrap();
        let once = store.get(x).grad.clone();
        g.backward(loss, &mut store).unwrap();
        for (a, b) in store.get(x).grad.data().iter().zip(once.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let v = g.constant(Tensor::zeros(2, 2));
        assert_eq!(g.backward(v, &mut store), Err(TensorError::NonScalarLoss((2, 2))));
    }

    #[test]
    fn weighted_bce_known_values() {
        assert!((weighted_bce_value(&[0.5], &[1.0], 5.0) - 5.0 * 2f64.ln()).abs() < 1e-12);
        assert!((weighted_bce_value(&[0.5], &[0.0], 5.0) - 2f64.ln()).abs() < 1e-12);
        assert!(weighted_bce_value(&[0.0], &[1.0], 1.0).is_finite());
    }
}
