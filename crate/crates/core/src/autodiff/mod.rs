//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation during the forward pass; nodes are
//! created in topological order, so replaying them in reverse is a valid
//! reverse-topological traversal. Each node stores its value, a gradient
//! slot of the same shape, its parent indices, and a backward closure
//! producing the parent contributions from the output adjoint.
//!
//! The op vocabulary is fixed: exactly what the two sequence models need,
//! so every rule can be finite-difference checked (see [`gradcheck`]).
//! Graph construction and backward are single-threaded per tape; distinct
//! tapes may live on distinct threads.

pub mod gradcheck;
pub mod nn;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Tells a backward closure everything it may look at.
pub struct BackwardArgs<'a, S: Scalar> {
    pub out_grad: &'a Tensor<S>,
    pub out_value: &'a Tensor<S>,
    pub parents: Vec<&'a Tensor<S>>,
}

type BackwardFn<S> = Box<dyn Fn(&BackwardArgs<'_, S>) -> Vec<Tensor<S>>>;

struct Node<S: Scalar> {
    parents: Vec<usize>,
    backward: Option<BackwardFn<S>>,
}

struct TapeInner<S: Scalar> {
    nodes: Vec<Node<S>>,
    values: Vec<Tensor<S>>,
    grads: Vec<Tensor<S>>,
}

/// Recording tape for one differentiable computation.
pub struct Tape<S: Scalar> {
    inner: Rc<RefCell<TapeInner<S>>>,
}

impl<S: Scalar> Clone for Tape<S> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                values: Vec::new(),
                grads: Vec::new(),
            })),
        }
    }

    /// Differentiable leaf (input or parameter).
    pub fn var(&self, value: Tensor<S>) -> Var<S> {
        self.push(value, Vec::new(), None)
    }

    /// Leaf whose gradient is never read. Storage-wise identical to
    /// [`Tape::var`]; the name records intent.
    pub fn constant(&self, value: Tensor<S>) -> Var<S> {
        self.push(value, Vec::new(), None)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reset every gradient slot to zero.
    pub fn zero_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        for g in &mut inner.grads {
            for v in g.data_mut() {
                *v = S::zero();
            }
        }
    }

    pub(crate) fn push(
        &self,
        value: Tensor<S>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<S>>,
    ) -> Var<S> {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len();
        inner.grads.push(Tensor::zeros(value.shape().to_vec()));
        inner.values.push(value);
        inner.nodes.push(Node { parents, backward });
        Var {
            tape: self.clone(),
            idx,
        }
    }

    fn same_tape(&self, other: &Tape<S>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Handle to one node of a [`Tape`].
pub struct Var<S: Scalar> {
    tape: Tape<S>,
    pub(crate) idx: usize,
}

impl<S: Scalar> Clone for Var<S> {
    fn clone(&self) -> Self {
        Var {
            tape: self.tape.clone(),
            idx: self.idx,
        }
    }
}

impl<S: Scalar> Var<S> {
    pub fn tape(&self) -> Tape<S> {
        self.tape.clone()
    }

    pub fn value(&self) -> Tensor<S> {
        self.tape.inner.borrow().values[self.idx].clone()
    }

    /// Borrowing accessor; avoids cloning large tensors in hot paths.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<S>) -> R) -> R {
        f(&self.tape.inner.borrow().values[self.idx])
    }

    pub fn grad(&self) -> Tensor<S> {
        self.tape.inner.borrow().grads[self.idx].clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().values[self.idx].shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.with_value(|v| v.rows())
    }

    pub fn cols(&self) -> usize {
        self.with_value(|v| v.cols())
    }

    /// Scalar payload of a `[1]`-shaped node.
    pub fn item(&self) -> S {
        self.with_value(|v| v.item())
    }

    fn unary(
        &self,
        value: Tensor<S>,
        backward: impl Fn(&BackwardArgs<'_, S>) -> Vec<Tensor<S>> + 'static,
    ) -> Var<S> {
        self.tape
            .push(value, vec![self.idx], Some(Box::new(backward)))
    }

    fn binary(
        &self,
        rhs: &Var<S>,
        value: Tensor<S>,
        backward: impl Fn(&BackwardArgs<'_, S>) -> Vec<Tensor<S>> + 'static,
    ) -> Var<S> {
        assert!(self.tape.same_tape(&rhs.tape), "vars must share a tape");
        self.tape
            .push(value, vec![self.idx, rhs.idx], Some(Box::new(backward)))
    }

    fn check_same_shape(&self, rhs: &Var<S>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), rhs.shape());
        if a != b {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a,
                rhs: b,
            });
        }
        Ok(())
    }

    // ── Elementwise ──────────────────────────────────────────────

    pub fn add(&self, rhs: &Var<S>) -> Result<Var<S>> {
        self.check_same_shape(rhs, "add")?;
        let value = self.with_value(|a| rhs.with_value(|b| a.zip_map(b, |x, y| x + y)));
        Ok(self.binary(rhs, value, |args| {
            vec![args.out_grad.clone(), args.out_grad.clone()]
        }))
    }

    pub fn sub(&self, rhs: &Var<S>) -> Result<Var<S>> {
        self.check_same_shape(rhs, "sub")?;
        let value = self.with_value(|a| rhs.with_value(|b| a.zip_map(b, |x, y| x - y)));
        Ok(self.binary(rhs, value, |args| {
            vec![args.out_grad.clone(), args.out_grad.map(|g| -g)]
        }))
    }

    pub fn mul(&self, rhs: &Var<S>) -> Result<Var<S>> {
        self.check_same_shape(rhs, "mul")?;
        let value = self.with_value(|a| rhs.with_value(|b| a.zip_map(b, |x, y| x * y)));
        Ok(self.binary(rhs, value, |args| {
            vec![
                args.out_grad.zip_map(args.parents[1], |g, b| g * b),
                args.out_grad.zip_map(args.parents[0], |g, a| g * a),
            ]
        }))
    }

    pub fn scale(&self, c: S) -> Var<S> {
        let value = self.with_value(|a| a.map(|x| x * c));
        self.unary(value, move |args| vec![args.out_grad.map(|g| g * c)])
    }

    pub fn add_scalar(&self, c: S) -> Var<S> {
        let value = self.with_value(|a| a.map(|x| x + c));
        self.unary(value, |args| vec![args.out_grad.clone()])
    }

    pub fn relu(&self) -> Var<S> {
        let value = self.with_value(|a| a.map(|x| if x > S::zero() { x } else { S::zero() }));
        // Subgradient 0 at the kink.
        self.unary(value, |args| {
            vec![args
                .out_grad
                .zip_map(args.parents[0], |g, x| if x > S::zero() { g } else { S::zero() })]
        })
    }

    pub fn sigmoid(&self) -> Var<S> {
        let value = self.with_value(|a| a.map(sigmoid_stable));
        self.unary(value, |args| {
            vec![args
                .out_grad
                .zip_map(args.out_value, |g, y| g * y * (S::one() - y))]
        })
    }

    /// Forward identity on the value; contributes zero gradient upstream.
    pub fn stop_gradient(&self) -> Var<S> {
        let value = self.value();
        self.tape.push(value, vec![self.idx], None)
    }

    // ── Matrix products ──────────────────────────────────────────

    /// `self [m×k] · rhs [k×n]`.
    pub fn matmul(&self, rhs: &Var<S>) -> Result<Var<S>> {
        let (a, b) = (self.shape(), rhs.shape());
        if self.cols() != rhs.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a,
                rhs: b,
            });
        }
        let value = self.with_value(|x| rhs.with_value(|y| tensor::matmul(x, y)));
        Ok(self.binary(rhs, value, |args| {
            vec![
                tensor::matmul_nt(args.out_grad, args.parents[1]),
                tensor::matmul_tn(args.parents[0], args.out_grad),
            ]
        }))
    }

    /// `self [m×k] · rhsᵀ` with `rhs` stored `[n×k]`.
    pub fn matmul_nt(&self, rhs: &Var<S>) -> Result<Var<S>> {
        let (a, b) = (self.shape(), rhs.shape());
        if self.cols() != rhs.cols() {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: a,
                rhs: b,
            });
        }
        let value = self.with_value(|x| rhs.with_value(|y| tensor::matmul_nt(x, y)));
        Ok(self.binary(rhs, value, |args| {
            vec![
                tensor::matmul(args.out_grad, args.parents[1]),
                tensor::matmul_tn(args.out_grad, args.parents[0]),
            ]
        }))
    }

    /// Row-broadcast bias add: `[r×c] + [c]`.
    pub fn add_bias(&self, bias: &Var<S>) -> Result<Var<S>> {
        let c = self.cols();
        if bias.shape() != vec![c] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(),
                rhs: bias.shape(),
            });
        }
        let value = self.with_value(|x| {
            bias.with_value(|b| {
                let mut out = x.clone();
                for i in 0..x.rows() {
                    for (o, &bv) in out.row_mut(i).iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
                out
            })
        });
        Ok(self.binary(bias, value, move |args| {
            let g = args.out_grad;
            let mut db = vec![S::zero(); c];
            for i in 0..g.rows() {
                for (acc, &gv) in db.iter_mut().zip(g.row(i)) {
                    *acc += gv;
                }
            }
            vec![g.clone(), Tensor::new(vec![c], db).unwrap()]
        }))
    }

    // ── Normalization and losses ─────────────────────────────────

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&self, gain: &Var<S>, bias: &Var<S>, eps: S) -> Result<Var<S>> {
        let c = self.cols();
        if gain.shape() != vec![c] || bias.shape() != vec![c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(),
                rhs: gain.shape(),
            });
        }
        assert!(self.tape.same_tape(&gain.tape) && self.tape.same_tape(&bias.tape));
        let value = self.with_value(|x| {
            gain.with_value(|g| {
                bias.with_value(|b| {
                    let mut out = x.clone();
                    for i in 0..x.rows() {
                        let row = x.row(i);
                        let (mu, inv_std) = row_moments(row, eps);
                        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                            *o = (row[j] - mu) * inv_std * g.data()[j] + b.data()[j];
                        }
                    }
                    out
                })
            })
        });
        let node = self.tape.push(
            value,
            vec![self.idx, gain.idx, bias.idx],
            Some(Box::new(move |args: &BackwardArgs<'_, S>| {
                let x = args.parents[0];
                let g = args.parents[1];
                let go = args.out_grad;
                let n = S::from_f64(c as f64);
                let mut dx = Tensor::zeros(x.shape().to_vec());
                let mut dgain = vec![S::zero(); c];
                let mut dbias = vec![S::zero(); c];
                for i in 0..x.rows() {
                    let row = x.row(i);
                    let grow = go.row(i);
                    let (mu, inv_std) = row_moments(row, eps);
                    // xhat and the two row means the standard formula needs
                    let mut sum_dxhat = S::zero();
                    let mut sum_dxhat_xhat = S::zero();
                    let xhat: Vec<S> = row.iter().map(|&v| (v - mu) * inv_std).collect();
                    let dxhat: Vec<S> = grow
                        .iter()
                        .zip(g.data())
                        .map(|(&gv, &gain_v)| gv * gain_v)
                        .collect();
                    for j in 0..c {
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat[j];
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                    let mean_dxhat = sum_dxhat / n;
                    let mean_dxhat_xhat = sum_dxhat_xhat / n;
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                vec![
                    dx,
                    Tensor::new(vec![c], dgain).unwrap(),
                    Tensor::new(vec![c], dbias).unwrap(),
                ]
            })),
        );
        Ok(node)
    }

    /// Row-wise softmax where row `r` only sees its first `visible[r]`
    /// columns; the rest of the row is exactly zero in the output.
    pub fn masked_softmax_rows(&self, visible: Vec<usize>) -> Result<Var<S>> {
        let (r, c) = (self.rows(), self.cols());
        if visible.len() != r || visible.iter().any(|&v| v == 0 || v > c) {
            return Err(Error::Dimension(format!(
                "visible lengths {:?} invalid for {} rows x {} cols",
                visible, r, c
            )));
        }
        let vis_fwd = visible.clone();
        let value = self.with_value(|x| {
            let mut out = Tensor::zeros(x.shape().to_vec());
            for i in 0..r {
                let row = x.row(i);
                let v = vis_fwd[i];
                let m = row[..v]
                    .iter()
                    .fold(S::neg_infinity(), |acc, &x| acc.max(x));
                let mut s = S::zero();
                let orow = out.row_mut(i);
                for j in 0..v {
                    let e = (row[j] - m).exp();
                    orow[j] = e;
                    s += e;
                }
                for o in orow[..v].iter_mut() {
                    *o = *o / s;
                }
            }
            out
        });
        Ok(self.unary(value, move |args| {
            let y = args.out_value;
            let go = args.out_grad;
            let mut dx = Tensor::zeros(y.shape().to_vec());
            for i in 0..y.rows() {
                let v = visible[i];
                let yrow = y.row(i);
                let grow = go.row(i);
                let mut dot = S::zero();
                for j in 0..v {
                    dot += grow[j] * yrow[j];
                }
                for (j, o) in dx.row_mut(i).iter_mut().enumerate().take(v) {
                    *o = yrow[j] * (grow[j] - dot);
                }
            }
            vec![dx]
        }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax,
    /// stabilized by max subtraction.
    pub fn softmax_cross_entropy(&self, targets: &[usize]) -> Result<Var<S>> {
        let (n, k) = (self.rows(), self.cols());
        if targets.len() != n {
            return Err(Error::Dimension(format!(
                "{} targets for {} rows",
                targets.len(),
                n
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::IndexOutOfRange {
                what: "class",
                index: bad,
                size: k,
            });
        }
        let tv = targets.to_vec();
        let value = self.with_value(|x| {
            let mut loss = S::zero();
            for (i, &t) in tv.iter().enumerate() {
                let row = x.row(i);
                loss += row_log_sum_exp(row) - row[t];
            }
            Tensor::scalar(loss / S::from_f64(n as f64))
        });
        let tb = targets.to_vec();
        Ok(self.unary(value, move |args| {
            let x = args.parents[0];
            let g = args.out_grad.item() / S::from_f64(n as f64);
            let mut dx = Tensor::zeros(x.shape().to_vec());
            for (i, &t) in tb.iter().enumerate() {
                let row = x.row(i);
                let lse = row_log_sum_exp(row);
                let drow = dx.row_mut(i);
                for (j, o) in drow.iter_mut().enumerate() {
                    let p = (row[j] - lse).exp();
                    let onehot = if j == t { S::one() } else { S::zero() };
                    *o = g * (p - onehot);
                }
            }
            vec![dx]
        }))
    }

    /// Mean smooth-L1 between `self` and `rhs`:
    /// `0.5 δ²/β` for `|δ| < β`, else `|δ| − 0.5 β`.
    pub fn smooth_l1(&self, rhs: &Var<S>, beta: S) -> Result<Var<S>> {
        self.check_same_shape(rhs, "smooth_l1")?;
        if beta <= S::zero() {
            return Err(Error::Config("smooth_l1 beta must be positive".into()));
        }
        let half = S::from_f64(0.5);
        let value = self.with_value(|a| {
            rhs.with_value(|b| {
                let mut acc = S::zero();
                for (&x, &y) in a.data().iter().zip(b.data()) {
                    let d = x - y;
                    acc += if d.abs() < beta {
                        half * d * d / beta
                    } else {
                        d.abs() - half * beta
                    };
                }
                Tensor::scalar(acc / S::from_f64(a.numel() as f64))
            })
        });
        Ok(self.binary(rhs, value, move |args| {
            let a = args.parents[0];
            let b = args.parents[1];
            let g = args.out_grad.item() / S::from_f64(a.numel() as f64);
            let da = a.zip_map(b, |x, y| {
                let d = x - y;
                let slope = if d.abs() < beta { d / beta } else { d.signum() };
                g * slope
            });
            let db = da.map(|v| -v);
            vec![da, db]
        }))
    }

    // ── Reductions ───────────────────────────────────────────────

    pub fn sum_all(&self) -> Var<S> {
        let value = self.with_value(|a| Tensor::scalar(a.sum()));
        self.unary(value, |args| {
            let g = args.out_grad.item();
            vec![Tensor::full(args.parents[0].shape().to_vec(), g)]
        })
    }

    pub fn mean_all(&self) -> Var<S> {
        let n = self.with_value(Tensor::numel);
        let inv = S::from_f64(1.0 / n as f64);
        let value = self.with_value(|a| Tensor::scalar(a.sum() * inv));
        self.unary(value, move |args| {
            let g = args.out_grad.item() * inv;
            vec![Tensor::full(args.parents[0].shape().to_vec(), g)]
        })
    }

    // ── Structural ops ───────────────────────────────────────────

    /// Embedding lookup: rows of `self` (`[v×d]`) gathered by index.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<S>> {
        let v = self.rows();
        let d = self.cols();
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::IndexOutOfRange {
                what: "row",
                index: bad,
                size: v,
            });
        }
        let idx = indices.to_vec();
        let value = self.with_value(|t| {
            let mut data = Vec::with_capacity(idx.len() * d);
            for &i in &idx {
                data.extend_from_slice(t.row(i));
            }
            Tensor::new(vec![idx.len(), d], data).unwrap()
        });
        let idxb = indices.to_vec();
        Ok(self.unary(value, move |args| {
            let mut dt = Tensor::zeros(args.parents[0].shape().to_vec());
            for (pos, &i) in idxb.iter().enumerate() {
                let grow = args.out_grad.row(pos).to_vec();
                for (o, gv) in dt.row_mut(i).iter_mut().zip(grow) {
                    *o += gv;
                }
            }
            vec![dt]
        }))
    }

    /// Rows `[start, end)` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<S>> {
        let (r, c) = (self.rows(), self.cols());
        if start >= end || end > r {
            return Err(Error::Dimension(format!(
                "slice [{start}, {end}) out of range for {r} rows"
            )));
        }
        let value = self.with_value(|t| {
            Tensor::new(
                vec![end - start, c],
                t.data()[start * c..end * c].to_vec(),
            )
            .unwrap()
        });
        Ok(self.unary(value, move |args| {
            let mut dt = Tensor::zeros(args.parents[0].shape().to_vec());
            let c = dt.cols();
            dt.data_mut()[start * c..end * c].copy_from_slice(args.out_grad.data());
            vec![dt]
        }))
    }

    /// Row `t` of `self` repeated `durations[t]` times, in order.
    pub fn repeat_rows(&self, durations: &[usize]) -> Result<Var<S>> {
        let (r, c) = (self.rows(), self.cols());
        if durations.len() != r {
            return Err(Error::Dimension(format!(
                "{} durations for {} rows",
                durations.len(),
                r
            )));
        }
        if let Some((pos, &d)) = durations.iter().enumerate().find(|(_, &d)| d == 0) {
            return Err(Error::Duration(d, pos));
        }
        let total: usize = durations.iter().sum();
        let dur = durations.to_vec();
        let value = self.with_value(|t| {
            let mut data = Vec::with_capacity(total * c);
            for (i, &d) in dur.iter().enumerate() {
                for _ in 0..d {
                    data.extend_from_slice(t.row(i));
                }
            }
            Tensor::new(vec![total, c], data).unwrap()
        });
        let durb = durations.to_vec();
        Ok(self.unary(value, move |args| {
            let mut dt = Tensor::zeros(args.parents[0].shape().to_vec());
            let mut pos = 0;
            for (i, &d) in durb.iter().enumerate() {
                for _ in 0..d {
                    let grow = args.out_grad.row(pos).to_vec();
                    for (o, gv) in dt.row_mut(i).iter_mut().zip(grow) {
                        *o += gv;
                    }
                    pos += 1;
                }
            }
            vec![dt]
        }))
    }

    pub fn backward(&self) -> Result<()> {
        let mut inner = self.tape.inner.borrow_mut();
        if inner.values[self.idx].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                inner.values[self.idx].shape()
            )));
        }
        let n = inner.nodes.len();
        // Fresh adjoints per call; persistent grad slots accumulate at the
        // end, so repeated backward calls add one full pass each.
        let mut adj: Vec<Tensor<S>> = inner
            .values
            .iter()
            .map(|v| Tensor::zeros(v.shape().to_vec()))
            .collect();
        adj[self.idx].data_mut()[0] = S::one();

        {
            let TapeInner { nodes, values, .. } = &*inner;
            for i in (0..n).rev() {
                let node = &nodes[i];
                let Some(back) = &node.backward else { continue };
                let (lo, hi) = adj.split_at_mut(i);
                let out_grad = &hi[0];
                if out_grad.data().iter().all(|v| *v == S::zero()) {
                    continue;
                }
                let args = BackwardArgs {
                    out_grad,
                    out_value: &values[i],
                    parents: node.parents.iter().map(|&p| &values[p]).collect(),
                };
                let contribs = back(&args);
                debug_assert_eq!(contribs.len(), node.parents.len());
                for (&p, c) in node.parents.iter().zip(&contribs) {
                    debug_assert!(p < i, "parents must precede children on the tape");
                    lo[p].add_assign(c);
                }
            }
        }
        for (slot, a) in inner.grads.iter_mut().zip(&adj) {
            slot.add_assign(a);
        }
        Ok(())
    }
}

/// Concatenate along rows; all parts must share a column count.
pub fn concat_rows<S: Scalar>(parts: &[Var<S>]) -> Result<Var<S>> {
    assert!(!parts.is_empty(), "concat_rows needs at least one part");
    let tape = parts[0].tape();
    let c = parts[0].cols();
    let mut row_counts = Vec::with_capacity(parts.len());
    let mut data = Vec::new();
    for p in parts {
        if p.cols() != c {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: parts[0].shape(),
                rhs: p.shape(),
            });
        }
        row_counts.push(p.rows());
        p.with_value(|t| data.extend_from_slice(t.data()));
    }
    let total: usize = row_counts.iter().sum();
    let value = Tensor::new(vec![total, c], data)?;
    let parents: Vec<usize> = parts.iter().map(|p| p.idx).collect();
    Ok(tape.push(
        value,
        parents,
        Some(Box::new(move |args: &BackwardArgs<'_, S>| {
            let mut out = Vec::with_capacity(row_counts.len());
            let mut row = 0;
            for &rc in &row_counts {
                let chunk = args.out_grad.data()[row * c..(row + rc) * c].to_vec();
                out.push(Tensor::new(vec![rc, c], chunk).unwrap());
                row += rc;
            }
            out
        })),
    ))
}

/// Concatenate along columns; all parts must share a row count.
pub fn concat_cols<S: Scalar>(parts: &[Var<S>]) -> Result<Var<S>> {
    assert!(!parts.is_empty(), "concat_cols needs at least one part");
    let tape = parts[0].tape();
    let r = parts[0].rows();
    let mut col_counts = Vec::with_capacity(parts.len());
    for p in parts {
        if p.rows() != r {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: parts[0].shape(),
                rhs: p.shape(),
            });
        }
        col_counts.push(p.cols());
    }
    let total: usize = col_counts.iter().sum();
    let mut data = vec![S::zero(); r * total];
    let mut offset = 0;
    for p in parts {
        p.with_value(|t| {
            let c = t.cols();
            for i in 0..r {
                data[i * total + offset..i * total + offset + c].copy_from_slice(t.row(i));
            }
        });
        offset += p.cols();
    }
    let value = Tensor::new(vec![r, total], data)?;
    let parents: Vec<usize> = parts.iter().map(|p| p.idx).collect();
    Ok(tape.push(
        value,
        parents,
        Some(Box::new(move |args: &BackwardArgs<'_, S>| {
            let mut out = Vec::with_capacity(col_counts.len());
            let mut offset = 0;
            for &cc in &col_counts {
                let mut chunk = vec![S::zero(); r * cc];
                for i in 0..r {
                    chunk[i * cc..(i + 1) * cc]
                        .copy_from_slice(&args.out_grad.row(i)[offset..offset + cc]);
                }
                out.push(Tensor::new(vec![r, cc], chunk).unwrap());
                offset += cc;
            }
            out
        })),
    ))
}

fn sigmoid_stable<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn row_moments<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let n = S::from_f64(row.len() as f64);
    let mu = row.iter().fold(S::zero(), |a, &v| a + v) / n;
    let var = row
        .iter()
        .fold(S::zero(), |a, &v| a + (v - mu) * (v - mu))
        / n;
    (mu, S::one() / (var + eps).sqrt())
}

fn row_log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let m = row.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
    let s = row.iter().fold(S::zero(), |a, &v| a + (v - m).exp());
    m + s.ln()
}
