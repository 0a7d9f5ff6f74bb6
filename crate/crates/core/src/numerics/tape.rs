//! Reverse-mode differentiation over whole matrices.
//!
//! Values are computed eagerly as ops are recorded; `backward` walks the
//! recorded nodes once in reverse creation order, which is a reverse
//! topological order because a node's parents are always recorded first.

use super::matrix::{argmax_of, clamp_rows, row_softmax, scale_rows_to_max, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    RowSoftmax(Var),
    ScaleRowsToMax(Var, f64),
    ClampRows(Var, f64),
    ScaleCols(Var, Vec<f64>),
    WeightedCe {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Matrix,
    },
    SmoothL1 {
        pred: Var,
        target: Matrix,
        row_weights: Vec<f64>,
        norm: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => acc
            .add_assign(&g)
            .expect("gradient shape matches its node"),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Broadcast-add a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(v, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).relu();
        self.push(v, Op::Relu(a))
    }

    /// `x · W + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let v = row_softmax(self.value(a));
        self.push(v, Op::RowSoftmax(a))
    }

    pub fn scale_rows_to_max(&mut self, a: Var, t: f64) -> Var {
        let v = scale_rows_to_max(self.value(a), t);
        self.push(v, Op::ScaleRowsToMax(a, t))
    }

    pub fn clamp_rows(&mut self, a: Var, t: f64) -> Var {
        let v = clamp_rows(self.value(a), t);
        self.push(v, Op::ClampRows(a, t))
    }

    /// Multiply column `j` of `a` by the constant `s[j]`.
    pub fn scale_cols(&mut self, a: Var, s: &[f64]) -> Result<Var> {
        let src = self.value(a);
        if s.len() != src.cols() {
            return Err(Error::Shape {
                op: "scale_cols",
                lhs: src.shape(),
                rhs: (1, s.len()),
            });
        }
        let mut v = src.clone();
        for r in 0..v.rows() {
            for (x, f) in v.row_mut(r).iter_mut().zip(s) {
                *x *= f;
            }
        }
        Ok(self.push(v, Op::ScaleCols(a, s.to_vec())))
    }

    /// Mean over rows of `weight[i] · −log softmax(logits[i])[target[i]]`,
    /// with the softmax restricted to `mask` (entries outside the mask are
    /// treated as −∞: they receive no probability and no gradient).
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let l = self.value(logits);
        let (rows, cols) = l.shape();
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::Shape {
                op: "weighted_cross_entropy",
                lhs: l.shape(),
                rhs: (targets.len(), weights.len()),
            });
        }
        if let Some(m) = mask {
            if m.len() != cols {
                return Err(Error::Shape {
                    op: "weighted_cross_entropy mask",
                    lhs: l.shape(),
                    rhs: (1, m.len()),
                });
            }
        }
        let inside = |j: usize| mask.map_or(true, |m| m[j]);
        let mut probs = Matrix::zeros(rows, cols);
        let mut loss = 0.0;
        for i in 0..rows {
            let t = targets[i];
            if t >= cols || !inside(t) {
                return Err(Error::OutOfRange { index: t, len: cols });
            }
            let row = l.row(i);
            let max = (0..cols)
                .filter(|&j| inside(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let p = probs.row_mut(i);
            for j in (0..cols).filter(|&j| inside(j)) {
                p[j] = (row[j] - max).exp();
                sum += p[j];
            }
            p.iter_mut().for_each(|v| *v /= sum);
            if weights[i] != 0.0 {
                loss += weights[i] * -((row[t] - max) - sum.ln());
            }
        }
        let loss = if rows > 0 { loss / rows as f64 } else { 0.0 };
        Ok(self.push(
            Matrix::scalar(loss),
            Op::WeightedCe {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// `Σ_i row_weights[i] · Σ_j smoothL1(pred[i,j] − target[i,j]) / norm`
    /// with the unit-beta smooth L1 (quadratic below 1, linear above).
    pub fn smooth_l1(&mut self, pred: Var, target: &Matrix, row_weights: &[f64], norm: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || row_weights.len() != p.rows() {
            return Err(Error::Shape {
                op: "smooth_l1",
                lhs: p.shape(),
                rhs: target.shape(),
            });
        }
        let mut loss = 0.0;
        for i in 0..p.rows() {
            if row_weights[i] == 0.0 {
                continue;
            }
            let s: f64 = p
                .row(i)
                .iter()
                .zip(target.row(i))
                .map(|(a, b)| smooth_l1_value(a - b))
                .sum();
            loss += row_weights[i] * s;
        }
        Ok(self.push(
            Matrix::scalar(loss / norm),
            Op::SmoothL1 {
                pred,
                target: target.clone(),
                row_weights: row_weights.to_vec(),
                norm,
            },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b)).expect("shape");
                    let gb = self.value(*a).t_matmul(&g).expect("shape");
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.matmul(self.value(*b)).expect("shape");
                    let gb = g.t_matmul(self.value(*a)).expect("shape");
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::AddRow(a, b) => {
                    accumulate(&mut grads[b.0], g.col_sums());
                    accumulate(&mut grads[a.0], g.clone());
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], g.scale(*c)),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    for (gv, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dot: f64 = g.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (gv, &yv) in ga.row_mut(r).iter_mut().zip(yr) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ScaleRowsToMax(a, t) => {
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    for r in 0..x.rows() {
                        let xr = x.row(r);
                        if xr.is_empty() {
                            continue;
                        }
                        let (k, m) = argmax_of(xr);
                        if m <= 0.0 {
                            continue;
                        }
                        // y_j = t x_j / m with m = x_k
                        let gx: f64 = g.row(r).iter().zip(xr).map(|(a, b)| a * b).sum();
                        let row = ga.row_mut(r);
                        row.iter_mut().for_each(|v| *v *= t / m);
                        row[k] -= t * gx / (m * m);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ClampRows(a, t) => {
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    for (gv, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                        if xv > *t {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ScaleCols(a, s) => {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (gv, f) in ga.row_mut(r).iter_mut().zip(s) {
                            *gv *= f;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::WeightedCe {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let up = g.get(0, 0);
                    let rows = probs.rows();
                    let mut gl = Matrix::zeros(rows, probs.cols());
                    if rows > 0 {
                        let scale = up / rows as f64;
                        for i in 0..rows {
                            let w = weights[i] * scale;
                            if w == 0.0 {
                                continue;
                            }
                            let out = gl.row_mut(i);
                            for (o, &p) in out.iter_mut().zip(probs.row(i)) {
                                *o = w * p;
                            }
                            out[targets[i]] -= w;
                        }
                    }
                    accumulate(&mut grads[logits.0], gl);
                }
                Op::SmoothL1 {
                    pred,
                    target,
                    row_weights,
                    norm,
                } => {
                    let up = g.get(0, 0) / norm;
                    let p = self.value(*pred);
                    let mut gp = Matrix::zeros(p.rows(), p.cols());
                    for i in 0..p.rows() {
                        let w = row_weights[i] * up;
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..p.cols() {
                            gp.set(i, j, w * smooth_l1_grad(p.get(i, j) - target.get(i, j)));
                        }
                    }
                    accumulate(&mut grads[pred.0], gp);
                }
            }
            grads[idx] = Some(g);
        }
        Grads { grads }
    }
}

pub fn smooth_l1_value(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Single-row weighted cross-entropy: `weight · −log softmax(logits)[target]`.
pub fn weighted_cross_entropy(logits: &[f64], target: usize, weight: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.leaf(Matrix::row_vector(logits.to_vec()));
    let loss = tape.weighted_cross_entropy(l, &[target], &[weight], None)?;
    Ok(tape.value(loss).get(0, 0))
}

/// Summed smooth L1 between two vectors.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(a, b)| smooth_l1_value(a - b)).sum()
}
