//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in evaluation order, so node ids are a
//! topological order by construction. [`Tape::backward`] walks the nodes once
//! in reverse. Besides generic tensor ops the tape knows a few fused body-model
//! ops (Rodrigues, shape-scaled offsets, forward kinematics, weak-perspective
//! projection) whose reverse passes are hand-written.

use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use super::NnError;
use crate::body::{self, rotation, KinematicTree};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Tanh(Var),
    Exp(Var),
    Softplus(Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    Sum(Var),
    Rodrigues(Var),
    ShapedOffsets(Var, Arc<KinematicTree>),
    Kinematics {
        rotations: Var,
        offsets: Var,
        tree: Arc<KinematicTree>,
        globals: Vec<f64>,
    },
    Project(Var, Var),
    CenterRoot(Var),
    SqErr {
        pred: Var,
        target: Tensor,
        weights: Tensor,
    },
    KlStdNormal(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Operation record for one forward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; nodes the loss does not depend on get zeros.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
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

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded nodes, keeping the allocation.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Input or parameter node.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Copy of `v` as a new leaf: downstream gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.leaf(t)
    }

    fn binary_same_shape(&self, a: Var, b: Var, name: &str) {
        assert_eq!(
            self.value(a).len(),
            self.value(b).len(),
            "{name}: {:?} vs {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::from_shape(x.shape(), data);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::from_shape(x.shape(), data);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::from_shape(x.shape(), data);
        self.push(out, Op::Mul(a, b))
    }

    /// `a[i, :] + bias` for every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        let cols = x.cols();
        assert_eq!(b.len(), cols, "add_row: bias {:?} for {:?}", b.shape(), x.shape());
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            for (v, bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        let out = Tensor::from_shape(x.shape(), data);
        self.push(out, Op::AddRow(a, bias))
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Var {
        let (x, y) = (self.value(a), self.value(w));
        let (m, k) = (x.rows(), x.cols());
        assert_eq!(y.ndim(), 2, "matmul: weight must be 2-D");
        assert_eq!(y.shape()[0], k, "matmul: {:?} · {:?}", x.shape(), y.shape());
        let n = y.shape()[1];
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, x.data(), false, y.data(), false, &mut data, false);
        self.push(Tensor::from_shape(&[m, n], data), Op::MatMul(a, w))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat_cols: row mismatch");
                t.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(Tensor::from_shape(&[rows, total], data), Op::ConcatCols(parts.to_vec()))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        let (rows, cols) = (x.rows(), x.cols());
        assert!(start <= end && end <= cols, "slice_cols {start}..{end} of {cols}");
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&x.row(r)[start..end]);
        }
        self.push(Tensor::from_shape(&[rows, end - start], data), Op::SliceCols(a, start, end))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        self.push(out, Op::Reshape(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Axis-angle triples → flattened rotation matrices, `[n, 9]`.
    pub fn rodrigues(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.len() % 3, 0, "rodrigues: length not a multiple of 3");
        let n = x.len() / 3;
        let mut data = Vec::with_capacity(9 * n);
        for w in x.data().chunks_exact(3) {
            data.extend_from_slice(&rotation::rodrigues([w[0], w[1], w[2]]));
        }
        self.push(Tensor::from_shape(&[n, 9], data), Op::Rodrigues(a))
    }

    /// Shape coefficients `[B, 10]` → bone offsets `[B, 3J]`.
    pub fn shaped_offsets(&mut self, beta: Var, tree: &Arc<KinematicTree>) -> Var {
        let b = self.value(beta);
        assert_eq!(b.cols(), body::SHAPE_DIM, "shaped_offsets: β width");
        let nj = tree.num_joints();
        let rows = b.rows();
        let mut data = vec![0.0; rows * 3 * nj];
        for r in 0..rows {
            body::shaped_offsets_into(tree, b.row(r), &mut data[r * 3 * nj..(r + 1) * 3 * nj]);
        }
        self.push(
            Tensor::from_shape(&[rows, 3 * nj], data),
            Op::ShapedOffsets(beta, Arc::clone(tree)),
        )
    }

    /// Batched forward kinematics with the root at `offsets[0]`.
    ///
    /// `rotations`: `[B, 9J]` local rotations (root first), `offsets`: `[B, 3J]`.
    /// Returns joint positions `[B, 3J]`.
    pub fn kinematics(&mut self, rotations: Var, offsets: Var, tree: &Arc<KinematicTree>) -> Var {
        let nj = tree.num_joints();
        let (r, o) = (self.value(rotations), self.value(offsets));
        let rows = r.rows();
        assert_eq!(r.len(), rows * 9 * nj, "kinematics: rotation shape {:?}", r.shape());
        assert_eq!(o.len(), rows * 3 * nj, "kinematics: offset shape {:?}", o.shape());
        let mut globals = vec![0.0; rows * 9 * nj];
        let mut joints = vec![0.0; rows * 3 * nj];
        for b in 0..rows {
            body::fk_forward(
                tree.parents(),
                &r.data()[b * 9 * nj..(b + 1) * 9 * nj],
                &o.data()[b * 3 * nj..(b + 1) * 3 * nj],
                [0.0; 3],
                &mut globals[b * 9 * nj..(b + 1) * 9 * nj],
                &mut joints[b * 3 * nj..(b + 1) * 3 * nj],
            );
        }
        self.push(
            Tensor::from_shape(&[rows, 3 * nj], joints),
            Op::Kinematics {
                rotations,
                offsets,
                tree: Arc::clone(tree),
                globals,
            },
        )
    }

    /// Weak-perspective projection. `points`: `[B, 3N]`, `cam`: `[B, 3]` as
    /// `(scale, tx, ty)`. Returns `[B, 2N]`.
    pub fn project(&mut self, points: Var, cam: Var) -> Var {
        let (p, c) = (self.value(points), self.value(cam));
        let rows = p.rows();
        assert_eq!(c.len(), rows * 3, "project: camera shape {:?}", c.shape());
        let n = p.cols() / 3;
        let mut data = Vec::with_capacity(rows * 2 * n);
        for b in 0..rows {
            let (s, tx, ty) = (c.data()[3 * b], c.data()[3 * b + 1], c.data()[3 * b + 2]);
            for q in p.row(b).chunks_exact(3) {
                data.push(s * q[0] + tx);
                data.push(s * q[1] + ty);
            }
        }
        self.push(Tensor::from_shape(&[rows, 2 * n], data), Op::Project(points, cam))
    }

    /// Subtracts each row's first 3-D point from all its points.
    pub fn center_root(&mut self, points: Var) -> Var {
        let p = self.value(points);
        let mut data = p.data().to_vec();
        let cols = p.cols();
        for row in data.chunks_exact_mut(cols) {
            let root = [row[0], row[1], row[2]];
            for q in row.chunks_exact_mut(3) {
                for c in 0..3 {
                    q[c] -= root[c];
                }
            }
        }
        let out = Tensor::from_shape(p.shape(), data);
        self.push(out, Op::CenterRoot(points))
    }

    /// `Σ w ⊙ (pred − target)²` with constant target and weights.
    pub fn sq_err(&mut self, pred: Var, target: Tensor, weights: Tensor) -> Var {
        let p = self.value(pred);
        assert_eq!(p.len(), target.len(), "sq_err: target shape");
        assert_eq!(p.len(), weights.len(), "sq_err: weight shape");
        let s = p
            .data()
            .iter()
            .zip(target.data())
            .zip(weights.data())
            .map(|((a, b), w)| w * (a - b) * (a - b))
            .sum();
        self.push(Tensor::scalar(s), Op::SqErr { pred, target, weights })
    }

    /// `Σ ½(σ² + μ² − 1 − 2 log σ)` over all entries, with `log σ` given.
    pub fn kl_std_normal(&mut self, mu: Var, log_sigma: Var) -> Var {
        self.binary_same_shape(mu, log_sigma, "kl_std_normal");
        let (m, l) = (self.value(mu), self.value(log_sigma));
        let s = m
            .data()
            .iter()
            .zip(l.data())
            .map(|(m, l)| 0.5 * ((2.0 * l).exp() + m * m - 1.0 - 2.0 * l))
            .sum();
        self.push(Tensor::scalar(s), Op::KlStdNormal(mu, log_sigma))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_shape(lv.shape(), vec![1.0]));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        fn acc_with(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], f: impl FnOnce(&mut [f64])) {
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
            f(slot.data_mut());
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let gd = g.data();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    let sa = self.value(*a).shape().to_vec();
                    let sb = self.value(*b).shape().to_vec();
                    acc(&mut grads, *a, g.clone().reshaped(&sa));
                    acc(&mut grads, *b, g.reshaped(&sb));
                }
                Op::Sub(a, b) => {
                    let sa = self.value(*a).shape().to_vec();
                    let sb = self.value(*b).shape().to_vec();
                    acc(&mut grads, *b, g.map(|v| -v).reshaped(&sb));
                    acc(&mut grads, *a, g.reshaped(&sa));
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let ga: Vec<f64> = gd.iter().zip(y.data()).map(|(g, y)| g * y).collect();
                    let gb: Vec<f64> = gd.iter().zip(x.data()).map(|(g, x)| g * x).collect();
                    acc(&mut grads, *a, Tensor::from_shape(x.shape(), ga));
                    acc(&mut grads, *b, Tensor::from_shape(y.shape(), gb));
                }
                Op::AddRow(a, bias) => {
                    let bshape = self.value(*bias).shape().to_vec();
                    let cols = self.value(*bias).len();
                    acc_with(&mut grads, *bias, &bshape, |gb| {
                        for row in gd.chunks_exact(cols) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    });
                    let sa = self.value(*a).shape().to_vec();
                    acc(&mut grads, *a, g.reshaped(&sa));
                }
                Op::MatMul(a, w) => {
                    let (x, y) = (self.value(*a), self.value(*w));
                    let (m, k) = (x.rows(), x.cols());
                    let nn = y.shape()[1];
                    let xshape = x.shape().to_vec();
                    let yshape = y.shape().to_vec();
                    acc_with(&mut grads, *a, &xshape, |ga| {
                        gemm(m, nn, k, gd, false, y.data(), true, ga, true);
                    });
                    acc_with(&mut grads, *w, &yshape, |gw| {
                        gemm(k, m, nn, x.data(), true, gd, false, gw, true);
                    });
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga: Vec<f64> = gd.iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                    let s = self.value(*a).shape().to_vec();
                    acc(&mut grads, *a, Tensor::from_shape(&s, ga));
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    let ga: Vec<f64> = gd.iter().zip(y.data()).map(|(g, y)| g * y).collect();
                    let s = self.value(*a).shape().to_vec();
                    acc(&mut grads, *a, Tensor::from_shape(&s, ga));
                }
                Op::Softplus(a) => {
                    let x = self.value(*a);
                    let ga: Vec<f64> = gd.iter().zip(x.data()).map(|(g, x)| g * sigmoid(*x)).collect();
                    acc(&mut grads, *a, Tensor::from_shape(x.shape(), ga));
                }
                Op::Scale(a, c) => {
                    let s = self.value(*a).shape().to_vec();
                    acc(&mut grads, *a, g.map(|v| v * c).reshaped(&s));
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.value(p).shape().to_vec();
                        let w = self.value(p).cols();
                        acc_with(&mut grads, p, &shape, |gp| {
                            for (dst, src) in gp.chunks_exact_mut(w).zip(gd.chunks_exact(total)) {
                                for (d, s) in dst.iter_mut().zip(&src[offset..offset + w]) {
                                    *d += s;
                                }
                            }
                        });
                        offset += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let x = self.value(*a);
                    let cols = x.cols();
                    let w = end - start;
                    let shape = x.shape().to_vec();
                    acc_with(&mut grads, *a, &shape, |ga| {
                        for (dst, src) in ga.chunks_exact_mut(cols).zip(gd.chunks_exact(w)) {
                            for (d, s) in dst[*start..*end].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                }
                Op::Reshape(a) => {
                    let s = self.value(*a).shape().to_vec();
                    acc(&mut grads, *a, g.reshaped(&s));
                }
                Op::Sum(a) => {
                    let s = self.value(*a).shape().to_vec();
                    acc(&mut grads, *a, Tensor::full(&s, gd[0]));
                }
                Op::Rodrigues(a) => {
                    let x = self.value(*a);
                    let mut ga = Vec::with_capacity(x.len());
                    for (w, gr) in x.data().chunks_exact(3).zip(gd.chunks_exact(9)) {
                        let (_, jac) = rotation::rodrigues_with_jacobian([w[0], w[1], w[2]]);
                        for d in &jac {
                            ga.push(d.iter().zip(gr).map(|(p, q)| p * q).sum());
                        }
                    }
                    acc(&mut grads, *a, Tensor::from_shape(x.shape(), ga));
                }
                Op::ShapedOffsets(beta, tree) => {
                    let b = self.value(*beta);
                    let nj = tree.num_joints();
                    let shape = b.shape().to_vec();
                    let bd = b.data();
                    acc_with(&mut grads, *beta, &shape, |gb| {
                        for r in 0..shape[0] {
                            body::shaped_offsets_backward(
                                tree,
                                &bd[r * body::SHAPE_DIM..(r + 1) * body::SHAPE_DIM],
                                &gd[r * 3 * nj..(r + 1) * 3 * nj],
                                &mut gb[r * body::SHAPE_DIM..(r + 1) * body::SHAPE_DIM],
                            );
                        }
                    });
                }
                Op::Kinematics {
                    rotations,
                    offsets,
                    tree,
                    globals,
                } => {
                    let nj = tree.num_joints();
                    let (r, o) = (self.value(*rotations), self.value(*offsets));
                    let rows = r.rows();
                    let mut gr = vec![0.0; r.len()];
                    let mut go = vec![0.0; o.len()];
                    let mut gt = [0.0; 3];
                    for b in 0..rows {
                        body::fk_backward(
                            tree.parents(),
                            &r.data()[b * 9 * nj..(b + 1) * 9 * nj],
                            &o.data()[b * 3 * nj..(b + 1) * 3 * nj],
                            &globals[b * 9 * nj..(b + 1) * 9 * nj],
                            &gd[b * 3 * nj..(b + 1) * 3 * nj],
                            &mut gr[b * 9 * nj..(b + 1) * 9 * nj],
                            &mut go[b * 3 * nj..(b + 1) * 3 * nj],
                            &mut gt,
                        );
                    }
                    let rs = r.shape().to_vec();
                    let os = o.shape().to_vec();
                    acc(&mut grads, *rotations, Tensor::from_shape(&rs, gr));
                    acc(&mut grads, *offsets, Tensor::from_shape(&os, go));
                }
                Op::Project(points, cam) => {
                    let (p, c) = (self.value(*points), self.value(*cam));
                    let rows = p.rows();
                    let n = p.cols() / 3;
                    let mut gp = vec![0.0; p.len()];
                    let mut gc = vec![0.0; c.len()];
                    for b in 0..rows {
                        let s = c.data()[3 * b];
                        for k in 0..n {
                            let (gx, gy) = (gd[b * 2 * n + 2 * k], gd[b * 2 * n + 2 * k + 1]);
                            let q = &p.data()[b * 3 * n + 3 * k..b * 3 * n + 3 * k + 3];
                            gp[b * 3 * n + 3 * k] = s * gx;
                            gp[b * 3 * n + 3 * k + 1] = s * gy;
                            gc[3 * b] += gx * q[0] + gy * q[1];
                            gc[3 * b + 1] += gx;
                            gc[3 * b + 2] += gy;
                        }
                    }
                    let ps = p.shape().to_vec();
                    let cs = c.shape().to_vec();
                    acc(&mut grads, *points, Tensor::from_shape(&ps, gp));
                    acc(&mut grads, *cam, Tensor::from_shape(&cs, gc));
                }
                Op::CenterRoot(points) => {
                    let p = self.value(*points);
                    let cols = p.cols();
                    let mut ga = gd.to_vec();
                    for (row, grow) in ga.chunks_exact_mut(cols).zip(gd.chunks_exact(cols)) {
                        let mut tot = [0.0; 3];
                        for q in grow.chunks_exact(3) {
                            for c in 0..3 {
                                tot[c] += q[c];
                            }
                        }
                        for c in 0..3 {
                            row[c] -= tot[c];
                        }
                    }
                    let s = p.shape().to_vec();
                    acc(&mut grads, *points, Tensor::from_shape(&s, ga));
                }
                Op::SqErr { pred, target, weights } => {
                    let p = self.value(*pred);
                    let ga: Vec<f64> = p
                        .data()
                        .iter()
                        .zip(target.data())
                        .zip(weights.data())
                        .map(|((a, b), w)| 2.0 * w * (a - b) * gd[0])
                        .collect();
                    acc(&mut grads, *pred, Tensor::from_shape(p.shape(), ga));
                }
                Op::KlStdNormal(mu, log_sigma) => {
                    let (m, l) = (self.value(*mu), self.value(*log_sigma));
                    let gm: Vec<f64> = m.data().iter().map(|m| gd[0] * m).collect();
                    let gl: Vec<f64> = l.data().iter().map(|l| gd[0] * ((2.0 * l).exp() - 1.0)).collect();
                    acc(&mut grads, *mu, Tensor::from_shape(m.shape(), gm));
                    acc(&mut grads, *log_sigma, Tensor::from_shape(l.shape(), gl));
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}
