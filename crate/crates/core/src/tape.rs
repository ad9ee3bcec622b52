//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Tape`] records the forward computation as a flat list of nodes; calling
//! [`Tape::backward`] walks the list in reverse and accumulates gradients for
//! every node. Parameters enter as leaves, so their gradients come back by
//! leaf index. Everything is f64 and single-threaded, which keeps runs
//! bit-reproducible and finite-difference checks tight.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a (m x k) times b-transposed (n x k) -> m x n.
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Broadcast-add a 1 x n row onto every row of an m x n tensor.
    AddRow(Var, Var),
    /// y = k*x + c elementwise; only the slope matters going backward.
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
        len: usize,
    },
    MeanRows(Var),
    Dot(Var, Var),
    Cosine(Var, Var),
    /// Eq.-style contrastive loss over positive/negative similarity rows.
    Contrastive {
        pos: Var,
        neg: Var,
        tau: f64,
    },
    /// Mean cross-entropy over the active rows of a logits matrix.
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        active: Vec<bool>,
    },
    /// x with `u` (1 x n) added to the listed rows. No-op (bitwise identity)
    /// when u is exactly zero.
    AddAtRows {
        x: Var,
        u: Var,
        rows: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let v = Tensor::from_vec(ta.rows(), ta.cols(), data);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let v = Tensor::from_vec(ta.rows(), ta.cols(), data);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::from_vec(ta.rows(), ta.cols(), data);
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.rows(), 1, "add_row wants a 1 x n row");
        assert_eq!(ta.cols(), tr.cols(), "add_row width mismatch");
        let mut v = ta.clone();
        for r in 0..v.rows() {
            let rowslice = v.row_mut(r);
            for (x, y) in rowslice.iter_mut().zip(tr.data()) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn affine(&mut self, a: Var, k: f64, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| k * x + c).collect();
        let v = Tensor::from_vec(ta.rows(), ta.cols(), data);
        self.push(v, Op::Affine(a, k))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.affine(a, k, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let v = Tensor::from_vec(ta.rows(), ta.cols(), data);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.tanh()).collect();
        let v = Tensor::from_vec(ta.rows(), ta.cols(), data);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.max(0.0)).collect();
        let v = Tensor::from_vec(ta.rows(), ta.cols(), data);
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut v = ta.clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        assert_eq!(tg.rows(), 1);
        assert_eq!(tb.rows(), 1);
        assert_eq!(tx.cols(), tg.cols());
        assert_eq!(tx.cols(), tb.cols());
        let n = tx.cols();
        let mut v = Tensor::zeros(tx.rows(), n);
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..n {
                let xhat = (row[c] - mean) * inv;
                v.set(r, c, tg.get(0, c) * xhat + tb.get(0, c));
            }
        }
        self.push(v, Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tt = self.value(table);
        let mut v = Tensor::zeros(ids.len(), tt.cols());
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < tt.rows(), "gather id out of range");
            v.row_mut(r).copy_from_slice(tt.row(id));
        }
        self.push(
            v,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut v = Tensor::zeros(rows, total);
        for r in 0..rows {
            let mut at = 0;
            for p in parts {
                let tp = self.value(*p);
                assert_eq!(tp.rows(), rows, "concat_cols row mismatch");
                v.row_mut(r)[at..at + tp.cols()].copy_from_slice(tp.row(r));
                at += tp.cols();
            }
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|p| self.value(*p).rows()).sum();
        let mut v = Tensor::zeros(total, cols);
        let mut at = 0;
        for p in parts {
            let tp = self.value(*p);
            assert_eq!(tp.cols(), cols, "concat_rows col mismatch");
            for r in 0..tp.rows() {
                v.row_mut(at + r).copy_from_slice(tp.row(r));
            }
            at += tp.rows();
        }
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        assert!(start + len <= tx.rows(), "slice_rows out of range");
        let mut v = Tensor::zeros(len, tx.cols());
        for r in 0..len {
            v.row_mut(r).copy_from_slice(tx.row(start + r));
        }
        self.push(v, Op::SliceRows { x, start, len })
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        assert!(tx.rows() > 0, "mean_rows over empty tensor");
        let mut v = Tensor::zeros(1, tx.cols());
        for r in 0..tx.rows() {
            for (o, a) in v.row_mut(0).iter_mut().zip(tx.row(r)) {
                *o += a;
            }
        }
        let inv = 1.0 / tx.rows() as f64;
        for o in v.data_mut() {
            *o *= inv;
        }
        self.push(v, Op::MeanRows(x))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape());
        assert_eq!(ta.rows(), 1, "dot wants 1 x n vectors");
        let s = crate::tensor::dot(ta.data(), tb.data());
        self.push(Tensor::scalar(s), Op::Dot(a, b))
    }

    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape());
        assert_eq!(ta.rows(), 1, "cosine wants 1 x n vectors");
        let na = crate::tensor::norm(ta.data());
        let nb = crate::tensor::norm(tb.data());
        // degenerate inputs (zero or non-finite norms) surface as NaN so the
        // training loop's divergence detector reports them instead of a panic
        let c = if na > 0.0 && nb > 0.0 && na.is_finite() && nb.is_finite() {
            crate::tensor::dot(ta.data(), tb.data()) / (na * nb)
        } else {
            f64::NAN
        };
        self.push(Tensor::scalar(c), Op::Cosine(a, b))
    }

    /// Loss over one query's positive/negative similarity rows (both 1 x C):
    /// -log( sum_c e^{pos_c/tau} / sum_c (e^{pos_c/tau} + e^{neg_c/tau}) ),
    /// evaluated via log-sum-exp.
    pub fn contrastive(&mut self, pos: Var, neg: Var, tau: f64) -> Var {
        let (tp, tn) = (self.value(pos), self.value(neg));
        assert_eq!(tp.shape(), tn.shape(), "pos/neg count mismatch");
        assert!(tp.rows() == 1 && tp.cols() >= 1);
        assert!(tau > 0.0, "tau must be positive");
        let loss = contrastive_loss_value(tp.data(), tn.data(), tau);
        self.push(Tensor::scalar(loss), Op::Contrastive { pos, neg, tau })
    }

    /// Mean of -log softmax(logits_r)[targets_r] over rows with active_r.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize], active: &[bool]) -> Var {
        let tl = self.value(logits);
        assert_eq!(tl.rows(), targets.len());
        assert_eq!(tl.rows(), active.len());
        let n_active = active.iter().filter(|a| **a).count();
        assert!(n_active > 0, "cross entropy with no active rows");
        let mut total = 0.0;
        for r in 0..tl.rows() {
            if !active[r] {
                continue;
            }
            total += -log_softmax_at(tl.row(r), targets[r]);
        }
        let loss = total / n_active as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                active: active.to_vec(),
            },
        )
    }

    /// Rows of `x` listed in `rows` gain `+u`. If u is exactly zero the input
    /// is passed through bit-identical (so a zero fact vector cannot perturb
    /// signed zeros).
    pub fn add_at_rows(&mut self, x: Var, u: Var, rows: &[usize]) -> Var {
        let (tx, tu) = (self.value(x), self.value(u));
        assert_eq!(tu.rows(), 1, "add_at_rows wants a 1 x n vector");
        assert_eq!(tu.cols(), tx.cols(), "add_at_rows width mismatch");
        let mut v = tx.clone();
        if tu.data().iter().any(|&a| a != 0.0) {
            for &r in rows {
                for (o, a) in v.row_mut(r).iter_mut().zip(tu.data()) {
                    *o += a;
                }
            }
        }
        self.push(
            v,
            Op::AddAtRows {
                x,
                u,
                rows: rows.to_vec(),
            },
        )
    }

    /// Gradients of `loss` (a 1x1 node) with respect to every node. Index the
    /// result by the `Var`s you kept.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let g_out = match &grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g_out.matmul_nt(self.value(*b));
                    let db = self.value(*a).matmul_tn(&g_out);
                    accumulate(&mut grads, *a, da, self);
                    accumulate(&mut grads, *b, db, self);
                }
                Op::MatMulNT(a, b) => {
                    // y = a b^T : da = g b ; db = g^T a
                    let da = g_out.matmul(self.value(*b));
                    let db = g_out.matmul_tn(self.value(*a));
                    accumulate(&mut grads, *a, da, self);
                    accumulate(&mut grads, *b, db, self);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g_out.clone(), self);
                    accumulate(&mut grads, *b, g_out, self);
                }
                Op::Sub(a, b) => {
                    let mut db = g_out.clone();
                    db.scale_assign(-1.0);
                    accumulate(&mut grads, *a, g_out, self);
                    accumulate(&mut grads, *b, db, self);
                }
                Op::Mul(a, b) => {
                    let ta = self.value(*a);
                    let tb = self.value(*b);
                    let da = Tensor::from_vec(
                        ta.rows(),
                        ta.cols(),
                        g_out.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect(),
                    );
                    let db = Tensor::from_vec(
                        tb.rows(),
                        tb.cols(),
                        g_out.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect(),
                    );
                    accumulate(&mut grads, *a, da, self);
                    accumulate(&mut grads, *b, db, self);
                }
                Op::AddRow(a, row) => {
                    let tr = self.value(*row);
                    let mut drow = Tensor::zeros(1, tr.cols());
                    for r in 0..g_out.rows() {
                        for (o, g) in drow.row_mut(0).iter_mut().zip(g_out.row(r)) {
                            *o += g;
                        }
                    }
                    accumulate(&mut grads, *a, g_out, self);
                    accumulate(&mut grads, *row, drow, self);
                }
                Op::Affine(a, k) => {
                    let mut da = g_out;
                    da.scale_assign(*k);
                    accumulate(&mut grads, *a, da, self);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let da = Tensor::from_vec(
                        y.rows(),
                        y.cols(),
                        g_out
                            .data()
                            .iter()
                            .zip(y.data())
                            .map(|(g, s)| g * s * (1.0 - s))
                            .collect(),
                    );
                    accumulate(&mut grads, *a, da, self);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let da = Tensor::from_vec(
                        y.rows(),
                        y.cols(),
                        g_out
                            .data()
                            .iter()
                            .zip(y.data())
                            .map(|(g, t)| g * (1.0 - t * t))
                            .collect(),
                    );
                    accumulate(&mut grads, *a, da, self);
                }
                Op::Relu(a) => {
                    let y = &node.value;
                    let da = Tensor::from_vec(
                        y.rows(),
                        y.cols(),
                        g_out
                            .data()
                            .iter()
                            .zip(y.data())
                            .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                            .collect(),
                    );
                    accumulate(&mut grads, *a, da, self);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g_out.row(r);
                        let s: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for c in 0..y.cols() {
                            da.set(r, c, yr[c] * (gr[c] - s));
                        }
                    }
                    accumulate(&mut grads, *a, da, self);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let tx = self.value(*x);
                    let tg = self.value(*gain);
                    let n = tx.cols();
                    let mut dx = Tensor::zeros(tx.rows(), n);
                    let mut dg = Tensor::zeros(1, n);
                    let mut db = Tensor::zeros(1, n);
                    for r in 0..tx.rows() {
                        let row = tx.row(r);
                        let gr = g_out.row(r);
                        let mean = row.iter().sum::<f64>() / n as f64;
                        let var =
                            row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        // xhat_c = (x_c - mean) * inv ; dy/dxhat = gain
                        let dxhat: Vec<f64> =
                            (0..n).map(|c| gr[c] * tg.get(0, c)).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 = (0..n)
                            .map(|c| dxhat[c] * (row[c] - mean) * inv)
                            .sum();
                        for c in 0..n {
                            let xhat = (row[c] - mean) * inv;
                            let d = inv / n as f64
                                * (n as f64 * dxhat[c] - sum_dxhat - xhat * sum_dxhat_xhat);
                            dx.set(r, c, d);
                            dg.set(0, c, dg.get(0, c) + gr[c] * xhat);
                            db.set(0, c, db.get(0, c) + gr[c]);
                        }
                    }
                    accumulate(&mut grads, *x, dx, self);
                    accumulate(&mut grads, *gain, dg, self);
                    accumulate(&mut grads, *bias, db, self);
                }
                Op::GatherRows { table, ids } => {
                    let tt = self.value(*table);
                    let mut dt = Tensor::zeros(tt.rows(), tt.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, g) in dt.row_mut(id).iter_mut().zip(g_out.row(r)) {
                            *o += g;
                        }
                    }
                    accumulate(&mut grads, *table, dt, self);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let tp = self.value(*p);
                        let mut dp = Tensor::zeros(tp.rows(), tp.cols());
                        for r in 0..tp.rows() {
                            dp.row_mut(r)
                                .copy_from_slice(&g_out.row(r)[at..at + tp.cols()]);
                        }
                        at += tp.cols();
                        accumulate(&mut grads, *p, dp, self);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let tp = self.value(*p);
                        let mut dp = Tensor::zeros(tp.rows(), tp.cols());
                        for r in 0..tp.rows() {
                            dp.row_mut(r).copy_from_slice(g_out.row(at + r));
                        }
                        at += tp.rows();
                        accumulate(&mut grads, *p, dp, self);
                    }
                }
                Op::SliceRows { x, start, len } => {
                    let tx = self.value(*x);
                    let mut dx = Tensor::zeros(tx.rows(), tx.cols());
                    for r in 0..*len {
                        dx.row_mut(start + r).copy_from_slice(g_out.row(r));
                    }
                    accumulate(&mut grads, *x, dx, self);
                }
                Op::MeanRows(x) => {
                    let tx = self.value(*x);
                    let inv = 1.0 / tx.rows() as f64;
                    let mut dx = Tensor::zeros(tx.rows(), tx.cols());
                    for r in 0..tx.rows() {
                        for (o, g) in dx.row_mut(r).iter_mut().zip(g_out.row(0)) {
                            *o = g * inv;
                        }
                    }
                    accumulate(&mut grads, *x, dx, self);
                }
                Op::Dot(a, b) => {
                    let g = g_out.item();
                    let ta = self.value(*a);
                    let tb = self.value(*b);
                    let da = Tensor::from_vec(
                        1,
                        ta.cols(),
                        tb.data().iter().map(|y| g * y).collect(),
                    );
                    let db = Tensor::from_vec(
                        1,
                        tb.cols(),
                        ta.data().iter().map(|x| g * x).collect(),
                    );
                    accumulate(&mut grads, *a, da, self);
                    accumulate(&mut grads, *b, db, self);
                }
                Op::Cosine(a, b) => {
                    let g = g_out.item();
                    let ta = self.value(*a);
                    let tb = self.value(*b);
                    let na = crate::tensor::norm(ta.data());
                    let nb = crate::tensor::norm(tb.data());
                    let c = node.value.item();
                    let da = Tensor::from_vec(
                        1,
                        ta.cols(),
                        ta.data()
                            .iter()
                            .zip(tb.data())
                            .map(|(u, v)| g * (v / (na * nb) - c * u / (na * na)))
                            .collect(),
                    );
                    let db = Tensor::from_vec(
                        1,
                        tb.cols(),
                        ta.data()
                            .iter()
                            .zip(tb.data())
                            .map(|(u, v)| g * (u / (na * nb) - c * v / (nb * nb)))
                            .collect(),
                    );
                    accumulate(&mut grads, *a, da, self);
                    accumulate(&mut grads, *b, db, self);
                }
                Op::Contrastive { pos, neg, tau } => {
                    let g = g_out.item();
                    let tp = self.value(*pos);
                    let tn = self.value(*neg);
                    let (dp, dn) = contrastive_loss_grads(tp.data(), tn.data(), *tau);
                    let dp =
                        Tensor::from_vec(1, tp.cols(), dp.iter().map(|d| g * d).collect());
                    let dn =
                        Tensor::from_vec(1, tn.cols(), dn.iter().map(|d| g * d).collect());
                    accumulate(&mut grads, *pos, dp, self);
                    accumulate(&mut grads, *neg, dn, self);
                }
                Op::CrossEntropyRows {
                    logits,
                    targets,
                    active,
                } => {
                    let g = g_out.item();
                    let tl = self.value(*logits);
                    let n_active = active.iter().filter(|a| **a).count() as f64;
                    let mut dl = Tensor::zeros(tl.rows(), tl.cols());
                    for r in 0..tl.rows() {
                        if !active[r] {
                            continue;
                        }
                        let mut probs = tl.row(r).to_vec();
                        softmax_in_place(&mut probs);
                        for c in 0..tl.cols() {
                            let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                            dl.set(r, c, g * (probs[c] - onehot) / n_active);
                        }
                    }
                    accumulate(&mut grads, *logits, dl, self);
                }
                Op::AddAtRows { x, u, rows } => {
                    let tu = self.value(*u);
                    let mut du = Tensor::zeros(1, tu.cols());
                    for &r in rows {
                        for (o, g) in du.row_mut(0).iter_mut().zip(g_out.row(r)) {
                            *o += g;
                        }
                    }
                    accumulate(&mut grads, *x, g_out, self);
                    accumulate(&mut grads, *u, du, self);
                }
            }
        }
        Grads { grads }
    }
}

pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient for a node; zero tensor if the node never received one.
    pub fn get(&self, v: Var, tape: &Tape) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let t = tape.value(v);
                Tensor::zeros(t.rows(), t.cols())
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor, tape: &Tape) {
    debug_assert_eq!(tape.value(v).shape(), g.shape(), "gradient shape mismatch");
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Numerically-stable softmax of a slice, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// log softmax(row)[idx] without materializing the full softmax.
pub fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row[idx] - lse
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Stable value of the contrastive loss: lse_all - lse_pos.
pub fn contrastive_loss_value(pos: &[f64], neg: &[f64], tau: f64) -> f64 {
    let lse_pos = log_sum_exp(pos.iter().map(|p| p / tau));
    let lse_all = log_sum_exp(pos.iter().chain(neg).map(|p| p / tau));
    lse_all - lse_pos
}

fn contrastive_loss_grads(pos: &[f64], neg: &[f64], tau: f64) -> (Vec<f64>, Vec<f64>) {
    let lse_pos = log_sum_exp(pos.iter().map(|p| p / tau));
    let lse_all = log_sum_exp(pos.iter().chain(neg).map(|p| p / tau));
    let dp: Vec<f64> = pos
        .iter()
        .map(|p| ((p / tau - lse_all).exp() - (p / tau - lse_pos).exp()) / tau)
        .collect();
    let dn: Vec<f64> = neg.iter().map(|n| (n / tau - lse_all).exp() / tau).collect();
    (dp, dn)
}
