//! Dense 2-D tensors on a reverse-mode gradient tape.
//!
//! The tape records every operation in creation order, which is already a
//! topological order (an op can only reference ids that exist). `backward`
//! walks the record in reverse and accumulates adjoints.
//!
//! Gradients accumulate across `backward` calls; call [`Tape::zero_grads`]
//! between optimizer steps. Shape mismatches and out-of-range indices are
//! programming errors and panic, mirroring `ndarray`'s own contract.

use std::sync::Arc;

use ndarray::{Array2, Axis};

mod gradcheck;
pub use gradcheck::{grad_check, GradCheckReport};

/// Dense 2-D value, 64-bit everywhere (tests require it; the desk-scale
/// trainer keeps it too).
pub type Mat = Array2<f64>;

/// Natural log of 2; cross-entropy is log-base-2.
const LN_2: f64 = std::f64::consts::LN_2;

/// Probability floor for cross-entropy log arguments.
const CE_EPS: f64 = 1e-12;

/// Handle to a tensor on a [`Tape`]. The tensor itself (shape, values,
/// gradient slot, grad flag) lives in the tape's parallel arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Add(TensorId, TensorId),
    /// Elementwise product of `a: n x c` with a `1 x c` row replicated over rows.
    MulBroadcast(TensorId, TensorId),
    /// Sum of `a: n x c` with a `1 x c` row replicated over rows.
    AddBroadcast(TensorId, TensorId),
    ConcatCols(Vec<TensorId>),
    Sigmoid(TensorId),
    Relu(TensorId),
    SoftmaxRows(TensorId),
    /// Divide each row by its sum (rows must have positive sums).
    NormalizeRows(TensorId),
    GlobalAvgPool(TensorId),
    /// Row selection; also implements nearest-neighbor upsampling.
    GatherRows(TensorId, Vec<usize>),
    /// Class-weighted cross-entropy, log base 2, summed over rows.
    /// `row_weights[j]` is the true-class weight of row j (0 for unlabeled).
    CrossEntropy {
        z: TensorId,
        targets: Mat,
        row_weights: Vec<f64>,
    },
    /// Mean over rows of the squared row-vector error.
    Mse { z: TensorId, targets: Mat },
    L2Norm(TensorId),
    Sum(TensorId),
    MulConst(TensorId, f64),
    /// Scalar division `a / b`, both 1 x 1.
    Div(TensorId, TensorId),
}

/// Reverse-mode tape. Single-writer: one forward graph per tape.
///
/// Values are reference-counted so parameter leaves shared by many
/// concurrent tapes (one per batch sample) are stored once.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Arc<Mat>>,
    ops: Vec<Op>,
    requires_grad: Vec<bool>,
    grads: Vec<Option<Mat>>,
    clamp_events: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of cross-entropy log arguments clamped to the floor so far.
    pub fn clamp_events(&self) -> u64 {
        self.clamp_events
    }

    pub fn value(&self, id: TensorId) -> &Mat {
        &self.values[id.0]
    }

    fn val(&self, i: usize) -> &Mat {
        &self.values[i]
    }

    /// Value of a 1 x 1 tensor.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        let v = &self.values[id.0];
        assert_eq!(v.dim(), (1, 1), "scalar_value on non-scalar tensor");
        v[(0, 0)]
    }

    /// Accumulated gradient, if `backward` has reached this tensor.
    pub fn grad(&self, id: TensorId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, values: Mat, op: Op, requires_grad: bool) -> TensorId {
        self.push_shared(Arc::new(values), op, requires_grad)
    }

    fn push_shared(&mut self, values: Arc<Mat>, op: Op, requires_grad: bool) -> TensorId {
        debug_assert!(
            values.iter().all(|v| v.is_finite()),
            "non-finite values out of {op:?}"
        );
        let id = TensorId(self.values.len());
        self.values.push(values);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        self.grads.push(None);
        id
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.requires_grad[id.0])
    }

    /// Insert a leaf tensor.
    pub fn leaf(&mut self, values: Mat, requires_grad: bool) -> TensorId {
        self.push(values, Op::Leaf, requires_grad)
    }

    /// Insert a leaf that shares its storage with the caller (parameter
    /// matrices bound into many tapes at once).
    pub fn leaf_shared(&mut self, values: Arc<Mat>, requires_grad: bool) -> TensorId {
        self.push_shared(values, Op::Leaf, requires_grad)
    }

    /// Leaf that never takes gradients.
    pub fn constant(&mut self, values: Mat) -> TensorId {
        self.leaf(values, false)
    }

    /// 1 x 1 constant.
    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(Mat::from_elem((1, 1), v))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (va, vb) = (self.val(a.0), self.val(b.0));
        assert_eq!(
            va.ncols(),
            vb.nrows(),
            "matmul shape mismatch: {:?} x {:?}",
            va.dim(),
            vb.dim()
        );
        let out = va.dot(vb);
        let rg = self.needs_grad(&[a, b]);
        self.push(out, Op::Matmul(a, b), rg)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (va, vb) = (self.val(a.0), self.val(b.0));
        assert_eq!(va.dim(), vb.dim(), "add shape mismatch");
        let out = va + vb;
        let rg = self.needs_grad(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    /// `a: n x c` times a `1 x c` gate row, replicated over the n rows.
    pub fn mul_broadcast(&mut self, a: TensorId, w: TensorId) -> TensorId {
        let (va, vw) = (self.val(a.0), self.val(w.0));
        assert_eq!(vw.nrows(), 1, "broadcast weight must be 1 x c");
        assert_eq!(va.ncols(), vw.ncols(), "mul_broadcast width mismatch");
        let out = va * vw;
        let rg = self.needs_grad(&[a, w]);
        self.push(out, Op::MulBroadcast(a, w), rg)
    }

    /// `a: n x c` plus a `1 x c` bias row, replicated over the n rows.
    pub fn add_broadcast(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (va, vb) = (self.val(a.0), self.val(b.0));
        assert_eq!(vb.nrows(), 1, "broadcast bias must be 1 x c");
        assert_eq!(va.ncols(), vb.ncols(), "add_broadcast width mismatch");
        let out = va + vb;
        let rg = self.needs_grad(&[a, b]);
        self.push(out, Op::AddBroadcast(a, b), rg)
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.values[parts[0].0].nrows();
        let total: usize = parts.iter().map(|p| self.values[p.0].ncols()).sum();
        let mut out = Mat::zeros((rows, total));
        let mut col = 0;
        for p in parts {
            let v = self.val(p.0);
            assert_eq!(v.nrows(), rows, "concat_cols row mismatch");
            out.slice_mut(ndarray::s![.., col..col + v.ncols()])
                .assign(v);
            col += v.ncols();
        }
        let rg = self.needs_grad(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let out = self.values[a.0].mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.requires_grad[a.0];
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let out = self.values[a.0].mapv(|x| x.max(0.0));
        let rg = self.requires_grad[a.0];
        self.push(out, Op::Relu(a), rg)
    }

    /// Row-wise softmax (max-shifted for stability); every row sums to 1.
    pub fn softmax_rows(&mut self, a: TensorId) -> TensorId {
        let mut out = self.val(a.0).clone();
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let rg = self.requires_grad[a.0];
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Divide each row by its sum. Rows must sum to something positive.
    pub fn normalize_rows(&mut self, a: TensorId) -> TensorId {
        let mut out = self.val(a.0).clone();
        for mut row in out.rows_mut() {
            let s = row.sum();
            assert!(s > 0.0, "normalize_rows: nonpositive row sum {s}");
            row.mapv_inplace(|x| x / s);
        }
        let rg = self.requires_grad[a.0];
        self.push(out, Op::NormalizeRows(a), rg)
    }

    /// Column means: `n x c` -> `1 x c`.
    pub fn global_avg_pool(&mut self, a: TensorId) -> TensorId {
        let v = &self.values[a.0];
        assert!(v.nrows() > 0, "global_avg_pool of empty tensor");
        let mean = v.mean_axis(Axis(0)).unwrap();
        let out = mean.insert_axis(Axis(0));
        let rg = self.requires_grad[a.0];
        self.push(out, Op::GlobalAvgPool(a), rg)
    }

    /// Select rows by index; gradients scatter-add back.
    pub fn gather_rows(&mut self, a: TensorId, indices: &[usize]) -> TensorId {
        let v = &self.values[a.0];
        let n = v.nrows();
        let mut out = Mat::zeros((indices.len(), v.ncols()));
        for (j, &idx) in indices.iter().enumerate() {
            assert!(idx < n, "gather_rows index {idx} out of range (rows {n})");
            out.row_mut(j).assign(&v.row(idx));
        }
        let rg = self.requires_grad[a.0];
        self.push(out, Op::GatherRows(a, indices.to_vec()), rg)
    }

    /// Copy each coarse row to every fine row whose `parent_index` points at
    /// it. Same kernel as `gather_rows`; gradients sum over children.
    pub fn nearest_upsample(&mut self, coarse: TensorId, parent_index: &[usize]) -> TensorId {
        self.gather_rows(coarse, parent_index)
    }

    /// Class-weighted cross-entropy with log base 2, summed over rows.
    ///
    /// `targets` rows are one-hot for labeled points and all-zero for
    /// unlabeled ones (which then contribute nothing). The weight applied to
    /// row j is `class_weights[true_class(j)]`. True-class probabilities at
    /// or below the floor are clamped and the event counted.
    pub fn cross_entropy(&mut self, z: TensorId, targets: &Mat, class_weights: &[f64]) -> TensorId {
        let v = &self.values[z.0];
        assert_eq!(v.dim(), targets.dim(), "cross_entropy shape mismatch");
        assert_eq!(v.ncols(), class_weights.len(), "class weight count");
        let mut row_weights = vec![0.0; v.nrows()];
        let mut loss = 0.0;
        let mut clamped = 0u64;
        for (j, (zrow, yrow)) in v.rows().into_iter().zip(targets.rows()).enumerate() {
            for (l, (&zv, &yv)) in zrow.iter().zip(yrow.iter()).enumerate() {
                if yv > 0.0 {
                    row_weights[j] = class_weights[l];
                    let p = if zv <= CE_EPS {
                        clamped += 1;
                        CE_EPS
                    } else {
                        zv
                    };
                    loss -= row_weights[j] * yv * p.log2();
                }
            }
        }
        self.clamp_events += clamped;
        let rg = self.requires_grad[z.0];
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::CrossEntropy {
                z,
                targets: targets.clone(),
                row_weights,
            },
            rg,
        )
    }

    /// `(1/n) * sum_j ||y_j - z_j||^2` over the n rows.
    pub fn mse(&mut self, z: TensorId, targets: &Mat) -> TensorId {
        let v = &self.values[z.0];
        assert_eq!(v.dim(), targets.dim(), "mse shape mismatch");
        let n = v.nrows();
        assert!(n > 0, "mse of empty tensor");
        let loss = v
            .iter()
            .zip(targets.iter())
            .map(|(&zv, &yv)| (yv - zv) * (yv - zv))
            .sum::<f64>()
            / n as f64;
        let rg = self.requires_grad[z.0];
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::Mse {
                z,
                targets: targets.clone(),
            },
            rg,
        )
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&mut self, a: TensorId) -> TensorId {
        let v = &self.values[a.0];
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rg = self.requires_grad[a.0];
        self.push(Mat::from_elem((1, 1), norm), Op::L2Norm(a), rg)
    }

    /// Sum of all entries.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s = self.values[a.0].sum();
        let rg = self.requires_grad[a.0];
        self.push(Mat::from_elem((1, 1), s), Op::Sum(a), rg)
    }

    pub fn mul_const(&mut self, a: TensorId, c: f64) -> TensorId {
        let out = self.val(a.0) * c;
        let rg = self.requires_grad[a.0];
        self.push(out, Op::MulConst(a, c), rg)
    }

    /// Scalar division `a / b` (both 1 x 1).
    pub fn div(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (va, vb) = (self.scalar_value(a), self.scalar_value(b));
        assert!(vb != 0.0, "div by zero scalar");
        let rg = self.needs_grad(&[a, b]);
        self.push(Mat::from_elem((1, 1), va / vb), Op::Div(a, b), rg)
    }

    /// Reverse-topological adjoint accumulation from a scalar loss.
    ///
    /// Gradients add into each tensor's persistent slot, so a second call
    /// without [`Tape::zero_grads`] doubles them.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(
            self.values[loss.0].dim(),
            (1, 1),
            "backward requires a scalar loss"
        );
        let n = self.values.len();
        let mut adj: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        adj[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        for i in (0..n).rev() {
            if !self.requires_grad[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            match &mut self.grads[i] {
                Some(acc) => *acc += &g,
                slot @ None => *slot = Some(g),
            }
        }
    }

    /// Add this node's input adjoints given its output adjoint `g`.
    fn propagate(&mut self, i: usize, g: &Mat, adj: &mut [Option<Mat>]) {
        let out = self.val(i);
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (va, vb) = (self.val(a.0), self.val(b.0));
                let ga = g.dot(&vb.t());
                let gb = va.t().dot(g);
                accumulate(adj, *a, ga, &self.requires_grad);
                accumulate(adj, *b, gb, &self.requires_grad);
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone(), &self.requires_grad);
                accumulate(adj, *b, g.clone(), &self.requires_grad);
            }
            Op::MulBroadcast(a, w) => {
                let (va, vw) = (self.val(a.0), self.val(w.0));
                let ga = g * vw;
                let gw = (g * va).sum_axis(Axis(0)).insert_axis(Axis(0));
                accumulate(adj, *a, ga, &self.requires_grad);
                accumulate(adj, *w, gw, &self.requires_grad);
            }
            Op::AddBroadcast(a, b) => {
                let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                accumulate(adj, *a, g.clone(), &self.requires_grad);
                accumulate(adj, *b, gb, &self.requires_grad);
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for p in parts.clone() {
                    let w = self.values[p.0].ncols();
                    let gp = g.slice(ndarray::s![.., col..col + w]).to_owned();
                    accumulate(adj, p, gp, &self.requires_grad);
                    col += w;
                }
            }
            Op::Sigmoid(a) => {
                let ga = g * &out.mapv(|s| s * (1.0 - s));
                accumulate(adj, *a, ga, &self.requires_grad);
            }
            Op::Relu(a) => {
                let va = &self.values[a.0];
                let ga = g * &va.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                accumulate(adj, *a, ga, &self.requires_grad);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = g.clone();
                for (mut grow, prow) in ga.rows_mut().into_iter().zip(out.rows()) {
                    let dot: f64 = grow.iter().zip(prow.iter()).map(|(x, p)| x * p).sum();
                    for (gv, &pv) in grow.iter_mut().zip(prow.iter()) {
                        *gv = pv * (*gv - dot);
                    }
                }
                accumulate(adj, *a, ga, &self.requires_grad);
            }
            Op::NormalizeRows(a) => {
                let va = &self.values[a.0];
                let mut ga = g.clone();
                for ((mut grow, yrow), xrow) in
                    ga.rows_mut().into_iter().zip(out.rows()).zip(va.rows())
                {
                    let s: f64 = xrow.sum();
                    let dot: f64 = grow.iter().zip(yrow.iter()).map(|(x, y)| x * y).sum();
                    for gv in grow.iter_mut() {
                        *gv = (*gv - dot) / s;
                    }
                }
                accumulate(adj, *a, ga, &self.requires_grad);
            }
            Op::GlobalAvgPool(a) => {
                let n = self.values[a.0].nrows() as f64;
                let row = g.row(0).mapv(|x| x / n);
                let ga = Mat::from_shape_fn(self.values[a.0].dim(), |(_, l)| row[l]);
                accumulate(adj, *a, ga, &self.requires_grad);
            }
            Op::GatherRows(a, indices) => {
                let mut ga = Mat::zeros(self.values[a.0].dim());
                for (j, &idx) in indices.iter().enumerate() {
                    let mut target = ga.row_mut(idx);
                    target += &g.row(j);
                }
                accumulate(adj, *a, ga, &self.requires_grad);
            }
            Op::CrossEntropy {
                z,
                targets,
                row_weights,
            } => {
                let g0 = g[(0, 0)];
                let vz = &self.values[z.0];
                let mut gz = Mat::zeros(vz.dim());
                for (j, (zrow, yrow)) in vz.rows().into_iter().zip(targets.rows()).enumerate() {
                    for (l, (&zv, &yv)) in zrow.iter().zip(yrow.iter()).enumerate() {
                        // Clamped entries sit in the flat region: zero slope.
                        if yv > 0.0 && zv > CE_EPS {
                            gz[(j, l)] = -g0 * row_weights[j] * yv / (zv * LN_2);
                        }
                    }
                }
                accumulate(adj, *z, gz, &self.requires_grad);
            }
            Op::Mse { z, targets } => {
                let g0 = g[(0, 0)];
                let vz = self.val(z.0);
                let n = vz.nrows() as f64;
                let gz = (vz - targets) * (2.0 * g0 / n);
                accumulate(adj, *z, gz, &self.requires_grad);
            }
            Op::L2Norm(a) => {
                let g0 = g[(0, 0)];
                let norm = out[(0, 0)].max(1e-12);
                let ga = self.val(a.0) * (g0 / norm);
                accumulate(adj, *a, ga, &self.requires_grad);
            }
            Op::Sum(a) => {
                let ga = Mat::from_elem(self.values[a.0].dim(), g[(0, 0)]);
                accumulate(adj, *a, ga, &self.requires_grad);
            }
            Op::MulConst(a, c) => {
                accumulate(adj, *a, g * *c, &self.requires_grad);
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.values[a.0][(0, 0)], self.values[b.0][(0, 0)]);
                let g0 = g[(0, 0)];
                let ga = Mat::from_elem((1, 1), g0 / vb);
                let gb = Mat::from_elem((1, 1), -g0 * va / (vb * vb));
                accumulate(adj, *a, ga, &self.requires_grad);
                accumulate(adj, *b, gb, &self.requires_grad);
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Mat>], id: TensorId, contribution: Mat, requires_grad: &[bool]) {
    if !requires_grad[id.0] {
        return;
    }
    match &mut adj[id.0] {
        Some(existing) => *existing += &contribution,
        slot @ None => *slot = Some(contribution),
    }
}

#[cfg(test)]
mod tests;
