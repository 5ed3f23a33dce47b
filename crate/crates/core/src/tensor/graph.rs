//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs already exist, so the tape is
//! topologically ordered by construction and [`Graph::backward`] is a single
//! reverse sweep that visits each node once.

use std::collections::HashMap;
use std::sync::Arc;

use super::gemm::{dot, matmul_into, matmul_nt_into, matmul_tn_into};
use super::loss::LossForm;
use super::optim::{BufferId, ParamId, ParamStore};
use super::{softmax_in_place, Real, Tensor};
use crate::cloud::UNLABELED;
use crate::error::{Error, Result};
use crate::exec;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Sparse point-to-kernel correlation weights for one convolution.
///
/// Row `n` lists `(support index, kernel index, h)` triples with `h > 0`.
#[derive(Clone, Debug)]
pub struct CorrTable<T> {
    rows: usize,
    kernels: usize,
    support_len: usize,
    offsets: Vec<usize>,
    entries: Vec<(u32, u32, T)>,
}

impl<T: Real> CorrTable<T> {
    /// `per_row[n]` holds the triples of center `n`.
    pub fn from_rows(per_row: Vec<Vec<(u32, u32, T)>>, kernels: usize, support_len: usize) -> Self {
        let mut offsets = Vec::with_capacity(per_row.len() + 1);
        offsets.push(0);
        let mut entries = Vec::new();
        for row in &per_row {
            entries.extend_from_slice(row);
            offsets.push(entries.len());
        }
        CorrTable {
            rows: per_row.len(),
            kernels,
            support_len,
            offsets,
            entries,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn kernels(&self) -> usize {
        self.kernels
    }

    pub fn support_len(&self) -> usize {
        self.support_len
    }

    pub fn row(&self, n: usize) -> &[(u32, u32, T)] {
        &self.entries[self.offsets[n]..self.offsets[n + 1]]
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub buffer: BufferId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    LeakyRelu(Var, T),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    SoftmaxRows(Var),
    Gather(Var, Arc<Vec<usize>>),
    ScatterMean {
        src: Var,
        group: Arc<Vec<usize>>,
        counts: Vec<usize>,
    },
    KernelAggregate(Var, Arc<CorrTable<T>>),
    EdgeMatVec(Var, Var),
    Reshape(Var),
    SumAll(Var),
    WeightedCe {
        probs: Var,
        labels: Arc<Vec<u8>>,
        weights: Vec<T>,
        form: LossForm,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// A tape of recorded operations for one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, Var)>,
    param_lookup: HashMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate<T>>,
    training: bool,
    check_finite: bool,
}

pub const LOG_EPS: f64 = 1e-12;

impl<T: Real> Graph<T> {
    pub fn new(training: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            param_lookup: HashMap::new(),
            bn_updates: Vec::new(),
            training,
            check_finite: true,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().copied()
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Loads a parameter from the store (once per graph).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_lookup.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).value.clone(),
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((id, v));
        self.param_lookup.insert(id, v);
        v
    }

    /// Makes later `param(store, id)` calls resolve to `var`.
    pub fn bind_param(&mut self, id: ParamId, var: Var) {
        self.param_lookup.insert(id, var);
        self.params.push((id, var));
    }

    fn matrix_of(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let t = &self.nodes[v.0].value;
        if !t.is_matrix() {
            return Err(Error::Shape(format!(
                "{what} expects a matrix, got {:?}",
                t.shape()
            )));
        }
        Ok((t.rows(), t.cols()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_of(a, "matmul")?;
        let (k2, n) = self.matrix_of(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_of(a, "matmul_nt")?;
        let (n, k2) = self.matrix_of(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul_nt {m}x{k} by ({n}x{k2})^T")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul_nt", Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.matrix_of(a, "transpose")?;
        let t = self.value(a).transpose();
        self.push("transpose", t, Op::Transpose(a), &[a])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-`C` bias to every row of an `N x C` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.matrix_of(x, "add_bias")?;
        if self.value(bias).len() != c {
            return Err(Error::Shape(format!(
                "bias of {} for {} columns",
                self.value(bias).len(),
                c
            )));
        }
        let mut t = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        exec::for_each_row(t.data_mut(), c, |_, row| {
            for (v, &bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        });
        self.push("add_bias", t, Op::AddBias(x, bias), &[x, bias])
    }

    /// Multiplies `x` by a one-element variable.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape("scale_by needs a one-element scale".into()));
        }
        let sv = self.value(s).item();
        let t = self.value(x).map(|v| v * sv);
        self.push("scale_by", t, Op::ScaleBy(x, s), &[x, s])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        self.push("scale", t, Op::Scale(x, c), &[x])
    }

    /// Concatenates matrices along the channel (column) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.matrix_of(p, "concat")?;
            if *rows.get_or_insert(r) != r {
                return Err(Error::Shape("concat row count mismatch".into()));
            }
            total += c;
        }
        let rows = rows.ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push("concat", Tensor::matrix(rows, total, out)?, Op::Concat(parts.to_vec()), parts)
    }

    /// Stacks matrices along the point (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut cols = None;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix_of(p, "concat_rows")?;
            if *cols.get_or_insert(c) != c {
                return Err(Error::Shape("concat_rows column mismatch".into()));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let cols = cols.ok_or_else(|| Error::Shape("concat_rows of nothing".into()))?;
        self.push(
            "concat_rows",
            Tensor::matrix(rows, cols, out)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.matrix_of(x, "slice_rows")?;
        if start > end || end > r {
            return Err(Error::Shape(format!("slice {start}..{end} of {r} rows")));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        self.push(
            "slice_rows",
            Tensor::matrix(end - start, c, data)?,
            Op::SliceRows(x, start),
            &[x],
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        let t = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { v * slope });
        self.push("leaky_relu", t, Op::LeakyRelu(x, slope), &[x])
    }

    /// Batch normalization over the point axis of an `N x C` matrix.
    ///
    /// Training graphs normalize with batch statistics and record them in
    /// [`Graph::bn_updates`]; evaluation graphs use the running buffer.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        store: &ParamStore<T>,
        buffer: BufferId,
        eps: T,
    ) -> Result<Var> {
        let (n, c) = self.matrix_of(x, "batch_norm")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Shape("batch_norm affine width".into()));
        }
        let xv = self.value(x);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        if self.training {
            let nt = T::lit(n as f64);
            let mut mean = vec![T::zero(); c];
            for i in 0..n {
                for (m, &v) in mean.iter_mut().zip(xv.row(i)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nt);
            let mut var = vec![T::zero(); c];
            for i in 0..n {
                for ((s, &v), &m) in var.iter_mut().zip(xv.row(i)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= nt);
            let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
            let mut xhat = vec![T::zero(); n * c];
            let mut out = vec![T::zero(); n * c];
            for i in 0..n {
                let row = xv.row(i);
                for j in 0..c {
                    let h = (row[j] - mean[j]) * inv_std[j];
                    xhat[i * c + j] = h;
                    out[i * c + j] = g[j] * h + b[j];
                }
            }
            self.bn_updates.push(BnUpdate {
                buffer,
                mean,
                var,
            });
            self.push(
                "batch_norm",
                Tensor::matrix(n, c, out)?,
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                },
                &[x, gamma, beta],
            )
        } else {
            let stats = store.buffer(buffer);
            let mean = stats.mean.clone();
            let inv_std: Vec<T> = stats
                .var
                .iter()
                .map(|&s| T::one() / (s + eps).sqrt())
                .collect();
            let mut out = xv.clone();
            for i in 0..n {
                let row = out.row_mut(i);
                for j in 0..c {
                    row[j] = g[j] * (row[j] - mean[j]) * inv_std[j] + b[j];
                }
            }
            self.push(
                "batch_norm",
                out,
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                },
                &[x, gamma, beta],
            )
        }
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.matrix_of(x, "softmax_rows")?;
        let mut t = self.value(x).clone();
        exec::for_each_row(t.data_mut(), c, |_, row| softmax_in_place(row));
        self.push("softmax_rows", t, Op::SoftmaxRows(x), &[x])
    }

    /// Row gather. An index equal to the source row count selects an
    /// all-zero shadow row.
    pub fn gather_rows(&mut self, src: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let (r, c) = self.matrix_of(src, "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i > r) {
            return Err(Error::Shape(format!("gather index {bad} beyond shadow row {r}")));
        }
        let sv = self.value(src);
        let mut out = vec![T::zero(); index.len() * c];
        for (o, &i) in out.chunks_mut(c.max(1)).zip(index.iter()) {
            if i < r {
                o.copy_from_slice(sv.row(i));
            }
        }
        let t = Tensor::matrix(index.len(), c, out)?;
        self.push("gather_rows", t, Op::Gather(src, index), &[src])
    }

    /// Per-group row means; empty groups yield zero rows.
    pub fn scatter_mean(&mut self, src: Var, group: Arc<Vec<usize>>, groups: usize) -> Result<Var> {
        let (r, c) = self.matrix_of(src, "scatter_mean")?;
        if group.len() != r {
            return Err(Error::Shape(format!("{} group ids for {} rows", group.len(), r)));
        }
        if let Some(&bad) = group.iter().find(|&&g| g >= groups) {
            return Err(Error::Shape(format!("group id {bad} >= {groups}")));
        }
        let mut counts = vec![0usize; groups];
        let mut out = vec![T::zero(); groups * c];
        let sv = self.value(src);
        for (i, &g) in group.iter().enumerate() {
            counts[g] += 1;
            for (o, &v) in out[g * c..(g + 1) * c].iter_mut().zip(sv.row(i)) {
                *o += v;
            }
        }
        for (g, &k) in counts.iter().enumerate() {
            if k > 0 {
                let kt = T::lit(k as f64);
                out[g * c..(g + 1) * c].iter_mut().for_each(|v| *v /= kt);
            }
        }
        let t = Tensor::matrix(groups, c, out)?;
        self.push(
            "scatter_mean",
            t,
            Op::ScatterMean { src, group, counts },
            &[src],
        )
    }

    /// `out[n, k*C + c] = sum over (j, k, h) in row n of h * src[j, c]`.
    pub fn kernel_aggregate(&mut self, src: Var, table: Arc<CorrTable<T>>) -> Result<Var> {
        let (r, c) = self.matrix_of(src, "kernel_aggregate")?;
        if r != table.support_len() {
            return Err(Error::Shape(format!(
                "kernel table expects {} support rows, got {}",
                table.support_len(),
                r
            )));
        }
        let kc = table.kernels() * c;
        let mut out = vec![T::zero(); table.rows() * kc];
        let sv = self.value(src).data();
        exec::for_each_row(&mut out, kc.max(1), |n, row| {
            for &(j, k, h) in table.row(n) {
                let f = &sv[j as usize * c..(j as usize + 1) * c];
                let o = &mut row[k as usize * c..(k as usize + 1) * c];
                for (ov, &fv) in o.iter_mut().zip(f) {
                    *ov += h * fv;
                }
            }
        });
        let t = Tensor::matrix(table.rows(), kc, out)?;
        self.push("kernel_aggregate", t, Op::KernelAggregate(src, table), &[src])
    }

    /// Per-row matrix-vector product: `mats` is `E x (C*C)` holding one
    /// row-major `C x C` matrix per row, `vecs` is `E x C`.
    pub fn edge_matvec(&mut self, mats: Var, vecs: Var) -> Result<Var> {
        let (e, cc) = self.matrix_of(mats, "edge_matvec")?;
        let (e2, c) = self.matrix_of(vecs, "edge_matvec")?;
        if e != e2 || cc != c * c {
            return Err(Error::Shape(format!(
                "edge_matvec {e}x{cc} with {e2}x{c}"
            )));
        }
        let m = self.value(mats).data();
        let v = self.value(vecs).data();
        let mut out = vec![T::zero(); e * c];
        exec::for_each_row(&mut out, c.max(1), |i, row| {
            let vi = &v[i * c..(i + 1) * c];
            for (r, o) in row.iter_mut().enumerate() {
                let mrow = &m[i * cc + r * c..i * cc + (r + 1) * c];
                *o = dot(mrow, vi);
            }
        });
        let t = Tensor::matrix(e, c, out)?;
        self.push("edge_matvec", t, Op::EdgeMatVec(mats, vecs), &[mats, vecs])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Weighted cross-entropy on class probabilities, averaged over the
    /// labeled rows. Rows labeled [`UNLABELED`] are ignored.
    pub fn weighted_cross_entropy(
        &mut self,
        probs: Var,
        labels: Arc<Vec<u8>>,
        weights: &[T],
        form: LossForm,
    ) -> Result<Var> {
        let (n, c) = self.matrix_of(probs, "weighted_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), n)));
        }
        if weights.len() != c {
            return Err(Error::Shape(format!("{} weights for {} classes", weights.len(), c)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != UNLABELED && l as usize >= c) {
            return Err(Error::InvalidArgument(format!("label {bad} >= {c} classes")));
        }
        let eps = T::lit(LOG_EPS);
        let pv = self.value(probs);
        let mut total = T::zero();
        let mut count = 0usize;
        let mut clamped = 0usize;
        for (i, &l) in labels.iter().enumerate() {
            if l == UNLABELED {
                continue;
            }
            count += 1;
            let row = pv.row(i);
            match form {
                LossForm::Categorical => {
                    let p = row[l as usize];
                    if p < eps {
                        clamped += 1;
                    }
                    total -= weights[l as usize] * p.max(eps).ln();
                }
                LossForm::PerClassBinary => {
                    for (k, &p) in row.iter().enumerate() {
                        let q = if k == l as usize { p } else { T::one() - p };
                        if q < eps {
                            clamped += 1;
                        }
                        total -= weights[k] * q.max(eps).ln();
                    }
                }
            }
        }
        if clamped > 0 {
            log::warn!("cross-entropy clamped {clamped} probabilities at {LOG_EPS:e}");
        }
        let loss = if count > 0 {
            total / T::lit(count as f64)
        } else {
            T::zero()
        };
        self.push(
            "weighted_cross_entropy",
            Tensor::scalar(loss),
            Op::WeightedCe {
                probs,
                labels,
                weights: weights.to_vec(),
                form,
                count,
            },
            &[probs],
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.value(out).len() != 1 {
            return Err(Error::Shape("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), T::one()));
        for idx in (0..=out.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backprop_node(node, &gout, &mut grads);
            }
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut Tensor<T>)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, node: &Node<T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_nt_into(gout.data(), self.value(*b).data(), &mut da, m, n, k);
                    self.acc(grads, *a, Tensor::matrix(m, k, da).unwrap());
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    matmul_tn_into(self.value(*a).data(), gout.data(), &mut db, m, k, n);
                    self.acc(grads, *b, Tensor::matrix(k, n, db).unwrap());
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                if needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_into(gout.data(), self.value(*b).data(), &mut da, m, n, k);
                    self.acc(grads, *a, Tensor::matrix(m, k, da).unwrap());
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); n * k];
                    matmul_tn_into(gout.data(), self.value(*a).data(), &mut db, m, n, k);
                    self.acc(grads, *b, Tensor::matrix(n, k, db).unwrap());
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, gout.transpose()),
            Op::Add(a, b) => {
                self.acc(grads, *a, gout.clone());
                self.acc(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gout.clone());
                self.acc(grads, *b, gout.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let t = self.zip_grad(gout, self.value(*b), |g, y| g * y);
                    self.acc(grads, *a, t);
                }
                if needs(*b) {
                    let t = self.zip_grad(gout, self.value(*a), |g, x| g * x);
                    self.acc(grads, *b, t);
                }
            }
            Op::AddBias(x, bias) => {
                self.acc(grads, *x, gout.clone());
                if needs(*bias) {
                    let c = gout.cols();
                    let mut db = vec![T::zero(); c];
                    for i in 0..gout.rows() {
                        for (d, &g) in db.iter_mut().zip(gout.row(i)) {
                            *d += g;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.acc(grads, *bias, Tensor::new(shape, db).unwrap());
                }
            }
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).item();
                if needs(*x) {
                    self.acc(grads, *x, gout.map(|g| g * sv));
                }
                if needs(*s) {
                    let d = dot(gout.data(), self.value(*x).data());
                    let shape = self.value(*s).shape().to_vec();
                    self.acc(grads, *s, Tensor::new(shape, vec![d]).unwrap());
                }
            }
            Op::Scale(x, c) => self.acc(grads, *x, gout.map(|g| g * *c)),
            Op::Concat(parts) => {
                let rows = gout.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if needs(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            d.extend_from_slice(&gout.row(i)[offset..offset + c]);
                        }
                        self.acc(grads, p, Tensor::matrix(rows, c, d).unwrap());
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let c = gout.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if needs(p) {
                        let d = gout.data()[offset * c..(offset + r) * c].to_vec();
                        self.acc(grads, p, Tensor::matrix(r, c, d).unwrap());
                    }
                    offset += r;
                }
            }
            Op::SliceRows(x, start) => {
                let c = gout.cols();
                let start = *start;
                self.acc_with(grads, *x, |d| {
                    for (o, &g) in d.data_mut()[start * c..].iter_mut().zip(gout.data()) {
                        *o += g;
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let t = self.zip_grad(gout, self.value(*x), |g, v| {
                    if v > T::zero() {
                        g
                    } else {
                        g * *slope
                    }
                });
                self.acc(grads, *x, t);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c) = (gout.rows(), gout.cols());
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    let row = gout.row(i);
                    for j in 0..c {
                        dbeta[j] += row[j];
                        dgamma[j] += row[j] * xhat[i * c + j];
                    }
                }
                if needs(*x) {
                    // dx = inv_std / n * (n * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
                    let nt = T::lit(n as f64);
                    let mut dx = vec![T::zero(); n * c];
                    for i in 0..n {
                        let row = gout.row(i);
                        for j in 0..c {
                            let dxhat = row[j] * g[j];
                            let sum_d = dbeta[j] * g[j];
                            let sum_dx = dgamma[j] * g[j];
                            dx[i * c + j] =
                                inv_std[j] / nt * (nt * dxhat - sum_d - xhat[i * c + j] * sum_dx);
                        }
                    }
                    self.acc(grads, *x, Tensor::matrix(n, c, dx).unwrap());
                }
                let gshape = self.value(*gamma).shape().to_vec();
                let bshape = self.value(*beta).shape().to_vec();
                self.acc(grads, *gamma, Tensor::new(gshape, dgamma).unwrap());
                self.acc(grads, *beta, Tensor::new(bshape, dbeta).unwrap());
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (n, c) = (gout.rows(), gout.cols());
                let g = self.value(*gamma).data();
                let xv = self.value(*x);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); n * c];
                for i in 0..n {
                    let row = gout.row(i);
                    let xr = xv.row(i);
                    for j in 0..c {
                        dbeta[j] += row[j];
                        dgamma[j] += row[j] * (xr[j] - mean[j]) * inv_std[j];
                        dx[i * c + j] = row[j] * g[j] * inv_std[j];
                    }
                }
                self.acc(grads, *x, Tensor::matrix(n, c, dx).unwrap());
                let gshape = self.value(*gamma).shape().to_vec();
                let bshape = self.value(*beta).shape().to_vec();
                self.acc(grads, *gamma, Tensor::new(gshape, dgamma).unwrap());
                self.acc(grads, *beta, Tensor::new(bshape, dbeta).unwrap());
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = gout.clone();
                exec::for_each_row(dx.data_mut(), c.max(1), |i, row| {
                    let yr = y.row(i);
                    let s = dot(row, yr);
                    for (d, &yv) in row.iter_mut().zip(yr) {
                        *d = yv * (*d - s);
                    }
                });
                self.acc(grads, *x, dx);
            }
            Op::Gather(src, index) => {
                let r = self.value(*src).rows();
                let c = gout.cols();
                self.acc_with(grads, *src, |d| {
                    let dd = d.data_mut();
                    for (o, &i) in index.iter().enumerate() {
                        if i < r {
                            for (t, &g) in dd[i * c..(i + 1) * c].iter_mut().zip(gout.row(o)) {
                                *t += g;
                            }
                        }
                    }
                });
            }
            Op::ScatterMean { src, group, counts } => {
                let c = gout.cols();
                let r = group.len();
                let mut d = vec![T::zero(); r * c];
                for (i, &g) in group.iter().enumerate() {
                    let kt = T::lit(counts[g] as f64);
                    for (t, &gv) in d[i * c..(i + 1) * c].iter_mut().zip(gout.row(g)) {
                        *t = gv / kt;
                    }
                }
                self.acc(grads, *src, Tensor::matrix(r, c, d).unwrap());
            }
            Op::KernelAggregate(src, table) => {
                let c = self.value(*src).cols();
                let kc = gout.cols();
                self.acc_with(grads, *src, |d| {
                    let dd = d.data_mut();
                    let go = gout.data();
                    for n in 0..table.rows() {
                        let grow = &go[n * kc..(n + 1) * kc];
                        for &(j, k, h) in table.row(n) {
                            let g = &grow[k as usize * c..(k as usize + 1) * c];
                            let t = &mut dd[j as usize * c..(j as usize + 1) * c];
                            for (tv, &gv) in t.iter_mut().zip(g) {
                                *tv += h * gv;
                            }
                        }
                    }
                });
            }
            Op::EdgeMatVec(mats, vecs) => {
                let c = gout.cols();
                let e = gout.rows();
                let cc = c * c;
                let m = self.value(*mats).data();
                let v = self.value(*vecs).data();
                if needs(*mats) {
                    let mut dm = vec![T::zero(); e * cc];
                    exec::for_each_row(&mut dm, cc.max(1), |i, row| {
                        let vi = &v[i * c..(i + 1) * c];
                        for r in 0..c {
                            let g = gout.data()[i * c + r];
                            for (t, &x) in row[r * c..(r + 1) * c].iter_mut().zip(vi) {
                                *t = g * x;
                            }
                        }
                    });
                    self.acc(grads, *mats, Tensor::matrix(e, cc, dm).unwrap());
                }
                if needs(*vecs) {
                    let mut dv = vec![T::zero(); e * c];
                    exec::for_each_row(&mut dv, c.max(1), |i, row| {
                        for r in 0..c {
                            let g = gout.data()[i * c + r];
                            let mrow = &m[i * cc + r * c..i * cc + (r + 1) * c];
                            for (t, &x) in row.iter_mut().zip(mrow) {
                                *t += g * x;
                            }
                        }
                    });
                    self.acc(grads, *vecs, Tensor::matrix(e, c, dv).unwrap());
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, gout.clone().reshape(shape).unwrap());
            }
            Op::SumAll(x) => {
                let g = gout.item();
                self.acc(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::WeightedCe {
                probs,
                labels,
                weights,
                form,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let eps = T::lit(LOG_EPS);
                let scale = gout.item() / T::lit(*count as f64);
                let pv = self.value(*probs);
                let c = pv.cols();
                let mut d = vec![T::zero(); pv.len()];
                for (i, &l) in labels.iter().enumerate() {
                    if l == UNLABELED {
                        continue;
                    }
                    let row = pv.row(i);
                    match form {
                        LossForm::Categorical => {
                            let p = row[l as usize];
                            if p >= eps {
                                d[i * c + l as usize] = -scale * weights[l as usize] / p;
                            }
                        }
                        LossForm::PerClassBinary => {
                            for (k, &p) in row.iter().enumerate() {
                                if k == l as usize {
                                    if p >= eps {
                                        d[i * c + k] = -scale * weights[k] / p;
                                    }
                                } else if T::one() - p >= eps {
                                    d[i * c + k] = scale * weights[k] / (T::one() - p);
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *probs, Tensor::new(pv.shape().to_vec(), d).unwrap());
            }
        }
    }

    fn zip_grad(&self, g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Tensor::new(g.shape().to_vec(), data).unwrap()
    }
}
