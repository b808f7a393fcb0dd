//! Define-by-run reverse-mode automatic differentiation.
//!
//! A `Graph` is a tape of operation records built eagerly: every builder
//! method runs the forward computation immediately, validates shapes, checks
//! the result for non-finite values, and appends a node. `backward` replays
//! the tape in reverse to accumulate adjoints, returning gradients for all
//! parameter nodes plus any explicitly tapped intermediates (the mechanism
//! used to read the reward gradient at the embedding output).
//!
//! Graphs are rebuilt per batch and are single-threaded; parameters live
//! outside the graph and are registered as leaf nodes each time.

use thiserror::Error;

use crate::tensor::{gemm, Tensor};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("backward output must be a scalar node, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("tap node {0} is not in the graph")]
    BadTap(usize),
    #[error("index {index} out of range {bound} in {op}")]
    IndexRange { op: &'static str, index: usize, bound: usize },
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Handle to a node in one specific `Graph`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug)]
enum OpKind {
    Param,
    Const,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Matmul,
    Transpose,
    Elu,
    Sigmoid,
    Relu,
    Softplus,
    Log,
    Exp,
    Sum,
    Mean,
    RowSum,
    AddBias,
    SoftmaxT(f64),
    LogSoftmaxT(f64),
    GatherRows(Vec<usize>),
    SelectPerRow(Vec<usize>),
    StopGradient,
    Reshape,
    MaskTime(Vec<usize>),
    Conv1dSame { lengths: Vec<usize> },
    MeanPool2 { lengths: Vec<usize> },
    GlobalMeanPool { lengths: Vec<usize> },
    /// Forward value is u^T W v with the converged power-iteration vectors
    /// held as constants; gradient w.r.t. W is the outer product u v^T.
    SpectralNorm { u: Vec<f64>, v: Vec<f64>, zero: bool },
    StackTime,
}

struct Node {
    op: OpKind,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients keyed by node id, produced by `Graph::backward`.
pub struct GradientMap {
    grads: std::collections::HashMap<usize, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id.0)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id.0)
    }

    /// Gradient for `id`, or zeros of the given shape if no path reached it.
    pub fn take_or_zeros(&mut self, id: NodeId, shape: &[usize]) -> Tensor {
        self.grads
            .remove(&id.0)
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn ensure_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(GraphError::NonFinite { op })
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: OpKind, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let requires_grad = match op {
            OpKind::Param => true,
            OpKind::Const => false,
            OpKind::StopGradient => false,
            OpKind::SpectralNorm { zero, .. } => {
                !zero && inputs.iter().any(|i| self.nodes[i.0].requires_grad)
            }
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node { op, inputs, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(OpKind::Param, vec![], value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(OpKind::Const, vec![], value)
    }

    // ── Elementwise binary ───────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(GraphError::Shape {
                op,
                detail: format!(
                    "{:?} vs {:?}",
                    self.nodes[a.0].value.shape(),
                    self.nodes[b.0].value.shape()
                ),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x + y);
        ensure_finite("add", &v)?;
        Ok(self.push(OpKind::Add, vec![a, b], v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x - y);
        ensure_finite("sub", &v)?;
        Ok(self.push(OpKind::Sub, vec![a, b], v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x * y);
        ensure_finite("mul", &v)?;
        Ok(self.push(OpKind::Mul, vec![a, b], v))
    }

    // ── Elementwise unary ────────────────────────────────────────────

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.nodes[a.0].value.map(|x| c * x);
        ensure_finite("scale", &v)?;
        Ok(self.push(OpKind::Scale(c), vec![a], v))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.nodes[a.0].value.map(|x| x + c);
        ensure_finite("add_scalar", &v)?;
        Ok(self.push(OpKind::AddScalar, vec![a], v))
    }

    pub fn elu(&mut self, a: NodeId) -> Result<NodeId> {
        // alpha = 1
        let v = self.nodes[a.0].value.map(|x| if x > 0.0 { x } else { x.exp() - 1.0 });
        ensure_finite("elu", &v)?;
        Ok(self.push(OpKind::Elu, vec![a], v))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        ensure_finite("sigmoid", &v)?;
        Ok(self.push(OpKind::Sigmoid, vec![a], v))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.map(|x| x.max(0.0));
        Ok(self.push(OpKind::Relu, vec![a], v))
    }

    /// Numerically stable log(1 + exp(x)).
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        ensure_finite("softplus", &v)?;
        Ok(self.push(OpKind::Softplus, vec![a], v))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].value.data().iter().any(|&x| x <= 0.0) {
            return Err(GraphError::Domain {
                op: "log",
                detail: "non-positive input".into(),
            });
        }
        let v = self.nodes[a.0].value.map(f64::ln);
        ensure_finite("log", &v)?;
        Ok(self.push(OpKind::Log, vec![a], v))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.map(f64::exp);
        ensure_finite("exp", &v)?;
        Ok(self.push(OpKind::Exp, vec![a], v))
    }

    /// Composed tanh: 2*sigmoid(2x) - 1.
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let two_x = self.scale(a, 2.0)?;
        let s = self.sigmoid(two_x)?;
        let two_s = self.scale(s, 2.0)?;
        self.add_scalar(two_s, -1.0)
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.clone();
        Ok(self.push(OpKind::StopGradient, vec![a], v))
    }

    /// View the same row-major buffer under a new shape.
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.numel() {
            return Err(GraphError::Shape {
                op: "reshape",
                detail: format!(
                    "{:?} -> {:?}",
                    self.nodes[a.0].value.shape(),
                    shape
                ),
            });
        }
        let v = Tensor::new(shape.to_vec(), self.nodes[a.0].value.data().to_vec());
        Ok(self.push(OpKind::Reshape, vec![a], v))
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GraphError::Shape {
                op: "matmul",
                detail: format!("{:?} @ {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut v = Tensor::zeros(&[m, n]);
        gemm(
            v.data_mut(),
            self.nodes[a.0].value.data(),
            false,
            self.nodes[b.0].value.data(),
            false,
            m,
            k,
            n,
            1.0,
            0.0,
        );
        ensure_finite("matmul", &v)?;
        Ok(self.push(OpKind::Matmul, vec![a, b], v))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].value.shape().len() != 2 {
            return Err(GraphError::Shape {
                op: "transpose",
                detail: format!("{:?}", self.nodes[a.0].value.shape()),
            });
        }
        let v = self.nodes[a.0].value.transposed();
        Ok(self.push(OpKind::Transpose, vec![a], v))
    }

    /// x: (N, K), bias: (K,) broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape();
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(GraphError::Shape {
                op: "add_bias",
                detail: format!("{:?} + {:?}", sx, sb),
            });
        }
        let (n, k) = (sx[0], sx[1]);
        let mut v = self.nodes[x.0].value.clone();
        let bd = self.nodes[b.0].value.data();
        for i in 0..n {
            for j in 0..k {
                v.data_mut()[i * k + j] += bd[j];
            }
        }
        ensure_finite("add_bias", &v)?;
        Ok(self.push(OpKind::AddBias, vec![x, b], v))
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.nodes[a.0].value.sum());
        ensure_finite("sum", &v)?;
        Ok(self.push(OpKind::Sum, vec![a], v))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a.0].value.numel().max(1);
        let v = Tensor::scalar(self.nodes[a.0].value.sum() / n as f64);
        ensure_finite("mean", &v)?;
        Ok(self.push(OpKind::Mean, vec![a], v))
    }

    /// (N, K) -> (N,), summing each row.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.nodes[a.0].value.shape();
        if s.len() != 2 {
            return Err(GraphError::Shape { op: "row_sum", detail: format!("{:?}", s) });
        }
        let (n, k) = (s[0], s[1]);
        let d = self.nodes[a.0].value.data();
        let mut out = Tensor::zeros(&[n]);
        for i in 0..n {
            out.data_mut()[i] = d[i * k..(i + 1) * k].iter().sum();
        }
        ensure_finite("row_sum", &out)?;
        Ok(self.push(OpKind::RowSum, vec![a], out))
    }

    // ── Softmax family (rows of a rank-2 tensor) ─────────────────────

    pub fn softmax_t(&mut self, a: NodeId, tau: f64) -> Result<NodeId> {
        if tau <= 0.0 {
            return Err(GraphError::Domain {
                op: "softmax_t",
                detail: "temperature must be positive".into(),
            });
        }
        let ls = self.log_softmax_rows(a, tau, "softmax_t")?;
        let v = ls.map(f64::exp);
        ensure_finite("softmax_t", &v)?;
        Ok(self.push(OpKind::SoftmaxT(tau), vec![a], v))
    }

    pub fn log_softmax_t(&mut self, a: NodeId, tau: f64) -> Result<NodeId> {
        if tau <= 0.0 {
            return Err(GraphError::Domain {
                op: "log_softmax_t",
                detail: "temperature must be positive".into(),
            });
        }
        let v = self.log_softmax_rows(a, tau, "log_softmax_t")?;
        ensure_finite("log_softmax_t", &v)?;
        Ok(self.push(OpKind::LogSoftmaxT(tau), vec![a], v))
    }

    fn log_softmax_rows(&self, a: NodeId, tau: f64, op: &'static str) -> Result<Tensor> {
        let s = self.nodes[a.0].value.shape();
        if s.len() != 2 {
            return Err(GraphError::Shape { op, detail: format!("{:?}", s) });
        }
        let (n, k) = (s[0], s[1]);
        let d = self.nodes[a.0].value.data();
        let mut out = Tensor::zeros(&[n, k]);
        for i in 0..n {
            let row = &d[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
            let lse = row.iter().map(|&x| (x / tau - m).exp()).sum::<f64>().ln() + m;
            for j in 0..k {
                out.data_mut()[i * k + j] = row[j] / tau - lse;
            }
        }
        Ok(out)
    }

    // ── Indexing ─────────────────────────────────────────────────────

    /// Embedding lookup: rows of `w` (V, D) selected by `ids`, giving (N, D).
    pub fn gather_rows(&mut self, w: NodeId, ids: &[usize]) -> Result<NodeId> {
        let s = self.nodes[w.0].value.shape();
        if s.len() != 2 {
            return Err(GraphError::Shape { op: "gather_rows", detail: format!("{:?}", s) });
        }
        let (vocab, d) = (s[0], s[1]);
        for &id in ids {
            if id >= vocab {
                return Err(GraphError::IndexRange { op: "gather_rows", index: id, bound: vocab });
            }
        }
        let src = self.nodes[w.0].value.data();
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (i, &id) in ids.iter().enumerate() {
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(&src[id * d..(id + 1) * d]);
        }
        Ok(self.push(OpKind::GatherRows(ids.to_vec()), vec![w], out))
    }

    /// out[n] = x[n, ids[n]] for x: (N, K).
    pub fn select_per_row(&mut self, x: NodeId, ids: &[usize]) -> Result<NodeId> {
        let s = self.nodes[x.0].value.shape();
        if s.len() != 2 || s[0] != ids.len() {
            return Err(GraphError::Shape {
                op: "select_per_row",
                detail: format!("{:?} with {} ids", s, ids.len()),
            });
        }
        let k = s[1];
        for &id in ids {
            if id >= k {
                return Err(GraphError::IndexRange { op: "select_per_row", index: id, bound: k });
            }
        }
        let d = self.nodes[x.0].value.data();
        let out = Tensor::new(
            vec![ids.len()],
            ids.iter().enumerate().map(|(n, &j)| d[n * k + j]).collect(),
        );
        Ok(self.push(OpKind::SelectPerRow(ids.to_vec()), vec![x], out))
    }

    // ── Sequence ops on (N, T, C) with per-sequence valid lengths ────

    fn check_ntc(&self, op: &'static str, x: NodeId, lengths: &[usize]) -> Result<(usize, usize, usize)> {
        let s = self.nodes[x.0].value.shape();
        if s.len() != 3 || s[0] != lengths.len() {
            return Err(GraphError::Shape {
                op,
                detail: format!("{:?} with {} lengths", s, lengths.len()),
            });
        }
        for &l in lengths {
            if l == 0 || l > s[1] {
                return Err(GraphError::Domain {
                    op,
                    detail: format!("length {} outside 1..={}", l, s[1]),
                });
            }
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Zero all positions at or past each sequence's valid length.
    pub fn mask_time(&mut self, x: NodeId, lengths: &[usize]) -> Result<NodeId> {
        let (n, t, c) = self.check_ntc("mask_time", x, lengths)?;
        let mut v = self.nodes[x.0].value.clone();
        mask_ntc(v.data_mut(), n, t, c, lengths);
        Ok(self.push(OpKind::MaskTime(lengths.to_vec()), vec![x], v))
    }

    /// 1-D convolution over the time axis with zero "same" padding.
    ///
    /// x: (N, T, C_in); w: (K, C_in, C_out); b: (C_out,). Output positions
    /// whose index is at or past the valid length are zeroed, which together
    /// with a masked input makes the result identical to convolving the
    /// sequence truncated to its true length.
    pub fn conv1d_same(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        lengths: &[usize],
    ) -> Result<NodeId> {
        let (n, t, c_in) = self.check_ntc("conv1d_same", x, lengths)?;
        let sw = self.nodes[w.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        if sw.len() != 3 || sw[1] != c_in || sb.len() != 1 || sb[0] != sw[2] {
            return Err(GraphError::Shape {
                op: "conv1d_same",
                detail: format!("x {:?}, w {:?}, b {:?}", [n, t, c_in], sw, sb),
            });
        }
        let (k, c_out) = (sw[0], sw[2]);
        let cols = im2col(self.nodes[x.0].value.data(), n, t, c_in, k);
        let mut out = Tensor::zeros(&[n, t, c_out]);
        gemm(
            out.data_mut(),
            &cols,
            false,
            self.nodes[w.0].value.data(),
            false,
            n * t,
            k * c_in,
            c_out,
            1.0,
            0.0,
        );
        let bd = self.nodes[b.0].value.data();
        for row in 0..n * t {
            for j in 0..c_out {
                out.data_mut()[row * c_out + j] += bd[j];
            }
        }
        mask_ntc(out.data_mut(), n, t, c_out, lengths);
        ensure_finite("conv1d_same", &out)?;
        Ok(self.push(OpKind::Conv1dSame { lengths: lengths.to_vec() }, vec![x, w, b], out))
    }

    /// Window-2 stride-2 mean pool over time, ceil mode, masked positions
    /// excluded from each window's average.
    pub fn mean_pool2(&mut self, x: NodeId, lengths: &[usize]) -> Result<NodeId> {
        let (n, t, c) = self.check_ntc("mean_pool2", x, lengths)?;
        let t2 = t.div_ceil(2);
        let d = self.nodes[x.0].value.data();
        let mut out = Tensor::zeros(&[n, t2, c]);
        for i in 0..n {
            let len = lengths[i];
            for p in 0..t2 {
                let lo = 2 * p;
                let hi = (2 * p + 2).min(len).min(t);
                if lo >= hi {
                    continue;
                }
                let count = (hi - lo) as f64;
                for j in 0..c {
                    let mut acc = 0.0;
                    for tt in lo..hi {
                        acc += d[(i * t + tt) * c + j];
                    }
                    out.data_mut()[(i * t2 + p) * c + j] = acc / count;
                }
            }
        }
        ensure_finite("mean_pool2", &out)?;
        Ok(self.push(OpKind::MeanPool2 { lengths: lengths.to_vec() }, vec![x], out))
    }

    /// Mean over the valid positions of each sequence: (N, T, C) -> (N, C).
    pub fn global_mean_pool(&mut self, x: NodeId, lengths: &[usize]) -> Result<NodeId> {
        let (n, t, c) = self.check_ntc("global_mean_pool", x, lengths)?;
        let d = self.nodes[x.0].value.data();
        let mut out = Tensor::zeros(&[n, c]);
        for i in 0..n {
            let len = lengths[i].min(t);
            for tt in 0..len {
                for j in 0..c {
                    out.data_mut()[i * c + j] += d[(i * t + tt) * c + j];
                }
            }
            for j in 0..c {
                out.data_mut()[i * c + j] /= len as f64;
            }
        }
        ensure_finite("global_mean_pool", &out)?;
        Ok(self.push(OpKind::GlobalMeanPool { lengths: lengths.to_vec() }, vec![x], out))
    }

    /// Stack T nodes of shape (N, C) into (N, T, C).
    pub fn stack_time(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(GraphError::Shape { op: "stack_time", detail: "no parts".into() });
        }
        let s0 = self.nodes[parts[0].0].value.shape().to_vec();
        if s0.len() != 2 {
            return Err(GraphError::Shape { op: "stack_time", detail: format!("{:?}", s0) });
        }
        let (n, c) = (s0[0], s0[1]);
        let t = parts.len();
        let mut out = Tensor::zeros(&[n, t, c]);
        for (tt, &p) in parts.iter().enumerate() {
            if self.nodes[p.0].value.shape() != s0.as_slice() {
                return Err(GraphError::Shape {
                    op: "stack_time",
                    detail: "inconsistent part shapes".into(),
                });
            }
            let src = self.nodes[p.0].value.data();
            for i in 0..n {
                let dst = (i * t + tt) * c;
                out.data_mut()[dst..dst + c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(OpKind::StackTime, parts.to_vec(), out))
    }

    /// Largest-singular-value node for a rank-2 weight.
    ///
    /// `u` and `v` are the power-iteration vectors already updated against the
    /// current weight values; the node's value is u^T W v and its gradient
    /// w.r.t. W is u v^T. A zero matrix yields value 0 with zero gradient.
    pub fn spectral_norm(&mut self, w: NodeId, u: &Tensor, v: &Tensor) -> Result<NodeId> {
        let s = self.nodes[w.0].value.shape();
        if s.len() != 2 || u.numel() != s[0] || v.numel() != s[1] {
            return Err(GraphError::Shape {
                op: "spectral_norm",
                detail: format!("W {:?}, u {:?}, v {:?}", s, u.shape(), v.shape()),
            });
        }
        let (r, c) = (s[0], s[1]);
        let wd = self.nodes[w.0].value.data();
        let zero = wd.iter().all(|&x| x == 0.0);
        let mut sigma = 0.0;
        if !zero {
            for i in 0..r {
                let mut acc = 0.0;
                for j in 0..c {
                    acc += wd[i * c + j] * v.data()[j];
                }
                sigma += u.data()[i] * acc;
            }
        }
        let node = Tensor::scalar(sigma);
        ensure_finite("spectral_norm", &node)?;
        Ok(self.push(
            OpKind::SpectralNorm { u: u.data().to_vec(), v: v.data().to_vec(), zero },
            vec![w],
            node,
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar output.
    ///
    /// Returns gradients for every parameter node and every node listed in
    /// `taps`. The gradient of the output w.r.t. itself is 1.
    pub fn backward(&self, output: NodeId, taps: &[NodeId]) -> Result<GradientMap> {
        if !self.nodes[output.0].value.is_scalar() {
            return Err(GraphError::NonScalarOutput(
                self.nodes[output.0].value.shape().to_vec(),
            ));
        }
        for t in taps {
            if t.0 >= self.nodes.len() {
                return Err(GraphError::BadTap(t.0));
            }
        }
        let tap_set: std::collections::HashSet<usize> = taps.iter().map(|t| t.0).collect();
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(Tensor::scalar(1.0));

        let mut grads = std::collections::HashMap::new();
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            if matches!(self.nodes[i].op, OpKind::Param) || tap_set.contains(&i) {
                if !g.all_finite() {
                    return Err(GraphError::NonFinite { op: "backward" });
                }
                grads.insert(i, g);
            }
        }
        // Taps above the output node or unreached params get explicit zeros.
        for t in taps {
            grads
                .entry(t.0)
                .or_insert_with(|| Tensor::zeros(self.nodes[t.0].value.shape()));
        }
        Ok(GradientMap { grads })
    }

    fn accum(adj: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
        match &mut adj[idx] {
            Some(t) => t.add_scaled(&delta, 1.0),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accum_with(
        adj: &mut [Option<Tensor>],
        idx: usize,
        shape: &[usize],
        f: impl FnOnce(&mut Tensor),
    ) {
        if adj[idx].is_none() {
            adj[idx] = Some(Tensor::zeros(shape));
        }
        f(adj[idx].as_mut().unwrap());
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let inp = |k: usize| &self.nodes[node.inputs[k].0].value;
        match &node.op {
            OpKind::Param | OpKind::Const | OpKind::StopGradient => {}
            OpKind::Add => {
                Self::accum(adj, node.inputs[0].0, g.clone());
                Self::accum(adj, node.inputs[1].0, g.clone());
            }
            OpKind::Sub => {
                Self::accum(adj, node.inputs[0].0, g.clone());
                Self::accum(adj, node.inputs[1].0, g.map(|x| -x));
            }
            OpKind::Mul => {
                Self::accum(adj, node.inputs[0].0, g.zip_map(inp(1), |a, b| a * b));
                Self::accum(adj, node.inputs[1].0, g.zip_map(inp(0), |a, b| a * b));
            }
            OpKind::Scale(c) => {
                Self::accum(adj, node.inputs[0].0, g.map(|x| c * x));
            }
            OpKind::AddScalar => {
                Self::accum(adj, node.inputs[0].0, g.clone());
            }
            OpKind::Elu => {
                // d/dx elu(x) = 1 for x > 0, exp(x) = out + 1 otherwise.
                Self::accum(
                    adj,
                    node.inputs[0].0,
                    g.zip_map(&node.value, |gi, o| if o > 0.0 { gi } else { gi * (o + 1.0) }),
                );
            }
            OpKind::Sigmoid => {
                Self::accum(
                    adj,
                    node.inputs[0].0,
                    g.zip_map(&node.value, |gi, s| gi * s * (1.0 - s)),
                );
            }
            OpKind::Relu => {
                Self::accum(
                    adj,
                    node.inputs[0].0,
                    g.zip_map(&node.value, |gi, o| if o > 0.0 { gi } else { 0.0 }),
                );
            }
            OpKind::Softplus => {
                Self::accum(
                    adj,
                    node.inputs[0].0,
                    g.zip_map(inp(0), |gi, x| {
                        let s = if x >= 0.0 {
                            1.0 / (1.0 + (-x).exp())
                        } else {
                            let e = x.exp();
                            e / (1.0 + e)
                        };
                        gi * s
                    }),
                );
            }
            OpKind::Log => {
                Self::accum(adj, node.inputs[0].0, g.zip_map(inp(0), |gi, x| gi / x));
            }
            OpKind::Exp => {
                Self::accum(adj, node.inputs[0].0, g.zip_map(&node.value, |gi, o| gi * o));
            }
            OpKind::Sum => {
                let gv = g.item();
                Self::accum(adj, node.inputs[0].0, inp(0).map(|_| gv));
            }
            OpKind::Mean => {
                let gv = g.item() / inp(0).numel() as f64;
                Self::accum(adj, node.inputs[0].0, inp(0).map(|_| gv));
            }
            OpKind::RowSum => {
                let s = inp(0).shape();
                let (n, k) = (s[0], s[1]);
                Self::accum_with(adj, node.inputs[0].0, s, |acc| {
                    for r in 0..n {
                        let gr = g.data()[r];
                        for j in 0..k {
                            acc.data_mut()[r * k + j] += gr;
                        }
                    }
                });
            }
            OpKind::AddBias => {
                Self::accum(adj, node.inputs[0].0, g.clone());
                let s = inp(0).shape();
                let (n, k) = (s[0], s[1]);
                Self::accum_with(adj, node.inputs[1].0, &[k], |acc| {
                    for r in 0..n {
                        for j in 0..k {
                            acc.data_mut()[j] += g.data()[r * k + j];
                        }
                    }
                });
            }
            OpKind::Matmul => {
                let sa = inp(0).shape();
                let sb = inp(1).shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                // dA += g @ B^T
                Self::accum_with(adj, node.inputs[0].0, sa, |acc| {
                    gemm(acc.data_mut(), g.data(), false, inp(1).data(), true, m, n, k, 1.0, 1.0);
                });
                // dB += A^T @ g
                Self::accum_with(adj, node.inputs[1].0, sb, |acc| {
                    gemm(acc.data_mut(), inp(0).data(), true, g.data(), false, k, m, n, 1.0, 1.0);
                });
            }
            OpKind::Transpose => {
                Self::accum(adj, node.inputs[0].0, g.transposed());
            }
            OpKind::SoftmaxT(tau) => {
                let s = node.value.shape();
                let (n, k) = (s[0], s[1]);
                let y = node.value.data();
                Self::accum_with(adj, node.inputs[0].0, s, |acc| {
                    for r in 0..n {
                        let dot: f64 = (0..k).map(|j| g.data()[r * k + j] * y[r * k + j]).sum();
                        for j in 0..k {
                            acc.data_mut()[r * k + j] +=
                                y[r * k + j] * (g.data()[r * k + j] - dot) / tau;
                        }
                    }
                });
            }
            OpKind::LogSoftmaxT(tau) => {
                let s = node.value.shape();
                let (n, k) = (s[0], s[1]);
                let ls = node.value.data();
                Self::accum_with(adj, node.inputs[0].0, s, |acc| {
                    for r in 0..n {
                        let gsum: f64 = (0..k).map(|j| g.data()[r * k + j]).sum();
                        for j in 0..k {
                            let p = ls[r * k + j].exp();
                            acc.data_mut()[r * k + j] += (g.data()[r * k + j] - p * gsum) / tau;
                        }
                    }
                });
            }
            OpKind::GatherRows(ids) => {
                let s = inp(0).shape();
                let d = s[1];
                Self::accum_with(adj, node.inputs[0].0, s, |acc| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            acc.data_mut()[id * d + j] += g.data()[r * d + j];
                        }
                    }
                });
            }
            OpKind::SelectPerRow(ids) => {
                let s = inp(0).shape();
                let k = s[1];
                Self::accum_with(adj, node.inputs[0].0, s, |acc| {
                    for (r, &id) in ids.iter().enumerate() {
                        acc.data_mut()[r * k + id] += g.data()[r];
                    }
                });
            }
            OpKind::Reshape => {
                let s = inp(0).shape().to_vec();
                Self::accum(adj, node.inputs[0].0, Tensor::new(s, g.data().to_vec()));
            }
            OpKind::MaskTime(lengths) => {
                let s = inp(0).shape();
                let (n, t, c) = (s[0], s[1], s[2]);
                let mut gm = g.clone();
                mask_ntc(gm.data_mut(), n, t, c, lengths);
                Self::accum(adj, node.inputs[0].0, gm);
            }
            OpKind::Conv1dSame { lengths } => {
                let sx = inp(0).shape();
                let sw = inp(1).shape();
                let (n, t, c_in) = (sx[0], sx[1], sx[2]);
                let (k, c_out) = (sw[0], sw[2]);
                let mut gm = g.clone();
                mask_ntc(gm.data_mut(), n, t, c_out, lengths);
                let cols = im2col(inp(0).data(), n, t, c_in, k);
                // dW += cols^T @ g
                Self::accum_with(adj, node.inputs[1].0, sw, |acc| {
                    gemm(
                        acc.data_mut(),
                        &cols,
                        true,
                        gm.data(),
                        false,
                        k * c_in,
                        n * t,
                        c_out,
                        1.0,
                        1.0,
                    );
                });
                // db += column sums of g
                Self::accum_with(adj, node.inputs[2].0, &[c_out], |acc| {
                    for row in 0..n * t {
                        for j in 0..c_out {
                            acc.data_mut()[j] += gm.data()[row * c_out + j];
                        }
                    }
                });
                // dX via col2im of g @ W^T
                let mut dcols = vec![0.0; n * t * k * c_in];
                gemm(
                    &mut dcols,
                    gm.data(),
                    false,
                    inp(1).data(),
                    true,
                    n * t,
                    c_out,
                    k * c_in,
                    1.0,
                    0.0,
                );
                Self::accum_with(adj, node.inputs[0].0, sx, |acc| {
                    col2im(acc.data_mut(), &dcols, n, t, c_in, k);
                });
            }
            OpKind::MeanPool2 { lengths } => {
                let s = inp(0).shape();
                let (n, t, c) = (s[0], s[1], s[2]);
                let t2 = t.div_ceil(2);
                Self::accum_with(adj, node.inputs[0].0, s, |acc| {
                    for i in 0..n {
                        let len = lengths[i];
                        for p in 0..t2 {
                            let lo = 2 * p;
                            let hi = (2 * p + 2).min(len).min(t);
                            if lo >= hi {
                                continue;
                            }
                            let inv = 1.0 / (hi - lo) as f64;
                            for j in 0..c {
                                let gv = g.data()[(i * t2 + p) * c + j] * inv;
                                for tt in lo..hi {
                                    acc.data_mut()[(i * t + tt) * c + j] += gv;
                                }
                            }
                        }
                    }
                });
            }
            OpKind::GlobalMeanPool { lengths } => {
                let s = inp(0).shape();
                let (n, t, c) = (s[0], s[1], s[2]);
                Self::accum_with(adj, node.inputs[0].0, s, |acc| {
                    for i in 0..n {
                        let len = lengths[i].min(t);
                        let inv = 1.0 / len as f64;
                        for tt in 0..len {
                            for j in 0..c {
                                acc.data_mut()[(i * t + tt) * c + j] += g.data()[i * c + j] * inv;
                            }
                        }
                    }
                });
            }
            OpKind::StackTime => {
                let t = node.inputs.len();
                let s = node.value.shape();
                let (n, c) = (s[0], s[2]);
                for (tt, part) in node.inputs.iter().enumerate() {
                    Self::accum_with(adj, part.0, &[n, c], |acc| {
                        for i in 0..n {
                            for j in 0..c {
                                acc.data_mut()[i * c + j] += g.data()[(i * t + tt) * c + j];
                            }
                        }
                    });
                }
            }
            OpKind::SpectralNorm { u, v, zero } => {
                if !zero {
                    let gv = g.item();
                    let s = inp(0).shape();
                    let (r, c) = (s[0], s[1]);
                    Self::accum_with(adj, node.inputs[0].0, s, |acc| {
                        for a in 0..r {
                            for b in 0..c {
                                acc.data_mut()[a * c + b] += gv * u[a] * v[b];
                            }
                        }
                    });
                }
            }
        }
    }
}

/// Valid length after a window-2 stride-2 ceil-mode pool.
pub fn pooled_lengths(lengths: &[usize]) -> Vec<usize> {
    lengths.iter().map(|&l| l.div_ceil(2)).collect()
}

fn mask_ntc(data: &mut [f64], n: usize, t: usize, c: usize, lengths: &[usize]) {
    for i in 0..n {
        let len = lengths[i].min(t);
        for tt in len..t {
            for j in 0..c {
                data[(i * t + tt) * c + j] = 0.0;
            }
        }
    }
}

/// Gather (N*T, K*C) patches with zero padding; pad_left = (K-1)/2.
fn im2col(x: &[f64], n: usize, t: usize, c: usize, k: usize) -> Vec<f64> {
    let left = (k - 1) / 2;
    let mut cols = vec![0.0; n * t * k * c];
    for i in 0..n {
        for tt in 0..t {
            let base = (i * t + tt) * k * c;
            for kk in 0..k {
                let src = tt as isize + kk as isize - left as isize;
                if src >= 0 && (src as usize) < t {
                    let s = (i * t + src as usize) * c;
                    cols[base + kk * c..base + (kk + 1) * c].copy_from_slice(&x[s..s + c]);
                }
            }
        }
    }
    cols
}

/// Scatter-add of im2col adjoints back to the input layout.
fn col2im(dx: &mut [f64], dcols: &[f64], n: usize, t: usize, c: usize, k: usize) {
    let left = (k - 1) / 2;
    for i in 0..n {
        for tt in 0..t {
            let base = (i * t + tt) * k * c;
            for kk in 0..k {
                let src = tt as isize + kk as isize - left as isize;
                if src >= 0 && (src as usize) < t {
                    let s = (i * t + src as usize) * c;
                    for j in 0..c {
                        dx[s + j] += dcols[base + kk * c + j];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, max_rel_error};
    use crate::rng::seed_rng;

    #[test]
    fn constant_graph_forward() {
        let mut g = Graph::new();
        let y = g.constant(Tensor::scalar(2.0));
        assert_eq!(g.value(y).item(), 2.0);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn elu_at_minus_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(-1.0));
        let y = g.elu(x).unwrap();
        let expected = (-1.0f64).exp() - 1.0; // -0.632121...
        assert!((g.value(y).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn square_gradient_at_three() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let mut grads = g.backward(y, &[]).unwrap();
        assert_eq!(grads.take(x).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_dot_constant_matches_finite_differences() {
        let z0 = [0.3, -1.2, 0.7, 0.1];
        let c = [1.0, -2.0, 0.5, 3.0];
        let run = |z: &[f64]| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let zn = g.param(Tensor::new(vec![1, 4], z.to_vec()));
            let cn = g.constant(Tensor::new(vec![1, 4], c.to_vec()));
            let p = g.softmax_t(zn, 1.0).unwrap();
            let prod = g.mul(p, cn).unwrap();
            let y = g.sum(prod).unwrap();
            let val = g.value(y).item();
            let mut grads = g.backward(y, &[]).unwrap();
            (val, grads.take(zn).unwrap().data().to_vec())
        };
        let (_, ad) = run(&z0);
        let mut f = |z: &[f64]| run(z).0;
        let fd = finite_diff_grad(&mut f, &z0, 1e-5);
        assert!(max_rel_error(&ad, &fd, 1e-9) < 1e-6);
    }

    #[test]
    fn tap_on_intermediate_matches_finite_differences() {
        // y = sum(sigmoid(h)) with h = W x; tap dy/dh and compare against
        // finite differences of y as a function of h.
        let h0 = [0.4, -0.3, 1.1];
        let run_from_h = |h: &[f64]| -> f64 {
            let mut g = Graph::new();
            let hn = g.constant(Tensor::new(vec![1, 3], h.to_vec()));
            let s = g.sigmoid(hn).unwrap();
            let y = g.sum(s).unwrap();
            g.value(y).item()
        };
        let mut g = Graph::new();
        let w = g.param(Tensor::new(vec![1, 3], h0.to_vec()));
        let one = g.constant(Tensor::new(vec![1, 1], vec![1.0]));
        let h = g.matmul(one, w).unwrap();
        let s = g.sigmoid(h).unwrap();
        let y = g.sum(s).unwrap();
        let mut grads = g.backward(y, &[h]).unwrap();
        let tap = grads.take(h).unwrap();
        let mut f = |hv: &[f64]| run_from_h(hv);
        let fd = finite_diff_grad(&mut f, &h0, 1e-5);
        assert!(max_rel_error(tap.data(), &fd, 1e-9) < 1e-6);
    }

    #[test]
    fn softmax_high_temperature_is_uniform() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![1, 5], vec![3.0, -2.0, 0.5, 9.0, -7.0]));
        let p = g.softmax_t(z, 1e12).unwrap();
        for &x in g.value(p).data() {
            assert!((x - 0.2).abs() < 1e-9);
        }
    }

    #[test]
    fn conv_same_all_ones_kernel3() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 5, 1], vec![1.0; 5]));
        let w = g.constant(Tensor::new(vec![3, 1, 1], vec![1.0; 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv1d_same(x, w, b, &[5]).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 3.0, 3.0, 3.0, 2.0]);
    }

    #[test]
    fn stop_gradient_blocks_adjoint_but_not_value() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let sx = g.stop_gradient(x).unwrap();
        let y = g.mul(sx, x).unwrap();
        assert_eq!(g.value(y).item(), 4.0);
        assert_eq!(g.value(sx).item(), g.value(x).item());
        let mut grads = g.backward(y, &[]).unwrap();
        assert_eq!(grads.take(x).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_is_linear_in_the_output() {
        let mut rng = seed_rng(11);
        let x0 = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let grad_of = |a: f64, b: f64| -> Vec<f64> {
            let mut g = Graph::new();
            let x = g.param(x0.clone());
            let sq = g.mul(x, x).unwrap();
            let f = g.sum(sq).unwrap(); // f = sum x^2
            let e = g.exp(x).unwrap();
            let h = g.sum(e).unwrap(); // g = sum exp(x)
            let af = g.scale(f, a).unwrap();
            let bh = g.scale(h, b).unwrap();
            let y = g.add(af, bh).unwrap();
            let mut grads = g.backward(y, &[]).unwrap();
            grads.take(x).unwrap().data().to_vec()
        };
        let gf = grad_of(1.0, 0.0);
        let gh = grad_of(0.0, 1.0);
        let combined = grad_of(2.5, -1.5);
        for i in 0..gf.len() {
            let expect = 2.5 * gf[i] - 1.5 * gh[i];
            assert!((combined[i] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_of_output_wrt_itself_is_one() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(5.0));
        let y = g.scale(x, 3.0).unwrap();
        let mut grads = g.backward(y, &[y]).unwrap();
        assert_eq!(grads.take(y).unwrap().item(), 1.0);
    }

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]));
        assert!(matches!(
            g.backward(x, &[]),
            Err(GraphError::NonScalarOutput(_))
        ));
    }

    #[test]
    fn bad_tap_is_reported() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.0));
        assert!(matches!(
            g.backward(x, &[NodeId(99)]),
            Err(GraphError::BadTap(99))
        ));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(g.add(a, b), Err(GraphError::Shape { .. })));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1e308));
        let b = g.constant(Tensor::scalar(1e308));
        // 1e308 + 1e308 overflows to +inf.
        assert!(matches!(g.add(a, b), Err(GraphError::NonFinite { .. })));
    }

    /// Central finite differences against every differentiable primitive.
    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = seed_rng(42);
        type Builder = fn(&mut Graph, NodeId) -> NodeId;
        // Each case: input shape and a builder from the parameter node to a
        // scalar output exercising one primitive.
        let cases: Vec<(&str, Vec<usize>, Builder)> = vec![
            ("add", vec![2, 3], |g, x| {
                let y = g.add(x, x).unwrap();
                g.sum(y).unwrap()
            }),
            ("sub", vec![2, 3], |g, x| {
                let e = g.exp(x).unwrap();
                let y = g.sub(x, e).unwrap();
                g.sum(y).unwrap()
            }),
            ("mul", vec![2, 3], |g, x| {
                let e = g.elu(x).unwrap();
                let y = g.mul(x, e).unwrap();
                g.sum(y).unwrap()
            }),
            ("scale_addscalar", vec![4], |g, x| {
                let y = g.scale(x, -2.5).unwrap();
                let z = g.add_scalar(y, 1.0).unwrap();
                let w = g.mul(z, z).unwrap();
                g.sum(w).unwrap()
            }),
            ("elu", vec![5], |g, x| {
                let y = g.elu(x).unwrap();
                g.sum(y).unwrap()
            }),
            ("sigmoid", vec![5], |g, x| {
                let y = g.sigmoid(x).unwrap();
                g.sum(y).unwrap()
            }),
            ("relu_softplus", vec![5], |g, x| {
                let r = g.relu(x).unwrap();
                let s = g.softplus(x).unwrap();
                let y = g.mul(r, s).unwrap();
                g.sum(y).unwrap()
            }),
            ("log_exp", vec![4], |g, x| {
                let e = g.exp(x).unwrap();
                let l = g.log(e).unwrap();
                let y = g.mul(l, e).unwrap();
                g.sum(y).unwrap()
            }),
            ("tanh", vec![4], |g, x| {
                let y = g.tanh(x).unwrap();
                let z = g.mul(y, y).unwrap();
                g.sum(z).unwrap()
            }),
            ("matmul", vec![3, 4], |g, x| {
                let t = g.transpose(x).unwrap();
                let y = g.matmul(x, t).unwrap();
                g.sum(y).unwrap()
            }),
            ("mean", vec![3, 3], |g, x| {
                let y = g.mul(x, x).unwrap();
                g.mean(y).unwrap()
            }),
            ("row_sum", vec![2, 4], |g, x| {
                let r = g.row_sum(x).unwrap();
                let y = g.mul(r, r).unwrap();
                g.sum(y).unwrap()
            }),
            ("softmax_t", vec![2, 5], |g, x| {
                let p = g.softmax_t(x, 0.7).unwrap();
                let y = g.mul(p, p).unwrap();
                g.sum(y).unwrap()
            }),
            ("log_softmax_t", vec![2, 5], |g, x| {
                let ls = g.log_softmax_t(x, 1.3).unwrap();
                let p = g.exp(ls).unwrap();
                let y = g.mul(p, ls).unwrap();
                g.sum(y).unwrap()
            }),
            ("gather_select", vec![4, 3], |g, x| {
                let rows = g.gather_rows(x, &[1, 3, 1]).unwrap();
                let sq = g.mul(rows, rows).unwrap();
                let picked = g.select_per_row(sq, &[0, 2, 1]).unwrap();
                g.sum(picked).unwrap()
            }),
            ("add_bias", vec![4], |g, x| {
                let m = g.constant(Tensor::new(
                    vec![2, 4],
                    vec![0.1, 0.2, 0.3, 0.4, -0.5, 0.6, -0.7, 0.8],
                ));
                let y = g.add_bias(m, x).unwrap();
                let z = g.mul(y, y).unwrap();
                g.sum(z).unwrap()
            }),
            ("conv1d_same", vec![3, 2, 2], |g, x| {
                let w = g.constant(Tensor::new(
                    vec![3, 2, 2],
                    (0..12).map(|i| 0.1 * i as f64 - 0.5).collect(),
                ));
                let b = g.constant(Tensor::new(vec![2], vec![0.1, -0.2]));
                // Lengths exercise masking: 2 valid of 2, 1 valid of 2.
                let y = g.conv1d_same(x, w, b, &[2, 1, 2]).unwrap();
                let z = g.mul(y, y).unwrap();
                g.sum(z).unwrap()
            }),
            ("conv1d_weights", vec![3, 2, 2], |g, w| {
                let x = g.constant(Tensor::new(
                    vec![2, 3, 2],
                    (0..12).map(|i| (i as f64 * 0.37).sin()).collect(),
                ));
                let b = g.constant(Tensor::new(vec![2], vec![0.0, 0.5]));
                let y = g.conv1d_same(x, w, b, &[3, 2]).unwrap();
                let z = g.mul(y, y).unwrap();
                g.sum(z).unwrap()
            }),
            ("mean_pool2", vec![2, 5, 2], |g, x| {
                let y = g.mean_pool2(x, &[5, 3]).unwrap();
                let z = g.mul(y, y).unwrap();
                g.sum(z).unwrap()
            }),
            ("global_mean_pool", vec![2, 4, 3], |g, x| {
                let y = g.global_mean_pool(x, &[4, 2]).unwrap();
                let z = g.mul(y, y).unwrap();
                g.sum(z).unwrap()
            }),
            ("mask_time", vec![2, 3, 2], |g, x| {
                let y = g.mask_time(x, &[2, 3]).unwrap();
                let z = g.mul(y, y).unwrap();
                g.sum(z).unwrap()
            }),
            ("stack_time", vec![2, 3], |g, x| {
                let e = g.exp(x).unwrap();
                let y = g.stack_time(&[x, e]).unwrap();
                let z = g.mul(y, y).unwrap();
                g.sum(z).unwrap()
            }),
        ];

        for (name, shape, build) in cases {
            let x0 = Tensor::randn(&shape, 0.8, &mut rng);
            let mut g = Graph::new();
            let x = g.param(x0.clone());
            let y = build(&mut g, x);
            let mut grads = g.backward(y, &[]).unwrap();
            let ad = grads.take(x).unwrap();
            let mut f = |v: &[f64]| {
                let mut g = Graph::new();
                let x = g.param(Tensor::new(shape.clone(), v.to_vec()));
                let y = build(&mut g, x);
                g.value(y).item()
            };
            let fd = finite_diff_grad(&mut f, x0.data(), 1e-5);
            let err = max_rel_error(ad.data(), &fd, 1e-8);
            assert!(err < 1e-4, "{name}: max rel error {err}");
        }
    }

    #[test]
    fn spectral_norm_gradient_is_outer_product() {
        let mut rng = seed_rng(3);
        let w0 = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let mut st = crate::spectral::PowerIterState::new(4, 3, &mut seed_rng(5));
        st.update(w0.data(), 4, 3, 100);
        let mut g = Graph::new();
        let w = g.param(w0.clone());
        let sigma = g.spectral_norm(w, &st.u, &st.v).unwrap();
        let mut grads = g.backward(sigma, &[]).unwrap();
        let ad = grads.take(w).unwrap();
        // d sigma / dW = u v^T at convergence; compare with finite
        // differences of the true largest singular value.
        let mut f = |v: &[f64]| {
            let mut s2 = crate::spectral::PowerIterState::new(4, 3, &mut seed_rng(5));
            s2.update(v, 4, 3, 200)
        };
        let fd = finite_diff_grad(&mut f, w0.data(), 1e-5);
        assert!(max_rel_error(ad.data(), &fd, 1e-6) < 1e-4);
    }

    #[test]
    fn masked_conv_ignores_values_past_length() {
        // Changing inputs past the valid length must not change any output.
        let mut g = Graph::new();
        let base: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let mut altered = base.clone();
        for x in altered[6..].iter_mut() {
            *x = 99.0;
        }
        let w = Tensor::new(vec![3, 2, 1], vec![0.3, -0.2, 0.5, 0.4, 0.1, -0.6]);
        let bias = Tensor::new(vec![1], vec![0.05]);
        let out = |data: Vec<f64>, g: &mut Graph| {
            let x = g.constant(Tensor::new(vec![1, 5, 2], data));
            let xm = g.mask_time(x, &[3]).unwrap();
            let wn = g.constant(w.clone());
            let bn = g.constant(bias.clone());
            let y = g.conv1d_same(xm, wn, bn, &[3]).unwrap();
            g.value(y).data().to_vec()
        };
        let y1 = out(base, &mut g);
        let y2 = out(altered, &mut g);
        assert_eq!(y1, y2);
        // Positions at or past the length are exactly zero.
        assert_eq!(y1[3], 0.0);
        assert_eq!(y1[4], 0.0);
    }
}
