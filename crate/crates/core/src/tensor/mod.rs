//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every operation is recorded on a [`Tape`] (a Wengert list). Forward
//! values are computed eagerly; `backward` replays the recorded ops in
//! reverse and accumulates gradients into the leaves. One training step
//! owns one tape; tensors are immutable once created except for the grad
//! buffer of leaves.

pub mod kernels;

use crate::error::{Error, Result};
pub use kernels::PadMode;

/// Dense N-dimensional tensor, row-major f64 storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }
}

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddRowBroadcast(NodeId, NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    LogSigmoid(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatChannels(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    MeanAll(NodeId),
    SumAll(NodeId),
    SoftmaxRows(NodeId),
    L2NormalizeRows(NodeId),
    CrossEntropyDiag(NodeId),
    InstanceNorm { x: NodeId, eps: f64 },
    MulChannel { x: NodeId, gamma: NodeId },
    AddChannel { x: NodeId, beta: NodeId },
    Pad2d { x: NodeId, pad: usize, mode: PadMode },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize },
    DepthwiseConv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize },
    UpsampleNearest { x: NodeId, factor: usize },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Ordered record of executed operations with enough state to replay the
/// chain rule in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Drops all recorded nodes. Required between training steps.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    /// Detached copy of a node's value (no grad tracking).
    pub fn value(&self, id: NodeId) -> Tensor {
        let t = &self.nodes[id.0].tensor;
        Tensor::new(t.shape.clone(), t.data.clone())
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].tensor.data[0]
    }

    /// Gradient accumulated on a leaf after `backward`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.tensor.grad = None;
        }
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            tensor: Tensor { shape, data, requires_grad, grad: None },
            op,
        });
        id
    }

    // ── leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> NodeId {
        self.push(t.shape.clone(), t.data.clone(), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.leaf(t, false)
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Mul(a, b)))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().map(|x| -x).collect();
        let rg = self.requires(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().map(|x| c * x).collect();
        let rg = self.requires(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::Scale(a, c))
    }

    /// [R,C] + [C] with the vector broadcast over rows.
    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(bias).to_vec();
        if sa.len() != 2 || sb != vec![sa[1]] {
            return Err(Error::ShapeMismatch { op: "add_row_broadcast", lhs: sa, rhs: sb });
        }
        let cols = sa[1];
        let bv = self.data(bias).to_vec();
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % cols])
            .collect();
        let rg = self.requires(a) || self.requires(bias);
        Ok(self.push(sa, data, rg, Op::AddRowBroadcast(a, bias)))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.tanh()).collect();
        let rg = self.requires(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().map(|&x| kernels::gelu(x)).collect();
        let rg = self.requires(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.max(0.0)).collect();
        let rg = self.requires(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        let rg = self.requires(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::LeakyRelu(a, slope))
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().map(|&x| kernels::log_sigmoid(x)).collect();
        let rg = self.requires(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::LogSigmoid(a))
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::mm_nn(self.data(a), self.data(b), m, k, n, &mut out, false);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op: "transpose", lhs: s, rhs: vec![] });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.requires(a);
        Ok(self.push(vec![c, r], out, rg, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.data(a).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let data = self.data(a).to_vec();
        let rg = self.requires(a);
        Ok(self.push(shape, data, rg, Op::Reshape(a)))
    }

    /// Concatenates [R,C_i] matrices along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.shape(parts[0])[0];
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            cols += s[1];
        }
        let mut out = vec![0.0; rows * cols];
        let mut off = 0;
        for &p in parts {
            let c = self.shape(p)[1];
            let src = self.data(p);
            for r in 0..rows {
                out[r * cols + off..r * cols + off + c].copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(vec![rows, cols], out, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Concatenates [C_i,H,W] tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let s0 = self.shape(parts[0]).to_vec();
        if s0.len() != 3 {
            return Err(Error::ShapeMismatch { op: "concat_channels", lhs: s0, rhs: vec![] });
        }
        let (h, w) = (s0[1], s0[2]);
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: s0,
                    rhs: s.to_vec(),
                });
            }
            c_total += s[0];
        }
        let mut out = Vec::with_capacity(c_total * h * w);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(vec![c_total, h, w], out, rg, Op::ConcatChannels(parts.to_vec())))
    }

    /// Selects rows of an [R,C] matrix; backward scatter-adds.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op: "gather_rows", lhs: s, rhs: vec![] });
        }
        let (r, c) = (s[0], s[1]);
        for &i in indices {
            if i >= r {
                return Err(Error::config(format!("gather_rows index {i} out of range 0..{r}")));
            }
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.requires(a);
        Ok(self.push(vec![indices.len(), c], out, rg, Op::GatherRows(a, indices.to_vec())))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.data(a).len() as f64;
        let v = self.data(a).iter().sum::<f64>() / n;
        let rg = self.requires(a);
        self.push(vec![1], vec![v], rg, Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = self.data(a).iter().sum::<f64>();
        let rg = self.requires(a);
        self.push(vec![1], vec![v], rg, Op::SumAll(a))
    }

    // ── normalization / softmax ──────────────────────────────────────

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op: "softmax_rows", lhs: s, rhs: vec![] });
        }
        let data = kernels::softmax_rows_fwd(self.data(a), s[0], s[1]);
        let rg = self.requires(a);
        Ok(self.push(s, data, rg, Op::SoftmaxRows(a)))
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op: "l2_normalize_rows", lhs: s, rhs: vec![] });
        }
        let data = kernels::l2_normalize_rows_fwd(self.data(a), s[1]);
        let rg = self.requires(a);
        Ok(self.push(s, data, rg, Op::L2NormalizeRows(a)))
    }

    /// Mean over rows of -log softmax(row)[diagonal]; input must be square.
    pub fn cross_entropy_diag(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::ShapeMismatch { op: "cross_entropy_diag", lhs: s, rhs: vec![] });
        }
        let (loss, _) = kernels::cross_entropy_diag_fwd(self.data(a), s[0]);
        let rg = self.requires(a);
        Ok(self.push(vec![1], vec![loss], rg, Op::CrossEntropyDiag(a)))
    }

    /// Per-channel standardization of [C,H,W].
    pub fn instance_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch { op: "instance_norm", lhs: s, rhs: vec![] });
        }
        let data = kernels::instance_norm_fwd(self.data(a), s[0], s[1] * s[2], eps);
        let rg = self.requires(a);
        Ok(self.push(s, data, rg, Op::InstanceNorm { x: a, eps }))
    }

    /// [C,H,W] scaled per channel by gamma[C].
    pub fn mul_channel(&mut self, a: NodeId, gamma: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        let sg = self.shape(gamma).to_vec();
        if s.len() != 3 || sg != vec![s[0]] {
            return Err(Error::ShapeMismatch { op: "mul_channel", lhs: s, rhs: sg });
        }
        let hw = s[1] * s[2];
        let g = self.data(gamma).to_vec();
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * g[i / hw])
            .collect();
        let rg = self.requires(a) || self.requires(gamma);
        Ok(self.push(s, data, rg, Op::MulChannel { x: a, gamma }))
    }

    /// [C,H,W] shifted per channel by beta[C].
    pub fn add_channel(&mut self, a: NodeId, beta: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        let sb = self.shape(beta).to_vec();
        if s.len() != 3 || sb != vec![s[0]] {
            return Err(Error::ShapeMismatch { op: "add_channel", lhs: s, rhs: sb });
        }
        let hw = s[1] * s[2];
        let b = self.data(beta).to_vec();
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + b[i / hw])
            .collect();
        let rg = self.requires(a) || self.requires(beta);
        Ok(self.push(s, data, rg, Op::AddChannel { x: a, beta }))
    }

    // ── spatial ops ──────────────────────────────────────────────────

    pub fn pad2d(&mut self, a: NodeId, pad: usize, mode: PadMode) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch { op: "pad2d", lhs: s, rhs: vec![] });
        }
        kernels::check_pad(pad, s[1], s[2], mode)?;
        let data = kernels::pad2d_fwd(self.data(a), s[0], s[1], s[2], pad, mode);
        let rg = self.requires(a);
        Ok(self.push(
            vec![s[0], s[1] + 2 * pad, s[2] + 2 * pad],
            data,
            rg,
            Op::Pad2d { x: a, pad, mode },
        ))
    }

    /// Valid cross-correlation of x[Cin,H,W] with w[Cout,Cin,k,k] plus b[Cout].
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sw });
        }
        let k = sw[2];
        if k > sx[1] || k > sx[2] {
            return Err(Error::config(format!(
                "conv2d kernel {k}x{k} larger than (padded) input {}x{}",
                sx[1], sx[2]
            )));
        }
        if self.shape(b) != [sw[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: self.shape(b).to_vec(),
                rhs: vec![sw[0]],
            });
        }
        let data = kernels::conv2d_fwd(
            self.data(x),
            self.data(w),
            self.data(b),
            sx[0],
            sx[1],
            sx[2],
            sw[0],
            k,
            stride,
        );
        let oh = kernels::conv_out_dim(sx[1], k, stride);
        let ow = kernels::conv_out_dim(sx[2], k, stride);
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(vec![sw[0], oh, ow], data, rg, Op::Conv2d { x, w, b, stride }))
    }

    /// pad2d followed by conv2d.
    pub fn conv2d_padded(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Result<NodeId> {
        let xp = if pad > 0 { self.pad2d(x, pad, mode)? } else { x };
        self.conv2d(xp, w, b, stride)
    }

    /// Depthwise valid cross-correlation: x[C,H,W] with w[C,k,k] plus b[C].
    pub fn depthwise_conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
    ) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sw[0] != sx[0] || sw[1] != sw[2] {
            return Err(Error::ShapeMismatch { op: "depthwise_conv2d", lhs: sx, rhs: sw });
        }
        let k = sw[1];
        if k > sx[1] || k > sx[2] {
            return Err(Error::config(format!(
                "depthwise kernel {k}x{k} larger than (padded) input {}x{}",
                sx[1], sx[2]
            )));
        }
        if self.shape(b) != [sx[0]] {
            return Err(Error::ShapeMismatch {
                op: "depthwise bias",
                lhs: self.shape(b).to_vec(),
                rhs: vec![sx[0]],
            });
        }
        let data = kernels::depthwise_fwd(
            self.data(x),
            self.data(w),
            self.data(b),
            sx[0],
            sx[1],
            sx[2],
            k,
            stride,
        );
        let oh = kernels::conv_out_dim(sx[1], k, stride);
        let ow = kernels::conv_out_dim(sx[2], k, stride);
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(vec![sx[0], oh, ow], data, rg, Op::DepthwiseConv2d { x, w, b, stride }))
    }

    pub fn depthwise_padded(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Result<NodeId> {
        let xp = if pad > 0 { self.pad2d(x, pad, mode)? } else { x };
        self.depthwise_conv2d(xp, w, b, stride)
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || factor == 0 {
            return Err(Error::ShapeMismatch { op: "upsample_nearest", lhs: s, rhs: vec![] });
        }
        let data = kernels::upsample_nearest_fwd(self.data(x), s[0], s[1], s[2], factor);
        let rg = self.requires(x);
        Ok(self.push(
            vec![s[0], s[1] * factor, s[2] * factor],
            data,
            rg,
            Op::UpsampleNearest { x, factor },
        ))
    }

    /// [R,C] matrix times vector-of-rows view of a [C,H,W] map: helper to
    /// move between token and channel layouts.
    pub fn chw_to_tokens(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch { op: "chw_to_tokens", lhs: s, rhs: vec![] });
        }
        let flat = self.reshape(x, vec![s[0], s[1] * s[2]])?;
        self.transpose(flat)
    }

    pub fn tokens_to_chw(&mut self, tokens: NodeId, c: usize, h: usize, w: usize) -> Result<NodeId> {
        let t = self.transpose(tokens)?;
        self.reshape(t, vec![c, h, w])
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar node; accumulates into leaf `grad`s.
    /// May be called repeatedly (gradients add across calls).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.data(loss).len() != 1 {
            return Err(Error::config(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tensor.requires_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    let t = &mut self.nodes[i].tensor;
                    match &mut t.grad {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(g.iter()) {
                                *a += b;
                            }
                        }
                        None => t.grad = Some(g),
                    }
                    continue;
                }
                Op::Add(a, b) => {
                    self.acc_grad(&mut grads, a, &g);
                    self.acc_grad(&mut grads, b, &g);
                }
                Op::Mul(a, b) => {
                    if self.requires(a) {
                        let contrib: Vec<f64> =
                            g.iter().zip(self.data(b)).map(|(gv, bv)| gv * bv).collect();
                        self.acc_grad(&mut grads, a, &contrib);
                    }
                    if self.requires(b) {
                        let contrib: Vec<f64> =
                            g.iter().zip(self.data(a)).map(|(gv, av)| gv * av).collect();
                        self.acc_grad(&mut grads, b, &contrib);
                    }
                }
                Op::Neg(a) => {
                    let contrib: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.acc_grad(&mut grads, a, &contrib);
                }
                Op::Scale(a, c) => {
                    let contrib: Vec<f64> = g.iter().map(|v| c * v).collect();
                    self.acc_grad(&mut grads, a, &contrib);
                }
                Op::AddRowBroadcast(a, bias) => {
                    self.acc_grad(&mut grads, a, &g);
                    if self.requires(bias) {
                        let cols = self.shape(bias)[0];
                        let mut contrib = vec![0.0; cols];
                        for (idx, gv) in g.iter().enumerate() {
                            contrib[idx % cols] += gv;
                        }
                        self.acc_grad(&mut grads, bias, &contrib);
                    }
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].tensor.data;
                    let contrib: Vec<f64> =
                        g.iter().zip(y.iter()).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect();
                    self.acc_grad(&mut grads, a, &contrib);
                }
                Op::Gelu(a) => {
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(self.data(a))
                        .map(|(gv, &xv)| gv * kernels::gelu_grad(xv))
                        .collect();
                    self.acc_grad(&mut grads, a, &contrib);
                }
                Op::Relu(a) => {
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(self.data(a))
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.acc_grad(&mut grads, a, &contrib);
                }
                Op::LeakyRelu(a, slope) => {
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(self.data(a))
                        .map(|(gv, &xv)| if xv >= 0.0 { *gv } else { gv * slope })
                        .collect();
                    self.acc_grad(&mut grads, a, &contrib);
                }
                Op::LogSigmoid(a) => {
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(self.data(a))
                        .map(|(gv, &xv)| gv * kernels::log_sigmoid_grad(xv))
                        .collect();
                    self.acc_grad(&mut grads, a, &contrib);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let nn = self.shape(b)[1];
                    if self.requires(a) {
                        let mut da = vec![0.0; m * k];
                        kernels::mm_nt(&g, self.data(b), m, nn, k, &mut da, false);
                        self.acc_grad(&mut grads, a, &da);
                    }
                    if self.requires(b) {
                        let mut db = vec![0.0; k * nn];
                        kernels::mm_tn(self.data(a), &g, k, m, nn, &mut db, false);
                        self.acc_grad(&mut grads, b, &db);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                    // output is [c, r]; transpose the gradient back
                    let mut contrib = vec![0.0; r * c];
                    for j in 0..c {
                        for ii in 0..r {
                            contrib[ii * c + j] = g[j * r + ii];
                        }
                    }
                    self.acc_grad(&mut grads, a, &contrib);
                }
                Op::Reshape(a) => {
                    self.acc_grad(&mut grads, a, &g);
                }
                Op::ConcatCols(parts) => {
                    let rows = self.shape(i_id(i))[0];
                    let cols = self.shape(i_id(i))[1];
                    let mut off = 0;
                    for &p in &parts {
                        let c = self.shape(p)[1];
                        if self.requires(p) {
                            let mut contrib = vec![0.0; rows * c];
                            for r in 0..rows {
                                contrib[r * c..(r + 1) * c]
                                    .copy_from_slice(&g[r * cols + off..r * cols + off + c]);
                            }
                            self.acc_grad(&mut grads, p, &contrib);
                        }
                        off += c;
                    }
                }
                Op::ConcatChannels(parts) => {
                    let mut off = 0;
                    for &p in &parts {
                        let len = self.data(p).len();
                        if self.requires(p) {
                            self.acc_grad(&mut grads, p, &g[off..off + len]);
                        }
                        off += len;
                    }
                }
                Op::GatherRows(a, indices) => {
                    let c = self.shape(a)[1];
                    let mut contrib = vec![0.0; self.data(a).len()];
                    for (row, &src) in indices.iter().enumerate() {
                        for j in 0..c {
                            contrib[src * c + j] += g[row * c + j];
                        }
                    }
                    self.acc_grad(&mut grads, a, &contrib);
                }
                Op::MeanAll(a) => {
                    let n_el = self.data(a).len();
                    let v = g[0] / n_el as f64;
                    let contrib = vec![v; n_el];
                    self.acc_grad(&mut grads, a, &contrib);
                }
                Op::SumAll(a) => {
                    let contrib = vec![g[0]; self.data(a).len()];
                    self.acc_grad(&mut grads, a, &contrib);
                }
                Op::SoftmaxRows(a) => {
                    let cols = self.shape(a)[1];
                    let y = self.nodes[i].tensor.data.clone();
                    let mut contrib = vec![0.0; y.len()];
                    kernels::softmax_rows_bwd(&g, &y, cols, &mut contrib);
                    self.acc_grad(&mut grads, a, &contrib);
                }
                Op::L2NormalizeRows(a) => {
                    let cols = self.shape(a)[1];
                    let mut contrib = vec![0.0; self.data(a).len()];
                    kernels::l2_normalize_rows_bwd(&g, self.data(a), cols, &mut contrib);
                    self.acc_grad(&mut grads, a, &contrib);
                }
                Op::CrossEntropyDiag(a) => {
                    let s = self.shape(a)[0];
                    let (_, probs) = kernels::cross_entropy_diag_fwd(self.data(a), s);
                    let mut contrib = vec![0.0; s * s];
                    kernels::cross_entropy_diag_bwd(g[0], &probs, s, &mut contrib);
                    self.acc_grad(&mut grads, a, &contrib);
                }
                Op::InstanceNorm { x, eps } => {
                    let s = self.shape(x).to_vec();
                    let mut contrib = vec![0.0; self.data(x).len()];
                    kernels::instance_norm_bwd(&g, self.data(x), s[0], s[1] * s[2], eps, &mut contrib);
                    self.acc_grad(&mut grads, x, &contrib);
                }
                Op::MulChannel { x, gamma } => {
                    let s = self.shape(x).to_vec();
                    let hw = s[1] * s[2];
                    if self.requires(x) {
                        let gm = self.data(gamma);
                        let contrib: Vec<f64> = g
                            .iter()
                            .enumerate()
                            .map(|(idx, gv)| gv * gm[idx / hw])
                            .collect();
                        self.acc_grad(&mut grads, x, &contrib);
                    }
                    if self.requires(gamma) {
                        let xd = self.data(x);
                        let mut contrib = vec![0.0; s[0]];
                        for (idx, gv) in g.iter().enumerate() {
                            contrib[idx / hw] += gv * xd[idx];
                        }
                        self.acc_grad(&mut grads, gamma, &contrib);
                    }
                }
                Op::AddChannel { x, beta } => {
                    self.acc_grad(&mut grads, x, &g);
                    if self.requires(beta) {
                        let s = self.shape(x).to_vec();
                        let hw = s[1] * s[2];
                        let mut contrib = vec![0.0; s[0]];
                        for (idx, gv) in g.iter().enumerate() {
                            contrib[idx / hw] += gv;
                        }
                        self.acc_grad(&mut grads, beta, &contrib);
                    }
                }
                Op::Pad2d { x, pad, mode } => {
                    let s = self.shape(x).to_vec();
                    let mut contrib = vec![0.0; self.data(x).len()];
                    kernels::pad2d_bwd(&g, s[0], s[1], s[2], pad, mode, &mut contrib);
                    self.acc_grad(&mut grads, x, &contrib);
                }
                Op::Conv2d { x, w, b, stride } => {
                    let sx = self.shape(x).to_vec();
                    let sw = self.shape(w).to_vec();
                    let mut dx = vec![0.0; self.data(x).len()];
                    let mut dw = vec![0.0; self.data(w).len()];
                    let mut db = vec![0.0; self.data(b).len()];
                    kernels::conv2d_bwd(
                        &g,
                        self.data(x),
                        self.data(w),
                        sx[0],
                        sx[1],
                        sx[2],
                        sw[0],
                        sw[2],
                        stride,
                        &mut dx,
                        &mut dw,
                        &mut db,
                    );
                    if self.requires(x) {
                        self.acc_grad(&mut grads, x, &dx);
                    }
                    if self.requires(w) {
                        self.acc_grad(&mut grads, w, &dw);
                    }
                    if self.requires(b) {
                        self.acc_grad(&mut grads, b, &db);
                    }
                }
                Op::DepthwiseConv2d { x, w, b, stride } => {
                    let sx = self.shape(x).to_vec();
                    let sw = self.shape(w).to_vec();
                    let mut dx = vec![0.0; self.data(x).len()];
                    let mut dw = vec![0.0; self.data(w).len()];
                    let mut db = vec![0.0; self.data(b).len()];
                    kernels::depthwise_bwd(
                        &g,
                        self.data(x),
                        self.data(w),
                        sx[0],
                        sx[1],
                        sx[2],
                        sw[1],
                        stride,
                        &mut dx,
                        &mut dw,
                        &mut db,
                    );
                    if self.requires(x) {
                        self.acc_grad(&mut grads, x, &dx);
                    }
                    if self.requires(w) {
                        self.acc_grad(&mut grads, w, &dw);
                    }
                    if self.requires(b) {
                        self.acc_grad(&mut grads, b, &db);
                    }
                }
                Op::UpsampleNearest { x, factor } => {
                    let s = self.shape(x).to_vec();
                    let mut contrib = vec![0.0; self.data(x).len()];
                    kernels::upsample_nearest_bwd(&g, s[0], s[1], s[2], factor, &mut contrib);
                    self.acc_grad(&mut grads, x, &contrib);
                }
            }
        }
        Ok(())
    }

    fn acc_grad(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: &[f64]) {
        if !self.requires(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib.iter()) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contrib.to_vec()),
        }
    }
}

#[inline]
fn i_id(i: usize) -> NodeId {
    NodeId(i)
}
