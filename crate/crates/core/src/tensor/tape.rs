use std::fmt;

use super::gemm::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for reporting and for fault injection in the
/// gradient-check self test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    Softmax,
    Relu,
    LayerNorm,
    Embedding,
    CrossEntropy,
    ConcatRows,
    SliceRows,
    Scan,
    SplitHeads,
    MergeHeads,
    Sum,
    Reshape,
}

impl OpKind {
    pub const ALL: [OpKind; 19] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Softmax,
        OpKind::Relu,
        OpKind::LayerNorm,
        OpKind::Embedding,
        OpKind::CrossEntropy,
        OpKind::ConcatRows,
        OpKind::SliceRows,
        OpKind::Scan,
        OpKind::SplitHeads,
        OpKind::MergeHeads,
        OpKind::Sum,
        OpKind::Reshape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Softmax => "softmax_rows",
            OpKind::Relu => "relu",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Embedding => "embedding_lookup",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceRows => "slice_rows",
            OpKind::Scan => "scan",
            OpKind::SplitHeads => "split_heads",
            OpKind::MergeHeads => "merge_heads",
            OpKind::Sum => "sum",
            OpKind::Reshape => "reshape",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Direction of a blocked cumulative sum along the last axis.
///
/// With block size `b` and 1-based positions, `Prefix` computes `x·J` and
/// `Suffix` computes `x·Jᵀ` for `J[i,j] = 1 iff i <= b·ceil(j/b)`. Block size 1
/// gives the plain inclusive prefix and suffix sums (`x·L`, `x·Lᵀ`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanDir {
    Prefix,
    Suffix,
}

impl ScanDir {
    fn adjoint(self) -> ScanDir {
        match self {
            ScanDir::Prefix => ScanDir::Suffix,
            ScanDir::Suffix => ScanDir::Prefix,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Broadcast {
    Same,
    Scalar,
    Row,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: Var,
    },
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Softmax {
        a: Var,
    },
    Relu {
        a: Var,
    },
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    Scan {
        a: Var,
        dir: ScanDir,
        block: usize,
    },
    SplitHeads {
        a: Var,
        batch: usize,
        heads: usize,
    },
    MergeHeads {
        a: Var,
        batch: usize,
        heads: usize,
    },
    Sum {
        a: Var,
    },
    Reshape {
        a: Var,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Binary { kind, .. } => match kind {
                Binary::Add => OpKind::Add,
                Binary::Sub => OpKind::Sub,
                Binary::Mul => OpKind::Mul,
            },
            Op::Scale { .. } => OpKind::Scale,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Relu { .. } => OpKind::Relu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::ConcatRows { .. } => OpKind::ConcatRows,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::Scan { .. } => OpKind::Scan,
            Op::SplitHeads { .. } => OpKind::SplitHeads,
            Op::MergeHeads { .. } => OpKind::MergeHeads,
            Op::Sum { .. } => OpKind::Sum,
            Op::Reshape { .. } => OpKind::Reshape,
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records primitive applications in order; [`Tape::backward`] walks them in
/// reverse. A tape is rebuilt for every forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
    relu_signature: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Corrupts the backward rule of one primitive kind. Only meant for the
    /// negative control of the gradient checker.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Hash of every ReLU input sign seen so far. Two evaluations with equal
    /// signatures took the same branch at every kink.
    pub fn relu_signature(&self) -> u64 {
        self.relu_signature
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            grad: requires_grad.then(|| vec![0.0; value.len()]),
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf (or of an interior node during the last
    /// backward pass). `None` unless the node requires a gradient.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.kind().name(),
            });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ----- forward primitives -------------------------------------------------

    /// Matrix product `a·b` for `[m,k]·[k,n]`, or batched `[g,m,k]·[g,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` for `[m,k]·[n,k]`, or batched `[g,m,k]·[g,n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::shape("matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [r, c]) => {
                let (kb, n) = if trans_b { (*c, *r) } else { (*r, *c) };
                if kb != *k {
                    return Err(mismatch());
                }
                (1, *m, *k, n)
            }
            ([g, m, k], [g2, r, c]) if g == g2 => {
                let (kb, n) = if trans_b { (*c, *r) } else { (*r, *c) };
                if kb != *k {
                    return Err(mismatch());
                }
                (*g, *m, *k, n)
            }
            _ => return Err(mismatch()),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for g in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[g * m * k..],
                    false,
                    &bv[g * k * n..],
                    trans_b,
                    0.0,
                    &mut out[g * m * n..],
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.requires(a) || self.requires(b);
        self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            rg,
        )
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (batch, r, c) = match s.as_slice() {
            [r, c] => (1, *r, *c),
            [g, r, c] => (*g, *r, *c),
            _ => return Err(Error::shape("transpose", format!("rank {}", s.len()))),
        };
        let out = transpose_data(self.value(a).data(), batch, r, c);
        let shape = if s.len() == 2 { vec![c, r] } else { vec![batch, c, r] };
        let rg = self.requires(a);
        self.push(Tensor::from_parts(shape, out), Op::Transpose { a }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let bcast = if sa == sb {
            Broadcast::Same
        } else if sb.iter().product::<usize>() == 1 {
            Broadcast::Scalar
        } else if sb.iter().rev().skip(1).all(|&d| d == 1) && sb.last() == sa.last() {
            Broadcast::Row
        } else {
            let op = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(Error::shape(op, format!("{sa:?} with {sb:?}")));
        };
        let shape = sa.to_vec();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out: Vec<f64> = match bcast {
            Broadcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => av.iter().map(|&x| f(x, bv[0])).collect(),
            Broadcast::Row => {
                let c = bv.len();
                av.iter().enumerate().map(|(i, &x)| f(x, bv[i % c])).collect()
            }
        };
        let rg = self.requires(a) || self.requires(b);
        self.push(Tensor::from_parts(shape, out), Op::Binary { kind, a, b, bcast }, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let t = self.value(a);
        let out = t.data().iter().map(|x| x * c).collect();
        let shape = t.shape().to_vec();
        let rg = self.requires(a);
        self.push(Tensor::from_parts(shape, out), Op::Scale { a, c }, rg)
    }

    /// Softmax over the last axis, stabilised by subtracting each row's max.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        let rg = self.requires(a);
        self.push(Tensor::from_parts(shape, out), Op::Softmax { a }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut sig = self.relu_signature;
        let out = t
            .data()
            .iter()
            .map(|&x| {
                sig = (sig ^ u64::from(x > 0.0)).wrapping_mul(0x0100_0000_01b3).rotate_left(5);
                x.max(0.0)
            })
            .collect();
        let shape = t.shape().to_vec();
        self.relu_signature = sig;
        let rg = self.requires(a);
        self.push(Tensor::from_parts(shape, out), Op::Relu { a }, rg)
    }

    /// Normalises each last-axis row to zero mean and unit variance, then
    /// applies `gain` and `bias` (both of length equal to the row size).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape("layer_norm", format!("row size {c}")));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = t.rows();
        let mut xhat = Vec::with_capacity(t.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for (j, &x) in row.iter().enumerate() {
                let h = (x - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.requires(a) || self.requires(gain) || self.requires(bias);
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("embedding_lookup", "table must be rank 2"));
        }
        if ids.is_empty() {
            return Err(Error::Empty("embedding_lookup"));
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::IndexOutOfRange {
                    what: "token id",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let rg = self.requires(table);
        self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[n, vocab]` logits. `None` targets (padding) are excluded.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} vs {} targets", t.shape(), targets.len()),
            ));
        }
        let v = t.cols();
        let mut probs = t.data().to_vec();
        let mut total = 0.0;
        let mut count = 0;
        for (row, target) in probs.chunks_mut(v).zip(targets) {
            softmax_in_place(row);
            if let Some(id) = *target {
                if id >= v {
                    return Err(Error::IndexOutOfRange {
                        what: "target id",
                        index: id,
                        bound: v,
                    });
                }
                total -= row[id].max(f64::MIN_POSITIVE).ln();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Empty("cross_entropy"));
        }
        let rg = self.requires(logits);
        self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        )
    }

    /// Concatenates along the first axis; trailing axes must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::shape("concat_rows", format!("{s:?} vs trailing {tail:?}")));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(
            Tensor::from_parts(shape, out),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        )
    }

    /// Rows `start..start+len` along the first axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let lead = t.shape()[0];
        if len == 0 {
            return Err(Error::Empty("slice_rows"));
        }
        if start + len > lead {
            return Err(Error::IndexOutOfRange {
                what: "slice_rows end",
                index: start + len,
                bound: lead,
            });
        }
        let stride = t.len() / lead;
        let out = t.data()[start * stride..(start + len) * stride].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let rg = self.requires(a);
        self.push(Tensor::from_parts(shape, out), Op::SliceRows { a, start }, rg)
    }

    /// Blocked cumulative sum along the last axis; see [`ScanDir`].
    pub fn scan(&mut self, a: Var, dir: ScanDir, block: usize) -> Result<Var> {
        if block == 0 {
            return Err(Error::Config("segment size must be at least 1".into()));
        }
        let t = self.value(a);
        let n = t.cols();
        let mut out = vec![0.0; t.len()];
        for (src, dst) in t.data().chunks(n).zip(out.chunks_mut(n)) {
            scan_row(src, dst, dir, block);
        }
        let shape = t.shape().to_vec();
        let rg = self.requires(a);
        self.push(Tensor::from_parts(shape, out), Op::Scan { a, dir, block }, rg)
    }

    /// `[batch·len, heads·dh]` → `[batch·heads, len, dh]`.
    pub fn split_heads(&mut self, a: Var, batch: usize, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let ok = s.len() == 2 && batch > 0 && heads > 0 && s[0] % batch == 0 && s[1] % heads == 0;
        if !ok {
            return Err(Error::shape(
                "split_heads",
                format!("{s:?} into batch {batch}, heads {heads}"),
            ));
        }
        let (len, dh) = (s[0] / batch, s[1] / heads);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..len {
                    let from = (b * len + t) * s[1] + h * dh;
                    let to = ((b * heads + h) * len + t) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let rg = self.requires(a);
        self.push(
            Tensor::from_parts(vec![batch * heads, len, dh], out),
            Op::SplitHeads { a, batch, heads },
            rg,
        )
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: Var, batch: usize, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || batch == 0 || heads == 0 || s[0] != batch * heads {
            return Err(Error::shape(
                "merge_heads",
                format!("{s:?} from batch {batch}, heads {heads}"),
            ));
        }
        let (len, dh) = (s[1], s[2]);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        merge_heads_data(src, &mut out, batch, heads, len, dh);
        let rg = self.requires(a);
        self.push(
            Tensor::from_parts(vec![batch * len, heads * dh], out),
            Op::MergeHeads { a, batch, heads },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.requires(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.requires(a);
        self.push(t, Op::Reshape { a }, rg)
    }

    // ----- backward -----------------------------------------------------------

    /// Accumulates `∂loss/∂x` into every leaf that requires a gradient.
    /// Interior gradients are recomputed on each call; leaf gradients add up
    /// across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(shape));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.requires(loss) {
            return Ok(());
        }
        self.accumulate(loss, &[1.0]);
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = self.nodes[idx].grad.take() else {
                continue;
            };
            if self.fault == Some(self.nodes[idx].op.kind()) {
                g.iter_mut().for_each(|x| *x *= 1.5);
            }
            self.backward_node(idx, &g);
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(g) => g.iter_mut().zip(delta).for_each(|(x, d)| *x += d),
            None => node.grad = Some(delta.to_vec()),
        }
    }

    /// Adds into a gradient buffer through a closure, allocating on first use.
    fn with_grad(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let len = node.value.len();
        f(node.grad.get_or_insert_with(|| vec![0.0; len]));
    }

    fn backward_node(&mut self, idx: usize, g: &[f64]) {
        // Temporarily move the op out so operands can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                if self.requires(a) {
                    let bv = self.value(b).data().to_vec();
                    self.with_grad(a, |ga| {
                        for p in 0..batch {
                            // dA = G·Bᵀ, or G·B when B was used transposed.
                            gemm(
                                m,
                                n,
                                k,
                                &g[p * m * n..],
                                false,
                                &bv[p * k * n..],
                                !trans_b,
                                1.0,
                                &mut ga[p * m * k..],
                            );
                        }
                    });
                }
                if self.requires(b) {
                    let av = self.value(a).data().to_vec();
                    self.with_grad(b, |gb| {
                        for p in 0..batch {
                            if trans_b {
                                // dB = Gᵀ·A  ([n,m]·[m,k])
                                gemm(
                                    n,
                                    m,
                                    k,
                                    &g[p * m * n..],
                                    true,
                                    &av[p * m * k..],
                                    false,
                                    1.0,
                                    &mut gb[p * k * n..],
                                );
                            } else {
                                // dB = Aᵀ·G  ([k,m]·[m,n])
                                gemm(
                                    k,
                                    m,
                                    n,
                                    &av[p * m * k..],
                                    true,
                                    &g[p * m * n..],
                                    false,
                                    1.0,
                                    &mut gb[p * k * n..],
                                );
                            }
                        }
                    });
                }
            }
            &Op::Transpose { a } => {
                let s = self.shape(a).to_vec();
                let (batch, r, c) = if s.len() == 2 { (1, s[0], s[1]) } else { (s[0], s[1], s[2]) };
                // g has shape [.., c, r]
                let back = transpose_data(g, batch, c, r);
                self.accumulate(a, &back);
            }
            &Op::Binary { kind, a, b, bcast } => {
                if self.requires(a) {
                    match kind {
                        Binary::Add | Binary::Sub => self.accumulate(a, g),
                        Binary::Mul => {
                            let bv = self.value(b).data().to_vec();
                            let c = bv.len();
                            self.with_grad(a, |ga| {
                                for (i, x) in ga.iter_mut().enumerate() {
                                    let y = match bcast {
                                        Broadcast::Same => bv[i],
                                        Broadcast::Scalar => bv[0],
                                        Broadcast::Row => bv[i % c],
                                    };
                                    *x += g[i] * y;
                                }
                            });
                        }
                    }
                }
                if self.requires(b) {
                    let av = match kind {
                        Binary::Mul => Some(self.value(a).data().to_vec()),
                        _ => None,
                    };
                    let sign = if kind == Binary::Sub { -1.0 } else { 1.0 };
                    self.with_grad(b, |gb| {
                        let c = gb.len();
                        for (i, &gi) in g.iter().enumerate() {
                            let contrib = match &av {
                                Some(av) => gi * av[i],
                                None => sign * gi,
                            };
                            match bcast {
                                Broadcast::Same => gb[i] += contrib,
                                Broadcast::Scalar => gb[0] += contrib,
                                Broadcast::Row => gb[i % c] += contrib,
                            }
                        }
                    });
                }
            }
            &Op::Scale { a, c } => {
                self.with_grad(a, |ga| ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi * c));
            }
            &Op::Softmax { a } => {
                let y = self.nodes[idx].value.data().to_vec();
                let c = self.nodes[idx].value.cols();
                self.with_grad(a, |ga| {
                    for ((yr, gr), gar) in y.chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            gar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            &Op::Relu { a } => {
                let x = self.value(a).data().to_vec();
                self.with_grad(a, |ga| {
                    for i in 0..ga.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (a, gain, bias) = (*a, *gain, *bias);
                let c = self.value(gain).len();
                if self.requires(a) {
                    let gv = self.value(gain).data().to_vec();
                    self.with_grad(a, |ga| {
                        let mut dxhat = vec![0.0; c];
                        for (r, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                            for j in 0..c {
                                dxhat[j] = gr[j] * gv[j];
                            }
                            let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                            let mean_dh =
                                dxhat.iter().zip(hr).map(|(d, h)| d * h).sum::<f64>() / c as f64;
                            let row = &mut ga[r * c..(r + 1) * c];
                            for j in 0..c {
                                row[j] += rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                            }
                        }
                    });
                }
                self.with_grad(gain, |gg| {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.with_grad(bias, |gb| {
                    for gr in g.chunks(c) {
                        for j in 0..c {
                            gb[j] += gr[j];
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                self.with_grad(*table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / *count as f64;
                self.with_grad(*logits, |gl| {
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        for j in 0..v {
                            gl[r * v + j] += scale * probs[r * v + j];
                        }
                        gl[r * v + t] -= scale;
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            &Op::SliceRows { a, start } => {
                let t = self.value(a);
                let stride = t.len() / t.shape()[0];
                let from = start * stride;
                self.with_grad(a, |ga| {
                    for (x, gi) in ga[from..from + g.len()].iter_mut().zip(g) {
                        *x += gi;
                    }
                });
            }
            &Op::Scan { a, dir, block } => {
                let n = self.value(a).cols();
                let mut back = vec![0.0; g.len()];
                for (src, dst) in g.chunks(n).zip(back.chunks_mut(n)) {
                    scan_row(src, dst, dir.adjoint(), block);
                }
                self.accumulate(a, &back);
            }
            &Op::SplitHeads { a, batch, heads } => {
                let s = self.shape(a).to_vec();
                let (len, dh) = (s[0] / batch, s[1] / heads);
                let mut back = vec![0.0; g.len()];
                merge_heads_data(g, &mut back, batch, heads, len, dh);
                self.accumulate(a, &back);
            }
            &Op::MergeHeads { a, batch, heads } => {
                let s = self.shape(a).to_vec();
                let (len, dh) = (s[1], s[2]);
                let d = heads * dh;
                self.with_grad(a, |ga| {
                    for b in 0..batch {
                        for h in 0..heads {
                            for t in 0..len {
                                let from = (b * len + t) * d + h * dh;
                                let to = ((b * heads + h) * len + t) * dh;
                                for e in 0..dh {
                                    ga[to + e] += g[from + e];
                                }
                            }
                        }
                    }
                });
            }
            &Op::Sum { a } => {
                self.with_grad(a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            &Op::Reshape { a } => self.accumulate(a, g),
        }
        self.nodes[idx].op = op;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn scan_row(src: &[f64], dst: &mut [f64], dir: ScanDir, block: usize) {
    let n = src.len();
    match dir {
        ScanDir::Prefix => {
            // dst[j] = sum of src[..end(j)], end(j) = min(n, block·(j/block + 1))
            let mut acc = 0.0;
            let mut seg_start = 0;
            while seg_start < n {
                let seg_end = (seg_start + block).min(n);
                acc += src[seg_start..seg_end].iter().sum::<f64>();
                dst[seg_start..seg_end].iter_mut().for_each(|x| *x = acc);
                seg_start = seg_end;
            }
        }
        ScanDir::Suffix => {
            // dst[j] = sum of src[start(j)..], start(j) = block·(j/block)
            let mut acc = 0.0;
            let mut seg_end = n;
            while seg_end > 0 {
                let seg_start = ((seg_end - 1) / block) * block;
                acc += src[seg_start..seg_end].iter().rev().sum::<f64>();
                dst[seg_start..seg_end].iter_mut().for_each(|x| *x = acc);
                seg_end = seg_start;
            }
        }
    }
}

fn transpose_data(src: &[f64], batch: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for g in 0..batch {
        let base = g * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = src[base + i * c + j];
            }
        }
    }
    out
}

fn merge_heads_data(src: &[f64], out: &mut [f64], batch: usize, heads: usize, len: usize, dh: usize) {
    let d = heads * dh;
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..len {
                let from = ((b * heads + h) * len + t) * dh;
                let to = (b * len + t) * d + h * dh;
                out[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
}
