use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::tensor::Tensor;
use super::{NumericsError, Result};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Identifies a node on a particular tape. Tensors carry this so an op can
/// tell whether its inputs are tracked and by whom.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(super) struct NodeRef {
    pub tape: u64,
    pub id: usize,
}

struct Node {
    shape: [usize; 2],
    grad: Vec<f64>,
}

/// An op input: the value buffer plus the node id when the input is tracked.
struct Arg {
    data: Arc<Vec<f64>>,
    shape: [usize; 2],
    node: Option<usize>,
}

impl Arg {
    fn rows(&self) -> usize {
        self.shape[0]
    }
    fn cols(&self) -> usize {
        self.shape[1]
    }
}

enum Op {
    /// out = a · b
    Matmul { a: Arg, b: Arg },
    /// out = a + b, same shape
    Add { a: Arg, b: Arg },
    /// out = a - b
    Sub { a: Arg, b: Arg },
    /// out = a ⊙ b
    Mul { a: Arg, b: Arg },
    /// out = a + row broadcast over rows of a
    AddRow { a: Arg, row: Arg },
    /// out = c · a
    Scale { a: Arg, c: f64 },
    /// out = a + c
    AddScalar { a: Arg },
    /// out = a · s for a 1x1 tensor s
    MulScalar { a: Arg, s: Arg },
    Sigmoid { a: Arg, out: Arc<Vec<f64>> },
    Tanh { a: Arg, out: Arc<Vec<f64>> },
    Relu { a: Arg },
    Softplus { a: Arg },
    Clamp { a: Arg, lo: f64, hi: f64 },
    LayerNorm { x: Arg, gamma: Arg, beta: Arg, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Arg, ids: Vec<usize> },
    SoftmaxRows { a: Arg, probs: Arc<Vec<f64>> },
    /// Mean over rows of the cross-entropy between softmax(logits) and targets.
    SoftmaxCrossEntropy { logits: Arg, probs: Vec<f64>, targets: Vec<usize> },
    /// Mean over rows of KL(softmax(p) || softmax(q)); gradient flows to p only.
    KlDivergence { p: Arg, lp: Vec<f64>, lq: Vec<f64>, row_kl: Vec<f64> },
    ConcatRows { parts: Vec<Arg> },
    ConcatCols { parts: Vec<Arg> },
    SliceRows { a: Arg, start: usize },
    SliceCols { a: Arg, start: usize },
    Transpose { a: Arg },
    MeanRows { a: Arg },
    Sum { a: Arg },
    Mean { a: Arg },
}

struct Record {
    out: usize,
    op: Op,
}

/// Define-by-run gradient tape.
///
/// Ops execute eagerly and append a record when any input is tracked. A
/// [`Tape::backward`] sweep walks the records in reverse and accumulates
/// gradients additively into every tracked node, so calling it twice doubles
/// the gradients and backward passes from several losses sum, which is how
/// composite objectives are combined here.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    records: Vec<Record>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            records: Vec::new(),
        }
    }

    /// Number of tracked nodes (leaves plus recorded op outputs).
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Number of recorded ops. Ops whose inputs are all constants do not
    /// record anything.
    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    /// Registers `t`'s value as a tracked leaf and returns the tracked handle.
    /// Gradients accumulate on the leaf and are read back with [`Tape::grad`].
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape: t.shape(),
            grad: vec![0.0; t.numel()],
        });
        Tensor::attached(
            t.rows(),
            t.cols(),
            t.buffer(),
            NodeRef { tape: self.id, id },
        )
    }

    fn arg(&self, t: &Tensor, op: &'static str) -> Result<Arg> {
        match t.node() {
            Some(nr) if nr.tape == self.id => Ok(Arg {
                data: t.buffer(),
                shape: t.shape(),
                node: Some(nr.id),
            }),
            Some(_) => Err(NumericsError::Contract {
                op,
                msg: "input tensor is tracked by a different tape".into(),
            }),
            None => Ok(Arg {
                data: t.buffer(),
                shape: t.shape(),
                node: None,
            }),
        }
    }

    fn push(&mut self, shape: [usize; 2], data: Vec<f64>, op: Op) -> Tensor {
        let tracked = op_has_tracked_input(&op);
        let arc = Arc::new(data);
        if !tracked {
            return Tensor::from_arc(shape, arc);
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape,
            grad: vec![0.0; shape[0] * shape[1]],
        });
        self.records.push(Record { out: id, op });
        Tensor::attached(shape[0], shape[1], arc, NodeRef { tape: self.id, id })
    }

    /// Matrix product of `a` (r×k) and `b` (k×c).
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.cols() != b.rows() {
            return Err(NumericsError::DimensionMismatch {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let (r, k, c) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; r * c];
        mm_nn(a.data(), r, k, b.data(), c, &mut out);
        let (a, b) = (self.arg(a, "matmul")?, self.arg(b, "matmul")?);
        Ok(self.push([r, c], out, Op::Matmul { a, b }))
    }

    fn zip_same_shape(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Arg, Arg) -> Op,
    ) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(NumericsError::DimensionMismatch {
                op: op_name,
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let out: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let (aa, ba) = (self.arg(a, op_name)?, self.arg(b, op_name)?);
        Ok(self.push(a.shape(), out, make(aa, ba)))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_same_shape(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    /// Elementwise difference `a - b`.
    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_same_shape(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    /// Hadamard product of two same-shape tensors.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_same_shape(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    /// Adds a 1×m row vector to every row of an t×m matrix.
    pub fn add_row(&mut self, a: &Tensor, row: &Tensor) -> Result<Tensor> {
        if row.rows() != 1 || row.cols() != a.cols() {
            return Err(NumericsError::DimensionMismatch {
                op: "add_row",
                lhs: a.shape(),
                rhs: row.shape(),
            });
        }
        let cols = a.cols();
        let out: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + row.data()[i % cols])
            .collect();
        let (aa, ra) = (self.arg(a, "add_row")?, self.arg(row, "add_row")?);
        Ok(self.push(a.shape(), out, Op::AddRow { a: aa, row: ra }))
    }

    /// Multiplies every element by the constant `c`.
    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let out: Vec<f64> = a.data().iter().map(|&v| c * v).collect();
        let aa = self.arg(a, "scale")?;
        Ok(self.push(a.shape(), out, Op::Scale { a: aa, c }))
    }

    /// Adds the constant `c` to every element.
    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let out: Vec<f64> = a.data().iter().map(|&v| v + c).collect();
        let aa = self.arg(a, "add_scalar")?;
        Ok(self.push(a.shape(), out, Op::AddScalar { a: aa }))
    }

    /// Multiplies every element of `a` by the 1×1 tensor `s`, tracking
    /// gradients into both.
    pub fn mul_scalar(&mut self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        if s.shape() != [1, 1] {
            return Err(NumericsError::DimensionMismatch {
                op: "mul_scalar",
                lhs: a.shape(),
                rhs: s.shape(),
            });
        }
        let sv = s.data()[0];
        let out: Vec<f64> = a.data().iter().map(|&v| sv * v).collect();
        let (aa, sa) = (self.arg(a, "mul_scalar")?, self.arg(s, "mul_scalar")?);
        Ok(self.push(a.shape(), out, Op::MulScalar { a: aa, s: sa }))
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = a.data().iter().map(|&v| sigmoid(v)).collect();
        let aa = self.arg(a, "sigmoid")?;
        let arc = Arc::new(out);
        Ok(self.push_with_saved(a.shape(), arc.clone(), Op::Sigmoid { a: aa, out: arc }))
    }

    pub fn tanh(&mut self, a: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = a.data().iter().map(|&v| v.tanh()).collect();
        let aa = self.arg(a, "tanh")?;
        let arc = Arc::new(out);
        Ok(self.push_with_saved(a.shape(), arc.clone(), Op::Tanh { a: aa, out: arc }))
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        // f64::max would silently launder NaN into 0; keep it poisonous.
        let out: Vec<f64> = a
            .data()
            .iter()
            .map(|&v| if v.is_nan() { v } else { v.max(0.0) })
            .collect();
        let aa = self.arg(a, "relu")?;
        Ok(self.push(a.shape(), out, Op::Relu { a: aa }))
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&mut self, a: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = a.data().iter().map(|&v| softplus(v)).collect();
        let aa = self.arg(a, "softplus")?;
        Ok(self.push(a.shape(), out, Op::Softplus { a: aa }))
    }

    /// Clamps every element into [lo, hi]. The gradient passes only where the
    /// input lies strictly inside the interval.
    pub fn clamp(&mut self, a: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        if !(lo <= hi) {
            return Err(NumericsError::Contract {
                op: "clamp",
                msg: format!("invalid interval [{lo}, {hi}]"),
            });
        }
        let out: Vec<f64> = a.data().iter().map(|&v| v.clamp(lo, hi)).collect();
        let aa = self.arg(a, "clamp")?;
        Ok(self.push(a.shape(), out, Op::Clamp { a: aa, lo, hi }))
    }

    /// Row-wise layer normalization with learned gain `gamma` and bias `beta`
    /// (both 1×h). Normalizes each row of `x` to zero mean and unit variance
    /// with the biased variance estimate.
    pub fn layer_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let h = x.cols();
        for (p, name) in [(gamma, "gamma"), (beta, "beta")] {
            if p.shape() != [1, h] {
                return Err(NumericsError::Contract {
                    op: "layer_norm",
                    msg: format!("{name} must be 1x{h}, got {:?}", p.shape()),
                });
            }
        }
        let t = x.rows();
        let mut out = vec![0.0; t * h];
        let mut xhat = vec![0.0; t * h];
        let mut rstd = vec![0.0; t];
        let (g, b) = (gamma.data(), beta.data());
        for r in 0..t {
            let row = &x.data()[r * h..(r + 1) * h];
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..h {
                let xh = (row[c] - mean) * rs;
                xhat[r * h + c] = xh;
                out[r * h + c] = g[c] * xh + b[c];
            }
        }
        let (xa, ga, ba) = (
            self.arg(x, "layer_norm")?,
            self.arg(gamma, "layer_norm")?,
            self.arg(beta, "layer_norm")?,
        );
        Ok(self.push(
            [t, h],
            out,
            Op::LayerNorm { x: xa, gamma: ga, beta: ba, xhat, rstd },
        ))
    }

    /// Gathers rows of `table` (v×h) at the given ids, producing a t×h matrix.
    pub fn embedding(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (v, h) = (table.rows(), table.cols());
        if ids.is_empty() {
            return Err(NumericsError::Contract {
                op: "embedding",
                msg: "empty id list".into(),
            });
        }
        for &id in ids {
            if id >= v {
                return Err(NumericsError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
        }
        let mut out = vec![0.0; ids.len() * h];
        for (r, &id) in ids.iter().enumerate() {
            out[r * h..(r + 1) * h].copy_from_slice(&table.data()[id * h..(id + 1) * h]);
        }
        let ta = self.arg(table, "embedding")?;
        Ok(self.push(
            [ids.len(), h],
            out,
            Op::Embedding { table: ta, ids: ids.to_vec() },
        ))
    }

    /// Softmax applied independently to each row.
    pub fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = (a.rows(), a.cols());
        let lp = log_softmax_rows(a.data(), r, c);
        let probs: Vec<f64> = lp.iter().map(|&v| v.exp()).collect();
        let aa = self.arg(a, "softmax_rows")?;
        let arc = Arc::new(probs);
        Ok(self.push_with_saved([r, c], arc.clone(), Op::SoftmaxRows { a: aa, probs: arc }))
    }

    /// Mean over rows of the cross-entropy between `softmax(logits)` and the
    /// one-hot `targets`. Returns a 1×1 tensor.
    pub fn softmax_cross_entropy(&mut self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        let (b, c) = (logits.rows(), logits.cols());
        if targets.len() != b {
            return Err(NumericsError::DimensionMismatch {
                op: "softmax_cross_entropy",
                lhs: logits.shape(),
                rhs: [1, targets.len()],
            });
        }
        for &t in targets {
            if t >= c {
                return Err(NumericsError::IndexOutOfRange {
                    op: "softmax_cross_entropy",
                    index: t,
                    size: c,
                });
            }
        }
        let lp = log_softmax_rows(logits.data(), b, c);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -lp[r * c + t])
            .sum::<f64>()
            / b as f64;
        let probs: Vec<f64> = lp.iter().map(|&v| v.exp()).collect();
        let la = self.arg(logits, "softmax_cross_entropy")?;
        Ok(self.push(
            [1, 1],
            vec![loss],
            Op::SoftmaxCrossEntropy { logits: la, probs, targets: targets.to_vec() },
        ))
    }

    /// Mean over rows of KL(softmax(p) || softmax(q)). The gradient flows into
    /// `p` only; `q` is treated as a constant reference distribution. Returns
    /// a 1×1 tensor; identical logits give exactly zero.
    pub fn kl_divergence(&mut self, p: &Tensor, q: &Tensor) -> Result<Tensor> {
        if p.shape() != q.shape() {
            return Err(NumericsError::DimensionMismatch {
                op: "kl_divergence",
                lhs: p.shape(),
                rhs: q.shape(),
            });
        }
        let (b, c) = (p.rows(), p.cols());
        let lp = log_softmax_rows(p.data(), b, c);
        let lq = log_softmax_rows(q.data(), b, c);
        let mut row_kl = vec![0.0; b];
        for r in 0..b {
            row_kl[r] = (0..c)
                .map(|i| {
                    let idx = r * c + i;
                    lp[idx].exp() * (lp[idx] - lq[idx])
                })
                .sum();
        }
        let loss = row_kl.iter().sum::<f64>() / b as f64;
        let pa = self.arg(p, "kl_divergence")?;
        Ok(self.push([1, 1], vec![loss], Op::KlDivergence { p: pa, lp, lq, row_kl }))
    }

    /// Stacks tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(NumericsError::Contract {
                op: "concat_rows",
                msg: "no tensors to concatenate".into(),
            });
        }
        let c = parts[0].cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            if p.cols() != c {
                return Err(NumericsError::DimensionMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
            rows += p.rows();
            out.extend_from_slice(p.data());
        }
        let args = parts
            .iter()
            .map(|p| self.arg(p, "concat_rows"))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.push([rows, c], out, Op::ConcatRows { parts: args }))
    }

    /// Joins tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(NumericsError::Contract {
                op: "concat_cols",
                msg: "no tensors to concatenate".into(),
            });
        }
        let r = parts[0].rows();
        let mut cols = 0;
        for p in parts {
            if p.rows() != r {
                return Err(NumericsError::DimensionMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
            cols += p.cols();
        }
        let mut out = vec![0.0; r * cols];
        let mut offset = 0;
        for p in parts {
            let pc = p.cols();
            for row in 0..r {
                out[row * cols + offset..row * cols + offset + pc]
                    .copy_from_slice(&p.data()[row * pc..(row + 1) * pc]);
            }
            offset += pc;
        }
        let args = parts
            .iter()
            .map(|p| self.arg(p, "concat_cols"))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.push([r, cols], out, Op::ConcatCols { parts: args }))
    }

    /// Rows `start..end` of `a` as a new tensor.
    pub fn slice_rows(&mut self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > a.rows() {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                size: a.rows(),
            });
        }
        let c = a.cols();
        let out = a.data()[start * c..end * c].to_vec();
        let aa = self.arg(a, "slice_rows")?;
        Ok(self.push([end - start, c], out, Op::SliceRows { a: aa, start }))
    }

    /// Columns `start..end` of `a` as a new tensor.
    pub fn slice_cols(&mut self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > a.cols() {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                size: a.cols(),
            });
        }
        let (r, c) = (a.rows(), a.cols());
        let w = end - start;
        let mut out = vec![0.0; r * w];
        for row in 0..r {
            out[row * w..(row + 1) * w].copy_from_slice(&a.data()[row * c + start..row * c + end]);
        }
        let aa = self.arg(a, "slice_cols")?;
        Ok(self.push([r, w], out, Op::SliceCols { a: aa, start }))
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = (a.rows(), a.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.data()[i * c + j];
            }
        }
        let aa = self.arg(a, "transpose")?;
        Ok(self.push([c, r], out, Op::Transpose { a: aa }))
    }

    /// Column-wise mean over rows: t×h collapses to 1×h.
    pub fn mean_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = (a.rows(), a.cols());
        let mut out = vec![0.0; c];
        for row in 0..r {
            for col in 0..c {
                out[col] += a.data()[row * c + col];
            }
        }
        for v in &mut out {
            *v /= r as f64;
        }
        let aa = self.arg(a, "mean_rows")?;
        Ok(self.push([1, c], out, Op::MeanRows { a: aa }))
    }

    /// Sum of all elements as a 1×1 tensor.
    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        let s = a.data().iter().sum::<f64>();
        let aa = self.arg(a, "sum")?;
        Ok(self.push([1, 1], vec![s], Op::Sum { a: aa }))
    }

    /// Mean of all elements as a 1×1 tensor.
    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        let m = a.data().iter().sum::<f64>() / a.numel() as f64;
        let aa = self.arg(a, "mean")?;
        Ok(self.push([1, 1], vec![m], Op::Mean { a: aa }))
    }

    fn push_with_saved(&mut self, shape: [usize; 2], data: Arc<Vec<f64>>, op: Op) -> Tensor {
        let tracked = op_has_tracked_input(&op);
        if !tracked {
            return Tensor::from_arc(shape, data);
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape,
            grad: vec![0.0; shape[0] * shape[1]],
        });
        self.records.push(Record { out: id, op });
        Tensor::attached(shape[0], shape[1], data, NodeRef { tape: self.id, id })
    }

    /// Runs reverse-mode accumulation from a 1×1 tracked loss. Gradients add
    /// into the persistent per-node buffers, so separate backward calls from
    /// the pieces of a composite loss are equivalent to one call on their sum.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        let root = match loss.node() {
            Some(nr) if nr.tape == self.id => nr.id,
            _ => {
                return Err(NumericsError::Contract {
                    op: "backward",
                    msg: "loss is not tracked by this tape".into(),
                })
            }
        };
        if loss.numel() != 1 {
            return Err(NumericsError::Contract {
                op: "backward",
                msg: format!("loss must be 1x1, got {:?}", loss.shape()),
            });
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[root] = Some(vec![1.0]);
        let nodes = &mut self.nodes;
        for rec in self.records.iter().rev() {
            let g = match adjoints[rec.out].take() {
                Some(g) => g,
                None => continue,
            };
            backprop(&rec.op, &g, nodes[rec.out].shape, &mut adjoints);
            for (dst, src) in nodes[rec.out].grad.iter_mut().zip(&g) {
                *dst += src;
            }
        }
        // Leaves have no record; fold their remaining adjoints into the grads.
        for (id, adj) in adjoints.iter().enumerate() {
            if let Some(a) = adj {
                for (dst, src) in nodes[id].grad.iter_mut().zip(a) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient for a tensor tracked by this tape, as a detached
    /// tensor of the same shape. `None` for untracked tensors.
    pub fn grad(&self, t: &Tensor) -> Option<Tensor> {
        match t.node() {
            Some(nr) if nr.tape == self.id => {
                let node = &self.nodes[nr.id];
                Some(Tensor::from_vec(
                    node.shape[0],
                    node.shape[1],
                    node.grad.clone(),
                ))
            }
            _ => None,
        }
    }

    /// Clears every accumulated gradient while keeping the graph intact.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn op_args(op: &Op) -> Vec<&Arg> {
    match op {
        Op::Matmul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
            vec![a, b]
        }
        Op::AddRow { a, row } => vec![a, row],
        Op::MulScalar { a, s } => vec![a, s],
        Op::Scale { a, .. }
        | Op::AddScalar { a }
        | Op::Sigmoid { a, .. }
        | Op::Tanh { a, .. }
        | Op::Relu { a }
        | Op::Softplus { a }
        | Op::Clamp { a, .. }
        | Op::SoftmaxRows { a, .. }
        | Op::SliceRows { a, .. }
        | Op::SliceCols { a, .. }
        | Op::Transpose { a }
        | Op::MeanRows { a }
        | Op::Sum { a }
        | Op::Mean { a } => vec![a],
        Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
        Op::Embedding { table, .. } => vec![table],
        Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
        Op::KlDivergence { p, .. } => vec![p],
        Op::ConcatRows { parts } | Op::ConcatCols { parts } => parts.iter().collect(),
    }
}

fn op_has_tracked_input(op: &Op) -> bool {
    op_args(op).iter().any(|a| a.node.is_some())
}

/// Adds `contrib` into the adjoint slot for node `id`, allocating it lazily.
fn accumulate(adjoints: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = adjoints[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn backprop(op: &Op, g: &[f64], out_shape: [usize; 2], adjoints: &mut [Option<Vec<f64>>]) {
    match op {
        Op::Matmul { a, b } => {
            let (r, k, c) = (a.rows(), a.cols(), b.cols());
            if let Some(id) = a.node {
                accumulate(adjoints, id, r * k, |slot| {
                    mm_nt(g, r, c, &b.data, k, slot);
                });
            }
            if let Some(id) = b.node {
                accumulate(adjoints, id, k * c, |slot| {
                    mm_tn(&a.data, r, k, g, c, slot);
                });
            }
        }
        Op::Add { a, b } => {
            for arg in [a, b] {
                if let Some(id) = arg.node {
                    accumulate(adjoints, id, g.len(), |slot| {
                        for (s, &gv) in slot.iter_mut().zip(g) {
                            *s += gv;
                        }
                    });
                }
            }
        }
        Op::Sub { a, b } => {
            if let Some(id) = a.node {
                accumulate(adjoints, id, g.len(), |slot| {
                    for (s, &gv) in slot.iter_mut().zip(g) {
                        *s += gv;
                    }
                });
            }
            if let Some(id) = b.node {
                accumulate(adjoints, id, g.len(), |slot| {
                    for (s, &gv) in slot.iter_mut().zip(g) {
                        *s -= gv;
                    }
                });
            }
        }
        Op::Mul { a, b } => {
            if let Some(id) = a.node {
                accumulate(adjoints, id, g.len(), |slot| {
                    for i in 0..g.len() {
                        slot[i] += g[i] * b.data[i];
                    }
                });
            }
            if let Some(id) = b.node {
                accumulate(adjoints, id, g.len(), |slot| {
                    for i in 0..g.len() {
                        slot[i] += g[i] * a.data[i];
                    }
                });
            }
        }
        Op::AddRow { a, row } => {
            let cols = a.cols();
            if let Some(id) = a.node {
                accumulate(adjoints, id, g.len(), |slot| {
                    for (s, &gv) in slot.iter_mut().zip(g) {
                        *s += gv;
                    }
                });
            }
            if let Some(id) = row.node {
                accumulate(adjoints, id, cols, |slot| {
                    for (i, &gv) in g.iter().enumerate() {
                        slot[i % cols] += gv;
                    }
                });
            }
        }
        Op::Scale { a, c } => {
            if let Some(id) = a.node {
                accumulate(adjoints, id, g.len(), |slot| {
                    for (s, &gv) in slot.iter_mut().zip(g) {
                        *s += c * gv;
                    }
                });
            }
        }
        Op::AddScalar { a } => {
            if let Some(id) = a.node {
                accumulate(adjoints, id, g.len(), |slot| {
                    for (s, &gv) in slot.iter_mut().zip(g) {
                        *s += gv;
                    }
                });
            }
        }
        Op::MulScalar { a, s } => {
            let sv = s.data[0];
            if let Some(id) = a.node {
                accumulate(adjoints, id, g.len(), |slot| {
                    for (sl, &gv) in slot.iter_mut().zip(g) {
                        *sl += sv * gv;
                    }
                });
            }
            if let Some(id) = s.node {
                let dot: f64 = g.iter().zip(a.data.iter()).map(|(&gv, &av)| gv * av).sum();
                accumulate(adjoints, id, 1, |slot| slot[0] += dot);
            }
        }
        Op::Sigmoid { a, out } => {
            if let Some(id) = a.node {
                accumulate(adjoints, id, g.len(), |slot| {
                    for i in 0..g.len() {
                        slot[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }
        }
        Op::Tanh { a, out } => {
            if let Some(id) = a.node {
                accumulate(adjoints, id, g.len(), |slot| {
                    for i in 0..g.len() {
                        slot[i] += g[i] * (1.0 - out[i] * out[i]);
                    }
                });
            }
        }
        Op::Relu { a } => {
            if let Some(id) = a.node {
                accumulate(adjoints, id, g.len(), |slot| {
                    for i in 0..g.len() {
                        if a.data[i] > 0.0 {
                            slot[i] += g[i];
                        }
                    }
                });
            }
        }
        Op::Softplus { a } => {
            if let Some(id) = a.node {
                accumulate(adjoints, id, g.len(), |slot| {
                    for i in 0..g.len() {
                        slot[i] += g[i] * sigmoid(a.data[i]);
                    }
                });
            }
        }
        Op::Clamp { a, lo, hi } => {
            if let Some(id) = a.node {
                accumulate(adjoints, id, g.len(), |slot| {
                    for i in 0..g.len() {
                        if a.data[i] > *lo && a.data[i] < *hi {
                            slot[i] += g[i];
                        }
                    }
                });
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let (t, h) = (x.rows(), x.cols());
            let hf = h as f64;
            if let Some(id) = x.node {
                accumulate(adjoints, id, t * h, |slot| {
                    for r in 0..t {
                        let grow = &g[r * h..(r + 1) * h];
                        let xrow = &xhat[r * h..(r + 1) * h];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        let mut gg = vec![0.0; h];
                        for c in 0..h {
                            gg[c] = grow[c] * gamma.data[c];
                            m1 += gg[c];
                            m2 += gg[c] * xrow[c];
                        }
                        m1 /= hf;
                        m2 /= hf;
                        for c in 0..h {
                            slot[r * h + c] += rstd[r] * (gg[c] - m1 - xrow[c] * m2);
                        }
                    }
                });
            }
            if let Some(id) = gamma.node {
                accumulate(adjoints, id, h, |slot| {
                    for r in 0..t {
                        for c in 0..h {
                            slot[c] += g[r * h + c] * xhat[r * h + c];
                        }
                    }
                });
            }
            if let Some(id) = beta.node {
                accumulate(adjoints, id, h, |slot| {
                    for r in 0..t {
                        for c in 0..h {
                            slot[c] += g[r * h + c];
                        }
                    }
                });
            }
        }
        Op::Embedding { table, ids } => {
            let h = table.cols();
            if let Some(id) = table.node {
                accumulate(adjoints, id, table.rows() * h, |slot| {
                    for (r, &tok) in ids.iter().enumerate() {
                        for c in 0..h {
                            slot[tok * h + c] += g[r * h + c];
                        }
                    }
                });
            }
        }
        Op::SoftmaxRows { a, probs } => {
            let (r, c) = (a.rows(), a.cols());
            if let Some(id) = a.node {
                accumulate(adjoints, id, r * c, |slot| {
                    for row in 0..r {
                        let p = &probs[row * c..(row + 1) * c];
                        let grow = &g[row * c..(row + 1) * c];
                        let dot: f64 = grow.iter().zip(p).map(|(&gv, &pv)| gv * pv).sum();
                        for i in 0..c {
                            slot[row * c + i] += p[i] * (grow[i] - dot);
                        }
                    }
                });
            }
        }
        Op::SoftmaxCrossEntropy { logits, probs, targets } => {
            let (b, c) = (logits.rows(), logits.cols());
            let scale = g[0] / b as f64;
            if let Some(id) = logits.node {
                accumulate(adjoints, id, b * c, |slot| {
                    for r in 0..b {
                        for i in 0..c {
                            let onehot = if targets[r] == i { 1.0 } else { 0.0 };
                            slot[r * c + i] += scale * (probs[r * c + i] - onehot);
                        }
                    }
                });
            }
        }
        Op::KlDivergence { p, lp, lq, row_kl } => {
            let (b, c) = (p.rows(), p.cols());
            let scale = g[0] / b as f64;
            if let Some(id) = p.node {
                accumulate(adjoints, id, b * c, |slot| {
                    for r in 0..b {
                        for i in 0..c {
                            let idx = r * c + i;
                            slot[idx] += scale * lp[idx].exp() * ((lp[idx] - lq[idx]) - row_kl[r]);
                        }
                    }
                });
            }
        }
        Op::ConcatRows { parts } => {
            let mut row = 0;
            let cols = out_shape[1];
            for part in parts {
                let pr = part.rows();
                if let Some(id) = part.node {
                    let base = row * cols;
                    accumulate(adjoints, id, pr * cols, |slot| {
                        for (s, &gv) in slot.iter_mut().zip(&g[base..base + pr * cols]) {
                            *s += gv;
                        }
                    });
                }
                row += pr;
            }
        }
        Op::ConcatCols { parts } => {
            let rows = out_shape[0];
            let total = out_shape[1];
            let mut offset = 0;
            for part in parts {
                let pc = part.cols();
                if let Some(id) = part.node {
                    accumulate(adjoints, id, rows * pc, |slot| {
                        for r in 0..rows {
                            for c in 0..pc {
                                slot[r * pc + c] += g[r * total + offset + c];
                            }
                        }
                    });
                }
                offset += pc;
            }
        }
        Op::SliceRows { a, start } => {
            let c = a.cols();
            if let Some(id) = a.node {
                let base = start * c;
                accumulate(adjoints, id, a.rows() * c, |slot| {
                    for (i, &gv) in g.iter().enumerate() {
                        slot[base + i] += gv;
                    }
                });
            }
        }
        Op::SliceCols { a, start } => {
            let (r, c) = (a.rows(), a.cols());
            let w = out_shape[1];
            if let Some(id) = a.node {
                accumulate(adjoints, id, r * c, |slot| {
                    for row in 0..r {
                        for col in 0..w {
                            slot[row * c + start + col] += g[row * w + col];
                        }
                    }
                });
            }
        }
        Op::Transpose { a } => {
            let (r, c) = (a.rows(), a.cols());
            if let Some(id) = a.node {
                accumulate(adjoints, id, r * c, |slot| {
                    for i in 0..r {
                        for j in 0..c {
                            slot[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
        }
        Op::MeanRows { a } => {
            let (r, c) = (a.rows(), a.cols());
            let inv = 1.0 / r as f64;
            if let Some(id) = a.node {
                accumulate(adjoints, id, r * c, |slot| {
                    for row in 0..r {
                        for col in 0..c {
                            slot[row * c + col] += g[col] * inv;
                        }
                    }
                });
            }
        }
        Op::Sum { a } => {
            if let Some(id) = a.node {
                accumulate(adjoints, id, a.rows() * a.cols(), |slot| {
                    for s in slot.iter_mut() {
                        *s += g[0];
                    }
                });
            }
        }
        Op::Mean { a } => {
            let inv = 1.0 / (a.rows() * a.cols()) as f64;
            if let Some(id) = a.node {
                accumulate(adjoints, id, a.rows() * a.cols(), |slot| {
                    for s in slot.iter_mut() {
                        *s += g[0] * inv;
                    }
                });
            }
        }
    }
}

/// out += a (r×k) · b (k×c)
///
/// No zero-skip shortcuts: 0·inf and 0·NaN must stay NaN so diverged values
/// poison the loss instead of vanishing.
fn mm_nn(a: &[f64], r: usize, k: usize, b: &[f64], c: usize, out: &mut [f64]) {
    for i in 0..r {
        for l in 0..k {
            let av = a[i * k + l];
            let brow = &b[l * c..(l + 1) * c];
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out += g (r×c) · bᵀ where b is (k×c); result is r×k.
fn mm_nt(g: &[f64], r: usize, c: usize, b: &[f64], k: usize, out: &mut [f64]) {
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        for l in 0..k {
            let brow = &b[l * c..(l + 1) * c];
            let mut acc = 0.0;
            for j in 0..c {
                acc += grow[j] * brow[j];
            }
            out[i * k + l] += acc;
        }
    }
}

/// out += aᵀ · g where a is (r×k) and g is (r×c); result is k×c.
fn mm_tn(a: &[f64], r: usize, k: usize, g: &[f64], c: usize, out: &mut [f64]) {
    for row in 0..r {
        for l in 0..k {
            let av = a[row * k + l];
            let grow = &g[row * c..(row + 1) * c];
            let orow = &mut out[l * c..(l + 1) * c];
            for j in 0..c {
                orow[j] += av * grow[j];
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-wise log-softmax with the max-subtraction trick.
fn log_softmax_rows(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for c in 0..cols {
            out[r * cols + c] = row[c] - lse;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::NumericsError;
    use super::*;

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), [2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 2);
        match tape.matmul(&a, &b) {
            Err(NumericsError::DimensionMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, [2, 3]);
                assert_eq!(rhs, [2, 2]);
            }
            other => panic!("expected dimension mismatch, got {other:?}"),
        }
    }

    #[test]
    fn constant_inputs_record_nothing() {
        let mut tape = Tape::new();
        let a = Tensor::filled(2, 2, 1.5);
        let b = Tensor::filled(2, 2, -0.5);
        let c = tape.add(&a, &b).unwrap();
        let _ = tape.mul(&c, &a).unwrap();
        assert_eq!(tape.num_records(), 0);
        assert_eq!(tape.num_nodes(), 0);
        assert!(!c.requires_grad());
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::row(vec![0.3, -1.2, 0.7]));
        let y = tape.tanh(&x).unwrap();
        let loss = tape.sum(&y).unwrap();
        tape.backward(&loss).unwrap();
        let g1 = tape.grad(&x).unwrap();
        tape.backward(&loss).unwrap();
        let g2 = tape.grad(&x).unwrap();
        for i in 0..3 {
            assert!((g2.data()[i] - 2.0 * g1.data()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn separate_backwards_sum_like_a_joint_loss() {
        let build = |tape: &mut Tape| {
            let x = tape.leaf(&Tensor::row(vec![0.4, -0.9]));
            let s = tape.sigmoid(&x).unwrap();
            let l1 = tape.sum(&s).unwrap();
            let sq = tape.mul(&x, &x).unwrap();
            let l2 = tape.mean(&sq).unwrap();
            (x, l1, l2)
        };
        let mut t1 = Tape::new();
        let (x1, a, b) = build(&mut t1);
        t1.backward(&a).unwrap();
        t1.backward(&b).unwrap();
        let split = t1.grad(&x1).unwrap();

        let mut t2 = Tape::new();
        let (x2, a, b) = build(&mut t2);
        let total = t2.add(&a, &b).unwrap();
        t2.backward(&total).unwrap();
        let joint = t2.grad(&x2).unwrap();
        assert!(split.max_abs_diff(&joint) < 1e-15);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_c() {
        let mut tape = Tape::new();
        let logits = Tensor::zeros(4, 3);
        let loss = tape
            .softmax_cross_entropy(&logits, &[0, 1, 2, 0])
            .unwrap();
        assert!((loss.item() - 3.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_hand_value() {
        // softmax([0,0]) = [1/2,1/2] against softmax([ln 3, 0]) = [3/4,1/4]:
        // KL = 0.5 ln(2/3) + 0.5 ln 2 = ln 2 - 0.5 ln 3.
        let mut tape = Tape::new();
        let p = Tensor::row(vec![0.0, 0.0]);
        let q = Tensor::row(vec![3.0_f64.ln(), 0.0]);
        let kl = tape.kl_divergence(&p, &q).unwrap();
        let expected = 2.0_f64.ln() - 0.5 * 3.0_f64.ln();
        assert!((kl.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_of_identical_logits_is_exactly_zero() {
        let mut tape = Tape::new();
        let p = Tensor::from_vec(2, 4, vec![0.3, -1.0, 2.5, 0.1, -0.2, 0.0, 1.0, -3.0]);
        let kl = tape.kl_divergence(&p, &p.detach()).unwrap();
        assert_eq!(kl.item(), 0.0);
    }

    #[test]
    fn sigmoid_derivative_at_zero_is_a_quarter() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(0.0));
        let s = tape.sigmoid(&x).unwrap();
        assert_eq!(s.item(), 0.5);
        tape.backward(&s).unwrap();
        assert_eq!(tape.grad(&x).unwrap().item(), 0.25);
    }

    #[test]
    fn cross_tape_use_is_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let x = t1.leaf(&Tensor::scalar(1.0));
        match t2.sigmoid(&x) {
            Err(NumericsError::Contract { op, .. }) => assert_eq!(op, "sigmoid"),
            other => panic!("expected contract violation, got {other:?}"),
        }
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(2.0));
        let y = tape.mul(&x, &x).unwrap();
        let z = tape.mul(&y.detach(), &x).unwrap();
        tape.backward(&z).unwrap();
        // z = detach(x^2) * x, so dz/dx = 4 rather than 12.
        assert_eq!(tape.grad(&x).unwrap().item(), 4.0);
        assert!(tape.grad(&y.detach()).is_none());
    }

    #[test]
    fn gradients_accumulate_across_shared_subexpressions() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0));
        let y = tape.add(&x, &x).unwrap();
        let loss = tape.mul(&y, &x).unwrap();
        tape.backward(&loss).unwrap();
        // loss = 2x^2, so dloss/dx = 4x = 12.
        assert_eq!(tape.grad(&x).unwrap().item(), 12.0);
    }

    #[test]
    fn intermediate_gradients_are_queryable() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::row(vec![1.0, 2.0]));
        let y = tape.scale(&x, 3.0).unwrap();
        let loss = tape.sum(&y).unwrap();
        tape.backward(&loss).unwrap();
        let gy = tape.grad(&y).unwrap();
        assert_eq!(gy.data(), &[1.0, 1.0]);
        assert_eq!(tape.grad(&x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn clamp_blocks_gradient_outside_the_interval() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::row(vec![-2.0, 0.5, 2.0]));
        let y = tape.clamp(&x, 0.0, 1.0).unwrap();
        assert_eq!(y.data(), &[0.0, 0.5, 1.0]);
        let loss = tape.sum(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_grad_resets_accumulation() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(1.0));
        let y = tape.scale(&x, 5.0).unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(tape.grad(&x).unwrap().item(), 5.0);
        tape.zero_grad();
        assert_eq!(tape.grad(&x).unwrap().item(), 0.0);
        tape.backward(&y).unwrap();
        assert_eq!(tape.grad(&x).unwrap().item(), 5.0);
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let mut tape = Tape::new();
        let table = Tensor::zeros(4, 2);
        match tape.embedding(&table, &[1, 4]) {
            Err(NumericsError::IndexOutOfRange { index, size, .. }) => {
                assert_eq!(index, 4);
                assert_eq!(size, 4);
            }
            other => panic!("expected index error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let a = Tensor::from_vec(2, 3, vec![5.0, 1.0, -2.0, 100.0, 100.0, 100.0]);
        let p = tape.softmax_rows(&a).unwrap();
        for r in 0..2 {
            let s: f64 = (0..3).map(|c| p.at(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((p.at(1, 0) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_values_poison_downstream_ops() {
        // Zero-skip shortcuts and max-based relu can silently launder inf/NaN
        // back into clean numbers, which would defeat divergence detection.
        let mut tape = Tape::new();
        let zeros = Tensor::zeros(1, 2);
        let inf_w = Tensor::filled(2, 2, f64::INFINITY);
        let prod = tape.matmul(&zeros, &inf_w).unwrap();
        assert!(prod.data().iter().all(|v| v.is_nan()));

        let nan_in = Tensor::row(vec![f64::NAN, -1.0, 2.0]);
        let r = tape.relu(&nan_in).unwrap();
        assert!(r.at(0, 0).is_nan());
        assert_eq!(r.at(0, 1), 0.0);
        assert_eq!(r.at(0, 2), 2.0);
    }
}

