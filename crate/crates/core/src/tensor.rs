//! Dense `f64` tensors and a reverse-mode autodiff tape.
//!
//! Storage is flat and row-major with no views or striding. Every operation
//! on a [`Tape`] records its inputs and whatever it needs for the backward
//! rule; [`Tape::backward`] then sweeps the recorded operations once, in
//! reverse order, accumulating into the `grad` buffers of every tensor that
//! requires a gradient.
//!
//! The op set is deliberately small: it is exactly what the toy transformer
//! needs (matmul, add, multiply, scale, layer norm, GELU, embedding lookup,
//! softmax, masked cross-entropy, batch concat, transpose, reshape, sum).

use thiserror::Error;

/// Layer-norm epsilon used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not describe {len} elements (dimensions must be positive)")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range for size {size} at flat position {position}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
        position: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("masked cross-entropy: mask selects no positions")]
    EmptyLoss,
    #[error("transpose: {0:?} is not a permutation of the tensor axes")]
    BadPermutation(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` has positive dimensions whose
    /// product is `data.len()`. An empty shape is a scalar.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n]).expect("positive dimensions")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(Vec::new(), vec![value]).expect("scalar shape")
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        x: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        /// (row, label, softmax probabilities of that row)
        rows: Vec<(usize, usize, Vec<f64>)>,
    },
    ConcatBatch {
        a: Var,
        b: Var,
    },
    Transpose {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations in topological order for a single backward sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn is_suffix(full: &[usize], tail: &[usize]) -> bool {
    tail.len() <= full.len() && full[full.len() - tail.len()..] == *tail
}

/// Writes `src` permuted by `perm` (output axis i is input axis perm[i]).
fn permute(src: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = row_major_strides(shape);
    let gathered: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut index = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for axis in (0..out_shape.len()).rev() {
            index[axis] += 1;
            offset += gathered[axis];
            if index[axis] < out_shape[axis] {
                break;
            }
            offset -= gathered[axis] * out_shape[axis];
            index[axis] = 0;
        }
    }
    (out, out_shape)
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor; it keeps its own `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_result(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        let value = Tensor {
            shape,
            data,
            grad: None,
            requires_grad,
        };
        self.push(value, op)
    }

    /// `[m,k] x [k,n] -> [m,n]`, or batched `[p,m,k] x [p,k,n] -> [p,m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        let (batch, m, k, n, out_shape) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n, vec![*m, *n]),
            ([p, m, k], [p2, k2, n]) if p == p2 && k == k2 => (*p, *m, *k, *n, vec![*p, *m, *n]),
            _ => return Err(mismatch()),
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        for p in 0..batch {
            let ao = &av[p * m * k..(p + 1) * m * k];
            let bo = &bv[p * k * n..(p + 1) * k * n];
            let co = &mut out[p * m * n..(p + 1) * m * n];
            for i in 0..m {
                let crow = &mut co[i * n..(i + 1) * n];
                for (kk, &aik) in ao[i * k..(i + 1) * k].iter().enumerate() {
                    let brow = &bo[kk * n..(kk + 1) * n];
                    crow.iter_mut().zip(brow).for_each(|(c, &bv)| *c += aik * bv);
                }
            }
        }
        Ok(self.push_result(out_shape, out, &[a, b], Op::MatMul { a, b, batch, m, k, n }))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if is_suffix(sa, sb) {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            })
        }
    }

    /// Elementwise `a + b`; `b` may have a trailing sub-shape of `a`, in
    /// which case it is repeated over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let bv = self.value(b).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(bv.len())
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_result(shape, out, &[a, b], Op::Add { a, b }))
    }

    /// Elementwise `a * b` with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let bv = self.value(b).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(bv.len())
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(x, y)| x * y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_result(shape, out, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).data().iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push_result(shape, out, &[a], Op::Scale { a, factor })
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (both of
    /// the last axis' size).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let dim = *sx.last().unwrap_or(&1);
        for p in [gain, bias] {
            if self.shape(p) != [dim] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: sx,
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let bta = self.value(bias).data();
        let rows = xv.len() / dim;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(dim) {
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + bta[j]);
            }
        }
        Ok(self.push_result(sx, out, &[x, gain, bias], Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).data().iter().map(|&v| gelu_parts(v).0).collect();
        let shape = self.shape(x).to_vec();
        self.push_result(shape, out, &[x], Op::Gelu { x })
    }

    /// Gathers rows of a `[V, d]` table; the result has shape `index_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], index_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        let [vocab, dim] = st[..] else {
            return Err(TensorError::ShapeMismatch {
                op: "embedding",
                left: st,
                right: index_shape.to_vec(),
            });
        };
        if index_shape.iter().product::<usize>() != ids.len() || index_shape.contains(&0) {
            return Err(TensorError::InvalidShape {
                shape: index_shape.to_vec(),
                len: ids.len(),
            });
        }
        if let Some((position, &index)) = ids.iter().enumerate().find(|(_, &i)| i >= vocab) {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding",
                index,
                size: vocab,
                position,
            });
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(dim);
        Ok(self.push_result(
            shape,
            out,
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Softmax over the last axis, with per-row max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let dim = *shape.last().unwrap_or(&1);
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.value(x).data().chunks(dim) {
            softmax_into(row, &mut out);
        }
        self.push_result(shape, out, &[x], Op::Softmax { x })
    }

    /// Mean negative log-likelihood of `labels` under `logits` (last axis is
    /// the vocabulary), taken over the positions where `mask` is true.
    /// Unmasked positions contribute nothing to the value or the gradient.
    pub fn cross_entropy_masked(&mut self, logits: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let vocab = *shape.last().unwrap_or(&1);
        let positions = self.value(logits).numel() / vocab;
        if labels.len() != positions || mask.len() != positions {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_masked",
                left: shape,
                right: vec![labels.len(), mask.len()],
            });
        }
        let lv = self.value(logits).data();
        let mut rows = Vec::new();
        let mut total = 0.0;
        for (position, (&label, _)) in labels.iter().zip(mask).enumerate().filter(|(_, (_, &m))| m) {
            if label >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy_masked",
                    index: label,
                    size: vocab,
                    position,
                });
            }
            let row = &lv[position * vocab..(position + 1) * vocab];
            total += log_sum_exp(row) - row[label];
            let mut probs = Vec::with_capacity(vocab);
            softmax_into(row, &mut probs);
            rows.push((position, label, probs));
        }
        if rows.is_empty() {
            return Err(TensorError::EmptyLoss);
        }
        let value = total / rows.len() as f64;
        Ok(self.push_result(Vec::new(), vec![value], &[logits], Op::CrossEntropy { logits, rows }))
    }

    /// Concatenates along axis 0.
    pub fn concat_batch(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_batch",
                left: sa,
                right: sb,
            });
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let mut shape = sa;
        shape[0] += sb[0];
        Ok(self.push_result(shape, out, &[a, b], Op::ConcatBatch { a, b }))
    }

    /// Permutes axes: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::BadPermutation(perm.to_vec()));
        }
        let (out, out_shape) = permute(self.value(x).data(), &shape, perm);
        Ok(self.push_result(out_shape, out, &[x], Op::Transpose { x, perm: perm.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let reshaped = self.value(x).clone().reshaped(shape)?;
        let data = reshaped.into_data();
        Ok(self.push_result(shape.to_vec(), data, &[x], Op::Reshape { x }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push_result(Vec::new(), vec![total], &[x], Op::Sum { x })
    }

    /// Back-propagates from a scalar. Gradients are added to (not written
    /// over) every `requires_grad` tensor on the tape, so calling this twice
    /// without [`Tape::zero_grad`] doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalar(loss_shape.to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    /// Returns the adjoint buffer for `v` if it takes part in differentiation.
    fn slot<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0].value;
        if !node.requires_grad {
            return None;
        }
        Some(adj[v.0].get_or_insert_with(|| vec![0.0; node.numel()]))
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch, m, k, n } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if let Some(da) = self.slot(adj, a) {
                    for p in 0..batch {
                        for r in 0..m {
                            let grow = &g[p * m * n + r * n..p * m * n + (r + 1) * n];
                            for kk in 0..k {
                                let brow = &bv[p * k * n + kk * n..p * k * n + (kk + 1) * n];
                                da[p * m * k + r * k + kk] +=
                                    grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                }
                if let Some(db) = self.slot(adj, b) {
                    for p in 0..batch {
                        for r in 0..m {
                            let grow = &g[p * m * n + r * n..p * m * n + (r + 1) * n];
                            for kk in 0..k {
                                let aik = av[p * m * k + r * k + kk];
                                let dbrow = &mut db[p * k * n + kk * n..p * k * n + (kk + 1) * n];
                                dbrow.iter_mut().zip(grow).for_each(|(d, x)| *d += aik * x);
                            }
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                if let Some(da) = self.slot(adj, a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if let Some(db) = self.slot(adj, b) {
                    let len = db.len();
                    for chunk in g.chunks(len) {
                        db.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                    }
                }
            }
            &Op::Mul { a, b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let nb = bv.len();
                if let Some(da) = self.slot(adj, a) {
                    for (j, d) in da.iter_mut().enumerate() {
                        *d += g[j] * bv[j % nb];
                    }
                }
                if let Some(db) = self.slot(adj, b) {
                    for (j, (gx, ax)) in g.iter().zip(av).enumerate() {
                        db[j % nb] += gx * ax;
                    }
                }
            }
            &Op::Scale { a, factor } => {
                if let Some(da) = self.slot(adj, a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x * factor);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain).data();
                let dim = gv.len();
                if let Some(dx) = self.slot(adj, *x) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * dim..(r + 1) * dim;
                        let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..dim {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= dim as f64;
                        mean_dh_h /= dim as f64;
                        for j in 0..dim {
                            let dh = gr[j] * gv[j];
                            dx[r * dim + j] += rs * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
                if let Some(dg) = self.slot(adj, *gain) {
                    for (j, (gx, h)) in g.iter().zip(xhat).enumerate() {
                        dg[j % dim] += gx * h;
                    }
                }
                if let Some(db) = self.slot(adj, *bias) {
                    for (j, gx) in g.iter().enumerate() {
                        db[j % dim] += gx;
                    }
                }
            }
            &Op::Gelu { x } => {
                let xv = self.value(x).data();
                if let Some(dx) = self.slot(adj, x) {
                    for ((d, &v), gx) in dx.iter_mut().zip(xv).zip(g) {
                        *d += gx * gelu_parts(v).1;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let dim = self.shape(*table)[1];
                if let Some(dt) = self.slot(adj, *table) {
                    for (pos, &id) in ids.iter().enumerate() {
                        let src = &g[pos * dim..(pos + 1) * dim];
                        dt[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, x)| *d += x);
                    }
                }
            }
            &Op::Softmax { x } => {
                let y = self.nodes[i].value.data();
                let dim = *self.shape(x).last().unwrap_or(&1);
                if let Some(dx) = self.slot(adj, x) {
                    for ((dr, yr), gr) in dx.chunks_mut(dim).zip(y.chunks(dim)).zip(g.chunks(dim)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..dim {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, rows } => {
                let vocab = *self.shape(*logits).last().unwrap_or(&1);
                let upstream = g[0] / rows.len() as f64;
                if let Some(dl) = self.slot(adj, *logits) {
                    for (position, label, probs) in rows {
                        let dr = &mut dl[position * vocab..(position + 1) * vocab];
                        for (j, p) in probs.iter().enumerate() {
                            let target = if j == *label { 1.0 } else { 0.0 };
                            dr[j] += upstream * (p - target);
                        }
                    }
                }
            }
            &Op::ConcatBatch { a, b } => {
                let split = self.value(a).numel();
                if let Some(da) = self.slot(adj, a) {
                    da.iter_mut().zip(&g[..split]).for_each(|(d, x)| *d += x);
                }
                if let Some(db) = self.slot(adj, b) {
                    db.iter_mut().zip(&g[split..]).for_each(|(d, x)| *d += x);
                }
            }
            Op::Transpose { x, perm } => {
                let out_shape = self.nodes[i].value.shape();
                let mut inverse = vec![0; perm.len()];
                for (axis, &p) in perm.iter().enumerate() {
                    inverse[p] = axis;
                }
                let (back, _) = permute(g, out_shape, &inverse);
                if let Some(dx) = self.slot(adj, *x) {
                    dx.iter_mut().zip(&back).for_each(|(d, v)| *d += v);
                }
            }
            &Op::Reshape { x } => {
                if let Some(dx) = self.slot(adj, x) {
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            &Op::Sum { x } => {
                if let Some(dx) = self.slot(adj, x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}

fn softmax_into(row: &[f64], out: &mut Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut total = 0.0;
    for &v in row {
        let e = (v - max).exp();
        total += e;
        out.push(e);
    }
    out[start..].iter_mut().for_each(|e| *e /= total);
}

/// `ln(sum(exp(row)))`, stable for large entries.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax of each last-axis row of a tensor, outside any tape.
pub fn softmax_rows(a: &Tensor) -> Tensor {
    let dim = *a.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(a.numel());
    for row in a.data().chunks(dim) {
        softmax_into(row, &mut out);
    }
    Tensor::new(a.shape().to_vec(), out).expect("same shape")
}
