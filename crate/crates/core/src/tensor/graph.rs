use rand::Rng;

use super::kernels::{self, ConvSpec};
use super::params::{ParamId, ParamStore};
use super::{Real, Result, Tensor, TensorError};

pub const BN_EPS: Real = 1e-5;
pub const BN_MOMENTUM: Real = 0.1;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names accepted by [`Graph::inject_fault`].
pub const OP_KINDS: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "add_row",
    "scale",
    "relu",
    "tanh",
    "sigmoid",
    "softmax",
    "concat_cols",
    "concat_rows",
    "slice_cols",
    "slice_rows",
    "transpose",
    "reshape",
    "permute",
    "conv",
    "maxpool",
    "batchnorm",
    "lstm",
    "sum",
    "mean",
    "squared_error",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<Real>,
    pub var: Vec<Real>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, Real),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        src: Var,
        start: usize,
    },
    SliceRows {
        src: Var,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Permute {
        src: Var,
        gather: Vec<usize>,
    },
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
        dims: [usize; 3],
        out_dims: [usize; 3],
        /// Unfolded input kept for the weight gradient; empty when the
        /// weight needs none.
        cols: Vec<Real>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<Real>,
        inv_std: Vec<Real>,
        mode: BatchNormMode,
    },
    LstmPointwise {
        gates: Var,
        c_prev: Var,
        act: Vec<Real>,
        tanh_c: Vec<Real>,
    },
    Sum(Var),
    Mean(Var),
    SquaredError(Var, Var),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Conv { .. } => "conv",
            Op::MaxPool { .. } => "maxpool",
            Op::BatchNorm { .. } => "batchnorm",
            Op::LstmPointwise { .. } => "lstm",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SquaredError(..) => "squared_error",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::SquaredError(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::SliceCols { src, .. } | Op::SliceRows { src, .. } | Op::Permute { src, .. } => {
                vec![*src]
            }
            Op::Conv {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::MaxPool { input, .. } => vec![*input],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::LstmPointwise { gates, c_prev, .. } => vec![*gates, *c_prev],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Operation tape. Nodes are appended in execution order, which is a
/// topological order by construction.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<&'static str>,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current tape length, for a later [`Graph::rollback`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node recorded after `mark`. Handles to dropped nodes
    /// become invalid; used by gradient-free loops to keep the tape bounded.
    pub fn rollback(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    /// A constant copy of `v`'s value, cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Test hook: corrupts the backward rule of every node of the named
    /// kind (e.g. `"matmul"`) by scaling its incoming gradient by 1.5.
    pub fn inject_fault(&mut self, kind: &'static str) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter as a leaf. Trainable parameters track
    /// gradients; buffers enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.param(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            requires_grad: p.trainable,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(mismatch(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b)))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(Real, Real) -> Real,
    ) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims2(a, "add_row")?;
        if self.value(bias).len() != n {
            return Err(mismatch("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(a).clone();
        for row in t.data_mut().chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        Ok(self.push(t, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: Real) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(Real::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(kernels::sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        let cols = *t.shape().last().unwrap_or(&1);
        kernels::softmax_rows(t.data_mut(), cols);
        self.push(t, Op::Softmax(a))
    }

    /// Horizontal concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let (rows, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(mismatch("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(&[rows, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Vertical concatenation of 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, cols) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(mismatch("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "slice_cols")?;
        if start + len > cols {
            return Err(mismatch("slice_cols", self.shape(a), &[start, len]));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let t = Tensor::new(&[rows, len], data)?;
        Ok(self.push(t, Op::SliceCols { src: a, start }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "slice_rows")?;
        if start + len > rows {
            return Err(mismatch("slice_rows", self.shape(a), &[start, len]));
        }
        let data = self.value(a).data()[start * cols..(start + len) * cols].to_vec();
        let t = Tensor::new(&[len, cols], data)?;
        Ok(self.push(t, Op::SliceRows { src: a, start }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(&[c, r], data)?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        let nd = in_shape.len();
        let mut seen = vec![false; nd];
        if perm.len() != nd
            || perm
                .iter()
                .any(|&p| p >= nd || std::mem::replace(&mut seen[p], true))
        {
            return Err(mismatch("permute", &in_shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let mut in_strides = vec![1; nd];
        for i in (0..nd.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        }
        let n = self.value(a).len();
        let mut gather = Vec::with_capacity(n);
        let mut idx = vec![0usize; nd];
        for _ in 0..n {
            gather.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum());
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let src = self.value(a).data();
        let data = gather.iter().map(|&g| src[g]).collect();
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push(t, Op::Permute { src: a, gather }))
    }

    /// 3-D cross-correlation with zero padding. `input` is `C_in × T × H × W`,
    /// `weight` is `C_out × C_in × kt × kh × kw`, `bias` has length `C_out`.
    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: &ConvSpec,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let [c, t, h, w] = shape[..] else {
            return Err(mismatch("conv3d", &shape, &[spec.in_channels, 0, 0, 0]));
        };
        if c != spec.in_channels {
            return Err(mismatch("conv3d", &shape, &[spec.in_channels, t, h, w]));
        }
        if self.shape(weight) != spec.weight_shape() {
            return Err(mismatch(
                "conv3d weight",
                self.shape(weight),
                &spec.weight_shape(),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).len() != spec.out_channels {
                return Err(mismatch("conv3d bias", self.shape(b), &[spec.out_channels]));
            }
        }
        let dims = [t, h, w];
        let out_dims = spec.output_dims(dims)?;
        let cols = kernels::im2col(self.value(input).data(), dims, spec, out_dims);
        let out = kernels::conv_from_cols(
            &cols,
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            spec,
            out_dims,
        );
        let cols = if self.requires_grad(weight) {
            cols
        } else {
            Vec::new()
        };
        let value = Tensor::new(
            &[spec.out_channels, out_dims[0], out_dims[1], out_dims[2]],
            out,
        )?;
        Ok(self.push(
            value,
            Op::Conv {
                input,
                weight,
                bias,
                spec: *spec,
                dims,
                out_dims,
                cols,
            },
        ))
    }

    /// 1-D cross-correlation of a `C_in × L` input with a `C_out × C_in × k`
    /// weight; `spec` must have unit spatial kernel and stride.
    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: &ConvSpec,
    ) -> Result<Var> {
        let (c, l) = self.dims2(input, "conv1d")?;
        let x = self.reshape(input, &[c, l, 1, 1])?;
        let w = if self.shape(weight).len() == 3 {
            self.reshape(weight, &spec.weight_shape())?
        } else {
            weight
        };
        let y = self.conv3d(x, w, bias, spec)?;
        let s = self.shape(y).to_vec();
        self.reshape(y, &[s[0], s[1]])
    }

    /// Max pooling over a `C × T × H × W` input without padding.
    pub fn maxpool3d(&mut self, input: Var, window: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let [c, t, h, w] = shape[..] else {
            return Err(mismatch("maxpool3d", &shape, &[0, 0, 0, 0]));
        };
        let dims = [t, h, w];
        let mut out_dims = [0; 3];
        for a in 0..3 {
            if window[a] == 0 || stride[a] == 0 || window[a] > dims[a] {
                return Err(TensorError::Config(format!(
                    "maxpool axis {a}: window {} does not fit input {}",
                    window[a], dims[a]
                )));
            }
            out_dims[a] = (dims[a] - window[a]) / stride[a] + 1;
        }
        let (out, argmax) =
            kernels::maxpool3d_forward(self.value(input).data(), c, dims, window, stride, out_dims);
        let t = Tensor::new(&[c, out_dims[0], out_dims[1], out_dims[2]], out)?;
        Ok(self.push(t, Op::MaxPool { input, argmax }))
    }

    /// Batch normalization over axis 0 (channels) of an input of any rank.
    /// Train mode normalizes with batch statistics and updates `stats`;
    /// eval mode normalizes with `stats`.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode,
        stats: &mut RunningStats,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let c = shape[0];
        let n = self.value(input).len() / c.max(1);
        if self.value(gamma).len() != c || self.value(beta).len() != c || stats.mean.len() != c {
            return Err(mismatch("batchnorm", &shape, self.shape(gamma)));
        }
        if mode == BatchNormMode::Train && n < 2 {
            return Err(TensorError::Config(format!(
                "batchnorm in train mode needs at least 2 values per channel, got {n}"
            )));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let xs = &x[ch * n..(ch + 1) * n];
            let (mean, var) = match mode {
                BatchNormMode::Train => {
                    let mean = xs.iter().sum::<Real>() / n as Real;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n as Real;
                    stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean;
                    let unbiased = var * n as Real / (n - 1) as Real;
                    stats.var[ch] = (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * unbiased;
                    (mean, var)
                }
                BatchNormMode::Eval => (stats.mean[ch], stats.var[ch]),
            };
            let inv = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = inv;
            for i in ch * n..(ch + 1) * n {
                let xh = (x[i] - mean) * inv;
                xhat[i] = xh;
                out[i] = xh * g[ch] + b[ch];
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
        ))
    }

    /// Gate nonlinearities of an LSTM. `gates` is `B × 4H` pre-activations in
    /// input/forget/cell/output order; returns `B × 2H` holding `[h | c]`.
    pub fn lstm_pointwise(&mut self, gates: Var, c_prev: Var) -> Result<Var> {
        let (b, h4) = self.dims2(gates, "lstm")?;
        let (b2, h) = self.dims2(c_prev, "lstm")?;
        if b != b2 || h4 != 4 * h {
            return Err(mismatch("lstm", self.shape(gates), self.shape(c_prev)));
        }
        let z = self.value(gates).data();
        let cp = self.value(c_prev).data();
        let mut act = vec![0.0; b * h4];
        let mut tanh_c = vec![0.0; b * h];
        let mut out = vec![0.0; b * 2 * h];
        for r in 0..b {
            let zr = &z[r * h4..(r + 1) * h4];
            let ar = &mut act[r * h4..(r + 1) * h4];
            for j in 0..h {
                let i = kernels::sigmoid(zr[j]);
                let f = kernels::sigmoid(zr[h + j]);
                let gg = zr[2 * h + j].tanh();
                let o = kernels::sigmoid(zr[3 * h + j]);
                ar[j] = i;
                ar[h + j] = f;
                ar[2 * h + j] = gg;
                ar[3 * h + j] = o;
                let c = f * cp[r * h + j] + i * gg;
                let tc = c.tanh();
                tanh_c[r * h + j] = tc;
                out[r * 2 * h + j] = o * tc;
                out[r * 2 * h + h + j] = c;
            }
        }
        let t = Tensor::new(&[b, 2 * h], out)?;
        Ok(self.push(
            t,
            Op::LstmPointwise {
                gates,
                c_prev,
                act,
                tanh_c,
            },
        ))
    }

    /// One LSTM step: `x·W_ih + h·W_hh + b` followed by the gate equations.
    /// Returns `(h, c)`.
    pub fn lstm_cell(
        &mut self,
        x: Var,
        h_prev: Var,
        c_prev: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
    ) -> Result<(Var, Var)> {
        let xi = self.matmul(x, w_ih)?;
        self.lstm_cell_projected(xi, h_prev, c_prev, w_hh, bias)
    }

    /// [`Graph::lstm_cell`] with the input projection `x·W_ih` precomputed.
    pub fn lstm_cell_projected(
        &mut self,
        x_proj: Var,
        h_prev: Var,
        c_prev: Var,
        w_hh: Var,
        bias: Var,
    ) -> Result<(Var, Var)> {
        let hh = self.matmul(h_prev, w_hh)?;
        let z = self.add(x_proj, hh)?;
        let z = self.add_row(z, bias)?;
        let hc = self.lstm_pointwise(z, c_prev)?;
        let hid = self.shape(c_prev)[1];
        let h = self.slice_cols(hc, 0, hid)?;
        let c = self.slice_cols(hc, hid, hid)?;
        Ok((h, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / v.len() as Real;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// `Σ (a − b)²` as a scalar.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("squared_error", self.shape(a), self.shape(b)));
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::SquaredError(a, b)))
    }

    /// Mean over all entries of `(a − b)²`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).len();
        let se = self.squared_error(a, b)?;
        Ok(self.scale(se, 1.0 / n as Real))
    }

    /// Inverted dropout: kept activations are divided by `1 − p`, so the
    /// layer is the identity when disabled.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: Real, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let mask: Vec<Real> = (0..self.value(a).len())
            .map(|_| {
                let u: f64 = rng.random();
                if (u as Real) < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let m = self.constant(Tensor::new(self.shape(a), mask)?);
        self.mul(a, m)
    }

    /// Reverse sweep from a scalar `loss`. Gradients from multiple uses of a
    /// node accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; loss.0 + 1];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            if !matches!(node.op, Op::Leaf) {
                if self.fault == Some(node.op.kind()) {
                    g.iter_mut().for_each(|x| *x *= 1.5);
                }
                self.backward_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$d:ident| $body:expr) => {
                if let Some($d) = grad_slot(nodes, grads, $v) {
                    $body;
                }
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2();
                let n = nodes[b.0].value.dims2().1;
                with_grad!(*a, |d| kernels::matmul_nt_acc(g, val(*b), d, m, n, k));
                with_grad!(*b, |d| kernels::matmul_tn_acc(val(*a), g, d, m, k, n));
            }
            Op::Add(a, b) => {
                with_grad!(*a, |d| kernels::axpy(1.0, g, d));
                with_grad!(*b, |d| kernels::axpy(1.0, g, d));
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |d| kernels::axpy(1.0, g, d));
                with_grad!(*b, |d| kernels::axpy(-1.0, g, d));
            }
            Op::Mul(a, b) => {
                with_grad!(*a, |d| {
                    for ((di, gi), bi) in d.iter_mut().zip(g).zip(val(*b)) {
                        *di += gi * bi;
                    }
                });
                with_grad!(*b, |d| {
                    for ((di, gi), ai) in d.iter_mut().zip(g).zip(val(*a)) {
                        *di += gi * ai;
                    }
                });
            }
            Op::AddRow(a, bias) => {
                with_grad!(*a, |d| kernels::axpy(1.0, g, d));
                let n = nodes[bias.0].value.len();
                with_grad!(*bias, |d| {
                    for row in g.chunks(n) {
                        kernels::axpy(1.0, row, d);
                    }
                });
            }
            Op::Scale(a, c) => with_grad!(*a, |d| kernels::axpy(*c, g, d)),
            Op::Relu(a) => with_grad!(*a, |d| {
                for ((di, gi), yi) in d.iter_mut().zip(g).zip(out) {
                    if *yi > 0.0 {
                        *di += gi;
                    }
                }
            }),
            Op::Tanh(a) => with_grad!(*a, |d| {
                for ((di, gi), yi) in d.iter_mut().zip(g).zip(out) {
                    *di += gi * (1.0 - yi * yi);
                }
            }),
            Op::Sigmoid(a) => with_grad!(*a, |d| {
                for ((di, gi), yi) in d.iter_mut().zip(g).zip(out) {
                    *di += gi * yi * (1.0 - yi);
                }
            }),
            Op::Softmax(a) => {
                let cols = *node.value.shape().last().unwrap_or(&1);
                with_grad!(*a, |d| {
                    for ((dr, gr), yr) in
                        d.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols))
                    {
                        let s = kernels::dot(gr, yr);
                        for ((di, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *di += yi * (gi - s);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2();
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.dims2().1;
                    with_grad!(*p, |d| {
                        for r in 0..rows {
                            kernels::axpy(
                                1.0,
                                &g[r * total + offset..r * total + offset + w],
                                &mut d[r * w..(r + 1) * w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    with_grad!(*p, |d| kernels::axpy(1.0, &g[offset..offset + n], d));
                    offset += n;
                }
            }
            Op::SliceCols { src, start } => {
                let (rows, len) = node.value.dims2();
                let cols = nodes[src.0].value.dims2().1;
                with_grad!(*src, |d| {
                    for r in 0..rows {
                        kernels::axpy(
                            1.0,
                            &g[r * len..(r + 1) * len],
                            &mut d[r * cols + start..r * cols + start + len],
                        );
                    }
                });
            }
            Op::SliceRows { src, start } => {
                let cols = node.value.dims2().1;
                with_grad!(*src, |d| kernels::axpy(
                    1.0,
                    g,
                    &mut d[start * cols..start * cols + g.len()]
                ));
            }
            Op::Transpose(a) => {
                let (r, c) = nodes[a.0].value.dims2();
                with_grad!(*a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => with_grad!(*a, |d| kernels::axpy(1.0, g, d)),
            Op::Permute { src, gather } => with_grad!(*src, |d| {
                for (gi, &idx) in g.iter().zip(gather) {
                    d[idx] += gi;
                }
            }),
            Op::Conv {
                input,
                weight,
                bias,
                spec,
                dims,
                out_dims,
                cols,
            } => {
                let p: usize = out_dims.iter().product();
                let k = spec.in_channels * spec.kernel.iter().product::<usize>();
                let co = spec.out_channels;
                if let Some(b) = bias {
                    with_grad!(*b, |d| {
                        for (di, row) in d.iter_mut().zip(g.chunks(p)) {
                            *di += row.iter().sum::<Real>();
                        }
                    });
                }
                let need_w = nodes[weight.0].requires_grad;
                let need_x = nodes[input.0].requires_grad;
                if need_w {
                    with_grad!(*weight, |d| kernels::matmul_nt_acc(g, cols, d, co, p, k));
                }
                if need_x {
                    let mut dcols = vec![0.0; k * p];
                    kernels::matmul_tn_acc(val(*weight), g, &mut dcols, co, k, p);
                    with_grad!(*input, |d| kernels::col2im_acc(
                        &dcols, *dims, spec, *out_dims, d
                    ));
                }
            }
            Op::MaxPool { input, argmax } => with_grad!(*input, |d| {
                for (gi, &idx) in g.iter().zip(argmax) {
                    d[idx] += gi;
                }
            }),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let c = inv_std.len();
                let n = g.len() / c;
                let gam = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ch in 0..c {
                    let gs = &g[ch * n..(ch + 1) * n];
                    sum_g[ch] = gs.iter().sum();
                    sum_gx[ch] = kernels::dot(gs, &xhat[ch * n..(ch + 1) * n]);
                }
                with_grad!(*gamma, |d| kernels::axpy(1.0, &sum_gx, d));
                with_grad!(*beta, |d| kernels::axpy(1.0, &sum_g, d));
                with_grad!(*input, |d| {
                    for ch in 0..c {
                        let scale = gam[ch] * inv_std[ch];
                        let mg = sum_g[ch] / n as Real;
                        let mgx = sum_gx[ch] / n as Real;
                        for i in ch * n..(ch + 1) * n {
                            d[i] += match mode {
                                BatchNormMode::Train => scale * (g[i] - mg - xhat[i] * mgx),
                                BatchNormMode::Eval => scale * g[i],
                            };
                        }
                    }
                });
            }
            Op::LstmPointwise {
                gates,
                c_prev,
                act,
                tanh_c,
            } => {
                let (b, h2) = node.value.dims2();
                let h = h2 / 2;
                let cp = val(*c_prev);
                let mut dz = vec![0.0; b * 4 * h];
                let mut dcp = vec![0.0; b * h];
                for r in 0..b {
                    for j in 0..h {
                        let a = &act[r * 4 * h..(r + 1) * 4 * h];
                        let (i, f, gg, o) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j]);
                        let tc = tanh_c[r * h + j];
                        let dh = g[r * h2 + j];
                        let dc = g[r * h2 + h + j] + dh * o * (1.0 - tc * tc);
                        let z = &mut dz[r * 4 * h..(r + 1) * 4 * h];
                        z[j] = dc * gg * i * (1.0 - i);
                        z[h + j] = dc * cp[r * h + j] * f * (1.0 - f);
                        z[2 * h + j] = dc * i * (1.0 - gg * gg);
                        z[3 * h + j] = dh * tc * o * (1.0 - o);
                        dcp[r * h + j] = dc * f;
                    }
                }
                with_grad!(*gates, |d| kernels::axpy(1.0, &dz, d));
                with_grad!(*c_prev, |d| kernels::axpy(1.0, &dcp, d));
            }
            Op::Sum(a) => with_grad!(*a, |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as Real;
                with_grad!(*a, |d| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::SquaredError(a, b) => {
                let diff: Vec<Real> = val(*a)
                    .iter()
                    .zip(val(*b))
                    .map(|(x, y)| 2.0 * (x - y) * g[0])
                    .collect();
                with_grad!(*a, |d| kernels::axpy(1.0, &diff, d));
                with_grad!(*b, |d| kernels::axpy(-1.0, &diff, d));
            }
        }
    }
}

fn grad_slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<Real>>],
    v: Var,
) -> Option<&'a mut Vec<Real>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<Real>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[Real]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of every bound parameter leaf into the store.
    pub fn accumulate_into(&self, graph: &Graph, store: &mut ParamStore) {
        for (node, g) in graph.nodes.iter().zip(&self.grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                kernels::axpy(1.0, g, store.grad_mut(id));
            }
        }
    }
}
