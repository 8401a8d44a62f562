use super::kernels::{self, ConvDims, ConvGeometry};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Probabilities are clamped to this before taking a logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Added to the norm product in cosine similarities.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumAxis0(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    AvgPool2d {
        input: Var,
        window: usize,
    },
    Bilinear(Var),
    Softmax {
        input: Var,
        axis: usize,
        temperature: T,
    },
    Center(Var),
    WeightedMean {
        input: Var,
        weights: Vec<T>,
        total: T,
    },
    GatherColumns {
        input: Var,
        cols: Vec<usize>,
    },
    ConcatColumns(Vec<Var>),
    Stack(Vec<Var>),
    Select {
        input: Var,
        index: usize,
    },
    CosineMatrix {
        query: Var,
        protos: Var,
    },
    CosineColumns(Var, Var),
    CrossEntropy {
        probs: Var,
        target: Vec<bool>,
        weights: [T; 2],
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node vector is already a
/// topological order of the (acyclic) graph and [`Tape::backward`] is a
/// single reverse sweep. A tape is meant to live for one training step.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Splits a shape into `(outer, axis_len, inner)` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Views a tensor of rank ≥ 2 as `[rows, cols]` with `rows = shape[0]`.
fn as_columns(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1..].iter().product::<usize>().max(1))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    /// Adds `bias[c]` to every element of channel `c` of `x` (shape `[C, ...]`).
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (c, inner) = as_columns(self.shape(x));
        if self.shape(bias) != [c] {
            return Err(Error::shape(format!(
                "bias of shape {:?} for {c} channels",
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, val) in v.data_mut().iter_mut().enumerate() {
            *val = *val + b[i / inner];
        }
        Ok(self.push(v, Op::AddChannelBias { x, bias }, &[x, bias]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a), &[a])
    }

    /// Natural log with inputs clamped from below at [`LOG_CLAMP`].
    pub fn log(&mut self, a: Var) -> Var {
        let lo = T::from_f64(LOG_CLAMP);
        let v = self.value(a).map(|x| x.max(lo).ln());
        self.push(v, Op::Log(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / T::from_usize(t.len()));
        self.push(v, Op::Mean(a), &[a])
    }

    /// Sums over the leading axis: `[D, ...rest] -> [...rest]`.
    pub fn sum_axis0(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("sum_axis0 needs rank ≥ 2"));
        }
        let (d, n) = as_columns(&shape);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); n];
        for r in 0..d {
            for (o, &v) in out.iter_mut().zip(&x[r * n..(r + 1) * n]) {
                *o = *o + v;
            }
        }
        let v = Tensor::new(&shape[1..], out)?;
        Ok(self.push(v, Op::SumAxis0(a), &[a]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let v = Tensor::new(&[m, n], matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose of rank-{} tensor", s.len())));
        }
        let (r, c) = (s[0], s[1]);
        let v = Tensor::new(&[c, r], transpose_raw(self.value(a).data(), r, c))?;
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Cross-correlation of `input [C_in, H, W]` with `kernel [C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize, dilation: usize) -> Result<Var> {
        let geom = ConvGeometry {
            stride,
            padding,
            dilation,
        };
        let dims = self.conv_dims(input, kernel, geom)?;
        let out = kernels::conv2d_forward(self.value(input).data(), self.value(kernel).data(), &dims, geom);
        let v = Tensor::new(&[dims.c_out, dims.oh, dims.ow], out)?;
        Ok(self.push(v, Op::Conv2d { input, kernel, geom }, &[input, kernel]))
    }

    fn conv_dims(&self, input: Var, kernel: Var, g: ConvGeometry) -> Result<ConvDims> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 3 || sk.len() != 4 {
            return Err(Error::shape(format!("conv2d input {si:?}, kernel {sk:?}")));
        }
        if si[0] != sk[1] {
            return Err(Error::shape(format!(
                "conv2d input has {} channels, kernel expects {}",
                si[0], sk[1]
            )));
        }
        if sk[2] % 2 == 0 || sk[3] % 2 == 0 {
            return Err(Error::shape(format!("conv2d kernel extents must be odd, got {sk:?}")));
        }
        if g.stride == 0 || g.dilation == 0 {
            return Err(Error::invalid("conv2d stride and dilation must be ≥ 1"));
        }
        let oh = g.output_extent(si[1], sk[2]);
        let ow = g.output_extent(si[2], sk[3]);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::shape(format!("conv2d kernel {sk:?} does not fit input {si:?}")));
        };
        Ok(ConvDims {
            c_in: si[0],
            h: si[1],
            w: si[2],
            c_out: sk[0],
            kh: sk[2],
            kw: sk[3],
            oh,
            ow,
        })
    }

    /// Non-overlapping average pooling of `[C, H, W]`; extents that are not a
    /// multiple of `window` are zero-padded at the bottom/right.
    pub fn avg_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        if window < 1 {
            return Err(Error::invalid("avg_pool2d window must be ≥ 1"));
        }
        let s = self.shape(input);
        if s.len() != 3 {
            return Err(Error::shape(format!("avg_pool2d expects [C,H,W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (out, oh, ow) = kernels::avg_pool2d_forward(self.value(input).data(), c, h, w, window);
        let v = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push(v, Op::AvgPool2d { input, window }, &[input]))
    }

    /// Bilinear resize of `[C, h, w]` with half-pixel centers (align-corners off).
    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear_resize target must be ≥ 1×1"));
        }
        let s = self.shape(input);
        if s.len() != 3 {
            return Err(Error::shape(format!("bilinear_resize expects [C,H,W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let out = kernels::bilinear_forward(self.value(input).data(), c, h, w, out_h, out_w);
        let v = Tensor::new(&[c, out_h, out_w], out)?;
        Ok(self.push(v, Op::Bilinear(input), &[input]))
    }

    /// `softmax(x / temperature)` along `axis`.
    pub fn softmax(&mut self, input: Var, axis: usize, temperature: T) -> Result<Var> {
        self.softmax_masked(input, axis, temperature, None)
    }

    /// Softmax restricted to the entries where `keep` is true; the others get
    /// probability exactly zero. `keep` has the same layout as the input.
    pub fn softmax_masked(&mut self, input: Var, axis: usize, temperature: T, keep: Option<&[bool]>) -> Result<Var> {
        if !(temperature > T::zero()) {
            return Err(Error::invalid(format!(
                "softmax temperature must be > 0, got {temperature}"
            )));
        }
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let x = self.value(input).data();
        if let Some(k) = keep {
            if k.len() != x.len() {
                return Err(Error::shape("softmax keep-mask length"));
            }
        }
        let kept = |i: usize| keep.is_none_or(|k| k[i]);
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    if kept(idx(j)) {
                        mx = mx.max(x[idx(j)] / temperature);
                    }
                }
                if mx == T::neg_infinity() {
                    return Err(Error::invalid("softmax over an empty kept set"));
                }
                let mut z = T::zero();
                for j in 0..len {
                    if kept(idx(j)) {
                        let e = (x[idx(j)] / temperature - mx).exp();
                        out[idx(j)] = e;
                        z = z + e;
                    }
                }
                for j in 0..len {
                    out[idx(j)] = out[idx(j)] / z;
                }
            }
        }
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(
            v,
            Op::Softmax {
                input,
                axis,
                temperature,
            },
            &[input],
        ))
    }

    /// Subtracts, for every column of `[D, ...]`, the mean over the leading
    /// (channel) axis.
    pub fn center(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("center needs a [D, ...] tensor"));
        }
        let (d, n) = as_columns(&shape);
        let x = self.value(input).data();
        let mut out = x.to_vec();
        let dn = T::from_usize(d);
        for col in 0..n {
            let m = (0..d).map(|r| x[r * n + col]).sum::<T>() / dn;
            for r in 0..d {
                out[r * n + col] = out[r * n + col] - m;
            }
        }
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Center(input), &[input]))
    }

    /// Weighted spatial average of `[D, ...]` with constant per-column
    /// weights, returned as a `[D, 1]` column. Zero total weight gives zeros.
    pub fn weighted_mean(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        let (d, n) = as_columns(self.shape(input));
        if weights.len() != n {
            return Err(Error::shape(format!(
                "weighted_mean: {} weights for {n} columns",
                weights.len()
            )));
        }
        let total: T = weights.iter().copied().sum();
        let x = self.value(input).data();
        let mut out = vec![T::zero(); d];
        if total > T::zero() {
            for (r, o) in out.iter_mut().enumerate() {
                let s: T = (0..n).map(|c| x[r * n + c] * weights[c]).sum();
                *o = s / total;
            }
        }
        let v = Tensor::new(&[d, 1], out)?;
        Ok(self.push(
            v,
            Op::WeightedMean {
                input,
                weights: weights.to_vec(),
                total,
            },
            &[input],
        ))
    }

    /// Picks columns of `[D, ...]` (flattened over the trailing axes) into `[D, cols.len()]`.
    pub fn gather_columns(&mut self, input: Var, cols: &[usize]) -> Result<Var> {
        let (d, n) = as_columns(self.shape(input));
        if cols.is_empty() {
            return Err(Error::shape("gather_columns with no columns"));
        }
        if let Some(&c) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::shape(format!("column {c} out of range for {n} columns")));
        }
        let x = self.value(input).data();
        let k = cols.len();
        let mut out = vec![T::zero(); d * k];
        for r in 0..d {
            for (j, &c) in cols.iter().enumerate() {
                out[r * k + j] = x[r * n + c];
            }
        }
        let v = Tensor::new(&[d, k], out)?;
        Ok(self.push(
            v,
            Op::GatherColumns {
                input,
                cols: cols.to_vec(),
            },
            &[input],
        ))
    }

    /// Concatenates `[D, n_i]` matrices along the column axis.
    pub fn concat_columns(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_columns of nothing"));
        };
        let d = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != d {
                return Err(Error::shape(format!("concat_columns part {s:?} with D={d}")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); d * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let x = self.value(p).data();
            for r in 0..d {
                out[r * total + off..r * total + off + w].copy_from_slice(&x[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let v = Tensor::new(&[d, total], out)?;
        Ok(self.push(v, Op::ConcatColumns(parts.to_vec()), parts))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("stack of nothing"));
        };
        let inner = self.shape(first).to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(first).len());
        for &p in parts {
            if self.shape(p) != inner.as_slice() {
                return Err(Error::shape(format!("stack {:?} with {inner:?}", self.shape(p))));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, Op::Stack(parts.to_vec()), parts))
    }

    /// Slice `index` of the leading axis: `[K, ...rest] -> [...rest]`.
    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 || index >= shape[0] {
            return Err(Error::shape(format!("select {index} from {shape:?}")));
        }
        let n: usize = shape[1..].iter().product();
        let data = self.value(input).data()[index * n..(index + 1) * n].to_vec();
        let v = Tensor::new(&shape[1..], data)?;
        Ok(self.push(v, Op::Select { input, index }, &[input]))
    }

    /// Cosine similarity of every prototype column of `protos [D, N]` with
    /// every column of `query [D, M]`, as `[N, M]`.
    pub fn cosine_matrix(&mut self, query: Var, protos: Var) -> Result<Var> {
        let (dq, m) = as_columns(self.shape(query));
        let (dp, n) = as_columns(self.shape(protos));
        if dq != dp {
            return Err(Error::shape(format!(
                "cosine_matrix: feature dim {dq} vs prototype dim {dp}"
            )));
        }
        let q = self.value(query).data();
        let p = self.value(protos).data();
        let qn = column_norms(q, dq, m);
        let pn = column_norms(p, dp, n);
        let eps = T::from_f64(COSINE_EPS);
        let mut out = vec![T::zero(); n * m];
        for j in 0..n {
            for i in 0..m {
                let dot: T = (0..dq).map(|r| q[r * m + i] * p[r * n + j]).sum();
                out[j * m + i] = dot / (qn[i] * pn[j] + eps);
            }
        }
        let v = Tensor::new(&[n, m], out)?;
        Ok(self.push(v, Op::CosineMatrix { query, protos }, &[query, protos]))
    }

    /// Column-wise cosine similarity of two `[D, ...]` tensors, shape `[...]`.
    pub fn cosine_columns(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine_columns")?;
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("cosine_columns needs rank ≥ 2"));
        }
        let (d, n) = as_columns(&shape);
        let x = self.value(a).data();
        let y = self.value(b).data();
        let xn = column_norms(x, d, n);
        let yn = column_norms(y, d, n);
        let eps = T::from_f64(COSINE_EPS);
        let out = (0..n)
            .map(|c| {
                let dot: T = (0..d).map(|r| x[r * n + c] * y[r * n + c]).sum();
                dot / (xn[c] * yn[c] + eps)
            })
            .collect();
        let v = Tensor::new(&shape[1..], out)?;
        Ok(self.push(v, Op::CosineColumns(a, b), &[a, b]))
    }

    /// Class-weighted binary cross-entropy averaged over pixels.
    ///
    /// `probs` has shape `[2, ...]` (background, foreground); `target` marks
    /// foreground pixels; `weights` is `[background, foreground]`.
    pub fn weighted_cross_entropy(&mut self, probs: Var, target: &[bool], weights: [T; 2]) -> Result<Var> {
        let shape = self.shape(probs);
        if shape.len() < 2 || shape[0] != 2 {
            return Err(Error::shape(format!("cross-entropy expects [2, ...], got {shape:?}")));
        }
        let n: usize = shape[1..].iter().product();
        if target.len() != n {
            return Err(Error::shape(format!(
                "cross-entropy target has {} pixels, prediction {n}",
                target.len()
            )));
        }
        if !(weights[0] > T::zero() && weights[1] > T::zero()) {
            return Err(Error::invalid("class weights must be positive"));
        }
        let p = self.value(probs).data();
        let lo = T::from_f64(LOG_CLAMP);
        let total: T = target
            .iter()
            .enumerate()
            .map(|(i, &fg)| {
                let c = usize::from(fg);
                -weights[c] * p[c * n + i].max(lo).ln()
            })
            .sum();
        let v = Tensor::scalar(total / T::from_usize(n));
        Ok(self.push(
            v,
            Op::CrossEntropy {
                probs,
                target: target.to_vec(),
                weights,
            },
            &[probs],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into every
    /// reachable node that requires them; call [`Tape::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(&g) {
                        *a = *a + b;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape(), g).expect("grad shape")),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(contrib) {
                        *a = *a + b;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                send(*a, g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect());
                send(*b, g.iter().zip(x).map(|(&gi, &xi)| gi * xi).collect());
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|&x| x * *c).collect()),
            Op::AddChannelBias { x, bias } => {
                let c = self.nodes[bias.0].value.len();
                let inner = g.len() / c;
                let gb = (0..c)
                    .map(|ch| g[ch * inner..(ch + 1) * inner].iter().copied().sum())
                    .collect();
                send(*x, g.to_vec());
                send(*bias, gb);
            }
            Op::Relu(a) => send(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect(),
            ),
            Op::Exp(a) => send(*a, g.iter().zip(node.value.data()).map(|(&gi, &yi)| gi * yi).collect()),
            Op::Log(a) => {
                let lo = T::from_f64(LOG_CLAMP);
                send(
                    *a,
                    g.iter()
                        .zip(val(*a))
                        .map(|(&gi, &xi)| if xi > lo { gi / xi } else { T::zero() })
                        .collect(),
                )
            }
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                send(*a, vec![g[0] / T::from_usize(n); n])
            }
            Op::SumAxis0(a) => {
                let d = self.nodes[a.0].value.shape()[0];
                let mut out = Vec::with_capacity(d * g.len());
                for _ in 0..d {
                    out.extend_from_slice(g);
                }
                send(*a, out)
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                // dA = G Bᵀ, dB = Aᵀ G
                let bt = transpose_raw(val(*b), k, n);
                send(*a, matmul_raw(g, &bt, m, n, k));
                let at = transpose_raw(val(*a), m, k);
                send(*b, matmul_raw(&at, g, k, m, n));
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                send(*a, transpose_raw(g, s[0], s[1]))
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Select { input, index } => {
                let mut out = vec![T::zero(); val(*input).len()];
                let n = g.len();
                out[index * n..(index + 1) * n].copy_from_slice(g);
                send(*input, out)
            }
            Op::Conv2d { input, kernel, geom } => {
                let dims = self.conv_dims(*input, *kernel, *geom).expect("validated in forward");
                let (gi, gk) = kernels::conv2d_backward(g, val(*input), val(*kernel), &dims, *geom);
                send(*input, gi);
                send(*kernel, gk);
            }
            Op::AvgPool2d { input, window } => {
                let s = self.nodes[input.0].value.shape();
                send(*input, kernels::avg_pool2d_backward(g, s[0], s[1], s[2], *window))
            }
            Op::Bilinear(input) => {
                let s = self.nodes[input.0].value.shape();
                let o = node.value.shape();
                send(*input, kernels::bilinear_backward(g, s[0], s[1], s[2], o[1], o[2]))
            }
            Op::Softmax {
                input,
                axis,
                temperature,
            } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut out = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            out[idx(j)] = y[idx(j)] * (g[idx(j)] - dot) / *temperature;
                        }
                    }
                }
                send(*input, out)
            }
            Op::Center(input) => {
                let (d, n) = as_columns(node.value.shape());
                let dn = T::from_usize(d);
                let mut out = g.to_vec();
                for col in 0..n {
                    let m = (0..d).map(|r| g[r * n + col]).sum::<T>() / dn;
                    for r in 0..d {
                        out[r * n + col] = out[r * n + col] - m;
                    }
                }
                send(*input, out)
            }
            Op::WeightedMean { input, weights, total } => {
                let (d, n) = as_columns(self.nodes[input.0].value.shape());
                let mut out = vec![T::zero(); d * n];
                if *total > T::zero() {
                    for r in 0..d {
                        for c in 0..n {
                            out[r * n + c] = g[r] * weights[c] / *total;
                        }
                    }
                }
                send(*input, out)
            }
            Op::GatherColumns { input, cols } => {
                let (d, n) = as_columns(self.nodes[input.0].value.shape());
                let k = cols.len();
                let mut out = vec![T::zero(); d * n];
                for r in 0..d {
                    for (j, &c) in cols.iter().enumerate() {
                        out[r * n + c] = out[r * n + c] + g[r * k + j];
                    }
                }
                send(*input, out)
            }
            Op::ConcatColumns(parts) => {
                let total = node.value.shape()[1];
                let d = node.value.shape()[0];
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    let mut out = Vec::with_capacity(d * w);
                    for r in 0..d {
                        out.extend_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    send(p, out);
                    off += w;
                }
            }
            Op::Stack(parts) => {
                let n = g.len() / parts.len();
                for (i, &p) in parts.iter().enumerate() {
                    send(p, g[i * n..(i + 1) * n].to_vec());
                }
            }
            Op::CosineMatrix { query, protos } => {
                let (d, m) = as_columns(self.nodes[query.0].value.shape());
                let (_, n) = as_columns(self.nodes[protos.0].value.shape());
                let (gq, gp) = cosine_matrix_backward(g, val(*query), val(*protos), d, m, n);
                send(*query, gq);
                send(*protos, gp);
            }
            Op::CosineColumns(a, b) => {
                let (d, n) = as_columns(self.nodes[a.0].value.shape());
                let (x, y) = (val(*a), val(*b));
                let xn = column_norms(x, d, n);
                let yn = column_norms(y, d, n);
                let eps = T::from_f64(COSINE_EPS);
                let mut ga = vec![T::zero(); d * n];
                let mut gb = vec![T::zero(); d * n];
                for c in 0..n {
                    let dot: T = (0..d).map(|r| x[r * n + c] * y[r * n + c]).sum();
                    let den = xn[c] * yn[c] + eps;
                    let (ax, ay) = cosine_partials(dot, den, xn[c], yn[c]);
                    for r in 0..d {
                        let (xi, yi) = (x[r * n + c], y[r * n + c]);
                        ga[r * n + c] = g[c] * (yi / den - ax * xi);
                        gb[r * n + c] = g[c] * (xi / den - ay * yi);
                    }
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::CrossEntropy { probs, target, weights } => {
                let p = val(*probs);
                let n = target.len();
                let lo = T::from_f64(LOG_CLAMP);
                let nn = T::from_usize(n);
                let mut out = vec![T::zero(); 2 * n];
                for (i, &fg) in target.iter().enumerate() {
                    let c = usize::from(fg);
                    let pv = p[c * n + i];
                    if pv > lo {
                        out[c * n + i] = -g[0] * weights[c] / (pv * nn);
                    }
                }
                send(*probs, out)
            }
        }
    }
}

/// Coefficients `(a_x, a_y)` such that the gradient of `dot/den` with
/// respect to `x` is `y/den - a_x·x` (and symmetrically for `y`), where
/// `den = |x||y| + eps`. Zero-norm vectors contribute no normalization term.
fn cosine_partials<T: Scalar>(dot: T, den: T, xn: T, yn: T) -> (T, T) {
    let den2 = den * den;
    let ax = if xn > T::zero() {
        dot * yn / (xn * den2)
    } else {
        T::zero()
    };
    let ay = if yn > T::zero() {
        dot * xn / (yn * den2)
    } else {
        T::zero()
    };
    (ax, ay)
}

fn cosine_matrix_backward<T: Scalar>(g: &[T], q: &[T], p: &[T], d: usize, m: usize, n: usize) -> (Vec<T>, Vec<T>) {
    let qn = column_norms(q, d, m);
    let pn = column_norms(p, d, n);
    let eps = T::from_f64(COSINE_EPS);
    let mut gq = vec![T::zero(); d * m];
    let mut gp = vec![T::zero(); d * n];
    for j in 0..n {
        for i in 0..m {
            let gij = g[j * m + i];
            if gij == T::zero() {
                continue;
            }
            let dot: T = (0..d).map(|r| q[r * m + i] * p[r * n + j]).sum();
            let den = qn[i] * pn[j] + eps;
            let (aq, ap) = cosine_partials(dot, den, qn[i], pn[j]);
            for r in 0..d {
                let (qi, pj) = (q[r * m + i], p[r * n + j]);
                gq[r * m + i] = gq[r * m + i] + gij * (pj / den - aq * qi);
                gp[r * n + j] = gp[r * n + j] + gij * (qi / den - ap * pj);
            }
        }
    }
    (gq, gp)
}

fn column_norms<T: Scalar>(x: &[T], d: usize, n: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); n];
    for r in 0..d {
        for (a, &v) in acc.iter_mut().zip(&x[r * n..(r + 1) * n]) {
            *a = *a + v * v;
        }
    }
    acc.into_iter().map(|s| s.sqrt()).collect()
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw<T: Scalar>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
