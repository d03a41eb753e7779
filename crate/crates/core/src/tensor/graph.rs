use super::kernels::{
    axis_blocks, broadcast_shape, broadcast_strides, col2im, conv1d_same, for_each_broadcast,
    im2col, reduce_to_shape, sigmoid, ConvGeometry,
};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pooling variants over `C×H×W` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    /// Per-channel spatial mean, `C×1×1`.
    Gap,
    /// Mean across channels, `1×H×W`.
    ChannelAvg,
    /// Max across channels, `1×H×W`.
    ChannelMax,
    /// Non-overlapping 2×2 spatial max, `C×H/2×W/2`.
    SpatialMax2x2,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    RSubScalar(Var),
    Square(Var),
    Recip(Var),
    Log(Var),
    Exp(Var),
    Sigmoid(Var),
    Relu(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    Matmul(Var, Var),
    Softmax(Var, usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        col: Vec<T>,
    },
    Conv1d {
        x: Var,
        w: Var,
        pad: usize,
    },
    Gap(Var),
    ChannelAvg(Var),
    ChannelMax(Var, Vec<u32>),
    MaxPool2(Var, Vec<u32>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Upsample2(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-threaded differentiation tape.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid reverse topological order for [`Graph::backward`].
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Input that receives a gradient (parameters, or inputs under test).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass w.r.t. a leaf; `None` if unreachable.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        // Conv patch buffers are only needed when something upstream wants a gradient.
        let op = match op {
            Op::Conv2d { x, w, b, geom, .. } if !requires_grad => Op::Conv2d {
                x,
                w,
                b,
                geom,
                col: Vec::new(),
            },
            other => other,
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    // ---- elementwise, broadcasting ----

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb).ok_or(Error::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut data = vec![T::zero(); out.iter().product()];
            let (stra, strb) = (broadcast_strides(&sa, &out), broadcast_strides(&sb, &out));
            for_each_broadcast(&out, &stra, &strb, |i, ia, ib| data[i] = f(va[ia], vb[ib]));
            data
        };
        self.push(name, Tensor::new(out, data)?, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(name, value, op, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        self.unary("mul_scalar", x, |v| v * c, Op::MulScalar(x, c))
    }

    /// `c − x`.
    pub fn rsub_scalar(&mut self, c: f64, x: Var) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        self.unary("rsub_scalar", x, |v| c - v, Op::RSubScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        self.unary("recip", x, |v| T::one() / v, Op::Recip(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, |v| v.ln(), Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (T::from_f64_lossy(lo), T::from_f64_lossy(hi));
        self.unary("clamp", x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    // ---- reductions and layout ----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = T::from_usize(t.len()).expect("length fits");
        let s = t.sum() / n;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::invalid("transpose", format!("rank-2 input required, got {:?}", t.shape())));
        }
        let value = transpose2(t);
        self.push("transpose", value, Op::Transpose(x), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, d, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            d,
            m,
            self.value(a).data(),
            (d as isize, 1),
            self.value(b).data(),
            (m as isize, 1),
            T::zero(),
            &mut out,
        );
        self.push("matmul", Tensor::new(vec![n, m], out)?, Op::Matmul(a, b), &[a, b])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, n, inner) = axis_blocks(t.shape(), axis);
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(x, axis), &[x])
    }

    // ---- convolution ----

    /// 2D cross-correlation of `C_in×H×W` with `C_out×C_in×k×k` plus optional bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (c_out, c_in, k) = (sw[0], sw[1], sw[2]);
        if c_in != sx[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if k % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![c_out],
                });
            }
        }
        let extent = |n: usize| -> Result<usize> {
            let span = n + 2 * pad;
            if span < k || (span - k) % stride != 0 {
                return Err(Error::invalid(
                    "conv2d",
                    format!("extent {n} with kernel {k}, padding {pad}, stride {stride} is not integral"),
                ));
            }
            Ok((span - k) / stride + 1)
        };
        let geom = ConvGeometry {
            c_in,
            h: sx[1],
            w: sx[2],
            k,
            stride,
            pad,
            h_out: extent(sx[1])?,
            w_out: extent(sx[2])?,
        };
        let (rows, cols) = (geom.rows(), geom.cols());
        let mut col = vec![T::zero(); rows * cols];
        im2col(self.value(x).data(), &geom, &mut col);
        let mut out = vec![T::zero(); c_out * cols];
        if let Some(b) = b {
            for (co, &bias) in self.value(b).data().iter().enumerate() {
                out[co * cols..(co + 1) * cols].fill(bias);
            }
        }
        T::gemm(
            c_out,
            rows,
            cols,
            self.value(w).data(),
            (rows as isize, 1),
            &col,
            (cols as isize, 1),
            T::one(),
            &mut out,
        );
        let value = Tensor::new(vec![c_out, geom.h_out, geom.w_out], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push("conv2d", value, Op::Conv2d { x, w, b, geom, col }, &parents)
    }

    /// Length-preserving 1D convolution of a `1×C` signal with a `1×1×k` kernel.
    pub fn conv1d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sx[0] != 1 || sw.len() != 3 || sw[0] != 1 || sw[1] != 1 {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: sx,
                rhs: sw,
            });
        }
        let k = sw[2];
        if k % 2 == 0 {
            return Err(Error::invalid("conv1d", format!("kernel size {k} must be odd")));
        }
        if 2 * pad + 1 != k {
            return Err(Error::invalid("conv1d", format!("padding {pad} does not preserve length for kernel {k}")));
        }
        let mut out = vec![T::zero(); sx[1]];
        conv1d_same(self.value(x).data(), self.value(w).data(), pad, &mut out);
        self.push("conv1d", Tensor::new(sx, out)?, Op::Conv1d { x, w, pad }, &[x, w])
    }

    // ---- pooling, concat, resampling ----

    pub fn pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 3 {
            return Err(Error::invalid("pool", format!("C×H×W input required, got {:?}", t.shape())));
        }
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let hw = h * w;
        let src = t.data();
        match mode {
            PoolMode::Gap => {
                let n = T::from_usize(hw).expect("extent fits");
                let out = (0..c)
                    .map(|ci| src[ci * hw..(ci + 1) * hw].iter().copied().sum::<T>() / n)
                    .collect();
                self.push("gap", Tensor::new(vec![c, 1, 1], out)?, Op::Gap(x), &[x])
            }
            PoolMode::ChannelAvg => {
                let n = T::from_usize(c).expect("extent fits");
                let mut out = vec![T::zero(); hw];
                for ci in 0..c {
                    for (o, &v) in out.iter_mut().zip(&src[ci * hw..(ci + 1) * hw]) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o = *o / n);
                self.push("channel_avg", Tensor::new(vec![1, h, w], out)?, Op::ChannelAvg(x), &[x])
            }
            PoolMode::ChannelMax => {
                let mut out = src[..hw].to_vec();
                let mut arg = vec![0u32; hw];
                for ci in 1..c {
                    for p in 0..hw {
                        let v = src[ci * hw + p];
                        if v > out[p] {
                            out[p] = v;
                            arg[p] = ci as u32;
                        }
                    }
                }
                self.push("channel_max", Tensor::new(vec![1, h, w], out)?, Op::ChannelMax(x, arg), &[x])
            }
            PoolMode::SpatialMax2x2 => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::invalid("pool", format!("spatial 2×2 max needs even extents, got {h}×{w}")));
                }
                let (ho, wo) = (h / 2, w / 2);
                let mut out = vec![T::zero(); c * ho * wo];
                let mut arg = vec![0u32; c * ho * wo];
                for ci in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let base = ci * hw + 2 * oy * w + 2 * ox;
                            let mut best = base;
                            for idx in [base + 1, base + w, base + w + 1] {
                                if src[idx] > src[best] {
                                    best = idx;
                                }
                            }
                            let o = (ci * ho + oy) * wo + ox;
                            out[o] = src[best];
                            arg[o] = best as u32;
                        }
                    }
                }
                self.push("max_pool2", Tensor::new(vec![c, ho, wo], out)?, Op::MaxPool2(x, arg), &[x])
            }
        }
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "at least one part required"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_blocks(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        self.push("concat", Tensor::new(shape, out)?, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::invalid("slice", format!("range {start}..{} on axis {axis} of {s:?}", start + len)));
        }
        let (outer, n, inner) = axis_blocks(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push("slice", Tensor::new(shape, out)?, Op::Slice { x, axis, start }, &[x])
    }

    /// Nearest-neighbour ×2 upsampling of `C×H×W`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 3 {
            return Err(Error::invalid("upsample2", format!("C×H×W input required, got {:?}", t.shape())));
        }
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let src = t.data();
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ci in 0..c {
            for y in 0..2 * h {
                let src_row = &src[(ci * h + y / 2) * w..(ci * h + y / 2 + 1) * w];
                let dst_row = &mut out[(ci * 2 * h + y) * 2 * w..(ci * 2 * h + y + 1) * 2 * w];
                for (x2, d) in dst_row.iter_mut().enumerate() {
                    *d = src_row[x2 / 2];
                }
            }
        }
        self.push("upsample2", Tensor::new(vec![c, 2 * h, 2 * w], out)?, Op::Upsample2(x), &[x])
    }

    // ---- backward ----

    /// Reverse pass from a scalar `loss`; leaf gradients become available via [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(shape.to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads)?;
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let y = &nodes[i].value;
        let gd = g.data();
        let mut send = |v: Var, data: Vec<T>| -> Result<()> {
            if !nodes[v.0].requires_grad {
                return Ok(());
            }
            let shape = nodes[v.0].value.shape().to_vec();
            let t = Tensor::new(shape, data)?;
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
            Ok(())
        };
        let val = |v: Var| nodes[v.0].value.data();
        let elementwise = |v: Var, f: &dyn Fn(T, T, T) -> T| -> Vec<T> {
            gd.iter()
                .zip(val(v))
                .zip(y.data())
                .map(|((&g, &x), &y)| f(g, x, y))
                .collect()
        };

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let out = y.shape();
                let ga = reduce_to_shape(gd, out, self.shape(*a));
                let mut gb = reduce_to_shape(gd, out, self.shape(*b));
                if matches!(nodes[i].op, Op::Sub(..)) {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                send(*a, ga)?;
                send(*b, gb)?;
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(nodes[i].op, Op::Div(..));
                let out = y.shape();
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (stra, strb) = (broadcast_strides(sa, out), broadcast_strides(sb, out));
                let (va, vb) = (val(*a), val(*b));
                let mut ga_full = vec![T::zero(); gd.len()];
                let mut gb_full = vec![T::zero(); gd.len()];
                for_each_broadcast(out, &stra, &strb, |k, ia, ib| {
                    if is_div {
                        ga_full[k] = gd[k] / vb[ib];
                        gb_full[k] = -gd[k] * va[ia] / (vb[ib] * vb[ib]);
                    } else {
                        ga_full[k] = gd[k] * vb[ib];
                        gb_full[k] = gd[k] * va[ia];
                    }
                });
                send(*a, reduce_to_shape(&ga_full, out, sa))?;
                send(*b, reduce_to_shape(&gb_full, out, sb))?;
            }
            Op::AddScalar(x) | Op::Reshape(x) => send(*x, gd.to_vec())?,
            Op::MulScalar(x, c) => send(*x, gd.iter().map(|&g| g * *c).collect())?,
            Op::RSubScalar(x) => send(*x, gd.iter().map(|&g| -g).collect())?,
            Op::Square(x) => send(*x, elementwise(*x, &|g, x, _| g * (x + x)))?,
            Op::Recip(x) => send(*x, elementwise(*x, &|g, _, y| -g * y * y))?,
            Op::Log(x) => send(*x, elementwise(*x, &|g, x, _| g / x))?,
            Op::Exp(x) => send(*x, elementwise(*x, &|g, _, y| g * y))?,
            Op::Sigmoid(x) => send(*x, elementwise(*x, &|g, _, y| g * y * (T::one() - y)))?,
            Op::Relu(x) => send(*x, elementwise(*x, &|g, x, _| if x > T::zero() { g } else { T::zero() }))?,
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                send(*x, elementwise(*x, &|g, x, _| if x >= lo && x <= hi { g } else { T::zero() }))?
            }
            Op::Sum(x) => send(*x, vec![gd[0]; nodes[x.0].value.len()])?,
            Op::Mean(x) => {
                let n = nodes[x.0].value.len();
                let v = gd[0] / T::from_usize(n).expect("length fits");
                send(*x, vec![v; n])?
            }
            Op::Transpose(x) => send(*x, transpose2(g).into_data())?,
            Op::Matmul(a, b) => {
                let (n, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                let mut ga = vec![T::zero(); n * d];
                T::gemm(n, m, d, gd, (m as isize, 1), val(*b), (1, m as isize), T::zero(), &mut ga);
                let mut gb = vec![T::zero(); d * m];
                T::gemm(d, n, m, val(*a), (1, d as isize), gd, (m as isize, 1), T::zero(), &mut gb);
                send(*a, ga)?;
                send(*b, gb)?;
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = axis_blocks(y.shape(), *axis);
                let yd = y.data();
                let mut gx = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot: T = (0..n).map(|j| gd[at(j)] * yd[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                send(*x, gx)?
            }
            Op::Conv2d { x, w, b, geom, col } => {
                let (rows, cols) = (geom.rows(), geom.cols());
                let c_out = y.shape()[0];
                if nodes[w.0].requires_grad {
                    let mut gw = vec![T::zero(); c_out * rows];
                    T::gemm(c_out, cols, rows, gd, (cols as isize, 1), col, (1, cols as isize), T::zero(), &mut gw);
                    send(*w, gw)?;
                }
                if let Some(b) = b {
                    let gb = (0..c_out)
                        .map(|co| gd[co * cols..(co + 1) * cols].iter().copied().sum())
                        .collect();
                    send(*b, gb)?;
                }
                if nodes[x.0].requires_grad {
                    let mut gcol = vec![T::zero(); rows * cols];
                    T::gemm(rows, c_out, cols, val(*w), (1, rows as isize), gd, (cols as isize, 1), T::zero(), &mut gcol);
                    let mut gx = vec![T::zero(); nodes[x.0].value.len()];
                    col2im(&gcol, geom, &mut gx);
                    send(*x, gx)?;
                }
            }
            Op::Conv1d { x, w, pad } => {
                let (xs, ws) = (val(*x), val(*w));
                let n = xs.len();
                let mut gx = vec![T::zero(); n];
                let mut gw = vec![T::zero(); ws.len()];
                for (i, &go) in gd.iter().enumerate() {
                    for (j, &wj) in ws.iter().enumerate() {
                        let idx = i as isize + j as isize - *pad as isize;
                        if idx >= 0 && (idx as usize) < n {
                            gx[idx as usize] += go * wj;
                            gw[j] += go * xs[idx as usize];
                        }
                    }
                }
                send(*x, gx)?;
                send(*w, gw)?;
            }
            Op::Gap(x) => {
                let s = self.shape(*x);
                let hw = s[1] * s[2];
                let n = T::from_usize(hw).expect("extent fits");
                let mut gx = vec![T::zero(); s[0] * hw];
                for (c, chunk) in gx.chunks_mut(hw).enumerate() {
                    chunk.fill(gd[c] / n);
                }
                send(*x, gx)?
            }
            Op::ChannelAvg(x) => {
                let c = self.shape(*x)[0];
                let n = T::from_usize(c).expect("extent fits");
                let plane: Vec<T> = gd.iter().map(|&g| g / n).collect();
                send(*x, plane.repeat(c))?
            }
            Op::ChannelMax(x, arg) => {
                let hw = gd.len();
                let mut gx = vec![T::zero(); nodes[x.0].value.len()];
                for (p, (&g, &c)) in gd.iter().zip(arg).enumerate() {
                    gx[c as usize * hw + p] = g;
                }
                send(*x, gx)?
            }
            Op::MaxPool2(x, arg) => {
                let mut gx = vec![T::zero(); nodes[x.0].value.len()];
                for (&g, &idx) in gd.iter().zip(arg) {
                    gx[idx as usize] += g;
                }
                send(*x, gx)?
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_blocks(y.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    let mut gp = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let from = (o * total + offset) * inner;
                        gp.extend_from_slice(&gd[from..from + n * inner]);
                    }
                    send(p, gp)?;
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x);
                let (outer, n, inner) = axis_blocks(s, *axis);
                let len = y.shape()[*axis];
                let mut gx = vec![T::zero(); nodes[x.0].value.len()];
                for o in 0..outer {
                    let to = (o * n + start) * inner;
                    gx[to..to + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                send(*x, gx)?
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut gx = vec![T::zero(); c * h * w];
                for ci in 0..c {
                    for y2 in 0..2 * h {
                        for x2 in 0..2 * w {
                            gx[(ci * h + y2 / 2) * w + x2 / 2] += gd[(ci * 2 * h + y2) * 2 * w + x2];
                        }
                    }
                }
                send(*x, gx)?
            }
        }
        Ok(())
    }
}

fn transpose2<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let src = t.data();
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("transpose preserves element count")
}
