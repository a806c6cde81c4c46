//! Reverse-mode differentiation over a linear record of tensor operations.

use super::kernels::{self, Conv2dGeom, Conv3dGeom};
use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        k: Var,
        geom: Conv2dGeom,
        batch: usize,
    },
    /// `geom` describes the forward convolution whose data gradient this is.
    ConvTranspose2d {
        x: Var,
        k: Var,
        geom: Conv2dGeom,
        batch: usize,
    },
    Conv3d {
        x: Var,
        k: Var,
        geom: Conv3dGeom,
        batch: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
        rows: usize,
        n_in: usize,
        n_out: usize,
    },
    BiasAdd {
        x: Var,
        b: Var,
        channels: usize,
        inner: usize,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Clamp(Var, T, T),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat {
        inputs: Vec<Var>,
        lens: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Narrow {
        x: Var,
        outer: usize,
        src_len: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    /// `map[i]` is the output slot fed by input element `i`.
    MeanPool {
        x: Var,
        map: Vec<usize>,
        count: usize,
    },
    /// `map[j]` is the input element copied to output element `j`.
    BroadcastTo {
        x: Var,
        map: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MseLoss(Var, Var),
    /// Externally evaluated map with a per-row Jacobian `[rows, n_out, n_in]`.
    Jacobian {
        x: Var,
        jac: Vec<T>,
        rows: usize,
        n_in: usize,
        n_out: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Conv3d { .. } => "conv3d",
            Op::Linear { .. } => "linear",
            Op::BiasAdd { .. } => "bias_add",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Clamp(..) => "clamp",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::MeanPool { .. } => "mean_pool",
            Op::BroadcastTo { .. } => "broadcast_to",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MseLoss(..) => "mse_loss",
            Op::Jacobian { .. } => "map_with_jacobian",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Record of executed operations. Nodes are appended in execution order, so
/// the record is topologically sorted by construction.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        let value = Tensor::new(shape, data)
            .expect("op produced inconsistent tensor")
            .with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Insert a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let mut t = t;
        let rg = t.requires_grad();
        t.set_requires_grad(rg);
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.detached().with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.detached())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// First node, in execution order, whose value holds a NaN or infinity,
    /// together with the name of the operation that produced it.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .position(|n| !n.value.is_finite())
            .map(|i| (Var(i), self.nodes[i].op.name()))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize, what: &str) -> Result<&[usize]> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(Error::dim(op, what, format!("expected rank {rank}, got shape {s:?}")));
        }
        Ok(s)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(Error::dim(op, "rank", format!("{sa:?} vs {sb:?}")));
        }
        if let Some(ax) = sa.iter().zip(sb).position(|(x, y)| x != y) {
            return Err(Error::dim(op, format!("axis {ax}"), format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    // ---- convolutions ----

    /// 2D cross-correlation of `x[B,Cin,H,W]` with `k[Cout,Cin,kh,kw]`, zero
    /// padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.expect_rank("conv2d", x, 4, "input")?.to_vec();
        let ks = self.expect_rank("conv2d", k, 4, "kernel")?.to_vec();
        let geom = conv_geom("conv2d", &xs, &ks, stride, pad)?;
        let out = kernels::conv2d_forward(self.data(x), self.data(k), xs[0], &geom);
        Ok(self.push(
            out,
            vec![xs[0], geom.cout, geom.ho, geom.wo],
            Op::Conv2d {
                x,
                k,
                geom,
                batch: xs[0],
            },
            &[x, k],
        ))
    }

    /// Adjoint of [`Graph::conv2d`]: `x[B,Cx,H,W]`, `k[Cx,Cy,kh,kw]` gives
    /// `[B,Cy,(H−1)·stride−2·pad+kh+output_pad, …]`.
    pub fn conv_transpose2d(&mut self, x: Var, k: Var, stride: usize, pad: usize, output_pad: usize) -> Result<Var> {
        let xs = self.expect_rank("conv_transpose2d", x, 4, "input")?.to_vec();
        let ks = self.expect_rank("conv_transpose2d", k, 4, "kernel")?.to_vec();
        if ks[0] != xs[1] {
            return Err(Error::dim(
                "conv_transpose2d",
                "axis 1 (channels)",
                format!("input has {} channels, kernel expects {}", xs[1], ks[0]),
            ));
        }
        if stride == 0 {
            return Err(Error::Contract("conv_transpose2d: stride must be positive".into()));
        }
        if output_pad >= stride {
            return Err(Error::Contract(format!(
                "conv_transpose2d: output_pad {output_pad} must be below stride {stride}"
            )));
        }
        let extent = |n: usize, kk: usize, axis: &str| -> Result<usize> {
            let full = (n - 1) * stride + kk + output_pad;
            if full <= 2 * pad {
                return Err(Error::dim(
                    "conv_transpose2d",
                    axis,
                    "padding consumes the whole output",
                ));
            }
            Ok(full - 2 * pad)
        };
        let ho = extent(xs[2], ks[2], "axis 2 (height)")?;
        let wo = extent(xs[3], ks[3], "axis 3 (width)")?;
        let geom = Conv2dGeom {
            cin: ks[1],
            h: ho,
            w: wo,
            cout: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
            ho: xs[2],
            wo: xs[3],
        };
        let out = kernels::conv2d_backward_data(self.data(x), self.data(k), xs[0], &geom);
        Ok(self.push(
            out,
            vec![xs[0], geom.cin, ho, wo],
            Op::ConvTranspose2d {
                x,
                k,
                geom,
                batch: xs[0],
            },
            &[x, k],
        ))
    }

    /// Stride-1 3D cross-correlation of `x[B,Cin,D,H,W]` with
    /// `k[Cout,Cin,kd,kh,kw]`.
    pub fn conv3d(&mut self, x: Var, k: Var, pad: usize) -> Result<Var> {
        let xs = self.expect_rank("conv3d", x, 5, "input")?.to_vec();
        let ks = self.expect_rank("conv3d", k, 5, "kernel")?.to_vec();
        if ks[1] != xs[1] {
            return Err(Error::dim(
                "conv3d",
                "axis 1 (channels)",
                format!("input has {} channels, kernel expects {}", xs[1], ks[1]),
            ));
        }
        for (i, name) in [(2, "axis 2 (depth)"), (3, "axis 3 (height)"), (4, "axis 4 (width)")] {
            if ks[i] % 2 == 0 {
                return Err(Error::dim("conv3d", name, "kernel extent must be odd"));
            }
            if xs[i] + 2 * pad < ks[i] {
                return Err(Error::dim("conv3d", name, "kernel larger than padded input"));
            }
        }
        let geom = Conv3dGeom {
            cin: xs[1],
            cout: ks[0],
            d: xs[2],
            h: xs[3],
            w: xs[4],
            kd: ks[2],
            kh: ks[3],
            kw: ks[4],
            pad,
        };
        let (od, oh, ow) = geom.out_dims();
        let out = kernels::conv3d_forward(self.data(x), self.data(k), xs[0], &geom);
        Ok(self.push(
            out,
            vec![xs[0], geom.cout, od, oh, ow],
            Op::Conv3d {
                x,
                k,
                geom,
                batch: xs[0],
            },
            &[x, k],
        ))
    }

    // ---- affine ----

    /// `y = x·Wᵀ + b` for `x[B,n]`, `W[m,n]`, `b[m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.expect_rank("linear", x, 2, "input")?.to_vec();
        let ws = self.expect_rank("linear", w, 2, "weight")?.to_vec();
        let bs = self.expect_rank("linear", b, 1, "bias")?.to_vec();
        if ws[1] != xs[1] {
            return Err(Error::dim(
                "linear",
                "axis 1 (inner)",
                format!("input width {} vs weight width {}", xs[1], ws[1]),
            ));
        }
        if bs[0] != ws[0] {
            return Err(Error::dim(
                "linear",
                "axis 0 (outputs)",
                format!("bias length {} vs weight rows {}", bs[0], ws[0]),
            ));
        }
        let (rows, n_in, n_out) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); rows * n_out];
        for r in 0..rows {
            out[r * n_out..(r + 1) * n_out].copy_from_slice(self.data(b));
        }
        gemm(
            rows,
            n_in,
            n_out,
            self.data(x),
            false,
            self.data(w),
            true,
            &mut out,
            true,
        );
        Ok(self.push(
            out,
            vec![rows, n_out],
            Op::Linear {
                x,
                w,
                b,
                rows,
                n_in,
                n_out,
            },
            &[x, w, b],
        ))
    }

    /// Add a per-channel bias `b[C]` to `x[B,C,…]`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.expect_rank("bias_add", b, 1, "bias")?.to_vec();
        if xs.len() < 2 || xs[1] != bs[0] {
            return Err(Error::dim(
                "bias_add",
                "axis 1 (channels)",
                format!("input {xs:?} vs bias {bs:?}"),
            ));
        }
        let channels = xs[1];
        let inner: usize = xs[2..].iter().product();
        let bias = self.data(b);
        let out: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[(i / inner) % channels])
            .collect();
        Ok(self.push(out, xs, Op::BiasAdd { x, b, channels, inner }, &[x, b]))
    }

    // ---- elementwise ----

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(out, shape, op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(
            x,
            move |v| if v > T::zero() { v } else { v * slope },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(
            x,
            move |v| if v.is_nan() { v } else { v.max(lo).min(hi) },
            Op::Clamp(x, lo, hi),
        )
    }

    /// Multiply by an explicit scalar.
    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, move |v| v * c, Op::Scale(x, c))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, op, &[a, b]))
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

    // ---- structure ----

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("concat: no inputs".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(
                "concat",
                format!("axis {axis}"),
                format!("rank is {}", base.len()),
            ));
        }
        let mut lens = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() {
                return Err(Error::dim("concat", "rank", format!("{base:?} vs {s:?}")));
            }
            if let Some(ax) = (0..s.len()).find(|&i| i != axis && s[i] != base[i]) {
                return Err(Error::dim("concat", format!("axis {ax}"), format!("{base:?} vs {s:?}")));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in inputs.iter().zip(&lens) {
                out.extend_from_slice(&self.data(v)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            out,
            shape,
            Op::Concat {
                inputs: inputs.to_vec(),
                lens,
                outer,
                inner,
            },
            inputs,
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::dim(
                "narrow",
                format!("axis {axis}"),
                format!("rank is {}", xs.len()),
            ));
        }
        if len == 0 || start + len > xs[axis] {
            return Err(Error::dim(
                "narrow",
                format!("axis {axis}"),
                format!("range {start}..{} outside extent {}", start + len, xs[axis]),
            ));
        }
        let (outer, src_len, inner) = split_axis(&xs, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        let d = self.data(x);
        for o in 0..outer {
            let s = (o * src_len + start) * inner;
            out.extend_from_slice(&d[s..s + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        Ok(self.push(
            out,
            shape,
            Op::Narrow {
                x,
                outer,
                src_len,
                start,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// Mean over the listed axes; those axes are removed from the shape.
    pub fn mean_pool(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut reduce = vec![false; xs.len()];
        for &a in axes {
            if a >= xs.len() {
                return Err(Error::dim(
                    "mean_pool",
                    format!("axis {a}"),
                    format!("rank is {}", xs.len()),
                ));
            }
            reduce[a] = true;
        }
        let kept: Vec<usize> = (0..xs.len()).filter(|&i| !reduce[i]).collect();
        let out_shape: Vec<usize> = if kept.is_empty() {
            vec![1]
        } else {
            kept.iter().map(|&i| xs[i]).collect()
        };
        // output stride for each input axis (0 on reduced axes)
        let mut ostride = vec![0usize; xs.len()];
        let mut acc = 1;
        for &i in kept.iter().rev() {
            ostride[i] = acc;
            acc *= xs[i];
        }
        let n = numel(&xs);
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; xs.len()];
        for _ in 0..n {
            map.push(idx.iter().zip(&ostride).map(|(a, b)| a * b).sum());
            for ax in (0..xs.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < xs[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let count = n / numel(&out_shape);
        let mut out = vec![T::zero(); numel(&out_shape)];
        for (&v, &o) in self.data(x).iter().zip(&map) {
            out[o] += v;
        }
        let inv = T::one() / T::lit(count as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(out, out_shape, Op::MeanPool { x, map, count }, &[x]))
    }

    /// Explicit broadcast: axes of extent 1 in `x` expand to `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != shape.len() {
            return Err(Error::dim("broadcast_to", "rank", format!("{xs:?} to {shape:?}")));
        }
        for (i, (&a, &b)) in xs.iter().zip(shape).enumerate() {
            if a != b && a != 1 {
                return Err(Error::dim(
                    "broadcast_to",
                    format!("axis {i}"),
                    format!("{xs:?} to {shape:?}"),
                ));
            }
        }
        let n = numel(shape);
        let mut istride = vec![0usize; xs.len()];
        let mut acc = 1;
        for i in (0..xs.len()).rev() {
            istride[i] = if xs[i] == 1 { 0 } else { acc };
            acc *= xs[i];
        }
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            map.push(idx.iter().zip(&istride).map(|(a, b)| a * b).sum());
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let d = self.data(x);
        let out = map.iter().map(|&i| d[i]).collect();
        Ok(self.push(out, shape.to_vec(), Op::BroadcastTo { x, map }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if numel(shape) != n || shape.contains(&0) {
            return Err(Error::ElementCount {
                op: "reshape",
                expected: n,
                actual: numel(shape),
            });
        }
        let out = self.data(x).to_vec();
        Ok(self.push(out, shape.to_vec(), Op::Reshape(x), &[x]))
    }

    /// `[B, …] → [B, prod(…)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let rest: usize = xs[1..].iter().product();
        self.reshape(x, &[xs[0], rest.max(1)])
    }

    // ---- reductions / losses ----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(vec![s], vec![1], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s: T = d.iter().copied().sum::<T>() / T::lit(d.len() as f64);
        self.push(vec![s], vec![1], Op::Mean(x), &[x])
    }

    /// Mean squared difference over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let (p, t) = (self.data(pred), self.data(target));
        let s = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / T::lit(p.len() as f64);
        Ok(self.push(vec![s], vec![1], Op::MseLoss(pred, target), &[pred, target]))
    }

    /// Attach an externally computed row-wise map `x[rows,n_in] → y[rows,n_out]`.
    ///
    /// `jac` holds `∂y[r,o]/∂x[r,i]` at `[r, o, i]`; it may be `None` only
    /// when `x` does not require a gradient.
    pub fn map_with_jacobian(&mut self, x: Var, y: Tensor<T>, jac: Option<Vec<T>>) -> Result<Var> {
        let xs = self.expect_rank("map_with_jacobian", x, 2, "input")?.to_vec();
        let ys = y.shape().to_vec();
        if ys.len() != 2 || ys[0] != xs[0] {
            return Err(Error::dim(
                "map_with_jacobian",
                "axis 0 (rows)",
                format!("input {xs:?} vs output {ys:?}"),
            ));
        }
        let (rows, n_in, n_out) = (xs[0], xs[1], ys[1]);
        let jac = match jac {
            Some(j) if j.len() == rows * n_in * n_out => j,
            Some(j) => {
                return Err(Error::ElementCount {
                    op: "map_with_jacobian",
                    expected: rows * n_in * n_out,
                    actual: j.len(),
                })
            }
            None if self.requires_grad(x) => {
                return Err(Error::Contract(
                    "map_with_jacobian: Jacobian required for a differentiable input".into(),
                ))
            }
            None => Vec::new(),
        };
        Ok(self.push(
            y.into_data(),
            ys,
            Op::Jacobian {
                x,
                jac,
                rows,
                n_in,
                n_out,
            },
            &[x],
        ))
    }

    // ---- backward ----

    /// Accumulate `∂loss/∂leaf` into every gradient-tracking leaf reachable
    /// from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].value.requires_grad();
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].value.requires_grad() {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Conv2d { x, k, geom, batch } => {
                if needs(*x) {
                    acc(*x, kernels::conv2d_backward_data(g, self.data(*k), *batch, geom));
                }
                if needs(*k) {
                    let mut dk = vec![T::zero(); self.value(*k).numel()];
                    kernels::conv2d_backward_kernel(self.data(*x), g, *batch, geom, &mut dk);
                    acc(*k, dk);
                }
            }
            Op::ConvTranspose2d { x, k, geom, batch } => {
                if needs(*x) {
                    acc(*x, kernels::conv2d_forward(g, self.data(*k), *batch, geom));
                }
                if needs(*k) {
                    let mut dk = vec![T::zero(); self.value(*k).numel()];
                    // roles swap: the upstream gradient is the image, x the map
                    kernels::conv2d_backward_kernel(g, self.data(*x), *batch, geom, &mut dk);
                    acc(*k, dk);
                }
            }
            Op::Conv3d { x, k, geom, batch } => {
                let (dx, dk) = kernels::conv3d_backward(self.data(*x), self.data(*k), g, *batch, geom);
                acc(*x, dx);
                acc(*k, dk);
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                n_in,
                n_out,
            } => {
                if needs(*x) {
                    let mut dx = vec![T::zero(); rows * n_in];
                    gemm(*rows, *n_out, *n_in, g, false, self.data(*w), false, &mut dx, false);
                    acc(*x, dx);
                }
                if needs(*w) {
                    let mut dw = vec![T::zero(); n_out * n_in];
                    gemm(*n_out, *rows, *n_in, g, true, self.data(*x), false, &mut dw, false);
                    acc(*w, dw);
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); *n_out];
                    for r in 0..*rows {
                        db.iter_mut()
                            .zip(&g[r * n_out..(r + 1) * n_out])
                            .for_each(|(a, &b)| *a += b);
                    }
                    acc(*b, db);
                }
            }
            Op::BiasAdd { x, b, channels, inner } => {
                acc(*x, g.to_vec());
                if needs(*b) {
                    let mut db = vec![T::zero(); *channels];
                    for (j, &v) in g.iter().enumerate() {
                        db[(j / inner) % channels] += v;
                    }
                    acc(*b, db);
                }
            }
            Op::Sigmoid(x) => acc(*x, g.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect()),
            Op::Tanh(x) => acc(*x, g.iter().zip(y).map(|(&g, &t)| g * (T::one() - t * t)).collect()),
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect(),
            ),
            Op::LeakyRelu(x, slope) => acc(
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(&g, &v)| if v > T::zero() { g } else { g * *slope })
                    .collect(),
            ),
            Op::Clamp(x, lo, hi) => acc(
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(&g, &v)| if v > *lo && v < *hi { g } else { T::zero() })
                    .collect(),
            ),
            Op::Scale(x, c) => acc(*x, g.iter().map(|&v| v * *c).collect()),
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.iter().zip(self.data(*b)).map(|(&g, &v)| g * v).collect());
                }
                if needs(*b) {
                    acc(*b, g.iter().zip(self.data(*a)).map(|(&g, &v)| g * v).collect());
                }
            }
            Op::Concat {
                inputs,
                lens,
                outer,
                inner,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&v, &len) in inputs.iter().zip(lens) {
                    if needs(v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..*outer {
                            let s = (o * total + offset) * inner;
                            d.extend_from_slice(&g[s..s + len * inner]);
                        }
                        acc(v, d);
                    }
                    offset += len;
                }
            }
            Op::Narrow {
                x,
                outer,
                src_len,
                start,
                len,
                inner,
            } => {
                let mut d = vec![T::zero(); outer * src_len * inner];
                for o in 0..*outer {
                    let s = (o * src_len + start) * inner;
                    d[s..s + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, d);
            }
            Op::MeanPool { x, map, count } => {
                let inv = T::one() / T::lit(*count as f64);
                acc(*x, map.iter().map(|&o| g[o] * inv).collect());
            }
            Op::BroadcastTo { x, map } => {
                let mut d = vec![T::zero(); self.value(*x).numel()];
                for (&src, &v) in map.iter().zip(g) {
                    d[src] += v;
                }
                acc(*x, d);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::MseLoss(p, t) => {
                let n = T::lit(self.value(*p).numel() as f64);
                let two = T::lit(2.0);
                let diff: Vec<T> = self
                    .data(*p)
                    .iter()
                    .zip(self.data(*t))
                    .map(|(&a, &b)| two * (a - b) / n * g[0])
                    .collect();
                if needs(*t) {
                    acc(*t, diff.iter().map(|&v| -v).collect());
                }
                acc(*p, diff);
            }
            Op::Jacobian {
                x,
                jac,
                rows,
                n_in,
                n_out,
            } => {
                let mut d = vec![T::zero(); rows * n_in];
                for r in 0..*rows {
                    let jr = &jac[r * n_out * n_in..(r + 1) * n_out * n_in];
                    gemm(
                        1,
                        *n_out,
                        *n_in,
                        &g[r * n_out..(r + 1) * n_out],
                        false,
                        jr,
                        false,
                        &mut d[r * n_in..(r + 1) * n_in],
                        false,
                    );
                }
                acc(*x, d);
            }
        }
    }
}

fn check_kernel(op: &'static str, ks: &[usize], stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::Contract(format!("{op}: stride must be positive")));
    }
    if ks[2] % 2 == 0 {
        return Err(Error::dim(op, "axis 2 (kernel height)", "kernel extent must be odd"));
    }
    if ks[3] % 2 == 0 {
        return Err(Error::dim(op, "axis 3 (kernel width)", "kernel extent must be odd"));
    }
    Ok(())
}

fn conv_geom(op: &'static str, xs: &[usize], ks: &[usize], stride: usize, pad: usize) -> Result<Conv2dGeom> {
    if ks[1] != xs[1] {
        return Err(Error::dim(
            op,
            "axis 1 (channels)",
            format!("input has {} channels, kernel expects {}", xs[1], ks[1]),
        ));
    }
    check_kernel(op, ks, stride)?;
    if xs[2] + 2 * pad < ks[2] {
        return Err(Error::dim(op, "axis 2 (height)", "kernel taller than padded input"));
    }
    if xs[3] + 2 * pad < ks[3] {
        return Err(Error::dim(op, "axis 3 (width)", "kernel wider than padded input"));
    }
    Ok(Conv2dGeom {
        cin: xs[1],
        h: xs[2],
        w: xs[3],
        cout: ks[0],
        kh: ks[2],
        kw: ks[3],
        stride,
        pad,
        ho: (xs[2] + 2 * pad - ks[2]) / stride + 1,
        wo: (xs[3] + 2 * pad - ks[3]) / stride + 1,
    })
}
