//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. Nodes only
//! reference earlier nodes, so the tape is already in topological order and
//! `backward` is a single reverse sweep.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::kernels::broadcast::{broadcast_dims, broadcast_strides, for_each_pair};
use crate::kernels::conv::{conv2d_backward, conv2d_forward, ConvGeometry, Padding};
use crate::kernels::{self, channel_split};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Log,
    Square,
    Relu,
    Softplus,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, T),
    AddScalar(Var),
    ClampMin(Var, T),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    WeightedSqNorm(Var, Var),
    Reshape(Var),
    Narrow {
        src: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Upsample2x(Var),
    InstanceNorm {
        src: Var,
        inv_std: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<T>>,
}

/// Single-threaded recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable input: receives gradients on `backward`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.dims().to_vec(), g.clone()).expect("grad dims"))
    }

    /// Gradient of a leaf, zeros if it never received one.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.dims()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_dims = broadcast_dims(ta.dims(), tb.dims())?;
        let sa = broadcast_strides(ta.dims(), &out_dims);
        let sb = broadcast_strides(tb.dims(), &out_dims);
        let (da, db) = (ta.data(), tb.data());
        if let Binary::Div = kind {
            if let Some(i) = db.iter().position(|v| v.is_zero()) {
                return Err(TensorError::Domain {
                    op: "div",
                    index: i,
                    value: 0.0,
                });
            }
        }
        let n: usize = out_dims.iter().product();
        let mut out = vec![T::zero(); n];
        for_each_pair(&out_dims, &sa, &sb, |o, ia, ib| {
            let (x, y) = (da[ia], db[ib]);
            out[o] = match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            };
        });
        let rg = self.any_grad(&[a, b]);
        let value = Tensor::new(out_dims, out)?;
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Fails with a domain error naming the first zero divisor.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        if let Unary::Log = kind {
            if let Some(i) = src.data().iter().position(|v| !(*v > T::zero())) {
                return Err(TensorError::Domain {
                    op: "log",
                    index: i,
                    value: src.data()[i].as_f64(),
                });
            }
        }
        let data = src
            .data()
            .iter()
            .map(|&x| match kind {
                Unary::Neg => -x,
                Unary::Exp => x.exp(),
                Unary::Log => x.ln(),
                Unary::Square => x * x,
                Unary::Relu => x.max(T::zero()),
                Unary::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            })
            .collect();
        let value = Tensor::new(src.dims().to_vec(), data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Unary(kind, a), rg))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    /// Fails with a domain error naming the first non-positive operand.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softplus, a)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| x * s).collect();
        let value = Tensor::new(src.dims().to_vec(), data).expect("same dims");
        let rg = self.requires_grad(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| x + s).collect();
        let value = Tensor::new(src.dims().to_vec(), data).expect("same dims");
        let rg = self.requires_grad(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// `max(a, lo)`; the gradient is passed only where `a > lo`.
    pub fn clamp_min(&mut self, a: Var, lo: T) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| x.max(lo)).collect();
        let value = Tensor::new(src.dims().to_vec(), data).expect("same dims");
        let rg = self.requires_grad(a);
        self.push(value, Op::ClampMin(a, lo), rg)
    }

    // ---- convolution ----------------------------------------------------

    /// `input` is `N x C x H x W`, `kernel` is `O x C x kh x kw`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        self.conv2d_impl(input, kernel, None, stride, padding)
    }

    /// As [`conv2d`](Self::conv2d) plus a per-output-channel bias of length `O`.
    pub fn conv2d_bias(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: Padding) -> Result<Var> {
        self.conv2d_impl(input, kernel, Some(bias), stride, padding)
    }

    fn conv2d_impl(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (ti, tk) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        if ti.rank() != 4 || tk.rank() != 4 {
            return Err(TensorError::shape(
                "conv2d",
                format!("need rank-4 input and kernel, got {:?} and {:?}", ti.dims(), tk.dims()),
            ));
        }
        let (id, kd) = (ti.dims(), tk.dims());
        if id[1] != kd[1] {
            return Err(TensorError::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {}", id[1], kd[1]),
            ));
        }
        if stride == 0 {
            return Err(TensorError::shape("conv2d", "stride must be positive"));
        }
        let p = padding.size();
        if id[2] + 2 * p < kd[2] || id[3] + 2 * p < kd[3] {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel {:?} larger than padded input {:?}", kd, id),
            ));
        }
        if let Padding::Replicate(_) = padding {
            if id[2] == 0 || id[3] == 0 {
                return Err(TensorError::shape("conv2d", "empty input with replicate padding"));
            }
        }
        let bias_data = match bias {
            Some(b) => {
                let tb = &self.nodes[b.0].value;
                if tb.numel() != kd[0] {
                    return Err(TensorError::shape(
                        "conv2d",
                        format!("bias has {} values for {} output channels", tb.numel(), kd[0]),
                    ));
                }
                Some(tb.data())
            }
            None => None,
        };
        let geom = ConvGeometry {
            batch: id[0],
            in_ch: id[1],
            height: id[2],
            width: id[3],
            out_ch: kd[0],
            kh: kd[2],
            kw: kd[3],
            stride,
            padding,
        };
        let (ho, wo) = geom.out_hw();
        let out = conv2d_forward(&geom, ti.data(), tk.data(), bias_data);
        let value = Tensor::new(vec![id[0], kd[0], ho, wo], out)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    // ---- channel ops ----------------------------------------------------

    /// Softmax across the channel axis (axis 1, or axis 0 for vectors).
    pub fn channel_softmax(&mut self, a: Var) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        if src.rank() == 0 || channel_split(src.dims()).1 == 0 {
            return Err(TensorError::shape("channel_softmax", "need at least one channel"));
        }
        let data = kernels::softmax_channels(src.dims(), src.data());
        let value = Tensor::new(src.dims().to_vec(), data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Per-sample, per-channel normalization over `H x W`.
    pub fn instance_norm(&mut self, a: Var, eps: T) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        if src.rank() != 4 {
            return Err(TensorError::shape(
                "instance_norm",
                format!("need NCHW, got {:?}", src.dims()),
            ));
        }
        let (data, inv_std) = kernels::instance_norm(src.dims(), src.data(), eps);
        let value = Tensor::new(src.dims().to_vec(), data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::InstanceNorm { src: a, inv_std }, rg))
    }

    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        if src.rank() < 2 {
            return Err(TensorError::shape("upsample2x", "need at least two axes"));
        }
        let mut dims = src.dims().to_vec();
        let r = dims.len();
        let data = kernels::upsample2x(&dims, src.data());
        dims[r - 2] *= 2;
        dims[r - 1] *= 2;
        let value = Tensor::new(dims, data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Upsample2x(a), rg))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let src = self.nodes[a.0].value.data();
        let n = T::from_usize(src.len().max(1)).unwrap();
        let total = src.iter().fold(T::zero(), |acc, &v| acc + v) / n;
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(total), Op::Mean(a), rg)
    }

    /// `sum_i w_i * v_i^2`; `w` must be nonnegative with the same dims as `v`.
    pub fn weighted_sq_norm(&mut self, v: Var, w: Var) -> Result<Var> {
        let (tv, tw) = (&self.nodes[v.0].value, &self.nodes[w.0].value);
        if tv.dims() != tw.dims() {
            return Err(TensorError::shape(
                "weighted_sq_norm",
                format!("{:?} vs {:?}", tv.dims(), tw.dims()),
            ));
        }
        if let Some(i) = tw.data().iter().position(|x| *x < T::zero()) {
            return Err(TensorError::Domain {
                op: "weighted_sq_norm",
                index: i,
                value: tw.data()[i].as_f64(),
            });
        }
        let total = tv
            .data()
            .iter()
            .zip(tw.data())
            .fold(T::zero(), |acc, (&x, &wt)| acc + wt * x * x);
        let rg = self.any_grad(&[v, w]);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSqNorm(v, w), rg))
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshape(dims)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        let dims = src.dims();
        if axis >= dims.len() || start + len > dims[axis] {
            return Err(TensorError::shape(
                "narrow",
                format!("axis {axis} range {start}..{} of {:?}", start + len, dims),
            ));
        }
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dims[axis] + start) * inner;
            data.extend_from_slice(&src.data()[base..base + len * inner]);
        }
        let mut out_dims = dims.to_vec();
        out_dims[axis] = len;
        let value = Tensor::new(out_dims, data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Narrow { src: a, axis, start }, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.nodes[parts
            .first()
            .ok_or_else(|| TensorError::Usage("concat of zero tensors".into()))?
            .0]
            .value
            .dims()
            .to_vec();
        if axis >= first.len() {
            return Err(TensorError::shape("concat", format!("axis {axis} of {:?}", first)));
        }
        let mut total = 0;
        for p in parts {
            let d = self.nodes[p.0].value.dims();
            let compatible =
                d.len() == first.len() && d.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::shape("concat", format!("{:?} vs {:?}", d, first)));
            }
            total += d[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = &self.nodes[p.0].value;
                let len = t.dims()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut out_dims = first;
        out_dims[axis] = total;
        let value = Tensor::new(out_dims, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Propagates d(loss)/d(leaf) into every reachable trainable leaf.
    /// Leaf gradients accumulate across calls until [`zero_grad`](Self::zero_grad).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.nodes[loss.0].value.numel();
        if n != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got {n} values"
            )));
        }
        let mut scratch: Vec<Option<Vec<T>>> = Vec::new();
        scratch.resize_with(loss.0 + 1, || None);
        scratch[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = scratch[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (input, gi) in self.input_grads(i, &g) {
                match scratch[input.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a = *a + b),
                    None => scratch[input.0] = Some(gi),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let od = node.value.dims();
                let sa = broadcast_strides(ta.dims(), od);
                let sb = broadcast_strides(tb.dims(), od);
                let (da, db) = (ta.data(), tb.data());
                let mut ga = needs(*a).then(|| vec![T::zero(); da.len()]);
                let mut gb = needs(*b).then(|| vec![T::zero(); db.len()]);
                for_each_pair(od, &sa, &sb, |o, ia, ib| {
                    let go = g[o];
                    let (x, y) = (da[ia], db[ib]);
                    let (dx, dy) = match kind {
                        Binary::Add => (go, go),
                        Binary::Sub => (go, -go),
                        Binary::Mul => (go * y, go * x),
                        Binary::Div => (go / y, -go * x / (y * y)),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] = ga[ia] + dx;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] = gb[ib] + dy;
                    }
                });
                out.extend(ga.map(|v| (*a, v)));
                out.extend(gb.map(|v| (*b, v)));
            }
            Op::Unary(kind, a) => {
                let x = val(*a).data();
                let y = node.value.data();
                let d = g
                    .iter()
                    .enumerate()
                    .map(|(j, &go)| match kind {
                        Unary::Neg => -go,
                        Unary::Exp => go * y[j],
                        Unary::Log => go / x[j],
                        Unary::Square => go * (x[j] + x[j]),
                        Unary::Relu => {
                            if x[j] > T::zero() {
                                go
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Softplus => go / (T::one() + (-x[j]).exp()),
                    })
                    .collect();
                out.push((*a, d));
            }
            Op::Scale(a, s) => out.push((*a, g.iter().map(|&v| v * *s).collect())),
            Op::AddScalar(a) => out.push((*a, g.to_vec())),
            Op::ClampMin(a, lo) => {
                let x = val(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&go, &xv)| if xv > *lo { go } else { T::zero() })
                    .collect();
                out.push((*a, d));
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (di, dk, db) = conv2d_backward(
                    geom,
                    val(*input).data(),
                    val(*kernel).data(),
                    g,
                    needs(*input),
                    needs(*kernel),
                    bias.map(needs).unwrap_or(false),
                );
                out.extend(di.map(|d| (*input, d)));
                out.extend(dk.map(|d| (*kernel, d)));
                if let (Some(b), Some(d)) = (bias, db) {
                    out.push((*b, d));
                }
            }
            Op::Softmax(a) => {
                let d = kernels::softmax_channels_backward(node.value.dims(), node.value.data(), g);
                out.push((*a, d));
            }
            Op::InstanceNorm { src, inv_std } => {
                let d = kernels::instance_norm_backward(node.value.dims(), node.value.data(), inv_std, g);
                out.push((*src, d));
            }
            Op::Upsample2x(a) => {
                out.push((*a, kernels::upsample2x_backward(val(*a).dims(), g)));
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; val(*a).numel()])),
            Op::Mean(a) => {
                let n = val(*a).numel();
                let share = g[0] / T::from_usize(n.max(1)).unwrap();
                out.push((*a, vec![share; n]));
            }
            Op::WeightedSqNorm(v, w) => {
                let (xv, xw) = (val(*v).data(), val(*w).data());
                if needs(*v) {
                    let two = T::one() + T::one();
                    out.push((*v, xv.iter().zip(xw).map(|(&a, &b)| g[0] * two * b * a).collect()));
                }
                if needs(*w) {
                    out.push((*w, xv.iter().map(|&a| g[0] * a * a).collect()));
                }
            }
            Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Narrow { src, axis, start } => {
                let sd = val(*src).dims();
                let len = node.value.dims()[*axis];
                let outer: usize = sd[..*axis].iter().product();
                let inner: usize = sd[*axis + 1..].iter().product();
                let mut d = vec![T::zero(); val(*src).numel()];
                for o in 0..outer {
                    let dst = (o * sd[*axis] + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*src, d));
            }
            Op::Concat { parts, axis } => {
                let od = node.value.dims();
                let outer: usize = od[..*axis].iter().product();
                let inner: usize = od[*axis + 1..].iter().product();
                let row = od[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).dims()[*axis] * inner;
                    if needs(*p) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * row + offset..o * row + offset + len]);
                        }
                        out.push((*p, d));
                    }
                    offset += len;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[-1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0f64));
        let y = g.softplus(x).unwrap();
        assert!((g.value(y).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn square_gradient_at_three() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0f64));
        let y = g.square(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn log_reports_offending_index() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, -0.5]));
        match g.log(x) {
            Err(TensorError::Domain { op, index, .. }) => {
                assert_eq!(op, "log");
                assert_eq!(index, 2);
            }
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn div_by_zero_is_domain_error() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 1.0]));
        let b = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.div(a, b), Err(TensorError::Domain { index: 1, .. })));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let y = g.square(x).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::Usage(_))));
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let c = g.constant(Tensor::scalar(5.0));
        let zero = g.scale(x, 0.0);
        let s = g.sum(zero);
        let loss = g.add(s, c).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn linear_loss_gradient_is_weight() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[0.3, -1.0, 2.0]));
        let w = g.constant(t(&[3], &[1.5, -2.0, 0.25]));
        let p = g.mul(w, x).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0f64));
        let y = g.square(x).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 8.0);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn shared_subexpression_visited_once() {
        // y = (x^2) + (x^2) through one node used twice
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.5f64));
        let s = g.square(x).unwrap();
        let y = g.add(s, s).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn conv_all_ones_center_is_nine() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, k, 1, Padding::Zero(1)).unwrap();
        let out = g.value(y);
        assert_eq!(out.dims(), &[1, 1, 3, 3]);
        assert_eq!(out.data()[4], 9.0);
        assert_eq!(out.data()[0], 4.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..20).map(|i| i as f64 * 0.7 - 3.0).collect();
        let x = g.constant(t(&[1, 1, 4, 5], &data));
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let k = g.constant(t(&[1, 1, 3, 3], &kd));
        for pad in [Padding::Zero(1), Padding::Replicate(1)] {
            let y = g.conv2d(x, k, 1, pad).unwrap();
            assert_eq!(g.value(y).data(), &data[..]);
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::ones(&[1, 2, 3, 3]));
        let k = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        assert!(matches!(
            g.conv2d(x, k, 1, Padding::Zero(1)),
            Err(TensorError::Shape { .. })
        ));
    }

    #[test]
    fn softmax_equal_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 3, 2, 2], 0.7f64));
        let s = g.channel_softmax(x).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weighted_sq_norm_examples() {
        let mut g = Graph::new();
        let v = g.constant(t(&[2], &[1.0, 2.0]));
        let w = g.constant(t(&[2], &[1.0, 1.0]));
        let z = g.constant(t(&[2], &[0.0, 0.0]));
        let r = g.weighted_sq_norm(v, w).unwrap();
        assert_eq!(g.value(r).item(), 5.0);
        let r0 = g.weighted_sq_norm(v, z).unwrap();
        assert_eq!(g.value(r0).item(), 0.0);
        let neg = g.constant(t(&[2], &[1.0, -1.0]));
        assert!(matches!(
            g.weighted_sq_norm(v, neg),
            Err(TensorError::Domain { index: 1, .. })
        ));
    }

    #[test]
    fn narrow_and_concat_invert() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = g.leaf(t(&[2, 3, 2, 2], &data));
        let a = g.narrow(x, 1, 0, 1).unwrap();
        let b = g.narrow(x, 1, 1, 2).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &data[..]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &vec![1.0; 24][..]);
    }
}
