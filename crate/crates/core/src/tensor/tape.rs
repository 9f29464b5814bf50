//! Reverse-mode automatic differentiation over [`Field`] values.
//!
//! Operations are recorded on a [`Tape`] in creation order, which is already a
//! topological order, so [`Tape::backward`] is a single reverse sweep. A tape
//! is single-writer; batch items are evaluated on separate tapes.

use serde::{Deserialize, Serialize};

use super::gemm::{gemm, MatRef};
use super::stencil::StencilKernel;
use crate::error::{Error, Result};
use crate::field::Field;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boundary treatment for learnable 2D convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvBoundary {
    PeriodicWrap,
    ZeroPad,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Conv1x1 {
        x: Var,
        w: Var,
        bias: Option<Var>,
    },
    AxisMatmul {
        x: Var,
        w: Var,
        axis: usize,
    },
    ChannelDense {
        x: Var,
        w: Var,
    },
    Stencil {
        x: Var,
        kernel: StencilKernel,
        scale: f64,
    },
    Conv2d {
        x: Var,
        w: Var,
        dilation: usize,
        boundary: ConvBoundary,
    },
    MeanSquare(Var),
    SelectRank {
        x: Var,
        index: usize,
    },
    ChannelScale {
        x: Var,
        s: Var,
        col: usize,
    },
    PadZero {
        x: Var,
        width: usize,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Field,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every differentiable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Field>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Field> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Field {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Field::zeros(&self.shapes[v.0]),
        }
    }
}

pub(crate) fn exact_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn exact_gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn broadcast_shape(op: &'static str, a: &Field, b: &Field) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.len() == 1 {
        Ok(a.shape().to_vec())
    } else if a.len() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::shape(
            op,
            format!("{:?} and {:?} are not broadcast-compatible", a.shape(), b.shape()),
        ))
    }
}

fn binary(a: &Field, b: &Field, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Field {
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data = (0..n)
        .map(|i| {
            let av = if ad.len() == 1 { ad[0] } else { ad[i] };
            let bv = if bd.len() == 1 { bd[0] } else { bd[i] };
            f(av, bv)
        })
        .collect();
    Field::new(shape, data).expect("broadcast shape is consistent")
}

/// Reduces a gradient to the (possibly scalar) shape of the operand it belongs to.
fn reduce_to(g: Vec<f64>, target_len: usize) -> Vec<f64> {
    if target_len == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

fn spatial(op: &'static str, f: &Field, min_rank: usize) -> Result<()> {
    if f.ndim() < min_rank {
        return Err(Error::shape(
            op,
            format!("expected at least {min_rank} axes, got {:?}", f.shape()),
        ));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Field, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input (a trainable parameter or a probed input).
    pub fn leaf(&mut self, value: Field) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input; gradients never flow into it.
    pub fn constant(&mut self, value: Field) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Field {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (fa, fb) = (self.value(a), self.value(b));
        let shape = broadcast_shape("add", fa, fb)?;
        let out = binary(fa, fb, shape, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (fa, fb) = (self.value(a), self.value(b));
        let shape = broadcast_shape("sub", fa, fb)?;
        let out = binary(fa, fb, shape, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (fa, fb) = (self.value(a), self.value(b));
        let shape = broadcast_shape("hadamard", fa, fb)?;
        let out = binary(fa, fb, shape, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// GELU in its exact form `x Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(exact_gelu);
        let ng = self.needs(a);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Point-wise channel mix: `y[o, p] = Σ_c w[o, c] x[c, p] + bias[o]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (fx, fw) = (self.value(x), self.value(w));
        spatial("conv1x1", fx, 2)?;
        if fw.ndim() != 2 || fw.shape()[1] != fx.shape()[0] {
            return Err(Error::shape(
                "conv1x1",
                format!("weight {:?} cannot mix input {:?}", fw.shape(), fx.shape()),
            ));
        }
        let (cout, cin) = (fw.shape()[0], fw.shape()[1]);
        let p = fx.len() / cin;
        let mut shape = fx.shape().to_vec();
        shape[0] = cout;
        let mut out = vec![0.0; cout * p];
        if let Some(b) = bias {
            let fb = self.value(b);
            if fb.shape() != [cout] {
                return Err(Error::shape(
                    "conv1x1",
                    format!("bias {:?} for {cout} output channels", fb.shape()),
                ));
            }
            for (o, &bv) in fb.data().iter().enumerate() {
                out[o * p..(o + 1) * p].fill(bv);
            }
        }
        gemm(
            MatRef::new(fw.data(), cout, cin),
            MatRef::new(fx.data(), cin, p),
            1.0,
            &mut out,
        );
        let ng = self.needs(x) || self.needs(w) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(Field::new(shape, out)?, Op::Conv1x1 { x, w, bias }, ng))
    }

    /// Per-channel contraction of spatial axis `axis` against `w[c, i, o]`.
    pub fn axis_matmul(&mut self, x: Var, w: Var, axis: usize) -> Result<Var> {
        let (fx, fw) = (self.value(x), self.value(w));
        spatial("axis_matmul", fx, 2)?;
        let srank = fx.ndim() - 1;
        if axis >= srank {
            return Err(Error::shape(
                "axis_matmul",
                format!("axis {axis} out of range for {srank} spatial axes"),
            ));
        }
        let c = fx.shape()[0];
        let i = fx.shape()[axis + 1];
        if fw.ndim() != 3 || fw.shape()[0] != c || fw.shape()[1] != i {
            return Err(Error::shape(
                "axis_matmul",
                format!(
                    "weight {:?} cannot contract axis {axis} of {:?}",
                    fw.shape(),
                    fx.shape()
                ),
            ));
        }
        let o = fw.shape()[2];
        let pre: usize = fx.shape()[1..axis + 1].iter().product();
        let post: usize = fx.shape()[axis + 2..].iter().product();
        let mut shape = fx.shape().to_vec();
        shape[axis + 1] = o;
        let mut out = vec![0.0; c * pre * o * post];
        let (xd, wd) = (fx.data(), fw.data());
        for ch in 0..c {
            let wc = MatRef::new(&wd[ch * i * o..(ch + 1) * i * o], i, o);
            let xc = &xd[ch * pre * i * post..(ch + 1) * pre * i * post];
            let yc = &mut out[ch * pre * o * post..(ch + 1) * pre * o * post];
            if post == 1 {
                gemm(MatRef::new(xc, pre, i), wc, 0.0, yc);
            } else {
                for p in 0..pre {
                    gemm(
                        wc.t(),
                        MatRef::new(&xc[p * i * post..(p + 1) * i * post], i, post),
                        0.0,
                        &mut yc[p * o * post..(p + 1) * o * post],
                    );
                }
            }
        }
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(Field::new(shape, out)?, Op::AxisMatmul { x, w, axis }, ng))
    }

    /// Dense multi-channel fully-connected map: `y[c, m] = Σ_n w[c, m, n] x[c, n]`,
    /// with the spatial axes of `x` flattened into `n`.
    pub fn channel_dense(&mut self, x: Var, w: Var) -> Result<Var> {
        let (fx, fw) = (self.value(x), self.value(w));
        spatial("channel_dense", fx, 2)?;
        let c = fx.shape()[0];
        let n = fx.len() / c;
        if fw.ndim() != 3 || fw.shape()[0] != c || fw.shape()[2] != n {
            return Err(Error::shape(
                "channel_dense",
                format!("weight {:?} for input {:?}", fw.shape(), fx.shape()),
            ));
        }
        let m = fw.shape()[1];
        let mut out = vec![0.0; c * m];
        for ch in 0..c {
            gemm(
                MatRef::new(&fw.data()[ch * m * n..(ch + 1) * m * n], m, n),
                MatRef::new(&fx.data()[ch * n..(ch + 1) * n], n, 1),
                0.0,
                &mut out[ch * m..(ch + 1) * m],
            );
        }
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(Field::new(vec![c, m], out)?, Op::ChannelDense { x, w }, ng))
    }

    /// Applies a constant stencil to a `[C, H, W]` field, scaled by `delta^-p`.
    pub fn stencil(&mut self, x: Var, kernel: &StencilKernel, delta: f64) -> Result<Var> {
        let fx = self.value(x);
        if fx.ndim() != 3 {
            return Err(Error::shape(
                "stencil_apply",
                format!("expected [C, H, W], got {:?}", fx.shape()),
            ));
        }
        let (c, h, w) = (fx.shape()[0], fx.shape()[1], fx.shape()[2]);
        let (oh, ow) = kernel.output_dims(h, w)?;
        let scale = kernel.scale(delta);
        let out = kernel.apply(fx.data(), c, h, w, scale);
        let ng = self.needs(x);
        Ok(self.push(
            Field::new(vec![c, oh, ow], out)?,
            Op::Stencil {
                x,
                kernel: kernel.clone(),
                scale,
            },
            ng,
        ))
    }

    /// Learnable dilated cross-correlation with an odd square kernel, same spatial shape.
    pub fn conv2d_dilated(
        &mut self,
        x: Var,
        w: Var,
        dilation: usize,
        boundary: ConvBoundary,
    ) -> Result<Var> {
        let (fx, fw) = (self.value(x), self.value(w));
        if dilation == 0 {
            return Err(Error::contract("conv2d_dilated", "dilation must be ≥ 1"));
        }
        if fx.ndim() != 3
            || fw.ndim() != 4
            || fw.shape()[1] != fx.shape()[0]
            || fw.shape()[2] != fw.shape()[3]
            || fw.shape()[2] % 2 == 0
        {
            return Err(Error::shape(
                "conv2d_dilated",
                format!("weight {:?} for input {:?}", fw.shape(), fx.shape()),
            ));
        }
        let geo = ConvGeometry::new(fx.shape(), fw.shape(), dilation, boundary);
        let out = geo.forward(fx.data(), fw.data());
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(
            Field::new(vec![geo.cout, geo.h, geo.w], out)?,
            Op::Conv2d {
                x,
                w,
                dilation,
                boundary,
            },
            ng,
        ))
    }

    /// `(1/len) Σ x_i²` as a one-element field.
    pub fn mean_square(&mut self, x: Var) -> Result<Var> {
        let fx = self.value(x);
        if fx.is_empty() {
            return Err(Error::size("mean_square", "empty tensor"));
        }
        let v = fx.data().iter().map(|v| v * v).sum::<f64>() / fx.len() as f64;
        let ng = self.needs(x);
        Ok(self.push(Field::scalar(v), Op::MeanSquare(x), ng))
    }

    /// Picks index `r` of axis 1 from a `[C, R, ...]` field.
    pub fn select_rank(&mut self, x: Var, index: usize) -> Result<Var> {
        let fx = self.value(x);
        spatial("select_rank", fx, 2)?;
        let (c, r) = (fx.shape()[0], fx.shape()[1]);
        if index >= r {
            return Err(Error::shape(
                "select_rank",
                format!("index {index} of axis with length {r}"),
            ));
        }
        let inner: usize = fx.shape()[2..].iter().product();
        let mut data = Vec::with_capacity(c * inner);
        for ch in 0..c {
            let off = (ch * r + index) * inner;
            data.extend_from_slice(&fx.data()[off..off + inner]);
        }
        let mut shape = vec![c];
        shape.extend_from_slice(&fx.shape()[2..]);
        let ng = self.needs(x);
        Ok(self.push(Field::new(shape, data)?, Op::SelectRank { x, index }, ng))
    }

    /// Multiplies channel `c` of `x` by `s[c, col]`.
    pub fn channel_scale(&mut self, x: Var, s: Var, col: usize) -> Result<Var> {
        let (fx, fs) = (self.value(x), self.value(s));
        spatial("channel_scale", fx, 1)?;
        let c = fx.shape()[0];
        if fs.ndim() != 2 || fs.shape()[0] != c || col >= fs.shape()[1] {
            return Err(Error::shape(
                "channel_scale",
                format!("scales {:?} column {col} for input {:?}", fs.shape(), fx.shape()),
            ));
        }
        let r = fs.shape()[1];
        let inner = fx.len() / c;
        let mut data = fx.data().to_vec();
        for ch in 0..c {
            let sv = fs.data()[ch * r + col];
            for v in &mut data[ch * inner..(ch + 1) * inner] {
                *v *= sv;
            }
        }
        let out = Field::new(fx.shape().to_vec(), data)?;
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(out, Op::ChannelScale { x, s, col }, ng))
    }

    /// Surrounds both spatial axes of a `[C, H, W]` field with `width` zeros.
    pub fn pad_zero(&mut self, x: Var, width: usize) -> Result<Var> {
        let fx = self.value(x);
        if fx.ndim() != 3 {
            return Err(Error::shape(
                "pad_zero",
                format!("expected [C, H, W], got {:?}", fx.shape()),
            ));
        }
        let (c, h, w) = (fx.shape()[0], fx.shape()[1], fx.shape()[2]);
        let (ph, pw) = (h + 2 * width, w + 2 * width);
        let mut data = vec![0.0; c * ph * pw];
        for ch in 0..c {
            for i in 0..h {
                let src = &fx.data()[(ch * h + i) * w..(ch * h + i + 1) * w];
                let dst = (ch * ph + i + width) * pw + width;
                data[dst..dst + w].copy_from_slice(src);
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            Field::new(vec![c, ph, pw], data)?,
            Op::PadZero { x, width },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract("backward", "loss is not on this tape"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                let node = &self.nodes[id];
                match (&node.op, g) {
                    (Op::Leaf, Some(g)) if node.needs_grad => {
                        Some(Field::new(node.value.shape().to_vec(), g).expect("grad shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    self.accumulate(grads, *a, reduce_to(g.to_vec(), val(*a).len()));
                }
                if self.needs(*b) {
                    let gb = g.iter().map(|v| sign * v).collect();
                    self.accumulate(grads, *b, reduce_to(gb, val(*b).len()));
                }
            }
            Op::Mul(a, b) => {
                let (fa, fb) = (val(*a).data(), val(*b).data());
                let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                if self.needs(*a) {
                    let ga = g.iter().enumerate().map(|(i, gv)| gv * pick(fb, i)).collect();
                    self.accumulate(grads, *a, reduce_to(ga, fa.len()));
                }
                if self.needs(*b) {
                    let gb = g.iter().enumerate().map(|(i, gv)| gv * pick(fa, i)).collect();
                    self.accumulate(grads, *b, reduce_to(gb, fb.len()));
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.iter().map(|v| s * v).collect());
            }
            Op::Gelu(a) => {
                let ga = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(gv, &x)| gv * exact_gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Conv1x1 { x, w, bias } => {
                let (fx, fw) = (val(*x), val(*w));
                let (cout, cin) = (fw.shape()[0], fw.shape()[1]);
                let p = fx.len() / cin;
                let gm = MatRef::new(g, cout, p);
                if self.needs(*x) {
                    let mut gx = vec![0.0; cin * p];
                    gemm(MatRef::new(fw.data(), cout, cin).t(), gm, 0.0, &mut gx);
                    self.accumulate(grads, *x, gx);
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; cout * cin];
                    gemm(gm, MatRef::new(fx.data(), cin, p).t(), 0.0, &mut gw);
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let gb = (0..cout).map(|o| g[o * p..(o + 1) * p].iter().sum()).collect();
                        self.accumulate(grads, *b, gb);
                    }
                }
            }
            Op::AxisMatmul { x, w, axis } => {
                let (fx, fw) = (val(*x), val(*w));
                let c = fx.shape()[0];
                let i = fx.shape()[axis + 1];
                let o = fw.shape()[2];
                let pre: usize = fx.shape()[1..axis + 1].iter().product();
                let post: usize = fx.shape()[axis + 2..].iter().product();
                let (xd, wd) = (fx.data(), fw.data());
                let need_x = self.needs(*x);
                let need_w = self.needs(*w);
                let mut gx = if need_x { vec![0.0; fx.len()] } else { Vec::new() };
                let mut gw = if need_w { vec![0.0; fw.len()] } else { Vec::new() };
                for ch in 0..c {
                    let wc = MatRef::new(&wd[ch * i * o..(ch + 1) * i * o], i, o);
                    let xc = &xd[ch * pre * i * post..(ch + 1) * pre * i * post];
                    let gc = &g[ch * pre * o * post..(ch + 1) * pre * o * post];
                    if post == 1 {
                        if need_x {
                            gemm(
                                MatRef::new(gc, pre, o),
                                wc.t(),
                                0.0,
                                &mut gx[ch * pre * i..(ch + 1) * pre * i],
                            );
                        }
                        if need_w {
                            gemm(
                                MatRef::new(xc, pre, i).t(),
                                MatRef::new(gc, pre, o),
                                0.0,
                                &mut gw[ch * i * o..(ch + 1) * i * o],
                            );
                        }
                    } else {
                        for p in 0..pre {
                            let gp = MatRef::new(&gc[p * o * post..(p + 1) * o * post], o, post);
                            if need_x {
                                let off = ch * pre * i * post + p * i * post;
                                gemm(wc, gp, 0.0, &mut gx[off..off + i * post]);
                            }
                            if need_w {
                                gemm(
                                    MatRef::new(&xc[p * i * post..(p + 1) * i * post], i, post),
                                    gp.t(),
                                    1.0,
                                    &mut gw[ch * i * o..(ch + 1) * i * o],
                                );
                            }
                        }
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, gx);
                }
                if need_w {
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::ChannelDense { x, w } => {
                let (fx, fw) = (val(*x), val(*w));
                let c = fx.shape()[0];
                let n = fx.len() / c;
                let m = fw.shape()[1];
                if self.needs(*x) {
                    let mut gx = vec![0.0; c * n];
                    for ch in 0..c {
                        gemm(
                            MatRef::new(&fw.data()[ch * m * n..(ch + 1) * m * n], m, n).t(),
                            MatRef::new(&g[ch * m..(ch + 1) * m], m, 1),
                            0.0,
                            &mut gx[ch * n..(ch + 1) * n],
                        );
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; c * m * n];
                    for ch in 0..c {
                        gemm(
                            MatRef::new(&g[ch * m..(ch + 1) * m], m, 1),
                            MatRef::new(&fx.data()[ch * n..(ch + 1) * n], 1, n),
                            0.0,
                            &mut gw[ch * m * n..(ch + 1) * m * n],
                        );
                    }
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::Stencil { x, kernel, scale } => {
                let fx = val(*x);
                let (c, h, w) = (fx.shape()[0], fx.shape()[1], fx.shape()[2]);
                let gx = kernel.apply_adjoint(g, c, h, w, *scale);
                self.accumulate(grads, *x, gx);
            }
            Op::Conv2d {
                x,
                w,
                dilation,
                boundary,
            } => {
                let (fx, fw) = (val(*x), val(*w));
                let geo = ConvGeometry::new(fx.shape(), fw.shape(), *dilation, *boundary);
                let (gx, gw) =
                    geo.backward(fx.data(), fw.data(), g, self.needs(*x), self.needs(*w));
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::MeanSquare(x) => {
                let fx = val(*x);
                let k = 2.0 * g[0] / fx.len() as f64;
                self.accumulate(grads, *x, fx.data().iter().map(|v| k * v).collect());
            }
            Op::SelectRank { x, index } => {
                let fx = val(*x);
                let (c, r) = (fx.shape()[0], fx.shape()[1]);
                let inner: usize = fx.shape()[2..].iter().product();
                let mut gx = vec![0.0; fx.len()];
                for ch in 0..c {
                    let off = (ch * r + index) * inner;
                    gx[off..off + inner].copy_from_slice(&g[ch * inner..(ch + 1) * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ChannelScale { x, s, col } => {
                let (fx, fs) = (val(*x), val(*s));
                let c = fx.shape()[0];
                let r = fs.shape()[1];
                let inner = fx.len() / c;
                if self.needs(*x) {
                    let mut gx = g.to_vec();
                    for ch in 0..c {
                        let sv = fs.data()[ch * r + col];
                        for v in &mut gx[ch * inner..(ch + 1) * inner] {
                            *v *= sv;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.needs(*s) {
                    let mut gs = vec![0.0; fs.len()];
                    for ch in 0..c {
                        let sl = ch * inner..(ch + 1) * inner;
                        gs[ch * r + col] = g[sl.clone()]
                            .iter()
                            .zip(&fx.data()[sl])
                            .map(|(a, b)| a * b)
                            .sum();
                    }
                    self.accumulate(grads, *s, gs);
                }
            }
            Op::PadZero { x, width } => {
                let fx = val(*x);
                let (c, h, w) = (fx.shape()[0], fx.shape()[1], fx.shape()[2]);
                let (ph, pw) = (h + 2 * width, w + 2 * width);
                let mut gx = vec![0.0; fx.len()];
                for ch in 0..c {
                    for i in 0..h {
                        let src = (ch * ph + i + width) * pw + width;
                        gx[(ch * h + i) * w..(ch * h + i + 1) * w]
                            .copy_from_slice(&g[src..src + w]);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.to_vec());
            }
        }
    }
}

/// Index bookkeeping shared by the dilated convolution forward and backward passes.
struct ConvGeometry {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    dilation: usize,
    boundary: ConvBoundary,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], dilation: usize, boundary: ConvBoundary) -> Self {
        ConvGeometry {
            cin: xs[0],
            cout: ws[0],
            h: xs[1],
            w: xs[2],
            k: ws[2],
            dilation,
            boundary,
        }
    }

    fn tap_offset(&self, a: usize) -> isize {
        (a as isize - (self.k / 2) as isize) * self.dilation as isize
    }

    /// Source index along an axis of length `n`, or `None` for zero padding.
    fn source(&self, i: usize, d: isize, n: usize) -> Option<usize> {
        let s = i as isize + d;
        match self.boundary {
            ConvBoundary::PeriodicWrap => Some(s.rem_euclid(n as isize) as usize),
            ConvBoundary::ZeroPad => (0..n as isize).contains(&s).then_some(s as usize),
        }
    }

    /// `shifted[c, i, j] = x[c, i + di, j + dj]`.
    fn gather(&self, x: &[f64], di: isize, dj: isize) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        let mut out = vec![0.0; self.cin * h * w];
        for c in 0..self.cin {
            for i in 0..h {
                let Some(si) = self.source(i, di, h) else { continue };
                for j in 0..w {
                    if let Some(sj) = self.source(j, dj, w) {
                        out[(c * h + i) * w + j] = x[(c * h + si) * w + sj];
                    }
                }
            }
        }
        out
    }

    fn scatter_add(&self, gx: &mut [f64], gs: &[f64], di: isize, dj: isize) {
        let (h, w) = (self.h, self.w);
        for c in 0..self.cin {
            for i in 0..h {
                let Some(si) = self.source(i, di, h) else { continue };
                for j in 0..w {
                    if let Some(sj) = self.source(j, dj, w) {
                        gx[(c * h + si) * w + sj] += gs[(c * h + i) * w + j];
                    }
                }
            }
        }
    }

    /// `w[:, :, a, b]` as a strided `cout × cin` matrix.
    fn tap_weights<'a>(&self, wd: &'a [f64], a: usize, b: usize) -> MatRef<'a> {
        let kk = self.k * self.k;
        MatRef {
            data: &wd[a * self.k + b..],
            rows: self.cout,
            cols: self.cin,
            row_stride: (self.cin * kk) as isize,
            col_stride: kk as isize,
        }
    }

    fn forward(&self, x: &[f64], wd: &[f64]) -> Vec<f64> {
        let p = self.h * self.w;
        let mut out = vec![0.0; self.cout * p];
        for a in 0..self.k {
            for b in 0..self.k {
                let shifted = self.gather(x, self.tap_offset(a), self.tap_offset(b));
                gemm(self.tap_weights(wd, a, b), MatRef::new(&shifted, self.cin, p), 1.0, &mut out);
            }
        }
        out
    }

    fn backward(
        &self,
        x: &[f64],
        wd: &[f64],
        g: &[f64],
        need_x: bool,
        need_w: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let p = self.h * self.w;
        let kk = self.k * self.k;
        let mut gx = need_x.then(|| vec![0.0; x.len()]);
        let mut gw = need_w.then(|| vec![0.0; wd.len()]);
        let gm = MatRef::new(g, self.cout, p);
        let mut tmp_w = vec![0.0; self.cout * self.cin];
        let mut tmp_s = vec![0.0; self.cin * p];
        for a in 0..self.k {
            for b in 0..self.k {
                let (di, dj) = (self.tap_offset(a), self.tap_offset(b));
                if let Some(gx) = gx.as_mut() {
                    gemm(self.tap_weights(wd, a, b).t(), gm, 0.0, &mut tmp_s);
                    self.scatter_add(gx, &tmp_s, di, dj);
                }
                if let Some(gw) = gw.as_mut() {
                    let shifted = self.gather(x, di, dj);
                    gemm(gm, MatRef::new(&shifted, self.cin, p).t(), 0.0, &mut tmp_w);
                    for o in 0..self.cout {
                        for c in 0..self.cin {
                            gw[(o * self.cin + c) * kk + a * self.k + b] +=
                                tmp_w[o * self.cin + c];
                        }
                    }
                }
            }
        }
        (gx, gw)
    }
}
