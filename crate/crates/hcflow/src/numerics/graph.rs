//! Reverse-mode autodiff over a dynamically recorded computation graph.
//!
//! Every operation appends a node holding its output tensor; `backward`
//! walks the nodes in reverse creation order (a valid reverse topological
//! order, since inputs always precede their consumers). The graph is generic
//! over the scalar type: training runs in `f32`, the finite-difference
//! oracles re-run the identical code in `f64`.
//!
//! Gradients flow through inverse transforms too (the per-pixel matrix op
//! can apply W⁻¹ and still differentiate with respect to W), which the
//! pixel losses on generated images rely on.

use crate::error::{Error, Result};
use crate::numerics::kernels as k;
use crate::numerics::linalg;
use crate::numerics::real::Real;
use crate::numerics::tensor::{Shape4, Tensor};

/// Handle to a node in one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    #[inline]
    fn i(self) -> usize {
        self.0 as usize
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    /// Full reduction to a (1,1,1,1) scalar.
    Sum(Var),
    Mean(Var),
    /// Per-batch-item reduction to (B,1,1,1).
    SumItems(Var),
    /// x (any shape) plus a (1,1,1,1) scalar node, broadcast.
    AddScalarVar(Var, Var),
    /// x plus per-channel bias (1,C,1,1), broadcast over batch and space.
    AddChannel(Var, Var),
    /// x times per-channel scale (1,C,1,1).
    MulChannel(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    /// Per-pixel channel mixing by W (or W⁻¹ when `invert`); `m` caches the
    /// matrix actually applied, in f64.
    MatPix {
        x: Var,
        w: Var,
        invert: bool,
        m: Vec<f64>,
    },
    /// log|det W| of a square channel-mixing matrix; caches (W⁻¹)ᵀ.
    LogDetMat {
        w: Var,
        inv_t: Vec<f64>,
    },
    Squeeze2(Var),
    Unsqueeze2(Var),
    HaarFwd(Var),
    HaarInv(Var),
    Upsample2(Var),
    ConcatC(Vec<Var>),
    SliceC {
        x: Var,
        lo: usize,
    },
}

struct Node<R: Real> {
    op: Op,
    data: Tensor<R>,
    needs_grad: bool,
}

/// Recorded computation graph.
pub struct Graph<R: Real> {
    nodes: Vec<Node<R>>,
}

/// Gradients produced by [`Graph::backward`], indexed by `Var`.
pub struct Grads<R: Real> {
    g: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Grads<R> {
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.g[v.i()].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<R>> {
        self.g[v.i()].take()
    }
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, data: Tensor<R>, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        assert!(id < u32::MAX as usize, "graph exhausted Var ids");
        self.nodes.push(Node {
            op,
            data,
            needs_grad,
        });
        Var(id as u32)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.i()].needs_grad
    }

    fn ng2(&self, a: Var, b: Var) -> bool {
        self.ng(a) || self.ng(b)
    }

    /// Tensor stored at `v`.
    pub fn data(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.i()].data
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.i()].data.shape()
    }

    /// Scalar readout of a single-element node.
    pub fn value_f64(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.i()].data.numel(), 1);
        self.nodes[v.i()].data.data()[0].to_f64()
    }

    // ── leaves ───────────────────────────────────────────────────────────

    /// Differentiable input (parameters, or inputs probed by oracles).
    pub fn leaf(&mut self, t: Tensor<R>, needs_grad: bool) -> Var {
        self.push(Op::Leaf, t, needs_grad)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<R>) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Constant (1,1,1,1) scalar node.
    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::full(Shape4::new(1, 1, 1, 1), R::from_f64(v)))
    }

    // ── elementwise ──────────────────────────────────────────────────────

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("shape {sa} vs {sb}")));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: Op, a: Var, b: Var, f: impl Fn(R, R) -> R) -> Var {
        let data: Vec<R> = self.nodes[a.i()]
            .data
            .data()
            .iter()
            .zip(self.nodes[b.i()].data.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_raw(self.shape(a), data);
        let needs = self.ng2(a, b);
        self.push(op, t, needs)
    }

    fn unary_map(&mut self, op: Op, a: Var, f: impl Fn(R) -> R) -> Var {
        let t = self.nodes[a.i()].data.map(f);
        let needs = self.ng(a);
        self.push(op, t, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        Ok(self.zip_map(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        Ok(self.zip_map(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        Ok(self.zip_map(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("div", a, b)?;
        Ok(self.zip_map(Op::Div(a, b), a, b, |x, y| x / y))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary_map(Op::Neg(a), a, |x| -x)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let sv = R::from_f64(s);
        self.unary_map(Op::AddScalar(a), a, move |x| x + sv)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let sv = R::from_f64(s);
        self.unary_map(Op::MulScalar(a, s), a, move |x| x * sv)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary_map(Op::Exp(a), a, |x| x.exp())
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary_map(Op::Ln(a), a, |x| x.ln())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary_map(Op::Sigmoid(a), a, sigmoid_stable)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary_map(Op::Relu(a), a, |x| x.maximum(R::ZERO))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary_map(Op::Abs(a), a, |x| x.abs())
    }

    // ── reductions ───────────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.nodes[a.i()].data.sum_f64();
        let t = Tensor::full(Shape4::new(1, 1, 1, 1), R::from_f64(v));
        let needs = self.ng(a);
        self.push(Op::Sum(a), t, needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.nodes[a.i()].data.mean_f64();
        let t = Tensor::full(Shape4::new(1, 1, 1, 1), R::from_f64(v));
        let needs = self.ng(a);
        self.push(Op::Mean(a), t, needs)
    }

    /// Per-batch-item sum: (B,C,H,W) → (B,1,1,1), f64-accumulated.
    pub fn sum_items(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let item = s.item_numel();
        let data = self.nodes[a.i()].data.data();
        let mut out = Vec::with_capacity(s.b);
        for b in 0..s.b {
            let acc: f64 = data[b * item..(b + 1) * item]
                .iter()
                .map(|v| v.to_f64())
                .sum();
            out.push(R::from_f64(acc));
        }
        let t = Tensor::from_raw(Shape4::new(s.b, 1, 1, 1), out);
        let needs = self.ng(a);
        self.push(Op::SumItems(a), t, needs)
    }

    // ── broadcasts ───────────────────────────────────────────────────────

    /// x + s where s is a (1,1,1,1) node, broadcast over all of x.
    pub fn add_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s).numel() != 1 {
            return Err(Error::shape(
                "add_scalar_var",
                format!("scalar operand has shape {}", self.shape(s)),
            ));
        }
        let sv = self.nodes[s.i()].data.data()[0];
        let t = self.nodes[x.i()].data.map(|v| v + sv);
        let needs = self.ng2(x, s);
        Ok(self.push(Op::AddScalarVar(x, s), t, needs))
    }

    fn check_channel_param(&self, op: &'static str, x: Var, p: Var) -> Result<()> {
        let (sx, sp) = (self.shape(x), self.shape(p));
        if sp.b != 1 || sp.h != 1 || sp.w != 1 || sp.c != sx.c {
            return Err(Error::shape(
                op,
                format!("per-channel operand {sp} incompatible with input {sx}"),
            ));
        }
        Ok(())
    }

    fn channel_broadcast(&self, x: Var, p: Var, f: impl Fn(R, R) -> R) -> Tensor<R> {
        let s = self.shape(x);
        let xd = self.nodes[x.i()].data.data();
        let pd = self.nodes[p.i()].data.data();
        let plane = s.h * s.w;
        let mut out = Vec::with_capacity(xd.len());
        for b in 0..s.b {
            for c in 0..s.c {
                let pv = pd[c];
                let start = (b * s.c + c) * plane;
                out.extend(xd[start..start + plane].iter().map(|&v| f(v, pv)));
            }
        }
        Tensor::from_raw(s, out)
    }

    /// x + bias(1,C,1,1) broadcast.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check_channel_param("add_channel", x, bias)?;
        let t = self.channel_broadcast(x, bias, |a, b| a + b);
        let needs = self.ng2(x, bias);
        Ok(self.push(Op::AddChannel(x, bias), t, needs))
    }

    /// x · scale(1,C,1,1) broadcast.
    pub fn mul_channel(&mut self, x: Var, scale: Var) -> Result<Var> {
        self.check_channel_param("mul_channel", x, scale)?;
        let t = self.channel_broadcast(x, scale, |a, b| a * b);
        let needs = self.ng2(x, scale);
        Ok(self.push(Op::MulChannel(x, scale), t, needs))
    }

    // ── structured ops ───────────────────────────────────────────────────

    /// Zero-padded stride-1 convolution; `b` has shape (1,out_ch,1,1).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sb = self.shape(b);
        let sw = self.shape(w);
        if sb.b != 1 || sb.h != 1 || sb.w != 1 || sb.c != sw.b {
            return Err(Error::shape(
                "conv2d",
                format!("bias {sb} does not match {} output channels", sw.b),
            ));
        }
        let out = k::conv2d(
            &self.nodes[x.i()].data,
            &self.nodes[w.i()].data,
            Some(&self.nodes[b.i()].data),
        )?;
        let needs = self.ng2(x, w) || self.ng(b);
        Ok(self.push(Op::Conv2d { x, w, b }, out, needs))
    }

    /// Applies W (C×C, stored (C,C,1,1)) to every pixel's channel vector;
    /// with `invert` applies W⁻¹ — gradients still reach W.
    pub fn matpix(&mut self, x: Var, w: Var, invert: bool) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.b != sw.c || sw.h != 1 || sw.w != 1 || sw.b != sx.c {
            return Err(Error::shape(
                "invertible_1x1",
                format!("matrix {sw} incompatible with input {sx}"),
            ));
        }
        let n = sw.b;
        let wmat: Vec<f64> = self.nodes[w.i()].data.data().iter().map(|v| v.to_f64()).collect();
        let m = if invert {
            match linalg::invert(&wmat, n) {
                Some(inv) => inv,
                None => {
                    return Err(Error::SingularMatrix {
                        det_abs: det_abs_or_zero(&wmat, n),
                    })
                }
            }
        } else {
            wmat
        };
        let out = k::matmul_pixels(&self.nodes[x.i()].data, &m);
        let needs = self.ng2(x, w);
        Ok(self.push(Op::MatPix { x, w, invert, m }, out, needs))
    }

    /// Scalar node holding log|det W|; errors when W is singular.
    pub fn logdet_mat(&mut self, w: Var) -> Result<Var> {
        let sw = self.shape(w);
        if sw.b != sw.c || sw.h != 1 || sw.w != 1 {
            return Err(Error::shape(
                "logdet",
                format!("matrix operand has shape {sw}"),
            ));
        }
        let n = sw.b;
        let wmat: Vec<f64> = self.nodes[w.i()].data.data().iter().map(|v| v.to_f64()).collect();
        let (ld, det_abs) = match linalg::logabsdet(&wmat, n) {
            Some(v) => v,
            None => return Err(Error::SingularMatrix { det_abs: 0.0 }),
        };
        if det_abs < 1e-12 {
            return Err(Error::SingularMatrix { det_abs });
        }
        let inv_t = linalg::transpose(
            &linalg::invert(&wmat, n).ok_or(Error::SingularMatrix { det_abs })?,
            n,
        );
        let t = Tensor::full(Shape4::new(1, 1, 1, 1), R::from_f64(ld));
        let needs = self.ng(w);
        Ok(self.push(Op::LogDetMat { w, inv_t }, t, needs))
    }

    pub fn squeeze2(&mut self, x: Var) -> Result<Var> {
        let out = k::squeeze2(&self.nodes[x.i()].data)?;
        let needs = self.ng(x);
        Ok(self.push(Op::Squeeze2(x), out, needs))
    }

    pub fn unsqueeze2(&mut self, x: Var) -> Result<Var> {
        let out = k::unsqueeze2(&self.nodes[x.i()].data)?;
        let needs = self.ng(x);
        Ok(self.push(Op::Unsqueeze2(x), out, needs))
    }

    pub fn haar_fwd(&mut self, x: Var) -> Result<Var> {
        let out = k::haar2(&self.nodes[x.i()].data)?;
        let needs = self.ng(x);
        Ok(self.push(Op::HaarFwd(x), out, needs))
    }

    pub fn haar_inv(&mut self, x: Var) -> Result<Var> {
        let out = k::haar2_inverse(&self.nodes[x.i()].data)?;
        let needs = self.ng(x);
        Ok(self.push(Op::HaarInv(x), out, needs))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let out = k::upsample2(&self.nodes[x.i()].data);
        let needs = self.ng(x);
        self.push(Op::Upsample2(x), out, needs)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<R>> = parts.iter().map(|v| &self.nodes[v.i()].data).collect();
        let out = k::concat_channels(&tensors)?;
        let needs = parts.iter().any(|&v| self.ng(v));
        Ok(self.push(Op::ConcatC(parts.to_vec()), out, needs))
    }

    pub fn slice_channels(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let out = k::slice_channels(&self.nodes[x.i()].data, lo, hi)?;
        let needs = self.ng(x);
        Ok(self.push(Op::SliceC { x, lo }, out, needs))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar root. Gradients are populated for
    /// every `needs_grad` node on a path to the root; disconnected
    /// parameters simply end up with no entry (treated as zero).
    pub fn backward(&self, root: Var) -> Result<Grads<R>> {
        if self.nodes[root.i()].data.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, has shape {}", self.shape(root)),
            ));
        }
        let mut g: Vec<Option<Tensor<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.i()] = Some(Tensor::full(Shape4::new(1, 1, 1, 1), R::ONE));

        for i in (0..=root.i()).rev() {
            if g[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let gy = g[i].take().unwrap();
            self.node_backward(i, &gy, &mut g);
            // keep the gradient available for callers (leaves read it back)
            g[i] = Some(gy);
        }
        Ok(Grads { g })
    }

    fn accumulate(&self, g: &mut [Option<Tensor<R>>], v: Var, delta: Tensor<R>) {
        if !self.ng(v) {
            return;
        }
        match &mut g[v.i()] {
            Some(acc) => {
                debug_assert!(acc.same_shape(&delta));
                for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                    *a += *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn node_backward(&self, i: usize, gy: &Tensor<R>, g: &mut [Option<Tensor<R>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(g, *a, gy.clone());
                self.accumulate(g, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(g, *a, gy.clone());
                self.accumulate(g, *b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = zip_tensors(gy, &self.nodes[b.i()].data, |gv, bv| gv * bv);
                let db = zip_tensors(gy, &self.nodes[a.i()].data, |gv, av| gv * av);
                self.accumulate(g, *a, da);
                self.accumulate(g, *b, db);
            }
            Op::Div(a, b) => {
                // y = a/b → da = g/b, db = −g·y/b
                let bd = &self.nodes[b.i()].data;
                let da = zip_tensors(gy, bd, |gv, bv| gv / bv);
                let ynode = &node.data;
                let mut db = zip_tensors(gy, ynode, |gv, yv| gv * yv);
                for (d, bv) in db.data_mut().iter_mut().zip(bd.data()) {
                    *d = -*d / *bv;
                }
                self.accumulate(g, *a, da);
                self.accumulate(g, *b, db);
            }
            Op::Neg(a) => self.accumulate(g, *a, gy.map(|v| -v)),
            Op::AddScalar(a) => self.accumulate(g, *a, gy.clone()),
            Op::MulScalar(a, s) => {
                let sv = R::from_f64(*s);
                self.accumulate(g, *a, gy.map(|v| v * sv));
            }
            Op::Exp(a) => {
                self.accumulate(g, *a, zip_tensors(gy, &node.data, |gv, yv| gv * yv));
            }
            Op::Ln(a) => {
                let xd = &self.nodes[a.i()].data;
                self.accumulate(g, *a, zip_tensors(gy, xd, |gv, xv| gv / xv));
            }
            Op::Sigmoid(a) => {
                let da = zip_tensors(gy, &node.data, |gv, yv| gv * yv * (R::ONE - yv));
                self.accumulate(g, *a, da);
            }
            Op::Relu(a) => {
                let xd = &self.nodes[a.i()].data;
                let da = zip_tensors(gy, xd, |gv, xv| if xv > R::ZERO { gv } else { R::ZERO });
                self.accumulate(g, *a, da);
            }
            Op::Abs(a) => {
                let xd = &self.nodes[a.i()].data;
                let da = zip_tensors(gy, xd, |gv, xv| {
                    if xv > R::ZERO {
                        gv
                    } else if xv < R::ZERO {
                        -gv
                    } else {
                        R::ZERO
                    }
                });
                self.accumulate(g, *a, da);
            }
            Op::Sum(a) => {
                let s = self.shape(*a);
                self.accumulate(g, *a, Tensor::full(s, gy.data()[0]));
            }
            Op::Mean(a) => {
                let s = self.shape(*a);
                let v = gy.data()[0].to_f64() / s.numel() as f64;
                self.accumulate(g, *a, Tensor::full(s, R::from_f64(v)));
            }
            Op::SumItems(a) => {
                let s = self.shape(*a);
                let item = s.item_numel();
                let mut d = Vec::with_capacity(s.numel());
                for b in 0..s.b {
                    d.extend(std::iter::repeat(gy.data()[b]).take(item));
                }
                self.accumulate(g, *a, Tensor::from_raw(s, d));
            }
            Op::AddScalarVar(x, sv) => {
                self.accumulate(g, *x, gy.clone());
                let total = gy.sum_f64();
                self.accumulate(
                    g,
                    *sv,
                    Tensor::full(Shape4::new(1, 1, 1, 1), R::from_f64(total)),
                );
            }
            Op::AddChannel(x, bias) => {
                self.accumulate(g, *x, gy.clone());
                self.accumulate(g, *bias, k::channel_sum(gy));
            }
            Op::MulChannel(x, scale) => {
                let pd = &self.nodes[scale.i()].data;
                let dx = self.channel_broadcast_grad(gy, pd);
                self.accumulate(g, *x, dx);
                let xd = &self.nodes[x.i()].data;
                self.accumulate(g, *scale, k::channel_dot(gy, xd));
            }
            Op::Conv2d { x, w, b } => {
                let xd = &self.nodes[x.i()].data;
                let wd = &self.nodes[w.i()].data;
                if self.ng(*x) {
                    let gx = k::conv2d_grad_input(gy, wd, xd.shape());
                    self.accumulate(g, *x, gx);
                }
                if self.ng(*w) {
                    let gw = k::conv2d_grad_weight(xd, gy, wd.shape());
                    self.accumulate(g, *w, gw);
                }
                if self.ng(*b) {
                    self.accumulate(g, *b, k::conv2d_grad_bias(gy));
                }
            }
            Op::MatPix { x, w, invert, m } => {
                let n = self.shape(*w).b;
                if self.ng(*x) {
                    let mt = linalg::transpose(m, n);
                    self.accumulate(g, *x, k::matmul_pixels(gy, &mt));
                }
                if self.ng(*w) {
                    let xd = &self.nodes[x.i()].data;
                    let gm = k::matmul_pixels_grad_mat(xd, gy);
                    let gw = if *invert {
                        // M = W⁻¹ ⇒ dL/dW = −Mᵀ·(dL/dM)·Mᵀ
                        let mt = linalg::transpose(m, n);
                        let tmp = linalg::matmul(&mt, &gm, n);
                        let mut out = linalg::matmul(&tmp, &mt, n);
                        for v in &mut out {
                            *v = -*v;
                        }
                        out
                    } else {
                        gm
                    };
                    let gw = Tensor::from_raw(
                        Shape4::new(n, n, 1, 1),
                        gw.into_iter().map(R::from_f64).collect(),
                    );
                    self.accumulate(g, *w, gw);
                }
            }
            Op::LogDetMat { w, inv_t } => {
                let n = self.shape(*w).b;
                let g0 = gy.data()[0].to_f64();
                let gw = Tensor::from_raw(
                    Shape4::new(n, n, 1, 1),
                    inv_t.iter().map(|v| R::from_f64(g0 * v)).collect(),
                );
                self.accumulate(g, *w, gw);
            }
            Op::Squeeze2(a) => {
                self.accumulate(g, *a, k::unsqueeze2(gy).expect("squeeze grad"));
            }
            Op::Unsqueeze2(a) => {
                self.accumulate(g, *a, k::squeeze2(gy).expect("unsqueeze grad"));
            }
            Op::HaarFwd(a) => {
                // orthonormal: Jᵀ = J⁻¹
                self.accumulate(g, *a, k::haar2_inverse(gy).expect("haar grad"));
            }
            Op::HaarInv(a) => {
                self.accumulate(g, *a, k::haar2(gy).expect("haar inv grad"));
            }
            Op::Upsample2(a) => {
                self.accumulate(g, *a, k::downsum2(gy));
            }
            Op::ConcatC(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = self.shape(*p).c;
                    let gp = k::slice_channels(gy, off, off + c).expect("concat grad");
                    self.accumulate(g, *p, gp);
                    off += c;
                }
            }
            Op::SliceC { x, lo } => {
                if self.ng(*x) {
                    let mut gx = Tensor::zeros(self.shape(*x));
                    k::scatter_channels_add(&mut gx, gy, *lo);
                    self.accumulate_raw(g, *x, gx);
                }
            }
        }
    }

    /// Like `accumulate` but the delta is already a full-shape tensor that
    /// may be sparse; skips the needs_grad re-check done by the caller.
    fn accumulate_raw(&self, g: &mut [Option<Tensor<R>>], v: Var, delta: Tensor<R>) {
        match &mut g[v.i()] {
            Some(acc) => {
                for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                    *a += *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn channel_broadcast_grad(&self, gy: &Tensor<R>, p: &Tensor<R>) -> Tensor<R> {
        let s = gy.shape();
        let plane = s.h * s.w;
        let pd = p.data();
        let gd = gy.data();
        let mut out = Vec::with_capacity(gd.len());
        for b in 0..s.b {
            for c in 0..s.c {
                let pv = pd[c];
                let start = (b * s.c + c) * plane;
                out.extend(gd[start..start + plane].iter().map(|&v| v * pv));
            }
        }
        Tensor::from_raw(s, out)
    }
}

fn zip_tensors<R: Real>(a: &Tensor<R>, b: &Tensor<R>, f: impl Fn(R, R) -> R) -> Tensor<R> {
    debug_assert!(a.same_shape(b));
    Tensor::from_raw(
        a.shape(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

fn sigmoid_stable<R: Real>(x: R) -> R {
    if x >= R::ZERO {
        R::ONE / (R::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::ONE + e)
    }
}

fn det_abs_or_zero(mat: &[f64], n: usize) -> f64 {
    linalg::logabsdet(mat, n).map_or(0.0, |(_, d)| d)
}
