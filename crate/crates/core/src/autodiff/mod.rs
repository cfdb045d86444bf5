//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records a computation graph; [`Var`] handles index into it.
//! Calling [`Tape::backward`] on a scalar root accumulates gradients into
//! every reachable leaf. The op set is exactly what the translation model
//! needs: dense/conv layers, pointwise nonlinearities, softmax-family
//! reductions, and a few fused Gaussian-mixture kernels.
//!
//! Everything is deterministic: no threading, fixed accumulation order.

pub mod conv;

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Sigmoid(Var),
    Softplus(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Matmul(Var, Var),
    /// `y = x w^T + b` with `x: [B,F]`, `w: [O,F]`, `b: [O]`.
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Array2<f64>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Reshape(Var),
    /// Broadcast by prepending axes: input shape must be a suffix of the output shape.
    BroadcastTo(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    LogSumExp(Var, usize),
    LogSoftmax(Var, usize),
    Softmax(Var, usize),
    /// Per-component diagonal-Gaussian log densities: `z: [B,d]`,
    /// `means: [K,d]` or `[B,K,d]`, `logvars: [K,d]` -> `[B,K]`.
    GaussLogPdf {
        z: Var,
        means: Var,
        logvars: Var,
    },
    /// `y[b,:] = sum_k a[b,k] * zk[b,k,:]` with `a: [B,K]`, `zk: [B,K,d]` -> `[B,d]`.
    WeightedSumK {
        a: Var,
        zk: Var,
    },
    /// Row selection along axis 1: `[B,K,d] -> [B,d]` or `[B,K] -> [B]`.
    SelectK {
        src: Var,
        idx: Vec<usize>,
    },
    StopGrad,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation graph; create per forward pass and discard after backward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_2PI: f64 = 1.8378770664093453; // ln(2*pi)

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf (a trainable parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input (data, noise draws).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(ndarray::arr0(x).into_dyn())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Read a 0-d (or single-element) node as `f64`.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = &self.nodes[v.0].value;
        assert_eq!(t.len(), 1, "scalar() on non-scalar node");
        *t.iter().next().unwrap()
    }

    // ---- pointwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape");
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape");
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape");
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        let rg = self.rg(a);
        self.push(v, Op::Neg(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        let rg = self.rg(a);
        self.push(v, Op::Ln(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        let rg = self.rg(a);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(stable_sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(stable_softplus);
        let rg = self.rg(a);
        self.push(v, Op::Softplus(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let v = av.dot(&bv).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Matmul(a, b), rg)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        assert_eq!(xv.ncols(), wv.ncols(), "linear in-features");
        assert_eq!(wv.nrows(), bv.len(), "linear out-features");
        let mut y = xv.dot(&wv.t());
        y += &bv;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(y.into_dyn(), Op::Linear { x, w, b }, rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let (y, cols) = conv::conv_fwd(&xv, &wv, &bv, stride, pad);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            y.into_dyn(),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            rg,
        )
    }

    /// Transposed convolution; weight layout `[Cin, Cout, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let (bsz, cin, h, wd) = xv.dim();
        let (cin_w, cout, k, _) = wv.dim();
        assert_eq!(cin, cin_w, "conv_transpose2d channels");
        let oh = conv::conv_transpose_out_size(h, k, stride, pad);
        let ow = conv::conv_transpose_out_size(wd, k, stride, pad);
        let x_mat = conv::chw_to_mat(&xv);
        let w_mat = wv.to_shape((cin, cout * k * k)).unwrap();
        let cols = w_mat.t().dot(&x_mat); // [Cout*k*k, B*H*W]
        let mut y = conv::col2im_t(&cols.view(), (bsz, cout, oh, ow), k, stride, pad);
        for c in 0..cout {
            let mut lane = y.index_axis_mut(Axis(1), c);
            lane += bv[c];
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            y.into_dyn(),
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        )
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    /// Broadcast by prepending axes; `self.value(a).shape()` must be a suffix of `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let av = self.value(a);
        assert!(
            shape.len() >= av.ndim() && shape[shape.len() - av.ndim()..] == *av.shape(),
            "broadcast_to: {:?} is not a suffix of {:?}",
            av.shape(),
            shape
        );
        let v = av.broadcast(IxDyn(shape)).unwrap().to_owned();
        let rg = self.rg(a);
        self.push(v, Op::BroadcastTo(a), rg)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = ndarray::arr0(self.value(a).sum()).into_dyn();
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = ndarray::arr0(t.sum() / t.len() as f64).into_dyn();
        let rg = self.rg(a);
        self.push(v, Op::MeanAll(a), rg)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let v = self.value(a).sum_axis(Axis(axis));
        let rg = self.rg(a);
        self.push(v, Op::SumAxis(a, axis), rg)
    }

    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Var {
        let t = self.value(a);
        let max = t.fold_axis(Axis(axis), f64::NEG_INFINITY, |m, &x| m.max(x));
        let max_keep = max.clone().insert_axis(Axis(axis));
        let sum = (t - &max_keep).mapv(f64::exp).sum_axis(Axis(axis));
        let v = max + sum.mapv(f64::ln);
        let rg = self.rg(a);
        self.push(v, Op::LogSumExp(a, axis), rg)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Var {
        let t = self.value(a);
        let max = t.fold_axis(Axis(axis), f64::NEG_INFINITY, |m, &x| m.max(x));
        let max_keep = max.insert_axis(Axis(axis));
        let shifted = t - &max_keep;
        let lse = shifted
            .mapv(f64::exp)
            .sum_axis(Axis(axis))
            .mapv(f64::ln)
            .insert_axis(Axis(axis));
        let v = shifted - lse;
        let rg = self.rg(a);
        self.push(v, Op::LogSoftmax(a, axis), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let t = self.value(a);
        let max = t.fold_axis(Axis(axis), f64::NEG_INFINITY, |m, &x| m.max(x));
        let max_keep = max.insert_axis(Axis(axis));
        let e = (t - &max_keep).mapv(f64::exp);
        let norm = e.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let v = e / norm;
        let rg = self.rg(a);
        self.push(v, Op::Softmax(a, axis), rg)
    }

    // ---- fused Gaussian-mixture kernels ----

    /// Log density of `z[b]` under each diagonal-Gaussian component:
    /// `out[b,k] = log N(z[b]; means[(b,)k], diag(exp(logvars[k])))`.
    pub fn gauss_log_pdf(&mut self, z: Var, means: Var, logvars: Var) -> Var {
        let zv = self.value(z).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let lv = self.value(logvars).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let (bsz, d) = zv.dim();
        let (k, d2) = lv.dim();
        assert_eq!(d, d2, "gauss_log_pdf latent dim");
        let mv = self.value(means);
        let batched = mv.ndim() == 3;
        if batched {
            assert_eq!(mv.shape(), [bsz, k, d], "gauss_log_pdf batched means");
        } else {
            assert_eq!(mv.shape(), [k, d], "gauss_log_pdf means");
        }
        let inv_var = lv.mapv(|x| (-x).exp());
        let mut out = Array2::<f64>::zeros((bsz, k));
        for b in 0..bsz {
            for kk in 0..k {
                let mut acc = 0.0;
                for dd in 0..d {
                    let m = if batched {
                        mv[[b, kk, dd]]
                    } else {
                        mv[[kk, dd]]
                    };
                    let diff = zv[[b, dd]] - m;
                    acc += LN_2PI + lv[[kk, dd]] + diff * diff * inv_var[[kk, dd]];
                }
                out[[b, kk]] = -0.5 * acc;
            }
        }
        let rg = self.rg(z) || self.rg(means) || self.rg(logvars);
        self.push(out.into_dyn(), Op::GaussLogPdf { z, means, logvars }, rg)
    }

    /// Assignment-weighted sum over components: `a: [B,K]`, `zk: [B,K,d]` -> `[B,d]`.
    pub fn weighted_sum_k(&mut self, a: Var, zk: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let zv = self.value(zk).view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let (bsz, k) = av.dim();
        let (b2, k2, d) = zv.dim();
        assert_eq!((bsz, k), (b2, k2), "weighted_sum_k shapes");
        let mut out = Array2::<f64>::zeros((bsz, d));
        for b in 0..bsz {
            for kk in 0..k {
                let w = av[[b, kk]];
                for dd in 0..d {
                    out[[b, dd]] += w * zv[[b, kk, dd]];
                }
            }
        }
        let rg = self.rg(a) || self.rg(zk);
        self.push(out.into_dyn(), Op::WeightedSumK { a, zk }, rg)
    }

    /// Pick one component per batch row along axis 1.
    pub fn select_k(&mut self, src: Var, idx: Vec<usize>) -> Var {
        let sv = self.value(src);
        let v = match sv.ndim() {
            3 => {
                let s = sv.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let (bsz, k, d) = s.dim();
                assert_eq!(bsz, idx.len());
                let mut out = Array2::<f64>::zeros((bsz, d));
                for b in 0..bsz {
                    assert!(idx[b] < k);
                    out.row_mut(b).assign(&s.slice(ndarray::s![b, idx[b], ..]));
                }
                out.into_dyn()
            }
            2 => {
                let s = sv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let (bsz, k) = s.dim();
                assert_eq!(bsz, idx.len());
                let mut out = Array1::<f64>::zeros(bsz);
                for b in 0..bsz {
                    assert!(idx[b] < k);
                    out[b] = s[[b, idx[b]]];
                }
                out.into_dyn()
            }
            n => panic!("select_k on rank-{n} tensor"),
        };
        let rg = self.rg(src);
        self.push(v, Op::SelectK { src, idx }, rg)
    }

    /// Identity forward; blocks gradient flow.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::StopGrad, false)
    }

    // ---- backward ----

    /// Reverse-accumulate gradients from a scalar root. Returns per-node
    /// gradients; read them via [`Grads::get`].
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_shape = self.value(root).raw_dim();
        grads[root.0] = Some(ArrayD::ones(root_shape));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.step_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => *t += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn step_backward(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::StopGrad => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(grads, a, g * self.value(b));
                self.accum(grads, b, g * self.value(a));
            }
            Op::Neg(a) => self.accum(grads, *a, -g),
            Op::Scale(a, c) => self.accum(grads, *a, g * *c),
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::Exp(a) => self.accum(grads, *a, g * &self.nodes[i].value),
            Op::Ln(a) => self.accum(grads, *a, g / self.value(*a)),
            Op::Abs(a) => {
                let s = self.value(*a).mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accum(grads, *a, g * &s);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                self.accum(grads, *a, g * &(y * &y.mapv(|v| 1.0 - v)));
            }
            Op::Softplus(a) => {
                let s = self.value(*a).mapv(stable_sigmoid);
                self.accum(grads, *a, g * &s);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                self.accum(grads, *a, g * &y.mapv(|v| 1.0 - v * v));
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let m = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { slope });
                self.accum(grads, *a, g * &m);
            }
            Op::Relu(a) => {
                let m = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.accum(grads, *a, g * &m);
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let av = self.value(a).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let bv = self.value(b).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                self.accum(grads, a, g2.dot(&bv.t()).into_dyn());
                self.accum(grads, b, av.t().dot(&g2).into_dyn());
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let xv = self.value(x).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let wv = self.value(w).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                self.accum(grads, x, g2.dot(&wv).into_dyn());
                self.accum(grads, w, g2.t().dot(&xv).into_dyn());
                self.accum(grads, b, g2.sum_axis(Axis(0)).into_dyn());
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let wv = self.value(*w).view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let xv = self.value(*x);
                let (_, _, h, wd) = xv
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap()
                    .dim();
                let dx = conv::conv_bwd_data(&g4, &wv, *stride, *pad, (h, wd));
                let dw = conv::conv_bwd_weights(&g4, &cols.view(), wv.dim());
                let db = conv::conv_bwd_bias(&g4);
                self.accum(grads, *x, dx.into_dyn());
                self.accum(grads, *w, dw.into_dyn());
                self.accum(grads, *b, db.into_dyn());
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let xv = self.value(*x).view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let wv = self.value(*w).view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let (bsz, cin, h, wd) = xv.dim();
                let (_, cout, k, _) = wv.dim();
                // grads flow through the adjoint pair: dx is a plain conv of g,
                // dw pairs the input matrix with im2col of g.
                let cols_g = conv::im2col_t(&g4, k, *stride, *pad); // [Cout*k*k, B*H*W]
                let w_mat = wv.to_shape((cin, cout * k * k)).unwrap();
                let dx_mat = w_mat.dot(&cols_g); // [Cin, B*H*W]
                let dx = conv::mat_to_chw(&dx_mat.view(), (bsz, cin, h, wd));
                let x_mat = conv::chw_to_mat(&xv); // [Cin, B*H*W]
                let dw = x_mat
                    .dot(&cols_g.t())
                    .into_shape_with_order((cin, cout, k, k))
                    .unwrap();
                let db = conv::conv_bwd_bias(&g4);
                self.accum(grads, *x, dx.into_dyn());
                self.accum(grads, *w, dw.into_dyn());
                self.accum(grads, *b, db.into_dyn());
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).raw_dim();
                self.accum(grads, *a, g.clone().into_shape_with_order(shape).unwrap());
            }
            Op::BroadcastTo(a) => {
                let extra = g.ndim() - self.value(*a).ndim();
                let mut d = g.clone();
                for _ in 0..extra {
                    d = d.sum_axis(Axis(0));
                }
                self.accum(grads, *a, d);
            }
            Op::SumAll(a) => {
                let gs = *g.iter().next().unwrap();
                let shape = self.value(*a).raw_dim();
                self.accum(grads, *a, ArrayD::from_elem(shape, gs));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len() as f64;
                let gs = *g.iter().next().unwrap() / n;
                let shape = self.value(*a).raw_dim();
                self.accum(grads, *a, ArrayD::from_elem(shape, gs));
            }
            Op::SumAxis(a, axis) => {
                let shape = self.value(*a).raw_dim();
                let expanded = g.clone().insert_axis(Axis(*axis));
                let d = expanded.broadcast(shape).unwrap().to_owned();
                self.accum(grads, *a, d);
            }
            Op::LogSumExp(a, axis) => {
                let y = self.nodes[i].value.clone().insert_axis(Axis(*axis));
                let soft = (self.value(*a) - &y).mapv(f64::exp);
                let gx = g.clone().insert_axis(Axis(*axis));
                let d = &soft * &gx.broadcast(soft.raw_dim()).unwrap();
                self.accum(grads, *a, d);
            }
            Op::LogSoftmax(a, axis) => {
                let soft = self.nodes[i].value.mapv(f64::exp);
                let gsum = g.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                let d = g - &(&soft * &gsum.broadcast(soft.raw_dim()).unwrap());
                self.accum(grads, *a, d);
            }
            Op::Softmax(a, axis) => {
                let y = &self.nodes[i].value;
                let gy = g * y;
                let gysum = gy.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                let d = &gy - &(y * &gysum.broadcast(y.raw_dim()).unwrap());
                self.accum(grads, *a, d);
            }
            Op::GaussLogPdf { z, means, logvars } => {
                let (z, means, logvars) = (*z, *means, *logvars);
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let zv = self.value(z).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let lv = self
                    .value(logvars)
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let mv = self.value(means);
                let batched = mv.ndim() == 3;
                let (bsz, d) = zv.dim();
                let k = lv.nrows();
                let inv_var = lv.mapv(|x| (-x).exp());
                let mut dz = Array2::<f64>::zeros((bsz, d));
                let mut dlv = Array2::<f64>::zeros((k, d));
                let mut dm = if batched {
                    ndarray::Array3::<f64>::zeros((bsz, k, d)).into_dyn()
                } else {
                    Array2::<f64>::zeros((k, d)).into_dyn()
                };
                for b in 0..bsz {
                    for kk in 0..k {
                        let go = g2[[b, kk]];
                        if go == 0.0 {
                            continue;
                        }
                        for dd in 0..d {
                            let m = if batched {
                                mv[[b, kk, dd]]
                            } else {
                                mv[[kk, dd]]
                            };
                            let diff = zv[[b, dd]] - m;
                            let w = diff * inv_var[[kk, dd]];
                            dz[[b, dd]] -= go * w;
                            if batched {
                                dm[[b, kk, dd]] += go * w;
                            } else {
                                dm[[kk, dd]] += go * w;
                            }
                            dlv[[kk, dd]] -= go * 0.5 * (1.0 - diff * w);
                        }
                    }
                }
                self.accum(grads, z, dz.into_dyn());
                self.accum(grads, means, dm);
                self.accum(grads, logvars, dlv.into_dyn());
            }
            Op::WeightedSumK { a, zk } => {
                let (a, zk) = (*a, *zk);
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let av = self.value(a).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let zv = self.value(zk).view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let (bsz, k, d) = zv.dim();
                let mut da = Array2::<f64>::zeros((bsz, k));
                let mut dz = ndarray::Array3::<f64>::zeros((bsz, k, d));
                for b in 0..bsz {
                    for kk in 0..k {
                        let mut acc = 0.0;
                        for dd in 0..d {
                            acc += g2[[b, dd]] * zv[[b, kk, dd]];
                            dz[[b, kk, dd]] = av[[b, kk]] * g2[[b, dd]];
                        }
                        da[[b, kk]] = acc;
                    }
                }
                self.accum(grads, a, da.into_dyn());
                self.accum(grads, zk, dz.into_dyn());
            }
            Op::SelectK { src, idx } => {
                let src = *src;
                let shape = self.value(src).raw_dim();
                let mut d = ArrayD::<f64>::zeros(shape);
                match self.value(src).ndim() {
                    3 => {
                        let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                        for (b, &kk) in idx.iter().enumerate() {
                            for dd in 0..g2.ncols() {
                                d[[b, kk, dd]] = g2[[b, dd]];
                            }
                        }
                    }
                    2 => {
                        let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                        for (b, &kk) in idx.iter().enumerate() {
                            d[[b, kk]] = g1[b];
                        }
                    }
                    _ => unreachable!(),
                }
                self.accum(grads, src, d);
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the root w.r.t. `v`, if any reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient or zeros in the given shape.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.grads[v.0].as_ref() {
            Some(t) => t.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

/// True when every element of `t` is finite.
pub fn all_finite(t: &Tensor) -> bool {
    t.iter().all(|x| x.is_finite())
}
