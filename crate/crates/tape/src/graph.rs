//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already a topological order and the
//! backward sweep simply walks it in reverse.

use crate::kernels::{col2im, gemm, im2col, Trans, Window};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this crate.
///
/// `forward` computes the output from the input values; `backward` receives
/// the same inputs, the output and the output cotangent and returns one
/// cotangent per input (`None` for inputs that are not differentiable).
pub trait Function {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Tensor;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

/// Batch statistics observed by a training-mode batch-norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (the convention used for running estimates).
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Exp(Var),
    Relu(Var),
    Tanh(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ChannelBias(Var, Var),
    Conv {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        /// Training mode normalizes with batch statistics, which couples the
        /// gradient across the batch.
        batch_stats: bool,
    },
    Concat(Vec<Var>),
    SpatialMean(Var),
    ChannelsLast(Var),
    ChannelsFirst(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    Custom {
        inputs: Vec<Var>,
        f: Box<dyn Function>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Cotangents produced by a backward sweep, indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Cotangent of `v`, or zeros shaped like `like` when `v` did not
    /// influence the seeded outputs.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "expected at least [n, c], got {shape:?}");
    let inner: usize = shape[2..].iter().product();
    (shape[0], shape[1], inner)
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(size + 2 * pad >= kernel, "kernel larger than padded input");
    (size + 2 * pad - kernel) / stride + 1
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Smallest `|x|` over the inputs of every relu node, infinity if there
    /// are none. Finite-difference checks use it to avoid the kink at 0.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(self.value(a).data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()))),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Differentiable leaf holding a copy of `value`.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.leaf(value.clone(), true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    /// Elementwise clamp; the gradient is zero where the input was clipped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(v, Op::Clamp(a, lo, hi), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let ng = self.ng(a);
        self.push(v, Op::Mean(a), ng)
    }

    /// `mean(a^2)`
    pub fn mean_square(&mut self, a: Var) -> Var {
        let s = self.square(a);
        self.mean(s)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape);
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    /// `[m, k] x [k, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (av.shape(), bv.shape()) else {
            panic!("matmul expects 2-D operands, got {:?} and {:?}", av.shape(), bv.shape());
        };
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, 1.0, av.data(), Trans::No, bv.data(), Trans::No, 0.0, out.data_mut());
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `x [n, in] * w[out, in]^T + b[out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (&[n, din], &[dout, din2]) = (xv.shape(), wv.shape()) else {
            panic!("linear expects [n, in] and [out, in], got {:?} and {:?}", xv.shape(), wv.shape());
        };
        assert_eq!(din, din2, "linear input width mismatch");
        let mut out = Tensor::zeros(&[n, dout]);
        gemm(n, din, dout, 1.0, xv.data(), Trans::No, wv.data(), Trans::Yes, 0.0, out.data_mut());
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), dout, "linear bias width mismatch");
            for row in out.data_mut().chunks_mut(dout) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    /// Adds a per-channel bias `b[c]` to `x[n, c, ...]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Var {
        let mut out = self.value(x).clone();
        let (_, c, inner) = channel_layout(out.shape());
        let bv = self.value(b).data();
        assert_eq!(bv.len(), c, "channel bias width mismatch");
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bb = bv[i % c];
            chunk.iter_mut().for_each(|v| *v += bb);
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::ChannelBias(x, b), ng)
    }

    /// 2-D convolution. `x: [n, cin, h, w]`, `w: [cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let &[n, cin, h, wd] = xv.shape() else {
            panic!("conv2d expects NCHW input, got {:?}", xv.shape());
        };
        let &[cout, cin2, k, k2] = wv.shape() else {
            panic!("conv2d expects [cout, cin, k, k] weights, got {:?}", wv.shape());
        };
        assert_eq!(cin, cin2, "conv2d channel mismatch");
        assert_eq!(k, k2, "conv2d expects square kernels");
        let win = Window {
            channels: cin,
            h,
            w: wd,
            kernel: k,
            stride,
            pad,
            out_h: conv_out(h, k, stride, pad),
            out_w: conv_out(wd, k, stride, pad),
        };
        let pos = win.positions();
        let mut out = Tensor::zeros(&[n, cout, win.out_h, win.out_w]);
        let mut cols = vec![0.0; win.rows() * pos];
        let in_stride = cin * h * wd;
        for i in 0..n {
            im2col(&win, &xv.data()[i * in_stride..(i + 1) * in_stride], &mut cols);
            let dst = &mut out.data_mut()[i * cout * pos..(i + 1) * cout * pos];
            gemm(cout, win.rows(), pos, 1.0, wv.data(), Trans::No, &cols, Trans::No, 0.0, dst);
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let conv = self.push(
            out,
            Op::Conv { x, w, stride, pad },
            ng,
        );
        match b {
            Some(b) => self.channel_bias(conv, b),
            None => conv,
        }
    }

    /// Transposed 2-D convolution (the adjoint of [`Graph::conv2d`]).
    /// `x: [n, cin, h, w]`, `w: [cin, cout, k, k]`; output size
    /// `(h - 1) * stride - 2 * pad + k + output_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let &[n, cin, h, wd] = xv.shape() else {
            panic!("conv_transpose2d expects NCHW input, got {:?}", xv.shape());
        };
        let &[cin2, cout, k, _] = wv.shape() else {
            panic!("conv_transpose2d expects [cin, cout, k, k], got {:?}", wv.shape());
        };
        assert_eq!(cin, cin2, "conv_transpose2d channel mismatch");
        assert!(output_pad < stride.max(1), "output padding must be smaller than stride");
        let oh = (h - 1) * stride + k + output_pad - 2 * pad;
        let ow = (wd - 1) * stride + k + output_pad - 2 * pad;
        let win = Window {
            channels: cout,
            h: oh,
            w: ow,
            kernel: k,
            stride,
            pad,
            out_h: h,
            out_w: wd,
        };
        debug_assert_eq!(conv_out(oh, k, stride, pad), h);
        let pos = win.positions();
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        let mut cols = vec![0.0; win.rows() * pos];
        let out_stride = cout * oh * ow;
        for i in 0..n {
            let src = &xv.data()[i * cin * pos..(i + 1) * cin * pos];
            gemm(win.rows(), cin, pos, 1.0, wv.data(), Trans::Yes, src, Trans::No, 0.0, &mut cols);
            col2im(&win, &cols, &mut out.data_mut()[i * out_stride..(i + 1) * out_stride]);
        }
        let ng = self.ng(x) || self.ng(w);
        let conv = self.push(
            out,
            Op::ConvTranspose { x, w, stride, pad },
            ng,
        );
        match b {
            Some(b) => self.channel_bias(conv, b),
            None => conv,
        }
    }

    /// Batch normalization using the statistics of `x` itself. Works on
    /// `[n, c]` and `[n, c, h, w]`; statistics are per channel.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats) {
        let xv = self.value(x);
        let (n, c, inner) = channel_layout(xv.shape());
        let count = (n * inner) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (i, chunk) in xv.data().chunks(inner).enumerate() {
            mean[i % c] += chunk.iter().sum::<f64>();
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for (i, chunk) in xv.data().chunks(inner).enumerate() {
            let m = mean[i % c];
            var[i % c] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let unbiased = if count > 1.0 {
            var.iter().map(|v| v * count / (count - 1.0)).collect()
        } else {
            var.clone()
        };
        let stats = BatchStats {
            mean: mean.clone(),
            var: unbiased,
        };
        let out = self.normalize(x, gamma, beta, &mean, inv_std, true);
        (out, stats)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Var {
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.normalize(x, gamma, beta, mean, inv_std, false)
    }

    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Var {
        let xv = self.value(x);
        let (_, c, inner) = channel_layout(xv.shape());
        assert_eq!(mean.len(), c, "batch norm statistics width mismatch");
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), c, "batch norm gamma width mismatch");
        assert_eq!(b.len(), c, "batch norm beta width mismatch");
        let mut xhat = xv.clone();
        let mut out = xv.clone();
        for (i, (hc, oc)) in xhat
            .data_mut()
            .chunks_mut(inner)
            .zip(out.data_mut().chunks_mut(inner))
            .enumerate()
        {
            let ch = i % c;
            for (h, o) in hc.iter_mut().zip(oc.iter_mut()) {
                *h = (*h - mean[ch]) * inv_std[ch];
                *o = g[ch] * *h + b[ch];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            ng,
        )
    }

    /// Concatenate `[n, c_i, ...]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = self.value(parts[0]).shape().to_vec();
        let (n, _, inner) = channel_layout(&first);
        let mut c_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(s[0], n, "concat batch mismatch");
            assert_eq!(&s[2..], &first[2..], "concat spatial mismatch");
            c_total += s[1];
        }
        let mut data = Vec::with_capacity(n * c_total * inner);
        for i in 0..n {
            for &p in parts {
                let v = self.value(p);
                let block = v.shape()[1] * inner;
                data.extend_from_slice(&v.data()[i * block..(i + 1) * block]);
            }
        }
        let mut shape = first.clone();
        shape[1] = c_total;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(&shape, data), Op::Concat(parts.to_vec()), ng)
    }

    /// Global average pool: `[n, c, h, w] -> [n, c]`.
    pub fn spatial_mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, c, inner) = channel_layout(av.shape());
        let data = av.data().chunks(inner).map(|ch| ch.iter().sum::<f64>() / inner as f64).collect();
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&[n, c], data), Op::SpatialMean(a), ng)
    }

    /// `[n, c, h, w] -> [n, h, w, c]`
    pub fn channels_last(&mut self, a: Var) -> Var {
        let out = permute_channels(self.value(a), true);
        let ng = self.ng(a);
        self.push(out, Op::ChannelsLast(a), ng)
    }

    /// `[n, h, w, c] -> [n, c, h, w]`
    pub fn channels_first(&mut self, a: Var) -> Var {
        let out = permute_channels(self.value(a), false);
        let ng = self.ng(a);
        self.push(out, Op::ChannelsFirst(a), ng)
    }

    /// Mean softmax cross-entropy. `logits` is `[n, k]` or `[n, k, h, w]`;
    /// `targets` holds one class index per sample (or per pixel, row-major).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let (n, k, inner) = channel_layout(lv.shape());
        assert_eq!(targets.len(), n * inner, "cross entropy target count mismatch");
        let mut probs = lv.clone();
        let mut loss = 0.0;
        let mut buf = vec![0.0; k];
        for s in 0..n {
            let block = &mut probs.data_mut()[s * k * inner..(s + 1) * k * inner];
            for p in 0..inner {
                let mut mx = f64::NEG_INFINITY;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = block[j * inner + p];
                    mx = mx.max(*b);
                }
                let z: f64 = buf.iter().map(|v| (v - mx).exp()).sum();
                let lse = mx + z.ln();
                let t = targets[s * inner + p];
                assert!(t < k, "class index {t} out of range {k}");
                loss += lse - buf[t];
                for (j, b) in buf.iter().enumerate() {
                    block[j * inner + p] = (b - lse).exp();
                }
            }
        }
        let count = (n * inner) as f64;
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss / count),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    pub fn custom(&mut self, inputs: &[Var], f: Box<dyn Function>) -> Var {
        let out = {
            let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
            f.forward(&vals)
        };
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                f,
            },
            ng,
        )
    }

    /// Reverse sweep seeded with `d loss / d loss = 1`.
    pub fn backward(&self, loss: Var) -> Grads {
        let seed = Tensor::ones(self.value(loss).shape());
        self.backward_seeded(&[(loss, seed)])
    }

    /// Reverse sweep seeded with arbitrary cotangents (a vector-Jacobian
    /// product through everything upstream of the seeded nodes).
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, t) in seeds {
            assert_eq!(
                t.shape(),
                self.value(*v).shape(),
                "seed shape mismatch for node {}",
                v.0
            );
            accumulate(&mut grads, *v, t.clone());
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if self.ng(v) {
            accumulate(grads, v, g);
        }
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.send(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    self.send(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => self.send(grads, *a, g.map(|v| v * s)),
            Op::AddScalar(a) => self.send(grads, *a, g.clone()),
            Op::Square(a) => self.send(grads, *a, g.zip_map(self.value(*a), |d, x| 2.0 * d * x)),
            Op::Exp(a) => self.send(grads, *a, g.zip_map(&node.value, |d, y| d * y)),
            Op::Relu(a) => self.send(
                grads,
                *a,
                g.zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 }),
            ),
            Op::Tanh(a) => self.send(grads, *a, g.zip_map(&node.value, |d, y| d * (1.0 - y * y))),
            Op::Clamp(a, lo, hi) => self.send(
                grads,
                *a,
                g.zip_map(self.value(*a), |d, x| if x >= *lo && x <= *hi { d } else { 0.0 }),
            ),
            Op::Sum(a) => {
                let d = g.item();
                self.send(grads, *a, Tensor::full(self.value(*a).shape(), d));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let d = g.item() / av.len() as f64;
                self.send(grads, *a, Tensor::full(av.shape(), d));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape();
                self.send(grads, *a, g.clone().reshape(shape));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.ng(*a) {
                    let mut da = Tensor::zeros(&[m, k]);
                    gemm(m, n, k, 1.0, g.data(), Trans::No, bv.data(), Trans::Yes, 0.0, da.data_mut());
                    self.send(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = Tensor::zeros(&[k, n]);
                    gemm(k, m, n, 1.0, av.data(), Trans::Yes, g.data(), Trans::No, 0.0, db.data_mut());
                    self.send(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, din) = (xv.shape()[0], xv.shape()[1]);
                let dout = wv.shape()[0];
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(&[n, din]);
                    gemm(n, dout, din, 1.0, g.data(), Trans::No, wv.data(), Trans::No, 0.0, dx.data_mut());
                    self.send(grads, *x, dx);
                }
                if self.ng(*w) {
                    let mut dw = Tensor::zeros(&[dout, din]);
                    gemm(dout, n, din, 1.0, g.data(), Trans::Yes, xv.data(), Trans::No, 0.0, dw.data_mut());
                    self.send(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut db = Tensor::zeros(&[dout]);
                        for row in g.data().chunks(dout) {
                            for (d, r) in db.data_mut().iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                        self.send(grads, *b, db);
                    }
                }
            }
            Op::ChannelBias(x, b) => {
                self.send(grads, *x, g.clone());
                if self.ng(*b) {
                    let (_, c, inner) = channel_layout(g.shape());
                    let mut db = Tensor::zeros(&[c]);
                    for (i, chunk) in g.data().chunks(inner).enumerate() {
                        db.data_mut()[i % c] += chunk.iter().sum::<f64>();
                    }
                    self.send(grads, *b, db);
                }
            }
            Op::Conv { x, w, stride, pad } => self.conv_backward(*x, *w, *stride, *pad, g, grads),
            Op::ConvTranspose { x, w, stride, pad } => self.conv_transpose_backward(*x, *w, *stride, *pad, &node.value, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, inner) = channel_layout(g.shape());
                let count = (n * inner) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, (gc, hc)) in g.data().chunks(inner).zip(xhat.data().chunks(inner)).enumerate() {
                    sum_g[i % c] += gc.iter().sum::<f64>();
                    sum_gx[i % c] += gc.iter().zip(hc).map(|(a, b)| a * b).sum::<f64>();
                }
                if self.ng(*gamma) {
                    self.send(grads, *gamma, Tensor::from_vec(&[c], sum_gx.clone()));
                }
                if self.ng(*beta) {
                    self.send(grads, *beta, Tensor::from_vec(&[c], sum_g.clone()));
                }
                if self.ng(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = g.clone();
                    for (i, (dc, hc)) in dx
                        .data_mut()
                        .chunks_mut(inner)
                        .zip(xhat.data().chunks(inner))
                        .enumerate()
                    {
                        let ch = i % c;
                        let s = gam[ch] * inv_std[ch];
                        if *batch_stats {
                            let mg = sum_g[ch] / count;
                            let mgx = sum_gx[ch] / count;
                            for (d, h) in dc.iter_mut().zip(hc) {
                                *d = s * (*d - mg - h * mgx);
                            }
                        } else {
                            dc.iter_mut().for_each(|d| *d *= s);
                        }
                    }
                    self.send(grads, *x, dx);
                }
            }
            Op::Concat(parts) => {
                let n = g.shape()[0];
                let c_total = g.shape()[1];
                let inner: usize = g.shape()[2..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let cp = pv.shape()[1];
                    if self.ng(p) {
                        let mut dp = Vec::with_capacity(pv.len());
                        for i in 0..n {
                            let start = (i * c_total + offset) * inner;
                            dp.extend_from_slice(&g.data()[start..start + cp * inner]);
                        }
                        self.send(grads, p, Tensor::from_vec(pv.shape(), dp));
                    }
                    offset += cp;
                }
            }
            Op::SpatialMean(a) => {
                let av = self.value(*a);
                let (_, _, inner) = channel_layout(av.shape());
                let scale = 1.0 / inner as f64;
                let mut d = Tensor::zeros(av.shape());
                for (chunk, gv) in d.data_mut().chunks_mut(inner).zip(g.data()) {
                    chunk.fill(gv * scale);
                }
                self.send(grads, *a, d);
            }
            Op::ChannelsLast(a) => self.send(grads, *a, permute_channels(g, false)),
            Op::ChannelsFirst(a) => self.send(grads, *a, permute_channels(g, true)),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (n, k, inner) = channel_layout(probs.shape());
                let scale = g.item() / (n * inner) as f64;
                let mut d = probs.clone();
                for s in 0..n {
                    let block = &mut d.data_mut()[s * k * inner..(s + 1) * k * inner];
                    for p in 0..inner {
                        block[targets[s * inner + p] * inner + p] -= 1.0;
                    }
                }
                d.scale_in_place(scale);
                self.send(grads, *logits, d);
            }
            Op::Custom { inputs, f } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let outs = f.backward(&vals, &node.value, g);
                assert_eq!(outs.len(), inputs.len(), "{} returned wrong grad count", f.name());
                for (&v, d) in inputs.iter().zip(outs) {
                    if let Some(d) = d {
                        assert_eq!(d.shape(), self.value(v).shape(), "{} grad shape", f.name());
                        self.send(grads, v, d);
                    }
                }
            }
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (xv, wv) = (self.value(x), self.value(w));
        let &[n, cin, h, wd] = xv.shape() else { unreachable!() };
        let &[cout, _, k, _] = wv.shape() else { unreachable!() };
        let win = Window {
            channels: cin,
            h,
            w: wd,
            kernel: k,
            stride,
            pad,
            out_h: g.shape()[2],
            out_w: g.shape()[3],
        };
        let pos = win.positions();
        let rows = win.rows();
        let mut cols = vec![0.0; rows * pos];
        let mut dw = self.ng(w).then(|| Tensor::zeros(wv.shape()));
        let mut dx = self.ng(x).then(|| Tensor::zeros(xv.shape()));
        let in_stride = cin * h * wd;
        for i in 0..n {
            let gi = &g.data()[i * cout * pos..(i + 1) * cout * pos];
            if let Some(dw) = dw.as_mut() {
                im2col(&win, &xv.data()[i * in_stride..(i + 1) * in_stride], &mut cols);
                gemm(cout, pos, rows, 1.0, gi, Trans::No, &cols, Trans::Yes, 1.0, dw.data_mut());
            }
            if let Some(dx) = dx.as_mut() {
                gemm(rows, cout, pos, 1.0, wv.data(), Trans::Yes, gi, Trans::No, 0.0, &mut cols);
                col2im(&win, &cols, &mut dx.data_mut()[i * in_stride..(i + 1) * in_stride]);
            }
        }
        if let Some(dw) = dw {
            self.send(grads, w, dw);
        }
        if let Some(dx) = dx {
            self.send(grads, x, dx);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_transpose_backward(
        &self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (xv, wv) = (self.value(x), self.value(w));
        let &[n, cin, h, wd] = xv.shape() else { unreachable!() };
        let &[_, cout, k, _] = wv.shape() else { unreachable!() };
        let (oh, ow) = (out.shape()[2], out.shape()[3]);
        let win = Window {
            channels: cout,
            h: oh,
            w: ow,
            kernel: k,
            stride,
            pad,
            out_h: h,
            out_w: wd,
        };
        let pos = win.positions();
        let rows = win.rows();
        let mut cols = vec![0.0; rows * pos];
        let mut dw = self.ng(w).then(|| Tensor::zeros(wv.shape()));
        let mut dx = self.ng(x).then(|| Tensor::zeros(xv.shape()));
        let out_stride = cout * oh * ow;
        for i in 0..n {
            im2col(&win, &g.data()[i * out_stride..(i + 1) * out_stride], &mut cols);
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx.data_mut()[i * cin * pos..(i + 1) * cin * pos];
                gemm(cin, rows, pos, 1.0, wv.data(), Trans::No, &cols, Trans::No, 0.0, dst);
            }
            if let Some(dw) = dw.as_mut() {
                let src = &xv.data()[i * cin * pos..(i + 1) * cin * pos];
                gemm(cin, pos, rows, 1.0, src, Trans::No, &cols, Trans::Yes, 1.0, dw.data_mut());
            }
        }
        if let Some(dw) = dw {
            self.send(grads, w, dw);
        }
        if let Some(dx) = dx {
            self.send(grads, x, dx);
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn permute_channels(t: &Tensor, to_last: bool) -> Tensor {
    let s = t.shape();
    assert_eq!(s.len(), 4, "channel permutation expects a 4-D tensor, got {s:?}");
    let (n, c, h, w) = if to_last {
        (s[0], s[1], s[2], s[3])
    } else {
        (s[0], s[3], s[1], s[2])
    };
    let mut out = vec![0.0; t.len()];
    let src = t.data();
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let first = ((i * c + ch) * h + y) * w + x;
                    let last = ((i * h + y) * w + x) * c + ch;
                    if to_last {
                        out[last] = src[first];
                    } else {
                        out[first] = src[last];
                    }
                }
            }
        }
    }
    let shape = if to_last { [n, h, w, c] } else { [n, c, h, w] };
    Tensor::from_vec(&shape, out)
}
