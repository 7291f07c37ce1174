//! Layer building blocks over [`ParamSet`], including batch normalization
//! with several independent banks (one set of affine parameters and running
//! statistics per bank).

use onlineaug_tape::{BatchStats, Graph, Tensor, Var};
use rand::Rng;

use crate::params::{he_normal, uniform_fan_in, Bound, ParamId, ParamSet};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, name: &str, din: usize, dout: usize) -> Self {
        let w = ps.push(format!("{name}.weight"), uniform_fan_in(rng, &[dout, din], din));
        let b = ps.push(format!("{name}.bias"), uniform_fan_in(rng, &[dout], din));
        Self { w, b }
    }

    /// Layer with all-zero weights and the given bias.
    pub fn with_constant(ps: &mut ParamSet, name: &str, din: usize, bias: &[f64]) -> Self {
        let dout = bias.len();
        let w = ps.push(format!("{name}.weight"), Tensor::zeros(&[dout, din]));
        let b = ps.push(format!("{name}.bias"), Tensor::from_vec(&[dout], bias.to_vec()));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.linear(x, p.get(self.w), Some(p.get(self.b)))
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let w = ps.push(format!("{name}.weight"), he_normal(rng, &[cout, cin, kernel, kernel], fan_in));
        let b = bias.then(|| ps.push(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self {
            w,
            b,
            stride,
            pad: kernel / 2,
        }
    }

    /// Zero-initialized convolution (weights and bias).
    pub fn zeros(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        let w = ps.push(format!("{name}.weight"), Tensor::zeros(&[cout, cin, kernel, kernel]));
        let b = Some(ps.push(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self {
            w,
            b,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.get(self.w), self.b.map(|b| p.get(b)), self.stride, self.pad)
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }
}

/// 3x3 transposed convolution; stride 2 doubles the spatial size.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

impl ConvTranspose {
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let w = ps.push(format!("{name}.weight"), he_normal(rng, &[cin, cout, 3, 3], cin * 9));
        let b = ps.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b, stride }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let out_pad = usize::from(self.stride > 1);
        g.conv_transpose2d(x, p.get(self.w), Some(p.get(self.b)), self.stride, 1, out_pad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    fn update(&mut self, observed: &BatchStats, momentum: f64) {
        for (r, o) in self.mean.iter_mut().zip(&observed.mean) {
            *r = (1.0 - momentum) * *r + momentum * o;
        }
        for (r, o) in self.var.iter_mut().zip(&observed.var) {
            *r = (1.0 - momentum) * *r + momentum * o;
        }
    }
}

/// Running statistics of every batch-norm layer of a network, per bank.
/// Indexed `[layer][bank]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnTable {
    layers: Vec<Vec<RunningStats>>,
}

impl BnTable {
    pub fn layers(&self) -> &[Vec<RunningStats>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut Vec<Vec<RunningStats>> {
        &mut self.layers
    }

    pub fn banks(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    /// Folds the statistics observed during one forward pass into `bank`.
    pub fn commit(&mut self, bank: usize, observed: &[(usize, BatchStats)]) {
        for (layer, stats) in observed {
            self.layers[*layer][bank].update(stats, BN_MOMENTUM);
        }
    }
}

/// How normalization layers behave during one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and record them.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

/// Per-pass state threaded through a network's forward.
pub struct NormCtx<'a> {
    pub mode: Mode,
    pub bank: usize,
    table: &'a BnTable,
    observed: Vec<(usize, BatchStats)>,
}

impl<'a> NormCtx<'a> {
    pub fn new(mode: Mode, bank: usize, table: &'a BnTable) -> Self {
        Self {
            mode,
            bank,
            table,
            observed: Vec::new(),
        }
    }

    pub fn into_observed(self) -> Vec<(usize, BatchStats)> {
        self.observed
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    layer: usize,
    gamma: Vec<ParamId>,
    beta: Vec<ParamId>,
}

impl BatchNorm {
    pub fn new(ps: &mut ParamSet, table: &mut BnTable, name: &str, channels: usize, banks: usize) -> Self {
        let mut gamma = Vec::with_capacity(banks);
        let mut beta = Vec::with_capacity(banks);
        for bank in 0..banks {
            gamma.push(ps.push(format!("{name}.bank{bank}.gamma"), Tensor::ones(&[channels])));
            beta.push(ps.push(format!("{name}.bank{bank}.beta"), Tensor::zeros(&[channels])));
        }
        table.layers.push(vec![RunningStats::new(channels); banks]);
        Self {
            layer: table.layers.len() - 1,
            gamma,
            beta,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, ctx: &mut NormCtx) -> Var {
        let (gamma, beta) = (p.get(self.gamma[ctx.bank]), p.get(self.beta[ctx.bank]));
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, BN_EPS);
                ctx.observed.push((self.layer, stats));
                y
            }
            Mode::Eval => {
                let rs = &ctx.table.layers[self.layer][ctx.bank];
                g.batch_norm_eval(x, gamma, beta, &rs.mean, &rs.var, BN_EPS)
            }
        }
    }
}
