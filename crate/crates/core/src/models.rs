//! Desk-scale target networks with switchable batch-norm banks.
//!
//! Bank 0 is the main bank (clean data and evaluation); bank `i + 1` serves
//! the views of the `i`-th active augmenter.

use onlineaug_tape::{BatchStats, Graph, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{BatchNorm, BnTable, Conv, ConvTranspose, Mode, NormCtx};
use crate::nn::Linear;
use crate::params::{Bound, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Four conv-BN-ReLU blocks, global average pooling, linear classifier.
    Cnn,
    /// Three-level U-Net producing per-pixel logits.
    Unet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Block widths of the CNN.
    pub cnn_widths: [usize; 4],
    /// Width of the U-Net's first level (doubled per level).
    pub unet_base: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Cnn,
            cnn_widths: [16, 32, 64, 64],
            unet_base: 8,
        }
    }
}

#[derive(Clone, Debug)]
struct Cbr {
    conv: Conv,
    bn: BatchNorm,
}

impl Cbr {
    #[allow(clippy::too_many_arguments)]
    fn new(
        ps: &mut ParamSet,
        table: &mut BnTable,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        banks: usize,
    ) -> Self {
        Self {
            conv: Conv::new(ps, rng, &format!("{name}.conv"), cin, cout, 3, stride, false),
            bn: BatchNorm::new(ps, table, &format!("{name}.bn"), cout, banks),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var, ctx: &mut NormCtx) -> Var {
        let h = self.conv.forward(g, p, x);
        let h = self.bn.forward(g, p, h, ctx);
        g.relu(h)
    }
}

#[derive(Clone, Debug)]
enum Body {
    Cnn {
        blocks: Vec<Cbr>,
        fc: Linear,
    },
    Unet {
        e1: Cbr,
        e2: Cbr,
        e3: Cbr,
        up2: ConvTranspose,
        d2: Cbr,
        up1: ConvTranspose,
        d1: Cbr,
        head: Conv,
    },
}

#[derive(Clone, Debug)]
pub struct TargetModel {
    kind: ModelKind,
    in_channels: usize,
    classes: usize,
    body: Body,
    pub params: ParamSet,
    pub bn: BnTable,
}

impl TargetModel {
    /// `banks` is one plus the number of active augmenters.
    pub fn new(cfg: &ModelConfig, in_channels: usize, classes: usize, banks: usize, rng: &mut impl Rng) -> Result<Self> {
        if banks == 0 || classes < 2 || in_channels == 0 {
            return Err(invalid(format!(
                "target model needs banks >= 1, classes >= 2, channels >= 1 (got {banks}, {classes}, {in_channels})"
            )));
        }
        let mut ps = ParamSet::new();
        let mut table = BnTable::default();
        let body = match cfg.kind {
            ModelKind::Cnn => {
                let strides = [1, 2, 2, 2];
                let mut cin = in_channels;
                let mut blocks = Vec::with_capacity(4);
                for (i, (&w, &s)) in cfg.cnn_widths.iter().zip(&strides).enumerate() {
                    blocks.push(Cbr::new(&mut ps, &mut table, rng, &format!("block{i}"), cin, w, s, banks));
                    cin = w;
                }
                let fc = Linear::new(&mut ps, rng, "fc", cin, classes);
                Body::Cnn { blocks, fc }
            }
            ModelKind::Unet => {
                let b = cfg.unet_base;
                Body::Unet {
                    e1: Cbr::new(&mut ps, &mut table, rng, "enc1", in_channels, b, 1, banks),
                    e2: Cbr::new(&mut ps, &mut table, rng, "enc2", b, 2 * b, 2, banks),
                    e3: Cbr::new(&mut ps, &mut table, rng, "enc3", 2 * b, 4 * b, 2, banks),
                    up2: ConvTranspose::new(&mut ps, rng, "up2", 4 * b, 2 * b, 2),
                    d2: Cbr::new(&mut ps, &mut table, rng, "dec2", 4 * b, 2 * b, 1, banks),
                    up1: ConvTranspose::new(&mut ps, rng, "up1", 2 * b, b, 2),
                    d1: Cbr::new(&mut ps, &mut table, rng, "dec1", 2 * b, b, 1, banks),
                    head: Conv::new(&mut ps, rng, "head", b, classes, 1, 1, true),
                }
            }
        };
        Ok(Self {
            kind: cfg.kind,
            in_channels,
            classes,
            body,
            params: ps,
            bn: table,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn banks(&self) -> usize {
        self.bn.banks()
    }

    /// Logits `[n, classes]` (CNN) or `[n, classes, h, w]` (U-Net), plus the
    /// batch statistics observed in training mode.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, mode: Mode, bank: usize) -> Result<(Var, Vec<(usize, BatchStats)>)> {
        let s = g.value(x).shape();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(invalid(format!("target expects [n, {}, h, w], got {s:?}", self.in_channels)));
        }
        if bank >= self.banks() {
            return Err(invalid(format!("bank {bank} out of range ({} banks)", self.banks())));
        }
        if self.kind == ModelKind::Unet && (s[2] % 4 != 0 || s[3] % 4 != 0) {
            return Err(invalid(format!("U-Net input sides must be multiples of 4, got {s:?}")));
        }
        let mut ctx = NormCtx::new(mode, bank, &self.bn);
        let out = match &self.body {
            Body::Cnn { blocks, fc } => {
                let mut h = x;
                for b in blocks {
                    h = b.forward(g, p, h, &mut ctx);
                }
                let pooled = g.spatial_mean(h);
                fc.forward(g, p, pooled)
            }
            Body::Unet {
                e1,
                e2,
                e3,
                up2,
                d2,
                up1,
                d1,
                head,
            } => {
                let h1 = e1.forward(g, p, x, &mut ctx);
                let h2 = e2.forward(g, p, h1, &mut ctx);
                let h3 = e3.forward(g, p, h2, &mut ctx);
                let u2 = up2.forward(g, p, h3);
                let c2 = g.concat_channels(&[u2, h2]);
                let m2 = d2.forward(g, p, c2, &mut ctx);
                let u1 = up1.forward(g, p, m2);
                let c1 = g.concat_channels(&[u1, h1]);
                let m1 = d1.forward(g, p, c1, &mut ctx);
                head.forward(g, p, m1)
            }
        };
        Ok((out, ctx.into_observed()))
    }

    /// Architecture identifier: parameter names and shapes.
    pub fn fingerprint(&self) -> String {
        format!(
            "{}:{}",
            match self.kind {
                ModelKind::Cnn => "cnn",
                ModelKind::Unet => "unet",
            },
            self.params.layout_fingerprint()
        )
    }
}
