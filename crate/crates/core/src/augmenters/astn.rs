//! Noise-conditioned augmentation spatial transformer.
//!
//! A small MLP maps one Gaussian scalar per sample to a 2x3 affine matrix.
//! Every image is warped by the matrix and by its inverse, and the double
//! cycle-consistency loss measures what the pair of warps destroys.

use onlineaug_tape::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{self, ops, AffineParams, GridMap, ImageBatch, MaskBatch, SINGULAR_TOLERANCE};
use crate::nn::{BatchNorm, BnTable, Linear, Mode, NormCtx};
use crate::params::{Bound, ParamSet};
use onlineaug_tape::BatchStats;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AstnConfig {
    /// Weight of the double cycle-consistency regularizer.
    pub lambda_cycle: f64,
    /// Weight of the adversarial term.
    pub beta: f64,
    /// Weight of the meta-gradient term.
    pub meta_weight: f64,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub dropout: f64,
    /// Use batch statistics in the MLP's normalization layers while training.
    pub bn_train_mode: bool,
}

impl Default for AstnConfig {
    fn default() -> Self {
        Self {
            lambda_cycle: 0.1,
            beta: 0.1,
            meta_weight: 1.0,
            hidden: 8,
            hidden_layers: 5,
            dropout: 0.5,
            bn_train_mode: true,
        }
    }
}

/// Stochastic inputs of one A-STN pass: the conditioning noise and the
/// dropout masks (already scaled by `1 / (1 - p)`), empty when dropout is off.
#[derive(Clone, Debug, PartialEq)]
pub struct AstnNoise {
    pub z: Tensor,
    pub dropout: Vec<Tensor>,
}

impl AstnNoise {
    /// Noise without dropout.
    pub fn from_z(z: Tensor) -> Self {
        Self { z, dropout: vec![] }
    }
}

/// Graph nodes produced by one transform pass.
pub struct AstnGraph {
    pub theta: Var,
    pub theta_inv: Var,
    pub fwd_grid: Var,
    pub inv_grid: Var,
    pub x_fwd: Var,
    pub x_inv: Var,
    /// Mean double cycle-consistency loss over the batch (unweighted).
    pub cycle: Var,
    pub observed: Vec<(usize, BatchStats)>,
}

/// Values produced by [`Astn::transform`].
#[derive(Clone, Debug)]
pub struct AstnOutput {
    pub x_fwd: ImageBatch,
    pub x_inv: ImageBatch,
    pub affines: Vec<AffineParams>,
    pub fwd_grid: GridMap,
    pub inv_grid: GridMap,
    pub mask_fwd: Option<MaskBatch>,
    pub mask_inv: Option<MaskBatch>,
}

#[derive(Clone, Debug)]
pub struct Astn {
    cfg: AstnConfig,
    hidden: Vec<(Linear, BatchNorm)>,
    head: Linear,
    pub params: ParamSet,
    pub bn: BnTable,
}

const IDENTITY_ROW: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

impl Astn {
    pub fn new(cfg: &AstnConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let mut bn = BnTable::default();
        let mut hidden = Vec::with_capacity(cfg.hidden_layers);
        let mut din = 1;
        for i in 0..cfg.hidden_layers {
            let lin = Linear::new(&mut params, rng, &format!("astn.fc{i}"), din, cfg.hidden);
            let norm = BatchNorm::new(&mut params, &mut bn, &format!("astn.bn{i}"), cfg.hidden, 1);
            hidden.push((lin, norm));
            din = cfg.hidden;
        }
        let head = Linear::with_constant(&mut params, "astn.head", din, &IDENTITY_ROW);
        Self {
            cfg: cfg.clone(),
            hidden,
            head,
            params,
            bn,
        }
    }

    pub fn config(&self) -> &AstnConfig {
        &self.cfg
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn sample_noise(&self, n: usize, rng: &mut impl Rng, mode: Mode) -> AstnNoise {
        let z = Tensor::from_fn(&[n, 1], |_| StandardNormal.sample(rng));
        let keep = 1.0 - self.cfg.dropout;
        let dropout = if mode == Mode::Train && self.cfg.dropout > 0.0 {
            (0..self.hidden.len())
                .map(|_| {
                    Tensor::from_fn(&[n, self.cfg.hidden], |_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                })
                .collect()
        } else {
            vec![]
        };
        AstnNoise { z, dropout }
    }

    fn norm_mode(&self, mode: Mode) -> Mode {
        if mode == Mode::Train && self.cfg.bn_train_mode {
            Mode::Train
        } else {
            Mode::Eval
        }
    }

    /// Raw MLP output `[n, 6]` before any degeneracy handling.
    fn mlp(&self, g: &mut Graph, p: &Bound, noise: &AstnNoise, mode: Mode) -> Result<(Var, Vec<(usize, BatchStats)>)> {
        let n = noise.z.shape()[0];
        if noise.z.shape() != [n, 1] || n == 0 {
            return Err(invalid(format!("A-STN noise must be [n, 1], got {:?}", noise.z.shape())));
        }
        let mut ctx = NormCtx::new(self.norm_mode(mode), 0, &self.bn);
        let mut h = g.constant(noise.z.clone());
        for (i, (lin, norm)) in self.hidden.iter().enumerate() {
            h = lin.forward(g, p, h);
            h = norm.forward(g, p, h, &mut ctx);
            h = g.relu(h);
            if let Some(mask) = noise.dropout.get(i) {
                let m = g.constant(mask.clone());
                h = g.mul(h, m);
            }
        }
        let theta = self.head.forward(g, p, h);
        Ok((theta, ctx.into_observed()))
    }

    /// Evaluates the affine matrices without building gradients.
    pub fn affines(&self, noise: &AstnNoise, mode: Mode) -> Result<Vec<AffineParams>> {
        let mut g = Graph::new();
        let p = self.params.bind_const(&mut g);
        let (theta, _) = self.mlp(&mut g, &p, noise, mode)?;
        g.value(theta).data().chunks(6).map(AffineParams::from_row_major).collect()
    }

    /// Redraws the conditioning noise of samples whose transform is
    /// near-singular. Done once; remaining degenerate samples are blended
    /// toward the identity inside [`Astn::transform_graph`].
    pub fn resample_degenerate(&self, noise: &mut AstnNoise, rng: &mut impl Rng, mode: Mode) -> Result<usize> {
        let affines = self.affines(noise, mode)?;
        let mut redrawn = 0;
        for (i, a) in affines.iter().enumerate() {
            if a.det().abs() < SINGULAR_TOLERANCE {
                noise.z.data_mut()[i] = StandardNormal.sample(rng);
                redrawn += 1;
            }
        }
        Ok(redrawn)
    }

    pub fn transform_graph(&self, g: &mut Graph, p: &Bound, x: Var, noise: &AstnNoise, mode: Mode) -> Result<AstnGraph> {
        let xs = g.value(x).shape().to_vec();
        if xs.len() != 4 || xs[0] != noise.z.shape()[0] {
            return Err(invalid(format!(
                "A-STN needs one noise scalar per image: images {xs:?}, noise {:?}",
                noise.z.shape()
            )));
        }
        let (raw, observed) = self.mlp(g, p, noise, mode)?;
        let theta = blend_degenerate(g, raw);
        let theta_inv = ops::invert_affine(g, theta)?;
        let fwd_grid = ops::affine_grid(g, theta, xs[2], xs[3]);
        let inv_grid = ops::affine_grid(g, theta_inv, xs[2], xs[3]);
        let (cycle, x_fwd, x_inv) = ops::cycle_pair(g, x, fwd_grid, inv_grid)?;
        Ok(AstnGraph {
            theta,
            theta_inv,
            fwd_grid,
            inv_grid,
            x_fwd,
            x_inv,
            cycle,
            observed,
        })
    }

    /// Warps `x` (and optionally its mask) by the generated transforms and their inverses.
    pub fn transform(&self, x: &ImageBatch, noise: &AstnNoise, mask: Option<&MaskBatch>, mode: Mode) -> Result<AstnOutput> {
        let mut g = Graph::new();
        let p = self.params.bind_const(&mut g);
        let xv = g.constant(x.tensor().clone());
        let out = self.transform_graph(&mut g, &p, xv, noise, mode)?;
        let fwd_grid = GridMap::new(g.value(out.fwd_grid).clone())?;
        let inv_grid = GridMap::new(g.value(out.inv_grid).clone())?;
        let (mask_fwd, mask_inv) = match mask {
            Some(m) => (
                Some(geometry::grid_sample_nearest(m, &fwd_grid)?),
                Some(geometry::grid_sample_nearest(m, &inv_grid)?),
            ),
            None => (None, None),
        };
        Ok(AstnOutput {
            x_fwd: ImageBatch::new(g.value(out.x_fwd).clone())?,
            x_inv: ImageBatch::new(g.value(out.x_inv).clone())?,
            affines: g
                .value(out.theta)
                .data()
                .chunks(6)
                .map(AffineParams::from_row_major)
                .collect::<Result<_>>()?,
            fwd_grid,
            inv_grid,
            mask_fwd,
            mask_inv,
        })
    }

    /// Mean double cycle-consistency loss of the generated transforms.
    pub fn regularizer(&self, x: &ImageBatch, noise: &AstnNoise, mode: Mode) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind_const(&mut g);
        let xv = g.constant(x.tensor().clone());
        let out = self.transform_graph(&mut g, &p, xv, noise, mode)?;
        Ok(g.value(out.cycle).item())
    }
}

/// Smallest `t` in `[0, 1]` such that `(1 - t) * A + t * I` has
/// `|det| >= tolerance` for the linear part `A = [[a, b], [c, d]]`.
pub fn identity_blend(a: f64, b: f64, c: f64, d: f64, tolerance: f64) -> f64 {
    if (a * d - b * c).abs() >= tolerance {
        return 0.0;
    }
    // with s = 1 - t: det = q2 s^2 + q1 s + 1
    let q2 = (a - 1.0) * (d - 1.0) - b * c;
    let q1 = a + d - 2.0;
    let target = tolerance * (1.0 + 1e-6);
    let mut best_s: f64 = 0.0;
    for rhs in [target, -target] {
        // q2 s^2 + q1 s + (1 - rhs) = 0
        let c0 = 1.0 - rhs;
        let roots: Vec<f64> = if q2.abs() < 1e-300 {
            if q1.abs() < 1e-300 {
                vec![]
            } else {
                vec![-c0 / q1]
            }
        } else {
            let disc = q1 * q1 - 4.0 * q2 * c0;
            if disc < 0.0 {
                vec![]
            } else {
                let r = disc.sqrt();
                vec![(-q1 + r) / (2.0 * q2), (-q1 - r) / (2.0 * q2)]
            }
        };
        for s in roots {
            if (0.0..1.0).contains(&s) {
                best_s = best_s.max(s);
            }
        }
    }
    // |det| >= target on [0, best_s]'s far side is not guaranteed by the
    // roots alone when they are inexact; walk down until it holds
    let det_at = |s: f64| q2 * s * s + q1 * s + 1.0;
    while best_s > 0.0 && det_at(best_s).abs() < tolerance {
        best_s = (best_s - 1e-9).max(0.0);
    }
    1.0 - best_s
}

/// Blends near-singular rows toward the identity by the minimal amount.
/// The blend factor is treated as a constant for differentiation.
fn blend_degenerate(g: &mut Graph, theta: Var) -> Var {
    let rows: Vec<[f64; 6]> = g
        .value(theta)
        .data()
        .chunks(6)
        .map(|r| [r[0], r[1], r[2], r[3], r[4], r[5]])
        .collect();
    let ts: Vec<f64> = rows
        .iter()
        .map(|r| identity_blend(r[0], r[1], r[3], r[4], SINGULAR_TOLERANCE))
        .collect();
    if ts.iter().all(|&t| t == 0.0) {
        return theta;
    }
    let n = rows.len();
    let mut keep = Vec::with_capacity(n * 6);
    let mut shift = Vec::with_capacity(n * 6);
    for &t in &ts {
        keep.extend_from_slice(&[1.0 - t; 6]);
        shift.extend(IDENTITY_ROW.iter().map(|v| v * t));
    }
    let keep = g.constant(Tensor::from_vec(&[n, 6], keep));
    let shift = g.constant(Tensor::from_vec(&[n, 6], shift));
    let scaled = g.mul(theta, keep);
    g.add(scaled, shift)
}
