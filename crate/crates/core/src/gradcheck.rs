//! Finite-difference suites for the geometry and augmenter operations.
//!
//! Each operation is checked on random small instances. Outputs are reduced
//! to a scalar through a random projection, the analytic gradient of every
//! input is compared with central differences, and the error of an instance
//! is the largest entrywise deviation relative to the larger infinity norm
//! of the two gradients.

use std::fmt;
use std::str::FromStr;

use onlineaug_tape::fd::numerical_grad;
use onlineaug_tape::{Function, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::augmenters::astn::{Astn, AstnConfig, AstnNoise};
use crate::augmenters::vae::{kl_graph, DeformVae, DvaeConfig, PerturbVae, PvaeConfig};
use crate::error::{invalid, Error, Result};
use crate::geometry::ops;
use crate::nn::Mode;
use crate::params::{Bound, ParamSet};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 20;
/// Instances with a sampling coordinate this close (in pixels) to a pixel
/// boundary are redrawn, since bilinear sampling has a kink there.
const KINK_MARGIN: f64 = 1e-3;
/// Same for relu inputs this close to 0.
const RELU_MARGIN: f64 = 1e-4;
const MAX_DRAWS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    All,
    Geometry,
    Augmenters,
    /// A deliberately wrong gradient; the report must fail.
    Corrupted,
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "geometry" => Ok(Self::Geometry),
            "augmenters" => Ok(Self::Augmenters),
            "corrupted" => Ok(Self::Corrupted),
            _ => Err(Error::Config(format!(
                "unknown gradcheck component {s:?} (all, geometry, augmenters, corrupted)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub worst: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub seed: u64,
    pub ops: Vec<OpReport>,
}

impl Report {
    pub fn passed(&self) -> bool {
        !self.ops.is_empty() && self.ops.iter().all(|o| o.passed)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>9} {:>12}  status", "operation", "instances", "worst err")?;
        for o in &self.ops {
            let status = if o.passed { "ok" } else { "FAIL" };
            writeln!(f, "{:<28} {:>9} {:>12.3e}  {status}", o.op, o.instances, o.worst)?;
        }
        write!(f, "{}", if self.passed() { "all operations passed" } else { "gradient check FAILED" })
    }
}

/// Gradients smaller than this (in infinity norm) are compared in absolute
/// terms, since central differences cannot resolve a relative error there.
pub const SCALE_FLOOR: f64 = 1e-4;

/// `max|a - n| / max(|a|_inf, |n|_inf, SCALE_FLOOR)`.
pub fn gradient_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let scale = analytic.max_abs().max(numeric.max_abs()).max(SCALE_FLOOR);
    analytic.max_abs_diff(numeric) / scale
}

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Vec<Var>> + 'a;

fn projected(g: &mut Graph, outs: &[Var], proj: &[Tensor]) -> Var {
    let mut total = None;
    for (&o, p) in outs.iter().zip(proj) {
        let pv = g.constant(p.clone());
        let prod = g.mul(o, pv);
        let s = g.sum(prod);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s),
        });
    }
    total.expect("at least one output")
}

/// Worst relative error over the inputs of one instance.
pub fn instance_error(inputs: &[Tensor], build: &Build, rng: &mut impl Rng) -> Result<f64> {
    let eval = |xs: &[Tensor], proj: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x)).collect();
        let outs = build(&mut g, &vars)?;
        let loss = projected(&mut g, &outs, proj);
        let grads = g.backward(loss);
        let gs = vars.iter().zip(xs).map(|(&v, x)| grads.get_or_zeros(v, x)).collect();
        Ok((g.value(loss).item(), gs))
    };
    let proj: Vec<Tensor> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let outs = build(&mut g, &vars)?;
        outs.iter()
            .map(|&o| Tensor::from_fn(g.value(o).shape(), |_| rng.random_range(-1.0..1.0)))
            .collect()
    };
    let (_, analytic) = eval(inputs, &proj)?;
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let mut failed = None;
        let numeric = numerical_grad(
            |xi| {
                let mut xs = inputs.to_vec();
                xs[i] = xi.clone();
                match eval(&xs, &proj) {
                    Ok((v, _)) => v,
                    Err(e) => {
                        failed = Some(e);
                        f64::NAN
                    }
                }
            },
            &inputs[i],
            FD_STEP,
        );
        if let Some(e) = failed {
            return Err(e);
        }
        let err = gradient_error(a, &numeric);
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    Ok(worst)
}

/// Runs `instances` draws of one operation. `draw` returns `None` to reject
/// an instance.
fn suite(
    op: &str,
    instances: usize,
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Result<Option<Vec<Tensor>>>,
    build: &Build,
) -> Result<OpReport> {
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut draws = 0;
    while done < instances {
        draws += 1;
        if draws > MAX_DRAWS {
            return Err(invalid(format!("{op}: could not draw {instances} usable instances")));
        }
        let Some(inputs) = draw(rng)? else { continue };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        build(&mut g, &vars)?;
        if g.relu_margin() < RELU_MARGIN {
            continue;
        }
        worst = worst.max(instance_error(&inputs, build, rng)?);
        done += 1;
    }
    Ok(OpReport {
        op: op.to_string(),
        instances,
        worst,
        passed: worst <= TOLERANCE,
    })
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Smallest distance, in pixels, from any sampling coordinate to a pixel
/// boundary.
fn grid_margin(grid: &Tensor, h: usize, w: usize) -> f64 {
    grid.data()
        .chunks(2)
        .flat_map(|c| [(c[0] + 1.0) * 0.5 * (w - 1) as f64, (c[1] + 1.0) * 0.5 * (h - 1) as f64])
        .map(|u| (u - u.round()).abs())
        .fold(f64::INFINITY, f64::min)
}

/// A random affine row near the identity with determinant well away from 0.
fn random_affine(rng: &mut impl Rng, n: usize) -> Tensor {
    let mut v = Vec::with_capacity(6 * n);
    for _ in 0..n {
        let s = rng.random_range(0.7..1.3);
        let r: f64 = rng.random_range(-0.6..0.6);
        v.extend_from_slice(&[
            s * r.cos() + rng.random_range(-0.1..0.1),
            -s * r.sin() + rng.random_range(-0.1..0.1),
            rng.random_range(-0.3..0.3),
            s * r.sin() + rng.random_range(-0.1..0.1),
            s * r.cos() + rng.random_range(-0.1..0.1),
            rng.random_range(-0.3..0.3),
        ]);
    }
    Tensor::from_vec(&[n, 6], v)
}

fn dims(rng: &mut impl Rng) -> (usize, usize, usize, usize) {
    (
        rng.random_range(1..=2),
        rng.random_range(1..=2),
        rng.random_range(2..=8),
        rng.random_range(2..=8),
    )
}

fn affine_grid_of(theta: &Tensor, h: usize, w: usize) -> Tensor {
    let mut g = Graph::new();
    let t = g.constant(theta.clone());
    let grid = ops::affine_grid(&mut g, t, h, w);
    g.value(grid).clone()
}

fn inverse_of(theta: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let t = g.constant(theta.clone());
    let inv = ops::invert_affine(&mut g, t)?;
    Ok(g.value(inv).clone())
}

fn geometry_suites(n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<OpReport>> {
    let mut out = Vec::new();
    let size = std::cell::Cell::new((1, 1));
    out.push(suite(
        "affine_grid",
        n,
        rng,
        |r| {
            let (k, _, h, w) = dims(r);
            size.set((h, w));
            Ok(Some(vec![random_affine(r, k)]))
        },
        &|g, v| {
            let (h, w) = size.get();
            Ok(vec![ops::affine_grid(g, v[0], h, w)])
        },
    )?);
    out.push(suite(
        "grid_sample_bilinear",
        n,
        rng,
        |r| {
            let (k, c, h, w) = dims(r);
            let (oh, ow) = (r.random_range(1..=8), r.random_range(1..=8));
            let grid = uniform(r, &[k, oh, ow, 2], -1.2, 1.2);
            if grid_margin(&grid, h, w) < KINK_MARGIN {
                return Ok(None);
            }
            Ok(Some(vec![uniform(r, &[k, c, h, w], -1.0, 1.0), grid]))
        },
        &|g, v| Ok(vec![ops::grid_sample(g, v[0], v[1])?]),
    )?);
    out.push(suite(
        "invert_affine",
        n,
        rng,
        |r| {
            let k = r.random_range(1..=3);
            Ok(Some(vec![random_affine(r, k)]))
        },
        &|g, v| Ok(vec![ops::invert_affine(g, v[0])?]),
    )?);
    out.push(suite(
        "double_cycle_loss",
        n,
        rng,
        |r| {
            let (k, c, h, w) = dims(r);
            let theta = random_affine(r, k);
            let fwd = affine_grid_of(&theta, h, w);
            let inv = affine_grid_of(&inverse_of(&theta)?, h, w);
            // the second warp samples at coordinates that depend on the first
            // only through theta, so both grids cover every kink location
            if grid_margin(&fwd, h, w).min(grid_margin(&inv, h, w)) < KINK_MARGIN {
                return Ok(None);
            }
            Ok(Some(vec![uniform(r, &[k, c, h, w], -1.0, 1.0), theta]))
        },
        &|g, v| Ok(vec![ops::double_cycle_loss(g, v[0], v[1])?]),
    )?);
    out.push(suite(
        "smoothness_loss",
        n,
        rng,
        |r| {
            let (k, _, h, w) = dims(r);
            Ok(Some(vec![uniform(r, &[k, h, w, 2], -0.5, 0.5)]))
        },
        &|g, v| Ok(vec![ops::smoothness_loss(g, v[0])]),
    )?);
    out.push(suite(
        "delta_to_grid",
        n,
        rng,
        |r| {
            let (k, _, h, w) = dims(r);
            Ok(Some(vec![uniform(r, &[k, h, w, 2], -0.5, 0.5)]))
        },
        &|g, v| Ok(vec![ops::delta_to_grid(g, v[0])]),
    )?);
    Ok(out)
}

/// Random parameters around a fresh initialization, with the zero output
/// head replaced so the augmenter moves its input.
fn jitter(ps: &ParamSet, rng: &mut impl Rng, head: &[&str], head_std: f64) -> Vec<Tensor> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    ps.iter()
        .map(|(name, t)| {
            let std = if head.iter().any(|h| name.ends_with(h)) { head_std } else { 0.05 };
            let data = t.data().iter().map(|x| x + std * normal.sample(rng)).collect();
            Tensor::from_vec(t.shape(), data)
        })
        .collect()
}

fn small_astn() -> AstnConfig {
    AstnConfig {
        hidden: 4,
        hidden_layers: 2,
        dropout: 0.5,
        ..AstnConfig::default()
    }
}

fn astn_suite(n: usize, rng: &mut ChaCha8Rng, mode: Mode) -> Result<OpReport> {
    let astn = Astn::new(&small_astn(), rng);
    let np = astn.params.len();
    let draw_noise = |r: &mut ChaCha8Rng, k: usize| -> AstnNoise {
        let mut noise = astn.sample_noise(k, r, mode);
        if mode == Mode::Eval {
            noise.dropout.clear();
        }
        noise
    };
    // noise lives outside the inputs, so it is redrawn with the instance and
    // captured through this cell
    // batch statistics over very few samples are badly conditioned
    let k = match mode {
        Mode::Train => 6,
        Mode::Eval => 2,
    };
    let current = std::cell::RefCell::new(draw_noise(rng, k));
    let name = match mode {
        Mode::Train => "astn_transform(train)",
        Mode::Eval => "astn_transform(eval)",
    };
    suite(
        name,
        n,
        rng,
        |r| {
            let (_, c, h, w) = dims(r);
            let mut inputs = jitter(&astn.params, r, &["astn.head.weight"], 0.1);
            inputs.push(uniform(r, &[k, c, h, w], -1.0, 1.0));
            let noise = draw_noise(r, k);
            let mut probe = astn.clone();
            probe.params.tensors_mut().clone_from_slice(&inputs[..np]);
            let affines = probe.affines(&noise, mode)?;
            let theta = Tensor::from_vec(&[k, 6], affines.iter().flat_map(|a| a.to_row_major()).collect());
            if affines.iter().any(|a| a.det().abs() < 0.2) {
                return Ok(None);
            }
            let fwd = affine_grid_of(&theta, h, w);
            let inv = affine_grid_of(&inverse_of(&theta)?, h, w);
            if grid_margin(&fwd, h, w).min(grid_margin(&inv, h, w)) < KINK_MARGIN {
                return Ok(None);
            }
            *current.borrow_mut() = noise;
            Ok(Some(inputs))
        },
        &|g, v| {
            let p = Bound::from_vars(v[..np].to_vec());
            let out = astn.transform_graph(g, &p, v[np], &current.borrow(), mode)?;
            Ok(vec![out.x_fwd, out.x_inv, out.cycle])
        },
    )
}

fn dvae_suite(n: usize, rng: &mut ChaCha8Rng) -> Result<OpReport> {
    let cfg = DvaeConfig {
        base_width: 2,
        hidden: 8,
        latent: 3,
        ..DvaeConfig::default()
    };
    let size = 8;
    let c = 1;
    let vae = DeformVae::new(&cfg, c, size, rng)?;
    let np = vae.net.params.len();
    let eps = std::cell::RefCell::new(Tensor::zeros(&[2, cfg.latent]));
    suite(
        "dvae_augment",
        n,
        rng,
        |r| {
            let k = 2;
            let mut inputs = jitter(&vae.net.params, r, &["dec.head.weight"], 0.05);
            let x = uniform(r, &[k, c, size, size], -1.0, 1.0);
            let e = vae.net.sample_eps(k, r);
            let mut probe = vae.clone();
            probe.net.params.tensors_mut().clone_from_slice(&inputs);
            let aug = probe.augment(&crate::geometry::ImageBatch::new(x.clone())?, &e, None)?;
            if grid_margin(aug.grid.tensor(), size, size) < KINK_MARGIN {
                return Ok(None);
            }
            inputs.push(x);
            *eps.borrow_mut() = e;
            Ok(Some(inputs))
        },
        &|g, v| {
            let p = Bound::from_vars(v[..np].to_vec());
            let out = vae.augment_graph(g, &p, v[np], &eps.borrow())?;
            Ok(vec![out.x_aug, out.reg])
        },
    )
}

fn pvae_suite(n: usize, rng: &mut ChaCha8Rng) -> Result<OpReport> {
    let cfg = PvaeConfig {
        base_width: 2,
        hidden: 8,
        latent: 3,
        ..PvaeConfig::default()
    };
    let size = 8;
    let c = 2;
    let vae = PerturbVae::new(&cfg, c, size, rng)?;
    let np = vae.net.params.len();
    let eps = std::cell::RefCell::new(Tensor::zeros(&[2, cfg.latent]));
    suite(
        "pvae_augment",
        n,
        rng,
        |r| {
            let k = 2;
            let mut inputs = jitter(&vae.net.params, r, &["dec.head.weight"], 0.1);
            inputs.push(uniform(r, &[k, c, size, size], -1.0, 1.0));
            *eps.borrow_mut() = vae.net.sample_eps(k, r);
            Ok(Some(inputs))
        },
        &|g, v| {
            let p = Bound::from_vars(v[..np].to_vec());
            let out = vae.augment_graph(g, &p, v[np], &eps.borrow())?;
            Ok(vec![out.x_aug, out.reg])
        },
    )
}

fn augmenter_suites(n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<OpReport>> {
    let mut out = vec![
        astn_suite(n, rng, Mode::Eval)?,
        astn_suite(n, rng, Mode::Train)?,
        dvae_suite(n, rng)?,
        pvae_suite(n, rng)?,
    ];
    out.push(suite(
        "kl_diag_gaussian",
        n,
        rng,
        |r| {
            let (k, d) = (r.random_range(1..=4), r.random_range(1..=6));
            Ok(Some(vec![uniform(r, &[k, d], -2.0, 2.0), uniform(r, &[k, d], -3.0, 3.0)]))
        },
        &|g, v| Ok(vec![kl_graph(g, v[0], v[1])]),
    )?);
    out.push(suite(
        "reparameterize",
        n,
        rng,
        |r| {
            let (k, d) = (r.random_range(1..=4), r.random_range(1..=6));
            Ok(Some(vec![
                uniform(r, &[k, d], -2.0, 2.0),
                uniform(r, &[k, d], -3.0, 3.0),
                Tensor::from_fn(&[k, d], |_| StandardNormal.sample(r)),
            ]))
        },
        &|g, v| {
            let half = g.scale(v[1], 0.5);
            let std = g.exp(half);
            let noise = g.mul(std, v[2]);
            Ok(vec![g.add(v[0], noise)])
        },
    )?);
    Ok(out)
}

/// Elementwise square whose backward pass is off by 0.1%.
struct CorruptedSquare;

impl Function for CorruptedSquare {
    fn name(&self) -> &'static str {
        "corrupted_square"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        inputs[0].map(|x| x * x)
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(inputs[0].zip_map(grad, |x, g| 2.002 * x * g))]
    }
}

fn corrupted_suite(n: usize, rng: &mut ChaCha8Rng) -> Result<OpReport> {
    suite(
        "corrupted_square",
        n,
        rng,
        |r| Ok(Some(vec![uniform(r, &[3, 4], -1.0, 1.0)])),
        &|g, v| Ok(vec![g.custom(&[v[0]], Box::new(CorruptedSquare))]),
    )
}

/// Runs the selected suites with `instances` draws per operation.
pub fn run(component: Component, seed: u64, instances: usize) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ops = Vec::new();
    if matches!(component, Component::All | Component::Geometry) {
        ops.extend(geometry_suites(instances, &mut rng)?);
    }
    if matches!(component, Component::All | Component::Augmenters) {
        ops.extend(augmenter_suites(instances, &mut rng)?);
    }
    if component == Component::Corrupted {
        ops.push(corrupted_suite(instances, &mut rng)?);
    }
    Ok(Report { seed, ops })
}
