//! Toy bilevel problems with exact meta-gradients.
//!
//! The finite-difference side runs on the autodiff tape; the exact side
//! differentiates through the unrolled virtual step with forward-mode dual
//! numbers over a hand-written backward pass, so the two share no code.

use std::ops::{Add, Mul, Sub};

use onlineaug_tape::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::Result;
use crate::meta::{meta_gradient, Bilevel, TrainEval};
use crate::params::ParamSet;

trait Num: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> {
    fn c(v: f64) -> Self;
    fn tanh(self) -> Self;
}

impl Num for f64 {
    fn c(v: f64) -> Self {
        v
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

#[derive(Clone, Copy, Debug)]
struct Dual {
    v: f64,
    d: f64,
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, d: self.d + o.d }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, d: self.d - o.d }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: self.d * o.v + self.v * o.d,
        }
    }
}

impl Num for Dual {
    fn c(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        Dual {
            v: t,
            d: self.d * (1.0 - t * t),
        }
    }
}

/// `L_tr = (theta - phi)^2`, `L_val = theta^2`.
#[derive(Clone, Debug)]
pub struct ScalarToy {
    pub phi: f64,
}

impl ScalarToy {
    /// `dL_val(theta') / dphi` with `theta' = theta - 2 eta (theta - phi)`.
    pub fn exact(&self, theta: f64, eta: f64) -> f64 {
        let tv = theta - 2.0 * eta * (theta - self.phi);
        2.0 * tv * 2.0 * eta
    }
}

fn scalar_set(v: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.push("v", Tensor::from_vec(&[1], vec![v]));
    p
}

impl Bilevel for ScalarToy {
    fn train(&mut self, theta: &ParamSet) -> Result<TrainEval> {
        let t = theta.tensors()[0].item();
        let r = t - self.phi;
        Ok(TrainEval {
            loss: r * r,
            grad_theta: scalar_set(2.0 * r),
            sens: scalar_set(-2.0 * r),
        })
    }

    fn val(&mut self, theta: &ParamSet) -> Result<(f64, ParamSet)> {
        let t = theta.tensors()[0].item();
        Ok((t * t, scalar_set(2.0 * t)))
    }
}

pub const MLP_IN: usize = 2;
pub const MLP_HIDDEN: usize = 8;

/// Regression MLP `2 -> 8 (tanh) -> 1` whose training inputs pass through a
/// learnable affine map `x A^T + t` (the "augmenter", 6 parameters).
#[derive(Clone, Debug)]
pub struct MlpToy {
    pub x_tr: Vec<[f64; MLP_IN]>,
    pub y_tr: Vec<f64>,
    pub x_val: Vec<[f64; MLP_IN]>,
    pub y_val: Vec<f64>,
    /// `[A (row-major 2x2), t]`
    pub phi: ParamSet,
    pub theta: ParamSet,
}

impl MlpToy {
    pub fn new(seed: u64, points: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = |x: &[f64; 2]| (1.5 * x[0]).sin() + 0.5 * x[1] * x[1];
        let draw = |rng: &mut ChaCha8Rng| -> Vec<[f64; 2]> {
            (0..points)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect()
        };
        let x_tr = draw(&mut rng);
        let x_val = draw(&mut rng);
        let y_tr = x_tr.iter().map(target).collect();
        let y_val = x_val.iter().map(target).collect();
        let n = Normal::new(0.0, 0.6).expect("finite std");
        let mut theta = ParamSet::new();
        theta.push("w1", Tensor::from_fn(&[MLP_HIDDEN, MLP_IN], |_| n.sample(&mut rng)));
        theta.push("b1", Tensor::from_fn(&[MLP_HIDDEN], |_| n.sample(&mut rng)));
        theta.push("w2", Tensor::from_fn(&[1, MLP_HIDDEN], |_| n.sample(&mut rng)));
        theta.push("b2", Tensor::from_fn(&[1], |_| n.sample(&mut rng)));
        let mut phi = ParamSet::new();
        let a = [1.0, 0.0, 0.0, 1.0];
        phi.push("a", Tensor::from_fn(&[MLP_IN, MLP_IN], |i| a[i] + 0.2 * n.sample(&mut rng)));
        phi.push("t", Tensor::from_fn(&[MLP_IN], |_| 0.2 * n.sample(&mut rng)));
        Self {
            x_tr,
            y_tr,
            x_val,
            y_val,
            phi,
            theta,
        }
    }

    pub fn num_theta(&self) -> usize {
        self.theta.numel()
    }

    fn tape_loss(&self, theta: &ParamSet, with_phi: bool) -> (f64, ParamSet, ParamSet) {
        let (xs, ys) = if with_phi {
            (&self.x_tr, &self.y_tr)
        } else {
            (&self.x_val, &self.y_val)
        };
        let n = xs.len();
        let mut g = Graph::new();
        let tb = theta.bind(&mut g);
        let fb = self.phi.bind(&mut g);
        let mut x = g.constant(Tensor::from_vec(&[n, MLP_IN], xs.iter().flatten().copied().collect()));
        if with_phi {
            x = g.linear(x, fb.vars()[0], Some(fb.vars()[1]));
        }
        let v = tb.vars();
        let h = g.linear(x, v[0], Some(v[1]));
        let h = g.tanh(h);
        let pred = g.linear(h, v[2], Some(v[3]));
        let y = g.constant(Tensor::from_vec(&[n, 1], ys.clone()));
        let d = g.sub(pred, y);
        let loss = g.mean_square(d);
        let grads = g.backward(loss);
        (
            g.value(loss).item(),
            theta.collect_grads(&tb, &grads),
            self.phi.collect_grads(&fb, &grads),
        )
    }

    /// Exact `dL_val(theta - eta * grad_theta L_tr) / dphi`.
    pub fn exact(&self, eta: f64) -> Vec<f64> {
        let theta = self.theta.flatten();
        let phi = self.phi.flatten();
        (0..phi.len())
            .map(|j| {
                let phi_d: Vec<Dual> = phi
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| Dual {
                        v,
                        d: if i == j { 1.0 } else { 0.0 },
                    })
                    .collect();
                let theta_d: Vec<Dual> = theta.iter().map(|&v| Dual::c(v)).collect();
                let xs: Vec<[Dual; 2]> = self.x_tr.iter().map(|x| augment(x, &phi_d)).collect();
                let (_, grad) = mlp_loss_grad(&theta_d, &xs, &self.y_tr);
                let tv: Vec<Dual> = theta_d
                    .iter()
                    .zip(&grad)
                    .map(|(&t, &g)| t - Dual::c(eta) * g)
                    .collect();
                let xv: Vec<[Dual; 2]> = self.x_val.iter().map(|x| [Dual::c(x[0]), Dual::c(x[1])]).collect();
                mlp_loss_grad(&tv, &xv, &self.y_val).0.d
            })
            .collect()
    }
}

fn augment<T: Num>(x: &[f64; 2], phi: &[T]) -> [T; 2] {
    let (x0, x1) = (T::c(x[0]), T::c(x[1]));
    [phi[0] * x0 + phi[1] * x1 + phi[4], phi[2] * x0 + phi[3] * x1 + phi[5]]
}

/// Mean squared error and its gradient for flat `theta = [w1, b1, w2, b2]`.
fn mlp_loss_grad<T: Num>(theta: &[T], xs: &[[T; 2]], ys: &[f64]) -> (T, Vec<T>) {
    let (w1, rest) = theta.split_at(MLP_HIDDEN * MLP_IN);
    let (b1, rest) = rest.split_at(MLP_HIDDEN);
    let (w2, b2) = rest.split_at(MLP_HIDDEN);
    let n = xs.len() as f64;
    let mut loss = T::c(0.0);
    let mut grad = vec![T::c(0.0); theta.len()];
    let (gw1, grest) = grad.split_at_mut(MLP_HIDDEN * MLP_IN);
    let (gb1, grest) = grest.split_at_mut(MLP_HIDDEN);
    let (gw2, gb2) = grest.split_at_mut(MLP_HIDDEN);
    for (x, &y) in xs.iter().zip(ys) {
        let mut h = [T::c(0.0); MLP_HIDDEN];
        let mut pred = b2[0];
        for k in 0..MLP_HIDDEN {
            h[k] = (w1[k * 2] * x[0] + w1[k * 2 + 1] * x[1] + b1[k]).tanh();
            pred = pred + w2[k] * h[k];
        }
        let r = pred - T::c(y);
        loss = loss + r * r * T::c(1.0 / n);
        let dpred = r * T::c(2.0 / n);
        gb2[0] = gb2[0] + dpred;
        for k in 0..MLP_HIDDEN {
            gw2[k] = gw2[k] + dpred * h[k];
            let dz = dpred * w2[k] * (T::c(1.0) - h[k] * h[k]);
            gb1[k] = gb1[k] + dz;
            gw1[k * 2] = gw1[k * 2] + dz * x[0];
            gw1[k * 2 + 1] = gw1[k * 2 + 1] + dz * x[1];
        }
    }
    (loss, grad)
}

impl Bilevel for MlpToy {
    fn train(&mut self, theta: &ParamSet) -> Result<TrainEval> {
        let (loss, grad_theta, sens) = self.tape_loss(theta, true);
        Ok(TrainEval { loss, grad_theta, sens })
    }

    fn val(&mut self, theta: &ParamSet) -> Result<(f64, ParamSet)> {
        let (loss, grad, _) = self.tape_loss(theta, false);
        Ok((loss, grad))
    }
}

/// Exact versus finite-difference meta-gradient on one toy case.
#[derive(Clone, Debug, Serialize)]
pub struct MetaComparison {
    pub case: String,
    pub exact: Vec<f64>,
    pub approx: Vec<f64>,
    pub cosine: f64,
    pub rel_l2: f64,
}

impl MetaComparison {
    pub fn new(case: impl Into<String>, exact: Vec<f64>, approx: Vec<f64>) -> Self {
        let dot: f64 = exact.iter().zip(&approx).map(|(a, b)| a * b).sum();
        let ne = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
        let na = approx.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff = exact.iter().zip(&approx).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let (cosine, rel_l2) = if ne == 0.0 && na == 0.0 {
            (1.0, 0.0)
        } else {
            (dot / (ne * na).max(f64::MIN_POSITIVE), diff / ne.max(f64::MIN_POSITIVE))
        };
        Self {
            case: case.into(),
            exact,
            approx,
            cosine,
            rel_l2,
        }
    }

    pub fn passes(&self, min_cosine: f64, max_rel: f64) -> bool {
        self.cosine >= min_cosine && self.rel_l2 <= max_rel
    }
}

pub fn scalar_case(theta: f64, phi: f64, eta: f64, fd_scale: f64) -> Result<MetaComparison> {
    let mut toy = ScalarToy { phi };
    let exact = toy.exact(theta, eta);
    let m = meta_gradient(&mut toy, &scalar_set(theta), eta, fd_scale)?;
    let name = format!("scalar(theta={theta:.3},phi={phi:.3},eta={eta})");
    Ok(MetaComparison::new(name, vec![exact], m.sens.flatten()))
}

pub fn mlp_case(seed: u64, eta: f64, fd_scale: f64) -> Result<MetaComparison> {
    let mut toy = MlpToy::new(seed, 8);
    let exact = toy.exact(eta);
    let theta = toy.theta.clone();
    let m = meta_gradient(&mut toy, &theta, eta, fd_scale)?;
    Ok(MetaComparison::new(format!("mlp(seed={seed},eta={eta})"), exact, m.sens.flatten()))
}

/// The comparison table: three scalar toys, three MLP toys and both toys
/// with `eta = 0`.
pub fn standard_cases(seed: u64) -> Result<Vec<MetaComparison>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..3 {
        let theta = rng.random_range(-2.0..2.0);
        let phi = rng.random_range(-1.0..1.0);
        out.push(scalar_case(theta, phi, 0.1, 0.01)?);
    }
    for k in 0..3 {
        out.push(mlp_case(rng.random(), [0.1, 0.2, 0.3][k], 0.01)?);
    }
    out.push(scalar_case(1.0, 0.3, 0.0, 0.01)?);
    out.push(mlp_case(seed, 0.0, 0.01)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_toy_hand_value() {
        assert!((ScalarToy { phi: 0.0 }.exact(1.0, 0.1) - 0.32).abs() < 1e-15);
        let c = scalar_case(1.0, 0.0, 0.1, 0.01).unwrap();
        assert!((c.approx[0] - 0.32).abs() < 1e-9);
    }

    #[test]
    fn exact_matches_central_difference_of_unrolled_objective() {
        let toy = MlpToy::new(5, 8);
        let eta = 0.3;
        let exact = toy.exact(eta);
        let phi = toy.phi.flatten();
        let theta = toy.theta.flatten();
        let objective = |phi: &[f64]| {
            let xs: Vec<[f64; 2]> = toy.x_tr.iter().map(|x| augment(x, phi)).collect();
            let (_, g) = mlp_loss_grad(&theta, &xs, &toy.y_tr);
            let tv: Vec<f64> = theta.iter().zip(&g).map(|(t, g)| t - eta * g).collect();
            mlp_loss_grad(&tv, &toy.x_val, &toy.y_val).0
        };
        for j in 0..phi.len() {
            let (mut p, mut m) = (phi.clone(), phi.clone());
            p[j] += 1e-6;
            m[j] -= 1e-6;
            let fd = (objective(&p) - objective(&m)) / 2e-6;
            assert!((fd - exact[j]).abs() < 1e-7, "{j}: {fd} vs {}", exact[j]);
        }
    }
}
