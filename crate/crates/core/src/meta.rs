//! Virtual steps and the finite-difference meta-gradient.
//!
//! The meta-gradient of `L_val(theta - eta * grad_theta L_tr(theta, phi))`
//! with respect to `phi` is approximated by a central difference of
//! `grad_phi L_tr` around `theta` along the validation gradient.

use crate::error::{Error, Result};
use crate::params::ParamSet;

/// Norm below which the validation gradient counts as zero.
pub const MIN_VAL_GRAD_NORM: f64 = 1e-12;

/// Training-loss evaluation at one target parameter point.
#[derive(Clone, Debug)]
pub struct TrainEval {
    pub loss: f64,
    /// Gradient with respect to the target parameters.
    pub grad_theta: ParamSet,
    /// Cotangent of the training loss with respect to whatever carries the
    /// augmenter's influence (its parameters, or the augmented views).
    pub sens: ParamSet,
}

/// A pair of losses coupled through the target parameters.
pub trait Bilevel {
    fn train(&mut self, theta: &ParamSet) -> Result<TrainEval>;

    /// Sensitivity alone; override when it is cheaper than [`Bilevel::train`].
    fn train_sens(&mut self, theta: &ParamSet) -> Result<ParamSet> {
        Ok(self.train(theta)?.sens)
    }

    /// Validation loss and its gradient with respect to the target parameters.
    fn val(&mut self, theta: &ParamSet) -> Result<(f64, ParamSet)>;
}

#[derive(Clone, Debug)]
pub struct MetaGrad {
    /// Meta-gradient in sensitivity space.
    pub sens: ParamSet,
    /// Validation loss at the virtually updated target.
    pub val_loss: f64,
    pub val_grad_norm: f64,
    /// Finite-difference radius actually used (0 when skipped).
    pub fd_step: f64,
}

/// `theta - eta * grad`, plain gradient descent.
pub fn virtual_step(theta: &ParamSet, grad: &ParamSet, eta: f64) -> Result<ParamSet> {
    if !grad.all_finite() {
        return Err(Error::Divergent("non-finite training gradient in virtual step".into()));
    }
    Ok(theta.added(-eta, grad))
}

pub fn meta_gradient<P: Bilevel>(p: &mut P, theta: &ParamSet, eta: f64, fd_scale: f64) -> Result<MetaGrad> {
    let at = p.train(theta)?;
    meta_gradient_from(p, theta, &at, eta, fd_scale)
}

/// Same as [`meta_gradient`] reusing a training evaluation at `theta`.
pub fn meta_gradient_from<P: Bilevel>(
    p: &mut P,
    theta: &ParamSet,
    at: &TrainEval,
    eta: f64,
    fd_scale: f64,
) -> Result<MetaGrad> {
    let theta_v = virtual_step(theta, &at.grad_theta, eta)?;
    let (val_loss, g_val) = p.val(&theta_v)?;
    if !val_loss.is_finite() || !g_val.all_finite() {
        return Err(Error::Divergent("non-finite validation gradient".into()));
    }
    let norm = g_val.norm();
    if norm < MIN_VAL_GRAD_NORM || eta == 0.0 {
        return Ok(MetaGrad {
            sens: at.sens.zeros_like(),
            val_loss,
            val_grad_norm: norm,
            fd_step: 0.0,
        });
    }
    let eps = fd_scale / norm;
    let plus = p.train_sens(&theta.added(eps, &g_val))?;
    let minus = p.train_sens(&theta.added(-eps, &g_val))?;
    let mut sens = plus;
    sens.axpy(-1.0, &minus);
    sens.scale(-eta / (2.0 * eps));
    if !sens.all_finite() {
        return Err(Error::Divergent("non-finite meta-gradient".into()));
    }
    Ok(MetaGrad {
        sens,
        val_loss,
        val_grad_norm: norm,
        fd_step: eps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use onlineaug_tape::Tensor;

    fn scalar(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("v", Tensor::from_vec(&[1], vec![v]));
        p
    }

    #[test]
    fn virtual_step_examples() {
        // L = (theta - 1)^2 at theta = 0
        let t = scalar(0.0);
        let g = scalar(2.0 * (0.0 - 1.0));
        assert!((virtual_step(&t, &g, 0.1).unwrap().tensors()[0].item() - 0.2).abs() < 1e-15);
        assert_eq!(virtual_step(&t, &g, 0.0).unwrap(), t);
        assert!(virtual_step(&t, &scalar(f64::NAN), 0.1).is_err());
    }
}
