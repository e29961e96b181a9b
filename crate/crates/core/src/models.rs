//! Problem definitions: regularizer, loss gradient, priors and error metrics.
//!
//! The loss is described through its gradient `ℓ(r, r*; z)` in the
//! prediction `r = xᵀθ`, with `r* = xᵀθ*` the planted prediction and `z` the
//! label noise. Both shipped models are autonomous; the time argument is kept
//! in every signature so time-dependent schedules can be added.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Shape of `ℓ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `ℓ = r - r* - z`.
    Squared,
    /// `ℓ = -y / (1 + e^{y r})`, `y = sign(r* + z)`.
    Logistic,
    /// Logistic loss with `sign` replaced by `tanh(·/eps)`. Differentiable in
    /// `r*`, used to check the Stein estimator against the direct derivative.
    SmoothedLogistic { eps: f64 },
}

/// Law of each coordinate of `θ⁰`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Theta0 {
    Zero,
    Normal { var: f64 },
}

impl Theta0 {
    pub fn second_moment(&self) -> f64 {
        match *self {
            Theta0::Zero => 0.0,
            Theta0::Normal { var } => var,
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.second_moment().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub lambda: f64,
    pub rho2: f64,
    pub sigma2: f64,
    pub theta0: Theta0,
    pub loss: LossKind,
}

fn check_priors(lambda: f64, rho2: f64, sigma2: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return invalid(format!("lambda must be finite and >= 0, got {lambda}"));
    }
    if !(rho2 > 0.0) || !rho2.is_finite() {
        return invalid(format!("rho2 must be finite and > 0, got {rho2}"));
    }
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return invalid(format!("sigma2 must be finite and >= 0, got {sigma2}"));
    }
    Ok(())
}

pub fn ridge_model(lambda: f64, rho2: f64, sigma2: f64) -> Result<ModelSpec> {
    check_priors(lambda, rho2, sigma2)?;
    Ok(ModelSpec {
        name: "ridge".into(),
        lambda,
        rho2,
        sigma2,
        theta0: Theta0::Zero,
        loss: LossKind::Squared,
    })
}

pub fn logistic_model(lambda: f64, rho2: f64, sigma2: f64) -> Result<ModelSpec> {
    check_priors(lambda, rho2, sigma2)?;
    Ok(ModelSpec {
        name: "logistic".into(),
        lambda,
        rho2,
        sigma2,
        theta0: Theta0::Zero,
        loss: LossKind::Logistic,
    })
}

pub fn smoothed_logistic_model(lambda: f64, rho2: f64, sigma2: f64, eps: f64) -> Result<ModelSpec> {
    check_priors(lambda, rho2, sigma2)?;
    if !(eps > 0.0) {
        return invalid(format!("smoothing eps must be > 0, got {eps}"));
    }
    Ok(ModelSpec {
        name: "smoothed_logistic".into(),
        lambda,
        rho2,
        sigma2,
        theta0: Theta0::Zero,
        loss: LossKind::SmoothedLogistic { eps },
    })
}

/// `1 / (1 + e^{-x})` without overflow.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ModelSpec {
    pub fn with_theta0(mut self, theta0: Theta0) -> Result<Self> {
        if let Theta0::Normal { var } = theta0 {
            if !(var >= 0.0) || !var.is_finite() {
                return invalid(format!("theta0 variance must be >= 0, got {var}"));
            }
        }
        self.theta0 = theta0;
        Ok(self)
    }

    /// `h_t(θ) = λθ` for both shipped models.
    pub fn h(&self, _t: f64, theta: f64) -> f64 {
        self.lambda * theta
    }

    pub fn dh(&self, _t: f64, _theta: f64) -> f64 {
        self.lambda
    }

    /// Whether `h` is affine in `θ`, which makes the parameter response
    /// independent of the sample path.
    pub fn h_is_linear(&self) -> bool {
        true
    }

    fn label(&self, rstar: f64, z: f64) -> f64 {
        let s = rstar + z;
        match self.loss {
            LossKind::SmoothedLogistic { eps } => (s / eps).tanh(),
            _ => {
                if s >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }

    pub fn loss_grad(&self, _t: f64, r: f64, rstar: f64, z: f64) -> f64 {
        match self.loss {
            LossKind::Squared => r - rstar - z,
            LossKind::Logistic | LossKind::SmoothedLogistic { .. } => {
                let y = self.label(rstar, z);
                -y * sigmoid(-y * r)
            }
        }
    }

    pub fn dloss_dr(&self, _t: f64, r: f64, rstar: f64, z: f64) -> f64 {
        match self.loss {
            LossKind::Squared => 1.0,
            LossKind::Logistic | LossKind::SmoothedLogistic { .. } => {
                let y = self.label(rstar, z);
                y * y * sigmoid(y * r) * sigmoid(-y * r)
            }
        }
    }

    /// `∂ℓ/∂r*`, or `None` where the loss jumps in `r*`.
    pub fn dloss_drstar(&self, _t: f64, r: f64, rstar: f64, z: f64) -> Option<f64> {
        match self.loss {
            LossKind::Squared => Some(-1.0),
            LossKind::Logistic => None,
            LossKind::SmoothedLogistic { eps } => {
                let y = self.label(rstar, z);
                let (sp, sm) = (sigmoid(y * r), sigmoid(-y * r));
                let dl_dy = -sm + y * r * sp * sm;
                Some(dl_dy * (1.0 - y * y) / eps)
            }
        }
    }

    pub fn smooth_in_rstar(&self) -> bool {
        !matches!(self.loss, LossKind::Logistic)
    }

    /// Sup of `|∂_r ℓ|`.
    pub fn dloss_dr_bound(&self) -> f64 {
        match self.loss {
            LossKind::Squared => 1.0,
            _ => 0.25,
        }
    }

    pub fn is_ridge(&self) -> bool {
        matches!(self.loss, LossKind::Squared)
    }

    pub fn default_metric(&self) -> Metric {
        if self.is_ridge() {
            Metric::Squared
        } else {
            Metric::ZeroOne
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Squared,
    ZeroOne,
}

pub fn evaluate_metric(metric: Metric, r: f64, rstar: f64, z: f64) -> f64 {
    match metric {
        Metric::Squared => (r - rstar - z).powi(2),
        Metric::ZeroOne => {
            let s = rstar + z;
            if r == 0.0 {
                0.5
            } else if s != 0.0 && (r > 0.0) != (s > 0.0) {
                1.0
            } else {
                0.0
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn ridge_examples() {
        let m = ridge_model(0.0, 1.0, 0.01).unwrap();
        assert_eq!(m.loss_grad(0.0, 2.0, 1.0, 0.5), 0.5);
        assert!(m.smooth_in_rstar());
        assert_eq!(m.dloss_drstar(0.0, 1.0, 2.0, 3.0), Some(-1.0));
        let m = ridge_model(0.01, 1.0, 0.01).unwrap();
        assert!((m.h(0.0, 3.0) - 0.03).abs() < 1e-15);
        assert!(ridge_model(0.0, 1.0, -1.0).is_err());
        assert!(ridge_model(-0.1, 1.0, 0.0).is_err());
        assert!(ridge_model(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn logistic_examples() {
        let m = logistic_model(0.01, 1.0, 0.01).unwrap();
        assert_eq!(m.loss_grad(0.0, 0.0, 1.0, 0.0), -0.5);
        assert_eq!(m.loss_grad(0.0, 0.0, -1.0, 0.0), 0.5);
        assert_eq!(m.dloss_dr(0.0, 0.0, 1.0, 0.0), 0.25);
        assert!(!m.smooth_in_rstar());
        assert!(m.dloss_drstar(0.0, 0.0, 1.0, 0.0).is_none());
        assert!(m.loss_grad(0.0, 800.0, -1.0, 0.0).is_finite());
        assert!(m.dloss_dr(0.0, -800.0, -1.0, 0.0) >= 0.0);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(evaluate_metric(Metric::Squared, 2.0, 1.0, 0.5), 0.25);
        assert_eq!(evaluate_metric(Metric::ZeroOne, 1.0, -0.5, 0.0), 1.0);
        assert_eq!(evaluate_metric(Metric::ZeroOne, 0.0, 1.0, 0.0), 0.5);
        assert_eq!(evaluate_metric(Metric::ZeroOne, -1.0, -0.5, 0.1), 0.0);
    }

    proptest! {
        #[test]
        fn ridge_derivatives_are_constant(r in -10.0..10.0f64, rs in -10.0..10.0f64, z in -3.0..3.0f64) {
            let m = ridge_model(0.3, 1.0, 0.1).unwrap();
            prop_assert_eq!(m.dloss_dr(0.0, r, rs, z), 1.0);
            prop_assert_eq!(m.dloss_drstar(0.0, r, rs, z), Some(-1.0));
            // Second derivative in r vanishes.
            let d2 = m.loss_grad(0.0, r + 1.0, rs, z) - 2.0 * m.loss_grad(0.0, r, rs, z)
                + m.loss_grad(0.0, r - 1.0, rs, z);
            prop_assert!(d2.abs() < 1e-12);
            let dh = central(|x| m.h(0.0, x), r);
            prop_assert!((dh - m.dh(0.0, r)).abs() <= 1e-6 * (1.0 + m.dh(0.0, r).abs()));
        }

        #[test]
        fn logistic_derivative_matches_fd(r in -6.0..6.0f64, rs in -3.0..3.0f64, z in -0.3..0.3f64) {
            let m = logistic_model(0.01, 1.0, 0.01).unwrap();
            let a = m.dloss_dr(0.0, r, rs, z);
            let fd = central(|x| m.loss_grad(0.0, x, rs, z), r);
            prop_assert!((a - fd).abs() <= 1e-6 * (1.0 + a.abs()));
            prop_assert!(a > 0.0 && a <= 0.25);
            prop_assert!(m.loss_grad(0.0, r, rs, z).abs() <= 1.0);
        }

        #[test]
        fn logistic_is_quarter_lipschitz(r1 in -8.0..8.0f64, r2 in -8.0..8.0f64, rs in -3.0..3.0f64) {
            let m = logistic_model(0.0, 1.0, 0.0).unwrap();
            let d = (m.loss_grad(0.0, r1, rs, 0.0) - m.loss_grad(0.0, r2, rs, 0.0)).abs();
            prop_assert!(d <= 0.25 * (r1 - r2).abs() + 1e-15);
        }

        #[test]
        fn smoothed_logistic_derivatives_match_fd(r in -4.0..4.0f64, rs in -1.0..1.0f64, z in -0.1..0.1f64) {
            let m = smoothed_logistic_model(0.0, 1.0, 0.01, 0.5).unwrap();
            let a = m.dloss_dr(0.0, r, rs, z);
            let fd = central(|x| m.loss_grad(0.0, x, rs, z), r);
            prop_assert!((a - fd).abs() <= 1e-6 * (1.0 + a.abs()));
            let a = m.dloss_drstar(0.0, r, rs, z).unwrap();
            let fd = central(|x| m.loss_grad(0.0, r, x, z), rs);
            prop_assert!((a - fd).abs() <= 1e-6 * (1.0 + a.abs()));
        }
    }
}
