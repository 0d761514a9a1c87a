//! A two-parameter linear model with closed-form posterior.
//!
//! The state is `u = F(θ) m` with
//!
//! ```text
//! F(θ) = [ θ₂    θ₁  ]
//!        [ θ₁  1 − θ₂ ]
//! ```
//!
//! observed directly, with an identity prior and noise `σ²I`. In weak form this is
//! `A = −I`, `C = F(θ)`, `d = 0`.

use std::sync::Arc;

use nalgebra::{DVector, Matrix2, Vector2};

use crate::bayes::InverseProblem;
use crate::error::{Error, Result};
use crate::linops::check_len;
use crate::model::{check_theta_index, ForwardModel, ModelDims, ObservationData, ThetaVector};
use crate::oracle::{richardson_gradient, GradientReference};
use crate::prior::GaussianPrior;

/// `F(θ)`.
pub fn forward_matrix(theta: &[f64]) -> Matrix2<f64> {
    Matrix2::new(theta[1], theta[0], theta[0], 1.0 - theta[1])
}

fn dforward(j: usize) -> Matrix2<f64> {
    if j == 0 {
        Matrix2::new(0.0, 1.0, 1.0, 0.0)
    } else {
        Matrix2::new(1.0, 0.0, 0.0, -1.0)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TwoByTwoModel;

fn vec2(v: &DVector<f64>) -> Result<Vector2<f64>> {
    check_len("two-by-two vector", 2, v.len())?;
    Ok(Vector2::new(v[0], v[1]))
}

fn dvec(v: Vector2<f64>) -> DVector<f64> {
    DVector::from_column_slice(v.as_slice())
}

fn theta2(theta: &[f64]) -> Result<&[f64]> {
    check_len("two-by-two theta", 2, theta.len())?;
    Ok(theta)
}

impl ForwardModel for TwoByTwoModel {
    fn dims(&self) -> ModelDims {
        ModelDims {
            state: 2,
            parameter: 2,
            observation: 2,
            theta: 2,
        }
    }

    fn theta_names(&self) -> Vec<String> {
        vec!["theta1".into(), "theta2".into()]
    }

    fn apply_state_operator(&self, theta: &[f64], u: &DVector<f64>) -> Result<DVector<f64>> {
        theta2(theta)?;
        Ok(-dvec(vec2(u)?))
    }

    fn solve_state_operator(&self, theta: &[f64], rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.apply_state_operator(theta, rhs)
    }

    fn solve_state_operator_transpose(&self, theta: &[f64], rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.apply_state_operator(theta, rhs)
    }

    fn apply_param_operator(&self, theta: &[f64], m: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(dvec(forward_matrix(theta2(theta)?) * vec2(m)?))
    }

    fn apply_param_operator_transpose(&self, theta: &[f64], p: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(dvec(forward_matrix(theta2(theta)?).transpose() * vec2(p)?))
    }

    fn source(&self, theta: &[f64]) -> Result<DVector<f64>> {
        theta2(theta)?;
        Ok(DVector::zeros(2))
    }

    fn observe(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(dvec(vec2(u)?))
    }

    fn observe_adjoint(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(dvec(vec2(w)?))
    }

    fn apply_state_operator_dtheta(&self, j: usize, theta: &[f64], u: &DVector<f64>) -> Result<DVector<f64>> {
        check_theta_index(j, 2)?;
        theta2(theta)?;
        vec2(u)?;
        Ok(DVector::zeros(2))
    }

    fn apply_state_operator_dtheta_transpose(&self, j: usize, theta: &[f64], p: &DVector<f64>) -> Result<DVector<f64>> {
        self.apply_state_operator_dtheta(j, theta, p)
    }

    fn apply_param_operator_dtheta(&self, j: usize, theta: &[f64], m: &DVector<f64>) -> Result<DVector<f64>> {
        check_theta_index(j, 2)?;
        theta2(theta)?;
        Ok(dvec(dforward(j) * vec2(m)?))
    }

    fn apply_param_operator_dtheta_transpose(&self, j: usize, theta: &[f64], p: &DVector<f64>) -> Result<DVector<f64>> {
        check_theta_index(j, 2)?;
        theta2(theta)?;
        Ok(dvec(dforward(j).transpose() * vec2(p)?))
    }

    fn source_dtheta(&self, j: usize, theta: &[f64]) -> Result<DVector<f64>> {
        check_theta_index(j, 2)?;
        theta2(theta)?;
        Ok(DVector::zeros(2))
    }
}

/// Observations and noise level of a two-by-two study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoByTwoSetup {
    pub u_obs: [f64; 2],
    pub sigma: f64,
}

impl Default for TwoByTwoSetup {
    fn default() -> Self {
        Self {
            u_obs: [0.15, 0.05],
            sigma: 0.1,
        }
    }
}

/// Posterior quantities in closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedFormPosterior {
    pub m_post: Vector2<f64>,
    pub c_post: Matrix2<f64>,
    /// Misfit Hessian `FᵀF/σ²`.
    pub hessian: Matrix2<f64>,
}

impl TwoByTwoSetup {
    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "noise level {} must be positive",
                self.sigma
            )));
        }
        if self.u_obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("two-by-two observations"));
        }
        Ok(())
    }

    pub fn data(&self) -> Result<ObservationData> {
        self.validate()?;
        ObservationData::isotropic(DVector::from_column_slice(&self.u_obs), self.sigma)
    }

    /// Model, identity prior, and data wired together.
    pub fn inverse_problem(&self) -> Result<InverseProblem> {
        InverseProblem::new(
            Arc::new(TwoByTwoModel),
            Arc::new(GaussianPrior::identity(2)?),
            Arc::new(self.data()?),
        )
    }

    /// θ on the unit box with nominal point `(0.5, 0.5)`.
    pub fn theta_template(&self) -> ThetaVector {
        ThetaVector::new(
            TwoByTwoModel.theta_names(),
            vec![0.5, 0.5],
            vec![(0.0, 1.0), (0.0, 1.0)],
        )
        .expect("valid theta template")
    }

    pub fn posterior_closed_form(&self, theta: &[f64]) -> Result<ClosedFormPosterior> {
        self.validate()?;
        theta2(theta)?;
        let f = forward_matrix(theta);
        let s2 = self.sigma * self.sigma;
        let hessian = f.transpose() * f / s2;
        let c_post = (hessian + Matrix2::identity())
            .try_inverse()
            .ok_or_else(|| Error::SingularOperator("two-by-two posterior precision".into()))?;
        let m_post = c_post * f.transpose() * Vector2::new(self.u_obs[0], self.u_obs[1]) / s2;
        Ok(ClosedFormPosterior {
            m_post,
            c_post,
            hessian,
        })
    }

    /// KL divergence from the prior to the posterior.
    pub fn kld_closed_form(&self, theta: &[f64]) -> Result<f64> {
        let post = self.posterior_closed_form(theta)?;
        let precision = post.hessian + Matrix2::identity();
        Ok(0.5 * (precision.determinant().ln() - (post.hessian * post.c_post).trace() + post.m_post.norm_squared()))
    }

    /// Expected information gain `½ ln det(I + FᵀF/σ²)`.
    pub fn eig_closed_form(&self, theta: &[f64]) -> Result<f64> {
        let post = self.posterior_closed_form(theta)?;
        Ok(0.5 * (post.hessian + Matrix2::identity()).determinant().ln())
    }

    /// Richardson-extrapolated finite-difference gradient of the closed-form
    /// KLD, one-sided where the stencil would leave `[0, 1]²`.
    pub fn kld_gradient_reference(&self, theta: &[f64], h: f64) -> Result<GradientReference> {
        richardson_gradient(|t| self.kld_closed_form(t), theta, h, &[(0.0, 1.0), (0.0, 1.0)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nominal_closed_form() {
        let s = TwoByTwoSetup::default();
        let post = s.posterior_closed_form(&[0.0, 0.0]).unwrap();
        assert!((post.c_post - Matrix2::new(1.0, 0.0, 0.0, 1.0 / 101.0)).amax() < 1e-15);
        assert!((post.m_post - Vector2::new(0.0, 5.0 / 101.0)).amax() < 1e-15);
        let kld = s.kld_closed_form(&[0.0, 0.0]).unwrap();
        assert!((kld - 1.813_736_1).abs() < 1e-7);
        assert!((s.eig_closed_form(&[0.0, 0.0]).unwrap() - 2.307_560_3).abs() < 1e-7);
    }

    #[test]
    fn gradient_reference_matches_analytic_derivative_of_eig() {
        // d/dθ₂ of ½ ln det(I + FᵀF/σ²) at θ = (0, 0.3), computed from the Hessian
        let s = TwoByTwoSetup::default();
        let g = richardson_gradient(|t| s.eig_closed_form(t), &[0.0, 0.3], 1e-3, &[(0.0, 1.0); 2]).unwrap();
        // FᵀF = diag(θ₂², (1−θ₂)²) at θ₁ = 0
        let t: f64 = 0.3;
        let want = 0.5
            * (2.0 * t * 100.0 / (1.0 + 100.0 * t * t) - 2.0 * (1.0 - t) * 100.0 / (1.0 + 100.0 * (1.0 - t).powi(2)));
        assert!((g.grad[1] - want).abs() < 1e-8);
        assert_eq!(g.one_sided, vec![true, false]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let bad = TwoByTwoSetup {
            sigma: 0.0,
            ..Default::default()
        };
        assert!(bad.inverse_problem().is_err());
        assert!(TwoByTwoModel.apply_param_operator(&[0.0], &DVector::zeros(2)).is_err());
        assert!(TwoByTwoModel
            .c_form_dtheta(2, &DVector::zeros(2), &DVector::zeros(2), &[0.0, 0.0])
            .is_err());
    }
}
