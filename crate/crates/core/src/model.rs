//! Forward-model contract for affine-in-`m` problems in the weak form
//!
//! ```text
//! a(p, u; θ) + c(p, m; θ) + d(p; θ) = 0   for all test vectors p
//! ```
//!
//! In coefficient form `a(p,u) = pᵀA(θ)u`, `c(p,m) = pᵀC(θ)m`, `d(p) = pᵀd(θ)`,
//! so the state is `u = −A⁻¹(Cm + d)`. All forms are linear in every argument
//! except θ, which may enter smoothly in any way; models supply the θ-partials of
//! the three operators, from which the form derivatives follow.
//!
//! The four canonical solves (state, adjoint, incremental state, incremental
//! adjoint) are free functions here and are the only places that touch the
//! [`SolveCounter`].

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::linops::{check_len, SolveCounter};

/// Auxiliary parameters with names, nominal values, and a box `[lo, hi]` per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    names: Vec<String>,
    values: Vec<f64>,
    nominal: Vec<f64>,
    bounds: Vec<(f64, f64)>,
}

impl ThetaVector {
    /// Values start at the nominal point.
    pub fn new(names: Vec<String>, nominal: Vec<f64>, bounds: Vec<(f64, f64)>) -> Result<Self> {
        if names.len() != nominal.len() || names.len() != bounds.len() {
            return Err(Error::InvalidInput(format!(
                "theta names/nominal/bounds lengths differ: {}/{}/{}",
                names.len(),
                nominal.len(),
                bounds.len()
            )));
        }
        for (i, name) in names.iter().enumerate() {
            if names[..i].contains(name) {
                return Err(Error::InvalidInput(format!("duplicate theta name `{name}`")));
            }
        }
        for (name, &(lo, hi)) in names.iter().zip(&bounds) {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidInput(format!("invalid box [{lo}, {hi}] for `{name}`")));
            }
        }
        if nominal.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("theta nominal"));
        }
        Ok(Self {
            names,
            values: nominal.clone(),
            nominal,
            bounds,
        })
    }

    /// Names `theta1..thetaN`, unbounded-in-practice box.
    pub fn unnamed(values: &[f64]) -> Self {
        let names = (1..=values.len()).map(|i| format!("theta{i}")).collect();
        Self {
            names,
            values: values.to_vec(),
            nominal: values.to_vec(),
            bounds: vec![(f64::MIN, f64::MAX); values.len()],
        }
    }

    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        check_len("theta values", self.values.len(), values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("theta values"));
        }
        Ok(Self {
            values: values.to_vec(),
            ..self.clone()
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nominal(&self) -> &[f64] {
        &self.nominal
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn in_box(&self) -> bool {
        self.values
            .iter()
            .zip(&self.bounds)
            .all(|(&v, &(lo, hi))| v >= lo && v <= hi)
    }

    pub fn check_in_box(&self) -> Result<()> {
        for ((name, &v), &(lo, hi)) in self.names.iter().zip(&self.values).zip(&self.bounds) {
            if !(v >= lo && v <= hi) {
                return Err(Error::InvalidInput(format!(
                    "theta `{name}` = {v} outside its box [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

/// Dimensions of the discrete spaces of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub state: usize,
    pub parameter: usize,
    pub observation: usize,
    pub theta: usize,
}

/// Measurement vector and diagonal noise covariance `Γ_noise = diag(σ_k²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationData {
    pub u_obs: DVector<f64>,
    pub noise_variance: DVector<f64>,
}

impl ObservationData {
    pub fn new(u_obs: DVector<f64>, noise_variance: DVector<f64>) -> Result<Self> {
        check_len("noise variance", u_obs.len(), noise_variance.len())?;
        if noise_variance.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidInput(
                "noise variances must be positive and finite".into(),
            ));
        }
        if u_obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observations"));
        }
        Ok(Self { u_obs, noise_variance })
    }

    /// Homoscedastic noise `σ²I`.
    pub fn isotropic(u_obs: DVector<f64>, sigma: f64) -> Result<Self> {
        let n = u_obs.len();
        Self::new(u_obs, DVector::from_element(n, sigma * sigma))
    }

    pub fn len(&self) -> usize {
        self.u_obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u_obs.is_empty()
    }

    /// `Γ_noise⁻¹ w`.
    pub fn apply_noise_precision(&self, w: &DVector<f64>) -> DVector<f64> {
        w.component_div(&self.noise_variance)
    }
}

/// A discretized affine-in-`m` forward model.
///
/// Implementations are immutable per θ-assembly and must tolerate concurrent
/// calls; any factorization cache is internal.
pub trait ForwardModel: Send + Sync {
    fn dims(&self) -> ModelDims;

    /// Default parameter names, in θ order.
    fn theta_names(&self) -> Vec<String>;

    /// `A(θ) u` as a dual state vector.
    fn apply_state_operator(&self, theta: &[f64], u: &DVector<f64>) -> Result<DVector<f64>>;

    /// Solves `A(θ) x = rhs`.
    fn solve_state_operator(&self, theta: &[f64], rhs: &DVector<f64>) -> Result<DVector<f64>>;

    /// Solves `A(θ)ᵀ x = rhs`.
    fn solve_state_operator_transpose(&self, theta: &[f64], rhs: &DVector<f64>) -> Result<DVector<f64>>;

    /// `C(θ) m` as a dual state vector.
    fn apply_param_operator(&self, theta: &[f64], m: &DVector<f64>) -> Result<DVector<f64>>;

    /// `C(θ)ᵀ p` as a dual parameter vector.
    fn apply_param_operator_transpose(&self, theta: &[f64], p: &DVector<f64>) -> Result<DVector<f64>>;

    /// The load vector `d(θ)`.
    fn source(&self, theta: &[f64]) -> Result<DVector<f64>>;

    /// Observation operator `Q u`.
    fn observe(&self, u: &DVector<f64>) -> Result<DVector<f64>>;

    /// `Qᵀ w` as a dual state vector.
    fn observe_adjoint(&self, w: &DVector<f64>) -> Result<DVector<f64>>;

    /// `∂A/∂θ_j u`.
    fn apply_state_operator_dtheta(&self, j: usize, theta: &[f64], u: &DVector<f64>) -> Result<DVector<f64>>;

    /// `(∂A/∂θ_j)ᵀ p`.
    fn apply_state_operator_dtheta_transpose(&self, j: usize, theta: &[f64], p: &DVector<f64>) -> Result<DVector<f64>>;

    /// `∂C/∂θ_j m`.
    fn apply_param_operator_dtheta(&self, j: usize, theta: &[f64], m: &DVector<f64>) -> Result<DVector<f64>>;

    /// `(∂C/∂θ_j)ᵀ p`.
    fn apply_param_operator_dtheta_transpose(&self, j: usize, theta: &[f64], p: &DVector<f64>) -> Result<DVector<f64>>;

    /// `∂d/∂θ_j`.
    fn source_dtheta(&self, j: usize, theta: &[f64]) -> Result<DVector<f64>>;

    fn a_form_dtheta(&self, j: usize, p: &DVector<f64>, u: &DVector<f64>, theta: &[f64]) -> Result<f64> {
        Ok(p.dot(&self.apply_state_operator_dtheta(j, theta, u)?))
    }

    fn c_form_dtheta(&self, j: usize, p: &DVector<f64>, m: &DVector<f64>, theta: &[f64]) -> Result<f64> {
        Ok(p.dot(&self.apply_param_operator_dtheta(j, theta, m)?))
    }

    fn d_form_dtheta(&self, j: usize, p: &DVector<f64>, theta: &[f64]) -> Result<f64> {
        Ok(p.dot(&self.source_dtheta(j, theta)?))
    }

    /// Dual parameter vector of the functional `m ↦ ∂c/∂θ_j (p, m; θ)`.
    fn c_form_dtheta_dual(&self, j: usize, p: &DVector<f64>, theta: &[f64]) -> Result<DVector<f64>> {
        self.apply_param_operator_dtheta_transpose(j, theta, p)
    }

    fn a_form(&self, p: &DVector<f64>, u: &DVector<f64>, theta: &[f64]) -> Result<f64> {
        Ok(p.dot(&self.apply_state_operator(theta, u)?))
    }

    fn c_form(&self, p: &DVector<f64>, m: &DVector<f64>, theta: &[f64]) -> Result<f64> {
        Ok(p.dot(&self.apply_param_operator(theta, m)?))
    }

    fn d_form(&self, p: &DVector<f64>, theta: &[f64]) -> Result<f64> {
        Ok(p.dot(&self.source(theta)?))
    }
}

pub(crate) fn check_theta_index(j: usize, n_theta: usize) -> Result<()> {
    if j < n_theta {
        Ok(())
    } else {
        Err(Error::IndexOutOfRange { index: j, len: n_theta })
    }
}

fn finite(v: DVector<f64>, what: &'static str) -> Result<DVector<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::NonFinite(what))
    }
}

/// State solve: `A u = −(C m + d)`.
pub fn solve_state(
    model: &dyn ForwardModel,
    m: &DVector<f64>,
    theta: &[f64],
    counter: &SolveCounter,
) -> Result<DVector<f64>> {
    let dims = model.dims();
    check_len("state solve parameter", dims.parameter, m.len())?;
    check_len("state solve theta", dims.theta, theta.len())?;
    let rhs = -(model.apply_param_operator(theta, m)? + model.source(theta)?);
    let u = model.solve_state_operator(theta, &rhs)?;
    counter.record_state();
    finite(u, "state solve")
}

/// Adjoint solve: `Aᵀ p = −Qᵀ Γ⁻¹ (Q u − u_obs)`.
pub fn solve_adjoint(
    model: &dyn ForwardModel,
    u: &DVector<f64>,
    data: &ObservationData,
    theta: &[f64],
    counter: &SolveCounter,
) -> Result<DVector<f64>> {
    check_len("adjoint solve state", model.dims().state, u.len())?;
    let misfit = model.observe(u)? - &data.u_obs;
    let rhs = -model.observe_adjoint(&data.apply_noise_precision(&misfit))?;
    let p = model.solve_state_operator_transpose(theta, &rhs)?;
    counter.record_adjoint();
    finite(p, "adjoint solve")
}

/// Incremental state solve: `A û = −C m̂`.
pub fn solve_incremental_state(
    model: &dyn ForwardModel,
    m_hat: &DVector<f64>,
    theta: &[f64],
    counter: &SolveCounter,
) -> Result<DVector<f64>> {
    check_len("incremental state parameter", model.dims().parameter, m_hat.len())?;
    let rhs = -model.apply_param_operator(theta, m_hat)?;
    let u_hat = model.solve_state_operator(theta, &rhs)?;
    counter.record_incremental_state();
    finite(u_hat, "incremental state solve")
}

/// Incremental adjoint solve: `Aᵀ p̂ = −Qᵀ Γ⁻¹ Q û`.
pub fn solve_incremental_adjoint(
    model: &dyn ForwardModel,
    u_hat: &DVector<f64>,
    data: &ObservationData,
    theta: &[f64],
    counter: &SolveCounter,
) -> Result<DVector<f64>> {
    check_len("incremental adjoint state", model.dims().state, u_hat.len())?;
    let w = data.apply_noise_precision(&model.observe(u_hat)?);
    let rhs = -model.observe_adjoint(&w)?;
    let p_hat = model.solve_state_operator_transpose(theta, &rhs)?;
    counter.record_incremental_adjoint();
    finite(p_hat, "incremental adjoint solve")
}

/// Appends one auxiliary parameter that enters no form.
///
/// Useful for checking that sensitivities of a parameter the model ignores are
/// exactly zero and leave the others untouched.
pub struct Spectator {
    inner: Arc<dyn ForwardModel>,
    name: String,
}

impl Spectator {
    pub fn new(inner: Arc<dyn ForwardModel>, name: impl Into<String>) -> Self {
        Self {
            inner,
            name: name.into(),
        }
    }

    fn split<'a>(&self, theta: &'a [f64]) -> Result<&'a [f64]> {
        let n = self.inner.dims().theta;
        check_len("spectator theta", n + 1, theta.len())?;
        Ok(&theta[..n])
    }

    fn is_spectator(&self, j: usize) -> Result<bool> {
        let n = self.inner.dims().theta;
        check_theta_index(j, n + 1)?;
        Ok(j == n)
    }
}

impl ForwardModel for Spectator {
    fn dims(&self) -> ModelDims {
        let d = self.inner.dims();
        ModelDims {
            theta: d.theta + 1,
            ..d
        }
    }

    fn theta_names(&self) -> Vec<String> {
        let mut names = self.inner.theta_names();
        names.push(self.name.clone());
        names
    }

    fn apply_state_operator(&self, theta: &[f64], u: &DVector<f64>) -> Result<DVector<f64>> {
        self.inner.apply_state_operator(self.split(theta)?, u)
    }

    fn solve_state_operator(&self, theta: &[f64], rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.inner.solve_state_operator(self.split(theta)?, rhs)
    }

    fn solve_state_operator_transpose(&self, theta: &[f64], rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.inner.solve_state_operator_transpose(self.split(theta)?, rhs)
    }

    fn apply_param_operator(&self, theta: &[f64], m: &DVector<f64>) -> Result<DVector<f64>> {
        self.inner.apply_param_operator(self.split(theta)?, m)
    }

    fn apply_param_operator_transpose(&self, theta: &[f64], p: &DVector<f64>) -> Result<DVector<f64>> {
        self.inner.apply_param_operator_transpose(self.split(theta)?, p)
    }

    fn source(&self, theta: &[f64]) -> Result<DVector<f64>> {
        self.inner.source(self.split(theta)?)
    }

    fn observe(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.inner.observe(u)
    }

    fn observe_adjoint(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        self.inner.observe_adjoint(w)
    }

    fn apply_state_operator_dtheta(&self, j: usize, theta: &[f64], u: &DVector<f64>) -> Result<DVector<f64>> {
        if self.is_spectator(j)? {
            return Ok(DVector::zeros(self.inner.dims().state));
        }
        self.inner.apply_state_operator_dtheta(j, self.split(theta)?, u)
    }

    fn apply_state_operator_dtheta_transpose(&self, j: usize, theta: &[f64], p: &DVector<f64>) -> Result<DVector<f64>> {
        if self.is_spectator(j)? {
            return Ok(DVector::zeros(self.inner.dims().state));
        }
        self.inner
            .apply_state_operator_dtheta_transpose(j, self.split(theta)?, p)
    }

    fn apply_param_operator_dtheta(&self, j: usize, theta: &[f64], m: &DVector<f64>) -> Result<DVector<f64>> {
        if self.is_spectator(j)? {
            return Ok(DVector::zeros(self.inner.dims().state));
        }
        self.inner.apply_param_operator_dtheta(j, self.split(theta)?, m)
    }

    fn apply_param_operator_dtheta_transpose(&self, j: usize, theta: &[f64], p: &DVector<f64>) -> Result<DVector<f64>> {
        if self.is_spectator(j)? {
            return Ok(DVector::zeros(self.inner.dims().parameter));
        }
        self.inner
            .apply_param_operator_dtheta_transpose(j, self.split(theta)?, p)
    }

    fn source_dtheta(&self, j: usize, theta: &[f64]) -> Result<DVector<f64>> {
        if self.is_spectator(j)? {
            return Ok(DVector::zeros(self.inner.dims().state));
        }
        self.inner.source_dtheta(j, self.split(theta)?)
    }
}
