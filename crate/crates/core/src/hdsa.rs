//! Sensitivities of the information gain to the auxiliary parameters θ.
//!
//! `Φ_IG` splits into a spectral part, a function of the eigenvalues `γ_i(θ)`,
//! and the MAP part `½‖m_post(θ) − m_prior‖²_R`. With `(û_i, p̂_i)` the
//! incremental pair driven by `ψ_i`,
//!
//! ```text
//! ∂γ_i/∂θ_j = 2 [ ∂c/∂θ_j(p̂_i, ψ_i) + ∂a/∂θ_j(p̂_i, û_i) ]
//! ```
//!
//! The MAP point moves as `∂m_post/∂θ_j = −(H + R)⁻¹ b_j`, where `b_j` is the
//! θ_j-partial of the objective gradient. Pairing `b_j` with
//! `m̂* = (H + R)⁻¹ R (m_post − m_prior)` needs one incremental pair in total,
//! independent of the number of parameters.

use nalgebra::DVector;

use crate::bayes::{
    apply_inverse_hessian, expected_information_gain, information_gain, lowrank_spectrum, map_point, InverseProblem,
    LowRankSpectrum,
};
use crate::error::{Error, Result};
use crate::linops::{check_len, SolveCounts};
use crate::model::{check_theta_index, ForwardModel, ThetaVector};

/// Incremental pair of one eigenvector.
#[derive(Debug, Clone)]
pub struct ModeSensitivity {
    pub gamma: f64,
    pub psi: DVector<f64>,
    pub u_hat: DVector<f64>,
    pub p_hat: DVector<f64>,
}

/// Incremental pairs for every retained eigenpair, built with `2r` incremental solves.
#[derive(Debug, Clone)]
pub struct EigenSensitivityWorkspace {
    pub theta: Vec<f64>,
    pub modes: Vec<ModeSensitivity>,
}

impl EigenSensitivityWorkspace {
    pub fn build(ip: &InverseProblem, spectrum: &LowRankSpectrum) -> Result<Self> {
        let theta = &spectrum.theta;
        let modes = spectrum
            .gammas
            .iter()
            .zip(&spectrum.psis)
            .map(|(&gamma, psi)| {
                let (u_hat, p_hat) = ip.incremental_pair(psi, theta)?;
                Ok(ModeSensitivity {
                    gamma,
                    psi: psi.clone(),
                    u_hat,
                    p_hat,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            theta: theta.clone(),
            modes,
        })
    }
}

/// `∂γ_i/∂θ_j`; no PDE solves.
pub fn eigenvalue_derivative(
    model: &dyn ForwardModel,
    ws: &EigenSensitivityWorkspace,
    i: usize,
    j: usize,
) -> Result<f64> {
    let mode = ws.modes.get(i).ok_or(Error::IndexOutOfRange {
        index: i,
        len: ws.modes.len(),
    })?;
    check_theta_index(j, model.dims().theta)?;
    let c = model.c_form_dtheta(j, &mode.p_hat, &mode.psi, &ws.theta)?;
    let a = model.a_form_dtheta(j, &mode.p_hat, &mode.u_hat, &ws.theta)?;
    Ok(2.0 * (c + a))
}

/// All `∂γ_i/∂θ_j`, indexed `[i][j]`.
pub fn eigenvalue_derivatives(model: &dyn ForwardModel, ws: &EigenSensitivityWorkspace) -> Result<Vec<Vec<f64>>> {
    let n_theta = model.dims().theta;
    (0..ws.modes.len())
        .map(|i| (0..n_theta).map(|j| eigenvalue_derivative(model, ws, i, j)).collect())
        .collect()
}

/// Gradient of `½ Σ [ln(1+γ_i) − γ_i/(1+γ_i)]`.
pub fn spectral_gradient(ws: &EigenSensitivityWorkspace, dgamma: &[Vec<f64>]) -> Vec<f64> {
    weighted_sum(ws, dgamma, |g| g / (2.0 * (1.0 + g).powi(2)))
}

/// Gradient of `Φ̄_IG = ½ Σ ln(1+γ_i)`.
pub fn expected_gain_gradient(ws: &EigenSensitivityWorkspace, dgamma: &[Vec<f64>]) -> Vec<f64> {
    weighted_sum(ws, dgamma, |g| 1.0 / (2.0 * (1.0 + g)))
}

fn weighted_sum(ws: &EigenSensitivityWorkspace, dgamma: &[Vec<f64>], w: impl Fn(f64) -> f64) -> Vec<f64> {
    let n_theta = dgamma.first().map_or(0, |d| d.len());
    let mut out = vec![0.0; n_theta];
    for (mode, d) in ws.modes.iter().zip(dgamma) {
        let weight = w(mode.gamma);
        for (o, &dj) in out.iter_mut().zip(d) {
            *o += weight * dj;
        }
    }
    out
}

/// State and adjoint at the MAP point.
#[derive(Debug, Clone)]
pub struct PosteriorState {
    pub m_post: DVector<f64>,
    pub u: DVector<f64>,
    pub p: DVector<f64>,
}

impl PosteriorState {
    /// One state and one adjoint solve.
    pub fn solve(ip: &InverseProblem, theta: &[f64], m_post: DVector<f64>) -> Result<Self> {
        let u = ip.state(&m_post, theta)?;
        let p = ip.adjoint(&u, theta)?;
        Ok(Self { m_post, u, p })
    }
}

/// `B_j(m̂) = b_j · m̂`, given the incremental pair `(û, p̂)` driven by `m̂`.
pub fn bj_functional(
    model: &dyn ForwardModel,
    theta: &[f64],
    j: usize,
    post: &PosteriorState,
    m_hat: &DVector<f64>,
    u_hat: &DVector<f64>,
    p_hat: &DVector<f64>,
) -> Result<f64> {
    Ok(model.c_form_dtheta(j, &post.p, m_hat, theta)?
        + model.a_form_dtheta(j, &post.p, u_hat, theta)?
        + model.c_form_dtheta(j, p_hat, &post.m_post, theta)?
        + model.a_form_dtheta(j, p_hat, &post.u, theta)?
        + model.d_form_dtheta(j, p_hat, theta)?)
}

/// The dual vector `b_j` itself, at the cost of one incremental state and one
/// incremental adjoint solve.
pub fn assemble_bj(ip: &InverseProblem, theta: &[f64], j: usize, post: &PosteriorState) -> Result<DVector<f64>> {
    let model = ip.model();
    check_theta_index(j, model.dims().theta)?;
    let w = model.apply_state_operator_dtheta(j, theta, &post.u)?
        + model.apply_param_operator_dtheta(j, theta, &post.m_post)?
        + model.source_dtheta(j, theta)?;
    let z1 = model.solve_state_operator(theta, &w)?;
    ip.counter().record_incremental_state();
    let misfit = ip.data().apply_noise_precision(&model.observe(&z1)?);
    let rhs = model.observe_adjoint(&misfit)? - model.apply_state_operator_dtheta_transpose(j, theta, &post.p)?;
    let dp = model.solve_state_operator_transpose(theta, &rhs)?;
    ip.counter().record_incremental_adjoint();
    Ok(model.apply_param_operator_dtheta_transpose(j, theta, &post.p)?
        + model.apply_param_operator_transpose(theta, &dp)?)
}

/// `∂m_post/∂θ_j = −(H + R)⁻¹ b_j`.
pub fn map_sensitivity(ip: &InverseProblem, spectrum: &LowRankSpectrum, b_j: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(-apply_inverse_hessian(spectrum, ip.prior(), b_j)?)
}

/// Everything computed at one θ, with solve counts split into the spectrum
/// phase and the MAP-plus-sensitivity phase.
#[derive(Debug, Clone)]
pub struct SensitivityReport {
    pub theta: ThetaVector,
    pub phi_ig: f64,
    pub phi_ig_bar: f64,
    pub grad_phi_ig: Vec<f64>,
    pub grad_phi_ig_bar: Vec<f64>,
    pub grad_spectral: Vec<f64>,
    pub grad_map: Vec<f64>,
    pub gammas: Vec<f64>,
    /// `[i][j] = ∂γ_i/∂θ_j`.
    pub dgamma: Vec<Vec<f64>>,
    pub m_post: DVector<f64>,
    pub spectrum_solves: SolveCounts,
    pub sensitivity_solves: SolveCounts,
    pub rank_deficient: bool,
    pub near_degenerate: Vec<usize>,
}

/// Spectrum, MAP point, `Φ_IG`, `Φ̄_IG`, and their θ-gradients at `theta`.
pub fn info_gain_gradient(
    ip: &InverseProblem,
    theta: &ThetaVector,
    rank: usize,
    oversample: usize,
    seed: u64,
) -> Result<SensitivityReport> {
    let model = ip.model();
    check_len("theta", model.dims().theta, theta.len())?;
    theta.check_in_box()?;
    let t = theta.values();

    let start = ip.solve_counts();
    let spectrum = lowrank_spectrum(ip, t, rank, oversample, seed)?;
    let after_spectrum = ip.solve_counts();

    let m_post = map_point(ip, &spectrum, t)?;
    let post = PosteriorState::solve(ip, t, m_post)?;
    let ws = EigenSensitivityWorkspace::build(ip, &spectrum)?;
    let dgamma = eigenvalue_derivatives(model, &ws)?;
    let grad_spectral = spectral_gradient(&ws, &dgamma);
    let grad_phi_ig_bar = expected_gain_gradient(&ws, &dgamma);

    let prior = ip.prior();
    let shift = &post.m_post - prior.mean();
    let m_star = apply_inverse_hessian(&spectrum, prior, &prior.apply_precision(&shift)?)?;
    let (u_star, p_star) = ip.incremental_pair(&m_star, t)?;
    let grad_map = (0..theta.len())
        .map(|j| Ok(-bj_functional(model, t, j, &post, &m_star, &u_star, &p_star)?))
        .collect::<Result<Vec<f64>>>()?;
    let end = ip.solve_counts();

    let grad_phi_ig = grad_spectral.iter().zip(&grad_map).map(|(a, b)| a + b).collect();
    let phi_ig = information_gain(&spectrum, prior, &post.m_post)?;
    let phi_ig_bar = expected_information_gain(&spectrum);
    Ok(SensitivityReport {
        theta: theta.clone(),
        phi_ig,
        phi_ig_bar,
        grad_phi_ig,
        grad_phi_ig_bar,
        grad_spectral,
        grad_map,
        gammas: spectrum.gammas.clone(),
        dgamma,
        m_post: post.m_post,
        spectrum_solves: after_spectrum - start,
        sensitivity_solves: end - after_spectrum,
        rank_deficient: spectrum.rank_deficient,
        near_degenerate: spectrum.near_degenerate,
    })
}
