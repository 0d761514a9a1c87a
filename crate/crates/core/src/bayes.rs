//! Linear Gaussian Bayesian inverse problem: low-rank posterior, MAP point, and
//! the information gain between prior and posterior.
//!
//! With `H` the data-misfit Hessian and `C_prior⁻¹ = R`, the posterior covariance
//! is `(H + R)⁻¹`. The dominant eigenpairs of `H ψ = γ R ψ` give
//!
//! ```text
//! (H + R)⁻¹ z = C_prior z − Σ γ_i/(1+γ_i) ψ_i ψ_iᵀ z
//! Φ_IG  = ½ [ Σ ln(1+γ_i) − Σ γ_i/(1+γ_i) + ‖m_post − m_prior‖²_R ]
//! Φ̄_IG = ½ Σ ln(1+γ_i)
//! ```

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::linops::{check_len, eig_lowrank_generalized, FnOperator, SolveCounter, SolveCounts, Space};
use crate::model::{
    solve_adjoint, solve_incremental_adjoint, solve_incremental_state, solve_state, ForwardModel, ObservationData,
};
use crate::prior::GaussianPrior;

/// `γ_r/γ_1` above which a full-rank truncation is reported as possibly too coarse.
pub const TRUNCATION_WARNING_RATIO: f64 = 1e-3;

/// Model, prior, and data, plus the solve counter every PDE solve reports to.
pub struct InverseProblem {
    model: Arc<dyn ForwardModel>,
    prior: Arc<GaussianPrior>,
    data: Arc<ObservationData>,
    counter: SolveCounter,
}

impl InverseProblem {
    pub fn new(model: Arc<dyn ForwardModel>, prior: Arc<GaussianPrior>, data: Arc<ObservationData>) -> Result<Self> {
        let dims = model.dims();
        check_len("prior dimension", dims.parameter, prior.dim())?;
        check_len("observation count", dims.observation, data.len())?;
        Ok(Self {
            model,
            prior,
            data,
            counter: SolveCounter::new(),
        })
    }

    /// Same model, prior, and data with a fresh solve counter.
    pub fn fork(&self) -> Self {
        Self {
            model: self.model.clone(),
            prior: self.prior.clone(),
            data: self.data.clone(),
            counter: SolveCounter::new(),
        }
    }

    /// Same model and prior with different data.
    pub fn with_data(&self, data: ObservationData) -> Result<Self> {
        Self::new(self.model.clone(), self.prior.clone(), Arc::new(data))
    }

    pub fn model(&self) -> &dyn ForwardModel {
        self.model.as_ref()
    }

    pub fn model_handle(&self) -> Arc<dyn ForwardModel> {
        self.model.clone()
    }

    pub fn prior(&self) -> &GaussianPrior {
        &self.prior
    }

    pub fn prior_handle(&self) -> Arc<GaussianPrior> {
        self.prior.clone()
    }

    pub fn data(&self) -> &ObservationData {
        &self.data
    }

    pub fn counter(&self) -> &SolveCounter {
        &self.counter
    }

    pub fn solve_counts(&self) -> SolveCounts {
        self.counter.snapshot()
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        check_len("theta", self.model.dims().theta, theta.len())
    }

    pub fn state(&self, m: &DVector<f64>, theta: &[f64]) -> Result<DVector<f64>> {
        solve_state(self.model(), m, theta, &self.counter)
    }

    pub fn adjoint(&self, u: &DVector<f64>, theta: &[f64]) -> Result<DVector<f64>> {
        solve_adjoint(self.model(), u, &self.data, theta, &self.counter)
    }

    /// `(û, p̂)` driven by the parameter direction `m̂`.
    pub fn incremental_pair(&self, m_hat: &DVector<f64>, theta: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
        let u_hat = solve_incremental_state(self.model(), m_hat, theta, &self.counter)?;
        let p_hat = solve_incremental_adjoint(self.model(), &u_hat, &self.data, theta, &self.counter)?;
        Ok((u_hat, p_hat))
    }
}

/// Data-misfit Hessian action `H m̂ = Cᵀ p̂` (two incremental solves).
pub fn misfit_hessian_apply(ip: &InverseProblem, theta: &[f64], m_hat: &DVector<f64>) -> Result<DVector<f64>> {
    ip.check_theta(theta)?;
    let (_, p_hat) = ip.incremental_pair(m_hat, theta)?;
    ip.model().apply_param_operator_transpose(theta, &p_hat)
}

/// Gradient of `½‖Qu − u_obs‖²_Γ⁻¹ + ½‖m − m_prior‖²_R` as a dual vector.
pub fn objective_gradient(ip: &InverseProblem, theta: &[f64], m: &DVector<f64>) -> Result<DVector<f64>> {
    ip.check_theta(theta)?;
    let u = ip.state(m, theta)?;
    let p = ip.adjoint(&u, theta)?;
    let prior_term = ip.prior().apply_precision(&(m - ip.prior().mean()))?;
    Ok(prior_term + ip.model().apply_param_operator_transpose(theta, &p)?)
}

/// Dominant generalized eigenpairs of the prior-preconditioned misfit Hessian at a fixed θ.
#[derive(Debug, Clone)]
pub struct LowRankSpectrum {
    pub theta: Vec<f64>,
    /// Nonincreasing, all above the eigenvalue floor.
    pub gammas: Vec<f64>,
    /// R-orthonormal eigenvectors.
    pub psis: Vec<DVector<f64>>,
    pub requested_rank: usize,
    pub rank_deficient: bool,
    pub near_degenerate: Vec<usize>,
}

impl LowRankSpectrum {
    pub fn rank(&self) -> usize {
        self.gammas.len()
    }

    /// `γ_r/γ_1`, or `None` for an empty spectrum.
    pub fn tail_ratio(&self) -> Option<f64> {
        Some(self.gammas.last()? / self.gammas.first()?)
    }

    /// Eigenvalues padded with zeros to the requested rank.
    pub fn padded_gammas(&self) -> Vec<f64> {
        let mut g = self.gammas.clone();
        g.resize(self.requested_rank.max(g.len()), 0.0);
        g
    }
}

/// Randomized low-rank solve of `H ψ = γ R ψ`. A rank above the parameter
/// dimension is clamped to it.
pub fn lowrank_spectrum(
    ip: &InverseProblem,
    theta: &[f64],
    rank: usize,
    oversample: usize,
    seed: u64,
) -> Result<LowRankSpectrum> {
    ip.check_theta(theta)?;
    let n = ip.model().dims().parameter;
    let effective = rank.min(n);
    if effective < rank {
        log::warn!("requested rank {rank} exceeds the parameter dimension {n}; using {effective}");
    }
    let h = FnOperator::new(n, n, Space::Parameter, Space::Dual, true, |x| {
        misfit_hessian_apply(ip, theta, x)
    });
    let prior = ip.prior();
    let b = prior.precision_operator();
    let b_inv = prior.covariance_operator();
    let eig = eig_lowrank_generalized(&h, &b, &b_inv, effective, oversample, seed)?;
    let spectrum = LowRankSpectrum {
        theta: theta.to_vec(),
        gammas: eig.values,
        psis: eig.vectors,
        requested_rank: rank,
        rank_deficient: eig.rank_deficient || effective < rank,
        near_degenerate: eig.near_degenerate,
    };
    // the misfit Hessian has rank at most min(n, n_obs); nothing is truncated there
    let hessian_rank = n.min(ip.model().dims().observation);
    if !spectrum.rank_deficient && effective < hessian_rank {
        if let Some(ratio) = spectrum.tail_ratio() {
            if ratio > TRUNCATION_WARNING_RATIO {
                log::warn!("spectrum not yet decayed at rank {rank}: γ_r/γ_1 = {ratio:e}");
            }
        }
    }
    Ok(spectrum)
}

/// `(H + R)⁻¹ z` from the low-rank spectrum (no PDE solves).
pub fn apply_inverse_hessian(
    spectrum: &LowRankSpectrum,
    prior: &GaussianPrior,
    z: &DVector<f64>,
) -> Result<DVector<f64>> {
    // Written as C z = Σ βᵢψᵢ + w with w R-orthogonal to every ψᵢ. The ψ
    // components of the computed w are pure roundoff, amplified by the large
    // βᵢ when γᵢ ≫ 1, so they are projected out instead of kept.
    let mut w = prior.apply_cov(z)?;
    let betas: Vec<f64> = spectrum.psis.iter().map(|psi| psi.dot(z)).collect();
    for (beta, psi) in betas.iter().zip(&spectrum.psis) {
        w.axpy(-beta, psi, 1.0);
    }
    let mut out = w.clone();
    for ((&gamma, beta), psi) in spectrum.gammas.iter().zip(&betas).zip(&spectrum.psis) {
        let leak = prior.apply_precision(psi)?.dot(&w);
        out.axpy(beta / (1.0 + gamma) - leak, psi, 1.0);
    }
    Ok(out)
}

/// Posterior mean. One state solve at `m = 0` and one adjoint solve give
/// `G*Γ⁻¹(u_obs − f) = −Cᵀp₀`; the rest is [`apply_inverse_hessian`].
pub fn map_point(ip: &InverseProblem, spectrum: &LowRankSpectrum, theta: &[f64]) -> Result<DVector<f64>> {
    ip.check_theta(theta)?;
    if spectrum.theta != theta {
        return Err(Error::InvalidInput("spectrum was computed at a different theta".into()));
    }
    let n = ip.model().dims().parameter;
    let u0 = ip.state(&DVector::zeros(n), theta)?;
    let p0 = ip.adjoint(&u0, theta)?;
    let rhs = ip.prior().apply_precision(ip.prior().mean())? - ip.model().apply_param_operator_transpose(theta, &p0)?;
    apply_inverse_hessian(spectrum, ip.prior(), &rhs)
}

/// `Φ_IG` from the spectrum and the posterior mean.
pub fn information_gain(spectrum: &LowRankSpectrum, prior: &GaussianPrior, m_post: &DVector<f64>) -> Result<f64> {
    let shift = m_post - prior.mean();
    let (log_term, trace_term) = spectral_terms(&spectrum.gammas);
    let value = 0.5 * (log_term - trace_term + prior.cm_inner(&shift, &shift)?);
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite("information gain"))
    }
}

/// `Φ̄_IG = ½ Σ ln(1 + γ_i)`; data-independent.
pub fn expected_information_gain(spectrum: &LowRankSpectrum) -> f64 {
    0.5 * spectral_terms(&spectrum.gammas).0
}

fn spectral_terms(gammas: &[f64]) -> (f64, f64) {
    gammas
        .iter()
        .fold((0.0, 0.0), |(l, t), &g| (l + g.ln_1p(), t + g / (1.0 + g)))
}

/// Spectrum, MAP point, and both information measures at one θ.
#[derive(Debug, Clone)]
pub struct PosteriorSummary {
    pub spectrum: LowRankSpectrum,
    pub m_post: DVector<f64>,
    pub phi_ig: f64,
    pub phi_ig_bar: f64,
}

pub fn analyze(
    ip: &InverseProblem,
    theta: &[f64],
    rank: usize,
    oversample: usize,
    seed: u64,
) -> Result<PosteriorSummary> {
    let spectrum = lowrank_spectrum(ip, theta, rank, oversample, seed)?;
    let m_post = map_point(ip, &spectrum, theta)?;
    let phi_ig = information_gain(&spectrum, ip.prior(), &m_post)?;
    let phi_ig_bar = expected_information_gain(&spectrum);
    Ok(PosteriorSummary {
        spectrum,
        m_post,
        phi_ig,
        phi_ig_bar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elliptic::{build_elliptic, default_observation_points, synthesize_data, true_source};
    use crate::prior::MassSolver;
    use crate::twobytwo::TwoByTwoSetup;

    fn elliptic_problem(n: usize) -> (InverseProblem, Vec<f64>) {
        let model = build_elliptic(n, &default_observation_points()).unwrap();
        let prior = model.default_prior(MassSolver::Cholesky).unwrap();
        let theta = model.nominal_theta().values().to_vec();
        let m_true = model.mesh().interpolate(true_source);
        let data = synthesize_data(&model, &m_true, &theta, 0.01, 42).unwrap();
        let ip = InverseProblem::new(Arc::new(model), Arc::new(prior), Arc::new(data)).unwrap();
        (ip, theta)
    }

    #[test]
    fn twobytwo_nominal_values() {
        let ip = TwoByTwoSetup::default().inverse_problem().unwrap();
        let theta = [0.0, 0.0];
        let s = analyze(&ip, &theta, 2, 10, 1).unwrap();
        let g = s.spectrum.padded_gammas();
        assert!((g[0] - 100.0).abs() < 1e-10 && g[1].abs() < 1e-10);
        assert!((s.m_post[0]).abs() < 1e-12 && (s.m_post[1] - 5.0 / 101.0).abs() < 1e-12);
        let kld = 0.5 * (101f64.ln() - 100.0 / 101.0 + 25.0 / 10201.0);
        assert!((s.phi_ig - kld).abs() < 1e-12);
        assert!((s.phi_ig_bar - 0.5 * 101f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn misfit_hessian_is_symmetric() {
        let (ip, theta) = elliptic_problem(8);
        let n = ip.model().dims().parameter;
        let x = DVector::from_fn(n, |i, _| (i as f64 * 0.7).sin());
        let y = DVector::from_fn(n, |i, _| (i as f64 * 1.3).cos());
        let hx = misfit_hessian_apply(&ip, &theta, &x).unwrap();
        let hy = misfit_hessian_apply(&ip, &theta, &y).unwrap();
        assert!((y.dot(&hx) - x.dot(&hy)).abs() <= 1e-10 * y.dot(&hx).abs().max(1e-300));
        assert_eq!(ip.solve_counts().incremental(), 4);
    }

    #[test]
    fn map_point_zeroes_the_gradient() {
        let (ip, theta) = elliptic_problem(16);
        let s = analyze(&ip, &theta, 20, 10, 3).unwrap();
        assert!(s.spectrum.rank_deficient);
        assert_eq!(s.spectrum.rank(), 9);
        let n = ip.model().dims().parameter;
        let g0 = objective_gradient(&ip, &theta, &DVector::zeros(n)).unwrap();
        let g = objective_gradient(&ip, &theta, &s.m_post).unwrap();
        let cm_norm = |g: &DVector<f64>| g.dot(&ip.prior().apply_cov(g).unwrap()).sqrt();
        assert!(
            cm_norm(&g) <= 1e-6 * cm_norm(&g0),
            "{} vs {}",
            cm_norm(&g),
            cm_norm(&g0)
        );
    }

    #[test]
    fn map_point_uses_one_state_and_one_adjoint_solve() {
        let (ip, theta) = elliptic_problem(8);
        let spectrum = lowrank_spectrum(&ip, &theta, 12, 5, 1).unwrap();
        let before = ip.solve_counts();
        map_point(&ip, &spectrum, &theta).unwrap();
        let used = ip.solve_counts() - before;
        assert_eq!((used.state_solves, used.adjoint_solves, used.incremental()), (1, 1, 0));
    }

    #[test]
    fn spectrum_is_prior_orthonormal() {
        let (ip, theta) = elliptic_problem(8);
        let s = lowrank_spectrum(&ip, &theta, 9, 10, 5).unwrap();
        for (i, a) in s.psis.iter().enumerate() {
            for (j, b) in s.psis.iter().enumerate() {
                let v = ip.prior().cm_inner(a, b).unwrap();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-8, "({i},{j}) = {v}");
            }
        }
        assert!(s.gammas.windows(2).all(|w| w[0] >= w[1]));
        assert!(s.gammas.iter().all(|&g| g > 0.0));
    }

    #[test]
    fn inverse_hessian_inverts_total_hessian() {
        let (ip, theta) = elliptic_problem(8);
        let s = lowrank_spectrum(&ip, &theta, 9, 10, 5).unwrap();
        let n = ip.model().dims().parameter;
        let z = DVector::from_fn(n, |i, _| ((i % 7) as f64 - 3.0) * 0.1);
        let x = apply_inverse_hessian(&s, ip.prior(), &z).unwrap();
        let back = misfit_hessian_apply(&ip, &theta, &x).unwrap() + ip.prior().apply_precision(&x).unwrap();
        assert!((&back - &z).norm() <= 1e-8 * z.norm());
    }

    #[test]
    fn map_point_rejects_stale_spectrum() {
        let ip = TwoByTwoSetup::default().inverse_problem().unwrap();
        let s = lowrank_spectrum(&ip, &[0.1, 0.2], 2, 0, 1).unwrap();
        assert!(map_point(&ip, &s, &[0.1, 0.3]).is_err());
    }

    #[test]
    fn fork_resets_counter() {
        let (ip, theta) = elliptic_problem(4);
        let n = ip.model().dims().parameter;
        ip.state(&DVector::zeros(n), &theta).unwrap();
        assert_eq!(ip.solve_counts().state_solves, 1);
        assert_eq!(ip.fork().solve_counts().total(), 0);
    }
}
