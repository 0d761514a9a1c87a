//! Self-checks run by `igsense verify`: closed-form and dense oracles, finite
//! differences, and solve accounting.

use std::path::Path;
use std::sync::Arc;

use igsense::bayes::{analyze, apply_inverse_hessian, misfit_hessian_apply, InverseProblem};
use igsense::elliptic::{build_elliptic, default_observation_points, synthesize_data, true_source};
use igsense::hdsa::info_gain_gradient;
use igsense::oracle::{dense_kld, fd_gradient};
use igsense::prior::MassSolver;
use igsense::twobytwo::TwoByTwoSetup;
use nalgebra::DVector;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{header, num, write_csv};
use crate::study::Study;

pub struct Check {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
}

impl Check {
    fn new(name: impl Into<String>, max_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            max_error,
            tolerance,
        }
    }

    pub fn pass(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

fn max_of(values: impl IntoIterator<Item = f64>) -> f64 {
    // NaN propagates so that a broken check cannot pass
    values
        .into_iter()
        .fold(0.0, |a, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) })
}

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Pipeline `Φ_IG` and gradient against the closed form on a square grid.
fn twobytwo_against_closed_form(points: &[[f64; 2]]) -> Result<(f64, f64), CliError> {
    let setup = TwoByTwoSetup::default();
    let ip = setup.inverse_problem()?;
    let template = setup.theta_template();
    let errs: Vec<Result<(f64, f64), CliError>> = points
        .par_iter()
        .map(|t| {
            let r = info_gain_gradient(&ip.fork(), &template.with_values(t)?, 2, 10, 1)?;
            let kld = setup.kld_closed_form(t)?;
            let reference = setup.kld_gradient_reference(t, 1e-3)?;
            let e_val = (r.phi_ig - kld).abs() / kld.abs().max(1.0);
            let e_grad = max_of(
                r.grad_phi_ig
                    .iter()
                    .zip(&reference.grad)
                    .map(|(a, b)| (a - b).abs() / b.abs().max(1.0)),
            );
            Ok((e_val, e_grad))
        })
        .collect();
    let errs = errs.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok((max_of(errs.iter().map(|e| e.0)), max_of(errs.iter().map(|e| e.1))))
}

fn elliptic_problem(n: usize) -> Result<InverseProblem, CliError> {
    let model = build_elliptic(n, &default_observation_points())?;
    let prior = model.default_prior(MassSolver::Cholesky)?;
    let m_true = model.mesh().interpolate(true_source);
    let data = synthesize_data(&model, &m_true, &[1.0, 0.1], 0.01, 42)?;
    Ok(InverseProblem::new(Arc::new(model), Arc::new(prior), Arc::new(data))?)
}

fn dense_checks(n: usize, checks: &mut Vec<Check>) -> Result<(), CliError> {
    let ip = elliptic_problem(n)?;
    let theta = [1.0, 0.1];
    let s = analyze(&ip, &theta, 9, 10, 1)?;
    let d = dense_kld(&ip, &theta)?;
    checks.push(Check::new(
        format!("dense_phi_ig_n{n}"),
        (s.phi_ig - d.phi_ig).abs(),
        1e-10,
    ));
    checks.push(Check::new(
        format!("dense_phi_ig_bar_n{n}"),
        (s.phi_ig_bar - d.phi_ig_bar).abs(),
        1e-10,
    ));
    checks.push(Check::new(
        format!("dense_m_post_n{n}"),
        (&s.m_post - &d.m_post).norm() / d.m_post.norm(),
        1e-8,
    ));
    let gammas = s.spectrum.padded_gammas();
    checks.push(Check::new(
        format!("dense_eigenvalues_n{n}"),
        max_of((0..9).map(|i| (gammas[i] - d.gammas[i]).abs())),
        1e-8,
    ));
    Ok(())
}

/// Adjoint gradient against central differences, Woodbury inverse, and solve
/// counts for the configured model at its nominal θ.
fn model_checks(study: &Study, checks: &mut Vec<Check>) -> Result<(), CliError> {
    let ip = &study.ip;
    let t = study.theta.values();
    let (rank, over, seed) = (study.rank, study.oversample, study.eig_seed);
    let run = ip.fork();
    let r = info_gain_gradient(&run, &study.theta, rank, over, seed)?;
    let fd = fd_gradient(|x| Ok(analyze(&ip.fork(), x, rank, over, seed)?.phi_ig), t, 1e-4)?;
    checks.push(Check::new(
        "adjoint_gradient_vs_fd",
        max_of(
            r.grad_phi_ig
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).abs() / b.abs().max(1.0)),
        ),
        1e-4,
    ));
    let fd_bar = fd_gradient(|x| Ok(analyze(&ip.fork(), x, rank, over, seed)?.phi_ig_bar), t, 1e-4)?;
    checks.push(Check::new(
        "adjoint_gradient_bar_vs_fd",
        max_of(
            r.grad_phi_ig_bar
                .iter()
                .zip(&fd_bar)
                .map(|(a, b)| (a - b).abs() / b.abs().max(1.0)),
        ),
        1e-4,
    ));

    let n_theta = study.theta.len() as f64;
    let c = r.sensitivity_solves;
    let incremental_excess = c.incremental() as f64 - (2.0 * rank as f64 + 2.0 * n_theta + 6.0);
    let state_excess = c.state_and_adjoint() as f64 - 4.0;
    checks.push(Check::new(
        "solve_budget_excess",
        incremental_excess.max(state_excess).max(0.0),
        0.0,
    ));

    let summary = analyze(&ip.fork(), t, rank, over, seed)?;
    let n = ip.model().dims().parameter;
    let z = DVector::from_fn(n, |i, _| ((i as f64 + 1.0) * 0.618).sin());
    let x = apply_inverse_hessian(&summary.spectrum, ip.prior(), &z)?;
    let back = misfit_hessian_apply(&ip.fork(), t, &x)? + ip.prior().apply_precision(&x)?;
    let full_rank = summary.spectrum.rank() >= ip.model().dims().observation.min(n);
    if full_rank {
        checks.push(Check::new("woodbury_identity", (&back - &z).norm() / z.norm(), 1e-7));
    }
    Ok(())
}

pub fn run_checks(cfg: &RunConfig) -> Result<Vec<Check>, CliError> {
    let study = Study::build(cfg)?;
    let mut checks = Vec::new();

    let lattice: Vec<[f64; 2]> = grid(0.1, 0.9, 5)
        .iter()
        .flat_map(|&b| grid(0.1, 0.9, 5).into_iter().map(move |a| [a, b]))
        .collect();
    let (e_val, e_grad) = twobytwo_against_closed_form(&lattice)?;
    checks.push(Check::new("twobytwo_kld_closed_form", e_val, 1e-5));
    checks.push(Check::new("twobytwo_gradient_closed_form", e_grad, 1e-5));

    // the 50×50 grid behind the sensitivity maps of the 2×2 model
    let fine: Vec<[f64; 2]> = grid(0.0, 1.0, 50)
        .iter()
        .flat_map(|&b| grid(0.0, 1.0, 50).into_iter().map(move |a| [a, b]))
        .collect();
    let (_, e_fine) = twobytwo_against_closed_form(&fine)?;
    checks.push(Check::new("twobytwo_gradient_grid", e_fine, 1e-5));

    for n in [8, 16] {
        dense_checks(n, &mut checks)?;
    }

    let ip16 = elliptic_problem(16)?;
    let theta16 = build_elliptic(16, &default_observation_points())?.nominal_theta();
    let r = info_gain_gradient(&ip16, &theta16, 9, 10, 1)?;
    checks.push(Check::new(
        "expected_gain_independent_of_g",
        r.grad_phi_ig_bar[1].abs(),
        1e-10,
    ));

    model_checks(&study, &mut checks)?;
    Ok(checks)
}

pub fn verify(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let checks = run_checks(cfg)?;
    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| vec![c.name.clone(), num(c.max_error), num(c.tolerance), c.pass().to_string()])
        .collect();
    write_csv(
        out,
        "verify.csv",
        &header(&["check_name", "max_error", "tolerance", "pass"]),
        &rows,
    )?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass()).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("checks failed: {}", failed.join(", "))))
    }
}
