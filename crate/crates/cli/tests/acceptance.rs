//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its criterion
//! and then asserts it. Tolerances are pinned here.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use igsense::bayes::{analyze, InverseProblem};
use igsense::elliptic::{build_elliptic, default_observation_points, synthesize_data, true_source};
use igsense::gsa::{dgsm_bound, DgsmOptions, FailurePolicy, PerturbationMap, Quantity};
use igsense::hdsa::info_gain_gradient;
use igsense::model::ThetaVector;
use igsense::oracle::{dense_kld, pick_freeze_total_sobol};
use igsense::prior::MassSolver;
use igsense::twobytwo::TwoByTwoSetup;

const RANK: usize = 9;
const OVERSAMPLE: usize = 10;
const EIG_SEED: u64 = 1;

fn report(id: u32, name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("acceptance {id} {name}: {verdict} ({detail})");
    assert!(pass, "acceptance {id} {name} failed: {detail}");
}

fn elliptic(n: usize) -> (InverseProblem, ThetaVector) {
    let model = build_elliptic(n, &default_observation_points()).unwrap();
    let prior = model.default_prior(MassSolver::Cholesky).unwrap();
    let m_true = model.mesh().interpolate(true_source);
    let data = synthesize_data(&model, &m_true, &[1.0, 0.1], 0.01, 42).unwrap();
    let theta = model.nominal_theta();
    let ip = InverseProblem::new(Arc::new(model), Arc::new(prior), Arc::new(data)).unwrap();
    (ip, theta)
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn c1_closed_form_equivalence() {
    const TOL: f64 = 1e-5;
    const BUDGET: Duration = Duration::from_secs(5);
    let start = Instant::now();
    let setup = TwoByTwoSetup::default();
    let ip = setup.inverse_problem().unwrap();
    let template = setup.theta_template();
    let mut worst = (0.0f64, 0.0f64);
    for &t2 in &linspace(0.1, 0.9, 5) {
        for &t1 in &linspace(0.1, 0.9, 5) {
            let t = [t1, t2];
            let r =
                info_gain_gradient(&ip.fork(), &template.with_values(&t).unwrap(), 2, OVERSAMPLE, EIG_SEED).unwrap();
            let reference = setup.kld_gradient_reference(&t, 1e-3).unwrap();
            worst.0 = worst.0.max(rel(r.phi_ig, setup.kld_closed_form(&t).unwrap()));
            for (a, b) in r.grad_phi_ig.iter().zip(&reference.grad) {
                worst.1 = worst.1.max(rel(*a, *b));
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        1,
        "closed-form equivalence on the 2x2 lattice",
        worst.0 <= TOL && worst.1 <= TOL && elapsed < BUDGET,
        format!(
            "phi rel {:.2e}, grad rel {:.2e}, tol {TOL:e}, {elapsed:.2?}",
            worst.0, worst.1
        ),
    );
}

#[test]
fn c2_expected_gain_independent_of_g() {
    const TOL: f64 = 1e-10;
    const BUDGET: Duration = Duration::from_secs(120);
    let start = Instant::now();
    let (ip, nominal) = elliptic(32);
    let mut values = vec![nominal.values()[1]];
    values.extend(linspace(0.0, 1.0, 40));
    let mut worst = 0.0f64;
    for g in values {
        let theta = nominal.with_values(&[1.0, g]).unwrap();
        let r = info_gain_gradient(&ip.fork(), &theta, RANK, OVERSAMPLE, EIG_SEED).unwrap();
        worst = worst.max(r.grad_phi_ig_bar[1].abs());
    }
    let elapsed = start.elapsed();
    report(
        2,
        "expected information gain independent of g",
        worst <= TOL && elapsed < BUDGET,
        format!("max |d phi_bar / dg| {worst:.2e}, tol {TOL:e}, {elapsed:.2?}"),
    );
}

#[test]
fn c3_single_sign_change_in_g() {
    let (ip, nominal) = elliptic(32);
    let grads: Vec<f64> = linspace(0.05, 0.5, 40)
        .into_iter()
        .map(|g| {
            let theta = nominal.with_values(&[1.0, g]).unwrap();
            info_gain_gradient(&ip.fork(), &theta, RANK, OVERSAMPLE, EIG_SEED)
                .unwrap()
                .grad_phi_ig[1]
        })
        .collect();
    let changes = grads.windows(2).filter(|w| w[0].signum() != w[1].signum()).count();
    report(
        3,
        "d phi_ig / dg changes sign once on [0.05, 0.5]",
        changes == 1,
        format!(
            "{changes} sign changes, derivative {:.4} at g=0.05 and {:.4} at g=0.5",
            grads[0], grads[39]
        ),
    );
}

#[test]
fn c4_dense_oracle_equivalence() {
    const TOL_PHI: f64 = 1e-10;
    const TOL: f64 = 1e-8;
    const BUDGET: Duration = Duration::from_secs(60);
    let start = Instant::now();
    let mut worst = [0.0f64; 4];
    for n in [8, 16] {
        let (ip, theta) = elliptic(n);
        let t = theta.values();
        let s = analyze(&ip, t, RANK, OVERSAMPLE, EIG_SEED).unwrap();
        let d = dense_kld(&ip, t).unwrap();
        let gammas = s.spectrum.padded_gammas();
        worst[0] = worst[0].max((s.phi_ig - d.phi_ig).abs());
        worst[1] = worst[1].max((s.phi_ig_bar - d.phi_ig_bar).abs());
        worst[2] = worst[2].max((&s.m_post - &d.m_post).norm() / d.m_post.norm());
        worst[3] = (0..RANK).fold(worst[3], |w, i| w.max((gammas[i] - d.gammas[i]).abs()));
    }
    let elapsed = start.elapsed();
    report(
        4,
        "low-rank pipeline matches the dense oracle",
        worst[0] <= TOL_PHI && worst[1] <= TOL_PHI && worst[2] <= TOL && worst[3] <= TOL && elapsed < BUDGET,
        format!(
            "phi {:.2e}, phi_bar {:.2e}, m_post {:.2e}, eigenvalues {:.2e}, {elapsed:.2?}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    );
}

/// Central-difference errors of the adjoint gradient of `Φ_IG` for each θ_j at
/// each step, relative to the adjoint value.
fn fd_errors(ip: &InverseProblem, theta: &ThetaVector, rank: usize, steps: &[f64]) -> Vec<Vec<f64>> {
    let r = info_gain_gradient(&ip.fork(), theta, rank, OVERSAMPLE, EIG_SEED).unwrap();
    let phi = |t: &[f64]| analyze(&ip.fork(), t, rank, OVERSAMPLE, EIG_SEED).unwrap().phi_ig;
    (0..theta.len())
        .map(|j| {
            steps
                .iter()
                .map(|&h| {
                    let (mut up, mut down) = (theta.values().to_vec(), theta.values().to_vec());
                    up[j] += h;
                    down[j] -= h;
                    rel((phi(&up) - phi(&down)) / (2.0 * h), r.grad_phi_ig[j])
                })
                .collect()
        })
        .collect()
}

#[test]
fn c5_fd_second_order() {
    const STEPS: [f64; 3] = [1e-2, 1e-3, 1e-4];
    const FINAL_TOL: f64 = 1e-4;
    // a tenfold step reduction must shrink the error at least 10^1.5 times
    const MIN_RATIO: f64 = 31.6;
    // below this relative error the difference quotient is roundoff-limited
    const ROUNDOFF: f64 = 1e-8;
    let setup = TwoByTwoSetup::default();
    let small = setup.theta_template().with_values(&[0.3, 0.7]).unwrap();
    let (ip, nominal) = elliptic(32);
    let cases = [
        (
            "twobytwo",
            fd_errors(&setup.inverse_problem().unwrap(), &small, 2, &STEPS),
        ),
        ("elliptic", fd_errors(&ip, &nominal, RANK, &STEPS)),
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for (model, errs) in &cases {
        for (j, e) in errs.iter().enumerate() {
            let ordered = e.windows(2).all(|w| w[1] <= ROUNDOFF || w[0] / w[1] >= MIN_RATIO);
            pass &= ordered && e[2] <= FINAL_TOL;
            detail.push(format!(
                "{model} theta{}: {:.1e} {:.1e} {:.1e}",
                j + 1,
                e[0],
                e[1],
                e[2]
            ));
        }
    }
    report(5, "adjoint gradient vs central differences", pass, detail.join("; "));
}

#[test]
fn c6_solve_accounting() {
    let (ip, theta) = elliptic(32);
    let r = info_gain_gradient(&ip, &theta, RANK, OVERSAMPLE, EIG_SEED).unwrap();
    let c = r.sensitivity_solves;
    let budget = 2 * RANK as u64 + 2 * theta.len() as u64 + 6;
    report(
        6,
        "solve budget of one sensitivity run",
        c.incremental() <= budget && c.state_and_adjoint() <= 4,
        format!(
            "incremental {} of {budget}, state+adjoint {} of 4, eigensolver incremental {}",
            c.incremental(),
            c.state_and_adjoint(),
            r.spectrum_solves.incremental()
        ),
    );
}

#[test]
fn c7_dgsm_bounds_total_sobol() {
    const SIGMAS: f64 = 3.0;
    const REFERENCE_SAMPLES: usize = 100_000;
    const BUDGET: Duration = Duration::from_secs(30);
    let setup = TwoByTwoSetup::default();
    let ip = setup.inverse_problem().unwrap();
    let template = setup.theta_template();
    let pmap = PerturbationMap::new(template.nominal().to_vec(), 1.0).unwrap();
    let opts = DgsmOptions {
        n_samples: 500,
        seed: 7,
        rank: 2,
        oversample: OVERSAMPLE,
        eig_seed: EIG_SEED,
        quantity: Quantity::InformationGain,
        policy: FailurePolicy::Abort,
    };
    let start = Instant::now();
    let d = dgsm_bound(&ip, &template, &pmap, &opts).unwrap();
    let elapsed = start.elapsed();
    let sobol = pick_freeze_total_sobol(
        |xi| setup.kld_closed_form(&pmap.to_physical(xi)),
        &[(-1.0, 1.0); 2],
        REFERENCE_SAMPLES,
        11,
    )
    .unwrap();
    let pass = (0..2).all(|i| d.bound[i] >= sobol.total[i] - SIGMAS * sobol.std_err[i]) && elapsed < BUDGET;
    let detail = (0..2)
        .map(|i| {
            format!(
                "theta{}: bound {:.4} vs S_tot {:.4} ± {:.1e}",
                i + 1,
                d.bound[i],
                sobol.total[i],
                sobol.std_err[i]
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    report(
        7,
        "DGSM bound dominates total Sobol index",
        pass,
        format!("{detail}; {elapsed:.2?}"),
    );
}

const SMALL_TWOBYTWO: &str = r#"
model = "twobytwo"
[data]
u_obs = [0.15, 0.05]
sigma = 0.1
[sweep]
params = ["theta1", "theta2"]
ranges = [[0.0, 1.0], [0.0, 1.0]]
points = [6, 5]
[gsa]
n_samples = 64
seed = 7
"#;

const SMALL_ELLIPTIC: &str = r#"
model = "elliptic"
rank = 9
[mesh]
n = 12
[sweep]
params = ["g", "c"]
ranges = [[0.02, 0.5], [0.5, 2.0]]
points = [4, 3]
[gsa]
n_samples = 24
seed = 7
"#;

fn run_all(config: &Path, out: &Path, threads: &str) -> BTreeMap<String, Vec<u8>> {
    for cmd in ["solve", "sensitivity", "sweep", "gsa", "verify"] {
        let status = Command::new(env!("CARGO_BIN_EXE_igsense"))
            .args([cmd, "--config"])
            .arg(config)
            .arg("--out")
            .arg(out)
            .env("IGSENSE_THREADS", threads)
            .status()
            .unwrap();
        assert!(status.success(), "{cmd} exited with {status}");
    }
    std::fs::read_dir(out)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            (
                path.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&path).unwrap(),
            )
        })
        .collect()
}

#[test]
fn c8_bitwise_determinism_across_threads() {
    let dir = tempfile::tempdir().unwrap();
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, text) in [("twobytwo", SMALL_TWOBYTWO), ("elliptic", SMALL_ELLIPTIC)] {
        let config = dir.path().join(format!("{name}.toml"));
        std::fs::write(&config, text).unwrap();
        let one = run_all(&config, &dir.path().join(format!("{name}-1")), "1");
        let eight = run_all(&config, &dir.path().join(format!("{name}-8")), "8");
        let same = one == eight && one.len() == 7;
        pass &= same;
        detail.push(format!(
            "{name}: {} files {}",
            one.len(),
            if same { "identical" } else { "differ" }
        ));
    }
    report(8, "CLI output identical with 1 and 8 threads", pass, detail.join("; "));
}
