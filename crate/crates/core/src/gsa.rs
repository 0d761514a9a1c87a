//! Derivative-based global sensitivity measures and the total Sobol upper bound
//!
//! ```text
//! S_tot,i ≤ C(F_i) E[(∂Φ/∂θ_i)²] / Var(Φ)
//! ```
//!
//! estimated by sample averages over θ drawn uniformly from `[−1, 1]^n`, where θ
//! parameterizes relative perturbations of the nominal values.

use std::f64::consts::PI;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bayes::InverseProblem;
use crate::error::{Error, Result};
use crate::hdsa::info_gain_gradient;
use crate::linops::{check_len, pairwise_sum};
use crate::model::ThetaVector;

/// Variance below which bounds cannot be normalized.
pub const MIN_VARIANCE: f64 = 1e-14;

const BATCHES: usize = 10;

/// `ϑ_i = (1 + α θ_i) ϑ̄_i` for `θ ∈ [−1, 1]^n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationMap {
    nominal: Vec<f64>,
    alpha: f64,
}

impl PerturbationMap {
    pub fn new(nominal: Vec<f64>, alpha: f64) -> Result<Self> {
        if nominal.iter().any(|&v| v == 0.0 || !v.is_finite()) {
            return Err(Error::InvalidInput(
                "perturbation nominal values must be finite and nonzero".into(),
            ));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "uncertainty level {alpha} must be nonnegative"
            )));
        }
        Ok(Self { nominal, alpha })
    }

    pub fn nominal(&self) -> &[f64] {
        &self.nominal
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.nominal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nominal.is_empty()
    }

    pub fn to_physical(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.nominal)
            .map(|(&t, &n)| (1.0 + self.alpha * t) * n)
            .collect()
    }

    /// Inverse of [`Self::to_physical`]; requires `α > 0`.
    pub fn to_perturbation(&self, physical: &[f64]) -> Result<Vec<f64>> {
        if self.alpha == 0.0 {
            return Err(Error::SingularOperator(
                "perturbation map with zero uncertainty level".into(),
            ));
        }
        Ok(physical
            .iter()
            .zip(&self.nominal)
            .map(|(&v, &n)| (v / n - 1.0) / self.alpha)
            .collect())
    }

    /// `∂Φ/∂θ_i = α ϑ̄_i ∂Φ/∂ϑ_i`.
    pub fn remap_gradient(&self, grad_physical: &[f64]) -> Vec<f64> {
        grad_physical
            .iter()
            .zip(&self.nominal)
            .map(|(&g, &n)| self.alpha * n * g)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InputDistribution {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, std_dev: f64 },
}

/// Optimal Poincaré constant; only uniform inputs are supported.
pub fn poincare_constant(dist: &InputDistribution) -> Result<f64> {
    match *dist {
        InputDistribution::Uniform { lo, hi } if lo < hi => Ok((hi - lo).powi(2) / (PI * PI)),
        InputDistribution::Uniform { lo, hi } => Err(Error::InvalidInput(format!("empty interval [{lo}, {hi}]"))),
        other => Err(Error::UnsupportedDistribution(format!("{other:?}"))),
    }
}

/// What happens when a sample fails.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum FailurePolicy {
    #[default]
    Abort,
    /// Drop failed samples and flag the report.
    Skip,
}

/// Scalar quantity whose sensitivity is measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Quantity {
    #[default]
    InformationGain,
    ExpectedInformationGain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgsmReport {
    pub names: Vec<String>,
    /// `E[(∂Φ/∂θ_i)²]`.
    pub dgsm: Vec<f64>,
    pub poincare: Vec<f64>,
    pub bound: Vec<f64>,
    /// Standard error of each bound from 10 contiguous batches.
    pub bound_std_err: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    pub n_samples: usize,
    pub n_failed: usize,
    pub seed: u64,
    /// Set when samples were skipped.
    pub flagged: bool,
}

/// The `k`-th point of the seeded uniform sample on `[−1, 1]^dim`. Each index
/// has its own stream, so the value is independent of evaluation order.
pub fn sample_point(seed: u64, k: usize, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    (0..dim).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect()
}

struct Moments {
    mean: f64,
    variance: f64,
    dgsm: Vec<f64>,
}

fn moments(samples: &[(f64, Vec<f64>)], dim: usize) -> Moments {
    let n = samples.len() as f64;
    let values: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let mean = pairwise_sum(&values) / n;
    let dev: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    let variance = pairwise_sum(&dev) / (n - 1.0);
    let dgsm = (0..dim)
        .map(|i| {
            let sq: Vec<f64> = samples.iter().map(|s| s.1[i] * s.1[i]).collect();
            pairwise_sum(&sq) / n
        })
        .collect();
    Moments { mean, variance, dgsm }
}

/// Bounds for an arbitrary `f: θ ↦ (Φ, ∇Φ)` on `[−1, 1]^n`.
pub fn dgsm_bound_fn(
    f: impl Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Sync,
    names: &[String],
    n_samples: usize,
    seed: u64,
    policy: FailurePolicy,
) -> Result<DgsmReport> {
    if n_samples < 2 {
        return Err(Error::InvalidInput("at least two samples are required".into()));
    }
    let dim = names.len();
    let results: Vec<Result<(f64, Vec<f64>)>> = (0..n_samples)
        .into_par_iter()
        .map(|k| {
            let (value, grad) = f(&sample_point(seed, k, dim))?;
            check_len("sample gradient", dim, grad.len())?;
            if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite("sensitivity sample"));
            }
            Ok((value, grad))
        })
        .collect();
    let mut samples = Vec::with_capacity(n_samples);
    let mut n_failed = 0;
    for (k, r) in results.into_iter().enumerate() {
        match (r, policy) {
            (Ok(s), _) => samples.push(s),
            (Err(e), FailurePolicy::Abort) => return Err(e),
            (Err(e), FailurePolicy::Skip) => {
                log::warn!("skipping sample {k}: {e}");
                n_failed += 1;
            }
        }
    }
    if samples.len() < 2 {
        return Err(Error::InvalidInput(format!("only {} samples succeeded", samples.len())));
    }
    let m = moments(&samples, dim);
    if !(m.variance > MIN_VARIANCE) {
        return Err(Error::DegenerateVariance(m.variance));
    }
    let c = poincare_constant(&InputDistribution::Uniform { lo: -1.0, hi: 1.0 })?;
    let bound: Vec<f64> = m.dgsm.iter().map(|d| c * d / m.variance).collect();

    let per_batch = samples.len() / BATCHES;
    let bound_std_err = if per_batch >= 2 {
        let batch_bounds: Vec<Vec<f64>> = samples
            .chunks_exact(per_batch)
            .take(BATCHES)
            .map(|chunk| {
                let b = moments(chunk, dim);
                b.dgsm.iter().map(|d| c * d / b.variance.max(MIN_VARIANCE)).collect()
            })
            .collect();
        (0..dim)
            .map(|i| {
                let vals: Vec<f64> = batch_bounds.iter().map(|b| b[i]).collect();
                let mean = vals.iter().sum::<f64>() / BATCHES as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (BATCHES - 1) as f64;
                (var / BATCHES as f64).sqrt()
            })
            .collect()
    } else {
        vec![f64::NAN; dim]
    };

    Ok(DgsmReport {
        names: names.to_vec(),
        dgsm: m.dgsm,
        poincare: vec![c; dim],
        bound,
        bound_std_err,
        mean: m.mean,
        variance: m.variance,
        n_samples,
        n_failed,
        seed,
        flagged: n_failed > 0,
    })
}

/// Settings for [`dgsm_bound`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DgsmOptions {
    pub n_samples: usize,
    pub seed: u64,
    pub rank: usize,
    pub oversample: usize,
    pub eig_seed: u64,
    pub quantity: Quantity,
    pub policy: FailurePolicy,
}

/// Bounds for `Φ_IG` (or `Φ̄_IG`) of an inverse problem with fixed data. Each
/// sample runs the full sensitivity pipeline on its own fork of `ip`.
pub fn dgsm_bound(
    ip: &InverseProblem,
    template: &ThetaVector,
    pmap: &PerturbationMap,
    opts: &DgsmOptions,
) -> Result<DgsmReport> {
    check_len("perturbation map", template.len(), pmap.len())?;
    let f = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
        let physical = template.with_values(&pmap.to_physical(theta))?;
        let report = info_gain_gradient(&ip.fork(), &physical, opts.rank, opts.oversample, opts.eig_seed)?;
        Ok(match opts.quantity {
            Quantity::InformationGain => (report.phi_ig, pmap.remap_gradient(&report.grad_phi_ig)),
            Quantity::ExpectedInformationGain => (report.phi_ig_bar, pmap.remap_gradient(&report.grad_phi_ig_bar)),
        })
    };
    dgsm_bound_fn(f, template.names(), opts.n_samples, opts.seed, opts.policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::twobytwo::TwoByTwoSetup;

    #[test]
    fn poincare_constants() {
        let c = |lo, hi| poincare_constant(&InputDistribution::Uniform { lo, hi }).unwrap();
        assert!((c(-1.0, 1.0) - 0.405_284_7).abs() < 1e-7);
        assert!((c(0.0, 1.0) - 1.0 / (PI * PI)).abs() < 1e-15);
        assert!((c(-2.0, 2.0) - 16.0 / (PI * PI)).abs() < 1e-14);
        assert!(matches!(
            poincare_constant(&InputDistribution::Normal {
                mean: 0.0,
                std_dev: 1.0
            }),
            Err(Error::UnsupportedDistribution(_))
        ));
    }

    #[test]
    fn perturbation_map_roundtrip_and_remap() {
        let p = PerturbationMap::new(vec![1.0, 0.1], 0.05).unwrap();
        let phys = p.to_physical(&[1.0, -1.0]);
        assert!((phys[0] - 1.05).abs() < 1e-15 && (phys[1] - 0.095).abs() < 1e-15);
        let back = p.to_perturbation(&phys).unwrap();
        assert!((back[0] - 1.0).abs() < 1e-12 && (back[1] + 1.0).abs() < 1e-12);
        assert_eq!(
            PerturbationMap::new(vec![2.0], 0.0).unwrap().remap_gradient(&[5.0]),
            vec![0.0]
        );
        assert_eq!(
            PerturbationMap::new(vec![1.0, 1.0], 1.0)
                .unwrap()
                .remap_gradient(&[3.0, -2.0]),
            vec![3.0, -2.0]
        );
        assert!(PerturbationMap::new(vec![0.0], 0.05).is_err());
    }

    #[test]
    fn linear_function_bound() {
        let names = vec!["a".to_string()];
        let r = dgsm_bound_fn(|t| Ok((3.0 * t[0], vec![3.0])), &names, 4000, 5, FailurePolicy::Abort).unwrap();
        // Var(3θ) = 3 on U(−1, 1), so the bound tends to (4/π²)·9/3
        assert!((r.bound[0] - 12.0 / (PI * PI)).abs() < 0.05 * 12.0 / (PI * PI));
        assert!(r.bound[0] >= 1.0);
    }

    #[test]
    fn constant_quantity_is_degenerate() {
        let names = vec!["a".to_string()];
        assert!(matches!(
            dgsm_bound_fn(|_| Ok((1.0, vec![0.0])), &names, 10, 1, FailurePolicy::Abort),
            Err(Error::DegenerateVariance(_))
        ));
    }

    #[test]
    fn failure_policies() {
        let names = vec!["a".to_string()];
        let f = |t: &[f64]| {
            if t[0] > 0.8 {
                Err(Error::NonConvergence {
                    iterations: 1,
                    residual: 1.0,
                })
            } else {
                Ok((t[0], vec![1.0]))
            }
        };
        assert!(dgsm_bound_fn(f, &names, 200, 3, FailurePolicy::Abort).is_err());
        let r = dgsm_bound_fn(f, &names, 200, 3, FailurePolicy::Skip).unwrap();
        assert!(r.flagged && r.n_failed > 0);
    }

    #[test]
    fn sampling_is_order_independent() {
        let a: Vec<Vec<f64>> = (0..50).map(|k| sample_point(9, k, 3)).collect();
        let b: Vec<Vec<f64>> = (0..50).rev().map(|k| sample_point(9, k, 3)).collect();
        assert_eq!(a, b.into_iter().rev().collect::<Vec<_>>());
        assert!(a.iter().flatten().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn twobytwo_bounds_are_reproducible_and_nonnegative() {
        let setup = TwoByTwoSetup::default();
        let ip = setup.inverse_problem().unwrap();
        let template = setup.theta_template();
        let pmap = PerturbationMap::new(vec![0.5, 0.5], 0.8).unwrap();
        let opts = DgsmOptions {
            n_samples: 100,
            seed: 11,
            rank: 2,
            oversample: 10,
            eig_seed: 1,
            quantity: Quantity::InformationGain,
            policy: FailurePolicy::Abort,
        };
        let a = dgsm_bound(&ip, &template, &pmap, &opts).unwrap();
        let b = dgsm_bound(&ip, &template, &pmap, &opts).unwrap();
        assert_eq!(a, b);
        assert!(a.bound.iter().all(|&x| x >= 0.0));
    }
}
