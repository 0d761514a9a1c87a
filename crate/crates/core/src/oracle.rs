//! Independent reference computations used to check the adjoint machinery:
//! finite differences, a dense-matrix posterior, and a pick-freeze Sobol
//! estimator. Everything here uses only public model operations.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bayes::InverseProblem;
use crate::error::{Error, Result};
use crate::linops::{check_len, pairwise_sum, SolveCounter};
use crate::model::solve_state;

/// Largest parameter dimension the dense oracle will assemble.
pub const DENSE_LIMIT: usize = 2000;

/// Central-difference gradient with step `h` in every coordinate.
pub fn fd_gradient(f: impl Fn(&[f64]) -> Result<f64>, theta: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut t = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        t[j] = theta[j] + h;
        let fp = f(&t)?;
        t[j] = theta[j] - h;
        let fm = f(&t)?;
        t[j] = theta[j];
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Finite-difference gradient and which coordinates used a one-sided stencil.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReference {
    pub grad: Vec<f64>,
    pub one_sided: Vec<bool>,
}

/// Richardson-extrapolated differences: fourth order from central steps
/// `{h, h/2}`, third order from one-sided steps `{h, h/2, h/4}`. One-sided
/// stencils are used when a central one would leave `bounds`.
pub fn richardson_gradient(
    f: impl Fn(&[f64]) -> Result<f64>,
    theta: &[f64],
    h: f64,
    bounds: &[(f64, f64)],
) -> Result<GradientReference> {
    check_len("gradient bounds", theta.len(), bounds.len())?;
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("step {h} must be positive")));
    }
    let mut t = theta.to_vec();
    let mut eval = |j: usize, x: f64| -> Result<f64> {
        t[j] = x;
        let v = f(&t);
        t[j] = theta[j];
        v
    };
    let mut out = GradientReference {
        grad: Vec::with_capacity(theta.len()),
        one_sided: Vec::with_capacity(theta.len()),
    };
    for (j, (&x, &(lo, hi))) in theta.iter().zip(bounds).enumerate() {
        if x - h >= lo && x + h <= hi {
            let d = |s: f64, e: &mut dyn FnMut(usize, f64) -> Result<f64>| -> Result<f64> {
                Ok((e(j, x + s)? - e(j, x - s)?) / (2.0 * s))
            };
            let d1 = d(h, &mut eval)?;
            let d2 = d(h / 2.0, &mut eval)?;
            out.grad.push((4.0 * d2 - d1) / 3.0);
            out.one_sided.push(false);
        } else {
            let dir = if x + h <= hi {
                1.0
            } else if x - h >= lo {
                -1.0
            } else {
                return Err(Error::InvalidInput(format!("box [{lo}, {hi}] too narrow for step {h}")));
            };
            let f0 = eval(j, x)?;
            let d1 = (eval(j, x + dir * h)? - f0) / (dir * h);
            let d2 = (eval(j, x + dir * h / 2.0)? - f0) / (dir * h / 2.0);
            let d4 = (eval(j, x + dir * h / 4.0)? - f0) / (dir * h / 4.0);
            let (r1, r2) = (2.0 * d2 - d1, 2.0 * d4 - d2);
            out.grad.push((4.0 * r2 - r1) / 3.0);
            out.one_sided.push(true);
        }
    }
    Ok(out)
}

/// Dense representation of the affine parameter-to-observable map
/// `m ↦ G m + f` together with the prior precision.
#[derive(Debug, Clone)]
pub struct DenseProblem {
    pub forward: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub precision: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    pub prior_mean: DVector<f64>,
    pub noise_variance: DVector<f64>,
    pub u_obs: DVector<f64>,
}

fn dense_from_csr(a: &nalgebra_sparse::CsrMatrix<f64>) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(a.nrows(), a.ncols());
    for (i, row) in a.row_iter().enumerate() {
        for (&j, &v) in row.col_indices().iter().zip(row.values()) {
            d[(i, j)] += v;
        }
    }
    d
}

/// Builds `G` column by column with one state solve per parameter coordinate.
pub fn assemble_dense(ip: &InverseProblem, theta: &[f64]) -> Result<DenseProblem> {
    let model = ip.model();
    let dims = model.dims();
    if dims.parameter > DENSE_LIMIT {
        return Err(Error::DimensionGuard {
            dim: dims.parameter,
            max: DENSE_LIMIT,
        });
    }
    let counter = SolveCounter::new();
    let n = dims.parameter;
    let offset = model.observe(&solve_state(model, &DVector::zeros(n), theta, &counter)?)?;
    let mut forward = DMatrix::zeros(dims.observation, n);
    let mut e = DVector::zeros(n);
    for j in 0..n {
        e[j] = 1.0;
        let col = model.observe(&solve_state(model, &e, theta, &counter)?)? - &offset;
        forward.set_column(j, &col);
        e[j] = 0.0;
    }
    let prior = ip.prior();
    let k = dense_from_csr(prior.elliptic_operator());
    let mass = Cholesky::new(dense_from_csr(&prior.mass_matrix()))
        .ok_or_else(|| Error::SingularOperator("dense mass matrix".into()))?;
    let m_dense = dense_from_csr(&prior.mass_matrix());
    let precision = &k * mass.solve(&k);
    let k_chol = Cholesky::new(k).ok_or_else(|| Error::SingularOperator("dense prior operator".into()))?;
    let covariance = k_chol.solve(&(m_dense * k_chol.inverse()));
    Ok(DenseProblem {
        forward,
        offset,
        precision: (&precision + precision.transpose()) * 0.5,
        covariance: (&covariance + covariance.transpose()) * 0.5,
        prior_mean: prior.mean().clone(),
        noise_variance: ip.data().noise_variance.clone(),
        u_obs: ip.data().u_obs.clone(),
    })
}

/// Posterior quantities computed with dense factorizations.
#[derive(Debug, Clone)]
pub struct DenseKld {
    pub phi_ig: f64,
    pub phi_ig_bar: f64,
    pub m_post: DVector<f64>,
    /// All generalized eigenvalues of `H ψ = γ R ψ`, nonincreasing.
    pub gammas: Vec<f64>,
}

impl DenseProblem {
    /// `H = Gᵀ Γ⁻¹ G`.
    pub fn misfit_hessian(&self) -> DMatrix<f64> {
        let mut weighted = self.forward.clone();
        for (mut row, &s2) in weighted.row_iter_mut().zip(self.noise_variance.iter()) {
            row /= s2;
        }
        let h = self.forward.transpose() * weighted;
        (&h + h.transpose()) * 0.5
    }

    /// Everything is computed in data space, which only factors the small
    /// `G C Gᵀ + Γ` and never the ill-conditioned precision.
    pub fn kld(&self) -> Result<DenseKld> {
        let gc = &self.forward * &self.covariance;
        let gcg = &gc * self.forward.transpose();
        let sd = self.noise_variance.map(f64::sqrt);
        let mut s = gcg.clone();
        for i in 0..s.nrows() {
            for j in 0..s.ncols() {
                s[(i, j)] /= sd[i] * sd[j];
            }
        }
        let s = (&s + s.transpose()) * 0.5;
        let data_gammas = SymmetricEigen::new(s).eigenvalues;
        let log_term: f64 = data_gammas.iter().map(|g| g.max(0.0).ln_1p()).sum();
        let trace_term: f64 = data_gammas.iter().map(|g| g.max(0.0) / (1.0 + g.max(0.0))).sum();

        let mut sys = gcg.clone();
        for i in 0..sys.nrows() {
            sys[(i, i)] += self.noise_variance[i];
        }
        let sys = Cholesky::new((&sys + sys.transpose()) * 0.5)
            .ok_or_else(|| Error::SingularOperator("dense data-space system".into()))?;
        let residual = &self.u_obs - &self.offset - &self.forward * &self.prior_mean;
        let y = sys.solve(&residual);
        let m_post = &self.prior_mean + gc.transpose() * &y;
        let map_term = y.dot(&(&gcg * &y));
        let phi_ig = 0.5 * (log_term - trace_term + map_term);

        // nonzero pencil eigenvalues, exactly; the rest are zero
        let mut gammas: Vec<f64> = data_gammas.iter().map(|g| g.max(0.0)).collect();
        gammas.sort_by(|a, b| b.total_cmp(a));
        gammas.resize(self.forward.ncols().max(gammas.len()), 0.0);
        Ok(DenseKld {
            phi_ig,
            phi_ig_bar: 0.5 * log_term,
            m_post,
            gammas,
        })
    }
}

/// Dense `Φ_IG`, `Φ̄_IG`, MAP point, and spectrum at θ.
pub fn dense_kld(ip: &InverseProblem, theta: &[f64]) -> Result<DenseKld> {
    assemble_dense(ip, theta)?.kld()
}

/// Total Sobol indices with their batch standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct SobolEstimate {
    pub total: Vec<f64>,
    pub std_err: Vec<f64>,
    pub variance: f64,
}

const SOBOL_BATCHES: usize = 10;

/// Jansen pick-freeze estimator of total Sobol indices for independent uniform
/// inputs on `bounds`. Sample `k` draws from its own counter-based stream, so
/// results do not depend on thread count.
pub fn pick_freeze_total_sobol(
    f: impl Fn(&[f64]) -> Result<f64> + Sync,
    bounds: &[(f64, f64)],
    n: usize,
    seed: u64,
) -> Result<SobolEstimate> {
    let d = bounds.len();
    if n < 2 * SOBOL_BATCHES {
        return Err(Error::InvalidInput(format!(
            "pick-freeze needs at least {} samples",
            2 * SOBOL_BATCHES
        )));
    }
    let rows: Vec<(f64, f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut draw = || -> Vec<f64> {
                bounds
                    .iter()
                    .map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
                    .collect()
            };
            let a = draw();
            let b = draw();
            let fa = f(&a)?;
            let fb = f(&b)?;
            let mut sq = Vec::with_capacity(d);
            for i in 0..d {
                let mut ab = a.clone();
                ab[i] = b[i];
                sq.push((fa - f(&ab)?).powi(2));
            }
            Ok((fa, fb, sq))
        })
        .collect::<Result<_>>()?;

    let estimate = |range: std::ops::Range<usize>| -> (Vec<f64>, f64) {
        let values: Vec<f64> = rows[range.clone()].iter().flat_map(|r| [r.0, r.1]).collect();
        let mean = pairwise_sum(&values) / values.len() as f64;
        let dev: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
        let var = pairwise_sum(&dev) / (values.len() - 1) as f64;
        let m = range.len() as f64;
        let total = (0..d)
            .map(|i| {
                let s: Vec<f64> = rows[range.clone()].iter().map(|r| r.2[i]).collect();
                pairwise_sum(&s) / (2.0 * m * var)
            })
            .collect();
        (total, var)
    };
    let (total, variance) = estimate(0..n);
    if !(variance > 1e-14) {
        return Err(Error::DegenerateVariance(variance));
    }
    let batch = n / SOBOL_BATCHES;
    let batches: Vec<Vec<f64>> = (0..SOBOL_BATCHES)
        .map(|b| estimate(b * batch..(b + 1) * batch).0)
        .collect();
    let std_err = (0..d)
        .map(|i| {
            let vals: Vec<f64> = batches.iter().map(|b| b[i]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
            (var / vals.len() as f64).sqrt()
        })
        .collect();
    Ok(SobolEstimate {
        total,
        std_err,
        variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_gradient_of_quadratic() {
        let g = fd_gradient(|t| Ok(t[0] * t[0] + 3.0 * t[1]), &[2.0, 1.0], 1e-4).unwrap();
        assert!((g[0] - 4.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn richardson_is_third_order_one_sided() {
        let f = |t: &[f64]| Ok(t[0].exp());
        let g1 = richardson_gradient(f, &[0.0], 1e-1, &[(0.0, 1.0)]).unwrap();
        let g2 = richardson_gradient(f, &[0.0], 5e-2, &[(0.0, 1.0)]).unwrap();
        assert!(g1.one_sided[0]);
        let (e1, e2) = ((g1.grad[0] - 1.0).abs(), (g2.grad[0] - 1.0).abs());
        assert!(e1 / e2 > 7.0, "ratio {}", e1 / e2);
        let g = richardson_gradient(f, &[1.0], 1e-2, &[(0.0, 1.0)]).unwrap();
        assert!(g.one_sided[0] && (g.grad[0] - 1f64.exp()).abs() < 1e-4);
        assert!(richardson_gradient(f, &[0.5], 1.0, &[(0.0, 1.0)]).is_err());
    }

    #[test]
    fn sobol_of_additive_function() {
        // f = x + 2y on [0,1]²: total indices 1/5 and 4/5
        let est = pick_freeze_total_sobol(|t| Ok(t[0] + 2.0 * t[1]), &[(0.0, 1.0); 2], 20_000, 9).unwrap();
        assert!((est.total[0] - 0.2).abs() < 4.0 * est.std_err[0] + 0.01);
        assert!((est.total[1] - 0.8).abs() < 4.0 * est.std_err[1] + 0.01);
        assert!(matches!(
            pick_freeze_total_sobol(|_| Ok(1.0), &[(0.0, 1.0)], 100, 1),
            Err(Error::DegenerateVariance(_))
        ));
    }
}
