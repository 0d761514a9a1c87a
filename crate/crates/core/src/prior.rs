//! Gaussian prior `N(m_prior, C_prior)` with `C_prior⁻¹ = K M⁻¹ K`, where `K` is
//! the discretized `(I − Δ)` (stiffness plus mass) and `M` the mass matrix.
//!
//! Covariance, precision, and the Cameron–Martin inner product are all applied
//! through sparse solves with `K` and `M`; no operator square root is formed.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix, CsrMatrix};

use crate::error::{Error, Result};
use crate::linops::{
    cg_solve_with, check_len, csr_mul, CgOptions, CoefficientVector, FnOperator, LinearOperator, Space,
};

/// How `M⁻¹` is applied inside the precision.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum MassSolver {
    /// Sparse Cholesky factorization of `M`.
    #[default]
    Cholesky,
    /// Jacobi-preconditioned CG on `M` to the given relative tolerance.
    Cg { rel_tol: f64 },
    /// Row-sum lumped mass; covariance uses the same lumped `M`.
    Lumped,
}

enum MassInverse {
    Factor(CscCholesky<f64>),
    Cg { rel_tol: f64, inv_diag: DVector<f64> },
    Lumped(DVector<f64>),
}

/// Gaussian prior with squared-inverse elliptic covariance.
pub struct GaussianPrior {
    mean: DVector<f64>,
    k_op: CsrMatrix<f64>,
    mass: CsrMatrix<f64>,
    k_factor: CscCholesky<f64>,
    mass_inverse: MassInverse,
}

impl std::fmt::Debug for GaussianPrior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GaussianPrior")
            .field("dim", &self.dim())
            .finish_non_exhaustive()
    }
}

pub(crate) fn factor_spd(a: &CsrMatrix<f64>, what: &str) -> Result<CscCholesky<f64>> {
    let csc = CscMatrix::from(a);
    CscCholesky::factor(&csc).map_err(|e| Error::SingularOperator(format!("{what} is not positive definite ({e:?})")))
}

pub(crate) fn cholesky_solve(f: &CscCholesky<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let mut b = DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice());
    f.solve_mut(&mut b);
    DVector::from_column_slice(b.as_slice())
}

impl GaussianPrior {
    /// Prior with precision `K M⁻¹ K`. `k_op` and `mass` must be symmetric positive definite.
    pub fn bilaplacian(
        k_op: CsrMatrix<f64>,
        mass: CsrMatrix<f64>,
        mean: DVector<f64>,
        mass_solver: MassSolver,
    ) -> Result<Self> {
        let n = k_op.nrows();
        check_len("prior operator (square)", n, k_op.ncols())?;
        check_len("prior mass", n, mass.nrows())?;
        check_len("prior mass (square)", n, mass.ncols())?;
        check_len("prior mean", n, mean.len())?;
        let k_factor = factor_spd(&k_op, "prior elliptic operator")?;
        let diag = csr_diagonal(&mass);
        if diag.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::SingularOperator(
                "prior mass matrix has a nonpositive diagonal".into(),
            ));
        }
        let mass_inverse = match mass_solver {
            MassSolver::Cholesky => MassInverse::Factor(factor_spd(&mass, "mass matrix")?),
            MassSolver::Cg { rel_tol } => MassInverse::Cg {
                rel_tol,
                inv_diag: diag.map(|d| 1.0 / d),
            },
            MassSolver::Lumped => {
                let ones = DVector::from_element(n, 1.0);
                MassInverse::Lumped(csr_mul(&mass, &ones))
            }
        };
        Ok(Self {
            mean,
            k_op,
            mass,
            k_factor,
            mass_inverse,
        })
    }

    /// Standard normal prior `N(0, I)` on `ℝ^dim`.
    pub fn identity(dim: usize) -> Result<Self> {
        let id = CsrMatrix::from(
            &CooMatrix::try_from_triplets(dim, dim, (0..dim).collect(), (0..dim).collect(), vec![1.0; dim])
                .expect("identity triplets"),
        );
        Self::bilaplacian(id.clone(), id, DVector::zeros(dim), MassSolver::Cholesky)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// The elliptic operator `K`.
    pub fn elliptic_operator(&self) -> &CsrMatrix<f64> {
        &self.k_op
    }

    /// The mass matrix in effect (lumped if configured).
    pub fn mass_matrix(&self) -> CsrMatrix<f64> {
        match &self.mass_inverse {
            MassInverse::Lumped(d) => {
                let n = d.len();
                CsrMatrix::from(
                    &CooMatrix::try_from_triplets(n, n, (0..n).collect(), (0..n).collect(), d.as_slice().to_vec())
                        .expect("diagonal triplets"),
                )
            }
            _ => self.mass.clone(),
        }
    }

    fn apply_mass(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.mass_inverse {
            MassInverse::Lumped(d) => v.component_mul(d),
            _ => csr_mul(&self.mass, v),
        }
    }

    fn solve_mass(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.mass_inverse {
            MassInverse::Factor(f) => Ok(cholesky_solve(f, v)),
            MassInverse::Lumped(d) => Ok(v.component_div(d)),
            MassInverse::Cg { rel_tol, inv_diag } => {
                let mass = &self.mass;
                let op = FnOperator::new(mass.nrows(), mass.ncols(), Space::Parameter, Space::Dual, true, |x| {
                    Ok(csr_mul(mass, x))
                });
                let mut opts = CgOptions::new(*rel_tol, 10 * mass.nrows().max(10));
                opts.jacobi = Some(inv_diag.clone());
                let rhs = CoefficientVector::new(Space::Dual, v.clone())?;
                Ok(cg_solve_with(&op, &rhs, &opts)?.into_values())
            }
        }
    }

    /// `C_prior v = K⁻¹ M K⁻¹ v` for a dual vector `v`.
    pub fn apply_cov(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("prior covariance", self.dim(), v.len())?;
        let w = cholesky_solve(&self.k_factor, v);
        Ok(cholesky_solve(&self.k_factor, &self.apply_mass(&w)))
    }

    /// `C_prior⁻¹ v = K M⁻¹ K v`, returning a dual vector.
    pub fn apply_precision(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("prior precision", self.dim(), v.len())?;
        let w = self.solve_mass(&csr_mul(&self.k_op, v))?;
        Ok(csr_mul(&self.k_op, &w))
    }

    /// Cameron–Martin inner product `xᵀ K M⁻¹ K y`.
    pub fn cm_inner(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        check_len("cm inner", self.dim(), x.len())?;
        check_len("cm inner", self.dim(), y.len())?;
        let kx = csr_mul(&self.k_op, x);
        let ky = csr_mul(&self.k_op, y);
        Ok(kx.dot(&self.solve_mass(&ky)?))
    }

    /// The precision as an operator (parameter → dual).
    pub fn precision_operator(&self) -> impl LinearOperator + '_ {
        let n = self.dim();
        FnOperator::new(n, n, Space::Parameter, Space::Dual, true, move |x| {
            self.apply_precision(x)
        })
    }

    /// The covariance as an operator (dual → parameter).
    pub fn covariance_operator(&self) -> impl LinearOperator + '_ {
        let n = self.dim();
        FnOperator::new(n, n, Space::Dual, Space::Parameter, true, move |x| self.apply_cov(x))
    }
}

fn csr_diagonal(a: &CsrMatrix<f64>) -> DVector<f64> {
    let mut d = DVector::zeros(a.nrows());
    for (i, row) in a.row_iter().enumerate() {
        for (&j, &v) in row.col_indices().iter().zip(row.values()) {
            if i == j {
                d[i] += v;
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elliptic::{EllipticAssembly, UnitSquareMesh};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense(a: &CsrMatrix<f64>) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(a.nrows(), a.ncols());
        for (i, row) in a.row_iter().enumerate() {
            for (&j, &v) in row.col_indices().iter().zip(row.values()) {
                d[(i, j)] += v;
            }
        }
        d
    }

    fn prior_n8(solver: MassSolver) -> (GaussianPrior, EllipticAssembly) {
        let mesh = UnitSquareMesh::new(8).unwrap();
        let asm = EllipticAssembly::assemble(&mesh, &[]).unwrap();
        let k = &asm.stiffness + &asm.mass;
        let n = mesh.num_nodes();
        (
            GaussianPrior::bilaplacian(k, asm.mass.clone(), DVector::zeros(n), solver).unwrap(),
            asm,
        )
    }

    fn random_vec(n: usize, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5)
    }

    #[test]
    fn covariance_inverts_precision_roundtrip() {
        let (prior, _) = prior_n8(MassSolver::Cholesky);
        let w = random_vec(prior.dim(), 1);
        let v = prior.apply_precision(&w).unwrap();
        let back = prior.apply_cov(&v).unwrap();
        assert!((&back - &w).amax() <= 1e-8 * w.amax());
        let fwd = prior.apply_precision(&prior.apply_cov(&w).unwrap()).unwrap();
        assert!((&fwd - &w).amax() <= 1e-8 * w.amax());
    }

    #[test]
    fn matches_dense_oracle_on_n8() {
        let (prior, asm) = prior_n8(MassSolver::Cholesky);
        let k = dense(&(&asm.stiffness + &asm.mass));
        let m = dense(&asm.mass);
        let k_inv = k.clone().try_inverse().unwrap();
        let m_inv = m.clone().try_inverse().unwrap();
        let cov = &k_inv * &m * &k_inv;
        let prec = &k * &m_inv * &k;
        let ones = DVector::from_element(prior.dim(), 1.0);
        let got = prior.apply_cov(&ones).unwrap();
        let want = &cov * &ones;
        assert!((&got - &want).amax() <= 1e-10 * want.amax());
        let x = random_vec(prior.dim(), 2);
        let y = random_vec(prior.dim(), 3);
        let got = prior.apply_precision(&x).unwrap();
        let want = &prec * &x;
        assert!((&got - &want).amax() <= 1e-10 * want.amax());
        let cm = prior.cm_inner(&x, &y).unwrap();
        let want = x.dot(&(&prec * &y));
        assert!((cm - want).abs() <= 1e-10 * want.abs().max(1.0));
    }

    #[test]
    fn cg_and_cholesky_mass_solvers_agree() {
        let (chol, _) = prior_n8(MassSolver::Cholesky);
        let (cg, _) = prior_n8(MassSolver::Cg { rel_tol: 1e-12 });
        let x = random_vec(chol.dim(), 4);
        let a = chol.apply_precision(&x).unwrap();
        let b = cg.apply_precision(&x).unwrap();
        assert!((&a - &b).norm() <= 1e-10 * a.norm());
    }

    #[test]
    fn lumped_pair_is_consistent() {
        let (prior, _) = prior_n8(MassSolver::Lumped);
        let w = random_vec(prior.dim(), 5);
        let back = prior.apply_cov(&prior.apply_precision(&w).unwrap()).unwrap();
        assert!((&back - &w).amax() <= 1e-8 * w.amax());
    }

    #[test]
    fn identity_prior() {
        let prior = GaussianPrior::identity(2).unwrap();
        let v = DVector::from_vec(vec![0.3, -2.0]);
        assert_eq!(prior.apply_cov(&v).unwrap(), v);
        assert_eq!(prior.apply_precision(&v).unwrap(), v);
        assert_eq!(prior.cm_inner(&v, &v).unwrap(), v.dot(&v));
    }

    #[test]
    fn covariance_is_positive_and_cm_symmetric() {
        let (prior, _) = prior_n8(MassSolver::Cholesky);
        for seed in 0..100 {
            let v = random_vec(prior.dim(), 100 + seed);
            let c = prior.apply_cov(&v).unwrap();
            // vᵀ C v ≥ 0, equivalently ‖C v‖²_{C⁻¹} ≥ 0
            assert!(prior.cm_inner(&c, &c).unwrap() >= 0.0);
            assert!(v.dot(&c) >= 0.0);
            let w = random_vec(prior.dim(), 500 + seed);
            let xy = prior.cm_inner(&v, &w).unwrap();
            let yx = prior.cm_inner(&w, &v).unwrap();
            assert!((xy - yx).abs() <= 1e-12 * xy.abs().max(1.0));
        }
    }
}
