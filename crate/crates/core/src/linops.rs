//! Coefficient vectors, linear operators, and the two iterative kernels everything
//! else is built from: preconditioned conjugate gradients and a double-pass
//! randomized solver for the generalized Hermitian eigenproblem `A ψ = γ B ψ`.
//!
//! PDE-solve accounting also lives here ([`SolveCounter`]), so every layer above
//! can report costs in the same units.

use std::fmt;
use std::ops::Sub;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use nalgebra_sparse::CsrMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Eigenvalues at or below this absolute floor are treated as numerically zero.
pub const EIGENVALUE_FLOOR: f64 = 1e-14;

/// Relative gap below which two neighbouring eigenvalues are reported as near-degenerate.
pub const DEGENERACY_GAP: f64 = 1e-8;

/// Default oversampling for the randomized eigensolver.
pub const DEFAULT_OVERSAMPLE: usize = 10;

/// Function space a coefficient vector belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Space {
    State,
    Adjoint,
    Parameter,
    Observation,
    /// Dual (load-vector) representation of a functional on some space.
    Dual,
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Space::State => "state",
            Space::Adjoint => "adjoint",
            Space::Parameter => "parameter",
            Space::Observation => "observation",
            Space::Dual => "dual",
        };
        f.write_str(s)
    }
}

/// Finite-dimensional representative of a function, tagged with its space.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientVector {
    values: DVector<f64>,
    space: Space,
}

impl CoefficientVector {
    pub fn new(space: Space, values: DVector<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coefficient vector"));
        }
        Ok(Self { values, space })
    }

    pub fn from_slice(space: Space, values: &[f64]) -> Result<Self> {
        Self::new(space, DVector::from_column_slice(values))
    }

    pub fn zeros(space: Space, len: usize) -> Self {
        Self {
            values: DVector::zeros(len),
            space,
        }
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn into_values(self) -> DVector<f64> {
        self.values
    }
}

/// A linear map between coefficient spaces.
///
/// Implementations must be immutable after construction; `apply` may be called
/// concurrently from several threads.
pub trait LinearOperator: Send + Sync {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn domain(&self) -> Space;
    fn range(&self) -> Space;
    /// Whether the operator is self-adjoint in the Euclidean coefficient pairing.
    fn is_symmetric(&self) -> bool;
    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    /// Applies the operator to a tagged vector, checking space and length.
    fn apply_vector(&self, x: &CoefficientVector) -> Result<CoefficientVector> {
        if x.len() != self.ncols() {
            return Err(Error::DimensionMismatch {
                context: "operator apply",
                expected: self.ncols(),
                found: x.len(),
            });
        }
        if x.space() != self.domain() {
            return Err(Error::InvalidInput(format!(
                "operator expects a {} vector, got {}",
                self.domain(),
                x.space()
            )));
        }
        CoefficientVector::new(self.range(), self.apply(x.values())?)
    }
}

/// Shared handle to an operator.
pub type OperatorHandle = Arc<dyn LinearOperator>;

/// Dense matrix operator.
#[derive(Debug, Clone)]
pub struct MatrixOperator {
    matrix: DMatrix<f64>,
    domain: Space,
    range: Space,
    symmetric: bool,
}

impl MatrixOperator {
    pub fn new(matrix: DMatrix<f64>, domain: Space, range: Space) -> Self {
        let symmetric = matrix.is_square() && {
            let scale = matrix.amax().max(f64::MIN_POSITIVE);
            (&matrix - matrix.transpose()).amax() <= 1e-12 * scale
        };
        Self {
            matrix,
            domain,
            range,
            symmetric,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl LinearOperator for MatrixOperator {
    fn nrows(&self) -> usize {
        self.matrix.nrows()
    }
    fn ncols(&self) -> usize {
        self.matrix.ncols()
    }
    fn domain(&self) -> Space {
        self.domain
    }
    fn range(&self) -> Space {
        self.range
    }
    fn is_symmetric(&self) -> bool {
        self.symmetric
    }
    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("matrix operator", self.matrix.ncols(), x.len())?;
        Ok(&self.matrix * x)
    }
}

/// Sparse (CSR) matrix operator.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    matrix: CsrMatrix<f64>,
    domain: Space,
    range: Space,
    symmetric: bool,
}

impl SparseOperator {
    /// The caller asserts symmetry; it is not checked.
    pub fn new(matrix: CsrMatrix<f64>, domain: Space, range: Space, symmetric: bool) -> Self {
        Self {
            matrix,
            domain,
            range,
            symmetric,
        }
    }
}

impl LinearOperator for SparseOperator {
    fn nrows(&self) -> usize {
        self.matrix.nrows()
    }
    fn ncols(&self) -> usize {
        self.matrix.ncols()
    }
    fn domain(&self) -> Space {
        self.domain
    }
    fn range(&self) -> Space {
        self.range
    }
    fn is_symmetric(&self) -> bool {
        self.symmetric
    }
    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("sparse operator", self.matrix.ncols(), x.len())?;
        Ok(csr_mul(&self.matrix, x))
    }
}

/// Matrix-free operator defined by a closure.
pub struct FnOperator<F> {
    dim: (usize, usize),
    domain: Space,
    range: Space,
    symmetric: bool,
    f: F,
}

impl<F> FnOperator<F>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync,
{
    pub fn new(nrows: usize, ncols: usize, domain: Space, range: Space, symmetric: bool, f: F) -> Self {
        Self {
            dim: (nrows, ncols),
            domain,
            range,
            symmetric,
            f,
        }
    }
}

impl<F> LinearOperator for FnOperator<F>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync,
{
    fn nrows(&self) -> usize {
        self.dim.0
    }
    fn ncols(&self) -> usize {
        self.dim.1
    }
    fn domain(&self) -> Space {
        self.domain
    }
    fn range(&self) -> Space {
        self.range
    }
    fn is_symmetric(&self) -> bool {
        self.symmetric
    }
    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("closure operator", self.dim.1, x.len())?;
        let y = (self.f)(x)?;
        check_len("closure operator output", self.dim.0, y.len())?;
        Ok(y)
    }
}

/// Sparse matrix-vector product.
pub fn csr_mul(a: &CsrMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    let mut y = DVector::zeros(a.nrows());
    for (i, row) in a.row_iter().enumerate() {
        y[i] = row
            .col_indices()
            .iter()
            .zip(row.values())
            .map(|(&j, &v)| v * x[j])
            .sum();
    }
    y
}

pub(crate) fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}

/// Inner product `⟨x, y⟩_W = xᵀ W y`; Euclidean when no weight is given.
#[derive(Clone, Default)]
pub struct InnerProduct {
    weight: Option<OperatorHandle>,
}

impl InnerProduct {
    pub fn euclidean() -> Self {
        Self { weight: None }
    }

    /// `weight` must be symmetric positive definite.
    pub fn weighted(weight: OperatorHandle) -> Self {
        Self { weight: Some(weight) }
    }

    pub fn inner(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        check_len("inner product", x.len(), y.len())?;
        match &self.weight {
            None => Ok(x.dot(y)),
            Some(w) => Ok(x.dot(&w.apply(y)?)),
        }
    }

    pub fn norm(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.inner(x, x)?.max(0.0).sqrt())
    }
}

/// Snapshot of PDE-solve counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolveCounts {
    pub state_solves: u64,
    pub adjoint_solves: u64,
    pub incremental_state_solves: u64,
    pub incremental_adjoint_solves: u64,
}

impl SolveCounts {
    pub fn incremental(&self) -> u64 {
        self.incremental_state_solves + self.incremental_adjoint_solves
    }

    pub fn state_and_adjoint(&self) -> u64 {
        self.state_solves + self.adjoint_solves
    }

    pub fn total(&self) -> u64 {
        self.incremental() + self.state_and_adjoint()
    }
}

impl Sub for SolveCounts {
    type Output = SolveCounts;

    fn sub(self, rhs: SolveCounts) -> SolveCounts {
        SolveCounts {
            state_solves: self.state_solves - rhs.state_solves,
            adjoint_solves: self.adjoint_solves - rhs.adjoint_solves,
            incremental_state_solves: self.incremental_state_solves - rhs.incremental_state_solves,
            incremental_adjoint_solves: self.incremental_adjoint_solves - rhs.incremental_adjoint_solves,
        }
    }
}

/// Thread-safe, monotone PDE-solve counter.
#[derive(Debug, Default)]
pub struct SolveCounter {
    state: AtomicU64,
    adjoint: AtomicU64,
    incremental_state: AtomicU64,
    incremental_adjoint: AtomicU64,
}

impl SolveCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_state(&self) {
        self.state.fetch_add(1, Ordering::Relaxed);
    }
    pub fn record_adjoint(&self) {
        self.adjoint.fetch_add(1, Ordering::Relaxed);
    }
    pub fn record_incremental_state(&self) {
        self.incremental_state.fetch_add(1, Ordering::Relaxed);
    }
    pub fn record_incremental_adjoint(&self) {
        self.incremental_adjoint.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> SolveCounts {
        SolveCounts {
            state_solves: self.state.load(Ordering::Relaxed),
            adjoint_solves: self.adjoint.load(Ordering::Relaxed),
            incremental_state_solves: self.incremental_state.load(Ordering::Relaxed),
            incremental_adjoint_solves: self.incremental_adjoint.load(Ordering::Relaxed),
        }
    }
}

/// Options for [`cg_solve_with`].
#[derive(Clone)]
pub struct CgOptions {
    pub rel_tol: f64,
    pub max_iter: usize,
    pub inner_product: InnerProduct,
    /// Inverse diagonal for Jacobi preconditioning (Euclidean inner product only).
    pub jacobi: Option<DVector<f64>>,
}

impl CgOptions {
    pub fn new(rel_tol: f64, max_iter: usize) -> Self {
        Self {
            rel_tol,
            max_iter,
            inner_product: InnerProduct::euclidean(),
            jacobi: None,
        }
    }
}

/// Conjugate gradients for `op · x = rhs` with `op` symmetric positive definite.
pub fn cg_solve(
    op: &dyn LinearOperator,
    rhs: &CoefficientVector,
    rel_tol: f64,
    max_iter: usize,
) -> Result<CoefficientVector> {
    cg_solve_with(op, rhs, &CgOptions::new(rel_tol, max_iter))
}

/// Conjugate gradients with an explicit inner product and optional Jacobi preconditioner.
///
/// On success the true residual satisfies `‖op·x − rhs‖ ≤ rel_tol·‖rhs‖` in the
/// declared inner product; the recursively updated residual is re-checked against
/// it before returning.
pub fn cg_solve_with(op: &dyn LinearOperator, rhs: &CoefficientVector, opts: &CgOptions) -> Result<CoefficientVector> {
    if !(opts.rel_tol > 0.0 && opts.rel_tol < 1.0) {
        return Err(Error::InvalidInput(format!(
            "CG relative tolerance must lie in (0, 1), got {}",
            opts.rel_tol
        )));
    }
    if op.nrows() != op.ncols() {
        return Err(Error::DimensionMismatch {
            context: "cg operator (square)",
            expected: op.nrows(),
            found: op.ncols(),
        });
    }
    check_len("cg right-hand side", op.nrows(), rhs.len())?;
    if opts.jacobi.is_some() && opts.inner_product.weight.is_some() {
        return Err(Error::InvalidInput(
            "Jacobi preconditioning is only supported with the Euclidean inner product".into(),
        ));
    }
    let ip = &opts.inner_product;
    let b = rhs.values();
    let b_norm = ip.norm(b)?;
    let mut x = DVector::zeros(b.len());
    if b_norm == 0.0 {
        return CoefficientVector::new(op.domain(), x);
    }
    let target = opts.rel_tol * b_norm;
    let precondition = |r: &DVector<f64>| match &opts.jacobi {
        Some(d) => r.component_mul(d),
        None => r.clone(),
    };

    let mut r = b.clone();
    let mut z = precondition(&r);
    let mut p = z.clone();
    let mut rz = ip.inner(&r, &z)?;
    let mut residual = b_norm;
    for iter in 0..opts.max_iter {
        let ap = op.apply(&p)?;
        let pap = ip.inner(&p, &ap)?;
        if !(pap > 0.0) {
            return Err(Error::SingularOperator(format!(
                "CG breakdown at iteration {iter}: pᵀAp = {pap:e}"
            )));
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        residual = ip.norm(&r)?;
        if residual <= target {
            // guard against drift of the recursive residual
            let true_r = b - op.apply(&x)?;
            residual = ip.norm(&true_r)?;
            if residual <= target {
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("cg solution"));
                }
                return CoefficientVector::new(op.domain(), x);
            }
            r = true_r;
            z = precondition(&r);
            p = z.clone();
            rz = ip.inner(&r, &z)?;
            continue;
        }
        z = precondition(&r);
        let rz_new = ip.inner(&r, &z)?;
        let beta = rz_new / rz;
        rz = rz_new;
        p = &z + beta * &p;
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        residual: residual / b_norm,
    })
}

/// Result of [`eig_lowrank_generalized`]: dominant eigenpairs of `A ψ = γ B ψ`.
#[derive(Debug, Clone)]
pub struct GeneralizedEigen {
    /// Nonincreasing eigenvalues above [`EIGENVALUE_FLOOR`].
    pub values: Vec<f64>,
    /// B-orthonormal eigenvectors, each with its largest-magnitude entry positive.
    pub vectors: Vec<DVector<f64>>,
    /// Requested rank.
    pub requested_rank: usize,
    /// Fewer than `requested_rank` eigenvalues cleared the floor.
    pub rank_deficient: bool,
    /// Indices `i` with `γ_i` and `γ_{i+1}` closer than [`DEGENERACY_GAP`] (relative).
    pub near_degenerate: Vec<usize>,
    /// Number of `A` applications performed (sampling plus Rayleigh–Ritz pass).
    pub a_applies: usize,
}

/// Double-pass randomized solver for the generalized Hermitian eigenproblem.
///
/// Pass one samples the range of `B⁻¹A` with a seeded Gaussian test matrix of
/// `rank + oversample` columns and B-orthonormalizes it (Gram–Schmidt in the
/// B-inner product with one reorthogonalization, dropping numerically dependent
/// columns). Pass two forms the Rayleigh–Ritz projection `QᵀAQ` and
/// diagonalizes it. `oversample` is clamped so the sample count never exceeds the
/// space dimension.
pub fn eig_lowrank_generalized(
    a_apply: &dyn LinearOperator,
    b_apply: &dyn LinearOperator,
    b_inv_apply: &dyn LinearOperator,
    rank: usize,
    oversample: usize,
    seed: u64,
) -> Result<GeneralizedEigen> {
    let n = a_apply.ncols();
    for (ctx, op) in [
        ("eigensolver A", a_apply),
        ("eigensolver B", b_apply),
        ("eigensolver B⁻¹", b_inv_apply),
    ] {
        check_len(ctx, n, op.ncols())?;
        check_len(ctx, n, op.nrows())?;
    }
    if rank > n {
        return Err(Error::DimensionMismatch {
            context: "eigensolver rank exceeds space dimension",
            expected: n,
            found: rank,
        });
    }
    let mut out = GeneralizedEigen {
        values: Vec::new(),
        vectors: Vec::new(),
        requested_rank: rank,
        rank_deficient: false,
        near_degenerate: Vec::new(),
        a_applies: 0,
    };
    if rank == 0 {
        return Ok(out);
    }
    let samples = rank + oversample.min(n - rank);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(samples);
    let mut b_basis: Vec<DVector<f64>> = Vec::with_capacity(samples);
    // Each sample is y = B⁻¹ v, so B y is carried as v through the projections
    // instead of re-applying B, which would amplify roundoff in smooth vectors.
    for _ in 0..samples {
        let omega = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let mut by = a_apply.apply(&omega)?;
        let mut y = b_inv_apply.apply(&by)?;
        out.a_applies += 1;
        let y_norm = y.dot(&by).max(0.0).sqrt();
        if y_norm == 0.0 {
            continue;
        }
        // unit B-norm before projection, so the drop test below is relative
        y /= y_norm;
        by /= y_norm;
        for _ in 0..2 {
            for (q, bq) in basis.iter().zip(&b_basis) {
                let c = bq.dot(&y);
                y.axpy(-c, q, 1.0);
            }
        }
        let by = b_apply.apply(&y)?;
        let norm = y.dot(&by).max(0.0).sqrt();
        if norm <= 1e-10 {
            continue;
        }
        basis.push(y / norm);
        b_basis.push(by / norm);
    }
    let k = basis.len();
    if k == 0 {
        out.rank_deficient = true;
        return Ok(out);
    }

    let mut t = DMatrix::zeros(k, k);
    for j in 0..k {
        let aq = a_apply.apply(&basis[j])?;
        out.a_applies += 1;
        for i in 0..k {
            t[(i, j)] = basis[i].dot(&aq);
        }
    }
    let t = (&t + t.transpose()) * 0.5;
    let eig = SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    for &idx in order.iter().take(rank) {
        let gamma = eig.eigenvalues[idx];
        if !(gamma > EIGENVALUE_FLOOR) {
            break;
        }
        let coeffs = eig.eigenvectors.column(idx);
        let mut psi = DVector::zeros(n);
        for (c, q) in coeffs.iter().zip(&basis) {
            psi.axpy(*c, q, 1.0);
        }
        normalize_sign(&mut psi);
        out.values.push(gamma);
        out.vectors.push(psi);
    }
    out.rank_deficient = out.values.len() < rank;
    for i in 1..out.values.len() {
        let (hi, lo) = (out.values[i - 1], out.values[i]);
        if (hi - lo).abs() < DEGENERACY_GAP * hi.abs() {
            log::warn!(
                "eigenvalues {} and {} are near-degenerate ({hi:e} vs {lo:e}); sensitivities may be unreliable",
                i,
                i + 1
            );
            out.near_degenerate.push(i - 1);
        }
    }
    if out
        .values
        .iter()
        .chain(out.vectors.iter().flat_map(|v| v.iter()))
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("generalized eigensolver"));
    }
    Ok(out)
}

/// Flips the sign of `v` so that its largest-magnitude entry is positive.
pub fn normalize_sign(v: &mut DVector<f64>) {
    if !v.is_empty() && v[v.iamax()] < 0.0 {
        v.neg_mut();
    }
}

/// Pairwise summation; order-independent of how the input was produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2..=8 => values.iter().sum(),
        n => {
            let (l, r) = values.split_at(n / 2);
            pairwise_sum(l) + pairwise_sum(r)
        }
    }
}
