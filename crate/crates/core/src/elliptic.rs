//! Linear elliptic model on the unit square with a prescribed boundary flux:
//!
//! ```text
//! −Δu + c u = m   in Ω = (0,1)²
//! ∇u·n     = g   on ∂Ω
//! ```
//!
//! Discretized with P1 elements on a uniform triangulation. The auxiliary
//! parameters are `θ = (c, g)`. In coefficient form `A = K + cM`, `C = −M`,
//! `d = −g Mb 1`, where `K`, `M`, `Mb` are stiffness, mass, and boundary mass.

use std::sync::{Arc, Mutex};

use nalgebra::DVector;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linops::{check_len, csr_mul, SolveCounter};
use crate::model::{check_theta_index, solve_state, ForwardModel, ModelDims, ObservationData, ThetaVector};
use crate::prior::{cholesky_solve, factor_spd, GaussianPrior, MassSolver};

const CACHE_CAPACITY: usize = 16;

/// Uniform triangulation of the unit square with `n × n` cells, each split
/// along its lower-left to upper-right diagonal.
#[derive(Debug, Clone)]
pub struct UnitSquareMesh {
    n: usize,
    nodes: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<[usize; 2]>,
}

impl UnitSquareMesh {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("mesh needs at least one cell per side".into()));
        }
        let h = 1.0 / n as f64;
        let idx = |i: usize, j: usize| j * (n + 1) + i;
        let mut nodes = Vec::with_capacity((n + 1) * (n + 1));
        for j in 0..=n {
            for i in 0..=n {
                nodes.push([i as f64 * h, j as f64 * h]);
            }
        }
        let mut triangles = Vec::with_capacity(2 * n * n);
        for j in 0..n {
            for i in 0..n {
                let (v00, v10, v01, v11) = (idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1));
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
            }
        }
        let mut boundary_edges = Vec::with_capacity(4 * n);
        for k in 0..n {
            boundary_edges.push([idx(k, 0), idx(k + 1, 0)]);
            boundary_edges.push([idx(n, k), idx(n, k + 1)]);
            boundary_edges.push([idx(k + 1, n), idx(k, n)]);
            boundary_edges.push([idx(0, k + 1), idx(0, k)]);
        }
        Ok(Self {
            n,
            nodes,
            triangles,
            boundary_edges,
        })
    }

    pub fn cells_per_side(&self) -> usize {
        self.n
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[[usize; 2]] {
        &self.boundary_edges
    }

    /// Nodal interpolant of `f`.
    pub fn interpolate(&self, f: impl Fn(f64, f64) -> f64) -> DVector<f64> {
        DVector::from_iterator(self.nodes.len(), self.nodes.iter().map(|&[x, y]| f(x, y)))
    }

    /// Nodes and barycentric weights of the triangle containing `(x, y)`.
    pub fn locate(&self, x: f64, y: f64) -> Result<[(usize, f64); 3]> {
        if !(x > 0.0 && x < 1.0 && y > 0.0 && y < 1.0) {
            return Err(Error::InvalidObservationPoint { x, y });
        }
        let n = self.n;
        let fx = x * n as f64;
        let fy = y * n as f64;
        let i = (fx.floor() as usize).min(n - 1);
        let j = (fy.floor() as usize).min(n - 1);
        let s = fx - i as f64;
        let t = fy - j as f64;
        let idx = |i: usize, j: usize| j * (n + 1) + i;
        Ok(if s >= t {
            [(idx(i, j), 1.0 - s), (idx(i + 1, j), s - t), (idx(i + 1, j + 1), t)]
        } else {
            [(idx(i, j), 1.0 - t), (idx(i + 1, j + 1), s), (idx(i, j + 1), t - s)]
        })
    }
}

/// θ-independent sparse matrices of the P1 discretization.
#[derive(Debug, Clone)]
pub struct EllipticAssembly {
    pub stiffness: CsrMatrix<f64>,
    pub mass: CsrMatrix<f64>,
    pub boundary_mass: CsrMatrix<f64>,
    /// Pointwise observation operator, one row per point.
    pub observation: CsrMatrix<f64>,
}

impl EllipticAssembly {
    pub fn assemble(mesh: &UnitSquareMesh, obs_points: &[[f64; 2]]) -> Result<Self> {
        let nn = mesh.num_nodes();
        let mut k = CooMatrix::new(nn, nn);
        let mut m = CooMatrix::new(nn, nn);
        for tri in mesh.triangles() {
            let p: Vec<[f64; 2]> = tri.iter().map(|&v| mesh.nodes[v]).collect();
            let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
            let area = 0.5 * det;
            // ∇λ_a = (y_b − y_c, x_c − x_b) / (2·area) with (a, b, c) cyclic
            let grads: Vec<[f64; 2]> = (0..3)
                .map(|a| {
                    let b = (a + 1) % 3;
                    let c = (a + 2) % 3;
                    [(p[b][1] - p[c][1]) / det, (p[c][0] - p[b][0]) / det]
                })
                .collect();
            for a in 0..3 {
                for b in 0..3 {
                    let kab = area * (grads[a][0] * grads[b][0] + grads[a][1] * grads[b][1]);
                    let mab = area / 12.0 * if a == b { 2.0 } else { 1.0 };
                    k.push(tri[a], tri[b], kab);
                    m.push(tri[a], tri[b], mab);
                }
            }
        }
        let mut mb = CooMatrix::new(nn, nn);
        for edge in mesh.boundary_edges() {
            let [a, b] = edge.map(|v| mesh.nodes[v]);
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            for r in 0..2 {
                for s in 0..2 {
                    mb.push(edge[r], edge[s], len / 6.0 * if r == s { 2.0 } else { 1.0 });
                }
            }
        }
        let mut q = CooMatrix::new(obs_points.len(), nn);
        for (row, &[x, y]) in obs_points.iter().enumerate() {
            for (node, w) in mesh.locate(x, y)? {
                if w != 0.0 {
                    q.push(row, node, w);
                }
            }
        }
        Ok(Self {
            stiffness: CsrMatrix::from(&k),
            mass: CsrMatrix::from(&m),
            boundary_mass: CsrMatrix::from(&mb),
            observation: CsrMatrix::from(&q),
        })
    }
}

/// The 3 × 3 lattice `{0.25, 0.5, 0.75}²`, x varying fastest.
pub fn default_observation_points() -> Vec<[f64; 2]> {
    let ticks = [0.25, 0.5, 0.75];
    ticks.iter().flat_map(|&y| ticks.iter().map(move |&x| [x, y])).collect()
}

/// `m_true(x, y) = 10 exp(−((x − ½)² + (y − ½)²)/20)`.
pub fn true_source(x: f64, y: f64) -> f64 {
    10.0 * (-((x - 0.5).powi(2) + (y - 0.5).powi(2)) / 20.0).exp()
}

/// Elliptic forward model with a small cache of `K + cM` factorizations.
pub struct EllipticModel {
    mesh: UnitSquareMesh,
    assembly: EllipticAssembly,
    obs_points: Vec<[f64; 2]>,
    boundary_load: DVector<f64>,
    nominal: [f64; 2],
    cache: Mutex<Vec<(u64, Arc<CscCholesky<f64>>)>>,
}

impl std::fmt::Debug for EllipticModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EllipticModel")
            .field("n", &self.mesh.n)
            .field("obs_points", &self.obs_points)
            .field("nominal", &self.nominal)
            .finish_non_exhaustive()
    }
}

/// Builds the model on an `n × n` mesh with nominal `θ = (1, 0.1)`.
pub fn build_elliptic(n: usize, obs_points: &[[f64; 2]]) -> Result<EllipticModel> {
    EllipticModel::new(n, obs_points, [1.0, 0.1])
}

impl EllipticModel {
    pub fn new(n: usize, obs_points: &[[f64; 2]], nominal: [f64; 2]) -> Result<Self> {
        if !(nominal[0] > 0.0) {
            return Err(Error::InvalidInput(format!(
                "reaction coefficient c = {} must be positive",
                nominal[0]
            )));
        }
        if obs_points.is_empty() {
            return Err(Error::InvalidInput("at least one observation point is required".into()));
        }
        let mesh = UnitSquareMesh::new(n)?;
        let assembly = EllipticAssembly::assemble(&mesh, obs_points)?;
        let boundary_load = csr_mul(&assembly.boundary_mass, &DVector::from_element(mesh.num_nodes(), 1.0));
        Ok(Self {
            mesh,
            assembly,
            obs_points: obs_points.to_vec(),
            boundary_load,
            nominal,
            cache: Mutex::new(Vec::new()),
        })
    }

    pub fn mesh(&self) -> &UnitSquareMesh {
        &self.mesh
    }

    pub fn assembly(&self) -> &EllipticAssembly {
        &self.assembly
    }

    pub fn observation_points(&self) -> &[[f64; 2]] {
        &self.obs_points
    }

    /// `θ = (c, g)` at the nominal point with box `c ∈ [0.5, 2]`, `g ∈ [0, 1]`.
    pub fn nominal_theta(&self) -> ThetaVector {
        ThetaVector::new(self.theta_names(), self.nominal.to_vec(), vec![(0.5, 2.0), (0.0, 1.0)])
            .expect("valid nominal theta")
    }

    /// Prior with `K = stiffness + mass`.
    pub fn default_prior(&self, mass_solver: MassSolver) -> Result<GaussianPrior> {
        let k = &self.assembly.stiffness + &self.assembly.mass;
        GaussianPrior::bilaplacian(
            k,
            self.assembly.mass.clone(),
            DVector::zeros(self.mesh.num_nodes()),
            mass_solver,
        )
    }

    /// `K + cM` as a sparse matrix.
    pub fn state_matrix(&self, c: f64) -> CsrMatrix<f64> {
        &self.assembly.stiffness + &(&self.assembly.mass * c)
    }

    fn factor(&self, theta: &[f64]) -> Result<Arc<CscCholesky<f64>>> {
        check_len("elliptic theta", 2, theta.len())?;
        let c = theta[0];
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::SingularOperator(format!(
                "reaction coefficient c = {c} must be positive"
            )));
        }
        let key = c.to_bits();
        if let Some((_, f)) = self.cache.lock().expect("cache lock").iter().find(|(k, _)| *k == key) {
            return Ok(f.clone());
        }
        let f = Arc::new(factor_spd(&self.state_matrix(c), "state operator")?);
        let mut cache = self.cache.lock().expect("cache lock");
        if !cache.iter().any(|(k, _)| *k == key) {
            if cache.len() >= CACHE_CAPACITY {
                cache.remove(0);
            }
            cache.push((key, f.clone()));
        }
        Ok(f)
    }

    fn check_state(&self, v: &DVector<f64>) -> Result<()> {
        check_len("elliptic state", self.mesh.num_nodes(), v.len())
    }
}

impl ForwardModel for EllipticModel {
    fn dims(&self) -> ModelDims {
        let n = self.mesh.num_nodes();
        ModelDims {
            state: n,
            parameter: n,
            observation: self.obs_points.len(),
            theta: 2,
        }
    }

    fn theta_names(&self) -> Vec<String> {
        vec!["c".into(), "g".into()]
    }

    fn apply_state_operator(&self, theta: &[f64], u: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("elliptic theta", 2, theta.len())?;
        self.check_state(u)?;
        Ok(csr_mul(&self.assembly.stiffness, u) + csr_mul(&self.assembly.mass, u) * theta[0])
    }

    fn solve_state_operator(&self, theta: &[f64], rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(rhs)?;
        let f = self.factor(theta)?;
        Ok(cholesky_solve(&f, rhs))
    }

    fn solve_state_operator_transpose(&self, theta: &[f64], rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.solve_state_operator(theta, rhs)
    }

    fn apply_param_operator(&self, _theta: &[f64], m: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(m)?;
        Ok(-csr_mul(&self.assembly.mass, m))
    }

    fn apply_param_operator_transpose(&self, _theta: &[f64], p: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(p)?;
        Ok(-csr_mul(&self.assembly.mass, p))
    }

    fn source(&self, theta: &[f64]) -> Result<DVector<f64>> {
        check_len("elliptic theta", 2, theta.len())?;
        Ok(&self.boundary_load * -theta[1])
    }

    fn observe(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(u)?;
        Ok(csr_mul(&self.assembly.observation, u))
    }

    fn observe_adjoint(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("elliptic observation", self.obs_points.len(), w.len())?;
        Ok(csr_mul(&self.assembly.observation.transpose(), w))
    }

    fn apply_state_operator_dtheta(&self, j: usize, _theta: &[f64], u: &DVector<f64>) -> Result<DVector<f64>> {
        check_theta_index(j, 2)?;
        self.check_state(u)?;
        Ok(if j == 0 {
            csr_mul(&self.assembly.mass, u)
        } else {
            DVector::zeros(u.len())
        })
    }

    fn apply_state_operator_dtheta_transpose(&self, j: usize, theta: &[f64], p: &DVector<f64>) -> Result<DVector<f64>> {
        self.apply_state_operator_dtheta(j, theta, p)
    }

    fn apply_param_operator_dtheta(&self, j: usize, _theta: &[f64], m: &DVector<f64>) -> Result<DVector<f64>> {
        check_theta_index(j, 2)?;
        self.check_state(m)?;
        Ok(DVector::zeros(m.len()))
    }

    fn apply_param_operator_dtheta_transpose(&self, j: usize, theta: &[f64], p: &DVector<f64>) -> Result<DVector<f64>> {
        self.apply_param_operator_dtheta(j, theta, p)
    }

    fn source_dtheta(&self, j: usize, _theta: &[f64]) -> Result<DVector<f64>> {
        check_theta_index(j, 2)?;
        Ok(if j == 1 {
            -&self.boundary_load
        } else {
            DVector::zeros(self.boundary_load.len())
        })
    }
}

/// Noise-free observations, their noisy counterpart, and the noise level used.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticObservations {
    pub clean: DVector<f64>,
    pub noisy: DVector<f64>,
    pub sigma: f64,
}

impl SyntheticObservations {
    /// Data with `Γ_noise = σ²I`; fails when `σ = 0`.
    pub fn into_data(self) -> Result<ObservationData> {
        ObservationData::isotropic(self.noisy, self.sigma)
    }
}

/// Solves the state at `m_true`, observes it, and adds Gaussian noise with
/// `σ = noise_rel · ‖u‖∞` drawn from a seeded stream.
pub fn synthesize_observations(
    model: &dyn ForwardModel,
    m_true: &DVector<f64>,
    theta: &[f64],
    noise_rel: f64,
    seed: u64,
) -> Result<SyntheticObservations> {
    if !(noise_rel >= 0.0 && noise_rel.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "relative noise level {noise_rel} must be nonnegative"
        )));
    }
    let u = solve_state(model, m_true, theta, &SolveCounter::new())?;
    let clean = model.observe(&u)?;
    let sigma = noise_rel * u.amax();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = clean.map(|v| {
        let z: f64 = StandardNormal.sample(&mut rng);
        v + sigma * z
    });
    Ok(SyntheticObservations { clean, noisy, sigma })
}

/// [`synthesize_observations`] packaged as likelihood data.
pub fn synthesize_data(
    model: &dyn ForwardModel,
    m_true: &DVector<f64>,
    theta: &[f64],
    noise_rel: f64,
    seed: u64,
) -> Result<ObservationData> {
    synthesize_observations(model, m_true, theta, noise_rel, seed)?.into_data()
}
