use std::sync::Arc;

use igsense::bayes::InverseProblem;
use igsense::elliptic::{default_observation_points, synthesize_data, true_source, EllipticModel};
use igsense::gsa::PerturbationMap;
use igsense::model::ThetaVector;
use igsense::prior::{GaussianPrior, MassSolver};
use igsense::twobytwo::TwoByTwoSetup;
use nalgebra::DVector;

use crate::config::{MassSolverKind, ModelKind, RunConfig};
use crate::error::CliError;

/// An inverse problem and parameter template assembled from a config.
pub struct Study {
    pub ip: InverseProblem,
    pub theta: ThetaVector,
    pub rank: usize,
    pub oversample: usize,
    pub eig_seed: u64,
    /// Node coordinates of the parameter field, when it lives on a mesh.
    pub nodes: Option<Vec<[f64; 2]>>,
}

impl Study {
    pub fn build(cfg: &RunConfig) -> Result<Self, CliError> {
        let tc = cfg.theta();
        let theta = ThetaVector::new(
            tc.names.clone(),
            tc.nominal.clone(),
            tc.bounds.iter().map(|b| (b[0], b[1])).collect(),
        )
        .map_err(CliError::setup)?;

        let (ip, nodes) = match cfg.model {
            ModelKind::Twobytwo => {
                let data = cfg.data();
                let setup = TwoByTwoSetup {
                    u_obs: data.u_obs,
                    sigma: data.sigma,
                };
                (setup.inverse_problem().map_err(CliError::setup)?, None)
            }
            ModelKind::Elliptic => {
                let obs = cfg.mesh.obs_points.clone().unwrap_or_else(default_observation_points);
                let model =
                    EllipticModel::new(cfg.mesh.n, &obs, [tc.nominal[0], tc.nominal[1]]).map_err(CliError::setup)?;
                let solver = match cfg.prior.mass_solver {
                    MassSolverKind::Cholesky => MassSolver::Cholesky,
                    MassSolverKind::Cg => MassSolver::Cg {
                        rel_tol: cfg.prior.cg_rel_tol,
                    },
                    MassSolverKind::Lumped => MassSolver::Lumped,
                };
                let asm = model.assembly();
                let n = model.mesh().num_nodes();
                let prior = GaussianPrior::bilaplacian(
                    &asm.stiffness + &asm.mass,
                    asm.mass.clone(),
                    DVector::from_element(n, cfg.prior.mean),
                    solver,
                )
                .map_err(CliError::setup)?;
                let truth = tc.truth.clone().unwrap_or_else(|| tc.nominal.clone());
                let m_true = model.mesh().interpolate(true_source);
                let data = synthesize_data(&model, &m_true, &truth, cfg.noise.rel, cfg.noise.seed)?;
                let nodes = model.mesh().nodes().to_vec();
                let ip =
                    InverseProblem::new(Arc::new(model), Arc::new(prior), Arc::new(data)).map_err(CliError::setup)?;
                (ip, Some(nodes))
            }
        };
        let rank = cfg.rank().min(ip.model().dims().parameter);
        Ok(Study {
            ip,
            theta,
            rank,
            oversample: cfg.oversample,
            eig_seed: cfg.eig_seed,
            nodes,
        })
    }

    /// Map from `[−1, 1]^n` to physical θ around the nominal values.
    pub fn perturbation_map(cfg: &RunConfig) -> Result<PerturbationMap, CliError> {
        let tc = cfg.theta();
        PerturbationMap::new(tc.nominal.clone(), tc.alpha).map_err(CliError::setup)
    }
}
