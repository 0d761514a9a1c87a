//! Run configuration, read from a TOML file.
//!
//! Every section except `model` is optional and falls back to a per-model
//! default. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Twobytwo,
    Elliptic,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    /// Retained eigenpairs; defaults to the number of observations.
    pub rank: Option<usize>,
    #[serde(default = "default_oversample")]
    pub oversample: usize,
    /// Seed of the randomized eigensolver.
    #[serde(default = "default_eig_seed")]
    pub eig_seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub mesh: MeshConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub prior: PriorConfig,
    pub theta: Option<ThetaSection>,
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub gsa: GsaConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    #[serde(default = "default_mesh_n")]
    pub n: usize,
    pub obs_points: Option<Vec<[f64; 2]>>,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            n: default_mesh_n(),
            obs_points: None,
        }
    }
}

/// Synthetic data for the elliptic model: `σ = rel · ‖u‖∞`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default = "default_noise_seed")]
    pub seed: u64,
    #[serde(default = "default_noise_rel")]
    pub rel: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            seed: default_noise_seed(),
            rel: default_noise_rel(),
        }
    }
}

/// Fixed data for the 2×2 model.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub u_obs: [f64; 2],
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MassSolverKind {
    Cholesky,
    Cg,
    Lumped,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    #[serde(default = "default_mass_solver")]
    pub mass_solver: MassSolverKind,
    #[serde(default = "default_cg_rel_tol")]
    pub cg_rel_tol: f64,
    /// Constant prior mean (elliptic only).
    #[serde(default)]
    pub mean: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            mass_solver: default_mass_solver(),
            cg_rel_tol: default_cg_rel_tol(),
            mean: 0.0,
        }
    }
}

/// `[theta]` as written; missing fields take the model defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaSection {
    pub names: Option<Vec<String>>,
    pub nominal: Option<Vec<f64>>,
    #[serde(rename = "box")]
    pub bounds: Option<Vec<[f64; 2]>>,
    pub alpha: Option<f64>,
    pub truth: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ThetaConfig {
    pub names: Vec<String>,
    pub nominal: Vec<f64>,
    pub bounds: Vec<[f64; 2]>,
    /// Relative half-width of the GSA perturbation `ϑ = (1 + αθ)ϑ̄`.
    pub alpha: f64,
    /// θ used to synthesize elliptic data; defaults to `nominal`.
    pub truth: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub params: Vec<String>,
    pub ranges: Vec<[f64; 2]>,
    pub points: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantityKind {
    InformationGain,
    ExpectedInformationGain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Abort,
    Skip,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GsaConfig {
    #[serde(default = "default_gsa_samples")]
    pub n_samples: usize,
    #[serde(default = "default_gsa_seed")]
    pub seed: u64,
    #[serde(default = "default_quantity")]
    pub quantity: QuantityKind,
    #[serde(default = "default_policy")]
    pub policy: PolicyKind,
}

impl Default for GsaConfig {
    fn default() -> Self {
        Self {
            n_samples: default_gsa_samples(),
            seed: default_gsa_seed(),
            quantity: default_quantity(),
            policy: default_policy(),
        }
    }
}

fn default_oversample() -> usize {
    10
}
fn default_eig_seed() -> u64 {
    1
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_mesh_n() -> usize {
    32
}
fn default_noise_seed() -> u64 {
    42
}
fn default_noise_rel() -> f64 {
    0.01
}
fn default_mass_solver() -> MassSolverKind {
    MassSolverKind::Cholesky
}
fn default_cg_rel_tol() -> f64 {
    1e-12
}
fn default_gsa_samples() -> usize {
    500
}
fn default_gsa_seed() -> u64 {
    7
}
fn default_quantity() -> QuantityKind {
    QuantityKind::InformationGain
}
fn default_policy() -> PolicyKind {
    PolicyKind::Abort
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `--seed` replaces every seed in the file.
    pub fn override_seed(&mut self, seed: u64) {
        self.noise.seed = seed;
        self.gsa.seed = seed;
        self.eig_seed = seed;
    }

    pub fn theta(&self) -> ThetaConfig {
        let d = match self.model {
            ModelKind::Twobytwo => ThetaConfig {
                names: vec!["theta1".into(), "theta2".into()],
                nominal: vec![0.5, 0.5],
                bounds: vec![[0.0, 1.0]; 2],
                alpha: 1.0,
                truth: None,
            },
            ModelKind::Elliptic => ThetaConfig {
                names: vec!["c".into(), "g".into()],
                nominal: vec![1.0, 0.1],
                bounds: vec![[0.5, 2.0], [0.0, 1.0]],
                alpha: 0.5,
                truth: None,
            },
        };
        let t = self.theta.clone().unwrap_or_default();
        ThetaConfig {
            names: t.names.unwrap_or(d.names),
            nominal: t.nominal.unwrap_or(d.nominal),
            bounds: t.bounds.unwrap_or(d.bounds),
            alpha: t.alpha.unwrap_or(d.alpha),
            truth: t.truth,
        }
    }

    pub fn data(&self) -> DataConfig {
        self.data.clone().unwrap_or(DataConfig {
            u_obs: [0.15, 0.05],
            sigma: 0.1,
        })
    }

    pub fn num_observations(&self) -> usize {
        match self.model {
            ModelKind::Twobytwo => 2,
            ModelKind::Elliptic => self.mesh.obs_points.as_ref().map_or(9, Vec::len),
        }
    }

    pub fn rank(&self) -> usize {
        self.rank.unwrap_or_else(|| self.num_observations())
    }

    /// Checks everything that can be checked without a solve.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        let theta = self.theta();
        let expected: &[&str] = match self.model {
            ModelKind::Twobytwo => &["theta1", "theta2"],
            ModelKind::Elliptic => &["c", "g"],
        };
        if theta.names != expected {
            return bad(format!("theta.names must be {expected:?}, got {:?}", theta.names));
        }
        let n = theta.names.len();
        if theta.nominal.len() != n || theta.bounds.len() != n {
            return bad(format!("theta.nominal and theta.box need {n} entries"));
        }
        for (i, (&v, b)) in theta.nominal.iter().zip(&theta.bounds).enumerate() {
            if !(b[0] <= b[1]) || !b[0].is_finite() || !b[1].is_finite() {
                return bad(format!("theta.box[{i}] = {b:?} is not an interval"));
            }
            if !(b[0] <= v && v <= b[1]) {
                return bad(format!("theta.nominal[{i}] = {v} lies outside {b:?}"));
            }
        }
        if let Some(truth) = &theta.truth {
            if truth.len() != n {
                return bad(format!("theta.truth needs {n} entries"));
            }
        }
        if !(theta.alpha >= 0.0 && theta.alpha.is_finite()) {
            return bad(format!("theta.alpha = {} must be nonnegative", theta.alpha));
        }
        for (i, (&v, b)) in theta.nominal.iter().zip(&theta.bounds).enumerate() {
            let (lo, hi) = ((1.0 - theta.alpha) * v, (1.0 + theta.alpha) * v);
            let (lo, hi) = (lo.min(hi), lo.max(hi));
            if lo < b[0] - 1e-12 || hi > b[1] + 1e-12 {
                return bad(format!(
                    "perturbation range [{lo}, {hi}] of {} leaves theta.box {b:?}",
                    theta.names[i]
                ));
            }
        }

        if self.model == ModelKind::Elliptic {
            if theta.bounds[0][0] <= 0.0 {
                return bad("reaction coefficient c must be positive over theta.box".into());
            }
            if self.mesh.n < 2 {
                return bad(format!("mesh.n = {} must be at least 2", self.mesh.n));
            }
            if !(self.noise.rel >= 0.0 && self.noise.rel.is_finite()) {
                return bad(format!("noise.rel = {} must be nonnegative", self.noise.rel));
            }
            if self.data.is_some() {
                return bad("[data] applies to the twobytwo model only".into());
            }
            if let Some(points) = &self.mesh.obs_points {
                if points.is_empty() {
                    return bad("mesh.obs_points is empty".into());
                }
                if let Some(p) = points
                    .iter()
                    .find(|p| !(p[0] > 0.0 && p[0] < 1.0 && p[1] > 0.0 && p[1] < 1.0))
                {
                    return bad(format!(
                        "observation point {p:?} is not strictly inside the unit square"
                    ));
                }
            }
        } else {
            let data = self.data();
            if !(data.sigma > 0.0 && data.sigma.is_finite()) {
                return bad(format!("data.sigma = {} must be positive", data.sigma));
            }
            if self.prior.mean != 0.0 {
                return bad("the twobytwo prior has zero mean".into());
            }
        }
        if self.prior.mass_solver == MassSolverKind::Cg && !(self.prior.cg_rel_tol > 0.0 && self.prior.cg_rel_tol < 1.0)
        {
            return bad(format!(
                "prior.cg_rel_tol = {} must lie in (0, 1)",
                self.prior.cg_rel_tol
            ));
        }
        if self.rank() == 0 {
            return bad("rank must be positive".into());
        }

        if let Some(sweep) = &self.sweep {
            let k = sweep.params.len();
            if k == 0 || k > 2 {
                return bad(format!("sweep.params must name one or two parameters, got {k}"));
            }
            if sweep.ranges.len() != k || sweep.points.len() != k {
                return bad("sweep.ranges and sweep.points need one entry per swept parameter".into());
            }
            for ((name, r), &pts) in sweep.params.iter().zip(&sweep.ranges).zip(&sweep.points) {
                let Some(j) = theta.names.iter().position(|n| n == name) else {
                    return bad(format!("sweep parameter {name:?} is not one of {:?}", theta.names));
                };
                if pts == 0 {
                    return bad(format!("sweep over {name} needs at least one point"));
                }
                let b = theta.bounds[j];
                if !(r[0] <= r[1]) || r[0] < b[0] || r[1] > b[1] {
                    return bad(format!("sweep range {r:?} for {name} must lie inside theta.box {b:?}"));
                }
            }
            if k == 2 && sweep.params[0] == sweep.params[1] {
                return bad("sweep.params repeats a parameter".into());
            }
        }
        if self.gsa.n_samples < 2 {
            return bad(format!("gsa.n_samples = {} must be at least 2", self.gsa.n_samples));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_model_defaults() {
        let cfg = RunConfig::from_toml("model = \"elliptic\"").unwrap();
        assert_eq!(cfg.rank(), 9);
        assert_eq!(cfg.mesh.n, 32);
        assert_eq!(cfg.theta().nominal, vec![1.0, 0.1]);
        let cfg = RunConfig::from_toml("model = \"twobytwo\"").unwrap();
        assert_eq!(cfg.rank(), 2);
        assert_eq!(cfg.data().u_obs, [0.15, 0.05]);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_toml("model = \"elliptic\"\nbogus = 1").is_err());
        assert!(RunConfig::from_toml("model = \"elliptic\"\n[mesh]\nn = 8\nextra = 2").is_err());
        assert!(RunConfig::from_toml("model = \"cube\"").is_err());
        let neg_c = "model = \"elliptic\"\n[theta]\nnames = [\"c\", \"g\"]\nnominal = [0.0, 0.1]\nbox = [[-1.0, 2.0], [0.0, 1.0]]\nalpha = 0.0";
        assert!(RunConfig::from_toml(neg_c).is_err());
        let sweep = "model = \"twobytwo\"\n[sweep]\nparams = [\"theta1\"]\nranges = [[0.0, 2.0]]\npoints = [5]";
        assert!(RunConfig::from_toml(sweep).is_err());
    }

    #[test]
    fn seed_override_reaches_every_stream() {
        let mut cfg = RunConfig::from_toml("model = \"elliptic\"").unwrap();
        cfg.override_seed(9);
        assert_eq!((cfg.noise.seed, cfg.gsa.seed, cfg.eig_seed), (9, 9, 9));
    }
}
