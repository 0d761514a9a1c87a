use std::path::Path;

use igsense::bayes::analyze;
use igsense::gsa::{dgsm_bound, DgsmOptions, FailurePolicy, Quantity};
use igsense::hdsa::info_gain_gradient;
use igsense::linops::SolveCounts;
use rayon::prelude::*;

use crate::config::{PolicyKind, QuantityKind, RunConfig};
use crate::error::CliError;
use crate::output::{header, num, write_csv};
use crate::study::Study;

fn count_cells(c: &SolveCounts) -> Vec<String> {
    [
        c.state_solves,
        c.adjoint_solves,
        c.incremental_state_solves,
        c.incremental_adjoint_solves,
    ]
    .iter()
    .map(u64::to_string)
    .collect()
}

pub fn solve(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let study = Study::build(cfg)?;
    let ip = study.ip.fork();
    let summary = analyze(&ip, study.theta.values(), study.rank, study.oversample, study.eig_seed)?;
    let counts = ip.solve_counts();

    let (map_header, map_rows): (Vec<String>, Vec<Vec<String>>) = match &study.nodes {
        Some(nodes) => (
            header(&["index", "x", "y", "m_post"]),
            nodes
                .iter()
                .zip(summary.m_post.iter())
                .enumerate()
                .map(|(i, (p, &m))| vec![i.to_string(), num(p[0]), num(p[1]), num(m)])
                .collect(),
        ),
        None => (
            header(&["index", "m_post"]),
            summary
                .m_post
                .iter()
                .enumerate()
                .map(|(i, &m)| vec![i.to_string(), num(m)])
                .collect(),
        ),
    };
    write_csv(out, "map.csv", &map_header, &map_rows)?;

    let spectrum: Vec<Vec<String>> = summary
        .spectrum
        .gammas
        .iter()
        .enumerate()
        .map(|(i, &g)| vec![(i + 1).to_string(), num(g)])
        .collect();
    write_csv(out, "spectrum.csv", &header(&["i", "gamma"]), &spectrum)?;

    if let Some(ratio) = summary.spectrum.tail_ratio() {
        log::info!(
            "retained {} eigenpairs, gamma_r/gamma_1 = {ratio:e}",
            summary.spectrum.rank()
        );
    }
    let mut row = vec![
        num(summary.phi_ig),
        num(summary.phi_ig_bar),
        summary.spectrum.rank().to_string(),
    ];
    row.extend(count_cells(&counts));
    write_csv(
        out,
        "summary.csv",
        &header(&[
            "phi_ig",
            "phi_ig_bar",
            "rank",
            "state_solves",
            "adjoint_solves",
            "incremental_state_solves",
            "incremental_adjoint_solves",
        ]),
        &[row],
    )
}

pub fn sensitivity(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let study = Study::build(cfg)?;
    let r = info_gain_gradient(
        &study.ip.fork(),
        &study.theta,
        study.rank,
        study.oversample,
        study.eig_seed,
    )?;
    for &i in &r.near_degenerate {
        log::warn!(
            "modes {} and {} are near-degenerate; their sensitivities are unreliable",
            i + 1,
            i + 2
        );
    }
    let rows: Vec<Vec<String>> = (0..r.theta.len())
        .map(|j| {
            vec![
                r.theta.names()[j].clone(),
                num(r.theta.values()[j]),
                num(r.grad_phi_ig[j]),
                num(r.grad_phi_ig_bar[j]),
                num(r.grad_spectral[j]),
                num(r.grad_map[j]),
            ]
        })
        .collect();
    write_csv(
        out,
        "sensitivity.csv",
        &header(&[
            "param",
            "value",
            "d_phi_ig",
            "d_phi_ig_bar",
            "d_phi_ig_spectral",
            "d_phi_ig_map",
        ]),
        &rows,
    )
}

fn linspace(range: [f64; 2], points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![range[0]];
    }
    let step = (range[1] - range[0]) / (points - 1) as f64;
    (0..points)
        .map(|i| {
            if i + 1 == points {
                range[1]
            } else {
                range[0] + step * i as f64
            }
        })
        .collect()
}

/// Grid points of the sweep, first swept parameter varying fastest.
pub fn sweep_points(cfg: &RunConfig, study: &Study) -> Vec<Vec<f64>> {
    let sweep = cfg.sweep.as_ref().expect("validated sweep");
    let axes: Vec<(usize, Vec<f64>)> = sweep
        .params
        .iter()
        .zip(&sweep.ranges)
        .zip(&sweep.points)
        .map(|((name, &r), &p)| (study.theta.index_of(name).expect("validated name"), linspace(r, p)))
        .collect();
    let outer = axes.get(1).map_or(1, |a| a.1.len());
    let mut points = Vec::new();
    for k in 0..outer {
        for &v in &axes[0].1 {
            let mut t = study.theta.nominal().to_vec();
            t[axes[0].0] = v;
            if let Some((j, vals)) = axes.get(1) {
                t[*j] = vals[k];
            }
            points.push(t);
        }
    }
    points
}

pub fn sweep(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    if cfg.sweep.is_none() {
        return Err(CliError::Config("the sweep command needs a [sweep] section".into()));
    }
    let study = Study::build(cfg)?;
    let points = sweep_points(cfg, &study);
    let rows: Vec<Result<Vec<String>, CliError>> = points
        .par_iter()
        .map(|t| {
            let theta = study.theta.with_values(t)?;
            let r = info_gain_gradient(&study.ip.fork(), &theta, study.rank, study.oversample, study.eig_seed)?;
            let mut row: Vec<String> = t.iter().map(|&v| num(v)).collect();
            row.push(num(r.phi_ig));
            row.extend(r.grad_phi_ig.iter().map(|&v| num(v)));
            row.push(num(r.phi_ig_bar));
            row.extend(r.grad_phi_ig_bar.iter().map(|&v| num(v)));
            Ok(row)
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;

    let n = study.theta.len();
    let mut cols: Vec<String> = study.theta.names().to_vec();
    cols.push("kld".into());
    cols.extend((1..=n).map(|j| format!("d_kld_d{j}")));
    cols.push("kld_bar".into());
    cols.extend((1..=n).map(|j| format!("d_kld_bar_d{j}")));
    write_csv(out, "sweep.csv", &cols, &rows)
}

pub fn gsa(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let study = Study::build(cfg)?;
    let pmap = Study::perturbation_map(cfg)?;
    let opts = DgsmOptions {
        n_samples: cfg.gsa.n_samples,
        seed: cfg.gsa.seed,
        rank: study.rank,
        oversample: study.oversample,
        eig_seed: study.eig_seed,
        quantity: match cfg.gsa.quantity {
            QuantityKind::InformationGain => Quantity::InformationGain,
            QuantityKind::ExpectedInformationGain => Quantity::ExpectedInformationGain,
        },
        policy: match cfg.gsa.policy {
            PolicyKind::Abort => FailurePolicy::Abort,
            PolicyKind::Skip => FailurePolicy::Skip,
        },
    };
    let r = dgsm_bound(&study.ip, &study.theta, &pmap, &opts)?;
    if r.flagged {
        log::warn!("{} of {} samples failed and were skipped", r.n_failed, r.n_samples);
    }
    let rows: Vec<Vec<String>> = (0..r.names.len())
        .map(|i| {
            vec![
                r.names[i].clone(),
                num(r.dgsm[i]),
                num(r.variance),
                num(r.poincare[i]),
                num(r.bound[i]),
                num(r.bound_std_err[i]),
            ]
        })
        .collect();
    write_csv(
        out,
        "gsa.csv",
        &header(&["parameter", "dgsm", "variance", "poincare", "bound", "bound_std_err"]),
        &rows,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linspace_hits_both_ends() {
        let v = linspace([0.02, 0.5], 40);
        assert_eq!(v.len(), 40);
        assert_eq!((v[0], v[39]), (0.02, 0.5));
        assert_eq!(linspace([0.3, 0.9], 1), vec![0.3]);
    }

    #[test]
    fn sweep_grid_order() {
        let cfg = RunConfig::from_toml(
            "model = \"twobytwo\"\n[sweep]\nparams = [\"theta1\", \"theta2\"]\nranges = [[0.0, 1.0], [0.0, 0.5]]\npoints = [3, 2]",
        )
        .unwrap();
        let study = Study::build(&cfg).unwrap();
        let pts = sweep_points(&cfg, &study);
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[1], vec![0.5, 0.0]);
        assert_eq!(pts[3], vec![0.0, 0.5]);
    }
}
