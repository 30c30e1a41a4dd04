//! Batch experiment driver: stage functions that read and write files, so
//! every stage also runs standalone on the outputs of earlier ones, plus
//! the full pipeline with structured short-circuiting.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{build_ensemble, build_model, ExperimentConfig};
use crate::dynamics::{hamiltonian_series, solve_pmp, transversality_defect, SweepOptions, Trajectory};
use crate::error::{Error, Result};
use crate::io;
use crate::lift::RandomVector;
use crate::model::{validate_hypotheses, HypothesisReport};
use crate::spectral::{
    assemble_block_hessian, certify, check_et_hypotheses, lt_checks, CertifyOptions,
    HamiltonianBlocks, TurnpikeCertificate,
};
use crate::static_kkt::{
    eulerian_kkt_residual, solve_stationary, surjectivity_diagnostics, NewtonOptions,
    StationaryTriple,
};
use crate::turnpike::{build_report, TurnpikeReport};

/// Report body wrapped with the configuration hash.
#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_hash: &'a str,
    report: &'a T,
}

fn write_report<T: Serialize>(dir: &Path, name: &str, hash: &str, report: &T) -> Result<()> {
    io::write_json(
        &dir.join(name),
        &Stamped {
            config_hash: hash,
            report,
        },
    )
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn triple_path(dir: &Path) -> PathBuf {
    dir.join("stationary_triple.csv")
}

pub fn trajectory_path(dir: &Path) -> PathBuf {
    dir.join("trajectory.csv")
}

pub fn certificate_path(dir: &Path) -> PathBuf {
    dir.join("certificate.json")
}

/// Validates the model hypotheses by sampling and writes `validate.json`.
pub fn stage_validate(config: &ExperimentConfig, out: &Path) -> Result<HypothesisReport> {
    ensure_dir(out)?;
    let model = build_model(&config.model)?;
    let report = validate_hypotheses(
        model.as_ref(),
        config.solver.validation_samples,
        config.seed,
    )?;
    write_report(out, "validate.json", &config.hash(), &report)?;
    if !report.passed() {
        return Err(Error::HypothesisFailure {
            check: "model validation",
            detail: format!(
                "affinity {:.3e}, min control curvature {:.3e}, worst derivative error {:.3e}",
                report.affinity_residual,
                report.min_uu_eigenvalue,
                report.max_derivative_rel_error
            ),
        });
    }
    Ok(report)
}

#[derive(Serialize)]
struct StaticReport {
    residual_norm: f64,
    constraint_inf: f64,
    iterations: usize,
    residual_trace: Vec<f64>,
    surjectivity: crate::static_kkt::SurjectivityReport,
    intrinsic_residuals: crate::static_kkt::EulerianKktResidual,
}

/// Solves the static problem from the configured ensemble (zero costate
/// and control guesses) and writes the triple and its report.
pub fn stage_solve_static(config: &ExperimentConfig, out: &Path) -> Result<StationaryTriple> {
    ensure_dir(out)?;
    let model = build_model(&config.model)?;
    let (d, m) = (model.state_dim(), model.control_dim());
    let x0 = build_ensemble(&config.initial_ensemble, config.n_particles, d, config.seed)?;
    let opts = NewtonOptions {
        tol: config.solver.newton_tol,
        max_iter: config.solver.newton_max_iter,
        cond_cap: config.solver.cond_cap,
        ..NewtonOptions::default()
    };
    let triple = solve_stationary(
        model.as_ref(),
        &RandomVector::from_measure(&x0),
        &RandomVector::zeros(config.n_particles, d),
        &RandomVector::zeros(config.n_particles, m),
        &opts,
    )?;
    io::write_triple(&triple_path(out), &triple)?;
    let report = StaticReport {
        residual_norm: triple.residual_norm,
        constraint_inf: triple.constraint_inf,
        iterations: triple.iterations,
        residual_trace: triple.residual_trace.clone(),
        surjectivity: surjectivity_diagnostics(
            model.as_ref(),
            &triple.x,
            &triple.u,
            config.solver.pointwise_surjectivity_min,
            config.solver.full_surjectivity_min,
        )?,
        intrinsic_residuals: eulerian_kkt_residual(model.as_ref(), &triple)?,
    };
    write_report(out, "static_report.json", &config.hash(), &report)?;
    Ok(triple)
}

fn hautus_line(name: &str, report: &crate::spectral::HautusReport) -> String {
    match report.worst_margin {
        Some(margin) => format!(
            "{name}: {} (worst margin {margin:.6e} over {} tested eigenvalues)",
            if report.pass { "pass" } else { "FAIL" },
            report.tested_eigenvalues
        ),
        None => format!("{name}: pass (spectrum already stable)"),
    }
}

fn hypothesis_text(lt: &crate::spectral::LtReport, et: &crate::spectral::EtReport) -> String {
    let mut lines = vec![
        "decay hypothesis report".to_string(),
        String::new(),
        "full lift:".to_string(),
        format!(
            "  control curvature invertible: {} (condition {:.6e})",
            if lt.uu_invertible { "yes" } else { "NO" },
            lt.uu_condition
        ),
        format!(
            "  observation factor exists: {} (min eigenvalue {:.6e})",
            if lt.q_factorizable { "yes" } else { "NO" },
            lt.q_min_eigenvalue
        ),
        format!("  {}", hautus_line("stabilizability", &lt.stabilizability)),
        format!("  {}", hautus_line("detectability", &lt.detectability)),
        format!("  overall: {}", if lt.pass { "PASS" } else { "FAIL" }),
        String::new(),
        "group-compressed (horizontal) checks:".to_string(),
        format!(
            "  overall: {} (split defect {:.3e})",
            if et.horizontal.pass { "PASS" } else { "FAIL" },
            et.split_defect
        ),
        format!(
            "pointwise (vertical) checks on duplicated atoms: {} ({} atoms)",
            if et.vertical_pass { "PASS" } else { "FAIL" },
            et.vertical.len()
        ),
        format!(
            "split implies full-lift result: {}",
            if et.implication_holds { "yes" } else { "NO" }
        ),
    ];
    lines.push(String::new());
    lines.join("\n")
}

/// Assembles the Hessian at the stored triple, runs the hypothesis checks
/// and the decay chain, and writes the certificate plus a human-readable
/// hypothesis report. On a hypothesis failure the diagnostics computed so
/// far are still written.
pub fn stage_riccati(config: &ExperimentConfig, out: &Path) -> Result<TurnpikeCertificate> {
    ensure_dir(out)?;
    let model = build_model(&config.model)?;
    let path = triple_path(out);
    if !path.exists() {
        return Err(Error::Config {
            path: path.display().to_string(),
            detail: "stationary triple not found; run solve-static first".into(),
        });
    }
    let triple = io::read_triple(&path, model.as_ref())?;
    let bh = assemble_block_hessian(model.as_ref(), &triple.x, &triple.psi, &triple.u)?;
    let opts = CertifyOptions {
        cond_cap: config.solver.cond_cap,
        hautus_tol: config.solver.hautus_tol,
        decay_margin: config.solver.decay_margin,
        ..CertifyOptions::default()
    };
    let lt = lt_checks(
        &HamiltonianBlocks::from_full(&bh),
        opts.cond_cap,
        opts.hautus_tol,
    )?;
    let et = check_et_hypotheses(&triple.x, &triple.psi, &triple.u, &bh, opts.split_tol)?;
    fs::write(out.join("hypothesis_report.txt"), hypothesis_text(&lt, &et))?;

    match certify(&triple.x, &triple.psi, &triple.u, &bh, &opts) {
        Ok(cert) => {
            write_report(out, "certificate.json", &config.hash(), &cert)?;
            Ok(cert)
        }
        Err(err) => {
            #[derive(Serialize)]
            struct Failure<'a> {
                error: String,
                lt: &'a crate::spectral::LtReport,
                et: &'a crate::spectral::EtReport,
            }
            write_report(
                out,
                "hypothesis_failure.json",
                &config.hash(),
                &Failure {
                    error: err.to_string(),
                    lt: &lt,
                    et: &et,
                },
            )?;
            Err(err)
        }
    }
}

#[derive(Serialize)]
struct DynamicReport {
    cost: f64,
    pmp_residual: f64,
    sweeps: usize,
    hamiltonian_drift: f64,
    transversality_defect: f64,
}

/// Solves the finite-horizon problem from the configured ensemble and
/// writes the trajectory and its report.
pub fn stage_solve_dynamic(config: &ExperimentConfig, out: &Path) -> Result<Trajectory> {
    ensure_dir(out)?;
    let model = build_model(&config.model)?;
    let d = model.state_dim();
    let x0 = build_ensemble(&config.initial_ensemble, config.n_particles, d, config.seed)?;
    let opts = SweepOptions {
        tol: config.solver.sweep_tol,
        max_sweeps: config.solver.max_sweeps,
        theta: config.solver.relaxation,
        ..SweepOptions::default()
    };
    let traj = solve_pmp(
        model.as_ref(),
        &RandomVector::from_measure(&x0),
        config.horizon,
        config.steps,
        &opts,
    )?;
    io::write_trajectory(&trajectory_path(out), &traj)?;
    let series = hamiltonian_series(model.as_ref(), &traj)?;
    let drift = series
        .iter()
        .map(|h| (h - series[0]).abs())
        .fold(0.0, f64::max);
    let report = DynamicReport {
        cost: traj.cost,
        pmp_residual: traj.pmp_residual,
        sweeps: traj.sweeps,
        hamiltonian_drift: drift,
        transversality_defect: transversality_defect(model.as_ref(), &traj)?,
    };
    write_report(out, "dynamic_report.json", &config.hash(), &report)?;
    Ok(traj)
}

/// Builds the turnpike report from the stored triple, trajectory and
/// certificate; writes the JSON report and the plot-data files.
pub fn stage_turnpike_report(config: &ExperimentConfig, out: &Path) -> Result<TurnpikeReport> {
    ensure_dir(out)?;
    let model = build_model(&config.model)?;
    let (d, m) = (model.state_dim(), model.control_dim());
    for (path, hint) in [
        (triple_path(out), "solve-static"),
        (trajectory_path(out), "solve-dynamic"),
        (certificate_path(out), "riccati"),
    ] {
        if !path.exists() {
            return Err(Error::Config {
                path: path.display().to_string(),
                detail: format!("missing input; run {hint} first"),
            });
        }
    }
    let triple = io::read_triple(&triple_path(out), model.as_ref())?;
    let traj = io::read_trajectory(&trajectory_path(out), d, m)?;
    let beta = read_certificate_beta(&certificate_path(out))?;
    let x0 = build_ensemble(&config.initial_ensemble, config.n_particles, d, config.seed)?;
    let window = (config.solver.fit_window[0], config.solver.fit_window[1]);
    let report = build_report(
        model.as_ref(),
        &traj,
        &triple,
        &RandomVector::from_measure(&x0),
        beta,
        window,
    )?;
    write_report(out, "turnpike_report.json", &config.hash(), &report)?;

    // Plot data: the deviation series and the fitted envelope.
    io::write_series(
        &out.join("deviation.csv"),
        ("t", "deviation"),
        &report.lagrangian.times,
        &report.lagrangian.total,
    )?;
    let horizon = *report.lagrangian.times.last().expect("nonempty grid");
    let fit = &report.lagrangian_fit;
    let envelope: Vec<f64> = report
        .lagrangian
        .times
        .iter()
        .map(|&t| fit.c * ((-fit.alpha * t).exp() + (-fit.alpha * (horizon - t)).exp()))
        .collect();
    io::write_series(
        &out.join("envelope.csv"),
        ("t", "envelope"),
        &report.lagrangian.times,
        &envelope,
    )?;
    Ok(report)
}

fn read_certificate_beta(path: &Path) -> Result<f64> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    value
        .get("report")
        .and_then(|r| r.get("beta"))
        .and_then(serde_json::Value::as_f64)
        .ok_or_else(|| Error::Config {
            path: path.display().to_string(),
            detail: "certificate has no decay rate".into(),
        })
}

#[derive(Serialize)]
struct PipelineSummary<'a> {
    config_hash: &'a str,
    stages: Vec<&'static str>,
}

/// Runs the full stage sequence, short-circuiting on hypothesis failures
/// after writing all diagnostics computed so far.
pub fn run_pipeline(config: &ExperimentConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let hash = config.hash();
    let mut stages = Vec::new();
    stage_validate(config, out)?;
    stages.push("validate");
    stage_solve_static(config, out)?;
    stages.push("solve-static");
    stage_riccati(config, out)?;
    stages.push("riccati");
    stage_solve_dynamic(config, out)?;
    stages.push("solve-dynamic");
    stage_turnpike_report(config, out)?;
    stages.push("turnpike-report");
    io::write_json(
        &out.join("pipeline_summary.json"),
        &PipelineSummary {
            config_hash: &hash,
            stages,
        },
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_config() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
  "model": {"name": "scalar_lq", "a": 0.0, "b": 1.0},
  "n_particles": 2,
  "initial_ensemble": {"type": "gaussian", "mean": [0.05], "std": [0.02]},
  "horizon": 6.0,
  "steps": 120,
  "solver": {"sweep_tol": 1e-9},
  "seed": 11
}"#,
        )
        .unwrap()
    }

    #[test]
    fn pipeline_produces_all_artifacts() {
        let out = std::env::temp_dir().join("mfturnpike-pipeline-test");
        let _ = fs::remove_dir_all(&out);
        let config = scalar_config();
        run_pipeline(&config, &out).unwrap();
        for name in [
            "validate.json",
            "stationary_triple.csv",
            "static_report.json",
            "hypothesis_report.txt",
            "certificate.json",
            "trajectory.csv",
            "dynamic_report.json",
            "turnpike_report.json",
            "deviation.csv",
            "envelope.csv",
            "pipeline_summary.json",
        ] {
            assert!(out.join(name).exists(), "missing artifact {name}");
        }
        // Every artifact carries the config hash.
        let text = fs::read_to_string(out.join("certificate.json")).unwrap();
        assert!(text.contains(&config.hash()));
    }

    #[test]
    fn stages_refuse_to_run_without_inputs() {
        let out = std::env::temp_dir().join("mfturnpike-pipeline-missing");
        let _ = fs::remove_dir_all(&out);
        fs::create_dir_all(&out).unwrap();
        let config = scalar_config();
        assert!(matches!(
            stage_riccati(&config, &out),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            stage_turnpike_report(&config, &out),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn failing_hypotheses_short_circuit_with_diagnostics() {
        // Zero-observation model: the running cost ignores the state, so
        // detectability fails and the pipeline stops at the decay stage.
        let out = std::env::temp_dir().join("mfturnpike-pipeline-fail");
        let _ = fs::remove_dir_all(&out);
        let config = ExperimentConfig::from_json(
            r#"{
  "model": {"name": "lq_mean_field", "state_dim": 1, "control_dim": 1,
            "a": [1.0], "a_bar": [0.0], "b": [1.0],
            "q": [0.0], "q_bar": [0.0], "r": [1.0]},
  "n_particles": 2,
  "initial_ensemble": {"type": "explicit", "points": [[0.01], [0.02]]},
  "horizon": 2.0,
  "steps": 40,
  "seed": 3
}"#,
        )
        .unwrap();
        let err = run_pipeline(&config, &out).unwrap_err();
        assert_eq!(err.exit_code(), 3, "unexpected error: {err}");
        assert!(out.join("hypothesis_failure.json").exists());
        assert!(out.join("hypothesis_report.txt").exists());
        assert!(!out.join("turnpike_report.json").exists());
    }
}
