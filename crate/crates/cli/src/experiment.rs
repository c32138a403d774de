//! Mode dispatch and artifact emission.

use std::path::{Path, PathBuf};

use kfpo::dualsim::{build_stacked, constant_offset, dual_cost_mc, stacked_cost_and_gradient};
use kfpo::instances::random_gains;
use kfpo::learner::{run_gd, run_sgd, Evaluator, RunTrace, SgdConfig};
use kfpo::linalg::stacked_frobenius;
use kfpo::objective::{cost, diagnostics, gradient, GainSchedule};
use kfpo::riccati::solve_riccati;
use kfpo::seed::rng_from_seed;
use kfpo::{validate, Mat, ModelSpec, NoiseSpec, Simulator};
use rayon::prelude::*;
use serde_json::json;

use crate::config::{ExperimentConfig, Mode};
use crate::trace::{aggregate, emit_trace, write_aggregate, AggregateRow};
use crate::{CliError, EXIT_FAILURE};

/// Central-difference step for gradient checks.
pub const FD_STEP: f64 = 1e-6;
/// Relative tolerance for gradient agreement.
pub const GRADIENT_TOLERANCE: f64 = 1e-6;
/// Duality check passes within this many standard errors.
pub const DUAL_SIGMAS: f64 = 3.0;
/// Scale of the random gains used by `check-gradient` and `oracle-compare`.
pub const CHECK_GAIN_SCALE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct SeedTrace {
    pub seed: u64,
    pub path: PathBuf,
    pub trace: RunTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub mode: Mode,
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub traces: Vec<SeedTrace>,
    pub aggregate: Vec<AggregateRow>,
    /// Human-readable output, one line per entry.
    pub summary: Vec<String>,
    /// Seeds whose run hit the divergence guard.
    pub diverged: Vec<u64>,
    /// Names of failed `check-gradient` / `oracle-compare` checks.
    pub failed_checks: Vec<String>,
}

impl ExperimentReport {
    fn new(config: &ExperimentConfig) -> Self {
        Self {
            mode: config.mode,
            out_dir: config.out_dir.clone(),
            files: Vec::new(),
            traces: Vec::new(),
            aggregate: Vec::new(),
            summary: Vec::new(),
            diverged: Vec::new(),
            failed_checks: Vec::new(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.diverged.is_empty() && self.failed_checks.is_empty() {
            0
        } else {
            EXIT_FAILURE
        }
    }

    fn line(&mut self, s: impl Into<String>) {
        self.summary.push(s.into());
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, CliError> {
    let (model, noise) = (&config.model, &config.noise);
    let report = validate(model, noise)?;
    let mut out = ExperimentReport::new(config);
    if config.mode == Mode::Validate {
        out.summary.extend(report.to_string().lines().map(str::to_string));
        if !report.passed() {
            return Err(CliError::Validation(report.to_string()));
        }
        return Ok(out);
    }
    if !report.passed() {
        return Err(CliError::Validation(report.to_string()));
    }
    std::fs::create_dir_all(&config.out_dir).map_err(|e| CliError::io(&config.out_dir, e))?;
    match config.mode {
        Mode::Validate => unreachable!(),
        Mode::Simulate => simulate(config, &mut out)?,
        Mode::Riccati => riccati(model, noise, &config.out_dir, &mut out)?,
        Mode::CheckGradient => check_gradient(config, &mut out)?,
        Mode::Constants => constants(model, noise, &config.out_dir, &mut out)?,
        Mode::OracleCompare => oracle_compare(config, &mut out)?,
        Mode::Gd => gd(config, &mut out)?,
        Mode::Sgd => sgd(config, &mut out)?,
    }
    Ok(out)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("json value serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_text(m: &Mat) -> Vec<String> {
    m.row_iter()
        .map(|r| r.iter().map(|v| format!("{v:>14.6e}")).collect::<Vec<_>>().join(" "))
        .collect()
}

fn simulate(config: &ExperimentConfig, out: &mut ExperimentReport) -> Result<(), CliError> {
    let sim = Simulator::new(&config.model, &config.noise)?;
    let (n, m) = (config.model.state_dim(), config.model.obs_dim());
    for &seed in &config.seeds {
        let tr = sim.simulate(seed);
        let path = config.out_dir.join(format!("trajectory_seed{seed}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|source| CliError::Csv {
            path: path.clone(),
            source,
        })?;
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend((0..m).map(|i| format!("y{i}")));
        let csv_err = |source| CliError::Csv {
            path: path.clone(),
            source,
        };
        w.write_record(&header).map_err(csv_err)?;
        for (t, x) in tr.states().iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(x.iter().map(|v| v.to_string()));
            if t == 0 {
                rec.extend((0..m).map(|_| String::new()));
            } else {
                rec.extend(tr.y(t).iter().map(|v| v.to_string()));
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
        out.line(format!(
            "seed {seed}: {} observations -> {}",
            tr.last_time(),
            path.display()
        ));
        out.files.push(path);
    }
    Ok(())
}

fn riccati(model: &ModelSpec, noise: &NoiseSpec, dir: &Path, out: &mut ExperimentReport) -> Result<(), CliError> {
    let sol = solve_riccati(model, noise)?;
    let f_opt = cost(model, noise, &sol.gains);
    for (t, k) in sol.gains.stages().iter().enumerate() {
        out.line(format!("K*[{t}] ="));
        out.summary.extend(matrix_text(k));
    }
    for (t, p) in sol.p.iter().enumerate() {
        out.line(format!("P*[{t}] ="));
        out.summary.extend(matrix_text(p));
    }
    out.line(format!("f(K*) = {f_opt:.12e}"));
    for w in &sol.warnings {
        out.line(format!("warning: {w}"));
    }
    let path = dir.join("riccati.json");
    write_json(
        &path,
        &json!({
            "gains": sol.gains.stages().iter().map(rows).collect::<Vec<_>>(),
            "P": sol.p.iter().map(rows).collect::<Vec<_>>(),
            "condition_numbers": sol.condition_numbers,
            "warnings": sol.warnings,
            "optimal_cost": f_opt,
        }),
    )?;
    out.files.push(path);
    Ok(())
}

/// The gains checked by `check-gradient` and `oracle-compare`: zero, then one
/// random schedule per seed.
fn check_points(config: &ExperimentConfig) -> Vec<(String, GainSchedule)> {
    let mut points = vec![("K=0".to_string(), GainSchedule::zeros(&config.model))];
    for &seed in &config.seeds {
        let k = random_gains(&mut rng_from_seed(seed), &config.model, CHECK_GAIN_SCALE);
        points.push((format!("seed {seed}"), k));
    }
    points
}

fn central_differences(model: &ModelSpec, noise: &NoiseSpec, gains: &GainSchedule) -> Vec<Mat> {
    (0..gains.len())
        .map(|t| {
            let k = gains.stage(t);
            Mat::from_fn(k.nrows(), k.ncols(), |i, j| {
                let mut plus = gains.clone();
                plus.stage_mut(t)[(i, j)] += FD_STEP;
                let mut minus = gains.clone();
                minus.stage_mut(t)[(i, j)] -= FD_STEP;
                (cost(model, noise, &plus) - cost(model, noise, &minus)) / (2.0 * FD_STEP)
            })
        })
        .collect()
}

fn relative_error(a: &[Mat], b: &[Mat]) -> f64 {
    let diff: Vec<Mat> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    stacked_frobenius(&diff) / stacked_frobenius(b).max(1.0)
}

fn check_gradient(config: &ExperimentConfig, out: &mut ExperimentReport) -> Result<(), CliError> {
    let (model, noise) = (&config.model, &config.noise);
    let path = config.out_dir.join("check_gradient.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|source| CliError::Csv {
        path: path.clone(),
        source,
    })?;
    let csv_err = |source| CliError::Csv {
        path: path.clone(),
        source,
    };
    w.write_record(["point", "stage", "relative_error", "passed"])
        .map_err(csv_err)?;
    for (label, k) in check_points(config) {
        let exact = gradient(model, noise, &k).per_stage;
        let fd = central_differences(model, noise, &k);
        for t in 0..k.len() {
            let err = relative_error(&exact[t..=t], &fd[t..=t]);
            let ok = err < GRADIENT_TOLERANCE;
            out.line(format!(
                "{label} stage {t}: relative error {err:.3e} {}",
                if ok { "ok" } else { "FAIL" }
            ));
            if !ok {
                out.failed_checks.push(format!("{label} stage {t}"));
            }
            w.write_record([label.clone(), t.to_string(), err.to_string(), ok.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    out.files.push(path);
    Ok(())
}

fn constants(model: &ModelSpec, noise: &NoiseSpec, dir: &Path, out: &mut ExperimentReport) -> Result<(), CliError> {
    let ev = Evaluator::new(model, noise)?;
    let d = diagnostics(model, noise, &GainSchedule::zeros(model), ev.f_opt)?;
    out.summary.extend(d.to_string().lines().map(str::to_string));
    let path = dir.join("constants.json");
    write_json(
        &path,
        &json!({
            "gains": "zero",
            "cost": d.cost,
            "f_opt": d.f_opt,
            "sigma_min": d.sigma_min,
            "sigma_max": d.sigma_max,
            "sigma_min_aqa": d.sigma_min_aqa,
            "sigma_min_r": d.sigma_min_r,
            "sigma_max_cqc_r": d.sigma_max_cqc_r,
            "a_of_k": d.a_of_k,
            "b_of_k": d.b_of_k,
            "c_of_k": d.c_of_k,
            "a_of_opt": d.a_of_opt,
            "b_of_opt": d.b_of_opt,
            "c1": d.c1,
            "c2": d.c2,
            "c3": d.c3,
            "c4": d.c4,
            "eta": d.eta,
            "alpha": d.alpha,
            "rho": d.rho,
            "rho_max": d.rho_max,
            "c10": d.c10,
        }),
    )?;
    out.files.push(path);
    Ok(())
}

fn oracle_compare(config: &ExperimentConfig, out: &mut ExperimentReport) -> Result<(), CliError> {
    let (model, noise) = (&config.model, &config.noise);
    let path = config.out_dir.join("oracle_compare.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|source| CliError::Csv {
        path: path.clone(),
        source,
    })?;
    let csv_err = |source| CliError::Csv {
        path: path.clone(),
        source,
    };
    w.write_record(["point", "check", "value", "tolerance", "passed"])
        .map_err(csv_err)?;
    let offset = constant_offset(model, noise);
    for (i, (label, k)) in check_points(config).into_iter().enumerate() {
        let exact = gradient(model, noise, &k);
        let fd = central_differences(model, noise, &k);
        let rep = build_stacked(model, noise, &k)?;
        let stacked = stacked_cost_and_gradient(&rep, model, &k);
        let seed = config.seeds.get(i.saturating_sub(1)).copied().unwrap_or(0);
        let mc = dual_cost_mc(model, noise, &k, config.dual_samples, seed)?;
        let z = (mc.mean - exact.value) / mc.std_error;
        let checks = [
            (
                "gradient vs finite differences",
                relative_error(&exact.per_stage, &fd),
                GRADIENT_TOLERANCE,
            ),
            (
                "stacked vs gradient",
                relative_error(&stacked.per_stage, &exact.per_stage),
                GRADIENT_TOLERANCE,
            ),
            (
                "stacked vs finite differences",
                relative_error(&stacked.per_stage, &fd),
                GRADIENT_TOLERANCE,
            ),
            (
                "stacked cost vs cost",
                (stacked.f1 - offset - exact.value).abs() / exact.value.abs().max(1.0),
                1e-9,
            ),
            ("dual Monte Carlo |z|", z.abs(), DUAL_SIGMAS),
        ];
        for (name, value, tol) in checks {
            let ok = value < tol;
            out.line(format!(
                "{label:>10} {name:<32} {value:>12.4e} < {tol:.0e} {}",
                if ok { "PASS" } else { "FAIL" }
            ));
            if !ok {
                out.failed_checks.push(format!("{label}: {name}"));
            }
            w.write_record([
                label.clone(),
                name.to_string(),
                value.to_string(),
                tol.to_string(),
                ok.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    out.files.push(path);
    Ok(())
}

fn summarize(out: &mut ExperimentReport, label: &str, trace: &RunTrace) {
    if let Some(last) = trace.last() {
        out.line(format!(
            "{label}: iter {} cost {:.9e} normalized error {:.6e}",
            last.iter, last.cost, last.normalized_error
        ));
    }
    if let Some(d) = &trace.diverged {
        out.line(format!(
            "{label}: diverged at iter {} (cost {:.3e} above {:.3e})",
            d.iter, d.cost, d.threshold
        ));
    }
}

fn gd(config: &ExperimentConfig, out: &mut ExperimentReport) -> Result<(), CliError> {
    let (model, noise) = (&config.model, &config.noise);
    let trace = run_gd(model, noise, &GainSchedule::zeros(model), config.eta, config.iterations)?;
    let path = config.out_dir.join("gd_trace.csv");
    emit_trace(&trace.records, &path, config.timing)?;
    summarize(out, "gd", &trace);
    let ev = Evaluator::new(model, noise)?;
    out.line(format!("gd: ||K - K*||_F = {:.6e}", ev.gain_error(&trace.final_gains)));
    if trace.diverged.is_some() {
        out.diverged.push(config.seeds[0]);
    }
    out.files.push(path.clone());
    out.traces.push(SeedTrace {
        seed: config.seeds[0],
        path,
        trace,
    });
    Ok(())
}

fn sgd(config: &ExperimentConfig, out: &mut ExperimentReport) -> Result<(), CliError> {
    let (model, noise) = (&config.model, &config.noise);
    let sim = Simulator::new(model, noise)?;
    let ev = Evaluator::new(model, noise)?;
    let k0 = GainSchedule::zeros(model);
    let eta = config.eta.unwrap_or(kfpo::learner::DEFAULT_ETA);
    let runs: Vec<Result<SeedTrace, CliError>> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let sgd_config = SgdConfig {
                eta,
                iterations: config.iterations,
                samples: config.samples,
                master_seed: seed,
                resample_each_iter: config.resample_each_iter,
            };
            let trace = run_sgd(model, &k0, &sgd_config, &sim, Some(&ev))?;
            let path = config.out_dir.join(format!("sgd_seed{seed}.csv"));
            emit_trace(&trace.records, &path, config.timing)?;
            Ok(SeedTrace { seed, path, trace })
        })
        .collect();
    for run in runs {
        let run = run?;
        summarize(out, &format!("seed {}", run.seed), &run.trace);
        if run.trace.diverged.is_some() {
            out.diverged.push(run.seed);
        }
        out.files.push(run.path.clone());
        out.traces.push(run);
    }
    let records: Vec<&[_]> = out.traces.iter().map(|t| t.trace.records.as_slice()).collect();
    out.aggregate = aggregate(&records);
    let path = config.out_dir.join("sgd_aggregate.csv");
    write_aggregate(&out.aggregate, &path)?;
    if let Some(last) = out.aggregate.last() {
        let line = format!(
            "aggregate over {} seeds: iter {} mean {:.6e} min {:.6e} max {:.6e}",
            out.traces.len(),
            last.iter,
            last.mean,
            last.min,
            last.max
        );
        out.line(line);
    }
    out.files.push(path);
    Ok(())
}
