//! CLI command implementations: config loading, study dispatch, CSV and
//! manifest emission, exit-code policy.
//!
//! Exit codes: 0 success, 2 configuration errors, 3 numerical overflow,
//! 4 inconclusive convergence fit, 1 selftest failure. A run manifest is
//! written before results and finalised afterwards, including on failures.
//!
//! All floats in CSV output use Rust's shortest round-trip formatting, so
//! identical runs produce byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{validate_config, ExperimentConfig};
use crate::error::{Error, Result};
use crate::flows::FlowConfig;
use crate::hjm::{h_alpha_norm, h_alpha_norm_direct, ForwardCurve};
use crate::models::BUILTIN_MODELS;
use crate::montecarlo::{supermartingale_check, convergence_study, ErrorReport, SupermartingaleReport};
use crate::selftest;
use crate::splitting::{simulate_path, SchemeSpec};

/// Recorded run metadata; the hash and seed are fixed before any results.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub command: String,
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
    pub status: String,
}

impl RunManifest {
    fn new(command: &str, config_hash: String, seed: u64) -> Self {
        RunManifest {
            config_hash,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            outputs: Vec::new(),
            wall_clock_secs: 0.0,
            status: "running".to_string(),
        }
    }

    fn write(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join("manifest.json");
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest serialization failed: {e}")))?;
        fs::write(&path, body)
            .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }
}

/// Shortest representation that parses back to the identical f64.
pub fn format_f64(v: f64) -> String {
    format!("{v}")
}

fn format_point(x0: &[f64]) -> String {
    x0.iter()
        .map(|v| format_f64(*v))
        .collect::<Vec<_>>()
        .join(";")
}

/// Per-level error table: one row per (scheme, nsteps, grid point).
pub fn render_errors_csv(report: &ErrorReport) -> String {
    let mut out = String::from(
        "scheme,nsteps,dt,grid_point,raw_error,weighted_error,stderr,argmax_flag\n",
    );
    for scheme in &report.schemes {
        for level in &scheme.levels {
            for (i, p) in level.points.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    scheme.scheme,
                    level.nsteps,
                    format_f64(level.dt),
                    format_point(&p.x0),
                    format_f64(p.raw_error),
                    format_f64(p.weighted_error),
                    format_f64(p.stderr),
                    u8::from(i == level.argmax_index),
                ));
            }
        }
    }
    out
}

/// Fitted-order summary: one row per scheme.
pub fn render_summary_csv(report: &ErrorReport) -> String {
    let mut out = String::from("scheme,slope,residual,levels_used\n");
    for scheme in &report.schemes {
        match (&scheme.slope, scheme.exact) {
            (Some(fit), _) => out.push_str(&format!(
                "{},{},{},{}\n",
                scheme.scheme,
                format_f64(fit.slope),
                format_f64(fit.residual),
                fit.levels_used
            )),
            (None, true) => out.push_str(&format!("{},exact,0,0\n", scheme.scheme)),
            (None, false) => out.push_str(&format!("{},unresolved,0,0\n", scheme.scheme)),
        }
    }
    out
}

pub fn render_supermartingale_csv(
    report: &SupermartingaleReport,
    grid: &[Vec<f64>],
) -> String {
    let mut out = String::from("t,grid_point,ratio,rel_stderr,bound,violation\n");
    for (i, p) in report.points.iter().enumerate() {
        let bound = (report.omega_hat * p.t).exp() * (1.0 + 3.0 * p.rel_stderr);
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            format_f64(p.t),
            format_point(&grid[p.grid_index]),
            format_f64(p.ratio),
            format_f64(p.rel_stderr),
            format_f64(bound),
            u8::from(report.violations.contains(&i)),
        ));
    }
    out
}

fn write_output(out_dir: &Path, name: &str, body: &str, outputs: &mut Vec<String>) -> Result<()> {
    let path = out_dir.join(name);
    fs::write(&path, body)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
    outputs.push(name.to_string());
    Ok(())
}

/// CLI options shared by the study commands.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub config_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed_override: Option<u64>,
    pub debug_hjm_norm: bool,
}

fn load_config(opts: &RunOptions) -> std::result::Result<ExperimentConfig, i32> {
    let Some(path) = &opts.config_path else {
        eprintln!("error: this command requires --config");
        return Err(2);
    };
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return Err(2);
        }
    };
    match validate_config(&text) {
        Ok(mut cfg) => {
            if let Some(seed) = opts.seed_override {
                cfg.seed = seed;
            }
            Ok(cfg)
        }
        Err(violations) => {
            eprintln!("error: invalid configuration ({} violations):", violations.len());
            for v in violations {
                eprintln!("  {v}");
            }
            Err(2)
        }
    }
}

fn ensure_out_dir(out_dir: &Path) -> std::result::Result<(), i32> {
    if let Err(e) = fs::create_dir_all(out_dir) {
        eprintln!("error: cannot create {}: {e}", out_dir.display());
        return Err(2);
    }
    Ok(())
}

fn finalize(
    mut manifest: RunManifest,
    out_dir: &Path,
    started: std::time::Instant,
    result: Result<Vec<String>>,
) -> i32 {
    manifest.wall_clock_secs = started.elapsed().as_secs_f64();
    match result {
        Ok(outputs) => {
            manifest.outputs = outputs;
            manifest.status = "ok".to_string();
            if manifest.write(out_dir).is_err() {
                return 2;
            }
            0
        }
        Err(e) => {
            manifest.status = format!("error: {e}");
            let _ = manifest.write(out_dir);
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// `convergence`: weighted weak errors per level plus fitted orders.
pub fn run_convergence(opts: &RunOptions) -> i32 {
    let cfg = match load_config(opts) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if ensure_out_dir(&opts.out_dir).is_err() {
        return 2;
    }
    let started = std::time::Instant::now();
    let manifest = RunManifest::new("convergence", cfg.config_hash(), cfg.seed);
    let _ = manifest.write(&opts.out_dir);

    let result = (|| -> Result<(ErrorReport, Vec<String>)> {
        let plan = cfg.to_study_plan()?;
        let report = convergence_study(&plan)?;
        let mut outputs = Vec::new();
        write_output(
            &opts.out_dir,
            "errors.csv",
            &render_errors_csv(&report),
            &mut outputs,
        )?;
        write_output(
            &opts.out_dir,
            "summary.csv",
            &render_summary_csv(&report),
            &mut outputs,
        )?;
        Ok((report, outputs))
    })();

    match result {
        Ok((report, outputs)) => {
            for s in &report.schemes {
                match (&s.slope, s.exact) {
                    (Some(fit), _) => println!(
                        "{}: slope {} over {} levels ({} evaluation)",
                        s.scheme,
                        format_f64(fit.slope),
                        fit.levels_used,
                        s.evaluation
                    ),
                    (None, true) => println!(
                        "{}: exact at machine precision on all levels; slope undefined",
                        s.scheme
                    ),
                    (None, false) => println!(
                        "{}: fewer than 3 statistically resolved levels",
                        s.scheme
                    ),
                }
            }
            let code = match report.inconclusive_error() {
                Some(e) => {
                    eprintln!("error: {e}");
                    e.exit_code()
                }
                None => 0,
            };
            let status_result = if code == 0 {
                Ok(outputs)
            } else {
                // Artifacts were written; record the inconclusive status.
                let mut m = RunManifest::new("convergence", cfg.config_hash(), cfg.seed);
                m.outputs = outputs;
                m.wall_clock_secs = started.elapsed().as_secs_f64();
                m.status = "inconclusive".to_string();
                let _ = m.write(&opts.out_dir);
                return code;
            };
            finalize(
                RunManifest::new("convergence", cfg.config_hash(), cfg.seed),
                &opts.out_dir,
                started,
                status_result,
            )
        }
        Err(e) => finalize(
            RunManifest::new("convergence", cfg.config_hash(), cfg.seed),
            &opts.out_dir,
            started,
            Err(e),
        ),
    }
}

/// `supermartingale`: moment-growth exponent and bound violations.
pub fn run_supermartingale(opts: &RunOptions) -> i32 {
    let cfg = match load_config(opts) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if ensure_out_dir(&opts.out_dir).is_err() {
        return 2;
    }
    let started = std::time::Instant::now();
    let manifest = RunManifest::new("supermartingale", cfg.config_hash(), cfg.seed);
    let _ = manifest.write(&opts.out_dir);

    let result = (|| -> Result<Vec<String>> {
        let model = cfg.build_model()?;
        let weight = cfg.build_weight(&model)?;
        let grid = cfg.build_grid()?;
        let flow = FlowConfig::new(cfg.flow_substeps)?;
        let sm = &cfg.supermartingale;
        let report = supermartingale_check(
            &model,
            &flow,
            &weight,
            cfg.study.t,
            &grid,
            sm.npaths,
            &sm.timepoints,
            sm.nsteps,
            cfg.seed,
        )?;
        println!(
            "omega_hat = {}, violations = {}",
            format_f64(report.omega_hat),
            report.violations.len()
        );
        let mut outputs = Vec::new();
        write_output(
            &opts.out_dir,
            "supermartingale.csv",
            &render_supermartingale_csv(&report, &grid),
            &mut outputs,
        )?;
        write_output(
            &opts.out_dir,
            "omega.csv",
            &format!(
                "omega_hat,violations\n{},{}\n",
                format_f64(report.omega_hat),
                report.violations.len()
            ),
            &mut outputs,
        )?;
        Ok(outputs)
    })();
    finalize(manifest, &opts.out_dir, started, result)
}

fn render_curve_csv(curve: &ForwardCurve) -> String {
    let mut out = String::from("x,value\n");
    let grid = curve.grid();
    for (i, v) in curve.values().iter().enumerate() {
        out.push_str(&format!("{},{}\n", format_f64(grid.node(i)), format_f64(*v)));
    }
    out
}

/// `hjm-demo`: curve snapshots plus the bond-payoff convergence table.
pub fn run_hjm_demo(opts: &RunOptions) -> i32 {
    let cfg = match load_config(opts) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if ensure_out_dir(&opts.out_dir).is_err() {
        return 2;
    }
    let started = std::time::Instant::now();
    let manifest = RunManifest::new("hjm-demo", cfg.config_hash(), cfg.seed);
    let _ = manifest.write(&opts.out_dir);

    let result = (|| -> Result<Vec<String>> {
        let grid = cfg
            .maturity_grid()
            .ok_or_else(|| Error::Config("hjm-demo requires the hjm model".into()))?;
        let alpha = match &cfg.model {
            crate::config::ModelSpec::Hjm { alpha, .. } => *alpha,
            _ => unreachable!("guarded above"),
        };
        let model = cfg.build_model()?;
        let states = cfg.build_grid()?;
        let initial = ForwardCurve::new(grid, states[0].clone(), alpha)?;

        let mut outputs = Vec::new();
        write_output(
            &opts.out_dir,
            "curve_initial.csv",
            &render_curve_csv(&initial),
            &mut outputs,
        )?;
        let drift = ForwardCurve::new(grid, model.drift(initial.values())?, alpha)?;
        write_output(
            &opts.out_dir,
            "curve_hjm_drift.csv",
            &render_curve_csv(&drift),
            &mut outputs,
        )?;
        let shifted = crate::hjm::shift_semigroup(&initial, cfg.study.t)?;
        write_output(
            &opts.out_dir,
            "curve_shifted.csv",
            &render_curve_csv(&shifted),
            &mut outputs,
        )?;
        let flow = FlowConfig::new(cfg.flow_substeps)?;
        let scheme = SchemeSpec::ninomiya_victoir(model.noise_dim());
        let finest = *cfg.study.step_counts.iter().max().unwrap_or(&16);
        let mut rng = crate::montecarlo::path_rng(cfg.seed, 0x44454d4f, 0, 0);
        let sample = simulate_path(
            &model,
            &flow,
            &scheme,
            cfg.study.t,
            finest,
            initial.values(),
            &mut rng,
        )?;
        write_output(
            &opts.out_dir,
            "curve_sample_terminal.csv",
            &render_curve_csv(&ForwardCurve::new(grid, sample, alpha)?),
            &mut outputs,
        )?;

        if opts.debug_hjm_norm {
            let body = format!(
                "variant,value\nderivative,{}\ndirect,{}\n",
                format_f64(h_alpha_norm(&initial)),
                format_f64(h_alpha_norm_direct(&initial)),
            );
            println!(
                "h_alpha norms of the initial curve: derivative={} direct={}",
                format_f64(h_alpha_norm(&initial)),
                format_f64(h_alpha_norm_direct(&initial)),
            );
            write_output(&opts.out_dir, "norms.csv", &body, &mut outputs)?;
        }

        let plan = cfg.to_study_plan()?;
        let report = convergence_study(&plan)?;
        write_output(
            &opts.out_dir,
            "errors.csv",
            &render_errors_csv(&report),
            &mut outputs,
        )?;
        write_output(
            &opts.out_dir,
            "summary.csv",
            &render_summary_csv(&report),
            &mut outputs,
        )?;
        for s in &report.schemes {
            if let Some(fit) = &s.slope {
                println!(
                    "{}: slope {} over {} levels",
                    s.scheme,
                    format_f64(fit.slope),
                    fit.levels_used
                );
            }
        }
        Ok(outputs)
    })();
    finalize(manifest, &opts.out_dir, started, result)
}

/// `list-models`: the built-in model registry.
pub fn run_list_models() -> i32 {
    for name in BUILTIN_MODELS {
        println!("{name}");
    }
    0
}

/// `selftest`: the invariant suite; nonzero exit on any failure.
pub fn run_selftest() -> i32 {
    let results = selftest::run_all();
    let mut failed = 0usize;
    for r in &results {
        match &r.outcome {
            Ok(()) => println!("PASS {}", r.name),
            Err(msg) => {
                failed += 1;
                println!("FAIL {}: {msg}", r.name);
            }
        }
    }
    println!("{} checks, {} failed", results.len(), failed);
    if failed > 0 {
        1
    } else {
        0
    }
}
