//! Fast invariant suite behind the `selftest` CLI command.
//!
//! Each check is a small deterministic probe of one structural property;
//! the full suite runs in a few seconds.

use crate::config::validate_config;
use crate::flows::{diffusion_flow, drift_flow, FlowConfig};
use crate::harness::render_errors_csv;
use crate::hjm::{
    bond_payoff, h_alpha_norm, s_operator, shift_semigroup, ForwardCurve, MaturityGrid,
};
use crate::models::{gbm, heat_spde, ou, Payoff};
use crate::montecarlo::{
    convergence_study, power_bound_probe, weighted_weak_error_affine, StudyPlan,
};
use crate::splitting::{
    affine_step_map, propagate_moments_affine, step_with_assignment, SchemeSpec,
};
use crate::weighted_space::{weighted_sup_norm, WeightFamily, WeightFunction};

pub struct CheckResult {
    pub name: &'static str,
    pub outcome: Result<(), String>,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(), String>) -> CheckResult {
    CheckResult {
        name,
        outcome: f(),
    }
}

fn close(got: f64, want: f64, tol: f64, what: &str) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what}: got {got}, want {want} (tol {tol})"))
    }
}

pub fn run_all() -> Vec<CheckResult> {
    vec![
        check("weight-eval-examples", || {
            let w = WeightFunction::new(WeightFamily::Polynomial { s: 2.0 }).map_err(|e| e.to_string())?;
            close(w.eval(&[1.0, 2.0]).map_err(|e| e.to_string())?, 6.0, 1e-14, "psi(1,2)")?;
            let cloud: Vec<(Vec<f64>, f64)> =
                [0.0, 1.0, 2.0].iter().map(|&x| (vec![x], x)).collect();
            close(
                weighted_sup_norm(&cloud, &w).map_err(|e| e.to_string())?,
                0.5,
                1e-14,
                "sup norm",
            )
        }),
        check("stratonovich-correction-gbm", || {
            let m = gbm(0.1, 0.2).map_err(|e| e.to_string())?;
            let a0 = m.stratonovich_drift(&[1.0]).map_err(|e| e.to_string())?;
            close(a0[0], 0.08, 1e-13, "alpha0(1)")
        }),
        check("drift-flow-fourth-order", || {
            let m = ou(1.0, 0.0, 0.5).map_err(|e| e.to_string())?.without_exact_flows();
            let exact = (-0.5f64).exp();
            let mut errs = Vec::new();
            for steps in [1usize, 2, 4, 8] {
                let cfg = FlowConfig::new(steps).map_err(|e| e.to_string())?;
                let z = drift_flow(&m, &cfg, 0.5, &[1.0]).map_err(|e| e.to_string())?;
                errs.push(((steps as f64).ln(), (z[0] - exact).abs().ln()));
            }
            let n = errs.len() as f64;
            let sx: f64 = errs.iter().map(|p| p.0).sum();
            let sy: f64 = errs.iter().map(|p| p.1).sum();
            let sxx: f64 = errs.iter().map(|p| p.0 * p.0).sum();
            let sxy: f64 = errs.iter().map(|p| p.0 * p.1).sum();
            let slope = -(n * sxy - sx * sy) / (n * sxx - sx * sx);
            close(slope, 4.0, 0.3, "integrator order")
        }),
        check("diffusion-flow-group-law", || {
            let m = gbm(0.1, 0.2).map_err(|e| e.to_string())?.without_exact_flows();
            let cfg = FlowConfig::default();
            for w in [0.3, -0.8] {
                let fwd = diffusion_flow(&m, &cfg, 0, w, &[1.4]).map_err(|e| e.to_string())?;
                let back = diffusion_flow(&m, &cfg, 0, -w, &fwd).map_err(|e| e.to_string())?;
                close(back[0], 1.4, 1e-9, "group law")?;
            }
            Ok(())
        }),
        check("gbm-commuting-exactness", || {
            let m = gbm(0.1, 0.2).map_err(|e| e.to_string())?;
            let cfg = FlowConfig::default();
            let nsteps = 8;
            let dt = 1.0 / nsteps as f64;
            let incs: Vec<f64> = (0..nsteps).map(|i| 0.05 * (i as f64 - 4.0)).collect();
            for scheme in [SchemeSpec::euler(1), SchemeSpec::ninomiya_victoir(1)] {
                let mut state = vec![1.0];
                for w in &incs {
                    state = step_with_assignment(&m, &cfg, &scheme, 0, &[*w], dt, &state)
                        .map_err(|e| e.to_string())?;
                }
                let total: f64 = incs.iter().sum();
                let exact = ((0.1 - 0.02) + 0.2 * total).exp();
                close(state[0], exact, 1e-12, scheme.name())?;
            }
            Ok(())
        }),
        check("ou-affine-step-map", || {
            let m = ou(1.0, 0.0, 0.5).map_err(|e| e.to_string())?;
            let cfg = FlowConfig::default();
            let dt = 0.25;
            let nv = affine_step_map(&m, &cfg, &SchemeSpec::ninomiya_victoir(1), dt, 0)
                .map_err(|e| e.to_string())?;
            close(nv.linear[(0, 0)], (-dt as f64).exp(), 1e-12, "L")?;
            close(
                nv.loadings[0][0],
                0.5 * (-dt / 2.0f64).exp(),
                1e-12,
                "noise loading",
            )
        }),
        check("affine-moments-vs-oracle", || {
            let m = ou(1.0, 0.0, 0.5).map_err(|e| e.to_string())?;
            let cfg = FlowConfig::default();
            let st = propagate_moments_affine(&m, &cfg, &SchemeSpec::euler(1), 1.0, 512, &[1.0])
                .map_err(|e| e.to_string())?;
            // At 512 steps the scheme law is within ~2e-4 of the OU law.
            let mean = m
                .exact_expectation(&Payoff::Moment1 { coordinate: 0 }, 1.0, &[1.0])
                .map_err(|e| e.to_string())?;
            close(st.mean[0], mean, 1e-6, "mean")?;
            let second = m
                .exact_expectation(&Payoff::Moment2 { coordinate: 0 }, 1.0, &[1.0])
                .map_err(|e| e.to_string())?;
            close(st.covariance[(0, 0)] + st.mean[0] * st.mean[0], second, 5e-4, "second moment")
        }),
        check("nv-error-quarters-on-ou", || {
            let m = ou(1.0, 0.0, 0.5).map_err(|e| e.to_string())?;
            let cfg = FlowConfig::default();
            let scheme = SchemeSpec::ninomiya_victoir(1);
            let payoff = Payoff::Moment2 { coordinate: 0 };
            let weight =
                WeightFunction::new(WeightFamily::Polynomial { s: 2.0 }).map_err(|e| e.to_string())?;
            let grid: Vec<Vec<f64>> = (-4..=4).map(|i| vec![i as f64]).collect();
            let refs: Vec<(f64, f64)> = grid
                .iter()
                .map(|x0| (m.exact_expectation(&payoff, 1.0, x0).unwrap(), 0.0))
                .collect();
            let run = |nsteps: usize| {
                weighted_weak_error_affine(
                    &m, &cfg, &scheme, &payoff, 1.0, nsteps, &grid, &weight, &refs, 0.3,
                )
                .map(|l| l.weighted_error)
                .map_err(|e| e.to_string())
            };
            let ratio = run(16)? / run(32)?;
            close(ratio, 4.0, 0.6, "error ratio")
        }),
        check("power-bound-ou-and-heat", || {
            let cfg = FlowConfig::default();
            let weight =
                WeightFunction::new(WeightFamily::Polynomial { s: 2.0 }).map_err(|e| e.to_string())?;
            for (model, grid) in [
                (ou(1.0, 0.0, 0.5).map_err(|e| e.to_string())?, (-4..=4)
                    .map(|i| vec![i as f64])
                    .collect::<Vec<_>>()),
                (heat_spde(8, vec![1.0; 4]).map_err(|e| e.to_string())?, (-2..=2)
                    .map(|i| {
                        let mut v = vec![0.0; 8];
                        v[0] = i as f64;
                        v
                    })
                    .collect::<Vec<_>>()),
            ] {
                for scheme in [
                    SchemeSpec::euler(model.noise_dim()),
                    SchemeSpec::ninomiya_victoir(model.noise_dim()),
                ] {
                    let probe = power_bound_probe(
                        &model, &cfg, &scheme, &weight, 1.0, 16, &grid, 0, 0, 0.05,
                    )
                    .map_err(|e| e.to_string())?;
                    if !probe.ok {
                        return Err(format!(
                            "{} on {}: horizon ratio {} exceeds bound {}",
                            scheme.name(),
                            model.name(),
                            probe.horizon_ratio,
                            probe.bound
                        ));
                    }
                }
            }
            Ok(())
        }),
        check("hjm-symbolic-values", || {
            // x_max = 16 with 256 intervals puts x = 1 exactly on a node.
            let g = MaturityGrid::new(16.0, 256).map_err(|e| e.to_string())?;
            let f = ForwardCurve::from_fn(g, |x| (-x).exp(), 1.0).map_err(|e| e.to_string())?;
            let sf = s_operator(&f);
            let i = (1.0 / g.spacing()).round() as usize;
            let exact = (-1.0f64).exp() * (1.0 - (-1.0f64).exp());
            close(sf.values()[i], exact, 1e-3, "S f at 1")?;
            close(h_alpha_norm(&f), 2.0f64.sqrt(), 1e-3, "H_alpha norm")?;
            let flat = ForwardCurve::flat(g, 0.05, 1.0).map_err(|e| e.to_string())?;
            let payoff = bond_payoff(g, 1.0).map_err(|e| e.to_string())?;
            close(payoff.eval(flat.values()), (-0.05f64).exp(), 1e-12, "bond")?;
            let shifted = shift_semigroup(&flat, 0.3).map_err(|e| e.to_string())?;
            if shifted.values() != flat.values() {
                return Err("shift does not preserve flat curves".into());
            }
            Ok(())
        }),
        check("determinism-across-worker-counts", || {
            let text = r#"
seed = 1234
[model]
name = "ou"
theta = 1.0
mu = 0.0
sigma = 0.5
[payoff]
kind = "moment2"
[study]
t = 1.0
step_counts = [4, 8, 16]
npaths = 400
evaluation = "monte-carlo"
[grid]
kind = "coordinate_range"
from = -2.0
to = 2.0
count = 3
"#;
            let cfg = validate_config(text).map_err(|v| format!("{v:?}"))?;
            let run = |threads: usize| -> Result<String, String> {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| e.to_string())?;
                pool.install(|| {
                    let plan: StudyPlan = cfg.to_study_plan().map_err(|e| e.to_string())?;
                    let report = convergence_study(&plan).map_err(|e| e.to_string())?;
                    Ok(render_errors_csv(&report))
                })
            };
            let a = run(1)?;
            let b = run(3)?;
            if a == b {
                Ok(())
            } else {
                Err("Monte Carlo output differs across worker counts".into())
            }
        }),
    ]
}
