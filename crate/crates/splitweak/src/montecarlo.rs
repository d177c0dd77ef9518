//! Monte Carlo estimation of `P_T f`, ψ-weighted weak errors over
//! initial-state grids, convergence-order fits, and the moment growth /
//! supermartingale checks.
//!
//! Determinism: every path draws from a stream keyed by
//! `(seed, purpose salt, grid index, path index)` through a SplitMix64
//! chain feeding a counter-based generator, and all reductions are
//! sequential over index-ordered buffers. Results do not depend on the
//! rayon worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flows::FlowConfig;
use crate::models::{Payoff, SplitModel};
use crate::splitting::{
    affine_polynomial_expectation, propagate_moments_affine, simulate_path, step_with_assignment,
    SchemeSpec,
};
use crate::weighted_space::WeightFunction;

/// Purpose salts keeping the random streams of different estimators apart.
pub mod salt {
    pub const ESTIMATE: u64 = 0x45535449;
    pub const REFERENCE: u64 = 0x52454645;
    pub const COUPLED_INCREMENTS: u64 = 0x434f5550;
    pub const COUPLED_REF_COIN: u64 = 0x52434f49;
    pub const COUPLED_LEVEL_COIN: u64 = 0x4c434f49;
    pub const SUPERMARTINGALE: u64 = 0x53555052;
    pub const POWER_BOUND: u64 = 0x504f5752;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for one `(seed, purpose, grid point, path)` cell.
pub fn path_rng(seed: u64, purpose: u64, grid_index: u64, path_index: u64) -> ChaCha8Rng {
    let mut key = splitmix64(seed);
    key = splitmix64(key ^ purpose);
    key = splitmix64(key ^ grid_index);
    key = splitmix64(key ^ path_index);
    ChaCha8Rng::seed_from_u64(key)
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Options for the plain Monte Carlo estimator.
#[derive(Debug, Clone, Copy, Default)]
pub struct McOptions {
    /// Pair each path with a branch-coin-flipped twin sharing its Gaussian
    /// increments (two-branch schemes only; a no-op otherwise).
    pub antithetic_branch: bool,
}

/// Sample mean and standard error of `f` over the terminal states of
/// `npaths` independent scheme paths.
#[allow(clippy::too_many_arguments)]
pub fn estimate_expectation(
    model: &SplitModel,
    cfg: &FlowConfig,
    scheme: &SchemeSpec,
    payoff: &Payoff,
    t: f64,
    nsteps: usize,
    x0: &[f64],
    npaths: usize,
    seed: u64,
    purpose: u64,
    grid_index: u64,
    options: McOptions,
) -> Result<(f64, f64)> {
    if npaths < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 paths for a standard error, got {npaths}"
        )));
    }
    scheme.validate_for(model)?;
    let antithetic = options.antithetic_branch && scheme.branches().len() == 2;
    let values: Vec<Result<f64>> = (0..npaths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, purpose, grid_index, p as u64);
            let value = if antithetic {
                let dt = t / nsteps as f64;
                let sqrt_dt = dt.sqrt();
                let mut a = x0.to_vec();
                let mut b = x0.to_vec();
                use rand::Rng;
                use rand_distr::StandardNormal;
                for k in 0..nsteps {
                    let coin = scheme.sample_branch(&mut rng);
                    let noise: Vec<f64> = (0..model.noise_dim())
                        .map(|_| sqrt_dt * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    a = step_with_assignment(model, cfg, scheme, coin, &noise, dt, &a)
                        .map_err(|e| e.with_context(&format!("step {k}")))?;
                    b = step_with_assignment(model, cfg, scheme, 1 - coin, &noise, dt, &b)
                        .map_err(|e| e.with_context(&format!("step {k}")))?;
                }
                0.5 * (payoff.eval(&a) + payoff.eval(&b))
            } else {
                let terminal = simulate_path(model, cfg, scheme, t, nsteps, x0, &mut rng)?;
                payoff.eval(&terminal)
            };
            Ok(value)
        })
        .collect();
    let mut flat = Vec::with_capacity(npaths);
    for (p, v) in values.into_iter().enumerate() {
        flat.push(v.map_err(|e| e.with_context(&format!("path {p}")))?);
    }
    Ok(mean_and_stderr(&flat))
}

/// How the left side `P_{nΔt} f` of the weak error is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferencePolicy {
    /// Closed-form expectation from the model's oracle.
    ExactOracle,
    /// Ninomiya-Victoir at `factor ×` the finest step count with
    /// `npaths_factor ×` the study paths.
    FineNv { factor: usize, npaths_factor: usize },
}

/// Reference value `(value, stderr)` for one grid point. The fine-NV
/// reference always runs at `factor × max(step_counts)` steps so a single
/// reference serves every level.
#[allow(clippy::too_many_arguments)]
pub fn reference_value(
    model: &SplitModel,
    cfg: &FlowConfig,
    payoff: &Payoff,
    t: f64,
    x0: &[f64],
    policy: ReferencePolicy,
    max_nsteps: usize,
    npaths: usize,
    seed: u64,
    grid_index: u64,
) -> Result<(f64, f64)> {
    match policy {
        ReferencePolicy::ExactOracle => {
            let v = model.exact_expectation(payoff, t, x0).map_err(|e| {
                Error::Config(format!(
                    "exact-oracle reference unavailable and fine-nv not configured ({e})"
                ))
            })?;
            Ok((v, 0.0))
        }
        ReferencePolicy::FineNv {
            factor,
            npaths_factor,
        } => {
            let scheme = SchemeSpec::ninomiya_victoir(model.noise_dim());
            estimate_expectation(
                model,
                cfg,
                &scheme,
                payoff,
                t,
                max_nsteps * factor,
                x0,
                npaths * npaths_factor,
                seed,
                salt::REFERENCE,
                grid_index,
                McOptions::default(),
            )
        }
    }
}

/// Per-grid-point entry of a weak-error evaluation.
#[derive(Debug, Clone)]
pub struct PointResult {
    pub x0: Vec<f64>,
    pub raw_error: f64,
    pub weighted_error: f64,
    pub stderr: f64,
}

/// ψ-weighted weak error at one step count.
#[derive(Debug, Clone)]
pub struct LevelResult {
    pub nsteps: usize,
    pub dt: f64,
    /// `max_i ψ(x0_i)⁻¹ |reference_i - estimate_i|`.
    pub weighted_error: f64,
    /// Max over the grid of the weighted statistical error.
    pub max_stderr: f64,
    pub argmax_index: usize,
    /// Statistically resolved: `max_stderr ≤ resolution_factor · Ê`.
    pub resolved: bool,
    /// All grid points at machine precision relative to the reference.
    pub exact: bool,
    pub points: Vec<PointResult>,
}

/// Weighted error floor treated as machine-exact.
pub const MACHINE_EXACT_FLOOR: f64 = 1e-12;

fn level_from_pairs(
    nsteps: usize,
    dt: f64,
    pairs: Vec<(Vec<f64>, f64, f64, f64)>, // (x0, raw_error, weighted_error, weighted_stderr)
    reference_scale: f64,
    resolution_factor: f64,
) -> LevelResult {
    let mut weighted_error = 0.0f64;
    let mut max_stderr = 0.0f64;
    let mut argmax_index = 0usize;
    let mut points = Vec::with_capacity(pairs.len());
    for (i, (x0, raw, weighted, se)) in pairs.into_iter().enumerate() {
        if weighted > weighted_error {
            weighted_error = weighted;
            argmax_index = i;
        }
        max_stderr = max_stderr.max(se);
        points.push(PointResult {
            x0,
            raw_error: raw,
            weighted_error: weighted,
            stderr: se,
        });
    }
    let exact = weighted_error <= MACHINE_EXACT_FLOOR * (1.0 + reference_scale);
    let resolved = !exact && max_stderr <= resolution_factor * weighted_error;
    LevelResult {
        nsteps,
        dt,
        weighted_error,
        max_stderr,
        argmax_index,
        resolved,
        exact,
        points,
    }
}

/// ψ-weighted weak error of one scheme at one level against precomputed
/// per-grid-point references, estimated with independent paths.
#[allow(clippy::too_many_arguments)]
pub fn weighted_weak_error(
    model: &SplitModel,
    cfg: &FlowConfig,
    scheme: &SchemeSpec,
    payoff: &Payoff,
    t: f64,
    nsteps: usize,
    grid: &[Vec<f64>],
    weight: &WeightFunction,
    refs: &[(f64, f64)],
    npaths: usize,
    seed: u64,
    resolution_factor: f64,
) -> Result<LevelResult> {
    if grid.is_empty() {
        return Err(Error::Argument("grid must be nonempty".into()));
    }
    if refs.len() != grid.len() {
        return Err(Error::Argument(
            "reference table does not match the grid".into(),
        ));
    }
    let mut pairs = Vec::with_capacity(grid.len());
    let mut ref_scale = 0.0f64;
    for (gi, (x0, (ref_value, ref_se))) in grid.iter().zip(refs).enumerate() {
        let (est, est_se) = estimate_expectation(
            model,
            cfg,
            scheme,
            payoff,
            t,
            nsteps,
            x0,
            npaths,
            seed,
            salt::ESTIMATE ^ nsteps as u64,
            gi as u64,
            McOptions::default(),
        )?;
        let psi = weight.eval(x0)?;
        let raw = (ref_value - est).abs();
        let se = (est_se * est_se + ref_se * ref_se).sqrt() / psi;
        ref_scale = ref_scale.max(ref_value.abs());
        pairs.push((x0.clone(), raw, raw / psi, se));
    }
    Ok(level_from_pairs(
        nsteps,
        t / nsteps as f64,
        pairs,
        ref_scale,
        resolution_factor,
    ))
}

/// Affine-exact weak error at one level: scheme by moment propagation,
/// reference values supplied (oracle or fine propagation); zero stderr.
#[allow(clippy::too_many_arguments)]
pub fn weighted_weak_error_affine(
    model: &SplitModel,
    cfg: &FlowConfig,
    scheme: &SchemeSpec,
    payoff: &Payoff,
    t: f64,
    nsteps: usize,
    grid: &[Vec<f64>],
    weight: &WeightFunction,
    refs: &[(f64, f64)],
    resolution_factor: f64,
) -> Result<LevelResult> {
    if grid.is_empty() {
        return Err(Error::Argument("grid must be nonempty".into()));
    }
    let mut pairs = Vec::with_capacity(grid.len());
    let mut ref_scale = 0.0f64;
    for (x0, (ref_value, _)) in grid.iter().zip(refs) {
        let est = affine_polynomial_expectation(model, cfg, scheme, payoff, t, nsteps, x0)?;
        let psi = weight.eval(x0)?;
        let raw = (ref_value - est).abs();
        ref_scale = ref_scale.max(ref_value.abs());
        pairs.push((x0.clone(), raw, raw / psi, 0.0));
    }
    Ok(level_from_pairs(
        nsteps,
        t / nsteps as f64,
        pairs,
        ref_scale,
        resolution_factor,
    ))
}

/// Least-squares fit of `log Ê` against `log Δt`.
#[derive(Debug, Clone, Copy)]
pub struct SlopeFit {
    pub slope: f64,
    /// Root-mean-square residual of the log-log fit.
    pub residual: f64,
    pub levels_used: usize,
}

pub fn fit_slope(points: &[(f64, f64)]) -> Option<SlopeFit> {
    if points.len() < 3 {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|(dt, e)| (dt.ln(), e.ln())).collect();
    let n = logs.len() as f64;
    let sx: f64 = logs.iter().map(|p| p.0).sum();
    let sy: f64 = logs.iter().map(|p| p.1).sum();
    let sxx: f64 = logs.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = logs.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-30 {
        return None;
    }
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    let ss: f64 = logs
        .iter()
        .map(|(x, y)| {
            let r = y - (slope * x + intercept);
            r * r
        })
        .sum();
    Some(SlopeFit {
        slope,
        residual: (ss / n).sqrt(),
        levels_used: points.len(),
    })
}

/// How scheme expectations are evaluated in a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Affine moment propagation when the model and payoff allow it,
    /// Monte Carlo otherwise.
    Auto,
    Affine,
    MonteCarlo,
}

/// Fully resolved description of a convergence study.
pub struct StudyPlan {
    pub model: SplitModel,
    pub schemes: Vec<SchemeSpec>,
    pub payoff: Payoff,
    pub weight: WeightFunction,
    pub t: f64,
    pub step_counts: Vec<usize>,
    pub npaths: usize,
    pub grid: Vec<Vec<f64>>,
    pub seed: u64,
    pub flow: FlowConfig,
    pub reference: ReferencePolicy,
    pub evaluation: EvalMode,
    /// Levels with `stderr > resolution_factor · Ê` are excluded from fits.
    pub resolution_factor: f64,
}

/// Per-scheme convergence results.
#[derive(Debug, Clone)]
pub struct SchemeReport {
    pub scheme: String,
    pub levels: Vec<LevelResult>,
    pub slope: Option<SlopeFit>,
    /// Every level at machine precision (commuting-flow exactness).
    pub exact: bool,
    /// "affine" or "monte-carlo".
    pub evaluation: &'static str,
    pub wall_clock_secs: f64,
}

/// Full study output: per-scheme level tables and fitted orders.
#[derive(Debug, Clone)]
pub struct ErrorReport {
    pub schemes: Vec<SchemeReport>,
}

impl ErrorReport {
    /// Inconclusive-fit error if any non-exact scheme has fewer than three
    /// resolved levels; the report itself is still valid output.
    pub fn inconclusive_error(&self) -> Option<Error> {
        for s in &self.schemes {
            if !s.exact && s.slope.is_none() {
                return Some(Error::Inconclusive(format!(
                    "scheme {}: fewer than 3 statistically resolved levels",
                    s.scheme
                )));
            }
        }
        None
    }
}

fn affine_eval_supported(plan: &StudyPlan) -> bool {
    if !plan.model.is_affine() {
        return false;
    }
    let Some(x0) = plan.grid.first() else {
        return false;
    };
    let scheme = &plan.schemes[0];
    affine_polynomial_expectation(
        &plan.model,
        &plan.flow,
        scheme,
        &plan.payoff,
        plan.t,
        plan.step_counts[0],
        x0,
    )
    .is_ok()
}

/// Run the full convergence study: weighted weak errors per level and
/// scheme, plus order fits over the statistically resolved levels.
pub fn convergence_study(plan: &StudyPlan) -> Result<ErrorReport> {
    if plan.step_counts.len() < 3 {
        return Err(Error::Config(
            "convergence study needs at least 3 step-count levels".into(),
        ));
    }
    if plan.grid.is_empty() {
        return Err(Error::Config("grid must be nonempty".into()));
    }
    for scheme in &plan.schemes {
        scheme.validate_for(&plan.model)?;
    }
    let affine = match plan.evaluation {
        EvalMode::Affine => {
            if !affine_eval_supported(plan) {
                return Err(Error::Capability(
                    "affine evaluation requested but unsupported for this model/payoff".into(),
                ));
            }
            true
        }
        EvalMode::MonteCarlo => false,
        EvalMode::Auto => affine_eval_supported(plan),
    };
    let max_nsteps = *plan.step_counts.iter().max().expect("nonempty");

    let mut schemes = Vec::with_capacity(plan.schemes.len());
    for scheme in &plan.schemes {
        let started = std::time::Instant::now();
        let levels = if affine {
            let refs = affine_reference_table(plan, max_nsteps)?;
            plan.step_counts
                .iter()
                .map(|&nsteps| {
                    weighted_weak_error_affine(
                        &plan.model,
                        &plan.flow,
                        scheme,
                        &plan.payoff,
                        plan.t,
                        nsteps,
                        &plan.grid,
                        &plan.weight,
                        &refs,
                        plan.resolution_factor,
                    )
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            monte_carlo_levels(plan, scheme, max_nsteps)?
        };
        let fit_points: Vec<(f64, f64)> = levels
            .iter()
            .filter(|l| l.resolved)
            .map(|l| (l.dt, l.weighted_error))
            .collect();
        let exact = levels.iter().all(|l| l.exact);
        schemes.push(SchemeReport {
            scheme: scheme.name().to_string(),
            levels,
            slope: fit_slope(&fit_points),
            exact,
            evaluation: if affine { "affine" } else { "monte-carlo" },
            wall_clock_secs: started.elapsed().as_secs_f64(),
        });
    }
    Ok(ErrorReport { schemes })
}

/// Reference table for the affine fast path: the oracle when available,
/// otherwise fine-NV moments propagated deterministically — both sides of
/// the comparison are then free of Monte Carlo noise.
fn affine_reference_table(plan: &StudyPlan, max_nsteps: usize) -> Result<Vec<(f64, f64)>> {
    match plan.reference {
        ReferencePolicy::ExactOracle => plan
            .grid
            .iter()
            .map(|x0| {
                plan.model
                    .exact_expectation(&plan.payoff, plan.t, x0)
                    .map(|v| (v, 0.0))
                    .map_err(|e| {
                        Error::Config(format!(
                            "exact-oracle reference unavailable and fine-nv not configured ({e})"
                        ))
                    })
            })
            .collect(),
        ReferencePolicy::FineNv { factor, .. } => {
            let nv = SchemeSpec::ninomiya_victoir(plan.model.noise_dim());
            plan.grid
                .iter()
                .map(|x0| {
                    affine_polynomial_expectation(
                        &plan.model,
                        &plan.flow,
                        &nv,
                        &plan.payoff,
                        plan.t,
                        max_nsteps * factor,
                        x0,
                    )
                    .map(|v| (v, 0.0))
                })
                .collect()
        }
    }
}

fn monte_carlo_levels(
    plan: &StudyPlan,
    scheme: &SchemeSpec,
    max_nsteps: usize,
) -> Result<Vec<LevelResult>> {
    match plan.reference {
        ReferencePolicy::ExactOracle => {
            let refs: Vec<(f64, f64)> = plan
                .grid
                .iter()
                .map(|x0| {
                    plan.model
                        .exact_expectation(&plan.payoff, plan.t, x0)
                        .map(|v| (v, 0.0))
                        .map_err(|e| {
                            Error::Config(format!(
                                "exact-oracle reference unavailable and fine-nv not configured ({e})"
                            ))
                        })
                })
                .collect::<Result<_>>()?;
            plan.step_counts
                .iter()
                .map(|&nsteps| {
                    weighted_weak_error(
                        &plan.model,
                        &plan.flow,
                        scheme,
                        &plan.payoff,
                        plan.t,
                        nsteps,
                        &plan.grid,
                        &plan.weight,
                        &refs,
                        plan.npaths,
                        plan.seed,
                        plan.resolution_factor,
                    )
                })
                .collect()
        }
        ReferencePolicy::FineNv { factor, .. } => {
            coupled_levels(plan, scheme, max_nsteps * factor)
        }
    }
}

/// Fine-NV-referenced Monte Carlo with common random numbers: each path
/// draws Brownian increments at the reference resolution, aggregates them
/// per level, and the per-path payoff difference against the reference is
/// averaged. The point estimate equals the difference of the plain sample
/// means over the same paths, while the statistical error of the difference
/// is far smaller than either side's.
fn coupled_levels(
    plan: &StudyPlan,
    scheme: &SchemeSpec,
    ref_nsteps: usize,
) -> Result<Vec<LevelResult>> {
    for &nsteps in &plan.step_counts {
        if ref_nsteps % nsteps != 0 {
            return Err(Error::Config(format!(
                "fine-nv reference steps {ref_nsteps} must be divisible by every level, got {nsteps}"
            )));
        }
    }
    let nv = SchemeSpec::ninomiya_victoir(plan.model.noise_dim());
    let d = plan.model.noise_dim();
    let dt_ref = plan.t / ref_nsteps as f64;
    let levels = &plan.step_counts;
    let scheme_tag = splitmix64(
        scheme
            .name()
            .bytes()
            .fold(0u64, |acc, b| acc.wrapping_mul(31).wrapping_add(b as u64)),
    );

    // diffs[level][grid] = per-path payoff differences f(X_level) - f(X_ref)
    let mut pairs_per_level: Vec<Vec<(Vec<f64>, f64, f64, f64)>> =
        vec![Vec::with_capacity(plan.grid.len()); levels.len()];
    let mut ref_scale = 0.0f64;

    for (gi, x0) in plan.grid.iter().enumerate() {
        let per_path: Vec<Result<Vec<f64>>> = (0..plan.npaths)
            .into_par_iter()
            .map(|p| {
                use rand::Rng;
                use rand_distr::StandardNormal;
                let mut inc_rng =
                    path_rng(plan.seed, salt::COUPLED_INCREMENTS, gi as u64, p as u64);
                let sqrt_dt = dt_ref.sqrt();
                let fine: Vec<f64> = (0..ref_nsteps * d)
                    .map(|_| sqrt_dt * inc_rng.sample::<f64, _>(StandardNormal))
                    .collect();

                // Reference path at the fine resolution.
                let mut coin_rng =
                    path_rng(plan.seed, salt::COUPLED_REF_COIN, gi as u64, p as u64);
                let mut state = x0.clone();
                for k in 0..ref_nsteps {
                    let branch = nv.sample_branch(&mut coin_rng);
                    let noise = &fine[k * d..(k + 1) * d];
                    state = step_with_assignment(
                        &plan.model,
                        &plan.flow,
                        &nv,
                        branch,
                        noise,
                        dt_ref,
                        &state,
                    )
                    .map_err(|e| e.with_context(&format!("reference step {k}")))?;
                }
                let f_ref = plan.payoff.eval(&state);

                let mut out = Vec::with_capacity(levels.len() + 1);
                out.push(f_ref);
                for (li, &nsteps) in levels.iter().enumerate() {
                    let chunk = ref_nsteps / nsteps;
                    let dt = plan.t / nsteps as f64;
                    let mut coin_rng = path_rng(
                        plan.seed,
                        salt::COUPLED_LEVEL_COIN ^ scheme_tag ^ (li as u64) << 32,
                        gi as u64,
                        p as u64,
                    );
                    let mut state = x0.clone();
                    let mut noise = vec![0.0; d];
                    for k in 0..nsteps {
                        for (jj, slot) in noise.iter_mut().enumerate() {
                            *slot = (0..chunk)
                                .map(|c| fine[(k * chunk + c) * d + jj])
                                .sum::<f64>();
                        }
                        let branch = scheme.sample_branch(&mut coin_rng);
                        state = step_with_assignment(
                            &plan.model,
                            &plan.flow,
                            scheme,
                            branch,
                            &noise,
                            dt,
                            &state,
                        )
                        .map_err(|e| e.with_context(&format!("level {nsteps} step {k}")))?;
                    }
                    out.push(plan.payoff.eval(&state) - f_ref);
                }
                Ok(out)
            })
            .collect();

        let mut refs = Vec::with_capacity(plan.npaths);
        let mut diffs: Vec<Vec<f64>> = vec![Vec::with_capacity(plan.npaths); levels.len()];
        for (p, row) in per_path.into_iter().enumerate() {
            let row = row.map_err(|e| e.with_context(&format!("path {p}")))?;
            refs.push(row[0]);
            for (li, v) in row[1..].iter().enumerate() {
                diffs[li].push(*v);
            }
        }
        let (ref_mean, _) = mean_and_stderr(&refs);
        ref_scale = ref_scale.max(ref_mean.abs());
        let psi = plan.weight.eval(x0)?;
        for (li, dvals) in diffs.iter().enumerate() {
            let (dmean, dse) = mean_and_stderr(dvals);
            pairs_per_level[li].push((x0.clone(), dmean.abs(), dmean.abs() / psi, dse / psi));
        }
    }

    Ok(pairs_per_level
        .into_iter()
        .zip(levels)
        .map(|(pairs, &nsteps)| {
            level_from_pairs(
                nsteps,
                plan.t / nsteps as f64,
                pairs,
                ref_scale,
                plan.resolution_factor,
            )
        })
        .collect())
}

/// One `(t, x0)` cell of the moment-growth check.
#[derive(Debug, Clone)]
pub struct SupermartingalePoint {
    pub t: f64,
    pub grid_index: usize,
    /// `r = E[ψ(x(t, x0))] / ψ(x0)`.
    pub ratio: f64,
    pub rel_stderr: f64,
}

/// Result of the supermartingale / pseudocontractivity check.
#[derive(Debug, Clone)]
pub struct SupermartingaleReport {
    /// `ω̂ = max over (t, x0) of log(r)/t`.
    pub omega_hat: f64,
    pub points: Vec<SupermartingalePoint>,
    /// Indices into `points` where `r > e^{ω̂ t} (1 + 3·rel stderr)`.
    pub violations: Vec<usize>,
}

/// Estimate `r(t, x0) = E[ψ(x(t,x0))]/ψ(x0)` under a fine NV scheme, fit
/// the growth exponent, and scan for bound violations (expected: none).
#[allow(clippy::too_many_arguments)]
pub fn supermartingale_check(
    model: &SplitModel,
    cfg: &FlowConfig,
    weight: &WeightFunction,
    t_horizon: f64,
    grid: &[Vec<f64>],
    npaths: usize,
    timepoints: &[f64],
    base_nsteps: usize,
    seed: u64,
) -> Result<SupermartingaleReport> {
    if grid.is_empty() {
        return Err(Error::Argument("grid must be nonempty".into()));
    }
    for &t in timepoints {
        if t <= 0.0 || t > t_horizon {
            return Err(Error::Argument(format!(
                "timepoints must lie in (0, {t_horizon}], got {t}"
            )));
        }
    }
    let scheme = SchemeSpec::ninomiya_victoir(model.noise_dim());
    let mut points = Vec::with_capacity(timepoints.len() * grid.len());
    for (ti, &t) in timepoints.iter().enumerate() {
        let nsteps = ((t / t_horizon) * base_nsteps as f64).ceil().max(4.0) as usize;
        for (gi, x0) in grid.iter().enumerate() {
            let psi0 = weight.eval(x0)?;
            let values: Vec<Result<f64>> = (0..npaths)
                .into_par_iter()
                .map(|p| {
                    let mut rng = path_rng(
                        seed,
                        salt::SUPERMARTINGALE ^ (ti as u64) << 32,
                        gi as u64,
                        p as u64,
                    );
                    let terminal = simulate_path(model, cfg, &scheme, t, nsteps, x0, &mut rng)?;
                    weight.eval(&terminal)
                })
                .collect();
            let mut flat = Vec::with_capacity(npaths);
            for (p, v) in values.into_iter().enumerate() {
                flat.push(v.map_err(|e| e.with_context(&format!("path {p}")))?);
            }
            let (mean, se) = mean_and_stderr(&flat);
            let ratio = mean / psi0;
            points.push(SupermartingalePoint {
                t,
                grid_index: gi,
                ratio,
                rel_stderr: if ratio != 0.0 { (se / psi0) / ratio } else { 0.0 },
            });
        }
    }
    let omega_hat = points
        .iter()
        .map(|p| p.ratio.ln() / p.t)
        .fold(f64::NEG_INFINITY, f64::max);
    let violations: Vec<usize> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.ratio > (omega_hat * p.t).exp() * (1.0 + 3.0 * p.rel_stderr))
        .map(|(i, _)| i)
        .collect();
    Ok(SupermartingaleReport {
        omega_hat,
        points,
        violations,
    })
}

/// Power-boundedness probe: fit the one-step growth rate of `ψ ↦ E[ψ]` on
/// the grid and check that the `n`-step growth stays under `e^{ω̂ T}`.
#[derive(Debug, Clone)]
pub struct PowerBoundReport {
    pub omega_hat: f64,
    pub horizon_ratio: f64,
    pub bound: f64,
    pub ok: bool,
}

/// The probe requires ψ = (1 + ‖x‖²) (polynomial, s = 2, level 0) so that
/// `E[ψ]` is exactly `1 + Σ (mean² + var)` under affine propagation;
/// non-affine models fall back to Monte Carlo with the given paths.
#[allow(clippy::too_many_arguments)]
pub fn power_bound_probe(
    model: &SplitModel,
    cfg: &FlowConfig,
    scheme: &SchemeSpec,
    weight: &WeightFunction,
    t_horizon: f64,
    nsteps: usize,
    grid: &[Vec<f64>],
    npaths: usize,
    seed: u64,
    tolerance: f64,
) -> Result<PowerBoundReport> {
    if grid.is_empty() {
        return Err(Error::Argument("grid must be nonempty".into()));
    }
    let dt = t_horizon / nsteps as f64;
    let expected_psi = |t: f64, steps: usize, x0: &[f64]| -> Result<f64> {
        if model.is_affine() {
            let st = propagate_moments_affine(model, cfg, scheme, t, steps, x0)?;
            let mut acc = 1.0;
            for i in 0..model.dim() {
                acc += st.covariance[(i, i)] + st.mean[i] * st.mean[i];
            }
            Ok(acc)
        } else {
            let psi_payoff = Payoff::Custom {
                id: "psi-sq".into(),
                f: std::sync::Arc::new(|x: &[f64]| {
                    1.0 + x.iter().map(|v| v * v).sum::<f64>()
                }),
            };
            let (mean, _) = estimate_expectation(
                model,
                cfg,
                scheme,
                &psi_payoff,
                t,
                steps,
                x0,
                npaths,
                seed,
                salt::POWER_BOUND,
                0,
                McOptions::default(),
            )?;
            Ok(mean)
        }
    };
    let mut one_step = f64::NEG_INFINITY;
    let mut horizon = f64::NEG_INFINITY;
    for x0 in grid {
        let psi0 = weight.eval(x0)?;
        one_step = one_step.max(expected_psi(dt, 1, x0)? / psi0);
        horizon = horizon.max(expected_psi(t_horizon, nsteps, x0)? / psi0);
    }
    let omega_hat = one_step.ln() / dt;
    let bound = (omega_hat * t_horizon).exp() * (1.0 + tolerance);
    Ok(PowerBoundReport {
        omega_hat,
        horizon_ratio: horizon,
        bound,
        ok: horizon <= bound,
    })
}

/// Growth-control probe: the ψ-weighted error must not grow by more than
/// `limit` when the grid is extended to much larger weights.
#[derive(Debug, Clone)]
pub struct GrowthControlReport {
    /// Per level: (Ê on the small grid, Ê on the extended grid).
    pub per_level: Vec<(usize, f64, f64)>,
    pub limit: f64,
    pub ok: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn growth_control_probe(
    plan: &StudyPlan,
    scheme: &SchemeSpec,
    small_grid: &[Vec<f64>],
    big_grid: &[Vec<f64>],
    limit: f64,
) -> Result<GrowthControlReport> {
    let max_nsteps = *plan.step_counts.iter().max().expect("nonempty");
    let eval_grid = |grid: &[Vec<f64>]| -> Result<Vec<f64>> {
        let refs: Vec<(f64, f64)> = grid
            .iter()
            .map(|x0| {
                plan.model
                    .exact_expectation(&plan.payoff, plan.t, x0)
                    .map(|v| (v, 0.0))
            })
            .collect::<Result<_>>()
            .or_else(|_| -> Result<Vec<(f64, f64)>> {
                let nv = SchemeSpec::ninomiya_victoir(plan.model.noise_dim());
                grid.iter()
                    .map(|x0| {
                        affine_polynomial_expectation(
                            &plan.model,
                            &plan.flow,
                            &nv,
                            &plan.payoff,
                            plan.t,
                            max_nsteps * 8,
                            x0,
                        )
                        .map(|v| (v, 0.0))
                    })
                    .collect()
            })?;
        plan.step_counts
            .iter()
            .map(|&nsteps| {
                weighted_weak_error_affine(
                    &plan.model,
                    &plan.flow,
                    scheme,
                    &plan.payoff,
                    plan.t,
                    nsteps,
                    grid,
                    &plan.weight,
                    &refs,
                    plan.resolution_factor,
                )
                .map(|l| l.weighted_error)
            })
            .collect()
    };
    let small = eval_grid(small_grid)?;
    let big = eval_grid(big_grid)?;
    let mut ok = true;
    let mut per_level = Vec::with_capacity(small.len());
    for ((&nsteps, s), b) in plan.step_counts.iter().zip(&small).zip(&big) {
        // Errors at the machine floor on both grids count as controlled.
        let controlled = *b <= MACHINE_EXACT_FLOOR || *b <= limit * s.max(MACHINE_EXACT_FLOOR);
        ok &= controlled;
        per_level.push((nsteps, *s, *b));
    }
    Ok(GrowthControlReport {
        per_level,
        limit,
        ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{gbm, ou};
    use crate::weighted_space::WeightFamily;

    fn poly_weight() -> WeightFunction {
        WeightFunction::new(WeightFamily::Polynomial { s: 2.0 }).unwrap()
    }

    #[test]
    fn estimator_deterministic_model_zero_stderr() {
        let m = ou(1.0, 0.0, 0.0).unwrap();
        let cfg = FlowConfig::default();
        let scheme = SchemeSpec::euler(1);
        let payoff = Payoff::Moment1 { coordinate: 0 };
        let (mean, se) = estimate_expectation(
            &m, &cfg, &scheme, &payoff, 1.0, 8, &[2.0], 200, 7, salt::ESTIMATE, 0,
            McOptions::default(),
        )
        .unwrap();
        assert!(se.abs() < 1e-14);
        assert!((mean - 2.0 * (-1.0f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn estimator_ou_mean_within_three_stderr() {
        let m = ou(1.0, 0.0, 0.5).unwrap();
        let cfg = FlowConfig::default();
        let scheme = SchemeSpec::euler(1);
        let payoff = Payoff::Moment1 { coordinate: 0 };
        let (mean, se) = estimate_expectation(
            &m, &cfg, &scheme, &payoff, 1.0, 16, &[1.0], 20_000, 11, salt::ESTIMATE, 0,
            McOptions::default(),
        )
        .unwrap();
        // The scheme's first moment is exact for OU (drift flow exact,
        // kick mean zero), so the estimate targets e^{-T}.
        assert!((mean - (-1.0f64).exp()).abs() <= 3.0 * se);
    }

    #[test]
    fn estimator_stderr_clt_scaling() {
        let m = ou(1.0, 0.0, 0.5).unwrap();
        let cfg = FlowConfig::default();
        let scheme = SchemeSpec::euler(1);
        let payoff = Payoff::Moment1 { coordinate: 0 };
        let run = |n: usize| {
            estimate_expectation(
                &m, &cfg, &scheme, &payoff, 1.0, 8, &[1.0], n, 13, salt::ESTIMATE, 0,
                McOptions::default(),
            )
            .unwrap()
            .1
        };
        let ratio = run(10_000) / run(100_000);
        assert!(ratio > 2.8 && ratio < 3.5, "ratio {ratio}");
    }

    #[test]
    fn reference_policies_agree() {
        let m = ou(1.0, 0.0, 0.0).unwrap();
        let cfg = FlowConfig::default();
        let payoff = Payoff::Moment2 { coordinate: 0 };
        let (exact, se0) = reference_value(
            &m, &cfg, &payoff, 1.0, &[1.5], ReferencePolicy::ExactOracle, 8, 100, 3, 0,
        )
        .unwrap();
        assert_eq!(se0, 0.0);
        let (fine, _) = reference_value(
            &m,
            &cfg,
            &payoff,
            1.0,
            &[1.5],
            ReferencePolicy::FineNv {
                factor: 4,
                npaths_factor: 1,
            },
            8,
            200,
            3,
            0,
        )
        .unwrap();
        assert!((exact - fine).abs() < 1e-10);
    }

    #[test]
    fn reference_fine_nv_gbm_mean() {
        let m = gbm(0.1, 0.2).unwrap();
        let cfg = FlowConfig::default();
        let payoff = Payoff::Moment1 { coordinate: 0 };
        let (v, se) = reference_value(
            &m,
            &cfg,
            &payoff,
            1.0,
            &[1.0],
            ReferencePolicy::FineNv {
                factor: 8,
                npaths_factor: 10,
            },
            4,
            2_000,
            5,
            0,
        )
        .unwrap();
        assert!((v - (0.1f64).exp()).abs() <= 3.0 * se);
    }

    #[test]
    fn reference_missing_oracle_is_config_error() {
        let m = crate::models::linear_growth_1d(0.1, 0.2, 0.3).unwrap();
        let cfg = FlowConfig::default();
        let payoff = Payoff::Moment1 { coordinate: 0 };
        let err = reference_value(
            &m, &cfg, &payoff, 1.0, &[1.0], ReferencePolicy::ExactOracle, 8, 100, 3, 0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn affine_error_quarters_per_halved_step_nv() {
        let m = ou(1.0, 0.0, 0.5).unwrap();
        let cfg = FlowConfig::default();
        let scheme = SchemeSpec::ninomiya_victoir(1);
        let payoff = Payoff::Moment2 { coordinate: 0 };
        let weight = poly_weight();
        let grid: Vec<Vec<f64>> = (-4..=4).map(|i| vec![i as f64]).collect();
        let refs: Vec<(f64, f64)> = grid
            .iter()
            .map(|x0| (m.exact_expectation(&payoff, 1.0, x0).unwrap(), 0.0))
            .collect();
        let run = |nsteps: usize| {
            weighted_weak_error_affine(
                &m, &cfg, &scheme, &payoff, 1.0, nsteps, &grid, &weight, &refs, 0.3,
            )
            .unwrap()
            .weighted_error
        };
        let ratio = run(16) / run(32);
        assert!(ratio > 3.4 && ratio < 4.6, "ratio {ratio}");
    }

    #[test]
    fn weighted_error_zero_when_estimate_is_reference() {
        // Deterministic model: affine propagation reproduces the oracle, so
        // the weighted error collapses to machine precision.
        let m = ou(1.0, 0.0, 0.0).unwrap();
        let cfg = FlowConfig::default();
        let scheme = SchemeSpec::ninomiya_victoir(1);
        let payoff = Payoff::Moment2 { coordinate: 0 };
        let weight = poly_weight();
        let grid = vec![vec![0.5], vec![-2.0]];
        let refs: Vec<(f64, f64)> = grid
            .iter()
            .map(|x0| (m.exact_expectation(&payoff, 1.0, x0).unwrap(), 0.0))
            .collect();
        let level = weighted_weak_error_affine(
            &m, &cfg, &scheme, &payoff, 1.0, 16, &grid, &weight, &refs, 0.3,
        )
        .unwrap();
        assert!(level.weighted_error <= 1e-12);
        assert!(level.exact);
    }

    #[test]
    fn argmax_point_recorded() {
        let m = ou(1.0, 0.0, 0.5).unwrap();
        let cfg = FlowConfig::default();
        let scheme = SchemeSpec::euler(1);
        let payoff = Payoff::Moment2 { coordinate: 0 };
        let weight = poly_weight();
        let grid: Vec<Vec<f64>> = (-5..=5).map(|i| vec![2.0 * i as f64]).collect();
        let refs: Vec<(f64, f64)> = grid
            .iter()
            .map(|x0| (m.exact_expectation(&payoff, 1.0, x0).unwrap(), 0.0))
            .collect();
        let level = weighted_weak_error_affine(
            &m, &cfg, &scheme, &payoff, 1.0, 8, &grid, &weight, &refs, 0.3,
        )
        .unwrap();
        // Variance error is x0-independent, so the max of ψ⁻¹·err sits at
        // the smallest weight: x0 = 0, the middle of this grid.
        assert_eq!(level.argmax_index, 5);
        for p in &level.points {
            assert!(p.weighted_error <= level.weighted_error + 1e-15);
        }
    }

    #[test]
    fn supermartingale_contractive_drift() {
        let m = ou(1.0, 0.0, 0.0).unwrap();
        let cfg = FlowConfig::default();
        let weight = poly_weight();
        let grid: Vec<Vec<f64>> = vec![vec![-2.0], vec![0.5], vec![3.0]];
        let report = supermartingale_check(
            &m, &cfg, &weight, 1.0, &grid, 200, &[0.1, 0.5, 1.0], 16, 3,
        )
        .unwrap();
        for p in &report.points {
            assert!(p.ratio <= 1.0 + 1e-9);
        }
        assert!(report.omega_hat <= 1e-9);
        assert!(report.violations.is_empty());
    }

    #[test]
    fn supermartingale_noise_raises_ratio_at_origin() {
        let m = ou(1.0, 0.0, 0.5).unwrap();
        let cfg = FlowConfig::default();
        let weight = poly_weight();
        let grid = vec![vec![0.0]];
        let report =
            supermartingale_check(&m, &cfg, &weight, 1.0, &grid, 4_000, &[0.5, 1.0], 32, 5)
                .unwrap();
        for p in &report.points {
            // r(t, 0) = 1 + Var(t) > 1
            assert!(p.ratio > 1.0);
        }
        assert!(report.omega_hat > 0.0);
        assert!(report.violations.is_empty());
    }

    #[test]
    fn supermartingale_short_time_ratio_near_one() {
        let m = ou(1.0, 0.0, 0.5).unwrap();
        let cfg = FlowConfig::default();
        let weight = poly_weight();
        let grid = vec![vec![1.0]];
        let report =
            supermartingale_check(&m, &cfg, &weight, 1.0, &grid, 4_000, &[1e-4], 16, 5).unwrap();
        let p = &report.points[0];
        assert!((p.ratio - 1.0).abs() <= 3.0 * p.rel_stderr + 1e-3);
    }

    #[test]
    fn slope_fit_recovers_known_order() {
        let points: Vec<(f64, f64)> = [8, 16, 32, 64]
            .iter()
            .map(|&n| {
                let dt = 1.0 / n as f64;
                (dt, 0.7 * dt * dt)
            })
            .collect();
        let fit = fit_slope(&points).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-9);
        assert!(fit.residual < 1e-12);
        assert!(fit_slope(&points[..2]).is_none());
    }
}
