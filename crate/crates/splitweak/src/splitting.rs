//! One-step splitting schemes and path simulation.
//!
//! A scheme is a convex combination of substep compositions,
//!
//! ```text
//! Q_(Δt) = Σ_b λ_b  P^{(i_1)}_{δ_1 Δt} ⋯ P^{(i_l)}_{δ_l Δt},
//! ```
//!
//! realised pathwise by sampling one branch with probability `λ_b` per step
//! and applying the substep flows left to right (the operator composition
//! `P^a P^b` corresponds to applying flow `a` to the state first). Gaussian
//! increments `W_j ~ N(0, Δt)` are drawn once per step and shared by every
//! substep of the branch that references diffusion `j`; a substep with
//! fraction `δ` runs the flow at time `√δ · W_j`.
//!
//! For models whose substep maps are affine with deterministic linear part
//! (additive noise), the one-step map is extracted as `x ↦ L x + b₀ + Σ_j
//! load_j W_j` and the scheme's mean and covariance propagate exactly, which
//! gives weak errors free of Monte Carlo noise.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::flows::{diffusion_flow, drift_flow, FlowConfig};
use crate::models::{gaussian_raw_moments, Payoff, SplitModel};

/// Identifier of a substep operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorId {
    /// Deterministic flow of `A z + α₀(z)`.
    Drift,
    /// Flow of `σ_j` at a random time (0-based index).
    Diffusion(usize),
}

/// One substep: an operator run for the step fraction `δ ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Substep {
    pub op: OperatorId,
    pub fraction: f64,
}

/// One branch of the convex combination.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub weight: f64,
    pub substeps: Vec<Substep>,
}

/// A splitting composition: ordered substeps with convex branch weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeSpec {
    name: String,
    branches: Vec<Branch>,
}

impl SchemeSpec {
    /// Validated custom scheme. Branch weights must be nonnegative and sum
    /// to one; fractions must be nonnegative.
    pub fn custom(name: impl Into<String>, branches: Vec<Branch>) -> Result<Self> {
        let name = name.into();
        if branches.is_empty() {
            return Err(Error::Config(format!(
                "scheme {name} must have at least one branch"
            )));
        }
        let mut total = 0.0;
        for (b, branch) in branches.iter().enumerate() {
            if branch.weight < 0.0 {
                return Err(Error::Config(format!(
                    "scheme {name}: branch {b} has negative weight {}",
                    branch.weight
                )));
            }
            total += branch.weight;
            for (s, sub) in branch.substeps.iter().enumerate() {
                if sub.fraction < 0.0 {
                    return Err(Error::Config(format!(
                        "scheme {name}: branch {b} substep {s} has negative fraction {}",
                        sub.fraction
                    )));
                }
            }
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "scheme {name}: branch weights sum to {total}, expected 1"
            )));
        }
        Ok(SchemeSpec { name, branches })
    }

    /// `P⁰_Δt P¹_Δt ⋯ P^d_Δt` — the geometric-integrator Euler scheme.
    pub fn euler(noise_dim: usize) -> Self {
        let mut substeps = vec![Substep {
            op: OperatorId::Drift,
            fraction: 1.0,
        }];
        for j in 0..noise_dim {
            substeps.push(Substep {
                op: OperatorId::Diffusion(j),
                fraction: 1.0,
            });
        }
        SchemeSpec {
            name: "euler".into(),
            branches: vec![Branch {
                weight: 1.0,
                substeps,
            }],
        }
    }

    /// `½ P⁰_{Δt/2} (P¹⋯P^d + P^d⋯P¹) P⁰_{Δt/2}` — the Ninomiya-Victoir
    /// scheme: drift half-steps around the averaged forward/reverse
    /// diffusion orderings.
    pub fn ninomiya_victoir(noise_dim: usize) -> Self {
        let half = Substep {
            op: OperatorId::Drift,
            fraction: 0.5,
        };
        let mut forward = vec![half];
        for j in 0..noise_dim {
            forward.push(Substep {
                op: OperatorId::Diffusion(j),
                fraction: 1.0,
            });
        }
        forward.push(half);
        let mut reverse = vec![half];
        for j in (0..noise_dim).rev() {
            reverse.push(Substep {
                op: OperatorId::Diffusion(j),
                fraction: 1.0,
            });
        }
        reverse.push(half);
        SchemeSpec {
            name: "nv".into(),
            branches: vec![
                Branch {
                    weight: 0.5,
                    substeps: forward,
                },
                Branch {
                    weight: 0.5,
                    substeps: reverse,
                },
            ],
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    /// Check that every referenced diffusion index exists in the model.
    pub fn validate_for(&self, model: &SplitModel) -> Result<()> {
        for branch in &self.branches {
            for sub in &branch.substeps {
                if let OperatorId::Diffusion(j) = sub.op {
                    if j >= model.noise_dim() {
                        return Err(Error::Config(format!(
                            "scheme {} references diffusion {} but model {} has noise dimension {}",
                            self.name,
                            j + 1,
                            model.name(),
                            model.noise_dim()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Sample a branch index with probability proportional to the weights.
    pub fn sample_branch<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.branches.len() == 1 {
            return 0;
        }
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, b) in self.branches.iter().enumerate() {
            acc += b.weight;
            if u < acc {
                return i;
            }
        }
        self.branches.len() - 1
    }
}

/// Deterministic one-step map for a fixed branch and noise assignment.
///
/// `noise[j]` is the Brownian increment for diffusion `j` over the step; a
/// substep with fraction `δ` evaluates the flow at `√δ · noise[j]`.
pub fn step_with_assignment(
    model: &SplitModel,
    cfg: &FlowConfig,
    scheme: &SchemeSpec,
    branch: usize,
    noise: &[f64],
    dt: f64,
    x: &[f64],
) -> Result<Vec<f64>> {
    if dt <= 0.0 {
        return Err(Error::Argument(format!("step size must be positive, got {dt}")));
    }
    if noise.len() != model.noise_dim() {
        return Err(Error::Argument(format!(
            "noise assignment has {} entries, model has noise dimension {}",
            noise.len(),
            model.noise_dim()
        )));
    }
    let branch = scheme
        .branches
        .get(branch)
        .ok_or_else(|| Error::Argument(format!("branch index {branch} out of range")))?;
    let mut state = x.to_vec();
    for sub in &branch.substeps {
        state = match sub.op {
            OperatorId::Drift => drift_flow(model, cfg, sub.fraction * dt, &state)?,
            OperatorId::Diffusion(j) => {
                let w = sub.fraction.sqrt() * noise[j];
                diffusion_flow(model, cfg, j, w, &state)?
            }
        };
    }
    Ok(state)
}

/// One randomized step of the scheme: samples a branch with probability
/// `λ`, draws `W_j ~ N(0, dt)` once, and composes the substep flows.
pub fn step<R: Rng + ?Sized>(
    model: &SplitModel,
    cfg: &FlowConfig,
    scheme: &SchemeSpec,
    dt: f64,
    x: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    scheme.validate_for(model)?;
    let branch = scheme.sample_branch(rng);
    let sqrt_dt = dt.sqrt();
    let noise: Vec<f64> = (0..model.noise_dim())
        .map(|_| sqrt_dt * rng.sample::<f64, _>(StandardNormal))
        .collect();
    step_with_assignment(model, cfg, scheme, branch, &noise, dt, x)
}

/// Iterate [`step`] `nsteps` times with `Δt = T/nsteps`; returns the
/// terminal state. Overflow errors carry the failing step index.
pub fn simulate_path<R: Rng + ?Sized>(
    model: &SplitModel,
    cfg: &FlowConfig,
    scheme: &SchemeSpec,
    t: f64,
    nsteps: usize,
    x0: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    if nsteps == 0 {
        return Err(Error::Argument("nsteps must be at least 1".into()));
    }
    if t <= 0.0 {
        return Err(Error::Argument(format!("horizon must be positive, got {t}")));
    }
    let dt = t / nsteps as f64;
    let mut state = x0.to_vec();
    for k in 0..nsteps {
        state = step(model, cfg, scheme, dt, &state, rng)
            .map_err(|e| e.with_context(&format!("step {k}")))?;
    }
    Ok(state)
}

/// Affine one-step map `x ↦ L x + b₀ + Σ_j load_j W_j` of a branch.
#[derive(Debug, Clone)]
pub struct AffineStepMap {
    pub linear: Array2<f64>,
    pub offset: Array1<f64>,
    /// Linear loading of the offset on each Brownian increment `W_j`.
    pub loadings: Vec<Array1<f64>>,
}

const AFFINE_PROBE_TOL: f64 = 1e-9;

/// Extract the affine map of one branch by probing the step with basis
/// states and unit noise assignments. Verifies that the linear part does
/// not depend on the noise and that the offset is linear in the noise
/// (three-point collinearity); fails with a capability error otherwise or
/// when the model is not flagged affine.
pub fn affine_step_map(
    model: &SplitModel,
    cfg: &FlowConfig,
    scheme: &SchemeSpec,
    dt: f64,
    branch: usize,
) -> Result<AffineStepMap> {
    if !model.is_affine() {
        return Err(Error::Capability(format!(
            "model {} is not flagged affine",
            model.name()
        )));
    }
    scheme.validate_for(model)?;
    let dim = model.dim();
    let d = model.noise_dim();
    let zero_state = vec![0.0; dim];
    let zero_noise = vec![0.0; d];

    let b0 = step_with_assignment(model, cfg, scheme, branch, &zero_noise, dt, &zero_state)?;
    let mut linear = Array2::zeros((dim, dim));
    for i in 0..dim {
        let mut e = zero_state.clone();
        e[i] = 1.0;
        let col = step_with_assignment(model, cfg, scheme, branch, &zero_noise, dt, &e)?;
        for r in 0..dim {
            linear[(r, i)] = col[r] - b0[r];
        }
    }

    let mut loadings = Vec::with_capacity(d);
    for j in 0..d {
        let mut w1 = zero_noise.clone();
        w1[j] = 1.0;
        let mut w2 = zero_noise.clone();
        w2[j] = 2.0;
        let f1 = step_with_assignment(model, cfg, scheme, branch, &w1, dt, &zero_state)?;
        let f2 = step_with_assignment(model, cfg, scheme, branch, &w2, dt, &zero_state)?;
        let mut load = Array1::zeros(dim);
        for r in 0..dim {
            let l1 = f1[r] - b0[r];
            let l2 = f2[r] - b0[r];
            if (l2 - 2.0 * l1).abs() > AFFINE_PROBE_TOL * (1.0 + l1.abs()) {
                return Err(Error::Capability(format!(
                    "branch {branch}: offset is not linear in W_{}",
                    j + 1
                )));
            }
            load[r] = l1;
        }
        // The linear part must not depend on the noise.
        let mut e = zero_state.clone();
        e[0] = 1.0;
        let lw = step_with_assignment(model, cfg, scheme, branch, &w1, dt, &e)?;
        for r in 0..dim {
            let col = lw[r] - f1[r];
            if (col - linear[(r, 0)]).abs() > AFFINE_PROBE_TOL * (1.0 + col.abs()) {
                return Err(Error::Capability(format!(
                    "branch {branch}: linear part depends on W_{}",
                    j + 1
                )));
            }
        }
        loadings.push(load);
    }

    Ok(AffineStepMap {
        linear,
        offset: Array1::from(b0),
        loadings,
    })
}

/// Exact law parameters (mean, covariance) of the scheme's terminal state
/// on an affine model, averaging over branch choices with weights `λ`.
#[derive(Debug, Clone)]
pub struct MomentState {
    pub mean: Array1<f64>,
    pub covariance: Array2<f64>,
}

/// Propagate `(mean, covariance)` exactly through `nsteps` affine-Gaussian
/// steps of the scheme.
pub fn propagate_moments_affine(
    model: &SplitModel,
    cfg: &FlowConfig,
    scheme: &SchemeSpec,
    t: f64,
    nsteps: usize,
    x0: &[f64],
) -> Result<MomentState> {
    if nsteps == 0 {
        return Err(Error::Argument("nsteps must be at least 1".into()));
    }
    model.check_dim(x0)?;
    let dt = t / nsteps as f64;
    let dim = model.dim();
    let maps: Vec<AffineStepMap> = (0..scheme.branches.len())
        .map(|b| affine_step_map(model, cfg, scheme, dt, b))
        .collect::<Result<_>>()?;

    let mut mean = Array1::from(x0.to_vec());
    let mut second = {
        let mut m = Array2::zeros((dim, dim));
        for i in 0..dim {
            for j in 0..dim {
                m[(i, j)] = x0[i] * x0[j];
            }
        }
        m
    };

    for _ in 0..nsteps {
        let mut next_mean = Array1::zeros(dim);
        let mut next_second = Array2::zeros((dim, dim));
        for (map, branch) in maps.iter().zip(&scheme.branches) {
            let bm = map.linear.dot(&mean) + &map.offset;
            // E[x'x'ᵀ] = L E[xxᵀ] Lᵀ + L E[x] b₀ᵀ + b₀ E[x]ᵀ Lᵀ + b₀ b₀ᵀ + dt Σ load loadᵀ
            let lm = map.linear.dot(&mean);
            let mut bs = map.linear.dot(&second).dot(&map.linear.t());
            for i in 0..dim {
                for j in 0..dim {
                    bs[(i, j)] += lm[i] * map.offset[j]
                        + map.offset[i] * lm[j]
                        + map.offset[i] * map.offset[j];
                }
            }
            for load in &map.loadings {
                for i in 0..dim {
                    for j in 0..dim {
                        bs[(i, j)] += dt * load[i] * load[j];
                    }
                }
            }
            next_mean = next_mean + branch.weight * &bm;
            next_second = next_second + branch.weight * &bs;
        }
        mean = next_mean;
        second = next_second;
    }

    let mut covariance = second;
    for i in 0..dim {
        for j in 0..dim {
            covariance[(i, j)] -= mean[i] * mean[j];
        }
    }
    Ok(MomentState { mean, covariance })
}

fn is_diagonal(m: &Array2<f64>) -> bool {
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    for ((i, j), v) in m.indexed_iter() {
        if i != j && v.abs() > 1e-12 * scale {
            return false;
        }
    }
    true
}

/// Exact expectation of a polynomial payoff (degree ≤ 4) under the scheme's
/// terminal law on an affine model.
///
/// Degree ≤ 2 uses the mean/covariance propagation. Degrees 3 and 4 require
/// every branch map to be diagonal (coordinates decouple), in which case the
/// raw moments 1..4 of the payoff coordinate propagate in closed form.
pub fn affine_polynomial_expectation(
    model: &SplitModel,
    cfg: &FlowConfig,
    scheme: &SchemeSpec,
    payoff: &Payoff,
    t: f64,
    nsteps: usize,
    x0: &[f64],
) -> Result<f64> {
    let (coord, coeffs) = payoff.as_polynomial().ok_or_else(|| {
        Error::Capability(format!(
            "payoff {} is not polynomial; affine fast path unavailable",
            payoff.describe()
        ))
    })?;
    if coord >= model.dim() {
        return Err(Error::Argument(format!(
            "payoff coordinate {coord} out of range for dimension {}",
            model.dim()
        )));
    }
    let degree = (0..5).rev().find(|&k| coeffs[k] != 0.0).unwrap_or(0);
    if degree <= 2 {
        let state = propagate_moments_affine(model, cfg, scheme, t, nsteps, x0)?;
        let m1 = state.mean[coord];
        let m2 = state.covariance[(coord, coord)] + m1 * m1;
        return Ok(coeffs[0] + coeffs[1] * m1 + coeffs[2] * m2);
    }

    let dt = t / nsteps as f64;
    let maps: Vec<AffineStepMap> = (0..scheme.branches.len())
        .map(|b| affine_step_map(model, cfg, scheme, dt, b))
        .collect::<Result<_>>()?;
    for map in &maps {
        if !is_diagonal(&map.linear) {
            return Err(Error::Capability(
                "degree > 2 affine fast path requires a diagonal step map".into(),
            ));
        }
    }

    // Raw moments μ_k = E[x_c^k], k = 0..4; per branch x' = l x + (c + n)
    // with n ~ N(0, v): E[x'^k] = Σ_i C(k,i) l^i μ_i E[(c+n)^{k-i}].
    let binom: [[f64; 5]; 5] = [
        [1.0, 0.0, 0.0, 0.0, 0.0],
        [1.0, 1.0, 0.0, 0.0, 0.0],
        [1.0, 2.0, 1.0, 0.0, 0.0],
        [1.0, 3.0, 3.0, 1.0, 0.0],
        [1.0, 4.0, 6.0, 4.0, 1.0],
    ];
    let mut mu = [0.0f64; 5];
    for k in 0..5 {
        mu[k] = x0[coord].powi(k as i32);
    }
    for _ in 0..nsteps {
        let mut next = [0.0f64; 5];
        for (map, branch) in maps.iter().zip(&scheme.branches) {
            let l = map.linear[(coord, coord)];
            let c = map.offset[coord];
            let v = dt * map.loadings.iter().map(|ld| ld[coord] * ld[coord]).sum::<f64>();
            let kick = gaussian_raw_moments(c, v);
            let mut lp = [1.0f64; 5];
            for k in 1..5 {
                lp[k] = lp[k - 1] * l;
            }
            for k in 0..5 {
                let mut acc = 0.0;
                for i in 0..=k {
                    acc += binom[k][i] * lp[i] * mu[i] * kick[k - i];
                }
                next[k] += branch.weight * acc;
            }
        }
        mu = next;
    }
    Ok(coeffs.iter().zip(&mu).map(|(c, m)| c * m).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{gbm, heat_spde, ou};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn euler_and_nv_shapes() {
        let e = SchemeSpec::euler(2);
        assert_eq!(e.branches().len(), 1);
        assert_eq!(e.branches()[0].substeps.len(), 3);
        let nv = SchemeSpec::ninomiya_victoir(2);
        assert_eq!(nv.branches().len(), 2);
        assert_eq!(nv.branches()[0].substeps.len(), 4);
        assert_eq!(
            nv.branches()[0].substeps[1].op,
            OperatorId::Diffusion(0)
        );
        assert_eq!(
            nv.branches()[1].substeps[1].op,
            OperatorId::Diffusion(1)
        );
    }

    #[test]
    fn custom_scheme_weight_validation() {
        let bad = SchemeSpec::custom(
            "bad",
            vec![Branch {
                weight: 0.7,
                substeps: vec![Substep {
                    op: OperatorId::Drift,
                    fraction: 1.0,
                }],
            }],
        );
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    #[test]
    fn euler_step_on_gbm_is_exact_composition() {
        let m = gbm(0.1, 0.2).unwrap();
        let cfg = FlowConfig::default();
        let scheme = SchemeSpec::euler(1);
        let dt = 0.25;
        let dw = 0.3;
        let z = step_with_assignment(&m, &cfg, &scheme, 0, &[dw], dt, &[1.0]).unwrap();
        let expected = ((0.1 - 0.02) * dt + 0.2 * dw).exp();
        assert!((z[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn nv_branch_coin_irrelevant_for_single_noise() {
        let m = gbm(0.1, 0.2).unwrap();
        let cfg = FlowConfig::default();
        let scheme = SchemeSpec::ninomiya_victoir(1);
        let a = step_with_assignment(&m, &cfg, &scheme, 0, &[0.4], 0.1, &[1.0]).unwrap();
        let b = step_with_assignment(&m, &cfg, &scheme, 1, &[0.4], 0.1, &[1.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn step_continuity_at_zero_dt() {
        // Continuity at Δt -> 0 of the substep composition; the Gaussian
        // kick is O(√Δt) per sample, so the noise-free assignment carries
        // the operator-level statement.
        let m = ou(1.0, 0.0, 0.5).unwrap();
        let cfg = FlowConfig::default();
        for scheme in [SchemeSpec::euler(1), SchemeSpec::ninomiya_victoir(1)] {
            for x in [0.0, 1.0, -3.0] {
                let z = step_with_assignment(&m, &cfg, &scheme, 0, &[0.0], 1e-12, &[x]).unwrap();
                assert!((z[0] - x).abs() <= 1e-9 * (1.0 + x.abs()));
                let mut rng = ChaCha8Rng::seed_from_u64(7);
                let zr = step(&m, &cfg, &scheme, 1e-12, &[x], &mut rng).unwrap();
                assert!((zr[0] - x).abs() <= 1e-5 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn simulate_path_deterministic_model_matches_flow() {
        let m = ou(1.0, 0.0, 0.0).unwrap();
        let cfg = FlowConfig::default();
        let scheme = SchemeSpec::euler(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for nsteps in [1usize, 5, 32] {
            let z = simulate_path(&m, &cfg, &scheme, 1.0, nsteps, &[2.0], &mut rng).unwrap();
            assert!((z[0] - 2.0 * (-1.0f64).exp()).abs() < 1e-8);
        }
    }

    #[test]
    fn gbm_path_exact_for_fixed_increments() {
        let m = gbm(0.1, 0.2).unwrap();
        let cfg = FlowConfig::default();
        let nsteps = 8;
        let dt: f64 = 1.0 / nsteps as f64;
        let incs: Vec<f64> = (0..nsteps).map(|i| 0.1 * (i as f64 - 3.0)).collect();
        for scheme in [SchemeSpec::euler(1), SchemeSpec::ninomiya_victoir(1)] {
            let mut state = vec![1.0];
            for w in &incs {
                state = step_with_assignment(&m, &cfg, &scheme, 0, &[*w], dt, &state).unwrap();
            }
            let total: f64 = incs.iter().sum();
            let exact = ((0.1 - 0.02) * 1.0 + 0.2 * total).exp();
            assert!((state[0] - exact).abs() < 1e-12, "{}", scheme.name());
        }
    }

    #[test]
    fn affine_step_map_ou_euler_and_nv() {
        let theta = 1.0;
        let sigma = 0.5;
        let m = ou(theta, 0.0, sigma).unwrap();
        let cfg = FlowConfig::default();
        let dt = 0.25;
        let e = affine_step_map(&m, &cfg, &SchemeSpec::euler(1), dt, 0).unwrap();
        assert!((e.linear[(0, 0)] - (-theta * dt).exp()).abs() < 1e-12);
        assert!((e.loadings[0][0] - sigma).abs() < 1e-12);
        let nv = affine_step_map(&m, &cfg, &SchemeSpec::ninomiya_victoir(1), dt, 0).unwrap();
        assert!((nv.linear[(0, 0)] - (-theta * dt).exp()).abs() < 1e-12);
        assert!((nv.loadings[0][0] - sigma * (-theta * dt / 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn affine_step_map_zero_noise_identity() {
        let m = ou(0.0, 0.0, 0.0).unwrap();
        let cfg = FlowConfig::default();
        let map = affine_step_map(&m, &cfg, &SchemeSpec::euler(1), 0.5, 0).unwrap();
        assert!((map.linear[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(map.offset[0].abs() < 1e-12);
        assert!(map.loadings[0][0].abs() < 1e-12);
    }

    #[test]
    fn affine_step_map_rejects_non_affine() {
        let m = gbm(0.1, 0.2).unwrap();
        let cfg = FlowConfig::default();
        assert!(matches!(
            affine_step_map(&m, &cfg, &SchemeSpec::euler(1), 0.1, 0),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn moments_deterministic_contraction() {
        let m = ou(1.0, 0.0, 0.0).unwrap();
        let cfg = FlowConfig::default();
        let st =
            propagate_moments_affine(&m, &cfg, &SchemeSpec::euler(1), 1.0, 16, &[3.0]).unwrap();
        assert!((st.mean[0] - 3.0 * (-1.0f64).exp()).abs() < 1e-12);
        assert!(st.covariance[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn moments_single_euler_step_variance() {
        let m = ou(1.0, 0.0, 0.5).unwrap();
        let cfg = FlowConfig::default();
        let st = propagate_moments_affine(&m, &cfg, &SchemeSpec::euler(1), 0.5, 1, &[0.0]).unwrap();
        assert!((st.covariance[(0, 0)] - 0.25 * 0.5).abs() < 1e-14);
    }

    #[test]
    fn moments_match_monte_carlo() {
        let m = heat_spde(3, vec![0.8, 0.4]).unwrap();
        let cfg = FlowConfig::default();
        let scheme = SchemeSpec::ninomiya_victoir(2);
        let x0 = vec![1.0, -0.5, 0.25];
        let nsteps = 4;
        let t = 0.05;
        let st = propagate_moments_affine(&m, &cfg, &scheme, t, nsteps, &x0).unwrap();

        let npaths = 100_000;
        let mut sums = vec![0.0; 3];
        let mut sqs = vec![0.0; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..npaths {
            let z = simulate_path(&m, &cfg, &scheme, t, nsteps, &x0, &mut rng).unwrap();
            for i in 0..3 {
                sums[i] += z[i];
                sqs[i] += z[i] * z[i];
            }
        }
        for i in 0..3 {
            let mc_mean = sums[i] / npaths as f64;
            let mc_var = (sqs[i] / npaths as f64 - mc_mean * mc_mean).max(0.0);
            let se_mean = (mc_var / npaths as f64).sqrt();
            assert!(
                (mc_mean - st.mean[i]).abs() <= 3.0 * se_mean + 1e-12,
                "mean coord {i}: {} vs {}",
                mc_mean,
                st.mean[i]
            );
            let se_var = mc_var * (2.0 / npaths as f64).sqrt();
            assert!(
                (mc_var - st.covariance[(i, i)]).abs() <= 3.0 * se_var + 1e-12,
                "var coord {i}"
            );
        }
    }

    #[test]
    fn quartic_moment_propagation_matches_gaussian_law() {
        // OU Euler terminal law is exactly Gaussian with the recursion
        // moments; the quartic path must agree with E[x⁴] = m⁴+6m²v+3v².
        let theta = 1.0;
        let sigma = 0.5;
        let m = ou(theta, 0.0, sigma).unwrap();
        let cfg = FlowConfig::default();
        let scheme = SchemeSpec::euler(1);
        let nsteps = 16;
        let t = 1.0;
        let dt = t / nsteps as f64;
        let x0 = 0.7;
        let payoff = Payoff::poly(0, vec![0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let got =
            affine_polynomial_expectation(&m, &cfg, &scheme, &payoff, t, nsteps, &[x0]).unwrap();
        let l = (-theta * dt).exp();
        let mut mean = x0;
        let mut var = 0.0;
        for _ in 0..nsteps {
            mean *= l;
            var = l * l * var + sigma * sigma * dt;
        }
        let expected = mean.powi(4) + 6.0 * mean * mean * var + 3.0 * var * var;
        assert!((got - expected).abs() < 1e-12 * (1.0 + expected.abs()));
    }
}
