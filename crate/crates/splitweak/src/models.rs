//! Split models: linear part `A`, drift `α`, diffusions `σ_j` with Jacobian
//! actions, optional exact substep flows and exact moment oracles.
//!
//! A model describes dynamics of the form
//!
//! ```text
//! dx = (A x + α(x)) dt + Σ_j σ_j(x) dW^j
//! ```
//!
//! where `A` is diagonal on the mode basis (all zeros for a plain SDE) or a
//! custom contraction semigroup (forward curves use the shift). The built-ins
//! cover the test equations used throughout: Ornstein-Uhlenbeck, geometric
//! Brownian motion, a 1-d affine-coefficient model with linear growth, and a
//! spectral truncation of the stochastic heat equation with additive noise.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// `x -> v` vector field on states.
pub type StateFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
/// `(x, v) -> Dσ(x)·v` directional derivative of a vector field.
pub type DirectionalFn = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;
/// `(t, x) -> flow_t(x)` closed-form flow map (signed `t` for diffusions).
pub type FlowFn = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;
/// `(t, x) -> e^{tA} x` semigroup action (forward only).
pub type SemigroupFn = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;

/// Payoff functions covered by the experiment harness.
///
/// Moment and polynomial payoffs act on a single coordinate; for these the
/// built-in models provide closed-form expectations. `Custom` carries a
/// user-registered function (e.g. a bond price on a forward curve) with no
/// oracle.
#[derive(Clone)]
pub enum Payoff {
    /// `f(x) = x_c`.
    Moment1 { coordinate: usize },
    /// `f(x) = x_c²`.
    Moment2 { coordinate: usize },
    /// `f(x) = Σ_i coefficients[i] · x_c^i`, degree ≤ 4.
    Poly {
        coordinate: usize,
        coefficients: Vec<f64>,
    },
    /// Arbitrary registered payoff; excluded from exact oracles.
    Custom {
        id: String,
        f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    },
}

impl Payoff {
    pub fn poly(coordinate: usize, coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.len() > 5 {
            return Err(Error::Config(format!(
                "polynomial payoff degree is limited to 4, got degree {}",
                coefficients.len() - 1
            )));
        }
        Ok(Payoff::Poly {
            coordinate,
            coefficients,
        })
    }

    /// Evaluate the payoff on a terminal state.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Payoff::Moment1 { coordinate } => x[*coordinate],
            Payoff::Moment2 { coordinate } => x[*coordinate] * x[*coordinate],
            Payoff::Poly {
                coordinate,
                coefficients,
            } => {
                let v = x[*coordinate];
                let mut acc = 0.0;
                let mut pow = 1.0;
                for c in coefficients {
                    acc += c * pow;
                    pow *= v;
                }
                acc
            }
            Payoff::Custom { f, .. } => f(x),
        }
    }

    /// Coordinate and dense degree-4 coefficient vector, when polynomial.
    pub fn as_polynomial(&self) -> Option<(usize, [f64; 5])> {
        let mut coeffs = [0.0; 5];
        match self {
            Payoff::Moment1 { coordinate } => {
                coeffs[1] = 1.0;
                Some((*coordinate, coeffs))
            }
            Payoff::Moment2 { coordinate } => {
                coeffs[2] = 1.0;
                Some((*coordinate, coeffs))
            }
            Payoff::Poly {
                coordinate,
                coefficients,
            } => {
                for (i, c) in coefficients.iter().enumerate() {
                    if i > 4 {
                        return None;
                    }
                    coeffs[i] = *c;
                }
                Some((*coordinate, coeffs))
            }
            Payoff::Custom { .. } => None,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Payoff::Moment1 { coordinate } => format!("moment1[{coordinate}]"),
            Payoff::Moment2 { coordinate } => format!("moment2[{coordinate}]"),
            Payoff::Poly { coordinate, .. } => format!("poly[{coordinate}]"),
            Payoff::Custom { id, .. } => format!("custom[{id}]"),
        }
    }
}

/// One diffusion field `σ_j` together with its Jacobian action and an
/// optional closed-form flow `Fl^{σ_j}_w`.
#[derive(Clone)]
pub struct DiffusionField {
    pub field: StateFn,
    pub jacobian: DirectionalFn,
    pub exact_flow: Option<FlowFn>,
}

impl DiffusionField {
    /// Constant field `σ(x) ≡ c`: zero Jacobian, exact flow `x + c·w`.
    pub fn constant(c: Vec<f64>) -> Self {
        let dim = c.len();
        let c_field = c.clone();
        let c_flow = c;
        DiffusionField {
            field: Arc::new(move |_x| c_field.clone()),
            jacobian: Arc::new(move |_x, _v| vec![0.0; dim]),
            exact_flow: Some(Arc::new(move |w, x| {
                x.iter().zip(&c_flow).map(|(xi, ci)| xi + ci * w).collect()
            })),
        }
    }
}

/// The linear part `A` of the equation.
#[derive(Clone)]
pub enum LinearPart {
    /// Diagonal on the mode basis: `(e^{tA} x)_k = e^{t λ_k} x_k`.
    Diagonal(Vec<f64>),
    /// Custom semigroup with an explicit moving-frame inverse. `forward`
    /// computes `e^{tA}`, `frame_backward` the backward action used by the
    /// interaction-picture integrator (for invertible `A` this is `e^{-tA}`;
    /// the shift semigroup uses a left-padded backward resampling).
    Custom {
        forward: SemigroupFn,
        frame_backward: SemigroupFn,
    },
}

/// A model of the split equation, immutable after construction.
#[derive(Clone)]
pub struct SplitModel {
    name: String,
    dim: usize,
    linear: LinearPart,
    drift: StateFn,
    diffusions: Vec<DiffusionField>,
    exact_drift_flow: Option<FlowFn>,
    moment_oracle: Option<Arc<dyn Fn(&Payoff, f64, &[f64]) -> Option<f64> + Send + Sync>>,
    affine: bool,
}

impl fmt::Debug for SplitModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SplitModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("noise_dim", &self.diffusions.len())
            .field("affine", &self.affine)
            .finish()
    }
}

/// Builder for custom models; the built-ins go through it as well.
pub struct SplitModelBuilder {
    name: String,
    dim: usize,
    linear: LinearPart,
    drift: StateFn,
    diffusions: Vec<DiffusionField>,
    exact_drift_flow: Option<FlowFn>,
    moment_oracle: Option<Arc<dyn Fn(&Payoff, f64, &[f64]) -> Option<f64> + Send + Sync>>,
    affine: bool,
}

impl SplitModelBuilder {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        SplitModelBuilder {
            name: name.into(),
            dim,
            linear: LinearPart::Diagonal(vec![0.0; dim]),
            drift: Arc::new(move |x: &[f64]| vec![0.0; x.len()]),
            diffusions: Vec::new(),
            exact_drift_flow: None,
            moment_oracle: None,
            affine: false,
        }
    }

    pub fn spectrum(mut self, spectrum: Vec<f64>) -> Self {
        self.linear = LinearPart::Diagonal(spectrum);
        self
    }

    pub fn custom_semigroup(mut self, forward: SemigroupFn, frame_backward: SemigroupFn) -> Self {
        self.linear = LinearPart::Custom {
            forward,
            frame_backward,
        };
        self
    }

    pub fn drift(mut self, drift: StateFn) -> Self {
        self.drift = drift;
        self
    }

    pub fn diffusion(mut self, field: DiffusionField) -> Self {
        self.diffusions.push(field);
        self
    }

    pub fn exact_drift_flow(mut self, flow: FlowFn) -> Self {
        self.exact_drift_flow = Some(flow);
        self
    }

    pub fn moment_oracle(
        mut self,
        oracle: Arc<dyn Fn(&Payoff, f64, &[f64]) -> Option<f64> + Send + Sync>,
    ) -> Self {
        self.moment_oracle = Some(oracle);
        self
    }

    pub fn affine(mut self, affine: bool) -> Self {
        self.affine = affine;
        self
    }

    pub fn build(self) -> Result<SplitModel> {
        if self.dim == 0 {
            return Err(Error::Config("model dimension must be at least 1".into()));
        }
        if let LinearPart::Diagonal(spec) = &self.linear {
            if spec.len() != self.dim {
                return Err(Error::Config(format!(
                    "spectrum length {} does not match dimension {}",
                    spec.len(),
                    self.dim
                )));
            }
        }
        Ok(SplitModel {
            name: self.name,
            dim: self.dim,
            linear: self.linear,
            drift: self.drift,
            diffusions: self.diffusions,
            exact_drift_flow: self.exact_drift_flow,
            moment_oracle: self.moment_oracle,
            affine: self.affine,
        })
    }
}

impl SplitModel {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of driving Brownian motions.
    pub fn noise_dim(&self) -> usize {
        self.diffusions.len()
    }

    /// Eigenvalues of `A` when diagonal.
    pub fn spectrum(&self) -> Option<&[f64]> {
        match &self.linear {
            LinearPart::Diagonal(s) => Some(s),
            LinearPart::Custom { .. } => None,
        }
    }

    pub fn is_affine(&self) -> bool {
        self.affine
    }

    pub fn diffusion(&self, j: usize) -> Result<&DiffusionField> {
        self.diffusions.get(j).ok_or_else(|| {
            Error::Argument(format!(
                "diffusion index {j} out of range (noise dimension {})",
                self.diffusions.len()
            ))
        })
    }

    pub fn exact_drift_flow(&self) -> Option<&FlowFn> {
        self.exact_drift_flow.as_ref()
    }

    /// Evaluate the raw drift `α(x)` (excluding `A` and any correction).
    pub fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok((self.drift)(x))
    }

    /// The Stratonovich-corrected drift `α₀(x) = α(x) - ½ Σ_j Dσ_j(x) σ_j(x)`.
    /// The `A`-part is excluded: the semigroup handles it.
    pub fn stratonovich_drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut out = (self.drift)(x);
        for diff in &self.diffusions {
            let sigma = (diff.field)(x);
            let correction = (diff.jacobian)(x, &sigma);
            for (o, c) in out.iter_mut().zip(&correction) {
                *o -= 0.5 * c;
            }
        }
        Ok(out)
    }

    /// Apply `e^{tA}` for `t ≥ 0`. For diagonal `A` this is `(e^{t λ_k} x_k)_k`.
    pub fn apply_semigroup(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        if t < 0.0 {
            return Err(Error::Argument(format!(
                "the semigroup is one-sided; got t = {t}"
            )));
        }
        self.check_dim(x)?;
        Ok(self.semigroup_forward(t, x))
    }

    /// Forward semigroup action without the sign check (internal use).
    pub(crate) fn semigroup_forward(&self, t: f64, x: &[f64]) -> Vec<f64> {
        match &self.linear {
            LinearPart::Diagonal(spec) => x
                .iter()
                .zip(spec)
                .map(|(xk, lam)| (t * lam).exp() * xk)
                .collect(),
            LinearPart::Custom { forward, .. } => forward(t, x),
        }
    }

    /// Moving-frame backward action at time `t ≥ 0` (see [`LinearPart`]).
    pub(crate) fn frame_backward(&self, t: f64, x: &[f64]) -> Vec<f64> {
        match &self.linear {
            LinearPart::Diagonal(spec) => x
                .iter()
                .zip(spec)
                .map(|(xk, lam)| (-t * lam).exp() * xk)
                .collect(),
            LinearPart::Custom { frame_backward, .. } => frame_backward(t, x),
        }
    }

    /// Exact expectation `E[f(x(T, x0))]` under the true dynamics, when the
    /// model ships an oracle covering the payoff.
    pub fn exact_expectation(&self, payoff: &Payoff, t: f64, x0: &[f64]) -> Result<f64> {
        self.check_dim(x0)?;
        let oracle = self.moment_oracle.as_ref().ok_or_else(|| {
            Error::Capability(format!("model {} has no exact moment oracle", self.name))
        })?;
        oracle(payoff, t, x0).ok_or_else(|| {
            Error::Capability(format!(
                "oracle of model {} does not cover payoff {}",
                self.name,
                payoff.describe()
            ))
        })
    }

    pub fn has_oracle_for(&self, payoff: &Payoff, t: f64, x0: &[f64]) -> bool {
        self.moment_oracle
            .as_ref()
            .map(|o| o(payoff, t, x0).is_some())
            .unwrap_or(false)
    }

    /// Copy of the model with exact flows removed, so the generic integrator
    /// path can be exercised against the closed forms.
    pub fn without_exact_flows(&self) -> SplitModel {
        let mut m = self.clone();
        m.exact_drift_flow = None;
        for d in &mut m.diffusions {
            d.exact_flow = None;
        }
        m
    }

    pub(crate) fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Argument(format!(
                "state dimension {} does not match model dimension {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }
}

/// Raw moments of a Gaussian with mean `m` and variance `v`, orders 0..=4.
pub(crate) fn gaussian_raw_moments(m: f64, v: f64) -> [f64; 5] {
    [
        1.0,
        m,
        m * m + v,
        m * m * m + 3.0 * m * v,
        m * m * m * m + 6.0 * m * m * v + 3.0 * v * v,
    ]
}

fn polynomial_gaussian_expectation(payoff: &Payoff, mean: f64, var: f64) -> Option<f64> {
    let (_, coeffs) = payoff.as_polynomial()?;
    let mom = gaussian_raw_moments(mean, var);
    Some(coeffs.iter().zip(&mom).map(|(c, m)| c * m).sum())
}

/// `(e^{kt} - 1)/k`, stable as `k -> 0`.
pub(crate) fn expm1_over(k: f64, t: f64) -> f64 {
    if k.abs() < 1e-12 {
        t * (1.0 + 0.5 * k * t)
    } else {
        (k * t).exp_m1() / k
    }
}

/// Ornstein-Uhlenbeck `dx = θ(μ - x)dt + σ dW` in split form (`A = 0`).
pub fn ou(theta: f64, mu: f64, sigma: f64) -> Result<SplitModel> {
    let drift_flow = move |t: f64, x: &[f64]| -> Vec<f64> {
        let e = (-theta * t).exp();
        vec![mu + (x[0] - mu) * e]
    };
    let oracle = move |payoff: &Payoff, t: f64, x0: &[f64]| -> Option<f64> {
        let (coord, _) = payoff.as_polynomial()?;
        if coord != 0 {
            return None;
        }
        let mean = mu + (x0[0] - mu) * (-theta * t).exp();
        let var = if theta.abs() < 1e-12 {
            sigma * sigma * t
        } else {
            sigma * sigma * (1.0 - (-2.0 * theta * t).exp()) / (2.0 * theta)
        };
        polynomial_gaussian_expectation(payoff, mean, var)
    };
    SplitModelBuilder::new("ou", 1)
        .spectrum(vec![0.0])
        .drift(Arc::new(move |x: &[f64]| vec![theta * (mu - x[0])]))
        .diffusion(DiffusionField::constant(vec![sigma]))
        .exact_drift_flow(Arc::new(drift_flow))
        .moment_oracle(Arc::new(oracle))
        .affine(true)
        .build()
}

/// Geometric Brownian motion `dx = μ x dt + σ̄ x dW` (`A = 0`).
///
/// Both substep flows are closed-form exponential maps; since they commute,
/// the splitting schemes reproduce the lognormal solution pathwise.
pub fn gbm(mu: f64, sigma_bar: f64) -> Result<SplitModel> {
    let k0 = mu - 0.5 * sigma_bar * sigma_bar;
    let diffusion = DiffusionField {
        field: Arc::new(move |x: &[f64]| vec![sigma_bar * x[0]]),
        jacobian: Arc::new(move |_x: &[f64], v: &[f64]| vec![sigma_bar * v[0]]),
        exact_flow: Some(Arc::new(move |w: f64, x: &[f64]| {
            vec![x[0] * (sigma_bar * w).exp()]
        })),
    };
    let oracle = move |payoff: &Payoff, t: f64, x0: &[f64]| -> Option<f64> {
        let (coord, coeffs) = payoff.as_polynomial()?;
        if coord != 0 {
            return None;
        }
        // Lognormal raw moments: E[x^k] = x0^k exp(k μ t + k(k-1) σ̄² t / 2).
        let mut acc = 0.0;
        for (k, c) in coeffs.iter().enumerate() {
            if *c != 0.0 {
                let kf = k as f64;
                acc += c
                    * x0[0].powi(k as i32)
                    * (kf * mu * t + 0.5 * kf * (kf - 1.0) * sigma_bar * sigma_bar * t).exp();
            }
        }
        Some(acc)
    };
    SplitModelBuilder::new("gbm", 1)
        .spectrum(vec![0.0])
        .drift(Arc::new(move |x: &[f64]| vec![mu * x[0]]))
        .diffusion(diffusion)
        .exact_drift_flow(Arc::new(move |t: f64, x: &[f64]| {
            vec![x[0] * (k0 * t).exp()]
        }))
        .moment_oracle(Arc::new(oracle))
        .affine(false)
        .build()
}

/// 1-d model with affine coefficients of linear growth:
/// `α(x) = a x`, `σ(x) = b x + c` (`A = 0`).
///
/// Ships exact flows for each substep but no global moment oracle.
pub fn linear_growth_1d(a: f64, b: f64, c: f64) -> Result<SplitModel> {
    // Corrected drift α₀(x) = a x - b(b x + c)/2 = k x + m.
    let k = a - 0.5 * b * b;
    let m = -0.5 * b * c;
    let diffusion = DiffusionField {
        field: Arc::new(move |x: &[f64]| vec![b * x[0] + c]),
        jacobian: Arc::new(move |_x: &[f64], v: &[f64]| vec![b * v[0]]),
        exact_flow: Some(Arc::new(move |w: f64, x: &[f64]| {
            vec![(b * w).exp() * x[0] + c * expm1_over(b, w)]
        })),
    };
    SplitModelBuilder::new("linear_growth_1d", 1)
        .spectrum(vec![0.0])
        .drift(Arc::new(move |x: &[f64]| vec![a * x[0]]))
        .diffusion(diffusion)
        .exact_drift_flow(Arc::new(move |t: f64, x: &[f64]| {
            vec![(k * t).exp() * x[0] + m * expm1_over(k, t)]
        }))
        .affine(false)
        .build()
}

/// Spectral truncation of the stochastic heat equation on `(0,1)` with
/// Dirichlet boundary: `K` modes with `λ_k = -(kπ)²`, additive noise with the
/// given amplitudes on the first modes, zero drift.
pub fn heat_spde(modes: usize, noise_amplitudes: Vec<f64>) -> Result<SplitModel> {
    if modes == 0 {
        return Err(Error::Config("heat_spde requires at least one mode".into()));
    }
    if noise_amplitudes.is_empty() || noise_amplitudes.len() > modes {
        return Err(Error::Config(format!(
            "heat_spde noise dimension must lie in 1..={modes}, got {}",
            noise_amplitudes.len()
        )));
    }
    let spectrum: Vec<f64> = (1..=modes)
        .map(|k| {
            let kpi = k as f64 * std::f64::consts::PI;
            -kpi * kpi
        })
        .collect();
    let spectrum_flow = spectrum.clone();
    let spectrum_oracle = spectrum.clone();
    let amps = noise_amplitudes.clone();
    let oracle = move |payoff: &Payoff, t: f64, x0: &[f64]| -> Option<f64> {
        let (coord, _) = payoff.as_polynomial()?;
        if coord >= spectrum_oracle.len() {
            return None;
        }
        let lam = spectrum_oracle[coord];
        let mean = (lam * t).exp() * x0[coord];
        let q = amps.get(coord).copied().unwrap_or(0.0);
        // Var = q² (e^{2λt} - 1)/(2λ), with the λ -> 0 limit q² t.
        let var = q * q * expm1_over(2.0 * lam, t);
        polynomial_gaussian_expectation(payoff, mean, var)
    };
    let mut builder = SplitModelBuilder::new("heat_spde", modes)
        .spectrum(spectrum)
        .exact_drift_flow(Arc::new(move |t: f64, x: &[f64]| {
            x.iter()
                .zip(&spectrum_flow)
                .map(|(xk, lam)| (t * lam).exp() * xk)
                .collect()
        }))
        .moment_oracle(Arc::new(oracle))
        .affine(true);
    for (j, q) in noise_amplitudes.iter().enumerate() {
        let mut e = vec![0.0; modes];
        e[j] = *q;
        builder = builder.diffusion(DiffusionField::constant(e));
    }
    builder.build()
}

/// Built-in model registry for the CLI.
pub const BUILTIN_MODELS: [&str; 5] = ["ou", "gbm", "linear_growth_1d", "heat_spde", "hjm"];
