//! Admissible weight functions, sublevel sets and weighted supremum norms.
//!
//! A weight `ψ` maps states to `[1, ∞)` and controls the growth of payoffs:
//! all norms here are of the form `sup ψ(x)⁻¹ |f(x)|`, evaluated over finite
//! point clouds. The sublevel sets `K_R = {x : ψ(x) ≤ R}` play the role of
//! "bounded" regions; the tail ratio over `ψ(x) > R` probes whether a sampled
//! function decays relative to the weight.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// The radial profile `ρ` of a weight `ψ(x) = ρ(‖x‖)`.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightFamily {
    /// `ρ(r) = (1 + r²)^{s/2}`, `s ≥ 2`.
    Polynomial { s: f64 },
    /// `ρ(r) = cosh(β r)`, `β > 0`.
    Cosh { beta: f64 },
    /// `ρ(r) = exp(η r²)`, `η > 0`.
    GaussExp { eta: f64 },
}

impl WeightFamily {
    fn profile_from_sq(&self, r2: f64) -> f64 {
        match self {
            WeightFamily::Polynomial { s } => (1.0 + r2).powf(s / 2.0),
            WeightFamily::Cosh { beta } => (beta * r2.sqrt()).cosh(),
            WeightFamily::GaussExp { eta } => (eta * r2).exp(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            WeightFamily::Polynomial { s } if *s < 2.0 => Err(Error::Config(format!(
                "polynomial weight requires s >= 2, got {s}"
            ))),
            WeightFamily::Cosh { beta } if *beta <= 0.0 => Err(Error::Config(format!(
                "cosh weight requires beta > 0, got {beta}"
            ))),
            WeightFamily::GaussExp { eta } if *eta <= 0.0 => Err(Error::Config(format!(
                "gauss-exp weight requires eta > 0, got {eta}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Custom radius used in place of the spectral Sobolev norm (e.g. a curve norm).
pub type RadiusFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// An admissible weight function with radial profile, Sobolev level and
/// optional spectrum (needed to form the `dom A^ℓ` norm at level `ℓ > 0`).
#[derive(Clone)]
pub struct WeightFunction {
    family: WeightFamily,
    sobolev_level: usize,
    spectrum: Option<Vec<f64>>,
    radius_override: Option<RadiusFn>,
}

impl fmt::Debug for WeightFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WeightFunction")
            .field("family", &self.family)
            .field("sobolev_level", &self.sobolev_level)
            .field("spectrum_len", &self.spectrum.as_ref().map(Vec::len))
            .field("radius_override", &self.radius_override.is_some())
            .finish()
    }
}

impl WeightFunction {
    /// Weight at Sobolev level 0 (plain Euclidean radius).
    pub fn new(family: WeightFamily) -> Result<Self> {
        family.validate()?;
        Ok(Self {
            family,
            sobolev_level: 0,
            spectrum: None,
            radius_override: None,
        })
    }

    /// Weight at Sobolev level `level > 0`; requires the eigenvalues of the
    /// diagonal operator `A` to form the `dom A^ℓ` norm.
    pub fn with_level(family: WeightFamily, level: usize, spectrum: Vec<f64>) -> Result<Self> {
        family.validate()?;
        if level > 0 && spectrum.is_empty() {
            return Err(Error::Config(
                "sobolev level > 0 requires a nonempty spectrum".into(),
            ));
        }
        Ok(Self {
            family,
            sobolev_level: level,
            spectrum: Some(spectrum),
            radius_override: None,
        })
    }

    /// Weight whose radius is computed by a caller-supplied norm instead of
    /// the spectral Sobolev norm (used for forward-curve states).
    pub fn with_radius(family: WeightFamily, radius: RadiusFn) -> Result<Self> {
        family.validate()?;
        Ok(Self {
            family,
            sobolev_level: 0,
            spectrum: None,
            radius_override: Some(radius),
        })
    }

    pub fn family(&self) -> &WeightFamily {
        &self.family
    }

    pub fn sobolev_level(&self) -> usize {
        self.sobolev_level
    }

    /// The radius `‖x‖_{dom A^ℓ}` entering the radial profile. With a diagonal
    /// spectrum this is `(Σ_k (Σ_{i=0}^{ℓ} λ_k^{2i}) x_k²)^{1/2}`, which agrees
    /// with `(Σ_{i=0}^{ℓ} ‖A^i x‖²)^{1/2}`.
    pub fn radius(&self, x: &[f64]) -> Result<f64> {
        Ok(self.radius_squared(x)?.sqrt())
    }

    fn radius_squared(&self, x: &[f64]) -> Result<f64> {
        if let Some(r) = &self.radius_override {
            let r = r(x);
            return Ok(r * r);
        }
        if self.sobolev_level == 0 {
            return Ok(x.iter().map(|v| v * v).sum::<f64>());
        }
        let spectrum = self.spectrum.as_ref().expect("checked at construction");
        if spectrum.len() < x.len() {
            return Err(Error::Config(format!(
                "spectrum covers {} modes but state has dimension {}",
                spectrum.len(),
                x.len()
            )));
        }
        let mut sum = 0.0;
        for (xk, lam) in x.iter().zip(spectrum) {
            let lam2 = lam * lam;
            // Σ_{i=0}^{ℓ} λ^{2i}
            let mut coeff = 1.0;
            let mut pow = 1.0;
            for _ in 0..self.sobolev_level {
                pow *= lam2;
                coeff += pow;
            }
            sum += coeff * xk * xk;
        }
        Ok(sum)
    }

    /// Evaluate `ψ(x) = ρ(‖x‖_{dom A^ℓ})`; always ≥ 1.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        Ok(self.family.profile_from_sq(self.radius_squared(x)?))
    }

    /// Membership of `x` in the sublevel set `K_R = {ψ ≤ R}`; requires `R > 0`.
    pub fn sublevel_member(&self, x: &[f64], r: f64) -> Result<bool> {
        if r <= 0.0 {
            return Err(Error::Argument(format!(
                "sublevel radius must be positive, got {r}"
            )));
        }
        Ok(self.eval(x)? <= r)
    }
}

/// `max_i ψ(x_i)⁻¹ |f_i|` over a finite cloud of `(state, value)` samples.
///
/// Errors on an empty cloud. Zero exactly when every sampled value is zero.
pub fn weighted_sup_norm(values: &[(Vec<f64>, f64)], w: &WeightFunction) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Argument(
            "weighted sup norm requires a nonempty cloud".into(),
        ));
    }
    let mut sup = 0.0f64;
    for (x, fx) in values {
        sup = sup.max(fx.abs() / w.eval(x)?);
    }
    Ok(sup)
}

/// Tail ratio `sup { ψ(x)⁻¹ |f(x)| : ψ(x) > R }` over the sampled cloud,
/// or 0 when no sample lies outside `K_R`. An empirical probe of the decay
/// condition that characterises membership in the weighted closure.
pub fn growth_decay_ratio(values: &[(Vec<f64>, f64)], w: &WeightFunction, r: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Argument(
            "growth/decay ratio requires a nonempty cloud".into(),
        ));
    }
    if r <= 0.0 {
        return Err(Error::Argument(format!(
            "sublevel radius must be positive, got {r}"
        )));
    }
    let mut sup = 0.0f64;
    for (x, fx) in values {
        let psi = w.eval(x)?;
        if psi > r {
            sup = sup.max(fx.abs() / psi);
        }
    }
    Ok(sup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn poly(s: f64) -> WeightFunction {
        WeightFunction::new(WeightFamily::Polynomial { s }).unwrap()
    }

    #[test]
    fn polynomial_weight_direct_formula() {
        // (1 + ‖x‖²)^{s/2}
        let w = poly(2.0);
        assert_eq!(w.eval(&[1.0, 2.0]).unwrap(), 6.0);
        let w4 = poly(4.0);
        assert_eq!(w4.eval(&[1.0]).unwrap(), 4.0);
    }

    #[test]
    fn cosh_weight_identity_at_origin() {
        let w = WeightFunction::new(WeightFamily::Cosh { beta: 1.0 }).unwrap();
        assert_eq!(w.eval(&[0.0]).unwrap(), 1.0);
    }

    #[test]
    fn gauss_exp_weight_at_origin() {
        let w = WeightFunction::new(WeightFamily::GaussExp { eta: 0.5 }).unwrap();
        assert_eq!(w.eval(&[0.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn all_families_at_least_one() {
        let ws = [
            poly(2.0),
            WeightFunction::new(WeightFamily::Cosh { beta: 0.7 }).unwrap(),
            WeightFunction::new(WeightFamily::GaussExp { eta: 0.3 }).unwrap(),
        ];
        for w in &ws {
            for x in [-3.0, -0.5, 0.0, 0.2, 7.0] {
                assert!(w.eval(&[x]).unwrap() >= 1.0);
            }
        }
    }

    #[test]
    fn sobolev_level_norm_matches_diagonal_powers() {
        // ‖x‖²_{dom A²} = Σ (1 + λ² + λ⁴) x²
        let w = WeightFunction::with_level(
            WeightFamily::Polynomial { s: 2.0 },
            2,
            vec![-1.0, -4.0],
        )
        .unwrap();
        let x = [1.0, 0.5];
        let expected = (1.0 + 1.0 + 1.0) * 1.0 + (1.0 + 16.0 + 256.0) * 0.25;
        assert!((w.radius(&x).unwrap().powi(2) - expected).abs() < 1e-12);
    }

    #[test]
    fn sobolev_level_dimension_mismatch_is_config_error() {
        let w =
            WeightFunction::with_level(WeightFamily::Polynomial { s: 2.0 }, 1, vec![-1.0]).unwrap();
        let err = w.eval(&[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn sublevel_membership_boundary() {
        let w = poly(2.0);
        assert!(w.sublevel_member(&[2.0], 5.0).unwrap());
        assert!(!w.sublevel_member(&[2.0], 4.9).unwrap());
        assert!(w.sublevel_member(&[0.0], 1.0).unwrap());
        assert!(matches!(
            w.sublevel_member(&[0.0], 0.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn sup_norm_direct_evaluation() {
        let w = poly(2.0);
        let cloud: Vec<(Vec<f64>, f64)> =
            [0.0, 1.0, 2.0].iter().map(|&x| (vec![x], x)).collect();
        assert_eq!(weighted_sup_norm(&cloud, &w).unwrap(), 0.5);
    }

    #[test]
    fn sup_norm_of_weight_itself_is_one() {
        let w = poly(2.0);
        let cloud: Vec<(Vec<f64>, f64)> = [-2.0, 0.3, 5.0]
            .iter()
            .map(|&x| (vec![x], w.eval(&[x]).unwrap()))
            .collect();
        assert!((weighted_sup_norm(&cloud, &w).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sup_norm_zero_function() {
        let w = poly(2.0);
        let cloud = vec![(vec![1.0], 0.0), (vec![-4.0], 0.0)];
        assert_eq!(weighted_sup_norm(&cloud, &w).unwrap(), 0.0);
        assert!(matches!(
            weighted_sup_norm(&[], &w),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn decay_ratio_enumerated_tail() {
        // f(x) = x, ψ = 1 + x², cloud {0..10}, R = 50: tail is {8, 9, 10},
        // maximised at x = 8 with 8/65.
        let w = poly(2.0);
        let cloud: Vec<(Vec<f64>, f64)> = (0..=10).map(|i| (vec![i as f64], i as f64)).collect();
        let got = growth_decay_ratio(&cloud, &w, 50.0).unwrap();
        assert!((got - 8.0 / 65.0).abs() < 1e-15);
    }

    #[test]
    fn decay_ratio_identity_and_empty_tail() {
        let w = poly(2.0);
        let cloud: Vec<(Vec<f64>, f64)> = (0..=5)
            .map(|i| {
                let x = i as f64;
                (vec![x], w.eval(&[x]).unwrap())
            })
            .collect();
        // f = ψ: any R below the max ψ on the cloud gives ratio 1.
        assert!((growth_decay_ratio(&cloud, &w, 2.0).unwrap() - 1.0).abs() < 1e-15);
        // R above max ψ on the cloud: empty tail.
        assert_eq!(growth_decay_ratio(&cloud, &w, 1e6).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn norm_triangle_inequality(
            xs in proptest::collection::vec(-20.0f64..20.0, 1..12),
            fs in proptest::collection::vec(-5.0f64..5.0, 12),
            gs in proptest::collection::vec(-5.0f64..5.0, 12),
        ) {
            let w = poly(2.0);
            let cloud_f: Vec<_> = xs.iter().zip(&fs).map(|(&x, &f)| (vec![x], f)).collect();
            let cloud_g: Vec<_> = xs.iter().zip(&gs).map(|(&x, &g)| (vec![x], g)).collect();
            let cloud_fg: Vec<_> = xs.iter().zip(fs.iter().zip(&gs))
                .map(|(&x, (&f, &g))| (vec![x], f + g)).collect();
            let nf = weighted_sup_norm(&cloud_f, &w).unwrap();
            let ng = weighted_sup_norm(&cloud_g, &w).unwrap();
            let nfg = weighted_sup_norm(&cloud_fg, &w).unwrap();
            prop_assert!(nfg <= nf + ng + 1e-12);
        }

        #[test]
        fn norm_absolute_homogeneity(
            xs in proptest::collection::vec(-20.0f64..20.0, 1..12),
            fs in proptest::collection::vec(-5.0f64..5.0, 12),
            c in -4.0f64..4.0,
        ) {
            let w = poly(2.0);
            let cloud: Vec<_> = xs.iter().zip(&fs).map(|(&x, &f)| (vec![x], f)).collect();
            let scaled: Vec<_> = xs.iter().zip(&fs).map(|(&x, &f)| (vec![x], c * f)).collect();
            let n = weighted_sup_norm(&cloud, &w).unwrap();
            let ns = weighted_sup_norm(&scaled, &w).unwrap();
            prop_assert!((ns - c.abs() * n).abs() <= 1e-12 * (1.0 + n));
        }

        #[test]
        fn norm_monotone_in_cloud(
            xs in proptest::collection::vec(-20.0f64..20.0, 2..12),
            fs in proptest::collection::vec(-5.0f64..5.0, 12),
            keep in 1usize..2,
        ) {
            let w = poly(2.0);
            let full: Vec<_> = xs.iter().zip(&fs).map(|(&x, &f)| (vec![x], f)).collect();
            let part = full[..full.len() - keep.min(full.len() - 1)].to_vec();
            let nf = weighted_sup_norm(&full, &w).unwrap();
            let np = weighted_sup_norm(&part, &w).unwrap();
            prop_assert!(np <= nf + 1e-15);
        }

        #[test]
        fn polynomial_weight_radially_nondecreasing(
            x in proptest::collection::vec(-5.0f64..5.0, 1..6),
            t1 in 0.0f64..3.0,
            t2 in 0.0f64..3.0,
        ) {
            let w = poly(3.0);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let xl: Vec<f64> = x.iter().map(|v| v * lo).collect();
            let xh: Vec<f64> = x.iter().map(|v| v * hi).collect();
            prop_assert!(w.eval(&xl).unwrap() <= w.eval(&xh).unwrap() + 1e-12);
        }

        #[test]
        fn decay_ratio_nonincreasing_in_radius(
            xs in proptest::collection::vec(-20.0f64..20.0, 1..12),
            fs in proptest::collection::vec(-5.0f64..5.0, 12),
            r1 in 0.5f64..100.0,
            r2 in 0.5f64..100.0,
        ) {
            let w = poly(2.0);
            let cloud: Vec<_> = xs.iter().zip(&fs).map(|(&x, &f)| (vec![x], f)).collect();
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let a = growth_decay_ratio(&cloud, &w, lo).unwrap();
            let b = growth_decay_ratio(&cloud, &w, hi).unwrap();
            prop_assert!(b <= a + 1e-15);
        }
    }
}
