//! Experiment configuration: a TOML document with nested sections for the
//! model, payoff, weight, study, reference policy, grid and flow settings.
//!
//! Validation reports every violation found, each with a path into the
//! document, instead of stopping at the first problem. A validated config
//! resolves into the typed structures the library consumes.

use std::fmt;
use std::sync::Arc;

use sha2::{Digest, Sha256};
use toml::Value;

use crate::error::{Error, Result};
use crate::flows::FlowConfig;
use crate::hjm::{bond_payoff, hjm_weight, make_hjm_model, HjmVol, MaturityGrid};
use crate::models::{gbm, heat_spde, linear_growth_1d, ou, Payoff, SplitModel};
use crate::montecarlo::{EvalMode, ReferencePolicy, StudyPlan};
use crate::splitting::{Branch, OperatorId, SchemeSpec, Substep};
use crate::weighted_space::{WeightFamily, WeightFunction};

/// One named constraint violation with a path into the document.
#[derive(Debug, Clone)]
pub struct ConfigViolation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Ou { theta: f64, mu: f64, sigma: f64 },
    Gbm { mu: f64, sigma: f64 },
    LinearGrowth1d { a: f64, b: f64, c: f64 },
    HeatSpde { modes: usize, noise_amplitudes: Vec<f64> },
    Hjm {
        x_max: f64,
        intervals: usize,
        alpha: f64,
        vols: Vec<HjmVol>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum PayoffSpec {
    Moment1 { coordinate: usize },
    Moment2 { coordinate: usize },
    Poly { coordinate: usize, coefficients: Vec<f64> },
    Bond { tau: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightSpec {
    Polynomial { s: f64, level: usize },
    Cosh { beta: f64 },
    GaussExp { eta: f64 },
    /// `(1 + ‖h‖²_{H_α})^{s/2}` on curve states; hjm model only.
    Hjm { s: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum SchemeChoice {
    Euler,
    Nv,
    Custom(usize),
}

#[derive(Debug, Clone)]
pub struct StudySpec {
    pub schemes: Vec<SchemeChoice>,
    pub custom_schemes: Vec<SchemeSpec>,
    pub t: f64,
    pub step_counts: Vec<usize>,
    pub npaths: usize,
    pub evaluation: EvalMode,
    pub resolution_factor: f64,
    pub antithetic_branch: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSpec {
    pub fine_nv: bool,
    pub factor: usize,
    pub npaths_factor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GridSpec {
    Points(Vec<Vec<f64>>),
    CoordinateRange {
        coordinate: usize,
        from: f64,
        to: f64,
        count: usize,
    },
    /// Flat curves at the given levels (hjm model only).
    FlatCurves { levels: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct SupermartingaleSpec {
    pub timepoints: Vec<f64>,
    pub npaths: usize,
    pub nsteps: usize,
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSpec,
    pub payoff: PayoffSpec,
    pub weight: WeightSpec,
    pub study: StudySpec,
    pub reference: ReferenceSpec,
    pub grid: GridSpec,
    pub flow_substeps: usize,
    pub supermartingale: SupermartingaleSpec,
    canonical: String,
}

struct Walker {
    violations: Vec<ConfigViolation>,
}

impl Walker {
    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.violations.push(ConfigViolation {
            path: path.into(),
            message: message.into(),
        });
    }

    fn check_keys(&mut self, table: &toml::map::Map<String, Value>, path: &str, known: &[&str]) {
        for key in table.keys() {
            if !known.contains(&key.as_str()) {
                self.push(
                    format!("{path}{key}"),
                    format!("unknown key (expected one of: {})", known.join(", ")),
                );
            }
        }
    }

    fn table<'a>(
        &mut self,
        root: &'a toml::map::Map<String, Value>,
        key: &str,
    ) -> Option<&'a toml::map::Map<String, Value>> {
        match root.get(key) {
            Some(Value::Table(t)) => Some(t),
            Some(_) => {
                self.push(key, "must be a table");
                None
            }
            None => None,
        }
    }

    fn f64(&mut self, t: &toml::map::Map<String, Value>, path: &str, key: &str) -> Option<f64> {
        match t.get(key) {
            Some(Value::Float(v)) => Some(*v),
            Some(Value::Integer(v)) => Some(*v as f64),
            Some(_) => {
                self.push(format!("{path}.{key}"), "must be a number");
                None
            }
            None => None,
        }
    }

    fn require_f64(
        &mut self,
        t: &toml::map::Map<String, Value>,
        path: &str,
        key: &str,
    ) -> Option<f64> {
        let v = self.f64(t, path, key);
        if v.is_none() && !t.contains_key(key) {
            self.push(format!("{path}.{key}"), "missing required key");
        }
        v
    }

    fn usize(&mut self, t: &toml::map::Map<String, Value>, path: &str, key: &str) -> Option<usize> {
        match t.get(key) {
            Some(Value::Integer(v)) if *v >= 0 => Some(*v as usize),
            Some(Value::Integer(_)) => {
                self.push(format!("{path}.{key}"), "must be nonnegative");
                None
            }
            Some(_) => {
                self.push(format!("{path}.{key}"), "must be an integer");
                None
            }
            None => None,
        }
    }

    fn string(
        &mut self,
        t: &toml::map::Map<String, Value>,
        path: &str,
        key: &str,
    ) -> Option<String> {
        match t.get(key) {
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => {
                self.push(format!("{path}.{key}"), "must be a string");
                None
            }
            None => None,
        }
    }

    fn bool(&mut self, t: &toml::map::Map<String, Value>, path: &str, key: &str) -> Option<bool> {
        match t.get(key) {
            Some(Value::Boolean(b)) => Some(*b),
            Some(_) => {
                self.push(format!("{path}.{key}"), "must be a boolean");
                None
            }
            None => None,
        }
    }

    fn f64_array(
        &mut self,
        t: &toml::map::Map<String, Value>,
        path: &str,
        key: &str,
    ) -> Option<Vec<f64>> {
        match t.get(key) {
            Some(Value::Array(a)) => {
                let mut out = Vec::with_capacity(a.len());
                for (i, v) in a.iter().enumerate() {
                    match v {
                        Value::Float(f) => out.push(*f),
                        Value::Integer(n) => out.push(*n as f64),
                        _ => {
                            self.push(format!("{path}.{key}[{i}]"), "must be a number");
                            return None;
                        }
                    }
                }
                Some(out)
            }
            Some(_) => {
                self.push(format!("{path}.{key}"), "must be an array of numbers");
                None
            }
            None => None,
        }
    }

    fn usize_array(
        &mut self,
        t: &toml::map::Map<String, Value>,
        path: &str,
        key: &str,
    ) -> Option<Vec<usize>> {
        match t.get(key) {
            Some(Value::Array(a)) => {
                let mut out = Vec::with_capacity(a.len());
                for (i, v) in a.iter().enumerate() {
                    match v {
                        Value::Integer(n) if *n > 0 => out.push(*n as usize),
                        _ => {
                            self.push(
                                format!("{path}.{key}[{i}]"),
                                "must be a positive integer",
                            );
                            return None;
                        }
                    }
                }
                Some(out)
            }
            Some(_) => {
                self.push(format!("{path}.{key}"), "must be an array of integers");
                None
            }
            None => None,
        }
    }
}

fn canonical_hash_input(value: &Value) -> String {
    // Route through serde_json: its maps sort keys, so the digest is stable
    // under key reordering of the TOML document.
    serde_json::to_string(&serde_json::to_value(value).expect("toml converts to json"))
        .expect("json serializes")
}

/// Parse and validate a configuration document, returning either the fully
/// resolved config or every violation found.
pub fn validate_config(text: &str) -> std::result::Result<ExperimentConfig, Vec<ConfigViolation>> {
    let value: Value = match text.parse() {
        Ok(v) => v,
        Err(e) => {
            return Err(vec![ConfigViolation {
                path: "<document>".into(),
                message: format!("TOML parse error: {e}"),
            }])
        }
    };
    let Value::Table(root) = &value else {
        return Err(vec![ConfigViolation {
            path: "<document>".into(),
            message: "document root must be a table".into(),
        }]);
    };
    let mut w = Walker {
        violations: Vec::new(),
    };
    w.check_keys(
        root,
        "",
        &[
            "seed",
            "model",
            "payoff",
            "weight",
            "study",
            "reference",
            "grid",
            "flow",
            "supermartingale",
        ],
    );

    let seed = match root.get("seed") {
        Some(Value::Integer(v)) if *v >= 0 => *v as u64,
        Some(_) => {
            w.push("seed", "must be a nonnegative integer");
            0
        }
        None => 0,
    };

    let model = parse_model(&mut w, root);
    let payoff = parse_payoff(&mut w, root);
    let weight = parse_weight(&mut w, root);
    let study = parse_study(&mut w, root);
    let reference = parse_reference(&mut w, root);
    let grid = parse_grid(&mut w, root);
    let flow_substeps = parse_flow(&mut w, root);
    let supermartingale = parse_supermartingale(&mut w, root, study.as_ref().map(|s| s.t));

    cross_validate(
        &mut w,
        model.as_ref(),
        payoff.as_ref(),
        weight.as_ref(),
        grid.as_ref(),
    );

    if !w.violations.is_empty() {
        return Err(w.violations);
    }
    Ok(ExperimentConfig {
        seed,
        model: model.expect("validated"),
        payoff: payoff.expect("validated"),
        weight: weight.expect("validated"),
        study: study.expect("validated"),
        reference: reference.expect("validated"),
        grid: grid.expect("validated"),
        flow_substeps,
        supermartingale: supermartingale.expect("validated"),
        canonical: canonical_hash_input(&value),
    })
}

fn parse_model(w: &mut Walker, root: &toml::map::Map<String, Value>) -> Option<ModelSpec> {
    let Some(t) = w.table(root, "model") else {
        w.push("model", "missing required section");
        return None;
    };
    let name = w.string(t, "model", "name").or_else(|| {
        w.push("model.name", "missing required key");
        None
    })?;
    match name.as_str() {
        "ou" => {
            w.check_keys(t, "model.", &["name", "theta", "mu", "sigma"]);
            let theta = w.require_f64(t, "model", "theta")?;
            let mu = w.require_f64(t, "model", "mu")?;
            let sigma = w.require_f64(t, "model", "sigma")?;
            Some(ModelSpec::Ou { theta, mu, sigma })
        }
        "gbm" => {
            w.check_keys(t, "model.", &["name", "mu", "sigma"]);
            let mu = w.require_f64(t, "model", "mu")?;
            let sigma = w.require_f64(t, "model", "sigma")?;
            Some(ModelSpec::Gbm { mu, sigma })
        }
        "linear_growth_1d" => {
            w.check_keys(t, "model.", &["name", "a", "b", "c"]);
            let a = w.require_f64(t, "model", "a")?;
            let b = w.require_f64(t, "model", "b")?;
            let c = w.require_f64(t, "model", "c")?;
            Some(ModelSpec::LinearGrowth1d { a, b, c })
        }
        "heat_spde" => {
            w.check_keys(t, "model.", &["name", "modes", "noise_amplitudes"]);
            let modes = w.usize(t, "model", "modes").or_else(|| {
                w.push("model.modes", "missing required key");
                None
            })?;
            let amps = w.f64_array(t, "model", "noise_amplitudes").or_else(|| {
                w.push("model.noise_amplitudes", "missing required key");
                None
            })?;
            if modes == 0 {
                w.push("model.modes", "must be at least 1");
                return None;
            }
            if amps.is_empty() || amps.len() > modes {
                w.push(
                    "model.noise_amplitudes",
                    format!("length must lie in 1..={modes}"),
                );
                return None;
            }
            Some(ModelSpec::HeatSpde {
                modes,
                noise_amplitudes: amps,
            })
        }
        "hjm" => {
            w.check_keys(
                t,
                "model.",
                &["name", "x_max", "maturity_intervals", "alpha", "vols"],
            );
            let x_max = w.f64(t, "model", "x_max").unwrap_or(20.0);
            let intervals = w.usize(t, "model", "maturity_intervals").unwrap_or(256);
            let alpha = w.f64(t, "model", "alpha").unwrap_or(1.0);
            if x_max <= 0.0 {
                w.push("model.x_max", "must be positive");
            }
            if intervals < 8 {
                w.push("model.maturity_intervals", "must be at least 8");
            }
            if alpha <= 0.0 {
                w.push("model.alpha", "must be positive");
            }
            let mut vols = Vec::new();
            match t.get("vols") {
                Some(Value::Array(arr)) => {
                    for (i, entry) in arr.iter().enumerate() {
                        let path = format!("model.vols[{i}]");
                        let Value::Table(vt) = entry else {
                            w.push(path, "must be a table");
                            continue;
                        };
                        w.check_keys(
                            vt,
                            &format!("model.vols[{i}]."),
                            &["kind", "scale", "decay", "node"],
                        );
                        let kind = w.string(vt, &path, "kind").unwrap_or_default();
                        let scale = w.f64(vt, &path, "scale").unwrap_or(0.5);
                        let decay = w.f64(vt, &path, "decay").unwrap_or(1.0);
                        match kind.as_str() {
                            "exponential" => vols.push(HjmVol::Exponential { scale, decay }),
                            "scalar_gain" => {
                                let node = w.usize(vt, &path, "node").unwrap_or(0);
                                vols.push(HjmVol::ScalarGain { scale, decay, node });
                            }
                            other => w.push(
                                format!("{path}.kind"),
                                format!("unknown vol kind '{other}' (expected exponential or scalar_gain)"),
                            ),
                        }
                    }
                }
                Some(_) => w.push("model.vols", "must be an array of tables"),
                None => {}
            }
            Some(ModelSpec::Hjm {
                x_max,
                intervals,
                alpha,
                vols,
            })
        }
        other => {
            w.push(
                "model.name",
                format!("unknown model '{other}' (expected one of: ou, gbm, linear_growth_1d, heat_spde, hjm)"),
            );
            None
        }
    }
}

fn parse_payoff(w: &mut Walker, root: &toml::map::Map<String, Value>) -> Option<PayoffSpec> {
    let Some(t) = w.table(root, "payoff") else {
        w.push("payoff", "missing required section");
        return None;
    };
    w.check_keys(t, "payoff.", &["kind", "coordinate", "coefficients", "tau"]);
    let kind = w.string(t, "payoff", "kind").or_else(|| {
        w.push("payoff.kind", "missing required key");
        None
    })?;
    match kind.as_str() {
        "moment1" => Some(PayoffSpec::Moment1 {
            coordinate: w.usize(t, "payoff", "coordinate").unwrap_or(0),
        }),
        "moment2" => Some(PayoffSpec::Moment2 {
            coordinate: w.usize(t, "payoff", "coordinate").unwrap_or(0),
        }),
        "poly" => {
            let coordinate = w.usize(t, "payoff", "coordinate").unwrap_or(0);
            let coefficients = w.f64_array(t, "payoff", "coefficients").or_else(|| {
                w.push("payoff.coefficients", "missing required key");
                None
            })?;
            if coefficients.len() > 5 {
                w.push("payoff.coefficients", "polynomial degree is limited to 4");
            }
            Some(PayoffSpec::Poly {
                coordinate,
                coefficients,
            })
        }
        "bond" => {
            let tau = w.require_f64(t, "payoff", "tau")?;
            if tau <= 0.0 {
                w.push("payoff.tau", "must be positive");
            }
            Some(PayoffSpec::Bond { tau })
        }
        other => {
            w.push(
                "payoff.kind",
                format!("unknown payoff '{other}' (expected one of: moment1, moment2, poly, bond)"),
            );
            None
        }
    }
}

fn parse_weight(w: &mut Walker, root: &toml::map::Map<String, Value>) -> Option<WeightSpec> {
    let Some(t) = w.table(root, "weight") else {
        // ψ = (1 + ‖x‖²) is the workhorse default.
        return Some(WeightSpec::Polynomial { s: 2.0, level: 0 });
    };
    w.check_keys(t, "weight.", &["family", "s", "beta", "eta", "level"]);
    let family = w.string(t, "weight", "family").unwrap_or("polynomial".into());
    match family.as_str() {
        "polynomial" => {
            let s = w.f64(t, "weight", "s").unwrap_or(2.0);
            if s < 2.0 {
                w.push("weight.s", "must be at least 2");
            }
            let level = w.usize(t, "weight", "level").unwrap_or(0);
            Some(WeightSpec::Polynomial { s, level })
        }
        "cosh" => {
            let beta = w.f64(t, "weight", "beta").unwrap_or(1.0);
            if beta <= 0.0 {
                w.push("weight.beta", "must be positive");
            }
            Some(WeightSpec::Cosh { beta })
        }
        "gauss_exp" => {
            let eta = w.f64(t, "weight", "eta").unwrap_or(1.0);
            if eta <= 0.0 {
                w.push("weight.eta", "must be positive");
            }
            Some(WeightSpec::GaussExp { eta })
        }
        "hjm" => {
            let s = w.f64(t, "weight", "s").unwrap_or(2.0);
            if s < 2.0 {
                w.push("weight.s", "must be at least 2");
            }
            Some(WeightSpec::Hjm { s })
        }
        other => {
            w.push(
                "weight.family",
                format!("unknown family '{other}' (expected one of: polynomial, cosh, gauss_exp, hjm)"),
            );
            None
        }
    }
}

fn parse_study(w: &mut Walker, root: &toml::map::Map<String, Value>) -> Option<StudySpec> {
    let Some(t) = w.table(root, "study") else {
        w.push("study", "missing required section");
        return None;
    };
    w.check_keys(
        t,
        "study.",
        &[
            "schemes",
            "custom_schemes",
            "t",
            "step_counts",
            "npaths",
            "evaluation",
            "resolution_factor",
            "antithetic_branch",
        ],
    );
    let t_horizon = w.require_f64(t, "study", "t").unwrap_or(1.0);
    if t_horizon <= 0.0 {
        w.push("study.t", "must be positive");
    }
    let step_counts = w.usize_array(t, "study", "step_counts").or_else(|| {
        w.push("study.step_counts", "missing required key");
        None
    })?;
    if !step_counts.windows(2).all(|p| p[0] < p[1]) {
        w.push("study.step_counts", "step counts must be strictly increasing");
    }
    let npaths = w.usize(t, "study", "npaths").unwrap_or(10_000);
    if npaths < 100 {
        w.push("study.npaths", format!("npaths below minimum 100 (got {npaths})"));
    }

    let custom_schemes = parse_custom_schemes(w, t);
    let mut schemes = Vec::new();
    match t.get("schemes") {
        Some(Value::Array(arr)) => {
            for (i, entry) in arr.iter().enumerate() {
                match entry {
                    Value::String(s) => match s.as_str() {
                        "euler" => schemes.push(SchemeChoice::Euler),
                        "nv" => schemes.push(SchemeChoice::Nv),
                        other => {
                            if let Some(idx) =
                                custom_schemes.iter().position(|c| c.name() == other)
                            {
                                schemes.push(SchemeChoice::Custom(idx));
                            } else {
                                w.push(
                                    format!("study.schemes[{i}]"),
                                    format!("unknown scheme '{other}' (expected euler, nv or a custom scheme name)"),
                                );
                            }
                        }
                    },
                    _ => w.push(format!("study.schemes[{i}]"), "must be a string"),
                }
            }
        }
        Some(_) => w.push("study.schemes", "must be an array of strings"),
        None => {
            schemes.push(SchemeChoice::Euler);
            schemes.push(SchemeChoice::Nv);
        }
    }
    if schemes.is_empty() {
        w.push("study.schemes", "must select at least one scheme");
    }

    let evaluation = match w
        .string(t, "study", "evaluation")
        .unwrap_or("auto".into())
        .as_str()
    {
        "auto" => EvalMode::Auto,
        "affine" => EvalMode::Affine,
        "monte-carlo" => EvalMode::MonteCarlo,
        other => {
            w.push(
                "study.evaluation",
                format!("unknown mode '{other}' (expected auto, affine or monte-carlo)"),
            );
            EvalMode::Auto
        }
    };
    let resolution_factor = w.f64(t, "study", "resolution_factor").unwrap_or(0.3);
    if resolution_factor <= 0.0 {
        w.push("study.resolution_factor", "must be positive");
    }
    let antithetic_branch = w.bool(t, "study", "antithetic_branch").unwrap_or(false);
    Some(StudySpec {
        schemes,
        custom_schemes,
        t: t_horizon,
        step_counts,
        npaths,
        evaluation,
        resolution_factor,
        antithetic_branch,
    })
}

fn parse_custom_schemes(w: &mut Walker, study: &toml::map::Map<String, Value>) -> Vec<SchemeSpec> {
    let mut out = Vec::new();
    let Some(Value::Array(arr)) = study.get("custom_schemes") else {
        if study.contains_key("custom_schemes") {
            w.push("study.custom_schemes", "must be an array of tables");
        }
        return out;
    };
    for (i, entry) in arr.iter().enumerate() {
        let path = format!("study.custom_schemes[{i}]");
        let Value::Table(ct) = entry else {
            w.push(path, "must be a table");
            continue;
        };
        w.check_keys(ct, &format!("{path}."), &["name", "branches"]);
        let name = w.string(ct, &path, "name").unwrap_or(format!("custom{i}"));
        let Some(Value::Array(branches_raw)) = ct.get("branches") else {
            w.push(format!("{path}.branches"), "missing required key");
            continue;
        };
        let mut branches = Vec::new();
        for (b, braw) in branches_raw.iter().enumerate() {
            let bpath = format!("{path}.branches[{b}]");
            let Value::Table(bt) = braw else {
                w.push(bpath, "must be a table");
                continue;
            };
            w.check_keys(bt, &format!("{bpath}."), &["weight", "substeps"]);
            let weight = w.require_f64(bt, &bpath, "weight").unwrap_or(0.0);
            let mut substeps = Vec::new();
            match bt.get("substeps") {
                Some(Value::Array(subs)) => {
                    for (s, sraw) in subs.iter().enumerate() {
                        let spath = format!("{bpath}.substeps[{s}]");
                        let Value::Table(st) = sraw else {
                            w.push(spath, "must be a table");
                            continue;
                        };
                        w.check_keys(st, &format!("{spath}."), &["op", "index", "fraction"]);
                        let op = w.string(st, &spath, "op").unwrap_or_default();
                        let fraction = w.f64(st, &spath, "fraction").unwrap_or(1.0);
                        match op.as_str() {
                            "drift" => substeps.push(Substep {
                                op: OperatorId::Drift,
                                fraction,
                            }),
                            "diffusion" => {
                                // 1-based in the document, 0-based internally.
                                let index = w.usize(st, &spath, "index").unwrap_or(1);
                                if index == 0 {
                                    w.push(format!("{spath}.index"), "diffusion indices are 1-based");
                                } else {
                                    substeps.push(Substep {
                                        op: OperatorId::Diffusion(index - 1),
                                        fraction,
                                    });
                                }
                            }
                            other => w.push(
                                format!("{spath}.op"),
                                format!("unknown operator '{other}' (expected drift or diffusion)"),
                            ),
                        }
                    }
                }
                _ => w.push(format!("{bpath}.substeps"), "missing required key"),
            }
            branches.push(Branch { weight, substeps });
        }
        match SchemeSpec::custom(name, branches) {
            Ok(s) => out.push(s),
            Err(e) => w.push(path, e.to_string()),
        }
    }
    out
}

fn parse_reference(w: &mut Walker, root: &toml::map::Map<String, Value>) -> Option<ReferenceSpec> {
    let Some(t) = w.table(root, "reference") else {
        return Some(ReferenceSpec {
            fine_nv: false,
            factor: 8,
            npaths_factor: 10,
        });
    };
    w.check_keys(t, "reference.", &["policy", "factor", "npaths_factor"]);
    let policy = w.string(t, "reference", "policy").unwrap_or("exact".into());
    let fine_nv = match policy.as_str() {
        "exact" => false,
        "fine-nv" => true,
        other => {
            w.push(
                "reference.policy",
                format!("unknown policy '{other}' (expected exact or fine-nv)"),
            );
            false
        }
    };
    let factor = w.usize(t, "reference", "factor").unwrap_or(8);
    if factor < 2 {
        w.push("reference.factor", "must be at least 2");
    }
    let npaths_factor = w.usize(t, "reference", "npaths_factor").unwrap_or(10);
    if npaths_factor == 0 {
        w.push("reference.npaths_factor", "must be at least 1");
    }
    Some(ReferenceSpec {
        fine_nv,
        factor,
        npaths_factor,
    })
}

fn parse_grid(w: &mut Walker, root: &toml::map::Map<String, Value>) -> Option<GridSpec> {
    let Some(t) = w.table(root, "grid") else {
        w.push("grid", "missing required section");
        return None;
    };
    w.check_keys(
        t,
        "grid.",
        &["kind", "coordinate", "from", "to", "count", "points", "levels"],
    );
    let kind = w.string(t, "grid", "kind").unwrap_or("coordinate_range".into());
    match kind.as_str() {
        "points" => match t.get("points") {
            Some(Value::Array(arr)) => {
                let mut points = Vec::new();
                for (i, p) in arr.iter().enumerate() {
                    match p {
                        Value::Array(coords) => {
                            let mut v = Vec::with_capacity(coords.len());
                            for c in coords {
                                match c {
                                    Value::Float(f) => v.push(*f),
                                    Value::Integer(n) => v.push(*n as f64),
                                    _ => {
                                        w.push(
                                            format!("grid.points[{i}]"),
                                            "must contain numbers",
                                        );
                                        break;
                                    }
                                }
                            }
                            points.push(v);
                        }
                        _ => w.push(format!("grid.points[{i}]"), "must be an array"),
                    }
                }
                if points.is_empty() {
                    w.push("grid.points", "grid must be nonempty");
                }
                Some(GridSpec::Points(points))
            }
            _ => {
                w.push("grid.points", "missing required key");
                None
            }
        },
        "coordinate_range" => {
            let coordinate = w.usize(t, "grid", "coordinate").unwrap_or(0);
            let from = w.require_f64(t, "grid", "from")?;
            let to = w.require_f64(t, "grid", "to")?;
            let count = w.usize(t, "grid", "count").unwrap_or(9);
            if count == 0 {
                w.push("grid.count", "grid must be nonempty");
            }
            if to < from {
                w.push("grid.to", "range end must not precede the start");
            }
            Some(GridSpec::CoordinateRange {
                coordinate,
                from,
                to,
                count,
            })
        }
        "flat_curves" => {
            let levels = w.f64_array(t, "grid", "levels").or_else(|| {
                w.push("grid.levels", "missing required key");
                None
            })?;
            if levels.is_empty() {
                w.push("grid.levels", "grid must be nonempty");
            }
            Some(GridSpec::FlatCurves { levels })
        }
        other => {
            w.push(
                "grid.kind",
                format!("unknown grid kind '{other}' (expected points, coordinate_range or flat_curves)"),
            );
            None
        }
    }
}

fn parse_flow(w: &mut Walker, root: &toml::map::Map<String, Value>) -> usize {
    let Some(t) = w.table(root, "flow") else {
        return 4;
    };
    w.check_keys(t, "flow.", &["substeps"]);
    let substeps = w.usize(t, "flow", "substeps").unwrap_or(4);
    if substeps == 0 {
        w.push("flow.substeps", "must be at least 1");
    }
    substeps
}

fn parse_supermartingale(
    w: &mut Walker,
    root: &toml::map::Map<String, Value>,
    horizon: Option<f64>,
) -> Option<SupermartingaleSpec> {
    let defaults = SupermartingaleSpec {
        timepoints: vec![0.1, 0.5, 1.0],
        npaths: 20_000,
        nsteps: 64,
    };
    let Some(t) = w.table(root, "supermartingale") else {
        return Some(defaults);
    };
    w.check_keys(t, "supermartingale.", &["timepoints", "npaths", "nsteps"]);
    let timepoints = w
        .f64_array(t, "supermartingale", "timepoints")
        .unwrap_or(defaults.timepoints);
    if let Some(h) = horizon {
        for (i, tp) in timepoints.iter().enumerate() {
            if *tp <= 0.0 || *tp > h {
                w.push(
                    format!("supermartingale.timepoints[{i}]"),
                    format!("must lie in (0, {h}]"),
                );
            }
        }
    }
    let npaths = w.usize(t, "supermartingale", "npaths").unwrap_or(defaults.npaths);
    if npaths < 100 {
        w.push("supermartingale.npaths", "npaths below minimum 100");
    }
    let nsteps = w.usize(t, "supermartingale", "nsteps").unwrap_or(defaults.nsteps);
    if nsteps == 0 {
        w.push("supermartingale.nsteps", "must be at least 1");
    }
    Some(SupermartingaleSpec {
        timepoints,
        npaths,
        nsteps,
    })
}

fn cross_validate(
    w: &mut Walker,
    model: Option<&ModelSpec>,
    payoff: Option<&PayoffSpec>,
    weight: Option<&WeightSpec>,
    grid: Option<&GridSpec>,
) {
    let Some(model) = model else { return };
    let dim = match model {
        ModelSpec::Ou { .. } | ModelSpec::Gbm { .. } | ModelSpec::LinearGrowth1d { .. } => 1,
        ModelSpec::HeatSpde { modes, .. } => *modes,
        ModelSpec::Hjm { intervals, .. } => intervals + 1,
    };
    let is_hjm = matches!(model, ModelSpec::Hjm { .. });
    if let Some(payoff) = payoff {
        let coord = match payoff {
            PayoffSpec::Moment1 { coordinate }
            | PayoffSpec::Moment2 { coordinate }
            | PayoffSpec::Poly { coordinate, .. } => Some(*coordinate),
            PayoffSpec::Bond { tau } => {
                if let ModelSpec::Hjm { x_max, .. } = model {
                    if *tau > *x_max {
                        w.push("payoff.tau", format!("must not exceed x_max = {x_max}"));
                    }
                } else {
                    w.push("payoff.kind", "bond payoff requires the hjm model");
                }
                None
            }
        };
        if let Some(c) = coord {
            if c >= dim {
                w.push(
                    "payoff.coordinate",
                    format!("coordinate {c} out of range for model dimension {dim}"),
                );
            }
        }
    }
    if let Some(WeightSpec::Hjm { .. }) = weight {
        if !is_hjm {
            w.push("weight.family", "the hjm weight requires the hjm model");
        }
    }
    if let Some(WeightSpec::Polynomial { level, .. }) = weight {
        if *level > 0 && is_hjm {
            w.push(
                "weight.level",
                "sobolev levels require a diagonal spectrum; the hjm model has none",
            );
        }
    }
    if let Some(grid) = grid {
        match grid {
            GridSpec::Points(points) => {
                for (i, p) in points.iter().enumerate() {
                    if p.len() != dim {
                        w.push(
                            format!("grid.points[{i}]"),
                            format!("has {} coordinates, model dimension is {dim}", p.len()),
                        );
                    }
                }
            }
            GridSpec::CoordinateRange { coordinate, .. } => {
                if *coordinate >= dim {
                    w.push(
                        "grid.coordinate",
                        format!("coordinate {coordinate} out of range for model dimension {dim}"),
                    );
                }
            }
            GridSpec::FlatCurves { .. } => {
                if !is_hjm {
                    w.push("grid.kind", "flat_curves grids require the hjm model");
                }
            }
        }
    }
}

impl ExperimentConfig {
    /// SHA-256 of the canonicalised document; stable under key reordering.
    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn model_dim(&self) -> usize {
        match &self.model {
            ModelSpec::Ou { .. } | ModelSpec::Gbm { .. } | ModelSpec::LinearGrowth1d { .. } => 1,
            ModelSpec::HeatSpde { modes, .. } => *modes,
            ModelSpec::Hjm { intervals, .. } => intervals + 1,
        }
    }

    pub fn build_model(&self) -> Result<SplitModel> {
        match &self.model {
            ModelSpec::Ou { theta, mu, sigma } => ou(*theta, *mu, *sigma),
            ModelSpec::Gbm { mu, sigma } => gbm(*mu, *sigma),
            ModelSpec::LinearGrowth1d { a, b, c } => linear_growth_1d(*a, *b, *c),
            ModelSpec::HeatSpde {
                modes,
                noise_amplitudes,
            } => heat_spde(*modes, noise_amplitudes.clone()),
            ModelSpec::Hjm {
                x_max,
                intervals,
                alpha,
                vols,
            } => {
                let grid = MaturityGrid::new(*x_max, *intervals)?;
                make_hjm_model(grid, *alpha, vols)
            }
        }
    }

    pub fn maturity_grid(&self) -> Option<MaturityGrid> {
        match &self.model {
            ModelSpec::Hjm {
                x_max, intervals, ..
            } => MaturityGrid::new(*x_max, *intervals).ok(),
            _ => None,
        }
    }

    pub fn build_payoff(&self) -> Result<Payoff> {
        match &self.payoff {
            PayoffSpec::Moment1 { coordinate } => Ok(Payoff::Moment1 {
                coordinate: *coordinate,
            }),
            PayoffSpec::Moment2 { coordinate } => Ok(Payoff::Moment2 {
                coordinate: *coordinate,
            }),
            PayoffSpec::Poly {
                coordinate,
                coefficients,
            } => Payoff::poly(*coordinate, coefficients.clone()),
            PayoffSpec::Bond { tau } => {
                let grid = self.maturity_grid().ok_or_else(|| {
                    Error::Config("bond payoff requires the hjm model".into())
                })?;
                bond_payoff(grid, *tau)
            }
        }
    }

    pub fn build_weight(&self, model: &SplitModel) -> Result<WeightFunction> {
        match &self.weight {
            WeightSpec::Polynomial { s, level } => {
                if *level == 0 {
                    WeightFunction::new(WeightFamily::Polynomial { s: *s })
                } else {
                    let spectrum = model.spectrum().ok_or_else(|| {
                        Error::Config(
                            "sobolev levels require a model with a diagonal spectrum".into(),
                        )
                    })?;
                    WeightFunction::with_level(
                        WeightFamily::Polynomial { s: *s },
                        *level,
                        spectrum.to_vec(),
                    )
                }
            }
            WeightSpec::Cosh { beta } => WeightFunction::new(WeightFamily::Cosh { beta: *beta }),
            WeightSpec::GaussExp { eta } => {
                WeightFunction::new(WeightFamily::GaussExp { eta: *eta })
            }
            WeightSpec::Hjm { s } => {
                let grid = self.maturity_grid().ok_or_else(|| {
                    Error::Config("the hjm weight requires the hjm model".into())
                })?;
                let alpha = match &self.model {
                    ModelSpec::Hjm { alpha, .. } => *alpha,
                    _ => unreachable!("guarded above"),
                };
                hjm_weight(grid, alpha, *s)
            }
        }
    }

    pub fn build_grid(&self) -> Result<Vec<Vec<f64>>> {
        let dim = self.model_dim();
        match &self.grid {
            GridSpec::Points(points) => Ok(points.clone()),
            GridSpec::CoordinateRange {
                coordinate,
                from,
                to,
                count,
            } => {
                let mut out = Vec::with_capacity(*count);
                for i in 0..*count {
                    let frac = if *count == 1 {
                        0.0
                    } else {
                        i as f64 / (*count as f64 - 1.0)
                    };
                    let mut x = vec![0.0; dim];
                    x[*coordinate] = from + frac * (to - from);
                    out.push(x);
                }
                Ok(out)
            }
            GridSpec::FlatCurves { levels } => Ok(levels
                .iter()
                .map(|level| vec![*level; dim])
                .collect()),
        }
    }

    pub fn build_schemes(&self, model: &SplitModel) -> Result<Vec<SchemeSpec>> {
        let mut out = Vec::new();
        for choice in &self.study.schemes {
            let scheme = match choice {
                SchemeChoice::Euler => SchemeSpec::euler(model.noise_dim()),
                SchemeChoice::Nv => SchemeSpec::ninomiya_victoir(model.noise_dim()),
                SchemeChoice::Custom(idx) => self.study.custom_schemes[*idx].clone(),
            };
            scheme.validate_for(model)?;
            out.push(scheme);
        }
        Ok(out)
    }

    pub fn reference_policy(&self) -> ReferencePolicy {
        if self.reference.fine_nv {
            ReferencePolicy::FineNv {
                factor: self.reference.factor,
                npaths_factor: self.reference.npaths_factor,
            }
        } else {
            ReferencePolicy::ExactOracle
        }
    }

    /// Assemble the full study plan for the convergence command.
    pub fn to_study_plan(&self) -> Result<StudyPlan> {
        let model = self.build_model()?;
        let payoff = self.build_payoff()?;
        let weight = self.build_weight(&model)?;
        let grid = self.build_grid()?;
        let schemes = self.build_schemes(&model)?;
        Ok(StudyPlan {
            model,
            schemes,
            payoff,
            weight,
            t: self.study.t,
            step_counts: self.study.step_counts.clone(),
            npaths: self.study.npaths,
            grid,
            seed: self.seed,
            flow: FlowConfig::new(self.flow_substeps)?,
            reference: self.reference_policy(),
            evaluation: self.study.evaluation,
            resolution_factor: self.study.resolution_factor,
        })
    }
}

/// Custom-payoff registration hook used by the demo commands.
pub fn custom_payoff(id: &str, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Payoff {
    Payoff::Custom {
        id: id.into(),
        f: Arc::new(f),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL_OU: &str = r#"
seed = 42
[model]
name = "ou"
theta = 1.0
mu = 0.0
sigma = 0.5
[payoff]
kind = "moment2"
coordinate = 0
[study]
t = 1.0
step_counts = [8, 16, 32, 64, 128]
npaths = 1000
[grid]
kind = "coordinate_range"
from = -4.0
to = 4.0
count = 9
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = validate_config(MINIMAL_OU).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.flow_substeps, 4);
        assert!(!cfg.reference.fine_nv);
        assert_eq!(cfg.study.schemes.len(), 2);
        assert!(matches!(cfg.weight, WeightSpec::Polynomial { .. }));
        let plan = cfg.to_study_plan().unwrap();
        assert_eq!(plan.grid.len(), 9);
        assert_eq!(plan.schemes[0].name(), "euler");
    }

    #[test]
    fn npaths_minimum_reported() {
        let text = MINIMAL_OU.replace("npaths = 1000", "npaths = 10");
        let errs = validate_config(&text).unwrap_err();
        assert!(errs
            .iter()
            .any(|v| v.path == "study.npaths" && v.message.contains("below minimum 100")));
    }

    #[test]
    fn decreasing_step_counts_reported() {
        let text = MINIMAL_OU.replace("[8, 16, 32, 64, 128]", "[64, 32]");
        let errs = validate_config(&text).unwrap_err();
        assert!(errs
            .iter()
            .any(|v| v.message.contains("strictly increasing")));
    }

    #[test]
    fn all_violations_collected() {
        let text = MINIMAL_OU
            .replace("npaths = 1000", "npaths = 10")
            .replace("[8, 16, 32, 64, 128]", "[64, 32]")
            .replace("kind = \"moment2\"", "kind = \"nope\"");
        let errs = validate_config(&text).unwrap_err();
        assert!(errs.len() >= 3, "got {errs:?}");
    }

    #[test]
    fn unknown_keys_reported_with_path() {
        let text = format!("{MINIMAL_OU}\n[flow]\nsubsteps = 4\nturbo = true\n");
        let errs = validate_config(&text).unwrap_err();
        assert!(errs.iter().any(|v| v.path == "flow.turbo"));
    }

    #[test]
    fn config_hash_stable_under_key_reordering() {
        let a = validate_config(MINIMAL_OU).unwrap();
        let reordered = r#"
seed = 42
[grid]
count = 9
to = 4.0
from = -4.0
kind = "coordinate_range"
[study]
npaths = 1000
step_counts = [8, 16, 32, 64, 128]
t = 1.0
[payoff]
coordinate = 0
kind = "moment2"
[model]
sigma = 0.5
mu = 0.0
theta = 1.0
name = "ou"
"#;
        let b = validate_config(reordered).unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        let c = validate_config(&MINIMAL_OU.replace("seed = 42", "seed = 43")).unwrap();
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn hjm_config_resolves() {
        let text = r#"
seed = 7
[model]
name = "hjm"
x_max = 4.0
maturity_intervals = 16
alpha = 1.0
[[model.vols]]
kind = "exponential"
scale = 0.5
decay = 1.0
[payoff]
kind = "bond"
tau = 1.0
[weight]
family = "hjm"
s = 2.0
[study]
t = 0.5
step_counts = [2, 4, 8, 16]
npaths = 200
evaluation = "monte-carlo"
[reference]
policy = "fine-nv"
factor = 8
[grid]
kind = "flat_curves"
levels = [0.02, 0.05]
"#;
        let cfg = validate_config(text).unwrap();
        let plan = cfg.to_study_plan().unwrap();
        assert_eq!(plan.model.dim(), 17);
        assert_eq!(plan.grid.len(), 2);
        assert_eq!(plan.grid[0], vec![0.02; 17]);
    }

    #[test]
    fn custom_scheme_parses_and_validates() {
        let text = r#"
[model]
name = "gbm"
mu = 0.1
sigma = 0.2
[payoff]
kind = "moment1"
[study]
t = 1.0
step_counts = [4, 8, 16]
npaths = 500
schemes = ["lie"]
[[study.custom_schemes]]
name = "lie"
[[study.custom_schemes.branches]]
weight = 1.0
substeps = [
  { op = "diffusion", index = 1, fraction = 1.0 },
  { op = "drift", fraction = 1.0 },
]
[grid]
kind = "coordinate_range"
from = 0.5
to = 2.0
count = 4
"#;
        let cfg = validate_config(text).unwrap();
        let model = cfg.build_model().unwrap();
        let schemes = cfg.build_schemes(&model).unwrap();
        assert_eq!(schemes.len(), 1);
        assert_eq!(schemes[0].name(), "lie");
        assert_eq!(
            schemes[0].branches()[0].substeps[0].op,
            OperatorId::Diffusion(0)
        );
    }

    #[test]
    fn bond_payoff_on_non_hjm_model_rejected() {
        let text = MINIMAL_OU.replace(
            "kind = \"moment2\"\ncoordinate = 0",
            "kind = \"bond\"\ntau = 1.0",
        );
        let errs = validate_config(&text).unwrap_err();
        assert!(errs.iter().any(|v| v.message.contains("hjm")));
    }
}
