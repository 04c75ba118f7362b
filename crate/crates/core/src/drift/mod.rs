//! Drift fields `b(t, x, u)` that see the law only through the density value
//! `u` at the current point, with their declared hypotheses (sup bound,
//! Lipschitz constant in `u`, continuity in `(t, u)`) and sweeps that check
//! the checkable ones.

mod expr;

pub use expr::Expr;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{domain, Error, Result};

/// Default cap applied to density values before they reach a drift.
pub const DEFAULT_U_CAP: f64 = 1e6;

type Evaluator = dyn Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync;

/// Names accepted by [`catalog`].
pub const CATALOG: &[&str] = &[
    "zero",
    "constant",
    "tanh_density",
    "saturated_linear",
    "time_ramp",
    "indicator_tanh",
];

#[derive(Clone)]
pub struct DriftSpec {
    name: String,
    dim: usize,
    evaluator: Arc<Evaluator>,
    bound: f64,
    lipschitz_u: Option<f64>,
    continuity_declared: bool,
    lipschitz_x: bool,
    u_cap: f64,
}

impl fmt::Debug for DriftSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriftSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("bound", &self.bound)
            .field("lipschitz_u", &self.lipschitz_u)
            .field("continuity_declared", &self.continuity_declared)
            .field("lipschitz_x", &self.lipschitz_x)
            .field("u_cap", &self.u_cap)
            .finish()
    }
}

impl DriftSpec {
    /// A drift from a host function writing `b(t, x, u)` into its last
    /// argument. Continuity in `(t, u)` is not declared by default.
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        bound: f64,
        evaluator: impl Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return domain(format!("drift dimension must be 1..=3, got {dim}"));
        }
        if !(bound >= 0.0) || !bound.is_finite() {
            return domain(format!("declared sup bound must be finite and >= 0, got {bound}"));
        }
        Ok(Self {
            name: name.into(),
            dim,
            evaluator: Arc::new(evaluator),
            bound,
            lipschitz_u: None,
            continuity_declared: false,
            lipschitz_x: true,
            u_cap: DEFAULT_U_CAP,
        })
    }

    pub fn with_lipschitz_u(mut self, c: f64) -> Result<Self> {
        if !(c >= 0.0) || !c.is_finite() {
            return domain(format!("Lipschitz constant must be finite and >= 0, got {c}"));
        }
        self.lipschitz_u = Some(c);
        Ok(self)
    }

    pub fn with_continuity_declared(mut self, declared: bool) -> Self {
        self.continuity_declared = declared;
        self
    }

    /// Marks the drift as discontinuous (or merely measurable) in `x`.
    /// Such drifts are excluded from refinement-order claims.
    pub fn with_x_discontinuity(mut self) -> Self {
        self.lipschitz_x = false;
        self
    }

    pub fn with_u_cap(mut self, cap: f64) -> Result<Self> {
        if !(cap > 0.0) {
            return domain(format!("density cap must be > 0, got {cap}"));
        }
        self.u_cap = cap;
        Ok(self)
    }

    /// Drift given componentwise by expressions in `t`, `x1..`, `u` and the
    /// parameters. Missing trailing components are zero.
    pub fn from_expressions(
        components: &[String],
        dim: usize,
        params: &BTreeMap<String, f64>,
        bound: f64,
        lipschitz_u: Option<f64>,
    ) -> Result<Self> {
        if components.is_empty() || components.len() > dim {
            return domain(format!(
                "expected 1..={dim} drift component expressions, got {}",
                components.len()
            ));
        }
        let exprs = components
            .iter()
            .map(|c| Expr::parse(c, dim, params))
            .collect::<Result<Vec<_>>>()?;
        let name = format!("expr[{}]", components.join("; "));
        let jumps = components.iter().any(|c| c.contains("sign") || c.contains("step"));
        let mut spec = Self::new(name, dim, bound, move |t, x, u, out| {
            out.iter_mut().for_each(|o| *o = 0.0);
            for (o, e) in out.iter_mut().zip(&exprs) {
                *o = e.eval(t, x, u);
            }
        })?;
        if jumps {
            spec = spec.with_x_discontinuity();
        }
        match lipschitz_u {
            Some(c) => spec.with_lipschitz_u(c),
            None => Ok(spec),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn lipschitz_u(&self) -> Option<f64> {
        self.lipschitz_u
    }

    pub fn continuity_declared(&self) -> bool {
        self.continuity_declared
    }

    pub fn lipschitz_x(&self) -> bool {
        self.lipschitz_x
    }

    /// Lipschitz in `x` and `u`: the drifts for which convergence studies
    /// against the Fokker-Planck reference are certified.
    pub fn is_lipschitz(&self) -> bool {
        self.lipschitz_x && self.lipschitz_u.is_some()
    }

    pub fn u_cap(&self) -> f64 {
        self.u_cap
    }

    fn eval_raw(&self, t: f64, x: &[f64], u: f64, out: &mut [f64]) {
        (self.evaluator)(t, x, u.clamp(0.0, self.u_cap), out)
    }

    /// `b(t, x, u)` with `u` clamped to `[0, u_cap]`. Debug builds check the
    /// declared bound on every call.
    pub fn eval_into(&self, t: f64, x: &[f64], u: f64, out: &mut [f64]) {
        self.eval_raw(t, x, u, out);
        debug_assert!(
            norm(out) <= self.bound * (1.0 + 1e-12) + 1e-300,
            "drift `{}` exceeded its declared bound {} at t={t}, x={x:?}, u={u}: {out:?}",
            self.name,
            self.bound
        );
    }

    pub fn eval(&self, t: f64, x: &[f64], u: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, x, u, &mut out);
        out
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

fn param(params: &BTreeMap<String, f64>, key: &str, default: f64) -> Result<f64> {
    let v = params.get(key).copied().unwrap_or(default);
    if !v.is_finite() {
        return domain(format!("parameter `{key}` must be finite, got {v}"));
    }
    Ok(v)
}

/// Built-in drifts. Parameters (all optional): `c` amplitude along `e1`
/// (default 1); `constant` also reads `c2`, `c3`; `saturated_linear` reads
/// `u_max` (default 1); `time_ramp` reads `horizon` (default 1).
pub fn catalog(name: &str, dim: usize, params: &BTreeMap<String, f64>) -> Result<DriftSpec> {
    let c = param(params, "c", 1.0)?;
    let spec = match name {
        "zero" => DriftSpec::new("zero", dim, 0.0, |_, _, _, out| out.fill(0.0))?.with_lipschitz_u(0.0)?,
        "constant" => {
            let mut v = vec![c];
            for k in 2..=dim {
                v.push(param(params, &format!("c{k}"), 0.0)?);
            }
            let bound = norm(&v);
            DriftSpec::new("constant", dim, bound, move |_, _, _, out| out.copy_from_slice(&v))?
                .with_lipschitz_u(0.0)?
        }
        "tanh_density" => DriftSpec::new("tanh_density", dim, c.abs(), move |_, _, u, out| {
            out.fill(0.0);
            out[0] = c * u.tanh();
        })?
        .with_lipschitz_u(c.abs())?,
        "saturated_linear" => {
            let u_max = param(params, "u_max", 1.0)?;
            if !(u_max > 0.0) {
                return domain(format!("u_max must be > 0, got {u_max}"));
            }
            DriftSpec::new("saturated_linear", dim, c.abs() * u_max, move |_, _, u, out| {
                out.fill(0.0);
                out[0] = c * u.min(u_max);
            })?
            .with_lipschitz_u(c.abs())?
        }
        "time_ramp" => {
            let horizon = param(params, "horizon", 1.0)?;
            if !(horizon > 0.0) {
                return domain(format!("horizon must be > 0, got {horizon}"));
            }
            DriftSpec::new("time_ramp", dim, c.abs() * horizon, move |t, _, u, out| {
                out.fill(0.0);
                out[0] = c * t.clamp(0.0, horizon) * u.tanh();
            })?
            .with_lipschitz_u(c.abs() * horizon)?
        }
        "indicator_tanh" => DriftSpec::new("indicator_tanh", dim, c.abs(), move |_, x, u, out| {
            out.fill(0.0);
            if x[0] > 0.0 {
                out[0] = c * u.tanh();
            }
        })?
        .with_lipschitz_u(c.abs())?
        .with_x_discontinuity(),
        _ => {
            return Err(Error::UnknownDrift {
                name: name.to_string(),
                available: CATALOG.iter().map(|s| s.to_string()).collect(),
            })
        }
    };
    Ok(spec.with_continuity_declared(true))
}

/// Box of `(t, x, u)` values swept by the validators.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRanges {
    pub t: (f64, f64),
    pub x_lower: Vec<f64>,
    pub x_upper: Vec<f64>,
    pub u: (f64, f64),
}

impl SweepRanges {
    pub fn new(t: (f64, f64), x_lower: Vec<f64>, x_upper: Vec<f64>, u: (f64, f64)) -> Result<Self> {
        if x_lower.len() != x_upper.len() || x_lower.is_empty() {
            return domain("sweep box bounds disagree in dimension");
        }
        if !(t.0 <= t.1 && u.0 <= u.1 && u.0 >= 0.0) {
            return domain("sweep ranges must be ordered, with u >= 0");
        }
        Ok(Self {
            t,
            x_lower,
            x_upper,
            u,
        })
    }

    fn point(&self, unit: &[f64]) -> (f64, Vec<f64>, f64) {
        let lerp = |(a, b): (f64, f64), s: f64| a + (b - a) * s;
        let t = lerp(self.t, unit[0]);
        let x = self
            .x_lower
            .iter()
            .zip(&self.x_upper)
            .enumerate()
            .map(|(k, (a, b))| lerp((*a, *b), unit[1 + k]))
            .collect();
        let u = lerp(self.u, unit[1 + self.x_lower.len()]);
        (t, x, u)
    }

    /// Quasi-random points: the `u` endpoints at the box center first, then
    /// a Halton sequence.
    fn samples(&self, count: usize) -> impl Iterator<Item = (f64, Vec<f64>, f64)> + '_ {
        let dims = 2 + self.x_lower.len();
        let corners = [0.0, 1.0].into_iter().map(move |ue| {
            let mut unit = vec![0.5; dims];
            unit[dims - 1] = ue;
            unit
        });
        let halton = (1..).map(move |i| (0..dims).map(|k| radical_inverse(i, PRIMES[k])).collect::<Vec<_>>());
        corners.chain(halton).take(count).map(move |unit| self.point(&unit))
    }
}

const PRIMES: [u64; 6] = [2, 3, 5, 7, 11, 13];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut out = 0.0;
    while i > 0 {
        out += (i % base) as f64 * inv;
        i /= base;
        inv /= base as f64;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub declared: f64,
    pub max_norm: f64,
    pub samples: usize,
    pub passed: bool,
    /// Input `(t, x, u)` at which `|b|` was largest.
    pub argmax: (f64, Vec<f64>, f64),
}

fn evaluate_checked(spec: &DriftSpec, t: f64, x: &[f64], u: f64, out: &mut [f64]) -> Result<f64> {
    let caught = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| spec.eval_raw(t, x, u, out)));
    if caught.is_err() {
        return Err(Error::DriftEvaluation {
            t,
            x: x.to_vec(),
            u,
            reason: "evaluator panicked".into(),
        });
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::DriftEvaluation {
            t,
            x: x.to_vec(),
            u,
            reason: format!("non-finite output {out:?}"),
        });
    }
    Ok(norm(out))
}

/// Sweeps `|b|` over `ranges` and compares the maximum with the declared bound.
pub fn validate_bounded(spec: &DriftSpec, ranges: &SweepRanges, sample_count: usize) -> Result<BoundReport> {
    if sample_count == 0 {
        return domain("validation needs at least one sample");
    }
    check_ranges(spec, ranges)?;
    let mut out = vec![0.0; spec.dim];
    let mut best = (0.0f64, (ranges.t.0, ranges.x_lower.clone(), ranges.u.0));
    for (t, x, u) in ranges.samples(sample_count) {
        let n = evaluate_checked(spec, t, &x, u, &mut out)?;
        if n > best.0 {
            best = (n, (t, x, u));
        }
    }
    Ok(BoundReport {
        declared: spec.bound,
        max_norm: best.0,
        samples: sample_count,
        passed: best.0 <= spec.bound * (1.0 + 1e-12),
        argmax: best.1,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzReport {
    pub declared: f64,
    pub max_ratio: f64,
    pub samples: usize,
    pub passed: bool,
    /// `(t, x, u, u')` of the worst pair.
    pub argmax: (f64, Vec<f64>, f64, f64),
}

/// Paired sweep of `|b(t,x,u) - b(t,x,u')| / |u - u'|` against the declared
/// Lipschitz constant. Offsets `u' - u` range over four decades.
pub fn validate_lipschitz_u(spec: &DriftSpec, ranges: &SweepRanges, sample_count: usize) -> Result<LipschitzReport> {
    let declared = spec.lipschitz_u.ok_or_else(|| {
        Error::NotApplicable(format!("drift `{}` declares no Lipschitz constant in u", spec.name))
    })?;
    if sample_count == 0 {
        return domain("validation needs at least one sample");
    }
    check_ranges(spec, ranges)?;
    let span = (ranges.u.1 - ranges.u.0).max(1e-12);
    let mut a = vec![0.0; spec.dim];
    let mut b = vec![0.0; spec.dim];
    let mut best = (0.0f64, (ranges.t.0, ranges.x_lower.clone(), ranges.u.0, ranges.u.0));
    for (i, (t, x, u)) in ranges.samples(sample_count).enumerate() {
        let decade = (i % 4) as i32 + 1;
        let offset = span * 10f64.powi(-decade) * (0.5 + radical_inverse(i as u64 + 1, 17));
        let u2 = u + offset;
        evaluate_checked(spec, t, &x, u, &mut a)?;
        evaluate_checked(spec, t, &x, u2, &mut b)?;
        let diff = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        let ratio = diff / (u2 - u);
        if ratio > best.0 {
            best = (ratio, (t, x, u, u2));
        }
    }
    Ok(LipschitzReport {
        declared,
        max_ratio: best.0,
        samples: sample_count,
        passed: best.0 <= declared * (1.0 + 1e-9),
        argmax: best.1,
    })
}

fn check_ranges(spec: &DriftSpec, ranges: &SweepRanges) -> Result<()> {
    if ranges.x_lower.len() != spec.dim {
        return domain(format!(
            "sweep box is {}-dimensional, drift is {}-dimensional",
            ranges.x_lower.len(),
            spec.dim
        ));
    }
    Ok(())
}
