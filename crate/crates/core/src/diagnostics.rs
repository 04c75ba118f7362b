//! Certificates for the scheme's N-uniform bounds, and convergence curves.
//!
//! "Uniform in N" is checked as a bounded spread: a constant fitted at each
//! N of a geometric sweep, with `max / median` at most
//! [`STABILITY_THRESHOLD`].

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;

use crate::drift::DriftSpec;
use crate::error::{domain, Error, Result};
use crate::fpe::common_grid;
use crate::grid::{GridDensity, GridSpec};
use crate::heat_kernel;
use crate::initial::InitialDistribution;

pub const STABILITY_THRESHOLD: f64 = 1.5;

/// Default variance scale of the dominating Gaussian.
pub const DEFAULT_LAMBDA: f64 = 4.0;

/// Ratios are taken only where the dominating function is at least this.
pub const WINDOW_FLOOR: f64 = 1e-12;

/// Largest admissible increase between consecutive points of a
/// convergence curve.
pub const CURVE_SLACK: f64 = 1.1;

/// Changes below this absolute size are round-off and never count as an
/// increase.
pub const CURVE_FLOOR: f64 = 1e-12;

/// `max / median`; the median of an even count is the mean of the middle
/// pair. Infinite if the median is zero, NaN for an empty slice.
pub fn stability_ratio(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    let max = v[n - 1];
    if median == 0.0 {
        return if max == 0.0 { 1.0 } else { f64::INFINITY };
    }
    max / median
}

/// Parameter box a certificate was verified on.
#[derive(Debug, Clone, PartialEq)]
pub struct CertifiedRange {
    pub steps: Vec<usize>,
    pub t: (f64, f64),
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// A constant fitted at every N of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCertificate {
    pub claim: String,
    /// Largest fitted value over the sweep.
    pub constant: f64,
    pub per_n: Vec<(usize, f64)>,
    pub range: CertifiedRange,
    pub stability_ratio: f64,
    pub threshold: f64,
}

impl BoundCertificate {
    pub fn from_sweep(claim: impl Into<String>, per_n: Vec<(usize, f64)>, range: CertifiedRange, threshold: f64) -> Self {
        let values: Vec<f64> = per_n.iter().map(|(_, v)| *v).collect();
        let constant = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            claim: claim.into(),
            constant,
            stability_ratio: stability_ratio(&values),
            per_n,
            range,
            threshold,
        }
    }

    /// Every fitted value finite and the spread within the threshold.
    pub fn is_valid(&self) -> bool {
        !self.per_n.is_empty()
            && self.per_n.iter().all(|(_, v)| v.is_finite())
            && self.stability_ratio <= self.threshold
    }

    /// `claim,n,value` rows followed by a summary row with `n = max`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "claim,n,value,t_min,t_max,stability_ratio,threshold,valid")?;
        let (t0, t1) = self.range.t;
        for (n, v) in &self.per_n {
            writeln!(w, "{},{n},{v:e},{t0:e},{t1:e},,,", self.claim)?;
        }
        writeln!(
            w,
            "{},max,{:e},{t0:e},{t1:e},{:e},{},{}",
            self.claim,
            self.constant,
            self.stability_ratio,
            self.threshold,
            self.is_valid()
        )?;
        Ok(())
    }
}

/// `(g(s, .) * nu_0)` at the cell centers of `spec`; closed form for
/// mixtures and point masses, a checked spectral convolution for grid laws.
pub fn smoothed_initial(initial: &InitialDistribution, spec: &GridSpec, s: f64) -> Result<Vec<f64>> {
    if !(s > 0.0) || !s.is_finite() {
        return domain(format!("smoothing time must be > 0, got {s}"));
    }
    let pieces: Vec<(f64, Vec<f64>, f64)> = match initial {
        InitialDistribution::PointMass { x0 } => vec![(1.0, x0.clone(), s)],
        InitialDistribution::GaussianMixture {
            weights,
            means,
            variances,
        } => weights
            .iter()
            .zip(means)
            .zip(variances)
            .map(|((w, m), v)| (*w, m.clone(), s + 0.5 * v))
            .collect(),
        InitialDistribution::GridSampled { density, .. } => {
            if density.spec() != spec {
                return Err(Error::GridMismatch("initial density lives on a different grid".into()));
            }
            return Ok(density.gaussian_convolve(s)?.into_values());
        }
    };
    if initial.dim() != spec.dim() {
        return Err(Error::GridMismatch("initial law and grid differ in dimension".into()));
    }
    Ok((0..spec.total_cells())
        .into_par_iter()
        .map_init(
            || vec![0.0; spec.dim()],
            |x, idx| {
                spec.center_into(idx, x);
                pieces
                    .iter()
                    .map(|(w, m, t)| {
                        let r: Vec<f64> = x.iter().zip(m).map(|(a, b)| a - b).collect();
                        w * heat_kernel::eval_unchecked(*t, &r)
                    })
                    .sum::<f64>()
            },
        )
        .collect())
}

fn one_grid<'a>(densities: impl IntoIterator<Item = &'a GridDensity>) -> Result<GridSpec> {
    let mut it = densities.into_iter();
    let spec = it
        .next()
        .ok_or_else(|| Error::MissingData("empty sweep".into()))?
        .spec()
        .clone();
    if it.any(|r| r.spec() != &spec) {
        return Err(Error::GridMismatch("sweep densities live on different grids".into()));
    }
    Ok(spec)
}

/// Windowed `sup_y rho(y) / (g(lambda t) * nu_0)(y)`, where the window is
/// the set of cells with denominator at least [`WINDOW_FLOOR`]. Returns the
/// sup and the hull of the window.
fn domination_ratio(rho: &GridDensity, denom: &[f64]) -> Option<(f64, Vec<f64>, Vec<f64>)> {
    let spec = rho.spec();
    let d = spec.dim();
    let mut best: Option<f64> = None;
    let (mut lo, mut hi) = (vec![f64::INFINITY; d], vec![f64::NEG_INFINITY; d]);
    for (idx, (r, g)) in rho.values().iter().zip(denom).enumerate() {
        if *g < WINDOW_FLOOR {
            continue;
        }
        let x = spec.center(idx);
        for a in 0..d {
            lo[a] = lo[a].min(x[a]);
            hi[a] = hi[a].max(x[a]);
        }
        let q = r / g;
        best = Some(best.map_or(q, |b: f64| b.max(q)));
    }
    best.map(|b| (b, lo, hi))
}

/// Fits `C` in `rho^N_t <= C (g(lambda t) * nu_0)` for every N of the sweep.
pub fn fit_domination(
    densities: &BTreeMap<usize, GridDensity>,
    t: f64,
    initial: &InitialDistribution,
    lambda: f64,
) -> Result<BoundCertificate> {
    if !(lambda >= 1.0) || !lambda.is_finite() {
        return domain(format!("lambda must be finite and >= 1, got {lambda}"));
    }
    let spec = one_grid(densities.values())?;
    let denom = smoothed_initial(initial, &spec, lambda * t)?;
    let mut per_n = Vec::with_capacity(densities.len());
    let d = spec.dim();
    let (mut lo, mut hi) = (vec![f64::INFINITY; d], vec![f64::NEG_INFINITY; d]);
    for (n, rho) in densities {
        let (sup, l, h) = domination_ratio(rho, &denom).ok_or_else(|| {
            Error::Domain(format!(
                "dominating Gaussian is below {WINDOW_FLOOR:e} on every cell (t = {t}, lambda = {lambda})"
            ))
        })?;
        for a in 0..d {
            lo[a] = lo[a].min(l[a]);
            hi[a] = hi[a].max(h[a]);
        }
        per_n.push((*n, sup));
    }
    let range = CertifiedRange {
        steps: densities.keys().copied().collect(),
        t: (t, t),
        lower: lo,
        upper: hi,
    };
    Ok(BoundCertificate::from_sweep(
        format!("gaussian-domination(lambda={lambda})"),
        per_n,
        range,
        STABILITY_THRESHOLD,
    ))
}

/// Sampling window of the Hölder fits: times in `[t_min, t_max]` and the
/// box `[-half_width, half_width]^d`, thinned to at most `max_points` cells
/// per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoelderWindow {
    pub t_min: f64,
    pub t_max: f64,
    pub half_width: f64,
    pub max_points: usize,
}

impl HoelderWindow {
    pub fn new(t_min: f64, t_max: f64, half_width: f64) -> Result<Self> {
        if !(t_min > 0.0 && t_max > t_min && half_width > 0.0) {
            return domain(format!(
                "Hölder window needs 0 < t_min < t_max and a positive half-width, got [{t_min}, {t_max}] x {half_width}"
            ));
        }
        Ok(Self {
            t_min,
            t_max,
            half_width,
            max_points: 256,
        })
    }
}

/// Fitted space and time Hölder constants of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoelderConstants {
    /// `sup |rho_t(x1) - rho_t(x2)| / (|x1 - x2|^beta t^{-beta/2}
    /// sum_j (g(4t) * nu_0)(x_j))`
    pub space: f64,
    /// `sup |rho_t1(x) - rho_t2(x)| / (|t1 - t2|^{beta/2} sum_j t_j^{-beta/2}
    /// (g(2 t_j) * nu_0)(x))`
    pub time: f64,
}

fn sample_cells(spec: &GridSpec, window: &HoelderWindow) -> Result<Vec<usize>> {
    let d = spec.dim();
    let mut axes = Vec::with_capacity(d);
    let per_axis = if d == 1 {
        window.max_points
    } else {
        (window.max_points as f64).sqrt() as usize
    }
    .max(2);
    for a in 0..d {
        if spec.lower()[a] > -window.half_width || spec.upper()[a] < window.half_width {
            return domain(format!(
                "Hölder window [-{h}, {h}] leaves the grid on axis {a}",
                h = window.half_width
            ));
        }
        let inside: Vec<usize> = (0..spec.cells(a))
            .filter(|&i| spec.center_coord(a, i).abs() <= window.half_width)
            .collect();
        let stride = inside.len().div_ceil(per_axis).max(1);
        axes.push(inside.into_iter().step_by(stride).collect::<Vec<_>>());
    }
    Ok(match d {
        1 => axes[0].clone(),
        _ => axes[0]
            .iter()
            .flat_map(|i| axes[1].iter().map(move |j| spec.flatten([*i, *j])))
            .collect(),
    })
}

/// Hölder constants of `trajectory` over `window` with exponent `beta`.
pub fn hoelder_constants(
    trajectory: &[(f64, GridDensity)],
    initial: &InitialDistribution,
    window: &HoelderWindow,
    beta: f64,
) -> Result<HoelderConstants> {
    if !(beta > 0.0 && beta < 1.0) {
        return domain(format!("beta must lie in (0, 1), got {beta}"));
    }
    let tol = 1e-9 * window.t_max;
    let snaps: Vec<&(f64, GridDensity)> = trajectory
        .iter()
        .filter(|(t, _)| *t >= window.t_min - tol && *t <= window.t_max + tol)
        .collect();
    if snaps.is_empty() {
        return Err(Error::MissingData(format!(
            "no snapshot in the window [{}, {}]",
            window.t_min, window.t_max
        )));
    }
    let spec = one_grid(snaps.iter().map(|(_, r)| r))?;
    let cells = sample_cells(&spec, window)?;
    let centers: Vec<Vec<f64>> = cells.iter().map(|&i| spec.center(i)).collect();
    let sample = |field: &[f64]| cells.iter().map(|&i| field[i]).collect::<Vec<f64>>();

    let mut rho = Vec::with_capacity(snaps.len());
    let mut g2 = Vec::with_capacity(snaps.len());
    let mut space = 0.0f64;
    for (t, r) in &snaps {
        let values = sample(r.values());
        let g4 = sample(&smoothed_initial(initial, &spec, 4.0 * t)?);
        let scale = t.powf(-0.5 * beta);
        let best = (0..cells.len())
            .into_par_iter()
            .map(|i| {
                let mut m = 0.0f64;
                for j in i + 1..cells.len() {
                    let dist: f64 = centers[i]
                        .iter()
                        .zip(&centers[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    let rhs = dist.powf(beta) * scale * (g4[i] + g4[j]);
                    if rhs > 0.0 {
                        m = m.max((values[i] - values[j]).abs() / rhs);
                    }
                }
                m
            })
            .reduce(|| 0.0, f64::max);
        space = space.max(best);
        rho.push(values);
        g2.push(sample(&smoothed_initial(initial, &spec, 2.0 * t)?));
    }
    let times: Vec<f64> = snaps.iter().map(|(t, _)| *t).collect();
    let time = (0..cells.len())
        .into_par_iter()
        .map(|c| {
            let mut m = 0.0f64;
            for a in 0..times.len() {
                for b in a + 1..times.len() {
                    let weight = times[a].powf(-0.5 * beta) * g2[a][c] + times[b].powf(-0.5 * beta) * g2[b][c];
                    let rhs = (times[b] - times[a]).abs().powf(0.5 * beta) * weight;
                    if rhs > 0.0 {
                        m = m.max((rho[a][c] - rho[b][c]).abs() / rhs);
                    }
                }
            }
            m
        })
        .reduce(|| 0.0, f64::max);
    Ok(HoelderConstants { space, time })
}

/// Space and time Hölder certificates across an N sweep.
pub fn fit_hoelder(
    trajectories: &BTreeMap<usize, Vec<(f64, GridDensity)>>,
    initial: &InitialDistribution,
    window: &HoelderWindow,
    beta: f64,
) -> Result<(BoundCertificate, BoundCertificate)> {
    let mut space = Vec::with_capacity(trajectories.len());
    let mut time = Vec::with_capacity(trajectories.len());
    for (n, traj) in trajectories {
        let c = hoelder_constants(traj, initial, window, beta)?;
        space.push((*n, c.space));
        time.push((*n, c.time));
    }
    let d = initial.dim();
    let range = CertifiedRange {
        steps: trajectories.keys().copied().collect(),
        t: (window.t_min, window.t_max),
        lower: vec![-window.half_width; d],
        upper: vec![window.half_width; d],
    };
    Ok((
        BoundCertificate::from_sweep(format!("hoelder-space(beta={beta})"), space, range.clone(), STABILITY_THRESHOLD),
        BoundCertificate::from_sweep(format!("hoelder-time(beta={beta})"), time, range, STABILITY_THRESHOLD),
    ))
}

/// Ordinate against abscissa with a log-log slope and the verdict fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceCurve {
    pub label: String,
    pub abscissa: Vec<f64>,
    pub ordinate: Vec<f64>,
    pub slope: f64,
    pub tolerance: f64,
}

impl ConvergenceCurve {
    pub fn new(label: impl Into<String>, abscissa: Vec<f64>, ordinate: Vec<f64>, tolerance: f64) -> Result<Self> {
        if abscissa.len() != ordinate.len() {
            return domain("curve abscissa and ordinate differ in length");
        }
        if abscissa.len() < 4 {
            return domain(format!("a convergence curve needs at least 4 points, got {}", abscissa.len()));
        }
        if abscissa.iter().any(|x| !(*x > 0.0)) || ordinate.iter().any(|y| !(*y >= 0.0)) {
            return domain("curve points must have positive abscissa and nonnegative ordinate");
        }
        let slope = log_slope(&abscissa, &ordinate);
        Ok(Self {
            label: label.into(),
            abscissa,
            ordinate,
            slope,
            tolerance,
        })
    }

    pub fn final_value(&self) -> f64 {
        *self.ordinate.last().expect("at least 4 points")
    }

    /// Largest `y_{i+1} / y_i` over the last `span` steps of the curve.
    pub fn max_increase(&self, span: usize) -> f64 {
        let n = self.ordinate.len();
        let from = n.saturating_sub(span + 1);
        self.ordinate[from..]
            .windows(2)
            .map(|w| if w[0] > 0.0 { w[1] / w[0] } else if w[1] > 0.0 { f64::INFINITY } else { 1.0 })
            .fold(0.0, f64::max)
    }

    fn steps_within_slack(&self, span: usize) -> bool {
        let n = self.ordinate.len();
        self.ordinate[n.saturating_sub(span + 1)..]
            .windows(2)
            .all(|w| w[1] <= CURVE_SLACK * w[0] + CURVE_FLOOR)
    }

    /// No step of the whole curve increases by more than [`CURVE_SLACK`].
    pub fn is_decreasing(&self) -> bool {
        self.steps_within_slack(self.ordinate.len())
    }

    /// Final point within tolerance and no increase beyond
    /// [`CURVE_SLACK`] over the last three doublings.
    pub fn verdict(&self) -> bool {
        self.final_value() <= self.tolerance && self.steps_within_slack(3)
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "label,abscissa,ordinate")?;
        for (x, y) in self.abscissa.iter().zip(&self.ordinate) {
            writeln!(w, "{},{x:e},{y:e}", self.label)?;
        }
        writeln!(
            w,
            "# slope={:e} final={:e} tolerance={:e} verdict={}",
            self.slope,
            self.final_value(),
            self.tolerance,
            self.verdict()
        )?;
        Ok(())
    }
}

/// Least-squares slope of `ln y` against `ln x`, over points with `y > 0`.
fn log_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(_, v)| **v > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// `N -> ||rho^N_T - rho_ref||_1`. Finer outputs are block-averaged onto the
/// reference grid. Refuses drifts that are not Lipschitz in `x` and `u`.
pub fn l1_convergence_study(
    outputs: &BTreeMap<usize, GridDensity>,
    reference: &GridDensity,
    drift: &DriftSpec,
    tolerance: f64,
) -> Result<ConvergenceCurve> {
    if !drift.is_lipschitz() {
        return Err(Error::NotApplicable(format!(
            "drift `{}` is not Lipschitz in (x, u); the reference solution carries no convergence guarantee",
            drift.name()
        )));
    }
    let mut xs = Vec::with_capacity(outputs.len());
    let mut ys = Vec::with_capacity(outputs.len());
    for (n, rho) in outputs {
        let (a, b) = common_grid(rho, reference)?;
        xs.push(*n as f64);
        ys.push(a.l1_distance(&b)?);
    }
    ConvergenceCurve::new(format!("l1[{}]", drift.name()), xs, ys, tolerance)
}

/// Outcome of one smoothing check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingCheck {
    pub t: f64,
    /// `||rho_t||_inf t^{d/(2q)} / ||rho_0||_q`
    pub scaled: f64,
    pub c_fit: f64,
    pub pass: bool,
}

/// `||rho_0||_q` on `spec`; not applicable to laws with atoms.
pub fn initial_lq_norm(initial: &InitialDistribution, spec: &GridSpec, q: f64) -> Result<f64> {
    if initial.has_atoms() {
        return Err(Error::NotApplicable(
            "the initial law has an atom, so ||rho_0||_q is infinite".into(),
        ));
    }
    match initial.grid_density() {
        Some(rho) => rho.lq_norm(q),
        None => GridDensity::from_initial(initial, spec, 0.0)?.lq_norm(q),
    }
}

/// `||rho_t||_inf t^{d/(2q)} / ||rho_0||_q`.
pub fn smoothing_constant(density: &GridDensity, t: f64, initial: &InitialDistribution, q: f64) -> Result<f64> {
    if !(t > 0.0) {
        return domain(format!("smoothing check needs t > 0, got {t}"));
    }
    let norm0 = initial_lq_norm(initial, density.spec(), q)?;
    let d = density.spec().dim() as f64;
    let power = if q.is_infinite() { 0.0 } else { d / (2.0 * q) };
    Ok(density.max_value() * t.powf(power) / norm0)
}

/// Checks `||rho_t||_inf <= c_fit t^{-d/(2q)} ||rho_0||_q`.
pub fn smoothing_check(
    density: &GridDensity,
    t: f64,
    initial: &InitialDistribution,
    q: f64,
    c_fit: f64,
) -> Result<SmoothingCheck> {
    let scaled = smoothing_constant(density, t, initial, q)?;
    Ok(SmoothingCheck {
        t,
        scaled,
        c_fit,
        pass: scaled <= c_fit,
    })
}
