//! Finite-volume solver for the nonlinear Fokker-Planck equation
//! `d_t rho = Laplacian rho - div(b(t, x, rho) rho)`, and the weak-form
//! residual shared by every engine.
//!
//! The update is explicit and conservative: centered diffusive fluxes plus
//! an upwind advective flux `max(b_f(rho_L), 0) rho_L + min(b_f(rho_R), 0)
//! rho_R` at every interior face, where `b_f(u) = b(t, x_face, u)`. Boundary
//! faces carry no flux, so the cell sum telescopes and mass is conserved to
//! rounding.

mod test_functions;

use std::borrow::Cow;

use rayon::prelude::*;

pub use test_functions::{TestFunction, TestFunctionSet};

use crate::drift::DriftSpec;
use crate::error::{domain, Error, Result};
use crate::grid::{GridDensity, GridSpec, CELLS_PER_SIGMA};
use crate::initial::InitialDistribution;

/// Default stability factor.
pub const DEFAULT_CFL: f64 = 0.45;

/// Most negative cell value tolerated before the run is declared failed.
pub const NEGATIVITY_TOL: f64 = -1e-12;

/// Grid, time step and stability factor of one solve.
#[derive(Debug, Clone, PartialEq)]
pub struct FpeConfig {
    grid: GridSpec,
    dt: f64,
    cfl: f64,
    dt_max: f64,
}

fn stable_step(grid: &GridSpec, drift: &DriftSpec, cfl: f64) -> f64 {
    let dx = grid.min_dx();
    let diffusive = dx * dx / (2.0 * grid.dim() as f64);
    let advective = if drift.bound() > 0.0 {
        dx / drift.bound()
    } else {
        f64::INFINITY
    };
    cfl * diffusive.min(advective)
}

impl FpeConfig {
    /// Largest stable step for `cfl`.
    pub fn new(grid: GridSpec, drift: &DriftSpec, cfl: f64) -> Result<Self> {
        if !(cfl > 0.0 && cfl <= 1.0) {
            return Err(Error::Stability(format!("cfl factor must lie in (0, 1], got {cfl}")));
        }
        let dt = stable_step(&grid, drift, cfl);
        Ok(Self {
            grid,
            dt,
            cfl,
            dt_max: dt,
        })
    }

    /// A prescribed step, checked against `cfl min(dx^2 / 2d, dx / |b|)`.
    pub fn with_dt(grid: GridSpec, drift: &DriftSpec, dt: f64, cfl: f64) -> Result<Self> {
        let mut c = Self::new(grid, drift, cfl)?;
        if !(dt > 0.0) || dt > c.dt_max {
            return Err(Error::Stability(format!(
                "time step {dt:e} exceeds the stable bound {:e} (cfl {cfl}, dx {:e}, |b| {})",
                c.dt_max,
                c.grid.min_dx(),
                drift.bound()
            )));
        }
        c.dt = dt;
        Ok(c)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn cfl(&self) -> f64 {
        self.cfl
    }

    /// `dt / dt_max`, at most 1.
    pub fn cfl_margin(&self) -> f64 {
        self.dt / self.dt_max
    }

    /// Time at which a law with atoms enters the grid: the first multiple of
    /// `dt` at which the smoothed atom is resolved.
    pub fn atom_start(&self) -> f64 {
        let dx = self.grid.max_dx();
        let t_res = 0.5 * (CELLS_PER_SIGMA * dx).powi(2);
        (t_res / self.dt).ceil().max(1.0) * self.dt
    }
}

/// Output of [`solve`].
#[derive(Debug, Clone)]
pub struct FpeRun {
    pub snapshots: Vec<(f64, GridDensity)>,
    /// Time of the first grid state (0, or [`FpeConfig::atom_start`]).
    pub start_time: f64,
    pub steps: usize,
    /// Largest `|mass - mass_0|` seen over the run.
    pub mass_drift: f64,
    /// Most negative cell value seen over the run (0 if none).
    pub min_value: f64,
}

struct Faces {
    /// Per axis, the face flux `F_{i+1/2}` stored at cell `i` (zero on the
    /// last cell of the axis).
    flux: Vec<Vec<f64>>,
}

fn fluxes(grid: &GridSpec, drift: &DriftSpec, t: f64, rho: &[f64]) -> Faces {
    let d = grid.dim();
    let flux = (0..d)
        .map(|axis| {
            let dx = grid.dx(axis);
            let n = grid.cells(axis);
            (0..rho.len())
                .into_par_iter()
                .map_init(
                    || (vec![0.0; d], vec![0.0; d]),
                    |(x, b), idx| {
                        let mut ix = grid.unflatten(idx);
                        if ix[axis] + 1 == n {
                            return 0.0;
                        }
                        grid.center_into(idx, x);
                        x[axis] += 0.5 * dx;
                        let left = rho[idx];
                        ix[axis] += 1;
                        let right = rho[grid.flatten(ix)];
                        drift.eval_into(t, x, left, b);
                        let mut f = b[axis].max(0.0) * left;
                        drift.eval_into(t, x, right, b);
                        f += b[axis].min(0.0) * right;
                        f - (right - left) / dx
                    },
                )
                .collect()
        })
        .collect();
    Faces { flux }
}

fn update(grid: &GridSpec, rho: &[f64], faces: &Faces, dt: f64) -> Vec<f64> {
    let d = grid.dim();
    (0..rho.len())
        .into_par_iter()
        .map(|idx| {
            let ix = grid.unflatten(idx);
            let mut div = 0.0;
            for axis in 0..d {
                let out = faces.flux[axis][idx];
                let inflow = if ix[axis] == 0 {
                    0.0
                } else {
                    let mut jx = ix;
                    jx[axis] -= 1;
                    faces.flux[axis][grid.flatten(jx)]
                };
                div += (out - inflow) / grid.dx(axis);
            }
            rho[idx] - dt * div
        })
        .collect()
}

/// Integrates from `initial` to each snapshot time (ascending, in
/// `(start, T]`). Steps are shortened to land on snapshot times.
pub fn solve(
    initial: &InitialDistribution,
    drift: &DriftSpec,
    config: &FpeConfig,
    snapshot_times: &[f64],
) -> Result<FpeRun> {
    let grid = &config.grid;
    if drift.dim() != grid.dim() {
        return Err(Error::GridMismatch(format!(
            "drift is {}-dimensional, grid is {}-dimensional",
            drift.dim(),
            grid.dim()
        )));
    }
    let start_time = if initial.has_atoms() { config.atom_start() } else { 0.0 };
    if snapshot_times.windows(2).any(|w| !(w[0] < w[1])) {
        return domain("snapshot times must be strictly increasing");
    }
    if let Some(t) = snapshot_times.iter().find(|t| !(**t >= start_time) || !t.is_finite()) {
        return domain(format!("snapshot time {t} precedes the solver start {start_time}"));
    }
    let rho0 = GridDensity::from_initial(initial, grid, start_time)?;
    let mass0 = rho0.mass();
    let vol = grid.cell_volume();
    let mut rho = rho0.values().to_vec();
    let mut t = start_time;
    let mut steps = 0usize;
    let mut mass_drift = 0.0f64;
    let mut min_value = 0.0f64;
    let mut snapshots = Vec::with_capacity(snapshot_times.len());
    for &target in snapshot_times {
        while target - t > 1e-12 * target.max(1.0) {
            let dt = config.dt.min(target - t);
            let faces = fluxes(grid, drift, t, &rho);
            rho = update(grid, &rho, &faces, dt);
            steps += 1;
            t = if target - t <= config.dt { target } else { t + dt };
            let lowest = rho.iter().copied().fold(f64::INFINITY, f64::min);
            min_value = min_value.min(lowest);
            if lowest < NEGATIVITY_TOL {
                let idx = rho.iter().position(|v| *v == lowest).unwrap_or(0);
                return Err(Error::SchemeFailure(format!(
                    "cell {idx} at x = {:?} reached {lowest:e} at t = {t} (step {steps})",
                    grid.center(idx)
                )));
            }
            if let Some(idx) = rho.iter().position(|v| !v.is_finite()) {
                return Err(Error::SchemeFailure(format!("cell {idx} became non-finite at t = {t}")));
            }
            let mass: f64 = rho.iter().sum::<f64>() * vol;
            mass_drift = mass_drift.max((mass - mass0).abs());
        }
        let clean: Vec<f64> = rho.iter().map(|v| v.max(0.0)).collect();
        snapshots.push((target, GridDensity::raw(grid.clone(), clean)));
    }
    Ok(FpeRun {
        snapshots,
        start_time,
        steps,
        mass_drift,
        min_value,
    })
}

/// `<nu_0, phi>`: exact for atoms, grid quadrature otherwise.
fn initial_pairing(initial: &InitialDistribution, grid: &GridSpec, phi: &TestFunction) -> Result<f64> {
    match initial {
        InitialDistribution::PointMass { x0 } => Ok(phi.value(x0)),
        InitialDistribution::GaussianMixture {
            weights,
            means,
            variances,
        } => {
            let mut acc = 0.0;
            for ((w, m), v) in weights.iter().zip(means).zip(variances) {
                acc += w * if *v == 0.0 {
                    phi.value(m)
                } else {
                    let piece = InitialDistribution::gaussian(m.clone(), *v)?;
                    GridDensity::from_initial(&piece, grid, 0.0)?.integrate(|x| phi.value(x))
                };
            }
            Ok(acc)
        }
        InitialDistribution::GridSampled { density, .. } => Ok(density.integrate(|x| phi.value(x))),
    }
}

/// `<rho_s, Laplacian phi> + <rho_s, b(s, ., rho_s) . grad phi>`.
fn generator_pairing(t: f64, rho: &GridDensity, drift: &DriftSpec, phi: &TestFunction) -> f64 {
    let spec = rho.spec();
    let d = spec.dim();
    let values = rho.values();
    let parts: Vec<f64> = (0..values.len())
        .into_par_iter()
        .map_init(
            || (vec![0.0; d], vec![0.0; d], vec![0.0; d]),
            |(x, g, b), idx| {
                let r = values[idx];
                if r == 0.0 {
                    return 0.0;
                }
                spec.center_into(idx, x);
                let (_, lap) = phi.eval(x, g);
                if g.iter().all(|v| *v == 0.0) && lap == 0.0 {
                    return 0.0;
                }
                drift.eval_into(t, x, r, b);
                let adv: f64 = b.iter().zip(g.iter()).map(|(p, q)| p * q).sum();
                r * (lap + adv)
            },
        )
        .collect();
    parts.iter().sum::<f64>() * spec.cell_volume()
}

/// Per test function, `|<rho_t, phi> - <rho_a, phi> - int_a^t (<rho_s,
/// Laplacian phi> + <rho_s, b . grad phi>) ds|` with the trapezoid rule over
/// the trajectory's times.
///
/// The anchor `a` is 0 with `<nu_0, phi>` when `initial` is given and the
/// trajectory starts at 0 or the law is absolutely continuous; otherwise it
/// is the first trajectory time. Laws with atoms have no density at 0, so
/// their residual is anchored at the first stored time.
pub fn weak_residual(
    trajectory: &[(f64, GridDensity)],
    initial: Option<&InitialDistribution>,
    drift: &DriftSpec,
    tests: &TestFunctionSet,
    t: f64,
) -> Result<Vec<f64>> {
    if trajectory.is_empty() {
        return Err(Error::MissingData("empty trajectory".into()));
    }
    if trajectory.windows(2).any(|w| !(w[0].0 < w[1].0)) {
        return domain("trajectory times must be strictly increasing");
    }
    let end = trajectory
        .iter()
        .position(|(s, _)| (s - t).abs() <= 1e-9 * t.max(1.0))
        .ok_or_else(|| Error::MissingData(format!("trajectory has no density at t = {t}")))?;
    let spec = trajectory[0].1.spec().clone();
    if trajectory.iter().any(|(_, r)| r.spec() != &spec) {
        return Err(Error::GridMismatch("trajectory densities live on different grids".into()));
    }
    TestFunctionSet::new(tests.functions().to_vec(), &spec)?;

    // quadrature nodes; an absolutely continuous initial law supplies a node
    // at 0 when the trajectory starts later
    let prepend = matches!(initial, Some(init) if trajectory[0].0 > 0.0 && !init.has_atoms());
    let use_initial = initial.is_some() && (prepend || trajectory[0].0 == 0.0);
    let mut nodes: Vec<(f64, Cow<'_, GridDensity>)> = Vec::with_capacity(end + 2);
    if let (true, Some(init)) = (prepend, initial) {
        nodes.push((0.0, Cow::Owned(GridDensity::from_initial(init, &spec, 0.0)?)));
    }
    for (s, r) in &trajectory[..=end] {
        nodes.push((*s, Cow::Borrowed(r)));
    }

    let mut out = Vec::with_capacity(tests.len());
    for phi in tests.functions() {
        let start = if use_initial {
            initial_pairing(initial.expect("checked above"), &spec, phi)?
        } else {
            nodes[0].1.integrate(|x| phi.value(x))
        };
        let g: Vec<f64> = nodes
            .iter()
            .map(|(s, r)| generator_pairing(*s, r, drift, phi))
            .collect();
        let mut integral = 0.0;
        for i in 1..nodes.len() {
            integral += 0.5 * (nodes[i].0 - nodes[i - 1].0) * (g[i] + g[i - 1]);
        }
        let lhs = nodes.last().expect("at least one node").1.integrate(|x| phi.value(x));
        out.push((lhs - start - integral).abs());
    }
    Ok(out)
}

/// `t -> ||rho_t - rho_bar_t||_1` at the times the two runs share. If the
/// grids differ, the finer run is block-averaged onto the coarser grid; one
/// grid must then be a power-of-two refinement of the other.
pub fn uniqueness_separation(
    run_a: &[(f64, GridDensity)],
    run_b: &[(f64, GridDensity)],
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for (ta, ra) in run_a {
        let Some((_, rb)) = run_b.iter().find(|(tb, _)| (tb - ta).abs() <= 1e-9 * ta.max(1.0)) else {
            continue;
        };
        let (a, b) = common_grid(ra, rb)?;
        out.push((*ta, a.l1_distance(&b)?));
    }
    if out.is_empty() {
        return Err(Error::MissingData("the two runs share no snapshot time".into()));
    }
    Ok(out)
}

pub(crate) fn common_grid(a: &GridDensity, b: &GridDensity) -> Result<(GridDensity, GridDensity)> {
    let (sa, sb) = (a.spec(), b.spec());
    if sa == sb {
        return Ok((a.clone(), b.clone()));
    }
    if sa.dim() != sb.dim() || sa.lower() != sb.lower() || sa.upper() != sb.upper() {
        return Err(Error::GridMismatch(
            "runs cover different domains; separation needs a common grid".into(),
        ));
    }
    let (na, nb) = (sa.cells(0), sb.cells(0));
    let ratio_ok = |fine: &GridSpec, coarse: &GridSpec, f: usize| {
        (0..fine.dim()).all(|ax| fine.cells(ax) == coarse.cells(ax) * f)
    };
    if na > nb && ratio_ok(sa, sb, na / nb) {
        Ok((a.coarsen(na / nb)?, b.clone()))
    } else if nb > na && ratio_ok(sb, sa, nb / na) {
        Ok((a.clone(), b.coarsen(nb / na)?))
    } else {
        Err(Error::GridMismatch("grids are not refinements of one another".into()))
    }
}
