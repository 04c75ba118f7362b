//! Exact law propagation of the Euler scheme with frozen, density-dependent
//! drift.
//!
//! On `[kh, (k+1)h)` the scheme moves every point by `h b(kh, x, rho_kh(x))`
//! and adds an independent `sqrt(2) (W_{(k+1)h} - W_{kh})`. Its law therefore
//! evolves by a drift pushforward followed by a heat-kernel convolution, both
//! computed on the grid with no sampling error. The first step is pure
//! diffusion: the drift is switched on from `t = h`.

use rayon::prelude::*;

use crate::drift::DriftSpec;
use crate::error::{domain, Error, Result};
use crate::fft;
use crate::grid::{gridding_time, spread_shifted, GridDensity, GridSpec, LEAK_TOL, MASS_TOL};
use crate::initial::InitialDistribution;

/// Horizon `T`, step count `N` and step `h = T / N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    h: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return domain(format!("horizon must be finite and > 0, got {horizon}"));
        }
        if steps == 0 {
            return domain("step count must be >= 1");
        }
        let h = horizon / steps as f64;
        Ok(Self {
            horizon: h * steps as f64,
            steps,
            h,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.h
    }

    /// Last lattice time at or before `s`.
    pub fn freeze(&self, s: f64) -> f64 {
        let k = (s / self.h + 1e-9).floor().max(0.0);
        k * self.h
    }

    /// Step index of a lattice time, if `t` is one (to 1e-9 relative).
    pub fn step_index(&self, t: f64) -> Option<usize> {
        let x = t / self.h;
        let k = x.round();
        if k >= 0.0 && (x - k).abs() <= 1e-9 * x.max(1.0) && k as usize <= self.steps {
            Some(k as usize)
        } else {
            None
        }
    }
}

/// Law of the scheme at a lattice time.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeState {
    pub step: usize,
    pub time: f64,
    pub density: GridDensity,
}

impl SchemeState {
    /// Velocity field frozen over the interval starting at this state:
    /// `b(kh, x, rho_kh(x))` at every cell center, or zero on the first
    /// interval. Row-major, `dim` components per cell.
    pub fn frozen_field(&self, drift: &DriftSpec) -> Result<Vec<f64>> {
        let spec = self.density.spec();
        let d = spec.dim();
        if drift.dim() != d {
            return Err(Error::GridMismatch(format!(
                "drift is {}-dimensional, grid is {d}-dimensional",
                drift.dim()
            )));
        }
        let mut field = vec![0.0; spec.total_cells() * d];
        if self.step == 0 {
            return Ok(field);
        }
        let rho = self.density.values();
        let t = self.time;
        field
            .par_chunks_mut(d)
            .enumerate()
            .for_each_init(
                || vec![0.0; d],
                |x, (idx, out)| {
                    spec.center_into(idx, x);
                    drift.eval_into(t, x, rho[idx], out);
                },
            );
        if let Some(bad) = field.iter().position(|v| !v.is_finite()) {
            let idx = bad / d;
            return Err(Error::DriftEvaluation {
                t,
                x: spec.center(idx),
                u: rho[idx],
                reason: "non-finite drift value".into(),
            });
        }
        Ok(field)
    }
}

/// Diagnostics recorded after each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub clipped_mass: f64,
    pub mass_error: f64,
    pub boundary_mass: f64,
}

/// State at the first time the law has a grid density: `t = 0` for
/// absolutely continuous initial data, otherwise `t = h`, where the law is
/// exactly `g(h) * nu_0` because the first step carries no drift.
pub fn initial_state(initial: &InitialDistribution, grid: &GridSpec, time: &TimeGrid) -> Result<SchemeState> {
    if initial.has_atoms() {
        Ok(SchemeState {
            step: 1,
            time: time.time(1),
            density: GridDensity::from_initial(initial, grid, time.h())?,
        })
    } else {
        Ok(SchemeState {
            step: 0,
            time: 0.0,
            density: GridDensity::from_initial(initial, grid, 0.0)?,
        })
    }
}

fn advance(state: &SchemeState, drift: &DriftSpec, dt: f64) -> Result<GridDensity> {
    let field = state.frozen_field(drift)?;
    let displacement: Vec<f64> = field.iter().map(|v| v * dt).collect();
    state.density.transport_convolve(&displacement, dt)
}

/// One Euler step: frozen-drift pushforward over `h`, then diffusion over `h`.
/// Cell masses are transported exactly (see
/// [`GridDensity::transport_convolve`]).
pub fn step(state: &SchemeState, drift: &DriftSpec, time: &TimeGrid) -> Result<SchemeState> {
    if state.step >= time.steps() {
        return domain(format!(
            "state is already at step {} of {}",
            state.step,
            time.steps()
        ));
    }
    let density = advance(state, drift, time.h())?;
    Ok(SchemeState {
        step: state.step + 1,
        time: time.time(state.step + 1),
        density,
    })
}

fn record(state: &SchemeState) -> Result<StepRecord> {
    let rec = StepRecord {
        step: state.step,
        time: state.time,
        clipped_mass: state.density.clipped_mass(),
        mass_error: state.density.mass() - 1.0,
        boundary_mass: state.density.boundary_mass(),
    };
    if rec.mass_error.abs() > MASS_TOL {
        return Err(Error::SchemeFailure(format!(
            "mass drifted by {:.3e} at step {}",
            rec.mass_error, rec.step
        )));
    }
    if rec.boundary_mass > LEAK_TOL {
        return Err(Error::BoundaryLeak {
            mass: rec.boundary_mass,
            context: format!("boundary cells at step {}", rec.step),
        });
    }
    Ok(rec)
}

/// Checks `half_width >= ||b|| T + 6 sqrt(2T) + support radius of nu_0`.
pub fn check_domain(grid: &GridSpec, drift: &DriftSpec, initial: &InitialDistribution, horizon: f64) -> Result<()> {
    let need = drift.bound() * horizon + 6.0 * (2.0 * horizon).sqrt() + initial.support_radius();
    if grid.half_width() + 1e-12 < need {
        return Err(Error::Resolution {
            what: format!(
                "domain half-width for horizon {horizon} (|b| T + 6 sqrt(2T) + initial radius = {need:.4})"
            ),
            required: need,
            actual: grid.half_width(),
        });
    }
    Ok(())
}

/// Every state of a run with its per-step diagnostics.
#[derive(Debug, Clone)]
pub struct EulerTrajectory {
    pub states: Vec<SchemeState>,
    pub log: Vec<StepRecord>,
}

impl EulerTrajectory {
    pub fn snapshots(&self) -> Vec<(f64, GridDensity)> {
        self.states.iter().map(|s| (s.time, s.density.clone())).collect()
    }

    pub fn at_step(&self, k: usize) -> Option<&SchemeState> {
        self.states.iter().find(|s| s.step == k)
    }

    pub fn terminal(&self) -> &SchemeState {
        self.states.last().expect("trajectory holds at least one state")
    }
}

/// Runs all `N` steps, keeping every state.
pub fn run_trajectory(
    initial: &InitialDistribution,
    drift: &DriftSpec,
    grid: &GridSpec,
    time: &TimeGrid,
) -> Result<EulerTrajectory> {
    check_domain(grid, drift, initial, time.horizon())?;
    let mut state = initial_state(initial, grid, time)?;
    let mut log = vec![record(&state)?];
    let mut states = vec![state.clone()];
    while state.step < time.steps() {
        state = step(&state, drift, time)?;
        log.push(record(&state)?);
        states.push(state.clone());
    }
    Ok(EulerTrajectory { states, log })
}

/// Densities at the requested lattice times in `(0, T]`.
pub fn run(
    initial: &InitialDistribution,
    drift: &DriftSpec,
    grid: &GridSpec,
    time: &TimeGrid,
    snapshot_times: &[f64],
) -> Result<Vec<(f64, GridDensity)>> {
    let mut wanted = Vec::with_capacity(snapshot_times.len());
    for &t in snapshot_times {
        match time.step_index(t) {
            Some(k) if k >= 1 => wanted.push(k),
            _ => {
                return domain(format!(
                    "snapshot time {t} is not a step time in (0, {}] for h = {}; use interpolate_intermediate",
                    time.horizon(),
                    time.h()
                ))
            }
        }
    }
    check_domain(grid, drift, initial, time.horizon())?;
    let last = wanted.iter().copied().max().unwrap_or(0);
    let mut state = initial_state(initial, grid, time)?;
    record(&state)?;
    let mut out: Vec<Option<GridDensity>> = vec![None; wanted.len()];
    loop {
        for (slot, k) in out.iter_mut().zip(&wanted) {
            if *k == state.step {
                *slot = Some(state.density.clone());
            }
        }
        if state.step >= last {
            break;
        }
        state = step(&state, drift, time)?;
        record(&state)?;
    }
    Ok(wanted
        .iter()
        .zip(out)
        .map(|(k, d)| (time.time(*k), d.expect("every wanted step is visited")))
        .collect())
}

/// Law at `kh + dt` for `0 < dt < h`, with the drift frozen at `kh`.
pub fn interpolate_intermediate(state: &SchemeState, drift: &DriftSpec, time: &TimeGrid, dt: f64) -> Result<GridDensity> {
    if !(dt > 0.0 && dt < time.h()) {
        return domain(format!("intermediate offset must lie in (0, {}), got {dt}", time.h()));
    }
    advance(state, drift, dt)
}

/// Sup-norm gap between the scheme's density at lattice time `t` and the
/// right-hand side of the Duhamel representation
///
/// `rho_t(y) = (g(t) * nu_0)(y) + int_0^t E[b_s . grad g(t - s, X_s - y)] ds`,
///
/// where `b_s` is the drift frozen at the last lattice time. On each step
/// the expectation is the pairing of `grad g(t - s)` with the intermediate
/// law of the `b`-weighted measure, and the `s`-integral uses the midpoint
/// rule with `substeps` nodes per step.
pub fn duhamel_residual(
    trajectory: &[(f64, GridDensity)],
    initial: &InitialDistribution,
    drift: &DriftSpec,
    time: &TimeGrid,
    t: f64,
    substeps: usize,
) -> Result<f64> {
    if substeps == 0 {
        return domain("Duhamel quadrature needs at least one substep");
    }
    let k = time
        .step_index(t)
        .filter(|k| *k >= 1)
        .ok_or_else(|| Error::Domain(format!("{t} is not a step time in (0, T]")))?;
    let find = |j: usize| {
        let tj = time.time(j);
        trajectory
            .iter()
            .find(|(s, _)| (s - tj).abs() <= 1e-9 * tj.max(1.0))
            .map(|(_, d)| d)
            .ok_or_else(|| Error::MissingData(format!("trajectory has no density at step {j} (t = {tj})")))
    };
    let lhs = find(k)?;
    let spec = lhs.spec().clone();
    let d = spec.dim();
    let mut rhs = GridDensity::from_initial(initial, &spec, t)?.into_values();
    let h = time.h();
    let sub = h / substeps as f64;
    for j in 1..k {
        let state = SchemeState {
            step: j,
            time: time.time(j),
            density: find(j)?.clone(),
        };
        let field = state.frozen_field(drift)?;
        let rho = state.density.values();
        // components of the b-weighted measure rho_j * b_j
        let weighted: Vec<Vec<f64>> = (0..d)
            .map(|a| rho.iter().enumerate().map(|(i, r)| r * field[i * d + a]).collect())
            .collect();
        let lag = t - time.time(j);
        for i in 0..substeps {
            let tau = (i as f64 + 0.5) * sub;
            let displacement: Vec<f64> = field.iter().map(|v| v * tau).collect();
            let comps: Vec<&[f64]> = weighted.iter().map(|c| c.as_slice()).collect();
            // g(tau) * grad g(t - s) = grad g(t - jh), split into the
            // spreading kernel and one spectral pass
            let spread = gridding_time(&spec).min(0.5 * lag);
            let (moved, _) = spread_shifted(&spec, &comps, &displacement, spread, lag)?;
            let pairing = fft::heat_gradient_pairing(&spec, &moved, lag - spread);
            rhs.iter_mut().zip(&pairing).for_each(|(r, p)| *r -= sub * p);
        }
    }
    Ok(lhs
        .values()
        .iter()
        .zip(&rhs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}
