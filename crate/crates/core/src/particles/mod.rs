//! Monte Carlo realization of the Euler scheme with density feedback.
//!
//! Each particle moves by `h b(kh, X, rho(X)) + sqrt(2h) xi` per step, where
//! `rho` is either a kernel density estimate of the ensemble itself or the
//! exact law computed by [`crate::euler`] (coupled mode). As in the
//! law-level engine the first step carries no drift.

pub mod io;
pub mod kde;
pub mod rng;

use rayon::prelude::*;

use crate::drift::DriftSpec;
use crate::error::{domain, Error, Result};
use crate::euler::{self, check_domain, initial_state, TimeGrid};
use crate::grid::{GridDensity, GridSpec};
use crate::initial::InitialDistribution;

pub use kde::{kde_adaptive, kde_evaluate, kde_grid, Bandwidth, KdeSpec};

/// `M` particles in `R^d` at step `k`, driven by noise keyed on `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    dim: usize,
    step: usize,
    seed: u64,
    positions: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn from_positions(dim: usize, step: usize, seed: u64, positions: Vec<f64>) -> Result<Self> {
        if dim == 0 || dim > 2 {
            return domain(format!("particle dimension must be 1 or 2, got {dim}"));
        }
        if positions.is_empty() || positions.len() % dim != 0 {
            return domain(format!("{} coordinates do not form {dim}-d points", positions.len()));
        }
        if let Some(i) = positions.iter().position(|v| !v.is_finite()) {
            let index = i / dim;
            return Err(Error::NonFiniteParticle {
                index,
                step,
                position: positions[index * dim..(index + 1) * dim].to_vec(),
            });
        }
        Ok(Self {
            dim,
            step,
            seed,
            positions,
        })
    }

    /// `M` independent draws from `initial`, using the initial-sampling
    /// keystream of `seed`.
    pub fn sample(initial: &InitialDistribution, particles: usize, seed: u64) -> Result<Self> {
        if particles == 0 {
            return domain("ensemble needs at least one particle");
        }
        let d = initial.dim();
        let mut positions = vec![0.0; particles * d];
        match initial {
            InitialDistribution::PointMass { x0 } => {
                positions.chunks_mut(d).for_each(|p| p.copy_from_slice(x0));
            }
            InitialDistribution::GaussianMixture {
                weights,
                means,
                variances,
            } => {
                positions.par_chunks_mut(d).enumerate().for_each(|(i, p)| {
                    let mut r = rng::block_rng(seed, rng::Purpose::Initial, i as u64, 0);
                    let u = rng::uniform(&mut r);
                    let mut acc = 0.0;
                    let mut c = weights.len() - 1;
                    for (j, w) in weights.iter().enumerate() {
                        acc += w;
                        if u < acc {
                            c = j;
                            break;
                        }
                    }
                    rng::normals(&mut r, p);
                    let s = variances[c].sqrt();
                    p.iter_mut().zip(&means[c]).for_each(|(x, m)| *x = m + s * *x);
                });
            }
            InitialDistribution::GridSampled { density, .. } => {
                let spec = density.spec();
                let vol = spec.cell_volume();
                let mut cdf = Vec::with_capacity(spec.total_cells());
                let mut acc = 0.0;
                for v in density.values() {
                    acc += v * vol;
                    cdf.push(acc);
                }
                positions.par_chunks_mut(d).enumerate().for_each(|(i, p)| {
                    let mut r = rng::block_rng(seed, rng::Purpose::Initial, i as u64, 0);
                    let u = rng::uniform(&mut r) * acc;
                    let idx = cdf.partition_point(|c| *c <= u).min(cdf.len() - 1);
                    let ix = spec.unflatten(idx);
                    for (a, x) in p.iter_mut().enumerate() {
                        let lo = spec.lower()[a] + ix[a] as f64 * spec.dx(a);
                        *x = lo + rng::uniform(&mut r) * spec.dx(a);
                    }
                });
            }
        }
        Self::from_positions(d, 0, seed, positions)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Row-major coordinates, `d` per particle.
    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mean(&self) -> Vec<f64> {
        let m = self.len() as f64;
        (0..self.dim)
            .map(|a| self.positions.iter().skip(a).step_by(self.dim).sum::<f64>() / m)
            .collect()
    }
}

/// Where the feedback density `rho_kh` comes from.
#[derive(Debug, Clone, Copy)]
pub enum DensitySource<'a> {
    /// Binned kernel estimate of the ensemble on a grid fitted to it.
    Kde(KdeSpec),
    /// A density supplied from outside, interpolated at each particle.
    Grid(&'a GridDensity),
}

/// One Euler step of every particle.
pub fn advance(
    ensemble: &ParticleEnsemble,
    drift: &DriftSpec,
    source: DensitySource<'_>,
    time: &TimeGrid,
) -> Result<ParticleEnsemble> {
    let d = ensemble.dim;
    let k = ensemble.step;
    if k >= time.steps() {
        return domain(format!("ensemble is already at step {k} of {}", time.steps()));
    }
    if drift.dim() != d {
        return Err(Error::GridMismatch(format!(
            "drift is {}-dimensional, particles are {d}-dimensional",
            drift.dim()
        )));
    }
    let h = time.h();
    let t = time.time(k);
    // the feedback density is frozen once per step, before anyone moves
    let estimate;
    let density = if k == 0 {
        None
    } else {
        Some(match source {
            DensitySource::Kde(spec) => {
                estimate = kde_adaptive(ensemble, &spec)?;
                &estimate
            }
            DensitySource::Grid(g) => {
                if g.spec().dim() != d {
                    return Err(Error::GridMismatch("feedback grid dimension differs from particles".into()));
                }
                g
            }
        })
    };
    let noise = (2.0 * h).sqrt();
    let mut positions = ensemble.positions.clone();
    positions.par_chunks_mut(d).enumerate().for_each_init(
        || (vec![0.0; d], vec![0.0; d]),
        |(b, xi), (i, x)| {
            if let Some(rho) = density {
                drift.eval_into(t, x, rho.value_at(x), b);
            } else {
                b.iter_mut().for_each(|v| *v = 0.0);
            }
            rng::increment(ensemble.seed, i, k, xi);
            for a in 0..d {
                x[a] += h * b[a] + noise * xi[a];
            }
        },
    );
    if let Some(i) = positions.iter().position(|v| !v.is_finite()) {
        let index = i / d;
        return Err(Error::NonFiniteParticle {
            index,
            step: k + 1,
            position: ensemble.particle(index).to_vec(),
        });
    }
    Ok(ParticleEnsemble {
        dim: d,
        step: k + 1,
        seed: ensemble.seed,
        positions,
    })
}

/// Feedback mode of a full run.
#[derive(Debug, Clone, PartialEq)]
pub enum Feedback {
    Kde(KdeSpec),
    /// Feedback from the exact law computed alongside on `grid`.
    Coupled { grid: GridSpec },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleRunConfig {
    pub particles: usize,
    pub seed: u64,
    pub feedback: Feedback,
    /// Step indices at which the ensemble is kept.
    pub store_steps: Vec<usize>,
}

/// Runs `N` steps from `M` draws of `initial`, returning the ensembles at
/// the stored steps in increasing step order.
pub fn run(
    initial: &InitialDistribution,
    drift: &DriftSpec,
    time: &TimeGrid,
    config: &ParticleRunConfig,
) -> Result<Vec<ParticleEnsemble>> {
    if let Some(k) = config.store_steps.iter().find(|k| **k > time.steps()) {
        return domain(format!("cannot store step {k} of a {}-step run", time.steps()));
    }
    let mut ensemble = ParticleEnsemble::sample(initial, config.particles, config.seed)?;
    let mut coupled = match &config.feedback {
        Feedback::Coupled { grid } => {
            check_domain(grid, drift, initial, time.horizon())?;
            Some(initial_state(initial, grid, time)?)
        }
        Feedback::Kde(_) => None,
    };
    let last = config.store_steps.iter().copied().max().unwrap_or(0);
    let mut out = Vec::new();
    loop {
        if config.store_steps.contains(&ensemble.step) {
            out.push(ensemble.clone());
        }
        if ensemble.step >= last {
            break;
        }
        let k = ensemble.step;
        ensemble = match (&config.feedback, coupled.as_mut()) {
            (Feedback::Coupled { .. }, Some(state)) => {
                while state.step < k {
                    *state = euler::step(state, drift, time)?;
                }
                advance(&ensemble, drift, DensitySource::Grid(&state.density), time)?
            }
            (Feedback::Kde(spec), _) => advance(&ensemble, drift, DensitySource::Kde(*spec), time)?,
            (Feedback::Coupled { .. }, None) => unreachable!("coupled state is created with the run"),
        };
    }
    Ok(out)
}

/// Fourth-moment ratio of the increment over one pair of times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentPair {
    pub s: f64,
    pub t: f64,
    /// `mean(|X_t - X_s|^4) / |t - s|^2`
    pub ratio: f64,
    /// Standard error of `ratio`.
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentFit {
    /// Largest ratio over the pairs.
    pub constant: f64,
    pub pairs: Vec<MomentPair>,
}

/// Empirical `sup E|X_t - X_s|^4 / |t - s|^2` over the given time pairs,
/// read from ensembles stored at the corresponding steps.
pub fn moment_increment_check(
    trajectory: &[ParticleEnsemble],
    time: &TimeGrid,
    pairs: &[(f64, f64)],
) -> Result<MomentFit> {
    if pairs.is_empty() {
        return domain("moment check needs at least one (s, t) pair");
    }
    let find = |t: f64| {
        let k = time
            .step_index(t)
            .ok_or_else(|| Error::Domain(format!("{t} is not a step time")))?;
        trajectory
            .iter()
            .find(|e| e.step == k)
            .ok_or_else(|| Error::MissingData(format!("no ensemble stored at step {k} (t = {t})")))
    };
    let mut fitted = Vec::with_capacity(pairs.len());
    for &(s, t) in pairs {
        if s == t {
            return domain(format!("pair ({s}, {t}) has zero length"));
        }
        let (a, b) = (find(s)?, find(t)?);
        if a.len() != b.len() || a.seed != b.seed {
            return Err(Error::GridMismatch("ensembles come from different runs".into()));
        }
        let m = a.len() as f64;
        let fourth: Vec<f64> = a
            .positions
            .chunks(a.dim)
            .zip(b.positions.chunks(b.dim))
            .map(|(x, y)| {
                let r2: f64 = x.iter().zip(y).map(|(p, q)| (q - p) * (q - p)).sum();
                r2 * r2
            })
            .collect();
        let mean = fourth.iter().sum::<f64>() / m;
        let var = fourth.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0).max(1.0);
        let scale = (t - s) * (t - s);
        fitted.push(MomentPair {
            s,
            t,
            ratio: mean / scale,
            std_error: (var / m).sqrt() / scale,
        });
    }
    let constant = fitted.iter().map(|p| p.ratio).fold(0.0, f64::max);
    Ok(MomentFit {
        constant,
        pairs: fitted,
    })
}

/// Sample mean with a three-standard-error half-width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
}

impl Estimate {
    pub fn covers(&self, value: f64) -> bool {
        (self.mean - value).abs() <= self.half_width
    }
}

/// `E f(X)` over the ensemble for `f` bounded by `bound`.
pub fn empirical_expectation(ensemble: &ParticleEnsemble, f: impl Fn(&[f64]) -> f64, bound: f64) -> Result<Estimate> {
    if !(bound >= 0.0) || !bound.is_finite() {
        return domain(format!("declared bound must be finite and >= 0, got {bound}"));
    }
    let values: Vec<f64> = ensemble.positions.chunks(ensemble.dim).map(&f).collect();
    if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(v.abs() <= bound)) {
        return Err(Error::TestFunction(format!(
            "f = {v} at particle {i} exceeds the declared bound {bound}"
        )));
    }
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0).max(1.0);
    Ok(Estimate {
        mean,
        half_width: 3.0 * (var / m).sqrt(),
    })
}
