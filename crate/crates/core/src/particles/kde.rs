//! Gaussian kernel density estimates of an ensemble.

use rayon::prelude::*;

use super::ParticleEnsemble;
use crate::error::{domain, Error, Result};
use crate::fft;
use crate::grid::{GridDensity, GridSpec};

/// Cells per kernel standard deviation required by the binned estimate.
pub const KDE_CELLS_PER_SIGMA: f64 = 2.0;

/// Cells per kernel standard deviation of the grid chosen by [`kde_adaptive`].
pub const ADAPTIVE_CELLS_PER_SIGMA: f64 = 4.0;

/// Largest adaptive grid, in cells per axis, for d = 1 and d = 2.
pub const ADAPTIVE_MAX_CELLS: [usize; 2] = [1 << 20, 1 << 11];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// `sigma_hat (4 / (d + 2))^{1/(d+4)} M^{-1/(d+4)}` with `sigma_hat` the
    /// mean over coordinates of the sample standard deviation.
    Silverman,
}

/// Isotropic Gaussian kernel with the given bandwidth rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdeSpec {
    pub bandwidth: Bandwidth,
}

impl Default for KdeSpec {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Silverman,
        }
    }
}

impl KdeSpec {
    pub fn fixed(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return domain(format!("bandwidth must be finite and > 0, got {sigma}"));
        }
        Ok(Self {
            bandwidth: Bandwidth::Fixed(sigma),
        })
    }

    pub fn silverman() -> Self {
        Self::default()
    }

    /// Kernel standard deviation for this ensemble.
    pub fn resolve(&self, ensemble: &ParticleEnsemble) -> Result<f64> {
        let m = ensemble.len();
        if m < 2 {
            return domain(format!("kernel density estimate needs at least 2 particles, have {m}"));
        }
        let sigma = match self.bandwidth {
            Bandwidth::Fixed(s) => s,
            Bandwidth::Silverman => {
                let d = ensemble.dim();
                let sd: f64 = (0..d).map(|a| sample_std(ensemble, a)).sum::<f64>() / d as f64;
                let d = d as f64;
                sd * (4.0 / (d + 2.0)).powf(1.0 / (d + 4.0)) * (m as f64).powf(-1.0 / (d + 4.0))
            }
        };
        if !(sigma > 0.0) || !sigma.is_finite() {
            return domain(format!("degenerate bandwidth {sigma} (all particles coincide?)"));
        }
        Ok(sigma)
    }
}

fn sample_std(ensemble: &ParticleEnsemble, axis: usize) -> f64 {
    let d = ensemble.dim();
    let m = ensemble.len() as f64;
    let pos = ensemble.positions();
    let mean = pos.iter().skip(axis).step_by(d).sum::<f64>() / m;
    let ss: f64 = pos.iter().skip(axis).step_by(d).map(|x| (x - mean) * (x - mean)).sum();
    (ss / (m - 1.0)).sqrt()
}

/// Exact estimate `M^{-1} sum_i phi_sigma(q - X_i)` at each query point
/// (`queries` flat, `d` coordinates each).
pub fn kde_evaluate(ensemble: &ParticleEnsemble, spec: &KdeSpec, queries: &[f64]) -> Result<Vec<f64>> {
    let sigma = spec.resolve(ensemble)?;
    let d = ensemble.dim();
    if queries.len() % d != 0 {
        return domain(format!("{} query coordinates are not a multiple of d = {d}", queries.len()));
    }
    let norm = (2.0 * std::f64::consts::PI * sigma * sigma).powf(-0.5 * d as f64) / ensemble.len() as f64;
    let inv = 0.5 / (sigma * sigma);
    let pos = ensemble.positions();
    Ok(queries
        .par_chunks(d)
        .map(|q| {
            let mut acc = 0.0;
            for x in pos.chunks(d) {
                let r2: f64 = q.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                acc += (-r2 * inv).exp();
            }
            acc * norm
        })
        .collect())
}

/// Linear binning onto cell centers: each particle's weight `1/M` is split
/// over the surrounding centers. Returns the density field and the fraction
/// of particles that fell outside the hull of the centers.
fn bin(ensemble: &ParticleEnsemble, grid: &GridSpec) -> (Vec<f64>, f64) {
    let d = grid.dim();
    let w = 1.0 / (ensemble.len() as f64 * grid.cell_volume());
    let mut out = vec![0.0; grid.total_cells()];
    let mut outside = 0usize;
    'particles: for x in ensemble.positions().chunks(d) {
        let mut base = [0usize; 2];
        let mut frac = [0.0; 2];
        for a in 0..d {
            let s = (x[a] - grid.lower()[a]) / grid.dx(a) - 0.5;
            let n = grid.cells(a);
            if !(s >= 0.0 && s <= (n - 1) as f64) {
                outside += 1;
                continue 'particles;
            }
            let i = (s.floor() as usize).min(n - 2);
            base[a] = i;
            frac[a] = s - i as f64;
        }
        if d == 1 {
            out[base[0]] += w * (1.0 - frac[0]);
            out[base[0] + 1] += w * frac[0];
        } else {
            let (i, j) = (base[0], base[1]);
            let (fx, fy) = (frac[0], frac[1]);
            out[grid.flatten([i, j])] += w * (1.0 - fx) * (1.0 - fy);
            out[grid.flatten([i + 1, j])] += w * fx * (1.0 - fy);
            out[grid.flatten([i, j + 1])] += w * (1.0 - fx) * fy;
            out[grid.flatten([i + 1, j + 1])] += w * fx * fy;
        }
    }
    (out, outside as f64 / ensemble.len() as f64)
}

/// Binned estimate on `grid`: linear binning followed by a spectral Gaussian
/// smoothing with the kernel's standard deviation. Fails if any particle
/// lies outside the grid or the grid does not resolve the bandwidth.
pub fn kde_grid(ensemble: &ParticleEnsemble, spec: &KdeSpec, grid: &GridSpec) -> Result<GridDensity> {
    if grid.dim() != ensemble.dim() {
        return Err(Error::GridMismatch(format!(
            "ensemble is {}-dimensional, grid is {}-dimensional",
            ensemble.dim(),
            grid.dim()
        )));
    }
    let sigma = spec.resolve(ensemble)?;
    let t = 0.5 * sigma * sigma;
    grid.check_resolves(t, KDE_CELLS_PER_SIGMA, "kernel density bandwidth")?;
    let (binned, outside) = bin(ensemble, grid);
    if outside > 0.0 {
        return Err(Error::BoundaryLeak {
            mass: outside,
            context: "particles outside the density grid".into(),
        });
    }
    let smoothed = fft::heat(grid, &binned, t);
    Ok(GridDensity::clip_renormalize(grid.clone(), smoothed, 1.0))
}

/// Binned estimate on a grid fitted to the ensemble: the bounding box padded
/// by eight bandwidths, with at least [`ADAPTIVE_CELLS_PER_SIGMA`] cells per
/// bandwidth. This is the feedback density of the self-contained mode.
pub fn kde_adaptive(ensemble: &ParticleEnsemble, spec: &KdeSpec) -> Result<GridDensity> {
    let sigma = spec.resolve(ensemble)?;
    let d = ensemble.dim();
    let (mut lower, mut upper, mut cells) = (vec![], vec![], vec![]);
    for a in 0..d {
        let coords = ensemble.positions().iter().skip(a).step_by(d);
        let lo = coords.clone().fold(f64::INFINITY, |m, v| m.min(*v)) - 8.0 * sigma;
        let hi = coords.fold(f64::NEG_INFINITY, |m, v| m.max(*v)) + 8.0 * sigma;
        let want = ((hi - lo) * ADAPTIVE_CELLS_PER_SIGMA / sigma).ceil() as usize;
        let n = want.max(2).next_power_of_two();
        if n > ADAPTIVE_MAX_CELLS[d - 1] {
            return Err(Error::Resolution {
                what: format!(
                    "adaptive kernel density grid (sigma = {sigma:.4e}, need {n} cells per axis, limit {})",
                    ADAPTIVE_MAX_CELLS[d - 1]
                ),
                required: sigma / ADAPTIVE_CELLS_PER_SIGMA,
                actual: (hi - lo) / ADAPTIVE_MAX_CELLS[d - 1] as f64,
            });
        }
        lower.push(lo);
        upper.push(hi);
        cells.push(n);
    }
    kde_grid(ensemble, spec, &GridSpec::new(lower, upper, cells)?)
}
