//! Uniform-grid probability densities.
//!
//! A [`GridDensity`] stores cell-center values of a nonnegative, unit-mass
//! density on a box in one or two dimensions. Quadrature is the midpoint rule
//! and every convolution is periodic on the box, so the box must be large
//! enough that the data never wraps around (see [`GridDensity::padding_mass`]).

mod io;

pub use io::{read_binary, write_binary, write_csv, GRID_MAGIC};

use rayon::prelude::*;

use crate::error::{domain, Error, Result};
use crate::fft;
use crate::heat_kernel;
use crate::initial::InitialDistribution;

/// Default tolerance on `|mass - 1|`.
pub const MASS_TOL: f64 = 1e-6;
/// Default budget for mass near or across the domain boundary.
pub const LEAK_TOL: f64 = 1e-8;
/// Largest admissible displacement of a pushforward, as a fraction of the
/// domain half-width.
pub const SAFETY_FRACTION: f64 = 0.25;
/// Minimum number of cells per standard deviation `sqrt(2t)` for a
/// diffusion step.
pub const CELLS_PER_SIGMA: f64 = 4.0;

/// Axis-aligned uniform grid with a power-of-two number of cells per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
    cells: Vec<usize>,
}

impl GridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, cells: Vec<usize>) -> Result<Self> {
        let d = lower.len();
        if d == 0 || d > 2 {
            return domain(format!("grid dimension must be 1 or 2, got {d}"));
        }
        if upper.len() != d || cells.len() != d {
            return domain("grid bounds and cell counts disagree in dimension");
        }
        for axis in 0..d {
            if !(lower[axis].is_finite() && upper[axis].is_finite() && upper[axis] > lower[axis]) {
                return domain(format!(
                    "axis {axis}: need finite lower < upper, got [{}, {}]",
                    lower[axis], upper[axis]
                ));
            }
            if cells[axis] < 2 || !cells[axis].is_power_of_two() {
                return domain(format!(
                    "axis {axis}: cell count {} is not a power of two >= 2",
                    cells[axis]
                ));
            }
        }
        Ok(Self {
            lower,
            upper,
            cells,
        })
    }

    /// Symmetric box `[-half_width, half_width]^d` with `cells` per axis.
    pub fn symmetric(dim: usize, half_width: f64, cells: usize) -> Result<Self> {
        Self::new(vec![-half_width; dim], vec![half_width; dim], vec![cells; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn cells(&self, axis: usize) -> usize {
        self.cells[axis]
    }

    pub fn cell_counts(&self) -> &[usize] {
        &self.cells
    }

    pub fn length(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    pub fn dx(&self, axis: usize) -> f64 {
        self.length(axis) / self.cells[axis] as f64
    }

    pub fn min_dx(&self) -> f64 {
        (0..self.dim()).map(|a| self.dx(a)).fold(f64::INFINITY, f64::min)
    }

    pub fn max_dx(&self) -> f64 {
        (0..self.dim()).map(|a| self.dx(a)).fold(0.0, f64::max)
    }

    pub fn half_width(&self) -> f64 {
        (0..self.dim())
            .map(|a| 0.5 * self.length(a))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.dx(a)).product()
    }

    pub fn total_cells(&self) -> usize {
        self.cells.iter().product()
    }

    /// Multi-index of a flat (row-major, axis 0 slowest) cell index.
    pub fn unflatten(&self, idx: usize) -> [usize; 2] {
        match self.dim() {
            1 => [idx, 0],
            _ => [idx / self.cells[1], idx % self.cells[1]],
        }
    }

    pub fn flatten(&self, ix: [usize; 2]) -> usize {
        match self.dim() {
            1 => ix[0],
            _ => ix[0] * self.cells[1] + ix[1],
        }
    }

    pub fn center_coord(&self, axis: usize, i: usize) -> f64 {
        self.lower[axis] + (i as f64 + 0.5) * self.dx(axis)
    }

    /// Cell-center coordinates of a flat index, written into `out`.
    pub fn center_into(&self, idx: usize, out: &mut [f64]) {
        let ix = self.unflatten(idx);
        for (axis, slot) in out.iter_mut().enumerate().take(self.dim()) {
            *slot = self.center_coord(axis, ix[axis]);
        }
    }

    pub fn center(&self, idx: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.center_into(idx, &mut x);
        x
    }

    /// Same grid with every axis refined or coarsened by a power of two.
    pub fn with_cells(&self, cells: usize) -> Result<Self> {
        Self::new(self.lower.clone(), self.upper.clone(), vec![cells; self.dim()])
    }

    /// Fails unless `sqrt(2t)` spans at least `per_sigma` cells on every axis.
    pub fn check_resolves(&self, t: f64, per_sigma: f64, what: &str) -> Result<()> {
        let sigma = (2.0 * t).sqrt();
        let required = sigma / per_sigma;
        let actual = self.max_dx();
        if actual > required * (1.0 + 1e-12) {
            let width = (0..self.dim()).map(|a| self.length(a)).fold(0.0, f64::max);
            let need = (width / required).ceil() as usize;
            return Err(Error::Resolution {
                what: format!(
                    "{what} (sigma = {sigma:.4e}, need at least {} cells per axis)",
                    need.next_power_of_two()
                ),
                required,
                actual,
            });
        }
        Ok(())
    }
}

/// Nonnegative unit-mass density sampled at cell centers.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    spec: GridSpec,
    values: Vec<f64>,
    mass: f64,
    clipped: f64,
}

impl GridDensity {
    /// Wraps cell values, checking nonnegativity, finiteness and unit mass
    /// within [`MASS_TOL`].
    pub fn from_values(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.total_cells() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} cells",
                values.len(),
                spec.total_cells()
            )));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return domain(format!("cell {i} holds {v}; densities are finite and >= 0"));
        }
        let density = Self::raw(spec, values);
        if (density.mass - 1.0).abs() > MASS_TOL {
            return domain(format!("mass {} differs from 1 by more than {MASS_TOL}", density.mass));
        }
        Ok(density)
    }

    pub(crate) fn raw(spec: GridSpec, values: Vec<f64>) -> Self {
        let mass = values.iter().sum::<f64>() * spec.cell_volume();
        Self {
            spec,
            values,
            mass,
            clipped: 0.0,
        }
    }

    /// Discretized density of `X0 + sqrt(2) W_{t_smooth}` with `X0 ~ dist`.
    ///
    /// Atoms (point masses, zero-variance mixture components) need
    /// `t_smooth > 0`; Gaussian pieces are handled in closed form and
    /// grid-sampled densities are smoothed spectrally.
    pub fn from_initial(dist: &InitialDistribution, spec: &GridSpec, t_smooth: f64) -> Result<Self> {
        if !(t_smooth >= 0.0) || !t_smooth.is_finite() {
            return domain(format!("smoothing time must be finite and >= 0, got {t_smooth}"));
        }
        if dist.dim() != spec.dim() {
            return Err(Error::GridMismatch(format!(
                "initial law is {}-dimensional, grid is {}-dimensional",
                dist.dim(),
                spec.dim()
            )));
        }
        match dist {
            InitialDistribution::PointMass { x0 } => {
                Self::from_gaussian_pieces(spec, &[(1.0, x0.clone(), 0.0)], t_smooth)
            }
            InitialDistribution::GaussianMixture {
                weights,
                means,
                variances,
            } => {
                let pieces: Vec<_> = weights
                    .iter()
                    .zip(means)
                    .zip(variances)
                    .map(|((w, m), v)| (*w, m.clone(), *v))
                    .collect();
                Self::from_gaussian_pieces(spec, &pieces, t_smooth)
            }
            InitialDistribution::GridSampled { density, .. } => {
                if density.spec() != spec {
                    return Err(Error::GridMismatch(
                        "grid-sampled initial density lives on a different grid".into(),
                    ));
                }
                if t_smooth == 0.0 {
                    Ok(density.clone())
                } else {
                    density.gaussian_convolve(t_smooth)
                }
            }
        }
    }

    /// Mixture of `weight * g(variance / 2 + t_smooth, . - mean)`.
    fn from_gaussian_pieces(spec: &GridSpec, pieces: &[(f64, Vec<f64>, f64)], t_smooth: f64) -> Result<Self> {
        for (_, _, var) in pieces {
            let t = 0.5 * var + t_smooth;
            if t <= 0.0 {
                return domain("an atom has no grid density: smoothing time must be > 0");
            }
            spec.check_resolves(t, CELLS_PER_SIGMA, "initial Gaussian component")?;
        }
        let d = spec.dim();
        let values: Vec<f64> = (0..spec.total_cells())
            .into_par_iter()
            .map_init(
                || (vec![0.0; d], vec![0.0; d]),
                |(x, diff), idx| {
                    spec.center_into(idx, x);
                    pieces
                        .iter()
                        .map(|(w, mean, var)| {
                            for a in 0..d {
                                diff[a] = x[a] - mean[a];
                            }
                            w * heat_kernel::eval_unchecked(0.5 * var + t_smooth, diff)
                        })
                        .sum()
                },
            )
            .collect();
        let density = Self::raw(spec.clone(), values);
        if (density.mass - 1.0).abs() > MASS_TOL {
            return Err(Error::BoundaryLeak {
                mass: (density.mass - 1.0).abs(),
                context: "initial law is not contained in the grid".into(),
            });
        }
        Ok(density)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    /// Mass removed by clipping negative values in the operation that
    /// produced this density.
    pub fn clipped_mass(&self) -> f64 {
        self.clipped
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Midpoint quadrature of `f * density`.
    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        let mut x = vec![0.0; self.spec.dim()];
        let mut acc = 0.0;
        for (idx, v) in self.values.iter().enumerate() {
            if *v != 0.0 {
                self.spec.center_into(idx, &mut x);
                acc += v * f(&x);
            }
        }
        acc * self.spec.cell_volume()
    }

    pub fn mean(&self) -> Vec<f64> {
        (0..self.spec.dim())
            .map(|a| self.integrate(|x| x[a]) / self.mass)
            .collect()
    }

    fn check_same_grid(&self, other: &Self) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::GridMismatch(format!(
                "{:?} vs {:?}",
                self.spec, other.spec
            )));
        }
        Ok(())
    }

    /// Quadrature of `|a - b|`.
    pub fn l1_distance(&self, other: &Self) -> Result<f64> {
        self.check_same_grid(other)?;
        let s: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(s * self.spec.cell_volume())
    }

    pub fn sup_distance(&self, other: &Self) -> Result<f64> {
        self.check_same_grid(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Quadrature `L^q` norm for `q` in `(1, inf]`.
    pub fn lq_norm(&self, q: f64) -> Result<f64> {
        if q.is_nan() || q <= 1.0 {
            return domain(format!("L^q norm needs q in (1, inf], got {q}"));
        }
        if q.is_infinite() {
            return Ok(self.max_value());
        }
        let s: f64 = self.values.iter().map(|v| v.powf(q)).sum();
        Ok((s * self.spec.cell_volume()).powf(1.0 / q))
    }

    /// Mass held by cells whose center lies within `width` of the boundary.
    pub fn padding_mass(&self, width: f64) -> f64 {
        let d = self.spec.dim();
        let mut acc = 0.0;
        for (idx, v) in self.values.iter().enumerate() {
            let ix = self.spec.unflatten(idx);
            let near = (0..d).any(|a| {
                let x = self.spec.center_coord(a, ix[a]);
                x - self.spec.lower[a] < width || self.spec.upper[a] - x < width
            });
            if near {
                acc += v;
            }
        }
        acc * self.spec.cell_volume()
    }

    /// Upper bound on the mass a diffusion over time `t` carries across the
    /// boundary: each cell contributes its mass times the Gaussian tail bound
    /// of `N(0, 2t)` at its distance `r` to each face.
    pub fn wrap_estimate(&self, t: f64) -> f64 {
        let d = self.spec.dim();
        let mut acc = 0.0;
        for (idx, v) in self.values.iter().enumerate() {
            if *v == 0.0 {
                continue;
            }
            let ix = self.spec.unflatten(idx);
            let mut tail = 0.0;
            for a in 0..d {
                let x = self.spec.center_coord(a, ix[a]);
                let lo = x - self.spec.lower[a];
                let hi = self.spec.upper[a] - x;
                tail += gaussian_tail(lo, t) + gaussian_tail(hi, t);
            }
            acc += v * tail.min(1.0);
        }
        acc * self.spec.cell_volume()
    }

    /// Mass in the outermost layer of cells.
    pub fn boundary_mass(&self) -> f64 {
        self.padding_mass(self.spec.max_dx())
    }

    /// `g(t, .) * a` by periodic spectral convolution, followed by clipping
    /// of negative ringing and renormalization to the input mass.
    pub fn gaussian_convolve(&self, t: f64) -> Result<Self> {
        if !(t > 0.0) || !t.is_finite() {
            return domain(format!("diffusion time must be > 0, got {t}"));
        }
        self.spec.check_resolves(t, CELLS_PER_SIGMA, "diffusion step")?;
        let wrap = self.wrap_estimate(t);
        if wrap > LEAK_TOL {
            return Err(Error::BoundaryLeak {
                mass: wrap,
                context: format!(
                    "diffusion over t = {t} would wrap around the periodic box; enlarge the domain by {:.3}",
                    6.0 * (2.0 * t).sqrt()
                ),
            });
        }
        let smoothed = fft::heat(&self.spec, &self.values, t);
        Ok(Self::clip_renormalize(self.spec.clone(), smoothed, self.mass))
    }

    pub(crate) fn clip_renormalize(spec: GridSpec, mut values: Vec<f64>, target_mass: f64) -> Self {
        let vol = spec.cell_volume();
        let mut clipped = 0.0;
        for v in values.iter_mut() {
            if *v < 0.0 {
                clipped -= *v;
                *v = 0.0;
            }
        }
        clipped *= vol;
        let mut out = Self::raw(spec, values);
        if clipped > 0.0 && out.mass > 0.0 {
            let scale = target_mass / out.mass;
            out.values.iter_mut().for_each(|v| *v *= scale);
            out.mass = out.values.iter().sum::<f64>() * vol;
        }
        out.clipped = clipped;
        out
    }

    /// Pushforward of `a dx` under `x -> x + h * shift_field(x)`.
    pub fn drift_pushforward(&self, shift_field: impl Fn(&[f64]) -> Vec<f64> + Sync, h: f64) -> Result<Self> {
        let d = self.spec.dim();
        let shifts: Vec<f64> = (0..self.spec.total_cells())
            .into_par_iter()
            .flat_map_iter(|idx| {
                let x = self.spec.center(idx);
                let v = shift_field(&x);
                v.into_iter().take(d).map(move |c| h * c)
            })
            .collect();
        self.pushforward_by(&shifts)
    }

    /// Pushforward by precomputed per-cell displacements (`dim` entries per
    /// cell, row-major).
    pub fn pushforward_by(&self, displacements: &[f64]) -> Result<Self> {
        if displacements.iter().all(|s| *s == 0.0) {
            return Ok(self.clone());
        }
        let (values, wrapped) = pushforward_field(&self.spec, &self.values, displacements)?;
        if wrapped > LEAK_TOL {
            return Err(Error::BoundaryLeak {
                mass: wrapped,
                context: "pushforward moved mass across the domain edge".into(),
            });
        }
        Ok(Self::raw(self.spec.clone(), values))
    }

    /// `g(t, .) * T_#(a dx)` where `T` moves each cell center `x_i` to
    /// `x_i + displacements_i` exactly. The moved cell masses are spread with
    /// a sampled Gaussian at [`CELLS_PER_SIGMA`] cells per standard deviation
    /// and the remaining diffusion time is applied spectrally, so unlike
    /// [`Self::pushforward_by`] no first-order smearing is introduced.
    pub fn transport_convolve(&self, displacements: &[f64], t: f64) -> Result<Self> {
        if !(t > 0.0) || !t.is_finite() {
            return domain(format!("diffusion time must be > 0, got {t}"));
        }
        if displacements.iter().all(|s| *s == 0.0) {
            return self.gaussian_convolve(t);
        }
        self.spec.check_resolves(t, CELLS_PER_SIGMA, "diffusion step")?;
        let s = gridding_time(&self.spec).min(t);
        let (mut fields, wrap) = spread_shifted(&self.spec, &[&self.values], displacements, s, t)?;
        if wrap > LEAK_TOL {
            return Err(Error::BoundaryLeak {
                mass: wrap,
                context: format!("transport and diffusion over t = {t} would wrap around the periodic box"),
            });
        }
        let mut values = fields.pop().expect("one field in, one field out");
        if t > s {
            values = fft::heat(&self.spec, &values, t - s);
        }
        Ok(Self::clip_renormalize(self.spec.clone(), values, self.mass))
    }

    /// Multilinear interpolation of cell-center values, clamped to the edge
    /// cells outside the hull of the centers.
    pub fn value_at(&self, x: &[f64]) -> f64 {
        let d = self.spec.dim();
        let mut base = [0usize; 2];
        let mut frac = [0.0f64; 2];
        for a in 0..d {
            let n = self.spec.cells[a];
            let s = (x[a] - self.spec.lower[a]) / self.spec.dx(a) - 0.5;
            let s = s.clamp(0.0, (n - 1) as f64);
            let i = (s.floor() as usize).min(n - 2);
            base[a] = i;
            frac[a] = s - i as f64;
        }
        match d {
            1 => {
                let v = &self.values;
                v[base[0]] * (1.0 - frac[0]) + v[base[0] + 1] * frac[0]
            }
            _ => {
                let at = |i: usize, j: usize| self.values[self.spec.flatten([i, j])];
                let (i, j) = (base[0], base[1]);
                let (fx, fy) = (frac[0], frac[1]);
                at(i, j) * (1.0 - fx) * (1.0 - fy)
                    + at(i + 1, j) * fx * (1.0 - fy)
                    + at(i, j + 1) * (1.0 - fx) * fy
                    + at(i + 1, j + 1) * fx * fy
            }
        }
    }

    /// Conservative restriction onto a grid with `factor` times fewer cells
    /// per axis (cell averages of aligned blocks).
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !factor.is_power_of_two() {
            return domain(format!("coarsening factor must be a power of two, got {factor}"));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let d = self.spec.dim();
        let coarse_cells: Vec<usize> = self.spec.cells.iter().map(|n| n / factor).collect();
        if coarse_cells.iter().any(|n| *n < 2) {
            return domain("coarsening would leave fewer than 2 cells per axis");
        }
        let coarse = GridSpec::new(self.spec.lower.clone(), self.spec.upper.clone(), coarse_cells)?;
        let mut values = vec![0.0; coarse.total_cells()];
        for (idx, v) in self.values.iter().enumerate() {
            let ix = self.spec.unflatten(idx);
            let cx = [ix[0] / factor, if d > 1 { ix[1] / factor } else { 0 }];
            values[coarse.flatten(cx)] += v;
        }
        let scale = 1.0 / (factor.pow(d as u32) as f64);
        values.iter_mut().for_each(|v| *v *= scale);
        Ok(Self::raw(coarse, values))
    }
}

/// `P(Z > r)` for `Z ~ N(0, 2t)`, bounded by the Chernoff and Mills-ratio
/// estimates.
fn gaussian_tail(r: f64, t: f64) -> f64 {
    let sigma = (2.0 * t).sqrt();
    let mills = if r > 0.0 {
        sigma / (r * (2.0 * std::f64::consts::PI).sqrt())
    } else {
        1.0
    };
    (-r * r / (4.0 * t)).exp() * mills.min(1.0)
}

/// Diffusion time of the spreading kernel used for off-grid point masses.
pub(crate) fn gridding_time(spec: &GridSpec) -> f64 {
    let sigma = CELLS_PER_SIGMA * spec.max_dx();
    0.5 * sigma * sigma
}

/// For each field `f`, cell values of `sum_i f_i vol g(s, y - x_i - u_i)`
/// with `x_i` the cell centers and `u_i` the displacements; distances are
/// periodic and the kernel is cut at eight standard deviations. Also returns
/// a Gaussian-tail bound on the content a diffusion over `t_total` from the
/// moved points carries across the boundary.
pub(crate) fn spread_shifted(
    spec: &GridSpec,
    fields: &[&[f64]],
    displacements: &[f64],
    s: f64,
    t_total: f64,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let d = spec.dim();
    let total = spec.total_cells();
    if displacements.len() != total * d || fields.iter().any(|f| f.len() != total) {
        return Err(Error::GridMismatch(format!(
            "{} displacement components for {total} cells in {d}-d",
            displacements.len()
        )));
    }
    let limit = SAFETY_FRACTION * spec.half_width();
    if let Some(u) = displacements.iter().find(|u| !u.is_finite() || u.abs() > limit) {
        return domain(format!(
            "displacement {u} exceeds {SAFETY_FRACTION} of the domain half-width ({limit})"
        ));
    }
    let vol = spec.cell_volume();
    let n = [spec.cells(0), if d > 1 { spec.cells(1) } else { 1 }];
    let dx = [spec.dx(0), if d > 1 { spec.dx(1) } else { 1.0 }];
    let active: Vec<usize> = (0..total).filter(|&i| fields.iter().any(|f| f[i] != 0.0)).collect();

    // moved positions in fractional cell-index units, and their home buckets
    let mut pos = vec![[0.0f64; 2]; total];
    let mut wrap = 0.0;
    let mut counts = vec![0usize; total + 1];
    let mut home = vec![0usize; total];
    for &i in &active {
        let ix = spec.unflatten(i);
        let mut b = [0usize; 2];
        let mut tail = 0.0;
        for a in 0..d {
            let u = displacements[i * d + a];
            let x = spec.center_coord(a, ix[a]) + u;
            tail += gaussian_tail(x - spec.lower[a], t_total) + gaussian_tail(spec.upper[a] - x, t_total);
            let p = ix[a] as f64 + u / dx[a];
            pos[i][a] = p;
            b[a] = (p.round() as i64).rem_euclid(n[a] as i64) as usize;
        }
        let weight: f64 = fields.iter().map(|f| f[i].abs()).fold(0.0, f64::max);
        wrap += weight * vol * tail.min(1.0);
        home[i] = spec.flatten(b);
        counts[home[i] + 1] += 1;
    }
    for c in 1..=total {
        counts[c] += counts[c - 1];
    }
    let mut fill = counts.clone();
    let mut members = vec![0usize; active.len()];
    for &i in &active {
        members[fill[home[i]]] = i;
        fill[home[i]] += 1;
    }

    let sigma = (2.0 * s).sqrt();
    let reach = [
        (8.0 * sigma / dx[0]).ceil() as i64 + 1,
        if d > 1 { (8.0 * sigma / dx[1]).ceil() as i64 + 1 } else { 0 },
    ];
    let cut2 = 64.0 * sigma * sigma;
    let norm = (4.0 * std::f64::consts::PI * s).powf(-0.5 * d as f64) * vol;
    let inv = 0.25 / s;
    let periodic = |delta: f64, a: usize| {
        let len = n[a] as f64;
        (delta - len * (delta / len).round()) * dx[a]
    };
    let nf = fields.len();
    let mut out = vec![0.0; total * nf];
    out.par_chunks_mut(nf).enumerate().for_each(|(j, acc)| {
        let jx = spec.unflatten(j);
        for o0 in -reach[0]..=reach[0] {
            let b0 = (jx[0] as i64 - o0).rem_euclid(n[0] as i64) as usize;
            for o1 in -reach[1]..=reach[1] {
                let b1 = (jx[1] as i64 - o1).rem_euclid(n[1] as i64) as usize;
                let b = spec.flatten([b0, b1]);
                for &i in &members[counts[b]..counts[b + 1]] {
                    let mut r2 = 0.0;
                    for a in 0..d {
                        let r = periodic(jx[a] as f64 - pos[i][a], a);
                        r2 += r * r;
                    }
                    if r2 > cut2 {
                        continue;
                    }
                    let w = norm * (-r2 * inv).exp();
                    for (c, f) in acc.iter_mut().zip(fields) {
                        *c += w * f[i];
                    }
                }
            }
        }
    });
    let split = (0..nf)
        .map(|c| out.iter().skip(c).step_by(nf).copied().collect())
        .collect();
    Ok((split, wrap))
}

/// Conservative redistribution of a (possibly signed) cell field under
/// per-cell displacements. Each source cell is translated rigidly and its
/// content split over the overlapped destination cells in proportion to the
/// overlap volume. Destinations outside the box wrap periodically; the
/// absolute amount that wrapped is returned alongside the field.
pub(crate) fn pushforward_field(spec: &GridSpec, field: &[f64], displacements: &[f64]) -> Result<(Vec<f64>, f64)> {
    let d = spec.dim();
    if displacements.len() != field.len() * d {
        return Err(Error::GridMismatch(format!(
            "{} displacement components for {} cells in {d}-d",
            displacements.len(),
            field.len()
        )));
    }
    let limit = SAFETY_FRACTION * spec.half_width();
    if let Some(s) = displacements.iter().find(|s| !s.is_finite() || s.abs() > limit) {
        return domain(format!(
            "displacement {s} exceeds {SAFETY_FRACTION} of the domain half-width ({limit})"
        ));
    }
    let vol = spec.cell_volume();
    let mut out = vec![0.0; field.len()];
    let mut wrapped = 0.0;
    let n0 = spec.cells(0) as i64;
    let n1 = if d > 1 { spec.cells(1) as i64 } else { 1 };
    let split = |s: f64, dx: f64| {
        let offset = s / dx;
        let whole = offset.floor();
        (whole as i64, offset - whole)
    };
    for (idx, &m) in field.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let ix = spec.unflatten(idx);
        let (k0, f0) = split(displacements[idx * d], spec.dx(0));
        let (k1, f1) = if d > 1 {
            split(displacements[idx * d + 1], spec.dx(1))
        } else {
            (0, 0.0)
        };
        let targets0 = [(ix[0] as i64 + k0, 1.0 - f0), (ix[0] as i64 + k0 + 1, f0)];
        let targets1 = [(ix[1] as i64 + k1, 1.0 - f1), (ix[1] as i64 + k1 + 1, f1)];
        for &(i, w0) in &targets0 {
            if w0 == 0.0 {
                continue;
            }
            for &(j, w1) in targets1.iter().take(if d > 1 { 2 } else { 1 }) {
                let w = if d > 1 { w0 * w1 } else { w0 };
                if w == 0.0 {
                    continue;
                }
                let (wi, wj) = (i.rem_euclid(n0), j.rem_euclid(n1));
                if wi != i || wj != j {
                    wrapped += (m * w).abs() * vol;
                }
                out[spec.flatten([wi as usize, wj as usize])] += m * w;
            }
        }
    }
    Ok((out, wrapped))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(half: f64, cells: usize) -> GridSpec {
        GridSpec::symmetric(1, half, cells).unwrap()
    }

    fn uniform_pm1(spec: &GridSpec) -> GridDensity {
        InitialDistribution::uniform_box(spec, &[-1.0], &[1.0])
            .unwrap()
            .grid_density()
            .unwrap()
            .clone()
    }

    #[test]
    fn spec_rejects_non_power_of_two() {
        assert!(GridSpec::new(vec![0.0], vec![1.0], vec![100]).is_err());
        assert!(GridSpec::new(vec![0.0; 3], vec![1.0; 3], vec![8; 3]).is_err());
        let s = line(4.0, 64);
        assert_eq!(s.dx(0), 8.0 / 64.0);
    }

    #[test]
    fn point_mass_needs_smoothing() {
        let spec = line(8.0, 512);
        let pm = InitialDistribution::point_mass(vec![0.0]);
        assert!(matches!(
            GridDensity::from_initial(&pm, &spec, 0.0),
            Err(Error::Domain(_))
        ));
        let h = 1.0 / 16.0;
        let rho = GridDensity::from_initial(&pm, &spec, h).unwrap();
        assert!((rho.mass() - 1.0).abs() < 1e-6);
        for idx in 0..spec.total_cells() {
            let x = spec.center(idx);
            assert!((rho.values()[idx] - heat_kernel::eval(h, &x).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn gaussian_initial_is_shifted_heat_kernel() {
        let spec = line(10.0, 1024);
        let sigma2 = 0.3;
        let s = 0.2;
        let dist = InitialDistribution::gaussian(vec![0.0], 2.0 * sigma2).unwrap();
        let rho = GridDensity::from_initial(&dist, &spec, s).unwrap();
        for idx in (0..spec.total_cells()).step_by(7) {
            let x = spec.center(idx);
            let expect = heat_kernel::eval(sigma2 + s, &x).unwrap();
            assert!((rho.values()[idx] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn uniform_sample_is_half_on_support() {
        let spec = line(4.0, 256);
        let rho = uniform_pm1(&spec);
        assert!((rho.mass() - 1.0).abs() < 1e-14);
        for idx in 0..spec.total_cells() {
            let x = spec.center(idx)[0];
            let expect = if x.abs() < 1.0 { 0.5 } else { 0.0 };
            assert_eq!(rho.values()[idx], expect);
        }
    }

    #[test]
    fn l1_distance_cases() {
        let spec = line(8.0, 512);
        let a = uniform_pm1(&spec);
        assert_eq!(a.l1_distance(&a).unwrap(), 0.0);
        let b = InitialDistribution::uniform_box(&spec, &[2.0], &[4.0])
            .unwrap()
            .grid_density()
            .unwrap()
            .clone();
        assert!((a.l1_distance(&b).unwrap() - 2.0).abs() < 1e-8);
        let other = line(8.0, 256);
        let c = InitialDistribution::uniform_box(&other, &[-1.0], &[1.0])
            .unwrap()
            .grid_density()
            .unwrap()
            .clone();
        assert!(matches!(a.l1_distance(&c), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn lq_norm_cases() {
        let spec = line(4.0, 256);
        let u = uniform_pm1(&spec);
        assert!((u.lq_norm(2.0).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(u.lq_norm(1.0).is_err());
        assert!(u.lq_norm(0.5).is_err());
        let t = 0.5;
        let spec = line(10.0, 1024);
        let g = GridDensity::from_initial(&InitialDistribution::point_mass(vec![-spec.dx(0) / 2.0]), &spec, t)
            .unwrap();
        let peak = (4.0 * std::f64::consts::PI * t).powf(-0.5);
        assert!((g.lq_norm(f64::INFINITY).unwrap() - peak).abs() < 1e-14);
    }

    #[test]
    fn convolve_uniform_keeps_mass() {
        let spec = line(8.0, 512);
        let u = uniform_pm1(&spec);
        let t = 0.01;
        let s = u.gaussian_convolve(t).unwrap();
        assert!((s.mass() - 1.0).abs() < 1e-12);
        assert!(s.values().iter().all(|v| *v >= 0.0));
        assert!(s.clipped_mass() <= 1e-10);
    }

    #[test]
    fn convolve_rejects_under_resolution_and_leaks() {
        let spec = line(8.0, 64);
        let u = uniform_pm1(&spec);
        let err = u.gaussian_convolve(1e-4).unwrap_err();
        assert!(matches!(err, Error::Resolution { .. }), "{err}");
        assert!(err.to_string().contains("cells per axis"));
        let wide = InitialDistribution::uniform_box(&spec, &[-7.0], &[7.0])
            .unwrap()
            .grid_density()
            .unwrap()
            .clone();
        assert!(matches!(wide.gaussian_convolve(1.0), Err(Error::BoundaryLeak { .. })));
    }

    #[test]
    fn convolve_semigroup() {
        let spec = line(16.0, 2048);
        let a = GridDensity::from_initial(&InitialDistribution::point_mass(vec![0.3]), &spec, 0.2).unwrap();
        let once = a.gaussian_convolve(0.4).unwrap();
        let twice = a.gaussian_convolve(0.2).unwrap().gaussian_convolve(0.2).unwrap();
        assert!(once.sup_distance(&twice).unwrap() < 1e-8);
    }

    #[test]
    fn convolve_commutes_with_cell_translation() {
        let spec = line(8.0, 512);
        let u = uniform_pm1(&spec);
        let shift = 5;
        let mut shifted = vec![0.0; 512];
        for i in 0..512 {
            shifted[(i + shift) % 512] = u.values()[i];
        }
        let us = GridDensity::from_values(spec.clone(), shifted).unwrap();
        let a = u.gaussian_convolve(0.05).unwrap();
        let b = us.gaussian_convolve(0.05).unwrap();
        for i in 0..512 {
            assert!((a.values()[i] - b.values()[(i + shift) % 512]).abs() < 1e-13);
        }
    }

    #[test]
    fn pushforward_zero_is_identity() {
        let spec = line(8.0, 256);
        let u = uniform_pm1(&spec).gaussian_convolve(0.05).unwrap();
        let p = u.drift_pushforward(|_| vec![0.0], 0.1).unwrap();
        assert_eq!(p.values(), u.values());
    }

    #[test]
    fn pushforward_exact_cells_is_translation() {
        // dx = 1/32 exactly, h * c = 3/32
        let spec = line(8.0, 512);
        let u = GridDensity::from_initial(&InitialDistribution::point_mass(vec![0.0]), &spec, 0.1).unwrap();
        let p = u.drift_pushforward(|_| vec![0.75], 0.125).unwrap();
        for i in 0..512 {
            assert_eq!(p.values()[(i + 3) % 512], u.values()[i]);
        }
        let back = u.drift_pushforward(|_| vec![-0.75], 0.125).unwrap();
        for i in 0..512 {
            assert_eq!(back.values()[i], u.values()[(i + 3) % 512]);
        }
    }

    #[test]
    fn pushforward_generic_shift_moves_mean() {
        let spec = line(8.0, 512);
        let u = GridDensity::from_initial(&InitialDistribution::point_mass(vec![0.0]), &spec, 0.1).unwrap();
        let (h, c) = (0.1, 0.377);
        let p = u.drift_pushforward(|_| vec![c], h).unwrap();
        assert!((p.mass() - u.mass()).abs() < 1e-14);
        let dx = spec.dx(0);
        assert!((p.mean()[0] - u.mean()[0] - h * c).abs() < dx * dx);
    }

    #[test]
    fn pushforward_rejects_large_and_leaking_maps() {
        let spec = line(4.0, 256);
        let u = uniform_pm1(&spec);
        assert!(matches!(u.drift_pushforward(|_| vec![10.0], 0.5), Err(Error::Domain(_))));
        let edge = InitialDistribution::uniform_box(&spec, &[3.0], &[4.0])
            .unwrap()
            .grid_density()
            .unwrap()
            .clone();
        assert!(matches!(
            edge.drift_pushforward(|_| vec![1.0], 0.5),
            Err(Error::BoundaryLeak { .. })
        ));
    }

    #[test]
    fn two_dimensional_pushforward_and_convolution() {
        let spec = GridSpec::symmetric(2, 8.0, 128).unwrap();
        let g = GridDensity::from_initial(&InitialDistribution::point_mass(vec![0.0, 0.0]), &spec, 0.3).unwrap();
        let p = g.drift_pushforward(|_| vec![0.31, -0.17], 0.5).unwrap();
        assert!((p.mass() - 1.0).abs() < 1e-12);
        let m = p.mean();
        let dx = spec.dx(0);
        assert!((m[0] - 0.155).abs() < dx * dx && (m[1] + 0.085).abs() < dx * dx);
        let c = g.gaussian_convolve(0.2).unwrap();
        let exact = GridDensity::from_initial(&InitialDistribution::point_mass(vec![0.0, 0.0]), &spec, 0.5).unwrap();
        assert!(c.sup_distance(&exact).unwrap() < 1e-10);
    }

    #[test]
    fn coarsen_preserves_mass() {
        let spec = line(8.0, 512);
        let u = GridDensity::from_initial(&InitialDistribution::point_mass(vec![0.1]), &spec, 0.2).unwrap();
        let c = u.coarsen(4).unwrap();
        assert_eq!(c.spec().cells(0), 128);
        assert!((c.mass() - u.mass()).abs() < 1e-14);
    }

    #[test]
    fn interpolation_reproduces_linear_data() {
        let spec = line(4.0, 64);
        let vals: Vec<f64> = (0..64).map(|i| 1.0 + 0.01 * i as f64).collect();
        let raw = GridDensity::raw(spec.clone(), vals);
        let x = spec.center_coord(0, 10) + 0.3 * spec.dx(0);
        assert!((raw.value_at(&[x]) - (1.0 + 0.01 * 10.3)).abs() < 1e-13);
    }
}
