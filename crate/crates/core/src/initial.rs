//! Initial laws `nu_0` of the particle system.

use crate::error::{domain, Result};
use crate::grid::{GridDensity, GridSpec, MASS_TOL};

#[derive(Debug, Clone, PartialEq)]
pub enum InitialDistribution {
    PointMass {
        x0: Vec<f64>,
    },
    /// Isotropic Gaussian components `N(mean, variance * I)`; a zero
    /// variance is an atom.
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<f64>,
    },
    /// Absolutely continuous law given by its grid density, with an optional
    /// integrability exponent `q` for which `||rho_0||_q` is finite.
    GridSampled {
        density: GridDensity,
        lq_exponent: Option<f64>,
    },
}

impl InitialDistribution {
    pub fn point_mass(x0: Vec<f64>) -> Self {
        Self::PointMass { x0 }
    }

    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::mixture(vec![1.0], vec![mean], vec![variance])
    }

    pub fn mixture(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != variances.len() {
            return domain("mixture needs equally many weights, means and variances (at least one)");
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return domain("mixture weights must be finite and nonnegative");
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return domain(format!("mixture weights sum to {total}, not 1"));
        }
        if variances.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return domain("mixture variances must be finite and nonnegative");
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d) {
            return domain("mixture means must share one nonzero dimension");
        }
        Ok(Self::GaussianMixture {
            weights,
            means,
            variances,
        })
    }

    pub fn grid_sampled(density: GridDensity, lq_exponent: Option<f64>) -> Result<Self> {
        if (density.mass() - 1.0).abs() > MASS_TOL {
            return domain(format!("initial density has mass {}", density.mass()));
        }
        if density.values().iter().any(|v| *v < 0.0) {
            return domain("initial density must be nonnegative");
        }
        if let Some(q) = lq_exponent {
            let d = density.spec().dim() as f64;
            if !(q > d) {
                return domain(format!("integrability exponent must satisfy q > d = {d}, got {q}"));
            }
        }
        Ok(Self::GridSampled {
            density,
            lq_exponent,
        })
    }

    /// Uniform law on the box `[lower, upper]`, cell-averaged onto `spec`.
    pub fn uniform_box(spec: &GridSpec, lower: &[f64], upper: &[f64]) -> Result<Self> {
        let d = spec.dim();
        if lower.len() != d || upper.len() != d {
            return domain("uniform box dimension differs from the grid");
        }
        if lower.iter().zip(upper).any(|(a, b)| !(a < b)) {
            return domain("uniform box needs lower < upper on every axis");
        }
        let volume: f64 = lower.iter().zip(upper).map(|(a, b)| b - a).product();
        let overlap = |axis: usize, i: usize| {
            let dx = spec.dx(axis);
            let lo = spec.lower()[axis] + i as f64 * dx;
            let hi = lo + dx;
            ((hi.min(upper[axis]) - lo.max(lower[axis])).max(0.0)) / dx
        };
        let values = (0..spec.total_cells())
            .map(|idx| {
                let ix = spec.unflatten(idx);
                (0..d).map(|a| overlap(a, ix[a])).product::<f64>() / volume
            })
            .collect();
        let density = GridDensity::from_values(spec.clone(), values)?;
        Self::grid_sampled(density, Some(f64::INFINITY))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::PointMass { x0 } => x0.len(),
            Self::GaussianMixture { means, .. } => means[0].len(),
            Self::GridSampled { density, .. } => density.spec().dim(),
        }
    }

    /// True when the law has an atom and therefore no grid density.
    pub fn has_atoms(&self) -> bool {
        match self {
            Self::PointMass { .. } => true,
            Self::GaussianMixture {
                weights, variances, ..
            } => weights.iter().zip(variances).any(|(w, v)| *w > 0.0 && *v == 0.0),
            Self::GridSampled { .. } => false,
        }
    }

    pub fn grid_density(&self) -> Option<&GridDensity> {
        match self {
            Self::GridSampled { density, .. } => Some(density),
            _ => None,
        }
    }

    pub fn lq_exponent(&self) -> Option<f64> {
        match self {
            Self::GridSampled { lq_exponent, .. } => *lq_exponent,
            Self::GaussianMixture { .. } if !self.has_atoms() => Some(f64::INFINITY),
            _ => None,
        }
    }

    /// Radius of a ball around the origin holding the law up to Gaussian
    /// tails of six standard deviations.
    pub fn support_radius(&self) -> f64 {
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        match self {
            Self::PointMass { x0 } => norm(x0),
            Self::GaussianMixture {
                means, variances, ..
            } => means
                .iter()
                .zip(variances)
                .map(|(m, v)| norm(m) + 6.0 * v.sqrt())
                .fold(0.0, f64::max),
            Self::GridSampled { density, .. } => {
                let spec = density.spec();
                let mut r = 0.0f64;
                for (idx, v) in density.values().iter().enumerate() {
                    if *v > 0.0 {
                        r = r.max(norm(&spec.center(idx)) + spec.max_dx());
                    }
                }
                r
            }
        }
    }
}
