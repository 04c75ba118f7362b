//! The Gaussian heat kernel `g(t, x) = (4 pi t)^{-d/2} exp(-|x|^2 / 4t)`,
//! the transition density of `sqrt(2) W_t`, together with its gradient,
//! the semigroup check on a grid and the Hölder-modulus quantities used to
//! fit kernel constants.

use std::f64::consts::PI;

use crate::error::{domain, Error, Result};
use crate::fft;
use crate::grid::{GridDensity, GridSpec};
use crate::initial::InitialDistribution;

/// A space-time point at which the kernel is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelPoint {
    pub t: f64,
    pub x: Vec<f64>,
}

impl KernelPoint {
    pub fn new(t: f64, x: Vec<f64>) -> Result<Self> {
        check_time(t)?;
        check_dim(&x)?;
        Ok(Self { t, x })
    }

    pub fn eval(&self) -> f64 {
        eval_unchecked(self.t, &self.x)
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return domain(format!("heat kernel needs t > 0, got {t}"));
    }
    Ok(())
}

fn check_dim(x: &[f64]) -> Result<()> {
    if x.is_empty() || x.len() > 3 {
        return domain(format!("heat kernel points live in R^1..R^3, got R^{}", x.len()));
    }
    Ok(())
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub(crate) fn eval_unchecked(t: f64, x: &[f64]) -> f64 {
    let d = x.len() as f64;
    (4.0 * PI * t).powf(-0.5 * d) * (-norm2(x) / (4.0 * t)).exp()
}

pub fn eval(t: f64, x: &[f64]) -> Result<f64> {
    check_time(t)?;
    check_dim(x)?;
    Ok(eval_unchecked(t, x))
}

/// `grad g(t, x) = -x / (2t) * g(t, x)`.
pub fn grad(t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let g = eval(t, x)?;
    Ok(x.iter().map(|xi| -xi / (2.0 * t) * g).collect())
}

/// `|grad^j g(t, x1) - grad^j g(t, x2)|` for `j` in {0, 1}.
fn derivative_gap(t: f64, x1: &[f64], x2: &[f64], j: u8) -> Result<f64> {
    match j {
        0 => Ok((eval(t, x1)? - eval(t, x2)?).abs()),
        1 => {
            let (a, b) = (grad(t, x1)?, grad(t, x2)?);
            Ok(a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
        }
        _ => domain(format!("derivative order must be 0 or 1, got {j}")),
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta < 1.0) {
        return domain(format!("Hölder exponent must lie in (0, 1), got {beta}"));
    }
    Ok(())
}

/// Space modulus pair `(|grad^j g(t,x1) - grad^j g(t,x2)|,
/// |x1-x2|^beta t^{-j/2-beta} (g(4t,x1) + g(4t,x2)))`.
pub fn hoelder_space_bound(t: f64, x1: &[f64], x2: &[f64], j: u8, beta: f64, horizon: f64) -> Result<(f64, f64)> {
    check_beta(beta)?;
    if !(t > 0.0 && t <= horizon) {
        return domain(format!("need 0 < t <= T = {horizon}, got t = {t}"));
    }
    if x1.len() != x2.len() {
        return domain("points of different dimension");
    }
    let lhs = derivative_gap(t, x1, x2, j)?;
    let dist = norm2(&x1.iter().zip(x2).map(|(a, b)| a - b).collect::<Vec<_>>()).sqrt();
    let rhs = dist.powf(beta)
        * t.powf(-0.5 * j as f64 - beta)
        * (eval_unchecked(4.0 * t, x1) + eval_unchecked(4.0 * t, x2));
    Ok((lhs, rhs))
}

/// Time modulus pair `(|grad^j g(t1,x) - grad^j g(t2,x)|,
/// |t2-t1|^{beta/2} sum_i t_i^{-(j+beta)/2} g(2 t_i, x))`.
pub fn hoelder_time_bound(t1: f64, t2: f64, x: &[f64], j: u8, beta: f64, horizon: f64) -> Result<(f64, f64)> {
    check_beta(beta)?;
    if !(t1 > 0.0 && t1 < t2 && t2 <= horizon) {
        return domain(format!("need 0 < t1 < t2 <= T = {horizon}, got t1 = {t1}, t2 = {t2}"));
    }
    let lhs = match j {
        0 => (eval(t1, x)? - eval(t2, x)?).abs(),
        1 => {
            let (a, b) = (grad(t1, x)?, grad(t2, x)?);
            a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
        }
        _ => return domain(format!("derivative order must be 0 or 1, got {j}")),
    };
    let e = -0.5 * (j as f64 + beta);
    let rhs = (t2 - t1).powf(0.5 * beta)
        * (t1.powf(e) * eval_unchecked(2.0 * t1, x) + t2.powf(e) * eval_unchecked(2.0 * t2, x));
    Ok((lhs, rhs))
}

/// Empirical Hölder constant: the sup of `lhs / rhs` over a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoelderBound {
    pub beta: f64,
    pub j: u8,
    pub constant: f64,
}

impl HoelderBound {
    /// Fits the smallest constant consistent with every `(lhs, rhs)` pair.
    /// Pairs with `rhs` below `floor` carry no information and are skipped.
    pub fn fit(beta: f64, j: u8, pairs: impl IntoIterator<Item = (f64, f64)>, floor: f64) -> Result<Self> {
        check_beta(beta)?;
        let mut constant = 0.0f64;
        for (lhs, rhs) in pairs {
            if rhs > floor {
                constant = constant.max(lhs / rhs);
            }
        }
        if !constant.is_finite() {
            return Err(Error::SchemeFailure("non-finite Hölder ratio".into()));
        }
        Ok(Self { beta, j, constant })
    }
}

/// Max deviation of `g(t) * g(s)` (discrete periodic convolution on `grid`)
/// from `g(t + s)` at the cell centers.
pub fn ck_convolve_check(t: f64, s: f64, grid: &GridSpec) -> Result<f64> {
    check_time(t)?;
    check_time(s)?;
    grid.check_resolves(t.min(s), 8.0, "Chapman-Kolmogorov check")?;
    let origin = vec![0.0; grid.dim()];
    let base = GridDensity::from_initial(&InitialDistribution::point_mass(origin.clone()), grid, s)?;
    let conv = fft::heat(grid, base.values(), t);
    let mut x = vec![0.0; grid.dim()];
    let mut worst = 0.0f64;
    for (idx, v) in conv.iter().enumerate() {
        grid.center_into(idx, &mut x);
        worst = worst.max((v - eval_unchecked(t + s, &x)).abs());
    }
    Ok(worst)
}
