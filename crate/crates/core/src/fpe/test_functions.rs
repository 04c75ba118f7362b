//! Smooth compactly supported test functions with closed-form gradient and
//! Laplacian.

use crate::error::{Error, Result};
use crate::grid::GridSpec;

#[derive(Debug, Clone, PartialEq)]
pub enum TestFunction {
    /// `exp(-1 / (1 - |x - c|^2 / w^2))` inside the ball of radius `w`.
    Bump { center: Vec<f64>, width: f64 },
    /// `cos(k (x_1 - c_1))` times the bump of the same center and width.
    WindowedCosine {
        center: Vec<f64>,
        width: f64,
        frequency: f64,
    },
    /// Not compactly supported; present so configs can name it and be
    /// rejected.
    Constant(f64),
}

/// `psi(q) = exp(-1 / (1 - q))` and its first two derivatives in `q`.
fn profile(q: f64) -> (f64, f64, f64) {
    if q >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    let s = 1.0 - q;
    let psi = (-1.0 / s).exp();
    let d1 = -psi / (s * s);
    let d2 = psi / s.powi(4) - 2.0 * psi / s.powi(3);
    (psi, d1, d2)
}

/// Value, gradient and Laplacian of the bump at `x`.
fn bump(center: &[f64], width: f64, x: &[f64], grad: &mut [f64]) -> (f64, f64) {
    let d = x.len() as f64;
    let w2 = width * width;
    let q: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>() / w2;
    let (psi, d1, d2) = profile(q);
    for (g, (a, c)) in grad.iter_mut().zip(x.iter().zip(center)) {
        *g = d1 * 2.0 * (a - c) / w2;
    }
    (psi, d2 * 4.0 * q / w2 + d1 * 2.0 * d / w2)
}

impl TestFunction {
    pub fn center(&self) -> Option<&[f64]> {
        match self {
            Self::Bump { center, .. } | Self::WindowedCosine { center, .. } => Some(center),
            Self::Constant(_) => None,
        }
    }

    /// `(phi(x), Laplacian phi(x))`, writing `grad phi(x)` into `grad`.
    pub fn eval(&self, x: &[f64], grad: &mut [f64]) -> (f64, f64) {
        match self {
            Self::Bump { center, width } => bump(center, *width, x, grad),
            Self::WindowedCosine {
                center,
                width,
                frequency,
            } => {
                let (b, lap_b) = bump(center, *width, x, grad);
                let arg = frequency * (x[0] - center[0]);
                let (s, c) = arg.sin_cos();
                let db0 = grad[0];
                for g in grad.iter_mut() {
                    *g *= c;
                }
                grad[0] -= frequency * s * b;
                let lap = c * lap_b - 2.0 * frequency * s * db0 - frequency * frequency * c * b;
                (c * b, lap)
            }
            Self::Constant(v) => {
                grad.iter_mut().for_each(|g| *g = 0.0);
                (*v, 0.0)
            }
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; x.len()];
        self.eval(x, &mut g).0
    }

    pub fn label(&self) -> String {
        match self {
            Self::Bump { center, width } => format!("bump(c={center:?}, w={width})"),
            Self::WindowedCosine {
                center,
                width,
                frequency,
            } => format!("wcos(c={center:?}, w={width}, k={frequency})"),
            Self::Constant(v) => format!("constant({v})"),
        }
    }

    fn validate(&self, grid: &GridSpec) -> Result<()> {
        let (center, width) = match self {
            Self::Constant(v) => {
                return Err(Error::TestFunction(format!(
                    "constant {v} is not compactly supported"
                )))
            }
            Self::Bump { center, width } | Self::WindowedCosine { center, width, .. } => (center, *width),
        };
        if center.len() != grid.dim() {
            return Err(Error::TestFunction(format!(
                "{} is {}-dimensional, grid is {}-dimensional",
                self.label(),
                center.len(),
                grid.dim()
            )));
        }
        if !(width > 0.0) || !width.is_finite() {
            return Err(Error::TestFunction(format!("{} has no support", self.label())));
        }
        if let Self::WindowedCosine { frequency, .. } = self {
            if !frequency.is_finite() {
                return Err(Error::TestFunction(format!("{} has a non-finite frequency", self.label())));
            }
        }
        for a in 0..grid.dim() {
            if center[a] - width <= grid.lower()[a] || center[a] + width >= grid.upper()[a] {
                return Err(Error::TestFunction(format!(
                    "{} does not vanish at the domain boundary on axis {a}",
                    self.label()
                )));
            }
        }
        Ok(())
    }
}

/// Test functions checked against one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunctionSet {
    functions: Vec<TestFunction>,
}

impl TestFunctionSet {
    pub fn new(functions: Vec<TestFunction>, grid: &GridSpec) -> Result<Self> {
        if functions.is_empty() {
            return Err(Error::TestFunction("empty test function set".into()));
        }
        for f in &functions {
            f.validate(grid)?;
        }
        Ok(Self { functions })
    }

    /// Bumps of widths 2 to 4 at and around the origin plus one windowed
    /// cosine, all along the diagonal in 2-d.
    pub fn catalog(grid: &GridSpec) -> Result<Self> {
        let d = grid.dim();
        let at = |c: f64| vec![c; d];
        Self::new(
            vec![
                TestFunction::Bump { center: at(0.0), width: 2.0 },
                TestFunction::Bump { center: at(1.0), width: 2.0 },
                TestFunction::Bump { center: at(-1.0), width: 3.0 },
                TestFunction::Bump { center: at(0.0), width: 4.0 },
                TestFunction::WindowedCosine {
                    center: at(0.0),
                    width: 3.0,
                    frequency: 1.5,
                },
            ],
            grid,
        )
    }

    pub fn functions(&self) -> &[TestFunction] {
        &self.functions
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }
}
