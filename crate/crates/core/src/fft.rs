//! Spectral convolution on the periodic grid domain.
//!
//! Every kernel used here is a Fourier multiplier of the heat semigroup,
//! `exp(-t |k|^2)` or one of its first derivatives, applied to a real field
//! through a complex FFT. Plans are cached per thread.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::grid::GridSpec;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plans(len: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(len), p.plan_fft_inverse(len))
    })
}

/// Angular wavenumber of FFT bin `m` on an axis of `n` cells and length `len`.
/// The Nyquist bin is reported separately so odd multipliers can zero it.
fn wavenumber(m: usize, n: usize, len: f64) -> (f64, bool) {
    let signed = if m < n / 2 {
        m as f64
    } else {
        m as f64 - n as f64
    };
    (2.0 * PI * signed / len, n % 2 == 0 && m == n / 2)
}

fn transform_rows(buf: &mut [Complex64], row_len: usize, fft: &Arc<dyn Fft<f64>>) {
    buf.par_chunks_mut(row_len).for_each(|row| fft.process(row));
}

fn transpose(buf: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); buf.len()];
    out.par_chunks_mut(rows).enumerate().for_each(|(c, col)| {
        for (r, slot) in col.iter_mut().enumerate() {
            *slot = buf[r * cols + c];
        }
    });
    out
}

/// Forward transform of a row-major field of dimension 1 or 2.
fn forward(spec: &GridSpec, field: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    match spec.dim() {
        1 => {
            let (f, _) = plans(spec.cells(0));
            f.process(&mut buf);
            buf
        }
        2 => {
            let (n0, n1) = (spec.cells(0), spec.cells(1));
            let (f1, _) = plans(n1);
            transform_rows(&mut buf, n1, &f1);
            let mut t = transpose(&buf, n0, n1);
            let (f0, _) = plans(n0);
            transform_rows(&mut t, n0, &f0);
            // stays transposed: index = i1 * n0 + i0
            t
        }
        d => unreachable!("spectral grid of dimension {d}"),
    }
}

fn inverse(spec: &GridSpec, mut buf: Vec<Complex64>) -> Vec<f64> {
    let n = spec.total_cells() as f64;
    match spec.dim() {
        1 => {
            let (_, inv) = plans(spec.cells(0));
            inv.process(&mut buf);
            buf.iter().map(|c| c.re / n).collect()
        }
        2 => {
            let (n0, n1) = (spec.cells(0), spec.cells(1));
            let (_, i0) = plans(n0);
            transform_rows(&mut buf, n0, &i0);
            let mut t = transpose(&buf, n1, n0);
            let (_, i1) = plans(n1);
            transform_rows(&mut t, n1, &i1);
            t.iter().map(|c| c.re / n).collect()
        }
        d => unreachable!("spectral grid of dimension {d}"),
    }
}

/// Visit every spectral coefficient with its wavevector. In 2-d the
/// coefficients are stored transposed (axis 1 major).
fn for_each_mode(
    spec: &GridSpec,
    buf: &mut [Complex64],
    f: impl Fn(&[f64; 2], &[bool; 2], &mut Complex64) + Sync,
) {
    match spec.dim() {
        1 => {
            let (n, len) = (spec.cells(0), spec.length(0));
            buf.par_iter_mut().enumerate().for_each(|(m, c)| {
                let (k, nyq) = wavenumber(m, n, len);
                f(&[k, 0.0], &[nyq, false], c);
            });
        }
        2 => {
            let (n0, n1) = (spec.cells(0), spec.cells(1));
            let (l0, l1) = (spec.length(0), spec.length(1));
            buf.par_chunks_mut(n0).enumerate().for_each(|(m1, col)| {
                let (k1, nyq1) = wavenumber(m1, n1, l1);
                for (m0, c) in col.iter_mut().enumerate() {
                    let (k0, nyq0) = wavenumber(m0, n0, l0);
                    f(&[k0, k1], &[nyq0, nyq1], c);
                }
            });
        }
        d => unreachable!("spectral grid of dimension {d}"),
    }
}

/// `g(t, .) * field` as a periodic convolution. The zero mode is untouched,
/// so the sum of the field is preserved up to rounding.
pub(crate) fn heat(spec: &GridSpec, field: &[f64], t: f64) -> Vec<f64> {
    let mut buf = forward(spec, field);
    for_each_mode(spec, &mut buf, |k, _, c| {
        *c *= (-t * (k[0] * k[0] + k[1] * k[1])).exp();
    });
    inverse(spec, buf)
}

/// `sum_j (d_j g(t, .)) * fields[j]`, the heat-kernel gradient paired with a
/// vector field.
pub(crate) fn heat_gradient_pairing(spec: &GridSpec, fields: &[Vec<f64>], t: f64) -> Vec<f64> {
    let mut total: Option<Vec<Complex64>> = None;
    for (axis, field) in fields.iter().enumerate() {
        let mut buf = forward(spec, field);
        for_each_mode(spec, &mut buf, |k, nyq, c| {
            if nyq[axis] {
                *c = Complex64::new(0.0, 0.0);
            } else {
                let damp = (-t * (k[0] * k[0] + k[1] * k[1])).exp();
                *c *= Complex64::new(0.0, k[axis] * damp);
            }
        });
        total = Some(match total {
            None => buf,
            Some(mut acc) => {
                acc.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
                acc
            }
        });
    }
    match total {
        Some(buf) => inverse(spec, buf),
        None => vec![0.0; spec.total_cells()],
    }
}
