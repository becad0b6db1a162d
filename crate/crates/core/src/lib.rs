//! Homogenized constitutive laws for one-dimensional viscoelastic and
//! elasto-viscoplastic composites.
//!
//! The crate covers the whole pipeline: random microstructures and strain
//! programs, finite-element cell solvers that produce ground-truth averaged
//! stresses, the exact Prony-series law for layered Kelvin–Voigt materials,
//! a Fourier-neural-mapping recurrent operator with its trainer, and a
//! quasistatic macroscale simulator.

pub mod error;
pub mod cell_solver;
pub mod fields;
pub mod fnm;
pub mod harness;
pub mod rno;
mod linalg;
pub mod macro_sim;
pub mod materials;
pub mod prony;
mod tridiag;

pub use error::{Error, Result};

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x.ln(), b + y.ln()));
    let (mx, my) = (sx / n, sy / n);
    let (num, den) = points.iter().fold((0.0, 0.0), |(a, b), &(x, y)| {
        let dx = x.ln() - mx;
        (a + dx * (y.ln() - my), b + dx * dx)
    });
    num / den
}
