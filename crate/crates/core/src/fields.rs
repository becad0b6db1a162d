//! Uniform grids on the unit interval, sampled fields, shape-preserving
//! cubic interpolation and periodic Gaussian random fields.
//!
//! Every grid in this crate covers `[0, 1]` inclusive of both endpoints.
//! Periodic quantities (material fields on the unit cell) store the
//! duplicated endpoint so that `values[0] == values[n - 1]`; spectral
//! transforms use the first `n - 1` nodes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Deterministic generator for one `(seed, stream)` pair.
///
/// ChaCha is counter based, so streams derived from the same seed are
/// independent and can be drawn in any order.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform nodes `i / (n_points - 1)` on the spatial unit cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceGrid {
    n_points: usize,
}

impl SpaceGrid {
    pub fn new(n_points: usize) -> Result<Self> {
        if n_points < 2 {
            return Err(Error::InvalidInput(format!(
                "space grid needs at least 2 nodes, got {n_points}"
            )));
        }
        Ok(Self { n_points })
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn n_elements(&self) -> usize {
        self.n_points - 1
    }

    pub fn spacing(&self) -> f64 {
        1.0 / (self.n_points - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.n_points {
            1.0
        } else {
            i as f64 / (self.n_points - 1) as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.node(i)).collect()
    }

    pub fn midpoints(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..self.n_elements()).map(|e| (e as f64 + 0.5) * h).collect()
    }
}

/// Uniform time nodes on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(n_steps: usize) -> Result<Self> {
        if n_steps < 2 {
            return Err(Error::InvalidInput(format!(
                "time grid needs at least 2 nodes, got {n_steps}"
            )));
        }
        Ok(Self { n_steps })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        1.0 / (self.n_steps - 1) as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        if k + 1 == self.n_steps {
            1.0
        } else {
            k as f64 / (self.n_steps - 1) as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_steps).map(|k| self.node(k)).collect()
    }
}

/// Values of a scalar quantity at the nodes of a [`SpaceGrid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledField {
    grid: SpaceGrid,
    values: Vec<f64>,
}

impl SampledField {
    pub fn new(grid: SpaceGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_points() {
            return Err(Error::Shape(format!(
                "field has {} values for a {}-node grid",
                values.len(),
                grid.n_points()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite field value at node {i}")));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: SpaceGrid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.n_points()],
        }
    }

    pub fn from_fn(grid: SpaceGrid, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(grid, grid.nodes().into_iter().map(f).collect())
    }

    pub fn grid(&self) -> SpaceGrid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Piecewise-linear evaluation at `y`, clamped to `[0, 1]`.
    pub fn eval(&self, y: f64) -> f64 {
        interp_uniform(&self.values, y)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Trapezoidal integral over the unit cell.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.values, self.grid.spacing())
    }

    /// Values at element midpoints (mean of the two adjacent nodes).
    pub fn midpoint_values(&self) -> Vec<f64> {
        self.values.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn resample(&self, grid: SpaceGrid) -> SampledField {
        SampledField {
            grid,
            values: resample_linear(&self.values, grid.n_points()),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> SampledField {
        SampledField {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Composite trapezoidal rule for samples with uniform spacing `h`.
pub fn trapezoid(values: &[f64], h: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => {
            let inner: f64 = values[1..n - 1].iter().sum();
            h * (inner + 0.5 * (values[0] + values[n - 1]))
        }
    }
}

/// Trapezoidal quadrature weights on `n` uniform nodes over `[0, 1]`.
pub fn trapezoid_weights(n: usize) -> Vec<f64> {
    let h = 1.0 / (n - 1) as f64;
    let mut w = vec![h; n];
    w[0] *= 0.5;
    w[n - 1] *= 0.5;
    w
}

/// Linear interpolation of uniformly sampled `values` on `[0, 1]`.
pub fn interp_uniform(values: &[f64], x: f64) -> f64 {
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let s = x.clamp(0.0, 1.0) * (n - 1) as f64;
    let i = (s.floor() as usize).min(n - 2);
    let frac = s - i as f64;
    if frac == 0.0 {
        values[i]
    } else {
        values[i] + frac * (values[i + 1] - values[i])
    }
}

/// Piecewise-linear resampling between uniform grids on `[0, 1]`.
///
/// Nodes shared by both grids reproduce the source values exactly.
pub fn resample_linear(values: &[f64], target_len: usize) -> Vec<f64> {
    let n = values.len();
    assert!(n >= 2, "resampling needs at least two source nodes");
    if target_len == n {
        return values.to_vec();
    }
    let src_cells = (n - 1) as u128;
    let dst_cells = (target_len - 1) as u128;
    (0..target_len)
        .map(|j| {
            // Exact rational position j * (n-1) / (m-1) so shared nodes hit exactly.
            let num = j as u128 * src_cells;
            let i = (num / dst_cells) as usize;
            let rem = num % dst_cells;
            if rem == 0 || i + 1 >= n {
                values[i.min(n - 1)]
            } else {
                let frac = rem as f64 / dst_cells as f64;
                values[i] + frac * (values[i + 1] - values[i])
            }
        })
        .collect()
}

/// Shape-preserving piecewise cubic Hermite interpolant (Fritsch–Carlson).
#[derive(Debug, Clone, PartialEq)]
pub struct Pchip {
    t: Vec<f64>,
    v: Vec<f64>,
    slopes: Vec<f64>,
}

impl Pchip {
    pub fn new(knots_t: &[f64], knots_v: &[f64]) -> Result<Self> {
        let n = knots_t.len();
        if n < 2 {
            return Err(Error::InvalidInput(format!("PCHIP needs at least 2 knots, got {n}")));
        }
        if knots_v.len() != n {
            return Err(Error::Shape(format!(
                "{} knot abscissae but {} ordinates",
                n,
                knots_v.len()
            )));
        }
        if knots_t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("knot abscissae must be strictly increasing".into()));
        }
        let h: Vec<f64> = knots_t.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = knots_v
            .windows(2)
            .zip(&h)
            .map(|(w, hk)| (w[1] - w[0]) / hk)
            .collect();

        let mut slopes = vec![0.0; n];
        if n == 2 {
            slopes[0] = delta[0];
            slopes[1] = delta[0];
        } else {
            for k in 1..n - 1 {
                let (d0, d1) = (delta[k - 1], delta[k]);
                if d0 * d1 > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    slopes[k] = (w1 + w2) / (w1 / d0 + w2 / d1);
                }
            }
            slopes[0] = end_slope(h[0], h[1], delta[0], delta[1]);
            slopes[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Ok(Self {
            t: knots_t.to_vec(),
            v: knots_v.to_vec(),
            slopes,
        })
    }

    pub fn knots(&self) -> (&[f64], &[f64]) {
        (&self.t, &self.v)
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    fn segment(&self, x: f64) -> usize {
        let n = self.t.len();
        match self.t.partition_point(|&tk| tk <= x) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let k = self.segment(x);
        let h = self.t[k + 1] - self.t[k];
        let s = (x - self.t[k]) / h;
        if s == 0.0 {
            return self.v[k];
        }
        if s == 1.0 {
            return self.v[k + 1];
        }
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.v[k] + h * h10 * self.slopes[k] + h01 * self.v[k + 1] + h * h11 * self.slopes[k + 1]
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let k = self.segment(x);
        let h = self.t[k + 1] - self.t[k];
        let s = (x - self.t[k]) / h;
        let s2 = s * s;
        let d00 = 6.0 * s2 - 6.0 * s;
        let d10 = 3.0 * s2 - 4.0 * s + 1.0;
        let d01 = -6.0 * s2 + 6.0 * s;
        let d11 = 3.0 * s2 - 2.0 * s;
        (d00 * self.v[k] + d01 * self.v[k + 1]) / h + d10 * self.slopes[k] + d11 * self.slopes[k + 1]
    }
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d.signum() != d0.signum() || d0 == 0.0 {
        0.0
    } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

/// PCHIP through the knots, sampled on `grid`.
///
/// The knots must span exactly `[0, 1]`.
pub fn pchip_interpolate(knots_t: &[f64], knots_v: &[f64], grid: TimeGrid) -> Result<Vec<f64>> {
    check_unit_span(knots_t)?;
    let p = Pchip::new(knots_t, knots_v)?;
    Ok(grid.nodes().into_iter().map(|t| p.eval(t)).collect())
}

pub(crate) fn check_unit_span(knots_t: &[f64]) -> Result<()> {
    match (knots_t.first(), knots_t.last()) {
        (Some(&a), Some(&b)) if a == 0.0 && b == 1.0 => Ok(()),
        _ => Err(Error::InvalidInput("knots must start at 0 and end at 1".into())),
    }
}

/// Correlation length, pointwise scale and truncation of a periodic
/// Gaussian random field with covariance `rho sigma^2 (1 - rho^2 d^2/dx^2)^-2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrfSpec {
    pub rho: f64,
    pub sigma: f64,
    /// Highest retained wavenumber; `None` keeps everything up to Nyquist.
    pub n_modes: Option<usize>,
}

impl GrfSpec {
    pub fn new(rho: f64, sigma: f64) -> Self {
        Self {
            rho,
            sigma,
            n_modes: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) || !(self.sigma >= 0.0) || self.n_modes == Some(0) {
            return Err(Error::InvalidInput(format!("invalid GRF parameters {self:?}")));
        }
        Ok(())
    }

    /// Variance of the complex Fourier coefficient at wavenumber `k`.
    pub fn mode_variance(&self, k: i64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * k as f64 * self.rho;
        self.rho * self.sigma * self.sigma / (1.0 + w * w).powi(2)
    }

    /// Highest wavenumber actually used on a grid with `n_points` nodes.
    pub fn effective_modes(&self, n_points: usize) -> usize {
        let nyquist = (n_points - 1) / 2;
        self.n_modes.unwrap_or(n_points / 2).min(nyquist)
    }

    /// Pointwise variance of the truncated field, `sum_{|k| <= K} var_k`.
    pub fn pointwise_variance(&self, n_points: usize) -> f64 {
        let k_max = self.effective_modes(n_points) as i64;
        (-k_max..=k_max).map(|k| self.mode_variance(k)).sum()
    }
}

/// One realization of the periodic mean-zero field on `grid`.
pub fn sample_grf(spec: &GrfSpec, grid: SpaceGrid, seed: u64) -> Result<SampledField> {
    let mut rng = seeded_rng(seed, 0);
    sample_grf_with(spec, grid, &mut rng)
}

pub fn sample_grf_with<R: Rng + ?Sized>(spec: &GrfSpec, grid: SpaceGrid, rng: &mut R) -> Result<SampledField> {
    spec.validate()?;
    let n = grid.n_points() - 1;
    if n < 2 {
        return Err(Error::InvalidInput("GRF sampling needs at least 3 grid nodes".into()));
    }
    let k_max = spec.effective_modes(grid.n_points());
    let mut spectrum = vec![Complex64::new(0.0, 0.0); n];
    let z0: f64 = rng.sample(StandardNormal);
    spectrum[0] = Complex64::new(z0 * spec.mode_variance(0).sqrt(), 0.0);
    for k in 1..=k_max {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        let var = spec.mode_variance(k as i64);
        if 2 * k == n {
            // Nyquist: both +k and -k alias onto the same real grid mode.
            spectrum[k] = Complex64::new(a * (2.0 * var).sqrt(), 0.0);
        } else {
            let c = Complex64::new(a, b) * (0.5 * var).sqrt();
            spectrum[k] = c;
            spectrum[n - k] = c.conj();
        }
    }
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_inverse(n).process(&mut spectrum);
    let max_imag = spectrum.iter().fold(0.0f64, |m, c| m.max(c.im.abs()));
    let scale = spectrum.iter().fold(0.0f64, |m, c| m.max(c.re.abs())).max(1.0);
    if max_imag > 1e-12 * scale {
        return Err(Error::Numerical(format!("GRF imaginary residue {max_imag:e}")));
    }
    let mut values: Vec<f64> = spectrum.iter().map(|c| c.re).collect();
    values.push(values[0]);
    SampledField::new(grid, values)
}
