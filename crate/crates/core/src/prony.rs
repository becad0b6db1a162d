//! Exact homogenized law of layered Kelvin–Voigt materials.
//!
//! A layered cell with pieces `(d_i, E_i, nu_i)` homogenizes to
//! `sigma = E' eps + nu' deps - (K * eps)` with a Prony kernel
//! `K(t) = sum_l beta_l exp(-alpha_l t)`. The exponents are the roots of the
//! secular function `f(s) = sum_i w_i / (r_i - s)` with `w_i = d_i / nu_i`
//! and `r_i = E_i / nu_i`; there is exactly one root between consecutive
//! distinct ratios.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::trapezoid;
use crate::materials::{pc_discretize, ContinuousMaterialKV, KvMaterial, PiecewiseMaterialKV, StrainProgram};

/// Relative tolerance under which two ratios count as equal.
const MERGE_RTOL: f64 = 1e-12;
/// Relative bracket width at which root bisection stops.
const ROOT_RTOL: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PronyModel {
    pub e_prime: f64,
    pub nu_prime: f64,
    /// Decay rates, ascending.
    pub alphas: Vec<f64>,
    /// Positive weights, aligned with `alphas`.
    pub betas: Vec<f64>,
}

impl PronyModel {
    pub fn memoryless(e_prime: f64, nu_prime: f64) -> Self {
        Self {
            e_prime,
            nu_prime,
            alphas: Vec::new(),
            betas: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.len() != self.betas.len() {
            return Err(Error::Shape(format!(
                "{} exponents but {} weights",
                self.alphas.len(),
                self.betas.len()
            )));
        }
        if !(self.nu_prime > 0.0) || !(self.e_prime >= 0.0) {
            return Err(Error::InvalidInput("need E' >= 0 and nu' > 0".into()));
        }
        if self.alphas.iter().any(|a| !(*a > 0.0)) || self.betas.iter().any(|b| !(*b >= 0.0)) {
            return Err(Error::InvalidInput("exponents must be positive and weights non-negative".into()));
        }
        Ok(())
    }

    pub fn n_modes(&self) -> usize {
        self.alphas.len()
    }

    /// `K(t)`.
    pub fn kernel(&self, t: f64) -> f64 {
        self.alphas.iter().zip(&self.betas).map(|(a, b)| b * (-a * t).exp()).sum()
    }

    /// Integral of the kernel over `[0, inf)`.
    pub fn kernel_mass(&self) -> f64 {
        self.alphas.iter().zip(&self.betas).map(|(a, b)| b / a).sum()
    }

    /// Per-mode coefficients `(decay, c0, c1)` of the exact update over a
    /// step `dt` with strain linear on the step:
    /// `xi' = decay * xi + beta * dt * (c0 * eps_k + c1 * (eps_{k+1} - eps_k))`.
    pub fn step_coefficients(&self, dt: f64) -> Vec<[f64; 3]> {
        self.alphas
            .iter()
            .map(|&a| {
                let x = a * dt;
                [(-x).exp(), phi1(x), phi2(x)]
            })
            .collect()
    }
}

/// `(1 - e^{-x}) / x`.
fn phi1(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        1.0 - x / 2.0 + x * x / 6.0 - x * x * x / 24.0
    } else {
        -(-x).exp_m1() / x
    }
}

/// `(x - 1 + e^{-x}) / x^2`.
fn phi2(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        0.5 - x / 6.0 + x * x / 24.0 - x * x * x / 120.0
    } else {
        (x + (-x).exp_m1()) / (x * x)
    }
}

/// `(e^{x} - 1 - x) / x^2`.
fn phi3(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        0.5 + x / 6.0 + x * x / 24.0 + x * x * x / 120.0
    } else {
        (x.exp_m1() - x) / (x * x)
    }
}

/// Piece `(d, E, nu)` triples in a canonical order, so that every function of
/// them is bit-identical under permutation of the input pieces.
fn canonical_pieces(mat: &PiecewiseMaterialKV) -> Vec<(f64, f64, f64)> {
    let mut pieces: Vec<(f64, f64, f64)> = mat
        .lengths()
        .into_iter()
        .zip(&mat.e_vals)
        .zip(&mat.nu_vals)
        .map(|((d, &e), &nu)| (d, e, nu))
        .collect();
    pieces.sort_by(|a, b| {
        (a.1 / a.2)
            .total_cmp(&(b.1 / b.2))
            .then(a.0.total_cmp(&b.0))
            .then(a.1.total_cmp(&b.1))
            .then(a.2.total_cmp(&b.2))
    });
    pieces
}

fn markovian_from_pieces(pieces: &[(f64, f64, f64)]) -> (f64, f64) {
    let inv_nu: f64 = pieces.iter().map(|(d, _, nu)| d / nu).sum();
    let e_over_nu2: f64 = pieces.iter().map(|(d, e, nu)| d * e / (nu * nu)).sum();
    (e_over_nu2 / (inv_nu * inv_nu), 1.0 / inv_nu)
}

/// Instantaneous parameters `(E', nu')`.
pub fn markovian_params(mat: &KvMaterial) -> Result<(f64, f64)> {
    match mat {
        KvMaterial::Piecewise(m) => {
            if m.e_vals.iter().chain(&m.nu_vals).any(|v| !(*v > 0.0)) {
                return Err(Error::InvalidInput("material must be positive".into()));
            }
            Ok(markovian_from_pieces(&canonical_pieces(m)))
        }
        KvMaterial::Continuous(m) => {
            if m.e.min() <= 0.0 || m.nu.min() <= 0.0 {
                return Err(Error::InvalidInput("material must be positive".into()));
            }
            let h = m.grid().spacing();
            let inv_nu: Vec<f64> = m.nu.values().iter().map(|v| 1.0 / v).collect();
            let e_nu2: Vec<f64> = m.e.values().iter().zip(m.nu.values()).map(|(e, v)| e / (v * v)).collect();
            let a = trapezoid(&inv_nu, h);
            Ok((trapezoid(&e_nu2, h) / (a * a), 1.0 / a))
        }
    }
}

/// Distinct ratios with their merged weights `sum d_i / nu_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Poles {
    pub ratios: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Poles {
    pub fn from_material(mat: &PiecewiseMaterialKV) -> Self {
        Self::from_canonical(&canonical_pieces(mat))
    }

    fn from_canonical(pieces: &[(f64, f64, f64)]) -> Self {
        let scale = pieces.iter().map(|(_, e, nu)| e / nu).fold(0.0, f64::max);
        let mut ratios: Vec<f64> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        // Weighted running sum of ratios for each merged group.
        let mut moments: Vec<f64> = Vec::new();
        let mut group_start: Vec<f64> = Vec::new();
        for &(d, e, nu) in pieces {
            let r = e / nu;
            let w = d / nu;
            match group_start.last() {
                Some(&r0) if r - r0 <= MERGE_RTOL * scale => {
                    let last = weights.len() - 1;
                    weights[last] += w;
                    moments[last] += w * r;
                    ratios[last] = moments[last] / weights[last];
                }
                _ => {
                    group_start.push(r);
                    ratios.push(r);
                    weights.push(w);
                    moments.push(w * r);
                }
            }
        }
        Self { ratios, weights }
    }

    /// Secular function `sum w_i / (r_i - s)`.
    pub fn secular(&self, s: f64) -> f64 {
        self.ratios.iter().zip(&self.weights).map(|(r, w)| w / (r - s)).sum()
    }

    /// `Q(s) = sum_i w_i prod_{j != i} (r_j - s)` and the sum of the absolute
    /// values of its terms, which sets the scale for residual checks.
    pub fn q_polynomial(&self, s: f64) -> (f64, f64) {
        let n = self.ratios.len();
        let mut value = 0.0;
        let mut magnitude = 0.0;
        for i in 0..n {
            let mut term = self.weights[i];
            for j in 0..n {
                if j != i {
                    term *= self.ratios[j] - s;
                }
            }
            value += term;
            magnitude += term.abs();
        }
        (value, magnitude)
    }

    /// The unique root of the secular function in `(r_l, r_{l+1})`.
    fn root_between(&self, l: usize) -> Result<f64> {
        let (mut lo, mut hi) = (self.ratios[l], self.ratios[l + 1]);
        // The secular function increases from -inf to +inf on the interval.
        loop {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi || hi - lo <= ROOT_RTOL * hi.abs() {
                return Ok(mid);
            }
            let f = self.secular(mid);
            if !f.is_finite() {
                return Err(Error::Numerical(format!("secular function not finite at {mid}")));
            }
            if f > 0.0 {
                hi = mid;
            } else if f < 0.0 {
                lo = mid;
            } else {
                return Ok(mid);
            }
        }
    }
}

/// Exact homogenized law of a layered material.
pub fn fit_prony(mat: &PiecewiseMaterialKV) -> Result<PronyModel> {
    if mat.e_vals.iter().chain(&mat.nu_vals).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput("material must be positive and finite".into()));
    }
    let pieces = canonical_pieces(mat);
    let (e_prime, nu_prime) = markovian_from_pieces(&pieces);
    let poles = Poles::from_canonical(&pieces);
    let n_modes = poles.ratios.len() - 1;
    let mut alphas = Vec::with_capacity(n_modes);
    let mut betas = Vec::with_capacity(n_modes);
    for l in 0..n_modes {
        let a = poles.root_between(l)?;
        let inv_beta: f64 = poles.ratios.iter().zip(&poles.weights).map(|(r, w)| w / ((r - a) * (r - a))).sum();
        alphas.push(a);
        betas.push(1.0 / inv_beta);
    }
    Ok(PronyModel {
        e_prime,
        nu_prime,
        alphas,
        betas,
    })
}

/// Stress and internal-variable histories from the state-space form.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceTrajectory {
    pub sigma: Vec<f64>,
    /// `xi[l][k]` is mode `l` at time node `k`.
    pub xi: Vec<Vec<f64>>,
}

/// Integrate `xi' = -alpha xi + beta eps` exactly for strain linear between
/// time nodes; stress is `E' eps + nu' deps - sum xi`.
pub fn evaluate_state_space(model: &PronyModel, strain: &StrainProgram) -> StateSpaceTrajectory {
    let nt = strain.len();
    let dt = strain.grid.dt();
    let coeffs = model.step_coefficients(dt);
    let mut xi = vec![vec![0.0; nt]; model.n_modes()];
    for (l, &[decay, c0, c1]) in coeffs.iter().enumerate() {
        let b = model.betas[l];
        let row = &mut xi[l];
        for k in 0..nt - 1 {
            let (e0, e1) = (strain.eps[k], strain.eps[k + 1]);
            row[k + 1] = decay * row[k] + b * dt * (c0 * e0 + c1 * (e1 - e0));
        }
    }
    let sigma = (0..nt)
        .map(|k| {
            let memory: f64 = xi.iter().map(|row| row[k]).sum();
            model.e_prime * strain.eps[k] + model.nu_prime * strain.deps[k] - memory
        })
        .collect();
    StateSpaceTrajectory { sigma, xi }
}

/// Product-integration quadrature of the convolution form, with the strain
/// expanded in hat functions on the time grid.
pub fn evaluate_volterra(model: &PronyModel, strain: &StrainProgram) -> Vec<f64> {
    let nt = strain.len();
    let h = strain.grid.dt();
    let eps = &strain.eps;
    let mut conv = vec![0.0; nt];
    for (&a, &b) in model.alphas.iter().zip(&model.betas) {
        let x = a * h;
        let q = (-x).exp();
        let half = 0.5 * x;
        let sinhc = if half.abs() < 1e-4 { 1.0 + half * half / 6.0 } else { half.sinh() / half };
        let c_int = h * sinhc * sinhc;
        let c_right = h * phi2(x);
        // Left half-hat weight times exp(-alpha t_k), kept overflow-free.
        let left = |k: usize| -> f64 {
            if x <= 1.0 {
                h * phi3(x) * (-(k as f64) * x).exp()
            } else {
                let kf = k as f64;
                h * ((-(kf - 1.0) * x).exp() - (-kf * x).exp() * (1.0 + x)) / (x * x)
            }
        };
        // Geometric sum over interior hats: g_k = sum_{0<j<k} q^{k-j} eps_j.
        let mut g = 0.0;
        for k in 1..nt {
            if k >= 2 {
                g = q * (g + eps[k - 1]);
            }
            conv[k] += b * (c_right * eps[k] + c_int * g + left(k) * eps[0]);
        }
    }
    (0..nt)
        .map(|k| model.e_prime * eps[k] + model.nu_prime * strain.deps[k] - conv[k])
        .collect()
}

/// Memoryless law `E' eps + nu' deps`.
pub fn no_memory(mat: &KvMaterial, strain: &StrainProgram) -> Result<Vec<f64>> {
    let (e, nu) = markovian_params(mat)?;
    Ok(strain.eps.iter().zip(&strain.deps).map(|(x, dx)| e * x + nu * dx).collect())
}

/// Prony model of the equal-width piecewise-constant approximation.
pub fn pc_model(mat: &ContinuousMaterialKV, n_pieces: usize) -> Result<PronyModel> {
    fit_prony(&pc_discretize(mat, n_pieces)?)
}

/// Stress predicted by the piecewise-constant approximant with `n_pieces`
/// equal cells.
pub fn pc_constitutive(mat: &ContinuousMaterialKV, n_pieces: usize, strain: &StrainProgram) -> Result<Vec<f64>> {
    Ok(evaluate_state_space(&pc_model(mat, n_pieces)?, strain).sigma)
}
