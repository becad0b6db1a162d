//! Finite-element cell solvers producing averaged stress trajectories.
//!
//! Kelvin–Voigt cells are discretized with linear elements in space and the
//! classical four-stage Runge–Kutta method in time. Elasto-viscoplastic cells
//! reduce to a uniform stress per time step and an ODE for the plastic strain
//! in each element.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{SpaceGrid, TimeGrid};
use crate::materials::{KvMaterial, MaterialEVP, StrainProgram};
use crate::tridiag::Tridiag;

/// Space-time field stored row-major with one row per time node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeField {
    pub n_time: usize,
    pub n_space: usize,
    pub values: Vec<f64>,
}

impl SpaceTimeField {
    pub fn zeros(n_time: usize, n_space: usize) -> Self {
        Self {
            n_time,
            n_space,
            values: vec![0.0; n_time * n_space],
        }
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_space..(k + 1) * self.n_space]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.n_space..(k + 1) * self.n_space]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSolutionKV {
    /// Nodal displacement, present when fields were requested.
    pub u: Option<SpaceTimeField>,
    pub sigma_bar: Vec<f64>,
    pub strain_bar: Vec<f64>,
    /// Largest deviation of any element stress from the mean stress over the run.
    pub max_stress_spread: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSolutionEVP {
    pub u: Option<SpaceTimeField>,
    /// Per-element plastic strain.
    pub eps_p: Option<SpaceTimeField>,
    pub sigma_bar: Vec<f64>,
    pub eps_p_bar: Vec<f64>,
    pub strain_bar: Vec<f64>,
}

fn strain_on(strain: &StrainProgram, time: TimeGrid) -> StrainProgram {
    if strain.grid == time {
        strain.clone()
    } else {
        strain.resample_linear(time)
    }
}

fn check_positive(name: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        Some(i) => Err(Error::InvalidInput(format!("{name} must be positive and finite, element {i} has {}", values[i]))),
        None => Ok(()),
    }
}

/// Semi-discrete Kelvin–Voigt cell with element values and a factorized
/// viscous matrix.
struct KvCell {
    h: f64,
    e: Vec<f64>,
    nu: Vec<f64>,
    visc: Tridiag,
}

impl KvCell {
    /// Factor the viscous matrix on the interior nodes; with periodic
    /// conditions node 0 is pinned, which yields the same matrix.
    fn new(mat: &KvMaterial, space: SpaceGrid) -> Result<Self> {
        let (e, nu) = mat.element_values(space);
        check_positive("stiffness", &e)?;
        check_positive("viscosity", &nu)?;
        let h = space.spacing();
        let n_int = space.n_elements() - 1;
        if n_int == 0 {
            return Err(Error::InvalidInput("cell grid needs at least one interior node".into()));
        }
        let diag: Vec<f64> = (0..n_int).map(|i| (nu[i] + nu[i + 1]) / h).collect();
        let off: Vec<f64> = (0..n_int - 1).map(|i| -nu[i + 1] / h).collect();
        let visc = Tridiag::factor(&diag, &off)?;
        Ok(Self { h, e, nu, visc })
    }

    /// Element gradient of a fluctuation given on all nodes.
    fn grad(&self, w: &[f64], e: usize) -> f64 {
        (w[e + 1] - w[e]) / self.h
    }

    /// Rate of the nodal fluctuation `w` (all nodes, ends held fixed) under
    /// averaged strain `eps` and rate `deps`. Writes the interior rate into
    /// `out`, whose ends are left at zero.
    fn rate(&self, w: &[f64], eps: f64, deps: f64, out: &mut [f64]) {
        let n_el = self.e.len();
        let elastic = |e: usize| self.e[e] * (self.grad(w, e) + eps) + self.nu[e] * deps;
        let rhs = &mut out[1..n_el];
        let mut left = elastic(0);
        for (i, r) in rhs.iter_mut().enumerate() {
            let right = elastic(i + 1);
            *r = right - left;
            left = right;
        }
        self.visc.solve(rhs);
        out[0] = 0.0;
        out[n_el] = 0.0;
    }

    /// Element stresses for state `w` with rate `dw`; returns (mean, spread).
    fn stress(&self, w: &[f64], dw: &[f64], eps: f64, deps: f64) -> (f64, f64) {
        let n_el = self.e.len();
        let mut sum = 0.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for e in 0..n_el {
            let s = self.e[e] * (self.grad(w, e) + eps) + self.nu[e] * (self.grad(dw, e) + deps);
            sum += self.h * s;
            lo = lo.min(s);
            hi = hi.max(s);
        }
        (sum, hi - lo)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Boundary {
    Dirichlet,
    Periodic,
}

fn solve_kv(
    mat: &KvMaterial,
    strain: &StrainProgram,
    space: SpaceGrid,
    time: TimeGrid,
    keep_fields: bool,
    boundary: Boundary,
) -> Result<CellSolutionKV> {
    let cell = KvCell::new(mat, space)?;
    let strain = strain_on(strain, time);
    let n = space.n_points();
    let nt = time.n_steps();
    let dt = time.dt();
    let ys = space.nodes();

    let mut w = vec![0.0; n];
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    let mut sigma_bar = Vec::with_capacity(nt);
    let mut spread: f64 = 0.0;
    let mut u = keep_fields.then(|| SpaceTimeField::zeros(nt, n));

    for k in 0..nt {
        let t = time.node(k);
        let (eps, deps) = (strain.eps[k], strain.deps[k]);
        cell.rate(&w, eps, deps, &mut k1);
        if boundary == Boundary::Periodic {
            remove_mean(&mut k1);
        }
        let (s, d) = cell.stress(&w, &k1, eps, deps);
        if !s.is_finite() {
            return Err(Error::Numerical(format!("non-finite stress at time step {k}")));
        }
        sigma_bar.push(s);
        spread = spread.max(d);
        if let Some(u) = u.as_mut() {
            for ((dst, wi), y) in u.row_mut(k).iter_mut().zip(&w).zip(&ys) {
                *dst = wi + eps * y;
            }
        }
        if k + 1 == nt {
            break;
        }

        let (eh, dh) = strain.eval(t + 0.5 * dt);
        for i in 0..n {
            tmp[i] = w[i] + 0.5 * dt * k1[i];
        }
        cell.rate(&tmp, eh, dh, &mut k2);
        for i in 0..n {
            tmp[i] = w[i] + 0.5 * dt * k2[i];
        }
        cell.rate(&tmp, eh, dh, &mut k3);
        for i in 0..n {
            tmp[i] = w[i] + dt * k3[i];
        }
        cell.rate(&tmp, strain.eps[k + 1], strain.deps[k + 1], &mut k4);
        for i in 0..n {
            w[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if boundary == Boundary::Periodic {
            remove_mean(&mut w);
        }
    }

    Ok(CellSolutionKV {
        u,
        sigma_bar,
        strain_bar: strain.eps,
        max_stress_spread: spread,
    })
}

/// Subtract the trapezoidal mean of a periodic nodal field (last node
/// duplicates the first).
fn remove_mean(w: &mut [f64]) {
    let n = w.len() - 1;
    let mean = w[..n].iter().sum::<f64>() / n as f64;
    for v in w.iter_mut() {
        *v -= mean;
    }
}

/// Kelvin–Voigt cell problem with `u(0, t) = 0`, `u(1, t) = eps_bar(t)`.
pub fn solve_kv_dirichlet(mat: &KvMaterial, strain: &StrainProgram, space: SpaceGrid, time: TimeGrid) -> Result<CellSolutionKV> {
    solve_kv(mat, strain, space, time, true, Boundary::Dirichlet)
}

/// Averaged stress only, without storing the displacement field.
pub fn kv_average_stress(mat: &KvMaterial, strain: &StrainProgram, space: SpaceGrid, time: TimeGrid) -> Result<Vec<f64>> {
    Ok(solve_kv(mat, strain, space, time, false, Boundary::Dirichlet)?.sigma_bar)
}

/// Kelvin–Voigt cell problem with a periodic, mean-zero fluctuation
/// `u = eps_bar(t) y + w(y, t)`.
pub fn solve_kv_periodic(mat: &KvMaterial, strain: &StrainProgram, space: SpaceGrid, time: TimeGrid) -> Result<CellSolutionKV> {
    solve_kv(mat, strain, space, time, true, Boundary::Periodic)
}

/// Most halvings of the time step tried by the viscoplastic solver.
const MAX_HALVINGS: u32 = 8;

struct EvpCell {
    h: f64,
    e: Vec<f64>,
    eps_p0: Vec<f64>,
    sigma_y: Vec<f64>,
    n_exp: Vec<f64>,
    /// Integral of `1/E` over the cell.
    compliance: f64,
}

impl EvpCell {
    fn stress(&self, eps: f64, eps_p: &[f64]) -> f64 {
        let mean_p: f64 = eps_p.iter().sum::<f64>() * self.h;
        (eps - mean_p) / self.compliance
    }

    fn flow(&self, e: usize, sigma: f64) -> f64 {
        self.eps_p0[e] * sigma.signum() * (sigma.abs() / self.sigma_y[e]).powf(self.n_exp[e])
    }

    fn rate(&self, eps: f64, eps_p: &[f64], out: &mut [f64]) -> f64 {
        let s = self.stress(eps, eps_p);
        if s == 0.0 {
            out.fill(0.0);
        } else {
            for (e, o) in out.iter_mut().enumerate() {
                *o = self.flow(e, s);
            }
        }
        s
    }

    /// Magnitude of the stiffest mode of the plastic-strain ODE at stress `s`.
    fn stiffness(&self, s: f64) -> f64 {
        if s == 0.0 {
            return 0.0;
        }
        let a = s.abs();
        let slope: f64 = (0..self.e.len())
            .map(|e| self.eps_p0[e] * self.n_exp[e] * (a / self.sigma_y[e]).powf(self.n_exp[e]) / a)
            .sum();
        slope * self.h / self.compliance
    }

    /// One RK4 step of length `dt` from `t`; returns false on non-finite values.
    fn rk4(&self, strain: &StrainProgram, t: f64, dt: f64, eps_p: &mut [f64], scratch: &mut [Vec<f64>; 5]) -> bool {
        let [k1, k2, k3, k4, tmp] = scratch;
        let n = eps_p.len();
        let (e0, _) = strain.eval(t);
        let (eh, _) = strain.eval(t + 0.5 * dt);
        let (e1, _) = strain.eval(t + dt);
        self.rate(e0, eps_p, k1);
        for i in 0..n {
            tmp[i] = eps_p[i] + 0.5 * dt * k1[i];
        }
        self.rate(eh, tmp, k2);
        for i in 0..n {
            tmp[i] = eps_p[i] + 0.5 * dt * k2[i];
        }
        self.rate(eh, tmp, k3);
        for i in 0..n {
            tmp[i] = eps_p[i] + dt * k3[i];
        }
        self.rate(e1, tmp, k4);
        for i in 0..n {
            tmp[i] = eps_p[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if tmp.iter().all(|v| v.is_finite()) {
            eps_p.copy_from_slice(tmp);
            true
        } else {
            false
        }
    }
}

/// Elasto-viscoplastic cell problem driven by the averaged strain.
pub fn solve_evp(mat: &MaterialEVP, strain: &StrainProgram, space: SpaceGrid, time: TimeGrid) -> Result<CellSolutionEVP> {
    solve_evp_impl(mat, strain, space, time, true)
}

/// Averaged stress and plastic strain only.
pub fn evp_averages(mat: &MaterialEVP, strain: &StrainProgram, space: SpaceGrid, time: TimeGrid) -> Result<CellSolutionEVP> {
    solve_evp_impl(mat, strain, space, time, false)
}

fn solve_evp_impl(
    mat: &MaterialEVP,
    strain: &StrainProgram,
    space: SpaceGrid,
    time: TimeGrid,
    keep_fields: bool,
) -> Result<CellSolutionEVP> {
    let vals = mat.element_values(space);
    check_positive("stiffness", &vals.e)?;
    check_positive("yield stress", &vals.sigma_y)?;
    check_positive("rate exponent", &vals.n_exp)?;
    if vals.eps_p0.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidInput("rate constant must be non-negative".into()));
    }
    let h = space.spacing();
    let compliance = vals.e.iter().map(|e| h / e).sum();
    let cell = EvpCell {
        h,
        e: vals.e,
        eps_p0: vals.eps_p0,
        sigma_y: vals.sigma_y,
        n_exp: vals.n_exp,
        compliance,
    };
    let strain = strain_on(strain, time);
    let n_el = space.n_elements();
    let nt = time.n_steps();
    let dt = time.dt();

    let mut eps_p = vec![0.0; n_el];
    let mut scratch: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n_el]);
    let mut sigma_bar = Vec::with_capacity(nt);
    let mut eps_p_bar = Vec::with_capacity(nt);
    let mut u_field = keep_fields.then(|| SpaceTimeField::zeros(nt, space.n_points()));
    let mut p_field = keep_fields.then(|| SpaceTimeField::zeros(nt, n_el));

    for k in 0..nt {
        let s = cell.stress(strain.eps[k], &eps_p);
        if !s.is_finite() {
            return Err(Error::Numerical(format!("non-finite stress at time step {k}")));
        }
        sigma_bar.push(s);
        eps_p_bar.push(eps_p.iter().sum::<f64>() * h);
        if let (Some(u), Some(p)) = (u_field.as_mut(), p_field.as_mut()) {
            p.row_mut(k).copy_from_slice(&eps_p);
            let row = u.row_mut(k);
            for e in 0..n_el {
                row[e + 1] = row[e] + h * (s / cell.e[e] + eps_p[e]);
            }
        }
        if k + 1 == nt {
            break;
        }

        // Pick a power-of-two substep count from the local stiffness, then
        // halve further on non-finite results.
        let t0 = time.node(k);
        let lam = cell.stiffness(s);
        let mut halvings = 0u32;
        while halvings < MAX_HALVINGS && lam * dt / f64::from(1u32 << halvings) > 1.0 {
            halvings += 1;
        }
        let saved = eps_p.clone();
        loop {
            let m = 1u32 << halvings;
            let sub = dt / f64::from(m);
            let ok = (0..m).all(|j| cell.rk4(&strain, t0 + f64::from(j) * sub, sub, &mut eps_p, &mut scratch));
            if ok {
                break;
            }
            eps_p.copy_from_slice(&saved);
            halvings += 1;
            if halvings > MAX_HALVINGS {
                return Err(Error::Numerical(format!(
                    "plastic flow overflowed at time step {k} after {MAX_HALVINGS} step halvings"
                )));
            }
        }
    }

    Ok(CellSolutionEVP {
        u: u_field,
        eps_p: p_field,
        sigma_bar,
        eps_p_bar,
        strain_bar: strain.eps,
    })
}
