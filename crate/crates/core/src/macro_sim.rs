//! Quasistatic macroscale bar on `[0, 1]` driven by a body force, with
//! interchangeable constitutive backends.
//!
//! Without inertia the balance `d sigma / dx + f = 0` integrates to
//! `sigma(x, t) = c(t) - F(x, t)` with `F(x, t) = int_0^x f(s, t) ds`, and
//! `c(t)` is fixed by `u(1, t) = int_0^1 eps dx = 0`. Strains are advanced
//! node by node with the trapezoidal rule.

use serde::{Deserialize, Serialize};

use crate::cell_solver::SpaceTimeField;
use crate::error::{Error, Result};
use crate::fields::{interp_uniform, trapezoid_weights, SpaceGrid, TimeGrid};
use crate::materials::KvMaterial;
use crate::prony::{fit_prony, markovian_params, pc_model, PronyModel};
use crate::rno::{PointEvaluator, RnoModel, Variant};
use crate::tridiag::Tridiag;

/// Body force `amplitude * sin(wavenumber * pi * (x + t))` on a space-time grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroProblem {
    pub amplitude: f64,
    pub wavenumber: f64,
    pub space: SpaceGrid,
    pub time: TimeGrid,
}

impl MacroProblem {
    pub fn new(n_space: usize, n_time: usize) -> Result<Self> {
        Ok(Self {
            amplitude: 100.0,
            wavenumber: 8.0,
            space: SpaceGrid::new(n_space)?,
            time: TimeGrid::new(n_time)?,
        })
    }

    pub fn default_grids() -> Self {
        Self::new(201, 501).expect("default grids are valid")
    }

    pub fn validate(&self) -> Result<()> {
        if !self.amplitude.is_finite() || !self.wavenumber.is_finite() || self.wavenumber <= 0.0 {
            return Err(Error::Config("forcing amplitude must be finite and wavenumber positive".into()));
        }
        Ok(())
    }

    fn k(&self) -> f64 {
        self.wavenumber * std::f64::consts::PI
    }

    pub fn forcing(&self, x: f64, t: f64) -> f64 {
        self.amplitude * (self.k() * (x + t)).sin()
    }

    /// `int_0^x f(s, t) ds`.
    pub fn load(&self, x: f64, t: f64) -> f64 {
        let k = self.k();
        self.amplitude / k * ((k * t).cos() - (k * (x + t)).cos())
    }

    fn load_row(&self, t: f64) -> Vec<f64> {
        self.space.nodes().iter().map(|&x| self.load(x, t)).collect()
    }
}

/// Constitutive model used at every macroscale point, or the resolved
/// microstructure itself.
#[derive(Debug, Clone)]
pub enum Backend {
    Homogenized(PronyModel),
    NoMemory { e_prime: f64, nu_prime: f64 },
    /// Material with period `1 / inv_eps`, meshed with `elems_per_period`
    /// elements per period.
    Multiscale { material: KvMaterial, inv_eps: usize, elems_per_period: usize },
    /// Trained surrogate with the material channels it is evaluated on.
    Rno { model: RnoModel, channels: Vec<Vec<f64>> },
}

pub const DEFAULT_PIECES: usize = 250;
pub const DEFAULT_ELEMS_PER_PERIOD: usize = 200;
const MIN_ELEMS_PER_PERIOD: usize = 10;

impl Backend {
    /// Memory-kernel law: exact for layered materials, piecewise-constant
    /// approximation with `n_pieces` pieces otherwise.
    pub fn homogenized(mat: &KvMaterial, n_pieces: usize) -> Result<Self> {
        Ok(Backend::Homogenized(match mat {
            KvMaterial::Piecewise(m) => fit_prony(m)?,
            KvMaterial::Continuous(c) => pc_model(c, n_pieces)?,
        }))
    }

    pub fn no_memory(mat: &KvMaterial) -> Result<Self> {
        let (e_prime, nu_prime) = markovian_params(mat)?;
        Ok(Backend::NoMemory { e_prime, nu_prime })
    }

    pub fn multiscale(mat: &KvMaterial, inv_eps: usize) -> Self {
        Backend::Multiscale {
            material: mat.clone(),
            inv_eps,
            elems_per_period: DEFAULT_ELEMS_PER_PERIOD,
        }
    }

    /// Surrogate fed with the material sampled on `n_points` nodes.
    pub fn rno(model: RnoModel, mat: &KvMaterial, n_points: usize) -> Result<Self> {
        let (e, nu) = mat.fields(SpaceGrid::new(n_points)?);
        Ok(Backend::Rno {
            model,
            channels: vec![e.into_values(), nu.into_values()],
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Backend::Homogenized(_) => "homogenized",
            Backend::NoMemory { .. } => "no_memory",
            Backend::Multiscale { .. } => "multiscale",
            Backend::Rno { .. } => "rno",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Backend::Homogenized(m) => m.validate(),
            Backend::NoMemory { e_prime, nu_prime } => PronyModel::memoryless(*e_prime, *nu_prime).validate(),
            Backend::Multiscale { inv_eps, elems_per_period, .. } => {
                if *inv_eps == 0 {
                    return Err(Error::Config("number of periods must be positive".into()));
                }
                if *elems_per_period < MIN_ELEMS_PER_PERIOD {
                    return Err(Error::Config(format!(
                        "{elems_per_period} elements per period under-resolve the microstructure (need at least {MIN_ELEMS_PER_PERIOD})"
                    )));
                }
                Ok(())
            }
            Backend::Rno { model, channels } => {
                if model.variant != Variant::Kv {
                    return Err(Error::Config("macroscale runs need a Kelvin–Voigt surrogate".into()));
                }
                model.validate()?;
                if channels.len() != 2 {
                    return Err(Error::Shape("surrogate backend needs two material channels".into()));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroSolution {
    pub u: SpaceTimeField,
    pub eps: SpaceTimeField,
    pub sigma: SpaceTimeField,
    /// Memory stress `sum xi` (homogenized) or each internal variable
    /// (surrogate); empty otherwise.
    pub internal: Vec<SpaceTimeField>,
}

pub fn solve_macro(problem: &MacroProblem, backend: &Backend) -> Result<MacroSolution> {
    problem.validate()?;
    backend.validate()?;
    match backend {
        Backend::Homogenized(m) => solve_affine(problem, m),
        Backend::NoMemory { e_prime, nu_prime } => solve_affine(problem, &PronyModel::memoryless(*e_prime, *nu_prime)),
        Backend::Multiscale {
            material,
            inv_eps,
            elems_per_period,
        } => solve_multiscale(problem, material, *inv_eps, *elems_per_period),
        Backend::Rno { model, channels } => solve_rno(problem, model, channels),
    }
}

/// Displacement from strain by cumulative trapezoid.
fn integrate_strain(eps: &[f64], h: f64, u: &mut [f64]) {
    u[0] = 0.0;
    for i in 1..eps.len() {
        u[i] = u[i - 1] + 0.5 * h * (eps[i - 1] + eps[i]);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Laws that are affine in the current strain at every step.
fn solve_affine(problem: &MacroProblem, model: &PronyModel) -> Result<MacroSolution> {
    let (nx, nt) = (problem.space.n_points(), problem.time.n_steps());
    let (h, dt) = (problem.space.spacing(), problem.time.dt());
    let w = trapezoid_weights(nx);
    let (e, nu) = (model.e_prime, model.nu_prime);
    let coeffs = model.step_coefficients(dt);
    let n_modes = model.n_modes();
    let mut sol = MacroSolution {
        u: SpaceTimeField::zeros(nt, nx),
        eps: SpaceTimeField::zeros(nt, nx),
        sigma: SpaceTimeField::zeros(nt, nx),
        internal: if n_modes > 0 { vec![SpaceTimeField::zeros(nt, nx)] } else { Vec::new() },
    };

    // Rest state: the rate alone balances the load.
    let load0 = problem.load_row(0.0);
    let c0 = dot(&w, &load0);
    let mut sigma: Vec<f64> = load0.iter().map(|l| c0 - l).collect();
    let mut eps = vec![0.0; nx];
    let mut rate: Vec<f64> = sigma.iter().map(|s| s / nu).collect();
    let mut xi = vec![vec![0.0; nx]; n_modes];
    sol.sigma.row_mut(0).copy_from_slice(&sigma);

    let sum_b: f64 = coeffs.iter().zip(&model.betas).map(|(&[_, _, c1], b)| b * dt * c1).sum();
    let denom = 1.0 + dt * (e - sum_b) / (2.0 * nu);
    let q = dt / (2.0 * nu) / denom;
    let mut p = vec![0.0; nx];
    let mut a_sum = vec![0.0; nx];
    for k in 1..nt {
        let load = problem.load_row(problem.time.node(k));
        a_sum.iter_mut().for_each(|v| *v = 0.0);
        for (l, &[decay, c0, c1]) in coeffs.iter().enumerate() {
            let b = model.betas[l];
            for i in 0..nx {
                a_sum[i] += decay * xi[l][i] + b * dt * (c0 - c1) * eps[i];
            }
        }
        for i in 0..nx {
            p[i] = (eps[i] + 0.5 * dt * rate[i] + dt / (2.0 * nu) * (a_sum[i] - load[i])) / denom;
        }
        let c = -dot(&w, &p) / q;
        for i in 0..nx {
            let next = p[i] + q * c;
            for (l, &[decay, c0, c1]) in coeffs.iter().enumerate() {
                let b = model.betas[l];
                xi[l][i] = decay * xi[l][i] + b * dt * (c0 * eps[i] + c1 * (next - eps[i]));
            }
            eps[i] = next;
            sigma[i] = c - load[i];
            let memory: f64 = xi.iter().map(|x| x[i]).sum();
            rate[i] = (sigma[i] - e * eps[i] + memory) / nu;
        }
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite strain at time step {k}")));
        }
        sol.eps.row_mut(k).copy_from_slice(&eps);
        sol.sigma.row_mut(k).copy_from_slice(&sigma);
        integrate_strain(&eps, h, sol.u.row_mut(k));
        if n_modes > 0 {
            let row = sol.internal[0].row_mut(k);
            for (i, r) in row.iter_mut().enumerate() {
                *r = xi.iter().map(|x| x[i]).sum();
            }
        }
    }
    Ok(sol)
}

const SECANT_MAX_ITER: usize = 30;
const SECANT_TOL: f64 = 1e-10;

/// Solve `F(base + kappa d_i, d_i, xi_i) = c - load_i` for the rates `d`
/// jointly with `c` under `sum w_i d_i = target`.
#[allow(clippy::too_many_arguments)]
fn solve_rates(
    ev: &PointEvaluator,
    base: &[f64],
    kappa: f64,
    xi: &[f64],
    load: &[f64],
    w: &[f64],
    target: f64,
    guess: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let n = base.len();
    let eval = |d: &[f64]| -> Result<Vec<f64>> {
        let eps: Vec<f64> = base.iter().zip(d).map(|(b, d)| b + kappa * d).collect();
        ev.stress(&eps, d, xi)
    };
    let mut d = guess.to_vec();
    let mut f = eval(&d)?;
    let scale = load.iter().chain(f.iter()).fold(1.0_f64, |m, v| m.max(v.abs()));

    // Initial slopes by a forward difference.
    let probe = 1e-6 * (1.0 + d.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
    let dp: Vec<f64> = d.iter().map(|v| v + probe).collect();
    let fp = eval(&dp)?;
    let mut slope: Vec<f64> = f.iter().zip(&fp).map(|(a, b)| (b - a) / probe).collect();
    let mut c = dot(w, &f.iter().zip(load).map(|(f, l)| f + l).collect::<Vec<_>>()) / w.iter().sum::<f64>();

    for _ in 0..SECANT_MAX_ITER {
        let r: Vec<f64> = (0..n).map(|i| f[i] - (c - load[i])).collect();
        let gap = target - dot(w, &d);
        let res = r.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if res <= SECANT_TOL * scale && gap.abs() <= SECANT_TOL * (1.0 + target.abs()) {
            return Ok((d, c));
        }
        if slope.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Numerical("surrogate stress is not increasing in the strain rate".into()));
        }
        let inv_sum: f64 = w.iter().zip(&slope).map(|(w, s)| w / s).sum();
        let dc = (gap + w.iter().zip(&r).zip(&slope).map(|((w, r), s)| w * r / s).sum::<f64>()) / inv_sum;
        let step: Vec<f64> = (0..n).map(|i| (dc - r[i]) / slope[i]).collect();
        let next: Vec<f64> = d.iter().zip(&step).map(|(d, s)| d + s).collect();
        let f_next = eval(&next)?;
        for i in 0..n {
            if step[i].abs() > 0.0 {
                let s = (f_next[i] - f[i]) / step[i];
                // Keep the previous slope when the secant estimate is unusable.
                if s > 0.0 && s.is_finite() {
                    slope[i] = s;
                }
            }
        }
        d = next;
        f = f_next;
        c += dc;
    }
    Err(Error::Numerical(format!("rate solve did not converge in {SECANT_MAX_ITER} iterations")))
}

fn solve_rno(problem: &MacroProblem, model: &RnoModel, channels: &[Vec<f64>]) -> Result<MacroSolution> {
    let (nx, nt) = (problem.space.n_points(), problem.time.n_steps());
    let (h, dt) = (problem.space.spacing(), problem.time.dt());
    let ls = model.n_state;
    let w = trapezoid_weights(nx);
    let ch: Vec<&[f64]> = channels.iter().map(|c| c.as_slice()).collect();
    let ev = PointEvaluator::new(model, &ch, nx)?;
    let mut sol = MacroSolution {
        u: SpaceTimeField::zeros(nt, nx),
        eps: SpaceTimeField::zeros(nt, nx),
        sigma: SpaceTimeField::zeros(nt, nx),
        internal: vec![SpaceTimeField::zeros(nt, nx); ls],
    };
    let mut eps = vec![0.0; nx];
    let mut xi = vec![0.0; nx * ls];
    let zeros = vec![0.0; nx];
    let load0 = problem.load_row(0.0);
    let (mut rate, c0) = solve_rates(&ev, &eps, 0.0, &xi, &load0, &w, 0.0, &zeros)?;
    sol.sigma.row_mut(0).iter_mut().zip(&load0).for_each(|(s, l)| *s = c0 - l);
    for k in 1..nt {
        let g = ev.state_rate(&eps, &xi)?;
        for (x, g) in xi.iter_mut().zip(&g) {
            *x += dt * g;
        }
        let load = problem.load_row(problem.time.node(k));
        let base: Vec<f64> = eps.iter().zip(&rate).map(|(e, r)| e + 0.5 * dt * r).collect();
        // Zero end displacement: sum w (base + dt/2 d) = 0.
        let target = -2.0 / dt * dot(&w, &base);
        let (next_rate, c) = solve_rates(&ev, &base, 0.5 * dt, &xi, &load, &w, target, &rate)
            .map_err(|e| Error::Numerical(format!("time step {k}: {e}")))?;
        for i in 0..nx {
            eps[i] = base[i] + 0.5 * dt * next_rate[i];
        }
        rate = next_rate;
        sol.eps.row_mut(k).copy_from_slice(&eps);
        sol.sigma.row_mut(k).iter_mut().zip(&load).for_each(|(s, l)| *s = c - l);
        integrate_strain(&eps, h, sol.u.row_mut(k));
        for l in 0..ls {
            let row = sol.internal[l].row_mut(k);
            for i in 0..nx {
                row[i] = xi[i * ls + l];
            }
        }
    }
    Ok(sol)
}

/// `int phi_i sin(k (x + t))` for the hat function of node `i` on a uniform mesh.
fn hat_load(problem: &MacroProblem, h: f64, n_el: usize, t: f64, out: &mut [f64]) {
    let k = problem.k();
    let g = |j: usize| (k * (j as f64 * h + t)).sin();
    for i in 1..n_el {
        out[i - 1] = problem.amplitude * (2.0 * g(i) - g(i - 1) - g(i + 1)) / (h * k * k);
    }
}

/// Resolved bar with the periodic microstructure, P1 elements and
/// trapezoidal time stepping.
fn solve_multiscale(problem: &MacroProblem, mat: &KvMaterial, inv_eps: usize, epp: usize) -> Result<MacroSolution> {
    let n_el = inv_eps * epp;
    let h = 1.0 / n_el as f64;
    let (cell_e, cell_nu) = mat.element_values(SpaceGrid::new(epp + 1)?);
    let e: Vec<f64> = (0..n_el).map(|j| cell_e[j % epp]).collect();
    let nu: Vec<f64> = (0..n_el).map(|j| cell_nu[j % epp]).collect();
    let dt = problem.time.dt();
    let ni = n_el - 1;
    if ni == 0 {
        return Err(Error::Config("multiscale mesh has no interior nodes".into()));
    }
    // Interior stiffness rows: diag (a_{j} + a_{j+1}) / h, off -a_{j+1} / h.
    let stiff = |a: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let diag = (0..ni).map(|i| (a[i] + a[i + 1]) / h).collect();
        let off = (0..ni - 1).map(|i| -a[i + 1] / h).collect();
        (diag, off)
    };
    let (ke_d, ke_o) = stiff(&e);
    let (kn_d, kn_o) = stiff(&nu);
    let lhs_d: Vec<f64> = (0..ni).map(|i| kn_d[i] / dt + 0.5 * ke_d[i]).collect();
    let lhs_o: Vec<f64> = (0..ni - 1).map(|i| kn_o[i] / dt + 0.5 * ke_o[i]).collect();
    let rhs_d: Vec<f64> = (0..ni).map(|i| kn_d[i] / dt - 0.5 * ke_d[i]).collect();
    let rhs_o: Vec<f64> = (0..ni - 1).map(|i| kn_o[i] / dt - 0.5 * ke_o[i]).collect();
    let lhs = Tridiag::factor(&lhs_d, &lhs_o)?;

    let (nx, nt) = (problem.space.n_points(), problem.time.n_steps());
    let xs = problem.space.nodes();
    let mut sol = MacroSolution {
        u: SpaceTimeField::zeros(nt, nx),
        eps: SpaceTimeField::zeros(nt, nx),
        sigma: SpaceTimeField::zeros(nt, nx),
        internal: Vec::new(),
    };
    let mut u = vec![0.0; n_el + 1];
    let mut u_prev = u.clone();
    let mut b_prev = vec![0.0; ni];
    let mut b_next = vec![0.0; ni];
    hat_load(problem, h, n_el, 0.0, &mut b_prev);

    // Rest state: the viscous stiffness alone balances the load.
    let mut rate = vec![0.0; n_el + 1];
    {
        let kn = Tridiag::factor(&kn_d, &kn_o)?;
        let mut r = b_prev.clone();
        kn.solve(&mut r);
        rate[1..n_el].copy_from_slice(&r);
    }
    let sample = |k: usize, u: &[f64], rate: &[f64], sol: &mut MacroSolution| {
        let elem = |m: usize| -> (f64, f64) {
            let g = (u[m + 1] - u[m]) / h;
            let gr = (rate[m + 1] - rate[m]) / h;
            (g, e[m] * g + nu[m] * gr)
        };
        for (i, &x) in xs.iter().enumerate() {
            sol.u.row_mut(k)[i] = interp_uniform(u, x);
            // Element values averaged over both neighbours at element
            // boundaries, extrapolated from two elements at the ends.
            let s = x * n_el as f64;
            let j = s.round() as usize;
            let on_node = (s - s.round()).abs() < 1e-9;
            let mix = |a: (f64, f64), b: (f64, f64), wa: f64| (wa * a.0 + (1.0 - wa) * b.0, wa * a.1 + (1.0 - wa) * b.1);
            let (g, sg) = if on_node && j == 0 {
                mix(elem(0), elem(1), 1.5)
            } else if on_node && j == n_el {
                mix(elem(n_el - 1), elem(n_el - 2), 1.5)
            } else if on_node {
                mix(elem(j - 1), elem(j), 0.5)
            } else {
                elem((s.floor() as usize).min(n_el - 1))
            };
            sol.eps.row_mut(k)[i] = g;
            sol.sigma.row_mut(k)[i] = sg;
        }
    };
    sample(0, &u, &rate, &mut sol);
    for k in 1..nt {
        hat_load(problem, h, n_el, problem.time.node(k), &mut b_next);
        let mut r: Vec<f64> = (0..ni)
            .map(|i| {
                let mut v = rhs_d[i] * u[i + 1];
                if i > 0 {
                    v += rhs_o[i - 1] * u[i];
                }
                if i + 1 < ni {
                    v += rhs_o[i] * u[i + 2];
                }
                v + 0.5 * (b_prev[i] + b_next[i])
            })
            .collect();
        lhs.solve(&mut r);
        u_prev.copy_from_slice(&u);
        u[1..n_el].copy_from_slice(&r);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite displacement at time step {k}")));
        }
        for j in 0..=n_el {
            rate[j] = 2.0 * (u[j] - u_prev[j]) / dt - rate[j];
        }
        std::mem::swap(&mut b_prev, &mut b_next);
        sample(k, &u, &rate, &mut sol);
    }
    Ok(sol)
}

/// Pointwise absolute error and global relative L2 error.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMap {
    pub abs: SpaceTimeField,
    pub rel_l2: f64,
}

/// Bilinear resampling onto a new space-time grid.
pub fn resample_field(f: &SpaceTimeField, n_time: usize, n_space: usize) -> SpaceTimeField {
    if f.n_time == n_time && f.n_space == n_space {
        return f.clone();
    }
    let xs = SpaceGrid::new(n_space.max(2)).map(|g| g.nodes()).unwrap_or_default();
    let ts = TimeGrid::new(n_time.max(2)).map(|g| g.nodes()).unwrap_or_default();
    let rows: Vec<Vec<f64>> = (0..f.n_time).map(|k| xs.iter().map(|&x| interp_uniform(f.row(k), x)).collect()).collect();
    let mut out = SpaceTimeField::zeros(n_time, n_space);
    let mut col = vec![0.0; f.n_time];
    for i in 0..n_space {
        for k in 0..f.n_time {
            col[k] = rows[k][i];
        }
        for (k, &t) in ts.iter().enumerate().take(n_time) {
            out.row_mut(k)[i] = interp_uniform(&col, t);
        }
    }
    out
}

/// Error of `sol` against `reference` on the reference grid.
pub fn error_map(sol: &SpaceTimeField, reference: &SpaceTimeField) -> Result<ErrorMap> {
    let (nt, nx) = (reference.n_time, reference.n_space);
    if nt < 2 || nx < 2 {
        return Err(Error::Shape("reference field needs at least two nodes in each direction".into()));
    }
    let s = resample_field(sol, nt, nx);
    let (wt, wx) = (trapezoid_weights(nt), trapezoid_weights(nx));
    let mut abs = SpaceTimeField::zeros(nt, nx);
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..nt {
        for i in 0..nx {
            let r = reference.row(k)[i];
            let d = s.row(k)[i] - r;
            abs.row_mut(k)[i] = d.abs();
            num += wt[k] * wx[i] * d * d;
            den += wt[k] * wx[i] * r * r;
        }
    }
    if !(den > 0.0) {
        return Err(Error::InvalidInput("reference field is identically zero; relative error undefined".into()));
    }
    Ok(ErrorMap {
        abs,
        rel_l2: (num / den).sqrt(),
    })
}
