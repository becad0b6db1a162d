//! Microstructure and strain-program samplers, plus piecewise-constant
//! discretization of continuous materials.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{check_unit_span, sample_grf_with, seeded_rng, GrfSpec, Pchip, SampledField, SpaceGrid, TimeGrid};

/// Candidate breakpoints are `k / BREAK_DENOM`, `k = 0..=BREAK_DENOM`.
const BREAK_DENOM: u32 = 50;
/// Width of the periodic Gaussian smoothing applied to mean shifts.
const SMOOTHING_STD: f64 = 0.01;

const STREAM_MATERIAL: u64 = 0;
const STREAM_STRAIN: u64 = 1;

/// Sample-kind independent description of a piecewise-constant partition of
/// the unit cell with any number of value channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pieces {
    /// Strictly increasing interior breakpoints in (0, 1).
    pub breaks: Vec<f64>,
    /// `channels[c][i]` is the value of channel `c` on piece `i`.
    pub channels: Vec<Vec<f64>>,
}

impl Pieces {
    pub fn new(breaks: Vec<f64>, channels: Vec<Vec<f64>>) -> Result<Self> {
        if breaks.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("breakpoints must be strictly increasing".into()));
        }
        if breaks.first().is_some_and(|&b| b <= 0.0) || breaks.last().is_some_and(|&b| b >= 1.0) {
            return Err(Error::InvalidInput("breakpoints must lie strictly inside (0, 1)".into()));
        }
        let n = breaks.len() + 1;
        for (c, ch) in channels.iter().enumerate() {
            if ch.len() != n {
                return Err(Error::Shape(format!("channel {c} has {} values for {n} pieces", ch.len())));
            }
            if ch.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("channel {c} has non-finite values")));
            }
        }
        Ok(Self { breaks, channels })
    }

    pub fn n_pieces(&self) -> usize {
        self.breaks.len() + 1
    }

    /// Piece boundaries including 0 and 1.
    pub fn edges(&self) -> Vec<f64> {
        let mut e = Vec::with_capacity(self.breaks.len() + 2);
        e.push(0.0);
        e.extend_from_slice(&self.breaks);
        e.push(1.0);
        e
    }

    pub fn lengths(&self) -> Vec<f64> {
        self.edges().windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Index of the piece containing `y`, with pieces closed on the left.
    /// `y = 1` wraps onto the first piece.
    pub fn piece_at(&self, y: f64) -> usize {
        if y >= 1.0 {
            return 0;
        }
        self.breaks.partition_point(|&b| b <= y)
    }

    /// Nodal values of channel `c` on `grid`.
    pub fn sample(&self, c: usize, grid: SpaceGrid) -> SampledField {
        let values = grid.nodes().into_iter().map(|y| self.channels[c][self.piece_at(y)]).collect();
        SampledField::new(grid, values).expect("finite piece values")
    }

    /// Exact average of channel `c` over each element of `grid`.
    pub fn element_averages(&self, c: usize, grid: SpaceGrid) -> Vec<f64> {
        let h = grid.spacing();
        let edges = self.edges();
        let vals = &self.channels[c];
        let mut out = Vec::with_capacity(grid.n_elements());
        let mut p = 0;
        for e in 0..grid.n_elements() {
            let (a, b) = (grid.node(e), grid.node(e + 1));
            while p + 1 < vals.len() && edges[p + 1] <= a {
                p += 1;
            }
            let mut acc = 0.0;
            let mut q = p;
            while q < vals.len() && edges[q] < b {
                let lo = edges[q].max(a);
                let hi = edges[q + 1].min(b);
                if hi > lo {
                    acc += (hi - lo) * vals[q];
                }
                q += 1;
            }
            out.push(acc / h);
        }
        out
    }
}

/// Layered Kelvin–Voigt material: stiffness and viscosity per piece.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseMaterialKV {
    pub breaks: Vec<f64>,
    pub e_vals: Vec<f64>,
    pub nu_vals: Vec<f64>,
}

impl PiecewiseMaterialKV {
    pub fn new(breaks: Vec<f64>, e_vals: Vec<f64>, nu_vals: Vec<f64>) -> Result<Self> {
        Pieces::new(breaks.clone(), vec![e_vals.clone(), nu_vals.clone()])?;
        if e_vals.iter().chain(&nu_vals).any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidInput("stiffness and viscosity must be positive".into()));
        }
        Ok(Self { breaks, e_vals, nu_vals })
    }

    /// Material from piece lengths rather than breakpoints.
    pub fn from_lengths(lengths: &[f64], e_vals: Vec<f64>, nu_vals: Vec<f64>) -> Result<Self> {
        let total: f64 = lengths.iter().sum();
        if lengths.iter().any(|&d| !(d > 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("piece lengths must be positive and sum to 1, got {total}")));
        }
        let mut breaks = Vec::with_capacity(lengths.len().saturating_sub(1));
        let mut acc = 0.0;
        for d in &lengths[..lengths.len() - 1] {
            acc += d;
            breaks.push(acc);
        }
        Self::new(breaks, e_vals, nu_vals)
    }

    pub fn homogeneous(e: f64, nu: f64) -> Result<Self> {
        Self::new(Vec::new(), vec![e], vec![nu])
    }

    pub fn n_pieces(&self) -> usize {
        self.e_vals.len()
    }

    pub fn pieces(&self) -> Pieces {
        Pieces {
            breaks: self.breaks.clone(),
            channels: vec![self.e_vals.clone(), self.nu_vals.clone()],
        }
    }

    pub fn lengths(&self) -> Vec<f64> {
        self.pieces().lengths()
    }

    pub fn to_continuous(&self, grid: SpaceGrid) -> ContinuousMaterialKV {
        let p = self.pieces();
        ContinuousMaterialKV {
            e: p.sample(0, grid),
            nu: p.sample(1, grid),
        }
    }

    /// Periodic total variation of `(E, nu)` over the torus.
    pub fn total_variation(&self) -> (f64, f64) {
        (total_variation(&self.e_vals, true), total_variation(&self.nu_vals, true))
    }
}

/// Kelvin–Voigt material given by nodal fields on a shared grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousMaterialKV {
    pub e: SampledField,
    pub nu: SampledField,
}

impl ContinuousMaterialKV {
    pub fn new(e: SampledField, nu: SampledField) -> Result<Self> {
        if e.grid() != nu.grid() {
            return Err(Error::Shape("E and nu must share a grid".into()));
        }
        if e.min() <= 0.0 || nu.min() <= 0.0 {
            return Err(Error::InvalidInput("stiffness and viscosity must be positive".into()));
        }
        Ok(Self { e, nu })
    }

    pub fn grid(&self) -> SpaceGrid {
        self.e.grid()
    }

    pub fn resample(&self, grid: SpaceGrid) -> Self {
        Self {
            e: self.e.resample(grid),
            nu: self.nu.resample(grid),
        }
    }
}

/// Either representation of a Kelvin–Voigt microstructure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "repr", rename_all = "snake_case")]
pub enum KvMaterial {
    Piecewise(PiecewiseMaterialKV),
    Continuous(ContinuousMaterialKV),
}

impl KvMaterial {
    /// Per-element `(E, nu)` on a solver grid: exact averages for layered
    /// materials, midpoint values for grid fields.
    pub fn element_values(&self, grid: SpaceGrid) -> (Vec<f64>, Vec<f64>) {
        match self {
            KvMaterial::Piecewise(m) => {
                let p = m.pieces();
                (p.element_averages(0, grid), p.element_averages(1, grid))
            }
            KvMaterial::Continuous(m) => {
                let mids = grid.midpoints();
                (
                    mids.iter().map(|&y| m.e.eval(y)).collect(),
                    mids.iter().map(|&y| m.nu.eval(y)).collect(),
                )
            }
        }
    }

    /// Nodal `(E, nu)` fields on `grid`, as consumed by the neural operator.
    pub fn fields(&self, grid: SpaceGrid) -> (SampledField, SampledField) {
        match self {
            KvMaterial::Piecewise(m) => {
                let c = m.to_continuous(grid);
                (c.e, c.nu)
            }
            KvMaterial::Continuous(m) => (m.e.resample(grid), m.nu.resample(grid)),
        }
    }
}

impl From<PiecewiseMaterialKV> for KvMaterial {
    fn from(m: PiecewiseMaterialKV) -> Self {
        KvMaterial::Piecewise(m)
    }
}

impl From<ContinuousMaterialKV> for KvMaterial {
    fn from(m: ContinuousMaterialKV) -> Self {
        KvMaterial::Continuous(m)
    }
}

/// Index of each elasto-viscoplastic parameter within channel lists.
pub const EVP_E: usize = 0;
pub const EVP_EPS_P0: usize = 1;
pub const EVP_SIGMA_Y: usize = 2;
pub const EVP_N: usize = 3;

/// Sampling boxes for `(E, eps_p0, sigma_Y, n)`.
pub const EVP_BOXES: [(f64, f64); 4] = [(1.0, 10.0), (0.5, 2.0), (0.1, 1.0), (1.0, 20.0)];

/// Elasto-viscoplastic microstructure: stiffness, rate constant, yield
/// stress and rate exponent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "repr", rename_all = "snake_case")]
pub enum MaterialEVP {
    Piecewise(Pieces),
    Continuous { fields: Vec<SampledField> },
}

/// Per-element EVP parameters on a solver grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EvpElementValues {
    pub e: Vec<f64>,
    pub eps_p0: Vec<f64>,
    pub sigma_y: Vec<f64>,
    pub n_exp: Vec<f64>,
}

impl MaterialEVP {
    pub fn homogeneous(e: f64, eps_p0: f64, sigma_y: f64, n_exp: f64) -> Self {
        MaterialEVP::Piecewise(Pieces {
            breaks: Vec::new(),
            channels: vec![vec![e], vec![eps_p0], vec![sigma_y], vec![n_exp]],
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = match self {
            MaterialEVP::Piecewise(p) => {
                if p.channels.len() != 4 {
                    return Err(Error::Shape("EVP material needs four channels".into()));
                }
                p.channels.iter().flatten().all(|&v| v > 0.0)
            }
            MaterialEVP::Continuous { fields } => {
                if fields.len() != 4 {
                    return Err(Error::Shape("EVP material needs four channels".into()));
                }
                fields.iter().all(|f| f.min() > 0.0)
            }
        };
        if positive {
            Ok(())
        } else {
            Err(Error::InvalidInput("EVP parameters must be strictly positive".into()))
        }
    }

    pub fn element_values(&self, grid: SpaceGrid) -> EvpElementValues {
        let chan = |c: usize| -> Vec<f64> {
            match self {
                MaterialEVP::Piecewise(p) => p.element_averages(c, grid),
                MaterialEVP::Continuous { fields } => grid.midpoints().iter().map(|&y| fields[c].eval(y)).collect(),
            }
        };
        EvpElementValues {
            e: chan(EVP_E),
            eps_p0: chan(EVP_EPS_P0),
            sigma_y: chan(EVP_SIGMA_Y),
            n_exp: chan(EVP_N),
        }
    }

    /// Nodal fields of all four channels on `grid`.
    pub fn fields(&self, grid: SpaceGrid) -> Vec<SampledField> {
        match self {
            MaterialEVP::Piecewise(p) => (0..4).map(|c| p.sample(c, grid)).collect(),
            MaterialEVP::Continuous { fields } => fields.iter().map(|f| f.resample(grid)).collect(),
        }
    }
}

/// Averaged strain history with its exact time derivative on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrainProgram {
    pub grid: TimeGrid,
    pub eps: Vec<f64>,
    pub deps: Vec<f64>,
}

impl StrainProgram {
    pub fn new(grid: TimeGrid, eps: Vec<f64>, deps: Vec<f64>) -> Result<Self> {
        if eps.len() != grid.n_steps() || deps.len() != grid.n_steps() {
            return Err(Error::Shape(format!(
                "strain arrays ({}, {}) do not match a {}-node time grid",
                eps.len(),
                deps.len(),
                grid.n_steps()
            )));
        }
        if eps.iter().chain(&deps).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("strain program has non-finite values".into()));
        }
        Ok(Self { grid, eps, deps })
    }

    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Result<Self> {
        let t = grid.nodes();
        Self::new(grid, t.iter().map(|&s| f(s)).collect(), t.iter().map(|&s| df(s)).collect())
    }

    /// `eps(t) = t`.
    pub fn ramp(grid: TimeGrid) -> Self {
        Self::from_fn(grid, |t| t, |_| 1.0).expect("finite ramp")
    }

    pub fn zero(grid: TimeGrid) -> Self {
        Self::from_fn(grid, |_| 0.0, |_| 0.0).expect("finite zero")
    }

    pub fn from_pchip(p: &Pchip, grid: TimeGrid) -> Self {
        Self::from_fn(grid, |t| p.eval(t), |t| p.derivative(t)).expect("finite interpolant")
    }

    pub fn len(&self) -> usize {
        self.eps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eps.is_empty()
    }

    /// Cubic Hermite reconstruction between nodes from values and rates.
    ///
    /// Exact whenever a time step lies inside one cubic segment of the
    /// generating interpolant.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        let n = self.eps.len();
        let h = self.grid.dt();
        let s = t.clamp(0.0, 1.0) / h;
        let k = (s.floor() as usize).min(n - 2);
        let u = s - k as f64;
        if u == 0.0 {
            return (self.eps[k], self.deps[k]);
        }
        let (y0, y1, m0, m1) = (self.eps[k], self.eps[k + 1], self.deps[k], self.deps[k + 1]);
        let u2 = u * u;
        let u3 = u2 * u;
        let val = (2.0 * u3 - 3.0 * u2 + 1.0) * y0
            + h * (u3 - 2.0 * u2 + u) * m0
            + (-2.0 * u3 + 3.0 * u2) * y1
            + h * (u3 - u2) * m1;
        let der = (6.0 * u2 - 6.0 * u) * (y0 - y1) / h + (3.0 * u2 - 4.0 * u + 1.0) * m0 + (3.0 * u2 - 2.0 * u) * m1;
        (val, der)
    }

    /// Linear interpolation of both strain and rate onto another grid.
    pub fn resample_linear(&self, grid: TimeGrid) -> Self {
        Self {
            grid,
            eps: crate::fields::resample_linear(&self.eps, grid.n_steps()),
            deps: crate::fields::resample_linear(&self.deps, grid.n_steps()),
        }
    }

    /// Program multiplied by a constant.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            grid: self.grid,
            eps: self.eps.iter().map(|v| v * factor).collect(),
            deps: self.deps.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn combine(&self, a: f64, other: &StrainProgram, b: f64) -> Result<Self> {
        if self.grid != other.grid {
            return Err(Error::Shape("strain programs live on different grids".into()));
        }
        Self::new(
            self.grid,
            self.eps.iter().zip(&other.eps).map(|(x, y)| a * x + b * y).collect(),
            self.deps.iter().zip(&other.deps).map(|(x, y)| a * x + b * y).collect(),
        )
    }
}

/// Knots and signs of a sampled strain program, kept for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct StrainKnots {
    pub t: Vec<f64>,
    pub v: Vec<f64>,
    pub signs: Vec<f64>,
}

fn hmc_transform(x: f64) -> f64 {
    0.45 * (libm::erf(x) + 1.0) + 0.1
}

fn draw_breaks<R: Rng + ?Sized>(rng: &mut R) -> Vec<f64> {
    let n_pieces: u32 = rng.random_range(5..=20);
    let mut ks: Vec<u32> = (0..n_pieces - 1).map(|_| rng.random_range(0..=BREAK_DENOM)).collect();
    ks.sort_unstable();
    ks.dedup();
    ks.into_iter()
        .filter(|&k| k > 0 && k < BREAK_DENOM)
        .map(|k| k as f64 / BREAK_DENOM as f64)
        .collect()
}

/// Random layered Kelvin–Voigt material.
pub fn sample_pc_kv(seed: u64) -> PiecewiseMaterialKV {
    let mut rng = seeded_rng(seed, STREAM_MATERIAL);
    let breaks = draw_breaks(&mut rng);
    let n = breaks.len() + 1;
    let mut e_vals = Vec::with_capacity(n);
    let mut nu_vals = Vec::with_capacity(n);
    for _ in 0..n {
        e_vals.push(rng.random_range(0.1..=1.0));
        nu_vals.push(rng.random_range(0.1..=1.0));
    }
    PiecewiseMaterialKV { breaks, e_vals, nu_vals }
}

/// Two-piece periodic mean shift smoothed by a Gaussian of width `std`.
///
/// The convolution of a piecewise constant with a Gaussian is evaluated in
/// closed form through the error function, summing the neighbouring periodic
/// images.
fn smoothed_two_piece(grid: SpaceGrid, brk: f64, left: f64, right: f64, std: f64) -> SampledField {
    let cdf = |x: f64| 0.5 * (1.0 + libm::erf(x / (std * std::f64::consts::SQRT_2)));
    // Probability that y - Z (mod 1) lands in [a, b).
    let mass = |y: f64, a: f64, b: f64| -> f64 { (-2..=2).map(|j| cdf(y - a + j as f64) - cdf(y - b + j as f64)).sum() };
    let mut values: Vec<f64> = grid
        .nodes()
        .into_iter()
        .map(|y| left * mass(y, 0.0, brk) + right * mass(y, brk, 1.0))
        .collect();
    let last = values.len() - 1;
    values[last] = values[0];
    SampledField::new(grid, values).expect("finite smoothed field")
}

fn draw_log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo.ln()..=hi.ln()).exp()
}

/// Random high-memory continuous Kelvin–Voigt material on `grid`.
pub fn sample_hmc_kv(seed: u64, grid: SpaceGrid) -> Result<ContinuousMaterialKV> {
    let mut rng = seeded_rng(seed, STREAM_MATERIAL);
    let brk: f64 = rng.random_range(0.25..=0.75);
    let cov_std = 0.06f64.sqrt();
    let draw_piece = |rng: &mut rand_chacha::ChaCha8Rng| -> [f64; 2] {
        let center = if rng.random_bool(0.5) { [-1.0, 1.0] } else { [1.0, -1.0] };
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        [center[0] + cov_std * z0, center[1] + cov_std * z1]
    };
    let left = draw_piece(&mut rng);
    let right = draw_piece(&mut rng);
    let mut comps = Vec::with_capacity(2);
    for c in 0..2 {
        let m = smoothed_two_piece(grid, brk, left[c], right[c], SMOOTHING_STD);
        let rho = draw_log_uniform(&mut rng, 0.01, 0.3);
        let sigma = rng.random_range(0.1..=0.3);
        let g = sample_grf_with(&GrfSpec::new(rho, sigma), grid, &mut rng)?;
        let values = m.values().iter().zip(g.values()).map(|(a, b)| hmc_transform(a + b)).collect();
        comps.push(SampledField::new(grid, values)?);
    }
    let nu = comps.pop().expect("two components");
    let e = comps.pop().expect("two components");
    ContinuousMaterialKV::new(e, nu)
}

/// Random averaged strain program on `grid`, with its knots.
pub fn sample_strain_with_knots(seed: u64, grid: TimeGrid) -> (StrainProgram, StrainKnots) {
    let mut rng = seeded_rng(seed, STREAM_STRAIN);
    let n: usize = rng.random_range(3..=21);
    let t = loop {
        let mut interior: Vec<f64> = (0..n - 2).map(|_| rng.random_range(0.0..1.0)).collect();
        interior.sort_by(f64::total_cmp);
        let mut t = Vec::with_capacity(n);
        t.push(0.0);
        t.extend(interior);
        t.push(1.0);
        if t.windows(2).all(|w| w[1] - w[0] >= 1e-9) {
            break t;
        }
    };
    let mut v = vec![0.0; n];
    let mut signs = vec![0.0; n];
    for k in 1..n {
        let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        signs[k] = s;
        v[k] = v[k - 1] + (0.5 - v[k - 1]) * s * (t[k] - t[k - 1]).sqrt();
    }
    let p = Pchip::new(&t, &v).expect("valid knots");
    debug_assert!(check_unit_span(&t).is_ok());
    (StrainProgram::from_pchip(&p, grid), StrainKnots { t, v, signs })
}

pub fn sample_strain(seed: u64, grid: TimeGrid) -> StrainProgram {
    sample_strain_with_knots(seed, grid).0
}

/// Which EVP microstructure family to sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvpKind {
    Piecewise,
    Continuous,
}

/// Random elasto-viscoplastic material.
pub fn sample_evp(seed: u64, kind: EvpKind, grid: SpaceGrid) -> MaterialEVP {
    let mut rng = seeded_rng(seed, STREAM_MATERIAL);
    match kind {
        EvpKind::Piecewise => {
            let breaks = draw_breaks(&mut rng);
            let n = breaks.len() + 1;
            let mut channels = vec![Vec::with_capacity(n); 4];
            for _ in 0..n {
                for (c, (lo, hi)) in EVP_BOXES.iter().enumerate() {
                    channels[c].push(rng.random_range(*lo..=*hi));
                }
            }
            MaterialEVP::Piecewise(Pieces { breaks, channels })
        }
        EvpKind::Continuous => {
            let brk: f64 = rng.random_range(0.25..=0.75);
            let fields = EVP_BOXES
                .iter()
                .map(|(lo, hi)| {
                    let left = rng.random_range(*lo..=*hi);
                    let right = rng.random_range(*lo..=*hi);
                    smoothed_two_piece(grid, brk, left, right, SMOOTHING_STD)
                })
                .collect();
            MaterialEVP::Continuous { fields }
        }
    }
}

/// Exact integral of the piecewise-linear interpolant of `values` over `[a, b]`.
pub fn integrate_linear(values: &[f64], a: f64, b: f64) -> f64 {
    let n = values.len();
    let cells = (n - 1) as f64;
    let h = 1.0 / cells;
    let at = |y: f64| crate::fields::interp_uniform(values, y);
    let first = ((a * cells).floor() as usize).min(n - 2);
    let last = ((b * cells).ceil() as usize).clamp(1, n - 1);
    let mut acc = 0.0;
    for i in first..last {
        let lo = (i as f64 * h).max(a);
        let hi = ((i + 1) as f64 * h).min(b);
        if hi > lo {
            acc += 0.5 * (hi - lo) * (at(lo) + at(hi));
        }
    }
    acc
}

/// Cell averages of `field` over `n_pieces` equal-width cells.
pub fn pc_discretize_field(field: &SampledField, n_pieces: usize) -> Vec<f64> {
    let m = n_pieces as f64;
    (0..n_pieces)
        .map(|i| {
            let a = i as f64 / m;
            let b = if i + 1 == n_pieces { 1.0 } else { (i + 1) as f64 / m };
            integrate_linear(field.values(), a, b) / (b - a)
        })
        .collect()
}

/// Equal-width piecewise-constant approximation by cell averages.
pub fn pc_discretize(mat: &ContinuousMaterialKV, n_pieces: usize) -> Result<PiecewiseMaterialKV> {
    if n_pieces == 0 {
        return Err(Error::InvalidInput("need at least one piece".into()));
    }
    let breaks = (1..n_pieces).map(|i| i as f64 / n_pieces as f64).collect();
    PiecewiseMaterialKV::new(breaks, pc_discretize_field(&mat.e, n_pieces), pc_discretize_field(&mat.nu, n_pieces))
}

/// Sum of absolute successive differences, with the wrap-around jump when
/// `periodic`.
pub fn total_variation(values: &[f64], periodic: bool) -> f64 {
    let inner: f64 = values.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    match (periodic, values.first(), values.last()) {
        (true, Some(a), Some(b)) => inner + (a - b).abs(),
        _ => inner,
    }
}

/// Exact `L1` distance between the piecewise-linear interpolant of `values`
/// and the equal-width piecewise constant `pc`.
pub fn l1_distance_to_pc(values: &[f64], pc: &[f64]) -> f64 {
    let n = values.len();
    let cells = (n - 1) as f64;
    let m = pc.len() as f64;
    // Merge both partitions.
    let mut cuts: Vec<f64> = (0..n).map(|i| i as f64 / cells).collect();
    cuts.extend((1..pc.len()).map(|i| i as f64 / m));
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut acc = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let mid = 0.5 * (a + b);
        let c = pc[((mid * m) as usize).min(pc.len() - 1)];
        let fa = crate::fields::interp_uniform(values, a) - c;
        let fb = crate::fields::interp_uniform(values, b) - c;
        acc += abs_linear_integral(fa, fb) * (b - a);
    }
    acc
}

/// Mean of `|fa + (fb - fa) s|` over `s` in `[0, 1]`.
fn abs_linear_integral(fa: f64, fb: f64) -> f64 {
    if fa * fb >= 0.0 {
        0.5 * (fa.abs() + fb.abs())
    } else {
        0.5 * (fa * fa + fb * fb) / (fa.abs() + fb.abs())
    }
}
