//! Recurrent neural operator: an internal state advanced by forward Euler
//! with two Fourier Neural Mappings, trained with backpropagation through
//! time.
//!
//! ```text
//! xi_{k+1} = xi_k + dt G(eps_k, xi_k; M)
//! sigma_k  = F(eps_k, deps_k, xi_k; M)      (Kelvin–Voigt)
//! sigma_k  = F(eps_k, xi_k; M)              (elasto-viscoplastic)
//! ```

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{seeded_rng, trapezoid_weights};
use crate::fnm::{fnm_backward, fnm_forward, fnm_init, fnm_lift, FnmConfig, FnmInput, FnmParams, Lifted, Tape};
use crate::materials::StrainProgram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Kv,
    Evp,
}

impl Variant {
    pub fn material_channels(self) -> usize {
        match self {
            Variant::Kv => 2,
            Variant::Evp => 4,
        }
    }

    /// Whether the read-out sees the strain rate.
    fn uses_rate(self) -> bool {
        matches!(self, Variant::Kv)
    }
}

/// Shared size parameters of both networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RnoArch {
    pub width: usize,
    pub n_layers: usize,
    pub n_modes: usize,
    pub d_proj_fv: usize,
}

impl RnoArch {
    pub fn full_scale(variant: Variant) -> Self {
        Self {
            width: 32,
            n_layers: 3,
            n_modes: match variant {
                Variant::Kv => 4,
                Variant::Evp => 2,
            },
            d_proj_fv: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnoModel {
    pub variant: Variant,
    pub n_state: usize,
    pub f: FnmParams,
    pub g: FnmParams,
}

impl RnoModel {
    pub fn configs(variant: Variant, n_state: usize, arch: RnoArch) -> (FnmConfig, FnmConfig) {
        let d_f = variant.material_channels();
        let base = |d_in_v: usize, d_out_v: usize| FnmConfig {
            d_in_f: d_f,
            d_in_v,
            d_out_v,
            width: arch.width,
            n_layers: arch.n_layers,
            n_modes: arch.n_modes,
            d_proj_fv: arch.d_proj_fv,
        };
        let f_in = if variant.uses_rate() { 2 + n_state } else { 1 + n_state };
        (base(f_in, 1), base(1 + n_state, n_state))
    }

    pub fn init(variant: Variant, n_state: usize, arch: RnoArch, seed: u64) -> Result<Self> {
        if n_state == 0 {
            return Err(Error::Config("internal state dimension must be positive".into()));
        }
        let (fc, gc) = Self::configs(variant, n_state, arch);
        Ok(Self {
            variant,
            n_state,
            f: fnm_init(fc, seed.wrapping_mul(2))?,
            g: fnm_init(gc, seed.wrapping_mul(2).wrapping_add(1))?,
        })
    }

    pub fn arch(&self) -> RnoArch {
        let c = self.f.config;
        RnoArch {
            width: c.width,
            n_layers: c.n_layers,
            n_modes: c.n_modes,
            d_proj_fv: c.d_proj_fv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (fc, gc) = Self::configs(self.variant, self.n_state, self.arch());
        if self.f.config != fc || self.g.config != gc {
            return Err(Error::Shape("network sizes do not match the model variant and state size".into()));
        }
        Ok(())
    }

    fn f_in(&self) -> usize {
        self.f.config.d_in_v
    }

    fn write_f_input(&self, eps: f64, deps: f64, xi: &[f64], dst: &mut [f64]) {
        dst[0] = eps;
        let off = if self.variant.uses_rate() {
            dst[1] = deps;
            2
        } else {
            1
        };
        dst[off..off + self.n_state].copy_from_slice(xi);
    }

    fn xi_offset_f(&self) -> usize {
        if self.variant.uses_rate() {
            2
        } else {
            1
        }
    }
}

/// Material function inputs prepared for both networks.
pub struct MaterialBatch {
    f_input: FnmInput,
    g_input: FnmInput,
}

impl MaterialBatch {
    /// `channels[b][c]` are nodal material fields of sample `b`.
    pub fn new(model: &RnoModel, channels: &[Vec<&[f64]>]) -> Result<Self> {
        for (b, ch) in channels.iter().enumerate() {
            if ch.len() != model.variant.material_channels() {
                return Err(Error::Shape(format!(
                    "sample {b} has {} material channels, model expects {}",
                    ch.len(),
                    model.variant.material_channels()
                )));
            }
        }
        Ok(Self {
            f_input: FnmInput::new(channels, model.f.config.n_modes)?,
            g_input: FnmInput::new(channels, model.g.config.n_modes)?,
        })
    }

    pub fn n_batch(&self) -> usize {
        self.f_input.n_batch()
    }
}

struct Lifts {
    f: Lifted,
    g: Lifted,
}

fn lift_both(model: &RnoModel, mats: &MaterialBatch) -> Result<Lifts> {
    Ok(Lifts {
        f: fnm_lift(&model.f, &mats.f_input)?,
        g: fnm_lift(&model.g, &mats.g_input)?,
    })
}

/// Strain histories of a batch on a shared uniform time step.
#[derive(Debug, Clone, Copy)]
pub struct StrainBatch<'a> {
    pub eps: &'a [&'a [f64]],
    pub deps: &'a [&'a [f64]],
    pub dt: f64,
}

impl StrainBatch<'_> {
    fn n_steps(&self) -> Result<usize> {
        let nt = self.eps.first().map(|e| e.len()).unwrap_or(0);
        if nt == 0 || self.eps.iter().chain(self.deps.iter()).any(|e| e.len() != nt) || self.eps.len() != self.deps.len() {
            return Err(Error::Shape("strain histories must be non-empty and of equal length".into()));
        }
        Ok(nt)
    }
}

/// Batched rollout output: `sigma[b][k]`, `xi[b][k * L + l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRollout {
    pub sigma: Vec<Vec<f64>>,
    pub xi: Vec<Vec<f64>>,
}

fn forward_pass(model: &RnoModel, mats: &MaterialBatch, lifts: &Lifts, strain: StrainBatch) -> Result<BatchRollout> {
    let nb = mats.n_batch();
    let nt = strain.n_steps()?;
    if strain.eps.len() != nb {
        return Err(Error::Shape(format!("{} strains for {nb} materials", strain.eps.len())));
    }
    let ls = model.n_state;
    let fin = model.f_in();
    let gin = 1 + ls;
    let mut sigma = vec![vec![0.0; nt]; nb];
    let mut xi = vec![vec![0.0; nt * ls]; nb];
    let mut vf = vec![0.0; nb * fin];
    let mut vg = vec![0.0; nb * gin];
    for k in 0..nt {
        for b in 0..nb {
            let x = &xi[b][k * ls..(k + 1) * ls];
            model.write_f_input(strain.eps[b][k], strain.deps[b][k], x, &mut vf[b * fin..(b + 1) * fin]);
        }
        let (s, _) = fnm_forward(&model.f, &mats.f_input, &lifts.f, &vf)?;
        for b in 0..nb {
            if !s[b].is_finite() {
                return Err(Error::Numerical(format!("non-finite stress at step {k} of sample {b}")));
            }
            sigma[b][k] = s[b];
        }
        if k + 1 == nt {
            break;
        }
        for b in 0..nb {
            vg[b * gin] = strain.eps[b][k];
            vg[b * gin + 1..(b + 1) * gin].copy_from_slice(&xi[b][k * ls..(k + 1) * ls]);
        }
        let (gout, _) = fnm_forward(&model.g, &mats.g_input, &lifts.g, &vg)?;
        for b in 0..nb {
            let row = &mut xi[b];
            for l in 0..ls {
                let next = row[k * ls + l] + strain.dt * gout[b * ls + l];
                if !next.is_finite() {
                    return Err(Error::Numerical(format!("non-finite internal state at step {} of sample {b}", k + 1)));
                }
                row[(k + 1) * ls + l] = next;
            }
        }
    }
    Ok(BatchRollout { sigma, xi })
}

/// Roll the model out on a batch.
pub fn rollout_batch(model: &RnoModel, mats: &MaterialBatch, strain: StrainBatch) -> Result<BatchRollout> {
    let lifts = lift_both(model, mats)?;
    forward_pass(model, mats, &lifts, strain)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub sigma_pred: Vec<f64>,
    /// `xi[l][k]`.
    pub xi: Vec<Vec<f64>>,
}

/// Roll the model out for one material and strain program.
pub fn rollout(model: &RnoModel, channels: &[&[f64]], strain: &StrainProgram) -> Result<RolloutResult> {
    let mats = MaterialBatch::new(model, &[channels.to_vec()])?;
    let r = rollout_batch(
        model,
        &mats,
        StrainBatch {
            eps: &[&strain.eps],
            deps: &[&strain.deps],
            dt: strain.grid.dt(),
        },
    )?;
    let ls = model.n_state;
    let nt = strain.len();
    let xi_flat = &r.xi[0];
    let xi = (0..ls).map(|l| (0..nt).map(|k| xi_flat[k * ls + l]).collect()).collect();
    Ok(RolloutResult {
        sigma_pred: r.sigma.into_iter().next().expect("one sample"),
        xi,
    })
}

/// `G(0, 0; M)` for every sample of a batch, `B x L`.
pub fn state_rate_at_rest(model: &RnoModel, mats: &MaterialBatch) -> Result<Vec<f64>> {
    let lifted = fnm_lift(&model.g, &mats.g_input)?;
    let zeros = vec![0.0; mats.n_batch() * (1 + model.n_state)];
    Ok(fnm_forward(&model.g, &mats.g_input, &lifted, &zeros)?.0)
}

/// One material evaluated at many points at once, with the function part
/// of both lifts cached.
pub struct PointEvaluator<'a> {
    model: &'a RnoModel,
    mats: MaterialBatch,
    lifts: Lifts,
}

impl<'a> PointEvaluator<'a> {
    pub fn new(model: &'a RnoModel, channels: &[&[f64]], n_points: usize) -> Result<Self> {
        let all = vec![channels.to_vec(); n_points];
        let mats = MaterialBatch::new(model, &all)?;
        let lifts = lift_both(model, &mats)?;
        Ok(Self { model, mats, lifts })
    }

    pub fn n_points(&self) -> usize {
        self.mats.n_batch()
    }

    /// Stress at every point; `xi` is `n_points x L`.
    pub fn stress(&self, eps: &[f64], deps: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        let m = self.model;
        let (n, fin, ls) = (self.n_points(), m.f_in(), m.n_state);
        if eps.len() != n || deps.len() != n || xi.len() != n * ls {
            return Err(Error::Shape("point evaluation inputs do not match the number of points".into()));
        }
        let mut v = vec![0.0; n * fin];
        for i in 0..n {
            m.write_f_input(eps[i], deps[i], &xi[i * ls..(i + 1) * ls], &mut v[i * fin..(i + 1) * fin]);
        }
        Ok(fnm_forward(&m.f, &self.mats.f_input, &self.lifts.f, &v)?.0)
    }

    /// State rate at every point, `n_points x L`.
    pub fn state_rate(&self, eps: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        let m = self.model;
        let (n, ls) = (self.n_points(), m.n_state);
        if eps.len() != n || xi.len() != n * ls {
            return Err(Error::Shape("point evaluation inputs do not match the number of points".into()));
        }
        let mut v = vec![0.0; n * (1 + ls)];
        for i in 0..n {
            v[i * (1 + ls)] = eps[i];
            v[i * (1 + ls) + 1..(i + 1) * (1 + ls)].copy_from_slice(&xi[i * ls..(i + 1) * ls]);
        }
        Ok(fnm_forward(&m.g, &self.mats.g_input, &self.lifts.g, &v)?.0)
    }
}

/// Squared relative error with trapezoidal quadrature; the denominator is
/// floored at `1e-12`.
pub fn relative_error_sq(pred: &[f64], truth: &[f64]) -> f64 {
    let w = trapezoid_weights(truth.len());
    let num: f64 = pred.iter().zip(truth).zip(&w).map(|((p, t), w)| w * (p - t) * (p - t)).sum();
    let den: f64 = truth.iter().zip(&w).map(|(t, w)| w * t * t).sum();
    num / den.max(1e-12)
}

/// Gradients for both networks, flat.
#[derive(Debug, Clone, PartialEq)]
pub struct RnoGrads {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

impl RnoGrads {
    fn zeros(model: &RnoModel) -> Self {
        Self {
            f: vec![0.0; model.f.data.len()],
            g: vec![0.0; model.g.data.len()],
        }
    }
}

/// Loss value with the parts it is made of.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    /// Mean squared relative error.
    pub data: f64,
    /// Mean of `|G(0, 0; M)|^2`.
    pub penalty: f64,
}

/// Training sample: material channels, strain program and target stress.
#[derive(Debug, Clone, PartialEq)]
pub struct RnoSample {
    pub channels: Vec<Vec<f64>>,
    pub strain: StrainProgram,
    pub stress: Vec<f64>,
}

/// Mean over the batch of squared relative error plus (optionally) the
/// rest-state penalty, and its gradient.
pub fn loss_and_grad(model: &RnoModel, batch: &[&RnoSample], penalty: bool) -> Result<(LossParts, RnoGrads)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let nb = batch.len();
    let channels: Vec<Vec<&[f64]>> = batch.iter().map(|s| s.channels.iter().map(|c| c.as_slice()).collect()).collect();
    let mats = MaterialBatch::new(model, &channels)?;
    let eps: Vec<&[f64]> = batch.iter().map(|s| s.strain.eps.as_slice()).collect();
    let deps: Vec<&[f64]> = batch.iter().map(|s| s.strain.deps.as_slice()).collect();
    let dt = batch[0].strain.grid.dt();
    if batch.iter().any(|s| s.strain.grid != batch[0].strain.grid || s.stress.len() != s.strain.len()) {
        return Err(Error::Shape("batch samples must share one time grid".into()));
    }
    let strain = StrainBatch { eps: &eps, deps: &deps, dt };
    let lifts = lift_both(model, &mats)?;
    let roll = forward_pass(model, &mats, &lifts, strain)?;
    let nt = eps[0].len();
    let ls = model.n_state;
    let fin = model.f_in();
    let gin = 1 + ls;

    // Data term and its gradient with respect to each predicted stress.
    let w = trapezoid_weights(nt);
    let mut data = 0.0;
    let mut dsigma = vec![vec![0.0; nt]; nb];
    for b in 0..nb {
        let truth = &batch[b].stress;
        let den: f64 = truth.iter().zip(&w).map(|(t, w)| w * t * t).sum();
        if den < 1e-12 {
            log::warn!("sample with near-zero reference stress; relative error denominator floored");
        }
        let den = den.max(1e-12);
        let pred = &roll.sigma[b];
        let num: f64 = pred.iter().zip(truth).zip(&w).map(|((p, t), w)| w * (p - t) * (p - t)).sum();
        data += num / den;
        for k in 0..nt {
            dsigma[b][k] = 2.0 * w[k] * (pred[k] - truth[k]) / (den * nb as f64);
        }
    }
    data /= nb as f64;

    let mut grads = RnoGrads::zeros(model);
    let mut pen = 0.0;
    if penalty {
        let zeros = vec![0.0; nb * gin];
        let (g0, tape) = fnm_forward(&model.g, &mats.g_input, &lifts.g, &zeros)?;
        pen = g0.iter().map(|v| v * v).sum::<f64>() / nb as f64;
        let dg0: Vec<f64> = g0.iter().map(|v| 2.0 * v / nb as f64).collect();
        fnm_backward(&model.g, &mats.g_input, &tape, &dg0, &mut grads.g)?;
    }

    // Reverse sweep; tapes are recomputed step by step from the stored states.
    let mut lam = vec![0.0; nb * ls];
    let mut vf = vec![0.0; nb * fin];
    let mut vg = vec![0.0; nb * gin];
    let mut dout = vec![0.0; nb];
    let mut dg = vec![0.0; nb * ls];
    for k in (0..nt).rev() {
        let mut next_lam = lam.clone();
        if k + 1 < nt {
            for b in 0..nb {
                vg[b * gin] = eps[b][k];
                vg[b * gin + 1..(b + 1) * gin].copy_from_slice(&roll.xi[b][k * ls..(k + 1) * ls]);
            }
            let (_, tape): (Vec<f64>, Tape) = fnm_forward(&model.g, &mats.g_input, &lifts.g, &vg)?;
            for (d, l) in dg.iter_mut().zip(&lam) {
                *d = dt * l;
            }
            let dvg = fnm_backward(&model.g, &mats.g_input, &tape, &dg, &mut grads.g)?;
            for b in 0..nb {
                for l in 0..ls {
                    next_lam[b * ls + l] += dvg[b * gin + 1 + l];
                }
            }
        }
        for b in 0..nb {
            model.write_f_input(eps[b][k], deps[b][k], &roll.xi[b][k * ls..(k + 1) * ls], &mut vf[b * fin..(b + 1) * fin]);
            dout[b] = dsigma[b][k];
        }
        let (_, tape) = fnm_forward(&model.f, &mats.f_input, &lifts.f, &vf)?;
        let dvf = fnm_backward(&model.f, &mats.f_input, &tape, &dout, &mut grads.f)?;
        let off = model.xi_offset_f();
        for b in 0..nb {
            for l in 0..ls {
                next_lam[b * ls + l] += dvf[b * fin + off + l];
            }
        }
        lam = next_lam;
    }

    let total = data + pen;
    Ok((LossParts { total, data, penalty: pen }, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_final: f64,
    pub batch: usize,
    pub epochs: usize,
    pub penalty: bool,
    pub seed: u64,
    /// One sample in `val_every` is held out for validation.
    pub val_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl TrainConfig {
    pub fn full_scale(variant: Variant) -> Self {
        Self {
            lr0: 1e-3,
            lr_final: 1e-5,
            batch: 32,
            epochs: 500,
            penalty: matches!(variant, Variant::Kv),
            seed: 0,
            val_every: 16,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !(self.lr_final > 0.0) || self.lr_final > self.lr0 {
            return Err(Error::Config("need 0 < lr_final <= lr0".into()));
        }
        if self.batch == 0 || self.epochs == 0 || self.val_every < 2 {
            return Err(Error::Config("batch and epochs must be positive and val_every at least 2".into()));
        }
        Ok(())
    }

    /// Cosine-annealed learning rate at epoch `e`.
    pub fn lr(&self, e: usize) -> f64 {
        let x = std::f64::consts::PI * e as f64 / self.epochs as f64;
        self.lr_final + 0.5 * (self.lr0 - self.lr_final) * (1.0 + x.cos())
    }
}

/// Adam moments for both networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m_f: Vec<f64>,
    pub v_f: Vec<f64>,
    pub m_g: Vec<f64>,
    pub v_g: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(model: &RnoModel) -> Self {
        Self {
            m_f: vec![0.0; model.f.data.len()],
            v_f: vec![0.0; model.f.data.len()],
            m_g: vec![0.0; model.g.data.len()],
            v_g: vec![0.0; model.g.data.len()],
            step: 0,
        }
    }

    pub fn update(&mut self, model: &mut RnoModel, grads: &RnoGrads, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.adam_beta1.powi(t);
        let c2 = 1.0 - cfg.adam_beta2.powi(t);
        let apply = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g[i];
                v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
            }
        };
        apply(&mut model.f.data, &grads.f, &mut self.m_f, &mut self.v_f);
        apply(&mut model.g.data, &grads.g, &mut self.m_g, &mut self.v_g);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_rel_l2: f64,
    /// Mean of `|G(0, 0; M)|` over the validation samples.
    pub val_rest_rate: f64,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: RnoModel,
    pub best: RnoModel,
    pub best_val: f64,
    pub adam: Adam,
    /// Next epoch to run.
    pub epoch: usize,
    pub lr_scale: f64,
    pub nan_restarts: u32,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(model: RnoModel) -> Self {
        Self {
            adam: Adam::new(&model),
            best: model.clone(),
            model,
            best_val: f64::INFINITY,
            epoch: 0,
            lr_scale: 1.0,
            nan_restarts: 0,
            history: Vec::new(),
        }
    }
}

/// Deterministic train/validation split: `(train, val)` indices.
pub fn split_indices(n: usize, val_every: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(seed, 101));
    let n_val = if n >= 2 { (n / val_every).max(1) } else { 0 };
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Mean relative error and mean rest-state rate norm of `model` on `samples`.
pub fn evaluate(model: &RnoModel, samples: &[&RnoSample], batch: usize) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut err = 0.0;
    let mut rest = 0.0;
    for chunk in samples.chunks(batch.max(1)) {
        let channels: Vec<Vec<&[f64]>> = chunk.iter().map(|s| s.channels.iter().map(|c| c.as_slice()).collect()).collect();
        let mats = MaterialBatch::new(model, &channels)?;
        let eps: Vec<&[f64]> = chunk.iter().map(|s| s.strain.eps.as_slice()).collect();
        let deps: Vec<&[f64]> = chunk.iter().map(|s| s.strain.deps.as_slice()).collect();
        let r = rollout_batch(
            model,
            &mats,
            StrainBatch {
                eps: &eps,
                deps: &deps,
                dt: chunk[0].strain.grid.dt(),
            },
        )?;
        for (b, s) in chunk.iter().enumerate() {
            err += relative_error_sq(&r.sigma[b], &s.stress).sqrt();
        }
        let g0 = state_rate_at_rest(model, &mats)?;
        for b in 0..chunk.len() {
            let ls = model.n_state;
            rest += g0[b * ls..(b + 1) * ls].iter().map(|v| v * v).sum::<f64>().sqrt();
        }
    }
    let n = samples.len() as f64;
    Ok((err / n, rest / n))
}

/// Run one epoch; returns the mean training loss, or `None` if it diverged.
fn run_epoch(state: &mut TrainState, data: &[RnoSample], train: &[usize], cfg: &TrainConfig, lr: f64) -> Result<Option<f64>> {
    let mut order = train.to_vec();
    order.shuffle(&mut seeded_rng(cfg.seed, 1000 + state.epoch as u64));
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in order.chunks(cfg.batch) {
        let batch: Vec<&RnoSample> = chunk.iter().map(|&i| &data[i]).collect();
        let (loss, grads) = match loss_and_grad(&state.model, &batch, cfg.penalty) {
            Ok(v) => v,
            Err(e) if e.is_numerical() => return Ok(None),
            Err(e) => return Err(e),
        };
        if !loss.total.is_finite() || grads.f.iter().chain(&grads.g).any(|g| !g.is_finite()) {
            return Ok(None);
        }
        state.adam.update(&mut state.model, &grads, lr, cfg);
        total += loss.total * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(Some(total / count.max(1) as f64))
}

/// Continue training from `state` until `cfg.epochs`, calling `on_epoch`
/// after every completed epoch.
pub fn train_from(
    mut state: TrainState,
    data: &[RnoSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    state.model.validate()?;
    let (train, val) = split_indices(data.len(), cfg.val_every, cfg.seed);
    if train.is_empty() {
        return Err(Error::Config("no training samples after the validation split".into()));
    }
    let val_refs: Vec<&RnoSample> = val.iter().map(|&i| &data[i]).collect();
    while state.epoch < cfg.epochs {
        let lr = cfg.lr(state.epoch) * state.lr_scale;
        let snapshot = (state.model.clone(), state.adam.clone());
        let loss = match run_epoch(&mut state, data, &train, cfg, lr)? {
            Some(l) => l,
            None => {
                state.nan_restarts += 1;
                if state.nan_restarts > 1 {
                    return Err(Error::Numerical(format!("training diverged twice, last at epoch {}", state.epoch)));
                }
                log::warn!("non-finite loss at epoch {}; halving the learning rate and restarting the epoch", state.epoch);
                state.model = snapshot.0;
                state.adam = snapshot.1;
                state.lr_scale *= 0.5;
                continue;
            }
        };
        let (val_err, rest) = evaluate(&state.model, &val_refs, cfg.batch)?;
        let score = if val_err.is_nan() { loss } else { val_err };
        if score < state.best_val {
            state.best_val = score;
            state.best = state.model.clone();
        }
        state.history.push(EpochMetrics {
            epoch: state.epoch,
            lr,
            train_loss: loss,
            val_rel_l2: val_err,
            val_rest_rate: rest,
        });
        log::info!("epoch {} lr {lr:.3e} loss {loss:.4e} val {val_err:.4e}", state.epoch);
        state.epoch += 1;
        on_epoch(&state)?;
    }
    Ok(state)
}

/// Train from scratch.
pub fn train(data: &[RnoSample], model: RnoModel, cfg: &TrainConfig) -> Result<TrainState> {
    train_from(TrainState::new(model), data, cfg, |_| Ok(()))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::fields::{SpaceGrid, TimeGrid};
    use crate::materials::{sample_pc_kv, sample_strain, KvMaterial, PiecewiseMaterialKV};
    use crate::prony::no_memory;

    const SHIFT: f64 = 100.0;

    fn small_arch() -> RnoArch {
        RnoArch {
            width: 8,
            n_layers: 2,
            n_modes: 4,
            d_proj_fv: 8,
        }
    }

    /// Read-out that returns `a * eps + b * deps` exactly and a state rate of zero.
    pub(crate) fn linear_readout(a: f64, b: f64) -> RnoModel {
        let arch = RnoArch {
            width: 4,
            n_layers: 2,
            n_modes: 4,
            d_proj_fv: 4,
        };
        let mut m = RnoModel::init(Variant::Kv, 2, arch, 0).unwrap();
        m.g.data.iter_mut().for_each(|v| *v = 0.0);
        let f = &mut m.f;
        f.data.iter_mut().for_each(|v| *v = 0.0);
        let (w, din) = (4, 4);
        for o in 0..2 {
            f.lift_v_mut()[o * din + o] = 1.0;
            f.lift_b_mut()[o] = SHIFT;
        }
        for t in 0..2 {
            for o in 0..w {
                f.layer_w_mut(t)[o * w + o] = 1.0;
            }
        }
        for o in 0..2 {
            f.f2v_re_mut()[o * w + o] = 1.0;
        }
        f.proj_w_mut()[0] = a;
        f.proj_w_mut()[1] = b;
        f.proj_b_mut()[0] = -(a + b) * SHIFT;
        m
    }

    fn kv_channels(mat: &PiecewiseMaterialKV, n: usize) -> Vec<Vec<f64>> {
        let (e, nu) = KvMaterial::from(mat.clone()).fields(SpaceGrid::new(n).unwrap());
        vec![e.into_values(), nu.into_values()]
    }

    fn kv_sample(seed: u64, nt: usize) -> RnoSample {
        let mat = sample_pc_kv(seed);
        let strain = sample_strain(seed, TimeGrid::new(nt).unwrap());
        let stress = no_memory(&KvMaterial::from(mat.clone()), &strain).unwrap();
        RnoSample {
            channels: kv_channels(&mat, 33),
            strain,
            stress,
        }
    }

    #[test]
    fn memoryless_law_is_embedded_exactly() {
        let (e, nu) = (3.5, 0.7);
        let model = linear_readout(e, nu);
        let mat = PiecewiseMaterialKV::homogeneous(e, nu).unwrap();
        let strain = sample_strain(4, TimeGrid::new(201).unwrap());
        let r = rollout(&model, &kv_channels(&mat, 33).iter().map(|c| c.as_slice()).collect::<Vec<_>>(), &strain).unwrap();
        let want = no_memory(&KvMaterial::from(mat), &strain).unwrap();
        for (p, w) in r.sigma_pred.iter().zip(&want) {
            assert!((p - w).abs() < 1e-12, "{p} vs {w}");
        }
        assert!(r.xi.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn state_starts_at_zero_and_rollout_is_causal() {
        let model = RnoModel::init(Variant::Kv, 3, small_arch(), 5).unwrap();
        let s = kv_sample(1, 101);
        let ch: Vec<&[f64]> = s.channels.iter().map(|c| c.as_slice()).collect();
        let mats = MaterialBatch::new(&model, &[ch]).unwrap();
        let dt = s.strain.grid.dt();
        let full = rollout_batch(&model, &mats, StrainBatch { eps: &[&s.strain.eps], deps: &[&s.strain.deps], dt }).unwrap();
        assert!(full.xi[0][..3].iter().all(|&x| x == 0.0));
        for cut in [1, 17, 60] {
            let part = rollout_batch(
                &model,
                &mats,
                StrainBatch {
                    eps: &[&s.strain.eps[..cut]],
                    deps: &[&s.strain.deps[..cut]],
                    dt,
                },
            )
            .unwrap();
            assert_eq!(part.sigma[0][..], full.sigma[0][..cut]);
            assert_eq!(part.xi[0][..], full.xi[0][..cut * 3]);
        }
    }

    #[test]
    fn batched_rollout_matches_single() {
        let model = RnoModel::init(Variant::Kv, 2, small_arch(), 9).unwrap();
        let a = kv_sample(2, 51);
        let b = kv_sample(3, 51);
        fn ch(s: &RnoSample) -> Vec<&[f64]> {
            s.channels.iter().map(|c| c.as_slice()).collect()
        }
        let mats = MaterialBatch::new(&model, &[ch(&a), ch(&b)]).unwrap();
        let both = rollout_batch(
            &model,
            &mats,
            StrainBatch {
                eps: &[&a.strain.eps, &b.strain.eps],
                deps: &[&a.strain.deps, &b.strain.deps],
                dt: a.strain.grid.dt(),
            },
        )
        .unwrap();
        let single = rollout(&model, &ch(&b), &b.strain).unwrap();
        for (x, y) in both.sigma[1].iter().zip(&single.sigma_pred) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn euler_error_is_first_order_in_dt() {
        let model = RnoModel::init(Variant::Kv, 2, small_arch(), 11).unwrap();
        let mat = sample_pc_kv(7);
        let ch = kv_channels(&mat, 33);
        let ch: Vec<&[f64]> = ch.iter().map(|c| c.as_slice()).collect();
        let prog = |n: usize| {
            StrainProgram::from_fn(TimeGrid::new(n).unwrap(), |t| (3.0 * t).sin(), |t| 3.0 * (3.0 * t).cos()).unwrap()
        };
        let reference = *rollout(&model, &ch, &prog(6401)).unwrap().sigma_pred.last().unwrap();
        let mut pts = Vec::new();
        for n in [51, 101, 201, 401] {
            let s = *rollout(&model, &ch, &prog(n)).unwrap().sigma_pred.last().unwrap();
            pts.push((1.0 / (n - 1) as f64, (s - reference).abs()));
        }
        let slope = crate::fit_loglog_slope(&pts);
        assert!((slope - 1.0).abs() < 0.15, "slope {slope} from {pts:?}");
    }

    fn fd_check(variant: Variant, samples: &[RnoSample], penalty: bool) {
        let model = RnoModel::init(variant, 2, small_arch(), 21).unwrap();
        let refs: Vec<&RnoSample> = samples.iter().collect();
        let (_, grads) = loss_and_grad(&model, &refs, penalty).unwrap();
        let loss = |m: &RnoModel| loss_and_grad(m, &refs, penalty).unwrap().0.total;
        let mut rng = seeded_rng(3, 0);
        use rand::Rng;
        let mut worst: f64 = 0.0;
        for net in 0..2 {
            let n = if net == 0 { model.f.data.len() } else { model.g.data.len() };
            for _ in 0..25 {
                let i = rng.random_range(0..n);
                let h = 1e-6;
                let mut p = model.clone();
                let mut q = model.clone();
                let (pv, qv, an) = if net == 0 {
                    (&mut p.f.data, &mut q.f.data, grads.f[i])
                } else {
                    (&mut p.g.data, &mut q.g.data, grads.g[i])
                };
                pv[i] += h;
                qv[i] -= h;
                let fd = (loss(&p) - loss(&q)) / (2.0 * h);
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences_kv() {
        let samples = vec![kv_sample(1, 51), kv_sample(2, 51)];
        fd_check(Variant::Kv, &samples, true);
    }

    #[test]
    fn loss_gradient_matches_finite_differences_evp() {
        let mut samples = Vec::new();
        for s in 0..2u64 {
            let strain = sample_strain(s, TimeGrid::new(51).unwrap());
            let channels = (0..4).map(|c| (0..33).map(|j| 1.0 + 0.1 * c as f64 + 0.05 * ((j + s as usize) as f64).sin()).collect()).collect();
            let stress = strain.eps.iter().map(|e| 2.0 * e).collect();
            samples.push(RnoSample { channels, strain, stress });
        }
        fd_check(Variant::Evp, &samples, false);
    }

    #[test]
    fn penalty_gradient_alone_matches_rest_rate() {
        let model = RnoModel::init(Variant::Kv, 2, small_arch(), 4).unwrap();
        let s = kv_sample(5, 21);
        let (with, _) = loss_and_grad(&model, &[&s], true).unwrap();
        let (without, _) = loss_and_grad(&model, &[&s], false).unwrap();
        let ch: Vec<&[f64]> = s.channels.iter().map(|c| c.as_slice()).collect();
        let g0 = state_rate_at_rest(&model, &MaterialBatch::new(&model, &[ch]).unwrap()).unwrap();
        let pen: f64 = g0.iter().map(|v| v * v).sum();
        assert!((with.total - without.total - pen).abs() < 1e-12);
        assert_eq!(with.data, without.data);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig::full_scale(Variant::Kv);
        assert_eq!(cfg.lr(0), 1e-3);
        assert!((cfg.lr(cfg.epochs) - 1e-5).abs() < 1e-18);
        assert!(cfg.lr(250) < cfg.lr(100));
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch: 4,
            epochs: 3,
            seed: 8,
            ..TrainConfig::full_scale(Variant::Kv)
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let data: Vec<RnoSample> = (0..18).map(|s| kv_sample(s, 21)).collect();
        let cfg = tiny_config();
        let model = RnoModel::init(Variant::Kv, 2, small_arch(), 1).unwrap();
        let a = train(&data, model.clone(), &cfg).unwrap();
        let mut saved = None;
        let b = train_from(TrainState::new(model), &data, &cfg, |s| {
            if s.epoch == 1 {
                saved = Some(s.clone());
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(a, b);
        let resumed = train_from(saved.unwrap(), &data, &cfg, |_| Ok(())).unwrap();
        assert_eq!(resumed, a);
        assert_eq!(a.history.len(), 3);
        assert!(a.history.last().unwrap().train_loss < a.history[0].train_loss);
    }

    #[test]
    fn split_holds_out_one_in_sixteen() {
        let (train, val) = split_indices(256, 16, 0);
        assert_eq!(val.len(), 16);
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort();
        assert_eq!(all, (0..256).collect::<Vec<_>>());
    }

    #[test]
    fn persistent_divergence_aborts() {
        let mut data: Vec<RnoSample> = (0..6).map(|s| kv_sample(s, 11)).collect();
        for s in &mut data {
            s.stress[3] = f64::NAN;
        }
        let model = RnoModel::init(Variant::Kv, 1, small_arch(), 1).unwrap();
        let err = train(&data, model, &tiny_config()).unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let model = RnoModel::init(Variant::Evp, 1, small_arch(), 1).unwrap();
        let c = vec![1.0; 33];
        assert!(MaterialBatch::new(&model, &[vec![&c[..], &c[..]]]).is_err());
    }
}
