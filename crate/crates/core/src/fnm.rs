//! Fourier Neural Mapping: a network taking a vector and a function on the
//! 1-torus to a vector, with exact reverse-mode gradients.
//!
//! Evaluation is batched. A batch holds `B` function inputs sampled on the
//! same grid; hidden states are stored as `(B * P) x width` row-major
//! matrices with `P` periodic points per sample.
//!
//! Fourier coefficients use the convention `h_k = (1/P) sum_j h_j e^{-2 pi i k j / P}`
//! and only wavenumbers `0..=K` are kept; negative wavenumbers follow from
//! conjugate symmetry, which is why modes `k >= 1` carry a factor 2 on the
//! way back to physical space.

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::seeded_rng;
use crate::linalg::{gemm, Strides};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FnmConfig {
    /// Function input channels, not counting the coordinate channel.
    pub d_in_f: usize,
    pub d_in_v: usize,
    pub d_out_v: usize,
    pub width: usize,
    pub n_layers: usize,
    /// Highest retained wavenumber.
    pub n_modes: usize,
    pub d_proj_fv: usize,
}

impl FnmConfig {
    pub fn new(d_in_f: usize, d_in_v: usize, d_out_v: usize) -> Self {
        Self {
            d_in_f,
            d_in_v,
            d_out_v,
            width: 32,
            n_layers: 3,
            n_modes: 4,
            d_proj_fv: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.d_in_f, self.d_out_v, self.width, self.n_layers, self.n_modes, self.d_proj_fv];
        if counts.contains(&0) {
            return Err(Error::Config(format!("all network sizes must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Columns of the pointwise lift: function channels plus the coordinate.
    fn d_feat(&self) -> usize {
        self.d_in_f + 1
    }

    pub fn n_params(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone)]
struct LayerLayout {
    spec_re: Range<usize>,
    spec_im: Range<usize>,
    w: Range<usize>,
    b: Range<usize>,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    lift_f: Range<usize>,
    lift_v: Range<usize>,
    lift_b: Range<usize>,
    layers: Vec<LayerLayout>,
    f2v_re: Range<usize>,
    f2v_im: Range<usize>,
    proj_w: Range<usize>,
    proj_b: Range<usize>,
    total: usize,
}

impl Layout {
    fn new(c: &FnmConfig) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let w = c.width;
        let k = c.n_modes;
        let lift_f = take(w * c.d_feat());
        let lift_v = take(w * c.d_in_v);
        let lift_b = take(w);
        let layers = (0..c.n_layers)
            .map(|_| LayerLayout {
                spec_re: take((k + 1) * w * w),
                // The zero mode is real, so only modes 1..=K have imaginary parts.
                spec_im: take(k * w * w),
                w: take(w * w),
                b: take(w),
            })
            .collect();
        let f2v_re = take((k + 1) * c.d_proj_fv * w);
        let f2v_im = take(k * c.d_proj_fv * w);
        let proj_w = take(c.d_out_v * c.d_proj_fv);
        let proj_b = take(c.d_out_v);
        Self {
            lift_f,
            lift_v,
            lift_b,
            layers,
            f2v_re,
            f2v_im,
            proj_w,
            proj_b,
            total: at,
        }
    }
}

/// Named tensor inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Network weights stored as one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FnmParams {
    pub config: FnmConfig,
    pub data: Vec<f64>,
}

impl FnmParams {
    pub fn zeros(config: FnmConfig) -> Self {
        Self {
            config,
            data: vec![0.0; config.n_params()],
        }
    }

    pub fn from_data(config: FnmConfig, data: Vec<f64>) -> Result<Self> {
        if data.len() != config.n_params() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", config.n_params(), data.len())));
        }
        Ok(Self { config, data })
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    /// Tensor names, shapes and offsets, for serialization.
    pub fn tensors(&self) -> Vec<TensorEntry> {
        tensor_entries(&self.config)
    }

    /// Lift weights `(width, d_in_f + 1)`; the last column multiplies the coordinate.
    pub fn lift_f_mut(&mut self) -> &mut [f64] {
        let r = self.layout().lift_f;
        &mut self.data[r]
    }

    pub fn lift_v_mut(&mut self) -> &mut [f64] {
        let r = self.layout().lift_v;
        &mut self.data[r]
    }

    pub fn lift_b_mut(&mut self) -> &mut [f64] {
        let r = self.layout().lift_b;
        &mut self.data[r]
    }

    /// Pointwise weights `(width, width)` of layer `t`.
    pub fn layer_w_mut(&mut self, t: usize) -> &mut [f64] {
        let r = self.layout().layers[t].w.clone();
        &mut self.data[r]
    }

    pub fn layer_b_mut(&mut self, t: usize) -> &mut [f64] {
        let r = self.layout().layers[t].b.clone();
        &mut self.data[r]
    }

    /// Real parts of the spectral weights of layer `t`, `(K + 1, width, width)`.
    pub fn layer_spec_re_mut(&mut self, t: usize) -> &mut [f64] {
        let r = self.layout().layers[t].spec_re.clone();
        &mut self.data[r]
    }

    /// Real parts of the function-to-vector weights, `(K + 1, d_proj_fv, width)`.
    pub fn f2v_re_mut(&mut self) -> &mut [f64] {
        let r = self.layout().f2v_re;
        &mut self.data[r]
    }

    pub fn proj_w_mut(&mut self) -> &mut [f64] {
        let r = self.layout().proj_w;
        &mut self.data[r]
    }

    pub fn proj_b_mut(&mut self) -> &mut [f64] {
        let r = self.layout().proj_b;
        &mut self.data[r]
    }
}

fn tensor_entries(c: &FnmConfig) -> Vec<TensorEntry> {
    let l = Layout::new(c);
    let (w, k, p) = (c.width, c.n_modes, c.d_proj_fv);
    let mut out = vec![
        TensorEntry {
            name: "lift.func".into(),
            shape: vec![w, c.d_feat()],
            offset: l.lift_f.start,
        },
        TensorEntry {
            name: "lift.vec".into(),
            shape: vec![w, c.d_in_v],
            offset: l.lift_v.start,
        },
        TensorEntry {
            name: "lift.bias".into(),
            shape: vec![w],
            offset: l.lift_b.start,
        },
    ];
    for (t, ll) in l.layers.iter().enumerate() {
        out.push(TensorEntry {
            name: format!("layer{t}.spectral.re"),
            shape: vec![k + 1, w, w],
            offset: ll.spec_re.start,
        });
        out.push(TensorEntry {
            name: format!("layer{t}.spectral.im"),
            shape: vec![k, w, w],
            offset: ll.spec_im.start,
        });
        out.push(TensorEntry {
            name: format!("layer{t}.pointwise"),
            shape: vec![w, w],
            offset: ll.w.start,
        });
        out.push(TensorEntry {
            name: format!("layer{t}.bias"),
            shape: vec![w],
            offset: ll.b.start,
        });
    }
    out.push(TensorEntry {
        name: "func2vec.re".into(),
        shape: vec![k + 1, p, w],
        offset: l.f2v_re.start,
    });
    out.push(TensorEntry {
        name: "func2vec.im".into(),
        shape: vec![k, p, w],
        offset: l.f2v_im.start,
    });
    out.push(TensorEntry {
        name: "proj.weight".into(),
        shape: vec![c.d_out_v, p],
        offset: l.proj_w.start,
    });
    out.push(TensorEntry {
        name: "proj.bias".into(),
        shape: vec![c.d_out_v],
        offset: l.proj_b.start,
    });
    out
}

/// Random initial weights.
pub fn fnm_init(config: FnmConfig, seed: u64) -> Result<FnmParams> {
    config.validate()?;
    let mut rng = seeded_rng(seed, 0);
    let mut p = FnmParams::zeros(config);
    let l = p.layout();
    let spec_scale = 1.0 / (config.width as f64 * (config.n_modes + 1) as f64);
    let f2v_scale = spec_scale.sqrt();
    // Uniform on [-a, a] with a = sqrt(gain / fan_in).
    let uniform = |rng: &mut rand_chacha::ChaCha8Rng, dst: &mut [f64], fan_in: usize, gain: f64| {
        let a = (gain / fan_in.max(1) as f64).sqrt();
        for v in dst {
            *v = rng.random_range(-a..=a);
        }
    };
    let gauss = |rng: &mut rand_chacha::ChaCha8Rng, dst: &mut [f64], scale: f64| {
        for v in dst {
            let z: f64 = rng.sample(StandardNormal);
            *v = scale * z;
        }
    };
    // Gain 6 keeps the activation scale roughly constant through GELU layers.
    let fan_lift = config.d_feat() + config.d_in_v;
    uniform(&mut rng, &mut p.data[l.lift_f.clone()], fan_lift, 6.0);
    uniform(&mut rng, &mut p.data[l.lift_v.clone()], fan_lift, 6.0);
    for ll in &l.layers {
        gauss(&mut rng, &mut p.data[ll.spec_re.clone()], spec_scale);
        gauss(&mut rng, &mut p.data[ll.spec_im.clone()], spec_scale);
        uniform(&mut rng, &mut p.data[ll.w.clone()], config.width, 6.0);
    }
    gauss(&mut rng, &mut p.data[l.f2v_re.clone()], f2v_scale);
    gauss(&mut rng, &mut p.data[l.f2v_im.clone()], f2v_scale);
    uniform(&mut rng, &mut p.data[l.proj_w.clone()], config.d_proj_fv, 1.0);
    Ok(p)
}

/// Truncated real DFT matrices for `P` points and wavenumbers `0..=K`.
#[derive(Debug, Clone)]
struct Basis {
    /// `(K+1) x P`: `cos(2 pi k j / P) / P`.
    fwd_c: Vec<f64>,
    /// `(K+1) x P`: `sin(2 pi k j / P) / P`.
    fwd_s: Vec<f64>,
    /// `P x (K+1)`: `a_k cos(2 pi k j / P)` with `a_0 = 1`, `a_k = 2`.
    inv_c: Vec<f64>,
    /// `P x (K+1)`: `a_k sin(2 pi k j / P)`.
    inv_s: Vec<f64>,
}

impl Basis {
    fn new(p: usize, k: usize) -> Self {
        let kk = k + 1;
        let mut fwd_c = vec![0.0; kk * p];
        let mut fwd_s = vec![0.0; kk * p];
        let mut inv_c = vec![0.0; p * kk];
        let mut inv_s = vec![0.0; p * kk];
        for m in 0..kk {
            let a = if m == 0 { 1.0 } else { 2.0 };
            for j in 0..p {
                // Reduce the phase exactly before taking trig functions.
                let phase = 2.0 * std::f64::consts::PI * ((m * j) % p) as f64 / p as f64;
                let (s, c) = if m == 0 { (0.0, 1.0) } else { phase.sin_cos() };
                fwd_c[m * p + j] = c / p as f64;
                fwd_s[m * p + j] = s / p as f64;
                inv_c[j * kk + m] = a * c;
                inv_s[j * kk + m] = a * s;
            }
        }
        Self {
            fwd_c,
            fwd_s,
            inv_c,
            inv_s,
        }
    }
}

/// Batch of function inputs with the coordinate channel appended, ready for
/// evaluation at a given number of retained modes.
#[derive(Debug, Clone)]
pub struct FnmInput {
    n_batch: usize,
    n_per: usize,
    d_feat: usize,
    n_modes: usize,
    /// `(B * P) x d_feat`.
    feat: Vec<f64>,
    basis: Basis,
}

impl FnmInput {
    /// `samples[b][c]` holds channel `c` of sample `b` on `n_points` nodes
    /// including the duplicated endpoint.
    pub fn new(samples: &[Vec<&[f64]>], n_modes: usize) -> Result<Self> {
        let n_batch = samples.len();
        if n_batch == 0 {
            return Err(Error::InvalidInput("empty function batch".into()));
        }
        let d_in_f = samples[0].len();
        let n_points = samples[0].first().map(|c| c.len()).unwrap_or(0);
        if n_points < 2 {
            return Err(Error::Shape("function inputs need at least two nodes".into()));
        }
        let n_per = n_points - 1;
        if n_per < 2 * n_modes + 1 {
            return Err(Error::InvalidInput(format!(
                "{n_points}-node grid is too coarse for {n_modes} Fourier modes"
            )));
        }
        let d_feat = d_in_f + 1;
        let mut feat = vec![0.0; n_batch * n_per * d_feat];
        for (b, chans) in samples.iter().enumerate() {
            if chans.len() != d_in_f || chans.iter().any(|c| c.len() != n_points) {
                return Err(Error::Shape(format!("sample {b} has inconsistent function channels")));
            }
            for j in 0..n_per {
                let row = &mut feat[(b * n_per + j) * d_feat..(b * n_per + j + 1) * d_feat];
                for (c, ch) in chans.iter().enumerate() {
                    row[c] = ch[j];
                }
                row[d_in_f] = j as f64 / n_per as f64;
            }
        }
        Ok(Self {
            n_batch,
            n_per,
            d_feat,
            n_modes,
            feat,
            basis: Basis::new(n_per, n_modes),
        })
    }

    pub fn n_batch(&self) -> usize {
        self.n_batch
    }

    fn rows(&self) -> usize {
        self.n_batch * self.n_per
    }

    fn check(&self, c: &FnmConfig) -> Result<()> {
        if c.d_feat() != self.d_feat || c.n_modes != self.n_modes {
            return Err(Error::Shape(format!(
                "input has {} channels / {} modes, network expects {} / {}",
                self.d_feat - 1,
                self.n_modes,
                c.d_in_f,
                c.n_modes
            )));
        }
        Ok(())
    }
}

/// Function-input part of the lift, cached across calls that share weights
/// and function inputs.
#[derive(Debug, Clone)]
pub struct Lifted {
    /// `(B * P) x width`.
    base: Vec<f64>,
}

/// Apply the function part of the lift.
pub fn fnm_lift(params: &FnmParams, input: &FnmInput) -> Result<Lifted> {
    let c = &params.config;
    input.check(c)?;
    let l = params.layout();
    let w = c.width;
    let rows = input.rows();
    let mut base = vec![0.0; rows * w];
    let bias = &params.data[l.lift_b.clone()];
    let weights = &params.data[l.lift_f.clone()];
    let d = input.d_feat;
    let mut terms = vec![0.0; d - 1];
    for r in 0..rows {
        let x = &input.feat[r * d..(r + 1) * d];
        for o in 0..w {
            let wo = &weights[o * d..(o + 1) * d];
            for c in 0..d - 1 {
                terms[c] = wo[c] * x[c];
            }
            // Sorted summation: relabeling function channels together with
            // their weights reproduces the lift exactly.
            terms.sort_by(f64::total_cmp);
            let func: f64 = terms.iter().sum();
            base[r * w + o] = bias[o] + wo[d - 1] * x[d - 1] + func;
        }
    }
    Ok(Lifted { base })
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Inputs of every Fourier layer plus the final hidden state.
    hs: Vec<Vec<f64>>,
    /// Activation slopes at the pre-activations of every Fourier layer.
    slopes: Vec<Vec<f64>>,
    /// Retained coefficients of each entry of `hs`, `B x (K+1) x width`.
    hat_re: Vec<Vec<f64>>,
    hat_im: Vec<Vec<f64>>,
    /// Function-to-vector output, `B x d_proj_fv`.
    z_f: Vec<f64>,
    vec_in: Vec<f64>,
    n_batch: usize,
}

/// GELU and its derivative.
fn gelu(z: f64) -> (f64, f64) {
    let cdf = 0.5 * (1.0 + libm::erf(z * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (z * cdf, cdf + z * pdf)
}

/// Forward DFT of every sample of `h` into `(re, im)`, each `B x (K+1) x w`.
fn dft(input: &FnmInput, h: &[f64], w: usize, re: &mut [f64], im: &mut [f64]) {
    let (p, kk) = (input.n_per, input.n_modes + 1);
    for b in 0..input.n_batch {
        let hb = &h[b * p * w..(b + 1) * p * w];
        let out = b * kk * w..(b + 1) * kk * w;
        gemm(kk, p, w, 1.0, &input.basis.fwd_c, Strides::rm(p), hb, Strides::rm(w), 0.0, &mut re[out.clone()], Strides::rm(w));
        gemm(kk, p, w, -1.0, &input.basis.fwd_s, Strides::rm(p), hb, Strides::rm(w), 0.0, &mut im[out], Strides::rm(w));
    }
}

/// Adjoint of [`dft`]: accumulate into `dh`.
fn dft_adjoint(input: &FnmInput, dre: &[f64], dim: &[f64], w: usize, dh: &mut [f64]) {
    let (p, kk) = (input.n_per, input.n_modes + 1);
    for b in 0..input.n_batch {
        let src = b * kk * w..(b + 1) * kk * w;
        let dhb = &mut dh[b * p * w..(b + 1) * p * w];
        gemm(p, kk, w, 1.0, &input.basis.fwd_c, Strides::tr(p), &dre[src.clone()], Strides::rm(w), 1.0, dhb, Strides::rm(w));
        gemm(p, kk, w, -1.0, &input.basis.fwd_s, Strides::tr(p), &dim[src], Strides::rm(w), 1.0, dhb, Strides::rm(w));
    }
}

/// Inverse transform of retained coefficients, accumulated into `out`.
fn idft(input: &FnmInput, re: &[f64], im: &[f64], w: usize, out: &mut [f64]) {
    let (p, kk) = (input.n_per, input.n_modes + 1);
    for b in 0..input.n_batch {
        let src = b * kk * w..(b + 1) * kk * w;
        let ob = &mut out[b * p * w..(b + 1) * p * w];
        gemm(p, kk, w, 1.0, &input.basis.inv_c, Strides::rm(kk), &re[src.clone()], Strides::rm(w), 1.0, ob, Strides::rm(w));
        gemm(p, kk, w, -1.0, &input.basis.inv_s, Strides::rm(kk), &im[src], Strides::rm(w), 1.0, ob, Strides::rm(w));
    }
}

/// Adjoint of [`idft`]: overwrite `(dre, dim)`.
fn idft_adjoint(input: &FnmInput, dz: &[f64], w: usize, dre: &mut [f64], dim: &mut [f64]) {
    let (p, kk) = (input.n_per, input.n_modes + 1);
    for b in 0..input.n_batch {
        let dst = b * kk * w..(b + 1) * kk * w;
        let dzb = &dz[b * p * w..(b + 1) * p * w];
        gemm(kk, p, w, 1.0, &input.basis.inv_c, Strides::tr(kk), dzb, Strides::rm(w), 0.0, &mut dre[dst.clone()], Strides::rm(w));
        gemm(kk, p, w, -1.0, &input.basis.inv_s, Strides::tr(kk), dzb, Strides::rm(w), 0.0, &mut dim[dst], Strides::rm(w));
    }
}

/// Complex product of retained coefficients with per-mode weight matrices:
/// `out_k = P_k x_k` for every sample, with `P_k: d_out x d_in`.
///
/// `p_im` holds modes `1..=K` only; mode 0 is real.
#[allow(clippy::too_many_arguments)]
fn spectral_mix(
    n_batch: usize,
    kk: usize,
    d_in: usize,
    d_out: usize,
    p_re: &[f64],
    p_im: &[f64],
    x_re: &[f64],
    x_im: &[f64],
    out_re: &mut [f64],
    out_im: &mut [f64],
) {
    let blk = d_out * d_in;
    let sx = Strides::rows(kk * d_in);
    let so = Strides::rows(kk * d_out);
    for k in 0..kk {
        let pr = &p_re[k * blk..(k + 1) * blk];
        let xr = &x_re[k * d_in..];
        let xi = &x_im[k * d_in..];
        let or = &mut out_re[k * d_out..];
        gemm(n_batch, d_in, d_out, 1.0, xr, sx, pr, Strides::tr(d_in), 0.0, or, so);
        let oi = &mut out_im[k * d_out..];
        gemm(n_batch, d_in, d_out, 1.0, xi, sx, pr, Strides::tr(d_in), 0.0, oi, so);
        if k > 0 {
            let pi = &p_im[(k - 1) * blk..k * blk];
            gemm(n_batch, d_in, d_out, -1.0, xi, sx, pi, Strides::tr(d_in), 1.0, &mut out_re[k * d_out..], so);
            gemm(n_batch, d_in, d_out, 1.0, xr, sx, pi, Strides::tr(d_in), 1.0, &mut out_im[k * d_out..], so);
        }
    }
}

/// Adjoint of [`spectral_mix`]: accumulate weight gradients and overwrite
/// input coefficient gradients.
#[allow(clippy::too_many_arguments)]
fn spectral_mix_adjoint(
    n_batch: usize,
    kk: usize,
    d_in: usize,
    d_out: usize,
    p_re: &[f64],
    p_im: &[f64],
    x_re: &[f64],
    x_im: &[f64],
    d_out_re: &[f64],
    d_out_im: &[f64],
    g_re: &mut [f64],
    g_im: &mut [f64],
    dx_re: &mut [f64],
    dx_im: &mut [f64],
) {
    let blk = d_out * d_in;
    let sx = Strides::rows(kk * d_in);
    let so = Strides::rows(kk * d_out);
    // Transposed view of the strided B x d_out block.
    let tr_o = Strides { row: 1, col: (kk * d_out) as isize };
    for k in 0..kk {
        let pr = &p_re[k * blk..(k + 1) * blk];
        let (xr, xi) = (&x_re[k * d_in..], &x_im[k * d_in..]);
        let (dor, doi) = (&d_out_re[k * d_out..], &d_out_im[k * d_out..]);
        // Re: out_re = P_r x_r - P_i x_i ; out_im = P_r x_i + P_i x_r.
        let gr = &mut g_re[k * blk..(k + 1) * blk];
        gemm(d_out, n_batch, d_in, 1.0, dor, tr_o, xr, sx, 1.0, gr, Strides::rm(d_in));
        gemm(d_out, n_batch, d_in, 1.0, doi, tr_o, xi, sx, 1.0, gr, Strides::rm(d_in));
        gemm(n_batch, d_out, d_in, 1.0, dor, so, pr, Strides::rm(d_in), 0.0, &mut dx_re[k * d_in..], sx);
        gemm(n_batch, d_out, d_in, 1.0, doi, so, pr, Strides::rm(d_in), 0.0, &mut dx_im[k * d_in..], sx);
        if k > 0 {
            let pi = &p_im[(k - 1) * blk..k * blk];
            let gi = &mut g_im[(k - 1) * blk..k * blk];
            gemm(d_out, n_batch, d_in, -1.0, dor, tr_o, xi, sx, 1.0, gi, Strides::rm(d_in));
            gemm(d_out, n_batch, d_in, 1.0, doi, tr_o, xr, sx, 1.0, gi, Strides::rm(d_in));
            gemm(n_batch, d_out, d_in, 1.0, doi, so, pi, Strides::rm(d_in), 1.0, &mut dx_re[k * d_in..], sx);
            gemm(n_batch, d_out, d_in, -1.0, dor, so, pi, Strides::rm(d_in), 1.0, &mut dx_im[k * d_in..], sx);
        }
    }
}

/// Evaluate the network on a batch; `vec_in` is `B x d_in_v` row-major.
pub fn fnm_forward(params: &FnmParams, input: &FnmInput, lifted: &Lifted, vec_in: &[f64]) -> Result<(Vec<f64>, Tape)> {
    let c = &params.config;
    input.check(c)?;
    let nb = input.n_batch;
    if vec_in.len() != nb * c.d_in_v {
        return Err(Error::Shape(format!("vector input has {} entries, expected {}", vec_in.len(), nb * c.d_in_v)));
    }
    let l = params.layout();
    let (w, kk, p) = (c.width, c.n_modes + 1, input.n_per);
    let rows = input.rows();

    // Lift: cached function part plus the broadcast vector part.
    let mut h = lifted.base.clone();
    if c.d_in_v > 0 {
        let mut shift = vec![0.0; nb * w];
        gemm(nb, c.d_in_v, w, 1.0, vec_in, Strides::rm(c.d_in_v), &params.data[l.lift_v.clone()], Strides::tr(c.d_in_v), 0.0, &mut shift, Strides::rm(w));
        for b in 0..nb {
            for j in 0..p {
                let row = &mut h[(b * p + j) * w..(b * p + j + 1) * w];
                for (x, s) in row.iter_mut().zip(&shift[b * w..(b + 1) * w]) {
                    *x += s;
                }
            }
        }
    }

    let mut hs = Vec::with_capacity(c.n_layers + 1);
    let mut slopes = Vec::with_capacity(c.n_layers);
    let mut hat_re = Vec::with_capacity(c.n_layers + 1);
    let mut hat_im = Vec::with_capacity(c.n_layers + 1);
    let mut vre = vec![0.0; nb * kk * w];
    let mut vim = vec![0.0; nb * kk * w];
    for ll in &l.layers {
        let mut hr = vec![0.0; nb * kk * w];
        let mut hi = vec![0.0; nb * kk * w];
        dft(input, &h, w, &mut hr, &mut hi);
        spectral_mix(nb, kk, w, w, &params.data[ll.spec_re.clone()], &params.data[ll.spec_im.clone()], &hr, &hi, &mut vre, &mut vim);
        let mut z = vec![0.0; rows * w];
        let bias = &params.data[ll.b.clone()];
        for r in 0..rows {
            z[r * w..(r + 1) * w].copy_from_slice(bias);
        }
        gemm(rows, w, w, 1.0, &h, Strides::rm(w), &params.data[ll.w.clone()], Strides::tr(w), 1.0, &mut z, Strides::rm(w));
        idft(input, &vre, &vim, w, &mut z);
        let mut next = vec![0.0; rows * w];
        for (n, v) in next.iter_mut().zip(z.iter_mut()) {
            let (a, d) = gelu(*v);
            *n = a;
            *v = d;
        }
        hs.push(std::mem::replace(&mut h, next));
        slopes.push(z);
        hat_re.push(hr);
        hat_im.push(hi);
    }

    // Function to vector.
    let dp = c.d_proj_fv;
    let mut hr = vec![0.0; nb * kk * w];
    let mut hi = vec![0.0; nb * kk * w];
    dft(input, &h, w, &mut hr, &mut hi);
    let mut zr = vec![0.0; nb * kk * dp];
    let mut zi = vec![0.0; nb * kk * dp];
    spectral_mix(nb, kk, w, dp, &params.data[l.f2v_re.clone()], &params.data[l.f2v_im.clone()], &hr, &hi, &mut zr, &mut zi);
    let mut z_f = vec![0.0; nb * dp];
    for b in 0..nb {
        for k in 0..kk {
            let a = if k == 0 { 1.0 } else { 2.0 };
            let src = &zr[(b * kk + k) * dp..(b * kk + k + 1) * dp];
            for (o, s) in z_f[b * dp..(b + 1) * dp].iter_mut().zip(src) {
                *o += a * s;
            }
        }
    }
    hs.push(h);
    hat_re.push(hr);
    hat_im.push(hi);

    // Projection.
    let d_out = c.d_out_v;
    let mut out = vec![0.0; nb * d_out];
    let pb = &params.data[l.proj_b.clone()];
    for b in 0..nb {
        out[b * d_out..(b + 1) * d_out].copy_from_slice(pb);
    }
    gemm(nb, dp, d_out, 1.0, &z_f, Strides::rm(dp), &params.data[l.proj_w.clone()], Strides::tr(dp), 1.0, &mut out, Strides::rm(d_out));

    Ok((
        out,
        Tape {
            hs,
            slopes,
            hat_re,
            hat_im,
            z_f,
            vec_in: vec_in.to_vec(),
            n_batch: nb,
        },
    ))
}

/// Reverse pass. Adds parameter gradients into `grad` (flat, same layout as
/// the parameters) and returns the gradient with respect to the vector input.
pub fn fnm_backward(params: &FnmParams, input: &FnmInput, tape: &Tape, out_grad: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
    let c = &params.config;
    input.check(c)?;
    let nb = tape.n_batch;
    if out_grad.len() != nb * c.d_out_v || grad.len() != params.data.len() || nb != input.n_batch {
        return Err(Error::Shape("tape, output gradient and gradient buffer do not match".into()));
    }
    let l = params.layout();
    let (w, kk, p, dp, d_out) = (c.width, c.n_modes + 1, input.n_per, c.d_proj_fv, c.d_out_v);
    let rows = input.rows();

    // Projection.
    {
        let gw = &mut grad[l.proj_w.clone()];
        gemm(d_out, nb, dp, 1.0, out_grad, Strides::tr(d_out), &tape.z_f, Strides::rm(dp), 1.0, gw, Strides::rm(dp));
    }
    for b in 0..nb {
        for o in 0..d_out {
            grad[l.proj_b.start + o] += out_grad[b * d_out + o];
        }
    }
    let mut dz_f = vec![0.0; nb * dp];
    gemm(nb, d_out, dp, 1.0, out_grad, Strides::rm(d_out), &params.data[l.proj_w.clone()], Strides::rm(dp), 0.0, &mut dz_f, Strides::rm(dp));

    // Function to vector.
    let mut dzr = vec![0.0; nb * kk * dp];
    let dzi = vec![0.0; nb * kk * dp];
    for b in 0..nb {
        for k in 0..kk {
            let a = if k == 0 { 1.0 } else { 2.0 };
            let dst = &mut dzr[(b * kk + k) * dp..(b * kk + k + 1) * dp];
            for (d, s) in dst.iter_mut().zip(&dz_f[b * dp..(b + 1) * dp]) {
                *d = a * s;
            }
        }
    }
    let t_last = c.n_layers;
    let mut dhr = vec![0.0; nb * kk * w];
    let mut dhi = vec![0.0; nb * kk * w];
    {
        let (g_re, g_im) = split_pair(grad, l.f2v_re.clone(), l.f2v_im.clone());
        spectral_mix_adjoint(
            nb,
            kk,
            w,
            dp,
            &params.data[l.f2v_re.clone()],
            &params.data[l.f2v_im.clone()],
            &tape.hat_re[t_last],
            &tape.hat_im[t_last],
            &dzr,
            &dzi,
            g_re,
            g_im,
            &mut dhr,
            &mut dhi,
        );
    }
    let mut dh = vec![0.0; rows * w];
    dft_adjoint(input, &dhr, &dhi, w, &mut dh);

    // Fourier layers in reverse.
    let mut dvr = vec![0.0; nb * kk * w];
    let mut dvi = vec![0.0; nb * kk * w];
    for (t, ll) in l.layers.iter().enumerate().rev() {
        let h_in = &tape.hs[t];
        let dz: Vec<f64> = dh.iter().zip(&tape.slopes[t]).map(|(g, d)| g * d).collect();
        gemm(w, rows, w, 1.0, &dz, Strides::tr(w), h_in, Strides::rm(w), 1.0, &mut grad[ll.w.clone()], Strides::rm(w));
        for r in 0..rows {
            for (gb, d) in grad[ll.b.clone()].iter_mut().zip(&dz[r * w..(r + 1) * w]) {
                *gb += d;
            }
        }
        let mut dh_in = vec![0.0; rows * w];
        gemm(rows, w, w, 1.0, &dz, Strides::rm(w), &params.data[ll.w.clone()], Strides::rm(w), 0.0, &mut dh_in, Strides::rm(w));
        idft_adjoint(input, &dz, w, &mut dvr, &mut dvi);
        {
            let (g_re, g_im) = split_pair(grad, ll.spec_re.clone(), ll.spec_im.clone());
            spectral_mix_adjoint(
                nb,
                kk,
                w,
                w,
                &params.data[ll.spec_re.clone()],
                &params.data[ll.spec_im.clone()],
                &tape.hat_re[t],
                &tape.hat_im[t],
                &dvr,
                &dvi,
                g_re,
                g_im,
                &mut dhr,
                &mut dhi,
            );
        }
        dft_adjoint(input, &dhr, &dhi, w, &mut dh_in);
        dh = dh_in;
    }

    // Lift.
    gemm(w, rows, input.d_feat, 1.0, &dh, Strides::tr(w), &input.feat, Strides::rm(input.d_feat), 1.0, &mut grad[l.lift_f.clone()], Strides::rm(input.d_feat));
    let mut dsum = vec![0.0; nb * w];
    for b in 0..nb {
        for j in 0..p {
            let row = &dh[(b * p + j) * w..(b * p + j + 1) * w];
            for (s, d) in dsum[b * w..(b + 1) * w].iter_mut().zip(row) {
                *s += d;
            }
        }
    }
    for b in 0..nb {
        for (g, d) in grad[l.lift_b.clone()].iter_mut().zip(&dsum[b * w..(b + 1) * w]) {
            *g += d;
        }
    }
    let mut dvec = vec![0.0; nb * c.d_in_v];
    if c.d_in_v > 0 {
        // Vector inputs enter through the per-sample column sums.
        gemm(w, nb, c.d_in_v, 1.0, &dsum, Strides::tr(w), &tape.vec_in, Strides::rm(c.d_in_v), 1.0, &mut grad[l.lift_v.clone()], Strides::rm(c.d_in_v));
        gemm(nb, w, c.d_in_v, 1.0, &dsum, Strides::rm(w), &params.data[l.lift_v.clone()], Strides::rm(c.d_in_v), 0.0, &mut dvec, Strides::rm(c.d_in_v));
    }
    Ok(dvec)
}

fn split_pair(buf: &mut [f64], a: Range<usize>, b: Range<usize>) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = buf.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.end - b.start])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> FnmConfig {
        FnmConfig {
            d_in_f: 2,
            d_in_v: 3,
            d_out_v: 2,
            width: 6,
            n_layers: 2,
            n_modes: 3,
            d_proj_fv: 5,
        }
    }

    fn random_fields(seed: u64, n_batch: usize, n_points: usize, channels: usize) -> Vec<Vec<Vec<f64>>> {
        let mut rng = seeded_rng(seed, 9);
        (0..n_batch)
            .map(|_| {
                (0..channels)
                    .map(|_| {
                        let mut v: Vec<f64> = (0..n_points).map(|_| rng.random_range(0.1..1.0)).collect();
                        v[n_points - 1] = v[0];
                        v
                    })
                    .collect()
            })
            .collect()
    }

    fn as_input(fields: &[Vec<Vec<f64>>], k: usize) -> FnmInput {
        let views: Vec<Vec<&[f64]>> = fields.iter().map(|s| s.iter().map(|c| c.as_slice()).collect()).collect();
        FnmInput::new(&views, k).unwrap()
    }

    fn eval(params: &FnmParams, input: &FnmInput, v: &[f64]) -> Vec<f64> {
        let lifted = fnm_lift(params, input).unwrap();
        fnm_forward(params, input, &lifted, v).unwrap().0
    }

    #[test]
    fn zero_params_give_projection_bias() {
        let c = small_config();
        let mut p = FnmParams::zeros(c);
        p.proj_b_mut().copy_from_slice(&[0.25, -1.5]);
        let input = as_input(&random_fields(1, 3, 17, 2), 3);
        let out = eval(&p, &input, &[0.3; 9]);
        assert_eq!(out, vec![0.25, -1.5, 0.25, -1.5, 0.25, -1.5]);
    }

    #[test]
    fn init_is_deterministic_and_well_scaled() {
        let c = FnmConfig::new(2, 3, 1);
        assert_eq!(fnm_init(c, 7).unwrap(), fnm_init(c, 7).unwrap());
        assert_ne!(fnm_init(c, 7).unwrap(), fnm_init(c, 8).unwrap());
        // Mode 0 carries no imaginary storage at all.
        let t = fnm_init(c, 7).unwrap().tensors();
        let im = t.iter().find(|e| e.name == "layer0.spectral.im").unwrap();
        assert_eq!(im.shape[0], c.n_modes);
    }

    #[test]
    fn relabeling_function_channels_is_exact() {
        let c = small_config();
        let p = fnm_init(c, 3).unwrap();
        let fields = random_fields(2, 2, 17, 2);
        let swapped: Vec<Vec<Vec<f64>>> = fields.iter().map(|s| vec![s[1].clone(), s[0].clone()]).collect();
        let mut q = p.clone();
        let d_feat = c.d_feat();
        for r in 0..c.width {
            q.lift_f_mut().swap(r * d_feat, r * d_feat + 1);
        }
        let v = [0.1, -0.2, 0.3, 0.4, 0.5, -0.6];
        let a = eval(&p, &as_input(&fields, 3), &v);
        let b = eval(&q, &as_input(&swapped, 3), &v);
        assert_eq!(a, b);
    }

    fn loss_and_grad(p: &FnmParams, input: &FnmInput, v: &[f64], g: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let lifted = fnm_lift(p, input).unwrap();
        let (out, tape) = fnm_forward(p, input, &lifted, v).unwrap();
        let loss = out.iter().zip(g).map(|(a, b)| a * b).sum();
        let mut grad = vec![0.0; p.data.len()];
        let dv = fnm_backward(p, input, &tape, g, &mut grad).unwrap();
        (loss, grad, dv)
    }

    #[test]
    fn gradients_match_central_differences() {
        let c = small_config();
        let p = fnm_init(c, 11).unwrap();
        let input = as_input(&random_fields(4, 2, 13, 2), 3);
        let v = [0.4, -0.7, 0.2, 1.1, 0.05, -0.3];
        let g = [0.7, -1.2, 0.3, 0.9];
        let (_, grad, dv) = loss_and_grad(&p, &input, &v, &g);
        let h = 1e-5;
        let mut rng = seeded_rng(5, 1);
        let l = p.layout();
        // Every tensor gets at least one probe, plus random extras.
        let mut probes: Vec<usize> = tensor_entries(&c).iter().filter(|e| e.shape.iter().product::<usize>() > 0).map(|e| e.offset).collect();
        probes.extend((0..20).map(|_| rng.random_range(0..l.total)));
        for i in probes {
            let mut a = p.clone();
            a.data[i] += h;
            let mut b = p.clone();
            b.data[i] -= h;
            let fd = (loss_and_grad(&a, &input, &v, &g).0 - loss_and_grad(&b, &input, &v, &g).0) / (2.0 * h);
            assert!((grad[i] - fd).abs() / (grad[i].abs() + 1e-8) < 1e-5, "param {i}: {} vs {fd}", grad[i]);
        }
        for i in 0..v.len() {
            let mut a = v;
            a[i] += h;
            let mut b = v;
            b[i] -= h;
            let fd = (loss_and_grad(&p, &input, &a, &g).0 - loss_and_grad(&p, &input, &b, &g).0) / (2.0 * h);
            assert!((dv[i] - fd).abs() / (dv[i].abs() + 1e-8) < 1e-5);
        }
    }

    #[test]
    fn backward_is_linear_in_output_gradient() {
        let c = small_config();
        let p = fnm_init(c, 2).unwrap();
        let input = as_input(&random_fields(6, 2, 13, 2), 3);
        let v = [0.1; 6];
        let g1 = [1.0, 0.0, -0.5, 0.25];
        let g2 = [0.3, 0.7, 0.1, -0.9];
        let (a, b) = (0.6, -1.7);
        let mix: Vec<f64> = g1.iter().zip(&g2).map(|(x, y)| a * x + b * y).collect();
        let (_, r1, v1) = loss_and_grad(&p, &input, &v, &g1);
        let (_, r2, v2) = loss_and_grad(&p, &input, &v, &g2);
        let (_, rm, vm) = loss_and_grad(&p, &input, &v, &mix);
        for i in 0..rm.len() {
            assert!((rm[i] - (a * r1[i] + b * r2[i])).abs() < 1e-12);
        }
        for i in 0..vm.len() {
            assert!((vm[i] - (a * v1[i] + b * v2[i])).abs() < 1e-12);
        }
        let (_, r0, v0) = loss_and_grad(&p, &input, &v, &[0.0; 4]);
        assert!(r0.iter().chain(&v0).all(|&x| x == 0.0));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let p = fnm_init(small_config(), 4).unwrap();
        let input = as_input(&random_fields(3, 2, 17, 2), 3);
        let v = [0.2; 6];
        assert_eq!(eval(&p, &input, &v), eval(&p, &input, &v));
    }

    #[test]
    fn band_limited_inputs_agree_across_resolutions() {
        let mut c = small_config();
        c.width = 8;
        let mut p = fnm_init(c, 21).unwrap();
        // The coordinate channel is a sawtooth, not band limited.
        let d_feat = c.d_feat();
        for r in 0..c.width {
            p.lift_f_mut()[r * d_feat + c.d_in_f] = 0.0;
        }
        let field = |n: usize, phase: f64| -> Vec<f64> {
            (0..n)
                .map(|j| {
                    let y = j as f64 / (n - 1) as f64;
                    0.5 + 0.2 * (2.0 * std::f64::consts::PI * y + phase).sin() + 0.1 * (6.0 * std::f64::consts::PI * y).cos()
                })
                .collect()
        };
        let make = |n: usize| vec![vec![field(n, 0.3), field(n, 1.1)]];
        let v = [0.2, -0.1, 0.4];
        let a = eval(&p, &as_input(&make(65), 3), &v);
        let b = eval(&p, &as_input(&make(129), 3), &v);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let fields = random_fields(1, 1, 6, 2);
        let views: Vec<Vec<&[f64]>> = fields.iter().map(|s| s.iter().map(|c| c.as_slice()).collect()).collect();
        assert!(FnmInput::new(&views, 3).is_err());
    }
}
