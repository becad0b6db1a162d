//! Reproducible runs: dataset generation, training, evaluation, macroscale
//! comparisons and standalone memory-kernel fits, with their file formats.

pub mod store;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell_solver::{evp_averages, kv_average_stress, SpaceTimeField};
use crate::error::{Error, Result};
use crate::fields::{resample_linear, SampledField, SpaceGrid, TimeGrid};
use crate::macro_sim::{error_map, solve_macro, Backend, MacroProblem, DEFAULT_ELEMS_PER_PERIOD, DEFAULT_PIECES};
use crate::materials::{
    sample_evp, sample_hmc_kv, sample_pc_kv, sample_strain, ContinuousMaterialKV, EvpKind, KvMaterial, MaterialEVP, Pieces,
    PiecewiseMaterialKV, StrainProgram, EVP_BOXES, EVP_E,
};
use crate::prony::{fit_prony, markovian_params, no_memory, PronyModel};
use crate::rno::{
    relative_error_sq, rollout, train_from, RnoArch, RnoModel, RnoSample, TrainConfig, TrainState, Variant,
};
use store::{
    ensure_dir, load_state, read_json, save_model, save_state, write_csv, write_json, ArrayReader, ArrayRef, ArrayWriter,
    FORMAT_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Pc,
    Hmc,
    PcEvp,
    CEvp,
}

impl DatasetKind {
    pub fn variant(self) -> Variant {
        match self {
            DatasetKind::Pc | DatasetKind::Hmc => Variant::Kv,
            DatasetKind::PcEvp | DatasetKind::CEvp => Variant::Evp,
        }
    }

    fn channel_names(self) -> Vec<String> {
        let names: &[&str] = match self.variant() {
            Variant::Kv => &["E", "nu"],
            Variant::Evp => &["E", "eps_p0", "sigma_y", "n"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataConfig {
    pub kind: DatasetKind,
    pub n_samples: usize,
    pub seed: u64,
    /// Cell-solver resolution.
    pub solve_space: usize,
    pub solve_time: usize,
    /// Stored resolution.
    pub out_space: usize,
    pub out_time: usize,
}

impl GenDataConfig {
    pub fn full_scale(kind: DatasetKind) -> Self {
        Self {
            kind,
            n_samples: 2049,
            seed: 0,
            solve_space: 501,
            solve_time: 5001,
            out_space: 251,
            out_time: 501,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        for (name, n) in [
            ("solve_space", self.solve_space),
            ("solve_time", self.solve_time),
            ("out_space", self.out_space),
            ("out_time", self.out_time),
        ] {
            if n < 2 {
                return Err(Error::Config(format!("{name} needs at least 2 nodes")));
            }
        }
        Ok(())
    }
}

/// Analytic description of a layered material, kept alongside its samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MaterialDef {
    KvPieces(PiecewiseMaterialKV),
    EvpPieces(Pieces),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub id: usize,
    pub seed: u64,
    pub material: Option<MaterialDef>,
    /// Nodal material channels on the stored spatial grid.
    pub channels: Vec<Vec<f64>>,
    pub strain: StrainProgram,
    pub stress: Vec<f64>,
    pub plastic_strain: Option<Vec<f64>>,
}

impl DatasetSample {
    /// Channels as the network sees them: elasto-viscoplastic channels are
    /// divided by the upper end of their sampling range, Kelvin-Voigt ones
    /// already lie in (0, 1].
    pub fn network_channels(&self) -> Vec<Vec<f64>> {
        if self.channels.len() != EVP_BOXES.len() {
            return self.channels.clone();
        }
        self.channels
            .iter()
            .zip(EVP_BOXES)
            .map(|(c, (_, hi))| c.iter().map(|v| v / hi).collect())
            .collect()
    }

    pub fn to_rno(&self) -> RnoSample {
        RnoSample {
            channels: self.network_channels(),
            strain: self.strain.clone(),
            stress: self.stress.clone(),
        }
    }

    /// Copy on different spatial and temporal resolutions.
    pub fn resampled(&self, n_space: usize, n_time: usize) -> Result<Self> {
        let grid = TimeGrid::new(n_time)?;
        let strain = StrainProgram::new(grid, resample_linear(&self.strain.eps, n_time), resample_linear(&self.strain.deps, n_time))?;
        Ok(Self {
            id: self.id,
            seed: self.seed,
            material: self.material.clone(),
            channels: self.channels.iter().map(|c| resample_linear(c, n_space)).collect(),
            strain,
            stress: resample_linear(&self.stress, n_time),
            plastic_strain: self.plastic_strain.as_ref().map(|p| resample_linear(p, n_time)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub id: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GenDataConfig,
    pub samples: Vec<DatasetSample>,
    pub failures: Vec<SampleFailure>,
}

impl Dataset {
    pub fn kind(&self) -> DatasetKind {
        self.config.kind
    }
}

fn generate_one(cfg: &GenDataConfig, id: usize) -> Result<DatasetSample> {
    let seed = cfg.seed + id as u64;
    let solve_space = SpaceGrid::new(cfg.solve_space)?;
    let solve_time = TimeGrid::new(cfg.solve_time)?;
    let out_space = SpaceGrid::new(cfg.out_space)?;
    let out_time = TimeGrid::new(cfg.out_time)?;
    let fine = sample_strain(seed, solve_time);
    let strain = sample_strain(seed, out_time);
    let (material, channels, stress, plastic) = match cfg.kind {
        DatasetKind::Pc | DatasetKind::Hmc => {
            let (def, mat): (Option<MaterialDef>, KvMaterial) = match cfg.kind {
                DatasetKind::Pc => {
                    let m = sample_pc_kv(seed);
                    (Some(MaterialDef::KvPieces(m.clone())), m.into())
                }
                _ => (None, sample_hmc_kv(seed, solve_space)?.into()),
            };
            let sigma = kv_average_stress(&mat, &fine, solve_space, solve_time)?;
            let (e, nu) = mat.fields(out_space);
            (def, vec![e.into_values(), nu.into_values()], sigma, None)
        }
        DatasetKind::PcEvp | DatasetKind::CEvp => {
            let kind = if cfg.kind == DatasetKind::PcEvp { EvpKind::Piecewise } else { EvpKind::Continuous };
            let mat = sample_evp(seed, kind, solve_space);
            let def = match &mat {
                MaterialEVP::Piecewise(p) => Some(MaterialDef::EvpPieces(p.clone())),
                MaterialEVP::Continuous { .. } => None,
            };
            let sol = evp_averages(&mat, &fine, solve_space, solve_time)?;
            let channels = mat.fields(out_space).into_iter().map(SampledField::into_values).collect();
            (def, channels, sol.sigma_bar, Some(sol.eps_p_bar))
        }
    };
    let stress = resample_linear(&stress, cfg.out_time);
    if stress.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite averaged stress".into()));
    }
    Ok(DatasetSample {
        id,
        seed,
        material,
        channels,
        strain,
        stress,
        plastic_strain: plastic.map(|p| resample_linear(&p, cfg.out_time)),
    })
}

/// Generate every sample; per-sample failures are recorded, not fatal.
pub fn generate_dataset(cfg: &GenDataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let results: Vec<Result<DatasetSample>> = (0..cfg.n_samples).into_par_iter().map(|id| generate_one(cfg, id)).collect();
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => samples.push(s),
            Err(e) if e.is_numerical() => {
                log::warn!("sample {id} failed: {e}");
                failures.push(SampleFailure {
                    id,
                    seed: cfg.seed + id as u64,
                    error: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Dataset {
        config: cfg.clone(),
        samples,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SampleRecord {
    id: usize,
    seed: u64,
    material: Option<MaterialDef>,
    channels: ArrayRef,
    strain: ArrayRef,
    strain_rate: ArrayRef,
    stress: ArrayRef,
    plastic_strain: Option<ArrayRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetManifest {
    version: u32,
    kind: DatasetKind,
    n_space: usize,
    n_time: usize,
    channel_names: Vec<String>,
    config: GenDataConfig,
    samples: Vec<SampleRecord>,
    failures: Vec<SampleFailure>,
}

pub const MANIFEST: &str = "manifest.json";

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    ensure_dir(dir)?;
    let mut w = ArrayWriter::new();
    let (ns, nt) = (ds.config.out_space, ds.config.out_time);
    let records = ds
        .samples
        .iter()
        .map(|s| {
            let flat: Vec<f64> = s.channels.concat();
            SampleRecord {
                id: s.id,
                seed: s.seed,
                material: s.material.clone(),
                channels: w.push("materials.f64", &flat, vec![s.channels.len(), ns]),
                strain: w.push("strain.f64", &s.strain.eps, vec![nt]),
                strain_rate: w.push("strain_rate.f64", &s.strain.deps, vec![nt]),
                stress: w.push("stress.f64", &s.stress, vec![nt]),
                plastic_strain: s.plastic_strain.as_ref().map(|p| w.push("plastic_strain.f64", p, vec![nt])),
            }
        })
        .collect();
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        kind: ds.config.kind,
        n_space: ns,
        n_time: nt,
        channel_names: ds.config.kind.channel_names(),
        config: ds.config.clone(),
        samples: records,
        failures: ds.failures.clone(),
    };
    w.finish(dir)?;
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let m: DatasetManifest = read_json(&dir.join(MANIFEST))?;
    if m.version != FORMAT_VERSION {
        return Err(Error::Config(format!("unsupported dataset version {}", m.version)));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut r = ArrayReader::new(dir);
    let grid = TimeGrid::new(m.n_time)?;
    let n_ch = m.channel_names.len();
    let mut samples = Vec::with_capacity(m.samples.len());
    for rec in &m.samples {
        if !seen.insert(rec.seed) {
            return Err(Error::Config(format!("duplicate sample seed {}", rec.seed)));
        }
        let check = |a: &ArrayRef, want: &[usize]| -> Result<()> {
            if a.shape != want {
                return Err(Error::Shape(format!("sample {}: array shape {:?}, expected {:?}", rec.id, a.shape, want)));
            }
            Ok(())
        };
        check(&rec.channels, &[n_ch, m.n_space])?;
        for a in [&rec.strain, &rec.strain_rate, &rec.stress] {
            check(a, &[m.n_time])?;
        }
        let flat = r.read(&rec.channels)?;
        let plastic = match &rec.plastic_strain {
            Some(a) => {
                check(a, &[m.n_time])?;
                Some(r.read(a)?)
            }
            None => None,
        };
        samples.push(DatasetSample {
            id: rec.id,
            seed: rec.seed,
            material: rec.material.clone(),
            channels: flat.chunks(m.n_space).map(|c| c.to_vec()).collect(),
            strain: StrainProgram::new(grid, r.read(&rec.strain)?, r.read(&rec.strain_rate)?)?,
            stress: r.read(&rec.stress)?,
            plastic_strain: plastic,
        });
    }
    Ok(Dataset {
        config: m.config,
        samples,
        failures: m.failures,
    })
}

/// `gen-data`: generate and write a dataset.
pub fn run_gen_data(cfg: &GenDataConfig, out: &Path) -> Result<Dataset> {
    let ds = generate_dataset(cfg)?;
    write_dataset(out, &ds)?;
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub n_state: usize,
    pub arch: RnoArch,
    pub init_seed: u64,
    pub train: TrainConfig,
    /// Optional training resolution; the stored one otherwise.
    pub n_space: Option<usize>,
    pub n_time: Option<usize>,
}

impl TrainRunConfig {
    pub fn full_scale(variant: Variant) -> Self {
        Self {
            n_state: match variant {
                Variant::Kv => 5,
                Variant::Evp => 1,
            },
            arch: RnoArch::full_scale(variant),
            init_seed: 0,
            train: TrainConfig::full_scale(variant),
            n_space: None,
            n_time: None,
        }
    }
}

/// Samples converted for training at the requested resolution.
pub fn training_samples(ds: &Dataset, n_space: Option<usize>, n_time: Option<usize>) -> Result<Vec<RnoSample>> {
    ds.samples
        .iter()
        .map(|s| {
            let ns = n_space.unwrap_or(s.channels[0].len());
            let nt = n_time.unwrap_or(s.strain.len());
            Ok(s.resampled(ns, nt)?.to_rno())
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
struct MetricsRow {
    epoch: usize,
    lr: f64,
    train_loss: f64,
    val_rel_l2: f64,
    val_rest_rate: f64,
}

fn write_history(path: &Path, state: &TrainState) -> Result<()> {
    let rows: Vec<MetricsRow> = state
        .history
        .iter()
        .map(|h| MetricsRow {
            epoch: h.epoch,
            lr: h.lr,
            train_loss: h.train_loss,
            val_rel_l2: h.val_rel_l2,
            val_rest_rate: h.val_rest_rate,
        })
        .collect();
    write_csv(path, &rows)
}

pub const STATE_FILE: &str = "state.json";
pub const BEST_FILE: &str = "best.json";
pub const FINAL_FILE: &str = "final.json";

/// `train`: fit a surrogate; with `out`, checkpoints every epoch and can
/// resume from the saved state.
pub fn run_train(ds: &Dataset, cfg: &TrainRunConfig, out: Option<&Path>, resume: bool) -> Result<TrainState> {
    let variant = ds.kind().variant();
    let data = training_samples(ds, cfg.n_space, cfg.n_time)?;
    let state = match out {
        Some(dir) if resume && dir.join(STATE_FILE).exists() => {
            let s = load_state(&dir.join(STATE_FILE))?;
            if s.model.variant != variant || s.model.n_state != cfg.n_state || s.model.arch() != cfg.arch {
                return Err(Error::Config("saved training state does not match the configuration".into()));
            }
            s
        }
        _ => TrainState::new(RnoModel::init(variant, cfg.n_state, cfg.arch, cfg.init_seed)?),
    };
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_json(&dir.join("train_config.json"), cfg)?;
    }
    let state = train_from(state, &data, &cfg.train, |s| {
        if let Some(dir) = out {
            save_state(&dir.join(STATE_FILE), s)?;
            save_model(&dir.join(BEST_FILE), &s.best)?;
            write_history(&dir.join("metrics.csv"), s)?;
        }
        Ok(())
    })?;
    if let Some(dir) = out {
        save_model(&dir.join(FINAL_FILE), &state.model)?;
        save_model(&dir.join(BEST_FILE), &state.best)?;
        write_history(&dir.join("metrics.csv"), &state)?;
    }
    Ok(state)
}

/// Per-sample errors, with the memoryless baseline alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sample_id: usize,
    pub rel_l2: f64,
    pub rel_linf: f64,
    pub rel_l2_nomem: f64,
    pub rel_linf_nomem: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q10: f64,
    pub q90: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let q = |p: f64| -> f64 {
            if n == 0 {
                return f64::NAN;
            }
            let x = p * (n - 1) as f64;
            let (lo, hi) = (x.floor() as usize, x.ceil() as usize);
            v[lo] + (x - lo as f64) * (v[hi] - v[lo])
        };
        Self {
            count: n,
            mean: v.iter().sum::<f64>() / n.max(1) as f64,
            median: q(0.5),
            q10: q(0.1),
            q90: q(0.9),
            max: v.last().copied().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<EvalRow>,
    pub model: Summary,
    pub no_memory: Summary,
}

pub fn rel_linf(pred: &[f64], truth: &[f64]) -> f64 {
    let num = pred.iter().zip(truth).fold(0.0_f64, |m, (p, t)| m.max((p - t).abs()));
    let den = truth.iter().fold(0.0_f64, |m, t| m.max(t.abs()));
    num / den.max(1e-12)
}

/// Memoryless prediction: effective Kelvin–Voigt law, or the harmonic-mean
/// elastic law for elasto-viscoplastic samples.
pub fn baseline_stress(kind: DatasetKind, s: &DatasetSample) -> Result<Vec<f64>> {
    match kind.variant() {
        Variant::Kv => {
            let mat: KvMaterial = match &s.material {
                Some(MaterialDef::KvPieces(m)) => m.clone().into(),
                _ => {
                    let grid = SpaceGrid::new(s.channels[0].len())?;
                    ContinuousMaterialKV::new(SampledField::new(grid, s.channels[0].clone())?, SampledField::new(grid, s.channels[1].clone())?)?
                        .into()
                }
            };
            no_memory(&mat, &s.strain)
        }
        Variant::Evp => {
            let inv_e = match &s.material {
                Some(MaterialDef::EvpPieces(p)) => p.lengths().iter().zip(&p.channels[EVP_E]).map(|(l, e)| l / e).sum::<f64>(),
                _ => {
                    let inv: Vec<f64> = s.channels[EVP_E].iter().map(|e| 1.0 / e).collect();
                    crate::fields::trapezoid(&inv, 1.0 / (inv.len() - 1) as f64)
                }
            };
            Ok(s.strain.eps.iter().map(|e| e / inv_e).collect())
        }
    }
}

/// `eval`: roll the model out on every sample, optionally at another resolution.
pub fn evaluate_dataset(ds: &Dataset, model: &RnoModel, resolution: Option<(usize, usize)>) -> Result<MetricsReport> {
    if model.variant != ds.kind().variant() {
        return Err(Error::Config("model variant does not match the dataset".into()));
    }
    let rows: Vec<Result<EvalRow>> = ds
        .samples
        .par_iter()
        .map(|s| {
            let s = match resolution {
                Some((ns, nt)) => s.resampled(ns, nt)?,
                None => s.clone(),
            };
            let channels = s.network_channels();
            let ch: Vec<&[f64]> = channels.iter().map(|c| c.as_slice()).collect();
            let pred = rollout(model, &ch, &s.strain)?.sigma_pred;
            let base = baseline_stress(ds.kind(), &s)?;
            Ok(EvalRow {
                sample_id: s.id,
                rel_l2: relative_error_sq(&pred, &s.stress).sqrt(),
                rel_linf: rel_linf(&pred, &s.stress),
                rel_l2_nomem: relative_error_sq(&base, &s.stress).sqrt(),
                rel_linf_nomem: rel_linf(&base, &s.stress),
            })
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let model_err: Vec<f64> = rows.iter().map(|r| r.rel_l2).collect();
    let base_err: Vec<f64> = rows.iter().map(|r| r.rel_l2_nomem).collect();
    Ok(MetricsReport {
        model: Summary::of(&model_err),
        no_memory: Summary::of(&base_err),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionCell {
    pub n_space: usize,
    pub n_time: usize,
    pub mean_rel_l2: f64,
}

/// Mean model error over a grid of evaluation resolutions.
pub fn resolution_table(ds: &Dataset, model: &RnoModel, spaces: &[usize], times: &[usize]) -> Result<Vec<ResolutionCell>> {
    let mut out = Vec::new();
    for &ns in spaces {
        for &nt in times {
            let r = evaluate_dataset(ds, model, Some((ns, nt)))?;
            out.push(ResolutionCell {
                n_space: ns,
                n_time: nt,
                mean_rel_l2: r.model.mean,
            });
        }
    }
    Ok(out)
}

/// Relative residual of the best fit `a * xi` to the averaged plastic
/// strain, per sample, with the scale `a` chosen for each sample.
pub fn plastic_strain_fit(ds: &Dataset, model: &RnoModel) -> Result<Vec<f64>> {
    if model.variant != Variant::Evp || model.n_state != 1 {
        return Err(Error::Config("plastic strain fit needs an elasto-viscoplastic model with one internal variable".into()));
    }
    let w = crate::fields::trapezoid_weights(ds.config.out_time);
    ds.samples
        .iter()
        .map(|s| {
            let p = s
                .plastic_strain
                .as_ref()
                .ok_or_else(|| Error::Config("dataset has no plastic strain".into()))?;
            let channels = s.network_channels();
            let ch: Vec<&[f64]> = channels.iter().map(|c| c.as_slice()).collect();
            let xi = rollout(model, &ch, &s.strain)?.xi.remove(0);
            let num: f64 = xi.iter().zip(p).zip(&w).map(|((x, p), w)| w * x * p).sum();
            let den: f64 = xi.iter().zip(&w).map(|(x, w)| w * x * x).sum();
            let a = if den > 0.0 { num / den } else { 0.0 };
            let fit: Vec<f64> = xi.iter().map(|v| a * v).collect();
            Ok(relative_error_sq(&fit, p).sqrt())
        })
        .collect()
}

pub fn run_eval(ds: &Dataset, model: &RnoModel, cfg: &EvalConfig, out: &Path) -> Result<MetricsReport> {
    ensure_dir(out)?;
    write_json(&out.join("eval_config.json"), cfg)?;
    let report = evaluate_dataset(ds, model, None)?;
    write_csv(&out.join("metrics.csv"), &report.rows)?;
    write_json(&out.join("summary.json"), &(&report.model, &report.no_memory))?;
    if !cfg.spaces.is_empty() && !cfg.times.is_empty() {
        let table = resolution_table(ds, model, &cfg.spaces, &cfg.times)?;
        write_csv(&out.join("resolutions.csv"), &table)?;
    }
    if model.variant == Variant::Evp && model.n_state == 1 && ds.samples.iter().all(|s| s.plastic_strain.is_some()) {
        #[derive(Serialize)]
        struct Row {
            sample_id: usize,
            xi_fit_rel_l2: f64,
        }
        let fit = plastic_strain_fit(ds, model)?;
        let rows: Vec<Row> = ds.samples.iter().zip(fit).map(|(s, f)| Row { sample_id: s.id, xi_fit_rel_l2: f }).collect();
        write_csv(&out.join("xi_fit.csv"), &rows)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Spatial and temporal resolutions of the optional resolution table.
    #[serde(default)]
    pub spaces: Vec<usize>,
    #[serde(default)]
    pub times: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialSpec {
    pub kind: DatasetKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BackendSpec {
    Homogenized {
        #[serde(default = "default_pieces")]
        n_pieces: usize,
    },
    NoMemory,
    Multiscale {
        inv_eps: Vec<usize>,
        #[serde(default = "default_epp")]
        elems_per_period: usize,
    },
    Rno,
}

fn default_pieces() -> usize {
    DEFAULT_PIECES
}

fn default_epp() -> usize {
    DEFAULT_ELEMS_PER_PERIOD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroSimConfig {
    pub amplitude: f64,
    pub wavenumber: f64,
    pub n_space: usize,
    pub n_time: usize,
    pub materials: Vec<MaterialSpec>,
    pub backends: Vec<BackendSpec>,
    /// Resolution of continuous microstructures and of the surrogate's
    /// material input.
    pub material_points: usize,
    /// Write pointwise error maps as CSV.
    #[serde(default)]
    pub error_maps: bool,
}

impl MacroSimConfig {
    pub fn full_scale() -> Self {
        Self {
            amplitude: 100.0,
            wavenumber: 8.0,
            n_space: 201,
            n_time: 501,
            materials: (0..10).map(|seed| MaterialSpec { kind: DatasetKind::Hmc, seed }).collect(),
            backends: vec![
                BackendSpec::Homogenized { n_pieces: DEFAULT_PIECES },
                BackendSpec::NoMemory,
                BackendSpec::Multiscale {
                    inv_eps: vec![5, 10, 20, 40, 80],
                    elems_per_period: DEFAULT_ELEMS_PER_PERIOD,
                },
                BackendSpec::Rno,
            ],
            material_points: 251,
            error_maps: false,
        }
    }
}

/// Error of one backend run against the reference backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroRow {
    pub material: usize,
    pub seed: u64,
    pub backend: String,
    pub inv_eps: Option<usize>,
    pub rel_l2: f64,
}

pub fn macro_material(spec: &MaterialSpec, n_points: usize) -> Result<KvMaterial> {
    match spec.kind {
        DatasetKind::Pc => Ok(sample_pc_kv(spec.seed).into()),
        DatasetKind::Hmc => Ok(sample_hmc_kv(spec.seed, SpaceGrid::new(n_points)?)?.into()),
        _ => Err(Error::Config("macroscale runs need Kelvin–Voigt materials".into())),
    }
}

#[derive(Debug, Clone, Serialize)]
struct MapRow {
    x: f64,
    t: f64,
    value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SolutionRecord {
    material: usize,
    backend: String,
    inv_eps: Option<usize>,
    u: ArrayRef,
}

/// `macro-sim`: every backend on every material; errors are relative to
/// the first listed backend.
pub fn run_macro_sim(cfg: &MacroSimConfig, model: Option<&RnoModel>, out: Option<&Path>) -> Result<Vec<MacroRow>> {
    let problem = MacroProblem {
        amplitude: cfg.amplitude,
        wavenumber: cfg.wavenumber,
        space: SpaceGrid::new(cfg.n_space)?,
        time: TimeGrid::new(cfg.n_time)?,
    };
    if cfg.backends.is_empty() {
        return Err(Error::Config("no backends listed".into()));
    }
    if cfg.backends.contains(&BackendSpec::Rno) && model.is_none() {
        return Err(Error::Config("the surrogate backend needs a checkpoint".into()));
    }
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_json(&dir.join("macro_config.json"), cfg)?;
    }
    let mut rows = Vec::new();
    let mut w = ArrayWriter::new();
    let mut records = Vec::new();
    for (mi, spec) in cfg.materials.iter().enumerate() {
        let mat = macro_material(spec, cfg.material_points)?;
        let mut runs: Vec<(String, Option<usize>, Backend)> = Vec::new();
        for b in &cfg.backends {
            match b {
                BackendSpec::Homogenized { n_pieces } => runs.push(("homogenized".into(), None, Backend::homogenized(&mat, *n_pieces)?)),
                BackendSpec::NoMemory => runs.push(("no_memory".into(), None, Backend::no_memory(&mat)?)),
                BackendSpec::Multiscale { inv_eps, elems_per_period } => {
                    for &k in inv_eps {
                        runs.push((
                            "multiscale".into(),
                            Some(k),
                            Backend::Multiscale {
                                material: mat.clone(),
                                inv_eps: k,
                                elems_per_period: *elems_per_period,
                            },
                        ));
                    }
                }
                BackendSpec::Rno => {
                    let m = model.expect("checked above").clone();
                    runs.push(("rno".into(), None, Backend::rno(m, &mat, cfg.material_points)?));
                }
            }
        }
        let sols: Vec<(String, Option<usize>, SpaceTimeField)> = runs
            .into_iter()
            .map(|(name, k, b)| Ok((name, k, solve_macro(&problem, &b)?.u)))
            .collect::<Result<_>>()?;
        let reference = sols[0].2.clone();
        for (name, k, u) in &sols {
            let map = error_map(u, &reference)?;
            rows.push(MacroRow {
                material: mi,
                seed: spec.seed,
                backend: name.clone(),
                inv_eps: *k,
                rel_l2: map.rel_l2,
            });
            if let Some(dir) = out {
                records.push(SolutionRecord {
                    material: mi,
                    backend: name.clone(),
                    inv_eps: *k,
                    u: w.push("solutions.f64", &u.values, vec![u.n_time, u.n_space]),
                });
                if cfg.error_maps {
                    let xs = problem.space.nodes();
                    let ts = problem.time.nodes();
                    let mut map_rows = Vec::with_capacity(map.abs.values.len());
                    for (ki, &t) in ts.iter().enumerate() {
                        for (i, &x) in xs.iter().enumerate() {
                            map_rows.push(MapRow { x, t, value: map.abs.row(ki)[i] });
                        }
                    }
                    let suffix = k.map(|k| format!("_{k}")).unwrap_or_default();
                    write_csv(&dir.join(format!("error_m{mi}_{name}{suffix}.csv")), &map_rows)?;
                }
            }
        }
    }
    if let Some(dir) = out {
        w.finish(dir)?;
        write_json(&dir.join("solutions.json"), &records)?;
        write_csv(&dir.join("errors.csv"), &rows)?;
    }
    Ok(rows)
}

/// Kernel and mode report of a layered material.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PronyReport {
    pub e_prime: f64,
    pub nu_prime: f64,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub kernel_mass: f64,
}

/// `fit-prony`: analytic law of a layered material, with its kernel sampled
/// on `n_kernel` points of `[0, 1]`.
pub fn run_fit_prony(mat: &PiecewiseMaterialKV, n_kernel: usize, out: Option<&Path>) -> Result<(PronyModel, PronyReport)> {
    let model = fit_prony(mat)?;
    let (e_check, nu_check) = markovian_params(&mat.clone().into())?;
    debug_assert!((e_check - model.e_prime).abs() <= 1e-9 * e_check.abs().max(1.0));
    debug_assert!((nu_check - model.nu_prime).abs() <= 1e-9 * nu_check.abs().max(1.0));
    let report = PronyReport {
        e_prime: model.e_prime,
        nu_prime: model.nu_prime,
        alphas: model.alphas.clone(),
        betas: model.betas.clone(),
        kernel_mass: model.kernel_mass(),
    };
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_json(&dir.join("prony.json"), &report)?;
        #[derive(Serialize)]
        struct Mode {
            alpha: f64,
            beta: f64,
        }
        #[derive(Serialize)]
        struct KernelRow {
            t: f64,
            kernel: f64,
        }
        let modes: Vec<Mode> = model.alphas.iter().zip(&model.betas).map(|(&alpha, &beta)| Mode { alpha, beta }).collect();
        write_csv(&dir.join("modes.csv"), &modes)?;
        let grid = TimeGrid::new(n_kernel.max(2))?;
        let kernel: Vec<KernelRow> = grid.nodes().into_iter().map(|t| KernelRow { t, kernel: model.kernel(t) }).collect();
        write_csv(&dir.join("kernel.csv"), &kernel)?;
    }
    Ok((model, report))
}

/// Resume-aware training state at `dir`, if one was saved.
pub fn saved_state(dir: &Path) -> Result<Option<TrainState>> {
    let p = dir.join(STATE_FILE);
    if p.exists() {
        Ok(Some(load_state(&p)?))
    } else {
        Ok(None)
    }
}
