//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset with `ACCEPTANCE_ONLY=1,2,5`.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng;

use viscohom::cell_solver::{evp_averages, kv_average_stress, solve_kv_dirichlet, solve_kv_periodic};
use viscohom::fields::{sample_grf, seeded_rng, GrfSpec, SampledField, SpaceGrid, TimeGrid};
use viscohom::fit_loglog_slope;
use viscohom::fnm::{fnm_backward, fnm_forward, fnm_init, fnm_lift, FnmConfig, FnmInput, FnmParams};
use viscohom::harness::{
    evaluate_dataset, generate_dataset, plastic_strain_fit, run_gen_data, run_train, training_samples, DatasetKind,
    GenDataConfig, TrainRunConfig,
};
use viscohom::macro_sim::{error_map, solve_macro, Backend, MacroProblem, DEFAULT_ELEMS_PER_PERIOD, DEFAULT_PIECES};
use viscohom::materials::{
    l1_distance_to_pc, pc_discretize_field, sample_hmc_kv, sample_pc_kv, sample_strain, total_variation, KvMaterial,
    MaterialEVP, PiecewiseMaterialKV, StrainProgram,
};
use viscohom::prony::{evaluate_state_space, fit_prony, pc_constitutive, Poles, PronyModel};
use viscohom::rno::{evaluate, loss_and_grad, relative_error_sq, RnoArch, RnoModel, RnoSample, TrainConfig, Variant};

/// Desk-scale training setup shared by the training criteria.
const DESK_SPACE: usize = 51;
const DESK_TIME: usize = 101;
const DESK_SOLVE_SPACE: usize = 251;
const DESK_SOLVE_TIME: usize = 1001;
const DESK_EPOCHS: usize = 50;
const DESK_BATCH: usize = 4;
const DESK_LR0: f64 = 3e-3;
const KV_TRAIN: usize = 256;
const KV_TEST: usize = 64;
const EVP_TRAIN: usize = 128;
const EVP_TEST: usize = 32;
const TEST_SEED: u64 = 1_000_000;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    relative_error_sq(a, b).sqrt()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let space = SpaceGrid::new(501).unwrap();
    let time = TimeGrid::new(5001).unwrap();
    let mut errs = Vec::new();
    for i in 0..50u64 {
        let seed = 5000 + i;
        let mat = sample_pc_kv(seed);
        let strain = sample_strain(seed, time);
        let exact = evaluate_state_space(&fit_prony(&mat).unwrap(), &strain).sigma;
        let fem = solve_kv_dirichlet(&mat.into(), &strain, space, time).unwrap().sigma_bar;
        errs.push(rel_l2(&fem, &exact));
    }
    let secs = start.elapsed().as_secs_f64();
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    let max = errs.iter().fold(0.0_f64, |m, e| m.max(*e));
    check(mean < 2e-3 && max < 1e-2 && secs < 300.0, format!("mean {mean:.2e} max {max:.2e} in {secs:.0}s"))
}

fn worked_kernel() -> Outcome {
    let mat = PiecewiseMaterialKV::new(vec![0.5], vec![1.0, 2.0], vec![1.0, 1.0]).unwrap();
    let m = fit_prony(&mat).unwrap();
    let (a, b) = (m.alphas[0], m.betas[0]);
    check(
        m.n_modes() == 1 && (a - 1.5).abs() <= 1e-12 && (b - 0.25).abs() <= 1e-12,
        format!("alpha {a:.15} beta {b:.15}"),
    )
}

fn permuted(mat: &PiecewiseMaterialKV, seed: u64) -> PiecewiseMaterialKV {
    let n = mat.n_pieces();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(seed, 7);
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    let lengths = mat.lengths();
    PiecewiseMaterialKV::from_lengths(
        &idx.iter().map(|&i| lengths[i]).collect::<Vec<_>>(),
        idx.iter().map(|&i| mat.e_vals[i]).collect(),
        idx.iter().map(|&i| mat.nu_vals[i]).collect(),
    )
    .unwrap()
}

fn same_model(a: &PronyModel, b: &PronyModel) -> bool {
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-13 * x.abs().max(1e-3);
    let beta_scale = a.betas.iter().fold(0.0_f64, |m, v| m.max(*v));
    a.n_modes() == b.n_modes()
        && close(a.e_prime, b.e_prime)
        && close(a.nu_prime, b.nu_prime)
        && a.alphas.iter().zip(&b.alphas).all(|(x, y)| close(*x, *y))
        && a.betas.iter().zip(&b.betas).all(|(x, y)| (x - y).abs() <= 1e-12 * beta_scale)
}

fn structural_invariants() -> Outcome {
    let mut violations = [0usize; 5];
    for seed in 0..1000u64 {
        let mat = sample_pc_kv(seed);
        let m = fit_prony(&mat).unwrap();
        let poles = Poles::from_material(&mat);
        if m.n_modes() + 1 != poles.ratios.len()
            || m.alphas.iter().enumerate().any(|(l, a)| !(poles.ratios[l] < *a && *a < poles.ratios[l + 1]))
        {
            violations[0] += 1;
        }
        if m.betas.iter().any(|b| *b < 0.0) {
            violations[1] += 1;
        }
        let inv_nu: f64 = mat.lengths().iter().zip(&mat.nu_vals).map(|(d, n)| d / n).sum();
        let (lo, hi) = (poles.ratios[0], poles.ratios[poles.ratios.len() - 1]);
        let bound = (hi - lo).powi(2) / inv_nu;
        if m.betas.iter().any(|b| *b > bound * (1.0 + 1e-12)) {
            violations[2] += 1;
        }
        if !same_model(&m, &fit_prony(&permuted(&mat, seed)).unwrap()) {
            violations[3] += 1;
        }
        let c = 0.5 + (seed % 7) as f64 * 0.3;
        let proportional = PiecewiseMaterialKV {
            e_vals: mat.nu_vals.iter().map(|v| c * v).collect(),
            ..mat.clone()
        };
        let p = fit_prony(&proportional).unwrap();
        if p.n_modes() != 0 || p.kernel(0.0) != 0.0 {
            violations[4] += 1;
        }
    }
    let total: usize = violations.iter().sum();
    check(
        total == 0,
        format!(
            "violations: interleaving {}, sign {}, bound {}, permutation {}, equal-ratio {}",
            violations[0], violations[1], violations[2], violations[3], violations[4]
        ),
    )
}

fn pc_convergence() -> Outcome {
    let space = SpaceGrid::new(501).unwrap();
    let time = TimeGrid::new(5001).unwrap();
    let mut worst_final: f64 = 0.0;
    let mut non_monotone = 0;
    for seed in 0..10u64 {
        let mat = sample_hmc_kv(seed, space).unwrap();
        let strain = sample_strain(seed, time);
        let truth = kv_average_stress(&mat.clone().into(), &strain, space, time).unwrap();
        let scale = max_abs(&truth);
        let err = |n: usize| max_abs(&diff(&pc_constitutive(&mat, n, &strain).unwrap(), &truth)) / scale;
        let e: Vec<f64> = [10, 40, 160].iter().map(|&n| err(n)).collect();
        if !(e[1] <= e[0] && e[2] <= e[1]) {
            non_monotone += 1;
        }
        worst_final = worst_final.max(err(250));
    }
    check(
        non_monotone == 0 && worst_final < 1e-2,
        format!("non-monotone {non_monotone}/10, worst relative Linf at 250 pieces {worst_final:.2e}"),
    )
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn bv_bound() -> Outcome {
    let grid = SpaceGrid::new(2001).unwrap();
    let mut fields: Vec<SampledField> = Vec::new();
    for seed in 0..10u64 {
        fields.push(sample_hmc_kv(seed, grid).unwrap().e);
    }
    for seed in 0..10u64 {
        let rho = [0.01, 0.03, 0.1, 0.3][seed as usize % 4];
        fields.push(sample_grf(&GrfSpec::new(rho, 0.5), grid, 100 + seed).unwrap());
    }
    let mut violations = 0;
    let mut tightest = f64::INFINITY;
    for f in &fields {
        let tv = total_variation(f.values(), false);
        for m in [5usize, 20, 80] {
            let pc = pc_discretize_field(f, m);
            let l1 = l1_distance_to_pc(f.values(), &pc);
            let bound = tv / m as f64;
            if l1 > bound + 1e-8 {
                violations += 1;
            }
            tightest = tightest.min(bound - l1);
        }
    }
    check(violations == 0, format!("violations {violations}/60, smallest slack {tightest:.2e}"))
}

fn periodic_equivalence() -> Outcome {
    let space = SpaceGrid::new(501).unwrap();
    let time = TimeGrid::new(1001).unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mat: KvMaterial = if seed < 10 {
            sample_pc_kv(seed).into()
        } else {
            sample_hmc_kv(seed, space).unwrap().into()
        };
        let strain = sample_strain(seed, time);
        let d = solve_kv_dirichlet(&mat, &strain, space, time).unwrap();
        let p = solve_kv_periodic(&mat, &strain, space, time).unwrap();
        worst = worst.max(rel_l2(&p.sigma_bar, &d.sigma_bar));
    }
    check(worst < 1e-4, format!("worst relative L2 {worst:.2e}"))
}

fn lipschitz_in_material() -> Outcome {
    let space = SpaceGrid::new(251).unwrap();
    let time = TimeGrid::new(501).unwrap();
    let deltas = [1e-1, 1e-2, 1e-3, 1e-4];
    let mut slopes = Vec::new();
    let mut ratio_max: f64 = 0.0;
    for seed in 0..10u64 {
        let mat = sample_pc_kv(seed);
        let strain = sample_strain(seed, time);
        let mut rng = seeded_rng(seed, 3);
        // Directions scale with the local value so every piece stays well inside its range.
        let de: Vec<f64> = mat.e_vals.iter().map(|e| e * rng.random_range(-0.5..0.5)).collect();
        let dv: Vec<f64> = mat.nu_vals.iter().map(|v| v * rng.random_range(-0.5..0.5)).collect();
        let l2 = |d: &[f64]| mat.lengths().iter().zip(d).map(|(l, x)| l * x * x).sum::<f64>().sqrt();
        let stress_at = |s: f64| {
            let pert = PiecewiseMaterialKV {
                e_vals: mat.e_vals.iter().zip(&de).map(|(e, d)| e + s * d).collect(),
                nu_vals: mat.nu_vals.iter().zip(&dv).map(|(v, d)| v + s * d).collect(),
                ..mat.clone()
            };
            kv_average_stress(&pert.into(), &strain, space, time).unwrap()
        };
        // Symmetric pairs E + s de and E - s de, a distance 2 s apart along the direction.
        let pts: Vec<(f64, f64)> = deltas
            .iter()
            .map(|&s| {
                let size = 2.0 * s * (l2(&de) + l2(&dv));
                (size, max_abs(&diff(&stress_at(s), &stress_at(-s))))
            })
            .collect();
        ratio_max = pts.iter().fold(ratio_max, |m, (d, x)| m.max(x / d));
        slopes.push(fit_loglog_slope(&pts));
    }
    let worst = slopes.iter().fold(0.0_f64, |m, s| m.max((s - 1.0).abs()));
    let lo = slopes.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = slopes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    check(worst <= 0.1, format!("slopes {lo:.3}..{hi:.3}, largest quotient {ratio_max:.2}"))
}

fn fnm_loss(p: &FnmParams, input: &FnmInput, v: &[f64], g: &[f64]) -> f64 {
    let lifted = fnm_lift(p, input).unwrap();
    fnm_forward(p, input, &lifted, v).unwrap().0.iter().zip(g).map(|(a, b)| a * b).sum()
}

fn fd_error(an: f64, fd: f64) -> f64 {
    (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6)
}

fn gradient_checks() -> Outcome {
    let config = FnmConfig {
        d_in_f: 2,
        d_in_v: 3,
        d_out_v: 2,
        width: 8,
        n_layers: 3,
        n_modes: 4,
        d_proj_fv: 8,
    };
    let p = fnm_init(config, 17).unwrap();
    let mut rng = seeded_rng(23, 0);
    let fields: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|_| (0..2).map(|_| (0..33).map(|_| rng.random_range(0.1..1.0)).collect()).collect())
        .collect();
    let views: Vec<Vec<&[f64]>> = fields.iter().map(|s| s.iter().map(|c| c.as_slice()).collect()).collect();
    let input = FnmInput::new(&views, config.n_modes).unwrap();
    let v: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let lifted = fnm_lift(&p, &input).unwrap();
    let (_, tape) = fnm_forward(&p, &input, &lifted, &v).unwrap();
    let mut grad = vec![0.0; p.data.len()];
    fnm_backward(&p, &input, &tape, &g, &mut grad).unwrap();
    let h = 1e-6;
    let mut worst_fnm: f64 = 0.0;
    for _ in 0..20 {
        let i = rng.random_range(0..p.data.len());
        let (mut a, mut b) = (p.clone(), p.clone());
        a.data[i] += h;
        b.data[i] -= h;
        let fd = (fnm_loss(&a, &input, &v, &g) - fnm_loss(&b, &input, &v, &g)) / (2.0 * h);
        worst_fnm = worst_fnm.max(fd_error(grad[i], fd));
    }

    let time = TimeGrid::new(51).unwrap();
    let samples: Vec<RnoSample> = (0..2u64)
        .map(|s| {
            let mat = sample_pc_kv(s);
            let strain = sample_strain(s, time);
            let stress = evaluate_state_space(&fit_prony(&mat).unwrap(), &strain).sigma;
            let (e, nu) = KvMaterial::from(mat).fields(SpaceGrid::new(51).unwrap());
            RnoSample {
                channels: vec![e.into_values(), nu.into_values()],
                strain,
                stress,
            }
        })
        .collect();
    let refs: Vec<&RnoSample> = samples.iter().collect();
    let arch = RnoArch {
        width: 8,
        n_layers: 2,
        n_modes: 4,
        d_proj_fv: 8,
    };
    let model = RnoModel::init(Variant::Kv, 3, arch, 5).unwrap();
    let (_, grads) = loss_and_grad(&model, &refs, true).unwrap();
    let loss = |m: &RnoModel| loss_and_grad(m, &refs, true).unwrap().0.total;
    let mut worst_rollout: f64 = 0.0;
    for k in 0..20 {
        let on_f = k % 2 == 0;
        let n = if on_f { model.f.data.len() } else { model.g.data.len() };
        let i = rng.random_range(0..n);
        let (mut a, mut b) = (model.clone(), model.clone());
        let an = if on_f {
            a.f.data[i] += h;
            b.f.data[i] -= h;
            grads.f[i]
        } else {
            a.g.data[i] += h;
            b.g.data[i] -= h;
            grads.g[i]
        };
        worst_rollout = worst_rollout.max(fd_error(an, (loss(&a) - loss(&b)) / (2.0 * h)));
    }
    check(
        worst_fnm < 1e-5 && worst_rollout < 1e-4,
        format!("network {worst_fnm:.2e}, 51-step rollout {worst_rollout:.2e}"),
    )
}

fn desk_data(kind: DatasetKind, n: usize, seed: u64) -> viscohom::harness::Dataset {
    let solve_space = if kind.variant() == Variant::Evp { 101 } else { DESK_SOLVE_SPACE };
    generate_dataset(&GenDataConfig {
        kind,
        n_samples: n,
        seed,
        solve_space,
        solve_time: DESK_SOLVE_TIME,
        out_space: DESK_SPACE,
        out_time: DESK_TIME,
    })
    .unwrap()
}

fn desk_config(variant: Variant, n_state: usize, penalty: bool) -> TrainRunConfig {
    TrainRunConfig {
        n_state,
        arch: RnoArch::full_scale(variant),
        init_seed: 0,
        train: TrainConfig {
            epochs: DESK_EPOCHS,
            batch: DESK_BATCH,
            lr0: DESK_LR0,
            penalty,
            ..TrainConfig::full_scale(variant)
        },
        n_space: None,
        n_time: None,
    }
}

struct KvRuns {
    with_penalty: RnoModel,
    without_penalty: RnoModel,
    test: Vec<RnoSample>,
    test_set: viscohom::harness::Dataset,
    minutes: f64,
}

fn kv_runs() -> KvRuns {
    let start = Instant::now();
    let train = desk_data(DatasetKind::Pc, KV_TRAIN, 0);
    let test_set = desk_data(DatasetKind::Pc, KV_TEST, TEST_SEED);
    let with_penalty = run_train(&train, &desk_config(Variant::Kv, 5, true), None, false).unwrap().best;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let without_penalty = run_train(&train, &desk_config(Variant::Kv, 5, false), None, false).unwrap().best;
    KvRuns {
        with_penalty,
        without_penalty,
        test: training_samples(&test_set, None, None).unwrap(),
        test_set,
        minutes,
    }
}

fn desk_training(runs: &KvRuns) -> Outcome {
    let report = evaluate_dataset(&runs.test_set, &runs.with_penalty, None).unwrap();
    let (model, base) = (report.model.mean, report.no_memory.mean);
    check(
        model < 0.10 && model < base,
        format!(
            "held-out mean relative L2 {model:.4} vs no-memory {base:.4} ({} test samples, {:.1} min incl. data)",
            report.rows.len(),
            runs.minutes
        ),
    )
}

fn penalty_ablation(runs: &KvRuns) -> Outcome {
    let refs: Vec<&RnoSample> = runs.test.iter().collect();
    let (_, with) = evaluate(&runs.with_penalty, &refs, 32).unwrap();
    let (_, without) = evaluate(&runs.without_penalty, &refs, 32).unwrap();
    check(
        with * 10.0 <= without,
        format!("mean |G(0,0)| with penalty {with:.3e}, without {without:.3e}, ratio {:.1}", without / with),
    )
}

fn multiscale_convergence() -> Outcome {
    let problem = MacroProblem::default_grids();
    let mut slopes = Vec::new();
    for seed in 0..5u64 {
        let mat: KvMaterial = sample_hmc_kv(seed, SpaceGrid::new(501).unwrap()).unwrap().into();
        let reference = solve_macro(&problem, &Backend::homogenized(&mat, DEFAULT_PIECES).unwrap()).unwrap();
        let pts: Vec<(f64, f64)> = [5usize, 10, 20, 40, 80]
            .iter()
            .map(|&k| {
                let b = Backend::Multiscale {
                    material: mat.clone(),
                    inv_eps: k,
                    elems_per_period: DEFAULT_ELEMS_PER_PERIOD,
                };
                let s = solve_macro(&problem, &b).unwrap();
                (k as f64, error_map(&s.u, &reference.u).unwrap().rel_l2)
            })
            .collect();
        slopes.push(fit_loglog_slope(&pts));
    }
    let ok = slopes.iter().all(|s| *s > -1.4 && *s < -0.6);
    check(ok, format!("slopes {}", slopes.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>().join(", ")))
}

fn scalar_evp(params: (f64, f64, f64, f64), strain: &StrainProgram, out: TimeGrid, refine: usize) -> Vec<f64> {
    let (e, p0, sy, n) = params;
    let rate = |t: f64, s: f64| e * (strain.eval(t).1 - p0 * s.signum() * (s.abs() / sy).powf(n));
    let dt = out.dt() / refine as f64;
    let mut s = 0.0;
    let mut sig = vec![0.0];
    for k in 0..out.n_steps() - 1 {
        for j in 0..refine {
            let t = out.node(k) + j as f64 * dt;
            let k1 = rate(t, s);
            let k2 = rate(t + 0.5 * dt, s + 0.5 * dt * k1);
            let k3 = rate(t + 0.5 * dt, s + 0.5 * dt * k2);
            let k4 = rate(t + dt, s + dt * k3);
            s += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        sig.push(s);
    }
    sig
}

fn evp_sanity() -> Outcome {
    let time = TimeGrid::new(5001).unwrap();
    let space = SpaceGrid::new(11).unwrap();
    let mut ode: f64 = 0.0;
    for (seed, params) in [(0u64, (5.0, 1.0, 0.3, 4.0)), (1, (2.0, 0.5, 0.2, 10.0)), (2, (8.0, 2.0, 0.8, 20.0))] {
        let strain = sample_strain(seed, time);
        let (e, p0, sy, n) = params;
        let sol = evp_averages(&MaterialEVP::homogeneous(e, p0, sy, n), &strain, space, time).unwrap();
        ode = ode.max(rel_l2(&sol.sigma_bar, &scalar_evp(params, &strain, time, 10)));
    }

    let mut elastic: f64 = 0.0;
    let grid = SpaceGrid::new(101).unwrap();
    let short = TimeGrid::new(501).unwrap();
    for seed in 0..5u64 {
        let MaterialEVP::Piecewise(mut pieces) = viscohom::materials::sample_evp(seed, viscohom::materials::EvpKind::Piecewise, grid)
        else {
            unreachable!()
        };
        pieces.channels[1].iter_mut().for_each(|v| *v = 0.0);
        let compliance: f64 = pieces.lengths().iter().zip(&pieces.channels[0]).map(|(l, e)| l / e).sum();
        let strain = sample_strain(seed, short);
        let sol = evp_averages(&MaterialEVP::Piecewise(pieces), &strain, grid, short).unwrap();
        let law: Vec<f64> = strain.eps.iter().map(|e| e / compliance).collect();
        elastic = elastic.max(rel_l2(&sol.sigma_bar, &law));
    }

    let train = desk_data(DatasetKind::PcEvp, EVP_TRAIN, 0);
    let test = desk_data(DatasetKind::PcEvp, EVP_TEST, TEST_SEED);
    let model = run_train(&train, &desk_config(Variant::Evp, 1, false), None, false).unwrap().best;
    let fit = plastic_strain_fit(&test, &model).unwrap();
    let mean_fit = fit.iter().sum::<f64>() / fit.len() as f64;
    let stress = evaluate_dataset(&test, &model, None).unwrap();
    check(
        ode < 1e-5 && elastic < 1e-10 && mean_fit < 0.2,
        format!(
            "ODE {ode:.2e}, elastic {elastic:.2e}, internal-variable fit residual {mean_fit:.4} (stress error {:.4})",
            stress.model.mean
        ),
    )
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = GenDataConfig {
        kind: DatasetKind::Pc,
        n_samples: 32,
        seed: 77,
        solve_space: 101,
        solve_time: 401,
        out_space: 51,
        out_time: 51,
    };
    let mut train_cfg = desk_config(Variant::Kv, 2, true);
    train_cfg.arch.width = 8;
    train_cfg.train.epochs = 3;
    for run in ["a", "b"] {
        let data = tmp.path().join(format!("data_{run}"));
        let ds = run_gen_data(&cfg, &data).unwrap();
        run_train(&ds, &train_cfg, Some(&tmp.path().join(format!("train_{run}"))), false).unwrap();
    }
    let same_data = dir_bytes(&tmp.path().join("data_a")) == dir_bytes(&tmp.path().join("data_b"));
    let same_train = dir_bytes(&tmp.path().join("train_a")) == dir_bytes(&tmp.path().join("train_b"));
    check(same_data && same_train, format!("dataset identical {same_data}, training outputs identical {same_train}"))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    // Filters and flags passed by the test runner are ignored.
    let mut failures = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {n:>2} {name}: {detail} [{secs:.0}s]");
    };
    report(1, "analytic vs numerical cell law", &mut oracle_equivalence);
    report(2, "two-piece kernel", &mut worked_kernel);
    report(3, "kernel structure on 1000 materials", &mut structural_invariants);
    report(4, "piecewise-constant approximation", &mut pc_convergence);
    report(5, "BV approximation bound", &mut bv_bound);
    report(6, "periodic vs Dirichlet cell problem", &mut periodic_equivalence);
    report(7, "Lipschitz dependence on material", &mut lipschitz_in_material);
    report(8, "gradient checks", &mut gradient_checks);
    let runs = (wanted(9) || wanted(10)).then(kv_runs);
    if let Some(runs) = &runs {
        report(9, "desk-scale training", &mut || desk_training(runs));
        report(10, "rest-state penalty", &mut || penalty_ablation(runs));
    }
    report(11, "multiscale convergence", &mut multiscale_convergence);
    report(12, "elasto-viscoplastic checks", &mut evp_sanity);
    report(13, "determinism", &mut determinism);
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
