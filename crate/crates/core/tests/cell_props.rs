use viscohom::cell_solver::{evp_averages, kv_average_stress, solve_kv_dirichlet};
use viscohom::fields::{SampledField, SpaceGrid, TimeGrid};
use viscohom::materials::{sample_pc_kv, sample_strain, ContinuousMaterialKV, KvMaterial, MaterialEVP, StrainProgram};
use viscohom::rno::relative_error_sq;

fn smooth_material(grid: SpaceGrid) -> KvMaterial {
    let tau = std::f64::consts::TAU;
    let e = SampledField::from_fn(grid, |y| 0.5 + 0.3 * (tau * y).sin()).unwrap();
    let nu = SampledField::from_fn(grid, |y| 0.6 + 0.2 * (tau * y).cos() + 0.1 * (2.0 * tau * y).sin()).unwrap();
    ContinuousMaterialKV::new(e, nu).unwrap().into()
}

#[test]
fn stress_is_uniform_in_the_cell() {
    let space = SpaceGrid::new(251).unwrap();
    let time = TimeGrid::new(501).unwrap();
    for seed in 0..5 {
        let mat: KvMaterial = sample_pc_kv(seed).into();
        let sol = solve_kv_dirichlet(&mat, &sample_strain(seed, time), space, time).unwrap();
        let peak = sol.sigma_bar.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
        assert!(sol.max_stress_spread / peak < 1e-6, "seed {seed}: spread {}", sol.max_stress_spread / peak);
    }
}

#[test]
fn refinement_changes_smooth_response_little() {
    let coarse_t = TimeGrid::new(2501).unwrap();
    let fine_t = TimeGrid::new(5001).unwrap();
    for seed in 0..3 {
        let coarse = kv_average_stress(
            &smooth_material(SpaceGrid::new(251).unwrap()),
            &sample_strain(seed, coarse_t),
            SpaceGrid::new(251).unwrap(),
            coarse_t,
        )
        .unwrap();
        let fine = kv_average_stress(
            &smooth_material(SpaceGrid::new(501).unwrap()),
            &sample_strain(seed, fine_t),
            SpaceGrid::new(501).unwrap(),
            fine_t,
        )
        .unwrap();
        let fine_on_coarse: Vec<f64> = fine.iter().step_by(2).copied().collect();
        let err = relative_error_sq(&coarse, &fine_on_coarse).sqrt();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

/// Classical RK4 on the scalar stress ODE of a homogeneous bar.
fn scalar_evp(e: f64, eps_p0: f64, sigma_y: f64, n: f64, strain: &StrainProgram, out: TimeGrid, refine: usize) -> Vec<f64> {
    let rate = |t: f64, s: f64| -> f64 {
        let (_, de) = strain.eval(t);
        e * (de - eps_p0 * s.signum() * (s.abs() / sigma_y).powf(n))
    };
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

#[test]
fn homogeneous_evp_matches_scalar_ode() {
    let time = TimeGrid::new(5001).unwrap();
    let space = SpaceGrid::new(11).unwrap();
    for (seed, params) in [(0u64, (5.0, 1.0, 0.3, 4.0)), (1, (2.0, 0.5, 0.2, 10.0)), (2, (8.0, 2.0, 0.8, 1.5))] {
        let (e, p0, sy, n) = params;
        let strain = sample_strain(seed, time);
        let sol = evp_averages(&MaterialEVP::homogeneous(e, p0, sy, n), &strain, space, time).unwrap();
        let oracle = scalar_evp(e, p0, sy, n, &strain, time, 10);
        let err = relative_error_sq(&sol.sigma_bar, &oracle).sqrt();
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}
