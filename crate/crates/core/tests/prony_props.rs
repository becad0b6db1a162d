use proptest::prelude::*;
use viscohom::fit_loglog_slope;
use viscohom::materials::{sample_pc_kv, PiecewiseMaterialKV};
use viscohom::prony::{fit_prony, Poles, PronyModel};

fn layered() -> impl Strategy<Value = PiecewiseMaterialKV> {
    (1usize..=12)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(0.01f64..1.0, n),
                prop::collection::vec(0.1f64..=1.0, n),
                prop::collection::vec(0.1f64..=1.0, n),
            )
        })
        .prop_map(|(w, e, nu)| {
            let total: f64 = w.iter().sum();
            let lengths: Vec<f64> = w.iter().map(|x| x / total).collect();
            PiecewiseMaterialKV::from_lengths(&lengths, e, nu).unwrap()
        })
}

fn sorted_ratios(mat: &PiecewiseMaterialKV) -> Vec<f64> {
    let mut r: Vec<f64> = mat.e_vals.iter().zip(&mat.nu_vals).map(|(e, n)| e / n).collect();
    r.sort_by(f64::total_cmp);
    r
}

fn beta_bound(mat: &PiecewiseMaterialKV) -> f64 {
    let r = sorted_ratios(mat);
    let inv_nu: f64 = mat.lengths().iter().zip(&mat.nu_vals).map(|(d, n)| d / n).sum();
    (r[r.len() - 1] - r[0]).powi(2) / inv_nu
}

/// Monomial coefficients of `sum_i w_i prod_{j != i} (r_j - s)`, lowest degree first.
fn q_coefficients(poles: &Poles) -> Vec<f64> {
    let n = poles.ratios.len();
    let mut total = vec![0.0; n];
    for i in 0..n {
        let mut c = vec![poles.weights[i]];
        for j in (0..n).filter(|&j| j != i) {
            let mut next = vec![0.0; c.len() + 1];
            for (d, v) in c.iter().enumerate() {
                next[d] += v * poles.ratios[j];
                next[d + 1] -= v;
            }
            c = next;
        }
        for (t, v) in total.iter_mut().zip(c) {
            *t += v;
        }
    }
    total
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn roots_interleave_ratios(mat in layered()) {
        let m = fit_prony(&mat).unwrap();
        let poles = Poles::from_material(&mat);
        prop_assert_eq!(m.n_modes() + 1, poles.ratios.len());
        for (l, a) in m.alphas.iter().enumerate() {
            prop_assert!(poles.ratios[l] < *a && *a < poles.ratios[l + 1], "root {} outside ({}, {})", a, poles.ratios[l], poles.ratios[l + 1]);
        }
    }

    #[test]
    fn root_residual_is_tiny(mat in layered()) {
        let m = fit_prony(&mat).unwrap();
        let poles = Poles::from_material(&mat);
        let coeffs = q_coefficients(&poles);
        for a in &m.alphas {
            // Largest monomial term at the root.
            let scale = coeffs.iter().enumerate().fold(0.0_f64, |acc, (k, c)| acc.max((c * a.powi(k as i32)).abs()));
            let (q, _) = poles.q_polynomial(*a);
            prop_assert!(q.abs() <= 1e-12 * scale, "residual {} vs scale {}", q, scale);
        }
    }

    #[test]
    fn betas_are_nonnegative_and_bounded(mat in layered()) {
        let m = fit_prony(&mat).unwrap();
        let bound = beta_bound(&mat);
        for b in &m.betas {
            prop_assert!(*b >= 0.0);
            prop_assert!(*b <= bound * (1.0 + 1e-12), "beta {} above {}", b, bound);
        }
    }

    #[test]
    fn permutation_invariant(mat in layered(), rot in 0usize..12, flip in any::<bool>()) {
        let n = mat.n_pieces();
        let mut idx: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        if flip {
            idx.reverse();
        }
        let lengths = mat.lengths();
        let permuted = PiecewiseMaterialKV::from_lengths(
            &idx.iter().map(|&i| lengths[i]).collect::<Vec<_>>(),
            idx.iter().map(|&i| mat.e_vals[i]).collect(),
            idx.iter().map(|&i| mat.nu_vals[i]).collect(),
        )
        .unwrap();
        // Rebuilding breakpoints from permuted lengths perturbs them by rounding.
        let (a, b) = (fit_prony(&mat).unwrap(), fit_prony(&permuted).unwrap());
        prop_assert_eq!(a.n_modes(), b.n_modes());
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-13 * x.abs().max(1e-3);
        prop_assert!(close(a.e_prime, b.e_prime) && close(a.nu_prime, b.nu_prime));
        let beta_scale = a.betas.iter().fold(0.0_f64, |m, v| m.max(*v));
        for l in 0..a.n_modes() {
            prop_assert!(close(a.alphas[l], b.alphas[l]), "{:?} vs {:?}", a, b);
            prop_assert!((a.betas[l] - b.betas[l]).abs() <= 1e-12 * beta_scale, "{:?} vs {:?}", a, b);
        }
    }

    #[test]
    fn equal_ratios_have_no_kernel(
        c in 0.2f64..5.0,
        nu in prop::collection::vec(0.1f64..=1.0, 1..10),
    ) {
        let n = nu.len();
        let e: Vec<f64> = nu.iter().map(|v| c * v).collect();
        let mat = PiecewiseMaterialKV::from_lengths(&vec![1.0 / n as f64; n], e, nu).unwrap();
        let m = fit_prony(&mat).unwrap();
        prop_assert_eq!(m.n_modes(), 0);
        prop_assert_eq!(m.kernel(0.3), 0.0);
    }
}

fn distance(a: &PronyModel, b: &PronyModel) -> f64 {
    let mut d = (a.e_prime - b.e_prime).abs() + (a.nu_prime - b.nu_prime).abs();
    for (x, y) in a.alphas.iter().zip(&b.alphas) {
        d += (x - y).abs();
    }
    for (x, y) in a.betas.iter().zip(&b.betas) {
        d += (x - y).abs();
    }
    d
}

#[test]
fn parameters_move_linearly_with_a_piece_value() {
    let deltas = [1e-2, 1e-3, 1e-4, 1e-5];
    for seed in 0..5 {
        let mat = sample_pc_kv(seed);
        let base = fit_prony(&mat).unwrap();
        for channel in 0..2 {
            let changes: Vec<f64> = deltas
                .iter()
                .map(|&d| {
                    let mut m = mat.clone();
                    let v = if channel == 0 { &mut m.e_vals } else { &mut m.nu_vals };
                    v[0] += d;
                    let p = fit_prony(&m).unwrap();
                    assert_eq!(p.n_modes(), base.n_modes());
                    distance(&p, &base)
                })
                .collect();
            let points: Vec<(f64, f64)> = deltas.iter().copied().zip(changes).collect();
            let slope = fit_loglog_slope(&points);
            assert!((slope - 1.0).abs() <= 0.15, "seed {seed} channel {channel}: slope {slope}");
        }
    }
}

#[test]
fn reordering_grid_aligned_pieces_is_bit_identical() {
    for seed in 0..50 {
        let mat = sample_pc_kv(seed);
        let mut rev = mat.clone();
        rev.e_vals.reverse();
        rev.nu_vals.reverse();
        rev.breaks = mat.breaks.iter().rev().map(|b| 1.0 - b).collect();
        let lengths_match = {
            let mut a = mat.lengths();
            let mut b = rev.lengths();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            a == b
        };
        if lengths_match {
            assert_eq!(fit_prony(&mat).unwrap(), fit_prony(&rev).unwrap(), "seed {seed}");
        }
    }
}
