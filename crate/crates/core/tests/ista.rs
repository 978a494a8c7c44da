mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use sparselab::coherence::random_instance;
use sparselab::data::ProblemInstance;
use sparselab::ista::{self, IstaConfig, StepSize};
use sparselab::{Error, Tensor};

fn effective(inst: &ProblemInstance, psi: &Tensor) -> Vec<Vec<f64>> {
    mm(&rows_of(&inst.phi), &rows_of(psi))
}

#[test]
fn spectral_norm_matches_jacobi() {
    let mut r = rng(1);
    for _ in 0..20 {
        let a = gaussian(&mut r, &[5, 8], 1.0);
        let want = spectral_norm_oracle(&rows_of(&a));
        let got = ista::spectral_norm(&a).unwrap();
        assert!(((got - want) / want).abs() < 1e-8, "{got} vs {want}");
    }
    let d = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
    // the power iteration stops at a 1e-10 relative change
    assert!((ista::spectral_norm(&d).unwrap() - 3.0).abs() < 1e-8);
    assert!((ista::spectral_norm(&Tensor::identity(4)).unwrap() - 1.0).abs() < 1e-8);
    assert!(matches!(ista::spectral_norm(&Tensor::zeros(&[2, 3])), Err(Error::ZeroMatrix)));
}

#[test]
fn zero_measurement_stays_at_origin() {
    let mut r = rng(2);
    let (mut inst, psi) = random_instance(&mut r, 6, 8, 10, 0.3);
    inst.y = Tensor::zeros(&[6]);
    for t in [0, 1, 50] {
        let cfg = IstaConfig {
            iterations: t,
            theta: 0.1,
            gamma: StepSize::Auto,
        };
        let run = ista::ista_solve(&inst, &psi, &cfg).unwrap();
        assert!(run.x.iter().all(|&v| v == 0.0));
        assert_eq!(run.trajectory.len(), t + 1);
    }
}

#[test]
fn orthonormal_single_step_is_a_threshold() {
    let mut r = rng(3);
    let n = 6;
    // signed permutation as Ψ, identity as Φ
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, r.random_range(0..=i));
    }
    let mut psi = Tensor::zeros(&[n, n]);
    for (j, &i) in perm.iter().enumerate() {
        psi.data_mut()[i * n + j] = if j % 2 == 0 { 1.0 } else { -1.0 };
    }
    let y = gaussian_vec(&mut r, n, 1.0);
    let inst = ProblemInstance {
        y: Tensor::vector(y.clone()),
        phi: Tensor::identity(n),
        x_star: Tensor::zeros(&[n]),
        index: 0,
    };
    let cfg = IstaConfig {
        iterations: 1,
        theta: 0.4,
        gamma: StepSize::Fixed(1.0),
    };
    let x = ista::ista_solve(&inst, &psi, &cfg).unwrap().x;
    let aty = mtv(&rows_of(&psi), &y);
    for (xi, ui) in x.iter().zip(&aty) {
        assert!((xi - soft(*ui, 0.4)).abs() < 1e-15);
    }
}

#[test]
fn converged_ista_matches_coordinate_descent() {
    let mut r = rng(4);
    for _ in 0..20 {
        let b = r.random_range(2..=16);
        let m = r.random_range(b..=32);
        let (inst, psi) = random_instance(&mut r, m, b, b, 0.3);
        let cfg = IstaConfig {
            iterations: 2000,
            theta: 0.05,
            gamma: StepSize::Auto,
        };
        let run = ista::ista_solve(&inst, &psi, &cfg).unwrap();
        let rho = cfg.theta / run.gamma;
        let a = effective(&inst, &psi);
        let oracle = lasso_cd_oracle(&a, inst.y.data(), rho);
        let (fi, fo) = (
            lasso_value(&a, inst.y.data(), &run.x, rho),
            lasso_value(&a, inst.y.data(), &oracle, rho),
        );
        assert!((fi - fo).abs() < 1e-6, "m={m} b={b}: {fi} vs {fo}");
        let lib = ista::lasso_oracle(&inst, &psi, rho).unwrap();
        let gap = lib.iter().zip(&oracle).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-8, "library oracle off by {gap}");
    }
}

#[test]
fn lasso_oracle_beats_random_probes() {
    let mut r = rng(5);
    let (inst, psi) = random_instance(&mut r, 5, 6, 8, 0.4);
    let rho = 0.2;
    let a = effective(&inst, &psi);
    let x = ista::lasso_oracle(&inst, &psi, rho).unwrap();
    let best = lasso_value(&a, inst.y.data(), &x, rho);
    let scale = x.iter().map(|v| v.abs()).fold(1.0, f64::max);
    for k in 0..10_000 {
        // half the probes are local perturbations, half are global
        let s = if k % 2 == 0 { 1e-3 } else { scale };
        let probe: Vec<f64> = if k % 2 == 0 {
            x.iter().map(|v| v + s * r.random_range(-1.0..1.0)).collect()
        } else {
            (0..8).map(|_| s * r.random_range(-2.0..2.0)).collect()
        };
        assert!(best <= lasso_value(&a, inst.y.data(), &probe, rho) + 1e-12);
    }
}

#[test]
fn large_penalty_gives_zero() {
    let mut r = rng(6);
    let (inst, psi) = random_instance(&mut r, 5, 6, 8, 0.4);
    let a = effective(&inst, &psi);
    let rho = mtv(&a, inst.y.data()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let x = ista::lasso_oracle(&inst, &psi, rho * 1.0001).unwrap();
    assert!(x.iter().all(|&v| v == 0.0));
    assert!(ista::lasso_oracle(&inst, &psi, 0.0).is_err());
}

#[test]
fn negative_threshold_is_rejected() {
    assert!(ista::soft_threshold(&[1.0], -0.1).is_err());
    let cfg = IstaConfig {
        iterations: 1,
        theta: 0.0,
        gamma: StepSize::Auto,
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn shape_mismatch_is_rejected() {
    let mut r = rng(7);
    let (inst, _) = random_instance(&mut r, 4, 5, 6, 0.3);
    let wrong = Tensor::zeros(&[4, 6]);
    let cfg = IstaConfig {
        iterations: 1,
        theta: 0.1,
        gamma: StepSize::Fixed(1.0),
    };
    assert!(matches!(ista::ista_solve(&inst, &wrong, &cfg), Err(Error::ShapeMismatch { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prop_objective_is_monotone(seed in any::<u64>(), m in 3usize..12, b in 3usize..16, theta in 0.01f64..0.5) {
        let mut r = rng(seed);
        let (inst, psi) = random_instance(&mut r, m, b.max(3), b, 0.3);
        let cfg = IstaConfig { iterations: 60, theta, gamma: StepSize::Auto };
        let run = ista::ista_solve(&inst, &psi, &cfg).unwrap();
        let a = effective(&inst, &psi);
        let rho = theta / run.gamma;
        let vals: Vec<f64> = run.trajectory.iter().map(|x| lasso_value(&a, inst.y.data(), x, rho)).collect();
        for w in vals.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn prop_minimisers_agree_when_well_posed(seed in any::<u64>(), b in 2usize..8, extra in 8usize..24) {
        let mut r = rng(seed);
        let m = b + extra;
        let (inst, psi) = random_instance(&mut r, m, b, b, 0.4);
        let cfg = IstaConfig { iterations: 2000, theta: 0.05, gamma: StepSize::Auto };
        let run = ista::ista_solve(&inst, &psi, &cfg).unwrap();
        let oracle = ista::lasso_oracle(&inst, &psi, cfg.theta / run.gamma).unwrap();
        let gap = run.x.iter().zip(&oracle).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        prop_assert!(gap < 1e-6, "gap {gap}");
    }

    #[test]
    fn prop_soft_threshold_non_expansive(u in prop::collection::vec(-5.0f64..5.0, 1..20), shift in prop::collection::vec(-2.0f64..2.0, 20), theta in 0.0f64..3.0) {
        let v: Vec<f64> = u.iter().zip(&shift).map(|(a, b)| a + b).collect();
        let (eu, ev) = (ista::soft_threshold(&u, theta).unwrap(), ista::soft_threshold(&v, theta).unwrap());
        let d_out: f64 = eu.iter().zip(&ev).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let d_in: f64 = u.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!(d_out <= d_in + 1e-12);
        if u.iter().all(|x| x.abs() <= theta) {
            prop_assert!(eu.iter().all(|&x| x == 0.0));
        }
        prop_assert_eq!(ista::soft_threshold(&u, 0.0).unwrap(), u.clone());
    }
}
