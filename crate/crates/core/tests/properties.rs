mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use common::{is_hurwitz, min_eig_sym, planted_dichotomous, random_matrix};
use eqsel_core::bench::{get_problem, ProblemSpec};
use eqsel_core::dynamics::{
    find_equilibria, newton_root, regime_report, BoxDomain, Equilibrium, Polynomial1D, Stability,
    VectorFieldSystem,
};
use eqsel_core::matctrl::{
    gain_cost, solve_degenerate_riccati, solve_lyapunov, solve_riccati_kappa, SquareMatrix,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn riccati_pair_properties(seed in any::<u64>(), d in 1usize..=6) {
        let (m, lambda_plus) = planted_dichotomous(seed, d);
        let pair = solve_degenerate_riccati(&m).unwrap();
        let q = pair.q.as_matrix();
        prop_assert!((q.trace() / 2.0 - lambda_plus).abs() <= 1e-7 * (1.0 + lambda_plus));
        prop_assert!(pair.riccati_residual <= 1e-9 * (1.0 + m.norm().powi(2)));
        prop_assert!(pair.lyapunov_residual <= 1e-9 * (1.0 + pair.sigma.norm()));
        prop_assert!(is_hurwitz(&pair.closed_loop(&m)));
        prop_assert!(min_eig_sym(q) >= -1e-9);
        prop_assert!(pair.sigma.asymmetry() <= 1e-10 * (1.0 + pair.sigma.norm()));
        prop_assert!(min_eig_sym(pair.sigma.as_matrix()) > 0.0);
    }

    #[test]
    fn riccati_gain_is_cost_optimal(seed in any::<u64>(), d in 1usize..=4, delta in 0.01f64..0.5) {
        let (m, lambda_plus) = planted_dichotomous(seed, d);
        let pair = solve_degenerate_riccati(&m).unwrap();
        let best = gain_cost(&m, &pair.q).unwrap();
        prop_assert!((best - lambda_plus).abs() <= 1e-7 * (1.0 + lambda_plus));
        let g = pair.q.as_matrix() + random_matrix(seed ^ 0x5eed, d, delta);
        let g = SquareMatrix::new(g).unwrap();
        if is_hurwitz(&(m.as_matrix() - g.as_matrix())) {
            prop_assert!(gain_cost(&m, &g).unwrap() >= best - 1e-9 * (1.0 + best));
        }
    }

    #[test]
    fn kappa_riccati_is_monotone(seed in any::<u64>(), d in 1usize..=4) {
        let (m, _) = planted_dichotomous(seed, d);
        let q_hat = solve_degenerate_riccati(&m).unwrap().q.into_inner();
        let mut prev: Option<DMatrix<f64>> = None;
        for kappa in [1.0, 1e-1, 1e-2, 1e-4] {
            let q = solve_riccati_kappa(&m, kappa).unwrap().into_inner();
            prop_assert!(min_eig_sym(&(&q - &q_hat)) >= -1e-8);
            if let Some(p) = prev {
                prop_assert!(min_eig_sym(&(&p - &q)) >= -1e-8);
            }
            prev = Some(q);
        }
    }

    #[test]
    fn lyapunov_solution_is_symmetric_positive(seed in any::<u64>(), d in 1usize..=6) {
        let (m, _) = planted_dichotomous(seed, d);
        // Flip to a Hurwitz matrix with the same eigenvector structure.
        let pair = solve_degenerate_riccati(&m).unwrap();
        let a = SquareMatrix::new(pair.closed_loop(&m)).unwrap();
        let b = random_matrix(seed.wrapping_add(1), d, 1.0);
        let c = SquareMatrix::new(&b * b.transpose() + DMatrix::identity(d, d)).unwrap();
        let x = solve_lyapunov(&a, &c).unwrap();
        prop_assert!(x.asymmetry() <= 1e-10 * (1.0 + x.norm()));
        prop_assert!(min_eig_sym(x.as_matrix()) > 0.0);
        let res = a.as_matrix() * x.as_matrix() + x.as_matrix() * a.transpose() + c.as_matrix();
        prop_assert!(res.norm() <= 1e-9 * (1.0 + x.norm()));
    }

    #[test]
    fn newton_reconverges_from_jittered_starts(jitter in -0.05f64..0.05, k in 0usize..5) {
        let p = get_problem(&ProblemSpec::DoubleWell2).unwrap();
        let (z, _) = p.known_equilibria[k];
        let root = newton_root(&p.system, &[z + jitter]).unwrap();
        prop_assert!((root[0] - z).abs() <= 1e-9);
    }

    #[test]
    fn regime_sets_are_nested(
        roots in prop::collection::btree_set(-40i32..40, 1..6),
        weights in prop::collection::vec(0.0f64..3.0, 6),
        nu in 0.2f64..3.0,
    ) {
        // m(x) = −∏(x − r_k) has simple roots, alternating stability.
        let roots: Vec<f64> = roots.iter().map(|&r| r as f64 / 8.0).collect();
        let mut drift = vec![-1.0];
        for r in &roots {
            let mut next = vec![0.0; drift.len() + 1];
            for (i, c) in drift.iter().enumerate() {
                next[i] -= r * c;
                next[i + 1] += c;
            }
            drift = next;
        }
        let mut eqs = Vec::new();
        let field = Polynomial1D::new(drift, vec![0.0]).unwrap();
        let sys = VectorFieldSystem::new("random", Arc::new(field), BoxDomain::interval(-6.0, 6.0).unwrap()).unwrap();
        for (k, e) in find_equilibria(&sys, 4001).unwrap().equilibria.into_iter().enumerate() {
            eqs.push(Equilibrium { penalty_at: (weights[k % 6] * 4.0).round() / 4.0, ..e });
        }
        prop_assert_eq!(eqs.len(), roots.len());
        let rep = regime_report(&eqs, nu).unwrap();
        for z in &rep.ztilde_set {
            prop_assert!(rep.z_set.contains(z));
        }
        prop_assert!(rep.jc >= rep.j);
        if let Some(js) = rep.js {
            prop_assert!(js >= rep.j);
            prop_assert!(rep.jc <= js);
        }
        let stable: BTreeMap<String, bool> = eqs
            .iter()
            .map(|e| (format!("{:?}", e.z), e.classification == Stability::Stable))
            .collect();
        for z in &rep.zs_set {
            let key = format!("{:?}", z);
            prop_assert!(stable[&key]);
        }
        prop_assert!(!rep.predicted_s.is_empty() || rep.zs_set.is_empty());
    }
}

