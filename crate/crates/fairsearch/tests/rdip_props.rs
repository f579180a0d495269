mod common;

use common::*;
use fairsearch::caratheodory::solve_multi_affine;
use fairsearch::constrained::{dual_value_and_slacks, slack, solve_rdip, Sense};
use fairsearch::pandora::{IndexPolicy, TieBreakRule};
use fairsearch::Error;
use proptest::prelude::*;

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn extreme_slacks_match_the_lexicographic_oracle(seed in any::<u64>()) {
        let inst = tied_pandora(seed);
        let c = random_constraint(seed, inst.len(), Sense::Eq);
        let p = dual_value_and_slacks(&inst, &c, 0.0).unwrap();
        let t = Tiny::new(&inst, Some(&c));
        let (u_hi, s_hi) = lex_dp(&t, true);
        let (_, s_lo) = lex_dp(&t, false);
        prop_assert!((p.delta_plus - (c.b + s_hi)).abs() < 1e-9, "Δ⁺ {} vs {}", p.delta_plus, s_hi);
        prop_assert!((p.delta_minus - (c.b + s_lo)).abs() < 1e-9, "Δ⁻ {} vs {}", p.delta_minus, s_lo);
        prop_assert!((p.utility_plus - u_hi).abs() < 1e-9 && (p.utility_minus - u_hi).abs() < 1e-9);

        let ids: Vec<u32> = inst.boxes.iter().map(|b| b.id).collect();
        for perm in permutations(&ids) {
            let pol = IndexPolicy::new(&inst, &TieBreakRule::from_order(&perm)).unwrap();
            let (u, s) = enumerate_policy(&inst, &pol, Some(&c));
            prop_assert!((u - u_hi).abs() < 1e-9);
            prop_assert!(s >= p.delta_minus - 1e-9 && s <= p.delta_plus + 1e-9);
        }
    }

    #[test]
    fn rdip_is_feasible_and_certified_optimal(seed in any::<u64>(), leq in any::<bool>()) {
        let inst = random_pandora(seed, 4);
        let sense = if leq { Sense::Leq } else { Sense::Eq };
        let c = random_constraint(seed, inst.len(), sense);
        let pol = match solve_rdip(&inst, &c, 1e-11) {
            Ok(p) => p,
            Err(Error::Infeasible(_)) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let t = c.table(&inst).unwrap();
        let out = pol.evaluate_exact(1e7).unwrap();
        let d = slack(&t, c.b, &out);
        let lambda = pol.lambda[0];
        match sense {
            Sense::Eq => prop_assert!(d.abs() < 1e-10, "slack {}", d),
            Sense::Leq => {
                prop_assert!(d >= -1e-10 && lambda >= 0.0);
                prop_assert!(lambda == 0.0 || d.abs() < 1e-10);
            }
        }
        // Weak duality: a feasible policy earning G(λ) is optimal.
        let g = lex_dp(&adjusted_tiny(&inst, &c, lambda), true).0 + lambda * c.b;
        prop_assert!((out.utility - g).abs() < 1e-8, "utility {} vs G(λ*) {}", out.utility, g);
        if pol.exact_dual && pol.atoms.len() == 2 {
            let p = dual_value_and_slacks(&inst, &c, lambda).unwrap();
            prop_assert!(p.delta_minus <= 1e-10 && p.delta_plus >= -1e-10);
        }
        // Path enumeration of each atom agrees with the exact evaluator.
        let mut mix = 0.0;
        for a in &pol.atoms {
            let (_, s) = enumerate_policy(&inst, &a.policy, Some(&c));
            mix += a.weight * s;
        }
        prop_assert!((mix - d).abs() < 1e-10);
    }

    #[test]
    fn single_constraint_multi_matches_rdip(seed in any::<u64>()) {
        let inst = random_pandora(seed, 3);
        let c = random_constraint(seed, inst.len(), Sense::Eq);
        let r = match solve_rdip(&inst, &c, 1e-11) {
            Ok(p) => p,
            Err(Error::Infeasible(_)) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let m = solve_multi_affine(&inst, std::slice::from_ref(&c), 1e-9).unwrap();
        let t = c.table(&inst).unwrap();
        let a = r.evaluate_exact(1e7).unwrap();
        let b = m.policy.evaluate_exact(1e7).unwrap();
        prop_assert!((a.utility - b.utility).abs() < 1e-8, "rdip {} vs multi {}", a.utility, b.utility);
        prop_assert!((slack(&t, c.b, &a) - slack(&t, c.b, &b)).abs() < 1e-8);
    }
}
