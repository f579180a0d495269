mod common;

use common::*;
use fairsearch::pandora::{
    expected_outcome_exact, mixture_mc, reservation_index, IndexPolicy, PandoraInstance, TieBreakRule,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(config(96))]

    #[test]
    fn index_policy_matches_backward_induction(seed in any::<u64>()) {
        let inst = random_pandora(seed, 4);
        let out = expected_outcome_exact(&inst, &TieBreakRule::Lexicographic).unwrap();
        let opt = pandora_opt(&inst);
        prop_assert!((out.utility - opt).abs() < 1e-9, "index {} vs dp {}", out.utility, opt);
    }

    #[test]
    fn exact_evaluation_matches_path_enumeration(seed in any::<u64>()) {
        let inst = random_pandora(seed, 4);
        let ids: Vec<u32> = inst.boxes.iter().rev().map(|b| b.id).collect();
        for rule in [TieBreakRule::Lexicographic, TieBreakRule::from_order(&ids)] {
            let pol = IndexPolicy::new(&inst, &rule).unwrap();
            let out = pol.evaluate_exact(1e7).unwrap();
            let (u, _) = enumerate_policy(&inst, &pol, None);
            prop_assert!((out.utility - u).abs() < 1e-9);
            let sel: f64 = out.select.iter().sum();
            prop_assert!((sel - out.n_selected).abs() < 1e-12);
            prop_assert!(out.n_selected <= inst.capacity as f64 + 1e-12);
            for (s, i) in out.select.iter().zip(&out.inspect) {
                prop_assert!(*s <= *i + 1e-12 && *i <= 1.0 + 1e-12 && *s >= -1e-12);
            }
        }
    }

    #[test]
    fn reservation_matches_bisection(
        vals in prop::collection::vec(-5.0f64..20.0, 1..5),
        w in prop::collection::vec(0.1f64..1.0, 5),
        cost in 0.0f64..4.0,
    ) {
        let mut v = vals.clone();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v.dedup();
        let tot: f64 = w[..v.len()].iter().sum();
        let p: Vec<f64> = w[..v.len()].iter().map(|x| x / tot).collect();
        let d = fairsearch::pandora::ValueDistribution::new(v.clone(), p.clone()).unwrap();
        let s = reservation_index(&d, cost);
        prop_assert!((s - reservation_bisect(&v, &p, cost)).abs() < 1e-8);
    }

    #[test]
    fn mc_is_unbiased_for_the_exact_value(seed in any::<u64>()) {
        let inst = random_pandora(seed, 3);
        let pol = IndexPolicy::new(&inst, &TieBreakRule::Lexicographic).unwrap();
        let exact = pol.evaluate_exact(1e7).unwrap();
        let mc = mixture_mc(&[(&pol, 1.0)], &[], 4000, seed).unwrap();
        prop_assert!((mc.mean.utility - exact.utility).abs() <= 5.0 * mc.stderr_utility + 1e-9);
    }
}

fn json_round_trip(inst: &PandoraInstance) -> PandoraInstance {
    serde_json::from_str(&serde_json::to_string(inst).unwrap()).unwrap()
}

#[test]
fn random_instances_round_trip_through_json() {
    for seed in 0..20 {
        let inst = random_pandora(seed, 4);
        assert_eq!(json_round_trip(&inst), inst);
    }
}
