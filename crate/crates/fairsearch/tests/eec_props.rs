mod common;

use common::*;
use fairsearch::caratheodory::{convex_weights, ellipsoid_halfspace_update, CutOutcome, Ellipsoid};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;

fn check(points: &[Vec<f64>]) -> Result<(), TestCaseError> {
    let m = points[0].len();
    let res = run_eec(points);
    for &(dim, ratio) in &res.cuts {
        let bound = (-1.0 / (2.0 * (dim as f64 + 1.0))).exp();
        prop_assert!(ratio <= bound + 1e-12, "ratio {} above {} in dimension {}", ratio, bound, dim);
    }
    prop_assert!(!res.points.is_empty() && res.points.len() <= 10 * m, "{} points for m = {}", res.points.len(), m);
    let pts: Vec<Vec<f64>> = res.points.iter().map(|p| p.0.clone()).collect();
    for (p, i) in &res.points {
        prop_assert_eq!(p, &points[*i]);
    }
    let w = convex_weights(&pts, 1e-9).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert!(w.iter().all(|x| *x >= 0.0));
    prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    prop_assert!(hull_residual(&pts, &w) <= 1e-9);
    Ok(())
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn interior_origin(seed in any::<u64>()) {
        check(&polytope(seed, Shape::Interior))?;
    }

    #[test]
    fn origin_on_an_edge(seed in any::<u64>()) {
        check(&polytope(seed, Shape::Face))?;
    }

    #[test]
    fn origin_at_a_vertex(seed in any::<u64>()) {
        check(&polytope(seed, Shape::Vertex))?;
    }

    #[test]
    fn flat_polytope(seed in any::<u64>()) {
        check(&polytope(seed, Shape::Flat))?;
    }

    #[test]
    fn every_cut_shrinks_volume(seed in any::<u64>()) {
        let mut r = rng(seed);
        let m = r.gen_range(2..=5);
        let mut e = Ellipsoid::projected_ball(m, &[]);
        for _ in 0..30 {
            let g = DVector::from_fn(m, |_, _| r.gen_range(-1.0..1.0));
            let (next, outcome) = ellipsoid_halfspace_update(&e, &g, 1e-12);
            if let CutOutcome::Cut { volume_ratio } = outcome {
                let bound = (-1.0 / (2.0 * (m as f64 + 1.0))).exp();
                prop_assert!(volume_ratio <= bound + 1e-12);
                prop_assert!(volume_ratio > 0.0);
            }
            e = next;
        }
    }
}

#[test]
fn cube_vertices_need_few_points() {
    for m in 2..=5 {
        let pts: Vec<Vec<f64>> = (0..1usize << m)
            .map(|b| (0..m).map(|j| if b >> j & 1 == 1 { 1.0 } else { -1.0 }).collect())
            .collect();
        let res = run_eec(&pts);
        assert!(res.points.len() <= 10 * m, "m = {m}: {} points", res.points.len());
    }
}
