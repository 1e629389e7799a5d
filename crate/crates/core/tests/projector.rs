use nalgebra::DMatrix;
use proptest::prelude::*;
use proto_cil::backbone::{FeatureMatrix, FeatureSource};
use proto_cil::projector::{init_projection, ProjectorError, PrototypeState};
use proto_cil::seed;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn features(n: usize, d: usize, classes: usize, s: u64) -> FeatureMatrix {
    let mut rng = seed::rng(s);
    let rows = DMatrix::from_fn(n, d, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z.max(0.0)
    });
    let labels = (0..n)
        .map(|_| format!("k{}", rng.random_range(0..classes)))
        .collect();
    FeatureMatrix::new(rows, labels, FeatureSource::Projected).unwrap()
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Batch statistics computed directly, with columns in first-appearance order.
fn batch_stats(h: &FeatureMatrix) -> (DMatrix<f64>, DMatrix<f64>, Vec<String>) {
    let mut reg: Vec<String> = Vec::new();
    for l in &h.labels {
        if !reg.contains(l) {
            reg.push(l.clone());
        }
    }
    let mut y = DMatrix::zeros(h.len(), reg.len());
    for (i, l) in h.labels.iter().enumerate() {
        y[(i, reg.iter().position(|r| r == l).unwrap())] = 1.0;
    }
    (h.rows.transpose() * &h.rows, h.rows.transpose() * y, reg)
}

#[test]
fn projection_is_seeded_gaussian() {
    let a = init_projection(1000, 1000, 5).unwrap();
    assert_eq!(a, init_projection(1000, 1000, 5).unwrap());
    let n = a.w.len() as f64;
    let mean = a.w.sum() / n;
    let var = a.w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 0.01, "mean {mean}");
    assert!((var - 1.0).abs() < 0.01, "var {var}");
    let zero = FeatureMatrix::new(
        DMatrix::zeros(3, 1000),
        vec!["a".into(); 3],
        FeatureSource::Ingested,
    )
    .unwrap();
    assert_eq!(a.project(&zero).unwrap().rows, DMatrix::zeros(3, 1000));
}

#[test]
fn gram_is_symmetric_and_psd() {
    let mut s = PrototypeState::new(40, 0);
    for t in 0..4 {
        s.accumulate(&features(37, 40, 3, t)).unwrap();
    }
    let g = s.gram();
    assert_eq!((g - g.transpose()).amax(), 0.0);
    let min_eig = g.clone().symmetric_eigenvalues().min();
    assert!(min_eig >= -1e-8 * g.trace());
}

#[test]
fn prototypes_equal_ridge_regression() {
    // closed-form ridge on one-hot targets, through a dense inverse
    for s in 0..20 {
        let h = features(60, 12, 4, s);
        let mut state = PrototypeState::new(12, 0);
        state.accumulate(&h).unwrap();
        let lambda = 0.1 * (s + 1) as f64;
        let p = state.solve_prototypes(lambda).unwrap().clone();
        let (g, c, _) = batch_stats(&h);
        let inv = (g + DMatrix::identity(12, 12) * lambda)
            .try_inverse()
            .unwrap();
        assert!(rel(&p, &(inv * c)) <= 1e-8);
    }
}

#[test]
fn zero_gram_divides_by_lambda() {
    let mut s = PrototypeState::new(3, 0);
    let h = FeatureMatrix::new(
        DMatrix::zeros(2, 3),
        vec!["a".into(), "b".into()],
        FeatureSource::Projected,
    )
    .unwrap();
    s.accumulate(&h).unwrap();
    let p = s.solve_prototypes(4.0).unwrap();
    assert_eq!(p, &DMatrix::zeros(3, 2));
}

#[test]
fn overfit_state_scores_its_own_class_highest() {
    let h = features(6, 50, 6, 3);
    let mut s = PrototypeState::new(50, 0);
    s.accumulate(&h).unwrap();
    s.solve_prototypes(1e-6).unwrap();
    let scores = s.score(&h).unwrap();
    assert_eq!(scores.classes, s.classes());
    for i in 0..h.len() {
        let row = scores.scores.row(i);
        let best = (0..row.len())
            .max_by(|&a, &b| row[a].total_cmp(&row[b]))
            .unwrap();
        assert_eq!(scores.classes[best], h.labels[i]);
    }
}

#[test]
fn lambda_selection_is_the_grid_argmin() {
    let grid: Vec<f64> = (-8..=8).map(|k| 10f64.powi(k)).collect();
    for s in 0..5 {
        let task = features(80, 20, 4, 100 + s);
        let state = PrototypeState::new(20, 0);
        let (chosen, curve) = state.lambda_curve(&task, &grid, s).unwrap();
        assert_eq!(state.select_lambda(&task, &grid, s).unwrap(), chosen);
        let best = curve
            .iter()
            .filter_map(|(_, m)| *m)
            .fold(f64::INFINITY, f64::min);
        let chosen_mse = curve.iter().find(|(l, _)| *l == chosen).unwrap().1.unwrap();
        assert_eq!(chosen_mse, best);
        // ties resolve to the smaller value: nothing earlier in the grid reaches the minimum
        assert!(curve
            .iter()
            .take_while(|(l, _)| *l < chosen)
            .all(|(_, m)| m.is_none_or(|m| m > best)));
    }
    let task = features(10, 4, 2, 1);
    let state = PrototypeState::new(4, 0);
    assert_eq!(state.select_lambda(&task, &[0.5], 0).unwrap(), 0.5);
    assert!(matches!(
        state.select_lambda(&features(4, 4, 2, 1), &grid, 0),
        Err(ProjectorError::DegenerateSplit { .. })
    ));
    assert!(state.select_lambda(&task, &[], 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn streaming_matches_single_pass(
        n in 1usize..120, d in 1usize..24, k in 1usize..5, cuts in prop::collection::vec(0usize..120, 0..4), s in 0u64..1000
    ) {
        let h = features(n, d, k, s);
        let mut cuts: Vec<usize> = cuts.into_iter().map(|c| c % (n + 1)).collect();
        cuts.push(0);
        cuts.push(n);
        cuts.sort_unstable();
        let mut state = PrototypeState::new(d, 0);
        for w in cuts.windows(2) {
            let idx: Vec<usize> = (w[0]..w[1]).collect();
            state.accumulate(&h.select(&idx)).unwrap();
        }
        let (g, c, reg) = batch_stats(&h);
        prop_assert_eq!(state.classes(), reg.as_slice());
        prop_assert!(rel(state.gram(), &g) <= 1e-12);
        prop_assert!(rel(state.class_sums(), &c) <= 1e-12);
    }

    #[test]
    fn order_does_not_matter(n in 2usize..150, d in 1usize..20, s in 0u64..1000) {
        let h = features(n, d, 3, s);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.rotate_left((s as usize) % n);
        let mut a = PrototypeState::new(d, 0);
        a.accumulate(&h).unwrap();
        let mut b = PrototypeState::new(d, 0);
        b.accumulate(&h.select(&perm)).unwrap();
        prop_assert!(rel(b.gram(), a.gram()) <= 1e-12);
        // registries may differ in order; compare per class
        for (j, class) in a.classes().iter().enumerate() {
            let jb = b.classes().iter().position(|c| c == class).unwrap();
            let ca = a.class_sums().column(j).into_owned();
            let cb = b.class_sums().column(jb).into_owned();
            prop_assert!((&ca - &cb).norm() <= 1e-12 * ca.norm().max(1e-300));
        }
    }

    #[test]
    fn positive_scaling_keeps_argmax(n in 1usize..20, scale in 0.01f64..100.0, s in 0u64..1000) {
        let train = features(30, 10, 3, s);
        let mut state = PrototypeState::new(10, 0);
        state.accumulate(&train).unwrap();
        state.solve_prototypes(0.5).unwrap();
        let test = features(n, 10, 3, s + 1);
        let mut scaled = test.clone();
        scaled.rows *= scale;
        let a = state.score(&test).unwrap().scores;
        let b = state.score(&scaled).unwrap().scores;
        prop_assert!((&a * scale - &b).norm() <= 1e-12 * b.norm().max(1e-300));
        for i in 0..n {
            prop_assert_eq!(a.row(i).transpose().argmax().0, b.row(i).transpose().argmax().0);
        }
    }
}
