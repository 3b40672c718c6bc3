mod common;

use common::rng;
use crowd_density::groundtruth::{
    adaptive_sigmas, density_adaptive, density_adaptive_with_fallback, density_fixed, knn_mean_distance, Annotation,
    DensityMap, GtMode,
};
use proptest::prelude::*;
use rand::Rng;

fn random_points(n: usize, w: usize, h: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| [r.random_range(0.0..w as f64), r.random_range(0.0..h as f64)])
        .collect()
}

#[test]
fn thirty_seven_points_fixed_sigma() {
    let ann = Annotation::new(200, 200, random_points(37, 200, 200, 1)).unwrap();
    let m = density_fixed(&ann, 15.0).unwrap();
    assert!((m.count() - 37.0).abs() < 1e-3);
    assert!(m.grid.data().iter().all(|v| *v >= 0.0));
}

#[test]
fn single_point_fixed_sigma_two() {
    let ann = Annotation::new(64, 64, vec![[32.0, 32.0]]).unwrap();
    let m = density_fixed(&ann, 2.0).unwrap();
    assert!((m.count() - 1.0).abs() < 1e-12);
}

#[test]
fn scaled_square_sigma() {
    let pts = vec![[10.0, 10.0], [50.0, 10.0], [10.0, 50.0], [50.0, 50.0]];
    let sig = adaptive_sigmas(&pts, 0.3, 3).unwrap();
    let want = 0.3 * (40.0 + 40.0 + 40.0 * 2f64.sqrt()) / 3.0;
    assert!((want - 13.657).abs() < 1e-3);
    assert!(sig.iter().all(|s| (s - want).abs() < 1e-9));
    let ann = Annotation::new(64, 64, pts).unwrap();
    assert!((density_adaptive(&ann, 0.3, 3).unwrap().count() - 4.0).abs() < 1e-9);
}

#[test]
fn knn_requires_more_points_than_k() {
    assert!(knn_mean_distance(&[[0.0, 0.0], [1.0, 0.0]], 2).is_err());
    let d = knn_mean_distance(&[[0.0, 0.0], [3.0, 4.0]], 1).unwrap();
    assert_eq!(d, vec![5.0, 5.0]);
}

#[test]
fn fallback_for_sparse_annotations() {
    let ann = Annotation::new(80, 80, vec![[40.0, 40.0], [20.0, 60.0]]).unwrap();
    let fb = density_adaptive_with_fallback(&ann, 0.3, 3, 15.0).unwrap();
    let fixed = density_fixed(&ann, 15.0).unwrap();
    assert_eq!(fb, fixed);
}

#[test]
fn dmap_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ann = Annotation::new(30, 20, random_points(5, 30, 20, 3)).unwrap();
    let m = density_fixed(&ann, 2.5).unwrap();
    let p = dir.path().join("a.dmap");
    m.save(&p).unwrap();
    let back = DensityMap::load(&p).unwrap();
    assert_eq!((back.height(), back.width()), (20, 30));
    for (a, b) in m.grid.data().iter().zip(back.grid.data()) {
        assert_eq!(*a as f32 as f64, *b);
    }
    let ap = dir.path().join("a.json");
    ann.save(&ap).unwrap();
    assert_eq!(Annotation::load(&ap).unwrap(), ann);
}

#[test]
fn gt_mode_json_defaults() {
    let m: GtMode = serde_json::from_str(r#"{"mode":"fixed","sigma":15.0}"#).unwrap();
    assert_eq!(m, GtMode::Fixed { sigma: 15.0 });
    assert_eq!(
        GtMode::default(),
        GtMode::Adaptive { beta: 0.3, k: 3, fallback_sigma: 15.0 }
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn both_generators_conserve_counts(n in 1usize..=500, seed in any::<u64>()) {
        let ann = Annotation::new(96, 72, random_points(n, 96, 72, seed)).unwrap();
        let f = density_fixed(&ann, 15.0).unwrap();
        let a = density_adaptive_with_fallback(&ann, 0.3, 3, 15.0).unwrap();
        prop_assert!((f.count() - n as f64).abs() < 1e-3);
        prop_assert!((a.count() - n as f64).abs() < 1e-3);
        let pooled = a.sum_pool(4).unwrap();
        prop_assert!((pooled.count() - a.count()).abs() < 1e-9);
    }

    #[test]
    fn integer_shift_translates_the_map(
        n in 1usize..6,
        dx in 0usize..6,
        dy in 0usize..6,
        sigma in 0.6f64..3.0,
        seed in any::<u64>(),
    ) {
        // points stay at least ceil(3 sigma) + 1 px from every border
        let pts: Vec<[f64; 2]> = random_points(n, 20, 20, seed).into_iter().map(|[x, y]| [x + 12.0, y + 12.0]).collect();
        let shifted: Vec<[f64; 2]> = pts.iter().map(|[x, y]| [x + dx as f64, y + dy as f64]).collect();
        let a = density_fixed(&Annotation::new(56, 56, pts).unwrap(), sigma).unwrap();
        let b = density_fixed(&Annotation::new(56, 56, shifted).unwrap(), sigma).unwrap();
        for i in 0..56 - dy {
            for j in 0..56 - dx {
                prop_assert!((a.grid.get(i, j) - b.grid.get(i + dy, j + dx)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmas_scale_with_coordinates(n in 4usize..30, s in 0.2f64..4.0, seed in any::<u64>()) {
        let pts = random_points(n, 50, 50, seed);
        let scaled: Vec<[f64; 2]> = pts.iter().map(|[x, y]| [x * s, y * s]).collect();
        let a = adaptive_sigmas(&pts, 0.3, 3).unwrap();
        let b = adaptive_sigmas(&scaled, 0.3, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x * s - y).abs() < 1e-9 * (1.0 + y));
        }
    }
}
