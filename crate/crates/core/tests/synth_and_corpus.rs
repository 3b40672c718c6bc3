mod common;

use common::rng;
use crowd_density::corpus::{Corpus, Split};
use crowd_density::groundtruth::{density_fixed, GtMode};
use crowd_density::synth::{sample_patch_batch, synth_corpus, synth_scene, DensityProfile, SceneParams, SplitFractions, TrainImage};
use crowd_density::training::prepare_train_images;
use proptest::prelude::*;

fn small_corpus(count: usize) -> Corpus {
    let params = SceneParams { width: 40, height: 32, count_range: (2, 12), seed: 3, ..SceneParams::default() };
    synth_corpus("small", &params, count, SplitFractions::default()).unwrap()
}

#[test]
fn corpus_split_sizes_and_ids() {
    let c = small_corpus(20);
    assert_eq!(c.split(Split::Train).len(), 16);
    assert_eq!(c.split(Split::Val).len(), 2);
    assert_eq!(c.split(Split::Test).len(), 2);
    assert_eq!(c.samples[0].id, "small_0000");
}

#[test]
fn corpus_files_round_trip_and_missing_annotations_warn() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("sparse");
    let c = small_corpus(6);
    let manifest = c.save(&root).unwrap();
    let back = Corpus::load(&manifest).unwrap();
    assert_eq!(back.id, "sparse");
    assert_eq!(back.samples, c.samples);
    assert!(back.warnings.is_empty());

    std::fs::remove_file(root.join("annotations/small_0001.json")).unwrap();
    let partial = Corpus::load(&manifest).unwrap();
    assert!(partial.samples[1].annotation.is_none());
    assert_eq!(partial.warnings.len(), 1);
    let mut warnings = Vec::new();
    let train = prepare_train_images(&partial.split(Split::Train), &GtMode::default(), &mut warnings).unwrap();
    assert_eq!(train.len(), 4);
    assert_eq!(warnings.len(), 1);
}

#[test]
fn scenes_replay_and_respect_counts() {
    for profile in [DensityProfile::Uniform, DensityProfile::TopHeavy, DensityProfile::Clustered] {
        let p = SceneParams { count_range: (50, 50), profile, ..SceneParams::default() };
        let a = synth_scene(&p, &mut rng(4)).unwrap();
        assert_eq!(a, synth_scene(&p, &mut rng(4)).unwrap());
        assert_eq!(a.1.count(), 50);
        assert!(a.1.points.iter().all(|[x, y]| *x >= 0.0 && *x < 96.0 && *y >= 0.0 && *y < 96.0));
    }
}

fn train_images(count: usize, side: usize) -> Vec<TrainImage> {
    let params = SceneParams { width: side, height: side, count_range: (5, 40), seed: 9, ..SceneParams::default() };
    let c = synth_corpus("p", &params, count, SplitFractions { train: 1.0, val: 0.0 }).unwrap();
    let mut w = Vec::new();
    prepare_train_images(&c.split(Split::Train), &GtMode::Fixed { sigma: 4.0 }, &mut w).unwrap()
}

#[test]
fn patch_counts_are_more_diverse_than_rescaled_image_counts() {
    let images = train_images(8, 96);
    let p = 48;
    let area_ratio = (p * p) as f64 / (96.0 * 96.0);
    let rescaled: Vec<f64> = images.iter().map(|t| t.density.count() * area_ratio).collect();
    let (rmin, rmax) = rescaled.iter().fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
    let mut r = rng(10);
    let (mut lo, mut hi) = (f64::MAX, f64::MIN);
    for _ in 0..10_000 / 16 {
        let batch = sample_patch_batch::<f32, _>(&images, 16, p, &mut r, true).unwrap();
        for g in &batch.gts {
            lo = lo.min(g.count());
            hi = hi.max(g.count());
        }
    }
    println!("patch counts span [{lo:.3}, {hi:.3}]; rescaled image counts span [{rmin:.3}, {rmax:.3}]");
    assert!(hi - lo > rmax - rmin);
    assert!(lo < rmin && hi > rmax);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn patches_are_exact_windows(seed in any::<u64>(), flip in any::<bool>()) {
        let images = train_images(3, 56);
        let batch = sample_patch_batch::<f64, _>(&images, 5, 24, &mut rng(seed), flip).unwrap();
        for k in 0..5 {
            let (top, left) = batch.offsets[k];
            prop_assert!(top <= 32 && left <= 32);
            let src = &images[batch.sources[k]];
            let mirrored = batch.flipped[k];
            prop_assert!(flip || !mirrored);
            for i in 0..24 {
                for j in 0..24 {
                    let sj = if mirrored { 23 - j } else { j };
                    prop_assert_eq!(batch.images.at(k, 0, i, j), src.image.get(top + i, left + sj));
                    prop_assert_eq!(batch.gts[k].grid.get(i, j), src.density.grid.get(top + i, left + sj));
                }
            }
        }
        let again = sample_patch_batch::<f64, _>(&images, 5, 24, &mut rng(seed), flip).unwrap();
        prop_assert_eq!(again, batch);
    }

    #[test]
    fn fixed_density_of_scene_keeps_count(seed in any::<u64>()) {
        let p = SceneParams { seed, ..SceneParams::default() };
        let (_, ann) = synth_scene(&p, &mut rng(seed)).unwrap();
        let m = density_fixed(&ann, 15.0).unwrap();
        prop_assert!((m.count() - ann.count() as f64).abs() < 1e-3);
    }
}
