mod common;

use std::collections::BTreeSet;

use common::{fold_violation, oracle_cv, orig, random_subject_map, twenty_subject_fixture, KS};
use phenomatch::cv::{assign_folds, build_gallery, run_cv, subjects_by_class, GalleryConfig, Sources, SplitTable};
use phenomatch::embed::EmbeddingSet;
use phenomatch::eval::{full_variants, EvalOptions};
use phenomatch::seed::rng_for;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn random_assignments_keep_every_invariant() {
    let mut rng = rng_for(3, "tests/cv/assign");
    for _ in 0..100 {
        let subjects = random_subject_map(&mut rng);
        let n_folds = rng.random_range(2..=10);
        let seed = rng.random();
        let folds = assign_folds(&subjects, n_folds, seed).unwrap();
        assert_eq!(folds, assign_folds(&subjects, n_folds, seed).unwrap());
        if let Some(v) = fold_violation(&subjects, &folds) {
            panic!("n_folds {n_folds} seed {seed}: {v}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn invariants_hold_for_any_seed(seed in any::<u64>(), n_folds in 2usize..12) {
        let subjects = random_subject_map(&mut rng_for(seed, "tests/cv/prop"));
        let folds = assign_folds(&subjects, n_folds, seed).unwrap();
        prop_assert_eq!(fold_violation(&subjects, &folds), None);
    }
}

#[test]
fn twenty_subjects_split_pairwise() {
    let rare = twenty_subject_fixture(&mut rng_for(0, "tests/cv/fixture"), 8);
    let subjects = subjects_by_class(&rare);
    let folds = assign_folds(&subjects, 10, 7).unwrap();
    for members in subjects.values() {
        assert_ne!(folds.fold_of(&members[0]), folds.fold_of(&members[1]));
    }
    let frequent = EmbeddingSet::new(8);
    let splits = SplitTable::new();
    let sources = Sources { frequent: &frequent, splits: &splits, rare: &rare };
    let (gallery, test) = build_gallery(sources, &folds, &GalleryConfig::rare_cv(0)).unwrap();
    let count = |s: &EmbeddingSet| s.records.iter().map(|r| r.subject_id.as_str()).collect::<BTreeSet<_>>().len();
    assert_eq!((count(&gallery), count(&test)), (18, 2));
}

fn replay(seed: u64, options: &EvalOptions, exclusion: bool) {
    let rare = twenty_subject_fixture(&mut rng_for(seed, "tests/cv/fixture"), 8);
    let folds = assign_folds(&subjects_by_class(&rare), 10, seed).unwrap();
    let frequent = EmbeddingSet::new(8);
    let splits = SplitTable::new();
    let sources = Sources { frequent: &frequent, splits: &splits, rare: &rare };
    let base = GalleryConfig { exclusion, ..GalleryConfig::rare_cv(0) };
    let report = run_cv(sources, &folds, &base, options).unwrap();
    let expected = oracle_cv(&rare, &folds, &options.variants, exclusion, &KS);
    assert_eq!(report.pooled.per_k, expected.per_k);
    assert_eq!(report.pooled.per_class, expected.per_class);
    assert_eq!(report.pooled.counts, expected.counts);
    assert_eq!(report.per_fold.len(), 10);

    let tested: Vec<&str> = report.pooled.images.iter().map(|o| o.subject_id.as_str()).collect();
    let distinct: BTreeSet<&str> = tested.iter().copied().collect();
    assert_eq!(distinct.len(), 20);
    assert_eq!(tested.len(), 40);
}

#[test]
fn pooled_report_matches_fold_replay() {
    for seed in 0..5 {
        let twelve = EvalOptions { variants: full_variants(&["m1", "m2", "m3"]), ks: KS.to_vec(), ..Default::default() };
        let single = EvalOptions { variants: vec![orig("m2")], ks: KS.to_vec(), ..Default::default() };
        replay(seed, &twelve, true);
        replay(seed, &single, true);
        replay(seed, &single, false);
    }
}
