mod common;

use common::{oracle_rank, oracle_summary, orig, random_instance, record, KS};
use phenomatch::cv::GalleryConfig;
use phenomatch::embed::EmbeddingSet;
use phenomatch::eval::{evaluate, EvalError, EvalOptions, EvaluationReport};
use phenomatch::seed::rng_for;
use proptest::prelude::*;

fn options() -> EvalOptions {
    EvalOptions { variants: vec![orig("m1")], ks: KS.to_vec(), ..EvalOptions::default() }
}

fn config(exclusion: bool) -> GalleryConfig {
    GalleryConfig { exclusion, ..GalleryConfig::frequent() }
}

fn check_against_oracle(test: &EmbeddingSet, gallery: &EmbeddingSet, exclusion: bool) -> Option<EvaluationReport> {
    let got = evaluate(test, gallery, &config(exclusion), &options());
    let Some(expected) = oracle_rank(test, gallery, &[orig("m1")], exclusion) else {
        assert!(matches!(got, Err(EvalError::EmptyGalleryAfterExclusion { .. })), "{got:?}");
        return None;
    };
    let report = got.expect("oracle found a ranking");
    let summary = oracle_summary(&expected, &KS);
    assert_eq!(report.per_k, summary.per_k);
    assert_eq!(report.per_class, summary.per_class);
    assert_eq!(report.counts, summary.counts);
    let mut images: Vec<_> = report.images.iter().collect();
    images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    for (o, e) in images.iter().zip(&expected) {
        assert_eq!(o.image_id, e.image_id);
        assert_eq!(o.rank_of_truth, e.rank_of_truth, "{}", o.image_id);
        assert_eq!(o.top1_class, e.top1_class);
        assert_eq!(o.top1_score.to_bits(), e.top1_score.to_bits());
    }
    Some(report)
}

#[test]
fn matches_brute_force_on_random_instances() {
    let mut rng = rng_for(11, "tests/eval/oracle");
    let mut compared = 0;
    for _ in 0..300 {
        let (test, gallery) = random_instance(&mut rng);
        for exclusion in [true, false] {
            if check_against_oracle(&test, &gallery, exclusion).is_some() {
                compared += 1;
            }
        }
    }
    assert!(compared > 300, "only {compared} instances had a gallery");
}

#[test]
fn truth_absent_from_gallery_is_a_miss() {
    let v = orig("m1");
    let mut gallery = EmbeddingSet::new(2);
    gallery.records.push(record("g0", "p0", "A", &v, vec![1.0, 0.0]));
    let mut test = EmbeddingSet::new(2);
    test.records.push(record("t0", "p1", "A", &v, vec![1.0, 0.1]));
    test.records.push(record("t1", "p2", "B", &v, vec![1.0, 0.0]));
    let report = check_against_oracle(&test, &gallery, true).unwrap();
    assert_eq!(report.per_class["B"][&30], 0.0);
    assert_eq!(report.per_k[&1], 0.5);
    assert_eq!(report.classes_absent_from_gallery, vec!["B".to_string()]);
}

#[test]
fn ties_go_to_the_smaller_class_id() {
    let v = orig("m1");
    let mut gallery = EmbeddingSet::new(2);
    gallery.records.push(record("g0", "p0", "Z", &v, vec![0.0, 1.0]));
    gallery.records.push(record("g1", "p1", "A", &v, vec![0.0, 2.0]));
    let mut test = EmbeddingSet::new(2);
    test.records.push(record("t0", "p2", "Z", &v, vec![1.0, 1.0]));
    let report = check_against_oracle(&test, &gallery, true).unwrap();
    assert_eq!(report.images[0].top1_class, "A");
    assert_eq!(report.images[0].rank_of_truth, Some(2));
}

/// Copies every test image of `class` under fresh image ids.
fn duplicate_class(test: &EmbeddingSet, class: &str, copies: usize) -> EmbeddingSet {
    let mut out = test.clone();
    for c in 0..copies {
        for r in test.records.iter().filter(|r| r.class_id == class) {
            let mut dup = r.clone();
            dup.image_id = format!("{}-dup{c}", r.image_id);
            out.records.push(dup);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mean_accuracy_is_monotone_in_k(seed in any::<u64>()) {
        let mut rng = rng_for(seed, "tests/eval/monotone");
        let (test, gallery) = random_instance(&mut rng);
        if let Ok(report) = evaluate(&test, &gallery, &config(false), &options()) {
            let values: Vec<f64> = report.per_k.values().copied().collect();
            prop_assert!(values.windows(2).all(|w| w[0] <= w[1]), "{values:?}");
            for per in report.per_class.values() {
                let a: Vec<f64> = per.values().copied().collect();
                prop_assert!(a.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(a.iter().all(|x| (0.0..=1.0).contains(x)));
            }
        }
    }

    #[test]
    fn duplicating_a_class_leaves_the_mean_unchanged(seed in any::<u64>(), copies in 1usize..4) {
        let mut rng = rng_for(seed, "tests/eval/duplicate");
        let (test, gallery) = random_instance(&mut rng);
        let Ok(base) = evaluate(&test, &gallery, &config(false), &options()) else { return Ok(()) };
        let class = test.records[0].class_id.clone();
        let dup = evaluate(&duplicate_class(&test, &class, copies), &gallery, &config(false), &options()).unwrap();
        prop_assert_eq!(&base.per_k, &dup.per_k);
        prop_assert_eq!(&base.per_class, &dup.per_class);
        prop_assert_eq!(dup.counts[&class], base.counts[&class] * (copies + 1));
    }
}
