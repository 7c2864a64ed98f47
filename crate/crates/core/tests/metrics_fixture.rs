mod common;

use common::scoring;
use kgi::error::Error;
use kgi::metrics::{score_dataset, Prediction};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn six_hand_scored_instances() {
    scoring::check_fixture(1e-12).unwrap();
}

#[test]
fn report_table_lists_every_column() {
    let (golds, preds) = scoring::load_fixture();
    let table = score_dataset(&golds, &preds).unwrap().table("fixture");
    for h in ["R-Prec", "Recall@5", "Accuracy", "F1", "KILT-AC", "KILT-F1", "fixture", "41.67%", "69.44%"] {
        assert!(table.contains(h), "{h} missing from\n{table}");
    }
}

#[test]
fn perfect_and_empty_answers() {
    let (golds, _) = scoring::load_fixture();
    let perfect: Vec<Prediction> = golds
        .iter()
        .map(|g| Prediction::new(&g.id, &g.gold_answers[0], g.gold_pages.iter().cloned(), 0.0))
        .collect();
    let r = score_dataset(&golds, &perfect).unwrap();
    assert_eq!(scoring::columns(&r), [1.0; 6]);

    let empty: Vec<Prediction> = perfect.iter().map(|p| Prediction { answer: String::new(), ..p.clone() }).collect();
    let r = score_dataset(&golds, &empty).unwrap();
    assert_eq!((r.accuracy, r.r_precision), (0.0, 1.0));
}

#[test]
fn missing_predictions_are_listed() {
    let (golds, preds) = scoring::load_fixture();
    let kept: Vec<Prediction> = preds.into_iter().filter(|p| p.query_id != "m2" && p.query_id != "m5").collect();
    match score_dataset(&golds, &kept) {
        Err(Error::MissingPredictions(ids)) => assert_eq!(ids, ["m2", "m5"]),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn fuzzed_prediction_sets_respect_the_orderings(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (golds, preds) = scoring::fuzz_case(&mut rng, n);
        if let Err(e) = scoring::check_inequalities(&mut rng, &golds, &preds) {
            prop_assert!(false, "{}", e);
        }
    }
}
