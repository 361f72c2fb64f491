//! Checks that need the full default synthetic benchmark.

use std::sync::OnceLock;

use fortress::data::Fractions;
use fortress::metrics::{paired_delta_significance, BootstrapConfig};
use fortress::model::{sigmoid, train, BoostedModel, FeatureMask, TrainConfig, TrainSet};
use fortress::pipeline::{split_dataset, Splits};
use fortress::stability::{analyze, prune_candidates, CandidateCount, StabilityReport};
use fortress::synth::{generate, FeatureRole, PlantedTruth, SynthConfig};

struct Bench {
    splits: Splits,
    truth: PlantedTruth,
    model: BoostedModel,
    stability: StabilityReport,
}

fn bench() -> &'static Bench {
    static BENCH: OnceLock<Bench> = OnceLock::new();
    BENCH.get_or_init(|| {
        let (ds, truth) = generate(&SynthConfig::default()).unwrap();
        let splits = split_dataset(&ds, Fractions::default(), "fortress").unwrap();
        let model = train(
            &TrainSet::from_dataset(&splits.train),
            &FeatureMask::all(ds.schema().len()),
            &TrainConfig::default(),
        )
        .unwrap();
        let stability = analyze(&model, &splits.val, 75.0).unwrap();
        Bench {
            splits,
            truth,
            model,
            stability,
        }
    })
}

#[test]
fn noise_features_lead_the_ranking() {
    let b = bench();
    let noise = b.truth.indices_with(FeatureRole::EngNoise);
    let top: Vec<usize> = b.stability.feature_cv_ranking[..noise.len()]
        .iter()
        .map(|f| f.index)
        .collect();
    for j in &noise {
        assert!(top.contains(j), "noise feature {j} outside the top {}", noise.len());
    }
}

#[test]
fn auto_candidates_contain_every_noise_feature() {
    let b = bench();
    let cands = prune_candidates(&b.stability.feature_cv_ranking, CandidateCount::Auto).unwrap();
    assert_eq!(cands.len(), 13);
    for j in b.truth.indices_with(FeatureRole::EngNoise) {
        assert!(cands.iter().any(|c| c.index == j));
    }
}

#[test]
fn high_cv_set_matches_threshold() {
    let s = &bench().stability;
    let expected: Vec<&String> = s
        .per_entity_cv
        .iter()
        .filter(|(_, &cv)| cv >= s.cv_threshold)
        .map(|(e, _)| e)
        .collect();
    assert_eq!(s.high_cv_entities.iter().collect::<Vec<_>>(), expected);
    assert!(s.high_cv_entities.len() * 4 >= s.per_entity_cv.len());
}

#[test]
fn removing_a_harmful_feature_is_significant() {
    let b = bench();
    let val = &b.splits.val;
    let noise = b.truth.indices_with(FeatureRole::EngNoise)[0];
    let clean = b.model.predict_dataset(val).unwrap();
    // The same model with a noise feature leaking straight into the margin.
    let harmed: Vec<f64> = val
        .samples()
        .iter()
        .map(|s| {
            let m = b.model.margin(&s.features).unwrap();
            sigmoid(m + 2.0 * s.features[noise].unwrap())
        })
        .collect();
    let ids: Vec<&str> = val.samples().iter().map(|s| s.entity_id.as_str()).collect();
    let d = paired_delta_significance(&harmed, &clean, &val.binary_labels(), &ids, &BootstrapConfig::new(1000, 42))
        .unwrap();
    assert!(d.significant_improvement, "{d:?}");
    assert!(d.ci.lo > 0.0);
}
