use std::collections::{BTreeMap, BTreeSet};

use grounding_engine::risk::{
    classify_risk, counterfactual, order_features, AnswerOption, FeatureContribution, FeatureId, Question,
    RiskDecision, RiskError, RiskLevel, RiskModel,
};
use proptest::prelude::*;

fn contribution(id: &str, weight: f64, tendency: f64) -> FeatureContribution {
    FeatureContribution {
        feature_id: FeatureId::new(id),
        label: id.to_owned(),
        weight,
        tendency,
        contribution: weight * tendency,
    }
}

fn contributions() -> impl Strategy<Value = Vec<FeatureContribution>> {
    prop::collection::vec((0.0f64..5.0, -1.0f64..1.0), 1..10).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (w, t))| contribution(&format!("f{i}"), w, t))
            .collect()
    })
}

#[test]
fn level_breakpoints() {
    let cases = [(-1.0, 1), (-0.61, 1), (-0.6, 2), (-0.21, 2), (-0.2, 3), (0.2, 3), (0.21, 4), (0.6, 4), (0.61, 5), (1.0, 5)];
    for (score, level) in cases {
        assert_eq!(RiskLevel::from_score(score).get(), level, "score {score}");
    }
}

#[test]
fn missing_and_unknown_answers_are_rejected() {
    let q = Question {
        question_id: FeatureId::new("income"),
        text: "Income?".into(),
        label: None,
        options: vec![
            AnswerOption { option_id: "low".into(), label: "low".into(), tendency: -0.5 },
            AnswerOption { option_id: "high".into(), label: "high".into(), tendency: 1.0 },
        ],
    };
    let model = RiskModel::new(vec![q], [(FeatureId::new("income"), 1.0)].into()).unwrap();
    assert_eq!(
        classify_risk(&BTreeMap::new(), &model),
        Err(RiskError::MissingAnswer(FeatureId::new("income")))
    );
    let bad = [(FeatureId::new("income"), "mid".to_owned())].into();
    assert!(matches!(classify_risk(&bad, &model), Err(RiskError::UnknownOption { .. })));
    let ok = classify_risk(&[(FeatureId::new("income"), "high".to_owned())].into(), &model).unwrap();
    assert_eq!((ok.score, ok.level.get()), (1.0, 5));
}

#[test]
fn ordering_alternates_from_largest_class() {
    let cs = [
        contribution("a", 2.0, 0.5),
        contribution("b", 1.0, -1.0),
        contribution("c", 3.0, 1.0),
        contribution("d", 1.0, -0.2),
        contribution("e", 1.0, 0.1),
    ];
    let order: Vec<String> = order_features(&cs).unwrap().into_iter().map(|f| f.0).collect();
    assert_eq!(order, ["c", "b", "a", "d", "e"]);
}

#[test]
fn excluding_everything_is_an_error() {
    let d = RiskDecision::from_contributions(vec![contribution("a", 1.0, 1.0)], BTreeSet::new());
    assert_eq!(counterfactual(&d, &[FeatureId::new("a")].into()), Err(RiskError::AllFeaturesExcluded));
    assert!(matches!(
        counterfactual(&d, &[FeatureId::new("zz")].into()),
        Err(RiskError::UnknownFeature(_))
    ));
}

proptest! {
    #[test]
    fn ordering_is_a_permutation(cs in contributions()) {
        let order = order_features(&cs).unwrap();
        let got: BTreeSet<_> = order.iter().cloned().collect();
        let want: BTreeSet<_> = cs.iter().map(|c| c.feature_id.clone()).collect();
        prop_assert_eq!(order.len(), cs.len());
        prop_assert_eq!(got, want);
    }

    #[test]
    fn score_stays_in_tendency_range(cs in contributions()) {
        let d = RiskDecision::from_contributions(cs.clone(), BTreeSet::new());
        let lo = cs.iter().map(|c| c.tendency).fold(f64::INFINITY, f64::min);
        let hi = cs.iter().map(|c| c.tendency).fold(f64::NEG_INFINITY, f64::max);
        if cs.iter().any(|c| c.weight > 0.0) {
            prop_assert!(d.score >= lo - 1e-12 && d.score <= hi + 1e-12);
        } else {
            prop_assert_eq!(d.score, 0.0);
        }
    }

    #[test]
    fn counterfactual_leaves_input_untouched(cs in contributions(), pick in 0usize..10) {
        let d = RiskDecision::from_contributions(cs, BTreeSet::new());
        let before = d.clone();
        let f = d.contributions[pick % d.contributions.len()].feature_id.clone();
        let _ = counterfactual(&d, &[f].into());
        prop_assert_eq!(d, before);
    }
}
