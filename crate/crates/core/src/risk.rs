//! Questionnaire-based risk classification, balanced feature ordering and
//! counterfactual re-decisions.
//!
//! Every question is one feature. An answer contributes `weight * tendency`,
//! where tendency in `[-1, 1]` runs from risk-averse to risk-seeking. The
//! score is the weighted mean tendency over the features that are not
//! excluded, and maps onto five ordinal levels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureId(pub String);

impl FeatureId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for FeatureId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// Ordinal risk level, 1 (very risk-averse) to 5 (very risk-seeking).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct RiskLevel(u8);

impl RiskLevel {
    pub const MIN: u8 = 1;
    pub const MAX: u8 = 5;

    pub fn new(level: u8) -> Result<Self, RiskError> {
        if (Self::MIN..=Self::MAX).contains(&level) {
            Ok(Self(level))
        } else {
            Err(RiskError::InvalidLevel(level as i64))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Fixed symmetric breakpoints at ±0.2 and ±0.6; the neutral band
    /// `[-0.2, 0.2]` is closed on both sides.
    pub fn from_score(score: f64) -> Self {
        let level = if score < -0.6 {
            1
        } else if score < -0.2 {
            2
        } else if score <= 0.2 {
            3
        } else if score <= 0.6 {
            4
        } else {
            5
        };
        Self(level)
    }
}

impl TryFrom<u8> for RiskLevel {
    type Error = RiskError;

    fn try_from(v: u8) -> Result<Self, RiskError> {
        Self::new(v)
    }
}

impl From<RiskLevel> for u8 {
    fn from(l: RiskLevel) -> u8 {
        l.0
    }
}

impl fmt::Display for RiskLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerOption {
    pub option_id: String,
    pub label: String,
    pub tendency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Question {
    pub question_id: FeatureId,
    pub text: String,
    /// Short name used when the feature is explained; defaults to the id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub options: Vec<AnswerOption>,
}

impl Question {
    pub fn label(&self) -> &str {
        self.label.as_deref().unwrap_or(self.question_id.as_str())
    }

    pub fn option(&self, option_id: &str) -> Option<&AnswerOption> {
        self.options.iter().find(|o| o.option_id == option_id)
    }

    pub fn validate(&self) -> Result<(), RiskError> {
        if self.options.len() < 2 {
            return Err(RiskError::InvalidQuestion {
                question_id: self.question_id.clone(),
                reason: "needs at least two options".into(),
            });
        }
        let mut seen = BTreeSet::new();
        for o in &self.options {
            if !seen.insert(o.option_id.as_str()) {
                return Err(RiskError::InvalidQuestion {
                    question_id: self.question_id.clone(),
                    reason: format!("duplicate option_id {}", o.option_id),
                });
            }
            if !(-1.0..=1.0).contains(&o.tendency) {
                return Err(RiskError::InvalidQuestion {
                    question_id: self.question_id.clone(),
                    reason: format!("option {} tendency outside [-1, 1]", o.option_id),
                });
            }
        }
        Ok(())
    }
}

/// Questionnaire plus one non-negative weight per question.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskModel {
    pub questions: Vec<Question>,
    pub weights: BTreeMap<FeatureId, f64>,
}

impl RiskModel {
    pub fn new(questions: Vec<Question>, weights: BTreeMap<FeatureId, f64>) -> Result<Self, RiskError> {
        let mut ids = BTreeSet::new();
        for q in &questions {
            q.validate()?;
            if !ids.insert(q.question_id.clone()) {
                return Err(RiskError::InvalidQuestion {
                    question_id: q.question_id.clone(),
                    reason: "duplicate question_id".into(),
                });
            }
            match weights.get(&q.question_id) {
                None => return Err(RiskError::MissingWeight(q.question_id.clone())),
                Some(w) if !(*w >= 0.0) || !w.is_finite() => {
                    return Err(RiskError::InvalidWeight(q.question_id.clone()))
                }
                _ => {}
            }
        }
        if let Some(extra) = weights.keys().find(|k| !ids.contains(*k)) {
            return Err(RiskError::UnknownFeature(extra.clone()));
        }
        Ok(Self { questions, weights })
    }

    pub fn question(&self, id: &FeatureId) -> Option<&Question> {
        self.questions.iter().find(|q| &q.question_id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureContribution {
    pub feature_id: FeatureId,
    pub label: String,
    pub weight: f64,
    pub tendency: f64,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskDecision {
    pub score: f64,
    pub level: RiskLevel,
    pub contributions: Vec<FeatureContribution>,
    pub excluded: BTreeSet<FeatureId>,
}

impl RiskDecision {
    /// Builds a decision from contributions, scoring only the features not in
    /// `excluded`.
    pub fn from_contributions(
        contributions: Vec<FeatureContribution>,
        excluded: BTreeSet<FeatureId>,
    ) -> Self {
        let (num, den) = contributions
            .iter()
            .filter(|c| !excluded.contains(&c.feature_id))
            .fold((0.0, 0.0), |(n, d), c| (n + c.contribution, d + c.weight));
        let score = if den > 0.0 { num / den } else { 0.0 };
        Self {
            score,
            level: RiskLevel::from_score(score),
            contributions,
            excluded,
        }
    }

    pub fn feature_ids(&self) -> impl Iterator<Item = &FeatureId> {
        self.contributions.iter().map(|c| &c.feature_id)
    }

    pub fn contribution(&self, id: &FeatureId) -> Option<&FeatureContribution> {
        self.contributions.iter().find(|c| &c.feature_id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialAssessment {
    pub self_level: RiskLevel,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RiskError {
    #[error("missing answer for question {0}")]
    MissingAnswer(FeatureId),
    #[error("question {question_id} has no option {option_id}")]
    UnknownOption {
        question_id: FeatureId,
        option_id: String,
    },
    #[error("answer for unknown question {0}")]
    UnknownQuestion(FeatureId),
    #[error("no weight configured for question {0}")]
    MissingWeight(FeatureId),
    #[error("weight for {0} must be a non-negative finite number")]
    InvalidWeight(FeatureId),
    #[error("unknown feature {0}")]
    UnknownFeature(FeatureId),
    #[error("question {question_id}: {reason}")]
    InvalidQuestion { question_id: FeatureId, reason: String },
    #[error("every feature would be excluded")]
    AllFeaturesExcluded,
    #[error("risk level must be within 1..=5 (got {0})")]
    InvalidLevel(i64),
    #[error("initial assessment already recorded")]
    AlreadyRecorded,
    #[error("no features to order")]
    NoFeatures,
}

/// One contribution per question, scored as the weighted mean tendency.
pub fn classify_risk(
    answers: &BTreeMap<FeatureId, String>,
    model: &RiskModel,
) -> Result<RiskDecision, RiskError> {
    if let Some(unknown) = answers.keys().find(|k| model.question(k).is_none()) {
        return Err(RiskError::UnknownQuestion(unknown.clone()));
    }
    let mut contributions = Vec::with_capacity(model.questions.len());
    for q in &model.questions {
        let chosen = answers
            .get(&q.question_id)
            .ok_or_else(|| RiskError::MissingAnswer(q.question_id.clone()))?;
        let opt = q.option(chosen).ok_or_else(|| RiskError::UnknownOption {
            question_id: q.question_id.clone(),
            option_id: chosen.clone(),
        })?;
        let weight = model.weights[&q.question_id];
        contributions.push(FeatureContribution {
            feature_id: q.question_id.clone(),
            label: q.label().to_owned(),
            weight,
            tendency: opt.tendency,
            contribution: weight * opt.tendency,
        });
    }
    Ok(RiskDecision::from_contributions(contributions, BTreeSet::new()))
}

/// Presentation order balancing risk-averse against risk-seeking features.
///
/// Negative and non-negative contributions form two classes, each sorted by
/// descending magnitude (ties by ascending id). The output alternates
/// between the classes, starting with the class holding the largest
/// magnitude, until one runs out; the rest of the other follows.
pub fn order_features(contributions: &[FeatureContribution]) -> Result<Vec<FeatureId>, RiskError> {
    if contributions.is_empty() {
        return Err(RiskError::NoFeatures);
    }
    let by_magnitude = |a: &&FeatureContribution, b: &&FeatureContribution| {
        b.contribution
            .abs()
            .total_cmp(&a.contribution.abs())
            .then_with(|| a.feature_id.cmp(&b.feature_id))
    };
    let (mut neg, mut nonneg): (Vec<_>, Vec<_>) =
        contributions.iter().partition(|c| c.contribution < 0.0);
    neg.sort_by(by_magnitude);
    nonneg.sort_by(by_magnitude);

    // The class whose head sorts first under the same comparator leads.
    let neg_leads = match (neg.first(), nonneg.first()) {
        (Some(n), Some(p)) => by_magnitude(n, p).is_lt(),
        (Some(_), None) => true,
        _ => false,
    };
    let (first, second) = if neg_leads { (neg, nonneg) } else { (nonneg, neg) };

    let mut out = Vec::with_capacity(contributions.len());
    let mut a = first.into_iter();
    let mut b = second.into_iter();
    loop {
        match (a.next(), b.next()) {
            (Some(x), Some(y)) => {
                out.push(x.feature_id.clone());
                out.push(y.feature_id.clone());
            }
            (Some(x), None) => {
                out.push(x.feature_id.clone());
                out.extend(a.map(|c| c.feature_id.clone()));
                break;
            }
            (None, Some(y)) => {
                out.push(y.feature_id.clone());
                out.extend(b.map(|c| c.feature_id.clone()));
                break;
            }
            (None, None) => break,
        }
    }
    Ok(out)
}

/// Re-decides without the features in `exclude` (on top of any already
/// excluded). The input decision is left untouched.
pub fn counterfactual(
    decision: &RiskDecision,
    exclude: &BTreeSet<FeatureId>,
) -> Result<RiskDecision, RiskError> {
    if let Some(unknown) = exclude.iter().find(|f| decision.contribution(f).is_none()) {
        return Err(RiskError::UnknownFeature(unknown.clone()));
    }
    let excluded: BTreeSet<FeatureId> = decision.excluded.union(exclude).cloned().collect();
    if decision.feature_ids().all(|f| excluded.contains(f)) {
        return Err(RiskError::AllFeaturesExcluded);
    }
    Ok(RiskDecision::from_contributions(
        decision.contributions.clone(),
        excluded,
    ))
}

/// Holds the user's own assessment, which may be given once per session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssessmentSlot(Option<InitialAssessment>);

impl AssessmentSlot {
    pub fn get(&self) -> Option<&InitialAssessment> {
        self.0.as_ref()
    }

    pub fn record(&mut self, self_level: i64, timestamp_ms: u64) -> Result<&InitialAssessment, RiskError> {
        record_initial_assessment(self, self_level, timestamp_ms)
    }
}

pub fn record_initial_assessment(
    slot: &mut AssessmentSlot,
    self_level: i64,
    timestamp_ms: u64,
) -> Result<&InitialAssessment, RiskError> {
    if slot.0.is_some() {
        return Err(RiskError::AlreadyRecorded);
    }
    let level = u8::try_from(self_level)
        .ok()
        .and_then(|l| RiskLevel::new(l).ok())
        .ok_or(RiskError::InvalidLevel(self_level))?;
    Ok(slot.0.insert(InitialAssessment {
        self_level: level,
        timestamp_ms,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn contrib(id: &str, weight: f64, tendency: f64) -> FeatureContribution {
        FeatureContribution {
            feature_id: FeatureId::new(id),
            label: id.to_owned(),
            weight,
            tendency,
            contribution: weight * tendency,
        }
    }

    fn model(spec: &[(&str, f64, &[f64])]) -> RiskModel {
        let questions = spec
            .iter()
            .map(|(id, _, tendencies)| Question {
                question_id: FeatureId::new(*id),
                text: format!("{id}?"),
                label: None,
                options: tendencies
                    .iter()
                    .enumerate()
                    .map(|(i, t)| AnswerOption {
                        option_id: format!("o{i}"),
                        label: format!("option {i}"),
                        tendency: *t,
                    })
                    .collect(),
            })
            .collect();
        let weights = spec.iter().map(|(id, w, _)| (FeatureId::new(*id), *w)).collect();
        RiskModel::new(questions, weights).unwrap()
    }

    fn answers(pairs: &[(&str, &str)]) -> BTreeMap<FeatureId, String> {
        pairs
            .iter()
            .map(|(q, o)| (FeatureId::new(*q), o.to_string()))
            .collect()
    }

    #[test]
    fn neutral_answers_score_zero() {
        let m = model(&[("a", 1.0, &[0.0, 1.0]), ("b", 2.0, &[0.0, -1.0])]);
        let d = classify_risk(&answers(&[("a", "o0"), ("b", "o0")]), &m).unwrap();
        assert_eq!(d.score, 0.0);
        assert_eq!(d.level.get(), 3);
    }

    #[test]
    fn opposite_tendencies_cancel() {
        let m = model(&[("a", 1.0, &[1.0, -1.0]), ("b", 1.0, &[1.0, -1.0])]);
        let d = classify_risk(&answers(&[("a", "o0"), ("b", "o1")]), &m).unwrap();
        assert_eq!(d.score, 0.0);
        assert_eq!(d.level.get(), 3);
    }

    #[test]
    fn weighted_mean_hand_example() {
        // (2*1 - 0.5 - 0.5) / 4 = 0.25
        let m = model(&[
            ("a", 2.0, &[1.0, 0.0]),
            ("b", 1.0, &[-0.5, 0.0]),
            ("c", 1.0, &[-0.5, 0.0]),
        ]);
        let d = classify_risk(&answers(&[("a", "o0"), ("b", "o0"), ("c", "o0")]), &m).unwrap();
        assert_eq!(d.score, 0.25);
        assert_eq!(d.level.get(), 4);
    }

    #[test]
    fn classify_errors() {
        let m = model(&[("a", 1.0, &[1.0, -1.0]), ("b", 1.0, &[1.0, -1.0])]);
        assert_eq!(
            classify_risk(&answers(&[("a", "o0")]), &m),
            Err(RiskError::MissingAnswer(FeatureId::new("b")))
        );
        assert!(matches!(
            classify_risk(&answers(&[("a", "o0"), ("b", "zz")]), &m),
            Err(RiskError::UnknownOption { .. })
        ));
    }

    #[test]
    fn model_rejects_weight_for_unknown_question() {
        let q = Question {
            question_id: "a".into(),
            text: "?".into(),
            label: None,
            options: vec![
                AnswerOption { option_id: "x".into(), label: "x".into(), tendency: 1.0 },
                AnswerOption { option_id: "y".into(), label: "y".into(), tendency: -1.0 },
            ],
        };
        let weights = [("a".into(), 1.0), ("zz".into(), 1.0)].into_iter().collect();
        assert_eq!(
            RiskModel::new(vec![q], weights),
            Err(RiskError::UnknownFeature("zz".into()))
        );
    }

    #[test]
    fn level_breakpoints() {
        let eps = 1e-12;
        let cases = [
            (-1.0, 1),
            (-0.6 - eps, 1),
            (-0.6, 2),
            (-0.2 - eps, 2),
            (-0.2, 3),
            (0.2, 3),
            (0.2 + eps, 4),
            (0.6, 4),
            (0.6 + eps, 5),
            (1.0, 5),
        ];
        for (score, level) in cases {
            assert_eq!(RiskLevel::from_score(score).get(), level, "score {score}");
        }
    }

    #[test]
    fn ordering_alternates_classes() {
        let c = [
            contrib("a", 1.0, 0.8),
            contrib("b", 1.0, -0.6),
            contrib("c", 1.0, 0.3),
            contrib("d", 1.0, -0.1),
        ];
        let ids: Vec<_> = order_features(&c).unwrap().into_iter().map(|f| f.0).collect();
        assert_eq!(ids, ["a", "b", "c", "d"]);
    }

    #[test]
    fn ordering_single_class_is_descending() {
        let c = [contrib("x", 1.0, 0.1), contrib("y", 1.0, 0.9), contrib("z", 2.0, 0.3)];
        let ids: Vec<_> = order_features(&c).unwrap().into_iter().map(|f| f.0).collect();
        assert_eq!(ids, ["y", "z", "x"]);
        let one = order_features(&[contrib("solo", 1.0, -0.2)]).unwrap();
        assert_eq!(one, vec![FeatureId::new("solo")]);
    }

    #[test]
    fn ordering_zero_joins_nonnegative_class() {
        let c = [contrib("neg", 1.0, -0.5), contrib("zero", 1.0, 0.0), contrib("neg2", 1.0, -0.4)];
        let ids: Vec<_> = order_features(&c).unwrap().into_iter().map(|f| f.0).collect();
        assert_eq!(ids, ["neg", "zero", "neg2"]);
    }

    fn gender_income() -> RiskDecision {
        RiskDecision::from_contributions(
            vec![contrib("gender", 1.0, -1.0), contrib("income", 1.0, 1.0)],
            BTreeSet::new(),
        )
    }

    #[test]
    fn counterfactual_without_gender() {
        let d = gender_income();
        let cf = counterfactual(&d, &[FeatureId::new("gender")].into()).unwrap();
        assert_eq!(cf.score, 1.0);
        assert_eq!(cf.level.get(), 5);
        assert_eq!(d.score, 0.0);
        assert!(d.excluded.is_empty());
    }

    #[test]
    fn counterfactual_identity_and_zero_weight() {
        let d = gender_income();
        assert_eq!(counterfactual(&d, &BTreeSet::new()).unwrap(), d);
        let d = RiskDecision::from_contributions(
            vec![contrib("a", 1.0, 0.5), contrib("b", 0.0, -1.0)],
            BTreeSet::new(),
        );
        let cf = counterfactual(&d, &[FeatureId::new("b")].into()).unwrap();
        assert_eq!((cf.score, cf.level), (d.score, d.level));
    }

    #[test]
    fn counterfactual_errors() {
        let d = gender_income();
        let all = [FeatureId::new("gender"), FeatureId::new("income")].into();
        assert_eq!(counterfactual(&d, &all), Err(RiskError::AllFeaturesExcluded));
        assert_eq!(
            counterfactual(&d, &[FeatureId::new("age")].into()),
            Err(RiskError::UnknownFeature("age".into()))
        );
    }

    #[test]
    fn initial_assessment_once() {
        let mut slot = AssessmentSlot::default();
        assert_eq!(slot.record(3, 10).unwrap().self_level.get(), 3);
        assert_eq!(slot.record(4, 20), Err(RiskError::AlreadyRecorded));
        let mut fresh = AssessmentSlot::default();
        assert_eq!(fresh.record(6, 0), Err(RiskError::InvalidLevel(6)));
        assert!(fresh.get().is_none());
    }
}
