//! Grounding ledger and clarification machinery.
//!
//! Each feature moves through an ordered set of grounding levels. When a
//! reaction opens a clarification sub-dialog, explanation strategies are
//! tried in a fixed ladder order. Utterances come from an external dialog
//! service when one is configured and reachable, otherwise from templates.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phase::Phase;
use crate::risk::{counterfactual, FeatureContribution, FeatureId, RiskDecision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "level", rename_all = "snake_case")]
pub enum GroundingLevel {
    NotPresented,
    Presented,
    ReactionDetected,
    Clarifying { attempt: u32 },
    Understood,
    UnderstoodWithReservation,
    Agreed,
    Disagreed,
}

impl GroundingLevel {
    /// Whether `self -> to` is an edge of the grounding graph.
    pub fn can_advance_to(self, to: GroundingLevel) -> bool {
        use GroundingLevel::*;
        matches!(
            (self, to),
            (NotPresented, Presented)
                | (Presented, ReactionDetected)
                | (Presented, Agreed)
                | (ReactionDetected, Clarifying { attempt: 0 })
                | (ReactionDetected, Understood)
                | (ReactionDetected, UnderstoodWithReservation)
                | (Clarifying { .. }, Understood)
                | (Clarifying { .. }, UnderstoodWithReservation)
                | (Understood, Agreed)
                | (Understood, Disagreed)
                | (UnderstoodWithReservation, Agreed)
                | (UnderstoodWithReservation, Disagreed)
        ) || matches!((self, to), (Clarifying { attempt: a }, Clarifying { attempt: b }) if b == a + 1)
    }

    pub fn is_final(self) -> bool {
        matches!(self, GroundingLevel::Agreed | GroundingLevel::Disagreed)
    }
}

impl fmt::Display for GroundingLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroundingLevel::Clarifying { attempt } => write!(f, "clarifying({attempt})"),
            other => {
                let v = serde_json::to_value(other).map_err(|_| fmt::Error)?;
                f.write_str(v["level"].as_str().unwrap_or("?"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GroundingError {
    #[error("feature {feature_id}: illegal grounding transition {from} -> {to}")]
    IllegalGroundingTransition {
        feature_id: FeatureId,
        from: GroundingLevel,
        to: GroundingLevel,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingChange {
    pub feature_id: FeatureId,
    pub from: GroundingLevel,
    pub to: GroundingLevel,
}

/// Per-feature grounding levels. Unknown features are `NotPresented`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroundingLedger {
    levels: BTreeMap<FeatureId, GroundingLevel>,
}

impl GroundingLedger {
    pub fn level(&self, feature: &FeatureId) -> GroundingLevel {
        self.levels
            .get(feature)
            .copied()
            .unwrap_or(GroundingLevel::NotPresented)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&FeatureId, &GroundingLevel)> {
        self.levels.iter()
    }

    pub fn advance(
        &mut self,
        feature: &FeatureId,
        to: GroundingLevel,
    ) -> Result<GroundingChange, GroundingError> {
        let from = self.level(feature);
        if !from.can_advance_to(to) {
            return Err(GroundingError::IllegalGroundingTransition {
                feature_id: feature.clone(),
                from,
                to,
            });
        }
        self.levels.insert(feature.clone(), to);
        Ok(GroundingChange {
            feature_id: feature.clone(),
            from,
            to,
        })
    }
}

/// Returns a copy of `ledger` with `feature` moved to `to`.
pub fn advance_grounding(
    ledger: &GroundingLedger,
    feature: &FeatureId,
    to: GroundingLevel,
) -> Result<GroundingLedger, GroundingError> {
    let mut next = ledger.clone();
    next.advance(feature, to)?;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Repeat,
    Rephrase,
    Contrast,
    ChangeFocus,
}

impl Strategy {
    pub const LADDER: [Strategy; 4] = [
        Strategy::Repeat,
        Strategy::Rephrase,
        Strategy::Contrast,
        Strategy::ChangeFocus,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Repeat => "repeat",
            Strategy::Rephrase => "rephrase",
            Strategy::Contrast => "contrast",
            Strategy::ChangeFocus => "change_focus",
        }
    }

    pub fn template_id(self) -> &'static str {
        match self {
            Strategy::Repeat => "strategy.repeat",
            Strategy::Rephrase => "strategy.rephrase",
            Strategy::Contrast => "strategy.contrast",
            Strategy::ChangeFocus => "strategy.change_focus",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LadderStep {
    Next(Strategy),
    Exhausted,
}

pub fn next_strategy(attempt: u32) -> LadderStep {
    Strategy::LADDER
        .get(attempt as usize)
        .copied()
        .map_or(LadderStep::Exhausted, LadderStep::Next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    pub phase: Phase,
    pub feature_id: Option<FeatureId>,
    pub strategy: Option<Strategy>,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unknown template {0}")]
    UnknownTemplate(String),
    #[error("template {template}: missing slot {slot}")]
    MissingSlot { template: String, slot: String },
    #[error("template {0}: unterminated placeholder")]
    Unterminated(String),
}

/// Template texts keyed by id. Placeholders are written `{slot}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TemplateSet(BTreeMap<String, String>);

const DEFAULT_TEMPLATES: &[(&str, &str)] = &[
    (
        "initial_assessment",
        "Before you see the system's proposal: how would you rate your own attitude towards risk, from 1 (very cautious) to 5 (very risk-seeking)?",
    ),
    (
        "present_feature",
        "{feature}: you answered \"{answer}\". The system counts this answer {direction}.",
    ),
    ("problem_question", "Do you see a problem with the explanation of {feature}?"),
    (
        "strategy.repeat",
        "Once more: your answer on {feature} counts {direction} in the system's classification.",
    ),
    (
        "strategy.rephrase",
        "Put differently, the system reads your answer on {feature} as a sign that you are {lean} when it comes to risk.",
    ),
    (
        "strategy.contrast",
        "Without {feature}, the system would place you at risk level {counterfactual_level} instead of {level}.",
    ),
    (
        "strategy.change_focus",
        "Let us step back from {feature}: the answer that weighs most besides it is {other_feature}, which counts {other_direction}.",
    ),
    ("understanding_question", "Is the role of {feature} in the decision clearer now?"),
    (
        "agreement_question",
        "Do you agree that {feature} should count in this decision?",
    ),
    (
        "counterfactual",
        "Without {excluded}, the system would assign risk level {level} instead of {original_level}.",
    ),
    (
        "no_counterfactual",
        "There is no counterfactual left to show: you have contested every feature.",
    ),
    (
        "final_request",
        "The system proposes risk level {level}. Please enter your final decision from 1 to 5.",
    ),
];

impl Default for TemplateSet {
    fn default() -> Self {
        Self(
            DEFAULT_TEMPLATES
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        )
    }
}

impl TemplateSet {
    pub fn ids() -> impl Iterator<Item = &'static str> {
        DEFAULT_TEMPLATES.iter().map(|(k, _)| *k)
    }

    pub fn is_known_id(id: &str) -> bool {
        DEFAULT_TEMPLATES.iter().any(|(k, _)| *k == id)
    }

    /// Defaults with `overrides` applied on top.
    pub fn with_overrides(overrides: &BTreeMap<String, String>) -> Self {
        let mut set = Self::default();
        for (k, v) in overrides {
            set.0.insert(k.clone(), v.clone());
        }
        set
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.0.get(id).map(String::as_str)
    }

    pub fn from_map(map: BTreeMap<String, String>) -> Self {
        Self(map)
    }

    pub fn render(&self, id: &str, slots: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        render_utterance(id, slots, self)
    }
}

/// Substitutes `{slot}` placeholders of template `template_id`.
pub fn render_utterance(
    template_id: &str,
    slots: &BTreeMap<&str, String>,
    templates: &TemplateSet,
) -> Result<String, TemplateError> {
    let tpl = templates
        .get(template_id)
        .ok_or_else(|| TemplateError::UnknownTemplate(template_id.to_owned()))?;
    let mut out = String::with_capacity(tpl.len() + 32);
    let mut rest = tpl;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| TemplateError::Unterminated(template_id.to_owned()))?;
        let name = &after[..close];
        let value = slots.get(name).ok_or_else(|| TemplateError::MissingSlot {
            template: template_id.to_owned(),
            slot: name.to_owned(),
        })?;
        out.push_str(value);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Placeholder names used by a template text.
pub fn placeholders(text: &str) -> Vec<&str> {
    let mut names = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                names.push(&after[..close]);
                rest = &after[close + 1..];
            }
            None => break,
        }
    }
    names
}

const FEATURE_SLOTS: &[&str] = &[
    "feature",
    "feature_id",
    "direction",
    "lean",
    "weight",
    "level",
    "counterfactual_level",
    "other_feature",
    "other_direction",
];

/// Slots a template id may use. Unknown ids allow none.
pub fn allowed_slots(id: &str) -> Vec<&'static str> {
    match id {
        "present_feature" => FEATURE_SLOTS.iter().copied().chain(["answer"]).collect(),
        "problem_question" | "understanding_question" | "agreement_question" => FEATURE_SLOTS.to_vec(),
        s if s.starts_with("strategy.") && TemplateSet::is_known_id(s) => FEATURE_SLOTS.to_vec(),
        "counterfactual" => vec!["excluded", "level", "original_level", "score"],
        "final_request" => vec!["level"],
        _ => Vec::new(),
    }
}

/// Checks a template override: known id, terminated placeholders, and only
/// slots the id provides.
pub fn validate_template(id: &str, text: &str) -> Result<(), TemplateError> {
    if !TemplateSet::is_known_id(id) {
        return Err(TemplateError::UnknownTemplate(id.to_owned()));
    }
    let opens = text.matches('{').count();
    let names = placeholders(text);
    if names.len() != opens {
        return Err(TemplateError::Unterminated(id.to_owned()));
    }
    let allowed = allowed_slots(id);
    match names.into_iter().find(|n| !allowed.contains(n)) {
        Some(slot) => Err(TemplateError::MissingSlot {
            template: id.to_owned(),
            slot: slot.to_owned(),
        }),
        None => Ok(()),
    }
}

pub fn direction_phrase(tendency: f64) -> &'static str {
    if tendency > 0.0 {
        "toward risk-seeking"
    } else if tendency < 0.0 {
        "toward risk-averse"
    } else {
        "as neutral"
    }
}

fn lean_phrase(tendency: f64) -> &'static str {
    if tendency > 0.0 {
        "comfortable"
    } else if tendency < 0.0 {
        "cautious"
    } else {
        "undecided"
    }
}

/// Level of the decision with `feature` removed, if anything remains.
pub fn counterfactual_level(decision: &RiskDecision, feature: &FeatureId) -> Option<u8> {
    counterfactual(decision, &[feature.clone()].into())
        .ok()
        .map(|d| d.level.get())
}

/// Strongest other feature by absolute contribution (ties by id), falling
/// back to the feature itself when it is the only one.
fn focus_target<'a>(decision: &'a RiskDecision, feature: &FeatureId) -> Option<&'a FeatureContribution> {
    decision
        .contributions
        .iter()
        .filter(|c| &c.feature_id != feature)
        .min_by(|a, b| {
            b.contribution
                .abs()
                .total_cmp(&a.contribution.abs())
                .then_with(|| a.feature_id.cmp(&b.feature_id))
        })
}

/// Slots available to every feature-level template.
pub fn feature_slots(feature: &FeatureContribution, decision: &RiskDecision) -> BTreeMap<&'static str, String> {
    let mut slots = BTreeMap::new();
    slots.insert("feature", feature.label.clone());
    slots.insert("feature_id", feature.feature_id.to_string());
    slots.insert("direction", direction_phrase(feature.tendency).to_owned());
    slots.insert("lean", lean_phrase(feature.tendency).to_owned());
    slots.insert("weight", format!("{}", feature.weight));
    slots.insert("level", decision.level.to_string());
    slots.insert(
        "counterfactual_level",
        counterfactual_level(decision, &feature.feature_id)
            .map_or_else(|| "unavailable".to_owned(), |l| l.to_string()),
    );
    let other = focus_target(decision, &feature.feature_id).unwrap_or(feature);
    slots.insert("other_feature", other.label.clone());
    slots.insert("other_direction", direction_phrase(other.tendency).to_owned());
    slots
}

/// Which path produced a clarification utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "path", rename_all = "snake_case")]
pub enum UtteranceOrigin {
    Service,
    Fallback { reason: String },
}

impl UtteranceOrigin {
    pub fn fallback(reason: impl Into<String>) -> Self {
        Self::Fallback {
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryTurn {
    pub speaker: Speaker,
    pub text: String,
}

/// Wire body sent to the dialog service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogRequest {
    pub feature_id: FeatureId,
    pub label: String,
    pub tendency: f64,
    pub strategy: Strategy,
    pub history: Vec<HistoryTurn>,
    pub counterfactual_level: Option<u8>,
}

pub const HISTORY_LIMIT: usize = 10;

impl DialogRequest {
    pub fn new(
        feature: &FeatureContribution,
        strategy: Strategy,
        history: &[Utterance],
        decision: &RiskDecision,
    ) -> Self {
        let skip = history.len().saturating_sub(HISTORY_LIMIT);
        Self {
            feature_id: feature.feature_id.clone(),
            label: feature.label.clone(),
            tendency: feature.tendency,
            strategy,
            history: history[skip..]
                .iter()
                .map(|u| HistoryTurn {
                    speaker: u.speaker,
                    text: u.text.clone(),
                })
                .collect(),
            counterfactual_level: counterfactual_level(decision, &feature.feature_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogResponse {
    pub text: String,
}

#[derive(Debug, Error)]
pub enum DialogError {
    #[error("dialog service request failed: {0}")]
    Transport(String),
    #[error("dialog service returned an empty text")]
    EmptyReply,
}

/// Source of generated clarification texts.
pub trait DialogClient: Send + Sync {
    fn clarify(&self, request: &DialogRequest) -> Result<String, DialogError>;
}

/// Posts [`DialogRequest`] JSON to a URL and reads `{"text": ...}` back.
#[derive(Debug, Clone)]
pub struct HttpDialogClient {
    url: String,
    agent: ureq::Agent,
    retries: u32,
}

impl HttpDialogClient {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            url: url.into(),
            agent,
            retries: 1,
        }
    }

    fn attempt(&self, request: &DialogRequest) -> Result<String, DialogError> {
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(request)
            .map_err(|e| DialogError::Transport(e.to_string()))?;
        let body: DialogResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| DialogError::Transport(e.to_string()))?;
        if body.text.trim().is_empty() {
            return Err(DialogError::EmptyReply);
        }
        Ok(body.text)
    }
}

impl DialogClient for HttpDialogClient {
    fn clarify(&self, request: &DialogRequest) -> Result<String, DialogError> {
        let mut last = self.attempt(request);
        for _ in 0..self.retries {
            if last.is_ok() {
                break;
            }
            last = self.attempt(request);
        }
        last
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clarification {
    pub text: String,
    pub strategy: Strategy,
    pub origin: UtteranceOrigin,
}

/// Template-rendered clarification for `strategy`.
pub fn fallback_clarification(
    feature: &FeatureContribution,
    strategy: Strategy,
    decision: &RiskDecision,
    templates: &TemplateSet,
) -> Result<String, TemplateError> {
    templates.render(strategy.template_id(), &feature_slots(feature, decision))
}

/// Produces one clarification utterance, asking the dialog service first
/// when a client is given. Service failures fall back to templates.
pub fn generate_clarification(
    feature: &FeatureContribution,
    strategy: Strategy,
    history: &[Utterance],
    decision: &RiskDecision,
    templates: &TemplateSet,
    client: Option<&dyn DialogClient>,
) -> Result<Clarification, TemplateError> {
    let reason = match client {
        None => "no_client".to_owned(),
        Some(c) => match c.clarify(&DialogRequest::new(feature, strategy, history, decision)) {
            Ok(text) => {
                return Ok(Clarification {
                    text,
                    strategy,
                    origin: UtteranceOrigin::Service,
                })
            }
            Err(DialogError::EmptyReply) => "empty_reply".to_owned(),
            Err(DialogError::Transport(_)) => "service_unavailable".to_owned(),
        },
    };
    Ok(Clarification {
        text: fallback_clarification(feature, strategy, decision, templates)?,
        strategy,
        origin: UtteranceOrigin::fallback(reason),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn contrib(id: &str, weight: f64, tendency: f64) -> FeatureContribution {
        FeatureContribution {
            feature_id: FeatureId::new(id),
            label: id.to_owned(),
            weight,
            tendency,
            contribution: weight * tendency,
        }
    }

    fn decision() -> RiskDecision {
        RiskDecision::from_contributions(
            vec![contrib("gender", 1.0, -1.0), contrib("income", 1.0, 1.0), contrib("age", 2.0, 0.5)],
            BTreeSet::new(),
        )
    }

    #[test]
    fn ladder_order() {
        assert_eq!(next_strategy(0), LadderStep::Next(Strategy::Repeat));
        assert_eq!(next_strategy(1), LadderStep::Next(Strategy::Rephrase));
        assert_eq!(next_strategy(2), LadderStep::Next(Strategy::Contrast));
        assert_eq!(next_strategy(3), LadderStep::Next(Strategy::ChangeFocus));
        assert_eq!(next_strategy(4), LadderStep::Exhausted);
        assert_eq!(next_strategy(u32::MAX), LadderStep::Exhausted);
    }

    #[test]
    fn render_problem_question() {
        let t = TemplateSet::default();
        let slots = [("feature", "gender".to_owned())].into();
        assert_eq!(
            render_utterance("problem_question", &slots, &t).unwrap(),
            "Do you see a problem with the explanation of gender?"
        );
    }

    #[test]
    fn render_verbatim_and_errors() {
        let t = TemplateSet::from_map(
            [("plain".to_owned(), "No slots here.".to_owned()), ("x".to_owned(), "{a} {b}".to_owned())].into(),
        );
        assert_eq!(render_utterance("plain", &BTreeMap::new(), &t).unwrap(), "No slots here.");
        assert_eq!(
            render_utterance("x", &[("a", "1".to_owned())].into(), &t),
            Err(TemplateError::MissingSlot { template: "x".into(), slot: "b".into() })
        );
        assert_eq!(
            render_utterance("nope", &BTreeMap::new(), &t),
            Err(TemplateError::UnknownTemplate("nope".into()))
        );
    }

    #[test]
    fn default_templates_render_with_feature_slots() {
        let t = TemplateSet::default();
        let d = decision();
        let mut slots = feature_slots(&d.contributions[0], &d);
        slots.insert("answer", "x".into());
        slots.insert("excluded", "gender".into());
        slots.insert("original_level", "3".into());
        for id in TemplateSet::ids() {
            t.render(id, &slots).unwrap_or_else(|e| panic!("{id}: {e}"));
        }
    }

    #[test]
    fn fallback_repeat_mentions_feature() {
        let d = decision();
        let income = d.contribution(&"income".into()).unwrap().clone();
        let c = generate_clarification(&income, Strategy::Repeat, &[], &d, &TemplateSet::default(), None).unwrap();
        assert!(c.text.contains("income"));
        assert_eq!(c.origin, UtteranceOrigin::fallback("no_client"));
    }

    #[test]
    fn contrast_uses_counterfactual_level() {
        // score (-1 + 1 + 1) / 4 = 0.25 -> 4; without gender (1 + 1) / 3 -> 5
        let d = decision();
        assert_eq!(d.level.get(), 4);
        let gender = d.contributions[0].clone();
        let text = fallback_clarification(&gender, Strategy::Contrast, &d, &TemplateSet::default()).unwrap();
        assert_eq!(
            text,
            "Without gender, the system would place you at risk level 5 instead of 4."
        );
    }

    #[test]
    fn change_focus_picks_strongest_other() {
        let d = decision();
        let gender = d.contributions[0].clone();
        let text = fallback_clarification(&gender, Strategy::ChangeFocus, &d, &TemplateSet::default()).unwrap();
        // income and age both contribute 1.0; the id tie-break picks age
        assert!(text.contains("is age"), "{text}");
    }

    struct Failing;
    impl DialogClient for Failing {
        fn clarify(&self, _: &DialogRequest) -> Result<String, DialogError> {
            Err(DialogError::Transport("refused".into()))
        }
    }

    struct Echo;
    impl DialogClient for Echo {
        fn clarify(&self, r: &DialogRequest) -> Result<String, DialogError> {
            Ok(format!("{} via {}", r.label, r.strategy.as_str()))
        }
    }

    #[test]
    fn client_paths() {
        let d = decision();
        let f = d.contributions[1].clone();
        let t = TemplateSet::default();
        let c = generate_clarification(&f, Strategy::Rephrase, &[], &d, &t, Some(&Failing)).unwrap();
        assert_eq!(c.origin, UtteranceOrigin::fallback("service_unavailable"));
        let c = generate_clarification(&f, Strategy::Rephrase, &[], &d, &t, Some(&Echo)).unwrap();
        assert_eq!(c.text, "income via rephrase");
        assert_eq!(c.origin, UtteranceOrigin::Service);
    }

    #[test]
    fn request_keeps_last_ten_turns() {
        let d = decision();
        let history: Vec<_> = (0..15)
            .map(|i| Utterance {
                speaker: Speaker::User,
                text: format!("t{i}"),
                phase: Phase::Done,
                feature_id: None,
                strategy: None,
                timestamp_ms: i,
            })
            .collect();
        let r = DialogRequest::new(&d.contributions[0], Strategy::Contrast, &history, &d);
        assert_eq!(r.history.len(), 10);
        assert_eq!(r.history[0].text, "t5");
        assert_eq!(r.counterfactual_level, Some(5));
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["strategy"], "contrast");
    }

    #[test]
    fn grounding_graph() {
        let f = FeatureId::new("gender");
        let mut l = GroundingLedger::default();
        l.advance(&f, GroundingLevel::Presented).unwrap();
        l.advance(&f, GroundingLevel::ReactionDetected).unwrap();
        for a in 0..4 {
            l.advance(&f, GroundingLevel::Clarifying { attempt: a }).unwrap();
        }
        l.advance(&f, GroundingLevel::UnderstoodWithReservation).unwrap();
        l.advance(&f, GroundingLevel::Agreed).unwrap();
        let err = advance_grounding(&l, &f, GroundingLevel::ReactionDetected).unwrap_err();
        assert_eq!(
            err,
            GroundingError::IllegalGroundingTransition {
                feature_id: f.clone(),
                from: GroundingLevel::Agreed,
                to: GroundingLevel::ReactionDetected,
            }
        );
        let g = FeatureId::new("income");
        assert!(l.advance(&g, GroundingLevel::Clarifying { attempt: 0 }).is_err());
        assert!(advance_grounding(&l, &g, GroundingLevel::Presented)
            .and_then(|l| advance_grounding(&l, &g, GroundingLevel::Agreed))
            .is_ok());
    }

    #[test]
    fn clarifying_attempts_must_be_consecutive() {
        use GroundingLevel::*;
        assert!(Clarifying { attempt: 1 }.can_advance_to(Clarifying { attempt: 2 }));
        assert!(!Clarifying { attempt: 1 }.can_advance_to(Clarifying { attempt: 3 }));
        assert!(!Clarifying { attempt: 1 }.can_advance_to(Clarifying { attempt: 1 }));
        assert!(!ReactionDetected.can_advance_to(Clarifying { attempt: 1 }));
    }

    #[test]
    fn default_templates_pass_validation() {
        for id in TemplateSet::ids() {
            validate_template(id, TemplateSet::default().get(id).unwrap()).unwrap();
        }
        assert!(matches!(
            validate_template("final_request", "{feature}"),
            Err(TemplateError::MissingSlot { .. })
        ));
        assert!(validate_template("nope", "x").is_err());
        assert!(validate_template("problem_question", "oops {feature").is_err());
    }
}
