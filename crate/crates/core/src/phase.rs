//! Phase control: a pure, total state machine over session events.
//!
//! A session runs through assessment (P0), per-feature explanation (P1),
//! optional understanding (P2) and agreement (P3) sub-dialogs, and the final
//! decision (P4). `step` never fails: events that mean nothing in the current
//! phase are recorded as ignored. Transitions live in a table keyed by phase
//! kind, so extra phases can be plugged in with [`TransitionTable::with_handler`].

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::detect::{PresentationContext, ReactionEvent};
use crate::dialog::{
    direction_phrase, feature_slots, next_strategy, DialogRequest, GroundingChange,
    GroundingLedger, GroundingLevel, LadderStep, Speaker, Strategy, TemplateSet, Utterance,
    UtteranceOrigin,
};
use crate::risk::{
    classify_risk, counterfactual, order_features, AssessmentSlot, FeatureId, Question,
    RiskDecision, RiskError, RiskLevel, RiskModel,
};
use crate::transcript::{EntryKind, TranscriptEntry};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Phase {
    P0Assessment,
    P1Explain { feature_id: FeatureId },
    P2Understanding { feature_id: FeatureId, attempt: u32 },
    P3Agreement { feature_id: FeatureId },
    P4FinalDecision,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PhaseKind {
    Assessment,
    Explain,
    Understanding,
    Agreement,
    FinalDecision,
    Done,
}

impl Phase {
    pub fn kind(&self) -> PhaseKind {
        match self {
            Phase::P0Assessment => PhaseKind::Assessment,
            Phase::P1Explain { .. } => PhaseKind::Explain,
            Phase::P2Understanding { .. } => PhaseKind::Understanding,
            Phase::P3Agreement { .. } => PhaseKind::Agreement,
            Phase::P4FinalDecision => PhaseKind::FinalDecision,
            Phase::Done => PhaseKind::Done,
        }
    }

    pub fn feature(&self) -> Option<&FeatureId> {
        match self {
            Phase::P1Explain { feature_id }
            | Phase::P2Understanding { feature_id, .. }
            | Phase::P3Agreement { feature_id } => Some(feature_id),
            _ => None,
        }
    }
}

/// A user reply. `FinalDecision` carries the chosen level unvalidated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reply {
    NoProblem,
    Problem,
    Understood,
    NotUnderstood,
    Agree,
    Disagree,
    FinalDecision { level: i64 },
}

impl Reply {
    fn canonical_text(&self) -> String {
        match self {
            Reply::NoProblem => "No problem.".into(),
            Reply::Problem => "I see a problem.".into(),
            Reply::Understood => "Understood.".into(),
            Reply::NotUnderstood => "I do not understand.".into(),
            Reply::Agree => "I agree.".into(),
            Reply::Disagree => "I disagree.".into(),
            Reply::FinalDecision { level } => format!("My final decision is level {level}."),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DialogOutcome {
    Text(String),
    Failure(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    SessionStarted,
    AnswersSubmitted {
        answers: BTreeMap<FeatureId, String>,
    },
    InitialAssessmentGiven {
        level: i64,
    },
    PresentationComplete {
        feature_id: FeatureId,
    },
    Reaction {
        reaction: ReactionEvent,
    },
    UserClarificationRequest {
        feature_id: FeatureId,
    },
    UserReply {
        #[serde(flatten)]
        reply: Reply,
        #[serde(default)]
        free_text: String,
    },
    DialogServiceReply {
        outcome: DialogOutcome,
    },
    Timeout {
        token: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub timestamp_ms: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl SessionEvent {
    pub fn new(timestamp_ms: u64, kind: EventKind) -> Self {
        Self { timestamp_ms, kind }
    }

    pub fn reply(timestamp_ms: u64, reply: Reply) -> Self {
        Self::new(
            timestamp_ms,
            EventKind::UserReply {
                reply,
                free_text: String::new(),
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "prompt", rename_all = "snake_case")]
pub enum Prompt {
    Questionnaire { question: Question },
    InitialAssessment { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Ask {
        #[serde(flatten)]
        prompt: Prompt,
    },
    PresentFeature {
        feature_id: FeatureId,
        text: String,
        tendency: f64,
        weight: f64,
    },
    Say {
        utterance: Utterance,
        #[serde(skip_serializing_if = "Option::is_none")]
        origin: Option<UtteranceOrigin>,
    },
    AskProblemQuestion {
        feature_id: FeatureId,
        text: String,
    },
    AskUnderstanding {
        feature_id: FeatureId,
        text: String,
    },
    AskAgreement {
        feature_id: FeatureId,
        text: String,
    },
    PresentCounterfactual {
        decision: RiskDecision,
        original_level: RiskLevel,
        text: String,
    },
    RequestFinalDecision {
        original: RiskDecision,
        counterfactuals: Vec<RiskDecision>,
        contested: Vec<FeatureId>,
        text: String,
    },
    RequestDialog {
        request: DialogRequest,
    },
    Record {
        entry: TranscriptEntry,
    },
    EndSession {
        final_level: RiskLevel,
    },
}

/// Static inputs a session needs from its configuration.
#[derive(Debug, Clone)]
pub struct PhaseSettings {
    pub model: RiskModel,
    pub templates: TemplateSet,
    pub presentation_ms: u64,
    pub dwell_ms: u64,
    pub dialog_enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeadlineKind {
    /// End of the simulated presentation time (scripted runs only).
    PresentationEnd(FeatureId),
    /// End of the post-presentation monitoring dwell.
    Dwell(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Deadline {
    pub at_ms: u64,
    pub kind: DeadlineKind,
}

impl Deadline {
    /// The event a runner delivers when this deadline passes.
    pub fn event(&self) -> SessionEvent {
        let kind = match &self.kind {
            DeadlineKind::PresentationEnd(f) => EventKind::PresentationComplete {
                feature_id: f.clone(),
            },
            DeadlineKind::Dwell(token) => EventKind::Timeout {
                token: token.clone(),
            },
        };
        SessionEvent::new(self.at_ms, kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PresentationWindow {
    pub start_ms: u64,
    pub end_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
struct PendingDialog {
    feature_id: FeatureId,
    strategy: Strategy,
}

#[derive(Debug, Clone)]
pub struct SessionState {
    pub phase: Phase,
    pub started: bool,
    pub queue: VecDeque<FeatureId>,
    pub ledger: GroundingLedger,
    pub decision: Option<RiskDecision>,
    pub initial: AssessmentSlot,
    pub contested: BTreeSet<FeatureId>,
    pub counterfactuals: Vec<RiskDecision>,
    pub history: Vec<Utterance>,
    pub strategies_used: BTreeMap<FeatureId, Vec<Strategy>>,
    pub presentations: Vec<(FeatureId, PresentationWindow)>,
    pub deadline: Option<Deadline>,
    pub final_level: Option<RiskLevel>,
    pub last_event_ms: u64,
    pub next_seq: u64,
    pending_dialog: Option<PendingDialog>,
    settings: Arc<PhaseSettings>,
}

impl SessionState {
    pub fn new(settings: Arc<PhaseSettings>) -> Self {
        Self {
            phase: Phase::P0Assessment,
            started: false,
            queue: VecDeque::new(),
            ledger: GroundingLedger::default(),
            decision: None,
            initial: AssessmentSlot::default(),
            contested: BTreeSet::new(),
            counterfactuals: Vec::new(),
            history: Vec::new(),
            strategies_used: BTreeMap::new(),
            presentations: Vec::new(),
            deadline: None,
            final_level: None,
            last_event_ms: 0,
            next_seq: 0,
            pending_dialog: None,
            settings,
        }
    }

    pub fn settings(&self) -> &PhaseSettings {
        &self.settings
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn awaiting_dialog(&self) -> bool {
        self.pending_dialog.is_some()
    }

    /// Monitoring window of a feature: presentation start through
    /// presentation end plus the dwell time. A presentation that has not
    /// ended yet leaves the window open.
    pub fn monitoring_window(&self, feature: &FeatureId) -> Option<(u64, Option<u64>)> {
        self.presentations
            .iter()
            .find(|(f, _)| f == feature)
            .map(|(_, w)| monitoring_window(*w, self.settings.dwell_ms))
    }
}

/// `[start, end + dwell]`; open-ended while the presentation runs.
pub fn monitoring_window(window: PresentationWindow, dwell_ms: u64) -> (u64, Option<u64>) {
    (window.start_ms, window.end_ms.map(|e| e + dwell_ms))
}

impl PresentationContext for SessionState {
    /// The most recently started feature whose monitoring window holds `t`.
    fn feature_at(&self, t: u64) -> Option<FeatureId> {
        self.presentations
            .iter()
            .rev()
            .find(|(_, w)| {
                let (start, end) = monitoring_window(*w, self.settings.dwell_ms);
                t >= start && end.is_none_or(|e| t <= e)
            })
            .map(|(f, _)| f.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Disposition {
    Handled,
    Ignored(String),
}

fn ignored(reason: impl Into<String>) -> Disposition {
    Disposition::Ignored(reason.into())
}

enum Output {
    Action(Action),
    PhaseChange { from: Option<Phase>, to: Phase },
}

/// Mutable view handed to transition handlers.
pub struct StepContext<'a> {
    pub state: &'a mut SessionState,
    pub t: u64,
    outputs: Vec<Output>,
    grounding: Vec<GroundingChange>,
    note: Option<String>,
}

impl StepContext<'_> {
    pub fn emit(&mut self, action: Action) {
        if let Some(u) = action_utterance(&action, &self.state.phase, self.t) {
            self.state.history.push(u);
        }
        self.outputs.push(Output::Action(action));
    }

    pub fn set_phase(&mut self, to: Phase) {
        let from = std::mem::replace(&mut self.state.phase, to.clone());
        self.outputs.push(Output::PhaseChange {
            from: Some(from),
            to,
        });
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.note = Some(note.into());
    }

    /// Moves a feature's grounding level. Handlers only request legal moves;
    /// an illegal one is kept as a note instead of failing the step.
    pub fn ground(&mut self, feature: &FeatureId, to: GroundingLevel) {
        match self.state.ledger.advance(feature, to) {
            Ok(change) => self.grounding.push(change),
            Err(e) => self.note = Some(e.to_string()),
        }
    }

    pub fn render(&self, id: &str, slots: &BTreeMap<&str, String>) -> String {
        self.state
            .settings
            .templates
            .render(id, slots)
            .or_else(|_| TemplateSet::default().render(id, slots))
            .unwrap_or_else(|_| id.to_owned())
    }

    fn feature_slots(&self, feature: &FeatureId) -> BTreeMap<&'static str, String> {
        let decision = self.state.decision.as_ref();
        match decision.and_then(|d| d.contribution(feature).map(|c| (d, c))) {
            Some((d, c)) => feature_slots(c, d),
            None => [("feature", feature.to_string())].into(),
        }
    }

    fn system_say(&mut self, text: String, feature: Option<FeatureId>) {
        let utterance = Utterance {
            speaker: Speaker::System,
            text,
            phase: self.state.phase.clone(),
            feature_id: feature,
            strategy: None,
            timestamp_ms: self.t,
        };
        self.emit(Action::Say {
            utterance,
            origin: None,
        });
    }
}

fn action_utterance(action: &Action, phase: &Phase, t: u64) -> Option<Utterance> {
    let (text, feature) = match action {
        Action::Say { .. } => return None,
        Action::PresentFeature { feature_id, text, .. }
        | Action::AskProblemQuestion { feature_id, text }
        | Action::AskUnderstanding { feature_id, text }
        | Action::AskAgreement { feature_id, text } => (text.clone(), Some(feature_id.clone())),
        Action::PresentCounterfactual { text, .. } | Action::RequestFinalDecision { text, .. } => {
            (text.clone(), None)
        }
        _ => return None,
    };
    Some(Utterance {
        speaker: Speaker::System,
        text,
        phase: phase.clone(),
        feature_id: feature,
        strategy: None,
        timestamp_ms: t,
    })
}

pub type Handler = fn(&mut StepContext<'_>, &SessionEvent) -> Disposition;

/// Phase-kind keyed transition handlers.
#[derive(Clone)]
pub struct TransitionTable {
    handlers: BTreeMap<PhaseKind, Handler>,
}

impl Default for TransitionTable {
    fn default() -> Self {
        Self::standard()
    }
}

impl TransitionTable {
    pub fn standard() -> Self {
        let mut handlers: BTreeMap<PhaseKind, Handler> = BTreeMap::new();
        handlers.insert(PhaseKind::Assessment, on_assessment);
        handlers.insert(PhaseKind::Explain, on_explain);
        handlers.insert(PhaseKind::Understanding, on_understanding);
        handlers.insert(PhaseKind::Agreement, on_agreement);
        handlers.insert(PhaseKind::FinalDecision, on_final_decision);
        handlers.insert(PhaseKind::Done, |_, _| ignored("session finished"));
        Self { handlers }
    }

    pub fn with_handler(mut self, kind: PhaseKind, handler: Handler) -> Self {
        self.handlers.insert(kind, handler);
        self
    }

    pub fn step(&self, mut state: SessionState, event: &SessionEvent) -> (SessionState, Vec<Action>) {
        let t = event.timestamp_ms;
        let mut cx = StepContext {
            state: &mut state,
            t,
            outputs: Vec::new(),
            grounding: Vec::new(),
            note: None,
        };
        let disposition = if t < cx.state.last_event_ms {
            ignored("timestamp regression")
        } else {
            cx.state.last_event_ms = t;
            match self.handlers.get(&cx.state.phase.kind()) {
                Some(h) => h(&mut cx, event),
                None => ignored("no handler for phase"),
            }
        };
        if disposition == Disposition::Handled {
            if let EventKind::UserReply { reply, free_text } = &event.kind {
                let text = if free_text.trim().is_empty() {
                    reply.canonical_text()
                } else {
                    free_text.clone()
                };
                let phase = cx.state.phase.clone();
                cx.state.history.push(Utterance {
                    speaker: Speaker::User,
                    text,
                    feature_id: phase.feature().cloned(),
                    phase,
                    strategy: None,
                    timestamp_ms: t,
                });
            }
        }
        let StepContext {
            outputs,
            grounding,
            note,
            ..
        } = cx;

        let mut event_payload = json!({
            "event": event,
            "handled": disposition == Disposition::Handled,
        });
        if !grounding.is_empty() {
            event_payload["grounding"] = json!(grounding);
        }
        let note = match (&disposition, note) {
            (Disposition::Ignored(reason), _) => Some(reason.clone()),
            (_, n) => n,
        };
        if let Some(n) = note {
            event_payload["note"] = Value::String(n);
        }

        let mut actions = Vec::with_capacity(outputs.len() * 2 + 1);
        actions.push(record(&mut state, t, EntryKind::Event, event_payload));
        for out in outputs {
            match out {
                Output::PhaseChange { from, to } => {
                    let payload = json!({ "from": from, "to": to });
                    actions.push(record(&mut state, t, EntryKind::PhaseChange, payload));
                }
                Output::Action(a) => {
                    let payload = serde_json::to_value(&a).unwrap_or(Value::Null);
                    actions.push(a);
                    actions.push(record(&mut state, t, EntryKind::Action, payload));
                }
            }
        }
        (state, actions)
    }
}

fn record(state: &mut SessionState, t: u64, kind: EntryKind, payload: Value) -> Action {
    let entry = TranscriptEntry {
        seq: state.next_seq,
        timestamp_ms: t,
        kind,
        payload,
    };
    state.next_seq += 1;
    Action::Record { entry }
}

/// Applies one event with the standard transition table.
pub fn step(state: SessionState, event: &SessionEvent) -> (SessionState, Vec<Action>) {
    TransitionTable::standard().step(state, event)
}

fn on_assessment(cx: &mut StepContext<'_>, event: &SessionEvent) -> Disposition {
    match &event.kind {
        EventKind::SessionStarted if !cx.state.started => {
            cx.state.started = true;
            cx.outputs.push(Output::PhaseChange {
                from: None,
                to: Phase::P0Assessment,
            });
            let questions = cx.state.settings.model.questions.clone();
            for question in questions {
                cx.emit(Action::Ask {
                    prompt: Prompt::Questionnaire { question },
                });
            }
            Disposition::Handled
        }
        EventKind::SessionStarted => ignored("session already started"),
        _ if !cx.state.started => ignored("session not started"),
        EventKind::AnswersSubmitted { .. } if cx.state.decision.is_some() => {
            ignored("answers already submitted")
        }
        EventKind::AnswersSubmitted { answers } => {
            match classify_risk(answers, &cx.state.settings.model) {
                Ok(decision) => {
                    cx.state.decision = Some(decision);
                    let text = cx.render("initial_assessment", &BTreeMap::new());
                    cx.emit(Action::Ask {
                        prompt: Prompt::InitialAssessment { text },
                    });
                }
                Err(e) => {
                    cx.note(e.to_string());
                    cx.system_say(format!("Your answers could not be scored: {e}."), None);
                }
            }
            Disposition::Handled
        }
        EventKind::InitialAssessmentGiven { .. } if cx.state.decision.is_none() => {
            ignored("questionnaire not answered yet")
        }
        EventKind::InitialAssessmentGiven { level } => {
            let t = cx.t;
            match cx.state.initial.record(*level, t) {
                Ok(_) => {
                    let order = cx
                        .state
                        .decision
                        .as_ref()
                        .map(|d| order_features(&d.contributions))
                        .transpose();
                    match order {
                        Ok(Some(order)) => {
                            cx.state.queue = order.into();
                            enter_next_feature(cx);
                        }
                        Ok(None) | Err(RiskError::NoFeatures) => {
                            enter_next_feature(cx);
                        }
                        Err(e) => cx.note(e.to_string()),
                    }
                    Disposition::Handled
                }
                Err(RiskError::AlreadyRecorded) => ignored("initial assessment already recorded"),
                Err(e) => {
                    cx.note(e.to_string());
                    cx.system_say("Please rate yourself on the scale from 1 to 5.".into(), None);
                    Disposition::Handled
                }
            }
        }
        _ => ignored("not meaningful during assessment"),
    }
}

fn enter_next_feature(cx: &mut StepContext<'_>) {
    cx.state.deadline = None;
    let Some(feature) = cx.state.queue.pop_front() else {
        enter_final_decision(cx);
        return;
    };
    cx.set_phase(Phase::P1Explain {
        feature_id: feature.clone(),
    });
    cx.ground(&feature, GroundingLevel::Presented);
    let t = cx.t;
    cx.state.presentations.push((
        feature.clone(),
        PresentationWindow {
            start_ms: t,
            end_ms: None,
        },
    ));
    let mut slots = cx.feature_slots(&feature);
    let (answer, tendency, weight) = {
        let q = cx.state.settings.model.question(&feature);
        let c = cx.state.decision.as_ref().and_then(|d| d.contribution(&feature));
        let answer = q
            .zip(c)
            .and_then(|(q, c)| {
                q.options
                    .iter()
                    .find(|o| o.tendency == c.tendency)
                    .map(|o| o.label.clone())
            })
            .unwrap_or_default();
        (answer, c.map_or(0.0, |c| c.tendency), c.map_or(0.0, |c| c.weight))
    };
    slots.insert("answer", answer);
    slots.insert("direction", direction_phrase(tendency).to_owned());
    let text = cx.render("present_feature", &slots);
    cx.emit(Action::PresentFeature {
        feature_id: feature.clone(),
        text,
        tendency,
        weight,
    });
    cx.state.deadline = Some(Deadline {
        at_ms: t + cx.state.settings.presentation_ms,
        kind: DeadlineKind::PresentationEnd(feature),
    });
}

fn enter_final_decision(cx: &mut StepContext<'_>) {
    cx.set_phase(Phase::P4FinalDecision);
    let Some(original) = cx.state.decision.clone() else {
        return;
    };
    let text = cx.render("final_request", &[("level", original.level.to_string())].into());
    cx.emit(Action::RequestFinalDecision {
        counterfactuals: cx.state.counterfactuals.clone(),
        contested: cx.state.contested.iter().cloned().collect(),
        original,
        text,
    });
}

fn close_presentation(cx: &mut StepContext<'_>, feature: &FeatureId) {
    let t = cx.t;
    if let Some((_, w)) = cx.state.presentations.iter_mut().rev().find(|(f, _)| f == feature) {
        if w.end_ms.is_none() {
            w.end_ms = Some(t);
        }
    }
}

fn presentation_ended(state: &SessionState, feature: &FeatureId) -> bool {
    state
        .presentations
        .iter()
        .rev()
        .find(|(f, _)| f == feature)
        .is_some_and(|(_, w)| w.end_ms.is_some())
}

fn dwell_token(feature: &FeatureId) -> String {
    format!("dwell:{feature}")
}

fn finish_unremarkable(cx: &mut StepContext<'_>, feature: &FeatureId) {
    cx.ground(feature, GroundingLevel::Agreed);
    enter_next_feature(cx);
}

fn enter_understanding(cx: &mut StepContext<'_>, feature: &FeatureId) {
    close_presentation(cx, feature);
    cx.state.deadline = None;
    cx.ground(feature, GroundingLevel::ReactionDetected);
    cx.set_phase(Phase::P2Understanding {
        feature_id: feature.clone(),
        attempt: 0,
    });
    let text = cx.render("problem_question", &cx.feature_slots(feature));
    cx.emit(Action::AskProblemQuestion {
        feature_id: feature.clone(),
        text,
    });
}

fn on_explain(cx: &mut StepContext<'_>, event: &SessionEvent) -> Disposition {
    let Some(feature) = cx.state.phase.feature().cloned() else {
        return ignored("no feature under presentation");
    };
    match &event.kind {
        EventKind::PresentationComplete { feature_id } if *feature_id == feature => {
            if presentation_ended(cx.state, &feature) {
                return ignored("presentation already complete");
            }
            close_presentation(cx, &feature);
            let dwell = cx.state.settings.dwell_ms;
            if dwell == 0 {
                finish_unremarkable(cx, &feature);
            } else {
                cx.state.deadline = Some(Deadline {
                    at_ms: cx.t + dwell,
                    kind: DeadlineKind::Dwell(dwell_token(&feature)),
                });
            }
            Disposition::Handled
        }
        EventKind::Timeout { token } => {
            let due = matches!(
                &cx.state.deadline,
                Some(Deadline { kind: DeadlineKind::Dwell(tok), at_ms }) if tok == token && cx.t >= *at_ms
            );
            if !due {
                return ignored("stale or unknown timer");
            }
            finish_unremarkable(cx, &feature);
            Disposition::Handled
        }
        EventKind::Reaction { reaction } => match &reaction.feature_id {
            Some(f) if *f == feature => {
                enter_understanding(cx, &feature);
                Disposition::Handled
            }
            Some(_) => ignored("reaction attributed to another feature"),
            None => ignored("reaction outside any monitoring window"),
        },
        EventKind::UserClarificationRequest { feature_id } if *feature_id == feature => {
            enter_understanding(cx, &feature);
            Disposition::Handled
        }
        EventKind::UserReply {
            reply: Reply::Problem,
            ..
        } => {
            enter_understanding(cx, &feature);
            Disposition::Handled
        }
        _ => ignored("not meaningful during explanation"),
    }
}

fn enter_agreement(cx: &mut StepContext<'_>, feature: &FeatureId) {
    cx.set_phase(Phase::P3Agreement {
        feature_id: feature.clone(),
    });
    let text = cx.render("agreement_question", &cx.feature_slots(feature));
    cx.emit(Action::AskAgreement {
        feature_id: feature.clone(),
        text,
    });
}

fn say_clarification(
    cx: &mut StepContext<'_>,
    feature: &FeatureId,
    strategy: Strategy,
    service_text: Option<String>,
    origin: UtteranceOrigin,
) {
    let text = match service_text {
        Some(text) => text,
        None => cx.render(strategy.template_id(), &cx.feature_slots(feature)),
    };
    let utterance = Utterance {
        speaker: Speaker::System,
        text,
        phase: cx.state.phase.clone(),
        feature_id: Some(feature.clone()),
        strategy: Some(strategy),
        timestamp_ms: cx.t,
    };
    cx.state.history.push(utterance.clone());
    cx.emit(Action::Say {
        utterance,
        origin: Some(origin),
    });
    let text = cx.render("understanding_question", &cx.feature_slots(feature));
    cx.emit(Action::AskUnderstanding {
        feature_id: feature.clone(),
        text,
    });
}

fn on_understanding(cx: &mut StepContext<'_>, event: &SessionEvent) -> Disposition {
    let Phase::P2Understanding { feature_id, attempt } = cx.state.phase.clone() else {
        return ignored("not in understanding phase");
    };
    if let Some(pending) = cx.state.pending_dialog.clone() {
        let EventKind::DialogServiceReply { outcome } = &event.kind else {
            return ignored("awaiting dialog service");
        };
        cx.state.pending_dialog = None;
        match outcome {
            DialogOutcome::Text(text) if !text.trim().is_empty() => say_clarification(
                cx,
                &pending.feature_id,
                pending.strategy,
                Some(text.clone()),
                UtteranceOrigin::Service,
            ),
            DialogOutcome::Text(_) => say_clarification(
                cx,
                &pending.feature_id,
                pending.strategy,
                None,
                UtteranceOrigin::fallback("empty_reply"),
            ),
            DialogOutcome::Failure(_) => say_clarification(
                cx,
                &pending.feature_id,
                pending.strategy,
                None,
                UtteranceOrigin::fallback("service_unavailable"),
            ),
        }
        return Disposition::Handled;
    }
    let EventKind::UserReply { reply, .. } = &event.kind else {
        return ignored("not meaningful during understanding");
    };
    match reply {
        Reply::Understood | Reply::NoProblem => {
            cx.ground(&feature_id, GroundingLevel::Understood);
            enter_agreement(cx, &feature_id);
        }
        Reply::Problem | Reply::NotUnderstood => match next_strategy(attempt) {
            LadderStep::Next(strategy) => {
                cx.ground(&feature_id, GroundingLevel::Clarifying { attempt });
                cx.state
                    .strategies_used
                    .entry(feature_id.clone())
                    .or_default()
                    .push(strategy);
                cx.set_phase(Phase::P2Understanding {
                    feature_id: feature_id.clone(),
                    attempt: attempt + 1,
                });
                let dialog_request = if cx.state.settings.dialog_enabled {
                    cx.state.decision.as_ref().and_then(|d| {
                        d.contribution(&feature_id)
                            .map(|c| DialogRequest::new(c, strategy, &cx.state.history, d))
                    })
                } else {
                    None
                };
                match dialog_request {
                    Some(request) => {
                        cx.state.pending_dialog = Some(PendingDialog {
                            feature_id: feature_id.clone(),
                            strategy,
                        });
                        cx.emit(Action::RequestDialog { request });
                    }
                    None => say_clarification(
                        cx,
                        &feature_id,
                        strategy,
                        None,
                        UtteranceOrigin::fallback("no_client"),
                    ),
                }
            }
            LadderStep::Exhausted => {
                cx.ground(&feature_id, GroundingLevel::UnderstoodWithReservation);
                enter_agreement(cx, &feature_id);
            }
        },
        _ => return ignored("not meaningful during understanding"),
    }
    Disposition::Handled
}

fn on_agreement(cx: &mut StepContext<'_>, event: &SessionEvent) -> Disposition {
    let Some(feature) = cx.state.phase.feature().cloned() else {
        return ignored("no feature under discussion");
    };
    let EventKind::UserReply { reply, .. } = &event.kind else {
        return ignored("not meaningful during agreement");
    };
    match reply {
        Reply::Agree => {
            cx.ground(&feature, GroundingLevel::Agreed);
        }
        Reply::Disagree => {
            cx.ground(&feature, GroundingLevel::Disagreed);
            cx.state.contested.insert(feature.clone());
            let Some(decision) = cx.state.decision.clone() else {
                return ignored("no decision to contest");
            };
            match counterfactual(&decision, &cx.state.contested) {
                Ok(cf) => {
                    let excluded: Vec<String> = cf
                        .excluded
                        .iter()
                        .map(|f| decision.contribution(f).map_or(f.to_string(), |c| c.label.clone()))
                        .collect();
                    let text = cx.render(
                        "counterfactual",
                        &[
                            ("excluded", excluded.join(", ")),
                            ("level", cf.level.to_string()),
                            ("original_level", decision.level.to_string()),
                            ("score", format!("{:.3}", cf.score)),
                        ]
                        .into(),
                    );
                    cx.state.counterfactuals.push(cf.clone());
                    cx.emit(Action::PresentCounterfactual {
                        decision: cf,
                        original_level: decision.level,
                        text,
                    });
                }
                Err(e) => {
                    cx.note(e.to_string());
                    let text = cx.render("no_counterfactual", &BTreeMap::new());
                    cx.system_say(text, Some(feature.clone()));
                }
            }
        }
        _ => return ignored("not meaningful during agreement"),
    }
    enter_next_feature(cx);
    Disposition::Handled
}

fn on_final_decision(cx: &mut StepContext<'_>, event: &SessionEvent) -> Disposition {
    let EventKind::UserReply {
        reply: Reply::FinalDecision { level },
        ..
    } = &event.kind
    else {
        return ignored("waiting for the final decision");
    };
    let Some(level) = u8::try_from(*level).ok().and_then(|l| RiskLevel::new(l).ok()) else {
        return ignored(format!("final decision {level} outside 1..=5"));
    };
    cx.state.final_level = Some(level);
    cx.state.deadline = None;
    cx.set_phase(Phase::Done);
    cx.emit(Action::EndSession { final_level: level });
    Disposition::Handled
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::AnomalyEvent;
    use crate::risk::AnswerOption;
    use crate::signal::SourceId;

    pub(crate) fn settings(features: &[(&str, f64)]) -> Arc<PhaseSettings> {
        let questions = features
            .iter()
            .map(|(id, _)| Question {
                question_id: FeatureId::new(*id),
                text: format!("{id}?"),
                label: None,
                options: vec![
                    AnswerOption { option_id: "lo".into(), label: "low".into(), tendency: -1.0 },
                    AnswerOption { option_id: "hi".into(), label: "high".into(), tendency: 1.0 },
                ],
            })
            .collect();
        let weights = features.iter().map(|(id, w)| (FeatureId::new(*id), *w)).collect();
        Arc::new(PhaseSettings {
            model: RiskModel::new(questions, weights).unwrap(),
            templates: TemplateSet::default(),
            presentation_ms: 1000,
            dwell_ms: 500,
            dialog_enabled: false,
        })
    }

    fn run(state: SessionState, events: &[SessionEvent]) -> (SessionState, Vec<Action>) {
        let mut all = Vec::new();
        let mut s = state;
        for e in events {
            let (next, acts) = step(s, e);
            s = next;
            all.extend(acts);
        }
        (s, all)
    }

    fn started(features: &[(&str, f64)], answers: &[(&str, &str)]) -> SessionState {
        let s = SessionState::new(settings(features));
        let answers = answers
            .iter()
            .map(|(q, o)| (FeatureId::new(*q), o.to_string()))
            .collect();
        run(
            s,
            &[
                SessionEvent::new(0, EventKind::SessionStarted),
                SessionEvent::new(10, EventKind::AnswersSubmitted { answers }),
                SessionEvent::new(20, EventKind::InitialAssessmentGiven { level: 3 }),
            ],
        )
        .0
    }

    fn reaction(t: u64, f: &str) -> SessionEvent {
        SessionEvent::new(
            t,
            EventKind::Reaction {
                reaction: ReactionEvent {
                    timestamp_ms: t,
                    contributing: vec![AnomalyEvent {
                        source_id: SourceId::new("hr"),
                        timestamp_ms: t,
                        z_score: 4.0,
                        sample_value: 80.0,
                    }],
                    feature_id: Some(FeatureId::new(f)),
                },
            },
        )
    }

    #[test]
    fn reaction_in_explain_opens_understanding() {
        let s = started(&[("gender", 1.0), ("income", 1.0)], &[("gender", "lo"), ("income", "hi")]);
        let first = s.phase.feature().cloned().unwrap();
        let (s, acts) = step(s, &reaction(100, first.as_str()));
        assert_eq!(
            s.phase,
            Phase::P2Understanding { feature_id: first.clone(), attempt: 0 }
        );
        assert!(acts
            .iter()
            .any(|a| matches!(a, Action::AskProblemQuestion { feature_id, .. } if *feature_id == first)));
        assert!(matches!(acts[0], Action::Record { .. }));
    }

    #[test]
    fn last_feature_without_reaction_goes_to_final() {
        let s = started(&[("solo", 1.0)], &[("solo", "hi")]);
        let f = FeatureId::new("solo");
        let (s, _) = step(s, &SessionEvent::new(1020, EventKind::PresentationComplete { feature_id: f.clone() }));
        assert_eq!(s.phase, Phase::P1Explain { feature_id: f.clone() });
        let dl = s.deadline.clone().unwrap();
        assert_eq!(dl.at_ms, 1520);
        let (s, acts) = step(s, &dl.event());
        assert_eq!(s.phase, Phase::P4FinalDecision);
        assert!(acts.iter().any(|a| matches!(a, Action::RequestFinalDecision { .. })));
        assert_eq!(s.ledger.level(&f), GroundingLevel::Agreed);
    }

    #[test]
    fn done_absorbs_everything() {
        let s = started(&[("solo", 1.0)], &[("solo", "hi")]);
        let (s, _) = run(
            s,
            &[
                SessionEvent::new(30, EventKind::PresentationComplete { feature_id: "solo".into() }),
                SessionEvent::new(600, EventKind::Timeout { token: "dwell:solo".into() }),
                SessionEvent::reply(700, Reply::FinalDecision { level: 2 }),
            ],
        );
        assert!(s.is_done());
        let (s, acts) = step(s, &SessionEvent::reply(800, Reply::Agree));
        assert!(s.is_done());
        assert_eq!(acts.len(), 1);
        let Action::Record { entry } = &acts[0] else { panic!() };
        assert_eq!(entry.payload["handled"], false);
    }

    #[test]
    fn ladder_exhaustion_reserves_understanding() {
        let s = started(&[("solo", 1.0)], &[("solo", "hi")]);
        let (mut s, _) = step(s, &reaction(50, "solo"));
        let mut seen = Vec::new();
        for i in 0..5 {
            let (next, acts) = step(s, &SessionEvent::reply(60 + i, Reply::NotUnderstood));
            s = next;
            for a in acts {
                if let Action::Say { utterance, origin } = a {
                    seen.push(utterance.strategy.unwrap());
                    assert_eq!(origin, Some(UtteranceOrigin::fallback("no_client")));
                }
            }
        }
        assert_eq!(seen, Strategy::LADDER);
        assert_eq!(s.phase, Phase::P3Agreement { feature_id: "solo".into() });
        assert_eq!(s.ledger.level(&"solo".into()), GroundingLevel::UnderstoodWithReservation);
    }

    #[test]
    fn disagreement_presents_counterfactual() {
        let s = started(&[("gender", 1.0), ("income", 1.0)], &[("gender", "lo"), ("income", "hi")]);
        // both contribute magnitude 1; the id tie-break puts gender first
        assert_eq!(s.phase.feature().unwrap().as_str(), "gender");
        let (s, acts) = run(
            s,
            &[
                reaction(100, "gender"),
                SessionEvent::reply(200, Reply::Understood),
                SessionEvent::reply(300, Reply::Disagree),
            ],
        );
        let cf = acts
            .iter()
            .find_map(|a| match a {
                Action::PresentCounterfactual { decision, .. } => Some(decision.clone()),
                _ => None,
            })
            .unwrap();
        assert_eq!(cf.score, 1.0);
        assert_eq!(cf.level.get(), 5);
        assert_eq!(cf.excluded, [FeatureId::new("gender")].into());
        assert_eq!(s.phase, Phase::P1Explain { feature_id: "income".into() });
    }

    #[test]
    fn user_initiative_in_explain() {
        let s = started(&[("a", 1.0), ("b", 1.0)], &[("a", "hi"), ("b", "lo")]);
        let f = s.phase.feature().cloned().unwrap();
        let (s, _) = step(s, &SessionEvent::reply(40, Reply::Problem));
        assert_eq!(s.phase, Phase::P2Understanding { feature_id: f, attempt: 0 });
    }

    #[test]
    fn reaction_for_other_feature_is_ignored() {
        let s = started(&[("a", 1.0), ("b", 1.0)], &[("a", "hi"), ("b", "lo")]);
        let phase = s.phase.clone();
        let (s, acts) = step(s, &reaction(40, "zzz"));
        assert_eq!(s.phase, phase);
        assert_eq!(acts.len(), 1);
    }

    #[test]
    fn dialog_enabled_requests_service() {
        let mut settings = (*settings(&[("solo", 1.0)])).clone();
        settings.dialog_enabled = true;
        let s = run(
            SessionState::new(Arc::new(settings)),
            &[
                SessionEvent::new(0, EventKind::SessionStarted),
                SessionEvent::new(1, EventKind::AnswersSubmitted { answers: [("solo".into(), "hi".into())].into() }),
                SessionEvent::new(2, EventKind::InitialAssessmentGiven { level: 4 }),
                reaction(3, "solo"),
            ],
        )
        .0;
        let (s, acts) = step(s, &SessionEvent::reply(4, Reply::Problem));
        assert!(s.awaiting_dialog());
        assert!(acts.iter().any(|a| matches!(a, Action::RequestDialog { .. })));
        let (s, ignored_acts) = step(s, &SessionEvent::reply(5, Reply::Understood));
        assert_eq!(ignored_acts.len(), 1);
        let (s, acts) = step(
            s,
            &SessionEvent::new(5, EventKind::DialogServiceReply { outcome: DialogOutcome::Text("custom".into()) }),
        );
        assert!(!s.awaiting_dialog());
        assert!(acts.iter().any(|a| matches!(a,
            Action::Say { utterance, origin: Some(UtteranceOrigin::Service) } if utterance.text == "custom")));
    }

    #[test]
    fn monitoring_window_bounds() {
        let w = PresentationWindow { start_ms: 100, end_ms: Some(1100) };
        assert_eq!(monitoring_window(w, 1500), (100, Some(2600)));
        assert_eq!(monitoring_window(w, 0), (100, Some(1100)));
        let mut s = started(&[("a", 1.0), ("b", 1.0)], &[("a", "hi"), ("b", "lo")]);
        s.presentations = vec![(FeatureId::new("a"), w)];
        let mut settings = (*s.settings).clone();
        settings.dwell_ms = 1500;
        s.settings = Arc::new(settings);
        assert_eq!(s.feature_at(2100), Some(FeatureId::new("a")));
        assert_eq!(s.feature_at(3100), None);
        assert_eq!(s.feature_at(50), None);
    }

    #[test]
    fn transcript_entries_are_sequential() {
        let s = started(&[("a", 1.0), ("b", 1.0)], &[("a", "hi"), ("b", "lo")]);
        let seq_before = s.next_seq;
        let (_, acts) = step(s, &reaction(100, "a"));
        let seqs: Vec<u64> = acts
            .iter()
            .filter_map(|a| match a {
                Action::Record { entry } => Some(entry.seq),
                _ => None,
            })
            .collect();
        assert_eq!(seqs, (seq_before..seq_before + seqs.len() as u64).collect::<Vec<_>>());
    }
}
