//! JSON message protocol shared by the websocket service, scripts and UI.
//!
//! Every message is `{type, session_id, timestamp_ms, payload}` and every
//! payload carries `"v": 1`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::detect::ReactionEvent;
use crate::phase::{Action, EventKind, Prompt, Reply, SessionEvent};
use crate::risk::FeatureId;
use crate::signal::SourceId;
use crate::transcript::TranscriptEntry;

pub const WIRE_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireMessage {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub session_id: String,
    #[serde(default)]
    pub timestamp_ms: u64,
    #[serde(default)]
    pub payload: Value,
}

impl WireMessage {
    pub fn new(kind: &str, session_id: &str, timestamp_ms: u64, mut payload: Value) -> Self {
        if let Value::Object(map) = &mut payload {
            map.insert("v".into(), json!(WIRE_VERSION));
        }
        Self {
            kind: kind.to_owned(),
            session_id: session_id.to_owned(),
            timestamp_ms,
            payload,
        }
    }

    pub fn error(session_id: &str, timestamp_ms: u64, code: &str, message: impl ToString) -> Self {
        Self::new(
            "error",
            session_id,
            timestamp_ms,
            json!({"code": code, "message": message.to_string()}),
        )
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum WireError {
    #[error("unknown message type {0}")]
    UnknownType(String),
    #[error("{kind}: unsupported payload version {found:?}")]
    Version { kind: String, found: Option<u64> },
    #[error("{kind}: {reason}")]
    Payload { kind: String, reason: String },
}

impl WireError {
    pub fn code(&self) -> &'static str {
        match self {
            WireError::UnknownType(_) => "unknown_type",
            WireError::Version { .. } => "bad_version",
            WireError::Payload { .. } => "bad_payload",
        }
    }
}

/// A parsed client-to-server message.
#[derive(Debug, Clone, PartialEq)]
pub enum Inbound {
    SessionStart,
    Sample { source_id: SourceId, value: f64 },
    Event(EventKind),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnswerPayload {
    #[allow(dead_code)]
    v: u64,
    answers: BTreeMap<FeatureId, String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LevelPayload {
    #[allow(dead_code)]
    v: u64,
    level: i64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplePayload {
    #[allow(dead_code)]
    v: u64,
    source_id: SourceId,
    value: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FeaturePayload {
    #[allow(dead_code)]
    v: u64,
    feature_id: FeatureId,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReplyPayload {
    #[allow(dead_code)]
    v: u64,
    kind: String,
    #[serde(default)]
    free_text: String,
    #[serde(default)]
    feature_id: Option<FeatureId>,
    #[serde(default)]
    level: Option<i64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmptyPayload {
    #[allow(dead_code)]
    v: u64,
}

fn payload<T: for<'de> Deserialize<'de>>(kind: &str, value: &Value) -> Result<T, WireError> {
    serde_json::from_value(value.clone()).map_err(|e| WireError::Payload {
        kind: kind.to_owned(),
        reason: e.to_string(),
    })
}

fn bad(kind: &str, reason: impl Into<String>) -> WireError {
    WireError::Payload {
        kind: kind.to_owned(),
        reason: reason.into(),
    }
}

/// Parses an inbound message type and payload.
pub fn parse_inbound(kind: &str, value: &Value) -> Result<Inbound, WireError> {
    let version = value.get("v").and_then(Value::as_u64);
    let known = [
        "session.start",
        "answer",
        "initial_assessment",
        "signal.sample",
        "user.reply",
        "final.decision",
        "explanation.present",
    ];
    if !known.contains(&kind) {
        return Err(WireError::UnknownType(kind.to_owned()));
    }
    if version != Some(WIRE_VERSION) {
        return Err(WireError::Version {
            kind: kind.to_owned(),
            found: version,
        });
    }
    Ok(match kind {
        "session.start" => {
            payload::<EmptyPayload>(kind, value)?;
            Inbound::SessionStart
        }
        "answer" => Inbound::Event(EventKind::AnswersSubmitted {
            answers: payload::<AnswerPayload>(kind, value)?.answers,
        }),
        "initial_assessment" => Inbound::Event(EventKind::InitialAssessmentGiven {
            level: payload::<LevelPayload>(kind, value)?.level,
        }),
        "signal.sample" => {
            let p: SamplePayload = payload(kind, value)?;
            Inbound::Sample {
                source_id: p.source_id,
                value: p.value,
            }
        }
        "final.decision" => Inbound::Event(EventKind::UserReply {
            reply: Reply::FinalDecision {
                level: payload::<LevelPayload>(kind, value)?.level,
            },
            free_text: String::new(),
        }),
        "explanation.present" => Inbound::Event(EventKind::PresentationComplete {
            feature_id: payload::<FeaturePayload>(kind, value)?.feature_id,
        }),
        _ => {
            let p: ReplyPayload = payload(kind, value)?;
            let reply = match p.kind.as_str() {
                "clarification_request" => {
                    let feature_id = p
                        .feature_id
                        .ok_or_else(|| bad(kind, "clarification_request needs feature_id"))?;
                    return Ok(Inbound::Event(EventKind::UserClarificationRequest { feature_id }));
                }
                "no_problem" => Reply::NoProblem,
                "problem" => Reply::Problem,
                "understood" => Reply::Understood,
                "not_understood" => Reply::NotUnderstood,
                "agree" => Reply::Agree,
                "disagree" => Reply::Disagree,
                "final_decision" => Reply::FinalDecision {
                    level: p.level.ok_or_else(|| bad(kind, "final_decision needs level"))?,
                },
                other => return Err(bad(kind, format!("unknown reply kind {other}"))),
            };
            Inbound::Event(EventKind::UserReply {
                reply,
                free_text: p.free_text,
            })
        }
    })
}

/// The session event carried by a message, if it carries one.
pub fn inbound_event(msg: &WireMessage) -> Result<Option<SessionEvent>, WireError> {
    match parse_inbound(&msg.kind, &msg.payload)? {
        Inbound::Event(kind) => Ok(Some(SessionEvent::new(msg.timestamp_ms, kind))),
        _ => Ok(None),
    }
}

/// Wire form of an engine action. Internal actions map to `None`.
pub fn outbound(session_id: &str, timestamp_ms: u64, action: &Action) -> Option<WireMessage> {
    let msg = |kind: &str, payload: Value| Some(WireMessage::new(kind, session_id, timestamp_ms, payload));
    match action {
        Action::Ask {
            prompt: Prompt::Questionnaire { question },
        } => msg(
            "question",
            json!({
                "question_id": question.question_id,
                "text": question.text,
                "options": question.options,
            }),
        ),
        Action::Ask {
            prompt: Prompt::InitialAssessment { text },
        } => msg(
            "question",
            json!({"question_id": "initial_assessment", "text": text, "scale": [1, 5]}),
        ),
        Action::PresentFeature {
            feature_id,
            text,
            tendency,
            weight,
        } => msg(
            "explanation.present",
            json!({"feature_id": feature_id, "text": text, "tendency": tendency, "weight": weight}),
        ),
        Action::AskProblemQuestion { feature_id, text } => msg(
            "clarify.prompt",
            json!({"prompt": "problem", "feature_id": feature_id, "text": text}),
        ),
        Action::Say { utterance, origin } => msg(
            "clarify.prompt",
            json!({
                "prompt": if utterance.strategy.is_some() { "clarification" } else { "notice" },
                "feature_id": utterance.feature_id,
                "text": utterance.text,
                "strategy": utterance.strategy,
                "origin": origin,
            }),
        ),
        Action::AskUnderstanding { feature_id, text } => msg(
            "clarify.prompt",
            json!({"prompt": "understanding", "feature_id": feature_id, "text": text}),
        ),
        Action::AskAgreement { feature_id, text } => msg(
            "agreement.prompt",
            json!({"feature_id": feature_id, "text": text}),
        ),
        Action::PresentCounterfactual {
            decision,
            original_level,
            text,
        } => msg(
            "counterfactual.result",
            json!({"decision": decision, "original_level": original_level, "text": text}),
        ),
        Action::RequestFinalDecision {
            original,
            counterfactuals,
            contested,
            text,
        } => msg(
            "final.request",
            json!({
                "original": original,
                "counterfactuals": counterfactuals,
                "contested": contested,
                "text": text,
            }),
        ),
        Action::Record { entry } => transcript_message(session_id, entry),
        Action::EndSession { final_level } => msg("session.end", json!({"final_level": final_level})),
        Action::RequestDialog { .. } => None,
    }
}

pub fn transcript_message(session_id: &str, entry: &TranscriptEntry) -> Option<WireMessage> {
    Some(WireMessage::new(
        "transcript.entry",
        session_id,
        entry.timestamp_ms,
        json!({ "entry": entry }),
    ))
}

pub fn reaction_message(session_id: &str, reaction: &ReactionEvent) -> WireMessage {
    WireMessage::new(
        "reaction.event",
        session_id,
        reaction.timestamp_ms,
        json!({ "reaction": reaction }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_user_replies() {
        let ev = parse_inbound("user.reply", &json!({"v": 1, "kind": "agree"})).unwrap();
        assert_eq!(
            ev,
            Inbound::Event(EventKind::UserReply { reply: Reply::Agree, free_text: String::new() })
        );
        let ev = parse_inbound(
            "user.reply",
            &json!({"v": 1, "kind": "clarification_request", "feature_id": "income"}),
        )
        .unwrap();
        assert_eq!(
            ev,
            Inbound::Event(EventKind::UserClarificationRequest { feature_id: "income".into() })
        );
    }

    #[test]
    fn rejects_bad_messages() {
        assert_eq!(
            parse_inbound("user.reply", &json!({"v": 1, "kind": "maybe"})).unwrap_err().code(),
            "bad_payload"
        );
        assert_eq!(
            parse_inbound("answer", &json!({"answers": {}})).unwrap_err().code(),
            "bad_version"
        );
        assert_eq!(parse_inbound("hello", &json!({"v": 1})).unwrap_err().code(), "unknown_type");
        assert!(parse_inbound("final.decision", &json!({"v": 1, "level": 2, "x": 0})).is_err());
    }

    #[test]
    fn outbound_payloads_carry_version() {
        let a = Action::AskAgreement { feature_id: "f".into(), text: "ok?".into() };
        let m = outbound("s", 5, &a).unwrap();
        assert_eq!(m.kind, "agreement.prompt");
        assert_eq!(m.payload["v"], 1);
        let text = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<WireMessage>(&text).unwrap(), m);
    }
}
