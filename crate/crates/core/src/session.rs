//! Session driving: the engine wrapper shared by scripted runs and the live
//! service, scripted simulation, and transcript replay.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::config::{ConfigError, SessionConfig};
use crate::detect::{detect_anomalies, fuse_reactions, PresentationContext, ReactionEvent};
use crate::dialog::DialogClient;
use crate::phase::{
    Action, DialogOutcome, EventKind, PhaseSettings, SessionEvent, SessionState, TransitionTable,
};
use crate::risk::RiskLevel;
use crate::signal::{load_traces, merge_streams, synth_trace, SignalError, SignalSample};
use crate::transcript::{EntryKind, Transcript};
use crate::wire::{parse_inbound, Inbound, WireError};

/// Owns a session's state and transcript.
pub struct Engine {
    table: TransitionTable,
    state: Option<SessionState>,
    transcript: Transcript,
}

impl Engine {
    pub fn new(settings: Arc<PhaseSettings>) -> Self {
        Self {
            table: TransitionTable::standard(),
            state: Some(SessionState::new(settings)),
            transcript: Transcript::default(),
        }
    }

    pub fn with_table(mut self, table: TransitionTable) -> Self {
        self.table = table;
        self
    }

    pub fn state(&self) -> &SessionState {
        self.state.as_ref().expect("engine state present between steps")
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn into_transcript(self) -> Transcript {
        self.transcript
    }

    /// One pure step; `Record` actions are appended to the transcript.
    pub fn apply(&mut self, event: &SessionEvent) -> Vec<Action> {
        let state = self.state.take().expect("engine state present between steps");
        let (state, actions) = self.table.step(state, event);
        self.state = Some(state);
        for a in &actions {
            if let Action::Record { entry } = a {
                self.transcript.push(entry.clone());
            }
        }
        actions
    }

    /// Like [`Engine::apply`], answering dialog requests synchronously with
    /// `client` at the same timestamp.
    pub fn apply_resolving(
        &mut self,
        event: &SessionEvent,
        client: Option<&dyn DialogClient>,
    ) -> Vec<Action> {
        let mut out = self.apply(event);
        let mut i = 0;
        while i < out.len() {
            if let Action::RequestDialog { request } = &out[i] {
                let outcome = resolve_dialog(client, request);
                let reply = SessionEvent::new(
                    event.timestamp_ms.max(self.state().last_event_ms),
                    EventKind::DialogServiceReply { outcome },
                );
                let more = self.apply(&reply);
                out.extend(more);
            }
            i += 1;
        }
        out
    }
}

pub fn resolve_dialog(
    client: Option<&dyn DialogClient>,
    request: &crate::dialog::DialogRequest,
) -> DialogOutcome {
    match client {
        None => DialogOutcome::Failure("no dialog client".into()),
        Some(c) => match c.clarify(request) {
            Ok(text) => DialogOutcome::Text(text),
            Err(crate::dialog::DialogError::EmptyReply) => DialogOutcome::Text(String::new()),
            Err(e) => DialogOutcome::Failure(e.to_string()),
        },
    }
}

/// One scripted user input: a wire message type and payload at a time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub at_ms: u64,
    #[serde(rename = "type")]
    pub kind: String,
    pub payload: Value,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("{path}: {reason}")]
    Script { path: String, reason: String },
    #[error("script entry {index}: {source}")]
    ScriptEntry {
        index: usize,
        #[source]
        source: WireError,
    },
    #[error("script entry {index}: {reason}")]
    ScriptOrder { index: usize, reason: String },
    #[error("transcript event {seq}: {reason}")]
    Replay { seq: u64, reason: String },
}

pub fn parse_script(text: &str, origin: &str) -> Result<Vec<SessionEvent>, SessionError> {
    let entries: Vec<ScriptEntry> = serde_json::from_str(text).map_err(|e| SessionError::Script {
        path: origin.to_owned(),
        reason: e.to_string(),
    })?;
    let mut events = Vec::with_capacity(entries.len());
    let mut last = 0;
    for (index, e) in entries.into_iter().enumerate() {
        if e.at_ms < last {
            return Err(SessionError::ScriptOrder {
                index,
                reason: format!("at_ms {} goes back before {last}", e.at_ms),
            });
        }
        last = e.at_ms;
        match parse_inbound(&e.kind, &e.payload)
            .map_err(|source| SessionError::ScriptEntry { index, source })?
        {
            Inbound::Event(kind) => events.push(SessionEvent::new(e.at_ms, kind)),
            Inbound::SessionStart => {
                return Err(SessionError::ScriptOrder {
                    index,
                    reason: "scripts start implicitly at 0 ms".into(),
                })
            }
            Inbound::Sample { .. } => {
                return Err(SessionError::ScriptOrder {
                    index,
                    reason: "signal samples belong in trace files".into(),
                })
            }
        }
    }
    Ok(events)
}

pub fn load_script(path: &Path) -> Result<Vec<SessionEvent>, SessionError> {
    let text = std::fs::read_to_string(path).map_err(|e| SessionError::Script {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_script(&text, &path.display().to_string())
}

/// Samples from trace files plus the config's synth streams, merged.
pub fn gather_samples(
    config: &SessionConfig,
    traces: &[std::path::PathBuf],
) -> Result<Vec<SignalSample>, SessionError> {
    let from_files = load_traces(traces, &config.sources)?;
    let mut streams: Vec<Box<dyn Iterator<Item = Result<SignalSample, SignalError>>>> =
        vec![Box::new(from_files.into_iter().map(Ok))];
    for spec in config.seeded_synth() {
        streams.push(Box::new(synth_trace(&spec)?.map(Ok)));
    }
    Ok(merge_streams(streams).collect::<Result<Vec<_>, _>>()?)
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub transcript: Transcript,
    pub completed: bool,
    pub final_level: Option<RiskLevel>,
    pub anomalies: usize,
    pub reactions: usize,
}

/// Runs a session offline: reactions from `samples`, user input from
/// `script`, deadlines from the engine. Stops at `Done` or when every input
/// is used up.
pub fn run_session(
    settings: Arc<PhaseSettings>,
    detector: &crate::detect::DetectorConfig,
    samples: &[SignalSample],
    script: &[SessionEvent],
    client: Option<&dyn DialogClient>,
) -> SessionOutcome {
    let anomalies = detect_anomalies(samples.iter().cloned().map(Ok::<_, ()>), detector)
        .unwrap_or_default();
    let reactions = fuse_reactions(&anomalies, detector, &());
    let mut engine = Engine::new(settings);
    engine.apply_resolving(&SessionEvent::new(0, EventKind::SessionStarted), client);

    let (mut ri, mut si) = (0usize, 0usize);
    while !engine.state().is_done() {
        // ties at one instant go reaction, deadline, script
        let candidates = [
            reactions.get(ri).map(|r| (r.timestamp_ms, 0u8)),
            engine.state().deadline.as_ref().map(|d| (d.at_ms, 1u8)),
            script.get(si).map(|e| (e.timestamp_ms, 2u8)),
        ];
        let Some((_, which)) = candidates.into_iter().flatten().min() else {
            break;
        };
        let event = match which {
            0 => {
                let r = &reactions[ri];
                ri += 1;
                SessionEvent::new(
                    r.timestamp_ms,
                    EventKind::Reaction {
                        reaction: ReactionEvent {
                            feature_id: engine.state().feature_at(r.timestamp_ms),
                            ..r.clone()
                        },
                    },
                )
            }
            1 => engine.state().deadline.as_ref().expect("deadline candidate").event(),
            _ => {
                si += 1;
                script[si - 1].clone()
            }
        };
        engine.apply_resolving(&event, client);
    }
    let state = engine.state();
    SessionOutcome {
        completed: state.is_done(),
        final_level: state.final_level,
        anomalies: anomalies.len(),
        reactions: reactions.len(),
        transcript: engine.into_transcript(),
    }
}

/// Convenience wrapper reading everything from a config.
pub fn simulate(
    config: &SessionConfig,
    samples: &[SignalSample],
    script: &[SessionEvent],
) -> Result<SessionOutcome, SessionError> {
    let client = config.dialog_client();
    let settings = config.phase_settings(client.is_some())?;
    Ok(run_session(
        settings,
        &config.detector,
        samples,
        script,
        client.as_deref(),
    ))
}

/// Re-runs the events recorded in `recorded` through a fresh engine. Dialog
/// service replies are taken from the transcript, so no client is needed.
pub fn replay(config: &SessionConfig, recorded: &Transcript) -> Result<Transcript, SessionError> {
    let dialog_enabled = recorded
        .actions()
        .any(|e| e.payload.get("action").and_then(Value::as_str) == Some("request_dialog"));
    let mut engine = Engine::new(config.phase_settings(dialog_enabled)?);
    for entry in recorded.entries.iter().filter(|e| e.kind == EntryKind::Event) {
        let event: SessionEvent = entry
            .payload
            .get("event")
            .cloned()
            .ok_or_else(|| "event entry without an event".to_owned())
            .and_then(|v| serde_json::from_value(v).map_err(|e| e.to_string()))
            .map_err(|reason| SessionError::Replay {
                seq: entry.seq,
                reason,
            })?;
        engine.apply(&event);
    }
    Ok(engine.into_transcript())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialog::{DialogError, DialogRequest};
    use crate::phase::Phase;

    const CONFIG: &str = r#"{
        "questionnaire": [
            {"question_id": "a", "text": "A?", "options": [
                {"option_id": "lo", "label": "low", "tendency": -1.0},
                {"option_id": "hi", "label": "high", "tendency": 1.0}]},
            {"question_id": "b", "text": "B?", "options": [
                {"option_id": "lo", "label": "low", "tendency": -0.5},
                {"option_id": "hi", "label": "high", "tendency": 0.5}]}
        ],
        "weights": {"a": 2.0, "b": 1.0},
        "presentation_ms": 1000,
        "dwell_ms": 500
    }"#;

    const SCRIPT: &str = r#"[
        {"at_ms": 10, "type": "answer", "payload": {"v": 1, "answers": {"a": "hi", "b": "lo"}}},
        {"at_ms": 20, "type": "initial_assessment", "payload": {"v": 1, "level": 4}},
        {"at_ms": 5000, "type": "final.decision", "payload": {"v": 1, "level": 3}}
    ]"#;

    #[test]
    fn quiet_session_walks_all_features() {
        let config = SessionConfig::from_json(CONFIG).unwrap();
        let script = parse_script(SCRIPT, "inline").unwrap();
        let out = simulate(&config, &[], &script).unwrap();
        assert!(out.completed);
        assert_eq!(out.final_level.unwrap().get(), 3);
        let replayed = replay(&config, &out.transcript).unwrap();
        assert_eq!(replayed.first_divergence(&out.transcript), None);
    }

    #[test]
    fn incomplete_script_stops() {
        let config = SessionConfig::from_json(CONFIG).unwrap();
        let script = parse_script(SCRIPT, "inline").unwrap();
        let out = simulate(&config, &[], &script[..2]).unwrap();
        assert!(!out.completed);
    }

    #[test]
    fn script_must_be_ordered() {
        let text = r#"[{"at_ms": 5, "type": "answer", "payload": {"v": 1, "answers": {}}},
                       {"at_ms": 1, "type": "initial_assessment", "payload": {"v": 1, "level": 4}}]"#;
        assert!(matches!(parse_script(text, "x"), Err(SessionError::ScriptOrder { index: 1, .. })));
    }

    struct Fixed(Result<String, ()>);

    impl DialogClient for Fixed {
        fn clarify(&self, _: &DialogRequest) -> Result<String, DialogError> {
            self.0.clone().map_err(|_| DialogError::Transport("down".into()))
        }
    }

    #[test]
    fn resolving_uses_client_then_fallback() {
        let config = SessionConfig::from_json(CONFIG).unwrap();
        for (client, origin) in [
            (Fixed(Ok("generated".into())), "service"),
            (Fixed(Err(())), "fallback"),
        ] {
            let mut engine = Engine::new(config.phase_settings(true).unwrap());
            let events = [
                SessionEvent::new(0, EventKind::SessionStarted),
                SessionEvent::new(
                    1,
                    EventKind::AnswersSubmitted {
                        answers: [("a".into(), "hi".into()), ("b".into(), "lo".into())].into(),
                    },
                ),
                SessionEvent::new(2, EventKind::InitialAssessmentGiven { level: 2 }),
                SessionEvent::reply(3, crate::phase::Reply::Problem),
                SessionEvent::reply(4, crate::phase::Reply::NotUnderstood),
            ];
            let mut last = Vec::new();
            for e in &events {
                last = engine.apply_resolving(e, Some(&client));
            }
            let say = last
                .iter()
                .find_map(|a| match a {
                    Action::Say { origin, .. } => origin.clone(),
                    _ => None,
                })
                .unwrap();
            assert_eq!(serde_json::to_value(&say).unwrap()["path"], origin);
            assert!(matches!(engine.state().phase, Phase::P2Understanding { attempt: 1, .. }));
            let replayed = replay(&config, engine.transcript()).unwrap();
            assert_eq!(replayed.first_divergence(engine.transcript()), None);
        }
    }
}
