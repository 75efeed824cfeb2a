//! Walks one feature through the whole clarification ladder. Clarification
//! texts come from an in-process dialog client that gives up on the
//! contrasting strategy, so that step falls back to a template.
//!
//! ```text
//! cargo run --example clarification_ladder
//! ```

use std::path::PathBuf;

use grounding_engine::config::SessionConfig;
use grounding_engine::dialog::{DialogClient, DialogError, DialogRequest, Strategy};
use grounding_engine::phase::{Action, EventKind, Reply, SessionEvent};
use grounding_engine::session::Engine;
use grounding_engine::risk::FeatureId;

struct Scripted;

impl DialogClient for Scripted {
    fn clarify(&self, request: &DialogRequest) -> Result<String, DialogError> {
        match request.strategy {
            Strategy::Contrast => Err(DialogError::Transport("model overloaded".into())),
            s => Ok(format!("[{}] Here is another way to look at {}.", s.as_str(), request.label)),
        }
    }
}

fn show(actions: &[Action]) {
    for a in actions {
        match a {
            Action::Say { utterance, origin } => {
                let origin = origin.as_ref().map(|o| format!("{o:?}")).unwrap_or_default();
                println!("  system: {}  {origin}", utterance.text);
            }
            Action::PresentFeature { text, .. } => println!("  present: {text}"),
            Action::AskProblemQuestion { text, .. }
            | Action::AskUnderstanding { text, .. }
            | Action::AskAgreement { text, .. } => println!("  ask: {text}"),
            _ => {}
        }
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let config = SessionConfig::load(&fixtures.join("config.json"))?;
    let mut engine = Engine::new(config.phase_settings(true)?);
    let client = Scripted;
    let reply = |t, reply| SessionEvent::new(t, EventKind::UserReply { reply, free_text: String::new() });

    let answers = [("gender", "female"), ("income", "high"), ("experience", "some"), ("horizon", "short")]
        .into_iter()
        .map(|(q, a)| (FeatureId::new(q), a.to_owned()))
        .collect();
    let script = [
        SessionEvent::new(0, EventKind::SessionStarted),
        SessionEvent::new(100, EventKind::AnswersSubmitted { answers }),
        SessionEvent::new(200, EventKind::InitialAssessmentGiven { level: 3 }),
        reply(300, Reply::Problem),
        reply(1000, Reply::Problem),
        reply(2000, Reply::NotUnderstood),
        reply(3000, Reply::NotUnderstood),
        reply(4000, Reply::NotUnderstood),
        reply(5000, Reply::NotUnderstood),
        reply(6000, Reply::Agree),
    ];
    for event in &script {
        println!("{:>5} ms {:?}", event.timestamp_ms, event.kind);
        show(&engine.apply_resolving(event, Some(&client)));
        println!("  -> phase {:?}", engine.state().phase);
    }
    for (f, level) in engine.state().ledger.iter() {
        println!("{f}: {level}");
    }
    Ok(())
}
