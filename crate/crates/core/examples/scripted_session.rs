//! Runs the bundled scripted session offline against the recorded traces
//! and prints what the system would have shown. Pass a path to also write
//! the transcript.
//!
//! ```text
//! cargo run --example scripted_session -- /tmp/session.jsonl
//! ```

use std::path::PathBuf;

use grounding_engine::config::SessionConfig;
use grounding_engine::session::{gather_samples, load_script, simulate};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let config = SessionConfig::load(&fixtures.join("config.json"))?;
    let script = load_script(&fixtures.join("script.json"))?;
    let samples = gather_samples(&config, &[fixtures.join("hr.csv"), fixtures.join("face.csv")])?;
    let outcome = simulate(&config, &samples, &script)?;

    for entry in &outcome.transcript.entries {
        let p = &entry.payload;
        let line = match p["action"].as_str() {
            Some("present_feature") | Some("ask_problem_question") | Some("ask_understanding")
            | Some("ask_agreement") | Some("present_counterfactual") | Some("request_final_decision") => {
                p["text"].as_str().map(str::to_owned)
            }
            Some("say") => p["utterance"]["text"].as_str().map(str::to_owned),
            _ if p["to"].is_object() => Some(format!("[phase {}]", p["to"]["phase"].as_str().unwrap_or("?"))),
            _ => None,
        };
        if let Some(line) = line {
            println!("{:>6} ms  {line}", entry.timestamp_ms);
        }
    }
    println!(
        "{} anomalies, {} reactions, {} transcript entries, final level {:?}",
        outcome.anomalies,
        outcome.reactions,
        outcome.transcript.len(),
        outcome.final_level.map(|l| l.get())
    );
    if let Some(path) = std::env::args().nth(1) {
        outcome.transcript.persist(path.as_ref())?;
        println!("wrote {path}");
    }
    Ok(())
}
