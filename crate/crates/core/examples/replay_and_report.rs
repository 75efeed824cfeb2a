//! Replays a recorded transcript, reports whether the engine still produces
//! the same session, and prints the audit summary.
//!
//! ```text
//! cargo run --example replay_and_report -- crates/core/fixtures/golden.jsonl
//! ```

use std::path::PathBuf;

use grounding_engine::audit::audit;
use grounding_engine::config::SessionConfig;
use grounding_engine::session::replay;
use grounding_engine::transcript::Transcript;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| fixtures.join("golden.jsonl"));
    let config = SessionConfig::load(&fixtures.join("config.json"))?;
    let recorded = Transcript::load(&path)?;

    match replay(&config, &recorded)?.first_divergence(&recorded) {
        None => println!("replay identical over {} entries", recorded.len()),
        Some(seq) => println!("replay diverges at seq {seq}"),
    }
    match audit(&recorded) {
        Ok(summary) => println!("{}", serde_json::to_string_pretty(&summary)?),
        Err(v) => println!("audit failed: {v}"),
    }
    Ok(())
}
