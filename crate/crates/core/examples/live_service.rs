//! Starts the websocket service on a free port and drives one session with
//! a small client: questionnaire, a quiet heart-rate baseline and a spike
//! while the second feature is on screen.
//!
//! ```text
//! cargo run --example live_service
//! ```

use std::path::PathBuf;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use grounding_engine::config::SessionConfig;
use grounding_engine::service::{serve, ServiceState};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio_tungstenite::tungstenite::Message;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let mut config = SessionConfig::load(&fixtures.join("config.json"))?;
    config.dwell_ms = 200;
    let transcripts = std::env::temp_dir().join("ge-live-example");
    let state = ServiceState::new(config, transcripts.clone(), None);
    let listener = TcpListener::bind("127.0.0.1:0").await?;
    let url = format!("ws://{}/ws", listener.local_addr()?);
    tokio::spawn(serve(listener, state));
    println!("service at {url}");

    let (mut ws, _) = tokio_tungstenite::connect_async(url).await?;
    let msg = |kind: &str, t: u64, payload: Value| {
        Message::Text(json!({"type": kind, "session_id": "demo", "timestamp_ms": t, "payload": payload}).to_string().into())
    };
    let answers = json!({"gender": "female", "income": "high", "experience": "some", "horizon": "short"});
    let mut outgoing = vec![
        (0, msg("session.start", 0, json!({"v": 1}))),
        (100, msg("answer", 100, json!({"v": 1, "answers": answers}))),
        (200, msg("initial_assessment", 200, json!({"v": 1, "level": 2}))),
        (300, msg("explanation.present", 300, json!({"v": 1, "feature_id": "experience"}))),
    ];
    for i in 0..20u64 {
        let (t, v) = (400 + i * 100, 60.0 + [0.0, 0.4, -0.4, 0.1][(i % 4) as usize]);
        outgoing.push((t, msg("signal.sample", t, json!({"v": 1, "source_id": "hr", "value": v}))));
    }
    outgoing.extend([
        (2400, msg("signal.sample", 2400, json!({"v": 1, "source_id": "hr", "value": 88.0}))),
        (2500, msg("user.reply", 2500, json!({"v": 1, "kind": "no_problem"}))),
        (2600, msg("user.reply", 2600, json!({"v": 1, "kind": "agree"}))),
        (2700, msg("explanation.present", 2700, json!({"v": 1, "feature_id": "income"}))),
        (3100, msg("explanation.present", 3100, json!({"v": 1, "feature_id": "horizon"}))),
        (4000, msg("final.decision", 4000, json!({"v": 1, "level": 3}))),
    ]);
    // deadlines run on the wall clock, so the client keeps pace with its timestamps
    let start = tokio::time::Instant::now();
    for (t, m) in outgoing {
        tokio::time::sleep_until(start + Duration::from_millis(t)).await;
        ws.send(m).await?;
    }

    let read = async {
        while let Some(Ok(Message::Text(text))) = ws.next().await {
            let v: Value = serde_json::from_str(&text).unwrap_or_default();
            let kind = v["type"].as_str().unwrap_or_default().to_owned();
            if kind == "transcript.entry" {
                continue;
            }
            let text = v["payload"]["text"].as_str().unwrap_or_default();
            println!("<- {kind:<22} {text}");
            if kind == "session.end" {
                break;
            }
        }
    };
    tokio::time::timeout(Duration::from_secs(20), read).await?;
    println!("transcript written under {}", transcripts.display());
    Ok(())
}
