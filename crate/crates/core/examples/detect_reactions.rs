//! Runs the arousal detector over the bundled heart-rate and facial traces
//! and fuses the anomalies into reaction events. A presentation schedule
//! tags each reaction with the feature on screen at the time.
//!
//! ```text
//! cargo run --example detect_reactions
//! ```

use std::path::PathBuf;

use grounding_engine::config::SessionConfig;
use grounding_engine::detect::{detect_anomalies, fuse_reactions};
use grounding_engine::risk::FeatureId;
use grounding_engine::signal::load_traces;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let config = SessionConfig::load(&fixtures.join("config.json"))?;
    let samples = load_traces(&[fixtures.join("hr.csv"), fixtures.join("face.csv")], &config.sources)?;
    println!("{} samples from {} sources", samples.len(), config.sources.len());

    let anomalies = detect_anomalies(samples.into_iter().map(Ok::<_, std::convert::Infallible>), &config.detector)?;
    for a in &anomalies {
        println!("anomaly  {:>6} ms  {:<4} z = {:>7.2}  value {:.3}", a.timestamp_ms, a.source_id, a.z_score, a.sample_value);
    }

    // experience on screen until 3700 ms, gender after that
    let schedule = |t: u64| Some(FeatureId::new(if t < 3700 { "experience" } else { "gender" }));
    for r in fuse_reactions(&anomalies, &config.detector, &schedule) {
        let sources: Vec<String> = r.contributing.iter().map(|a| a.source_id.to_string()).collect();
        println!(
            "reaction {:>6} ms  during {:<10} from {} anomalies ({})",
            r.timestamp_ms,
            r.feature_id.map(|f| f.0).unwrap_or_default(),
            r.contributing.len(),
            sources.join(", ")
        );
    }
    Ok(())
}
