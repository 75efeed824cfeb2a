//! Synthesizes a heart-rate and a facial-arousal trace with one burst each,
//! merges them into a single time-ordered stream and, given a directory
//! argument, writes them as CSV traces.
//!
//! ```text
//! cargo run --example synth_and_merge -- fixtures
//! ```

use std::fs::File;
use std::path::PathBuf;

use grounding_engine::signal::{merge_streams, synth_trace, write_trace, Burst, SignalSample, SourceId, SynthSpec};

fn specs() -> [SynthSpec; 2] {
    [
        SynthSpec {
            source_id: SourceId::new("hr"),
            baseline: 60.0,
            noise_sd: 0.5,
            rate_hz: 10.0,
            duration_ms: 20_000,
            bursts: vec![Burst { start_ms: 5000, duration_ms: 400, delta: 15.0 }],
            seed: 22,
        },
        SynthSpec {
            source_id: SourceId::new("face"),
            baseline: 0.1,
            noise_sd: 0.04,
            rate_hz: 30.0,
            duration_ms: 8000,
            bursts: vec![Burst { start_ms: 5100, duration_ms: 300, delta: 0.4 }],
            seed: 11,
        },
    ]
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = std::env::args().nth(1).map(PathBuf::from);
    let mut streams = Vec::new();
    for spec in specs() {
        let samples: Vec<SignalSample> = synth_trace(&spec)?.collect();
        println!(
            "{}: {} samples, first at {} ms, last at {} ms",
            spec.source_id,
            samples.len(),
            samples[0].timestamp_ms,
            samples[samples.len() - 1].timestamp_ms
        );
        if let Some(dir) = &out_dir {
            let path = dir.join(format!("{}.csv", spec.source_id));
            write_trace(File::create(&path)?, &samples)?;
            println!("  wrote {}", path.display());
        }
        streams.push(samples.into_iter().map(Ok::<_, std::convert::Infallible>));
    }

    let merged: Vec<SignalSample> = merge_streams(streams).collect::<Result<_, _>>()?;
    println!("merged stream: {} samples", merged.len());
    for s in merged.iter().filter(|s| (5000..5100).contains(&s.timestamp_ms)) {
        println!("  {:>6} ms  {:<5} {:.3}", s.timestamp_ms, s.source_id, s.value);
    }
    Ok(())
}
