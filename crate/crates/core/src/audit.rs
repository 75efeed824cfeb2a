//! Transcript auditing and summaries.
//!
//! Works on the JSON payloads only, so it can check transcripts written by
//! any build of the engine.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::transcript::{EntryKind, Transcript};

const LADDER: [&str; 4] = ["repeat", "rephrase", "contrast", "change_focus"];

#[derive(Debug, Clone, PartialEq, Error)]
#[error("seq {seq}: {reason}")]
pub struct Violation {
    pub seq: u64,
    pub reason: String,
}

fn violation(seq: u64, reason: impl Into<String>) -> Violation {
    Violation {
        seq,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureSummary {
    pub grounding: String,
    /// Reaction events attributed to the feature, acted on or not.
    pub reactions: usize,
    pub strategies: Vec<String>,
    pub clarified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditSummary {
    pub entries: usize,
    pub events: usize,
    pub ignored_events: usize,
    pub completed: bool,
    pub final_level: Option<u64>,
    pub system_level: Option<u64>,
    pub initial_level: Option<i64>,
    pub presentation_order: Vec<String>,
    pub reactions: usize,
    pub counterfactuals: usize,
    /// Levels of the counterfactual decisions shown, in order.
    pub counterfactual_levels: Vec<u64>,
    pub contested: Vec<String>,
    pub features: BTreeMap<String, FeatureSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum P {
    Assessment,
    Explain(String),
    Understanding(String, u64),
    Agreement(String),
    Final,
    Done,
}

fn parse_phase(v: &Value) -> Option<P> {
    let f = || v.get("feature_id").and_then(Value::as_str).map(str::to_owned);
    Some(match v.get("phase")?.as_str()? {
        "p0_assessment" => P::Assessment,
        "p1_explain" => P::Explain(f()?),
        "p2_understanding" => P::Understanding(f()?, v.get("attempt")?.as_u64()?),
        "p3_agreement" => P::Agreement(f()?),
        "p4_final_decision" => P::Final,
        "done" => P::Done,
        _ => return None,
    })
}

fn grounding_key(v: &Value) -> Option<(String, Option<u64>)> {
    Some((
        v.get("level")?.as_str()?.to_owned(),
        v.get("attempt").and_then(Value::as_u64),
    ))
}

fn grounding_edge_ok(from: &(String, Option<u64>), to: &(String, Option<u64>)) -> bool {
    match (from.0.as_str(), to.0.as_str()) {
        ("not_presented", "presented") => true,
        ("presented", "reaction_detected" | "agreed") => true,
        ("reaction_detected", "clarifying") => to.1 == Some(0),
        ("reaction_detected", "understood" | "understood_with_reservation") => true,
        ("clarifying", "clarifying") => matches!((from.1, to.1), (Some(a), Some(b)) if b == a + 1),
        ("clarifying", "understood" | "understood_with_reservation") => true,
        ("understood" | "understood_with_reservation", "agreed" | "disagreed") => true,
        _ => false,
    }
}

fn level_of(score: f64) -> u64 {
    if score < -0.6 {
        1
    } else if score < -0.2 {
        2
    } else if score <= 0.2 {
        3
    } else if score <= 0.6 {
        4
    } else {
        5
    }
}

/// Recomputes a counterfactual decision payload from its own contributions.
fn check_counterfactual(seq: u64, decision: &Value, contested: &BTreeSet<String>) -> Result<(), Violation> {
    let excluded: BTreeSet<String> = decision["excluded"]
        .as_array()
        .ok_or_else(|| violation(seq, "counterfactual without excluded set"))?
        .iter()
        .filter_map(|v| v.as_str().map(str::to_owned))
        .collect();
    if &excluded != contested {
        return Err(violation(seq, "counterfactual excludes something other than the contested set"));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for c in decision["contributions"].as_array().into_iter().flatten() {
        let id = c["feature_id"].as_str().unwrap_or_default();
        if excluded.contains(id) {
            continue;
        }
        let (w, t) = (c["weight"].as_f64().unwrap_or(0.0), c["tendency"].as_f64().unwrap_or(0.0));
        num += w * t;
        den += w;
    }
    let expected = if den > 0.0 { num / den } else { 0.0 };
    let score = decision["score"].as_f64().unwrap_or(f64::NAN);
    if (score - expected).abs() > 1e-9 {
        return Err(violation(seq, format!("counterfactual score {score} != recomputed {expected}")));
    }
    if decision["level"].as_u64() != Some(level_of(expected)) {
        return Err(violation(seq, "counterfactual level does not match its score"));
    }
    Ok(())
}

/// Checks phase order, grounding moves, strategy order and counterfactual
/// arithmetic; returns a summary when everything holds.
pub fn audit(transcript: &Transcript) -> Result<AuditSummary, Violation> {
    let mut phase: Option<P> = None;
    let mut presented: Vec<String> = Vec::new();
    let mut clarified: BTreeSet<String> = BTreeSet::new();
    let mut grounding: BTreeMap<String, (String, Option<u64>)> = BTreeMap::new();
    let mut strategies: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut contested: BTreeSet<String> = BTreeSet::new();
    let mut all_features: Option<Vec<String>> = None;
    let mut clock = 0u64;
    let mut reactions_by_feature: BTreeMap<String, usize> = BTreeMap::new();
    let mut summary = AuditSummary {
        entries: transcript.len(),
        events: 0,
        ignored_events: 0,
        completed: false,
        final_level: None,
        system_level: None,
        initial_level: None,
        presentation_order: Vec::new(),
        reactions: 0,
        counterfactuals: 0,
        counterfactual_levels: Vec::new(),
        contested: Vec::new(),
        features: BTreeMap::new(),
    };

    for (i, e) in transcript.entries.iter().enumerate() {
        let seq = e.seq;
        if seq != i as u64 {
            return Err(violation(seq, "sequence gap"));
        }
        // ignored events keep their own, possibly stale, timestamp
        let stale_ok = e.kind == EntryKind::Event && e.payload["handled"] == false;
        if e.timestamp_ms < clock && !stale_ok {
            return Err(violation(seq, "timestamp goes backwards"));
        }
        if !stale_ok {
            clock = e.timestamp_ms;
        }
        match e.kind {
            EntryKind::Event => {
                summary.events += 1;
                let handled = e.payload["handled"].as_bool().unwrap_or(false);
                if !handled {
                    summary.ignored_events += 1;
                }
                let ev = &e.payload["event"];
                if let Some(f) = ev["reaction"]["feature_id"].as_str() {
                    *reactions_by_feature.entry(f.to_owned()).or_default() += 1;
                }
                match ev["type"].as_str() {
                    Some("reaction") if handled => summary.reactions += 1,
                    Some("initial_assessment_given") if handled => {
                        summary.initial_level = summary.initial_level.or(ev["level"].as_i64().filter(|l| (1..=5).contains(l)))
                    }
                    _ => {}
                }
                for g in e.payload["grounding"].as_array().into_iter().flatten() {
                    let f = g["feature_id"].as_str().unwrap_or_default().to_owned();
                    let from = grounding_key(&g["from"]).ok_or_else(|| violation(seq, "bad grounding"))?;
                    let to = grounding_key(&g["to"]).ok_or_else(|| violation(seq, "bad grounding"))?;
                    let current = grounding
                        .get(&f)
                        .cloned()
                        .unwrap_or_else(|| ("not_presented".to_owned(), None));
                    if current != from {
                        return Err(violation(seq, format!("grounding of {f} jumps from {current:?}")));
                    }
                    if !grounding_edge_ok(&from, &to) {
                        return Err(violation(seq, format!("illegal grounding move for {f}: {from:?} -> {to:?}")));
                    }
                    if to.0 == "disagreed" {
                        contested.insert(f.clone());
                    }
                    grounding.insert(f, to);
                }
            }
            EntryKind::PhaseChange => {
                let to = parse_phase(&e.payload["to"]).ok_or_else(|| violation(seq, "unparseable phase"))?;
                let ok = match (&phase, &to) {
                    (None, P::Assessment) => true,
                    (Some(P::Assessment), P::Explain(_) | P::Final) => true,
                    (Some(P::Explain(_) | P::Agreement(_)), P::Explain(_) | P::Final) => true,
                    (Some(P::Explain(f)), P::Understanding(g, 0)) => f == g,
                    (Some(P::Understanding(f, a)), P::Understanding(g, b)) => f == g && *b == a + 1,
                    (Some(P::Understanding(f, _)), P::Agreement(g)) => f == g,
                    (Some(P::Final), P::Done) => true,
                    _ => false,
                };
                if !ok {
                    return Err(violation(seq, format!("phase {to:?} cannot follow {phase:?}")));
                }
                match &to {
                    P::Explain(f) => {
                        if presented.contains(f) {
                            return Err(violation(seq, format!("{f} presented twice")));
                        }
                        presented.push(f.clone());
                    }
                    P::Understanding(f, 0) => {
                        if !clarified.insert(f.clone()) {
                            return Err(violation(seq, format!("second clarification episode for {f}")));
                        }
                    }
                    P::Final => {
                        if let Some(all) = &all_features {
                            let mut got = presented.clone();
                            got.sort();
                            let mut want = all.clone();
                            want.sort();
                            if got != want {
                                return Err(violation(seq, "final decision before every feature was explained"));
                            }
                        }
                    }
                    P::Done => summary.completed = true,
                    _ => {}
                }
                phase = Some(to);
            }
            EntryKind::Action => {
                let a = &e.payload;
                match a["action"].as_str() {
                    Some("say") => {
                        if let (Some(s), Some(f)) =
                            (a["utterance"]["strategy"].as_str(), a["utterance"]["feature_id"].as_str())
                        {
                            let used = strategies.entry(f.to_owned()).or_default();
                            used.push(s.to_owned());
                            if used.len() > LADDER.len() || used.iter().zip(LADDER).any(|(u, l)| u != l) {
                                return Err(violation(seq, format!("strategies for {f} out of ladder order: {used:?}")));
                            }
                        }
                    }
                    Some("present_counterfactual") => {
                        check_counterfactual(seq, &a["decision"], &contested)?;
                        summary.counterfactuals += 1;
                        summary.counterfactual_levels.extend(a["decision"]["level"].as_u64());
                    }
                    Some("request_final_decision") => {
                        summary.system_level = a["original"]["level"].as_u64();
                    }
                    Some("end_session") => summary.final_level = a["final_level"].as_u64(),
                    _ => {}
                }
            }
        }
        if all_features.is_none() && e.kind == EntryKind::Action && e.payload["action"] == "present_feature" {
            all_features = Some(feature_set_from_asks(transcript));
        }
    }
    for (f, level) in grounding {
        let strategies = strategies.remove(&f).unwrap_or_default();
        summary.features.insert(
            f.clone(),
            FeatureSummary {
                grounding: level.0,
                reactions: reactions_by_feature.get(&f).copied().unwrap_or(0),
                strategies,
                clarified: clarified.contains(&f),
            },
        );
    }
    summary.presentation_order = presented;
    summary.contested = contested.into_iter().collect();
    Ok(summary)
}

fn feature_set_from_asks(transcript: &Transcript) -> Vec<String> {
    transcript
        .actions()
        .filter(|e| e.payload["action"] == "ask" && e.payload["prompt"] == "questionnaire")
        .filter_map(|e| e.payload["question"]["question_id"].as_str().map(str::to_owned))
        .collect()
}
