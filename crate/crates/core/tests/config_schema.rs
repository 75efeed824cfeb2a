//! Keeps the shipped JSON schema in step with the config types.

mod common;

use std::collections::BTreeSet;

use grounding_engine::config::SessionConfig;
use grounding_engine::dialog::TemplateSet;
use serde_json::Value;

fn schema() -> Value {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/config.schema.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn keys(v: &Value) -> BTreeSet<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

#[test]
fn schema_properties_match_config_fields() {
    let schema = schema();
    let mut config = SessionConfig::load(&common::fixture("config.json")).unwrap();
    config.dialog_service_url = Some("http://localhost:9/clarify".into());
    config.synth = vec![serde_json::from_str(
        r#"{"source_id": "hr", "baseline": 60, "rate_hz": 10, "duration_ms": 1000, "bursts": [{"start_ms": 0, "duration_ms": 1, "delta": 1}]}"#,
    )
    .unwrap()];
    let v = serde_json::to_value(&config).unwrap();
    assert_eq!(keys(&v), keys(&schema["properties"]));
    assert_eq!(keys(&v["detector"]), keys(&schema["$defs"]["detector"]["properties"]));
    assert_eq!(keys(&v["sources"][0]), keys(&schema["$defs"]["source"]["properties"]));
    assert_eq!(keys(&v["questionnaire"][1]), keys(&schema["$defs"]["question"]["properties"]));
    assert_eq!(keys(&v["synth"][0]), keys(&schema["$defs"]["synth"]["properties"]));
    for (field, default) in &schema["$defs"]["detector"]["properties"].as_object().unwrap().clone() {
        assert_eq!(v["detector"][field], default["default"], "{field}");
    }
}

#[test]
fn schema_lists_every_template_id() {
    let schema = schema();
    let listed: BTreeSet<&str> = schema["properties"]["templates"]["propertyNames"]["enum"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(listed, TemplateSet::ids().collect());
}
