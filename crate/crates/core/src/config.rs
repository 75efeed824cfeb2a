//! Session configuration, loaded from strict JSON.
//!
//! Every error names the offending field as a JSON pointer.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{DetectorConfig, DetectorConfigError};
use crate::dialog::{validate_template, DialogClient, HttpDialogClient, TemplateSet};
use crate::phase::PhaseSettings;
use crate::risk::{FeatureId, Question, RiskError, RiskModel};
use crate::signal::{SignalError, SourceDescriptor, SourceId, SynthSpec};

pub const ENV_BIND: &str = "GE_BIND";
pub const ENV_DIALOG_URL: &str = "GE_DIALOG_URL";
pub const DEFAULT_BIND: &str = "127.0.0.1:8787";

fn default_dialog_timeout_ms() -> u64 {
    5000
}

fn default_presentation_ms() -> u64 {
    6000
}

fn default_dwell_ms() -> u64 {
    1500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub questionnaire: Vec<Question>,
    pub weights: BTreeMap<FeatureId, f64>,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub sources: Vec<SourceDescriptor>,
    /// Overrides of the built-in template texts, by id.
    #[serde(default)]
    pub templates: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dialog_service_url: Option<String>,
    #[serde(default = "default_dialog_timeout_ms")]
    pub dialog_timeout_ms: u64,
    /// Simulated presentation length in scripted runs.
    #[serde(default = "default_presentation_ms")]
    pub presentation_ms: u64,
    /// Monitoring continues this long after a presentation ends.
    #[serde(default = "default_dwell_ms")]
    pub dwell_ms: u64,
    /// Added to every synth seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub synth: Vec<SynthSpec>,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{pointer}: {reason}")]
    Invalid { pointer: String, reason: String },
}

impl ConfigError {
    pub fn pointer(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { pointer, .. } => Some(pointer),
            ConfigError::Io { .. } => None,
        }
    }
}

fn invalid(pointer: impl Into<String>, reason: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        pointer: pointer.into(),
        reason: reason.to_string(),
    }
}

fn escape_pointer(segment: &str) -> String {
    segment.replace('~', "~0").replace('/', "~1")
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{}", escape_pointer(key))),
            Segment::Enum { variant } => out.push_str(&format!("/{}", escape_pointer(variant))),
            Segment::Unknown => out.push_str("/?"),
        }
    }
    out
}

impl SessionConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: SessionConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| invalid(json_pointer(e.path()), e.inner()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn risk_model(&self) -> Result<RiskModel, ConfigError> {
        RiskModel::new(self.questionnaire.clone(), self.weights.clone()).map_err(|e| {
            let pointer = match &e {
                RiskError::MissingWeight(f) | RiskError::InvalidWeight(f) => {
                    format!("/weights/{}", escape_pointer(f.as_str()))
                }
                RiskError::UnknownFeature(f) => format!("/weights/{}", escape_pointer(f.as_str())),
                RiskError::InvalidQuestion { question_id, .. } => self
                    .questionnaire
                    .iter()
                    .position(|q| q.question_id == *question_id)
                    .map_or("/questionnaire".to_owned(), |i| format!("/questionnaire/{i}")),
                _ => "/questionnaire".to_owned(),
            };
            invalid(pointer, e)
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.risk_model()?;
        self.detector.validate().map_err(|e| {
            let field = match e {
                DetectorConfigError::Threshold(_) => "z_threshold",
                DetectorConfigError::Window | DetectorConfigError::WindowExceedsSpan { .. } => {
                    "detection_window_ms"
                }
                DetectorConfigError::MinSamples => "min_baseline_samples",
                DetectorConfigError::Epsilon(_) => "epsilon_sd",
            };
            invalid(format!("/detector/{field}"), e)
        })?;
        let mut seen = BTreeSet::new();
        for (i, d) in self.sources.iter().enumerate() {
            d.validate().map_err(|e| invalid(format!("/sources/{i}"), e))?;
            if !seen.insert(d.source_id.clone()) {
                return Err(invalid(
                    format!("/sources/{i}/source_id"),
                    format!("duplicate source {}", d.source_id),
                ));
            }
        }
        for (id, text) in &self.templates {
            validate_template(id, text)
                .map_err(|e| invalid(format!("/templates/{}", escape_pointer(id)), e))?;
        }
        if self.dialog_timeout_ms == 0 {
            return Err(invalid("/dialog_timeout_ms", "must be positive"));
        }
        if self.presentation_ms == 0 {
            return Err(invalid("/presentation_ms", "must be positive"));
        }
        for (i, s) in self.synth.iter().enumerate() {
            s.validate().map_err(|e| invalid(format!("/synth/{i}"), e))?;
            if !seen.contains(&s.source_id) {
                return Err(invalid(
                    format!("/synth/{i}/source_id"),
                    format!("source {} is not declared in /sources", s.source_id),
                ));
            }
        }
        Ok(())
    }

    pub fn templates(&self) -> TemplateSet {
        TemplateSet::with_overrides(&self.templates)
    }

    pub fn source_ids(&self) -> Vec<SourceId> {
        self.sources.iter().map(|d| d.source_id.clone()).collect()
    }

    /// Synth specs with the session seed applied.
    pub fn seeded_synth(&self) -> Vec<SynthSpec> {
        self.synth
            .iter()
            .map(|s| SynthSpec {
                seed: s.seed.wrapping_add(self.seed),
                ..s.clone()
            })
            .collect()
    }

    /// The dialog URL from the environment, else from the file.
    pub fn effective_dialog_url(&self) -> Option<String> {
        std::env::var(ENV_DIALOG_URL)
            .ok()
            .filter(|u| !u.is_empty())
            .or_else(|| self.dialog_service_url.clone())
    }

    pub fn dialog_client(&self) -> Option<Arc<dyn DialogClient>> {
        self.effective_dialog_url().map(|url| {
            Arc::new(HttpDialogClient::new(
                url,
                Duration::from_millis(self.dialog_timeout_ms),
            )) as Arc<dyn DialogClient>
        })
    }

    pub fn phase_settings(&self, dialog_enabled: bool) -> Result<Arc<PhaseSettings>, ConfigError> {
        Ok(Arc::new(PhaseSettings {
            model: self.risk_model()?,
            templates: self.templates(),
            presentation_ms: self.presentation_ms,
            dwell_ms: self.dwell_ms,
            dialog_enabled,
        }))
    }
}

impl From<SignalError> for ConfigError {
    fn from(e: SignalError) -> Self {
        invalid("/sources", e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "questionnaire": [
            {"question_id": "gender", "text": "Gender?", "options": [
                {"option_id": "f", "label": "female", "tendency": -1.0},
                {"option_id": "m", "label": "male", "tendency": 1.0}
            ]}
        ],
        "weights": {"gender": 1.0},
        "sources": [{"source_id": "hr", "kind": "heart_rate_bpm", "expected_rate_hz": 10, "valid_range": [30, 220]}]
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = SessionConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.detector, DetectorConfig::default());
        assert_eq!(c.dialog_timeout_ms, 5000);
        assert_eq!(c.dwell_ms, 1500);
    }

    fn err_pointer(text: &str) -> String {
        SessionConfig::from_json(text).unwrap_err().pointer().unwrap().to_owned()
    }

    #[test]
    fn negative_threshold_names_field() {
        let text = MINIMAL.replacen("\"weights\"", "\"detector\": {\"z_threshold\": -1}, \"weights\"", 1);
        assert_eq!(err_pointer(&text), "/detector/z_threshold");
    }

    #[test]
    fn unknown_field_names_location() {
        let text = MINIMAL.replacen("\"Gender?\"", "\"Gender?\", \"colour\": 1", 1);
        assert_eq!(err_pointer(&text), "/questionnaire/0/colour");
    }

    #[test]
    fn bad_types_and_templates() {
        let text = MINIMAL.replacen("\"gender\": 1.0", "\"gender\": \"heavy\"", 1);
        assert_eq!(err_pointer(&text), "/weights/gender");
        let text = MINIMAL.replacen("\"weights\"", "\"templates\": {\"final_request\": \"{feature}\"}, \"weights\"", 1);
        assert_eq!(err_pointer(&text), "/templates/final_request");
        let text = MINIMAL.replacen("\"weights\": {\"gender\": 1.0}", "\"weights\": {}", 1);
        assert_eq!(err_pointer(&text), "/weights/gender");
    }

    #[test]
    fn weight_for_unknown_question_and_negative_duration() {
        let text = MINIMAL.replacen("\"gender\": 1.0", "\"gender\": 1.0, \"salary\": 2.0", 1);
        assert_eq!(err_pointer(&text), "/weights/salary");
        let text = MINIMAL.replacen("\"weights\"", "\"presentation_ms\": -5, \"weights\"", 1);
        assert_eq!(err_pointer(&text), "/presentation_ms");
    }
}
