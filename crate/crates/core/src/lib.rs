//! Emotion-sensitive explanation engine.
//!
//! Physiological and facial signals are watched for arousal reactions while a
//! risk classification is explained feature by feature. A reaction during a
//! feature's presentation opens a clarification dialog for that feature.

pub mod audit;
pub mod cli;
pub mod config;
pub mod detect;
pub mod dialog;
pub mod phase;
pub mod risk;
pub mod service;
pub mod session;
pub mod signal;
pub mod transcript;
pub mod wire;
