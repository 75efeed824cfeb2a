//! Reaction detection: a per-source rolling z-score over a trailing baseline
//! span, and greedy cross-source fusion of anomalies into reaction events.
//!
//! Baseline statistics use the population standard deviation over the
//! non-anomalous samples of the last `baseline_span_ms` (strictly before the
//! scored sample). Samples flagged as anomalous never enter a baseline.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::risk::FeatureId;
use crate::signal::{SignalSample, SourceId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub z_threshold: f64,
    pub detection_window_ms: u64,
    pub baseline_span_ms: u64,
    pub min_baseline_samples: usize,
    pub epsilon_sd: f64,
    pub refractory_ms: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            z_threshold: 2.5,
            detection_window_ms: 500,
            baseline_span_ms: 10_000,
            min_baseline_samples: 5,
            epsilon_sd: 1e-9,
            refractory_ms: 2_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectorConfigError {
    #[error("z_threshold must be > 0 (got {0})")]
    Threshold(f64),
    #[error("detection_window_ms must be positive")]
    Window,
    #[error("detection_window_ms ({window}) exceeds baseline_span_ms ({span})")]
    WindowExceedsSpan { window: u64, span: u64 },
    #[error("min_baseline_samples must be positive")]
    MinSamples,
    #[error("epsilon_sd must be > 0 (got {0})")]
    Epsilon(f64),
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectorConfigError> {
        if !(self.z_threshold > 0.0) || !self.z_threshold.is_finite() {
            return Err(DetectorConfigError::Threshold(self.z_threshold));
        }
        if self.detection_window_ms == 0 {
            return Err(DetectorConfigError::Window);
        }
        if self.detection_window_ms > self.baseline_span_ms {
            return Err(DetectorConfigError::WindowExceedsSpan {
                window: self.detection_window_ms,
                span: self.baseline_span_ms,
            });
        }
        if self.min_baseline_samples == 0 {
            return Err(DetectorConfigError::MinSamples);
        }
        if !(self.epsilon_sd > 0.0) {
            return Err(DetectorConfigError::Epsilon(self.epsilon_sd));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyEvent {
    pub source_id: SourceId,
    pub timestamp_ms: u64,
    pub z_score: f64,
    pub sample_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReactionEvent {
    pub timestamp_ms: u64,
    pub contributing: Vec<AnomalyEvent>,
    pub feature_id: Option<FeatureId>,
}

/// `(x - mean) / sd` over `history` with the population sd; 0 when the sd is
/// below `epsilon_sd` or the history is empty.
pub fn rolling_zscore(history: &[f64], x: f64, epsilon_sd: f64) -> f64 {
    if history.is_empty() {
        return 0.0;
    }
    let n = history.len() as f64;
    let mean = history.iter().sum::<f64>() / n;
    let var = history.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < epsilon_sd {
        0.0
    } else {
        (x - mean) / sd
    }
}

/// Outcome of feeding one sample to a [`ZScoreDetector`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Observation {
    /// Baseline too small; the sample was absorbed.
    Warmup,
    Scored { z: f64, anomalous: bool },
}

// Re-anchor the running sums after this many evictions to bound drift.
/// Relative variance below which the running sums are recomputed.
const CANCELLATION: f64 = 1e-6;

const REFRESH_EVERY: u32 = 64;

/// Incremental detector for a single source.
///
/// Keeps the admitted baseline in a deque with running sums of deviations
/// from an anchor value, so each sample costs amortized O(1).
#[derive(Debug, Clone)]
pub struct ZScoreDetector {
    config: DetectorConfig,
    window: VecDeque<(u64, f64)>,
    anchor: f64,
    sum: f64,
    sum_sq: f64,
    evictions: u32,
}

impl ZScoreDetector {
    pub fn new(config: DetectorConfig) -> Self {
        Self {
            config,
            window: VecDeque::new(),
            anchor: 0.0,
            sum: 0.0,
            sum_sq: 0.0,
            evictions: 0,
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn baseline_len(&self) -> usize {
        self.window.len()
    }

    fn admit(&mut self, t: u64, x: f64) {
        if self.window.is_empty() {
            self.anchor = x;
            self.sum = 0.0;
            self.sum_sq = 0.0;
        }
        let d = x - self.anchor;
        self.sum += d;
        self.sum_sq += d * d;
        self.window.push_back((t, x));
    }

    fn evict_before(&mut self, t: u64) {
        let span = self.config.baseline_span_ms;
        while let Some(&(ts, x)) = self.window.front() {
            if ts + span >= t {
                break;
            }
            self.window.pop_front();
            let d = x - self.anchor;
            self.sum -= d;
            self.sum_sq -= d * d;
            self.evictions += 1;
        }
        if self.window.is_empty() {
            self.sum = 0.0;
            self.sum_sq = 0.0;
            self.evictions = 0;
        } else if self.evictions >= REFRESH_EVERY {
            self.refresh();
        }
    }

    fn refresh(&mut self) {
        let n = self.window.len() as f64;
        self.anchor = self.window.iter().map(|&(_, x)| x).sum::<f64>() / n;
        let (mut s, mut s2) = (0.0, 0.0);
        for &(_, x) in &self.window {
            let d = x - self.anchor;
            s += d;
            s2 += d * d;
        }
        self.sum = s;
        self.sum_sq = s2;
        self.evictions = 0;
    }

    pub fn observe(&mut self, timestamp_ms: u64, x: f64) -> Observation {
        self.evict_before(timestamp_ms);
        if self.window.len() < self.config.min_baseline_samples {
            self.admit(timestamp_ms, x);
            return Observation::Warmup;
        }
        let n = self.window.len() as f64;
        let mut mean_dev = self.sum / n;
        let mut var = self.sum_sq / n - mean_dev * mean_dev;
        if var <= CANCELLATION * (self.sum_sq / n) {
            // the anchor is far from the baseline mean; re-centre before trusting var
            self.refresh();
            mean_dev = self.sum / n;
            var = self.sum_sq / n - mean_dev * mean_dev;
        }
        let var = var.max(0.0);
        let sd = var.sqrt();
        let z = if sd < self.config.epsilon_sd {
            0.0
        } else {
            (x - (self.anchor + mean_dev)) / sd
        };
        let anomalous = z.abs() >= self.config.z_threshold;
        if !anomalous {
            self.admit(timestamp_ms, x);
        }
        Observation::Scored { z, anomalous }
    }
}

/// Runs one detector per source over a merged, time-ordered stream.
#[derive(Debug, Clone)]
pub struct MultiSourceDetector {
    config: DetectorConfig,
    detectors: BTreeMap<SourceId, ZScoreDetector>,
}

impl MultiSourceDetector {
    pub fn new(config: DetectorConfig) -> Self {
        Self {
            config,
            detectors: BTreeMap::new(),
        }
    }

    pub fn observe(&mut self, sample: &SignalSample) -> Option<AnomalyEvent> {
        let det = self
            .detectors
            .entry(sample.source_id.clone())
            .or_insert_with(|| ZScoreDetector::new(self.config.clone()));
        match det.observe(sample.timestamp_ms, sample.value) {
            Observation::Scored { z, anomalous: true } => Some(AnomalyEvent {
                source_id: sample.source_id.clone(),
                timestamp_ms: sample.timestamp_ms,
                z_score: z,
                sample_value: sample.value,
            }),
            _ => None,
        }
    }
}

/// Anomalies of a time-ordered stream. Works for one source or a merged
/// multi-source stream (each source keeps its own baseline).
pub fn detect_anomalies<I, E>(stream: I, config: &DetectorConfig) -> Result<Vec<AnomalyEvent>, E>
where
    I: IntoIterator<Item = Result<SignalSample, E>>,
{
    let mut det = MultiSourceDetector::new(config.clone());
    let mut out = Vec::new();
    for sample in stream {
        if let Some(a) = det.observe(&sample?) {
            out.push(a);
        }
    }
    Ok(out)
}

/// Which feature, if any, was under presentation at a given time.
pub trait PresentationContext {
    fn feature_at(&self, timestamp_ms: u64) -> Option<FeatureId>;
}

/// No presentation running.
impl PresentationContext for () {
    fn feature_at(&self, _: u64) -> Option<FeatureId> {
        None
    }
}

impl<F> PresentationContext for F
where
    F: Fn(u64) -> Option<FeatureId>,
{
    fn feature_at(&self, timestamp_ms: u64) -> Option<FeatureId> {
        self(timestamp_ms)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FuseOutcome {
    /// The anomaly opened a new reaction.
    Opened(ReactionEvent),
    /// The anomaly joined the currently open reaction.
    Joined,
    /// Inside the refractory period of the last reaction, outside its window.
    Suppressed,
}

/// Online form of [`fuse_reactions`]; reports a reaction as soon as its first
/// anomaly arrives.
#[derive(Debug, Clone)]
pub struct ReactionFuser {
    window_ms: u64,
    refractory_ms: u64,
    last_open_ms: Option<u64>,
}

impl ReactionFuser {
    pub fn new(config: &DetectorConfig) -> Self {
        Self {
            window_ms: config.detection_window_ms,
            refractory_ms: config.refractory_ms,
            last_open_ms: None,
        }
    }

    pub fn push(&mut self, anomaly: AnomalyEvent, ctx: &dyn PresentationContext) -> FuseOutcome {
        let t = anomaly.timestamp_ms;
        match self.last_open_ms {
            Some(open) if t.saturating_sub(open) <= self.window_ms => FuseOutcome::Joined,
            Some(open) if t.saturating_sub(open) < self.refractory_ms => FuseOutcome::Suppressed,
            _ => {
                self.last_open_ms = Some(t);
                FuseOutcome::Opened(ReactionEvent {
                    timestamp_ms: t,
                    feature_id: ctx.feature_at(t),
                    contributing: vec![anomaly],
                })
            }
        }
    }
}

/// Groups time-ordered anomalies into reaction events: a reaction opens at
/// the first anomaly at least `refractory_ms` after the previous opener and
/// collects every anomaly within `detection_window_ms` of it.
pub fn fuse_reactions(
    anomalies: &[AnomalyEvent],
    config: &DetectorConfig,
    ctx: &dyn PresentationContext,
) -> Vec<ReactionEvent> {
    let mut fuser = ReactionFuser::new(config);
    let mut out: Vec<ReactionEvent> = Vec::new();
    for a in anomalies {
        match fuser.push(a.clone(), ctx) {
            FuseOutcome::Opened(r) => out.push(r),
            FuseOutcome::Joined => {
                if let Some(last) = out.last_mut() {
                    last.contributing.push(a.clone());
                }
            }
            FuseOutcome::Suppressed => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anomaly(src: &str, t: u64) -> AnomalyEvent {
        AnomalyEvent {
            source_id: SourceId::new(src),
            timestamp_ms: t,
            z_score: 3.0,
            sample_value: 1.0,
        }
    }

    #[test]
    fn constant_history_scores_zero() {
        assert_eq!(rolling_zscore(&[5.0, 5.0, 5.0, 5.0], 5.0, 1e-9), 0.0);
    }

    #[test]
    fn zscore_matches_hand_values() {
        // mean 60, population sd sqrt(2)
        let h = [60.0, 62.0, 58.0, 60.0];
        assert!((rolling_zscore(&h, 70.0, 1e-9) - 10.0 / 2f64.sqrt()).abs() < 1e-12);
        let z = rolling_zscore(&h, 63.54, 1e-9);
        assert!((z - 2.503_158_005).abs() < 1e-6, "{z}");
        assert!(z >= 2.5);
    }

    #[test]
    fn config_validation() {
        assert!(DetectorConfig::default().validate().is_ok());
        let c = DetectorConfig {
            z_threshold: 0.0,
            ..Default::default()
        };
        assert_eq!(c.validate(), Err(DetectorConfigError::Threshold(0.0)));
        let c = DetectorConfig {
            detection_window_ms: 20_000,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(DetectorConfigError::WindowExceedsSpan { .. })));
    }

    #[test]
    fn constant_stream_has_no_anomalies() {
        let s = (0..500).map(|i| Ok::<_, ()>(SignalSample::new("hr", i * 100, 72.0)));
        assert!(detect_anomalies(s, &DetectorConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn warmup_never_flags() {
        let mut d = ZScoreDetector::new(DetectorConfig::default());
        for (i, v) in [60.0, 1000.0, -500.0, 3.0, 60.0].into_iter().enumerate() {
            assert_eq!(d.observe(i as u64 * 100, v), Observation::Warmup);
        }
        assert!(matches!(d.observe(500, 60.0), Observation::Scored { .. }));
    }

    #[test]
    fn equal_spikes_both_flagged() {
        let mut samples = Vec::new();
        for i in 0..100u64 {
            let v = if i == 40 || i == 70 { 90.0 } else { 60.0 + (i % 3) as f64 };
            samples.push(Ok::<_, ()>(SignalSample::new("hr", i * 100, v)));
        }
        let got = detect_anomalies(samples, &DetectorConfig::default()).unwrap();
        let ts: Vec<_> = got.iter().map(|a| a.timestamp_ms).collect();
        assert_eq!(ts, vec![4000, 7000]);
    }

    #[test]
    fn baseline_ages_out() {
        let cfg = DetectorConfig {
            baseline_span_ms: 1000,
            ..Default::default()
        };
        let mut d = ZScoreDetector::new(cfg);
        for i in 0..20 {
            d.observe(i * 100, 60.0 + (i % 2) as f64);
        }
        // [1000, 2000) holds ten samples; the scored one is admitted after.
        d.observe(2000, 60.0);
        assert_eq!(d.baseline_len(), 11);
    }

    #[test]
    fn single_anomaly_single_reaction() {
        let r = fuse_reactions(&[anomaly("hr", 1000)], &DetectorConfig::default(), &());
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].timestamp_ms, 1000);
        assert_eq!(r[0].contributing.len(), 1);
    }

    #[test]
    fn anomalies_within_window_fuse() {
        let r = fuse_reactions(
            &[anomaly("hr", 1000), anomaly("face", 1300)],
            &DetectorConfig::default(),
            &(),
        );
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].contributing.len(), 2);
    }

    #[test]
    fn refractory_suppresses_then_releases() {
        let cfg = DetectorConfig::default();
        let r = fuse_reactions(&[anomaly("hr", 1000), anomaly("hr", 2500)], &cfg, &());
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].contributing.len(), 1);
        let r = fuse_reactions(&[anomaly("hr", 1000), anomaly("hr", 3500)], &cfg, &());
        assert_eq!(r.len(), 2);
    }

    #[test]
    fn reactions_tagged_by_context() {
        let ctx = |t: u64| (t < 2000).then(|| FeatureId::new("gender"));
        let r = fuse_reactions(
            &[anomaly("hr", 1000), anomaly("hr", 5000)],
            &DetectorConfig::default(),
            &ctx,
        );
        assert_eq!(r[0].feature_id, Some(FeatureId::new("gender")));
        assert_eq!(r[1].feature_id, None);
    }
}
