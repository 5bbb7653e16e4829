//! Splitting per-enrollment turn streams into conversation sessions.
//!
//! Two stages: an inactivity split (a new session starts when a prompt
//! arrives more than `gap_threshold_minutes` after the previous one) and an
//! optional topic split inside each time-stage session. Topic boundaries come
//! from a [`TopicDetector`]: the built-in lexical [`HeuristicDetector`] or a
//! [`RemoteDetector`] speaking a small JSON-over-HTTP protocol.

use std::collections::HashSet;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use chrono::{DateTime, FixedOffset};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{ConversationTurn, Corpus};
use crate::text;

pub const DETECTOR_URL_ENV: &str = "ENGAGE_TOPIC_DETECTOR_URL";

#[derive(Debug, Error, PartialEq)]
pub enum SegmentationError {
    #[error("boundary sets cover different streams ({predicted} vs {gold} turns, {n_gaps} gaps)")]
    MismatchedStreamLength { predicted: usize, gold: usize, n_gaps: usize },
    #[error("invalid boundary set: {0}")]
    InvalidBoundaries(String),
    #[error("gap threshold must be positive, got {0}")]
    InvalidThreshold(f64),
}

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("remote topic detector unavailable: {0}")]
    RemoteDetectorUnavailable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    pub gap_threshold_minutes: f64,
    pub topic_stage_enabled: bool,
    pub heuristic_similarity_threshold: f64,
    pub min_turns_for_topic_split: usize,
    /// Send prompt + response text to the detector instead of prompts only.
    pub include_responses: bool,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            gap_threshold_minutes: 15.0,
            topic_stage_enabled: true,
            heuristic_similarity_threshold: 0.12,
            min_turns_for_topic_split: 3,
            include_responses: false,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<(), SegmentationError> {
        if !(self.gap_threshold_minutes > 0.0) {
            return Err(SegmentationError::InvalidThreshold(self.gap_threshold_minutes));
        }
        Ok(())
    }
}

/// A run of consecutive turns from one enrollment.
#[derive(Debug, Clone, PartialEq)]
pub struct Session<'a> {
    pub session_id: String,
    pub enrollment_id: &'a str,
    pub class_id: &'a str,
    /// Index of the first turn within the enrollment's stream.
    pub offset: usize,
    pub turns: &'a [ConversationTurn],
}

impl<'a> Session<'a> {
    pub fn new(ordinal: usize, offset: usize, turns: &'a [ConversationTurn]) -> Self {
        let first = turns.first().expect("sessions are non-empty");
        Session {
            session_id: session_id(&first.enrollment_id, ordinal),
            enrollment_id: &first.enrollment_id,
            class_id: &first.class_id,
            offset,
            turns,
        }
    }

    pub fn start(&self) -> DateTime<FixedOffset> {
        self.turns[0].timestamp
    }

    pub fn end(&self) -> DateTime<FixedOffset> {
        self.turns[self.turns.len() - 1].timestamp
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }
}

pub fn session_id(enrollment_id: &str, ordinal: usize) -> String {
    format!("{enrollment_id}#{ordinal:05}")
}

/// Gap indices of a stream of `n_turns` turns; gap `i` means a new
/// session starts at turn `i` (0-based), so valid indices are `1..n_turns`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BoundarySet {
    n_turns: usize,
    gaps: Vec<usize>,
}

impl BoundarySet {
    pub fn new(n_turns: usize, mut gaps: Vec<usize>) -> Result<Self, SegmentationError> {
        gaps.sort_unstable();
        gaps.dedup();
        if let Some(&bad) = gaps.iter().find(|&&g| g == 0 || g >= n_turns) {
            return Err(SegmentationError::InvalidBoundaries(format!(
                "gap {bad} outside 1..{n_turns}"
            )));
        }
        Ok(BoundarySet { n_turns, gaps })
    }

    pub fn empty(n_turns: usize) -> Self {
        BoundarySet { n_turns, gaps: Vec::new() }
    }

    pub fn n_turns(&self) -> usize {
        self.n_turns
    }

    pub fn n_gaps(&self) -> usize {
        self.n_turns.saturating_sub(1)
    }

    pub fn gaps(&self) -> &[usize] {
        &self.gaps
    }

    pub fn is_empty(&self) -> bool {
        self.gaps.is_empty()
    }

    pub fn contains(&self, gap: usize) -> bool {
        self.gaps.binary_search(&gap).is_ok()
    }
}

/// Boundaries implied by consecutive sessions of one enrollment stream.
pub fn boundaries_from_sessions(sessions: &[Session<'_>]) -> BoundarySet {
    let n_turns = sessions.iter().map(Session::len).sum();
    let gaps = sessions.iter().skip(1).map(|s| s.offset).collect();
    BoundarySet::new(n_turns, gaps).expect("session offsets are valid gaps")
}

fn split_at_gaps<'a>(turns: &'a [ConversationTurn], gaps: &[usize], first_ordinal: usize, base_offset: usize) -> Vec<Session<'a>> {
    let mut sessions = Vec::with_capacity(gaps.len() + 1);
    let mut start = 0;
    for (i, &g) in gaps.iter().chain(std::iter::once(&turns.len())).enumerate() {
        sessions.push(Session::new(first_ordinal + i, base_offset + start, &turns[start..g]));
        start = g;
    }
    sessions
}

fn time_gaps(turns: &[ConversationTurn], gap_threshold_minutes: f64) -> Vec<usize> {
    let threshold_secs = gap_threshold_minutes * 60.0;
    (1..turns.len())
        .filter(|&i| {
            let delta = (turns[i].timestamp - turns[i - 1].timestamp).num_seconds() as f64;
            delta > threshold_secs
        })
        .collect()
}

/// Inactivity split of one enrollment's sorted stream. Ties at exactly the
/// threshold stay in the same session.
pub fn segment_time(turns: &[ConversationTurn], gap_threshold_minutes: f64) -> Vec<Session<'_>> {
    if turns.is_empty() {
        return Vec::new();
    }
    let gaps = time_gaps(turns, gap_threshold_minutes);
    split_at_gaps(turns, &gaps, 0, 0)
}

/// Something that can place topic boundaries inside a session.
pub trait TopicDetector: Sync {
    fn name(&self) -> &str;

    /// Boundary gap indices over `texts` (one entry per turn).
    fn detect(&self, session_id: &str, texts: &[String]) -> Result<Vec<usize>, DetectorError>;
}

/// Token-set Jaccard between two prompts; see [`text::token_set`].
pub fn heuristic_topic_similarity(prompt_a: &str, prompt_b: &str) -> f64 {
    text::jaccard(&text::token_set(prompt_a), &text::token_set(prompt_b))
}

/// Splits wherever consecutive texts are less similar than `threshold`.
#[derive(Debug, Clone)]
pub struct HeuristicDetector {
    pub threshold: f64,
}

impl HeuristicDetector {
    pub fn new(threshold: f64) -> Self {
        HeuristicDetector { threshold }
    }

    fn boundaries(&self, texts: &[String]) -> Vec<usize> {
        let sets: Vec<HashSet<String>> = texts.iter().map(|t| text::token_set(t)).collect();
        (1..sets.len())
            .filter(|&i| text::jaccard(&sets[i - 1], &sets[i]) < self.threshold)
            .collect()
    }
}

impl TopicDetector for HeuristicDetector {
    fn name(&self) -> &str {
        "heuristic"
    }

    fn detect(&self, _session_id: &str, texts: &[String]) -> Result<Vec<usize>, DetectorError> {
        Ok(self.boundaries(texts))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteDetectorConfig {
    pub url: Option<String>,
    pub timeout_secs: f64,
    pub max_in_flight: usize,
}

impl Default for RemoteDetectorConfig {
    fn default() -> Self {
        RemoteDetectorConfig {
            url: None,
            timeout_secs: 10.0,
            max_in_flight: 8,
        }
    }
}

impl RemoteDetectorConfig {
    /// The environment variable wins over the configured URL.
    pub fn resolved_url(&self) -> Option<String> {
        match std::env::var(DETECTOR_URL_ENV) {
            Ok(url) if !url.trim().is_empty() => Some(url),
            _ => self.url.clone(),
        }
    }
}

#[derive(Serialize)]
struct DetectRequest<'a> {
    session_id: &'a str,
    prompts: &'a [String],
}

#[derive(Deserialize)]
struct DetectResponse {
    boundaries: Vec<usize>,
}

struct InFlight {
    cap: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.cap {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// Client for an external topic detector.
///
/// `POST {url}` with `{"session_id": .., "prompts": [..]}`; the response is
/// `{"boundaries": [gap indices]}`. Non-2xx, timeouts and unparsable bodies
/// surface as [`DetectorError::RemoteDetectorUnavailable`].
pub struct RemoteDetector {
    url: String,
    agent: ureq::Agent,
    in_flight: InFlight,
}

impl RemoteDetector {
    pub fn new(url: impl Into<String>, timeout: Duration, max_in_flight: usize) -> Self {
        RemoteDetector {
            url: url.into(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            in_flight: InFlight {
                cap: max_in_flight.max(1),
                used: Mutex::new(0),
                freed: Condvar::new(),
            },
        }
    }

    pub fn from_config(config: &RemoteDetectorConfig) -> Option<Self> {
        config.resolved_url().map(|url| {
            RemoteDetector::new(url, Duration::from_secs_f64(config.timeout_secs), config.max_in_flight)
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl TopicDetector for RemoteDetector {
    fn name(&self) -> &str {
        "remote"
    }

    fn detect(&self, session_id: &str, texts: &[String]) -> Result<Vec<usize>, DetectorError> {
        let unavailable = |msg: String| DetectorError::RemoteDetectorUnavailable(msg);
        let body = serde_json::to_string(&DetectRequest { session_id, prompts: texts })
            .map_err(|e| unavailable(e.to_string()))?;
        let _slot = self.in_flight.acquire();
        let response = self
            .agent
            .post(&self.url)
            .set("Content-Type", "application/json")
            .send_string(&body)
            .map_err(|e| unavailable(e.to_string()))?;
        let text = response.into_string().map_err(|e| unavailable(e.to_string()))?;
        let parsed: DetectResponse = serde_json::from_str(&text).map_err(|e| unavailable(e.to_string()))?;
        Ok(parsed.boundaries)
    }
}

/// Topic boundaries for one session, plus a note when the requested
/// detector failed and the heuristic was used instead.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub boundaries: BoundarySet,
    pub fallback: Option<String>,
}

fn detector_texts(session: &Session<'_>, include_responses: bool) -> Vec<String> {
    session
        .turns
        .iter()
        .map(|t| {
            if include_responses {
                format!("{} {}", t.prompt_text, t.response_text)
            } else {
                t.prompt_text.clone()
            }
        })
        .collect()
}

pub fn detect_topic_boundaries(
    session: &Session<'_>,
    detector: &dyn TopicDetector,
    config: &SegmentationConfig,
) -> Detection {
    let n = session.len();
    if n < config.min_turns_for_topic_split.max(2) {
        return Detection { boundaries: BoundarySet::empty(n), fallback: None };
    }
    let texts = detector_texts(session, config.include_responses);
    let attempt = detector
        .detect(&session.session_id, &texts)
        .and_then(|gaps| {
            BoundarySet::new(n, gaps)
                .map_err(|e| DetectorError::RemoteDetectorUnavailable(format!("bad response: {e}")))
        });
    match attempt {
        Ok(boundaries) => Detection { boundaries, fallback: None },
        Err(err) => {
            let heuristic = HeuristicDetector::new(config.heuristic_similarity_threshold);
            let gaps = heuristic.boundaries(&texts);
            Detection {
                boundaries: BoundarySet::new(n, gaps).expect("heuristic gaps are in range"),
                fallback: Some(format!("{}: {err}; used heuristic", session.session_id)),
            }
        }
    }
}

/// Sessions of one enrollment plus any detector fallback notes.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation<'a> {
    pub sessions: Vec<Session<'a>>,
    pub fallbacks: Vec<String>,
}

/// Time split followed by topic split of each time-stage session.
/// Session ids are `enrollment_id#ordinal`, numbered in stream order.
pub fn segment_combined<'a>(
    turns: &'a [ConversationTurn],
    config: &SegmentationConfig,
    detector: &dyn TopicDetector,
) -> Segmentation<'a> {
    let time_sessions = segment_time(turns, config.gap_threshold_minutes);
    if !config.topic_stage_enabled {
        return Segmentation { sessions: time_sessions, fallbacks: Vec::new() };
    }
    let mut sessions = Vec::with_capacity(time_sessions.len());
    let mut fallbacks = Vec::new();
    for ts in &time_sessions {
        let detection = detect_topic_boundaries(ts, detector, config);
        fallbacks.extend(detection.fallback);
        sessions.extend(split_at_gaps(ts.turns, detection.boundaries.gaps(), sessions.len(), ts.offset));
    }
    Segmentation { sessions, fallbacks }
}

/// Segmentation of every enrollment in a corpus, in corpus order.
pub fn segment_corpus<'a>(
    corpus: &'a Corpus,
    config: &SegmentationConfig,
    detector: &dyn TopicDetector,
) -> Segmentation<'a> {
    let streams: Vec<&'a [ConversationTurn]> = corpus.enrollments().map(|(_, t)| t).collect();
    let parts: Vec<Segmentation<'a>> = streams
        .par_iter()
        .map(|turns| segment_combined(turns, config, detector))
        .collect();
    let mut all = Segmentation { sessions: Vec::new(), fallbacks: Vec::new() };
    for part in parts {
        all.sessions.extend(part.sessions);
        all.fallbacks.extend(part.fallbacks);
    }
    all
}

/// Gold boundaries with a per-gap evaluability mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldBoundaries {
    pub boundaries: BoundarySet,
    /// `evaluable[i - 1]` is whether gap `i` can be scored.
    pub evaluable: Vec<bool>,
}

impl GoldBoundaries {
    pub fn evaluable_gaps(&self) -> impl Iterator<Item = usize> + '_ {
        self.evaluable.iter().enumerate().filter(|(_, &e)| e).map(|(i, _)| i + 1)
    }
}

/// Gold derived from page context: a boundary wherever the page changes
/// between two non-null pages; any gap touching a null page is not evaluable.
pub fn gold_from_page_context(turns: &[ConversationTurn]) -> GoldBoundaries {
    let n = turns.len();
    let mut gaps = Vec::new();
    let mut evaluable = Vec::with_capacity(n.saturating_sub(1));
    for i in 1..n {
        match (&turns[i - 1].page_context, &turns[i].page_context) {
            (Some(a), Some(b)) => {
                evaluable.push(true);
                if a != b {
                    gaps.push(i);
                }
            }
            _ => evaluable.push(false),
        }
    }
    GoldBoundaries {
        boundaries: BoundarySet::new(n, gaps).expect("page gaps are in range"),
        evaluable,
    }
}

/// Confusion counts over boundary gaps; adds up across streams (micro average).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BoundaryCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl std::ops::AddAssign for BoundaryCounts {
    fn add_assign(&mut self, o: Self) {
        self.true_positives += o.true_positives;
        self.false_positives += o.false_positives;
        self.false_negatives += o.false_negatives;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: BoundaryCounts,
}

impl BoundaryCounts {
    /// Empty denominators score 1.0 (nothing predicted: no false positives;
    /// nothing to find: nothing missed). F1 is 1 only when both sides are empty
    /// or match exactly.
    pub fn score(self) -> SegmentationScore {
        let tp = self.true_positives as f64;
        let ratio = |num: f64, den: usize| if den == 0 { 1.0 } else { num / den as f64 };
        let precision = ratio(tp, self.true_positives + self.false_positives);
        let recall = ratio(tp, self.true_positives + self.false_negatives);
        let den = 2 * self.true_positives + self.false_positives + self.false_negatives;
        let f1 = if den == 0 { 1.0 } else { 2.0 * tp / den as f64 };
        SegmentationScore { precision, recall, f1, counts: self }
    }
}

fn check_lengths(predicted: &BoundarySet, gold: &BoundarySet, n_gaps: usize) -> Result<(), SegmentationError> {
    if predicted.n_turns != gold.n_turns || gold.n_gaps() != n_gaps {
        return Err(SegmentationError::MismatchedStreamLength {
            predicted: predicted.n_turns,
            gold: gold.n_turns,
            n_gaps,
        });
    }
    Ok(())
}

pub fn boundary_counts(
    predicted: &BoundarySet,
    gold: &BoundarySet,
    n_gaps: usize,
) -> Result<BoundaryCounts, SegmentationError> {
    check_lengths(predicted, gold, n_gaps)?;
    let tp = predicted.gaps.iter().filter(|g| gold.contains(**g)).count();
    Ok(BoundaryCounts {
        true_positives: tp,
        false_positives: predicted.gaps.len() - tp,
        false_negatives: gold.gaps.len() - tp,
    })
}

/// Binary precision/recall/F1 over the gaps of one stream.
pub fn evaluate_segmentation(
    predicted: &BoundarySet,
    gold: &BoundarySet,
    n_gaps: usize,
) -> Result<SegmentationScore, SegmentationError> {
    boundary_counts(predicted, gold, n_gaps).map(BoundaryCounts::score)
}

/// Counts restricted to the evaluable gaps of a tri-state gold set.
pub fn masked_boundary_counts(
    predicted: &BoundarySet,
    gold: &GoldBoundaries,
) -> Result<BoundaryCounts, SegmentationError> {
    let n_gaps = gold.boundaries.n_gaps();
    check_lengths(predicted, &gold.boundaries, n_gaps)?;
    let mut counts = BoundaryCounts::default();
    for gap in gold.evaluable_gaps() {
        match (predicted.contains(gap), gold.boundaries.contains(gap)) {
            (true, true) => counts.true_positives += 1,
            (true, false) => counts.false_positives += 1,
            (false, true) => counts.false_negatives += 1,
            (false, false) => {}
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    pub(crate) fn turns_at(minutes: &[i64], prompts: &[&str], pages: &[Option<&str>]) -> Vec<ConversationTurn> {
        let base = FixedOffset::east_opt(0).unwrap().with_ymd_and_hms(2025, 3, 3, 9, 0, 0).unwrap();
        minutes
            .iter()
            .enumerate()
            .map(|(i, &m)| ConversationTurn {
                turn_id: format!("t{i:03}"),
                enrollment_id: "e1".into(),
                class_id: "C1".into(),
                timestamp: base + chrono::Duration::minutes(m),
                prompt_text: prompts.get(i).copied().unwrap_or("same topic words").to_string(),
                response_text: String::new(),
                page_context: pages.get(i).copied().flatten().map(str::to_string),
                has_image_upload: false,
            })
            .collect()
    }

    fn lens(sessions: &[Session<'_>]) -> Vec<usize> {
        sessions.iter().map(Session::len).collect()
    }

    #[test]
    fn time_split_is_strictly_greater() {
        let t = turns_at(&[0, 10, 40], &[], &[]);
        assert_eq!(lens(&segment_time(&t, 15.0)), [2, 1]);
        let t = turns_at(&[0, 15], &[], &[]);
        assert_eq!(lens(&segment_time(&t, 15.0)), [2]);
        let t = turns_at(&[0], &[], &[]);
        assert_eq!(lens(&segment_time(&t, 15.0)), [1]);
        assert!(segment_time(&[], 15.0).is_empty());
    }

    #[test]
    fn session_ids_and_bounds() {
        let t = turns_at(&[0, 10, 40, 41], &[], &[]);
        let s = segment_time(&t, 15.0);
        assert_eq!(s[1].session_id, "e1#00001");
        assert_eq!(s[1].offset, 2);
        assert_eq!(s[1].start(), t[2].timestamp);
        assert_eq!(s[1].end(), t[3].timestamp);
        assert_eq!(boundaries_from_sessions(&s).gaps(), [2]);
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(heuristic_topic_similarity("a b c", "a b c"), 1.0);
        assert_eq!(heuristic_topic_similarity("a b", "c d"), 0.0);
        assert_eq!(heuristic_topic_similarity("a b c", "b c d"), 0.5);
        assert_eq!(heuristic_topic_similarity("", ""), 1.0);
        assert_eq!(heuristic_topic_similarity("", "x"), 0.0);
    }

    #[test]
    fn topic_guard_clause_skips_short_sessions() {
        struct Panics;
        impl TopicDetector for Panics {
            fn name(&self) -> &str {
                "panics"
            }
            fn detect(&self, _: &str, _: &[String]) -> Result<Vec<usize>, DetectorError> {
                panic!("detector must not be called")
            }
        }
        let t = turns_at(&[0, 1], &["x", "y"], &[]);
        let s = &segment_time(&t, 15.0)[0];
        let d = detect_topic_boundaries(s, &Panics, &SegmentationConfig::default());
        assert!(d.boundaries.is_empty());
    }

    #[test]
    fn heuristic_splits_on_topic_shift() {
        // J("explain recursion", "why does recursion need a base case") = 1/8 = 0.125 >= 0.12,
        // J(second, "translate this French sentence") = 0 < 0.12.
        let prompts = ["explain recursion", "why does recursion need a base case", "translate this French sentence"];
        let t = turns_at(&[0, 1, 2], &prompts, &[]);
        let s = &segment_time(&t, 15.0)[0];
        let cfg = SegmentationConfig::default();
        let d = detect_topic_boundaries(s, &HeuristicDetector::new(0.12), &cfg);
        assert_eq!(d.boundaries.gaps(), [2]);
        assert!(d.fallback.is_none());

        let same = turns_at(&[0, 1, 2, 3], &["what is a monad"; 4], &[]);
        let s = &segment_time(&same, 15.0)[0];
        assert!(detect_topic_boundaries(s, &HeuristicDetector::new(0.12), &cfg).boundaries.is_empty());
    }

    #[test]
    fn combined_partitions_time_sessions() {
        let prompts = ["explain recursion", "why does recursion need a base case", "translate this French sentence", "later"];
        let t = turns_at(&[0, 1, 2, 60], &prompts, &[]);
        let cfg = SegmentationConfig::default();
        let seg = segment_combined(&t, &cfg, &HeuristicDetector::new(0.12));
        assert_eq!(lens(&seg.sessions), [2, 1, 1]);
        let ids: Vec<_> = seg.sessions.iter().map(|s| s.session_id.as_str()).collect();
        assert_eq!(ids, ["e1#00000", "e1#00001", "e1#00002"]);
        assert_eq!(boundaries_from_sessions(&seg.sessions).gaps(), [2, 3]);

        let no_topic = turns_at(&[0, 1, 2, 60], &["a b"; 4], &[]);
        let seg = segment_combined(&no_topic, &cfg, &HeuristicDetector::new(0.12));
        assert_eq!(seg.sessions, segment_time(&no_topic, 15.0));
    }

    #[test]
    fn failing_detector_falls_back_to_heuristic() {
        struct Down;
        impl TopicDetector for Down {
            fn name(&self) -> &str {
                "down"
            }
            fn detect(&self, _: &str, _: &[String]) -> Result<Vec<usize>, DetectorError> {
                Err(DetectorError::RemoteDetectorUnavailable("connection refused".into()))
            }
        }
        struct OutOfRange;
        impl TopicDetector for OutOfRange {
            fn name(&self) -> &str {
                "oor"
            }
            fn detect(&self, _: &str, _: &[String]) -> Result<Vec<usize>, DetectorError> {
                Ok(vec![99])
            }
        }
        let prompts = ["alpha beta", "alpha beta", "gamma delta"];
        let t = turns_at(&[0, 1, 2], &prompts, &[]);
        let cfg = SegmentationConfig::default();
        for det in [&Down as &dyn TopicDetector, &OutOfRange] {
            let seg = segment_combined(&t, &cfg, det);
            assert_eq!(lens(&seg.sessions), [2, 1]);
            assert_eq!(seg.fallbacks.len(), 1);
        }
    }

    #[test]
    fn f1_examples() {
        let b = |g: Vec<usize>| BoundarySet::new(10, g).unwrap();
        let s = evaluate_segmentation(&b(vec![3, 7]), &b(vec![3, 7]), 9).unwrap();
        assert_eq!(s.f1, 1.0);
        let s = evaluate_segmentation(&b(vec![3]), &b(vec![3, 7]), 9).unwrap();
        assert_eq!((s.precision, s.recall), (1.0, 0.5));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(evaluate_segmentation(&b(vec![]), &b(vec![]), 9).unwrap().f1, 1.0);
        assert_eq!(evaluate_segmentation(&b(vec![2]), &b(vec![5]), 9).unwrap().f1, 0.0);
        assert!(matches!(
            evaluate_segmentation(&b(vec![]), &BoundarySet::empty(4), 3),
            Err(SegmentationError::MismatchedStreamLength { .. })
        ));
        assert!(BoundarySet::new(3, vec![3]).is_err());
        assert!(BoundarySet::new(3, vec![0]).is_err());
    }

    #[test]
    fn gold_from_pages() {
        let t = turns_at(&[0, 1, 2], &[], &[Some("Q1"), Some("Q1"), Some("Q2")]);
        let g = gold_from_page_context(&t);
        assert_eq!(g.boundaries.gaps(), [2]);
        assert_eq!(g.evaluable_gaps().collect::<Vec<_>>(), [1, 2]);

        let t = turns_at(&[0, 1, 2], &[], &[Some("Q1"), None, Some("Q1")]);
        let g = gold_from_page_context(&t);
        assert!(g.boundaries.is_empty());
        assert_eq!(g.evaluable_gaps().count(), 0);

        let t = turns_at(&[0, 1, 2], &[], &[]);
        assert_eq!(gold_from_page_context(&t).evaluable_gaps().count(), 0);
    }

    #[test]
    fn masked_counts_ignore_unevaluable_gaps() {
        let t = turns_at(&[0, 1, 2, 3], &[], &[Some("Q1"), Some("Q2"), None, Some("Q3")]);
        let gold = gold_from_page_context(&t);
        let pred = BoundarySet::new(4, vec![1, 2, 3]).unwrap();
        let c = masked_boundary_counts(&pred, &gold).unwrap();
        assert_eq!(c, BoundaryCounts { true_positives: 1, false_positives: 0, false_negatives: 0 });
    }

    fn minutes_strategy() -> impl Strategy<Value = Vec<i64>> {
        prop::collection::vec(0i64..40, 0..40).prop_map(|deltas| {
            let mut acc = 0;
            deltas.into_iter().map(|d| {
                acc += d;
                acc
            }).collect()
        })
    }

    proptest! {
        #[test]
        fn sessions_partition_the_stream(minutes in minutes_strategy(), thr in 1.0f64..30.0) {
            let t = turns_at(&minutes, &[], &[]);
            let sessions = segment_time(&t, thr);
            let flat: Vec<&ConversationTurn> = sessions.iter().flat_map(|s| s.turns.iter()).collect();
            prop_assert_eq!(flat.len(), t.len());
            for (a, b) in flat.iter().zip(t.iter()) {
                prop_assert_eq!(*a, b);
            }
        }

        #[test]
        fn raising_threshold_never_adds_sessions(minutes in minutes_strategy(), lo in 1.0f64..20.0, extra in 0.0f64..20.0) {
            let t = turns_at(&minutes, &[], &[]);
            prop_assert!(segment_time(&t, lo + extra).len() <= segment_time(&t, lo).len());
        }

        #[test]
        fn topic_stage_disabled_equals_time_split(minutes in minutes_strategy()) {
            let t = turns_at(&minutes, &[], &[]);
            let cfg = SegmentationConfig { topic_stage_enabled: false, ..Default::default() };
            let seg = segment_combined(&t, &cfg, &HeuristicDetector::new(0.12));
            prop_assert_eq!(seg.sessions, segment_time(&t, 15.0));
        }

        #[test]
        fn precision_mirrors_recall(a in prop::collection::btree_set(1usize..20, 0..10), b in prop::collection::btree_set(1usize..20, 0..10)) {
            let a = BoundarySet::new(20, a.into_iter().collect()).unwrap();
            let b = BoundarySet::new(20, b.into_iter().collect()).unwrap();
            let ab = evaluate_segmentation(&a, &b, 19).unwrap();
            let ba = evaluate_segmentation(&b, &a, 19).unwrap();
            prop_assert_eq!(ab.precision, ba.recall);
            prop_assert_eq!(ab.f1, ba.f1);
        }

        #[test]
        fn similarity_is_symmetric_and_bounded(a in "[a-d ]{0,12}", b in "[a-d ]{0,12}") {
            let ab = heuristic_topic_similarity(&a, &b);
            prop_assert_eq!(ab, heuristic_topic_similarity(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
