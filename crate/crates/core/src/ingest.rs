//! Turn-log parsing, contextual metadata and the in-memory corpus.
//!
//! The turn log is line-delimited JSON with exactly the keys
//! `turn_id, enrollment_id, class_id, ts, prompt, response, page, image`.
//! The context document carries `classes`, `institutions`, `events` and
//! `calendar` (plus an optional `enrollments` map from enrollment to a
//! cross-class student id, used only as a clustering key for standard errors).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;
use std::ops::Range;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike, FixedOffset, NaiveDate, SecondsFormat, Timelike, Weekday};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("read error after line {line}: {source}")]
    Stream {
        line: usize,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid context document: {0}")]
    InvalidContext(String),
    #[error("turn {turn_id} references unknown class {class_id}")]
    UnresolvedClass { turn_id: String, class_id: String },
}

/// Why a log line was skipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LineError {
    MalformedRecord(String),
    MissingField(&'static str),
}

impl std::fmt::Display for LineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LineError::MalformedRecord(msg) => write!(f, "malformed record: {msg}"),
            LineError::MissingField(name) => write!(f, "missing field `{name}`"),
        }
    }
}

/// One prompt/response pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConversationTurn {
    pub turn_id: String,
    pub enrollment_id: String,
    pub class_id: String,
    /// Second precision; the original UTC offset is kept so local wall-clock
    /// features can be computed.
    pub timestamp: DateTime<FixedOffset>,
    pub prompt_text: String,
    pub response_text: String,
    pub page_context: Option<String>,
    pub has_image_upload: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnRecord {
    turn_id: String,
    enrollment_id: String,
    class_id: String,
    ts: String,
    prompt: String,
    response: String,
    page: Option<String>,
    image: bool,
}

const REQUIRED_KEYS: [&str; 8] = [
    "turn_id",
    "enrollment_id",
    "class_id",
    "ts",
    "prompt",
    "response",
    "page",
    "image",
];

impl ConversationTurn {
    /// Parse one log line.
    pub fn from_json_line(line: &str) -> Result<Self, LineError> {
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| LineError::MalformedRecord(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| LineError::MalformedRecord("record is not an object".into()))?;
        for key in REQUIRED_KEYS {
            // `page` is nullable but the key itself must be present.
            if !obj.contains_key(key) {
                return Err(LineError::MissingField(key));
            }
        }
        let record: TurnRecord = serde_json::from_value(value)
            .map_err(|e| LineError::MalformedRecord(e.to_string()))?;
        let timestamp = DateTime::parse_from_rfc3339(&record.ts)
            .map_err(|e| LineError::MalformedRecord(format!("bad ts `{}`: {e}", record.ts)))?;
        let timestamp = timestamp.with_nanosecond(0).expect("zero nanos is valid");
        Ok(ConversationTurn {
            turn_id: record.turn_id,
            enrollment_id: record.enrollment_id,
            class_id: record.class_id,
            timestamp,
            prompt_text: record.prompt,
            response_text: record.response,
            page_context: record.page,
            has_image_upload: record.image,
        })
    }

    pub fn to_json_line(&self) -> String {
        let record = TurnRecord {
            turn_id: self.turn_id.clone(),
            enrollment_id: self.enrollment_id.clone(),
            class_id: self.class_id.clone(),
            ts: self.timestamp.to_rfc3339_opts(SecondsFormat::Secs, true),
            prompt: self.prompt_text.clone(),
            response: self.response_text.clone(),
            page: self.page_context.clone(),
            image: self.has_image_upload,
        };
        serde_json::to_string(&record).expect("turn record serializes")
    }

    /// Local calendar date in the turn's own offset.
    pub fn local_date(&self) -> NaiveDate {
        self.timestamp.date_naive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedLine {
    /// 1-based line number in the stream.
    pub line: usize,
    pub reason: LineError,
}

#[derive(Debug, Default)]
pub struct ParseOutcome {
    pub turns: Vec<ConversationTurn>,
    pub skipped: Vec<SkippedLine>,
}

/// Parse a line-delimited turn log. Bad lines are skipped and reported;
/// blank lines are ignored. Only a failing reader is fatal.
pub fn parse_turns<R: BufRead>(reader: R) -> Result<ParseOutcome, IngestError> {
    let mut outcome = ParseOutcome::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| IngestError::Stream { line: idx, source })?;
        if line.trim().is_empty() {
            continue;
        }
        match ConversationTurn::from_json_line(&line) {
            Ok(turn) => outcome.turns.push(turn),
            Err(reason) => {
                log::warn!("skipping log line {}: {reason}", idx + 1);
                outcome.skipped.push(SkippedLine { line: idx + 1, reason });
            }
        }
    }
    Ok(outcome)
}

/// Parse several log shards in parallel; output keeps shard order.
pub fn parse_turn_files<P: AsRef<Path> + Sync>(paths: &[P]) -> Result<ParseOutcome, IngestError> {
    let parts: Vec<Result<ParseOutcome, IngestError>> = paths
        .par_iter()
        .map(|p| {
            let path = p.as_ref();
            let file = std::fs::File::open(path).map_err(|source| IngestError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            parse_turns(std::io::BufReader::new(file))
        })
        .collect();
    let mut all = ParseOutcome::default();
    for part in parts {
        let part = part?;
        all.turns.extend(part.turns);
        all.skipped.extend(part.skipped);
    }
    Ok(all)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Discipline {
    #[serde(rename = "STEM")]
    Stem,
    #[serde(rename = "NonSTEM")]
    NonStem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Selectivity {
    HighlySelective,
    LessSelective,
}

/// A weekly recurring class block, minutes since local midnight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleBlock {
    pub weekday: Weekday,
    pub start_minute: u32,
    pub end_minute: u32,
}

impl ScheduleBlock {
    /// Start-inclusive, end-exclusive, evaluated in the instant's own offset.
    pub fn contains(&self, at: &DateTime<FixedOffset>) -> bool {
        let minute = at.hour() * 60 + at.minute();
        at.weekday() == self.weekday && minute >= self.start_minute && minute < self.end_minute
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMeta {
    pub discipline: Discipline,
    pub institution_id: String,
    #[serde(default)]
    pub class_schedule: Vec<ScheduleBlock>,
    pub size: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstitutionMeta {
    pub selectivity: Selectivity,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextMeta {
    pub classes: BTreeMap<String, ClassMeta>,
    pub institutions: BTreeMap<String, InstitutionMeta>,
    /// enrollment_id -> student id. Enrollments missing here are their own student.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub enrollments: BTreeMap<String, String>,
}

impl ContextMeta {
    pub fn selectivity_of_class(&self, class_id: &str) -> Option<Selectivity> {
        let class = self.classes.get(class_id)?;
        self.institutions.get(&class.institution_id).map(|i| i.selectivity)
    }

    pub fn student_of<'a>(&'a self, enrollment_id: &'a str) -> &'a str {
        self.enrollments
            .get(enrollment_id)
            .map(String::as_str)
            .unwrap_or(enrollment_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActivityKind {
    ClassMeeting,
    AssignmentRelease,
    AssignmentDeadline,
    ExamWindow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityEvent {
    pub class_id: String,
    pub kind: ActivityKind,
    pub start: DateTime<FixedOffset>,
    #[serde(default)]
    pub end: Option<DateTime<FixedOffset>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Calendar {
    pub semester_start: NaiveDate,
    pub semester_end: NaiveDate,
    /// 1-based week indices, same numbering as week progress.
    #[serde(default)]
    pub exam_weeks: BTreeSet<u32>,
}

impl Calendar {
    /// 1-based week index of a local date; `None` before the semester start.
    pub fn week_of(&self, date: NaiveDate) -> Option<u32> {
        let days = (date - self.semester_start).num_days();
        (days >= 0).then(|| 1 + (days / 7) as u32)
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        date >= self.semester_start && date <= self.semester_end
    }

    pub fn n_weeks(&self) -> u32 {
        self.week_of(self.semester_end).unwrap_or(0)
    }
}

/// The context document as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextDocument {
    pub classes: BTreeMap<String, ClassMeta>,
    pub institutions: BTreeMap<String, InstitutionMeta>,
    #[serde(default)]
    pub events: Vec<ActivityEvent>,
    pub calendar: Calendar,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub enrollments: BTreeMap<String, String>,
}

impl ContextDocument {
    pub fn from_json(text: &str) -> Result<Self, IngestError> {
        let doc: ContextDocument =
            serde_json::from_str(text).map_err(|e| IngestError::InvalidContext(e.to_string()))?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path).map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("context document serializes")
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |msg: String| Err(IngestError::InvalidContext(msg));
        for (id, class) in &self.classes {
            if !self.institutions.contains_key(&class.institution_id) {
                return bad(format!("class {id}: unknown institution {}", class.institution_id));
            }
            if class.size == 0 {
                return bad(format!("class {id}: size must be positive"));
            }
            for block in &class.class_schedule {
                if block.start_minute >= block.end_minute || block.end_minute > 24 * 60 {
                    return bad(format!("class {id}: schedule block {block:?} is not within one day"));
                }
            }
        }
        for event in &self.events {
            if !self.classes.contains_key(&event.class_id) {
                return bad(format!("event references unknown class {}", event.class_id));
            }
            match (event.kind, event.end) {
                (ActivityKind::ClassMeeting | ActivityKind::ExamWindow, None) => {
                    return bad(format!("{:?} event for {} needs an end", event.kind, event.class_id));
                }
                (_, Some(end)) if end <= event.start => {
                    return bad(format!("event for {} ends before it starts", event.class_id));
                }
                _ => {}
            }
        }
        if self.calendar.semester_end < self.calendar.semester_start {
            return bad("semester_end precedes semester_start".into());
        }
        Ok(())
    }

    pub fn split(self) -> (ContextMeta, Vec<ActivityEvent>, Calendar) {
        (
            ContextMeta {
                classes: self.classes,
                institutions: self.institutions,
                enrollments: self.enrollments,
            },
            self.events,
            self.calendar,
        )
    }
}

/// Validated, sorted, immutable corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    turns: Vec<ConversationTurn>,
    enrollments: Vec<(String, Range<usize>)>,
    pub context: ContextMeta,
    pub events: Vec<ActivityEvent>,
    pub calendar: Calendar,
}

/// Sort turns by (enrollment, timestamp, turn_id) and index them per enrollment.
pub fn build_corpus(
    mut turns: Vec<ConversationTurn>,
    context: ContextMeta,
    events: Vec<ActivityEvent>,
    calendar: Calendar,
) -> Result<Corpus, IngestError> {
    if let Some(t) = turns.iter().find(|t| !context.classes.contains_key(&t.class_id)) {
        return Err(IngestError::UnresolvedClass {
            turn_id: t.turn_id.clone(),
            class_id: t.class_id.clone(),
        });
    }
    turns.sort_by(|a, b| {
        a.enrollment_id
            .cmp(&b.enrollment_id)
            .then(a.timestamp.cmp(&b.timestamp))
            .then_with(|| a.turn_id.cmp(&b.turn_id))
    });
    let mut enrollments: Vec<(String, Range<usize>)> = Vec::new();
    for (i, turn) in turns.iter().enumerate() {
        match enrollments.last_mut() {
            Some((id, range)) if *id == turn.enrollment_id => range.end = i + 1,
            _ => enrollments.push((turn.enrollment_id.clone(), i..i + 1)),
        }
    }
    Ok(Corpus {
        turns,
        enrollments,
        context,
        events,
        calendar,
    })
}

impl Corpus {
    pub fn turns(&self) -> &[ConversationTurn] {
        &self.turns
    }

    /// Per-enrollment turn streams in enrollment order.
    pub fn enrollments(&self) -> impl Iterator<Item = (&str, &[ConversationTurn])> + '_ {
        self.enrollments
            .iter()
            .map(move |(id, r)| (id.as_str(), &self.turns[r.clone()]))
    }

    pub fn n_enrollments(&self) -> usize {
        self.enrollments.len()
    }

    pub fn class(&self, class_id: &str) -> Option<&ClassMeta> {
        self.context.classes.get(class_id)
    }

    pub fn events_for_class<'a>(&'a self, class_id: &'a str) -> impl Iterator<Item = &'a ActivityEvent> + 'a {
        self.events.iter().filter(move |e| e.class_id == class_id)
    }

    pub fn into_parts(self) -> (Vec<ConversationTurn>, ContextMeta, Vec<ActivityEvent>, Calendar) {
        (self.turns, self.context, self.events, self.calendar)
    }

    /// Rebuild without turns whose local date falls outside the semester.
    pub fn drop_out_of_window(self) -> Corpus {
        let (turns, context, events, calendar) = self.into_parts();
        let kept = turns
            .into_iter()
            .filter(|t| calendar.contains(t.local_date()))
            .collect();
        build_corpus(kept, context, events, calendar).expect("classes already resolved")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    /// Each turn id that occurs more than once, listed once.
    pub duplicate_turn_ids: Vec<String>,
    pub out_of_window: Vec<String>,
    pub empty_prompts: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.duplicate_turn_ids.is_empty() && self.out_of_window.is_empty() && self.empty_prompts.is_empty()
    }
}

pub fn validate_corpus(corpus: &Corpus) -> ValidationReport {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut report = ValidationReport::default();
    for turn in corpus.turns() {
        let n = seen.entry(turn.turn_id.as_str()).or_default();
        *n += 1;
        if *n == 2 {
            report.duplicate_turn_ids.push(turn.turn_id.clone());
        }
        if !corpus.calendar.contains(turn.local_date()) {
            report.out_of_window.push(turn.turn_id.clone());
        }
        if turn.prompt_text.trim().is_empty() && !turn.has_image_upload {
            report.empty_prompts.push(turn.turn_id.clone());
        }
    }
    report.duplicate_turn_ids.sort();
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, enr: &str, ts: &str) -> String {
        format!(
            r#"{{"turn_id":"{id}","enrollment_id":"{enr}","class_id":"C1","ts":"{ts}","prompt":"hi","response":"hello","page":null,"image":false}}"#
        )
    }

    fn context() -> (ContextMeta, Calendar) {
        let doc = ContextDocument::from_json(
            r#"{
              "classes": {"C1": {"discipline": "STEM", "institution_id": "I1",
                                  "class_schedule": [{"weekday": "Mon", "start_minute": 600, "end_minute": 690}],
                                  "size": 30}},
              "institutions": {"I1": {"selectivity": "HighlySelective"}},
              "events": [],
              "calendar": {"semester_start": "2025-02-17", "semester_end": "2025-07-15", "exam_weeks": [9, 20]}
            }"#,
        )
        .unwrap();
        let (ctx, _, cal) = doc.split();
        (ctx, cal)
    }

    fn turns(lines: &[String]) -> Vec<ConversationTurn> {
        parse_turns(lines.join("\n").as_bytes()).unwrap().turns
    }

    #[test]
    fn parses_well_formed_lines() {
        let text = [
            line("t1", "e1", "2025-03-01T10:00:00Z"),
            line("t2", "e1", "2025-03-01T10:05:00Z"),
            line("t3", "e2", "2025-03-01T10:06:00+08:00"),
        ]
        .join("\n");
        let out = parse_turns(text.as_bytes()).unwrap();
        assert_eq!(out.turns.len(), 3);
        assert!(out.skipped.is_empty());
        assert_eq!(out.turns[2].timestamp.offset().local_minus_utc(), 8 * 3600);
    }

    #[test]
    fn missing_timestamp_skips_line() {
        let bad = r#"{"turn_id":"t9","enrollment_id":"e1","class_id":"C1","prompt":"x","response":"y","page":null,"image":false}"#;
        let text = [line("t1", "e1", "2025-03-01T10:00:00Z"), bad.to_string(), line("t2", "e1", "2025-03-01T10:01:00Z")]
            .join("\n");
        let out = parse_turns(text.as_bytes()).unwrap();
        assert_eq!(out.turns.len(), 2);
        assert_eq!(out.skipped, vec![SkippedLine { line: 2, reason: LineError::MissingField("ts") }]);
    }

    #[test]
    fn malformed_and_unknown_keys_are_skipped() {
        let text = format!(
            "{{not json\n{}\n{}",
            line("t1", "e1", "2025-03-01T10:00:00Z").replace("\"image\":false", "\"image\":false,\"extra\":1"),
            line("t2", "e1", "yesterday"),
        );
        let out = parse_turns(text.as_bytes()).unwrap();
        assert!(out.turns.is_empty());
        assert_eq!(out.skipped.len(), 3);
        assert!(out.skipped.iter().all(|s| matches!(s.reason, LineError::MalformedRecord(_))));
    }

    #[test]
    fn empty_stream_yields_nothing() {
        let out = parse_turns("".as_bytes()).unwrap();
        assert!(out.turns.is_empty() && out.skipped.is_empty());
    }

    #[test]
    fn sorts_per_enrollment_with_turn_id_tiebreak() {
        let (ctx, cal) = context();
        let ts = turns(&[
            line("t3", "e1", "2025-03-01T10:09:00Z"),
            line("tb", "e1", "2025-03-01T10:00:00Z"),
            line("ta", "e1", "2025-03-01T10:00:00Z"),
            line("t0", "e0", "2025-03-02T10:00:00Z"),
        ]);
        let corpus = build_corpus(ts, ctx, vec![], cal).unwrap();
        let ids: Vec<_> = corpus.turns().iter().map(|t| t.turn_id.as_str()).collect();
        assert_eq!(ids, ["t0", "ta", "tb", "t3"]);
        let groups: Vec<_> = corpus.enrollments().map(|(e, t)| (e, t.len())).collect();
        assert_eq!(groups, [("e0", 1), ("e1", 3)]);
    }

    #[test]
    fn build_is_idempotent() {
        let (ctx, cal) = context();
        let ts = turns(&[line("t2", "e1", "2025-03-01T10:09:00Z"), line("t1", "e1", "2025-03-01T10:00:00Z")]);
        let once = build_corpus(ts, ctx, vec![], cal).unwrap();
        let (t, c, e, k) = once.clone().into_parts();
        let twice = build_corpus(t, c, e, k).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn unknown_class_is_fatal() {
        let (ctx, cal) = context();
        let ts = turns(&[line("t1", "e1", "2025-03-01T10:00:00Z").replace("C1", "C404")]);
        match build_corpus(ts, ctx, vec![], cal) {
            Err(IngestError::UnresolvedClass { turn_id, class_id }) => {
                assert_eq!((turn_id.as_str(), class_id.as_str()), ("t1", "C404"));
            }
            other => panic!("expected UnresolvedClass, got {other:?}"),
        }
    }

    #[test]
    fn validation_findings() {
        let (ctx, cal) = context();
        let clean = build_corpus(turns(&[line("t1", "e1", "2025-03-01T10:00:00Z")]), ctx.clone(), vec![], cal.clone()).unwrap();
        assert!(validate_corpus(&clean).is_clean());

        let early = build_corpus(turns(&[line("t1", "e1", "2025-01-01T10:00:00Z")]), ctx.clone(), vec![], cal.clone()).unwrap();
        let before = early.clone();
        let report = validate_corpus(&early);
        assert_eq!(report.out_of_window, ["t1"]);
        assert_eq!(early, before);

        let dup = build_corpus(
            turns(&[line("t1", "e1", "2025-03-01T10:00:00Z"), line("t1", "e2", "2025-03-01T10:00:00Z")]),
            ctx.clone(),
            vec![],
            cal.clone(),
        )
        .unwrap();
        assert_eq!(validate_corpus(&dup).duplicate_turn_ids, ["t1"]);

        let empty = turns(&[line("t1", "e1", "2025-03-01T10:00:00Z").replace("\"hi\"", "\"\"")]);
        let corpus = build_corpus(empty, ctx, vec![], cal).unwrap();
        assert_eq!(validate_corpus(&corpus).empty_prompts, ["t1"]);
    }

    #[test]
    fn drop_out_of_window_removes_flagged_turns() {
        let (ctx, cal) = context();
        let ts = turns(&[line("t1", "e1", "2025-01-01T10:00:00Z"), line("t2", "e1", "2025-03-01T10:00:00Z")]);
        let corpus = build_corpus(ts, ctx, vec![], cal).unwrap().drop_out_of_window();
        assert_eq!(corpus.turns().len(), 1);
        assert!(validate_corpus(&corpus).is_clean());
    }

    #[test]
    fn context_rejects_bad_schedule_and_events() {
        let base = r#"{"classes": {"C1": {"discipline": "NonSTEM", "institution_id": "I1",
                       "class_schedule": [{"weekday": "Tue", "start_minute": 700, "end_minute": 600}], "size": 3}},
                       "institutions": {"I1": {"selectivity": "LessSelective"}},
                       "calendar": {"semester_start": "2025-02-17", "semester_end": "2025-07-15"}}"#;
        assert!(matches!(ContextDocument::from_json(base), Err(IngestError::InvalidContext(_))));
        let exam_no_end = r#"{"classes": {"C1": {"discipline": "NonSTEM", "institution_id": "I1", "size": 3}},
                       "institutions": {"I1": {"selectivity": "LessSelective"}},
                       "events": [{"class_id": "C1", "kind": "ExamWindow", "start": "2025-05-01T09:00:00Z"}],
                       "calendar": {"semester_start": "2025-02-17", "semester_end": "2025-07-15"}}"#;
        assert!(matches!(ContextDocument::from_json(exam_no_end), Err(IngestError::InvalidContext(_))));
    }

    #[test]
    fn calendar_weeks() {
        let (_, cal) = context();
        assert_eq!(cal.week_of(NaiveDate::from_ymd_opt(2025, 2, 17).unwrap()), Some(1));
        assert_eq!(cal.week_of(NaiveDate::from_ymd_opt(2025, 2, 24).unwrap()), Some(2));
        assert_eq!(cal.week_of(NaiveDate::from_ymd_opt(2025, 2, 16).unwrap()), None);
        assert_eq!(cal.n_weeks(), 22);
    }
}
