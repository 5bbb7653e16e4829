//! Session-level engagement features.
//!
//! Ten core features in three groups (behavioral, cognitive, temporal) and
//! four optional distances to class and assignment events.

use chrono::{DateTime, FixedOffset, Timelike};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{ActivityEvent, ActivityKind, Calendar, ConversationTurn, Corpus, ScheduleBlock};
use crate::sessionizer::Session;
use crate::text;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("session {session_id} starts on {date}, outside the semester calendar")]
    SessionOutsideCalendar { session_id: String, date: chrono::NaiveDate },
    #[error("invalid lexicon: {0}")]
    InvalidLexicon(String),
    #[error("session {session_id} references unknown class {class_id}")]
    UnknownClass { session_id: String, class_id: String },
}

pub const CORE_FEATURES: [&str; 10] = [
    "num_turns",
    "avg_minutes_per_turn",
    "avg_words_per_prompt",
    "copy_paste_events",
    "direct_answer_requests",
    "understanding_queries",
    "week_progress",
    "exam_period_indicator",
    "time_of_day",
    "in_class_indicator",
];

pub const EXTENDED_FEATURES: [&str; 4] = [
    "minutes_since_prev_class",
    "minutes_until_next_class",
    "minutes_since_assignment_release",
    "minutes_until_assignment_deadline",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngagementFeatures {
    pub num_turns: u32,
    pub avg_minutes_per_turn: f64,
    pub avg_words_per_prompt: f64,
    pub copy_paste_events: u32,
    pub direct_answer_requests: u32,
    pub understanding_queries: u32,
    pub week_progress: u32,
    pub exam_period_indicator: f64,
    pub time_of_day: f64,
    pub in_class_indicator: f64,
}

impl EngagementFeatures {
    /// Values in [`CORE_FEATURES`] order.
    pub fn to_array(&self) -> [f64; 10] {
        [
            self.num_turns as f64,
            self.avg_minutes_per_turn,
            self.avg_words_per_prompt,
            self.copy_paste_events as f64,
            self.direct_answer_requests as f64,
            self.understanding_queries as f64,
            self.week_progress as f64,
            self.exam_period_indicator,
            self.time_of_day,
            self.in_class_indicator,
        ]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtendedFeatures {
    pub minutes_since_prev_class: Option<f64>,
    pub minutes_until_next_class: Option<f64>,
    pub minutes_since_assignment_release: Option<f64>,
    pub minutes_until_assignment_deadline: Option<f64>,
}

impl ExtendedFeatures {
    pub fn to_array(&self) -> [Option<f64>; 4] {
        [
            self.minutes_since_prev_class,
            self.minutes_until_next_class,
            self.minutes_since_assignment_release,
            self.minutes_until_assignment_deadline,
        ]
    }

    pub fn is_complete(&self) -> bool {
        self.to_array().iter().all(Option::is_some)
    }
}

/// Keyword lists and structured-text patterns.
///
/// Keyword phrases match case-insensitively as substrings, with any run of
/// whitespace in the text matching a single space in the phrase. The token
/// `{n}` stands for a number, so `"question {n}"` matches "Question 12".
/// `structured_patterns` entries are either a built-in name
/// (`multiple_choice_markers`, `code_block`) or a regular expression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LexiconConfig {
    pub copy_paste_keywords: Vec<String>,
    pub structured_patterns: Vec<String>,
    pub long_prompt_threshold: usize,
    pub direct_answer_keywords: Vec<String>,
    pub understanding_keywords: Vec<String>,
}

impl Default for LexiconConfig {
    fn default() -> Self {
        let strings = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        LexiconConfig {
            copy_paste_keywords: strings(&["as follows", "question {n}"]),
            structured_patterns: strings(&[MULTIPLE_CHOICE, CODE_BLOCK]),
            long_prompt_threshold: 300,
            direct_answer_keywords: strings(&["give me the answer to", "what is the solution of"]),
            understanding_keywords: strings(&["how to understand", "why does"]),
        }
    }
}

impl LexiconConfig {
    /// Append another language's lists; the other threshold wins if set.
    pub fn extend(&mut self, other: LexiconConfig) {
        self.copy_paste_keywords.extend(other.copy_paste_keywords);
        self.structured_patterns.extend(other.structured_patterns);
        self.direct_answer_keywords.extend(other.direct_answer_keywords);
        self.understanding_keywords.extend(other.understanding_keywords);
        if other.long_prompt_threshold > 0 {
            self.long_prompt_threshold = other.long_prompt_threshold;
        }
    }
}

const MULTIPLE_CHOICE: &str = "multiple_choice_markers";
const CODE_BLOCK: &str = "code_block";

fn builtin_pattern(name: &str) -> Option<&'static str> {
    match name {
        // "A. ... B. ..." style option markers, ASCII or full-width punctuation.
        MULTIPLE_CHOICE => Some(r"(?s)(?:^|[^A-Za-z])A\s*[.)．、）]\s*\S.*?(?:^|[^A-Za-z])B\s*[.)．、）]\s*\S"),
        // Fenced block, or two consecutive indented lines.
        CODE_BLOCK => Some(r"(?m)```|^(?: {4}|\t)\S.*\n(?: {4}|\t)\S"),
        _ => None,
    }
}

fn keyword_regex(phrases: &[String], list: &str) -> Result<Regex, FeatureError> {
    if phrases.is_empty() {
        return Err(FeatureError::InvalidLexicon(format!("{list} is empty")));
    }
    let alternatives: Vec<String> = phrases
        .iter()
        .map(|phrase| {
            let mut out = String::new();
            for (i, word) in phrase.split_whitespace().enumerate() {
                if word == "{n}" {
                    out.push_str(r"\s*\d+");
                    continue;
                }
                if i > 0 {
                    out.push_str(r"\s+");
                }
                out.push_str(&regex::escape(word));
            }
            out
        })
        .filter(|p| !p.is_empty())
        .collect();
    if alternatives.is_empty() {
        return Err(FeatureError::InvalidLexicon(format!("{list} has only blank phrases")));
    }
    Regex::new(&format!("(?i)(?:{})", alternatives.join("|"))).map_err(|e| FeatureError::InvalidLexicon(e.to_string()))
}

/// A compiled [`LexiconConfig`].
#[derive(Debug, Clone)]
pub struct Lexicon {
    copy_paste: Regex,
    structured: Vec<Regex>,
    long_prompt_threshold: usize,
    direct_answer: Regex,
    understanding: Regex,
}

impl Lexicon {
    pub fn compile(config: &LexiconConfig) -> Result<Self, FeatureError> {
        if config.long_prompt_threshold == 0 {
            return Err(FeatureError::InvalidLexicon("long_prompt_threshold must be positive".into()));
        }
        if config.structured_patterns.is_empty() {
            return Err(FeatureError::InvalidLexicon("structured_patterns is empty".into()));
        }
        let structured = config
            .structured_patterns
            .iter()
            .map(|p| {
                let src = builtin_pattern(p).unwrap_or(p);
                Regex::new(src).map_err(|e| FeatureError::InvalidLexicon(format!("pattern `{p}`: {e}")))
            })
            .collect::<Result<_, _>>()?;
        Ok(Lexicon {
            copy_paste: keyword_regex(&config.copy_paste_keywords, "copy_paste_keywords")?,
            structured,
            long_prompt_threshold: config.long_prompt_threshold,
            direct_answer: keyword_regex(&config.direct_answer_keywords, "direct_answer_keywords")?,
            understanding: keyword_regex(&config.understanding_keywords, "understanding_keywords")?,
        })
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon::compile(&LexiconConfig::default()).expect("default lexicon compiles")
    }
}

pub fn count_turns(session: &Session<'_>) -> u32 {
    session.len() as u32
}

fn minutes_between(a: DateTime<FixedOffset>, b: DateTime<FixedOffset>) -> f64 {
    (b - a).num_seconds() as f64 / 60.0
}

/// Session span over the number of inter-turn gaps; 0 for a single turn.
pub fn avg_minutes_per_turn(session: &Session<'_>) -> f64 {
    let n = session.len();
    if n < 2 {
        return 0.0;
    }
    minutes_between(session.start(), session.end()) / (n - 1) as f64
}

pub fn avg_words_per_prompt(session: &Session<'_>) -> f64 {
    let total: usize = session.turns.iter().map(|t| text::word_count(&t.prompt_text)).sum();
    total as f64 / session.len() as f64
}

/// One point each for: image upload, pasted-text keyword, structured
/// pattern, long prompt. Range 0..=4.
pub fn detect_copy_paste(turn: &ConversationTurn, lexicon: &Lexicon) -> u32 {
    let prompt = &turn.prompt_text;
    let signals = [
        turn.has_image_upload,
        lexicon.copy_paste.is_match(prompt),
        lexicon.structured.iter().any(|r| r.is_match(prompt)),
        text::word_count(prompt) >= lexicon.long_prompt_threshold,
    ];
    signals.iter().filter(|&&s| s).count() as u32
}

pub fn detect_direct_answer(turn: &ConversationTurn, lexicon: &Lexicon) -> u32 {
    lexicon.direct_answer.is_match(&turn.prompt_text) as u32
}

pub fn detect_understanding(turn: &ConversationTurn, lexicon: &Lexicon) -> u32 {
    lexicon.understanding.is_match(&turn.prompt_text) as u32
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalFeatures {
    pub week_progress: u32,
    pub exam_period_indicator: f64,
    pub time_of_day: f64,
    pub in_class_indicator: f64,
}

/// Week, exam share, start hour and in-class share, all read on the
/// turns' local wall clock.
pub fn temporal_features(
    session: &Session<'_>,
    calendar: &Calendar,
    schedule: &[ScheduleBlock],
) -> Result<TemporalFeatures, FeatureError> {
    let start = session.start();
    let date = start.date_naive();
    let week_progress = match calendar.week_of(date) {
        Some(w) if calendar.contains(date) => w,
        _ => {
            return Err(FeatureError::SessionOutsideCalendar {
                session_id: session.session_id.clone(),
                date,
            })
        }
    };
    let n = session.len() as f64;
    let in_exam = session
        .turns
        .iter()
        .filter(|t| calendar.week_of(t.local_date()).is_some_and(|w| calendar.exam_weeks.contains(&w)))
        .count();
    let in_class = session
        .turns
        .iter()
        .filter(|t| schedule.iter().any(|b| b.contains(&t.timestamp)))
        .count();
    Ok(TemporalFeatures {
        week_progress,
        exam_period_indicator: in_exam as f64 / n,
        time_of_day: start.hour() as f64 + start.minute() as f64 / 60.0,
        in_class_indicator: in_class as f64 / n,
    })
}

/// Distances in minutes from the session start to the previous class end,
/// the next class start, the latest assignment release and the next
/// assignment deadline. Events of other classes are ignored.
pub fn extended_features<'e>(session: &Session<'_>, events: impl IntoIterator<Item = &'e ActivityEvent>) -> ExtendedFeatures {
    let start = session.start();
    let mut out = ExtendedFeatures::default();
    let keep_min = |slot: &mut Option<f64>, v: f64| {
        if slot.is_none_or(|cur| v < cur) {
            *slot = Some(v);
        }
    };
    for event in events.into_iter().filter(|e| e.class_id == session.class_id) {
        match event.kind {
            ActivityKind::ClassMeeting => {
                let end = event.end.unwrap_or(event.start);
                if end <= start {
                    keep_min(&mut out.minutes_since_prev_class, minutes_between(end, start));
                }
                if event.start >= start {
                    keep_min(&mut out.minutes_until_next_class, minutes_between(start, event.start));
                }
            }
            ActivityKind::AssignmentRelease if event.start <= start => {
                keep_min(&mut out.minutes_since_assignment_release, minutes_between(event.start, start));
            }
            ActivityKind::AssignmentDeadline if event.start >= start => {
                keep_min(&mut out.minutes_until_assignment_deadline, minutes_between(start, event.start));
            }
            _ => {}
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionFeatures {
    pub core: EngagementFeatures,
    /// Present when the session's class has any activity events.
    pub extended: Option<ExtendedFeatures>,
}

/// All features of one session.
pub fn featurize_with(
    session: &Session<'_>,
    calendar: &Calendar,
    schedule: &[ScheduleBlock],
    class_events: &[&ActivityEvent],
    lexicon: &Lexicon,
) -> Result<SessionFeatures, FeatureError> {
    let temporal = temporal_features(session, calendar, schedule)?;
    let sum = |f: fn(&ConversationTurn, &Lexicon) -> u32| session.turns.iter().map(|t| f(t, lexicon)).sum::<u32>();
    let core = EngagementFeatures {
        num_turns: count_turns(session),
        avg_minutes_per_turn: avg_minutes_per_turn(session),
        avg_words_per_prompt: avg_words_per_prompt(session),
        copy_paste_events: sum(detect_copy_paste),
        direct_answer_requests: sum(detect_direct_answer),
        understanding_queries: sum(detect_understanding),
        week_progress: temporal.week_progress,
        exam_period_indicator: temporal.exam_period_indicator,
        time_of_day: temporal.time_of_day,
        in_class_indicator: temporal.in_class_indicator,
    };
    let extended = (!class_events.is_empty()).then(|| extended_features(session, class_events.iter().copied()));
    Ok(SessionFeatures { core, extended })
}

pub fn featurize(session: &Session<'_>, corpus: &Corpus, lexicon: &Lexicon) -> Result<SessionFeatures, FeatureError> {
    let class = corpus.class(session.class_id).ok_or_else(|| FeatureError::UnknownClass {
        session_id: session.session_id.clone(),
        class_id: session.class_id.to_string(),
    })?;
    let events: Vec<&ActivityEvent> = corpus.events_for_class(session.class_id).collect();
    featurize_with(session, &corpus.calendar, &class.class_schedule, &events, lexicon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{NaiveDate, TimeZone, Weekday};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn turn(i: usize, at: DateTime<FixedOffset>, prompt: &str, image: bool) -> ConversationTurn {
        ConversationTurn {
            turn_id: format!("t{i}"),
            enrollment_id: "e1".into(),
            class_id: "C1".into(),
            timestamp: at,
            prompt_text: prompt.into(),
            response_text: String::new(),
            page_context: None,
            has_image_upload: image,
        }
    }

    fn at(day: u32, h: u32, m: u32) -> DateTime<FixedOffset> {
        FixedOffset::east_opt(8 * 3600).unwrap().with_ymd_and_hms(2025, 3, day, h, m, 0).unwrap()
    }

    fn calendar() -> Calendar {
        Calendar {
            semester_start: NaiveDate::from_ymd_opt(2025, 3, 3).unwrap(),
            semester_end: NaiveDate::from_ymd_opt(2025, 6, 30).unwrap(),
            exam_weeks: BTreeSet::from([2]),
        }
    }

    fn lex() -> Lexicon {
        Lexicon::default()
    }

    #[test]
    fn duration_and_word_counts() {
        let t = vec![turn(0, at(3, 9, 0), "a b", false), turn(1, at(3, 9, 4), "c d e f", false), turn(2, at(3, 9, 10), "", true)];
        let s = Session::new(0, 0, &t);
        assert_eq!(avg_minutes_per_turn(&s), 5.0);
        assert_eq!(avg_words_per_prompt(&Session::new(0, 0, &t[..2])), 3.0);
        assert_eq!(avg_minutes_per_turn(&Session::new(0, 0, &t[..1])), 0.0);
        assert_eq!(avg_minutes_per_turn(&Session::new(0, 1, &t[1..2])), 0.0);
        let two = vec![turn(0, at(3, 9, 0), "x", false), turn(1, at(3, 9, 7), "y", false)];
        assert_eq!(avg_minutes_per_turn(&Session::new(0, 0, &two)), 7.0);
        let cjk = vec![turn(0, at(3, 9, 0), "什么是递归", false)];
        assert_eq!(avg_words_per_prompt(&Session::new(0, 0, &cjk)), 5.0);
        let images = vec![turn(0, at(3, 9, 0), "", true), turn(1, at(3, 9, 1), "", true)];
        assert_eq!(avg_words_per_prompt(&Session::new(0, 0, &images)), 0.0);
    }

    #[test]
    fn copy_paste_signals() {
        let l = lex();
        assert_eq!(detect_copy_paste(&turn(0, at(3, 9, 0), "Question 3: pick one. A. x B. y", false), &l), 2);
        assert_eq!(detect_copy_paste(&turn(0, at(3, 9, 0), "what does this mean?", false), &l), 0);
        assert_eq!(detect_copy_paste(&turn(0, at(3, 9, 0), "", true), &l), 1);
        assert_eq!(detect_copy_paste(&turn(0, at(3, 9, 0), "fix this\n```\nfn main() {}\n```", false), &l), 1);
        assert_eq!(detect_copy_paste(&turn(0, at(3, 9, 0), "see:\n    x = 1\n    y = 2", false), &l), 1);
        assert_eq!(detect_copy_paste(&turn(0, at(3, 9, 0), "The steps are as follows", false), &l), 1);
        let long = "word ".repeat(300);
        assert_eq!(detect_copy_paste(&turn(0, at(3, 9, 0), &long, false), &l), 1);
        let all = format!("Question 1 as follows: A. yes B. no {}", "w ".repeat(300));
        assert_eq!(detect_copy_paste(&turn(0, at(3, 9, 0), &all, true), &l), 4);
    }

    #[test]
    fn keyword_detectors() {
        let l = lex();
        let t = |p: &str| turn(0, at(3, 9, 0), p, false);
        assert_eq!(detect_direct_answer(&t("give me the answer to #4"), &l), 1);
        assert_eq!(detect_direct_answer(&t("how do I start this proof"), &l), 0);
        assert_eq!(detect_direct_answer(&t("WHAT IS THE SOLUTION OF x²=4"), &l), 1);
        assert_eq!(detect_understanding(&t("why does entropy increase"), &l), 1);
        assert_eq!(detect_understanding(&t("answer: B?"), &l), 0);
        assert_eq!(detect_understanding(&t("how to understand dual spaces"), &l), 1);
        assert_eq!(detect_understanding(&t("Why  does\nit work"), &l), 1);
    }

    #[test]
    fn per_language_lexicon_extension() {
        let mut cfg = LexiconConfig::default();
        cfg.extend(LexiconConfig {
            copy_paste_keywords: vec!["如下".into()],
            structured_patterns: vec![],
            long_prompt_threshold: 0,
            direct_answer_keywords: vec!["答案是什么".into()],
            understanding_keywords: vec!["怎么理解".into()],
        });
        let l = Lexicon::compile(&cfg).unwrap();
        assert_eq!(detect_understanding(&turn(0, at(3, 9, 0), "怎么理解对偶空间", false), &l), 1);
        assert_eq!(detect_direct_answer(&turn(0, at(3, 9, 0), "第四题答案是什么", false), &l), 1);
        assert_eq!(cfg.long_prompt_threshold, 300);
    }

    #[test]
    fn invalid_lexicons() {
        let mut cfg = LexiconConfig::default();
        cfg.understanding_keywords.clear();
        assert!(matches!(Lexicon::compile(&cfg), Err(FeatureError::InvalidLexicon(_))));
        let cfg = LexiconConfig { structured_patterns: vec!["(".into()], ..Default::default() };
        assert!(Lexicon::compile(&cfg).is_err());
        let cfg = LexiconConfig { long_prompt_threshold: 0, ..Default::default() };
        assert!(Lexicon::compile(&cfg).is_err());
    }

    #[test]
    fn temporal_rules() {
        let cal = calendar();
        // 2025-03-03 is a Monday; class Mon 09:00-10:30 local.
        let schedule = [ScheduleBlock { weekday: Weekday::Mon, start_minute: 540, end_minute: 630 }];
        let t = vec![turn(0, at(3, 9, 0), "x", false), turn(1, at(3, 9, 30), "y", false)];
        let tf = temporal_features(&Session::new(0, 0, &t), &cal, &schedule).unwrap();
        assert_eq!(tf.week_progress, 1);
        assert_eq!(tf.in_class_indicator, 1.0);
        assert_eq!(tf.time_of_day, 9.0);
        assert_eq!(tf.exam_period_indicator, 0.0);

        // Turns on days 10, 11 (week 2, exam) and 17, 18 (week 3).
        let t = vec![
            turn(0, at(10, 23, 45), "a", false),
            turn(1, at(11, 1, 0), "a", false),
            turn(2, at(17, 1, 0), "a", false),
            turn(3, at(18, 1, 0), "a", false),
        ];
        let tf = temporal_features(&Session::new(0, 0, &t), &cal, &schedule).unwrap();
        assert_eq!(tf.week_progress, 2);
        assert_eq!(tf.exam_period_indicator, 0.5);
        assert_eq!(tf.time_of_day, 23.75);

        let early = vec![turn(0, at(1, 9, 0), "x", false)];
        assert!(matches!(
            temporal_features(&Session::new(0, 0, &early), &cal, &schedule),
            Err(FeatureError::SessionOutsideCalendar { .. })
        ));
    }

    #[test]
    fn extended_distances() {
        let ev = |kind, start: DateTime<FixedOffset>, end: Option<DateTime<FixedOffset>>| ActivityEvent {
            class_id: "C1".into(),
            kind,
            start,
            end,
        };
        let t = vec![turn(0, at(5, 12, 0), "x", false)];
        let s = Session::new(0, 0, &t);
        let events = vec![
            ev(ActivityKind::ClassMeeting, at(5, 10, 0), Some(at(5, 11, 30))),
            ev(ActivityKind::ClassMeeting, at(3, 10, 0), Some(at(3, 11, 30))),
            ev(ActivityKind::ClassMeeting, at(7, 10, 0), Some(at(7, 11, 30))),
            ev(ActivityKind::AssignmentDeadline, at(5, 14, 0), None),
            ev(ActivityKind::AssignmentDeadline, at(4, 14, 0), None),
        ];
        let x = extended_features(&s, &events);
        assert_eq!(x.minutes_since_prev_class, Some(30.0));
        assert_eq!(x.minutes_until_next_class, Some(2.0 * 24.0 * 60.0 - 120.0));
        assert_eq!(x.minutes_until_assignment_deadline, Some(120.0));
        assert_eq!(x.minutes_since_assignment_release, None);
        assert!(!x.is_complete());

        let other = vec![ActivityEvent { class_id: "C2".into(), ..events[0].clone() }];
        assert_eq!(extended_features(&s, &other), ExtendedFeatures::default());
    }

    #[test]
    fn hand_built_session_vector() {
        // Mon 2025-03-10 (week 2 = exam week), class block Mon 10:00-11:00.
        let cal = calendar();
        let schedule = [ScheduleBlock { weekday: Weekday::Mon, start_minute: 600, end_minute: 660 }];
        let t = vec![
            turn(0, at(10, 10, 30), "Question 2 as follows: A. 1 B. 2 give me the answer to it", false),
            turn(1, at(10, 10, 45), "why does option B work", false),
            turn(2, at(10, 11, 6), "", true),
        ];
        let f = featurize_with(&Session::new(0, 0, &t), &cal, &schedule, &[], &lex()).unwrap();
        assert_eq!(f.extended, None);
        let expected = EngagementFeatures {
            num_turns: 3,
            avg_minutes_per_turn: 18.0,              // 36 min / 2 gaps
            avg_words_per_prompt: 19.0 / 3.0,        // (14 + 5 + 0) / 3
            copy_paste_events: 3,                    // keyword + pattern, image
            direct_answer_requests: 1,
            understanding_queries: 1,
            week_progress: 2,
            exam_period_indicator: 1.0,
            time_of_day: 10.5,
            in_class_indicator: 2.0 / 3.0,
        };
        assert_eq!(f.core.to_array()[..7], expected.to_array()[..7]);
        for (a, b) in f.core.to_array().iter().zip(expected.to_array()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    fn shifted(t: &[ConversationTurn], days: i64) -> Vec<ConversationTurn> {
        t.iter()
            .map(|x| ConversationTurn { timestamp: x.timestamp + chrono::Duration::days(days), ..x.clone() })
            .collect()
    }

    #[test]
    fn one_week_shift_only_moves_week() {
        let cal = Calendar { exam_weeks: BTreeSet::new(), ..calendar() };
        let t = vec![turn(0, at(4, 10, 0), "why does it fail", false), turn(1, at(4, 10, 9), "as follows", true)];
        let a = featurize_with(&Session::new(0, 0, &t), &cal, &[], &[], &lex()).unwrap().core;
        let later = shifted(&t, 7);
        let b = featurize_with(&Session::new(0, 0, &later), &cal, &[], &[], &lex()).unwrap().core;
        assert_eq!(b.week_progress, a.week_progress + 1);
        assert_eq!(a.to_array()[..6], b.to_array()[..6]);
        assert_eq!(a, featurize_with(&Session::new(0, 0, &t), &cal, &[], &[], &lex()).unwrap().core);
    }

    proptest! {
        #[test]
        fn shifting_changes_only_temporal(shift_minutes in 0i64..(60 * 24 * 30), prompts in prop::collection::vec("[a-z ]{0,30}", 1..6)) {
            let cal = calendar();
            let t: Vec<_> = prompts.iter().enumerate().map(|(i, p)| turn(i, at(4, 8, 0) + chrono::Duration::minutes(7 * i as i64), p, i % 2 == 0)).collect();
            let moved: Vec<_> = t.iter().map(|x| ConversationTurn { timestamp: x.timestamp + chrono::Duration::minutes(shift_minutes), ..x.clone() }).collect();
            let a = featurize_with(&Session::new(0, 0, &t), &cal, &[], &[], &lex()).unwrap().core.to_array();
            let b = featurize_with(&Session::new(0, 0, &moved), &cal, &[], &[], &lex()).unwrap().core.to_array();
            prop_assert_eq!(&a[..6], &b[..6]);
            for v in [b[7], b[9]] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!((0.0..24.0).contains(&b[8]));
        }

        #[test]
        fn adding_keywords_never_lowers_counts(prompt in "[a-z ]{0,40}", extra in "[a-z]{1,4}") {
            let base = LexiconConfig::default();
            let mut more = base.clone();
            more.copy_paste_keywords.push(extra.clone());
            more.direct_answer_keywords.push(extra.clone());
            more.understanding_keywords.push(extra);
            let (a, b) = (Lexicon::compile(&base).unwrap(), Lexicon::compile(&more).unwrap());
            let t = turn(0, at(4, 8, 0), &prompt, false);
            prop_assert!(detect_copy_paste(&t, &b) >= detect_copy_paste(&t, &a));
            prop_assert!(detect_direct_answer(&t, &b) >= detect_direct_answer(&t, &a));
            prop_assert!(detect_understanding(&t, &b) >= detect_understanding(&t, &a));
            prop_assert!(detect_copy_paste(&t, &b) <= 4);
        }
    }
}
