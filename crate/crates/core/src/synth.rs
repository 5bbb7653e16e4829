//! Synthetic corpora with known ground truth.
//!
//! Everything here is driven by one seeded ChaCha stream, so a `SynthSpec` and seed
//! always reproduce the same bytes. Gold labels travel in sidecar structures
//! and files that the pipeline never reads.
//!
//! Segmentation guarantees, with the segmentation threshold `T` and margin `ε`:
//! planted time boundaries have gaps of at least `T + ε`, all other gaps are
//! at most `T − ε`. Each planted session draws its prompts from its own
//! eight-word vocabulary, six distinct words per prompt, so two prompts of one
//! session share at least four words while prompts across a boundary share
//! none. Topic-only boundaries are planted only inside time blocks of at
//! least `min_block_turns` turns.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike, Duration, FixedOffset, NaiveDate, TimeZone, Weekday};
use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::FeatureMatrix;
use crate::ingest::{
    ActivityEvent, ActivityKind, Calendar, ClassMeta, ContextDocument, ConversationTurn, Discipline,
    InstitutionMeta, ScheduleBlock, Selectivity,
};
use crate::procmine::{StateSequence, TransitionMatrix, END, START};
use crate::sessionizer::BoundarySet;

/// Planted session types, in the order used by [`TypeChain`].
pub const SESSION_TYPES: [&str; 4] = ["deep", "shallow", "routine", "exam"];

/// Backstop on sampled Markov sequences, Start and End included.
pub const MAX_SEQUENCE_STATES: usize = 10_000;

const TOPIC_POOL: usize = 8;
const TOPIC_DRAW: usize = 6;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error("row {0} is not a probability distribution")]
    NotStochastic(String),
    #[error("End is unreachable from state {0}")]
    NonAbsorbing(String),
    #[error("sampled sequence exceeded {0} states")]
    SequenceCapExceeded(usize),
}

/// Log-normal session counts, rounded and clamped to `1..=max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionCountDist {
    pub median: f64,
    pub log_sigma: f64,
    pub max: usize,
}

impl Default for SessionCountDist {
    fn default() -> Self {
        SessionCountDist { median: 5.0, log_sigma: 2.0, max: 60 }
    }
}

/// First-type and type-to-type probabilities over [`SESSION_TYPES`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeChain {
    pub start: Vec<f64>,
    pub transitions: Vec<Vec<f64>>,
}

impl Default for TypeChain {
    fn default() -> Self {
        TypeChain {
            start: vec![0.15, 0.10, 0.45, 0.30],
            transitions: vec![
                vec![0.45, 0.10, 0.30, 0.15],
                vec![0.10, 0.45, 0.30, 0.15],
                vec![0.10, 0.10, 0.65, 0.15],
                vec![0.10, 0.15, 0.25, 0.50],
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_enrollments: usize,
    pub enrollments_per_student: f64,
    pub n_classes: usize,
    pub n_institutions: usize,
    pub sessions_per_enrollment: SessionCountDist,
    pub gap_threshold_minutes: f64,
    pub margin_minutes: f64,
    /// Share of between-session boundaries planted as topic shifts with a
    /// short gap. 0 gives a time-only corpus.
    pub topic_boundary_fraction: f64,
    pub min_block_turns: usize,
    /// Type-specific cue phrases, images and long prompts. Off gives prompts
    /// made of topic words only.
    pub engagement_cues: bool,
    pub type_chain: TypeChain,
    pub semester_start: NaiveDate,
    pub n_weeks: u32,
    pub exam_weeks: Vec<u32>,
    pub utc_offset_minutes: i32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            n_enrollments: 200,
            enrollments_per_student: 1.5,
            n_classes: 24,
            n_institutions: 6,
            sessions_per_enrollment: SessionCountDist::default(),
            gap_threshold_minutes: 15.0,
            margin_minutes: 1.0,
            topic_boundary_fraction: 0.0,
            min_block_turns: 3,
            engagement_cues: true,
            type_chain: TypeChain::default(),
            semester_start: NaiveDate::from_ymd_opt(2025, 2, 17).expect("valid date"),
            n_weeks: 20,
            exam_weeks: vec![9, 10, 19, 20],
            utc_offset_minutes: 8 * 60,
        }
    }
}

fn check_distribution(name: &str, row: &[f64]) -> Result<(), SynthError> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(SynthError::NotStochastic(name.to_string()));
    }
    Ok(())
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if !(self.margin_minutes > 0.0 && self.gap_threshold_minutes - self.margin_minutes >= 1.0) {
            return bad("need margin > 0 and threshold - margin >= 1 minute");
        }
        if self.n_classes == 0 || self.n_institutions == 0 || self.n_weeks == 0 {
            return bad("classes, institutions and weeks must be positive");
        }
        if self.enrollments_per_student < 1.0 {
            return bad("enrollments_per_student must be >= 1");
        }
        if self.sessions_per_enrollment.max == 0 || !(self.sessions_per_enrollment.median > 0.0) {
            return bad("session count distribution needs median > 0 and max >= 1");
        }
        if !(0.0..=1.0).contains(&self.topic_boundary_fraction) {
            return bad("topic_boundary_fraction must lie in [0, 1]");
        }
        if self.type_chain.start.len() != SESSION_TYPES.len()
            || self.type_chain.transitions.len() != SESSION_TYPES.len()
            || self.type_chain.transitions.iter().any(|r| r.len() != SESSION_TYPES.len())
        {
            return bad("type chain must be over the four session types");
        }
        check_distribution("start", &self.type_chain.start)?;
        for (name, row) in SESSION_TYPES.iter().zip(&self.type_chain.transitions) {
            check_distribution(name, row)?;
        }
        if self.exam_weeks.iter().any(|w| *w == 0 || *w > self.n_weeks) {
            return bad("exam weeks must lie in 1..=n_weeks");
        }
        let budget = self.sessions_per_enrollment.max as i64 * self.max_session_secs();
        if budget >= self.semester_secs() / 2 {
            return bad("semester too short for the maximum session count");
        }
        Ok(())
    }

    fn max_within_secs(&self) -> i64 {
        ((self.gap_threshold_minutes - self.margin_minutes) * 60.0).floor() as i64
    }

    fn min_between_secs(&self) -> i64 {
        ((self.gap_threshold_minutes + self.margin_minutes) * 60.0).ceil() as i64
    }

    /// Upper bound on the time one session plus its leading gap can consume.
    fn max_session_secs(&self) -> i64 {
        let max_turns = PROFILES.iter().map(|p| p.turns.1).max().unwrap_or(1) as i64;
        (max_turns - 1) * self.max_within_secs() + self.min_between_secs() + SHORT_BREAK_SECS
    }

    fn semester_secs(&self) -> i64 {
        self.n_weeks as i64 * 7 * 86_400
    }

    fn offset(&self) -> FixedOffset {
        FixedOffset::east_opt(self.utc_offset_minutes * 60).expect("offset within a day")
    }

    pub fn calendar(&self) -> Calendar {
        Calendar {
            semester_start: self.semester_start,
            semester_end: self.semester_start + Duration::days(self.n_weeks as i64 * 7 - 1),
            exam_weeks: self.exam_weeks.iter().copied().collect(),
        }
    }
}

const SHORT_BREAK_SECS: i64 = 45 * 60;

struct Profile {
    turns: (usize, usize),
    /// Within-session gaps as fractions of `T − ε`.
    gap: (f64, f64),
    words: (usize, usize),
    hours: (u32, u32),
}

const PROFILES: [Profile; 4] = [
    Profile { turns: (3, 8), gap: (0.25, 1.0), words: (20, 60), hours: (13, 23) },
    Profile { turns: (1, 2), gap: (0.03, 0.3), words: (6, 10), hours: (8, 23) },
    Profile { turns: (1, 4), gap: (0.1, 0.7), words: (8, 25), hours: (9, 18) },
    Profile { turns: (2, 6), gap: (0.05, 0.6), words: (10, 40), hours: (18, 24) },
];

const DEEP: usize = 0;
const SHALLOW: usize = 1;
const ROUTINE: usize = 2;
const EXAM: usize = 3;

const SYLLABLES: [&str; 20] = [
    "ba", "ke", "li", "mo", "nu", "pa", "re", "si", "to", "vu", "da", "fe", "gi", "ho", "ju", "ka", "le", "mi", "no", "pu",
];

/// Unique made-up word per index. The `z` prefix keeps it clear of the
/// English cue phrases.
fn made_up_word(mut index: usize) -> String {
    let mut word = String::from("z");
    loop {
        word.push_str(SYLLABLES[index % SYLLABLES.len()]);
        index /= SYLLABLES.len();
        if index == 0 {
            break;
        }
        index -= 1;
    }
    word
}

fn topic_vocabulary(topic: usize) -> Vec<String> {
    (0..TOPIC_POOL).map(|j| made_up_word(topic * TOPIC_POOL + j)).collect()
}

/// Planted structure of one enrollment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldEnrollment {
    pub enrollment_id: String,
    pub student_id: String,
    pub class_id: String,
    pub n_turns: usize,
    /// 0-based turn indices that start a planted session.
    pub boundaries: Vec<usize>,
    /// The subset of `boundaries` planted as topic shifts with a short gap.
    pub topic_only: Vec<usize>,
    pub session_types: Vec<String>,
}

impl GoldEnrollment {
    pub fn boundary_set(&self) -> BoundarySet {
        BoundarySet::new(self.n_turns, self.boundaries.clone()).expect("planted boundaries are in range")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub turns: Vec<ConversationTurn>,
    pub context: ContextDocument,
    pub gold: Vec<GoldEnrollment>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthFiles {
    pub turns: PathBuf,
    pub context: PathBuf,
    pub gold: PathBuf,
}

impl SynthCorpus {
    pub fn gold_boundaries(&self) -> BTreeMap<String, BoundarySet> {
        self.gold.iter().map(|g| (g.enrollment_id.clone(), g.boundary_set())).collect()
    }

    /// Writes `turns.jsonl`, `context.json` and the `gold.jsonl` sidecar.
    pub fn write_to(&self, dir: &Path) -> std::io::Result<SynthFiles> {
        std::fs::create_dir_all(dir)?;
        let files = SynthFiles {
            turns: dir.join("turns.jsonl"),
            context: dir.join("context.json"),
            gold: dir.join("gold.jsonl"),
        };
        let mut out = BufWriter::new(File::create(&files.turns)?);
        for t in &self.turns {
            writeln!(out, "{}", t.to_json_line())?;
        }
        out.flush()?;
        std::fs::write(&files.context, self.context.to_json() + "\n")?;
        let mut out = BufWriter::new(File::create(&files.gold)?);
        for g in &self.gold {
            writeln!(out, "{}", serde_json::to_string(g).expect("gold serializes"))?;
        }
        out.flush()?;
        Ok(files)
    }
}

fn class_schedule(c: usize) -> Vec<ScheduleBlock> {
    let days = [(Weekday::Mon, Weekday::Wed), (Weekday::Tue, Weekday::Thu), (Weekday::Wed, Weekday::Fri)][c % 3];
    let start = [600, 840, 480][(c / 3) % 3];
    [days.0, days.1]
        .into_iter()
        .map(|weekday| ScheduleBlock { weekday, start_minute: start, end_minute: start + 90 })
        .collect()
}

fn build_context(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> ContextDocument {
    let institutions = (0..spec.n_institutions)
        .map(|i| {
            let selectivity = if i % 2 == 0 { Selectivity::HighlySelective } else { Selectivity::LessSelective };
            (format!("inst{i:02}"), InstitutionMeta { selectivity })
        })
        .collect();
    let classes: BTreeMap<String, ClassMeta> = (0..spec.n_classes)
        .map(|c| {
            let meta = ClassMeta {
                discipline: if c % 2 == 0 { Discipline::Stem } else { Discipline::NonStem },
                institution_id: format!("inst{:02}", c % spec.n_institutions),
                class_schedule: class_schedule(c),
                size: rng.gen_range(20..=200),
            };
            (format!("class{c:03}"), meta)
        })
        .collect();
    let calendar = spec.calendar();
    let offset = spec.offset();
    let at = |day: i64, minute: i64| -> DateTime<FixedOffset> {
        let date = spec.semester_start + Duration::days(day);
        offset
            .from_local_datetime(&date.and_hms_opt(0, 0, 0).expect("midnight"))
            .single()
            .expect("fixed offsets are unambiguous")
            + Duration::minutes(minute)
    };
    let mut events = Vec::new();
    for (class_id, meta) in &classes {
        for week in 0..spec.n_weeks as i64 {
            for day in week * 7..week * 7 + 7 {
                let weekday = (spec.semester_start + Duration::days(day)).weekday();
                for b in meta.class_schedule.iter().filter(|b| b.weekday == weekday) {
                    events.push(ActivityEvent {
                        class_id: class_id.clone(),
                        kind: ActivityKind::ClassMeeting,
                        start: at(day, b.start_minute as i64),
                        end: Some(at(day, b.end_minute as i64)),
                    });
                }
            }
            events.push(ActivityEvent {
                class_id: class_id.clone(),
                kind: ActivityKind::AssignmentRelease,
                start: at(week * 7, 9 * 60),
                end: None,
            });
            events.push(ActivityEvent {
                class_id: class_id.clone(),
                kind: ActivityKind::AssignmentDeadline,
                start: at(week * 7 + 6, 23 * 60 + 59),
                end: None,
            });
            if calendar.exam_weeks.contains(&(week as u32 + 1)) {
                events.push(ActivityEvent {
                    class_id: class_id.clone(),
                    kind: ActivityKind::ExamWindow,
                    start: at(week * 7, 0),
                    end: Some(at(week * 7 + 6, 23 * 60 + 59)),
                });
            }
        }
    }
    ContextDocument { classes, institutions, events, calendar, enrollments: BTreeMap::new() }
}

fn sample_types(chain: &TypeChain, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let start = WeightedIndex::new(&chain.start).expect("validated");
    let rows: Vec<WeightedIndex<f64>> =
        chain.transitions.iter().map(|r| WeightedIndex::new(r).expect("validated")).collect();
    let mut types: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        let t = if i == 0 { start.sample(rng) } else { rows[types[i - 1]].sample(rng) };
        types.push(t);
    }
    types
}

struct PromptParts {
    text: String,
    image: bool,
}

fn compose_prompt(
    vocab: &[String],
    kind: usize,
    cues: bool,
    question_no: &mut u32,
    rng: &mut ChaCha8Rng,
) -> PromptParts {
    let profile = &PROFILES[kind];
    let chosen: Vec<&str> =
        rand::seq::index::sample(rng, TOPIC_POOL, TOPIC_DRAW).iter().map(|i| vocab[i].as_str()).collect();
    let mut n_words = rng.gen_range(profile.words.0..=profile.words.1);
    let mut image = false;
    let mut prefix: Vec<String> = Vec::new();
    let mut options = false;
    if cues {
        // At most nine cue tokens per prompt, which keeps consecutive prompts of
        // one session above the heuristic split threshold.
        let understanding = ["how to understand", "why does"];
        let direct = ["give me the answer to", "what is the solution of"];
        match kind {
            DEEP => {
                if rng.gen_bool(0.6) {
                    prefix.push(understanding.choose(rng).expect("non-empty").to_string());
                } else if rng.gen_bool(0.05) {
                    prefix.push(direct.choose(rng).expect("non-empty").to_string());
                }
            }
            SHALLOW => {
                if rng.gen_bool(0.55) {
                    prefix.push(direct.choose(rng).expect("non-empty").to_string());
                } else if rng.gen_bool(0.05) {
                    prefix.push(understanding.choose(rng).expect("non-empty").to_string());
                }
            }
            ROUTINE => {
                if rng.gen_bool(0.1) {
                    prefix.push(understanding.choose(rng).expect("non-empty").to_string());
                } else if rng.gen_bool(0.1) {
                    prefix.push(direct.choose(rng).expect("non-empty").to_string());
                }
            }
            _ => {
                image = rng.gen_bool(0.35);
                if rng.gen_bool(0.35) {
                    *question_no += 1;
                    prefix.push(format!("question {} as follows", *question_no));
                } else if rng.gen_bool(0.2) {
                    prefix.push(direct.choose(rng).expect("non-empty").to_string());
                }
                options = rng.gen_bool(0.3);
                if rng.gen_bool(0.15) {
                    n_words = rng.gen_range(300..=400);
                }
            }
        }
    }
    let mut words: Vec<&str> = chosen.clone();
    while words.len() < n_words {
        words.push(chosen[rng.gen_range(0..TOPIC_DRAW)]);
    }
    let mut text = prefix.join(" ");
    if !text.is_empty() {
        text.push(' ');
    }
    text.push_str(&words.join(" "));
    if options {
        for (letter, word) in ["A", "B", "C", "D"].iter().zip(chosen.iter()) {
            text.push_str(&format!("\n{letter}. {word}"));
        }
    }
    PromptParts { text, image }
}

struct Timeline<'a> {
    spec: &'a SynthSpec,
    calendar: Calendar,
    schedule: Vec<ScheduleBlock>,
}

impl Timeline<'_> {
    fn weekday(&self, day: i64) -> Weekday {
        (self.spec.semester_start + Duration::days(day)).weekday()
    }

    /// Start second of a session that does not follow a topic-only boundary.
    fn session_start(&self, kind: usize, earliest: i64, cap: i64, rng: &mut ChaCha8Rng) -> i64 {
        let remaining = cap - earliest;
        if remaining <= 86_400 || !rng.gen_bool(0.75) {
            return earliest;
        }
        let mean_days = remaining / 86_400;
        let mut day = earliest / 86_400 + rng.gen_range(0..=mean_days.clamp(1, 6));
        let profile = &PROFILES[kind];
        let mut tod = rng.gen_range(profile.hours.0 as i64 * 3600..profile.hours.1 as i64 * 3600);
        if kind == EXAM && rng.gen_bool(0.8) {
            let week = (day / 7) as u32 + 1;
            if let Some(w) = self.calendar.exam_weeks.range(week..).next() {
                if *w != week {
                    day = (*w as i64 - 1) * 7 + rng.gen_range(0..7);
                }
            }
        } else if kind == ROUTINE && rng.gen_bool(0.5) {
            if let Some((d, block)) = (day..day + 7)
                .find_map(|d| self.schedule.iter().find(|b| b.weekday == self.weekday(d)).map(|b| (d, b)))
            {
                day = d;
                let len = (block.end_minute - block.start_minute) as i64 * 60;
                tod = block.start_minute as i64 * 60 + rng.gen_range(0..len / 2);
            }
        }
        (day * 86_400 + tod).clamp(earliest, cap)
    }
}

/// The full corpus generator: context, turns and gold sidecar.
pub fn gen_corpus(spec: &SynthSpec) -> Result<SynthCorpus, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let context = build_context(spec, &mut rng);
    let class_ids: Vec<String> = context.classes.keys().cloned().collect();
    let counts = LogNormal::new(spec.sessions_per_enrollment.median.ln(), spec.sessions_per_enrollment.log_sigma)
        .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let n_students = ((spec.n_enrollments as f64 / spec.enrollments_per_student).ceil() as usize).max(1);
    let offset = spec.offset();
    let origin = offset
        .from_local_datetime(&spec.semester_start.and_hms_opt(0, 0, 0).expect("midnight"))
        .single()
        .expect("fixed offsets are unambiguous");
    let max_within = spec.max_within_secs();
    let semester = spec.semester_secs();
    let per_session = spec.max_session_secs();

    let mut context = context;
    let mut turns = Vec::new();
    let mut gold = Vec::with_capacity(spec.n_enrollments);
    let mut topic = 0usize;
    for e in 0..spec.n_enrollments {
        let enrollment_id = format!("enr{e:06}");
        let student_id = format!("stu{:06}", rng.gen_range(0..n_students));
        let class_idx = rng.gen_range(0..class_ids.len());
        let class_id = class_ids[class_idx].clone();
        let timeline = Timeline {
            spec,
            calendar: context.calendar.clone(),
            schedule: context.classes[&class_id].class_schedule.clone(),
        };
        let n_sessions = (counts.sample(&mut rng).round() as usize).clamp(1, spec.sessions_per_enrollment.max);
        let types = sample_types(&spec.type_chain, n_sessions, &mut rng);
        let sizes: Vec<usize> = types
            .iter()
            .map(|&t| rng.gen_range(PROFILES[t].turns.0..=PROFILES[t].turns.1))
            .collect();
        let mut topic_shift: Vec<bool> = (0..n_sessions)
            .map(|i| i > 0 && spec.topic_boundary_fraction > 0.0 && rng.gen_bool(spec.topic_boundary_fraction))
            .collect();
        // Undetectable shifts turn back into time boundaries.
        let mut block_start = 0;
        for i in 1..=n_sessions {
            if i == n_sessions || !topic_shift[i] {
                let block_turns: usize = sizes[block_start..i].iter().sum();
                if block_turns < spec.min_block_turns {
                    topic_shift[block_start + 1..i].iter_mut().for_each(|f| *f = false);
                }
                block_start = i;
            }
        }

        let mut boundaries = Vec::new();
        let mut topic_only = Vec::new();
        let mut question_no = 0u32;
        let mut clock = 0i64;
        let mut n_turns = 0usize;
        for (i, (&kind, &size)) in types.iter().zip(&sizes).enumerate() {
            let cap = semester - 1 - (n_sessions - i) as i64 * per_session;
            let within = |rng: &mut ChaCha8Rng| {
                let (lo, hi) = PROFILES[kind].gap;
                ((max_within as f64 * rng.gen_range(lo..=hi)).round() as i64).clamp(15, max_within)
            };
            let start = if i == 0 {
                timeline.session_start(kind, rng.gen_range(0..=7 * 86_400).min(cap), cap, &mut rng)
            } else if topic_shift[i] {
                clock + within(&mut rng)
            } else {
                let earliest = clock + spec.min_between_secs() + rng.gen_range(0..=SHORT_BREAK_SECS);
                timeline.session_start(kind, earliest, cap, &mut rng)
            };
            if i > 0 {
                boundaries.push(n_turns);
                if topic_shift[i] {
                    topic_only.push(n_turns);
                }
            }
            let vocab = topic_vocabulary(topic);
            let page = format!("topic-{topic}");
            topic += 1;
            clock = start;
            for j in 0..size {
                if j > 0 {
                    clock += within(&mut rng);
                }
                let prompt = compose_prompt(&vocab, kind, spec.engagement_cues, &mut question_no, &mut rng);
                let response: Vec<&str> = (0..12).map(|_| vocab[rng.gen_range(0..TOPIC_POOL)].as_str()).collect();
                turns.push(ConversationTurn {
                    turn_id: format!("{enrollment_id}-t{n_turns:05}"),
                    enrollment_id: enrollment_id.clone(),
                    class_id: class_id.clone(),
                    timestamp: origin + Duration::seconds(clock),
                    prompt_text: prompt.text,
                    response_text: response.join(" "),
                    page_context: Some(page.clone()),
                    has_image_upload: prompt.image,
                });
                n_turns += 1;
            }
        }
        debug_assert!(clock < semester);
        context.enrollments.insert(enrollment_id.clone(), student_id.clone());
        gold.push(GoldEnrollment {
            enrollment_id,
            student_id,
            class_id,
            n_turns,
            boundaries,
            topic_only,
            session_types: types.iter().map(|&t| SESSION_TYPES[t].to_string()).collect(),
        });
    }
    Ok(SynthCorpus { turns, context, gold })
}

/// Enrollment count expected to yield at least `target` turns, estimated
/// from a pilot corpus with the same spec.
pub fn enrollments_for_turns(spec: &SynthSpec, target: usize) -> Result<usize, SynthError> {
    let pilot_n = 500;
    let pilot = gen_corpus(&SynthSpec { n_enrollments: pilot_n, ..spec.clone() })?;
    let per = pilot.turns.len() as f64 / pilot_n as f64;
    Ok(((target as f64 / per) * 1.05).ceil() as usize)
}

/// Turn streams with their gold boundary sets, keyed by enrollment.
pub fn gen_segmented_logs(spec: &SynthSpec) -> Result<(Vec<ConversationTurn>, BTreeMap<String, BoundarySet>), SynthError> {
    let corpus = gen_corpus(spec)?;
    let gold = corpus.gold_boundaries();
    Ok((corpus.turns, gold))
}

/// Isotropic Gaussian blobs centered at `a·e_i` with `a = separation·σ/√2`,
/// so every pair of centers is `separation·σ` apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobSpec {
    pub seed: u64,
    pub n: usize,
    pub k: usize,
    pub dims: usize,
    pub sigma: f64,
    pub separation_sigmas: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec { seed: 0, n: 20_000, k: 4, dims: 10, sigma: 1.0, separation_sigmas: 10.0 }
    }
}

/// Row `i` belongs to blob `i mod k`; the labels are returned alongside.
pub fn gen_clustered_features(spec: &BlobSpec) -> Result<(FeatureMatrix, Vec<usize>), SynthError> {
    if spec.k == 0 || spec.k > spec.dims {
        return Err(SynthError::InvalidSpec(format!("need 1 <= k <= dims, got k={} dims={}", spec.k, spec.dims)));
    }
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let a = spec.separation_sigmas * spec.sigma / std::f64::consts::SQRT_2;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = Vec::with_capacity(spec.n * spec.dims);
    let labels: Vec<usize> = (0..spec.n).map(|i| i % spec.k).collect();
    for &label in &labels {
        for j in 0..spec.dims {
            let center = if j == label { a } else { 0.0 };
            data.push(center + noise.sample(&mut rng));
        }
    }
    let ids = (0..spec.n).map(|i| format!("p{i:06}")).collect();
    let columns = (1..=spec.dims).map(|j| format!("x{j}")).collect();
    let matrix = FeatureMatrix::new(ids, columns, data).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    Ok((matrix, labels))
}

/// Samples `n` sequences from `Start`. Every state reachable from `Start`
/// must have a defined row and a path to `End`.
pub fn gen_markov_sequences(matrix: &TransitionMatrix, n: usize, seed: u64) -> Result<Vec<StateSequence>, SynthError> {
    let states = &matrix.states;
    let m = states.len();
    let start = 0;
    let end = m - 1;
    for (i, row) in matrix.probs.iter().enumerate() {
        if let (Some(row), true) = (row, i != end) {
            check_distribution(&states[i], row)?;
            if row[start] > 0.0 {
                return Err(SynthError::InvalidSpec(format!("{} transitions into {START}", states[i])));
            }
        }
    }
    let edges = |i: usize| -> Vec<usize> {
        match (&matrix.probs[i], i == end) {
            (Some(row), false) => (0..m).filter(|&j| row[j] > 0.0).collect(),
            _ => Vec::new(),
        }
    };
    let mut reachable = BTreeSet::from([start]);
    let mut stack = vec![start];
    while let Some(i) = stack.pop() {
        for j in edges(i) {
            if reachable.insert(j) {
                stack.push(j);
            }
        }
    }
    let mut reaches_end = BTreeSet::from([end]);
    loop {
        let before = reaches_end.len();
        for i in 0..m {
            if !reaches_end.contains(&i) && edges(i).iter().any(|j| reaches_end.contains(j)) {
                reaches_end.insert(i);
            }
        }
        if reaches_end.len() == before {
            break;
        }
    }
    if let Some(&stuck) = reachable.iter().find(|i| !reaches_end.contains(i)) {
        return Err(SynthError::NonAbsorbing(states[stuck].clone()));
    }
    let samplers: Vec<Option<WeightedIndex<f64>>> = (0..m)
        .map(|i| match (&matrix.probs[i], reachable.contains(&i) && i != end) {
            (Some(row), true) => Some(WeightedIndex::new(row).expect("checked distribution")),
            _ => None,
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let mut labels = Vec::new();
        let mut current = start;
        loop {
            current = samplers[current].as_ref().expect("reachable rows are defined").sample(&mut rng);
            if current == end {
                break;
            }
            labels.push(states[current].clone());
            if labels.len() + 2 > MAX_SEQUENCE_STATES {
                return Err(SynthError::SequenceCapExceeded(MAX_SEQUENCE_STATES));
            }
        }
        out.push(StateSequence::new(format!("seq{s:06}"), labels));
    }
    debug_assert!(out.iter().all(|q| q.states.last().map(String::as_str) == Some(END)));
    Ok(out)
}
