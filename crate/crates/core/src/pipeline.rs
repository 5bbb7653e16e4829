//! End-to-end runs: ingest, segment, featurize, cluster, label, mine, stats.
//!
//! Every CSV a run emits is a pure function of the inputs and the effective
//! config. Parallel stages collect in input order, so thread count does not
//! change a byte.

use std::collections::{BTreeMap, HashMap};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cluster::{run_clustering, ClusterConfig, ClusterOutcome, FeatureMatrix};
use crate::features::{featurize_with, FeatureError, Lexicon, LexiconConfig, SessionFeatures, CORE_FEATURES, EXTENDED_FEATURES};
use crate::ingest::{build_corpus, parse_turn_files, validate_corpus, ActivityEvent, ContextDocument, Corpus};
use crate::procmine::{build_sequences, fit_fomm, subgroup_fomm, SessionStamp, TransitionMatrix};
use crate::sessionizer::{
    boundaries_from_sessions, gold_from_page_context, masked_boundary_counts, segment_corpus, BoundaryCounts,
    HeuristicDetector, RemoteDetector, RemoteDetectorConfig, SegmentationConfig, Session, TopicDetector,
};
use crate::stats::{group_compare, proportion_ci, Clustering, StatsError, StatsRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Segment,
    Featurize,
    Cluster,
    Mine,
    Stats,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::Ingest => "ingest",
            Stage::Segment => "segment",
            Stage::Featurize => "featurize",
            Stage::Cluster => "cluster",
            Stage::Mine => "mine",
            Stage::Stats => "stats",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input not found: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("{stage} stage failed: {message}")]
    Stage { stage: Stage, message: String },
    #[error("cannot write {}: {source}", path.display())]
    Output { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// Config and input problems, as opposed to failures inside a stage.
    pub fn is_input_error(&self) -> bool {
        matches!(self, PipelineError::Config(_) | PipelineError::MissingInput(_))
    }
}

fn stage_err(stage: Stage) -> impl Fn(&dyn std::fmt::Display) -> PipelineError {
    move |e| PipelineError::Stage { stage, message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    /// JSON-lines turn files, read in parallel and merged.
    pub turns: Vec<PathBuf>,
    pub context: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubgroupConfig {
    pub selectivity: bool,
    pub discipline: bool,
}

impl Default for SubgroupConfig {
    fn default() -> Self {
        SubgroupConfig { selectivity: true, discipline: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: InputConfig,
    pub output_dir: PathBuf,
    /// Drop turns dated outside the semester before segmentation.
    pub drop_out_of_window: bool,
    pub segmentation: SegmentationConfig,
    pub detector: RemoteDetectorConfig,
    pub lexicon: LexiconConfig,
    /// Extra lexicon entries (TOML or JSON), appended to `lexicon`.
    pub lexicon_file: Option<PathBuf>,
    pub cluster: ClusterConfig,
    /// Cluster index (after size ordering) to engagement type name.
    pub label_map: BTreeMap<String, String>,
    pub subgroups: SubgroupConfig,
    pub ci_level: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            input: InputConfig::default(),
            output_dir: PathBuf::from("out"),
            drop_out_of_window: true,
            segmentation: SegmentationConfig::default(),
            detector: RemoteDetectorConfig::default(),
            lexicon: LexiconConfig::default(),
            lexicon_file: None,
            cluster: ClusterConfig::default(),
            label_map: BTreeMap::new(),
            subgroups: SubgroupConfig::default(),
            ci_level: 0.95,
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|_| PipelineError::MissingInput(path.to_path_buf()))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.input.turns.iter_mut().for_each(|p| resolve(base, p));
        if let Some(p) = config.input.context.as_mut() {
            resolve(base, p);
        }
        if let Some(p) = config.lexicon_file.as_mut() {
            resolve(base, p);
        }
        resolve(base, &mut config.output_dir);
        Ok(config)
    }

    pub fn label_map(&self) -> Result<BTreeMap<usize, String>, PipelineError> {
        self.label_map
            .iter()
            .map(|(k, v)| {
                k.parse::<usize>()
                    .map(|k| (k, v.clone()))
                    .map_err(|_| PipelineError::Config(format!("label_map key {k:?} is not a cluster index")))
            })
            .collect()
    }

    /// Checks everything that can be known before reading data.
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.input.turns.is_empty() {
            return Err(PipelineError::Config("no turn files given".into()));
        }
        let context = self.input.context.as_ref().ok_or_else(|| PipelineError::Config("no context file given".into()))?;
        for p in self.input.turns.iter().chain([context]).chain(self.lexicon_file.iter()) {
            if !p.is_file() {
                return Err(PipelineError::MissingInput(p.clone()));
            }
        }
        self.segmentation.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(PipelineError::Config(format!("ci_level {} outside (0, 1)", self.ci_level)));
        }
        let labels = self.label_map()?;
        let mut names: Vec<&String> = labels.values().collect();
        names.sort();
        names.dedup();
        if names.len() != labels.len() {
            return Err(PipelineError::Config("label_map names must be distinct".into()));
        }
        if let (Some(k), false) = (self.cluster.k, labels.is_empty()) {
            check_label_cover(&labels, k)?;
        }
        Ok(())
    }

    fn lexicon_config(&self) -> Result<LexiconConfig, PipelineError> {
        let mut config = self.lexicon.clone();
        if let Some(path) = &self.lexicon_file {
            let text = std::fs::read_to_string(path).map_err(|_| PipelineError::MissingInput(path.clone()))?;
            let extra: LexiconConfig = if path.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?
            } else {
                toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?
            };
            config.extend(extra);
        }
        Ok(config)
    }

    /// SHA-256 of the effective config as canonical JSON.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

fn check_label_cover(labels: &BTreeMap<usize, String>, k: usize) -> Result<(), PipelineError> {
    match (0..k).find(|i| !labels.contains_key(i)) {
        Some(i) => Err(PipelineError::Config(format!("label_map has no name for cluster {i} (k = {k})"))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationCheck {
    pub evaluable_gaps: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringSummary {
    pub k: usize,
    pub k_chosen_by: String,
    pub pca_components: usize,
    pub pca_cumulative_ratio: f64,
    pub stability_runs: usize,
    pub stability_mean_ari: f64,
    pub stability_sd_ari: f64,
    pub reference_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub turns_read: usize,
    pub lines_skipped: usize,
    pub turns_out_of_window: usize,
    pub turns_dropped: usize,
    pub duplicate_turn_ids: usize,
    pub empty_prompts: usize,
    pub enrollments: usize,
    pub sessions: usize,
    pub sessions_featurized: usize,
    pub sessions_excluded: usize,
    pub detector_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub config: PipelineConfig,
    pub through: Stage,
    pub detector: String,
    pub elbow_seed: u64,
    /// Stability runs use seeds `0..stability_runs`.
    pub stability_seeds: String,
    pub counts: Counts,
    pub segmentation_vs_page_context: Option<SegmentationCheck>,
    pub clustering: Option<ClusteringSummary>,
    pub warnings: Vec<String>,
    /// File name to SHA-256 of each artifact written before the manifest.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub manifest: Manifest,
    pub timings: Vec<StageTiming>,
    pub total_seconds: f64,
}

struct Artifacts {
    dir: PathBuf,
    hashes: BTreeMap<String, String>,
}

impl Artifacts {
    fn create(dir: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(dir).map_err(|source| PipelineError::Output { path: dir.to_path_buf(), source })?;
        Ok(Artifacts { dir: dir.to_path_buf(), hashes: BTreeMap::new() })
    }

    fn write(&mut self, name: &str, bytes: Vec<u8>) -> Result<(), PipelineError> {
        let path = self.dir.join(name);
        std::fs::write(&path, &bytes).map_err(|source| PipelineError::Output { path, source })?;
        self.hashes.insert(name.to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    fn csv<F>(&mut self, name: &str, fill: F) -> Result<(), PipelineError>
    where
        F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> csv::Result<()>,
    {
        let mut buf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            fill(&mut w).and_then(|_| w.flush().map_err(csv::Error::from)).map_err(|e| PipelineError::Output {
                path: self.dir.join(name),
                source: std::io::Error::other(e.to_string()),
            })?;
        }
        self.write(name, buf)
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// The rows behind a transition matrix file.
fn matrix_bytes(m: &TransitionMatrix, counts: bool) -> std::io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let w = BufWriter::new(&mut buf);
        let r = if counts { m.write_counts_csv(w) } else { m.write_probs_csv(w) };
        r.map_err(|e| std::io::Error::other(e.to_string()))?;
    }
    Ok(buf)
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn serde_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::new(),
    }
}

/// Two-way (student, class) clustering, or one-way by student when there is
/// a single class in scope.
fn regression_clustering<'a>(students: &'a [String], classes: &'a [String]) -> Clustering<'a, String> {
    let first = classes.first();
    if classes.iter().all(|c| Some(c) == first) {
        Clustering::OneWay(students)
    } else {
        Clustering::TwoWay(students, classes)
    }
}

#[derive(Serialize)]
struct SessionRow<'a> {
    session_id: &'a str,
    enrollment_id: &'a str,
    student_id: &'a str,
    class_id: &'a str,
    start: String,
    end: String,
    n_turns: usize,
    first_turn_id: &'a str,
    last_turn_id: &'a str,
}

#[derive(Serialize)]
struct ShareRow {
    subgroup: String,
    group: String,
    label: String,
    n: usize,
    proportion: f64,
    se: Option<f64>,
    lo: Option<f64>,
    hi: Option<f64>,
    df: Option<usize>,
}

/// Runs every stage up to and including `through`, writing artifacts and
/// `manifest.json` into the output directory.
pub fn run_pipeline(config: &PipelineConfig, through: Stage) -> Result<RunReport, PipelineError> {
    let started = Instant::now();
    config.validate()?;
    let lexicon = Lexicon::compile(&config.lexicon_config()?).map_err(|e| PipelineError::Config(e.to_string()))?;
    let labels_given = config.label_map()?;
    let mut out = Artifacts::create(&config.output_dir)?;
    let mut timings = Vec::new();
    let mut warnings = Vec::new();
    let mut counts = Counts::default();

    // Ingest.
    let t = Instant::now();
    let ingest = stage_err(Stage::Ingest);
    let parsed = parse_turn_files(&config.input.turns).map_err(|e| ingest(&e))?;
    let context_path = config.input.context.as_ref().expect("validated");
    let doc = ContextDocument::load(context_path).map_err(|e| ingest(&e))?;
    counts.turns_read = parsed.turns.len();
    counts.lines_skipped = parsed.skipped.len();
    if let Some(first) = parsed.skipped.first() {
        warnings.push(format!("skipped {} malformed lines (first: line {}: {})", parsed.skipped.len(), first.line, first.reason));
    }
    let (meta, events, calendar) = doc.split();
    let mut corpus = build_corpus(parsed.turns, meta, events, calendar).map_err(|e| ingest(&e))?;
    let report = validate_corpus(&corpus);
    counts.duplicate_turn_ids = report.duplicate_turn_ids.len();
    counts.turns_out_of_window = report.out_of_window.len();
    counts.empty_prompts = report.empty_prompts.len();
    if !report.duplicate_turn_ids.is_empty() {
        return Err(ingest(&format!(
            "{} duplicate turn ids, e.g. {}",
            report.duplicate_turn_ids.len(),
            report.duplicate_turn_ids[0]
        )));
    }
    if !report.empty_prompts.is_empty() {
        warnings.push(format!("{} turns have an empty prompt and no image", report.empty_prompts.len()));
    }
    if config.drop_out_of_window && !report.out_of_window.is_empty() {
        let before = corpus.turns().len();
        corpus = corpus.drop_out_of_window();
        counts.turns_dropped = before - corpus.turns().len();
        warnings.push(format!("dropped {} turns dated outside the semester", counts.turns_dropped));
    }
    counts.enrollments = corpus.n_enrollments();
    timings.push(StageTiming { stage: Stage::Ingest, seconds: t.elapsed().as_secs_f64(), rows: counts.turns_read });

    let mut manifest = Manifest {
        tool: "engage".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: config.hash(),
        config: config.clone(),
        through,
        detector: "heuristic".into(),
        elbow_seed: config.cluster.elbow_seed,
        stability_seeds: format!("0..{}", config.cluster.stability_runs),
        counts: Counts::default(),
        segmentation_vs_page_context: None,
        clustering: None,
        warnings: Vec::new(),
        artifacts: BTreeMap::new(),
    };

    if through >= Stage::Segment {
        run_stages(config, through, &corpus, &lexicon, labels_given, &mut out, &mut timings, &mut warnings, &mut counts, &mut manifest)?;
    }

    manifest.counts = counts;
    manifest.warnings = warnings;
    manifest.artifacts = out.hashes.clone();
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    out.write("manifest.json", json)?;
    Ok(RunReport { manifest, timings, total_seconds: started.elapsed().as_secs_f64() })
}

#[allow(clippy::too_many_arguments)]
fn run_stages(
    config: &PipelineConfig,
    through: Stage,
    corpus: &Corpus,
    lexicon: &Lexicon,
    labels_given: BTreeMap<usize, String>,
    out: &mut Artifacts,
    timings: &mut Vec<StageTiming>,
    warnings: &mut Vec<String>,
    counts: &mut Counts,
    manifest: &mut Manifest,
) -> Result<(), PipelineError> {
    // Segment.
    let t = Instant::now();
    let remote = RemoteDetector::from_config(&config.detector);
    let heuristic = HeuristicDetector::new(config.segmentation.heuristic_similarity_threshold);
    let detector: &dyn TopicDetector = match &remote {
        Some(r) if config.segmentation.topic_stage_enabled => {
            manifest.detector = format!("remote:{}", r.url());
            r
        }
        _ => &heuristic,
    };
    let segmentation = segment_corpus(corpus, &config.segmentation, detector);
    let sessions = segmentation.sessions;
    counts.sessions = sessions.len();
    counts.detector_fallbacks = segmentation.fallbacks.len();
    if let Some(first) = segmentation.fallbacks.first() {
        warnings.push(format!("topic detector fell back to the heuristic {} times (first: {first})", segmentation.fallbacks.len()));
    }
    manifest.segmentation_vs_page_context = page_context_check(corpus, &sessions);
    out.csv("sessions.csv", |w| {
        for s in &sessions {
            w.serialize(SessionRow {
                session_id: &s.session_id,
                enrollment_id: s.enrollment_id,
                student_id: corpus.context.student_of(s.enrollment_id),
                class_id: s.class_id,
                start: s.start().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                end: s.end().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                n_turns: s.len(),
                first_turn_id: &s.turns[0].turn_id,
                last_turn_id: &s.turns[s.len() - 1].turn_id,
            })?;
        }
        Ok(())
    })?;
    timings.push(StageTiming { stage: Stage::Segment, seconds: t.elapsed().as_secs_f64(), rows: corpus.turns().len() });
    if through < Stage::Featurize {
        return Ok(());
    }

    // Featurize.
    let t = Instant::now();
    let mut by_class: HashMap<&str, Vec<&ActivityEvent>> = HashMap::new();
    for e in &corpus.events {
        by_class.entry(e.class_id.as_str()).or_default().push(e);
    }
    let results: Vec<Result<SessionFeatures, FeatureError>> = sessions
        .par_iter()
        .map(|s| {
            let class = corpus.class(s.class_id).ok_or_else(|| FeatureError::UnknownClass {
                session_id: s.session_id.clone(),
                class_id: s.class_id.to_string(),
            })?;
            let events = by_class.get(s.class_id).map(Vec::as_slice).unwrap_or(&[]);
            featurize_with(s, &corpus.calendar, &class.class_schedule, events, lexicon)
        })
        .collect();
    let mut kept: Vec<(&Session<'_>, SessionFeatures)> = Vec::with_capacity(sessions.len());
    let mut excluded = Vec::new();
    for (s, r) in sessions.iter().zip(results) {
        match r {
            Ok(f) => kept.push((s, f)),
            Err(FeatureError::SessionOutsideCalendar { session_id, .. }) => excluded.push(session_id),
            Err(e) => return Err(stage_err(Stage::Featurize)(&e)),
        }
    }
    counts.sessions_featurized = kept.len();
    counts.sessions_excluded = excluded.len();
    if !excluded.is_empty() {
        warnings.push(format!(
            "{} sessions outside the semester calendar were excluded (first: {})",
            excluded.len(),
            excluded[0]
        ));
    }
    out.csv("features.csv", |w| {
        let header: Vec<&str> = ["session_id"].into_iter().chain(CORE_FEATURES).chain(EXTENDED_FEATURES).collect();
        w.write_record(&header)?;
        for (s, f) in &kept {
            let mut rec = vec![s.session_id.clone()];
            rec.extend(f.core.to_array().iter().map(|v| num(*v)));
            let ext = f.extended.as_ref().map(|e| e.to_array()).unwrap_or([None; 4]);
            rec.extend(ext.iter().map(|v| v.map(num).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        Ok(())
    })?;
    timings.push(StageTiming { stage: Stage::Featurize, seconds: t.elapsed().as_secs_f64(), rows: sessions.len() });
    if through < Stage::Cluster {
        return Ok(());
    }

    // Cluster and label.
    let t = Instant::now();
    let cluster_fail = stage_err(Stage::Cluster);
    let ids: Vec<String> = kept.iter().map(|(s, _)| s.session_id.clone()).collect();
    let data: Vec<f64> = kept.iter().flat_map(|(_, f)| f.core.to_array()).collect();
    let raw = FeatureMatrix::new(ids, CORE_FEATURES.map(String::from).to_vec(), data).map_err(|e| cluster_fail(&e))?;
    let outcome = run_clustering(&raw, &config.cluster).map_err(|e| cluster_fail(&e))?;
    let k = outcome.model.kmeans.k;
    let labels = if labels_given.is_empty() {
        (0..k).map(|i| (i, format!("type{i}"))).collect()
    } else {
        check_label_cover(&labels_given, k)?;
        labels_given
    };
    warnings.extend(outcome.warnings.iter().cloned());
    manifest.clustering = Some(ClusteringSummary {
        k,
        k_chosen_by: if outcome.elbow.is_some() { "elbow".into() } else { "config".into() },
        pca_components: outcome.model.pca.n_components(),
        pca_cumulative_ratio: outcome.model.pca.cumulative_ratio(),
        stability_runs: outcome.stability.n_runs,
        stability_mean_ari: outcome.stability.mean_ari,
        stability_sd_ari: outcome.stability.sd_ari,
        reference_seed: outcome.stability.reference_seed,
    });
    write_cluster_artifacts(out, &kept, &outcome, &labels)?;
    timings.push(StageTiming { stage: Stage::Cluster, seconds: t.elapsed().as_secs_f64(), rows: kept.len() });
    if through < Stage::Mine {
        return Ok(());
    }

    // Mine.
    let t = Instant::now();
    let mine_fail = stage_err(Stage::Mine);
    let stamps: Vec<SessionStamp> = kept.iter().map(|(s, _)| SessionStamp::from(*s)).collect();
    let sequences = build_sequences(&outcome.assignments, &stamps, &labels).map_err(|e| mine_fail(&e))?;
    let label_list: Vec<String> = labels.values().cloned().collect();
    let pooled = fit_fomm(&sequences, &label_list).map_err(|e| mine_fail(&e))?;
    let dir = out.dir.clone();
    let io = |name: &str| {
        let path = dir.join(name);
        move |source| PipelineError::Output { path, source }
    };
    out.write("transitions.csv", matrix_bytes(&pooled, false).map_err(io("transitions.csv"))?)?;
    out.write("transition_counts.csv", matrix_bytes(&pooled, true).map_err(io("transition_counts.csv"))?)?;
    out.csv("sequences.csv", |w| {
        w.write_record(["enrollment_id", "student_id", "n_sessions", "sequence"])?;
        for q in &sequences {
            w.write_record([
                q.enrollment_id.as_str(),
                corpus.context.student_of(&q.enrollment_id),
                &q.labels().len().to_string(),
                &q.states.join(">"),
            ])?;
        }
        Ok(())
    })?;
    let enrollment_class: HashMap<&str, &str> = kept.iter().map(|(s, _)| (s.enrollment_id, s.class_id)).collect();
    for (dim, grouping) in subgroup_dimensions(config, corpus, &enrollment_class) {
        let grouping: HashMap<String, String> = grouping;
        let matrices = subgroup_fomm(&sequences, &grouping, &label_list).map_err(|e| mine_fail(&e))?;
        for (group, m) in matrices {
            let probs = format!("transitions_{dim}_{}.csv", slug(&group));
            let cnts = format!("transition_counts_{dim}_{}.csv", slug(&group));
            out.write(&probs, matrix_bytes(&m, false).map_err(io(&probs))?)?;
            out.write(&cnts, matrix_bytes(&m, true).map_err(io(&cnts))?)?;
        }
    }
    timings.push(StageTiming { stage: Stage::Mine, seconds: t.elapsed().as_secs_f64(), rows: sequences.len() });
    if through < Stage::Stats {
        return Ok(());
    }

    // Stats.
    let t = Instant::now();
    let rows = run_stats(config, corpus, &kept, &outcome.assignments, &labels, &enrollment_class, out, warnings)?;
    timings.push(StageTiming { stage: Stage::Stats, seconds: t.elapsed().as_secs_f64(), rows });
    Ok(())
}

fn page_context_check(corpus: &Corpus, sessions: &[Session<'_>]) -> Option<SegmentationCheck> {
    let mut total = BoundaryCounts::default();
    let mut evaluable = 0;
    let mut i = 0;
    for (enrollment, turns) in corpus.enrollments() {
        let mut j = i;
        while j < sessions.len() && sessions[j].enrollment_id == enrollment {
            j += 1;
        }
        let gold = gold_from_page_context(turns);
        evaluable += gold.evaluable_gaps().count();
        let predicted = boundaries_from_sessions(&sessions[i..j]);
        if let Ok(c) = masked_boundary_counts(&predicted, &gold) {
            total += c;
        }
        i = j;
    }
    (evaluable > 0).then(|| {
        let s = total.score();
        SegmentationCheck { evaluable_gaps: evaluable, precision: s.precision, recall: s.recall, f1: s.f1 }
    })
}

fn subgroup_dimensions(
    config: &PipelineConfig,
    corpus: &Corpus,
    enrollment_class: &HashMap<&str, &str>,
) -> Vec<(&'static str, HashMap<String, String>)> {
    let mut dims = Vec::new();
    if config.subgroups.selectivity {
        let g = enrollment_class
            .iter()
            .filter_map(|(e, c)| corpus.context.selectivity_of_class(c).map(|s| (e.to_string(), serde_name(&s))))
            .collect();
        dims.push(("selectivity", g));
    }
    if config.subgroups.discipline {
        let g = enrollment_class
            .iter()
            .filter_map(|(e, c)| corpus.class(c).map(|m| (e.to_string(), serde_name(&m.discipline))))
            .collect();
        dims.push(("discipline", g));
    }
    dims
}

fn write_cluster_artifacts(
    out: &mut Artifacts,
    kept: &[(&Session<'_>, SessionFeatures)],
    outcome: &ClusterOutcome,
    labels: &BTreeMap<usize, String>,
) -> Result<(), PipelineError> {
    let model = serde_json::to_vec_pretty(&outcome.model).expect("model serializes");
    out.write("cluster_model.json", model)?;
    let pca = &outcome.model.pca;
    out.csv("pca.csv", |w| {
        w.write_record(["component", "explained_variance_ratio", "eigenvalue", "retained"])?;
        let retained = pca.n_components();
        for (i, r) in pca.full_spectrum_ratios.iter().enumerate() {
            let eig = pca.eigenvalues.get(i).map(|e| num(*e)).unwrap_or_default();
            w.write_record([format!("pc{}", i + 1), num(*r), eig, (i < retained).to_string()])?;
        }
        Ok(())
    })?;
    out.csv("assignments.csv", |w| {
        w.write_record(["session_id", "cluster", "label"])?;
        for ((s, _), c) in kept.iter().zip(&outcome.assignments) {
            w.write_record([s.session_id.as_str(), &c.to_string(), &labels[c]])?;
        }
        Ok(())
    })?;
    out.csv("stability.csv", |w| {
        w.write_record(["seed", "inertia", "ari_vs_reference", "reference"])?;
        for r in &outcome.stability.runs {
            let is_ref = r.seed == outcome.stability.reference_seed;
            w.write_record([r.seed.to_string(), num(r.inertia), num(r.ari_vs_reference), is_ref.to_string()])?;
        }
        Ok(())
    })?;
    if let Some(e) = &outcome.elbow {
        out.csv("elbow.csv", |w| {
            w.write_record(["k", "inertia", "chosen"])?;
            for (k, i) in &e.inertias {
                w.write_record([k.to_string(), num(*i), (*k == e.chosen_k).to_string()])?;
            }
            Ok(())
        })?;
    }
    let table = &outcome.centroids;
    out.csv("centroids.csv", |w| {
        let header: Vec<&str> = ["cluster", "label", "size"].into_iter().chain(table.columns.iter().map(String::as_str)).collect();
        w.write_record(&header)?;
        for (c, (size, means)) in table.sizes.iter().zip(&table.means).enumerate() {
            let mut rec = vec![c.to_string(), labels[&c].clone(), size.to_string()];
            rec.extend(means.iter().map(|v| num(*v)));
            w.write_record(&rec)?;
        }
        Ok(())
    })
}

#[allow(clippy::too_many_arguments)]
fn run_stats(
    config: &PipelineConfig,
    corpus: &Corpus,
    kept: &[(&Session<'_>, SessionFeatures)],
    assignments: &[usize],
    labels: &BTreeMap<usize, String>,
    enrollment_class: &HashMap<&str, &str>,
    out: &mut Artifacts,
    warnings: &mut Vec<String>,
) -> Result<usize, PipelineError> {
    let students: Vec<String> = kept.iter().map(|(s, _)| corpus.context.student_of(s.enrollment_id).to_string()).collect();
    let classes: Vec<String> = kept.iter().map(|(s, _)| s.class_id.to_string()).collect();
    let n = kept.len();

    // Session-level group of each subgroup dimension.
    let mut dims: Vec<(&str, Vec<Option<String>>)> = vec![("all", vec![Some("all".to_string()); n])];
    for (dim, grouping) in subgroup_dimensions(config, corpus, enrollment_class) {
        let g = kept.iter().map(|(s, _)| grouping.get(s.enrollment_id).cloned()).collect();
        dims.push((dim, g));
    }

    let mut shares = Vec::new();
    for (dim, groups) in &dims {
        let names: std::collections::BTreeSet<&String> = groups.iter().flatten().collect();
        for group in names {
            let idx: Vec<usize> = (0..n).filter(|&i| groups[i].as_ref() == Some(group)).collect();
            let st: Vec<String> = idx.iter().map(|&i| students[i].clone()).collect();
            let cl: Vec<String> = idx.iter().map(|&i| classes[i].clone()).collect();
            for (c, label) in labels {
                let values: Vec<f64> = idx.iter().map(|&i| (assignments[i] == *c) as u8 as f64).collect();
                let proportion = values.iter().sum::<f64>() / values.len() as f64;
                let ci = proportion_ci(&values, &regression_clustering(&st, &cl), config.ci_level)
                    .or_else(|_| proportion_ci(&values, &Clustering::OneWay(&st), config.ci_level));
                let row = match ci {
                    Ok(ci) => ShareRow {
                        subgroup: dim.to_string(),
                        group: group.clone(),
                        label: label.clone(),
                        n: ci.n,
                        proportion: ci.proportion,
                        se: Some(ci.se),
                        lo: Some(ci.lo),
                        hi: Some(ci.hi),
                        df: Some(ci.df),
                    },
                    Err(e) => {
                        warnings.push(format!("no CI for {label} share in {dim}={group}: {e}"));
                        ShareRow {
                            subgroup: dim.to_string(),
                            group: group.clone(),
                            label: label.clone(),
                            n: values.len(),
                            proportion,
                            se: None,
                            lo: None,
                            hi: None,
                            df: None,
                        }
                    }
                };
                shares.push(row);
            }
        }
    }
    out.csv("shares.csv", |w| shares.iter().try_for_each(|r| w.serialize(r)))?;

    let mut outcomes: Vec<(String, Vec<f64>)> = labels
        .iter()
        .map(|(c, label)| (format!("share:{label}"), assignments.iter().map(|a| (a == c) as u8 as f64).collect()))
        .collect();
    for (j, name) in CORE_FEATURES.iter().enumerate() {
        outcomes.push((format!("feature:{name}"), kept.iter().map(|(_, f)| f.core.to_array()[j]).collect()));
    }
    let contrasts: [(&str, &str, &str); 2] =
        [("selectivity", "HighlySelective", "LessSelective"), ("discipline", "STEM", "NonSTEM")];
    let mut rows = Vec::new();
    for (dim, group_1, group_0) in contrasts {
        let Some((_, groups)) = dims.iter().find(|(d, _)| *d == dim) else { continue };
        let idx: Vec<usize> = (0..n)
            .filter(|&i| matches!(groups[i].as_deref(), Some(g) if g == group_1 || g == group_0))
            .collect();
        let flags: Vec<bool> = idx.iter().map(|&i| groups[i].as_deref() == Some(group_1)).collect();
        let st: Vec<String> = idx.iter().map(|&i| students[i].clone()).collect();
        let cl: Vec<String> = idx.iter().map(|&i| classes[i].clone()).collect();
        let contrast = format!("{group_1}-{group_0}");
        for (name, values) in &outcomes {
            let v: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
            match group_compare(&v, &flags, &regression_clustering(&st, &cl)) {
                Ok(c) => rows.push(StatsRow::from_comparison(name, &contrast, &c)),
                Err(e @ (StatsError::EmptyGroup(_) | StatsError::SingleCluster(_) | StatsError::RankDeficient)) => {
                    warnings.push(format!("skipped {name} for {contrast}: {e}"));
                }
                Err(e) => return Err(stage_err(Stage::Stats)(&e)),
            }
        }
    }
    out.csv("stats.csv", |w| rows.iter().try_for_each(|r| w.serialize(r)))?;
    Ok(rows.len() + shares.len())
}
