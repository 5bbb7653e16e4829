//! First-order Markov process mining over session engagement types.
//!
//! Each enrollment becomes `[Start, type, type, ..., End]`, ordered by
//! session start time. Transition counts are pooled over all sequences and
//! row-normalized without smoothing; rows with no outgoing mass are left
//! undefined.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use chrono::{DateTime, FixedOffset};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sessionizer::Session;

pub const START: &str = "Start";
pub const END: &str = "End";

#[derive(Debug, Error, PartialEq)]
pub enum ProcmineError {
    #[error("session {0} has no engagement label")]
    UnlabeledSession(String),
    #[error("{assignments} assignments for {sessions} sessions")]
    LengthMismatch { assignments: usize, sessions: usize },
    #[error("no sequences to fit")]
    EmptyInput,
    #[error("state {0} is not part of the model")]
    UnknownState(String),
    #[error("label {0} collides with a reserved state name")]
    ReservedLabel(String),
    #[error("matrices have different state sets")]
    StateSetMismatch,
    #[error("malformed sequence for {0}: must be Start, at least one label, End")]
    MalformedSequence(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSequence {
    pub enrollment_id: String,
    /// Full state list including the Start and End markers.
    pub states: Vec<String>,
}

impl StateSequence {
    pub fn new(enrollment_id: impl Into<String>, labels: impl IntoIterator<Item = String>) -> Self {
        let mut states = vec![START.to_string()];
        states.extend(labels);
        states.push(END.to_string());
        StateSequence { enrollment_id: enrollment_id.into(), states }
    }

    pub fn labels(&self) -> &[String] {
        &self.states[1..self.states.len() - 1]
    }

    fn check(&self) -> Result<(), ProcmineError> {
        let n = self.states.len();
        let interior_ok = self.states[1..n.saturating_sub(1)].iter().all(|s| s != START && s != END);
        if n < 3 || self.states[0] != START || self.states[n - 1] != END || !interior_ok {
            return Err(ProcmineError::MalformedSequence(self.enrollment_id.clone()));
        }
        Ok(())
    }
}

/// What process mining needs to know about a session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionStamp {
    pub session_id: String,
    pub enrollment_id: String,
    pub start: DateTime<FixedOffset>,
}

impl From<&Session<'_>> for SessionStamp {
    fn from(s: &Session<'_>) -> Self {
        SessionStamp {
            session_id: s.session_id.clone(),
            enrollment_id: s.enrollment_id.to_string(),
            start: s.start(),
        }
    }
}

/// One sequence per enrollment, in enrollment-id order. Sessions are ordered
/// by start time, then session id.
pub fn build_sequences(
    assignments: &[usize],
    sessions: &[SessionStamp],
    label_map: &BTreeMap<usize, String>,
) -> Result<Vec<StateSequence>, ProcmineError> {
    if assignments.len() != sessions.len() {
        return Err(ProcmineError::LengthMismatch { assignments: assignments.len(), sessions: sessions.len() });
    }
    let mut by_enrollment: BTreeMap<&str, Vec<(&SessionStamp, &str)>> = BTreeMap::new();
    for (s, c) in sessions.iter().zip(assignments) {
        let label = label_map.get(c).ok_or_else(|| ProcmineError::UnlabeledSession(s.session_id.clone()))?;
        by_enrollment.entry(&s.enrollment_id).or_default().push((s, label));
    }
    Ok(by_enrollment
        .into_iter()
        .map(|(enrollment, mut items)| {
            items.sort_by(|a, b| a.0.start.cmp(&b.0.start).then_with(|| a.0.session_id.cmp(&b.0.session_id)));
            StateSequence::new(enrollment, items.into_iter().map(|(_, l)| l.to_string()))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    /// `Start`, the labels in model order, `End`.
    pub states: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    /// Row-normalized counts; `None` for rows without outgoing transitions.
    pub probs: Vec<Option<Vec<f64>>>,
}

fn state_list(labels: &[String]) -> Result<Vec<String>, ProcmineError> {
    if let Some(l) = labels.iter().find(|l| *l == START || *l == END) {
        return Err(ProcmineError::ReservedLabel(l.clone()));
    }
    let mut states = vec![START.to_string()];
    states.extend(labels.iter().cloned());
    states.push(END.to_string());
    Ok(states)
}

fn normalize(counts: &[Vec<u64>]) -> Vec<Option<Vec<f64>>> {
    counts
        .iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            (total > 0).then(|| row.iter().map(|&c| c as f64 / total as f64).collect())
        })
        .collect()
}

impl TransitionMatrix {
    pub fn from_counts(labels: &[String], counts: Vec<Vec<u64>>) -> Result<Self, ProcmineError> {
        let states = state_list(labels)?;
        let n = states.len();
        if counts.len() != n || counts.iter().any(|r| r.len() != n) {
            return Err(ProcmineError::StateSetMismatch);
        }
        let probs = normalize(&counts);
        Ok(TransitionMatrix { states, counts, probs })
    }

    /// A matrix given directly by probabilities (counts left at zero), e.g. a
    /// generating chain for synthetic data.
    pub fn from_probs(labels: &[String], probs: Vec<Option<Vec<f64>>>) -> Result<Self, ProcmineError> {
        let states = state_list(labels)?;
        let n = states.len();
        if probs.len() != n || probs.iter().flatten().any(|r| r.len() != n) {
            return Err(ProcmineError::StateSetMismatch);
        }
        Ok(TransitionMatrix { states, counts: vec![vec![0; n]; n], probs })
    }

    pub fn labels(&self) -> &[String] {
        &self.states[1..self.states.len() - 1]
    }

    pub fn index_of(&self, state: &str) -> Option<usize> {
        self.states.iter().position(|s| s == state)
    }

    pub fn prob(&self, from: &str, to: &str) -> Option<f64> {
        let (i, j) = (self.index_of(from)?, self.index_of(to)?);
        self.probs[i].as_ref().map(|r| r[j])
    }

    pub fn count(&self, from: &str, to: &str) -> Option<u64> {
        Some(self.counts[self.index_of(from)?][self.index_of(to)?])
    }

    pub fn total_transitions(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Probabilities as CSV: one row per from-state, one column per to-state.
    pub fn write_probs_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["from".to_string()];
        header.extend(self.states.iter().cloned());
        w.write_record(&header)?;
        for (state, row) in self.states.iter().zip(&self.probs) {
            let mut rec = vec![state.clone()];
            match row {
                Some(r) => rec.extend(r.iter().map(|p| p.to_string())),
                None => rec.extend(std::iter::repeat_n(String::new(), self.states.len())),
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_counts_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["from".to_string()];
        header.extend(self.states.iter().cloned());
        w.write_record(&header)?;
        for (state, row) in self.states.iter().zip(&self.counts) {
            let mut rec = vec![state.clone()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn count_sequence(index: &HashMap<&str, usize>, seq: &StateSequence, counts: &mut [Vec<u64>]) -> Result<(), ProcmineError> {
    seq.check()?;
    let ids = seq
        .states
        .iter()
        .map(|s| index.get(s.as_str()).copied().ok_or_else(|| ProcmineError::UnknownState(s.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    for w in ids.windows(2) {
        counts[w[0]][w[1]] += 1;
    }
    Ok(())
}

/// Population-level first-order Markov model over `labels`.
pub fn fit_fomm(sequences: &[StateSequence], labels: &[String]) -> Result<TransitionMatrix, ProcmineError> {
    if sequences.is_empty() {
        return Err(ProcmineError::EmptyInput);
    }
    let states = state_list(labels)?;
    let n = states.len();
    let index: HashMap<&str, usize> = states.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let counts = sequences
        .par_iter()
        .try_fold(
            || vec![vec![0u64; n]; n],
            |mut acc, seq| {
                count_sequence(&index, seq, &mut acc)?;
                Ok(acc)
            },
        )
        .try_reduce(
            || vec![vec![0u64; n]; n],
            |mut a, b| {
                for (ra, rb) in a.iter_mut().zip(b) {
                    for (x, y) in ra.iter_mut().zip(rb) {
                        *x += y;
                    }
                }
                Ok(a)
            },
        )?;
    TransitionMatrix::from_counts(labels, counts)
}

/// Labels in order of first appearance across sequences.
pub fn labels_in(sequences: &[StateSequence]) -> Vec<String> {
    let mut seen = Vec::new();
    for seq in sequences {
        for l in seq.labels() {
            if !seen.contains(l) {
                seen.push(l.clone());
            }
        }
    }
    seen
}

/// One matrix per group; groups without sequences are omitted. Sequences
/// with no group entry are skipped.
pub fn subgroup_fomm(
    sequences: &[StateSequence],
    grouping: &HashMap<String, String>,
    labels: &[String],
) -> Result<BTreeMap<String, TransitionMatrix>, ProcmineError> {
    let mut groups: BTreeMap<&str, Vec<StateSequence>> = BTreeMap::new();
    for seq in sequences {
        if let Some(g) = grouping.get(&seq.enrollment_id) {
            groups.entry(g).or_default().push(seq.clone());
        }
    }
    groups
        .into_iter()
        .map(|(g, seqs)| fit_fomm(&seqs, labels).map(|m| (g.to_string(), m)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixDiff {
    pub states: Vec<String>,
    /// `a - b` where both rows are defined.
    pub diff: Vec<Vec<Option<f64>>>,
    pub counts_a: Vec<Vec<u64>>,
    pub counts_b: Vec<Vec<u64>>,
}

pub fn matrix_diff(a: &TransitionMatrix, b: &TransitionMatrix) -> Result<MatrixDiff, ProcmineError> {
    if a.states != b.states {
        return Err(ProcmineError::StateSetMismatch);
    }
    let diff = a
        .probs
        .iter()
        .zip(&b.probs)
        .map(|(ra, rb)| match (ra, rb) {
            (Some(ra), Some(rb)) => ra.iter().zip(rb).map(|(x, y)| Some(x - y)).collect(),
            _ => vec![None; a.states.len()],
        })
        .collect();
    Ok(MatrixDiff { states: a.states.clone(), diff, counts_a: a.counts.clone(), counts_b: b.counts.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn labels(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn seq(enr: &str, l: &[&str]) -> StateSequence {
        StateSequence::new(enr, labels(l))
    }

    fn stamp(id: &str, enr: &str, minute: u32) -> SessionStamp {
        SessionStamp {
            session_id: id.into(),
            enrollment_id: enr.into(),
            start: FixedOffset::east_opt(0).unwrap().with_ymd_and_hms(2025, 3, 3, 9, minute, 0).unwrap(),
        }
    }

    #[test]
    fn sequences_ordered_by_start_then_id() {
        let map = BTreeMap::from([(0, "A".to_string()), (1, "B".to_string())]);
        let sessions = [stamp("e1#2", "e1", 30), stamp("e1#1", "e1", 10), stamp("e2#b", "e2", 5), stamp("e2#a", "e2", 5)];
        let seqs = build_sequences(&[1, 0, 1, 0], &sessions, &map).unwrap();
        assert_eq!(seqs, [seq("e1", &["A", "B"]), seq("e2", &["A", "B"])]);
        assert_eq!(
            build_sequences(&[2], &sessions[..1], &map),
            Err(ProcmineError::UnlabeledSession("e1#2".into()))
        );
        assert!(build_sequences(&[], &[], &map).unwrap().is_empty());
    }

    #[test]
    fn fomm_by_hand() {
        let m = fit_fomm(&[seq("e", &["A", "A", "B"])], &labels(&["A", "B"])).unwrap();
        assert_eq!(m.prob("A", "A"), Some(0.5));
        assert_eq!(m.prob("A", "B"), Some(0.5));
        assert_eq!(m.prob("Start", "A"), Some(1.0));
        assert_eq!(m.prob("B", "End"), Some(1.0));
        assert_eq!(m.prob("End", "A"), None);

        let m = fit_fomm(&[seq("e1", &["A"]), seq("e2", &["A"])], &labels(&["A"])).unwrap();
        assert_eq!(m.prob("Start", "A"), Some(1.0));
        assert_eq!(m.prob("A", "End"), Some(1.0));
        assert_eq!(m.count("Start", "A"), Some(2));

        assert_eq!(fit_fomm(&[], &labels(&["A"])), Err(ProcmineError::EmptyInput));
        assert_eq!(fit_fomm(&[seq("e", &["Z"])], &labels(&["A"])), Err(ProcmineError::UnknownState("Z".into())));
        assert_eq!(fit_fomm(&[seq("e", &[])], &labels(&["A"])), Err(ProcmineError::MalformedSequence("e".into())));
        assert!(matches!(fit_fomm(&[seq("e", &["A"])], &labels(&["End"])), Err(ProcmineError::ReservedLabel(_))));
    }

    #[test]
    fn subgroups_add_up() {
        let seqs = [seq("e1", &["A", "B"]), seq("e2", &["B"]), seq("e3", &["A", "A"])];
        let l = labels(&["A", "B"]);
        let one: HashMap<String, String> = seqs.iter().map(|s| (s.enrollment_id.clone(), "all".to_string())).collect();
        let groups = subgroup_fomm(&seqs, &one, &l).unwrap();
        assert_eq!(groups["all"], fit_fomm(&seqs, &l).unwrap());

        let split: HashMap<String, String> =
            [("e1", "x"), ("e2", "y"), ("e3", "x")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        let groups = subgroup_fomm(&seqs, &split, &l).unwrap();
        let pooled = fit_fomm(&seqs, &l).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(groups["x"].counts[i][j] + groups["y"].counts[i][j], pooled.counts[i][j]);
            }
        }
        let partial: HashMap<String, String> = [("e1".to_string(), "x".to_string())].into();
        assert_eq!(subgroup_fomm(&seqs, &partial, &l).unwrap().len(), 1);
    }

    #[test]
    fn diffs() {
        let l = labels(&["A", "B"]);
        let a = fit_fomm(&[seq("e", &["A", "B"])], &l).unwrap();
        let d = matrix_diff(&a, &a).unwrap();
        assert!(d.diff.iter().flatten().flatten().all(|v| *v == 0.0));
        assert!(d.diff[3].iter().all(Option::is_none));

        let p = |r: [f64; 4]| Some(r.to_vec());
        let x = TransitionMatrix::from_probs(&l, vec![p([0.0, 0.5, 0.5, 0.0]), p([0.0, 0.25, 0.25, 0.5]), p([0.0, 0.0, 0.0, 1.0]), None]).unwrap();
        let y = TransitionMatrix::from_probs(&l, vec![p([0.0, 0.5, 0.5, 0.0]), p([0.0, 0.25, 0.25, 0.5]), p([0.0, 0.0, 0.1, 0.9]), None]).unwrap();
        let d = matrix_diff(&x, &y).unwrap();
        for (i, row) in d.diff.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let expect = match (i, j) {
                    (3, _) => None,
                    (2, 2) => Some(-0.1),
                    (2, 3) => Some(1.0 - 0.9),
                    _ => Some(0.0),
                };
                assert_eq!(*v, expect);
            }
        }
        let other = fit_fomm(&[seq("e", &["A"])], &labels(&["A"])).unwrap();
        assert_eq!(matrix_diff(&a, &other), Err(ProcmineError::StateSetMismatch));
        let undefined_b = fit_fomm(&[seq("e", &["A"])], &l).unwrap();
        assert!(matrix_diff(&a, &undefined_b).unwrap().diff[2].iter().all(Option::is_none));
    }

    #[test]
    fn csv_layout() {
        let m = fit_fomm(&[seq("e", &["A", "A", "B"])], &labels(&["A", "B"])).unwrap();
        let mut buf = Vec::new();
        m.write_probs_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("from,Start,A,B,End"));
        assert!(text.contains("A,0,0.5,0.5,0\n"));
        assert!(text.ends_with("End,,,,\n"));
        let mut buf = Vec::new();
        m.write_counts_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("Start,0,1,0,0\n"));
    }

    fn sequences_strategy() -> impl Strategy<Value = Vec<StateSequence>> {
        prop::collection::vec(prop::collection::vec(0usize..3, 1..8), 1..30).prop_map(|seqs| {
            seqs.into_iter()
                .enumerate()
                .map(|(i, s)| StateSequence::new(format!("e{i}"), s.into_iter().map(|x| ["A", "B", "C"][x].to_string())))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn fitted_matrix_invariants(seqs in sequences_strategy()) {
            let m = fit_fomm(&seqs, &labels(&["A", "B", "C"])).unwrap();
            for row in m.probs.iter().flatten() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
            let expected: u64 = seqs.iter().map(|s| s.states.len() as u64 - 1).sum();
            prop_assert_eq!(m.total_transitions(), expected);
            let end = m.states.len() - 1;
            prop_assert!(m.counts.iter().all(|r| r[0] == 0));
            prop_assert!(m.counts[end].iter().all(|&c| c == 0));
            prop_assert!(m.probs[end].is_none());
        }
    }
}
