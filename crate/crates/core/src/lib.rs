//! Engagement analytics for student–tutor conversation logs.
//!
//! The pipeline runs in two stages. Session level: [`ingest`] logs, split
//! them into sessions ([`sessionizer`]), compute engagement [`features`] and
//! [`cluster`] sessions into engagement types. Student level: order each
//! enrollment's session types into Start/End-bounded sequences and fit a
//! first-order Markov model ([`procmine`]). [`stats`] holds the
//! cluster-robust regressions used for subgroup comparisons, and [`synth`]
//! generates corpora with known ground truth.

pub mod cluster;
pub mod features;
pub mod ingest;
pub mod pipeline;
pub mod procmine;
pub mod sessionizer;
pub mod stats;
pub mod synth;
pub mod text;
