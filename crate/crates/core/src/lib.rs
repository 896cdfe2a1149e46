//! Symbolic reasoning distillation for fix-type classification of buggy C
//! programs.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`corpus`] generates short C programs with one injected bug each, runs
//!    them through a small interpreter to record the failing behavior, and
//!    splits them into train/validation partitions.
//! 2. [`teacher`] attaches supervision: a fix-type label plus a short trace of
//!    symbolic reasoning tags, either from the rule-based oracle or from an
//!    external model endpoint, discarding anything that fails the tag schema.
//! 3. [`encode`] turns program text and behavior into fixed-length id
//!    sequences.
//! 4. [`student`] and [`trainer`] train a compact classifier on top of
//!    [`tinylearn`], with or without the auxiliary tag objective.
//! 5. [`metrics`] and [`structured`] compute the evaluation suite, including
//!    the JSON-target study.

pub mod config;
pub mod corpus;
pub mod encode;
pub mod metrics;
pub mod structured;
pub mod student;
pub mod teacher;
pub mod tinylearn;
pub mod trainer;

pub use corpus::{Dataset, Example, FixType, Split};
pub use teacher::{ReasoningTag, ReasoningTrace, TeacherSupervision};
