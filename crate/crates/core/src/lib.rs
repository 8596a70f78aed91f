//! Hierarchical evidence-chain pipeline for breast ultrasound diagnosis.
//!
//! A main agent localizes the lesion on the full image, the lesion view is
//! cropped, an attribute agent reports four structured attributes, and the
//! main agent integrates them into a malignancy label and BI-RADS category.
//! Around that episode loop the crate provides rollout rewards with
//! group-relative advantages, corrective trajectory refinement into SFT
//! corpora, and the evaluation metrics used to score runs.
//!
//! Model calls go through [`backends::Backend`], so every pipeline runs
//! against a chat-completions server, a scripted mock, a ground-truth oracle,
//! or a captured replay log.

pub mod backends;
pub mod cli;
pub mod datamodel;
pub mod distill;
pub mod exec;
pub mod imaging;
pub mod ingest;
pub mod metrics;
pub mod orchestrator;
pub mod protocol;
pub mod rewards;

pub use datamodel::{AttributeSet, AttributeSlot, BusCase, Diagnosis, Label, LesionBox, Malignancy, Split, Taxonomy};
pub use exec::ExecPolicy;
