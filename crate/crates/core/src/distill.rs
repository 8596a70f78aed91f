//! Corrective self-distillation.
//!
//! [`Refiner::refine`] swaps the predicted box for the ground-truth box and,
//! when the predicted diagnosis is wrong, asks the rewriter for a rationale
//! that reaches the correct one. [`build_sft_corpus`] turns the results into
//! multi-turn supervised examples.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{Attachment, Backend, BackendError, BackendRequest, SamplingParams};
use crate::datamodel::{BusCase, Diagnosis, LesionBox, Taxonomy};
use crate::exec::ExecPolicy;
use crate::imaging::{resize_to_fit, ResizeBounds};
use crate::orchestrator::{EpisodeScope, ImageSource, Trajectory, FULL_IMAGE};
use crate::protocol::{
    self, parse_output, render_box_answer, render_diagnosis_answer, AgentRole, BoxCoords, ImageRef, Payload,
    PromptContext, Templates,
};

pub const SFT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_REWRITE_RETRIES: u32 = 3;

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum RefineError {
    #[error("trajectory cannot be refined: {0}")]
    NotRefinable(String),
    #[error("image: {0}")]
    Image(String),
    #[error("rewriter prompt: {0}")]
    Prompt(String),
    #[error("rewriter backend: {0}")]
    Backend(BackendError),
    #[error("rewrite rejected after {attempts} attempt(s): {reason}")]
    RewriteRejected { attempts: u32, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedTrajectory {
    pub trajectory_id: String,
    pub original: Trajectory,
    /// The ground-truth box in the episode's resized frame.
    pub corrected_box: LesionBox,
    pub final_rationale: String,
    pub final_diagnosis: Diagnosis,
    pub rewritten: bool,
    pub rewriter_output: Option<String>,
    /// Rewriter calls made, including retries.
    pub rewrite_attempts: u32,
}

impl RefinedTrajectory {
    pub fn case(&self) -> &BusCase {
        &self.original.case
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropRecord {
    pub trajectory_id: String,
    pub case_id: String,
    pub sample_index: u32,
    pub reason: RefineError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum RefineOutcome {
    Refined(Box<RefinedTrajectory>),
    Dropped(DropRecord),
}

pub struct Refiner {
    pub taxonomy: Taxonomy,
    pub templates: Templates,
    pub rewriter: Arc<dyn Backend>,
    pub images: Arc<dyn ImageSource>,
    pub bounds: ResizeBounds,
    /// Extra attempts after a rejected rewrite.
    pub max_retries: u32,
    pub sampling: SamplingParams,
}

impl Refiner {
    pub fn new(rewriter: Arc<dyn Backend>, images: Arc<dyn ImageSource>) -> Self {
        Self {
            taxonomy: Taxonomy::default(),
            templates: Templates::builtin(),
            rewriter,
            images,
            bounds: ResizeBounds::default(),
            max_retries: DEFAULT_REWRITE_RETRIES,
            sampling: SamplingParams::greedy(),
        }
    }

    pub fn refine(&self, t: &Trajectory) -> Result<RefinedTrajectory, RefineError> {
        let chain = &t.chain;
        if chain.mode.scope != EpisodeScope::Full || chain.format_valid.integrator.is_none() {
            return Err(RefineError::NotRefinable("no integrator step".into()));
        }
        let gt = &t.case.gt_diagnosis;
        let original_rationale = chain.rationales.integrator.clone().unwrap_or_default();
        let mut out = RefinedTrajectory {
            trajectory_id: t.trajectory_id.clone(),
            original: t.clone(),
            corrected_box: t.gt_box_resized,
            final_rationale: original_rationale.clone(),
            final_diagnosis: gt.clone(),
            rewritten: false,
            rewriter_output: None,
            rewrite_attempts: 0,
        };
        if chain.diagnosis.as_ref() == Some(gt) {
            return Ok(out);
        }

        let native = self.images.load(&t.case).map_err(RefineError::Image)?;
        let (full, _) = resize_to_fit(&native, self.bounds);
        if (full.width(), full.height()) != (chain.resized_width, chain.resized_height) {
            return Err(RefineError::Image(format!(
                "resized image is {}x{}, episode ran at {}x{}",
                full.width(),
                full.height(),
                chain.resized_width,
                chain.resized_height
            )));
        }
        let ctx = PromptContext {
            full_image: Some(ImageRef { name: FULL_IMAGE.into(), width: full.width(), height: full.height() }),
            attributes: chain.attributes.clone(),
            original_rationale: Some(original_rationale),
            predicted_diagnosis: chain.diagnosis.clone(),
            gt_diagnosis: Some(gt.clone()),
            ..Default::default()
        };
        let prompt = protocol::render_prompt(AgentRole::Rewriter, &ctx, &self.templates, &self.taxonomy)
            .map_err(|e| RefineError::Prompt(e.to_string()))?;
        let images = [Attachment { name: FULL_IMAGE.into(), image: Arc::new(full) }];

        let mut reason = String::new();
        for attempt in 0..=self.max_retries {
            let req = BackendRequest::from_prompt(&t.case.case_id, &prompt, &images, self.sampling, vec![attempt])
                .map_err(RefineError::Backend)?;
            let text = self
                .rewriter
                .invoke(&req)
                .map_err(RefineError::Backend)?
                .completions
                .into_iter()
                .next()
                .map(|c| c.text)
                .unwrap_or_default();
            out.rewrite_attempts = attempt + 1;
            let p = parse_output(AgentRole::Rewriter, &text, &self.taxonomy);
            match (&p.payload, p.format_valid) {
                (Some(Payload::Rewrite { rationale, answer }), true) if &answer.diagnosis == gt => {
                    out.final_rationale = rationale.clone();
                    out.rewritten = true;
                    out.rewriter_output = Some(text);
                    return Ok(out);
                }
                (Some(Payload::Rewrite { answer, .. }), true) => {
                    reason = format!("rewrite concluded {} instead of {gt}", answer.diagnosis);
                }
                _ => reason = p.diagnostics.join("; "),
            }
            log::debug!("{}: rewrite attempt {} rejected: {reason}", t.trajectory_id, attempt + 1);
        }
        Err(RefineError::RewriteRejected { attempts: self.max_retries + 1, reason })
    }

    /// Refines every trajectory; failures become drop records.
    pub fn refine_all(&self, trajectories: &[Trajectory], policy: ExecPolicy) -> Vec<RefineOutcome> {
        policy.map(trajectories, |t| match self.refine(t) {
            Ok(r) => RefineOutcome::Refined(Box::new(r)),
            Err(reason) => RefineOutcome::Dropped(DropRecord {
                trajectory_id: t.trajectory_id.clone(),
                case_id: t.case.case_id.clone(),
                sample_index: t.chain.sample_index,
                reason,
            }),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageRole {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftMessage {
    pub role: MessageRole,
    pub content: String,
    pub images: Vec<ImageRef>,
    /// Supervised turn.
    pub train: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub schema_version: u32,
    pub example_id: String,
    pub case_id: String,
    pub dataset: String,
    pub sample_index: u32,
    /// Relative to the image root; the trainer resizes to the image dims in
    /// `messages`.
    pub image_path: String,
    pub rewritten: bool,
    pub messages: Vec<SftMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    /// Examples in the corpus.
    pub total: usize,
    pub rewritten: usize,
    pub dropped: usize,
    pub drops: Vec<DropSummary>,
    /// SHA-256 of the corpus file bytes.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropSummary {
    pub trajectory_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DistillError {
    #[error("internal: example {example_id} violates the answer grammar: {detail}")]
    GrammarViolation { example_id: String, detail: String },
    #[error("prompt: {0}")]
    Prompt(String),
}

fn example_for(r: &RefinedTrajectory, taxonomy: &Taxonomy, templates: &Templates) -> Result<SftExample, DistillError> {
    let t = &r.original;
    let case = &t.case;
    let chain = &t.chain;
    let full = ImageRef { name: FULL_IMAGE.into(), width: chain.resized_width, height: chain.resized_height };
    let prompt = |role, ctx: &PromptContext| {
        protocol::render_prompt(role, ctx, templates, taxonomy).map_err(|e| DistillError::Prompt(e.to_string()))
    };
    let loc = prompt(AgentRole::MainLocalizer, &PromptContext { full_image: Some(full.clone()), ..Default::default() })?;
    let integ = prompt(
        AgentRole::MainIntegrator,
        &PromptContext {
            full_image: Some(full.clone()),
            attributes: Some(case.gt_attributes.clone()),
            ..Default::default()
        },
    )?;
    let b = r.corrected_box;
    let coords = BoxCoords { x1: b.x1 as u32, y1: b.y1 as u32, x2: b.x2 as u32, y2: b.y2 as u32 };
    let box_turn = render_box_answer(chain.rationales.localizer.as_deref().unwrap_or(""), &coords);
    let diag_turn = render_diagnosis_answer(&r.final_rationale, &r.final_diagnosis, None);

    let violation = |detail: String| DistillError::GrammarViolation { example_id: r.trajectory_id.clone(), detail };
    let pb = parse_output(AgentRole::MainLocalizer, &box_turn, taxonomy);
    if !pb.format_valid || pb.box_coords() != Some(coords) {
        return Err(violation(format!("box turn: {}", pb.diagnostics.join("; "))));
    }
    let pd = parse_output(AgentRole::MainIntegrator, &diag_turn, taxonomy);
    if !pd.format_valid || pd.diagnosis().map(|d| &d.diagnosis) != Some(&case.gt_diagnosis) {
        return Err(violation(format!("diagnosis turn: {}", pd.diagnostics.join("; "))));
    }

    let user = |p: protocol::Prompt| SftMessage { role: MessageRole::User, content: p.text, images: p.images, train: false };
    let assistant = |content| SftMessage { role: MessageRole::Assistant, content, images: vec![], train: true };
    Ok(SftExample {
        schema_version: SFT_SCHEMA_VERSION,
        example_id: r.trajectory_id.clone(),
        case_id: case.case_id.clone(),
        dataset: case.dataset.clone(),
        sample_index: chain.sample_index,
        image_path: case.image_path.clone(),
        rewritten: r.rewritten,
        messages: vec![user(loc), assistant(box_turn), user(integ), assistant(diag_turn)],
    })
}

/// Builds the corpus in `(case_id, sample_index)` order.
pub fn build_sft_corpus(
    outcomes: &[RefineOutcome],
    taxonomy: &Taxonomy,
    templates: &Templates,
) -> Result<(Vec<SftExample>, CorpusManifest), DistillError> {
    let mut refined: Vec<&RefinedTrajectory> = Vec::new();
    let mut drops: Vec<&DropRecord> = Vec::new();
    for o in outcomes {
        match o {
            RefineOutcome::Refined(r) => refined.push(r),
            RefineOutcome::Dropped(d) => drops.push(d),
        }
    }
    refined.sort_by(|a, b| {
        (&a.case().case_id, a.original.chain.sample_index).cmp(&(&b.case().case_id, b.original.chain.sample_index))
    });
    drops.sort_by(|a, b| (&a.case_id, a.sample_index).cmp(&(&b.case_id, b.sample_index)));

    let examples = refined
        .iter()
        .map(|r| example_for(r, taxonomy, templates))
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = CorpusManifest {
        schema_version: SFT_SCHEMA_VERSION,
        total: examples.len(),
        rewritten: examples.iter().filter(|e| e.rewritten).count(),
        dropped: drops.len(),
        drops: drops
            .iter()
            .map(|d| DropSummary { trajectory_id: d.trajectory_id.clone(), reason: d.reason.to_string() })
            .collect(),
        sha256: hex::encode(Sha256::digest(corpus_bytes(&examples))),
    };
    Ok((examples, manifest))
}

/// The corpus file contents: one JSON object per line.
pub fn corpus_bytes(examples: &[SftExample]) -> Vec<u8> {
    let mut out = Vec::new();
    for e in examples {
        serde_json::to_writer(&mut out, e).expect("example serializes");
        out.push(b'\n');
    }
    out
}

pub fn write_corpus(examples: &[SftExample], manifest: &CorpusManifest, corpus: &Path, manifest_path: &Path) -> std::io::Result<()> {
    std::fs::write(corpus, corpus_bytes(examples))?;
    let mut f = std::fs::File::create(manifest_path)?;
    serde_json::to_writer_pretty(&mut f, manifest)?;
    f.write_all(b"\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{Backends, OracleBackend, ScriptedBackend};
    use crate::datamodel::{AttributeSet, Malignancy, Split};
    use crate::orchestrator::{EpisodeMode, Pipeline, SyntheticImageSource};

    fn case(id: &str, mal: Malignancy, birads: &str) -> BusCase {
        BusCase {
            case_id: id.into(),
            image_path: format!("{id}.png"),
            dataset: "BUSI".into(),
            split: Split::Train,
            gt_box: LesionBox::new(120.0, 80.0, 360.0, 300.0, 640, 480).unwrap(),
            gt_attributes: AttributeSet::new("hypoechoic", "absent", "clear", "smooth"),
            gt_diagnosis: Diagnosis::new(mal, birads),
        }
    }

    /// Trajectory from a scripted main agent predicting `pred` with box `b`.
    fn trajectory(c: &BusCase, b: BoxCoords, pred: &Diagnosis) -> Trajectory {
        let m = ScriptedBackend::new()
            .with_text(&c.case_id, AgentRole::MainLocalizer, None, render_box_answer("Lesion left of centre.", &b))
            .with_text(&c.case_id, AgentRole::MainIntegrator, None, render_diagnosis_answer("Irregular, dark.", pred, None));
        let p = Pipeline::new(Backends::uniform(Arc::new(m)), Arc::new(SyntheticImageSource));
        p.run_trajectory(c, EpisodeMode::gt_attributes()).unwrap()
    }

    fn refiner(rw: Arc<dyn Backend>) -> Refiner {
        Refiner::new(rw, Arc::new(SyntheticImageSource))
    }

    fn off_box() -> BoxCoords {
        BoxCoords { x1: 10, y1: 10, x2: 50, y2: 60 }
    }

    #[test]
    fn correct_diagnosis_passes_rationale_through() {
        let c = case("a", Malignancy::Benign, "3");
        let t = trajectory(&c, off_box(), &c.gt_diagnosis);
        let rw = Arc::new(ScriptedBackend::new());
        let r = refiner(rw.clone()).refine(&t).unwrap();
        assert_eq!(r.corrected_box, t.gt_box_resized);
        assert_ne!(t.chain.roi, Some(r.corrected_box));
        assert_eq!(r.final_rationale, "Irregular, dark.");
        assert!(!r.rewritten);
        assert_eq!(rw.call_count(AgentRole::Rewriter), 0);
    }

    #[test]
    fn fixed_point_when_already_correct() {
        let c = case("a", Malignancy::Benign, "3");
        let g = BoxCoords { x1: 120, y1: 80, x2: 360, y2: 300 };
        let t = trajectory(&c, g, &c.gt_diagnosis);
        let r = refiner(Arc::new(ScriptedBackend::new())).refine(&t).unwrap();
        assert_eq!(Some(r.corrected_box), t.chain.roi);
        assert_eq!(Some(&r.final_rationale), t.chain.rationales.integrator.as_ref());
        assert_eq!(Some(&r.final_diagnosis), t.chain.diagnosis.as_ref());
    }

    #[test]
    fn wrong_diagnosis_is_rewritten() {
        let c = case("a", Malignancy::Malignant, "4C");
        let t = trajectory(&c, off_box(), &Diagnosis::new(Malignancy::Benign, "3"));
        let rw = Arc::new(ScriptedBackend::new().with_text(
            "a",
            AgentRole::Rewriter,
            None,
            render_diagnosis_answer("Spiculated margin suggests malignancy.", &c.gt_diagnosis, None),
        ));
        let r = refiner(rw.clone()).refine(&t).unwrap();
        assert!(r.rewritten);
        assert_eq!(r.final_diagnosis, c.gt_diagnosis);
        assert_eq!(r.final_rationale, "Spiculated margin suggests malignancy.");
        assert_eq!(r.rewrite_attempts, 1);
        let prompt = &rw.calls()[0].prompt;
        assert!(prompt.contains("Irregular, dark.") && prompt.contains("malignant, BI-RADS 4C"));
    }

    #[test]
    fn bad_rewrites_retry_then_drop() {
        let c = case("a", Malignancy::Malignant, "4C");
        let t = trajectory(&c, off_box(), &Diagnosis::new(Malignancy::Benign, "3"));
        let wrong = render_diagnosis_answer("Still benign.", &Diagnosis::new(Malignancy::Benign, "3"), None);
        let rw = Arc::new(
            ScriptedBackend::new()
                .with_text("a", AgentRole::Rewriter, Some(0), "garbage")
                .with_text("a", AgentRole::Rewriter, Some(1), wrong)
                .with_text("a", AgentRole::Rewriter, Some(2), render_diagnosis_answer("ok", &c.gt_diagnosis, None)),
        );
        let r = refiner(rw.clone()).refine(&t).unwrap();
        assert_eq!(r.rewrite_attempts, 3);

        let rw = Arc::new(ScriptedBackend::new().with_text("a", AgentRole::Rewriter, None, "garbage"));
        let e = refiner(rw.clone()).refine(&t).unwrap_err();
        assert!(matches!(e, RefineError::RewriteRejected { attempts: 4, .. }));
        assert_eq!(rw.call_count(AgentRole::Rewriter), 4);
    }

    #[test]
    fn rewriter_failure_surfaces() {
        let c = case("a", Malignancy::Malignant, "4C");
        let t = trajectory(&c, off_box(), &Diagnosis::new(Malignancy::Benign, "3"));
        let rw = Arc::new(ScriptedBackend::new().with_failure("a", AgentRole::Rewriter, None, "down"));
        assert!(matches!(refiner(rw).refine(&t), Err(RefineError::Backend(_))));
    }

    #[test]
    fn corpus_counts_order_and_hash() {
        let cases: Vec<BusCase> = (0..5).map(|i| case(&format!("c{i}"), Malignancy::Malignant, "4C")).collect();
        let wrong = Diagnosis::new(Malignancy::Benign, "3");
        let mut rw = ScriptedBackend::new();
        let mut trajs = Vec::new();
        for (i, c) in cases.iter().enumerate().rev() {
            let pred = if i < 3 { &wrong } else { &c.gt_diagnosis };
            trajs.push(trajectory(c, off_box(), pred));
            let text = if i == 0 { "bad".to_string() } else { render_diagnosis_answer("Fixed.", &c.gt_diagnosis, None) };
            rw = rw.with_text(&c.case_id, AgentRole::Rewriter, None, text);
        }
        let rf = refiner(Arc::new(rw));
        let outcomes = rf.refine_all(&trajs, ExecPolicy::Parallel { threads: 2 });
        let (ex, man) = build_sft_corpus(&outcomes, &rf.taxonomy, &rf.templates).unwrap();
        assert_eq!((man.total, man.rewritten, man.dropped), (4, 2, 1));
        assert_eq!(man.drops[0].trajectory_id, "c0#0");
        let ids: Vec<&str> = ex.iter().map(|e| e.case_id.as_str()).collect();
        assert_eq!(ids, ["c1", "c2", "c3", "c4"]);
        for e in &ex {
            assert_eq!(e.messages.len(), 4);
            assert_eq!(e.messages.iter().filter(|m| m.train).count(), 2);
            assert!(e.messages[1].content.ends_with("<box>[120, 80, 360, 300]</box>"));
            assert!(e.messages[2].content.contains("edge: smooth"));
        }
        let (_, again) = build_sft_corpus(&outcomes.iter().rev().cloned().collect::<Vec<_>>(), &rf.taxonomy, &rf.templates).unwrap();
        assert_eq!(man.sha256, again.sha256);
        assert_eq!(man.sha256, hex::encode(Sha256::digest(corpus_bytes(&ex))));
    }

    #[test]
    fn empty_corpus() {
        let (ex, man) = build_sft_corpus(&[], &Taxonomy::default(), &Templates::builtin()).unwrap();
        assert!(ex.is_empty());
        assert_eq!((man.total, man.rewritten, man.dropped), (0, 0, 0));
    }

    #[test]
    fn oracle_rewriter_refines_live_trajectory() {
        let c = case("a", Malignancy::Malignant, "5");
        let t = trajectory(&c, off_box(), &Diagnosis::new(Malignancy::Benign, "2"));
        let o: Arc<dyn Backend> = Arc::new(OracleBackend::new(&[c.clone()], ResizeBounds::default()));
        let r = refiner(o).refine(&t).unwrap();
        assert!(r.rewritten);
        assert_eq!(r.final_diagnosis, c.gt_diagnosis);
    }
}
