//! Episode execution: resize, localize, crop, attribute, integrate.
//!
//! One code path serves greedy evaluation episodes and sampled rollout
//! groups. Samples that still share every upstream output are batched into a
//! single backend request, so a group of eight whose localizer step is greedy
//! makes one localizer call, not eight.

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backends::{Attachment, BackendError, BackendRequest, Backends, SamplingParams};
use crate::datamodel::{AttributeSet, BusCase, Diagnosis, LesionBox, Taxonomy};
use crate::exec::ExecPolicy;
use crate::imaging::{
    crop_and_zoom, crop_window, remap_box, resize_to_fit_with, CropSpec, ImageBuffer, ResizeBounds,
    DEFAULT_CROP_FLOOR,
};
use crate::protocol::{self, parse_output, AgentRole, ImageRef, ParsedOutput, Prompt, PromptContext, Templates};

pub const CHAIN_SCHEMA_VERSION: u32 = 1;
pub const FULL_IMAGE: &str = "full";
pub const CROP_IMAGE: &str = "crop";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceSource {
    #[default]
    Predicted,
    OracleAttributes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxSource {
    #[default]
    Predicted,
    GtBox,
}

/// How far an episode runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeScope {
    #[default]
    Full,
    /// Stop after the attribute step (sub-agent rollouts).
    AttributesOnly,
}

/// Which steps draw `n` samples instead of one greedy answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SampledSteps {
    pub localizer: bool,
    pub sub_attribute: bool,
    pub integrator: bool,
}

impl SampledSteps {
    fn get(&self, role: AgentRole) -> bool {
        match role {
            AgentRole::MainLocalizer => self.localizer,
            AgentRole::SubAttribute => self.sub_attribute,
            AgentRole::MainIntegrator => self.integrator,
            AgentRole::Rewriter => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EpisodeMode {
    pub evidence_source: EvidenceSource,
    pub box_source: BoxSource,
    #[serde(default)]
    pub sampled: SampledSteps,
    #[serde(default)]
    pub scope: EpisodeScope,
}

impl EpisodeMode {
    /// Predicted box and predicted attributes; the test-time setting.
    pub fn live() -> Self {
        Self::default()
    }

    /// Ground-truth box feeds the crop; the localizer is not called.
    pub fn gt_box() -> Self {
        Self { box_source: BoxSource::GtBox, ..Self::default() }
    }

    /// Ground-truth attributes feed the integrator; the sub-agent is not called.
    pub fn gt_attributes() -> Self {
        Self { evidence_source: EvidenceSource::OracleAttributes, ..Self::default() }
    }

    pub fn with_sampled(mut self, sampled: SampledSteps) -> Self {
        self.sampled = sampled;
        self
    }

    pub fn with_scope(mut self, scope: EpisodeScope) -> Self {
        self.scope = scope;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiSource {
    Localizer,
    GtBox,
    FallbackFullImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeSource {
    Predicted,
    Oracle,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRationales {
    pub localizer: Option<String>,
    pub sub_attribute: Option<String>,
    pub integrator: Option<String>,
}

/// `None` for steps that were not run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepValidity {
    pub localizer: Option<bool>,
    pub sub_attribute: Option<bool>,
    pub integrator: Option<bool>,
}

/// The auditable record of one episode. Boxes are in the resized frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceChain {
    pub schema_version: u32,
    pub case_id: String,
    pub dataset: String,
    pub sample_index: u32,
    pub mode: EpisodeMode,
    pub template_version: String,
    pub resized_width: u32,
    pub resized_height: u32,
    pub scale: f64,
    pub roi: Option<LesionBox>,
    pub roi_source: Option<RoiSource>,
    pub crop: Option<CropSpec>,
    pub attributes: Option<AttributeSet>,
    pub attribute_source: Option<AttributeSource>,
    pub diagnosis: Option<Diagnosis>,
    pub confidence: Option<f64>,
    pub rationales: StepRationales,
    pub format_valid: StepValidity,
    pub diagnostics: Vec<String>,
}

impl EvidenceChain {
    fn empty(case: &BusCase, sample_index: u32, mode: EpisodeMode, template_version: &str) -> Self {
        Self {
            schema_version: CHAIN_SCHEMA_VERSION,
            case_id: case.case_id.clone(),
            dataset: case.dataset.clone(),
            sample_index,
            mode,
            template_version: template_version.to_string(),
            resized_width: 0,
            resized_height: 0,
            scale: 0.0,
            roi: None,
            roi_source: None,
            crop: None,
            attributes: None,
            attribute_source: None,
            diagnosis: None,
            confidence: None,
            rationales: StepRationales::default(),
            format_valid: StepValidity::default(),
            diagnostics: Vec::new(),
        }
    }

    /// Line-delimited record form.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("chain serializes")
    }
}

/// A model call made during an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub role: AgentRole,
    pub prompt: Prompt,
    pub raw_text: String,
    pub sampled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub trajectory_id: String,
    pub group_id: String,
    /// Ground truth: box in native frame, attributes, diagnosis.
    pub case: BusCase,
    /// The ground-truth box in the frame the episode ran in.
    pub gt_box_resized: LesionBox,
    pub chain: EvidenceChain,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn step(&self, role: AgentRole) -> Option<&StepRecord> {
        self.steps.iter().find(|s| s.role == role)
    }

    /// Re-derives the chain from the stored raw texts.
    pub fn reconstruct_chain(&self, taxonomy: &Taxonomy, crop_floor: u32) -> EvidenceChain {
        let c = &self.chain;
        let mut out = EvidenceChain::empty(&self.case, c.sample_index, c.mode, &c.template_version);
        out.resized_width = c.resized_width;
        out.resized_height = c.resized_height;
        out.scale = c.scale;
        let text = |role| self.step(role).map(|s| s.raw_text.as_str()).unwrap_or("");

        let roi = match c.mode.box_source {
            BoxSource::GtBox => {
                out.roi_source = Some(RoiSource::GtBox);
                self.gt_box_resized
            }
            BoxSource::Predicted => {
                let p = parse_output(AgentRole::MainLocalizer, text(AgentRole::MainLocalizer), taxonomy);
                apply_localizer(&mut out, &p)
            }
        };
        out.roi = Some(roi);
        out.crop = Some(CropSpec { source: roi, effective: crop_window(&roi, crop_floor), source_scale: c.scale });

        match c.mode.evidence_source {
            EvidenceSource::OracleAttributes => {
                out.attributes = Some(self.case.gt_attributes.clone());
                out.attribute_source = Some(AttributeSource::Oracle);
            }
            EvidenceSource::Predicted => {
                let p = parse_output(AgentRole::SubAttribute, text(AgentRole::SubAttribute), taxonomy);
                apply_attributes(&mut out, &p);
            }
        }
        if c.mode.scope == EpisodeScope::Full {
            let p = parse_output(AgentRole::MainIntegrator, text(AgentRole::MainIntegrator), taxonomy);
            apply_integrator(&mut out, &p);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EpisodeFailure {
    Backend(BackendError),
    Image { message: String },
    Geometry { message: String },
    Protocol { message: String },
}

impl fmt::Display for EpisodeFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EpisodeFailure::Backend(e) => write!(f, "{e}"),
            EpisodeFailure::Image { message } => write!(f, "image: {message}"),
            EpisodeFailure::Geometry { message } => write!(f, "geometry: {message}"),
            EpisodeFailure::Protocol { message } => write!(f, "prompt: {message}"),
        }
    }
}

/// An aborted episode, with everything produced before the failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeError {
    pub case_id: String,
    pub sample_index: u32,
    /// The step that failed; `None` for failures before any model call.
    pub step: Option<AgentRole>,
    pub failure: EpisodeFailure,
    pub partial: Box<EvidenceChain>,
    pub steps: Vec<StepRecord>,
}

impl EpisodeError {
    pub fn is_transport(&self) -> bool {
        matches!(&self.failure, EpisodeFailure::Backend(e) if e.is_transport())
    }
}

impl fmt::Display for EpisodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} sample {}", self.case_id, self.sample_index)?;
        if let Some(s) = self.step {
            write!(f, " at {}", s.as_str())?;
        }
        write!(f, ": {}", self.failure)
    }
}

impl std::error::Error for EpisodeError {}

pub trait ImageSource: Send + Sync {
    /// The case image in its native frame.
    fn load(&self, case: &BusCase) -> Result<ImageBuffer, String>;
}

/// Reads `image_path` relative to a root directory.
pub struct DirImageSource {
    pub root: PathBuf,
}

impl DirImageSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl ImageSource for DirImageSource {
    fn load(&self, case: &BusCase) -> Result<ImageBuffer, String> {
        let path = self.root.join(&case.image_path);
        let img = ImageBuffer::load(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let (w, h) = case.native_dims();
        if (img.width(), img.height()) != (w, h) {
            return Err(format!(
                "{} is {}x{} but the annotation frame is {w}x{h}",
                path.display(),
                img.width(),
                img.height()
            ));
        }
        Ok(img)
    }
}

/// Draws a deterministic stand-in image: textured background with a dark
/// elliptical lesion filling the ground-truth box.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticImageSource;

impl ImageSource for SyntheticImageSource {
    fn load(&self, case: &BusCase) -> Result<ImageBuffer, String> {
        Ok(synthetic_image(case))
    }
}

pub fn synthetic_image(case: &BusCase) -> ImageBuffer {
    let (w, h) = case.native_dims();
    let b = case.gt_box;
    let (cx, cy) = ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0);
    let (rx, ry) = ((b.width() / 2.0).max(0.5), (b.height() / 2.0).max(0.5));
    let salt = case.case_id.bytes().fold(0u32, |a, c| a.wrapping_mul(31).wrapping_add(c as u32));
    ImageBuffer::from_fn(w, h, 3, |x, y, _| {
        let dx = (x as f64 + 0.5 - cx) / rx;
        let dy = (y as f64 + 0.5 - cy) / ry;
        if dx * dx + dy * dy <= 1.0 {
            30
        } else {
            let n = (x.wrapping_mul(73) ^ y.wrapping_mul(151) ^ salt) % 64;
            (110 + n) as u8
        }
    })
}

/// Everything an episode needs besides the case and mode.
#[derive(Clone)]
pub struct Pipeline {
    pub taxonomy: Taxonomy,
    pub templates: Templates,
    pub backends: Backends,
    pub images: Arc<dyn ImageSource>,
    pub bounds: ResizeBounds,
    pub crop_floor: u32,
    /// Used for steps that are not sampled.
    pub greedy: SamplingParams,
    /// Used for sampled steps.
    pub rollout: SamplingParams,
    /// Policy for the pixel work inside one episode.
    pub image_policy: ExecPolicy,
}

impl Pipeline {
    pub fn new(backends: Backends, images: Arc<dyn ImageSource>) -> Self {
        Self {
            taxonomy: Taxonomy::default(),
            templates: Templates::builtin(),
            backends,
            images,
            bounds: ResizeBounds::default(),
            crop_floor: DEFAULT_CROP_FLOOR,
            greedy: SamplingParams::greedy(),
            rollout: SamplingParams::rollout(),
            image_policy: ExecPolicy::Sequential,
        }
    }

    pub fn run_episode(&self, case: &BusCase, mode: EpisodeMode) -> Result<EvidenceChain, EpisodeError> {
        self.run_trajectory(case, mode).map(|t| t.chain)
    }

    pub fn run_trajectory(&self, case: &BusCase, mode: EpisodeMode) -> Result<Trajectory, EpisodeError> {
        let mode = EpisodeMode { sampled: SampledSteps::default(), ..mode };
        self.run_branches(case, mode, 1).pop().expect("one branch")
    }

    /// `n` episodes on one case. Sampled steps use the rollout parameters.
    pub fn run_rollout_group(&self, case: &BusCase, mode: EpisodeMode, n: usize) -> RolloutGroup {
        let mut group = RolloutGroup { group_id: case.case_id.clone(), n, trajectories: vec![], failures: vec![] };
        for r in self.run_branches(case, mode, n) {
            match r {
                Ok(t) => group.trajectories.push(t),
                Err(e) => group.failures.push(e),
            }
        }
        group
    }

    /// One greedy episode per case, ordered by `case_id`.
    pub fn run_manifest(&self, cases: &[BusCase], mode: EpisodeMode, policy: ExecPolicy) -> ManifestRun {
        let mut results = policy.map(cases, |c| self.run_trajectory(c, mode));
        results.sort_by(|a, b| result_key(a).cmp(result_key(b)));
        let mut run = ManifestRun::default();
        for r in results {
            run.summary.record(&r);
            match r {
                Ok(t) => run.trajectories.push(t),
                Err(e) => run.failures.push(e),
            }
        }
        run
    }

    /// A rollout group per case, ordered by `case_id`.
    pub fn run_rollouts(&self, cases: &[BusCase], mode: EpisodeMode, n: usize, policy: ExecPolicy) -> Vec<RolloutGroup> {
        let mut groups = policy.map(cases, |c| self.run_rollout_group(c, mode, n));
        groups.sort_by(|a, b| a.group_id.cmp(&b.group_id));
        groups
    }

    fn run_branches(&self, case: &BusCase, mode: EpisodeMode, n: usize) -> Vec<Result<Trajectory, EpisodeError>> {
        let mut branches: Vec<Branch> = (0..n as u32)
            .map(|i| Branch {
                chain: EvidenceChain::empty(case, i, mode, &self.templates.version),
                steps: Vec::new(),
                crop: None,
                error: None,
            })
            .collect();
        let fail_all = |branches: &mut Vec<Branch>, failure: EpisodeFailure| {
            for b in branches.iter_mut() {
                b.fail(None, failure.clone());
            }
        };

        let native = match self.images.load(case) {
            Ok(img) => img,
            Err(message) => {
                fail_all(&mut branches, EpisodeFailure::Image { message });
                return finish(case, branches, None);
            }
        };
        let (resized, scale) = resize_to_fit_with(&native, self.bounds, self.image_policy);
        let (rw, rh) = (resized.width(), resized.height());
        let gt_resized = match remap_box(&case.gt_box, scale, rw, rh) {
            Ok(b) => b,
            Err(e) => {
                fail_all(&mut branches, EpisodeFailure::Geometry { message: e.to_string() });
                return finish(case, branches, None);
            }
        };
        for b in &mut branches {
            b.chain.resized_width = rw;
            b.chain.resized_height = rh;
            b.chain.scale = scale;
        }
        let full = Arc::new(resized);
        let full_ref = ImageRef { name: FULL_IMAGE.into(), width: rw, height: rh };
        let mut clusters: Vec<Vec<usize>> = vec![(0..n).collect()];

        // Localize.
        match mode.box_source {
            BoxSource::GtBox => {
                for b in &mut branches {
                    b.chain.roi = Some(gt_resized);
                    b.chain.roi_source = Some(RoiSource::GtBox);
                }
            }
            BoxSource::Predicted => {
                let ctx = PromptContext { full_image: Some(full_ref.clone()), ..Default::default() };
                self.step(case, AgentRole::MainLocalizer, mode, &mut branches, &mut clusters, |_| {
                    (ctx.clone(), vec![Attachment { name: FULL_IMAGE.into(), image: full.clone() }])
                }, |chain, p| {
                    let roi = apply_localizer(chain, p);
                    chain.roi = Some(roi);
                });
            }
        }

        // Crop and zoom.
        for &i in clusters.iter().flatten() {
            let b = &mut branches[i];
            let roi = b.chain.roi.expect("roi set");
            match crop_and_zoom(&full, &roi, self.crop_floor) {
                Ok((img, mut spec)) => {
                    spec.source_scale = scale;
                    b.chain.crop = Some(spec);
                    b.crop = Some(Arc::new(img));
                }
                Err(e) => b.fail(None, EpisodeFailure::Geometry { message: e.to_string() }),
            }
        }
        prune(&branches, &mut clusters);

        // Attributes.
        match mode.evidence_source {
            EvidenceSource::OracleAttributes => {
                for &i in clusters.iter().flatten() {
                    branches[i].chain.attributes = Some(case.gt_attributes.clone());
                    branches[i].chain.attribute_source = Some(AttributeSource::Oracle);
                }
            }
            EvidenceSource::Predicted => {
                self.step(case, AgentRole::SubAttribute, mode, &mut branches, &mut clusters, |b| {
                    let crop = b.crop.clone().expect("crop set");
                    let ctx = PromptContext {
                        crop: Some(ImageRef { name: CROP_IMAGE.into(), width: crop.width(), height: crop.height() }),
                        ..Default::default()
                    };
                    (ctx, vec![Attachment { name: CROP_IMAGE.into(), image: crop }])
                }, apply_attributes);
            }
        }

        // Integrate.
        if mode.scope == EpisodeScope::Full {
            self.step(case, AgentRole::MainIntegrator, mode, &mut branches, &mut clusters, |b| {
                let ctx = PromptContext {
                    full_image: Some(full_ref.clone()),
                    attributes: b.chain.attributes.clone(),
                    ..Default::default()
                };
                (ctx, vec![Attachment { name: FULL_IMAGE.into(), image: full.clone() }])
            }, apply_integrator);
        }

        finish(case, branches, Some(gt_resized))
    }

    /// Runs one model step for every live cluster. Sampled steps request one
    /// completion per member and split the cluster; greedy steps share one
    /// completion across the cluster.
    fn step(
        &self,
        case: &BusCase,
        role: AgentRole,
        mode: EpisodeMode,
        branches: &mut [Branch],
        clusters: &mut Vec<Vec<usize>>,
        context: impl Fn(&Branch) -> (PromptContext, Vec<Attachment>),
        apply: impl Fn(&mut EvidenceChain, &ParsedOutput),
    ) {
        let sampled = mode.sampled.get(role);
        let params = if sampled { self.rollout } else { self.greedy };
        let backend = self.backends.for_role(role);
        let mut next = Vec::new();
        for cluster in clusters.drain(..) {
            let (ctx, images) = context(&branches[cluster[0]]);
            let prompt = match protocol::render_prompt(role, &ctx, &self.templates, &self.taxonomy) {
                Ok(p) => p,
                Err(e) => {
                    for &i in &cluster {
                        branches[i].fail(Some(role), EpisodeFailure::Protocol { message: e.to_string() });
                    }
                    continue;
                }
            };
            let samples: Vec<u32> = cluster.iter().map(|&i| branches[i].chain.sample_index).collect();
            let request = |indices: Vec<u32>| {
                BackendRequest::from_prompt(&case.case_id, &prompt, &images, params, indices)
                    .and_then(|r| backend.invoke(&r))
                    .map(|resp| resp.completions.into_iter().map(|c| c.text).collect::<Vec<_>>())
            };

            let texts: Vec<Result<String, BackendError>> = if sampled {
                match request(samples.clone()) {
                    Ok(t) if t.len() == samples.len() => t.into_iter().map(Ok).collect(),
                    Ok(t) => {
                        let e = BackendError::Schema {
                            message: format!("expected {} completions, got {}", samples.len(), t.len()),
                        };
                        vec![Err(e); samples.len()]
                    }
                    Err(e) if samples.len() > 1 && !e.is_transport() => samples
                        .iter()
                        .map(|&s| request(vec![s]).and_then(|mut t| one_text(&mut t)))
                        .collect(),
                    Err(e) => vec![Err(e); samples.len()],
                }
            } else {
                let shared = request(vec![samples[0]]).and_then(|mut t| one_text(&mut t));
                vec![shared; samples.len()]
            };

            for (&i, text) in cluster.iter().zip(texts) {
                let b = &mut branches[i];
                match text {
                    Ok(text) => {
                        let parsed = parse_output(role, &text, &self.taxonomy);
                        apply(&mut b.chain, &parsed);
                        b.steps.push(StepRecord { role, prompt: prompt.clone(), raw_text: text, sampled });
                    }
                    Err(e) => b.fail(Some(role), EpisodeFailure::Backend(e)),
                }
            }
            let live: Vec<usize> = cluster.into_iter().filter(|&i| branches[i].error.is_none()).collect();
            if sampled {
                next.extend(live.into_iter().map(|i| vec![i]));
            } else if !live.is_empty() {
                next.push(live);
            }
        }
        *clusters = next;
    }
}

fn one_text(t: &mut Vec<String>) -> Result<String, BackendError> {
    if t.len() != 1 {
        return Err(BackendError::Schema { message: format!("expected 1 completion, got {}", t.len()) });
    }
    Ok(t.remove(0))
}

fn result_key(r: &Result<Trajectory, EpisodeError>) -> &str {
    match r {
        Ok(t) => &t.case.case_id,
        Err(e) => &e.case_id,
    }
}

struct Branch {
    chain: EvidenceChain,
    steps: Vec<StepRecord>,
    crop: Option<Arc<ImageBuffer>>,
    error: Option<(Option<AgentRole>, EpisodeFailure)>,
}

impl Branch {
    fn fail(&mut self, step: Option<AgentRole>, failure: EpisodeFailure) {
        if self.error.is_none() {
            self.error = Some((step, failure));
        }
    }
}

fn prune(branches: &[Branch], clusters: &mut Vec<Vec<usize>>) {
    for c in clusters.iter_mut() {
        c.retain(|&i| branches[i].error.is_none());
    }
    clusters.retain(|c| !c.is_empty());
}

fn finish(case: &BusCase, branches: Vec<Branch>, gt_resized: Option<LesionBox>) -> Vec<Result<Trajectory, EpisodeError>> {
    branches
        .into_iter()
        .map(|b| match (b.error, gt_resized) {
            (None, Some(gt)) => Ok(Trajectory {
                trajectory_id: format!("{}#{}", case.case_id, b.chain.sample_index),
                group_id: case.case_id.clone(),
                case: case.clone(),
                gt_box_resized: gt,
                chain: b.chain,
                steps: b.steps,
            }),
            (error, _) => {
                let (step, failure) = error.expect("branch without ground truth frame has failed");
                Err(EpisodeError {
                    case_id: case.case_id.clone(),
                    sample_index: b.chain.sample_index,
                    step,
                    failure,
                    partial: Box::new(b.chain),
                    steps: b.steps,
                })
            }
        })
        .collect()
}

/// Box to crop from a parsed localizer turn; falls back to the full frame.
fn apply_localizer(chain: &mut EvidenceChain, p: &ParsedOutput) -> LesionBox {
    let (w, h) = (chain.resized_width, chain.resized_height);
    chain.rationales.localizer = p.rationale.clone();
    chain.format_valid.localizer = Some(p.format_valid);
    if let Some(b) = p.box_coords() {
        let clipped = (b.x1.min(w), b.y1.min(h), b.x2.min(w), b.y2.min(h));
        if clipped.0 < clipped.2 && clipped.1 < clipped.3 {
            if clipped != (b.x1, b.y1, b.x2, b.y2) {
                chain.diagnostics.push(format!("localizer box [{}, {}, {}, {}] clipped to {w}x{h}", b.x1, b.y1, b.x2, b.y2));
            }
            chain.roi_source = Some(RoiSource::Localizer);
            return LesionBox::unchecked(clipped.0 as f64, clipped.1 as f64, clipped.2 as f64, clipped.3 as f64, w, h);
        }
        chain.diagnostics.push(format!("localizer box [{}, {}, {}, {}] lies outside {w}x{h}", b.x1, b.y1, b.x2, b.y2));
    } else {
        chain.diagnostics.push(format!("localizer output unparseable: {}", p.diagnostics.join("; ")));
    }
    chain.diagnostics.push("using full-image box".into());
    chain.roi_source = Some(RoiSource::FallbackFullImage);
    LesionBox::full_frame(w, h)
}

fn apply_attributes(chain: &mut EvidenceChain, p: &ParsedOutput) {
    chain.rationales.sub_attribute = p.rationale.clone();
    chain.format_valid.sub_attribute = Some(p.format_valid);
    let attrs = p.attributes().cloned().unwrap_or_else(AttributeSet::all_unparseable);
    let missing = attrs.unparseable_count();
    if missing > 0 {
        chain.diagnostics.push(format!("{missing} attribute slot(s) unparseable; passed on as \"{}\"", protocol::UNKNOWN_TOKEN));
    }
    chain.attributes = Some(attrs);
    chain.attribute_source = Some(AttributeSource::Predicted);
}

fn apply_integrator(chain: &mut EvidenceChain, p: &ParsedOutput) {
    chain.rationales.integrator = p.rationale.clone();
    chain.format_valid.integrator = Some(p.format_valid);
    match p.diagnosis() {
        Some(d) => {
            chain.diagnosis = Some(d.diagnosis.clone());
            chain.confidence = d.confidence;
        }
        None => chain.diagnostics.push(format!("integrator output unparseable: {}", p.diagnostics.join("; "))),
    }
}

/// All trajectories of one case under one sampling configuration.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub group_id: String,
    pub n: usize,
    pub trajectories: Vec<Trajectory>,
    pub failures: Vec<EpisodeError>,
}

impl RolloutGroup {
    pub fn is_complete(&self) -> bool {
        self.trajectories.len() == self.n && self.failures.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub total: usize,
    pub succeeded: usize,
    pub aborted: usize,
    pub transport_failures: usize,
    pub localizer_fallbacks: usize,
    pub unparseable_attribute_slots: usize,
    pub integrator_unparsed: usize,
}

impl RunSummary {
    fn record(&mut self, r: &Result<Trajectory, EpisodeError>) {
        self.total += 1;
        match r {
            Ok(t) => {
                self.succeeded += 1;
                let c = &t.chain;
                if c.roi_source == Some(RoiSource::FallbackFullImage) {
                    self.localizer_fallbacks += 1;
                }
                if c.attribute_source == Some(AttributeSource::Predicted) {
                    self.unparseable_attribute_slots += c.attributes.as_ref().map_or(0, AttributeSet::unparseable_count);
                }
                if c.mode.scope == EpisodeScope::Full && c.diagnosis.is_none() {
                    self.integrator_unparsed += 1;
                }
            }
            Err(e) => {
                self.aborted += 1;
                if e.is_transport() {
                    self.transport_failures += 1;
                }
            }
        }
    }

    /// Nothing succeeded and at least one case could not reach its backend.
    pub fn backend_unreachable(&self) -> bool {
        self.total > 0 && self.succeeded == 0 && self.transport_failures > 0
    }
}

#[derive(Debug, Clone, Default)]
pub struct ManifestRun {
    pub trajectories: Vec<Trajectory>,
    pub failures: Vec<EpisodeError>,
    pub summary: RunSummary,
}

impl ManifestRun {
    pub fn chains(&self) -> impl Iterator<Item = &EvidenceChain> {
        self.trajectories.iter().map(|t| &t.chain)
    }
}
