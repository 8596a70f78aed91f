//! Agent prompt templates and the structured answer grammar.
//!
//! Every model turn is a `<think>` rationale followed by one answer block:
//! `<box>[x1, y1, x2, y2]</box>` for the localizer, or an `<answer>` block of
//! `key: value` lines for the attribute agent, the integrator and the
//! rewriter. See `docs/grammar.md` for the ABNF.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{AttributeSet, AttributeSlot, Diagnosis, Label, Malignancy, Slot, Taxonomy};

pub const TEMPLATE_VERSION: &str = "v1";

/// Token shown to the integrator for an attribute slot that failed to parse.
pub const UNKNOWN_TOKEN: &str = "unknown";

const BUILTIN_LOCALIZER: &str = include_str!("../templates/v1/localizer.txt");
const BUILTIN_SUB_ATTRIBUTE: &str = include_str!("../templates/v1/sub_attribute.txt");
const BUILTIN_INTEGRATOR: &str = include_str!("../templates/v1/integrator.txt");
const BUILTIN_REWRITER: &str = include_str!("../templates/v1/rewriter.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    MainLocalizer,
    SubAttribute,
    MainIntegrator,
    Rewriter,
}

impl AgentRole {
    pub const ALL: [AgentRole; 4] =
        [AgentRole::MainLocalizer, AgentRole::SubAttribute, AgentRole::MainIntegrator, AgentRole::Rewriter];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::MainLocalizer => "main_localizer",
            AgentRole::SubAttribute => "sub_attribute",
            AgentRole::MainIntegrator => "main_integrator",
            AgentRole::Rewriter => "rewriter",
        }
    }

    pub fn parse(raw: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str() == raw.trim())
    }

    fn placeholders(self) -> &'static [&'static str] {
        match self {
            AgentRole::MainLocalizer => &["image_width", "image_height"],
            AgentRole::SubAttribute => &[
                "image_width",
                "image_height",
                "echo_values",
                "calcification_values",
                "boundary_values",
                "edge_values",
            ],
            AgentRole::MainIntegrator => &["image_width", "image_height", "evidence", "birads_values"],
            AgentRole::Rewriter => &[
                "image_width",
                "image_height",
                "evidence",
                "predicted_diagnosis",
                "original_rationale",
                "gt_malignancy",
                "gt_birads",
            ],
        }
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("missing-context-field: {role:?} prompt needs {field}")]
    MissingContextField { role: AgentRole, field: &'static str },
    #[error("template for {role:?} uses unknown placeholder {{{{{name}}}}}")]
    UnknownPlaceholder { role: AgentRole, name: String },
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Versioned prompt templates with `{{name}}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub version: String,
    texts: BTreeMap<AgentRole, String>,
}

impl Default for Templates {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Templates {
    pub fn builtin() -> Self {
        let texts = [
            (AgentRole::MainLocalizer, BUILTIN_LOCALIZER),
            (AgentRole::SubAttribute, BUILTIN_SUB_ATTRIBUTE),
            (AgentRole::MainIntegrator, BUILTIN_INTEGRATOR),
            (AgentRole::Rewriter, BUILTIN_REWRITER),
        ]
        .into_iter()
        .map(|(r, t)| (r, t.to_string()))
        .collect();
        Self { version: TEMPLATE_VERSION.to_string(), texts }
    }

    /// Loads `<role>.txt` for every role from `dir`; the directory name is
    /// the template version.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, ProtocolError> {
        let dir = dir.as_ref();
        let mut texts = BTreeMap::new();
        for role in AgentRole::ALL {
            let name = match role {
                AgentRole::MainLocalizer => "localizer",
                AgentRole::SubAttribute => "sub_attribute",
                AgentRole::MainIntegrator => "integrator",
                AgentRole::Rewriter => "rewriter",
            };
            let path = dir.join(format!("{name}.txt"));
            let text = std::fs::read_to_string(&path)
                .map_err(|source| ProtocolError::Io { path: path.display().to_string(), source })?;
            texts.insert(role, text);
        }
        let version = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        let t = Self { version, texts };
        t.check()?;
        Ok(t)
    }

    fn check(&self) -> Result<(), ProtocolError> {
        for (role, text) in &self.texts {
            for name in placeholder_names(text) {
                if !role.placeholders().contains(&name.as_str()) {
                    return Err(ProtocolError::UnknownPlaceholder { role: *role, name });
                }
            }
        }
        Ok(())
    }

    pub fn text(&self, role: AgentRole) -> &str {
        &self.texts[&role]
    }
}

fn placeholder_names(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                out.push(after[..end].trim().to_string());
                rest = &after[end + 2..];
            }
            None => break,
        }
    }
    out
}

/// An image a prompt refers to; the caller attaches the pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub name: String,
    pub width: u32,
    pub height: u32,
}

/// Inputs a prompt may draw on. Which ones are required depends on the role.
#[derive(Debug, Clone, Default)]
pub struct PromptContext {
    pub full_image: Option<ImageRef>,
    pub crop: Option<ImageRef>,
    pub attributes: Option<AttributeSet>,
    pub original_rationale: Option<String>,
    /// The diagnosis the original trajectory reached, if it parsed.
    pub predicted_diagnosis: Option<Diagnosis>,
    pub gt_diagnosis: Option<Diagnosis>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub role: AgentRole,
    pub template_version: String,
    pub text: String,
    pub images: Vec<ImageRef>,
}

/// `key: value` lines for the four attribute slots, with `unknown` standing
/// in for slots that failed to parse.
pub fn evidence_block(attrs: &AttributeSet) -> String {
    AttributeSlot::ALL
        .iter()
        .map(|s| format!("{}: {}", s.key(), attrs.get(*s).as_known().unwrap_or(UNKNOWN_TOKEN)))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_prompt(
    role: AgentRole,
    ctx: &PromptContext,
    templates: &Templates,
    taxonomy: &Taxonomy,
) -> Result<Prompt, ProtocolError> {
    let need = |field: &'static str| ProtocolError::MissingContextField { role, field };
    let mut vars: Vec<(&str, String)> = Vec::new();
    let image = match role {
        AgentRole::SubAttribute => ctx.crop.clone().ok_or_else(|| need("crop"))?,
        _ => ctx.full_image.clone().ok_or_else(|| need("full_image"))?,
    };
    vars.push(("image_width", image.width.to_string()));
    vars.push(("image_height", image.height.to_string()));

    match role {
        AgentRole::MainLocalizer => {}
        AgentRole::SubAttribute => {
            for slot in AttributeSlot::ALL {
                let key = match slot {
                    AttributeSlot::Echo => "echo_values",
                    AttributeSlot::Calcification => "calcification_values",
                    AttributeSlot::Boundary => "boundary_values",
                    AttributeSlot::Edge => "edge_values",
                };
                vars.push((key, taxonomy.values(slot.into()).join(", ")));
            }
        }
        AgentRole::MainIntegrator => {
            let attrs = ctx.attributes.as_ref().ok_or_else(|| need("attributes"))?;
            vars.push(("evidence", evidence_block(attrs)));
            vars.push(("birads_values", taxonomy.birads.join(", ")));
        }
        AgentRole::Rewriter => {
            let attrs = ctx.attributes.as_ref().ok_or_else(|| need("attributes"))?;
            let rationale = ctx.original_rationale.as_ref().ok_or_else(|| need("original_rationale"))?;
            let gt = ctx.gt_diagnosis.as_ref().ok_or_else(|| need("gt_diagnosis"))?;
            vars.push(("evidence", evidence_block(attrs)));
            vars.push(("original_rationale", rationale.clone()));
            vars.push((
                "predicted_diagnosis",
                ctx.predicted_diagnosis
                    .as_ref()
                    .map_or_else(|| "no parseable diagnosis".to_string(), |d| d.to_string()),
            ));
            vars.push(("gt_malignancy", gt.malignancy.as_str().to_string()));
            vars.push(("gt_birads", gt.birads.clone()));
        }
    }

    let mut text = templates.text(role).to_string();
    for (k, v) in &vars {
        text = text.replace(&format!("{{{{{k}}}}}"), v);
    }
    if let Some(name) = placeholder_names(&text).into_iter().next() {
        return Err(ProtocolError::UnknownPlaceholder { role, name });
    }
    Ok(Prompt { role, template_version: templates.version.clone(), text, images: vec![image] })
}

/// Localizer box as written in the answer grammar (non-negative integers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxCoords {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

/// Integrator answer; `confidence` is the optional probability of malignancy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisAnswer {
    pub diagnosis: Diagnosis,
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Box(BoxCoords),
    Attributes(AttributeSet),
    Diagnosis(DiagnosisAnswer),
    Rewrite { rationale: String, answer: DiagnosisAnswer },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub role: AgentRole,
    pub rationale: Option<String>,
    pub payload: Option<Payload>,
    pub format_valid: bool,
    pub diagnostics: Vec<String>,
}

impl ParsedOutput {
    pub fn box_coords(&self) -> Option<BoxCoords> {
        match &self.payload {
            Some(Payload::Box(b)) => Some(*b),
            _ => None,
        }
    }

    pub fn attributes(&self) -> Option<&AttributeSet> {
        match &self.payload {
            Some(Payload::Attributes(a)) => Some(a),
            _ => None,
        }
    }

    pub fn diagnosis(&self) -> Option<&DiagnosisAnswer> {
        match &self.payload {
            Some(Payload::Diagnosis(d)) | Some(Payload::Rewrite { answer: d, .. }) => Some(d),
            _ => None,
        }
    }
}

struct Scan<'a> {
    diags: Vec<String>,
    valid: bool,
    text: &'a str,
}

impl Scan<'_> {
    fn fail(&mut self, msg: impl Into<String>) {
        self.valid = false;
        self.diags.push(msg.into());
    }
}

/// Parses one model turn. Never fails: problems are reported through
/// `format_valid` and `diagnostics`, and as much payload as possible is kept.
pub fn parse_output(role: AgentRole, text: &str, taxonomy: &Taxonomy) -> ParsedOutput {
    let mut scan = Scan { diags: Vec::new(), valid: true, text };
    let (rationale, rest) = split_think(&mut scan);
    let (open, close) = match role {
        AgentRole::MainLocalizer => ("<box>", "</box>"),
        _ => ("<answer>", "</answer>"),
    };

    let body = match rest.find(open) {
        None => {
            scan.fail(format!("missing {open} block"));
            None
        }
        Some(start) => {
            if !rest[..start].trim().is_empty() {
                scan.fail(format!("unexpected text before {open}"));
            }
            let after = &rest[start + open.len()..];
            match after.find(close) {
                None => {
                    scan.fail(format!("unterminated {open} block"));
                    None
                }
                Some(end) => {
                    if !after[end + close.len()..].trim().is_empty() {
                        scan.diags.push(format!("trailing text after {close}"));
                    }
                    Some(&after[..end])
                }
            }
        }
    };

    let payload = match (role, body) {
        (AgentRole::MainLocalizer, Some(b)) => parse_box(&mut scan, b).map(Payload::Box),
        (AgentRole::MainLocalizer, None) => None,
        (AgentRole::SubAttribute, b) => Some(Payload::Attributes(parse_attributes(&mut scan, b, taxonomy))),
        (AgentRole::MainIntegrator, b) => {
            b.and_then(|b| parse_diagnosis(&mut scan, b, taxonomy)).map(Payload::Diagnosis)
        }
        (AgentRole::Rewriter, b) => b.and_then(|b| parse_diagnosis(&mut scan, b, taxonomy)).map(|answer| {
            Payload::Rewrite { rationale: rationale.clone().unwrap_or_default(), answer }
        }),
    };
    if role == AgentRole::Rewriter && rationale.as_deref().is_some_and(str::is_empty) {
        scan.fail("empty rewritten rationale");
    }
    ParsedOutput { role, rationale, payload, format_valid: scan.valid, diagnostics: scan.diags }
}

fn split_think<'a>(scan: &mut Scan<'a>) -> (Option<String>, &'a str) {
    let text = scan.text;
    let trimmed = text.trim_start();
    match trimmed.strip_prefix("<think>") {
        Some(after) => match after.find("</think>") {
            Some(end) => (Some(after[..end].trim().to_string()), &after[end + "</think>".len()..]),
            None => {
                scan.fail("unterminated <think> block");
                (None, after)
            }
        },
        None => {
            scan.fail("missing <think> block");
            (None, text)
        }
    }
}

fn parse_box(scan: &mut Scan<'_>, body: &str) -> Option<BoxCoords> {
    let inner = body.trim().strip_prefix('[').and_then(|s| s.strip_suffix(']'));
    let Some(inner) = inner else {
        scan.fail("box is not a bracketed list");
        return None;
    };
    let nums: Vec<Option<u32>> = inner
        .split(',')
        .map(|p| {
            let p = p.trim();
            (!p.is_empty() && p.bytes().all(|b| b.is_ascii_digit()))
                .then(|| p.parse::<u32>().ok())
                .flatten()
        })
        .collect();
    if nums.len() != 4 || nums.iter().any(Option::is_none) {
        scan.fail("box must hold exactly four non-negative integers");
        return None;
    }
    let [x1, y1, x2, y2] = [nums[0].unwrap(), nums[1].unwrap(), nums[2].unwrap(), nums[3].unwrap()];
    if x1 >= x2 || y1 >= y2 {
        scan.fail("degenerate box");
        return None;
    }
    Some(BoxCoords { x1, y1, x2, y2 })
}

/// Splits an answer body into `key -> value`, flagging malformed lines.
fn answer_lines(scan: &mut Scan<'_>, body: &str, keys: &[&str]) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for line in body.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let Some((k, v)) = line.split_once(':') else {
            scan.fail(format!("answer line without key: {line:?}"));
            continue;
        };
        let key = k.trim().to_lowercase();
        let value = v.trim();
        if !keys.contains(&key.as_str()) {
            scan.fail(format!("unexpected key: {key}"));
            continue;
        }
        if value.is_empty() {
            scan.fail(format!("empty value for slot: {key}"));
            continue;
        }
        if out.insert(key.clone(), value.to_string()).is_some() {
            scan.fail(format!("duplicate slot: {key}"));
        }
    }
    out
}

fn parse_attributes(scan: &mut Scan<'_>, body: Option<&str>, taxonomy: &Taxonomy) -> AttributeSet {
    let mut attrs = AttributeSet::all_unparseable();
    let Some(body) = body else { return attrs };
    let keys: Vec<&str> = AttributeSlot::ALL.iter().map(|s| s.key()).collect();
    let lines = answer_lines(scan, body, &keys);
    for slot in AttributeSlot::ALL {
        match lines.get(slot.key()) {
            None => scan.fail(format!("missing slot: {}", slot.key())),
            Some(raw) => {
                let label = taxonomy.normalize(raw, slot.into());
                if label.is_unparseable() {
                    scan.fail(format!("unknown value for slot: {} ({raw:?})", slot.key()));
                }
                *attrs.get_mut(slot) = label;
            }
        }
    }
    attrs
}

fn parse_diagnosis(scan: &mut Scan<'_>, body: &str, taxonomy: &Taxonomy) -> Option<DiagnosisAnswer> {
    let lines = answer_lines(scan, body, &["malignancy", "birads", "confidence"]);
    let malignancy = match lines.get("malignancy") {
        None => {
            scan.fail("missing slot: malignancy");
            None
        }
        Some(raw) => {
            let m = Malignancy::parse(raw);
            if m.is_none() {
                scan.fail(format!("unknown value for slot: malignancy ({raw:?})"));
            }
            m
        }
    };
    let birads = match lines.get("birads") {
        None => {
            scan.fail("missing slot: birads");
            None
        }
        Some(raw) => match taxonomy.normalize(raw, Slot::Birads) {
            Label::Known(v) => Some(v),
            Label::Unparseable => {
                scan.fail(format!("unknown value for slot: birads ({raw:?})"));
                None
            }
        },
    };
    let confidence = lines.get("confidence").and_then(|raw| match raw.parse::<f64>() {
        Ok(c) if c.is_finite() && (0.0..=1.0).contains(&c) => Some(c),
        _ => {
            scan.fail(format!("confidence must be a number in [0, 1], got {raw:?}"));
            None
        }
    });
    let diagnosis = Diagnosis { malignancy: malignancy?, birads: birads? };
    if let Some(c) = confidence {
        if (c >= 0.5) != diagnosis.malignancy.is_malignant() {
            scan.fail("confidence disagrees with malignancy label");
        }
    }
    Some(DiagnosisAnswer { diagnosis, confidence })
}

/// 1.0 for a fully valid parse, 0.0 otherwise.
pub fn format_reward(p: &ParsedOutput) -> f64 {
    if p.format_valid {
        1.0
    } else {
        0.0
    }
}

fn think(rationale: &str) -> String {
    let clean = rationale.replace("<think>", "").replace("</think>", "");
    format!("<think>{}</think>\n", clean.trim())
}

pub fn render_box_answer(rationale: &str, b: &BoxCoords) -> String {
    format!("{}<box>[{}, {}, {}, {}]</box>", think(rationale), b.x1, b.y1, b.x2, b.y2)
}

pub fn render_attribute_answer(rationale: &str, attrs: &AttributeSet) -> String {
    format!("{}<answer>\n{}\n</answer>", think(rationale), evidence_block(attrs))
}

pub fn render_diagnosis_answer(rationale: &str, d: &Diagnosis, confidence: Option<f64>) -> String {
    let mut s = format!("{}<answer>\nmalignancy: {}\nbirads: {}\n", think(rationale), d.malignancy, d.birads);
    if let Some(c) = confidence {
        let _ = writeln!(s, "confidence: {c}");
    }
    s.push_str("</answer>");
    s
}

/// Canonical text for a payload; `parse_output` inverts it exactly.
pub fn render_canonical(rationale: &str, payload: &Payload) -> String {
    match payload {
        Payload::Box(b) => render_box_answer(rationale, b),
        Payload::Attributes(a) => render_attribute_answer(rationale, a),
        Payload::Diagnosis(d) => render_diagnosis_answer(rationale, &d.diagnosis, d.confidence),
        Payload::Rewrite { rationale, answer } => {
            render_diagnosis_answer(rationale, &answer.diagnosis, answer.confidence)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tax() -> Taxonomy {
        Taxonomy::default()
    }

    fn img(name: &str) -> Option<ImageRef> {
        Some(ImageRef { name: name.into(), width: 224, height: 224 })
    }

    #[test]
    fn integrator_prompt_embeds_evidence_lines() {
        let ctx = PromptContext {
            full_image: img("full"),
            attributes: Some(AttributeSet::new("hypoechoic", "absent", "unclear", "spiculated")),
            ..Default::default()
        };
        let p = render_prompt(AgentRole::MainIntegrator, &ctx, &Templates::builtin(), &tax()).unwrap();
        for line in ["echo: hypoechoic", "calcification: absent", "boundary: unclear", "edge: spiculated"] {
            assert!(p.text.contains(line), "{line} missing");
        }
        assert_eq!(p.images.len(), 1);
        assert_eq!(p.template_version, "v1");
    }

    #[test]
    fn unparseable_slot_is_rendered_as_unknown() {
        let mut attrs = AttributeSet::new("hypoechoic", "absent", "unclear", "spiculated");
        attrs.boundary = Label::Unparseable;
        assert!(evidence_block(&attrs).contains("boundary: unknown"));
    }

    #[test]
    fn sub_prompt_lists_allowed_values() {
        let ctx = PromptContext { crop: img("crop"), ..Default::default() };
        let p = render_prompt(AgentRole::SubAttribute, &ctx, &Templates::builtin(), &tax()).unwrap();
        assert!(p.text.contains("hypoechoic, isoechoic, hyperechoic, anechoic, mixed"));
        assert!(p.text.contains("smooth, lobulated, angular, spiculated"));
        for q in ["- echo:", "- calcification:", "- boundary:", "- edge:"] {
            assert!(p.text.contains(q));
        }
        assert_eq!(p.images[0].name, "crop");
    }

    #[test]
    fn rewriter_prompt_states_ground_truth() {
        let ctx = PromptContext {
            full_image: img("full"),
            attributes: Some(AttributeSet::new("hypoechoic", "absent", "unclear", "spiculated")),
            original_rationale: Some("Looks benign.".into()),
            predicted_diagnosis: Some(Diagnosis::new(Malignancy::Benign, "3")),
            gt_diagnosis: Some(Diagnosis::new(Malignancy::Malignant, "4C")),
            ..Default::default()
        };
        let p = render_prompt(AgentRole::Rewriter, &ctx, &Templates::builtin(), &tax()).unwrap();
        assert!(p.text.contains("ground-truth diagnosis: malignant, BI-RADS 4C"));
        assert!(p.text.contains("Looks benign."));
    }

    #[test]
    fn missing_context_is_an_error() {
        let err = render_prompt(AgentRole::MainIntegrator, &PromptContext { full_image: img("f"), ..Default::default() }, &Templates::builtin(), &tax())
            .unwrap_err();
        assert!(matches!(err, ProtocolError::MissingContextField { field: "attributes", .. }));
        let err = render_prompt(AgentRole::SubAttribute, &PromptContext::default(), &Templates::builtin(), &tax()).unwrap_err();
        assert!(matches!(err, ProtocolError::MissingContextField { field: "crop", .. }));
    }

    #[test]
    fn template_dir_with_unknown_placeholder_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["localizer", "sub_attribute", "integrator", "rewriter"] {
            std::fs::write(dir.path().join(format!("{f}.txt")), "plain {{image_width}}").unwrap();
        }
        assert!(Templates::load_dir(dir.path()).is_ok());
        std::fs::write(dir.path().join("localizer.txt"), "{{evidence}}").unwrap();
        assert!(matches!(Templates::load_dir(dir.path()), Err(ProtocolError::UnknownPlaceholder { .. })));
    }

    #[test]
    fn builtin_templates_pass_placeholder_check() {
        Templates::builtin().check().unwrap();
    }

    #[test]
    fn valid_sub_answer_parses() {
        let text = "<think>Oval, dark.</think>\n<answer>\necho: Hypoechoic\ncalcification: absent\nboundary: clear\nedge: smooth\n</answer>";
        let p = parse_output(AgentRole::SubAttribute, text, &tax());
        assert!(p.format_valid, "{:?}", p.diagnostics);
        assert_eq!(p.rationale.as_deref(), Some("Oval, dark."));
        assert_eq!(p.attributes(), Some(&AttributeSet::new("hypoechoic", "absent", "clear", "smooth")));
        assert_eq!(format_reward(&p), 1.0);
    }

    #[test]
    fn missing_slot_is_named() {
        let text = "<think>x</think><answer>\necho: hypoechoic\ncalcification: absent\nedge: smooth\n</answer>";
        let p = parse_output(AgentRole::SubAttribute, text, &tax());
        assert!(!p.format_valid);
        assert!(p.diagnostics.iter().any(|d| d == "missing slot: boundary"));
        assert_eq!(p.attributes().unwrap().boundary, Label::Unparseable);
        assert_eq!(p.attributes().unwrap().echo, Label::known("hypoechoic"));
        assert_eq!(format_reward(&p), 0.0);
    }

    #[test]
    fn unknown_value_invalidates_format() {
        let text = "<think>x</think><answer>\necho: ultrabright\ncalcification: absent\nboundary: clear\nedge: smooth\n</answer>";
        let p = parse_output(AgentRole::SubAttribute, text, &tax());
        assert!(!p.format_valid);
        assert!(p.diagnostics[0].contains("echo"));
        assert_eq!(format_reward(&p), 0.0);
    }

    #[test]
    fn box_parses() {
        let p = parse_output(AgentRole::MainLocalizer, "<think>here</think>\n<box>[30, 40, 200, 220]</box>", &tax());
        assert!(p.format_valid);
        assert_eq!(p.box_coords(), Some(BoxCoords { x1: 30, y1: 40, x2: 200, y2: 220 }));
        let p = parse_output(AgentRole::MainLocalizer, "<think></think><box>[30,40,200,220]</box>", &tax());
        assert!(p.format_valid);
    }

    #[test]
    fn malformed_boxes_are_invalid() {
        for bad in [
            "<think>a</think><box>[30, 40, 200]</box>",
            "<think>a</think><box>[30, -40, 200, 220]</box>",
            "<think>a</think><box>[300, 40, 200, 220]</box>",
            "<think>a</think><box>30, 40, 200, 220</box>",
            "<think>a</think><box>[30, 40, 200, 220]",
            "<box>[30, 40, 200, 220]</box>",
            "garbage",
        ] {
            let p = parse_output(AgentRole::MainLocalizer, bad, &tax());
            assert!(!p.format_valid, "{bad}");
        }
    }

    #[test]
    fn trailing_text_is_tolerated_but_flagged() {
        let p = parse_output(AgentRole::MainLocalizer, "<think>a</think><box>[1, 2, 3, 4]</box> thanks!", &tax());
        assert!(p.format_valid);
        assert!(p.diagnostics.iter().any(|d| d.contains("trailing")));
    }

    #[test]
    fn text_between_think_and_answer_is_invalid() {
        let p = parse_output(AgentRole::MainLocalizer, "<think>a</think> so: <box>[1, 2, 3, 4]</box>", &tax());
        assert!(!p.format_valid);
        assert!(p.box_coords().is_some());
    }

    #[test]
    fn diagnosis_with_confidence() {
        let text = "<think>r</think>\n<answer>\nmalignancy: Malignant\nbirads: 4c\nconfidence: 0.83\n</answer>";
        let p = parse_output(AgentRole::MainIntegrator, text, &tax());
        assert!(p.format_valid, "{:?}", p.diagnostics);
        let d = p.diagnosis().unwrap();
        assert_eq!(d.diagnosis, Diagnosis::new(Malignancy::Malignant, "4C"));
        assert_eq!(d.confidence, Some(0.83));
    }

    #[test]
    fn inconsistent_confidence_is_invalid() {
        let text = "<think>r</think><answer>\nmalignancy: benign\nbirads: 3\nconfidence: 0.9\n</answer>";
        assert!(!parse_output(AgentRole::MainIntegrator, text, &tax()).format_valid);
    }

    #[test]
    fn duplicate_or_extra_keys_are_invalid() {
        let dup = "<think>r</think><answer>\nmalignancy: benign\nmalignancy: malignant\nbirads: 3\n</answer>";
        assert!(!parse_output(AgentRole::MainIntegrator, dup, &tax()).format_valid);
        let extra = "<think>r</think><answer>\nmalignancy: benign\nbirads: 3\nnote: hi\n</answer>";
        assert!(!parse_output(AgentRole::MainIntegrator, extra, &tax()).format_valid);
    }

    #[test]
    fn rewriter_payload_carries_rationale() {
        let text = render_diagnosis_answer("New reasoning.", &Diagnosis::new(Malignancy::Benign, "3"), None);
        let p = parse_output(AgentRole::Rewriter, &text, &tax());
        assert!(p.format_valid);
        match p.payload {
            Some(Payload::Rewrite { rationale, answer }) => {
                assert_eq!(rationale, "New reasoning.");
                assert_eq!(answer.diagnosis.birads, "3");
            }
            other => panic!("{other:?}"),
        }
        let empty = render_diagnosis_answer("", &Diagnosis::new(Malignancy::Benign, "3"), None);
        assert!(!parse_output(AgentRole::Rewriter, &empty, &tax()).format_valid);
    }

    fn attr_strategy() -> impl Strategy<Value = AttributeSet> {
        let t = Taxonomy::default();
        (
            prop::sample::select(t.echo.clone()),
            prop::sample::select(t.calcification.clone()),
            prop::sample::select(t.boundary.clone()),
            prop::sample::select(t.edge.clone()),
        )
            .prop_map(|(a, b, c, d)| AttributeSet::new(&a, &b, &c, &d))
    }

    proptest! {
        #[test]
        fn attribute_round_trip(attrs in attr_strategy(), r in "[a-zA-Z ,.]{0,40}") {
            let text = render_attribute_answer(&r, &attrs);
            let p = parse_output(AgentRole::SubAttribute, &text, &Taxonomy::default());
            prop_assert!(p.format_valid);
            prop_assert_eq!(p.attributes(), Some(&attrs));
            prop_assert_eq!(p.rationale.as_deref(), Some(r.trim()));
        }

        #[test]
        fn box_round_trip(x1 in 0u32..5000, y1 in 0u32..5000, w in 1u32..5000, h in 1u32..5000) {
            let b = BoxCoords { x1, y1, x2: x1 + w, y2: y1 + h };
            let p = parse_output(AgentRole::MainLocalizer, &render_box_answer("r", &b), &Taxonomy::default());
            prop_assert!(p.format_valid);
            prop_assert_eq!(p.box_coords(), Some(b));
        }
    }
}
