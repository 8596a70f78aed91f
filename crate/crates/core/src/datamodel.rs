//! Domain types shared by every stage of the pipeline: boxes, the attribute
//! taxonomy, diagnoses and annotated cases.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Axis-aligned lesion box in pixel coordinates of a stated frame.
///
/// The frame is carried with the coordinates so a box can never be compared
/// against a box from a differently sized image by accident.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub frame_w: u32,
    pub frame_h: u32,
}

/// A single invariant violation of a [`LesionBox`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxViolation {
    NonFinite,
    Degenerate,
    OutOfBounds,
}

impl LesionBox {
    /// Builds a box, rejecting anything that violates the box invariants.
    pub fn new(
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        frame_w: u32,
        frame_h: u32,
    ) -> Result<Self, BoxViolation> {
        let b = Self::unchecked(x1, y1, x2, y2, frame_w, frame_h);
        match b.violations().first() {
            Some(v) => Err(*v),
            None => Ok(b),
        }
    }

    pub const fn unchecked(x1: f64, y1: f64, x2: f64, y2: f64, frame_w: u32, frame_h: u32) -> Self {
        Self { x1, y1, x2, y2, frame_w, frame_h }
    }

    /// The box covering the whole frame.
    pub fn full_frame(frame_w: u32, frame_h: u32) -> Self {
        Self::unchecked(0.0, 0.0, frame_w as f64, frame_h as f64, frame_w, frame_h)
    }

    /// Every invariant the box breaks, checked against its own frame.
    pub fn violations(&self) -> Vec<BoxViolation> {
        self.violations_in(self.frame_w, self.frame_h)
    }

    /// Every invariant the box breaks when interpreted inside a `w`×`h` image.
    pub fn violations_in(&self, w: u32, h: u32) -> Vec<BoxViolation> {
        let coords = [self.x1, self.y1, self.x2, self.y2];
        if coords.iter().any(|c| !c.is_finite()) {
            return vec![BoxViolation::NonFinite];
        }
        let mut out = Vec::new();
        if self.x1 >= self.x2 || self.y1 >= self.y2 {
            out.push(BoxViolation::Degenerate);
        }
        if self.x1 < 0.0 || self.y1 < 0.0 || self.x2 > w as f64 || self.y2 > h as f64 {
            out.push(BoxViolation::OutOfBounds);
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.violations().is_empty()
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        (self.width().max(0.0)) * (self.height().max(0.0))
    }

    pub fn same_frame(&self, other: &LesionBox) -> bool {
        self.frame_w == other.frame_w && self.frame_h == other.frame_h
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl fmt::Display for LesionBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}, {}, {}, {}]@{}x{}",
            self.x1, self.y1, self.x2, self.y2, self.frame_w, self.frame_h
        )
    }
}

/// One of the four attribute slots predicted by the attribute agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeSlot {
    Echo,
    Calcification,
    Boundary,
    Edge,
}

impl AttributeSlot {
    pub const ALL: [AttributeSlot; 4] = [
        AttributeSlot::Echo,
        AttributeSlot::Calcification,
        AttributeSlot::Boundary,
        AttributeSlot::Edge,
    ];

    /// Key used in answer blocks, manifests and reports.
    pub fn key(self) -> &'static str {
        match self {
            AttributeSlot::Echo => "echo",
            AttributeSlot::Calcification => "calcification",
            AttributeSlot::Boundary => "boundary",
            AttributeSlot::Edge => "edge",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.key() == key)
    }
}

/// Any slot with a configured value list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Attribute(AttributeSlot),
    Birads,
}

impl From<AttributeSlot> for Slot {
    fn from(s: AttributeSlot) -> Self {
        Slot::Attribute(s)
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slot::Attribute(a) => f.write_str(a.key()),
            Slot::Birads => f.write_str("birads"),
        }
    }
}

/// A slot value, or the marker left behind by a failed parse.
///
/// Serialized as a string, with `null` standing for `Unparseable`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "Option<String>", into = "Option<String>")]
pub enum Label {
    Known(String),
    Unparseable,
}

impl Label {
    pub fn known(s: impl Into<String>) -> Self {
        Label::Known(s.into())
    }

    pub fn as_known(&self) -> Option<&str> {
        match self {
            Label::Known(s) => Some(s),
            Label::Unparseable => None,
        }
    }

    pub fn is_unparseable(&self) -> bool {
        matches!(self, Label::Unparseable)
    }
}

impl From<Option<String>> for Label {
    fn from(v: Option<String>) -> Self {
        v.map_or(Label::Unparseable, Label::Known)
    }
}

impl From<Label> for Option<String> {
    fn from(l: Label) -> Self {
        match l {
            Label::Known(s) => Some(s),
            Label::Unparseable => None,
        }
    }
}

/// The four-slot attribute evidence for one lesion.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeSet {
    pub echo: Label,
    pub calcification: Label,
    pub boundary: Label,
    pub edge: Label,
}

impl AttributeSet {
    pub fn new(echo: &str, calcification: &str, boundary: &str, edge: &str) -> Self {
        Self {
            echo: Label::known(echo),
            calcification: Label::known(calcification),
            boundary: Label::known(boundary),
            edge: Label::known(edge),
        }
    }

    pub fn all_unparseable() -> Self {
        Self {
            echo: Label::Unparseable,
            calcification: Label::Unparseable,
            boundary: Label::Unparseable,
            edge: Label::Unparseable,
        }
    }

    pub fn get(&self, slot: AttributeSlot) -> &Label {
        match slot {
            AttributeSlot::Echo => &self.echo,
            AttributeSlot::Calcification => &self.calcification,
            AttributeSlot::Boundary => &self.boundary,
            AttributeSlot::Edge => &self.edge,
        }
    }

    pub fn get_mut(&mut self, slot: AttributeSlot) -> &mut Label {
        match slot {
            AttributeSlot::Echo => &mut self.echo,
            AttributeSlot::Calcification => &mut self.calcification,
            AttributeSlot::Boundary => &mut self.boundary,
            AttributeSlot::Edge => &mut self.edge,
        }
    }

    pub fn unparseable_count(&self) -> usize {
        AttributeSlot::ALL.iter().filter(|s| self.get(**s).is_unparseable()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Malignancy {
    Benign,
    Malignant,
}

impl Malignancy {
    pub fn as_str(self) -> &'static str {
        match self {
            Malignancy::Benign => "benign",
            Malignancy::Malignant => "malignant",
        }
    }

    /// Trimmed, case-insensitive exact match.
    pub fn parse(raw: &str) -> Option<Self> {
        let t = raw.trim();
        if t.eq_ignore_ascii_case("benign") {
            Some(Malignancy::Benign)
        } else if t.eq_ignore_ascii_case("malignant") {
            Some(Malignancy::Malignant)
        } else {
            None
        }
    }

    pub fn is_malignant(self) -> bool {
        self == Malignancy::Malignant
    }
}

impl fmt::Display for Malignancy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Malignancy label plus BI-RADS category.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Diagnosis {
    pub malignancy: Malignancy,
    pub birads: String,
}

impl Diagnosis {
    pub fn new(malignancy: Malignancy, birads: impl Into<String>) -> Self {
        Self { malignancy, birads: birads.into() }
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}, BI-RADS {}", self.malignancy, self.birads)
    }
}

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("cannot read taxonomy file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse taxonomy file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("taxonomy slot {0} has no values")]
    EmptySlot(String),
    #[error("taxonomy slot {slot} lists {value:?} more than once (case-insensitive)")]
    DuplicateValue { slot: String, value: String },
    #[error("taxonomy slot {slot} value {value:?} is blank or has surrounding whitespace")]
    BadValue { slot: String, value: String },
}

/// Ordered value lists for each attribute slot and for BI-RADS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub echo: Vec<String>,
    pub calcification: Vec<String>,
    pub boundary: Vec<String>,
    pub edge: Vec<String>,
    pub birads: Vec<String>,
}

impl Default for Taxonomy {
    fn default() -> Self {
        fn v(xs: &[&str]) -> Vec<String> {
            xs.iter().map(|s| s.to_string()).collect()
        }
        Self {
            echo: v(&["hypoechoic", "isoechoic", "hyperechoic", "anechoic", "mixed"]),
            calcification: v(&["present", "absent"]),
            boundary: v(&["clear", "unclear"]),
            edge: v(&["smooth", "lobulated", "angular", "spiculated"]),
            birads: v(&["2", "3", "4A", "4B", "4C", "5"]),
        }
    }
}

impl Taxonomy {
    /// Parses and validates a TOML taxonomy file.
    pub fn from_toml_str(text: &str) -> Result<Self, TaxonomyError> {
        let t: Taxonomy = toml::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TaxonomyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), TaxonomyError> {
        let slots = AttributeSlot::ALL
            .iter()
            .map(|s| (Slot::Attribute(*s), self.values(Slot::Attribute(*s))))
            .chain(std::iter::once((Slot::Birads, self.birads.as_slice())));
        for (slot, values) in slots {
            if values.is_empty() {
                return Err(TaxonomyError::EmptySlot(slot.to_string()));
            }
            let mut seen = HashSet::new();
            for v in values {
                if v.is_empty() || v.trim() != v {
                    return Err(TaxonomyError::BadValue { slot: slot.to_string(), value: v.clone() });
                }
                if !seen.insert(v.to_lowercase()) {
                    return Err(TaxonomyError::DuplicateValue {
                        slot: slot.to_string(),
                        value: v.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn values(&self, slot: Slot) -> &[String] {
        match slot {
            Slot::Attribute(AttributeSlot::Echo) => &self.echo,
            Slot::Attribute(AttributeSlot::Calcification) => &self.calcification,
            Slot::Attribute(AttributeSlot::Boundary) => &self.boundary,
            Slot::Attribute(AttributeSlot::Edge) => &self.edge,
            Slot::Birads => &self.birads,
        }
    }

    /// True when `value` is spelled exactly as a configured value.
    pub fn contains(&self, slot: Slot, value: &str) -> bool {
        self.values(slot).iter().any(|v| v == value)
    }

    pub fn normalize(&self, raw: &str, slot: Slot) -> Label {
        normalize_label(self, raw, slot)
    }
}

/// Maps free text onto the configured spelling of a slot value.
///
/// Trims and case-folds, then requires an exact match. No fuzzy matching.
pub fn normalize_label(taxonomy: &Taxonomy, raw: &str, slot: Slot) -> Label {
    let needle = raw.trim().to_lowercase();
    taxonomy
        .values(slot)
        .iter()
        .find(|v| v.to_lowercase() == needle)
        .map_or(Label::Unparseable, |v| Label::Known(v.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(raw: &str) -> Option<Self> {
        match raw.trim().to_lowercase().as_str() {
            "train" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One annotated ultrasound image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusCase {
    pub case_id: String,
    pub image_path: String,
    pub dataset: String,
    pub split: Split,
    /// Ground-truth box in native image coordinates.
    pub gt_box: LesionBox,
    pub gt_attributes: AttributeSet,
    pub gt_diagnosis: Diagnosis,
}

impl BusCase {
    pub fn native_dims(&self) -> (u32, u32) {
        (self.gt_box.frame_w, self.gt_box.frame_h)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CaseError {
    #[error("missing-field: {field}")]
    MissingField { field: String },
    #[error("degenerate box: {field}")]
    DegenerateBox { field: String },
    #[error("box-out-of-bounds: {field} {found} outside {width}x{height}")]
    BoxOutOfBounds { field: String, found: String, width: u32, height: u32 },
    #[error("non-finite coordinate: {field}")]
    NonFiniteCoordinate { field: String },
    #[error("frame-mismatch: {field} frame {found_w}x{found_h} but image is {width}x{height}")]
    FrameMismatch { field: String, found_w: u32, found_h: u32, width: u32, height: u32 },
    #[error("unknown-taxonomy-value: {slot} ({value:?})")]
    UnknownTaxonomyValue { slot: String, value: String },
}

impl CaseError {
    /// The field or slot the violation names.
    pub fn field(&self) -> &str {
        match self {
            CaseError::MissingField { field }
            | CaseError::DegenerateBox { field }
            | CaseError::BoxOutOfBounds { field, .. }
            | CaseError::NonFiniteCoordinate { field }
            | CaseError::FrameMismatch { field, .. } => field,
            CaseError::UnknownTaxonomyValue { slot, .. } => slot,
        }
    }
}

/// Checks every case invariant against the taxonomy and the image's native
/// `(width, height)`. Returns the case untouched, or every violation found.
pub fn validate_case(
    case: BusCase,
    taxonomy: &Taxonomy,
    image_dims: (u32, u32),
) -> Result<BusCase, Vec<CaseError>> {
    let mut errors = Vec::new();
    for (field, value) in [
        ("case_id", &case.case_id),
        ("image_path", &case.image_path),
        ("dataset", &case.dataset),
    ] {
        if value.trim().is_empty() {
            errors.push(CaseError::MissingField { field: field.into() });
        }
    }

    let (w, h) = image_dims;
    let b = &case.gt_box;
    for v in b.violations_in(w, h) {
        errors.push(match v {
            BoxViolation::NonFinite => CaseError::NonFiniteCoordinate { field: "gt_box".into() },
            BoxViolation::Degenerate => CaseError::DegenerateBox { field: "gt_box".into() },
            BoxViolation::OutOfBounds => CaseError::BoxOutOfBounds {
                field: "gt_box".into(),
                found: format!("[{}, {}, {}, {}]", b.x1, b.y1, b.x2, b.y2),
                width: w,
                height: h,
            },
        });
    }
    if b.frame_w != w || b.frame_h != h {
        errors.push(CaseError::FrameMismatch {
            field: "gt_box".into(),
            found_w: b.frame_w,
            found_h: b.frame_h,
            width: w,
            height: h,
        });
    }

    for slot in AttributeSlot::ALL {
        match case.gt_attributes.get(slot) {
            Label::Unparseable => errors.push(CaseError::MissingField {
                field: format!("gt_attributes.{}", slot.key()),
            }),
            Label::Known(v) if !taxonomy.contains(slot.into(), v) => {
                errors.push(CaseError::UnknownTaxonomyValue { slot: slot.key().into(), value: v.clone() })
            }
            Label::Known(_) => {}
        }
    }
    if !taxonomy.contains(Slot::Birads, &case.gt_diagnosis.birads) {
        errors.push(CaseError::UnknownTaxonomyValue {
            slot: "birads".into(),
            value: case.gt_diagnosis.birads.clone(),
        });
    }

    if errors.is_empty() {
        Ok(case)
    } else {
        Err(errors)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn sample_case() -> BusCase {
        BusCase {
            case_id: "c1".into(),
            image_path: "img/c1.png".into(),
            dataset: "BUSI".into(),
            split: Split::Test,
            gt_box: LesionBox::new(10.0, 10.0, 100.0, 100.0, 800, 600).unwrap(),
            gt_attributes: AttributeSet::new("hypoechoic", "absent", "unclear", "spiculated"),
            gt_diagnosis: Diagnosis::new(Malignancy::Malignant, "4C"),
        }
    }

    #[test]
    fn valid_case_is_accepted_unchanged() {
        let case = sample_case();
        let out = validate_case(case.clone(), &Taxonomy::default(), (800, 600)).unwrap();
        assert_eq!(out, case);
    }

    #[test]
    fn degenerate_box_is_reported() {
        let mut case = sample_case();
        case.gt_box.x2 = case.gt_box.x1;
        let errs = validate_case(case, &Taxonomy::default(), (800, 600)).unwrap_err();
        assert_eq!(errs, vec![CaseError::DegenerateBox { field: "gt_box".into() }]);
        assert!(errs[0].to_string().contains("degenerate box"));
    }

    #[test]
    fn unknown_echo_value_is_named() {
        let mut case = sample_case();
        case.gt_attributes.echo = Label::known("ultrabright");
        let errs = validate_case(case, &Taxonomy::default(), (800, 600)).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert!(errs[0].to_string().starts_with("unknown-taxonomy-value: echo"));
    }

    #[test]
    fn all_violations_are_collected() {
        let mut case = sample_case();
        case.case_id.clear();
        case.gt_box.x2 = 900.0;
        case.gt_attributes.edge = Label::Unparseable;
        case.gt_diagnosis.birads = "7".into();
        let errs = validate_case(case, &Taxonomy::default(), (800, 600)).unwrap_err();
        let fields: Vec<&str> = errs.iter().map(|e| e.field()).collect();
        assert_eq!(fields, vec!["case_id", "gt_box", "gt_attributes.edge", "birads"]);
    }

    #[test]
    fn frame_mismatch_is_reported() {
        let case = sample_case();
        let errs = validate_case(case, &Taxonomy::default(), (1000, 600)).unwrap_err();
        assert!(matches!(errs[0], CaseError::FrameMismatch { .. }));
    }

    #[test]
    fn normalize_trims_and_folds_case() {
        let t = Taxonomy::default();
        assert_eq!(normalize_label(&t, " Hypoechoic ", AttributeSlot::Echo.into()), Label::known("hypoechoic"));
        assert_eq!(normalize_label(&t, "hypo-echoic", AttributeSlot::Echo.into()), Label::Unparseable);
        assert_eq!(normalize_label(&t, "4a", Slot::Birads), Label::known("4A"));
        assert_eq!(normalize_label(&t, "", Slot::Birads), Label::Unparseable);
    }

    #[test]
    fn taxonomy_rejects_duplicates_and_empty_lists() {
        let mut t = Taxonomy::default();
        t.edge.push("Smooth".into());
        assert!(matches!(t.validate(), Err(TaxonomyError::DuplicateValue { .. })));
        let mut t = Taxonomy::default();
        t.birads.clear();
        assert!(matches!(t.validate(), Err(TaxonomyError::EmptySlot(_))));
    }

    #[test]
    fn shipped_taxonomy_config_matches_default() {
        let text = include_str!("../../../config/taxonomy.toml");
        assert_eq!(Taxonomy::from_toml_str(text).unwrap(), Taxonomy::default());
    }

    #[test]
    fn label_serializes_as_nullable_string() {
        let s = serde_json::to_string(&AttributeSet {
            echo: Label::Unparseable,
            ..AttributeSet::new("a", "b", "c", "d")
        })
        .unwrap();
        assert_eq!(s, r#"{"echo":null,"calcification":"b","boundary":"c","edge":"d"}"#);
    }

    #[derive(Debug, Clone)]
    enum Mutation {
        BlankId,
        BlankPath,
        Degenerate,
        OutOfBounds,
        NonFinite,
        UnknownValue(AttributeSlot),
        MissingAttr(AttributeSlot),
        UnknownBirads,
    }

    fn mutation() -> impl Strategy<Value = Mutation> {
        let slot = prop::sample::select(AttributeSlot::ALL.to_vec());
        prop_oneof![
            Just(Mutation::BlankId),
            Just(Mutation::BlankPath),
            Just(Mutation::Degenerate),
            Just(Mutation::OutOfBounds),
            Just(Mutation::NonFinite),
            slot.clone().prop_map(Mutation::UnknownValue),
            slot.prop_map(Mutation::MissingAttr),
            Just(Mutation::UnknownBirads),
        ]
    }

    proptest! {
        #[test]
        fn any_single_violation_is_reported(
            m in mutation(),
            w in 2u32..2000,
            h in 2u32..2000,
            fx in 0.0f64..1.0, fy in 0.0f64..1.0,
        ) {
            let x1 = (fx * (w - 1) as f64).floor();
            let y1 = (fy * (h - 1) as f64).floor();
            let mut case = sample_case();
            case.gt_box = LesionBox::new(x1, y1, w as f64, h as f64, w, h).unwrap();
            let taxonomy = Taxonomy::default();
            prop_assert!(validate_case(case.clone(), &taxonomy, (w, h)).is_ok());

            let expected_field = match &m {
                Mutation::BlankId => { case.case_id = " ".into(); "case_id".to_string() }
                Mutation::BlankPath => { case.image_path.clear(); "image_path".to_string() }
                Mutation::Degenerate => { case.gt_box.y2 = case.gt_box.y1; "gt_box".to_string() }
                Mutation::OutOfBounds => { case.gt_box.x2 = w as f64 + 1.0; "gt_box".to_string() }
                Mutation::NonFinite => { case.gt_box.x1 = f64::NAN; "gt_box".to_string() }
                Mutation::UnknownValue(s) => { *case.gt_attributes.get_mut(*s) = Label::known("zzz"); s.key().to_string() }
                Mutation::MissingAttr(s) => { *case.gt_attributes.get_mut(*s) = Label::Unparseable; format!("gt_attributes.{}", s.key()) }
                Mutation::UnknownBirads => { case.gt_diagnosis.birads = "4D".into(); "birads".to_string() }
            };
            let errs = validate_case(case, &taxonomy, (w, h)).unwrap_err();
            prop_assert_eq!(errs.len(), 1);
            prop_assert_eq!(errs[0].field(), expected_field.as_str());
        }

        #[test]
        fn normalize_is_idempotent(raw in "[ A-Za-z0-9-]{0,12}", slot_ix in 0usize..5) {
            let t = Taxonomy::default();
            let slot = if slot_ix == 4 { Slot::Birads } else { AttributeSlot::ALL[slot_ix].into() };
            if let Label::Known(v) = normalize_label(&t, &raw, slot) {
                prop_assert_eq!(normalize_label(&t, &v, slot), Label::Known(v));
            }
        }

        #[test]
        fn normalize_accepts_case_and_padding_variants(ix in 0usize..5, upper in any::<bool>(), pad in 0usize..3) {
            let t = Taxonomy::default();
            let v = &t.echo[ix];
            let raw = format!("{}{}{}", " ".repeat(pad), if upper { v.to_uppercase() } else { v.clone() }, "\t".repeat(pad));
            prop_assert_eq!(normalize_label(&t, &raw, AttributeSlot::Echo.into()), Label::Known(v.clone()));
        }
    }
}
