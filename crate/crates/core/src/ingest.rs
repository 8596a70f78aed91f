//! Annotation manifests.
//!
//! A manifest is a line-delimited JSON file. The first line is a header,
//! every following non-blank line is one case:
//!
//! ```text
//! {"schema_version":1,"taxonomy":"taxonomy.toml"}
//! {"case_id":"busi-0001","image_path":"busi/0001.png","dataset":"BUSI","split":"test",
//!  "gt_box":[120,88,310,240],"width":560,"height":420,
//!  "attributes":{"echo":"hypoechoic","calcification":"absent","boundary":"clear","edge":"smooth"},
//!  "malignancy":"benign","birads":"3"}
//! ```
//!
//! Boxes are in native image pixels.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{
    validate_case, AttributeSet, AttributeSlot, BusCase, CaseError, Diagnosis, Label, LesionBox, Malignancy, Slot,
    Split, Taxonomy,
};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub schema_version: u32,
    /// Taxonomy file, relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<String>,
}

impl Default for ManifestHeader {
    fn default() -> Self {
        Self { schema_version: MANIFEST_SCHEMA_VERSION, taxonomy: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawAttributes {
    pub echo: Option<String>,
    pub calcification: Option<String>,
    pub boundary: Option<String>,
    pub edge: Option<String>,
}

/// A case line as written; every field is optional so that missing fields
/// are reported rather than rejected by the decoder.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRecord {
    pub case_id: Option<String>,
    pub image_path: Option<String>,
    pub dataset: Option<String>,
    pub split: Option<String>,
    pub gt_box: Option<[f64; 4]>,
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub attributes: Option<RawAttributes>,
    pub malignancy: Option<String>,
    pub birads: Option<String>,
}

impl From<&BusCase> for RawRecord {
    fn from(c: &BusCase) -> Self {
        let s = |slot| c.gt_attributes.get(slot).as_known().map(str::to_string);
        Self {
            case_id: Some(c.case_id.clone()),
            image_path: Some(c.image_path.clone()),
            dataset: Some(c.dataset.clone()),
            split: Some(c.split.as_str().into()),
            gt_box: Some(c.gt_box.coords()),
            width: Some(c.gt_box.frame_w),
            height: Some(c.gt_box.frame_h),
            attributes: Some(RawAttributes {
                echo: s(AttributeSlot::Echo),
                calcification: s(AttributeSlot::Calcification),
                boundary: s(AttributeSlot::Boundary),
                edge: s(AttributeSlot::Edge),
            }),
            malignancy: Some(c.gt_diagnosis.malignancy.as_str().into()),
            birads: Some(c.gt_diagnosis.birads.clone()),
        }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest has no header line")]
    MissingHeader,
    #[error("malformed manifest header: {0}")]
    BadHeader(String),
    #[error("unsupported manifest schema version {0} (supported: {MANIFEST_SCHEMA_VERSION})")]
    UnsupportedVersion(u32),
    #[error("duplicate case_id {case_id:?} on lines {first_line} and {second_line}")]
    DuplicateCaseId { case_id: String, first_line: usize, second_line: usize },
    #[error("line {line}: invalid case{}: {}", .case_id.as_ref().map(|c| format!(" {c}")).unwrap_or_default(), .issues.join("; "))]
    Invalid { line: usize, case_id: Option<String>, issues: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportEntry {
    /// 1-based line number in the manifest.
    pub line: usize,
    pub case_id: Option<String>,
    pub issues: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Case lines read.
    pub records: usize,
    pub accepted: usize,
    pub excluded: Vec<ReportEntry>,
}

#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub header: ManifestHeader,
    pub cases: Vec<BusCase>,
    pub report: ValidationReport,
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Abort on the first invalid case instead of excluding it.
    pub strict: bool,
    /// Read each image's dimensions from this root and check the box against them.
    pub image_root: Option<PathBuf>,
}

pub fn load_manifest(path: impl AsRef<Path>, taxonomy: &Taxonomy, opts: &LoadOptions) -> Result<LoadedManifest, IngestError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| IngestError::Io { path: path.into(), source })?;
    parse_manifest(&text, taxonomy, opts)
}

pub fn parse_manifest(text: &str, taxonomy: &Taxonomy, opts: &LoadOptions) -> Result<LoadedManifest, IngestError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or(IngestError::MissingHeader)?;
    let header: ManifestHeader = serde_json::from_str(first).map_err(|e| IngestError::BadHeader(e.to_string()))?;
    if header.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(IngestError::UnsupportedVersion(header.schema_version));
    }

    let mut cases = Vec::new();
    let mut report = ValidationReport::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (ix, line) in lines {
        let line_no = ix + 1;
        report.records += 1;
        let outcome = match serde_json::from_str::<RawRecord>(line) {
            Ok(raw) => {
                if let Some(id) = &raw.case_id {
                    if let Some(&first_line) = seen.get(id) {
                        return Err(IngestError::DuplicateCaseId { case_id: id.clone(), first_line, second_line: line_no });
                    }
                    seen.insert(id.clone(), line_no);
                }
                let id = raw.case_id.clone();
                convert(raw, taxonomy, opts).map_err(|issues| (id, issues))
            }
            Err(e) => Err((None, vec![format!("malformed record: {e}")])),
        };
        match outcome {
            Ok(c) => cases.push(c),
            Err((case_id, issues)) => {
                if opts.strict {
                    return Err(IngestError::Invalid { line: line_no, case_id, issues });
                }
                log::warn!("manifest line {line_no}: excluded: {}", issues.join("; "));
                report.excluded.push(ReportEntry { line: line_no, case_id, issues });
            }
        }
    }
    report.accepted = cases.len();
    Ok(LoadedManifest { header, cases, report })
}

fn label(taxonomy: &Taxonomy, raw: &str, slot: Slot) -> Label {
    match taxonomy.normalize(raw, slot) {
        Label::Unparseable => Label::Known(raw.trim().to_string()),
        l => l,
    }
}

fn convert(raw: RawRecord, taxonomy: &Taxonomy, opts: &LoadOptions) -> Result<BusCase, Vec<String>> {
    let mut issues = Vec::new();
    let mut need = |name: &str, present: bool| {
        if !present {
            issues.push(CaseError::MissingField { field: name.into() }.to_string());
        }
    };
    need("case_id", raw.case_id.is_some());
    need("image_path", raw.image_path.is_some());
    need("dataset", raw.dataset.is_some());
    need("split", raw.split.is_some());
    need("gt_box", raw.gt_box.is_some());
    need("width", raw.width.is_some());
    need("height", raw.height.is_some());
    need("malignancy", raw.malignancy.is_some());
    need("birads", raw.birads.is_some());
    let attrs = raw.attributes.unwrap_or_default();
    for (slot, v) in [
        (AttributeSlot::Echo, &attrs.echo),
        (AttributeSlot::Calcification, &attrs.calcification),
        (AttributeSlot::Boundary, &attrs.boundary),
        (AttributeSlot::Edge, &attrs.edge),
    ] {
        need(&format!("attributes.{}", slot.key()), v.is_some());
    }

    let split = raw.split.as_deref().and_then(|s| {
        let p = Split::parse(s);
        if p.is_none() {
            issues.push(format!("invalid split {s:?}"));
        }
        p
    });
    let malignancy = raw.malignancy.as_deref().and_then(|m| {
        let p = Malignancy::parse(m);
        if p.is_none() {
            issues.push(CaseError::UnknownTaxonomyValue { slot: "malignancy".into(), value: m.into() }.to_string());
        }
        p
    });
    if !issues.is_empty() {
        return Err(issues);
    }

    let (w, h) = (raw.width.unwrap(), raw.height.unwrap());
    let [x1, y1, x2, y2] = raw.gt_box.unwrap();
    let image_path = raw.image_path.unwrap();
    let dims = match &opts.image_root {
        Some(root) => {
            let p = root.join(&image_path);
            match image::image_dimensions(&p) {
                Ok(d) => d,
                Err(e) => return Err(vec![format!("image-unreadable: {}: {e}", p.display())]),
            }
        }
        None => (w, h),
    };
    let a = |v: &Option<String>, slot: AttributeSlot| label(taxonomy, v.as_deref().unwrap(), slot.into());
    let case = BusCase {
        case_id: raw.case_id.unwrap(),
        image_path,
        dataset: raw.dataset.unwrap(),
        split: split.unwrap(),
        gt_box: LesionBox::unchecked(x1, y1, x2, y2, w, h),
        gt_attributes: AttributeSet {
            echo: a(&attrs.echo, AttributeSlot::Echo),
            calcification: a(&attrs.calcification, AttributeSlot::Calcification),
            boundary: a(&attrs.boundary, AttributeSlot::Boundary),
            edge: a(&attrs.edge, AttributeSlot::Edge),
        },
        gt_diagnosis: Diagnosis {
            malignancy: malignancy.unwrap(),
            birads: label(taxonomy, raw.birads.as_deref().unwrap(), Slot::Birads).as_known().unwrap_or_default().into(),
        },
    };
    validate_case(case, taxonomy, dims).map_err(|errs| errs.iter().map(ToString::to_string).collect())
}

/// Writes cases in manifest format.
pub fn write_manifest<W: Write>(mut out: W, header: &ManifestHeader, cases: &[BusCase]) -> std::io::Result<()> {
    writeln!(out, "{}", serde_json::to_string(header)?)?;
    for c in cases {
        writeln!(out, "{}", serde_json::to_string(&RawRecord::from(c))?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum DatasetFilter {
    #[default]
    All,
    Only(BTreeSet<String>),
}

impl DatasetFilter {
    pub fn only<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Self {
        DatasetFilter::Only(names.into_iter().map(Into::into).collect())
    }

    pub fn accepts(&self, dataset: &str) -> bool {
        match self {
            DatasetFilter::All => true,
            DatasetFilter::Only(set) => set.contains(dataset),
        }
    }
}

/// Order-preserving filter; `split = None` keeps every split.
pub fn split_filter(cases: &[BusCase], split: Option<Split>, datasets: &DatasetFilter) -> Vec<BusCase> {
    cases
        .iter()
        .filter(|c| split.is_none_or(|s| c.split == s) && datasets.accepts(&c.dataset))
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::tests::sample_case;

    fn manifest(cases: &[BusCase]) -> String {
        let mut buf = Vec::new();
        write_manifest(&mut buf, &ManifestHeader::default(), cases).unwrap();
        String::from_utf8(buf).unwrap()
    }

    fn cases(n: usize) -> Vec<BusCase> {
        (0..n)
            .map(|i| {
                let mut c = sample_case();
                c.case_id = format!("c{i}");
                c.dataset = ["BUSI", "BrEaST"][i % 2].into();
                c.split = [Split::Train, Split::Test][(i / 2) % 2];
                c
            })
            .collect()
    }

    #[test]
    fn valid_manifest_round_trips() {
        let cs = cases(4);
        let m = parse_manifest(&manifest(&cs), &Taxonomy::default(), &LoadOptions::default()).unwrap();
        assert_eq!(m.cases, cs);
        assert_eq!(m.report, ValidationReport { records: 4, accepted: 4, excluded: vec![] });
    }

    #[test]
    fn labels_are_normalized() {
        let text = manifest(&cases(1)).replace("\"hypoechoic\"", "\" HypoEchoic \"").replace("\"4C\"", "\"4c\"");
        let m = parse_manifest(&text, &Taxonomy::default(), &LoadOptions::default()).unwrap();
        assert_eq!(m.cases[0].gt_attributes.echo, Label::known("hypoechoic"));
        assert_eq!(m.cases[0].gt_diagnosis.birads, "4C");
    }

    #[test]
    fn out_of_bounds_box_lenient_and_strict() {
        let mut cs = cases(4);
        cs[2].gt_box = LesionBox::unchecked(700.0, 10.0, 900.0, 100.0, 800, 600);
        let text = manifest(&cs);
        let m = parse_manifest(&text, &Taxonomy::default(), &LoadOptions::default()).unwrap();
        assert_eq!(m.cases.len(), 3);
        assert_eq!(m.report.excluded.len(), 1);
        assert_eq!(m.report.excluded[0].line, 4);
        assert!(m.report.excluded[0].issues[0].starts_with("box-out-of-bounds"));
        assert_eq!(m.report.records, m.report.accepted + m.report.excluded.len());

        let strict = LoadOptions { strict: true, ..Default::default() };
        assert!(matches!(parse_manifest(&text, &Taxonomy::default(), &strict), Err(IngestError::Invalid { line: 4, .. })));
    }

    #[test]
    fn duplicate_case_id_aborts_with_both_lines() {
        let mut cs = cases(3);
        cs[2].case_id = "c0".into();
        match parse_manifest(&manifest(&cs), &Taxonomy::default(), &LoadOptions::default()) {
            Err(IngestError::DuplicateCaseId { case_id, first_line, second_line }) => {
                assert_eq!((case_id.as_str(), first_line, second_line), ("c0", 2, 4));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_and_unknown_fields_are_reported() {
        let text = "{\"schema_version\":1}\n{\"case_id\":\"x\",\"dataset\":\"BUSI\"}\n{\"case_id\":\"y\",\"bogus\":1}\n";
        let m = parse_manifest(text, &Taxonomy::default(), &LoadOptions::default()).unwrap();
        assert_eq!(m.report.excluded.len(), 2);
        assert!(m.report.excluded[0].issues.contains(&"missing-field: image_path".to_string()));
        assert!(m.report.excluded[1].issues[0].starts_with("malformed record"));

        let unknown = manifest(&cases(1)).replace("\"spiculated\"", "\"wavy\"");
        let m = parse_manifest(&unknown, &Taxonomy::default(), &LoadOptions::default()).unwrap();
        assert_eq!(m.report.excluded[0].issues, vec!["unknown-taxonomy-value: edge (\"wavy\")".to_string()]);
    }

    #[test]
    fn header_errors() {
        let t = Taxonomy::default();
        let o = LoadOptions::default();
        assert!(matches!(parse_manifest("", &t, &o), Err(IngestError::MissingHeader)));
        assert!(matches!(parse_manifest("{\"schema_version\":2}\n", &t, &o), Err(IngestError::UnsupportedVersion(2))));
        assert!(matches!(parse_manifest("not json\n", &t, &o), Err(IngestError::BadHeader(_))));
    }

    #[test]
    fn image_dimensions_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let cs = cases(2);
        std::fs::create_dir_all(dir.path().join("img")).unwrap();
        image::RgbImage::new(800, 600).save(dir.path().join("img/c1.png")).unwrap();
        let mut cs2 = cs.clone();
        cs2[1].image_path = "img/missing.png".into();
        let opts = LoadOptions { image_root: Some(dir.path().into()), ..Default::default() };
        let m = parse_manifest(&manifest(&cs2), &Taxonomy::default(), &opts).unwrap();
        assert_eq!(m.cases.len(), 1);
        assert!(m.report.excluded[0].issues[0].starts_with("image-unreadable"));

        image::RgbImage::new(400, 300).save(dir.path().join("img/c1.png")).unwrap();
        let m = parse_manifest(&manifest(&cs), &Taxonomy::default(), &opts).unwrap();
        assert!(m.report.excluded.iter().flat_map(|e| &e.issues).any(|i| i.starts_with("frame-mismatch")));
    }

    #[test]
    fn loading_is_deterministic() {
        let mut cs = cases(6);
        cs[1].gt_diagnosis.birads = "7".into();
        let text = manifest(&cs);
        let a = parse_manifest(&text, &Taxonomy::default(), &LoadOptions::default()).unwrap();
        let b = parse_manifest(&text, &Taxonomy::default(), &LoadOptions::default()).unwrap();
        assert_eq!((a.cases, a.report), (b.cases, b.report));
    }

    #[test]
    fn split_filters() {
        let cs = cases(8);
        let breast = split_filter(&cs, Some(Split::Test), &DatasetFilter::only(["BrEaST"]));
        assert!(!breast.is_empty());
        assert!(breast.iter().all(|c| c.dataset == "BrEaST" && c.split == Split::Test));
        assert!(split_filter(&cs, Some(Split::Test), &DatasetFilter::Only(BTreeSet::new())).is_empty());
        let train = split_filter(&cs, Some(Split::Train), &DatasetFilter::All);
        let test = split_filter(&cs, Some(Split::Test), &DatasetFilter::All);
        assert_eq!(train.len() + test.len(), cs.len());
        assert!(train.iter().all(|c| !test.contains(c)));
        assert_eq!(split_filter(&cs, None, &DatasetFilter::All), cs);
    }
}
