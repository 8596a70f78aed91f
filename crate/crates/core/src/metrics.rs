//! Evaluation metrics and per-dataset / pooled reports.
//!
//! Metrics that are undefined on the given data (single-class AUC, κ with
//! chance agreement of 1) are `None` and render as `n/a`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datamodel::{AttributeSet, AttributeSlot, Label, Malignancy, Slot, Taxonomy};
use crate::imaging::iou;
use crate::orchestrator::{AttributeSource, Trajectory};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Mann–Whitney AUC: the probability that a random positive outscores a
/// random negative, ties counting half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Cohen's κ from a square confusion matrix (rows = truth, columns = prediction).
pub fn cohen_kappa(confusion: &[Vec<u64>]) -> Option<f64> {
    let k = confusion.len();
    assert!(confusion.iter().all(|r| r.len() == k), "confusion matrix must be square");
    let n: u64 = confusion.iter().flatten().sum();
    if n == 0 {
        return None;
    }
    let nf = n as f64;
    let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();
    let p_o = trace as f64 / nf;
    let p_e: f64 = (0..k)
        .map(|i| {
            let row: u64 = confusion[i].iter().sum();
            let col: u64 = confusion.iter().map(|r| r[i]).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (nf * nf);
    if p_e >= 1.0 {
        return None;
    }
    Some((p_o - p_e) / (1.0 - p_e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Suite {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
}

/// Accuracy, macro-F1 and weighted-F1 over class indices `0..k`.
///
/// `None` predictions are wrong for every class. Macro-F1 averages only the
/// classes present in `y_true`; weighted-F1 weights by true support.
pub fn f1_suite(y_true: &[usize], y_pred: &[Option<usize>], k: usize) -> Option<F1Suite> {
    assert_eq!(y_true.len(), y_pred.len(), "y_true and y_pred differ in length");
    if y_true.is_empty() {
        return None;
    }
    let mut tp = vec![0u64; k];
    let mut predicted = vec![0u64; k];
    let mut support = vec![0u64; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        support[t] += 1;
        if let Some(p) = p {
            predicted[p] += 1;
            if p == t {
                tp[p] += 1;
            }
        }
    }
    let n = y_true.len() as f64;
    let f1 = |c: usize| {
        let denom = predicted[c] + support[c];
        if denom == 0 { 0.0 } else { 2.0 * tp[c] as f64 / denom as f64 }
    };
    let present: Vec<usize> = (0..k).filter(|&c| support[c] > 0).collect();
    Some(F1Suite {
        accuracy: tp.iter().sum::<u64>() as f64 / n,
        macro_f1: present.iter().map(|&c| f1(c)).sum::<f64>() / present.len() as f64,
        weighted_f1: present.iter().map(|&c| support[c] as f64 * f1(c)).sum::<f64>() / n,
    })
}

/// [`f1_suite`] over string labels; `classes` fixes the class order and is
/// extended with any true label it lacks.
pub fn f1_suite_labels(y_true: &[&str], y_pred: &[Label], classes: &[String]) -> Option<F1Suite> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    for c in classes {
        let next = index.len();
        index.entry(c.as_str()).or_insert(next);
    }
    for t in y_true {
        let next = index.len();
        index.entry(t).or_insert(next);
    }
    let t: Vec<usize> = y_true.iter().map(|s| index[s]).collect();
    let p: Vec<Option<usize>> = y_pred.iter().map(|l| l.as_known().and_then(|s| index.get(s).copied())).collect();
    f1_suite(&t, &p, index.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    HardLabel,
    Confidence,
    /// No parseable diagnosis; scored 0.5 and counted as wrong.
    Missing,
}

/// One evaluated case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub case_id: String,
    pub dataset: String,
    pub gt_malignancy: Malignancy,
    pub gt_birads: String,
    pub pred_malignancy: Option<Malignancy>,
    /// Higher means more likely malignant.
    pub score: f64,
    pub score_source: ScoreSource,
    pub pred_birads: Label,
    pub iou: Option<f64>,
    pub gt_attributes: AttributeSet,
    /// Only set when the attributes came from the sub-agent.
    pub pred_attributes: Option<AttributeSet>,
}

impl PredictionRecord {
    pub fn from_trajectory(t: &Trajectory) -> Self {
        let c = &t.chain;
        let (pred_malignancy, score, score_source, pred_birads) = match &c.diagnosis {
            Some(d) => {
                let (score, src) = match c.confidence {
                    Some(p) => (p, ScoreSource::Confidence),
                    None => (if d.malignancy.is_malignant() { 1.0 } else { 0.0 }, ScoreSource::HardLabel),
                };
                (Some(d.malignancy), score, src, Label::known(d.birads.clone()))
            }
            None => (None, 0.5, ScoreSource::Missing, Label::Unparseable),
        };
        Self {
            case_id: t.case.case_id.clone(),
            dataset: t.case.dataset.clone(),
            gt_malignancy: t.case.gt_diagnosis.malignancy,
            gt_birads: t.case.gt_diagnosis.birads.clone(),
            pred_malignancy,
            score,
            score_source,
            pred_birads,
            iou: c.roi.and_then(|r| iou(&r, &t.gt_box_resized).ok()),
            gt_attributes: t.case.gt_attributes.clone(),
            pred_attributes: match c.attribute_source {
                Some(AttributeSource::Predicted) => c.attributes.clone(),
                _ => None,
            },
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.score.is_finite() {
            return Err(format!("{}: score is not finite", self.case_id));
        }
        if self.score_source == ScoreSource::Confidence {
            let by_score = self.score >= 0.5;
            if self.pred_malignancy.map(Malignancy::is_malignant) != Some(by_score) {
                return Err(format!("{}: hard label disagrees with score {}", self.case_id, self.score));
            }
        }
        Ok(())
    }

    pub fn malignancy_correct(&self) -> bool {
        self.pred_malignancy == Some(self.gt_malignancy)
    }

    pub fn birads_correct(&self) -> bool {
        self.pred_birads.as_known() == Some(self.gt_birads.as_str())
    }
}

/// Mergeable partial aggregate. Merging shards and finishing equals
/// finishing over the concatenated records.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    n: usize,
    scores: Vec<f64>,
    labels: Vec<bool>,
    malignancy_correct: usize,
    birads_correct: usize,
    /// (truth, prediction) → count; `None` prediction is unparseable.
    birads_pairs: BTreeMap<(String, Option<String>), u64>,
    iou_sum: f64,
    iou_n: usize,
    attributes: BTreeMap<AttributeSlot, (Vec<String>, Vec<Label>)>,
    sources: ScoreSourceCounts,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreSourceCounts {
    pub hard_label: usize,
    pub confidence: usize,
    pub missing: usize,
}

impl MetricAccumulator {
    pub fn push(&mut self, r: &PredictionRecord) {
        self.n += 1;
        self.scores.push(r.score);
        self.labels.push(r.gt_malignancy.is_malignant());
        self.malignancy_correct += r.malignancy_correct() as usize;
        self.birads_correct += r.birads_correct() as usize;
        let pred = r.pred_birads.as_known().map(str::to_string);
        *self.birads_pairs.entry((r.gt_birads.clone(), pred)).or_default() += 1;
        if let Some(v) = r.iou {
            self.iou_sum += v;
            self.iou_n += 1;
        }
        if let Some(p) = &r.pred_attributes {
            for slot in AttributeSlot::ALL {
                if let Some(gt) = r.gt_attributes.get(slot).as_known() {
                    let e = self.attributes.entry(slot).or_default();
                    e.0.push(gt.to_string());
                    e.1.push(p.get(slot).clone());
                }
            }
        }
        match r.score_source {
            ScoreSource::HardLabel => self.sources.hard_label += 1,
            ScoreSource::Confidence => self.sources.confidence += 1,
            ScoreSource::Missing => self.sources.missing += 1,
        }
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.n += other.n;
        self.scores.extend_from_slice(&other.scores);
        self.labels.extend_from_slice(&other.labels);
        self.malignancy_correct += other.malignancy_correct;
        self.birads_correct += other.birads_correct;
        for (k, v) in &other.birads_pairs {
            *self.birads_pairs.entry(k.clone()).or_default() += v;
        }
        self.iou_sum += other.iou_sum;
        self.iou_n += other.iou_n;
        for (slot, (t, p)) in &other.attributes {
            let e = self.attributes.entry(*slot).or_default();
            e.0.extend(t.iter().cloned());
            e.1.extend(p.iter().cloned());
        }
        self.sources.hard_label += other.sources.hard_label;
        self.sources.confidence += other.sources.confidence;
        self.sources.missing += other.sources.missing;
    }

    /// BI-RADS confusion matrix; the last column counts unparseable predictions.
    pub fn birads_confusion(&self, taxonomy: &Taxonomy) -> (Vec<String>, Vec<Vec<u64>>) {
        let mut classes: Vec<String> = Vec::new();
        let seen = |c: &str| self.birads_pairs.keys().any(|(t, p)| t == c || p.as_deref() == Some(c));
        for c in &taxonomy.birads {
            if seen(c) {
                classes.push(c.clone());
            }
        }
        for (t, p) in self.birads_pairs.keys() {
            for c in std::iter::once(t).chain(p.iter()) {
                if !classes.contains(c) {
                    classes.push(c.clone());
                }
            }
        }
        let k = classes.len() + 1;
        let mut m = vec![vec![0u64; k]; k];
        let ix = |c: &str| classes.iter().position(|x| x == c).expect("class indexed");
        for ((t, p), &count) in &self.birads_pairs {
            let col = p.as_deref().map_or(k - 1, ix);
            m[ix(t)][col] += count;
        }
        (classes, m)
    }

    pub fn finish(&self, taxonomy: &Taxonomy) -> MetricBlock {
        if self.n == 0 {
            return MetricBlock::empty();
        }
        let n = self.n as f64;
        let attributes = self
            .attributes
            .iter()
            .map(|(slot, (t, p))| {
                let refs: Vec<&str> = t.iter().map(String::as_str).collect();
                let suite = f1_suite_labels(&refs, p, taxonomy.values(Slot::from(*slot)));
                (slot.key().to_string(), AttributeMetrics { n: t.len(), suite })
            })
            .collect();
        MetricBlock {
            n: self.n,
            empty: false,
            auc: roc_auc(&self.scores, &self.labels),
            score_sources: self.sources,
            accuracy: Some(self.malignancy_correct as f64 / n),
            birads_accuracy: Some(self.birads_correct as f64 / n),
            kappa: cohen_kappa(&self.birads_confusion(taxonomy).1),
            mean_iou: (self.iou_n > 0).then(|| self.iou_sum / self.iou_n as f64),
            iou_n: self.iou_n,
            attributes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeMetrics {
    pub n: usize,
    #[serde(flatten)]
    pub suite: Option<F1Suite>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub n: usize,
    /// No records fell in this block.
    pub empty: bool,
    pub auc: Option<f64>,
    pub score_sources: ScoreSourceCounts,
    pub accuracy: Option<f64>,
    pub birads_accuracy: Option<f64>,
    pub kappa: Option<f64>,
    pub mean_iou: Option<f64>,
    pub iou_n: usize,
    /// Keyed by attribute slot; present only for predicted attributes.
    pub attributes: BTreeMap<String, AttributeMetrics>,
}

impl MetricBlock {
    fn empty() -> Self {
        Self {
            n: 0,
            empty: true,
            auc: None,
            score_sources: ScoreSourceCounts::default(),
            accuracy: None,
            birads_accuracy: None,
            kappa: None,
            mean_iou: None,
            iou_n: 0,
            attributes: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub datasets: BTreeMap<String, MetricBlock>,
    /// Computed over all records together, not by averaging datasets.
    pub pooled: MetricBlock,
}

/// Per-dataset blocks plus the pooled block. Every dataset in `partition`
/// gets a block, flagged empty when it has no records.
pub fn build_report(records: &[PredictionRecord], partition: &[String], taxonomy: &Taxonomy) -> MetricReport {
    let mut shards: BTreeMap<String, MetricAccumulator> =
        partition.iter().map(|d| (d.clone(), MetricAccumulator::default())).collect();
    for r in records {
        shards.entry(r.dataset.clone()).or_default().push(r);
    }
    let mut pooled = MetricAccumulator::default();
    for acc in shards.values() {
        pooled.merge(acc);
    }
    MetricReport {
        schema_version: REPORT_SCHEMA_VERSION,
        datasets: shards.iter().map(|(d, a)| (d.clone(), a.finish(taxonomy))).collect(),
        pooled: pooled.finish(taxonomy),
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"))
}

/// Aligned text tables: diagnosis metrics, then attribute metrics.
pub fn render_table(report: &MetricReport) -> String {
    let rows: Vec<(&str, &MetricBlock)> = report
        .datasets
        .iter()
        .map(|(d, b)| (d.as_str(), b))
        .chain(std::iter::once(("Overall", &report.pooled)))
        .collect();
    let name_w = rows.iter().map(|(d, _)| d.len()).max().unwrap_or(7).max(7);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<name_w$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}  {}",
        "Dataset", "N", "AUC", "Acc", "Bi-Acc", "Kappa", "IoU", "Score"
    );
    for (d, b) in &rows {
        let src = &b.score_sources;
        let source = match (src.confidence, src.hard_label) {
            (0, 0) => "-",
            (0, _) => "label",
            (_, 0) => "conf",
            _ => "mixed",
        };
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}  {}",
            d,
            b.n,
            cell(b.auc),
            cell(b.accuracy),
            cell(b.birads_accuracy),
            cell(b.kappa),
            cell(b.mean_iou),
            source
        );
    }
    if rows.iter().any(|(_, b)| !b.attributes.is_empty()) {
        out.push('\n');
        let _ = write!(out, "{:<name_w$}", "Dataset");
        for s in AttributeSlot::ALL {
            let _ = write!(out, "  {:>22}", format!("{} Acc/MaF1/WF1", s.key()));
        }
        out.push('\n');
        for (d, b) in &rows {
            let _ = write!(out, "{:<name_w$}", d);
            for s in AttributeSlot::ALL {
                let v = match b.attributes.get(s.key()).and_then(|a| a.suite) {
                    Some(f) => format!("{:.3}/{:.3}/{:.3}", f.accuracy, f.macro_f1, f.weighted_f1),
                    None => "n/a".into(),
                };
                let _ = write!(out, "  {v:>22}");
            }
            out.push('\n');
        }
    }
    out
}

/// One CSV row per record.
pub fn write_records_csv<W: Write>(records: &[PredictionRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "case_id", "dataset", "gt_malignancy", "pred_malignancy", "score", "score_source", "gt_birads", "pred_birads", "iou",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    for s in AttributeSlot::ALL {
        header.push(format!("gt_{}", s.key()));
        header.push(format!("pred_{}", s.key()));
    }
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.case_id.clone(),
            r.dataset.clone(),
            r.gt_malignancy.as_str().to_string(),
            r.pred_malignancy.map_or(String::new(), |m| m.as_str().to_string()),
            r.score.to_string(),
            serde_json::to_value(r.score_source).unwrap().as_str().unwrap_or_default().to_string(),
            r.gt_birads.clone(),
            r.pred_birads.as_known().unwrap_or("").to_string(),
            r.iou.map_or(String::new(), |v| v.to_string()),
        ];
        for s in AttributeSlot::ALL {
            row.push(r.gt_attributes.get(s).as_known().unwrap_or("").to_string());
            row.push(r.pred_attributes.as_ref().and_then(|a| a.get(s).as_known()).unwrap_or("").to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(s: &[f64], l: &[bool]) -> Option<f64> {
        let (mut won, mut pairs) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] && !l[j] {
                    pairs += 1.0;
                    won += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        (pairs > 0.0).then(|| won / pairs)
    }

    #[test]
    fn auc_fixtures() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.4, 0.3], &[true, false, true, false]), Some(0.75));
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1], &[true, true, false]), Some(1.0));
        assert_eq!(roc_auc(&[0.5; 4], &[true, false, true, false]), Some(0.5));
        assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]), None);
        assert_eq!(roc_auc(&[], &[]), None);
    }

    #[test]
    fn kappa_fixtures() {
        assert!((cohen_kappa(&[vec![20, 5], vec![10, 15]]).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(cohen_kappa(&[vec![3, 0], vec![0, 7]]), Some(1.0));
        // Outer product of marginals (2, 3) x (4, 1).
        assert!(cohen_kappa(&[vec![8, 2], vec![12, 3]]).unwrap().abs() < 1e-12);
        assert_eq!(cohen_kappa(&[vec![5, 0], vec![0, 0]]), None);
        assert_eq!(cohen_kappa(&[vec![0, 0], vec![0, 0]]), None);
    }

    #[test]
    fn f1_fixtures() {
        let s = f1_suite(&[0, 0, 1, 1], &[Some(0), Some(1), Some(1), Some(1)], 2).unwrap();
        assert_eq!(s.accuracy, 0.75);
        assert!((s.macro_f1 - 0.7333333333333334).abs() < 1e-12);
        assert!((s.weighted_f1 - 0.7333333333333334).abs() < 1e-12);
        let id = f1_suite(&[0, 1, 2], &[Some(0), Some(1), Some(2)], 3).unwrap();
        assert_eq!((id.accuracy, id.macro_f1, id.weighted_f1), (1.0, 1.0, 1.0));
        // Adding a class absent from both sides leaves macro-F1 unchanged.
        let wide = f1_suite(&[0, 0, 1, 1], &[Some(0), Some(1), Some(1), Some(1)], 5).unwrap();
        assert_eq!(wide, s);
        assert_eq!(f1_suite(&[], &[], 2), None);
    }

    #[test]
    fn unparseable_prediction_is_always_wrong() {
        let s = f1_suite(&[0, 0], &[Some(0), None], 1).unwrap();
        assert_eq!(s.accuracy, 0.5);
        let l = f1_suite_labels(&["a", "b"], &[Label::known("a"), Label::Unparseable], &["a".into(), "b".into()]).unwrap();
        assert_eq!(l.accuracy, 0.5);
    }

    fn rec(dataset: &str, id: usize, mal_ok: bool, bi: &str, gt_bi: &str, iou: f64) -> PredictionRecord {
        let gt = if id % 2 == 0 { Malignancy::Malignant } else { Malignancy::Benign };
        let pred = if mal_ok { gt } else if gt == Malignancy::Malignant { Malignancy::Benign } else { Malignancy::Malignant };
        PredictionRecord {
            case_id: format!("{dataset}-{id}"),
            dataset: dataset.into(),
            gt_malignancy: gt,
            gt_birads: gt_bi.into(),
            pred_malignancy: Some(pred),
            score: if pred.is_malignant() { 1.0 } else { 0.0 },
            score_source: ScoreSource::HardLabel,
            pred_birads: Label::known(bi),
            iou: Some(iou),
            gt_attributes: AttributeSet::new("hypoechoic", "absent", "clear", "smooth"),
            pred_attributes: Some(AttributeSet::new("hypoechoic", "present", "clear", "smooth")),
        }
    }

    #[test]
    fn pooled_accuracy_is_micro_average() {
        let mut rs: Vec<PredictionRecord> = (0..3).map(|i| rec("A", i, true, "3", "3", 1.0)).collect();
        rs.push(rec("B", 0, false, "3", "4A", 0.0));
        let r = build_report(&rs, &[], &Taxonomy::default());
        assert_eq!(r.datasets["A"].accuracy, Some(1.0));
        assert_eq!(r.datasets["B"].accuracy, Some(0.0));
        assert_eq!(r.pooled.accuracy, Some(0.75));
        assert_eq!(r.pooled.mean_iou, Some(0.75));
        assert_eq!(r.pooled.attributes["calcification"].suite.unwrap().accuracy, 0.0);
        assert_eq!(r.pooled.attributes["echo"].suite.unwrap().accuracy, 1.0);
    }

    #[test]
    fn single_dataset_pooled_equals_block() {
        let rs: Vec<PredictionRecord> = (0..5).map(|i| rec("A", i, i != 2, "3", "3", 0.5)).collect();
        let r = build_report(&rs, &[], &Taxonomy::default());
        assert_eq!(r.pooled, r.datasets["A"]);
    }

    #[test]
    fn empty_partition_is_flagged() {
        let r = build_report(&[rec("A", 0, true, "3", "3", 1.0)], &["BrEaST".into()], &Taxonomy::default());
        assert!(r.datasets["BrEaST"].empty);
        assert_eq!(r.datasets["BrEaST"].accuracy, None);
        assert!(!r.pooled.empty);
        let table = render_table(&r);
        assert!(table.contains("BrEaST") && table.contains("n/a") && table.contains("Overall"));
    }

    #[test]
    fn unparseable_birads_gets_its_own_column() {
        let mut a = rec("A", 0, true, "3", "3", 1.0);
        let mut b = rec("A", 1, true, "3", "4A", 1.0);
        b.pred_birads = Label::Unparseable;
        a.pred_birads = Label::known("3");
        let mut acc = MetricAccumulator::default();
        acc.push(&a);
        acc.push(&b);
        let (classes, m) = acc.birads_confusion(&Taxonomy::default());
        assert_eq!(classes, ["3", "4A"]);
        assert_eq!(m, vec![vec![1, 0, 0], vec![0, 0, 1], vec![0, 0, 0]]);
    }

    #[test]
    fn csv_has_one_row_per_record() {
        let rs: Vec<PredictionRecord> = (0..3).map(|i| rec("A", i, true, "3", "3", 1.0)).collect();
        let mut buf = Vec::new();
        write_records_csv(&rs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("case_id,dataset,"));
    }

    #[test]
    fn report_json_marks_undefined_as_null() {
        let r = build_report(&[rec("A", 0, true, "3", "3", 1.0)], &[], &Taxonomy::default());
        let v = serde_json::to_value(&r).unwrap();
        assert!(v["pooled"]["auc"].is_null());
    }

    proptest! {
        #[test]
        fn auc_matches_pair_enumeration(v in proptest::collection::vec((0u8..6, proptest::bool::ANY), 0..40)) {
            let s: Vec<f64> = v.iter().map(|x| x.0 as f64 / 5.0).collect();
            let l: Vec<bool> = v.iter().map(|x| x.1).collect();
            match (roc_auc(&s, &l), brute_auc(&s, &l)) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9),
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        #[test]
        fn auc_antisymmetry(v in proptest::collection::vec((-5.0f64..5.0, proptest::bool::ANY), 2..40)) {
            let s: Vec<f64> = v.iter().map(|x| x.0).collect();
            let neg: Vec<f64> = s.iter().map(|x| -x).collect();
            let l: Vec<bool> = v.iter().map(|x| x.1).collect();
            if let (Some(a), Some(b)) = (roc_auc(&s, &l), roc_auc(&neg, &l)) {
                prop_assert!((a + b - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn merging_shards_equals_concatenation(split in 0usize..12, ok in proptest::collection::vec(proptest::bool::ANY, 12)) {
            let rs: Vec<PredictionRecord> = ok.iter().enumerate().map(|(i, &b)| rec("A", i, b, if b { "3" } else { "5" }, "3", i as f64 / 12.0)).collect();
            let tax = Taxonomy::default();
            let mut whole = MetricAccumulator::default();
            rs.iter().for_each(|r| whole.push(r));
            let (mut a, mut b) = (MetricAccumulator::default(), MetricAccumulator::default());
            rs[..split].iter().for_each(|r| a.push(r));
            rs[split..].iter().for_each(|r| b.push(r));
            a.merge(&b);
            let (x, y) = (whole.finish(&tax), a.finish(&tax));
            prop_assert_eq!(x.accuracy, y.accuracy);
            prop_assert_eq!(x.kappa, y.kappa);
            prop_assert_eq!(x.auc, y.auc);
            prop_assert!((x.mean_iou.unwrap() - y.mean_iou.unwrap()).abs() < 1e-12);
        }
    }
}
