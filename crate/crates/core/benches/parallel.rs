use std::sync::Arc;

use busdx::backends::{Backends, OracleBackend};
use busdx::datamodel::{AttributeSet, BusCase, Diagnosis, Label, LesionBox, Malignancy, Split, Taxonomy};
use busdx::exec::ExecPolicy;
use busdx::imaging::{resize_to_fit_with, ImageBuffer, ResizeBounds};
use busdx::metrics::{build_report, PredictionRecord, ScoreSource};
use busdx::orchestrator::{EpisodeMode, Pipeline, SyntheticImageSource};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn policies() -> [(&'static str, ExecPolicy); 2] {
    [("sequential", ExecPolicy::Sequential), ("parallel", ExecPolicy::Parallel { threads: 0 })]
}

fn cases(n: usize) -> Vec<BusCase> {
    let tax = Taxonomy::default();
    (0..n)
        .map(|i| {
            let (w, h) = (640 + (i as u32 % 5) * 120, 480 + (i as u32 % 3) * 100);
            let x = (i as f64 * 37.0) % (w as f64 / 2.0);
            let y = (i as f64 * 53.0) % (h as f64 / 2.0);
            BusCase {
                case_id: format!("case{i:04}"),
                image_path: format!("case{i:04}.png"),
                dataset: ["A", "B", "C"][i % 3].into(),
                split: Split::Test,
                gt_box: LesionBox::new(x, y, x + 120.0, y + 90.0, w, h).unwrap(),
                gt_attributes: AttributeSet::new(
                    &tax.echo[i % tax.echo.len()],
                    &tax.calcification[i % 2],
                    &tax.boundary[i % 2],
                    &tax.edge[i % tax.edge.len()],
                ),
                gt_diagnosis: Diagnosis::new(
                    if i % 2 == 0 { Malignancy::Benign } else { Malignancy::Malignant },
                    tax.birads[i % tax.birads.len()].clone(),
                ),
            }
        })
        .collect()
}

fn bench_manifest(c: &mut Criterion) {
    let cases = cases(32);
    let oracle = Arc::new(OracleBackend::new(&cases, ResizeBounds::default()));
    let pipeline = Pipeline::new(Backends::uniform(oracle), Arc::new(SyntheticImageSource));
    let mut g = c.benchmark_group("run_manifest");
    g.sample_size(10);
    for (name, policy) in policies() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pipeline.run_manifest(&cases, EpisodeMode::live(), policy))
        });
    }
    g.finish();
}

fn bench_resize(c: &mut Criterion) {
    let img = ImageBuffer::from_fn(2400, 1800, 3, |x, y, ch| (x ^ y.wrapping_mul(3) ^ ch as u32) as u8);
    let mut g = c.benchmark_group("resize_to_fit");
    g.sample_size(20);
    for (name, policy) in policies() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| resize_to_fit_with(&img, ResizeBounds::default(), policy))
        });
    }
    g.finish();
}

fn bench_report(c: &mut Criterion) {
    let tax = Taxonomy::default();
    let cases = cases(20_000);
    let records: Vec<PredictionRecord> = cases
        .iter()
        .enumerate()
        .map(|(i, k)| PredictionRecord {
            case_id: k.case_id.clone(),
            dataset: k.dataset.clone(),
            gt_malignancy: k.gt_diagnosis.malignancy,
            gt_birads: k.gt_diagnosis.birads.clone(),
            pred_malignancy: Some(k.gt_diagnosis.malignancy),
            score: (i % 101) as f64 / 100.0,
            score_source: ScoreSource::Confidence,
            pred_birads: Label::known(tax.birads[(i * 7) % tax.birads.len()].clone()),
            iou: Some((i % 10) as f64 / 10.0),
            gt_attributes: k.gt_attributes.clone(),
            pred_attributes: Some(k.gt_attributes.clone()),
        })
        .collect();
    let shards: Vec<&[PredictionRecord]> = records.chunks(records.len() / 8).collect();
    let mut g = c.benchmark_group("build_report_shards");
    g.sample_size(10);
    for (name, policy) in policies() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| policy.map(&shards, |s| build_report(s, &[], &tax)))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_manifest, bench_resize, bench_report);
criterion_main!(benches);
