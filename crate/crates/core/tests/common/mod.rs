#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::time::Instant;

use busdx::backends::{Backend, BackendError, BackendRequest, BackendResponse, Completion};
use busdx::datamodel::{AttributeSet, BusCase, Diagnosis, LesionBox, Malignancy, Split, Taxonomy};
use busdx::ingest::{write_manifest, ManifestHeader};
use busdx::orchestrator::synthetic_image;
use busdx::protocol::{render_attribute_answer, render_box_answer, render_diagnosis_answer, AgentRole, BoxCoords};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn pick<'a, R: Rng>(rng: &mut R, xs: &'a [String]) -> &'a str {
    xs.choose(rng).expect("non-empty value list")
}

pub fn random_attributes<R: Rng>(rng: &mut R, tax: &Taxonomy) -> AttributeSet {
    AttributeSet::new(
        pick(rng, &tax.echo),
        pick(rng, &tax.calcification),
        pick(rng, &tax.boundary),
        pick(rng, &tax.edge),
    )
}

pub fn random_diagnosis<R: Rng>(rng: &mut R, tax: &Taxonomy) -> Diagnosis {
    let m = if rng.gen_bool(0.5) { Malignancy::Malignant } else { Malignancy::Benign };
    Diagnosis::new(m, pick(rng, &tax.birads))
}

/// A valid box of at least `min_side` pixels on each axis in a `w`×`h` frame.
pub fn random_box<R: Rng>(rng: &mut R, w: u32, h: u32, min_side: u32) -> LesionBox {
    let axis = |rng: &mut R, extent: u32| {
        let side = rng.gen_range(min_side.min(extent)..=extent);
        let lo = rng.gen_range(0..=extent - side);
        (lo as f64, (lo + side) as f64)
    };
    let (x1, x2) = axis(rng, w);
    let (y1, y2) = axis(rng, h);
    LesionBox::new(x1, y1, x2, y2, w, h).expect("generated box is valid")
}

pub fn random_case<R: Rng>(rng: &mut R, id: &str, dataset: &str, tax: &Taxonomy) -> BusCase {
    let w = rng.gen_range(160..=1100);
    let h = rng.gen_range(120..=900);
    BusCase {
        case_id: id.into(),
        image_path: format!("images/{id}.png"),
        dataset: dataset.into(),
        split: Split::Test,
        gt_box: random_box(rng, w, h, 16),
        gt_attributes: random_attributes(rng, tax),
        gt_diagnosis: random_diagnosis(rng, tax),
    }
}

/// Writes `cases` as a manifest plus one PNG per case under `dir`.
pub fn write_dataset(dir: &Path, cases: &[BusCase]) -> std::path::PathBuf {
    std::fs::create_dir_all(dir.join("images")).unwrap();
    for c in cases {
        synthetic_image(c).save_png(dir.join(&c.image_path)).unwrap();
    }
    let path = dir.join("manifest.jsonl");
    let f = std::fs::File::create(&path).unwrap();
    write_manifest(f, &ManifestHeader::default(), cases).unwrap();
    path
}

/// Answers every role with well-formed but arbitrary content, derived
/// deterministically from the case, role and sample index.
pub struct RandomBackend {
    pub taxonomy: Taxonomy,
    pub salt: u64,
}

impl RandomBackend {
    pub fn new(salt: u64) -> Self {
        Self { taxonomy: Taxonomy::default(), salt }
    }

    fn answer(&self, req: &BackendRequest, sample: u32) -> String {
        let mut h = DefaultHasher::new();
        (self.salt, &req.case_id, req.role.as_str(), sample).hash(&mut h);
        let mut r = rng(h.finish());
        let tax = &self.taxonomy;
        match req.role {
            AgentRole::MainLocalizer => {
                let img = &req.images[0].image;
                let b = random_box(&mut r, img.width(), img.height(), 1);
                let c = BoxCoords { x1: b.x1 as u32, y1: b.y1 as u32, x2: b.x2 as u32, y2: b.y2 as u32 };
                render_box_answer("Somewhere here.", &c)
            }
            AgentRole::SubAttribute => render_attribute_answer("Looks like this.", &random_attributes(&mut r, tax)),
            AgentRole::MainIntegrator | AgentRole::Rewriter => {
                render_diagnosis_answer("Therefore.", &random_diagnosis(&mut r, tax), None)
            }
        }
    }
}

impl Backend for RandomBackend {
    fn invoke(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let started = Instant::now();
        let completions = req
            .sample_indices
            .iter()
            .map(|&s| Completion { text: self.answer(req, s), finish_reason: "stop".into() })
            .collect();
        Ok(BackendResponse { completions, latency_ms: started.elapsed().as_millis() as u64, usage: None })
    }

    fn describe(&self) -> String {
        format!("random(salt {})", self.salt)
    }
}
