#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use relemb::cli::RunConfig;
use relemb::datamodel::{BoundingBox, CandidatePair, Dataset, Vocabularies, Vocabulary, WordTable};
use relemb::embed::{BranchKind, ModelConfig};
use relemb::numkit::SeedRng;
use relemb::repr::{SpatialNorm, VisualDims};

pub fn gauss(rng: &mut SeedRng, k: usize) -> Vec<f64> {
    (0..k).map(|_| StandardNormal.sample(rng)).collect()
}

/// Random instance with 5-token vocabularies, `n` pairs and 4-d word vectors.
pub fn random_instance(n: usize, appearance_dim: usize, rng: &mut SeedRng) -> (Dataset, WordTable) {
    let names = |p: &str| (0..5).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    let vocab = Vocabularies {
        subjects: Vocabulary::new(names("s")).unwrap(),
        predicates: Vocabulary::new(names("p")).unwrap(),
        objects: Vocabulary::new(names("o")).unwrap(),
    };
    let mut pairs = Vec::new();
    for id in 0..n {
        let x: f64 = rng.random_range(0.0..60.0);
        let y: f64 = rng.random_range(0.0..60.0);
        let sub = BoundingBox::new(x, y, x + rng.random_range(4.0..30.0), y + rng.random_range(4.0..30.0)).unwrap();
        let ox: f64 = rng.random_range(0.0..60.0);
        let oy: f64 = rng.random_range(0.0..60.0);
        let obj = BoundingBox::new(ox, oy, ox + rng.random_range(4.0..30.0), oy + rng.random_range(4.0..30.0)).unwrap();
        let mut predicates: Vec<usize> = (0..5).filter(|_| rng.random::<f64>() < 0.35).collect();
        if id % 4 == 3 {
            predicates.clear();
        } else if predicates.is_empty() {
            predicates.push(rng.random_range(0..5));
        }
        pairs.push(CandidatePair {
            id: id as u64,
            image: format!("img{}", id % 3),
            sub_box: sub,
            obj_box: obj,
            sub_category: rng.random_range(0..5),
            obj_category: rng.random_range(0..5),
            sub_appearance: gauss(rng, appearance_dim),
            obj_appearance: gauss(rng, appearance_dim),
            predicates,
        });
    }
    let mut words = WordTable::new(4);
    for t in vocab.all_tokens() {
        words.insert(t, &gauss(rng, 4)).unwrap();
    }
    (Dataset::new(vocab, appearance_dim, pairs).unwrap(), words)
}

pub fn small_model_config(branches: &[BranchKind], dropout: f64) -> ModelConfig {
    ModelConfig {
        branches: branches.to_vec(),
        dim: 8,
        branch_hidden: 16,
        dropout,
        visual: VisualDims {
            subject: 5,
            object: 5,
            spatial_hidden: 6,
            spatial: 4,
        },
        spatial_norm: SpatialNorm::Extent,
        finetune_words: true,
        ..ModelConfig::default()
    }
}

pub const SOPV: [BranchKind; 4] = [BranchKind::S, BranchKind::O, BranchKind::P, BranchKind::Vp];

/// Model sizes used for end-to-end runs on the synthetic benchmark.
pub fn desk_config() -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [
        ("visual_subject", "64"),
        ("visual_object", "64"),
        ("spatial_hidden", "32"),
        ("spatial_dim", "32"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}
