//! Planted relation data.
//!
//! Objects fall into contiguous groups (semantic families). Each predicate is
//! compatible with a few object groups, and the observed triplets are a random
//! subset of the compatible `(s, p, o)` combinations.
//!
//! Appearance of a positive pair for `t = (s, p, o)`:
//!
//! ```text
//! a(o_s) = S[s] + P[p]                               + noise
//! a(o_o) = G[g(o)] + O[o] + R[p, g(o)] + R'[p, o]    + noise
//! ```
//!
//! `S`, `P`, `G`, `O` are the images of one-hot codes under fixed random maps;
//! `R` makes the look of a predicate depend on the object family and `R'` on
//! the object itself. Non-interacting pairs carry only `S[s]` and
//! `G[g(o)] + O[o]`. Object boxes are placed at a predicate-specific offset
//! from the subject box. Word vectors are the one-hot codes (objects also
//! carry their group code) plus small noise, so objects of one family have
//! nearby words.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{BoundingBox, CandidatePair, Dataset, Triplet, Vocabularies, Vocabulary, WordTable};
use crate::error::{Error, Result};
use crate::numkit::{rng_from, SeedRng};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub subjects: usize,
    pub predicates: usize,
    pub objects: usize,
    pub object_groups: usize,
    /// Object groups each predicate applies to.
    pub groups_per_predicate: usize,
    /// Observed triplets, held-out ones included.
    pub triplets: usize,
    pub train_pairs_min: usize,
    pub train_pairs_max: usize,
    /// Fraction of seen triplets given fewer than 10 training pairs.
    pub rare_fraction: f64,
    pub test_pairs: usize,
    /// Non-interacting pairs per positive pair, per (subject, object) category.
    pub negative_ratio: f64,
    /// Probability that a test positive gets a jittered duplicate candidate.
    pub duplicate_rate: f64,
    pub appearance_dim: usize,
    pub noise: f64,
    pub subject_scale: f64,
    pub pose_scale: f64,
    pub group_scale: f64,
    pub identity_scale: f64,
    pub interaction_scale: f64,
    pub specific_scale: f64,
    pub geometry_noise: f64,
    pub word_noise: f64,
    pub heldout: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 4,
            predicates: 10,
            objects: 8,
            object_groups: 4,
            groups_per_predicate: 2,
            triplets: 100,
            train_pairs_min: 10,
            train_pairs_max: 18,
            rare_fraction: 0.1,
            test_pairs: 20,
            negative_ratio: 0.5,
            duplicate_rate: 0.1,
            appearance_dim: 32,
            noise: 0.5,
            subject_scale: 1.0,
            pose_scale: 0.5,
            group_scale: 1.0,
            identity_scale: 0.6,
            interaction_scale: 1.0,
            specific_scale: 0.3,
            geometry_noise: 0.15,
            word_noise: 0.05,
            heldout: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train: Dataset,
    pub test: Dataset,
    pub words: WordTable,
    /// Triplets with test positives but no training positives, sorted.
    pub heldout: Vec<Triplet>,
}

struct Planted {
    subject: Vec<Vec<f64>>,
    pose: Vec<Vec<f64>>,
    group: Vec<Vec<f64>>,
    identity: Vec<Vec<f64>>,
    interaction: Vec<Vec<Vec<f64>>>,
    specific: Vec<Vec<Vec<f64>>>,
    /// Per predicate: object-box offset (dx, dy) in subject-box units and size ratio.
    geometry: Vec<(f64, f64, f64)>,
}

fn gaussian(rng: &mut SeedRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

impl SynthConfig {
    pub fn group_of(&self, object: usize) -> usize {
        object * self.object_groups / self.objects
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("subjects", self.subjects),
            ("predicates", self.predicates),
            ("objects", self.objects),
            ("object_groups", self.object_groups),
            ("groups_per_predicate", self.groups_per_predicate),
            ("appearance_dim", self.appearance_dim),
            ("train_pairs_min", self.train_pairs_min),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("synth {name} must be positive")));
            }
        }
        if self.object_groups > self.objects || self.groups_per_predicate > self.object_groups {
            return Err(Error::Config("synth group counts inconsistent with object count".into()));
        }
        if self.train_pairs_max < self.train_pairs_min {
            return Err(Error::Config("synth train_pairs_max < train_pairs_min".into()));
        }
        if self.heldout > 0 && self.test_pairs < 20 {
            return Err(Error::Config("held-out triplets need at least 20 test pairs".into()));
        }
        for (name, v) in [
            ("rare_fraction", self.rare_fraction),
            ("duplicate_rate", self.duplicate_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("synth {name} must lie in [0,1]")));
            }
        }
        Ok(())
    }

    fn vocabularies(&self) -> Vocabularies {
        let names = |prefix: &str, n: usize| (0..n).map(|i| format!("{prefix} {i}")).collect::<Vec<_>>();
        Vocabularies {
            subjects: Vocabulary::new(names("subject", self.subjects)).expect("unique"),
            predicates: Vocabulary::new(names("predicate", self.predicates)).expect("unique"),
            objects: Vocabulary::new(names("object", self.objects)).expect("unique"),
        }
    }

    pub fn word_dim(&self) -> usize {
        self.subjects.max(self.predicates).max(self.objects + self.object_groups)
    }
}

fn plant(cfg: &SynthConfig, rng: &mut SeedRng) -> Planted {
    let d = cfg.appearance_dim;
    let subject = (0..cfg.subjects).map(|_| gaussian(rng, d, cfg.subject_scale)).collect();
    let pose = (0..cfg.predicates).map(|_| gaussian(rng, d, cfg.pose_scale)).collect();
    let group = (0..cfg.object_groups).map(|_| gaussian(rng, d, cfg.group_scale)).collect();
    let identity = (0..cfg.objects).map(|_| gaussian(rng, d, cfg.identity_scale)).collect();
    let interaction = (0..cfg.predicates)
        .map(|_| (0..cfg.object_groups).map(|_| gaussian(rng, d, cfg.interaction_scale)).collect())
        .collect();
    let specific = (0..cfg.predicates)
        .map(|_| (0..cfg.objects).map(|_| gaussian(rng, d, cfg.specific_scale)).collect())
        .collect();
    let geometry = (0..cfg.predicates)
        .map(|_| {
            (
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.4..1.5),
            )
        })
        .collect();
    Planted {
        subject,
        pose,
        group,
        identity,
        interaction,
        specific,
        geometry,
    }
}

impl Planted {
    fn positive(&self, cfg: &SynthConfig, t: Triplet) -> (Vec<f64>, Vec<f64>) {
        let g = cfg.group_of(t.o);
        let sub = add(&self.subject[t.s], &self.pose[t.p]);
        let obj = add(
            &add(&self.group[g], &self.identity[t.o]),
            &add(&self.interaction[t.p][g], &self.specific[t.p][t.o]),
        );
        (sub, obj)
    }

    fn negative(&self, cfg: &SynthConfig, s: usize, o: usize) -> (Vec<f64>, Vec<f64>) {
        (
            self.subject[s].clone(),
            add(&self.group[cfg.group_of(o)], &self.identity[o]),
        )
    }
}

fn noisy(rng: &mut SeedRng, proto: &[f64], noise: f64) -> Vec<f64> {
    if noise == 0.0 {
        return proto.to_vec();
    }
    proto
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(rng);
            v + noise * z
        })
        .collect()
}

fn subject_box(rng: &mut SeedRng) -> BoundingBox {
    let w = rng.random_range(60.0..160.0);
    let h = rng.random_range(120.0..280.0);
    let x = rng.random_range(0.0..480.0);
    let y = rng.random_range(0.0..200.0);
    BoundingBox::new(x, y, x + w, y + h).expect("positive size")
}

fn related_box(rng: &mut SeedRng, sub: &BoundingBox, geom: (f64, f64, f64), jitter: f64) -> BoundingBox {
    let (dx, dy, ratio) = geom;
    let mut j = || rng.random_range(-jitter..=jitter);
    let w = sub.width() * (ratio * (1.0 + j())).max(0.1);
    let h = sub.height() * (ratio * (1.0 + j())).max(0.1);
    let cx = sub.x_min + sub.width() * (0.5 + dx + j());
    let cy = sub.y_min + sub.height() * (0.5 + dy + j());
    BoundingBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0).expect("positive size")
}

fn free_box(rng: &mut SeedRng) -> BoundingBox {
    let w = rng.random_range(30.0..200.0);
    let h = rng.random_range(30.0..200.0);
    let x = rng.random_range(0.0..600.0);
    let y = rng.random_range(0.0..440.0);
    BoundingBox::new(x, y, x + w, y + h).expect("positive size")
}

fn jittered(rng: &mut SeedRng, b: &BoundingBox, frac: f64) -> BoundingBox {
    let dx = b.width() * rng.random_range(-frac..=frac);
    let dy = b.height() * rng.random_range(-frac..=frac);
    b.translate(dx, dy)
}

struct Builder<'a> {
    cfg: &'a SynthConfig,
    planted: &'a Planted,
    split: &'static str,
    pairs: Vec<CandidatePair>,
}

impl Builder<'_> {
    fn push(&mut self, image: String, sub_box: BoundingBox, obj_box: BoundingBox, cats: (usize, usize), app: (Vec<f64>, Vec<f64>), predicates: Vec<usize>) {
        let id = self.pairs.len() as u64;
        self.pairs.push(CandidatePair {
            id,
            image,
            sub_box,
            obj_box,
            sub_category: cats.0,
            obj_category: cats.1,
            sub_appearance: app.0,
            obj_appearance: app.1,
            predicates,
        });
    }

    fn positives(&mut self, rng: &mut SeedRng, t: Triplet, n: usize, duplicates: bool) {
        let (ps, po) = self.planted.positive(self.cfg, t);
        for _ in 0..n {
            let image = format!("{}_{}", self.split, self.pairs.len());
            let sb = subject_box(rng);
            let ob = related_box(rng, &sb, self.planted.geometry[t.p], self.cfg.geometry_noise);
            let app = (noisy(rng, &ps, self.cfg.noise), noisy(rng, &po, self.cfg.noise));
            self.push(image.clone(), sb, ob, (t.s, t.o), app, vec![t.p]);
            if duplicates && rng.random::<f64>() < self.cfg.duplicate_rate {
                let app = (noisy(rng, &ps, self.cfg.noise), noisy(rng, &po, self.cfg.noise));
                let (js, jo) = (jittered(rng, &sb, 0.05), jittered(rng, &ob, 0.05));
                self.push(image, js, jo, (t.s, t.o), app, vec![]);
            }
        }
    }

    fn negatives(&mut self, rng: &mut SeedRng, s: usize, o: usize, n: usize) {
        let (ps, po) = self.planted.negative(self.cfg, s, o);
        for _ in 0..n {
            let image = format!("{}_{}", self.split, self.pairs.len());
            let sb = subject_box(rng);
            let ob = free_box(rng);
            let app = (noisy(rng, &ps, self.cfg.noise), noisy(rng, &po, self.cfg.noise));
            self.push(image, sb, ob, (s, o), app, vec![]);
        }
    }
}

fn neighbours(t: Triplet, set: &BTreeSet<Triplet>) -> usize {
    set.iter()
        .filter(|u| **u != t)
        .filter(|u| (u.s == t.s) as u8 + (u.p == t.p) as u8 + (u.o == t.o) as u8 == 2)
        .count()
}

/// Generates train/test splits, word vectors and the held-out triplet list.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = rng_from(seed, "synth");
    let vocab = cfg.vocabularies();
    let planted = plant(cfg, &mut rng);

    let mut compatible: Vec<Triplet> = Vec::new();
    for p in 0..cfg.predicates {
        let mut groups: Vec<usize> = (0..cfg.object_groups).collect();
        groups.shuffle(&mut rng);
        groups.truncate(cfg.groups_per_predicate);
        for s in 0..cfg.subjects {
            for o in 0..cfg.objects {
                if groups.contains(&cfg.group_of(o)) {
                    compatible.push(Triplet::new(s, p, o));
                }
            }
        }
    }
    compatible.shuffle(&mut rng);
    compatible.truncate(cfg.triplets);
    let chosen: BTreeSet<Triplet> = compatible.into_iter().collect();

    // Held-out triplets must keep at least two seen neighbours sharing two slots.
    let mut candidates: Vec<Triplet> = chosen.iter().copied().filter(|&t| neighbours(t, &chosen) >= 2).collect();
    candidates.shuffle(&mut rng);
    let mut heldout = BTreeSet::new();
    let mut seen = chosen.clone();
    for t in candidates {
        if heldout.len() == cfg.heldout {
            break;
        }
        let mut without = seen.clone();
        without.remove(&t);
        if neighbours(t, &without) >= 2 {
            seen = without;
            heldout.insert(t);
        }
    }
    if heldout.len() < cfg.heldout {
        return Err(Error::Config(format!(
            "cannot hold out {} triplets: only {} qualify among {} generated",
            cfg.heldout,
            heldout.len(),
            chosen.len()
        )));
    }

    let mut seen_list: Vec<Triplet> = seen.iter().copied().collect();
    seen_list.shuffle(&mut rng);
    let n_rare = (cfg.rare_fraction * seen_list.len() as f64).round() as usize;
    let mut train_counts: BTreeMap<Triplet, usize> = BTreeMap::new();
    for (i, &t) in seen_list.iter().enumerate() {
        let n = if i < n_rare {
            rng.random_range(3..10)
        } else {
            rng.random_range(cfg.train_pairs_min..=cfg.train_pairs_max)
        };
        train_counts.insert(t, n);
    }

    let mut train = Builder {
        cfg,
        planted: &planted,
        split: "train",
        pairs: Vec::new(),
    };
    let mut per_category: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&t, &n) in &train_counts {
        train.positives(&mut rng, t, n, false);
        *per_category.entry((t.s, t.o)).or_insert(0) += n;
    }
    for (&(s, o), &n) in &per_category {
        train.negatives(&mut rng, s, o, (cfg.negative_ratio * n as f64).ceil() as usize);
    }

    let mut test = Builder {
        cfg,
        planted: &planted,
        split: "test",
        pairs: Vec::new(),
    };
    let mut per_category: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for &t in &chosen {
        test.positives(&mut rng, t, cfg.test_pairs, true);
        *per_category.entry((t.s, t.o)).or_insert(0) += cfg.test_pairs;
    }
    for (&(s, o), &n) in &per_category {
        test.negatives(&mut rng, s, o, (cfg.negative_ratio * n as f64).ceil() as usize);
    }

    let dw = cfg.word_dim();
    let mut words = WordTable::new(dw);
    let code = |rng: &mut SeedRng, hot: &[(usize, f64)]| {
        let mut v = gaussian(rng, dw, cfg.word_noise);
        for &(i, w) in hot {
            v[i] += w;
        }
        v
    };
    for s in 0..cfg.subjects {
        let v = code(&mut rng, &[(s, 1.0)]);
        words.insert(vocab.subjects.token(s), &v)?;
    }
    for p in 0..cfg.predicates {
        let v = code(&mut rng, &[(p, 1.0)]);
        words.insert(vocab.predicates.token(p), &v)?;
    }
    let h = std::f64::consts::FRAC_1_SQRT_2;
    for o in 0..cfg.objects {
        let v = code(&mut rng, &[(o, h), (cfg.objects + cfg.group_of(o), h)]);
        words.insert(vocab.objects.token(o), &v)?;
    }

    Ok(SynthOutput {
        train: Dataset::new(vocab.clone(), cfg.appearance_dim, train.pairs)?,
        test: Dataset::new(vocab, cfg.appearance_dim, test.pairs)?,
        words,
        heldout: heldout.into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_positives_equal_prototypes() {
        let cfg = SynthConfig {
            noise: 0.0,
            heldout: 0,
            ..SynthConfig::default()
        };
        let out = synth_generate(&cfg, 3).unwrap();
        let mut rng = rng_from(3, "synth");
        let planted = plant(&cfg, &mut rng);
        for pair in out.train.pairs().iter().chain(out.test.pairs()) {
            if let Some(t) = pair.positives().next() {
                let (s, o) = planted.positive(&cfg, t);
                assert_eq!(pair.sub_appearance, s);
                assert_eq!(pair.obj_appearance, o);
            }
        }
        assert!(out.heldout.is_empty());
    }

    #[test]
    fn heldout_absent_from_train_and_frequent_in_test() {
        for seed in 0..5 {
            let out = synth_generate(&SynthConfig::default(), seed).unwrap();
            assert_eq!(out.heldout.len(), 10);
            for &t in &out.heldout {
                assert_eq!(out.train.count(t), 0);
                assert!(out.test.count(t) >= 20);
            }
        }
    }

    #[test]
    fn too_many_heldout_is_an_error() {
        let cfg = SynthConfig {
            triplets: 12,
            heldout: 12,
            ..SynthConfig::default()
        };
        assert!(matches!(synth_generate(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn equal_seeds_are_identical() {
        let a = synth_generate(&SynthConfig::default(), 9).unwrap();
        let b = synth_generate(&SynthConfig::default(), 9).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.words, b.words);
        assert_eq!(a.heldout, b.heldout);
    }
}
