use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::{joint_loss, Block, JointModel};
use crate::datamodel::{CandidatePair, Dataset};
use crate::error::{Error, Result};
use crate::numkit::{rng_from, AdamConfig, AdamState, SeedRng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub positives_per_batch: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            batch_size: 64,
            positives_per_batch: 16,
        }
    }
}

/// Dataset indices of one mini-batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl Batch {
    pub fn pairs<'a>(&self, dataset: &'a Dataset) -> Vec<&'a CandidatePair> {
        self.positives
            .iter()
            .chain(&self.negatives)
            .map(|&i| &dataset.pairs()[i])
            .collect()
    }
}

/// Fixed-composition batches: positives are visited once per epoch in random
/// order; negatives are non-interacting pairs whose (subject, object)
/// categories match a positive of the same batch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    positives: Vec<usize>,
    negatives_by_category: BTreeMap<(usize, usize), Vec<usize>>,
    all_negatives: Vec<usize>,
    n_pos: usize,
    n_neg: usize,
}

impl BatchSampler {
    pub fn new(dataset: &Dataset, batch_size: usize, positives_per_batch: usize) -> Result<Self> {
        if positives_per_batch == 0 || positives_per_batch > batch_size {
            return Err(Error::Config("positives per batch must lie in [1, batch_size]".into()));
        }
        let mut positives = Vec::new();
        let mut negatives_by_category: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        let mut all_negatives = Vec::new();
        for (i, p) in dataset.pairs().iter().enumerate() {
            if p.is_positive() {
                positives.push(i);
            } else {
                negatives_by_category.entry(p.categories()).or_default().push(i);
                all_negatives.push(i);
            }
        }
        if positives.is_empty() {
            return Err(Error::NoPositives);
        }
        Ok(Self {
            positives,
            negatives_by_category,
            all_negatives,
            n_pos: positives_per_batch,
            n_neg: batch_size - positives_per_batch,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.positives.len().div_ceil(self.n_pos)
    }

    /// Negatives eligible for a batch with these positives.
    pub fn negative_pool(&self, dataset: &Dataset, positives: &[usize]) -> Vec<usize> {
        let cats: BTreeSet<(usize, usize)> = positives.iter().map(|&i| dataset.pairs()[i].categories()).collect();
        let pool: Vec<usize> = cats
            .iter()
            .filter_map(|c| self.negatives_by_category.get(c))
            .flatten()
            .copied()
            .collect();
        if pool.is_empty() {
            self.all_negatives.clone()
        } else {
            pool
        }
    }

    /// One epoch of batches. A short final chunk of positives is topped up by
    /// sampling positives with replacement; negatives are drawn without
    /// replacement when the pool is large enough.
    pub fn epoch(&self, dataset: &Dataset, rng: &mut SeedRng) -> Vec<Batch> {
        let mut order = self.positives.clone();
        order.shuffle(rng);
        let mut out = Vec::with_capacity(self.batches_per_epoch());
        for chunk in order.chunks(self.n_pos) {
            let mut pos = chunk.to_vec();
            while pos.len() < self.n_pos {
                pos.push(self.positives[rng.random_range(0..self.positives.len())]);
            }
            let pool = self.negative_pool(dataset, &pos);
            let neg = if pool.is_empty() {
                Vec::new()
            } else if pool.len() >= self.n_neg {
                index::sample(rng, pool.len(), self.n_neg).into_iter().map(|j| pool[j]).collect()
            } else {
                (0..self.n_neg).map(|_| pool[rng.random_range(0..pool.len())]).collect()
            };
            out.push(Batch {
                positives: pos,
                negatives: neg,
            });
        }
        out
    }
}

/// Mean batch loss per epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub epochs: Vec<f64>,
}

impl LossTrace {
    pub fn to_text(&self, label: &str) -> String {
        self.epochs
            .iter()
            .enumerate()
            .map(|(e, l)| format!("{label} epoch {} loss {l}\n", e + 1))
            .collect()
    }
}

/// Blocks updated in the first stage.
pub(crate) fn stage1_blocks(model: &JointModel) -> Vec<Block> {
    model
        .block_list()
        .into_iter()
        .filter(|b| *b != Block::Words || model.config().finetune_words)
        .collect()
}

/// Minimizes the joint loss with Adam.
pub fn train_stage1(model: &mut JointModel, dataset: &Dataset, schedule: &Schedule, seed: u64) -> Result<LossTrace> {
    let sampler = BatchSampler::new(dataset, schedule.batch_size, schedule.positives_per_batch)?;
    let blocks = stage1_blocks(model);
    let sizes: Vec<usize> = blocks.iter().map(|&b| model.block(b).map(<[f64]>::len)).collect::<Result<_>>()?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: schedule.lr,
            ..AdamConfig::default()
        },
        &sizes,
    );
    let mut batch_rng = rng_from(seed, "stage1.batches");
    let mut dropout_rng = rng_from(seed, "stage1.dropout");
    let mut trace = LossTrace::default();
    for _ in 0..schedule.epochs {
        let mut total = 0.0;
        let batches = sampler.epoch(dataset, &mut batch_rng);
        for batch in &batches {
            let pairs = batch.pairs(dataset);
            let (loss, grads) = joint_loss(model, &pairs, Some(&mut dropout_rng))?;
            grads.check_finite()?;
            let g: Vec<&[f64]> = blocks.iter().map(|&b| grads.get(b).expect("block")).collect();
            let mut p = model.blocks_mut(&blocks)?;
            adam.step(&mut p, &g)?;
            total += loss;
        }
        trace.epochs.push(total / batches.len() as f64);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::BranchKind;
    use super::*;

    #[test]
    fn batches_are_sixteen_and_forty_eight() {
        let (ds, _) = toy_dataset(200, 3, &mut rng_from(1, "d"));
        let s = BatchSampler::new(&ds, 64, 16).unwrap();
        let mut rng = rng_from(1, "b");
        for _ in 0..3 {
            for b in s.epoch(&ds, &mut rng) {
                assert_eq!(b.positives.len(), 16);
                assert_eq!(b.negatives.len(), 48);
                for &n in &b.negatives {
                    assert!(!ds.pairs()[n].is_positive());
                }
                for &p in &b.positives {
                    assert!(ds.pairs()[p].is_positive());
                }
            }
        }
    }

    #[test]
    fn every_positive_is_visited_each_epoch() {
        let (ds, _) = toy_dataset(120, 3, &mut rng_from(2, "d"));
        let s = BatchSampler::new(&ds, 64, 16).unwrap();
        let seen: BTreeSet<usize> = s
            .epoch(&ds, &mut rng_from(2, "b"))
            .into_iter()
            .flat_map(|b| b.positives)
            .collect();
        let all: BTreeSet<usize> = (0..ds.len()).filter(|&i| ds.pairs()[i].is_positive()).collect();
        assert_eq!(seen, all);
    }

    #[test]
    fn no_positives_is_an_error() {
        let (ds, _) = toy_dataset(12, 3, &mut rng_from(3, "d"));
        let negatives: Vec<CandidatePair> = ds
            .pairs()
            .iter()
            .cloned()
            .map(|mut p| {
                p.predicates.clear();
                p
            })
            .collect();
        let ds = Dataset::new(ds.vocab.clone(), 3, negatives).unwrap();
        assert!(matches!(BatchSampler::new(&ds, 64, 16), Err(Error::NoPositives)));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (ds, words) = toy_dataset(40, 3, &mut rng_from(4, "d"));
        let mut m = JointModel::new(toy_config(&BranchKind::ALL, 0.5), &ds, &words, 4).unwrap();
        let before = m.clone();
        let sched = Schedule {
            epochs: 2,
            lr: 0.0,
            batch_size: 8,
            positives_per_batch: 2,
        };
        train_stage1(&mut m, &ds, &sched, 4).unwrap();
        for b in m.block_list() {
            assert_eq!(m.block(b).unwrap(), before.block(b).unwrap());
        }
    }

    #[test]
    fn training_is_deterministic_and_lowers_the_loss() {
        let (ds, words) = toy_dataset(60, 3, &mut rng_from(5, "d"));
        let sched = Schedule {
            epochs: 8,
            lr: 1e-2,
            batch_size: 8,
            positives_per_batch: 2,
        };
        let run = || {
            let mut m = JointModel::new(toy_config(&[BranchKind::S, BranchKind::P], 0.0), &ds, &words, 5).unwrap();
            let t = train_stage1(&mut m, &ds, &sched, 5).unwrap();
            (m, t)
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(ta, tb);
        assert_eq!(a, b);
        assert!(ta.epochs.last().unwrap() < ta.epochs.first().unwrap());
    }
}
