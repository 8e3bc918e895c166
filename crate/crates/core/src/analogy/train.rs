use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use super::{analogy_loss, eligible_pool, GammaKind, GammaParams, SimilarityIndex, SourceSet, TransferConfig};
use crate::datamodel::{Dataset, Triplet};
use crate::embed::{branch_loss, Block, BatchSampler, BranchKind, JointModel, Schedule};
use crate::error::Result;
use crate::numkit::{rng_from, AdamConfig, AdamState};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Stage2Trace {
    /// Mean vp loss per epoch.
    pub vp: Vec<f64>,
    /// Mean analogy loss per epoch.
    pub analogy: Vec<f64>,
    /// Targets that had no source to pair with, summed over epochs.
    pub skipped_targets: usize,
}

impl Stage2Trace {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (e, (a, b)) in self.vp.iter().zip(&self.analogy).enumerate() {
            out.push_str(&format!("stage2 epoch {} vp {a} analogy {b}\n", e + 1));
        }
        out.push_str(&format!("stage2 skipped_targets {}\n", self.skipped_targets));
        out
    }
}

/// Source sets of every training target, each excluding the target itself.
fn training_sources(model: &JointModel, cfg: &TransferConfig, targets: &[Triplet]) -> Result<BTreeMap<Triplet, SourceSet>> {
    let index = SimilarityIndex::new(model, cfg)?;
    let pool = eligible_pool(model, cfg);
    let mut out = BTreeMap::new();
    for &u in targets {
        let others: Vec<Triplet> = pool.iter().copied().filter(|&t| t != u).collect();
        if let Ok(set) = index.select(u, &others, cfg.k) {
            out.insert(u, set);
        }
    }
    Ok(out)
}

/// Fine-tunes the vp branch on `L_vp + λ L_Γ` while learning Γ. Every other
/// parameter block stays fixed. A no-op for [`GammaKind::Absent`].
pub fn train_stage2(
    model: &mut JointModel,
    gamma: &mut GammaParams,
    dataset: &Dataset,
    cfg: &TransferConfig,
    schedule: &Schedule,
    seed: u64,
) -> Result<Stage2Trace> {
    let mut trace = Stage2Trace::default();
    if gamma.kind() == GammaKind::Absent {
        return Ok(trace);
    }
    cfg.validate()?;
    model.branch(BranchKind::Vp)?;
    let sampler = BatchSampler::new(dataset, schedule.batch_size, schedule.positives_per_batch)?;
    let blocks = [Block::BranchVisual(BranchKind::Vp), Block::BranchLanguage(BranchKind::Vp)];
    let mut sizes: Vec<usize> = blocks.iter().map(|&b| model.block(b).map(<[f64]>::len)).collect::<Result<_>>()?;
    sizes.push(gamma.params().len());
    let mut adam = AdamState::new(
        AdamConfig {
            lr: schedule.lr,
            ..AdamConfig::default()
        },
        &sizes,
    );
    let mut batch_rng = rng_from(seed, "stage2.batches");
    let mut source_rng = rng_from(seed, "stage2.sources");
    let mut dropout_rng = rng_from(seed, "stage2.dropout");
    let targets: Vec<Triplet> = dataset.observed().into_iter().collect();
    for _ in 0..schedule.epochs {
        let sources = training_sources(model, cfg, &targets)?;
        let (mut lvp, mut lg) = (0.0, 0.0);
        let batches = sampler.epoch(dataset, &mut batch_rng);
        for batch in &batches {
            let pairs = batch.pairs(dataset);
            let in_batch: BTreeSet<Triplet> = pairs.iter().flat_map(|p| p.positives()).collect();
            let mut q = Vec::with_capacity(in_batch.len());
            for u in in_batch {
                match sources.get(&u) {
                    Some(set) => {
                        let (t, _) = set.sources[source_rng.random_range(0..set.sources.len())];
                        q.push((t, u));
                    }
                    None => trace.skipped_targets += 1,
                }
            }
            let (l1, mut g) = branch_loss(model, &pairs, BranchKind::Vp, Some(&mut dropout_rng))?;
            let (l2, ga) = analogy_loss(model, gamma, &pairs, &q, Some(&mut dropout_rng))?;
            g.add_scaled(cfg.lambda, &ga.model);
            g.check_finite()?;
            let gg: Vec<f64> = ga.gamma.iter().map(|v| cfg.lambda * v).collect();
            let mut grads: Vec<&[f64]> = blocks.iter().map(|&b| g.get(b).expect("block")).collect();
            grads.push(&gg);
            let mut params = model.blocks_mut(&blocks)?;
            params.push(gamma.params_mut());
            adam.step(&mut params, &grads)?;
            lvp += l1;
            lg += l2;
        }
        trace.vp.push(lvp / batches.len() as f64);
        trace.analogy.push(lg / batches.len() as f64);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::testutil::{toy_config, toy_dataset};

    fn setup(seed: u64) -> (JointModel, Dataset) {
        let (ds, words) = toy_dataset(80, 3, &mut rng_from(seed, "data"));
        let m = JointModel::new(
            toy_config(&[BranchKind::S, BranchKind::O, BranchKind::P, BranchKind::Vp], 0.3),
            &ds,
            &words,
            seed,
        )
        .unwrap();
        (m, ds)
    }

    fn sched() -> Schedule {
        Schedule {
            epochs: 2,
            lr: 1e-2,
            batch_size: 8,
            positives_per_batch: 2,
        }
    }

    fn low_threshold() -> TransferConfig {
        TransferConfig {
            rare_threshold: 1,
            ..TransferConfig::default()
        }
    }

    #[test]
    fn only_vp_and_gamma_change() {
        let (mut m, ds) = setup(1);
        let before = m.clone();
        let mut g = GammaParams::new(GammaKind::Deep, m.dim(), 3 * m.dim(), &mut rng_from(1, "g")).unwrap();
        let g0 = g.clone();
        let trace = train_stage2(&mut m, &mut g, &ds, &low_threshold(), &sched(), 1).unwrap();
        assert_eq!(trace.vp.len(), 2);
        for b in m.block_list() {
            let same = m.block(b).unwrap() == before.block(b).unwrap();
            let vp = matches!(b, Block::BranchVisual(BranchKind::Vp) | Block::BranchLanguage(BranchKind::Vp));
            assert_eq!(same, !vp, "{b}");
        }
        assert_ne!(g.params(), g0.params());
    }

    #[test]
    fn absent_gamma_skips_the_stage() {
        let (mut m, ds) = setup(2);
        let before = m.clone();
        let mut g = GammaParams::new(GammaKind::Absent, m.dim(), 0, &mut rng_from(2, "g")).unwrap();
        let t = train_stage2(&mut m, &mut g, &ds, &low_threshold(), &sched(), 2).unwrap();
        assert!(t.vp.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn zero_lambda_leaves_gamma_untouched() {
        let (mut m, ds) = setup(3);
        let mut g = GammaParams::new(GammaKind::Linear, m.dim(), 0, &mut rng_from(3, "g")).unwrap();
        let g0 = g.clone();
        let cfg = TransferConfig {
            lambda: 0.0,
            ..low_threshold()
        };
        train_stage2(&mut m, &mut g, &ds, &cfg, &sched(), 3).unwrap();
        assert_eq!(g.params(), g0.params());
    }

    #[test]
    fn empty_pool_targets_are_counted() {
        let (mut m, ds) = setup(4);
        let mut g = GammaParams::new(GammaKind::Zero, m.dim(), 0, &mut rng_from(4, "g")).unwrap();
        let cfg = TransferConfig {
            rare_threshold: usize::MAX,
            ..TransferConfig::default()
        };
        let t = train_stage2(&mut m, &mut g, &ds, &cfg, &sched(), 4).unwrap();
        assert!(t.skipped_targets > 0);
        assert!(t.analogy.iter().all(|&l| l == 0.0));
    }
}
