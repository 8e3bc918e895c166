//! Joint visual-language embedding branches, their log-likelihood loss,
//! the first training stage and the product-of-sigmoids score.

mod loss;
mod train;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::RngCore;

use crate::datamodel::{CandidatePair, Dataset, Triplet, Vocabularies, WordRows, WordTable};
use crate::error::{Error, Result};
use crate::numkit::{dot, log_sigmoid, normalize, rng_from, Mlp, MlpCache};
use crate::repr::{language_input_rows, LangMask, SpatialNorm, VisualDims, VisualFeature, VisualInputParams};

pub use loss::{branch_loss, joint_loss, ModelGrads};
pub use train::{train_stage1, Batch, BatchSampler, LossTrace, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BranchKind {
    S,
    O,
    P,
    Vp,
    Sp,
    Po,
}

impl BranchKind {
    /// Canonical order, used for parameter layout and RNG consumption.
    pub const ALL: [BranchKind; 6] = [
        BranchKind::S,
        BranchKind::O,
        BranchKind::P,
        BranchKind::Vp,
        BranchKind::Sp,
        BranchKind::Po,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BranchKind::S => "s",
            BranchKind::O => "o",
            BranchKind::P => "p",
            BranchKind::Vp => "vp",
            BranchKind::Sp => "sp",
            BranchKind::Po => "po",
        }
    }

    pub fn mask(self) -> LangMask {
        match self {
            BranchKind::S => LangMask::S,
            BranchKind::O => LangMask::O,
            BranchKind::P => LangMask::P,
            BranchKind::Vp => LangMask::Full,
            BranchKind::Sp => LangMask::Sp,
            BranchKind::Po => LangMask::Po,
        }
    }

    /// Whether the visual side consumes the full `x_i` rather than a single
    /// raw appearance vector.
    pub fn uses_full_visual(self) -> bool {
        !matches!(self, BranchKind::S | BranchKind::O)
    }
}

impl fmt::Display for BranchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BranchKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        BranchKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown branch '{s}'")))
    }
}

/// Parses `s+o+p+vp` (commas also accepted) into a sorted, duplicate-free set.
pub fn parse_branch_set(text: &str) -> Result<Vec<BranchKind>> {
    let mut set = BTreeSet::new();
    for part in text.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
        if !set.insert(part.parse::<BranchKind>()?) {
            return Err(Error::Config(format!("branch '{part}' listed twice")));
        }
    }
    if set.is_empty() {
        return Err(Error::Config("empty branch set".into()));
    }
    Ok(set.into_iter().collect())
}

pub fn format_branch_set(set: &[BranchKind]) -> String {
    set.iter().map(|k| k.as_str()).collect::<Vec<_>>().join("+")
}

/// Negative-label universe of the triplet and bigram branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VpNegatives {
    #[default]
    Observed,
    Cartesian,
}

impl fmt::Display for VpNegatives {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VpNegatives::Observed => "observed",
            VpNegatives::Cartesian => "cartesian",
        })
    }
}

impl FromStr for VpNegatives {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "observed" => Ok(VpNegatives::Observed),
            "cartesian" => Ok(VpNegatives::Cartesian),
            _ => Err(Error::Config(format!("unknown vp_negatives '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub branches: Vec<BranchKind>,
    /// Joint-space dimension `d`.
    pub dim: usize,
    /// Hidden width of every `f_v` and `f_w`.
    pub branch_hidden: usize,
    /// Dropout on the hidden layer of visual projections.
    pub dropout: f64,
    pub visual: VisualDims,
    pub spatial_norm: SpatialNorm,
    pub vp_negatives: VpNegatives,
    pub finetune_words: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            branches: vec![BranchKind::S, BranchKind::O, BranchKind::P, BranchKind::Vp],
            dim: 64,
            branch_hidden: 128,
            dropout: 0.5,
            visual: VisualDims::default(),
            spatial_norm: SpatialNorm::Area,
            vp_negatives: VpNegatives::Observed,
            finetune_words: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Config("empty branch set".into()));
        }
        if self.branches.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("branch set must be sorted and unique".into()));
        }
        if self.dim == 0 || self.branch_hidden == 0 {
            return Err(Error::Config("dim and branch_hidden must be positive".into()));
        }
        let v = self.visual;
        if v.subject == 0 || v.object == 0 || v.spatial == 0 || v.spatial_hidden == 0 {
            return Err(Error::Config("visual dims must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// One joint space: `f_v^b` and `f_w^b`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBranch {
    pub kind: BranchKind,
    pub visual: Mlp,
    pub language: Mlp,
}

impl EmbeddingBranch {
    pub fn dim(&self) -> usize {
        self.visual.out_dim()
    }
}

/// Identifies one trainable parameter block of a [`JointModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Block {
    Words,
    VisualS,
    VisualO,
    VisualR,
    BranchVisual(BranchKind),
    BranchLanguage(BranchKind),
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Block::Words => f.write_str("words"),
            Block::VisualS => f.write_str("mlp_s"),
            Block::VisualO => f.write_str("mlp_o"),
            Block::VisualR => f.write_str("mlp_r"),
            Block::BranchVisual(k) => write!(f, "{k}.visual"),
            Block::BranchLanguage(k) => write!(f, "{k}.language"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    config: ModelConfig,
    vocab: Vocabularies,
    words: WordTable,
    rows: WordRows,
    visual: VisualInputParams,
    branches: Vec<EmbeddingBranch>,
    train_counts: BTreeMap<Triplet, usize>,
    universes: Vec<Vec<Triplet>>,
}

/// Visual embeddings of one pair, one per active branch.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEmbedding {
    pub v: Vec<Vec<f64>>,
}

/// Language embeddings of one query over a chosen set of branches.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding {
    pub triplet: Triplet,
    pub parts: Vec<(BranchKind, Vec<f64>)>,
}

impl QueryEmbedding {
    /// Replaces the vp factor, e.g. by a transferred embedding.
    pub fn with_vp(mut self, w: Vec<f64>) -> Result<Self> {
        match self.parts.iter_mut().find(|(k, _)| *k == BranchKind::Vp) {
            Some((_, slot)) => {
                *slot = w;
                Ok(self)
            }
            None => Err(Error::InactiveBranch("vp")),
        }
    }
}

impl JointModel {
    /// Fresh model for `train`'s vocabulary and triplet statistics.
    pub fn new(config: ModelConfig, train: &Dataset, words: &WordTable, seed: u64) -> Result<Self> {
        config.validate()?;
        let words = words.restrict(&train.vocab.all_tokens())?;
        let mut rng = rng_from(seed, "model.init");
        let visual = VisualInputParams::new(train.appearance_dim, config.visual, &mut rng)?;
        let mut branches = Vec::with_capacity(config.branches.len());
        for &kind in &config.branches {
            let vin = if kind.uses_full_visual() {
                visual.dim()
            } else {
                train.appearance_dim
            };
            let v = Mlp::new(&[vin, config.branch_hidden, config.dim], true, config.dropout, &mut rng)?;
            let l = Mlp::new(&[3 * words.dim(), config.branch_hidden, config.dim], true, 0.0, &mut rng)?;
            branches.push(EmbeddingBranch {
                kind,
                visual: v,
                language: l,
            });
        }
        Self::from_parts(config, train.vocab.clone(), words, visual, branches, train.counts().clone())
    }

    /// Assembles a model from explicit parameters, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        vocab: Vocabularies,
        words: WordTable,
        visual: VisualInputParams,
        branches: Vec<EmbeddingBranch>,
        train_counts: BTreeMap<Triplet, usize>,
    ) -> Result<Self> {
        config.validate()?;
        let rows = WordRows::resolve(&words, &vocab)?;
        if branches.iter().map(|b| b.kind).collect::<Vec<_>>() != config.branches {
            return Err(Error::Config("branch parameters do not match the branch set".into()));
        }
        if visual.dims() != config.visual {
            return Err(Error::Config("visual-input dims do not match the configuration".into()));
        }
        for b in &branches {
            let vin = if b.kind.uses_full_visual() {
                visual.dim()
            } else {
                visual.appearance_dim()
            };
            let shape_ok = b.visual.dims() == [vin, config.branch_hidden, config.dim]
                && b.language.dims() == [3 * words.dim(), config.branch_hidden, config.dim];
            if !shape_ok {
                return Err(Error::Config(format!("branch {} has unexpected shapes", b.kind)));
            }
        }
        if train_counts.keys().any(|&t| !vocab.contains(t)) {
            return Err(Error::Validation("triplet count outside the vocabulary".into()));
        }
        let universes = config
            .branches
            .iter()
            .map(|&k| label_universe(k, &vocab, &train_counts, config.vp_negatives))
            .collect();
        Ok(Self {
            config,
            vocab,
            words,
            rows,
            visual,
            branches,
            train_counts,
            universes,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabularies {
        &self.vocab
    }

    pub fn words(&self) -> &WordTable {
        &self.words
    }

    pub(crate) fn rows(&self) -> &WordRows {
        &self.rows
    }

    pub fn visual_params(&self) -> &VisualInputParams {
        &self.visual
    }

    pub fn branches(&self) -> &[EmbeddingBranch] {
        &self.branches
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn appearance_dim(&self) -> usize {
        self.visual.appearance_dim()
    }

    /// Positive-pair counts per training triplet.
    pub fn train_counts(&self) -> &BTreeMap<Triplet, usize> {
        &self.train_counts
    }

    pub fn has_branch(&self, kind: BranchKind) -> bool {
        self.config.branches.contains(&kind)
    }

    pub(crate) fn position(&self, kind: BranchKind) -> Result<usize> {
        self.config
            .branches
            .iter()
            .position(|&k| k == kind)
            .ok_or(Error::InactiveBranch(kind.as_str()))
    }

    pub fn branch(&self, kind: BranchKind) -> Result<&EmbeddingBranch> {
        Ok(&self.branches[self.position(kind)?])
    }

    /// Label keys of a branch (masked triplets), sorted.
    pub fn universe(&self, kind: BranchKind) -> Result<&[Triplet]> {
        Ok(&self.universes[self.position(kind)?])
    }

    /// Label keys of `pair` in branch `kind`. Subject and object branches
    /// take the pair's categories, so non-interacting pairs are positives
    /// there too.
    pub fn pair_labels(pair: &CandidatePair, kind: BranchKind) -> Vec<Triplet> {
        let mut keys: Vec<Triplet> = match kind {
            BranchKind::S => vec![Triplet::new(pair.sub_category, 0, 0)],
            BranchKind::O => vec![Triplet::new(0, 0, pair.obj_category)],
            _ => pair.positives().map(|t| kind.mask().key(t)).collect(),
        };
        keys.sort();
        keys.dedup();
        keys
    }

    /// Blocks in checkpoint and optimizer order.
    pub fn block_list(&self) -> Vec<Block> {
        let mut out = vec![Block::Words, Block::VisualS, Block::VisualO, Block::VisualR];
        for &k in &self.config.branches {
            out.push(Block::BranchVisual(k));
            out.push(Block::BranchLanguage(k));
        }
        out
    }

    pub fn block(&self, b: Block) -> Result<&[f64]> {
        Ok(match b {
            Block::Words => self.words.data(),
            Block::VisualS => self.visual.mlp_s.params(),
            Block::VisualO => self.visual.mlp_o.params(),
            Block::VisualR => self.visual.mlp_r.params(),
            Block::BranchVisual(k) => self.branch(k)?.visual.params(),
            Block::BranchLanguage(k) => self.branch(k)?.language.params(),
        })
    }

    /// Disjoint mutable views of `which`, in the order requested.
    pub fn blocks_mut(&mut self, which: &[Block]) -> Result<Vec<&mut [f64]>> {
        let mut all: Vec<(Block, Option<&mut [f64]>)> = vec![
            (Block::Words, Some(self.words.data_mut())),
            (Block::VisualS, Some(self.visual.mlp_s.params_mut())),
            (Block::VisualO, Some(self.visual.mlp_o.params_mut())),
            (Block::VisualR, Some(self.visual.mlp_r.params_mut())),
        ];
        for br in &mut self.branches {
            all.push((Block::BranchVisual(br.kind), Some(br.visual.params_mut())));
            all.push((Block::BranchLanguage(br.kind), Some(br.language.params_mut())));
        }
        let mut out = Vec::with_capacity(which.len());
        for b in which {
            let slot = all
                .iter_mut()
                .find(|(k, _)| k == b)
                .ok_or_else(|| Error::Config(format!("no parameter block {b}")))?;
            out.push(
                slot.1
                    .take()
                    .ok_or_else(|| Error::Config(format!("block {b} requested twice")))?,
            );
        }
        Ok(out)
    }

    pub fn visual_input(&self, pair: &CandidatePair) -> Result<VisualFeature> {
        self.visual.visual_input(pair, self.config.spatial_norm)
    }

    pub(crate) fn visual_forward(&self, pair: &CandidatePair) -> Result<(VisualFeature, crate::repr::VisualCache)> {
        self.visual.forward(pair, self.config.spatial_norm)
    }

    /// `v_i^b`, unnormalized. Dropout is sampled from `train` when given.
    pub fn embed_visual(&self, pair: &CandidatePair, kind: BranchKind, train: Option<&mut dyn RngCore>) -> Result<Vec<f64>> {
        let br = self.branch(kind)?;
        let feat = self.visual_input(pair)?;
        let input = branch_input(kind, &feat);
        Ok(br.visual.forward(input, train)?.0)
    }

    pub(crate) fn language_forward(&self, key: Triplet, kind: BranchKind) -> Result<(Vec<f64>, f64, MlpCache)> {
        self.language_forward_masked(key, kind, kind.mask())
    }

    /// Runs branch `kind`'s language network on `q` built with `mask`.
    pub(crate) fn language_forward_masked(&self, key: Triplet, kind: BranchKind, mask: LangMask) -> Result<(Vec<f64>, f64, MlpCache)> {
        let br = self.branch(kind)?;
        let q = language_input_rows(key, &self.rows, &self.words, mask);
        let (u, cache) = br.language.forward(&q, None)?;
        let (w, n) = normalize(&u).ok_or(Error::DegenerateEmbedding)?;
        Ok((w, n, cache))
    }

    /// `w_t^b`, unit norm.
    pub fn embed_language(&self, t: Triplet, kind: BranchKind) -> Result<Vec<f64>> {
        self.check_triplet(t)?;
        Ok(self.language_forward(kind.mask().key(t), kind)?.0)
    }

    pub(crate) fn check_triplet(&self, t: Triplet) -> Result<()> {
        if self.vocab.contains(t) {
            Ok(())
        } else {
            Err(Error::Validation(format!("triplet {t} outside the vocabulary")))
        }
    }

    /// Evaluation-mode visual embeddings of `pair` for every active branch.
    pub fn pair_embedding(&self, pair: &CandidatePair) -> Result<PairEmbedding> {
        let feat = self.visual_input(pair)?;
        let v = self
            .branches
            .iter()
            .map(|br| br.visual.infer(branch_input(br.kind, &feat)))
            .collect::<Result<_>>()?;
        Ok(PairEmbedding { v })
    }

    pub fn query_embedding(&self, t: Triplet, kinds: &[BranchKind]) -> Result<QueryEmbedding> {
        let parts = kinds
            .iter()
            .map(|&k| Ok((k, self.embed_language(t, k)?)))
            .collect::<Result<_>>()?;
        Ok(QueryEmbedding { triplet: t, parts })
    }

    /// `log S_{t,i}`; ranking on this avoids ties from saturated sigmoids.
    pub fn log_score(&self, query: &QueryEmbedding, pair: &PairEmbedding) -> Result<f64> {
        let mut acc = 0.0;
        for (k, w) in &query.parts {
            acc += log_sigmoid(dot(w, &pair.v[self.position(*k)?]));
        }
        Ok(acc)
    }

    /// `S_{t,i} = Π_b σ(w_t^b · v_i^b)` over the active branches.
    pub fn score(&self, t: Triplet, pair: &CandidatePair) -> Result<f64> {
        let q = self.query_embedding(t, &self.config.branches)?;
        Ok(self.log_score(&q, &self.pair_embedding(pair)?)?.exp())
    }
}

pub(crate) fn branch_input(kind: BranchKind, feat: &VisualFeature) -> &[f64] {
    match kind {
        BranchKind::S => &feat.sub_appearance,
        BranchKind::O => &feat.obj_appearance,
        _ => &feat.x,
    }
}

fn label_universe(kind: BranchKind, vocab: &Vocabularies, counts: &BTreeMap<Triplet, usize>, neg: VpNegatives) -> Vec<Triplet> {
    let (ns, np, no) = (vocab.subjects.len(), vocab.predicates.len(), vocab.objects.len());
    let mask = kind.mask();
    let set: BTreeSet<Triplet> = match (kind, neg) {
        (BranchKind::S, _) => (0..ns).map(|s| Triplet::new(s, 0, 0)).collect(),
        (BranchKind::O, _) => (0..no).map(|o| Triplet::new(0, 0, o)).collect(),
        (BranchKind::P, _) => (0..np).map(|p| Triplet::new(0, p, 0)).collect(),
        (_, VpNegatives::Observed) => counts.keys().map(|&t| mask.key(t)).collect(),
        (_, VpNegatives::Cartesian) => {
            let mut all = BTreeSet::new();
            for s in 0..ns {
                for p in 0..np {
                    for o in 0..no {
                        all.insert(mask.key(Triplet::new(s, p, o)));
                    }
                }
            }
            all
        }
    };
    set.into_iter().collect()
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::datamodel::{BoundingBox, Vocabulary};
    use crate::numkit::SeedRng;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Small random dataset: `n` pairs over 5-token vocabularies.
    pub fn toy_dataset(n: usize, appearance_dim: usize, rng: &mut SeedRng) -> (Dataset, WordTable) {
        let names = |p: &str| (0..5).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        let vocab = Vocabularies {
            subjects: Vocabulary::new(names("s")).unwrap(),
            predicates: Vocabulary::new(names("p")).unwrap(),
            objects: Vocabulary::new(names("o")).unwrap(),
        };
        let gauss = |rng: &mut SeedRng, k: usize| -> Vec<f64> { (0..k).map(|_| StandardNormal.sample(rng)).collect() };
        let mut pairs = Vec::new();
        for id in 0..n {
            let x: f64 = rng.random_range(0.0..50.0);
            let y: f64 = rng.random_range(0.0..50.0);
            let sub = BoundingBox::new(x, y, x + rng.random_range(5.0..40.0), y + rng.random_range(5.0..40.0)).unwrap();
            let obj = BoundingBox::new(y, x, y + rng.random_range(5.0..40.0), x + rng.random_range(5.0..40.0)).unwrap();
            let mut predicates: Vec<usize> = (0..5).filter(|_| rng.random::<f64>() < 0.3).collect();
            if id % 3 == 2 {
                predicates.clear();
            }
            pairs.push(CandidatePair {
                id: id as u64,
                image: format!("im{id}"),
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
            let v = gauss(rng, 4);
            words.insert(t, &v).unwrap();
        }
        (Dataset::new(vocab, appearance_dim, pairs).unwrap(), words)
    }

    pub fn toy_config(branches: &[BranchKind], dropout: f64) -> ModelConfig {
        ModelConfig {
            branches: branches.to_vec(),
            dim: 8,
            branch_hidden: 16,
            dropout,
            visual: VisualDims {
                subject: 4,
                object: 4,
                spatial_hidden: 5,
                spatial: 3,
            },
            spatial_norm: SpatialNorm::Extent,
            vp_negatives: VpNegatives::Observed,
            finetune_words: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use crate::numkit::{sigmoid, Matrix};

    fn toy_model(branches: &[BranchKind], seed: u64) -> (JointModel, Dataset) {
        let (ds, words) = toy_dataset(10, 3, &mut rng_from(seed, "data"));
        (JointModel::new(toy_config(branches, 0.0), &ds, &words, seed).unwrap(), ds)
    }

    #[test]
    fn branch_set_parsing() {
        assert_eq!(
            parse_branch_set("vp+s+o").unwrap(),
            vec![BranchKind::S, BranchKind::O, BranchKind::Vp]
        );
        assert_eq!(format_branch_set(&parse_branch_set("s,o,p,vp,sp,po").unwrap()), "s+o+p+vp+sp+po");
        assert!(parse_branch_set("s+s").is_err());
        assert!(parse_branch_set("s+x").is_err());
        assert!(parse_branch_set("").is_err());
    }

    #[test]
    fn language_embeddings_are_unit_norm_and_masked() {
        let (m, _) = toy_model(&BranchKind::ALL, 1);
        for kind in BranchKind::ALL {
            for s in 0..5 {
                for o in 0..5 {
                    let w = m.embed_language(Triplet::new(s, 2, o), kind).unwrap();
                    assert!((crate::numkit::norm2(&w) - 1.0).abs() < 1e-12);
                }
            }
        }
        let a = m.embed_language(Triplet::new(1, 3, 0), BranchKind::P).unwrap();
        let b = m.embed_language(Triplet::new(4, 3, 2), BranchKind::P).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inactive_branch_is_an_error() {
        let (m, ds) = toy_model(&[BranchKind::S, BranchKind::O], 2);
        assert!(matches!(
            m.embed_visual(&ds.pairs()[0], BranchKind::Vp, None),
            Err(Error::InactiveBranch("vp"))
        ));
    }

    #[test]
    fn subject_branch_ignores_object_appearance() {
        let (m, ds) = toy_model(&[BranchKind::S, BranchKind::O, BranchKind::P], 3);
        let mut p = ds.pairs()[0].clone();
        let a = m.embed_visual(&p, BranchKind::S, None).unwrap();
        p.obj_appearance.iter_mut().for_each(|v| *v += 1.0);
        assert_eq!(a, m.embed_visual(&p, BranchKind::S, None).unwrap());
    }

    #[test]
    fn identity_visual_branch() {
        let (m, ds) = toy_model(&[BranchKind::S], 4);
        let cfg = ModelConfig {
            dim: 3,
            branch_hidden: 3,
            ..m.config().clone()
        };
        let mut visual = Mlp::zeros(&[3, 3, 3], true, 0.0).unwrap();
        visual.set_weight(0, &Matrix::identity(3)).unwrap();
        visual.set_weight(1, &Matrix::identity(3)).unwrap();
        let language = Mlp::new(&[12, 3, 3], true, 0.0, &mut rng_from(0, "l")).unwrap();
        let m2 = JointModel::from_parts(
            cfg,
            m.vocab().clone(),
            m.words().clone(),
            m.visual_params().clone(),
            vec![EmbeddingBranch {
                kind: BranchKind::S,
                visual,
                language,
            }],
            m.train_counts().clone(),
        )
        .unwrap();
        let mut p = ds.pairs()[0].clone();
        p.sub_appearance = vec![1.0, 0.0, 0.0];
        assert_eq!(m2.embed_visual(&p, BranchKind::S, None).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn seeded_embeddings_match_straight_line() {
        let (m, ds) = toy_model(&[BranchKind::P, BranchKind::Vp], 5);
        let two_layer = |net: &Mlp, x: &[f64]| -> Vec<f64> {
            let (w1, b1, w2, b2) = (net.weight(0), net.bias(0).unwrap(), net.weight(1), net.bias(1).unwrap());
            let h: Vec<f64> = (0..w1.rows())
                .map(|r| (b1[r] + (0..w1.cols()).map(|c| w1.get(r, c) * x[c]).sum::<f64>()).max(0.0))
                .collect();
            (0..w2.rows())
                .map(|r| b2[r] + (0..w2.cols()).map(|c| w2.get(r, c) * h[c]).sum::<f64>())
                .collect()
        };
        let pair = &ds.pairs()[3];
        let br = m.branch(BranchKind::Vp).unwrap();
        let x = m.visual_input(pair).unwrap().x;
        let want = two_layer(&br.visual, &x);
        let got = m.embed_visual(pair, BranchKind::Vp, None).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        let t = Triplet::new(1, 2, 3);
        let q = crate::repr::language_input(t, m.vocab(), m.words(), LangMask::Full).unwrap();
        let u = two_layer(&br.language, &q);
        let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        let got = m.embed_language(t, BranchKind::Vp).unwrap();
        for (a, b) in got.iter().zip(&u) {
            assert!((a - b / n).abs() < 1e-12);
        }
    }

    #[test]
    fn score_is_product_of_sigmoids() {
        let (m, ds) = toy_model(&[BranchKind::S, BranchKind::O, BranchKind::P, BranchKind::Vp], 6);
        let pair = &ds.pairs()[1];
        let t = Triplet::new(0, 1, 2);
        let mut want = 1.0;
        for k in m.config().branches.clone() {
            want *= sigmoid(dot(&m.embed_language(t, k).unwrap(), &m.embed_visual(pair, k, None).unwrap()));
        }
        let got = m.score(t, pair).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!(got > 0.0 && got < 1.0);
    }

    #[test]
    fn compositional_score_ignores_predicate() {
        let (m, ds) = toy_model(&[BranchKind::S, BranchKind::O], 7);
        for pair in ds.pairs() {
            let a = m.score(Triplet::new(1, 0, 2), pair).unwrap();
            let b = m.score(Triplet::new(1, 4, 2), pair).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn universes() {
        let (m, ds) = toy_model(&BranchKind::ALL, 8);
        assert_eq!(m.universe(BranchKind::S).unwrap().len(), 5);
        let vp = m.universe(BranchKind::Vp).unwrap();
        assert_eq!(vp, ds.observed().into_iter().collect::<Vec<_>>().as_slice());
        let po = m.universe(BranchKind::Po).unwrap();
        assert!(po.iter().all(|t| t.s == 0));
        let cart = JointModel::new(
            ModelConfig {
                vp_negatives: VpNegatives::Cartesian,
                ..m.config().clone()
            },
            &ds,
            m.words(),
            8,
        )
        .unwrap();
        assert_eq!(cart.universe(BranchKind::Vp).unwrap().len(), 125);
        assert_eq!(cart.universe(BranchKind::Sp).unwrap().len(), 25);
    }

    #[test]
    fn blocks_mut_rejects_duplicates() {
        let (mut m, _) = toy_model(&[BranchKind::S], 9);
        assert!(m.blocks_mut(&[Block::VisualS, Block::VisualS]).is_err());
        assert!(m.blocks_mut(&[Block::BranchVisual(BranchKind::P)]).is_err());
        let list = m.block_list();
        assert_eq!(m.blocks_mut(&list).unwrap().len(), 6);
    }
}
