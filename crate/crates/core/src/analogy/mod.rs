//! Transfer of visual-phrase embeddings to unseen triplets: the analogy
//! correction Γ, the similarity weighting G, source selection, aggregation
//! and the analogy loss used in the second training stage.

mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::RngCore;

use crate::datamodel::{CandidatePair, Triplet};
use crate::embed::{BranchKind, JointModel, ModelGrads};
use crate::error::{Error, Result};
use crate::numkit::{axpy, dot, normalize, sigmoid, softplus, Mlp, MlpCache};
use crate::repr::LangMask;

pub use train::{train_stage2, Stage2Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GammaKind {
    /// Raw source embeddings are aggregated; no second stage.
    Absent,
    /// Second stage runs with a correction fixed at zero.
    Zero,
    Linear,
    #[default]
    Deep,
}

impl GammaKind {
    pub const ALL: [GammaKind; 4] = [GammaKind::Absent, GammaKind::Zero, GammaKind::Linear, GammaKind::Deep];

    pub fn as_str(self) -> &'static str {
        match self {
            GammaKind::Absent => "absent",
            GammaKind::Zero => "zero",
            GammaKind::Linear => "linear",
            GammaKind::Deep => "deep",
        }
    }
}

impl fmt::Display for GammaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GammaKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        GammaKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown gamma kind '{s}'")))
    }
}

/// Γ: a bias-free map from stacked unigram differences (3d) to a correction (d).
#[derive(Debug, Clone, PartialEq)]
pub struct GammaParams {
    kind: GammaKind,
    dim: usize,
    net: Option<Mlp>,
}

impl GammaParams {
    /// `hidden` is only used by the deep kind.
    pub fn new<R: Rng + ?Sized>(kind: GammaKind, dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let net = match kind {
            GammaKind::Absent | GammaKind::Zero => None,
            GammaKind::Linear => Some(Mlp::new(&[3 * dim, dim], false, 0.0, rng)?),
            GammaKind::Deep => Some(Mlp::new(&[3 * dim, hidden, dim], false, 0.0, rng)?),
        };
        Ok(Self { kind, dim, net })
    }

    pub fn from_parts(kind: GammaKind, dim: usize, net: Option<Mlp>) -> Result<Self> {
        let ok = match (&kind, &net) {
            (GammaKind::Absent | GammaKind::Zero, None) => true,
            (GammaKind::Linear, Some(n)) => n.dims() == [3 * dim, dim] && !n.has_bias(),
            (GammaKind::Deep, Some(n)) => n.n_layers() == 2 && n.in_dim() == 3 * dim && n.out_dim() == dim && !n.has_bias(),
            _ => false,
        };
        if !ok {
            return Err(Error::Config(format!("parameters do not fit gamma kind {kind}")));
        }
        Ok(Self { kind, dim, net })
    }

    pub fn kind(&self) -> GammaKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn net(&self) -> Option<&Mlp> {
        self.net.as_ref()
    }

    pub fn hidden(&self) -> Option<usize> {
        self.net.as_ref().filter(|n| n.n_layers() == 2).map(|n| n.dims()[1])
    }

    pub fn params(&self) -> &[f64] {
        self.net.as_ref().map_or(&[], |n| n.params())
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self.net.as_mut() {
            Some(n) => n.params_mut(),
            None => &mut [],
        }
    }

    /// Correction for a stacked difference vector; zero for the parameter-free kinds.
    pub fn apply(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.0)
    }

    pub(crate) fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Option<MlpCache>)> {
        if input.len() != 3 * self.dim {
            return Err(Error::Shape {
                context: "GammaParams::apply",
                expected: 3 * self.dim,
                got: input.len(),
            });
        }
        match &self.net {
            None => Ok((vec![0.0; self.dim], None)),
            Some(n) => {
                let (y, c) = n.forward(input, None)?;
                Ok((y, Some(c)))
            }
        }
    }

    pub(crate) fn backward_into(&self, cache: Option<&MlpCache>, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        if let (Some(n), Some(c)) = (&self.net, cache) {
            n.backward_into(c, upstream, grad)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Subject,
    Predicate,
    Object,
}

/// vp-branch language embedding of a single word in its slot, others zero.
pub fn unigram_vp_embedding(model: &JointModel, index: usize, slot: Slot) -> Result<Vec<f64>> {
    let (key, mask, n) = match slot {
        Slot::Subject => (Triplet::new(index, 0, 0), LangMask::S, model.vocab().subjects.len()),
        Slot::Predicate => (Triplet::new(0, index, 0), LangMask::P, model.vocab().predicates.len()),
        Slot::Object => (Triplet::new(0, 0, index), LangMask::O, model.vocab().objects.len()),
    };
    if index >= n {
        return Err(Error::Validation(format!("token index {index} outside the {slot:?} vocabulary")));
    }
    Ok(model.language_forward_masked(key, BranchKind::Vp, mask)?.0)
}

/// All unigram vp embeddings of a model, per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct UnigramTable {
    pub subjects: Vec<Vec<f64>>,
    pub predicates: Vec<Vec<f64>>,
    pub objects: Vec<Vec<f64>>,
}

impl UnigramTable {
    pub fn new(model: &JointModel) -> Result<Self> {
        let v = model.vocab();
        let all = |slot, n: usize| (0..n).map(|i| unigram_vp_embedding(model, i, slot)).collect::<Result<Vec<_>>>();
        Ok(Self {
            subjects: all(Slot::Subject, v.subjects.len())?,
            predicates: all(Slot::Predicate, v.predicates.len())?,
            objects: all(Slot::Object, v.objects.len())?,
        })
    }

    /// `[w_{s'} - w_s; w_{p'} - w_p; w_{o'} - w_o]` for source `t`, target `u`.
    pub fn gamma_input(&self, t: Triplet, u: Triplet) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.subjects[0].len());
        for (table, a, b) in [
            (&self.subjects, t.s, u.s),
            (&self.predicates, t.p, u.p),
            (&self.objects, t.o, u.o),
        ] {
            out.extend(table[b].iter().zip(&table[a]).map(|(x, y)| x - y));
        }
        out
    }
}

/// `w_t^vp + Γ(t, u)`.
pub fn gamma_apply(gamma: &GammaParams, model: &JointModel, t: Triplet, u: Triplet) -> Result<Vec<f64>> {
    model.check_triplet(u)?;
    let unigrams = UnigramTable::new(model)?;
    let mut w = model.embed_language(t, BranchKind::Vp)?;
    let corr = gamma.apply(&unigrams.gamma_input(t, u))?;
    for (a, b) in w.iter_mut().zip(&corr) {
        *a += b;
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimilarityInput {
    /// Language embeddings of the s, p and o branches.
    #[default]
    Embeddings,
    /// Unit-normalized raw word vectors.
    Words,
}

impl fmt::Display for SimilarityInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityInput::Embeddings => "embeddings",
            SimilarityInput::Words => "words",
        })
    }
}

impl FromStr for SimilarityInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embeddings" => Ok(SimilarityInput::Embeddings),
            "words" => Ok(SimilarityInput::Words),
            _ => Err(Error::Config(format!("unknown similarity input '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferConfig {
    pub k: usize,
    /// Weights of the subject, predicate and object similarities.
    pub alpha: [f64; 3],
    pub lambda: f64,
    pub similarity: SimilarityInput,
    pub clamp_g: bool,
    pub normalize_aggregation: bool,
    /// Minimum training count of a source triplet.
    pub rare_threshold: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            k: 5,
            alpha: [0.1, 0.8, 0.1],
            lambda: 1.0,
            similarity: SimilarityInput::Embeddings,
            clamp_g: true,
            normalize_aggregation: false,
            rare_threshold: crate::datamodel::DEFAULT_RARE_THRESHOLD,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if (self.alpha.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("alpha weights must sum to 1".into()));
        }
        if self.alpha.iter().any(|a| !a.is_finite()) || !self.lambda.is_finite() {
            return Err(Error::Config("alpha and lambda must be finite".into()));
        }
        Ok(())
    }
}

/// Precomputed per-word vectors entering G.
#[derive(Debug, Clone)]
pub struct SimilarityIndex {
    subjects: Vec<Vec<f64>>,
    predicates: Vec<Vec<f64>>,
    objects: Vec<Vec<f64>>,
    alpha: [f64; 3],
    clamp: bool,
}

impl SimilarityIndex {
    pub fn new(model: &JointModel, cfg: &TransferConfig) -> Result<Self> {
        cfg.validate()?;
        let v = model.vocab();
        let (subjects, predicates, objects) = match cfg.similarity {
            SimilarityInput::Embeddings => {
                let emb = |kind: BranchKind, n: usize, key: fn(usize) -> Triplet| {
                    (0..n).map(|i| model.embed_language(key(i), kind)).collect::<Result<Vec<_>>>()
                };
                (
                    emb(BranchKind::S, v.subjects.len(), |i| Triplet::new(i, 0, 0))?,
                    emb(BranchKind::P, v.predicates.len(), |i| Triplet::new(0, i, 0))?,
                    emb(BranchKind::O, v.objects.len(), |i| Triplet::new(0, 0, i))?,
                )
            }
            SimilarityInput::Words => {
                let words = model.words();
                let unit = |toks: &[String]| {
                    toks.iter()
                        .map(|t| {
                            let w = words.get(t).ok_or_else(|| Error::UnknownToken(t.clone()))?;
                            normalize(w).map(|(u, _)| u).ok_or(Error::DegenerateEmbedding)
                        })
                        .collect::<Result<Vec<_>>>()
                };
                (unit(v.subjects.tokens())?, unit(v.predicates.tokens())?, unit(v.objects.tokens())?)
            }
        };
        Ok(Self {
            subjects,
            predicates,
            objects,
            alpha: cfg.alpha,
            clamp: cfg.clamp_g,
        })
    }

    /// `G(t, u) = Σ_b α_b w_t^b · w_u^b`, clamped to `[0, 1]` when enabled.
    pub fn g(&self, t: Triplet, u: Triplet) -> f64 {
        let raw = self.alpha[0] * dot(&self.subjects[t.s], &self.subjects[u.s])
            + self.alpha[1] * dot(&self.predicates[t.p], &self.predicates[u.p])
            + self.alpha[2] * dot(&self.objects[t.o], &self.objects[u.o]);
        if self.clamp {
            raw.clamp(0.0, 1.0)
        } else {
            raw
        }
    }

    /// The `k` pool members with the largest G, descending; ties by triplet order.
    pub fn select(&self, u: Triplet, pool: &[Triplet], k: usize) -> Result<SourceSet> {
        if pool.is_empty() {
            return Err(Error::EmptyPool(u));
        }
        let mut scored: Vec<(Triplet, f64)> = pool.iter().map(|&t| (t, self.g(t, u))).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(SourceSet {
            target: u,
            sources: scored,
        })
    }
}

pub fn similarity_g(model: &JointModel, cfg: &TransferConfig, t: Triplet, u: Triplet) -> Result<f64> {
    model.check_triplet(t)?;
    model.check_triplet(u)?;
    Ok(SimilarityIndex::new(model, cfg)?.g(t, u))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceSet {
    pub target: Triplet,
    /// `(source, G(source, target))`, descending in G.
    pub sources: Vec<(Triplet, f64)>,
}

/// Non-rare training triplets, sorted.
pub fn eligible_pool(model: &JointModel, cfg: &TransferConfig) -> Vec<Triplet> {
    model
        .train_counts()
        .iter()
        .filter(|(_, &c)| c >= cfg.rare_threshold)
        .map(|(&t, _)| t)
        .collect()
}

pub fn select_sources(model: &JointModel, cfg: &TransferConfig, u: Triplet, pool: &[Triplet]) -> Result<SourceSet> {
    model.check_triplet(u)?;
    SimilarityIndex::new(model, cfg)?.select(u, pool, cfg.k)
}

/// Everything needed to transfer many targets from one frozen model.
pub struct Transfer<'a> {
    model: &'a JointModel,
    gamma: &'a GammaParams,
    cfg: &'a TransferConfig,
    index: SimilarityIndex,
    unigrams: UnigramTable,
    pool: Vec<Triplet>,
}

impl<'a> Transfer<'a> {
    pub fn new(model: &'a JointModel, gamma: &'a GammaParams, cfg: &'a TransferConfig, pool: Vec<Triplet>) -> Result<Self> {
        model.branch(BranchKind::Vp)?;
        Ok(Self {
            model,
            gamma,
            cfg,
            index: SimilarityIndex::new(model, cfg)?,
            unigrams: UnigramTable::new(model)?,
            pool,
        })
    }

    pub fn sources(&self, u: Triplet) -> Result<SourceSet> {
        self.model.check_triplet(u)?;
        self.index.select(u, &self.pool, self.cfg.k)
    }

    /// `w̄_u = Σ_t G(t,u) (w_t + Γ(t,u))` over the sources of `u`.
    pub fn embedding(&self, u: Triplet) -> Result<Vec<f64>> {
        let set = self.sources(u)?;
        let total: f64 = set.sources.iter().map(|(_, g)| g).sum();
        if set.sources.iter().all(|(_, g)| *g == 0.0) {
            return Err(Error::NoInformativeSources(u));
        }
        let mut out = vec![0.0; self.model.dim()];
        for &(t, g) in &set.sources {
            let mut w = self.model.embed_language(t, BranchKind::Vp)?;
            if self.gamma.kind() != GammaKind::Absent {
                let corr = self.gamma.apply(&self.unigrams.gamma_input(t, u))?;
                for (a, b) in w.iter_mut().zip(&corr) {
                    *a += b;
                }
            }
            axpy(g, &w, &mut out);
        }
        if self.cfg.normalize_aggregation {
            out.iter_mut().for_each(|v| *v /= total);
        }
        Ok(out)
    }
}

pub fn transfer_embedding(model: &JointModel, gamma: &GammaParams, cfg: &TransferConfig, u: Triplet, pool: &[Triplet]) -> Result<Vec<f64>> {
    Transfer::new(model, gamma, cfg, pool.to_vec())?.embedding(u)
}

/// Gradients of the analogy loss. Language projections receive none.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalogyGrads {
    pub model: ModelGrads,
    pub gamma: Vec<f64>,
}

/// Negated log-likelihood of the vp branch where each target `u` of `q` is
/// represented by `w_t + Γ(t, u)` for its paired source `t`. Averaged over
/// (pair, element of `q`) terms. Gradients reach Γ and `f_v^vp` only: `w_t`
/// and the unigram differences are constants here.
pub fn analogy_loss(
    model: &JointModel,
    gamma: &GammaParams,
    batch: &[&CandidatePair],
    q: &[(Triplet, Triplet)],
    mut rng: Option<&mut dyn RngCore>,
) -> Result<(f64, AnalogyGrads)> {
    let br = model.branch(BranchKind::Vp)?;
    let mut grads = AnalogyGrads {
        model: ModelGrads::zeros(model),
        gamma: vec![0.0; gamma.params().len()],
    };
    let n_terms = (batch.len() * q.len()) as f64;
    if n_terms == 0.0 {
        return Ok((0.0, grads));
    }
    let unigrams = UnigramTable::new(model)?;
    let mut targets = Vec::with_capacity(q.len());
    for &(t, u) in q {
        model.check_triplet(u)?;
        let w = model.embed_language(t, BranchKind::Vp)?;
        let (corr, cache) = gamma.forward(&unigrams.gamma_input(t, u))?;
        let wt: Vec<f64> = w.iter().zip(&corr).map(|(a, b)| a + b).collect();
        targets.push((u, wt, cache));
    }
    let d = model.dim();
    let mut dw = vec![vec![0.0; d]; q.len()];
    let mut gv = vec![0.0; br.visual.n_params()];
    let mut loss = 0.0;
    for pair in batch {
        let feat = model.visual_input(pair)?;
        let (v, cache) = br.visual.forward(&feat.x, rng.as_mut().map(|r| &mut **r as &mut dyn RngCore))?;
        let mut dv = vec![0.0; d];
        for (j, (u, w, _)) in targets.iter().enumerate() {
            let z = dot(w, &v);
            let y = pair.has_label(*u);
            loss += if y { softplus(-z) } else { softplus(z) };
            let g = (sigmoid(z) - if y { 1.0 } else { 0.0 }) / n_terms;
            axpy(g, w, &mut dv);
            axpy(g, &v, &mut dw[j]);
        }
        br.visual.backward_into(&cache, &dv, &mut gv)?;
    }
    *grads
        .model
        .get_mut(crate::embed::Block::BranchVisual(BranchKind::Vp))
        .expect("active vp branch") = gv;
    for ((_, _, cache), d) in targets.iter().zip(&dw) {
        gamma.backward_into(cache.as_ref(), d, &mut grads.gamma)?;
    }
    Ok((loss / n_terms, grads))
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::datamodel::Dataset;
    use crate::embed::testutil::{toy_config, toy_dataset};
    use crate::numkit::rng_from;

    pub fn toy(seed: u64, dropout: f64) -> (JointModel, Dataset) {
        let (ds, words) = toy_dataset(10, 3, &mut rng_from(seed, "data"));
        let m = JointModel::new(
            toy_config(&[BranchKind::S, BranchKind::O, BranchKind::P, BranchKind::Vp], dropout),
            &ds,
            &words,
            seed,
        )
        .unwrap();
        (m, ds)
    }
}
