//! End-to-end training and evaluation on top of the library pieces.

use crate::analogy::{eligible_pool, train_stage2, GammaKind, GammaParams, Stage2Trace, Transfer};
use crate::checkpoint::Checkpoint;
use crate::cli::{EvalMode, RunConfig};
use crate::datamodel::{Dataset, Triplet, WordTable};
use crate::embed::{train_stage1, BranchKind, JointModel, LossTrace, PairEmbedding};
use crate::error::{Error, Result};
use crate::evalkit::{average_precision, ground_truth, rank_candidates, APResult, Detection, MatchPolicy};
use crate::numkit::rng_from;

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub stage1: LossTrace,
    pub stage2: Stage2Trace,
}

impl TrainOutput {
    pub fn loss_text(&self) -> String {
        let mut s = self.stage1.to_text("stage1");
        s.push_str(&self.stage2.to_text());
        s
    }
}

/// Builds and trains the joint model (stage 1 only).
pub fn train_joint(cfg: &RunConfig, train: &Dataset, words: &WordTable) -> Result<(JointModel, LossTrace)> {
    cfg.validate()?;
    let mut model = JointModel::new(cfg.model.clone(), train, words, cfg.seed)?;
    let trace = train_stage1(&mut model, train, &cfg.stage1, cfg.seed)?;
    Ok((model, trace))
}

/// Γ before stage 2.
pub fn init_gamma(cfg: &RunConfig, dim: usize) -> Result<GammaParams> {
    GammaParams::new(cfg.gamma, dim, cfg.gamma_hidden_or_default(), &mut rng_from(cfg.seed, "gamma.init"))
}

/// Runs stage 2 on a copy of a stage-1 model for the configured Γ kind.
pub fn train_analogy(cfg: &RunConfig, stage1: &JointModel, train: &Dataset) -> Result<(JointModel, GammaParams, Stage2Trace)> {
    let mut model = stage1.clone();
    let mut gamma = init_gamma(cfg, model.dim())?;
    let trace = if model.has_branch(BranchKind::Vp) {
        train_stage2(&mut model, &mut gamma, train, &cfg.transfer, &cfg.stage2(), cfg.seed)?
    } else {
        Stage2Trace::default()
    };
    Ok((model, gamma, trace))
}

/// Both stages. Stage 2 only runs when the vp branch is trained.
pub fn train_full(cfg: &RunConfig, train: &Dataset, words: &WordTable) -> Result<TrainOutput> {
    let (model, stage1) = train_joint(cfg, train, words)?;
    let (model, gamma, stage2) = train_analogy(cfg, &model, train)?;
    Ok(TrainOutput {
        checkpoint: Checkpoint {
            model,
            gamma,
            seed: cfg.seed,
        },
        stage1,
        stage2,
    })
}

#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub result: APResult,
    pub detections: Vec<Detection>,
}

/// Scores queries against a test set and computes per-query AP.
pub struct Evaluator<'a> {
    model: &'a JointModel,
    test: &'a Dataset,
    embeddings: Vec<PairEmbedding>,
    branches: Vec<BranchKind>,
    policy: MatchPolicy,
    transfer: Option<Transfer<'a>>,
}

impl<'a> Evaluator<'a> {
    /// `branches` empty means every trained branch. Transfer mode replaces
    /// the vp factor of each query by its transferred estimate, drawing
    /// sources from the non-rare training triplets.
    pub fn new(
        model: &'a JointModel,
        gamma: &'a GammaParams,
        cfg: &'a RunConfig,
        test: &'a Dataset,
        branches: &[BranchKind],
        mode: EvalMode,
    ) -> Result<Self> {
        if test.vocab != *model.vocab() {
            return Err(Error::Validation("test set vocabularies differ from the model's".into()));
        }
        let branches = if branches.is_empty() {
            model.config().branches.clone()
        } else {
            branches.to_vec()
        };
        for &b in &branches {
            model.branch(b)?;
        }
        let transfer = match mode {
            EvalMode::Direct => None,
            EvalMode::Transfer => {
                if !branches.contains(&BranchKind::Vp) {
                    return Err(Error::Config("transfer mode needs vp among the score branches".into()));
                }
                Some(Transfer::new(model, gamma, &cfg.transfer, eligible_pool(model, &cfg.transfer))?)
            }
        };
        let embeddings = test.pairs().iter().map(|p| model.pair_embedding(p)).collect::<Result<_>>()?;
        Ok(Self {
            model,
            test,
            embeddings,
            branches,
            policy: MatchPolicy::new(cfg.iou_threshold)?,
            transfer,
        })
    }

    pub fn query(&self, t: Triplet) -> Result<QueryOutcome> {
        let mut q = self.model.query_embedding(t, &self.branches)?;
        if let Some(tr) = &self.transfer {
            q = q.with_vp(tr.embedding(t)?)?;
        }
        let detections = rank_candidates(self.model, &q, self.test.pairs(), &self.embeddings)?;
        let gt = ground_truth(self.test, t);
        Ok(QueryOutcome {
            result: average_precision(t, &detections, &gt, &self.policy),
            detections,
        })
    }

    pub fn run(&self, queries: &[Triplet]) -> Result<Vec<QueryOutcome>> {
        if queries.is_empty() {
            return Err(Error::EmptyQueries);
        }
        queries.iter().map(|&t| self.query(t)).collect()
    }
}

/// Per-query AP for `queries` under the configured matching policy.
pub fn evaluate(
    model: &JointModel,
    gamma: &GammaParams,
    cfg: &RunConfig,
    test: &Dataset,
    queries: &[Triplet],
    branches: &[BranchKind],
    mode: EvalMode,
) -> Result<Vec<APResult>> {
    let ev = Evaluator::new(model, gamma, cfg, test, branches, mode)?;
    Ok(ev.run(queries)?.into_iter().map(|o| o.result).collect())
}

/// Triplets with at least one positive in `dataset`, in triplet order.
pub fn observed_queries(dataset: &Dataset) -> Vec<Triplet> {
    dataset.observed().into_iter().collect()
}

/// A stand-in Γ for models evaluated without one.
pub fn absent_gamma(model: &JointModel) -> GammaParams {
    GammaParams::from_parts(GammaKind::Absent, model.dim(), None).expect("absent gamma has no parameters")
}
