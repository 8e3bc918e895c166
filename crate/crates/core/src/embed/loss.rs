use rand::RngCore;

use super::{branch_input, Block, BranchKind, JointModel};
use crate::datamodel::CandidatePair;
use crate::error::{Error, Result};
use crate::numkit::{axpy, dot, sigmoid, softplus, MlpCache};
use crate::repr::{scatter_language_grad, VisualCache, VisualFeature};

/// Gradients for every block of a [`JointModel`], in [`JointModel::block_list`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    blocks: Vec<(Block, Vec<f64>)>,
}

impl ModelGrads {
    pub fn zeros(model: &JointModel) -> Self {
        let blocks = model
            .block_list()
            .into_iter()
            .map(|b| (b, vec![0.0; model.block(b).expect("listed block").len()]))
            .collect();
        Self { blocks }
    }

    pub fn blocks(&self) -> &[(Block, Vec<f64>)] {
        &self.blocks
    }

    pub fn get(&self, b: Block) -> Option<&[f64]> {
        self.blocks.iter().find(|(k, _)| *k == b).map(|(_, g)| g.as_slice())
    }

    pub fn get_mut(&mut self, b: Block) -> Option<&mut Vec<f64>> {
        self.blocks.iter_mut().find(|(k, _)| *k == b).map(|(_, g)| g)
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &ModelGrads) {
        for ((a, ga), (b, gb)) in self.blocks.iter_mut().zip(&other.blocks) {
            debug_assert_eq!(a, b);
            axpy(alpha, gb, ga);
        }
    }

    /// First non-finite component, as an error naming its block.
    pub fn check_finite(&self) -> Result<()> {
        for (b, g) in &self.blocks {
            if let Some((i, v)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    block: b.to_string(),
                    index: i,
                    value: *v,
                });
            }
        }
        Ok(())
    }
}

/// Visual inputs of a batch, computed once and shared by all branches.
pub(crate) struct BatchInputs<'a> {
    pub pairs: &'a [&'a CandidatePair],
    pub features: Vec<VisualFeature>,
    caches: Vec<VisualCache>,
    /// Gradient with respect to each pair's `x_i`, summed over branches.
    pub dx: Vec<Vec<f64>>,
}

impl<'a> BatchInputs<'a> {
    pub fn new(model: &JointModel, pairs: &'a [&'a CandidatePair]) -> Result<Self> {
        let mut features = Vec::with_capacity(pairs.len());
        let mut caches = Vec::with_capacity(pairs.len());
        for p in pairs {
            let (f, c) = model.visual_forward(p)?;
            features.push(f);
            caches.push(c);
        }
        let dv = model.visual_params().dim();
        Ok(Self {
            pairs,
            features,
            caches,
            dx: vec![vec![0.0; dv]; pairs.len()],
        })
    }

    /// Pushes the accumulated `dx` through the visual-input networks.
    pub fn backward(&self, model: &JointModel, grads: &mut ModelGrads) -> Result<()> {
        let mut gs = std::mem::take(grads.get_mut(Block::VisualS).expect("block"));
        let mut go = std::mem::take(grads.get_mut(Block::VisualO).expect("block"));
        let mut gr = std::mem::take(grads.get_mut(Block::VisualR).expect("block"));
        for (c, dx) in self.caches.iter().zip(&self.dx) {
            if dx.iter().any(|&v| v != 0.0) {
                model.visual_params().backward_into(c, dx, [&mut gs, &mut go, &mut gr])?;
            }
        }
        *grads.get_mut(Block::VisualS).expect("block") = gs;
        *grads.get_mut(Block::VisualO).expect("block") = go;
        *grads.get_mut(Block::VisualR).expect("block") = gr;
        Ok(())
    }
}

/// Per-branch language embeddings of the whole label universe.
pub(crate) struct UniverseEmbeddings {
    pub w: Vec<Vec<f64>>,
    norms: Vec<f64>,
    caches: Vec<MlpCache>,
}

impl UniverseEmbeddings {
    pub fn new(model: &JointModel, kind: BranchKind) -> Result<Self> {
        let keys = model.universe(kind)?;
        let mut out = Self {
            w: Vec::with_capacity(keys.len()),
            norms: Vec::with_capacity(keys.len()),
            caches: Vec::with_capacity(keys.len()),
        };
        for &k in keys {
            let (w, n, c) = model.language_forward(k, kind)?;
            out.w.push(w);
            out.norms.push(n);
            out.caches.push(c);
        }
        Ok(out)
    }

    /// Back-propagates `dw` (gradients on the unit-norm embeddings) into
    /// `f_w` and, through `q_t`, into the word table.
    pub fn backward(&self, model: &JointModel, kind: BranchKind, dw: &[Vec<f64>], grads: &mut ModelGrads) -> Result<()> {
        let br = model.branch(kind)?;
        let keys = model.universe(kind)?;
        let mut gl = std::mem::take(grads.get_mut(Block::BranchLanguage(kind)).expect("block"));
        let mut gwords = std::mem::take(grads.get_mut(Block::Words).expect("block"));
        let dwords = model.words().dim();
        for (k, d) in dw.iter().enumerate() {
            let w = &self.w[k];
            // d(u/|u|)/du applied to d: (d - w (w.d)) / |u|
            let wd = dot(w, d);
            let du: Vec<f64> = d.iter().zip(w).map(|(di, wi)| (di - wi * wd) / self.norms[k]).collect();
            let dq = br.language.backward_into(&self.caches[k], &du, &mut gl)?;
            scatter_language_grad(keys[k], model.rows(), dwords, kind.mask(), &dq, &mut gwords);
        }
        *grads.get_mut(Block::BranchLanguage(kind)).expect("block") = gl;
        *grads.get_mut(Block::Words).expect("block") = gwords;
        Ok(())
    }
}

pub(crate) fn reborrow<'b>(rng: &'b mut Option<&mut dyn RngCore>) -> Option<&'b mut dyn RngCore> {
    rng.as_mut().map(|r| &mut **r as &mut dyn RngCore)
}

/// Positive key indices of each pair within a sorted universe.
pub(crate) fn label_indices(universe: &[crate::datamodel::Triplet], pair: &CandidatePair, kind: BranchKind) -> Vec<usize> {
    JointModel::pair_labels(pair, kind)
        .into_iter()
        .filter_map(|k| universe.binary_search(&k).ok())
        .collect()
}

/// Adds one branch's loss (mean over pair-label terms) and gradients.
pub(crate) fn branch_loss_into(
    model: &JointModel,
    inputs: &mut BatchInputs<'_>,
    kind: BranchKind,
    mut rng: Option<&mut dyn RngCore>,
    grads: &mut ModelGrads,
) -> Result<f64> {
    let br = model.branch(kind)?;
    let universe = model.universe(kind)?;
    let lang = UniverseEmbeddings::new(model, kind)?;
    let n_terms = (inputs.pairs.len() * universe.len()) as f64;
    if n_terms == 0.0 {
        return Ok(0.0);
    }
    let d = model.dim();
    let mut dw = vec![vec![0.0; d]; universe.len()];
    let mut gv = std::mem::take(grads.get_mut(Block::BranchVisual(kind)).expect("block"));
    let mut loss = 0.0;
    for (i, pair) in inputs.pairs.iter().enumerate() {
        let input = branch_input(kind, &inputs.features[i]);
        let (v, cache) = br.visual.forward(input, reborrow(&mut rng))?;
        let pos = label_indices(universe, pair, kind);
        let mut dv = vec![0.0; d];
        for (k, w) in lang.w.iter().enumerate() {
            let z = dot(w, &v);
            let y = pos.contains(&k);
            loss += if y { softplus(-z) } else { softplus(z) };
            let g = (sigmoid(z) - if y { 1.0 } else { 0.0 }) / n_terms;
            axpy(g, w, &mut dv);
            axpy(g, &v, &mut dw[k]);
        }
        let dx = br.visual.backward_into(&cache, &dv, &mut gv)?;
        if kind.uses_full_visual() {
            crate::numkit::add_assign(&mut inputs.dx[i], &dx);
        }
    }
    *grads.get_mut(Block::BranchVisual(kind)).expect("block") = gv;
    lang.backward(model, kind, &dw, grads)?;
    Ok(loss / n_terms)
}

/// Negated log-likelihood of one branch over `batch`, averaged over
/// (pair, label) terms, with gradients for `f_v^b`, `f_w^b`, the visual-input
/// networks and the word table. Dropout masks come from `rng` when given.
pub fn branch_loss(model: &JointModel, batch: &[&CandidatePair], kind: BranchKind, rng: Option<&mut dyn RngCore>) -> Result<(f64, ModelGrads)> {
    let mut grads = ModelGrads::zeros(model);
    let mut inputs = BatchInputs::new(model, batch)?;
    let loss = branch_loss_into(model, &mut inputs, kind, rng, &mut grads)?;
    inputs.backward(model, &mut grads)?;
    Ok((loss, grads))
}

/// Sum of [`branch_loss`] over the active branches, in canonical order.
pub fn joint_loss(model: &JointModel, batch: &[&CandidatePair], mut rng: Option<&mut dyn RngCore>) -> Result<(f64, ModelGrads)> {
    let mut grads = ModelGrads::zeros(model);
    let mut inputs = BatchInputs::new(model, batch)?;
    let mut loss = 0.0;
    for &kind in &model.config().branches {
        loss += branch_loss_into(model, &mut inputs, kind, reborrow(&mut rng), &mut grads)?;
    }
    inputs.backward(model, &mut grads)?;
    Ok((loss, grads))
}
