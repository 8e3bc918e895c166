//! Retrieval evaluation: rank candidate pairs per triplet query, match them
//! to ground truth with a dual IoU test, and compute AP and mAP.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::datamodel::{BoundingBox, CandidatePair, Dataset, Triplet, Vocabularies};
use crate::embed::{JointModel, PairEmbedding, QueryEmbedding};
use crate::error::{Error, Result};

/// Intersection over union with areas `(x_max - x_min)(y_max - y_min)`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub pair_id: u64,
    pub image: String,
    pub score: f64,
    /// Ranking key; `score` may round to 0 or 1 where this does not.
    pub log_score: f64,
    pub sub_box: BoundingBox,
    pub obj_box: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image: String,
    pub sub_box: BoundingBox,
    pub obj_box: BoundingBox,
}

/// Ground-truth pairs of `query` in `dataset`.
pub fn ground_truth(dataset: &Dataset, query: Triplet) -> Vec<GroundTruth> {
    dataset
        .pairs()
        .iter()
        .filter(|p| p.has_label(query))
        .map(|p| GroundTruth {
            image: p.image.clone(),
            sub_box: p.sub_box,
            obj_box: p.obj_box,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPolicy {
    pub threshold: f64,
}

impl Default for MatchPolicy {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

impl MatchPolicy {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::Config(format!("IoU threshold {threshold} outside (0,1]")));
        }
        Ok(Self { threshold })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct APResult {
    pub query: Triplet,
    pub ap: f64,
    pub npos: usize,
    pub ndet: usize,
}

impl APResult {
    /// Queries without ground truth do not enter the mean.
    pub fn excluded(&self) -> bool {
        self.npos == 0
    }
}

/// Scores every pair for `query` and sorts by descending score, ties by pair id.
pub fn rank_candidates(model: &JointModel, query: &QueryEmbedding, pairs: &[CandidatePair], embeddings: &[PairEmbedding]) -> Result<Vec<Detection>> {
    if pairs.len() != embeddings.len() {
        return Err(Error::Shape {
            context: "rank_candidates",
            expected: pairs.len(),
            got: embeddings.len(),
        });
    }
    let mut out = Vec::with_capacity(pairs.len());
    for (p, e) in pairs.iter().zip(embeddings) {
        let log_score = model.log_score(query, e)?;
        out.push(Detection {
            pair_id: p.id,
            image: p.image.clone(),
            score: log_score.exp(),
            log_score,
            sub_box: p.sub_box,
            obj_box: p.obj_box,
        });
    }
    sort_detections(&mut out);
    Ok(out)
}

pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.log_score.total_cmp(&a.log_score).then(a.pair_id.cmp(&b.pair_id)));
}

/// True-positive flags in detection order under greedy one-to-one matching:
/// each detection takes the unmatched ground truth of its image with the
/// largest `min(IoU_sub, IoU_obj)` among those passing both thresholds.
pub fn match_detections(detections: &[Detection], gt: &[GroundTruth], policy: &MatchPolicy) -> Vec<bool> {
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, g) in gt.iter().enumerate() {
        by_image.entry(g.image.as_str()).or_default().push(j);
    }
    let mut used = vec![false; gt.len()];
    let mut out = Vec::with_capacity(detections.len());
    for d in detections {
        let mut best: Option<(f64, usize)> = None;
        for &j in by_image.get(d.image.as_str()).into_iter().flatten() {
            if used[j] {
                continue;
            }
            let (a, b) = (iou(&d.sub_box, &gt[j].sub_box), iou(&d.obj_box, &gt[j].obj_box));
            if a >= policy.threshold && b >= policy.threshold {
                let m = a.min(b);
                if best.is_none_or(|(bm, _)| m > bm) {
                    best = Some((m, j));
                }
            }
        }
        match best {
            Some((_, j)) => {
                debug_assert!(!used[j]);
                used[j] = true;
                out.push(true);
            }
            None => out.push(false),
        }
    }
    out
}

/// Sum of precision at each true-positive rank, divided by the number of
/// ground-truth pairs. No interpolation.
pub fn ap_from_flags(flags: &[bool], npos: usize) -> f64 {
    if npos == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut acc = 0.0;
    for (r, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
            acc += tp as f64 / (r + 1) as f64;
        }
    }
    acc / npos as f64
}

/// `detections` must already be in ranked order.
pub fn average_precision(query: Triplet, detections: &[Detection], gt: &[GroundTruth], policy: &MatchPolicy) -> APResult {
    let flags = match_detections(detections, gt, policy);
    APResult {
        query,
        ap: ap_from_flags(&flags, gt.len()),
        npos: gt.len(),
        ndet: detections.len(),
    }
}

/// Unweighted mean AP over queries with ground truth.
pub fn mean_ap(results: &[APResult]) -> Result<f64> {
    let kept: Vec<f64> = results.iter().filter(|r| !r.excluded()).map(|r| r.ap).collect();
    if kept.is_empty() {
        return Err(Error::AllExcluded);
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

pub fn results_text(results: &[APResult], vocab: &Vocabularies) -> Result<String> {
    let mut out = String::new();
    for r in results {
        let (s, p, o) = vocab.names(r.query);
        let tok = crate::datamodel::to_file_token;
        writeln!(out, "query {} {} {} ap {} npos {} ndet {}", tok(s), tok(p), tok(o), r.ap, r.npos, r.ndet).expect("string write");
    }
    writeln!(out, "map {}", mean_ap(results)?).expect("string write");
    Ok(out)
}

pub fn write_results(path: &Path, results: &[APResult], vocab: &Vocabularies) -> Result<()> {
    crate::datamodel::write_text(path, &results_text(results, vocab)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    fn det(id: u64, image: &str, score: f64, b: BoundingBox) -> Detection {
        Detection {
            pair_id: id,
            image: image.into(),
            score,
            log_score: score.ln(),
            sub_box: b,
            obj_box: b,
        }
    }

    fn gt(image: &str, b: BoundingBox) -> GroundTruth {
        GroundTruth {
            image: image.into(),
            sub_box: b,
            obj_box: b,
        }
    }

    #[test]
    fn iou_cases() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert_eq!(iou(&a, &bx(10.0, 0.0, 20.0, 10.0)), 0.0);
        assert!((iou(&a, &bx(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_ranking_scores_one() {
        let b = bx(0.0, 0.0, 1.0, 1.0);
        let dets: Vec<Detection> = (0..5).map(|i| det(i, &format!("i{i}"), 0.9 - 0.1 * i as f64, b)).collect();
        let g: Vec<GroundTruth> = (0..3).map(|i| gt(&format!("i{i}"), b)).collect();
        let r = average_precision(Triplet::new(0, 0, 0), &dets, &g, &MatchPolicy::default());
        assert_eq!(r.ap, 1.0);
        assert_eq!((r.npos, r.ndet), (3, 5));
    }

    #[test]
    fn tp_fp_tp() {
        let b = bx(0.0, 0.0, 1.0, 1.0);
        let dets = vec![det(0, "a", 0.9, b), det(1, "x", 0.8, b), det(2, "c", 0.7, b)];
        let g = vec![gt("a", b), gt("c", b)];
        let r = average_precision(Triplet::new(0, 0, 0), &dets, &g, &MatchPolicy::default());
        assert!((r.ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn nothing_matched() {
        let b = bx(0.0, 0.0, 1.0, 1.0);
        let r = average_precision(Triplet::new(0, 0, 0), &[det(0, "x", 0.5, b)], &[gt("a", b)], &MatchPolicy::default());
        assert_eq!(r.ap, 0.0);
        assert!(!r.excluded());
    }

    #[test]
    fn duplicates_count_once() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let near = bx(0.5, 0.0, 10.5, 10.0);
        let dets = vec![det(0, "a", 0.9, b), det(1, "a", 0.8, near)];
        let flags = match_detections(&dets, &[gt("a", b)], &MatchPolicy::default());
        assert_eq!(flags, vec![true, false]);
    }

    #[test]
    fn both_boxes_must_overlap() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let mut d = det(0, "a", 0.9, b);
        d.obj_box = bx(5.0, 0.0, 15.0, 10.0);
        assert_eq!(match_detections(&[d.clone()], &[gt("a", b)], &MatchPolicy::default()), vec![false]);
        assert_eq!(match_detections(&[d], &[gt("a", b)], &MatchPolicy::new(0.3).unwrap()), vec![true]);
    }

    #[test]
    fn greedy_takes_best_overlap() {
        let g = vec![gt("a", bx(0.0, 0.0, 10.0, 10.0)), gt("a", bx(1.0, 0.0, 11.0, 10.0))];
        let dets = vec![det(0, "a", 0.9, bx(1.0, 0.0, 11.0, 10.0)), det(1, "a", 0.8, bx(0.0, 0.0, 10.0, 10.0))];
        assert_eq!(match_detections(&dets, &g, &MatchPolicy::default()), vec![true, true]);
    }

    #[test]
    fn mean_ap_rules() {
        let r = |ap, npos| APResult {
            query: Triplet::new(0, 0, 0),
            ap,
            npos,
            ndet: 1,
        };
        assert_eq!(mean_ap(&[r(0.25, 2)]).unwrap(), 0.25);
        assert_eq!(mean_ap(&[r(1.0, 2), r(0.0, 1), r(0.0, 0)]).unwrap(), 0.5);
        assert!(matches!(mean_ap(&[r(0.0, 0)]), Err(Error::AllExcluded)));
        assert!(MatchPolicy::new(0.0).is_err());
        assert!(MatchPolicy::new(1.0).is_ok());
    }

    #[test]
    fn ties_break_by_pair_id() {
        let b = bx(0.0, 0.0, 1.0, 1.0);
        let mut d = vec![det(3, "a", 0.5, b), det(1, "a", 0.5, b), det(2, "a", 0.5, b)];
        sort_detections(&mut d);
        assert_eq!(d.iter().map(|x| x.pair_id).collect::<Vec<_>>(), vec![1, 2, 3]);
    }
}
