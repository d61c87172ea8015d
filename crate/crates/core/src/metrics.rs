//! Recognition, retrieval and temporal-localisation metrics.
//!
//! Every function here is pure and works in `f64`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::video::Proposal;

/// Score below which Soft-NMS drops a detection.
pub const SOFT_NMS_MIN_SCORE: f64 = 1e-3;

/// IoU thresholds `0.3, 0.4, …, 0.7`.
pub fn thumos_iou_set() -> Vec<f64> {
    (0..5).map(|i| 0.3 + 0.1 * i as f64).collect()
}

/// IoU thresholds `0.5, 0.55, …, 0.95`.
pub fn activitynet_iou_set() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// IoU grid `0.5, 0.55, …, 1.0` used for proposal recall.
pub fn thumos_recall_grid() -> Vec<f64> {
    (0..11).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric over zero samples")]
    Empty,
    #[error("k = {k} exceeds the {classes} available classes")]
    KTooLarge { k: usize, classes: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("retrieval needs a square similarity matrix, got {rows}×{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("no ground-truth instances")]
    NoGroundTruth,
}

/// Fraction of rows whose label is among the `k` highest scores. Equal
/// scores rank the lower class id first.
pub fn top_k_accuracy(scores: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64, MetricError> {
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    assert_eq!(scores.len(), labels.len(), "one label per row");
    let mut hits = 0usize;
    for (row, &label) in scores.iter().zip(labels) {
        let classes = row.len();
        if k > classes {
            return Err(MetricError::KTooLarge { k, classes });
        }
        if label >= classes {
            return Err(MetricError::LabelOutOfRange { label, classes });
        }
        let target = row[label];
        let ahead = row
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > target || (s == target && j < label))
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// 1-based rank of the true item for each query.
    pub ranks: Vec<usize>,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub median_rank: usize,
}

impl RetrievalReport {
    pub fn recall_at(&self, k: usize) -> f64 {
        self.ranks.iter().filter(|&&r| r <= k).count() as f64 / self.ranks.len() as f64
    }
}

/// Ranks of the diagonal items in a query × item similarity matrix.
///
/// Items tied with the true one are counted ahead of it, and the median is
/// the lower median for an even count.
pub fn retrieval_ranks(sims: &[Vec<f64>]) -> Result<RetrievalReport, MetricError> {
    let n = sims.len();
    if n == 0 {
        return Err(MetricError::Empty);
    }
    if let Some(row) = sims.iter().find(|r| r.len() != n) {
        return Err(MetricError::NotSquare { rows: n, cols: row.len() });
    }
    let ranks: Vec<usize> = sims
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let truth = row[i];
            1 + row.iter().enumerate().filter(|&(j, &s)| j != i && s >= truth).count()
        })
        .collect();
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    let median_rank = sorted[(n - 1) / 2];
    let mut report = RetrievalReport {
        ranks,
        recall_at_1: 0.0,
        recall_at_5: 0.0,
        recall_at_10: 0.0,
        median_rank,
    };
    report.recall_at_1 = report.recall_at(1);
    report.recall_at_5 = report.recall_at(5);
    report.recall_at_10 = report.recall_at(10);
    Ok(report)
}

/// Temporal intersection over union; 0 for disjoint intervals.
pub fn interval_iou(a: &Proposal, b: &Proposal) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = (a.end - a.start) + (b.end - b.start) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video_id: String,
    pub proposal: Proposal,
    pub class: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub video_id: String,
    pub class: usize,
    pub start: f64,
    pub end: f64,
}

impl GroundTruthInstance {
    pub fn interval(&self) -> Proposal {
        Proposal::new(self.start, self.end, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SoftNmsDecay {
    /// `s ← s · (1 − IoU)` when IoU exceeds the threshold.
    Linear,
}

/// Soft-NMS applied independently within each (video, class) group.
///
/// Output keeps selection order inside a group; groups are ordered by
/// video id then class.
pub fn soft_nms(detections: &[Detection], iou_threshold: f64, decay: SoftNmsDecay) -> Vec<Detection> {
    let mut groups: BTreeMap<(&str, usize), Vec<usize>> = BTreeMap::new();
    for (i, d) in detections.iter().enumerate() {
        groups.entry((d.video_id.as_str(), d.class)).or_default().push(i);
    }
    let mut out = Vec::with_capacity(detections.len());
    for (_, idx) in groups {
        let mut pool: Vec<(usize, Detection)> = idx.into_iter().map(|i| (i, detections[i].clone())).collect();
        while !pool.is_empty() {
            let best = (0..pool.len())
                .min_by(|&a, &b| {
                    let (ia, da) = &pool[a];
                    let (ib, db) = &pool[b];
                    db.confidence
                        .total_cmp(&da.confidence)
                        .then(da.proposal.start.total_cmp(&db.proposal.start))
                        .then(ia.cmp(ib))
                })
                .unwrap();
            let (_, chosen) = pool.swap_remove(best);
            pool.sort_by_key(|(i, _)| *i);
            for (_, d) in pool.iter_mut() {
                let iou = interval_iou(&chosen.proposal, &d.proposal);
                if iou > iou_threshold {
                    match decay {
                        SoftNmsDecay::Linear => d.confidence *= 1.0 - iou,
                    }
                }
            }
            pool.retain(|(_, d)| d.confidence >= SOFT_NMS_MIN_SCORE);
            out.push(chosen);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    /// mAP at each threshold (mean over classes with ground truth).
    pub map: Vec<f64>,
    /// `per_class[t][c]` for classes with ground truth, keyed by class.
    pub per_class: Vec<BTreeMap<usize, f64>>,
    /// Mean of `map` over thresholds.
    pub average: f64,
}

/// All-point interpolated AP from a ranked true/false-positive list.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    let mut mprec = vec![0.0];
    mprec.extend(&precision);
    mprec.push(0.0);
    let mut mrec = vec![0.0];
    mrec.extend(&recall);
    mrec.push(1.0);
    for i in (0..mprec.len() - 1).rev() {
        mprec[i] = mprec[i].max(mprec[i + 1]);
    }
    (0..mrec.len() - 1)
        .filter(|&i| mrec[i + 1] != mrec[i])
        .map(|i| (mrec[i + 1] - mrec[i]) * mprec[i + 1])
        .sum()
}

/// Greedy one-to-one matching of confidence-ranked detections against
/// ground truth of one class; returns the TP flag of each ranked detection.
fn match_ranked(dets: &[&Detection], gts: &[&GroundTruthInstance], threshold: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in gts.iter().enumerate() {
                if used[j] || gt.video_id != d.video_id {
                    continue;
                }
                let iou = interval_iou(&d.proposal, &gt.interval());
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, iou)) if iou >= threshold => {
                    used[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Mean average precision over classes, at each IoU threshold.
///
/// Classes without ground truth are excluded from the class mean.
pub fn detection_map(
    detections: &[Detection],
    ground_truth: &[GroundTruthInstance],
    thresholds: &[f64],
) -> Result<MapReport, MetricError> {
    if ground_truth.is_empty() {
        return Err(MetricError::NoGroundTruth);
    }
    let classes: BTreeSet<usize> = ground_truth.iter().map(|g| g.class).collect();
    let mut map = Vec::with_capacity(thresholds.len());
    let mut per_class = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let mut aps = BTreeMap::new();
        for &c in &classes {
            let gts: Vec<&GroundTruthInstance> = ground_truth.iter().filter(|g| g.class == c).collect();
            let mut dets: Vec<&Detection> = detections.iter().filter(|d| d.class == c).collect();
            dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
            let tp = match_ranked(&dets, &gts, thr);
            aps.insert(c, average_precision(&tp, gts.len()));
        }
        map.push(aps.values().sum::<f64>() / aps.len() as f64);
        per_class.push(aps);
    }
    let average = if map.is_empty() { 0.0 } else { map.iter().sum::<f64>() / map.len() as f64 };
    Ok(MapReport { thresholds: thresholds.to_vec(), map, per_class, average })
}

/// Proposals of one video, sorted by score descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoProposals {
    pub video_id: String,
    pub proposals: Vec<Proposal>,
}

/// Recall of ground truth by the top-`an` proposals per video, averaged over
/// an IoU grid. Matching is greedy and one-to-one in score order.
pub fn average_recall_at_an(
    proposals: &[VideoProposals],
    ground_truth: &[GroundTruthInstance],
    an: usize,
    iou_grid: &[f64],
) -> Result<f64, MetricError> {
    if ground_truth.is_empty() {
        return Err(MetricError::NoGroundTruth);
    }
    if iou_grid.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut total = 0.0;
    for &thr in iou_grid {
        let mut matched = 0usize;
        for vp in proposals {
            let gts: Vec<Proposal> = ground_truth
                .iter()
                .filter(|g| g.video_id == vp.video_id)
                .map(|g| g.interval())
                .collect();
            let mut used = vec![false; gts.len()];
            for p in vp.proposals.iter().take(an) {
                let mut best: Option<(usize, f64)> = None;
                for (j, gt) in gts.iter().enumerate() {
                    if used[j] {
                        continue;
                    }
                    let iou = interval_iou(p, gt);
                    if best.is_none_or(|(_, b)| iou > b) {
                        best = Some((j, iou));
                    }
                }
                if let Some((j, iou)) = best {
                    if iou >= thr {
                        used[j] = true;
                        matched += 1;
                    }
                }
            }
        }
        total += matched as f64 / ground_truth.len() as f64;
    }
    Ok(total / iou_grid.len() as f64)
}

/// A proposal with its per-class scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredProposal {
    pub video_id: String,
    pub proposal: Proposal,
    pub class_scores: Vec<f64>,
}

/// TOP1 over proposals that overlap some ground truth; each is labelled by
/// its highest-IoU instance. `None` when no proposal overlaps anything.
pub fn proposal_classification_accuracy(
    proposals: &[ScoredProposal],
    ground_truth: &[GroundTruthInstance],
) -> Option<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for sp in proposals {
        let mut best: Option<(usize, f64)> = None;
        for gt in ground_truth.iter().filter(|g| g.video_id == sp.video_id) {
            let iou = interval_iou(&sp.proposal, &gt.interval());
            if iou > 0.0 && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gt.class, iou));
            }
        }
        if let Some((class, _)) = best {
            scores.push(sp.class_scores.clone());
            labels.push(class);
        }
    }
    if labels.is_empty() {
        return None;
    }
    top_k_accuracy(&scores, &labels, 1).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: f64, e: f64) -> Proposal {
        Proposal::new(s, e, 1.0)
    }

    fn det(v: &str, s: f64, e: f64, c: usize, conf: f64) -> Detection {
        Detection { video_id: v.into(), proposal: p(s, e), class: c, confidence: conf }
    }

    fn gt(v: &str, s: f64, e: f64, c: usize) -> GroundTruthInstance {
        GroundTruthInstance { video_id: v.into(), class: c, start: s, end: e }
    }

    #[test]
    fn iou_cases() {
        assert_eq!(interval_iou(&p(0.0, 10.0), &p(0.0, 10.0)), 1.0);
        assert_eq!(interval_iou(&p(0.0, 1.0), &p(2.0, 3.0)), 0.0);
        assert!((interval_iou(&p(0.0, 10.0), &p(5.0, 15.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identity_scores_top1() {
        let s: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| (i == j) as u8 as f64).collect()).collect();
        assert_eq!(top_k_accuracy(&s, &[0, 1, 2, 3], 1).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&s, &[1, 2, 3, 0], 4).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&s[..1], &[0], 5).unwrap_err(), MetricError::KTooLarge { k: 5, classes: 4 });
        assert_eq!(top_k_accuracy(&[], &[], 1).unwrap_err(), MetricError::Empty);
    }

    #[test]
    fn ties_rank_lower_class_first() {
        let s = vec![vec![0.5, 0.5]];
        assert_eq!(top_k_accuracy(&s, &[0], 1).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&s, &[1], 1).unwrap(), 0.0);
    }

    #[test]
    fn retrieval_identity_and_reversed() {
        let id: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| (i == j) as u8 as f64).collect()).collect();
        let r = retrieval_ranks(&id).unwrap();
        assert_eq!((r.recall_at_1, r.median_rank), (1.0, 1));
        let rev: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| if i == j { -1.0 } else { 0.0 }).collect()).collect();
        let r = retrieval_ranks(&rev).unwrap();
        assert_eq!(r.recall_at_1, 0.0);
        assert_eq!(r.median_rank, 3);
        assert!(retrieval_ranks(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn retrieval_ties_take_worst_rank() {
        let r = retrieval_ranks(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(r.ranks, vec![2, 1]);
        assert_eq!(r.median_rank, 1);
    }

    #[test]
    fn soft_nms_cases() {
        let one = vec![det("v", 0.0, 1.0, 0, 0.7)];
        assert_eq!(soft_nms(&one, 0.5, SoftNmsDecay::Linear), one);
        let disjoint = vec![det("v", 0.0, 1.0, 0, 0.7), det("v", 2.0, 3.0, 0, 0.6)];
        assert_eq!(soft_nms(&disjoint, 0.5, SoftNmsDecay::Linear), disjoint);
        // [0,8] vs [2,10]: intersection 6, union 10, IoU 0.6
        let pair = vec![det("v", 0.0, 8.0, 0, 0.9), det("v", 2.0, 10.0, 0, 0.8)];
        let out = soft_nms(&pair, 0.5, SoftNmsDecay::Linear);
        assert_eq!(out[0].confidence, 0.9);
        assert!((out[1].confidence - 0.8 * 0.4).abs() < 1e-12);
    }

    #[test]
    fn soft_nms_drops_tiny_scores() {
        let pair = vec![det("v", 0.0, 10.0, 0, 0.9), det("v", 0.0, 10.0, 0, 0.8)];
        let out = soft_nms(&pair, 0.5, SoftNmsDecay::Linear);
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn perfect_and_empty_detections() {
        let gts = vec![gt("a", 0.0, 5.0, 0), gt("a", 10.0, 12.0, 1), gt("b", 3.0, 4.0, 0)];
        let dets: Vec<Detection> = gts.iter().map(|g| det(&g.video_id, g.start, g.end, g.class, 0.9)).collect();
        let r = detection_map(&dets, &gts, &thumos_iou_set()).unwrap();
        assert!(r.map.iter().all(|&m| m == 1.0));
        assert_eq!(r.average, 1.0);
        let r = detection_map(&[], &gts, &[0.5]).unwrap();
        assert_eq!(r.map, vec![0.0]);
    }

    #[test]
    fn hand_case_three_detections_two_gt() {
        // GT [0,10] and [20,30]; detections ranked 0.9 hit, 0.8 miss (dup), 0.7 hit.
        let gts = vec![gt("v", 0.0, 10.0, 0), gt("v", 20.0, 30.0, 0)];
        let dets = vec![
            det("v", 0.0, 10.0, 0, 0.9),
            det("v", 1.0, 10.0, 0, 0.8),
            det("v", 20.0, 29.0, 0, 0.7),
        ];
        let r = detection_map(&dets, &gts, &[0.5]).unwrap();
        // precision [1, 1/2, 2/3], recall [1/2, 1/2, 1] → 0.5·1 + 0.5·2/3
        assert!((r.map[0] - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn class_without_gt_is_excluded() {
        let gts = vec![gt("v", 0.0, 1.0, 0)];
        let dets = vec![det("v", 0.0, 1.0, 0, 0.9), det("v", 0.0, 1.0, 5, 0.9)];
        let r = detection_map(&dets, &gts, &[0.5]).unwrap();
        assert_eq!(r.map, vec![1.0]);
        assert_eq!(r.per_class[0].len(), 1);
    }

    #[test]
    fn recall_identity_and_empty() {
        let gts = vec![gt("v", 0.0, 1.0, 0), gt("v", 2.0, 5.0, 1)];
        let props = vec![VideoProposals { video_id: "v".into(), proposals: vec![p(0.0, 1.0), p(2.0, 5.0)] }];
        assert_eq!(average_recall_at_an(&props, &gts, 2, &thumos_recall_grid()).unwrap(), 1.0);
        let none = vec![VideoProposals { video_id: "v".into(), proposals: vec![] }];
        assert_eq!(average_recall_at_an(&none, &gts, 2, &thumos_recall_grid()).unwrap(), 0.0);
    }

    #[test]
    fn proposal_accuracy_cases() {
        let gts = vec![gt("v", 0.0, 10.0, 1), gt("v", 20.0, 30.0, 0)];
        let disjoint = vec![ScoredProposal { video_id: "v".into(), proposal: p(12.0, 18.0), class_scores: vec![1.0, 0.0] }];
        assert_eq!(proposal_classification_accuracy(&disjoint, &gts), None);
        let mixed = vec![
            ScoredProposal { video_id: "v".into(), proposal: p(0.0, 10.0), class_scores: vec![0.1, 0.9] },
            ScoredProposal { video_id: "v".into(), proposal: p(5.0, 25.0), class_scores: vec![0.9, 0.1] },
            ScoredProposal { video_id: "v".into(), proposal: p(12.0, 18.0), class_scores: vec![0.9, 0.1] },
        ];
        // proposal 2 overlaps both GT equally (5 frames each): first-listed GT (class 1) wins the tie
        assert_eq!(proposal_classification_accuracy(&mixed, &gts), Some(0.5));
    }
}
