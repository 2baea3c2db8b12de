//! Open-world detection metrics: mAP@IoU, absolute open-set error (A-OSE)
//! and wilderness impact (WI).
//!
//! Detections are ranked by descending score, then ascending image id, then
//! input order. Greedy matching assigns each detection to the unmatched
//! ground truth with the highest IoU at or above the threshold; equal IoU
//! goes to the lower ground-truth index.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::openworld::{iou, BoundingBox};
use crate::topology::Label;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("class set is empty")]
    EmptyClassSet,
    #[error("no class in the set has ground truth; mAP undefined")]
    NoGroundTruth,
    #[error("no known-class ground truth; WI undefined")]
    NoKnownGroundTruth,
    #[error("known-class recall never reaches {0}; WI undefined")]
    RecallUnreachable(f64),
    #[error("open-world precision is zero; WI undefined")]
    ZeroPrecision,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub label: Label,
    pub score: f64,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub image_id: u64,
    pub label: Label,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    /// Area under the monotone precision envelope.
    #[default]
    AllPoint,
    /// Mean of the envelope sampled at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    pub iou_thresh: f64,
    pub aose_score_thresh: f64,
    pub wi_recall: f64,
    pub interpolation: ApInterpolation,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            aose_score_thresh: 0.05,
            wi_recall: 0.8,
            interpolation: ApInterpolation::AllPoint,
        }
    }
}

/// One evaluation time point. Undefined values are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub wi: Option<f64>,
    pub a_ose: usize,
    pub map_prev: Option<f64>,
    pub map_curr: Option<f64>,
    pub map_both: Option<f64>,
}

/// Indices of `dets` in ranking order.
fn rank<'a>(dets: impl IntoIterator<Item = (usize, &'a DetectionRecord)>) -> Vec<usize> {
    let mut items: Vec<(usize, &DetectionRecord)> = dets.into_iter().collect();
    items.sort_by(|(ia, a), (ib, b)| {
        b.score
            .total_cmp(&a.score)
            .then(a.image_id.cmp(&b.image_id))
            .then(ia.cmp(ib))
    });
    items.into_iter().map(|(i, _)| i).collect()
}

/// Ground-truth pool for greedy matching, indexed by image.
struct GtPool<'a> {
    by_image: HashMap<u64, Vec<usize>>,
    gts: &'a [GroundTruthRecord],
    matched: Vec<bool>,
}

impl<'a> GtPool<'a> {
    fn new(gts: &'a [GroundTruthRecord], keep: impl Fn(&GroundTruthRecord) -> bool) -> Self {
        let mut by_image: HashMap<u64, Vec<usize>> = HashMap::new();
        for (i, g) in gts.iter().enumerate() {
            if keep(g) {
                by_image.entry(g.image_id).or_default().push(i);
            }
        }
        Self {
            by_image,
            gts,
            matched: vec![false; gts.len()],
        }
    }

    fn len(&self) -> usize {
        self.by_image.values().map(Vec::len).sum()
    }

    /// Best unmatched ground truth for `det` satisfying `accept`, if any.
    fn best(
        &self,
        det: &DetectionRecord,
        iou_thresh: f64,
        accept: impl Fn(&GroundTruthRecord) -> bool,
    ) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for &gi in self.by_image.get(&det.image_id)? {
            let g = &self.gts[gi];
            if self.matched[gi] || !accept(g) {
                continue;
            }
            let overlap = iou(det.bbox, g.bbox);
            if overlap >= iou_thresh && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((gi, overlap));
            }
        }
        best.map(|(gi, _)| gi)
    }

    fn take(&mut self, det: &DetectionRecord, iou_thresh: f64, accept: impl Fn(&GroundTruthRecord) -> bool) -> bool {
        match self.best(det, iou_thresh, accept) {
            Some(gi) => {
                self.matched[gi] = true;
                true
            }
            None => false,
        }
    }
}

/// Average precision for one class; `None` when the class has no ground truth.
pub fn average_precision(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    class: Label,
    iou_thresh: f64,
    interpolation: ApInterpolation,
) -> Option<f64> {
    let mut pool = GtPool::new(gts, |g| g.label == class);
    let n_gt = pool.len();
    if n_gt == 0 {
        return None;
    }
    let order = rank(dets.iter().enumerate().filter(|(_, d)| d.label == class));
    let tp: Vec<bool> = order
        .iter()
        .map(|&i| pool.take(&dets[i], iou_thresh, |_| true))
        .collect();
    Some(ap_from_flags(&tp, n_gt, interpolation))
}

fn ap_from_flags(tp: &[bool], n_gt: usize, interpolation: ApInterpolation) -> f64 {
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let (mut hits, mut seen) = (0usize, 0usize);
    for &t in tp {
        seen += 1;
        if t {
            hits += 1;
        }
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / seen as f64);
    }
    match interpolation {
        ApInterpolation::AllPoint => {
            let mut envelope = precision.clone();
            for i in (0..envelope.len().saturating_sub(1)).rev() {
                envelope[i] = envelope[i].max(envelope[i + 1]);
            }
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for (r, p) in recall.iter().zip(&envelope) {
                if *r > prev_recall {
                    ap += (r - prev_recall) * p;
                    prev_recall = *r;
                }
            }
            ap
        }
        ApInterpolation::ElevenPoint => {
            (0..=10)
                .map(|k| {
                    let t = k as f64 / 10.0;
                    recall
                        .iter()
                        .zip(&precision)
                        .filter(|(r, _)| **r >= t)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// Mean AP over `classes`, skipping classes without ground truth.
pub fn compute_map(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    classes: &[Label],
    iou_thresh: f64,
    interpolation: ApInterpolation,
) -> Result<f64, MetricsError> {
    if classes.is_empty() {
        return Err(MetricsError::EmptyClassSet);
    }
    let aps: Vec<f64> = classes
        .iter()
        .filter_map(|&c| average_precision(dets, gts, c, iou_thresh, interpolation))
        .collect();
    if aps.is_empty() {
        return Err(MetricsError::NoGroundTruth);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

fn is_known(label: Label, known: &BTreeSet<usize>) -> bool {
    matches!(label, Label::Class(c) if known.contains(&c))
}

/// Number of `unknown` ground-truth instances claimed by a known-class
/// detection scoring at least `score_thresh`. Each instance counts once.
pub fn compute_aose(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    known: &BTreeSet<usize>,
    iou_thresh: f64,
    score_thresh: f64,
) -> usize {
    let mut pool = GtPool::new(gts, |g| g.label == Label::Unknown);
    let order = rank(
        dets.iter()
            .enumerate()
            .filter(|(_, d)| is_known(d.label, known) && d.score >= score_thresh),
    );
    order
        .into_iter()
        .filter(|&i| pool.take(&dets[i], iou_thresh, |_| true))
        .count()
}

/// Wilderness impact `P_K / P_{K∪U} − 1`, micro-averaged over known classes.
///
/// Known-class detections are matched greedily to known ground truth of the
/// same class. An unmatched detection overlapping an `unknown` instance is an
/// open-set error: it is left out of `P_K` and counted as a false positive in
/// `P_{K∪U}`. Both precisions are read at the highest score threshold whose
/// known recall reaches `recall_level`.
pub fn compute_wi(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    known: &BTreeSet<usize>,
    recall_level: f64,
    iou_thresh: f64,
) -> Result<f64, MetricsError> {
    let mut known_pool = GtPool::new(gts, |g| is_known(g.label, known));
    let unknown_pool = GtPool::new(gts, |g| g.label == Label::Unknown);
    let n_known = known_pool.len();
    if n_known == 0 {
        return Err(MetricsError::NoKnownGroundTruth);
    }
    let order = rank(dets.iter().enumerate().filter(|(_, d)| is_known(d.label, known)));
    let (mut tp, mut fp, mut ose) = (0usize, 0usize, 0usize);
    for (pos, &i) in order.iter().enumerate() {
        let det = &dets[i];
        if known_pool.take(det, iou_thresh, |g| g.label == det.label) {
            tp += 1;
        } else if unknown_pool.best(det, iou_thresh, |_| true).is_some() {
            ose += 1;
        } else {
            fp += 1;
        }
        let group_ends = order
            .get(pos + 1)
            .is_none_or(|&j| dets[j].score != det.score);
        if group_ends && tp as f64 / n_known as f64 >= recall_level {
            if tp == 0 {
                return Err(MetricsError::ZeroPrecision);
            }
            let p_known = tp as f64 / (tp + fp) as f64;
            let p_open = tp as f64 / (tp + fp + ose) as f64;
            return Ok(p_known / p_open - 1.0);
        }
    }
    Err(MetricsError::RecallUnreachable(recall_level))
}

/// Splits mAP into previously-known, current and combined class sets and
/// adds A-OSE and WI over the combined known set.
pub fn evaluate_records(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    prev: &[usize],
    curr: &[usize],
    options: &MetricOptions,
) -> MetricsRecord {
    let labels = |ids: &[usize]| ids.iter().map(|&c| Label::Class(c)).collect::<Vec<_>>();
    let both: Vec<usize> = prev.iter().chain(curr).copied().collect();
    let map = |ids: &[usize]| {
        compute_map(dets, gts, &labels(ids), options.iou_thresh, options.interpolation).ok()
    };
    let known: BTreeSet<usize> = both.iter().copied().collect();
    MetricsRecord {
        wi: compute_wi(dets, gts, &known, options.wi_recall, options.iou_thresh).ok(),
        a_ose: compute_aose(dets, gts, &known, options.iou_thresh, options.aose_score_thresh),
        map_prev: map(prev),
        map_curr: map(curr),
        map_both: map(&both),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64) -> BoundingBox {
        BoundingBox::new(x, 0.0, 2.0, 2.0).unwrap()
    }

    fn det(image_id: u64, label: Label, score: f64, x: f64) -> DetectionRecord {
        DetectionRecord {
            image_id,
            label,
            score,
            bbox: bx(x),
        }
    }

    fn gt(image_id: u64, label: Label, x: f64) -> GroundTruthRecord {
        GroundTruthRecord {
            image_id,
            label,
            bbox: bx(x),
        }
    }

    const A: Label = Label::Class(0);

    #[test]
    fn single_good_match_gives_unit_ap() {
        // Shift 0.5 on a 2-wide box: IoU = 1.5*2 / (8 - 3) = 0.6.
        let gts = [gt(0, A, 0.0)];
        let dets = [det(0, A, 0.9, 0.5)];
        assert!((iou(bx(0.0), bx(0.5)) - 0.6).abs() < 1e-12);
        assert_eq!(compute_map(&dets, &gts, &[A], 0.5, ApInterpolation::AllPoint), Ok(1.0));
    }

    #[test]
    fn higher_scored_false_positive_halves_ap() {
        let gts = [gt(0, A, 0.0)];
        let dets = [det(0, A, 0.9, 50.0), det(0, A, 0.5, 0.0)];
        assert_eq!(compute_map(&dets, &gts, &[A], 0.5, ApInterpolation::AllPoint), Ok(0.5));
    }

    #[test]
    fn duplicate_detection_is_a_false_positive() {
        let gts = [gt(0, A, 0.0), gt(1, A, 0.0)];
        let dets = [det(0, A, 0.9, 0.0), det(0, A, 0.8, 0.0), det(1, A, 0.7, 0.0)];
        // TP FP TP: recall 0.5 @ p=1, recall 1 @ p=2/3.
        let ap = compute_map(&dets, &gts, &[A], 0.5, ApInterpolation::AllPoint).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn map_skips_classes_without_ground_truth() {
        let gts = [gt(0, A, 0.0)];
        let dets = [det(0, A, 0.9, 0.0)];
        let b = Label::Class(1);
        assert_eq!(compute_map(&dets, &gts, &[A, b], 0.5, ApInterpolation::AllPoint), Ok(1.0));
        assert_eq!(
            compute_map(&dets, &gts, &[b], 0.5, ApInterpolation::AllPoint),
            Err(MetricsError::NoGroundTruth)
        );
        assert_eq!(compute_map(&[], &gts, &[A], 0.5, ApInterpolation::AllPoint), Ok(0.0));
    }

    #[test]
    fn eleven_point_on_perfect_ranking() {
        let gts = [gt(0, A, 0.0)];
        let dets = [det(0, A, 0.9, 0.0)];
        assert_eq!(compute_map(&dets, &gts, &[A], 0.5, ApInterpolation::ElevenPoint), Ok(1.0));
        let dets = [det(0, A, 0.9, 50.0), det(0, A, 0.5, 0.0)];
        let ap = compute_map(&dets, &gts, &[A], 0.5, ApInterpolation::ElevenPoint).unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn aose_counts_known_claims_on_unknowns_once() {
        let known: BTreeSet<usize> = [0].into();
        let gts = [
            gt(0, Label::Unknown, 0.0),
            gt(0, Label::Unknown, 10.0),
            gt(1, Label::Unknown, 0.0),
        ];
        let dets = [
            det(0, A, 0.9, 0.0),
            det(0, A, 0.8, 0.0),
            det(1, A, 0.7, 0.0),
            det(0, Label::Unknown, 0.9, 10.0),
        ];
        assert_eq!(compute_aose(&dets, &gts, &known, 0.5, 0.05), 2);
        assert_eq!(compute_aose(&dets, &[], &known, 0.5, 0.05), 0);
        let low = [det(0, A, 0.01, 0.0)];
        assert_eq!(compute_aose(&low, &gts, &known, 0.5, 0.05), 0);
    }

    #[test]
    fn wi_is_zero_without_unknowns_and_undefined_when_recall_short() {
        let known: BTreeSet<usize> = [0].into();
        let gts = [gt(0, A, 0.0), gt(1, A, 0.0)];
        let dets = [det(0, A, 0.9, 0.0), det(0, A, 0.8, 40.0), det(1, A, 0.7, 0.0)];
        assert_eq!(compute_wi(&dets, &gts, &known, 0.8, 0.5), Ok(0.0));
        let short = [det(0, A, 0.9, 0.0)];
        assert_eq!(
            compute_wi(&short, &gts, &known, 0.8, 0.5),
            Err(MetricsError::RecallUnreachable(0.8))
        );
        assert_eq!(
            compute_wi(&dets, &[], &known, 0.8, 0.5),
            Err(MetricsError::NoKnownGroundTruth)
        );
    }
}
