//! Exhaustive precision-recall oracle and random detection instances.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semtopo::metrics::{DetectionRecord, GroundTruthRecord};
use semtopo::openworld::BoundingBox;
use semtopo::topology::Label;

pub fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
    BoundingBox::new(x, y, w, h).unwrap()
}

pub fn det(image_id: u64, label: Label, score: f64, bbox: BoundingBox) -> DetectionRecord {
    DetectionRecord {
        image_id,
        label,
        score,
        bbox,
    }
}

pub fn gt(image_id: u64, label: Label, bbox: BoundingBox) -> GroundTruthRecord {
    GroundTruthRecord { image_id, label, bbox }
}

// Oracle IoU from top-left/bottom-right corners.
pub fn oracle_iou(a: BoundingBox, b: BoundingBox) -> f64 {
    let (al, at, ar, ab) = (a.x - a.w / 2.0, a.y - a.h / 2.0, a.x + a.w / 2.0, a.y + a.h / 2.0);
    let (bl, bt, br, bb) = (b.x - b.w / 2.0, b.y - b.h / 2.0, b.x + b.w / 2.0, b.y + b.h / 2.0);
    let w = ar.min(br) - al.max(bl);
    let h = ab.min(bb) - at.max(bt);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    w * h / (a.w * a.h + b.w * b.h - w * h)
}

/// Precision and recall of every prefix of the ranked list, each prefix
/// matched from scratch.
pub fn oracle_curve(dets: &[DetectionRecord], gts: &[GroundTruthRecord], class: Label) -> Vec<(f64, f64)> {
    let mut ranked: Vec<(usize, &DetectionRecord)> = dets.iter().enumerate().filter(|(_, d)| d.label == class).collect();
    ranked.sort_by(|(i, a), (j, b)| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.image_id.cmp(&b.image_id))
            .then(i.cmp(j))
    });
    let n_gt = gts.iter().filter(|g| g.label == class).count();
    (1..=ranked.len())
        .map(|k| {
            let mut used = vec![false; gts.len()];
            let mut hits = 0;
            for (_, d) in &ranked[..k] {
                let mut best: Option<(usize, f64)> = None;
                for (gi, g) in gts.iter().enumerate() {
                    if used[gi] || g.label != class || g.image_id != d.image_id {
                        continue;
                    }
                    let o = oracle_iou(d.bbox, g.bbox);
                    if o >= 0.5 && best.is_none_or(|(_, b)| o > b) {
                        best = Some((gi, o));
                    }
                }
                if let Some((gi, _)) = best {
                    used[gi] = true;
                    hits += 1;
                }
            }
            (hits as f64 / k as f64, hits as f64 / n_gt as f64)
        })
        .collect()
}

/// Integral of the interpolated precision over recall steps of `1 / n_gt`.
pub fn oracle_ap(dets: &[DetectionRecord], gts: &[GroundTruthRecord], class: Label) -> f64 {
    let n_gt = gts.iter().filter(|g| g.label == class).count();
    let curve = oracle_curve(dets, gts, class);
    (1..=n_gt)
        .map(|i| {
            let level = i as f64 / n_gt as f64;
            curve
                .iter()
                .filter(|(_, r)| *r >= level - 1e-12)
                .map(|(p, _)| *p)
                .fold(0.0, f64::max)
                / n_gt as f64
        })
        .sum()
}

pub fn oracle_eleven(dets: &[DetectionRecord], gts: &[GroundTruthRecord], class: Label) -> f64 {
    let curve = oracle_curve(dets, gts, class);
    (0..=10)
        .map(|k| {
            let level = k as f64 / 10.0;
            curve
                .iter()
                .filter(|(_, r)| *r >= level - 1e-12)
                .map(|(p, _)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

pub fn random_instance(seed: u64) -> (Vec<DetectionRecord>, Vec<GroundTruthRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = rng.random_range(1..=3);
    let images = rng.random_range(1..=3u64);
    let n_gt = rng.random_range(1..=5);
    let gts: Vec<GroundTruthRecord> = (0..n_gt)
        .map(|_| {
            let b = bx(rng.random_range(0.0..6.0), rng.random_range(0.0..6.0), rng.random_range(1.0..3.0), rng.random_range(1.0..3.0));
            gt(rng.random_range(0..images), Label::Class(rng.random_range(0..classes)), b)
        })
        .collect();
    let n_det = rng.random_range(0..=10);
    let dets = (0..n_det)
        .map(|_| {
            let (image, b) = if rng.random_bool(0.7) {
                let g = gts[rng.random_range(0..gts.len())];
                let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-0.4..0.4);
                let b = bx(g.bbox.x + jitter(&mut rng), g.bbox.y + jitter(&mut rng), g.bbox.w, g.bbox.h);
                (g.image_id, b)
            } else {
                let b = bx(rng.random_range(0.0..6.0), rng.random_range(0.0..6.0), rng.random_range(1.0..3.0), rng.random_range(1.0..3.0));
                (rng.random_range(0..images), b)
            };
            // Coarse scores so ties occur and exercise the tie rule.
            let score = (rng.random_range(0.0..1.0f64) * 5.0).round() / 5.0;
            det(image, Label::Class(rng.random_range(0..classes)), score, b)
        })
        .collect();
    (dets, gts)
}
