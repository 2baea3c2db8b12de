//! Box geometry, unknown-aware proposal labeling and two-head ensembling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OpenWorldError {
    #[error("box width and height must be positive and finite, got w={w}, h={h}")]
    InvalidBox { w: f64, h: f64 },
    #[error("objectness {0} outside [0, 1]")]
    InvalidObjectness(f64),
    #[error("posterior vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("posterior product vanishes on every slot")]
    DegeneratePosteriors,
}

/// Axis-aligned box in center format `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, OpenWorldError> {
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite() && x.is_finite() && y.is_finite()) {
            return Err(OpenWorldError::InvalidBox { w, h });
        }
        Ok(Self { x, y, w, h })
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    /// `(x1, y1, x2, y2)` corners.
    pub fn corners(self) -> (f64, f64, f64, f64) {
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        (self.x - hw, self.y - hh, self.x + hw, self.y + hh)
    }

    pub fn area(self) -> f64 {
        self.w * self.h
    }

    pub fn translate(self, dx: f64, dy: f64) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            ..self
        }
    }

    /// Expresses `self` in the frame of `reference`: offsets scaled by the
    /// reference size, extents as ratios. The result is itself a valid box.
    pub fn relative_to(self, reference: BoundingBox) -> BoundingBox {
        BoundingBox {
            x: (self.x - reference.x) / reference.w,
            y: (self.y - reference.y) / reference.h,
            w: self.w / reference.w,
            h: self.h / reference.h,
        }
    }

    /// Inverse of [`relative_to`](Self::relative_to) for a raw regression
    /// output. Non-positive extents are clamped to a small positive size.
    pub fn decode(reference: BoundingBox, rel: [f64; 4]) -> BoundingBox {
        const MIN_SCALE: f64 = 1e-3;
        BoundingBox {
            x: reference.x + rel[0] * reference.w,
            y: reference.y + rel[1] * reference.h,
            w: rel[2].max(MIN_SCALE) * reference.w,
            h: rel[3].max(MIN_SCALE) * reference.h,
        }
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = OpenWorldError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub objectness: f64,
}

impl Proposal {
    pub fn new(bbox: BoundingBox, objectness: f64) -> Result<Self, OpenWorldError> {
        if !(0.0..=1.0).contains(&objectness) {
            return Err(OpenWorldError::InvalidObjectness(objectness));
        }
        Ok(Self { bbox, objectness })
    }
}

pub fn iou(a: BoundingBox, b: BoundingBox) -> f64 {
    // Corner round-off would otherwise leave identical boxes just below 1.
    if a == b {
        return 1.0;
    }
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    // Sum the areas in a fixed order so iou(a, b) == iou(b, a) bitwise.
    let (sa, sb) = if a.area() <= b.area() {
        (a.area(), b.area())
    } else {
        (b.area(), a.area())
    };
    (inter / (sa + sb - inter)).clamp(0.0, 1.0)
}

/// Indices of the `k` highest-objectness proposals that overlap no
/// ground-truth box by more than `overlap_thresh`, best first. Ties go to the
/// lower index.
pub fn select_unknown_proposals(
    proposals: &[Proposal],
    gt_boxes: &[BoundingBox],
    k: usize,
    overlap_thresh: f64,
) -> Vec<usize> {
    let mut candidates: Vec<usize> = proposals
        .iter()
        .enumerate()
        .filter(|(_, p)| gt_boxes.iter().all(|&g| iou(p.bbox, g) <= overlap_thresh))
        .map(|(i, _)| i)
        .collect();
    candidates.sort_by(|&a, &b| {
        proposals[b]
            .objectness
            .total_cmp(&proposals[a].objectness)
            .then(a.cmp(&b))
    });
    candidates.truncate(k);
    candidates
}

/// Multiplies the two posteriors, renormalizes, and returns the arg-max slot
/// (lowest slot on ties) with its renormalized probability.
pub fn ensemble_predict(p_roi: &[f64], p_sem: &[f64]) -> Result<(usize, f64), OpenWorldError> {
    let joint = ensemble_posterior(p_roi, p_sem)?;
    let mut best = 0;
    for (i, &p) in joint.iter().enumerate() {
        if p > joint[best] {
            best = i;
        }
    }
    Ok((best, joint[best]))
}

pub fn ensemble_posterior(p_roi: &[f64], p_sem: &[f64]) -> Result<Vec<f64>, OpenWorldError> {
    if p_roi.len() != p_sem.len() {
        return Err(OpenWorldError::LengthMismatch(p_roi.len(), p_sem.len()));
    }
    let product: Vec<f64> = p_roi.iter().zip(p_sem).map(|(a, b)| a * b).collect();
    let total: f64 = product.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(OpenWorldError::DegeneratePosteriors);
    }
    Ok(product.into_iter().map(|p| p / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn iou_hand_cases() {
        let a = bx(1.0, 1.0, 2.0, 2.0);
        assert_eq!(iou(a, a), 1.0);
        assert_eq!(iou(a, bx(10.0, 10.0, 2.0, 2.0)), 0.0);
        // Corners (0,0)-(2,2) and (1,1)-(3,3): intersection 1, union 7.
        assert!((iou(a, bx(2.0, 2.0, 2.0, 2.0)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(iou(bx(0.0, 0.0, 2.0, 2.0), bx(2.0, 0.0, 2.0, 2.0)), 0.0);
    }

    #[test]
    fn invalid_boxes_are_rejected() {
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(serde_json::from_str::<BoundingBox>("[0, 0, 1, 0]").is_err());
        assert!(Proposal::new(bx(0.0, 0.0, 1.0, 1.0), 1.5).is_err());
    }

    #[test]
    fn relative_round_trip() {
        let gt = bx(3.0, -2.0, 4.0, 1.5);
        let prop = bx(2.5, -1.0, 5.0, 2.0);
        let back = BoundingBox::decode(prop, gt.relative_to(prop).to_array());
        for (a, b) in back.to_array().iter().zip(gt.to_array()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_selection_skips_overlapping_and_breaks_ties_low() {
        let gt = [bx(0.0, 0.0, 2.0, 2.0)];
        let props = [
            Proposal::new(bx(0.5, 0.0, 2.0, 2.0), 0.99).unwrap(),
            Proposal::new(bx(10.0, 0.0, 2.0, 2.0), 0.4).unwrap(),
            Proposal::new(bx(20.0, 0.0, 2.0, 2.0), 0.7).unwrap(),
            Proposal::new(bx(30.0, 0.0, 2.0, 2.0), 0.7).unwrap(),
        ];
        assert_eq!(select_unknown_proposals(&props, &gt, 1, 0.0), vec![2]);
        assert_eq!(select_unknown_proposals(&props, &gt, 10, 0.0), vec![2, 3, 1]);
        assert_eq!(select_unknown_proposals(&props, &gt, 0, 0.0), Vec::<usize>::new());
        let all_overlap = [props[0]];
        assert!(select_unknown_proposals(&all_overlap, &gt, 3, 0.0).is_empty());
    }

    #[test]
    fn ensemble_hand_cases() {
        let mut onehot = vec![0.0; 6];
        onehot[3] = 1.0;
        let uniform = vec![1.0 / 6.0; 6];
        assert_eq!(ensemble_predict(&onehot, &uniform).unwrap(), (3, 1.0));

        let (cls, score) = ensemble_predict(&[0.6, 0.4], &[0.6, 0.4]).unwrap();
        assert_eq!(cls, 0);
        assert!((score - 0.36 / 0.52).abs() < 1e-12);

        let (cls, score) = ensemble_predict(&uniform, &uniform).unwrap();
        assert_eq!(cls, 0);
        assert!((score - 1.0 / 6.0).abs() < 1e-12);

        assert_eq!(
            ensemble_predict(&[1.0, 0.0], &[0.0, 1.0]),
            Err(OpenWorldError::DegeneratePosteriors)
        );
    }
}
