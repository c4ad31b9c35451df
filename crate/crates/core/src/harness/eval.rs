//! Detection scoring: average precision at IoU 0.5.
//!
//! Per class, detections across the whole set are ranked by confidence and
//! greedily matched against unmatched ground-truth boxes of that class in the
//! same image (best IoU wins, 0.5 minimum). The precision-recall curve is
//! integrated with all-points interpolation — area under the running maximum
//! of precision from the high-recall side. Classes with no ground truth are
//! left out of the mean rather than contributing a fake zero or one.

use crate::detector::{iou, Detection, GtBox};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    /// Mean AP over classes that have ground truth, in [0, 1].
    pub map: Real,
    /// AP per class; `None` when the class never appears in the ground truth.
    pub per_class: Vec<Option<Real>>,
    /// Ground-truth boxes per class.
    pub gt_counts: Vec<usize>,
}

impl MapReport {
    pub fn percent(&self) -> Real {
        100.0 * self.map
    }
}

/// Area under an all-points interpolated precision-recall curve given the
/// ranked hit/miss flags and the number of positives.
fn average_precision(hits: &[bool], total_gt: usize) -> Real {
    if total_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points: Vec<(Real, Real)> = Vec::with_capacity(hits.len());
    for (rank, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        let recall = tp as Real / total_gt as Real;
        let precision = tp as Real / (rank + 1) as Real;
        points.push((recall, precision));
    }
    // envelope: best precision at or beyond each recall level
    let mut best = 0.0;
    let mut ap = 0.0;
    let mut next_recall = match points.last() {
        Some(&(r, _)) => r,
        None => return 0.0,
    };
    for &(recall, precision) in points.iter().rev() {
        if recall < next_recall {
            ap += (next_recall - recall) * best;
            next_recall = recall;
        }
        best = best.max(precision);
    }
    ap + next_recall * best
}

/// Score `detections` against `ground_truth`, image-aligned slices of equal
/// length, over `classes` foreground classes.
pub fn evaluate_map50(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GtBox>],
    classes: usize,
) -> MapReport {
    assert_eq!(
        detections.len(),
        ground_truth.len(),
        "detections and ground truth must cover the same images"
    );
    let mut per_class = Vec::with_capacity(classes);
    let mut gt_counts = Vec::with_capacity(classes);
    for k in 0..classes {
        // (confidence, image, index) ranking, deterministic under ties
        let mut ranked: Vec<(Real, usize, usize)> = Vec::new();
        for (img, dets) in detections.iter().enumerate() {
            for (di, d) in dets.iter().enumerate() {
                if d.class == k {
                    ranked.push((d.confidence, img, di));
                }
            }
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let total_gt: usize = ground_truth.iter().flatten().filter(|g| g.class == k).count();
        gt_counts.push(total_gt);
        let mut taken: Vec<Vec<bool>> =
            ground_truth.iter().map(|g| vec![false; g.len()]).collect();
        let mut hits = Vec::with_capacity(ranked.len());
        for &(_, img, di) in &ranked {
            let d = &detections[img][di];
            let dbox = (d.x0, d.y0, d.x1, d.y1);
            let mut best = 0.5;
            let mut best_gt = None;
            for (gi, g) in ground_truth[img].iter().enumerate() {
                if g.class != k || taken[img][gi] {
                    continue;
                }
                let v = iou(dbox, (g.x0, g.y0, g.x1, g.y1));
                if v >= best {
                    best = v;
                    best_gt = Some(gi);
                }
            }
            match best_gt {
                Some(gi) => {
                    taken[img][gi] = true;
                    hits.push(true);
                }
                None => hits.push(false),
            }
        }
        per_class.push(if total_gt == 0 { None } else { Some(average_precision(&hits, total_gt)) });
    }
    let present: Vec<Real> = per_class.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<Real>() / present.len() as Real
    };
    MapReport { map, per_class, gt_counts }
}
