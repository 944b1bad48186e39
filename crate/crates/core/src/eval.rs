//! Evaluation: per-class average precision for classification, point-based
//! localization AP with a pixel tolerance, and the proposal-count sweep
//! table. Ground-truth boxes live only here; training never sees them.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::PixelBox;

/// Point-based localization tolerance used at paper scale, in pixels.
pub const PAPER_TOLERANCE_PX: f64 = 18.0;
/// The desk-scale analogue on 64 px images, scaled proportionally.
pub const DESK_TOLERANCE_PX: f64 = 3.0;

/// Evaluation-only ground truth for one image.
#[derive(Debug, Clone)]
pub struct GtImage {
    pub id: String,
    pub labels: Vec<f64>,
    pub boxes: Vec<(usize, PixelBox)>,
}

#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    pub images: Vec<GtImage>,
}

impl GroundTruth {
    /// Every box's class must carry label bit 1 on its image.
    pub fn validate(&self) -> Result<()> {
        for img in &self.images {
            for &(c, _) in &img.boxes {
                if img.labels.get(c).copied().unwrap_or(0.0) != 1.0 {
                    return Err(Error::invalid(format!(
                        "image {}: box class {c} lacks a positive label",
                        img.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-class predictions for one image: a classification score per class and
/// one localization point per class.
#[derive(Debug, Clone)]
pub struct ImagePrediction {
    pub id: String,
    pub class_scores: Vec<f64>,
    /// (x, y) per class, the maximum-response location.
    pub points: Vec<(f64, f64)>,
}

/// Per-class APs plus their mean over classes that have at least one
/// positive; classes without positives are reported as absent.
#[derive(Debug, Clone)]
pub struct PrResult {
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

impl PrResult {
    pub fn from_per_class(per_class: Vec<Option<f64>>) -> PrResult {
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let map = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        PrResult { per_class, map }
    }
}

/// Average precision with all-point interpolation over `(score, is_positive)`
/// items. Sorting is stable, so ties keep input order. Returns `None` when
/// the item list has no positive.
pub fn average_precision(items: &[(f64, bool)]) -> Option<f64> {
    let n_pos = items.iter().filter(|(_, p)| *p).count();
    ap_with_positive_count(items, n_pos)
}

/// AP where the recall denominator is given explicitly; localization uses
/// the labeled-image count so that misses reduce attainable recall.
fn ap_with_positive_count(items: &[(f64, bool)], n_pos: usize) -> Option<f64> {
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[b].0.partial_cmp(&items[a].0).unwrap());
    // precision at each rank; the running max from the right is the
    // interpolated envelope
    let mut precisions = Vec::with_capacity(items.len());
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        if items[i].1 {
            tp += 1;
        }
        precisions.push((tp as f64 / (rank + 1) as f64, items[i].1));
    }
    let mut envelope = 0.0f64;
    let mut ap = 0.0;
    for &(prec, is_pos) in precisions.iter().rev() {
        envelope = envelope.max(prec);
        if is_pos {
            ap += envelope;
        }
    }
    Some(ap / n_pos as f64)
}

/// Classification AP per class from image-level scores against image labels.
pub fn classification_ap(predictions: &[ImagePrediction], gt: &GroundTruth) -> Result<PrResult> {
    let (preds, classes) = aligned(predictions, gt)?;
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let items: Vec<(f64, bool)> = preds
            .iter()
            .map(|(p, g)| (p.class_scores[c], g.labels[c] == 1.0))
            .collect();
        per_class.push(average_precision(&items));
    }
    Ok(PrResult::from_per_class(per_class))
}

/// Point-based localization AP: the per-image point for a class counts as a
/// true positive iff the image holds that class and the point falls inside
/// any same-class box expanded by `tolerance` pixels on all sides.
pub fn point_localization_ap(
    predictions: &[ImagePrediction],
    gt: &GroundTruth,
    tolerance: f64,
) -> Result<PrResult> {
    let (preds, classes) = aligned(predictions, gt)?;
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let items: Vec<(f64, bool)> = preds
            .iter()
            .map(|(p, g)| {
                let (x, y) = p.points[c];
                let hit = g.labels[c] == 1.0
                    && g.boxes.iter().any(|&(bc, b)| {
                        if bc != c {
                            return false;
                        }
                        let (x1, y1, x2, y2) = b.expand(tolerance);
                        x >= x1 && x <= x2 && y >= y1 && y <= y2
                    });
                (p.class_scores[c], hit)
            })
            .collect();
        let n_labeled = preds.iter().filter(|(_, g)| g.labels[c] == 1.0).count();
        if n_labeled == 0 {
            per_class.push(None);
            continue;
        }
        per_class.push(ap_with_positive_count(&items, n_labeled));
    }
    Ok(PrResult::from_per_class(per_class))
}

/// Pairs predictions with ground truth by image id and returns the class
/// count, erroring on missing or mismatched entries.
fn aligned<'a>(
    predictions: &'a [ImagePrediction],
    gt: &'a GroundTruth,
) -> Result<(Vec<(&'a ImagePrediction, &'a GtImage)>, usize)> {
    let by_id: BTreeMap<&str, &GtImage> = gt.images.iter().map(|g| (g.id.as_str(), g)).collect();
    let mut out = Vec::with_capacity(predictions.len());
    let mut classes = 0usize;
    for p in predictions {
        let g = by_id
            .get(p.id.as_str())
            .ok_or_else(|| Error::invalid(format!("no ground truth for image {}", p.id)))?;
        if p.class_scores.len() != g.labels.len() || p.points.len() != g.labels.len() {
            return Err(Error::shape(format!(
                "image {}: {} scores / {} points vs {} classes",
                p.id,
                p.class_scores.len(),
                p.points.len(),
                g.labels.len()
            )));
        }
        classes = g.labels.len();
        out.push((p, *g));
    }
    Ok((out, classes))
}

/// One row of the proposal-count sensitivity table.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub k_top: usize,
    pub mean_proposals: f64,
    pub cls_map: f64,
    pub loc_map: f64,
}

pub fn sweep_table_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k_top,mean_proposals,cls_map,loc_map\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            r.k_top, r.mean_proposals, r.cls_map, r.loc_map
        ));
    }
    out
}

/// Metrics CSV: one `class,ap_cls,ap_loc` row per class (empty cells for
/// absent classes) and a final `mAP` summary row.
pub fn metrics_csv(cls: &PrResult, loc: &PrResult, class_names: &[String]) -> String {
    let mut out = String::from("class,ap_cls,ap_loc\n");
    for (c, name) in class_names.iter().enumerate() {
        let a = cls.per_class.get(c).copied().flatten();
        let b = loc.per_class.get(c).copied().flatten();
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        out.push_str(&format!("{name},{},{}\n", fmt(a), fmt(b)));
    }
    out.push_str(&format!("mAP,{:.6},{:.6}\n", cls.map, loc.map));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// O(n^2) reference: for each positive, scan every rank at or after it
    /// for the maximum precision.
    fn ap_reference(items: &[(f64, bool)]) -> Option<f64> {
        let n_pos = items.iter().filter(|(_, p)| *p).count();
        if n_pos == 0 {
            return None;
        }
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.sort_by(|&a, &b| items[b].0.partial_cmp(&items[a].0).unwrap());
        let mut tp_at = Vec::with_capacity(order.len());
        let mut tp = 0;
        for &i in &order {
            if items[i].1 {
                tp += 1;
            }
            tp_at.push(tp);
        }
        let prec = |rank: usize| tp_at[rank] as f64 / (rank + 1) as f64;
        let mut ap = 0.0;
        for (rank, &i) in order.iter().enumerate() {
            if items[i].1 {
                let mut best = 0.0f64;
                for later in rank..order.len() {
                    best = best.max(prec(later));
                }
                ap += best;
            }
        }
        Some(ap / n_pos as f64)
    }

    #[test]
    fn perfect_ranking_gives_ap_one() {
        let items = vec![(0.9, true), (0.8, true), (0.3, false), (0.1, false)];
        assert_eq!(average_precision(&items), Some(1.0));
    }

    #[test]
    fn one_positive_ranked_second_gives_half() {
        let items = vec![(0.9, false), (0.5, true)];
        assert_eq!(average_precision(&items), Some(0.5));
    }

    #[test]
    fn zero_positives_reported_absent() {
        let items = vec![(0.9, false), (0.5, false)];
        assert_eq!(average_precision(&items), None);
    }

    #[test]
    fn matches_brute_force_reference_on_random_inputs() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..20 {
            let items: Vec<(f64, bool)> = (0..200)
                .map(|_| (rng.random::<f64>(), rng.random::<f64>() < 0.3))
                .collect();
            let fast = average_precision(&items);
            let slow = ap_reference(&items);
            match (fast, slow) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn random_scores_approximate_positive_rate() {
        let mut total = 0.0;
        let positive_rate = 0.5;
        let seeds = 20;
        for seed in 0..seeds {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let items: Vec<(f64, bool)> = (0..400)
                .map(|i| (rng.random::<f64>(), (i as f64 / 400.0) < positive_rate))
                .collect();
            total += average_precision(&items).unwrap();
        }
        let mean = total / seeds as f64;
        assert!(
            (mean - positive_rate).abs() < 0.1,
            "random-score AP {mean} should approximate the positive rate"
        );
    }

    fn gt_one_box(tol_box: PixelBox) -> GroundTruth {
        GroundTruth {
            images: vec![GtImage {
                id: "i0".into(),
                labels: vec![1.0],
                boxes: vec![(0, tol_box)],
            }],
        }
    }

    fn pred_at(x: f64, y: f64) -> Vec<ImagePrediction> {
        vec![ImagePrediction {
            id: "i0".into(),
            class_scores: vec![0.9],
            points: vec![(x, y)],
        }]
    }

    #[test]
    fn center_point_is_positive_for_any_tolerance() {
        let b = PixelBox::new(10, 10, 20, 20);
        let gt = gt_one_box(b);
        for tol in [0.0, 1.0, 5.0] {
            let r = point_localization_ap(&pred_at(15.0, 15.0), &gt, tol).unwrap();
            assert_eq!(r.per_class[0], Some(1.0), "tol {tol}");
        }
    }

    #[test]
    fn tolerance_boundary_is_inclusive() {
        let b = PixelBox::new(10, 10, 20, 20);
        let gt = gt_one_box(b);
        let tol = 3.0;
        // exactly `tolerance` pixels left of the box edge
        let r = point_localization_ap(&pred_at(10.0 - tol, 15.0), &gt, tol).unwrap();
        assert_eq!(r.per_class[0], Some(1.0));
        // one more pixel out
        let r = point_localization_ap(&pred_at(10.0 - tol - 1.0, 15.0), &gt, tol).unwrap();
        assert_eq!(r.per_class[0], Some(0.0));
    }

    #[test]
    fn localization_translation_invariant_and_xy_symmetric() {
        let b = PixelBox::new(4, 8, 14, 18);
        let gt = gt_one_box(b);
        let r1 = point_localization_ap(&pred_at(5.0, 9.0), &gt, 1.0).unwrap();
        // translate boxes and points together
        let shifted = gt_one_box(PixelBox::new(24, 28, 34, 38));
        let r2 = point_localization_ap(&pred_at(25.0, 29.0), &shifted, 1.0).unwrap();
        assert_eq!(r1.per_class[0], r2.per_class[0]);
        // swap x and y everywhere
        let swapped = gt_one_box(PixelBox::new(8, 4, 18, 14));
        let r3 = point_localization_ap(&pred_at(9.0, 5.0), &swapped, 1.0).unwrap();
        assert_eq!(r1.per_class[0], r3.per_class[0]);
    }

    #[test]
    fn miss_on_labeled_image_caps_recall() {
        // two labeled images, one point misses: max recall 0.5
        let gt = GroundTruth {
            images: vec![
                GtImage {
                    id: "a".into(),
                    labels: vec![1.0],
                    boxes: vec![(0, PixelBox::new(0, 0, 4, 4))],
                },
                GtImage {
                    id: "b".into(),
                    labels: vec![1.0],
                    boxes: vec![(0, PixelBox::new(0, 0, 4, 4))],
                },
            ],
        };
        let preds = vec![
            ImagePrediction {
                id: "a".into(),
                class_scores: vec![0.9],
                points: vec![(2.0, 2.0)],
            },
            ImagePrediction {
                id: "b".into(),
                class_scores: vec![0.8],
                points: vec![(50.0, 50.0)],
            },
        ];
        let r = point_localization_ap(&preds, &gt, 0.0).unwrap();
        assert_eq!(r.per_class[0], Some(0.5));
    }

    #[test]
    fn ground_truth_validation_rejects_unlabeled_box() {
        let gt = GroundTruth {
            images: vec![GtImage {
                id: "a".into(),
                labels: vec![0.0],
                boxes: vec![(0, PixelBox::new(0, 0, 4, 4))],
            }],
        };
        assert!(gt.validate().is_err());
    }

    #[test]
    fn metrics_csv_shape() {
        let cls = PrResult::from_per_class(vec![Some(1.0), None]);
        let loc = PrResult::from_per_class(vec![Some(0.5), None]);
        let csv = metrics_csv(&cls, &loc, &["disk".into(), "ring".into()]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "class,ap_cls,ap_loc");
        assert_eq!(lines[1], "disk,1.000000,0.500000");
        assert_eq!(lines[2], "ring,,");
        assert!(lines[3].starts_with("mAP,"));
    }

    proptest! {
        #[test]
        fn ap_invariant_under_monotone_score_transform(
            pairs in proptest::collection::vec((0.01f64..0.99, any::<bool>()), 5..60),
        ) {
            let transformed: Vec<(f64, bool)> = pairs
                .iter()
                .map(|&(s, f)| ((s * 3.0 + 1.0).exp(), f))
                .collect();
            let a = average_precision(&pairs);
            let b = average_precision(&transformed);
            match (a, b) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                (x, y) => prop_assert_eq!(x, y),
            }
        }
    }
}
