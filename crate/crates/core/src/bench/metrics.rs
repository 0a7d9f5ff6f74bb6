use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::annot::{iou, Detection};
use crate::error::{Error, Result};

/// IoU thresholds .50:.05:.95.
pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub gt_count: usize,
    /// AP at each of [`IOU_THRESHOLDS`].
    pub ap: Vec<f64>,
}

impl ClassAp {
    pub fn ap50(&self) -> f64 {
        self.ap[0]
    }

    pub fn mean(&self) -> f64 {
        self.ap.iter().sum::<f64>() / self.ap.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// Classes with at least one GT box.
    pub classes: Vec<ClassAp>,
    /// Classes without GT, excluded from the means.
    pub absent: Vec<usize>,
    pub map50: f64,
    /// Mean over classes and over .50:.05:.95.
    pub map: f64,
    pub gt_count: usize,
    pub prediction_count: usize,
}

/// Per-class `(score, true positive)` list at one IoU threshold, COCO-style:
/// each prediction, in descending score order per image, takes the
/// best-overlapping unmatched GT of its class if that IoU reaches `thr`.
fn match_class(preds: &[Vec<Detection>], gts: &[Vec<Detection>], class: usize, thr: f64) -> Vec<(f64, bool)> {
    let mut out = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        let gt: Vec<&Detection> = g.iter().filter(|d| d.class_id == class).collect();
        let mut pr: Vec<&Detection> = p.iter().filter(|d| d.class_id == class).collect();
        pr.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
        let mut taken = vec![false; gt.len()];
        for d in pr {
            let mut best: Option<(usize, f64)> = None;
            for (k, t) in gt.iter().enumerate() {
                if taken[k] {
                    continue;
                }
                let v = iou(&d.bbox, &t.bbox);
                if v >= thr && best.map_or(true, |(_, b)| v > b) {
                    best = Some((k, v));
                }
            }
            if let Some((k, _)) = best {
                taken[k] = true;
            }
            out.push((d.score, best.is_some()));
        }
    }
    out
}

/// 101-point interpolated AP from a ranked `(score, tp)` list.
fn interpolated_ap(mut ranked: Vec<(f64, bool)>, n_gt: usize) -> f64 {
    if n_gt == 0 || ranked.is_empty() {
        return 0.0;
    }
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, hit) in &ranked {
        if *hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&v| v < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Per-class AP and mAP over images. `predictions[i]` and `ground_truth[i]`
/// belong to the same image and the same label space.
pub fn evaluate_ap(predictions: &[Vec<Detection>], ground_truth: &[Vec<Detection>], num_classes: usize) -> Result<ApReport> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::Shape {
            op: "evaluate_ap",
            lhs: (predictions.len(), 1),
            rhs: (ground_truth.len(), 1),
        });
    }
    let mut classes = Vec::new();
    let mut absent = Vec::new();
    for c in 0..num_classes {
        let n_gt = ground_truth
            .iter()
            .map(|g| g.iter().filter(|d| d.class_id == c).count())
            .sum();
        if n_gt == 0 {
            absent.push(c);
            continue;
        }
        let ap = IOU_THRESHOLDS
            .iter()
            .map(|&thr| interpolated_ap(match_class(predictions, ground_truth, c, thr), n_gt))
            .collect();
        classes.push(ClassAp {
            class_id: c,
            gt_count: n_gt,
            ap,
        });
    }
    let n = classes.len().max(1) as f64;
    Ok(ApReport {
        map50: classes.iter().map(ClassAp::ap50).sum::<f64>() / n,
        map: classes.iter().map(ClassAp::mean).sum::<f64>() / n,
        classes,
        absent,
        gt_count: ground_truth.iter().map(Vec::len).sum(),
        prediction_count: predictions.iter().map(Vec::len).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingRecovery {
    /// Matched with the correct class, over the oracle count.
    pub accuracy: f64,
    /// Mean IoU over matched pairs (1.0 when nothing matched and nothing expected).
    pub mean_iou: f64,
    pub oracle_count: usize,
    /// Transferred boxes, matched or not; `matched / transferred_count` is precision.
    pub transferred_count: usize,
    pub matched: usize,
    pub correct: usize,
    /// `confusion[oracle class][transferred class]` over matched pairs.
    pub confusion: Vec<Vec<usize>>,
}

/// Greedy class-agnostic matching at IoU ≥ `thr`: candidate pairs are taken
/// in descending IoU order while both ends are free. Returns `(a, b, iou)`.
pub fn match_greedy(a: &[Detection], b: &[Detection], thr: f64) -> Vec<(usize, usize, f64)> {
    let mut pairs = Vec::new();
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            let v = iou(&x.bbox, &y.bbox);
            if v >= thr {
                pairs.push((i, j, v));
            }
        }
    }
    pairs.sort_by(|p, q| q.2.partial_cmp(&p.2).unwrap_or(Ordering::Equal));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut out = Vec::new();
    for (i, j, v) in pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j, v));
        }
    }
    out
}

/// Compare transferred annotations with the oracle transport, image by image.
pub fn mapping_recovery(transferred: &[Vec<Detection>], oracle: &[Vec<Detection>], num_classes: usize) -> MappingRecovery {
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    let (mut matched, mut correct, mut iou_sum, mut oracle_count, mut transferred_count) = (0, 0, 0.0, 0, 0);
    for (t, o) in transferred.iter().zip(oracle) {
        oracle_count += o.len();
        transferred_count += t.len();
        for (oi, ti, v) in match_greedy(o, t, 0.5) {
            matched += 1;
            iou_sum += v;
            let (oc, tc) = (o[oi].class_id, t[ti].class_id);
            if oc == tc {
                correct += 1;
            }
            if oc < num_classes && tc < num_classes {
                confusion[oc][tc] += 1;
            }
        }
    }
    MappingRecovery {
        accuracy: if oracle_count == 0 {
            1.0
        } else {
            correct as f64 / oracle_count as f64
        },
        mean_iou: if matched == 0 {
            if oracle_count == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            iou_sum / matched as f64
        },
        oracle_count,
        transferred_count,
        matched,
        correct,
        confusion,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annot::BBox;

    fn gt(x: f64, c: usize) -> Detection {
        Detection::ground_truth(BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(), c)
    }

    fn pred(x: f64, c: usize, s: f64) -> Detection {
        Detection::pseudo(BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(), c, s, "p")
    }

    #[test]
    fn perfect_detector() {
        let g = vec![vec![gt(0.0, 0), gt(20.0, 1)], vec![gt(5.0, 1)]];
        let p: Vec<Vec<Detection>> = g.clone();
        let r = evaluate_ap(&p, &g, 3).unwrap();
        assert_eq!(r.absent, vec![2]);
        assert!(r.classes.iter().all(|c| c.ap.iter().all(|&a| a == 1.0)));
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn no_predictions() {
        let g = vec![vec![gt(0.0, 0)]];
        let r = evaluate_ap(&[vec![]], &g, 1).unwrap();
        assert_eq!(r.map, 0.0);
        assert_eq!(r.map50, 0.0);
    }

    #[test]
    fn spurious_after_full_recall() {
        let g = vec![vec![gt(0.0, 0)]];
        let p = vec![vec![pred(0.0, 0, 0.9), pred(100.0, 0, 0.8)]];
        let r = evaluate_ap(&p, &g, 1).unwrap();
        assert_eq!(r.classes[0].ap50(), 1.0);
    }

    #[test]
    fn recovery_counts() {
        let o: Vec<Detection> = (0..10).map(|i| gt(20.0 * i as f64, 0)).collect();
        let mut t: Vec<Detection> = o.clone();
        let r = mapping_recovery(&[t.clone()], &[o.clone()], 2);
        assert_eq!((r.accuracy, r.mean_iou), (1.0, 1.0));
        t[3].class_id = 1;
        let r = mapping_recovery(&[t], &[o.clone()], 2);
        assert!((r.accuracy - 0.9).abs() < 1e-12);
        assert_eq!(r.confusion[0][1], 1);
        let r = mapping_recovery(&[vec![]], &[o], 2);
        assert_eq!(r.accuracy, 0.0);
    }
}
