//! Annotation data model and box geometry.

mod io;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_corpus, parse_corpus, save_corpus, write_corpus_string, Corpus};

/// Axis-aligned box in corner form, continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(x, y, x + w, y + h)
    }

    pub fn validate(&self) -> Result<()> {
        let reason = if ![self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
        {
            Some("non-finite coordinate")
        } else if self.x_min >= self.x_max {
            Some("x_min >= x_max")
        } else if self.y_min >= self.y_max {
            Some("y_min >= y_max")
        } else {
            None
        };
        match reason {
            Some(reason) => Err(Error::InvalidBox {
                x_min: self.x_min,
                y_min: self.y_min,
                x_max: self.x_max,
                y_max: self.y_max,
                reason,
            }),
            None => Ok(()),
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox {
            x_min: cx - 0.5 * w,
            y_min: cy - 0.5 * h,
            x_max: cx + 0.5 * w,
            y_max: cy + 0.5 * h,
        }
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }

    /// Tight union of two boxes.
    pub fn union_box(&self, other: &BBox) -> BBox {
        BBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    /// Scale about the center.
    pub fn inflate(&self, factor: f64) -> BBox {
        let (cx, cy) = self.center();
        BBox::from_center(cx, cy, self.width() * factor, self.height() * factor)
    }

    /// Round every coordinate to a multiple of `step`.
    pub fn snap(&self, step: f64) -> BBox {
        let r = |v: f64| (v / step).round() * step;
        BBox {
            x_min: r(self.x_min),
            y_min: r(self.y_min),
            x_max: r(self.x_max),
            y_max: r(self.y_max),
        }
    }

    /// Clip to `[0,width]x[0,height]`. Returns `None` when nothing with
    /// positive area remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let b = BBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        };
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Regression-target scaling applied to `(dx, dy, dw, dh)`.
pub const DELTA_STD: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

/// Box deltas of `target` relative to `reference`: center shift in units of
/// the reference size and log size ratios, divided by [`DELTA_STD`].
pub fn encode_deltas(reference: &BBox, target: &BBox) -> [f64; 4] {
    let (rx, ry) = reference.center();
    let (tx, ty) = target.center();
    let (rw, rh) = (reference.width(), reference.height());
    [
        (tx - rx) / rw / DELTA_STD[0],
        (ty - ry) / rh / DELTA_STD[1],
        (target.width() / rw).ln() / DELTA_STD[2],
        (target.height() / rh).ln() / DELTA_STD[3],
    ]
}

/// Inverse of [`encode_deltas`]. Log-size terms are capped so a wild
/// prediction cannot overflow.
pub fn decode_deltas(reference: &BBox, deltas: &[f64]) -> BBox {
    const MAX_LOG: f64 = 4.0;
    let (rx, ry) = reference.center();
    let (rw, rh) = (reference.width(), reference.height());
    let cx = rx + deltas[0] * DELTA_STD[0] * rw;
    let cy = ry + deltas[1] * DELTA_STD[1] * rh;
    let w = rw * (deltas[2] * DELTA_STD[2]).min(MAX_LOG).exp();
    let h = rh * (deltas[3] * DELTA_STD[3]).min(MAX_LOG).exp();
    BBox::from_center(cx, cy, w, h)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    GroundTruth,
    /// Produced by the named detector or transfer model.
    Pseudo(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    pub origin: Origin,
}

impl Detection {
    pub fn ground_truth(bbox: BBox, class_id: usize) -> Self {
        Detection {
            bbox,
            class_id,
            score: 1.0,
            origin: Origin::GroundTruth,
        }
    }

    pub fn pseudo(bbox: BBox, class_id: usize, score: f64, detector: impl Into<String>) -> Self {
        Detection {
            bbox,
            class_id,
            score,
            origin: Origin::Pseudo(detector.into()),
        }
    }

    pub fn is_gt(&self) -> bool {
        self.origin == Origin::GroundTruth
    }
}

/// One image and its annotations, keyed by label-space id.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub dataset_id: String,
    pub width: u32,
    pub height: u32,
    pub annotations: BTreeMap<String, Vec<Detection>>,
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>, dataset_id: impl Into<String>, width: u32, height: u32) -> Self {
        ImageRecord {
            image_id: image_id.into(),
            dataset_id: dataset_id.into(),
            width,
            height,
            annotations: BTreeMap::new(),
        }
    }

    pub fn in_space(&self, space_id: &str) -> &[Detection] {
        self.annotations
            .get(space_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn annotation_count(&self) -> usize {
        self.annotations.values().map(Vec::len).sum()
    }
}

fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.class_id.cmp(&b.class_id))
        .then(
            a.bbox
                .x_min
                .partial_cmp(&b.bbox.x_min)
                .unwrap_or(Ordering::Equal),
        )
}

/// Class-wise greedy non-maximum suppression.
///
/// Detections are visited in descending score order (ties: lower class id,
/// then lower `x_min`, then input order). A detection is dropped when a
/// kept detection of the same class overlaps it with IoU above
/// `iou_threshold`. The result is in visiting order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nms_indices(dets, iou_threshold)
        .into_iter()
        .map(|i| dets[i].clone())
        .collect()
}

/// Positions in `dets` of the detections [`nms`] keeps, in visiting order.
pub fn nms_indices(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| rank_order(&dets[i], &dets[j]));

    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&k| {
            dets[k].class_id == dets[i].class_id && iou(&dets[k].bbox, &dets[i].bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

pub fn filter_by_score(dets: &[Detection], tau: f64) -> Vec<Detection> {
    dets.iter().filter(|d| d.score >= tau).cloned().collect()
}
