use rand::Rng;
use serde::{Deserialize, Serialize};

use super::taxonomy::TaxonomyMap;
use crate::annot::{iou, BBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub fine_class: usize,
    pub bbox: BBox,
    /// Index of the partner object for rider/cycle pairs.
    pub paired_with: Option<usize>,
}

/// Ground truth of one synthetic image, in fine classes and tight boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    /// Objects lie inside the canvas and pairing is symmetric.
    pub fn is_valid(&self) -> bool {
        let (w, h) = (f64::from(self.width), f64::from(self.height));
        self.objects.iter().enumerate().all(|(i, o)| {
            o.bbox.validate().is_ok()
                && o.bbox.x_min >= 0.0
                && o.bbox.y_min >= 0.0
                && o.bbox.x_max <= w
                && o.bbox.y_max <= h
                && o.paired_with.map_or(true, |j| {
                    j < self.objects.len() && j != i && self.objects[j].paired_with == Some(i)
                })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub canvas: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability that a placed item is a rider/cycle pair.
    pub pair_rate: f64,
    pub min_size: f64,
    pub max_size: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            canvas: 256,
            min_objects: 3,
            max_objects: 7,
            pair_rate: 0.25,
            min_size: 20.0,
            max_size: 52.0,
        }
    }
}

/// Maximum IoU allowed between the footprints of two placed items.
const MAX_PLACEMENT_IOU: f64 = 0.05;
const PLACEMENT_TRIES: usize = 60;
const MARGIN: f64 = 2.0;

// quarter-pixel grid keeps boxes exactly representable in documents
fn snapped(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
    BBox {
        x_min: x0,
        y_min: y0,
        x_max: x1,
        y_max: y1,
    }
    .snap(0.25)
}

/// Draw one scene. Items are single objects or rider/cycle pairs placed
/// with little overlap between items.
pub fn generate_scene<R: Rng>(image_id: String, taxonomy: &TaxonomyMap, cfg: &SceneConfig, rng: &mut R) -> SceneSpec {
    let canvas = f64::from(cfg.canvas);
    let singles: Vec<usize> = (0..taxonomy.fine_classes.len())
        .filter(|&f| !taxonomy.is_rider(f))
        .collect();
    let pairs: Vec<(usize, usize)> = taxonomy
        .pairs
        .iter()
        .map(|p| {
            (
                taxonomy.fine_index(&p.rider).unwrap(),
                taxonomy.fine_index(&p.cycle).unwrap(),
            )
        })
        .collect();

    let target = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut footprints: Vec<BBox> = Vec::new();

    while objects.len() < target {
        let want_pair = !pairs.is_empty() && rng.random_bool(cfg.pair_rate) && objects.len() + 2 <= target + 1;
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let item: Vec<(usize, BBox)> = if want_pair {
                let (rider, cycle) = pairs[rng.random_range(0..pairs.len())];
                let cw = rng.random_range(24.0..36.0);
                let ch = cw * rng.random_range(0.75..0.9);
                let rw = cw * rng.random_range(0.6..0.75);
                let rh = rw * rng.random_range(1.1..1.3);
                let x0 = rng.random_range(MARGIN..canvas - cw - MARGIN);
                let y0 = rng.random_range(MARGIN + rh..canvas - ch - MARGIN);
                let cyc = snapped(x0, y0, x0 + cw, y0 + ch);
                let rx = x0 + 0.5 * (cw - rw) + rng.random_range(-2.0..2.0);
                let ry1 = y0 + 0.5 * ch;
                let rid = snapped(rx, ry1 - rh, rx + rw, ry1);
                vec![(rider, rid), (cycle, cyc)]
            } else {
                let class = singles[rng.random_range(0..singles.len())];
                let w = rng.random_range(cfg.min_size..cfg.max_size);
                let h = (w * rng.random_range(0.75..1.33)).clamp(cfg.min_size * 0.75, cfg.max_size);
                let x0 = rng.random_range(MARGIN..canvas - w - MARGIN);
                let y0 = rng.random_range(MARGIN..canvas - h - MARGIN);
                vec![(class, snapped(x0, y0, x0 + w, y0 + h))]
            };
            let fp = item
                .iter()
                .skip(1)
                .fold(item[0].1, |acc, (_, b)| acc.union_box(b));
            if footprints.iter().any(|f| iou(f, &fp) > MAX_PLACEMENT_IOU) {
                continue;
            }
            let base = objects.len();
            let paired = item.len() == 2;
            for (k, (class, bbox)) in item.into_iter().enumerate() {
                objects.push(SceneObject {
                    fine_class: class,
                    bbox,
                    paired_with: paired.then_some(base + 1 - k),
                });
            }
            footprints.push(fp);
            placed = true;
            break;
        }
        if !placed {
            break;
        }
    }

    SceneSpec {
        image_id,
        width: cfg.canvas,
        height: cfg.canvas,
        objects,
    }
}
