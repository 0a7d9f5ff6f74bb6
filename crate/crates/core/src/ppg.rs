//! Privileged proposal generation: augmented ground truth plus cross-space
//! pseudo-labels become the region proposals of one image.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annot::{BBox, Detection, ImageRecord};
use crate::error::Result;
use crate::labelspace::GlobalIndex;
use crate::numerics::Matrix;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugConfig {
    /// Per-box probability of jittering a GT box.
    pub p_jitter: f64,
    /// Per-box probability of dropping a GT box.
    pub p_remove: f64,
    /// Corner noise bound as a fraction of the box side.
    pub jitter_strength: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            p_jitter: 0.5,
            p_remove: 0.05,
            jitter_strength: 0.05,
        }
    }
}

impl AugConfig {
    /// No augmentation, as used at inference.
    pub fn none() -> Self {
        AugConfig {
            p_jitter: 0.0,
            p_remove: 0.0,
            jitter_strength: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub global_class: usize,
    /// Score vector over the global index (background included); only the
    /// entry at `global_class` is populated.
    pub scores: Vec<f64>,
    pub confidence: f64,
    pub is_gt: bool,
    /// GT box whose geometry was jittered.
    pub jittered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalBatch {
    pub image_id: String,
    pub dataset_id: String,
    pub width: u32,
    pub height: u32,
    pub proposals: Vec<Proposal>,
}

impl ProposalBatch {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.proposals.iter().map(|p| p.bbox).collect()
    }

    /// `M × (total + 1)` matrix of score vectors.
    pub fn score_matrix(&self) -> Matrix {
        let cols = self.proposals.first().map_or(0, |p| p.scores.len());
        let data = self.proposals.iter().flat_map(|p| p.scores.iter().copied()).collect();
        Matrix::new(self.proposals.len(), cols, data).expect("scores are finite")
    }
}

/// Offset each corner by uniform noise in `±strength × side`, clip to the
/// image. A degenerate draw is retried once, then the box is returned as is.
pub fn jitter_box<R: Rng>(b: &BBox, width: f64, height: f64, strength: f64, rng: &mut R) -> BBox {
    if strength <= 0.0 {
        return *b;
    }
    let (dx, dy) = (strength * b.width(), strength * b.height());
    for _ in 0..2 {
        let mut off = [0.0; 4];
        for (i, o) in off.iter_mut().enumerate() {
            let s = if i % 2 == 0 { dx } else { dy };
            *o = rng.random_range(-s..=s);
        }
        let cand = BBox {
            x_min: b.x_min + off[0],
            y_min: b.y_min + off[1],
            x_max: b.x_max + off[2],
            y_max: b.y_max + off[3],
        };
        if let Some(c) = cand.clip(width, height) {
            return c;
        }
    }
    *b
}

/// Assemble the proposals of one image. GT boxes of `native_space` come
/// first (each jittered and removed independently, never removing all of
/// them), followed by the pseudo-labels of every other space in the order
/// the spaces were registered in `index`.
pub fn build_batch(
    record: &ImageRecord,
    native_space: &str,
    pseudo: &BTreeMap<String, Vec<Detection>>,
    index: &GlobalIndex,
    aug: &AugConfig,
    seed: u64,
) -> Result<ProposalBatch> {
    let (w, h) = (f64::from(record.width), f64::from(record.height));
    let width = index.width();
    let mut rng = seed::rng(seed, "ppg", seed::str_key(&record.image_id));
    let gt = record.in_space(native_space);

    let mut draws = Vec::with_capacity(gt.len());
    for _ in gt {
        let removed = aug.p_remove > 0.0 && rng.random_bool(aug.p_remove.min(1.0));
        let jitter = aug.p_jitter > 0.0 && rng.random_bool(aug.p_jitter.min(1.0));
        draws.push((removed, jitter));
    }
    if !draws.is_empty() && draws.iter().all(|d| d.0) {
        draws[0].0 = false;
    }

    let mut proposals = Vec::new();
    for (d, (removed, jitter)) in gt.iter().zip(draws) {
        if removed {
            continue;
        }
        let bbox = if jitter {
            jitter_box(&d.bbox, w, h, aug.jitter_strength, &mut rng)
        } else {
            d.bbox
        };
        let g = index.to_global(native_space, d.class_id)?;
        let mut scores = vec![0.0; width];
        scores[g] = 1.0;
        proposals.push(Proposal {
            bbox,
            global_class: g,
            scores,
            confidence: 1.0,
            is_gt: true,
            jittered: jitter,
        });
    }
    for space in index.spaces() {
        if space.space_id == native_space {
            continue;
        }
        for d in pseudo.get(&space.space_id).map_or(&[][..], Vec::as_slice) {
            let Some(bbox) = d.bbox.clip(w, h) else { continue };
            let g = index.to_global(&space.space_id, d.class_id)?;
            let mut scores = vec![0.0; width];
            scores[g] = d.score;
            proposals.push(Proposal {
                bbox,
                global_class: g,
                scores,
                confidence: d.score,
                is_gt: false,
                jittered: false,
            });
        }
    }
    Ok(ProposalBatch {
        image_id: record.image_id.clone(),
        dataset_id: record.dataset_id.clone(),
        width: record.width,
        height: record.height,
        proposals,
    })
}

/// S_c: 1 for GT proposals, the largest populated score otherwise.
pub fn confidence_vector(batch: &ProposalBatch) -> Vec<f64> {
    batch
        .proposals
        .iter()
        .map(|p| {
            if p.is_gt {
                1.0
            } else {
                p.scores.iter().copied().fold(0.0, f64::max)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelspace::LabelSpace;

    fn space(id: &str, n: usize) -> LabelSpace {
        LabelSpace::new(id, (0..n).map(|i| format!("{id}{i}")).collect()).unwrap()
    }

    fn fixture() -> (ImageRecord, BTreeMap<String, Vec<Detection>>, GlobalIndex) {
        let index = GlobalIndex::build(vec![space("a", 3), space("b", 4), space("c", 2)]).unwrap();
        let mut r = ImageRecord::new("img", "ds_b", 256, 256);
        let gt = (0..4)
            .map(|i| Detection::ground_truth(BBox::new(10.0 + 50.0 * i as f64, 10.0, 40.0 + 50.0 * i as f64, 50.0).unwrap(), i))
            .collect();
        r.annotations.insert("b".into(), gt);
        let pl = |n: usize, s: f64| -> Vec<Detection> {
            (0..n)
                .map(|i| Detection::pseudo(BBox::new(20.0 * i as f64, 100.0, 20.0 * i as f64 + 15.0, 130.0).unwrap(), i % 2, s, "x"))
                .collect()
        };
        let mut pseudo = BTreeMap::new();
        pseudo.insert("c".to_string(), pl(2, 0.6));
        pseudo.insert("a".to_string(), pl(3, 0.7));
        (r, pseudo, index)
    }

    #[test]
    fn concatenation_order_and_confidences() {
        let (r, pseudo, index) = fixture();
        let b = build_batch(&r, "b", &pseudo, &index, &AugConfig::none(), 1).unwrap();
        assert_eq!(b.len(), 9);
        let classes: Vec<usize> = b.proposals.iter().map(|p| p.global_class).collect();
        assert_eq!(classes, vec![3, 4, 5, 6, 0, 1, 0, 7, 8]);
        assert_eq!(confidence_vector(&b), vec![1.0, 1.0, 1.0, 1.0, 0.7, 0.7, 0.7, 0.6, 0.6]);
        assert_eq!(b.score_matrix().shape(), (9, 10));
        for (p, d) in b.proposals.iter().zip(r.in_space("b")) {
            assert_eq!(p.bbox, d.bbox);
        }
    }

    #[test]
    fn never_removes_every_gt() {
        let (r, _, index) = fixture();
        let aug = AugConfig {
            p_remove: 1.0,
            ..AugConfig::none()
        };
        for s in 0..20 {
            let b = build_batch(&r, "b", &BTreeMap::new(), &index, &aug, s).unwrap();
            assert_eq!(b.len(), 1);
        }
    }

    #[test]
    fn jitter_bounds() {
        let mut rng = seed::rng(0, "t", 0);
        let b = BBox::new(0.0, 0.0, 100.0, 100.0).unwrap();
        assert_eq!(jitter_box(&b, 256.0, 256.0, 0.0, &mut rng), b);
        for _ in 0..500 {
            let j = jitter_box(&b, 256.0, 256.0, 0.05, &mut rng);
            assert!(j.x_min >= 0.0 && j.x_min <= 5.0 && (j.x_max - 100.0).abs() <= 5.0);
            let e = jitter_box(&BBox::new(230.0, 230.0, 256.0, 256.0).unwrap(), 256.0, 256.0, 0.3, &mut rng);
            assert!(e.x_max <= 256.0 && e.y_max <= 256.0);
        }
    }

    #[test]
    fn pseudo_max_score() {
        let (r, _, index) = fixture();
        let mut pseudo = BTreeMap::new();
        pseudo.insert("a".to_string(), vec![Detection::pseudo(BBox::new(0.0, 0.0, 9.0, 9.0).unwrap(), 1, 0.7, "x")]);
        let b = build_batch(&r, "b", &pseudo, &index, &AugConfig::none(), 1).unwrap();
        assert_eq!(confidence_vector(&b)[4], 0.7);
    }
}
