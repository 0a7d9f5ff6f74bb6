//! Per-dataset toy detectors over grid anchors, cross-space pseudo-labels,
//! and a noise-model oracle that stands in for trained detectors.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annot::{self, decode_deltas, encode_deltas, filter_by_score, iou, nms, BBox, Corpus, Detection, ImageRecord};
use crate::bench::{evaluate_ap, ApReport, SceneSpec, TaxonomyMap};
use crate::checkpoint::{self, CheckpointHeader};
use crate::error::{Error, Result};
use crate::featsim::{roi_descriptor, FeatureMap, Renderer};
use crate::labelspace::LabelSpace;
use crate::numerics::{Matrix, ParamSet, Tape};
use crate::seed;
use crate::train::{run_sgd, Slot, Strategy, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Square anchor sides, one anchor per size at every cell center.
    pub anchor_sizes: Vec<f64>,
    pub hidden: usize,
    /// Anchors sampled per training image.
    pub samples_per_image: usize,
    pub max_foreground: usize,
    pub fg_iou: f64,
    pub bg_iou: f64,
    /// Candidates below this score are dropped before NMS.
    pub min_score: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub train: TrainConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            anchor_sizes: vec![16.0, 28.0, 44.0],
            hidden: 64,
            samples_per_image: 64,
            max_foreground: 32,
            fg_iou: 0.5,
            bg_iou: 0.4,
            min_score: 0.05,
            nms_iou: 0.5,
            max_detections: 50,
            train: TrainConfig {
                iterations: 1500,
                strategy: Strategy::Mixed,
                ema_decay: 0.995,
                ..TrainConfig::default()
            },
        }
    }
}

/// Anchors of an image: one square per size, centered on every cell, clipped.
pub fn anchor_boxes(width: u32, height: u32, stride: u32, sizes: &[f64]) -> Vec<BBox> {
    let s = f64::from(stride);
    let (w, h) = (f64::from(width), f64::from(height));
    let (gw, gh) = ((w / s).ceil() as usize, (h / s).ceil() as usize);
    let mut out = Vec::with_capacity(gw * gh * sizes.len());
    for r in 0..gh {
        for c in 0..gw {
            let (cx, cy) = ((c as f64 + 0.5) * s, (r as f64 + 0.5) * s);
            for &size in sizes {
                if let Some(b) = BBox::from_center(cx, cy, size, size).clip(w, h) {
                    out.push(b);
                }
            }
        }
    }
    out
}

/// Head descriptors of `boxes`, one row each.
pub fn region_features(map: &FeatureMap, boxes: &[BBox]) -> Matrix {
    let rows: Vec<f64> = boxes.iter().flat_map(|b| roi_descriptor(map, b)).collect();
    let f = if boxes.is_empty() { 0 } else { rows.len() / boxes.len() };
    Matrix::new(boxes.len(), f, rows).expect("finite descriptors")
}

const PARAM_NAMES: [&str; 6] = ["w1", "b1", "w_cls", "b_cls", "w_reg", "b_reg"];

fn init_params(feat_dim: usize, classes: usize, hidden: usize, seed: u64) -> ParamSet {
    let mut rng = seed::rng(seed, "detector-init", 0);
    let mut p = ParamSet::new();
    p.push_uniform("w1", feat_dim, hidden, feat_dim, &mut rng);
    p.push("b1", Matrix::zeros(1, hidden));
    p.push("w_cls", Matrix::zeros(hidden, classes + 1));
    p.push("b_cls", Matrix::zeros(1, classes + 1));
    p.push("w_reg", Matrix::zeros(hidden, 4));
    p.push("b_reg", Matrix::zeros(1, 4));
    p
}

/// A small classification + box-regression head over anchor descriptors.
/// Predicts only within its native space plus background.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDetector {
    pub detector_id: String,
    pub dataset_id: String,
    pub space: LabelSpace,
    pub config: DetectorConfig,
    pub params: ParamSet,
    pub ema: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct DetectorMeta {
    detector_id: String,
    dataset_id: String,
    space_id: String,
    class_names: Vec<String>,
    config: DetectorConfig,
}

impl ToyDetector {
    /// Parameters at initialization (zero output layers).
    pub fn untrained(detector_id: &str, dataset_id: &str, space: &LabelSpace, feat_dim: usize, config: &DetectorConfig) -> Self {
        let params = init_params(feat_dim, space.len(), config.hidden, config.train.seed);
        ToyDetector {
            detector_id: detector_id.into(),
            dataset_id: dataset_id.into(),
            space: space.clone(),
            config: config.clone(),
            ema: params.clone(),
            params,
        }
    }

    /// Class posteriors (rows sum to 1, background last) and box deltas.
    pub fn predict(&self, feats: &Matrix, use_ema: bool) -> Result<(Matrix, Matrix)> {
        let p = if use_ema { &self.ema } else { &self.params };
        let v = p.values();
        let h = feats.matmul(&v[0])?.add_row(&v[1])?.relu();
        let logits = h.matmul(&v[2])?.add_row(&v[3])?;
        let deltas = h.matmul(&v[4])?.add_row(&v[5])?;
        Ok((crate::numerics::row_softmax(&logits), deltas))
    }

    /// Detections over precomputed anchors: per anchor the most probable
    /// foreground class and its probability, decoded boxes, class-wise NMS.
    pub fn detect_with(&self, anchors: &[BBox], feats: &Matrix, width: u32, height: u32) -> Result<Vec<Detection>> {
        let (probs, deltas) = self.predict(feats, true)?;
        let k = self.space.len();
        let (w, h) = (f64::from(width), f64::from(height));
        let mut dets = Vec::new();
        for (i, a) in anchors.iter().enumerate() {
            let row = probs.row(i);
            let (mut best, mut score) = (0, row[0]);
            for (c, &p) in row.iter().enumerate().take(k).skip(1) {
                if p > score {
                    best = c;
                    score = p;
                }
            }
            if score < self.config.min_score {
                continue;
            }
            if let Some(b) = decode_deltas(a, deltas.row(i)).clip(w, h) {
                dets.push(Detection::pseudo(b, best, score, self.detector_id.clone()));
            }
        }
        let mut kept = nms(&dets, self.config.nms_iou);
        kept.truncate(self.config.max_detections);
        Ok(kept)
    }

    pub fn detect(&self, map: &FeatureMap, width: u32, height: u32) -> Result<Vec<Detection>> {
        let anchors = anchor_boxes(width, height, map.stride as u32, &self.config.anchor_sizes);
        let feats = region_features(map, &anchors);
        self.detect_with(&anchors, &feats, width, height)
    }

    pub fn save(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        let meta = DetectorMeta {
            detector_id: self.detector_id.clone(),
            dataset_id: self.dataset_id.clone(),
            space_id: self.space.space_id.clone(),
            class_names: self.space.class_names.clone(),
            config: self.config.clone(),
        };
        let header = CheckpointHeader {
            kind: "toy_detector".into(),
            names: self.params.names().to_vec(),
            shapes: self.params.shapes(),
            config_hash: config_hash.into(),
            seed: self.config.train.seed,
            meta: serde_json::to_value(meta)?,
        };
        checkpoint::save(path, &header, &self.params, &self.ema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header, params, ema) = checkpoint::load(path)?;
        if header.kind != "toy_detector" || header.names != PARAM_NAMES {
            return Err(Error::Checkpoint(format!("expected a toy detector, found `{}`", header.kind)));
        }
        let meta: DetectorMeta = serde_json::from_value(header.meta)?;
        Ok(ToyDetector {
            detector_id: meta.detector_id,
            dataset_id: meta.dataset_id,
            space: LabelSpace::new(meta.space_id, meta.class_names)?,
            config: meta.config,
            params,
            ema,
        })
    }
}

/// One training image: its scene (for features) and labels in the
/// detector's space. Label scores are used as classification weights.
#[derive(Debug, Clone)]
pub struct DetSample<'a> {
    pub scene: &'a SceneSpec,
    pub labels: Vec<Detection>,
}

/// Anchor labels: `(anchor, label index)` foreground pairs and background anchors.
fn assign(anchors: &[BBox], labels: &[Detection], cfg: &DetectorConfig) -> (Vec<(usize, usize)>, Vec<usize>) {
    let mut best = vec![(0.0f64, usize::MAX); anchors.len()];
    let mut forced = vec![(0.0f64, usize::MAX); labels.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (j, l) in labels.iter().enumerate() {
            let v = iou(a, &l.bbox);
            if v > best[i].0 {
                best[i] = (v, j);
            }
            if v > forced[j].0 {
                forced[j] = (v, i);
            }
        }
    }
    let mut fg_of: Vec<Option<usize>> = best
        .iter()
        .map(|&(v, j)| (v >= cfg.fg_iou).then_some(j))
        .collect();
    for (j, &(v, i)) in forced.iter().enumerate() {
        if i != usize::MAX && v > 0.0 {
            fg_of[i] = Some(j);
        }
    }
    let fg = fg_of.iter().enumerate().filter_map(|(i, j)| j.map(|j| (i, j))).collect();
    let bg = (0..anchors.len())
        .filter(|&i| fg_of[i].is_none() && best[i].0 < cfg.bg_iou)
        .collect();
    (fg, bg)
}

fn detector_loss(
    params: &ParamSet,
    feats: Matrix,
    targets: &[usize],
    weights: &[f64],
    reg_target: &Matrix,
    reg_rows: &[f64],
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let x = tape.leaf(feats);
    let vars: Vec<_> = params.values().iter().map(|m| tape.leaf(m.clone())).collect();
    let h = tape.linear(x, vars[0], vars[1])?;
    let h = tape.relu(h);
    let logits = tape.linear(h, vars[2], vars[3])?;
    let deltas = tape.linear(h, vars[4], vars[5])?;
    let ce = tape.weighted_cross_entropy(logits, targets, weights, None)?;
    let n_fg = reg_rows.iter().filter(|&&w| w > 0.0).count().max(1) as f64;
    let reg = tape.smooth_l1(deltas, reg_target, reg_rows, n_fg)?;
    let loss = tape.add(ce, reg)?;
    let grads = tape.backward(loss);
    let g = vars
        .iter()
        .zip(params.values())
        .map(|(v, m)| grads.get_or_zeros(*v, m.shape()))
        .collect();
    Ok((tape.value(loss).get(0, 0), g))
}

/// Train a detector for `space`. `domains` groups the training images
/// (e.g. target GT versus transferred sources) for the batch strategy.
#[allow(clippy::too_many_arguments)]
pub fn train_toy_detector(
    detector_id: &str,
    dataset_id: &str,
    space: &LabelSpace,
    domains: &[Vec<DetSample<'_>>],
    target: Option<usize>,
    renderer: &Renderer,
    config: &DetectorConfig,
    workers: usize,
) -> Result<(ToyDetector, Vec<f64>)> {
    let feat_dim = renderer.descriptor_dim();
    let mut det = ToyDetector::untrained(detector_id, dataset_id, space, feat_dim, config);
    let k = space.len();
    if let Some(bad) = domains.iter().flatten().flat_map(|s| &s.labels).find(|d| d.class_id >= k) {
        return Err(Error::OutOfRange {
            index: bad.class_id,
            len: k,
        });
    }
    let sizes: Vec<usize> = domains.iter().map(Vec::len).collect();
    let grad = |params: &ParamSet, slot: &Slot| {
        let s = &domains[slot.domain][slot.index];
        let map = renderer.render(s.scene);
        let anchors = anchor_boxes(s.scene.width, s.scene.height, renderer.config.stride, &config.anchor_sizes);
        let (fg, bg) = assign(&anchors, &s.labels, config);
        let mut rng = seed::rng(slot.seed(config.train.seed), "anchors", 0);
        let n_fg = fg.len().min(config.max_foreground);
        let n_bg = bg.len().min(config.samples_per_image.saturating_sub(n_fg));
        let mut rows = Vec::with_capacity(n_fg + n_bg);
        let mut targets = Vec::with_capacity(n_fg + n_bg);
        let mut weights = Vec::with_capacity(n_fg + n_bg);
        let mut reg = Vec::with_capacity(4 * (n_fg + n_bg));
        let mut reg_rows = Vec::with_capacity(n_fg + n_bg);
        for i in sample(&mut rng, fg.len(), n_fg).into_vec() {
            let (a, j) = fg[i];
            let l = &s.labels[j];
            rows.push(anchors[a]);
            targets.push(l.class_id);
            weights.push(l.score);
            reg.extend_from_slice(&encode_deltas(&anchors[a], &l.bbox));
            reg_rows.push(1.0);
        }
        for i in sample(&mut rng, bg.len(), n_bg).into_vec() {
            rows.push(anchors[bg[i]]);
            targets.push(k);
            weights.push(1.0);
            reg.extend_from_slice(&[0.0; 4]);
            reg_rows.push(0.0);
        }
        let feats = region_features(&map, &rows);
        let reg_target = Matrix::new(rows.len(), 4, reg)?;
        detector_loss(params, feats, &targets, &weights, &reg_target, &reg_rows)
    };
    let out = run_sgd(det.params.clone(), &config.train, &sizes, target, workers, detector_id, grad)?;
    det.params = out.params;
    det.ema = out.ema.shadow().clone();
    Ok((det, out.losses))
}

/// AP of a detector on images with GT in its space.
pub fn evaluate_detector(
    det: &ToyDetector,
    images: &[(&SceneSpec, &[Detection])],
    renderer: &Renderer,
    workers: usize,
) -> Result<ApReport> {
    let preds = par_map(workers, images, |(scene, _)| {
        det.detect(&renderer.render(scene), scene.width, scene.height)
    })?;
    let gts: Vec<Vec<Detection>> = images.iter().map(|(_, g)| g.to_vec()).collect();
    evaluate_ap(&preds, &gts, det.space.len())
}

/// Ordered parallel map over a slice on a pool of `workers` threads.
pub(crate) fn par_map<T: Sync, U: Send>(
    workers: usize,
    items: &[T],
    f: impl Fn(&T) -> Result<U> + Sync + Send,
) -> Result<Vec<U>> {
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}

/// Detections of one dataset's images expressed in another label space.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    /// Dataset whose images are labeled.
    pub dataset_id: String,
    /// Space the labels are expressed in.
    pub space_id: String,
    pub source: String,
    pub tau: f64,
    pub nms_iou: f64,
    /// `(image_id, width, height)` in corpus order.
    pub images: Vec<(String, u32, u32)>,
    pub detections: BTreeMap<String, Vec<Detection>>,
}

impl PseudoLabelSet {
    pub fn file_name(&self) -> String {
        format!("{}__in__{}.json", self.dataset_id, self.space_id)
    }

    pub fn len(&self) -> usize {
        self.detections.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_corpus(&self, space: &LabelSpace) -> Corpus {
        let records = self
            .images
            .iter()
            .map(|(id, w, h)| {
                let mut r = ImageRecord::new(id.clone(), self.dataset_id.clone(), *w, *h);
                r.annotations
                    .insert(self.space_id.clone(), self.detections.get(id).cloned().unwrap_or_default());
                r
            })
            .collect();
        Corpus::new(vec![space.clone()], records)
    }
}

/// All pseudo-label sets of a run, in (dataset, space) registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoLabelSets {
    pub sets: Vec<PseudoLabelSet>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    dataset_id: String,
    space_id: String,
    source: String,
    tau: f64,
    nms_iou: f64,
    file: String,
}

pub const PSEUDO_INDEX: &str = "pseudo_labels.json";

impl PseudoLabelSets {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn get(&self, dataset_id: &str, space_id: &str) -> Option<&PseudoLabelSet> {
        self.sets
            .iter()
            .find(|s| s.dataset_id == dataset_id && s.space_id == space_id)
    }

    /// Per-space pseudo-labels of one image.
    pub fn for_image(&self, dataset_id: &str, image_id: &str) -> BTreeMap<String, Vec<Detection>> {
        self.sets
            .iter()
            .filter(|s| s.dataset_id == dataset_id)
            .map(|s| (s.space_id.clone(), s.detections.get(image_id).cloned().unwrap_or_default()))
            .collect()
    }

    /// One corpus file per set plus an index with the provenance of each.
    pub fn save(&self, dir: impl AsRef<Path>, spaces: &[LabelSpace]) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = Vec::new();
        for s in &self.sets {
            let space = spaces
                .iter()
                .find(|l| l.space_id == s.space_id)
                .ok_or_else(|| Error::Registry(format!("unknown label space `{}`", s.space_id)))?;
            annot::save_corpus(&s.to_corpus(space), dir.join(s.file_name()))?;
            index.push(IndexEntry {
                dataset_id: s.dataset_id.clone(),
                space_id: s.space_id.clone(),
                source: s.source.clone(),
                tau: s.tau,
                nms_iou: s.nms_iou,
                file: s.file_name(),
            });
        }
        let p = dir.join(PSEUDO_INDEX);
        let text = serde_json::to_string_pretty(&index)? + "\n";
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let p = dir.join(PSEUDO_INDEX);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let index: Vec<IndexEntry> = serde_json::from_str(&text)?;
        let mut sets = Vec::new();
        for e in index {
            let corpus = annot::load_corpus(dir.join(&e.file))?;
            let mut images = Vec::new();
            let mut detections = BTreeMap::new();
            for r in corpus.records {
                images.push((r.image_id.clone(), r.width, r.height));
                detections.insert(r.image_id.clone(), r.in_space(&e.space_id).to_vec());
            }
            sets.push(PseudoLabelSet {
                dataset_id: e.dataset_id,
                space_id: e.space_id,
                source: e.source,
                tau: e.tau,
                nms_iou: e.nms_iou,
                images,
                detections,
            });
        }
        Ok(PseudoLabelSets { sets })
    }
}

/// Images of one dataset to be pseudo-labeled.
#[derive(Debug, Clone, Copy)]
pub struct PlTarget<'a> {
    pub dataset_id: &'a str,
    pub space_id: &'a str,
    pub scenes: &'a [SceneSpec],
}

fn image_list(scenes: &[SceneSpec]) -> Vec<(String, u32, u32)> {
    scenes.iter().map(|s| (s.image_id.clone(), s.width, s.height)).collect()
}

/// Run every detector on every other dataset's images: N(N−1) sets.
/// Detections are thresholded at `tau` and suppressed at `nms_iou`.
pub fn generate_pseudo_labels(
    detectors: &[ToyDetector],
    datasets: &[PlTarget<'_>],
    renderer: &Renderer,
    tau: f64,
    nms_iou: f64,
    workers: usize,
) -> Result<PseudoLabelSets> {
    for d in datasets {
        if !detectors.iter().any(|m| m.space.space_id == d.space_id) {
            return Err(Error::Config(format!("no detector for label space `{}`", d.space_id)));
        }
    }
    let mut sets = Vec::new();
    for d in datasets {
        let others: Vec<&ToyDetector> = detectors.iter().filter(|m| m.space.space_id != d.space_id).collect();
        let per_image = par_map(workers, d.scenes, |scene| {
            let map = renderer.render(scene);
            let anchors = anchor_boxes(scene.width, scene.height, renderer.config.stride, &others[0].config.anchor_sizes);
            let feats = region_features(&map, &anchors);
            others
                .iter()
                .map(|m| {
                    let dets = if m.config.anchor_sizes == others[0].config.anchor_sizes {
                        m.detect_with(&anchors, &feats, scene.width, scene.height)?
                    } else {
                        m.detect(&map, scene.width, scene.height)?
                    };
                    Ok(nms(&filter_by_score(&dets, tau), nms_iou))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        for (k, m) in others.iter().enumerate() {
            let detections = d
                .scenes
                .iter()
                .zip(&per_image)
                .map(|(s, dets)| (s.image_id.clone(), dets[k].clone()))
                .collect();
            sets.push(PseudoLabelSet {
                dataset_id: d.dataset_id.to_string(),
                space_id: m.space.space_id.clone(),
                source: m.detector_id.clone(),
                tau,
                nms_iou,
                images: image_list(d.scenes),
                detections,
            });
        }
    }
    Ok(PseudoLabelSets { sets })
}

/// Corruptions applied by the oracle pseudo-labeler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct NoiseModel {
    /// Probability a true object is missed.
    pub p_drop: f64,
    /// Probability the class is replaced by a uniformly drawn other class.
    pub p_conf: f64,
    /// Std-dev of each corner offset, as a fraction of the box side.
    pub sigma_box: f64,
    /// Expected spurious detections per true object.
    pub p_spur: f64,
}

impl NoiseModel {
    pub fn is_zero(&self) -> bool {
        self.p_drop == 0.0 && self.p_conf == 0.0 && self.sigma_box == 0.0 && self.p_spur == 0.0
    }

    fn validate(&self) -> Result<()> {
        for (n, v) in [("p_drop", self.p_drop), ("p_conf", self.p_conf), ("p_spur", self.p_spur)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("noise {n} must lie in [0, 1]")));
            }
        }
        if !(self.sigma_box >= 0.0 && self.sigma_box.is_finite()) {
            return Err(Error::Config("noise sigma_box must be non-negative".into()));
        }
        Ok(())
    }
}

/// Score given to every label under zero noise.
pub const NOISELESS_SCORE: f64 = 0.99;

/// Oracle transport of the scene into `space_id`, corrupted by `noise`.
/// Scores follow Beta(8, 2) for correct labels and Beta(2, 3) for confused
/// or spurious ones.
pub fn corrupt_transport<R: Rng>(
    scene: &SceneSpec,
    taxonomy: &TaxonomyMap,
    space_id: &str,
    noise: &NoiseModel,
    source: &str,
    rng: &mut R,
) -> Result<Vec<Detection>> {
    let truth = taxonomy.transport(scene, space_id)?;
    if noise.is_zero() {
        return Ok(truth
            .into_iter()
            .map(|d| Detection::pseudo(d.bbox, d.class_id, NOISELESS_SCORE, source))
            .collect());
    }
    let k = taxonomy.space(space_id)?.classes.len();
    let good = Beta::new(8.0, 2.0).expect("valid beta");
    let bad = Beta::new(2.0, 3.0).expect("valid beta");
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let (w, h) = (f64::from(scene.width), f64::from(scene.height));
    let mut out = Vec::with_capacity(truth.len());
    for d in &truth {
        let dropped = rng.random_bool(noise.p_drop);
        let confused = k > 1 && rng.random_bool(noise.p_conf);
        let mut class = d.class_id;
        if confused {
            class = (d.class_id + rng.random_range(1..k)) % k;
        }
        let off: Vec<f64> = (0..4).map(|_| unit.sample(rng) * noise.sigma_box).collect();
        let (bw, bh) = (d.bbox.width(), d.bbox.height());
        let moved = BBox {
            x_min: d.bbox.x_min + off[0] * bw,
            y_min: d.bbox.y_min + off[1] * bh,
            x_max: d.bbox.x_max + off[2] * bw,
            y_max: d.bbox.y_max + off[3] * bh,
        };
        let bbox = moved.clip(w, h).unwrap_or(d.bbox);
        let score: f64 = if confused { bad.sample(rng) } else { good.sample(rng) };
        let spurious = rng.random_bool(noise.p_spur);
        if !dropped {
            out.push(Detection::pseudo(bbox, class, score.clamp(1e-6, 1.0 - 1e-6), source));
        }
        if spurious {
            let side = rng.random_range(16.0..48.0);
            let cx = rng.random_range(side / 2.0..w - side / 2.0);
            let cy = rng.random_range(side / 2.0..h - side / 2.0);
            let b = BBox::from_center(cx, cy, side, side * rng.random_range(0.75..1.33));
            if let Some(b) = b.clip(w, h) {
                let s: f64 = bad.sample(rng);
                out.push(Detection::pseudo(b, rng.random_range(0..k), s.clamp(1e-6, 1.0 - 1e-6), source));
            }
        }
    }
    Ok(out)
}

/// Noise-model stand-in for trained detectors: for every other space of the
/// taxonomy, the dataset's scenes transported into that space and corrupted.
pub fn oracle_pseudo_labels(
    target: &PlTarget<'_>,
    taxonomy: &TaxonomyMap,
    noise: &NoiseModel,
    seed: u64,
    tau: f64,
    nms_iou: f64,
) -> Result<Vec<PseudoLabelSet>> {
    noise.validate()?;
    let mut sets = Vec::new();
    for sp in &taxonomy.spaces {
        if sp.space_id == target.space_id {
            continue;
        }
        let source = format!("oracle:{}", sp.space_id);
        let mut detections = BTreeMap::new();
        for scene in target.scenes {
            let key = seed::str_key(&format!("{}/{}/{}", target.dataset_id, sp.space_id, scene.image_id));
            let mut rng = seed::rng(seed, "oracle-pl", key);
            let dets = corrupt_transport(scene, taxonomy, &sp.space_id, noise, &source, &mut rng)?;
            detections.insert(scene.image_id.clone(), nms(&filter_by_score(&dets, tau), nms_iou));
        }
        sets.push(PseudoLabelSet {
            dataset_id: target.dataset_id.to_string(),
            space_id: sp.space_id.clone(),
            source,
            tau,
            nms_iou,
            images: image_list(target.scenes),
            detections,
        });
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{generate_benchmark, presets};

    fn small_bench() -> crate::bench::Benchmark {
        generate_benchmark(&presets::granularity(12), 4).unwrap()
    }

    fn targets(b: &crate::bench::Benchmark) -> Vec<PlTarget<'_>> {
        b.datasets
            .iter()
            .map(|d| PlTarget {
                dataset_id: &d.dataset_id,
                space_id: &d.space_id,
                scenes: &d.scenes,
            })
            .collect()
    }

    #[test]
    fn anchors_cover_grid() {
        let a = anchor_boxes(256, 256, 8, &[16.0, 28.0, 44.0]);
        assert_eq!(a.len(), 32 * 32 * 3);
        assert!(a.iter().all(|b| b.x_min >= 0.0 && b.x_max <= 256.0));
    }

    #[test]
    fn zero_noise_oracle_is_identity_transport() {
        let b = small_bench();
        let t = targets(&b);
        let sets = oracle_pseudo_labels(&t[0], b.taxonomy(), &NoiseModel::default(), 1, 0.5, 0.5).unwrap();
        assert_eq!(sets.len(), 2);
        for s in &sets {
            for scene in &b.datasets[0].scenes {
                let truth = b.taxonomy().transport(scene, &s.space_id).unwrap();
                let got = &s.detections[&scene.image_id];
                assert_eq!(got.len(), truth.len());
                for g in got {
                    assert_eq!(g.score, NOISELESS_SCORE);
                    assert!(truth.iter().any(|d| d.bbox == g.bbox && d.class_id == g.class_id));
                }
            }
        }
    }

    #[test]
    fn full_drop_empties_sets() {
        let b = small_bench();
        let noise = NoiseModel {
            p_drop: 1.0,
            ..NoiseModel::default()
        };
        for s in oracle_pseudo_labels(&targets(&b)[1], b.taxonomy(), &noise, 1, 0.0, 0.5).unwrap() {
            assert!(s.is_empty());
        }
    }

    #[test]
    fn confusion_rate_concentrates() {
        let t = presets::granularity_taxonomy();
        let noise = NoiseModel {
            p_conf: 0.2,
            ..NoiseModel::default()
        };
        let mut rng = seed::rng(11, "conf", 0);
        let cfg = crate::bench::SceneConfig::default();
        let (mut n, mut wrong) = (0, 0);
        let mut i = 0;
        while n < 1000 {
            let scene = crate::bench::generate_scene(format!("c{i}"), &t, &cfg, &mut rng);
            i += 1;
            let truth = t.transport(&scene, "fine").unwrap();
            let got = corrupt_transport(&scene, &t, "fine", &noise, "o", &mut rng).unwrap();
            for (a, b) in truth.iter().zip(&got).take(1000 - n) {
                n += 1;
                wrong += usize::from(a.class_id != b.class_id);
            }
        }
        let rate = wrong as f64 / n as f64;
        assert!((0.17..=0.23).contains(&rate), "rate {rate}");
    }

    #[test]
    fn pseudo_sets_round_trip() {
        let b = small_bench();
        let mut sets = PseudoLabelSets::default();
        for t in targets(&b) {
            sets.sets.extend(oracle_pseudo_labels(&t, b.taxonomy(), &NoiseModel { sigma_box: 0.02, ..Default::default() }, 2, 0.5, 0.5).unwrap());
        }
        assert_eq!(sets.len(), 6);
        let dir = tempfile::tempdir().unwrap();
        sets.save(dir.path(), &b.taxonomy().label_spaces()).unwrap();
        assert!(dir.path().join("ds_coarse__in__fine.json").exists());
        let back = PseudoLabelSets::load(dir.path()).unwrap();
        assert_eq!(back.len(), 6);
        // values pass through the 9-digit writer; a second trip is exact
        let dir2 = tempfile::tempdir().unwrap();
        back.save(dir2.path(), &b.taxonomy().label_spaces()).unwrap();
        assert_eq!(PseudoLabelSets::load(dir2.path()).unwrap(), back);
    }

    #[test]
    fn untrained_detector_is_uniform_and_training_is_deterministic() {
        let b = small_bench();
        let r = b.renderer();
        let d = &b.datasets[2];
        let space = b.taxonomy().label_space(&d.space_id).unwrap();
        let det = ToyDetector::untrained("m", &d.dataset_id, &space, r.descriptor_dim(), &DetectorConfig::default());
        let map = r.render(&d.scenes[0]);
        let feats = region_features(&map, &[BBox::new(0.0, 0.0, 30.0, 30.0).unwrap()]);
        let (p, _) = det.predict(&feats, true).unwrap();
        assert!(p.row(0).iter().all(|&v| (v - 1.0 / 13.0).abs() < 1e-12));

        let samples: Vec<DetSample> = d
            .train
            .iter()
            .map(|&i| DetSample {
                scene: &d.scenes[i],
                labels: d.record(i).in_space(&d.space_id).to_vec(),
            })
            .collect();
        let mut cfg = DetectorConfig::default();
        cfg.train.iterations = 5;
        let domains = vec![samples];
        let (a, _) = train_toy_detector("m", "ds", &space, &domains, None, &r, &cfg, 1).unwrap();
        let (b2, _) = train_toy_detector("m", "ds", &space, &domains, None, &r, &cfg, 2).unwrap();
        assert_eq!(a, b2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        a.save(&p, "h").unwrap();
        assert_eq!(ToyDetector::load(&p).unwrap(), a);
    }
}
