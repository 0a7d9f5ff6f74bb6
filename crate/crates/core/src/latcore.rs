//! The transfer model: proposal fusion, masked heads, training and
//! inference-time transfer of annotations into a target label space.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annot::{decode_deltas, encode_deltas, iou, nms_indices, Corpus, Detection, ImageRecord};
use crate::bench::{ApReport, SceneSpec};
use crate::checkpoint::{self, CheckpointHeader};
use crate::detect::{evaluate_detector, par_map, region_features, train_toy_detector, DetSample, DetectorConfig, ToyDetector};
use crate::error::{Error, Result};
use crate::featsim::Renderer;
use crate::labelspace::{masked_softmax, GlobalIndex, LabelSpace};
use crate::numerics::{Matrix, ParamSet, Tape, Var};
use crate::ppg::{build_batch, confidence_vector, AugConfig, ProposalBatch};
use crate::seed;
use crate::sff::{fuse_on_tape, FusedVars, FusionTrace, SffConfig, SffParams, SffVars};
use crate::train::{run_sgd, Slot, TrainConfig};

/// Detector id recorded on transferred annotations.
pub const TRANSFER_SOURCE: &str = "lat";

/// How the box-regression outputs are laid out across label spaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegHead {
    /// One set of 4 deltas for every space.
    Shared,
    /// 4 deltas per space; a space's columns learn only from its own data.
    PerSpace,
    /// Shared deltas plus a per-space correction, summed.
    SharedResidual,
}

impl RegHead {
    fn width(self, n_spaces: usize) -> usize {
        match self {
            RegHead::Shared => 4,
            RegHead::PerSpace => 4 * n_spaces,
            RegHead::SharedResidual => 4 * (n_spaces + 1),
        }
    }

    /// Constant matrix mapping the regression outputs to the 4 deltas of
    /// the space at `pos`.
    fn selector(self, n_spaces: usize, pos: usize) -> Matrix {
        let mut s = Matrix::zeros(self.width(n_spaces), 4);
        for k in 0..4 {
            match self {
                RegHead::Shared => s.set(k, k, 1.0),
                RegHead::PerSpace => s.set(4 * pos + k, k, 1.0),
                RegHead::SharedResidual => {
                    s.set(k, k, 1.0);
                    s.set(4 * (pos + 1) + k, k, 1.0);
                }
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatConfig {
    pub sff: SffConfig,
    /// Width of the hidden layer shared by both heads.
    pub hidden: usize,
    /// Also add each proposal's own `C_m·W_Vc` to the head input, next to
    /// `V_r` and the fused output. Lets the regressor see which space a
    /// proposal came from, hence which box convention to undo.
    pub residual_scores: bool,
    pub reg_head: RegHead,
    pub aug: AugConfig,
    pub train: TrainConfig,
    /// Proposals at or above this IoU with a GT box take its class.
    pub match_iou: f64,
    /// Score threshold applied to transferred annotations.
    pub tau: f64,
    pub nms_iou: f64,
}

impl Default for LatConfig {
    fn default() -> Self {
        LatConfig {
            sff: SffConfig::default(),
            hidden: 64,
            residual_scores: true,
            reg_head: RegHead::PerSpace,
            aug: AugConfig::default(),
            train: TrainConfig {
                learning_rate: 0.2,
                ema_decay: 0.995,
                ..TrainConfig::default()
            },
            match_iou: 0.5,
            tau: 0.5,
            nms_iou: 0.5,
        }
    }
}

pub const PARAM_NAMES: [&str; 10] = [
    "w_q", "w_k", "w_vc", "w_vr", "w_h", "b_h", "w_cls", "b_cls", "w_reg", "b_reg",
];

/// Fusion projections, a shared hidden layer, a classifier over the
/// concatenated label spaces plus background, and one 4-delta regressor per
/// label space (box conventions differ between spaces).
#[derive(Debug, Clone, PartialEq)]
pub struct LatModel {
    pub index: GlobalIndex,
    pub feat_dim: usize,
    pub config: LatConfig,
    pub params: ParamSet,
    pub ema: ParamSet,
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `M × (total + 1)`, unmasked.
    pub logits: Matrix,
    /// `M × 4`, deltas for the requested space.
    pub deltas: Matrix,
    pub trace: FusionTrace,
}

struct Recorded {
    fused: FusedVars,
    logits: Var,
    deltas: Var,
}

#[allow(clippy::too_many_arguments)]
fn record_forward(
    tape: &mut Tape,
    vars: &[Var],
    x: Var,
    c: Var,
    s_c: &[f64],
    config: &SffConfig,
    threshold: f64,
    residual_scores: bool,
    select: Var,
) -> Result<Recorded> {
    let w = SffVars {
        w_q: vars[0],
        w_k: vars[1],
        w_vc: vars[2],
        w_vr: vars[3],
    };
    let fused = fuse_on_tape(tape, x, c, s_c, &w, config, threshold)?;
    let mut h = tape.add(fused.v_r, fused.sa)?;
    if residual_scores {
        // the proposal's own score row, unmixed by attention
        let own = tape.matmul(c, vars[2])?;
        h = tape.add(h, own)?;
    }
    let z = tape.linear(h, vars[4], vars[5])?;
    let z = tape.relu(z);
    let logits = tape.linear(z, vars[6], vars[7])?;
    let all = tape.linear(z, vars[8], vars[9])?;
    let deltas = tape.matmul(all, select)?;
    Ok(Recorded { fused, logits, deltas })
}

impl LatModel {
    pub fn init(index: GlobalIndex, feat_dim: usize, config: LatConfig) -> Result<Self> {
        if index.spaces().is_empty() {
            return Err(Error::Config("the transfer model needs at least one label space".into()));
        }
        if config.sff.dim == 0 || config.hidden == 0 {
            return Err(Error::Config("sff.dim and hidden must be positive".into()));
        }
        let n = index.spaces().len();
        let width = index.width();
        let mut rng = seed::rng(config.train.seed, "lat-init", 0);
        let sff = SffParams::init(feat_dim, width, n, config.sff.clone(), &mut rng);
        let d = config.sff.dim;
        let mut p = ParamSet::new();
        p.push("w_q", sff.w_q);
        p.push("w_k", sff.w_k);
        p.push("w_vc", sff.w_vc);
        p.push("w_vr", sff.w_vr);
        p.push_uniform("w_h", d, config.hidden, d, &mut rng);
        p.push("b_h", Matrix::zeros(1, config.hidden));
        p.push("w_cls", Matrix::zeros(config.hidden, width));
        p.push("b_cls", Matrix::zeros(1, width));
        let reg = config.reg_head.width(n);
        p.push("w_reg", Matrix::zeros(config.hidden, reg));
        p.push("b_reg", Matrix::zeros(1, reg));
        Ok(LatModel {
            index,
            feat_dim,
            config,
            ema: p.clone(),
            params: p,
        })
    }

    pub fn n_datasets(&self) -> usize {
        self.index.spaces().len()
    }

    pub fn threshold(&self) -> f64 {
        self.config.sff.t_rule.threshold(self.n_datasets())
    }

    /// The fusion projections as a standalone parameter block.
    pub fn sff_params(&self, use_ema: bool) -> SffParams {
        let v = if use_ema { &self.ema } else { &self.params }.values();
        SffParams {
            w_q: v[0].clone(),
            w_k: v[1].clone(),
            w_vc: v[2].clone(),
            w_vr: v[3].clone(),
            n_datasets: self.n_datasets(),
            config: self.config.sff.clone(),
        }
    }

    /// Logits over the full concatenated space and the regression deltas of
    /// `space_id` for every proposal of `batch`.
    pub fn forward(&self, roi: &Matrix, batch: &ProposalBatch, space_id: &str, use_ema: bool) -> Result<Forward> {
        if roi.rows() != batch.len() || roi.cols() != self.feat_dim {
            return Err(Error::Shape {
                op: "lat forward",
                lhs: roi.shape(),
                rhs: (batch.len(), self.feat_dim),
            });
        }
        let pos = self.index.position(space_id)?;
        let params = if use_ema { &self.ema } else { &self.params };
        let mut tape = Tape::new();
        let x = tape.leaf(roi.clone());
        let c = tape.leaf(batch.score_matrix());
        let vars: Vec<Var> = params.values().iter().map(|m| tape.leaf(m.clone())).collect();
        let select = tape.leaf(self.config.reg_head.selector(self.n_datasets(), pos));
        let t = self.threshold();
        let r = record_forward(&mut tape, &vars, x, c, &confidence_vector(batch), &self.config.sff, t, self.config.residual_scores, select)?;
        Ok(Forward {
            logits: tape.value(r.logits).clone(),
            deltas: tape.value(r.deltas).clone(),
            trace: FusionTrace {
                threshold: t,
                a: tape.value(r.fused.a).clone(),
                a_soft: tape.value(r.fused.a_soft).clone(),
                a_weighted: tape.value(r.fused.a_weighted).clone(),
                sa: tape.value(r.fused.sa).clone(),
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        let meta = serde_json::json!({
            "index": self.index,
            "feat_dim": self.feat_dim,
            "config": self.config,
        });
        let header = CheckpointHeader {
            kind: "lat_model".into(),
            names: self.params.names().to_vec(),
            shapes: self.params.shapes(),
            config_hash: config_hash.into(),
            seed: self.config.train.seed,
            meta,
        };
        checkpoint::save(path, &header, &self.params, &self.ema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header, params, ema) = checkpoint::load(path)?;
        if header.kind != "lat_model" || header.names != PARAM_NAMES {
            return Err(Error::Checkpoint(format!("expected a transfer model, found `{}`", header.kind)));
        }
        #[derive(Deserialize)]
        struct Meta {
            index: GlobalIndex,
            feat_dim: usize,
            config: LatConfig,
        }
        let m: Meta = serde_json::from_value(header.meta)?;
        let fresh = LatModel::init(m.index, m.feat_dim, m.config)?;
        if fresh.params.shapes() != params.shapes() {
            return Err(Error::Checkpoint("weight shapes disagree with the stored configuration".into()));
        }
        Ok(LatModel { params, ema, ..fresh })
    }
}

/// Per-proposal supervision derived from the image's GT in the current space.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTargets {
    /// Global class index, or the background slot.
    pub classes: Vec<usize>,
    /// Cross-entropy weights: the proposal confidences.
    pub weights: Vec<f64>,
    /// Box-delta targets; zero rows for unmatched proposals.
    pub reg: Matrix,
    /// 1 for matched proposals, 0 otherwise.
    pub reg_rows: Vec<f64>,
}

impl LossTargets {
    pub fn matched(&self) -> usize {
        self.reg_rows.iter().filter(|&&w| w > 0.0).count()
    }
}

/// Match every proposal to its best GT box of `space_id`; proposals below
/// `match_iou` (or in images without GT) are background.
pub fn loss_targets(
    batch: &ProposalBatch,
    gt: &[Detection],
    space_id: &str,
    index: &GlobalIndex,
    match_iou: f64,
) -> Result<LossTargets> {
    let m = batch.len();
    let mut classes = vec![index.background(); m];
    let mut reg = Matrix::zeros(m, 4);
    let mut reg_rows = vec![0.0; m];
    for (i, p) in batch.proposals.iter().enumerate() {
        let best = gt
            .iter()
            .map(|g| iou(&p.bbox, &g.bbox))
            .enumerate()
            .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            });
        if let Some((j, v)) = best {
            if v >= match_iou {
                classes[i] = index.to_global(space_id, gt[j].class_id)?;
                reg.row_mut(i).copy_from_slice(&encode_deltas(&p.bbox, &gt[j].bbox));
                reg_rows[i] = 1.0;
            }
        }
    }
    Ok(LossTargets {
        classes,
        weights: confidence_vector(batch),
        reg,
        reg_rows,
    })
}

fn record_loss(tape: &mut Tape, logits: Var, deltas: Var, t: &LossTargets, mask: &[bool]) -> Result<Var> {
    let ce = tape.weighted_cross_entropy(logits, &t.classes, &t.weights, Some(mask))?;
    let reg = tape.smooth_l1(deltas, &t.reg, &t.reg_rows, t.matched().max(1) as f64)?;
    tape.add(ce, reg)
}

/// Masked weighted cross-entropy plus smooth-L1 on matched proposals, for
/// given head outputs. Logits outside `space_id` (and background) do not
/// influence the value.
pub fn training_loss(
    logits: &Matrix,
    deltas: &Matrix,
    batch: &ProposalBatch,
    record: &ImageRecord,
    space_id: &str,
    index: &GlobalIndex,
    match_iou: f64,
) -> Result<f64> {
    let t = loss_targets(batch, record.in_space(space_id), space_id, index, match_iou)?;
    let mask = index.space_mask(space_id)?;
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let d = tape.leaf(deltas.clone());
    let loss = record_loss(&mut tape, l, d, &t, &mask)?;
    Ok(tape.value(loss).get(0, 0))
}

/// Loss and parameter gradients of one image.
pub fn loss_and_grads(
    params: &ParamSet,
    roi: &Matrix,
    batch: &ProposalBatch,
    targets: &LossTargets,
    space_pos: usize,
    index: &GlobalIndex,
    config: &LatConfig,
) -> Result<(f64, Vec<Matrix>)> {
    let n = index.spaces().len();
    let mask = index.space_mask(&index.spaces()[space_pos].space_id)?;
    let mut tape = Tape::new();
    let x = tape.leaf(roi.clone());
    let c = tape.leaf(batch.score_matrix());
    let vars: Vec<Var> = params.values().iter().map(|m| tape.leaf(m.clone())).collect();
    let select = tape.leaf(config.reg_head.selector(n, space_pos));
    let t = config.sff.t_rule.threshold(n);
    let r = record_forward(&mut tape, &vars, x, c, &targets.weights, &config.sff, t, config.residual_scores, select)?;
    let loss = record_loss(&mut tape, r.logits, r.deltas, targets, &mask)?;
    let grads = tape.backward(loss);
    let g = vars
        .iter()
        .zip(params.values())
        .map(|(v, m)| grads.get_or_zeros(*v, m.shape()))
        .collect();
    Ok((tape.value(loss).get(0, 0), g))
}

/// One image as seen by the transfer model: its scene (for features), its
/// annotation record, its native space and the pseudo-labels of the other
/// spaces.
#[derive(Debug, Clone)]
pub struct LatItem<'a> {
    pub scene: &'a SceneSpec,
    pub record: &'a ImageRecord,
    pub space_id: &'a str,
    pub pseudo: BTreeMap<String, Vec<Detection>>,
}

/// Train on images grouped into `domains` (one per dataset); `target` is
/// the domain favored by the batch strategy.
pub fn train_lat(
    index: GlobalIndex,
    domains: &[Vec<LatItem<'_>>],
    target: Option<usize>,
    renderer: &Renderer,
    config: &LatConfig,
    workers: usize,
) -> Result<(LatModel, Vec<f64>)> {
    let mut model = LatModel::init(index, renderer.descriptor_dim(), config.clone())?;
    let positions: Vec<Vec<usize>> = domains
        .iter()
        .map(|d| d.iter().map(|it| model.index.position(it.space_id)).collect())
        .collect::<Result<_>>()?;
    let sizes: Vec<usize> = domains.iter().map(Vec::len).collect();
    let index = &model.index;
    let grad = |params: &ParamSet, slot: &Slot| {
        let item = &domains[slot.domain][slot.index];
        let batch = build_batch(item.record, item.space_id, &item.pseudo, index, &config.aug, slot.seed(config.train.seed))?;
        if batch.is_empty() {
            return Ok((0.0, params.zeros_like()));
        }
        let roi = region_features(&renderer.render(item.scene), &batch.boxes());
        let targets = loss_targets(&batch, item.record.in_space(item.space_id), item.space_id, index, config.match_iou)?;
        loss_and_grads(params, &roi, &batch, &targets, positions[slot.domain][slot.index], index, config)
    };
    let out = run_sgd(model.params.clone(), &config.train, &sizes, target, workers, "transfer model", grad)?;
    model.params = out.params;
    model.ema = out.ema.shadow().clone();
    Ok((model, out.losses))
}

/// Annotations of one image in `target_space`: per proposal the most likely
/// class among the target classes and background; background winners are
/// dropped, survivors take their target-space box and are thresholded and
/// suppressed.
pub fn infer_image(
    model: &LatModel,
    roi: &Matrix,
    batch: &ProposalBatch,
    target_space: &str,
) -> Result<(Vec<Detection>, FusionTrace)> {
    let mask = model.index.space_mask(target_space)?;
    let offset = model.index.slice(target_space)?.start;
    let bg = model.index.background();
    let f = model.forward(roi, batch, target_space, true)?;
    let (w, h) = (f64::from(batch.width), f64::from(batch.height));
    let mut dets = Vec::new();
    let mut rank = Vec::new();
    for (i, p) in batch.proposals.iter().enumerate() {
        let probs = masked_softmax(f.logits.row(i), &mask);
        let (best, score) = probs
            .iter()
            .enumerate()
            .filter(|(j, _)| mask[*j])
            .fold((bg, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
        if best == bg {
            continue;
        }
        if score < model.config.tau {
            continue;
        }
        if let Some(b) = decode_deltas(&p.bbox, f.deltas.row(i)).clip(w, h) {
            dets.push(Detection::pseudo(b, best - offset, score, TRANSFER_SOURCE));
            rank.push(Detection::pseudo(b, best - offset, score * p.confidence, TRANSFER_SOURCE));
        }
    }
    // suppression prefers boxes grown from more reliable proposals
    let kept = nms_indices(&rank, model.config.nms_iou);
    Ok((kept.into_iter().map(|i| dets[i].clone()).collect(), f.trace))
}

/// Result of transferring a set of images.
#[derive(Debug, Clone)]
pub struct Transfer {
    pub target_space: String,
    /// One record per input image, annotated in the target space only.
    pub records: Vec<ImageRecord>,
    /// Per-image fusion traces, when requested.
    pub traces: Vec<(String, FusionTrace)>,
}

impl Transfer {
    pub fn corpus(&self, space: &LabelSpace) -> Corpus {
        Corpus::new(vec![space.clone()], self.records.clone())
    }
}

/// Re-express every image's annotations in `target_space` with the EMA
/// weights. Proposals are the unaugmented GT plus all pseudo-labels.
pub fn transfer_annotations(
    model: &LatModel,
    items: &[LatItem<'_>],
    target_space: &str,
    renderer: &Renderer,
    workers: usize,
    keep_traces: bool,
) -> Result<Transfer> {
    model.index.position(target_space)?;
    let none = AugConfig::none();
    let out = par_map(workers, items, |it| {
        let batch = build_batch(it.record, it.space_id, &it.pseudo, &model.index, &none, 0)?;
        let mut rec = ImageRecord::new(it.record.image_id.clone(), it.record.dataset_id.clone(), it.record.width, it.record.height);
        if batch.is_empty() {
            rec.annotations.insert(target_space.to_string(), Vec::new());
            return Ok((rec, None));
        }
        let roi = region_features(&renderer.render(it.scene), &batch.boxes());
        let (dets, trace) = infer_image(model, &roi, &batch, target_space)?;
        rec.annotations.insert(target_space.to_string(), dets);
        Ok((rec, keep_traces.then_some(trace)))
    })?;
    let mut records = Vec::with_capacity(out.len());
    let mut traces = Vec::new();
    for (rec, trace) in out {
        if let Some(t) = trace {
            traces.push((rec.image_id.clone(), t));
        }
        records.push(rec);
    }
    Ok(Transfer {
        target_space: target_space.to_string(),
        records,
        traces,
    })
}

/// A trained downstream detector and its score on the held-out images.
#[derive(Debug, Clone)]
pub struct Downstream {
    pub detector: ToyDetector,
    pub losses: Vec<f64>,
    pub report: ApReport,
}

/// Train a detector in the target space on target GT (domain 0) plus any
/// extra labeled domains, then evaluate it on `eval` images. Annotation
/// scores act as classification weights.
pub fn train_downstream(
    detector_id: &str,
    space: &LabelSpace,
    domains: &[Vec<DetSample<'_>>],
    eval: &[(&SceneSpec, &[Detection])],
    renderer: &Renderer,
    config: &DetectorConfig,
    workers: usize,
) -> Result<Downstream> {
    let (detector, losses) = train_toy_detector(detector_id, detector_id, space, domains, Some(0), renderer, config, workers)?;
    let report = evaluate_detector(&detector, eval, renderer, workers)?;
    Ok(Downstream {
        detector,
        losses,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annot::BBox;
    use crate::numerics::finite_diff_check;
    use crate::ppg::Proposal;
    use crate::sff::variants;
    use rand::Rng;

    fn index() -> GlobalIndex {
        let sp = |id: &str, n: usize| LabelSpace::new(id, (0..n).map(|i| format!("{id}{i}")).collect()).unwrap();
        GlobalIndex::build(vec![sp("a", 2), sp("b", 3), sp("c", 4)]).unwrap()
    }

    fn random_batch(idx: &GlobalIndex, m: usize, rng: &mut impl Rng) -> ProposalBatch {
        let width = idx.width();
        let proposals = (0..m)
            .map(|i| {
                let x = rng.random_range(0.0..80.0);
                let y = rng.random_range(0.0..80.0);
                let bbox = BBox::new(x, y, x + rng.random_range(8.0..30.0), y + rng.random_range(8.0..30.0)).unwrap();
                let g = rng.random_range(0..idx.total());
                let conf = if i < 2 { 1.0 } else { rng.random_range(0.3..0.95) };
                let mut scores = vec![0.0; width];
                scores[g] = conf;
                Proposal {
                    bbox,
                    global_class: g,
                    scores,
                    confidence: conf,
                    is_gt: i < 2,
                    jittered: false,
                }
            })
            .collect();
        ProposalBatch {
            image_id: "x".into(),
            dataset_id: "d".into(),
            width: 128,
            height: 128,
            proposals,
        }
    }

    fn random_params(idx: &GlobalIndex, f: usize, cfg: &LatConfig, rng: &mut impl Rng) -> ParamSet {
        let mut p = LatModel::init(idx.clone(), f, cfg.clone()).unwrap().params;
        for m in p.values_mut() {
            m.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
        }
        p
    }

    #[test]
    fn shapes_and_uniform_start() {
        let idx = index();
        let model = LatModel::init(idx.clone(), 12, LatConfig::default()).unwrap();
        let mut rng = seed::rng(1, "t", 0);
        let b = random_batch(&idx, 5, &mut rng);
        let roi = Matrix::new(5, 12, (0..60).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let f = model.forward(&roi, &b, "b", true).unwrap();
        assert_eq!(f.logits.shape(), (5, idx.total() + 1));
        assert_eq!(f.deltas.shape(), (5, 4));
        let p = masked_softmax(f.logits.row(0), &vec![true; idx.width()]);
        assert!(p.iter().all(|&v| (v - 1.0 / idx.width() as f64).abs() < 1e-12));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let idx = index();
        let mut rng = seed::rng(5, "gc", 0);
        for sff in variants(&SffConfig { dim: 6, ..SffConfig::default() }) {
            let cfg = LatConfig {
                sff,
                hidden: 5,
                residual_scores: rng.random_bool(0.5),
                reg_head: [RegHead::Shared, RegHead::PerSpace, RegHead::SharedResidual][rng.random_range(0..3)],
                ..LatConfig::default()
            };
            let b = random_batch(&idx, 6, &mut rng);
            let mut gt = ImageRecord::new("x", "d", 128, 128);
            gt.annotations.insert(
                "b".into(),
                vec![
                    Detection::ground_truth(b.proposals[0].bbox, 1),
                    Detection::ground_truth(b.proposals[3].bbox, 2),
                ],
            );
            let roi = Matrix::new(6, 10, (0..60).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let p = random_params(&idx, 10, &cfg, &mut rng);
            let t = loss_targets(&b, gt.in_space("b"), "b", &idx, 0.5).unwrap();
            assert!(t.matched() >= 2);
            let (_, g) = loss_and_grads(&p, &roi, &b, &t, 1, &idx, &cfg).unwrap();
            let f = |vals: &[Matrix]| {
                let mut q = p.clone();
                q.values_mut().clone_from_slice(vals);
                loss_and_grads(&q, &roi, &b, &t, 1, &idx, &cfg).unwrap().0
            };
            let err = finite_diff_check(f, p.values(), &g, 1e-6);
            assert!(err < 1e-4, "{}: {err}", cfg.sff.variant_name());
        }
    }

    #[test]
    fn out_of_mask_logits_do_not_matter() {
        let idx = index();
        let mut rng = seed::rng(9, "mask", 0);
        let b = random_batch(&idx, 4, &mut rng);
        let mut rec = ImageRecord::new("x", "d", 128, 128);
        rec.annotations.insert("c".into(), vec![Detection::ground_truth(b.proposals[1].bbox, 3)]);
        let logits = Matrix::new(4, idx.width(), (0..4 * idx.width()).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let deltas = Matrix::filled(4, 4, 0.1);
        let base = training_loss(&logits, &deltas, &b, &rec, "c", &idx, 0.5).unwrap();
        let mask = idx.space_mask("c").unwrap();
        let mut bumped = logits.clone();
        for r in 0..4 {
            for (j, &m) in mask.iter().enumerate() {
                if !m {
                    bumped.set(r, j, rng.random_range(-1e3..1e3));
                }
            }
        }
        assert_eq!(training_loss(&bumped, &deltas, &b, &rec, "c", &idx, 0.5).unwrap().to_bits(), base.to_bits());
    }

    #[test]
    fn unmatched_proposals_are_background_without_regression() {
        let idx = index();
        let mut rng = seed::rng(3, "bg", 0);
        let b = random_batch(&idx, 3, &mut rng);
        let far = Detection::ground_truth(BBox::new(500.0, 500.0, 520.0, 520.0).unwrap(), 0);
        let t = loss_targets(&b, &[far], "a", &idx, 0.5).unwrap();
        assert!(t.classes.iter().all(|&c| c == idx.background()));
        assert_eq!(t.matched(), 0);
        let own = Detection::ground_truth(b.proposals[0].bbox, 1);
        let t = loss_targets(&b, &[own], "a", &idx, 0.5).unwrap();
        assert_eq!(t.classes[0], idx.to_global("a", 1).unwrap());
        assert_eq!(t.weights[0], 1.0);
        assert_eq!(t.reg.row(0), &[0.0; 4]);
    }

    #[test]
    fn checkpoint_reproduces_forward() {
        let idx = index();
        let mut rng = seed::rng(4, "ck", 0);
        let cfg = LatConfig::default();
        let mut model = LatModel::init(idx.clone(), 8, cfg.clone()).unwrap();
        model.params = random_params(&idx, 8, &cfg, &mut rng);
        model.ema = random_params(&idx, 8, &cfg, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lat.ckpt");
        model.save(&p, "hash").unwrap();
        let back = LatModel::load(&p).unwrap();
        assert_eq!(back, model);
        let b = random_batch(&idx, 5, &mut rng);
        let roi = Matrix::new(5, 8, (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (x, y) = (model.forward(&roi, &b, "c", true).unwrap(), back.forward(&roi, &b, "c", true).unwrap());
        assert_eq!(x.logits, y.logits);
        assert_eq!(x.deltas, y.deltas);
    }
}
