//! End-to-end runs on a synthetic benchmark: pseudo-labels, transfer-model
//! training, transfer, and downstream comparisons against the baselines.

use serde::{Deserialize, Serialize};

use crate::annot::Detection;
use crate::bench::{mapping_recovery, ApReport, BenchDataset, Benchmark, MappingRecovery, SceneSpec};
use crate::detect::{
    generate_pseudo_labels, oracle_pseudo_labels, train_toy_detector, DetSample, DetectorConfig, NoiseModel, PlTarget,
    PseudoLabelSets, ToyDetector,
};
use crate::error::Result;
use crate::latcore::{train_downstream, train_lat, transfer_annotations, LatConfig, LatItem, LatModel, Transfer};
use crate::labelspace::GlobalIndex;

/// Which images of a dataset to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
    All,
}

pub fn split_indices(ds: &BenchDataset, split: Split) -> Vec<usize> {
    match split {
        Split::Train => ds.train.clone(),
        Split::Eval => ds.eval.clone(),
        Split::All => (0..ds.len()).collect(),
    }
}

pub fn pl_targets(bench: &Benchmark) -> Vec<PlTarget<'_>> {
    bench
        .datasets
        .iter()
        .map(|d| PlTarget {
            dataset_id: &d.dataset_id,
            space_id: &d.space_id,
            scenes: &d.scenes,
        })
        .collect()
}

pub fn global_index(bench: &Benchmark) -> Result<GlobalIndex> {
    GlobalIndex::build(bench.taxonomy().label_spaces())
}

/// N(N−1) oracle pseudo-label sets.
pub fn oracle_sets(bench: &Benchmark, noise: &NoiseModel, seed: u64, tau: f64, nms_iou: f64) -> Result<PseudoLabelSets> {
    let mut sets = PseudoLabelSets::default();
    for t in pl_targets(bench) {
        sets.sets.extend(oracle_pseudo_labels(&t, bench.taxonomy(), noise, seed, tau, nms_iou)?);
    }
    Ok(sets)
}

/// Train one detector per dataset on its train split with native GT.
pub fn train_detectors(bench: &Benchmark, config: &DetectorConfig, workers: usize) -> Result<Vec<(ToyDetector, Vec<f64>)>> {
    let renderer = bench.renderer();
    bench
        .datasets
        .iter()
        .map(|ds| {
            let space = bench.taxonomy().label_space(&ds.space_id)?;
            let samples = gt_samples(ds, Split::Train);
            train_toy_detector(&format!("det:{}", ds.dataset_id), &ds.dataset_id, &space, &[samples], None, &renderer, config, workers)
        })
        .collect()
}

/// Pseudo-labels from trained detectors.
pub fn detector_sets(bench: &Benchmark, detectors: &[ToyDetector], tau: f64, nms_iou: f64, workers: usize) -> Result<PseudoLabelSets> {
    generate_pseudo_labels(detectors, &pl_targets(bench), &bench.renderer(), tau, nms_iou, workers)
}

/// Native GT of a split as detector training samples.
pub fn gt_samples(ds: &BenchDataset, split: Split) -> Vec<DetSample<'_>> {
    split_indices(ds, split)
        .into_iter()
        .map(|i| DetSample {
            scene: &ds.scenes[i],
            labels: ds.record(i).in_space(&ds.space_id).to_vec(),
        })
        .collect()
}

pub fn lat_items<'a>(ds: &'a BenchDataset, pseudo: &PseudoLabelSets, split: Split) -> Vec<LatItem<'a>> {
    split_indices(ds, split)
        .into_iter()
        .map(|i| LatItem {
            scene: &ds.scenes[i],
            record: ds.record(i),
            space_id: &ds.space_id,
            pseudo: pseudo.for_image(&ds.dataset_id, &ds.scenes[i].image_id),
        })
        .collect()
}

/// Train the transfer model on every dataset's train split; batches favor
/// the dataset annotated in `target_space`.
pub fn fit_lat(bench: &Benchmark, pseudo: &PseudoLabelSets, target_space: &str, config: &LatConfig, workers: usize) -> Result<(LatModel, Vec<f64>)> {
    let domains: Vec<Vec<LatItem>> = bench.datasets.iter().map(|d| lat_items(d, pseudo, Split::Train)).collect();
    let target = bench.datasets.iter().position(|d| d.space_id == target_space);
    train_lat(global_index(bench)?, &domains, target, &bench.renderer(), config, workers)
}

/// Transfer all images of the given datasets into `target_space`.
pub fn transfer_datasets(
    bench: &Benchmark,
    model: &LatModel,
    pseudo: &PseudoLabelSets,
    dataset_ids: &[&str],
    target_space: &str,
    workers: usize,
    keep_traces: bool,
) -> Result<Vec<(String, Transfer)>> {
    let renderer = bench.renderer();
    dataset_ids
        .iter()
        .map(|id| {
            let ds = bench.dataset(id)?;
            let items = lat_items(ds, pseudo, Split::All);
            Ok((id.to_string(), transfer_annotations(model, &items, target_space, &renderer, workers, keep_traces)?))
        })
        .collect()
}

/// Agreement of a transfer with the oracle transport of the same scenes.
pub fn recovery(bench: &Benchmark, dataset_id: &str, transfer: &Transfer) -> Result<MappingRecovery> {
    let ds = bench.dataset(dataset_id)?;
    let oracle = ds
        .scenes
        .iter()
        .map(|s| bench.taxonomy().transport(s, &transfer.target_space))
        .collect::<Result<Vec<_>>>()?;
    let got: Vec<Vec<Detection>> = transfer
        .records
        .iter()
        .map(|r| r.in_space(&transfer.target_space).to_vec())
        .collect();
    let k = bench.taxonomy().space(&transfer.target_space)?.classes.len();
    Ok(mapping_recovery(&got, &oracle, k))
}

/// Downstream scores of the three training regimes on one target dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub target_dataset: String,
    pub target_space: String,
    pub baseline: ApReport,
    pub pseudo_label: ApReport,
    pub lat: ApReport,
}

impl Comparison {
    pub fn rows(&self) -> [(&'static str, &ApReport); 3] {
        [("baseline", &self.baseline), ("pseudo_label", &self.pseudo_label), ("lat", &self.lat)]
    }

    /// mAP ordering LAT > pseudo-label > baseline.
    pub fn ordered(&self) -> bool {
        self.lat.map > self.pseudo_label.map && self.pseudo_label.map > self.baseline.map
    }

    pub fn table(&self) -> String {
        let mut out = format!("target {} ({})\n{:<14}{:>8}{:>8}\n", self.target_dataset, self.target_space, "method", "AP50", "mAP");
        for (name, r) in self.rows() {
            out.push_str(&format!("{:<14}{:>8.1}{:>8.1}\n", name, 100.0 * r.map50, 100.0 * r.map));
        }
        out
    }
}

fn samples_from(ds: &BenchDataset, per_image: impl Fn(usize) -> Vec<Detection>) -> Vec<DetSample<'_>> {
    (0..ds.len())
        .map(|i| DetSample {
            scene: &ds.scenes[i],
            labels: per_image(i),
        })
        .collect()
}

/// Domains for the three regimes: target GT alone; plus naive pseudo-labels
/// of the source images in the target space; plus their transferred labels.
pub struct RegimeData<'a> {
    pub baseline: Vec<Vec<DetSample<'a>>>,
    pub pseudo_label: Vec<Vec<DetSample<'a>>>,
    pub lat: Vec<Vec<DetSample<'a>>>,
    pub eval: Vec<(&'a SceneSpec, &'a [Detection])>,
}

pub fn regime_data<'a>(
    bench: &'a Benchmark,
    pseudo: &PseudoLabelSets,
    transfers: &[(String, Transfer)],
    target_dataset: &str,
) -> Result<RegimeData<'a>> {
    let target = bench.dataset(target_dataset)?;
    let space = &target.space_id;
    let gt = gt_samples(target, Split::Train);
    let mut pl = vec![gt.clone()];
    let mut lat = vec![gt.clone()];
    for ds in bench.datasets.iter().filter(|d| d.dataset_id != target_dataset) {
        let set = pseudo.get(&ds.dataset_id, space);
        pl.push(samples_from(ds, |i| {
            set.and_then(|s| s.detections.get(&ds.scenes[i].image_id)).cloned().unwrap_or_default()
        }));
        if let Some((_, t)) = transfers.iter().find(|(id, _)| *id == ds.dataset_id) {
            lat.push(samples_from(ds, |i| t.records[i].in_space(space).to_vec()));
        }
    }
    let eval = target
        .eval
        .iter()
        .map(|&i| (&target.scenes[i], target.record(i).in_space(space)))
        .collect();
    Ok(RegimeData {
        baseline: vec![gt],
        pseudo_label: pl,
        lat,
        eval,
    })
}

/// Train the transfer model, transfer the sources into the target space,
/// then train and evaluate a downstream detector per regime.
pub fn compare_methods(
    bench: &Benchmark,
    pseudo: &PseudoLabelSets,
    target_dataset: &str,
    lat_config: &LatConfig,
    det_config: &DetectorConfig,
    workers: usize,
) -> Result<Comparison> {
    let target = bench.dataset(target_dataset)?;
    let space_id = target.space_id.clone();
    let (model, _) = fit_lat(bench, pseudo, &space_id, lat_config, workers)?;
    let sources: Vec<&str> = bench
        .datasets
        .iter()
        .filter(|d| d.dataset_id != target_dataset)
        .map(|d| d.dataset_id.as_str())
        .collect();
    let transfers = transfer_datasets(bench, &model, pseudo, &sources, &space_id, workers, false)?;
    let data = regime_data(bench, pseudo, &transfers, target_dataset)?;
    let space = bench.taxonomy().label_space(&space_id)?;
    let renderer = bench.renderer();
    let run = |name: &str, domains: &[Vec<DetSample>]| {
        train_downstream(name, &space, domains, &data.eval, &renderer, det_config, workers).map(|d| d.report)
    };
    Ok(Comparison {
        target_dataset: target_dataset.to_string(),
        target_space: space_id.clone(),
        baseline: run("baseline", &data.baseline)?,
        pseudo_label: run("pseudo_label", &data.pseudo_label)?,
        lat: run("lat", &data.lat)?,
    })
}

/// One row of the fusion-variant ablation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    /// Class accuracy of the transferred source labels against the oracle.
    pub transfer_accuracy: f64,
    pub transfer_iou: f64,
    pub downstream: ApReport,
}

/// Downstream LAT-regime score of one transfer-model configuration, plus
/// the oracle agreement of its transferred labels.
pub fn lat_regime(
    bench: &Benchmark,
    pseudo: &PseudoLabelSets,
    target_dataset: &str,
    lat_config: &LatConfig,
    det_config: &DetectorConfig,
    workers: usize,
) -> Result<(f64, f64, ApReport)> {
    let space_id = bench.dataset(target_dataset)?.space_id.clone();
    let (model, _) = fit_lat(bench, pseudo, &space_id, lat_config, workers)?;
    let sources: Vec<&str> = bench
        .datasets
        .iter()
        .filter(|d| d.dataset_id != target_dataset)
        .map(|d| d.dataset_id.as_str())
        .collect();
    let transfers = transfer_datasets(bench, &model, pseudo, &sources, &space_id, workers, false)?;
    let (mut correct, mut expected, mut matched, mut iou_sum) = (0, 0, 0, 0.0);
    for (id, t) in &transfers {
        let r = recovery(bench, id, t)?;
        correct += r.correct;
        expected += r.oracle_count;
        matched += r.matched;
        iou_sum += r.mean_iou * r.matched as f64;
    }
    let data = regime_data(bench, pseudo, &transfers, target_dataset)?;
    let space = bench.taxonomy().label_space(&space_id)?;
    let d = train_downstream("lat", &space, &data.lat, &data.eval, &bench.renderer(), det_config, workers)?;
    let acc = if expected == 0 { 1.0 } else { correct as f64 / expected as f64 };
    let iou = if matched == 0 { 0.0 } else { iou_sum / matched as f64 };
    Ok((acc, iou, d.report))
}

/// The four clamping/scaling × 1/N, 1/√N variants under identical seeds.
pub fn ablate_sff(
    bench: &Benchmark,
    pseudo: &PseudoLabelSets,
    target_dataset: &str,
    lat_config: &LatConfig,
    det_config: &DetectorConfig,
    workers: usize,
) -> Result<Vec<VariantResult>> {
    crate::sff::variants(&lat_config.sff)
        .into_iter()
        .map(|sff| {
            let cfg = LatConfig {
                sff: sff.clone(),
                ..lat_config.clone()
            };
            let (acc, iou, report) = lat_regime(bench, pseudo, target_dataset, &cfg, det_config, workers)?;
            Ok(VariantResult {
                variant: sff.variant_name(),
                transfer_accuracy: acc,
                transfer_iou: iou,
                downstream: report,
            })
        })
        .collect()
}

pub fn variant_table(rows: &[VariantResult]) -> String {
    let mut out = format!("{:<22}{:>10}{:>10}{:>8}{:>8}\n", "variant", "xfer acc", "xfer IoU", "AP50", "mAP");
    for r in rows {
        out.push_str(&format!(
            "{:<22}{:>10.3}{:>10.3}{:>8.1}{:>8.1}\n",
            r.variant,
            r.transfer_accuracy,
            r.transfer_iou,
            100.0 * r.downstream.map50,
            100.0 * r.downstream.map
        ));
    }
    out
}
