//! Stage orchestration. Every stage reads earlier artifacts from the run
//! directory, writes only below its own subdirectory, and records a
//! `manifest.json` with the config hash, seed and input/output digests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annot::{load_corpus, save_corpus};
use crate::bench::{generate_benchmark, presets, BenchConfig, Benchmark};
use crate::detect::{evaluate_detector, DetectorConfig, NoiseModel, PseudoLabelSets, ToyDetector};
use crate::error::{Error, Result};
use crate::experiment::{
    ablate_sff, detector_sets, fit_lat, gt_samples, oracle_sets, recovery, regime_data, train_detectors, transfer_datasets,
    variant_table, Comparison, Split, VariantResult,
};
use crate::latcore::{train_downstream, LatConfig, LatModel, Transfer};
use crate::seed;
use crate::train::Strategy;

/// Where the datasets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetsConfig {
    /// `granularity` or `size_disparity`; ignored when `dir` is set.
    #[serde(default = "default_preset")]
    pub preset: String,
    /// Per-dataset image counts for the preset.
    #[serde(default)]
    pub counts: Option<Vec<usize>>,
    /// A benchmark directory written by `gen-bench`, used instead of a preset.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Feature-synthesis overrides for presets.
    #[serde(default)]
    pub features: Option<crate::featsim::FeatureConfig>,
}

fn default_preset() -> String {
    "granularity".into()
}

impl Default for DatasetsConfig {
    fn default() -> Self {
        DatasetsConfig {
            preset: default_preset(),
            counts: None,
            dir: None,
            features: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoSource {
    /// Trained stage-1 detectors.
    Detectors,
    /// Oracle transport corrupted by `noise` (synthetic data only).
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoConfig {
    pub source: PseudoSource,
    pub tau: f64,
    pub nms_iou: f64,
    pub noise: NoiseModel,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        PseudoConfig {
            source: PseudoSource::Detectors,
            tau: 0.5,
            nms_iou: 0.5,
            noise: NoiseModel::default(),
        }
    }
}

fn default_downstream() -> DetectorConfig {
    let mut d = DetectorConfig::default();
    d.train.iterations = 8000;
    d.train.learning_rate = 0.1;
    d
}

/// Stage-1 detector settings plus the self-AP floor they must reach.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorsConfig {
    #[serde(flatten)]
    pub detector: DetectorConfig,
    /// Minimum AP@0.5 on the detector's own training split.
    pub ap_floor: f64,
}

impl Default for DetectorsConfig {
    fn default() -> Self {
        let mut detector = DetectorConfig::default();
        detector.train.iterations = 8000;
        detector.train.learning_rate = 0.1;
        DetectorsConfig { detector, ap_floor: 0.6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub target_space: String,
    #[serde(default)]
    pub datasets: DatasetsConfig,
    #[serde(default)]
    pub pseudo: PseudoConfig,
    #[serde(default)]
    pub detectors: DetectorsConfig,
    #[serde(default)]
    pub lat: LatConfig,
    #[serde(default = "default_downstream")]
    pub downstream: DetectorConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    /// Parse a config file; relative paths are taken from its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: &Path) {
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
        if let Some(d) = self.datasets.dir.as_mut() {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if let Some(d) = &self.datasets.dir {
            if !d.join("bench.json").exists() {
                return Err(Error::MissingInput {
                    stage: "config".into(),
                    path: d.join("bench.json"),
                });
            }
        } else {
            let spaces = self.bench_config()?.taxonomy.label_spaces();
            if !spaces.iter().any(|s| s.space_id == self.target_space) {
                let ids: Vec<_> = spaces.iter().map(|s| s.space_id.as_str()).collect();
                return bad(format!("target_space `{}` is not one of {ids:?}", self.target_space));
            }
        }
        for (n, v) in [("pseudo.tau", self.pseudo.tau), ("pseudo.nms_iou", self.pseudo.nms_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{n} must lie in [0, 1]"));
            }
        }
        self.lat.train.validate()?;
        self.detectors.detector.train.validate()?;
        self.downstream.train.validate()
    }

    /// Benchmark declaration of the configured preset.
    pub fn bench_config(&self) -> Result<BenchConfig> {
        let d = &self.datasets;
        let mut cfg = match d.preset.as_str() {
            "granularity" => match d.counts.as_deref() {
                None => presets::granularity(60),
                Some(&[n]) => presets::granularity(n),
                Some(&[a, b, c]) => presets::granularity_counts([a, b, c]),
                Some(_) => return Err(Error::Config("granularity takes 1 or 3 counts".into())),
            },
            "size_disparity" => match d.counts.as_deref() {
                None => presets::size_disparity(presets::SIZE_DISPARITY_COUNTS),
                Some(&[a, b, c, e]) => presets::size_disparity([a, b, c, e]),
                Some(_) => return Err(Error::Config("size_disparity takes 4 counts".into())),
            },
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        };
        if let Some(f) = &d.features {
            cfg.features = f.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the config with machine-specific paths blanked, so the
    /// same experiment hashes identically wherever it runs.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.datasets.dir = c.datasets.dir.as_ref().map(|_| PathBuf::new());
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn stage_seed(&self, stage: &str) -> u64 {
        seed::derive(self.seed, stage, 0)
    }
}

/// Run-time switches that are not part of the experiment definition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub workers: usize,
    pub dump_attention: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            workers: 1,
            dump_attention: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenBench,
    TrainDetectors,
    PseudoLabel,
    TrainLat,
    Transfer,
    TrainDownstream,
    Evaluate,
    AblateSff,
    AblateStrategy,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenBench => "gen-bench",
            Stage::TrainDetectors => "train-detectors",
            Stage::PseudoLabel => "pseudo-label",
            Stage::TrainLat => "train-lat",
            Stage::Transfer => "transfer",
            Stage::TrainDownstream => "train-downstream",
            Stage::Evaluate => "evaluate",
            Stage::AblateSff => "ablate-sff",
            Stage::AblateStrategy => "ablate-strategy",
        }
    }

    /// Subdirectory of the run directory owned by this stage.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::GenBench => "bench",
            Stage::TrainDetectors => "detectors",
            Stage::PseudoLabel => "pseudo",
            Stage::TrainLat => "lat",
            Stage::Transfer => "transfer",
            Stage::TrainDownstream => "downstream",
            Stage::Evaluate => "evaluate",
            Stage::AblateSff => "ablate_sff",
            Stage::AblateStrategy => "ablate_strategy",
        }
    }

    /// Earlier stages whose artifacts this one reads.
    pub fn inputs(self, cfg: &RunConfig) -> Vec<Stage> {
        match self {
            Stage::GenBench => vec![],
            Stage::TrainDetectors => vec![Stage::GenBench],
            Stage::PseudoLabel => match cfg.pseudo.source {
                PseudoSource::Detectors => vec![Stage::GenBench, Stage::TrainDetectors],
                PseudoSource::Oracle => vec![Stage::GenBench],
            },
            Stage::TrainLat => vec![Stage::GenBench, Stage::PseudoLabel],
            Stage::Transfer => vec![Stage::GenBench, Stage::PseudoLabel, Stage::TrainLat],
            Stage::TrainDownstream => vec![Stage::GenBench, Stage::PseudoLabel, Stage::Transfer],
            Stage::Evaluate => vec![Stage::GenBench, Stage::Transfer, Stage::TrainDownstream],
            Stage::AblateSff | Stage::AblateStrategy => vec![Stage::GenBench, Stage::PseudoLabel],
        }
    }
}

/// The stages `run-all` chains, in order.
pub fn pipeline_stages(cfg: &RunConfig) -> Vec<Stage> {
    let mut s = vec![Stage::GenBench];
    if cfg.pseudo.source == PseudoSource::Detectors {
        s.push(Stage::TrainDetectors);
    }
    s.extend([Stage::PseudoLabel, Stage::TrainLat, Stage::Transfer, Stage::TrainDownstream, Stage::Evaluate]);
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    /// Run-relative path → SHA-256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// Run-relative path → SHA-256 of every file written.
    pub outputs: BTreeMap<String, String>,
}

pub const MANIFEST: &str = "manifest.json";

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != MANIFEST) {
            let rel = p.strip_prefix(root).expect("below root").to_string_lossy().replace('\\', "/");
            out.insert(rel, sha256_file(&p)?);
        }
    }
    Ok(())
}

/// Digests of every file under `root/sub`, manifest excluded.
pub fn digest_dir(root: &Path, sub: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    walk(root, &root.join(sub), &mut out)?;
    Ok(out)
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    opts: RunOptions,
    root: &'a Path,
    stage: Stage,
}

impl Ctx<'_> {
    fn out(&self) -> PathBuf {
        self.root.join(self.stage.dir())
    }

    fn input(&self, stage: Stage) -> Result<PathBuf> {
        let p = self.root.join(stage.dir());
        if !p.join(MANIFEST).exists() {
            return Err(Error::MissingInput {
                stage: self.stage.name().into(),
                path: p.join(MANIFEST),
            });
        }
        Ok(p)
    }

    fn bench(&self) -> Result<Benchmark> {
        Benchmark::load(self.input(Stage::GenBench)?)
    }

    fn pseudo(&self) -> Result<PseudoLabelSets> {
        PseudoLabelSets::load(self.input(Stage::PseudoLabel)?)
    }

    fn target_dataset(&self, bench: &Benchmark) -> Result<String> {
        bench
            .dataset_for_space(&self.cfg.target_space)
            .map(|d| d.dataset_id.clone())
            .map_err(|_| Error::Config(format!("no dataset is annotated in target space `{}`", self.cfg.target_space)))
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.out().join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn write_json<T: Serialize>(&self, name: &str, v: &T) -> Result<()> {
        self.write(name, &(serde_json::to_string_pretty(v)? + "\n"))
    }
}

fn fresh_dir(p: &Path) -> Result<()> {
    if p.exists() {
        fs::remove_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn load_transfers(dir: &Path, bench: &Benchmark, target_space: &str) -> Result<Vec<(String, Transfer)>> {
    let mut out = Vec::new();
    for ds in &bench.datasets {
        let p = dir.join(transfer_file(&ds.dataset_id, target_space));
        if !p.exists() {
            continue;
        }
        let corpus = load_corpus(&p)?;
        if corpus.records.len() != ds.len() {
            return Err(Error::Config(format!("{} does not cover every image of `{}`", p.display(), ds.dataset_id)));
        }
        out.push((
            ds.dataset_id.clone(),
            Transfer {
                target_space: target_space.to_string(),
                records: corpus.records,
                traces: Vec::new(),
            },
        ));
    }
    Ok(out)
}

pub fn transfer_file(dataset_id: &str, space_id: &str) -> String {
    format!("{dataset_id}__to__{space_id}.json")
}

const REGIMES: [&str; 3] = ["baseline", "pseudo_label", "lat"];

fn downstream_config(cfg: &RunConfig) -> DetectorConfig {
    let mut d = cfg.downstream.clone();
    d.train.seed = cfg.stage_seed("downstream");
    d
}

/// Run one stage; returns a short human-readable summary.
pub fn run_stage(stage: Stage, cfg: &RunConfig, opts: RunOptions) -> Result<String> {
    let root = cfg.output_dir.as_path();
    let ctx = Ctx { cfg, opts, root, stage };
    let inputs = stage
        .inputs(cfg)
        .into_iter()
        .map(|s| ctx.input(s).map(|_| s))
        .collect::<Result<Vec<_>>>()?;
    let mut input_digests = BTreeMap::new();
    for s in &inputs {
        input_digests.extend(digest_dir(root, s.dir())?);
    }
    fresh_dir(&ctx.out())?;
    let summary = match stage {
        Stage::GenBench => gen_bench(&ctx)?,
        Stage::TrainDetectors => train_detectors_stage(&ctx)?,
        Stage::PseudoLabel => pseudo_label(&ctx)?,
        Stage::TrainLat => train_lat_stage(&ctx)?,
        Stage::Transfer => transfer(&ctx)?,
        Stage::TrainDownstream => train_downstream_stage(&ctx)?,
        Stage::Evaluate => evaluate(&ctx)?,
        Stage::AblateSff => ablate_sff_stage(&ctx)?,
        Stage::AblateStrategy => ablate_strategy(&ctx)?,
    };
    let manifest = Manifest {
        stage: stage.name().into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        inputs: input_digests,
        outputs: digest_dir(root, stage.dir())?,
    };
    ctx.write_json(MANIFEST, &manifest)?;
    Ok(summary)
}

/// Every pipeline stage in order.
pub fn run_all(cfg: &RunConfig, opts: RunOptions) -> Result<String> {
    let mut out = String::new();
    for s in pipeline_stages(cfg) {
        log::info!("stage {}", s.name());
        out.push_str(&format!("[{}]\n{}", s.name(), run_stage(s, cfg, opts)?));
    }
    Ok(out)
}

fn gen_bench(ctx: &Ctx) -> Result<String> {
    let bench = match &ctx.cfg.datasets.dir {
        Some(d) => Benchmark::load(d)?,
        None => generate_benchmark(&ctx.cfg.bench_config()?, ctx.cfg.seed)?,
    };
    ctx.target_dataset(&bench)?;
    bench.save(ctx.out())?;
    let mut s = String::new();
    for d in &bench.datasets {
        s.push_str(&format!(
            "{}: {} images ({} train / {} eval), {} annotations in `{}`\n",
            d.dataset_id,
            d.len(),
            d.train.len(),
            d.eval.len(),
            d.corpus.annotation_count(),
            d.space_id
        ));
    }
    Ok(s)
}

#[derive(Serialize)]
struct DetectorReport {
    detector_id: String,
    space_id: String,
    self_ap50: f64,
    self_map: f64,
    final_loss: f64,
}

fn train_detectors_stage(ctx: &Ctx) -> Result<String> {
    let bench = ctx.bench()?;
    let mut dc = ctx.cfg.detectors.detector.clone();
    dc.train.seed = ctx.cfg.stage_seed("detectors");
    let trained = train_detectors(&bench, &dc, ctx.opts.workers)?;
    let renderer = bench.renderer();
    let mut reports = Vec::new();
    for ((det, losses), ds) in trained.iter().zip(&bench.datasets) {
        let samples = gt_samples(ds, Split::Train);
        let images: Vec<_> = samples.iter().map(|s| (s.scene, s.labels.as_slice())).collect();
        let ap = evaluate_detector(det, &images, &renderer, ctx.opts.workers)?;
        if ap.map50 < ctx.cfg.detectors.ap_floor {
            return Err(Error::NonConvergence {
                what: det.detector_id.clone(),
                detail: format!("self AP@0.5 {:.3} below the floor {:.3}", ap.map50, ctx.cfg.detectors.ap_floor),
                tail: losses[losses.len().saturating_sub(10)..].to_vec(),
            });
        }
        det.save(ctx.out().join(format!("{}.ckpt", ds.dataset_id)), &ctx.cfg.hash())?;
        reports.push(DetectorReport {
            detector_id: det.detector_id.clone(),
            space_id: ds.space_id.clone(),
            self_ap50: ap.map50,
            self_map: ap.map,
            final_loss: losses.last().copied().unwrap_or(0.0),
        });
    }
    ctx.write_json("report.json", &reports)?;
    Ok(reports
        .iter()
        .map(|r| format!("{}: self AP50 {:.1}, mAP {:.1}\n", r.detector_id, 100.0 * r.self_ap50, 100.0 * r.self_map))
        .collect())
}

fn pseudo_label(ctx: &Ctx) -> Result<String> {
    let bench = ctx.bench()?;
    let p = &ctx.cfg.pseudo;
    let sets = match p.source {
        PseudoSource::Oracle => oracle_sets(&bench, &p.noise, ctx.cfg.stage_seed("oracle"), p.tau, p.nms_iou)?,
        PseudoSource::Detectors => {
            let dir = ctx.input(Stage::TrainDetectors)?;
            let detectors = bench
                .datasets
                .iter()
                .map(|d| ToyDetector::load(dir.join(format!("{}.ckpt", d.dataset_id))))
                .collect::<Result<Vec<_>>>()?;
            detector_sets(&bench, &detectors, p.tau, p.nms_iou, ctx.opts.workers)?
        }
    };
    sets.save(ctx.out(), &bench.taxonomy().label_spaces())?;
    Ok(sets
        .sets
        .iter()
        .map(|s| format!("{} in {}: {} labels ({})\n", s.dataset_id, s.space_id, s.len(), s.source))
        .collect())
}

fn lat_config(cfg: &RunConfig) -> LatConfig {
    let mut c = cfg.lat.clone();
    c.train.seed = cfg.stage_seed("lat");
    c
}

fn train_lat_stage(ctx: &Ctx) -> Result<String> {
    let bench = ctx.bench()?;
    let pseudo = ctx.pseudo()?;
    let (model, losses) = fit_lat(&bench, &pseudo, &ctx.cfg.target_space, &lat_config(ctx.cfg), ctx.opts.workers)?;
    model.save(ctx.out().join("model.ckpt"), &ctx.cfg.hash())?;
    ctx.write_json("losses.json", &losses)?;
    Ok(format!(
        "{} steps, final loss {:.4}\n",
        losses.len(),
        losses.last().copied().unwrap_or(0.0)
    ))
}

#[derive(Serialize)]
struct TraceDoc<'a> {
    image_id: &'a str,
    #[serde(flatten)]
    trace: &'a crate::sff::FusionTrace,
}

fn transfer(ctx: &Ctx) -> Result<String> {
    let bench = ctx.bench()?;
    let pseudo = ctx.pseudo()?;
    let model = LatModel::load(ctx.input(Stage::TrainLat)?.join("model.ckpt"))?;
    let target = &ctx.cfg.target_space;
    let ids: Vec<&str> = bench.datasets.iter().map(|d| d.dataset_id.as_str()).collect();
    let space = bench.taxonomy().label_space(target)?;
    let mut s = String::new();
    for (id, t) in transfer_datasets(&bench, &model, &pseudo, &ids, target, ctx.opts.workers, ctx.opts.dump_attention)? {
        save_corpus(&t.corpus(&space), ctx.out().join(transfer_file(&id, target)))?;
        if ctx.opts.dump_attention {
            let docs: Vec<TraceDoc> = t.traces.iter().map(|(i, tr)| TraceDoc { image_id: i, trace: tr }).collect();
            ctx.write_json(&format!("attention/{id}.json"), &docs)?;
        }
        let n: usize = t.records.iter().map(|r| r.annotation_count()).sum();
        s.push_str(&format!("{id} -> {target}: {} images, {n} annotations\n", t.records.len()));
    }
    Ok(s)
}

fn train_downstream_stage(ctx: &Ctx) -> Result<String> {
    let bench = ctx.bench()?;
    let pseudo = ctx.pseudo()?;
    let target = ctx.target_dataset(&bench)?;
    let transfers = load_transfers(&ctx.input(Stage::Transfer)?, &bench, &ctx.cfg.target_space)?;
    let data = regime_data(&bench, &pseudo, &transfers, &target)?;
    let space = bench.taxonomy().label_space(&ctx.cfg.target_space)?;
    let dc = downstream_config(ctx.cfg);
    let mut s = String::new();
    for (name, domains) in REGIMES.iter().zip([&data.baseline, &data.pseudo_label, &data.lat]) {
        let d = train_downstream(name, &space, domains, &data.eval, &bench.renderer(), &dc, ctx.opts.workers)?;
        d.detector.save(ctx.out().join(format!("{name}.ckpt")), &ctx.cfg.hash())?;
        let images: usize = domains.iter().map(Vec::len).sum();
        s.push_str(&format!("{name}: trained on {images} images\n"));
    }
    Ok(s)
}

#[derive(Serialize)]
struct RecoveryRow {
    dataset_id: String,
    accuracy: f64,
    mean_iou: f64,
    oracle_count: usize,
    matched: usize,
}

#[derive(Serialize)]
struct EvalReport {
    comparison: Comparison,
    transfer: Vec<RecoveryRow>,
}

fn evaluate(ctx: &Ctx) -> Result<String> {
    let bench = ctx.bench()?;
    let target = ctx.target_dataset(&bench)?;
    let ds = bench.dataset(&target)?;
    let eval: Vec<_> = ds
        .eval
        .iter()
        .map(|&i| (&ds.scenes[i], ds.record(i).in_space(&ds.space_id)))
        .collect();
    let dir = ctx.input(Stage::TrainDownstream)?;
    let renderer = bench.renderer();
    let mut reports = Vec::new();
    for name in REGIMES {
        let det = ToyDetector::load(dir.join(format!("{name}.ckpt")))?;
        reports.push(evaluate_detector(&det, &eval, &renderer, ctx.opts.workers)?);
    }
    let mut it = reports.into_iter();
    let comparison = Comparison {
        target_dataset: target.clone(),
        target_space: ctx.cfg.target_space.clone(),
        baseline: it.next().expect("three regimes"),
        pseudo_label: it.next().expect("three regimes"),
        lat: it.next().expect("three regimes"),
    };
    let mut rows = Vec::new();
    for (id, t) in load_transfers(&ctx.input(Stage::Transfer)?, &bench, &ctx.cfg.target_space)? {
        let r = recovery(&bench, &id, &t)?;
        rows.push(RecoveryRow {
            dataset_id: id,
            accuracy: r.accuracy,
            mean_iou: r.mean_iou,
            oracle_count: r.oracle_count,
            matched: r.matched,
        });
    }
    let mut text = format!("Downstream AP on the {} eval split (x100)\n{}", target, comparison.table());
    text.push_str(&format!("\nTransfer into `{}` against the oracle\n{:<16}{:>10}{:>10}{:>8}\n", ctx.cfg.target_space, "dataset", "accuracy", "mean IoU", "boxes"));
    for r in &rows {
        text.push_str(&format!("{:<16}{:>10.4}{:>10.4}{:>8}\n", r.dataset_id, r.accuracy, r.mean_iou, r.oracle_count));
    }
    ctx.write("report.txt", &text)?;
    ctx.write_json("report.json", &EvalReport { comparison, transfer: rows })?;
    Ok(text)
}

fn ablate_sff_stage(ctx: &Ctx) -> Result<String> {
    let bench = ctx.bench()?;
    let pseudo = ctx.pseudo()?;
    let target = ctx.target_dataset(&bench)?;
    let rows: Vec<VariantResult> = ablate_sff(&bench, &pseudo, &target, &lat_config(ctx.cfg), &downstream_config(ctx.cfg), ctx.opts.workers)?;
    let text = variant_table(&rows);
    ctx.write("report.txt", &text)?;
    ctx.write_json("report.json", &rows)?;
    Ok(text)
}

#[derive(Serialize)]
struct StrategyRow {
    strategy: String,
    ap50: f64,
    map: f64,
}

/// Downstream training on target GT plus transferred labels under each
/// batch-composition strategy.
fn ablate_strategy(ctx: &Ctx) -> Result<String> {
    let bench = ctx.bench()?;
    let pseudo = ctx.pseudo()?;
    let target = ctx.target_dataset(&bench)?;
    let (model, _) = fit_lat(&bench, &pseudo, &ctx.cfg.target_space, &lat_config(ctx.cfg), ctx.opts.workers)?;
    let sources: Vec<&str> = bench
        .datasets
        .iter()
        .filter(|d| d.dataset_id != target)
        .map(|d| d.dataset_id.as_str())
        .collect();
    let transfers = transfer_datasets(&bench, &model, &pseudo, &sources, &ctx.cfg.target_space, ctx.opts.workers, false)?;
    let data = regime_data(&bench, &pseudo, &transfers, &target)?;
    let space = bench.taxonomy().label_space(&ctx.cfg.target_space)?;
    let mut rows = Vec::new();
    for strategy in Strategy::ALL {
        let mut dc = downstream_config(ctx.cfg);
        dc.train.strategy = strategy;
        let d = train_downstream(strategy.name(), &space, &data.lat, &data.eval, &bench.renderer(), &dc, ctx.opts.workers)?;
        rows.push(StrategyRow {
            strategy: strategy.name().into(),
            ap50: d.report.map50,
            map: d.report.map,
        });
    }
    let mut text = format!("{:<14}{:>8}{:>8}\n", "strategy", "AP50", "mAP");
    for r in &rows {
        text.push_str(&format!("{:<14}{:>8.1}{:>8.1}\n", r.strategy, 100.0 * r.ap50, 100.0 * r.map));
    }
    ctx.write("report.txt", &text)?;
    ctx.write_json("report.json", &rows)?;
    Ok(text)
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Registry(_) => 2,
        Error::MissingInput { .. } => 3,
        Error::Numerical(_) => 4,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
output_dir = "out"
target_space = "fine"
"#;

    #[test]
    fn parses_and_defaults() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.pseudo.tau, 0.5);
        assert_eq!(c.datasets.preset, "granularity");
        c.validate().unwrap();
    }

    #[test]
    fn seed_is_mandatory() {
        let e = RunConfig::from_toml("output_dir = \"o\"\ntarget_space = \"fine\"\n").unwrap_err();
        assert_eq!(exit_code(&e), 2);
        assert!(e.to_string().contains("seed"));
    }

    #[test]
    fn unknown_target_space_is_a_config_error() {
        let c = RunConfig::from_toml(&MINIMAL.replace("\"fine\"", "\"nope\"")).unwrap();
        assert_eq!(exit_code(&c.validate().unwrap_err()), 2);
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = RunConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 4;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn missing_stage_input_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::from_toml(MINIMAL).unwrap();
        c.output_dir = dir.path().to_path_buf();
        let e = run_stage(Stage::TrainLat, &c, RunOptions::default()).unwrap_err();
        assert_eq!(exit_code(&e), 3);
        assert!(e.to_string().contains("train-lat"));
    }
}
