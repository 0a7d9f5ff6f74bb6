//! Synthetic multi-taxonomy benchmark with a known oracle mapping, plus
//! the evaluation metrics (AP and mapping recovery).

mod metrics;
pub mod presets;
mod scene;
mod taxonomy;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::annot::{self, Corpus, ImageRecord};
use crate::error::{Error, Result};
use crate::featsim::{FeatureConfig, Prototypes, Renderer};
use crate::seed;

pub use metrics::{
    evaluate_ap, mapping_recovery, match_greedy, ApReport, ClassAp, MappingRecovery, IOU_THRESHOLDS,
};
pub use scene::{generate_scene, SceneConfig, SceneObject, SceneSpec};
pub use taxonomy::{ClassGroup, Convention, PairDecl, SpaceTaxonomy, TaxonomyMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDecl {
    pub dataset_id: String,
    pub space_id: String,
    pub images: usize,
    /// Fixed eval-split size, overriding the benchmark-wide fraction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_images: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub name: String,
    pub taxonomy: TaxonomyMap,
    pub datasets: Vec<DatasetDecl>,
    pub scene: SceneConfig,
    pub features: FeatureConfig,
    pub eval_fraction: f64,
}

impl BenchConfig {
    pub fn validate(&mut self) -> Result<()> {
        self.taxonomy.validate()?;
        for (i, d) in self.datasets.iter().enumerate() {
            self.taxonomy.space_position(&d.space_id).map_err(|_| {
                Error::Config(format!("dataset `{}` uses undeclared space `{}`", d.dataset_id, d.space_id))
            })?;
            if self.datasets[..i].iter().any(|p| p.dataset_id == d.dataset_id) {
                return Err(Error::Config(format!("duplicate dataset `{}`", d.dataset_id)));
            }
            if self.datasets[..i].iter().any(|p| p.space_id == d.space_id) {
                return Err(Error::Config(format!("space `{}` used by two datasets", d.space_id)));
            }
            if d.images == 0 {
                return Err(Error::Config(format!("dataset `{}` has no images", d.dataset_id)));
            }
            if d.eval_images.is_some_and(|e| e >= d.images) {
                return Err(Error::Config(format!("dataset `{}` leaves no training images", d.dataset_id)));
            }
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::Config("eval_fraction must lie in [0, 1)".into()));
        }
        let s = &self.scene;
        if s.min_objects == 0 || s.min_objects > s.max_objects || s.min_size >= s.max_size {
            return Err(Error::Config("scene object ranges are inconsistent".into()));
        }
        Ok(())
    }
}

/// One dataset: scenes (oracle truth), its native-space GT corpus and a
/// seeded train/eval split over image positions.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchDataset {
    pub dataset_id: String,
    pub space_id: String,
    pub scenes: Vec<SceneSpec>,
    pub corpus: Corpus,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

impl BenchDataset {
    pub fn record(&self, i: usize) -> &ImageRecord {
        &self.corpus.records[i]
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub config: BenchConfig,
    pub seed: u64,
    pub prototypes: Prototypes,
    pub datasets: Vec<BenchDataset>,
}

impl Benchmark {
    pub fn taxonomy(&self) -> &TaxonomyMap {
        &self.config.taxonomy
    }

    pub fn dataset(&self, dataset_id: &str) -> Result<&BenchDataset> {
        self.datasets
            .iter()
            .find(|d| d.dataset_id == dataset_id)
            .ok_or_else(|| Error::Config(format!("unknown dataset `{dataset_id}`")))
    }

    pub fn dataset_for_space(&self, space_id: &str) -> Result<&BenchDataset> {
        self.datasets
            .iter()
            .find(|d| d.space_id == space_id)
            .ok_or_else(|| Error::Config(format!("no dataset annotates space `{space_id}`")))
    }

    pub fn features(&self) -> &FeatureConfig {
        &self.config.features
    }

    pub fn renderer(&self) -> Renderer {
        Renderer {
            prototypes: self.prototypes.clone(),
            config: self.config.features.clone(),
            seed: self.seed,
        }
    }

    /// Write corpora, `taxonomy.json`, `splits.json`, `scenes.json` and `bench.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("bench.json", to_json(&BenchHeader {
            seed: self.seed,
            config: self.config.clone(),
        })?)?;
        write("taxonomy.json", to_json(&self.config.taxonomy)?)?;
        let mut splits = BTreeMap::new();
        let mut scenes = BTreeMap::new();
        for d in &self.datasets {
            let ids = |idx: &[usize]| idx.iter().map(|&i| d.scenes[i].image_id.clone()).collect::<Vec<_>>();
            splits.insert(d.dataset_id.clone(), SplitDoc {
                train: ids(&d.train),
                eval: ids(&d.eval),
            });
            scenes.insert(d.dataset_id.clone(), d.scenes.clone());
            annot::save_corpus(&d.corpus, dir.join(format!("{}.json", d.dataset_id)))?;
        }
        write("splits.json", to_json(&splits)?)?;
        write("scenes.json", to_json(&scenes)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| -> Result<String> {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let header: BenchHeader = serde_json::from_str(&read("bench.json")?)?;
        let mut config = header.config;
        config.validate()?;
        let splits: BTreeMap<String, SplitDoc> = serde_json::from_str(&read("splits.json")?)?;
        let mut scenes: BTreeMap<String, Vec<SceneSpec>> = serde_json::from_str(&read("scenes.json")?)?;
        let prototypes = Prototypes::draw(&config.taxonomy, &config.features, header.seed);
        let mut datasets = Vec::new();
        for d in &config.datasets {
            let corpus = annot::load_corpus(dir.join(format!("{}.json", d.dataset_id)))?;
            let sc = scenes
                .remove(&d.dataset_id)
                .ok_or_else(|| Error::Config(format!("scenes.json lacks `{}`", d.dataset_id)))?;
            let split = splits
                .get(&d.dataset_id)
                .ok_or_else(|| Error::Config(format!("splits.json lacks `{}`", d.dataset_id)))?;
            let pos: BTreeMap<&str, usize> = sc.iter().enumerate().map(|(i, s)| (s.image_id.as_str(), i)).collect();
            let lookup = |ids: &[String]| -> Result<Vec<usize>> {
                ids.iter()
                    .map(|id| {
                        pos.get(id.as_str())
                            .copied()
                            .ok_or_else(|| Error::Config(format!("split names unknown image `{id}`")))
                    })
                    .collect()
            };
            let train = lookup(&split.train)?;
            let eval = lookup(&split.eval)?;
            datasets.push(BenchDataset {
                dataset_id: d.dataset_id.clone(),
                space_id: d.space_id.clone(),
                scenes: sc,
                corpus,
                train,
                eval,
            });
        }
        Ok(Benchmark {
            config,
            seed: header.seed,
            prototypes,
            datasets,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct BenchHeader {
    seed: u64,
    config: BenchConfig,
}

#[derive(Serialize, Deserialize)]
struct SplitDoc {
    train: Vec<String>,
    eval: Vec<String>,
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

/// Generate every dataset of the benchmark. Each dataset gets its own
/// disjoint set of scenes; GT is the oracle transport into its own space.
pub fn generate_benchmark(config: &BenchConfig, seed: u64) -> Result<Benchmark> {
    let mut config = config.clone();
    config.validate()?;
    let taxonomy = &config.taxonomy;
    let mut datasets = Vec::new();
    for (di, d) in config.datasets.iter().enumerate() {
        let mut rng = seed::rng(seed, "scenes", di as u64);
        let scenes: Vec<SceneSpec> = (0..d.images)
            .map(|i| generate_scene(format!("{}-{i:05}", d.dataset_id), taxonomy, &config.scene, &mut rng))
            .collect();
        let space = taxonomy.label_space(&d.space_id)?;
        let mut records = Vec::with_capacity(scenes.len());
        for s in &scenes {
            let mut r = ImageRecord::new(s.image_id.clone(), d.dataset_id.clone(), s.width, s.height);
            r.annotations.insert(d.space_id.clone(), taxonomy.transport(s, &d.space_id)?);
            records.push(r);
        }
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut seed::rng(seed, "split", di as u64));
        let n_eval = d
            .eval_images
            .unwrap_or_else(|| ((scenes.len() as f64) * config.eval_fraction).round() as usize);
        let mut eval = order[..n_eval].to_vec();
        let mut train = order[n_eval..].to_vec();
        eval.sort_unstable();
        train.sort_unstable();
        datasets.push(BenchDataset {
            dataset_id: d.dataset_id.clone(),
            space_id: d.space_id.clone(),
            scenes,
            corpus: Corpus::new(vec![space], records),
            train,
            eval,
        });
    }
    let prototypes = Prototypes::draw(taxonomy, &config.features, seed);
    Ok(Benchmark {
        config,
        seed,
        prototypes,
        datasets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_disjoint() {
        let cfg = presets::granularity(10);
        let a = generate_benchmark(&cfg, 5).unwrap();
        let b = generate_benchmark(&cfg, 5).unwrap();
        assert_eq!(a, b);
        let c = generate_benchmark(&cfg, 6).unwrap();
        assert_ne!(a.datasets[0].scenes, c.datasets[0].scenes);
        for d in &a.datasets {
            assert_eq!(d.train.len() + d.eval.len(), 10);
            assert_eq!(d.eval.len(), 2);
            assert!(d.train.iter().all(|i| !d.eval.contains(i)));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = presets::granularity(6);
        let b = generate_benchmark(&cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        assert_eq!(Benchmark::load(dir.path()).unwrap(), b);
    }

    #[test]
    fn rejects_unknown_space() {
        let mut cfg = presets::granularity(4);
        cfg.datasets[0].space_id = "nope".into();
        assert!(generate_benchmark(&cfg, 1).is_err());
    }
}
