//! Two benchmark regimes: differing class granularity, and small versus
//! large datasets sharing one class list.

use super::scene::SceneConfig;
use super::taxonomy::{ClassGroup, Convention, PairDecl, SpaceTaxonomy, TaxonomyMap};
use super::{BenchConfig, DatasetDecl};
use crate::featsim::FeatureConfig;

fn group(name: &str, fine: &[&str]) -> ClassGroup {
    ClassGroup {
        name: name.into(),
        fine: fine.iter().map(|s| s.to_string()).collect(),
    }
}

const FINE: [&str; 12] = [
    "car",
    "van",
    "truck",
    "bus",
    "adult",
    "child",
    "officer",
    "worker",
    "bicycle",
    "bicyclist",
    "motorcycle",
    "motorcyclist",
];

/// 12 fine classes seen through three spaces of 3, 6 and 12 classes.
/// `coarse` merges riders with their cycles, `mid` inflates boxes by 10%.
pub fn granularity_taxonomy() -> TaxonomyMap {
    let fine: Vec<String> = FINE.iter().map(|s| s.to_string()).collect();
    let pairs = vec![
        PairDecl {
            rider: "bicyclist".into(),
            cycle: "bicycle".into(),
        },
        PairDecl {
            rider: "motorcyclist".into(),
            cycle: "motorcycle".into(),
        },
    ];
    let coarse = SpaceTaxonomy {
        space_id: "coarse".into(),
        classes: vec![
            group("vehicle", &["car", "van", "truck", "bus"]),
            group("pedestrian", &["adult", "child", "officer", "worker"]),
            group("cyclist", &["bicycle", "bicyclist", "motorcycle", "motorcyclist"]),
        ],
        convention: Convention::MergePairs,
    };
    let mid = SpaceTaxonomy {
        space_id: "mid".into(),
        classes: vec![
            group("car", &["car", "van"]),
            group("large_vehicle", &["truck", "bus"]),
            group("person", &["adult", "child"]),
            group("staff", &["officer", "worker"]),
            group("cycle", &["bicycle", "motorcycle"]),
            group("rider", &["bicyclist", "motorcyclist"]),
        ],
        convention: Convention::Inflate { factor: 1.1 },
    };
    let fine_space = SpaceTaxonomy {
        space_id: "fine".into(),
        classes: FINE.iter().map(|n| group(n, &[n])).collect(),
        convention: Convention::Separate,
    };
    TaxonomyMap::new(fine, pairs, vec![coarse, mid, fine_space]).expect("preset taxonomy is valid")
}

/// Granularity regime: three datasets of `images` images each, one per space.
pub fn granularity(images: usize) -> BenchConfig {
    granularity_counts([images; 3])
}

/// Granularity regime with per-dataset image counts (coarse, mid, fine).
pub fn granularity_counts(counts: [usize; 3]) -> BenchConfig {
    BenchConfig {
        name: "granularity".into(),
        taxonomy: granularity_taxonomy(),
        datasets: ["coarse", "mid", "fine"]
            .iter()
            .zip(counts)
            .map(|(s, images)| DatasetDecl {
                dataset_id: format!("ds_{s}"),
                space_id: s.to_string(),
                images,
                eval_images: None,
            })
            .collect(),
        scene: SceneConfig::default(),
        features: FeatureConfig::default(),
        eval_fraction: 0.2,
    }
}

const SHARED: [&str; 6] = ["car", "truck", "pedestrian", "cyclist", "bus", "sign"];

/// Size-disparity regime: four datasets with one shared class list and
/// differing box conventions; two small and two large.
pub fn size_disparity(counts: [usize; 4]) -> BenchConfig {
    let fine: Vec<String> = SHARED.iter().map(|s| s.to_string()).collect();
    let spaces: Vec<(&str, Convention)> = vec![
        ("small_a", Convention::Separate),
        ("small_b", Convention::Inflate { factor: 1.1 }),
        ("large_a", Convention::Separate),
        ("large_b", Convention::Inflate { factor: 0.92 }),
    ];
    let taxonomy = TaxonomyMap::new(
        fine,
        Vec::new(),
        spaces
            .iter()
            .map(|(id, conv)| SpaceTaxonomy {
                space_id: id.to_string(),
                classes: SHARED.iter().map(|n| group(n, &[n])).collect(),
                convention: *conv,
            })
            .collect(),
    )
    .expect("preset taxonomy is valid");
    BenchConfig {
        name: "size_disparity".into(),
        datasets: spaces
            .iter()
            .zip(counts)
            .map(|((id, _), images)| DatasetDecl {
                dataset_id: format!("ds_{id}"),
                space_id: id.to_string(),
                images,
                eval_images: None,
            })
            .collect(),
        taxonomy,
        scene: SceneConfig {
            pair_rate: 0.0,
            ..SceneConfig::default()
        },
        features: FeatureConfig::default(),
        eval_fraction: 0.2,
    }
}

/// Counts mirroring the small/large ratio of the size-disparity regime.
pub const SIZE_DISPARITY_COUNTS: [usize; 4] = [100, 60, 2000, 4000];
