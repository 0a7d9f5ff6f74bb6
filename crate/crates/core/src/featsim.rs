//! Deterministic synthetic image features standing in for a frozen backbone,
//! and region pooling over them.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::annot::BBox;
use crate::bench::{SceneSpec, TaxonomyMap};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Channels per cell.
    pub dim: usize,
    /// Pixels per cell side.
    pub stride: u32,
    /// Std-dev of per-cell Gaussian noise.
    pub sigma: f64,
    /// Amplitude of the positional encoding.
    pub pos_scale: f64,
    /// Cosine similarity between prototypes of fine classes that share a
    /// class in the coarsest space. 0 gives independent prototypes.
    pub sibling_similarity: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            dim: 16,
            stride: 8,
            sigma: 0.05,
            pos_scale: 0.05,
            sibling_similarity: 0.0,
        }
    }
}

/// One unit vector per fine class.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub vectors: Vec<Vec<f64>>,
}

fn unit_gaussian<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl Prototypes {
    /// Draw prototypes from the benchmark seed. Siblings are mixed with a
    /// shared family direction so their cosine is about `sibling_similarity`.
    pub fn draw(taxonomy: &TaxonomyMap, cfg: &FeatureConfig, bench_seed: u64) -> Self {
        let mut rng = seed::rng(bench_seed, "prototypes", 0);
        let n = taxonomy.fine_classes.len();
        let own: Vec<Vec<f64>> = (0..n).map(|_| unit_gaussian(cfg.dim, &mut rng)).collect();
        let s = cfg.sibling_similarity.clamp(0.0, 1.0);
        let coarsest = (0..taxonomy.spaces.len()).min_by_key(|&i| taxonomy.spaces[i].classes.len());
        let vectors = match coarsest {
            Some(sp) if s > 0.0 => {
                let groups = taxonomy.spaces[sp].classes.len();
                let family: Vec<Vec<f64>> = (0..groups).map(|_| unit_gaussian(cfg.dim, &mut rng)).collect();
                (0..n)
                    .map(|f| {
                        let fam = &family[taxonomy.oracle[sp][f]];
                        let v: Vec<f64> = own[f]
                            .iter()
                            .zip(fam)
                            .map(|(o, a)| s.sqrt() * a + (1.0 - s).sqrt() * o)
                            .collect();
                        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        v.into_iter().map(|x| x / norm).collect()
                    })
                    .collect()
            }
            _ => own,
        };
        Prototypes { vectors }
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }
}

/// Cell grid of feature vectors with a summed-area table per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid_w: usize,
    pub grid_h: usize,
    pub dim: usize,
    pub stride: f64,
    pub width: f64,
    pub height: f64,
    cells: Vec<f64>,
    sat: Vec<f64>,
}

fn positional(c: usize, u: f64, v: f64) -> f64 {
    let k = (c / 4 + 1) as f64 * std::f64::consts::PI;
    match c % 4 {
        0 => (k * u).sin(),
        1 => (k * u).cos(),
        2 => (k * v).sin(),
        _ => (k * v).cos(),
    }
}

impl FeatureMap {
    /// Build from raw cells laid out row-major as `[row][col][channel]`.
    pub fn from_cells(grid_w: usize, grid_h: usize, dim: usize, stride: f64, cells: Vec<f64>) -> Self {
        assert_eq!(cells.len(), grid_w * grid_h * dim, "cell buffer size");
        let mut sat = vec![0.0; (grid_w + 1) * (grid_h + 1) * dim];
        let at = |r: usize, c: usize| (r * (grid_w + 1) + c) * dim;
        for r in 0..grid_h {
            for c in 0..grid_w {
                let (o, a, b, d) = (at(r + 1, c + 1), at(r, c + 1), at(r + 1, c), at(r, c));
                let src = (r * grid_w + c) * dim;
                for k in 0..dim {
                    sat[o + k] = cells[src + k] + sat[a + k] + sat[b + k] - sat[d + k];
                }
            }
        }
        FeatureMap {
            grid_w,
            grid_h,
            dim,
            stride,
            width: grid_w as f64 * stride,
            height: grid_h as f64 * stride,
            cells,
            sat,
        }
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.grid_w + col) * self.dim;
        &self.cells[o..o + self.dim]
    }

    /// Sum of cells in rows `r0..r1`, cols `c0..c1`, added into `out`.
    fn block_sum(&self, r0: usize, r1: usize, c0: usize, c1: usize, out: &mut [f64]) {
        let w = self.grid_w + 1;
        let at = |r: usize, c: usize| (r * w + c) * self.dim;
        let (a, b, c, d) = (at(r1, c1), at(r0, c1), at(r1, c0), at(r0, c0));
        for (k, o) in out.iter_mut().enumerate() {
            *o += self.sat[a + k] - self.sat[b + k] - self.sat[c + k] + self.sat[d + k];
        }
    }

    fn geometry(&self, b: &BBox) -> [f64; 4] {
        let (cx, cy) = b.center();
        [
            (cx / self.width).clamp(0.0, 1.0),
            (cy / self.height).clamp(0.0, 1.0),
            (b.width() / self.width).clamp(0.0, 1.0),
            (b.height() / self.height).clamp(0.0, 1.0),
        ]
    }

    /// Area-weighted mean of the piecewise-constant cell field over a
    /// rectangle; zeros when the rectangle misses the map. Continuous in
    /// the rectangle's coordinates, unlike center-inclusion pooling.
    pub fn area_mean(&self, x0: f64, y0: f64, x1: f64, y1: f64, out: &mut [f64]) {
        let (x0, x1) = (x0.max(0.0), x1.min(self.width));
        let (y0, y1) = (y0.max(0.0), y1.min(self.height));
        out.iter_mut().for_each(|o| *o = 0.0);
        if x1 <= x0 || y1 <= y0 {
            return;
        }
        let s = self.stride;
        let overlaps = |lo: f64, hi: f64, n: usize| -> Vec<(usize, f64)> {
            let first = (lo / s).floor() as usize;
            let last = ((hi / s).ceil() as usize).min(n);
            (first..last)
                .map(|i| {
                    let a = (i as f64 * s).max(lo);
                    let b = ((i + 1) as f64 * s).min(hi);
                    (i, (b - a).max(0.0))
                })
                .filter(|&(_, w)| w > 0.0)
                .collect()
        };
        let cols = overlaps(x0, x1, self.grid_w);
        let rows = overlaps(y0, y1, self.grid_h);
        let norm = (x1 - x0) * (y1 - y0);
        for &(r, wy) in &rows {
            for &(c, wx) in &cols {
                let w = wx * wy / norm;
                for (o, v) in out.iter_mut().zip(self.cell(r, c)) {
                    *o += w * v;
                }
            }
        }
    }
}

/// Render the feature map of a scene. Each cell is the coverage-weighted
/// sum of the prototypes of the objects overlapping it, plus a fixed
/// positional encoding and Gaussian noise keyed by the image id.
pub fn render_features(scene: &SceneSpec, prototypes: &Prototypes, cfg: &FeatureConfig, seed: u64) -> FeatureMap {
    let stride = f64::from(cfg.stride);
    let gw = (f64::from(scene.width) / stride).ceil() as usize;
    let gh = (f64::from(scene.height) / stride).ceil() as usize;
    let dim = cfg.dim;
    let mut cells = vec![0.0; gw * gh * dim];
    for r in 0..gh {
        for c in 0..gw {
            let (u, v) = ((c as f64 + 0.5) / gw as f64, (r as f64 + 0.5) / gh as f64);
            let o = (r * gw + c) * dim;
            for k in 0..dim {
                cells[o + k] = cfg.pos_scale * positional(k, u, v);
            }
        }
    }
    for obj in &scene.objects {
        let proto = &prototypes.vectors[obj.fine_class];
        let b = &obj.bbox;
        let c0 = (b.x_min / stride).floor().max(0.0) as usize;
        let c1 = ((b.x_max / stride).ceil() as usize).min(gw);
        let r0 = (b.y_min / stride).floor().max(0.0) as usize;
        let r1 = ((b.y_max / stride).ceil() as usize).min(gh);
        for r in r0..r1 {
            let oy = (b.y_max.min((r + 1) as f64 * stride) - b.y_min.max(r as f64 * stride)).max(0.0);
            for c in c0..c1 {
                let ox = (b.x_max.min((c + 1) as f64 * stride) - b.x_min.max(c as f64 * stride)).max(0.0);
                let frac = ox * oy / (stride * stride);
                if frac > 0.0 {
                    let o = (r * gw + c) * dim;
                    for k in 0..dim {
                        cells[o + k] += frac * proto[k];
                    }
                }
            }
        }
    }
    if cfg.sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.sigma).expect("finite sigma");
        let mut rng = seed::rng(seed, "features", seed::str_key(&scene.image_id));
        for x in cells.iter_mut() {
            *x += normal.sample(&mut rng);
        }
    }
    FeatureMap::from_cells(gw, gh, dim, stride, cells)
}

/// Everything needed to render any scene of a benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Renderer {
    pub prototypes: Prototypes,
    pub config: FeatureConfig,
    pub seed: u64,
}

impl Renderer {
    pub fn render(&self, scene: &SceneSpec) -> FeatureMap {
        render_features(scene, &self.prototypes, &self.config, self.seed)
    }

    pub fn descriptor_dim(&self) -> usize {
        descriptor_dim(self.config.dim)
    }
}

/// Mean of the cells whose centers fall in the box (the nearest cell when
/// none does), followed by `(cx, cy, w, h)` normalized by the image size.
pub fn roi_pool(map: &FeatureMap, b: &BBox) -> Vec<f64> {
    let s = map.stride;
    let range = |lo: f64, hi: f64, n: usize| -> (usize, usize) {
        let first = (lo / s - 0.5).ceil().max(0.0) as usize;
        let last = ((hi / s - 0.5).floor() + 1.0).clamp(0.0, n as f64) as usize;
        (first, last)
    };
    let (mut c0, mut c1) = range(b.x_min, b.x_max, map.grid_w);
    let (mut r0, mut r1) = range(b.y_min, b.y_max, map.grid_h);
    if c0 >= c1 || r0 >= r1 {
        let (cx, cy) = b.center();
        let c = ((cx / s).floor().max(0.0) as usize).min(map.grid_w - 1);
        let r = ((cy / s).floor().max(0.0) as usize).min(map.grid_h - 1);
        (c0, c1, r0, r1) = (c, c + 1, r, r + 1);
    }
    let mut out = vec![0.0; map.dim];
    map.block_sum(r0, r1, c0, c1, &mut out);
    let n = ((r1 - r0) * (c1 - c0)) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out.extend_from_slice(&map.geometry(b));
    out
}

/// Regions of the head descriptor: whole box, its four quadrants and four
/// outer bands of a quarter side each.
pub const DESCRIPTOR_REGIONS: usize = 9;

pub fn descriptor_dim(dim: usize) -> usize {
    DESCRIPTOR_REGIONS * dim + 4
}

/// Richer region descriptor used by the heads: area-weighted means over
/// [`DESCRIPTOR_REGIONS`] sub-regions, then normalized geometry. The
/// quadrants and bands let a regressor see where the mass sits relative
/// to the box edges.
pub fn roi_descriptor(map: &FeatureMap, b: &BBox) -> Vec<f64> {
    let (x0, y0, x1, y1) = (b.x_min, b.y_min, b.x_max, b.y_max);
    let (mx, my) = b.center();
    let (bw, bh) = (0.25 * b.width(), 0.25 * b.height());
    let regions = [
        (x0, y0, x1, y1),
        (x0, y0, mx, my),
        (mx, y0, x1, my),
        (x0, my, mx, y1),
        (mx, my, x1, y1),
        (x0 - bw, y0, x0, y1),
        (x1, y0, x1 + bw, y1),
        (x0, y0 - bh, x1, y0),
        (x0, y1, x1, y1 + bh),
    ];
    let d = map.dim;
    let mut out = vec![0.0; descriptor_dim(d)];
    for (i, &(a, b_, c, e)) in regions.iter().enumerate() {
        map.area_mean(a, b_, c, e, &mut out[i * d..(i + 1) * d]);
    }
    out[DESCRIPTOR_REGIONS * d..].copy_from_slice(&map.geometry(b));
    out
}
