use serde::{Deserialize, Serialize};

use super::scene::SceneSpec;
use crate::annot::{BBox, Detection};
use crate::error::{Error, Result};
use crate::labelspace::LabelSpace;

/// How a dataset draws boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Convention {
    /// One tight box per fine object.
    Separate,
    /// Declared pairs (rider on a cycle) become one box: the tight union.
    MergePairs,
    /// Tight boxes scaled about their center by `factor`, clipped to the canvas.
    Inflate { factor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGroup {
    pub name: String,
    pub fine: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTaxonomy {
    pub space_id: String,
    pub classes: Vec<ClassGroup>,
    pub convention: Convention,
}

/// Declared pair: `rider` sits on `cycle`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairDecl {
    pub rider: String,
    pub cycle: String,
}

/// Fine classes, per-space groupings and box conventions. The oracle
/// mapping of a fine class into a space is its group in that space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyMap {
    pub fine_classes: Vec<String>,
    pub pairs: Vec<PairDecl>,
    pub spaces: Vec<SpaceTaxonomy>,
    /// `oracle[space][fine] = class id in that space`, derived on validation.
    #[serde(default)]
    pub oracle: Vec<Vec<usize>>,
}

impl TaxonomyMap {
    pub fn new(fine_classes: Vec<String>, pairs: Vec<PairDecl>, spaces: Vec<SpaceTaxonomy>) -> Result<Self> {
        let mut t = TaxonomyMap {
            fine_classes,
            pairs,
            spaces,
            oracle: Vec::new(),
        };
        t.validate()?;
        Ok(t)
    }

    /// Check every grouping is a partition of the fine classes and that
    /// merged pairs fall in one group; fills in `oracle`.
    pub fn validate(&mut self) -> Result<()> {
        let bad = |m: String| Error::Config(format!("taxonomy: {m}"));
        LabelSpace::new("fine", self.fine_classes.clone()).map_err(|e| bad(e.to_string()))?;
        for p in &self.pairs {
            for n in [&p.rider, &p.cycle] {
                if self.fine_index(n).is_none() {
                    return Err(bad(format!("pair member `{n}` is not a fine class")));
                }
            }
        }
        let riders: Vec<&str> = self.pairs.iter().map(|p| p.rider.as_str()).collect();
        for (i, r) in riders.iter().enumerate() {
            if riders[..i].contains(r) {
                return Err(bad(format!("rider `{r}` declared in two pairs")));
            }
        }
        let mut oracle = Vec::with_capacity(self.spaces.len());
        for (i, s) in self.spaces.iter().enumerate() {
            if self.spaces[..i].iter().any(|p| p.space_id == s.space_id) {
                return Err(bad(format!("duplicate space `{}`", s.space_id)));
            }
            if let Convention::Inflate { factor } = s.convention {
                if !(factor.is_finite() && factor > 0.0) {
                    return Err(bad(format!("space `{}`: bad inflate factor", s.space_id)));
                }
            }
            let names: Vec<String> = s.classes.iter().map(|c| c.name.clone()).collect();
            LabelSpace::new(s.space_id.clone(), names).map_err(|e| bad(e.to_string()))?;
            let mut map = vec![usize::MAX; self.fine_classes.len()];
            for (ci, c) in s.classes.iter().enumerate() {
                if c.fine.is_empty() {
                    return Err(bad(format!("class `{}` in `{}` groups nothing", c.name, s.space_id)));
                }
                for f in &c.fine {
                    let fi = self
                        .fine_index(f)
                        .ok_or_else(|| bad(format!("`{f}` in space `{}` is not a fine class", s.space_id)))?;
                    if map[fi] != usize::MAX {
                        return Err(bad(format!("fine class `{f}` grouped twice in `{}`", s.space_id)));
                    }
                    map[fi] = ci;
                }
            }
            if let Some(fi) = map.iter().position(|&m| m == usize::MAX) {
                return Err(bad(format!(
                    "fine class `{}` missing from space `{}`",
                    self.fine_classes[fi], s.space_id
                )));
            }
            if s.convention == Convention::MergePairs {
                for p in &self.pairs {
                    let (r, c) = (self.fine_index(&p.rider).unwrap(), self.fine_index(&p.cycle).unwrap());
                    if map[r] != map[c] {
                        return Err(bad(format!(
                            "space `{}` merges `{}`+`{}` but groups them apart",
                            s.space_id, p.rider, p.cycle
                        )));
                    }
                }
            }
            oracle.push(map);
        }
        self.oracle = oracle;
        Ok(())
    }

    pub fn fine_index(&self, name: &str) -> Option<usize> {
        self.fine_classes.iter().position(|n| n == name)
    }

    pub fn space_position(&self, space_id: &str) -> Result<usize> {
        self.spaces
            .iter()
            .position(|s| s.space_id == space_id)
            .ok_or_else(|| Error::Registry(format!("unknown space `{space_id}`")))
    }

    pub fn space(&self, space_id: &str) -> Result<&SpaceTaxonomy> {
        Ok(&self.spaces[self.space_position(space_id)?])
    }

    pub fn label_space(&self, space_id: &str) -> Result<LabelSpace> {
        let s = self.space(space_id)?;
        LabelSpace::new(s.space_id.clone(), s.classes.iter().map(|c| c.name.clone()).collect())
    }

    pub fn label_spaces(&self) -> Vec<LabelSpace> {
        self.spaces
            .iter()
            .map(|s| self.label_space(&s.space_id).expect("validated"))
            .collect()
    }

    /// Oracle class of a fine class in a space.
    pub fn map_fine(&self, space_id: &str, fine: usize) -> Result<usize> {
        Ok(self.oracle[self.space_position(space_id)?][fine])
    }

    pub fn is_rider(&self, fine: usize) -> bool {
        self.pairs.iter().any(|p| self.fine_index(&p.rider) == Some(fine))
    }

    /// Express a scene's objects in a space: grouping plus box convention.
    /// Inflated boxes are snapped to the quarter-pixel grid.
    pub fn transport(&self, scene: &SceneSpec, space_id: &str) -> Result<Vec<Detection>> {
        let s = self.space(space_id)?;
        let map = &self.oracle[self.space_position(space_id)?];
        let (w, h) = (f64::from(scene.width), f64::from(scene.height));
        let mut out = Vec::with_capacity(scene.objects.len());
        for o in &scene.objects {
            let bbox: BBox = match s.convention {
                Convention::Separate => o.bbox,
                Convention::Inflate { factor } => match o.bbox.inflate(factor).snap(0.25).clip(w, h) {
                    Some(b) => b,
                    None => continue,
                },
                Convention::MergePairs => match o.paired_with {
                    // the rider carries the merged box; its cycle is absorbed
                    Some(j) if self.is_rider(o.fine_class) => o.bbox.union_box(&scene.objects[j].bbox),
                    Some(_) => continue,
                    None => o.bbox,
                },
            };
            out.push(Detection::ground_truth(bbox, map[o.fine_class]));
        }
        Ok(out)
    }
}
