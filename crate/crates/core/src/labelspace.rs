//! Label-space registry and the concatenated global class layout.
//!
//! Every space keeps its own slice of the global index, so two spaces that
//! both name a class `car` still get two distinct logits. One background
//! slot follows the last space and is visible under every mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub space_id: String,
    pub class_names: Vec<String>,
}

impl LabelSpace {
    pub fn new(space_id: impl Into<String>, class_names: Vec<String>) -> Result<Self> {
        let space_id = space_id.into();
        if class_names.is_empty() {
            return Err(Error::Registry(format!("space `{space_id}` has no classes")));
        }
        for (i, n) in class_names.iter().enumerate() {
            if class_names[..i].contains(n) {
                return Err(Error::Registry(format!(
                    "space `{space_id}` lists class `{n}` twice"
                )));
            }
        }
        Ok(LabelSpace {
            space_id,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalIndex {
    spaces: Vec<LabelSpace>,
    offsets: Vec<usize>,
    total: usize,
}

impl GlobalIndex {
    /// Lay out `spaces` back to back in registration order.
    pub fn build(spaces: Vec<LabelSpace>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(spaces.len());
        let mut total = 0;
        for (i, s) in spaces.iter().enumerate() {
            if spaces[..i].iter().any(|p| p.space_id == s.space_id) {
                return Err(Error::Registry(format!("duplicate space id `{}`", s.space_id)));
            }
            offsets.push(total);
            total += s.len();
        }
        Ok(GlobalIndex {
            spaces,
            offsets,
            total,
        })
    }

    pub fn spaces(&self) -> &[LabelSpace] {
        &self.spaces
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Number of real classes, excluding background.
    pub fn total(&self) -> usize {
        self.total
    }

    /// Width of the logit layout: all classes plus background.
    pub fn width(&self) -> usize {
        self.total + 1
    }

    pub fn background(&self) -> usize {
        self.total
    }

    pub fn position(&self, space_id: &str) -> Result<usize> {
        self.spaces
            .iter()
            .position(|s| s.space_id == space_id)
            .ok_or_else(|| Error::Registry(format!("unknown space `{space_id}`")))
    }

    pub fn space(&self, space_id: &str) -> Result<&LabelSpace> {
        Ok(&self.spaces[self.position(space_id)?])
    }

    /// Global index range covered by a space.
    pub fn slice(&self, space_id: &str) -> Result<std::ops::Range<usize>> {
        let p = self.position(space_id)?;
        Ok(self.offsets[p]..self.offsets[p] + self.spaces[p].len())
    }

    pub fn to_global(&self, space_id: &str, local: usize) -> Result<usize> {
        let p = self.position(space_id)?;
        let len = self.spaces[p].len();
        if local >= len {
            return Err(Error::OutOfRange { index: local, len });
        }
        Ok(self.offsets[p] + local)
    }

    pub fn to_local(&self, global: usize) -> Result<(&str, usize)> {
        if global >= self.total {
            return Err(Error::OutOfRange {
                index: global,
                len: self.total,
            });
        }
        let p = self.offsets.partition_point(|&o| o <= global) - 1;
        Ok((&self.spaces[p].space_id, global - self.offsets[p]))
    }

    /// True on the space's slice and on the shared background slot.
    pub fn space_mask(&self, space_id: &str) -> Result<Vec<bool>> {
        let range = self.slice(space_id)?;
        let mut mask = vec![false; self.width()];
        mask[range].iter_mut().for_each(|m| *m = true);
        mask[self.total] = true;
        Ok(mask)
    }

    /// Mask selecting several spaces at once (plus background).
    pub fn union_mask(&self, space_ids: &[&str]) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.width()];
        for s in space_ids {
            for (m, v) in mask.iter_mut().zip(self.space_mask(s)?) {
                *m |= v;
            }
        }
        Ok(mask)
    }

    /// Diagnostic mapping table: `space_id<TAB>local name<TAB>global index`.
    pub fn mapping_tsv(&self) -> String {
        let mut out = String::from("space_id\tclass\tglobal_index\n");
        for (s, off) in self.spaces.iter().zip(&self.offsets) {
            for (i, n) in s.class_names.iter().enumerate() {
                out.push_str(&format!("{}\t{}\t{}\n", s.space_id, n, off + i));
            }
        }
        out.push_str(&format!("*\tbackground\t{}\n", self.total));
        out
    }
}

/// Softmax restricted to `mask`; entries outside the mask get exactly zero.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { (v - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(id: &str, n: usize) -> LabelSpace {
        LabelSpace::new(id, (0..n).map(|i| format!("c{i}")).collect()).unwrap()
    }

    fn three() -> GlobalIndex {
        GlobalIndex::build(vec![space("city", 8), space("nu", 24), space("waymo", 3)]).unwrap()
    }

    #[test]
    fn cumulative_offsets() {
        let g = three();
        assert_eq!(g.total(), 35);
        assert_eq!(g.offsets(), &[0, 8, 32]);
        let single = GlobalIndex::build(vec![space("a", 5)]).unwrap();
        assert_eq!(single.offsets(), &[0]);
        assert_eq!(single.total(), 5);
    }

    #[test]
    fn same_name_distinct_slots() {
        let a = LabelSpace::new("a", vec!["car".into(), "bus".into()]).unwrap();
        let b = LabelSpace::new("b", vec!["car".into()]).unwrap();
        let g = GlobalIndex::build(vec![a, b]).unwrap();
        assert_ne!(g.to_global("a", 0).unwrap(), g.to_global("b", 0).unwrap());
    }

    #[test]
    fn duplicate_space_rejected() {
        assert!(GlobalIndex::build(vec![space("a", 2), space("a", 3)]).is_err());
        assert!(LabelSpace::new("x", vec!["a".into(), "a".into()]).is_err());
        assert!(LabelSpace::new("x", vec![]).is_err());
    }

    #[test]
    fn global_local_round_trip() {
        let g = three();
        assert_eq!(g.to_global("city", 0).unwrap(), 0);
        assert_eq!(g.to_global("waymo", 1).unwrap(), 33);
        assert_eq!(g.to_local(33).unwrap(), ("waymo", 1));
        for i in 0..g.total() {
            let (s, l) = g.to_local(i).unwrap();
            assert_eq!(g.to_global(s, l).unwrap(), i);
        }
        assert!(g.to_global("waymo", 3).is_err());
        assert!(g.to_local(35).is_err());
    }

    #[test]
    fn masks() {
        let g = three();
        let m = g.space_mask("city").unwrap();
        assert_eq!(m.len(), 36);
        assert!(m[..8].iter().all(|&v| v));
        assert!(m[8..35].iter().all(|&v| !v));
        assert!(m[35]);
        let all = g.union_mask(&["city", "nu", "waymo"]).unwrap();
        assert!(all.iter().all(|&v| v));
        assert!(g.space_mask("nope").is_err());
    }

    #[test]
    fn uniform_renormalised_over_small_space() {
        let g = three();
        let mut mask = g.space_mask("waymo").unwrap();
        mask[g.background()] = false;
        let p = masked_softmax(&vec![0.0; g.width()], &mask);
        for (i, v) in p.iter().enumerate() {
            if (32..35).contains(&i) {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }
}
