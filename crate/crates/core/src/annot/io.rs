//! COCO-style corpus documents.
//!
//! Layout: top-level `images`, `annotations`, `categories`. Each annotation
//! carries the extension fields `label_space` and `origin`; boxes are
//! `[x, y, width, height]`. The writer emits keys in a fixed order and rounds
//! every real to 9 significant digits, so writing a loaded document again
//! reproduces it byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use super::{BBox, Detection, ImageRecord, Origin};
use crate::error::{Error, Result};
use crate::labelspace::LabelSpace;

/// A set of image records plus the label spaces their annotations use.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spaces: Vec<LabelSpace>,
    pub records: Vec<ImageRecord>,
}

impl Corpus {
    pub fn new(spaces: Vec<LabelSpace>, records: Vec<ImageRecord>) -> Self {
        Corpus { spaces, records }
    }

    pub fn annotation_count(&self) -> usize {
        self.records.iter().map(ImageRecord::annotation_count).sum()
    }

    pub fn space(&self, space_id: &str) -> Option<&LabelSpace> {
        self.spaces.iter().find(|s| s.space_id == space_id)
    }
}

pub(crate) fn round_sig9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    // `{:.8e}` prints exactly nine significant digits
    format!("{v:.8e}").parse().unwrap_or(v)
}

#[derive(Serialize)]
struct ImageDoc<'a> {
    id: &'a str,
    dataset: &'a str,
    width: u32,
    height: u32,
}

#[derive(Serialize)]
struct OriginDoc<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    detector: Option<&'a str>,
}

#[derive(Serialize)]
struct AnnotationDoc<'a> {
    id: usize,
    image_id: &'a str,
    label_space: &'a str,
    category_id: usize,
    bbox: [f64; 4],
    score: f64,
    origin: OriginDoc<'a>,
}

#[derive(Serialize)]
struct CategoryDoc<'a> {
    id: usize,
    name: &'a str,
    label_space: &'a str,
}

#[derive(Serialize)]
struct CorpusDoc<'a> {
    images: Vec<ImageDoc<'a>>,
    annotations: Vec<AnnotationDoc<'a>>,
    categories: Vec<CategoryDoc<'a>>,
}

/// Canonical document text for a corpus.
pub fn write_corpus_string(corpus: &Corpus) -> Result<String> {
    let images = corpus
        .records
        .iter()
        .map(|r| ImageDoc {
            id: &r.image_id,
            dataset: &r.dataset_id,
            width: r.width,
            height: r.height,
        })
        .collect();

    let mut annotations = Vec::new();
    for r in &corpus.records {
        for (space, dets) in &r.annotations {
            for d in dets {
                let b = &d.bbox;
                let x = round_sig9(b.x_min);
                let y = round_sig9(b.y_min);
                annotations.push(AnnotationDoc {
                    id: annotations.len(),
                    image_id: &r.image_id,
                    label_space: space,
                    category_id: d.class_id,
                    bbox: [x, y, round_sig9(b.x_max - x), round_sig9(b.y_max - y)],
                    score: round_sig9(d.score),
                    origin: match &d.origin {
                        Origin::GroundTruth => OriginDoc {
                            kind: "gt",
                            detector: None,
                        },
                        Origin::Pseudo(id) => OriginDoc {
                            kind: "pseudo",
                            detector: Some(id),
                        },
                    },
                });
            }
        }
    }

    let categories = corpus
        .spaces
        .iter()
        .flat_map(|s| {
            s.class_names.iter().enumerate().map(move |(i, n)| CategoryDoc {
                id: i,
                name: n,
                label_space: &s.space_id,
            })
        })
        .collect();

    let mut text = serde_json::to_string_pretty(&CorpusDoc {
        images,
        annotations,
        categories,
    })?;
    text.push('\n');
    Ok(text)
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = write_corpus_string(corpus)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

struct Cursor<'a> {
    index: usize,
    image_id: String,
    obj: &'a serde_json::Map<String, Value>,
}

impl<'a> Cursor<'a> {
    fn err(&self, field: &str, reason: impl Into<String>) -> Error {
        Error::Parse {
            index: self.index,
            image_id: self.image_id.clone(),
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    fn get(&self, field: &str) -> Result<&'a Value> {
        self.obj.get(field).ok_or_else(|| self.err(field, "missing"))
    }

    fn str(&self, field: &str) -> Result<&'a str> {
        self.get(field)?
            .as_str()
            .ok_or_else(|| self.err(field, "expected a string"))
    }

    fn uint(&self, field: &str) -> Result<u64> {
        self.get(field)?
            .as_u64()
            .ok_or_else(|| self.err(field, "expected a non-negative integer"))
    }

    fn real(&self, field: &str) -> Result<f64> {
        self.get(field)?
            .as_f64()
            .ok_or_else(|| self.err(field, "expected a number"))
    }
}

fn array<'a>(doc: &'a Value, key: &str) -> Result<&'a Vec<Value>> {
    doc.get(key).and_then(Value::as_array).ok_or_else(|| Error::Parse {
        index: 0,
        image_id: String::new(),
        field: key.to_string(),
        reason: "missing top-level array".into(),
    })
}

fn object<'a>(v: &'a Value, index: usize, field: &str) -> Result<&'a serde_json::Map<String, Value>> {
    v.as_object().ok_or_else(|| Error::Parse {
        index,
        image_id: String::new(),
        field: field.to_string(),
        reason: "expected an object".into(),
    })
}

/// Parse a corpus document.
pub fn parse_corpus(text: &str) -> Result<Corpus> {
    let doc: Value = serde_json::from_str(text)?;

    // categories define the label-space registry for this document
    let mut spaces: Vec<(String, BTreeMap<u64, String>)> = Vec::new();
    for (index, v) in array(&doc, "categories")?.iter().enumerate() {
        let c = Cursor {
            index,
            image_id: String::new(),
            obj: object(v, index, "categories")?,
        };
        let space = c.str("label_space")?.to_string();
        let id = c.uint("id")?;
        let name = c.str("name")?.to_string();
        let slot = match spaces.iter().position(|(s, _)| *s == space) {
            Some(p) => p,
            None => {
                spaces.push((space.clone(), BTreeMap::new()));
                spaces.len() - 1
            }
        };
        if spaces[slot].1.insert(id, name).is_some() {
            return Err(c.err("id", format!("duplicate category id {id} in space `{space}`")));
        }
    }
    let mut label_spaces = Vec::with_capacity(spaces.len());
    for (space, classes) in spaces {
        if classes.keys().copied().ne(0..classes.len() as u64) {
            return Err(Error::Registry(format!(
                "categories of space `{space}` must be numbered 0..n"
            )));
        }
        label_spaces.push(LabelSpace::new(space, classes.into_values().collect())?);
    }

    let mut records: Vec<ImageRecord> = Vec::new();
    let mut by_id: BTreeMap<String, usize> = BTreeMap::new();
    for (index, v) in array(&doc, "images")?.iter().enumerate() {
        let obj = object(v, index, "images")?;
        let image_id = obj
            .get("id")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        let c = Cursor {
            index,
            image_id: image_id.clone(),
            obj,
        };
        c.str("id")?;
        let dataset = c.str("dataset")?.to_string();
        let width = u32::try_from(c.uint("width")?).map_err(|_| c.err("width", "too large"))?;
        let height = u32::try_from(c.uint("height")?).map_err(|_| c.err("height", "too large"))?;
        if width == 0 || height == 0 {
            return Err(c.err("width", "image size must be positive"));
        }
        if by_id.insert(image_id.clone(), records.len()).is_some() {
            return Err(c.err("id", "duplicate image id"));
        }
        records.push(ImageRecord::new(image_id, dataset, width, height));
    }

    for (index, v) in array(&doc, "annotations")?.iter().enumerate() {
        let obj = object(v, index, "annotations")?;
        let image_id = obj
            .get("image_id")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        let c = Cursor {
            index,
            image_id: image_id.clone(),
            obj,
        };
        let &slot = by_id
            .get(c.str("image_id")?)
            .ok_or_else(|| c.err("image_id", "unknown image"))?;
        let space_id = c.str("label_space")?;
        let space = label_spaces
            .iter()
            .find(|s| s.space_id == space_id)
            .ok_or_else(|| Error::Registry(format!("annotation {index} references unknown label space `{space_id}`")))?;
        let class_id = c.uint("category_id")? as usize;
        if class_id >= space.len() {
            return Err(c.err(
                "category_id",
                format!("{class_id} out of range for space `{space_id}` ({} classes)", space.len()),
            ));
        }

        let raw = c
            .get("bbox")?
            .as_array()
            .filter(|a| a.len() == 4)
            .ok_or_else(|| c.err("bbox", "expected [x, y, width, height]"))?;
        let mut xywh = [0.0; 4];
        for (k, v) in raw.iter().enumerate() {
            xywh[k] = v.as_f64().ok_or_else(|| c.err("bbox", "non-numeric entry"))?;
        }
        if !(xywh[2] > 0.0 && xywh[3] > 0.0) {
            return Err(c.err("bbox", "zero-area or inverted box"));
        }
        let rec = &records[slot];
        let bbox = BBox::from_xywh(xywh[0], xywh[1], xywh[2], xywh[3])
            .map_err(|e| c.err("bbox", e.to_string()))?
            .clip(f64::from(rec.width), f64::from(rec.height))
            .ok_or_else(|| c.err("bbox", "box lies outside the image"))?;

        let score = c.real("score")?;
        if !(0.0..=1.0).contains(&score) {
            return Err(c.err("score", "must lie in [0, 1]"));
        }
        let o = c.get("origin")?;
        let origin = match o.get("type").and_then(Value::as_str) {
            Some("gt") => Origin::GroundTruth,
            Some("pseudo") => Origin::Pseudo(
                o.get("detector")
                    .and_then(Value::as_str)
                    .ok_or_else(|| c.err("origin.detector", "missing"))?
                    .to_string(),
            ),
            _ => return Err(c.err("origin", "expected {\"type\": \"gt\"} or {\"type\": \"pseudo\", ...}")),
        };
        if origin == Origin::GroundTruth && score != 1.0 {
            return Err(c.err("score", "ground-truth annotations must have score 1"));
        }
        records[slot]
            .annotations
            .entry(space_id.to_string())
            .or_default()
            .push(Detection {
                bbox,
                class_id,
                score,
                origin,
            });
    }

    Ok(Corpus {
        spaces: label_spaces,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_rounding() {
        assert_eq!(round_sig9(0.3), 0.3);
        assert_eq!(round_sig9(1.0 / 3.0), 0.333333333);
        assert_eq!(round_sig9(123456.789012), 123456.789);
    }

    #[test]
    fn missing_bbox_cites_image() {
        let doc = r#"{
            "images": [{"id": "img-7", "dataset": "a", "width": 10, "height": 10}],
            "annotations": [{"id": 0, "image_id": "img-7", "label_space": "a",
                             "category_id": 0, "score": 1.0, "origin": {"type": "gt"}}],
            "categories": [{"id": 0, "name": "car", "label_space": "a"}]
        }"#;
        let err = parse_corpus(doc).unwrap_err();
        match err {
            Error::Parse { index, image_id, field, .. } => {
                assert_eq!(index, 0);
                assert_eq!(image_id, "img-7");
                assert_eq!(field, "bbox");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_space_is_registry_error() {
        let doc = r#"{
            "images": [{"id": "i", "dataset": "a", "width": 10, "height": 10}],
            "annotations": [{"id": 0, "image_id": "i", "label_space": "zzz", "bbox": [0,0,1,1],
                             "category_id": 0, "score": 1.0, "origin": {"type": "gt"}}],
            "categories": [{"id": 0, "name": "car", "label_space": "a"}]
        }"#;
        assert!(matches!(parse_corpus(doc), Err(Error::Registry(_))));
    }

    #[test]
    fn zero_area_rejected() {
        let doc = r#"{
            "images": [{"id": "i", "dataset": "a", "width": 10, "height": 10}],
            "annotations": [{"id": 0, "image_id": "i", "label_space": "a", "bbox": [1,1,0,4],
                             "category_id": 0, "score": 1.0, "origin": {"type": "gt"}}],
            "categories": [{"id": 0, "name": "car", "label_space": "a"}]
        }"#;
        assert!(matches!(parse_corpus(doc), Err(Error::Parse { .. })));
    }
}
