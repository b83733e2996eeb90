//! Query pairs `(x_q, F1(x_q))` gathered through the user-side model.
//!
//! On disk a dataset is a directory holding `index.json`, one PNG per query
//! under `images/` and every feature tensor in `features.finv`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, IoContext, Result};
use crate::image::Image;
use crate::io::Blob;
use crate::splitnet::{FeatureTensor, SplitDescriptor, SplitModel};

#[derive(Clone, Debug, PartialEq)]
pub struct QueryPair {
    pub id: String,
    pub image: Image,
    pub features: FeatureTensor,
    pub text: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryDataset {
    pub split: SplitDescriptor,
    pub pairs: Vec<QueryPair>,
    /// Indices into `pairs`, one entry per frame group; empty when ungrouped.
    pub groups: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    split: SplitDescriptor,
    entries: Vec<IndexEntry>,
    #[serde(default)]
    groups: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    image: String,
    #[serde(default)]
    text: Option<String>,
}

const CHUNK: usize = 64;

fn query_id(i: usize) -> String {
    format!("q_{i:05}")
}

fn extract_all(sm: &SplitModel, images: &[Image]) -> Result<Vec<FeatureTensor>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        out.extend(sm.extract_batch(chunk)?);
    }
    Ok(out)
}

/// Run every query image through `F1`.
pub fn collect_queries(sm: &SplitModel, images: &[Image]) -> Result<QueryDataset> {
    collect_queries_with_text(sm, images, None)
}

pub fn collect_queries_with_text(sm: &SplitModel, images: &[Image], texts: Option<&[String]>) -> Result<QueryDataset> {
    if images.is_empty() {
        return Err(Error::input("no query images"));
    }
    if let Some(t) = texts {
        if t.len() != images.len() {
            return Err(Error::input(format!(
                "{} captions for {} query images",
                t.len(),
                images.len()
            )));
        }
    }
    let feats = extract_all(sm, images)?;
    let pairs = images
        .iter()
        .zip(feats)
        .enumerate()
        .map(|(i, (x, y))| QueryPair {
            id: query_id(i),
            image: x.clone(),
            features: y,
            text: texts.map(|t| t[i].clone()),
        })
        .collect();
    Ok(QueryDataset {
        split: sm.descriptor(),
        pairs,
        groups: Vec::new(),
    })
}

/// Collect frame groups; every group must have the same length.
pub fn collect_query_groups(sm: &SplitModel, groups: &[Vec<Image>]) -> Result<QueryDataset> {
    let k = groups.first().map_or(0, Vec::len);
    if k == 0 {
        return Err(Error::input("no query groups"));
    }
    if let Some(g) = groups.iter().position(|g| g.len() != k) {
        return Err(Error::input(format!(
            "query group {g} has {} frames, expected {k}",
            groups[g].len()
        )));
    }
    let flat: Vec<Image> = groups.iter().flatten().cloned().collect();
    let mut ds = collect_queries(sm, &flat)?;
    ds.groups = (0..groups.len()).map(|g| (g * k..(g + 1) * k).collect()).collect();
    Ok(ds)
}

impl QueryDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.split.feature_shape
    }

    /// Frames per group, or an error when the dataset is not grouped
    /// consistently.
    pub fn frames_per_group(&self) -> Result<usize> {
        let k = self
            .groups
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::input("query dataset has no frame groups"))?;
        if let Some(g) = self.groups.iter().position(|g| g.len() != k) {
            return Err(Error::input(format!(
                "query group {g} has {} frames, expected {k}",
                self.groups[g].len()
            )));
        }
        if let Some(&i) = self.groups.iter().flatten().find(|&&i| i >= self.pairs.len()) {
            return Err(Error::input(format!("query group refers to missing pair {i}")));
        }
        Ok(k)
    }

    fn validate(&self) -> Result<()> {
        for p in &self.pairs {
            if p.features.shape() != self.split.feature_shape.as_slice() {
                return Err(Error::input(format!(
                    "query `{}` has feature shape {:?}, split produces {:?}",
                    p.id,
                    p.features.shape(),
                    self.split.feature_shape
                )));
            }
        }
        Ok(())
    }

    /// Images are written as 8-bit PNGs, so only quantized images survive a
    /// round trip exactly.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        let images = dir.join("images");
        std::fs::create_dir_all(&images).at(&images)?;
        let mut entries = Vec::with_capacity(self.pairs.len());
        let mut tensors = Vec::with_capacity(self.pairs.len());
        for p in &self.pairs {
            let rel = format!("images/{}.png", p.id);
            p.image.save_png(&dir.join(&rel))?;
            tensors.push((p.id.clone(), p.features.values.clone()));
            entries.push(IndexEntry {
                id: p.id.clone(),
                image: rel,
                text: p.text.clone(),
            });
        }
        Blob::with_tensors(tensors, json!({ "kind": "query_features" })).save(&dir.join("features.finv"))?;
        let index = IndexFile {
            split: self.split.clone(),
            entries,
            groups: self.groups.clone(),
        };
        let text = serde_json::to_string_pretty(&index).expect("index serializes");
        crate::io::write_atomic(&dir.join("index.json"), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<QueryDataset> {
        let index_path = dir.join("index.json");
        let raw = std::fs::read_to_string(&index_path).at(&index_path)?;
        let index: IndexFile = serde_json::from_str(&raw).map_err(|e| Error::format(&index_path, e.to_string()))?;
        let blob = Blob::load(&dir.join("features.finv"))?;
        let mut pairs = Vec::with_capacity(index.entries.len());
        for e in index.entries {
            let values = blob
                .get(&e.id)
                .ok_or_else(|| Error::format(dir.join("features.finv"), format!("missing features for `{}`", e.id)))?
                .clone();
            pairs.push(QueryPair {
                image: Image::load_png(&dir.join(&e.image))?,
                features: FeatureTensor::new(values, index.split.split_index),
                id: e.id,
                text: e.text,
            });
        }
        let ds = QueryDataset {
            split: index.split,
            pairs,
            groups: index.groups,
        };
        ds.validate()?;
        if !ds.groups.is_empty() {
            ds.frames_per_group()?;
        }
        Ok(ds)
    }
}
