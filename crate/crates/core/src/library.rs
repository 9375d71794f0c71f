//! Reference library snapshots.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::catalog::{ClassId, LabelCatalog};
use crate::embedding::Embedding;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// Globally curated reference data.
    Base,
    /// Embeddings contributed by a deployment site.
    Local,
}

impl Provenance {
    pub fn to_byte(self) -> u8 {
        match self {
            Provenance::Base => 0,
            Provenance::Local => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Provenance::Base),
            1 => Some(Provenance::Local),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceItem {
    pub item_id: u64,
    pub embedding: Embedding,
    /// `None` for unlabeled retrieval stores.
    pub class_id: Option<ClassId>,
    pub provenance: Provenance,
    pub source_tag: String,
}

impl ReferenceItem {
    pub fn new(
        item_id: u64,
        embedding: Embedding,
        class_id: Option<ClassId>,
        provenance: Provenance,
        source_tag: impl Into<String>,
    ) -> Self {
        Self { item_id, embedding, class_id, provenance, source_tag: source_tag.into() }
    }
}

/// Immutable, versioned collection of reference embeddings.
///
/// Every item shares `dim` and is unit-norm, item ids are unique and every
/// class id exists in the catalog. These are checked once at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LibrarySnapshot {
    generation: u64,
    dim: usize,
    catalog: LabelCatalog,
    items: Vec<ReferenceItem>,
}

impl LibrarySnapshot {
    pub fn new(
        generation: u64,
        dim: usize,
        catalog: LabelCatalog,
        items: Vec<ReferenceItem>,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::DimTooSmall(dim));
        }
        let mut seen = HashSet::with_capacity(items.len());
        for item in &items {
            validate_item(item, dim, &catalog)?;
            if !seen.insert(item.item_id) {
                return Err(Error::IdCollision(item.item_id));
            }
        }
        Ok(Self { generation, dim, catalog, items })
    }

    pub fn empty(dim: usize, catalog: LabelCatalog) -> Result<Self> {
        Self::new(0, dim, catalog, Vec::new())
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn catalog(&self) -> &LabelCatalog {
        &self.catalog
    }

    pub fn items(&self) -> &[ReferenceItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn max_item_id(&self) -> Option<u64> {
        self.items.iter().map(|i| i.item_id).max()
    }

    /// True when every item carries a class id.
    pub fn is_labeled(&self) -> bool {
        self.items.iter().all(|i| i.class_id.is_some())
    }

    pub fn count_by_provenance(&self, p: Provenance) -> usize {
        self.items.iter().filter(|i| i.provenance == p).count()
    }

    pub fn count_by_source(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for item in &self.items {
            *out.entry(item.source_tag.clone()).or_insert(0) += 1;
        }
        out
    }

    /// New snapshot at `generation + 1` holding these items followed by `extra`.
    pub fn appended(&self, extra: Vec<ReferenceItem>) -> Result<Self> {
        let ids: HashSet<u64> = self.items.iter().map(|i| i.item_id).collect();
        let mut extra_ids = HashSet::with_capacity(extra.len());
        for item in &extra {
            validate_item(item, self.dim, &self.catalog)?;
            if ids.contains(&item.item_id) || !extra_ids.insert(item.item_id) {
                return Err(Error::IdCollision(item.item_id));
            }
        }
        let mut items = Vec::with_capacity(self.items.len() + extra.len());
        items.extend_from_slice(&self.items);
        items.extend(extra);
        Ok(Self { generation: self.generation + 1, dim: self.dim, catalog: self.catalog.clone(), items })
    }

    /// Same content with every class id dropped (retrieval-only view).
    pub fn unlabeled(&self) -> Self {
        let items = self
            .items
            .iter()
            .cloned()
            .map(|mut i| {
                i.class_id = None;
                i
            })
            .collect();
        Self { items, ..self.clone() }
    }
}

fn validate_item(item: &ReferenceItem, dim: usize, catalog: &LabelCatalog) -> Result<()> {
    if item.embedding.dim() != dim {
        return Err(Error::DimMismatch { expected: dim, found: item.embedding.dim() });
    }
    if !item.embedding.is_normalized() {
        return Err(Error::NotNormalized(item.embedding.norm()));
    }
    if let Some(c) = item.class_id {
        if !catalog.contains(c) {
            return Err(Error::UnknownClassId(c as i64));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::normalize;

    fn item(id: u64, v: &[f32], class: Option<ClassId>) -> ReferenceItem {
        ReferenceItem::new(id, normalize(v).unwrap(), class, Provenance::Base, "base")
    }

    fn catalog() -> LabelCatalog {
        LabelCatalog::new(["a", "b"]).unwrap()
    }

    #[test]
    fn validates_items() {
        let ok = LibrarySnapshot::new(0, 2, catalog(), vec![item(1, &[1.0, 0.0], Some(0))]);
        assert!(ok.is_ok());
        let dup = LibrarySnapshot::new(
            0,
            2,
            catalog(),
            vec![item(1, &[1.0, 0.0], Some(0)), item(1, &[0.0, 1.0], Some(1))],
        );
        assert!(matches!(dup, Err(Error::IdCollision(1))));
        let bad_class = LibrarySnapshot::new(0, 2, catalog(), vec![item(1, &[1.0, 0.0], Some(9))]);
        assert!(matches!(bad_class, Err(Error::UnknownClassId(9))));
        let bad_dim = LibrarySnapshot::new(0, 3, catalog(), vec![item(1, &[1.0, 0.0], Some(0))]);
        assert!(matches!(bad_dim, Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn appended_bumps_generation_and_leaves_original() {
        let base = LibrarySnapshot::new(4, 2, catalog(), vec![item(1, &[1.0, 0.0], Some(0))]).unwrap();
        let merged = base.appended(vec![item(2, &[0.0, 1.0], None)]).unwrap();
        assert_eq!(merged.generation(), 5);
        assert_eq!(merged.len(), 2);
        assert_eq!(base.len(), 1);
        assert!(matches!(base.appended(vec![item(1, &[0.0, 1.0], None)]), Err(Error::IdCollision(1))));
    }
}
