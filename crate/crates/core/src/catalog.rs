use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassId = u16;

/// Ordered set of diagnostic categories; class ids are `0..len` in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelCatalog {
    names: Vec<String>,
    #[serde(skip)]
    by_name: HashMap<String, ClassId>,
}

impl LabelCatalog {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() > ClassId::MAX as usize {
            return Err(Error::InvalidCatalog(format!("{} classes is too many", names.len())));
        }
        let mut by_name = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::InvalidCatalog(format!("class {i} has an empty name")));
            }
            if by_name.insert(name.clone(), i as ClassId).is_some() {
                return Err(Error::InvalidCatalog(format!("duplicate class name {name:?}")));
            }
        }
        Ok(Self { names, by_name })
    }

    pub fn empty() -> Self {
        Self { names: Vec::new(), by_name: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ClassId) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<ClassId> {
        self.by_name.get(name).copied()
    }

    /// Like [`id`](Self::id) but reports an unknown label as an error.
    pub fn resolve(&self, name: &str) -> Result<ClassId> {
        self.id(name).ok_or_else(|| Error::UnknownLabel(name.to_string()))
    }

    pub fn contains(&self, id: ClassId) -> bool {
        (id as usize) < self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &str)> {
        self.names.iter().enumerate().map(|(i, n)| (i as ClassId, n.as_str()))
    }
}

impl TryFrom<Vec<String>> for LabelCatalog {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        LabelCatalog::new(names)
    }
}

impl From<LabelCatalog> for Vec<String> {
    fn from(c: LabelCatalog) -> Self {
        c.names
    }
}
