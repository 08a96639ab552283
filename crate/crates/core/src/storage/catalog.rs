//! Relation catalog, persisted as one JSON document next to the heap files.

use super::page::StorageError;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CATALOG_FILE: &str = "catalog.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationMeta {
    pub name: String,
    /// Heap file name, relative to the catalog directory.
    pub file: String,
    pub page_size: u32,
    pub page_count: u64,
    pub row_count: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Catalog {
    pub page_size: u32,
    pub relations: Vec<RelationMeta>,
}

impl Catalog {
    pub fn save(&self, dir: &Path) -> Result<(), StorageError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| StorageError::Catalog(e.to_string()))?;
        std::fs::write(dir.join(CATALOG_FILE), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Catalog, StorageError> {
        let path = dir.join(CATALOG_FILE);
        let bytes = std::fs::read(&path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| StorageError::Catalog(format!("{}: {e}", path.display())))
    }

    /// Relation id (index) and metadata by name.
    pub fn relation(&self, name: &str) -> Option<(u32, &RelationMeta)> {
        self.relations
            .iter()
            .enumerate()
            .find(|(_, r)| r.name == name)
            .map(|(i, r)| (i as u32, r))
    }

    pub fn relation_path(&self, dir: &Path, rel: u32) -> PathBuf {
        dir.join(&self.relations[rel as usize].file)
    }

    pub fn total_pages(&self) -> u64 {
        self.relations.iter().map(|r| r.page_count).sum()
    }
}
