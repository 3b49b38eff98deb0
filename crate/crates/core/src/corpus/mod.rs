//! Items, embedding tables, interaction sequences and their preprocessing.

mod io;
mod preprocess;
mod synth;

use std::collections::HashMap;

use crate::error::{Error, Result};

pub use io::{
    load_data_dir, load_data_dirs, load_embedding_table, load_interactions, read_embedding_matrix, write_domain_dir,
    write_embedding_table, write_interactions, EMBEDDING_MAGIC, EMBEDDING_VERSION, INDEX_FILE, INTERACTIONS_FILE,
    MATRIX_FILE,
};
pub use preprocess::{
    five_core_filter, k_core_filter, leave_one_out_split, truncate_window, EvalInstance, SplitCorpus,
};
pub use synth::{generate_synthetic_corpus, SyntheticCorpus, SyntheticSpec};

/// Dense handle of an item inside one [`EmbeddingTable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ItemId(pub u32);

impl ItemId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemRef {
    pub domain: String,
    pub token: String,
    /// Row of the text embedding.
    pub row: usize,
    /// Row of the word-drop augmented embedding, if one was extracted.
    pub aug_row: Option<usize>,
}

/// Text-embedding rows plus the `(domain, token)` index over them.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    rows: Vec<f32>,
    items: Vec<ItemRef>,
    index: HashMap<(String, String), ItemId>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, rows: Vec<f32>, items: Vec<ItemRef>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Format("embedding dim must be positive".into()));
        }
        if !rows.len().is_multiple_of(dim) {
            return Err(Error::Format(format!(
                "{} values do not form rows of width {dim}",
                rows.len()
            )));
        }
        if rows.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidInput("NaN in embedding rows".into()));
        }
        let n_rows = rows.len() / dim;
        let mut index = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            for r in std::iter::once(item.row).chain(item.aug_row) {
                if r >= n_rows {
                    return Err(Error::Range(format!(
                        "item ({}, {}) references row {r} of a {n_rows}-row matrix",
                        item.domain, item.token
                    )));
                }
            }
            let key = (item.domain.clone(), item.token.clone());
            if index.insert(key, ItemId(i as u32)).is_some() {
                return Err(Error::DuplicateKey {
                    domain: item.domain.clone(),
                    token: item.token.clone(),
                });
            }
        }
        Ok(Self {
            dim,
            rows,
            items,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row_count(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.rows[r * self.dim..(r + 1) * self.dim]
    }

    pub fn raw_rows(&self) -> &[f32] {
        &self.rows
    }

    pub fn items(&self) -> &[ItemRef] {
        &self.items
    }

    pub fn item(&self, id: ItemId) -> &ItemRef {
        &self.items[id.index()]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn lookup(&self, domain: &str, token: &str) -> Option<ItemId> {
        self.index.get(&(domain.to_string(), token.to_string())).copied()
    }

    /// Original text embedding of an item.
    pub fn vector(&self, id: ItemId) -> &[f32] {
        self.row(self.item(id).row)
    }

    /// Item ids of one domain in `(domain, token)` lexicographic order.
    pub fn domain_items(&self, domain: &str) -> Vec<ItemId> {
        let mut ids: Vec<ItemId> = (0..self.items.len() as u32)
            .map(ItemId)
            .filter(|&id| self.item(id).domain == domain)
            .collect();
        ids.sort_by(|a, b| self.item(*a).token.cmp(&self.item(*b).token));
        ids
    }

    /// Distinct domains, sorted.
    pub fn domains(&self) -> Vec<String> {
        let mut d: Vec<String> = self.items.iter().map(|i| i.domain.clone()).collect();
        d.sort();
        d.dedup();
        d
    }

    /// Table restricted to one domain's items, rows renumbered densely.
    pub fn domain_subset(&self, domain: &str) -> Result<Self> {
        let mut rows = Vec::new();
        let mut items = Vec::new();
        for item in self.items.iter().filter(|i| i.domain == domain) {
            let mut push = |r: usize| {
                rows.extend_from_slice(self.row(r));
                rows.len() / self.dim - 1
            };
            let row = push(item.row);
            let aug_row = item.aug_row.map(push);
            items.push(ItemRef {
                row,
                aug_row,
                ..item.clone()
            });
        }
        if items.is_empty() {
            return Err(Error::EmptyData(format!("no items in domain {domain}")));
        }
        Self::new(self.dim, rows, items)
    }

    /// Concatenates two tables; item ids of `other` are shifted by `self.len()`.
    pub fn merge(mut self, other: &EmbeddingTable) -> Result<(Self, u32)> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch(format!(
                "cannot merge embedding tables of width {} and {}",
                self.dim, other.dim
            )));
        }
        let row_shift = self.row_count();
        let id_shift = self.items.len() as u32;
        self.rows.extend_from_slice(&other.rows);
        for item in &other.items {
            let shifted = ItemRef {
                row: item.row + row_shift,
                aug_row: item.aug_row.map(|r| r + row_shift),
                ..item.clone()
            };
            let key = (shifted.domain.clone(), shifted.token.clone());
            if self.index.contains_key(&key) {
                return Err(Error::DuplicateKey {
                    domain: shifted.domain,
                    token: shifted.token,
                });
            }
            self.index.insert(key, ItemId(self.items.len() as u32));
            self.items.push(shifted);
        }
        Ok((self, id_shift))
    }
}

/// One user's chronologically ordered interactions within one domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionSequence {
    pub user: String,
    pub domain: String,
    pub items: Vec<ItemId>,
    pub timestamps: Vec<i64>,
}

impl InteractionSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn check(&self, table: &EmbeddingTable) -> Result<()> {
        if self.items.is_empty() || self.items.len() != self.timestamps.len() {
            return Err(Error::InvalidInput(format!(
                "sequence of user {} is malformed",
                self.user
            )));
        }
        if self.timestamps.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidInput(format!(
                "timestamps of user {} decrease",
                self.user
            )));
        }
        if let Some(bad) = self.items.iter().find(|&&id| table.item(id).domain != self.domain) {
            return Err(Error::InvalidInput(format!(
                "item {} of user {} belongs to domain {}, not {}",
                table.item(*bad).token,
                self.user,
                table.item(*bad).domain,
                self.domain
            )));
        }
        Ok(())
    }
}
