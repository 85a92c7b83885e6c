//! Interaction ingestion and preprocessing.
//!
//! Raw interaction logs are parsed into a [`Corpus`] of chronologically
//! ordered [`UserSequence`]s over a dense [`ItemCatalog`]. Preprocessing then
//! drops items without titles, applies iterative k-core filtering, and splits
//! every user leave-one-out style into train / validation / test.

mod filter;
mod io;
mod parse;
mod split;
mod synthetic;

use std::collections::HashMap;

pub use filter::{drop_untitled, kcore_filter};
pub use io::{read_catalog, read_corpus, read_split, write_catalog, write_corpus, write_split};
pub use parse::{
    parse_amazon_metadata, parse_amazon_reviews, parse_movielens, parse_movielens_titles,
};
pub use split::{chronological_split, SplitCorpus, UserSplit};
pub use synthetic::{category_of, synthetic_corpus, SyntheticConfig, CATEGORY_WORDS};

use crate::error::{Error, Result};

/// Bidirectional map between external item ids, dense indices and titles.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ItemCatalog {
    external_ids: Vec<String>,
    titles: Vec<String>,
    index: HashMap<String, usize>,
}

impl ItemCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the index of `external_id`, registering it if unseen.
    pub fn intern(&mut self, external_id: &str) -> usize {
        if let Some(&i) = self.index.get(external_id) {
            return i;
        }
        let i = self.external_ids.len();
        self.external_ids.push(external_id.to_string());
        self.titles.push(String::new());
        self.index.insert(external_id.to_string(), i);
        i
    }

    /// Appends a new entry. Fails on a duplicate external id.
    pub fn push(&mut self, external_id: &str, title: &str) -> Result<usize> {
        if self.index.contains_key(external_id) {
            return Err(Error::invalid(format!("duplicate item id {external_id:?}")));
        }
        let i = self.intern(external_id);
        self.titles[i] = clean_title(title);
        Ok(i)
    }

    pub fn len(&self) -> usize {
        self.external_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.external_ids.is_empty()
    }

    pub fn title(&self, index: usize) -> &str {
        &self.titles[index]
    }

    pub fn external_id(&self, index: usize) -> &str {
        &self.external_ids[index]
    }

    pub fn index_of(&self, external_id: &str) -> Option<usize> {
        self.index.get(external_id).copied()
    }

    pub fn set_title(&mut self, index: usize, title: &str) {
        self.titles[index] = clean_title(title);
    }

    pub fn check(&self, index: usize) -> Result<()> {
        if index < self.len() {
            Ok(())
        } else {
            Err(Error::UnknownItem {
                index,
                catalog_size: self.len(),
            })
        }
    }

    /// Builds a catalog of the entries flagged in `keep`, in index order.
    /// Returns the catalog and the old -> new index map.
    fn retain(&self, keep: &[bool]) -> (ItemCatalog, Vec<Option<usize>>) {
        let mut out = ItemCatalog::new();
        let mut remap = vec![None; self.len()];
        for (old, &k) in keep.iter().enumerate() {
            if k {
                let new = out.intern(&self.external_ids[old]);
                out.titles[new] = self.titles[old].clone();
                remap[old] = Some(new);
            }
        }
        (out, remap)
    }
}

/// Titles are single-line; tabs and newlines would corrupt the TSV artifacts.
fn clean_title(title: &str) -> String {
    title
        .chars()
        .map(|c| if c.is_control() { ' ' } else { c })
        .collect::<String>()
        .trim()
        .to_string()
}

/// One user's interactions, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct UserSequence {
    pub user_id: String,
    pub items: Vec<usize>,
    pub timestamps: Option<Vec<i64>>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub catalog: ItemCatalog,
    pub sequences: Vec<UserSequence>,
}

impl Corpus {
    pub fn interaction_count(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    /// Verifies every referenced item exists in the catalog.
    pub fn validate(&self) -> Result<()> {
        for seq in &self.sequences {
            for &i in &seq.items {
                self.catalog.check(i)?;
            }
        }
        Ok(())
    }

    /// Assigns titles by external id. Items missing from `titles` keep an
    /// empty title.
    pub fn attach_titles(&mut self, titles: &HashMap<String, String>) {
        for i in 0..self.catalog.len() {
            if let Some(t) = titles.get(self.catalog.external_id(i)) {
                self.catalog.set_title(i, t);
            }
        }
    }

    /// Keeps only the flagged items, re-densifying indices in their original
    /// order. Users left with no interactions are dropped.
    pub(crate) fn retain_items(&self, keep: &[bool]) -> Corpus {
        let (catalog, remap) = self.catalog.retain(keep);
        let sequences = self
            .sequences
            .iter()
            .filter_map(|seq| {
                let mut items = Vec::with_capacity(seq.items.len());
                let mut ts = seq.timestamps.as_ref().map(|_| Vec::new());
                for (pos, &i) in seq.items.iter().enumerate() {
                    if let Some(new) = remap[i] {
                        items.push(new);
                        if let (Some(out), Some(src)) = (ts.as_mut(), seq.timestamps.as_ref()) {
                            out.push(src[pos]);
                        }
                    }
                }
                (!items.is_empty()).then(|| UserSequence {
                    user_id: seq.user_id.clone(),
                    items,
                    timestamps: ts,
                })
            })
            .collect();
        Corpus { catalog, sequences }
    }

    /// Occurrence count of every item across all sequences.
    pub fn item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.catalog.len()];
        for seq in &self.sequences {
            for &i in &seq.items {
                counts[i] += 1;
            }
        }
        counts
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetStats {
    pub user_count: usize,
    pub item_count: usize,
    pub interaction_count: usize,
    pub mean_length: f64,
    pub density: f64,
}

pub fn stats(corpus: &Corpus) -> DatasetStats {
    let users = corpus.sequences.len();
    let items = corpus.catalog.len();
    let interactions = corpus.interaction_count();
    let mean_length = if users == 0 {
        0.0
    } else {
        interactions as f64 / users as f64
    };
    let density = if users == 0 || items == 0 {
        0.0
    } else {
        interactions as f64 / (users as f64 * items as f64)
    };
    DatasetStats {
        user_count: users,
        item_count: items,
        interaction_count: interactions,
        mean_length,
        density,
    }
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "users={} items={} interactions={} mean_length={:.2} density={:.1e}",
            self.user_count, self.item_count, self.interaction_count, self.mean_length, self.density
        )
    }
}
