//! Domain datasets: interaction sequences, text encodings, leave-one-out
//! splits and a synthetic two-domain generator.

mod encodings;
mod interactions;
mod split;
mod synthetic;

use std::collections::HashMap;
use std::fmt;

pub use encodings::{load_text_encodings, write_text_encodings, TextEncodingMatrix};
pub use interactions::{companion_item_map, load_interactions, write_interactions};
pub use split::{leave_one_out_split, SplitBundle, UserSplit, MIN_SPLIT_LEN};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticDomain};

use crate::error::{Error, Result};

/// Short identifier of a domain (one federated client).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DomainId(String);

impl DomainId {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(Error::config("domain name must be non-empty"));
        }
        Ok(DomainId(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One user's chronologically ordered item indices within a single domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionSequence {
    pub user: String,
    pub items: Vec<usize>,
}

/// All sequences of one domain.
///
/// `item_ids[i]` is the external id of item index `i` and `item_rows[i]` its
/// row in the domain's text-encoding file.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain: DomainId,
    pub sequences: Vec<InteractionSequence>,
    pub item_count: usize,
    pub item_ids: Vec<String>,
    pub item_rows: Vec<usize>,
}

impl DomainDataset {
    pub fn user_count(&self) -> usize {
        self.sequences.len()
    }

    pub fn interaction_count(&self) -> usize {
        self.sequences.iter().map(|s| s.items.len()).sum()
    }

    /// Checks that every referenced index is in range and that the id/row
    /// tables have one entry per item.
    pub fn validate(&self) -> Result<()> {
        if self.item_ids.len() != self.item_count || self.item_rows.len() != self.item_count {
            return Err(Error::shape(format!(
                "domain {}: {} items but {} ids and {} rows",
                self.domain,
                self.item_count,
                self.item_ids.len(),
                self.item_rows.len()
            )));
        }
        for seq in &self.sequences {
            if let Some(&bad) = seq.items.iter().find(|&&i| i >= self.item_count) {
                return Err(Error::ItemOutOfRange {
                    item: bad.to_string(),
                    count: self.item_count,
                });
            }
        }
        Ok(())
    }
}

/// Iteratively drops users with fewer than `k` interactions and items with
/// fewer than `k` occurrences until neither rule removes anything, then
/// re-compacts item indices (preserving their relative order).
pub fn filter_min_interactions(dataset: &DomainDataset, k: usize) -> Result<DomainDataset> {
    if k == 0 {
        return Err(Error::config("filter threshold k must be at least 1"));
    }
    let mut sequences = dataset.sequences.clone();
    loop {
        let mut counts = vec![0usize; dataset.item_count];
        for seq in &sequences {
            for &i in &seq.items {
                counts[i] += 1;
            }
        }
        let mut changed = false;
        for seq in &mut sequences {
            let before = seq.items.len();
            seq.items.retain(|&i| counts[i] >= k);
            changed |= seq.items.len() != before;
        }
        let before = sequences.len();
        sequences.retain(|s| s.items.len() >= k);
        changed |= sequences.len() != before;
        if !changed {
            break;
        }
    }
    if sequences.is_empty() {
        return Err(Error::FullyFiltered);
    }

    let mut used = vec![false; dataset.item_count];
    for seq in &sequences {
        for &i in &seq.items {
            used[i] = true;
        }
    }
    let mut remap = vec![usize::MAX; dataset.item_count];
    let mut item_ids = Vec::new();
    let mut item_rows = Vec::new();
    for (old, _) in used.iter().enumerate().filter(|(_, &u)| u) {
        remap[old] = item_ids.len();
        item_ids.push(dataset.item_ids[old].clone());
        item_rows.push(dataset.item_rows[old]);
    }
    for seq in &mut sequences {
        for i in &mut seq.items {
            *i = remap[*i];
        }
    }
    Ok(DomainDataset {
        domain: dataset.domain.clone(),
        sequences,
        item_count: item_ids.len(),
        item_ids,
        item_rows,
    })
}

/// Builds a dataset from raw index sequences; ids are the decimal indices
/// and rows are the identity map.
pub fn dataset_from_indices(
    domain: DomainId,
    sequences: Vec<(String, Vec<usize>)>,
) -> Result<DomainDataset> {
    let mut seen = HashMap::new();
    for (user, _) in &sequences {
        if seen.insert(user.clone(), ()).is_some() {
            return Err(Error::config(format!("duplicate user {user}")));
        }
    }
    let item_count = sequences
        .iter()
        .flat_map(|(_, items)| items.iter().copied())
        .max()
        .map_or(0, |m| m + 1);
    let ds = DomainDataset {
        domain,
        sequences: sequences
            .into_iter()
            .map(|(user, items)| InteractionSequence { user, items })
            .collect(),
        item_count,
        item_ids: (0..item_count).map(|i| i.to_string()).collect(),
        item_rows: (0..item_count).collect(),
    };
    ds.validate()?;
    Ok(ds)
}
