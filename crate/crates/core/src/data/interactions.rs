use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{DomainDataset, DomainId, InteractionSequence};
use crate::error::{Error, Result};

/// Path of the `*.items.tsv` id map that accompanies an interaction file
/// (`office.inter` -> `office.items.tsv`).
pub fn companion_item_map(path: &Path) -> PathBuf {
    path.with_extension("items.tsv")
}

/// Loads an interaction file (`user<TAB>item item ...` per line).
///
/// When the companion id map exists, item tokens are external ids resolved
/// through it and indices follow the map's order of first appearance;
/// otherwise tokens must be 0-based integer indices.
pub fn load_interactions(path: &Path, domain: DomainId) -> Result<DomainDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let map_path = companion_item_map(path);
    let id_map = if map_path.exists() {
        Some(load_item_map(&map_path)?)
    } else {
        None
    };

    let mut sequences = Vec::new();
    let mut users = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let (user, rest) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `user<TAB>items`".into()))?;
        if user.is_empty() {
            return Err(parse_err("empty user id".into()));
        }
        if !users.insert(user.to_string()) {
            return Err(parse_err(format!("duplicate user {user}")));
        }
        let mut items = Vec::new();
        for tok in rest.split_whitespace() {
            let idx = match &id_map {
                Some(map) => *map.index.get(tok).ok_or_else(|| Error::ItemOutOfRange {
                    item: tok.to_string(),
                    count: map.ids.len(),
                })?,
                None => tok
                    .parse::<usize>()
                    .map_err(|_| parse_err(format!("item `{tok}` is not an index")))?,
            };
            items.push(idx);
        }
        if items.is_empty() {
            return Err(parse_err("user has no items".into()));
        }
        sequences.push(InteractionSequence {
            user: user.to_string(),
            items,
        });
    }
    if sequences.is_empty() {
        return Err(Error::NoSequences(path.to_path_buf()));
    }

    let item_count = sequences
        .iter()
        .flat_map(|s| s.items.iter().copied())
        .max()
        .unwrap()
        + 1;
    let (item_ids, item_rows) = match id_map {
        Some(map) => (
            map.ids[..item_count].to_vec(),
            map.rows[..item_count].to_vec(),
        ),
        None => ((0..item_count).map(|i| i.to_string()).collect(), (0..item_count).collect()),
    };
    let ds = DomainDataset {
        domain,
        sequences,
        item_count,
        item_ids,
        item_rows,
    };
    ds.validate()?;
    Ok(ds)
}

struct ItemMap {
    ids: Vec<String>,
    rows: Vec<usize>,
    index: HashMap<String, usize>,
}

fn load_item_map(path: &Path) -> Result<ItemMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = ItemMap {
        ids: Vec::new(),
        rows: Vec::new(),
        index: HashMap::new(),
    };
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: msg.to_string(),
        };
        let (id, row) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `item_id<TAB>row_index`"))?;
        let row: usize = row
            .trim()
            .parse()
            .map_err(|_| parse_err("row index is not an integer"))?;
        if map.index.contains_key(id) {
            continue;
        }
        map.index.insert(id.to_string(), map.ids.len());
        map.ids.push(id.to_string());
        map.rows.push(row);
    }
    Ok(map)
}

/// Writes `dataset` as an interaction file plus its companion id map, using
/// the dataset's external item ids.
pub fn write_interactions(path: &Path, dataset: &DomainDataset) -> Result<()> {
    let mut inter = String::new();
    for seq in &dataset.sequences {
        inter.push_str(&seq.user);
        inter.push('\t');
        for (n, &i) in seq.items.iter().enumerate() {
            if n > 0 {
                inter.push(' ');
            }
            inter.push_str(&dataset.item_ids[i]);
        }
        inter.push('\n');
    }
    let mut map = String::new();
    for (id, row) in dataset.item_ids.iter().zip(&dataset.item_rows) {
        writeln!(map, "{id}\t{row}").unwrap();
    }
    crate::binio::write_file(path, inter.as_bytes())?;
    crate::binio::write_file(&companion_item_map(path), map.as_bytes())
}
