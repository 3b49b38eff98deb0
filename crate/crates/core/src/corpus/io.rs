use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::corpus::{EmbeddingTable, InteractionSequence, ItemId, ItemRef};
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"UEMB";
pub const EMBEDDING_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub const INDEX_FILE: &str = "item_index.tsv";
pub const MATRIX_FILE: &str = "embeddings.bin";
pub const INTERACTIONS_FILE: &str = "inters.tsv";

const INDEX_HEADER: &str = "domain\ttoken\trow\taug_row";
const INTERACTIONS_HEADER: &str = "user\tdomain\ttoken\ttimestamp";

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses an `embeddings.bin` payload into `(dim, rows)`.
pub fn read_embedding_matrix(bytes: &[u8]) -> Result<(usize, Vec<f32>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "embedding file is {} bytes, shorter than its header",
            bytes.len()
        )));
    }
    if &bytes[..4] != EMBEDDING_MAGIC {
        return Err(Error::Format("embedding file does not start with UEMB".into()));
    }
    let version = read_u32(bytes, 4);
    if version != EMBEDDING_VERSION {
        return Err(Error::Format(format!("unsupported embedding format version {version}")));
    }
    let rows = read_u32(bytes, 8) as usize;
    let dim = read_u32(bytes, 12) as usize;
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("declared matrix size overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "declared {rows}×{dim} matrix needs {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((dim, values))
}

fn parse_index(text: &str) -> Result<Vec<ItemRef>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == INDEX_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `{INDEX_HEADER}`"),
            })
        }
    }
    let mut items = Vec::new();
    for (i, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_err = |message: String| Error::Parse { line: i + 1, message };
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, found {}", fields.len())));
        }
        let row = fields[2]
            .parse::<usize>()
            .map_err(|e| parse_err(format!("bad row `{}`: {e}", fields[2])))?;
        let aug_row = match fields[3] {
            "" => None,
            s => Some(
                s.parse::<usize>()
                    .map_err(|e| parse_err(format!("bad aug_row `{s}`: {e}")))?,
            ),
        };
        items.push(ItemRef {
            domain: fields[0].to_string(),
            token: fields[1].to_string(),
            row,
            aug_row,
        });
    }
    Ok(items)
}

pub fn load_embedding_table(index_path: &Path, matrix_path: &Path) -> Result<EmbeddingTable> {
    let bytes = fs::read(matrix_path).map_err(|e| Error::io(matrix_path, e))?;
    let (dim, rows) = read_embedding_matrix(&bytes)?;
    let text = fs::read_to_string(index_path).map_err(|e| Error::io(index_path, e))?;
    let items = parse_index(&text)?;
    EmbeddingTable::new(dim, rows, items)
}

/// Writes `item_index.tsv` and `embeddings.bin` into `dir`.
pub fn write_embedding_table(table: &EmbeddingTable, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::from(INDEX_HEADER);
    index.push('\n');
    for item in table.items() {
        let aug = item.aug_row.map(|r| r.to_string()).unwrap_or_default();
        index.push_str(&format!("{}\t{}\t{}\t{}\n", item.domain, item.token, item.row, aug));
    }
    let index_path = dir.join(INDEX_FILE);
    fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;

    let mut bytes = Vec::with_capacity(HEADER_LEN + table.raw_rows().len() * 4);
    bytes.extend_from_slice(EMBEDDING_MAGIC);
    bytes.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(table.row_count() as u32).to_le_bytes());
    bytes.extend_from_slice(&(table.dim() as u32).to_le_bytes());
    for v in table.raw_rows() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let matrix_path = dir.join(MATRIX_FILE);
    fs::write(&matrix_path, bytes).map_err(|e| Error::io(&matrix_path, e))
}

/// Reads `inters.tsv`, producing one sequence per (user, domain), ordered by
/// (domain, user). Rows are sorted by timestamp with ties kept in file order.
pub fn load_interactions(path: &Path, table: &EmbeddingTable) -> Result<Vec<InteractionSequence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == INTERACTIONS_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `{INTERACTIONS_HEADER}`"),
            })
        }
    }
    let mut groups: HashMap<(String, String), Vec<(i64, ItemId)>> = HashMap::new();
    for (i, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let (user, domain, token) = (fields[0], fields[1], fields[2]);
        let ts = fields[3].parse::<i64>().map_err(|e| Error::Parse {
            line: i + 1,
            message: format!("bad timestamp `{}`: {e}", fields[3]),
        })?;
        let id = table.lookup(domain, token).ok_or_else(|| Error::MissingEmbedding {
            domain: domain.to_string(),
            token: token.to_string(),
        })?;
        groups
            .entry((domain.to_string(), user.to_string()))
            .or_default()
            .push((ts, id));
    }
    let mut keys: Vec<(String, String)> = groups.keys().cloned().collect();
    keys.sort();
    Ok(keys
        .into_iter()
        .map(|key| {
            let mut rows = groups.remove(&key).expect("key from map");
            rows.sort_by_key(|&(ts, _)| ts);
            let (domain, user) = key;
            InteractionSequence {
                user,
                domain,
                items: rows.iter().map(|&(_, id)| id).collect(),
                timestamps: rows.iter().map(|&(ts, _)| ts).collect(),
            }
        })
        .collect())
}

pub fn write_interactions(sequences: &[InteractionSequence], table: &EmbeddingTable, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(out, "{INTERACTIONS_HEADER}")?;
        for seq in sequences {
            for (&id, &ts) in seq.items.iter().zip(&seq.timestamps) {
                writeln!(out, "{}\t{}\t{}\t{}", seq.user, seq.domain, table.item(id).token, ts)?;
            }
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Loads `item_index.tsv`, `embeddings.bin` and `inters.tsv` from `dir`.
pub fn load_data_dir(dir: &Path) -> Result<(EmbeddingTable, Vec<InteractionSequence>)> {
    let table = load_embedding_table(&dir.join(INDEX_FILE), &dir.join(MATRIX_FILE))?;
    let sequences = load_interactions(&dir.join(INTERACTIONS_FILE), &table)?;
    Ok((table, sequences))
}

/// Pools several data directories into one table. Item ids of later
/// directories are shifted past the earlier ones.
pub fn load_data_dirs(dirs: &[impl AsRef<Path>]) -> Result<(EmbeddingTable, Vec<InteractionSequence>)> {
    let mut pooled: Option<(EmbeddingTable, Vec<InteractionSequence>)> = None;
    for dir in dirs {
        let (table, mut sequences) = load_data_dir(dir.as_ref())?;
        pooled = Some(match pooled {
            None => (table, sequences),
            Some((acc, mut seqs)) => {
                let (merged, shift) = acc.merge(&table)?;
                for s in &mut sequences {
                    for id in &mut s.items {
                        id.0 += shift;
                    }
                }
                seqs.extend(sequences);
                (merged, seqs)
            }
        });
    }
    pooled.ok_or_else(|| Error::EmptyData("no data directories given".into()))
}

/// Writes the corpus files of one domain into `dir`: its slice of `table`
/// and its sequences from `sequences` (ids of `table`).
pub fn write_domain_dir(
    table: &EmbeddingTable,
    sequences: &[InteractionSequence],
    domain: &str,
    dir: &Path,
) -> Result<()> {
    write_embedding_table(&table.domain_subset(domain)?, dir)?;
    let own: Vec<InteractionSequence> = sequences.iter().filter(|s| s.domain == domain).cloned().collect();
    write_interactions(&own, table, &dir.join(INTERACTIONS_FILE))
}
