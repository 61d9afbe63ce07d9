use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BowVector, Corpus, CorpusError, Document, DroppedDocument, RawRecord, Vocabulary};
use crate::util::write_atomic;

pub const VOCAB_FILE: &str = "vocab.json";
pub const BOW_FILE: &str = "bow.bin";
pub const BOW_SIDECAR: &str = "bow.json";
pub const MANIFEST_FILE: &str = "manifest.json";
const DOCUMENTS_FILE: &str = "documents.jsonl";

/// Reads `label<TAB>text` lines. A line without a tab is an unlabeled text; blank lines are
/// skipped. Ids are the 0-based line numbers, so they stay stable across edits elsewhere.
pub fn read_tsv(path: &Path) -> Result<Vec<RawRecord>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    Ok(parse_tsv(&text))
}

pub(crate) fn parse_tsv(text: &str) -> Vec<RawRecord> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let (label, body) = match line.split_once('\t') {
                Some((l, t)) => (Some(l.trim()).filter(|l| !l.is_empty()), t),
                None => (None, line),
            };
            RawRecord {
                id: i.to_string(),
                label: label.map(str::to_owned),
                text: body.to_owned(),
            }
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ArraySpec {
    name: String,
    dtype: String,
    offset: usize,
    length: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BowSidecar {
    format: String,
    shape: [usize; 2],
    arrays: Vec<ArraySpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestDoc {
    id: String,
    label: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusManifest {
    num_documents: usize,
    vocab_size: usize,
    documents: Vec<ManifestDoc>,
    dropped: Vec<DroppedDocument>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CorpusError> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| CorpusError::json(path, e))?;
    write_atomic(path, &bytes).map_err(|e| CorpusError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CorpusError> {
    let bytes = fs::read(path).map_err(|e| CorpusError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CorpusError::json(path, e))
}

/// Writes the corpus as `vocab.json`, a CSR int32 `bow.bin` with its `bow.json` sidecar,
/// `manifest.json` and `documents.jsonl`.
pub fn write_corpus_dir(dir: &Path, corpus: &Corpus) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
    write_json(&dir.join(VOCAB_FILE), &corpus.vocabulary)?;

    let mut indptr: Vec<i32> = Vec::with_capacity(corpus.bows.len() + 1);
    let mut indices: Vec<i32> = Vec::new();
    let mut counts: Vec<i32> = Vec::new();
    indptr.push(0);
    for bow in &corpus.bows {
        for &(i, c) in bow.entries() {
            indices.push(i as i32);
            counts.push(c as i32);
        }
        indptr.push(indices.len() as i32);
    }
    let mut bytes = Vec::with_capacity(4 * (indptr.len() + 2 * indices.len()));
    let mut arrays = Vec::new();
    for (name, data) in [("indptr", &indptr), ("indices", &indices), ("counts", &counts)] {
        arrays.push(ArraySpec {
            name: name.into(),
            dtype: "<i4".into(),
            offset: bytes.len(),
            length: data.len(),
        });
        for v in data.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bow_path = dir.join(BOW_FILE);
    write_atomic(&bow_path, &bytes).map_err(|e| CorpusError::io(&bow_path, e))?;
    write_json(
        &dir.join(BOW_SIDECAR),
        &BowSidecar {
            format: "csr".into(),
            shape: [corpus.bows.len(), corpus.vocabulary.len()],
            arrays,
        },
    )?;

    write_json(
        &dir.join(MANIFEST_FILE),
        &CorpusManifest {
            num_documents: corpus.documents.len(),
            vocab_size: corpus.vocabulary.len(),
            documents: corpus
                .documents
                .iter()
                .map(|d| ManifestDoc {
                    id: d.id.clone(),
                    label: d.label.clone(),
                })
                .collect(),
            dropped: corpus.dropped.clone(),
        },
    )?;

    let mut lines = String::new();
    for d in &corpus.documents {
        lines.push_str(&serde_json::to_string(d).expect("document serializes"));
        lines.push('\n');
    }
    let docs_path = dir.join(DOCUMENTS_FILE);
    write_atomic(&docs_path, lines.as_bytes()).map_err(|e| CorpusError::io(&docs_path, e))
}

fn read_i32_array(bytes: &[u8], spec: &ArraySpec) -> Result<Vec<i32>, CorpusError> {
    if spec.dtype != "<i4" {
        return Err(CorpusError::Format(format!("unsupported dtype {}", spec.dtype)));
    }
    let end = spec.offset + 4 * spec.length;
    let slice = bytes
        .get(spec.offset..end)
        .ok_or_else(|| CorpusError::Format(format!("array {} exceeds bow.bin", spec.name)))?;
    Ok(slice
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_corpus_dir(dir: &Path) -> Result<Corpus, CorpusError> {
    let vocabulary: Vocabulary = read_json(&dir.join(VOCAB_FILE))?;
    let sidecar: BowSidecar = read_json(&dir.join(BOW_SIDECAR))?;
    let manifest: CorpusManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let bow_path = dir.join(BOW_FILE);
    let bytes = fs::read(&bow_path).map_err(|e| CorpusError::io(&bow_path, e))?;

    let array = |name: &str| -> Result<Vec<i32>, CorpusError> {
        let spec = sidecar
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| CorpusError::Format(format!("bow.json lacks array {name}")))?;
        read_i32_array(&bytes, spec)
    };
    let indptr = array("indptr")?;
    let indices = array("indices")?;
    let counts = array("counts")?;
    let [rows, cols] = sidecar.shape;
    if cols != vocabulary.len() || indptr.len() != rows + 1 || indices.len() != counts.len() {
        return Err(CorpusError::Format("bow shape disagrees with vocabulary".into()));
    }
    let mut bows = Vec::with_capacity(rows);
    for r in 0..rows {
        let (lo, hi) = (indptr[r] as usize, indptr[r + 1] as usize);
        if lo > hi || hi > indices.len() {
            return Err(CorpusError::Format(format!("bad indptr at row {r}")));
        }
        let mut entries = Vec::with_capacity(hi - lo);
        for j in lo..hi {
            let (i, c) = (indices[j], counts[j]);
            if i < 0 || i as usize >= cols || c < 0 {
                return Err(CorpusError::Format(format!("bad bow entry at row {r}")));
            }
            entries.push((i as usize, c as u32));
        }
        bows.push(BowVector::from_entries(cols, entries));
    }

    let docs_path = dir.join(DOCUMENTS_FILE);
    let text = fs::read_to_string(&docs_path).map_err(|e| CorpusError::io(&docs_path, e))?;
    let documents: Vec<Document> = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CorpusError::json(&docs_path, e)))
        .collect::<Result<_, _>>()?;
    if documents.len() != rows || manifest.num_documents != rows {
        return Err(CorpusError::Format(
            "document count disagrees between manifest, documents and bow".into(),
        ));
    }
    Ok(Corpus {
        documents,
        vocabulary,
        bows,
        dropped: manifest.dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusOptions;

    #[test]
    fn tsv_parsing() {
        let recs = parse_tsv("sports\tBig match tonight\n\nbusiness\tStocks\tfall\nno label here\n");
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].id, "0");
        assert_eq!(recs[0].label.as_deref(), Some("sports"));
        assert_eq!(recs[1].id, "2");
        assert_eq!(recs[1].text, "Stocks\tfall");
        assert_eq!(recs[2].label, None);
    }

    #[test]
    fn corpus_dir_round_trip() {
        let tsv = "a\tfootball match goal\na\tfootball goal keeper\nb\tmarket stocks trader\nb\tmarket trader bank\nb\tthe of\n";
        let opts = CorpusOptions {
            max_df_fraction: 1.0,
            ..Default::default()
        };
        let corpus = Corpus::build(parse_tsv(tsv), &opts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus_dir(dir.path(), &corpus).unwrap();
        let back = read_corpus_dir(dir.path()).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(back.dropped.len(), 1);
    }

    #[test]
    fn truncated_bow_is_reported() {
        let corpus = Corpus::build(
            parse_tsv("a\tfootball match\na\tfootball match\n"),
            &CorpusOptions {
                max_df_fraction: 1.0,
                ..Default::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus_dir(dir.path(), &corpus).unwrap();
        let p = dir.path().join(BOW_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_corpus_dir(dir.path()), Err(CorpusError::Format(_))));
    }
}
