use std::fs;
use std::path::{Path, PathBuf};

use super::{ExtensionError, ExtensionRecord, ExtensionReport};
use crate::util::write_atomic;

pub const EXTENSIONS_FILE: &str = "extensions.jsonl";
pub const REPORT_FILE: &str = "report.json";

fn cache_err(path: &Path, message: impl ToString) -> ExtensionError {
    ExtensionError::Cache {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

/// One JSON file per record at `<dir>/<generator>/<prompt_hash>.json`. Writes go through a
/// temp file and a rename, so concurrent writers never leave a torn record behind.
#[derive(Debug, Clone)]
pub struct ExtensionCache {
    dir: PathBuf,
}

impl ExtensionCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ExtensionCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, generator: &str, prompt_hash: &str) -> PathBuf {
        let safe: String = generator
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        self.dir.join(safe).join(format!("{prompt_hash}.json"))
    }

    pub fn get(&self, generator: &str, prompt_hash: &str) -> Result<Option<ExtensionRecord>, ExtensionError> {
        let path = self.path(generator, prompt_hash);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(cache_err(&path, e)),
        };
        match serde_json::from_slice::<ExtensionRecord>(&bytes) {
            Ok(rec) if rec.prompt_hash == prompt_hash => Ok(Some(rec)),
            Ok(_) => Ok(None),
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {}: {e}", path.display());
                Ok(None)
            }
        }
    }

    pub fn put(&self, record: &ExtensionRecord) -> Result<(), ExtensionError> {
        let path = self.path(&record.generator_name, &record.prompt_hash);
        let bytes = serde_json::to_vec_pretty(record).map_err(|e| cache_err(&path, e))?;
        write_atomic(&path, &bytes).map_err(|e| cache_err(&path, e))
    }

    /// Number of cached records across all generators.
    pub fn len(&self) -> usize {
        let Ok(gens) = fs::read_dir(&self.dir) else {
            return 0;
        };
        gens.filter_map(Result::ok)
            .filter_map(|g| fs::read_dir(g.path()).ok())
            .flat_map(|entries| entries.filter_map(Result::ok))
            .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Writes `extensions.jsonl` (records in corpus order) and `report.json` (counts and failures).
pub fn write_extensions(dir: &Path, report: &ExtensionReport) -> Result<(), ExtensionError> {
    fs::create_dir_all(dir).map_err(|e| cache_err(dir, e))?;
    let mut lines = String::new();
    for rec in &report.records {
        lines.push_str(&serde_json::to_string(rec).expect("record serializes"));
        lines.push('\n');
    }
    let path = dir.join(EXTENSIONS_FILE);
    write_atomic(&path, lines.as_bytes()).map_err(|e| cache_err(&path, e))?;
    let summary = serde_json::json!({
        "num_records": report.records.len(),
        "cache_hits": report.cache_hits,
        "generator_calls": report.generator_calls,
        "fallbacks": report.fallbacks,
        "failures": report.failures,
    });
    let path = dir.join(REPORT_FILE);
    write_atomic(&path, serde_json::to_string_pretty(&summary).unwrap().as_bytes()).map_err(|e| cache_err(&path, e))
}

pub fn read_extensions(dir: &Path) -> Result<Vec<ExtensionRecord>, ExtensionError> {
    let path = dir.join(EXTENSIONS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| cache_err(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| cache_err(&path, e)))
        .collect()
}
