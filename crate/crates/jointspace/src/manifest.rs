//! JSON Lines manifests.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use jointspace_core::dataset::{construct_captions, expand_pairs, CaptionMode, ManifestEntry, PairManifest};

use crate::error::{Error, Result};

/// Parses one entry per non-blank line; errors carry the 1-based line number.
pub fn read_entries(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::read(path, e))?;
    let mut entries = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |reason: String| Error::Manifest {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        if entry.id.is_empty() {
            return Err(fail("empty id".into()));
        }
        if let Some(first) = seen.insert(entry.id.clone(), line_no) {
            return Err(fail(format!("duplicate id {:?} (first on line {first})", entry.id)));
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn write_entries(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e).expect("manifest entries serialize");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::write(path, e))?;
    f.write_all(&buf).map_err(|e| Error::write(path, e))
}

/// Reads a manifest and makes it train-ready: captions constructed with
/// `mode`, multi-caption entries expanded.
pub fn load_pairs(path: &Path, mode: CaptionMode) -> Result<PairManifest> {
    let entries = read_entries(path)?;
    let label = path.display().to_string();
    let m = construct_captions(PairManifest::new(entries, label), mode)?;
    Ok(expand_pairs(m))
}
