use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut f = fs::File::open(path)?;
    std::io::copy(&mut f, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    /// Relative to the output directory.
    pub file: String,
    pub sha256: String,
}

/// One line of `manifest.json-lines`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    pub version: String,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub config: serde_json::Value,
}

pub fn hash_files(dir: &Path, names: &[&str]) -> Result<Vec<FileHash>> {
    names
        .iter()
        .map(|n| {
            Ok(FileHash {
                file: n.to_string(),
                sha256: sha256_file(&dir.join(n))?,
            })
        })
        .collect()
}

pub fn append_entry(path: &Path, entry: &ManifestEntry) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(entry)?)?;
    Ok(())
}

pub fn read_entries(path: &Path) -> Result<Vec<ManifestEntry>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Most recent recorded hash and producing stage of every output file.
pub fn latest_outputs(entries: &[ManifestEntry]) -> HashMap<String, (String, String)> {
    let mut map = HashMap::new();
    for e in entries {
        for o in &e.outputs {
            map.insert(o.file.clone(), (o.sha256.clone(), e.stage.clone()));
        }
    }
    map
}

/// A file whose content no longer matches the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub file: String,
    pub stage: String,
    /// `None` when the file is gone.
    pub actual: Option<String>,
}

/// Checks every recorded output in `dir` against its latest manifest hash.
pub fn verify_dir(dir: &Path, manifest: &Path) -> Result<Vec<Mismatch>> {
    let latest = latest_outputs(&read_entries(manifest)?);
    let mut files: Vec<_> = latest.into_iter().collect();
    files.sort();
    let mut out = Vec::new();
    for (file, (hash, stage)) in files {
        let p = dir.join(&file);
        let actual = if p.exists() { Some(sha256_file(&p)?) } else { None };
        if actual.as_deref() != Some(hash.as_str()) {
            out.push(Mismatch { file, stage, actual });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        fs::write(&p, "abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn verify_detects_changes() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("manifest.json-lines");
        fs::write(dir.path().join("a"), "1").unwrap();
        fs::write(dir.path().join("b"), "2").unwrap();
        let entry = ManifestEntry {
            stage: "s".into(),
            version: "0".into(),
            seed: 0,
            inputs: vec![],
            outputs: hash_files(dir.path(), &["a", "b"]).unwrap(),
            config: serde_json::json!({}),
        };
        append_entry(&m, &entry).unwrap();
        assert_eq!(read_entries(&m).unwrap(), vec![entry]);
        assert!(verify_dir(dir.path(), &m).unwrap().is_empty());
        fs::write(dir.path().join("a"), "changed").unwrap();
        fs::remove_file(dir.path().join("b")).unwrap();
        let bad = verify_dir(dir.path(), &m).unwrap();
        assert_eq!(bad.len(), 2);
        assert_eq!(bad[0].file, "a");
        assert!(bad[1].actual.is_none());
    }
}
