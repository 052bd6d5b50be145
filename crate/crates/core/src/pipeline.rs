//! Flat-file artifact bookkeeping shared by the command-line verbs.
//!
//! Each output directory holds `pipeline.json`: an ordered list of artifacts
//! with content hashes, the resolved configuration that produced them and
//! references to the artifacts they were derived from.

use crate::error::{Error, Result};
use crate::io::{file_sha256, read_json, sha256_hex, write_json};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "pipeline.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Single,
    Double,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub id: String,
    /// Producing verb, or `"input"` for files that entered from outside.
    pub verb: String,
    /// Relative to the manifest directory when the artifact lives inside it.
    pub path: PathBuf,
    pub sha256: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    pub parents: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub artifacts: Vec<ArtifactRecord>,
    #[serde(skip)]
    root: PathBuf,
}

/// Hash of a file, or for a directory the hash of its `manifest.jsonl` when
/// present and otherwise of the sorted per-file hashes.
pub fn artifact_sha256(path: &Path) -> Result<String> {
    if !path.is_dir() {
        return file_sha256(path);
    }
    let manifest = path.join("manifest.jsonl");
    if manifest.is_file() {
        return file_sha256(&manifest);
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut listing = String::new();
    for p in entries {
        let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
        listing.push_str(&format!("{name} {}\n", file_sha256(&p)?));
    }
    Ok(sha256_hex(listing.as_bytes()))
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(path).map_err(|e| Error::io(path, e))
}

impl PipelineManifest {
    /// Opens the manifest in `dir`, or starts an empty one. Parent links are
    /// checked on open.
    pub fn open(dir: &Path) -> Result<Self> {
        crate::io::ensure_dir(dir)?;
        let root = absolute(dir)?;
        let file = root.join(MANIFEST_FILE);
        let mut m: Self = if file.exists() { read_json(&file)? } else { Self::default() };
        m.root = root;
        m.check_links()?;
        Ok(m)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn save(&self) -> Result<()> {
        write_json(&self.root.join(MANIFEST_FILE), self)
    }

    fn check_links(&self) -> Result<()> {
        for a in &self.artifacts {
            for p in &a.parents {
                if !self.artifacts.iter().any(|b| &b.id == p) {
                    return Err(Error::Invalid(format!("artifact {} refers to unknown parent {p}", a.id)));
                }
            }
        }
        Ok(())
    }

    fn stored_path(&self, path: &Path) -> Result<PathBuf> {
        let abs = absolute(path)?;
        Ok(abs.strip_prefix(&self.root).map(Path::to_path_buf).unwrap_or(abs))
    }

    pub fn resolve(&self, rec: &ArtifactRecord) -> PathBuf {
        if rec.path.is_absolute() {
            rec.path.clone()
        } else {
            self.root.join(&rec.path)
        }
    }

    pub fn get(&self, id: &str) -> Option<&ArtifactRecord> {
        self.artifacts.iter().find(|a| a.id == id)
    }

    /// Latest record for `path`, if any.
    pub fn find(&self, path: &Path) -> Result<Option<&ArtifactRecord>> {
        let p = self.stored_path(path)?;
        Ok(self.artifacts.iter().rev().find(|a| a.path == p))
    }

    /// Recomputes the hash of one artifact and compares it with the record.
    pub fn verify(&self, rec: &ArtifactRecord) -> Result<()> {
        let sha = artifact_sha256(&self.resolve(rec))?;
        if sha != rec.sha256 {
            return Err(Error::Fingerprint(format!(
                "{} ({}) changed since it was recorded",
                rec.path.display(),
                rec.id
            )));
        }
        Ok(())
    }

    pub fn verify_all(&self) -> Result<()> {
        self.artifacts.iter().try_for_each(|a| self.verify(a))
    }

    /// Id of an input artifact. Known artifacts are re-hashed; unknown files
    /// are recorded as external inputs.
    pub fn input(&mut self, path: &Path) -> Result<String> {
        if !path.exists() {
            return Err(Error::Invalid(format!("input {} does not exist", path.display())));
        }
        if let Some(rec) = self.find(path)? {
            self.verify(rec)?;
            return Ok(rec.id.clone());
        }
        let rec = ArtifactRecord {
            id: String::new(),
            verb: "input".into(),
            path: self.stored_path(path)?,
            sha256: artifact_sha256(path)?,
            config: serde_json::Value::Null,
            seed: None,
            precision: None,
            parents: Vec::new(),
        };
        Ok(self.push(rec))
    }

    /// Records a produced artifact and returns its id.
    pub fn register(
        &mut self,
        verb: &str,
        path: &Path,
        config: serde_json::Value,
        seed: Option<u64>,
        precision: Option<Precision>,
        parents: Vec<String>,
    ) -> Result<String> {
        for p in &parents {
            if self.get(p).is_none() {
                return Err(Error::Invalid(format!("unknown parent artifact {p}")));
            }
        }
        let rec = ArtifactRecord {
            id: String::new(),
            verb: verb.into(),
            path: self.stored_path(path)?,
            sha256: artifact_sha256(path)?,
            config,
            seed,
            precision,
            parents,
        };
        Ok(self.push(rec))
    }

    fn push(&mut self, mut rec: ArtifactRecord) -> String {
        rec.id = format!("a{:03}", self.artifacts.len());
        let id = rec.id.clone();
        self.artifacts.push(rec);
        id
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_inputs_outputs_and_detects_edits() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, "x").unwrap();
        let mut m = PipelineManifest::open(dir.path()).unwrap();
        let a = m.input(&input).unwrap();
        assert_eq!(m.input(&input).unwrap(), a);
        let out = dir.path().join("out.txt");
        std::fs::write(&out, "y").unwrap();
        let b = m.register("test", &out, serde_json::json!({"k": 1}), Some(3), None, vec![a.clone()]).unwrap();
        m.save().unwrap();

        let mut m = PipelineManifest::open(dir.path()).unwrap();
        assert_eq!(m.get(&b).unwrap().path, PathBuf::from("out.txt"));
        m.verify_all().unwrap();
        std::fs::write(&out, "z").unwrap();
        assert!(matches!(m.input(&out), Err(Error::Fingerprint(_))));
        assert!(m.register("test", &out, serde_json::Value::Null, None, None, vec!["a999".into()]).is_err());
    }

    #[test]
    fn dangling_parent_is_refused_on_open() {
        let dir = tempfile::tempdir().unwrap();
        let bad = serde_json::json!({"artifacts": [{
            "id": "a000", "verb": "x", "path": "f", "sha256": "0", "config": null,
            "seed": null, "precision": null, "parents": ["a007"]
        }]});
        std::fs::write(dir.path().join(MANIFEST_FILE), bad.to_string()).unwrap();
        let err = PipelineManifest::open(dir.path()).unwrap_err();
        assert!(err.to_string().contains("a007"));
    }

    #[test]
    fn directory_hash_follows_contents() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.png"), "1").unwrap();
        let h1 = artifact_sha256(dir.path()).unwrap();
        std::fs::write(dir.path().join("b.png"), "2").unwrap();
        assert_ne!(h1, artifact_sha256(dir.path()).unwrap());
        std::fs::write(dir.path().join("manifest.jsonl"), "{}\n").unwrap();
        assert_eq!(artifact_sha256(dir.path()).unwrap(), file_sha256(&dir.path().join("manifest.jsonl")).unwrap());
    }
}
