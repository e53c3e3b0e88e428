//! Run artifacts: metrics CSVs, checkpoints, per-run summaries and the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use isarlab_core::metrics::{MetricsRecord, CSV_HEADER};

use crate::error::{HarnessError, Result};

pub const CHECKPOINT_FORMAT: &str = "isarlab.checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FORMAT: &str = "isarlab.manifest";
pub const MANIFEST_VERSION: u32 = 1;

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| HarnessError::io(path, e))
}

/// Write via a temporary file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| HarnessError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn metrics_to_csv(records: &[MetricsRecord]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| HarnessError::Report(e.to_string()))
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    write_atomic(path, &metrics_to_csv(records)?)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(HarnessError::Report(format!("{}: unexpected header {header:?}", path.display())));
    }
    r.deserialize().map(|row| row.map_err(HarnessError::from)).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn seed_csv_name(seed: u64) -> String {
    format!("seed-{seed}.csv")
}

pub fn checkpoint_path(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join("checkpoints").join(format!("seed-{seed}.json"))
}

/// Versioned checkpoint envelope around a command-specific state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint<S> {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub state: S,
}

impl<S: Serialize + DeserializeOwned> Checkpoint<S> {
    pub fn new(config_hash: &str, seed: u64, state: S) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.into(),
            seed,
            state,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Compact: checkpoints carry the full metrics history.
        let text = serde_json::to_vec(self)?;
        write_atomic(path, &text)
    }

    /// Load, checking format, version, seed and configuration.
    pub fn load(path: &Path, config_hash: &str, seed: u64) -> Result<Self> {
        let ck: Self = read_json(path)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(HarnessError::Config(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        if ck.config_hash != config_hash || ck.seed != seed {
            return Err(HarnessError::Config(format!(
                "{}: checkpoint belongs to a different configuration or seed",
                path.display()
            )));
        }
        Ok(ck)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub versions: Versions,
    pub seeds: Vec<u64>,
    pub workers: usize,
    /// False when episodes ran on several asynchronous workers.
    pub deterministic: bool,
    pub files: Vec<FileEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub isarlab: String,
    pub isarlab_core: String,
    pub config_schema: u32,
    pub checkpoint: u32,
}

impl Versions {
    pub fn current() -> Self {
        Self {
            isarlab: env!("CARGO_PKG_VERSION").into(),
            isarlab_core: isarlab_core::VERSION.into(),
            config_schema: crate::config::SCHEMA_VERSION,
            checkpoint: CHECKPOINT_VERSION,
        }
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| HarnessError::io(dir, e))?
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| HarnessError::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path != root.join("manifest.json") && path.extension().is_none_or(|x| x != "tmp") {
            out.push(path);
        }
    }
    Ok(())
}

/// Hash every file under `run_dir` (except the manifest itself) and write the manifest.
pub fn write_manifest(run_dir: &Path, mut manifest: Manifest) -> Result<Manifest> {
    let mut files = Vec::new();
    collect_files(run_dir, run_dir, &mut files)?;
    manifest.files = files
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| HarnessError::io(p, e))?;
            let rel = p.strip_prefix(run_dir).expect("under run dir");
            Ok(FileEntry {
                path: rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            })
        })
        .collect::<Result<_>>()?;
    write_json(&run_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Files whose current hash disagrees with the manifest (or which are missing).
pub fn verify_manifest(run_dir: &Path) -> Result<Vec<String>> {
    let m: Manifest = read_json(&run_dir.join("manifest.json"))?;
    Ok(m.files
        .iter()
        .filter(|f| fs::read(run_dir.join(&f.path)).map(|b| sha256_hex(&b) != f.sha256).unwrap_or(true))
        .map(|f| f.path.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(ep: u64) -> MetricsRecord {
        MetricsRecord {
            run_id: "r".into(),
            seed: 3,
            stage: 1,
            episode: ep,
            steps: 12,
            total_reward: 4.89 + ep as f64 * 1e-3,
            success: 1,
            inner_loss: -0.1234567890123,
            adapt_loss: 0.0,
            wallclock_ms: 0,
        }
    }

    #[test]
    fn csv_roundtrip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows: Vec<_> = (1..=3).map(rec).collect();
        write_metrics_csv(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("run_id,seed,stage,episode,steps,total_reward,success,inner_loss,adapt_loss,wallclock_ms\n"));
        assert_eq!(read_metrics_csv(&path).unwrap(), rows);
    }

    #[test]
    fn manifest_lists_and_verifies_files() {
        let dir = tempfile::tempdir().unwrap();
        write_atomic(&dir.path().join("a.csv"), b"x").unwrap();
        write_atomic(&dir.path().join("checkpoints/seed-0.json"), b"{}").unwrap();
        let m = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            run_id: "r".into(),
            command: "train".into(),
            config_hash: "h".into(),
            versions: Versions::current(),
            seeds: vec![0],
            workers: 1,
            deterministic: true,
            files: vec![],
        };
        let m = write_manifest(dir.path(), m).unwrap();
        let paths: Vec<_> = m.files.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(paths, ["a.csv", "checkpoints/seed-0.json"]);
        assert!(verify_manifest(dir.path()).unwrap().is_empty());
        fs::write(dir.path().join("a.csv"), b"y").unwrap();
        assert_eq!(verify_manifest(dir.path()).unwrap(), ["a.csv"]);
    }

    #[test]
    fn checkpoint_guards_identity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        Checkpoint::new("abc", 4, vec![1u8, 2]).save(&p).unwrap();
        assert_eq!(Checkpoint::<Vec<u8>>::load(&p, "abc", 4).unwrap().state, vec![1, 2]);
        assert!(Checkpoint::<Vec<u8>>::load(&p, "abd", 4).is_err());
        assert!(Checkpoint::<Vec<u8>>::load(&p, "abc", 5).is_err());
    }
}
