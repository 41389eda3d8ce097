// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run records and output bookkeeping: atomic writes, SHA-256 manifests, a
//! per-directory lockfile, and record validation for resumable pipelines.
//!
//! A stage's record is written last, atomically, and lists every file the
//! stage produced with its hash; a directory with outputs but no record (or a
//! record whose hashes no longer match) is an incomplete run.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Directory (inside the output directory) holding one record per stage.
pub const RECORDS_DIR: &str = "records";
pub const LOCK_FILE: &str = ".circuitbench.lock";

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut file = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

/// Write to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub config_hash: String,
    pub global_seed: u64,
    pub version: String,
    /// Omitted in deterministic mode.
    pub wall_time_secs: Option<f64>,
    pub outputs: Vec<ManifestEntry>,
}

impl RunRecord {
    pub fn path(out_dir: &Path, experiment: &str) -> PathBuf {
        out_dir.join(RECORDS_DIR).join(format!("{experiment}.json"))
    }

    pub fn load(out_dir: &Path, experiment: &str) -> Option<Self> {
        let text = fs::read_to_string(Self::path(out_dir, experiment)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Whether this record was produced under `config_hash` and every listed
    /// output is still on disk with the recorded hash.
    pub fn is_current(&self, out_dir: &Path, config_hash: &str) -> bool {
        self.config_hash == config_hash
            && self
                .outputs
                .iter()
                .all(|e| sha256_file(&out_dir.join(&e.path)).is_ok_and(|h| h == e.sha256))
    }
}

/// Version string recorded in every run: the package version plus, when the
/// build environment provides one, a `git describe` suffix.
pub fn artifact_version() -> String {
    match option_env!("CIRCUITBENCH_GIT_DESCRIBE") {
        Some(d) if !d.is_empty() => format!("{}+{d}", env!("CARGO_PKG_VERSION")),
        _ => env!("CARGO_PKG_VERSION").to_string(),
    }
}

// ---------------------------------------------------------------------------
// Output writer
// ---------------------------------------------------------------------------

/// Collects the files one stage writes and commits them with a record.
pub struct StageOutputs {
    root: PathBuf,
    experiment: String,
    entries: Vec<ManifestEntry>,
}

impl StageOutputs {
    /// Start a stage: any previous record for it is removed first, so an
    /// interrupted re-run is detectable.
    pub fn begin(root: &Path, experiment: &str) -> io::Result<Self> {
        let record = RunRecord::path(root, experiment);
        match fs::remove_file(&record) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e),
            _ => {}
        }
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf(), experiment: experiment.to_string(), entries: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> io::Result<()> {
        write_atomic(&self.path(name), bytes)?;
        self.register(name)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> io::Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Record a file that was written by other means.
    pub fn register(&mut self, name: &str) -> io::Result<()> {
        let path = self.path(name);
        let sha256 = sha256_file(&path)?;
        let bytes = fs::metadata(&path)?.len();
        self.entries.retain(|e| e.path != name);
        self.entries.push(ManifestEntry { path: name.to_string(), sha256, bytes });
        Ok(())
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    /// Write the record (last, atomically).
    pub fn commit(mut self, config_hash: &str, global_seed: u64, wall_time_secs: Option<f64>) -> io::Result<RunRecord> {
        self.entries.sort_by(|a, b| a.path.cmp(&b.path));
        let record = RunRecord {
            experiment: self.experiment.clone(),
            config_hash: config_hash.to_string(),
            global_seed,
            version: artifact_version(),
            wall_time_secs,
            outputs: self.entries,
        };
        let mut text = serde_json::to_string_pretty(&record).map_err(io::Error::other)?;
        text.push('\n');
        write_atomic(&RunRecord::path(&self.root, &self.experiment), text.as_bytes())?;
        Ok(record)
    }
}

// ---------------------------------------------------------------------------
// Lock
// ---------------------------------------------------------------------------

/// Exclusive claim on an output directory; released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    /// Fails with `AlreadyExists` when another invocation holds the directory.
    pub fn acquire(out_dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(out_dir)?;
        let path = out_dir.join(LOCK_FILE);
        let mut f = fs::OpenOptions::new().write(true).create_new(true).open(&path)?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_bytes(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn record_round_trip_and_staleness() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = StageOutputs::begin(dir.path(), "demo").unwrap();
        out.write("a.csv", b"x,y\n").unwrap();
        out.write_json("b.json", &vec![1, 2]).unwrap();
        let rec = out.commit("h1", 7, None).unwrap();
        assert_eq!(rec.outputs.len(), 2);
        let loaded = RunRecord::load(dir.path(), "demo").unwrap();
        assert_eq!(loaded, rec);
        assert!(loaded.is_current(dir.path(), "h1"));
        assert!(!loaded.is_current(dir.path(), "h2"));
        fs::write(dir.path().join("a.csv"), b"tampered").unwrap();
        assert!(!loaded.is_current(dir.path(), "h1"));
        // Beginning the stage again invalidates the old record.
        let _ = StageOutputs::begin(dir.path(), "demo").unwrap();
        assert!(RunRecord::load(dir.path(), "demo").is_none());
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        assert_eq!(DirLock::acquire(dir.path()).unwrap_err().kind(), io::ErrorKind::AlreadyExists);
        drop(lock);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }
}
