//! Run directories and their append-only manifests.
//!
//! A run directory is created once and never reused. Every file in it is
//! created with `create_new`, except `manifest.jsonl`, `metrics.csv` and
//! `run.log`, which only ever grow.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use oaat::config::sha256_hex;
use oaat::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.jsonl";
pub const CONFIG: &str = "config.toml";

/// One manifest record; a run's manifest is a sequence of these, one per
/// invocation or checkpoint, each listing the artifacts it added.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub created_at: String,
    pub artifact_paths: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
}

pub struct RunDir {
    pub id: String,
    pub path: PathBuf,
    pub config_hash: String,
}

static LOG_FILE: Mutex<Option<File>> = Mutex::new(None);

/// Log sink that mirrors stderr into the current run's `run.log`.
pub struct LogTee;

impl std::io::Write for LogTee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        if let Some(f) = LOG_FILE.lock().expect("log lock").as_mut() {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stderr().flush()
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunDir {
    /// A fresh directory `<root>/<kind>-<utc time>-<hash prefix>[-k]`
    /// holding `config_text` as `config_name`.
    pub fn create(root: &Path, kind: &str, config_name: &str, config_text: &str) -> Result<Self> {
        fs::create_dir_all(root).map_err(io(root))?;
        let config_hash = sha256_hex(config_text.as_bytes());
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
        let base = format!("{kind}-{stamp}-{}", &config_hash[..8]);
        let mut k = 1;
        let (id, path) = loop {
            let id = if k == 1 { base.clone() } else { format!("{base}-{k}") };
            let path = root.join(&id);
            match fs::create_dir(&path) {
                Ok(()) => break (id, path),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => k += 1,
                Err(e) => return Err(io(&path)(e)),
            }
        };
        let run = Self { id, path, config_hash };
        run.write_new(config_name, config_text.as_bytes())?;
        run.attach_log()?;
        Ok(run)
    }

    /// An existing run, after checking its stored config against the hash
    /// recorded when the run was created.
    pub fn open(root: &Path, id: &str) -> Result<(Self, String)> {
        let path = root.join(id);
        if !path.is_dir() {
            return Err(Error::InvalidArgument(format!("no run {id} under {}", root.display())));
        }
        let first = read_manifest(&path)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::data(path.join(MANIFEST), "empty manifest"))?;
        let cfg_path = path.join(CONFIG);
        let text = fs::read_to_string(&cfg_path).map_err(io(&cfg_path))?;
        let hash = sha256_hex(text.as_bytes());
        if hash != first.config_hash {
            return Err(Error::Config(vec![format!(
                "{} does not match the hash recorded in the manifest (tampered?)",
                cfg_path.display()
            )]));
        }
        let run = Self {
            id: id.to_string(),
            path,
            config_hash: hash,
        };
        run.attach_log()?;
        Ok((run, text))
    }

    fn attach_log(&self) -> Result<()> {
        let p = self.path.join("run.log");
        let f = OpenOptions::new().create(true).append(true).open(&p).map_err(io(&p))?;
        *LOG_FILE.lock().expect("log lock") = Some(f);
        Ok(())
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Creates `name`; fails rather than replace an existing file.
    pub fn write_new(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.file(name);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&p).map_err(io(&p))?;
        f.write_all(bytes).map_err(io(&p))?;
        Ok(p)
    }

    pub fn append(&self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.file(name);
        let mut f = OpenOptions::new().create(true).append(true).open(&p).map_err(io(&p))?;
        f.write_all(text.as_bytes()).map_err(io(&p))?;
        Ok(p)
    }

    pub fn record(&self, artifacts: BTreeMap<String, PathBuf>, variant: Option<String>) -> Result<()> {
        let m = RunManifest {
            run_id: self.id.clone(),
            config_hash: self.config_hash.clone(),
            created_at: now(),
            artifact_paths: artifacts,
            variant,
        };
        let line = serde_json::to_string(&m).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        self.append(MANIFEST, &format!("{line}\n"))?;
        Ok(())
    }
}

pub fn read_manifest(run_path: &Path) -> Result<Vec<RunManifest>> {
    let p = run_path.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(io(&p))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::data(&p, e.to_string())))
        .collect()
}

/// Artifact map with a single entry.
pub fn one(name: &str, path: PathBuf) -> BTreeMap<String, PathBuf> {
    BTreeMap::from([(name.to_string(), path)])
}
