use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::agent::Trajectory;
use crate::reward::ShortFormVerdict;

pub const JOURNAL_FILE: &str = "ledger.jsonl";
pub const TRAJECTORY_DIR: &str = "trajectories";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Done,
    Failed,
}

/// One journal line. The latest line for a key wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub key: String,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<ShortFormVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Resumable per-job status for one run directory. Trajectory files are
/// written to a temporary name and renamed into place before the journal
/// line that marks them done is appended, so a `done` entry always points
/// at a complete file. A torn final journal line is ignored on load.
#[derive(Debug)]
pub struct RunLedger {
    run_id: String,
    dir: PathBuf,
    entries: Mutex<BTreeMap<String, LedgerEntry>>,
    journal: Mutex<File>,
}

fn file_stem(key: &str) -> String {
    key.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '@') { c } else { '_' }).collect()
}

impl RunLedger {
    pub fn open(root: &Path, run_id: &str) -> Result<Self, HarnessError> {
        let dir = root.join(run_id);
        fs::create_dir_all(dir.join(TRAJECTORY_DIR)).map_err(|e| HarnessError::io(&dir, e))?;
        let path = dir.join(JOURNAL_FILE);
        let mut entries = BTreeMap::new();
        let mut torn = false;
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
            torn = !text.is_empty() && !text.ends_with('\n');
            for (i, line) in text.lines().enumerate() {
                match serde_json::from_str::<LedgerEntry>(line) {
                    Ok(e) => {
                        entries.insert(e.key.clone(), e);
                    }
                    Err(e) => log::warn!("{}:{}: ignoring unreadable ledger line: {e}", path.display(), i + 1),
                }
            }
        }
        let mut journal = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| HarnessError::io(&path, e))?;
        if torn {
            journal.write_all(b"\n").map_err(|e| HarnessError::io(&path, e))?;
        }
        Ok(Self { run_id: run_id.to_string(), dir, entries: Mutex::new(entries), journal: Mutex::new(journal) })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn status(&self, key: &str) -> JobStatus {
        self.entry(key).map(|e| e.status).unwrap_or(JobStatus::Pending)
    }

    pub fn entry(&self, key: &str) -> Option<LedgerEntry> {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).get(key).cloned()
    }

    pub fn entries(&self) -> BTreeMap<String, LedgerEntry> {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn trajectory_path(&self, key: &str) -> PathBuf {
        self.dir.join(TRAJECTORY_DIR).join(format!("{}.json", file_stem(key)))
    }

    /// The stored trajectory of a done job.
    pub fn load_trajectory(&self, key: &str) -> Result<Trajectory, HarnessError> {
        let path = self.trajectory_path(key);
        let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
        serde_json::from_str(text.trim_end())
            .map_err(|e| HarnessError::Dataset { path: path.display().to_string(), line: 1, reason: e.to_string() })
    }

    pub fn record_done(
        &self,
        key: &str,
        trajectory: &Trajectory,
        verdict: Option<ShortFormVerdict>,
    ) -> Result<(), HarnessError> {
        let path = self.trajectory_path(key);
        let tmp = path.with_extension("json.tmp");
        let write = || -> std::io::Result<()> {
            let mut f = File::create(&tmp)?;
            f.write_all(trajectory.to_json_line().as_bytes())?;
            f.write_all(b"\n")?;
            f.sync_all()?;
            fs::rename(&tmp, &path)
        };
        write().map_err(|e| HarnessError::io(&path, e))?;
        let rel = format!("{TRAJECTORY_DIR}/{}", path.file_name().unwrap_or_default().to_string_lossy());
        self.append(LedgerEntry {
            key: key.to_string(),
            status: JobStatus::Done,
            trajectory: Some(rel),
            verdict,
            error: None,
        })
    }

    pub fn record_failed(&self, key: &str, error: impl Into<String>) -> Result<(), HarnessError> {
        self.append(LedgerEntry {
            key: key.to_string(),
            status: JobStatus::Failed,
            trajectory: None,
            verdict: None,
            error: Some(error.into()),
        })
    }

    fn append(&self, entry: LedgerEntry) -> Result<(), HarnessError> {
        let line = format!("{}\n", serde_json::to_string(&entry).expect("ledger entry serializes"));
        {
            let mut journal = self.journal.lock().unwrap_or_else(|e| e.into_inner());
            journal.write_all(line.as_bytes()).and_then(|_| journal.sync_data()).map_err(|e| HarnessError::io(&self.dir, e))?;
        }
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).insert(entry.key.clone(), entry);
        Ok(())
    }
}
