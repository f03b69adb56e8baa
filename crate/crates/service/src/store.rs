//! Durable job storage: an append-only transition log (`jobs.log`, one
//! JSON record per line, each holding the job after the change) and a
//! current-state index (`index.json`) that is exactly the replay of the log.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::error::{storage, Result, ServiceError};
use crate::job::{JobState, PipelineJob};

pub const LOG_FILE: &str = "jobs.log";
pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Serialize, Deserialize)]
struct LogRecord {
    seq: u64,
    job: PipelineJob,
}

#[derive(Debug, Default)]
struct Inner {
    jobs: BTreeMap<String, PipelineJob>,
    /// Ids in creation order.
    order: Vec<String>,
    seq: u64,
}

#[derive(Debug)]
pub struct JobStore {
    dir: PathBuf,
    inner: RwLock<Inner>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobPage {
    pub jobs: Vec<PipelineJob>,
    pub page: usize,
    pub per_page: usize,
    pub total: usize,
    pub total_pages: usize,
}

fn replay_file(path: &Path) -> Result<Inner> {
    let mut inner = Inner::default();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(inner),
        Err(e) => return Err(storage(e)),
    };
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(storage)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord =
            serde_json::from_str(&line).map_err(|e| ServiceError::Storage(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if !inner.jobs.contains_key(&rec.job.id) {
            inner.order.push(rec.job.id.clone());
        }
        inner.seq = rec.seq;
        inner.jobs.insert(rec.job.id.clone(), rec.job);
    }
    Ok(inner)
}

/// Canonical bytes of a state index.
pub fn index_bytes(jobs: &BTreeMap<String, PipelineJob>) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(jobs).expect("jobs serialize");
    b.push(b'\n');
    b
}

/// Rebuild the state index from a log file alone.
pub fn replay(log: &Path) -> Result<BTreeMap<String, PipelineJob>> {
    Ok(replay_file(log)?.jobs)
}

impl JobStore {
    /// Open `dir`, recovering state from its log.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(storage)?;
        let inner = replay_file(&dir.join(LOG_FILE))?;
        atelier_core::checkpoint::write_atomic(&dir.join(INDEX_FILE), &index_bytes(&inner.jobs))?;
        Ok(JobStore {
            dir,
            inner: RwLock::new(inner),
        })
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join(LOG_FILE)
    }

    pub fn index_path(&self) -> PathBuf {
        self.dir.join(INDEX_FILE)
    }

    /// Next unused job id.
    pub fn next_id(&self) -> String {
        let inner = self.inner.read().expect("store lock");
        format!("job-{:06}", inner.order.len() + 1)
    }

    /// Persist `job`: new jobs must be queued, existing ones may only move
    /// along a declared transition (or keep their state).
    pub fn commit(&self, job: &PipelineJob) -> Result<()> {
        let mut inner = self.inner.write().expect("store lock");
        match inner.jobs.get(&job.id) {
            None if job.state != JobState::Queued => {
                return Err(ServiceError::Storage(format!("new job {} must start queued", job.id)));
            }
            Some(prev) if prev.state != job.state && !prev.state.can_become(job.state) => {
                return Err(ServiceError::Conflict(format!(
                    "job {}: transition {} → {} is not allowed",
                    job.id,
                    prev.state.name(),
                    job.state.name()
                )));
            }
            _ => {}
        }
        let rec = LogRecord {
            seq: inner.seq + 1,
            job: job.clone(),
        };
        let mut line = serde_json::to_string(&rec).map_err(storage)?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.log_path())
            .map_err(storage)?;
        f.write_all(line.as_bytes()).map_err(storage)?;
        f.sync_data().map_err(storage)?;

        inner.seq += 1;
        if !inner.jobs.contains_key(&job.id) {
            inner.order.push(job.id.clone());
        }
        inner.jobs.insert(job.id.clone(), job.clone());
        atelier_core::checkpoint::write_atomic(&self.index_path(), &index_bytes(&inner.jobs))?;
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<PipelineJob> {
        self.inner
            .read()
            .expect("store lock")
            .jobs
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("job {id}")))
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("store lock").order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Page `page` (1-based) of jobs in creation order, from one snapshot.
    pub fn list(&self, page: usize, per_page: usize) -> Result<JobPage> {
        if page == 0 || per_page == 0 {
            return Err(ServiceError::invalid("page and per_page start at 1"));
        }
        let inner = self.inner.read().expect("store lock");
        let total = inner.order.len();
        let jobs = inner
            .order
            .iter()
            .skip((page - 1).saturating_mul(per_page))
            .take(per_page)
            .map(|id| inner.jobs[id].clone())
            .collect();
        Ok(JobPage {
            jobs,
            page,
            per_page,
            total,
            total_pages: total.div_ceil(per_page),
        })
    }
}
