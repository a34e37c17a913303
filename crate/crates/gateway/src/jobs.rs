//! Background jobs on a bounded worker pool.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobKind {
    Train,
    SegmentCorpus,
    ScoreCorpus,
    Evaluate,
}

/// Ordered so that transitions only move forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub kind: JobKind,
    pub state: JobState,
    /// In `[0, 1]`, non-decreasing.
    pub progress: f64,
    /// Store-relative path of the published output.
    pub result_ref: Option<String>,
    pub error: Option<String>,
    pub submitted_at: DateTime<Utc>,
}

#[derive(Debug, Default)]
struct Table {
    next: u64,
    jobs: HashMap<String, JobStatus>,
}

/// Job table plus the permits that bound concurrent execution.
#[derive(Clone, Debug)]
pub struct JobRegistry {
    table: Arc<Mutex<Table>>,
    permits: Arc<Semaphore>,
}

/// Handle a running job uses to report progress.
#[derive(Clone, Debug)]
pub struct Progress {
    table: Arc<Mutex<Table>>,
    id: String,
}

impl Progress {
    /// Raises progress to `fraction`; lower values are ignored.
    pub fn advance(&self, fraction: f64) {
        let mut t = self.table.lock().expect("job table poisoned");
        if let Some(j) = t.jobs.get_mut(&self.id) {
            j.progress = j.progress.max(fraction.clamp(0.0, 1.0));
        }
    }
}

impl JobRegistry {
    pub fn new(workers: usize) -> Self {
        JobRegistry {
            table: Arc::default(),
            permits: Arc::new(Semaphore::new(workers.max(1))),
        }
    }

    pub fn get(&self, id: &str) -> Option<JobStatus> {
        self.table.lock().expect("job table poisoned").jobs.get(id).cloned()
    }

    fn transition(&self, id: &str, state: JobState, result: Option<Result<String, String>>) {
        let mut t = self.table.lock().expect("job table poisoned");
        let Some(j) = t.jobs.get_mut(id) else { return };
        if state <= j.state {
            return;
        }
        j.state = state;
        match result {
            Some(Ok(r)) => {
                j.progress = 1.0;
                j.result_ref = Some(r);
            }
            Some(Err(e)) => j.error = Some(e),
            None => {}
        }
    }

    /// Queues `work` and returns its initial status. `work` runs on a
    /// blocking thread once a worker permit is free and returns the
    /// published result reference.
    pub fn submit<F>(&self, kind: JobKind, work: F) -> JobStatus
    where
        F: FnOnce(Progress) -> Result<String, String> + Send + 'static,
    {
        let status = {
            let mut t = self.table.lock().expect("job table poisoned");
            t.next += 1;
            let status = JobStatus {
                job_id: format!("job-{:06}", t.next),
                kind,
                state: JobState::Queued,
                progress: 0.0,
                result_ref: None,
                error: None,
                submitted_at: Utc::now(),
            };
            t.jobs.insert(status.job_id.clone(), status.clone());
            status
        };
        let registry = self.clone();
        let id = status.job_id.clone();
        tokio::spawn(async move {
            let Ok(_permit) = registry.permits.clone().acquire_owned().await else {
                return;
            };
            registry.transition(&id, JobState::Running, None);
            let progress = Progress {
                table: registry.table.clone(),
                id: id.clone(),
            };
            let outcome = tokio::task::spawn_blocking(move || work(progress))
                .await
                .unwrap_or_else(|e| Err(format!("job panicked: {e}")));
            let state = if outcome.is_ok() { JobState::Done } else { JobState::Failed };
            registry.transition(&id, state, Some(outcome));
        });
        status
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    async fn wait(reg: &JobRegistry, id: &str) -> JobStatus {
        for _ in 0..200 {
            let s = reg.get(id).unwrap();
            if s.state >= JobState::Done {
                return s;
            }
            tokio::time::sleep(std::time::Duration::from_millis(10)).await;
        }
        panic!("job {id} did not finish");
    }

    #[tokio::test]
    async fn jobs_finish_with_result_or_error() {
        let reg = JobRegistry::new(1);
        let ok = reg.submit(JobKind::Train, |p| {
            p.advance(0.5);
            p.advance(0.2);
            Ok("models/x.bin".into())
        });
        assert_eq!(ok.state, JobState::Queued);
        let bad = reg.submit(JobKind::Evaluate, |_| Err("boom".into()));
        let ok = wait(&reg, &ok.job_id).await;
        assert_eq!((ok.state, ok.progress), (JobState::Done, 1.0));
        assert_eq!(ok.result_ref.as_deref(), Some("models/x.bin"));
        let bad = wait(&reg, &bad.job_id).await;
        assert_eq!(bad.state, JobState::Failed);
        assert_eq!(bad.error.as_deref(), Some("boom"));
    }

    #[test]
    fn states_only_move_forward() {
        let reg = JobRegistry::new(1);
        reg.table.lock().unwrap().jobs.insert(
            "j".into(),
            JobStatus {
                job_id: "j".into(),
                kind: JobKind::Train,
                state: JobState::Done,
                progress: 1.0,
                result_ref: None,
                error: None,
                submitted_at: Utc::now(),
            },
        );
        reg.transition("j", JobState::Running, None);
        assert_eq!(reg.get("j").unwrap().state, JobState::Done);
    }
}
