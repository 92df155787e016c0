//! Training jobs: at most one runs at a time on its own thread, and its
//! progress is published as append-only snapshots for polling and SSE.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use tokio::sync::watch;
use voxdetail::train::{build_oracle, load_dataset, run_training, IterRecord, TrainConfig, TrainEvent};

use crate::store::CheckpointStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_final(self) -> bool {
        matches!(self, Self::Done | Self::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub stage: u8,
    pub lambda: f64,
    pub l_sds: f64,
    pub l_reg: f64,
    pub l_total: f64,
    pub ms: f64,
}

impl From<&IterRecord> for LossRecord {
    fn from(r: &IterRecord) -> Self {
        Self {
            iter: r.iter,
            stage: r.stage,
            lambda: r.lambda,
            l_sds: r.l_sds,
            l_reg: r.l_reg,
            l_total: r.l_total,
            ms: r.ms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub iter: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: u64,
    pub state: JobState,
    pub config_digest: String,
    pub progress: Progress,
    pub latest: Option<LossRecord>,
    /// Intermediate checkpoint files written during the run.
    pub checkpoints: Vec<PathBuf>,
    /// Store id of the final model.
    pub checkpoint_id: Option<String>,
    pub error: Option<String>,
}

/// One entry of a job's event stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum JobEvent {
    Loss(LossRecord),
    Done { checkpoint_id: String },
    Failed { error: String },
}

#[derive(Debug)]
pub struct Job {
    record: Mutex<JobRecord>,
    events: Mutex<Vec<JobEvent>>,
    /// Bumped on every change; carries the event count.
    notify: watch::Sender<usize>,
}

impl Job {
    fn new(id: u64, config_digest: String, total: usize) -> Self {
        Self {
            record: Mutex::new(JobRecord {
                id,
                state: JobState::Queued,
                config_digest,
                progress: Progress { iter: 0, total },
                latest: None,
                checkpoints: Vec::new(),
                checkpoint_id: None,
                error: None,
            }),
            events: Mutex::new(Vec::new()),
            notify: watch::channel(0).0,
        }
    }

    pub fn record(&self) -> JobRecord {
        self.record.lock().expect("job lock").clone()
    }

    /// Events from index `from` on, and whether the job has finished.
    pub fn events_since(&self, from: usize) -> (Vec<JobEvent>, bool) {
        let events = self.events.lock().expect("job lock");
        let done = self.record.lock().expect("job lock").state.is_final();
        (events.get(from..).map(<[_]>::to_vec).unwrap_or_default(), done)
    }

    pub fn subscribe(&self) -> watch::Receiver<usize> {
        self.notify.subscribe()
    }

    /// Moves to `state` if that is a forward transition.
    fn advance(&self, state: JobState) -> bool {
        let mut r = self.record.lock().expect("job lock");
        let ok = state > r.state && !r.state.is_final();
        if ok {
            r.state = state;
        }
        ok
    }

    fn emit(&self, event: JobEvent) {
        let n = {
            let mut ev = self.events.lock().expect("job lock");
            ev.push(event);
            ev.len()
        };
        self.notify.send_replace(n);
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum SubmitError {
    Busy(u64),
    Invalid(String),
}

#[derive(Debug, Default)]
pub struct JobRegistry {
    jobs: Mutex<BTreeMap<u64, Arc<Job>>>,
    active: Mutex<Option<u64>>,
}

impl JobRegistry {
    pub fn get(&self, id: u64) -> Option<Arc<Job>> {
        self.jobs.lock().expect("jobs lock").get(&id).cloned()
    }

    pub fn active(&self) -> Option<u64> {
        *self.active.lock().expect("jobs lock")
    }

    /// Validates `config_text`, registers a job and starts it on a new
    /// thread. `event_every` sets the loss-event cadence in iterations.
    pub fn submit(
        self: &Arc<Self>,
        config_text: &str,
        event_every: usize,
        store: Arc<CheckpointStore>,
    ) -> Result<u64, SubmitError> {
        let mut cfg = TrainConfig::parse(config_text).map_err(|e| SubmitError::Invalid(e.to_string()))?;
        let dataset = load_dataset(&cfg).map_err(|e| SubmitError::Invalid(e.to_string()))?;
        let oracle = build_oracle(&cfg).map_err(|e| SubmitError::Invalid(e.to_string()))?;
        voxdetail::train::check_dataset(&cfg, &dataset).map_err(|e| SubmitError::Invalid(e.to_string()))?;

        let mut active = self.active.lock().expect("jobs lock");
        if let Some(id) = *active {
            return Err(SubmitError::Busy(id));
        }
        let id = {
            let jobs = self.jobs.lock().expect("jobs lock");
            jobs.keys().next_back().map_or(1, |k| k + 1)
        };
        if cfg.checkpoint_every > 0 {
            cfg.checkpoint_dir = Some(store.dir().join("jobs").join(id.to_string()));
        }
        let job = Arc::new(Job::new(id, cfg.digest(), cfg.total_iters()));
        self.jobs.lock().expect("jobs lock").insert(id, job.clone());
        *active = Some(id);
        drop(active);

        let registry = self.clone();
        let every = event_every.max(1);
        std::thread::spawn(move || {
            job.advance(JobState::Running);
            job.notify.send_modify(|_| {});
            let outcome = run_training(&cfg, &dataset, oracle.as_ref(), None, None, &mut |e| match e {
                TrainEvent::Iteration(r) => {
                    let rec = LossRecord::from(r);
                    {
                        let mut jr = job.record.lock().expect("job lock");
                        jr.progress.iter = r.iter + 1;
                        jr.latest = Some(rec.clone());
                    }
                    if r.iter % every == 0 || r.iter + 1 == cfg.total_iters() {
                        job.emit(JobEvent::Loss(rec));
                    }
                }
                TrainEvent::Checkpoint { path, .. } => {
                    job.record.lock().expect("job lock").checkpoints.push(path.to_path_buf());
                }
            })
            .map_err(anyhow::Error::from)
            .and_then(|st| store.insert(&st.model, Some(&cfg.prompt)));
            // free the slot first so a client reacting to the final state can resubmit
            *registry.active.lock().expect("jobs lock") = None;
            match outcome {
                Ok(ck) => {
                    job.record.lock().expect("job lock").checkpoint_id = Some(ck.clone());
                    job.advance(JobState::Done);
                    job.emit(JobEvent::Done { checkpoint_id: ck });
                }
                Err(e) => {
                    job.record.lock().expect("job lock").error = Some(format!("{e:#}"));
                    job.advance(JobState::Failed);
                    job.emit(JobEvent::Failed { error: format!("{e:#}") });
                }
            }
        });
        Ok(id)
    }
}
