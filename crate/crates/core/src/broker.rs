//! Deterministic stand-in for a grid job broker.
//!
//! Jobs queue on [`Broker::submit_job`] and all run on [`Broker::advance`].
//! Placement, duration and success are drawn from a 64-bit LCG
//! (`x <- 6364136223846793005 * x + 1442695040888963407 mod 2^64`, seeded
//! with the configured seed), three draws per job in JobId order:
//!
//! * resource = `nodes[x mod |nodes|]`
//! * duration = `base_duration_ms + x mod jitter_ms`
//! * success  = `x / 2^64 >= failure_rate`

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LedgerError, Result};
use crate::kernel::Properties;
use crate::store::canonical_json;
use crate::value::{ItemId, Timestamp};

pub type JobId = u64;

pub const LCG_MULTIPLIER: u64 = 6364136223846793005;
pub const LCG_INCREMENT: u64 = 1442695040888963407;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Lcg(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_mul(LCG_MULTIPLIER).wrapping_add(LCG_INCREMENT);
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrokerConfig {
    pub seed: u64,
    pub nodes: Vec<String>,
    pub base_duration_ms: u64,
    pub jitter_ms: u64,
    pub failure_rate: f64,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            seed: 42,
            nodes: vec!["grid-node-1".into(), "grid-node-2".into()],
            base_duration_ms: 1_000,
            jitter_ms: 500,
            failure_rate: 0.0,
        }
    }
}

impl BrokerConfig {
    pub fn with_seed(seed: u64) -> Self {
        BrokerConfig { seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() || self.nodes.iter().any(|n| n.trim().is_empty()) {
            return Err(LedgerError::InvalidConfig("nodes must be non-empty names".into()));
        }
        if self.jitter_ms == 0 {
            return Err(LedgerError::InvalidConfig("jitter_ms must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.failure_rate) {
            return Err(LedgerError::InvalidConfig("failure_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Smallest draw that counts as a success: `ceil(failure_rate * 2^64)`.
    fn success_threshold(&self) -> u128 {
        (self.failure_rate * 18446744073709551616.0).ceil() as u128
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum JobState {
    Queued,
    Running,
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: JobId,
    pub activity: String,
    pub element: ItemId,
    pub script: String,
    pub params: Properties,
    pub state: JobState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub job: JobId,
    pub resource: String,
    pub started_at: Timestamp,
    pub finished_at: Timestamp,
    pub duration_ms: u64,
    pub success: bool,
    pub output_ref: String,
}

#[derive(Debug)]
pub struct Broker {
    config: BrokerConfig,
    rng: Lcg,
    next_id: JobId,
    jobs: BTreeMap<JobId, (Job, Option<JobResult>)>,
    queue: VecDeque<JobId>,
    sim_time: Timestamp,
}

impl Broker {
    pub fn new(config: BrokerConfig) -> Result<Self> {
        Broker::resume(config, 1)
    }

    /// A broker whose first JobId is `first_job_id`; used to keep ids
    /// monotone across brokers working on the same store.
    pub fn resume(config: BrokerConfig, first_job_id: JobId) -> Result<Self> {
        config.validate()?;
        Ok(Broker {
            rng: Lcg::new(config.seed),
            config,
            next_id: first_job_id.max(1),
            jobs: BTreeMap::new(),
            queue: VecDeque::new(),
            sim_time: Timestamp::EPOCH,
        })
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    /// Moves the simulated clock forward to `t` (never backwards).
    pub fn sync_clock(&mut self, t: Timestamp) {
        self.sim_time = self.sim_time.max(t);
    }

    pub fn submit_job(&mut self, activity: &str, element: ItemId, script: &str, params: Properties) -> JobId {
        let id = self.next_id;
        self.next_id += 1;
        let job = Job { id, activity: activity.into(), element, script: script.into(), params, state: JobState::Queued };
        self.jobs.insert(id, (job, None));
        self.queue.push_back(id);
        id
    }

    /// Runs every queued job and returns their results in JobId order.
    pub fn advance(&mut self) -> Vec<JobResult> {
        let started_at = self.sim_time;
        let threshold = self.config.success_threshold();
        let mut results = Vec::with_capacity(self.queue.len());
        while let Some(id) = self.queue.pop_front() {
            let node = (self.rng.next_u64() % self.config.nodes.len() as u64) as usize;
            let duration_ms = self.config.base_duration_ms + self.rng.next_u64() % self.config.jitter_ms;
            let success = self.rng.next_u64() as u128 >= threshold;
            let (job, slot) = self.jobs.get_mut(&id).expect("queued job is tracked");
            job.state = JobState::Done;
            let result = JobResult {
                job: id,
                resource: self.config.nodes[node].clone(),
                started_at,
                finished_at: started_at.plus_millis(duration_ms),
                duration_ms,
                success,
                output_ref: output_ref(&job.script, &job.params, job.element),
            };
            *slot = Some(result.clone());
            results.push(result);
        }
        if let Some(end) = results.iter().map(|r| r.finished_at).max() {
            self.sim_time = end;
        }
        results
    }

    pub fn job_status(&self, id: JobId) -> Result<(JobState, Option<&JobResult>)> {
        let (job, result) = self.jobs.get(&id).ok_or(LedgerError::UnknownJob(id))?;
        Ok((job.state, result.as_ref()))
    }

    pub fn job(&self, id: JobId) -> Option<&Job> {
        self.jobs.get(&id).map(|(j, _)| j)
    }
}

/// Content-hash style reference for what a job would have produced.
pub fn output_ref(script: &str, params: &Properties, element: ItemId) -> String {
    let mut h = Sha256::new();
    h.update(script.as_bytes());
    h.update([0]);
    h.update(canonical_json(params).as_bytes());
    h.update([0]);
    h.update(element.to_string().as_bytes());
    let digest = h.finalize();
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}
