//! Discrete-event simulation of a linear N-shard inference pipeline.
//!
//! Each synchronization is a job: a compute interval on the head shard, then
//! the activations hop shard to shard over N-1 links, one after another.
//! Standard decoding runs one job per token; windowed decoding runs one job
//! per verification round, charging compute for every token the round commits.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, DsdError, Result};
use crate::latency::ClusterConfig;
use crate::rng::UniformStream;
use crate::verifier::VerificationResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Deterministic,
    UniformJitter,
}

/// Per-link latency distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencySampler {
    pub kind: SamplerKind,
    pub base_ms: f64,
    pub jitter_halfwidth_ms: f64,
}

impl LatencySampler {
    pub fn deterministic(base_ms: f64) -> Self {
        Self {
            kind: SamplerKind::Deterministic,
            base_ms,
            jitter_halfwidth_ms: 0.0,
        }
    }

    pub fn uniform_jitter(base_ms: f64, halfwidth_ms: f64) -> Self {
        Self {
            kind: SamplerKind::UniformJitter,
            base_ms,
            jitter_halfwidth_ms: halfwidth_ms,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_ms >= 0.0) || !self.base_ms.is_finite() {
            return Err(invalid_param(
                "sampler.base",
                format!("{} must be >= 0", self.base_ms),
            ));
        }
        if !(self.jitter_halfwidth_ms >= 0.0) || !self.jitter_halfwidth_ms.is_finite() {
            return Err(invalid_param(
                "sampler.jitter_halfwidth_ms",
                format!("{} must be >= 0", self.jitter_halfwidth_ms),
            ));
        }
        if self.kind == SamplerKind::Deterministic && self.jitter_halfwidth_ms != 0.0 {
            return Err(invalid_param(
                "sampler.jitter_halfwidth_ms",
                "must be 0 for the deterministic sampler",
            ));
        }
        Ok(())
    }

    /// One link traversal. The deterministic sampler draws nothing; jitter
    /// draws once and clamps at zero.
    pub fn sample<R: UniformStream + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.kind {
            SamplerKind::Deterministic => self.base_ms,
            SamplerKind::UniformJitter => {
                let u = rng.next_uniform();
                (self.base_ms + self.jitter_halfwidth_ms * (2.0 * u - 1.0)).max(0.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundTrace {
    pub round_index: usize,
    pub tokens_committed: usize,
    pub compute_time: f64,
    pub comm_time: f64,
    pub total_time: f64,
    pub sync_rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub traces: Vec<RoundTrace>,
    pub total_time: f64,
    pub total_tokens: usize,
    pub total_sync_rounds: usize,
}

impl SimReport {
    pub fn comm_time(&self) -> f64 {
        self.traces.iter().map(|t| t.comm_time).sum()
    }

    pub fn compute_time(&self) -> f64 {
        self.traces.iter().map(|t| t.compute_time).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EventKind {
    ComputeDone {
        job: usize,
    },
    /// Arrival at shard `hop` (1-based) of the job's activations.
    HopDone {
        job: usize,
        hop: usize,
    },
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.seq.cmp(&other.seq))
    }
}

/// Min-queue ordered by `(time, insertion sequence)`.
#[derive(Default)]
struct EventQueue {
    heap: BinaryHeap<Reverse<Event>>,
    next_seq: u64,
}

impl EventQueue {
    fn schedule(&mut self, time: f64, kind: EventKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Event { time, seq, kind }));
    }

    fn pop(&mut self) -> Option<Event> {
        self.heap.pop().map(|Reverse(e)| e)
    }
}

/// A synchronization job: compute for `compute_ms`, then traverse the pipeline.
struct Job {
    tokens: usize,
    compute_ms: f64,
}

fn run_pipeline<R: UniformStream + ?Sized>(
    c: &ClusterConfig,
    jobs: &[Job],
    sampler: &LatencySampler,
    rng: &mut R,
) -> SimReport {
    let links = c.n_nodes - 1;
    let mut queue = EventQueue::default();
    let mut traces = Vec::with_capacity(jobs.len());
    let mut job_start = 0.0;
    let mut comm = 0.0;

    if let Some(first) = jobs.first() {
        queue.schedule(first.compute_ms, EventKind::ComputeDone { job: 0 });
    }
    while let Some(ev) = queue.pop() {
        let finished = match ev.kind {
            EventKind::ComputeDone { job } if links == 0 => Some(job),
            EventKind::ComputeDone { job } => {
                let lat = sampler.sample(rng);
                comm += lat;
                queue.schedule(ev.time + lat, EventKind::HopDone { job, hop: 1 });
                None
            }
            EventKind::HopDone { job, hop } if hop == links => Some(job),
            EventKind::HopDone { job, hop } => {
                let lat = sampler.sample(rng);
                comm += lat;
                queue.schedule(ev.time + lat, EventKind::HopDone { job, hop: hop + 1 });
                None
            }
        };
        if let Some(job) = finished {
            let j = &jobs[job];
            traces.push(RoundTrace {
                round_index: job,
                tokens_committed: j.tokens,
                compute_time: j.compute_ms,
                comm_time: comm,
                total_time: ev.time - job_start,
                sync_rounds: 1,
            });
            job_start = ev.time;
            comm = 0.0;
            if let Some(next) = jobs.get(job + 1) {
                queue.schedule(
                    ev.time + next.compute_ms,
                    EventKind::ComputeDone { job: job + 1 },
                );
            }
        }
    }

    SimReport {
        total_time: traces.iter().map(|t| t.total_time).sum(),
        total_tokens: traces.iter().map(|t| t.tokens_committed).sum(),
        total_sync_rounds: traces.iter().map(|t| t.sync_rounds).sum(),
        traces,
    }
}

/// One synchronization per token.
pub fn simulate_standard<R: UniformStream + ?Sized>(
    c: &ClusterConfig,
    n_tokens: usize,
    sampler: &LatencySampler,
    rng: &mut R,
) -> Result<SimReport> {
    c.validate()?;
    sampler.validate()?;
    if n_tokens == 0 {
        return Err(invalid_param("n_tokens", "must be >= 1"));
    }
    let jobs: Vec<Job> = (0..n_tokens)
        .map(|_| Job {
            tokens: 1,
            compute_ms: c.t0_ms,
        })
        .collect();
    Ok(run_pipeline(c, &jobs, sampler, rng))
}

/// One synchronization per round, charged `t0` for each committed token.
pub fn simulate_dsd<R: UniformStream + ?Sized>(
    c: &ClusterConfig,
    rounds: &[VerificationResult],
    sampler: &LatencySampler,
    rng: &mut R,
) -> Result<SimReport> {
    let committed: Vec<usize> = rounds.iter().map(|r| r.tokens_committed()).collect();
    simulate_windows(c, &committed, sampler, rng)
}

/// [`simulate_dsd`] over bare per-round committed-token counts.
pub fn simulate_windows<R: UniformStream + ?Sized>(
    c: &ClusterConfig,
    tokens_per_round: &[usize],
    sampler: &LatencySampler,
    rng: &mut R,
) -> Result<SimReport> {
    c.validate()?;
    sampler.validate()?;
    if tokens_per_round.is_empty() {
        return Err(invalid_param("rounds", "must be nonempty"));
    }
    if tokens_per_round.contains(&0) {
        return Err(invalid_param(
            "rounds",
            "every round commits at least one token",
        ));
    }
    let jobs: Vec<Job> = tokens_per_round
        .iter()
        .map(|&k| Job {
            tokens: k,
            compute_ms: k as f64 * c.t0_ms,
        })
        .collect();
    Ok(run_pipeline(c, &jobs, sampler, rng))
}

/// Standard total time over windowed total time, for equal token counts.
pub fn measured_speedup(std: &SimReport, dsd: &SimReport) -> Result<f64> {
    if std.total_tokens != dsd.total_tokens {
        return Err(DsdError::IncomparableReports {
            std_tokens: std.total_tokens,
            dsd_tokens: dsd.total_tokens,
        });
    }
    Ok(std.total_time / dsd.total_time)
}
