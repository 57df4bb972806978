//! Summary statistics of one run.

use std::collections::BTreeMap;

use semvar_core::service::Outcome;
use semvar_core::VirtualTime;
use serde::{Deserialize, Serialize};

use super::driver::{policy_name, RunOutput};
use super::workload::WorkloadSpec;

/// Nearest-rank percentile; `None` on an empty sample.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KindStats {
    pub apps: usize,
    pub failed_apps: usize,
    pub mean_e2e_ms: Option<f64>,
    pub p90_e2e_ms: Option<f64>,
    /// From the earliest start to the latest completion of this kind.
    pub makespan_ms: Option<f64>,
    pub requests: usize,
    pub mean_normalized_latency_ms: Option<f64>,
    pub p90_normalized_latency_ms: Option<f64>,
    pub mean_decode_ms_per_token: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub spec: WorkloadSpec,
    pub engines: usize,
    pub makespan_ms: f64,
    pub requests: usize,
    pub completed_requests: usize,
    pub failed_requests: usize,
    pub request_rate_per_s: f64,
    pub output_tokens_per_s: f64,
    pub mean_normalized_latency_ms: Option<f64>,
    pub p90_normalized_latency_ms: Option<f64>,
    pub mean_decode_ms_per_token: Option<f64>,
    pub peak_blocks: usize,
    pub peak_blocks_per_engine: Vec<usize>,
    pub utilization: f64,
    pub kinds: BTreeMap<String, KindStats>,
}

struct Sample {
    e2e: Vec<f64>,
    starts: Vec<VirtualTime>,
    ends: Vec<VirtualTime>,
    failed: usize,
    norm: Vec<f64>,
    decode: Vec<f64>,
    requests: usize,
}

impl Sample {
    fn new() -> Self {
        Sample { e2e: vec![], starts: vec![], ends: vec![], failed: 0, norm: vec![], decode: vec![], requests: 0 }
    }

    fn stats(&self) -> KindStats {
        let makespan = match (self.starts.iter().min(), self.ends.iter().max()) {
            (Some(s), Some(e)) => Some(e.saturating_sub(*s).as_ms()),
            _ => None,
        };
        KindStats {
            apps: self.e2e.len() + self.failed,
            failed_apps: self.failed,
            mean_e2e_ms: mean(&self.e2e),
            p90_e2e_ms: percentile(&self.e2e, 90.0),
            makespan_ms: makespan,
            requests: self.requests,
            mean_normalized_latency_ms: mean(&self.norm),
            p90_normalized_latency_ms: percentile(&self.norm, 90.0),
            mean_decode_ms_per_token: mean(&self.decode),
        }
    }
}

pub fn summarize(spec: &WorkloadSpec, run: &RunOutput) -> MetricsReport {
    let mut kinds: BTreeMap<&str, Sample> = BTreeMap::new();
    let mut all = Sample::new();
    for a in &run.apps {
        let s = kinds.entry(a.kind).or_insert_with(Sample::new);
        match a.done {
            Some(done) => {
                s.e2e.push(done.saturating_sub(a.start).as_ms());
                s.starts.push(a.start);
                s.ends.push(done);
            }
            None => s.failed += 1,
        }
    }
    let (mut completed, mut failed, mut out_tokens) = (0, 0, 0usize);
    for (r, kind) in &run.records {
        let s = kinds.entry(kind).or_insert_with(Sample::new);
        s.requests += 1;
        match r.outcome {
            Outcome::Completed => completed += 1,
            Outcome::Failed(_) => failed += 1,
            Outcome::Pending => {}
        }
        out_tokens += r.output_tokens;
        if r.outcome != Outcome::Completed || r.output_tokens == 0 {
            continue;
        }
        let fin = r.finished_at.expect("completed");
        let norm = fin.saturating_sub(r.submitted_at).as_ms() / r.output_tokens as f64;
        s.norm.push(norm);
        all.norm.push(norm);
        if let (Some(first), true) = (r.first_token_at, r.output_tokens > 1) {
            let d = fin.saturating_sub(first).as_ms() / (r.output_tokens - 1) as f64;
            s.decode.push(d);
            all.decode.push(d);
        }
    }
    let makespan = run.end.as_ms();
    let secs = makespan / 1000.0;
    let busy: f64 = run.busy.iter().map(|b| b.as_ms()).sum();
    let engines = run.busy.len();
    MetricsReport {
        mode: policy_name(run.policy).into(),
        spec: spec.clone(),
        engines,
        makespan_ms: makespan,
        requests: run.records.len(),
        completed_requests: completed,
        failed_requests: failed,
        request_rate_per_s: if secs > 0.0 { completed as f64 / secs } else { 0.0 },
        output_tokens_per_s: if secs > 0.0 { out_tokens as f64 / secs } else { 0.0 },
        mean_normalized_latency_ms: mean(&all.norm),
        p90_normalized_latency_ms: percentile(&all.norm, 90.0),
        mean_decode_ms_per_token: mean(&all.decode),
        peak_blocks: run.peak_blocks.iter().copied().max().unwrap_or(0),
        peak_blocks_per_engine: run.peak_blocks.clone(),
        utilization: if makespan > 0.0 && engines > 0 { busy / (makespan * engines as f64) } else { 0.0 },
        kinds: kinds.iter().map(|(k, s)| (k.to_string(), s.stats())).collect(),
    }
}
