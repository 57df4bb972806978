//! Calibrated simulation scenarios behind the `check` subcommand.

use std::time::Instant;

use semvar_core::service::{ClusterConfig, Policy};
use semvar_core::VirtualTime;

use super::driver::{run_experiment, RunOutput};
use super::metrics::summarize;
use super::workload::{WorkloadKind, WorkloadSpec};

pub const CHAIN_RTT_MS: f64 = 250.0;
pub const CHAIN_BACKGROUND: usize = 8;
pub const WALL_LIMIT_S: f64 = 5.0;
pub const MAP_REDUCE_MIN_RATIO: f64 = 1.5;
pub const CHAIN_BACKGROUND_MIN_RATIO: f64 = 1.5;
pub const SHARED_MIN_RATIO: f64 = 10.0;

fn run(spec: &WorkloadSpec, policy: Policy, cluster: &ClusterConfig) -> RunOutput {
    run_experiment(spec, policy, cluster).expect("preset specs are valid")
}

fn e2e(run: &RunOutput, kind: &str) -> VirtualTime {
    let a = run.apps.iter().find(|a| a.kind == kind).expect("app present");
    a.done.expect("app completed") - a.start
}

pub fn chain_spec(background: usize) -> WorkloadSpec {
    WorkloadSpec {
        rtt_ms_range: [CHAIN_RTT_MS, CHAIN_RTT_MS],
        background_clients: background,
        ..WorkloadSpec::preset(WorkloadKind::ChainSummary)
    }
}

/// Chain E2E under app-aware and request-centric policies, and the wall time
/// both runs took.
pub fn chain(background: usize) -> (VirtualTime, VirtualTime, f64) {
    let spec = chain_spec(background);
    let cluster = ClusterConfig::default();
    let t = Instant::now();
    let app = run(&spec, Policy::AppAware, &cluster);
    let rc = run(&spec, Policy::RequestCentric, &cluster);
    (e2e(&app, "chain"), e2e(&rc, "chain"), t.elapsed().as_secs_f64())
}

/// Map-reduce makespan under app-aware and request-centric policies, and wall time.
pub fn map_reduce() -> (VirtualTime, VirtualTime, f64) {
    let spec = WorkloadSpec::preset(WorkloadKind::MapReduceSummary);
    let cluster = ClusterConfig::default();
    let t = Instant::now();
    let app = run(&spec, Policy::AppAware, &cluster);
    let rc = run(&spec, Policy::RequestCentric, &cluster);
    (e2e(&app, "map-reduce"), e2e(&rc, "map-reduce"), t.elapsed().as_secs_f64())
}

/// A cluster large enough to hold every shared-prompt request at once.
pub fn roomy_cluster(prefix_sharing: bool, shared_kernel: bool) -> ClusterConfig {
    let mut c = ClusterConfig { prefix_sharing, record_trace: true, blocks_per_engine: 1 << 16, ..ClusterConfig::default() };
    c.sched.throughput_bound = 1 << 20;
    c.cost.shared_kernel = shared_kernel;
    c
}

pub fn shared_spec(users: usize) -> WorkloadSpec {
    WorkloadSpec { user_count: users, ..WorkloadSpec::preset(WorkloadKind::SharedPromptServing) }
}

/// Peak KV blocks for the shared-prompt workload.
pub fn shared_peak(spec: &WorkloadSpec, prefix_sharing: bool) -> usize {
    let r = run(spec, Policy::AppAware, &roomy_cluster(prefix_sharing, true));
    r.peak_blocks.iter().copied().max().unwrap_or(0)
}

/// Engine trace of the shared-prompt workload with the shared kernel on or off.
pub fn shared_trace(spec: &WorkloadSpec, shared_kernel: bool) -> Vec<String> {
    run(spec, Policy::AppAware, &roomy_cluster(true, shared_kernel)).trace
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedOutcome {
    pub chat_norm_app: f64,
    pub chat_norm_throughput: f64,
    pub map_reduce_app_ms: f64,
    pub map_reduce_request_ms: f64,
}

pub fn mixed(seed: u64) -> MixedOutcome {
    let spec = WorkloadSpec { seed, ..WorkloadSpec::preset(WorkloadKind::Mixed) };
    let cluster = ClusterConfig { engines: 4, ..ClusterConfig::default() };
    let stats = |p| summarize(&spec, &run(&spec, p, &cluster));
    let (app, tc, rc) = (stats(Policy::AppAware), stats(Policy::ThroughputCentric), stats(Policy::RequestCentric));
    let chat = |r: &super::MetricsReport| r.kinds["chat"].mean_normalized_latency_ms.expect("chat completed");
    let mr = |r: &super::MetricsReport| r.kinds["map-reduce"].makespan_ms.expect("map-reduce completed");
    MixedOutcome {
        chat_norm_app: chat(&app),
        chat_norm_throughput: chat(&tc),
        map_reduce_app_ms: mr(&app),
        map_reduce_request_ms: mr(&rc),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Parses `t=.. engine=.. fill=.. batch=.. emitted=..` into (batch, emitted).
fn batch_and_emitted(line: &str) -> Option<(usize, usize)> {
    let field = |k: &str| {
        line.split_whitespace().find_map(|p| p.strip_prefix(k).and_then(|v| v.strip_prefix('='))).and_then(|v| v.parse().ok())
    };
    Some((field("batch")?, field("emitted")?))
}

/// Runs the simulation scenarios; every line must pass.
pub fn run_checks() -> Vec<CheckLine> {
    let mut out = Vec::new();
    let (app, rc, wall) = chain(0);
    let gap = rc.saturating_sub(app);
    let expected = VirtualTime::from_ms(10.0 * CHAIN_RTT_MS);
    out.push(CheckLine {
        name: "chain-rtt",
        pass: gap == expected && rc > app && wall < WALL_LIMIT_S,
        detail: format!("request-centric {rc} ms, app-aware {app} ms, gap {gap} ms (want {expected}), wall {wall:.3} s"),
    });
    let (app, rc, _) = chain(CHAIN_BACKGROUND);
    let ratio = rc.as_ms() / app.as_ms();
    out.push(CheckLine {
        name: "chain-background",
        pass: ratio > CHAIN_BACKGROUND_MIN_RATIO,
        detail: format!("ratio {ratio:.3} with {CHAIN_BACKGROUND} background clients (want > {CHAIN_BACKGROUND_MIN_RATIO})"),
    });
    let (app, rc, wall) = map_reduce();
    let ratio = rc.as_ms() / app.as_ms();
    out.push(CheckLine {
        name: "map-reduce",
        pass: ratio >= MAP_REDUCE_MIN_RATIO && wall < WALL_LIMIT_S,
        detail: format!("makespan ratio {ratio:.3} (want >= {MAP_REDUCE_MIN_RATIO}), wall {wall:.3} s"),
    });
    let spec = shared_spec(64);
    let (on, off) = (shared_peak(&spec, true), shared_peak(&spec, false));
    let ratio = off as f64 / on as f64;
    out.push(CheckLine {
        name: "shared-prefix",
        pass: ratio > SHARED_MIN_RATIO,
        detail: format!("peak blocks {on} shared vs {off} unshared, ratio {ratio:.3} (want > {SHARED_MIN_RATIO})"),
    });
    let on = shared_trace(&spec, true);
    let off = shared_trace(&spec, false);
    let prefix = spec.system_prompt_len;
    let mut shared_steps = 0;
    let ok = on.len() == off.len()
        && on.iter().zip(&off).all(|(a, b)| match (batch_and_emitted(a), batch_and_emitted(b)) {
            (Some((ba, n)), Some((bb, m))) if n == m => {
                if n >= 2 {
                    shared_steps += 1;
                    bb == ba + (n - 1) * prefix
                } else {
                    ba == bb
                }
            }
            _ => false,
        });
    out.push(CheckLine {
        name: "shared-kernel",
        pass: ok && shared_steps > 0,
        detail: format!("{shared_steps} shared decode steps, unshared batch = shared batch + (n-1)*{prefix} on every step: {ok}"),
    });
    let m = mixed(0);
    out.push(CheckLine {
        name: "mixed",
        pass: m.chat_norm_app <= m.chat_norm_throughput && m.map_reduce_app_ms <= m.map_reduce_request_ms,
        detail: format!(
            "chat normalized latency {:.3} vs throughput-centric {:.3}; map-reduce makespan {:.3} vs request-centric {:.3}",
            m.chat_norm_app, m.chat_norm_throughput, m.map_reduce_app_ms, m.map_reduce_request_ms
        ),
    });
    out
}
