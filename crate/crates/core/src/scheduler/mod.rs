//! Cluster-level placement of ready requests onto engines.

mod queue;

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::dag::{Owner, PrefixHashChain, PrefixIndex};
use crate::ids::{EngineId, RequestId};
use crate::time::VirtualTime;

pub use queue::{QueuedRequest, ScheduleQueue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LoadClass {
    Latency,
    Throughput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedConfig {
    pub latency_bound: usize,
    pub throughput_bound: usize,
    /// Place an oversized task group member by member instead of waiting.
    pub split_groups: bool,
    /// Score candidates by capacity loss plus utilization; when off, by
    /// utilization alone (least loaded).
    pub impact_aware: bool,
    /// Stop a tick at the first unit that fits nowhere.
    pub strict_fifo: bool,
    /// Use task groups and prefix sharing.
    pub app_aware: bool,
}

impl Default for SchedConfig {
    fn default() -> Self {
        SchedConfig {
            latency_bound: 6144,
            throughput_bound: 64000,
            split_groups: false,
            impact_aware: true,
            strict_fifo: false,
            app_aware: true,
        }
    }
}

/// One shareable stretch of a prompt: tokens `[previous end, end)`, keyed by
/// the hash of every token before `end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefixSegment {
    pub hash: u64,
    pub end: usize,
}

/// What a request will hold on an engine.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Demand {
    /// Strictly increasing `end`s, all below `prompt_len`.
    pub segments: Vec<PrefixSegment>,
    pub prompt_len: usize,
    pub max_tokens: usize,
}

impl Demand {
    /// Shareable segments are every non-empty boundary of the chain except
    /// the final one; the rest of the prompt is private to the request.
    pub fn from_chain(chain: &PrefixHashChain, prompt_len: usize, max_tokens: usize) -> Self {
        let mut segments: Vec<PrefixSegment> = Vec::new();
        let n = chain.positions.len().saturating_sub(1);
        for e in &chain.positions[..n] {
            let last_end = segments.last().map_or(0, |s| s.end);
            if e.token_offset > last_end {
                segments.push(PrefixSegment { hash: e.hash, end: e.token_offset });
            }
        }
        Demand { segments, prompt_len, max_tokens }
    }

    pub fn unshared(prompt_len: usize, max_tokens: usize) -> Self {
        Demand { segments: Vec::new(), prompt_len, max_tokens }
    }

    pub fn hashes(&self) -> Vec<u64> {
        self.segments.iter().map(|s| s.hash).collect()
    }

    pub fn private_tokens(&self) -> usize {
        self.prompt_len - self.segments.last().map_or(0, |s| s.end)
    }
}

/// Resident tokens a request adds to an engine whose live contexts carry the
/// prefixes in `live`: prompt tokens not already resident plus `max_tokens`.
pub fn estimate_resident_tokens(demand: &Demand, live: &BTreeSet<u64>) -> usize {
    joint_need([demand], live)
}

/// Resident tokens a set of requests adds when co-located; prefixes they
/// share with each other or with `live` are charged once.
pub fn joint_need<'a>(demands: impl IntoIterator<Item = &'a Demand>, live: &BTreeSet<u64>) -> usize {
    let mut seen: BTreeSet<u64> = BTreeSet::new();
    let mut total = 0;
    for d in demands {
        let mut prev = 0;
        for s in &d.segments {
            if !live.contains(&s.hash) && seen.insert(s.hash) {
                total += s.end - prev;
            }
            prev = s.end;
        }
        total += d.prompt_len - prev + d.max_tokens;
    }
    total
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineDescriptor {
    pub id: EngineId,
    /// Admitted resident-token estimate.
    pub resident: usize,
    pub latency_admitted: bool,
    /// Prefix hashes of live shareable contexts.
    pub live_prefixes: BTreeSet<u64>,
}

impl EngineDescriptor {
    pub fn idle(id: EngineId) -> Self {
        EngineDescriptor { id, resident: 0, latency_admitted: false, live_prefixes: BTreeSet::new() }
    }

    pub fn bound(&self, cfg: &SchedConfig) -> usize {
        if self.latency_admitted {
            cfg.latency_bound
        } else {
            cfg.throughput_bound
        }
    }

    fn admit(&mut self, demands: &[&Demand], class: LoadClass) {
        self.resident += joint_need(demands.iter().copied(), &self.live_prefixes);
        self.latency_admitted |= class == LoadClass::Latency;
        for d in demands {
            self.live_prefixes.extend(d.segments.iter().map(|s| s.hash));
        }
    }
}

/// Impact of admitting `need` tokens of `class` onto `e`, or `None` when it
/// would exceed the bound implied by the joint strictest class.
pub fn impact_score(e: &EngineDescriptor, need: usize, class: LoadClass, cfg: &SchedConfig) -> Option<f64> {
    let clamps = class == LoadClass::Latency && !e.latency_admitted;
    let bound = if e.latency_admitted || class == LoadClass::Latency {
        cfg.latency_bound
    } else {
        cfg.throughput_bound
    };
    if e.resident + need > bound {
        return None;
    }
    let util = (e.resident + need) as f64 / bound as f64;
    if !cfg.impact_aware {
        return Some(util);
    }
    let loss = if clamps {
        (cfg.throughput_bound - cfg.latency_bound) as f64 / cfg.throughput_bound as f64
    } else {
        0.0
    };
    Some(loss + util)
}

/// The candidate engine with minimum impact score, ties to the lower id.
pub fn find_engine(
    demands: &[&Demand],
    class: LoadClass,
    engines: &[EngineDescriptor],
    filter: Option<&BTreeSet<EngineId>>,
    cfg: &SchedConfig,
) -> Option<EngineId> {
    let mut best: Option<(f64, EngineId)> = None;
    for e in engines {
        if filter.is_some_and(|f| !f.contains(&e.id)) {
            continue;
        }
        let need = joint_need(demands.iter().copied(), &e.live_prefixes);
        let Some(score) = impact_score(e, need, class, cfg) else { continue };
        let better = match best {
            None => true,
            Some((s, id)) => score < s || (score == s && e.id < id),
        };
        if better {
            best = Some((score, e.id));
        }
    }
    best.map(|(_, id)| id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reason {
    TaskGroup,
    SharedQueue,
    SharedContext,
    Solo,
}

impl Reason {
    pub fn as_str(self) -> &'static str {
        match self {
            Reason::TaskGroup => "taskgroup",
            Reason::SharedQueue => "shared-queue",
            Reason::SharedContext => "shared-ctx",
            Reason::Solo => "solo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub requests: Vec<RequestId>,
    pub group: Option<u64>,
    pub engine: EngineId,
    pub reason: Reason,
}

impl Placement {
    pub fn log_lines(&self, now: VirtualTime) -> Vec<String> {
        match self.group {
            Some(g) if self.reason == Reason::TaskGroup => alloc::vec![format!(
                "t={now} place req=group:{g} engine={} reason={}",
                self.engine,
                self.reason.as_str()
            )],
            _ => self
                .requests
                .iter()
                .map(|r| {
                    format!(
                        "t={now} place req={r} engine={} reason={}",
                        self.engine,
                        self.reason.as_str()
                    )
                })
                .collect(),
        }
    }
}

fn joint_class(reqs: &[&QueuedRequest]) -> LoadClass {
    if reqs.iter().any(|r| r.class == LoadClass::Latency) {
        LoadClass::Latency
    } else {
        LoadClass::Throughput
    }
}

/// One pass over the queue. Placed requests leave `queue` and are charged to
/// `engines`; the rest stay queued in order.
pub fn schedule_tick(
    queue: &mut ScheduleQueue,
    engines: &mut [EngineDescriptor],
    index: &PrefixIndex,
    cfg: &SchedConfig,
) -> Vec<Placement> {
    let mut placements = Vec::new();
    let order: Vec<RequestId> = queue.iter().map(|q| q.id).collect();
    let mut placed: BTreeSet<RequestId> = BTreeSet::new();

    for rid in order {
        if placed.contains(&rid) {
            continue;
        }
        let r = queue.get(rid).expect("queued").clone();
        let mut chosen: Option<Placement> = None;

        if let (true, Some(g)) = (cfg.app_aware, r.group) {
            let members: Vec<&QueuedRequest> = queue
                .iter()
                .filter(|q| q.group == Some(g) && !placed.contains(&q.id))
                .collect();
            let demands: Vec<&Demand> = members.iter().map(|q| &q.demand).collect();
            let whole = find_engine(&demands, LoadClass::Throughput, engines, None, cfg)
                .map(|e| (members.iter().map(|q| q.id).collect(), e));
            let split = || {
                find_engine(&[&r.demand], LoadClass::Throughput, engines, None, cfg)
                    .map(|e| (alloc::vec![rid], e))
            };
            let found = whole.or_else(|| if cfg.split_groups { split() } else { None });
            match found {
                Some((requests, engine)) => {
                    let p = Placement { requests, group: Some(g), engine, reason: Reason::TaskGroup };
                    commit(&p, LoadClass::Throughput, queue, engines, &mut placed);
                    placements.push(p);
                }
                None if cfg.strict_fifo => break,
                None => {}
            }
            continue;
        }

        let m = if cfg.app_aware {
            index.lookup_with(&r.demand.hashes(), |o| match o {
                Owner::Queued(q) => {
                    q != rid && queue.get(q).is_some_and(|q| q.group.is_none())
                }
                Owner::Context(..) => true,
            })
        } else {
            Default::default()
        };

        let sharers: Vec<&QueuedRequest> = m.queued.iter().filter_map(|id| queue.get(*id)).collect();
        if !sharers.is_empty() {
            let mut unit: Vec<&QueuedRequest> = alloc::vec![queue.get(rid).expect("queued")];
            unit.extend(sharers);
            unit.sort_by_key(|q| (q.arrival, q.id));
            let demands: Vec<&Demand> = unit.iter().map(|q| &q.demand).collect();
            let class = joint_class(&unit);
            if let Some(e) = find_engine(&demands, class, engines, None, cfg) {
                let p = Placement {
                    requests: unit.iter().map(|q| q.id).collect(),
                    group: None,
                    engine: e,
                    reason: Reason::SharedQueue,
                };
                commit(&p, class, queue, engines, &mut placed);
                placements.push(p);
                continue;
            }
        }

        if !m.contexts.is_empty() {
            let filter: BTreeSet<EngineId> = m.contexts.iter().map(|(e, _)| *e).collect();
            if let Some(e) = find_engine(&[&r.demand], r.class, engines, Some(&filter), cfg) {
                chosen = Some(Placement {
                    requests: alloc::vec![rid],
                    group: None,
                    engine: e,
                    reason: Reason::SharedContext,
                });
            }
        }
        if chosen.is_none() {
            chosen = find_engine(&[&r.demand], r.class, engines, None, cfg).map(|e| Placement {
                requests: alloc::vec![rid],
                group: None,
                engine: e,
                reason: Reason::Solo,
            });
        }
        match chosen {
            Some(p) => {
                commit(&p, r.class, queue, engines, &mut placed);
                placements.push(p);
            }
            None if cfg.strict_fifo => break,
            None => {}
        }
    }
    placements
}

fn commit(
    p: &Placement,
    class: LoadClass,
    queue: &mut ScheduleQueue,
    engines: &mut [EngineDescriptor],
    placed: &mut BTreeSet<RequestId>,
) {
    let reqs: Vec<QueuedRequest> = p.requests.iter().filter_map(|id| queue.remove(*id)).collect();
    let demands: Vec<&Demand> = reqs.iter().map(|q| &q.demand).collect();
    let e = engines.iter_mut().find(|e| e.id == p.engine).expect("placement on known engine");
    e.admit(&demands, class);
    placed.extend(p.requests.iter().copied());
}
