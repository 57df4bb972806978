use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{Notification, Policy, Session};
use crate::dag::{render_prompt, Owner, PrefixIndex, RenderedPrompt, SchedulingLabel};
use crate::engine::{script_tokens, EngineError, Finish, LlmEngine, SimEngine, StepReport};
use crate::ids::{ContextId, EngineId, RequestId, SessionId};
use crate::prompt::{apply_transform, Direction, Failure, FailureKind, Tokenizer, VarState};
use crate::scheduler::{
    schedule_tick, Demand, EngineDescriptor, LoadClass, QueuedRequest, SchedConfig, ScheduleQueue,
};
use crate::time::VirtualTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pending,
    Completed,
    Failed(FailureKind),
}

/// Timeline of one request, in virtual time.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestRecord {
    pub id: RequestId,
    pub session: SessionId,
    pub submitted_at: VirtualTime,
    pub ready_at: Option<VirtualTime>,
    pub dispatched_at: Option<VirtualTime>,
    pub first_token_at: Option<VirtualTime>,
    pub finished_at: Option<VirtualTime>,
    pub engine: Option<EngineId>,
    pub label: SchedulingLabel,
    pub group: Option<u64>,
    pub prompt_tokens: usize,
    pub output_tokens: usize,
    pub outcome: Outcome,
}

#[derive(Debug, Clone)]
struct Ready {
    rendered: RenderedPrompt,
    demand: Demand,
}

#[derive(Debug, Clone)]
struct Running {
    engine: EngineId,
    ctx: ContextId,
    class: LoadClass,
    /// Private prompt tokens plus `max_tokens`.
    charge: usize,
    output: Vec<u32>,
}

#[derive(Debug, Clone, Copy)]
struct SharedCtx {
    hash: u64,
    tokens: usize,
}

pub(super) struct Runtime {
    engines: Vec<SimEngine>,
    inflight: Vec<Option<StepReport>>,
    last: Vec<Option<StepReport>>,
    records: BTreeMap<RequestId, RequestRecord>,
    waiting: BTreeSet<RequestId>,
    queued: BTreeMap<RequestId, Ready>,
    running: BTreeMap<RequestId, Running>,
    index: PrefixIndex,
    shared: BTreeMap<(EngineId, u64), ContextId>,
    shared_rev: BTreeMap<(EngineId, ContextId), SharedCtx>,
    groups: BTreeMap<(SessionId, RequestId), u64>,
    next_ctx: u64,
    record_trace: bool,
    sharing: bool,
    pub(super) trace: Vec<String>,
    pub(super) decisions: Vec<String>,
    pub(super) busy: Vec<VirtualTime>,
    pub(super) emitted_total: usize,
    pub(super) steps: usize,
}

fn fail_var(
    sessions: &mut BTreeMap<SessionId, Session>,
    outbox: &mut Vec<Notification>,
    now: VirtualTime,
    session: &SessionId,
    rid: RequestId,
    failure: Failure,
) {
    let Some(s) = sessions.get_mut(session) else { return };
    let Some(out) = s.dag.request(rid).and_then(|r| r.output_var()).cloned() else { return };
    if let Some(v) = s.dag.var_mut(&out) {
        if v.fail(failure).is_ok() {
            outbox.push(Notification { session: session.clone(), var: out, at: now });
        }
    }
}

impl Runtime {
    pub(super) fn new(engines: Vec<SimEngine>, record_trace: bool, sharing: bool) -> Self {
        let n = engines.len();
        Runtime {
            engines,
            inflight: alloc::vec![None; n],
            last: alloc::vec![None; n],
            records: BTreeMap::new(),
            waiting: BTreeSet::new(),
            queued: BTreeMap::new(),
            running: BTreeMap::new(),
            index: PrefixIndex::new(),
            shared: BTreeMap::new(),
            shared_rev: BTreeMap::new(),
            groups: BTreeMap::new(),
            next_ctx: 0,
            record_trace,
            sharing,
            trace: Vec::new(),
            decisions: Vec::new(),
            busy: alloc::vec![VirtualTime::ZERO; n],
            emitted_total: 0,
            steps: 0,
        }
    }

    pub(super) fn register(&mut self, id: RequestId, session: SessionId, now: VirtualTime) {
        self.records.insert(
            id,
            RequestRecord {
                id,
                session,
                submitted_at: now,
                ready_at: None,
                dispatched_at: None,
                first_token_at: None,
                finished_at: None,
                engine: None,
                label: SchedulingLabel::Unlabeled,
                group: None,
                prompt_tokens: 0,
                output_tokens: 0,
                outcome: Outcome::Pending,
            },
        );
        self.waiting.insert(id);
    }

    pub(super) fn records(&self) -> impl Iterator<Item = &RequestRecord> {
        self.records.values()
    }

    pub(super) fn record(&self, id: RequestId) -> Option<&RequestRecord> {
        self.records.get(&id)
    }

    pub(super) fn engines(&self) -> &[SimEngine] {
        &self.engines
    }

    pub(super) fn last_step(&self, e: EngineId) -> Option<&StepReport> {
        self.last.get(e.0 as usize).and_then(|r| r.as_ref())
    }

    pub(super) fn queue_len(&self) -> usize {
        self.queued.len()
    }

    pub(super) fn shared_contexts(&self, e: EngineId) -> BTreeSet<ContextId> {
        self.shared.iter().filter(|((eng, _), _)| *eng == e).map(|(_, c)| *c).collect()
    }

    pub(super) fn is_quiescent(&self, _sessions: &BTreeMap<SessionId, Session>) -> bool {
        self.queued.is_empty() && self.running.is_empty() && self.inflight.iter().all(|s| s.is_none())
    }

    pub(super) fn next_event_time(&self) -> Option<VirtualTime> {
        self.inflight.iter().flatten().map(|r| r.start + r.elapsed).min()
    }

    fn forget_contexts(&mut self, e: EngineId, freed: &[ContextId]) {
        for ctx in freed {
            if let Some(s) = self.shared_rev.remove(&(e, *ctx)) {
                self.shared.remove(&(e, s.hash));
                self.index.remove(Owner::Context(e, *ctx));
            }
        }
    }

    fn release_context(&mut self, e: EngineId, ctx: ContextId) {
        if let Ok(freed) = self.engines[e.0 as usize].free_context(ctx) {
            self.forget_contexts(e, &freed);
        }
    }

    fn close_record(&mut self, rid: RequestId, now: VirtualTime, outcome: Outcome) {
        if let Some(r) = self.records.get_mut(&rid) {
            if r.outcome == Outcome::Pending {
                r.outcome = outcome;
                r.finished_at = Some(now);
            }
        }
    }

    pub(super) fn cancel(&mut self, rid: RequestId, now: VirtualTime) {
        self.waiting.remove(&rid);
        if self.queued.remove(&rid).is_some() {
            self.index.remove(Owner::Queued(rid));
        }
        if let Some(run) = self.running.remove(&rid) {
            let eng = &mut self.engines[run.engine.0 as usize];
            eng.abort(rid.0);
            self.release_context(run.engine, run.ctx);
            if let Some(r) = self.records.get_mut(&rid) {
                r.output_tokens = run.output.len();
            }
        }
        self.close_record(rid, now, Outcome::Failed(FailureKind::SessionClosed));
    }

    /// Moves waiting requests whose inputs are terminal into the ready set
    /// (or fails them). Returns whether anything changed.
    fn poll(
        &mut self,
        now: VirtualTime,
        sessions: &mut BTreeMap<SessionId, Session>,
        tokenizer: &mut Tokenizer,
        outbox: &mut Vec<Notification>,
    ) -> bool {
        let mut changed_any = false;
        loop {
            let mut changed = false;
            let ids: Vec<RequestId> = self.waiting.iter().copied().collect();
            for rid in ids {
                let session = self.records[&rid].session.clone();
                let Some(s) = sessions.get(&session) else { continue };
                if s.closed {
                    continue;
                }
                let req = s.dag.request(rid).expect("registered request");
                let mut values = BTreeMap::new();
                let mut blocked = false;
                let mut failure = None;
                for p in req.template.inputs() {
                    let var = &req.bindings[&p.name];
                    match s.dag.var(var).map(|v| v.state()) {
                        Some(VarState::Ready(v)) => {
                            let v = match &p.transform {
                                Some(t) => match apply_transform(t, v) {
                                    Ok(v) => v,
                                    Err(e) => {
                                        let mut f = Failure::new(FailureKind::Transform, e.to_string())
                                            .with_producer(rid);
                                        f.transform = Some(t.to_string());
                                        failure = Some(f);
                                        break;
                                    }
                                },
                                None => v.clone(),
                            };
                            values.insert(p.name.clone(), v);
                        }
                        Some(VarState::Failed(f)) => {
                            let mut up = Failure::new(
                                FailureKind::Upstream,
                                format!("input `{}` failed: {}", p.name, f.message),
                            );
                            up.producer = f.producer;
                            up.transform = f.transform.clone();
                            failure = Some(up);
                            break;
                        }
                        _ => blocked = true,
                    }
                }
                if let Some(f) = failure {
                    let kind = f.kind;
                    self.waiting.remove(&rid);
                    fail_var(sessions, outbox, now, &session, rid, f);
                    self.close_record(rid, now, Outcome::Failed(kind));
                    changed = true;
                    continue;
                }
                if blocked {
                    continue;
                }
                let rendered = render_prompt(&req.template, tokenizer, &values);
                let len = rendered.token_len();
                let max = req.sampling.max_tokens;
                let demand = if self.sharing {
                    Demand::from_chain(&rendered.chain, len, max)
                } else {
                    Demand::unshared(len, max)
                };
                if !demand.segments.is_empty() {
                    self.index.insert(&demand.hashes(), Owner::Queued(rid));
                }
                self.waiting.remove(&rid);
                self.queued.insert(rid, Ready { rendered, demand });
                let rec = self.records.get_mut(&rid).expect("registered");
                rec.ready_at = Some(now);
                rec.prompt_tokens = len;
                changed = true;
            }
            if !changed {
                return changed_any;
            }
            changed_any = true;
        }
    }

    fn descriptors(&self) -> Vec<EngineDescriptor> {
        let mut out: Vec<EngineDescriptor> =
            self.engines.iter().map(|e| EngineDescriptor::idle(e.id())).collect();
        for ((e, ctx), s) in &self.shared_rev {
            let _ = ctx;
            let d = &mut out[e.0 as usize];
            d.resident += s.tokens;
            d.live_prefixes.insert(s.hash);
        }
        for run in self.running.values() {
            let d = &mut out[run.engine.0 as usize];
            d.resident += run.charge;
            d.latency_admitted |= run.class == LoadClass::Latency;
        }
        out
    }

    fn class_and_group(
        &mut self,
        policy: Policy,
        sessions: &BTreeMap<SessionId, Session>,
        rid: RequestId,
    ) -> (LoadClass, Option<u64>, SchedulingLabel) {
        let session = &self.records[&rid].session;
        let dag = &sessions[session].dag;
        let req = dag.request(rid).expect("registered");
        match policy {
            Policy::RequestCentric => (LoadClass::Latency, None, req.label),
            Policy::ThroughputCentric => (LoadClass::Throughput, None, req.label),
            Policy::AppAware => {
                let class = match req.label {
                    SchedulingLabel::ThroughputPreferred => LoadClass::Throughput,
                    _ => LoadClass::Latency,
                };
                let group = req.task_group.and_then(|g| {
                    let leader = *dag.task_groups().get(g as usize)?.members.first()?;
                    let next = self.groups.len() as u64;
                    Some(*self.groups.entry((session.clone(), leader)).or_insert(next))
                });
                (class, group, req.label)
            }
        }
    }

    fn tick(
        &mut self,
        now: VirtualTime,
        policy: Policy,
        sched: &SchedConfig,
        sessions: &mut BTreeMap<SessionId, Session>,
        tokenizer: &mut Tokenizer,
        outbox: &mut Vec<Notification>,
    ) -> usize {
        if self.queued.is_empty() {
            return 0;
        }
        let mut queue = ScheduleQueue::new();
        let mut meta = BTreeMap::new();
        let ids: Vec<RequestId> = self.queued.keys().copied().collect();
        for rid in ids {
            let (class, group, label) = self.class_and_group(policy, sessions, rid);
            meta.insert(rid, (class, group, label));
            queue.push(QueuedRequest {
                id: rid,
                arrival: self.records[&rid].submitted_at,
                class,
                group,
                demand: self.queued[&rid].demand.clone(),
            });
        }
        let mut descs = self.descriptors();
        let placements = schedule_tick(&mut queue, &mut descs, &self.index, sched);
        let mut n = 0;
        for p in placements {
            self.decisions.extend(p.log_lines(now));
            for rid in &p.requests {
                let (class, group, label) = meta[rid];
                let class = if p.reason == crate::scheduler::Reason::TaskGroup {
                    LoadClass::Throughput
                } else {
                    class
                };
                self.dispatch(*rid, p.engine, class, group, label, now, sessions, tokenizer, outbox);
                n += 1;
            }
        }
        n
    }

    #[allow(clippy::too_many_arguments)]
    fn dispatch(
        &mut self,
        rid: RequestId,
        e: EngineId,
        class: LoadClass,
        group: Option<u64>,
        label: SchedulingLabel,
        now: VirtualTime,
        sessions: &mut BTreeMap<SessionId, Session>,
        tokenizer: &mut Tokenizer,
        outbox: &mut Vec<Notification>,
    ) {
        let ready = self.queued.remove(&rid).expect("placed request is queued");
        self.index.remove(Owner::Queued(rid));
        let session = self.records[&rid].session.clone();
        let req = sessions[&session].dag.request(rid).expect("registered").clone();

        let ei = e.0 as usize;
        if self.inflight[ei].is_none() && !self.engines[ei].has_work() {
            self.engines[ei].sync_clock(now);
        }
        let tokens = ready.rendered.tokens();
        let mut parent = None;
        let mut created: Vec<ContextId> = Vec::new();
        let mut prev = 0;
        let mut result: Result<(), EngineError> = Ok(());
        for seg in &ready.demand.segments {
            if let Some(&ctx) = self.shared.get(&(e, seg.hash)) {
                parent = Some(ctx);
            } else {
                let ctx = ContextId(self.next_ctx);
                self.next_ctx += 1;
                if let Err(err) = self.engines[ei].fill(&tokens[prev..seg.end], ctx, parent) {
                    result = Err(err);
                    break;
                }
                self.shared.insert((e, seg.hash), ctx);
                self.shared_rev.insert((e, ctx), SharedCtx { hash: seg.hash, tokens: seg.end - prev });
                self.index.insert(&[seg.hash], Owner::Context(e, ctx));
                created.push(ctx);
                parent = Some(ctx);
            }
            prev = seg.end;
        }
        let private = ContextId(self.next_ctx);
        self.next_ctx += 1;
        let mut private_live = false;
        if result.is_ok() {
            result = self.engines[ei].fill(&tokens[prev..], private, parent).map(|_| ());
            private_live = result.is_ok();
        }
        if result.is_ok() {
            let script = req
                .scripted_output
                .as_deref()
                .map(|s| script_tokens(tokenizer, s, &req.sampling));
            result = self.engines[ei].generate(&req.sampling, private, None, script.as_deref(), rid.0);
        }
        for &ctx in created.iter().rev() {
            if let Ok(freed) = self.engines[ei].mark_dropped(ctx) {
                self.forget_contexts(e, &freed);
            }
        }

        let rec = self.records.get_mut(&rid).expect("registered");
        rec.dispatched_at = Some(now);
        rec.engine = Some(e);
        rec.label = label;
        rec.group = group;
        if let Err(err) = result {
            if private_live {
                self.release_context(e, private);
            }
            let f = Failure::new(FailureKind::Engine, err.to_string()).with_producer(rid);
            fail_var(sessions, outbox, now, &session, rid, f);
            self.close_record(rid, now, Outcome::Failed(FailureKind::Engine));
            return;
        }
        self.running.insert(
            rid,
            Running {
                engine: e,
                ctx: private,
                class,
                charge: ready.demand.private_tokens() + req.sampling.max_tokens,
                output: Vec::new(),
            },
        );
    }

    fn kick(&mut self, now: VirtualTime) {
        for i in 0..self.engines.len() {
            if self.inflight[i].is_some() || !self.engines[i].has_work() {
                continue;
            }
            self.engines[i].sync_clock(now);
            let report = self.engines[i].step();
            self.steps += 1;
            if self.record_trace {
                self.trace.push(report.trace_line(self.engines[i].id()));
            }
            self.inflight[i] = Some(report);
        }
    }

    pub(super) fn settle(
        &mut self,
        now: VirtualTime,
        policy: Policy,
        sched: &SchedConfig,
        sessions: &mut BTreeMap<SessionId, Session>,
        tokenizer: &mut Tokenizer,
        outbox: &mut Vec<Notification>,
    ) {
        loop {
            let polled = self.poll(now, sessions, tokenizer, outbox);
            let placed = self.tick(now, policy, sched, sessions, tokenizer, outbox);
            if placed == 0 && !self.queued.is_empty() && self.all_idle() {
                self.fail_unplaceable(now, sessions, outbox);
                continue;
            }
            if !polled && placed == 0 {
                break;
            }
        }
        self.kick(now);
    }

    fn all_idle(&self) -> bool {
        self.running.is_empty()
            && self.inflight.iter().all(|s| s.is_none())
            && self.engines.iter().all(|e| !e.has_work())
    }

    /// With every engine empty, the oldest queued request can never be placed.
    fn fail_unplaceable(
        &mut self,
        now: VirtualTime,
        sessions: &mut BTreeMap<SessionId, Session>,
        outbox: &mut Vec<Notification>,
    ) {
        let head = self
            .queued
            .keys()
            .copied()
            .min_by_key(|r| (self.records[r].submitted_at, *r))
            .expect("queue non-empty");
        self.queued.remove(&head);
        self.index.remove(Owner::Queued(head));
        let session = self.records[&head].session.clone();
        let f = Failure::new(FailureKind::Engine, "request exceeds engine capacity").with_producer(head);
        fail_var(sessions, outbox, now, &session, head, f);
        self.close_record(head, now, Outcome::Failed(FailureKind::Engine));
    }

    /// Commits every engine step that ends at or before `now`.
    pub(super) fn complete_steps(
        &mut self,
        now: VirtualTime,
        sessions: &mut BTreeMap<SessionId, Session>,
        tokenizer: &mut Tokenizer,
        outbox: &mut Vec<Notification>,
    ) {
        for i in 0..self.engines.len() {
            let due = matches!(&self.inflight[i], Some(r) if r.start + r.elapsed <= now);
            if !due {
                continue;
            }
            let report = self.inflight[i].take().expect("due");
            self.busy[i] += report.elapsed;
            let end = report.start + report.elapsed;
            for &(tag, tok) in &report.emitted {
                let rid = RequestId(tag);
                if let Some(run) = self.running.get_mut(&rid) {
                    run.output.push(tok);
                    self.emitted_total += 1;
                    let rec = self.records.get_mut(&rid).expect("registered");
                    rec.first_token_at.get_or_insert(end);
                }
            }
            for &(tag, finish) in &report.finished {
                self.finish(RequestId(tag), finish, end, sessions, tokenizer, outbox);
            }
            self.last[i] = Some(report);
        }
    }

    fn finish(
        &mut self,
        rid: RequestId,
        finish: Finish,
        now: VirtualTime,
        sessions: &mut BTreeMap<SessionId, Session>,
        tokenizer: &mut Tokenizer,
        outbox: &mut Vec<Notification>,
    ) {
        let Some(run) = self.running.remove(&rid) else { return };
        self.release_context(run.engine, run.ctx);
        let session = self.records[&rid].session.clone();
        if let Some(rec) = self.records.get_mut(&rid) {
            rec.output_tokens = run.output.len();
        }
        if finish == Finish::OutOfMemory {
            let f = Failure::new(FailureKind::Engine, "out of KV memory during generation").with_producer(rid);
            fail_var(sessions, outbox, now, &session, rid, f);
            self.close_record(rid, now, Outcome::Failed(FailureKind::Engine));
            return;
        }
        let text = match tokenizer.detokenize(&run.output) {
            Ok(t) => t,
            Err(e) => {
                let f = Failure::new(FailureKind::Engine, format!("{e}")).with_producer(rid);
                fail_var(sessions, outbox, now, &session, rid, f);
                self.close_record(rid, now, Outcome::Failed(FailureKind::Engine));
                return;
            }
        };
        let Some(s) = sessions.get_mut(&session) else { return };
        let req = s.dag.request(rid).expect("registered");
        let out = req.output_var().cloned().expect("requests have an output");
        let transform = req
            .template
            .placeholders()
            .find(|p| p.direction == Direction::Output)
            .and_then(|p| p.transform.clone());
        let value = match &transform {
            Some(t) => apply_transform(t, &text).map_err(|e| {
                let mut f = Failure::new(FailureKind::Transform, e.to_string()).with_producer(rid);
                f.transform = Some(t.to_string());
                f
            }),
            None => Ok(text),
        };
        let var = s.dag.var_mut(&out).expect("output registered");
        let outcome = match value {
            Ok(v) => var.set(v).map(|_| Outcome::Completed).unwrap_or(Outcome::Completed),
            Err(f) => {
                let _ = var.fail(f);
                Outcome::Failed(FailureKind::Transform)
            }
        };
        outbox.push(Notification { session, var: out, at: now });
        self.close_record(rid, now, outcome);
    }
}
