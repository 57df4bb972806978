//! The request manager: sessions, semantic-variable exchange, the graph
//! executor and the discrete-event loop over simulated engines.

mod runtime;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::dag::{DagError, Request, RequestDag, Sampling, SchedulingLabel};
use crate::engine::{CostModel, PagedKvStore, SimEngine, StepReport};
use crate::ids::{ContextId, EngineId, RequestId, SessionId, VarId};
use crate::prompt::{
    parse_prompt_template, Direction, Failure, FailureKind, PerfCriterion, TemplateError,
    Tokenizer, TransformSpec, VarError, VarState,
};
use crate::scheduler::SchedConfig;
use crate::time::VirtualTime;

pub use runtime::{Outcome, RequestRecord};

/// How the cluster treats incoming requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Policy {
    /// Objective deduction, task groups, prefix sharing, impact-aware placement.
    AppAware,
    /// Every request latency-bound, least-loaded placement, strict FIFO.
    RequestCentric,
    /// Every request at the throughput bound, least-loaded placement, strict FIFO.
    ThroughputCentric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub engines: u32,
    pub cost: CostModel,
    pub block_size: usize,
    pub blocks_per_engine: usize,
    pub sched: SchedConfig,
    /// Lets requests with a common prompt prefix share its KV context.
    /// Only honored under [`Policy::AppAware`].
    pub prefix_sharing: bool,
    pub record_trace: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            engines: 1,
            cost: CostModel::default(),
            block_size: 16,
            blocks_per_engine: 120_000 / 16,
            sched: SchedConfig::default(),
            prefix_sharing: true,
            record_trace: false,
        }
    }
}

impl ClusterConfig {
    /// Scheduler options implied by `policy` on top of the configured bounds.
    pub fn sched_for(&self, policy: Policy) -> SchedConfig {
        let app = policy == Policy::AppAware;
        SchedConfig {
            impact_aware: app,
            app_aware: app,
            strict_fifo: !app,
            ..self.sched.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServiceError {
    #[error("unknown session `{0}`")]
    UnknownSession(SessionId),
    #[error("session `{0}` already exists")]
    DuplicateSession(SessionId),
    #[error("session `{0}` is closed")]
    SessionClosed(SessionId),
    #[error("unknown variable `{0}`")]
    UnknownVariable(VarId),
    #[error("variable `{0}` already set")]
    AlreadySet(VarId),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("placeholder `{name}`: {reason}")]
    Binding { name: String, reason: String },
    #[error(transparent)]
    Dag(DagError),
}

impl From<DagError> for ServiceError {
    fn from(e: DagError) -> Self {
        match e {
            DagError::UnknownVariable(v) => ServiceError::UnknownVariable(v),
            DagError::UnknownSession(s) => ServiceError::UnknownSession(s),
            other => ServiceError::Dag(other),
        }
    }
}

/// One placeholder binding of a submission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Binding {
    pub name: String,
    pub direction: Direction,
    /// `None` asks the manager to mint a fresh variable.
    pub var: Option<VarId>,
    pub transform: Option<TransformSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubmitSpec {
    pub session: SessionId,
    pub prompt: String,
    pub bindings: Vec<Binding>,
    pub sampling: Sampling,
    /// Text the simulated engine emits for this request.
    pub script: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Submitted {
    pub request: RequestId,
    /// Variable bound to each placeholder, in template order.
    pub vars: Vec<(String, VarId)>,
}

/// A variable reached a terminal state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Notification {
    pub session: SessionId,
    pub var: VarId,
    pub at: VirtualTime,
}

#[derive(Debug, Clone)]
struct Session {
    dag: RequestDag,
    closed: bool,
}

pub struct Manager {
    policy: Policy,
    cfg: ClusterConfig,
    sched: SchedConfig,
    now: VirtualTime,
    tokenizer: Tokenizer,
    sessions: BTreeMap<SessionId, Session>,
    var_owner: BTreeMap<VarId, SessionId>,
    next_session: u64,
    next_request: u64,
    next_var: u64,
    rt: runtime::Runtime,
    outbox: Vec<Notification>,
}

impl Manager {
    pub fn new(cfg: ClusterConfig, policy: Policy) -> Self {
        let engines = (0..cfg.engines)
            .map(|i| {
                SimEngine::new(
                    EngineId(i),
                    cfg.cost,
                    PagedKvStore::new(cfg.block_size, cfg.blocks_per_engine),
                )
            })
            .collect();
        Manager {
            policy,
            sched: cfg.sched_for(policy),
            rt: runtime::Runtime::new(engines, cfg.record_trace, policy == Policy::AppAware && cfg.prefix_sharing),
            cfg,
            now: VirtualTime::ZERO,
            tokenizer: Tokenizer::new(),
            sessions: BTreeMap::new(),
            var_owner: BTreeMap::new(),
            next_session: 0,
            next_request: 0,
            next_var: 0,
            outbox: Vec::new(),
        }
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn now(&self) -> VirtualTime {
        self.now
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn tokenizer_mut(&mut self) -> &mut Tokenizer {
        &mut self.tokenizer
    }

    pub fn create_session(&mut self, id: Option<SessionId>) -> Result<SessionId, ServiceError> {
        let id = match id {
            Some(id) => id,
            None => loop {
                let candidate = SessionId(format!("s{}", self.next_session));
                self.next_session += 1;
                if !self.sessions.contains_key(&candidate) {
                    break candidate;
                }
            },
        };
        if self.sessions.contains_key(&id) {
            return Err(ServiceError::DuplicateSession(id));
        }
        self.sessions.insert(id.clone(), Session { dag: RequestDag::new(id.clone()), closed: false });
        Ok(id)
    }

    fn open_session(&mut self, id: &SessionId) -> Result<&mut Session, ServiceError> {
        let s = self.sessions.get_mut(id).ok_or_else(|| ServiceError::UnknownSession(id.clone()))?;
        if s.closed {
            return Err(ServiceError::SessionClosed(id.clone()));
        }
        Ok(s)
    }

    /// Resolves a variable id within `session`; ids owned by other sessions
    /// are reported as unknown.
    fn check_scope(&self, session: &SessionId, var: &VarId) -> Result<(), ServiceError> {
        match self.var_owner.get(var) {
            Some(owner) if owner != session => Err(ServiceError::UnknownVariable(var.clone())),
            _ => Ok(()),
        }
    }

    fn mint_var(&mut self) -> VarId {
        loop {
            let v = VarId(format!("v{}", self.next_var));
            self.next_var += 1;
            if !self.var_owner.contains_key(&v) {
                return v;
            }
        }
    }

    pub fn submit(&mut self, spec: SubmitSpec) -> Result<Submitted, ServiceError> {
        self.open_session(&spec.session)?;
        let mut template = parse_prompt_template(&spec.prompt)?;

        let mut explicit: BTreeMap<String, &Binding> = BTreeMap::new();
        for b in &spec.bindings {
            let Some(p) = template.placeholders().find(|p| p.name == b.name) else {
                return Err(ServiceError::Binding { name: b.name.clone(), reason: "not in prompt".into() });
            };
            if p.direction != b.direction {
                return Err(ServiceError::Binding {
                    name: b.name.clone(),
                    reason: format!("prompt declares it {}", p.direction.keyword()),
                });
            }
            if explicit.insert(b.name.clone(), b).is_some() {
                return Err(ServiceError::Binding { name: b.name.clone(), reason: "bound twice".into() });
            }
            if let Some(v) = &b.var {
                self.check_scope(&spec.session, v)?;
            }
        }

        let names: Vec<(String, Direction)> =
            template.placeholders().map(|p| (p.name.clone(), p.direction)).collect();
        let mut vars = Vec::with_capacity(names.len());
        for (name, direction) in &names {
            let var = match explicit.get(name).and_then(|b| b.var.clone()) {
                Some(v) => v,
                None if *direction == Direction::Output => self.mint_var(),
                None => {
                    return Err(ServiceError::Binding { name: name.clone(), reason: "input has no variable".into() })
                }
            };
            if let Some(t) = explicit.get(name).and_then(|b| b.transform.clone()) {
                template.placeholder_mut(name).expect("listed above").transform = Some(t);
            }
            vars.push((name.clone(), var));
        }

        let id = RequestId(self.next_request);
        let mut request = Request::new(id, spec.session.clone(), template);
        for (name, var) in &vars {
            request = request.bind(name, var.clone());
        }
        request.sampling = spec.sampling;
        request.arrival_time = self.now;
        request.scripted_output = spec.script;

        let app_aware = self.policy == Policy::AppAware;
        let session = self.open_session(&spec.session)?;
        session.dag.insert_request(request)?;
        if app_aware {
            let _ = session.dag.deduce_objectives();
        }
        self.next_request += 1;
        for (_, v) in &vars {
            self.var_owner.insert(v.clone(), spec.session.clone());
        }
        self.rt.register(id, spec.session.clone(), self.now);
        Ok(Submitted { request: id, vars })
    }

    pub fn set_variable(&mut self, session: &SessionId, var: &VarId, value: String) -> Result<(), ServiceError> {
        self.open_session(session)?;
        self.check_scope(session, var)?;
        let s = self.open_session(session)?;
        let name = var.as_str().into();
        let v = s.dag.ensure_var(var, name);
        v.set(value).map_err(|VarError::AlreadySet(v)| ServiceError::AlreadySet(v))?;
        self.var_owner.insert(var.clone(), session.clone());
        self.outbox.push(Notification { session: session.clone(), var: var.clone(), at: self.now });
        Ok(())
    }

    /// Attaches a criterion (if any) and returns the variable's current state.
    pub fn annotate(
        &mut self,
        session: &SessionId,
        var: &VarId,
        criterion: Option<PerfCriterion>,
    ) -> Result<VarState, ServiceError> {
        let app_aware = self.policy == Policy::AppAware;
        let s = self.sessions.get_mut(session).ok_or_else(|| ServiceError::UnknownSession(session.clone()))?;
        let v = s.dag.var_mut(var).ok_or_else(|| ServiceError::UnknownVariable(var.clone()))?;
        if let Some(c) = criterion {
            if v.client_criterion() != Some(c) {
                v.annotate(c);
                if app_aware && !s.closed {
                    let _ = s.dag.deduce_objectives();
                }
            }
        }
        Ok(s.dag.var(var).expect("checked").state().clone())
    }

    pub fn var_state(&self, session: &SessionId, var: &VarId) -> Result<&VarState, ServiceError> {
        let s = self.sessions.get(session).ok_or_else(|| ServiceError::UnknownSession(session.clone()))?;
        s.dag.var(var).map(|v| v.state()).ok_or_else(|| ServiceError::UnknownVariable(var.clone()))
    }

    pub fn dag(&self, session: &SessionId) -> Option<&RequestDag> {
        self.sessions.get(session).map(|s| &s.dag)
    }

    pub fn label_of(&self, id: RequestId) -> Option<SchedulingLabel> {
        let rec = self.rt.record(id)?;
        self.sessions.get(&rec.session)?.dag.request(id).map(|r| r.label)
    }

    /// Cancels in-flight work, frees its contexts and fails every Empty
    /// variable of the session.
    pub fn close_session(&mut self, session: &SessionId) -> Result<(), ServiceError> {
        self.open_session(session)?;
        let ids: Vec<RequestId> = self.sessions[session].dag.requests().map(|r| r.id).collect();
        for id in ids {
            self.rt.cancel(id, self.now);
        }
        let s = self.sessions.get_mut(session).expect("checked");
        s.closed = true;
        let empty: Vec<VarId> =
            s.dag.vars().filter(|v| !v.state().is_terminal()).map(|v| v.id.clone()).collect();
        for var in empty {
            let producer = s.dag.get_producer(&var).ok().flatten();
            let mut f = Failure::new(FailureKind::SessionClosed, format!("session `{session}` closed"));
            if let Some(p) = producer {
                f = f.with_producer(p);
            }
            let _ = s.dag.var_mut(&var).expect("listed").fail(f);
            self.outbox.push(Notification { session: session.clone(), var, at: self.now });
        }
        Ok(())
    }

    pub fn session_closed(&self, session: &SessionId) -> Option<bool> {
        self.sessions.get(session).map(|s| s.closed)
    }

    pub fn take_notifications(&mut self) -> Vec<Notification> {
        core::mem::take(&mut self.outbox)
    }

    pub fn records(&self) -> impl Iterator<Item = &RequestRecord> {
        self.rt.records()
    }

    pub fn record(&self, id: RequestId) -> Option<&RequestRecord> {
        self.rt.record(id)
    }

    pub fn engines(&self) -> &[SimEngine] {
        self.rt.engines()
    }

    pub fn take_trace(&mut self) -> Vec<String> {
        core::mem::take(&mut self.rt.trace)
    }

    pub fn take_decisions(&mut self) -> Vec<String> {
        core::mem::take(&mut self.rt.decisions)
    }

    /// Busy virtual time per engine.
    pub fn busy_time(&self) -> &[VirtualTime] {
        &self.rt.busy
    }

    pub fn emitted_tokens(&self) -> usize {
        self.rt.emitted_total
    }

    pub fn queued_len(&self) -> usize {
        self.rt.queue_len()
    }

    /// Whether nothing is queued, waiting on a ready input, or running.
    pub fn is_quiescent(&self) -> bool {
        self.rt.is_quiescent(&self.sessions)
    }

    /// Live shared-context ids per engine, for inspection.
    pub fn shared_contexts(&self, engine: EngineId) -> BTreeSet<ContextId> {
        self.rt.shared_contexts(engine)
    }

    pub fn step_reports(&self) -> usize {
        self.rt.steps
    }

    /// Time of the next engine event, if any engine is busy.
    pub fn next_event_time(&self) -> Option<VirtualTime> {
        self.rt.next_event_time()
    }

    /// Processes every event up to and including `t`, then moves the clock to `t`.
    pub fn advance_to(&mut self, t: VirtualTime) {
        self.settle();
        while let Some(te) = self.rt.next_event_time() {
            if te > t {
                break;
            }
            self.now = te.max(self.now);
            self.rt.complete_steps(
                self.now,
                &mut self.sessions,
                &mut self.tokenizer,
                &mut self.outbox,
            );
            self.settle();
        }
        if t > self.now {
            self.now = t;
        }
    }

    /// Runs the executor and scheduler until nothing more can start now.
    pub fn settle(&mut self) {
        self.rt.settle(
            self.now,
            self.policy,
            &self.sched,
            &mut self.sessions,
            &mut self.tokenizer,
            &mut self.outbox,
        );
    }

    /// Runs events until every engine is idle.
    pub fn run_until_idle(&mut self) {
        self.settle();
        while let Some(t) = self.rt.next_event_time() {
            self.advance_to(t);
        }
    }

    pub fn last_step(&self, engine: EngineId) -> Option<&StepReport> {
        self.rt.last_step(engine)
    }
}

#[cfg(test)]
mod tests;
