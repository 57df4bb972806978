//! Per-session request DAG, its analysis primitives and the cluster-wide
//! prefix index.

mod deduce;
mod index;
mod prefix;

pub use deduce::DeduceError;
pub use index::{Owner, PrefixIndex, PrefixMatch};
pub use prefix::{fnv1a_extend, prefix_hashes, render_prompt, PrefixEntry, PrefixHashChain, RenderedPrompt, FNV_OFFSET};

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::ids::{RequestId, SessionId, VarId};
use crate::prompt::{Direction, PerfCriterion, PromptTemplate, SemanticVariable};
use crate::time::VirtualTime;

#[derive(Debug, Clone, PartialEq)]
pub struct Sampling {
    pub max_tokens: usize,
    pub stop: Option<String>,
    /// Recorded for completeness; the simulator does not sample.
    pub temperature: f64,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling {
            max_tokens: 512,
            stop: None,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum SchedulingLabel {
    LatencySensitive,
    ThroughputPreferred,
    #[default]
    Unlabeled,
}

impl SchedulingLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SchedulingLabel::LatencySensitive => "latency",
            SchedulingLabel::ThroughputPreferred => "throughput",
            SchedulingLabel::Unlabeled => "unlabeled",
        }
    }
}

/// A submitted semantic-function call.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: RequestId,
    pub session: SessionId,
    pub template: PromptTemplate,
    /// Placeholder name → bound variable.
    pub bindings: BTreeMap<String, VarId>,
    pub sampling: Sampling,
    pub arrival_time: VirtualTime,
    pub label: SchedulingLabel,
    pub task_group: Option<u32>,
    pub scripted_output: Option<String>,
}

impl Request {
    pub fn new(id: RequestId, session: SessionId, template: PromptTemplate) -> Self {
        Request {
            id,
            session,
            template,
            bindings: BTreeMap::new(),
            sampling: Sampling::default(),
            arrival_time: VirtualTime::ZERO,
            label: SchedulingLabel::Unlabeled,
            task_group: None,
            scripted_output: None,
        }
    }

    pub fn bind(mut self, placeholder: &str, var: impl Into<VarId>) -> Self {
        self.bindings.insert(String::from(placeholder), var.into());
        self
    }

    /// Input variables in placeholder order.
    pub fn input_vars(&self) -> Vec<&VarId> {
        self.template
            .inputs()
            .filter_map(|p| self.bindings.get(&p.name))
            .collect()
    }

    pub fn output_var(&self) -> Option<&VarId> {
        self.template.output().and_then(|p| self.bindings.get(&p.name))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskGroup {
    pub group_id: u32,
    pub members: Vec<RequestId>,
    pub stage_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DagError {
    #[error("variable `{var}` already has producer request {producer}")]
    DuplicateProducer { var: VarId, producer: RequestId },
    #[error("inserting request {0} would create a cycle")]
    CycleDetected(RequestId),
    #[error("request belongs to session `{0}`, not this one")]
    UnknownSession(SessionId),
    #[error("unknown variable `{0}`")]
    UnknownVariable(VarId),
    #[error("placeholder `{0}` has no bound variable")]
    UnboundPlaceholder(String),
    #[error("request {0} has no output placeholder")]
    MissingOutput(RequestId),
    #[error("request id {0} already present")]
    DuplicateRequest(RequestId),
}

#[derive(Debug, Clone)]
struct VarNode {
    var: SemanticVariable,
    producer: Option<RequestId>,
    consumers: BTreeSet<RequestId>,
}

/// Requests and semantic variables of one session, linked by producer and
/// consumer edges. Acyclic at all times.
#[derive(Debug, Clone)]
pub struct RequestDag {
    session: SessionId,
    requests: BTreeMap<RequestId, Request>,
    vars: BTreeMap<VarId, VarNode>,
    groups: Vec<TaskGroup>,
}

impl RequestDag {
    pub fn new(session: SessionId) -> Self {
        RequestDag {
            session,
            requests: BTreeMap::new(),
            vars: BTreeMap::new(),
            groups: Vec::new(),
        }
    }

    pub fn session(&self) -> &SessionId {
        &self.session
    }

    /// Registers a variable node if it does not exist yet.
    pub fn ensure_var(&mut self, id: &VarId, name: &str) -> &mut SemanticVariable {
        let session = self.session.clone();
        &mut self
            .vars
            .entry(id.clone())
            .or_insert_with(|| VarNode {
                var: SemanticVariable::new(id.clone(), name, session),
                producer: None,
                consumers: BTreeSet::new(),
            })
            .var
    }

    pub fn insert_request(&mut self, request: Request) -> Result<(), DagError> {
        if request.session != self.session {
            return Err(DagError::UnknownSession(request.session.clone()));
        }
        if self.requests.contains_key(&request.id) {
            return Err(DagError::DuplicateRequest(request.id));
        }
        for p in request.template.placeholders() {
            if !request.bindings.contains_key(&p.name) {
                return Err(DagError::UnboundPlaceholder(p.name.clone()));
            }
        }
        let output = request.output_var().cloned().ok_or(DagError::MissingOutput(request.id))?;
        if let Some(node) = self.vars.get(&output) {
            if let Some(producer) = node.producer {
                return Err(DagError::DuplicateProducer { var: output, producer });
            }
        }
        let inputs: BTreeSet<VarId> = request.input_vars().into_iter().cloned().collect();
        if inputs.contains(&output) || self.reaches_any(&output, &inputs) {
            return Err(DagError::CycleDetected(request.id));
        }

        for p in request.template.placeholders() {
            let var = &request.bindings[&p.name];
            self.ensure_var(var, &p.name);
            let node = self.vars.get_mut(var).expect("just ensured");
            match p.direction {
                Direction::Input => {
                    node.consumers.insert(request.id);
                }
                Direction::Output => node.producer = Some(request.id),
            }
        }
        self.requests.insert(request.id, request);
        Ok(())
    }

    /// Whether any variable in `targets` is downstream of `from`.
    fn reaches_any(&self, from: &VarId, targets: &BTreeSet<VarId>) -> bool {
        let mut seen = BTreeSet::new();
        let mut stack = alloc::vec![from.clone()];
        while let Some(var) = stack.pop() {
            if targets.contains(&var) {
                return true;
            }
            if !seen.insert(var.clone()) {
                continue;
            }
            if let Some(node) = self.vars.get(&var) {
                for consumer in &node.consumers {
                    if let Some(out) = self.requests[consumer].output_var() {
                        stack.push(out.clone());
                    }
                }
            }
        }
        false
    }

    pub fn get_producer(&self, var: &VarId) -> Result<Option<RequestId>, DagError> {
        self.node(var).map(|n| n.producer)
    }

    pub fn get_consumers(&self, var: &VarId) -> Result<BTreeSet<RequestId>, DagError> {
        self.node(var).map(|n| n.consumers.clone())
    }

    /// The variable's performance criterion: the client's annotation, else a
    /// deduced one, else `None`.
    pub fn get_perf_obj(&self, var: &VarId) -> Result<Option<PerfCriterion>, DagError> {
        self.node(var).map(|n| n.var.criterion())
    }

    fn node(&self, var: &VarId) -> Result<&VarNode, DagError> {
        self.vars.get(var).ok_or_else(|| DagError::UnknownVariable(var.clone()))
    }

    pub fn var(&self, id: &VarId) -> Option<&SemanticVariable> {
        self.vars.get(id).map(|n| &n.var)
    }

    pub fn var_mut(&mut self, id: &VarId) -> Option<&mut SemanticVariable> {
        self.vars.get_mut(id).map(|n| &mut n.var)
    }

    pub fn vars(&self) -> impl Iterator<Item = &SemanticVariable> {
        self.vars.values().map(|n| &n.var)
    }

    pub fn request(&self, id: RequestId) -> Option<&Request> {
        self.requests.get(&id)
    }

    pub fn request_mut(&mut self, id: RequestId) -> Option<&mut Request> {
        self.requests.get_mut(&id)
    }

    pub fn requests(&self) -> impl Iterator<Item = &Request> {
        self.requests.values()
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    pub fn task_groups(&self) -> &[TaskGroup] {
        &self.groups
    }

    /// True once every input variable of the request is Ready.
    pub fn is_schedulable(&self, id: RequestId) -> bool {
        self.requests.get(&id).is_some_and(|r| {
            r.input_vars()
                .into_iter()
                .all(|v| self.var(v).is_some_and(|v| v.is_ready()))
        })
    }

    /// Requests that directly produce an input of `id`.
    pub fn predecessors(&self, id: RequestId) -> Vec<RequestId> {
        let mut out: Vec<RequestId> = self.requests[&id]
            .input_vars()
            .into_iter()
            .filter_map(|v| self.vars.get(v).and_then(|n| n.producer))
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Requests that directly consume the output of `id`.
    pub fn successors(&self, id: RequestId) -> Vec<RequestId> {
        self.requests[&id]
            .output_var()
            .and_then(|v| self.vars.get(v))
            .map(|n| n.consumers.iter().copied().collect())
            .unwrap_or_default()
    }

    /// Kahn's algorithm over request nodes; ties broken by request id.
    pub fn topological_order(&self) -> Vec<RequestId> {
        let mut indegree: BTreeMap<RequestId, usize> =
            self.requests.keys().map(|&id| (id, self.predecessors(id).len())).collect();
        let mut ready: VecDeque<RequestId> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&id, _)| id)
            .collect();
        let mut order = Vec::with_capacity(self.requests.len());
        while let Some(id) = ready.pop_front() {
            order.push(id);
            for succ in self.successors(id) {
                let d = indegree.get_mut(&succ).expect("known request");
                *d -= 1;
                if *d == 0 {
                    ready.push_back(succ);
                }
            }
        }
        order
    }

    /// Debug dump, one `REQ` line per request ordered by id.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for r in self.requests.values() {
            let inputs: Vec<&str> = r.input_vars().into_iter().map(|v| v.as_str()).collect();
            let output = r.output_var().map(|v| v.as_str()).unwrap_or("-");
            let _ = write!(
                out,
                "REQ {} inputs={} output={} label={} group=",
                r.id,
                if inputs.is_empty() { "-".into() } else { inputs.join(",") },
                output,
                r.label.as_str()
            );
            match r.task_group {
                Some(g) => {
                    let _ = writeln!(out, "{g}");
                }
                None => out.push_str("-\n"),
            }
        }
        out
    }
}
