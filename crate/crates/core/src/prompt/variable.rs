use alloc::string::String;
use core::fmt;

use crate::ids::{RequestId, SessionId, VarId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PerfCriterion {
    Latency,
    Throughput,
}

impl PerfCriterion {
    pub fn as_str(self) -> &'static str {
        match self {
            PerfCriterion::Latency => "latency",
            PerfCriterion::Throughput => "throughput",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriterionSource {
    /// Attached by a `get` call.
    Client,
    Deduced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Transform,
    Engine,
    Upstream,
    SessionClosed,
}

impl FailureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureKind::Transform => "transform_failed",
            FailureKind::Engine => "engine_failed",
            FailureKind::Upstream => "upstream_failed",
            FailureKind::SessionClosed => "session_closed",
        }
    }
}

/// Why a variable ended up `Failed`, with enough detail to name the culprit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub kind: FailureKind,
    pub message: String,
    pub producer: Option<RequestId>,
    pub transform: Option<String>,
}

impl Failure {
    pub fn new(kind: FailureKind, message: impl Into<String>) -> Self {
        Failure {
            kind,
            message: message.into(),
            producer: None,
            transform: None,
        }
    }

    pub fn with_producer(mut self, producer: RequestId) -> Self {
        self.producer = Some(producer);
        self
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.as_str(), self.message)?;
        if let Some(p) = self.producer {
            write!(f, " (producer request {p})")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VarState {
    Empty,
    Ready(String),
    Failed(Failure),
}

impl VarState {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, VarState::Empty)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VarError {
    #[error("variable `{0}` already has a terminal value")]
    AlreadySet(VarId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticVariable {
    pub id: VarId,
    pub name: String,
    pub session: SessionId,
    state: VarState,
    criterion: Option<(PerfCriterion, CriterionSource)>,
}

impl SemanticVariable {
    pub fn new(id: VarId, name: impl Into<String>, session: SessionId) -> Self {
        SemanticVariable {
            id,
            name: name.into(),
            session,
            state: VarState::Empty,
            criterion: None,
        }
    }

    pub fn state(&self) -> &VarState {
        &self.state
    }

    pub fn value(&self) -> Option<&str> {
        match &self.state {
            VarState::Ready(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_ready(&self) -> bool {
        matches!(self.state, VarState::Ready(_))
    }

    /// Empty → Ready. A second write is rejected and leaves the state untouched.
    pub fn set(&mut self, value: String) -> Result<(), VarError> {
        if self.state.is_terminal() {
            return Err(VarError::AlreadySet(self.id.clone()));
        }
        self.state = VarState::Ready(value);
        Ok(())
    }

    /// Empty → Failed.
    pub fn fail(&mut self, failure: Failure) -> Result<(), VarError> {
        if self.state.is_terminal() {
            return Err(VarError::AlreadySet(self.id.clone()));
        }
        self.state = VarState::Failed(failure);
        Ok(())
    }

    pub fn criterion(&self) -> Option<PerfCriterion> {
        self.criterion.map(|(c, _)| c)
    }

    pub fn client_criterion(&self) -> Option<PerfCriterion> {
        match self.criterion {
            Some((c, CriterionSource::Client)) => Some(c),
            _ => None,
        }
    }

    pub fn annotate(&mut self, criterion: PerfCriterion) {
        self.criterion = Some((criterion, CriterionSource::Client));
    }

    /// Attaches a deduced criterion unless the client already chose one.
    pub fn annotate_deduced(&mut self, criterion: Option<PerfCriterion>) {
        if matches!(self.criterion, Some((_, CriterionSource::Client))) {
            return;
        }
        self.criterion = criterion.map(|c| (c, CriterionSource::Deduced));
    }
}
