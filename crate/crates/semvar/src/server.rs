//! HTTP front end over a [`Manager`] whose virtual clock follows the wall
//! clock.

use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use semvar_core::prompt::VarState;
use semvar_core::service::{ClusterConfig, Manager, Policy};
use semvar_core::{SessionId, VarId, VirtualTime};
use tokio::sync::Notify;

use crate::wire::{
    parse_body, parse_criteria, ApiError, GetBody, GetResponse, SessionBody, SessionCreated, SetBody, SubmitBody,
    SubmitResponse,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ServeOptions {
    /// Wall seconds per virtual second; 0 runs engines as fast as possible.
    pub time_scale: f64,
    pub get_timeout: Duration,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions { time_scale: 1.0, get_timeout: Duration::from_secs(300) }
    }
}

struct Shared {
    mgr: Mutex<Manager>,
    /// Signalled whenever a variable may have reached a terminal state.
    changed: Notify,
    /// Signalled whenever new work may be schedulable.
    work: Notify,
    opts: ServeOptions,
    epoch: Instant,
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    pub fn new(cluster: ClusterConfig, policy: Policy, opts: ServeOptions) -> Self {
        AppState(Arc::new(Shared {
            mgr: Mutex::new(Manager::new(cluster, policy)),
            changed: Notify::new(),
            work: Notify::new(),
            opts,
            epoch: Instant::now(),
        }))
    }

    fn lock(&self) -> MutexGuard<'_, Manager> {
        self.0.mgr.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// The manager, with its clock caught up to the wall clock.
    fn synced(&self) -> MutexGuard<'_, Manager> {
        let mut m = self.lock();
        if self.0.opts.time_scale > 0.0 {
            let t = self.virtual_now().max(m.now());
            m.advance_to(t);
        }
        m
    }

    fn virtual_now(&self) -> VirtualTime {
        let wall = self.0.epoch.elapsed().as_secs_f64() * 1000.0;
        VirtualTime::from_ms(wall / self.0.opts.time_scale)
    }

    /// Advances the manager as far as the clock allows. Returns the wall
    /// delay until the next engine event, if one is pending.
    fn drive(&self) -> Option<Duration> {
        let mut m = self.lock();
        if self.0.opts.time_scale == 0.0 {
            m.run_until_idle();
        } else {
            let t = self.virtual_now().max(m.now());
            m.advance_to(t);
        }
        if !m.take_notifications().is_empty() {
            self.0.changed.notify_waiters();
        }
        let next = m.next_event_time()?;
        let wait_ms = next.saturating_sub(m.now()).as_ms() * self.0.opts.time_scale;
        Some(Duration::from_secs_f64(wait_ms / 1000.0))
    }

    /// Runs the virtual clock until the process exits.
    pub async fn run_clock(self) {
        loop {
            let work = self.0.work.notified();
            match self.drive() {
                Some(d) => {
                    let _ = tokio::time::timeout(d.max(Duration::from_micros(200)), work).await;
                }
                None => work.await,
            }
        }
    }

    fn wake(&self) {
        self.0.work.notify_one();
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn create_session(State(st): State<AppState>, body: Bytes) -> ApiResult<SessionCreated> {
    let body: SessionBody = if body.is_empty() { SessionBody::default() } else { parse_body(&body)? };
    let id = st.synced().create_session(body.session_id.map(SessionId))?;
    Ok(Json(SessionCreated { session_id: id.0 }))
}

async fn close_session(State(st): State<AppState>, body: Bytes) -> ApiResult<SessionCreated> {
    let body: SessionBody = parse_body(&body)?;
    let id = body.session_id.ok_or_else(|| ApiError::malformed("missing session_id"))?;
    st.synced().close_session(&SessionId(id.clone()))?;
    st.0.changed.notify_waiters();
    st.wake();
    Ok(Json(SessionCreated { session_id: id }))
}

async fn submit(State(st): State<AppState>, body: Bytes) -> ApiResult<SubmitResponse> {
    let body: SubmitBody = parse_body(&body)?;
    let mut spec = body.to_spec()?;
    if spec.script.is_none() {
        spec.script = Some(filler_script(spec.sampling.max_tokens));
    }
    let sub = st.synced().submit(spec)?;
    st.wake();
    Ok(Json(SubmitResponse {
        request_id: sub.request.0,
        semantic_var_ids: sub.vars.into_iter().map(|(n, v)| (n, v.0)).collect(),
    }))
}

/// Output of a request submitted without a script: at most 16 words.
pub fn filler_script(max_tokens: usize) -> String {
    (0..max_tokens.clamp(1, 16)).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
}

async fn set(State(st): State<AppState>, body: Bytes) -> ApiResult<SessionCreated> {
    let body: SetBody = parse_body(&body)?;
    let session = SessionId(body.session_id.clone());
    st.synced().set_variable(&session, &VarId(body.semantic_var_id), body.value)?;
    st.0.changed.notify_waiters();
    st.wake();
    Ok(Json(SessionCreated { session_id: body.session_id }))
}

async fn get(State(st): State<AppState>, body: Bytes) -> ApiResult<GetResponse> {
    let body: GetBody = parse_body(&body)?;
    let criterion = parse_criteria(&body.criteria)?;
    let session = SessionId(body.session_id);
    let var = VarId(body.semantic_var_id);
    let reply = |state: VarState| match state {
        VarState::Ready(value) => Ok(Json(GetResponse { semantic_var_id: var.0.clone(), value })),
        VarState::Failed(f) => Err(ApiError::upstream(&f)),
        VarState::Empty => unreachable!("only terminal states are returned"),
    };
    let first = st.synced().annotate(&session, &var, criterion)?;
    st.wake();
    if first.is_terminal() {
        return reply(first);
    }
    let deadline = tokio::time::Instant::now() + st.0.opts.get_timeout;
    loop {
        let changed = st.0.changed.notified();
        tokio::pin!(changed);
        changed.as_mut().enable();
        let state = st.lock().var_state(&session, &var)?.clone();
        if state.is_terminal() {
            return reply(state);
        }
        if tokio::time::timeout_at(deadline, changed).await.is_err() {
            return Err(ApiError::timeout(var.as_str()));
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/session", post(create_session))
        .route("/session/close", post(close_session))
        .route("/submit", post(submit))
        .route("/get", post(get))
        .route("/set", post(set))
        .with_state(state)
}

/// Serves on `listener` until the future is dropped.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    tokio::spawn(state.clone().run_clock());
    axum::serve(listener, router(state)).await
}
