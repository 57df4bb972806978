//! Runs a workload against a simulated cluster in virtual time.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semvar_core::dag::Sampling;
use semvar_core::prompt::{Direction, VarState};
use semvar_core::service::{Binding, ClusterConfig, Manager, Policy, RequestRecord, SubmitSpec};
use semvar_core::{RequestId, SessionId, VarId, VirtualTime};

use super::workload::{generate_workload, App, InvalidSpec, Source, WorkloadSpec};

/// Stream of the RTT generator; the workload uses stream 0.
const RTT_STREAM: u64 = 1;

pub fn policy_name(p: Policy) -> &'static str {
    match p {
        Policy::AppAware => "app-aware",
        Policy::RequestCentric => "request-centric",
        Policy::ThroughputCentric => "throughput-centric",
    }
}

pub fn parse_policy(s: &str) -> Option<Policy> {
    [Policy::AppAware, Policy::RequestCentric, Policy::ThroughputCentric]
        .into_iter()
        .find(|p| policy_name(*p) == s)
}

/// Completion of one foreground application.
#[derive(Debug, Clone, PartialEq)]
pub struct AppOutcome {
    pub kind: &'static str,
    pub start: VirtualTime,
    /// Time the last final output became known; `None` if one failed.
    pub done: Option<VirtualTime>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub policy: Policy,
    pub apps: Vec<AppOutcome>,
    pub records: Vec<(RequestRecord, &'static str)>,
    pub peak_blocks: Vec<usize>,
    pub busy: Vec<VirtualTime>,
    pub end: VirtualTime,
    pub trace: Vec<String>,
    pub decisions: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Action {
    Start(usize),
    Submit(usize, usize),
}

struct AppRun {
    session: Option<SessionId>,
    outputs: Vec<Option<VarId>>,
    values: Vec<Option<(String, VirtualTime)>>,
    submitted: Vec<bool>,
    failed: bool,
    done: Option<VirtualTime>,
}

struct Driver<'a> {
    apps: &'a [App],
    mgr: Manager,
    client_side: bool,
    rtt: ChaCha8Rng,
    rtt_range: [f64; 2],
    runs: Vec<AppRun>,
    actions: BTreeSet<(VirtualTime, u64, Action)>,
    seq: u64,
    by_var: BTreeMap<VarId, (usize, usize)>,
    kind_of: BTreeMap<RequestId, &'static str>,
    foreground_left: usize,
    next_const: u64,
}

impl<'a> Driver<'a> {
    fn schedule(&mut self, at: VirtualTime, a: Action) {
        self.actions.insert((at, self.seq, a));
        self.seq += 1;
    }

    fn draw_rtt(&mut self) -> VirtualTime {
        let [lo, hi] = self.rtt_range;
        let ms = if hi > lo { self.rtt.random_range(lo..hi) } else { lo };
        VirtualTime::from_ms(ms)
    }

    fn const_var(&mut self, session: &SessionId, value: String) -> VarId {
        let id = VarId(format!("c{}", self.next_const));
        self.next_const += 1;
        self.mgr.set_variable(session, &id, value).expect("fresh constant");
        id
    }

    fn start(&mut self, i: usize) {
        let app = &self.apps[i];
        let n = app.calls.len();
        let session = self.mgr.create_session(None).expect("fresh session");
        self.runs[i] = AppRun {
            session: Some(session),
            outputs: vec![None; n],
            values: vec![None; n],
            submitted: vec![false; n],
            failed: false,
            done: None,
        };
        if self.client_side && app.client_rtt {
            for (k, c) in app.calls.iter().enumerate() {
                if c.inputs.iter().all(|(_, s)| matches!(s, Source::Const(_))) {
                    let at = self.mgr.now() + self.draw_rtt();
                    self.schedule(at, Action::Submit(i, k));
                }
            }
        } else if self.client_side {
            for k in 0..n {
                if self.apps[i].calls[k].inputs.iter().all(|(_, s)| matches!(s, Source::Const(_))) {
                    self.submit(i, k);
                }
            }
        } else {
            for k in 0..n {
                self.submit(i, k);
            }
            let session = self.runs[i].session.clone().expect("started");
            for &(k, crit) in &self.apps[i].finals {
                let var = self.runs[i].outputs[k].clone().expect("submitted");
                self.mgr.annotate(&session, &var, Some(crit)).expect("own variable");
            }
        }
    }

    fn submit(&mut self, i: usize, k: usize) {
        let apps = self.apps;
        let call = &apps[i].calls[k];
        let session = self.runs[i].session.clone().expect("started");
        let mut bindings = Vec::new();
        for (name, src) in &call.inputs {
            let var = match src {
                Source::Const(text) => self.const_var(&session, text.clone()),
                Source::Output(j) if self.client_side => {
                    let (text, _) = self.runs[i].values[*j].clone().expect("client waits for inputs");
                    self.const_var(&session, text)
                }
                Source::Output(j) => self.runs[i].outputs[*j].clone().expect("calls are topologically ordered"),
            };
            bindings.push(Binding { name: name.clone(), direction: Direction::Input, var: Some(var), transform: None });
        }
        bindings.push(Binding { name: "out".into(), direction: Direction::Output, var: None, transform: None });
        let spec = SubmitSpec {
            session,
            prompt: call.prompt.clone(),
            bindings,
            sampling: Sampling { max_tokens: call.max_tokens, stop: None, temperature: 0.0 },
            script: Some(call.script.clone()),
        };
        let sub = self.mgr.submit(spec).expect("generated calls are valid");
        let out = sub.vars.iter().find(|(n, _)| n == "out").map(|(_, v)| v.clone()).expect("output bound");
        self.by_var.insert(out.clone(), (i, k));
        self.kind_of.insert(sub.request, apps[i].kind);
        self.runs[i].outputs[k] = Some(out);
        self.runs[i].submitted[k] = true;
    }

    fn on_output(&mut self, i: usize, k: usize, at: VirtualTime) {
        let session = self.runs[i].session.clone().expect("started");
        let var = self.runs[i].outputs[k].clone().expect("submitted");
        match self.mgr.var_state(&session, &var).expect("own variable").clone() {
            VarState::Ready(text) => self.runs[i].values[k] = Some((text, at)),
            VarState::Failed(_) => self.runs[i].failed = true,
            VarState::Empty => return,
        }
        let app = &self.apps[i];
        if self.client_side && !self.runs[i].failed {
            for (j, c) in app.calls.iter().enumerate() {
                let ready = c.inputs.iter().all(|(_, s)| match s {
                    Source::Const(_) => true,
                    Source::Output(d) => self.runs[i].values[*d].is_some(),
                });
                if !self.runs[i].submitted[j] && ready {
                    self.runs[i].submitted[j] = true;
                    if app.client_rtt {
                        let t = at + self.draw_rtt();
                        self.schedule(t, Action::Submit(i, j));
                    } else {
                        self.submit(i, j);
                    }
                }
            }
        }
        self.check_done(i, at);
    }

    fn check_done(&mut self, i: usize, at: VirtualTime) {
        let app = &self.apps[i];
        let run = &self.runs[i];
        if run.done.is_some() {
            return;
        }
        if app.closed_loop {
            let all = run.values.iter().all(|v| v.is_some());
            if (all || run.failed) && self.foreground_left > 0 {
                self.schedule(at, Action::Start(i));
            }
            return;
        }
        let finished = run.failed || app.finals.iter().all(|&(k, _)| run.values[k].is_some());
        if finished {
            let last = app.finals.iter().filter_map(|&(k, _)| run.values[k].as_ref().map(|v| v.1)).max();
            self.runs[i].done = Some(if run.failed { VirtualTime::ZERO } else { last.unwrap_or(at) });
            self.foreground_left -= 1;
        }
    }

    fn run(&mut self) {
        loop {
            let next_action = self.actions.first().map(|a| a.0);
            let next_event = self.mgr.next_event_time();
            let t = match (next_action, next_event) {
                (None, None) => break,
                (Some(a), Some(e)) => a.min(e),
                (a, e) => a.or(e).expect("one is set"),
            };
            self.mgr.advance_to(t);
            self.drain_notifications();
            while let Some(&(at, _, _)) = self.actions.first() {
                if at > t {
                    break;
                }
                let (_, _, a) = self.actions.pop_first().expect("non-empty");
                match a {
                    Action::Start(i) => self.start(i),
                    Action::Submit(i, k) => self.submit(i, k),
                }
            }
            self.mgr.settle();
            self.drain_notifications();
        }
    }

    fn drain_notifications(&mut self) {
        loop {
            let notes = self.mgr.take_notifications();
            if notes.is_empty() {
                return;
            }
            for n in notes {
                if let Some(&(i, k)) = self.by_var.get(&n.var) {
                    self.on_output(i, k, n.at);
                }
            }
            self.mgr.settle();
        }
    }
}

/// Generates the workload of `spec` and runs it to completion under `policy`.
pub fn run_experiment(spec: &WorkloadSpec, policy: Policy, cluster: &ClusterConfig) -> Result<RunOutput, InvalidSpec> {
    let apps = generate_workload(spec)?;
    Ok(run_apps(&apps, spec, policy, cluster))
}

pub fn run_apps(apps: &[App], spec: &WorkloadSpec, policy: Policy, cluster: &ClusterConfig) -> RunOutput {
    let mut rtt = ChaCha8Rng::seed_from_u64(spec.seed);
    rtt.set_stream(RTT_STREAM);
    let mut d = Driver {
        apps,
        mgr: Manager::new(cluster.clone(), policy),
        client_side: policy != Policy::AppAware,
        rtt,
        rtt_range: spec.rtt_ms_range,
        runs: apps
            .iter()
            .map(|_| AppRun { session: None, outputs: vec![], values: vec![], submitted: vec![], failed: false, done: None })
            .collect(),
        actions: BTreeSet::new(),
        seq: 0,
        by_var: BTreeMap::new(),
        kind_of: BTreeMap::new(),
        foreground_left: apps.iter().filter(|a| !a.closed_loop).count(),
        next_const: 0,
    };
    for (i, a) in apps.iter().enumerate() {
        d.schedule(a.start, Action::Start(i));
    }
    d.run();
    let end = d.mgr.now();
    let outcomes = apps
        .iter()
        .zip(&d.runs)
        .filter(|(a, _)| !a.closed_loop)
        .map(|(a, r)| AppOutcome { kind: a.kind, start: a.start, done: if r.failed { None } else { r.done } })
        .collect();
    let records = d
        .mgr
        .records()
        .map(|r| (r.clone(), d.kind_of.get(&r.id).copied().unwrap_or("unknown")))
        .collect();
    RunOutput {
        policy,
        apps: outcomes,
        records,
        peak_blocks: d.mgr.engines().iter().map(|e| e.store().peak_used_blocks()).collect(),
        busy: d.mgr.busy_time().to_vec(),
        end,
        trace: d.mgr.take_trace(),
        decisions: d.mgr.take_decisions(),
    }
}
