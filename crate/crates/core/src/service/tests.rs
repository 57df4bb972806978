use super::*;
use alloc::string::ToString;
use alloc::vec;

fn words(n: usize, tag: &str) -> String {
    (0..n).map(|i| format!("{tag}{i}")).collect::<Vec<_>>().join(" ")
}

fn bind(name: &str, direction: Direction, var: &str) -> Binding {
    Binding { name: name.into(), direction, var: Some(var.into()), transform: None }
}

fn submit(m: &mut Manager, s: &SessionId, prompt: &str, bindings: Vec<Binding>, script: &str) -> RequestId {
    m.submit(SubmitSpec {
        session: s.clone(),
        prompt: prompt.into(),
        bindings,
        sampling: Sampling::default(),
        script: Some(script.into()),
    })
    .unwrap()
    .request
}

fn ready(m: &Manager, s: &SessionId, v: &str) -> String {
    match m.var_state(s, &v.into()).unwrap() {
        VarState::Ready(x) => x.clone(),
        other => panic!("{v} not ready: {other:?}"),
    }
}

#[test]
fn snake_game_pipeline_runs_server_side() {
    let mut m = Manager::new(ClusterConfig::default(), Policy::AppAware);
    let s = m.create_session(None).unwrap();
    m.set_variable(&s, &"task".into(), "a snake game".into()).unwrap();
    let code = submit(
        &mut m,
        &s,
        "You are an expert software engineer. Write python code of {{input:task}}. Code: {{output:code}}",
        vec![bind("task", Direction::Input, "task"), bind("code", Direction::Output, "code")],
        "def main(): pass",
    );
    let test = submit(
        &mut m,
        &s,
        "You are an experienced QA engineer. You write test code for {{input:task}}. Code: {{input:code}}. Your test code: {{output:test}}",
        vec![
            bind("task", Direction::Input, "task"),
            bind("code", Direction::Input, "code"),
            bind("test", Direction::Output, "test"),
        ],
        "assert main() is None",
    );
    m.annotate(&s, &"test".into(), Some(PerfCriterion::Latency)).unwrap();
    m.annotate(&s, &"code".into(), Some(PerfCriterion::Latency)).unwrap();
    m.run_until_idle();
    assert_eq!(ready(&m, &s, "code"), "def main(): pass");
    assert_eq!(ready(&m, &s, "test"), "assert main() is None");
    let producer = m.record(code).unwrap();
    let consumer = m.record(test).unwrap();
    assert_eq!(consumer.dispatched_at, producer.finished_at);
    assert_eq!(m.label_of(code), Some(SchedulingLabel::LatencySensitive));
    assert!(m.is_quiescent());
    assert_eq!(m.engines()[0].store().used_blocks(), 0);
}

#[test]
fn request_without_inputs_is_schedulable() {
    let mut m = Manager::new(ClusterConfig::default(), Policy::AppAware);
    let s = m.create_session(None).unwrap();
    let r = submit(&mut m, &s, "hello {{output:x}}", vec![bind("x", Direction::Output, "x")], "hi there");
    m.settle();
    assert!(m.record(r).unwrap().dispatched_at.is_some());
    m.run_until_idle();
    assert_eq!(ready(&m, &s, "x"), "hi there");
}

#[test]
fn fresh_output_variable_is_minted() {
    let mut m = Manager::new(ClusterConfig::default(), Policy::AppAware);
    let s = m.create_session(None).unwrap();
    let out = m
        .submit(SubmitSpec {
            session: s.clone(),
            prompt: "q {{output:a}}".into(),
            bindings: vec![],
            sampling: Sampling::default(),
            script: Some("ok".into()),
        })
        .unwrap();
    let var = out.vars[0].1.clone();
    m.run_until_idle();
    assert_eq!(m.var_state(&s, &var).unwrap(), &VarState::Ready("ok".into()));
}

#[test]
fn failed_transform_names_producer_and_propagates() {
    let mut m = Manager::new(ClusterConfig::default(), Policy::AppAware);
    let s = m.create_session(None).unwrap();
    let mut out = bind("code", Direction::Output, "code");
    out.transform = Some("json:code".parse().unwrap());
    let producer = submit(&mut m, &s, "write {{output:code}}", vec![out], "not json at all");
    submit(
        &mut m,
        &s,
        "test {{input:code}} {{output:test}}",
        vec![bind("code", Direction::Input, "code"), bind("test", Direction::Output, "test")],
        "unused",
    );
    m.run_until_idle();
    let VarState::Failed(f) = m.var_state(&s, &"code".into()).unwrap() else { panic!() };
    assert_eq!(f.kind, FailureKind::Transform);
    assert_eq!(f.producer, Some(producer));
    assert_eq!(f.transform.as_deref(), Some("json:code"));
    let VarState::Failed(g) = m.var_state(&s, &"test".into()).unwrap() else { panic!() };
    assert_eq!(g.kind, FailureKind::Upstream);
    assert_eq!(g.producer, Some(producer));
}

#[test]
fn single_assignment_and_scoping() {
    let mut m = Manager::new(ClusterConfig::default(), Policy::AppAware);
    let a = m.create_session(None).unwrap();
    let b = m.create_session(None).unwrap();
    m.set_variable(&a, &"x".into(), "1".into()).unwrap();
    assert_eq!(
        m.set_variable(&a, &"x".into(), "2".into()),
        Err(ServiceError::AlreadySet("x".into()))
    );
    assert_eq!(ready(&m, &a, "x"), "1");
    let err = m
        .submit(SubmitSpec {
            session: b.clone(),
            prompt: "{{input:x}}{{output:y}}".into(),
            bindings: vec![bind("x", Direction::Input, "x"), bind("y", Direction::Output, "y")],
            sampling: Sampling::default(),
            script: None,
        })
        .unwrap_err();
    assert_eq!(err, ServiceError::UnknownVariable("x".into()));
    assert_eq!(
        m.create_session(Some(a.clone())),
        Err(ServiceError::DuplicateSession(a.clone()))
    );
    assert!(matches!(
        m.set_variable(&"nope".into(), &"x".into(), "1".into()),
        Err(ServiceError::UnknownSession(_))
    ));
}

#[test]
fn duplicate_producer_rejected() {
    let mut m = Manager::new(ClusterConfig::default(), Policy::AppAware);
    let s = m.create_session(None).unwrap();
    submit(&mut m, &s, "a {{output:x}}", vec![bind("x", Direction::Output, "x")], "1");
    let err = m
        .submit(SubmitSpec {
            session: s.clone(),
            prompt: "b {{output:x}}".into(),
            bindings: vec![bind("x", Direction::Output, "x")],
            sampling: Sampling::default(),
            script: Some("2".into()),
        })
        .unwrap_err();
    assert!(matches!(err, ServiceError::Dag(DagError::DuplicateProducer { .. })));
}

#[test]
fn close_cancels_in_flight_work() {
    let mut m = Manager::new(ClusterConfig::default(), Policy::AppAware);
    let s = m.create_session(None).unwrap();
    let r = submit(
        &mut m,
        &s,
        "long {{output:x}}",
        vec![bind("x", Direction::Output, "x")],
        &words(200, "w"),
    );
    submit(
        &mut m,
        &s,
        "{{input:x}} then {{output:y}}",
        vec![bind("x", Direction::Input, "x"), bind("y", Direction::Output, "y")],
        "never",
    );
    m.advance_to(VirtualTime::from_ms_int(100));
    assert!(m.record(r).unwrap().dispatched_at.is_some());
    m.close_session(&s).unwrap();
    for v in ["x", "y"] {
        let VarState::Failed(f) = m.var_state(&s, &v.into()).unwrap() else { panic!() };
        assert_eq!(f.kind, FailureKind::SessionClosed);
    }
    m.run_until_idle();
    assert_eq!(m.engines()[0].store().used_blocks(), 0);
    assert!(matches!(m.close_session(&s), Err(ServiceError::SessionClosed(_))));
    let notes = m.take_notifications();
    assert_eq!(notes.iter().filter(|n| n.var.as_str() == "x").count(), 1);
}

#[test]
fn shared_system_prompt_memory() {
    let cfg = ClusterConfig { record_trace: true, ..ClusterConfig::default() };
    let mut m = Manager::new(cfg, Policy::AppAware);
    let system = words(6000, "s");
    let n = 4;
    for u in 0..n {
        let s = m.create_session(None).unwrap();
        let q = format!("q{u}");
        m.set_variable(&s, &q.as_str().into(), format!(" {}", words(199, &format!("u{u}x")))).unwrap();
        let a = format!("a{u}");
        submit(
            &mut m,
            &s,
            &format!("{system}{{{{input:query}}}}{{{{output:answer}}}}"),
            vec![bind("query", Direction::Input, &q), bind("answer", Direction::Output, &a)],
            &words(40, "o"),
        );
        m.annotate(&s, &a.as_str().into(), Some(PerfCriterion::Throughput)).unwrap();
    }
    m.run_until_idle();
    let blocks = |t: usize| t.div_ceil(16);
    let peak = m.engines()[0].store().peak_used_blocks();
    assert_eq!(peak, blocks(6000) + n * blocks(200 + 40));
    let decisions = m.take_decisions();
    assert_eq!(decisions.len(), n);
    assert!(decisions.iter().all(|d| d.ends_with("reason=shared-queue")));
    assert!(!m.take_trace().is_empty());
}

#[test]
fn unplaceable_request_fails() {
    let cfg = ClusterConfig { sched: SchedConfig { latency_bound: 100, ..SchedConfig::default() }, ..ClusterConfig::default() };
    let mut m = Manager::new(cfg, Policy::RequestCentric);
    let s = m.create_session(None).unwrap();
    m.submit(SubmitSpec {
        session: s.clone(),
        prompt: format!("{} {{{{output:x}}}}", words(200, "w")),
        bindings: vec![bind("x", Direction::Output, "x")],
        sampling: Sampling { max_tokens: 10, ..Sampling::default() },
        script: Some("a".into()),
    })
    .unwrap();
    m.run_until_idle();
    let VarState::Failed(f) = m.var_state(&s, &"x".into()).unwrap() else { panic!() };
    assert_eq!(f.kind, FailureKind::Engine);
}

#[test]
fn missing_script_fails_request() {
    let mut m = Manager::new(ClusterConfig::default(), Policy::AppAware);
    let s = m.create_session(None).unwrap();
    m.submit(SubmitSpec {
        session: s.clone(),
        prompt: "x {{output:x}}".into(),
        bindings: vec![],
        sampling: Sampling::default(),
        script: None,
    })
    .unwrap();
    m.run_until_idle();
    let dag = m.dag(&s).unwrap();
    let v = dag.vars().next().unwrap();
    let VarState::Failed(f) = v.state() else { panic!() };
    assert_eq!(f.message, "generation without a script".to_string());
}

#[test]
fn deterministic_replay() {
    let run = || {
        let mut m = Manager::new(ClusterConfig { engines: 2, record_trace: true, ..ClusterConfig::default() }, Policy::AppAware);
        for u in 0..6 {
            let s = m.create_session(None).unwrap();
            submit(&mut m, &s, &format!("{} {{{{output:o}}}}", words(50 * (u + 1), "p")),
                vec![bind("o", Direction::Output, &format!("o{u}"))], &words(10 + u, "r"));
        }
        m.run_until_idle();
        (m.now(), m.take_trace(), m.take_decisions())
    };
    assert_eq!(run(), run());
}
