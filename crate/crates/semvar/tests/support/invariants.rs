//! Randomized invariant suites, each returning the number of cases it ran.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use semvar_core::dag::{Owner, PrefixIndex, Request, RequestDag, Sampling};
use semvar_core::engine::{CostModel, LlmEngine, PagedKvStore, SimEngine};
use semvar_core::prompt::parse_prompt_template;
use semvar_core::service::{ClusterConfig, Manager, Policy, ServiceError};
use semvar_core::{ContextId, EngineId, RequestId, SessionId, VarId};
use semvar::wire::{GetBody, PlaceholderBody, SubmitBody};

pub const CASES_PER_SUITE: u32 = 2500;

fn run<S: Strategy>(strategy: S, check: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<usize, String> {
    let count = Cell::new(0usize);
    let mut runner = TestRunner::new(Config { cases: CASES_PER_SUITE, failure_persistence: None, ..Config::default() });
    runner
        .run(&strategy, |v| {
            count.set(count.get() + 1);
            check(v)
        })
        .map_err(|e| e.to_string())?;
    Ok(count.get())
}

#[derive(Debug, Clone)]
enum EngineOp {
    Fill { ctx: u8, parent: Option<u8>, len: usize },
    Generate { ctx: u8, len: usize, tag: u8 },
    Step,
    Free(u8),
}

/// Every block is held by at most one context, and the held set is exactly
/// the store's used set.
pub fn block_conservation() -> Result<usize, String> {
    let op = prop_oneof![
        (0u8..6, proptest::option::of(0u8..6), 0usize..50).prop_map(|(ctx, parent, len)| EngineOp::Fill { ctx, parent, len }),
        (0u8..6, 1usize..10, 0u8..4).prop_map(|(ctx, len, tag)| EngineOp::Generate { ctx, len, tag }),
        Just(EngineOp::Step),
        (0u8..6).prop_map(EngineOp::Free),
    ];
    run((proptest::collection::vec(op, 1..40), 2usize..30), |(ops, total)| {
        let mut e = SimEngine::new(EngineId(0), CostModel::default(), PagedKvStore::new(4, total));
        for op in ops {
            match op {
                EngineOp::Fill { ctx, parent, len } => {
                    let toks: Vec<u32> = (0..len as u32).collect();
                    let _ = e.fill(&toks, ContextId(ctx.into()), parent.map(|p| ContextId(p.into())));
                }
                EngineOp::Generate { ctx, len, tag } => {
                    let toks: Vec<u32> = (0..len as u32).collect();
                    let s = Sampling { max_tokens: len, ..Sampling::default() };
                    let _ = e.generate(&s, ContextId(ctx.into()), None, Some(&toks), tag.into());
                }
                EngineOp::Step => {
                    e.step();
                }
                EngineOp::Free(c) => {
                    let _ = e.free_context(ContextId(c.into()));
                }
            }
            let mut held = BTreeSet::new();
            let mut count = 0;
            for c in e.contexts() {
                for &b in &c.blocks {
                    prop_assert!(held.insert(b), "block {} held twice", b);
                    prop_assert!((b as usize) < total);
                }
                count += c.blocks.len();
                prop_assert!(c.blocks.len() * 4 >= c.token_count);
            }
            prop_assert_eq!(count, e.store().used_blocks());
            prop_assert_eq!(e.store().free_blocks(), total - count);
        }
        Ok(())
    })
}

fn chain_request(inputs: &[usize], output: usize, id: u64) -> Request {
    let mut src: String = inputs.iter().map(|i| format!("{{{{input:x{i}}}}}.")).collect();
    src.push_str("{{output:y}}");
    let mut r = Request::new(RequestId(id), SessionId::from("s"), parse_prompt_template(&src).expect("valid"));
    for i in inputs {
        r = r.bind(&format!("x{i}"), format!("v{i}").as_str());
    }
    r.bind("y", format!("v{output}").as_str())
}

/// Insertions that would close a cycle are refused; the accepted graph
/// always has a valid topological order.
pub fn dag_acyclicity() -> Result<usize, String> {
    let reqs = proptest::collection::vec((proptest::collection::btree_set(0usize..7, 0..3), 0usize..7), 1..12);
    run(reqs, |reqs| {
        let mut dag = RequestDag::new(SessionId::from("s"));
        // adjacency over variables: input -> output
        let mut adj: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        let mut produced = BTreeSet::new();
        let reach = |adj: &BTreeMap<usize, BTreeSet<usize>>, a: usize, b: usize| {
            let mut seen = BTreeSet::new();
            let mut todo = vec![a];
            while let Some(v) = todo.pop() {
                if v == b {
                    return true;
                }
                if seen.insert(v) {
                    todo.extend(adj.get(&v).into_iter().flatten().copied());
                }
            }
            false
        };
        let mut owner = BTreeMap::new();
        for (k, (ins, out)) in reqs.into_iter().enumerate() {
            let ins: Vec<usize> = ins.into_iter().collect();
            let bad = produced.contains(&out) || ins.iter().any(|&i| reach(&adj, out, i));
            let ok = dag.insert_request(chain_request(&ins, out, k as u64)).is_ok();
            prop_assert_eq!(ok, !bad);
            if ok {
                produced.insert(out);
                owner.insert(RequestId(k as u64), (ins.clone(), out));
                for i in ins {
                    adj.entry(i).or_default().insert(out);
                }
            }
        }
        let order = dag.topological_order();
        prop_assert_eq!(order.len(), owner.len());
        let pos: BTreeMap<RequestId, usize> = order.iter().enumerate().map(|(i, r)| (*r, i)).collect();
        for (r, (ins, _)) in &owner {
            for (p, (_, pout)) in &owner {
                if ins.contains(pout) {
                    prop_assert!(pos[p] < pos[r]);
                }
            }
        }
        Ok(())
    })
}

/// A variable takes exactly one terminal value; later sets fail and do not
/// change it.
pub fn single_assignment() -> Result<usize, String> {
    let sets = proptest::collection::vec((0u8..5, "[a-z]{0,6}"), 1..20);
    run(sets, |sets| {
        let mut m = Manager::new(ClusterConfig::default(), Policy::AppAware);
        let s = m.create_session(None).expect("fresh");
        let mut first: BTreeMap<u8, String> = BTreeMap::new();
        for (v, value) in sets {
            let var = VarId(format!("x{v}"));
            let res = m.set_variable(&s, &var, value.clone());
            match first.get(&v) {
                None => {
                    prop_assert!(res.is_ok());
                    first.insert(v, value);
                }
                Some(_) => prop_assert_eq!(res, Err(ServiceError::AlreadySet(var.clone()))),
            }
            let want = semvar_core::prompt::VarState::Ready(first[&v].clone());
            prop_assert_eq!(m.var_state(&s, &var).expect("exists"), &want);
        }
        let notes = m.take_notifications();
        prop_assert_eq!(notes.len(), first.len());
        Ok(())
    })
}

/// serialize(parse(body)) reproduces the body byte for byte.
pub fn wire_round_trip() -> Result<usize, String> {
    let text = || proptest::string::string_regex("[ -~\u{e9}\u{4e2d}\n\"\\\\]{0,12}").expect("regex");
    let ph = (text(), any::<bool>(), text(), prop_oneof![Just(String::new()), Just("identity".to_string()), text()])
        .prop_map(|(name, in_out, semantic_var_id, transforms)| PlaceholderBody { name, in_out, semantic_var_id, transforms });
    let submit = (text(), proptest::collection::vec(ph, 0..4), text())
        .prop_map(|(prompt, placeholders, session_id)| SubmitBody { prompt, placeholders, session_id, sampling: None, script: None });
    let get = (text(), prop_oneof![Just(""), Just("latency"), Just("throughput")], text())
        .prop_map(|(semantic_var_id, c, session_id)| GetBody { semantic_var_id, criteria: c.to_string(), session_id });
    run((submit, get), |(s, g)| {
        let sj = serde_json::to_string(&s).expect("serializes");
        let back: SubmitBody = serde_json::from_str(&sj).expect("parses");
        prop_assert_eq!(&serde_json::to_string(&back).expect("serializes"), &sj);
        prop_assert!(sj.starts_with("{\"prompt\":"), "field order");
        let gj = serde_json::to_string(&g).expect("serializes");
        let back: GetBody = serde_json::from_str(&gj).expect("parses");
        prop_assert_eq!(&serde_json::to_string(&back).expect("serializes"), &gj);
        prop_assert!(gj.starts_with("{\"semantic_var_id\":"), "field order");
        Ok(())
    })
}

#[derive(Debug, Clone)]
enum IndexOp {
    Insert(Owner, Vec<u64>),
    Remove(Owner),
    Lookup(Vec<u64>),
}

/// Lookups agree with a scan over every live owner.
pub fn prefix_index_equivalence() -> Result<usize, String> {
    let owner = prop_oneof![
        (0u64..6).prop_map(|r| Owner::Queued(RequestId(r))),
        (0u32..2, 0u64..4).prop_map(|(e, c)| Owner::Context(EngineId(e), ContextId(c))),
    ];
    let chain = proptest::collection::vec(0u64..4, 0..4)
        .prop_map(|v| v.iter().scan(0u64, |h, x| { *h = *h * 10 + x + 1; Some(*h) }).collect::<Vec<u64>>());
    let op = prop_oneof![
        (owner.clone(), chain.clone()).prop_map(|(o, c)| IndexOp::Insert(o, c)),
        owner.prop_map(IndexOp::Remove),
        chain.prop_map(IndexOp::Lookup),
    ];
    run(proptest::collection::vec(op, 1..30), |ops| {
        let mut idx = PrefixIndex::new();
        let mut live: BTreeMap<Owner, Vec<u64>> = BTreeMap::new();
        for op in ops {
            match op {
                IndexOp::Insert(o, c) => {
                    idx.insert(&c, o);
                    live.remove(&o);
                    if !c.is_empty() {
                        live.insert(o, c);
                    }
                }
                IndexOp::Remove(o) => {
                    idx.remove(o);
                    live.remove(&o);
                }
                IndexOp::Lookup(c) => {
                    let m = idx.lookup(&c, None);
                    let deepest = |want_queued: bool| {
                        for (d, h) in c.iter().enumerate().rev() {
                            let hits: BTreeSet<Owner> = live
                                .iter()
                                .filter(|(o, hs)| matches!(o, Owner::Queued(_)) == want_queued && hs.contains(h))
                                .map(|(o, _)| *o)
                                .collect();
                            if !hits.is_empty() {
                                return (hits, d + 1);
                            }
                        }
                        (BTreeSet::new(), 0)
                    };
                    let (q, qd) = deepest(true);
                    let (cx, cd) = deepest(false);
                    let got_q: BTreeSet<Owner> = m.queued.iter().map(|r| Owner::Queued(*r)).collect();
                    let got_c: BTreeSet<Owner> = m.contexts.iter().map(|(e, c)| Owner::Context(*e, *c)).collect();
                    prop_assert_eq!(got_q, q);
                    prop_assert_eq!(m.queued_depth, qd);
                    prop_assert_eq!(got_c, cx);
                    prop_assert_eq!(m.context_depth, cd);
                }
            }
        }
        Ok(())
    })
}
