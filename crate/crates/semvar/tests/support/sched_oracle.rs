//! Exhaustive placement oracle for small scheduling instances.
//!
//! Every request is mapped to an engine or left queued. Walking the queue in
//! order, each mapping yields a sequence of per-unit keys; the mapping with
//! the lexicographically smallest sequence is the impact-minimizing one.

use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class {
    Latency,
    Throughput,
}

#[derive(Debug, Clone)]
pub struct Req {
    /// Shareable segments: (hash, token count), shallow first.
    pub segments: Vec<(u64, usize)>,
    pub private: usize,
    pub max_tokens: usize,
    pub class: Class,
    pub group: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Eng {
    pub resident: usize,
    pub latency: bool,
    pub live: BTreeSet<u64>,
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub reqs: Vec<Req>,
    pub engines: Vec<Eng>,
    pub latency_bound: usize,
    pub throughput_bound: usize,
}

fn need(inst: &Instance, unit: &[usize], e: &Eng) -> usize {
    let mut charged = BTreeSet::new();
    let mut n = 0;
    for &r in unit {
        let q = &inst.reqs[r];
        for &(h, len) in &q.segments {
            if !e.live.contains(&h) && charged.insert(h) {
                n += len;
            }
        }
        n += q.private + q.max_tokens;
    }
    n
}

fn score(inst: &Instance, e: &Eng, need: usize, class: Class) -> Option<f64> {
    let bound = if e.latency || class == Class::Latency { inst.latency_bound } else { inst.throughput_bound };
    if e.resident + need > bound {
        return None;
    }
    let loss = if class == Class::Latency && !e.latency {
        (inst.throughput_bound - inst.latency_bound) as f64 / inst.throughput_bound as f64
    } else {
        0.0
    };
    Some(loss + (e.resident + need) as f64 / bound as f64)
}

/// (unplaced, not joint, outside the context filter, score, engine).
type Key = (u8, u8, u8, f64, usize);

fn cmp_keys(a: &[Key], b: &[Key]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = x.0.cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)).then(x.3.total_cmp(&y.3)).then(x.4.cmp(&y.4));
        if o.is_ne() {
            return o;
        }
    }
    a.len().cmp(&b.len())
}

/// Queued group-free requests other than `r` sharing `r`'s deepest shared hash.
fn sharers(inst: &Instance, r: usize, covered: &BTreeSet<usize>) -> Vec<usize> {
    for &(h, _) in inst.reqs[r].segments.iter().rev() {
        let found: Vec<usize> = (0..inst.reqs.len())
            .filter(|&o| o != r && !covered.contains(&o) && inst.reqs[o].group.is_none())
            .filter(|&o| inst.reqs[o].segments.iter().any(|s| s.0 == h))
            .collect();
        if !found.is_empty() {
            return found;
        }
    }
    Vec::new()
}

/// Engines whose contexts from before the tick hold `r`'s deepest hash that
/// any engine holds.
fn context_filter(inst: &Instance, r: usize, engines: &[Eng]) -> BTreeSet<usize> {
    for &(h, _) in inst.reqs[r].segments.iter().rev() {
        let f: BTreeSet<usize> = (0..engines.len()).filter(|&e| engines[e].live.contains(&h)).collect();
        if !f.is_empty() {
            return f;
        }
    }
    BTreeSet::new()
}

fn admit(inst: &Instance, engines: &mut [Eng], e: usize, unit: &[usize], class: Class) {
    let n = need(inst, unit, &engines[e]);
    let eng = &mut engines[e];
    eng.resident += n;
    eng.latency |= class == Class::Latency;
    for &r in unit {
        eng.live.extend(inst.reqs[r].segments.iter().map(|s| s.0));
    }
}

/// Keys of `mapping`, or `None` if it splits a unit across engines or
/// places a unit where it does not fit.
fn evaluate(inst: &Instance, mapping: &[Option<usize>]) -> Option<Vec<Key>> {
    let mut engines = inst.engines.clone();
    let mut covered = BTreeSet::new();
    let mut keys = Vec::new();
    for r in 0..inst.reqs.len() {
        if covered.contains(&r) {
            continue;
        }
        if let Some(g) = inst.reqs[r].group {
            let unit: Vec<usize> =
                (0..inst.reqs.len()).filter(|&o| inst.reqs[o].group == Some(g) && !covered.contains(&o)).collect();
            let target = mapping[unit[0]];
            if unit.iter().any(|&m| mapping[m] != target) {
                return None;
            }
            match target {
                None => keys.push((1, 0, 0, 0.0, 0)),
                Some(e) => {
                    let s = score(inst, &engines[e], need(inst, &unit, &engines[e]), Class::Throughput)?;
                    keys.push((0, 0, 0, s, e));
                    admit(inst, &mut engines, e, &unit, Class::Throughput);
                    covered.extend(unit);
                }
            }
            continue;
        }
        let sh = sharers(inst, r, &covered);
        let Some(e) = mapping[r] else {
            keys.push((1, 0, 0, 0.0, 0));
            continue;
        };
        if !sh.is_empty() && sh.iter().all(|&o| mapping[o] == Some(e)) {
            let mut unit = vec![r];
            unit.extend(&sh);
            let class = if unit.iter().any(|&u| inst.reqs[u].class == Class::Latency) { Class::Latency } else { Class::Throughput };
            if let Some(s) = score(inst, &engines[e], need(inst, &unit, &engines[e]), class) {
                keys.push((0, 0, 0, s, e));
                admit(inst, &mut engines, e, &unit, class);
                covered.extend(unit);
                continue;
            }
        }
        let class = inst.reqs[r].class;
        let filter = context_filter(inst, r, &inst.engines);
        let s = score(inst, &engines[e], need(inst, &[r], &engines[e]), class)?;
        let outside = u8::from(!filter.is_empty() && !filter.contains(&e));
        keys.push((0, 1, outside, s, e));
        admit(inst, &mut engines, e, &[r], class);
        covered.insert(r);
    }
    Some(keys)
}

/// The impact-minimizing mapping of requests to engines.
pub fn best_mapping(inst: &Instance) -> Vec<Option<usize>> {
    let n = inst.reqs.len();
    let choices = inst.engines.len() + 1;
    let mut best: Option<(Vec<Key>, Vec<Option<usize>>)> = None;
    for code in 0..choices.pow(n as u32) {
        let mut c = code;
        let mapping: Vec<Option<usize>> = (0..n)
            .map(|_| {
                let v = c % choices;
                c /= choices;
                (v > 0).then(|| v - 1)
            })
            .collect();
        let Some(keys) = evaluate(inst, &mapping) else { continue };
        let better = match &best {
            None => true,
            Some((k, _)) => cmp_keys(&keys, k).is_lt(),
        };
        if better {
            best = Some((keys, mapping));
        }
    }
    best.expect("leaving everything queued is always valid").1
}
