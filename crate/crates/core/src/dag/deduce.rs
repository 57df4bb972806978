//! Performance objective deduction.
//!
//! Throughput annotations mark every transitive producer of the annotated
//! variable throughput-preferred. Latency annotations mark every transitive
//! producer latency-sensitive (latency wins over throughput). Latency-sensitive
//! requests get a stage: the longest distance, in request hops, to a request
//! that directly produces a latency-critical variable. Two or more requests
//! sharing a stage ≥ 1 form a task group; the longest-path rule makes them
//! pairwise independent.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use super::{RequestDag, SchedulingLabel, TaskGroup};
use crate::ids::RequestId;
use crate::prompt::PerfCriterion;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DeduceError {
    #[error("no variable in the session carries a performance criterion")]
    NoAnnotatedOutput,
}

impl RequestDag {
    pub fn deduce_objectives(&mut self) -> Result<(), DeduceError> {
        for r in self.requests.values_mut() {
            r.label = SchedulingLabel::Unlabeled;
            r.task_group = None;
        }
        self.groups.clear();
        for node in self.vars.values_mut() {
            node.var.annotate_deduced(None);
        }

        let mut latency_sinks = BTreeSet::new();
        let mut throughput_sinks = BTreeSet::new();
        for node in self.vars.values() {
            let Some(producer) = node.producer else { continue };
            match node.var.client_criterion() {
                Some(PerfCriterion::Latency) => {
                    latency_sinks.insert(producer);
                }
                Some(PerfCriterion::Throughput) => {
                    throughput_sinks.insert(producer);
                }
                None => {}
            }
        }
        let any_annotation = self.vars.values().any(|n| n.var.client_criterion().is_some());
        if !any_annotation {
            return Err(DeduceError::NoAnnotatedOutput);
        }

        for id in self.upstream_closure(&throughput_sinks) {
            self.requests.get_mut(&id).expect("known").label = SchedulingLabel::ThroughputPreferred;
        }
        let latency = self.upstream_closure(&latency_sinks);
        for &id in &latency {
            self.requests.get_mut(&id).expect("known").label = SchedulingLabel::LatencySensitive;
        }

        let mut stage: BTreeMap<RequestId, usize> = BTreeMap::new();
        for id in self.topological_order().into_iter().rev() {
            if !latency.contains(&id) {
                continue;
            }
            let mut s = if latency_sinks.contains(&id) { Some(0) } else { None };
            for succ in self.successors(id) {
                if let Some(&succ_stage) = stage.get(&succ) {
                    s = Some(s.map_or(succ_stage + 1, |cur: usize| cur.max(succ_stage + 1)));
                }
            }
            stage.insert(id, s.expect("latency-labeled requests reach a sink"));
        }

        let mut by_stage: BTreeMap<usize, Vec<RequestId>> = BTreeMap::new();
        for (&id, &s) in &stage {
            if s >= 1 {
                by_stage.entry(s).or_default().push(id);
            }
        }
        for (stage_index, members) in by_stage {
            if members.len() < 2 {
                continue;
            }
            let group_id = self.groups.len() as u32;
            for m in &members {
                self.requests.get_mut(m).expect("known").task_group = Some(group_id);
            }
            self.groups.push(TaskGroup {
                group_id,
                members,
                stage_index,
            });
        }

        let labels: Vec<(RequestId, SchedulingLabel)> = self.requests.values().map(|r| (r.id, r.label)).collect();
        for (id, label) in labels {
            let criterion = match label {
                SchedulingLabel::LatencySensitive => Some(PerfCriterion::Latency),
                SchedulingLabel::ThroughputPreferred => Some(PerfCriterion::Throughput),
                SchedulingLabel::Unlabeled => continue,
            };
            if let Some(out) = self.requests[&id].output_var().cloned() {
                if let Some(node) = self.vars.get_mut(&out) {
                    node.var.annotate_deduced(criterion);
                }
            }
        }
        Ok(())
    }

    /// `roots` plus every request they transitively depend on.
    fn upstream_closure(&self, roots: &BTreeSet<RequestId>) -> BTreeSet<RequestId> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<RequestId> = roots.iter().copied().collect();
        while let Some(id) = stack.pop() {
            if seen.insert(id) {
                stack.extend(self.predecessors(id));
            }
        }
        seen
    }
}
