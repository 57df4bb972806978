use alloc::collections::BTreeMap;

use super::{Demand, LoadClass};
use crate::ids::RequestId;
use crate::time::VirtualTime;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueuedRequest {
    pub id: RequestId,
    pub arrival: VirtualTime,
    pub class: LoadClass,
    /// Cluster-wide task group id.
    pub group: Option<u64>,
    pub demand: Demand,
}

/// Ready requests ordered by `(arrival, id)`.
#[derive(Debug, Clone, Default)]
pub struct ScheduleQueue {
    order: BTreeMap<(VirtualTime, RequestId), QueuedRequest>,
    keys: BTreeMap<RequestId, VirtualTime>,
}

impl ScheduleQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: QueuedRequest) {
        self.remove(r.id);
        self.keys.insert(r.id, r.arrival);
        self.order.insert((r.arrival, r.id), r);
    }

    pub fn remove(&mut self, id: RequestId) -> Option<QueuedRequest> {
        let t = self.keys.remove(&id)?;
        self.order.remove(&(t, id))
    }

    pub fn get(&self, id: RequestId) -> Option<&QueuedRequest> {
        let t = self.keys.get(&id)?;
        self.order.get(&(*t, id))
    }

    pub fn contains(&self, id: RequestId) -> bool {
        self.keys.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &QueuedRequest> {
        self.order.values()
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}
