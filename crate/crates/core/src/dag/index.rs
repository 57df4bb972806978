use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::ids::{ContextId, EngineId, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Owner {
    Queued(RequestId),
    Context(EngineId, ContextId),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrefixMatch {
    pub queued: Vec<RequestId>,
    /// Number of chain entries matched by `queued` (0 when empty).
    pub queued_depth: usize,
    pub contexts: Vec<(EngineId, ContextId)>,
    pub context_depth: usize,
}

/// Cluster-wide map from prefix hash to the queued requests and live engine
/// contexts that carry that prefix.
#[derive(Debug, Clone, Default)]
pub struct PrefixIndex {
    by_hash: BTreeMap<u64, BTreeSet<Owner>>,
    by_owner: BTreeMap<Owner, Vec<u64>>,
}

impl PrefixIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `owner` under each hash. Re-inserting an owner replaces its entries.
    pub fn insert(&mut self, hashes: &[u64], owner: Owner) {
        self.remove(owner);
        if hashes.is_empty() {
            return;
        }
        for &h in hashes {
            self.by_hash.entry(h).or_default().insert(owner);
        }
        self.by_owner.insert(owner, hashes.to_vec());
    }

    pub fn remove(&mut self, owner: Owner) {
        let Some(hashes) = self.by_owner.remove(&owner) else { return };
        for h in hashes {
            if let Some(set) = self.by_hash.get_mut(&h) {
                set.remove(&owner);
                if set.is_empty() {
                    self.by_hash.remove(&h);
                }
            }
        }
    }

    pub fn contains(&self, owner: Owner) -> bool {
        self.by_owner.contains_key(&owner)
    }

    pub fn len(&self) -> usize {
        self.by_owner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_owner.is_empty()
    }

    /// For each owner kind, the owners at the deepest entry of `chain` that has any.
    /// `exclude` is left out of the result (typically the request asking).
    pub fn lookup(&self, chain: &[u64], exclude: Option<Owner>) -> PrefixMatch {
        self.lookup_with(chain, |o| Some(o) != exclude)
    }

    /// Like [`lookup`](Self::lookup), considering only owners for which `keep` holds.
    pub fn lookup_with(&self, chain: &[u64], keep: impl Fn(Owner) -> bool) -> PrefixMatch {
        let mut m = PrefixMatch::default();
        for (depth, h) in chain.iter().enumerate().rev() {
            let Some(owners) = self.by_hash.get(h) else { continue };
            let owners = owners.iter().filter(|&&o| keep(o));
            if m.queued_depth == 0 {
                let queued: Vec<RequestId> = owners
                    .clone()
                    .filter_map(|o| match o {
                        Owner::Queued(r) => Some(*r),
                        Owner::Context(..) => None,
                    })
                    .collect();
                if !queued.is_empty() {
                    m.queued = queued;
                    m.queued_depth = depth + 1;
                }
            }
            if m.context_depth == 0 {
                let contexts: Vec<(EngineId, ContextId)> = owners
                    .filter_map(|o| match o {
                        Owner::Context(e, c) => Some((*e, *c)),
                        Owner::Queued(_) => None,
                    })
                    .collect();
                if !contexts.is_empty() {
                    m.contexts = contexts;
                    m.context_depth = depth + 1;
                }
            }
            if m.queued_depth != 0 && m.context_depth != 0 {
                break;
            }
        }
        m
    }
}
