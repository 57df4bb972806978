use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use super::cost::CostModel;
use super::kv::{OutOfMemory, PagedKvStore};
use crate::dag::Sampling;
use crate::ids::{ContextId, EngineId};
use crate::prompt::Tokenizer;
use crate::time::VirtualTime;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error(transparent)]
    OutOfMemory(#[from] OutOfMemory),
    #[error("unknown parent context {0}")]
    UnknownParentContext(ContextId),
    #[error("unknown context {0}")]
    UnknownContext(ContextId),
    #[error("context {0} is still referenced")]
    ContextBusy(ContextId),
    #[error("context {ctx} already has parent {existing:?}")]
    ParentMismatch { ctx: ContextId, existing: Option<ContextId> },
    #[error("generation without a script")]
    MissingScript,
    #[error("generation tag {0} already running")]
    DuplicateTag(u64),
}

/// The three primitives every backend exposes to the manager.
pub trait LlmEngine {
    fn fill(
        &mut self,
        tokens: &[u32],
        ctx: ContextId,
        parent: Option<ContextId>,
    ) -> Result<usize, EngineError>;

    fn generate(
        &mut self,
        sampling: &Sampling,
        ctx: ContextId,
        parent: Option<ContextId>,
        script: Option<&[u32]>,
        tag: u64,
    ) -> Result<(), EngineError>;

    fn free_context(&mut self, ctx: ContextId) -> Result<Vec<ContextId>, EngineError>;
}

/// Tokens a scripted generation will emit: the script cut at the first stop
/// string, then capped at `max_tokens`.
pub fn script_tokens(tokenizer: &mut Tokenizer, script: &str, sampling: &Sampling) -> Vec<u32> {
    let text = match sampling.stop.as_deref() {
        Some(stop) if !stop.is_empty() => script.find(stop).map_or(script, |i| &script[..i]),
        _ => script,
    };
    let mut toks = tokenizer.tokenize(text).into_inner();
    toks.truncate(sampling.max_tokens);
    toks
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Context {
    pub id: ContextId,
    pub parent: Option<ContextId>,
    pub token_count: usize,
    pub blocks: Vec<u32>,
    /// Children plus running generations.
    pub refcount: usize,
    pub dropped: bool,
}

#[derive(Debug, Clone)]
struct Generation {
    tag: u64,
    ctx: ContextId,
    script: Vec<u32>,
    emitted: usize,
    ready: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Finish {
    Completed,
    OutOfMemory,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub start: VirtualTime,
    pub elapsed: VirtualTime,
    pub fill_tokens: usize,
    /// Effective resident tokens seen by the decode iteration.
    pub batch_tokens: usize,
    pub batch_size: usize,
    pub emitted: Vec<(u64, u32)>,
    pub finished: Vec<(u64, Finish)>,
}

impl StepReport {
    pub fn is_idle(&self) -> bool {
        self.fill_tokens == 0 && self.batch_size == 0 && self.finished.is_empty()
    }

    pub fn trace_line(&self, engine: EngineId) -> String {
        format!(
            "t={} engine={} fill={} batch={} emitted={}",
            self.start,
            engine,
            self.fill_tokens,
            self.batch_tokens,
            self.emitted.len()
        )
    }
}

/// Simulated engine: paged KV accounting, context forest, continuous
/// batching and a virtual clock driven by [`CostModel`].
#[derive(Debug, Clone)]
pub struct SimEngine {
    id: EngineId,
    cost: CostModel,
    store: PagedKvStore,
    contexts: BTreeMap<ContextId, Context>,
    pending_fill: usize,
    gens: Vec<Generation>,
    clock: VirtualTime,
}

impl SimEngine {
    pub fn new(id: EngineId, cost: CostModel, store: PagedKvStore) -> Self {
        SimEngine {
            id,
            cost,
            store,
            contexts: BTreeMap::new(),
            pending_fill: 0,
            gens: Vec::new(),
            clock: VirtualTime::ZERO,
        }
    }

    pub fn id(&self) -> EngineId {
        self.id
    }

    pub fn cost(&self) -> &CostModel {
        &self.cost
    }

    pub fn store(&self) -> &PagedKvStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut PagedKvStore {
        &mut self.store
    }

    pub fn clock(&self) -> VirtualTime {
        self.clock
    }

    /// Idle engines jump forward; the clock never moves backwards.
    pub fn sync_clock(&mut self, now: VirtualTime) {
        if now > self.clock {
            self.clock = now;
        }
    }

    pub fn context(&self, id: ContextId) -> Option<&Context> {
        self.contexts.get(&id)
    }

    pub fn contexts(&self) -> impl Iterator<Item = &Context> {
        self.contexts.values()
    }

    pub fn has_work(&self) -> bool {
        self.pending_fill > 0 || !self.gens.is_empty()
    }

    pub fn running(&self) -> usize {
        self.gens.len()
    }

    /// Tokens of `id` plus all its ancestors.
    pub fn prefix_len(&self, id: ContextId) -> usize {
        let mut total = 0;
        let mut cur = Some(id);
        while let Some(c) = cur.and_then(|c| self.contexts.get(&c)) {
            total += c.token_count;
            cur = c.parent;
        }
        total
    }

    fn ensure_context(
        &mut self,
        ctx: ContextId,
        parent: Option<ContextId>,
    ) -> Result<bool, EngineError> {
        if let Some(existing) = self.contexts.get(&ctx) {
            if parent.is_some() && parent != existing.parent {
                return Err(EngineError::ParentMismatch { ctx, existing: existing.parent });
            }
            return Ok(false);
        }
        if let Some(p) = parent {
            let pc = self
                .contexts
                .get_mut(&p)
                .ok_or(EngineError::UnknownParentContext(p))?;
            pc.refcount += 1;
        }
        self.contexts.insert(
            ctx,
            Context {
                id: ctx,
                parent,
                token_count: 0,
                blocks: Vec::new(),
                refcount: 0,
                dropped: false,
            },
        );
        Ok(true)
    }

    fn undo_create(&mut self, ctx: ContextId) {
        if let Some(c) = self.contexts.remove(&ctx) {
            if let Some(p) = c.parent.and_then(|p| self.contexts.get_mut(&p)) {
                p.refcount -= 1;
            }
        }
    }

    fn grow(&mut self, ctx: ContextId, extra: usize) -> Result<(), OutOfMemory> {
        let c = &self.contexts[&ctx];
        let need = self.store.blocks_for(c.token_count + extra) - c.blocks.len();
        let blocks = self.store.allocate(need)?;
        let c = self.contexts.get_mut(&ctx).expect("context checked above");
        c.blocks.extend(blocks);
        c.token_count += extra;
        Ok(())
    }

    /// Marks a context for release once nothing references it. Returns the
    /// contexts freed as a result.
    pub fn mark_dropped(&mut self, ctx: ContextId) -> Result<Vec<ContextId>, EngineError> {
        let c = self
            .contexts
            .get_mut(&ctx)
            .ok_or(EngineError::UnknownContext(ctx))?;
        c.dropped = true;
        if c.refcount == 0 {
            self.free_context(ctx)
        } else {
            Ok(Vec::new())
        }
    }

    /// Removes a running generation and drops its hold on the context.
    pub fn abort(&mut self, tag: u64) -> Option<ContextId> {
        let pos = self.gens.iter().position(|g| g.tag == tag)?;
        let g = self.gens.remove(pos);
        self.release_hold(g.ctx);
        Some(g.ctx)
    }

    fn release_hold(&mut self, ctx: ContextId) {
        if let Some(c) = self.contexts.get_mut(&ctx) {
            c.refcount -= 1;
        }
    }

    /// Effective resident tokens for a set of running contexts.
    fn effective_tokens(&self, running: &[ContextId]) -> usize {
        if self.cost.shared_kernel {
            let mut seen = BTreeSet::new();
            let mut total = 0;
            for &ctx in running {
                let mut cur = Some(ctx);
                while let Some(c) = cur.and_then(|c| self.contexts.get(&c)) {
                    if !seen.insert(c.id) {
                        break;
                    }
                    total += c.token_count;
                    cur = c.parent;
                }
            }
            total
        } else {
            running.iter().map(|&c| self.prefix_len(c)).sum()
        }
    }

    /// One fill chunk plus one decode iteration.
    pub fn step(&mut self) -> StepReport {
        let start = self.clock;
        let fill_tokens = core::mem::take(&mut self.pending_fill);
        let mut finished = Vec::new();

        let mut i = 0;
        while i < self.gens.len() {
            let g = &self.gens[i];
            if g.ready && g.emitted == g.script.len() {
                let g = self.gens.remove(i);
                self.release_hold(g.ctx);
                finished.push((g.tag, Finish::Completed));
            } else {
                i += 1;
            }
        }

        let decoding: Vec<usize> = (0..self.gens.len()).filter(|&i| self.gens[i].ready).collect();
        let running: Vec<ContextId> = decoding.iter().map(|&i| self.gens[i].ctx).collect();
        let batch_tokens = if decoding.is_empty() { 0 } else { self.effective_tokens(&running) };

        let mut ms = self.cost.fill_ms(fill_tokens);
        if !decoding.is_empty() {
            ms += self.cost.decode_ms(batch_tokens);
        }

        let mut emitted = Vec::with_capacity(decoding.len());
        let mut gone = Vec::new();
        for &i in &decoding {
            let (tag, ctx, tok) = {
                let g = &self.gens[i];
                (g.tag, g.ctx, g.script[g.emitted])
            };
            if self.grow(ctx, 1).is_err() {
                finished.push((tag, Finish::OutOfMemory));
                gone.push(i);
                continue;
            }
            emitted.push((tag, tok));
            let g = &mut self.gens[i];
            g.emitted += 1;
            if g.emitted == g.script.len() {
                finished.push((tag, Finish::Completed));
                gone.push(i);
            }
        }
        for &i in gone.iter().rev() {
            let g = self.gens.remove(i);
            self.release_hold(g.ctx);
        }
        for g in &mut self.gens {
            g.ready = true;
        }

        let elapsed = VirtualTime::from_ms(ms);
        self.clock += elapsed;
        StepReport {
            start,
            elapsed,
            fill_tokens,
            batch_tokens,
            batch_size: decoding.len(),
            emitted,
            finished,
        }
    }
}

impl LlmEngine for SimEngine {
    fn fill(
        &mut self,
        tokens: &[u32],
        ctx: ContextId,
        parent: Option<ContextId>,
    ) -> Result<usize, EngineError> {
        let created = self.ensure_context(ctx, parent)?;
        if let Err(e) = self.grow(ctx, tokens.len()) {
            if created {
                self.undo_create(ctx);
            }
            return Err(e.into());
        }
        self.pending_fill += tokens.len();
        Ok(tokens.len())
    }

    fn generate(
        &mut self,
        sampling: &Sampling,
        ctx: ContextId,
        parent: Option<ContextId>,
        script: Option<&[u32]>,
        tag: u64,
    ) -> Result<(), EngineError> {
        let script = match script {
            Some(s) => s,
            None if sampling.max_tokens == 0 => &[],
            None => return Err(EngineError::MissingScript),
        };
        if self.gens.iter().any(|g| g.tag == tag) {
            return Err(EngineError::DuplicateTag(tag));
        }
        self.ensure_context(ctx, parent)?;
        let limit = script.len().min(sampling.max_tokens);
        self.contexts.get_mut(&ctx).expect("context ensured").refcount += 1;
        self.gens.push(Generation {
            tag,
            ctx,
            script: script[..limit].to_vec(),
            emitted: 0,
            ready: self.pending_fill == 0,
        });
        Ok(())
    }

    fn free_context(&mut self, ctx: ContextId) -> Result<Vec<ContextId>, EngineError> {
        let c = self.contexts.get(&ctx).ok_or(EngineError::UnknownContext(ctx))?;
        if c.refcount > 0 {
            return Err(EngineError::ContextBusy(ctx));
        }
        let mut freed = Vec::new();
        let mut cur = Some(ctx);
        while let Some(id) = cur {
            let c = self.contexts.remove(&id).expect("context present");
            self.store.release(&c.blocks);
            freed.push(id);
            cur = None;
            if let Some(p) = c.parent.and_then(|p| self.contexts.get_mut(&p)) {
                p.refcount -= 1;
                if p.refcount == 0 && p.dropped {
                    cur = Some(p.id);
                }
            }
        }
        Ok(freed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn engine(shared: bool) -> SimEngine {
        let cost = CostModel { c0_ms: 2.0, c1_ms_per_token: 0.0062, shared_kernel: shared, ..CostModel::default() };
        SimEngine::new(EngineId(0), cost, PagedKvStore::for_tokens(16, 120_000))
    }

    fn toks(n: usize) -> Vec<u32> {
        (0..n as u32).collect()
    }

    fn sampling(max: usize) -> Sampling {
        Sampling { max_tokens: max, ..Sampling::default() }
    }

    fn run_to_end(e: &mut SimEngine) -> Vec<StepReport> {
        let mut out = Vec::new();
        while e.has_work() {
            out.push(e.step());
        }
        out
    }

    #[test]
    fn fork_shares_parent_blocks() {
        let mut e = engine(true);
        e.fill(&toks(6000), ContextId(1), None).unwrap();
        e.fill(&toks(30), ContextId(2), Some(ContextId(1))).unwrap();
        e.fill(&toks(20), ContextId(3), Some(ContextId(1))).unwrap();
        assert_eq!(e.store().used_blocks(), 375 + 2 + 2);
        assert_eq!(e.prefix_len(ContextId(2)), 6030);
        assert_eq!(e.context(ContextId(1)).unwrap().refcount, 2);
    }

    #[test]
    fn empty_fill_allocates_nothing() {
        let mut e = engine(true);
        assert_eq!(e.fill(&[], ContextId(1), None), Ok(0));
        assert_eq!(e.store().used_blocks(), 0);
        assert!(!e.has_work());
    }

    #[test]
    fn oom_leaves_store_unchanged() {
        let mut e = SimEngine::new(EngineId(0), CostModel::default(), PagedKvStore::new(16, 10));
        e.fill(&toks(100), ContextId(1), None).unwrap();
        let before = e.store().used_blocks();
        let err = e.fill(&toks(100), ContextId(2), Some(ContextId(1))).unwrap_err();
        assert_eq!(err, EngineError::OutOfMemory(OutOfMemory { needed: 7, free: 3 }));
        assert_eq!(e.store().used_blocks(), before);
        assert!(e.context(ContextId(2)).is_none());
        assert_eq!(e.context(ContextId(1)).unwrap().refcount, 0);
    }

    #[test]
    fn unknown_parent() {
        let mut e = engine(true);
        assert_eq!(
            e.fill(&toks(3), ContextId(2), Some(ContextId(9))),
            Err(EngineError::UnknownParentContext(ContextId(9)))
        );
    }

    #[test]
    fn fifty_token_script_takes_fifty_iterations() {
        let mut e = engine(true);
        e.fill(&toks(100), ContextId(1), None).unwrap();
        let script = toks(50);
        e.generate(&sampling(512), ContextId(1), None, Some(&script), 7).unwrap();
        let steps = run_to_end(&mut e);
        // first step is the fill alone, the generation joins on the next one
        assert_eq!(steps[0].batch_size, 0);
        let decode_steps = steps.iter().filter(|s| s.batch_size > 0).count();
        assert_eq!(decode_steps, 50);
        let emitted: Vec<u32> = steps.iter().flat_map(|s| s.emitted.iter().map(|x| x.1)).collect();
        assert_eq!(emitted, script);
        assert_eq!(steps.last().unwrap().finished, vec![(7, Finish::Completed)]);
        assert_eq!(e.prefix_len(ContextId(1)), 150);
    }

    #[test]
    fn zero_max_tokens_finishes_immediately() {
        let mut e = engine(true);
        e.fill(&[], ContextId(1), None).unwrap();
        e.generate(&sampling(0), ContextId(1), None, None, 1).unwrap();
        let r = e.step();
        assert!(r.emitted.is_empty());
        assert_eq!(r.finished, vec![(1, Finish::Completed)]);
        assert_eq!(r.elapsed, VirtualTime::ZERO);
        assert!(!e.has_work());
    }

    #[test]
    fn missing_script() {
        let mut e = engine(true);
        assert_eq!(
            e.generate(&sampling(5), ContextId(1), None, None, 1),
            Err(EngineError::MissingScript)
        );
    }

    #[test]
    fn stop_string_truncates() {
        let mut t = Tokenizer::new();
        let s = Sampling { stop: Some("\n".into()), ..Sampling::default() };
        let got = script_tokens(&mut t, "a b\nc", &s);
        let want = t.tokenize("a b").into_inner();
        assert_eq!(got, want);
        assert_eq!(t.detokenize(&got).unwrap(), "a b");
    }

    #[test]
    fn decode_iteration_cost() {
        let mut e = engine(true);
        e.fill(&toks(1023), ContextId(1), None).unwrap();
        e.step();
        let script = toks(4);
        e.generate(&sampling(4), ContextId(1), None, Some(&script), 1).unwrap();
        let r = e.step();
        // 1023 resident plus nothing yet appended for this iteration
        assert_eq!(r.batch_tokens, 1023);
        let r = e.step();
        assert_eq!(r.batch_tokens, 1024);
        assert_eq!(r.elapsed, VirtualTime::from_ms(2.0 + 0.0062 * 1024.0));
    }

    #[test]
    fn shared_kernel_counts_parent_once() {
        let mut batch = [0usize; 2];
        let mut elapsed = [VirtualTime::ZERO; 2];
        for (k, shared) in [true, false].into_iter().enumerate() {
            let mut e = engine(shared);
            e.fill(&toks(6000), ContextId(1), None).unwrap();
            e.fill(&toks(100), ContextId(2), Some(ContextId(1))).unwrap();
            e.fill(&toks(100), ContextId(3), Some(ContextId(1))).unwrap();
            e.step();
            let script = toks(3);
            e.generate(&sampling(3), ContextId(2), None, Some(&script), 1).unwrap();
            e.generate(&sampling(3), ContextId(3), None, Some(&script), 2).unwrap();
            let r = e.step();
            batch[k] = r.batch_tokens;
            elapsed[k] = r.elapsed;
        }
        assert_eq!(batch, [6200, 12200]);
        assert!(elapsed[0] < elapsed[1]);
    }

    #[test]
    fn free_semantics() {
        let mut e = engine(true);
        e.fill(&toks(64), ContextId(1), None).unwrap();
        e.fill(&toks(16), ContextId(2), Some(ContextId(1))).unwrap();
        e.fill(&toks(16), ContextId(3), Some(ContextId(1))).unwrap();
        assert_eq!(e.free_context(ContextId(1)), Err(EngineError::ContextBusy(ContextId(1))));
        assert_eq!(e.free_context(ContextId(2)), Ok(vec![ContextId(2)]));
        assert_eq!(e.store().used_blocks(), 5);
        assert_eq!(e.mark_dropped(ContextId(1)), Ok(vec![]));
        assert_eq!(e.free_context(ContextId(3)), Ok(vec![ContextId(3), ContextId(1)]));
        assert_eq!(e.store().used_blocks(), 0);
        assert_eq!(e.free_context(ContextId(3)), Err(EngineError::UnknownContext(ContextId(3))));
    }

    #[test]
    fn running_generation_pins_context() {
        let mut e = engine(true);
        e.fill(&toks(10), ContextId(1), None).unwrap();
        let script = toks(2);
        e.generate(&sampling(9), ContextId(1), None, Some(&script), 1).unwrap();
        assert_eq!(e.free_context(ContextId(1)), Err(EngineError::ContextBusy(ContextId(1))));
        assert_eq!(e.abort(1), Some(ContextId(1)));
        assert!(e.free_context(ContextId(1)).is_ok());
    }

    #[test]
    fn oom_mid_generation_fails_request() {
        let mut e = SimEngine::new(EngineId(0), CostModel::default(), PagedKvStore::new(4, 2));
        e.fill(&toks(8), ContextId(1), None).unwrap();
        let script = toks(3);
        e.generate(&sampling(3), ContextId(1), None, Some(&script), 5).unwrap();
        let reports = run_to_end(&mut e);
        let last = reports.last().unwrap();
        assert_eq!(last.finished, vec![(5, Finish::OutOfMemory)]);
        assert_eq!(e.context(ContextId(1)).unwrap().refcount, 0);
    }

    #[test]
    fn trace_format() {
        let r = StepReport {
            start: VirtualTime::from_ms(12.5),
            fill_tokens: 30,
            batch_tokens: 100,
            emitted: vec![(1, 2), (2, 3)],
            ..StepReport::default()
        };
        assert_eq!(r.trace_line(EngineId(3)), "t=12.500 engine=3 fill=30 batch=100 emitted=2");
    }
}
