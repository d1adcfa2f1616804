//! Randomized stress workloads.
//!
//! * churn: each thread fills and empties random slots.
//! * larson: a fixed set of blocks per thread, one free and one
//!   reallocation per step; every generation the threads exit and fresh
//!   threads inherit their blocks.
//! * mstress: threads hand blocks to each other and free what they receive.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Barrier, Mutex};
use std::thread;

use oobheap::{Heap, HeapConfig, PlatformBacking, PolicyAction, Violation, ViolationPolicy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fill::{mix, Pattern};
use crate::report::StatsReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StressKind {
    Churn,
    Larson,
    Mstress,
}

impl StressKind {
    pub fn name(self) -> &'static str {
        match self {
            StressKind::Churn => "churn",
            StressKind::Larson => "larson",
            StressKind::Mstress => "mstress",
        }
    }
}

#[derive(Debug, Clone)]
pub struct StressConfig {
    pub kind: StressKind,
    pub threads: usize,
    /// Steps per thread (per generation for larson).
    pub iters: u64,
    pub min_size: usize,
    pub max_size: usize,
    pub seed: u64,
    /// Blocks per thread in churn and larson.
    pub slots: usize,
    pub generations: usize,
}

impl Default for StressConfig {
    fn default() -> Self {
        StressConfig {
            kind: StressKind::Churn,
            threads: 1,
            iters: 1_000_000,
            min_size: 1,
            max_size: 4096,
            seed: 42,
            slots: 1024,
            generations: 10,
        }
    }
}

#[derive(Debug, Clone, Error)]
#[error("{0}")]
pub struct StressError(pub String);

/// A block owned by the workload.
#[derive(Debug, Clone, Copy)]
struct Block {
    addr: usize,
    size: usize,
    pattern: Pattern,
}

// SAFETY: a block address is plain data handed between workload threads.
unsafe impl Send for Block {}

/// Live address intervals of one thread.
#[derive(Default)]
struct Intervals(BTreeMap<usize, usize>);

impl Intervals {
    fn insert(&mut self, lo: usize, len: usize) -> Result<(), StressError> {
        let hi = lo + len.max(1);
        if let Some((&plo, &phi)) = self.0.range(..hi).next_back() {
            if phi > lo {
                return Err(StressError(format!(
                    "block [{lo:#x}, {hi:#x}) overlaps [{plo:#x}, {phi:#x})"
                )));
            }
        }
        self.0.insert(lo, hi);
        Ok(())
    }

    fn remove(&mut self, lo: usize) {
        self.0.remove(&lo);
    }
}

struct Ctx {
    heap: Heap,
    live: AtomicU64,
    peak: AtomicU64,
}

impl Ctx {
    fn alloc(&self, rng: &mut ChaCha8Rng, cfg: &StressConfig, tag: u64) -> Result<Block, StressError> {
        let size = rng.random_range(cfg.min_size..=cfg.max_size);
        let p = self
            .heap
            .allocate(size)
            .ok_or_else(|| StressError(format!("allocation of {size} bytes failed")))?
            .as_ptr();
        if !(p as usize).is_multiple_of(16) {
            return Err(StressError(format!("{p:p} is not 16-byte aligned")));
        }
        let pattern = Pattern(mix(tag));
        // SAFETY: fresh block of `size` bytes.
        unsafe { pattern.write(p, size) };
        let now = self.live.fetch_add(size as u64, Ordering::Relaxed) + size as u64;
        self.peak.fetch_max(now, Ordering::Relaxed);
        Ok(Block {
            addr: p as usize,
            size,
            pattern,
        })
    }

    fn free(&self, b: Block) -> Result<(), StressError> {
        // SAFETY: the workload owns `b`.
        unsafe {
            b.pattern
                .check(b.addr as *const u8, b.size)
                .map_err(|at| StressError(format!("block {:#x} corrupted at byte {at} of {}", b.addr, b.size)))?;
            self.heap.deallocate(b.addr as *mut u8);
        }
        self.live.fetch_sub(b.size as u64, Ordering::Relaxed);
        Ok(())
    }
}

fn thread_seed(seed: u64, generation: usize, thread: usize) -> u64 {
    mix(seed ^ mix((generation as u64) << 32 | thread as u64))
}

fn churn_thread(ctx: &Ctx, cfg: &StressConfig, t: usize) -> Result<u64, StressError> {
    let mut rng = ChaCha8Rng::seed_from_u64(thread_seed(cfg.seed, 0, t));
    let mut slots: Vec<Option<Block>> = vec![None; cfg.slots.max(1)];
    let mut spans = Intervals::default();
    let mut ops = 0u64;
    for i in 0..cfg.iters {
        let s = rng.random_range(0..slots.len());
        match slots[s].take() {
            Some(b) => {
                spans.remove(b.addr);
                ctx.free(b)?;
            }
            None => {
                let b = ctx.alloc(&mut rng, cfg, (t as u64) << 40 | i)?;
                spans.insert(b.addr, b.size)?;
                slots[s] = Some(b);
            }
        }
        ops += 1;
    }
    for b in slots.into_iter().flatten() {
        ctx.free(b)?;
    }
    Ok(ops)
}

fn larson_thread(ctx: &Ctx, cfg: &StressConfig, g: usize, t: usize, mut set: Vec<Block>) -> Result<(Vec<Block>, u64), StressError> {
    let mut rng = ChaCha8Rng::seed_from_u64(thread_seed(cfg.seed, g, t));
    let mut spans = Intervals::default();
    for b in &set {
        spans.insert(b.addr, b.size)?;
    }
    let mut ops = 0u64;
    let tag = ((g as u64) << 48) | ((t as u64) << 40);
    while set.len() < cfg.slots.max(1) {
        let b = ctx.alloc(&mut rng, cfg, tag | ops)?;
        spans.insert(b.addr, b.size)?;
        set.push(b);
        ops += 1;
    }
    for _ in 0..cfg.iters {
        let i = rng.random_range(0..set.len());
        let old = set[i];
        spans.remove(old.addr);
        ctx.free(old)?;
        let b = ctx.alloc(&mut rng, cfg, tag | ops)?;
        spans.insert(b.addr, b.size)?;
        set[i] = b;
        ops += 2;
    }
    Ok((set, ops))
}

fn mstress_thread(
    ctx: &Ctx,
    cfg: &StressConfig,
    t: usize,
    peers: &[mpsc::Sender<Block>],
    inbox: mpsc::Receiver<Block>,
    done: &Barrier,
) -> Result<u64, StressError> {
    let mut rng = ChaCha8Rng::seed_from_u64(thread_seed(cfg.seed, 0, t));
    let mut own: Vec<Block> = Vec::new();
    let mut ops = 0u64;
    let mut failure = None;
    for i in 0..cfg.iters {
        let step = (|| -> Result<(), StressError> {
            let b = ctx.alloc(&mut rng, cfg, (t as u64) << 40 | i)?;
            ops += 1;
            match rng.random_range(0..4) {
                0 | 1 if peers.len() > 1 => {
                    let mut to = rng.random_range(0..peers.len() - 1);
                    if to >= t {
                        to += 1;
                    }
                    peers[to].send(b).map_err(|_| StressError("peer gone".into()))?;
                }
                _ => own.push(b),
            }
            if own.len() > 64 {
                let b = own.swap_remove(rng.random_range(0..own.len()));
                ctx.free(b)?;
                ops += 1;
            }
            while let Ok(b) = inbox.try_recv() {
                ctx.free(b)?;
                ops += 1;
            }
            Ok(())
        })();
        if let Err(e) = step {
            failure = Some(e);
            break;
        }
    }
    // Everyone has sent everything once all threads pass the barrier.
    done.wait();
    while let Ok(b) = inbox.try_recv() {
        ctx.free(b)?;
        ops += 1;
    }
    for b in own {
        ctx.free(b)?;
        ops += 1;
    }
    failure.map_or(Ok(ops), Err)
}

fn join_all<T>(handles: Vec<thread::ScopedJoinHandle<'_, Result<T, StressError>>>) -> Result<Vec<T>, StressError> {
    let mut out = Vec::new();
    let mut first_err = None;
    for h in handles {
        match h.join() {
            Ok(Ok(v)) => out.push(v),
            Ok(Err(e)) => first_err = first_err.or(Some(e)),
            Err(_) => first_err = first_err.or(Some(StressError("worker panicked".into()))),
        }
    }
    first_err.map_or(Ok(out), Err)
}

/// Runs a workload on a fresh heap. Every block is freed at the end and the
/// heap must audit back to its initial state.
pub fn stress(cfg: &StressConfig) -> Result<StatsReport, StressError> {
    if cfg.threads == 0 || cfg.min_size == 0 || cfg.min_size > cfg.max_size {
        return Err(StressError("threads and sizes must be positive, min <= max".into()));
    }
    let reported: Arc<Mutex<Vec<Violation>>> = Arc::default();
    let sink = reported.clone();
    let heap = Heap::with_config(
        PlatformBacking::new(),
        HeapConfig {
            policy: ViolationPolicy::uniform(PolicyAction::Report),
            hook: Some(Arc::new(move |v: &Violation| sink.lock().unwrap().push(*v))),
            ..HeapConfig::default()
        },
    );
    let ctx = Ctx {
        heap: heap.clone(),
        live: AtomicU64::new(0),
        peak: AtomicU64::new(0),
    };
    let mut extra = BTreeMap::new();
    let ops: u64 = match cfg.kind {
        StressKind::Churn => thread::scope(|s| {
            let handles = (0..cfg.threads)
                .map(|t| {
                    let ctx = &ctx;
                    s.spawn(move || churn_thread(ctx, cfg, t))
                })
                .collect();
            join_all(handles).map(|v| v.iter().sum())
        })?,
        StressKind::Larson => {
            let mut sets: Vec<Vec<Block>> = vec![Vec::new(); cfg.threads];
            let mut total = 0u64;
            for g in 0..cfg.generations.max(1) {
                let results = thread::scope(|s| {
                    let handles = sets
                        .drain(..)
                        .enumerate()
                        .map(|(t, set)| {
                            let ctx = &ctx;
                            s.spawn(move || larson_thread(ctx, cfg, g, t, set))
                        })
                        .collect();
                    join_all(handles)
                })?;
                for (set, n) in results {
                    sets.push(set);
                    total += n;
                }
                // The generation's threads have exited; their bins wait for
                // the next generation to adopt them.
                extra.insert(format!("gen{:02}_committed", g + 1), heap.stats().committed as u64);
            }
            for b in sets.into_iter().flatten() {
                ctx.free(b)?;
                total += 1;
            }
            total
        }
        StressKind::Mstress => {
            let (txs, rxs): (Vec<_>, Vec<_>) = (0..cfg.threads).map(|_| mpsc::channel::<Block>()).unzip();
            let done = Barrier::new(cfg.threads);
            thread::scope(|s| {
                let handles = rxs
                    .into_iter()
                    .enumerate()
                    .map(|(t, rx)| {
                        let (ctx, txs, done) = (&ctx, &txs, &done);
                        s.spawn(move || mstress_thread(ctx, cfg, t, txs, rx, done))
                    })
                    .collect();
                join_all(handles).map(|v| v.iter().sum())
            })?
        }
    };
    heap.collect_orphans();
    heap.drain_thread();
    let audit = heap.audit().map_err(|e| StressError(format!("audit: {e}")))?;
    if !audit.all_pristine() {
        return Err(StressError(format!("heap not restored after freeing everything: {audit:?}")));
    }
    let violations = reported.lock().unwrap().clone();
    if let Some(v) = violations.first() {
        return Err(StressError(format!("{} violations on a clean workload, first: {v}", violations.len())));
    }
    let mut report = StatsReport::from_heap(cfg.kind.name(), &heap.stats());
    report.ops = ops;
    report.bytes_live_peak = ctx.peak.load(Ordering::Relaxed);
    report.extra = extra;
    heap.release_thread();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: StressKind, threads: usize) -> StressConfig {
        StressConfig {
            kind,
            threads,
            iters: 20_000,
            slots: 256,
            generations: 3,
            ..StressConfig::default()
        }
    }

    #[test]
    fn churn_is_deterministic() {
        let a = stress(&small(StressKind::Churn, 1)).unwrap();
        let b = stress(&small(StressKind::Churn, 1)).unwrap();
        assert_eq!(a.to_kv(), b.to_kv());
        assert_eq!(a.ops, 20_000);
        assert_eq!(a.violations(), 0);
    }

    #[test]
    fn larson_adopts_orphans() {
        let r = stress(&small(StressKind::Larson, 4)).unwrap();
        assert!(r.adopted > 0);
        assert_eq!(r.extra.len(), 3);
    }

    #[test]
    fn mstress_drains_remote_frees() {
        let r = stress(&small(StressKind::Mstress, 3)).unwrap();
        assert!(r.remote_marks > 0 && r.drained > 0);
    }

    #[test]
    fn rejects_bad_ranges() {
        let mut cfg = small(StressKind::Churn, 1);
        cfg.min_size = 10;
        cfg.max_size = 5;
        assert!(stress(&cfg).is_err());
    }
}
