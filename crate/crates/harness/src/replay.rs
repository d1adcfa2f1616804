//! Trace replay against a fresh heap, in lockstep with the oracle.
//!
//! Every logical thread of a trace runs on its own real thread. A baton
//! passes between them at each thread switch, so the events run one at a
//! time in file order and the oracle sees one serialized stream.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Barrier, Mutex, OnceLock};
use std::thread::{self, Thread};

use oobheap::{Heap, HeapConfig, PlatformBacking, Violation, ViolationPolicy};
use thiserror::Error;

use crate::fill::{check_repeat, Pattern};
use crate::oracle::{Observed, Oracle, Plan};
use crate::report::StatsReport;
use crate::trace::TraceEvent;

#[derive(Debug, Clone)]
#[derive(Default)]
pub struct ReplayConfig {
    pub policy: ViolationPolicy,
    /// Print reported violations on stderr.
    pub diagnostics: bool,
}


#[derive(Debug, Clone, Error)]
pub enum ReplayError {
    #[error("event {index} (`{event}`): {detail}")]
    Breach {
        index: usize,
        event: TraceEvent,
        detail: String,
    },
    #[error("end of run: {0}")]
    Final(String),
}

impl ReplayError {
    /// Index of the failing event, if one failed.
    pub fn event_index(&self) -> Option<usize> {
        match self {
            ReplayError::Breach { index, .. } => Some(*index),
            ReplayError::Final(_) => None,
        }
    }
}

/// Addresses the allocator never issued, handed out for frees of ids that
/// were never allocated.
static FOREIGN: [u128; 256] = [0; 256];

fn foreign_addr(id: u64) -> usize {
    FOREIGN.as_ptr() as usize + (id % 256) as usize * 16
}

struct State {
    oracle: Oracle,
    generation: HashMap<u64, u64>,
    ops: u64,
    failure: Option<ReplayError>,
}

struct Run<'a> {
    events: &'a [TraceEvent],
    heap: Heap,
    /// (worker, first event, end) per baton hand-off.
    segments: Vec<(usize, usize, usize)>,
    turn: AtomicUsize,
    threads: OnceLock<Vec<Thread>>,
    state: Mutex<State>,
}

impl State {
    fn next_generation(&mut self, id: u64) -> u64 {
        let g = self.generation.entry(id).or_insert(0);
        *g += 1;
        *g
    }

    fn pattern(&self, id: u64) -> Pattern {
        Pattern::new(id, self.generation.get(&id).copied().unwrap_or(0))
    }
}

fn observe(heap: &Heap, addr: usize) -> Result<Observed, String> {
    // SAFETY: only the baton holder touches the heap.
    let info = unsafe { heap.inspect(addr as *const u8) }.ok_or_else(|| format!("no block at {addr:#x}"))?;
    if !info.live || info.start != addr {
        return Err(format!("{addr:#x} is not the start of a live block"));
    }
    Ok(Observed {
        addr,
        route: info.route,
        size: info.size,
    })
}

fn check_fill(st: &State, id: u64, addr: usize, len: usize) -> Result<(), String> {
    // SAFETY: the block is live and holds at least `len` bytes.
    unsafe { st.pattern(id).check(addr as *const u8, len) }
        .map_err(|at| format!("fill of id {id} corrupted at byte {at} of {len}"))
}

fn record_alloc(heap: &Heap, st: &mut State, id: u64, size: usize, addr: usize, tid: u32) -> Result<(), String> {
    let seen = observe(heap, addr)?;
    st.oracle.on_alloc(id, size, seen, tid).map_err(|e| e.to_string())?;
    let g = st.next_generation(id);
    // SAFETY: fresh block of at least `size` bytes.
    unsafe { Pattern::new(id, g).write(addr as *mut u8, size) };
    Ok(())
}

fn step(heap: &Heap, st: &mut State, tid: u32, event: TraceEvent) -> Result<(), String> {
    st.ops += 1;
    match event {
        TraceEvent::SelectThread(_) => Ok(()),
        TraceEvent::Alloc { id, size } => {
            if st.oracle.is_live(id) {
                return Err(format!("id {id} is already live"));
            }
            match heap.allocate(size) {
                Some(p) => record_alloc(heap, st, id, size, p.as_ptr() as usize, tid),
                None if oobheap::config::classify(size).is_err() => Ok(()),
                None => Err(format!("allocation of {size} bytes failed")),
            }
        }
        TraceEvent::ZeroAlloc { id, count, size } => {
            if st.oracle.is_live(id) {
                return Err(format!("id {id} is already live"));
            }
            let total = count.checked_mul(size).filter(|&t| oobheap::config::classify(t).is_ok());
            match (heap.zero_allocate(count, size), total) {
                (None, None) => Ok(()),
                (Some(_), None) => Err("overflowing zero allocation succeeded".into()),
                (None, Some(t)) => Err(format!("zero allocation of {t} bytes failed")),
                (Some(p), Some(t)) => {
                    let addr = p.as_ptr() as usize;
                    // SAFETY: fresh block of `t` bytes.
                    let bytes = unsafe { std::slice::from_raw_parts(addr as *const u8, t) };
                    check_repeat(bytes, 0).map_err(|at| format!("zeroed block dirty at byte {at}"))?;
                    record_alloc(heap, st, id, t, addr, tid)
                }
            }
        }
        TraceEvent::Free { id } => match st.oracle.plan(id) {
            Plan::Live(b) => {
                check_fill(st, id, b.lo, b.requested)?;
                st.oracle.on_free(id);
                // SAFETY: live block of this heap.
                unsafe { heap.deallocate(b.lo as *mut u8) };
                Ok(())
            }
            Plan::Stale(addr) => {
                // SAFETY: the allocator must reject this free.
                unsafe { heap.deallocate(addr as *mut u8) };
                Ok(())
            }
            Plan::Aliased => Ok(()),
            Plan::Unknown => {
                let addr = foreign_addr(id);
                st.oracle.expect_invalid(addr);
                // SAFETY: the allocator must reject this free.
                unsafe { heap.deallocate(addr as *mut u8) };
                Ok(())
            }
        },
        TraceEvent::Realloc { id, size } => match st.oracle.plan(id) {
            Plan::Live(b) => {
                check_fill(st, id, b.lo, b.requested)?;
                // SAFETY: live block of this heap.
                let q = unsafe { heap.reallocate(b.lo as *mut u8, size) };
                let Some(q) = q else {
                    if oobheap::config::classify(size).is_err() {
                        return Ok(());
                    }
                    return Err(format!("resize to {size} bytes failed"));
                };
                let q = q.as_ptr() as usize;
                check_fill(st, id, q, b.requested.min(size)).map_err(|e| format!("after resize: {e}"))?;
                st.oracle.on_free(id);
                record_alloc(heap, st, id, size, q, tid)
            }
            Plan::Stale(addr) => {
                // A thread that does not own the bin may only learn of the
                // earlier free when the owner drains; the new block is then
                // legitimately live.
                // SAFETY: the allocator must reject or defer this resize.
                match unsafe { heap.reallocate(addr as *mut u8, size) } {
                    None => Ok(()),
                    Some(q) => record_alloc(heap, st, id, size, q.as_ptr() as usize, tid),
                }
            }
            Plan::Aliased => Ok(()),
            Plan::Unknown => match unsafe { heap.reallocate(std::ptr::null_mut(), size) } {
                Some(q) => record_alloc(heap, st, id, size, q.as_ptr() as usize, tid),
                None => Err(format!("allocation of {size} bytes failed")),
            },
        },
    }
}

impl Run<'_> {
    fn worker(&self, me: usize, tid: u32) {
        loop {
            let s = self.turn.load(Ordering::Acquire);
            if s >= self.segments.len() {
                return;
            }
            let (owner, start, end) = self.segments[s];
            if owner != me {
                thread::park();
                continue;
            }
            let failed = {
                let mut st = self.state.lock().unwrap();
                for index in start..end {
                    let event = self.events[index];
                    if let Err(detail) = step(&self.heap, &mut st, tid, event) {
                        st.failure = Some(ReplayError::Breach { index, event, detail });
                        break;
                    }
                }
                st.failure.is_some()
            };
            let next = if failed { self.segments.len() } else { s + 1 };
            self.turn.store(next, Ordering::Release);
            let threads = self.threads.get().expect("set before the first turn");
            match self.segments.get(next) {
                Some(&(w, _, _)) => threads[w].unpark(),
                None => threads.iter().for_each(Thread::unpark),
            }
        }
    }
}

/// Splits events into baton segments. Returns the logical thread ids in
/// order of first use and the segments.
fn segment(events: &[TraceEvent]) -> (Vec<u32>, Vec<(usize, usize, usize)>) {
    let mut tids = vec![0u32];
    let mut index_of = HashMap::from([(0u32, 0usize)]);
    let mut segments = Vec::new();
    let mut cur = 0usize;
    let mut start = 0usize;
    for (i, e) in events.iter().enumerate() {
        if let TraceEvent::SelectThread(t) = *e {
            let w = *index_of.entry(t).or_insert_with(|| {
                tids.push(t);
                tids.len() - 1
            });
            if w != cur {
                if start < i {
                    segments.push((cur, start, i));
                }
                cur = w;
                start = i;
            }
        }
    }
    if start < events.len() {
        segments.push((cur, start, events.len()));
    }
    (tids, segments)
}

/// Replays `events` on a fresh heap. On success every block the trace left
/// live has been checked and freed, the heap audits clean and every
/// reported violation matched an expected one.
pub fn replay(events: &[TraceEvent], config: &ReplayConfig) -> Result<StatsReport, ReplayError> {
    let reported: Arc<Mutex<Vec<Violation>>> = Arc::default();
    let sink = reported.clone();
    let heap = Heap::with_config(
        PlatformBacking::new(),
        HeapConfig {
            policy: config.policy,
            diagnostics: config.diagnostics,
            hook: Some(Arc::new(move |v: &Violation| sink.lock().unwrap().push(*v))),
            ..HeapConfig::default()
        },
    );
    let (tids, segments) = segment(events);
    let run = Run {
        events,
        heap: heap.clone(),
        segments,
        turn: AtomicUsize::new(0),
        threads: OnceLock::new(),
        state: Mutex::new(State {
            oracle: Oracle::new(),
            generation: HashMap::new(),
            ops: 0,
            failure: None,
        }),
    };
    let ready = Barrier::new(tids.len() + 1);
    thread::scope(|s| {
        let handles: Vec<_> = tids
            .iter()
            .enumerate()
            .map(|(w, &tid)| {
                let (run, ready) = (&run, &ready);
                s.spawn(move || {
                    ready.wait();
                    run.worker(w, tid);
                })
            })
            .collect();
        let threads = handles.iter().map(|h| h.thread().clone()).collect();
        run.threads.set(threads).expect("set once");
        ready.wait();
        // Joining waits for thread-local teardown, which the scope does not.
        for h in handles {
            h.join().expect("replay worker panicked");
        }
    });
    drop(run.heap);
    let mut st = run.state.into_inner().unwrap();
    if let Some(f) = st.failure.take() {
        return Err(f);
    }
    finish(&heap, &mut st, &reported)
}

/// Adopts every worker's bins, frees what the trace left live and checks
/// the end state.
fn finish(heap: &Heap, st: &mut State, reported: &Mutex<Vec<Violation>>) -> Result<StatsReport, ReplayError> {
    let fail = ReplayError::Final;
    heap.collect_orphans();
    heap.drain_thread();
    let leftover: Vec<_> = st.oracle.live_blocks().copied().collect();
    for b in &leftover {
        check_fill(st, b.id, b.lo, b.requested).map_err(fail)?;
        st.oracle.on_free(b.id);
        // SAFETY: live block of this heap.
        unsafe { heap.deallocate(b.lo as *mut u8) };
    }
    heap.collect_orphans();
    heap.drain_thread();
    let audit = heap.audit().map_err(|e| fail(e.to_string()))?;
    if !audit.all_pristine() {
        return Err(fail(format!("blocks remain after freeing everything: {audit:?}")));
    }
    let reported = reported.lock().unwrap().clone();
    st.oracle.reconcile(&reported).map_err(|e| fail(e.to_string()))?;
    let mut report = StatsReport::from_heap("replay", &heap.stats());
    report.ops = st.ops;
    report.bytes_live_peak = st.oracle.peak_bytes() as u64;
    report.leftover_blocks = leftover.len() as u64;
    report.skipped = st.oracle.skipped();
    report.expected_violations = st.oracle.expected_violations() as u64;
    heap.release_thread();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::parse_trace;
    use oobheap::PolicyAction;

    fn run(text: &str) -> Result<StatsReport, ReplayError> {
        replay(
            &parse_trace(text).unwrap(),
            &ReplayConfig {
                policy: ViolationPolicy::uniform(PolicyAction::Ignore),
                diagnostics: false,
            },
        )
    }

    #[test]
    fn clean_trace() {
        let r = run("a 1 513\na 2 24\nr 2 40\nz 3 8 16\nf 1\nf 2\n").unwrap();
        assert_eq!(r.violations(), 0);
        assert_eq!(r.ops, 6);
        assert_eq!(r.leftover_blocks, 1);
    }

    #[test]
    fn double_free_is_reported_once() {
        let r = run("a 1 64\nf 1\nf 1\n").unwrap();
        assert_eq!((r.double_frees, r.invalid_frees), (1, 0));
    }

    #[test]
    fn remote_double_free_is_immediate() {
        let r = run("t 1\na 1 64\nt 2\nf 1\nf 1\n").unwrap();
        assert_eq!((r.double_frees, r.deferred), (1, 0));
    }

    #[test]
    fn remote_then_owner_is_deferred() {
        let r = run("t 1\na 1 2000\na 2 2000\nt 2\nf 1\nt 1\nf 1\n").unwrap();
        assert_eq!((r.double_frees, r.deferred), (1, 1));
    }

    #[test]
    fn unknown_free_is_invalid() {
        let r = run("f 5\n").unwrap();
        assert_eq!(r.invalid_frees, 1);
    }

    #[test]
    fn aliased_stale_free_is_skipped() {
        let r = run("a 1 64\nf 1\na 2 64\nf 1\nf 2\n").unwrap();
        assert_eq!((r.violations(), r.skipped), (0, 1));
    }

    #[test]
    fn reused_live_id_is_a_breach() {
        let err = run("a 1 64\na 1 64\n").unwrap_err();
        assert_eq!(err.event_index(), Some(1));
    }

    #[test]
    fn overflowing_zero_alloc_fails_cleanly() {
        let r = run("z 1 1099511627776 1099511627776\n").unwrap();
        assert_eq!(r.violations(), 0);
    }

    #[test]
    fn segments_follow_thread_switches() {
        let events = parse_trace("a 1 1\nt 0\na 2 1\nt 3\nf 1\nt 0\nf 2\n").unwrap();
        let (tids, segs) = segment(&events);
        assert_eq!(tids, vec![0, 3]);
        assert_eq!(segs, vec![(0, 0, 3), (1, 3, 5), (0, 5, 7)]);
    }

    #[test]
    fn external_double_free() {
        let r = run("a 1 300000\nf 1\nf 1\n").unwrap();
        assert_eq!((r.double_frees, r.invalid_frees), (1, 0));
    }
}
