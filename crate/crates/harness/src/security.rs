//! Security scenarios: detection of bad frees and isolation of metadata from
//! out-of-bounds writes.
//!
//! Detection scenarios run on a fresh heap each. Under the abort policy a
//! detection must kill the process, so each one runs in a child process
//! started through the `security-scenario` command.

use std::fmt;
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::thread;

use oobheap::{
    ClassId, Context, Heap, HeapConfig, PlatformBacking, PolicyAction, RouteKind, Violation, ViolationKind,
    ViolationPolicy,
};

use crate::fill::{mix, Pattern};

/// Request sizes used for each route in detection scenarios.
const FIXED_SIZE: usize = 256;
const VARIABLE_SIZE: usize = 3000;
const EXTERNAL_SIZE: usize = 300_000;

/// Overflow and underflow lengths.
pub const SPILL_LENGTHS: [usize; 4] = [1, 16, 64, 256];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    DoubleFree,
    InteriorFree,
    UnknownFree,
    /// A remote free followed by the owner's free of the same block.
    Deferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Native,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Detection {
    pub fault: Fault,
    pub route: RouteKind,
    pub side: Side,
}

fn route_name(r: RouteKind) -> &'static str {
    match r {
        RouteKind::Fixed => "fixed",
        RouteKind::Variable => "variable",
        RouteKind::External => "external",
    }
}

impl fmt::Display for Detection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fault = match self.fault {
            Fault::DoubleFree => "double-free",
            Fault::InteriorFree => "interior-free",
            Fault::UnknownFree => "unknown-free",
            Fault::Deferred => return write!(f, "deferred/{}", route_name(self.route)),
        };
        let side = match self.side {
            Side::Native => "native",
            Side::Remote => "remote",
        };
        write!(f, "{fault}/{}/{side}", route_name(self.route))
    }
}

const ROUTES: [RouteKind; 3] = [RouteKind::Fixed, RouteKind::Variable, RouteKind::External];

/// Every detection scenario, in a fixed order.
pub fn detections() -> Vec<Detection> {
    let mut out = Vec::new();
    for fault in [Fault::DoubleFree, Fault::InteriorFree, Fault::UnknownFree] {
        for route in ROUTES {
            for side in [Side::Native, Side::Remote] {
                out.push(Detection { fault, route, side });
            }
        }
    }
    for route in [RouteKind::Fixed, RouteKind::Variable] {
        out.push(Detection {
            fault: Fault::Deferred,
            route,
            side: Side::Remote,
        });
    }
    out
}

pub fn find_detection(name: &str) -> Option<Detection> {
    detections().into_iter().find(|d| d.to_string() == name)
}

/// What a detection scenario must report.
#[derive(Debug, Clone, Copy)]
struct Expect {
    kinds: &'static [ViolationKind],
    contexts: &'static [Context],
    deferred: Option<bool>,
}

const BOTH_KINDS: &[ViolationKind] = &[ViolationKind::DoubleFree, ViolationKind::InvalidFree];

impl Detection {
    fn expect(&self) -> Expect {
        let ctx: &'static [Context] = match self.route {
            RouteKind::Fixed => &[Context::Fixed],
            RouteKind::Variable => &[Context::Variable],
            RouteKind::External => &[Context::External],
        };
        match self.fault {
            Fault::DoubleFree => Expect {
                kinds: &[ViolationKind::DoubleFree],
                contexts: ctx,
                deferred: Some(false),
            },
            Fault::InteriorFree => Expect {
                kinds: &[ViolationKind::InvalidFree],
                contexts: ctx,
                deferred: Some(false),
            },
            // A never-issued fixed cell looks like a freed one; a remote
            // free of it is only caught when the owner drains.
            Fault::UnknownFree => match self.route {
                RouteKind::External => Expect {
                    kinds: &[ViolationKind::InvalidFree],
                    contexts: &[Context::Unknown],
                    deferred: Some(false),
                },
                _ => Expect {
                    kinds: BOTH_KINDS,
                    contexts: ctx,
                    deferred: None,
                },
            },
            Fault::Deferred => Expect {
                kinds: &[ViolationKind::DoubleFree],
                contexts: ctx,
                deferred: Some(true),
            },
        }
    }

    fn size(&self) -> usize {
        match self.route {
            RouteKind::Fixed => FIXED_SIZE,
            RouteKind::Variable => VARIABLE_SIZE,
            RouteKind::External => EXTERNAL_SIZE,
        }
    }
}

impl Expect {
    fn matches(&self, v: &Violation, ptr: usize) -> bool {
        v.ptr == ptr
            && self.kinds.contains(&v.kind)
            && self.contexts.contains(&v.context)
            && self.deferred.is_none_or(|d| d == v.deferred)
    }

    /// Whether a diagnostic line from a child process fits.
    fn matches_line(&self, line: &str) -> bool {
        let kind_ok = self.kinds.iter().any(|k| line.starts_with(&format!("oobheap: {k} ptr=0x")));
        let ctx_ok = self.contexts.iter().any(|c| line.contains(&format!(" ctx={c} ")));
        let def_ok = match self.deferred {
            Some(d) => line.ends_with(&format!("deferred={}", d as u8)),
            None => true,
        };
        kind_ok && ctx_ok && def_ok
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed {
            write!(f, "PASS {}", self.name)
        } else {
            write!(f, "FAIL {}: {}", self.name, self.detail)
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SecurityReport {
    pub outcomes: Vec<Outcome>,
}

impl SecurityReport {
    pub fn all_passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Outcome> {
        self.outcomes.iter().filter(|o| !o.passed)
    }
}

impl fmt::Display for SecurityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for o in &self.outcomes {
            writeln!(f, "{o}")?;
        }
        let passed = self.outcomes.iter().filter(|o| o.passed).count();
        write!(f, "{passed}/{} scenarios passed", self.outcomes.len())
    }
}

type Sink = Arc<Mutex<Vec<Violation>>>;

fn scenario_heap(policy: PolicyAction, diagnostics: bool) -> (Heap, Sink) {
    let seen: Sink = Arc::default();
    let sink = seen.clone();
    let heap = Heap::with_config(
        PlatformBacking::new(),
        HeapConfig {
            reserve: 1 << 30,
            policy: ViolationPolicy::uniform(policy),
            diagnostics,
            hook: Some(Arc::new(move |v: &Violation| sink.lock().unwrap().push(*v))),
            ..HeapConfig::default()
        },
    );
    (heap, seen)
}

#[derive(Clone, Copy)]
struct Addr(usize);

// SAFETY: used only to pass addresses to the remote side.
unsafe impl Send for Addr {}

/// Runs `f` on a thread that owns nothing in `heap`.
fn on_other_thread(heap: &Heap, f: impl FnOnce(&Heap) + Send) {
    thread::scope(|s| {
        s.spawn(|| f(heap)).join().expect("remote side panicked");
    });
}

/// Foreign memory, never issued by any heap.
static FOREIGN: [u128; 4] = [0; 4];

fn free_at(heap: &Heap, a: usize) {
    // SAFETY: scenario pointers are either live blocks this side gives up
    // or deliberately bad pointers the heap must reject without touching.
    unsafe { heap.deallocate(a as *mut u8) }
}

/// Performs the fault. Returns the faulting pointer and whether `p` is
/// still live afterwards.
fn inject(d: &Detection, heap: &Heap, p: usize) -> (usize, bool) {
    let (bad, p_live) = match d.fault {
        Fault::DoubleFree | Fault::Deferred => (p, false),
        Fault::InteriorFree => (p + if d.route == RouteKind::External { 4096 } else { 16 }, true),
        Fault::UnknownFree => (
            match d.route {
                // Cells well past every issued block of a fresh bin.
                RouteKind::Fixed => p + 10 * FIXED_SIZE,
                RouteKind::Variable => p + 8192,
                RouteKind::External => std::ptr::addr_of!(FOREIGN) as usize + 16,
            },
            true,
        ),
    };
    let bad_addr = Addr(bad);
    match (d.fault, d.side) {
        (Fault::DoubleFree, Side::Native) => {
            free_at(heap, p);
            free_at(heap, p);
        }
        (Fault::DoubleFree, Side::Remote) => on_other_thread(heap, move |h| {
            let a = bad_addr;
            free_at(h, a.0);
            free_at(h, a.0);
        }),
        (Fault::Deferred, _) => {
            on_other_thread(heap, move |h| {
                let a = bad_addr;
                free_at(h, a.0)
            });
            free_at(heap, p);
        }
        (_, Side::Native) => free_at(heap, bad),
        (_, Side::Remote) => on_other_thread(heap, move |h| {
            let a = bad_addr;
            free_at(h, a.0)
        }),
    }
    heap.drain_thread();
    (bad, p_live)
}

/// Runs one detection scenario in this process.
pub fn run_detection(d: &Detection, policy: PolicyAction, diagnostics: bool) -> Result<(), String> {
    let (heap, seen) = scenario_heap(policy, diagnostics);
    let size = d.size();
    let alloc = |tag: u64| -> Result<(usize, Pattern), String> {
        let p = heap.allocate(size).ok_or("allocation failed")?.as_ptr();
        let pat = Pattern(mix(tag));
        // SAFETY: fresh block of `size` bytes.
        unsafe { pat.write(p, size) };
        Ok((p as usize, pat))
    };
    let (keep, keep_pat) = alloc(1)?;
    let (p, _) = alloc(2)?;
    let (bad, p_live) = inject(d, &heap, p);

    let expect = d.expect();
    let got = seen.lock().unwrap().clone();
    match got.as_slice() {
        [v] if expect.matches(v, bad) => {}
        [] => return Err(format!("{bad:#x} not detected")),
        vs => {
            let list: Vec<String> = vs.iter().map(|v| v.to_string()).collect();
            return Err(format!("for {bad:#x} expected {expect:?}, got [{}]", list.join("; ")));
        }
    }
    // SAFETY: `keep` is live and owned here.
    if let Err(at) = unsafe { keep_pat.check(keep as *const u8, size) } {
        return Err(format!("unrelated block damaged at byte {at}"));
    }
    // The rejected pointer must not be issued twice.
    let (a, _) = alloc(3)?;
    let (b, _) = alloc(4)?;
    if a == b || (p_live && (a == p || b == p)) {
        return Err(format!("block issued twice after the fault: {a:#x} {b:#x}"));
    }
    for q in [a, b, keep].into_iter().chain(p_live.then_some(p)) {
        free_at(&heap, q);
    }
    heap.drain_thread();
    let extra = seen.lock().unwrap().len() - 1;
    if extra > 0 {
        return Err(format!("{extra} violations during clean-up"));
    }
    match heap.audit() {
        Ok(r) if r.all_pristine() => Ok(()),
        Ok(r) => Err(format!("heap not restored: {r:?}")),
        Err(e) => Err(format!("audit: {e}")),
    }
}

/// Runs a detection scenario in a child process with the abort policy and
/// checks that it died with the expected diagnostic.
pub fn run_detection_isolated(d: &Detection, exe: &Path) -> Result<(), String> {
    let out = Command::new(exe)
        .args(["security-scenario", &d.to_string()])
        .env("OOBHEAP_POLICY", "abort")
        .output()
        .map_err(|e| format!("cannot start {}: {e}", exe.display()))?;
    let stderr = String::from_utf8_lossy(&out.stderr);
    if out.status.success() {
        return Err(format!("process was not aborted; stderr: {}", stderr.trim()));
    }
    let expect = d.expect();
    if stderr.lines().any(|l| expect.matches_line(l)) {
        Ok(())
    } else {
        Err(format!("no matching diagnostic; stderr: {}", stderr.trim()))
    }
}

/// Overflow (past the end) or underflow (before the start) of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Spill {
    /// `None` for the external route.
    pub class: Option<ClassId>,
    pub len: usize,
    pub under: bool,
}

impl fmt::Display for Spill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dir = if self.under { "underflow" } else { "overflow" };
        match self.class {
            Some(c) => write!(f, "{dir}/{c}/{}", self.len),
            None => write!(f, "{dir}/external/{}", self.len),
        }
    }
}

/// Every spill scenario: both directions in every class, overflow only for
/// the external route, where the block is followed by its page slack.
pub fn spills() -> Vec<Spill> {
    let mut out = Vec::new();
    for class in ClassId::all() {
        for under in [false, true] {
            for len in SPILL_LENGTHS {
                out.push(Spill {
                    class: Some(class),
                    len,
                    under,
                });
            }
        }
    }
    for len in SPILL_LENGTHS {
        out.push(Spill {
            class: None,
            len,
            under: false,
        });
    }
    out
}

/// A request that lands in `class` and fills its block exactly.
fn size_for(class: ClassId) -> usize {
    let c = class.cell_size();
    if class.is_fixed() {
        c
    } else {
        c + c / 2
    }
}

struct Live {
    lo: usize,
    hi: usize,
    pattern: Pattern,
}

pub fn run_spill(s: &Spill) -> Result<(), String> {
    let (heap, seen) = scenario_heap(PolicyAction::Report, false);
    let (size, count) = match s.class {
        Some(c) => (size_for(c), 3 + 2 * s.len.div_ceil(size_for(c))),
        None => (EXTERNAL_SIZE, 3),
    };
    let mut blocks = Vec::with_capacity(count);
    for i in 0..count {
        let p = heap.allocate(size).ok_or("allocation failed")?.as_ptr();
        // SAFETY: `p` is a live block of this heap.
        let info = unsafe { heap.inspect(p) }.ok_or("issued block not found")?;
        if info.start != p as usize || info.size != size.next_multiple_of(16) && s.class.is_some() {
            return Err(format!("unexpected block {info:?} for a request of {size}"));
        }
        let pattern = Pattern(mix(0x5EC0 + i as u64));
        // SAFETY: fresh block of `size` bytes.
        unsafe { pattern.write(p, size) };
        blocks.push(Live {
            lo: p as usize,
            hi: p as usize + size,
            pattern,
        });
    }
    blocks.sort_by_key(|b| b.lo);
    let victim = count / 2;
    let (v_lo, v_hi) = (blocks[victim].lo, blocks[victim].hi);
    let (w_lo, w_hi) = if s.under { (v_lo - s.len, v_lo) } else { (v_hi, v_hi + s.len) };

    if s.class.is_some() {
        // The written range must lie in this workload's own blocks, which
        // are freed first so that no live data is hit.
        let mut covered = w_lo;
        for b in &blocks {
            if b.lo <= covered && b.hi > covered {
                covered = b.hi;
            }
        }
        if covered < w_hi {
            return Err(format!("blocks around {v_lo:#x} are not contiguous"));
        }
        let mut kept = Vec::new();
        for b in blocks.drain(..) {
            if b.lo < w_hi && b.hi > w_lo {
                free_at(&heap, b.lo);
            } else {
                kept.push(b);
            }
        }
        blocks = kept;
    } else {
        let slack = size.next_multiple_of(4096) - size;
        if s.len > slack || s.under {
            return Err(format!("{} bytes exceed the {slack}-byte page slack", s.len));
        }
    }

    // SAFETY: [w_lo, w_hi) is committed heap memory that holds no live
    // block of this workload (freed cells, or the mapping's page slack).
    unsafe { std::ptr::write_bytes(w_lo as *mut u8, 0xA5, w_hi - w_lo) };

    let fail = |detail: String| Err(format!("after writing [{w_lo:#x}, {w_hi:#x}): {detail}"));
    if let Err(e) = heap.audit() {
        return fail(format!("audit: {e}"));
    }
    for b in &blocks {
        // SAFETY: `b` is live.
        if let Err(at) = unsafe { b.pattern.check(b.lo as *const u8, b.hi - b.lo) } {
            return fail(format!("block {:#x} changed at byte {at}", b.lo));
        }
    }
    // The heap keeps working over the scribbled memory.
    let again: Vec<usize> = (0..count)
        .map(|_| heap.allocate(size).map(|p| p.as_ptr() as usize))
        .collect::<Option<_>>()
        .ok_or("allocation after the write failed")?;
    for b in again.iter().copied().chain(blocks.iter().map(|b| b.lo)) {
        free_at(&heap, b);
    }
    let v = seen.lock().unwrap().clone();
    if let Some(v) = v.first() {
        return fail(format!("violation {v}"));
    }
    match heap.audit() {
        Ok(r) if r.all_pristine() => Ok(()),
        Ok(r) => fail(format!("heap not restored: {r:?}")),
        Err(e) => fail(format!("final audit: {e}")),
    }
}

/// Runs every scenario. Under the abort policy detections run in child
/// processes of `exe`.
pub fn security_suite(policy: PolicyAction, exe: Option<&Path>) -> SecurityReport {
    let mut report = SecurityReport::default();
    for d in detections() {
        let result = match (policy, exe) {
            (PolicyAction::ReportAndAbort, Some(exe)) => run_detection_isolated(&d, exe),
            (PolicyAction::ReportAndAbort, None) => Err("abort policy needs a child executable".into()),
            _ => run_detection(&d, policy, false),
        };
        report.outcomes.push(outcome(d.to_string(), result));
    }
    for s in spills() {
        report.outcomes.push(outcome(s.to_string(), run_spill(&s)));
    }
    report
}

fn outcome(name: String, r: Result<(), String>) -> Outcome {
    match r {
        Ok(()) => Outcome {
            name,
            passed: true,
            detail: String::new(),
        },
        Err(detail) => Outcome {
            name,
            passed: false,
            detail,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        let all = detections();
        assert_eq!(all.len(), 20);
        for d in all {
            assert_eq!(find_detection(&d.to_string()), Some(d));
        }
        assert_eq!(spills().len(), 12 * 8 + 4);
    }

    #[test]
    fn native_fixed_double_free() {
        let d = Detection {
            fault: Fault::DoubleFree,
            route: RouteKind::Fixed,
            side: Side::Native,
        };
        run_detection(&d, PolicyAction::Report, false).unwrap();
    }

    #[test]
    fn remote_then_owner_is_deferred() {
        for route in [RouteKind::Fixed, RouteKind::Variable] {
            let d = Detection {
                fault: Fault::Deferred,
                route,
                side: Side::Remote,
            };
            run_detection(&d, PolicyAction::Report, false).unwrap();
        }
    }

    #[test]
    fn overflow_past_512_byte_block() {
        let s = Spill {
            class: Some(ClassId::fixed(512)),
            len: 64,
            under: false,
        };
        run_spill(&s).unwrap();
    }

    #[test]
    fn ignore_policy_still_detects() {
        for d in detections() {
            run_detection(&d, PolicyAction::Ignore, false).unwrap_or_else(|e| panic!("{d}: {e}"));
        }
    }

    #[test]
    fn diagnostic_lines_match() {
        let d = Detection {
            fault: Fault::Deferred,
            route: RouteKind::Variable,
            side: Side::Remote,
        };
        assert!(d.expect().matches_line("oobheap: double-free ptr=0x7f00 ctx=variable deferred=1"));
        assert!(!d.expect().matches_line("oobheap: double-free ptr=0x7f00 ctx=variable deferred=0"));
        assert!(!d.expect().matches_line("oobheap: invalid-free ptr=0x7f00 ctx=variable deferred=1"));
    }
}
