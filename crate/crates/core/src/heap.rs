//! The allocator instance and its public handle.

use std::fmt;
use std::ptr::{self, NonNull};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

use crate::backing::{Backing, HeapRange, PlatformBacking};
use crate::bin::{BinHeader, BinList, ListKind, NativeFree, OrphanLists, ThreadHeapState, Mark, ORPHAN};
use crate::config::{
    classify, ClassId, PolicyAction, RouteKind, SizeClassRoute, ViolationPolicy, CELLS_PER_BIN, CLASS_COUNT,
    MIN_BIN_SPAN,
};
use crate::external::{CacheCaps, ExtError, ExtFree, ExtState, ExtStats, ExternalTable};
use crate::local::{self, current_thread_id, Access, ReleaseFn};
use crate::meta::MetaArena;
use crate::revlookup::RevLookup;
use crate::vbin::{CellArray, CellTag, VarBin, VarBinMeta};

/// Default size of the reserved heap range.
pub const DEFAULT_RESERVE: usize = 64 << 30;

const FANOUT: usize = 512;
const TABLE_BYTES: usize = FANOUT * std::mem::size_of::<usize>();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViolationKind {
    DoubleFree,
    InvalidFree,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::DoubleFree => "double-free",
            ViolationKind::InvalidFree => "invalid-free",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Context {
    Fixed,
    Variable,
    External,
    Unknown,
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Context::Fixed => "fixed",
            Context::Variable => "variable",
            Context::External => "external",
            Context::Unknown => "unknown",
        })
    }
}

/// A rejected free. The offending operation has had no effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Violation {
    pub kind: ViolationKind,
    pub ptr: usize,
    pub context: Context,
    /// Found while draining remote frees rather than at the call itself.
    pub deferred: bool,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "oobheap: {} ptr={:#x} ctx={} deferred={}",
            self.kind, self.ptr, self.context, self.deferred as u8
        )
    }
}

/// Observer called for every violation, whatever the policy.
pub type ViolationHook = Arc<dyn Fn(&Violation) + Send + Sync>;

#[derive(Clone)]
pub struct HeapConfig {
    pub reserve: usize,
    pub policy: ViolationPolicy,
    pub cache: CacheCaps,
    /// Print a diagnostic line for reported violations.
    pub diagnostics: bool,
    pub hook: Option<ViolationHook>,
}

impl Default for HeapConfig {
    fn default() -> Self {
        HeapConfig {
            reserve: DEFAULT_RESERVE,
            policy: ViolationPolicy::from_env(),
            cache: CacheCaps::DEFAULT,
            diagnostics: true,
            hook: None,
        }
    }
}

impl fmt::Debug for HeapConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HeapConfig")
            .field("reserve", &self.reserve)
            .field("policy", &self.policy)
            .field("cache", &self.cache)
            .field("diagnostics", &self.diagnostics)
            .field("hook", &self.hook.is_some())
            .finish()
    }
}

/// What [`Heap::inspect`] knows about the block holding an address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockInfo {
    pub route: RouteKind,
    pub class: Option<ClassId>,
    pub start: usize,
    pub size: usize,
    pub live: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HeapStats {
    pub reserved: usize,
    pub committed: usize,
    /// Pages granted for bin records, cell arrays, lookup tables, thread
    /// states and the external table.
    pub metadata_bytes: usize,
    pub bins: [usize; CLASS_COUNT],
    pub orphaned_bins: usize,
    pub thread_states: usize,
    pub external: ExtStats,
    pub double_frees: u64,
    pub invalid_frees: u64,
    pub deferred: u64,
    pub remote_marks: u64,
    pub drained: u64,
    pub adopted: u64,
}

impl HeapStats {
    pub fn violations(&self) -> u64 {
        self.double_frees + self.invalid_frees
    }

    pub fn total_bins(&self) -> usize {
        self.bins.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AuditReport {
    pub bins: usize,
    pub pristine_bins: usize,
    pub live_fixed_blocks: usize,
    pub live_variable_blocks: usize,
    pub pending_marks: usize,
    pub external_live: usize,
}

impl AuditReport {
    pub fn all_pristine(&self) -> bool {
        self.bins == self.pristine_bins && self.external_live == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuditError {
    #[error("other threads hold live heap state")]
    Busy,
    #[error("bin at {base:#x} ({class}): {detail}")]
    Bin { base: usize, class: ClassId, detail: String },
    #[error("bin lists: {0}")]
    Lists(String),
    #[error("external table: {0}")]
    External(String),
}

#[derive(Default)]
struct Counters {
    double_free: AtomicU64,
    invalid_free: AtomicU64,
    deferred: AtomicU64,
    remote_marks: AtomicU64,
    drained: AtomicU64,
    adopted: AtomicU64,
}

impl Counters {
    const fn new() -> Counters {
        Counters {
            double_free: AtomicU64::new(0),
            invalid_free: AtomicU64::new(0),
            deferred: AtomicU64::new(0),
            remote_marks: AtomicU64::new(0),
            drained: AtomicU64::new(0),
            adopted: AtomicU64::new(0),
        }
    }
}

struct Registry {
    heap: Option<HeapRange>,
    arena: MetaArena,
    pool: *mut ThreadHeapState,
    bins: [usize; CLASS_COUNT],
    states: usize,
}

// SAFETY: only reached under the registry mutex.
unsafe impl Send for Registry {}

/// How a thread's state keeps its instance alive.
#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum Anchor {
    /// Instance in an `Arc`; each registered state holds a strong count.
    Counted,
    /// Instance in a `static`.
    Static,
}

fn encode(a: PolicyAction) -> u8 {
    match a {
        PolicyAction::Ignore => 0,
        PolicyAction::Report => 1,
        PolicyAction::ReportAndAbort => 2,
    }
}

fn decode(v: u8) -> PolicyAction {
    match v {
        0 => PolicyAction::Ignore,
        1 => PolicyAction::Report,
        _ => PolicyAction::ReportAndAbort,
    }
}

/// Formats a line into a stack buffer and writes it to fd 2.
fn write_diagnostic(v: &Violation) {
    struct Buf {
        bytes: [u8; 160],
        len: usize,
    }
    impl fmt::Write for Buf {
        fn write_str(&mut self, s: &str) -> fmt::Result {
            let n = s.len().min(self.bytes.len() - self.len);
            self.bytes[self.len..self.len + n].copy_from_slice(&s.as_bytes()[..n]);
            self.len += n;
            Ok(())
        }
    }
    let mut b = Buf { bytes: [0; 160], len: 0 };
    let _ = fmt::write(&mut b, format_args!("{v}\n"));
    // SAFETY: writing an initialized buffer to a file descriptor.
    unsafe { libc::write(2, b.bytes.as_ptr().cast(), b.len) };
}

pub(crate) struct Shared<B: Backing> {
    backing: B,
    reserve: usize,
    cache: CacheCaps,
    policy: [AtomicU8; 2],
    diagnostics: AtomicBool,
    hook: Mutex<Option<ViolationHook>>,
    registry: Mutex<Registry>,
    orphans: Mutex<OrphanLists>,
    ext: Mutex<ExternalTable>,
    revlookup: RevLookup,
    heap_base: AtomicUsize,
    heap_end: AtomicUsize,
    registered: AtomicUsize,
    counters: Counters,
}

impl<B: Backing> Shared<B> {
    pub(crate) const fn new(backing: B, reserve: usize, cache: CacheCaps, diagnostics: bool) -> Shared<B> {
        Shared {
            backing,
            reserve,
            cache,
            policy: [AtomicU8::new(1), AtomicU8::new(1)],
            diagnostics: AtomicBool::new(diagnostics),
            hook: Mutex::new(None),
            registry: Mutex::new(Registry {
                heap: None,
                arena: MetaArena::new(),
                pool: ptr::null_mut(),
                bins: [0; CLASS_COUNT],
                states: 0,
            }),
            orphans: Mutex::new(OrphanLists::new()),
            ext: Mutex::new(ExternalTable::new(cache)),
            revlookup: RevLookup::new(FANOUT),
            heap_base: AtomicUsize::new(0),
            heap_end: AtomicUsize::new(0),
            registered: AtomicUsize::new(0),
            counters: Counters::new(),
        }
    }

    pub(crate) fn set_policy(&self, p: ViolationPolicy) {
        self.policy[0].store(encode(p.on_double_free), Ordering::Relaxed);
        self.policy[1].store(encode(p.on_invalid_free), Ordering::Relaxed);
    }

    pub(crate) fn policy(&self) -> ViolationPolicy {
        ViolationPolicy {
            on_double_free: decode(self.policy[0].load(Ordering::Relaxed)),
            on_invalid_free: decode(self.policy[1].load(Ordering::Relaxed)),
        }
    }

    fn owner_key(&self) -> *const () {
        self as *const Self as *const ()
    }

    // ---- violations ------------------------------------------------------

    fn report(&self, kind: ViolationKind, ptr: usize, context: Context, deferred: bool) {
        let v = Violation { kind, ptr, context, deferred };
        let action = match kind {
            ViolationKind::DoubleFree => {
                self.counters.double_free.fetch_add(1, Ordering::Relaxed);
                decode(self.policy[0].load(Ordering::Relaxed))
            }
            ViolationKind::InvalidFree => {
                self.counters.invalid_free.fetch_add(1, Ordering::Relaxed);
                decode(self.policy[1].load(Ordering::Relaxed))
            }
        };
        if deferred {
            self.counters.deferred.fetch_add(1, Ordering::Relaxed);
        }
        let hook = self.hook.lock().clone();
        if let Some(h) = hook {
            h(&v);
        }
        match action {
            PolicyAction::Ignore => {}
            PolicyAction::Report => {
                if self.diagnostics.load(Ordering::Relaxed) {
                    write_diagnostic(&v);
                }
            }
            PolicyAction::ReportAndAbort => {
                write_diagnostic(&v);
                // SAFETY: terminating the process.
                unsafe { libc::abort() };
            }
        }
    }

    fn context_of(b: &BinHeader) -> Context {
        if b.is_fixed() {
            Context::Fixed
        } else {
            Context::Variable
        }
    }

    // ---- registry ----------------------------------------------------------

    fn heap_range<'r>(&self, reg: &'r mut Registry) -> Option<&'r mut HeapRange> {
        if reg.heap.is_none() {
            let range = HeapRange::reserve(&self.backing, self.reserve).ok()?;
            self.heap_base.store(range.base, Ordering::Release);
            self.heap_end.store(range.base, Ordering::Release);
            reg.heap = Some(range);
        }
        reg.heap.as_mut()
    }

    fn new_state(&self) -> Option<*mut ThreadHeapState> {
        let id = current_thread_id();
        let mut reg = self.registry.lock();
        let st = if reg.pool.is_null() {
            
            reg
                .arena
                .alloc(
                    &self.backing,
                    std::mem::size_of::<ThreadHeapState>(),
                    std::mem::align_of::<ThreadHeapState>(),
                )
                .ok()? as *mut ThreadHeapState
        } else {
            let st = reg.pool;
            // SAFETY: pooled states are valid and unused.
            reg.pool = unsafe { (*st).pool_next };
            st
        };
        // SAFETY: `st` is state storage owned by the registry.
        unsafe { ptr::write(st, ThreadHeapState::new(id)) };
        reg.states += 1;
        Some(st)
    }

    /// Orphans every bin of `st` and returns it to the pool.
    ///
    /// # Safety
    /// `st` came from `new_state` and is not used afterwards.
    pub(crate) unsafe fn release_state(&self, st: *mut ThreadHeapState) {
        let s = &mut *st;
        {
            let mut orphans = self.orphans.lock();
            for class in 0..CLASS_COUNT {
                for list in [&mut s.avail[class], &mut s.full[class]] {
                    while !list.head.is_null() {
                        let b = list.head;
                        list.remove(b);
                        (*b).owner.store(ORPHAN, Ordering::Release);
                        orphans.lists[class].push_back(b, ListKind::Orphan);
                    }
                }
            }
        }
        let mut reg = self.registry.lock();
        s.pool_next = reg.pool;
        reg.pool = st;
        reg.states -= 1;
    }

    fn make_slot(&self, anchor: Anchor) -> Option<(*mut ThreadHeapState, ReleaseFn)> {
        let st = self.new_state()?;
        self.registered.fetch_add(1, Ordering::AcqRel);
        let release: ReleaseFn = match anchor {
            Anchor::Counted => {
                // SAFETY: Counted instances always live in an Arc.
                unsafe { Arc::increment_strong_count(self as *const Self) };
                release_counted::<B>
            }
            Anchor::Static => release_static::<B>,
        };
        Some((st, release))
    }

    /// Runs `f` on this thread's state, or on a throwaway state when the
    /// thread-local table cannot be used.
    fn with_state<R>(&self, anchor: Anchor, f: impl FnOnce(&mut ThreadHeapState) -> R) -> Option<R> {
        match local::with_state(self.owner_key(), &mut || self.make_slot(anchor), f) {
            Access::Done(r) => Some(r),
            Access::NoState => None,
            Access::Unavailable(f) => {
                let st = self.new_state()?;
                // SAFETY: fresh state owned by this call.
                let r = f(unsafe { &mut *st });
                unsafe { self.release_state(st) };
                Some(r)
            }
        }
    }

    /// Commits a span for a new bin of `class` and links it into `st`.
    fn create_bin(&self, st: &mut ThreadHeapState, class: ClassId) -> Option<*mut BinHeader> {
        let mut reg = self.registry.lock();
        let reg = &mut *reg;
        self.heap_range(reg)?;
        let (cells, granules) = if class.is_fixed() {
            (ptr::null(), ptr::null_mut())
        } else {
            let cells = reg.arena.alloc(&self.backing, std::mem::size_of::<CellArray>(), 4096).ok()?;
            let granules = reg.arena.alloc(&self.backing, CELLS_PER_BIN * 2, 8).ok()?;
            (cells as *const CellArray, granules as *mut u16)
        };
        let at = reg
            .arena
            .alloc(&self.backing, std::mem::size_of::<BinHeader>(), std::mem::align_of::<BinHeader>())
            .ok()? as *mut BinHeader;
        let heap = reg.heap.as_mut().expect("reserved above");
        let base = heap.commit_span(&self.backing, class.span()).ok()?;
        let heap_base = heap.base;
        // SAFETY: fresh zeroed metadata storage.
        unsafe { BinHeader::init(at, base, class, cells, granules, st.id) };
        let first = (base - heap_base) / MIN_BIN_SPAN;
        let arena = &mut reg.arena;
        for index in first..first + class.span() / MIN_BIN_SPAN {
            // SAFETY: the registry lock serializes writers.
            let installed = unsafe {
                self.revlookup
                    .insert(index, at as usize, &mut || arena.alloc(&self.backing, TABLE_BYTES, 4096))
            };
            installed.ok()?;
        }
        self.heap_end.store(base + class.span(), Ordering::Release);
        reg.bins[class.index()] += 1;
        // SAFETY: new bin, owned by `st`.
        unsafe { st.avail[class.index()].push_front(at, ListKind::Avail) };
        Some(at)
    }

    fn lookup_bin(&self, p: usize) -> Option<&BinHeader> {
        let base = self.heap_base.load(Ordering::Acquire);
        let end = self.heap_end.load(Ordering::Acquire);
        if base == 0 || p < base || p >= end {
            return None;
        }
        let v = self.revlookup.get((p - base) / MIN_BIN_SPAN);
        // SAFETY: installed entries point at live headers; bins are never destroyed.
        (v != 0).then(|| unsafe { &*(v as *const BinHeader) })
    }

    fn in_reserved_heap(&self, p: usize) -> bool {
        let base = self.heap_base.load(Ordering::Acquire);
        base != 0 && p >= base && p - base < self.reserve
    }

    // ---- owner-side bin operations -------------------------------------------

    /// Applies pending remote frees of a bin owned by `st`.
    unsafe fn drain_bin(&self, st: &mut ThreadHeapState, b: *mut BinHeader) -> usize {
        let Some(taken) = (*b).take_marks() else {
            return 0;
        };
        let mut n = 0;
        for (cell, granule) in taken.iter() {
            n += 1;
            if (*b).drain_one(cell, granule) != NativeFree::Freed {
                let ptr = (*b).base + ((cell as usize) << (*b).shift()) + granule as usize * 16;
                self.report(ViolationKind::DoubleFree, ptr, Self::context_of(&*b), true);
            }
        }
        self.counters.drained.fetch_add(n as u64, Ordering::Relaxed);
        if matches!((*b).local().list, ListKind::Avail | ListKind::Full) {
            st.refile(b);
        }
        n
    }

    unsafe fn try_alloc_in(&self, st: &mut ThreadHeapState, b: *mut BinHeader, rounded: usize) -> Option<usize> {
        let h = &*b;
        let addr = if h.is_fixed() {
            h.local().bitmap.alloc().map(|i| h.base + ((i as usize) << h.shift()))
        } else {
            h.var().alloc(rounded).ok().flatten().map(|off| h.base + off)
        };
        if !h.has_space() {
            st.refile(b);
        }
        addr
    }

    /// Takes an orphan of `class` worth adopting into `st`, drained.
    unsafe fn adopt(&self, st: &mut ThreadHeapState, class: ClassId, any: bool) -> Option<*mut BinHeader> {
        let b = {
            let mut orphans = self.orphans.lock();
            let list = &mut orphans.lists[class.index()];
            let mut cur = list.head;
            while !cur.is_null() {
                if any || (*cur).has_space() || (*cur).remote_count.load(Ordering::Acquire) != 0 {
                    break;
                }
                cur = BinList::next(cur);
            }
            if cur.is_null() {
                return None;
            }
            list.remove(cur);
            cur
        };
        (*b).set_owner(st.id);
        st.avail[class.index()].push_back(b, ListKind::Avail);
        self.counters.adopted.fetch_add(1, Ordering::Relaxed);
        self.drain_bin(st, b);
        st.refile(b);
        Some(b)
    }

    fn bin_alloc(&self, st: &mut ThreadHeapState, class: ClassId, rounded: usize) -> Option<usize> {
        let ci = class.index();
        // SAFETY: every bin on `st`'s lists is owned by this thread.
        unsafe {
            let mut b = st.avail[ci].head;
            while !b.is_null() {
                let next = BinList::next(b);
                self.drain_bin(st, b);
                if let Some(a) = self.try_alloc_in(st, b, rounded) {
                    return Some(a);
                }
                b = next;
            }
            let mut b = st.full[ci].head;
            while !b.is_null() {
                let next = BinList::next(b);
                if (*b).remote_count.load(Ordering::Acquire) != 0 {
                    self.drain_bin(st, b);
                    if (*b).local().list == ListKind::Avail {
                        if let Some(a) = self.try_alloc_in(st, b, rounded) {
                            return Some(a);
                        }
                    }
                }
                b = next;
            }
            while let Some(b) = self.adopt(st, class, false) {
                if (*b).local().list == ListKind::Avail {
                    if let Some(a) = self.try_alloc_in(st, b, rounded) {
                        return Some(a);
                    }
                }
            }
            let b = self.create_bin(st, class)?;
            self.try_alloc_in(st, b, rounded)
        }
    }

    unsafe fn owner_free(&self, st: &mut ThreadHeapState, b: *mut BinHeader, p: usize) {
        let h = &*b;
        match h.native_free(p - h.base) {
            NativeFree::Freed => st.refile(b),
            NativeFree::DoubleFree => self.report(ViolationKind::DoubleFree, p, Self::context_of(h), false),
            NativeFree::InvalidFree => self.report(ViolationKind::InvalidFree, p, Self::context_of(h), false),
        }
        self.drain_bin(st, b);
    }

    /// Records a free from a thread that does not own `b`. Returns whether
    /// a mark was set.
    fn remote_free(&self, b: &BinHeader, p: usize) -> bool {
        let ctx = Self::context_of(b);
        match b.remote_target(p - b.base) {
            None => self.report(ViolationKind::InvalidFree, p, ctx, false),
            Some((cell, granule)) => match b.mark_remote(cell, granule) {
                Mark::Marked => {
                    self.counters.remote_marks.fetch_add(1, Ordering::Relaxed);
                    return true;
                }
                Mark::AlreadyMarked => self.report(ViolationKind::DoubleFree, p, ctx, false),
            },
        }
        false
    }

    // ---- entry points ----------------------------------------------------------

    /// Returns (address, known zero).
    pub(crate) fn allocate(&self, size: usize, anchor: Anchor) -> Option<(usize, bool)> {
        let route = classify(size).ok()?;
        match route {
            SizeClassRoute::External { rounded_size } => {
                let a = self.ext.lock().alloc(&self.backing, rounded_size).ok()?;
                Some((a.base, !a.reused))
            }
            _ => {
                let class = route.class().expect("bin route");
                let rounded = route.rounded_size();
                self.with_state(anchor, |st| self.bin_alloc(st, class, rounded))
                    .flatten()
                    .map(|a| (a, false))
            }
        }
    }

    pub(crate) fn deallocate(&self, p: usize) {
        if p == 0 {
            return;
        }
        if let Some(b) = self.lookup_bin(p) {
            let me = current_thread_id();
            if b.owner.load(Ordering::Acquire) == me {
                let bp = b as *const BinHeader as *mut BinHeader;
                // SAFETY: this thread owns the bin.
                let done = local::with_existing(self.owner_key(), |st| unsafe { self.owner_free(st, bp, p) });
                if done.is_some() {
                    return;
                }
            }
            self.remote_free(b, p);
            return;
        }
        if self.in_reserved_heap(p) {
            self.report(ViolationKind::InvalidFree, p, Context::Unknown, false);
            return;
        }
        let outcome = self.ext.lock().free(&self.backing, p);
        match outcome {
            ExtFree::Freed => {}
            ExtFree::DoubleFree => self.report(ViolationKind::DoubleFree, p, Context::External, false),
            ExtFree::InvalidFree => {
                let ctx = if self.ext.lock().containing(p).is_some() {
                    Context::External
                } else {
                    Context::Unknown
                };
                self.report(ViolationKind::InvalidFree, p, ctx, false);
            }
        }
    }

    /// Identity rule: same fixed class, or the same variable class when the
    /// block already holds the request with less than one cell of slack.
    fn fits_in_place(class: ClassId, old: usize, route: SizeClassRoute) -> bool {
        match route {
            SizeClassRoute::Fixed { cell_size } => class.is_fixed() && class.cell_size() == cell_size,
            SizeClassRoute::Variable { cell_size, rounded_size } => {
                !class.is_fixed() && class.cell_size() == cell_size && rounded_size <= old && old - rounded_size < cell_size
            }
            SizeClassRoute::External { .. } => false,
        }
    }

    /// Allocates for `route` into `st` without touching the thread table.
    fn alloc_with(&self, st: &mut ThreadHeapState, route: SizeClassRoute) -> Option<usize> {
        match route {
            SizeClassRoute::External { rounded_size } => {
                self.ext.lock().alloc(&self.backing, rounded_size).ok().map(|a| a.base)
            }
            _ => self.bin_alloc(st, route.class().expect("bin route"), route.rounded_size()),
        }
    }

    unsafe fn owner_realloc(
        &self,
        st: &mut ThreadHeapState,
        b: *mut BinHeader,
        p: usize,
        size: usize,
        route: SizeClassRoute,
    ) -> Option<usize> {
        // Pending remote frees first, so a remotely freed block is seen as free.
        self.drain_bin(st, b);
        let h = &*b;
        let old = match h.owned_block_size(p - h.base) {
            Ok(old) => old,
            Err(free) => {
                let kind = match free {
                    NativeFree::DoubleFree => ViolationKind::DoubleFree,
                    _ => ViolationKind::InvalidFree,
                };
                self.report(kind, p, Self::context_of(h), false);
                return None;
            }
        };
        if Self::fits_in_place(h.class, old, route) {
            return Some(p);
        }
        let fresh = self.alloc_with(st, route)?;
        ptr::copy_nonoverlapping(p as *const u8, fresh as *mut u8, old.min(size));
        self.owner_free(st, b, p);
        Some(fresh)
    }

    /// Moves a block of a bin this thread does not own. The old block is
    /// released as a remote free once its contents are copied.
    fn remote_realloc(&self, b: &BinHeader, p: usize, size: usize, anchor: Anchor) -> Option<usize> {
        let ctx = Self::context_of(b);
        let Some((cell, _)) = b.remote_target(p - b.base) else {
            self.report(ViolationKind::InvalidFree, p, ctx, false);
            return None;
        };
        if b.is_marked(cell) {
            self.report(ViolationKind::DoubleFree, p, ctx, false);
            return None;
        }
        let old = match b.cells() {
            None => b.cell_size(),
            Some(cells) => {
                if cells.load(cell).tag() != CellTag::UsedHead {
                    self.report(ViolationKind::DoubleFree, p, ctx, false);
                    return None;
                }
                let mut meta = VarBinMeta::new(b.cell_size());
                match VarBin::new(&mut meta, cells).block_size(cell) {
                    Ok(s) => s,
                    Err(_) => {
                        self.report(ViolationKind::InvalidFree, p, ctx, false);
                        return None;
                    }
                }
            }
        };
        let (fresh, _) = self.allocate(size, anchor)?;
        // SAFETY: `old` comes from the bin's structures, `fresh` is new.
        unsafe { ptr::copy_nonoverlapping(p as *const u8, fresh as *mut u8, old.min(size)) };
        if self.remote_free(b, p) {
            Some(fresh)
        } else {
            self.deallocate(fresh);
            None
        }
    }

    pub(crate) fn reallocate(&self, p: usize, size: usize, anchor: Anchor) -> Option<usize> {
        if p == 0 {
            return self.allocate(size, anchor).map(|(a, _)| a);
        }
        let route = classify(size).ok()?;
        if let Some(b) = self.lookup_bin(p) {
            if b.owner.load(Ordering::Acquire) == current_thread_id() {
                let bp = b as *const BinHeader as *mut BinHeader;
                // SAFETY: this thread owns the bin.
                let done = local::with_existing(self.owner_key(), |st| unsafe {
                    self.owner_realloc(st, bp, p, size, route)
                });
                if let Some(r) = done {
                    return r;
                }
            }
            return self.remote_realloc(b, p, size, anchor);
        }
        if self.in_reserved_heap(p) {
            self.report(ViolationKind::InvalidFree, p, Context::Unknown, false);
            return None;
        }
        let info = self.ext.lock().lookup(p);
        let old = match info {
            Some(e) if e.state == ExtState::InUse => e.size,
            Some(_) => {
                self.report(ViolationKind::DoubleFree, p, Context::External, false);
                return None;
            }
            None => {
                let ctx = if self.ext.lock().containing(p).is_some() {
                    Context::External
                } else {
                    Context::Unknown
                };
                self.report(ViolationKind::InvalidFree, p, ctx, false);
                return None;
            }
        };
        if let SizeClassRoute::External { rounded_size } = route {
            let r = self.ext.lock().realloc(&self.backing, p, rounded_size);
            return match r {
                Ok(a) => Some(a),
                Err(ExtError::Violation(_)) => {
                    self.report(ViolationKind::InvalidFree, p, Context::External, false);
                    None
                }
                Err(ExtError::Backing(_)) => None,
            };
        }
        let (fresh, _) = self.allocate(size, anchor)?;
        // SAFETY: the mapping holds `old` bytes; `fresh` is new.
        unsafe { ptr::copy_nonoverlapping(p as *const u8, fresh as *mut u8, old.min(size)) };
        self.deallocate(p);
        Some(fresh)
    }

    pub(crate) fn zero_allocate(&self, count: usize, size: usize, anchor: Anchor) -> Option<usize> {
        let total = count.checked_mul(size)?;
        let (a, zeroed) = self.allocate(total, anchor)?;
        if !zeroed {
            // SAFETY: the block holds at least `total` bytes.
            unsafe { ptr::write_bytes(a as *mut u8, 0, total) };
        }
        Some(a)
    }

    /// # Safety
    /// No other thread may be mutating the bin that holds `p`.
    pub(crate) unsafe fn inspect(&self, p: usize) -> Option<BlockInfo> {
        if let Some(b) = self.lookup_bin(p) {
            let off = p - b.base;
            if b.is_fixed() {
                let idx = off >> b.shift();
                return Some(BlockInfo {
                    route: RouteKind::Fixed,
                    class: Some(b.class),
                    start: b.base + (idx << b.shift()),
                    size: b.cell_size(),
                    live: !b.local().bitmap.is_free(idx as u32),
                });
            }
            let mut meta = VarBinMeta::new(b.cell_size());
            let info = VarBin::new(&mut meta, b.cells()?).locate(off)?;
            return Some(BlockInfo {
                route: RouteKind::Variable,
                class: Some(b.class),
                start: b.base + info.start,
                size: info.size,
                live: info.used,
            });
        }
        let ext = self.ext.lock();
        let e = ext.lookup(p).or_else(|| ext.containing(p))?;
        Some(BlockInfo {
            route: RouteKind::External,
            class: None,
            start: e.base,
            size: e.size,
            live: e.state == ExtState::InUse,
        })
    }

    pub(crate) fn drain_thread(&self) -> usize {
        local::with_existing(self.owner_key(), |st| {
            let mut n = 0;
            for class in 0..CLASS_COUNT {
                for list in [st.avail[class], st.full[class]] {
                    let mut b = list.head;
                    while !b.is_null() {
                        // SAFETY: bins on this thread's lists.
                        unsafe {
                            let next = BinList::next(b);
                            n += self.drain_bin(st, b);
                            b = next;
                        }
                    }
                }
            }
            n
        })
        .unwrap_or(0)
    }

    pub(crate) fn collect_orphans(&self, anchor: Anchor) -> usize {
        self.with_state(anchor, |st| {
            let mut n = 0;
            for class in ClassId::all() {
                // SAFETY: adopted bins join `st`.
                while unsafe { self.adopt(st, class, true) }.is_some() {
                    n += 1;
                }
            }
            n
        })
        .unwrap_or(0)
    }

    pub(crate) fn stats(&self) -> HeapStats {
        let page = self.backing.page_size();
        let (reserved, committed, arena_pages, bins, states) = {
            let reg = self.registry.lock();
            let (r, c) = reg
                .heap
                .as_ref()
                .map_or((0, 0), |h| (h.reserved_len, h.committed_watermark));
            (r, c, reg.arena.pages(), reg.bins, reg.states)
        };
        let (ext_stats, ext_pages) = {
            let ext = self.ext.lock();
            (ext.stats(), ext.meta_pages())
        };
        let orphaned_bins = self.orphans.lock().lists.iter().map(|l| l.len).sum();
        HeapStats {
            reserved,
            committed,
            metadata_bytes: (arena_pages + ext_pages) * page,
            bins,
            orphaned_bins,
            thread_states: states,
            external: ext_stats,
            double_frees: self.counters.double_free.load(Ordering::Relaxed),
            invalid_frees: self.counters.invalid_free.load(Ordering::Relaxed),
            deferred: self.counters.deferred.load(Ordering::Relaxed),
            remote_marks: self.counters.remote_marks.load(Ordering::Relaxed),
            drained: self.counters.drained.load(Ordering::Relaxed),
            adopted: self.counters.adopted.load(Ordering::Relaxed),
        }
    }

    pub(crate) fn audit(&self) -> Result<AuditReport, AuditError> {
        // Holding the registry lock keeps new states from appearing.
        let reg = self.registry.lock();
        let own = local::is_registered(self.owner_key()) as usize;
        if self.registered.load(Ordering::Acquire) > own {
            return Err(AuditError::Busy);
        }
        let mut report = AuditReport::default();
        let mut last = 0usize;
        let mut failure = None;
        let mut listed = [0usize; 4];
        self.revlookup.for_each(|_, v| {
            if v == last || failure.is_some() {
                return;
            }
            last = v;
            // SAFETY: quiescent heap; headers are live.
            let b = unsafe { &*(v as *const BinHeader) };
            report.bins += 1;
            let fail = |detail: String| AuditError::Bin { base: b.base, class: b.class, detail };
            if !b.marks_consistent() {
                failure = Some(fail("remote count disagrees with marks".into()));
                return;
            }
            report.pending_marks += b.remote_count.load(Ordering::Acquire) as usize;
            // SAFETY: quiescent heap.
            unsafe {
                let l = b.local();
                listed[match l.list {
                    ListKind::None => 0,
                    ListKind::Avail => 1,
                    ListKind::Full => 2,
                    ListKind::Orphan => 3,
                }] += 1;
                if b.is_fixed() {
                    if let Err(e) = l.bitmap.check() {
                        failure = Some(fail(e));
                        return;
                    }
                    report.live_fixed_blocks += CELLS_PER_BIN - l.bitmap.free_cnt() as usize;
                } else {
                    let v = b.var();
                    if let Err(e) = v.check() {
                        failure = Some(fail(e));
                        return;
                    }
                    report.live_variable_blocks += v.blocks().map_or(0, |bl| bl.iter().filter(|x| x.used).count());
                }
                if b.is_pristine() {
                    report.pristine_bins += 1;
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if listed[0] != 0 {
            return Err(AuditError::Lists(format!("{} bins on no list", listed[0])));
        }
        let total: usize = reg.bins.iter().sum();
        if report.bins != total {
            return Err(AuditError::Lists(format!("{} bins reachable, {total} created", report.bins)));
        }
        let orphaned: usize = self.orphans.lock().lists.iter().map(|l| l.len).sum();
        if orphaned != listed[3] {
            return Err(AuditError::Lists(format!("orphan lists hold {orphaned}, bins say {}", listed[3])));
        }
        drop(reg);
        let ext = self.ext.lock();
        ext.check().map_err(AuditError::External)?;
        report.external_live = ext.stats().live;
        Ok(report)
    }
}

impl<B: Backing> Drop for Shared<B> {
    fn drop(&mut self) {
        let reg = self.registry.get_mut();
        // SAFETY: no handle or registered state remains.
        unsafe {
            self.ext.get_mut().release_all(&self.backing);
            if let Some(h) = reg.heap.take() {
                self.backing.release_heap(h.base, h.reserved_len);
            }
            reg.arena.release_all(&self.backing);
        }
    }
}

unsafe fn release_counted<B: Backing>(owner: *const (), st: *mut ThreadHeapState) {
    let shared = owner as *const Shared<B>;
    (*shared).release_state(st);
    (*shared).registered.fetch_sub(1, Ordering::AcqRel);
    Arc::decrement_strong_count(shared);
}

unsafe fn release_static<B: Backing>(owner: *const (), st: *mut ThreadHeapState) {
    let shared = owner as *const Shared<B>;
    (*shared).release_state(st);
    (*shared).registered.fetch_sub(1, Ordering::AcqRel);
}

/// An allocator instance with out-of-band metadata.
///
/// Clones share the instance. Each thread that allocates gets its own bins;
/// frees from other threads are recorded and applied by the owner later.
pub struct Heap<B: Backing + 'static = PlatformBacking> {
    shared: Arc<Shared<B>>,
}

impl<B: Backing + 'static> Clone for Heap<B> {
    fn clone(&self) -> Self {
        Heap {
            shared: self.shared.clone(),
        }
    }
}

impl Heap<PlatformBacking> {
    /// Instance over platform mappings, policy from the environment.
    pub fn new() -> Heap<PlatformBacking> {
        Heap::with_config(PlatformBacking::new(), HeapConfig::default())
    }
}

impl Default for Heap<PlatformBacking> {
    fn default() -> Self {
        Heap::new()
    }
}

impl<B: Backing + 'static> Heap<B> {
    pub fn with_config(backing: B, config: HeapConfig) -> Heap<B> {
        let shared = Shared::new(backing, config.reserve, config.cache, config.diagnostics);
        shared.set_policy(config.policy);
        *shared.hook.lock() = config.hook;
        Heap {
            shared: Arc::new(shared),
        }
    }

    pub fn backing(&self) -> &B {
        &self.shared.backing
    }

    pub fn cache_caps(&self) -> CacheCaps {
        self.shared.cache
    }

    pub fn policy(&self) -> ViolationPolicy {
        self.shared.policy()
    }

    pub fn set_policy(&self, policy: ViolationPolicy) {
        self.shared.set_policy(policy);
    }

    pub fn set_hook(&self, hook: Option<ViolationHook>) {
        *self.shared.hook.lock() = hook;
    }

    pub fn set_diagnostics(&self, on: bool) {
        self.shared.diagnostics.store(on, Ordering::Relaxed);
    }

    /// A 16-byte aligned block of at least `size` bytes.
    pub fn allocate(&self, size: usize) -> Option<NonNull<u8>> {
        let (a, _) = self.shared.allocate(size, Anchor::Counted)?;
        NonNull::new(a as *mut u8)
    }

    /// Frees `ptr`. Invalid and repeated frees are reported and ignored.
    ///
    /// # Safety
    /// If `ptr` is a live block of this heap, the caller gives it up.
    pub unsafe fn deallocate(&self, ptr: *mut u8) {
        self.shared.deallocate(ptr as usize);
    }

    /// Resizes `ptr` (null acts as [`Heap::allocate`]). On failure the
    /// original block is untouched.
    ///
    /// # Safety
    /// As for [`Heap::deallocate`] when the block moves.
    pub unsafe fn reallocate(&self, ptr: *mut u8, size: usize) -> Option<NonNull<u8>> {
        let a = self.shared.reallocate(ptr as usize, size, Anchor::Counted)?;
        NonNull::new(a as *mut u8)
    }

    /// `count * size` zeroed bytes; `None` on overflow.
    pub fn zero_allocate(&self, count: usize, size: usize) -> Option<NonNull<u8>> {
        let a = self.shared.zero_allocate(count, size, Anchor::Counted)?;
        NonNull::new(a as *mut u8)
    }

    /// The block containing `ptr`, as the allocator's metadata sees it.
    ///
    /// # Safety
    /// No other thread may be freeing into or allocating from the bin that
    /// holds `ptr` during the call.
    pub unsafe fn inspect(&self, ptr: *const u8) -> Option<BlockInfo> {
        self.shared.inspect(ptr as usize)
    }

    pub fn stats(&self) -> HeapStats {
        self.shared.stats()
    }

    /// Checks every bin, the bin lists and the external table. Fails with
    /// [`AuditError::Busy`] while another thread holds state in this heap.
    pub fn audit(&self) -> Result<AuditReport, AuditError> {
        self.shared.audit()
    }

    /// Applies pending remote frees to the calling thread's bins.
    pub fn drain_thread(&self) -> usize {
        self.shared.drain_thread()
    }

    /// Adopts every orphaned bin into the calling thread, applying their
    /// pending remote frees. Returns the number adopted.
    pub fn collect_orphans(&self) -> usize {
        self.shared.collect_orphans(Anchor::Counted)
    }

    /// Orphans the calling thread's bins in this heap.
    pub fn release_thread(&self) -> bool {
        local::release(self.shared.owner_key())
    }
}

impl<B: Backing + 'static> Drop for Heap<B> {
    fn drop(&mut self) {
        // The last handle takes the dropping thread's state with it; states
        // of other threads keep the instance alive until those threads exit.
        let registered = self.shared.registered.load(Ordering::Acquire);
        if Arc::strong_count(&self.shared) == registered + 1 {
            local::release(self.shared.owner_key());
        }
    }
}

impl<B: Backing + 'static> fmt::Debug for Heap<B> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Heap").field("stats", &self.stats()).finish()
    }
}
