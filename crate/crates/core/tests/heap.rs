use std::sync::{Arc, Mutex};

use oobheap::{
    ArenaBacking, Context, Heap, HeapConfig, PlatformBacking, PolicyAction, RouteKind, Violation, ViolationKind,
    ViolationPolicy,
};

fn quiet(policy: PolicyAction) -> (Heap, Arc<Mutex<Vec<Violation>>>) {
    let seen = Arc::new(Mutex::new(Vec::new()));
    let sink = seen.clone();
    let heap = Heap::with_config(
        PlatformBacking::new(),
        HeapConfig {
            policy: ViolationPolicy::uniform(policy),
            diagnostics: false,
            hook: Some(Arc::new(move |v: &Violation| sink.lock().unwrap().push(*v))),
            ..HeapConfig::default()
        },
    );
    (heap, seen)
}

fn fill(p: *mut u8, len: usize, seed: u8) {
    for i in 0..len {
        unsafe { *p.add(i) = seed.wrapping_add(i as u8) };
    }
}

fn verify(p: *const u8, len: usize, seed: u8) -> bool {
    (0..len).all(|i| unsafe { *p.add(i) } == seed.wrapping_add(i as u8))
}

#[test]
fn routes_and_alignment() {
    let (heap, seen) = quiet(PolicyAction::Report);
    for (size, route) in [
        (1, RouteKind::Fixed),
        (512, RouteKind::Fixed),
        (513, RouteKind::Variable),
        (131056, RouteKind::Variable),
        (131072, RouteKind::External),
        (1 << 22, RouteKind::External),
    ] {
        let p = heap.allocate(size).unwrap().as_ptr();
        assert_eq!(p as usize % 16, 0);
        let info = unsafe { heap.inspect(p) }.unwrap();
        assert_eq!(info.route, route, "size {size}");
        assert!(info.live && info.size >= size && info.start == p as usize);
        fill(p, size, size as u8);
        assert!(verify(p, size, size as u8));
        unsafe { heap.deallocate(p) };
        if route != RouteKind::External {
            assert!(!unsafe { heap.inspect(p) }.unwrap().live);
        }
    }
    assert!(seen.lock().unwrap().is_empty());
    let report = heap.audit().unwrap();
    assert!(report.all_pristine(), "{report:?}");
}

#[test]
fn blocks_are_disjoint() {
    let (heap, _) = quiet(PolicyAction::Report);
    let sizes = [16usize, 40, 100, 300, 512, 600, 1500, 5000, 20000, 70000];
    let mut live = Vec::new();
    for round in 0..20u8 {
        for &s in &sizes {
            let p = heap.allocate(s).unwrap().as_ptr();
            fill(p, s, round ^ s as u8);
            live.push((p, s, round ^ s as u8));
        }
    }
    let mut spans: Vec<(usize, usize)> = live.iter().map(|&(p, s, _)| (p as usize, p as usize + s)).collect();
    spans.sort();
    assert!(spans.windows(2).all(|w| w[0].1 <= w[1].0));
    for &(p, s, seed) in &live {
        assert!(verify(p, s, seed));
        unsafe { heap.deallocate(p) };
    }
    assert!(heap.audit().unwrap().all_pristine());
}

#[test]
fn double_free_each_route() {
    let (heap, seen) = quiet(PolicyAction::Report);
    let expect = [
        (64, Context::Fixed),
        (2000, Context::Variable),
        (200000, Context::External),
    ];
    for (size, ctx) in expect {
        let keep = heap.allocate(size).unwrap();
        let p = heap.allocate(size).unwrap().as_ptr();
        unsafe {
            heap.deallocate(p);
            heap.deallocate(p);
        }
        let v = seen.lock().unwrap().pop().expect("violation reported");
        assert_eq!(v.ptr, p as usize);
        assert_eq!(v.context, ctx);
        assert!(!v.deferred);
        assert_eq!(v.kind, ViolationKind::DoubleFree, "{size}");
        unsafe { heap.deallocate(keep.as_ptr()) };
    }
    assert_eq!(heap.stats().double_frees, 3);
    assert!(heap.audit().unwrap().all_pristine());
}

#[test]
fn invalid_frees() {
    let (heap, seen) = quiet(PolicyAction::Ignore);
    let f = heap.allocate(32).unwrap().as_ptr();
    let v = heap.allocate(4000).unwrap().as_ptr();
    let e = heap.allocate(300000).unwrap().as_ptr();
    let mut local = 0u64;
    unsafe {
        heap.deallocate(f.add(8));
        heap.deallocate(v.add(16));
        heap.deallocate(e.add(4096));
        heap.deallocate(&mut local as *mut u64 as *mut u8);
    }
    let got: Vec<(ViolationKind, Context)> = seen.lock().unwrap().iter().map(|v| (v.kind, v.context)).collect();
    assert_eq!(
        got,
        vec![
            (ViolationKind::InvalidFree, Context::Fixed),
            (ViolationKind::InvalidFree, Context::Variable),
            (ViolationKind::InvalidFree, Context::External),
            (ViolationKind::InvalidFree, Context::Unknown),
        ]
    );
    // The blocks survived the bad frees.
    unsafe {
        assert!(heap.inspect(f).unwrap().live);
        assert!(heap.inspect(v).unwrap().live);
        assert!(heap.inspect(e).unwrap().live);
        heap.deallocate(f);
        heap.deallocate(v);
        heap.deallocate(e);
    }
    assert_eq!(heap.stats().invalid_frees, 4);
    assert!(heap.audit().unwrap().all_pristine());
}

#[test]
fn null_free_is_ignored() {
    let (heap, seen) = quiet(PolicyAction::Report);
    unsafe { heap.deallocate(std::ptr::null_mut()) };
    assert!(seen.lock().unwrap().is_empty());
}

#[test]
fn reallocate_preserves_contents() {
    let (heap, seen) = quiet(PolicyAction::Report);
    let mut p = heap.allocate(10).unwrap().as_ptr();
    let mut len = 10;
    fill(p, len, 3);
    for next in [12, 200, 700, 690, 9000, 140000, 600000, 300, 16, 1] {
        let q = unsafe { heap.reallocate(p, next) }.unwrap().as_ptr();
        let kept = len.min(next);
        assert!(verify(q, kept, 3), "{len} -> {next}");
        fill(q, next, 3);
        p = q;
        len = next;
    }
    unsafe { heap.deallocate(p) };
    assert!(seen.lock().unwrap().is_empty());
    assert!(heap.audit().unwrap().all_pristine());
}

#[test]
fn reallocate_in_place_rules() {
    let (heap, _) = quiet(PolicyAction::Report);
    unsafe {
        let p = heap.allocate(20).unwrap().as_ptr();
        assert_eq!(heap.reallocate(p, 32).unwrap().as_ptr(), p);
        let q = heap.reallocate(p, 33).unwrap().as_ptr();
        assert_ne!(q, p);
        heap.deallocate(q);

        let v = heap.allocate(1000).unwrap().as_ptr();
        assert_eq!(heap.reallocate(v, 990).unwrap().as_ptr(), v);
        heap.deallocate(v);

        let e = heap.allocate(200000).unwrap().as_ptr();
        fill(e, 200000, 9);
        let e2 = heap.reallocate(e, 900000).unwrap().as_ptr();
        assert!(verify(e2, 200000, 9));
        heap.deallocate(e2);
    }
    assert!(heap.audit().unwrap().all_pristine());
}

#[test]
fn reallocate_freed_pointer_fails() {
    let (heap, seen) = quiet(PolicyAction::Report);
    let keep = heap.allocate(48).unwrap();
    let p = heap.allocate(48).unwrap().as_ptr();
    unsafe {
        heap.deallocate(p);
        assert!(heap.reallocate(p, 100).is_none());
        heap.deallocate(keep.as_ptr());
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn zero_allocate_zeroes_reused_blocks() {
    let (heap, _) = quiet(PolicyAction::Report);
    for size in [64usize, 3000, 250000] {
        let p = heap.allocate(size).unwrap().as_ptr();
        unsafe {
            std::ptr::write_bytes(p, 0xAB, size);
            heap.deallocate(p);
        }
        let z = heap.zero_allocate(size / 8, 8).unwrap().as_ptr();
        assert!((0..size).all(|i| unsafe { *z.add(i) } == 0));
        unsafe { heap.deallocate(z) };
    }
    assert!(heap.zero_allocate(usize::MAX / 2, 4).is_none());
}

#[test]
fn oversize_requests_fail() {
    let (heap, _) = quiet(PolicyAction::Report);
    assert!(heap.allocate(1 << 50).is_none());
}

#[test]
fn metadata_stays_out_of_band() {
    // With an instrumented backing, every metadata page is a grant and the
    // heap range holds user blocks only.
    let heap = Heap::with_config(
        ArenaBacking::new(1 << 30),
        HeapConfig {
            reserve: 1 << 30,
            diagnostics: false,
            ..HeapConfig::default()
        },
    );
    let mut ptrs = Vec::new();
    for i in 0..3000usize {
        let size = 16 + (i * 37) % 3000;
        let p = heap.allocate(size).unwrap().as_ptr();
        unsafe { std::ptr::write_bytes(p, 0xFF, size) };
        ptrs.push(p);
    }
    heap.audit().unwrap();
    for p in ptrs {
        unsafe { heap.deallocate(p) };
    }
    assert!(heap.audit().unwrap().all_pristine());
    let stats = heap.stats();
    assert!(stats.metadata_bytes > 0);
    assert!(stats.metadata_bytes * 20 < stats.committed);
}

#[test]
fn release_thread_orphans_and_readopts() {
    let (heap, _) = quiet(PolicyAction::Report);
    let p = heap.allocate(128).unwrap().as_ptr();
    assert!(heap.release_thread());
    assert_eq!(heap.stats().orphaned_bins, 1);
    // Freed while the bin has no owner: recorded as a mark.
    unsafe { heap.deallocate(p) };
    assert_eq!(heap.stats().remote_marks, 1);
    assert_eq!(heap.collect_orphans(), 1);
    let s = heap.stats();
    assert_eq!((s.orphaned_bins, s.drained), (0, 1));
    assert!(heap.audit().unwrap().all_pristine());
}

#[test]
fn hook_sees_every_policy_mode() {
    let (heap, seen) = quiet(PolicyAction::Ignore);
    let keep = heap.allocate(16).unwrap();
    let p = heap.allocate(16).unwrap().as_ptr();
    unsafe {
        heap.deallocate(p);
        heap.deallocate(p);
    }
    heap.set_policy(ViolationPolicy::uniform(PolicyAction::Report));
    unsafe { heap.deallocate(p) };
    assert_eq!(seen.lock().unwrap().len(), 2);
    unsafe { heap.deallocate(keep.as_ptr()) };
}

#[test]
fn diagnostic_line_format() {
    let v = Violation {
        kind: ViolationKind::DoubleFree,
        ptr: 0x1000,
        context: Context::Variable,
        deferred: true,
    };
    assert_eq!(v.to_string(), "oobheap: double-free ptr=0x1000 ctx=variable deferred=1");
}

#[test]
fn many_heaps_per_thread() {
    // More heaps than thread-local slots: evicted states orphan their bins.
    let heaps: Vec<Heap> = (0..12).map(|_| quiet(PolicyAction::Report).0).collect();
    let ptrs: Vec<_> = heaps.iter().map(|h| h.allocate(100).unwrap().as_ptr()).collect();
    for (h, p) in heaps.iter().zip(&ptrs) {
        unsafe { h.deallocate(*p) };
    }
    for h in &heaps {
        h.collect_orphans();
        assert_eq!(h.stats().violations(), 0);
        assert!(h.audit().unwrap().all_pristine());
    }
}
