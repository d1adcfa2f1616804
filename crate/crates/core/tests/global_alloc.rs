//! The whole test binary, harness included, runs on the process allocator.

use std::alloc::{alloc, dealloc, Layout};
use std::collections::{BTreeMap, HashMap};
use std::thread;

use oobheap::OobHeap;

#[global_allocator]
static GLOBAL: OobHeap = OobHeap::new();

#[test]
fn collections() {
    let mut map = HashMap::new();
    let mut tree = BTreeMap::new();
    for i in 0..50_000u64 {
        map.insert(i, format!("value-{i}"));
        tree.insert(i.wrapping_mul(2654435761) % 100_000, vec![i as u8; (i % 300) as usize]);
    }
    for i in (0..50_000u64).step_by(3) {
        map.remove(&i);
    }
    assert_eq!(map.get(&1).map(String::as_str), Some("value-1"));
    let big: Vec<u64> = (0..1_000_000).collect();
    assert_eq!(big.iter().sum::<u64>(), 499_999_500_000);
    drop(tree);
}

#[test]
fn threads_share_the_instance() {
    let handles: Vec<_> = (0..4)
        .map(|t| {
            thread::spawn(move || {
                let mut v: Vec<String> = Vec::new();
                for i in 0..20_000 {
                    v.push("x".repeat((i * (t + 1)) % 700));
                    if i % 4 == 0 {
                        v.swap_remove(i % v.len());
                    }
                }
                v
            })
        })
        .collect();
    let results: Vec<Vec<String>> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    // Freed here, by a thread that owns none of the blocks.
    drop(results);
    assert_eq!(GLOBAL.stats().violations(), 0);
}

#[test]
fn over_aligned_layouts() {
    for (size, align) in [(24, 32), (100, 128), (512, 512), (600, 64), (8, 4096), (5000, 4096)] {
        let layout = Layout::from_size_align(size, align).unwrap();
        unsafe {
            let p = alloc(layout);
            assert!(!p.is_null());
            assert_eq!(p as usize % align, 0, "{size}/{align}");
            std::ptr::write_bytes(p, 0x5A, size);
            dealloc(p, layout);
        }
    }
    let huge = Layout::from_size_align(64, 1 << 16).unwrap();
    assert!(unsafe { alloc(huge) }.is_null());
}

#[test]
fn aligned_realloc_keeps_alignment() {
    let layout = Layout::from_size_align(40, 64).unwrap();
    unsafe {
        let p = alloc(layout);
        std::ptr::write_bytes(p, 7, 40);
        let q = std::alloc::realloc(p, layout, 4000);
        assert_eq!(q as usize % 64, 0);
        assert!((0..40).all(|i| *q.add(i) == 7));
        dealloc(q, Layout::from_size_align(4000, 64).unwrap());
    }
}
