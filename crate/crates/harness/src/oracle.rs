//! Shadow model of a correct allocator.
//!
//! Tracks live blocks as address intervals and the violations a replay must
//! produce. It sees only trace events, returned addresses and reported
//! violations; its one shared piece is the size-class routing function.

use std::collections::{BTreeMap, HashMap};

use oobheap::config::classify;
use oobheap::{RouteKind, Violation, ViolationKind};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShadowBlock {
    pub id: u64,
    pub lo: usize,
    pub hi: usize,
    pub requested: usize,
    pub route: RouteKind,
    pub owner: u32,
}

/// What the allocator handed back for a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observed {
    pub addr: usize,
    pub route: RouteKind,
    /// Block size as the allocator's introspection reports it.
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("id {0} is already live")]
    AlreadyLive(u64),
    #[error("id {id}: address {addr:#x} is not 16-byte aligned")]
    Misaligned { id: u64, addr: usize },
    #[error("id {id}: request of {size} bytes routed {observed}, expected {expected}")]
    Route {
        id: u64,
        size: usize,
        expected: RouteKind,
        observed: RouteKind,
    },
    #[error("id {id}: block of {observed} bytes for a request of {size}")]
    Undersized { id: u64, size: usize, observed: usize },
    #[error("id {id}: [{lo:#x}, {hi:#x}) overlaps id {other}")]
    Overlap { id: u64, lo: usize, hi: usize, other: u64 },
    #[error("request of {0} bytes cannot be routed")]
    Unroutable(usize),
    #[error("unexpected violation {0}")]
    UnexpectedViolation(String),
    #[error("{count} expected violations not reported, first at {ptr:#x}")]
    MissingViolations { count: usize, ptr: usize },
}

/// How a free or resize of an id must be carried out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plan {
    /// The id is live.
    Live(ShadowBlock),
    /// The id was freed and its old address is not a live block start: the
    /// allocator must reject it.
    Stale(usize),
    /// The old address now starts another live block. Executing the call
    /// would free that block, so it is skipped.
    Aliased,
    /// The id was never allocated.
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Expectation {
    ptr: usize,
    /// A stale address may be reported as either kind: the block may have
    /// merged into a neighbour since it was freed.
    either_kind: bool,
}

#[derive(Debug, Default)]
pub struct Oracle {
    live: HashMap<u64, ShadowBlock>,
    by_addr: BTreeMap<usize, u64>,
    last_addr: HashMap<u64, usize>,
    expected: Vec<Expectation>,
    live_bytes: usize,
    peak_bytes: usize,
    skipped: u64,
}

impl Oracle {
    pub fn new() -> Oracle {
        Oracle::default()
    }

    pub fn is_live(&self, id: u64) -> bool {
        self.live.contains_key(&id)
    }

    pub fn live_blocks(&self) -> impl Iterator<Item = &ShadowBlock> {
        self.live.values()
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    pub fn live_bytes(&self) -> usize {
        self.live_bytes
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    /// Calls skipped because they would have freed another id's block.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn expected_violations(&self) -> usize {
        self.expected.len()
    }

    /// Checks a successful allocation for `id` and records it.
    pub fn on_alloc(&mut self, id: u64, requested: usize, seen: Observed, owner: u32) -> Result<(), OracleError> {
        if self.is_live(id) {
            return Err(OracleError::AlreadyLive(id));
        }
        let route = classify(requested).map_err(|_| OracleError::Unroutable(requested))?;
        if !seen.addr.is_multiple_of(16) || seen.addr == 0 {
            return Err(OracleError::Misaligned { id, addr: seen.addr });
        }
        if route.kind() != seen.route {
            return Err(OracleError::Route {
                id,
                size: requested,
                expected: route.kind(),
                observed: seen.route,
            });
        }
        let rounded = route.rounded_size();
        if seen.size < rounded {
            return Err(OracleError::Undersized {
                id,
                size: requested,
                observed: seen.size,
            });
        }
        let (lo, hi) = (seen.addr, seen.addr + rounded);
        let clash = self
            .by_addr
            .range(..hi)
            .next_back()
            .map(|(_, &other)| self.live[&other])
            .filter(|b| b.hi > lo);
        if let Some(b) = clash {
            return Err(OracleError::Overlap { id, lo, hi, other: b.id });
        }
        let block = ShadowBlock {
            id,
            lo,
            hi,
            requested,
            route: route.kind(),
            owner,
        };
        self.live.insert(id, block);
        self.by_addr.insert(lo, id);
        self.last_addr.insert(id, lo);
        self.live_bytes += requested;
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
        Ok(())
    }

    /// Decides how a free or resize of `id` proceeds. Stale plans record the
    /// violation they must produce.
    pub fn plan(&mut self, id: u64) -> Plan {
        if let Some(&b) = self.live.get(&id) {
            return Plan::Live(b);
        }
        match self.last_addr.get(&id) {
            None => Plan::Unknown,
            Some(&addr) if self.by_addr.contains_key(&addr) => {
                self.skipped += 1;
                Plan::Aliased
            }
            Some(&addr) => {
                self.expected.push(Expectation {
                    ptr: addr,
                    either_kind: true,
                });
                Plan::Stale(addr)
            }
        }
    }

    /// Records that freeing `foreign`, an address the allocator never
    /// issued, must be reported.
    pub fn expect_invalid(&mut self, foreign: usize) {
        self.expected.push(Expectation {
            ptr: foreign,
            either_kind: false,
        });
    }

    /// Removes a live id after a successful free.
    pub fn on_free(&mut self, id: u64) -> Option<ShadowBlock> {
        let b = self.live.remove(&id)?;
        self.by_addr.remove(&b.lo);
        self.live_bytes -= b.requested;
        Some(b)
    }

    /// Matches reported violations one-to-one against the expectations.
    pub fn reconcile(&self, reported: &[Violation]) -> Result<(), OracleError> {
        let mut open: HashMap<usize, Vec<bool>> = HashMap::new();
        for e in &self.expected {
            open.entry(e.ptr).or_default().push(e.either_kind);
        }
        for v in reported {
            let slot = open.get_mut(&v.ptr).and_then(|kinds| {
                let i = kinds
                    .iter()
                    .position(|&either| either || v.kind == ViolationKind::InvalidFree)?;
                Some(kinds.swap_remove(i))
            });
            if slot.is_none() {
                return Err(OracleError::UnexpectedViolation(v.to_string()));
            }
        }
        let left: Vec<usize> = open
            .iter()
            .flat_map(|(&ptr, kinds)| std::iter::repeat_n(ptr, kinds.len()))
            .collect();
        match left.iter().min() {
            None => Ok(()),
            Some(&ptr) => Err(OracleError::MissingViolations { count: left.len(), ptr }),
        }
    }
}
