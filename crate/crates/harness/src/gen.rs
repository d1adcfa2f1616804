//! Seeded random trace generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::trace::TraceEvent;

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub seed: u64,
    /// Events to emit, thread switches included.
    pub events: usize,
    pub threads: u32,
    pub min_size: usize,
    pub max_size: usize,
    /// Live blocks at which every allocation is replaced by a free.
    pub max_live: usize,
    /// Probability per event of a free or resize of a stale or unknown id.
    pub fault_rate: f64,
    pub switch_rate: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            events: 100_000,
            threads: 1,
            min_size: 1,
            max_size: 256 << 10,
            max_live: 1000,
            fault_rate: 0.0,
            switch_rate: 0.05,
        }
    }
}

/// Ids handed to faults on blocks that never existed.
const UNKNOWN_BASE: u64 = 1 << 48;

/// Log-uniform over `[lo, hi]`.
fn log_uniform(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    let (a, b) = ((lo as f64).ln(), ((hi + 1) as f64).ln());
    let v = rng.random_range(a..b).exp() as usize;
    v.clamp(lo, hi)
}

/// Four in five sizes come from the small end (up to 1 KiB), the rest
/// from the whole range; both log-uniform.
pub fn sample_size(rng: &mut ChaCha8Rng, min: usize, max: usize) -> usize {
    let min = min.max(1);
    let small = max.min(1024).max(min);
    if rng.random_bool(0.8) {
        log_uniform(rng, min, small)
    } else {
        log_uniform(rng, min, max)
    }
}

pub fn generate(cfg: &GenConfig) -> Vec<TraceEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.events);
    let mut live: Vec<u64> = Vec::new();
    let mut freed: Vec<u64> = Vec::new();
    let mut next_id = 1u64;
    let mut thread = 0u32;
    while out.len() < cfg.events {
        if cfg.threads > 1 && rng.random_bool(cfg.switch_rate) {
            let t = rng.random_range(0..cfg.threads - 1);
            thread = if t >= thread { t + 1 } else { t };
            out.push(TraceEvent::SelectThread(thread));
            continue;
        }
        if cfg.fault_rate > 0.0 && rng.random_bool(cfg.fault_rate) {
            // A resize of an unknown id would allocate it, so unknown ids
            // are only freed.
            if freed.is_empty() || rng.random_bool(0.2) {
                out.push(TraceEvent::Free {
                    id: UNKNOWN_BASE + rng.random_range(0..1 << 16),
                });
            } else {
                let id = freed[rng.random_range(0..freed.len())];
                out.push(if rng.random_bool(0.25) {
                    TraceEvent::Realloc {
                        id,
                        size: sample_size(&mut rng, cfg.min_size, cfg.max_size),
                    }
                } else {
                    TraceEvent::Free { id }
                });
            }
            continue;
        }
        let r: f64 = rng.random();
        let must_free = live.len() >= cfg.max_live;
        if !live.is_empty() && (must_free || (0.40..0.78).contains(&r)) {
            let id = live.swap_remove(rng.random_range(0..live.len()));
            out.push(TraceEvent::Free { id });
            if freed.len() < 64 {
                freed.push(id);
            } else {
                let i = rng.random_range(0..freed.len());
                freed[i] = id;
            }
        } else if !live.is_empty() && (0.78..0.93).contains(&r) {
            let id = live[rng.random_range(0..live.len())];
            out.push(TraceEvent::Realloc {
                id,
                size: sample_size(&mut rng, cfg.min_size, cfg.max_size),
            });
        } else {
            let id = next_id;
            next_id += 1;
            let size = sample_size(&mut rng, cfg.min_size, cfg.max_size);
            if rng.random_bool(0.1) {
                let elem = [1usize, 4, 8, 16][rng.random_range(0..4)];
                out.push(TraceEvent::ZeroAlloc {
                    id,
                    count: (size / elem).max(1),
                    size: elem,
                });
            } else {
                out.push(TraceEvent::Alloc { id, size });
            }
            live.push(id);
        }
    }
    out
}
