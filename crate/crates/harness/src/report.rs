//! Run reports: a flat `key=value` block and an optional JSON file.
//!
//! Reports hold counts only. Wall time is printed separately so that a
//! seeded single-threaded run reproduces its report byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use oobheap::{ClassId, HeapStats};
use serde::Serialize;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StatsReport {
    pub mode: String,
    pub ops: u64,
    pub bytes_live_peak: u64,
    pub committed_heap_bytes: u64,
    pub reserved_heap_bytes: u64,
    pub metadata_bytes: u64,
    pub bins: BTreeMap<String, u64>,
    pub bins_total: u64,
    pub orphaned_bins: u64,
    pub ext_live: u64,
    pub ext_cached: u64,
    pub ext_cached_bytes: u64,
    pub ext_maps: u64,
    pub ext_reuses: u64,
    pub ext_evictions: u64,
    pub double_frees: u64,
    pub invalid_frees: u64,
    pub deferred: u64,
    pub remote_marks: u64,
    pub drained: u64,
    pub adopted: u64,
    pub expected_violations: u64,
    pub leftover_blocks: u64,
    pub skipped: u64,
    /// Workload-specific values.
    pub extra: BTreeMap<String, u64>,
}

impl StatsReport {
    pub fn from_heap(mode: &str, s: &HeapStats) -> StatsReport {
        StatsReport {
            mode: mode.to_string(),
            committed_heap_bytes: s.committed as u64,
            reserved_heap_bytes: s.reserved as u64,
            metadata_bytes: s.metadata_bytes as u64,
            bins: ClassId::all()
                .map(|c| (c.to_string(), s.bins[c.index()] as u64))
                .collect(),
            bins_total: s.total_bins() as u64,
            orphaned_bins: s.orphaned_bins as u64,
            ext_live: s.external.live as u64,
            ext_cached: s.external.cached as u64,
            ext_cached_bytes: s.external.cached_bytes as u64,
            ext_maps: s.external.maps,
            ext_reuses: s.external.reuses,
            ext_evictions: s.external.evictions,
            double_frees: s.double_frees,
            invalid_frees: s.invalid_frees,
            deferred: s.deferred,
            remote_marks: s.remote_marks,
            drained: s.drained,
            adopted: s.adopted,
            ..StatsReport::default()
        }
    }

    pub fn violations(&self) -> u64 {
        self.double_frees + self.invalid_frees
    }

    /// Metadata bytes per committed heap byte.
    pub fn metadata_ratio(&self) -> f64 {
        if self.committed_heap_bytes == 0 {
            return 0.0;
        }
        self.metadata_bytes as f64 / self.committed_heap_bytes as f64
    }

    /// One `key=value` line per field, keys sorted, nested maps dotted.
    pub fn to_kv(&self) -> String {
        let value = serde_json::to_value(self).expect("plain data");
        let mut out = String::new();
        flatten("", &value, &mut out);
        out
    }

    pub fn write_json(&self, path: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("plain data");
        text.push('\n');
        std::fs::write(path, text)
    }
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut String) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        serde_json::Value::String(s) => out.push_str(&format!("{prefix}={s}\n")),
        other => out.push_str(&format!("{prefix}={other}\n")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_is_sorted_and_flat() {
        let mut r = StatsReport::from_heap("churn", &HeapStats::default());
        r.extra.insert("generation_01_peak".into(), 7);
        let kv = r.to_kv();
        let keys: Vec<&str> = kv.lines().map(|l| l.split('=').next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert!(kv.contains("bins.f16=0\n"));
        assert!(kv.contains("bins.v16384=0\n"));
        assert!(kv.contains("extra.generation_01_peak=7\n"));
        assert!(kv.contains("mode=churn\n"));
    }

    #[test]
    fn json_round_trips_fields() {
        let r = StatsReport {
            ops: 12,
            ..StatsReport::default()
        };
        let v: serde_json::Value = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(v["ops"], 12);
    }
}
