//! Crash-injection hooks.
//!
//! A fault point is a named place in the write path. When the crate is built
//! with the `fault-injection` feature and a fault is armed (either through the
//! `NVTREE_FAULT=<point>:<occurrence>` environment variable or [`arm`]), the
//! process aborts the moment the named point is reached for the given
//! occurrence. Without the feature every hook compiles to nothing.

/// Every registered fault point, in write-path order.
pub const FAULT_POINTS: &[&str] = &[
    "tree-log-append",
    "tree-apply-insert",
    "tree-log-flush-before",
    "tree-log-flush-after",
    "split-after-log",
    "split-after-install",
    "leaf-flush-before-write",
    "leaf-flush-after-write",
    "feature-append-before",
    "feature-append-after",
    "commit-before-record-flush",
    "commit-after-record-flush",
    "checkpoint-mid-write",
    "checkpoint-before-publish",
    "checkpoint-after-publish",
    "delete-intent-after-log",
    "tree-apply-delete",
];

pub const FAULT_ENV: &str = "NVTREE_FAULT";

#[cfg(feature = "fault-injection")]
mod imp {
    use parking_lot::Mutex;
    use std::collections::HashMap;
    use std::sync::OnceLock;

    struct Armed {
        point: String,
        occurrence: u64,
        seen: u64,
    }

    fn state() -> &'static Mutex<Option<Armed>> {
        static STATE: OnceLock<Mutex<Option<Armed>>> = OnceLock::new();
        STATE.get_or_init(|| {
            let armed = std::env::var(super::FAULT_ENV)
                .ok()
                .and_then(|s| super::parse_spec(&s))
                .map(|(point, occurrence)| Armed {
                    point,
                    occurrence,
                    seen: 0,
                });
            Mutex::new(armed)
        })
    }

    pub fn arm(point: &str, occurrence: u64) {
        *state().lock() = Some(Armed {
            point: point.to_string(),
            occurrence: occurrence.max(1),
            seen: 0,
        });
    }

    pub fn disarm() {
        *state().lock() = None;
    }

    fn counts() -> &'static Mutex<HashMap<&'static str, u64>> {
        static COUNTS: OnceLock<Mutex<HashMap<&'static str, u64>>> = OnceLock::new();
        COUNTS.get_or_init(|| Mutex::new(HashMap::new()))
    }

    /// How often each point has been reached in this process.
    pub fn hit_counts() -> Vec<(&'static str, u64)> {
        let counts = counts().lock();
        super::FAULT_POINTS
            .iter()
            .map(|p| (*p, counts.get(p).copied().unwrap_or(0)))
            .collect()
    }

    pub fn reset_counts() {
        counts().lock().clear();
    }

    pub fn hit(point: &'static str) {
        *counts().lock().entry(point).or_default() += 1;
        let mut guard = state().lock();
        if let Some(armed) = guard.as_mut() {
            if armed.point == point {
                armed.seen += 1;
                if armed.seen == armed.occurrence {
                    eprintln!("fault injected at {point} (occurrence {})", armed.seen);
                    std::process::abort();
                }
            }
        }
    }
}

/// Parses `point:occurrence` (occurrence defaults to 1).
pub fn parse_spec(spec: &str) -> Option<(String, u64)> {
    let (point, occ) = match spec.rsplit_once(':') {
        Some((p, n)) => (p, n.parse().ok()?),
        None => (spec, 1),
    };
    if point.is_empty() || occ == 0 {
        return None;
    }
    Some((point.to_string(), occ))
}

#[cfg(feature = "fault-injection")]
pub use imp::{arm, disarm, hit_counts, reset_counts};

#[inline]
pub fn hit(point: &'static str) {
    debug_assert!(
        FAULT_POINTS.contains(&point),
        "unregistered fault point {point}"
    );
    #[cfg(feature = "fault-injection")]
    imp::hit(point);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_specs() {
        assert_eq!(
            parse_spec("commit-after-record-flush:3"),
            Some(("commit-after-record-flush".into(), 3))
        );
        assert_eq!(
            parse_spec("split-after-log"),
            Some(("split-after-log".into(), 1))
        );
        assert_eq!(parse_spec("x:0"), None);
        assert_eq!(parse_spec(":2"), None);
    }

    #[test]
    fn registry_has_no_duplicates() {
        let mut names: Vec<_> = FAULT_POINTS.to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), FAULT_POINTS.len());
        assert!(FAULT_POINTS.len() >= 12);
    }
}
