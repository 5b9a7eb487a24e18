//! Process-wide instrumentation counters.
//!
//! The operator code increments these on every forward evaluation; the bench
//! command and the complexity oracles read them back and compare against the
//! closed-form cost model. Exposed as a plain name -> integer registry.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::{Mutex, MutexGuard, PoisonError};

/// Elements written by unfold (one per gathered patch entry, padding included).
pub const UNFOLD_ELEMS: &str = "unfold.elements";
/// Multiply-accumulates performed by the linear patch projector.
pub const PROJ_LINEAR_MACS: &str = "proj.linear.macs";
/// Multiply-accumulates performed by the KAN patch projector (matmul + spline).
pub const PROJ_KAN_MACS: &str = "proj.kan.macs";
/// Individual B-spline basis function evaluations (window entries, not calls).
pub const SPLINE_BASIS_EVALS: &str = "spline.basis_evals";
/// Currently live patch-buffer elements (tracked tensor allocations).
pub const PATCH_LIVE: &str = "ckan.patch_buffer.live";
/// High-water mark of `ckan.patch_buffer.live`.
pub const PATCH_PEAK: &str = "ckan.patch_buffer.peak";

static MEASURE: Mutex<()> = Mutex::new(());

/// Guard for reset/measure/read sections. The counters are process-wide, so
/// any code that resets them and asserts on the result must hold this across
/// the whole section or concurrent measurements will interleave.
pub fn lock() -> MutexGuard<'static, ()> {
    MEASURE.lock().unwrap_or_else(PoisonError::into_inner)
}

static UNFOLD: AtomicU64 = AtomicU64::new(0);
static LINEAR: AtomicU64 = AtomicU64::new(0);
static KAN: AtomicU64 = AtomicU64::new(0);
static BASIS: AtomicU64 = AtomicU64::new(0);
static LIVE: AtomicI64 = AtomicI64::new(0);
static PEAK: AtomicU64 = AtomicU64::new(0);

fn slot(name: &str) -> Option<&'static AtomicU64> {
    match name {
        UNFOLD_ELEMS => Some(&UNFOLD),
        PROJ_LINEAR_MACS => Some(&LINEAR),
        PROJ_KAN_MACS => Some(&KAN),
        SPLINE_BASIS_EVALS => Some(&BASIS),
        PATCH_PEAK => Some(&PEAK),
        _ => None,
    }
}

/// Add `n` to the named counter. Unknown names are ignored.
pub fn incr(name: &str, n: u64) {
    if let Some(c) = slot(name) {
        c.fetch_add(n, Ordering::Relaxed);
    }
}

/// Read a single counter.
pub fn get(name: &str) -> u64 {
    if name == PATCH_LIVE {
        return LIVE.load(Ordering::Relaxed).max(0) as u64;
    }
    slot(name).map_or(0, |c| c.load(Ordering::Relaxed))
}

/// Track `n` newly allocated patch-buffer elements and update the peak gauge.
pub fn patch_alloc(n: u64) {
    let live = LIVE.fetch_add(n as i64, Ordering::Relaxed) + n as i64;
    PEAK.fetch_max(live.max(0) as u64, Ordering::Relaxed);
}

/// Release `n` patch-buffer elements.
pub fn patch_free(n: u64) {
    LIVE.fetch_sub(n as i64, Ordering::Relaxed);
}

/// Zero every counter and gauge.
pub fn reset() {
    UNFOLD.store(0, Ordering::Relaxed);
    LINEAR.store(0, Ordering::Relaxed);
    KAN.store(0, Ordering::Relaxed);
    BASIS.store(0, Ordering::Relaxed);
    LIVE.store(0, Ordering::Relaxed);
    PEAK.store(0, Ordering::Relaxed);
}

/// Snapshot of every counter, sorted by name.
pub fn snapshot() -> BTreeMap<String, u64> {
    let mut m = BTreeMap::new();
    for name in [
        UNFOLD_ELEMS,
        PROJ_LINEAR_MACS,
        PROJ_KAN_MACS,
        SPLINE_BASIS_EVALS,
        PATCH_LIVE,
        PATCH_PEAK,
    ] {
        m.insert(name.to_string(), get(name));
    }
    m
}
