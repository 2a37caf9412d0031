use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::relpos::num_labels;

/// Exact element counts for relative-position storage in one attention layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub n: usize,
    pub b: usize,
    pub h: usize,
    pub k: usize,
    pub d_a: usize,
    pub table_groups: usize,
    /// `2·(2k+1)·d_a` per table group.
    pub table_parameters: usize,
    /// `a^K` and `a^V` expanded to every pair once, shared by all heads.
    pub expanded_per_pair_shared: usize,
    /// The same expansion repeated for each of the `h` heads.
    pub expanded_per_pair_unshared: usize,
    /// `b·h·n·d_z`, the per-layer query/key/value activation size.
    pub activation_baseline: usize,
    /// `n/(b·h)`: edge storage relative to activations.
    pub relative_ratio: f64,
    /// Upper bound on the efficient kernel's edge-term working set,
    /// `n·b·h·d_z + groups·n²·d_a`.
    pub efficient_transient_bound: usize,
    /// Bound for the value-edge output term, `b·h·n² + groups·n²·d_a`;
    /// the first part is the size of the attention weights themselves.
    pub efficient_value_transient_bound: usize,
}

pub fn relative_storage_report(cfg: &AttentionConfig, n: usize, b: usize) -> StorageReport {
    let groups = cfg.table_groups();
    let shared = 2 * n * n * cfg.d_a;
    StorageReport {
        n,
        b,
        h: cfg.h,
        k: cfg.k,
        d_a: cfg.d_a,
        table_groups: groups,
        table_parameters: 2 * num_labels(cfg.k) * cfg.d_a * groups,
        expanded_per_pair_shared: shared,
        expanded_per_pair_unshared: cfg.h * shared,
        activation_baseline: b * cfg.h * n * cfg.d_z,
        relative_ratio: n as f64 / (b * cfg.h) as f64,
        efficient_transient_bound: n * b * cfg.h * cfg.d_z + groups * n * n * cfg.d_a,
        efficient_value_transient_bound: b * cfg.h * n * n + groups * n * n * cfg.d_a,
    }
}
