//! Kernel timings behind `relattn bench`.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::BenchConfig;
use crate::attention::{
    baseline_attention, rel_attention_efficient, rel_attention_reference, relative_storage_report, AttentionConfig,
    AttentionMode, AttentionParams, Kernel, StorageReport,
};
use crate::error::Result;
use crate::numerics::{Graph, Tensor};
use crate::relpos::{EdgeSharing, RelativeEmbeddingTables};

/// Overhead of the efficient kernel over the baseline that the desk grid
/// must stay under.
pub const OVERHEAD_BOUND: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub n: usize,
    pub b: usize,
    pub h: usize,
    pub k: usize,
    pub d_x: usize,
    pub d_z: usize,
    pub edge_sharing: EdgeSharing,
    /// Median seconds per forward+backward pass.
    pub baseline_secs: f64,
    pub efficient_secs: f64,
    pub reference_secs: Option<f64>,
    pub baseline_steps_per_sec: f64,
    pub efficient_steps_per_sec: f64,
    pub reference_steps_per_sec: Option<f64>,
    /// `efficient_secs / baseline_secs`.
    pub overhead_ratio: f64,
    /// `reference_secs` over the efficient kernel's median from the same
    /// interleaved pass.
    pub reference_ratio: Option<f64>,
    pub storage: StorageReport,
    /// Elements held by the efficient kernel's key-edge intermediates.
    pub edge_working_set: usize,
    pub value_edge_working_set: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub reps: usize,
    pub warmup: usize,
    pub points: Vec<BenchPoint>,
    pub max_overhead_ratio: f64,
    pub overhead_bound: f64,
    pub overhead_within_bound: bool,
    /// For every `(b, h, k)` series with two or more lengths, whether the
    /// reference/efficient ratio strictly increases with `n`. `None` when
    /// the reference kernel was skipped.
    pub reference_ratio_increasing: Option<bool>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

struct Inputs {
    x: Tensor,
    probe: Tensor,
    params: AttentionParams,
    tables: RelativeEmbeddingTables,
    cfg: AttentionConfig,
}

/// One forward+backward pass; returns the key/value edge working sets.
fn step(inp: &Inputs, kernel: Kernel) -> Result<(usize, usize)> {
    let mut g = Graph::new();
    let x = g.constant(inp.x.clone());
    let p = inp.params.map(|_, t| g.param(t.clone()));
    let t = inp.tables.map(|w| g.param(w.clone()));
    let trace = match kernel {
        Kernel::Baseline => {
            let cfg = AttentionConfig {
                mode: AttentionMode::Baseline,
                use_a_k: false,
                use_a_v: false,
                ..inp.cfg.clone()
            };
            baseline_attention(&mut g, x, &p, &cfg)?
        }
        Kernel::Efficient => rel_attention_efficient(&mut g, x, &p, &t, &inp.cfg)?,
        Kernel::Reference => rel_attention_reference(&mut g, x, &p, &t, &inp.cfg)?,
    };
    let probe = g.constant(inp.probe.clone());
    let weighted = g.mul(trace.output, probe)?;
    let loss = g.sum(weighted);
    g.backward(loss)?;
    Ok((trace.edge_working_set, trace.value_edge_working_set))
}

/// Median seconds per pass for each kernel, taking one sample of every
/// kernel per repetition.
fn time(inp: &Inputs, kernels: &[Kernel], reps: usize, warmup: usize) -> Result<(Vec<f64>, (usize, usize))> {
    let mut working = (0, 0);
    let mut samples = vec![Vec::with_capacity(reps); kernels.len()];
    for rep in 0..warmup + reps {
        for (slot, &kernel) in samples.iter_mut().zip(kernels) {
            let start = Instant::now();
            let w = step(inp, kernel)?;
            let secs = start.elapsed().as_secs_f64();
            if kernel == Kernel::Efficient {
                working = w;
            }
            if rep >= warmup {
                slot.push(secs);
            }
        }
    }
    Ok((samples.into_iter().map(median).collect(), working))
}

/// Times the three kernels over the grid. Each ratio comes from a pair of
/// kernels run interleaved, rep by rep, so slow drift affects both alike.
/// The reference kernel gets its own pass with the efficient kernel, since
/// its large intermediates would evict the baseline's data from cache.
pub fn run_bench(cfg: &BenchConfig, progress: &mut dyn FnMut(&BenchPoint)) -> Result<BenchReport> {
    let (reps, warmup) = (cfg.reps as usize, cfg.warmup as usize);
    let (d_x, d_z) = (cfg.d_x as usize, cfg.d_z as usize);
    let mut points = Vec::new();
    for &b in &cfg.batch_sizes {
        for &h in &cfg.heads {
            for &k in &cfg.ks {
                for &n in &cfg.lengths {
                    let (b, h, k, n) = (b as usize, h as usize, k as usize, n as usize);
                    let attn = AttentionConfig {
                        causal_mask: cfg.causal,
                        edge_sharing: cfg.edge_sharing,
                        ..AttentionConfig::relative(d_x, d_z, h, k)
                    };
                    attn.validate()?;
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((n as u64) << 32) ^ ((b * 131 + h * 17 + k) as u64));
                    let inp = Inputs {
                        x: Tensor::uniform(&[b, n, d_x], 1.0, &mut rng)?,
                        probe: Tensor::uniform(&[b, n, d_x], 1.0, &mut rng)?,
                        params: AttentionParams::init(&attn, &mut rng)?,
                        tables: RelativeEmbeddingTables::init(k, d_z, attn.table_groups(), &mut rng)?,
                        cfg: attn.clone(),
                    };
                    let (secs, working) = time(&inp, &[Kernel::Baseline, Kernel::Efficient], reps, warmup)?;
                    let (baseline_secs, efficient_secs) = (secs[0], secs[1]);
                    let reference = if cfg.include_reference {
                        let (paired, _) = time(&inp, &[Kernel::Efficient, Kernel::Reference], reps, warmup)?;
                        Some((paired[1], paired[1] / paired[0]))
                    } else {
                        None
                    };
                    let reference_secs = reference.map(|r| r.0);
                    let point = BenchPoint {
                        n,
                        b,
                        h,
                        k,
                        d_x,
                        d_z,
                        edge_sharing: cfg.edge_sharing,
                        baseline_secs,
                        efficient_secs,
                        reference_secs,
                        baseline_steps_per_sec: 1.0 / baseline_secs,
                        efficient_steps_per_sec: 1.0 / efficient_secs,
                        reference_steps_per_sec: reference_secs.map(|s| 1.0 / s),
                        overhead_ratio: efficient_secs / baseline_secs,
                        reference_ratio: reference.map(|r| r.1),
                        storage: relative_storage_report(&attn, n, b),
                        edge_working_set: working.0,
                        value_edge_working_set: working.1,
                    };
                    progress(&point);
                    points.push(point);
                }
            }
        }
    }

    let max_overhead_ratio = points.iter().map(|p| p.overhead_ratio).fold(0.0, f64::max);
    let reference_ratio_increasing = cfg.include_reference.then(|| {
        let mut series: BTreeMap<(usize, usize, usize), Vec<(usize, f64)>> = BTreeMap::new();
        for p in &points {
            series
                .entry((p.b, p.h, p.k))
                .or_default()
                .push((p.n, p.reference_ratio.expect("reference timed")));
        }
        series.values_mut().all(|s| {
            s.sort_by_key(|&(n, _)| n);
            s.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 > w[0].1)
        })
    });
    Ok(BenchReport {
        reps,
        warmup,
        max_overhead_ratio,
        overhead_bound: OVERHEAD_BOUND,
        overhead_within_bound: max_overhead_ratio < OVERHEAD_BOUND,
        reference_ratio_increasing,
        points,
    })
}
