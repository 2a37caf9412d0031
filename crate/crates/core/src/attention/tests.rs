use super::*;
use crate::numerics::{finite_diff_grad, grads_close};
use crate::relpos::{edge_label_matrix, EdgeSharing};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Case {
    x: Tensor,
    params: AttentionParams,
    tables: RelativeEmbeddingTables,
    cfg: AttentionConfig,
}

#[allow(clippy::too_many_arguments)]
fn case(seed: u64, b: usize, n: usize, h: usize, k: usize, d_x: usize, d_z: usize, groups: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = AttentionConfig {
        edge_sharing: if groups == 1 { EdgeSharing::PerLayer } else { EdgeSharing::PerLayerAndHead },
        ..AttentionConfig::relative(d_x, d_z, h, k)
    };
    let x = Tensor::uniform(&[b, n, d_x], 1.0, &mut rng).unwrap();
    let params = AttentionParams::init(&cfg, &mut rng).unwrap();
    let mut tables = RelativeEmbeddingTables::init(k, d_z, groups, &mut rng).unwrap();
    // larger than the init scale so edge terms are visible
    tables = tables.map(|t| t.scale(10.0));
    Case { x, params, tables, cfg }
}

/// Direct scalar evaluation of relation-aware attention, one pair at a time.
/// Returns (logits, weights, heads) with the same layouts as the kernels.
#[allow(clippy::needless_range_loop)]
fn scalar_oracle(c: &Case, use_edges: bool) -> (Tensor, Tensor, Tensor) {
    let cfg = &c.cfg;
    let (b, n) = (c.x.shape()[0], c.x.shape()[1]);
    let (h, d_x, d_z) = (cfg.h, cfg.d_x, cfg.d_z);
    let groups = c.tables.groups();
    let labels = edge_label_matrix(n, cfg.k).unwrap();
    let proj = |w: &Tensor, bi: usize, hh: usize, j: usize, col: usize| -> f64 {
        (0..d_x).map(|d| c.x.at(&[bi, j, d]) * w.at(&[hh, d, col])).sum()
    };
    let mut logits = vec![0.0; b * h * n * n];
    let mut weights = vec![0.0; b * h * n * n];
    let mut heads = vec![0.0; b * n * h * d_z];
    for bi in 0..b {
        for hh in 0..h {
            let grp = hh / (h / groups);
            for i in 0..n {
                let mut row = vec![0.0; n];
                for (j, e) in row.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for col in 0..d_z {
                        let mut key = proj(&c.params.w_k, bi, hh, j, col);
                        if use_edges && cfg.use_a_k {
                            key += c.tables.w_k.at(&[grp, labels.get(i, j), col]);
                        }
                        acc += proj(&c.params.w_q, bi, hh, i, col) * key;
                    }
                    *e = acc / (d_z as f64).sqrt();
                }
                let visible = |j: usize| !cfg.causal_mask || j <= i;
                let max = (0..n).filter(|&j| visible(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = (0..n).filter(|&j| visible(j)).map(|j| (row[j] - max).exp()).sum();
                for j in 0..n {
                    let at = ((bi * h + hh) * n + i) * n + j;
                    logits[at] = row[j];
                    weights[at] = if visible(j) { (row[j] - max).exp() / denom } else { 0.0 };
                }
                for col in 0..d_z {
                    let mut z = 0.0;
                    for j in 0..n {
                        let mut val = proj(&c.params.w_v, bi, hh, j, col);
                        if use_edges && cfg.use_a_v {
                            val += c.tables.w_v.at(&[grp, labels.get(i, j), col]);
                        }
                        z += weights[((bi * h + hh) * n + i) * n + j] * val;
                    }
                    heads[(bi * n + i) * h * d_z + hh * d_z + col] = z;
                }
            }
        }
    }
    (
        Tensor::new(&[b, h, n, n], logits).unwrap(),
        Tensor::new(&[b, h, n, n], weights).unwrap(),
        Tensor::new(&[b, n, h * d_z], heads).unwrap(),
    )
}

fn diff(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b).unwrap()
}

fn run(kernel: Kernel, c: &Case) -> AttentionTrace<Tensor> {
    let cfg = if kernel == Kernel::Baseline {
        AttentionConfig {
            mode: AttentionMode::Baseline,
            use_a_k: false,
            use_a_v: false,
            ..c.cfg.clone()
        }
    } else {
        c.cfg.clone()
    };
    evaluate(kernel, &c.x, &c.params, Some(&c.tables), &cfg).unwrap()
}

#[test]
fn baseline_matches_scalar_loop() {
    let c = case(1, 1, 4, 2, 0, 5, 3, 2);
    let trace = run(Kernel::Baseline, &c);
    let (logits, weights, heads) = scalar_oracle(&c, false);
    assert!(diff(&trace.logits, &logits) < 1e-12);
    assert!(diff(&trace.weights, &weights) < 1e-12);
    assert!(diff(&trace.heads, &heads) < 1e-12);
}

#[test]
fn relative_kernels_match_scalar_loop() {
    for (seed, causal) in [(2, false), (3, true)] {
        let mut c = case(seed, 2, 5, 2, 2, 4, 3, 2);
        c.cfg.causal_mask = causal;
        let (logits, weights, heads) = scalar_oracle(&c, true);
        for kernel in [Kernel::Reference, Kernel::Efficient] {
            let trace = run(kernel, &c);
            assert!(diff(&trace.logits, &logits) < 1e-12, "{kernel:?}");
            assert!(diff(&trace.weights, &weights) < 1e-12, "{kernel:?}");
            assert!(diff(&trace.heads, &heads) < 1e-12, "{kernel:?}");
        }
    }
}

#[test]
fn single_position() {
    let c = case(4, 1, 1, 1, 3, 4, 4, 1);
    let base = run(Kernel::Baseline, &c);
    assert_eq!(base.weights.data(), &[1.0]);
    let xv = c.x.reshape(&[1, 4]).unwrap();
    let w_v = c.params.w_v.reshape(&[4, 4]).unwrap();
    let plain = xv.matmul(&w_v).unwrap();
    assert!(diff(&base.heads.reshape(&[1, 4]).unwrap(), &plain) < 1e-12);

    let rel = run(Kernel::Reference, &c);
    assert_eq!(rel.weights.data(), &[1.0]);
    let edge: Vec<f64> = (0..4).map(|col| c.tables.w_v.at(&[0, 3, col])).collect();
    let expect = plain.add(&Tensor::new(&[1, 4], edge).unwrap()).unwrap();
    assert!(diff(&rel.heads.reshape(&[1, 4]).unwrap(), &expect) < 1e-12);
}

#[test]
fn identical_rows_attend_uniformly() {
    let mut c = case(5, 1, 5, 2, 0, 4, 3, 1);
    let row: Vec<f64> = c.x.data()[..4].to_vec();
    c.x = Tensor::new(&[1, 5, 4], row.repeat(5)).unwrap();
    let trace = run(Kernel::Baseline, &c);
    assert!(trace.weights.data().iter().all(|&w| (w - 0.2).abs() < 1e-15));
}

#[test]
fn efficient_matches_reference() {
    let c = case(6, 2, 6, 4, 2, 8, 4, 4);
    let r = run(Kernel::Reference, &c);
    let e = run(Kernel::Efficient, &c);
    assert!(diff(&r.logits, &e.logits) < 1e-9);
    assert!(diff(&r.weights, &e.weights) < 1e-9);
    assert!(diff(&r.output, &e.output) < 1e-9);
}

#[test]
fn zero_tables_reduce_to_baseline() {
    for groups in [1, 2] {
        let mut c = case(7, 2, 5, 2, 3, 6, 3, groups);
        c.tables = RelativeEmbeddingTables::zeros(3, 3, groups).unwrap();
        let base = run(Kernel::Baseline, &c);
        for kernel in [Kernel::Reference, Kernel::Efficient] {
            let t = run(kernel, &c);
            assert!(diff(&t.logits, &base.logits) < 1e-12);
            assert!(diff(&t.weights, &base.weights) < 1e-12);
            assert!(diff(&t.output, &base.output) < 1e-12);
        }
    }
}

#[test]
fn ablation_off_equals_baseline() {
    let mut c = case(8, 1, 4, 2, 2, 4, 2, 2);
    c.cfg.use_a_k = false;
    c.cfg.use_a_v = false;
    let base = run(Kernel::Baseline, &c);
    for kernel in [Kernel::Reference, Kernel::Efficient] {
        let t = run(kernel, &c);
        assert!(diff(&t.output, &base.output) < 1e-12);
    }
}

#[test]
fn key_edges_only_change_logits_not_value_formula() {
    let mut c = case(9, 1, 5, 2, 2, 4, 3, 2);
    c.cfg.use_a_v = false;
    let base = run(Kernel::Baseline, &c);
    let t = run(Kernel::Reference, &c);
    assert!(diff(&t.logits, &base.logits) > 1e-6);
    // recompute z = Σ α x W^V from the relative weights
    let xv = c.x.reshape(&[5, 4]).unwrap();
    let v = xv.matmul(&c.params.w_v).unwrap();
    let alpha = t.weights.reshape(&[2, 5, 5]).unwrap();
    let z = alpha.matmul(&v).unwrap().permute(&[1, 0, 2]).unwrap().reshape(&[1, 5, 6]).unwrap();
    assert!(diff(&t.heads, &z) < 1e-12);
}

#[test]
fn causal_weights_are_lower_triangular() {
    let mut c = case(10, 2, 6, 2, 2, 4, 3, 2);
    c.cfg.causal_mask = true;
    for kernel in [Kernel::Reference, Kernel::Efficient] {
        let t = run(kernel, &c);
        assert!(t.logits.is_finite());
        for bi in 0..2 {
            for hh in 0..2 {
                for i in 0..6 {
                    let mut total = 0.0;
                    for j in 0..6 {
                        let w = t.weights.at(&[bi, hh, i, j]);
                        if j > i {
                            assert_eq!(w, 0.0);
                        }
                        total += w;
                    }
                    assert!((total - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn single_head_with_identity_output_projection() {
    let mut c = case(11, 1, 4, 1, 1, 3, 3, 1);
    c.params.w_o = Tensor::identity(3).unwrap();
    for kernel in [Kernel::Baseline, Kernel::Reference, Kernel::Efficient] {
        let t = run(kernel, &c);
        assert_eq!(t.output, t.heads);
    }
}

#[test]
fn shared_tables_equal_per_head_copies() {
    let c = case(12, 2, 5, 2, 2, 4, 3, 1);
    let copies = c.tables.map(|t| {
        let mut data = t.to_vec();
        data.extend_from_slice(t.data());
        Tensor::new(&[2, t.shape()[1], t.shape()[2]], data).unwrap()
    });
    let per_head = Case {
        tables: copies,
        cfg: AttentionConfig {
            edge_sharing: EdgeSharing::PerLayerAndHead,
            ..c.cfg.clone()
        },
        x: c.x.clone(),
        params: c.params.clone(),
    };
    for kernel in [Kernel::Reference, Kernel::Efficient] {
        assert_eq!(run(kernel, &c).output, run(kernel, &per_head).output);
    }
}

#[test]
fn missing_tables_rejected() {
    let c = case(13, 1, 3, 1, 1, 2, 2, 1);
    let mut g = Graph::new();
    let x = g.constant(c.x.clone());
    let p = c.params.map(|_, t| g.constant(t.clone()));
    assert!(matches!(multi_head_forward(&mut g, x, &p, None, &c.cfg), Err(Error::MissingTables)));
}

fn table_loss(c: &Case, w_k: &Tensor, kernel: RelativeKernel) -> (f64, Option<Tensor>) {
    let mut g = Graph::new();
    let x = g.constant(c.x.clone());
    let p = c.params.map(|_, t| g.constant(t.clone()));
    let tables = RelativeEmbeddingTables {
        k: c.tables.k,
        w_k: g.param(w_k.clone()),
        w_v: g.constant(c.tables.w_v.clone()),
    };
    let cfg = AttentionConfig { kernel, ..c.cfg.clone() };
    let out = multi_head_forward(&mut g, x, &p, Some(&tables), &cfg).unwrap();
    let sq = g.mul(out, out).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    (g.value(loss).item(), grads.get(tables.w_k).cloned())
}

#[test]
fn key_table_gradient_matches_finite_differences() {
    let c = case(14, 2, 4, 2, 1, 4, 3, 2);
    for kernel in [RelativeKernel::Reference, RelativeKernel::Efficient] {
        let (_, analytic) = table_loss(&c, &c.tables.w_k, kernel);
        let numeric = finite_diff_grad(|t| table_loss(&c, t, kernel).0, &c.tables.w_k, 1e-5);
        grads_close(&analytic.unwrap(), &numeric, 1e-4, 1e-7).unwrap();
    }
}

#[test]
fn storage_report_examples() {
    let cfg = AttentionConfig {
        edge_sharing: EdgeSharing::PerLayer,
        ..AttentionConfig::relative(512, 64, 8, 4)
    };
    let r = relative_storage_report(&cfg, 10, 2);
    assert_eq!(r.table_parameters, 1152);
    assert_eq!(r.expanded_per_pair_shared, 12800);
    assert_eq!(r.expanded_per_pair_unshared, 102400);
    assert_eq!(r.activation_baseline, 2 * 8 * 10 * 64);
    assert_eq!(r.relative_ratio, 10.0 / 16.0);

    let one = relative_storage_report(&AttentionConfig::relative(8, 4, 1, 2), 7, 3);
    assert_eq!(one.expanded_per_pair_shared, one.expanded_per_pair_unshared);

    let double = relative_storage_report(&cfg, 20, 2);
    assert_eq!(double.expanded_per_pair_shared, 4 * r.expanded_per_pair_shared);
    assert_eq!(double.expanded_per_pair_unshared, 4 * r.expanded_per_pair_unshared);
    assert_eq!(double.table_parameters, r.table_parameters);
}

#[test]
fn efficient_working_set_within_bound() {
    for groups in [1, 4] {
        let c = case(15, 2, 9, 4, 3, 8, 4, groups);
        let t = run(Kernel::Efficient, &c);
        let report = relative_storage_report(&c.cfg, 9, 2);
        assert!(t.edge_working_set > 0 && t.edge_working_set <= report.efficient_transient_bound);
        assert!(t.value_edge_working_set > 0 && t.value_edge_working_set <= report.efficient_value_transient_bound);
        // reference materializes every pair per head
        let r = run(Kernel::Reference, &c);
        assert_eq!(r.edge_working_set, 2 * 4 * 9 * 9 * 4);
        assert_eq!(r.value_edge_working_set, 2 * 4 * 9 * 9 * 4);
    }
}

#[test]
fn constant_input_gives_toeplitz_logits() {
    let mut c = case(16, 1, 8, 2, 2, 4, 3, 2);
    let row: Vec<f64> = c.x.data()[..4].to_vec();
    c.x = Tensor::new(&[1, 8, 4], row.repeat(8)).unwrap();
    let t = run(Kernel::Efficient, &c);
    for hh in 0..2 {
        for i in 0..7 {
            for j in 0..7 {
                let a = t.logits.at(&[0, hh, i, j]);
                let b = t.logits.at(&[0, hh, i + 1, j + 1]);
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let [b, n, d] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    Tensor::from_fn(&[b, n, d], |flat| {
        let (bi, rest) = (flat / (n * d), flat % (n * d));
        x.at(&[bi, perm[rest / d], rest % d])
    })
    .unwrap()
}

#[test]
fn equivariance_at_k0_and_broken_at_k1() {
    let perm = [3, 0, 4, 1, 2];
    let c0 = case(17, 1, 5, 2, 0, 4, 3, 2);
    let base = run(Kernel::Efficient, &c0).output;
    let moved = Case {
        x: permute_rows(&c0.x, &perm),
        params: c0.params.clone(),
        tables: c0.tables.clone(),
        cfg: c0.cfg.clone(),
    };
    let out = run(Kernel::Efficient, &moved).output;
    assert!(diff(&out, &permute_rows(&base, &perm)) <= 1e-12);

    let c1 = case(17, 1, 5, 2, 1, 4, 3, 2);
    let base = run(Kernel::Efficient, &c1).output;
    let moved = Case {
        x: permute_rows(&c1.x, &perm),
        ..c1
    };
    let out = run(Kernel::Efficient, &moved).output;
    assert!(diff(&out, &permute_rows(&base, &perm)) > 1e-6);
}

#[test]
fn config_validation() {
    let mut cfg = AttentionConfig::baseline(4, 2, 2);
    cfg.use_a_k = true;
    assert!(cfg.validate().is_err());
    let mut cfg = AttentionConfig::relative(4, 2, 2, 1);
    cfg.d_a = 3;
    assert!(cfg.validate().is_err());
    cfg.use_a_k = false;
    cfg.use_a_v = false;
    assert!(cfg.validate().is_ok());
}

fn sweep_grads(c: &Case, kernel: RelativeKernel) -> Vec<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(c.x.clone());
    let p = c.params.map(|_, t| g.param(t.clone()));
    let t = c.tables.map(|t| g.param(t.clone()));
    let cfg = AttentionConfig { kernel, ..c.cfg.clone() };
    let out = multi_head_forward(&mut g, x, &p, Some(&t), &cfg).unwrap();
    let sq = g.mul(out, out).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    [p.w_q, p.w_k, p.w_v, p.w_o, t.w_k, t.w_v].iter().map(|&v| grads.get(v).unwrap().clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn efficient_reference_equivalence(
        seed in 0u64..1000,
        n in 1usize..9,
        h in prop::sample::select(vec![1usize, 2, 4]),
        k in 0usize..5,
        b in 1usize..3,
        flags in 0u8..4,
        causal in any::<bool>(),
        shared in any::<bool>(),
    ) {
        let mut c = case(seed, b, n, h, k, 6, 3, if shared { 1 } else { h });
        c.cfg.use_a_k = flags & 1 != 0;
        c.cfg.use_a_v = flags & 2 != 0;
        c.cfg.causal_mask = causal;
        let r = run(Kernel::Reference, &c);
        let e = run(Kernel::Efficient, &c);
        prop_assert!(diff(&r.logits, &e.logits) < 1e-9);
        prop_assert!(diff(&r.weights, &e.weights) < 1e-9);
        prop_assert!(diff(&r.output, &e.output) < 1e-9);
        for (a, b) in sweep_grads(&c, RelativeKernel::Reference).iter().zip(&sweep_grads(&c, RelativeKernel::Efficient)) {
            prop_assert!(diff(a, b) < 1e-7);
        }
    }
}

