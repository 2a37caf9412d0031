//! Oracle suites behind `relattn check`.
//!
//! * `equivalence`: efficient vs reference kernel on randomized configs,
//!   comparing logits, weights, outputs and every parameter gradient.
//! * `reduction`: zero edge tables against the baseline kernel.
//! * `equivariance`: permuting the input permutes the logits exactly when
//!   the model has no access to positions.
//! * `gradient`: central finite differences on a tiny end-to-end model.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::CheckConfig;
use crate::attention::{
    evaluate, rel_attention_efficient_signed, rel_attention_reference, AttentionConfig, AttentionMode,
    AttentionParams, Kernel,
};
use crate::error::Result;
use crate::model::{model_forward, predict_logits, EncoderConfig, ModelParams, PositionMode};
use crate::numerics::{finite_diff_grad, grad_error, Graph, Indices, Tensor};
use crate::relpos::{EdgeSharing, RelativeEmbeddingTables};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub suite: String,
    pub id: usize,
    pub config: Value,
    pub max_errors: BTreeMap<String, f64>,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub cases: usize,
    pub failed: usize,
    pub max_errors: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub passed: bool,
    pub total_cases: usize,
    pub failed_cases: usize,
    pub inject_bug: bool,
    pub tolerances: BTreeMap<String, f64>,
    pub suites: BTreeMap<String, SuiteSummary>,
    pub cases: Vec<CaseResult>,
}

impl CheckReport {
    pub fn suite(&self, name: &str) -> Option<&SuiteSummary> {
        self.suites.get(name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed)
    }
}

fn failed_case(suite: &str, id: usize, config: Value, e: crate::Error) -> CaseResult {
    CaseResult {
        suite: suite.into(),
        id,
        config,
        max_errors: BTreeMap::new(),
        passed: false,
        detail: Some(e.to_string()),
    }
}

fn diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.max_abs_diff(b)
}

struct AttentionCase {
    x: Tensor,
    probe: Tensor,
    params: AttentionParams,
    tables: RelativeEmbeddingTables,
    cfg: AttentionConfig,
}

#[derive(Clone, Copy, Debug)]
struct SweepPoint {
    b: usize,
    n: usize,
    h: usize,
    k: usize,
    shared: bool,
    use_a_k: bool,
    use_a_v: bool,
    causal: bool,
}

impl SweepPoint {
    fn describe(&self) -> Value {
        json!({
            "b": self.b, "n": self.n, "h": self.h, "k": self.k,
            "edge_sharing": if self.shared { "per_layer" } else { "per_layer_and_head" },
            "use_a_k": self.use_a_k, "use_a_v": self.use_a_v, "causal": self.causal,
        })
    }

    fn build(&self, d_x: usize, d_z: usize, seed: u64) -> Result<AttentionCase> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AttentionConfig {
            use_a_k: self.use_a_k,
            use_a_v: self.use_a_v,
            causal_mask: self.causal,
            edge_sharing: if self.shared { EdgeSharing::PerLayer } else { EdgeSharing::PerLayerAndHead },
            ..AttentionConfig::relative(d_x, d_z, self.h, self.k)
        };
        let groups = cfg.table_groups();
        let x = Tensor::uniform(&[self.b, self.n, d_x], 1.0, &mut rng)?;
        let probe = Tensor::uniform(&[self.b, self.n, d_x], 1.0, &mut rng)?;
        let params = AttentionParams::init(&cfg, &mut rng)?;
        let shape = [groups, 2 * self.k + 1, d_z];
        let tables = RelativeEmbeddingTables::from_tensors(
            self.k,
            Tensor::uniform(&shape, 1.0, &mut rng)?,
            Tensor::uniform(&shape, 1.0, &mut rng)?,
        )?;
        Ok(AttentionCase {
            x,
            probe,
            params,
            tables,
            cfg,
        })
    }
}

#[derive(Clone, Copy)]
enum Variant {
    Reference,
    Efficient { term2_sign: f64 },
}

struct KernelRun {
    logits: Tensor,
    weights: Tensor,
    output: Tensor,
    grads: Vec<Tensor>,
}

/// Runs one kernel and differentiates `sum(output ⊙ probe)` with respect to
/// the projections and both tables.
fn run_kernel(c: &AttentionCase, variant: Variant) -> Result<KernelRun> {
    let mut g = Graph::new();
    let x = g.constant(c.x.clone());
    let p = c.params.map(|_, t| g.param(t.clone()));
    let t = c.tables.map(|w| g.param(w.clone()));
    let trace = match variant {
        Variant::Reference => rel_attention_reference(&mut g, x, &p, &t, &c.cfg)?,
        Variant::Efficient { term2_sign } => rel_attention_efficient_signed(&mut g, x, &p, &t, &c.cfg, term2_sign)?,
    };
    let probe = g.constant(c.probe.clone());
    let weighted = g.mul(trace.output, probe)?;
    let loss = g.sum(weighted);
    let grads = g.backward(loss)?;
    let vars = [p.w_q, p.w_k, p.w_v, p.w_o, t.w_k, t.w_v];
    let grads = vars
        .iter()
        .map(|&v| match grads.get(v) {
            Some(gr) => Ok(gr.clone()),
            None => Tensor::zeros(g.shape(v)),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KernelRun {
        logits: g.value(trace.logits).clone(),
        weights: g.value(trace.weights).clone(),
        output: g.value(trace.output).clone(),
        grads,
    })
}

fn sweep_points(cfg: &CheckConfig) -> Vec<SweepPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.cases as usize)
        .map(|i| SweepPoint {
            use_a_k: i & 1 != 0,
            use_a_v: i & 2 != 0,
            causal: i & 4 != 0,
            n: rng.random_range(1..=cfg.max_len as usize),
            h: cfg.heads[rng.random_range(0..cfg.heads.len())] as usize,
            k: if cfg.k_zero_only { 0 } else { rng.random_range(0..=cfg.max_k as usize) },
            b: rng.random_range(1..=cfg.max_batch as usize),
            shared: rng.random(),
        })
        .collect()
}

fn case_seed(base: u64, suite: u64, id: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (suite << 48) ^ id as u64
}

fn equivalence_case(cfg: &CheckConfig, id: usize, point: &SweepPoint) -> Result<CaseResult> {
    let c = point.build(cfg.d_x as usize, cfg.d_z as usize, case_seed(cfg.seed, 1, id))?;
    let sign = if cfg.inject_bug { -1.0 } else { 1.0 };
    let r = run_kernel(&c, Variant::Reference)?;
    let e = run_kernel(&c, Variant::Efficient { term2_sign: sign })?;
    let mut errors = BTreeMap::new();
    errors.insert("logits".to_string(), diff(&r.logits, &e.logits)?);
    errors.insert("weights".to_string(), diff(&r.weights, &e.weights)?);
    errors.insert("output".to_string(), diff(&r.output, &e.output)?);
    let names = ["grad_w_q", "grad_w_k", "grad_w_v", "grad_w_o", "grad_table_k", "grad_table_v"];
    for (name, (a, b)) in names.iter().zip(r.grads.iter().zip(&e.grads)) {
        errors.insert(name.to_string(), diff(a, b)?);
    }
    let passed = errors
        .iter()
        .all(|(name, &err)| err <= if name.starts_with("grad") { cfg.grad_tol } else { cfg.value_tol });
    Ok(CaseResult {
        suite: "equivalence".into(),
        id,
        config: point.describe(),
        max_errors: errors,
        passed,
        detail: None,
    })
}

fn reduction_case(cfg: &CheckConfig, id: usize, point: &SweepPoint) -> Result<CaseResult> {
    let mut c = point.build(cfg.d_x as usize, cfg.d_z as usize, case_seed(cfg.seed, 2, id))?;
    c.tables = RelativeEmbeddingTables::zeros(point.k, cfg.d_z as usize, c.cfg.table_groups())?;
    let baseline_cfg = AttentionConfig {
        mode: AttentionMode::Baseline,
        use_a_k: false,
        use_a_v: false,
        ..c.cfg.clone()
    };
    let base = evaluate(Kernel::Baseline, &c.x, &c.params, None, &baseline_cfg)?;
    let mut errors = BTreeMap::new();
    for (label, kernel) in [("reference", Kernel::Reference), ("efficient", Kernel::Efficient)] {
        let t = evaluate(kernel, &c.x, &c.params, Some(&c.tables), &c.cfg)?;
        errors.insert(format!("{label}_logits"), diff(&t.logits, &base.logits)?);
        errors.insert(format!("{label}_weights"), diff(&t.weights, &base.weights)?);
        errors.insert(format!("{label}_output"), diff(&t.output, &base.output)?);
    }
    let passed = errors.values().all(|&e| e <= cfg.reduction_tol);
    Ok(CaseResult {
        suite: "reduction".into(),
        id,
        config: point.describe(),
        max_errors: errors,
        passed,
        detail: None,
    })
}

fn tiny_model(position_mode: PositionMode, k: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        d_x: 8,
        d_z: 4,
        h: 2,
        d_ff: 16,
        vocab_size: 7,
        position_mode,
        k,
        ..EncoderConfig::default()
    }
}

/// Largest deviation between `logits(perm(x))` and `perm(logits(x))`.
fn permutation_deviation(enc: &EncoderConfig, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(enc, &mut rng)?;
    let n = 6;
    let toks: Vec<usize> = (0..n).map(|_| rng.random_range(0..enc.vocab_size)).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    while perm.iter().enumerate().all(|(i, &p)| i == p) {
        perm.shuffle(&mut rng);
    }
    let moved: Vec<usize> = perm.iter().map(|&p| toks[p]).collect();
    let a = predict_logits(&params, &Indices::new(&[1, n], toks)?, enc)?;
    let b = predict_logits(&params, &Indices::new(&[1, n], moved)?, enc)?;
    let mut worst: f64 = 0.0;
    for (i, &p) in perm.iter().enumerate() {
        for c in 0..enc.vocab_size {
            worst = worst.max((b.at(&[0, i, c]) - a.at(&[0, p, c])).abs());
        }
    }
    Ok(worst)
}

fn equivariance_cases(cfg: &CheckConfig) -> Vec<CaseResult> {
    let modes = [
        ("none", PositionMode::None, 0, true),
        ("relative", PositionMode::Relative, 0, true),
        ("sinusoidal", PositionMode::Sinusoidal, 0, false),
        ("relative", PositionMode::Relative, 1, false),
        ("relative", PositionMode::Relative, 2, false),
    ];
    let mut out = Vec::new();
    for seed in 0..cfg.equivariance_seeds as u64 {
        for &(name, mode, k, equivariant) in &modes {
            let id = out.len();
            let config = json!({ "position_mode": name, "k": k, "seed": seed, "expect_equivariant": equivariant });
            let s = case_seed(cfg.seed, 3, seed as usize);
            out.push(match permutation_deviation(&tiny_model(mode, k), s) {
                Ok(dev) => CaseResult {
                    suite: "equivariance".into(),
                    id,
                    config,
                    max_errors: BTreeMap::from([("permutation_deviation".to_string(), dev)]),
                    passed: if equivariant { dev <= cfg.equivariance_tol } else { dev > cfg.witness_min },
                    detail: None,
                },
                Err(e) => failed_case("equivariance", id, config, e),
            });
        }
    }
    out
}

/// Model variants cycled through by the gradient suite.
fn gradient_variant(i: usize) -> (Value, EncoderConfig) {
    let variants: [(&str, PositionMode, usize, EdgeSharing, bool); 5] = [
        ("relative", PositionMode::Relative, 2, EdgeSharing::PerLayerAndHead, false),
        ("sinusoidal_relative", PositionMode::SinusoidalRelative, 1, EdgeSharing::PerLayer, false),
        ("relative", PositionMode::Relative, 3, EdgeSharing::PerModel, true),
        ("sinusoidal", PositionMode::Sinusoidal, 0, EdgeSharing::PerLayerAndHead, false),
        ("relative", PositionMode::Relative, 1, EdgeSharing::PerLayerAndHead, true),
    ];
    let (name, mode, k, sharing, causal) = variants[i % variants.len()];
    let enc = EncoderConfig {
        edge_sharing: sharing,
        causal,
        ..tiny_model(mode, k)
    };
    let desc = json!({
        "position_mode": name, "k": k, "edge_sharing": sharing, "causal": causal,
        "num_layers": enc.num_layers, "d_x": enc.d_x, "h": enc.h, "n": 5, "vocab_size": enc.vocab_size,
    });
    (desc, enc)
}

fn model_loss(enc: &EncoderConfig, params: &ModelParams, toks: &Indices, targets: &Indices) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = params.map(|_, t| g.param(t.clone()));
    let logits = model_forward(&mut g, toks, &vars, enc, None)?;
    let loss = g.label_smoothed_ce(logits, targets, 0.1, None)?;
    let grads = g.backward(loss)?;
    let list = vars
        .named()
        .into_iter()
        .map(|(_, &v)| match grads.get(v) {
            Some(t) => Ok(t.clone()),
            None => Tensor::zeros(g.shape(v)),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((g.value(loss).item(), list))
}

fn gradient_case(cfg: &CheckConfig, id: usize) -> Result<CaseResult> {
    let (desc, enc) = gradient_variant(id);
    let mut rng = ChaCha8Rng::seed_from_u64(case_seed(cfg.seed, 4, id));
    let params = ModelParams::init(&enc, &mut rng)?;
    let n = 5;
    let toks = Indices::new(&[1, n], (0..n).map(|_| rng.random_range(0..enc.vocab_size)).collect())?;
    let targets = Indices::new(&[1, n], (0..n).map(|_| rng.random_range(0..enc.vocab_size)).collect())?;
    let (_, analytic) = model_loss(&enc, &params, &toks, &targets)?;
    let named = params.named();
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut bad = Vec::new();
    for (idx, (name, base)) in named.iter().enumerate() {
        let mut failure = None;
        let numeric = finite_diff_grad(
            |t| {
                let mut p = params.clone();
                p.visit_mut(|n, slot| {
                    if n == name {
                        *slot = t.clone();
                    }
                });
                match model_loss(&enc, &p, &toks, &targets) {
                    Ok((loss, _)) => loss,
                    Err(e) => {
                        failure = Some(e);
                        f64::NAN
                    }
                }
            },
            base,
            cfg.fd_eps,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        let (err, ok) = grad_error(&analytic[idx], &numeric, cfg.fd_rel_tol, cfg.fd_abs_tol);
        max_abs = max_abs.max(err.max_abs);
        max_rel = max_rel.max(err.max_rel);
        if !ok {
            bad.push(name.clone());
        }
    }
    let mut config = desc;
    config["seed"] = json!(id);
    Ok(CaseResult {
        suite: "gradient".into(),
        id,
        config,
        max_errors: BTreeMap::from([("max_abs".to_string(), max_abs), ("max_rel".to_string(), max_rel)]),
        passed: bad.is_empty(),
        detail: (!bad.is_empty()).then(|| format!("mismatched parameters: {}", bad.join(", "))),
    })
}

/// Runs every suite; `progress` receives each case as it finishes.
pub fn run_check(cfg: &CheckConfig, progress: &mut dyn FnMut(&CaseResult)) -> CheckReport {
    let mut cases = Vec::new();
    let mut push = |c: CaseResult, cases: &mut Vec<CaseResult>| {
        progress(&c);
        cases.push(c);
    };

    let points = sweep_points(cfg);
    for (id, p) in points.iter().enumerate() {
        let c = equivalence_case(cfg, id, p).unwrap_or_else(|e| failed_case("equivalence", id, p.describe(), e));
        push(c, &mut cases);
    }
    let reductions = points.iter().filter(|p| cfg.k_zero_only || (p.use_a_k && p.use_a_v && p.k > 0));
    for (id, p) in reductions.take(cfg.reduction_cases as usize).enumerate() {
        let p = SweepPoint {
            use_a_k: true,
            use_a_v: true,
            ..*p
        };
        let c = reduction_case(cfg, id, &p).unwrap_or_else(|e| failed_case("reduction", id, p.describe(), e));
        push(c, &mut cases);
    }
    for c in equivariance_cases(cfg) {
        push(c, &mut cases);
    }
    for id in 0..cfg.gradient_seeds as usize {
        let c = gradient_case(cfg, id).unwrap_or_else(|e| failed_case("gradient", id, gradient_variant(id).0, e));
        push(c, &mut cases);
    }

    let mut suites: BTreeMap<String, SuiteSummary> = BTreeMap::new();
    for c in &cases {
        let s = suites.entry(c.suite.clone()).or_default();
        s.cases += 1;
        s.failed += usize::from(!c.passed);
        for (name, &err) in &c.max_errors {
            let slot = s.max_errors.entry(name.clone()).or_insert(0.0);
            *slot = slot.max(err);
        }
    }
    let failed_cases = cases.iter().filter(|c| !c.passed).count();
    CheckReport {
        passed: failed_cases == 0,
        total_cases: cases.len(),
        failed_cases,
        inject_bug: cfg.inject_bug,
        tolerances: BTreeMap::from([
            ("value".to_string(), cfg.value_tol),
            ("grad".to_string(), cfg.grad_tol),
            ("fd_eps".to_string(), cfg.fd_eps),
            ("fd_rel".to_string(), cfg.fd_rel_tol),
            ("fd_abs".to_string(), cfg.fd_abs_tol),
            ("equivariance".to_string(), cfg.equivariance_tol),
            ("witness_min".to_string(), cfg.witness_min),
            ("reduction".to_string(), cfg.reduction_tol),
        ]),
        suites,
        cases,
    }
}
