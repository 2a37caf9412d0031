use crate::attention::{AttentionConfig, AttentionMode, AttentionParams, AttentionTrace, RelativeKernel};
use crate::error::{Error, Result};
use crate::numerics::{ops, Graph, Var};
use crate::relpos::{self, RelativeEmbeddingTables};

/// Validates shapes and returns the sequence length.
fn input_len(g: &Graph, x: Var, params: &AttentionParams<Var>, cfg: &AttentionConfig) -> Result<usize> {
    cfg.validate()?;
    let shape = g.shape(x);
    if shape.len() != 3 || shape[2] != cfg.d_x {
        return Err(Error::shape("attention input", shape, &[0, 0, cfg.d_x]));
    }
    let proj = [cfg.h, cfg.d_x, cfg.d_z];
    for w in [params.w_q, params.w_k, params.w_v] {
        if g.shape(w) != proj {
            return Err(Error::shape("attention projection", g.shape(w), &proj));
        }
    }
    if g.shape(params.w_o) != [cfg.h * cfg.d_z, cfg.d_x] {
        return Err(Error::shape("attention output projection", g.shape(params.w_o), &[cfg.h * cfg.d_z, cfg.d_x]));
    }
    Ok(shape[1])
}

fn check_tables(g: &Graph, tables: &RelativeEmbeddingTables<Var>, cfg: &AttentionConfig) -> Result<usize> {
    let shape = g.shape(tables.w_k);
    if tables.k != cfg.k {
        return Err(Error::Invalid(format!("tables use k = {} but config has k = {}", tables.k, cfg.k)));
    }
    let groups = shape[0];
    let expect = [groups, relpos::num_labels(cfg.k), cfg.d_a];
    if shape != expect || g.shape(tables.w_v) != expect || !cfg.h.is_multiple_of(groups) {
        return Err(Error::shape("edge tables", shape, &expect));
    }
    Ok(groups)
}

/// `b×n×d_x · h×d_x×d_z → b×h×n×d_z`
fn project_heads(g: &mut Graph, x: Var, w: Var) -> Result<Var> {
    let (b, n) = (g.shape(x)[0], g.shape(x)[1]);
    let [h, d_x, d_z] = [g.shape(w)[0], g.shape(w)[1], g.shape(w)[2]];
    let w_cols = g.permute(w, &[1, 0, 2])?;
    let w_flat = g.reshape(w_cols, &[d_x, h * d_z])?;
    let proj = g.matmul(x, w_flat)?;
    let split = g.reshape(proj, &[b, n, h, d_z])?;
    g.permute(split, &[0, 2, 1, 3])
}

/// `b×h×n×d_z → b×n×(h·d_z)`, heads in ascending order.
fn merge_heads(g: &mut Graph, z: Var) -> Result<Var> {
    let [b, h, n, d] = [g.shape(z)[0], g.shape(z)[1], g.shape(z)[2], g.shape(z)[3]];
    let moved = g.permute(z, &[0, 2, 1, 3])?;
    g.reshape(moved, &[b, n, h * d])
}

fn mask_for(cfg: &AttentionConfig, n: usize) -> Result<Option<crate::numerics::Tensor>> {
    if cfg.causal_mask {
        Ok(Some(ops::causal_mask(n)?))
    } else {
        Ok(None)
    }
}

fn finish(
    g: &mut Graph,
    logits: Var,
    weights: Var,
    z: Var,
    params: &AttentionParams<Var>,
    working: (usize, usize),
) -> Result<AttentionTrace<Var>> {
    let heads = merge_heads(g, z)?;
    let output = g.matmul(heads, params.w_o)?;
    Ok(AttentionTrace {
        logits,
        weights,
        heads,
        output,
        edge_working_set: working.0,
        value_edge_working_set: working.1,
    })
}

pub fn baseline_attention(g: &mut Graph, x: Var, params: &AttentionParams<Var>, cfg: &AttentionConfig) -> Result<AttentionTrace<Var>> {
    let n = input_len(g, x, params, cfg)?;
    let q = project_heads(g, x, params.w_q)?;
    let k = project_heads(g, x, params.w_k)?;
    let v = project_heads(g, x, params.w_v)?;
    let e = g.matmul_nt(q, k)?;
    let logits = g.scale(e, 1.0 / (cfg.d_z as f64).sqrt());
    let weights = g.softmax_rows(logits, mask_for(cfg, n)?.as_ref())?;
    let z = g.matmul(weights, v)?;
    finish(g, logits, weights, z, params, (0, 0))
}

/// Pair-by-pair relation-aware attention. Keys `x_j W^K + a^K_ij` and
/// values `x_j W^V + a^V_ij` are formed explicitly for every `(i, j)`.
pub fn rel_attention_reference(
    g: &mut Graph,
    x: Var,
    params: &AttentionParams<Var>,
    tables: &RelativeEmbeddingTables<Var>,
    cfg: &AttentionConfig,
) -> Result<AttentionTrace<Var>> {
    let n = input_len(g, x, params, cfg)?;
    check_tables(g, tables, cfg)?;
    let labels = relpos::cached_edge_labels(n, cfg.k)?;
    let q = project_heads(g, x, params.w_q)?;

    let a_k = if cfg.use_a_k {
        Some(relpos::gather_edges(g, tables.w_k, &labels)?)
    } else {
        None
    };
    let keys = g.pair_project(x, params.w_k, a_k)?;
    let e = g.pair_dot(q, keys)?;
    let logits = g.scale(e, 1.0 / (cfg.d_z as f64).sqrt());
    let weights = g.softmax_rows(logits, mask_for(cfg, n)?.as_ref())?;

    let a_v = if cfg.use_a_v {
        Some(relpos::gather_edges(g, tables.w_v, &labels)?)
    } else {
        None
    };
    let values = g.pair_project(x, params.w_v, a_v)?;
    let z = g.pair_weighted_sum(weights, values)?;
    let working = (g.value(keys).len(), g.value(values).len());
    finish(g, logits, weights, z, params, working)
}

/// Two-term relation-aware attention.
///
/// For the edge term of the logits, the queries at position `i` form a
/// `(b·h/groups)×d_z` matrix per group, multiplied against that
/// position's `n×d_z` edge block. The matrix is read in place through row
/// strides rather than copied to a position-major layout, and the product
/// is accumulated straight into the content term. The edge term of the
/// output does the same with the attention weights.
pub fn rel_attention_efficient(
    g: &mut Graph,
    x: Var,
    params: &AttentionParams<Var>,
    tables: &RelativeEmbeddingTables<Var>,
    cfg: &AttentionConfig,
) -> Result<AttentionTrace<Var>> {
    rel_attention_efficient_signed(g, x, params, tables, cfg, 1.0)
}

/// `term2_sign` exists so the checker can be shown to catch a corrupted
/// edge term; every production path passes `1.0`.
pub(crate) fn rel_attention_efficient_signed(
    g: &mut Graph,
    x: Var,
    params: &AttentionParams<Var>,
    tables: &RelativeEmbeddingTables<Var>,
    cfg: &AttentionConfig,
    term2_sign: f64,
) -> Result<AttentionTrace<Var>> {
    let n = input_len(g, x, params, cfg)?;
    let groups = check_tables(g, tables, cfg)?;
    let d_z = cfg.d_z;
    let labels = relpos::cached_edge_labels(n, cfg.k)?;
    let q = project_heads(g, x, params.w_q)?;
    let k = project_heads(g, x, params.w_k)?;
    let v = project_heads(g, x, params.w_v)?;
    let mut working = (0, 0);

    let content = g.matmul_nt(q, k)?;
    let e = if cfg.use_a_k {
        let a_k = relpos::gather_edges(g, tables.w_k, &labels)?;
        let a_k = g.reshape(a_k, &[groups * n, n, d_z])?;
        let a_k = if term2_sign == 1.0 { a_k } else { g.scale(a_k, term2_sign) };
        working.0 = g.value(q).len() + g.value(a_k).len();
        g.add_position_matmul(content, q, a_k, true)?
    } else {
        content
    };
    let logits = g.scale(e, 1.0 / (d_z as f64).sqrt());
    let weights = g.softmax_rows(logits, mask_for(cfg, n)?.as_ref())?;

    let mixed = g.matmul(weights, v)?;
    let z = if cfg.use_a_v {
        let a_v = relpos::gather_edges(g, tables.w_v, &labels)?;
        let a_v = g.reshape(a_v, &[groups * n, n, d_z])?;
        let a_v = if term2_sign == 1.0 { a_v } else { g.scale(a_v, term2_sign) };
        working.1 = g.value(weights).len() + g.value(a_v).len();
        g.add_position_matmul(mixed, weights, a_v, false)?
    } else {
        mixed
    };
    finish(g, logits, weights, z, params, working)
}

/// Multi-head self-attention sublayer: runs the configured kernel and
/// returns the projected `b×n×d_x` output.
pub fn multi_head_forward(
    g: &mut Graph,
    x: Var,
    params: &AttentionParams<Var>,
    tables: Option<&RelativeEmbeddingTables<Var>>,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let trace = match cfg.mode {
        AttentionMode::Baseline => baseline_attention(g, x, params, cfg)?,
        AttentionMode::Relative => {
            let tables = tables.ok_or(Error::MissingTables)?;
            match cfg.kernel {
                RelativeKernel::Efficient => rel_attention_efficient(g, x, params, tables, cfg)?,
                RelativeKernel::Reference => rel_attention_reference(g, x, params, tables, cfg)?,
            }
        }
    };
    Ok(trace.output)
}
