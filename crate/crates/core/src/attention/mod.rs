//! Multi-head self-attention with optional relative-position edges.
//!
//! Three kernels share one contract ([`AttentionTrace`]):
//!
//! * [`baseline_attention`] — scaled dot-product attention with no edges.
//! * [`rel_attention_reference`] — relation-aware attention evaluated pair
//!   by pair. Keys and values are re-projected for every `(i, j)` pair and
//!   the edge vectors are added before the dot product. Slow; it is the
//!   correctness oracle.
//! * [`rel_attention_efficient`] — the same quantity split into a content
//!   term, computed with ordinary batched products, and an edge term,
//!   computed as `n` position-major products against the shared edge
//!   blocks. It never materializes a `b×h×n×n×d_a` tensor.

mod kernels;
mod storage;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::relpos::{EdgeSharing, RelativeEmbeddingTables};

pub use kernels::{baseline_attention, multi_head_forward, rel_attention_efficient, rel_attention_reference};
pub(crate) use kernels::rel_attention_efficient_signed;
pub use storage::{relative_storage_report, StorageReport};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    Baseline,
    Relative,
}

/// Kernel used for relative mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelativeKernel {
    #[default]
    Efficient,
    Reference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub d_x: usize,
    pub d_z: usize,
    pub h: usize,
    pub k: usize,
    pub d_a: usize,
    pub mode: AttentionMode,
    pub use_a_v: bool,
    pub use_a_k: bool,
    pub causal_mask: bool,
    pub edge_sharing: EdgeSharing,
    pub kernel: RelativeKernel,
}

impl AttentionConfig {
    pub fn baseline(d_x: usize, d_z: usize, h: usize) -> Self {
        Self {
            d_x,
            d_z,
            h,
            k: 0,
            d_a: d_z,
            mode: AttentionMode::Baseline,
            use_a_v: false,
            use_a_k: false,
            causal_mask: false,
            edge_sharing: EdgeSharing::PerLayerAndHead,
            kernel: RelativeKernel::Efficient,
        }
    }

    pub fn relative(d_x: usize, d_z: usize, h: usize, k: usize) -> Self {
        Self {
            k,
            mode: AttentionMode::Relative,
            use_a_v: true,
            use_a_k: true,
            ..Self::baseline(d_x, d_z, h)
        }
    }

    pub fn table_groups(&self) -> usize {
        self.edge_sharing.groups(self.h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_x == 0 || self.d_z == 0 || self.h == 0 {
            return Err(Error::Invalid("d_x, d_z and h must be positive".into()));
        }
        if self.mode == AttentionMode::Baseline && (self.use_a_k || self.use_a_v) {
            return Err(Error::Invalid("baseline attention cannot use edge representations".into()));
        }
        if (self.use_a_k || self.use_a_v) && self.d_a != self.d_z {
            return Err(Error::Invalid(format!(
                "edge width d_a = {} must equal d_z = {} when edges are used",
                self.d_a, self.d_z
            )));
        }
        Ok(())
    }
}

/// Per-head projections stacked along a leading head axis
/// (`w_q`, `w_k`, `w_v`: `h×d_x×d_z`) and the output projection
/// (`w_o`: `(h·d_z)×d_x`). Heads are concatenated in ascending order
/// before `w_o`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T = Tensor> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
}

impl<T> AttentionParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> AttentionParams<U> {
        AttentionParams {
            w_q: f("w_q", &self.w_q),
            w_k: f("w_k", &self.w_k),
            w_v: f("w_v", &self.w_v),
            w_o: f("w_o", &self.w_o),
        }
    }

    pub fn named(&self) -> [(&'static str, &T); 4] {
        [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut T); 4] {
        [
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
        ]
    }
}

impl AttentionParams<Tensor> {
    /// Projections uniform in `±1/sqrt(d_x)`; `w_o` Xavier-uniform.
    pub fn init<R: Rng + ?Sized>(cfg: &AttentionConfig, rng: &mut R) -> Result<Self> {
        let proj = 1.0 / (cfg.d_x as f64).sqrt();
        let shape = [cfg.h, cfg.d_x, cfg.d_z];
        let xavier = (6.0 / (cfg.h * cfg.d_z + cfg.d_x) as f64).sqrt();
        Ok(Self {
            w_q: Tensor::uniform(&shape, proj, rng)?,
            w_k: Tensor::uniform(&shape, proj, rng)?,
            w_v: Tensor::uniform(&shape, proj, rng)?,
            w_o: Tensor::uniform(&[cfg.h * cfg.d_z, cfg.d_x], xavier, rng)?,
        })
    }

    pub fn heads(&self) -> usize {
        self.w_q.shape()[0]
    }

    fn check(&self, cfg: &AttentionConfig) -> Result<()> {
        let proj = [cfg.h, cfg.d_x, cfg.d_z];
        for (name, t) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)] {
            if t.shape() != proj {
                return Err(Error::Invalid(format!("{name} has shape {:?}, expected {proj:?}", t.shape())));
            }
        }
        if self.w_o.shape() != [cfg.h * cfg.d_z, cfg.d_x] {
            return Err(Error::Invalid(format!(
                "w_o has shape {:?}, expected {:?}",
                self.w_o.shape(),
                [cfg.h * cfg.d_z, cfg.d_x]
            )));
        }
        Ok(())
    }
}

/// Everything a kernel computes.
///
/// `logits` are the scaled compatibilities before masking (always finite);
/// `weights` are the softmax over `j` after masking; `heads` is the
/// concatenated pre-projection output `b×n×(h·d_z)` and `output` the
/// projected `b×n×d_x` result.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace<T = Var> {
    pub logits: T,
    pub weights: T,
    pub heads: T,
    pub output: T,
    /// Elements read by the key-edge logit term: queries and edge blocks.
    pub edge_working_set: usize,
    /// Elements read by the value-edge output term: weights and edge blocks.
    pub value_edge_working_set: usize,
}

impl AttentionTrace<Var> {
    pub fn values(&self, graph: &Graph) -> AttentionTrace<Tensor> {
        AttentionTrace {
            logits: graph.value(self.logits).clone(),
            weights: graph.value(self.weights).clone(),
            heads: graph.value(self.heads).clone(),
            output: graph.value(self.output).clone(),
            edge_working_set: self.edge_working_set,
            value_edge_working_set: self.value_edge_working_set,
        }
    }
}

/// Which kernel to run in [`evaluate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    Baseline,
    Reference,
    Efficient,
}

/// Runs a kernel on plain tensors and returns the materialized trace.
pub fn evaluate(
    kernel: Kernel,
    x: &Tensor,
    params: &AttentionParams,
    tables: Option<&RelativeEmbeddingTables>,
    cfg: &AttentionConfig,
) -> Result<AttentionTrace<Tensor>> {
    params.check(cfg)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pv = params.map(|_, t| g.constant(t.clone()));
    let tv = tables.map(|t| t.map(|w| g.constant(w.clone())));
    let trace = match kernel {
        Kernel::Baseline => baseline_attention(&mut g, xv, &pv, cfg)?,
        Kernel::Reference => rel_attention_reference(&mut g, xv, &pv, tv.as_ref().ok_or(Error::MissingTables)?, cfg)?,
        Kernel::Efficient => rel_attention_efficient(&mut g, xv, &pv, tv.as_ref().ok_or(Error::MissingTables)?, cfg)?,
    };
    Ok(trace.values(&g))
}

#[cfg(test)]
mod tests;
