//! Clipped relative-position edges.
//!
//! The edge from position `i` to position `j` carries the label
//! `clip(j − i, k) + k ∈ [0, 2k]`, an index into learned key and value
//! tables with `2k + 1` rows each. Row `r` holds the representation of
//! relative offset `r − k`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ops, Graph, Indices, Tensor, Var};

pub fn clip(x: i64, k: usize) -> i64 {
    let k = k as i64;
    x.clamp(-k, k)
}

/// Number of distinct edge labels for clipping distance `k`.
pub fn num_labels(k: usize) -> usize {
    2 * k + 1
}

/// `n×n` matrix of table row indices, `labels[i][j] = clip(j − i, k) + k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeLabelMatrix {
    k: usize,
    labels: Indices,
}

impl EdgeLabelMatrix {
    pub fn n(&self) -> usize {
        self.labels.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.labels.at(&[i, j])
    }

    pub fn as_indices(&self) -> &Indices {
        &self.labels
    }

    /// Labels offset into a table stack of `groups` tables: shape
    /// `groups×n×n`, entry `grp·(2k+1) + label`.
    pub fn grouped(&self, groups: usize) -> Indices {
        let stride = num_labels(self.k);
        let data = (0..groups)
            .flat_map(|g| self.labels.data().iter().map(move |&l| g * stride + l))
            .collect();
        let n = self.n();
        Indices::new(&[groups, n, n], data).expect("non-empty label grid")
    }
}

pub fn edge_label_matrix(n: usize, k: usize) -> Result<EdgeLabelMatrix> {
    if n == 0 {
        return Err(Error::Invalid("sequence length must be at least 1".into()));
    }
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            data.push((clip(j as i64 - i as i64, k) + k as i64) as usize);
        }
    }
    Ok(EdgeLabelMatrix {
        k,
        labels: Indices::new(&[n, n], data)?,
    })
}

type LabelCache = Mutex<HashMap<(usize, usize), Arc<EdgeLabelMatrix>>>;

/// Process-wide memo of label matrices keyed by `(n, k)`.
pub fn cached_edge_labels(n: usize, k: usize) -> Result<Arc<EdgeLabelMatrix>> {
    static CACHE: OnceLock<LabelCache> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(hit) = cache.lock().expect("label cache poisoned").get(&(n, k)) {
        return Ok(Arc::clone(hit));
    }
    let labels = Arc::new(edge_label_matrix(n, k)?);
    cache
        .lock()
        .expect("label cache poisoned")
        .insert((n, k), Arc::clone(&labels));
    Ok(labels)
}

/// Which parameters own a set of relative-position tables.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeSharing {
    /// One table pair for the whole model.
    PerModel,
    /// One table pair per layer, shared by its heads.
    PerLayer,
    /// Separate tables for every layer and head.
    #[default]
    PerLayerAndHead,
}

impl EdgeSharing {
    /// Table stacks per layer for `heads` attention heads.
    pub fn groups(self, heads: usize) -> usize {
        match self {
            EdgeSharing::PerModel | EdgeSharing::PerLayer => 1,
            EdgeSharing::PerLayerAndHead => heads,
        }
    }
}

/// Learned key/value edge tables, each of shape `groups×(2k+1)×d_a`.
///
/// `groups` is 1 when heads share the tables and `h` when every head owns
/// its own pair. The generic parameter lets the same structure hold graph
/// variables during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeEmbeddingTables<T = Tensor> {
    pub k: usize,
    pub w_k: T,
    pub w_v: T,
}

impl<T> RelativeEmbeddingTables<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> RelativeEmbeddingTables<U> {
        RelativeEmbeddingTables {
            k: self.k,
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
        }
    }
}

impl RelativeEmbeddingTables<Tensor> {
    /// Uniform initialization in `±0.1/sqrt(d_a)`.
    pub fn init<R: Rng + ?Sized>(k: usize, d_a: usize, groups: usize, rng: &mut R) -> Result<Self> {
        let shape = [groups, num_labels(k), d_a];
        let bound = 0.1 / (d_a as f64).sqrt();
        Ok(Self {
            k,
            w_k: Tensor::uniform(&shape, bound, rng)?,
            w_v: Tensor::uniform(&shape, bound, rng)?,
        })
    }

    pub fn zeros(k: usize, d_a: usize, groups: usize) -> Result<Self> {
        let shape = [groups, num_labels(k), d_a];
        Ok(Self {
            k,
            w_k: Tensor::zeros(&shape)?,
            w_v: Tensor::zeros(&shape)?,
        })
    }

    /// Accepts `(2k+1)×d_a` tables (one shared group) or stacked
    /// `groups×(2k+1)×d_a` tables.
    pub fn from_tensors(k: usize, w_k: Tensor, w_v: Tensor) -> Result<Self> {
        let lift = |t: Tensor| -> Result<Tensor> {
            match t.rank() {
                2 => {
                    let s = t.shape().to_vec();
                    t.reshape(&[1, s[0], s[1]])
                }
                3 => Ok(t),
                _ => Err(Error::InvalidShape {
                    shape: t.shape().to_vec(),
                    reason: "edge tables must be rank 2 or 3".into(),
                }),
            }
        };
        let (w_k, w_v) = (lift(w_k)?, lift(w_v)?);
        if w_k.shape() != w_v.shape() {
            return Err(Error::shape("edge tables", w_k.shape(), w_v.shape()));
        }
        if w_k.shape()[1] != num_labels(k) {
            return Err(Error::InvalidShape {
                shape: w_k.shape().to_vec(),
                reason: format!("expected {} rows for k = {k}", num_labels(k)),
            });
        }
        Ok(Self { k, w_k, w_v })
    }

    pub fn groups(&self) -> usize {
        self.w_k.shape()[0]
    }

    pub fn d_a(&self) -> usize {
        self.w_k.shape()[2]
    }

    pub fn parameter_count(&self) -> usize {
        self.w_k.len() + self.w_v.len()
    }
}

fn flatten_groups(shape: &[usize]) -> [usize; 2] {
    [shape[0] * shape[1], shape[2]]
}

/// Expands the tables into per-pair edge tensors `a_k`, `a_v` of shape
/// `groups×n×n×d_a`.
pub fn gather_edge_tensors(labels: &EdgeLabelMatrix, tables: &RelativeEmbeddingTables) -> Result<(Tensor, Tensor)> {
    check_label_range(labels, tables.k)?;
    let idx = labels.grouped(tables.groups());
    let a_k = ops::gather_rows(&tables.w_k.reshape(&flatten_groups(tables.w_k.shape()))?, &idx)?;
    let a_v = ops::gather_rows(&tables.w_v.reshape(&flatten_groups(tables.w_v.shape()))?, &idx)?;
    Ok((a_k, a_v))
}

/// Differentiable lookup of one stacked table: returns `groups×n×n×d_a`.
pub fn gather_edges(graph: &mut Graph, table: Var, labels: &EdgeLabelMatrix) -> Result<Var> {
    let shape = graph.shape(table).to_vec();
    if shape.len() != 3 {
        return Err(Error::InvalidShape {
            shape,
            reason: "edge table must be groups×(2k+1)×d_a".into(),
        });
    }
    if shape[1] != num_labels(labels.k()) {
        return Err(Error::Invalid(format!(
            "table has {} rows but labels use k = {}",
            shape[1],
            labels.k()
        )));
    }
    let flat = graph.reshape(table, &flatten_groups(&shape))?;
    graph.gather_rows(flat, &labels.grouped(shape[0]))
}

fn check_label_range(labels: &EdgeLabelMatrix, k: usize) -> Result<()> {
    if labels.k() != k {
        return Err(Error::Invalid(format!(
            "labels built for k = {} but tables use k = {k}",
            labels.k()
        )));
    }
    Ok(())
}
