//! Post-norm transformer encoder with a per-position classification head.

mod checkpoint;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_forward, AttentionConfig, AttentionMode, AttentionParams, RelativeKernel};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Indices, Tensor, Var, LAYER_NORM_EPS};
use crate::relpos::{EdgeSharing, RelativeEmbeddingTables};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    None,
    Sinusoidal,
    #[default]
    Relative,
    SinusoidalRelative,
}

impl PositionMode {
    pub fn uses_sinusoids(self) -> bool {
        matches!(self, PositionMode::Sinusoidal | PositionMode::SinusoidalRelative)
    }

    pub fn uses_relative(self) -> bool {
        matches!(self, PositionMode::Relative | PositionMode::SinusoidalRelative)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_x: usize,
    pub d_z: usize,
    pub h: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub position_mode: PositionMode,
    pub k: usize,
    pub dropout_rate: f64,
    pub causal: bool,
    pub edge_sharing: EdgeSharing,
    pub use_a_k: bool,
    pub use_a_v: bool,
    pub kernel: RelativeKernel,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 3,
            d_x: 64,
            d_z: 32,
            h: 2,
            d_ff: 128,
            vocab_size: 64,
            position_mode: PositionMode::Relative,
            k: 4,
            dropout_rate: 0.0,
            causal: false,
            edge_sharing: EdgeSharing::PerLayerAndHead,
            use_a_k: true,
            use_a_v: true,
            kernel: RelativeKernel::Efficient,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("d_x", self.d_x),
            ("d_z", self.d_z),
            ("h", self.h),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be at least 1")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Invalid("vocab_size must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Invalid(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        if self.position_mode.uses_sinusoids() && !self.d_x.is_multiple_of(2) {
            return Err(Error::Invalid(format!("sinusoidal encodings need an even d_x, got {}", self.d_x)));
        }
        self.attention_config().validate()
    }

    pub fn attention_config(&self) -> AttentionConfig {
        let relative = self.position_mode.uses_relative();
        AttentionConfig {
            d_x: self.d_x,
            d_z: self.d_z,
            h: self.h,
            k: self.k,
            d_a: self.d_z,
            mode: if relative { AttentionMode::Relative } else { AttentionMode::Baseline },
            use_a_k: relative && self.use_a_k,
            use_a_v: relative && self.use_a_v,
            causal_mask: self.causal,
            edge_sharing: self.edge_sharing,
            kernel: self.kernel,
        }
    }
}

/// One encoder layer. `tables` is present when edges are owned per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = Tensor> {
    pub attn: AttentionParams<T>,
    pub tables: Option<RelativeEmbeddingTables<T>>,
    pub w_1: T,
    pub b_1: T,
    pub w_2: T,
    pub b_2: T,
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub embedding: T,
    /// Edge tables shared by every layer (per-model sharing only).
    pub tables: Option<RelativeEmbeddingTables<T>>,
    pub layers: Vec<LayerParams<T>>,
    pub head_w: T,
    pub head_b: T,
}

impl<T> LayerParams<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> LayerParams<U> {
        let mut named = |name: &str, t: &T| f(&format!("{prefix}.{name}"), t);
        LayerParams {
            attn: self.attn.map(|name, t| named(&format!("attn.{name}"), t)),
            tables: self.tables.as_ref().map(|tb| RelativeEmbeddingTables {
                k: tb.k,
                w_k: named("tables.w_k", &tb.w_k),
                w_v: named("tables.w_v", &tb.w_v),
            }),
            w_1: named("ffn.w_1", &self.w_1),
            b_1: named("ffn.b_1", &self.b_1),
            w_2: named("ffn.w_2", &self.w_2),
            b_2: named("ffn.b_2", &self.b_2),
            ln1_gain: named("ln1.gain", &self.ln1_gain),
            ln1_bias: named("ln1.bias", &self.ln1_bias),
            ln2_gain: named("ln2.gain", &self.ln2_gain),
            ln2_bias: named("ln2.bias", &self.ln2_bias),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        for (name, t) in self.attn.named_mut() {
            f(&format!("{prefix}.attn.{name}"), t);
        }
        if let Some(tb) = self.tables.as_mut() {
            f(&format!("{prefix}.tables.w_k"), &mut tb.w_k);
            f(&format!("{prefix}.tables.w_v"), &mut tb.w_v);
        }
        let rest = [
            ("ffn.w_1", &mut self.w_1),
            ("ffn.b_1", &mut self.b_1),
            ("ffn.w_2", &mut self.w_2),
            ("ffn.b_2", &mut self.b_2),
            ("ln1.gain", &mut self.ln1_gain),
            ("ln1.bias", &mut self.ln1_bias),
            ("ln2.gain", &mut self.ln2_gain),
            ("ln2.bias", &mut self.ln2_bias),
        ];
        for (name, t) in rest {
            f(&format!("{prefix}.{name}"), t);
        }
    }
}

impl<T> ModelParams<T> {
    /// Applies `f` to every parameter with its dotted name, in a fixed order.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        let embedding = f("embedding", &self.embedding);
        let tables = self.tables.as_ref().map(|tb| RelativeEmbeddingTables {
            k: tb.k,
            w_k: f("tables.w_k", &tb.w_k),
            w_v: f("tables.w_v", &tb.w_v),
        });
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.map(&format!("layers.{i}"), &mut f))
            .collect();
        ModelParams {
            embedding,
            tables,
            layers,
            head_w: f("head.w", &self.head_w),
            head_b: f("head.b", &self.head_b),
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        f("embedding", &mut self.embedding);
        if let Some(tb) = self.tables.as_mut() {
            f("tables.w_k", &mut tb.w_k);
            f("tables.w_v", &mut tb.w_v);
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("layers.{i}"), &mut f);
        }
        f("head.w", &mut self.head_w);
        f("head.b", &mut self.head_b);
    }

    /// Parameters in the same order as [`ModelParams::map`].
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        if let Some(tb) = &self.tables {
            out.push(("tables.w_k".into(), &tb.w_k));
            out.push(("tables.w_v".into(), &tb.w_v));
        }
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in l.attn.named() {
                out.push((format!("layers.{i}.attn.{name}"), t));
            }
            if let Some(tb) = &l.tables {
                out.push((format!("layers.{i}.tables.w_k"), &tb.w_k));
                out.push((format!("layers.{i}.tables.w_v"), &tb.w_v));
            }
            let rest = [
                ("ffn.w_1", &l.w_1),
                ("ffn.b_1", &l.b_1),
                ("ffn.w_2", &l.w_2),
                ("ffn.b_2", &l.b_2),
                ("ln1.gain", &l.ln1_gain),
                ("ln1.bias", &l.ln1_bias),
                ("ln2.gain", &l.ln2_gain),
                ("ln2.bias", &l.ln2_bias),
            ];
            for (name, t) in rest {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }
}

impl ModelParams<Tensor> {
    /// Seeded initialization.
    ///
    /// Embeddings are uniform with variance `1/d_x`, so they have unit scale
    /// after the `sqrt(d_x)` multiplier. Dense layers are uniform in
    /// `±1/sqrt(fan_in)`; layer norms start at gain 1 and bias 0.
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let acfg = cfg.attention_config();
        let relative = cfg.position_mode.uses_relative();
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let embedding = Tensor::uniform(&[cfg.vocab_size, cfg.d_x], (3.0 / cfg.d_x as f64).sqrt(), rng)?;
        let tables = if relative && cfg.edge_sharing == EdgeSharing::PerModel {
            Some(RelativeEmbeddingTables::init(cfg.k, cfg.d_z, 1, rng)?)
        } else {
            None
        };
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for _ in 0..cfg.num_layers {
            let attn = AttentionParams::init(&acfg, rng)?;
            let tables = if relative && cfg.edge_sharing != EdgeSharing::PerModel {
                Some(RelativeEmbeddingTables::init(cfg.k, cfg.d_z, acfg.table_groups(), rng)?)
            } else {
                None
            };
            layers.push(LayerParams {
                attn,
                tables,
                w_1: Tensor::uniform(&[cfg.d_x, cfg.d_ff], fan(cfg.d_x), rng)?,
                b_1: Tensor::uniform(&[cfg.d_ff], fan(cfg.d_x), rng)?,
                w_2: Tensor::uniform(&[cfg.d_ff, cfg.d_x], fan(cfg.d_ff), rng)?,
                b_2: Tensor::uniform(&[cfg.d_x], fan(cfg.d_ff), rng)?,
                ln1_gain: Tensor::ones(&[cfg.d_x])?,
                ln1_bias: Tensor::zeros(&[cfg.d_x])?,
                ln2_gain: Tensor::ones(&[cfg.d_x])?,
                ln2_bias: Tensor::zeros(&[cfg.d_x])?,
            });
        }
        Ok(Self {
            embedding,
            tables,
            layers,
            head_w: Tensor::uniform(&[cfg.d_x, cfg.vocab_size], fan(cfg.d_x), rng)?,
            head_b: Tensor::uniform(&[cfg.vocab_size], fan(cfg.d_x), rng)?,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// `n×d` table with `sin(pos/10000^(2i/d))` in even columns and the matching
/// cosine in odd columns.
pub fn sinusoidal_encoding(n: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Invalid(format!("sinusoidal encoding needs an even width, got {d}")));
    }
    Tensor::from_fn(&[n, d], |flat| {
        let (pos, col) = ((flat / d) as f64, flat % d);
        let freq = 10000f64.powf((col - col % 2) as f64 / d as f64);
        if col % 2 == 0 {
            (pos / freq).sin()
        } else {
            (pos / freq).cos()
        }
    })
}

/// Inverted dropout; only active when a generator is supplied.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn RngCore,
}

impl Dropout<'_> {
    fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = g.shape(x).to_vec();
        let rng = &mut *self.rng;
        let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })?;
        g.mul_const(x, mask)
    }
}

fn maybe_dropout(g: &mut Graph, x: Var, dropout: &mut Option<Dropout<'_>>) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(g, x),
        None => Ok(x),
    }
}

/// `max(0, x·w_1 + b_1)·w_2 + b_2`, applied at every position.
pub fn feed_forward(g: &mut Graph, x: Var, layer: &LayerParams<Var>) -> Result<Var> {
    let a = g.matmul(x, layer.w_1)?;
    let a = g.add_suffix(a, layer.b_1)?;
    let a = g.relu(a);
    let out = g.matmul(a, layer.w_2)?;
    g.add_suffix(out, layer.b_2)
}

/// `y = LN(x + MultiHead(x))`, `out = LN(y + FFN(y))`, with dropout on each
/// sublayer output before the residual add.
pub fn encoder_layer_forward(
    g: &mut Graph,
    x: Var,
    layer: &LayerParams<Var>,
    tables: Option<&RelativeEmbeddingTables<Var>>,
    cfg: &EncoderConfig,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    let attn = multi_head_forward(g, x, &layer.attn, tables, &cfg.attention_config())?;
    let attn = maybe_dropout(g, attn, dropout)?;
    let res = g.add(x, attn)?;
    let y = g.layer_norm(res, layer.ln1_gain, layer.ln1_bias, LAYER_NORM_EPS)?;
    let ff = feed_forward(g, y, layer)?;
    let ff = maybe_dropout(g, ff, dropout)?;
    let res = g.add(y, ff)?;
    g.layer_norm(res, layer.ln2_gain, layer.ln2_bias, LAYER_NORM_EPS)
}

/// Token ids `b×n` to logits `b×n×vocab_size`.
pub fn model_forward(
    g: &mut Graph,
    tokens: &Indices,
    params: &ModelParams<Var>,
    cfg: &EncoderConfig,
    mut dropout: Option<Dropout<'_>>,
) -> Result<Var> {
    if tokens.shape().len() != 2 {
        return Err(Error::InvalidShape {
            shape: tokens.shape().to_vec(),
            reason: "tokens must be batch×length".into(),
        });
    }
    if let Some(&bad) = tokens.data().iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Invalid(format!("token {bad} outside vocabulary of size {}", cfg.vocab_size)));
    }
    if dropout.as_ref().is_some_and(|d| d.rate != cfg.dropout_rate) {
        return Err(Error::Invalid("dropout rate differs from the model config".into()));
    }
    let n = tokens.shape()[1];
    let emb = g.gather_rows(params.embedding, tokens)?;
    let mut x = g.scale(emb, (cfg.d_x as f64).sqrt());
    if cfg.position_mode.uses_sinusoids() {
        let pe = g.constant(sinusoidal_encoding(n, cfg.d_x)?);
        x = g.add_suffix(x, pe)?;
    }
    x = maybe_dropout(g, x, &mut dropout)?;
    for layer in &params.layers {
        let tables = layer.tables.as_ref().or(params.tables.as_ref());
        x = encoder_layer_forward(g, x, layer, tables, cfg, &mut dropout)?;
    }
    let logits = g.matmul(x, params.head_w)?;
    g.add_suffix(logits, params.head_b)
}

/// Evaluation-mode forward pass on plain tensors.
pub fn predict_logits(params: &ModelParams, tokens: &Indices, cfg: &EncoderConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = params.map(|_, t| g.constant(t.clone()));
    let out = model_forward(&mut g, tokens, &vars, cfg, None)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests;
