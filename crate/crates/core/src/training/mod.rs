//! Toy-task training harness: Adam with warmup, label smoothing, synthetic
//! position-sensitive tasks, and per-length evaluation.

mod data;
mod optim;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{relative_storage_report, StorageReport};
use crate::error::{Error, Result};
use crate::model::{model_forward, predict_logits, Checkpoint, Dropout, EncoderConfig, ModelParams};
use crate::numerics::{ops, Graph, Tensor};

pub use data::{
    chance_accuracy, make_toy_dataset, uniform_chance, Batch, BatchStream, DataSpec, Task, BOS, EOS, FIRST_CONTENT,
    PAD,
};
pub use optim::{adam_step, lr_schedule, AdamConfig, OptimizerState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub task: Task,
    pub train_min_len: usize,
    pub train_max_len: usize,
    pub eval_lengths: Vec<usize>,
    pub batch_size: usize,
    pub steps: u64,
    pub warmup_steps: u64,
    /// Multiplier on the scheduled learning rate.
    pub lr_scale: f64,
    pub adam: AdamConfig,
    pub label_smoothing: f64,
    pub seed: u64,
    pub framed: bool,
    /// Batches generated per length when measuring accuracy.
    pub eval_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            task: Task::Reverse,
            train_min_len: 4,
            train_max_len: 12,
            eval_lengths: vec![16, 20, 24],
            batch_size: 32,
            steps: 3000,
            warmup_steps: 400,
            lr_scale: 2.0,
            adam: AdamConfig::default(),
            label_smoothing: 0.1,
            seed: 0,
            framed: true,
            eval_batches: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.data_spec().validate()?;
        if self.warmup_steps < 1 {
            return Err(Error::Invalid("warmup_steps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Invalid(format!(
                "label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return Err(Error::Invalid("lr_scale must be positive".into()));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Invalid("adam betas must be in [0, 1) and eps positive".into()));
        }
        if self.eval_lengths.contains(&0) {
            return Err(Error::Invalid("eval lengths must be at least 1".into()));
        }
        if self.eval_batches == 0 {
            return Err(Error::Invalid("eval_batches must be at least 1".into()));
        }
        Ok(())
    }

    pub fn data_spec(&self) -> DataSpec {
        DataSpec {
            task: self.task,
            min_len: self.train_min_len,
            max_len: self.train_max_len,
            vocab_size: self.encoder.vocab_size,
            batch_size: self.batch_size,
            framed: self.framed,
        }
    }
}

/// Everything a run reports. Wall-clock figures live in [`TrainOutcome`] so
/// that identical configs give identical metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub losses: Vec<f64>,
    /// Mean loss over the last tenth of training.
    pub final_loss: f64,
    /// Mean per-length token accuracy over the training range.
    pub train_accuracy: f64,
    /// Mean per-length token accuracy over `eval_lengths`.
    pub eval_accuracy: Option<f64>,
    pub per_length_accuracy: BTreeMap<usize, f64>,
    pub chance_accuracy: f64,
    pub uniform_chance: f64,
    /// Entropy of the smoothed target distribution, a lower bound on the loss.
    pub loss_floor: f64,
    pub parameter_count: usize,
    pub storage: Option<StorageReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: RunMetrics,
    pub checkpoint: Checkpoint,
    pub steps_per_sec: f64,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MetricEvent {
    Step { step: u64, loss: f64, lr: f64 },
    Eval { length: usize, accuracy: f64 },
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed for the evaluation data at one length; disjoint from training.
fn eval_seed(seed: u64, length: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (length as u64).wrapping_mul(0xD1B5_4A32_D192_ED03) ^ 0xE7A1
}

fn take_flat(params: &mut ModelParams) -> Vec<Tensor> {
    let mut flat = Vec::new();
    params.visit_mut(|_, t| flat.push(std::mem::replace(t, Tensor::scalar(0.0))));
    flat
}

fn put_flat(params: &mut ModelParams, flat: Vec<Tensor>) {
    let mut it = flat.into_iter();
    params.visit_mut(|_, t| *t = it.next().expect("same parameter count"));
}

pub fn train_run(cfg: &TrainConfig, sink: &mut dyn FnMut(&MetricEvent)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let enc = &cfg.encoder;
    let mut params = ModelParams::init(enc, &mut stream_rng(cfg.seed, 0))?;
    let mut data = BatchStream::new(cfg.data_spec(), cfg.seed.wrapping_add(0x5EED))?;
    let mut drop_rng = stream_rng(cfg.seed, 2);
    let mut state = OptimizerState::new(params.named().into_iter().map(|(_, t)| t));
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    let start = Instant::now();

    for step in 1..=cfg.steps {
        let batch = data.next_batch();
        let lr = cfg.lr_scale * lr_schedule(step, enc.d_x, cfg.warmup_steps);
        let (loss, grads) = {
            let mut g = Graph::new();
            let vars = params.map(|_, t| g.param(t.clone()));
            let dropout = (enc.dropout_rate > 0.0).then_some(Dropout {
                rate: enc.dropout_rate,
                rng: &mut drop_rng,
            });
            let diverged = |e| match e {
                Error::NonFinite { .. } => Error::Diverged { step: step as usize },
                e => e,
            };
            let logits = model_forward(&mut g, &batch.tokens, &vars, enc, dropout).map_err(diverged)?;
            let loss = g.label_smoothed_ce(logits, &batch.targets, cfg.label_smoothing, Some(PAD))?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { step: step as usize });
            }
            let mut all = g.backward(loss)?;
            let grads: Vec<Tensor> = vars
                .named()
                .into_iter()
                .map(|(_, &v)| all.take(v).expect("every parameter receives a gradient"))
                .collect();
            (value, grads)
        };
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step: step as usize });
        }
        let mut flat = take_flat(&mut params);
        adam_step(&mut flat, &grads, &mut state, lr, &cfg.adam)?;
        if flat.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { step: step as usize });
        }
        put_flat(&mut params, flat);
        losses.push(loss);
        sink(&MetricEvent::Step { step, loss, lr });
    }
    let elapsed = start.elapsed().as_secs_f64();

    let train_lengths: Vec<usize> = (cfg.train_min_len..=cfg.train_max_len).collect();
    let mut lengths = train_lengths.clone();
    lengths.extend(cfg.eval_lengths.iter().filter(|n| !train_lengths.contains(n)));
    let per_length = eval_lengths(&params, cfg, &lengths, cfg.seed)?;
    for (&length, &accuracy) in &per_length {
        sink(&MetricEvent::Eval { length, accuracy });
    }
    let mean = |ls: &[usize]| ls.iter().map(|n| per_length[n]).sum::<f64>() / ls.len() as f64;
    let tail = (losses.len() / 10).max(1).min(losses.len());
    let final_loss = if losses.is_empty() {
        f64::NAN
    } else {
        losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64
    };
    let framed_len = |n: usize| if cfg.framed { n + 2 } else { n };
    let storage = enc
        .position_mode
        .uses_relative()
        .then(|| relative_storage_report(&enc.attention_config(), framed_len(cfg.train_max_len), cfg.batch_size));
    let metrics = RunMetrics {
        final_loss,
        losses,
        train_accuracy: mean(&train_lengths),
        eval_accuracy: (!cfg.eval_lengths.is_empty()).then(|| mean(&cfg.eval_lengths)),
        per_length_accuracy: per_length,
        chance_accuracy: chance_accuracy(cfg.task, cfg.train_min_len, cfg.train_max_len, enc.vocab_size),
        uniform_chance: uniform_chance(enc.vocab_size),
        loss_floor: ops::smoothed_target_entropy(enc.vocab_size, cfg.label_smoothing),
        parameter_count: params.parameter_count(),
        storage,
    };
    Ok(TrainOutcome {
        metrics,
        checkpoint: Checkpoint {
            seed: cfg.seed,
            config: enc.clone(),
            params,
        },
        steps_per_sec: cfg.steps as f64 / elapsed.max(1e-9),
    })
}

/// Fraction of scored positions whose argmax prediction equals the target.
pub fn batch_accuracy(params: &ModelParams, enc: &EncoderConfig, batch: &Batch) -> Result<(usize, usize)> {
    let logits = predict_logits(params, &batch.tokens, enc)?;
    let v = enc.vocab_size;
    let mut correct = 0;
    let mut total = 0;
    for (row, &target) in logits.data().chunks(v).zip(batch.targets.data()) {
        if target == PAD {
            continue;
        }
        let best = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
            .0;
        total += 1;
        correct += usize::from(best == target);
    }
    Ok((correct, total))
}

/// Per-token accuracy on fresh data at each content length.
pub fn eval_lengths(
    params: &ModelParams,
    cfg: &TrainConfig,
    lengths: &[usize],
    seed: u64,
) -> Result<BTreeMap<usize, f64>> {
    let base = cfg.data_spec();
    let mut out = BTreeMap::new();
    for &n in lengths {
        if n == 0 {
            return Err(Error::Invalid("eval length must be at least 1".into()));
        }
        let batches = make_toy_dataset(&base.with_length(n), cfg.eval_batches, eval_seed(seed, n))?;
        let (mut correct, mut total) = (0, 0);
        for b in &batches {
            let (c, t) = batch_accuracy(params, &cfg.encoder, b)?;
            correct += c;
            total += t;
        }
        out.insert(n, correct as f64 / total as f64);
    }
    Ok(out)
}
