use super::*;
use crate::numerics::{finite_diff_grad, grads_close};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(position_mode: PositionMode, k: usize) -> EncoderConfig {
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

fn tokens(b: usize, data: &[usize]) -> Indices {
    Indices::new(&[b, data.len() / b], data.to_vec()).unwrap()
}

#[test]
fn sinusoid_examples() {
    let pe = sinusoidal_encoding(3, 4).unwrap();
    assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
    assert!((pe.at(&[1, 0]) - 0.841471).abs() < 1e-6);
    assert_eq!(pe.at(&[1, 0]), 1f64.sin());
    assert_eq!(pe.at(&[1, 3]), (1.0 / 100.0f64).cos());
    assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(sinusoidal_encoding(3, 5).is_err());
}

#[test]
fn sinusoid_rows_are_distinct() {
    for d in [2, 8] {
        let n = 10_000;
        let pe = sinusoidal_encoding(n, d).unwrap();
        let mut rows: Vec<&[f64]> = pe.data().chunks(d).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(rows.windows(2).all(|w| w[0] != w[1]), "d = {d}");
    }
}

fn layer_vars(g: &mut Graph, layer: &LayerParams) -> LayerParams<Var> {
    let mut params = ModelParams {
        embedding: Tensor::zeros(&[1, 1]).unwrap(),
        tables: None,
        layers: vec![layer.clone()],
        head_w: Tensor::zeros(&[1, 1]).unwrap(),
        head_b: Tensor::zeros(&[1]).unwrap(),
    }
    .map(|_, t| g.param(t.clone()));
    params.layers.remove(0)
}

fn random_layer(cfg: &EncoderConfig, seed: u64) -> LayerParams {
    ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().layers.remove(0)
}

#[test]
fn feed_forward_bias_paths() {
    let cfg = tiny(PositionMode::None, 0);
    let mut layer = random_layer(&cfg, 1);
    layer.w_1 = Tensor::zeros(&[8, 16]).unwrap();
    layer.w_2 = Tensor::zeros(&[16, 8]).unwrap();
    layer.b_2 = Tensor::full(&[8], 0.25).unwrap();
    let x = Tensor::uniform(&[2, 3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut g = Graph::new();
    let lv = layer_vars(&mut g, &layer);
    let xv = g.constant(x.clone());
    let out = feed_forward(&mut g, xv, &lv).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.25));

    // all pre-activations negative: only b_2 survives the ReLU
    let mut layer = random_layer(&cfg, 3);
    layer.w_1 = Tensor::zeros(&[8, 16]).unwrap();
    layer.b_1 = Tensor::full(&[16], -1.0).unwrap();
    let mut g = Graph::new();
    let lv = layer_vars(&mut g, &layer);
    let xv = g.constant(x);
    let out = feed_forward(&mut g, xv, &lv).unwrap();
    for row in g.value(out).data().chunks(8) {
        assert_eq!(row, layer.b_2.data());
    }
}

#[test]
fn feed_forward_gradients() {
    let cfg = tiny(PositionMode::None, 0);
    let layer = random_layer(&cfg, 4);
    let x = Tensor::uniform(&[1, 3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let loss = |w_1: &Tensor| {
        let mut l = layer.clone();
        l.w_1 = w_1.clone();
        let mut g = Graph::new();
        let lv = layer_vars(&mut g, &l);
        let xv = g.constant(x.clone());
        let out = feed_forward(&mut g, xv, &lv).unwrap();
        let sq = g.mul(out, out).unwrap();
        let s = g.sum(sq);
        let grad = g.backward(s).unwrap().get(lv.w_1).unwrap().clone();
        (g.value(s).item(), grad)
    };
    let numeric = finite_diff_grad(|t| loss(t).0, &layer.w_1, 1e-5);
    grads_close(&loss(&layer.w_1).1, &numeric, 1e-4, 1e-7).unwrap();
}

#[test]
fn zero_sublayers_reduce_to_double_norm() {
    let cfg = tiny(PositionMode::None, 0);
    let mut layer = random_layer(&cfg, 6);
    layer.attn = layer.attn.map(|_, t| Tensor::zeros(t.shape()).unwrap());
    for t in [&mut layer.w_1, &mut layer.b_1, &mut layer.w_2, &mut layer.b_2] {
        *t = Tensor::zeros(t.shape()).unwrap();
    }
    let x = Tensor::uniform(&[2, 4, 8], 2.0, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let mut g = Graph::new();
    let lv = layer_vars(&mut g, &layer);
    let xv = g.constant(x.clone());
    let out = encoder_layer_forward(&mut g, xv, &lv, None, &cfg, &mut None).unwrap();
    let ones = Tensor::ones(&[8]).unwrap();
    let zeros = Tensor::zeros(&[8]).unwrap();
    let once = crate::numerics::layer_norm(&x, &ones, &zeros, LAYER_NORM_EPS).unwrap();
    let twice = crate::numerics::layer_norm(&once, &ones, &zeros, LAYER_NORM_EPS).unwrap();
    assert!(g.value(out).max_abs_diff(&twice).unwrap() < 1e-12);
}

#[test]
fn single_position_is_finite() {
    let cfg = EncoderConfig {
        num_layers: 1,
        ..tiny(PositionMode::Relative, 3)
    };
    let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let logits = predict_logits(&params, &tokens(1, &[4]), &cfg).unwrap();
    assert_eq!(logits.shape(), &[1, 1, 7]);
    assert!(logits.is_finite());
}

fn permuted_logits_deviation(cfg: &EncoderConfig, seed: u64) -> f64 {
    let params = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let toks = [1, 5, 2, 6, 3, 4];
    let perm = [4, 2, 0, 5, 1, 3];
    let moved: Vec<usize> = perm.iter().map(|&p| toks[p]).collect();
    let a = predict_logits(&params, &tokens(1, &toks), cfg).unwrap();
    let b = predict_logits(&params, &tokens(1, &moved), cfg).unwrap();
    let v = cfg.vocab_size;
    let mut worst: f64 = 0.0;
    for (i, &p) in perm.iter().enumerate() {
        for c in 0..v {
            worst = worst.max((b.at(&[0, i, c]) - a.at(&[0, p, c])).abs());
        }
    }
    worst
}

#[test]
fn equivariance_dichotomy() {
    for seed in 0..3 {
        assert!(permuted_logits_deviation(&tiny(PositionMode::None, 0), seed) <= 1e-12);
        assert!(permuted_logits_deviation(&tiny(PositionMode::Relative, 0), seed) <= 1e-12);
        assert!(permuted_logits_deviation(&tiny(PositionMode::Sinusoidal, 0), seed) > 1e-6);
        assert!(permuted_logits_deviation(&tiny(PositionMode::Relative, 2), seed) > 1e-6);
    }
}

#[test]
fn causal_logits_ignore_future_tokens() {
    let cfg = EncoderConfig {
        causal: true,
        ..tiny(PositionMode::Relative, 2)
    };
    let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let base = [1, 2, 3, 4, 5, 6];
    let a = predict_logits(&params, &tokens(1, &base), &cfg).unwrap();
    for cut in 0..5 {
        let mut changed = base;
        for t in changed.iter_mut().skip(cut + 1) {
            *t = (*t + 3) % 7;
        }
        let b = predict_logits(&params, &tokens(1, &changed), &cfg).unwrap();
        for i in 0..=cut {
            for c in 0..7 {
                assert_eq!(a.at(&[0, i, c]), b.at(&[0, i, c]));
            }
        }
    }
}

fn model_loss(cfg: &EncoderConfig, params: &ModelParams, toks: &Indices, targets: &Indices) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let vars = params.map(|_, t| g.param(t.clone()));
    let logits = model_forward(&mut g, toks, &vars, cfg, None).unwrap();
    let loss = g.label_smoothed_ce(logits, targets, 0.1, None).unwrap();
    let grads = g.backward(loss).unwrap();
    let list = vars.named().into_iter().map(|(_, &v)| grads.get(v).unwrap().clone()).collect();
    (g.value(loss).item(), list)
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for mode in [PositionMode::Relative, PositionMode::SinusoidalRelative] {
        let cfg = tiny(mode, 2);
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let toks = tokens(1, &[1, 6, 2, 0, 5]);
        let targets = tokens(1, &[5, 0, 2, 6, 1]);
        let (_, analytic) = model_loss(&cfg, &params, &toks, &targets);
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        for (idx, name) in names.iter().enumerate() {
            let base = params.named()[idx].1.clone();
            let numeric = finite_diff_grad(
                |t| {
                    let mut p = params.clone();
                    p.visit_mut(|n, slot| {
                        if n == name {
                            *slot = t.clone();
                        }
                    });
                    model_loss(&cfg, &p, &toks, &targets).0
                },
                &base,
                1e-5,
            );
            grads_close(&analytic[idx], &numeric, 1e-4, 1e-7).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}

#[test]
fn parameter_layout_follows_sharing() {
    let mut cfg = tiny(PositionMode::Relative, 1);
    cfg.edge_sharing = EdgeSharing::PerModel;
    let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(p.tables.is_some() && p.layers.iter().all(|l| l.tables.is_none()));
    cfg.edge_sharing = EdgeSharing::PerLayer;
    let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(p.layers[0].tables.as_ref().unwrap().w_k.shape(), &[1, 3, 4]);
    cfg.edge_sharing = EdgeSharing::PerLayerAndHead;
    let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(p.layers[0].tables.as_ref().unwrap().w_k.shape(), &[2, 3, 4]);
    let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
    let mapped: Vec<String> = {
        let mut v = Vec::new();
        p.map(|n, _| v.push(n.to_string()));
        v
    };
    assert_eq!(names, mapped);
    let base = ModelParams::init(&tiny(PositionMode::None, 1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(base.named().iter().all(|(n, _)| !n.contains("tables")));
}

#[test]
fn rejects_bad_tokens_and_configs() {
    let cfg = tiny(PositionMode::None, 0);
    let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let err = predict_logits(&params, &tokens(1, &[1, 7]), &cfg).unwrap_err();
    assert!(err.to_string().contains("token 7"));
    let odd = EncoderConfig {
        d_x: 7,
        ..tiny(PositionMode::Sinusoidal, 0)
    };
    assert!(odd.validate().is_err());
    let bad_dropout = EncoderConfig {
        dropout_rate: 1.0,
        ..cfg
    };
    assert!(bad_dropout.validate().is_err());
}

#[test]
fn dropout_only_in_training_mode() {
    let cfg = EncoderConfig {
        dropout_rate: 0.3,
        ..tiny(PositionMode::Relative, 1)
    };
    let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let toks = tokens(1, &[1, 2, 3, 4]);
    let eval_a = predict_logits(&params, &toks, &cfg).unwrap();
    let eval_b = predict_logits(&params, &toks, &cfg).unwrap();
    assert_eq!(eval_a, eval_b);
    let mut g = Graph::new();
    let vars = params.map(|_, t| g.constant(t.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let drop = Dropout {
        rate: 0.3,
        rng: &mut rng,
    };
    let out = model_forward(&mut g, &toks, &vars, &cfg, Some(drop)).unwrap();
    assert!(g.value(out).max_abs_diff(&eval_a).unwrap() > 1e-6);
}

#[test]
fn checkpoint_round_trip() {
    let cfg = tiny(PositionMode::SinusoidalRelative, 2);
    let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
    let ckpt = Checkpoint {
        seed: 13,
        config: cfg,
        params,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);

    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("\"head.b\"", "\"head.c\"")).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    let missing = load_checkpoint(&dir.path().join("absent.json")).unwrap_err();
    assert!(matches!(missing, Error::Io { .. }));
}
