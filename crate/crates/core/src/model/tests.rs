use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::{train, Optimizer, TrainConfig, TrainExample};
use super::*;
use crate::divergence::js_divergence;
use crate::kvmem::{concat, extract_kv, KvMemory, TokenRole};

fn small_config() -> ModelConfig {
    ModelConfig {
        num_layers: 3,
        num_heads: 2,
        d_model: 16,
        vocab_size: 20,
        max_position: 256,
        rope_base: 10_000.0,
        rotary_dims: None,
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// Max elementwise difference relative to the reference's largest magnitude.
fn rel_diff(a: &Array2<f64>, reference: &Array2<f64>) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter()
        .zip(reference.iter())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

fn roles(n: usize) -> Vec<TokenRole> {
    vec![TokenRole::Image; n]
}

#[test]
fn config_validation() {
    assert!(small_config().validate().is_ok());
    let mut c = small_config();
    c.num_layers = 1;
    assert!(c.validate().is_err());
    let mut c = small_config();
    c.d_model = 15;
    assert!(c.validate().is_err());
}

#[test]
fn single_token_on_empty_memory() {
    let model = ToyTransformer::init(small_config(), 1).unwrap();
    let mem = KvMemory::for_model(&model);
    let batch = TokenBatch::after(&mem, vec![vec![3]]).unwrap();
    let trace = model.forward(&mem, &batch, Capture::attention_and_hidden()).unwrap();
    assert_eq!(trace.logits.len(), 1);
    assert_eq!(trace.logits[0].dim(), (1, 20));
    for layer in &trace.attention {
        assert_eq!(layer[0].dim(), (1, 1));
        assert!((layer[0].sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn attention_rows_normalized_and_hidden_starts_at_embedding() {
    let model = ToyTransformer::init(small_config(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let prefix = random_tokens(&mut rng, 9, 20);
    let mem = extract_kv(&model, &KvMemory::for_model(&model), &prefix, &roles(9), 0).unwrap();
    let rows = vec![random_tokens(&mut rng, 5, 20), random_tokens(&mut rng, 5, 20)];
    let batch = TokenBatch::after(&mem, rows).unwrap();
    let trace = model.forward(&mem, &batch, Capture::attention_and_hidden()).unwrap();
    for layer in &trace.attention {
        for row in layer {
            assert_eq!(row.ncols(), 9 + 5);
            for s in row.sum_axis(ndarray::Axis(1)) {
                assert!((s - 1.0).abs() < 1e-5);
            }
            assert!(row.iter().all(|&a| a >= 0.0));
        }
    }
    let emb = model.embed(&batch).unwrap();
    assert_eq!(trace.hidden[0], emb);
}

#[test]
fn head_sum_is_num_heads_times_mean() {
    let model = ToyTransformer::init(small_config(), 4).unwrap();
    let mem = KvMemory::for_model(&model);
    let batch = TokenBatch::after(&mem, vec![vec![1, 2, 3, 4]]).unwrap();
    let mean = model.forward(&mem, &batch, Capture::attention_and_hidden()).unwrap();
    let sum_capture = Capture {
        heads: HeadReduce::Sum,
        ..Capture::attention_and_hidden()
    };
    let sum = model.forward(&mem, &batch, sum_capture).unwrap();
    let scaled = &mean.attention[1][0] * 2.0;
    assert!(rel_diff(&sum.attention[1][0], &scaled) < 1e-12);
}

#[test]
fn forward_is_deterministic() {
    let model = ToyTransformer::init(small_config(), 5).unwrap();
    let mem = KvMemory::for_model(&model);
    let batch = TokenBatch::after(&mem, vec![vec![4, 9, 1, 0, 7]]).unwrap();
    let a = model.forward(&mem, &batch, Capture::none()).unwrap();
    let b = model.forward(&mem, &batch, Capture::none()).unwrap();
    assert!(a.logits[0].iter().zip(b.logits[0].iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn chunked_forward_matches_single_pass() {
    let model = ToyTransformer::init(small_config(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let n = rng.random_range(3..40);
        let tokens = random_tokens(&mut rng, n, 20);
        let split = rng.random_range(1..n);
        let empty = KvMemory::for_model(&model);
        let full = model
            .forward(&empty, &TokenBatch::new(vec![tokens.clone()], 0).unwrap(), Capture::none())
            .unwrap();
        let prefix = extract_kv(&model, &empty, &tokens[..split], &roles(split), 0).unwrap();
        let suffix = model
            .forward(&prefix, &TokenBatch::after(&prefix, vec![tokens[split..].to_vec()]).unwrap(), Capture::none())
            .unwrap();
        let reference = full.logits[0].slice(ndarray::s![split.., ..]).to_owned();
        assert!(rel_diff(&suffix.logits[0], &reference) < 1e-5);
    }
}

#[test]
fn extract_then_concat_matches_single_pass() {
    let model = ToyTransformer::init(small_config(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tokens = random_tokens(&mut rng, 30, 20);
    let empty = KvMemory::for_model(&model);
    let a = extract_kv(&model, &empty, &tokens[..12], &roles(12), 0).unwrap();
    let b = extract_kv(&model, &a, &tokens[12..29], &roles(17), 1).unwrap();
    assert_eq!(b.layer_lens(), vec![17; 3]);
    let mem = concat(&a, &b).unwrap();
    let probe = model
        .forward(&mem, &TokenBatch::after(&mem, vec![vec![tokens[29]]]).unwrap(), Capture::none())
        .unwrap();
    let full = model
        .forward(&empty, &TokenBatch::new(vec![tokens.clone()], 0).unwrap(), Capture::none())
        .unwrap();
    let reference = full.logits[0].slice(ndarray::s![29.., ..]).to_owned();
    assert!(rel_diff(&probe.logits[0], &reference) < 1e-5);
}

#[test]
fn extracted_kv_depends_on_previous_memory() {
    let model = ToyTransformer::init(small_config(), 8).unwrap();
    let empty = KvMemory::for_model(&model);
    let m1 = extract_kv(&model, &empty, &[1, 2, 3, 4], &roles(4), 0).unwrap();
    let m2 = extract_kv(&model, &empty, &[9, 8, 7, 6], &roles(4), 0).unwrap();
    let c1 = extract_kv(&model, &m1, &[5, 5, 5], &roles(3), 1).unwrap();
    let c2 = extract_kv(&model, &m2, &[5, 5, 5], &roles(3), 1).unwrap();
    let diff = (&c1.layer(2).values - &c2.layer(2).values).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(diff > 0.0);
    // Layer 0 keys depend only on the chunk's own tokens and positions.
    assert_eq!(c1.layer(0).keys, c2.layer(0).keys);
}

#[test]
fn forward_from_layer_reproduces_full_forward() {
    let model = ToyTransformer::init(small_config(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let empty = KvMemory::for_model(&model);
    let ctx = random_tokens(&mut rng, 20, 20);
    let mem = extract_kv(&model, &empty, &ctx, &roles(20), 0).unwrap();
    let batch = TokenBatch::after(&mem, vec![random_tokens(&mut rng, 6, 20), random_tokens(&mut rng, 6, 20)]).unwrap();
    let full = model.forward(&mem, &batch, Capture::attention_and_hidden()).unwrap();
    for start in 0..3 {
        let resumed = model
            .forward_from_layer(&mem, &full.hidden[start], start, batch.start(), Capture::none())
            .unwrap();
        for (a, b) in resumed.logits.iter().zip(&full.logits) {
            assert!(rel_diff(a, b) < 1e-5, "start layer {start}");
        }
    }
}

#[test]
fn truncated_top_layer_changes_output() {
    let model = ToyTransformer::init(small_config(), 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let empty = KvMemory::for_model(&model);
    let ctx = random_tokens(&mut rng, 16, 20);
    let mem = extract_kv(&model, &empty, &ctx, &roles(16), 0).unwrap();
    let batch = TokenBatch::after(&mem, vec![random_tokens(&mut rng, 4, 20)]).unwrap();
    let full = model.forward(&mem, &batch, Capture::attention_and_hidden()).unwrap();
    let pruned = crate::kvmem::prune_layer(
        &mem,
        &crate::kvmem::LayerSelection { layer: 2, kept_indices: vec![0] },
    )
    .unwrap();
    let resumed = model
        .forward_from_layer(&pruned, &full.hidden[2], 2, batch.start(), Capture::none())
        .unwrap();
    let js = js_divergence(&resumed.probs(0, 3), &full.probs(0, 3)).unwrap();
    assert!(js > 0.0);
}

#[test]
fn logits_ignore_storage_order() {
    let model = ToyTransformer::init(small_config(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let empty = KvMemory::for_model(&model);
    let ctx = random_tokens(&mut rng, 12, 20);
    let mem = extract_kv(&model, &empty, &ctx, &roles(12), 0).unwrap();
    let perms: Vec<Vec<usize>> = (0..3).map(|l| (0..12).map(|i| (i * 5 + l) % 12).collect()).collect();
    let shuffled = mem.permuted_storage(&perms);
    let batch = TokenBatch::after(&mem, vec![random_tokens(&mut rng, 3, 20)]).unwrap();
    let a = model.forward(&mem, &batch, Capture::none()).unwrap();
    let b = model.forward(&shuffled, &batch, Capture::none()).unwrap();
    let max = a.logits[0].iter().zip(b.logits[0].iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    assert!(max < 1e-6);
}

#[test]
fn forward_errors() {
    let model = ToyTransformer::init(small_config(), 12).unwrap();
    let empty = KvMemory::for_model(&model);
    let over = TokenBatch::new(vec![vec![1, 2]], 255).unwrap();
    assert!(matches!(model.forward(&empty, &over, Capture::none()), Err(Error::PositionOverflow { .. })));
    let wrong = KvMemory::empty(2, 16);
    let batch = TokenBatch::new(vec![vec![1]], 0).unwrap();
    assert!(matches!(model.forward(&wrong, &batch, Capture::none()), Err(Error::LayerMismatch { .. })));
    let bad_tok = TokenBatch::new(vec![vec![20]], 0).unwrap();
    assert!(matches!(model.forward(&empty, &bad_tok, Capture::none()), Err(Error::TokenOutOfRange { .. })));
    let mem = extract_kv(&model, &empty, &[1, 2, 3], &roles(3), 0).unwrap();
    let early = TokenBatch::new(vec![vec![1]], 1).unwrap();
    assert!(matches!(model.forward(&mem, &early, Capture::none()), Err(Error::PositionOrder { .. })));
    let h = vec![Array2::zeros((2, 16))];
    assert!(model.forward_from_layer(&mem, &h, 3, 3, Capture::none()).is_err());
    let narrow = vec![Array2::zeros((2, 8))];
    assert!(model.forward_from_layer(&mem, &narrow, 1, 3, Capture::none()).is_err());
}

#[test]
fn corrupt_weights_are_reported() {
    let mut model = ToyTransformer::init(small_config(), 13).unwrap();
    model.weights_mut().layers[1].w_up[[0, 0]] = f64::NAN;
    let empty = KvMemory::for_model(&model);
    let batch = TokenBatch::new(vec![vec![1, 2]], 0).unwrap();
    assert!(matches!(model.forward(&empty, &batch, Capture::none()), Err(Error::NonFinite { layer: 1 })));
    assert!(ToyTransformer::from_weights(model.config().clone(), model.weights().clone()).is_err());
}

#[test]
fn gradient_matches_central_differences() {
    let cfg = ModelConfig {
        num_layers: 2,
        num_heads: 2,
        d_model: 8,
        vocab_size: 12,
        max_position: 64,
        rope_base: 10_000.0,
        rotary_dims: Some(2),
    };
    let model = ToyTransformer::init(cfg, 21).unwrap();
    let example = TrainExample {
        tokens: vec![3, 7, 1, 11, 0, 5, 5, 9, 2],
        loss_positions: vec![1, 4, 6, 7],
    };
    let (_, grad) = model.loss_and_grad(&example).unwrap();
    let eps = 1e-4;
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut names = Vec::new();
    grad.visit(|name, _, data| names.push((name.to_owned(), data.to_vec())));
    for (name, analytic) in names {
        let mut group_worst = 0.0f64;
        for (i, &a) in analytic.iter().enumerate() {
            let shifted = |delta: f64| {
                let mut m = model.clone();
                m.weights_mut().visit_mut(|n, d| {
                    if n == name {
                        d[i] += delta;
                    }
                });
                m.loss(&example).unwrap()
            };
            let numeric = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            group_worst = group_worst.max(rel);
        }
        worst.push((name, group_worst));
    }
    for (name, err) in &worst {
        assert!(*err <= 1e-4, "{name}: relative error {err:e}");
    }
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let model = ToyTransformer::init(small_config(), 30).unwrap();
    let data = vec![TrainExample {
        tokens: vec![1, 2, 3, 4, 5],
        loss_positions: vec![2, 3],
    }];
    for optimizer in [Optimizer::Sgd { momentum: 0.9 }, Optimizer::adam()] {
        let cfg = TrainConfig {
            steps: 1,
            learning_rate: 0.0,
            optimizer,
            ..TrainConfig::default()
        };
        let (trained, log) = train(&model, &data, &cfg).unwrap();
        assert_eq!(trained.weights(), model.weights());
        assert_eq!(log.losses.len(), 1);
    }
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let model = ToyTransformer::init(small_config(), 31).unwrap();
    // Copy task: second half repeats the first half.
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let data: Vec<TrainExample> = (0..32)
        .map(|_| {
            let half = random_tokens(&mut rng, 6, 20);
            let mut tokens = half.clone();
            tokens.extend(&half);
            TrainExample {
                tokens,
                loss_positions: (6..11).collect(),
            }
        })
        .collect();
    let cfg = TrainConfig {
        steps: 60,
        log_every: 0,
        ..TrainConfig::default()
    };
    let (a, log_a) = train(&model, &data, &cfg).unwrap();
    let (b, log_b) = train(&model, &data, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    let first: f64 = log_a.losses[..5].iter().sum();
    let last: f64 = log_a.losses[55..].iter().sum();
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn training_rejects_empty_dataset() {
    let model = ToyTransformer::init(small_config(), 32).unwrap();
    assert!(train(&model, &[], &TrainConfig::default()).is_err());
}
