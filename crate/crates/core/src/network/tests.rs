use super::*;
use crate::rng::substream;
use crate::spectral::{FRAMES, FREQ_BINS};
use ndarray::Array3;
use rand::Rng;

fn small_config() -> UNetConfig {
    UNetConfig {
        in_channels: CHANNELS,
        base_channels: 8,
        attention_heads: 2,
        embedding_dim: 16,
        norm_groups: 2,
        kernel: 3,
    }
}

fn random_input(seed: u64) -> Spectrogram {
    let mut rng = substream(seed, &["net-test-input"]);
    Spectrogram {
        data: Array3::from_shape_fn((CHANNELS, FREQ_BINS, FRAMES), |_| {
            rng.random_range(-1.5..1.5)
        }),
    }
}

/// Model with every tensor (including the output projection) randomized, so
/// outputs actually depend on all parameters.
fn randomized_model(cfg: UNetConfig, seed: u64) -> DenoiserModel {
    let mut model = DenoiserModel::init(cfg, 50, seed).unwrap();
    let mut rng = substream(seed, &["net-test-outproj"]);
    for name in ["out_proj.w", "out_proj.b"] {
        let spec = model.layout().by_name(name).unwrap().clone();
        for v in &mut model.params[spec.offset..spec.offset + spec.len] {
            *v = rng.random_range(-0.2..0.2);
        }
    }
    model
}

#[test]
fn time_embedding_at_zero() {
    let emb = time_embedding(0, 128);
    assert_eq!(emb.len(), 128);
    for &v in &emb[..64] {
        assert_eq!(v, 0.0);
    }
    for &v in &emb[64..] {
        assert_eq!(v, 1.0);
    }
}

#[test]
fn time_embedding_component_zero_is_plain_sin() {
    for t in [1usize, 17, 160, 2999] {
        let emb = time_embedding(t, 128);
        assert_eq!(emb[0], (t as f64).sin());
        assert_eq!(emb[64], (t as f64).cos());
    }
}

#[test]
fn time_embedding_bounded() {
    for t in 0..512 {
        for v in time_embedding(t, 128) {
            assert!((-1.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn time_embedding_distinct_over_small_range() {
    let embs: Vec<Vec<f64>> = (0..500).map(|t| time_embedding(t, 128)).collect();
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            let dist: f64 = embs[i]
                .iter()
                .zip(&embs[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            assert!(dist > 0.0, "steps {i} and {j} collide");
        }
    }
}

#[test]
fn forward_preserves_shape_and_is_deterministic() {
    let model = randomized_model(small_config(), 1);
    let x = random_input(2);
    let a = forward(&model, &x, 7).unwrap();
    let b = forward(&model, &x, 7).unwrap();
    assert_eq!(a.data.dim(), (CHANNELS, FREQ_BINS, FRAMES));
    assert_eq!(a.data, b.data);
}

#[test]
fn forward_rejects_out_of_range_step() {
    let model = randomized_model(small_config(), 1);
    let x = random_input(3);
    assert!(matches!(
        forward(&model, &x, 50),
        Err(crate::error::Error::Domain(_))
    ));
}

#[test]
fn changing_step_changes_output() {
    let model = randomized_model(small_config(), 4);
    let x = random_input(5);
    let a = forward(&model, &x, 1).unwrap();
    let b = forward(&model, &x, 40).unwrap();
    let max_diff = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(u, v)| (u - v).abs())
        .fold(0.0f64, f64::max);
    assert!(max_diff > 0.0, "step conditioning is degenerate");
}

#[test]
fn stage_positions_are_40_then_80_frames() {
    let model = randomized_model(small_config(), 6);
    let x = random_input(7);
    let (_, tape) = forward_with_tape(&model, &x, 3).unwrap();
    assert_eq!(tape.mid_attn1.attn[0].nrows(), FREQ_BINS * FRAMES / 2);
    assert_eq!(tape.up_attn1.attn[0].nrows(), FREQ_BINS * FRAMES);
}

#[test]
fn attention_rows_are_convex_combinations() {
    let model = randomized_model(small_config(), 8);
    let x = random_input(9);
    let (_, tape) = forward_with_tape(&model, &x, 11).unwrap();
    for ctx in [
        &tape.down_attn1,
        &tape.down_attn2,
        &tape.mid_attn1,
        &tape.mid_attn2,
        &tape.up_attn1,
        &tape.up_attn2,
    ] {
        for (head, inv) in ctx.attn.iter().zip(&ctx.inv_sums) {
            for (row, &iv) in head.rows().into_iter().zip(inv.iter()) {
                let mut sum = 0.0;
                for &w in row {
                    assert!(w >= 0.0);
                    sum += w * iv;
                }
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn parameter_count_matches_shape_enumeration() {
    let cfg = small_config();
    let model = DenoiserModel::init(cfg, 10, 0).unwrap();
    // Independent enumeration of every tensor in the architecture.
    let (c0, e, k, cin) = (
        cfg.base_channels,
        cfg.embedding_dim,
        cfg.kernel,
        cfg.in_channels,
    );
    let c1 = 2 * c0;
    let conv = |ci: usize, co: usize, kk: usize| co * ci * kk + co;
    let gn = |c: usize| 2 * c;
    let res = |ci: usize, co: usize| {
        gn(ci) + conv(ci, co, k) + (co * e + co) + gn(co) + conv(co, co, k)
            + if ci != co { conv(ci, co, 1) } else { 0 }
    };
    let attn = |c: usize| gn(c) + 4 * (c * c + c);
    let expected = (e * e + e)                      // time mlp
        + conv(cin, c0, k)                          // in projection
        + 2 * res(c0, c0) + 2 * attn(c0)            // down
        + conv(c0, c1, k)                           // pool
        + 2 * res(c1, c1) + 2 * attn(c1)            // mid
        + (c0 * c1 * 4 + c0)                        // expand
        + res(2 * c0, c0) + res(c0, c0) + 2 * attn(c0)
        + conv(c0, cin, k);                         // out projection
    assert_eq!(model.params.len(), expected);
    assert_eq!(parameter_count(&cfg).unwrap(), expected);

    // Doubling base channels more than doubles the count.
    let mut big = cfg;
    big.base_channels *= 2;
    assert!(parameter_count(&big).unwrap() > 2 * expected);

    // Equal configs report equal counts.
    let other = DenoiserModel::init(cfg, 10, 99).unwrap();
    assert_eq!(other.params.len(), model.params.len());
}

#[test]
fn init_is_seed_deterministic_and_finite() {
    let a = DenoiserModel::init(small_config(), 10, 5).unwrap();
    let b = DenoiserModel::init(small_config(), 10, 5).unwrap();
    let c = DenoiserModel::init(small_config(), 10, 6).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
    assert!(a.params.iter().all(|v| v.is_finite()));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = small_config();
    cfg.base_channels = 9; // not divisible by heads=2 or groups=2
    assert!(DenoiserModel::init(cfg, 10, 0).is_err());
    let mut cfg = small_config();
    cfg.in_channels = 6;
    assert!(DenoiserModel::init(cfg, 10, 0).is_err());
    let mut cfg = small_config();
    cfg.kernel = 4;
    assert!(DenoiserModel::init(cfg, 10, 0).is_err());
}

/// With the output projection still at its zero initialization, the loss
/// `mean(output)` reaches only the output bias: its gradient is the exact
/// cell count ratio and every other parameter gradient is exactly zero.
#[test]
fn zero_output_head_isolates_bias_gradient() {
    let model = DenoiserModel::init(small_config(), 10, 3).unwrap();
    let x = random_input(30);
    let (_, tape) = forward_with_tape(&model, &x, 2).unwrap();
    let cells = (CHANNELS * FREQ_BINS * FRAMES) as f64;
    let d_out = Array3::from_elem((CHANNELS, FREQ_BINS, FRAMES), 1.0 / cells);
    let grads = backward(&model, &tape, &d_out);

    let b_spec = model.layout().by_name("out_proj.b").unwrap().clone();
    let expected_bias = (FREQ_BINS * FRAMES) as f64 / cells;
    for i in 0..b_spec.len {
        assert!((grads[b_spec.offset + i] - expected_bias).abs() < 1e-12);
    }
    let w_spec = model.layout().by_name("out_proj.w").unwrap().clone();
    let w_grad_norm: f64 = grads[w_spec.offset..w_spec.offset + w_spec.len]
        .iter()
        .map(|g| g.abs())
        .sum();
    assert!(w_grad_norm > 0.0);

    // Nothing upstream of the zero-weight projection can receive gradient.
    for (idx, g) in grads.iter().enumerate() {
        let in_out_proj = (w_spec.offset..w_spec.offset + w_spec.len).contains(&idx)
            || (b_spec.offset..b_spec.offset + b_spec.len).contains(&idx);
        if !in_out_proj {
            assert_eq!(*g, 0.0, "parameter {idx} got gradient through zero weights");
        }
    }
}

/// Central finite differences against the analytic gradient on parameters
/// sampled from every tensor.
#[test]
fn gradient_matches_finite_differences() {
    let mut model = randomized_model(small_config(), 10);
    let x = random_input(11);
    let t = 13;

    // Loss: weighted sum of outputs with fixed random weights.
    let mut rng = substream(12, &["fd-weights"]);
    let weights = Array3::from_shape_fn((CHANNELS, FREQ_BINS, FRAMES), |_| {
        rng.random_range(-1.0..1.0)
    });
    let loss_of = |m: &DenoiserModel| -> f64 {
        let out = forward(m, &x, t).unwrap();
        out.data.iter().zip(weights.iter()).map(|(o, w)| o * w).sum()
    };

    let (_, tape) = forward_with_tape(&model, &x, t).unwrap();
    let analytic = backward(&model, &tape, &weights);

    let mut pick = substream(13, &["fd-picks"]);
    let tensor_specs: Vec<(usize, usize)> = model
        .layout()
        .tensors()
        .iter()
        .map(|s| (s.offset, s.len))
        .collect();
    let h = 1e-5;
    let mut checked = 0;
    for (offset, len) in tensor_specs {
        for _ in 0..2 {
            let idx = offset + pick.random_range(0..len);
            let orig = model.params[idx];
            model.params[idx] = orig + h;
            let lp = loss_of(&model);
            model.params[idx] = orig - h;
            let lm = loss_of(&model);
            model.params[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            // Absolute floor sits above central-difference roundoff noise
            // (~1e-16 * |loss| / h); key biases have exactly zero gradient
            // by softmax shift invariance and land there.
            let tol = 1e-4 * analytic[idx].abs().max(fd.abs()).max(1e-4);
            assert!(
                (analytic[idx] - fd).abs() <= tol,
                "param {idx} ({}): analytic {} vs fd {}",
                model.layout().name_of_index(idx).unwrap(),
                analytic[idx],
                fd
            );
            checked += 1;
        }
    }
    assert!(checked >= 50);
}

#[test]
fn batched_gradient_averages_per_sample_losses() {
    let model = randomized_model(small_config(), 20);
    let batch: Vec<(Spectrogram, usize)> =
        (0..3).map(|i| (random_input(40 + i), (i * 7) as usize)).collect();
    // Per-sample loss: mean of prediction.
    let cells = (CHANNELS * FREQ_BINS * FRAMES) as f64;
    let loss = |_: usize, pred: &Spectrogram| {
        let l = pred.data.sum() / cells;
        (l, Array3::from_elem((CHANNELS, FREQ_BINS, FRAMES), 1.0 / cells))
    };
    let (batch_loss, batch_grad) = gradient(&model, &batch, loss).unwrap();

    let mut expect_loss = 0.0;
    let mut expect_grad = vec![0.0; model.params.len()];
    for (x, t) in &batch {
        let (pred, tape) = forward_with_tape(&model, x, *t).unwrap();
        expect_loss += pred.data.sum() / cells / 3.0;
        let d = Array3::from_elem((CHANNELS, FREQ_BINS, FRAMES), 1.0 / cells);
        for (acc, g) in expect_grad.iter_mut().zip(backward(&model, &tape, &d)) {
            *acc += g / 3.0;
        }
    }
    assert!((batch_loss - expect_loss).abs() < 1e-12);
    for (a, b) in batch_grad.iter().zip(&expect_grad) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
#[ignore]
fn timing_probe() {
    use std::time::Instant;
    for (name, cfg) in [
        ("base8/h1", UNetConfig { base_channels: 8, attention_heads: 1, norm_groups: 4, ..UNetConfig::full() }),
        ("base16/h1", UNetConfig { base_channels: 16, attention_heads: 1, norm_groups: 4, ..UNetConfig::full() }),
        ("base16/h2", UNetConfig { base_channels: 16, attention_heads: 2, norm_groups: 4, ..UNetConfig::full() }),
        ("base32/h4", UNetConfig::full()),
    ] {
        let model = randomized_model(cfg, 1);
        let x = random_input(2);
        let t0 = Instant::now();
        let n = 10;
        for _ in 0..n {
            let _ = forward(&model, &x, 7).unwrap();
        }
        let fwd = t0.elapsed().as_secs_f64() / n as f64;
        let t0 = Instant::now();
        for _ in 0..n {
            let (out, tape) = forward_with_tape(&model, &x, 7).unwrap();
            let _ = backward(&model, &tape, &out.data);
        }
        let fb = t0.elapsed().as_secs_f64() / n as f64;
        println!("{name}: fwd {:.1} ms, fwd+bwd {:.1} ms", fwd * 1e3, fb * 1e3);
    }
}

