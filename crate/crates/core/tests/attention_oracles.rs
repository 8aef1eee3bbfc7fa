//! Naive nested-loop references for the attention pipeline and gradient
//! checks of a full block, independent of the vectorized implementations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use r2r_core::attention::{
    self, compute_features, forward, masked_pool_queries, reconstruct_output, region_attention,
    weight_masks, R2RAttentionLayer,
};
use r2r_core::tensor::{Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ── Loop oracles ─────────────────────────────────────────────────────

fn oracle_pool(m: &[f64], f: &[f64], l: usize, d: usize, hw: usize) -> Vec<f64> {
    let mut q = vec![0.0; l * d];
    for i in 0..l {
        for c in 0..d {
            let mut acc = 0.0;
            for p in 0..hw {
                acc += m[i * hw + p] * f[c * hw + p];
            }
            q[i * d + c] = acc;
        }
    }
    q
}

fn oracle_attention(q: &[f64], keys: &[f64], l: usize, d: usize) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut attn = vec![0.0; l * l];
    for i in 0..l {
        let mut row = vec![0.0; l];
        for j in 0..l {
            let mut score = 0.0;
            for c in 0..d {
                score += q[i * d + c] * keys[j * d + c];
            }
            row[j] = score * scale;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..l {
            row[j] = (row[j] - max).exp();
            denom += row[j];
        }
        for j in 0..l {
            attn[i * l + j] = row[j] / denom;
        }
    }
    attn
}

fn oracle_weight(attn: &[f64], m: &[f64], l: usize, hw: usize) -> Vec<f64> {
    let mut wm = vec![0.0; l * hw];
    for i in 0..l {
        for p in 0..hw {
            let mut acc = 0.0;
            for j in 0..l {
                acc += attn[i * l + j] * m[j * hw + p];
            }
            wm[i * hw + p] = acc;
        }
    }
    wm
}

fn oracle_reconstruct(values: &[f64], wm: &[f64], z: usize, l: usize, hw: usize) -> Vec<f64> {
    let mut o = vec![0.0; z * hw];
    for zz in 0..z {
        for p in 0..hw {
            let mut acc = 0.0;
            for i in 0..l {
                acc += values[zz * l + i] * wm[i * hw + p];
            }
            o[zz * hw + p] = acc;
        }
    }
    o
}

fn oracle_masks(x: &[f64], w: &[f64], b: &[f64], l: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut m = vec![0.0; l * hw];
    for p in 0..hw {
        let mut logits = vec![0.0; l];
        for i in 0..l {
            let mut acc = b[i];
            for ch in 0..c {
                acc += w[i * c + ch] * x[ch * hw + p];
            }
            logits[i] = acc;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|v| (v - max).exp()).sum();
        for i in 0..l {
            m[i * hw + p] = (logits[i] - max).exp() / denom;
        }
    }
    m
}

#[allow(clippy::too_many_arguments)]
fn oracle_features(
    x: &[f64],
    dw: &[f64],
    pw: &[f64],
    c: usize,
    h: usize,
    w: usize,
    d: usize,
) -> Vec<f64> {
    let k = attention::FEATURE_KERNEL;
    let pad = k / 2;
    let mut out = vec![0.0; d * h * w];
    for dd in 0..d {
        for oy in 0..h {
            for ox in 0..w {
                let mut acc = 0.0;
                for ci in 0..c {
                    let mut spatial = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = oy as isize + ky as isize - pad as isize;
                            let ix = ox as isize + kx as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                spatial += x[ci * h * w + iy as usize * w + ix as usize]
                                    * dw[ci * k * k + ky * k + kx];
                            }
                        }
                    }
                    acc += pw[dd * c + ci] * spatial;
                }
                out[dd * h * w + oy * w + ox] = acc;
            }
        }
    }
    out
}

fn random_layer(seed: u64, c: usize, l: usize, d: usize, z: usize) -> R2RAttentionLayer {
    let mut r = rng(seed);
    let mut layer = R2RAttentionLayer::init(&mut r, c, l, d, z, false).unwrap();
    // Randomize the mask branch too; zero-init would hide bugs behind
    // uniform masks.
    layer.mask_weight = Tensor::param(vec![l, c], rand_vec(&mut r, l * c, -1.0, 1.0)).unwrap();
    layer.mask_bias = Tensor::param(vec![l], rand_vec(&mut r, l, -0.5, 0.5)).unwrap();
    layer
}

#[test]
fn masked_pool_matches_loop_oracle() {
    let mut r = rng(1);
    let (l, d, h, w) = (4, 3, 6, 6);
    let m = rand_vec(&mut r, l * h * w, 0.0, 1.0);
    let f = rand_vec(&mut r, d * h * w, -1.0, 1.0);
    let mut tape = Tape::inference();
    let q = masked_pool_queries(
        &mut tape,
        &Tensor::from_vec(vec![l, h, w], m.clone()).unwrap(),
        &Tensor::from_vec(vec![d, h, w], f.clone()).unwrap(),
        false,
    )
    .unwrap();
    assert!(max_abs_diff(&q.to_vec(), &oracle_pool(&m, &f, l, d, h * w)) < 1e-12);
}

#[test]
fn normalized_pool_matches_loop_oracle() {
    let mut r = rng(2);
    let (l, d, h, w) = (3, 5, 4, 4);
    let m = rand_vec(&mut r, l * h * w, 0.0, 1.0);
    let f = rand_vec(&mut r, d * h * w, -1.0, 1.0);
    let mut tape = Tape::inference();
    let q = masked_pool_queries(
        &mut tape,
        &Tensor::from_vec(vec![l, h, w], m.clone()).unwrap(),
        &Tensor::from_vec(vec![d, h, w], f.clone()).unwrap(),
        true,
    )
    .unwrap();
    let raw = oracle_pool(&m, &f, l, d, h * w);
    let mut expect = vec![0.0; l * d];
    for i in 0..l {
        let area: f64 = m[i * h * w..(i + 1) * h * w].iter().sum();
        for c in 0..d {
            expect[i * d + c] = raw[i * d + c] / (area + 1e-6);
        }
    }
    assert!(max_abs_diff(&q.to_vec(), &expect) < 1e-12);
}

#[test]
fn region_attention_matches_high_precision_oracle() {
    let mut r = rng(3);
    let (l, d) = (5, 8);
    let q = rand_vec(&mut r, l * d, -1.0, 1.0);
    let k = rand_vec(&mut r, l * d, -1.0, 1.0);
    let mut tape = Tape::inference();
    let attn = region_attention(
        &mut tape,
        &Tensor::from_vec(vec![l, d], q.clone()).unwrap(),
        &Tensor::from_vec(vec![l, d], k.clone()).unwrap(),
    )
    .unwrap();
    assert!(max_abs_diff(&attn.to_vec(), &oracle_attention(&q, &k, l, d)) < 1e-10);
}

#[test]
fn weight_masks_matches_loop_oracle() {
    let mut r = rng(4);
    let (l, h, w) = (6, 5, 4);
    let attn = rand_vec(&mut r, l * l, 0.0, 1.0);
    let m = rand_vec(&mut r, l * h * w, 0.0, 1.0);
    let mut tape = Tape::inference();
    let wm = weight_masks(
        &mut tape,
        &Tensor::from_vec(vec![l, l], attn.clone()).unwrap(),
        &Tensor::from_vec(vec![l, h, w], m.clone()).unwrap(),
    )
    .unwrap();
    assert!(max_abs_diff(&wm.to_vec(), &oracle_weight(&attn, &m, l, h * w)) < 1e-12);
}

#[test]
fn reconstruct_matches_loop_oracle() {
    let mut r = rng(5);
    let (z, l, h, w) = (6, 4, 5, 5);
    let values = rand_vec(&mut r, z * l, -1.0, 1.0);
    let wm = rand_vec(&mut r, l * h * w, 0.0, 1.0);
    let mut tape = Tape::inference();
    let o = reconstruct_output(
        &mut tape,
        &Tensor::from_vec(vec![z, l], values.clone()).unwrap(),
        &Tensor::from_vec(vec![l, h, w], wm.clone()).unwrap(),
    )
    .unwrap();
    assert!(max_abs_diff(&o.to_vec(), &oracle_reconstruct(&values, &wm, z, l, h * w)) < 1e-12);
}

#[test]
fn features_match_conv_oracle() {
    let layer = random_layer(6, 3, 4, 5, 3);
    let mut r = rng(60);
    let (h, w) = (6, 6);
    let x = rand_vec(&mut r, 3 * h * w, -1.0, 1.0);
    let mut tape = Tape::inference();
    let f = compute_features(
        &mut tape,
        &Tensor::from_vec(vec![3, h, w], x.clone()).unwrap(),
        &layer,
    )
    .unwrap();
    let expect = oracle_features(
        &x,
        &layer.feat_depthwise.to_vec(),
        &layer.feat_pointwise.to_vec(),
        3,
        h,
        w,
        5,
    );
    assert!(max_abs_diff(&f.to_vec(), &expect) < 1e-12);
}

#[test]
fn full_forward_matches_composed_oracle() {
    for seed in 0..5u64 {
        let (c, l, d, z, h, w) = (3, 5, 4, 6, 5, 6);
        let layer = random_layer(100 + seed, c, l, d, z);
        let mut r = rng(200 + seed);
        let x = rand_vec(&mut r, c * h * w, -1.0, 1.0);
        let mut tape = Tape::inference();
        let (out, _) = forward(
            &mut tape,
            &Tensor::from_vec(vec![c, h, w], x.clone()).unwrap(),
            &layer,
            false,
        )
        .unwrap();

        let hw = h * w;
        let m = oracle_masks(
            &x,
            &layer.mask_weight.to_vec(),
            &layer.mask_bias.to_vec(),
            l,
            c,
            hw,
        );
        let f = oracle_features(
            &x,
            &layer.feat_depthwise.to_vec(),
            &layer.feat_pointwise.to_vec(),
            c,
            h,
            w,
            d,
        );
        let q = oracle_pool(&m, &f, l, d, hw);
        let attn = oracle_attention(&q, &layer.keys.to_vec(), l, d);
        let wm = oracle_weight(&attn, &m, l, hw);
        let o = oracle_reconstruct(&layer.values.to_vec(), &wm, z, l, hw);
        assert!(
            max_abs_diff(&out.to_vec(), &o) < 1e-10,
            "seed {seed}: diff {}",
            max_abs_diff(&out.to_vec(), &o)
        );
    }
}

#[test]
fn block_gradients_match_finite_differences_for_all_parameter_groups() {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let (c, l, d, z, h, w) = (2, 4, 3, 2, 4, 4);
    let layer = random_layer(77, c, l, d, z);
    let mut r = rng(78);
    let x = Tensor::from_vec(vec![c, h, w], rand_vec(&mut r, c * h * w, -1.0, 1.0)).unwrap();

    let run = |tape: &mut Tape| -> Tensor {
        let (out, _) = forward(tape, &x, &layer, false).unwrap();
        tape.reduce_sum(&out, &[0, 1, 2]).unwrap()
    };

    let groups: Vec<(&str, &Tensor)> = vec![
        ("mask_weight", &layer.mask_weight),
        ("mask_bias", &layer.mask_bias),
        ("feat_depthwise", &layer.feat_depthwise),
        ("feat_pointwise", &layer.feat_pointwise),
        ("keys", &layer.keys),
        ("values", &layer.values),
    ];
    for (_, p) in &groups {
        p.zero_grad();
    }
    let mut tape = Tape::new();
    let loss = run(&mut tape);
    tape.backward(&loss).unwrap();

    for (name, p) in &groups {
        let analytic = p.grad_vec().expect("grad present");
        for i in 0..p.numel() {
            let original = p.to_vec()[i];
            p.with_data_mut(|buf| buf[i] = original + STEP);
            let plus = run(&mut Tape::inference()).scalar_value();
            p.with_data_mut(|buf| buf[i] = original - STEP);
            let minus = run(&mut Tape::inference()).scalar_value();
            p.with_data_mut(|buf| buf[i] = original);
            let numeric = (plus - minus) / (2.0 * STEP);
            let rel = (analytic[i] - numeric).abs()
                / analytic[i].abs().max(numeric.abs()).max(1e-4);
            assert!(rel <= TOL, "{name}[{i}]: rel error {rel}");
        }
    }
}
