use morphscope::preprocess::ImageTensor;
use morphscope::tensor::Matrix;
use morphscope::vit::{encoder_block, multi_head_attention, patchify, Encoder, LayerParams, TokenSequence};
use morphscope::weights::{ViTConfig, WeightBundle};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(hidden: usize, heads: usize, depth: usize) -> ViTConfig {
    ViTConfig {
        image_side: 8,
        patch_side: 4,
        hidden_dim: hidden,
        depth,
        heads,
        mlp_dim: 2 * hidden,
        ..ViTConfig::default()
    }
}

fn random_tokens(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.5f32..1.5))
}

fn random_image(side: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::from_fn(side, side, |_, _, _| rng.random_range(-1.0f32..1.0))
}

fn to_f64(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).iter().map(|&v| f64::from(v)).collect()).collect()
}

fn affine(x: &[Vec<f64>], w: &Matrix, b: &[f32]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|j| f64::from(b[j]) + row.iter().enumerate().map(|(i, v)| v * f64::from(w.get(i, j))).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Dense attention written out longhand, heads sliced by column blocks.
fn attention_oracle(x: &[Vec<f64>], p: &LayerParams<'_>, heads: usize) -> Vec<Vec<f64>> {
    let (q, k, v) = (affine(x, p.q_weight, p.q_bias), affine(x, p.k_weight, p.k_bias), affine(x, p.v_weight, p.v_bias));
    let n = x.len();
    let d = q[0].len();
    let hd = d / heads;
    let mut ctx = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                ctx[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    affine(&ctx, p.out_weight, p.out_bias)
}

/// erf by the Abramowitz-Stegun 7.1.26 rational approximation (|error| < 1.5e-7).
fn erf_as(x: f64) -> f64 {
    let t = 1.0 / (1.0 + 0.3275911 * x.abs());
    let poly = t * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let y = 1.0 - poly * (-x * x).exp();
    if x >= 0.0 { y } else { -y }
}

fn layer_norm_oracle(x: &[Vec<f64>], g: &[f32], b: &[f32], eps: f64) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + eps).sqrt() * f64::from(g[i]) + f64::from(b[i]))
                .collect()
        })
        .collect()
}

fn block_oracle(z: &[Vec<f64>], p: &LayerParams<'_>, cfg: &ViTConfig) -> Vec<Vec<f64>> {
    let eps = f64::from(cfg.ln_eps);
    let a = attention_oracle(&layer_norm_oracle(z, p.ln1_gamma, p.ln1_beta, eps), p, cfg.heads);
    let mid: Vec<Vec<f64>> = z.iter().zip(&a).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect();
    let mut h = affine(&layer_norm_oracle(&mid, p.ln2_gamma, p.ln2_beta, eps), p.fc1_weight, p.fc1_bias);
    for row in &mut h {
        for v in row.iter_mut() {
            *v = 0.5 * *v * (1.0 + erf_as(*v / std::f64::consts::SQRT_2));
        }
    }
    let m = affine(&h, p.fc2_weight, p.fc2_bias);
    mid.iter().zip(&m).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn max_abs_diff(a: &Matrix, b: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (r, row) in b.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((f64::from(a.get(r, c)) - v).abs());
        }
    }
    worst
}

#[test]
fn single_head_attention_matches_dense_oracle() {
    let cfg = config(6, 1, 1);
    let bundle = WeightBundle::random(&cfg, 21).unwrap();
    let params = LayerParams::from_bundle(&bundle, 0).unwrap();
    let x = random_tokens(3, 6, 4);
    let got = multi_head_attention(&x, &params, 1, None).unwrap();
    let want = attention_oracle(&to_f64(&x), &params, 1);
    assert!(max_abs_diff(&got, &want) <= 1e-5);
}

#[test]
fn multi_head_attention_matches_dense_oracle() {
    let cfg = config(12, 3, 1);
    let bundle = WeightBundle::random(&cfg, 8).unwrap();
    let params = LayerParams::from_bundle(&bundle, 0).unwrap();
    let x = random_tokens(5, 12, 2);
    let got = multi_head_attention(&x, &params, 3, None).unwrap();
    assert!(max_abs_diff(&got, &attention_oracle(&to_f64(&x), &params, 3)) <= 1e-5);
}

#[test]
fn block_matches_straight_line_reimplementation() {
    let cfg = config(8, 2, 1);
    let bundle = WeightBundle::random(&cfg, 99).unwrap();
    let params = LayerParams::from_bundle(&bundle, 0).unwrap();
    let z = random_tokens(4, 8, 7);
    let got = encoder_block(&TokenSequence { tokens: z.clone(), layer_index: 0 }, &params, &cfg, None).unwrap();
    assert_eq!(got.tokens.shape(), (4, 8));
    assert_eq!(got.layer_index, 1);
    assert!(max_abs_diff(&got.tokens, &block_oracle(&to_f64(&z), &params, &cfg)) <= 1e-5);
}

/// Moves patch `perm[i]` of `img` into slot `i`.
fn permute_patches(img: &ImageTensor, patch: usize, perm: &[usize]) -> ImageTensor {
    let grid = img.width() / patch;
    ImageTensor::from_fn(img.height(), img.width(), |y, x, c| {
        let slot = (y / patch) * grid + x / patch;
        let src = perm[slot];
        let (sy, sx) = ((src / grid) * patch + y % patch, (src % grid) * patch + x % patch);
        img.get(sy, sx, c)
    })
}

#[test]
fn patch_permutation_moves_patchify_rows() {
    let cfg = config(8, 2, 1);
    let img = random_image(8, 1);
    let perm = [2, 0, 3, 1];
    let a = patchify(&img, &cfg).unwrap();
    let b = patchify(&permute_patches(&img, 4, &perm), &cfg).unwrap();
    for (slot, &src) in perm.iter().enumerate() {
        assert_eq!(b.row(slot), a.row(src));
    }
}

#[test]
fn cls_is_permutation_invariant_without_positions() {
    let cfg = ViTConfig { image_side: 16, ..config(16, 4, 3) };
    let mut bundle = WeightBundle::random(&cfg, 5).unwrap();
    let pos = bundle.get_mut("pos_embed").unwrap();
    *pos = Matrix::zeros(pos.rows(), pos.cols());
    let encoder = Encoder::new(&bundle, &cfg).unwrap();
    let img = random_image(16, 3);
    let base = encoder.extract_cls("a", &img).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..5 {
        let mut perm: Vec<usize> = (0..16).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let moved = encoder.extract_cls("b", &permute_patches(&img, 4, &perm)).unwrap();
        for (x, y) in base.values.iter().zip(&moved.values) {
            assert!((x - y).abs() <= 1e-5, "{x} vs {y}");
        }
    }
}

#[test]
fn learned_positions_break_permutation_invariance() {
    let cfg = ViTConfig { image_side: 16, ..config(16, 4, 2) };
    let bundle = WeightBundle::random(&cfg, 5).unwrap();
    let encoder = Encoder::new(&bundle, &cfg).unwrap();
    let img = random_image(16, 3);
    let perm: Vec<usize> = (0..16).rev().collect();
    let a = encoder.extract_cls("a", &img).unwrap();
    let b = encoder.extract_cls("b", &permute_patches(&img, 4, &perm)).unwrap();
    assert!(a.values.iter().zip(&b.values).any(|(x, y)| (x - y).abs() > 1e-3));
}

#[test]
fn extraction_is_deterministic() {
    let cfg = config(16, 2, 2);
    let bundle = WeightBundle::random(&cfg, 5).unwrap();
    let encoder = Encoder::new(&bundle, &cfg).unwrap();
    let items: Vec<(String, ImageTensor)> = (0..6).map(|i| (format!("{i}"), random_image(8, i))).collect();
    let one = encoder.extract_batch(&items, 1).unwrap();
    let three = encoder.extract_batch(&items, 3).unwrap();
    assert_eq!(one, three);
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    for (a, b) in one.iter().zip(&three) {
        assert_eq!(bits(&a.values), bits(&b.values));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), heads in prop::sample::select(vec![1usize, 2, 4]), scale in 0.1f32..8.0) {
        let cfg = config(8, heads, 2);
        let bundle = WeightBundle::random(&cfg, seed).unwrap();
        let encoder = Encoder::new(&bundle, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let img = ImageTensor::from_fn(8, 8, |_, _, _| scale * rng.random_range(-1.0f32..1.0));
        let mut seen = 0usize;
        let mut worst = 0.0f64;
        let mut cb = |_: usize, probs: &[Matrix]| {
            for m in probs {
                seen += 1;
                for r in 0..m.rows() {
                    let s: f64 = m.row(r).iter().map(|&v| f64::from(v)).sum();
                    worst = worst.max((s - 1.0).abs());
                }
            }
        };
        let out = encoder.forward(&img, Some(&mut cb)).unwrap();
        prop_assert_eq!(out.tokens.shape(), (5, 8));
        prop_assert_eq!(seen, 2 * heads);
        prop_assert!(worst <= 1e-6);
    }
}
