//! Token generation: turns each resized channel into `patch_count` tokens.
//!
//! Three feature streams are fused per patch:
//! convolutional features of the z-scored series, convolutional features of
//! its (z-scored) first differences, and an encoding of the raw per-patch
//! mean and standard deviation, which carries the unit information that
//! normalisation removes.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{init, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBranch {
    pub kernels: ParamId,
    pub bias: ParamId,
}

/// Parameter handles of the token generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizerParams {
    pub series: ConvBranch,
    pub differential: Option<ConvBranch>,
    pub stat_weight: ParamId,
    pub stat_bias: ParamId,
    pub fuse_weight: ParamId,
    pub fuse_bias: ParamId,
    pub fuse_gamma: ParamId,
    pub fuse_beta: ParamId,
}

impl TokenizerParams {
    pub fn init<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore<f32>, rng: &mut R) -> Self {
        let mut branch = |name: &str, rng: &mut R| {
            let fan = cfg.conv_kernel;
            ConvBranch {
                kernels: store.add(
                    format!("tokenizer.{name}.kernels"),
                    init::fan_in(&[cfg.conv_channels, 1, cfg.conv_kernel], fan, rng),
                ),
                bias: store.add(
                    format!("tokenizer.{name}.bias"),
                    init::fan_in(&[cfg.conv_channels], fan, rng),
                ),
            }
        };
        let series = branch("series_conv", rng);
        let differential = cfg.use_differential.then(|| branch("diff_conv", rng));
        let expansion = 2 * cfg.scalar_scales;
        let fusion = cfg.fusion_width();
        Self {
            series,
            differential,
            stat_weight: store.add(
                "tokenizer.stat_encoder.weight",
                init::fan_in(&[expansion, cfg.stat_dim], expansion, rng),
            ),
            stat_bias: store.add(
                "tokenizer.stat_encoder.bias",
                init::fan_in(&[cfg.stat_dim], expansion, rng),
            ),
            fuse_weight: store.add(
                "tokenizer.fuse.weight",
                init::fan_in(&[fusion, cfg.token_dim], fusion, rng),
            ),
            fuse_bias: store.add("tokenizer.fuse.bias", init::fan_in(&[cfg.token_dim], fusion, rng)),
            fuse_gamma: store.add("tokenizer.fuse.ln_gamma", Tensor::ones(&[cfg.token_dim])),
            fuse_beta: store.add("tokenizer.fuse.ln_beta", Tensor::zeros(&[cfg.token_dim])),
        }
    }

    /// Tokens for a batch of channels `[n, input_length]` → `[n, patch_count, token_dim]`.
    ///
    /// The input holds raw (resized, not normalised) values.
    pub fn forward<T: Element>(
        &self,
        cfg: &ModelConfig,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        raw: Var,
    ) -> Result<Var> {
        let shape = tape.shape(raw).to_vec();
        if shape.len() != 2 || shape[1] != cfg.input_length {
            return Err(Error::shape("tokenizer", &shape, &[0, cfg.input_length]));
        }
        let normalized = instance_norm(tape, raw, cfg.norm_eps)?;
        let series = conv_patchify(cfg, tape, store, normalized, self.series)?;
        let mut parts = vec![series];
        if let Some(branch) = self.differential {
            let diff = differential(tape, normalized)?;
            let diff = instance_norm(tape, diff, cfg.norm_eps)?;
            parts.push(conv_patchify(cfg, tape, store, diff, branch)?);
        }
        let stats = stat_patches(tape, raw, cfg.patch_count)?;
        parts.push(scalar_encode(
            cfg,
            tape,
            store,
            stats,
            self.stat_weight,
            self.stat_bias,
        )?);
        fuse_tokens(tape, store, &parts, self)
    }
}

/// Per-row z-scoring of `[n, t]`: `(x - mean) / (std + eps)`.
pub fn instance_norm<T: Element>(tape: &mut Tape<T>, x: Var, eps: f64) -> Result<Var> {
    let mean = tape.mean(x, 1, true)?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean(sq, 1, true)?;
    let std = tape.sqrt(var);
    let denom = tape.add_scalar(std, T::from_f64_lossy(eps));
    tape.div(centered, denom)
}

/// Row-wise first differences of `[n, t]`, left-padded with a zero column.
pub fn differential<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (n, t) = (shape[0], shape[1]);
    if t < 2 {
        return Err(Error::input(format!("differential of length {t}")));
    }
    let head = tape.slice(x, 1, 1, t)?;
    let tail = tape.slice(x, 1, 0, t - 1)?;
    let steps = tape.sub(head, tail)?;
    let pad = tape.constant(Tensor::zeros(&[n, 1]));
    tape.concat(&[pad, steps], 1)
}

/// Averaging matrix `[len, segments]` splitting `len` positions into
/// `segments` adaptive windows `[floor(p*len/s), ceil((p+1)*len/s))`.
pub fn adaptive_pool_matrix<T: Element>(len: usize, segments: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[len, segments]);
    for p in 0..segments {
        let start = p * len / segments;
        let end = ((p + 1) * len).div_ceil(segments);
        let w = T::one() / T::from_usize(end - start).unwrap();
        for i in start..end {
            m.data_mut()[i * segments + p] = w;
        }
    }
    m
}

/// Convolution (1 → `conv_channels`) followed by adaptive mean pooling into
/// `patch_count` segments: `[n, t]` → `[n, patch_count, conv_channels]`.
pub fn conv_patchify<T: Element>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    branch: ConvBranch,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != cfg.input_length {
        return Err(Error::shape("conv_patchify", &shape, &[0, cfg.input_length]));
    }
    let n = shape[0];
    let kernels = tape.param(store, branch.kernels);
    let bias = tape.param(store, branch.bias);
    let x3 = tape.reshape(x, &[n, 1, cfg.input_length])?;
    let conv = tape.conv1d(x3, kernels, cfg.conv_stride, cfg.conv_padding)?;
    let len = tape.shape(conv)[2];
    let flat = tape.reshape(conv, &[n * cfg.conv_channels, len])?;
    let pool = tape.constant(adaptive_pool_matrix(len, cfg.patch_count));
    let pooled = tape.matmul(flat, pool)?;
    let pooled = tape.reshape(pooled, &[n, cfg.conv_channels, cfg.patch_count])?;
    let patches = tape.transpose(pooled, 1, 2)?;
    // Pool weights sum to one, so the bias commutes with pooling.
    tape.add(patches, bias)
}

/// Mean and population standard deviation of `patches` contiguous windows:
/// `[n, t]` → `[n, patches, 2]`.
pub fn stat_patches<T: Element>(tape: &mut Tape<T>, raw: Var, patches: usize) -> Result<Var> {
    let shape = tape.shape(raw).to_vec();
    let (n, t) = (shape[0], shape[1]);
    if t % patches != 0 {
        return Err(Error::shape("stat_patches", &shape, &[patches]));
    }
    let windows = tape.reshape(raw, &[n, patches, t / patches])?;
    let mean = tape.mean(windows, 2, true)?;
    let centered = tape.sub(windows, mean)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean(sq, 2, true)?;
    let std = tape.sqrt(var);
    tape.concat(&[mean, std], 2)
}

/// Geometric scales `2^(k - K/2)` of the scalar encoder.
pub fn scalar_scales(count: usize) -> Vec<f64> {
    (0..count).map(|k| 2f64.powi(k as i32 - (count / 2) as i32)).collect()
}

/// Expands every statistic `v` into `tanh(v / s_k)` over the geometric scales
/// and projects the `2K` features of each patch to `stat_dim`:
/// `[n, p, 2]` → `[n, p, stat_dim]`.
pub fn scalar_encode<T: Element>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    stats: Var,
    weight: ParamId,
    bias: ParamId,
) -> Result<Var> {
    let expanded = scalar_expand(tape, stats, cfg.scalar_scales)?;
    let w = tape.param(store, weight);
    let b = tape.param(store, bias);
    let projected = tape.matmul(expanded, w)?;
    tape.add(projected, b)
}

/// The tanh expansion alone: `[n, p, 2]` → `[n, p, 2K]`.
pub fn scalar_expand<T: Element>(tape: &mut Tape<T>, stats: Var, scales: usize) -> Result<Var> {
    let shape = tape.shape(stats).to_vec();
    if shape.len() != 3 || shape[2] != 2 {
        return Err(Error::shape("scalar_encode", &shape, &[0, 0, 2]));
    }
    let (n, p) = (shape[0], shape[1]);
    let inv = Tensor::new(
        &[1, scales],
        scalar_scales(scales)
            .iter()
            .map(|s| T::from_f64_lossy(1.0 / s))
            .collect(),
    )?;
    let inv = tape.constant(inv);
    let column = tape.reshape(stats, &[n * p * 2, 1])?;
    let scaled = tape.matmul(column, inv)?;
    let squashed = tape.tanh(scaled);
    tape.reshape(squashed, &[n, p, 2 * scales])
}

/// Concatenates per-patch features, projects to `token_dim` and layer-normalises.
pub fn fuse_tokens<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    parts: &[Var],
    params: &TokenizerParams,
) -> Result<Var> {
    let joined = tape.concat(parts, 2)?;
    let w = tape.param(store, params.fuse_weight);
    let b = tape.param(store, params.fuse_bias);
    let width = tape.shape(joined)[2];
    if width != tape.shape(w)[0] {
        return Err(Error::shape("fuse_tokens", tape.shape(joined), tape.shape(w)));
    }
    let projected = tape.matmul(joined, w)?;
    let projected = tape.add(projected, b)?;
    let gamma = tape.param(store, params.fuse_gamma);
    let beta = tape.param(store, params.fuse_beta);
    tape.layer_norm(projected, gamma, beta, 1e-5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &ModelConfig) -> (ParamStore<f32>, TokenizerParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = TokenizerParams::init(cfg, &mut store, &mut rng);
        (store, params)
    }

    fn random_input(n: usize, t: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, t], |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn default_token_shape() {
        let cfg = ModelConfig::default();
        let (store, params) = build(&cfg);
        let mut tape = Tape::new();
        let x = tape.constant(random_input(2, 512, 1));
        let tokens = params.forward(&cfg, &mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(tokens), &[2, 32, 256]);
        for row in tape.value(tokens).chunks(256) {
            let mean = row.iter().sum::<f32>() / 256.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 256.0;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn rejects_wrong_length() {
        let cfg = ModelConfig::default();
        let (store, params) = build(&cfg);
        let mut tape = Tape::new();
        let x = tape.constant(random_input(1, 500, 1));
        assert!(params.forward(&cfg, &mut tape, &store, x).is_err());
    }

    #[test]
    fn conv_patchify_zero_input_zero_bias() {
        let cfg = ModelConfig::default();
        let (mut store, params) = build(&cfg);
        store.set_values(params.series.bias, &vec![0.0; 256]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 512]));
        let out = conv_patchify(&cfg, &mut tape, &store, x, params.series).unwrap();
        assert_eq!(tape.shape(out), &[1, 32, 256]);
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_patchify_single_tap_is_segment_mean() {
        // Kernel of width 1, stride 1, no padding: pooling averages 16 steps.
        let cfg = ModelConfig {
            conv_kernel: 1,
            conv_stride: 1,
            conv_padding: 0,
            ..ModelConfig::default()
        };
        let (mut store, params) = build(&cfg);
        let weights: Vec<f32> = (0..256).map(|c| 0.01 * c as f32 - 1.0).collect();
        store.set_values(params.series.kernels, &weights).unwrap();
        store.set_values(params.series.bias, &vec![0.0; 256]).unwrap();
        let input = random_input(1, 512, 9);
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let out = conv_patchify(&cfg, &mut tape, &store, x, params.series).unwrap();
        let got = tape.value(out);
        for p in 0..32 {
            let seg_mean = input.data()[p * 16..(p + 1) * 16]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>()
                / 16.0;
            for c in 0..256 {
                let expect = seg_mean * weights[c] as f64;
                assert!((got[p * 256 + c] as f64 - expect).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn adaptive_pool_covers_uneven_lengths() {
        let m: Tensor<f64> = adaptive_pool_matrix(63, 32);
        for p in 0..32 {
            let col: f64 = (0..63).map(|i| m.data()[i * 32 + p]).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stat_patches_examples() {
        let mut tape = Tape::<f64>::new();
        let constant = tape.constant(Tensor::full(&[1, 512], 3.5));
        let s = stat_patches(&mut tape, constant, 32).unwrap();
        for row in tape.value(s).chunks(2) {
            assert_eq!(row, &[3.5, 0.0]);
        }
        let stairs = tape.constant(Tensor::from_fn(&[1, 512], |i| (i / 16) as f64));
        let s = stat_patches(&mut tape, stairs, 32).unwrap();
        for (p, row) in tape.value(s).chunks(2).enumerate() {
            assert_eq!(row, &[p as f64, 0.0]);
        }
    }

    #[test]
    fn stat_patches_matches_window_oracle() {
        let input = random_input(3, 512, 4);
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let s = stat_patches(&mut tape, x, 32).unwrap();
        let got = tape.value(s);
        for r in 0..3 {
            for p in 0..32 {
                let w = &input.data()[r * 512 + p * 16..r * 512 + (p + 1) * 16];
                let mean = w.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
                let var = w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 16.0;
                let at = (r * 32 + p) * 2;
                assert!((got[at] as f64 - mean).abs() < 1e-5);
                assert!((got[at + 1] as f64 - var.sqrt()).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn stats_follow_affine_maps() {
        let input = random_input(1, 512, 5);
        let (a, b) = (3.0f64, -7.0f64);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(input.cast());
        let y = tape.constant(Tensor::from_fn(&[1, 512], |i| a * input.data()[i] as f64 + b));
        let sx = stat_patches(&mut tape, x, 32).unwrap();
        let sy = stat_patches(&mut tape, y, 32).unwrap();
        let (sx, sy) = (tape.value(sx).to_vec(), tape.value(sy).to_vec());
        for p in 0..32 {
            assert!((sy[2 * p] - (a * sx[2 * p] + b)).abs() < 1e-9);
            assert!((sy[2 * p + 1] - a * sx[2 * p + 1]).abs() < 1e-9);
        }
    }

    #[test]
    fn scalar_expansion_properties() {
        let mut tape = Tape::<f64>::new();
        let stats = tape.constant(Tensor::new(&[1, 3, 2], vec![0.0, 0.0, 1e6, -1e6, 0.5, 0.7]).unwrap());
        let e = scalar_expand(&mut tape, stats, 16).unwrap();
        let v = tape.value(e);
        assert!(v[..32].iter().all(|&x| x == 0.0));
        assert!(v[32..48].iter().all(|&x| x == 1.0));
        assert!(v[48..64].iter().all(|&x| x == -1.0));
        // monotone in the value for each scale
        for k in 0..16 {
            assert!(v[64 + 16 + k] >= v[64 + k]);
        }
    }

    #[test]
    fn scalar_encode_of_zero_is_bias() {
        let cfg = ModelConfig::default();
        let (store, params) = build(&cfg);
        let mut tape = Tape::new();
        let stats = tape.constant(Tensor::zeros(&[1, 32, 2]));
        let out = scalar_encode(&cfg, &mut tape, &store, stats, params.stat_weight, params.stat_bias).unwrap();
        let bias = store.get(params.stat_bias).data();
        for row in tape.value(out).chunks(64) {
            assert_eq!(row, bias);
        }
    }

    #[test]
    fn graph_ops_agree_with_preprocessing() {
        use crate::preprocessing::{differential_channel, normalize_channel};
        let input = random_input(2, 64, 11);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(input.cast());
        let n = instance_norm(&mut tape, x, 1e-5).unwrap();
        let d = differential(&mut tape, x).unwrap();
        for r in 0..2 {
            let row = &input.data()[r * 64..(r + 1) * 64];
            let expect_n = normalize_channel(row, 1e-5);
            let expect_d = differential_channel(row);
            for j in 0..64 {
                assert!((tape.value(n)[r * 64 + j] - expect_n[j] as f64).abs() < 1e-5);
                assert!((tape.value(d)[r * 64 + j] - expect_d[j] as f64).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn ablated_tokenizer_has_narrow_fusion() {
        let cfg = ModelConfig::default().without_differential();
        let (store, params) = build(&cfg);
        assert!(params.differential.is_none());
        assert_eq!(store.get(params.fuse_weight).shape(), &[320, 256]);
        let mut tape = Tape::new();
        let x = tape.constant(random_input(1, 512, 2));
        let tokens = params.forward(&cfg, &mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(tokens), &[1, 32, 256]);
    }
}
