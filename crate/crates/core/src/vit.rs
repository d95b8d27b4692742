//! Transformer encoder over the token sequence.
//!
//! A learnable class token is prepended to the patch tokens, fixed
//! sinusoidal positions are added to all positions, and a stack of pre-norm
//! blocks (`x + MHA(LN(x))`, then `x + MLP(LN(x))`) is applied. The
//! layer-normalised class-token row is the embedding.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{init, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init<R: Rng>(store: &mut ParamStore<f32>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add_or_replace(format!("{name}.weight"), init::fan_in(&[fan_in, fan_out], fan_in, rng)),
            bias: store.add_or_replace(format!("{name}.bias"), init::fan_in(&[fan_out], fan_in, rng)),
        }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore<f32>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_or_replace(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add_or_replace(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, eps: f64) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, eps)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub attn_norm: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub mlp_norm: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VitParams {
    pub class_token: ParamId,
    pub layers: Vec<LayerParams>,
    pub final_norm: LayerNorm,
}

impl VitParams {
    pub fn init<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore<f32>, rng: &mut R) -> Self {
        let d = cfg.token_dim;
        let class_token = store.add("vit.class_token", init::normal(&[1, d], 0.02, rng));
        let layers = (0..cfg.num_layers)
            .map(|i| {
                let p = format!("vit.layer{i}");
                LayerParams {
                    attn_norm: LayerNorm::init(store, &format!("{p}.attn_norm"), d),
                    query: Linear::init(store, &format!("{p}.query"), d, d, rng),
                    key: Linear::init(store, &format!("{p}.key"), d, d, rng),
                    value: Linear::init(store, &format!("{p}.value"), d, d, rng),
                    output: Linear::init(store, &format!("{p}.output"), d, d, rng),
                    mlp_norm: LayerNorm::init(store, &format!("{p}.mlp_norm"), d),
                    mlp_in: Linear::init(store, &format!("{p}.mlp_in"), d, cfg.mlp_hidden, rng),
                    mlp_out: Linear::init(store, &format!("{p}.mlp_out"), cfg.mlp_hidden, d, rng),
                }
            })
            .collect();
        Self {
            class_token,
            layers,
            final_norm: LayerNorm::init(store, "vit.final_norm", d),
        }
    }

    /// Embeds `[n, patch_count, token_dim]` tokens into `[n, token_dim]`.
    pub fn encode<T: Element>(
        &self,
        cfg: &ModelConfig,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: Var,
    ) -> Result<Var> {
        let shape = tape.shape(tokens).to_vec();
        if shape.len() != 3 || shape[1] != cfg.patch_count || shape[2] != cfg.token_dim {
            return Err(Error::shape("encode", &shape, &[0, cfg.patch_count, cfg.token_dim]));
        }
        let (n, d, seq) = (shape[0], cfg.token_dim, cfg.sequence_length());
        let cls = tape.param(store, self.class_token);
        let slots = tape.constant(Tensor::zeros(&[n, 1, d]));
        let cls = tape.add(slots, cls)?;
        let mut x = tape.concat(&[cls, tokens], 1)?;
        let pe = tape.constant(positional_encoding(seq, d)?);
        x = tape.add(x, pe)?;
        for layer in &self.layers {
            x = attention_layer(cfg, tape, store, layer, x)?.0;
        }
        let x = self.final_norm.forward(tape, store, x, cfg.layer_norm_eps)?;
        let first = tape.slice(x, 1, 0, 1)?;
        tape.reshape(first, &[n, d])
    }
}

/// Sinusoidal position table: `PE[p, 2i] = sin(p / 10000^(2i/d))`,
/// `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn positional_encoding<T: Element>(seq_len: usize, dim: usize) -> Result<Tensor<T>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::arg(format!(
            "positional encoding needs an even width, got {dim}"
        )));
    }
    Ok(Tensor::from_fn(&[seq_len, dim], |i| {
        let (pos, j) = (i / dim, i % dim);
        let freq = 10000f64.powf((j - j % 2) as f64 / dim as f64);
        let angle = pos as f64 / freq;
        T::from_f64_lossy(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

/// One pre-norm transformer block on `[n, seq, d]`.
///
/// Returns the block output and the attention weights `[n * heads, seq, seq]`.
/// Dropout follows the attention softmax and the MLP activation, and is
/// active only on training tapes.
pub fn attention_layer<T: Element>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layer: &LayerParams,
    x: Var,
) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    let (n, seq, d) = (shape[0], shape[1], shape[2]);
    let (h, hd) = (cfg.num_heads, cfg.head_dim());

    let normed = layer.attn_norm.forward(tape, store, x, cfg.layer_norm_eps)?;
    let heads = |lin: &Linear, tape: &mut Tape<T>| -> Result<Var> {
        let y = lin.forward(tape, store, normed)?;
        let y = tape.reshape(y, &[n, seq, h, hd])?;
        let y = tape.transpose(y, 1, 2)?;
        tape.reshape(y, &[n * h, seq, hd])
    };
    let q = heads(&layer.query, tape)?;
    let k = heads(&layer.key, tape)?;
    let v = heads(&layer.value, tape)?;
    let kt = tape.transpose(k, 1, 2)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, T::from_f64_lossy(1.0 / (hd as f64).sqrt()));
    let weights = tape.softmax(scores, 2)?;
    let dropped = tape.dropout(weights, cfg.dropout);
    let ctx = tape.matmul(dropped, v)?;
    let ctx = tape.reshape(ctx, &[n, h, seq, hd])?;
    let ctx = tape.transpose(ctx, 1, 2)?;
    let ctx = tape.reshape(ctx, &[n, seq, d])?;
    let attn = layer.output.forward(tape, store, ctx)?;
    let x = tape.add(x, attn)?;

    let normed = layer.mlp_norm.forward(tape, store, x, cfg.layer_norm_eps)?;
    let hidden = layer.mlp_in.forward(tape, store, normed)?;
    let hidden = tape.gelu(hidden);
    let hidden = tape.dropout(hidden, cfg.dropout);
    let out = layer.mlp_out.forward(tape, store, hidden)?;
    Ok((tape.add(x, out)?, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            token_dim: 32,
            num_heads: 4,
            num_layers: 2,
            mlp_hidden: 64,
            ..ModelConfig::default()
        }
    }

    fn build(cfg: &ModelConfig) -> (ParamStore<f32>, VitParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vit = VitParams::init(cfg, &mut store, &mut rng);
        (store, vit)
    }

    fn tokens(cfg: &ModelConfig, n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, cfg.patch_count, cfg.token_dim], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn positional_encoding_values() {
        let pe: Tensor<f64> = positional_encoding(33, 256).unwrap();
        for j in 0..256 {
            assert_eq!(pe.at(&[0, j]), if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!((pe.at(&[1, 0]) - 0.8415).abs() < 1e-4);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(positional_encoding::<f64>(4, 7).is_err());
    }

    #[test]
    fn single_token_attends_to_itself() {
        let cfg = small();
        let (store, vit) = build(&cfg);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.constant(Tensor::from_fn(&[2, 1, 32], |_| rng.random_range(-1.0..1.0)));
        let (_, w) = attention_layer(&cfg, &mut tape, &store, &vit.layers[0], x).unwrap();
        assert_eq!(tape.shape(w), &[8, 1, 1]);
        assert!(tape.value(w).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = small();
        let (store, vit) = build(&cfg);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = tape.constant(Tensor::from_fn(&[3, 33, 32], |_| rng.random_range(-1.0..1.0)));
        let (_, w) = attention_layer(&cfg, &mut tape, &store, &vit.layers[0], x).unwrap();
        for row in tape.value(w).chunks(33) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    fn zero_residual_branches(store: &mut ParamStore<f32>, vit: &VitParams) {
        for layer in &vit.layers {
            for id in [
                layer.output.weight,
                layer.output.bias,
                layer.mlp_out.weight,
                layer.mlp_out.bias,
            ] {
                let len = store.get(id).len();
                store.set_values(id, &vec![0.0; len]).unwrap();
            }
        }
    }

    #[test]
    fn zeroed_branches_make_identity_layers() {
        let cfg = small();
        let (mut store, vit) = build(&cfg);
        zero_residual_branches(&mut store, &vit);
        let mut tape = Tape::new();
        let input = tokens(&cfg, 2, 3).reshape(&[2, 32, 32]).unwrap();
        let x = tape.constant(input.clone());
        let (y, _) = attention_layer(&cfg, &mut tape, &store, &vit.layers[0], x).unwrap();
        assert_eq!(tape.value(y), input.data());
    }

    #[test]
    fn zeroed_branches_embed_class_token() {
        let cfg = small();
        let (mut store, vit) = build(&cfg);
        zero_residual_branches(&mut store, &vit);
        let mut tape = Tape::new();
        let x = tape.constant(tokens(&cfg, 2, 4));
        let e = vit.encode(&cfg, &mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(e), &[2, 32]);

        let pe: Tensor<f32> = positional_encoding(33, 32).unwrap();
        let cls = store.get(vit.class_token).data();
        let raw: Vec<f64> = (0..32).map(|j| (cls[j] + pe.data()[j]) as f64).collect();
        let mean = raw.iter().sum::<f64>() / 32.0;
        let var = raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        for s in 0..2 {
            for j in 0..32 {
                let expect = (raw[j] - mean) / (var + 1e-5).sqrt();
                assert!((tape.value(e)[s * 32 + j] as f64 - expect).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn inference_is_bitwise_deterministic() {
        let cfg = small();
        let (store, vit) = build(&cfg);
        let input = tokens(&cfg, 2, 6);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(input.clone());
            let e = vit.encode(&cfg, &mut tape, &store, x).unwrap();
            tape.value(e).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn training_tape_applies_dropout() {
        let cfg = small();
        let (store, vit) = build(&cfg);
        let input = tokens(&cfg, 1, 6);
        let run = |mut tape: Tape<f32>| {
            let x = tape.constant(input.clone());
            let e = vit.encode(&cfg, &mut tape, &store, x).unwrap();
            tape.value(e).to_vec()
        };
        assert_ne!(run(Tape::new()), run(Tape::training(1)));
        assert_eq!(run(Tape::training(1)), run(Tape::training(1)));
    }

    #[test]
    fn token_order_matters() {
        let cfg = small();
        let (store, vit) = build(&cfg);
        let input = tokens(&cfg, 1, 8);
        let mut permuted = input.clone();
        let d = cfg.token_dim;
        // rotate the 32 content tokens by one position
        for p in 0..32 {
            let src = (p + 1) % 32;
            permuted.data_mut()[p * d..(p + 1) * d].copy_from_slice(&input.data()[src * d..(src + 1) * d]);
        }
        let mut tape = Tape::new();
        let a = tape.constant(input);
        let b = tape.constant(permuted);
        let ea = vit.encode(&cfg, &mut tape, &store, a).unwrap();
        let eb = vit.encode(&cfg, &mut tape, &store, b).unwrap();
        let dist: f32 = tape
            .value(ea)
            .iter()
            .zip(tape.value(eb))
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        assert!(dist > 0.0);
    }

    #[test]
    fn every_token_influences_embedding() {
        let cfg = small();
        let (store, vit) = build(&cfg);
        let mut tape = Tape::new();
        let x = tape.leaf(tokens(&cfg, 1, 10).with_grad(true));
        let e = vit.encode(&cfg, &mut tape, &store, x).unwrap();
        let sq = tape.mul(e, e).unwrap();
        let loss = tape.sum_all(sq);
        let g = tape.backward(loss).wrt(x);
        for token in g.chunks(cfg.token_dim) {
            assert!(token.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn rejects_wrong_token_shape() {
        let cfg = small();
        let (store, vit) = build(&cfg);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 31, 32]));
        assert!(vit.encode(&cfg, &mut tape, &store, x).is_err());
    }
}
