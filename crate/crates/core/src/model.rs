//! The full encoder plus its pre-training projector and classification head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};
use crate::tokenizer::TokenizerParams;
use crate::vit::{LayerNorm, Linear, VitParams};

/// Parameter-name prefixes that make up the encoder.
pub const ENCODER_PREFIXES: [&str; 2] = ["tokenizer.", "vit."];

/// Layer norm followed by a linear map to the contrastive space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProjectorParams {
    pub norm: LayerNorm,
    pub linear: Linear,
}

/// Layer norm followed by a linear map to class logits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadParams {
    pub norm: LayerNorm,
    pub linear: Linear,
    pub input_dim: usize,
    pub num_classes: usize,
}

#[derive(Clone, Debug)]
pub struct MantisModel {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub tokenizer: TokenizerParams,
    pub vit: VitParams,
    pub projector: Option<ProjectorParams>,
    pub head: Option<HeadParams>,
}

impl MantisModel {
    /// Randomly initialised encoder; all draws come from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let tokenizer = TokenizerParams::init(&config, &mut params, &mut rng);
        let vit = VitParams::init(&config, &mut params, &mut rng);
        Ok(Self {
            config,
            params,
            tokenizer,
            vit,
            projector: None,
            head: None,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.token_dim
    }

    /// Learnable scalars of the tokenizer and transformer, excluding the
    /// projector and head.
    pub fn count_parameters(&self) -> usize {
        self.params.scalar_count_with_prefix(&ENCODER_PREFIXES)
    }

    /// Adds (or re-initialises) the contrastive projector.
    pub fn attach_projector(&mut self, seed: u64) -> &ProjectorParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.token_dim;
        let norm = LayerNorm::init(&mut self.params, "projector.norm", d);
        let linear = Linear::init(
            &mut self.params,
            "projector.linear",
            d,
            self.config.projector_dim,
            &mut rng,
        );
        self.projector.insert(ProjectorParams { norm, linear })
    }

    /// Adds (or re-initialises) a classification head over `input_dim` features.
    pub fn attach_head(&mut self, input_dim: usize, num_classes: usize, seed: u64) -> Result<&HeadParams> {
        if num_classes < 2 {
            return Err(Error::arg(format!("head needs at least 2 classes, got {num_classes}")));
        }
        if input_dim == 0 || !input_dim.is_multiple_of(self.config.token_dim) {
            return Err(Error::arg(format!(
                "head input {input_dim} is not a multiple of the embedding width {}",
                self.config.token_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norm = LayerNorm::init(&mut self.params, "head.norm", input_dim);
        let linear = Linear::init(&mut self.params, "head.linear", input_dim, num_classes, &mut rng);
        Ok(self.head.insert(HeadParams {
            norm,
            linear,
            input_dim,
            num_classes,
        }))
    }

    /// Freezes or unfreezes every encoder parameter.
    pub fn set_encoder_trainable(&mut self, trainable: bool) {
        for prefix in ENCODER_PREFIXES {
            self.params.set_trainable(prefix, trainable);
        }
    }

    /// Embeddings `[n, token_dim]` for a batch of raw channels `[n, input_length]`.
    pub fn encode<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, raw: Var) -> Result<Var> {
        let tokens = self.tokenizer.forward(&self.config, tape, store, raw)?;
        self.vit.encode(&self.config, tape, store, tokens)
    }

    pub fn project<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, embeddings: Var) -> Result<Var> {
        let p = self
            .projector
            .as_ref()
            .ok_or_else(|| Error::arg("model has no projector"))?;
        let x = p.norm.forward(tape, store, embeddings, self.config.layer_norm_eps)?;
        p.linear.forward(tape, store, x)
    }

    /// Class logits for concatenated channel embeddings `[n, input_dim]`.
    pub fn classify<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        let h = self.head.as_ref().ok_or_else(|| Error::arg("model has no head"))?;
        let width = tape.shape(features).last().copied().unwrap_or(0);
        if width != h.input_dim {
            return Err(Error::shape("classify", tape.shape(features), &[h.input_dim]));
        }
        let x = h.norm.forward(tape, store, features, self.config.layer_norm_eps)?;
        h.linear.forward(tape, store, x)
    }

    /// Inference embeddings of `n` raw channels laid out row-major, in
    /// chunks of `batch` channels.
    pub fn embed_channels(&self, channels: &[f32], batch: usize) -> Result<Vec<f32>> {
        self.embed_channels_threaded(channels, batch, 1)
    }

    /// Same batches as [`Self::embed_channels`], spread over `threads`
    /// workers; the result does not depend on the thread count.
    pub fn embed_channels_threaded(&self, channels: &[f32], batch: usize, threads: usize) -> Result<Vec<f32>> {
        let len = self.config.input_length;
        if !channels.len().is_multiple_of(len) {
            return Err(Error::shape("embed_channels", &[channels.len()], &[len]));
        }
        let batches: Vec<&[f32]> = channels.chunks(batch.max(1) * len).collect();
        let run = |group: &[&[f32]]| -> Result<Vec<f32>> {
            let mut out = Vec::new();
            for chunk in group {
                let mut tape = Tape::new();
                let x = tape.constant(Tensor::new(&[chunk.len() / len, len], chunk.to_vec())?);
                let e = self.encode(&mut tape, &self.params, x)?;
                out.extend_from_slice(tape.value(e));
            }
            Ok(out)
        };
        let threads = threads.clamp(1, batches.len().max(1));
        if threads == 1 {
            return run(&batches);
        }
        let per = batches.len().div_ceil(threads);
        let parts: Vec<Result<Vec<f32>>> = std::thread::scope(|s| {
            let handles: Vec<_> = batches.chunks(per).map(|g| s.spawn(move || run(g))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("embedding worker panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(channels.len() / len * self.config.token_dim);
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threaded_embedding_is_bitwise_identical() {
        let model = MantisModel::new(ModelConfig::tiny(), 1).unwrap();
        let len = model.config.input_length;
        let x: Vec<f32> = (0..7 * len).map(|i| (i as f32 * 0.013).sin()).collect();
        let one = model.embed_channels(&x, 2).unwrap();
        for threads in [2, 3, 8] {
            assert_eq!(model.embed_channels_threaded(&x, 2, threads).unwrap(), one);
        }
    }

    #[test]
    fn default_parameter_count_is_about_eight_million() {
        let model = MantisModel::new(ModelConfig::default(), 0).unwrap();
        let count = model.count_parameters();
        assert!((5_000_000..=11_000_000).contains(&count), "{count}");
        let by_hand: usize = model
            .params
            .iter()
            .map(|(_, _, t)| t.shape().iter().product::<usize>())
            .sum();
        assert_eq!(count, by_hand);
    }

    #[test]
    fn projector_and_head_are_excluded_from_count() {
        let mut model = MantisModel::new(ModelConfig::tiny(), 0).unwrap();
        let before = model.count_parameters();
        model.attach_projector(1);
        model.attach_head(16, 3, 2).unwrap();
        assert_eq!(model.count_parameters(), before);
        assert!(model.params.scalar_count() > before);
    }

    #[test]
    fn doubling_layers_doubles_transformer_share() {
        let one = MantisModel::new(ModelConfig::desk(), 0).unwrap();
        let two = MantisModel::new(
            ModelConfig {
                num_layers: 4,
                ..ModelConfig::desk()
            },
            0,
        )
        .unwrap();
        let blocks = |m: &MantisModel| m.params.scalar_count_with_prefix(&["vit.layer"]);
        assert_eq!(blocks(&two), 2 * blocks(&one));
    }

    #[test]
    fn reattaching_head_keeps_ids() {
        let mut model = MantisModel::new(ModelConfig::tiny(), 0).unwrap();
        let first = model.attach_head(16, 2, 1).unwrap().clone();
        let n = model.params.len();
        let second = model.attach_head(16, 2, 9).unwrap().clone();
        assert_eq!(first, second);
        assert_eq!(model.params.len(), n);
    }

    #[test]
    fn head_rejects_bad_widths() {
        let mut model = MantisModel::new(ModelConfig::tiny(), 0).unwrap();
        assert!(model.attach_head(17, 2, 0).is_err());
        assert!(model.attach_head(16, 1, 0).is_err());
    }
}
