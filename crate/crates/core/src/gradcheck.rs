//! Central finite-difference gradient checks.
//!
//! The analytic gradient is computed in `f32`; the finite-difference estimate
//! evaluates the same objective in `f64` ("shadow" precision) with parameters
//! perturbed one coordinate at a time.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::MantisModel;
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

/// A scalar function of the parameters in a store.
pub trait Objective {
    fn build<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Coordinates probed per parameter tensor (all of them if smaller).
    pub coords_per_tensor: usize,
    pub seed: u64,
    /// Evaluate on training tapes seeded with this value (dropout active).
    pub training_seed: Option<u64>,
    /// Gradient norms below this are treated as zero.
    pub abs_floor: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            coords_per_tensor: 12,
            seed: 0,
            training_seed: None,
            abs_floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorReport {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub tensors: Vec<TensorReport>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorReport> {
        self.tensors.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b)).max(floor);
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn new_tape<T: Element>(opts: &CheckOptions) -> Tape<T> {
    match opts.training_seed {
        Some(seed) => Tape::training(seed),
        None => Tape::new(),
    }
}

/// Compares analytic and finite-difference gradients for every trainable
/// tensor in `store`.
pub fn check_gradients<O: Objective>(obj: &O, store: &ParamStore<f32>, opts: &CheckOptions) -> Result<GradReport> {
    let mut tape = new_tape::<f32>(opts);
    let loss = obj.build(&mut tape, store)?;
    let grads = tape.backward(loss);
    let bound: Vec<_> = tape.bound_params().collect();

    let mut shadow: ParamStore<f64> = store.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tensors = Vec::new();
    for (id, name, t) in store.iter() {
        if !t.requires_grad {
            continue;
        }
        let analytic_full: Vec<f32> = match bound.iter().find(|(pid, _)| *pid == id) {
            Some((_, var)) => grads.wrt(*var),
            None => vec![0.0; t.len()],
        };
        let coords: Vec<usize> = if t.len() <= opts.coords_per_tensor {
            (0..t.len()).collect()
        } else {
            sample(&mut rng, t.len(), opts.coords_per_tensor).into_vec()
        };
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let original = shadow.get(id).data()[c];
            let mut eval = |v: f64| -> Result<f64> {
                shadow.get_mut(id).data_mut()[c] = v;
                let mut tape = new_tape::<f64>(opts);
                let out = obj.build(&mut tape, &shadow)?;
                Ok(tape.value(out)[0])
            };
            let plus = eval(original + opts.step)?;
            let minus = eval(original - opts.step)?;
            shadow.get_mut(id).data_mut()[c] = original;
            analytic.push(analytic_full[c] as f64);
            numeric.push((plus - minus) / (2.0 * opts.step));
        }
        let rel_error = relative_error(&analytic, &numeric, opts.abs_floor);
        tensors.push(TensorReport {
            name: name.to_string(),
            analytic,
            numeric,
            rel_error,
        });
    }
    Ok(GradReport { tensors })
}

/// `sum(x * w)` for a fixed pseudo-random `w` of the same shape, so that
/// every output element contributes a distinct weight to the gradient.
pub fn weighted_sum<T: Element>(tape: &mut Tape<T>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(Tensor::from_fn(&shape, |_| {
        T::from_f64_lossy(rng.random_range(-1.0..1.0))
    }));
    let prod = tape.mul(x, w)?;
    Ok(tape.sum_all(prod))
}

/// Tensor with entries drawn uniformly from `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi) as f32)
}

/// One differentiable operation with fixed, well-conditioned inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpCase {
    Matmul,
    MatmulLeading,
    MatmulBatched,
    Conv1d,
    AddBroadcast,
    SubBroadcast,
    MulBroadcast,
    Div,
    Scale,
    AddScalar,
    Sum,
    Mean,
    MeanAll,
    Transpose,
    Reshape,
    Concat,
    Slice,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Gelu,
    Tanh,
    Sqrt,
    L2Norm,
    Dropout,
}

impl Objective for OpCase {
    fn build<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Var> {
        let p = |tape: &mut Tape<T>, name: &str| tape.param(store, store.find(name).expect("case parameter"));
        let a = p(tape, "a");
        let out = match self {
            OpCase::Matmul | OpCase::MatmulLeading | OpCase::MatmulBatched => {
                let b = p(tape, "b");
                tape.matmul(a, b)?
            }
            OpCase::Conv1d => {
                let k = p(tape, "b");
                tape.conv1d(a, k, 2, 1)?
            }
            OpCase::AddBroadcast => {
                let b = p(tape, "b");
                tape.add(a, b)?
            }
            OpCase::SubBroadcast => {
                let b = p(tape, "b");
                tape.sub(a, b)?
            }
            OpCase::MulBroadcast => {
                let b = p(tape, "b");
                tape.mul(a, b)?
            }
            OpCase::Div => {
                let b = p(tape, "b");
                tape.div(a, b)?
            }
            OpCase::Scale => tape.scale(a, T::from_f64_lossy(-1.7)),
            OpCase::AddScalar => {
                let s = tape.add_scalar(a, T::from_f64_lossy(0.3));
                tape.mul(s, a)?
            }
            OpCase::Sum => tape.sum(a, 1, false)?,
            OpCase::Mean => tape.mean(a, 0, true)?,
            OpCase::MeanAll => {
                let sq = tape.mul(a, a)?;
                let m = tape.mean_all(sq);
                let m = tape.reshape(m, &[1])?;
                tape.mul(a, m)?
            }
            OpCase::Transpose => tape.transpose(a, 0, 2)?,
            OpCase::Reshape => tape.reshape(a, &[6, 4])?,
            OpCase::Concat => {
                let b = p(tape, "b");
                tape.concat(&[a, b, a], 1)?
            }
            OpCase::Slice => tape.slice(a, 1, 1, 3)?,
            OpCase::Softmax => tape.softmax(a, 1)?,
            OpCase::LogSoftmax => tape.log_softmax(a, 1)?,
            OpCase::LayerNorm => {
                let g = p(tape, "gamma");
                let b = p(tape, "beta");
                tape.layer_norm(a, g, b, 1e-5)?
            }
            OpCase::Gelu => tape.gelu(a),
            OpCase::Tanh => tape.tanh(a),
            OpCase::Sqrt => tape.sqrt(a),
            OpCase::L2Norm => tape.l2_norm(a, 1)?,
            OpCase::Dropout => {
                let d = tape.dropout(a, 0.3);
                tape.mul(d, a)?
            }
        };
        weighted_sum(tape, out, 7)
    }
}

impl OpCase {
    /// Parameters of the case, drawn from `seed`.
    pub fn store(self, seed: u64) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let mut add = |name: &str, shape: &[usize], lo: f64, hi: f64, k: u64| {
            s.add(name, random_tensor(shape, lo, hi, seed * 31 + k).with_grad(true));
        };
        match self {
            OpCase::Matmul => {
                add("a", &[3, 4], -1.0, 1.0, 0);
                add("b", &[4, 5], -1.0, 1.0, 1);
            }
            OpCase::MatmulLeading => {
                add("a", &[2, 3, 4], -1.0, 1.0, 0);
                add("b", &[4, 2], -1.0, 1.0, 1);
            }
            OpCase::MatmulBatched => {
                add("a", &[2, 3, 4], -1.0, 1.0, 0);
                add("b", &[2, 4, 3], -1.0, 1.0, 1);
            }
            OpCase::Conv1d => {
                add("a", &[2, 2, 11], -1.0, 1.0, 0);
                add("b", &[3, 2, 4], -1.0, 1.0, 1);
            }
            OpCase::AddBroadcast | OpCase::SubBroadcast | OpCase::MulBroadcast => {
                add("a", &[2, 3, 4], -1.0, 1.0, 0);
                add("b", &[3, 1], -1.0, 1.0, 1);
            }
            OpCase::Div => {
                add("a", &[3, 4], -1.0, 1.0, 0);
                add("b", &[4], 0.5, 2.0, 1);
            }
            OpCase::Concat => {
                add("a", &[2, 3], -1.0, 1.0, 0);
                add("b", &[2, 2], -1.0, 1.0, 1);
            }
            OpCase::LayerNorm => {
                add("a", &[3, 6], -2.0, 2.0, 0);
                add("gamma", &[6], 0.5, 1.5, 1);
                add("beta", &[6], -0.5, 0.5, 2);
            }
            OpCase::Transpose | OpCase::Reshape => add("a", &[2, 3, 4], -1.0, 1.0, 0),
            OpCase::Sqrt => add("a", &[3, 4], 0.2, 2.0, 0),
            OpCase::L2Norm => add("a", &[3, 4], -1.0, 1.0, 0),
            OpCase::Softmax | OpCase::LogSoftmax => add("a", &[3, 5], -3.0, 3.0, 0),
            _ => add("a", &[3, 4], -2.0, 2.0, 0),
        }
        s
    }

    pub const ALL: [OpCase; 25] = [
        OpCase::Matmul,
        OpCase::MatmulLeading,
        OpCase::MatmulBatched,
        OpCase::Conv1d,
        OpCase::AddBroadcast,
        OpCase::SubBroadcast,
        OpCase::MulBroadcast,
        OpCase::Div,
        OpCase::Scale,
        OpCase::AddScalar,
        OpCase::Sum,
        OpCase::Mean,
        OpCase::MeanAll,
        OpCase::Transpose,
        OpCase::Reshape,
        OpCase::Concat,
        OpCase::Slice,
        OpCase::Softmax,
        OpCase::LogSoftmax,
        OpCase::LayerNorm,
        OpCase::Gelu,
        OpCase::Tanh,
        OpCase::Sqrt,
        OpCase::L2Norm,
        OpCase::Dropout,
    ];

    /// Gradient check of the case on `seed`.
    pub fn check(self, seed: u64) -> Result<GradReport> {
        let opts = CheckOptions {
            coords_per_tensor: 64,
            seed,
            training_seed: (self == OpCase::Dropout).then_some(seed + 100),
            ..CheckOptions::default()
        };
        check_gradients(&self, &self.store(seed), &opts)
    }
}

/// Tokenizer, encoder and classification head of `model` on a fixed input.
pub struct EncoderObjective<'a> {
    pub model: &'a MantisModel,
    pub input: Tensor<f32>,
}

impl Objective for EncoderObjective<'_> {
    fn build<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Var> {
        let x = tape.constant(self.input.cast());
        let e = self.model.encode(tape, store, x)?;
        let logits = self.model.classify(tape, store, e)?;
        weighted_sum(tape, logits, 3)
    }
}

/// Checks the full composition on a tiny model with a three-class head.
pub fn check_encoder(seed: u64, coords_per_tensor: usize) -> Result<GradReport> {
    let mut model = MantisModel::new(ModelConfig::tiny(), seed)?;
    model.attach_head(model.config.token_dim, 3, seed + 1)?;
    let input = random_tensor(&[2, model.config.input_length], -2.0, 2.0, seed + 5);
    let obj = EncoderObjective { model: &model, input };
    let opts = CheckOptions {
        coords_per_tensor,
        seed,
        ..CheckOptions::default()
    };
    check_gradients(&obj, &model.params, &opts)
}
