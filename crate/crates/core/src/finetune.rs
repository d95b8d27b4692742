//! Downstream classification: frozen-embedding probes and the head, scratch
//! and full fine-tuning regimes.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{lcomb_forward, Adapter, AdapterKind};
use crate::autograd::{Tape, Var};
use crate::calibration::{argmax, softmax_row};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::MantisModel;
use crate::optim::{LrSchedule, OptimizerState};
use crate::params::{ParamId, ParamStore};
use crate::preprocessing::resize_channel;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regime {
    /// Logistic probe on frozen embeddings.
    Probe,
    /// Classification head on a frozen encoder.
    Head,
    /// Everything trained from a fresh initialisation.
    Scratch,
    /// Everything trained from the current weights.
    Full,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Probe => "probe",
            Regime::Head => "head",
            Regime::Scratch => "scratch",
            Regime::Full => "full",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "probe" => Regime::Probe,
            "head" => Regime::Head,
            "scratch" => Regime::Scratch,
            "full" => Regime::Full,
            _ => return Err(Error::arg(format!("unknown regime `{s}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub regime: Regime,
    pub lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// L2 penalty of the logistic probe.
    pub probe_l2: f64,
    /// Runs only this many epochs of the `epochs`-long schedule.
    pub stop_after: Option<usize>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Full,
            lr: 2e-4,
            epochs: 100,
            warmup_epochs: 10,
            batch_size: 64,
            weight_decay: 0.05,
            seed: 0,
            probe_l2: 1e-3,
            stop_after: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::arg(format!("learning rate {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::arg("epochs and batch size must be positive"));
        }
        Ok(())
    }

    /// The schedule, with the warm-up shortened when the run is shorter.
    pub fn schedule(&self) -> Result<LrSchedule> {
        let warmup = self.warmup_epochs.min(self.epochs - 1);
        LrSchedule::new(self.lr, self.epochs, warmup)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {} split {} loss {:.6} accuracy {:.6}",
            self.epoch, self.split, self.loss, self.accuracy
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    /// Every epoch's train metrics, followed by its validation metrics if any.
    pub metrics: Vec<EpochMetrics>,
    /// Epoch with the best validation accuracy (lowest train loss without a
    /// validation set); earliest wins ties.
    pub best_epoch: usize,
    pub last_epoch: usize,
}

impl FinetuneReport {
    pub fn at(&self, epoch: usize, split: Split) -> Option<&EpochMetrics> {
        self.metrics.iter().find(|m| m.epoch == epoch && m.split == split)
    }

    pub fn last(&self, split: Split) -> Option<&EpochMetrics> {
        self.at(self.last_epoch, split)
    }

    pub fn best(&self, split: Split) -> Option<&EpochMetrics> {
        self.at(self.best_epoch, split)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub label: usize,
    pub confidence: f64,
}

impl Prediction {
    pub fn from_logits(logits: &[f64]) -> Self {
        let probs = softmax_row(logits);
        let label = argmax(&probs);
        let confidence = probs[label];
        Self {
            probs,
            label,
            confidence,
        }
    }
}

/// Channels seen by the encoder for a dataset with `d` channels.
pub fn effective_channels(adapter: Option<&Adapter>, d: usize) -> usize {
    adapter.map_or(d, |a| a.d_new)
}

/// Model inputs `[n, d_eff, input_length]` after the adapter and resizing.
pub fn model_inputs(model: &MantisModel, data: &Dataset, adapter: Option<&Adapter>) -> Result<Vec<f32>> {
    let len = model.config.input_length;
    let mut out = Vec::new();
    for s in &data.samples {
        let adapted;
        let s = match adapter {
            Some(a) => {
                adapted = a.apply(s)?;
                &adapted
            }
            None => s,
        };
        for c in 0..s.channels() {
            out.extend(resize_channel(s.channel(c), len));
        }
    }
    Ok(out)
}

/// Frozen inference embeddings `[n, d_eff * token_dim]`, channel-major
/// within each row.
pub fn extract_embeddings(
    model: &MantisModel,
    data: &Dataset,
    adapter: Option<&Adapter>,
    batch: usize,
) -> Result<Vec<f32>> {
    extract_embeddings_threaded(model, data, adapter, batch, 1)
}

pub fn extract_embeddings_threaded(
    model: &MantisModel,
    data: &Dataset,
    adapter: Option<&Adapter>,
    batch: usize,
    threads: usize,
) -> Result<Vec<f32>> {
    let inputs = model_inputs(model, data, adapter)?;
    model.embed_channels_threaded(&inputs, batch, threads)
}

/// Multinomial logistic regression on fixed features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub dim: usize,
    pub num_classes: usize,
    /// `num_classes x dim`, row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub iterations: usize,
}

fn probe_logits(w: &[f64], b: &[f64], x: &[f64], dim: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() / dim * k);
    for row in x.chunks(dim) {
        for c in 0..k {
            let wc = &w[c * dim..(c + 1) * dim];
            out.push(b[c] + wc.iter().zip(row).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    out
}

/// Full-batch gradient descent on mean cross-entropy plus
/// `l2 / 2 * ||W||^2`, until the gradient norm drops below 1e-4 or 5000
/// iterations.
pub fn linear_probe_fit(features: &[f32], dim: usize, labels: &[usize], k: usize, l2: f64) -> Result<LinearProbe> {
    let n = labels.len();
    if dim == 0 || features.len() != n * dim {
        return Err(Error::shape("linear_probe_fit", &[n, dim], &[features.len()]));
    }
    if n < k || k < 2 {
        return Err(Error::input(format!("{n} samples cannot fit {k} classes")));
    }
    if labels.iter().any(|&y| y >= k) {
        return Err(Error::input("label out of range"));
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(Error::input("training set has a single class"));
    }
    let x: Vec<f64> = features.iter().map(|&v| v as f64).collect();
    // step size from the largest eigenvalue of [x 1]^T [x 1] / n
    let mut v = vec![1.0; dim + 1];
    let mut lambda = 1.0;
    for _ in 0..50 {
        let mut next = vec![0.0; dim + 1];
        for row in x.chunks(dim) {
            let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[dim];
            for (nj, rj) in next.iter_mut().zip(row) {
                *nj += dot * rj;
            }
            next[dim] += dot;
        }
        let norm = next.iter().map(|a| a * a).sum::<f64>().sqrt() / n as f64;
        if norm == 0.0 {
            break;
        }
        lambda = norm;
        v = next.iter().map(|a| a / (norm * n as f64)).collect();
    }
    let step = 1.0 / (0.5 * lambda + l2);

    let mut w = vec![0.0; k * dim];
    let mut b = vec![0.0; k];
    let mut iterations = 0;
    while iterations < 5000 {
        let logits = probe_logits(&w, &b, &x, dim, k);
        let mut gw: Vec<f64> = w.iter().map(|wi| l2 * wi).collect();
        let mut gb = vec![0.0; k];
        for (i, row) in logits.chunks(k).enumerate() {
            let p = softmax_row(row);
            let xi = &x[i * dim..(i + 1) * dim];
            for c in 0..k {
                let r = (p[c] - if labels[i] == c { 1.0 } else { 0.0 }) / n as f64;
                gb[c] += r;
                for (g, xv) in gw[c * dim..(c + 1) * dim].iter_mut().zip(xi) {
                    *g += r * xv;
                }
            }
        }
        let gnorm = gw.iter().chain(&gb).map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < 1e-4 {
            break;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= step * g;
        }
        for (bi, g) in b.iter_mut().zip(&gb) {
            *bi -= step * g;
        }
        iterations += 1;
    }
    Ok(LinearProbe {
        dim,
        num_classes: k,
        weights: w.iter().map(|&v| v as f32).collect(),
        bias: b.iter().map(|&v| v as f32).collect(),
        iterations,
    })
}

impl LinearProbe {
    pub fn logits(&self, features: &[f32]) -> Result<Vec<f64>> {
        if !features.len().is_multiple_of(self.dim) {
            return Err(Error::shape("probe", &[features.len()], &[self.dim]));
        }
        let w: Vec<f64> = self.weights.iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = self.bias.iter().map(|&v| v as f64).collect();
        let x: Vec<f64> = features.iter().map(|&v| v as f64).collect();
        Ok(probe_logits(&w, &b, &x, self.dim, self.num_classes))
    }

    pub fn predict(&self, features: &[f32]) -> Result<Vec<Prediction>> {
        Ok(self
            .logits(features)?
            .chunks(self.num_classes)
            .map(Prediction::from_logits)
            .collect())
    }
}

/// Stratified split keeping `fraction` of each class for training.
///
/// Falls back to an unstratified split when some class has a single sample.
pub fn train_val_split(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = data.len();
    if n < 5 {
        return Err(Error::input(format!("cannot split {n} samples")));
    }
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(Error::arg(format!("split fraction {fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = data.labels();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes()];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    if by_class.iter().any(|c| c.len() == 1) {
        log::warn!("a class has a single sample; falling back to an unstratified split");
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        let cut = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        train.extend_from_slice(&all[..cut]);
        val.extend_from_slice(&all[cut..]);
    } else {
        for mut members in by_class {
            members.shuffle(&mut rng);
            let cut = (fraction * members.len() as f64).round() as usize;
            train.extend_from_slice(&members[..cut]);
            val.extend_from_slice(&members[cut..]);
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((data.subset(&train), data.subset(&val)))
}

/// Mean cross-entropy of `logits` `[b, k]` against integer labels.
pub fn cross_entropy<T: Element>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let (b, k) = (shape[0], shape[1]);
    let logp = tape.log_softmax(logits, 1)?;
    let onehot = tape.constant(Tensor::from_fn(&[b, k], |i| {
        if labels[i / k] == i % k {
            T::one()
        } else {
            T::zero()
        }
    }));
    let picked = tape.mul(logp, onehot)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, T::from_f64_lossy(-1.0 / b as f64)))
}

/// Where the classifier reads its features from.
enum Features {
    /// Frozen embeddings computed once.
    Cached { values: Vec<f32>, width: usize },
    /// Raw model inputs `[n, d, len]` run through the encoder every step.
    Encoded {
        inputs: Vec<f32>,
        channels: usize,
        lcomb: Option<ParamId>,
    },
}

fn batch_logits(
    model: &MantisModel,
    store: &ParamStore<f32>,
    tape: &mut Tape<f32>,
    features: &Features,
    batch: &[usize],
) -> Result<Var> {
    let b = batch.len();
    match features {
        Features::Cached { values, width } => {
            let rows: Vec<f32> = batch
                .iter()
                .flat_map(|&i| values[i * width..(i + 1) * width].iter().copied())
                .collect();
            let x = tape.constant(Tensor::new(&[b, *width], rows)?);
            model.classify(tape, store, x)
        }
        Features::Encoded {
            inputs,
            channels,
            lcomb,
        } => {
            let len = model.config.input_length;
            let per = channels * len;
            let rows: Vec<f32> = batch
                .iter()
                .flat_map(|&i| inputs[i * per..(i + 1) * per].iter().copied())
                .collect();
            let mut x = tape.constant(Tensor::new(&[b, *channels, len], rows)?);
            let mut d_eff = *channels;
            if let Some(id) = lcomb {
                let w = tape.param(store, *id);
                x = lcomb_forward(tape, w, x)?;
                d_eff = tape.shape(x)[1];
            }
            let flat = tape.reshape(x, &[b * d_eff, len])?;
            let e = model.encode(tape, store, flat)?;
            let z = tape.reshape(e, &[b, d_eff * model.config.token_dim])?;
            model.classify(tape, store, z)
        }
    }
}

fn evaluate_split(
    model: &MantisModel,
    store: &ParamStore<f32>,
    features: &Features,
    labels: &[usize],
    batch: usize,
) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..labels.len()).collect();
    let (mut loss, mut hits) = (0.0, 0usize);
    for chunk in idx.chunks(batch) {
        let mut tape = Tape::new();
        let logits = batch_logits(model, store, &mut tape, features, chunk)?;
        let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let ce = cross_entropy(&mut tape, logits, &ys)?;
        loss += tape.value(ce)[0] as f64 * chunk.len() as f64;
        let k = tape.shape(logits)[1];
        for (row, &y) in tape.value(logits).chunks(k).zip(&ys) {
            let r: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            hits += usize::from(argmax(&r) == y);
        }
    }
    let n = labels.len() as f64;
    Ok((loss / n, hits as f64 / n))
}

fn prepare(
    model: &MantisModel,
    data: &Dataset,
    adapter: Option<&Adapter>,
    cached: bool,
    lcomb: Option<ParamId>,
    batch: usize,
) -> Result<Features> {
    if cached {
        let values = extract_embeddings(model, data, adapter, batch)?;
        let width = effective_channels(adapter, data.channels()) * model.config.token_dim;
        return Ok(Features::Cached { values, width });
    }
    match adapter {
        Some(a) if a.kind == AdapterKind::LComb => {
            if a.d != data.channels() {
                return Err(Error::shape("adapter", &[data.channels()], &[a.d]));
            }
            Ok(Features::Encoded {
                inputs: model_inputs(model, data, None)?,
                channels: data.channels(),
                lcomb,
            })
        }
        _ => Ok(Features::Encoded {
            inputs: model_inputs(model, data, adapter)?,
            channels: effective_channels(adapter, data.channels()),
            lcomb: None,
        }),
    }
}

/// Trains a fresh classification head (and, depending on the regime, the
/// encoder and a learnable channel combiner) with cross-entropy under AdamW
/// and the warm-up + cosine schedule.
///
/// Metrics are evaluated without dropout after every epoch.
pub fn finetune(
    model: &mut MantisModel,
    train: &Dataset,
    val: Option<&Dataset>,
    adapter: Option<&mut Adapter>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    let k = train.num_classes();
    if let Some(v) = val {
        if v.num_classes() != k || v.channels() != train.channels() {
            return Err(Error::input("validation set does not match the training set"));
        }
    }
    match cfg.regime {
        Regime::Probe => return Err(Error::arg("the probe regime is fitted with linear_probe_fit")),
        Regime::Scratch => {
            let mut fresh = MantisModel::new(model.config.clone(), cfg.seed)?;
            if model.projector.is_some() {
                fresh.attach_projector(cfg.seed.wrapping_add(1));
            }
            *model = fresh;
        }
        Regime::Head | Regime::Full => {}
    }
    let d_eff = effective_channels(adapter.as_deref(), train.channels());
    model.attach_head(d_eff * model.config.token_dim, k, cfg.seed.wrapping_add(2))?;
    model.set_encoder_trainable(cfg.regime != Regime::Head);
    if let Some(p) = &model.projector {
        for id in [p.norm.gamma, p.norm.beta, p.linear.weight, p.linear.bias] {
            model.params.get_mut(id).requires_grad = false;
        }
    }

    let mut store = model.params.clone();
    let is_lcomb = adapter.as_ref().is_some_and(|a| a.kind == AdapterKind::LComb);
    let lcomb = match adapter.as_deref() {
        Some(a) if is_lcomb => Some(store.add(
            "adapter.lcomb",
            Tensor::new(&[a.d_new, a.d], a.weights.clone())?.with_grad(true),
        )),
        _ => None,
    };
    let cached = cfg.regime == Regime::Head && !is_lcomb;
    let eval_batch = cfg.batch_size.max(64);
    let train_features = prepare(model, train, adapter.as_deref(), cached, lcomb, eval_batch)?;
    let val_features = match val {
        Some(v) => Some(prepare(model, v, adapter.as_deref(), cached, lcomb, eval_batch)?),
        None => None,
    };
    let train_labels = train.labels();
    let val_labels = val.map(Dataset::labels);

    let schedule = cfg.schedule()?;
    let mut opt = OptimizerState::new(cfg.lr, cfg.weight_decay);
    let mut metrics = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let run = cfg.stop_after.map_or(cfg.epochs, |s| s.clamp(1, cfg.epochs));
    for epoch in 0..run {
        opt.lr = schedule.lr_at(epoch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step_seed = cfg.seed.wrapping_mul(7_919) ^ ((epoch as u64) << 24) ^ bi as u64;
            let mut tape = Tape::training(step_seed);
            let logits = batch_logits(model, &store, &mut tape, &train_features, batch)?;
            let ys: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
            let loss = cross_entropy(&mut tape, logits, &ys)?;
            let grads = tape.backward(loss);
            store.zero_grad();
            store.accumulate_grads(&tape, &grads);
            opt.step(&mut store)?;
        }
        let (loss, accuracy) = evaluate_split(model, &store, &train_features, &train_labels, eval_batch)?;
        let train_m = EpochMetrics {
            epoch,
            split: Split::Train,
            loss,
            accuracy,
        };
        log::info!("{train_m}");
        metrics.push(train_m);
        let score = match (&val_features, &val_labels) {
            (Some(f), Some(ys)) => {
                let (loss, accuracy) = evaluate_split(model, &store, f, ys, eval_batch)?;
                let m = EpochMetrics {
                    epoch,
                    split: Split::Val,
                    loss,
                    accuracy,
                };
                log::info!("{m}");
                metrics.push(m);
                accuracy
            }
            _ => -loss,
        };
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((epoch, score));
        }
    }

    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        model.params.set_values(id, store.get(id).data())?;
    }
    if let (Some(a), Some(id)) = (adapter, lcomb) {
        a.weights = store.get(id).data().to_vec();
    }
    model.set_encoder_trainable(true);
    Ok(FinetuneReport {
        metrics,
        best_epoch: best.map_or(0, |b| b.0),
        last_epoch: run - 1,
    })
}

/// Inference logits `[n, k]` of the attached head.
pub fn predict_logits(
    model: &MantisModel,
    data: &Dataset,
    adapter: Option<&Adapter>,
    batch: usize,
) -> Result<Vec<f64>> {
    let head = model.head.as_ref().ok_or_else(|| Error::arg("model has no head"))?;
    let z = extract_embeddings(model, data, adapter, batch)?;
    if z.len() != data.len() * head.input_dim {
        return Err(Error::shape("predict", &[data.len(), head.input_dim], &[z.len()]));
    }
    let mut out = Vec::with_capacity(data.len() * head.num_classes);
    for chunk in z.chunks(batch.max(1) * head.input_dim) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(
            &[chunk.len() / head.input_dim, head.input_dim],
            chunk.to_vec(),
        )?);
        let logits = model.classify(&mut tape, &model.params, x)?;
        out.extend(tape.value(logits).iter().map(|&v| v as f64));
    }
    Ok(out)
}

pub fn predict(
    model: &MantisModel,
    data: &Dataset,
    adapter: Option<&Adapter>,
    batch: usize,
) -> Result<Vec<Prediction>> {
    let k = model
        .head
        .as_ref()
        .ok_or_else(|| Error::arg("model has no head"))?
        .num_classes;
    Ok(predict_logits(model, data, adapter, batch)?
        .chunks(k)
        .map(Prediction::from_logits)
        .collect())
}
