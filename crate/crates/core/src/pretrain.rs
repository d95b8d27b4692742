//! Contrastive pre-training with random crop-and-resize views.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::MantisModel;
use crate::optim::{LrSchedule, OptimizerState};
use crate::preprocessing::resize_channel;
use crate::tensor::{Element, Tensor};

/// Denominator guard of the cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub crop_min: f64,
    pub crop_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_min: 0.0,
            crop_max: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.crop_min && self.crop_min <= self.crop_max && self.crop_max < 1.0) {
            return Err(Error::arg(format!(
                "crop range [{}, {}] must satisfy 0 <= min <= max < 1",
                self.crop_min, self.crop_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            batch_size: 64,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::arg(format!("temperature {} must be positive", self.temperature)));
        }
        if self.batch_size < 2 {
            return Err(Error::arg(format!("batch size {} is below 2", self.batch_size)));
        }
        self.augment.validate()
    }
}

/// Number of steps kept when cropping a fraction `c` of `len` steps.
pub fn kept_steps(len: usize, c: f64) -> usize {
    (((1.0 - c) * len as f64).round() as usize).clamp(2, len)
}

/// Keeps `kept_steps(len, c)` steps from `start` and stretches them back to
/// the original length.
pub fn crop_window(x: &[f32], c: f64, start: usize) -> Result<Vec<f32>> {
    if !(0.0..1.0).contains(&c) {
        return Err(Error::arg(format!("crop fraction {c} must lie in [0, 1)")));
    }
    let keep = kept_steps(x.len(), c);
    if start + keep > x.len() {
        return Err(Error::arg(format!("window {start}+{keep} exceeds length {}", x.len())));
    }
    Ok(resize_channel(&x[start..start + keep], x.len()))
}

/// Crop with a window start drawn uniformly over all valid positions.
pub fn random_crop_resize<R: Rng>(x: &[f32], c: f64, rng: &mut R) -> Result<Vec<f32>> {
    if !(0.0..1.0).contains(&c) {
        return Err(Error::arg(format!("crop fraction {c} must lie in [0, 1)")));
    }
    let keep = kept_steps(x.len(), c);
    let start = rng.random_range(0..=x.len() - keep);
    crop_window(x, c, start)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norm(a).max(COSINE_EPS) * norm(b).max(COSINE_EPS))
}

/// `b x b` cosine similarities between rows of two `b x w` matrices.
pub fn pairwise_similarities(view1: &[f64], view2: &[f64], width: usize) -> Result<Vec<f64>> {
    if width == 0 || view1.len() != view2.len() || !view1.len().is_multiple_of(width) {
        return Err(Error::shape("pairwise_similarities", &[view1.len()], &[view2.len()]));
    }
    let mut out = Vec::with_capacity((view1.len() / width).pow(2));
    for a in view1.chunks(width) {
        for b in view2.chunks(width) {
            out.push(cosine_sim(a, b));
        }
    }
    Ok(out)
}

/// Mean over rows of the cross-entropy of `row / t` against the diagonal.
pub fn info_nce_loss(sims: &[f64], b: usize, temperature: f64) -> f64 {
    let mut total = 0.0;
    for (i, row) in sims.chunks(b).enumerate() {
        let scaled: Vec<f64> = row.iter().map(|s| s / temperature).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scaled.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - scaled[i];
    }
    total / b as f64
}

/// Rows of `x` divided by their L2 norm plus the eps guard.
fn unit_rows<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let n = tape.l2_norm(x, 1)?;
    let n = tape.add_scalar(n, T::from_f64_lossy(COSINE_EPS));
    tape.div(x, n)
}

/// Differentiable `b x b` cosine-similarity matrix.
pub fn similarity_matrix<T: Element>(tape: &mut Tape<T>, view1: Var, view2: Var) -> Result<Var> {
    if tape.shape(view1) != tape.shape(view2) {
        return Err(Error::shape("similarity_matrix", tape.shape(view1), tape.shape(view2)));
    }
    let a = unit_rows(tape, view1)?;
    let b = unit_rows(tape, view2)?;
    let bt = tape.transpose(b, 0, 1)?;
    tape.matmul(a, bt)
}

/// Differentiable InfoNCE over a similarity matrix.
pub fn info_nce<T: Element>(tape: &mut Tape<T>, sims: Var, temperature: f64) -> Result<Var> {
    let b = tape.shape(sims)[0];
    let scaled = tape.scale(sims, T::from_f64_lossy(1.0 / temperature));
    let logp = tape.log_softmax(scaled, 1)?;
    let eye = tape.constant(Tensor::from_fn(&[b, b], |i| {
        if i / b == i % b {
            T::one()
        } else {
            T::zero()
        }
    }));
    let picked = tape.mul(logp, eye)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, T::from_f64_lossy(-1.0 / b as f64)))
}

/// Per-sample augmentation stream, independent of batch layout.
fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Two independently cropped views of each channel in `indices`.
pub fn augment_batch(
    channels: &[f32],
    length: usize,
    indices: &[usize],
    cfg: &ContrastiveConfig,
    epoch: usize,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut v1 = Vec::with_capacity(indices.len() * length);
    let mut v2 = Vec::with_capacity(indices.len() * length);
    for &i in indices {
        let x = &channels[i * length..(i + 1) * length];
        let mut rng = sample_rng(cfg.seed, epoch, i);
        let (lo, hi) = (cfg.augment.crop_min, cfg.augment.crop_max);
        let c1 = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let c2 = if hi > lo { rng.random_range(lo..hi) } else { lo };
        v1.extend(random_crop_resize(x, c1, &mut rng)?);
        v2.extend(random_crop_resize(x, c2, &mut rng)?);
    }
    Ok((v1, v2))
}

/// One pass of contrastive training over `channels` (`n` rows of the model
/// input length); returns the mean batch loss.
///
/// The model must have a projector attached. Batches of a single channel
/// are skipped.
pub fn pretrain_epoch(
    model: &mut MantisModel,
    channels: &[f32],
    cfg: &ContrastiveConfig,
    opt: &mut OptimizerState,
    epoch: usize,
) -> Result<f64> {
    cfg.validate()?;
    let len = model.config.input_length;
    if channels.is_empty() || !channels.len().is_multiple_of(len) {
        return Err(Error::input(format!(
            "pre-training data must be a non-empty multiple of {len} values"
        )));
    }
    if model.projector.is_none() {
        return Err(Error::arg("pre-training needs a projector"));
    }
    let n = channels.len() / len;
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    shuffle.set_stream(epoch as u64);
    order.shuffle(&mut shuffle);

    let mut losses = Vec::new();
    for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
        if batch.len() < 2 {
            log::warn!("skipping contrastive batch of size {}", batch.len());
            continue;
        }
        let (v1, v2) = augment_batch(channels, len, batch, cfg, epoch)?;
        let bsz = batch.len();
        let mut both = v1;
        both.extend(v2);
        let step_seed = cfg.seed.wrapping_mul(1_000_003) ^ ((epoch as u64) << 20) ^ b as u64;
        let mut tape = Tape::training(step_seed);
        let x = tape.constant(Tensor::new(&[2 * bsz, len], both)?);
        let e = model.encode(&mut tape, &model.params, x)?;
        let p = model.project(&mut tape, &model.params, e)?;
        let p1 = tape.slice(p, 0, 0, bsz)?;
        let p2 = tape.slice(p, 0, bsz, 2 * bsz)?;
        let sims = similarity_matrix(&mut tape, p1, p2)?;
        let loss = info_nce(&mut tape, sims, cfg.temperature)?;
        let value = tape.value(loss)[0] as f64;
        let grads = tape.backward(loss);
        model.params.zero_grad();
        model.params.accumulate_grads(&tape, &grads);
        opt.step(&mut model.params)?;
        losses.push(value);
    }
    if losses.is_empty() {
        return Err(Error::input("no batch with at least 2 channels"));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Runs every epoch of `schedule` with AdamW, attaching a projector first if
/// the model has none; returns the per-epoch mean losses.
pub fn pretrain(
    model: &mut MantisModel,
    channels: &[f32],
    cfg: &ContrastiveConfig,
    schedule: &LrSchedule,
    weight_decay: f64,
) -> Result<Vec<f64>> {
    if model.projector.is_none() {
        model.attach_projector(cfg.seed.wrapping_add(1));
    }
    let mut opt = OptimizerState::new(schedule.lr_at(0)?, weight_decay);
    let mut losses = Vec::with_capacity(schedule.total_epochs);
    for epoch in 0..schedule.total_epochs {
        opt.lr = schedule.lr_at(epoch)?;
        let loss = pretrain_epoch(model, channels, cfg, &mut opt, epoch)?;
        log::info!("epoch {epoch} split pretrain loss {loss:.6}");
        losses.push(loss);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_crop_is_identity() {
        let x: Vec<f32> = (0..512).map(|i| (i as f32 * 0.1).sin()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_crop_resize(&x, 0.0, &mut rng).unwrap(), x);
    }

    #[test]
    fn constant_stays_constant() {
        let x = vec![2.5f32; 512];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for c in [0.05, 0.2, 0.7] {
            assert!(random_crop_resize(&x, c, &mut rng).unwrap().iter().all(|&v| v == 2.5));
        }
    }

    #[test]
    fn half_crop_of_ramp() {
        let x: Vec<f32> = (0..512).map(|i| i as f32).collect();
        let y = crop_window(&x, 0.5, 0).unwrap();
        assert_eq!(y.len(), 512);
        assert_eq!(y[0], 0.0);
        assert_eq!(y[511], 255.0);
        for (j, v) in y.iter().enumerate() {
            let expect = j as f64 * 255.0 / 511.0;
            assert!((*v as f64 - expect).abs() < 1e-4);
        }
    }

    #[test]
    fn full_crop_is_rejected() {
        let x = vec![0.0f32; 16];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(random_crop_resize(&x, 1.0, &mut rng).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[3.0, -1.0], &[3.0, -1.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine_sim(&[1.0, 1.0], &[1.0, 0.0]) - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn info_nce_closed_forms() {
        for b in [2usize, 8, 32] {
            let sims = vec![0.3; b * b];
            assert!((info_nce_loss(&sims, b, 0.1) - (b as f64).ln()).abs() < 1e-12);
            let diag: Vec<f64> = (0..b * b).map(|i| if i / b == i % b { 1.0 } else { -1.0 }).collect();
            let expect = (1.0 + (b as f64 - 1.0) * (-20f64).exp()).ln();
            assert!((info_nce_loss(&diag, b, 0.1) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn graph_loss_matches_plain_loss() {
        let p1 = [0.2, -1.0, 0.5, 0.3, 1.2, -0.4, 0.9, 0.1, 0.0];
        let p2 = [0.1, -0.8, 0.7, 0.5, 1.0, -0.2, 1.1, 0.3, -0.2];
        let sims = pairwise_similarities(&p1, &p2, 3).unwrap();
        let plain = info_nce_loss(&sims, 3, 0.1);
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(&[3, 3], p1.to_vec()).unwrap());
        let b = tape.constant(Tensor::new(&[3, 3], p2.to_vec()).unwrap());
        let s = similarity_matrix(&mut tape, a, b).unwrap();
        for (x, y) in tape.value(s).iter().zip(&sims) {
            assert!((x - y).abs() < 1e-7);
        }
        let l = info_nce(&mut tape, s, 0.1).unwrap();
        assert!((tape.value(l)[0] - plain).abs() < 1e-6);
    }

    #[test]
    fn augmentation_is_reproducible() {
        let x: Vec<f32> = (0..4 * 64).map(|i| (i as f32 * 0.37).cos()).collect();
        let cfg = ContrastiveConfig {
            seed: 5,
            ..ContrastiveConfig::default()
        };
        let a = augment_batch(&x, 64, &[0, 2, 3], &cfg, 1).unwrap();
        let b = augment_batch(&x, 64, &[0, 2, 3], &cfg, 1).unwrap();
        assert_eq!(a, b);
        // a sample's views do not depend on its batch neighbours
        let c = augment_batch(&x, 64, &[2], &cfg, 1).unwrap();
        assert_eq!(&a.0[64..128], &c.0[..]);
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig {
            crop_min: 0.3,
            crop_max: 0.2
        }
        .validate()
        .is_err());
        assert!(ContrastiveConfig {
            batch_size: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
