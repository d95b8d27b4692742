//! Input conditioning: length resizing, per-channel z-scoring and first
//! differences.

use crate::error::{Error, Result};

/// Input length expected by the encoder.
pub const MODEL_LENGTH: usize = 512;

/// A multichannel series stored channel-major (`channels x length`).
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    channels: usize,
    length: usize,
    values: Vec<f32>,
    pub label: Option<usize>,
}

impl RawSeries {
    pub fn new(channels: usize, length: usize, values: Vec<f32>, label: Option<usize>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::input("series needs at least one channel"));
        }
        if length < 2 {
            return Err(Error::input(format!("series length {length} is below 2")));
        }
        if values.len() != channels * length {
            return Err(Error::shape("series", &[channels, length], &[values.len()]));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!("non-finite value at flat index {i}")));
        }
        Ok(Self {
            channels,
            length,
            values,
            label,
        })
    }

    pub fn univariate(values: Vec<f32>, label: Option<usize>) -> Result<Self> {
        let t = values.len();
        Self::new(1, t, values, label)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.values[c * self.length..(c + 1) * self.length]
    }

    fn map_channels(&self, length: usize, f: impl Fn(&[f32]) -> Vec<f32>) -> Self {
        let values = (0..self.channels).flat_map(|c| f(self.channel(c))).collect();
        Self {
            channels: self.channels,
            length,
            values,
            label: self.label,
        }
    }
}

/// Endpoint-aligned linear interpolation of one channel to `target` samples.
pub fn resize_channel(x: &[f32], target: usize) -> Vec<f32> {
    let t = x.len();
    if t == target {
        return x.to_vec();
    }
    if target == 1 {
        return vec![x[0]];
    }
    let scale = (t - 1) as f64 / (target - 1) as f64;
    (0..target)
        .map(|j| {
            let pos = j as f64 * scale;
            let i0 = (pos.floor() as usize).min(t - 2);
            let frac = pos - i0 as f64;
            (x[i0] as f64 * (1.0 - frac) + x[i0 + 1] as f64 * frac) as f32
        })
        .collect()
}

/// Resizes every channel to `target_length` samples.
pub fn resize_linear(series: &RawSeries, target_length: usize) -> Result<RawSeries> {
    if target_length < 2 {
        return Err(Error::arg(format!("target length {target_length} is below 2")));
    }
    Ok(series.map_channels(target_length, |c| resize_channel(c, target_length)))
}

/// `(x - mean) / (std + eps)` over one channel, population standard deviation.
pub fn normalize_channel(x: &[f32], eps: f64) -> Vec<f32> {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + eps;
    x.iter()
        .map(|&v| {
            let centered = v as f64 - mean;
            if centered == 0.0 {
                0.0
            } else {
                (centered / denom) as f32
            }
        })
        .collect()
}

/// Per-channel z-scoring across time steps.
pub fn instance_norm(series: &RawSeries, eps: f64) -> RawSeries {
    series.map_channels(series.length, |c| normalize_channel(c, eps))
}

/// First differences of one channel, left-padded with a zero.
pub fn differential_channel(x: &[f32]) -> Vec<f32> {
    std::iter::once(0.0).chain(x.windows(2).map(|w| w[1] - w[0])).collect()
}

pub fn differential(series: &RawSeries) -> RawSeries {
    series.map_channels(series.length, differential_channel)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreprocConfig {
    pub target_length: usize,
    pub eps: f64,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        Self {
            target_length: MODEL_LENGTH,
            eps: 1e-5,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn resize_constant_and_midpoint() {
        let c = resize_channel(&[4.25; 37], 512);
        assert!(c.iter().all(|&v| v == 4.25));
        assert_eq!(resize_channel(&[0.0, 1.0], 3), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn resize_matches_two_point_oracle() {
        // Independent oracle: locate the bracketing pair by scanning.
        let x: Vec<f32> = (0..100).map(|i| ((i * 37 % 101) as f32 / 13.0).sin()).collect();
        let out = resize_channel(&x, 512);
        for (j, &v) in out.iter().enumerate() {
            let target = j as f64 * 99.0 / 511.0;
            let mut lo = 0;
            while lo + 1 < 99 && (lo + 1) as f64 <= target {
                lo += 1;
            }
            let w = target - lo as f64;
            let expect = x[lo] as f64 + w * (x[lo + 1] as f64 - x[lo] as f64);
            assert!((v as f64 - expect).abs() < 1e-6, "j={j}");
        }
        assert_eq!(out[0], x[0]);
        assert_eq!(out[511], x[99]);
    }

    #[test]
    fn resize_rejects_short_inputs() {
        assert!(RawSeries::univariate(vec![1.0], None).is_err());
        let s = RawSeries::univariate(vec![1.0, 2.0], None).unwrap();
        assert!(resize_linear(&s, 1).is_err());
    }

    #[test]
    fn instance_norm_hand_values() {
        let out = normalize_channel(&[1.0, 2.0, 3.0], 0.0);
        assert!(close(&out, &[-1.2247, 0.0, 1.2247], 1e-3));
        assert_eq!(normalize_channel(&[7.0, 7.0, 7.0], 1e-5), vec![0.0; 3]);
    }

    #[test]
    fn differential_examples() {
        assert_eq!(differential_channel(&[1.0, 3.0, 6.0, 10.0]), vec![0.0, 2.0, 3.0, 4.0]);
        assert_eq!(differential_channel(&[2.0; 5]), vec![0.0; 5]);
        let ramp: Vec<f32> = (0..10).map(|i| 0.5 * i as f32).collect();
        assert!(differential_channel(&ramp)[1..].iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn multichannel_ops_act_per_channel() {
        let s = RawSeries::new(2, 3, vec![1.0, 2.0, 3.0, 10.0, 10.0, 10.0], Some(1)).unwrap();
        let n = instance_norm(&s, 1e-5);
        assert_eq!(n.channel(1), &[0.0, 0.0, 0.0]);
        assert_eq!(n.label, Some(1));
        let r = resize_linear(&s, 5).unwrap();
        assert_eq!(r.length(), 5);
        assert_eq!(r.channel(0), &[1.0, 1.5, 2.0, 2.5, 3.0]);
    }

    proptest! {
        #[test]
        fn normalized_channel_has_unit_moments(x in prop::collection::vec(-100.0f32..100.0, 8..64)) {
            let spread = x.iter().cloned().fold(f32::MIN, f32::max) - x.iter().cloned().fold(f32::MAX, f32::min);
            prop_assume!(spread > 1e-2);
            let y = normalize_channel(&x, 1e-5);
            let n = y.len() as f64;
            let mean = y.iter().map(|&v| v as f64).sum::<f64>() / n;
            let std = (y.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((std - 1.0).abs() < 1e-3);
        }

        #[test]
        fn instance_norm_is_affine_invariant(
            x in prop::collection::vec(-10.0f32..10.0, 16..64),
            a in 0.5f32..20.0,
            b in -50.0f32..50.0,
        ) {
            let spread = x.iter().cloned().fold(f32::MIN, f32::max) - x.iter().cloned().fold(f32::MAX, f32::min);
            prop_assume!(spread > 0.5);
            let y: Vec<f32> = x.iter().map(|&v| a * v + b).collect();
            prop_assert!(close(&normalize_channel(&x, 1e-5), &normalize_channel(&y, 1e-5), 1e-4));
        }

        #[test]
        fn resize_is_stable_under_refinement(
            freq in 0.5f64..3.0,
            t in 16usize..128,
            target in 8usize..256,
        ) {
            let x: Vec<f32> = (0..t).map(|i| (freq * i as f64 / t as f64 * std::f64::consts::TAU).sin() as f32).collect();
            let direct = resize_channel(&x, target);
            let refined = resize_channel(&resize_channel(&x, 2 * t - 1), target);
            prop_assert!(close(&direct, &refined, 1e-4));
        }

        #[test]
        fn differential_removes_linear_trend(
            x in prop::collection::vec(-10.0f32..10.0, 4..64),
            slope in -3.0f32..3.0,
        ) {
            let trended: Vec<f32> = x.iter().enumerate().map(|(i, &v)| v + slope * i as f32).collect();
            let d0 = differential_channel(&x);
            let d1 = differential_channel(&trended);
            for i in 1..x.len() {
                prop_assert!((d1[i] - d0[i] - slope).abs() < 1e-3);
            }
        }
    }
}
