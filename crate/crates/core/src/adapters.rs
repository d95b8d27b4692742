//! Channel adapters mapping `d` input channels to `d_new` channels at every
//! time step.
//!
//! The standalone reducers are fitted on the `(n * t, d)` matrix of all
//! time-step vectors. `LComb` is a learnable matrix trained with the encoder.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{normalize_sign, symmetric_eigen};
use crate::preprocessing::RawSeries;
use crate::tensor::Element;

/// Channel count produced by a learnable combiner.
pub const LCOMB_CHANNELS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AdapterKind {
    Pca,
    Svd,
    RandProj,
    VarSelector,
    LComb,
}

impl AdapterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::Pca => "pca",
            AdapterKind::Svd => "svd",
            AdapterKind::RandProj => "randproj",
            AdapterKind::VarSelector => "varsel",
            AdapterKind::LComb => "lcomb",
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pca" => AdapterKind::Pca,
            "svd" => AdapterKind::Svd,
            "randproj" => AdapterKind::RandProj,
            "varsel" => AdapterKind::VarSelector,
            "lcomb" => AdapterKind::LComb,
            _ => return Err(Error::arg(format!("unknown adapter `{s}`"))),
        })
    }
}

/// A fitted channel map.
///
/// `weights` is `d_new x d` row-major for every kind except the variance
/// selector, which keeps `indices` instead. `means` is only set for PCA.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub kind: AdapterKind,
    pub d: usize,
    pub d_new: usize,
    pub weights: Vec<f32>,
    pub means: Vec<f32>,
    pub indices: Vec<usize>,
}

/// Default reduced channel count for `d` input channels.
pub fn default_d_new(kind: AdapterKind, d: usize) -> usize {
    match kind {
        AdapterKind::LComb => LCOMB_CHANNELS,
        _ => d.min(10),
    }
}

/// The `(n * t) x d` matrix of time-step vectors, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Design {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.data[r * self.cols + c]).collect()
    }

    /// Splits the rows back into series of `length` steps.
    pub fn to_series(&self, length: usize) -> Result<Vec<RawSeries>> {
        if length == 0 || !self.rows.is_multiple_of(length) {
            return Err(Error::shape("to_series", &[self.rows], &[length]));
        }
        (0..self.rows / length)
            .map(|i| {
                let mut values = vec![0.0f32; self.cols * length];
                for s in 0..length {
                    for (c, &v) in self.row(i * length + s).iter().enumerate() {
                        values[c * length + s] = v as f32;
                    }
                }
                RawSeries::new(self.cols, length, values, None)
            })
            .collect()
    }
}

/// Row `i * t + s` holds the channel values of sample `i` at step `s`.
pub fn reshape_for_fit(samples: &[RawSeries]) -> Result<Design> {
    let first = samples.first().ok_or_else(|| Error::input("no samples to fit on"))?;
    let (d, t) = (first.channels(), first.length());
    let mut data = Vec::with_capacity(samples.len() * t * d);
    for (i, s) in samples.iter().enumerate() {
        if s.channels() != d || s.length() != t {
            return Err(Error::input(format!(
                "sample {i} is {}x{}, expected {d}x{t}; resize first",
                s.channels(),
                s.length()
            )));
        }
        for step in 0..t {
            data.extend((0..d).map(|c| s.channel(c)[step] as f64));
        }
    }
    Ok(Design {
        rows: samples.len() * t,
        cols: d,
        data,
    })
}

fn check_d_new(d_new: usize, d: usize) -> Result<()> {
    if d_new == 0 || d_new > d {
        return Err(Error::arg(format!("d_new {d_new} must be in 1..={d}")));
    }
    Ok(())
}

fn column_means(design: &Design) -> Vec<f64> {
    let mut means = vec![0.0; design.cols];
    for r in 0..design.rows {
        for (m, v) in means.iter_mut().zip(design.row(r)) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= design.rows as f64);
    means
}

/// Top `d_new` right singular vectors of `design - means`, sign-normalised.
fn principal_rows(design: &Design, means: &[f64], d_new: usize) -> Vec<f64> {
    let d = design.cols;
    let mut gram = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for r in 0..design.rows {
        for ((c, v), m) in centered.iter_mut().zip(design.row(r)).zip(means) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                gram[i * d + j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            gram[i * d + j] = gram[j * d + i];
        }
    }
    let eig = symmetric_eigen(&gram, d);
    eig.vectors
        .into_iter()
        .take(d_new)
        .flat_map(|mut v| {
            normalize_sign(&mut v);
            v
        })
        .collect()
}

fn at_least_two_rows(design: &Design) -> Result<()> {
    if design.rows < 2 {
        return Err(Error::input("fitting needs at least 2 rows"));
    }
    Ok(())
}

pub fn fit_pca(design: &Design, d_new: usize) -> Result<Adapter> {
    check_d_new(d_new, design.cols)?;
    at_least_two_rows(design)?;
    let means = column_means(design);
    let w = principal_rows(design, &means, d_new);
    Ok(Adapter {
        kind: AdapterKind::Pca,
        d: design.cols,
        d_new,
        weights: w.iter().map(|&x| x as f32).collect(),
        means: means.iter().map(|&x| x as f32).collect(),
        indices: Vec::new(),
    })
}

/// Like [`fit_pca`] without centering.
pub fn fit_svd(design: &Design, d_new: usize) -> Result<Adapter> {
    check_d_new(d_new, design.cols)?;
    at_least_two_rows(design)?;
    let w = principal_rows(design, &vec![0.0; design.cols], d_new);
    Ok(Adapter {
        kind: AdapterKind::Svd,
        d: design.cols,
        d_new,
        weights: w.iter().map(|&x| x as f32).collect(),
        means: Vec::new(),
        indices: Vec::new(),
    })
}

fn gaussian_weights(d: usize, d_new: usize, std: f64, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..d * d_new).map(|_| normal.sample(&mut rng) as f32).collect()
}

/// Entries drawn from `N(0, 1/d_new)`.
pub fn fit_rand_proj(d: usize, d_new: usize, seed: u64) -> Result<Adapter> {
    check_d_new(d_new, d)?;
    Ok(Adapter {
        kind: AdapterKind::RandProj,
        d,
        d_new,
        weights: gaussian_weights(d, d_new, (1.0 / d_new as f64).sqrt(), seed),
        means: Vec::new(),
        indices: Vec::new(),
    })
}

/// Keeps the `d_new` columns of highest population variance, ordered by
/// descending variance with ties going to the lower index.
pub fn fit_var_selector(design: &Design, d_new: usize) -> Result<Adapter> {
    check_d_new(d_new, design.cols)?;
    let means = column_means(design);
    let mut var = vec![0.0; design.cols];
    for r in 0..design.rows {
        for ((v, x), m) in var.iter_mut().zip(design.row(r)).zip(&means) {
            *v += (x - m) * (x - m);
        }
    }
    let mut order: Vec<usize> = (0..design.cols).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    order.truncate(d_new);
    Ok(Adapter {
        kind: AdapterKind::VarSelector,
        d: design.cols,
        d_new,
        weights: Vec::new(),
        means: Vec::new(),
        indices: order,
    })
}

/// Initial learnable combiner with `N(0, 1/d)` entries.
pub fn init_lcomb(d: usize, seed: u64) -> Adapter {
    Adapter {
        kind: AdapterKind::LComb,
        d,
        d_new: LCOMB_CHANNELS,
        weights: gaussian_weights(d, LCOMB_CHANNELS, (1.0 / d as f64).sqrt(), seed),
        means: Vec::new(),
        indices: Vec::new(),
    }
}

/// Fits an adapter of `kind` with the default or requested width.
pub fn fit(kind: AdapterKind, samples: &[RawSeries], d_new: Option<usize>, seed: u64) -> Result<Adapter> {
    let d = samples
        .first()
        .ok_or_else(|| Error::input("no samples to fit on"))?
        .channels();
    let d_new = d_new.unwrap_or_else(|| default_d_new(kind, d));
    match kind {
        AdapterKind::Pca => fit_pca(&reshape_for_fit(samples)?, d_new),
        AdapterKind::Svd => fit_svd(&reshape_for_fit(samples)?, d_new),
        AdapterKind::VarSelector => fit_var_selector(&reshape_for_fit(samples)?, d_new),
        AdapterKind::RandProj => fit_rand_proj(d, d_new, seed),
        AdapterKind::LComb => {
            if d_new != LCOMB_CHANNELS {
                return Err(Error::arg(format!("lcomb width is fixed at {LCOMB_CHANNELS}")));
            }
            Ok(init_lcomb(d, seed))
        }
    }
}

impl Adapter {
    /// Maps a `d x t` series to `d_new x t`, leaving the time axis alone.
    pub fn apply(&self, series: &RawSeries) -> Result<RawSeries> {
        if series.channels() != self.d {
            return Err(Error::shape("adapter", &[series.channels()], &[self.d]));
        }
        let t = series.length();
        let values = match self.kind {
            AdapterKind::VarSelector => self
                .indices
                .iter()
                .flat_map(|&c| series.channel(c).iter().copied())
                .collect(),
            _ => {
                let mut out = vec![0.0f32; self.d_new * t];
                let mut col = vec![0.0f64; self.d];
                for s in 0..t {
                    for (c, x) in col.iter_mut().enumerate() {
                        let mean = self.means.get(c).copied().unwrap_or(0.0) as f64;
                        *x = series.channel(c)[s] as f64 - mean;
                    }
                    for k in 0..self.d_new {
                        let row = &self.weights[k * self.d..(k + 1) * self.d];
                        out[k * t + s] = row.iter().zip(&col).map(|(&w, &x)| w as f64 * x).sum::<f64>() as f32;
                    }
                }
                out
            }
        };
        RawSeries::new(self.d_new, t, values, series.label)
    }
}

/// Differentiable combiner: `w` is `[d_new, d]`, `x` is `[n, d, t]`, the
/// result `[n, d_new, t]`.
pub fn lcomb_forward<T: Element>(tape: &mut Tape<T>, w: Var, x: Var) -> Result<Var> {
    let xt = tape.transpose(x, 1, 2)?;
    let wt = tape.transpose(w, 0, 1)?;
    let y = tape.matmul(xt, wt)?;
    tape.transpose(y, 1, 2)
}
