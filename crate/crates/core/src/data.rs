//! Labeled datasets: tab-separated text files and synthetic generators.
//!
//! A univariate row is `label<TAB>v1<TAB>...<TAB>vt`. In the multivariate
//! long form every cell after the label is a colon-joined tuple of the `d`
//! channel values at that time step.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::preprocessing::{resize_channel, RawSeries};

/// Equal-shape labeled series with the original label text of each class.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<RawSeries>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Vec<RawSeries>, class_names: Vec<String>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::input("dataset is empty"))?;
        let (d, t) = (first.channels(), first.length());
        for (i, s) in samples.iter().enumerate() {
            if s.channels() != d || s.length() != t {
                return Err(Error::input(format!("sample {i} shape differs from sample 0")));
            }
            match s.label {
                Some(y) if y < class_names.len() => {}
                Some(y) => return Err(Error::input(format!("sample {i} has unknown label {y}"))),
                None => return Err(Error::input(format!("sample {i} is unlabeled"))),
            }
        }
        Ok(Self { samples, class_names })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.samples[0].channels()
    }

    pub fn length(&self) -> usize {
        self.samples[0].length()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label.expect("labeled")).collect()
    }

    /// Every channel of every sample resized to `length`, sample-major then
    /// channel-major, as one flat buffer.
    pub fn model_channels(&self, length: usize) -> Vec<f32> {
        self.samples
            .iter()
            .flat_map(|s| (0..s.channels()).flat_map(move |c| resize_channel(s.channel(c), length)))
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Re-expresses labels against another class list, matching by name.
    pub fn relabel(&self, class_names: &[String]) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let name = &self.class_names[s.label.expect("labeled")];
                let y = class_names
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| Error::input(format!("label `{name}` was not seen in training")))?;
                let mut s = s.clone();
                s.label = Some(y);
                Ok(s)
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            samples,
            class_names: class_names.to_vec(),
        })
    }
}

/// Orders labels numerically when all of them parse as numbers.
fn sorted_labels(labels: &BTreeSet<&str>) -> Vec<String> {
    let mut out: Vec<&str> = labels.iter().copied().collect();
    let numeric: Option<Vec<f64>> = out.iter().map(|l| l.parse::<f64>().ok()).collect();
    if let Some(values) = numeric {
        let mut paired: Vec<(f64, &str)> = values.into_iter().zip(out).collect();
        paired.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
        out = paired.into_iter().map(|p| p.1).collect();
    }
    out.into_iter().map(String::from).collect()
}

fn parse_value(cell: &str, line: usize) -> Result<f32> {
    let v = f32::from_str(cell.trim()).map_err(|_| Error::Parse {
        line,
        msg: format!("`{cell}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("`{cell}` is not finite"),
        });
    }
    Ok(v)
}

/// Parses the text of a dataset file.
pub fn parse_tsv(text: &str) -> Result<Dataset> {
    let mut rows: Vec<(usize, &str, Vec<f32>, usize, usize)> = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut cells = line.split('\t');
        let label = cells.next().unwrap_or("").trim();
        if label.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "missing label".into(),
            });
        }
        let steps: Vec<&str> = cells.collect();
        let t = steps.len();
        let d = steps.first().map_or(1, |c| c.split(':').count());
        // time-major per step, transposed to channel-major below
        let mut values = Vec::with_capacity(t * d);
        for step in &steps {
            let parts: Vec<&str> = step.split(':').collect();
            if parts.len() != d {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected {d} channel values per step, found {}", parts.len()),
                });
            }
            for p in parts {
                values.push(parse_value(p, line_no)?);
            }
        }
        match shape {
            None => shape = Some((d, t)),
            Some(s) if s != (d, t) => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!(
                        "row has {t} steps of {d} channels, previous rows have {} of {}",
                        s.1, s.0
                    ),
                })
            }
            _ => {}
        }
        if t < 2 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("series length {t} is below 2"),
            });
        }
        rows.push((line_no, label, values, d, t));
    }
    if rows.is_empty() {
        return Err(Error::input("dataset file has no rows"));
    }
    let names = sorted_labels(&rows.iter().map(|r| r.1).collect());
    let samples = rows
        .into_iter()
        .map(|(line_no, label, values, d, t)| {
            let y = names.iter().position(|n| n == label).expect("collected");
            let mut cm = vec![0.0; d * t];
            for s in 0..t {
                for c in 0..d {
                    cm[c * t + s] = values[s * d + c];
                }
            }
            RawSeries::new(d, t, cm, Some(y)).map_err(|e| Error::Parse {
                line: line_no,
                msg: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, names)
}

pub fn load_tsv(path: &Path) -> Result<Dataset> {
    parse_tsv(&fs::read_to_string(path)?)
}

/// Joins one univariate file per channel into a multichannel dataset.
pub fn load_tsv_channels(paths: &[&Path]) -> Result<Dataset> {
    let parts = paths.iter().map(|p| load_tsv(p)).collect::<Result<Vec<_>>>()?;
    let first = parts.first().ok_or_else(|| Error::input("no channel files"))?;
    for (c, p) in parts.iter().enumerate() {
        if p.len() != first.len() || p.labels() != first.labels() || p.channels() != 1 {
            return Err(Error::input(format!(
                "channel file {c} does not line up with channel file 0"
            )));
        }
    }
    let t = first.length();
    let samples = (0..first.len())
        .map(|i| {
            let values = parts.iter().flat_map(|p| p.samples[i].values().to_vec()).collect();
            RawSeries::new(parts.len(), t, values, first.samples[i].label)
        })
        .collect::<Result<_>>()?;
    Dataset::new(samples, first.class_names.clone())
}

/// Renders a dataset; univariate data uses plain cells, multichannel data
/// the colon-joined long form.
pub fn format_tsv(data: &Dataset) -> String {
    let mut out = String::new();
    for s in &data.samples {
        out.push_str(&data.class_names[s.label.expect("labeled")]);
        for step in 0..s.length() {
            out.push('\t');
            for c in 0..s.channels() {
                if c > 0 {
                    out.push(':');
                }
                write!(out, "{}", s.channel(c)[step]).expect("string write");
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_tsv(path: &Path, data: &Dataset) -> Result<()> {
    fs::write(path, format_tsv(data))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// A Gaussian bump early in the series versus one late in the series.
    TwoCluster,
    /// Noisy sine waves versus noisy square waves.
    SineVsSquare,
    /// Two informative channels padded with low-variance noise channels.
    MultichannelRedundant,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "two_cluster" => SyntheticKind::TwoCluster,
            "sine_vs_square" => SyntheticKind::SineVsSquare,
            "multichannel_redundant" => SyntheticKind::MultichannelRedundant,
            _ => return Err(Error::arg(format!("unknown synthetic dataset `{s}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n: usize,
    pub length: usize,
    pub channels: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, n: usize, length: usize, channels: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            length,
            channels,
            noise: 0.1,
            seed,
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }
}

fn bump(t: usize, center: f64, width: f64, amp: f64) -> impl Iterator<Item = f64> {
    (0..t).map(move |s| amp * (-0.5 * ((s as f64 - center) / width).powi(2)).exp())
}

fn periodic(t: usize, class: usize, cycles: f64, phase: f64) -> impl Iterator<Item = f64> {
    (0..t).map(move |s| {
        let v = (2.0 * std::f64::consts::PI * cycles * s as f64 / t as f64 + phase).sin();
        if class == 0 {
            v
        } else if v >= 0.0 {
            1.0
        } else {
            -1.0
        }
    })
}

/// Balanced two-class dataset, labels alternating `0, 1, 0, ...`.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n < 4 {
        return Err(Error::arg(format!("synthetic datasets need n >= 4, got {}", spec.n)));
    }
    if spec.length < 8 || spec.channels == 0 {
        return Err(Error::arg("synthetic series need length >= 8 and at least one channel"));
    }
    if spec.kind == SyntheticKind::MultichannelRedundant && spec.channels < 2 {
        return Err(Error::arg("multichannel_redundant needs at least 2 channels"));
    }
    let t = spec.length;
    let tf = t as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let class = i % 2;
        let mut values = Vec::with_capacity(spec.channels * t);
        for c in 0..spec.channels {
            let clean: Vec<f64> = match (spec.kind, c) {
                (SyntheticKind::TwoCluster, _) | (SyntheticKind::MultichannelRedundant, 0) => {
                    let base = if class == 0 { 0.3 } else { 0.7 };
                    let center = (base + rng.random_range(-0.05..0.05)) * tf;
                    let amp = 1.0 + rng.random_range(-0.2..0.2);
                    bump(t, center, tf / 16.0, amp).collect()
                }
                (SyntheticKind::SineVsSquare, _) | (SyntheticKind::MultichannelRedundant, 1) => {
                    let cycles = rng.random_range(2.0..4.0);
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    periodic(t, class, cycles, phase).collect()
                }
                (SyntheticKind::MultichannelRedundant, _) => vec![0.0; t],
            };
            let noise = match (spec.kind, c) {
                (SyntheticKind::MultichannelRedundant, c) if c >= 2 => 0.05,
                _ => spec.noise,
            };
            values.extend(clean.into_iter().map(|v| {
                let e: f64 = StandardNormal.sample(&mut rng);
                (v + noise * e) as f32
            }));
        }
        samples.push(RawSeries::new(spec.channels, t, values, Some(class))?);
    }
    Dataset::new(samples, vec!["0".into(), "1".into()])
}
