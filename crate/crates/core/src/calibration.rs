//! Expected calibration error, reliability bins, and post-hoc correctors.

use crate::error::{Error, Result};

/// Bin count used throughout unless overridden.
pub const DEFAULT_BINS: usize = 10;

/// Class probabilities `n x k` with true labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMatrix {
    k: usize,
    probs: Vec<f64>,
    labels: Vec<usize>,
}

/// Index of the largest entry, ties going to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax of one row.
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl ProbabilityMatrix {
    pub fn new(k: usize, probs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if k == 0 || probs.len() != labels.len() * k {
            return Err(Error::shape("probability matrix", &[labels.len(), k], &[probs.len()]));
        }
        for (i, row) in probs.chunks(k).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|p| !(0.0..=1.0 + 1e-9).contains(p)) {
                return Err(Error::input(format!("row {i} is not a probability vector (sum {sum})")));
            }
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::input(format!("label {y} out of range for {k} classes")));
        }
        Ok(Self { k, probs, labels })
    }

    pub fn from_logits(k: usize, logits: &[f64], labels: Vec<usize>) -> Result<Self> {
        if k == 0 || logits.len() != labels.len() * k {
            return Err(Error::shape("logits", &[labels.len(), k], &[logits.len()]));
        }
        let probs = logits.chunks(k).flat_map(softmax_row).collect();
        Self::new(k, probs, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.k..(i + 1) * self.k]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.probs
            .chunks(self.k)
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.probs.chunks(self.k).map(argmax).collect()
    }

    pub fn accuracy(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let hits = self
            .predictions()
            .iter()
            .zip(&self.labels)
            .filter(|(p, y)| p == y)
            .count();
        hits as f64 / self.len() as f64
    }

    /// Mean negative log-likelihood of the true labels.
    pub fn nll(&self) -> f64 {
        let total: f64 = (0..self.len())
            .map(|i| -self.row(i)[self.labels[i]].max(1e-300).ln())
            .sum();
        total / self.len().max(1) as f64
    }
}

/// Bin `j` of `m` covering `(j/m, (j+1)/m]`; zero falls in bin 0.
pub fn bin_index(conf: f64, m: usize) -> usize {
    let edge = |j: usize| j as f64 / m as f64;
    if conf <= 0.0 {
        return 0;
    }
    let mut j = ((conf * m as f64).ceil() as usize).clamp(1, m) - 1;
    while j > 0 && conf <= edge(j) {
        j -= 1;
    }
    while j + 1 < m && conf > edge(j + 1) {
        j += 1;
    }
    j
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinStats {
    pub count: Vec<usize>,
    pub correct: Vec<f64>,
    pub confidence: Vec<f64>,
}

impl BinStats {
    pub fn bins(&self) -> usize {
        self.count.len()
    }

    pub fn mean_accuracy(&self, j: usize) -> f64 {
        if self.count[j] == 0 {
            0.0
        } else {
            self.correct[j] / self.count[j] as f64
        }
    }

    pub fn mean_confidence(&self, j: usize) -> f64 {
        if self.count[j] == 0 {
            0.0
        } else {
            self.confidence[j] / self.count[j] as f64
        }
    }

    /// Tab-separated table with one row per bin.
    pub fn to_tsv(&self) -> String {
        let m = self.bins();
        let mut out = String::from("bin\tlower\tupper\tcount\taccuracy\tconfidence\n");
        for j in 0..m {
            out.push_str(&format!(
                "{j}\t{:.2}\t{:.2}\t{}\t{:.6}\t{:.6}\n",
                j as f64 / m as f64,
                (j + 1) as f64 / m as f64,
                self.count[j],
                self.mean_accuracy(j),
                self.mean_confidence(j)
            ));
        }
        out
    }
}

pub fn reliability_bins(pm: &ProbabilityMatrix, m: usize) -> BinStats {
    let mut stats = BinStats {
        count: vec![0; m],
        correct: vec![0.0; m],
        confidence: vec![0.0; m],
    };
    for ((conf, pred), &y) in pm.confidences().into_iter().zip(pm.predictions()).zip(&pm.labels) {
        let j = bin_index(conf, m);
        stats.count[j] += 1;
        stats.correct[j] += if pred == y { 1.0 } else { 0.0 };
        stats.confidence[j] += conf;
    }
    stats
}

/// `(1/n) * sum_j |sum_{i in B_j} (1{correct_i} - conf_i)|`.
pub fn ece(pm: &ProbabilityMatrix, m: usize) -> f64 {
    if pm.is_empty() {
        return 0.0;
    }
    let mut gap = vec![0.0; m];
    for ((conf, pred), &y) in pm.confidences().into_iter().zip(pm.predictions()).zip(&pm.labels) {
        let hit = if pred == y { 1.0 } else { 0.0 };
        gap[bin_index(conf, m)] += hit - conf;
    }
    gap.iter().map(|g| g.abs()).sum::<f64>() / pm.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureCorrector {
    pub temperature: f64,
}

/// Mean cross-entropy of `softmax(logits / t)`.
pub fn temperature_nll(logits: &[f64], k: usize, labels: &[usize], t: f64) -> f64 {
    let total: f64 = logits
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| {
            let scaled: Vec<f64> = row.iter().map(|z| z / t).collect();
            let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + scaled.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            lse - scaled[y]
        })
        .sum();
    total / labels.len().max(1) as f64
}

/// Golden-section search on `ln T` over `[ln 0.05, ln 20]`.
pub fn fit_temperature(logits: &[f64], k: usize, labels: &[usize]) -> Result<TemperatureCorrector> {
    if labels.is_empty() || logits.len() != labels.len() * k {
        return Err(Error::shape("fit_temperature", &[labels.len(), k], &[logits.len()]));
    }
    let f = |u: f64| temperature_nll(logits, k, labels, u.exp());
    let (lo_end, hi_end) = (0.05f64.ln(), 20.0f64.ln());
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo_end, hi_end);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-4 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    let mut best = 0.5 * (a + b);
    let mut best_nll = f(best);
    let near_edge = best - lo_end < 1e-3 || hi_end - best < 1e-3;
    if near_edge {
        for i in 0..200 {
            let u = lo_end + (hi_end - lo_end) * i as f64 / 199.0;
            let v = f(u);
            if v < best_nll {
                best = u;
                best_nll = v;
            }
        }
    }
    if f(0.0) <= best_nll {
        best = 0.0;
    }
    Ok(TemperatureCorrector {
        temperature: best.exp(),
    })
}

pub fn apply_temperature(
    corrector: &TemperatureCorrector,
    logits: &[f64],
    k: usize,
    labels: Vec<usize>,
) -> Result<ProbabilityMatrix> {
    let scaled: Vec<f64> = logits.iter().map(|z| z / corrector.temperature).collect();
    ProbabilityMatrix::from_logits(k, &scaled, labels)
}

/// Non-decreasing step function fitted by pool-adjacent-violators.
#[derive(Clone, Debug, PartialEq)]
pub struct IsotonicMap {
    /// Smallest input of each pooled block, increasing.
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

impl IsotonicMap {
    pub fn identity() -> Self {
        Self {
            thresholds: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.thresholds.is_empty()
    }

    /// Value of the last block starting at or below `x` (the first block
    /// for inputs below every threshold).
    pub fn eval(&self, x: f64) -> f64 {
        if self.is_identity() {
            return x;
        }
        let idx = self.thresholds.partition_point(|&t| t <= x);
        self.values[idx.saturating_sub(1)]
    }
}

/// Least-squares non-decreasing fit of `y` on `x`.
pub fn pav(x: &[f64], y: &[f64]) -> IsotonicMap {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    // tie groups of (start x, sum y, weight)
    let mut groups: Vec<(f64, f64, f64)> = Vec::new();
    for &i in &order {
        match groups.last_mut() {
            Some(last) if last.0 == x[i] => {
                last.1 += y[i];
                last.2 += 1.0;
            }
            _ => groups.push((x[i], y[i], 1.0)),
        }
    }
    let mut blocks: Vec<(f64, f64, f64)> = Vec::with_capacity(groups.len());
    for g in groups {
        blocks.push(g);
        while blocks.len() >= 2 {
            let n = blocks.len();
            let (_, s1, w1) = blocks[n - 2];
            let (_, s2, w2) = blocks[n - 1];
            if s1 / w1 <= s2 / w2 {
                break;
            }
            blocks.pop();
            let last = blocks.last_mut().expect("two blocks");
            last.1 = s1 + s2;
            last.2 = w1 + w2;
        }
    }
    IsotonicMap {
        thresholds: blocks.iter().map(|b| b.0).collect(),
        values: blocks.iter().map(|b| b.1 / b.2).collect(),
    }
}

/// One-vs-rest isotonic maps with row renormalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct IsotonicCorrector {
    pub maps: Vec<IsotonicMap>,
}

pub fn fit_isotonic_multiclass(pm: &ProbabilityMatrix) -> Result<IsotonicCorrector> {
    if pm.len() < 2 {
        return Err(Error::input("isotonic calibration needs at least 2 samples"));
    }
    let k = pm.num_classes();
    let maps = (0..k)
        .map(|c| {
            let members = pm.labels.iter().filter(|&&y| y == c).count();
            if members <= 1 {
                return IsotonicMap::identity();
            }
            let x: Vec<f64> = (0..pm.len()).map(|i| pm.row(i)[c]).collect();
            let y: Vec<f64> = pm.labels.iter().map(|&l| if l == c { 1.0 } else { 0.0 }).collect();
            pav(&x, &y)
        })
        .collect();
    Ok(IsotonicCorrector { maps })
}

impl IsotonicCorrector {
    pub fn apply(&self, pm: &ProbabilityMatrix) -> Result<ProbabilityMatrix> {
        let k = pm.num_classes();
        if k != self.maps.len() {
            return Err(Error::shape("isotonic", &[k], &[self.maps.len()]));
        }
        let mut probs = Vec::with_capacity(pm.probs.len());
        for i in 0..pm.len() {
            let row: Vec<f64> = pm
                .row(i)
                .iter()
                .zip(&self.maps)
                .map(|(&p, m)| m.eval(p).clamp(1e-6, 1.0))
                .collect();
            let sum: f64 = row.iter().sum();
            probs.extend(row.into_iter().map(|p| p / sum));
        }
        ProbabilityMatrix::new(k, probs, pm.labels.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm(k: usize, probs: &[f64], labels: &[usize]) -> ProbabilityMatrix {
        ProbabilityMatrix::new(k, probs.to_vec(), labels.to_vec()).unwrap()
    }

    #[test]
    fn perfect_confident_predictions_have_zero_ece() {
        let p = pm(2, &[1.0, 0.0, 0.0, 1.0], &[0, 1]);
        assert_eq!(ece(&p, 10), 0.0);
    }

    #[test]
    fn half_right_at_full_confidence() {
        let p = pm(2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0], &[0, 1, 1, 0]);
        assert!((ece(&p, 10) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bin_edges_are_right_closed() {
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.1, 10), 0);
        assert_eq!(bin_index(0.3, 10), 2);
        assert_eq!(bin_index(0.30000001, 10), 3);
        assert_eq!(bin_index(0.95, 10), 9);
        assert_eq!(bin_index(1.0, 10), 9);
    }

    #[test]
    fn single_sample_placement() {
        let p = pm(2, &[0.95, 0.05], &[0]);
        let b = reliability_bins(&p, 10);
        assert_eq!(b.count[9], 1);
        assert_eq!(b.mean_accuracy(9), 1.0);
        assert!((b.mean_confidence(9) - 0.95).abs() < 1e-12);
        assert_eq!(b.count.iter().sum::<usize>(), 1);
    }

    #[test]
    fn empty_matrix_has_empty_bins() {
        let p = pm(3, &[], &[]);
        let b = reliability_bins(&p, 10);
        assert!(b.count.iter().all(|&c| c == 0));
        assert_eq!(ece(&p, 10), 0.0);
    }

    #[test]
    fn rejects_off_simplex_rows() {
        assert!(ProbabilityMatrix::new(2, vec![0.7, 0.7], vec![0]).is_err());
        assert!(ProbabilityMatrix::new(2, vec![0.5, 0.5], vec![2]).is_err());
    }

    #[test]
    fn pav_pools_one_violator() {
        let m = pav(&[0.2, 0.8], &[1.0, 0.0]);
        assert_eq!(m.eval(0.2), 0.5);
        assert_eq!(m.eval(0.8), 0.5);
    }

    #[test]
    fn pav_keeps_isotonic_data() {
        let x = [0.1, 0.4, 0.6, 0.9];
        let m = pav(&x, &x);
        for &v in &x {
            assert!((m.eval(v) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_one_is_identity() {
        let logits = [1.0, 2.0, 0.5, -1.0, 0.0, 3.0];
        let a = apply_temperature(&TemperatureCorrector { temperature: 1.0 }, &logits, 3, vec![1, 2]).unwrap();
        let b = ProbabilityMatrix::from_logits(3, &logits, vec![1, 2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn high_temperature_flattens() {
        let logits = [1.0, 2.0, 0.5];
        let p = apply_temperature(&TemperatureCorrector { temperature: 1e6 }, &logits, 3, vec![0]).unwrap();
        assert!((p.confidences()[0] - 1.0 / 3.0).abs() < 1e-5);
    }

    #[test]
    fn argmax_ties_take_lowest() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }
}
