//! How much label information survives one smoothing step along a noisy chain.
//!
//! `X0` is a random binary token sequence, `Y` the sign of its alternating
//! sum. Each chain step flips every symbol independently. At depth `d` the
//! one-hot field of `X(d)` and its smoothed version are both projected onto a
//! fixed Gaussian direction, and plug-in histogram estimates of the mutual
//! information with `Y` give `rho(d) = I(S(X(d)); Y) / I(X(d); Y)`.

use std::io::Write;

use pdelab_core::layer::forward as layer_forward;
use pdelab_core::stats::spearman;
use pdelab_core::{Field, LayerParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Depths whose raw information falls below this are dropped.
pub const MIN_INFORMATION: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct RetentionConfig {
    /// Chain depth `N`; depths `1..=N` are estimated.
    pub depth: usize,
    pub trials: usize,
    pub bins: usize,
    pub flip_prob: f64,
    /// Sequence length; odd so the alternating sum never ties.
    pub len: usize,
    pub seed: u64,
    pub projection_seed: u64,
}

impl Default for RetentionConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            trials: 5000,
            bins: 16,
            flip_prob: 0.1,
            len: 33,
            seed: 0,
            projection_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetentionEstimate {
    /// Depths kept, ascending.
    pub depths: Vec<usize>,
    pub rho: Vec<f64>,
    /// `I(X(d); Y)` in nats for the kept depths.
    pub info_raw: Vec<f64>,
    /// `I(S(X(d)); Y)` in nats for the kept depths.
    pub info_smoothed: Vec<f64>,
    /// Depths whose raw information was below [`MIN_INFORMATION`].
    pub dropped: Vec<usize>,
    pub trials: usize,
    /// Spearman correlation of depth against `rho`; `None` with fewer than two kept depths.
    pub spearman: Option<f64>,
}

impl RetentionEstimate {
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "depth,rho,info_raw,info_smoothed,trials")?;
        for i in 0..self.depths.len() {
            writeln!(
                out,
                "{},{:.12e},{:.12e},{:.12e},{}",
                self.depths[i], self.rho[i], self.info_raw[i], self.info_smoothed[i], self.trials
            )?;
        }
        Ok(())
    }
}

/// Plug-in mutual information (nats) between a scalar and a binary label,
/// using `bins` equal-width bins over the sample range.
pub fn histogram_mutual_information(values: &[f64], labels: &[bool], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::Retention(format!("{bins} bin(s) cannot carry any information")));
    }
    if values.len() != labels.len() || values.is_empty() {
        return Err(Error::Retention(
            "values and labels must be non-empty and equally long".into(),
        ));
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if hi <= lo {
        return Ok(0.0);
    }
    let width = (hi - lo) / bins as f64;
    let mut joint = vec![[0usize; 2]; bins];
    for (&v, &y) in values.iter().zip(labels) {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        joint[b][usize::from(y)] += 1;
    }
    let n = values.len() as f64;
    let ny = [
        labels.iter().filter(|&&y| !y).count() as f64,
        labels.iter().filter(|&&y| y).count() as f64,
    ];
    let mut mi = 0.0;
    for cell in &joint {
        let nb = (cell[0] + cell[1]) as f64;
        for y in 0..2 {
            let c = cell[y] as f64;
            if c > 0.0 {
                mi += c / n * (c * n / (nb * ny[y])).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

fn one_hot(tokens: &[bool]) -> Result<Field> {
    Ok(Field::from_fn(tokens.len(), 2, |i, c| {
        if usize::from(tokens[i]) == c {
            1.0
        } else {
            0.0
        }
    }))
}

fn alternating_label(tokens: &[bool]) -> bool {
    let s: i64 = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let v = if t { 1 } else { -1 };
            if i % 2 == 0 {
                v
            } else {
                -v
            }
        })
        .sum();
    s > 0
}

/// `smoothing` must have two channels (the one-hot alphabet).
pub fn estimate_retention(cfg: &RetentionConfig, smoothing: &LayerParams) -> Result<RetentionEstimate> {
    if cfg.depth < 2 {
        return Err(Error::Retention(format!("chain depth {} < 2", cfg.depth)));
    }
    if cfg.trials < 1000 {
        return Err(Error::Retention(format!("{} trials < 1000", cfg.trials)));
    }
    if cfg.bins < 2 {
        return Err(Error::Retention(format!(
            "{} bin(s) cannot carry any information",
            cfg.bins
        )));
    }
    if !(0.0..=1.0).contains(&cfg.flip_prob) {
        return Err(Error::Retention(format!(
            "flip probability {} outside [0, 1]",
            cfg.flip_prob
        )));
    }
    if cfg.len.is_multiple_of(2) {
        return Err(Error::Retention(format!("sequence length {} must be odd", cfg.len)));
    }
    if smoothing.channels() != 2 {
        return Err(Error::Retention(format!(
            "smoothing layer has {} channels, the one-hot field has 2",
            smoothing.channels()
        )));
    }
    let mut proj_rng = ChaCha8Rng::seed_from_u64(cfg.projection_seed);
    let direction: Vec<f64> = (0..cfg.len * 2).map(|_| StandardNormal.sample(&mut proj_rng)).collect();
    let project = |f: &Field| f.as_slice().iter().zip(&direction).map(|(a, b)| a * b).sum::<f64>();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut labels = Vec::with_capacity(cfg.trials);
    let mut raw = vec![Vec::with_capacity(cfg.trials); cfg.depth];
    let mut smooth = vec![Vec::with_capacity(cfg.trials); cfg.depth];
    for _ in 0..cfg.trials {
        let mut x: Vec<bool> = (0..cfg.len).map(|_| rng.random_bool(0.5)).collect();
        labels.push(alternating_label(&x));
        for d in 0..cfg.depth {
            for t in x.iter_mut() {
                if rng.random_bool(cfg.flip_prob) {
                    *t = !*t;
                }
            }
            let field = one_hot(&x)?;
            let (s, _) = layer_forward(&field, smoothing)?;
            raw[d].push(project(&field));
            smooth[d].push(project(&s));
        }
    }
    let mut est = RetentionEstimate {
        depths: Vec::new(),
        rho: Vec::new(),
        info_raw: Vec::new(),
        info_smoothed: Vec::new(),
        dropped: Vec::new(),
        trials: cfg.trials,
        spearman: None,
    };
    for d in 0..cfg.depth {
        let ix = histogram_mutual_information(&raw[d], &labels, cfg.bins)?;
        if ix < MIN_INFORMATION {
            est.dropped.push(d + 1);
            continue;
        }
        let is = histogram_mutual_information(&smooth[d], &labels, cfg.bins)?;
        est.depths.push(d + 1);
        est.rho.push(is / ix);
        est.info_raw.push(ix);
        est.info_smoothed.push(is);
    }
    if est.depths.len() >= 2 {
        let depths: Vec<f64> = est.depths.iter().map(|&d| d as f64).collect();
        est.spearman = Some(spearman(&depths, &est.rho));
    }
    Ok(est)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetentionTrend {
    /// One correlation per repetition; `None` where fewer than two depths survived.
    pub correlations: Vec<Option<f64>>,
}

impl RetentionTrend {
    /// Share of repetitions with a defined, non-positive correlation.
    pub fn non_increasing_fraction(&self) -> f64 {
        let hits = self.correlations.iter().filter(|c| c.is_some_and(|r| r <= 0.0)).count();
        hits as f64 / self.correlations.len().max(1) as f64
    }
}

/// Repeats the estimate with data seeds `cfg.seed + r`; the projection stays fixed.
pub fn retention_trend(cfg: &RetentionConfig, smoothing: &LayerParams, repetitions: usize) -> Result<RetentionTrend> {
    let correlations = (0..repetitions as u64)
        .map(|r| {
            let c = RetentionConfig {
                seed: cfg.seed.wrapping_add(r),
                ..cfg.clone()
            };
            estimate_retention(&c, smoothing).map(|e| e.spearman)
        })
        .collect::<Result<_>>()?;
    Ok(RetentionTrend { correlations })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer() -> LayerParams {
        LayerParams::new(2).unwrap()
    }

    #[test]
    fn degenerate_inputs() {
        assert!(histogram_mutual_information(&[0.0, 1.0], &[false, true], 1).is_err());
        let cfg = RetentionConfig {
            bins: 1,
            trials: 1000,
            ..RetentionConfig::default()
        };
        assert!(estimate_retention(&cfg, &layer()).is_err());
        let cfg = RetentionConfig {
            trials: 999,
            ..RetentionConfig::default()
        };
        assert!(estimate_retention(&cfg, &layer()).is_err());
        let cfg = RetentionConfig {
            depth: 1,
            ..RetentionConfig::default()
        };
        assert!(estimate_retention(&cfg, &layer()).is_err());
        assert!(estimate_retention(&RetentionConfig::default(), &LayerParams::new(3).unwrap()).is_err());
    }

    #[test]
    fn perfectly_separated_label_carries_ln2() {
        let v = [0.0, 0.1, 0.9, 1.0];
        let y = [false, false, true, true];
        assert!((histogram_mutual_information(&v, &y, 2).unwrap() - 2f64.ln()).abs() < 1e-15);
        let y = [false, true, false, true];
        assert!(histogram_mutual_information(&v, &y, 2).unwrap().abs() < 1e-15);
    }

    #[test]
    fn label_has_no_ties() {
        assert!(alternating_label(&[true, false, true]));
        assert!(!alternating_label(&[false, true, false]));
    }
}
