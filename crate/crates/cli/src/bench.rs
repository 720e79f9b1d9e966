//! Wall-clock scaling of the diffusion layer against a naive quadratic attention.

use std::hint::black_box;
use std::io::Write;
use std::time::{Duration, Instant};

use pdelab_core::layer::apply_into;
use pdelab_core::stats::{linear_fit, median, quantile, LineFit};
use pdelab_core::{Field, LayerParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, Result};
use crate::fmt_num;

/// Timing samples shorter than this many timer ticks are rejected.
pub const MIN_TICKS: u32 = 50;
/// IQR / median above this triggers a warning.
pub const NOISE_WARNING: f64 = 0.2;
const MAX_INNER: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub attention_lengths: Vec<usize>,
    pub d: usize,
    /// Scales are `1, 2, ..., 2^(k-1)`.
    pub k: usize,
    pub k_length: usize,
    pub reps: usize,
    pub min_sample: Duration,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![256, 512, 1024, 2048, 4096, 8192],
            attention_lengths: vec![256, 512, 1024, 2048, 4096],
            d: 64,
            k: 3,
            k_length: 4096,
            reps: 7,
            min_sample: Duration::from_millis(10),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Assertion(msg));
        if self.reps < 7 {
            return bad(format!("reps {} < 7", self.reps));
        }
        for (name, grid) in [
            ("lengths", &self.lengths),
            ("attention_lengths", &self.attention_lengths),
        ] {
            let mut distinct = grid.clone();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() < 5 {
                return bad(format!("{name} needs at least 5 distinct values"));
            }
            if distinct[distinct.len() - 1] < 16 * distinct[0] {
                return bad(format!("{name} must span at least a 16x range"));
            }
        }
        let top = 1usize << (2 * self.k).saturating_sub(1);
        let shortest = self.lengths.iter().chain([&self.k_length]).min().copied().unwrap_or(0);
        if self.k == 0 || self.d == 0 || top >= shortest {
            return bad(format!("K = {} needs scales up to {top} below every length", self.k));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub len: usize,
    /// Median seconds per call.
    pub median: f64,
    /// Interquartile range over median.
    pub spread: f64,
    /// Calls per timed sample.
    pub inner: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityReport {
    pub diffusion: Vec<Timing>,
    pub attention: Vec<Timing>,
    pub diffusion_fit: LineFit<f64>,
    pub attention_fit: LineFit<f64>,
    /// Time at `2K` scales over time at `K` scales.
    pub k_ratio: f64,
    pub k_timings: (Timing, Timing),
    /// Base number of scales.
    pub k: usize,
    pub warnings: Vec<String>,
}

impl ComplexityReport {
    /// Named pass/fail checks of the scaling windows.
    pub fn checks(&self) -> Vec<(String, bool)> {
        let d = &self.diffusion_fit;
        let a = &self.attention_fit;
        vec![
            (
                format!("diffusion slope {:.3} in [0.85, 1.15]", d.slope),
                (0.85..=1.15).contains(&d.slope),
            ),
            (format!("diffusion R^2 {:.4} >= 0.98", d.r_squared), d.r_squared >= 0.98),
            (
                format!("attention slope {:.3} in [1.7, 2.3]", a.slope),
                (1.7..=2.3).contains(&a.slope),
            ),
            (format!("attention R^2 {:.4} >= 0.98", a.r_squared), a.r_squared >= 0.98),
            (
                format!("K-doubling ratio {:.3} in [1.6, 2.4]", self.k_ratio),
                (1.6..=2.4).contains(&self.k_ratio),
            ),
        ]
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "kind,L,K,median_sec,iqr_over_median,inner")?;
        let mut row = |kind: &str, k: usize, t: &Timing| {
            writeln!(
                out,
                "{kind},{},{k},{},{},{}",
                t.len,
                fmt_num(t.median),
                fmt_num(t.spread),
                t.inner
            )
        };
        for t in &self.diffusion {
            row("diffusion", self.k, t)?;
        }
        for t in &self.attention {
            row("attention", 0, t)?;
        }
        row("diffusion", self.k, &self.k_timings.0)?;
        row("diffusion", 2 * self.k, &self.k_timings.1)?;
        Ok(())
    }
}

/// Smallest nonzero step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Median time per call of `f`, batching calls so every sample lasts at
/// least `min_sample` and [`MIN_TICKS`] timer ticks.
pub fn time_median(
    len: usize,
    reps: usize,
    min_sample: Duration,
    tick: Duration,
    mut f: impl FnMut(),
) -> Result<Timing> {
    let floor = min_sample.max(tick * MIN_TICKS);
    f();
    let mut inner = 1;
    loop {
        let start = Instant::now();
        for _ in 0..inner {
            f();
        }
        if start.elapsed() >= floor {
            break;
        }
        inner *= 2;
        if inner > MAX_INNER {
            return Err(CliError::TimerResolution(format!(
                "{MAX_INNER} calls at L = {len} still under {floor:?}"
            )));
        }
    }
    let samples: Vec<f64> = (0..reps)
        .map(|_| {
            let start = Instant::now();
            for _ in 0..inner {
                f();
            }
            start.elapsed().as_secs_f64() / inner as f64
        })
        .collect();
    let m = median(&samples);
    if m * (inner as f64) < (tick * MIN_TICKS).as_secs_f64() {
        return Err(CliError::TimerResolution(format!(
            "median below {MIN_TICKS} ticks at L = {len}"
        )));
    }
    Ok(Timing {
        len,
        median: m,
        spread: (quantile(&samples, 0.75) - quantile(&samples, 0.25)) / m,
        inner,
    })
}

/// Single-head softmax attention over `len x d` row-major buffers, by direct loops.
pub fn naive_attention(q: &[f64], k: &[f64], v: &[f64], len: usize, d: usize, out: &mut [f64]) {
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = vec![0.0; len];
    for i in 0..len {
        let qi = &q[i * d..(i + 1) * d];
        let mut top = f64::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &k[j * d..(j + 1) * d];
            *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            top = top.max(*s);
        }
        let mut z = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - top).exp();
            z += *s;
        }
        let oi = &mut out[i * d..(i + 1) * d];
        oi.fill(0.0);
        for (j, &s) in scores.iter().enumerate() {
            let w = s / z;
            for (o, &vv) in oi.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *o += w * vv;
            }
        }
    }
}

fn layer_with(k: usize, d: usize) -> Result<LayerParams> {
    let scales: Vec<usize> = (0..k).map(|i| 1 << i).collect();
    let weights = vec![1.0 / k as f64; k];
    Ok(LayerParams::with_scales(d, scales, weights)?)
}

fn time_diffusion(
    len: usize,
    params: &LayerParams,
    cfg: &BenchConfig,
    tick: Duration,
    rng: &mut ChaCha8Rng,
) -> Result<Timing> {
    let x = Field::from_fn(len, cfg.d, |_, _| rng.random_range(-1.0..1.0));
    let mut out = Field::zeros(len, cfg.d);
    let mut failure = None;
    let t = time_median(len, cfg.reps, cfg.min_sample, tick, || {
        if let Err(e) = apply_into(black_box(&x), params, &mut out) {
            failure = Some(e);
        }
        black_box(&out);
    })?;
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(t),
    }
}

/// Runs single-threaded on the calling thread.
pub fn bench_complexity(cfg: &BenchConfig) -> Result<ComplexityReport> {
    cfg.validate()?;
    let tick = timer_resolution();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let base = layer_with(cfg.k, cfg.d)?;
    let doubled = layer_with(2 * cfg.k, cfg.d)?;
    let mut warnings = Vec::new();
    let mut note = |kind: &str, t: &Timing| {
        if t.spread > NOISE_WARNING {
            warnings.push(format!(
                "{kind} at L = {}: IQR/median {:.2} exceeds {NOISE_WARNING}",
                t.len, t.spread
            ));
        }
    };

    let mut diffusion = Vec::with_capacity(cfg.lengths.len());
    for &len in &cfg.lengths {
        let t = time_diffusion(len, &base, cfg, tick, &mut rng)?;
        note("diffusion", &t);
        diffusion.push(t);
    }
    let mut attention = Vec::with_capacity(cfg.attention_lengths.len());
    for &len in &cfg.attention_lengths {
        let mut buf = || {
            (0..len * cfg.d)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        };
        let (q, k, v) = (buf(), buf(), buf());
        let mut out = vec![0.0; len * cfg.d];
        let t = time_median(len, cfg.reps, cfg.min_sample, tick, || {
            naive_attention(black_box(&q), black_box(&k), black_box(&v), len, cfg.d, &mut out);
            black_box(&out);
        })?;
        note("attention", &t);
        attention.push(t);
    }
    let k_base = time_diffusion(cfg.k_length, &base, cfg, tick, &mut rng)?;
    let k_doubled = time_diffusion(cfg.k_length, &doubled, cfg, tick, &mut rng)?;
    note("diffusion K", &k_base);
    note("diffusion 2K", &k_doubled);

    let fit = |ts: &[Timing]| -> Result<LineFit<f64>> {
        let x: Vec<f64> = ts.iter().map(|t| (t.len as f64).ln()).collect();
        let y: Vec<f64> = ts.iter().map(|t| t.median.ln()).collect();
        Ok(linear_fit(&x, &y)?)
    };
    Ok(ComplexityReport {
        diffusion_fit: fit(&diffusion)?,
        attention_fit: fit(&attention)?,
        diffusion,
        attention,
        k_ratio: k_doubled.median / k_base.median,
        k_timings: (k_base, k_doubled),
        k: cfg.k,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naive_attention_averages_values() {
        // identical keys give uniform weights, so every output row is the mean value row
        let (len, d) = (4, 2);
        let q: Vec<f64> = (0..len * d).map(|i| i as f64).collect();
        let k = vec![0.5; len * d];
        let v: Vec<f64> = (0..len * d).map(|i| (i % d) as f64 + (i / d) as f64).collect();
        let mut out = vec![0.0; len * d];
        naive_attention(&q, &k, &v, len, d, &mut out);
        for i in 0..len {
            assert!((out[i * d] - 1.5).abs() < 1e-12);
            assert!((out[i * d + 1] - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn config_windows() {
        assert!(BenchConfig::default().validate().is_ok());
        let short = BenchConfig {
            lengths: vec![256, 512, 1024, 2048, 2560],
            ..BenchConfig::default()
        };
        assert!(short.validate().is_err());
        let few = BenchConfig {
            reps: 5,
            ..BenchConfig::default()
        };
        assert!(few.validate().is_err());
    }

    #[test]
    fn timing_is_positive() {
        let tick = timer_resolution();
        let mut acc = 0u64;
        let t = time_median(1, 7, Duration::from_micros(200), tick, || {
            acc = black_box(acc.wrapping_add(1));
        })
        .unwrap();
        assert!(t.median > 0.0 && t.inner >= 1);
    }
}
