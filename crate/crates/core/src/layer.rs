//! Multi-scale adaptive diffusion layer with an exact analytic backward pass.
//!
//! Forward: `Y = X + sum_k w_k (alpha_k * Lap_{h_k} X)` with per-channel
//! coefficients `alpha = bound * sigmoid(raw)`, optionally followed by a
//! per-position layer normalisation without affine parameters.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};
use crate::field::{
    accumulate_stencil_into, apply_stencil_into, apply_stencil_transpose_into, BoundaryMode, SequenceField, StencilSpec,
};
use crate::scalar::{logit, sigmoid, Scalar};

/// Per-channel ceiling on `sum_k |w_k| alpha_{k,c}` after runtime enforcement.
pub const CFL_TARGET: f64 = 0.5 - 1e-6;

/// Variance floor of the post-normalisation.
pub const NORM_EPS: f64 = 1e-5;

pub const DEFAULT_SCALES: [usize; 3] = [1, 2, 4];
pub const DEFAULT_MIX_WEIGHTS: [f64; 3] = [1.0, 0.6, 0.3];
pub const DEFAULT_ALPHA: f64 = 0.1;

/// Largest `|raw|` the layer honours; beyond it the logistic would round to 0 or 1.
pub fn raw_limit<T: Scalar>() -> T {
    T::lit(0.8) * (T::one() / T::epsilon()).ln()
}

/// `bound * sigmoid(raw)` with `raw` clamped to `[-raw_limit, raw_limit]`,
/// so the result stays strictly inside `(0, bound)`.
pub fn constrain_alpha<T: Scalar>(raw: T, bound: T) -> T {
    let r = raw_limit::<T>();
    bound * sigmoid(raw.max(-r).min(r))
}

/// Derivative of [`constrain_alpha`] with respect to `raw` (zero where clamped).
pub fn constrain_alpha_grad<T: Scalar>(raw: T, bound: T) -> T {
    let r = raw_limit::<T>();
    if raw.abs() > r {
        return T::zero();
    }
    let s = sigmoid(raw);
    bound * s * (T::one() - s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionLayerParams<T> {
    scales: Vec<usize>,
    channels: usize,
    tied: bool,
    /// Row-major `K x cols`, `cols = 1` when tied, else `channels`.
    raw_alpha: Vec<T>,
    mix_weights: Vec<T>,
    alpha_bound: T,
    post_norm: bool,
    boundary: BoundaryMode,
}

impl<T: Scalar> DiffusionLayerParams<T> {
    /// Scales `[1, 2, 4]`, weights `1, 0.6, 0.3`, every coefficient at 0.1.
    pub fn new(channels: usize) -> Result<Self> {
        let weights = DEFAULT_MIX_WEIGHTS.iter().map(|&w| T::lit(w)).collect();
        Self::with_scales(channels, DEFAULT_SCALES.to_vec(), weights)
    }

    pub fn with_scales(channels: usize, scales: Vec<usize>, mix_weights: Vec<T>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("channels must be positive".into()));
        }
        validate_scales(&scales)?;
        if mix_weights.len() != scales.len() {
            return Err(shape_err(format!("{} mix weights", scales.len()), mix_weights.len()));
        }
        if mix_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument("mix weights must be finite".into()));
        }
        let bound = T::lit(0.5);
        let init = logit(T::lit(DEFAULT_ALPHA) / bound);
        Ok(Self {
            raw_alpha: vec![init; scales.len() * channels],
            scales,
            channels,
            tied: false,
            mix_weights,
            alpha_bound: bound,
            post_norm: false,
            boundary: BoundaryMode::default(),
        })
    }

    pub fn with_post_norm(mut self, post_norm: bool) -> Self {
        self.post_norm = post_norm;
        self
    }

    pub fn with_boundary(mut self, boundary: BoundaryMode) -> Self {
        self.boundary = boundary;
        self
    }

    /// Shares one coefficient per scale across channels. Resets coefficients to the first channel's values.
    pub fn with_tied(mut self, tied: bool) -> Self {
        if tied != self.tied {
            let cols = self.cols();
            let firsts: Vec<T> = (0..self.scales.len()).map(|k| self.raw_alpha[k * cols]).collect();
            self.tied = tied;
            let cols = self.cols();
            self.raw_alpha = firsts.into_iter().flat_map(|r| std::iter::repeat_n(r, cols)).collect();
        }
        self
    }

    /// Sets the bound on each coefficient; must lie in `(0, 0.5]`.
    pub fn with_alpha_bound(mut self, bound: T) -> Result<Self> {
        if !(bound > T::zero() && bound <= T::lit(0.5)) {
            return Err(Error::InvalidArgument(format!("alpha bound {bound} outside (0, 0.5]")));
        }
        self.alpha_bound = bound;
        Ok(self)
    }

    /// Sets every constrained coefficient to `alpha`, which must lie in `(0, bound)`.
    pub fn with_uniform_alpha(mut self, alpha: T) -> Result<Self> {
        if !(alpha > T::zero() && alpha < self.alpha_bound) {
            return Err(Error::CflViolation { alpha: alpha.as_f64() });
        }
        let raw = logit(alpha / self.alpha_bound);
        self.raw_alpha.fill(raw);
        Ok(self)
    }

    /// Pushes every raw coefficient to the lower clamp, so the layer is the identity up to ~1e-13.
    pub fn with_identity_limit(mut self) -> Self {
        self.raw_alpha.fill(-raw_limit::<T>());
        self
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_tied(&self) -> bool {
        self.tied
    }

    pub fn post_norm(&self) -> bool {
        self.post_norm
    }

    pub fn boundary(&self) -> BoundaryMode {
        self.boundary
    }

    pub fn alpha_bound(&self) -> T {
        self.alpha_bound
    }

    fn cols(&self) -> usize {
        if self.tied {
            1
        } else {
            self.channels
        }
    }

    pub fn raw_alpha(&self) -> &[T] {
        &self.raw_alpha
    }

    pub fn raw_alpha_mut(&mut self) -> &mut [T] {
        &mut self.raw_alpha
    }

    pub fn mix_weights(&self) -> &[T] {
        &self.mix_weights
    }

    pub fn mix_weights_mut(&mut self) -> &mut [T] {
        &mut self.mix_weights
    }

    /// Raw coefficients and mix weights, mutably at once.
    pub fn trainable_mut(&mut self) -> (&mut [T], &mut [T]) {
        (&mut self.raw_alpha, &mut self.mix_weights)
    }

    /// Number of learnable scalars: coefficients plus mix weights.
    pub fn param_count(&self) -> usize {
        self.raw_alpha.len() + self.mix_weights.len()
    }

    fn raw_at(&self, k: usize, c: usize) -> T {
        if self.tied {
            self.raw_alpha[k]
        } else {
            self.raw_alpha[k * self.channels + c]
        }
    }

    /// Constrained coefficients before runtime CFL enforcement, row-major `K x channels`.
    pub fn alphas(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.scales.len() * self.channels);
        for k in 0..self.scales.len() {
            for c in 0..self.channels {
                out.push(constrain_alpha(self.raw_at(k, c), self.alpha_bound));
            }
        }
        out
    }

    /// Coefficients actually applied, row-major `K x channels`, plus each channel's pre-rescale sum.
    pub fn effective_alphas(&self) -> (Vec<T>, Vec<T>) {
        let mut alpha = self.alphas();
        let sums = self.channel_sums(&alpha);
        let target = T::lit(CFL_TARGET);
        for (c, &s) in sums.iter().enumerate() {
            if s > target {
                let f = target / s;
                for k in 0..self.scales.len() {
                    alpha[k * self.channels + c] *= f;
                }
            }
        }
        (alpha, sums)
    }

    fn channel_sums(&self, alpha: &[T]) -> Vec<T> {
        (0..self.channels)
            .map(|c| {
                (0..self.scales.len())
                    .map(|k| self.mix_weights[k].abs() * alpha[k * self.channels + c])
                    .sum()
            })
            .collect()
    }

    /// Flat `key=value` lines; [`DiffusionLayerParams::from_text`] reads them back exactly.
    pub fn to_text(&self) -> String {
        let join = |v: &[T]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let scales: Vec<String> = self.scales.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "scales={}", scales.join(","));
        let _ = writeln!(s, "channels={}", self.channels);
        let _ = writeln!(s, "tied={}", self.tied);
        let _ = writeln!(s, "alpha_bound={}", self.alpha_bound);
        let _ = writeln!(s, "post_norm={}", self.post_norm);
        let _ = writeln!(s, "boundary={}", self.boundary);
        let _ = writeln!(s, "mix_weights={}", join(&self.mix_weights));
        let _ = writeln!(s, "raw_alpha={}", join(&self.raw_alpha));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut scales = None;
        let mut channels = None;
        let mut tied = None;
        let mut bound = None;
        let mut post_norm = None;
        let mut boundary = None;
        let mut weights = None;
        let mut raw = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |message: String| Error::Parse { line: n + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got '{line}'")))?;
            let value = value.trim();
            match key.trim() {
                "scales" => scales = Some(parse_list::<usize>(value).map_err(bad)?),
                "channels" => channels = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                "tied" => tied = Some(value.parse::<bool>().map_err(|e| bad(e.to_string()))?),
                "alpha_bound" => bound = Some(T::lit(value.parse::<f64>().map_err(|e| bad(e.to_string()))?)),
                "post_norm" => post_norm = Some(value.parse::<bool>().map_err(|e| bad(e.to_string()))?),
                "boundary" => boundary = Some(value.parse::<BoundaryMode>().map_err(|e| bad(e.to_string()))?),
                "mix_weights" => weights = Some(parse_scalars::<T>(value).map_err(bad)?),
                "raw_alpha" => raw = Some(parse_scalars::<T>(value).map_err(bad)?),
                other => return Err(bad(format!("unknown key '{other}'"))),
            }
        }
        let missing = |key: &str| Error::Parse {
            line: 0,
            message: format!("missing key '{key}'"),
        };
        let mut params = Self::with_scales(
            channels.ok_or_else(|| missing("channels"))?,
            scales.ok_or_else(|| missing("scales"))?,
            weights.ok_or_else(|| missing("mix_weights"))?,
        )?
        .with_tied(tied.unwrap_or(false))
        .with_post_norm(post_norm.unwrap_or(false))
        .with_boundary(boundary.unwrap_or_default());
        if let Some(b) = bound {
            params = params.with_alpha_bound(b)?;
        }
        let raw = raw.ok_or_else(|| missing("raw_alpha"))?;
        if raw.len() != params.raw_alpha.len() {
            return Err(shape_err(
                format!("{} raw coefficients", params.raw_alpha.len()),
                raw.len(),
            ));
        }
        params.raw_alpha = raw;
        Ok(params)
    }
}

fn validate_scales(scales: &[usize]) -> Result<()> {
    if scales.is_empty() {
        return Err(Error::InvalidArgument("at least one scale is required".into()));
    }
    if scales.contains(&0) {
        return Err(Error::InvalidArgument("scales must be >= 1".into()));
    }
    let mut sorted = scales.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument(format!("duplicate scale in {scales:?}")));
    }
    Ok(())
}

fn parse_list<U: std::str::FromStr>(value: &str) -> std::result::Result<Vec<U>, String>
where
    U::Err: std::fmt::Display,
{
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|s| s.trim().parse::<U>().map_err(|e| format!("'{s}': {e}")))
        .collect()
}

fn parse_scalars<T: Scalar>(value: &str) -> std::result::Result<Vec<T>, String> {
    Ok(parse_list::<f64>(value)?.into_iter().map(T::lit).collect())
}

/// Everything the backward pass needs; produced by [`forward`].
#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    params: DiffusionLayerParams<T>,
    input: SequenceField<T>,
    /// `Lap_{h_k} X` for each scale.
    laplacians: Vec<Vec<T>>,
    /// Constrained coefficients before enforcement, `K x channels`.
    alphas: Vec<T>,
    /// Coefficients used in the step, `K x channels`.
    effective: Vec<T>,
    /// Per-channel `sum_k |w_k| alpha` before enforcement.
    sums: Vec<T>,
    /// Post-normalised output and per-position inverse standard deviations.
    normalised: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> LayerCache<T> {
    pub fn input(&self) -> &SequenceField<T> {
        &self.input
    }

    pub fn effective_alphas(&self) -> &[T] {
        &self.effective
    }

    /// Channels whose coefficients were rescaled by the runtime CFL enforcement.
    pub fn rescaled_channels(&self) -> Vec<usize> {
        let target = T::lit(CFL_TARGET);
        (0..self.sums.len()).filter(|&c| self.sums[c] > target).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients<T> {
    pub input: SequenceField<T>,
    /// Same layout as [`DiffusionLayerParams::raw_alpha`].
    pub raw_alpha: Vec<T>,
    pub mix_weights: Vec<T>,
}

/// Applies the layer. Fails if any scale is not below the field length.
pub fn forward<T: Scalar>(
    field: &SequenceField<T>,
    params: &DiffusionLayerParams<T>,
) -> Result<(SequenceField<T>, LayerCache<T>)> {
    if field.channels() != params.channels {
        return Err(shape_err(format!("{} channels", params.channels), field.channels()));
    }
    let (len, d) = (field.len(), field.channels());
    let mut laplacians = Vec::with_capacity(params.scales.len());
    for &h in &params.scales {
        let stencil = StencilSpec::new(h, params.boundary);
        stencil.validate(len)?;
        let mut lap = vec![T::zero(); len * d];
        apply_stencil_into(field.as_slice(), len, d, stencil, &mut lap);
        laplacians.push(lap);
    }
    let alphas = params.alphas();
    let (effective, sums) = params.effective_alphas();
    let mut y = field.clone();
    for (k, lap) in laplacians.iter().enumerate() {
        let w = params.mix_weights[k];
        let coef: Vec<T> = effective[k * d..(k + 1) * d].iter().map(|&a| w * a).collect();
        for (yrow, lrow) in y.as_mut_slice().chunks_exact_mut(d).zip(lap.chunks_exact(d)) {
            for ((o, &l), &a) in yrow.iter_mut().zip(lrow).zip(&coef) {
                *o += a * l;
            }
        }
    }
    let normalised = if params.post_norm {
        let (z, inv) = layer_norm(y.as_slice(), d);
        y = SequenceField::new(len, d, z.clone())?;
        Some((z, inv))
    } else {
        None
    };
    y.check_finite()?;
    let cache = LayerCache {
        params: params.clone(),
        input: field.clone(),
        laplacians,
        alphas,
        effective,
        sums,
        normalised,
    };
    Ok((y, cache))
}

/// Same output as [`forward`] written into `out`, without keeping anything for a backward pass.
pub fn apply_into<T: Scalar>(
    field: &SequenceField<T>,
    params: &DiffusionLayerParams<T>,
    out: &mut SequenceField<T>,
) -> Result<()> {
    if field.channels() != params.channels {
        return Err(shape_err(format!("{} channels", params.channels), field.channels()));
    }
    field.expect_shape(out)?;
    let (len, d) = (field.len(), field.channels());
    let (effective, _) = params.effective_alphas();
    for (k, &h) in params.scales.iter().enumerate() {
        let stencil = StencilSpec::new(h, params.boundary);
        stencil.validate(len)?;
        let w = params.mix_weights[k];
        let coef: Vec<T> = effective[k * d..(k + 1) * d].iter().map(|&a| w * a).collect();
        accumulate_stencil_into(field.as_slice(), len, d, stencil, &coef, k == 0, out.as_mut_slice());
    }
    if params.post_norm {
        let n = T::from_usize_lossy(d);
        let eps = T::lit(NORM_EPS);
        for row in out.as_mut_slice().chunks_exact_mut(d) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
        }
    }
    out.check_finite()
}

/// Per-row normalisation to zero mean and unit variance; returns output and inverse std per row.
fn layer_norm<T: Scalar>(x: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let n = T::from_usize_lossy(d);
    let eps = T::lit(NORM_EPS);
    let mut out = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(x.len() / d);
    for row in x.chunks_exact(d) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let s = T::one() / (var + eps).sqrt();
        out.extend(row.iter().map(|&v| (v - mean) * s));
        inv.push(s);
    }
    (out, inv)
}

fn layer_norm_backward<T: Scalar>(z: &[T], inv: &[T], grad: &[T], d: usize) -> Vec<T> {
    let n = T::from_usize_lossy(d);
    let mut out = Vec::with_capacity(grad.len());
    for ((zr, gr), &s) in z.chunks_exact(d).zip(grad.chunks_exact(d)).zip(inv) {
        let mg = gr.iter().copied().sum::<T>() / n;
        let mgz = gr.iter().zip(zr).map(|(&g, &z)| g * z).sum::<T>() / n;
        out.extend(gr.iter().zip(zr).map(|(&g, &z)| s * (g - mg - z * mgz)));
    }
    out
}

/// Exact gradients of a scalar loss given its gradient with respect to the layer output.
pub fn backward<T: Scalar>(cache: &LayerCache<T>, grad_out: &SequenceField<T>) -> Result<LayerGradients<T>> {
    cache.input.expect_shape(grad_out)?;
    let p = &cache.params;
    let (len, d, kk) = (grad_out.len(), grad_out.channels(), p.scales.len());
    let g: Vec<T> = match &cache.normalised {
        Some((z, inv)) => layer_norm_backward(z, inv, grad_out.as_slice(), d),
        None => grad_out.as_slice().to_vec(),
    };

    let mut grad_in = g.clone();
    let mut lap_t = vec![T::zero(); len * d];
    // g_kc = <G[:, c], Lap_k X[:, c]>
    let mut inner = vec![T::zero(); kk * d];
    for (k, &h) in p.scales.iter().enumerate() {
        let w = p.mix_weights[k];
        apply_stencil_transpose_into(&g, len, d, StencilSpec::new(h, p.boundary), &mut lap_t);
        let coef: Vec<T> = cache.effective[k * d..(k + 1) * d].iter().map(|&a| w * a).collect();
        for (orow, lrow) in grad_in.chunks_exact_mut(d).zip(lap_t.chunks_exact(d)) {
            for ((o, &l), &a) in orow.iter_mut().zip(lrow).zip(&coef) {
                *o += a * l;
            }
        }
        let acc = &mut inner[k * d..(k + 1) * d];
        for (grow, xrow) in g.chunks_exact(d).zip(cache.laplacians[k].chunks_exact(d)) {
            for ((a, &gv), &xv) in acc.iter_mut().zip(grow).zip(xrow) {
                *a += gv * xv;
            }
        }
    }

    let target = T::lit(CFL_TARGET);
    let mut grad_alpha = vec![T::zero(); kk * d];
    let mut grad_w = vec![T::zero(); kk];
    for c in 0..d {
        let s = cache.sums[c];
        for k in 0..kk {
            grad_w[k] += cache.effective[k * d + c] * inner[k * d + c];
        }
        if s > target {
            let q: T = (0..kk)
                .map(|k| p.mix_weights[k] * inner[k * d + c] * cache.alphas[k * d + c])
                .sum();
            for k in 0..kk {
                let w = p.mix_weights[k];
                let a = cache.alphas[k * d + c];
                grad_alpha[k * d + c] = target / s * w * inner[k * d + c] - target * w.abs() / (s * s) * q;
                grad_w[k] -= target * sign(w) * a / (s * s) * q;
            }
        } else {
            for k in 0..kk {
                grad_alpha[k * d + c] = p.mix_weights[k] * inner[k * d + c];
            }
        }
    }

    let mut grad_raw = vec![T::zero(); p.raw_alpha.len()];
    for k in 0..kk {
        for c in 0..d {
            let chain = constrain_alpha_grad(p.raw_at(k, c), p.alpha_bound);
            let slot = if p.tied { k } else { k * d + c };
            grad_raw[slot] += grad_alpha[k * d + c] * chain;
        }
    }
    Ok(LayerGradients {
        input: SequenceField::new(len, d, grad_in)?,
        raw_alpha: grad_raw,
        mix_weights: grad_w,
    })
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Compares analytic gradients with central finite differences along random
/// probe directions, for the input, the raw coefficients and the mix weights.
///
/// The loss is `1/2 |Y|^2 + <R, Y>` with a random `R` per trial, which keeps the
/// post-normalised path informative. Returns the worst relative error.
pub fn grad_check<T: Scalar>(
    params: &DiffusionLayerParams<T>,
    field: &SequenceField<T>,
    trials: usize,
    seed: u64,
) -> Result<T> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |n: usize| -> Vec<T> { (0..n).map(|_| T::lit(StandardNormal.sample(&mut rng))).collect() };
    let (len, d) = (field.len(), field.channels());
    let loss = |x: &SequenceField<T>, p: &DiffusionLayerParams<T>, r: &[T]| -> Result<T> {
        let (y, _) = forward(x, p)?;
        Ok(y.as_slice()
            .iter()
            .zip(r)
            .map(|(&v, &rv)| T::lit(0.5) * v * v + rv * v)
            .sum())
    };
    let eps = T::lit(FD_STEP);
    let two_eps = eps + eps;
    let mut worst = T::zero();
    for _ in 0..trials {
        let r = normal(len * d);
        let (y, cache) = forward(field, params)?;
        let g_out: Vec<T> = y.as_slice().iter().zip(&r).map(|(&v, &rv)| v + rv).collect();
        let grads = backward(&cache, &SequenceField::new(len, d, g_out)?)?;

        let v = SequenceField::new(len, d, normal(len * d))?;
        let analytic = grads.input.dot(&v);
        let mut plus = field.clone();
        plus.axpy(eps, &v);
        let mut minus = field.clone();
        minus.axpy(-eps, &v);
        let numeric = (loss(&plus, params, &r)? - loss(&minus, params, &r)?) / two_eps;
        worst = worst.max(relative_error(analytic, numeric));

        let dir = normal(params.raw_alpha.len());
        let analytic: T = grads.raw_alpha.iter().zip(&dir).map(|(&a, &b)| a * b).sum();
        let shifted = |sign: T| {
            let mut p = params.clone();
            for (raw, &dv) in p.raw_alpha.iter_mut().zip(&dir) {
                *raw += sign * eps * dv;
            }
            p
        };
        let numeric = (loss(field, &shifted(T::one()), &r)? - loss(field, &shifted(-T::one()), &r)?) / two_eps;
        worst = worst.max(relative_error(analytic, numeric));

        let dir = normal(params.mix_weights.len());
        let analytic: T = grads.mix_weights.iter().zip(&dir).map(|(&a, &b)| a * b).sum();
        let shifted = |sign: T| {
            let mut p = params.clone();
            for (w, &dv) in p.mix_weights.iter_mut().zip(&dir) {
                *w += sign * eps * dv;
            }
            p
        };
        let numeric = (loss(field, &shifted(T::one()), &r)? - loss(field, &shifted(-T::one()), &r)?) / two_eps;
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(worst)
}

/// `|a - n| / max(|a|, |n|)`, or the absolute difference when both are tiny.
pub fn relative_error<T: Scalar>(analytic: T, numeric: T) -> T {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < T::lit(1e-12) {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{dct_mode, eigenvalue};

    #[test]
    fn constrain_examples() {
        assert_eq!(constrain_alpha(0.0, 0.5), 0.25);
        assert!((constrain_alpha(logit(0.2), 0.5) - 0.1_f64).abs() < 1e-15);
        let top = constrain_alpha(1e6_f64, 0.5);
        assert!(top < 0.5 && top > 0.4999);
        let bottom = constrain_alpha(-1e6_f64, 0.5);
        assert!(bottom > 0.0);
        assert_eq!(constrain_alpha_grad(1e6_f64, 0.5), 0.0);
    }

    #[test]
    fn default_init() {
        let p = DiffusionLayerParams::<f64>::new(3).unwrap();
        assert_eq!(p.scales(), &[1, 2, 4]);
        assert_eq!(p.mix_weights(), &[1.0, 0.6, 0.3]);
        assert!(p.alphas().iter().all(|a| (a - 0.1).abs() < 1e-15));
        assert_eq!(p.param_count(), 3 * 3 + 3);
        assert_eq!(p.clone().with_tied(true).param_count(), 3 + 3);
    }

    #[test]
    fn scale_validation() {
        assert!(DiffusionLayerParams::<f64>::with_scales(2, vec![1, 1], vec![1.0, 1.0]).is_err());
        assert!(DiffusionLayerParams::<f64>::with_scales(2, vec![0], vec![1.0]).is_err());
        assert!(DiffusionLayerParams::<f64>::with_scales(2, vec![1, 2], vec![1.0]).is_err());
        let p = DiffusionLayerParams::<f64>::new(1).unwrap();
        assert!(matches!(
            forward(&SequenceField::zeros(4, 1), &p),
            Err(Error::InvalidStencil { .. })
        ));
    }

    #[test]
    fn mode_scaling_single_scale() {
        let len = 16;
        let p = DiffusionLayerParams::with_scales(1, vec![1], vec![1.0])
            .unwrap()
            .with_uniform_alpha(0.3)
            .unwrap();
        for k in [0, 3, 15] {
            let x = SequenceField::from_column(&dct_mode::<f64>(len, k)).unwrap();
            let (y, _) = forward(&x, &p).unwrap();
            let expect = x.scaled(1.0 + 0.3 * eigenvalue::<f64>(len, k, 1));
            assert!(y.max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn runtime_cfl_rescale() {
        let p = DiffusionLayerParams::<f64>::new(2)
            .unwrap()
            .with_uniform_alpha(0.45)
            .unwrap();
        let (eff, sums) = p.effective_alphas();
        assert!((sums[0] - 0.45 * 1.9).abs() < 1e-12);
        for c in 0..2 {
            let s: f64 = (0..3).map(|k| p.mix_weights()[k].abs() * eff[k * 2 + c]).sum();
            assert!((s - CFL_TARGET).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_grad_out() {
        let p = DiffusionLayerParams::<f64>::new(2).unwrap().with_post_norm(true);
        let x = SequenceField::from_fn(9, 2, |i, c| (i * 3 + c) as f64 * 0.1);
        let (_, cache) = forward(&x, &p).unwrap();
        let g = backward(&cache, &SequenceField::zeros(9, 2)).unwrap();
        assert_eq!(g.input.max_abs(), 0.0);
        assert!(g.raw_alpha.iter().chain(&g.mix_weights).all(|&v| v == 0.0));
        assert!(backward(&cache, &SequenceField::zeros(8, 2)).is_err());
    }

    #[test]
    fn apply_into_matches_forward() {
        for (post_norm, boundary) in [(false, BoundaryMode::default()), (true, BoundaryMode::ReplicateClamp)] {
            let p = DiffusionLayerParams::<f64>::new(3)
                .unwrap()
                .with_uniform_alpha(0.4)
                .unwrap()
                .with_post_norm(post_norm)
                .with_boundary(boundary);
            let x = SequenceField::from_fn(11, 3, |i, c| ((i * 7 + c * 3) % 5) as f64 - 1.7);
            let (y, _) = forward(&x, &p).unwrap();
            let mut out = SequenceField::zeros(11, 3);
            apply_into(&x, &p, &mut out).unwrap();
            assert!(out.max_abs_diff(&y) < 1e-12);
        }
        let p = DiffusionLayerParams::<f64>::new(3).unwrap();
        let mut out = SequenceField::zeros(10, 3);
        assert!(apply_into(&SequenceField::zeros(11, 3), &p, &mut out).is_err());
    }

    #[test]
    fn layer_norm_rows() {
        let (z, _) = layer_norm(&[1.0_f64, 2.0, 3.0, 5.0, 5.0, 5.0], 3);
        let mean: f64 = z[..3].iter().sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-15);
        assert!(z[3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn text_round_trip() {
        let mut p = DiffusionLayerParams::<f64>::new(2).unwrap().with_post_norm(true);
        p.raw_alpha_mut()[1] = -0.123456789012345;
        let back = DiffusionLayerParams::from_text(&p.to_text()).unwrap();
        assert_eq!(back, p);
        assert!(DiffusionLayerParams::<f64>::from_text("scales=1\nbogus=3\n").is_err());
    }

    #[test]
    fn tiny_grad_check() {
        let p = DiffusionLayerParams::with_scales(1, vec![1], vec![1.0]).unwrap();
        let x = SequenceField::from_column(&[0.3, -1.2]).unwrap();
        assert!(grad_check(&p, &x, 5, 1).unwrap() < 1e-7);
    }
}
