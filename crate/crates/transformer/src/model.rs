//! Pre-LN transformer encoder classifier with a hand-written backward pass and
//! one shared diffusion layer wired in at a configurable position.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use pdelab_core::layer::{
    backward as layer_backward, forward as layer_forward, DEFAULT_ALPHA, DEFAULT_MIX_WEIGHTS, DEFAULT_SCALES,
};
use pdelab_core::{BoundaryMode, Field, LayerCache, LayerParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IntegrationPosition {
    None,
    AfterEmbedding,
    AfterMlp,
    LayerDiffusion,
    BeforeLayerNorm,
    InAttention,
    HeadDiffusion,
    AfterAttention,
}

impl IntegrationPosition {
    pub const ALL: [IntegrationPosition; 8] = [
        IntegrationPosition::None,
        IntegrationPosition::AfterEmbedding,
        IntegrationPosition::AfterMlp,
        IntegrationPosition::LayerDiffusion,
        IntegrationPosition::BeforeLayerNorm,
        IntegrationPosition::InAttention,
        IntegrationPosition::HeadDiffusion,
        IntegrationPosition::AfterAttention,
    ];

    pub fn variants() -> impl Iterator<Item = IntegrationPosition> {
        Self::ALL.into_iter().filter(|p| *p != IntegrationPosition::None)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IntegrationPosition::None => "none",
            IntegrationPosition::AfterEmbedding => "after-embedding",
            IntegrationPosition::AfterMlp => "after-mlp",
            IntegrationPosition::LayerDiffusion => "layer-diffusion",
            IntegrationPosition::BeforeLayerNorm => "before-layernorm",
            IntegrationPosition::InAttention => "in-attention",
            IntegrationPosition::HeadDiffusion => "head-diffusion",
            IntegrationPosition::AfterAttention => "after-attention",
        }
    }
}

impl fmt::Display for IntegrationPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IntegrationPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown integration position '{s}'")))
    }
}

/// Settings from which the model builds its diffusion layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeSettings {
    pub scales: Vec<usize>,
    pub mix_weights: Vec<f64>,
    /// Initial constrained coefficient for every scale and channel.
    pub alpha: f64,
    pub post_norm: bool,
    pub boundary: BoundaryMode,
    pub tied: bool,
    /// Start at the lower coefficient clamp (layer is the identity up to ~1e-13).
    pub identity_limit: bool,
}

impl Default for PdeSettings {
    fn default() -> Self {
        Self {
            scales: DEFAULT_SCALES.to_vec(),
            mix_weights: DEFAULT_MIX_WEIGHTS.to_vec(),
            alpha: DEFAULT_ALPHA,
            post_norm: false,
            boundary: BoundaryMode::default(),
            tied: false,
            identity_limit: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub num_classes: usize,
    pub position: IntegrationPosition,
    pub pde: PdeSettings,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 4,
            mlp_hidden: 128,
            vocab: crate::tasks::VOCAB,
            max_len: 64,
            num_classes: crate::tasks::NUM_CLASSES,
            position: IntegrationPosition::None,
            pde: PdeSettings::default(),
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
            ("vocab", self.vocab),
            ("max_len", self.max_len),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads {} do not divide dim {}",
                self.heads, self.dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.position != IntegrationPosition::HeadDiffusion && self.position != IntegrationPosition::None {
            if let Some(&h) = self.pde.scales.iter().max() {
                if h >= self.max_len {
                    return Err(Error::Config(format!(
                        "scale {h} must be below max_len {}",
                        self.max_len
                    )));
                }
            }
        }
        Ok(())
    }

    /// Lattice length and channel count the diffusion layer sees at this position.
    pub fn pde_shape(&self) -> Option<(usize, usize)> {
        match self.position {
            IntegrationPosition::None => None,
            IntegrationPosition::HeadDiffusion => Some((self.heads, self.head_dim())),
            _ => Some((self.max_len, self.dim)),
        }
    }

    fn build_pde(&self) -> Result<Option<LayerParams>> {
        let Some((lattice, channels)) = self.pde_shape() else {
            return Ok(None);
        };
        if self.pde.scales.len() != self.pde.mix_weights.len() {
            return Err(Error::Config("one mix weight per scale is required".into()));
        }
        let (scales, weights): (Vec<usize>, Vec<f64>) = self
            .pde
            .scales
            .iter()
            .zip(&self.pde.mix_weights)
            .filter(|(&h, _)| h < lattice)
            .map(|(&h, &w)| (h, w))
            .unzip();
        if scales.is_empty() {
            return Ok(None);
        }
        let mut p = LayerParams::with_scales(channels, scales, weights)?
            .with_post_norm(self.pde.post_norm)
            .with_boundary(self.pde.boundary)
            .with_tied(self.pde.tied)
            .with_uniform_alpha(self.pde.alpha)?;
        if self.pde.identity_limit {
            p = p.with_identity_limit();
        }
        Ok(Some(p))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in x out`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    fn uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize, w_bound: f64, b_bound: f64) -> Self {
        let mut l = Self::zeros(fan_in, fan_out);
        l.w.mapv_inplace(|_| rng.random_range(-w_bound..=w_bound));
        if b_bound > 0.0 {
            l.b.mapv_inplace(|_| rng.random_range(-b_bound..=b_bound));
        }
        l
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

const LN_EPS: f64 = 1e-5;

struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl Norm {
    fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.dot(&row) / d;
            *s = 1.0 / (var + LN_EPS).sqrt();
            row *= *s;
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, NormCache { xhat, inv_std })
    }

    fn backward(&self, cache: &NormCache, dy: &Array2<f64>, grad: &mut Norm) -> Array2<f64> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = dy.ncols() as f64;
        let mut dx = dy * &self.gamma;
        for ((mut row, xh), &s) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.inv_std) {
            let mean_g = row.sum() / d;
            let mean_gx = row.dot(&xh) / d;
            row.zip_mut_with(&xh, |g, &x| *g = s * (*g - mean_g - x * mean_gx));
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1: Norm,
    pub qkv: Linear,
    pub out: Linear,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Every non-diffusion parameter of the model. Also used for gradients and optimiser state.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub tok: Array2<f64>,
    pub pos: Array2<f64>,
    pub blocks: Vec<BlockWeights>,
    pub ln_f: Norm,
    pub head: Linear,
}

impl Weights {
    fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let mut normal =
            |rows: usize, cols: usize| Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut *rng));
        let tok = normal(cfg.vocab, d);
        let pos = normal(cfg.max_len, d);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let blocks = (0..cfg.layers)
            .map(|_| BlockWeights {
                ln1: Norm::new(d),
                qkv: Linear::uniform(rng, d, 3 * d, (6.0 / (4 * d) as f64).sqrt(), 0.0),
                out: Linear::uniform(rng, d, d, inv(d), 0.0),
                ln2: Norm::new(d),
                fc1: Linear::uniform(rng, d, cfg.mlp_hidden, inv(d), inv(d)),
                fc2: Linear::uniform(rng, cfg.mlp_hidden, d, inv(cfg.mlp_hidden), inv(cfg.mlp_hidden)),
            })
            .collect();
        Self {
            tok,
            pos,
            blocks,
            ln_f: Norm::new(d),
            head: Linear::uniform(rng, d, cfg.num_classes, inv(d), inv(d)),
        }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let lin = |l: &Linear| Linear::zeros(l.w.nrows(), l.w.ncols());
        Self {
            tok: Array2::zeros(self.tok.raw_dim()),
            pos: Array2::zeros(self.pos.raw_dim()),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    ln1: Norm::zeros(b.ln1.gamma.len()),
                    qkv: lin(&b.qkv),
                    out: lin(&b.out),
                    ln2: Norm::zeros(b.ln2.gamma.len()),
                    fc1: lin(&b.fc1),
                    fc2: lin(&b.fc2),
                })
                .collect(),
            ln_f: Norm::zeros(self.ln_f.gamma.len()),
            head: lin(&self.head),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.tok.as_slice().unwrap(), self.pos.as_slice().unwrap()];
        for b in &self.blocks {
            for n in [&b.ln1, &b.ln2] {
                out.push(n.gamma.as_slice().unwrap());
                out.push(n.beta.as_slice().unwrap());
            }
            for l in [&b.qkv, &b.out, &b.fc1, &b.fc2] {
                out.push(l.w.as_slice().unwrap());
                out.push(l.b.as_slice().unwrap());
            }
        }
        out.push(self.ln_f.gamma.as_slice().unwrap());
        out.push(self.ln_f.beta.as_slice().unwrap());
        out.push(self.head.w.as_slice().unwrap());
        out.push(self.head.b.as_slice().unwrap());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.tok.as_slice_mut().unwrap(), self.pos.as_slice_mut().unwrap()];
        for b in &mut self.blocks {
            for n in [&mut b.ln1, &mut b.ln2] {
                out.push(n.gamma.as_slice_mut().unwrap());
                out.push(n.beta.as_slice_mut().unwrap());
            }
            for l in [&mut b.qkv, &mut b.out, &mut b.fc1, &mut b.fc2] {
                out.push(l.w.as_slice_mut().unwrap());
                out.push(l.b.as_slice_mut().unwrap());
            }
        }
        out.push(self.ln_f.gamma.as_slice_mut().unwrap());
        out.push(self.ln_f.beta.as_slice_mut().unwrap());
        out.push(self.head.w.as_slice_mut().unwrap());
        out.push(self.head.b.as_slice_mut().unwrap());
        out
    }

    pub fn count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }
}

/// Gradients of the loss with respect to every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Weights,
    pub pde_raw_alpha: Vec<f64>,
    pub pde_mix_weights: Vec<f64>,
}

impl Gradients {
    /// Same order as [`Model::params_mut`]; the diffusion parameters come last.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.weights.slices();
        if !self.pde_raw_alpha.is_empty() {
            out.push(&self.pde_raw_alpha);
            out.push(&self.pde_mix_weights);
        }
        out
    }

    pub fn squared_norm(&self) -> f64 {
        self.weights
            .slices()
            .into_iter()
            .flatten()
            .chain(&self.pde_raw_alpha)
            .chain(&self.pde_mix_weights)
            .map(|g| g * g)
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
    pde: Option<LayerParams>,
}

/// Diffusion applied to consecutive `lattice x channels` chunks of a buffer.
struct Diffused {
    caches: Vec<LayerCache<f64>>,
}

struct AttentionCache {
    h1: Array2<f64>,
    ln1: NormCache,
    qkv: Array2<f64>,
    /// Values actually attended over (after in-attention diffusion).
    v: Array2<f64>,
    v_diff: Option<Diffused>,
    /// Softmax weights per `(sample, head)`, each `len x len`.
    probs: Vec<Array2<f64>>,
    /// Concatenated head outputs fed to the output projection.
    o: Array2<f64>,
    o_diff: Option<Diffused>,
    a_src_diff: Option<Diffused>,
    attn_diff: Option<Diffused>,
    mask: Option<Array2<f64>>,
}

struct MlpCache {
    h2: Array2<f64>,
    ln2: NormCache,
    u: Array2<f64>,
    /// `tanh` term of the GELU at `u`.
    t: Array2<f64>,
    g: Array2<f64>,
    m_src_diff: Option<Diffused>,
    mlp_diff: Option<Diffused>,
    mask: Option<Array2<f64>>,
}

struct BlockCache {
    pre_diff: Option<Diffused>,
    attn: AttentionCache,
    mlp: MlpCache,
}

/// Activations kept from [`Model::forward`] for [`Model::backward`].
pub struct ForwardCache {
    tokens: Vec<Vec<usize>>,
    embed_diff: Option<Diffused>,
    blocks: Vec<BlockCache>,
    ln_f: NormCache,
    pooled: Array2<f64>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// `tanh` of the GELU argument; `1 - 2 / (e^{2z} + 1)` is several times faster than `f64::tanh` here.
fn gelu_tanh(u: f64) -> f64 {
    let z = GELU_C * (u + GELU_A * u * u * u);
    1.0 - 2.0 / ((2.0 * z).exp() + 1.0)
}

fn gelu_grad(u: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
}

fn dropout_mask(rng: &mut ChaCha8Rng, shape: (usize, usize), p: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.random_bool(p) { 0.0 } else { keep })
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let weights = Weights::init(&config, &mut rng);
        let pde = config.build_pde()?;
        Ok(Self { config, weights, pde })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    /// Every trainable buffer; the diffusion raw coefficients and mix weights come last.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.weights.slices_mut();
        if let Some(p) = self.pde.as_mut() {
            let (raw, mix) = p.trainable_mut();
            out.push(raw);
            out.push(mix);
        }
        out
    }

    pub fn pde(&self) -> Option<&LayerParams> {
        self.pde.as_ref()
    }

    pub fn pde_mut(&mut self) -> Option<&mut LayerParams> {
        self.pde.as_mut()
    }

    /// Non-diffusion parameters; identical for every position at equal sizes.
    pub fn base_param_count(&self) -> usize {
        self.weights.count()
    }

    pub fn param_count(&self) -> usize {
        self.base_param_count() + self.pde.as_ref().map_or(0, LayerParams::param_count)
    }

    /// Logits in evaluation mode (no dropout).
    pub fn logits(&self, batch: &[&[usize]]) -> Result<Array2<f64>> {
        Ok(self.forward(batch, None)?.0)
    }

    fn diffuse(&self, x: &Array2<f64>, lattice: usize) -> Result<(Array2<f64>, Diffused)> {
        let p = self.pde.as_ref().expect("diffusion site without a diffusion layer");
        let channels = p.channels();
        let flat = x.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(flat.len());
        let mut caches = Vec::with_capacity(flat.len() / (lattice * channels));
        for chunk in flat.chunks_exact(lattice * channels) {
            let (y, cache) = layer_forward(&Field::new(lattice, channels, chunk.to_vec())?, p)?;
            out.extend_from_slice(y.as_slice());
            caches.push(cache);
        }
        Ok((
            Array2::from_shape_vec(x.raw_dim(), out).expect("shape preserved"),
            Diffused { caches },
        ))
    }

    fn diffuse_back(&self, d: &Diffused, grad: &Array2<f64>, grads: &mut Gradients) -> Result<Array2<f64>> {
        let flat = grad.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(flat.len());
        let chunk = flat.len() / d.caches.len();
        for (cache, g) in d.caches.iter().zip(flat.chunks_exact(chunk)) {
            let shape = cache.input();
            let lg = layer_backward(cache, &Field::new(shape.len(), shape.channels(), g.to_vec())?)?;
            out.extend_from_slice(lg.input.as_slice());
            for (a, b) in grads.pde_raw_alpha.iter_mut().zip(&lg.raw_alpha) {
                *a += b;
            }
            for (a, b) in grads.pde_mix_weights.iter_mut().zip(&lg.mix_weights) {
                *a += b;
            }
        }
        Ok(Array2::from_shape_vec(grad.raw_dim(), out).expect("shape preserved"))
    }

    fn maybe_diffuse(&self, on: bool, x: Array2<f64>) -> Result<(Array2<f64>, Option<Diffused>)> {
        if on && self.pde.is_some() {
            let (y, d) = self.diffuse(&x, self.config.max_len)?;
            Ok((y, Some(d)))
        } else {
            Ok((x, None))
        }
    }

    fn maybe_back(&self, d: &Option<Diffused>, grad: Array2<f64>, grads: &mut Gradients) -> Result<Array2<f64>> {
        match d {
            Some(d) => self.diffuse_back(d, &grad, grads),
            None => Ok(grad),
        }
    }

    /// Forward pass over a batch of equal-length token sequences.
    /// Dropout is active only when `rng` is given.
    pub fn forward(&self, batch: &[&[usize]], mut rng: Option<&mut ChaCha8Rng>) -> Result<(Array2<f64>, ForwardCache)> {
        let cfg = &self.config;
        let (b, len, d) = (batch.len(), cfg.max_len, cfg.dim);
        if b == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        let mut x = Array2::zeros((b * len, d));
        for (i, seq) in batch.iter().enumerate() {
            if seq.len() != len {
                return Err(Error::Data(format!("sequence length {} != max_len {len}", seq.len())));
            }
            for (t, &tok) in seq.iter().enumerate() {
                if tok >= cfg.vocab {
                    return Err(Error::Data(format!("token id {tok} outside vocabulary")));
                }
                let mut row = x.row_mut(i * len + t);
                row += &self.weights.tok.row(tok);
                row += &self.weights.pos.row(t);
            }
        }
        let pos = cfg.position;
        let (mut x, embed_diff) = self.maybe_diffuse(pos == IntegrationPosition::AfterEmbedding, x)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let (xi, pre_diff) = self.maybe_diffuse(pos == IntegrationPosition::LayerDiffusion && l > 0, x)?;
            let (xo, cache) = self.block_forward(l, xi, b, rng.as_deref_mut())?;
            blocks.push(BlockCache { pre_diff, ..cache });
            x = xo;
        }
        let (hf, ln_f) = self.weights.ln_f.forward(&x);
        let pooled = hf
            .into_shape_with_order((b, len, d))
            .expect("contiguous")
            .mean_axis(Axis(1))
            .expect("len > 0");
        let logits = self.weights.head.forward(&pooled);
        let tokens = batch.iter().map(|s| s.to_vec()).collect();
        Ok((
            logits,
            ForwardCache {
                tokens,
                embed_diff,
                blocks,
                ln_f,
                pooled,
            },
        ))
    }

    fn block_forward(
        &self,
        l: usize,
        x: Array2<f64>,
        b: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<f64>, BlockCache)> {
        use IntegrationPosition as P;
        let cfg = &self.config;
        let w = &self.weights.blocks[l];
        let (len, d, heads, dh) = (cfg.max_len, cfg.dim, cfg.heads, cfg.head_dim());
        let pos = cfg.position;

        let (a_src, a_src_diff) = self.maybe_diffuse(pos == P::BeforeLayerNorm, x.clone())?;
        let (h1, ln1) = w.ln1.forward(&a_src);
        let qkv = w.qkv.forward(&h1);
        let v_raw = qkv.slice(s![.., 2 * d..]).to_owned();
        let (v, v_diff) = self.maybe_diffuse(pos == P::InAttention, v_raw)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut o = Array2::zeros((b * len, d));
        let mut probs = Vec::with_capacity(b * heads);
        for bi in 0..b {
            let rows = bi * len..(bi + 1) * len;
            for h in 0..heads {
                let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
                let vv = v.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let mut sc = q.dot(&k.t()) * scale;
                softmax_rows(&mut sc);
                o.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh]).assign(&sc.dot(&vv));
                probs.push(sc);
            }
        }
        let (o, o_diff) = if pos == P::HeadDiffusion && self.pde.is_some() {
            let (y, dd) = self.diffuse(&o, heads)?;
            (y, Some(dd))
        } else {
            (o, None)
        };
        let attn = w.out.forward(&o);
        let (mut attn, attn_diff) = self.maybe_diffuse(pos == P::AfterAttention, attn)?;
        let mask1 = match rng.as_deref_mut() {
            Some(r) if cfg.dropout > 0.0 => {
                let m = dropout_mask(r, attn.dim(), cfg.dropout);
                attn *= &m;
                Some(m)
            }
            _ => None,
        };
        let x1 = x + &attn;

        let (m_src, m_src_diff) = self.maybe_diffuse(pos == P::BeforeLayerNorm, x1.clone())?;
        let (h2, ln2) = w.ln2.forward(&m_src);
        let u = w.fc1.forward(&h2);
        let t = u.mapv(gelu_tanh);
        let mut g = u.clone();
        g.zip_mut_with(&t, |g, &t| *g *= 0.5 * (1.0 + t));
        let mlp = w.fc2.forward(&g);
        let (mut mlp, mlp_diff) = self.maybe_diffuse(pos == P::AfterMlp, mlp)?;
        let mask2 = match rng {
            Some(r) if cfg.dropout > 0.0 => {
                let m = dropout_mask(r, mlp.dim(), cfg.dropout);
                mlp *= &m;
                Some(m)
            }
            _ => None,
        };
        let x2 = x1 + &mlp;
        Ok((
            x2,
            BlockCache {
                pre_diff: None,
                attn: AttentionCache {
                    h1,
                    ln1,
                    qkv,
                    v,
                    v_diff,
                    probs,
                    o,
                    o_diff,
                    a_src_diff,
                    attn_diff,
                    mask: mask1,
                },
                mlp: MlpCache {
                    h2,
                    ln2,
                    u,
                    t,
                    g,
                    m_src_diff,
                    mlp_diff,
                    mask: mask2,
                },
            },
        ))
    }

    /// Gradients of the loss given `d loss / d logits`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Array2<f64>) -> Result<Gradients> {
        let cfg = &self.config;
        let (b, len, d) = (cache.tokens.len(), cfg.max_len, cfg.dim);
        let mut grads = Gradients {
            weights: self.weights.zeros_like(),
            pde_raw_alpha: vec![0.0; self.pde.as_ref().map_or(0, |p| p.raw_alpha().len())],
            pde_mix_weights: vec![0.0; self.pde.as_ref().map_or(0, |p| p.mix_weights().len())],
        };
        let dpooled = self
            .weights
            .head
            .backward(&cache.pooled, dlogits, &mut grads.weights.head);
        let mut dhf = Array2::zeros((b * len, d));
        let inv_len = 1.0 / len as f64;
        for bi in 0..b {
            let g = dpooled.row(bi).mapv(|v| v * inv_len);
            for t in 0..len {
                dhf.row_mut(bi * len + t).assign(&g);
            }
        }
        let mut dx = self.weights.ln_f.backward(&cache.ln_f, &dhf, &mut grads.weights.ln_f);
        for l in (0..cfg.layers).rev() {
            dx = self.block_backward(l, &cache.blocks[l], dx, b, &mut grads)?;
            dx = self.maybe_back(&cache.blocks[l].pre_diff, dx, &mut grads)?;
        }
        let dx = self.maybe_back(&cache.embed_diff, dx, &mut grads)?;
        for (bi, seq) in cache.tokens.iter().enumerate() {
            for (t, &tok) in seq.iter().enumerate() {
                let g = dx.row(bi * len + t);
                let mut tr = grads.weights.tok.row_mut(tok);
                tr += &g;
                let mut pr = grads.weights.pos.row_mut(t);
                pr += &g;
            }
        }
        Ok(grads)
    }

    fn block_backward(
        &self,
        l: usize,
        c: &BlockCache,
        dx2: Array2<f64>,
        b: usize,
        grads: &mut Gradients,
    ) -> Result<Array2<f64>> {
        let cfg = &self.config;
        let w = &self.weights.blocks[l];
        let (len, d, heads, dh) = (cfg.max_len, cfg.dim, cfg.heads, cfg.head_dim());

        // MLP sub-layer
        let mut dmlp = dx2.clone();
        if let Some(m) = &c.mlp.mask {
            dmlp *= m;
        }
        let dmlp = self.maybe_back(&c.mlp.mlp_diff, dmlp, grads)?;
        let mut dg = w.fc2.backward(&c.mlp.g, &dmlp, &mut grads.weights.blocks[l].fc2);
        ndarray::Zip::from(&mut dg)
            .and(&c.mlp.u)
            .and(&c.mlp.t)
            .for_each(|g, &u, &t| *g *= gelu_grad(u, t));
        let dh2 = w.fc1.backward(&c.mlp.h2, &dg, &mut grads.weights.blocks[l].fc1);
        let dm_src = w.ln2.backward(&c.mlp.ln2, &dh2, &mut grads.weights.blocks[l].ln2);
        let dx1 = dx2 + &self.maybe_back(&c.mlp.m_src_diff, dm_src, grads)?;

        // attention sub-layer
        let a = &c.attn;
        let mut dattn = dx1.clone();
        if let Some(m) = &a.mask {
            dattn *= m;
        }
        let dattn = self.maybe_back(&a.attn_diff, dattn, grads)?;
        let do_ = w.out.backward(&a.o, &dattn, &mut grads.weights.blocks[l].out);
        let do_ = self.maybe_back(&a.o_diff, do_, grads)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dqkv = Array2::zeros((b * len, 3 * d));
        let mut dv = Array2::zeros((b * len, d));
        for bi in 0..b {
            let rows = bi * len..(bi + 1) * len;
            for h in 0..heads {
                let p = &a.probs[bi * heads + h];
                let q = a.qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = a.qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
                let vv = a.v.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let dout: ArrayView2<f64> = do_.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let dp = dout.dot(&vv.t());
                dv.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh])
                    .assign(&p.t().dot(&dout));
                let mut ds = dp;
                for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot = drow.dot(&prow);
                    drow.zip_mut_with(&prow, |g, &pv| *g = pv * (*g - dot) * scale);
                }
                dqkv.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh])
                    .assign(&ds.dot(&k));
                dqkv.slice_mut(s![rows.clone(), d + h * dh..d + (h + 1) * dh])
                    .assign(&ds.t().dot(&q));
            }
        }
        let dv = self.maybe_back(&a.v_diff, dv, grads)?;
        dqkv.slice_mut(s![.., 2 * d..]).assign(&dv);
        let dh1 = w.qkv.backward(&a.h1, &dqkv, &mut grads.weights.blocks[l].qkv);
        let da_src = w.ln1.backward(&a.ln1, &dh1, &mut grads.weights.blocks[l].ln1);
        Ok(dx1 + &self.maybe_back(&a.a_src_diff, da_src, grads)?)
    }
}

/// Mean cross-entropy of `logits` against `labels` and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let mut p = logits.clone();
    softmax_rows(&mut p);
    let n = labels.len() as f64;
    let mut loss = 0.0;
    for (mut row, &y) in p.rows_mut().into_iter().zip(labels) {
        loss -= row[y].max(f64::MIN_POSITIVE).ln();
        row[y] -= 1.0;
        row /= n;
    }
    (loss / n, p)
}
