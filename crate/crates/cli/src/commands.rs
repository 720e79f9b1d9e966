//! One function per subcommand. Each returns the CSV text (header line
//! included), summary lines and the list of failed checks.

use std::fmt::Write as _;
use std::time::Duration;

use nalgebra::DMatrix;
use pdelab_core::dynamics::{
    check_exponential_decay, run_flow, simulate_coupled_heads, CoupledSystemConfig, CouplingKernel, FlowConfig,
    PotentialKind, ReactionPotential,
};
use pdelab_core::layer::grad_check;
use pdelab_core::spectral::{dct_mode, eigenvalue, fit_multiscale_weights, gaussian_envelope_fit, heat_kernel};
use pdelab_core::{
    diffusion_step, dirichlet_energy, laplacian_matrix, BoundaryMode, CflCheck, Field, LayerParams, Matrix, StencilSpec,
};
use pdelab_transformer::model::{IntegrationPosition, Model, ModelConfig, PdeSettings};
use pdelab_transformer::positions::{evaluate_positions, ProtocolConfig};
use pdelab_transformer::retention::{estimate_retention, RetentionConfig};
use pdelab_transformer::tasks::{denoise_1d, listops_mini, DenoiseConfig, ListOpsConfig, TaskDataset, TaskKind};
use pdelab_transformer::train::{train, OptimizerKind, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::{bench_complexity, BenchConfig};
use crate::config::{Command, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::fmt_num;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Single-threaded and free of wall-clock values in the CSV.
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Outcome {
    pub csv: String,
    pub summary: Vec<String>,
    pub failures: Vec<String>,
}

impl Outcome {
    fn new(cfg: &ExperimentConfig, columns: &str) -> Self {
        Self {
            csv: format!("{}\n{columns}\n", cfg.header()),
            ..Self::default()
        }
    }

    fn row(&mut self, cells: &[String]) {
        self.csv.push_str(&cells.join(","));
        self.csv.push('\n');
    }

    fn check(&mut self, ok: bool, what: String) {
        if ok {
            self.summary.push(format!("ok: {what}"));
        } else {
            self.summary.push(format!("FAILED: {what}"));
            self.failures.push(what);
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn run(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Outcome> {
    match cfg.command() {
        Command::Spectrum => spectrum(cfg),
        Command::Stability => stability(cfg),
        Command::Heatkernel => heatkernel(cfg),
        Command::Fitscales => fitscales(cfg),
        Command::Flow => flow(cfg),
        Command::Sync => sync(cfg),
        Command::Gradcheck => gradcheck(cfg),
        Command::Train => train_cmd(cfg, opts),
        Command::RankPositions => rank_positions(cfg, opts),
        Command::Retention => retention(cfg),
        Command::BenchComplexity => bench(cfg),
    }
}

fn random_field(rng: &mut impl Rng, len: usize, d: usize) -> Field {
    Field::from_fn(len, d, |_, _| rng.random_range(-1.0..1.0))
}

fn join(values: &[f64]) -> String {
    values.iter().map(|&v| fmt_num(v)).collect::<Vec<_>>().join(";")
}

/// Eigenvalues of a symmetric matrix, descending, from a general-purpose dense solver.
pub fn dense_eigenvalues(m: &Matrix) -> Vec<f64> {
    let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let mut ev: Vec<f64> = dm.symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

fn spectrum(cfg: &ExperimentConfig) -> Result<Outcome> {
    let len: usize = cfg.get("L")?;
    let h: usize = cfg.get("h")?;
    let boundary: BoundaryMode = cfg.get("boundary")?;
    let tol: f64 = cfg.get("tol")?;
    if boundary == BoundaryMode::ReplicateClamp && h > 1 {
        return Err(CliError::InvalidValue {
            key: "boundary".into(),
            value: boundary.to_string(),
            reason: "clamped stencils at h > 1 are not symmetric and have no cosine eigenbasis".into(),
        });
    }
    let stencil = StencilSpec::new(h, boundary);
    stencil.validate(len)?;
    let dense = dense_eigenvalues(&laplacian_matrix(len, stencil)?);
    let mut closed: Vec<f64> = (0..len).map(|k| eigenvalue(len, k, h)).collect();
    closed.sort_by(|a, b| b.total_cmp(a));
    let mut out = Outcome::new(cfg, "k,lambda_closed,lambda_dense,abs_diff");
    let mut worst: f64 = 0.0;
    for (k, (c, d)) in closed.iter().zip(&dense).enumerate() {
        let diff = (c - d).abs();
        worst = worst.max(diff);
        out.row(&[k.to_string(), fmt_num(*c), fmt_num(*d), fmt_num(diff)]);
    }
    out.check(worst < tol, format!("max |closed - dense| = {worst:.3e} < {tol:e}"));
    Ok(out)
}

fn stability(cfg: &ExperimentConfig) -> Result<Outcome> {
    let len: usize = cfg.get("L")?;
    let d: usize = cfg.get("d")?;
    let alpha: f64 = cfg.get("alpha")?;
    let h: usize = cfg.get("h")?;
    let fields: usize = cfg.get("fields")?;
    let steps: usize = cfg.get("steps")?;
    let mode_steps: usize = cfg.get("mode_steps")?;
    let tol: f64 = cfg.get("tol")?;
    let seed: u64 = cfg.get("seed")?;
    let stencil = StencilSpec::new(h, BoundaryMode::NeumannReflect);
    let check = if alpha < 0.5 {
        CflCheck::Enforce
    } else {
        CflCheck::AllowUnstable
    };
    let mut out = Outcome::new(cfg, "trial,kind,initial_energy,final_energy,max_rel_increase,steps");

    let run = |x0: Field, n: usize| -> Result<(f64, f64, f64)> {
        let alphas = vec![alpha; x0.channels()];
        let mut x = x0;
        let e0 = dirichlet_energy(&x);
        let mut prev = e0;
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..n {
            x = diffusion_step(&x, &alphas, stencil, check)?;
            let e = dirichlet_energy(&x);
            worst = worst.max((e - prev) / prev.max(f64::MIN_POSITIVE));
            prev = e;
        }
        Ok((e0, prev, worst))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    for trial in 0..fields {
        let (e0, e1, worst) = run(random_field(&mut rng, len, d), steps)?;
        violations += usize::from(worst > tol);
        out.row(&[
            trial.to_string(),
            "random".into(),
            fmt_num(e0),
            fmt_num(e1),
            fmt_num(worst),
            steps.to_string(),
        ]);
    }
    let mode = Field::from_column(&dct_mode::<f64>(len, len - 1))?;
    let (m0, m1, mworst) = run(mode, mode_steps)?;
    out.row(&[
        fields.to_string(),
        "top-mode".into(),
        fmt_num(m0),
        fmt_num(m1),
        fmt_num(mworst),
        mode_steps.to_string(),
    ]);
    if alpha < 0.5 {
        out.check(
            violations == 0,
            format!("{violations} of {fields} random fields raised the energy by more than {tol:e}"),
        );
        out.check(m1 <= m0, format!("top mode energy {m1:.6e} <= initial {m0:.6e}"));
    } else {
        out.check(
            m1 > m0,
            format!("top mode energy grows above the threshold: {m0:.6e} -> {m1:.6e}"),
        );
    }
    Ok(out)
}

fn heatkernel(cfg: &ExperimentConfig) -> Result<Outcome> {
    let len: usize = cfg.get("L")?;
    let times: Vec<f64> = cfg.get_list("times")?;
    let s: f64 = cfg.get("s")?;
    let env_len: usize = cfg.get("envelope_L")?;
    let env_t: f64 = cfg.get("envelope_t")?;
    let mut out = Outcome::new(cfg, "check,L,t,value");
    let ks = heat_kernel::<f64>(len, s)?;
    for &t in &times {
        let k = heat_kernel::<f64>(len, t)?;
        let row_err = k.row_sums().iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
        let min_entry = k.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
        let semigroup = heat_kernel::<f64>(len, t + s)?.max_abs_diff(&k.matmul(&ks)?);
        for (name, v) in [
            ("row_sum_err", row_err),
            ("min_entry", min_entry),
            ("semigroup_err", semigroup),
        ] {
            out.row(&[name.into(), len.to_string(), fmt_num(t), fmt_num(v)]);
        }
        out.check(
            row_err < 1e-8,
            format!("t = {t}: max |row sum - 1| = {row_err:.2e} < 1e-8"),
        );
        out.check(
            min_entry >= -1e-10,
            format!("t = {t}: min entry {min_entry:.2e} >= -1e-10"),
        );
        out.check(
            semigroup < 1e-8,
            format!("t = {t}, s = {s}: semigroup error {semigroup:.2e} < 1e-8"),
        );
    }
    let window = (3.0 * (2.0 * env_t).sqrt()).floor() as usize;
    let fit = gaussian_envelope_fit(&heat_kernel::<f64>(env_len, env_t)?, env_len / 2, window)?;
    let expected = -1.0 / (4.0 * env_t);
    out.row(&[
        "envelope_slope".into(),
        env_len.to_string(),
        fmt_num(env_t),
        fmt_num(fit.slope),
    ]);
    out.row(&[
        "envelope_expected".into(),
        env_len.to_string(),
        fmt_num(env_t),
        fmt_num(expected),
    ]);
    out.check(
        (fit.slope - expected).abs() <= 0.25 * expected.abs(),
        format!("envelope slope {:.6e} within 25% of {expected:.6e}", fit.slope),
    );
    Ok(out)
}

fn fitscales(cfg: &ExperimentConfig) -> Result<Outcome> {
    let sets: Vec<Vec<usize>> = cfg.get_groups("scale_sets")?;
    let omega_max: f64 = cfg.get("omega_max")?;
    let grid: usize = cfg.get("grid")?;
    let mut out = Outcome::new(cfg, "scales,rms_error,weights");
    let mut errors = Vec::with_capacity(sets.len());
    for scales in &sets {
        let fit = fit_multiscale_weights::<f64>(scales, omega_max, grid)?;
        let names: Vec<String> = scales.iter().map(usize::to_string).collect();
        out.row(&[names.join(";"), fmt_num(fit.rms_error), join(&fit.weights)]);
        errors.push(fit.rms_error);
    }
    let decreasing = errors.windows(2).all(|w| w[1] < w[0]);
    out.check(
        decreasing,
        format!("RMS error strictly decreasing over {} scale sets", sets.len()),
    );
    Ok(out)
}

fn flow(cfg: &ExperimentConfig) -> Result<Outcome> {
    let len: usize = cfg.get("L")?;
    let d: usize = cfg.get("d")?;
    let kind: PotentialKind = cfg.get("potential")?;
    let mu: f64 = cfg.get("mu")?;
    let lambda: f64 = cfg.get("lambda")?;
    let beta: f64 = cfg.get("beta")?;
    let seed: u64 = cfg.get("seed")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchor = random_field(&mut rng, len, d);
    let potential = match kind {
        PotentialKind::Quadratic => ReactionPotential::quadratic(mu)?,
        PotentialKind::AnchoredQuadratic => ReactionPotential::anchored_quadratic(mu, lambda, Some(anchor))?,
        PotentialKind::DoubleWellAnchored => ReactionPotential::double_well(mu, lambda, Some(anchor))?,
    };
    let mut weights = Matrix::zeros(len, len);
    for i in 0..len {
        for j in 0..i {
            let w = rng.random_range(0.0..1.0);
            weights[(i, j)] = w;
            weights[(j, i)] = w;
        }
    }
    let config = FlowConfig {
        alpha_diff: cfg.get("alpha_diff")?,
        potential,
        coupling: CouplingKernel::new(weights, beta)?,
        dt: cfg.get("dt")?,
        steps: cfg.get("steps")?,
        check: CflCheck::Enforce,
    };
    let u0 = random_field(&mut rng, len, d).scaled(3.0);
    let (_, trace) = run_flow(&u0, &config)?;
    let mut out = Outcome::new(cfg, "step,time,energy,grad_norm,dirichlet");
    for i in 0..trace.len() {
        out.row(&[
            i.to_string(),
            fmt_num(i as f64 * trace.dt),
            fmt_num(trace.energy[i]),
            fmt_num(trace.grad_norm[i]),
            fmt_num(trace.dirichlet[i]),
        ]);
    }
    let rise = trace.max_relative_increase();
    if config.potential.is_convex() {
        out.check(
            rise <= 1e-9,
            format!("energy non-increasing (max relative rise {rise:.2e})"),
        );
    } else {
        out.summary.push(format!(
            "max relative energy rise {rise:.2e} (non-convex potential, not checked)"
        ));
    }
    if kind == PotentialKind::Quadratic {
        let fit = check_exponential_decay(&trace, mu)?;
        out.check(
            fit.pass,
            format!(
                "gradient-norm decay rate {:.4} <= -0.85 mu = {:.4}",
                fit.rate,
                -0.85 * mu
            ),
        );
    }
    Ok(out)
}

fn topology(name: &str, heads: usize, w: f64) -> Result<Matrix> {
    let m = match name {
        "ring" => Matrix::from_fn(heads, heads, |i, j| {
            if i != j && ((i + 1) % heads == j || (j + 1) % heads == i) {
                w
            } else {
                0.0
            }
        }),
        "pairs" if heads.is_multiple_of(2) => {
            Matrix::from_fn(heads, heads, |i, j| if i != j && i / 2 == j / 2 { w } else { 0.0 })
        }
        "complete" => Matrix::from_fn(heads, heads, |i, j| if i != j { w } else { 0.0 }),
        _ => {
            return Err(CliError::InvalidValue {
                key: "topology".into(),
                value: name.into(),
                reason: "expected ring, complete, or pairs with an even head count".into(),
            })
        }
    };
    Ok(m)
}

fn sync(cfg: &ExperimentConfig) -> Result<Outcome> {
    let heads: usize = cfg.get("heads")?;
    let topo: String = cfg.get("topology")?;
    let len: usize = cfg.get("L")?;
    let d: usize = cfg.get("d")?;
    let mu: f64 = cfg.get("mu")?;
    let seed: u64 = cfg.get("seed")?;
    let beta = topology(&topo, heads, cfg.get("coupling")?)?;
    let config = CoupledSystemConfig {
        alphas: vec![cfg.get("alpha")?; heads],
        potentials: vec![
            if mu > 0.0 {
                Some(ReactionPotential::quadratic(mu)?)
            } else {
                None
            };
            heads
        ],
        ..CoupledSystemConfig::consensus(beta, cfg.get("dt")?, cfg.get("steps")?)
    };
    let connected = config.is_connected();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // the pairs topology gets separated component means so the plateau is visible
    let init: Vec<Field> = (0..heads)
        .map(|i| {
            let mut f = random_field(&mut rng, len, d).scaled(0.3);
            if topo == "pairs" {
                f.axpy(1.0, &Field::constant(len, d, (i / 2) as f64));
            }
            f
        })
        .collect();
    let trace = simulate_coupled_heads(&config, &init)?;
    let v = &trace.disagreement;
    let mut out = Outcome::new(cfg, "step,time,disagreement");
    for (i, &x) in v.iter().enumerate() {
        out.row(&[i.to_string(), fmt_num(i as f64 * trace.dt), fmt_num(x)]);
    }
    let (v0, vn) = (v[0], v[v.len() - 1]);
    let monotone = v.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-24 * v0);
    out.check(monotone, "disagreement non-increasing".into());
    if connected {
        out.check(
            vn < 1e-6 * v0,
            format!("connected: final/initial = {:.3e} < 1e-6", vn / v0),
        );
    } else {
        out.check(
            vn > 0.1 * v0,
            format!("disconnected: final/initial = {:.3e} > 0.1", vn / v0),
        );
    }
    Ok(out)
}

fn gradcheck(cfg: &ExperimentConfig) -> Result<Outcome> {
    let len: usize = cfg.get("L")?;
    let d: usize = cfg.get("d")?;
    let trials: usize = cfg.get("trials")?;
    let post_norm: bool = cfg.get("post_norm")?;
    let tol: f64 = cfg.get("tol")?;
    let seed: u64 = cfg.get("seed")?;
    let base = LayerParams::with_scales(d, cfg.get_list("scales")?, cfg.get_list("mix_weights")?)?
        .with_uniform_alpha(cfg.get("alpha")?)?
        .with_post_norm(post_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Outcome::new(cfg, "trial,rel_err");
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let mut p = base.clone();
        for r in p.raw_alpha_mut() {
            *r += rng.random_range(-1.0..1.0);
        }
        for w in p.mix_weights_mut() {
            *w += rng.random_range(-0.2..0.2);
        }
        let x = random_field(&mut rng, len, d);
        let err = grad_check(&p, &x, 1, seed.wrapping_add(trial as u64))?;
        worst = worst.max(err);
        out.row(&[trial.to_string(), fmt_num(err)]);
    }
    if worst < tol {
        out.summary.push(format!("max_rel_err < {tol:e}"));
    } else {
        out.summary.push(format!("max_rel_err = {worst:.3e} >= {tol:e}"));
        out.failures.push(format!("max_rel_err {worst:.3e} >= {tol:e}"));
    }
    out.summary
        .push(format!("worst relative error {worst:.3e} over {trials} trials"));
    Ok(out)
}

/// Dataset named by the `task` keys.
pub fn dataset_from(cfg: &ExperimentConfig) -> Result<TaskDataset> {
    let kind: TaskKind = cfg.get("task")?;
    let (n_train, n_val, seed) = (cfg.get("train_size")?, cfg.get("val_size")?, cfg.get("data_seed")?);
    Ok(match kind {
        TaskKind::ListopsMini => listops_mini(n_train, n_val, seed, &ListOpsConfig::default())?,
        TaskKind::Denoise1d => denoise_1d(n_train, n_val, seed, &DenoiseConfig::default())?,
    })
}

/// Model settings from the model keys; `position` and `seed` are filled in by the caller.
pub fn model_config_from(cfg: &ExperimentConfig, data: &TaskDataset) -> Result<ModelConfig> {
    Ok(ModelConfig {
        dim: cfg.get("dim")?,
        layers: cfg.get("layers")?,
        heads: cfg.get("heads")?,
        mlp_hidden: cfg.get("mlp_hidden")?,
        vocab: data.vocab,
        max_len: data.max_len,
        num_classes: data.num_classes,
        position: IntegrationPosition::None,
        pde: PdeSettings {
            scales: cfg.get_list("pde_scales")?,
            mix_weights: cfg.get_list("pde_mix")?,
            alpha: cfg.get("pde_alpha")?,
            post_norm: cfg.get("post_norm")?,
            boundary: cfg.get("boundary")?,
            tied: false,
            identity_limit: cfg.get("identity_limit")?,
        },
        dropout: cfg.get("dropout")?,
        seed: cfg.get("seed")?,
    })
}

pub fn train_config_from(cfg: &ExperimentConfig) -> Result<TrainConfig> {
    let tc = TrainConfig {
        epochs: cfg.get("epochs")?,
        batch: cfg.get("batch")?,
        lr: cfg.get("lr")?,
        seed: cfg.get("seed")?,
        optimizer: cfg.get::<OptimizerKind>("optimizer")?,
        momentum: cfg.get("momentum")?,
        weight_decay: cfg.get("weight_decay")?,
        clip_norm: cfg.get_opt("clip")?,
        warmup_cosine: cfg.get_opt("warmup")?,
        freeze_pde: cfg.get::<bool>("freeze_pde")? || cfg.get::<bool>("identity_limit")?,
        target_accuracy: cfg.get_opt("target_acc")?,
        ..TrainConfig::default()
    };
    tc.validate()?;
    Ok(tc)
}

fn train_cmd(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Outcome> {
    let data = dataset_from(cfg)?;
    let mut mc = model_config_from(cfg, &data)?;
    mc.position = cfg.get("position")?;
    let tc = train_config_from(cfg)?;
    let mut model = Model::new(mc)?;
    let report = train(&mut model, &data, &tc)?;
    let mut out = Outcome::new(cfg, "epoch,loss,val_acc,sec");
    for e in &report.epochs {
        let sec = if opts.deterministic { 0.0 } else { e.sec };
        out.row(&[e.epoch.to_string(), fmt_num(e.loss), fmt_num(e.val_acc), fmt_num(sec)]);
    }
    out.summary.push(format!(
        "{} epochs, final val acc {:.4}, best {:.4}, majority class {:.4}, {} parameters",
        report.epochs.len(),
        report.final_val_acc(),
        report.best_val_acc(),
        report.majority_baseline,
        model.param_count()
    ));
    if let Some(a) = report.audit {
        out.summary.push(format!(
            "diffusion coefficients over {} audits: alpha in [{:.3e}, {:.3e}], max effective sum {:.6}",
            a.checks, a.min_alpha, a.max_alpha, a.max_effective_sum
        ));
        out.check(a.violations == 0, format!("{} CFL violations", a.violations));
    }
    Ok(out)
}

fn rank_positions(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Outcome> {
    let data = dataset_from(cfg)?;
    let model = model_config_from(cfg, &data)?;
    let train = train_config_from(cfg)?;
    let positions = match cfg.get::<String>("positions")?.as_str() {
        "all" => IntegrationPosition::ALL.to_vec(),
        _ => cfg.get_list("positions")?,
    };
    let protocol = ProtocolConfig {
        identity_limit: model.pde.identity_limit,
        positions,
        jobs: if opts.deterministic { 1 } else { cfg.get("jobs")? },
        ..ProtocolConfig::new(model, train, cfg.get_list("seeds")?)
    };
    let table = evaluate_positions(&protocol, &data)?;
    let mut out = Outcome::new(cfg, "rank,position,mean_acc,std_acc,seeds,cfl_violations,params");
    for (i, r) in table.rows.iter().enumerate() {
        out.row(&[
            (i + 1).to_string(),
            r.position.to_string(),
            fmt_num(r.mean),
            fmt_num(r.std),
            r.accuracies.len().to_string(),
            r.cfl_violations.to_string(),
            r.param_count.to_string(),
        ]);
        out.summary.push(format!(
            "{:>2}. {:<17} {:.4} +- {:.4}",
            i + 1,
            r.position,
            r.mean,
            r.std
        ));
    }
    out.summary
        .push(format!("majority class {:.4}", table.majority_baseline));
    let violations: usize = table.rows.iter().map(|r| r.cfl_violations).sum();
    out.check(violations == 0, format!("{violations} CFL violations across all runs"));
    if protocol.identity_limit {
        out.check(
            table.all_overlap_baseline(),
            "identity limit: every row within one std of the baseline".into(),
        );
    }
    Ok(out)
}

fn retention(cfg: &ExperimentConfig) -> Result<Outcome> {
    let smoothing = LayerParams::with_scales(2, cfg.get_list("scales")?, cfg.get_list("mix_weights")?)?
        .with_uniform_alpha(cfg.get("alpha")?)?;
    let base = RetentionConfig {
        depth: cfg.get("depth")?,
        trials: cfg.get("trials")?,
        bins: cfg.get("bins")?,
        flip_prob: cfg.get("flip_prob")?,
        len: cfg.get("len")?,
        seed: cfg.get("seed")?,
        projection_seed: cfg.get("projection_seed")?,
    };
    let reps: usize = cfg.get("repetitions")?;
    let mut out = Outcome::new(cfg, "repetition,depth,rho,info_raw,info_smoothed,trials");
    let mut non_increasing = 0;
    for r in 0..reps {
        let c = RetentionConfig {
            seed: base.seed.wrapping_add(r as u64),
            ..base.clone()
        };
        let est = estimate_retention(&c, &smoothing)?;
        for d in &est.dropped {
            out.summary.push(format!(
                "warning: repetition {r}: depth {d} dropped, I(X;Y) below threshold"
            ));
        }
        for i in 0..est.depths.len() {
            out.row(&[
                r.to_string(),
                est.depths[i].to_string(),
                fmt_num(est.rho[i]),
                fmt_num(est.info_raw[i]),
                fmt_num(est.info_smoothed[i]),
                est.trials.to_string(),
            ]);
        }
        non_increasing += usize::from(est.spearman.is_some_and(|s| s <= 0.0));
        let mut line = format!("repetition {r}: rho = [");
        for (i, v) in est.rho.iter().enumerate() {
            let _ = write!(line, "{}{v:.4}", if i > 0 { ", " } else { "" });
        }
        let _ = write!(line, "], spearman {:?}", est.spearman);
        out.summary.push(line);
    }
    out.summary.push(format!(
        "spearman(depth, rho) <= 0 in {non_increasing} of {reps} repetitions ({:.1}%)",
        100.0 * non_increasing as f64 / reps.max(1) as f64
    ));
    Ok(out)
}

fn bench(cfg: &ExperimentConfig) -> Result<Outcome> {
    let bc = BenchConfig {
        lengths: cfg.get_list("lengths")?,
        attention_lengths: cfg.get_list("attention_lengths")?,
        d: cfg.get("d")?,
        k: cfg.get("K")?,
        k_length: cfg.get("k_length")?,
        reps: cfg.get("reps")?,
        min_sample: Duration::from_secs_f64(cfg.get::<f64>("min_sample_ms")? * 1e-3),
    };
    let report = bench_complexity(&bc)?;
    let mut out = Outcome::new(cfg, "");
    out.csv = format!("{}\n", cfg.header());
    let mut body = Vec::new();
    report.write_csv(&mut body)?;
    out.csv.push_str(&String::from_utf8(body).expect("ascii csv"));
    for w in &report.warnings {
        out.summary.push(format!("warning: {w}"));
    }
    for (what, ok) in report.checks() {
        out.check(ok, what);
    }
    Ok(out)
}
