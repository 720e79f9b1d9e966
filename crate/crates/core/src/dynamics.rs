//! Explicit-Euler simulators for the reaction-diffusion-coupling gradient flow
//! and for synchronisation of diffusively coupled heads.
//!
//! The discrete energy is
//!
//! ```text
//! E[u] = sum_c [ (alpha/2) sum_i (u[i+1] - u[i])^2
//!              + sum_i F(u[i])
//!              + (beta/4) sum_{x,y} K(x,y) (u[x] - u[y])^2 ]
//! ```
//!
//! whose exact gradient is `-alpha Lap u + F'(u) + beta L_K[u]`, so one flow
//! step `u <- u - dt * grad E` is the discrete gradient flow.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::field::{dirichlet_energy, laplacian, CflCheck, SequenceField, StencilSpec};
use crate::matrix::DenseMatrix;
use crate::scalar::Scalar;
use crate::stats::linear_fit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PotentialKind {
    /// `F(u) = (mu/2) u^2`.
    Quadratic,
    /// `(mu/2) u^2 + (lambda/2)(u - u0)^2`.
    AnchoredQuadratic,
    /// `(mu/4)(u^2 - 1)^2 + (lambda/2)(u - u0)^2`; not convex.
    DoubleWellAnchored,
}

impl PotentialKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PotentialKind::Quadratic => "quadratic",
            PotentialKind::AnchoredQuadratic => "anchored-quadratic",
            PotentialKind::DoubleWellAnchored => "double-well-anchored",
        }
    }
}

impl fmt::Display for PotentialKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PotentialKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic" => Ok(PotentialKind::Quadratic),
            "anchored-quadratic" => Ok(PotentialKind::AnchoredQuadratic),
            "double-well-anchored" => Ok(PotentialKind::DoubleWellAnchored),
            other => Err(Error::InvalidArgument(format!("unknown potential '{other}'"))),
        }
    }
}

/// Pointwise reaction potential with an optional quadratic anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ReactionPotential<T> {
    pub kind: PotentialKind,
    pub mu: T,
    pub lambda_anchor: T,
    /// Anchor field `u0`; `None` anchors at zero.
    pub anchor: Option<SequenceField<T>>,
}

impl<T: Scalar> ReactionPotential<T> {
    pub fn quadratic(mu: T) -> Result<Self> {
        Self::build(PotentialKind::Quadratic, mu, T::zero(), None)
    }

    pub fn anchored_quadratic(mu: T, lambda_anchor: T, anchor: Option<SequenceField<T>>) -> Result<Self> {
        Self::build(PotentialKind::AnchoredQuadratic, mu, lambda_anchor, anchor)
    }

    pub fn double_well(mu: T, lambda_anchor: T, anchor: Option<SequenceField<T>>) -> Result<Self> {
        Self::build(PotentialKind::DoubleWellAnchored, mu, lambda_anchor, anchor)
    }

    fn build(kind: PotentialKind, mu: T, lambda_anchor: T, anchor: Option<SequenceField<T>>) -> Result<Self> {
        if !(mu > T::zero()) {
            return Err(Error::InvalidArgument(format!("mu = {mu} must be > 0")));
        }
        if !(lambda_anchor >= T::zero()) {
            return Err(Error::InvalidArgument(format!("lambda = {lambda_anchor} must be >= 0")));
        }
        Ok(Self {
            kind,
            mu,
            lambda_anchor,
            anchor,
        })
    }

    pub fn is_convex(&self) -> bool {
        self.kind != PotentialKind::DoubleWellAnchored
    }

    /// Curvature entering the explicit stability budget: `mu + lambda`.
    pub fn curvature_bound(&self) -> T {
        self.mu + self.lambda_anchor
    }

    fn anchor_at(&self, idx: usize) -> T {
        self.anchor.as_ref().map_or(T::zero(), |a| a.as_slice()[idx])
    }

    fn check_anchor(&self, u: &SequenceField<T>) -> Result<()> {
        match &self.anchor {
            Some(a) => a.expect_shape(u),
            None => Ok(()),
        }
    }

    fn pointwise(&self, v: T) -> (T, T) {
        let half = T::lit(0.5);
        match self.kind {
            PotentialKind::Quadratic | PotentialKind::AnchoredQuadratic => (half * self.mu * v * v, self.mu * v),
            PotentialKind::DoubleWellAnchored => {
                let w = v * v - T::one();
                (self.mu * w * w / T::lit(4.0), self.mu * v * w)
            }
        }
    }

    /// `sum F(u) + (lambda/2) |u - u0|^2` over all entries.
    pub fn energy(&self, u: &SequenceField<T>) -> Result<T> {
        self.check_anchor(u)?;
        let half = T::lit(0.5);
        Ok(u.as_slice()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let dv = v - self.anchor_at(i);
                self.pointwise(v).0 + half * self.lambda_anchor * dv * dv
            })
            .sum())
    }

    /// `F'(u) + lambda (u - u0)`.
    pub fn derivative(&self, u: &SequenceField<T>) -> Result<SequenceField<T>> {
        self.check_anchor(u)?;
        let mut out = u.clone();
        for (i, o) in out.as_mut_slice().iter_mut().enumerate() {
            let v = *o;
            *o = self.pointwise(v).1 + self.lambda_anchor * (v - self.anchor_at(i));
        }
        Ok(out)
    }
}

/// Symmetric, nonnegative, zero-diagonal interaction kernel with strength `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingKernel<T> {
    weights: DenseMatrix<T>,
    beta: T,
}

impl<T: Scalar> CouplingKernel<T> {
    pub fn new(weights: DenseMatrix<T>, beta: T) -> Result<Self> {
        validate_interaction(&weights, "coupling kernel")?;
        if !(beta >= T::zero()) {
            return Err(Error::InvalidArgument(format!("beta = {beta} must be >= 0")));
        }
        Ok(Self { weights, beta })
    }

    /// No coupling on a lattice of `len` points.
    pub fn none(len: usize) -> Self {
        Self {
            weights: DenseMatrix::zeros(len, len),
            beta: T::zero(),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.rows() == 0
    }

    pub fn weights(&self) -> &DenseMatrix<T> {
        &self.weights
    }

    pub fn beta(&self) -> T {
        self.beta
    }

    pub fn max_row_sum(&self) -> T {
        max_row_sum(&self.weights)
    }
}

fn max_row_sum<T: Scalar>(m: &DenseMatrix<T>) -> T {
    m.row_sums().into_iter().fold(T::zero(), T::max)
}

fn validate_interaction<T: Scalar>(m: &DenseMatrix<T>, what: &str) -> Result<()> {
    if m.rows() != m.cols() {
        return Err(shape_err(
            format!("square {what}"),
            format!("{}x{}", m.rows(), m.cols()),
        ));
    }
    if !m.is_symmetric() {
        return Err(Error::InvalidArgument(format!("{what} must be symmetric")));
    }
    if m.as_slice().iter().any(|&w| !(w >= T::zero()) || !w.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{what} entries must be finite and >= 0"
        )));
    }
    if (0..m.rows()).any(|i| m[(i, i)] != T::zero()) {
        return Err(Error::InvalidArgument(format!("{what} must have a zero diagonal")));
    }
    Ok(())
}

/// `out(x) = sum_y K(x,y) (u(x) - u(y))` per channel.
pub fn nonlocal_term<T: Scalar>(u: &SequenceField<T>, coupling: &CouplingKernel<T>) -> Result<SequenceField<T>> {
    if coupling.len() != u.len() {
        return Err(shape_err(format!("kernel of size {}", u.len()), coupling.len()));
    }
    let d = u.channels();
    let k = &coupling.weights;
    let row_sums = k.row_sums();
    let mut out = SequenceField::zeros(u.len(), d);
    for x in 0..u.len() {
        for c in 0..d {
            let pulled: T = (0..u.len()).map(|y| k[(x, y)] * u.get(y, c)).sum();
            out.set(x, c, row_sums[x] * u.get(x, c) - pulled);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig<T> {
    pub alpha_diff: T,
    pub potential: ReactionPotential<T>,
    pub coupling: CouplingKernel<T>,
    pub dt: T,
    pub steps: usize,
    pub check: CflCheck,
}

impl<T: Scalar> FlowConfig<T> {
    /// `dt * (4 alpha + mu + lambda + 2 beta max_row_sum(K))`; stepping is monotone below 2.
    pub fn stability_budget(&self) -> T {
        self.dt
            * (T::lit(4.0) * self.alpha_diff
                + self.potential.curvature_bound()
                + T::lit(2.0) * self.coupling.beta * self.coupling.max_row_sum())
    }

    fn validate(&self, u: &SequenceField<T>) -> Result<()> {
        if !(self.alpha_diff >= T::zero()) {
            return Err(Error::InvalidArgument("alpha_diff must be >= 0".into()));
        }
        if !(self.dt > T::zero()) {
            return Err(Error::InvalidArgument("dt must be > 0".into()));
        }
        if self.coupling.len() != u.len() {
            return Err(shape_err(format!("kernel of size {}", u.len()), self.coupling.len()));
        }
        self.potential.check_anchor(u)?;
        let budget = self.stability_budget();
        if self.check == CflCheck::Enforce && !(budget < T::lit(2.0)) {
            return Err(Error::StabilityBudget {
                budget: budget.as_f64(),
            });
        }
        Ok(())
    }
}

/// Discrete energy of `u` under `config` (see module docs).
pub fn energy_functional<T: Scalar>(u: &SequenceField<T>, config: &FlowConfig<T>) -> Result<T> {
    if config.coupling.len() != u.len() {
        return Err(shape_err(format!("kernel of size {}", u.len()), config.coupling.len()));
    }
    let tension = config.alpha_diff / T::lit(2.0) * dirichlet_energy(u);
    let reaction = config.potential.energy(u)?;
    let mut coupling = T::zero();
    if config.coupling.beta > T::zero() {
        let k = &config.coupling.weights;
        for c in 0..u.channels() {
            for x in 0..u.len() {
                for y in 0..u.len() {
                    let diff = u.get(x, c) - u.get(y, c);
                    coupling += k[(x, y)] * diff * diff;
                }
            }
        }
        coupling *= config.coupling.beta / T::lit(4.0);
    }
    Ok(tension + reaction + coupling)
}

/// `dE/du = -alpha Lap u + F'(u) + beta L_K[u]`; the flow velocity is its negative.
pub fn energy_gradient<T: Scalar>(u: &SequenceField<T>, config: &FlowConfig<T>) -> Result<SequenceField<T>> {
    let mut grad = config.potential.derivative(u)?;
    if config.alpha_diff > T::zero() {
        grad.axpy(-config.alpha_diff, &laplacian(u, StencilSpec::unit())?);
    }
    if config.coupling.beta > T::zero() {
        grad.axpy(config.coupling.beta, &nonlocal_term(u, &config.coupling)?);
    }
    Ok(grad)
}

/// Per-step energy, gradient norm and Dirichlet energy of a flow run.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyTrace<T> {
    pub dt: T,
    pub energy: Vec<T>,
    pub grad_norm: Vec<T>,
    pub dirichlet: Vec<T>,
}

impl<T: Scalar> EnergyTrace<T> {
    pub fn len(&self) -> usize {
        self.energy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energy.is_empty()
    }

    /// Largest relative per-step energy increase (0 when monotone).
    pub fn max_relative_increase(&self) -> T {
        self.energy.windows(2).fold(T::zero(), |worst, w| {
            let scale = w[0].abs().max(T::min_positive_value());
            worst.max((w[1] - w[0]) / scale)
        })
    }
}

/// Explicit-Euler gradient flow from `u0`; the trace has `steps + 1` entries.
pub fn run_flow<T: Scalar>(
    u0: &SequenceField<T>,
    config: &FlowConfig<T>,
) -> Result<(SequenceField<T>, EnergyTrace<T>)> {
    config.validate(u0)?;
    let mut trace = EnergyTrace {
        dt: config.dt,
        energy: Vec::with_capacity(config.steps + 1),
        grad_norm: Vec::with_capacity(config.steps + 1),
        dirichlet: Vec::with_capacity(config.steps + 1),
    };
    let mut u = u0.clone();
    for step in 0..=config.steps {
        let grad = energy_gradient(&u, config)?;
        trace.energy.push(energy_functional(&u, config)?);
        trace.grad_norm.push(grad.norm());
        trace.dirichlet.push(dirichlet_energy(&u));
        if step == config.steps {
            break;
        }
        u.axpy(-config.dt, &grad);
        u.check_finite()?;
    }
    Ok((u, trace))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit<T> {
    /// Slope of `ln |grad E|` against time.
    pub rate: T,
    /// Whether `rate <= -0.85 mu`.
    pub pass: bool,
}

/// Fits the decay rate of the gradient norm over the first half of the trace.
pub fn check_exponential_decay<T: Scalar>(trace: &EnergyTrace<T>, mu: T) -> Result<DecayFit<T>> {
    let window = trace.grad_norm.len() / 2 + 1;
    if trace.grad_norm.len() < 3 {
        return Err(Error::FitWindow(format!(
            "trace of {} entries is too short",
            trace.grad_norm.len()
        )));
    }
    let floor = T::lit(1e-14);
    if let Some(i) = trace.grad_norm[..window].iter().position(|&g| !(g > floor)) {
        return Err(Error::FitWindow(format!(
            "gradient norm {} at step {i} is below {floor}",
            trace.grad_norm[i]
        )));
    }
    let t: Vec<T> = (0..window).map(|i| trace.dt * T::from_usize_lossy(i)).collect();
    let logs: Vec<T> = trace.grad_norm[..window].iter().map(|g| g.ln()).collect();
    let fit = linear_fit(&t, &logs)?;
    Ok(DecayFit {
        rate: fit.slope,
        pass: fit.slope <= -mu * T::lit(0.85),
    })
}

/// Coupled per-head dynamics
/// `du_i/dt = alpha_i Lap u_i + sum_j beta_ij (u_j - u_i) - F_i'(u_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledSystemConfig<T> {
    pub alphas: Vec<T>,
    /// Symmetric, nonnegative, zero-diagonal `H x H` coupling strengths.
    pub beta: DenseMatrix<T>,
    /// Reaction per head; `None` means no reaction term.
    pub potentials: Vec<Option<ReactionPotential<T>>>,
    pub dt: T,
    pub steps: usize,
    pub check: CflCheck,
}

impl<T: Scalar> CoupledSystemConfig<T> {
    /// Pure consensus: no diffusion, no reaction.
    pub fn consensus(beta: DenseMatrix<T>, dt: T, steps: usize) -> Self {
        let heads = beta.rows();
        Self {
            alphas: vec![T::zero(); heads],
            beta,
            potentials: vec![None; heads],
            dt,
            steps,
            check: CflCheck::Enforce,
        }
    }

    pub fn heads(&self) -> usize {
        self.alphas.len()
    }

    /// `dt * (4 max alpha + max curvature + 2 max_row_sum(beta))`.
    pub fn stability_budget(&self) -> T {
        let alpha = self.alphas.iter().copied().fold(T::zero(), T::max);
        let curvature = self
            .potentials
            .iter()
            .flatten()
            .map(ReactionPotential::curvature_bound)
            .fold(T::zero(), T::max);
        self.dt * (T::lit(4.0) * alpha + curvature + T::lit(2.0) * max_row_sum(&self.beta))
    }

    /// Whether the graph with an edge wherever `beta_ij > 0` is connected.
    pub fn is_connected(&self) -> bool {
        let n = self.beta.rows();
        if n <= 1 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for (j, s) in seen.iter_mut().enumerate() {
                if !*s && self.beta[(i, j)] > T::zero() {
                    *s = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    fn validate(&self, initial: &[SequenceField<T>]) -> Result<()> {
        let h = self.heads();
        if h == 0 {
            return Err(Error::InvalidArgument("at least one head is required".into()));
        }
        if self.beta.rows() != h || self.potentials.len() != h || initial.len() != h {
            return Err(shape_err(
                format!("{h} heads"),
                format!(
                    "beta {}x{}, {} potentials, {} initial fields",
                    self.beta.rows(),
                    self.beta.cols(),
                    self.potentials.len(),
                    initial.len()
                ),
            ));
        }
        validate_interaction(&self.beta, "head coupling")?;
        for f in &initial[1..] {
            initial[0].expect_shape(f)?;
        }
        if self.alphas.iter().any(|&a| !(a >= T::zero())) || !(self.dt > T::zero()) {
            return Err(Error::InvalidArgument("alphas must be >= 0 and dt > 0".into()));
        }
        let budget = self.stability_budget();
        if self.check == CflCheck::Enforce && !(budget < T::lit(2.0)) {
            return Err(Error::StabilityBudget {
                budget: budget.as_f64(),
            });
        }
        Ok(())
    }
}

/// `V = 1/2 sum_{i,j} |u_i - u_j|^2` over ordered pairs.
pub fn disagreement<T: Scalar>(fields: &[SequenceField<T>]) -> T {
    let mut v = T::zero();
    for i in 0..fields.len() {
        for j in i + 1..fields.len() {
            v += fields[i]
                .as_slice()
                .iter()
                .zip(fields[j].as_slice())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>();
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncTrace<T> {
    pub dt: T,
    /// Disagreement `V` after each step, starting with the initial state.
    pub disagreement: Vec<T>,
    pub final_fields: Vec<SequenceField<T>>,
}

pub fn simulate_coupled_heads<T: Scalar>(
    config: &CoupledSystemConfig<T>,
    initial: &[SequenceField<T>],
) -> Result<SyncTrace<T>> {
    config.validate(initial)?;
    let h = config.heads();
    let mut fields = initial.to_vec();
    let mut trace = Vec::with_capacity(config.steps + 1);
    trace.push(disagreement(&fields));
    for _ in 0..config.steps {
        let mut next = fields.clone();
        for i in 0..h {
            let velocity = &mut next[i];
            velocity.as_mut_slice().fill(T::zero());
            if config.alphas[i] > T::zero() {
                velocity.axpy(config.alphas[i], &laplacian(&fields[i], StencilSpec::unit())?);
            }
            for j in 0..h {
                let b = config.beta[(i, j)];
                if b > T::zero() {
                    velocity.axpy(b, &fields[j]);
                    velocity.axpy(-b, &fields[i]);
                }
            }
            if let Some(p) = &config.potentials[i] {
                velocity.axpy(-T::one(), &p.derivative(&fields[i])?);
            }
        }
        for (u, v) in fields.iter_mut().zip(&next) {
            u.axpy(config.dt, v);
            u.check_finite()?;
        }
        trace.push(disagreement(&fields));
    }
    Ok(SyncTrace {
        dt: config.dt,
        disagreement: trace,
        final_fields: fields,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> SequenceField<f64> {
        SequenceField::from_column(v).unwrap()
    }

    fn pair_kernel() -> CouplingKernel<f64> {
        CouplingKernel::new(DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(), 1.0).unwrap()
    }

    fn config(alpha: f64, potential: ReactionPotential<f64>, coupling: CouplingKernel<f64>) -> FlowConfig<f64> {
        FlowConfig {
            alpha_diff: alpha,
            potential,
            coupling,
            dt: 0.05,
            steps: 10,
            check: CflCheck::Enforce,
        }
    }

    #[test]
    fn nonlocal_examples() {
        let out = nonlocal_term(&col(&[3.0, 1.0]), &pair_kernel()).unwrap();
        assert_eq!(out.as_slice(), &[2.0, -2.0]);
        let zero = nonlocal_term(&col(&[3.0, 1.0]), &CouplingKernel::none(2)).unwrap();
        assert_eq!(zero.as_slice(), &[0.0, 0.0]);
        let flat = nonlocal_term(&col(&[7.0, 7.0]), &pair_kernel()).unwrap();
        assert_eq!(flat.as_slice(), &[0.0, 0.0]);
        assert!(nonlocal_term(&col(&[1.0, 2.0, 3.0]), &pair_kernel()).is_err());
    }

    #[test]
    fn kernel_validation() {
        let asym = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.0]]).unwrap();
        assert!(CouplingKernel::new(asym, 1.0).is_err());
        let diag = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(CouplingKernel::new(diag, 1.0).is_err());
        let neg = DenseMatrix::from_rows(&[vec![0.0, -1.0], vec![-1.0, 0.0]]).unwrap();
        assert!(CouplingKernel::new(neg, 1.0).is_err());
    }

    #[test]
    fn energy_examples() {
        let q = ReactionPotential::quadratic(1.0).unwrap();
        let zero = SequenceField::zeros(5, 2);
        let cfg = config(0.7, q.clone(), CouplingKernel::none(5));
        assert_eq!(energy_functional(&zero, &cfg).unwrap(), 0.0);

        // tension only: ((1)^2 + (-1)^2) / 2; subtract the reaction part to isolate it
        let u = col(&[0.0, 1.0, 0.0]);
        let cfg = config(1.0, q.clone(), CouplingKernel::none(3));
        let reaction = q.energy(&u).unwrap();
        assert!((energy_functional(&u, &cfg).unwrap() - reaction - 1.0).abs() < 1e-15);
    }

    #[test]
    fn potentials() {
        let u = col(&[2.0]);
        let dw = ReactionPotential::double_well(1.0, 0.0, None).unwrap();
        assert_eq!(dw.energy(&u).unwrap(), 9.0 / 4.0);
        assert_eq!(dw.derivative(&u).unwrap().as_slice(), &[6.0]);
        assert!(!dw.is_convex());
        let aq = ReactionPotential::anchored_quadratic(1.0, 2.0, Some(col(&[1.0]))).unwrap();
        assert_eq!(aq.derivative(&u).unwrap().as_slice(), &[2.0 + 2.0]);
        assert!(ReactionPotential::quadratic(0.0).is_err());
        assert!(aq.energy(&col(&[1.0, 2.0])).is_err());
        assert_eq!(
            "double-well-anchored".parse::<PotentialKind>().unwrap(),
            PotentialKind::DoubleWellAnchored
        );
    }

    #[test]
    fn equilibrium_is_fixed() {
        // minimiser of (mu/2)u^2 + (lambda/2)(u - a)^2 is lambda a / (mu + lambda)
        let anchor = col(&[1.0, -2.0, 0.5]);
        let p = ReactionPotential::anchored_quadratic(1.0, 3.0, Some(anchor.clone())).unwrap();
        let u_star = anchor.scaled(3.0 / 4.0);
        let cfg = FlowConfig {
            steps: 50,
            ..config(0.0, p, CouplingKernel::none(3))
        };
        let (u, trace) = run_flow(&u_star, &cfg).unwrap();
        assert!(u.max_abs_diff(&u_star) < 1e-15);
        assert!(trace.energy.windows(2).all(|w| (w[1] - w[0]).abs() < 1e-15));
        assert_eq!(trace.len(), 51);
    }

    #[test]
    fn budget_enforced() {
        let cfg = FlowConfig {
            dt: 1.5,
            ..config(0.5, ReactionPotential::quadratic(1.0).unwrap(), CouplingKernel::none(3))
        };
        assert!(matches!(
            run_flow(&col(&[1.0, 0.0, 0.0]), &cfg),
            Err(Error::StabilityBudget { .. })
        ));
        let loose = FlowConfig {
            check: CflCheck::AllowUnstable,
            steps: 2,
            ..cfg
        };
        assert!(run_flow(&col(&[1.0, 0.0, 0.0]), &loose).is_ok());
    }

    #[test]
    fn decay_needs_usable_window() {
        let trace = EnergyTrace {
            dt: 0.1,
            energy: vec![0.0; 5],
            grad_norm: vec![0.0; 5],
            dirichlet: vec![0.0; 5],
        };
        assert!(matches!(check_exponential_decay(&trace, 1.0), Err(Error::FitWindow(_))));
    }

    #[test]
    fn two_head_hand_iteration() {
        let beta = DenseMatrix::from_rows(&[vec![0.0, 0.25], vec![0.25, 0.0]]).unwrap();
        let cfg = CoupledSystemConfig::consensus(beta, 1.0, 3);
        let init = [col(&[1.0]), col(&[0.0])];
        let trace = simulate_coupled_heads(&cfg, &init).unwrap();
        // one step: u1 = 1 - 0.25, u2 = 0 + 0.25; the gap halves every step
        let mut single = cfg.clone();
        single.steps = 1;
        let one = simulate_coupled_heads(&single, &init).unwrap();
        assert_eq!(one.final_fields[0].as_slice(), &[0.75]);
        assert_eq!(one.final_fields[1].as_slice(), &[0.25]);
        for w in trace.disagreement.windows(2) {
            assert!((w[1] / w[0] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn connectivity() {
        let ring = DenseMatrix::from_fn(
            4,
            4,
            |i, j| if (i + 1) % 4 == j || (j + 1) % 4 == i { 0.2 } else { 0.0 },
        );
        assert!(CoupledSystemConfig::consensus(ring, 1.0, 1).is_connected());
        let pairs = DenseMatrix::from_fn(4, 4, |i, j| if i != j && i / 2 == j / 2 { 0.2 } else { 0.0 });
        assert!(!CoupledSystemConfig::consensus(pairs, 1.0, 1).is_connected());
    }

    #[test]
    fn coupled_shape_errors() {
        let beta = DenseMatrix::from_rows(&[vec![0.0, 0.25], vec![0.25, 0.0]]).unwrap();
        let cfg = CoupledSystemConfig::consensus(beta, 1.0, 3);
        assert!(simulate_coupled_heads(&cfg, &[col(&[1.0])]).is_err());
        assert!(simulate_coupled_heads(&cfg, &[col(&[1.0]), col(&[1.0, 2.0])]).is_err());
    }
}
