//! Sequence fields and the discrete Laplacian / explicit diffusion primitives.
//!
//! A [`SequenceField`] stores `len x channels` values row-major: the lattice
//! runs along positions, and every channel is diffused independently.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::matrix::DenseMatrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceField<T> {
    len: usize,
    channels: usize,
    values: Vec<T>,
}

impl<T: Scalar> SequenceField<T> {
    /// Builds a field from row-major values. Rejects empty shapes and non-finite entries.
    pub fn new(len: usize, channels: usize, values: Vec<T>) -> Result<Self> {
        if len == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "field shape {len}x{channels} must be at least 1x1"
            )));
        }
        if values.len() != len * channels {
            return Err(shape_err(len * channels, values.len()));
        }
        let field = Self { len, channels, values };
        field.check_finite()?;
        Ok(field)
    }

    pub fn zeros(len: usize, channels: usize) -> Self {
        assert!(len > 0 && channels > 0, "field shape must be at least 1x1");
        Self {
            len,
            channels,
            values: vec![T::zero(); len * channels],
        }
    }

    pub fn constant(len: usize, channels: usize, value: T) -> Self {
        let mut f = Self::zeros(len, channels);
        f.values.fill(value);
        f
    }

    /// `f(position, channel)` for every entry.
    pub fn from_fn(len: usize, channels: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut out = Self::zeros(len, channels);
        for i in 0..len {
            for c in 0..channels {
                out.values[i * channels + c] = f(i, c);
            }
        }
        out
    }

    /// Single-channel field.
    pub fn from_column(column: &[T]) -> Result<Self> {
        Self::new(column.len(), 1, column.to_vec())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    /// Always false: fields have at least one position.
    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn get(&self, position: usize, channel: usize) -> T {
        self.values[position * self.channels + channel]
    }

    #[inline]
    pub fn set(&mut self, position: usize, channel: usize, value: T) {
        self.values[position * self.channels + channel] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    pub fn row(&self, position: usize) -> &[T] {
        &self.values[position * self.channels..(position + 1) * self.channels]
    }

    pub fn column(&self, channel: usize) -> Vec<T> {
        (0..self.len).map(|i| self.get(i, channel)).collect()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.len == other.len && self.channels == other.channels
    }

    pub(crate) fn expect_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(shape_err(
                format!("{}x{}", self.len, self.channels),
                format!("{}x{}", other.len, other.channels),
            ))
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(idx) => Err(Error::NonFinite {
                position: idx / self.channels,
                channel: idx % self.channels,
            }),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            len: self.len,
            channels: self.channels,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    /// `self += factor * other`.
    pub fn axpy(&mut self, factor: T, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += factor * b;
        }
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Self) -> T {
        self.values.iter().zip(&other.values).map(|(&a, &b)| a * b).sum()
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn channel_sums(&self) -> Vec<T> {
        let mut sums = vec![T::zero(); self.channels];
        for row in self.values.chunks_exact(self.channels) {
            for (s, &v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    pub fn channel_means(&self) -> Vec<T> {
        let n = T::from_usize_lossy(self.len);
        self.channel_sums().into_iter().map(|s| s / n).collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }
}

/// How a stencil resolves neighbours that fall outside `[0, len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum BoundaryMode {
    /// Half-sample symmetric reflection: index `-1` maps to `0`, `len` maps to `len - 1`.
    /// Symmetric and mass conserving at every scale; diagonalised by the DCT-II basis.
    #[default]
    NeumannReflect,
    /// Index clamping to the nearest end. Equals `NeumannReflect` at scale 1.
    ReplicateClamp,
}

impl BoundaryMode {
    pub const ALL: [BoundaryMode; 2] = [BoundaryMode::NeumannReflect, BoundaryMode::ReplicateClamp];

    pub fn as_str(self) -> &'static str {
        match self {
            BoundaryMode::NeumannReflect => "neumann-reflect",
            BoundaryMode::ReplicateClamp => "replicate-clamp",
        }
    }

    #[inline]
    fn resolve(self, index: isize, len: usize) -> usize {
        let n = len as isize;
        match self {
            BoundaryMode::ReplicateClamp => index.clamp(0, n - 1) as usize,
            BoundaryMode::NeumannReflect => {
                let m = index.rem_euclid(2 * n);
                if m < n {
                    m as usize
                } else {
                    (2 * n - 1 - m) as usize
                }
            }
        }
    }
}

impl fmt::Display for BoundaryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BoundaryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neumann-reflect" => Ok(BoundaryMode::NeumannReflect),
            "replicate-clamp" => Ok(BoundaryMode::ReplicateClamp),
            other => Err(Error::InvalidArgument(format!("unknown boundary mode '{other}'"))),
        }
    }
}

/// Step size `h` and boundary rule of a three-point Laplacian `x[i-h] - 2x[i] + x[i+h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StencilSpec {
    pub scale: usize,
    pub boundary: BoundaryMode,
}

impl StencilSpec {
    pub fn new(scale: usize, boundary: BoundaryMode) -> Self {
        Self { scale, boundary }
    }

    /// Unit-step stencil with reflective ends.
    pub fn unit() -> Self {
        Self::new(1, BoundaryMode::NeumannReflect)
    }

    /// Checks `1 <= scale < len`. A length-1 lattice is accepted for any scale
    /// and treated as having no neighbours.
    pub fn validate(&self, len: usize) -> Result<()> {
        if len == 1 || (self.scale >= 1 && self.scale < len) {
            Ok(())
        } else {
            Err(Error::InvalidStencil { scale: self.scale, len })
        }
    }

    #[inline]
    fn neighbours(&self, i: usize, len: usize) -> (usize, usize) {
        let h = self.scale as isize;
        let i = i as isize;
        (self.boundary.resolve(i - h, len), self.boundary.resolve(i + h, len))
    }
}

impl Default for StencilSpec {
    fn default() -> Self {
        Self::unit()
    }
}

/// Writes the stencil applied to `x` (row-major `len x channels`) into `out`.
/// Caller guarantees shapes and a validated stencil.
pub(crate) fn apply_stencil_into<T: Scalar>(x: &[T], len: usize, channels: usize, stencil: StencilSpec, out: &mut [T]) {
    if len == 1 {
        out.fill(T::zero());
        return;
    }
    let two = T::lit(2.0);
    let h = stencil.scale;
    let d = channels;
    let row = |i: usize, lo: usize, hi: usize, out: &mut [T]| {
        let (xl, xc, xr) = (&x[lo * d..lo * d + d], &x[i * d..i * d + d], &x[hi * d..hi * d + d]);
        for (((o, &l), &c), &r) in out[i * d..i * d + d].iter_mut().zip(xl).zip(xc).zip(xr) {
            *o = l - two * c + r;
        }
    };
    for i in 0..len {
        if i >= h && i + h < len {
            row(i, i - h, i + h, out);
        } else {
            let (lo, hi) = stencil.neighbours(i, len);
            row(i, lo, hi, out);
        }
    }
}

/// Adds `coef[c] * (stencil applied to x)` to `out`, channel by channel.
/// With `from_x` set, `out` is overwritten with `x + coef * (stencil applied to x)` instead.
pub(crate) fn accumulate_stencil_into<T: Scalar>(
    x: &[T],
    len: usize,
    channels: usize,
    stencil: StencilSpec,
    coef: &[T],
    from_x: bool,
    out: &mut [T],
) {
    if len == 1 {
        if from_x {
            out.copy_from_slice(x);
        }
        return;
    }
    let two = T::lit(2.0);
    let h = stencil.scale;
    let d = channels;
    for i in 0..len {
        let (lo, hi) = if i >= h && i + h < len {
            (i - h, i + h)
        } else {
            stencil.neighbours(i, len)
        };
        let (xl, xc, xr) = (&x[lo * d..lo * d + d], &x[i * d..i * d + d], &x[hi * d..hi * d + d]);
        for ((((o, &l), &c), &r), &a) in out[i * d..i * d + d].iter_mut().zip(xl).zip(xc).zip(xr).zip(coef) {
            let base = if from_x { c } else { *o };
            *o = base + a * (l - two * c + r);
        }
    }
}

/// Writes the transpose of the stencil operator applied to `g` into `out`.
pub(crate) fn apply_stencil_transpose_into<T: Scalar>(
    g: &[T],
    len: usize,
    channels: usize,
    stencil: StencilSpec,
    out: &mut [T],
) {
    if stencil.boundary == BoundaryMode::NeumannReflect {
        // reflected stencils are symmetric
        apply_stencil_into(g, len, channels, stencil, out);
        return;
    }
    out.fill(T::zero());
    if len == 1 {
        return;
    }
    let two = T::lit(2.0);
    let d = channels;
    for i in 0..len {
        let (lo, hi) = stencil.neighbours(i, len);
        for c in 0..d {
            let gi = g[i * d + c];
            out[lo * d + c] += gi;
            out[hi * d + c] += gi;
            out[i * d + c] -= two * gi;
        }
    }
}

/// Discrete Laplacian at the given scale, applied per channel.
pub fn laplacian<T: Scalar>(field: &SequenceField<T>, stencil: StencilSpec) -> Result<SequenceField<T>> {
    stencil.validate(field.len)?;
    let mut out = SequenceField::zeros(field.len, field.channels);
    apply_stencil_into(&field.values, field.len, field.channels, stencil, &mut out.values);
    out.check_finite()?;
    Ok(out)
}

/// Transpose of [`laplacian`]; identical to it for reflective boundaries.
pub fn laplacian_transpose<T: Scalar>(field: &SequenceField<T>, stencil: StencilSpec) -> Result<SequenceField<T>> {
    stencil.validate(field.len)?;
    let mut out = SequenceField::zeros(field.len, field.channels);
    apply_stencil_transpose_into(&field.values, field.len, field.channels, stencil, &mut out.values);
    out.check_finite()?;
    Ok(out)
}

/// Dense `len x len` matrix `M` with `laplacian(X) = M X` column-wise.
pub fn laplacian_matrix<T: Scalar>(len: usize, stencil: StencilSpec) -> Result<DenseMatrix<T>> {
    if len == 0 {
        return Err(Error::InvalidArgument("lattice length must be positive".into()));
    }
    stencil.validate(len)?;
    let mut m = DenseMatrix::zeros(len, len);
    if len == 1 {
        return Ok(m);
    }
    for i in 0..len {
        let (lo, hi) = stencil.neighbours(i, len);
        m[(i, lo)] += T::one();
        m[(i, hi)] += T::one();
        m[(i, i)] -= T::lit(2.0);
    }
    Ok(m)
}

/// Whether [`diffusion_step`] enforces the CFL bound on its coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CflCheck {
    #[default]
    Enforce,
    /// Accept any coefficient; used to build counterexamples.
    AllowUnstable,
}

/// One explicit step `X + alpha * laplacian(X)` with a per-channel coefficient.
///
/// With [`CflCheck::Enforce`] every coefficient must lie in `(0, 0.5)`.
pub fn diffusion_step<T: Scalar>(
    field: &SequenceField<T>,
    alpha: &[T],
    stencil: StencilSpec,
    check: CflCheck,
) -> Result<SequenceField<T>> {
    if alpha.len() != field.channels {
        return Err(shape_err(format!("{} coefficients", field.channels), alpha.len()));
    }
    if check == CflCheck::Enforce {
        let half = T::lit(0.5);
        if let Some(&bad) = alpha.iter().find(|&&a| !(a > T::zero() && a < half)) {
            return Err(Error::CflViolation { alpha: bad.as_f64() });
        }
    }
    let lap = laplacian(field, stencil)?;
    let mut out = field.clone();
    for (row_out, row_lap) in out
        .values
        .chunks_exact_mut(field.channels)
        .zip(lap.values.chunks_exact(field.channels))
    {
        for ((o, &l), &a) in row_out.iter_mut().zip(row_lap).zip(alpha) {
            *o += a * l;
        }
    }
    out.check_finite()?;
    Ok(out)
}

/// `sum over channels of X^T (-Delta_N) X`, i.e. the summed squared forward differences.
pub fn dirichlet_energy<T: Scalar>(field: &SequenceField<T>) -> T {
    let d = field.channels;
    field
        .values
        .chunks_exact(d)
        .zip(field.values.chunks_exact(d).skip(1))
        .map(|(prev, next)| next.iter().zip(prev).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> SequenceField<f64> {
        SequenceField::from_column(v).unwrap()
    }

    #[test]
    fn two_point_boundary_rows() {
        let (a, b) = (1.5, -0.25);
        let out = laplacian(&col(&[a, b]), StencilSpec::unit()).unwrap();
        assert_eq!(out.as_slice(), &[b - a, a - b]);
    }

    #[test]
    fn four_point_example() {
        // rows of the L=4 Neumann matrix: [-1,1,0,0],[1,-2,1,0],[0,1,-2,1],[0,0,1,-1]
        let out = laplacian(&col(&[1.0, 2.0, 4.0, 8.0]), StencilSpec::unit()).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 1.0, 2.0, -4.0]);
    }

    #[test]
    fn boundary_modes_agree_at_unit_scale() {
        let f = SequenceField::from_fn(9, 3, |i, c| ((i * 7 + c * 3) % 5) as f64 - 1.3);
        let a = laplacian(&f, StencilSpec::new(1, BoundaryMode::NeumannReflect)).unwrap();
        let b = laplacian(&f, StencilSpec::new(1, BoundaryMode::ReplicateClamp)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_field_has_zero_laplacian() {
        for h in [1, 2, 4] {
            for mode in BoundaryMode::ALL {
                let f = SequenceField::constant(11, 2, 3.25);
                let out = laplacian(&f, StencilSpec::new(h, mode)).unwrap();
                assert!(out.as_slice().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn small_matrices() {
        let m2: DenseMatrix<f64> = laplacian_matrix(2, StencilSpec::unit()).unwrap();
        assert_eq!(m2.as_slice(), &[-1.0, 1.0, 1.0, -1.0]);
        let m3: DenseMatrix<f64> = laplacian_matrix(3, StencilSpec::unit()).unwrap();
        assert_eq!(m3.as_slice(), &[-1.0, 1.0, 0.0, 1.0, -2.0, 1.0, 0.0, 1.0, -1.0]);
    }

    #[test]
    fn clamp_is_not_symmetric_beyond_unit_scale() {
        // index clamping sends both i=0 and i=1 to neighbour 0 at h=2,
        // so M[1][0] = 1 while M[0][1] = 0
        let m: DenseMatrix<f64> = laplacian_matrix(4, StencilSpec::new(2, BoundaryMode::ReplicateClamp)).unwrap();
        assert_eq!(m[(1, 0)], 1.0);
        assert_eq!(m[(0, 1)], 0.0);
        assert!(m.row_sums().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn scale_must_be_below_length() {
        let f = SequenceField::<f64>::zeros(4, 1);
        assert_eq!(
            laplacian(&f, StencilSpec::new(4, BoundaryMode::NeumannReflect)),
            Err(Error::InvalidStencil { scale: 4, len: 4 })
        );
        assert!(laplacian(&f, StencilSpec::new(0, BoundaryMode::NeumannReflect)).is_err());
    }

    #[test]
    fn length_one_is_degenerate() {
        let f = col(&[5.0]);
        assert_eq!(laplacian(&f, StencilSpec::unit()).unwrap().as_slice(), &[0.0]);
        let stepped = diffusion_step(&f, &[0.3], StencilSpec::unit(), CflCheck::Enforce).unwrap();
        assert_eq!(stepped, f);
    }

    #[test]
    fn cfl_guard() {
        let f = col(&[0.0, 1.0, 0.0]);
        for a in [0.0, 0.5, 0.51, -0.1] {
            assert!(matches!(
                diffusion_step(&f, &[a], StencilSpec::unit(), CflCheck::Enforce),
                Err(Error::CflViolation { .. })
            ));
        }
        let same = diffusion_step(&f, &[0.0], StencilSpec::unit(), CflCheck::AllowUnstable).unwrap();
        assert_eq!(same, f);
        assert!(diffusion_step(&f, &[0.1, 0.1], StencilSpec::unit(), CflCheck::Enforce).is_err());
    }

    #[test]
    fn dirichlet_energy_examples() {
        assert_eq!(dirichlet_energy(&col(&[0.0, 1.0, 0.0])), 2.0);
        assert_eq!(dirichlet_energy(&col(&[0.0, 1.0])), 1.0);
        assert_eq!(dirichlet_energy(&SequenceField::constant(7, 3, -2.0)), 0.0);
        assert_eq!(dirichlet_energy(&col(&[4.0])), 0.0);
    }

    #[test]
    fn rejects_non_finite_input() {
        assert!(SequenceField::new(2, 1, vec![1.0, f64::NAN]).is_err());
        assert!(SequenceField::<f64>::new(0, 1, vec![]).is_err());
        assert!(SequenceField::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn boundary_mode_round_trips_through_text() {
        for m in BoundaryMode::ALL {
            assert_eq!(m.to_string().parse::<BoundaryMode>().unwrap(), m);
        }
        assert!("periodic".parse::<BoundaryMode>().is_err());
    }
}
