//! Closed-form spectral theory of the Neumann Laplacian.
//!
//! The reflective three-point Laplacian on `L` points is diagonalised by the
//! orthonormal DCT-II basis with eigenvalues `-4 sin^2(pi k / 2L)`. The same
//! basis diagonalises the reflected stencil at any scale `h`, with eigenvalues
//! `-4 sin^2(pi k h / 2L)`.

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::scalar::Scalar;
use crate::stats::{linear_fit, LineFit};

/// `lambda_k = -4 sin^2(pi k / 2L)` for `k = 0..L`.
pub fn eigenvalues<T: Scalar>(len: usize) -> Vec<T> {
    (0..len).map(|k| eigenvalue(len, k, 1)).collect()
}

/// Eigenvalue of the reflected stencil with step `scale` on DCT mode `k`.
pub fn eigenvalue<T: Scalar>(len: usize, k: usize, scale: usize) -> T {
    let theta = T::PI() * T::from_usize_lossy(k * scale) / T::from_usize_lossy(2 * len);
    let s = theta.sin();
    -T::lit(4.0) * s * s
}

/// Orthonormal DCT-II basis; column `k` is proportional to `cos(pi k (2i + 1) / 2L)`.
pub fn dct_basis<T: Scalar>(len: usize) -> DenseMatrix<T> {
    let n = T::from_usize_lossy(len);
    let dc = (T::one() / n).sqrt();
    let ac = (T::lit(2.0) / n).sqrt();
    DenseMatrix::from_fn(len, len, |i, k| {
        if k == 0 {
            dc
        } else {
            let arg = T::PI() * T::from_usize_lossy(k * (2 * i + 1)) / T::from_usize_lossy(2 * len);
            ac * arg.cos()
        }
    })
}

/// Single DCT mode as a vector (column `k` of [`dct_basis`]).
pub fn dct_mode<T: Scalar>(len: usize, k: usize) -> Vec<T> {
    let n = T::from_usize_lossy(len);
    let norm = if k == 0 {
        (T::one() / n).sqrt()
    } else {
        (T::lit(2.0) / n).sqrt()
    };
    (0..len)
        .map(|i| {
            let arg = T::PI() * T::from_usize_lossy(k * (2 * i + 1)) / T::from_usize_lossy(2 * len);
            norm * arg.cos()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralProfile<T> {
    pub len: usize,
    pub eigenvalues: Vec<T>,
    /// Columns are the eigenvectors.
    pub basis: DenseMatrix<T>,
}

impl<T: Scalar> SpectralProfile<T> {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidArgument("spectral profile needs L >= 1".into()));
        }
        Ok(Self {
            len,
            eigenvalues: eigenvalues(len),
            basis: dct_basis(len),
        })
    }
}

/// Gain `1 - 4 alpha sin^2(omega h / 2)` of one diffusion step at scale `h`.
pub fn frequency_response<T: Scalar>(omega: T, scale: usize, alpha: T) -> T {
    let s = (omega * T::from_usize_lossy(scale) / T::lit(2.0)).sin();
    T::one() - T::lit(4.0) * alpha * s * s
}

/// Gain of the fused multi-scale step `1 + sum_k c_k (-4 sin^2(omega h_k / 2))`,
/// where `c_k` is the mixed coefficient (weight times diffusion coefficient) of scale `h_k`.
pub fn mixed_frequency_response<T: Scalar>(omega: T, scales: &[usize], coefficients: &[T]) -> T {
    scales.iter().zip(coefficients).fold(T::one(), |acc, (&h, &c)| {
        acc + frequency_response(omega, h, c) - T::one()
    })
}

/// Heat kernel `exp(t Delta_N) = sum_k exp(lambda_k t) phi_k phi_k^T`.
pub fn heat_kernel<T: Scalar>(len: usize, t: T) -> Result<DenseMatrix<T>> {
    if len == 0 {
        return Err(Error::InvalidArgument("heat kernel needs L >= 1".into()));
    }
    if !(t >= T::zero()) {
        return Err(Error::InvalidArgument(format!("heat kernel time {t} must be >= 0")));
    }
    let basis = dct_basis::<T>(len);
    let decay: Vec<T> = eigenvalues::<T>(len).into_iter().map(|l| (l * t).exp()).collect();
    let mut k = DenseMatrix::zeros(len, len);
    for x in 0..len {
        for y in x..len {
            let v: T = (0..len).map(|m| decay[m] * basis[(x, m)] * basis[(y, m)]).sum();
            k[(x, y)] = v;
            k[(y, x)] = v;
        }
    }
    Ok(k)
}

/// Regresses `ln K(center, y)` on `|center - y|^2` over `0 < |center - y| <= max_distance`.
///
/// A Gaussian envelope `exp(-r^2 / 4t)` shows up as a slope near `-1 / 4t`.
pub fn gaussian_envelope_fit<T: Scalar>(
    kernel: &DenseMatrix<T>,
    center: usize,
    max_distance: usize,
) -> Result<LineFit<T>> {
    let n = kernel.rows();
    if center >= n {
        return Err(Error::InvalidArgument(format!(
            "center {center} outside kernel of size {n}"
        )));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for r in 1..=max_distance {
        for y in [center.checked_sub(r), center.checked_add(r).filter(|&y| y < n)]
            .into_iter()
            .flatten()
        {
            let v = kernel[(center, y)];
            if v <= T::zero() {
                return Err(Error::InvalidArgument(format!(
                    "kernel entry ({center}, {y}) = {v} is not positive"
                )));
            }
            xs.push(T::from_usize_lossy(r * r));
            ys.push(v.ln());
        }
    }
    linear_fit(&xs, &ys)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyBand<T> {
    pub label: String,
    pub omega_lo: T,
    pub omega_hi: T,
}

impl<T: Scalar> FrequencyBand<T> {
    pub fn new(label: impl Into<String>, omega_lo: T, omega_hi: T) -> Result<Self> {
        if !(omega_lo >= T::zero() && omega_lo < omega_hi && omega_hi <= T::PI()) {
            return Err(Error::InvalidArgument(format!(
                "band [{omega_lo}, {omega_hi}] must satisfy 0 <= lo < hi <= pi"
            )));
        }
        Ok(Self {
            label: label.into(),
            omega_lo,
            omega_hi,
        })
    }

    /// Four equal-width bands covering `[0, pi]`: low, mid-low, mid-high, high.
    pub fn quarters() -> Vec<Self> {
        let q = T::PI() / T::lit(4.0);
        ["low", "mid-low", "mid-high", "high"]
            .iter()
            .enumerate()
            .map(|(i, name)| Self {
                label: (*name).to_string(),
                omega_lo: q * T::from_usize_lossy(i),
                omega_hi: q * T::from_usize_lossy(i + 1),
            })
            .collect()
    }

    pub fn contains_dc(&self) -> bool {
        self.omega_lo == T::zero()
    }

    /// Midpoint grid of `samples` frequencies.
    fn grid(&self, samples: usize) -> impl Iterator<Item = T> + '_ {
        let width = (self.omega_hi - self.omega_lo) / T::from_usize_lossy(samples);
        (0..samples).map(move |j| self.omega_lo + width * (T::from_usize_lossy(j) + T::lit(0.5)))
    }
}

/// Mean of `response(omega)^2` on a midpoint grid inside each band.
pub fn band_energy_of<T: Scalar>(
    response: impl Fn(T) -> T,
    bands: &[FrequencyBand<T>],
    samples: usize,
) -> Result<Vec<T>> {
    if bands.is_empty() {
        return Err(Error::InvalidArgument("band list is empty".into()));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("band energy needs at least one sample".into()));
    }
    let n = T::from_usize_lossy(samples);
    Ok(bands
        .iter()
        .map(|b| b.grid(samples).map(|w| response(w).powi(2)).sum::<T>() / n)
        .collect())
}

/// Band energies of the single-scale response `H_h`.
pub fn band_energy<T: Scalar>(scale: usize, alpha: T, bands: &[FrequencyBand<T>], samples: usize) -> Result<Vec<T>> {
    band_energy_of(|w| frequency_response(w, scale, alpha), bands, samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiscaleFit<T> {
    pub scales: Vec<usize>,
    pub weights: Vec<T>,
    /// Root-mean-square residual over the fitting grid.
    pub rms_error: T,
}

/// Symbol of the scale-`h` stencil normalised by `h^2`: `-(4 / h^2) sin^2(omega h / 2)`.
pub fn stencil_symbol<T: Scalar>(omega: T, scale: usize) -> T {
    let h = T::from_usize_lossy(scale);
    let s = (omega * h / T::lit(2.0)).sin();
    -T::lit(4.0) * s * s / (h * h)
}

/// Least-squares weights so that `sum_k w_k * symbol_{h_k}(omega)` matches `-omega^2`
/// on a uniform grid of `grid_points` frequencies spanning `[0, omega_max]`.
pub fn fit_multiscale_weights<T: Scalar>(
    scales: &[usize],
    omega_max: T,
    grid_points: usize,
) -> Result<MultiscaleFit<T>> {
    if scales.is_empty() {
        return Err(Error::InvalidArgument("at least one scale is required".into()));
    }
    if scales.contains(&0) {
        return Err(Error::InvalidArgument("scales must be >= 1".into()));
    }
    for (i, h) in scales.iter().enumerate() {
        if scales[..i].contains(h) {
            return Err(Error::Singular(format!("duplicate scale {h}")));
        }
    }
    if !(omega_max > T::zero() && omega_max <= T::PI()) {
        return Err(Error::InvalidArgument(format!("omega_max {omega_max} outside (0, pi]")));
    }
    if grid_points < scales.len().max(2) {
        return Err(Error::InvalidArgument(format!(
            "{grid_points} grid points cannot determine {} weights",
            scales.len()
        )));
    }
    let step = omega_max / T::from_usize_lossy(grid_points - 1);
    let omegas: Vec<T> = (0..grid_points).map(|j| step * T::from_usize_lossy(j)).collect();
    let design = DenseMatrix::from_fn(grid_points, scales.len(), |j, k| stencil_symbol(omegas[j], scales[k]));
    let target: Vec<T> = omegas.iter().map(|&w| -w * w).collect();
    let weights = design.solve_least_squares(&target)?;
    let fitted = design.matvec(&weights)?;
    let sse: T = fitted.iter().zip(&target).map(|(&f, &t)| (f - t) * (f - t)).sum();
    Ok(MultiscaleFit {
        scales: scales.to_vec(),
        weights,
        rms_error: (sse / T::from_usize_lossy(grid_points)).sqrt(),
    })
}
