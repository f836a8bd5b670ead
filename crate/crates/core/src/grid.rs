//! Periodic 1-D grid, sampled fields, the normalized DFT, spectral Sobolev
//! norms and the Friedrichs mollifier.
//!
//! Conventions:
//! - nodes `x_j = j L / N`, `j = 0..N`;
//! - coefficients `û_k = (1/N) Σ_j u_j e^{-i ξ_k x_j}` stored in native FFT
//!   order (index `j < N/2` is wavenumber `j`, the rest are `j - N`);
//! - `|u|_s² = Σ_k (1 + ξ_k²)^s |û_k|²`, summed over components.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub type C64 = Complex64;

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

/// Uniform periodic grid on `[0, L)` with a power-of-two number of nodes.
#[derive(Clone)]
pub struct Grid1D {
    n: usize,
    length: f64,
    plans: Arc<Plans>,
}

impl fmt::Debug for Grid1D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid1D")
            .field("n", &self.n)
            .field("length", &self.length)
            .finish()
    }
}

impl PartialEq for Grid1D {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.length.to_bits() == other.length.to_bits()
    }
}

impl Grid1D {
    pub fn new(n: usize, length: f64) -> Result<Self> {
        if n < 8 || !n.is_power_of_two() {
            return Err(Error::InvalidGrid(format!(
                "N = {n} must be a power of two >= 8"
            )));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidGrid(format!("L = {length} must be positive")));
        }
        let mut planner = FftPlanner::new();
        let plans = Plans {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        };
        Ok(Self {
            n,
            length,
            plans: Arc::new(plans),
        })
    }

    /// The default `[0, 2π)` torus.
    pub fn periodic(n: usize) -> Result<Self> {
        Self::new(n, 2.0 * std::f64::consts::PI)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn dx(&self) -> f64 {
        self.length / self.n as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        j as f64 * self.dx()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.node(j)).collect()
    }

    /// Integer wavenumber stored at native index `j`.
    pub fn wavenumber(&self, j: usize) -> i64 {
        let half = self.n / 2;
        if j < half {
            j as i64
        } else {
            j as i64 - self.n as i64
        }
    }

    /// Angular frequency `ξ = 2πk/L` stored at native index `j`.
    pub fn xi(&self, j: usize) -> f64 {
        2.0 * std::f64::consts::PI * self.wavenumber(j) as f64 / self.length
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.xi(j)).collect()
    }

    /// Largest `|ξ|` on the grid (the Nyquist frequency).
    pub fn xi_max(&self) -> f64 {
        std::f64::consts::PI * self.n as f64 / self.length
    }

    /// Forward transform in place, normalized by `1/N`.
    pub(crate) fn forward_in_place(&self, buf: &mut [C64]) {
        debug_assert_eq!(buf.len(), self.n);
        self.plans.forward.process(buf);
        let scale = 1.0 / self.n as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }

    /// Unnormalized inverse transform in place (synthesis).
    pub(crate) fn inverse_in_place(&self, buf: &mut [C64]) {
        debug_assert_eq!(buf.len(), self.n);
        self.plans.inverse.process(buf);
    }

    /// Reduce a coordinate into `[0, L)`.
    pub fn wrap(&self, x: f64) -> f64 {
        x.rem_euclid(self.length)
    }

    /// Signed periodic distance `a - b` reduced into `[-L/2, L/2)`.
    pub fn periodic_diff(&self, a: f64, b: f64) -> f64 {
        let l = self.length;
        (a - b + 0.5 * l).rem_euclid(l) - 0.5 * l
    }
}

/// A `d'`-component complex field sampled on the grid, stored component-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    grid: Grid1D,
    ncomp: usize,
    values: Vec<C64>,
}

impl Field {
    pub fn zeros(grid: &Grid1D, ncomp: usize) -> Self {
        assert!(ncomp >= 1, "a field needs at least one component");
        Self {
            grid: grid.clone(),
            ncomp,
            values: vec![C64::new(0.0, 0.0); ncomp * grid.n()],
        }
    }

    pub fn from_values(grid: &Grid1D, ncomp: usize, values: Vec<C64>) -> Result<Self> {
        if ncomp == 0 || values.len() != ncomp * grid.n() {
            return Err(Error::invalid(format!(
                "expected {} values for {} components, got {}",
                ncomp * grid.n(),
                ncomp,
                values.len()
            )));
        }
        let field = Self {
            grid: grid.clone(),
            ncomp,
            values,
        };
        if !field.is_finite() {
            return Err(Error::NonFinite("field values"));
        }
        Ok(field)
    }

    /// Build a field from `f(component, x)`.
    pub fn from_fn(grid: &Grid1D, ncomp: usize, mut f: impl FnMut(usize, f64) -> C64) -> Self {
        let mut out = Self::zeros(grid, ncomp);
        let n = grid.n();
        for c in 0..ncomp {
            for j in 0..n {
                out.values[c * n + j] = f(c, grid.node(j));
            }
        }
        out
    }

    /// Scalar real field from `f(x)`.
    pub fn from_real_fn(grid: &Grid1D, mut f: impl FnMut(f64) -> f64) -> Self {
        Self::from_fn(grid, 1, |_, x| C64::new(f(x), 0.0))
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn ncomp(&self) -> usize {
        self.ncomp
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [C64] {
        &mut self.values
    }

    pub fn component(&self, c: usize) -> &[C64] {
        let n = self.grid.n();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [C64] {
        let n = self.grid.n();
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub(crate) fn check_compatible(&self, other: &Field) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch("fields live on different grids"));
        }
        if self.ncomp != other.ncomp {
            return Err(Error::ComponentMismatch {
                expected: self.ncomp,
                found: other.ncomp,
            });
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: C64, other: &Field) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    /// `self += alpha * other` for a real coefficient.
    pub fn axpy_re(&mut self, alpha: f64, other: &Field) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b * alpha;
        }
    }

    pub fn scale(&mut self, alpha: C64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Field {
        let mut out = self.clone();
        for v in &mut out.values {
            *v *= alpha;
        }
        out
    }

    pub fn sub(&self, other: &Field) -> Field {
        let mut out = self.clone();
        out.axpy_re(-1.0, other);
        out
    }

    pub fn add(&self, other: &Field) -> Field {
        let mut out = self.clone();
        out.axpy_re(1.0, other);
        out
    }

    /// Quadrature L² norm `((1/N) Σ |u_j|²)^{1/2}`, equal to `|u|_0`.
    pub fn l2_norm(&self) -> f64 {
        let n = self.grid.n() as f64;
        (self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() / n).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

/// Fourier coefficients `û_k` per component, native order.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralField {
    grid: Grid1D,
    ncomp: usize,
    coeffs: Vec<C64>,
}

impl SpectralField {
    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn ncomp(&self) -> usize {
        self.ncomp
    }

    pub fn coeffs(&self) -> &[C64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [C64] {
        &mut self.coeffs
    }

    pub fn component(&self, c: usize) -> &[C64] {
        let n = self.grid.n();
        &self.coeffs[c * n..(c + 1) * n]
    }

    /// Coefficient of integer wavenumber `k` in component `c`.
    pub fn mode(&self, c: usize, k: i64) -> C64 {
        let n = self.grid.n() as i64;
        let j = k.rem_euclid(n) as usize;
        self.coeffs[c * self.grid.n() + j]
    }
}

pub fn dft(field: &Field) -> Result<SpectralField> {
    if !field.is_finite() {
        return Err(Error::NonFinite("dft input"));
    }
    Ok(dft_unchecked(field))
}

pub(crate) fn dft_unchecked(field: &Field) -> SpectralField {
    let grid = field.grid.clone();
    let mut coeffs = field.values.clone();
    for chunk in coeffs.chunks_mut(grid.n()) {
        grid.forward_in_place(chunk);
    }
    SpectralField {
        grid,
        ncomp: field.ncomp,
        coeffs,
    }
}

pub fn idft(spec: &SpectralField) -> Field {
    let grid = spec.grid.clone();
    let mut values = spec.coeffs.clone();
    for chunk in values.chunks_mut(grid.n()) {
        grid.inverse_in_place(chunk);
    }
    Field {
        grid,
        ncomp: spec.ncomp,
        values,
    }
}

#[inline]
pub fn sobolev_weight(xi: f64, s: f64) -> f64 {
    (1.0 + xi * xi).powf(s)
}

pub fn sobolev_norm(field: &Field, s: f64) -> Result<f64> {
    if !s.is_finite() {
        return Err(Error::invalid("Sobolev index must be finite"));
    }
    let spec = dft(field)?;
    Ok(spectral_norm_sq(&spec, s).sqrt())
}

pub(crate) fn spectral_norm_sq(spec: &SpectralField, s: f64) -> f64 {
    let grid = &spec.grid;
    let n = grid.n();
    let weights: Vec<f64> = (0..n).map(|j| sobolev_weight(grid.xi(j), s)).collect();
    spec.coeffs
        .chunks(n)
        .map(|c| {
            c.iter()
                .zip(&weights)
                .map(|(v, w)| w * v.norm_sqr())
                .sum::<f64>()
        })
        .sum()
}

/// `⟨u, v⟩_s = Σ (1+ξ²)^s û_k conj(v̂_k)`.
pub fn sobolev_inner(u: &Field, v: &Field, s: f64) -> Result<C64> {
    u.check_compatible(v)?;
    if !s.is_finite() {
        return Err(Error::invalid("Sobolev index must be finite"));
    }
    let uh = dft(u)?;
    let vh = dft(v)?;
    Ok(spectral_inner(&uh, &vh, s))
}

pub(crate) fn spectral_inner(uh: &SpectralField, vh: &SpectralField, s: f64) -> C64 {
    let grid = &uh.grid;
    let n = grid.n();
    let mut acc = C64::new(0.0, 0.0);
    for (cu, cv) in uh.coeffs.chunks(n).zip(vh.coeffs.chunks(n)) {
        for j in 0..n {
            acc += sobolev_weight(grid.xi(j), s) * cu[j] * cv[j].conj();
        }
    }
    acc
}

/// Gaussian mollifier profile `χ̂(z) = exp(-z²/2)`.
#[inline]
pub fn chi_hat(z: f64) -> f64 {
    (-0.5 * z * z).exp()
}

/// Friedrichs mollifier `J_ε`, realized as the spectral multiplier `χ̂(εξ)`.
#[derive(Clone, Debug)]
pub struct Mollifier {
    epsilon: f64,
    profile: Vec<f64>,
}

impl Mollifier {
    pub fn new(grid: &Grid1D, epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::invalid(format!("mollifier eps = {epsilon} must be > 0")));
        }
        let profile = (0..grid.n()).map(|j| chi_hat(epsilon * grid.xi(j))).collect();
        Ok(Self { epsilon, profile })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn profile(&self) -> &[f64] {
        &self.profile
    }
}

pub fn mollify(field: &Field, moll: &Mollifier) -> Field {
    let mut spec = dft_unchecked(field);
    let n = spec.grid.n();
    for chunk in spec.coeffs.chunks_mut(n) {
        for (v, w) in chunk.iter_mut().zip(&moll.profile) {
            *v *= *w;
        }
    }
    idft(&spec)
}

/// `k(ε, ε') = max_k |χ̂(εξ_k) − χ̂(ε'ξ_k)| / (1+ξ_k²)^{1/2}`, the sharpest
/// constant in `|(J_ε − J_ε')v|_s ≤ k |v|_{s+1}` on this grid.
pub fn mollifier_gap(eps: f64, eps2: f64, grid: &Grid1D) -> Result<f64> {
    if !(eps > 0.0 && eps2 > 0.0) {
        return Err(Error::invalid("mollifier scales must be positive"));
    }
    Ok((0..grid.n())
        .map(|j| {
            let xi = grid.xi(j);
            (chi_hat(eps * xi) - chi_hat(eps2 * xi)).abs() / (1.0 + xi * xi).sqrt()
        })
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_field(grid: &Grid1D, ncomp: usize, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field::from_fn(grid, ncomp, |_, _| {
            C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    #[test]
    fn grid_validation() {
        assert!(Grid1D::new(4, 1.0).is_err());
        assert!(Grid1D::new(12, 1.0).is_err());
        assert!(Grid1D::new(16, 0.0).is_err());
        let g = Grid1D::new(64, 3.0).unwrap();
        assert!((g.dx() * 64.0 - 3.0).abs() <= f64::EPSILON * 3.0);
        assert_eq!(g.wavenumber(32), -32);
        assert_eq!(g.wavenumber(31), 31);
    }

    #[test]
    fn dft_of_constant_is_dc() {
        let g = Grid1D::periodic(32).unwrap();
        let c = C64::new(2.5, -1.0);
        let u = Field::from_fn(&g, 1, |_, _| c);
        let uh = dft(&u).unwrap();
        assert!((uh.mode(0, 0) - c).norm() < 1e-14);
        for j in 1..32 {
            assert!(uh.coeffs()[j].norm() < 1e-14);
        }
    }

    #[test]
    fn dft_of_fourier_mode() {
        let g = Grid1D::new(32, 5.0).unwrap();
        let u = Field::from_fn(&g, 1, |_, x| C64::from_polar(1.0, 2.0 * PI * x / 5.0));
        let uh = dft(&u).unwrap();
        for j in 0..32 {
            let expect = if j == 1 { 1.0 } else { 0.0 };
            assert!((uh.coeffs()[j] - expect).norm() < 1e-13);
        }
    }

    #[test]
    fn dft_rejects_non_finite() {
        let g = Grid1D::periodic(8).unwrap();
        let mut u = Field::zeros(&g, 1);
        u.values_mut()[3] = C64::new(f64::NAN, 0.0);
        assert!(matches!(dft(&u), Err(Error::NonFinite(_))));
    }

    #[test]
    fn round_trip_is_identity() {
        let g = Grid1D::periodic(128).unwrap();
        let u = random_field(&g, 2, 1);
        let back = idft(&dft(&u).unwrap());
        let err = back.sub(&u).l2_norm() / u.l2_norm();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn sobolev_norm_examples() {
        let g = Grid1D::new(64, 3.0).unwrap();
        let one = Field::from_real_fn(&g, |_| 1.0);
        for s in [-2.0, 0.0, 1.5] {
            assert!((sobolev_norm(&one, s).unwrap() - 1.0).abs() < 1e-13);
        }
        let e1 = Field::from_fn(&g, 1, |_, x| C64::from_polar(1.0, 2.0 * PI * x / 3.0));
        let expect = (1.0 + (2.0 * PI / 3.0).powi(2)).sqrt();
        assert!((sobolev_norm(&e1, 1.0).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn parseval_against_quadrature() {
        let g = Grid1D::periodic(256).unwrap();
        let u = random_field(&g, 2, 7);
        let quad = u.l2_norm();
        let spec = sobolev_norm(&u, 0.0).unwrap();
        assert!((quad - spec).abs() <= 1e-12 * quad);
    }

    #[test]
    fn inner_product_properties() {
        let g = Grid1D::periodic(64).unwrap();
        let u = random_field(&g, 1, 3);
        let v = random_field(&g, 1, 4);
        let uu = sobolev_inner(&u, &u, 1.3).unwrap();
        let n = sobolev_norm(&u, 1.3).unwrap();
        assert!((uu.re - n * n).abs() < 1e-10 * n * n && uu.im.abs() < 1e-10 * n * n);
        let uv = sobolev_inner(&u, &v, -0.7).unwrap();
        let vu = sobolev_inner(&v, &u, -0.7).unwrap();
        assert!((uv - vu.conj()).norm() < 1e-13);

        let e1 = Field::from_fn(&g, 1, |_, x| C64::from_polar(1.0, x));
        let e2 = Field::from_fn(&g, 1, |_, x| C64::from_polar(1.0, 2.0 * x));
        assert!(sobolev_inner(&e1, &e2, 2.0).unwrap().norm() < 1e-13);

        let other = Grid1D::periodic(32).unwrap();
        let w = Field::zeros(&other, 1);
        assert!(matches!(
            sobolev_inner(&u, &w, 0.0),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn mollifier_properties() {
        let g = Grid1D::periodic(128).unwrap();
        let m = Mollifier::new(&g, 0.1).unwrap();
        assert_eq!(m.profile()[0], 1.0);
        let c = Field::from_real_fn(&g, |_| 3.0);
        assert!(mollify(&c, &m).sub(&c).max_abs() < 1e-13);

        let tiny = Mollifier::new(&g, 1e-12).unwrap();
        assert!(tiny.profile().iter().all(|p| (p - 1.0).abs() < 1e-15));

        let u = random_field(&g, 1, 11);
        for s in [-1.0, 0.0, 2.0] {
            let a = sobolev_norm(&mollify(&u, &m), s).unwrap();
            let b = sobolev_norm(&u, s).unwrap();
            assert!(a <= b * (1.0 + 1e-14));
        }
        // self-adjoint in the L² pairing
        let v = random_field(&g, 1, 12);
        let lhs = sobolev_inner(&mollify(&u, &m), &v, 0.0).unwrap();
        let rhs = sobolev_inner(&u, &mollify(&v, &m), 0.0).unwrap();
        assert!((lhs - rhs).norm() < 1e-13);
        assert!(Mollifier::new(&g, 0.0).is_err());
    }

    #[test]
    fn mollifier_gap_examples() {
        let g = Grid1D::periodic(256).unwrap();
        assert_eq!(mollifier_gap(0.3, 0.3, &g).unwrap(), 0.0);
        let seq: Vec<f64> = [0.4, 0.2, 0.1, 0.05, 0.025]
            .iter()
            .map(|&e| mollifier_gap(e, 0.5 * e, &g).unwrap())
            .collect();
        for w in seq.windows(2) {
            assert!(w[1] < w[0]);
        }
        // gap is O(ε) for the Gaussian profile
        assert!(seq[4] < 0.1 * seq[0]);
    }
}
