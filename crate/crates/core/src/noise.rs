//! Brownian drivers, polygonal (Wong–Zakai) interpolants, Cameron–Martin
//! paths, the action functional and Girsanov shifts.
//!
//! Brownian increments are a pure function of `(seed, path_index, step)`:
//! `path_index` selects a ChaCha20 stream and each step consumes exactly two
//! 64-bit words (one Box–Muller draw), so step `i` sits at word position
//! `4 i` of its stream no matter how paths are scheduled.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BrownianPath {
    horizon: f64,
    values: Vec<f64>,
    seed: u64,
    path_index: u64,
}

fn unit_open(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

fn box_muller(a: u64, b: u64) -> f64 {
    let u1 = unit_open(a);
    let u2 = unit_open(b);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn stream(seed: u64, path_index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

/// Standard normal draw number `step` of substream `(seed, path_index)`,
/// computed by seeking directly to its counter position.
pub fn normal_at(seed: u64, path_index: u64, step: u64) -> f64 {
    let mut rng = stream(seed, path_index);
    rng.set_word_pos(4 * step as u128);
    let a = rng.next_u64();
    let b = rng.next_u64();
    box_muller(a, b)
}

pub fn sample_brownian(steps: usize, horizon: f64, seed: u64, path_index: u64) -> Result<BrownianPath> {
    if steps == 0 {
        return Err(Error::invalid("Brownian path needs at least one step"));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::invalid("horizon must be positive"));
    }
    let mut rng = stream(seed, path_index);
    let sd = (horizon / steps as f64).sqrt();
    let mut values = Vec::with_capacity(steps + 1);
    let mut w = 0.0;
    values.push(w);
    for _ in 0..steps {
        let a = rng.next_u64();
        let b = rng.next_u64();
        w += sd * box_muller(a, b);
        values.push(w);
    }
    Ok(BrownianPath {
        horizon,
        values,
        seed,
        path_index,
    })
}

impl BrownianPath {
    /// Path from raw node values `w_0 = 0, w_1, …, w_M` on a uniform grid.
    pub fn from_values(horizon: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid("path needs at least one step"));
        }
        if values[0] != 0.0 {
            return Err(Error::invalid("path must start at 0"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("path values"));
        }
        if !(horizon > 0.0) {
            return Err(Error::invalid("horizon must be positive"));
        }
        Ok(Self {
            horizon,
            values,
            seed: 0,
            path_index: 0,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps() as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        self.horizon * i as f64 / self.steps() as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path_index(&self) -> u64 {
        self.path_index
    }

    pub fn increment(&self, i: usize) -> f64 {
        self.values[i + 1] - self.values[i]
    }

    pub fn increments(&self) -> Vec<f64> {
        self.values.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Piecewise-linear evaluation between nodes.
    pub fn value_at(&self, t: f64) -> f64 {
        let m = self.steps();
        let pos = (t / self.horizon * m as f64).clamp(0.0, m as f64);
        let i = (pos.floor() as usize).min(m - 1);
        let frac = pos - i as f64;
        self.values[i] + frac * (self.values[i + 1] - self.values[i])
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    /// Path reversed about `t_end = time(k)`: node `j` holds
    /// `w(t_end) − w(t_end − j Δt)`, so its increments are the original
    /// increments in reverse order.
    pub fn reversed_until(&self, k: usize) -> Result<BrownianPath> {
        if k == 0 || k > self.steps() {
            return Err(Error::invalid("reversal point must be a positive node index"));
        }
        let end = self.values[k];
        let values = (0..=k).map(|j| end - self.values[k - j]).collect();
        Ok(BrownianPath {
            horizon: self.time(k),
            values,
            seed: self.seed,
            path_index: self.path_index,
        })
    }

    /// Content hash of the path (horizon and values, bitwise).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.horizon.to_bits().to_le_bytes());
        for v in &self.values {
            h.update(v.to_bits().to_le_bytes());
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Quadratic variation `Σ (Δw)²`.
    pub fn quadratic_variation(&self) -> f64 {
        self.values.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,w\n");
        for (i, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{:.17e},{:.17e}\n", self.time(i), v));
        }
        out
    }
}

/// Piecewise-linear interpolant `wⁿ` of a path through `n + 1` breakpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct PolygonalPath {
    horizon: f64,
    breakpoints: Vec<f64>,
}

impl PolygonalPath {
    pub fn from_breakpoints(horizon: f64, breakpoints: Vec<f64>) -> Result<Self> {
        if breakpoints.len() < 2 {
            return Err(Error::invalid("polygonal path needs at least one segment"));
        }
        if !(horizon > 0.0) || breakpoints.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("polygonal path must have finite data and positive horizon"));
        }
        Ok(Self {
            horizon,
            breakpoints,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn segments(&self) -> usize {
        self.breakpoints.len() - 1
    }

    pub fn segment_length(&self) -> f64 {
        self.horizon / self.segments() as f64
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// Slope `ẇⁿ` on segment `i`.
    pub fn slope(&self, i: usize) -> f64 {
        (self.breakpoints[i + 1] - self.breakpoints[i]) / self.segment_length()
    }

    fn segment_of(&self, t: f64) -> (usize, f64) {
        let n = self.segments();
        let pos = (t / self.horizon * n as f64).clamp(0.0, n as f64);
        let i = (pos.floor() as usize).min(n - 1);
        (i, pos - i as f64)
    }

    pub fn value_at(&self, t: f64) -> f64 {
        let (i, frac) = self.segment_of(t);
        self.breakpoints[i] + frac * (self.breakpoints[i + 1] - self.breakpoints[i])
    }

    /// Right-continuous slope at time `t`.
    pub fn slope_at(&self, t: f64) -> f64 {
        self.slope(self.segment_of(t).0)
    }

    /// `∫₀ᵀ |ẇⁿ|² dt = Σ (Δw)² / Δt`.
    pub fn energy(&self) -> f64 {
        let dt = self.segment_length();
        self.breakpoints.windows(2).map(|w| (w[1] - w[0]).powi(2) / dt).sum()
    }
}

pub fn polygonalize(path: &BrownianPath, n: usize) -> Result<PolygonalPath> {
    let m = path.steps();
    if n == 0 || !m.is_multiple_of(n) {
        return Err(Error::invalid(format!("n = {n} must divide the path resolution M = {m}")));
    }
    let stride = m / n;
    let breakpoints = (0..=n).map(|i| path.values[i * stride]).collect();
    PolygonalPath::from_breakpoints(path.horizon, breakpoints)
}

/// A Cameron–Martin path `h` with `h(0) = 0`, stored as `ḣ` constant on each
/// step interval of a uniform `M`-step grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CameronMartinPath {
    horizon: f64,
    hdot: Vec<f64>,
}

impl CameronMartinPath {
    pub fn from_hdot(horizon: f64, hdot: Vec<f64>) -> Result<Self> {
        if hdot.is_empty() || !(horizon > 0.0) {
            return Err(Error::invalid("Cameron-Martin path needs samples and a positive horizon"));
        }
        if hdot.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("hdot samples"));
        }
        Ok(Self { horizon, hdot })
    }

    pub fn zero(horizon: f64, steps: usize) -> Self {
        Self {
            horizon,
            hdot: vec![0.0; steps],
        }
    }

    /// Exact polygonal interpolant of `h` on the step grid:
    /// `ḣ_i = (h(t_{i+1}) − h(t_i)) / Δt`.
    pub fn from_fn(horizon: f64, steps: usize, h: impl Fn(f64) -> f64) -> Self {
        let dt = horizon / steps as f64;
        let hdot = (0..steps)
            .map(|i| (h((i + 1) as f64 * dt) - h(i as f64 * dt)) / dt)
            .collect();
        Self { horizon, hdot }
    }

    /// Polygonal path through `breakpoints` (with `breakpoints[0] = 0`),
    /// resampled on an `steps`-step grid; `steps` must be a multiple of the
    /// segment count.
    pub fn from_breakpoints(horizon: f64, steps: usize, breakpoints: &[f64]) -> Result<Self> {
        let n = breakpoints.len().saturating_sub(1);
        if n == 0 || !steps.is_multiple_of(n) {
            return Err(Error::invalid("segment count must divide the step count"));
        }
        if breakpoints[0] != 0.0 {
            return Err(Error::invalid("h(0) must be 0"));
        }
        let per = steps / n;
        let seg = horizon / n as f64;
        let hdot = (0..steps)
            .map(|i| (breakpoints[i / per + 1] - breakpoints[i / per]) / seg)
            .collect();
        Self::from_hdot(horizon, hdot)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.hdot.len()
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps() as f64
    }

    pub fn hdot(&self) -> &[f64] {
        &self.hdot
    }

    /// `h(t_i)` for `i = 0..=M` by cumulative quadrature.
    pub fn values(&self) -> Vec<f64> {
        let dt = self.dt();
        let mut out = Vec::with_capacity(self.hdot.len() + 1);
        let mut h = 0.0;
        out.push(h);
        for v in &self.hdot {
            h += v * dt;
            out.push(h);
        }
        out
    }

    /// `ḣ` on the step interval containing `t` (right-continuous).
    pub fn hdot_at(&self, t: f64) -> f64 {
        let m = self.steps();
        let i = ((t / self.horizon * m as f64).floor() as usize).min(m - 1);
        self.hdot[i]
    }

    /// Polygonal interpolant of `h` with `n` segments, on the same grid.
    pub fn polygonal(&self, n: usize) -> Result<Self> {
        let m = self.steps();
        if n == 0 || !m.is_multiple_of(n) {
            return Err(Error::invalid("segment count must divide the step count"));
        }
        let vals = self.values();
        let per = m / n;
        let bps: Vec<f64> = (0..=n).map(|i| vals[i * per]).collect();
        Self::from_breakpoints(self.horizon, m, &bps)
    }

    /// Linear combination `self + c * other` on a shared grid.
    pub fn add_scaled(&self, c: f64, other: &CameronMartinPath) -> Result<Self> {
        if self.steps() != other.steps() || self.horizon != other.horizon {
            return Err(Error::GridMismatch("Cameron-Martin grids differ"));
        }
        let hdot = self.hdot.iter().zip(&other.hdot).map(|(a, b)| a + c * b).collect();
        Self::from_hdot(self.horizon, hdot)
    }

    pub fn sup_distance(&self, path: &BrownianPath) -> Result<f64> {
        if path.steps() != self.steps() {
            return Err(Error::GridMismatch("path and Cameron-Martin grids differ"));
        }
        Ok(self
            .values()
            .iter()
            .zip(path.values())
            .map(|(h, w)| (h - w).abs())
            .fold(0.0, f64::max))
    }
}

/// `½ ∫₀ᵀ ḣ(t)² dt`. The samples are constant on each step, so the
/// trapezoid rule over each interval reduces to `½ Σ ḣ_i² Δt`.
pub fn cm_action(h: &CameronMartinPath) -> f64 {
    let dt = h.dt();
    0.5 * h.hdot.iter().map(|v| v * v * dt).sum::<f64>()
}

/// `w_i + h(t_i)/√ε`.
pub fn girsanov_shift(path: &BrownianPath, h: &CameronMartinPath, eps: f64) -> Result<BrownianPath> {
    if !(eps > 0.0) {
        return Err(Error::invalid("eps must be positive"));
    }
    if path.steps() != h.steps() || (path.horizon - h.horizon).abs() > 1e-12 * path.horizon {
        return Err(Error::GridMismatch("path and Cameron-Martin grids differ"));
    }
    let scale = 1.0 / eps.sqrt();
    let values = path
        .values
        .iter()
        .zip(h.values())
        .map(|(w, hv)| w + scale * hv)
        .collect();
    Ok(BrownianPath {
        horizon: path.horizon,
        values,
        seed: path.seed,
        path_index: path.path_index,
    })
}

/// Discrete Radon–Nikodym factor `dP/dQ` for a Q-Brownian path `w̃` under the
/// shift `w = w̃ + h/√ε`: `exp(−Σ ḣ Δw̃/√ε − ½ Σ ḣ² Δt/ε)`.
pub fn girsanov_weight(tilde: &BrownianPath, h: &CameronMartinPath, eps: f64) -> Result<f64> {
    if tilde.steps() != h.steps() {
        return Err(Error::GridMismatch("path and Cameron-Martin grids differ"));
    }
    let dt = h.dt();
    let se = eps.sqrt();
    let mut log_w = 0.0;
    for (i, hd) in h.hdot.iter().enumerate() {
        log_w -= hd * tilde.increment(i) / se + 0.5 * hd * hd * dt / eps;
    }
    Ok(log_w.exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_increment_moments() {
        let samples = 100_000;
        let t = 2.0;
        let xs: Vec<f64> = (0..samples)
            .map(|p| sample_brownian(1, t, 17, p).unwrap().values()[1])
            .collect();
        let mean = xs.iter().sum::<f64>() / samples as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (samples - 1) as f64;
        let sigma = t.sqrt();
        assert!(mean.abs() < 4.0 * sigma / (samples as f64).sqrt(), "mean {mean}");
        // variance estimator sd ≈ σ² √(2/n)
        assert!((var - t).abs() < 4.0 * t * (2.0 / samples as f64).sqrt(), "var {var}");
    }

    #[test]
    fn increments_moments_within_path() {
        let m = 20_000;
        let p = sample_brownian(m, 1.0, 5, 0).unwrap();
        let inc = p.increments();
        let dt = 1.0 / m as f64;
        let mean = inc.iter().sum::<f64>() / m as f64;
        let var = inc.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        assert!(mean.abs() < 4.0 * dt.sqrt() / (m as f64).sqrt());
        assert!((var - dt).abs() < 4.0 * dt * (2.0 / m as f64).sqrt());
    }

    #[test]
    fn reproducible_and_counter_based() {
        let a = sample_brownian(64, 1.0, 42, 3).unwrap();
        let b = sample_brownian(64, 1.0, 42, 3).unwrap();
        assert_eq!(a, b);
        let c = sample_brownian(64, 1.0, 42, 4).unwrap();
        assert_ne!(a.values(), c.values());
        let sd = (1.0f64 / 64.0).sqrt();
        for step in [0usize, 1, 17, 63] {
            let direct = sd * normal_at(42, 3, step as u64);
            assert!((direct - a.increment(step)).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_variation_close_to_horizon() {
        let p = sample_brownian(10_000, 1.0, 9, 0).unwrap();
        assert!((p.quadratic_variation() - 1.0).abs() < 0.05);
    }

    #[test]
    fn polygonal_examples() {
        let p = sample_brownian(64, 1.0, 1, 0).unwrap();
        let full = polygonalize(&p, 64).unwrap();
        for i in 0..=64 {
            assert_eq!(full.value_at(p.time(i)), p.values()[i]);
        }
        let one = polygonalize(&p, 1).unwrap();
        assert!((one.slope(0) - p.values()[64]).abs() < 1e-15);
        assert!(polygonalize(&p, 5).is_err());

        let eight = polygonalize(&p, 8).unwrap();
        let direct: f64 = (0..8)
            .map(|i| (p.values()[(i + 1) * 8] - p.values()[i * 8]).powi(2) / (1.0 / 8.0))
            .sum();
        assert!((eight.energy() - direct).abs() < 1e-12);
        assert!((eight.slope_at(0.2) - (p.values()[16] - p.values()[8]) * 8.0).abs() < 1e-12);
    }

    #[test]
    fn polygonal_energy_nondecreasing_under_nesting() {
        let p = sample_brownian(256, 1.0, 77, 2).unwrap();
        let energies: Vec<f64> = [1, 2, 4, 8, 16, 32, 64, 128, 256]
            .iter()
            .map(|&n| polygonalize(&p, n).unwrap().energy())
            .collect();
        for w in energies.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
    }

    #[test]
    fn action_examples() {
        assert_eq!(cm_action(&CameronMartinPath::zero(1.0, 10)), 0.0);
        let lin = CameronMartinPath::from_fn(1.0, 100, |t| t);
        assert!((cm_action(&lin) - 0.5).abs() < 1e-12);
        let bps = [0.0, 0.3, -0.2, 0.1];
        let poly = CameronMartinPath::from_breakpoints(1.5, 30, &bps).unwrap();
        let dt = 0.5;
        let expect = 0.5 * bps.windows(2).map(|w| (w[1] - w[0]).powi(2) / dt).sum::<f64>();
        assert!((cm_action(&poly) - expect).abs() < 1e-12);
        let vals = poly.values();
        assert!((vals[10] - 0.3).abs() < 1e-12 && (vals[30] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn girsanov_shift_examples() {
        let p = sample_brownian(50, 1.0, 3, 0).unwrap();
        let zero = CameronMartinPath::zero(1.0, 50);
        assert_eq!(girsanov_shift(&p, &zero, 0.3).unwrap().values(), p.values());
        let lin = CameronMartinPath::from_fn(1.0, 50, |t| t);
        let shifted = girsanov_shift(&p, &lin, 1.0).unwrap();
        for i in 0..=50 {
            assert!((shifted.values()[i] - p.values()[i] - p.time(i)).abs() < 1e-14);
        }
        let neg = CameronMartinPath::from_fn(1.0, 50, |t| -(t * 3.0).sin());
        let pos = CameronMartinPath::from_fn(1.0, 50, |t| (t * 3.0).sin());
        let there = girsanov_shift(&p, &pos, 0.01).unwrap();
        let back = girsanov_shift(&there, &neg, 0.01).unwrap();
        for (a, b) in back.values().iter().zip(p.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let wrong = CameronMartinPath::zero(1.0, 49);
        assert!(girsanov_shift(&p, &wrong, 1.0).is_err());
    }

    #[test]
    fn reversal_flips_increments() {
        let p = sample_brownian(16, 1.0, 8, 1).unwrap();
        let r = p.reversed_until(10).unwrap();
        assert_eq!(r.steps(), 10);
        for j in 0..10 {
            assert!((r.increment(j) - p.increment(9 - j)).abs() < 1e-15);
        }
    }
}
