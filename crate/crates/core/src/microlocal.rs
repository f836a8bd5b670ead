//! Bicharacteristics of first-order transport symbols, wavefront transport
//! and a windowed-Fourier singularity detector.
//!
//! The principal symbols are `a₁(x,ξ) = κ α(x) ξ` and `b₁(x,ξ) = κ β(x) ξ`
//! with `κ = −1` by default, which matches the characteristics
//! `dX = −α∘dw − β dt`. The flow is
//! `dx = ∂_ξ a₁ ∘dw + ∂_ξ b₁ dt`, `dξ = −∂_x a₁ ∘dw − ∂_x b₁ dt`.

use crate::characteristics::{spectral_derivative, PeriodicCubic};
use crate::error::{Error, Result};
use crate::grid::{dft_unchecked, Field, Grid1D, C64};
use crate::noise::BrownianPath;
use crate::par;

#[derive(Clone, Debug, PartialEq)]
pub struct PhasePoint {
    pub x: f64,
    pub xi: f64,
    pub label: String,
}

impl PhasePoint {
    pub fn new(x: f64, xi: f64, label: impl Into<String>) -> Self {
        Self {
            x,
            xi,
            label: label.into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WavefrontSet {
    pub points: Vec<PhasePoint>,
}

impl WavefrontSet {
    /// Both conormal directions over each listed point.
    pub fn conormal(points: &[f64]) -> Self {
        let mut out = Vec::new();
        for (i, &x) in points.iter().enumerate() {
            out.push(PhasePoint::new(x, 1.0, format!("s{i}+")));
            out.push(PhasePoint::new(x, -1.0, format!("s{i}-")));
        }
        Self { points: out }
    }
}

/// `a₁ = κ α(x) ξ`, `b₁ = κ β(x) ξ` with interpolated coefficients.
#[derive(Clone, Debug)]
pub struct Hamiltonian {
    kappa: f64,
    alpha: [PeriodicCubic<f64>; 3],
    beta: [PeriodicCubic<f64>; 3],
}

impl Hamiltonian {
    pub fn transport(grid: &Grid1D, alpha: &[f64], beta: Option<&[f64]>, kappa: f64) -> Result<Self> {
        let n = grid.n();
        let zero = vec![0.0; n];
        let beta = beta.unwrap_or(&zero);
        if alpha.len() != n || beta.len() != n {
            return Err(Error::GridMismatch("coefficient samples do not match the grid"));
        }
        let derivs = |v: &[f64]| {
            [
                PeriodicCubic::new(grid, v.to_vec()),
                PeriodicCubic::new(grid, spectral_derivative(grid, v, 1)),
                PeriodicCubic::new(grid, spectral_derivative(grid, v, 2)),
            ]
        };
        Ok(Self {
            kappa,
            alpha: derivs(alpha),
            beta: derivs(beta),
        })
    }

    pub fn a1(&self, x: f64, xi: f64) -> f64 {
        self.kappa * self.alpha[0].eval(x) * xi
    }

    pub fn b1(&self, x: f64, xi: f64) -> f64 {
        self.kappa * self.beta[0].eval(x) * xi
    }

    /// Vector field and its Jacobian for increments `(dw, dt)`.
    fn field(&self, x: f64, xi: f64, dw: f64, dt: f64) -> ([f64; 2], [[f64; 2]; 2]) {
        let k = self.kappa;
        let (a, da, dda) = (self.alpha[0].eval(x), self.alpha[1].eval(x), self.alpha[2].eval(x));
        let (b, db, ddb) = (self.beta[0].eval(x), self.beta[1].eval(x), self.beta[2].eval(x));
        let v = [k * (a * dw + b * dt), -k * (da * dw + db * dt) * xi];
        let j = [
            [k * (da * dw + db * dt), 0.0],
            [-k * (dda * dw + ddb * dt) * xi, -k * (da * dw + db * dt)],
        ];
        (v, j)
    }
}

#[derive(Clone, Debug)]
pub struct BicharTrajectory {
    pub label: String,
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
    /// Row-major `∂(x,ξ)(t)/∂(x,ξ)(0)`.
    pub jacobian: Vec<[f64; 4]>,
    /// `a₁(x(t), ξ(t))`.
    pub hamiltonian: Vec<f64>,
}

impl BicharTrajectory {
    pub fn jacobian_det(&self, k: usize) -> f64 {
        let j = self.jacobian[k];
        j[0] * j[3] - j[1] * j[2]
    }
}

#[derive(Clone, Debug)]
pub struct BicharConfig {
    pub steps: usize,
    pub record_every: usize,
}

impl Default for BicharConfig {
    fn default() -> Self {
        Self {
            steps: 4096,
            record_every: 64,
        }
    }
}

fn mat_mul(a: [[f64; 2]; 2], b: [f64; 4]) -> [f64; 4] {
    [
        a[0][0] * b[0] + a[0][1] * b[2],
        a[0][0] * b[1] + a[0][1] * b[3],
        a[1][0] * b[0] + a[1][1] * b[2],
        a[1][0] * b[1] + a[1][1] * b[3],
    ]
}

/// Heun integration of the bicharacteristic system and its variational
/// equation from one phase point. `index` is reported in errors.
pub fn bichar_flow(
    ham: &Hamiltonian,
    start: &PhasePoint,
    index: usize,
    path: &BrownianPath,
    cfg: &BicharConfig,
) -> Result<BicharTrajectory> {
    if cfg.steps == 0 || cfg.record_every == 0 || !path.steps().is_multiple_of(cfg.steps) {
        return Err(Error::invalid("flow steps must divide the path resolution"));
    }
    if start.xi == 0.0 || !start.xi.is_finite() || !start.x.is_finite() {
        return Err(Error::DegenerateDirection { t: 0.0, index });
    }
    let q = path.steps() / cfg.steps;
    let dt = path.horizon() / cfg.steps as f64;
    let sign = start.xi.signum();
    let (mut x, mut xi) = (start.x, start.xi);
    let mut jac = [1.0, 0.0, 0.0, 1.0];
    let mut traj = BicharTrajectory {
        label: start.label.clone(),
        times: vec![0.0],
        x: vec![x],
        xi: vec![xi],
        jacobian: vec![jac],
        hamiltonian: vec![ham.a1(x, xi)],
    };
    for i in 0..cfg.steps {
        let dw = path.values()[(i + 1) * q] - path.values()[i * q];
        let (v0, j0) = ham.field(x, xi, dw, dt);
        let xp = x + v0[0];
        let xip = xi + v0[1];
        let d0 = mat_mul(j0, jac);
        let jp: [f64; 4] = std::array::from_fn(|k| jac[k] + d0[k]);
        let (v1, j1) = ham.field(xp, xip, dw, dt);
        let d1 = mat_mul(j1, jp);
        x += 0.5 * (v0[0] + v1[0]);
        xi += 0.5 * (v0[1] + v1[1]);
        for k in 0..4 {
            jac[k] += 0.5 * (d0[k] + d1[k]);
        }
        let t = (i + 1) as f64 * dt;
        if xi.signum() != sign || xi == 0.0 || !xi.is_finite() {
            return Err(Error::DegenerateDirection { t, index });
        }
        if (i + 1) % cfg.record_every == 0 || i + 1 == cfg.steps {
            traj.times.push(t);
            traj.x.push(x);
            traj.xi.push(xi);
            traj.jacobian.push(jac);
            traj.hamiltonian.push(ham.a1(x, xi));
        }
    }
    Ok(traj)
}

/// Transport every phase point of `wf` along the same path.
pub fn propagate_wavefront(
    ham: &Hamiltonian,
    wf: &WavefrontSet,
    path: &BrownianPath,
    cfg: &BicharConfig,
) -> Result<Vec<BicharTrajectory>> {
    let indexed: Vec<(usize, &PhasePoint)> = wf.points.iter().enumerate().collect();
    par::map_slice(&indexed, |(i, p)| bichar_flow(ham, p, *i, path, cfg))
        .into_iter()
        .collect()
}

/// Wavefront set at recorded index `k`, positions wrapped into `[0, L)`.
pub fn wavefront_at(grid: &Grid1D, trajectories: &[BicharTrajectory], k: usize) -> WavefrontSet {
    WavefrontSet {
        points: trajectories
            .iter()
            .map(|t| PhasePoint::new(grid.wrap(t.x[k]), t.xi[k], t.label.clone()))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    /// Gaussian window standard deviation in grid spacings.
    pub window_width_dx: f64,
    /// Fraction of the resolved band (top of `|k| ≤ N/2`) treated as high.
    pub band_fraction: f64,
    /// Detections must reach this fraction of the largest score.
    pub rel_threshold: f64,
    /// Scores below this are treated as smooth.
    pub abs_floor: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            window_width_dx: 8.0,
            band_fraction: 1.0 / 3.0,
            rel_threshold: 0.5,
            abs_floor: 1e-10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub x: f64,
    pub score: f64,
}

/// High-band energy of `u · g(· − x_j)` relative to `|u|²`, per node.
pub fn singularity_scores(u: &Field, comp: usize, cfg: &DetectorConfig) -> Vec<f64> {
    let grid = u.grid().clone();
    let n = grid.n();
    let values = u.component(comp).to_vec();
    let total: f64 = values.iter().map(|v| v.norm_sqr()).sum::<f64>().max(f64::MIN_POSITIVE);
    let sigma = cfg.window_width_dx * grid.dx();
    let cutoff = (1.0 - cfg.band_fraction) * (n / 2) as f64;
    par::map_indexed(n, |j| {
        let xc = grid.node(j);
        let windowed: Vec<C64> = values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let d = grid.periodic_diff(grid.node(i), xc);
                v * (-0.5 * (d / sigma).powi(2)).exp()
            })
            .collect();
        let f = Field::from_values(&grid, 1, windowed).expect("same grid");
        let spec = dft_unchecked(&f);
        let high: f64 = spec
            .coeffs()
            .iter()
            .enumerate()
            .filter(|(k, _)| grid.wavenumber(*k).unsigned_abs() as f64 > cutoff)
            .map(|(_, c)| c.norm_sqr())
            .sum();
        high * n as f64 / total
    })
}

/// Local maxima of the score above both thresholds, refined by a parabola
/// through the neighbouring nodes.
pub fn detect_singularities(u: &Field, cfg: &DetectorConfig) -> Vec<Detection> {
    let grid = u.grid();
    let n = grid.n();
    let mut scores = vec![0.0; n];
    for c in 0..u.ncomp() {
        for (s, v) in scores.iter_mut().zip(singularity_scores(u, c, cfg)) {
            *s += v;
        }
    }
    let max = scores.iter().copied().fold(0.0, f64::max);
    let threshold = (cfg.rel_threshold * max).max(cfg.abs_floor);
    let mut out = Vec::new();
    for j in 0..n {
        let (l, c, r) = (scores[(j + n - 1) % n], scores[j], scores[(j + 1) % n]);
        if c < threshold || c < l || c <= r {
            continue;
        }
        let denom = l - 2.0 * c + r;
        let shift = if denom < 0.0 { (0.5 * (l - r) / denom).clamp(-0.5, 0.5) } else { 0.0 };
        out.push(Detection {
            x: grid.wrap(grid.node(j) + shift * grid.dx()),
            score: c,
        });
    }
    out
}
