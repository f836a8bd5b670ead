//! Stochastic characteristics for scalar first-order equations
//! `du = (α u_x + c u) ∘dw + (β u_x + e u) dt`.
//!
//! Along `dX = −α(X)∘dw − β(X)dt` the solution satisfies
//! `d u(t,X_t) = c(X_t) u ∘dw + e(X_t) u dt`, hence
//! `u(t, φ_t(x)) = u0(x) exp(∫ c(φ_τ x)∘dw + ∫ e(φ_τ x) dτ)`.

use crate::error::{Error, Result};
use crate::grid::{dft_unchecked, idft, Field, Grid1D, C64};
use crate::noise::BrownianPath;
use crate::par;
use crate::symbols::{Quantization, SeparableSymbol, XiMultiplier};

/// Periodic 4-point Lagrange interpolation on a uniform grid.
#[derive(Clone, Debug)]
pub struct PeriodicCubic<T> {
    values: Vec<T>,
    dx: f64,
}

impl<T> PeriodicCubic<T>
where
    T: Copy + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
{
    pub fn new(grid: &Grid1D, values: Vec<T>) -> Self {
        assert_eq!(values.len(), grid.n());
        Self { values, dx: grid.dx() }
    }

    pub fn eval(&self, x: f64) -> T {
        let n = self.values.len() as i64;
        let pos = x / self.dx;
        let i = pos.floor();
        let t = pos - i;
        let i = i as i64;
        let at = |k: i64| self.values[k.rem_euclid(n) as usize];
        let w0 = -t * (t - 1.0) * (t - 2.0) / 6.0;
        let w1 = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0;
        let w2 = -(t + 1.0) * t * (t - 2.0) / 2.0;
        let w3 = (t + 1.0) * t * (t - 1.0) / 6.0;
        at(i - 1) * w0 + at(i) * w1 + at(i + 1) * w2 + at(i + 2) * w3
    }
}

/// Spectral derivative of order `order` of real nodal samples.
pub fn spectral_derivative(grid: &Grid1D, values: &[f64], order: u32) -> Vec<f64> {
    let f = Field::from_values(grid, 1, values.iter().map(|&v| C64::new(v, 0.0)).collect())
        .expect("one sample per node");
    let mut spec = dft_unchecked(&f);
    let n = grid.n();
    for (j, v) in spec.coeffs_mut().iter_mut().enumerate() {
        // the Nyquist mode has no real odd derivative
        if order % 2 == 1 && j == n / 2 {
            *v = C64::new(0.0, 0.0);
        } else {
            *v *= C64::new(0.0, grid.xi(j)).powu(order);
        }
    }
    idft(&spec).values().iter().map(|v| v.re).collect()
}

/// Trigonometric interpolation of one component at arbitrary points.
pub fn spectral_interpolate(u: &Field, comp: usize, xs: &[f64]) -> Vec<C64> {
    let grid = u.grid();
    let n = grid.n();
    let spec = dft_unchecked(u);
    let coeffs = spec.component(comp).to_vec();
    par::map_slice(xs, |&x| {
        let mut acc = C64::new(0.0, 0.0);
        for (j, c) in coeffs.iter().enumerate() {
            if j == n / 2 {
                acc += c * (grid.xi(j) * x).cos();
            } else {
                acc += c * C64::from_polar(1.0, grid.xi(j) * x);
            }
        }
        acc
    })
}

/// Nodal coefficients of a scalar first-order equation.
#[derive(Clone, Debug)]
pub struct TransportCoefficients {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Zeroth-order part of the noise operator.
    pub c: Vec<C64>,
    /// Zeroth-order part of the drift operator.
    pub e: Vec<C64>,
}

impl TransportCoefficients {
    pub fn from_fns(
        grid: &Grid1D,
        alpha: impl Fn(f64) -> f64,
        beta: impl Fn(f64) -> f64,
        c: impl Fn(f64) -> C64,
        e: impl Fn(f64) -> C64,
    ) -> Self {
        let xs = grid.nodes();
        Self {
            alpha: xs.iter().map(|&x| alpha(x)).collect(),
            beta: xs.iter().map(|&x| beta(x)).collect(),
            c: xs.iter().map(|&x| c(x)).collect(),
            e: xs.iter().map(|&x| e(x)).collect(),
        }
    }

    /// Read `α, c` from `a` and `β, e` from `b`. A right-quantized `γ ∂_x`
    /// term is `γ ∂_x + γ'`, so its coefficient derivative joins `c`/`e`.
    pub fn from_symbols(a: &SeparableSymbol, b: Option<&SeparableSymbol>) -> Result<Self> {
        let grid = a.grid().clone();
        let (alpha, c) = split_symbol(a)?;
        let (beta, e) = match b {
            Some(b) => split_symbol(b)?,
            None => (vec![0.0; grid.n()], vec![C64::new(0.0, 0.0); grid.n()]),
        };
        Ok(Self { alpha, beta, c, e })
    }
}

fn split_symbol(sym: &SeparableSymbol) -> Result<(Vec<f64>, Vec<C64>)> {
    if sym.dim() != 1 {
        return Err(Error::invalid("characteristics need a scalar symbol"));
    }
    let grid = sym.grid();
    let n = grid.n();
    let mut alpha = vec![0.0; n];
    let mut c = vec![C64::new(0.0, 0.0); n];
    for term in sym.terms() {
        match term.kind() {
            XiMultiplier::One => {
                for k in 0..n {
                    c[k] += term.coef()[k];
                }
            }
            XiMultiplier::Derivative => {
                if term.coef().iter().any(|v| v.im.abs() > 1e-12 * (1.0 + v.re.abs())) {
                    return Err(Error::invalid("transport coefficient must be real"));
                }
                let gamma: Vec<f64> = term.coef().iter().map(|v| v.re).collect();
                for k in 0..n {
                    alpha[k] += gamma[k];
                }
                if term.quantization() == Quantization::Right {
                    let dg = spectral_derivative(grid, &gamma, 1);
                    for k in 0..n {
                        c[k] += dg[k];
                    }
                }
            }
            _ => return Err(Error::invalid("characteristics need a first-order differential symbol")),
        }
    }
    Ok((alpha, c))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowSign {
    /// `dX = −α∘dw − β dt`, the characteristics of `du = α u_x ∘dw + β u_x dt`.
    Minus,
    /// `dX = +α∘dw + β dt`.
    Plus,
}

impl FlowSign {
    fn factor(self) -> f64 {
        match self {
            FlowSign::Minus => -1.0,
            FlowSign::Plus => 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlowConfig {
    pub steps: usize,
    pub sign: FlowSign,
    pub record_every: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            steps: 4096,
            sign: FlowSign::Minus,
            record_every: 64,
        }
    }
}

/// Flow `φ_t` sampled at the grid nodes.
#[derive(Clone, Debug)]
pub struct CharFlow {
    pub grid: Grid1D,
    pub times: Vec<f64>,
    /// Unwrapped `φ_t(x_j)` per recorded time.
    pub positions: Vec<Vec<f64>>,
    /// `∂_x φ_t(x_j)`.
    pub jacobian: Vec<Vec<f64>>,
    /// `∫ c(φ_τ x_j)∘dw + ∫ e(φ_τ x_j)dτ`.
    pub log_weight: Vec<Vec<C64>>,
    pub sign: FlowSign,
}

impl CharFlow {
    pub fn final_index(&self) -> usize {
        self.times.len() - 1
    }
}

/// Integrate the characteristic flow from every grid node with Heun.
pub fn flow_solve(coefs: &TransportCoefficients, grid: &Grid1D, path: &BrownianPath, cfg: &FlowConfig) -> Result<CharFlow> {
    let n = grid.n();
    if coefs.alpha.len() != n || coefs.beta.len() != n || coefs.c.len() != n || coefs.e.len() != n {
        return Err(Error::GridMismatch("coefficient samples do not match the grid"));
    }
    if cfg.steps == 0 || cfg.record_every == 0 {
        return Err(Error::invalid("steps and record_every must be >= 1"));
    }
    if !path.steps().is_multiple_of(cfg.steps) {
        return Err(Error::invalid("path resolution must be a multiple of flow steps"));
    }
    let q = path.steps() / cfg.steps;
    let inc: Vec<f64> = (0..cfg.steps)
        .map(|i| path.values()[(i + 1) * q] - path.values()[i * q])
        .collect();
    let dt = path.horizon() / cfg.steps as f64;
    let sg = cfg.sign.factor();
    let alpha = PeriodicCubic::new(grid, coefs.alpha.clone());
    let dalpha = PeriodicCubic::new(grid, spectral_derivative(grid, &coefs.alpha, 1));
    let beta = PeriodicCubic::new(grid, coefs.beta.clone());
    let dbeta = PeriodicCubic::new(grid, spectral_derivative(grid, &coefs.beta, 1));
    let c = PeriodicCubic::new(grid, coefs.c.clone());
    let e = PeriodicCubic::new(grid, coefs.e.clone());
    let record: Vec<usize> = (0..=cfg.steps)
        .filter(|i| i % cfg.record_every == 0 || *i == cfg.steps)
        .collect();

    // state (x, J, log weight) per node
    let per_node = par::map_indexed(n, |j| {
        let mut x = grid.node(j);
        let mut jac = 1.0;
        let mut lw = C64::new(0.0, 0.0);
        let mut out = Vec::with_capacity(record.len());
        out.push((x, jac, lw));
        for (i, &dw) in inc.iter().enumerate() {
            let v0 = sg * (alpha.eval(x) * dw + beta.eval(x) * dt);
            let d0 = sg * (dalpha.eval(x) * dw + dbeta.eval(x) * dt);
            let xp = x + v0;
            let jp = jac + d0 * jac;
            let v1 = sg * (alpha.eval(xp) * dw + beta.eval(xp) * dt);
            let d1 = sg * (dalpha.eval(xp) * dw + dbeta.eval(xp) * dt);
            let x_new = x + 0.5 * (v0 + v1);
            let jac_new = jac + 0.5 * (d0 * jac + d1 * jp);
            lw += (c.eval(x) + c.eval(x_new)) * (0.5 * dw) + (e.eval(x) + e.eval(x_new)) * (0.5 * dt);
            x = x_new;
            jac = jac_new;
            if (i + 1) % cfg.record_every == 0 || i + 1 == cfg.steps {
                out.push((x, jac, lw));
            }
        }
        out
    });

    let mut flow = CharFlow {
        grid: grid.clone(),
        times: record.iter().map(|&i| i as f64 * dt).collect(),
        positions: Vec::with_capacity(record.len()),
        jacobian: Vec::with_capacity(record.len()),
        log_weight: Vec::with_capacity(record.len()),
        sign: cfg.sign,
    };
    for r in 0..record.len() {
        let pos: Vec<f64> = per_node.iter().map(|v| v[r].0).collect();
        let t = flow.times[r];
        let monotone = pos.windows(2).all(|w| w[1] > w[0]) && pos[n - 1] < pos[0] + grid.length();
        if !monotone {
            return Err(Error::NonMonotoneFlow { t });
        }
        flow.positions.push(pos);
        flow.jacobian.push(per_node.iter().map(|v| v[r].1).collect());
        flow.log_weight.push(per_node.iter().map(|v| v[r].2).collect());
    }
    Ok(flow)
}

/// `φ⁻¹(x_i)` at every grid node from the forward samples `y_j = φ(x_j)`
/// and slopes `φ'(x_j)`, by cubic Hermite interpolation of the inverse.
pub fn flow_invert(grid: &Grid1D, positions: &[f64], jacobian: &[f64]) -> Result<Vec<f64>> {
    let n = grid.n();
    let len = grid.length();
    if positions.len() != n || jacobian.len() != n {
        return Err(Error::GridMismatch("flow samples do not match the grid"));
    }
    if !(positions.windows(2).all(|w| w[1] > w[0]) && positions[n - 1] < positions[0] + len) {
        return Err(Error::NonMonotoneFlow { t: f64::NAN });
    }
    if jacobian.iter().any(|&j| !(j > 0.0)) {
        return Err(Error::invalid("flow Jacobian must be positive"));
    }
    let y = |k: usize| {
        let wraps = (k / n) as f64;
        positions[k % n] + wraps * len
    };
    let x0 = |k: usize| grid.node(k % n) + (k / n) as f64 * len;
    let slope = |k: usize| 1.0 / jacobian[k % n];
    let base = positions[0];
    Ok((0..n)
        .map(|i| {
            let target = grid.node(i);
            // shift target into [y_0, y_0 + L)
            let shift = ((target - base) / len).floor();
            let xt = target - shift * len;
            // interval y_k <= xt < y_{k+1} in the doubled array
            let (mut lo, mut hi) = (0usize, n);
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if y(mid) <= xt {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let (ya, yb) = (y(lo), y(lo + 1));
            let h = yb - ya;
            let t = (xt - ya) / h;
            let (t2, t3) = (t * t, t * t * t);
            let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
            let h10 = t3 - 2.0 * t2 + t;
            let h01 = -2.0 * t3 + 3.0 * t2;
            let h11 = t3 - t2;
            let inv = h00 * x0(lo) + h10 * h * slope(lo) + h01 * x0(lo + 1) + h11 * h * slope(lo + 1);
            inv + shift * len
        })
        .collect())
}

/// `u0(φ_t⁻¹ x)` at recorded time index `k`.
pub fn transport_solution(u0: &Field, flow: &CharFlow, k: usize) -> Result<Field> {
    if u0.ncomp() != 1 || u0.grid() != &flow.grid {
        return Err(Error::GridMismatch("u0 must be scalar on the flow grid"));
    }
    let inv = flow_invert(&flow.grid, &flow.positions[k], &flow.jacobian[k])?;
    let vals = spectral_interpolate(u0, 0, &inv);
    Field::from_values(&flow.grid, 1, vals)
}

/// `u0(φ_t⁻¹ x) exp(Λ(φ_t⁻¹ x))` where `Λ` is the accumulated zeroth-order
/// integral along each characteristic.
pub fn representation_lower_order(u0: &Field, flow: &CharFlow, k: usize) -> Result<Field> {
    let base = transport_solution(u0, flow, k)?;
    let inv = flow_invert(&flow.grid, &flow.positions[k], &flow.jacobian[k])?;
    let weight = PeriodicCubic::new(&flow.grid, flow.log_weight[k].clone());
    let vals = base
        .values()
        .iter()
        .zip(&inv)
        .map(|(u, &y)| u * weight.eval(y).exp())
        .collect();
    Field::from_values(&flow.grid, 1, vals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::sample_brownian;

    #[test]
    fn cubic_interpolation_is_fourth_order() {
        let mut errs = Vec::new();
        for n in [32, 64] {
            let g = Grid1D::periodic(n).unwrap();
            let f = PeriodicCubic::new(&g, g.nodes().iter().map(|x| x.sin()).collect());
            let err = (0..97)
                .map(|i| {
                    let x = i as f64 * 0.0713;
                    (f.eval(x) - x.sin()).abs()
                })
                .fold(0.0, f64::max);
            errs.push(err);
        }
        assert!(errs[0] / errs[1] > 12.0, "{errs:?}");
    }

    #[test]
    fn spectral_derivative_of_trig_polynomial() {
        let g = Grid1D::periodic(32).unwrap();
        let v: Vec<f64> = g.nodes().iter().map(|x| (3.0 * x).sin()).collect();
        let d2 = spectral_derivative(&g, &v, 2);
        for (x, d) in g.nodes().iter().zip(d2) {
            assert!((d + 9.0 * (3.0 * x).sin()).abs() < 1e-11);
        }
    }

    #[test]
    fn constant_speed_flow_is_rigid_shift() {
        let g = Grid1D::periodic(32).unwrap();
        let coefs = TransportCoefficients::from_fns(&g, |_| 1.0, |_| 0.0, |_| C64::new(0.0, 0.0), |_| C64::new(0.0, 0.0));
        let path = sample_brownian(256, 1.0, 4, 0).unwrap();
        let cfg = FlowConfig {
            steps: 256,
            ..FlowConfig::default()
        };
        let flow = flow_solve(&coefs, &g, &path, &cfg).unwrap();
        let k = flow.final_index();
        let w = path.values()[256];
        for (j, x) in flow.positions[k].iter().enumerate() {
            assert!((x - (g.node(j) - w)).abs() < 1e-12);
        }
        let inv = flow_invert(&g, &flow.positions[k], &flow.jacobian[k]).unwrap();
        for (i, y) in inv.iter().enumerate() {
            assert!((y - (g.node(i) + w)).abs() < 1e-10);
        }
    }

    #[test]
    fn inversion_round_trip_for_smooth_diffeomorphism() {
        let g = Grid1D::periodic(128).unwrap();
        let phi = |x: f64| x + 0.3 * x.sin() + 0.4;
        let dphi = |x: f64| 1.0 + 0.3 * x.cos();
        let pos: Vec<f64> = g.nodes().iter().map(|&x| phi(x)).collect();
        let jac: Vec<f64> = g.nodes().iter().map(|&x| dphi(x)).collect();
        let inv = flow_invert(&g, &pos, &jac).unwrap();
        for (i, y) in inv.iter().enumerate() {
            let back = g.periodic_diff(phi(*y), g.node(i));
            assert!(back.abs() < 1e-6, "{back}");
        }
    }

    #[test]
    fn symmetrized_symbol_contributes_half_derivative() {
        let g = Grid1D::periodic(64).unwrap();
        let a = crate::symbols::symmetrized_transport_fn(&g, |x| 1.0 + 0.5 * x.sin(), None);
        let tc = TransportCoefficients::from_symbols(&a, None).unwrap();
        for (k, x) in g.nodes().iter().enumerate() {
            assert!((tc.alpha[k] - (1.0 + 0.5 * x.sin())).abs() < 1e-12);
            assert!((tc.c[k].re - 0.25 * x.cos()).abs() < 1e-10);
        }
    }
}
