//! Separable pseudodifferential symbols `Σ_k c_k(x) m_k(ξ)`, their
//! quantization on the periodic grid, exact discrete adjoints, and
//! power-iteration diagnostics for the operator families `A`, `B`, `L`, `M`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{dft_unchecked, idft, Field, Grid1D, C64};
use crate::par;

/// Order in which the coefficient and the Fourier multiplier act.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantization {
    /// `c(x) · m(D) u` (Kohn–Nirenberg).
    Left,
    /// `m(D) (c(x) u)`.
    Right,
}

/// Frequency-side factor of a term.
#[derive(Clone, Debug, PartialEq)]
pub enum XiMultiplier {
    /// `m(ξ) = 1`
    One,
    /// `m(ξ) = iξ`, i.e. `∂_x`
    Derivative,
    /// `m(ξ) = |ξ|`
    Abs,
    /// Arbitrary samples in native frequency order.
    Samples(Vec<C64>),
}

impl XiMultiplier {
    pub fn samples(&self, grid: &Grid1D) -> Vec<C64> {
        let n = grid.n();
        match self {
            XiMultiplier::One => vec![C64::new(1.0, 0.0); n],
            XiMultiplier::Derivative => (0..n).map(|j| C64::new(0.0, grid.xi(j))).collect(),
            XiMultiplier::Abs => (0..n).map(|j| C64::new(grid.xi(j).abs(), 0.0)).collect(),
            XiMultiplier::Samples(v) => v.clone(),
        }
    }
}

/// One term `c(x) ⊗ m(ξ)` of a separable symbol. `coef` holds the `d'×d'`
/// matrix samples laid out as `coef[(i*d' + j)*N + node]`.
#[derive(Clone, Debug)]
pub struct SymbolTerm {
    quantization: Quantization,
    kind: XiMultiplier,
    coef: Vec<C64>,
    mult: Vec<C64>,
}

impl SymbolTerm {
    /// Scalar term with per-node coefficient samples.
    pub fn scalar(
        grid: &Grid1D,
        coef: Vec<C64>,
        multiplier: XiMultiplier,
        quantization: Quantization,
    ) -> Result<Self> {
        Self::matrix(grid, 1, coef, multiplier, quantization)
    }

    /// Scalar term whose coefficient is a real function of `x`.
    pub fn scalar_fn(
        grid: &Grid1D,
        f: impl Fn(f64) -> f64,
        multiplier: XiMultiplier,
        quantization: Quantization,
    ) -> Self {
        let coef = grid.nodes().into_iter().map(|x| C64::new(f(x), 0.0)).collect();
        Self::matrix(grid, 1, coef, multiplier, quantization).expect("consistent sizes")
    }

    pub fn matrix(
        grid: &Grid1D,
        dim: usize,
        coef: Vec<C64>,
        multiplier: XiMultiplier,
        quantization: Quantization,
    ) -> Result<Self> {
        let n = grid.n();
        if coef.len() != dim * dim * n {
            return Err(Error::invalid(format!(
                "coefficient needs {} samples, got {}",
                dim * dim * n,
                coef.len()
            )));
        }
        let mult = multiplier.samples(grid);
        if mult.len() != n {
            return Err(Error::invalid(format!(
                "multiplier needs {n} samples, got {}",
                mult.len()
            )));
        }
        if coef.iter().chain(&mult).any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::NonFinite("symbol samples"));
        }
        Ok(Self {
            quantization,
            kind: multiplier,
            coef,
            mult,
        })
    }

    pub fn quantization(&self) -> Quantization {
        self.quantization
    }

    pub fn kind(&self) -> &XiMultiplier {
        &self.kind
    }

    pub fn coef(&self) -> &[C64] {
        &self.coef
    }

    pub fn multiplier(&self) -> &[C64] {
        &self.mult
    }

    fn coef_at(&self, n: usize, dim: usize, i: usize, j: usize) -> &[C64] {
        let start = (i * dim + j) * n;
        &self.coef[start..start + n]
    }

    /// Exact L² adjoint: `(c m(D))* = m̄(D) c^H` and vice versa.
    fn adjoint(&self, n: usize, dim: usize) -> SymbolTerm {
        let mut coef = vec![C64::new(0.0, 0.0); self.coef.len()];
        for i in 0..dim {
            for j in 0..dim {
                let src = self.coef_at(n, dim, j, i);
                let dst = (i * dim + j) * n;
                for k in 0..n {
                    coef[dst + k] = src[k].conj();
                }
            }
        }
        let mult: Vec<C64> = self.mult.iter().map(|m| m.conj()).collect();
        let kind = match self.kind {
            XiMultiplier::One => XiMultiplier::One,
            XiMultiplier::Abs => XiMultiplier::Abs,
            _ => XiMultiplier::Samples(mult.clone()),
        };
        SymbolTerm {
            quantization: match self.quantization {
                Quantization::Left => Quantization::Right,
                Quantization::Right => Quantization::Left,
            },
            kind,
            coef,
            mult,
        }
    }
}

/// A finite tensor-sum symbol `Σ_k c_k(x) m_k(ξ)` of order `m`.
#[derive(Clone, Debug)]
pub struct SeparableSymbol {
    grid: Grid1D,
    dim: usize,
    order: f64,
    terms: Vec<SymbolTerm>,
    mult_bound: f64,
}

impl SeparableSymbol {
    pub fn new(grid: &Grid1D, dim: usize, order: f64, terms: Vec<SymbolTerm>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::invalid("symbol needs at least one term"));
        }
        if dim == 0 {
            return Err(Error::invalid("symbol dimension must be >= 1"));
        }
        let n = grid.n();
        for t in &terms {
            if t.coef.len() != dim * dim * n || t.mult.len() != n {
                return Err(Error::invalid("term sizes do not match grid/dimension"));
            }
        }
        let mult_bound = terms
            .iter()
            .flat_map(|t| {
                t.mult
                    .iter()
                    .enumerate()
                    .map(|(j, m)| m.norm() / (1.0 + grid.xi(j).abs()).powf(order))
            })
            .fold(0.0, f64::max);
        Ok(Self {
            grid: grid.clone(),
            dim,
            order,
            terms,
            mult_bound,
        })
    }

    pub fn identity(grid: &Grid1D, dim: usize) -> Self {
        let n = grid.n();
        let mut coef = vec![C64::new(0.0, 0.0); dim * dim * n];
        for i in 0..dim {
            for k in 0..n {
                coef[(i * dim + i) * n + k] = C64::new(1.0, 0.0);
            }
        }
        let term = SymbolTerm::matrix(grid, dim, coef, XiMultiplier::One, Quantization::Left)
            .expect("consistent sizes");
        Self::new(grid, dim, 0.0, vec![term]).expect("nonempty")
    }

    /// Scalar multiplication operator `u ↦ c(x) u`.
    pub fn multiplication(grid: &Grid1D, coef: Vec<C64>) -> Result<Self> {
        let term = SymbolTerm::scalar(grid, coef, XiMultiplier::One, Quantization::Left)?;
        Self::new(grid, 1, 0.0, vec![term])
    }

    /// Scalar `α(x) ∂_x` in left quantization (not symmetrized).
    pub fn transport_left(grid: &Grid1D, alpha: impl Fn(f64) -> f64) -> Self {
        let term = SymbolTerm::scalar_fn(grid, alpha, XiMultiplier::Derivative, Quantization::Left);
        Self::new(grid, 1, 1.0, vec![term]).expect("nonempty")
    }

    /// Constant-coefficient Fourier multiplier `m(D)` acting on each component.
    pub fn fourier_multiplier(grid: &Grid1D, dim: usize, order: f64, m: XiMultiplier) -> Result<Self> {
        let n = grid.n();
        let mut coef = vec![C64::new(0.0, 0.0); dim * dim * n];
        for i in 0..dim {
            for k in 0..n {
                coef[(i * dim + i) * n + k] = C64::new(1.0, 0.0);
            }
        }
        let term = SymbolTerm::matrix(grid, dim, coef, m, Quantization::Left)?;
        Self::new(grid, dim, order, vec![term])
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> f64 {
        self.order
    }

    pub fn terms(&self) -> &[SymbolTerm] {
        &self.terms
    }

    /// Constant `C` with `|m_k(ξ)| ≤ C (1+|ξ|)^m` on the grid.
    pub fn multiplier_bound(&self) -> f64 {
        self.mult_bound
    }

    /// Upper bound on the spectral radius of the discrete operator:
    /// `Σ_k max_x |c_k(x)|_∞ · max_ξ |m_k(ξ)|` (row-sum matrix norm).
    pub fn spectral_radius_bound(&self) -> f64 {
        let n = self.grid.n();
        let d = self.dim;
        self.terms
            .iter()
            .map(|t| {
                let cmax = (0..n)
                    .map(|k| {
                        (0..d)
                            .map(|i| (0..d).map(|j| t.coef[(i * d + j) * n + k].norm()).sum::<f64>())
                            .fold(0.0, f64::max)
                    })
                    .fold(0.0, f64::max);
                let mmax = t.mult.iter().map(|m| m.norm()).fold(0.0, f64::max);
                cmax * mmax
            })
            .sum()
    }

    /// The exact discrete L² adjoint as a symbol.
    pub fn adjoint(&self) -> SeparableSymbol {
        let n = self.grid.n();
        SeparableSymbol {
            grid: self.grid.clone(),
            dim: self.dim,
            order: self.order,
            terms: self.terms.iter().map(|t| t.adjoint(n, self.dim)).collect(),
            mult_bound: self.mult_bound,
        }
    }

    /// Scale every coefficient by `factor`.
    pub fn scaled(&self, factor: C64) -> SeparableSymbol {
        let mut out = self.clone();
        for t in &mut out.terms {
            for c in &mut t.coef {
                *c *= factor;
            }
        }
        out
    }

    /// Real transport coefficient `α(x)` collected from all scalar `∂_x`
    /// terms, if the symbol has principal part `α(x) iξ`.
    pub fn transport_coefficient(&self) -> Option<Vec<f64>> {
        if self.dim != 1 {
            return None;
        }
        let n = self.grid.n();
        let mut alpha = vec![0.0; n];
        let mut found = false;
        for t in &self.terms {
            if t.kind == XiMultiplier::Derivative {
                found = true;
                for k in 0..n {
                    alpha[k] += t.coef[k].re;
                }
            }
        }
        found.then_some(alpha)
    }

    /// Sum of the scalar zeroth-order (`m ≡ 1`) coefficients.
    pub fn zeroth_order_coefficient(&self) -> Option<Vec<C64>> {
        if self.dim != 1 {
            return None;
        }
        let n = self.grid.n();
        let mut a0 = vec![C64::new(0.0, 0.0); n];
        for t in &self.terms {
            if t.kind == XiMultiplier::One {
                for k in 0..n {
                    a0[k] += t.coef[k];
                }
            }
        }
        Some(a0)
    }

    fn check_field(&self, u: &Field) -> Result<()> {
        if u.grid() != &self.grid {
            return Err(Error::GridMismatch("symbol and field grids differ"));
        }
        if u.ncomp() != self.dim {
            return Err(Error::ComponentMismatch {
                expected: self.dim,
                found: u.ncomp(),
            });
        }
        Ok(())
    }
}

/// Options for operator application.
#[derive(Clone, Copy, Debug, Default)]
pub struct ApplyOptions {
    /// Zero modes with `|k| > N/3` before applying each multiplier.
    pub dealias: bool,
}

pub fn apply_pdo(sym: &SeparableSymbol, u: &Field) -> Result<Field> {
    sym.check_field(u)?;
    Ok(apply_unchecked(sym, u, ApplyOptions::default()))
}

pub fn apply_pdo_with(sym: &SeparableSymbol, u: &Field, opts: ApplyOptions) -> Result<Field> {
    sym.check_field(u)?;
    Ok(apply_unchecked(sym, u, opts))
}

pub fn apply_adjoint(sym: &SeparableSymbol, u: &Field) -> Result<Field> {
    sym.check_field(u)?;
    Ok(apply_unchecked(&sym.adjoint(), u, ApplyOptions::default()))
}

fn dealias_mask(grid: &Grid1D, j: usize) -> bool {
    (grid.wavenumber(j).unsigned_abs() as usize) * 3 <= grid.n()
}

/// Orthogonal projection onto the resolved band `|k| ≤ N/3`.
pub fn band_project(u: &Field) -> Field {
    let grid = u.grid();
    let mut spec = dft_unchecked(u);
    for chunk in spec.coeffs_mut().chunks_mut(grid.n()) {
        for (j, v) in chunk.iter_mut().enumerate() {
            if !dealias_mask(grid, j) {
                *v = C64::new(0.0, 0.0);
            }
        }
    }
    idft(&spec)
}

pub(crate) fn apply_unchecked(sym: &SeparableSymbol, u: &Field, opts: ApplyOptions) -> Field {
    let grid = &sym.grid;
    let n = grid.n();
    let d = sym.dim;
    let mut out = Field::zeros(grid, d);
    let mut uh: Option<Vec<C64>> = None;
    let mut buf = vec![C64::new(0.0, 0.0); n];
    for term in &sym.terms {
        match term.quantization {
            Quantization::Left => {
                let uh = uh.get_or_insert_with(|| dft_unchecked(u).coeffs().to_vec());
                for j in 0..d {
                    let src = &uh[j * n..(j + 1) * n];
                    for k in 0..n {
                        buf[k] = if opts.dealias && !dealias_mask(grid, k) {
                            C64::new(0.0, 0.0)
                        } else {
                            term.mult[k] * src[k]
                        };
                    }
                    grid.inverse_in_place(&mut buf);
                    for i in 0..d {
                        let c = term.coef_at(n, d, i, j);
                        let dst = out.component_mut(i);
                        for k in 0..n {
                            dst[k] += c[k] * buf[k];
                        }
                    }
                }
            }
            Quantization::Right => {
                for i in 0..d {
                    buf.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
                    for j in 0..d {
                        let c = term.coef_at(n, d, i, j);
                        let src = u.component(j);
                        for k in 0..n {
                            buf[k] += c[k] * src[k];
                        }
                    }
                    grid.forward_in_place(&mut buf);
                    for k in 0..n {
                        buf[k] = if opts.dealias && !dealias_mask(grid, k) {
                            C64::new(0.0, 0.0)
                        } else {
                            buf[k] * term.mult[k]
                        };
                    }
                    grid.inverse_in_place(&mut buf);
                    let dst = out.component_mut(i);
                    for k in 0..n {
                        dst[k] += buf[k];
                    }
                }
            }
        }
    }
    out
}

/// `a u = ½(α ∂_x u + ∂_x(α u)) + a0 u`. With `a0 = 0` the discrete
/// operator is exactly skew-adjoint in the L² pairing.
pub fn make_symmetrized_transport(
    grid: &Grid1D,
    alpha: &[C64],
    a0: Option<&[C64]>,
) -> Result<SeparableSymbol> {
    if alpha.len() != grid.n() {
        return Err(Error::invalid("alpha must have one sample per node"));
    }
    if alpha.iter().any(|a| a.im != 0.0) {
        return Err(Error::invalid("transport coefficient alpha must be real"));
    }
    let half: Vec<C64> = alpha.iter().map(|a| C64::new(0.5 * a.re, 0.0)).collect();
    let mut terms = vec![
        SymbolTerm::scalar(grid, half.clone(), XiMultiplier::Derivative, Quantization::Left)?,
        SymbolTerm::scalar(grid, half, XiMultiplier::Derivative, Quantization::Right)?,
    ];
    if let Some(a0) = a0 {
        terms.push(SymbolTerm::scalar(
            grid,
            a0.to_vec(),
            XiMultiplier::One,
            Quantization::Left,
        )?);
    }
    SeparableSymbol::new(grid, 1, 1.0, terms)
}

/// Convenience wrapper taking real closures for `α` and `a0`.
pub fn symmetrized_transport_fn(
    grid: &Grid1D,
    alpha: impl Fn(f64) -> f64,
    a0: Option<&dyn Fn(f64) -> C64>,
) -> SeparableSymbol {
    let nodes = grid.nodes();
    let alpha: Vec<C64> = nodes.iter().map(|&x| C64::new(alpha(x), 0.0)).collect();
    let a0: Option<Vec<C64>> = a0.map(|f| nodes.iter().map(|&x| f(x)).collect());
    make_symmetrized_transport(grid, &alpha, a0.as_deref()).expect("real alpha")
}

type SymbolFn = dyn Fn(f64) -> SeparableSymbol + Send + Sync;

/// Time-indexed family `t ↦ a_t(x, ξ)` on `[0, T]`.
#[derive(Clone)]
pub enum TimeSymbolFamily {
    Constant(Arc<SeparableSymbol>),
    /// Piecewise constant: `symbols[i]` on `[times[i], times[i+1])`.
    Table {
        times: Vec<f64>,
        symbols: Vec<Arc<SeparableSymbol>>,
    },
    /// Closed-form coefficients evaluated on demand.
    Closure { horizon: f64, f: Arc<SymbolFn> },
}

impl std::fmt::Debug for TimeSymbolFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TimeSymbolFamily::Constant(s) => f.debug_tuple("Constant").field(&s.order).finish(),
            TimeSymbolFamily::Table { times, .. } => {
                f.debug_struct("Table").field("samples", &times.len()).finish()
            }
            TimeSymbolFamily::Closure { horizon, .. } => {
                f.debug_struct("Closure").field("horizon", horizon).finish()
            }
        }
    }
}

/// Adjacent-sample deviation summary used to check continuity in `t`.
#[derive(Clone, Debug)]
pub struct ContinuityReport {
    pub max_deviation: f64,
    pub median_deviation: f64,
    pub continuous: bool,
}

fn coef_distance(a: &SeparableSymbol, b: &SeparableSymbol) -> f64 {
    if a.terms.len() != b.terms.len() {
        return f64::INFINITY;
    }
    a.terms
        .iter()
        .zip(&b.terms)
        .map(|(s, t)| {
            s.coef
                .iter()
                .zip(&t.coef)
                .map(|(x, y)| (x - y).norm())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

impl TimeSymbolFamily {
    pub fn constant(sym: SeparableSymbol) -> Self {
        TimeSymbolFamily::Constant(Arc::new(sym))
    }

    pub fn closure(horizon: f64, f: impl Fn(f64) -> SeparableSymbol + Send + Sync + 'static) -> Self {
        TimeSymbolFamily::Closure {
            horizon,
            f: Arc::new(f),
        }
    }

    /// Piecewise-constant table; rejected if the samples jump by more than
    /// ten times the median adjacent deviation.
    pub fn table(times: Vec<f64>, symbols: Vec<SeparableSymbol>) -> Result<Self> {
        if times.is_empty() || times.len() != symbols.len() {
            return Err(Error::invalid("table needs matching, nonempty times and symbols"));
        }
        if times[0] != 0.0 || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("table times must start at 0 and increase"));
        }
        let fam = TimeSymbolFamily::Table {
            times,
            symbols: symbols.into_iter().map(Arc::new).collect(),
        };
        let report = fam.continuity();
        if !report.continuous {
            return Err(Error::invalid(format!(
                "coefficient table jumps: max adjacent deviation {:e} vs median {:e}",
                report.max_deviation, report.median_deviation
            )));
        }
        Ok(fam)
    }

    pub fn at(&self, t: f64) -> Arc<SeparableSymbol> {
        match self {
            TimeSymbolFamily::Constant(s) => Arc::clone(s),
            TimeSymbolFamily::Table { times, symbols } => {
                let idx = times.partition_point(|&ti| ti <= t).saturating_sub(1);
                Arc::clone(&symbols[idx])
            }
            TimeSymbolFamily::Closure { f, .. } => Arc::new(f(t)),
        }
    }

    pub fn is_time_dependent(&self) -> bool {
        !matches!(self, TimeSymbolFamily::Constant(_))
    }

    /// Representative sample times inside `[0, horizon]`.
    pub fn sample_times(&self, horizon: f64) -> Vec<f64> {
        match self {
            TimeSymbolFamily::Constant(_) => vec![0.0],
            TimeSymbolFamily::Table { times, .. } => {
                let stride = (times.len() / 16).max(1);
                times.iter().step_by(stride).copied().filter(|&t| t <= horizon).collect()
            }
            TimeSymbolFamily::Closure { horizon: h, .. } => {
                let h = h.min(horizon);
                (0..=8).map(|i| h * i as f64 / 8.0).collect()
            }
        }
    }

    pub fn continuity(&self) -> ContinuityReport {
        let samples: Vec<Arc<SeparableSymbol>> = match self {
            TimeSymbolFamily::Constant(_) => Vec::new(),
            TimeSymbolFamily::Table { symbols, .. } => symbols.clone(),
            TimeSymbolFamily::Closure { horizon, f } => {
                (0..=64).map(|i| Arc::new(f(horizon * i as f64 / 64.0))).collect()
            }
        };
        let mut devs: Vec<f64> = samples
            .windows(2)
            .map(|w| coef_distance(&w[0], &w[1]))
            .collect();
        if devs.is_empty() {
            return ContinuityReport {
                max_deviation: 0.0,
                median_deviation: 0.0,
                continuous: true,
            };
        }
        let max = devs.iter().copied().fold(0.0, f64::max);
        devs.sort_by(|a, b| a.total_cmp(b));
        let median = devs[devs.len() / 2];
        ContinuityReport {
            max_deviation: max,
            median_deviation: median,
            continuous: max.is_finite() && max <= 10.0 * median + 1e-12,
        }
    }
}

/// Operator-norm estimates behind the boundedness conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorDiagnostics {
    pub norm_a: f64,
    pub norm_b: f64,
    pub norm_l: f64,
    pub norm_m: f64,
    pub s: f64,
    pub trials: usize,
    pub iterations: usize,
}

pub const POWER_ITERATIONS: usize = 64;
pub const POWER_TOLERANCE: f64 = 1e-6;
const DIAGNOSTIC_SEED: u64 = 0x5eed_d1a9;

fn sobolev_lift(u: &Field, s: f64) -> Field {
    if s == 0.0 {
        return u.clone();
    }
    let grid = u.grid();
    let n = grid.n();
    let mut spec = dft_unchecked(u);
    for chunk in spec.coeffs_mut().chunks_mut(n) {
        for (j, v) in chunk.iter_mut().enumerate() {
            *v *= (1.0 + grid.xi(j).powi(2)).powf(0.5 * s);
        }
    }
    idft(&spec)
}

/// Largest singular value of an L²-self-adjoint `op` acting `H^s → H^s`,
/// via power iteration on `Λ^{-s} T Λ^{2s} T Λ^{-s}`.
pub fn power_norm<F>(grid: &Grid1D, dim: usize, s: f64, trials: usize, iterations: usize, op: F) -> f64
where
    F: Fn(&Field) -> Field + Sync + Send,
{
    let restarts = par::map_indexed(trials.max(1), |trial| {
        let mut rng = ChaCha20Rng::seed_from_u64(DIAGNOSTIC_SEED);
        rng.set_stream(trial as u64);
        let mut v = Field::from_fn(grid, dim, |_, _| {
            C64::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng))
        });
        let nv = v.l2_norm();
        v.scale(C64::new(1.0 / nv, 0.0));
        let mut rayleigh = 0.0_f64;
        for _ in 0..iterations {
            let lifted = op(&sobolev_lift(&v, -s));
            let w = sobolev_lift(&op(&sobolev_lift(&lifted, 2.0 * s)), -s);
            let next = w.values().iter().zip(v.values()).map(|(a, b)| (a * b.conj()).re).sum::<f64>()
                / grid.n() as f64;
            let nw = w.l2_norm();
            if !nw.is_finite() || !next.is_finite() {
                return f64::INFINITY;
            }
            if nw == 0.0 {
                return 0.0;
            }
            let converged = (next - rayleigh).abs() <= POWER_TOLERANCE * next.abs().max(1e-300);
            rayleigh = next;
            v = w;
            v.scale(C64::new(1.0 / nw, 0.0));
            if converged {
                break;
            }
        }
        rayleigh.max(0.0).sqrt()
    });
    restarts.into_iter().fold(0.0, f64::max)
}

fn banded<'a, F>(op: &'a F) -> impl Fn(&Field) -> Field + Sync + Send + 'a
where
    F: Fn(&Field) -> Field + Sync + Send,
{
    move |v: &Field| band_project(&op(&band_project(v)))
}

/// Estimate `sup_t ‖A_t‖, ‖B_t‖, ‖L_t‖, ‖M_t‖` on `H^s` where
/// `A = a + a*`, `B = b + b*`, `L = A a + a* A`, `M = L a + a* L`.
/// Norms are taken on the resolved band `|k| ≤ N/3`; outside it the
/// discrete commutators pick up wrap-around terms of size `O(N)`.
pub fn estimate_conditions(
    fam_a: Option<&TimeSymbolFamily>,
    fam_b: Option<&TimeSymbolFamily>,
    grid: &Grid1D,
    dim: usize,
    s: f64,
    horizon: f64,
    trials: usize,
) -> Result<OperatorDiagnostics> {
    if trials == 0 {
        return Err(Error::invalid("trials must be >= 1"));
    }
    let opts = ApplyOptions::default();
    let mut diag = OperatorDiagnostics {
        norm_a: 0.0,
        norm_b: 0.0,
        norm_l: 0.0,
        norm_m: 0.0,
        s,
        trials,
        iterations: POWER_ITERATIONS,
    };
    if let Some(fam) = fam_a {
        for t in fam.sample_times(horizon) {
            let a = fam.at(t);
            if a.grid() != grid || a.dim() != dim {
                return Err(Error::GridMismatch("symbol family does not match the problem grid"));
            }
            let a_star = a.adjoint();
            let big_a = |v: &Field| {
                apply_unchecked(&a, v, opts).add(&apply_unchecked(&a_star, v, opts))
            };
            let big_l = |v: &Field| {
                big_a(&apply_unchecked(&a, v, opts)).add(&apply_unchecked(&a_star, &big_a(v), opts))
            };
            let big_m = |v: &Field| {
                big_l(&apply_unchecked(&a, v, opts)).add(&apply_unchecked(&a_star, &big_l(v), opts))
            };
            diag.norm_a = diag.norm_a.max(power_norm(grid, dim, s, trials, POWER_ITERATIONS, banded(&big_a)));
            diag.norm_l = diag.norm_l.max(power_norm(grid, dim, s, trials, POWER_ITERATIONS, banded(&big_l)));
            diag.norm_m = diag.norm_m.max(power_norm(grid, dim, s, trials, POWER_ITERATIONS, banded(&big_m)));
        }
    }
    if let Some(fam) = fam_b {
        for t in fam.sample_times(horizon) {
            let b = fam.at(t);
            if b.grid() != grid || b.dim() != dim {
                return Err(Error::GridMismatch("symbol family does not match the problem grid"));
            }
            let b_star = b.adjoint();
            let big_b = |v: &Field| {
                apply_unchecked(&b, v, opts).add(&apply_unchecked(&b_star, v, opts))
            };
            diag.norm_b = diag.norm_b.max(power_norm(grid, dim, s, trials, POWER_ITERATIONS, banded(&big_b)));
        }
    }
    Ok(diag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::sobolev_norm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_field(grid: &Grid1D, ncomp: usize, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field::from_fn(grid, ncomp, |_, _| {
            C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    fn l2_inner(u: &Field, v: &Field) -> C64 {
        u.values().iter().zip(v.values()).map(|(a, b)| a * b.conj()).sum::<C64>()
            / u.grid().n() as f64
    }

    #[test]
    fn identity_symbol_is_identity() {
        let g = Grid1D::periodic(32).unwrap();
        let u = random_field(&g, 2, 1);
        let id = SeparableSymbol::identity(&g, 2);
        assert!(apply_pdo(&id, &u).unwrap().sub(&u).max_abs() < 1e-14);
    }

    #[test]
    fn derivative_on_fourier_mode() {
        let l = 3.0;
        let g = Grid1D::new(64, l).unwrap();
        let k0 = 2.0 * PI / l;
        let u = Field::from_fn(&g, 1, |_, x| C64::from_polar(1.0, k0 * x));
        let d = SeparableSymbol::fourier_multiplier(&g, 1, 1.0, XiMultiplier::Derivative).unwrap();
        let du = apply_pdo(&d, &u).unwrap();
        let mut expect = u.clone();
        expect.scale(C64::new(0.0, k0));
        assert!(du.sub(&expect).max_abs() < 1e-12);
    }

    /// Sixth-order central differences of a smooth periodic field.
    fn fd_derivative(values: &[f64], dx: f64) -> Vec<f64> {
        let n = values.len();
        let at = |j: isize| values[j.rem_euclid(n as isize) as usize];
        (0..n as isize)
            .map(|j| {
                (45.0 * (at(j + 1) - at(j - 1)) - 9.0 * (at(j + 2) - at(j - 2))
                    + (at(j + 3) - at(j - 3)))
                    / (60.0 * dx)
            })
            .collect()
    }

    #[test]
    fn variable_coefficient_matches_finite_differences() {
        let g = Grid1D::periodic(512).unwrap();
        let alpha = |x: f64| 1.0 + 0.5 * x.sin();
        let f = |x: f64| (x.sin()).exp() * (2.0 * x).cos();
        let u = Field::from_real_fn(&g, f);
        let sym = SeparableSymbol::transport_left(&g, alpha);
        let au = apply_pdo(&sym, &u).unwrap();
        let samples: Vec<f64> = u.values().iter().map(|v| v.re).collect();
        let deriv = fd_derivative(&samples, g.dx());
        let oracle = Field::from_fn(&g, 1, |_, _| C64::new(0.0, 0.0));
        let mut oracle = oracle;
        for (j, v) in oracle.values_mut().iter_mut().enumerate() {
            *v = C64::new(alpha(g.node(j)) * deriv[j], 0.0);
        }
        let rel = au.sub(&oracle).l2_norm() / oracle.l2_norm();
        assert!(rel <= 1e-6, "relative error {rel}");
    }

    #[test]
    fn adjoint_duality_on_random_pairs() {
        let g = Grid1D::periodic(64).unwrap();
        let n = g.n();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut rand_c = || C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let coef: Vec<C64> = (0..4 * n).map(|_| rand_c()).collect();
        let coef2: Vec<C64> = (0..4 * n).map(|_| rand_c()).collect();
        let mult: Vec<C64> = (0..n).map(|_| rand_c()).collect();
        let sym = SeparableSymbol::new(
            &g,
            2,
            1.0,
            vec![
                SymbolTerm::matrix(&g, 2, coef, XiMultiplier::Derivative, Quantization::Left).unwrap(),
                SymbolTerm::matrix(&g, 2, coef2, XiMultiplier::Samples(mult), Quantization::Right)
                    .unwrap(),
            ],
        )
        .unwrap();
        for trial in 0..100 {
            let u = random_field(&g, 2, 1000 + trial);
            let v = random_field(&g, 2, 5000 + trial);
            let lhs = l2_inner(&apply_pdo(&sym, &u).unwrap(), &v);
            let rhs = l2_inner(&u, &apply_adjoint(&sym, &v).unwrap());
            assert!((lhs - rhs).norm() <= 1e-10 * lhs.norm().max(1.0), "{lhs} vs {rhs}");
        }
        // double adjoint
        let u = random_field(&g, 2, 3);
        let direct = apply_pdo(&sym, &u).unwrap();
        let twice = apply_pdo(&sym.adjoint().adjoint(), &u).unwrap();
        assert!(direct.sub(&twice).max_abs() < 1e-12);
    }

    #[test]
    fn constant_coefficient_adjoint_conjugates_multiplier() {
        let g = Grid1D::periodic(32).unwrap();
        let d = SeparableSymbol::fourier_multiplier(&g, 1, 1.0, XiMultiplier::Derivative).unwrap();
        let adj = d.adjoint();
        for (m, ma) in d.terms()[0].multiplier().iter().zip(adj.terms()[0].multiplier()) {
            assert_eq!(*ma, m.conj());
        }
    }

    #[test]
    fn symmetrized_transport_is_skew() {
        let g = Grid1D::periodic(128).unwrap();
        let a = symmetrized_transport_fn(&g, |x| 1.0 + 0.5 * x.sin(), None);
        for seed in 0..5 {
            let u = Field::from_fn(&g, 1, {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                move |_, _| C64::new(rng.random_range(-1.0..1.0), 0.0)
            });
            let au = apply_pdo(&a, &u).unwrap();
            let q = l2_inner(&au, &u) + l2_inner(&u, &au);
            assert!(q.norm() < 1e-10, "{q}");
        }
        // alpha == 1 reduces to the pure derivative
        let one = symmetrized_transport_fn(&g, |_| 1.0, None);
        let d = SeparableSymbol::fourier_multiplier(&g, 1, 1.0, XiMultiplier::Derivative).unwrap();
        let u = random_field(&g, 1, 8);
        let diff = apply_pdo(&one, &u).unwrap().sub(&apply_pdo(&d, &u).unwrap());
        assert!(diff.max_abs() < 1e-12);
        assert_eq!(a.transport_coefficient().unwrap()[0], 1.0);
    }

    #[test]
    fn symmetrized_transport_rejects_complex_alpha() {
        let g = Grid1D::periodic(16).unwrap();
        let alpha = vec![C64::new(1.0, 0.1); 16];
        assert!(make_symmetrized_transport(&g, &alpha, None).is_err());
    }

    #[test]
    fn apply_checks_shapes() {
        let g = Grid1D::periodic(16).unwrap();
        let h = Grid1D::periodic(32).unwrap();
        let d = SeparableSymbol::identity(&g, 1);
        assert!(matches!(apply_pdo(&d, &Field::zeros(&h, 1)), Err(Error::GridMismatch(_))));
        assert!(matches!(
            apply_pdo(&d, &Field::zeros(&g, 2)),
            Err(Error::ComponentMismatch { .. })
        ));
    }

    #[test]
    fn linearity() {
        let g = Grid1D::periodic(64).unwrap();
        let a = symmetrized_transport_fn(&g, |x| 2.0 + x.cos(), Some(&|x: f64| C64::new(x.sin(), 0.3)));
        let u = random_field(&g, 1, 1);
        let v = random_field(&g, 1, 2);
        let alpha = C64::new(0.7, -1.3);
        let mut combo = v.clone();
        combo.axpy(alpha, &u);
        let lhs = apply_pdo(&a, &combo).unwrap();
        let mut rhs = apply_pdo(&a, &v).unwrap();
        rhs.axpy(alpha, &apply_pdo(&a, &u).unwrap());
        assert!(lhs.sub(&rhs).max_abs() < 1e-12 * lhs.max_abs().max(1.0));
    }

    #[test]
    fn derivative_order_bound() {
        let g = Grid1D::periodic(64).unwrap();
        let d = SeparableSymbol::fourier_multiplier(&g, 1, 1.0, XiMultiplier::Derivative).unwrap();
        assert!((d.multiplier_bound() - 1.0).abs() < 1.0);
        for seed in 0..10 {
            let u = random_field(&g, 1, seed);
            for s in [-1.0, 0.0, 1.0] {
                let lhs = sobolev_norm(&apply_pdo(&d, &u).unwrap(), s).unwrap();
                let rhs = sobolev_norm(&u, s + 1.0).unwrap();
                assert!(lhs <= rhs * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn dealiasing_zeroes_top_third() {
        let g = Grid1D::periodic(32).unwrap();
        let u = Field::from_fn(&g, 1, |_, x| C64::from_polar(1.0, 12.0 * x));
        let id = SeparableSymbol::identity(&g, 1);
        let out = apply_pdo_with(&id, &u, ApplyOptions { dealias: true }).unwrap();
        assert!(out.max_abs() < 1e-13);
    }

    #[test]
    fn conditions_vanish_for_skew_transport() {
        let g = Grid1D::periodic(64).unwrap();
        let a = TimeSymbolFamily::constant(symmetrized_transport_fn(&g, |x| 1.0 + 0.5 * x.sin(), None));
        let d = estimate_conditions(Some(&a), None, &g, 1, 1.0, 1.0, 2).unwrap();
        assert!(d.norm_a < 1e-8 && d.norm_l < 1e-8 && d.norm_m < 1e-8, "{d:?}");
        assert_eq!(d.norm_b, 0.0);
    }

    #[test]
    fn conditions_multiplication_operator_norm() {
        let g = Grid1D::periodic(64).unwrap();
        let beta = |x: f64| 0.3 + 0.2 * x.cos();
        let coef: Vec<C64> = g.nodes().iter().map(|&x| C64::new(beta(x), 0.0)).collect();
        let a = TimeSymbolFamily::constant(SeparableSymbol::multiplication(&g, coef).unwrap());
        let d = estimate_conditions(Some(&a), None, &g, 1, 0.0, 1.0, 8).unwrap();
        let oracle = g.nodes().iter().map(|&x| (2.0 * beta(x)).abs()).fold(0.0, f64::max);
        assert!((d.norm_a - oracle).abs() < 1e-2 * oracle, "{} vs {oracle}", d.norm_a);
    }

    #[test]
    fn conditions_non_symmetrized_transport_bounded_under_refinement() {
        let mut norms = Vec::new();
        for n in [32, 64, 128] {
            let g = Grid1D::periodic(n).unwrap();
            let a = TimeSymbolFamily::constant(SeparableSymbol::transport_left(&g, |x| 1.0 + 0.5 * x.sin()));
            let d = estimate_conditions(Some(&a), None, &g, 1, 0.0, 1.0, 4).unwrap();
            norms.push(d.norm_a);
        }
        assert!(norms.iter().all(|&x| x > 1e-3 && x.is_finite()));
        // A = -α' + commutator remainder: O(1), no growth in N.
        assert!(norms[2] < 2.0 * norms[0], "{norms:?}");
    }

    #[test]
    fn table_family_lookup_and_jump_detection() {
        let g = Grid1D::periodic(16).unwrap();
        let times: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let syms: Vec<SeparableSymbol> = times
            .iter()
            .map(|&t| SeparableSymbol::transport_left(&g, move |x| 1.0 + t * x.sin()))
            .collect();
        let fam = TimeSymbolFamily::table(times.clone(), syms).unwrap();
        let at = fam.at(0.35);
        let expect = 1.0 + 0.3 * g.node(3).sin();
        assert!((at.terms()[0].coef()[3].re - expect).abs() < 1e-14);

        let mut jumpy: Vec<SeparableSymbol> = times
            .iter()
            .map(|&t| SeparableSymbol::transport_left(&g, move |x| 1.0 + 0.01 * t * x.sin()))
            .collect();
        jumpy[5] = SeparableSymbol::transport_left(&g, |_| 5.0);
        assert!(TimeSymbolFamily::table(times, jumpy).is_err());
    }
}
