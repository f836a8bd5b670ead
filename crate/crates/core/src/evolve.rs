//! Time integration of
//! `du = a_t(x,D)u ∘dw + b_t(x,D)u dt + f ∘dw + g dt`
//! and its variants: mollified, Wong–Zakai (polygonal driver), skeleton
//! (Cameron–Martin driver), backward, and the linear evolution operator.
//!
//! The Stratonovich solver is a stochastic Heun predictor–corrector. Each
//! path increment is split into `k` equal sub-increments (the polygonal
//! interpolant inside the step) so that `ρ(a)·|Δw|/k` stays in the region
//! where the explicit scheme does not amplify high wavenumbers; `k` depends
//! only on the problem and config, never on the path.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{
    dft_unchecked, idft, mollify, sobolev_norm, spectral_inner, spectral_norm_sq, Field, Grid1D,
    Mollifier, C64,
};
use crate::noise::{BrownianPath, CameronMartinPath, PolygonalPath};
use crate::symbols::{apply_unchecked, ApplyOptions, SeparableSymbol, TimeSymbolFamily};

/// Solutions whose `|u|_s` grows beyond this multiple of the initial norm
/// are treated as unstable.
pub const BLOWUP_FACTOR: f64 = 1e6;
/// Log-amplitude budget for the top Fourier mode over the whole horizon.
const HEUN_GROWTH_BUDGET: f64 = 2.0;
/// Courant-type bound `ρ·h` for the deterministic RK4 drives.
const RK4_COURANT: f64 = 0.5;

/// Time-indexed forcing `f(t)` or `g(t)`.
#[derive(Clone, Debug)]
pub enum Forcing {
    Constant(Field),
    /// Piecewise constant: `fields[i]` on `[times[i], times[i+1])`.
    Table { times: Vec<f64>, fields: Vec<Field> },
}

impl Forcing {
    pub fn at(&self, t: f64) -> &Field {
        match self {
            Forcing::Constant(f) => f,
            Forcing::Table { times, fields } => {
                let idx = times.partition_point(|&ti| ti <= t).saturating_sub(1);
                &fields[idx]
            }
        }
    }

    fn fields(&self) -> Vec<&Field> {
        match self {
            Forcing::Constant(f) => vec![f],
            Forcing::Table { fields, .. } => fields.iter().collect(),
        }
    }
}

/// Problem data for one SPDE.
#[derive(Clone, Debug)]
pub struct SpdeProblem {
    pub a: Option<TimeSymbolFamily>,
    pub b: Option<TimeSymbolFamily>,
    pub f: Option<Forcing>,
    pub g: Option<Forcing>,
    pub u0: Field,
    pub s: f64,
    pub horizon: f64,
    /// Multiplies every `∘dw` term; `√ε` for small-noise studies.
    pub noise_scale: f64,
}

impl SpdeProblem {
    pub fn new(u0: Field, a: Option<TimeSymbolFamily>, b: Option<TimeSymbolFamily>, s: f64, horizon: f64) -> Self {
        Self {
            a,
            b,
            f: None,
            g: None,
            u0,
            s,
            horizon,
            noise_scale: 1.0,
        }
    }

    pub fn grid(&self) -> &Grid1D {
        self.u0.grid()
    }

    pub fn ncomp(&self) -> usize {
        self.u0.ncomp()
    }

    pub fn with_noise_scale(&self, scale: f64) -> Self {
        let mut out = self.clone();
        out.noise_scale = scale;
        out
    }

    pub fn with_u0(&self, u0: Field) -> Self {
        let mut out = self.clone();
        out.u0 = u0;
        out
    }

    /// Same problem without the inhomogeneous terms `f`, `g`.
    pub fn homogeneous(&self) -> Self {
        let mut out = self.clone();
        out.f = None;
        out.g = None;
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !self.s.is_finite() {
            return Err(Error::invalid("Sobolev index must be finite"));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::invalid("horizon must be positive"));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::invalid("noise scale must be >= 0"));
        }
        if !self.u0.is_finite() {
            return Err(Error::NonFinite("initial datum"));
        }
        for forcing in self.f.iter().chain(self.g.iter()) {
            for field in forcing.fields() {
                self.u0.check_compatible(field)?;
            }
        }
        for fam in self.a.iter().chain(self.b.iter()) {
            let sym = fam.at(0.0);
            if sym.grid() != self.grid() {
                return Err(Error::GridMismatch("symbol grid differs from u0 grid"));
            }
            if sym.dim() != self.ncomp() {
                return Err(Error::ComponentMismatch {
                    expected: self.ncomp(),
                    found: sym.dim(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    /// Stochastic Heun predictor–corrector (Stratonovich).
    Heun,
    /// Implicit midpoint by fixed-point iteration (Stratonovich).
    Midpoint,
    /// Explicit Euler without the Itô correction. Inconsistent with the
    /// Stratonovich equation and unstable for first-order `a`; kept for the
    /// negative experiment only.
    EulerIto,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Heun => "heun",
            Scheme::Midpoint => "midpoint",
            Scheme::EulerIto => "euler-ito",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvolveConfig {
    /// Solver steps `M` on `[0, T]`.
    pub steps: usize,
    pub scheme: Scheme,
    /// Pre-compose `a`, `b` with `J_ε` when set.
    pub mollifier_eps: Option<f64>,
    /// Minimum sub-steps per step (Heun) or per polygonal segment (RK4).
    pub substeps: usize,
    /// Keep every `record_every`-th state (the final state is always kept).
    pub record_every: usize,
    pub dealias: bool,
    /// Log `|u|_s`, `⟨Au,u⟩_s`, `⟨Lu,u⟩_s`, `⟨Bu,u⟩_s` at recorded states.
    pub energy_log: bool,
    pub midpoint_iterations: usize,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self {
            steps: 4096,
            scheme: Scheme::Heun,
            mollifier_eps: None,
            substeps: 1,
            record_every: 64,
            dealias: false,
            energy_log: false,
            midpoint_iterations: 3,
        }
    }
}

impl EvolveConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.substeps == 0 || self.record_every == 0 {
            return Err(Error::invalid("steps, substeps and record_every must be >= 1"));
        }
        if let Some(eps) = self.mollifier_eps {
            if !(eps > 0.0) {
                return Err(Error::invalid("mollifier eps must be positive"));
            }
        }
        Ok(())
    }
}

/// Energy diagnostics at one recorded state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyRow {
    pub t: f64,
    /// Driver value at `t` (Brownian path, polygonal path, or `h`).
    pub w: f64,
    pub norm_s: f64,
    pub quad_a: f64,
    pub quad_l: f64,
    pub quad_b: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub fields: Vec<Field>,
    /// Driver value at each recorded time.
    pub driver: Vec<f64>,
    pub energy_log: Vec<EnergyRow>,
    pub driver_fingerprint: String,
    pub s: f64,
    /// Sub-steps per solver step actually used.
    pub substeps: usize,
}

impl Trajectory {
    pub fn final_field(&self) -> &Field {
        self.fields.last().expect("trajectory is never empty")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `sup_t |self(t) − other(t)|_r` over shared recorded times.
    pub fn sup_distance(&self, other: &Trajectory, r: f64) -> Result<f64> {
        if self.times.len() != other.times.len() {
            return Err(Error::invalid("trajectories have different record grids"));
        }
        let mut sup = 0.0_f64;
        for (a, b) in self.fields.iter().zip(&other.fields) {
            a.check_compatible(b)?;
            sup = sup.max(sobolev_norm(&a.sub(b), r)?);
        }
        Ok(sup)
    }
}

/// The coefficient operators of one problem with solver options applied.
struct Operators<'a> {
    p: &'a SpdeProblem,
    sigma: f64,
    moll: Option<Mollifier>,
    opts: ApplyOptions,
}

impl<'a> Operators<'a> {
    fn new(p: &'a SpdeProblem, cfg: &EvolveConfig, sigma: f64) -> Result<Self> {
        let moll = match cfg.mollifier_eps {
            Some(eps) => Some(Mollifier::new(p.grid(), eps)?),
            None => None,
        };
        Ok(Self {
            p,
            sigma,
            moll,
            opts: ApplyOptions {
                dealias: cfg.dealias,
            },
        })
    }

    fn smoothed<'b>(&self, u: &'b Field) -> std::borrow::Cow<'b, Field> {
        match &self.moll {
            Some(m) => std::borrow::Cow::Owned(mollify(u, m)),
            None => std::borrow::Cow::Borrowed(u),
        }
    }

    fn apply_family(&self, fam: &TimeSymbolFamily, t: f64, u: &Field) -> Field {
        let sym = fam.at(t);
        apply_unchecked(&sym, &self.smoothed(u), self.opts)
    }

    /// `σ (a_t J u + f_t)`
    fn diffusion(&self, t: f64, u: &Field, homogeneous: bool) -> Field {
        let mut out = match &self.p.a {
            Some(fam) => self.apply_family(fam, t, u),
            None => Field::zeros(u.grid(), u.ncomp()),
        };
        if !homogeneous {
            if let Some(f) = &self.p.f {
                out.axpy_re(1.0, f.at(t));
            }
        }
        if self.sigma != 1.0 {
            out.scale(C64::new(self.sigma, 0.0));
        }
        out
    }

    /// `b_t J u + g_t`
    fn drift(&self, t: f64, u: &Field, homogeneous: bool) -> Field {
        let mut out = match &self.p.b {
            Some(fam) => self.apply_family(fam, t, u),
            None => Field::zeros(u.grid(), u.ncomp()),
        };
        if !homogeneous {
            if let Some(g) = &self.p.g {
                out.axpy_re(1.0, g.at(t));
            }
        }
        out
    }

    fn radius(&self, fam: Option<&TimeSymbolFamily>) -> f64 {
        let Some(fam) = fam else { return 0.0 };
        fam.sample_times(self.p.horizon)
            .into_iter()
            .map(|t| radius_with_profile(&fam.at(t), self.moll.as_ref()))
            .fold(0.0, f64::max)
    }

    fn radius_a(&self) -> f64 {
        self.sigma.abs() * self.radius(self.p.a.as_ref())
    }

    fn radius_b(&self) -> f64 {
        self.radius(self.p.b.as_ref())
    }

    fn energy_row(&self, t: f64, w: f64, u: &Field) -> EnergyRow {
        let s = self.p.s;
        let uh = dft_unchecked(u);
        let norm_s = spectral_norm_sq(&uh, s).sqrt();
        let (quad_a, quad_l) = match &self.p.a {
            Some(fam) => {
                let mut au = self.apply_family(fam, t, u);
                au.scale(C64::new(self.sigma, 0.0));
                let mut aau = self.apply_family(fam, t, &au);
                aau.scale(C64::new(self.sigma, 0.0));
                let auh = dft_unchecked(&au);
                let aauh = dft_unchecked(&aau);
                let qa = 2.0 * spectral_inner(&auh, &uh, s).re;
                let ql = 2.0 * spectral_inner(&aauh, &uh, s).re + 2.0 * spectral_norm_sq(&auh, s);
                (qa, ql)
            }
            None => (0.0, 0.0),
        };
        let quad_b = match &self.p.b {
            Some(fam) => {
                let bu = dft_unchecked(&self.apply_family(fam, t, u));
                2.0 * spectral_inner(&bu, &uh, s).re
            }
            None => 0.0,
        };
        EnergyRow {
            t,
            w,
            norm_s,
            quad_a,
            quad_l,
            quad_b,
        }
    }
}

fn radius_with_profile(sym: &SeparableSymbol, moll: Option<&Mollifier>) -> f64 {
    match moll {
        None => sym.spectral_radius_bound(),
        Some(m) => {
            let n = sym.grid().n();
            let d = sym.dim();
            sym.terms()
                .iter()
                .map(|t| {
                    let cmax = (0..n)
                        .map(|k| {
                            (0..d)
                                .map(|i| (0..d).map(|j| t.coef()[(i * d + j) * n + k].norm()).sum::<f64>())
                                .fold(0.0, f64::max)
                        })
                        .fold(0.0, f64::max);
                    let mmax = t
                        .multiplier()
                        .iter()
                        .zip(m.profile())
                        .map(|(v, p)| v.norm() * p)
                        .fold(0.0, f64::max);
                    cmax * mmax
                })
                .sum()
        }
    }
}

/// Sub-steps per Heun step: enough that the top mode's cumulative
/// log-amplification `Σ (ρ|Δw|/k)⁴/8 ≈ 3ρ⁴ΔtT/(8k³)` stays within budget
/// and the drift satisfies `ρ_b Δt/k ≤ 1/2`.
pub fn heun_substeps(p: &SpdeProblem, cfg: &EvolveConfig) -> Result<usize> {
    let ops = Operators::new(p, cfg, p.noise_scale)?;
    Ok(heun_substeps_for(&ops, p.horizon, cfg))
}

fn heun_substeps_for(ops: &Operators<'_>, horizon: f64, cfg: &EvolveConfig) -> usize {
    let dt = horizon / cfg.steps as f64;
    let rho_a = ops.radius_a();
    let rho_b = ops.radius_b();
    let noise = (3.0 * rho_a.powi(4) * dt * horizon / (8.0 * HEUN_GROWTH_BUDGET)).cbrt();
    let drift = rho_b * dt / RK4_COURANT;
    let k = noise.max(drift).ceil();
    cfg.substeps.max(if k.is_finite() { k as usize } else { 1 }).max(1)
}

struct Guard {
    limit: f64,
    s: f64,
}

impl Guard {
    fn new(p: &SpdeProblem, u0: &Field) -> Result<Self> {
        let mut base = sobolev_norm(u0, p.s)?;
        for forcing in p.f.iter().chain(p.g.iter()) {
            for field in forcing.fields() {
                base = base.max(sobolev_norm(field, p.s)?);
            }
        }
        Ok(Self {
            limit: BLOWUP_FACTOR * base.max(f64::MIN_POSITIVE),
            s: p.s,
        })
    }

    fn check(&self, t: f64, u: &Field) -> Result<()> {
        let norm = if u.is_finite() {
            spectral_norm_sq(&dft_unchecked(u), self.s).sqrt()
        } else {
            f64::INFINITY
        };
        if norm > self.limit || !norm.is_finite() {
            return Err(Error::BlowUp {
                t,
                norm,
                limit: self.limit,
            });
        }
        Ok(())
    }
}

/// One Stratonovich step of size `h` with noise increment `dw` from `t`.
fn stochastic_step(
    ops: &Operators<'_>,
    scheme: Scheme,
    iterations: usize,
    t: f64,
    h: f64,
    dw: f64,
    u: &Field,
    homogeneous: bool,
) -> Field {
    let fa = ops.diffusion(t, u, homogeneous);
    let fb = ops.drift(t, u, homogeneous);
    let mut pred = u.clone();
    pred.axpy_re(dw, &fa);
    pred.axpy_re(h, &fb);
    match scheme {
        Scheme::EulerIto => pred,
        Scheme::Heun => {
            let ga = ops.diffusion(t + h, &pred, homogeneous);
            let gb = ops.drift(t + h, &pred, homogeneous);
            let mut next = u.clone();
            next.axpy_re(0.5 * dw, &fa);
            next.axpy_re(0.5 * dw, &ga);
            next.axpy_re(0.5 * h, &fb);
            next.axpy_re(0.5 * h, &gb);
            next
        }
        Scheme::Midpoint => {
            let mut next = pred;
            for _ in 0..iterations.max(1) {
                let mid = u.add(&next).scaled(0.5);
                let ma = ops.diffusion(t + 0.5 * h, &mid, homogeneous);
                let mb = ops.drift(t + 0.5 * h, &mid, homogeneous);
                next = u.clone();
                next.axpy_re(dw, &ma);
                next.axpy_re(h, &mb);
            }
            next
        }
    }
}

/// Classical RK4 for `u' = D(t,u) r + G(t,u)` with a constant rate `r`.
fn rk4_step(ops: &Operators<'_>, t: f64, h: f64, rate: f64, u: &Field) -> Field {
    let rhs = |t: f64, v: &Field| {
        let mut out = ops.drift(t, v, false);
        if rate != 0.0 {
            out.axpy_re(rate, &ops.diffusion(t, v, false));
        }
        out
    };
    let k1 = rhs(t, u);
    let mut tmp = u.clone();
    tmp.axpy_re(0.5 * h, &k1);
    let k2 = rhs(t + 0.5 * h, &tmp);
    let mut tmp = u.clone();
    tmp.axpy_re(0.5 * h, &k2);
    let k3 = rhs(t + 0.5 * h, &tmp);
    let mut tmp = u.clone();
    tmp.axpy_re(h, &k3);
    let k4 = rhs(t + h, &tmp);
    let mut next = u.clone();
    next.axpy_re(h / 6.0, &k1);
    next.axpy_re(h / 3.0, &k2);
    next.axpy_re(h / 3.0, &k3);
    next.axpy_re(h / 6.0, &k4);
    next
}

struct Recorder<'a> {
    ops: &'a Operators<'a>,
    every: usize,
    energy: bool,
    traj: Trajectory,
}

impl<'a> Recorder<'a> {
    fn new(ops: &'a Operators<'a>, cfg: &EvolveConfig, fingerprint: String, substeps: usize) -> Self {
        Self {
            ops,
            every: cfg.record_every,
            energy: cfg.energy_log,
            traj: Trajectory {
                times: Vec::new(),
                fields: Vec::new(),
                driver: Vec::new(),
                energy_log: Vec::new(),
                driver_fingerprint: fingerprint,
                s: ops.p.s,
                substeps,
            },
        }
    }

    fn push(&mut self, t: f64, w: f64, u: &Field) {
        if self.energy {
            let row = self.ops.energy_row(t, w, u);
            self.traj.energy_log.push(row);
        }
        self.traj.times.push(t);
        self.traj.driver.push(w);
        self.traj.fields.push(u.clone());
    }

    fn maybe_push(&mut self, step: usize, last: usize, t: f64, w: f64, u: &Field) {
        if step.is_multiple_of(self.every) || step == last {
            self.push(t, w, u);
        }
    }
}

/// Driver increments for solver steps, aggregated when the path is finer.
fn solver_increments(path: &BrownianPath, steps: usize) -> Result<Vec<f64>> {
    let m = path.steps();
    if !m.is_multiple_of(steps) {
        return Err(Error::invalid(format!(
            "path resolution {m} is not a multiple of solver steps {steps}"
        )));
    }
    let q = m / steps;
    Ok((0..steps)
        .map(|i| path.values()[(i + 1) * q] - path.values()[i * q])
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn run_stochastic(
    p: &SpdeProblem,
    ops: &Operators<'_>,
    cfg: &EvolveConfig,
    increments: &[f64],
    t0: f64,
    dt: f64,
    w0: f64,
    u_init: &Field,
    homogeneous: bool,
    fingerprint: String,
) -> Result<Trajectory> {
    let k = heun_substeps_for(ops, p.horizon, cfg);
    let guard = Guard::new(p, u_init)?;
    let mut rec = Recorder::new(ops, cfg, fingerprint, k);
    let mut u = u_init.clone();
    let mut w = w0;
    rec.push(t0, w, &u);
    let h = dt / k as f64;
    let last = increments.len();
    for (i, &dw) in increments.iter().enumerate() {
        let t_step = t0 + i as f64 * dt;
        let sub_dw = dw / k as f64;
        for j in 0..k {
            u = stochastic_step(
                ops,
                cfg.scheme,
                cfg.midpoint_iterations,
                t_step + j as f64 * h,
                h,
                sub_dw,
                &u,
                homogeneous,
            );
        }
        w += dw;
        let t = t0 + (i + 1) as f64 * dt;
        guard.check(t, &u)?;
        rec.maybe_push(i + 1, last, t, w, &u);
    }
    Ok(rec.traj)
}

/// Solve the Stratonovich equation on `[0, T]` along `path`.
pub fn integrate_spde(p: &SpdeProblem, path: &BrownianPath, cfg: &EvolveConfig) -> Result<Trajectory> {
    p.validate()?;
    cfg.validate()?;
    check_horizon(p, path.horizon())?;
    let inc = solver_increments(path, cfg.steps)?;
    let ops = Operators::new(p, cfg, p.noise_scale)?;
    let dt = p.horizon / cfg.steps as f64;
    run_stochastic(p, &ops, cfg, &inc, 0.0, dt, 0.0, &p.u0, false, path.fingerprint())
}

/// Like [`integrate_spde`] but stopping at the grid time `t_end`. The
/// states coincide bitwise with those of the full solve.
pub fn integrate_spde_until(p: &SpdeProblem, path: &BrownianPath, t_end: f64, cfg: &EvolveConfig) -> Result<Trajectory> {
    p.validate()?;
    cfg.validate()?;
    check_horizon(p, path.horizon())?;
    let inc = solver_increments(path, cfg.steps)?;
    let k_end = node_index(t_end, p.horizon, cfg.steps)?;
    let ops = Operators::new(p, cfg, p.noise_scale)?;
    let dt = p.horizon / cfg.steps as f64;
    run_stochastic(p, &ops, cfg, &inc[..k_end], 0.0, dt, 0.0, &p.u0, false, path.fingerprint())
}

/// `σ (a_t J u + f_t)`, the integrand of the `∘dw` term.
pub fn diffusion_term(p: &SpdeProblem, cfg: &EvolveConfig, t: f64, u: &Field) -> Result<Field> {
    p.u0.check_compatible(u)?;
    let ops = Operators::new(p, cfg, p.noise_scale)?;
    Ok(ops.diffusion(t, u, false))
}

fn check_horizon(p: &SpdeProblem, horizon: f64) -> Result<()> {
    if (horizon - p.horizon).abs() > 1e-12 * p.horizon {
        return Err(Error::GridMismatch("driver horizon differs from problem horizon"));
    }
    Ok(())
}

/// Deterministic RK4 solve driven by a piecewise-constant rate on the
/// solver grid, with `substeps[i]` RK4 sub-steps in step `i`.
fn run_driven(
    p: &SpdeProblem,
    ops: &Operators<'_>,
    cfg: &EvolveConfig,
    rates: &[f64],
    substeps: &[usize],
    fingerprint: String,
) -> Result<Trajectory> {
    let dt = p.horizon / cfg.steps as f64;
    let guard = Guard::new(p, &p.u0)?;
    let kmax = substeps.iter().copied().max().unwrap_or(1);
    let mut rec = Recorder::new(ops, cfg, fingerprint, kmax);
    let mut u = p.u0.clone();
    let mut w = 0.0;
    rec.push(0.0, w, &u);
    let last = rates.len();
    for (i, (&rate, &k)) in rates.iter().zip(substeps).enumerate() {
        let t_step = i as f64 * dt;
        let h = dt / k as f64;
        for j in 0..k {
            u = rk4_step(ops, t_step + j as f64 * h, h, rate, &u);
        }
        w += rate * dt;
        let t = (i + 1) as f64 * dt;
        guard.check(t, &u)?;
        rec.maybe_push(i + 1, last, t, w, &u);
    }
    Ok(rec.traj)
}

/// Wong–Zakai approximation: the deterministic PDE driven by `ẇⁿ`,
/// recorded on the `cfg.steps` grid (which `n` must divide).
pub fn wong_zakai_solve(p: &SpdeProblem, poly: &PolygonalPath, cfg: &EvolveConfig) -> Result<Trajectory> {
    p.validate()?;
    cfg.validate()?;
    check_horizon(p, poly.horizon())?;
    let n = poly.segments();
    if !cfg.steps.is_multiple_of(n) {
        return Err(Error::invalid(format!(
            "segment count {n} must divide solver steps {}",
            cfg.steps
        )));
    }
    let ops = Operators::new(p, cfg, p.noise_scale)?;
    let per_seg = cfg.steps / n;
    let seg_len = poly.segment_length();
    let rho_a = ops.radius_a();
    let rho_b = ops.radius_b();
    let mut rates = Vec::with_capacity(cfg.steps);
    let mut subs = Vec::with_capacity(cfg.steps);
    for i in 0..n {
        let slope = poly.slope(i);
        let rule = ((slope.abs() * rho_a + rho_b) * seg_len / RK4_COURANT).ceil() as usize;
        let seg_total = cfg.substeps.max(rule).max(1);
        let per_step = seg_total.div_ceil(per_seg).max(1);
        for _ in 0..per_seg {
            rates.push(slope);
            subs.push(per_step);
        }
    }
    let fp = format!("poly:{n}:{:016x}", hash_f64s(poly.breakpoints()));
    run_driven(p, &ops, cfg, &rates, &subs, fp)
}

/// Skeleton `Ψ(h)`: `Ψ' = (aΨ + f) ḣ + bΨ + g`, `Ψ(0) = u0`. The noise
/// scale of `p` does not enter.
pub fn skeleton_solve(p: &SpdeProblem, h: &CameronMartinPath, cfg: &EvolveConfig) -> Result<Trajectory> {
    p.validate()?;
    cfg.validate()?;
    check_horizon(p, h.horizon())?;
    if h.steps() != cfg.steps {
        return Err(Error::GridMismatch("hdot samples must align with the solver grid"));
    }
    let ops = Operators::new(p, cfg, 1.0)?;
    let dt = p.horizon / cfg.steps as f64;
    let rho_a = ops.radius_a();
    let rho_b = ops.radius_b();
    let subs: Vec<usize> = h
        .hdot()
        .iter()
        .map(|r| cfg.substeps.max(((r.abs() * rho_a + rho_b) * dt / RK4_COURANT).ceil() as usize).max(1))
        .collect();
    let fp = format!("cm:{:016x}", hash_f64s(h.hdot()));
    run_driven(p, &ops, cfg, h.hdot(), &subs, fp)
}

fn node_index(t: f64, horizon: f64, steps: usize) -> Result<usize> {
    let pos = t / horizon * steps as f64;
    let k = pos.round();
    if (pos - k).abs() > 1e-6 || k < 0.0 || k > steps as f64 {
        return Err(Error::invalid(format!("time {t} is not a node of the {steps}-step grid")));
    }
    Ok(k as usize)
}

/// Backward equation `u(s) = φ − ∫_s^t a u ∘d̂w − ∫_s^t (b u) dτ` on
/// `[0, t_end]`, integrated in reversed time with the reversed increments of
/// the same path. Returned states are ordered by increasing `s`, so the
/// first entry is `U_b(t_end, 0)φ` and the last is `φ`.
pub fn backward_solve(
    p: &SpdeProblem,
    path: &BrownianPath,
    t_end: f64,
    phi: &Field,
    cfg: &EvolveConfig,
) -> Result<Trajectory> {
    p.validate()?;
    cfg.validate()?;
    check_horizon(p, path.horizon())?;
    p.u0.check_compatible(phi)?;
    if t_end > p.horizon * (1.0 + 1e-12) || t_end < 0.0 {
        return Err(Error::invalid("t_end must lie in [0, T]"));
    }
    let inc = solver_increments(path, cfg.steps)?;
    let k_end = node_index(t_end, p.horizon, cfg.steps)?;
    let dt = p.horizon / cfg.steps as f64;
    if k_end == 0 {
        return Ok(Trajectory {
            times: vec![0.0],
            fields: vec![phi.clone()],
            driver: vec![0.0],
            energy_log: Vec::new(),
            driver_fingerprint: path.fingerprint(),
            s: p.s,
            substeps: 1,
        });
    }
    // Reversed problem: a → −a, b → −b, f → −f, g → −g.
    let mut rev = p.clone();
    rev.noise_scale = -p.noise_scale;
    rev.b = p.b.as_ref().map(negate_family);
    rev.g = p.g.as_ref().map(negate_forcing);
    // time-dependent coefficients are evaluated at s = t_end − r
    rev.a = p.a.as_ref().map(|fam| reverse_family(fam, t_end));
    rev.b = rev.b.as_ref().map(|fam| reverse_family(fam, t_end));
    let reversed: Vec<f64> = inc[..k_end].iter().rev().copied().collect();
    let ops = Operators::new(&rev, cfg, rev.noise_scale)?;
    let mut traj = run_stochastic(&rev, &ops, cfg, &reversed, 0.0, dt, 0.0, phi, false, path.fingerprint())?;
    // map reversed time r to s = t_end − r and order by increasing s
    traj.times = traj.times.iter().rev().map(|r| (t_end - r).max(0.0)).collect();
    traj.fields.reverse();
    traj.driver = traj.driver.iter().rev().map(|v| path.value_at(t_end) - v).collect();
    traj.energy_log.reverse();
    Ok(traj)
}

fn negate_family(fam: &TimeSymbolFamily) -> TimeSymbolFamily {
    match fam {
        TimeSymbolFamily::Constant(s) => TimeSymbolFamily::Constant(Arc::new(s.scaled(C64::new(-1.0, 0.0)))),
        other => {
            let other = other.clone();
            TimeSymbolFamily::closure(f64::INFINITY, move |t| other.at(t).scaled(C64::new(-1.0, 0.0)))
        }
    }
}

fn reverse_family(fam: &TimeSymbolFamily, t_end: f64) -> TimeSymbolFamily {
    if !fam.is_time_dependent() {
        return fam.clone();
    }
    let fam = fam.clone();
    TimeSymbolFamily::closure(t_end, move |r| (*fam.at((t_end - r).max(0.0))).clone())
}

fn negate_forcing(f: &Forcing) -> Forcing {
    match f {
        Forcing::Constant(x) => Forcing::Constant(x.scaled(-1.0)),
        Forcing::Table { times, fields } => Forcing::Table {
            times: times.clone(),
            fields: fields.iter().map(|x| x.scaled(-1.0)).collect(),
        },
    }
}

/// Linear evolution operator `U(s_from, t_to)φ` of the homogeneous equation
/// (`f = g = 0`) along `path`.
pub fn evolution_apply(
    p: &SpdeProblem,
    path: &BrownianPath,
    s_from: f64,
    t_to: f64,
    phi: &Field,
    cfg: &EvolveConfig,
) -> Result<Field> {
    Ok(evolution_trajectory(p, path, s_from, t_to, phi, cfg)?.final_field().clone())
}

/// Like [`evolution_apply`] but returning the recorded states.
pub fn evolution_trajectory(
    p: &SpdeProblem,
    path: &BrownianPath,
    s_from: f64,
    t_to: f64,
    phi: &Field,
    cfg: &EvolveConfig,
) -> Result<Trajectory> {
    p.validate()?;
    cfg.validate()?;
    check_horizon(p, path.horizon())?;
    p.u0.check_compatible(phi)?;
    if !(0.0 <= s_from && s_from <= t_to && t_to <= p.horizon * (1.0 + 1e-12)) {
        return Err(Error::invalid("need 0 <= s_from <= t_to <= T"));
    }
    let inc = solver_increments(path, cfg.steps)?;
    let i0 = node_index(s_from, p.horizon, cfg.steps)?;
    let i1 = node_index(t_to, p.horizon, cfg.steps)?;
    let dt = p.horizon / cfg.steps as f64;
    let hom = p.homogeneous();
    let ops = Operators::new(&hom, cfg, hom.noise_scale)?;
    let w0 = path.value_at(s_from);
    run_stochastic(&hom, &ops, cfg, &inc[i0..i1], i0 as f64 * dt, dt, w0, phi, true, path.fingerprint())
}

/// One row of the energy balance table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyReportRow {
    pub t: f64,
    pub norm_sq: f64,
    pub quad_a: f64,
    pub quad_l: f64,
    pub quad_b: f64,
    /// `|u(t)|_s² − |u(0)|_s²`
    pub drift: f64,
    /// Cumulative `Σ ⟨Au,u⟩Δw + (½⟨Lu,u⟩ + ⟨Bu,u⟩)Δt` (Itô form, left point).
    pub predicted_ito: f64,
    /// Cumulative trapezoid `Σ ½(q_i+q_{i+1})_A Δw + ½(q_i+q_{i+1})_B Δt`.
    pub predicted_stratonovich: f64,
    pub residual_ito: f64,
    pub residual_stratonovich: f64,
}

/// Per-step energy table with the cumulative mismatch between the observed
/// `|u|_s²` and the increments predicted by the Itô expansion (valid for
/// `f = g = 0`).
pub fn energy_report(traj: &Trajectory) -> Result<Vec<EnergyReportRow>> {
    let log = &traj.energy_log;
    if log.is_empty() {
        return Err(Error::invalid("trajectory has no energy log (set energy_log)"));
    }
    let base = log[0].norm_s.powi(2);
    let mut out = Vec::with_capacity(log.len());
    let (mut ito, mut strat) = (0.0, 0.0);
    for (i, row) in log.iter().enumerate() {
        if i > 0 {
            let prev = &log[i - 1];
            let dw = row.w - prev.w;
            let dt = row.t - prev.t;
            ito += prev.quad_a * dw + (0.5 * prev.quad_l + prev.quad_b) * dt;
            strat += 0.5 * (prev.quad_a + row.quad_a) * dw + 0.5 * (prev.quad_b + row.quad_b) * dt;
        }
        let norm_sq = row.norm_s.powi(2);
        let drift = norm_sq - base;
        out.push(EnergyReportRow {
            t: row.t,
            norm_sq,
            quad_a: row.quad_a,
            quad_l: row.quad_l,
            quad_b: row.quad_b,
            drift,
            predicted_ito: ito,
            predicted_stratonovich: strat,
            residual_ito: drift - ito,
            residual_stratonovich: drift - strat,
        });
    }
    Ok(out)
}

pub(crate) fn hash_f64s(values: &[f64]) -> u64 {
    // FNV-1a over the bit patterns
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
    }
    h
}

/// Exact spectral shift `u(x + c)` of a scalar-or-system field.
pub fn spectral_shift(u: &Field, c: f64) -> Field {
    let grid = u.grid().clone();
    let n = grid.n();
    let mut spec = dft_unchecked(u);
    for chunk in spec.coeffs_mut().chunks_mut(n) {
        for (j, v) in chunk.iter_mut().enumerate() {
            *v *= C64::from_polar(1.0, grid.xi(j) * c);
        }
    }
    idft(&spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::sample_brownian;
    use crate::symbols::symmetrized_transport_fn;

    fn bump(g: &Grid1D) -> Field {
        Field::from_real_fn(g, |x| (-4.0 * (x - 3.0).powi(2)).exp())
    }

    fn transport_problem(n: usize) -> SpdeProblem {
        let g = Grid1D::periodic(n).unwrap();
        let a = symmetrized_transport_fn(&g, |_| 1.0, None);
        SpdeProblem::new(bump(&g), Some(TimeSymbolFamily::constant(a)), None, 1.0, 1.0)
    }

    #[test]
    fn constant_transport_is_exact_shift() {
        let p = transport_problem(64);
        let path = sample_brownian(512, 1.0, 7, 0).unwrap();
        let cfg = EvolveConfig {
            steps: 512,
            record_every: 512,
            ..EvolveConfig::default()
        };
        let tr = integrate_spde(&p, &path, &cfg).unwrap();
        let exact = spectral_shift(&p.u0, path.values()[512]);
        let err = tr.final_field().sub(&exact).l2_norm() / exact.l2_norm();
        assert!(err < 1e-3, "{err}");
        assert_eq!(tr.times.len(), 2);
    }

    #[test]
    fn substep_rule_grows_with_resolution() {
        let cfg = EvolveConfig::with_steps(1024);
        let k64 = heun_substeps(&transport_problem(64), &cfg).unwrap();
        let k256 = heun_substeps(&transport_problem(256), &cfg).unwrap();
        assert!(k256 > k64);
        let mut c = cfg.clone();
        c.substeps = 500;
        assert_eq!(heun_substeps(&transport_problem(64), &c).unwrap(), 500);
    }

    #[test]
    fn backward_solve_undoes_forward_transport() {
        let p = transport_problem(64);
        let path = sample_brownian(256, 1.0, 3, 1).unwrap();
        let cfg = EvolveConfig {
            steps: 256,
            record_every: 16,
            ..EvolveConfig::default()
        };
        let phi = p.u0.clone();
        let tr = backward_solve(&p, &path, 0.5, &phi, &cfg).unwrap();
        assert_eq!(tr.times[0], 0.0);
        assert!((tr.times.last().unwrap() - 0.5).abs() < 1e-14);
        assert_eq!(tr.fields.last().unwrap(), &phi);
        let exact = spectral_shift(&phi, -path.value_at(0.5));
        let err = tr.fields[0].sub(&exact).l2_norm() / exact.l2_norm();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn evolution_operator_composes() {
        let p = transport_problem(32);
        let path = sample_brownian(128, 1.0, 9, 0).unwrap();
        let cfg = EvolveConfig {
            steps: 128,
            ..EvolveConfig::default()
        };
        let full = evolution_apply(&p, &path, 0.25, 1.0, &p.u0, &cfg).unwrap();
        let half = evolution_apply(&p, &path, 0.25, 0.5, &p.u0, &cfg).unwrap();
        let two = evolution_apply(&p, &path, 0.5, 1.0, &half, &cfg).unwrap();
        assert!(sobolev_norm(&full.sub(&two), 0.0).unwrap() < 1e-12);
        let same = evolution_apply(&p, &path, 0.5, 0.5, &p.u0, &cfg).unwrap();
        assert_eq!(same, p.u0);
        assert!(evolution_apply(&p, &path, 0.3, 0.5, &p.u0, &cfg).is_err());
    }

    #[test]
    fn euler_without_correction_blows_up() {
        let p = transport_problem(128);
        let path = sample_brownian(1024, 1.0, 1, 0).unwrap();
        let cfg = EvolveConfig {
            steps: 1024,
            scheme: Scheme::EulerIto,
            ..EvolveConfig::default()
        };
        match integrate_spde(&p, &path, &cfg) {
            Err(Error::BlowUp { .. }) => {}
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn rejects_mismatched_resolution() {
        let p = transport_problem(32);
        let path = sample_brownian(100, 1.0, 9, 0).unwrap();
        assert!(integrate_spde(&p, &path, &EvolveConfig::with_steps(64)).is_err());
        let path = sample_brownian(128, 2.0, 9, 0).unwrap();
        assert!(integrate_spde(&p, &path, &EvolveConfig::with_steps(64)).is_err());
    }

    #[test]
    fn skeleton_with_constant_rate_is_shift() {
        let p = transport_problem(64);
        let h = CameronMartinPath::from_fn(1.0, 256, |t| 0.7 * t);
        let cfg = EvolveConfig::with_steps(256);
        let tr = skeleton_solve(&p.with_noise_scale(0.01), &h, &cfg).unwrap();
        let exact = spectral_shift(&p.u0, 0.7);
        assert!(sobolev_norm(&tr.final_field().sub(&exact), 1.0).unwrap() < 1e-8);
    }

    #[test]
    fn energy_log_is_consistent_for_skew_transport() {
        let p = transport_problem(64);
        let path = sample_brownian(512, 1.0, 2, 0).unwrap();
        let cfg = EvolveConfig {
            steps: 512,
            energy_log: true,
            record_every: 1,
            ..EvolveConfig::default()
        };
        let tr = integrate_spde(&p, &path, &cfg).unwrap();
        let rep = energy_report(&tr).unwrap();
        let base = rep[0].norm_sq;
        for row in &rep {
            assert!(row.quad_a.abs() < 1e-10 * base);
            assert!(row.quad_l.abs() < 1e-9 * base);
            assert!(row.residual_ito.abs() < 1e-3 * base, "{row:?}");
        }
    }
}
