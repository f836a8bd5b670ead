//! Monte Carlo studies: Wong–Zakai and small-noise convergence, large
//! deviation and support probes, and Malliavin derivatives.
//!
//! Every study runs one independent pipeline per path (`sample → solve →
//! reduce`) through [`crate::par`] and reduces in path order, so results do
//! not depend on the thread schedule.

use crate::characteristics::spectral_interpolate;
use crate::error::{Error, Result};
use crate::evolve::{
    diffusion_term, evolution_apply, integrate_spde, integrate_spde_until, skeleton_solve, spectral_shift,
    wong_zakai_solve, EvolveConfig, SpdeProblem, Trajectory,
};
use crate::grid::{sobolev_norm, Field, C64};
use crate::noise::{
    cm_action, girsanov_shift, girsanov_weight, polygonalize, sample_brownian, BrownianPath, CameronMartinPath,
};
use crate::par;
use crate::symbols::{TimeSymbolFamily, XiMultiplier};

/// Stream offset separating tilted-measure paths from naive ones.
const TILTED_STREAM: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct McConfig {
    pub num_paths: usize,
    pub seed: u64,
    /// Sobolev index of the error norm; `None` means `s − 2`.
    pub norm_index: Option<f64>,
    pub confidence: f64,
}

impl McConfig {
    pub fn new(num_paths: usize, seed: u64) -> Self {
        Self {
            num_paths,
            seed,
            norm_index: None,
            confidence: 1.96,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_paths < 2 {
            return Err(Error::invalid("need at least 2 paths"));
        }
        if !(self.confidence > 0.0) {
            return Err(Error::invalid("confidence multiplier must be positive"));
        }
        Ok(())
    }

    pub fn norm(&self, s: f64) -> f64 {
        self.norm_index.unwrap_or(s - 2.0)
    }
}

/// Sample mean and standard error.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Least-squares slope of `ln y` against `ln x` over positive pairs.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Errors in one norm across the abscissae.
#[derive(Clone, Debug, PartialEq)]
pub struct NormSeries {
    pub norm_index: f64,
    pub errors: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub fitted_slope: f64,
    /// `per_path[i][j]`: path `i`, abscissa `j`.
    pub per_path: Vec<Vec<f64>>,
}

impl NormSeries {
    fn from_paths(norm_index: f64, abscissae: &[f64], per_path: Vec<Vec<f64>>) -> Self {
        let m = abscissae.len();
        let (mut errors, mut std_errors) = (Vec::with_capacity(m), Vec::with_capacity(m));
        for j in 0..m {
            let col: Vec<f64> = per_path.iter().map(|row| row[j]).collect();
            let (mean, se) = mean_se(&col);
            errors.push(mean);
            std_errors.push(se);
        }
        Self {
            norm_index,
            fitted_slope: loglog_slope(abscissae, &errors),
            errors,
            std_errors,
            per_path,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub label: String,
    pub abscissae: Vec<f64>,
    /// The primary norm first, tabulated extras after.
    pub series: Vec<NormSeries>,
    /// Paths excluded after a solver error, with the error text.
    pub failed_paths: Vec<(u64, String)>,
    pub path_indices: Vec<u64>,
}

impl ConvergenceReport {
    pub fn primary(&self) -> &NormSeries {
        &self.series[0]
    }
}

/// `(α, a0)` if `fam` is a time-independent scalar `α ∂_x + a0` with
/// constant coefficients.
pub fn constant_coefficients(fam: &TimeSymbolFamily) -> Option<(f64, C64)> {
    if fam.is_time_dependent() {
        return None;
    }
    let sym = fam.at(0.0);
    if sym.dim() != 1 {
        return None;
    }
    let (mut alpha, mut a0) = (C64::new(0.0, 0.0), C64::new(0.0, 0.0));
    for term in sym.terms() {
        let c0 = term.coef()[0];
        if term.coef().iter().any(|c| (c - c0).norm() > 1e-14 * (1.0 + c0.norm())) {
            return None;
        }
        match term.kind() {
            XiMultiplier::One => a0 += c0,
            XiMultiplier::Derivative => alpha += c0,
            _ => return None,
        }
    }
    (alpha.im.abs() < 1e-14).then_some((alpha.re, a0))
}

/// `e^{σ a0 w} u0(x + σ α w)` for `du = σ(α∂_x + a0)u∘dw` with constant
/// coefficients and no drift or forcing; `None` otherwise.
pub fn closed_form_solution(p: &SpdeProblem, w: f64) -> Option<Field> {
    if p.b.is_some() || p.f.is_some() || p.g.is_some() {
        return None;
    }
    let (alpha, a0) = match &p.a {
        Some(fam) => constant_coefficients(fam)?,
        None => (0.0, C64::new(0.0, 0.0)),
    };
    let sigma = p.noise_scale;
    let mut u = spectral_shift(&p.u0, sigma * alpha * w);
    u.scale((a0 * sigma * w).exp());
    Some(u)
}

fn sup_error_sq(a: &[Field], b: &[Field], r: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("record grids differ"));
    }
    let mut sup = 0.0_f64;
    for (x, y) in a.iter().zip(b) {
        sup = sup.max(sobolev_norm(&x.sub(y), r)?.powi(2));
    }
    Ok(sup)
}

fn reference_fields(p: &SpdeProblem, path: &BrownianPath, cfg: &EvolveConfig, closed: bool) -> Result<Vec<Field>> {
    if !closed {
        return Ok(integrate_spde(p, path, cfg)?.fields);
    }
    if !path.steps().is_multiple_of(cfg.steps) {
        return Err(Error::invalid("path resolution must be a multiple of solver steps"));
    }
    let q = path.steps() / cfg.steps;
    Ok((0..=cfg.steps)
        .filter(|k| k % cfg.record_every == 0 || *k == cfg.steps)
        .map(|k| closed_form_solution(p, path.values()[k * q]).expect("checked constant coefficients"))
        .collect())
}

fn collect_paths<T>(results: Vec<(u64, Result<T>)>) -> (Vec<u64>, Vec<T>, Vec<(u64, String)>) {
    let (mut idx, mut ok, mut failed) = (Vec::new(), Vec::new(), Vec::new());
    for (i, r) in results {
        match r {
            Ok(v) => {
                idx.push(i);
                ok.push(v);
            }
            Err(e) => failed.push((i, e.to_string())),
        }
    }
    (idx, ok, failed)
}

/// `E sup_t |uⁿ(t) − u(t)|²_r` for each segment count `n`, on the solver's
/// recorded times. The reference `u` is the closed form when the problem
/// has constant coefficients and a Heun solve on the same path otherwise.
pub fn wz_convergence_study(p: &SpdeProblem, ns: &[usize], cfg: &EvolveConfig, mc: &McConfig) -> Result<ConvergenceReport> {
    mc.validate()?;
    p.validate()?;
    cfg.validate()?;
    if ns.is_empty() || ns.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("segment counts must be strictly increasing"));
    }
    if let Some(n) = ns.iter().find(|&&n| n == 0 || !cfg.steps.is_multiple_of(n)) {
        return Err(Error::invalid(format!("segment count {n} must divide {}", cfg.steps)));
    }
    let r = mc.norm(p.s);
    let closed = closed_form_solution(p, 0.0).is_some();
    let results = par::map_indexed(mc.num_paths, |i| {
        let run = || -> Result<Vec<f64>> {
            let path = sample_brownian(cfg.steps, p.horizon, mc.seed, i as u64)?;
            let reference = reference_fields(p, &path, cfg, closed)?;
            ns.iter()
                .map(|&n| {
                    let wz = wong_zakai_solve(p, &polygonalize(&path, n)?, cfg)?;
                    sup_error_sq(&wz.fields, &reference, r)
                })
                .collect()
        };
        (i as u64, run())
    });
    let (path_indices, per_path, failed_paths) = collect_paths(results);
    let abscissae: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    Ok(ConvergenceReport {
        label: "wong-zakai".into(),
        series: vec![NormSeries::from_paths(r, &abscissae, per_path)],
        abscissae,
        failed_paths,
        path_indices,
    })
}

/// `E sup_t |u^ε(t) − u(t)|²` against the noise-free solve, with the noise
/// scale set to `√ε`. The primary series uses the configured norm; the
/// indices `s − 1` and `s` are tabulated after it.
pub fn small_noise_study(p: &SpdeProblem, eps_list: &[f64], cfg: &EvolveConfig, mc: &McConfig) -> Result<ConvergenceReport> {
    mc.validate()?;
    p.validate()?;
    cfg.validate()?;
    if eps_list.iter().any(|&e| !(e >= 0.0 && e.is_finite())) {
        return Err(Error::invalid("epsilon values must be finite and >= 0"));
    }
    if eps_list.windows(2).any(|w| !(w[1] < w[0]) && !(w[1] > w[0])) {
        return Err(Error::invalid("epsilon values must be strictly monotone"));
    }
    let norms = [mc.norm(p.s), p.s - 1.0, p.s];
    let zero_path = sample_brownian(cfg.steps, p.horizon, mc.seed, u64::MAX)?;
    let deterministic = integrate_spde(&p.with_noise_scale(0.0), &zero_path, cfg)?.fields;
    let results = par::map_indexed(mc.num_paths, |i| {
        let run = || -> Result<Vec<[f64; 3]>> {
            let path = sample_brownian(cfg.steps, p.horizon, mc.seed, i as u64)?;
            eps_list
                .iter()
                .map(|&eps| {
                    let tr = integrate_spde(&p.with_noise_scale(eps.sqrt()), &path, cfg)?;
                    let mut row = [0.0; 3];
                    for (slot, &r) in row.iter_mut().zip(&norms) {
                        *slot = sup_error_sq(&tr.fields, &deterministic, r)?;
                    }
                    Ok(row)
                })
                .collect()
        };
        (i as u64, run())
    });
    let (path_indices, rows, failed_paths) = collect_paths(results);
    let series = (0..3)
        .map(|k| {
            let per_path: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v[k]).collect()).collect();
            NormSeries::from_paths(norms[k], eps_list, per_path)
        })
        .collect();
    Ok(ConvergenceReport {
        label: "small-noise".into(),
        abscissae: eps_list.to_vec(),
        series,
        failed_paths,
        path_indices,
    })
}

/// A proportion estimate; `upper_bound` marks a zero-hit cell where only
/// the rule-of-three bound `3/P` is meaningful.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub upper_bound: bool,
}

impl Estimate {
    pub fn interval(&self, z: f64) -> (f64, f64) {
        if self.upper_bound {
            (0.0, self.value)
        } else {
            ((self.value - z * self.std_error).max(0.0), self.value + z * self.std_error)
        }
    }

    pub fn overlaps(&self, other: &Estimate, z: f64) -> bool {
        let (a0, a1) = self.interval(z);
        let (b0, b1) = other.interval(z);
        a0 <= b1 && b0 <= a1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LdpRow {
    pub eps: f64,
    pub naive: Estimate,
    pub tilted: Estimate,
    pub naive_hits: usize,
    pub tilted_hits: usize,
    pub weight_mean: f64,
    pub weight_se: f64,
    /// `ε ln P̂` from the tilted estimator.
    pub eps_log_p: f64,
    pub overlap: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LdpReport {
    pub eta: f64,
    pub norm_index: f64,
    /// `½∫ḣ²`.
    pub action: f64,
    pub rows: Vec<LdpRow>,
    /// `(ε, path, tube distance, weight)` per tilted path.
    pub tilted_samples: Vec<(f64, u64, f64, f64)>,
    /// `(ε, path, tube distance)` per naive path.
    pub naive_samples: Vec<(f64, u64, f64)>,
    pub failed_paths: Vec<(u64, String)>,
}

fn tube_distance(tr: &Trajectory, skeleton: &Trajectory, r: f64) -> Result<f64> {
    Ok(sup_error_sq(&tr.fields, &skeleton.fields, r)?.sqrt())
}

/// Probability of the tube `{sup_t |u^ε − Ψ(h)|_r ≤ η}` by plain sampling
/// and by Girsanov importance sampling along `h/√ε`.
pub fn ldp_probe(
    p: &SpdeProblem,
    h: &CameronMartinPath,
    eta: f64,
    eps_list: &[f64],
    cfg: &EvolveConfig,
    mc: &McConfig,
) -> Result<LdpReport> {
    mc.validate()?;
    p.validate()?;
    cfg.validate()?;
    if !(eta > 0.0) {
        return Err(Error::invalid("eta must be positive"));
    }
    if eps_list.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::invalid("epsilon values must be positive"));
    }
    let r = mc.norm(p.s);
    let skeleton = skeleton_solve(p, h, cfg)?;
    let mut report = LdpReport {
        eta,
        norm_index: r,
        action: cm_action(h),
        rows: Vec::new(),
        tilted_samples: Vec::new(),
        naive_samples: Vec::new(),
        failed_paths: Vec::new(),
    };
    for &eps in eps_list {
        let pe = p.with_noise_scale(eps.sqrt());
        let naive = par::map_indexed(mc.num_paths, |i| {
            let run = || -> Result<f64> {
                let path = sample_brownian(cfg.steps, p.horizon, mc.seed, i as u64)?;
                tube_distance(&integrate_spde(&pe, &path, cfg)?, &skeleton, r)
            };
            (i as u64, run())
        });
        let tilted = par::map_indexed(mc.num_paths, |i| {
            let run = || -> Result<(f64, f64)> {
                let tilde = sample_brownian(cfg.steps, p.horizon, mc.seed, TILTED_STREAM + i as u64)?;
                let shifted = girsanov_shift(&tilde, h, eps)?;
                let weight = girsanov_weight(&tilde, h, eps)?;
                Ok((tube_distance(&integrate_spde(&pe, &shifted, cfg)?, &skeleton, r)?, weight))
            };
            (i as u64, run())
        });
        let (naive_idx, naive, mut failed) = collect_paths(naive);
        let (tilted_idx, tilted, failed_t) = collect_paths(tilted);
        failed.extend(failed_t.into_iter().map(|(i, e)| (TILTED_STREAM + i, e)));
        report.failed_paths.extend(failed);

        let hits: Vec<f64> = naive.iter().map(|&d| if d <= eta { 1.0 } else { 0.0 }).collect();
        let naive_hits = hits.iter().filter(|&&v| v > 0.0).count();
        let np = hits.len().max(1) as f64;
        let naive_est = if naive_hits == 0 {
            Estimate {
                value: 3.0 / np,
                std_error: f64::NAN,
                upper_bound: true,
            }
        } else {
            let (m, se) = mean_se(&hits);
            Estimate {
                value: m,
                std_error: se,
                upper_bound: false,
            }
        };
        let weighted: Vec<f64> = tilted.iter().map(|&(d, w)| if d <= eta { w } else { 0.0 }).collect();
        let weights: Vec<f64> = tilted.iter().map(|&(_, w)| w).collect();
        let tilted_hits = tilted.iter().filter(|(d, _)| *d <= eta).count();
        let (tm, tse) = mean_se(&weighted);
        let tilted_est = if tilted_hits == 0 {
            Estimate {
                value: 0.0,
                std_error: f64::NAN,
                upper_bound: true,
            }
        } else {
            Estimate {
                value: tm,
                std_error: tse,
                upper_bound: false,
            }
        };
        let (wm, wse) = mean_se(&weights);
        report.rows.push(LdpRow {
            eps,
            overlap: naive_est.overlaps(&tilted_est, mc.confidence),
            naive: naive_est,
            tilted: tilted_est,
            naive_hits,
            tilted_hits,
            weight_mean: wm,
            weight_se: wse,
            eps_log_p: eps * tm.ln(),
        });
        report
            .naive_samples
            .extend(naive_idx.iter().zip(&naive).map(|(&i, &d)| (eps, i, d)));
        report
            .tilted_samples
            .extend(tilted_idx.iter().zip(&tilted).map(|(&i, &(d, w))| (eps, i, d, w)));
    }
    Ok(report)
}

/// Below this many accepted paths a conditional frequency is inconclusive.
pub const MIN_CONDITIONAL_HITS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct PolygonalDistance {
    pub n: usize,
    pub median: f64,
    pub mean: f64,
    pub per_path: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalRow {
    pub skeleton: usize,
    pub delta: f64,
    pub accepted: usize,
    pub hits: usize,
    pub frequency: f64,
    pub inconclusive: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportReport {
    pub eta: f64,
    pub norm_index: f64,
    /// Direction (a): distance from `u(w)` to `Ψ(wⁿ)`.
    pub polygonal: Vec<PolygonalDistance>,
    /// Direction (b): `Pr(sup|u − Ψ(h)| ≤ η | |w − h|_∞ < δ)`.
    pub conditional: Vec<ConditionalRow>,
    pub failed_paths: Vec<(u64, String)>,
}

impl SupportReport {
    pub fn any_inconclusive(&self) -> bool {
        self.conditional.iter().any(|r| r.inconclusive)
    }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Empirical probes of the support of the solution law in both directions.
#[allow(clippy::too_many_arguments)]
pub fn support_probe(
    p: &SpdeProblem,
    skeletons: &[CameronMartinPath],
    eta: f64,
    deltas: &[f64],
    ns: &[usize],
    cfg: &EvolveConfig,
    mc: &McConfig,
) -> Result<SupportReport> {
    mc.validate()?;
    p.validate()?;
    cfg.validate()?;
    if !(eta > 0.0) || deltas.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::invalid("eta and delta must be positive"));
    }
    if let Some(n) = ns.iter().find(|&&n| n == 0 || !cfg.steps.is_multiple_of(n)) {
        return Err(Error::invalid(format!("segment count {n} must divide {}", cfg.steps)));
    }
    let r = mc.norm(p.s);
    let psi: Vec<Trajectory> = skeletons.iter().map(|h| skeleton_solve(p, h, cfg)).collect::<Result<_>>()?;
    struct PathOut {
        poly: Vec<f64>,
        // (sup distance to h, tube distance to Ψ(h)) per skeleton
        cond: Vec<(f64, f64)>,
    }
    let results = par::map_indexed(mc.num_paths, |i| {
        let run = || -> Result<PathOut> {
            let path = sample_brownian(cfg.steps, p.horizon, mc.seed, i as u64)?;
            let u = integrate_spde(p, &path, cfg)?;
            let poly = ns
                .iter()
                .map(|&n| {
                    let wn = polygonalize(&path, n)?;
                    let hn = CameronMartinPath::from_breakpoints(p.horizon, cfg.steps, wn.breakpoints())?;
                    tube_distance(&u, &skeleton_solve(p, &hn, cfg)?, r)
                })
                .collect::<Result<_>>()?;
            let cond = skeletons
                .iter()
                .zip(&psi)
                .map(|(h, s)| Ok((h.sup_distance(&path)?, tube_distance(&u, s, r)?)))
                .collect::<Result<_>>()?;
            Ok(PathOut { poly, cond })
        };
        (i as u64, run())
    });
    let (_, outs, failed_paths) = collect_paths(results);
    let polygonal = ns
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            let per_path: Vec<f64> = outs.iter().map(|o| o.poly[j]).collect();
            PolygonalDistance {
                n,
                median: median(&per_path),
                mean: mean_se(&per_path).0,
                per_path,
            }
        })
        .collect();
    let mut conditional = Vec::new();
    for k in 0..skeletons.len() {
        for &delta in deltas {
            let accepted: Vec<f64> = outs.iter().filter(|o| o.cond[k].0 < delta).map(|o| o.cond[k].1).collect();
            let hits = accepted.iter().filter(|&&d| d <= eta).count();
            conditional.push(ConditionalRow {
                skeleton: k,
                delta,
                accepted: accepted.len(),
                hits,
                frequency: if accepted.is_empty() { f64::NAN } else { hits as f64 / accepted.len() as f64 },
                inconclusive: accepted.len() < MIN_CONDITIONAL_HITS,
            });
        }
    }
    Ok(SupportReport {
        eta,
        norm_index: r,
        polygonal,
        conditional,
        failed_paths,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MalliavinKind {
    PointwiseTheta,
    DirectionalH,
}

#[derive(Clone, Debug)]
pub struct MalliavinDerivative {
    pub kind: MalliavinKind,
    pub theta: Option<f64>,
    pub t: f64,
    pub data: Field,
    pub h: Option<CameronMartinPath>,
}

/// `D_θ u(t) = U(θ,t) σ(a_θ u(θ) + f_θ)`, zero for `θ > t`.
pub fn malliavin_pointwise(
    p: &SpdeProblem,
    path: &BrownianPath,
    theta: f64,
    t: f64,
    cfg: &EvolveConfig,
) -> Result<MalliavinDerivative> {
    if !(0.0 <= theta && t <= p.horizon * (1.0 + 1e-12) && t >= 0.0) {
        return Err(Error::invalid("need 0 <= theta and 0 <= t <= T"));
    }
    let data = if theta > t {
        Field::zeros(p.grid(), p.ncomp())
    } else {
        let u_theta = integrate_spde_until(p, path, theta, cfg)?.final_field().clone();
        let kick = diffusion_term(p, cfg, theta, &u_theta)?;
        evolution_apply(p, path, theta, t, &kick, cfg)?
    };
    Ok(MalliavinDerivative {
        kind: MalliavinKind::PointwiseTheta,
        theta: Some(theta),
        t,
        data,
        h: None,
    })
}

/// `D_θ u(t)` on the thinned grid `θ_j = j·stride·Δt ≤ t` (with `θ = t`
/// appended), one forward solve shared by all `θ_j`.
pub fn malliavin_family(
    p: &SpdeProblem,
    path: &BrownianPath,
    t: f64,
    cfg: &EvolveConfig,
    stride: usize,
) -> Result<(Vec<f64>, Vec<Field>)> {
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    let dt = p.horizon / cfg.steps as f64;
    let k_end = (t / dt).round() as usize;
    if ((t / dt) - k_end as f64).abs() > 1e-6 || k_end > cfg.steps {
        return Err(Error::invalid("t must be a solver grid time"));
    }
    let mut nodes: Vec<usize> = (0..=k_end).step_by(stride).collect();
    if *nodes.last().expect("nonempty") != k_end {
        nodes.push(k_end);
    }
    let fwd_cfg = EvolveConfig {
        record_every: 1,
        energy_log: false,
        ..cfg.clone()
    };
    let fwd = integrate_spde_until(p, path, t, &fwd_cfg)?;
    let thetas: Vec<f64> = nodes.iter().map(|&k| k as f64 * dt).collect();
    let fields = par::map_indexed(nodes.len(), |j| {
        let k = nodes[j];
        let kick = diffusion_term(p, cfg, thetas[j], &fwd.fields[k])?;
        evolution_apply(p, path, thetas[j], t, &kick, cfg)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok((thetas, fields))
}

/// `D_h u(t) = ∫_0^t D_τ u(t) ḣ(τ) dτ` by the trapezoid rule on the thinned
/// grid, weighting each cell by its increment of `h`.
pub fn malliavin_directional(
    p: &SpdeProblem,
    path: &BrownianPath,
    h: &CameronMartinPath,
    t: f64,
    cfg: &EvolveConfig,
    stride: usize,
) -> Result<MalliavinDerivative> {
    if h.steps() != cfg.steps || (h.horizon() - p.horizon).abs() > 1e-12 * p.horizon {
        return Err(Error::GridMismatch("h must live on the solver grid"));
    }
    let (thetas, fields) = malliavin_family(p, path, t, cfg, stride)?;
    let hv = h.values();
    let dt = p.horizon / cfg.steps as f64;
    let mut data = Field::zeros(p.grid(), p.ncomp());
    for j in 0..thetas.len().saturating_sub(1) {
        let k0 = (thetas[j] / dt).round() as usize;
        let k1 = (thetas[j + 1] / dt).round() as usize;
        let dh = hv[k1] - hv[k0];
        data.axpy_re(0.5 * dh, &fields[j]);
        data.axpy_re(0.5 * dh, &fields[j + 1]);
    }
    Ok(MalliavinDerivative {
        kind: MalliavinKind::DirectionalH,
        theta: None,
        t,
        data,
        h: Some(h.clone()),
    })
}

/// `(u(w + κh)(t) − u(w)(t)) / κ` on the same discrete scheme.
pub fn malliavin_finite_difference(
    p: &SpdeProblem,
    path: &BrownianPath,
    h: &CameronMartinPath,
    t: f64,
    cfg: &EvolveConfig,
    kappa: f64,
) -> Result<Field> {
    if !(kappa != 0.0 && kappa.is_finite()) {
        return Err(Error::invalid("kappa must be nonzero"));
    }
    if h.steps() != path.steps() {
        return Err(Error::GridMismatch("h must live on the path grid"));
    }
    let values = path.values().iter().zip(h.values()).map(|(w, hv)| w + kappa * hv).collect();
    let shifted = BrownianPath::from_values(path.horizon(), values)?;
    let base = integrate_spde_until(p, path, t, cfg)?;
    let bumped = integrate_spde_until(p, &shifted, t, cfg)?;
    Ok(bumped.final_field().sub(base.final_field()).scaled(1.0 / kappa))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Nondegeneracy {
    pub x: f64,
    pub t: f64,
    /// `∫_0^t |D_θ u(t,x)|² dθ` per component.
    pub value: Vec<f64>,
    pub threshold: f64,
    pub nondegenerate: bool,
}

pub const NONDEGENERACY_THRESHOLD: f64 = 1e-10;

/// Malliavin variance of the point evaluation `u(t, x)`.
pub fn nondegeneracy_check(
    p: &SpdeProblem,
    path: &BrownianPath,
    x: f64,
    t: f64,
    cfg: &EvolveConfig,
    stride: usize,
    threshold: f64,
) -> Result<Nondegeneracy> {
    let (thetas, fields) = malliavin_family(p, path, t, cfg, stride)?;
    let mut value = vec![0.0; p.ncomp()];
    for (c, slot) in value.iter_mut().enumerate() {
        let pts: Vec<f64> = fields
            .iter()
            .map(|f| spectral_interpolate(f, c, &[x])[0].norm_sqr())
            .collect();
        *slot = (0..thetas.len().saturating_sub(1))
            .map(|j| 0.5 * (pts[j] + pts[j + 1]) * (thetas[j + 1] - thetas[j]))
            .sum();
    }
    Ok(Nondegeneracy {
        x,
        t,
        nondegenerate: value.iter().all(|&v| v > threshold),
        value,
        threshold,
    })
}
