//! Quick closed-form checks run by `hyperspde selftest`.

use std::f64::consts::TAU;

use hyperspde::characteristics::{
    flow_invert, flow_solve, representation_lower_order, transport_solution, FlowConfig, TransportCoefficients,
};
use hyperspde::evolve::{
    backward_solve, evolution_apply, integrate_spde, skeleton_solve, wong_zakai_solve, EvolveConfig, SpdeProblem,
};
use hyperspde::grid::{
    dft, mollifier_gap, mollify, sobolev_inner, sobolev_norm, Field, Grid1D, Mollifier, C64,
};
use hyperspde::microlocal::{
    bichar_flow, detect_singularities, propagate_wavefront, BicharConfig, DetectorConfig, Hamiltonian, PhasePoint,
    WavefrontSet,
};
use hyperspde::noise::{cm_action, girsanov_shift, polygonalize, sample_brownian, CameronMartinPath};
use hyperspde::stats::{
    ldp_probe, malliavin_directional, malliavin_pointwise, nondegeneracy_check, small_noise_study, support_probe,
    wz_convergence_study, McConfig,
};
use hyperspde::symbols::{
    apply_adjoint, apply_pdo, estimate_conditions, make_symmetrized_transport, symmetrized_transport_fn,
    SeparableSymbol, TimeSymbolFamily, XiMultiplier,
};

pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, detail: String) -> Result<String, String> {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn e<T>(r: hyperspde::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn grid(n: usize) -> Grid1D {
    Grid1D::periodic(n).expect("power of two")
}

fn mode1(g: &Grid1D) -> Field {
    Field::from_fn(g, 1, |_, x| C64::from_polar(1.0, TAU * x / g.length()))
}

fn bump(g: &Grid1D) -> Field {
    Field::from_real_fn(g, |x| (-4.0 * (x - 3.0).powi(2)).exp())
}

fn max_diff(a: &Field, b: &Field) -> f64 {
    a.sub(b).max_abs()
}

fn transport(g: &Grid1D) -> TimeSymbolFamily {
    TimeSymbolFamily::constant(symmetrized_transport_fn(g, |_| 1.0, None))
}

fn dc_mode() -> Result<String, String> {
    let g = grid(32);
    let u = Field::from_real_fn(&g, |_| 2.5);
    let s = e(dft(&u))?;
    let off = (1..32).map(|k| s.component(0)[k].norm()).fold(0.0, f64::max);
    ensure((s.component(0)[0] - C64::new(2.5, 0.0)).norm() < 1e-14 && off < 1e-14, format!("max off-DC {off:.1e}"))
}

fn eigenmode() -> Result<String, String> {
    let g = grid(32);
    let s = e(dft(&mode1(&g)))?;
    let err = (0..32)
        .map(|k| (s.mode(0, g.wavenumber(k)) - C64::new(if g.wavenumber(k) == 1 { 1.0 } else { 0.0 }, 0.0)).norm())
        .fold(0.0, f64::max);
    ensure(err < 1e-13, format!("max error {err:.1e}"))
}

fn norm_of_one() -> Result<String, String> {
    let g = grid(32);
    let u = Field::from_real_fn(&g, |_| 1.0);
    let worst = [-2.0, 0.0, 1.5, 3.0]
        .iter()
        .map(|&s| (sobolev_norm(&u, s).unwrap() - 1.0).abs())
        .fold(0.0, f64::max);
    ensure(worst < 1e-14, format!("max |norm - 1| {worst:.1e}"))
}

fn norm_of_mode() -> Result<String, String> {
    let g = grid(32);
    let want = (1.0 + (TAU / g.length()).powi(2)).sqrt();
    let got = e(sobolev_norm(&mode1(&g), 1.0))?;
    ensure((got - want).abs() < 1e-13, format!("{got} vs {want}"))
}

fn inner_products() -> Result<String, String> {
    let g = grid(32);
    let u = bump(&g);
    let uu = e(sobolev_inner(&u, &u, 1.0))?;
    let n = e(sobolev_norm(&u, 1.0))?;
    let v = Field::from_fn(&g, 1, |_, x| C64::from_polar(1.0, 3.0 * x));
    let cross = e(sobolev_inner(&mode1(&g), &v, 1.0))?.norm();
    ensure((uu.re - n * n).abs() < 1e-12 * n * n && cross < 1e-14, format!("orthogonal {cross:.1e}"))
}

fn mollifier_trivial() -> Result<String, String> {
    let g = grid(32);
    let c = Field::from_real_fn(&g, |_| 1.7);
    let m = e(Mollifier::new(&g, 0.3))?;
    let d1 = max_diff(&mollify(&c, &m), &c);
    let tiny = e(Mollifier::new(&g, 1e-12))?;
    let d2 = tiny.profile().iter().map(|p| (p - 1.0).abs()).fold(0.0, f64::max);
    let gap = e(mollifier_gap(0.2, 0.2, &g))?;
    ensure(d1 < 1e-14 && d2 < 1e-12 && gap == 0.0, format!("constant {d1:.1e}, eps->0 {d2:.1e}, gap {gap}"))
}

fn identity_symbol() -> Result<String, String> {
    let g = grid(32);
    let u = bump(&g);
    let d = max_diff(&e(apply_pdo(&SeparableSymbol::identity(&g, 1), &u))?, &u);
    ensure(d < 1e-14, format!("max diff {d:.1e}"))
}

fn derivative_symbol() -> Result<String, String> {
    let g = grid(32);
    let u = mode1(&g);
    let sym = e(SeparableSymbol::fourier_multiplier(&g, 1, 1.0, XiMultiplier::Derivative))?;
    let mut want = u.clone();
    want.scale(C64::new(0.0, TAU / g.length()));
    let d = max_diff(&e(apply_pdo(&sym, &u))?, &want);
    let adj = e(apply_adjoint(&sym, &u))?;
    let mut conj = u.clone();
    conj.scale(C64::new(0.0, -TAU / g.length()));
    let d2 = max_diff(&adj, &conj);
    ensure(d < 1e-12 && d2 < 1e-12, format!("apply {d:.1e}, adjoint {d2:.1e}"))
}

fn symmetrized_conditions() -> Result<String, String> {
    let g = grid(32);
    let fam = transport(&g);
    let diag = e(estimate_conditions(Some(&fam), None, &g, 1, 1.0, 1.0, 2))?;
    let imag = vec![C64::new(0.0, 0.7); 32];
    let alpha: Vec<C64> = g.nodes().iter().map(|x| C64::new(1.0 + 0.3 * x.sin(), 0.0)).collect();
    let sym = e(make_symmetrized_transport(&g, &alpha, Some(&imag)))?;
    let d2 = e(estimate_conditions(Some(&TimeSymbolFamily::constant(sym)), None, &g, 1, 1.0, 1.0, 2))?;
    let worst = [diag.norm_a, diag.norm_l, diag.norm_m, d2.norm_a].into_iter().fold(0.0, f64::max);
    ensure(worst < 1e-8, format!("max norm {worst:.1e}"))
}

fn b_only_conditions() -> Result<String, String> {
    let g = grid(32);
    let diag = e(estimate_conditions(None, Some(&transport(&g)), &g, 1, 1.0, 1.0, 2))?;
    ensure(
        diag.norm_a == 0.0 && diag.norm_l == 0.0 && diag.norm_m == 0.0 && diag.norm_b.is_finite(),
        format!("B {:.1e}", diag.norm_b),
    )
}

fn rng_reproducible() -> Result<String, String> {
    let a = e(sample_brownian(64, 1.0, 7, 3))?;
    let b = e(sample_brownian(64, 1.0, 7, 3))?;
    let same = a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits());
    ensure(same, "bitwise equal".into())
}

fn polygonal_limits() -> Result<String, String> {
    let w = e(sample_brownian(64, 1.0, 7, 4))?;
    let full = e(polygonalize(&w, 64))?;
    let d = full
        .breakpoints()
        .iter()
        .zip(w.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let one = e(polygonalize(&w, 1))?;
    let slope = (one.slope(0) - w.values()[64]).abs();
    ensure(d == 0.0 && slope < 1e-14, format!("n=M {d:.1e}, n=1 slope {slope:.1e}"))
}

fn action_values() -> Result<String, String> {
    let zero = cm_action(&CameronMartinPath::zero(1.0, 64));
    let unit = cm_action(&CameronMartinPath::from_fn(1.0, 64, |t| t));
    ensure(zero == 0.0 && (unit - 0.5).abs() < 1e-12, format!("I(0) {zero}, I(t) {unit}"))
}

fn girsanov_trivial() -> Result<String, String> {
    let w = e(sample_brownian(64, 1.0, 7, 5))?;
    let same = e(girsanov_shift(&w, &CameronMartinPath::zero(1.0, 64), 0.3))?;
    let shifted = e(girsanov_shift(&w, &CameronMartinPath::from_fn(1.0, 64, |t| t), 1.0))?;
    let d0 = same.values().iter().zip(w.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let d1 = (0..=64)
        .map(|i| (shifted.values()[i] - w.values()[i] - w.time(i)).abs())
        .fold(0.0, f64::max);
    ensure(d0 == 0.0 && d1 < 1e-12, format!("h=0 {d0:.1e}, h=t {d1:.1e}"))
}

fn drift_transport() -> Result<String, String> {
    let g = grid(64);
    let mut p = SpdeProblem::new(bump(&g), None, Some(transport(&g)), 1.0, 1.0);
    p.a = None;
    let cfg = EvolveConfig {
        steps: 512,
        record_every: 512,
        ..EvolveConfig::default()
    };
    let w = e(sample_brownian(512, 1.0, 7, 6))?;
    let u = e(integrate_spde(&p, &w, &cfg))?;
    let want = Field::from_real_fn(&g, |x| (-4.0 * (g.wrap(x + 1.0) - 3.0).powi(2)).exp());
    let d = max_diff(u.final_field(), &want);
    ensure(d < 1e-4, format!("max error {d:.1e}"))
}

fn zero_data() -> Result<String, String> {
    let g = grid(32);
    let p = SpdeProblem::new(Field::zeros(&g, 1), Some(transport(&g)), None, 1.0, 1.0);
    let cfg = EvolveConfig::with_steps(128);
    let u = e(integrate_spde(&p, &e(sample_brownian(128, 1.0, 7, 7))?, &cfg))?;
    ensure(u.fields.iter().all(|f| f.max_abs() == 0.0), "identically zero".into())
}

fn wz_flat_driver() -> Result<String, String> {
    let g = grid(32);
    let p = SpdeProblem::new(bump(&g), Some(transport(&g)), Some(transport(&g)), 1.0, 1.0);
    let cfg = EvolveConfig::with_steps(128);
    let flat = e(hyperspde::noise::PolygonalPath::from_breakpoints(1.0, vec![0.0, 0.0]))?;
    let a = e(wong_zakai_solve(&p, &flat, &cfg))?;
    let b = e(skeleton_solve(&p, &CameronMartinPath::zero(1.0, 128), &cfg))?;
    let d = max_diff(a.final_field(), b.final_field());
    ensure(d < 1e-12, format!("vs b-only {d:.1e}"))
}

fn backward_and_evolution() -> Result<String, String> {
    let g = grid(32);
    let p = SpdeProblem::new(bump(&g), Some(transport(&g)), None, 1.0, 1.0);
    let cfg = EvolveConfig::with_steps(128);
    let w = e(sample_brownian(128, 1.0, 7, 8))?;
    let phi = bump(&g);
    let back = e(backward_solve(&p, &w, 0.0, &phi, &cfg))?;
    let d0 = max_diff(back.final_field(), &phi);
    let same = e(evolution_apply(&p, &w, 0.5, 0.5, &phi, &cfg))?;
    let d1 = max_diff(&same, &phi);
    let psi = mode1(&g);
    let mut combo = phi.scaled(2.0);
    combo.axpy(C64::new(1.0, 0.0), &psi);
    let lhs = e(evolution_apply(&p, &w, 0.25, 0.75, &combo, &cfg))?;
    let mut rhs = e(evolution_apply(&p, &w, 0.25, 0.75, &phi, &cfg))?.scaled(2.0);
    rhs.axpy(C64::new(1.0, 0.0), &e(evolution_apply(&p, &w, 0.25, 0.75, &psi, &cfg))?);
    let d2 = max_diff(&lhs, &rhs);
    ensure(d0 == 0.0 && d1 == 0.0 && d2 < 1e-10, format!("t_end=0 {d0:.1e}, s=t {d1:.1e}, linearity {d2:.1e}"))
}

fn energy_conserved() -> Result<String, String> {
    let g = grid(64);
    let p = SpdeProblem::new(bump(&g), Some(transport(&g)), None, 0.0, 1.0);
    let cfg = EvolveConfig {
        steps: 1024,
        record_every: 16,
        ..EvolveConfig::default()
    };
    let tr = e(integrate_spde(&p, &e(sample_brownian(1024, 1.0, 7, 9))?, &cfg))?;
    let n0 = tr.fields[0].l2_norm();
    let drift = tr.fields.iter().map(|f| (f.l2_norm() / n0 - 1.0).abs()).fold(0.0, f64::max);
    ensure(drift < 1e-4, format!("relative drift {drift:.1e}"))
}

fn flows() -> Result<String, String> {
    let g = grid(32);
    let cfg = FlowConfig {
        steps: 128,
        record_every: 128,
        ..FlowConfig::default()
    };
    let w = e(sample_brownian(128, 1.0, 7, 10))?;
    let unit = TransportCoefficients::from_fns(&g, |_| 1.0, |_| 0.0, |_| C64::new(0.0, 0.0), |_| C64::new(0.0, 0.0));
    let f = e(flow_solve(&unit, &g, &w, &cfg))?;
    let k = f.final_index();
    let wt = w.values()[128];
    let d1 = (0..32).map(|j| (f.positions[k][j] - (g.node(j) - wt)).abs()).fold(0.0, f64::max);
    let drift = TransportCoefficients::from_fns(&g, |_| 0.0, |_| 0.4, |_| C64::new(0.0, 0.0), |_| C64::new(0.0, 0.0));
    let fd = e(flow_solve(&drift, &g, &w, &cfg))?;
    let d2 = (0..32).map(|j| (fd.positions[k][j] - (g.node(j) - 0.4)).abs()).fold(0.0, f64::max);
    let inv = e(flow_invert(&g, &f.positions[k], &f.jacobian[k]))?;
    let d3 = (0..32).map(|j| g.periodic_diff(inv[j], g.node(j) + wt).abs()).fold(0.0, f64::max);
    let id = e(flow_invert(&g, &f.positions[0], &f.jacobian[0]))?;
    let d4 = (0..32).map(|j| g.periodic_diff(id[j], g.node(j)).abs()).fold(0.0, f64::max);
    ensure(
        d1 < 1e-12 && d2 < 1e-12 && d3 < 1e-10 && d4 < 1e-12,
        format!("additive {d1:.1e}, drift {d2:.1e}, inverse {d3:.1e}, identity {d4:.1e}"),
    )
}

fn representation() -> Result<String, String> {
    let g = grid(32);
    let cfg = FlowConfig {
        steps: 128,
        record_every: 128,
        ..FlowConfig::default()
    };
    let w = e(sample_brownian(128, 1.0, 7, 11))?;
    let coefs = TransportCoefficients::from_fns(
        &g,
        |x| 1.0 + 0.3 * x.sin(),
        |_| 0.0,
        |_| C64::new(0.0, 0.0),
        |_| C64::new(0.0, 0.0),
    );
    let f = e(flow_solve(&coefs, &g, &w, &cfg))?;
    let k = f.final_index();
    let c = Field::from_real_fn(&g, |_| 0.8);
    let d1 = max_diff(&e(transport_solution(&c, &f, k))?, &c);
    let u0 = bump(&g);
    let d2 = max_diff(&e(representation_lower_order(&u0, &f, k))?, &e(transport_solution(&u0, &f, k))?);
    ensure(d1 < 1e-12 && d2 < 1e-12, format!("constant {d1:.1e}, a0=0 {d2:.1e}"))
}

fn rays() -> Result<String, String> {
    let g = grid(32);
    let ones = vec![1.0; 32];
    let zeros = vec![0.0; 32];
    let cfg = BicharConfig {
        steps: 128,
        record_every: 128,
    };
    let w = e(sample_brownian(128, 1.0, 7, 12))?;
    let ham = e(Hamiltonian::transport(&g, &ones, None, 1.0))?;
    let tr = e(bichar_flow(&ham, &PhasePoint::new(1.0, 2.0, "p"), 0, &w, &cfg))?;
    let k = tr.times.len() - 1;
    let d1 = (tr.x[k] - (1.0 + w.values()[128])).abs() + (tr.xi[k] - 2.0).abs();
    let drift = e(Hamiltonian::transport(&g, &zeros, Some(&ones), 1.0))?;
    let td = e(bichar_flow(&drift, &PhasePoint::new(1.0, 2.0, "p"), 0, &w, &cfg))?;
    let d2 = (td.x[k] - 2.0).abs() + (td.xi[k] - 2.0).abs();
    let empty = e(propagate_wavefront(&ham, &WavefrontSet { points: Vec::new() }, &w, &cfg))?;
    let kink = e(propagate_wavefront(&ham, &WavefrontSet::conormal(&[2.0]), &w, &cfg))?;
    let d3 = kink.iter().map(|r| (r.x[k] - 2.0 - w.values()[128]).abs()).fold(0.0, f64::max);
    ensure(
        d1 < 1e-12 && d2 < 1e-12 && empty.is_empty() && d3 < 1e-12,
        format!("a1=xi {d1:.1e}, b1=xi {d2:.1e}, kink {d3:.1e}"),
    )
}

fn smooth_has_no_singularities() -> Result<String, String> {
    let g = grid(256);
    let u = Field::from_real_fn(&g, |x| x.sin() + 0.3 * (3.0 * x).cos());
    let found = detect_singularities(&u, &DetectorConfig::default());
    ensure(found.is_empty(), format!("{} detections", found.len()))
}

fn small_problem() -> (Grid1D, SpdeProblem, EvolveConfig) {
    let g = grid(32);
    let p = SpdeProblem::new(bump(&g), Some(transport(&g)), None, 1.0, 1.0);
    let cfg = EvolveConfig {
        steps: 128,
        record_every: 16,
        ..EvolveConfig::default()
    };
    (g, p, cfg)
}

fn wz_smoke() -> Result<String, String> {
    let (_, p, cfg) = small_problem();
    let rep = e(wz_convergence_study(&p, &[4, 128], &cfg, &McConfig::new(2, 7)))?;
    let e = &rep.primary().errors;
    ensure(
        rep.path_indices.len() == 2 && e.len() == 2 && e[1] < 1e-3 * e[0].max(1e-300) + 1e-12,
        format!("n=4 {:.1e}, n=M {:.1e}", e[0], e[1]),
    )
}

fn small_noise_zero() -> Result<String, String> {
    let (_, p, cfg) = small_problem();
    let rep = e(small_noise_study(&p, &[0.1, 0.0], &cfg, &McConfig::new(2, 7)))?;
    let z = rep.primary().errors[1];
    ensure(z == 0.0, format!("eps=0 error {z}"))
}

fn ldp_zero_direction() -> Result<String, String> {
    let (_, p, cfg) = small_problem();
    let rep = e(ldp_probe(&p, &CameronMartinPath::zero(1.0, 128), 0.2, &[1e-4], &cfg, &McConfig::new(16, 7)))?;
    let r = &rep.rows[0];
    ensure(r.naive.value == 1.0 && r.eps_log_p.abs() < 1e-12, format!("P {}, eps log P {}", r.naive.value, r.eps_log_p))
}

fn support_wide_delta() -> Result<String, String> {
    let (_, p, cfg) = small_problem();
    let h = CameronMartinPath::zero(1.0, 128);
    let rep = e(support_probe(&p, &[h], 0.3, &[1e9], &[8], &cfg, &McConfig::new(16, 7)))?;
    let c = &rep.conditional[0];
    ensure(c.accepted == 16, format!("accepted {}, frequency {:.3}", c.accepted, c.frequency))
}

fn malliavin_trivial() -> Result<String, String> {
    let (g, p, cfg) = small_problem();
    let w = e(sample_brownian(128, 1.0, 7, 13))?;
    let at_t = e(malliavin_pointwise(&p, &w, 0.5, 0.5, &cfg))?;
    let u_half = e(hyperspde::evolve::integrate_spde_until(&p, &w, 0.5, &cfg))?;
    let a_u = e(apply_pdo(&p.a.as_ref().unwrap().at(0.5), u_half.final_field()))?;
    let d1 = max_diff(&at_t.data, &a_u);
    let zero = e(malliavin_directional(&p, &w, &CameronMartinPath::zero(1.0, 128), 1.0, &cfg, 4))?;
    let h1 = CameronMartinPath::from_fn(1.0, 128, |t| t);
    let h2 = CameronMartinPath::from_fn(1.0, 128, |t| t * t);
    let sum = e(h1.add_scaled(1.0, &h2))?;
    let d = |h: &CameronMartinPath| malliavin_directional(&p, &w, h, 1.0, &cfg, 4).map(|m| m.data);
    let (a, b, c) = (e(d(&h1))?, e(d(&h2))?, e(d(&sum))?);
    let d2 = max_diff(&c, &a.add(&b)) / c.max_abs();
    let flat = p.with_u0(Field::from_real_fn(&g, |_| 1.0));
    let nd = e(nondegeneracy_check(&flat, &w, 1.0, 1.0, &cfg, 16, 1e-10))?;
    ensure(
        d1 < 1e-12 && zero.data.max_abs() == 0.0 && d2 < 1e-10 && nd.value[0] < 1e-20,
        format!("theta=t {d1:.1e}, linearity {d2:.1e}, constant u0 {:.1e}", nd.value[0]),
    )
}

fn cases() -> Vec<(&'static str, Check)> {
    vec![
        ("dft_dc_mode", dc_mode),
        ("dft_eigenmode", eigenmode),
        ("sobolev_norm_constant", norm_of_one),
        ("sobolev_norm_single_mode", norm_of_mode),
        ("sobolev_inner", inner_products),
        ("mollifier_trivial", mollifier_trivial),
        ("identity_symbol", identity_symbol),
        ("derivative_symbol_and_adjoint", derivative_symbol),
        ("skew_adjoint_conditions", symmetrized_conditions),
        ("b_only_conditions", b_only_conditions),
        ("brownian_reproducible", rng_reproducible),
        ("polygonal_limits", polygonal_limits),
        ("action_functional", action_values),
        ("girsanov_shift", girsanov_trivial),
        ("drift_only_transport", drift_transport),
        ("zero_data", zero_data),
        ("wong_zakai_flat_driver", wz_flat_driver),
        ("backward_and_evolution_operator", backward_and_evolution),
        ("energy_conservation", energy_conserved),
        ("characteristic_flows", flows),
        ("characteristic_representation", representation),
        ("bicharacteristics", rays),
        ("smooth_field_no_singularities", smooth_has_no_singularities),
        ("wong_zakai_smoke", wz_smoke),
        ("small_noise_zero_eps", small_noise_zero),
        ("ldp_zero_direction", ldp_zero_direction),
        ("support_wide_delta", support_wide_delta),
        ("malliavin_trivial", malliavin_trivial),
    ]
}

/// Run every check; panics inside a check count as failures.
pub fn run_all() -> Vec<CheckResult> {
    cases()
        .into_iter()
        .map(|(name, check)| {
            let (pass, detail) = match std::panic::catch_unwind(check) {
                Ok(Ok(d)) => (true, d),
                Ok(Err(d)) => (false, d),
                Err(_) => (false, "panicked".to_string()),
            };
            CheckResult { name, pass, detail }
        })
        .collect()
}
