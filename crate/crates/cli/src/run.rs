//! Subcommand dispatch: config → computation → artifacts → exit code.

use std::path::PathBuf;

use hyperspde::characteristics::{flow_solve, representation_lower_order, FlowConfig, FlowSign, TransportCoefficients};
use hyperspde::evolve::{energy_report, integrate_spde, SpdeProblem, Trajectory};
use hyperspde::grid::{sobolev_norm, Field};
use hyperspde::microlocal::{detect_singularities, propagate_wavefront, BicharConfig, Hamiltonian, WavefrontSet};
use hyperspde::noise::{sample_brownian, BrownianPath};
use hyperspde::stats::{
    closed_form_solution, ldp_probe, malliavin_directional, malliavin_family, malliavin_finite_difference,
    nondegeneracy_check, small_noise_study, support_probe, wz_convergence_study, ConvergenceReport,
};
use hyperspde::symbols::{estimate_conditions, TimeSymbolFamily};

use crate::artifacts::{content_hash, field_csv, num, Artifacts, Table};
use crate::config::{flatten, ExperimentConfig};
use crate::error::CliError;
use crate::selftest;

/// Environment variable overriding the configured output directory.
pub const OUT_DIR_ENV: &str = "HYPERSPDE_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "hyperspde-out";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Simulate,
    Characteristics,
    Wavefront,
    WongZakai,
    SmallNoise,
    Ldp,
    Support,
    Malliavin,
    CheckConditions,
    Selftest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Characteristics => "characteristics",
            Command::Wavefront => "wavefront",
            Command::WongZakai => "wong-zakai",
            Command::SmallNoise => "small-noise",
            Command::Ldp => "ldp",
            Command::Support => "support",
            Command::Malliavin => "malliavin",
            Command::CheckConditions => "check-conditions",
            Command::Selftest => "selftest",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunRequest {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub out_dir: PathBuf,
    pub manifest: PathBuf,
    pub inconclusive: bool,
    pub status: String,
    /// Human-readable report printed by the binary.
    pub report: Vec<String>,
}

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Load and resolve the config for `cmd`, applying command-line overrides.
pub fn load_config(cmd: Command, req: &RunRequest) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &req.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None if cmd == Command::Selftest => ExperimentConfig::default(),
        None => return Err(cfg_err("--config <file> is required")),
    };
    if let Some(sub) = &cfg.subcommand {
        if sub != cmd.name() {
            return Err(cfg_err(format!("config is for `{sub}`, not `{}`", cmd.name())));
        }
    }
    cfg.subcommand = Some(cmd.name().to_string());
    if let Some(seed) = req.seed {
        cfg.seed = seed;
    }
    cfg.resolve()?;
    Ok(cfg)
}

fn output_dir(cfg: &ExperimentConfig, req: &RunRequest) -> PathBuf {
    if let Some(out) = &req.out {
        return out.clone();
    }
    if let Some(env) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(env);
    }
    PathBuf::from(cfg.output_dir.as_deref().unwrap_or(DEFAULT_OUT_DIR))
}

/// Run one subcommand end to end. Errors are returned before anything is
/// written; blow-up inside a Monte Carlo study is reported in the manifest
/// and through the exit code.
pub fn run(cmd: Command, req: &RunRequest) -> Result<RunOutcome, CliError> {
    let cfg = load_config(cmd, req)?;
    if let Some(threads) = req.threads {
        hyperspde::par::configure_threads(threads).map_err(|e| cfg_err(format!("--threads: {e}")))?;
    }
    let mut art = Artifacts::new();
    let mut report = Vec::new();
    match cmd {
        Command::Simulate => simulate(&cfg, &mut art)?,
        Command::Characteristics => characteristics(&cfg, &mut art)?,
        Command::Wavefront => wavefront(&cfg, &mut art)?,
        Command::WongZakai => wong_zakai(&cfg, &mut art)?,
        Command::SmallNoise => small_noise(&cfg, &mut art)?,
        Command::Ldp => ldp(&cfg, &mut art)?,
        Command::Support => support(&cfg, &mut art)?,
        Command::Malliavin => malliavin(&cfg, &mut art)?,
        Command::CheckConditions => report.extend(check_conditions(&cfg, &mut art)?),
        Command::Selftest => report.extend(selftest_run(&mut art)),
    }
    let json = cfg.canonical_json();
    art.add("config.json", json.clone().into_bytes());
    let out_dir = output_dir(&cfg, req);
    let mut header = vec![
        ("tool".to_string(), "hyperspde".to_string()),
        ("version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("subcommand".to_string(), cmd.name().to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        (
            "seed_policy".to_string(),
            "ChaCha20 keyed by seed; stream = path index; normals drawn in step order".to_string(),
        ),
        ("parallel_build".to_string(), hyperspde::par::is_parallel().to_string()),
        ("config_hash".to_string(), content_hash(json.as_bytes())),
        (
            "rerun".to_string(),
            format!("hyperspde {} --config config.json --seed {}", cmd.name(), cfg.seed),
        ),
    ];
    let mut flat = Vec::new();
    flatten("config", &serde_json::to_value(&cfg).expect("config serializes"), &mut flat);
    header.extend(flat);
    let manifest = art.write(&out_dir, &header)?;
    for (k, v) in art.summaries() {
        report.push(format!("{k} = {v}"));
    }
    if art.inconclusive() {
        report.push("INCONCLUSIVE: conditional estimate below the minimum hit count".into());
    }
    let exit_code = match art.status() {
        "ok" => 0,
        "blowup" => crate::error::EXIT_BLOWUP,
        _ => 1,
    };
    Ok(RunOutcome {
        exit_code,
        out_dir,
        manifest,
        inconclusive: art.inconclusive(),
        status: art.status().to_string(),
        report,
    })
}

fn rel_l2(a: &Field, b: &Field) -> f64 {
    a.sub(b).l2_norm() / b.l2_norm().max(1e-300)
}

fn scaled_path(path: &BrownianPath, sigma: f64) -> Result<BrownianPath, CliError> {
    if sigma == 1.0 {
        return Ok(path.clone());
    }
    Ok(BrownianPath::from_values(path.horizon(), path.values().iter().map(|w| sigma * w).collect())?)
}

fn constant_symbol(
    fam: Option<&TimeSymbolFamily>,
    what: &str,
) -> Result<Option<std::sync::Arc<hyperspde::symbols::SeparableSymbol>>, CliError> {
    match fam {
        None => Ok(None),
        Some(f) if f.is_time_dependent() => Err(cfg_err(format!("{what}: requires time-independent coefficients"))),
        Some(f) => Ok(Some(f.at(0.0))),
    }
}

fn trajectory_csv(tr: &Trajectory) -> Vec<u8> {
    let mut t = Table::new(&["t", "node", "component", "re", "im"]);
    for (time, u) in tr.times.iter().zip(&tr.fields) {
        for c in 0..u.ncomp() {
            for (j, v) in u.component(c).iter().enumerate() {
                t.row([num(*time), j.to_string(), c.to_string(), num(v.re), num(v.im)]);
            }
        }
    }
    t.finish()
}

fn sample_path(cfg: &ExperimentConfig, p: &SpdeProblem) -> Result<BrownianPath, CliError> {
    Ok(sample_brownian(cfg.solver.steps, p.horizon, cfg.seed, cfg.study.path_index)?)
}

fn profile_plot(title: &str, csv: &str, dx: f64) -> String {
    format!(
        "set datafile separator ','\nset key autotitle columnhead\nset title '{title}'\nset xlabel 'x'\n\
         plot '{csv}' using ($2*{dx}):3 with lines title 'Re u'\npause -1\n"
    )
}

fn simulate(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<(), CliError> {
    let grid = cfg.grid()?;
    let p = cfg.problem(&grid)?;
    let ecfg = cfg.evolve()?;
    let path = sample_path(cfg, &p)?;
    let traj = integrate_spde(&p, &path, &ecfg)?;
    art.add("path.csv", path.to_csv().into_bytes());
    art.add("trajectory.csv", trajectory_csv(&traj));
    art.add("final_field.csv", field_csv(traj.final_field()));
    if ecfg.energy_log {
        let mut t = Table::new(&["t", "w", "norm_s", "quad_A", "quad_L", "quad_B"]);
        for r in &traj.energy_log {
            t.row([num(r.t), num(r.w), num(r.norm_s), num(r.quad_a), num(r.quad_l), num(r.quad_b)]);
        }
        art.add("energy.csv", t.finish());
        if p.f.is_none() && p.g.is_none() {
            let mut t = Table::new(&["t", "norm_sq", "drift", "predicted_ito", "predicted_stratonovich"]);
            for r in energy_report(&traj)? {
                t.row([num(r.t), num(r.norm_sq), num(r.drift), num(r.predicted_ito), num(r.predicted_stratonovich)]);
            }
            art.add("energy_report.csv", t.finish());
        }
    }
    art.summary("substeps", traj.substeps);
    art.summary("driver_fingerprint", &traj.driver_fingerprint);
    art.summary("final_norm_s", num(sobolev_norm(traj.final_field(), p.s)?));
    if let Some(exact) = closed_form_solution(&p, path.values()[path.steps()]) {
        art.summary("closed_form_rel_l2", num(rel_l2(traj.final_field(), &exact)));
    }
    art.plot(profile_plot("final state", "final_field.csv", grid.dx()));
    Ok(())
}

fn characteristics(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<(), CliError> {
    let grid = cfg.grid()?;
    let p = cfg.problem(&grid)?;
    if p.f.is_some() || p.g.is_some() {
        return Err(cfg_err("characteristics: forcing terms f, g are not supported"));
    }
    let a = constant_symbol(p.a.as_ref(), "characteristics")?
        .ok_or_else(|| cfg_err("characteristics: problem.a must be a transport symbol"))?;
    let b = constant_symbol(p.b.as_ref(), "characteristics")?;
    let coefs = TransportCoefficients::from_symbols(&a, b.as_deref())?;
    let ecfg = cfg.evolve()?;
    let path = sample_path(cfg, &p)?;
    let flow_cfg = FlowConfig {
        steps: ecfg.steps,
        sign: cfg.flow_sign(),
        record_every: ecfg.record_every,
    };
    let flow = flow_solve(&coefs, &grid, &scaled_path(&path, p.noise_scale)?, &flow_cfg)?;
    let mut t = Table::new(&["t", "x0", "phi"]);
    for (k, time) in flow.times.iter().enumerate() {
        for (j, x) in flow.positions[k].iter().enumerate() {
            t.row([num(*time), num(grid.node(j)), num(*x)]);
        }
    }
    art.add("path.csv", path.to_csv().into_bytes());
    art.add("flow.csv", t.finish());
    let u_char = representation_lower_order(&p.u0, &flow, flow.final_index())?;
    art.add("characteristics_final.csv", field_csv(&u_char));
    art.summary(
        "flow_sign",
        match flow.sign {
            FlowSign::Minus => "minus",
            FlowSign::Plus => "plus",
        },
    );
    if cfg.study.compare_spectral {
        let traj = integrate_spde(&p, &path, &ecfg)?;
        art.add("spectral_final.csv", field_csv(traj.final_field()));
        art.summary("characteristics_vs_spectral_rel_l2", num(rel_l2(&u_char, traj.final_field())));
    }
    art.plot(
        "set datafile separator ','\nset key autotitle columnhead\nset xlabel 'x0'\nset ylabel 'phi'\n\
         plot 'flow.csv' using 2:3 with dots title 'flow'\npause -1\n"
            .to_string(),
    );
    Ok(())
}

fn wavefront(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<(), CliError> {
    let grid = cfg.grid()?;
    let p = cfg.problem(&grid)?;
    let need = || cfg_err("wavefront: problem.a must have a first-order transport part");
    let a = constant_symbol(p.a.as_ref(), "wavefront")?.ok_or_else(need)?;
    let alpha = a.transport_coefficient().ok_or_else(need)?;
    let beta = match constant_symbol(p.b.as_ref(), "wavefront")? {
        Some(b) => Some(
            b.transport_coefficient()
                .ok_or_else(|| cfg_err("wavefront: problem.b must have a first-order transport part"))?,
        ),
        None => None,
    };
    let kappa = match cfg.flow_sign() {
        FlowSign::Minus => -1.0,
        FlowSign::Plus => 1.0,
    };
    let ham = Hamiltonian::transport(&grid, &alpha, beta.as_deref(), kappa)?;
    let points = cfg.study.singular_points.clone().unwrap_or_default();
    if points.is_empty() {
        return Err(cfg_err(
            "wavefront: no singular points; use a triangle_kink or step u0 or set study.singular_points",
        ));
    }
    let ecfg = cfg.evolve()?;
    let path = sample_path(cfg, &p)?;
    let bcfg = BicharConfig {
        steps: ecfg.steps,
        record_every: ecfg.record_every,
    };
    let rays = propagate_wavefront(&ham, &WavefrontSet::conormal(&points), &scaled_path(&path, p.noise_scale)?, &bcfg)?;
    let traj = integrate_spde(&p, &path, &ecfg)?;
    let mut wt = Table::new(&["t", "label", "x", "xi"]);
    for r in &rays {
        for k in 0..r.times.len() {
            wt.row([num(r.times[k]), r.label.clone(), num(grid.wrap(r.x[k])), num(r.xi[k])]);
        }
    }
    let det_cfg = cfg.detector();
    let tol = cfg.study.detector.tolerance_dx * grid.dx();
    let mut dt = Table::new(&["t", "x_detected", "score"]);
    let (mut predicted_total, mut tracked, mut spurious) = (0usize, 0usize, 0usize);
    for (k, u) in traj.fields.iter().enumerate() {
        let predicted: Vec<f64> = rays.iter().filter(|r| k < r.x.len()).map(|r| r.x[k]).collect();
        let found = detect_singularities(u, &det_cfg);
        for d in &found {
            dt.row([num(traj.times[k]), num(d.x), num(d.score)]);
            if !predicted.iter().any(|&y| grid.periodic_diff(d.x, y).abs() <= tol) {
                spurious += 1;
            }
        }
        predicted_total += predicted.len();
        tracked += predicted
            .iter()
            .filter(|&&y| found.iter().any(|d| grid.periodic_diff(d.x, y).abs() <= tol))
            .count();
    }
    art.add("path.csv", path.to_csv().into_bytes());
    art.add("wavefront.csv", wt.finish());
    art.add("detections.csv", dt.finish());
    art.add("final_field.csv", field_csv(traj.final_field()));
    art.summary("predicted", predicted_total);
    art.summary("tracked", tracked);
    art.summary("spurious", spurious);
    art.plot(
        "set datafile separator ','\nset key autotitle columnhead\nset xlabel 't'\nset ylabel 'x'\n\
         plot 'wavefront.csv' using 1:3 with points pt 7 ps 0.3 title 'rays', \
         'detections.csv' using 1:2 with points pt 6 title 'detected'\npause -1\n"
            .to_string(),
    );
    Ok(())
}

fn convergence_artifacts(rep: &ConvergenceReport, abscissa: &str, prefix: &str, art: &mut Artifacts) {
    let mut raw = Table::new(&["path_index", abscissa, "norm_index", "sup_err_sq"]);
    let mut sum = Table::new(&[abscissa, "norm_index", "mean", "std_error"]);
    for series in &rep.series {
        for (i, row) in series.per_path.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                raw.row([rep.path_indices[i].to_string(), num(rep.abscissae[j]), num(series.norm_index), num(*e)]);
            }
        }
        for j in 0..rep.abscissae.len() {
            sum.row([
                num(rep.abscissae[j]),
                num(series.norm_index),
                num(series.errors[j]),
                num(series.std_errors[j]),
            ]);
        }
        art.summary(&format!("slope_norm_{}", series.norm_index), num(series.fitted_slope));
    }
    art.add(&format!("{prefix}_paths.csv"), raw.finish());
    art.add(&format!("{prefix}_summary.csv"), sum.finish());
    art.summary("paths_used", rep.path_indices.len());
    art.summary("failed_paths", rep.failed_paths.len());
    if !rep.failed_paths.is_empty() {
        art.set_status("blowup");
    }
    art.plot(format!(
        "set datafile separator ','\nset key autotitle columnhead\nset logscale xy\nset xlabel '{abscissa}'\n\
         set ylabel 'E sup err^2'\nplot '{prefix}_summary.csv' using 1:3:4 with yerrorlines title 'mean'\npause -1\n"
    ));
}

fn wong_zakai(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<(), CliError> {
    let grid = cfg.grid()?;
    let p = cfg.problem(&grid)?;
    let ns: Vec<usize> = cfg.study.ns.clone();
    let rep = wz_convergence_study(&p, &ns, &cfg.evolve()?, &cfg.monte_carlo())?;
    convergence_artifacts(&rep, "n", "wong_zakai", art);
    Ok(())
}

fn small_noise(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<(), CliError> {
    let grid = cfg.grid()?;
    let p = cfg.problem(&grid)?;
    let rep = small_noise_study(&p, &cfg.study.eps_list, &cfg.evolve()?, &cfg.monte_carlo())?;
    convergence_artifacts(&rep, "eps", "small_noise", art);
    Ok(())
}

fn ldp(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<(), CliError> {
    let grid = cfg.grid()?;
    let p = cfg.problem(&grid)?;
    let ecfg = cfg.evolve()?;
    let h = cfg.study.h.path(p.horizon, ecfg.steps)?;
    let rep = ldp_probe(&p, &h, cfg.study.eta, &cfg.study.eps_list, &ecfg, &cfg.monte_carlo())?;
    let mut t = Table::new(&[
        "eps",
        "naive",
        "naive_se",
        "naive_upper_bound",
        "naive_hits",
        "tilted",
        "tilted_se",
        "tilted_hits",
        "weight_mean",
        "weight_se",
        "eps_log_p",
        "overlap",
    ]);
    for r in &rep.rows {
        t.row([
            num(r.eps),
            num(r.naive.value),
            num(r.naive.std_error),
            r.naive.upper_bound.to_string(),
            r.naive_hits.to_string(),
            num(r.tilted.value),
            num(r.tilted.std_error),
            r.tilted_hits.to_string(),
            num(r.weight_mean),
            num(r.weight_se),
            num(r.eps_log_p),
            r.overlap.to_string(),
        ]);
    }
    let mut s = Table::new(&["sampler", "eps", "path_index", "distance", "weight"]);
    for (eps, i, d) in &rep.naive_samples {
        s.row(["naive".to_string(), num(*eps), i.to_string(), num(*d), num(1.0)]);
    }
    for (eps, i, d, w) in &rep.tilted_samples {
        s.row(["tilted".to_string(), num(*eps), i.to_string(), num(*d), num(*w)]);
    }
    art.add("ldp_summary.csv", t.finish());
    art.add("ldp_samples.csv", s.finish());
    art.summary("action", num(rep.action));
    art.summary("eta", num(rep.eta));
    art.summary("norm_index", num(rep.norm_index));
    art.summary("failed_paths", rep.failed_paths.len());
    if !rep.failed_paths.is_empty() {
        art.set_status("blowup");
    }
    art.plot(
        "set datafile separator ','\nset key autotitle columnhead\nset logscale x\nset xlabel 'eps'\n\
         plot 'ldp_summary.csv' using 1:11 with linespoints title 'eps log P', \
         '' using 1:(-0.5) with lines title 'reference'\npause -1\n"
            .to_string(),
    );
    Ok(())
}

fn support(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<(), CliError> {
    let grid = cfg.grid()?;
    let p = cfg.problem(&grid)?;
    let ecfg = cfg.evolve()?;
    let skeletons = cfg
        .study
        .skeletons
        .iter()
        .map(|s| s.path(p.horizon, ecfg.steps))
        .collect::<Result<Vec<_>, _>>()?;
    let rep = support_probe(
        &p,
        &skeletons,
        cfg.study.eta,
        &cfg.study.deltas,
        &cfg.study.ns,
        &ecfg,
        &cfg.monte_carlo(),
    )?;
    let mut poly = Table::new(&["n", "path", "distance"]);
    let mut poly_sum = Table::new(&["n", "median", "mean"]);
    for d in &rep.polygonal {
        for (i, v) in d.per_path.iter().enumerate() {
            poly.row([d.n.to_string(), i.to_string(), num(*v)]);
        }
        poly_sum.row([d.n.to_string(), num(d.median), num(d.mean)]);
    }
    let mut cond = Table::new(&["skeleton", "delta", "accepted", "hits", "frequency", "inconclusive"]);
    for r in &rep.conditional {
        cond.row([
            r.skeleton.to_string(),
            num(r.delta),
            r.accepted.to_string(),
            r.hits.to_string(),
            num(r.frequency),
            r.inconclusive.to_string(),
        ]);
    }
    art.add("support_polygonal.csv", poly.finish());
    art.add("support_polygonal_summary.csv", poly_sum.finish());
    art.add("support_conditional.csv", cond.finish());
    art.summary("failed_paths", rep.failed_paths.len());
    if rep.any_inconclusive() {
        art.set_inconclusive();
    }
    if !rep.failed_paths.is_empty() {
        art.set_status("blowup");
    }
    art.plot(
        "set datafile separator ','\nset key autotitle columnhead\nset logscale xy\nset xlabel 'n'\n\
         plot 'support_polygonal_summary.csv' using 1:2 with linespoints title 'median distance'\npause -1\n"
            .to_string(),
    );
    Ok(())
}

fn malliavin(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<(), CliError> {
    let grid = cfg.grid()?;
    let p = cfg.problem(&grid)?;
    let ecfg = cfg.evolve()?;
    let path = sample_path(cfg, &p)?;
    let st = &cfg.study;
    let t = st.t.unwrap_or(p.horizon);
    let (thetas, fields) = malliavin_family(&p, &path, t, &ecfg, st.stride)?;
    let mut fam = Table::new(&["theta", "node", "component", "re", "im"]);
    for (theta, u) in thetas.iter().zip(&fields) {
        for c in 0..u.ncomp() {
            for (j, v) in u.component(c).iter().enumerate() {
                fam.row([num(*theta), j.to_string(), c.to_string(), num(v.re), num(v.im)]);
            }
        }
    }
    let h = st.h.path(p.horizon, ecfg.steps)?;
    let dh = malliavin_directional(&p, &path, &h, t, &ecfg, st.stride)?;
    let r = st.norm_index.unwrap_or(p.s - 2.0);
    let mut fd = Table::new(&["kappa", "rel_error"]);
    for kappa in [st.kappa, 10.0 * st.kappa, 0.1 * st.kappa] {
        let approx = malliavin_finite_difference(&p, &path, &h, t, &ecfg, kappa)?;
        let err = sobolev_norm(&dh.data.sub(&approx), r)? / sobolev_norm(&approx, r)?.max(1e-300);
        fd.row([num(kappa), num(err)]);
        if kappa == st.kappa {
            art.summary("fd_rel_error", num(err));
        }
    }
    let x = st.x_probe.unwrap_or(0.5 * grid.length());
    let nd = nondegeneracy_check(&p, &path, x, t, &ecfg, st.stride, st.nondegeneracy_threshold)?;
    art.add("path.csv", path.to_csv().into_bytes());
    art.add("malliavin_family.csv", fam.finish());
    art.add("malliavin_directional.csv", field_csv(&dh.data));
    art.add("malliavin_fd.csv", fd.finish());
    art.summary("nondegeneracy_value", nd.value.iter().map(|v| num(*v)).collect::<Vec<_>>().join(";"));
    art.summary("nondegenerate", nd.nondegenerate);
    art.plot(profile_plot("D_h u(t)", "malliavin_directional.csv", grid.dx()));
    Ok(())
}

fn check_conditions(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<Vec<String>, CliError> {
    let grid = cfg.grid()?;
    let p = cfg.problem(&grid)?;
    let diag = estimate_conditions(
        p.a.as_ref(),
        p.b.as_ref(),
        &grid,
        p.ncomp(),
        p.s,
        p.horizon,
        cfg.study.condition_trials,
    )?;
    let th = &cfg.study.thresholds;
    let rows = [
        ("A", diag.norm_a, th.a),
        ("B", diag.norm_b, th.b),
        ("L", diag.norm_l, th.l),
        ("M", diag.norm_m, th.m),
    ];
    let mut t = Table::new(&["operator", "norm", "threshold", "verdict"]);
    let mut lines = vec![format!("{:<9}{:>14}{:>14}  verdict", "operator", "norm", "threshold")];
    let mut all_pass = true;
    for (name, norm, limit) in rows {
        let pass = norm.is_finite() && norm <= limit;
        all_pass &= pass;
        let verdict = if pass { "pass" } else { "warn" };
        t.row([name.to_string(), num(norm), num(limit), verdict.to_string()]);
        lines.push(format!("{name:<9}{norm:>14.6e}{limit:>14.6e}  {verdict}"));
        art.summary(&format!("norm_{}", name.to_lowercase()), num(norm));
    }
    for (name, fam) in [("a", p.a.as_ref()), ("b", p.b.as_ref())] {
        if let Some(f) = fam.filter(|f| f.is_time_dependent()) {
            let c = f.continuity();
            all_pass &= c.continuous;
            art.summary(&format!("{name}_continuous"), c.continuous);
        }
    }
    let verdict = if all_pass { "pass" } else { "warn" };
    art.summary("verdict", verdict);
    lines.push(format!("verdict: {verdict} (s = {}, band |k| <= N/3)", p.s));
    art.add("conditions.csv", t.finish());
    Ok(lines)
}

fn selftest_run(art: &mut Artifacts) -> Vec<String> {
    let results = selftest::run_all();
    let mut t = Table::new(&["check", "status", "detail"]);
    let mut lines = Vec::new();
    let mut failed = 0usize;
    for r in &results {
        let status = if r.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!r.pass);
        t.row([r.name.to_string(), status.to_string(), r.detail.clone()]);
        lines.push(format!("{status} {} ({})", r.name, r.detail));
    }
    art.add("selftest.csv", t.finish());
    art.summary("checks", results.len());
    art.summary("failed", failed);
    if failed > 0 {
        art.set_status("failed");
    }
    lines
}
