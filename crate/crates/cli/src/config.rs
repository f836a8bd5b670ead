//! JSON experiment configuration. Every struct rejects unknown keys, and
//! `resolve` replaces every grid-dependent default with a concrete value so
//! the serialized config is a complete record of the run.

use std::f64::consts::TAU;
use std::sync::Arc;

use hyperspde::characteristics::FlowSign;
use hyperspde::evolve::{EvolveConfig, Forcing, Scheme, SpdeProblem};
use hyperspde::grid::{Field, Grid1D, C64};
use hyperspde::microlocal::DetectorConfig;
use hyperspde::noise::CameronMartinPath;
use hyperspde::stats::McConfig;
use hyperspde::symbols::{
    make_symmetrized_transport, Quantization, SeparableSymbol, SymbolTerm, TimeSymbolFamily, XiMultiplier,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Optional echo of the subcommand; must match the command line if set.
    pub subcommand: Option<String>,
    pub grid: GridSpec,
    pub problem: ProblemSpec,
    pub solver: SolverSpec,
    pub study: StudySpec,
    pub seed: u64,
    pub output_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            subcommand: None,
            grid: GridSpec::default(),
            problem: ProblemSpec::default(),
            solver: SolverSpec::default(),
            study: StudySpec::default(),
            seed: 20240611,
            output_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub n: usize,
    pub length: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { n: 256, length: TAU }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemSpec {
    pub a: Option<SymbolSpec>,
    pub b: Option<SymbolSpec>,
    pub u0: FieldSpec,
    pub f: Option<FieldSpec>,
    pub g: Option<FieldSpec>,
    pub s: f64,
    pub horizon: f64,
    pub noise_scale: f64,
}

impl Default for ProblemSpec {
    fn default() -> Self {
        Self {
            a: Some(SymbolSpec::SymmetrizedTransport {
                alpha: CoefSpec::Const(1.0),
                a0: None,
                modulation: None,
            }),
            b: None,
            u0: FieldSpec::GaussianBump {
                center: None,
                width: 0.125_f64.sqrt(),
                amplitude: 1.0,
            },
            f: None,
            g: None,
            s: 1.0,
            horizon: 1.0,
            noise_scale: 1.0,
        }
    }
}

/// Real coefficient `c(x)` sampled on the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefSpec {
    Const(f64),
    /// `mean + Σ_k cos[k-1] cos(kx') + sin[k-1] sin(kx')` with `x' = 2πx/L`.
    Fourier {
        #[serde(default)]
        mean: f64,
        #[serde(default)]
        cos: Vec<f64>,
        #[serde(default)]
        sin: Vec<f64>,
    },
    /// `offset + amplitude · exp(−d²/(2 width²))`, `d` the periodic distance to `center`.
    Gaussian {
        center: f64,
        width: f64,
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default)]
        offset: f64,
    },
    /// One value per grid node.
    Samples(Vec<f64>),
}

fn one() -> f64 {
    1.0
}

impl CoefSpec {
    pub fn samples(&self, grid: &Grid1D) -> Result<Vec<f64>, CliError> {
        let nodes = grid.nodes();
        let k0 = TAU / grid.length();
        let v: Vec<f64> = match self {
            CoefSpec::Const(c) => vec![*c; grid.n()],
            CoefSpec::Fourier { mean, cos, sin } => nodes
                .iter()
                .map(|&x| {
                    let mut v = *mean;
                    for (k, c) in cos.iter().enumerate() {
                        v += c * ((k + 1) as f64 * k0 * x).cos();
                    }
                    for (k, c) in sin.iter().enumerate() {
                        v += c * ((k + 1) as f64 * k0 * x).sin();
                    }
                    v
                })
                .collect(),
            CoefSpec::Gaussian {
                center,
                width,
                amplitude,
                offset,
            } => {
                if !(*width > 0.0) {
                    return Err(cfg_err("gaussian width must be positive"));
                }
                nodes
                    .iter()
                    .map(|&x| {
                        let d = grid.periodic_diff(x, *center);
                        offset + amplitude * (-d * d / (2.0 * width * width)).exp()
                    })
                    .collect()
            }
            CoefSpec::Samples(v) => {
                if v.len() != grid.n() {
                    return Err(cfg_err(format!("coefficient samples: need {}, got {}", grid.n(), v.len())));
                }
                v.clone()
            }
        };
        if v.iter().any(|x| !x.is_finite()) {
            return Err(cfg_err("coefficient samples must be finite"));
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplexCoef {
    #[serde(default)]
    pub re: Option<CoefSpec>,
    #[serde(default)]
    pub im: Option<CoefSpec>,
}

impl ComplexCoef {
    fn samples(&self, grid: &Grid1D) -> Result<Vec<C64>, CliError> {
        let part = |c: &Option<CoefSpec>| match c {
            Some(c) => c.samples(grid),
            None => Ok(vec![0.0; grid.n()]),
        };
        let (re, im) = (part(&self.re)?, part(&self.im)?);
        Ok(re.into_iter().zip(im).map(|(r, i)| C64::new(r, i)).collect())
    }
}

/// Time factor `1 + amplitude · sin(frequency · t + phase)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Modulation {
    pub amplitude: f64,
    pub frequency: f64,
    #[serde(default)]
    pub phase: f64,
}

impl Modulation {
    pub fn factor(&self, t: f64) -> f64 {
        1.0 + self.amplitude * (self.frequency * t + self.phase).sin()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum XiSpec {
    /// `"i*xi"`, `"1"` or `"abs(xi)"`.
    Named(String),
    /// `[re, im]` per frequency in native FFT order.
    Samples(Vec<[f64; 2]>),
}

impl XiSpec {
    fn multiplier(&self, grid: &Grid1D) -> Result<XiMultiplier, CliError> {
        match self {
            XiSpec::Named(name) => match name.replace(' ', "").as_str() {
                "i*xi" => Ok(XiMultiplier::Derivative),
                "1" => Ok(XiMultiplier::One),
                "abs(xi)" => Ok(XiMultiplier::Abs),
                other => Err(cfg_err(format!("unknown xi_mult {other:?}; expected \"i*xi\", \"1\" or \"abs(xi)\""))),
            },
            XiSpec::Samples(v) => {
                if v.len() != grid.n() {
                    return Err(cfg_err(format!("xi_mult samples: need {}, got {}", grid.n(), v.len())));
                }
                Ok(XiMultiplier::Samples(v.iter().map(|p| C64::new(p[0], p[1])).collect()))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantSpec {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub x_coef: CoefSpec,
    #[serde(default)]
    pub x_coef_im: Option<CoefSpec>,
    pub xi_mult: XiSpec,
    #[serde(default = "left")]
    pub quantization: QuantSpec,
}

fn left() -> QuantSpec {
    QuantSpec::Left
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SymbolSpec {
    /// `½(α∂_x + ∂_x α) + a0`.
    SymmetrizedTransport {
        alpha: CoefSpec,
        #[serde(default)]
        a0: Option<ComplexCoef>,
        #[serde(default)]
        modulation: Option<Modulation>,
    },
    /// `α∂_x + a0` with the coefficient on the left.
    Transport {
        alpha: CoefSpec,
        #[serde(default)]
        a0: Option<ComplexCoef>,
        #[serde(default)]
        modulation: Option<Modulation>,
    },
    /// Free separable symbol `Σ c_k(x) m_k(ξ)` of the given order.
    Terms {
        order: f64,
        terms: Vec<TermSpec>,
        #[serde(default)]
        modulation: Option<Modulation>,
    },
}

impl SymbolSpec {
    pub fn symbol(&self, grid: &Grid1D) -> Result<SeparableSymbol, CliError> {
        let zeroth = |a0: &Option<ComplexCoef>| a0.as_ref().map(|c| c.samples(grid)).transpose();
        match self {
            SymbolSpec::SymmetrizedTransport { alpha, a0, .. } => {
                let alpha: Vec<C64> = alpha.samples(grid)?.into_iter().map(|a| C64::new(a, 0.0)).collect();
                let a0 = zeroth(a0)?;
                Ok(make_symmetrized_transport(grid, &alpha, a0.as_deref())?)
            }
            SymbolSpec::Transport { alpha, a0, .. } => {
                let alpha: Vec<C64> = alpha.samples(grid)?.into_iter().map(|a| C64::new(a, 0.0)).collect();
                let mut terms = vec![SymbolTerm::scalar(grid, alpha, XiMultiplier::Derivative, Quantization::Left)?];
                if let Some(a0) = zeroth(a0)? {
                    terms.push(SymbolTerm::scalar(grid, a0, XiMultiplier::One, Quantization::Left)?);
                }
                Ok(SeparableSymbol::new(grid, 1, 1.0, terms)?)
            }
            SymbolSpec::Terms { order, terms, .. } => {
                if terms.is_empty() {
                    return Err(cfg_err("symbol needs at least one term"));
                }
                let mut out = Vec::with_capacity(terms.len());
                for t in terms {
                    let re = t.x_coef.samples(grid)?;
                    let im = match &t.x_coef_im {
                        Some(c) => c.samples(grid)?,
                        None => vec![0.0; grid.n()],
                    };
                    let coef = re.into_iter().zip(im).map(|(r, i)| C64::new(r, i)).collect();
                    let q = match t.quantization {
                        QuantSpec::Left => Quantization::Left,
                        QuantSpec::Right => Quantization::Right,
                    };
                    out.push(SymbolTerm::scalar(grid, coef, t.xi_mult.multiplier(grid)?, q)?);
                }
                Ok(SeparableSymbol::new(grid, 1, *order, out)?)
            }
        }
    }

    fn modulation(&self) -> Option<&Modulation> {
        match self {
            SymbolSpec::SymmetrizedTransport { modulation, .. }
            | SymbolSpec::Transport { modulation, .. }
            | SymbolSpec::Terms { modulation, .. } => modulation.as_ref(),
        }
    }

    pub fn family(&self, grid: &Grid1D, horizon: f64) -> Result<TimeSymbolFamily, CliError> {
        let sym = self.symbol(grid)?;
        Ok(match self.modulation().cloned() {
            None => TimeSymbolFamily::constant(sym),
            Some(m) => {
                let sym = Arc::new(sym);
                TimeSymbolFamily::closure(horizon, move |t| sym.scaled(C64::new(m.factor(t), 0.0)))
            }
        })
    }
}

/// Initial data and forcing presets. Positions default to the domain
/// centre and are filled in by [`ExperimentConfig::resolve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    /// `amplitude · exp(−d²/(2 width²))`
    GaussianBump {
        #[serde(default)]
        center: Option<f64>,
        #[serde(default = "default_width")]
        width: f64,
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// `amplitude · max(0, 1 − d/half_width)`; kinks at the centre and both feet.
    TriangleKink {
        #[serde(default)]
        center: Option<f64>,
        #[serde(default)]
        half_width: Option<f64>,
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// `amplitude` on `[left, right)`, zero elsewhere.
    Step {
        #[serde(default)]
        left: Option<f64>,
        #[serde(default)]
        right: Option<f64>,
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// `amplitude · sin(mode · 2πx/L + phase)`
    Sine {
        #[serde(default = "one_i")]
        mode: i64,
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `Σ (re + i im) e^{i k 2πx/L}`
    Fourier { modes: Vec<FourierMode> },
}

fn default_width() -> f64 {
    0.125_f64.sqrt()
}

fn one_i() -> i64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FourierMode {
    pub k: i64,
    #[serde(default)]
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

impl FieldSpec {
    fn resolve(&mut self, length: f64) {
        match self {
            FieldSpec::GaussianBump { center, .. } => {
                center.get_or_insert(0.5 * length);
            }
            FieldSpec::TriangleKink { center, half_width, .. } => {
                center.get_or_insert(0.5 * length);
                half_width.get_or_insert(0.25 * length);
            }
            FieldSpec::Step { left, right, .. } => {
                left.get_or_insert(0.25 * length);
                right.get_or_insert(0.75 * length);
            }
            FieldSpec::Sine { .. } | FieldSpec::Fourier { .. } => {}
        }
    }

    pub fn field(&self, grid: &Grid1D) -> Result<Field, CliError> {
        let k0 = TAU / grid.length();
        let unresolved = || cfg_err("field spec used before defaults were resolved");
        let f = match self {
            FieldSpec::GaussianBump {
                center,
                width,
                amplitude,
            } => {
                if !(*width > 0.0) {
                    return Err(cfg_err("gaussian_bump width must be positive"));
                }
                let c = center.ok_or_else(unresolved)?;
                Field::from_real_fn(grid, |x| {
                    let d = grid.periodic_diff(x, c);
                    amplitude * (-d * d / (2.0 * width * width)).exp()
                })
            }
            FieldSpec::TriangleKink {
                center,
                half_width,
                amplitude,
            } => {
                let (c, hw) = (center.ok_or_else(unresolved)?, half_width.ok_or_else(unresolved)?);
                if !(hw > 0.0 && 2.0 * hw < grid.length()) {
                    return Err(cfg_err("triangle_kink half_width must lie in (0, L/2)"));
                }
                Field::from_real_fn(grid, |x| amplitude * (1.0 - grid.periodic_diff(x, c).abs() / hw).max(0.0))
            }
            FieldSpec::Step { left, right, amplitude } => {
                let (l, r) = (left.ok_or_else(unresolved)?, right.ok_or_else(unresolved)?);
                let width = r - l;
                if !(width > 0.0 && width < grid.length()) {
                    return Err(cfg_err("step needs left < right within one period"));
                }
                Field::from_real_fn(grid, |x| {
                    let rel = (x - l).rem_euclid(grid.length());
                    if rel < width {
                        *amplitude
                    } else {
                        0.0
                    }
                })
            }
            FieldSpec::Sine { mode, amplitude, phase } => {
                Field::from_real_fn(grid, |x| amplitude * (*mode as f64 * k0 * x + phase).sin())
            }
            FieldSpec::Fourier { modes } => {
                if modes.is_empty() {
                    return Err(cfg_err("fourier field needs at least one mode"));
                }
                let half = (grid.n() / 2) as i64;
                if let Some(m) = modes.iter().find(|m| m.k.abs() >= half) {
                    return Err(cfg_err(format!("fourier mode {} is not resolved on N = {}", m.k, grid.n())));
                }
                Field::from_fn(grid, 1, |_, x| {
                    modes
                        .iter()
                        .map(|m| C64::new(m.re, m.im) * C64::from_polar(1.0, m.k as f64 * k0 * x))
                        .sum()
                })
            }
        };
        if !f.is_finite() {
            return Err(cfg_err("field spec produced non-finite values"));
        }
        Ok(f)
    }

    /// Points where the preset is not smooth.
    pub fn singular_points(&self, length: f64) -> Vec<f64> {
        let wrap = |x: f64| x.rem_euclid(length);
        match self {
            FieldSpec::TriangleKink {
                center: Some(c),
                half_width: Some(hw),
                ..
            } => vec![wrap(c - hw), wrap(*c), wrap(c + hw)],
            FieldSpec::Step {
                left: Some(l),
                right: Some(r),
                ..
            } => vec![wrap(*l), wrap(*r)],
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeSpec {
    Heun,
    Midpoint,
    EulerIto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub steps: usize,
    pub scheme: SchemeSpec,
    pub mollifier_eps: Option<f64>,
    pub substeps: usize,
    pub record_every: usize,
    pub dealias: bool,
    pub energy_log: bool,
    pub midpoint_iterations: usize,
}

impl Default for SolverSpec {
    fn default() -> Self {
        let d = EvolveConfig::default();
        Self {
            steps: d.steps,
            scheme: SchemeSpec::Heun,
            mollifier_eps: d.mollifier_eps,
            substeps: d.substeps,
            record_every: d.record_every,
            dealias: d.dealias,
            energy_log: d.energy_log,
            midpoint_iterations: d.midpoint_iterations,
        }
    }
}

/// Cameron–Martin direction on the solver time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PathSpec {
    /// `h(t) = rate · t`
    Linear { rate: f64 },
    /// `h(t) = amplitude · sin(frequency · t)`
    Sine { amplitude: f64, frequency: f64 },
    /// Values at equally spaced times `0, T/n, …, T`, starting at 0.
    Breakpoints(Vec<f64>),
    /// `ḣ` per solver step.
    HdotSamples(Vec<f64>),
}

impl PathSpec {
    pub fn path(&self, horizon: f64, steps: usize) -> Result<CameronMartinPath, CliError> {
        Ok(match self {
            PathSpec::Linear { rate } => {
                let r = *rate;
                CameronMartinPath::from_fn(horizon, steps, move |t| r * t)
            }
            PathSpec::Sine { amplitude, frequency } => {
                let (a, f) = (*amplitude, *frequency);
                CameronMartinPath::from_fn(horizon, steps, move |t| a * (f * t).sin())
            }
            PathSpec::Breakpoints(b) => CameronMartinPath::from_breakpoints(horizon, steps, b)?,
            PathSpec::HdotSamples(v) => {
                if v.len() != steps {
                    return Err(cfg_err(format!("hdot_samples: need {steps}, got {}", v.len())));
                }
                CameronMartinPath::from_hdot(horizon, v.clone())?
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowSignSpec {
    Minus,
    Plus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSpec {
    pub window_width_dx: f64,
    pub band_fraction: f64,
    pub rel_threshold: f64,
    pub abs_floor: f64,
    /// Tracking tolerance in grid spacings.
    pub tolerance_dx: f64,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        let d = DetectorConfig::default();
        Self {
            window_width_dx: d.window_width_dx,
            band_fraction: d.band_fraction,
            rel_threshold: d.rel_threshold,
            abs_floor: d.abs_floor,
            tolerance_dx: 2.0,
        }
    }
}

/// Upper bounds on the operator-norm estimates for a `pass` verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub a: f64,
    pub b: f64,
    pub l: f64,
    pub m: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            a: 1e-6,
            b: 1e6,
            l: 1e-6,
            m: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySpec {
    pub paths: usize,
    /// Path stream used by single-path subcommands.
    pub path_index: u64,
    pub ns: Vec<usize>,
    pub eps_list: Vec<f64>,
    /// Error norm index; `s − 2` when unset.
    pub norm_index: Option<f64>,
    pub confidence: f64,
    pub h: PathSpec,
    /// Skeleton directions for the support probe; `[h]` when empty.
    pub skeletons: Vec<PathSpec>,
    pub eta: f64,
    pub deltas: Vec<f64>,
    /// Evaluation time; `T` when unset.
    pub t: Option<f64>,
    pub stride: usize,
    pub kappa: f64,
    /// Probe point; `L/2` when unset.
    pub x_probe: Option<f64>,
    pub nondegeneracy_threshold: f64,
    pub flow_sign: FlowSignSpec,
    /// Conormal base points; taken from the `u0` preset when unset.
    pub singular_points: Option<Vec<f64>>,
    pub detector: DetectorSpec,
    pub thresholds: Thresholds,
    pub condition_trials: usize,
    pub compare_spectral: bool,
}

impl Default for StudySpec {
    fn default() -> Self {
        Self {
            paths: 64,
            path_index: 0,
            ns: vec![8, 16, 32, 64, 128],
            eps_list: vec![1e-1, 1e-2, 1e-3, 1e-4],
            norm_index: None,
            confidence: 1.96,
            h: PathSpec::Linear { rate: 0.3 },
            skeletons: Vec::new(),
            eta: 0.1,
            deltas: vec![0.5, 0.25],
            t: None,
            stride: 64,
            kappa: 1e-4,
            x_probe: None,
            nondegeneracy_threshold: hyperspde::stats::NONDEGENERACY_THRESHOLD,
            flow_sign: FlowSignSpec::Minus,
            singular_points: None,
            detector: DetectorSpec::default(),
            thresholds: Thresholds::default(),
            condition_trials: 8,
            compare_spectral: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| cfg_err(format!("config: {e}")))
    }

    /// Fill every derived default and validate scalar ranges.
    pub fn resolve(&mut self) -> Result<(), CliError> {
        let length = self.grid.length;
        if !(length > 0.0 && length.is_finite()) {
            return Err(cfg_err("grid.length must be positive"));
        }
        self.problem.u0.resolve(length);
        for f in [&mut self.problem.f, &mut self.problem.g].into_iter().flatten() {
            f.resolve(length);
        }
        let st = &mut self.study;
        st.norm_index.get_or_insert(self.problem.s - 2.0);
        st.t.get_or_insert(self.problem.horizon);
        st.x_probe.get_or_insert(0.5 * length);
        if st.skeletons.is_empty() {
            st.skeletons.push(st.h.clone());
        }
        if st.singular_points.is_none() {
            st.singular_points = Some(self.problem.u0.singular_points(length));
        }
        let p = &self.problem;
        if !(p.horizon > 0.0 && p.horizon.is_finite()) {
            return Err(cfg_err("problem.horizon must be positive"));
        }
        if !(p.noise_scale >= 0.0 && p.noise_scale.is_finite()) {
            return Err(cfg_err("problem.noise_scale must be non-negative"));
        }
        if !p.s.is_finite() {
            return Err(cfg_err("problem.s must be finite"));
        }
        if self.solver.steps == 0 || self.solver.record_every == 0 || self.solver.substeps == 0 {
            return Err(cfg_err("solver.steps, record_every and substeps must be >= 1"));
        }
        let st = &self.study;
        if !(st.eta > 0.0) || !(st.kappa > 0.0) || st.stride == 0 || st.condition_trials == 0 {
            return Err(cfg_err("study.eta, kappa, stride and condition_trials must be positive"));
        }
        if st.eps_list.iter().any(|&e| !(e > 0.0)) || st.deltas.iter().any(|&d| !(d > 0.0)) {
            return Err(cfg_err("study.eps_list and deltas must be positive"));
        }
        if st.ns.contains(&0) {
            return Err(cfg_err("study.ns entries must be >= 1"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid1D, CliError> {
        Ok(Grid1D::new(self.grid.n, self.grid.length)?)
    }

    pub fn problem(&self, grid: &Grid1D) -> Result<SpdeProblem, CliError> {
        let p = &self.problem;
        let a = p.a.as_ref().map(|s| s.family(grid, p.horizon)).transpose()?;
        let b = p.b.as_ref().map(|s| s.family(grid, p.horizon)).transpose()?;
        let mut prob = SpdeProblem::new(p.u0.field(grid)?, a, b, p.s, p.horizon).with_noise_scale(p.noise_scale);
        prob.f = p.f.as_ref().map(|f| f.field(grid).map(Forcing::Constant)).transpose()?;
        prob.g = p.g.as_ref().map(|f| f.field(grid).map(Forcing::Constant)).transpose()?;
        prob.validate()?;
        Ok(prob)
    }

    pub fn evolve(&self) -> Result<EvolveConfig, CliError> {
        let s = &self.solver;
        let cfg = EvolveConfig {
            steps: s.steps,
            scheme: match s.scheme {
                SchemeSpec::Heun => Scheme::Heun,
                SchemeSpec::Midpoint => Scheme::Midpoint,
                SchemeSpec::EulerIto => Scheme::EulerIto,
            },
            mollifier_eps: s.mollifier_eps,
            substeps: s.substeps,
            record_every: s.record_every,
            dealias: s.dealias,
            energy_log: s.energy_log,
            midpoint_iterations: s.midpoint_iterations,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn monte_carlo(&self) -> McConfig {
        McConfig {
            num_paths: self.study.paths,
            seed: self.seed,
            norm_index: self.study.norm_index,
            confidence: self.study.confidence,
        }
    }

    pub fn flow_sign(&self) -> FlowSign {
        match self.study.flow_sign {
            FlowSignSpec::Minus => FlowSign::Minus,
            FlowSignSpec::Plus => FlowSign::Plus,
        }
    }

    pub fn detector(&self) -> DetectorConfig {
        let d = &self.study.detector;
        DetectorConfig {
            window_width_dx: d.window_width_dx,
            band_fraction: d.band_fraction,
            rel_threshold: d.rel_threshold,
            abs_floor: d.abs_floor,
        }
    }

    /// Canonical JSON of the resolved config.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// `key=value` lines for every leaf of a JSON value, dotted paths.
pub fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        serde_json::Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}
