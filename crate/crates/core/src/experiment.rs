//! Experiment drivers behind the command-line tool: synthetic degradation,
//! model selection, gradient self-checks, robustness sweeps, the theta PSNR
//! sweep and the table presets.
//!
//! Independent runs go through a rayon pool and are collected in input order,
//! so outputs do not depend on the worker count.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{bsnr, psnr, sigma2_for_bsnr, Decibels, ImageGrid};
use crate::kernels::{kernel_l1_distance, BlurModel, KernelFamily, DEFAULT_SUPPORT};
use crate::map::{map_estimate, MapConfig};
use crate::params::{HyperDomain, HyperParams};
use crate::prior::PriorSpec;
use crate::sapg::{default_domain, sapg_calibrate, Calibration, SapgConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// BSNR range (dB) the noise-variance box is derived from.
pub const DEFAULT_BSNR_RANGE: [f64; 2] = [15.0, 45.0];

/// RNG stream for synthetic noise, distinct from the chain streams.
const DEGRADE_STREAM: u64 = 0x6465_6772;

pub const PEAK: f64 = 255.0;

/// Ground-truth parameters of the table experiments.
pub fn reference_alpha(family: KernelFamily) -> Vec<f64> {
    match family {
        KernelFamily::Gaussian => vec![0.4, 0.3],
        KernelFamily::Laplace => vec![0.3],
        KernelFamily::Moffat => vec![0.3, 3.5],
    }
}

fn default_bsnr_range() -> [f64; 2] {
    DEFAULT_BSNR_RANGE
}

fn default_prior() -> PriorSpec {
    PriorSpec::tv(0.01, 1.0)
}

/// One JSON document describing a run. Every field except `family` has a
/// default; CLI flags override individual fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub image: Option<PathBuf>,
    /// Center crop to `crop x crop` after loading.
    #[serde(default)]
    pub crop: Option<usize>,
    pub family: KernelFamily,
    /// Blur parameters used by `degrade`; the table values when absent.
    #[serde(default)]
    pub alpha_true: Option<Vec<f64>>,
    #[serde(default)]
    pub bsnr_db: Option<Decibels>,
    #[serde(default = "default_bsnr_range")]
    pub bsnr_range: [f64; 2],
    /// Explicit calibration box; derived from `bsnr_range` when absent.
    #[serde(default)]
    pub domain: Option<HyperDomain>,
    #[serde(default = "default_prior")]
    pub prior: PriorSpec,
    /// Calibration settings; the desk preset of `family` when absent.
    #[serde(default)]
    pub sapg: Option<SapgConfig>,
    #[serde(default)]
    pub map: MapConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads for independent runs; 0 lets rayon decide.
    #[serde(default)]
    pub workers: usize,
}

impl ExperimentConfig {
    pub fn new(family: KernelFamily) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            image: None,
            crop: None,
            family,
            alpha_true: None,
            bsnr_db: None,
            bsnr_range: DEFAULT_BSNR_RANGE,
            domain: None,
            prior: default_prior(),
            sapg: None,
            map: MapConfig::default(),
            seed: 0,
            out_dir: None,
            workers: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(Error::Config(format!("unsupported schema_version {v}, expected {SCHEMA_VERSION}"))),
            None => return Err(Error::Config("config is missing schema_version".into())),
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {}, expected {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        if !(self.bsnr_range[0] < self.bsnr_range[1]) {
            return Err(Error::Config(format!("bsnr_range must be increasing, got {:?}", self.bsnr_range)));
        }
        if let Some(a) = &self.alpha_true {
            check_admissible(self.family, a)?;
        }
        if let Some(d) = &self.domain {
            d.validate()?;
            if d.alpha.len() != self.family.param_dim() {
                return Err(Error::Config(format!(
                    "domain has {} alpha intervals, {} needs {}",
                    d.alpha.len(),
                    self.family,
                    self.family.param_dim()
                )));
            }
        }
        if self.crop == Some(0) {
            return Err(Error::Config("crop must be positive".into()));
        }
        self.prior.validate()?;
        self.map.validate()?;
        self.sapg_config().validate()
    }

    pub fn sapg_config(&self) -> SapgConfig {
        self.sapg.clone().unwrap_or_else(|| SapgConfig::desk(self.family))
    }

    pub fn alpha_true(&self) -> Vec<f64> {
        self.alpha_true.clone().unwrap_or_else(|| reference_alpha(self.family))
    }

    /// Calibration box for `family` given the observation.
    pub fn domain_for(&self, family: KernelFamily, y: &ImageGrid) -> Result<HyperDomain> {
        match &self.domain {
            Some(d) if family == self.family => Ok(d.clone()),
            _ => default_domain(family, y, self.bsnr_range[0], self.bsnr_range[1]),
        }
    }

    /// The configured image, center-cropped if requested.
    pub fn load_image(&self) -> Result<ImageGrid> {
        let path = self
            .image
            .as_ref()
            .ok_or_else(|| Error::Config("no image path configured".into()))?;
        let img = crate::io::load_image(path)?;
        match self.crop {
            Some(n) => img.center_crop(n, n),
            None => Ok(img),
        }
    }
}

fn check_admissible(family: KernelFamily, alpha: &[f64]) -> Result<()> {
    let bx = family.admissible_box();
    if alpha.len() != bx.len() {
        return Err(Error::invalid(format!("{family} takes {} parameters, got {}", bx.len(), alpha.len())));
    }
    for (a, iv) in alpha.iter().zip(&bx) {
        if !iv.contains(*a) {
            return Err(Error::invalid(format!(
                "{family} parameter {a} outside the admissible box [{}, {}]",
                iv.lo, iv.hi
            )));
        }
    }
    Ok(())
}

/// Runs `f` over `items` on a pool of `workers` threads (0 = rayon default),
/// keeping input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync + Send) -> Result<Vec<R>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(&f).collect()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Degraded {
    pub y: ImageGrid,
    pub hx: ImageGrid,
    /// Noise variance actually used; zero for an unbounded BSNR.
    pub sigma2: f64,
}

/// `y = H(alpha) x + sigma z` with `sigma^2` set from the target BSNR.
pub fn degrade(x: &ImageGrid, family: KernelFamily, alpha: &[f64], bsnr_db: Decibels, seed: u64) -> Result<Degraded> {
    check_admissible(family, alpha)?;
    let model = BlurModel::new(family, alpha.to_vec(), DEFAULT_SUPPORT, x.dims())?;
    let hx = model.apply(x)?;
    let Some(db) = bsnr_db.value() else {
        return Ok(Degraded {
            y: hx.clone(),
            hx,
            sigma2: 0.0,
        });
    };
    let sigma2 = sigma2_for_bsnr(&hx, db)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DEGRADE_STREAM);
    let noise = ImageGrid::random_normal(x.rows(), x.cols(), 0.0, sigma2.sqrt(), &mut rng);
    let mut y = hx.clone();
    y.axpy(1.0, &noise);
    Ok(Degraded { y, hx, sigma2 })
}

// ---------------------------------------------------------------------------
// Model selection

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCandidate {
    pub family: KernelFamily,
    pub theta_bar: f64,
    pub alpha_bar: Vec<f64>,
    pub sigma2_bar: f64,
    /// `||y - H(alpha_bar) x_map||^2`.
    pub residual: f64,
    pub map_psnr: Option<Decibels>,
    pub map_converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFailure {
    pub family: KernelFamily,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSelectionReport {
    pub selected: KernelFamily,
    /// Ascending residual; ties keep family declaration order.
    pub candidates: Vec<ModelCandidate>,
    pub failures: Vec<ModelFailure>,
}

/// Settings shared by all candidate families.
#[derive(Clone, Debug)]
pub struct SelectionSettings {
    pub bsnr_range: [f64; 2],
    pub prior: PriorSpec,
    pub map: MapConfig,
    pub workers: usize,
}

impl Default for SelectionSettings {
    fn default() -> Self {
        Self {
            bsnr_range: DEFAULT_BSNR_RANGE,
            prior: default_prior(),
            map: MapConfig::default(),
            workers: 0,
        }
    }
}

fn evaluate_candidate(
    y: &ImageGrid,
    family: KernelFamily,
    sapg: &SapgConfig,
    settings: &SelectionSettings,
    truth: Option<&ImageGrid>,
) -> Result<ModelCandidate> {
    let domain = default_domain(family, y, settings.bsnr_range[0], settings.bsnr_range[1])?;
    let cal = sapg_calibrate(y, family, &domain, &settings.prior, sapg).map_err(|f| f.error)?;
    let model = BlurModel::new(family, cal.estimate.alpha.clone(), DEFAULT_SUPPORT, y.dims())?;
    let map = map_estimate(y, &cal.estimate, &model, &settings.prior, &settings.map)?;
    let residual = model.apply(&map.image)?.dist_sq(y);
    let map_psnr = truth.map(|t| psnr(&map.image, t, PEAK)).transpose()?;
    Ok(ModelCandidate {
        family,
        theta_bar: cal.estimate.theta,
        alpha_bar: cal.estimate.alpha,
        sigma2_bar: cal.estimate.sigma2,
        residual,
        map_psnr,
        map_converged: map.converged,
    })
}

/// Calibrates and deconvolves `y` under every candidate and selects the
/// family with the smallest residual. Per-family failures are reported, not
/// fatal, as long as one candidate succeeds.
pub fn select_model(
    y: &ImageGrid,
    candidates: &[(KernelFamily, SapgConfig)],
    settings: &SelectionSettings,
    truth: Option<&ImageGrid>,
) -> Result<ModelSelectionReport> {
    if candidates.is_empty() {
        return Err(Error::Config("model selection needs at least one family".into()));
    }
    let results = parallel_map(candidates, settings.workers, |(family, cfg)| {
        (*family, evaluate_candidate(y, *family, cfg, settings, truth))
    })?;
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    let mut first_error = None;
    for (family, r) in results {
        match r {
            Ok(c) => ok.push(c),
            Err(e) => {
                failures.push(ModelFailure {
                    family,
                    error: e.to_string(),
                });
                first_error.get_or_insert(e);
            }
        }
    }
    if ok.is_empty() {
        return Err(first_error.expect("every candidate failed"));
    }
    let order = |f: KernelFamily| KernelFamily::ALL.iter().position(|g| *g == f).unwrap_or(usize::MAX);
    ok.sort_by(|a, b| {
        a.residual
            .total_cmp(&b.residual)
            .then(order(a.family).cmp(&order(b.family)))
    });
    Ok(ModelSelectionReport {
        selected: ok[0].family,
        candidates: ok,
        failures,
    })
}

// ---------------------------------------------------------------------------
// Gradient self-check

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub size: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// Scales every analytic gradient by 1.01 before comparing. Negative
    /// control for the checker itself.
    #[serde(default)]
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            size: 32,
            seed: 0,
            tolerance: 1e-4,
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub quantity: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub family: KernelFamily,
    pub alpha: Vec<f64>,
    pub entries: Vec<GradcheckEntry>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// `||a - n|| / max(||a||, ||n||, floor)`; 0 when everything is exactly zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric)).max(floor);
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central difference of `f` at `at`, plus the roundoff level of that
/// difference, used as the floor of the relative error.
/// Five-point central difference (fourth order) and its roundoff floor.
fn central<F: Fn(f64) -> Result<Vec<f64>>>(f: F, at: f64, h: f64) -> Result<(Vec<f64>, f64)> {
    let (p1, m1, p2, m2) = (f(at + h)?, f(at - h)?, f(at + 2.0 * h)?, f(at - 2.0 * h)?);
    let magnitude = p1.iter().chain(&m1).fold(0.0f64, |a, v| a.max(v.abs()));
    let noise = 1e3 * f64::EPSILON * magnitude / h;
    let d = (0..p1.len())
        .map(|k| (8.0 * (p1[k] - m1[k]) - (p2[k] - m2[k])) / (12.0 * h))
        .collect();
    Ok((d, noise))
}

/// Central finite differences against the analytic kernel gradients and all
/// three fidelity gradients on a random instance.
pub fn gradcheck(family: KernelFamily, alpha: &[f64], opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let n = opts.size;
    let support = DEFAULT_SUPPORT.min(if n % 2 == 1 { n } else { n - 1 });
    let model = BlurModel::new(family, alpha.to_vec(), support, (n, n))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let x = ImageGrid::random_normal(n, n, 100.0, 30.0, &mut rng);
    let y = ImageGrid::random_normal(n, n, 100.0, 30.0, &mut rng);
    let dir = ImageGrid::random_normal(n, n, 0.0, 1.0, &mut rng);
    let sigma2 = 4.0;
    let bump = if opts.corrupt { 1.01 } else { 1.0 };
    let mut entries = Vec::new();
    let mut push = |quantity: String, analytic: Vec<f64>, (numeric, floor): (Vec<f64>, f64)| {
        let analytic: Vec<f64> = analytic.iter().map(|v| v * bump).collect();
        let rel_error = relative_error(&analytic, &numeric, floor);
        entries.push(GradcheckEntry {
            quantity,
            analytic,
            numeric,
            rel_error,
        });
    };

    let grads = model.kernel_grads();
    let names = family.param_names();
    for (j, g) in grads.iter().enumerate() {
        let h = 1e-4 * alpha[j].abs();
        let numeric = central(
            |a| {
                let mut p = alpha.to_vec();
                p[j] = a;
                Ok(model.with_alpha(p)?.kernel().into_vec())
            },
            alpha[j],
            h,
        )?;
        push(format!("kernel/{}", names[j]), g.as_slice().to_vec(), numeric);
    }

    let fg = model.operator().fidelity_gradients(&y, &x, sigma2)?;
    for j in 0..alpha.len() {
        let h = 1e-4 * alpha[j].abs();
        let numeric = central(
            |a| {
                let mut p = alpha.to_vec();
                p[j] = a;
                Ok(vec![model.with_alpha(p)?.operator().fidelity(&y, &x, sigma2)?])
            },
            alpha[j],
            h,
        )?;
        push(format!("fidelity/{}", names[j]), vec![fg.grad_alpha[j]], numeric);
    }
    let op = model.operator();
    let numeric = central(|s| Ok(vec![op.fidelity(&y, &x, s)?]), sigma2, 1e-3 * sigma2)?;
    push("fidelity/sigma2".into(), vec![fg.grad_sigma2], numeric);
    let numeric = central(
        |t| {
            let mut xt = x.clone();
            xt.axpy(t, &dir);
            Ok(vec![op.fidelity(&y, &xt, sigma2)?])
        },
        0.0,
        1e-3,
    )?;
    push("fidelity/x".into(), vec![fg.grad_x.dot(&dir)], numeric);

    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        family,
        alpha: alpha.to_vec(),
        entries,
        max_rel_error,
        tolerance: opts.tolerance,
        pass: max_rel_error < opts.tolerance,
    })
}

// ---------------------------------------------------------------------------
// Robustness sweeps

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Theta0,
    Alpha0,
    LipschitzScale,
    /// Common multiplier on all three step-size scales.
    DeltaScale,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Theta0 => "theta0",
            SweepParameter::Alpha0 => "alpha0",
            SweepParameter::LipschitzScale => "lipschitz_scale",
            SweepParameter::DeltaScale => "delta_scale",
        }
    }

    /// `base` with this parameter set to `value`.
    pub fn apply(self, base: &SapgConfig, value: &[f64]) -> Result<SapgConfig> {
        let scalar = || match value {
            [v] if v.is_finite() => Ok(*v),
            _ => Err(Error::Config(format!("{} takes one finite value, got {value:?}", self.name()))),
        };
        let mut cfg = base.clone();
        match self {
            SweepParameter::Theta0 => cfg.theta0 = scalar()?,
            SweepParameter::Alpha0 => {
                if value.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config(format!("alpha0 values must be finite, got {value:?}")));
                }
                cfg.alpha0 = Some(value.to_vec());
            }
            SweepParameter::LipschitzScale => cfg.lipschitz_scale = scalar()?,
            SweepParameter::DeltaScale => {
                let m = scalar()?;
                cfg.delta_scales.theta *= m;
                cfg.delta_scales.alpha *= m;
                cfg.delta_scales.sigma2 *= m;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "theta0" => Ok(SweepParameter::Theta0),
            "alpha0" => Ok(SweepParameter::Alpha0),
            "lipschitz_scale" => Ok(SweepParameter::LipschitzScale),
            "delta_scale" => Ok(SweepParameter::DeltaScale),
            other => Err(Error::Config(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub value: Vec<f64>,
    pub result: std::result::Result<Calibration, String>,
}

/// One independent calibration per value, all with the base seed.
pub fn sweep(
    y: &ImageGrid,
    family: KernelFamily,
    domain: &HyperDomain,
    prior: &PriorSpec,
    base: &SapgConfig,
    parameter: SweepParameter,
    values: &[Vec<f64>],
    workers: usize,
) -> Result<Vec<SweepOutcome>> {
    parallel_map(values, workers, |v| {
        let result = parameter
            .apply(base, v)
            .and_then(|cfg| sapg_calibrate(y, family, domain, prior, &cfg).map_err(|f| f.error))
            .map_err(|e| e.to_string());
        SweepOutcome {
            value: v.clone(),
            result,
        }
    })
}

fn join_values(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(":")
}

/// Long-format CSV of every sweep trace: `parameter, value, n, theta,
/// alpha_1.., sigma2`. Failed values get a single row with `status` set.
pub fn write_sweep_csv<W: Write>(parameter: SweepParameter, outcomes: &[SweepOutcome], out: W) -> Result<()> {
    let k = outcomes
        .iter()
        .filter_map(|o| o.result.as_ref().ok())
        .map(|c| c.estimate.alpha.len())
        .max()
        .unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["parameter".to_string(), "value".into(), "status".into(), "n".into(), "theta".into()];
    header.extend((1..=k).map(|j| format!("alpha_{j}")));
    header.push("sigma2".into());
    w.write_record(&header)?;
    for o in outcomes {
        let value = join_values(&o.value);
        match &o.result {
            Ok(cal) => {
                let t = &cal.trace;
                for i in 0..t.len() {
                    let mut row = vec![
                        parameter.name().to_string(),
                        value.clone(),
                        "ok".into(),
                        (i + 1).to_string(),
                        t.theta[i].to_string(),
                    ];
                    row.extend(t.alpha[i].iter().map(f64::to_string));
                    row.resize(5 + k, String::new());
                    row.push(t.sigma2[i].to_string());
                    w.write_record(&row)?;
                }
            }
            Err(e) => {
                let mut row = vec![parameter.name().to_string(), value, format!("failed: {e}"), String::new(), String::new()];
                row.resize(6 + k, String::new());
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Reference theta by PSNR

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaSweepPoint {
    pub theta: f64,
    pub psnr: Decibels,
    pub map_converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaSweep {
    pub points: Vec<ThetaSweepPoint>,
    /// Grid value with the highest MAP PSNR (first one on ties).
    pub theta_star: f64,
    pub best_psnr: Decibels,
}

/// `n` log-spaced values in `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
            .collect(),
    }
}

/// MAP PSNR over a theta grid with the true blur and noise level.
pub fn theta_psnr_sweep(
    truth: &ImageGrid,
    y: &ImageGrid,
    model: &BlurModel,
    sigma2: f64,
    thetas: &[f64],
    prior: &PriorSpec,
    map: &MapConfig,
    workers: usize,
) -> Result<ThetaSweep> {
    if thetas.is_empty() {
        return Err(Error::Config("theta grid is empty".into()));
    }
    let points = parallel_map(thetas, workers, |&theta| -> Result<ThetaSweepPoint> {
        let params = HyperParams::new(theta, model.alpha().to_vec(), sigma2);
        let out = map_estimate(y, &params, model, prior, map)?;
        Ok(ThetaSweepPoint {
            theta,
            psnr: psnr(&out.image, truth, PEAK)?,
            map_converged: out.converged,
        })
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let best = points
        .iter()
        .fold(&points[0], |b, p| if p.psnr.as_f64() > b.psnr.as_f64() { p } else { b });
    Ok(ThetaSweep {
        theta_star: best.theta,
        best_psnr: best.psnr,
        points,
    })
}

// ---------------------------------------------------------------------------
// Table presets

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Table {
    Table1,
    Table2,
    Table3,
}

impl Table {
    pub fn family(self) -> KernelFamily {
        match self {
            Table::Table1 => KernelFamily::Gaussian,
            Table::Table2 => KernelFamily::Laplace,
            Table::Table3 => KernelFamily::Moffat,
        }
    }
}

impl FromStr for Table {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "table1" => Ok(Table::Table1),
            "table2" => Ok(Table::Table2),
            "table3" => Ok(Table::Table3),
            other => Err(Error::Config(format!("unknown table {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// 128x128 crops, 30 dB, reduced budget.
    Desk,
    /// Whole images, 20 and 30 dB, full budget.
    Full,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            other => Err(Error::Config(format!("unknown scale {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproPreset {
    pub table: Table,
    pub scale: Scale,
    pub family: KernelFamily,
    pub alpha_true: Vec<f64>,
    pub bsnr_db: Vec<f64>,
    pub crop: Option<usize>,
    pub seeds: Vec<u64>,
    pub bsnr_range: [f64; 2],
    pub prior: PriorSpec,
    pub sapg: SapgConfig,
    pub map: MapConfig,
}

impl ReproPreset {
    pub fn new(table: Table, scale: Scale) -> Self {
        let family = table.family();
        let (bsnr_db, crop, sapg) = match scale {
            Scale::Desk => (vec![30.0], Some(128), SapgConfig::desk(family)),
            Scale::Full => (vec![20.0, 30.0], None, SapgConfig::full(family)),
        };
        Self {
            table,
            scale,
            family,
            alpha_true: reference_alpha(family),
            bsnr_db,
            crop,
            seeds: vec![1],
            bsnr_range: DEFAULT_BSNR_RANGE,
            prior: default_prior(),
            sapg,
            map: MapConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproRow {
    pub image: String,
    pub bsnr_db: f64,
    pub seed: u64,
    pub sigma2_true: f64,
    pub theta_bar: f64,
    pub alpha_bar: Vec<f64>,
    pub sigma2_bar: f64,
    pub rel_error_alpha: Vec<f64>,
    pub rel_error_sigma2: f64,
    pub kernel_l1: f64,
    pub measured_bsnr: Decibels,
    pub blurred_psnr: Decibels,
    pub map_psnr: Decibels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproFailure {
    pub image: String,
    pub bsnr_db: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproReport {
    pub preset: ReproPreset,
    pub rows: Vec<ReproRow>,
    pub failures: Vec<ReproFailure>,
}

fn repro_case(preset: &ReproPreset, name: &str, x: &ImageGrid, bsnr_db: f64, seed: u64) -> Result<ReproRow> {
    let deg = degrade(x, preset.family, &preset.alpha_true, Decibels::Finite(bsnr_db), seed)?;
    let domain = default_domain(preset.family, &deg.y, preset.bsnr_range[0], preset.bsnr_range[1])?;
    let mut cfg = preset.sapg.clone();
    cfg.seed = seed;
    let cal = sapg_calibrate(&deg.y, preset.family, &domain, &preset.prior, &cfg).map_err(|f| f.error)?;
    let truth_model = BlurModel::new(preset.family, preset.alpha_true.clone(), DEFAULT_SUPPORT, x.dims())?;
    let est_model = truth_model.with_alpha(cal.estimate.alpha.clone())?;
    let map = map_estimate(&deg.y, &cal.estimate, &est_model, &preset.prior, &preset.map)?;
    Ok(ReproRow {
        image: name.to_string(),
        bsnr_db,
        seed,
        sigma2_true: deg.sigma2,
        theta_bar: cal.estimate.theta,
        rel_error_alpha: cal
            .estimate
            .alpha
            .iter()
            .zip(&preset.alpha_true)
            .map(|(a, t)| (a - t).abs() / t)
            .collect(),
        alpha_bar: cal.estimate.alpha.clone(),
        sigma2_bar: cal.estimate.sigma2,
        rel_error_sigma2: (cal.estimate.sigma2 - deg.sigma2).abs() / deg.sigma2,
        kernel_l1: kernel_l1_distance(&est_model, &truth_model)?,
        measured_bsnr: bsnr(&deg.y, &deg.hx)?,
        blurred_psnr: psnr(&deg.y, x, PEAK)?,
        map_psnr: psnr(&map.image, x, PEAK)?,
    })
}

/// Every (image, BSNR, seed) combination of the preset.
pub fn run_repro(preset: &ReproPreset, images: &[(String, ImageGrid)], workers: usize) -> Result<ReproReport> {
    let mut cases = Vec::new();
    for (name, img) in images {
        let x = match preset.crop {
            Some(n) => img.center_crop(n, n)?,
            None => img.clone(),
        };
        for &b in &preset.bsnr_db {
            for &s in &preset.seeds {
                cases.push((name.clone(), x.clone(), b, s));
            }
        }
    }
    let results = parallel_map(&cases, workers, |(name, x, b, s)| repro_case(preset, name, x, *b, *s))?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for ((name, _, b, s), r) in cases.iter().zip(results) {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => failures.push(ReproFailure {
                image: name.clone(),
                bsnr_db: *b,
                seed: *s,
                error: e.to_string(),
            }),
        }
    }
    Ok(ReproReport {
        preset: preset.clone(),
        rows,
        failures,
    })
}

/// Flat CSV of the report rows.
pub fn write_repro_csv<W: Write>(report: &ReproReport, out: W) -> Result<()> {
    let k = report.preset.alpha_true.len();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["image".to_string(), "bsnr_db".into(), "seed".into(), "sigma2_true".into(), "theta_bar".into()];
    header.extend((1..=k).map(|j| format!("alpha_bar_{j}")));
    header.push("sigma2_bar".into());
    header.extend((1..=k).map(|j| format!("rel_error_alpha_{j}")));
    header.extend(["rel_error_sigma2", "kernel_l1", "measured_bsnr", "blurred_psnr", "map_psnr"].map(String::from));
    w.write_record(&header)?;
    let db = |d: Decibels| d.value().map_or_else(|| "unbounded".to_string(), |v| v.to_string());
    for r in &report.rows {
        let mut row = vec![
            r.image.clone(),
            r.bsnr_db.to_string(),
            r.seed.to_string(),
            r.sigma2_true.to_string(),
            r.theta_bar.to_string(),
        ];
        row.extend(r.alpha_bar.iter().map(f64::to_string));
        row.push(r.sigma2_bar.to_string());
        row.extend(r.rel_error_alpha.iter().map(f64::to_string));
        row.push(r.rel_error_sigma2.to_string());
        row.push(r.kernel_l1.to_string());
        row.push(db(r.measured_bsnr));
        row.push(db(r.blurred_psnr));
        row.push(db(r.map_psnr));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth(n: usize) -> ImageGrid {
        ImageGrid::from_fn(n, n, |r, c| 128.0 + 60.0 * ((r as f64) / 5.0).sin() * ((c as f64) / 7.0).cos())
    }

    #[test]
    fn unbounded_bsnr_gives_noiseless_observation() {
        let x = smooth(32);
        let d = degrade(&x, KernelFamily::Gaussian, &[0.4, 0.3], Decibels::Unbounded, 1).unwrap();
        assert_eq!(d.y, d.hx);
        assert_eq!(d.sigma2, 0.0);
    }

    #[test]
    fn degrade_hits_target_bsnr() {
        let x = smooth(128);
        for db in [20.0, 30.0] {
            let d = degrade(&x, KernelFamily::Laplace, &[0.3], Decibels::Finite(db), 9).unwrap();
            let got = bsnr(&d.y, &d.hx).unwrap().as_f64();
            assert!((got - db).abs() < 0.5, "{got}");
        }
    }

    #[test]
    fn degrade_rejects_inadmissible_alpha() {
        let x = smooth(16);
        assert!(degrade(&x, KernelFamily::Moffat, &[0.3, 7.0], Decibels::Finite(30.0), 0).is_err());
        assert!(degrade(&x, KernelFamily::Gaussian, &[0.3], Decibels::Finite(30.0), 0).is_err());
    }

    #[test]
    fn degrade_is_seeded() {
        let x = smooth(16);
        let a = degrade(&x, KernelFamily::Gaussian, &[0.4, 0.3], Decibels::Finite(30.0), 5).unwrap();
        let b = degrade(&x, KernelFamily::Gaussian, &[0.4, 0.3], Decibels::Finite(30.0), 5).unwrap();
        let c = degrade(&x, KernelFamily::Gaussian, &[0.4, 0.3], Decibels::Finite(30.0), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn config_round_trip_and_schema_check() {
        let mut cfg = ExperimentConfig::new(KernelFamily::Moffat);
        cfg.bsnr_db = Some(Decibels::Finite(30.0));
        cfg.sapg = Some(SapgConfig::desk(KernelFamily::Moffat));
        let text = cfg.to_json().unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);

        let minimal = r#"{"schema_version": 1, "family": "laplace"}"#;
        let m = ExperimentConfig::from_json(minimal).unwrap();
        assert_eq!(m.sapg_config(), SapgConfig::desk(KernelFamily::Laplace));
        assert_eq!(m.alpha_true(), vec![0.3]);

        let wrong = r#"{"schema_version": 9, "family": "laplace"}"#;
        assert!(matches!(ExperimentConfig::from_json(wrong), Err(Error::Config(_))));
        let missing = r#"{"family": "laplace"}"#;
        assert!(matches!(ExperimentConfig::from_json(missing), Err(Error::Config(_))));
        let unknown = r#"{"schema_version": 1, "family": "laplace", "colour": 3}"#;
        assert!(matches!(ExperimentConfig::from_json(unknown), Err(Error::Config(_))));
    }

    #[test]
    fn gradcheck_passes_and_catches_corruption() {
        for family in KernelFamily::ALL {
            let alpha = reference_alpha(family);
            let opts = GradcheckOptions::default();
            let r = gradcheck(family, &alpha, &opts).unwrap();
            assert!(r.pass, "{family}: {r:?}");
            let bad = gradcheck(
                family,
                &alpha,
                &GradcheckOptions {
                    corrupt: true,
                    ..opts
                },
            )
            .unwrap();
            assert!(!bad.pass, "{family}");
        }
    }

    #[test]
    fn gradcheck_on_near_delta_kernel() {
        let r = gradcheck(KernelFamily::Gaussian, &[10.0, 10.0], &GradcheckOptions::default()).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn relative_error_edge_cases() {
        assert_eq!(relative_error(&[0.0], &[0.0], 0.0), 0.0);
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0], 0.0), 0.0);
        assert!((relative_error(&[2.0], &[1.0], 0.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(&[2.0], &[1.0], 10.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn sweep_parameter_application() {
        let base = SapgConfig::desk(KernelFamily::Gaussian);
        let c = SweepParameter::DeltaScale.apply(&base, &[2.0]).unwrap();
        assert_eq!(c.delta_scales.alpha, 2.0 * base.delta_scales.alpha);
        assert_eq!(c.delta_scales.theta, 2.0 * base.delta_scales.theta);
        let c = SweepParameter::Alpha0.apply(&base, &[0.2, 0.7]).unwrap();
        assert_eq!(c.alpha0, Some(vec![0.2, 0.7]));
        assert!(SweepParameter::Theta0.apply(&base, &[0.1, 0.2]).is_err());
        assert!(SweepParameter::LipschitzScale.apply(&base, &[f64::NAN]).is_err());
        assert_eq!("lipschitz-scale".parse::<SweepParameter>().unwrap(), SweepParameter::LipschitzScale);
    }

    #[test]
    fn empty_sweep_is_empty() {
        let y = smooth(16);
        let domain = default_domain(KernelFamily::Gaussian, &y, 15.0, 45.0).unwrap();
        let out = sweep(
            &y,
            KernelFamily::Gaussian,
            &domain,
            &default_prior(),
            &SapgConfig::desk(KernelFamily::Gaussian),
            SweepParameter::Theta0,
            &[],
            1,
        )
        .unwrap();
        assert!(out.is_empty());
        let mut buf = Vec::new();
        write_sweep_csv(SweepParameter::Theta0, &out, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1);
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(1e-3, 1.0, 4);
        assert_eq!(g.len(), 4);
        assert!((g[0] - 1e-3).abs() < 1e-15 && (g[3] - 1.0).abs() < 1e-12);
        assert!((g[1] - 1e-2).abs() < 1e-12);
        assert!(log_grid(1.0, 2.0, 0).is_empty());
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u64> = (0..50).collect();
        let out = parallel_map(&items, 3, |v| v * v).unwrap();
        assert_eq!(out, items.iter().map(|v| v * v).collect::<Vec<_>>());
    }

    #[test]
    fn presets_echo_table_settings() {
        let p = ReproPreset::new(Table::Table3, Scale::Full);
        assert_eq!(p.family, KernelFamily::Moffat);
        assert_eq!(p.bsnr_db, vec![20.0, 30.0]);
        assert_eq!(p.sapg, SapgConfig::full(KernelFamily::Moffat));
        assert_eq!(p.sapg.n_iterations, 30_000);
        let d = ReproPreset::new(Table::Table1, Scale::Desk);
        assert_eq!(d.crop, Some(128));
        assert_eq!(d.sapg.n_iterations, 5_000);
        assert_eq!(d.sapg.warmup_steps, 5_000);
    }
}
