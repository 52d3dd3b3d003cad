//! Stochastic approximation proximal gradient (SAPG) calibration of
//! `(theta, alpha, sigma2)` by maximum marginal likelihood.
//!
//! Each iteration advances a MYULA chain targeting the posterior at the
//! current parameters, forms Monte Carlo estimates of the marginal-likelihood
//! gradient through Fisher's identity, and takes a projected ascent step.
//! The returned estimate is the plain average of the iterates after burn-in.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{sigma2_bounds_from_bsnr, ImageGrid};
use crate::kernels::{lipschitz_bound, BlurModel, KernelFamily, DEFAULT_SUPPORT};
use crate::params::{project_box, HyperDomain, HyperParams, Interval, THETA_BOX};
use crate::prior::{grad_log_z, PriorSpec, TvProxConfig};
use crate::sampler::{myula_burn, myula_run, ChainState, ChainStatistics, Fidelity, Target};

/// `scale * n^-kappa / d`.
pub fn delta_schedule(n: usize, kappa: f64, d: usize, scale: f64) -> f64 {
    assert!(n >= 1, "delta schedule is indexed from 1");
    scale * (n as f64).powf(-kappa) / d as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaScales {
    pub theta: f64,
    pub alpha: f64,
    pub sigma2: f64,
}

/// Number of MYULA steps per SAPG iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BatchSchedule {
    Constant { size: usize },
    /// `ceil(n^exponent)`.
    Increasing { exponent: f64 },
}

impl BatchSchedule {
    pub fn size(&self, n: usize) -> usize {
        match *self {
            BatchSchedule::Constant { size } => size.max(1),
            BatchSchedule::Increasing { exponent } => ((n as f64).powf(exponent).ceil() as usize).max(1),
        }
    }
}

/// MYULA step size. `Auto` uses `safety / (L + 1/lambda)` with
/// `L = lipschitz_scale * max_alpha ||H(alpha)||^2 / sigma2_min`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepRule {
    Auto { safety: f64 },
    Fixed { gamma: f64 },
}

/// Constant step or `gamma * n^-exponent`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepDecay {
    Constant,
    Power { exponent: f64 },
}

/// Moreau-Yosida parameter. `Auto` uses `min(factor / L, max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaRule {
    Auto { factor: f64, max: f64 },
    Fixed { lambda: f64 },
}

/// Settings of the prior-only chain used by [`sapg_calibrate_dual`].
/// Unset values default to the main chain's `lambda` and `0.98 * lambda`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PriorChainConfig {
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SapgConfig {
    pub n_iterations: usize,
    pub burn_in: usize,
    pub warmup_steps: usize,
    pub batch: BatchSchedule,
    pub kappa: f64,
    pub delta_scales: DeltaScales,
    pub step: StepRule,
    pub step_decay: StepDecay,
    pub lambda: LambdaRule,
    pub lipschitz_scale: f64,
    pub stop_tol: f64,
    pub stop_check_every: usize,
    pub seed: u64,
    pub theta0: f64,
    /// Initial blur parameters; box midpoints when absent.
    pub alpha0: Option<Vec<f64>>,
    /// Initial noise variance; box midpoint when absent.
    pub sigma2_0: Option<f64>,
    pub tv_solver: TvProxConfig,
    #[serde(default)]
    pub prior_chain: PriorChainConfig,
    /// Fill the `elapsed_ms` trace column with wall-clock times. Off by
    /// default so that traces are reproducible byte for byte.
    #[serde(default)]
    pub record_elapsed: bool,
}

impl SapgConfig {
    /// Full-scale settings.
    pub fn full(family: KernelFamily) -> Self {
        let (delta_scales, alpha0) = match family {
            KernelFamily::Gaussian => (
                DeltaScales {
                    theta: 0.001,
                    alpha: 10.0,
                    sigma2: 1000.0,
                },
                vec![0.5, 0.5],
            ),
            KernelFamily::Laplace => (
                DeltaScales {
                    theta: 0.001,
                    alpha: 100.0,
                    sigma2: 10000.0,
                },
                vec![0.1],
            ),
            KernelFamily::Moffat => (
                DeltaScales {
                    theta: 0.1,
                    alpha: 100.0,
                    sigma2: 10000.0,
                },
                vec![0.1, 2.5],
            ),
        };
        Self {
            n_iterations: 30_000,
            burn_in: 24_000,
            warmup_steps: 30_000,
            batch: BatchSchedule::Constant { size: 1 },
            kappa: 0.8,
            delta_scales,
            step: StepRule::Auto { safety: 0.98 },
            step_decay: StepDecay::Constant,
            lambda: LambdaRule::Auto { factor: 5.0, max: 2.0 },
            lipschitz_scale: 1.0,
            stop_tol: 1e-5,
            stop_check_every: 100,
            seed: 0,
            theta0: 0.01,
            alpha0: Some(alpha0),
            sigma2_0: None,
            tv_solver: TvProxConfig::default(),
            prior_chain: PriorChainConfig::default(),
            record_elapsed: false,
        }
    }

    /// Reduced budget for 128x128 crops.
    ///
    /// With a sixth of the iterations the full-scale step sizes leave the
    /// chain in its initial transient: the first updates push the blur
    /// parameters to the edge of the box and the remaining budget is spent
    /// walking back. The desk steps are retuned per family so the transient
    /// ends well before burn-in.
    pub fn desk(family: KernelFamily) -> Self {
        let full = Self::full(family);
        let (delta_scales, lipschitz_scale) = match family {
            KernelFamily::Gaussian => (
                DeltaScales {
                    theta: 0.02,
                    alpha: 30.0,
                    sigma2: 5000.0,
                },
                0.1,
            ),
            KernelFamily::Laplace => (
                DeltaScales {
                    alpha: 30.0,
                    ..full.delta_scales
                },
                1.0,
            ),
            KernelFamily::Moffat => (
                DeltaScales {
                    alpha: 30.0,
                    ..full.delta_scales
                },
                0.3,
            ),
        };
        Self {
            n_iterations: 5_000,
            burn_in: 4_000,
            warmup_steps: 5_000,
            delta_scales,
            lipschitz_scale,
            ..full
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_iterations > 0 && self.burn_in >= self.n_iterations {
            return bad(format!(
                "burn_in ({}) must be smaller than n_iterations ({})",
                self.burn_in, self.n_iterations
            ));
        }
        if !(0.5..=0.9).contains(&self.kappa) {
            return bad(format!("kappa must lie in [0.5, 0.9], got {}", self.kappa));
        }
        if !(self.stop_tol > 0.0) {
            return bad(format!("stop_tol must be positive, got {}", self.stop_tol));
        }
        let s = self.delta_scales;
        if [s.theta, s.alpha, s.sigma2].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("delta scales must be finite and nonnegative".into());
        }
        if !(self.lipschitz_scale > 0.0 && self.lipschitz_scale.is_finite()) {
            return bad(format!("lipschitz_scale must be positive, got {}", self.lipschitz_scale));
        }
        match self.step {
            StepRule::Auto { safety } if !(safety > 0.0 && safety < 1.0) => {
                return bad(format!("step safety factor must lie in (0, 1), got {safety}"))
            }
            StepRule::Fixed { gamma } if !(gamma > 0.0) => return bad(format!("gamma must be positive, got {gamma}")),
            _ => {}
        }
        match self.lambda {
            LambdaRule::Auto { factor, max } if !(factor > 0.0 && max > 0.0) => {
                return bad("lambda rule needs positive factor and max".into())
            }
            LambdaRule::Fixed { lambda } if !(lambda > 0.0) => {
                return bad(format!("lambda must be positive, got {lambda}"))
            }
            _ => {}
        }
        if let BatchSchedule::Increasing { exponent } = self.batch {
            if !(exponent >= 0.0) {
                return bad("batch exponent must be nonnegative".into());
            }
        }
        if let StepDecay::Power { exponent } = self.step_decay {
            if !(exponent >= 0.0) {
                return bad("step decay exponent must be nonnegative".into());
            }
        }
        Ok(())
    }
}

/// Default admissible box for a family given the observation: `theta` in
/// `[1e-3, 1]`, the family's `alpha` box and the noise variances matching a
/// BSNR between `bsnr_lo_db` and `bsnr_hi_db`.
///
/// `||Hx||^2` is unknown at calibration time and is approximated by `||y||^2`.
pub fn default_domain(family: KernelFamily, y: &ImageGrid, bsnr_lo_db: f64, bsnr_hi_db: f64) -> Result<HyperDomain> {
    let (s_max, s_min) = sigma2_bounds_from_bsnr(y, bsnr_lo_db, bsnr_hi_db)?;
    HyperDomain::new(THETA_BOX, family.admissible_box(), Interval::new(s_min, s_max)?)
}

/// Step sizes actually used by a run, derived from the config and domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSettings {
    pub lipschitz: f64,
    pub lambda: f64,
    pub gamma: f64,
    /// Smallest noise variance for which `gamma` is a stable MYULA step
    /// over the whole alpha box. Below `sigma2.lo` unless the Lipschitz
    /// constant was deliberately underestimated.
    pub sigma2_floor: f64,
}

impl ChainSettings {
    /// `domain` with the sigma2 interval raised to the stability floor.
    pub fn stable_domain(&self, domain: &HyperDomain) -> Result<HyperDomain> {
        let mut out = domain.clone();
        if self.sigma2_floor > out.sigma2.lo {
            if self.sigma2_floor > out.sigma2.hi {
                return Err(Error::Config(format!(
                    "step {} is unstable for every sigma2 in [{}, {}]",
                    self.gamma, out.sigma2.lo, out.sigma2.hi
                )));
            }
            out.sigma2.lo = self.sigma2_floor;
        }
        Ok(out)
    }
}

const SIGMA2_FLOOR_MARGIN: f64 = 1.01;

pub fn chain_settings(family: KernelFamily, domain: &HyperDomain, dims: (usize, usize), config: &SapgConfig) -> Result<ChainSettings> {
    let spectral = lipschitz_bound(family, &domain.alpha, DEFAULT_SUPPORT, dims, 1.0)?;
    let lipschitz = config.lipschitz_scale * spectral / domain.sigma2.lo;
    let lambda = match config.lambda {
        LambdaRule::Auto { factor, max } => (factor / lipschitz).min(max),
        LambdaRule::Fixed { lambda } => lambda,
    };
    let gamma = match config.step {
        StepRule::Auto { safety } => safety / (lipschitz + 1.0 / lambda),
        StepRule::Fixed { gamma } => gamma,
    };
    let slack = 1.0 / gamma - 1.0 / lambda;
    if !(slack > 0.0) {
        return Err(Error::Config(format!("step {gamma} is not below lambda {lambda}")));
    }
    let sigma2_floor = SIGMA2_FLOOR_MARGIN * spectral / slack;
    Ok(ChainSettings {
        lipschitz,
        lambda,
        gamma,
        sigma2_floor,
    })
}

/// Monte Carlo ascent directions for `(theta, alpha, sigma2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub theta: f64,
    pub alpha: Vec<f64>,
    pub sigma2: f64,
}

/// `theta: d/(q theta) - mean g(X)`, `alpha: -mean grad_alpha f(X)`,
/// `sigma2: -mean[grad_sigma2 f(X) + d/(2 sigma2)]`.
pub fn gradient_estimates(stats: &ChainStatistics, params: &HyperParams, q: f64, d: usize) -> Result<GradientEstimate> {
    let mean_g = stats.mean_g()?;
    let theta = -grad_log_z(params.theta, d, q)? - mean_g;
    let mut alpha: Vec<f64> = stats.mean_grad_alpha()?.iter().map(|g| -g).collect();
    alpha.resize(params.alpha.len(), 0.0);
    let sigma2 = -(stats.mean_grad_sigma2()? + d as f64 / (2.0 * params.sigma2));
    Ok(GradientEstimate { theta, alpha, sigma2 })
}

/// Projected step `Pi(params + delta * direction)` with per-block step sizes.
pub fn apply_update(
    params: &HyperParams,
    direction: &GradientEstimate,
    steps: &DeltaScales,
    domain: &HyperDomain,
) -> Result<HyperParams> {
    let moved = HyperParams {
        theta: params.theta + steps.theta * direction.theta,
        alpha: params
            .alpha
            .iter()
            .zip(&direction.alpha)
            .map(|(a, g)| a + steps.alpha * g)
            .collect(),
        sigma2: params.sigma2 + steps.sigma2 * direction.sigma2,
    };
    HyperParams::from_slice(&project_box(&moved.to_vec(), domain)?)
}

/// One row per SAPG iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SapgTrace {
    pub theta: Vec<f64>,
    pub alpha: Vec<Vec<f64>>,
    pub sigma2: Vec<f64>,
    pub delta_theta: Vec<f64>,
    pub delta_alpha: Vec<Vec<f64>>,
    pub delta_sigma2: Vec<f64>,
    pub elapsed_ms: Vec<u64>,
    pub mean_prox_iterations: Vec<f64>,
}

impl SapgTrace {
    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    fn push(&mut self, p: &HyperParams, g: &GradientEstimate, elapsed_ms: u64, prox_iters: f64) {
        self.theta.push(p.theta);
        self.alpha.push(p.alpha.clone());
        self.sigma2.push(p.sigma2);
        self.delta_theta.push(g.theta);
        self.delta_alpha.push(g.alpha.clone());
        self.delta_sigma2.push(g.sigma2);
        self.elapsed_ms.push(elapsed_ms);
        self.mean_prox_iterations.push(prox_iters);
    }

    /// Plain average of iterates `burn_in+1 ..= len`, recomputed from the raw arrays.
    pub fn average_after(&self, burn_in: usize) -> Option<HyperParams> {
        if burn_in >= self.len() {
            return None;
        }
        let n = (self.len() - burn_in) as f64;
        let k = self.alpha[0].len();
        let mut alpha = vec![0.0; k];
        for a in &self.alpha[burn_in..] {
            for (acc, v) in alpha.iter_mut().zip(a) {
                *acc += v;
            }
        }
        Some(HyperParams {
            theta: self.theta[burn_in..].iter().sum::<f64>() / n,
            alpha: alpha.into_iter().map(|v| v / n).collect(),
            sigma2: self.sigma2[burn_in..].iter().sum::<f64>() / n,
        })
    }

    /// CSV columns `n,theta,alpha_1..,sigma2,delta_theta,delta_alpha_1..,delta_sigma2,elapsed_ms`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let k = self.alpha.first().map_or(0, Vec::len);
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["n".to_string(), "theta".to_string()];
        header.extend((1..=k).map(|j| format!("alpha_{j}")));
        header.push("sigma2".into());
        header.push("delta_theta".into());
        header.extend((1..=k).map(|j| format!("delta_alpha_{j}")));
        header.push("delta_sigma2".into());
        header.push("elapsed_ms".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![(i + 1).to_string(), self.theta[i].to_string()];
            row.extend(self.alpha[i].iter().map(f64::to_string));
            row.push(self.sigma2[i].to_string());
            row.push(self.delta_theta[i].to_string());
            row.extend(self.delta_alpha[i].iter().map(f64::to_string));
            row.push(self.delta_sigma2[i].to_string());
            row.push(self.elapsed_ms[i].to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Outcome of a calibration run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub family: KernelFamily,
    pub estimate: HyperParams,
    pub initial: HyperParams,
    pub domain: HyperDomain,
    pub settings: ChainSettings,
    pub n_used: usize,
    pub stopped_early: bool,
    pub trace: SapgTrace,
}

/// JSON summary written next to the trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub family: KernelFamily,
    pub theta_bar: f64,
    pub alpha_bar: Vec<f64>,
    pub sigma2_bar: f64,
    pub n_used: usize,
    pub stopped_early: bool,
    pub initial: HyperParams,
    pub domain: HyperDomain,
    pub settings: ChainSettings,
    pub config_echo: SapgConfig,
}

impl Calibration {
    pub fn summary(&self, config: &SapgConfig) -> CalibrationSummary {
        CalibrationSummary {
            family: self.family,
            theta_bar: self.estimate.theta,
            alpha_bar: self.estimate.alpha.clone(),
            sigma2_bar: self.estimate.sigma2,
            n_used: self.n_used,
            stopped_early: self.stopped_early,
            initial: self.initial.clone(),
            domain: self.domain.clone(),
            settings: self.settings,
            config_echo: config.clone(),
        }
    }
}

/// A failed run, with everything recorded up to the failure.
#[derive(Debug)]
pub struct CalibrationFailure {
    pub error: Error,
    pub trace: SapgTrace,
}

impl std::fmt::Display for CalibrationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "calibration failed after {} iterations: {}", self.trace.len(), self.error)
    }
}

impl std::error::Error for CalibrationFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<CalibrationFailure> for Error {
    fn from(f: CalibrationFailure) -> Self {
        f.error
    }
}

impl From<Error> for CalibrationFailure {
    fn from(error: Error) -> Self {
        Self {
            error,
            trace: SapgTrace::default(),
        }
    }
}

pub type CalibrationResult = std::result::Result<Calibration, CalibrationFailure>;

fn initial_params(config: &SapgConfig, domain: &HyperDomain) -> Result<HyperParams> {
    let mid = domain.midpoint();
    let alpha = config.alpha0.clone().unwrap_or(mid.alpha);
    if alpha.len() != domain.alpha.len() {
        return Err(Error::Config(format!(
            "alpha0 has {} components, the family needs {}",
            alpha.len(),
            domain.alpha.len()
        )));
    }
    let p = HyperParams {
        theta: config.theta0,
        alpha,
        sigma2: config.sigma2_0.unwrap_or(mid.sigma2),
    };
    if !p.is_finite() {
        return Err(Error::Config("initial parameters must be finite".into()));
    }
    domain.project(&p)
}

/// Running averages after burn-in and the relative-change stopping rule.
struct Averager {
    burn_in: usize,
    sum: Vec<f64>,
    count: usize,
    last_check: Option<Vec<f64>>,
}

impl Averager {
    fn new(burn_in: usize, dim: usize) -> Self {
        Self {
            burn_in,
            sum: vec![0.0; dim],
            count: 0,
            last_check: None,
        }
    }

    fn push(&mut self, n: usize, p: &HyperParams) {
        if n > self.burn_in {
            for (s, v) in self.sum.iter_mut().zip(p.to_vec()) {
                *s += v;
            }
            self.count += 1;
        }
    }

    fn mean(&self) -> Option<Vec<f64>> {
        (self.count > 0).then(|| self.sum.iter().map(|s| s / self.count as f64).collect())
    }

    /// True once every component of the running average moved by less than
    /// `tol` (relative) since the previous check.
    fn converged(&mut self, tol: f64) -> bool {
        let Some(now) = self.mean() else { return false };
        let done = self.last_check.as_ref().is_some_and(|prev| {
            prev.iter()
                .zip(&now)
                .all(|(p, c)| (c - p).abs() <= tol * p.abs().max(f64::MIN_POSITIVE))
        });
        self.last_check = Some(now);
        done
    }
}

struct Run<'a> {
    y: &'a ImageGrid,
    family: KernelFamily,
    domain: HyperDomain,
    prior: PriorSpec,
    config: &'a SapgConfig,
    settings: ChainSettings,
    base_model: BlurModel,
    base_fidelity: Fidelity,
}

impl<'a> Run<'a> {
    fn new(y: &'a ImageGrid, family: KernelFamily, domain: &'a HyperDomain, prior: &PriorSpec, config: &'a SapgConfig) -> Result<(Self, HyperParams)> {
        config.validate()?;
        domain.validate()?;
        if domain.alpha.len() != family.param_dim() {
            return Err(Error::Config(format!(
                "{family} needs {} alpha intervals, domain has {}",
                family.param_dim(),
                domain.alpha.len()
            )));
        }
        if !y.is_finite() {
            return Err(Error::invalid("observation contains non-finite pixels"));
        }
        let settings = chain_settings(family, domain, y.dims(), config)?;
        let domain = settings.stable_domain(domain)?;
        let mut prior = prior.clone();
        prior.lambda = settings.lambda;
        prior.tv_solver = config.tv_solver;
        let p0 = initial_params(config, &domain)?;
        let base_model = BlurModel::new(family, p0.alpha.clone(), DEFAULT_SUPPORT, y.dims())?;
        let base_fidelity = Fidelity::new(y, &base_model, p0.sigma2)?;
        Ok((
            Self {
                y,
                family,
                domain,
                prior,
                config,
                settings,
                base_model,
                base_fidelity,
            },
            p0,
        ))
    }

    fn posterior(&self, p: &HyperParams) -> Result<Target> {
        let model = self.base_model.with_alpha(p.alpha.clone())?;
        let fidelity = self.base_fidelity.with_operator(model.operator(), p.sigma2)?;
        Ok(Target::posterior(fidelity, self.prior.with_theta(p.theta)))
    }

    fn gamma(&self, n: usize) -> f64 {
        match self.config.step_decay {
            StepDecay::Constant => self.settings.gamma,
            StepDecay::Power { exponent } => self.settings.gamma * (n.max(1) as f64).powf(-exponent),
        }
    }

    fn steps(&self, n: usize) -> DeltaScales {
        let s = self.config.delta_scales;
        let d = self.y.len();
        let k = self.config.kappa;
        DeltaScales {
            theta: delta_schedule(n, k, d, s.theta),
            alpha: delta_schedule(n, k, d, s.alpha),
            sigma2: delta_schedule(n, k, d, s.sigma2),
        }
    }

    /// Shared driver; `theta_direction` supplies the theta component.
    fn drive(
        &self,
        p0: HyperParams,
        mut theta_direction: impl FnMut(&HyperParams, &ChainStatistics, usize, u64) -> Result<f64>,
        mut warm_up: impl FnMut(&HyperParams) -> Result<()>,
    ) -> CalibrationResult {
        let start = Instant::now();
        let config = self.config;
        let mut trace = SapgTrace::default();
        let fail = |error: Error, trace: SapgTrace| CalibrationFailure { error, trace };

        let mut chain = ChainState::new(self.y.clone(), config.seed);
        let mut params = p0.clone();
        let target0 = self.posterior(&params).map_err(|e| fail(e, SapgTrace::default()))?;
        if let Err(e) = myula_burn(&mut chain, &target0, self.gamma(1), config.warmup_steps).and_then(|_| warm_up(&params)) {
            return Err(fail(e, trace));
        }

        let d = self.y.len();
        let mut avg = Averager::new(config.burn_in, p0.alpha.len() + 2);
        let mut stopped_early = false;
        let mut n_done = 0;
        for n in 1..=config.n_iterations {
            let step = (|| -> Result<(HyperParams, GradientEstimate, f64)> {
                let target = self.posterior(&params)?;
                let mut stats = ChainStatistics::new();
                let m = config.batch.size(n);
                let mut prox_iters = 0usize;
                for _ in 0..m {
                    myula_run(&mut chain, &target, self.gamma(n), 1, 1, &mut stats)?;
                    prox_iters += chain.last_prox_iterations();
                }
                // q is irrelevant for the alpha and sigma2 components.
                let mut g = gradient_estimates(&stats, &params, 1.0, d)?;
                g.theta = theta_direction(&params, &stats, m, chain.step_count())?;
                let next = apply_update(&params, &g, &self.steps(n), &self.domain)?;
                if !next.is_finite() {
                    return Err(Error::NonFinite {
                        iteration: n,
                        what: "hyperparameters",
                    });
                }
                Ok((next, g, prox_iters as f64 / m as f64))
            })();
            match step {
                Ok((next, g, prox_iters)) => {
                    let elapsed = if config.record_elapsed {
                        start.elapsed().as_millis() as u64
                    } else {
                        0
                    };
                    trace.push(&next, &g, elapsed, prox_iters);
                    if n % 1000 == 0 {
                        log::debug!(
                            "{} iteration {n}: theta {:.4e} alpha {:?} sigma2 {:.4}",
                            self.family,
                            next.theta,
                            next.alpha,
                            next.sigma2
                        );
                    }
                    params = next;
                }
                Err(e) => return Err(fail(e, trace)),
            }
            avg.push(n, &params);
            n_done = n;
            if n > config.burn_in && n % config.stop_check_every.max(1) == 0 && avg.converged(config.stop_tol) {
                stopped_early = n < config.n_iterations;
                break;
            }
        }

        let (estimate, n_used) = match avg.mean() {
            Some(m) => (HyperParams::from_slice(&m).map_err(|e| fail(e, trace.clone()))?, avg.count),
            None => (params.clone(), 0),
        };
        debug_assert_eq!(n_done, trace.len());
        Ok(Calibration {
            family: self.family,
            estimate,
            initial: p0,
            domain: self.domain.clone(),
            settings: self.settings,
            n_used,
            stopped_early,
            trace,
        })
    }
}

/// Calibrates `(theta, alpha, sigma2)` for a homogeneous prior potential.
pub fn sapg_calibrate(
    y: &ImageGrid,
    family: KernelFamily,
    domain: &HyperDomain,
    prior: &PriorSpec,
    config: &SapgConfig,
) -> CalibrationResult {
    let (run, p0) = Run::new(y, family, domain, prior, config)?;
    let q = run
        .prior
        .homogeneity()
        .ok_or_else(|| Error::Config("prior potential is not homogeneous; use the dual-chain calibrator".into()))?;
    let d = y.len();
    run.drive(
        p0,
        |params, stats, _, _| Ok(-grad_log_z(params.theta, d, q)? - stats.mean_g()?),
        |_| Ok(()),
    )
}

/// Calibration without the closed-form normalizing constant: the theta
/// direction is `mean g(X_prior) - mean g(X_post)` with `X_prior` drawn by a
/// second MYULA chain targeting the prior alone.
pub fn sapg_calibrate_dual(
    y: &ImageGrid,
    family: KernelFamily,
    domain: &HyperDomain,
    prior: &PriorSpec,
    config: &SapgConfig,
) -> CalibrationResult {
    let (run, p0) = Run::new(y, family, domain, prior, config)?;
    let lambda = config.prior_chain.lambda.unwrap_or(run.settings.lambda);
    let gamma = config.prior_chain.gamma.unwrap_or(0.98 * lambda);
    let mut prior_spec = run.prior.clone();
    prior_spec.lambda = lambda;
    let prior_chain = std::cell::RefCell::new(ChainState::with_stream(y.clone(), config.seed, 1));
    run.drive(
        p0,
        |params, stats, m, _| {
            let target = Target::prior_only(prior_spec.with_theta(params.theta));
            let mut prior_stats = ChainStatistics::new();
            myula_run(&mut prior_chain.borrow_mut(), &target, gamma, m, 1, &mut prior_stats)?;
            Ok(prior_stats.mean_g()? - stats.mean_g()?)
        },
        |params| {
            let target = Target::prior_only(prior_spec.with_theta(params.theta));
            myula_burn(&mut prior_chain.borrow_mut(), &target, gamma, config.warmup_steps)
        },
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleRegime {
    IncreasingBatch,
    FixedBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub condition: String,
    pub value: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub regime: ScheduleRegime,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub conditions: Vec<ConditionCheck>,
    /// Admissible open interval for `b` (fixed batch only).
    pub b_interval: Option<(f64, f64)>,
    pub interval_nonempty: Option<bool>,
    pub valid: bool,
}

/// Below this width the fixed-batch interval for `b` counts as empty, so the
/// boundary case `a = 5/6` is not decided by rounding.
const INTERVAL_EPS: f64 = 1e-12;

/// Checks the polynomial schedules `delta_n = n^-a`, `gamma_n = n^-b`,
/// `m_n = ceil(n^c)` against the convergence conditions of each regime.
pub fn validate_schedule(a: f64, b: f64, c: f64, regime: ScheduleRegime) -> ScheduleReport {
    let check = |condition: &str, value: f64, holds: bool| ConditionCheck {
        condition: condition.to_string(),
        value,
        holds,
    };
    match regime {
        ScheduleRegime::IncreasingBatch => {
            let conditions = vec![
                check("a < 1", a, a < 1.0),
                check("a + b/2 > 1", a + b / 2.0, a + b / 2.0 > 1.0),
                check("a - b + c > 1", a - b + c, a - b + c > 1.0),
            ];
            let valid = conditions.iter().all(|c| c.holds);
            ScheduleReport {
                regime,
                a,
                b,
                c,
                conditions,
                b_interval: None,
                interval_nonempty: None,
                valid,
            }
        }
        ScheduleRegime::FixedBatch => {
            let lo = 2.0 * (1.0 - a);
            let hi = a - 0.5;
            let nonempty = hi - lo > INTERVAL_EPS;
            let conditions = vec![
                check("a <= 1", a, a <= 1.0),
                check("b > 2(1 - a)", lo, b > lo),
                check("b < a - 1/2", hi, b < hi),
            ];
            let valid = nonempty && conditions.iter().all(|c| c.holds);
            ScheduleReport {
                regime,
                a,
                b,
                c,
                conditions,
                b_interval: Some((lo, hi)),
                interval_nonempty: Some(nonempty),
                valid,
            }
        }
    }
}
