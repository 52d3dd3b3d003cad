//! MYULA: unadjusted Langevin steps on the posterior (or the prior alone)
//! with the nonsmooth prior replaced by its Moreau-Yosida envelope.
//!
//! One step reads
//! `x' = (1 - g/l) x - g grad_x f(x) + (g/l) prox_{theta l g}(x) + sqrt(2 g) z`
//! with step `g`, smoothing `l` and `z` standard normal per pixel.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fft::Spectrum;
use crate::image::ImageGrid;
use crate::kernels::{BlurModel, BlurOperator};
use crate::params::HyperParams;
use crate::prior::{PriorSpec, ProxWorkspace};

/// The data term `||y - H x||^2 / (2 sigma2)` with cached spectra.
#[derive(Clone, Debug)]
pub struct Fidelity {
    op: BlurOperator,
    y_spec: Spectrum,
    sigma2: f64,
}

impl Fidelity {
    pub fn new(y: &ImageGrid, model: &BlurModel, sigma2: f64) -> Result<Self> {
        Self::from_operator(y, model.operator(), sigma2)
    }

    pub fn from_operator(y: &ImageGrid, op: BlurOperator, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::invalid(format!("sigma2 must be positive, got {sigma2}")));
        }
        let y_spec = op.spectrum(y)?;
        Ok(Self { op, y_spec, sigma2 })
    }

    /// Reuses the observation spectrum with a new operator and variance.
    pub fn with_operator(&self, op: BlurOperator, sigma2: f64) -> Result<Self> {
        if op.model().image_dims() != self.op.model().image_dims() {
            return Err(Error::DimensionMismatch {
                expected: self.op.model().image_dims(),
                found: op.model().image_dims(),
            });
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::invalid(format!("sigma2 must be positive, got {sigma2}")));
        }
        Ok(Self {
            op,
            y_spec: self.y_spec.clone(),
            sigma2,
        })
    }

    pub fn operator(&self) -> &BlurOperator {
        &self.op
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Lipschitz constant of `grad_x f`.
    pub fn lipschitz(&self) -> f64 {
        self.op.spectral_norm_sq() / self.sigma2
    }

    fn residual(&self, xs: &Spectrum) -> Spectrum {
        self.op.transfer().mul_sub(xs, &self.y_spec)
    }
}

/// What a chain targets: `p(x | y, theta, alpha, sigma2)` when a fidelity
/// term is present, the prior `p(x | theta)` otherwise.
#[derive(Clone, Debug)]
pub struct Target {
    pub fidelity: Option<Fidelity>,
    pub prior: PriorSpec,
}

impl Target {
    pub fn posterior(fidelity: Fidelity, prior: PriorSpec) -> Self {
        Self {
            fidelity: Some(fidelity),
            prior,
        }
    }

    pub fn prior_only(prior: PriorSpec) -> Self {
        Self { fidelity: None, prior }
    }

    /// Step-size ceiling `1 / (L + 1/lambda)`.
    pub fn max_step(&self) -> f64 {
        let l = self.fidelity.as_ref().map_or(0.0, Fidelity::lipschitz);
        1.0 / (l + 1.0 / self.prior.lambda)
    }
}

/// Quantities needed by the SAPG gradient estimators, evaluated at one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub g_value: f64,
    pub grad_alpha: Vec<f64>,
    pub grad_sigma2: f64,
}

/// A single-owner Markov chain: current image, generator and bookkeeping.
#[derive(Clone, Debug)]
pub struct ChainState {
    x: ImageGrid,
    rng: ChaCha8Rng,
    step_count: u64,
    x_spec: Option<Spectrum>,
    prox_ws: ProxWorkspace,
}

impl ChainState {
    pub fn new(x0: ImageGrid, seed: u64) -> Self {
        Self::with_stream(x0, seed, 0)
    }

    /// Independent generator stream for the same seed, e.g. for a second chain.
    pub fn with_stream(x0: ImageGrid, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            x: x0,
            rng,
            step_count: 0,
            x_spec: None,
            prox_ws: ProxWorkspace::new(),
        }
    }

    pub fn x(&self) -> &ImageGrid {
        &self.x
    }

    pub fn into_x(self) -> ImageGrid {
        self.x
    }

    pub fn set_x(&mut self, x: ImageGrid) {
        self.x = x;
        self.x_spec = None;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Iterations used by the most recent prox solve.
    pub fn last_prox_iterations(&self) -> usize {
        self.prox_ws.last.iterations
    }

    fn spectrum(&mut self, f: &Fidelity) -> Result<&Spectrum> {
        if self.x_spec.is_none() {
            self.x_spec = Some(f.op.spectrum(&self.x)?);
        }
        Ok(self.x_spec.as_ref().expect("just filled"))
    }
}

/// Statistics of the current sample under `target` without moving the chain.
pub fn evaluate(state: &mut ChainState, target: &Target) -> Result<StepStats> {
    let g_value = target.prior.potential_value(&state.x);
    match &target.fidelity {
        None => Ok(StepStats {
            g_value,
            grad_alpha: Vec::new(),
            grad_sigma2: 0.0,
        }),
        Some(f) => {
            let s2 = f.sigma2;
            let xs = state.spectrum(f)?;
            let resid = f.residual(xs);
            Ok(StepStats {
                g_value,
                grad_alpha: f.op.grad_alpha_from_spectra(xs, &resid, s2),
                grad_sigma2: -resid.norm_sq() / (2.0 * s2 * s2),
            })
        }
    }
}

/// One MYULA transition; returns the statistics of the new sample.
pub fn myula_step(state: &mut ChainState, target: &Target, gamma: f64) -> Result<StepStats> {
    advance(state, target, gamma)?;
    evaluate(state, target)
}

fn advance(state: &mut ChainState, target: &Target, gamma: f64) -> Result<()> {
    let limit = target.max_step();
    if !(gamma > 0.0 && gamma < limit) {
        return Err(Error::UnstableStep { gamma, limit });
    }
    target.prior.validate()?;
    let lambda = target.prior.lambda;

    let grad = match &target.fidelity {
        Some(f) => {
            let xs = state.spectrum(f)?;
            let resid = f.residual(xs);
            let g = f.op.transfer().conj_mul(&resid);
            Some(f.op.fft().inverse(&g))
        }
        None => None,
    };
    let prox = target.prior.prox(&state.x, &mut state.prox_ws)?;

    let keep = 1.0 - gamma / lambda;
    let pull = gamma / lambda;
    let noise = (2.0 * gamma).sqrt();
    let sigma2 = target.fidelity.as_ref().map_or(1.0, |f| f.sigma2);
    let rng = &mut state.rng;
    let xs = state.x.as_mut_slice();
    match grad {
        Some(g) => {
            let scale = gamma / sigma2;
            for ((x, p), gx) in xs.iter_mut().zip(prox.as_slice()).zip(&g) {
                let z: f64 = rng.sample(StandardNormal);
                *x = keep * *x - scale * gx + pull * p + noise * z;
            }
        }
        None => {
            for (x, p) in xs.iter_mut().zip(prox.as_slice()) {
                let z: f64 = rng.sample(StandardNormal);
                *x = keep * *x + pull * p + noise * z;
            }
        }
    }
    state.x_spec = None;
    state.step_count += 1;
    if !state.x.is_finite() {
        return Err(Error::NonFinite {
            iteration: state.step_count as usize,
            what: "chain state",
        });
    }
    Ok(())
}

/// Running sums of the per-sample statistics; optionally keeps every record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChainStatistics {
    pub count: usize,
    pub sum_g: f64,
    pub sum_grad_alpha: Vec<f64>,
    pub sum_grad_sigma2: f64,
    history: Option<Vec<(u64, StepStats)>>,
}

impl ChainStatistics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_history() -> Self {
        Self {
            history: Some(Vec::new()),
            ..Self::default()
        }
    }

    pub fn push(&mut self, step: u64, s: &StepStats) {
        if self.sum_grad_alpha.len() < s.grad_alpha.len() {
            self.sum_grad_alpha.resize(s.grad_alpha.len(), 0.0);
        }
        self.count += 1;
        self.sum_g += s.g_value;
        for (acc, v) in self.sum_grad_alpha.iter_mut().zip(&s.grad_alpha) {
            *acc += v;
        }
        self.sum_grad_sigma2 += s.grad_sigma2;
        if let Some(h) = &mut self.history {
            h.push((step, s.clone()));
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    fn n(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::invalid("no chain samples accumulated"));
        }
        Ok(self.count as f64)
    }

    pub fn mean_g(&self) -> Result<f64> {
        Ok(self.sum_g / self.n()?)
    }

    pub fn mean_grad_alpha(&self) -> Result<Vec<f64>> {
        let n = self.n()?;
        Ok(self.sum_grad_alpha.iter().map(|v| v / n).collect())
    }

    pub fn mean_grad_sigma2(&self) -> Result<f64> {
        Ok(self.sum_grad_sigma2 / self.n()?)
    }

    pub fn history(&self) -> Option<&[(u64, StepStats)]> {
        self.history.as_deref()
    }

    /// CSV with columns `step,g_value,grad_alpha_1..,grad_sigma2`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let history = self
            .history
            .as_ref()
            .ok_or_else(|| Error::invalid("statistics were collected without history"))?;
        let mut w = csv::Writer::from_writer(out);
        let k = self.sum_grad_alpha.len();
        let mut header = vec!["step".to_string(), "g_value".to_string()];
        header.extend((1..=k).map(|j| format!("grad_alpha_{j}")));
        header.push("grad_sigma2".into());
        w.write_record(&header)?;
        for (step, s) in history {
            let mut row = vec![step.to_string(), s.g_value.to_string()];
            row.extend(s.grad_alpha.iter().map(f64::to_string));
            row.push(s.grad_sigma2.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs `n_steps` transitions, accumulating every `thinning`-th sample.
pub fn myula_run(
    state: &mut ChainState,
    target: &Target,
    gamma: f64,
    n_steps: usize,
    thinning: usize,
    stats: &mut ChainStatistics,
) -> Result<()> {
    let thinning = thinning.max(1);
    for i in 0..n_steps {
        let s = myula_step(state, target, gamma)?;
        if (i + 1) % thinning == 0 {
            stats.push(state.step_count, &s);
        }
    }
    Ok(())
}

/// Transitions that skip the statistics, for warm-up.
pub fn myula_burn(state: &mut ChainState, target: &Target, gamma: f64, n_steps: usize) -> Result<()> {
    for _ in 0..n_steps {
        advance(state, target, gamma)?;
    }
    Ok(())
}

/// Convenience form taking the model parameters directly; builds the
/// operator on every call.
pub fn myula_step_with(
    state: &mut ChainState,
    y: &ImageGrid,
    params: &HyperParams,
    model: &BlurModel,
    prior: &PriorSpec,
    gamma: f64,
    include_fidelity: bool,
) -> Result<StepStats> {
    let prior = prior.with_theta(params.theta);
    let target = if include_fidelity {
        let model = model.with_alpha(params.alpha.clone())?;
        Target::posterior(Fidelity::new(y, &model, params.sigma2)?, prior)
    } else {
        Target::prior_only(prior)
    };
    myula_step(state, &target, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFamily;

    fn setup(rows: usize, cols: usize) -> (ImageGrid, BlurModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = ImageGrid::random_normal(rows, cols, 100.0, 20.0, &mut rng);
        let model = BlurModel::new(KernelFamily::Gaussian, vec![0.4, 0.3], 7, (rows, cols)).unwrap();
        let y = model.apply(&x).unwrap();
        (y, model)
    }

    #[test]
    fn brownian_increment_variance() {
        let prior = PriorSpec::tv(0.0, 1.0);
        let target = Target::prior_only(prior);
        let gamma = 0.3;
        let mut state = ChainState::new(ImageGrid::zeros(4, 4), 1);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let n = 100_000;
        for _ in 0..n {
            let before = state.x().as_slice()[5];
            myula_step(&mut state, &target, gamma).unwrap();
            let inc = state.x().as_slice()[5] - before;
            sum += inc;
            sum_sq += inc * inc;
        }
        let var = sum_sq / n as f64 - (sum / n as f64).powi(2);
        assert!((var / (2.0 * gamma) - 1.0).abs() < 0.03, "{var}");
    }

    #[test]
    fn same_seed_same_chain() {
        let (y, model) = setup(16, 16);
        let target = Target::posterior(Fidelity::new(&y, &model, 4.0).unwrap(), PriorSpec::tv(0.05, 2.0));
        let gamma = 0.9 * target.max_step();
        let run = || {
            let mut s = ChainState::new(y.clone(), 42);
            let mut stats = ChainStatistics::new();
            myula_run(&mut s, &target, gamma, 50, 1, &mut stats).unwrap();
            (s.into_x(), stats)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn unstable_step_refused() {
        let (y, model) = setup(8, 8);
        let target = Target::posterior(Fidelity::new(&y, &model, 1.0).unwrap(), PriorSpec::tv(0.1, 1.0));
        let mut s = ChainState::new(y.clone(), 0);
        assert!((target.max_step() - 0.5).abs() < 1e-12);
        assert!(matches!(myula_step(&mut s, &target, target.max_step()), Err(Error::UnstableStep { .. })));
        assert!(matches!(myula_step(&mut s, &target, 0.0), Err(Error::UnstableStep { .. })));
        assert!(myula_step(&mut s, &target, 0.49).is_ok());
    }

    #[test]
    fn zero_steps_leave_state_alone() {
        let (y, model) = setup(8, 8);
        let target = Target::posterior(Fidelity::new(&y, &model, 1.0).unwrap(), PriorSpec::tv(0.1, 1.0));
        let mut s = ChainState::new(y.clone(), 0);
        let mut stats = ChainStatistics::new();
        myula_run(&mut s, &target, 0.1, 0, 1, &mut stats).unwrap();
        assert_eq!(s.x(), &y);
        assert_eq!(s.step_count(), 0);
        assert!(stats.is_empty());
        assert!(stats.mean_g().is_err());
    }

    #[test]
    fn statistics_match_recomputation() {
        let (y, model) = setup(16, 16);
        let sigma2 = 4.0;
        let prior = PriorSpec::tv(0.05, 2.0);
        let target = Target::posterior(Fidelity::new(&y, &model, sigma2).unwrap(), prior.clone());
        let gamma = 0.9 * target.max_step();
        let mut s = ChainState::new(y.clone(), 9);
        let mut stats = ChainStatistics::with_history();
        let mut stored = Vec::new();
        for _ in 0..100 {
            myula_run(&mut s, &target, gamma, 1, 1, &mut stats).unwrap();
            stored.push(s.x().clone());
        }
        let mut g = 0.0;
        let mut ga = vec![0.0; 2];
        let mut gs = 0.0;
        for x in &stored {
            g += crate::prior::tv_norm(x);
            let fg = crate::kernels::fidelity_gradients(&y, x, &model, sigma2).unwrap();
            ga[0] += fg.grad_alpha[0];
            ga[1] += fg.grad_alpha[1];
            gs += fg.grad_sigma2;
        }
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + b.abs());
        assert!(close(stats.mean_g().unwrap(), g / 100.0));
        let ma = stats.mean_grad_alpha().unwrap();
        assert!(close(ma[0], ga[0] / 100.0) && close(ma[1], ga[1] / 100.0));
        assert!(close(stats.mean_grad_sigma2().unwrap(), gs / 100.0));

        let mut buf = Vec::new();
        stats.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,g_value,grad_alpha_1,grad_alpha_2,grad_sigma2\n"));
        assert_eq!(text.lines().count(), 101);
    }

    #[test]
    fn convenience_step_matches_target_step() {
        let (y, model) = setup(8, 8);
        let params = HyperParams::new(0.1, vec![0.4, 0.3], 2.0);
        let prior = PriorSpec::tv(0.5, 1.0);
        let mut a = ChainState::new(y.clone(), 5);
        let mut b = a.clone();
        let sa = myula_step_with(&mut a, &y, &params, &model, &prior, 0.3, true).unwrap();
        let target = Target::posterior(Fidelity::new(&y, &model, 2.0).unwrap(), prior.with_theta(0.1));
        let sb = myula_step(&mut b, &target, 0.3).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a.x(), b.x());
    }
}
