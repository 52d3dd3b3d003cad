//! MAP deconvolution `argmin ||y - H x||^2 / (2 sigma2) + theta g(x)` by ADMM.
//!
//! The problem is solved in the equivalent form
//! `1/2 ||y - H x||^2 + sigma2 theta g(z)` subject to `x = z`, so that the
//! penalty is independent of the noise level. The x-update is exact in the
//! Fourier domain and the z-update is a prox of `g`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Spectrum;
use crate::image::ImageGrid;
use crate::kernels::{BlurModel, BlurOperator};
use crate::params::HyperParams;
use crate::prior::{PriorSpec, ProxWorkspace, TvProxConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    pub max_iters: usize,
    pub rel_change_tol: f64,
    pub admm_penalty: f64,
    /// Inner solver for the z-update.
    #[serde(default = "MapConfig::default_prox")]
    pub prox: TvProxConfig,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            rel_change_tol: 1e-5,
            admm_penalty: 1.0,
            prox: Self::default_prox(),
        }
    }
}

impl MapConfig {
    fn default_prox() -> TvProxConfig {
        TvProxConfig {
            max_iters: 200,
            gap_tol_per_pixel: 1e-6,
            check_every: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("map max_iters must be at least 1".into()));
        }
        if !(self.rel_change_tol > 0.0) {
            return Err(Error::Config(format!("map tolerance must be positive, got {}", self.rel_change_tol)));
        }
        if !(self.admm_penalty > 0.0 && self.admm_penalty.is_finite()) {
            return Err(Error::Config(format!("admm penalty must be positive, got {}", self.admm_penalty)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapResult {
    pub image: ImageGrid,
    pub iterations: usize,
    pub converged: bool,
    /// Objective of the returned sequence, starting with the value at `y`.
    /// Non-increasing: an ADMM iterate replaces the current one only when
    /// it lowers the objective.
    pub objective_trace: Vec<f64>,
}

impl MapResult {
    /// Set when `max_iters` ran out before the relative-change test passed.
    pub fn warning(&self) -> bool {
        !self.converged
    }

    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace starts with the initial value")
    }
}

/// `||y - H x||^2 / (2 sigma2) + theta g(x)`.
pub fn map_objective(y: &ImageGrid, x: &ImageGrid, op: &BlurOperator, params: &HyperParams, prior: &PriorSpec) -> Result<f64> {
    Ok(op.fidelity(y, x, params.sigma2)? + params.theta * prior.potential_value(x))
}

fn check_inputs(y: &ImageGrid, model: &BlurModel, params: &HyperParams) -> Result<()> {
    if model.image_dims() != y.dims() {
        return Err(Error::DimensionMismatch {
            expected: model.image_dims(),
            found: y.dims(),
        });
    }
    if !(params.sigma2 > 0.0 && params.sigma2.is_finite()) {
        return Err(Error::invalid(format!("sigma2 must be positive, got {}", params.sigma2)));
    }
    if !(params.theta >= 0.0 && params.theta.is_finite()) {
        return Err(Error::invalid(format!("theta must be nonnegative, got {}", params.theta)));
    }
    if !y.is_finite() {
        return Err(Error::invalid("observation contains non-finite pixels"));
    }
    Ok(())
}

/// Minimum-norm least squares `H^+ y`; frequencies where `|h|^2` is below
/// `1e-12 max |h|^2` are zeroed.
fn least_squares(y: &ImageGrid, op: &BlurOperator) -> Result<ImageGrid> {
    let h = op.transfer();
    let floor = 1e-12 * h.max_abs_sq();
    let ys = op.spectrum(y)?;
    let data: Vec<_> = h
        .as_slice()
        .iter()
        .zip(ys.as_slice())
        .map(|(h, y)| {
            let p = h.norm_sqr();
            if p > floor {
                h.conj() * y / p
            } else {
                Default::default()
            }
        })
        .collect();
    let (rows, cols) = y.dims();
    ImageGrid::new(rows, cols, op.fft().inverse(&Spectrum::from_half(rows, cols, data)))
}

const BALANCE: f64 = 10.0;

/// Non-blind MAP estimate under `params` (the model's alpha is replaced by
/// `params.alpha`). Initialized at `y`.
pub fn map_estimate(y: &ImageGrid, params: &HyperParams, model: &BlurModel, prior: &PriorSpec, cfg: &MapConfig) -> Result<MapResult> {
    cfg.validate()?;
    check_inputs(y, model, params)?;
    let op = model.with_alpha(params.alpha.clone())?.operator();
    let mut prior = prior.clone();
    prior.tv_solver = cfg.prox;

    let objective = |x: &ImageGrid| map_objective(y, x, &op, params, &prior);
    let mut best = y.clone();
    let mut trace = vec![objective(&best)?];

    if params.theta == 0.0 {
        let x = least_squares(y, &op)?;
        let value = objective(&x)?;
        if value <= trace[0] {
            best = x;
            trace.push(value);
        }
        return Ok(MapResult {
            image: best,
            iterations: 1,
            converged: true,
            objective_trace: trace,
        });
    }

    let h = op.transfer();
    let hty = h.conj_mul(&op.spectrum(y)?);
    let h2: Vec<f64> = h.as_slice().iter().map(|c| c.norm_sqr()).collect();
    let fft = op.fft();
    let (rows, cols) = y.dims();

    // Scaled-form ADMM with residual balancing; `cfg.admm_penalty` is the
    // starting penalty.
    let mut rho = cfg.admm_penalty;
    let mut x = y.clone();
    let mut z = y.clone();
    let mut u = ImageGrid::zeros(rows, cols);
    let mut ws = ProxWorkspace::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.max_iters {
        iterations = it;
        let target = z.zip_map(&u, |a, b| a - b);
        let ts = fft.forward(target.as_slice());
        let xs: Vec<_> = hty
            .as_slice()
            .iter()
            .zip(ts.as_slice())
            .zip(&h2)
            .map(|((a, t), p)| (a + rho * t) / (p + rho))
            .collect();
        let x_next = ImageGrid::new(rows, cols, fft.inverse(&Spectrum::from_half(rows, cols, xs)))?;
        let v = x_next.zip_map(&u, |a, b| a + b);
        let z_next = prior.prox_weighted(&v, params.sigma2 * params.theta / rho, &mut ws)?;
        u.axpy(1.0, &x_next);
        u.axpy(-1.0, &z_next);
        if !(x_next.is_finite() && z_next.is_finite() && u.is_finite()) {
            return Err(Error::NonFinite {
                iteration: it,
                what: "admm iterate",
            });
        }

        let scale = x_next.norm_sq().sqrt().max(f64::MIN_POSITIVE);
        let primal = x_next.dist_sq(&z_next).sqrt();
        let dual = rho * z_next.dist_sq(&z).sqrt();
        let change = x_next.dist_sq(&x).sqrt().max(primal) / scale;
        x = x_next;
        z = z_next;

        let current = *trace.last().expect("nonempty");
        let value = objective(&z)?;
        if value < current {
            best = z.clone();
            trace.push(value);
        } else {
            trace.push(current);
        }
        if change < cfg.rel_change_tol {
            converged = true;
            break;
        }
        if primal > BALANCE * dual {
            rho *= 2.0;
            u = u.scaled(0.5);
        } else if dual > BALANCE * primal {
            rho *= 0.5;
            u = u.scaled(2.0);
        }
    }
    Ok(MapResult {
        image: best,
        iterations,
        converged,
        objective_trace: trace,
    })
}

/// Forward-backward optimality residual
/// `||x - prox_{tau theta g}(x - tau grad f(x))|| / tau` with `tau = sigma2 / ||H||^2`.
/// Zero exactly at minimizers.
pub fn fixed_point_residual(y: &ImageGrid, x: &ImageGrid, params: &HyperParams, model: &BlurModel, prior: &PriorSpec) -> Result<f64> {
    check_inputs(y, model, params)?;
    let op = model.with_alpha(params.alpha.clone())?.operator();
    let tau = params.sigma2 / op.spectral_norm_sq();
    let grad = op.fidelity_gradients(y, x, params.sigma2)?.grad_x;
    let mut step = x.clone();
    step.axpy(-tau, &grad);
    let mut ws = ProxWorkspace::new();
    let mut prior = prior.clone();
    prior.tv_solver = TvProxConfig::precise();
    let p = prior.prox_weighted(&step, tau * params.theta, &mut ws)?;
    Ok(p.dist_sq(x).sqrt() / tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFamily;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn instance(n: usize, seed: u64) -> (ImageGrid, BlurModel, HyperParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = ImageGrid::from_fn(n, n, |r, c| if (r / 8 + c / 8) % 2 == 0 { 60.0 } else { 180.0 });
        let model = BlurModel::new(KernelFamily::Gaussian, vec![0.4, 0.3], 7, (n, n)).unwrap();
        let mut y = model.apply(&x).unwrap();
        y.axpy(1.0, &ImageGrid::random_normal(n, n, 0.0, 3.0, &mut rng));
        (y, model, HyperParams::new(0.05, vec![0.4, 0.3], 9.0))
    }

    #[test]
    fn delta_kernel_without_regularization_returns_y() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = ImageGrid::random_normal(16, 16, 100.0, 20.0, &mut rng);
        let model = BlurModel::new(KernelFamily::Gaussian, vec![10.0, 10.0], 3, (16, 16)).unwrap();
        let params = HyperParams::new(0.0, vec![10.0, 10.0], 4.0);
        let out = map_estimate(&y, &params, &model, &PriorSpec::tv(1.0, 1.0), &MapConfig::default()).unwrap();
        assert!(out.image.dist_sq(&y).sqrt() < 1e-9 * y.norm_sq().sqrt());
    }

    #[test]
    fn objective_is_monotone_and_below_start() {
        let (y, model, params) = instance(64, 1);
        let out = map_estimate(&y, &params, &model, &PriorSpec::tv(1.0, 1.0), &MapConfig::default()).unwrap();
        assert!(out.objective_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.objective() < out.objective_trace[0]);
        let op = model.operator();
        let direct = map_objective(&y, &out.image, &op, &params, &PriorSpec::tv(1.0, 1.0)).unwrap();
        assert!((direct - out.objective()).abs() <= 1e-9 * direct.abs());
    }

    #[test]
    fn penalty_does_not_change_the_optimum() {
        let (y, model, params) = instance(32, 2);
        let prior = PriorSpec::tv(1.0, 1.0);
        let values: Vec<f64> = [0.1, 1.0, 10.0]
            .iter()
            .map(|&rho| {
                let cfg = MapConfig {
                    admm_penalty: rho,
                    max_iters: 5_000,
                    rel_change_tol: 1e-9,
                    ..MapConfig::default()
                };
                map_estimate(&y, &params, &model, &prior, &cfg).unwrap().objective()
            })
            .collect();
        for v in &values {
            assert!((v - values[1]).abs() <= 1e-5 * values[1], "{values:?}");
        }
    }

    #[test]
    fn minimizer_passes_fixed_point_check() {
        let (y, model, params) = instance(32, 4);
        let prior = PriorSpec::tv(1.0, 1.0);
        let out = map_estimate(&y, &params, &model, &prior, &MapConfig::default()).unwrap();
        let r = fixed_point_residual(&y, &out.image, &params, &model, &prior).unwrap();
        assert!(r < 1e-4 * y.len() as f64, "residual {r}");
        let r_y = fixed_point_residual(&y, &y, &params, &model, &prior).unwrap();
        assert!(r < r_y);
    }

    #[test]
    fn exhausted_budget_sets_warning() {
        let (y, model, params) = instance(32, 5);
        let cfg = MapConfig {
            max_iters: 2,
            ..MapConfig::default()
        };
        let out = map_estimate(&y, &params, &model, &PriorSpec::tv(1.0, 1.0), &cfg).unwrap();
        assert!(out.warning());
        assert_eq!(out.iterations, 2);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (y, model, mut params) = instance(16, 6);
        params.sigma2 = 0.0;
        assert!(map_estimate(&y, &params, &model, &PriorSpec::tv(1.0, 1.0), &MapConfig::default()).is_err());
        let cfg = MapConfig {
            admm_penalty: -1.0,
            ..MapConfig::default()
        };
        params.sigma2 = 1.0;
        assert!(matches!(
            map_estimate(&y, &params, &model, &PriorSpec::tv(1.0, 1.0), &cfg),
            Err(Error::Config(_))
        ));
    }
}
