//! Prior potentials: isotropic total variation with periodic differences,
//! its proximal operator, and a quadratic potential used as a closed-form
//! test target.
//!
//! The TV prox solves `min_u w * TV(u) + ||u - x||^2 / 2` through its dual,
//! `u = x - w D^T p` with `|p_ij| <= 1`, by accelerated projected gradient
//! (step `1/8`, the bound on `||D||^2`) and stops on the duality gap
//! `w * (TV(u) - <Du, p>)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;

/// Calls `f(k, (Dx)_1[k], (Dx)_2[k])` for every pixel `k`, with vertical
/// and horizontal periodic forward differences.
#[inline(always)]
fn for_each_difference(x: &[f64], rows: usize, cols: usize, mut f: impl FnMut(usize, f64, f64)) {
    for i in 0..rows {
        let below = if i + 1 == rows { 0 } else { i + 1 };
        let row = &x[i * cols..(i + 1) * cols];
        let next = &x[below * cols..(below + 1) * cols];
        let base = i * cols;
        for j in 0..cols - 1 {
            f(base + j, next[j] - row[j], row[j + 1] - row[j]);
        }
        let j = cols - 1;
        f(base + j, next[j] - row[j], row[0] - row[j]);
    }
}

/// `u = x - w D^T p`, where `D^T p` is the negative periodic divergence.
fn primal_into(x: &[f64], p1: &[f64], p2: &[f64], w: f64, rows: usize, cols: usize, u: &mut [f64]) {
    for i in 0..rows {
        let above = if i == 0 { rows - 1 } else { i - 1 };
        let r = i * cols..(i + 1) * cols;
        let up = &p1[above * cols..(above + 1) * cols];
        let p1r = &p1[r.clone()];
        let p2r = &p2[r.clone()];
        let xr = &x[r.clone()];
        let ur = &mut u[r];
        ur[0] = xr[0] - w * (up[0] - p1r[0] + p2r[cols - 1] - p2r[0]);
        for j in 1..cols {
            ur[j] = xr[j] - w * (up[j] - p1r[j] + p2r[j - 1] - p2r[j]);
        }
    }
}

/// Vertical and horizontal periodic forward differences of `x`.
fn gradient_into(x: &[f64], rows: usize, cols: usize, d1: &mut [f64], d2: &mut [f64]) {
    for i in 0..rows {
        let below = if i + 1 == rows { 0 } else { i + 1 };
        let r = i * cols..(i + 1) * cols;
        let row = &x[r.clone()];
        let next = &x[below * cols..(below + 1) * cols];
        for ((d, a), b) in d1[r.clone()].iter_mut().zip(row).zip(next) {
            *d = b - a;
        }
        let d2r = &mut d2[r];
        for ((d, a), b) in d2r.iter_mut().zip(row).zip(&row[1..]) {
            *d = b - a;
        }
        d2r[cols - 1] = row[0] - row[cols - 1];
    }
}

fn tv_of(x: &[f64], rows: usize, cols: usize) -> f64 {
    let mut acc = 0.0;
    for_each_difference(x, rows, cols, |_, a, b| acc += (a * a + b * b).sqrt());
    acc
}

/// Isotropic total variation `sum_ij sqrt((Dx)_1^2 + (Dx)_2^2)` with periodic boundary.
pub fn tv_norm(x: &ImageGrid) -> f64 {
    let (rows, cols) = x.dims();
    tv_of(x.as_slice(), rows, cols)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvProxConfig {
    pub max_iters: usize,
    /// Stop once the duality gap is at most `gap_tol_per_pixel * d`.
    pub gap_tol_per_pixel: f64,
    pub check_every: usize,
}

impl TvProxConfig {
    /// Tight settings for one-off solves on small images.
    pub fn precise() -> Self {
        Self {
            max_iters: 200_000,
            gap_tol_per_pixel: 1e-12,
            check_every: 10,
        }
    }
}

/// Budgeted settings for use inside the sampler, where an inexact prox is
/// tolerated.
impl Default for TvProxConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            gap_tol_per_pixel: 1e-7,
            check_every: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProxInfo {
    pub iterations: usize,
    pub gap: f64,
    pub converged: bool,
}

/// Reusable buffers for repeated prox calls on images of one size. The dual
/// variable persists between calls and warm-starts the next solve.
#[derive(Clone, Debug, Default)]
pub struct ProxWorkspace {
    dims: (usize, usize),
    p1: Vec<f64>,
    p2: Vec<f64>,
    q1: Vec<f64>,
    q2: Vec<f64>,
    u: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
    pub last: ProxInfo,
}

impl ProxWorkspace {
    pub fn new() -> Self {
        Self::default()
    }

    fn prepare(&mut self, dims: (usize, usize)) {
        if self.dims != dims || self.p1.is_empty() {
            let n = dims.0 * dims.1;
            self.dims = dims;
            for buf in [
                &mut self.p1,
                &mut self.p2,
                &mut self.q1,
                &mut self.q2,
                &mut self.u,
                &mut self.d1,
                &mut self.d2,
            ] {
                buf.clear();
                buf.resize(n, 0.0);
            }
        }
    }

    /// Forget the warm-start dual.
    pub fn reset(&mut self) {
        self.p1.fill(0.0);
        self.p2.fill(0.0);
    }
}

fn check_weight(weight: f64) -> Result<()> {
    if !(weight >= 0.0 && weight.is_finite()) {
        return Err(Error::invalid(format!("prox weight must be nonnegative, got {weight}")));
    }
    Ok(())
}

/// `argmin_u weight * TV(u) + ||u - x||^2 / 2`, cold-started with
/// [`TvProxConfig::precise`].
pub fn prox_tv(x: &ImageGrid, weight: f64) -> Result<ImageGrid> {
    let mut ws = ProxWorkspace::new();
    prox_tv_with(x, weight, &TvProxConfig::precise(), &mut ws)
}

pub fn prox_tv_with(x: &ImageGrid, weight: f64, cfg: &TvProxConfig, ws: &mut ProxWorkspace) -> Result<ImageGrid> {
    check_weight(weight)?;
    if weight == 0.0 {
        ws.last = ProxInfo {
            iterations: 0,
            gap: 0.0,
            converged: true,
        };
        return Ok(x.clone());
    }
    let (rows, cols) = x.dims();
    ws.prepare((rows, cols));
    let xs = x.as_slice();
    let tol = cfg.gap_tol_per_pixel * x.len() as f64;
    let check_every = cfg.check_every.max(1);
    let step = 1.0 / (8.0 * weight);

    let ProxWorkspace { p1, p2, q1, q2, u, d1, d2, .. } = ws;

    let gap_at = |p1: &[f64], p2: &[f64], u: &mut [f64], d1: &mut [f64], d2: &mut [f64]| {
        primal_into(xs, p1, p2, weight, rows, cols, u);
        gradient_into(u, rows, cols, d1, d2);
        let g: f64 = d1
            .iter()
            .zip(d2.iter())
            .zip(p1.iter().zip(p2.iter()))
            .map(|((a, b), (c, e))| (a * a + b * b).sqrt() - a * c - b * e)
            .sum();
        weight * g
    };

    let mut gap = gap_at(p1, p2, u, d1, d2);
    let mut iterations = 0;
    let mut t = 1.0f64;
    q1.copy_from_slice(p1);
    q2.copy_from_slice(p2);
    while gap > tol && iterations < cfg.max_iters {
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        primal_into(xs, q1, q2, weight, rows, cols, u);
        gradient_into(u, rows, cols, d1, d2);
        // Projected gradient step from the extrapolated point q, then the
        // next extrapolation.
        for ((((q1, q2), p1), p2), (a, b)) in q1
            .iter_mut()
            .zip(q2.iter_mut())
            .zip(p1.iter_mut())
            .zip(p2.iter_mut())
            .zip(d1.iter().zip(d2.iter()))
        {
            let a = *q1 + step * a;
            let b = *q2 + step * b;
            let inv = 1.0 / (a * a + b * b).sqrt().max(1.0);
            let (n1, n2) = (a * inv, b * inv);
            *q1 = n1 + beta * (n1 - *p1);
            *q2 = n2 + beta * (n2 - *p2);
            *p1 = n1;
            *p2 = n2;
        }
        t = t_next;
        iterations += 1;
        // Warm-started solves often finish within a few iterations, so the
        // gap is also checked at powers of two before the regular cadence.
        if iterations % check_every == 0 || iterations.is_power_of_two() || iterations == cfg.max_iters {
            gap = gap_at(p1, p2, u, d1, d2);
        }
    }
    primal_into(xs, p1, p2, weight, rows, cols, u);
    ws.last = ProxInfo {
        iterations,
        gap,
        converged: gap <= tol,
    };
    Ok(ImageGrid::from_parts(rows, cols, ws.u.clone()))
}

/// A prior potential `g` entering the density as `exp(-theta * g(x))`.
pub trait Potential {
    fn value(&self, x: &ImageGrid) -> f64;

    /// `argmin_u weight * g(u) + ||u - x||^2 / 2`.
    fn prox(&self, x: &ImageGrid, weight: f64, ws: &mut ProxWorkspace) -> Result<ImageGrid>;

    /// Degree `q` when `g(c x) = c^q g(x)`, which makes `d log Z / d theta`
    /// available in closed form.
    fn homogeneity(&self) -> Option<f64>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TotalVariation {
    pub solver: TvProxConfig,
}

impl Potential for TotalVariation {
    fn value(&self, x: &ImageGrid) -> f64 {
        tv_norm(x)
    }

    fn prox(&self, x: &ImageGrid, weight: f64, ws: &mut ProxWorkspace) -> Result<ImageGrid> {
        prox_tv_with(x, weight, &self.solver, ws)
    }

    fn homogeneity(&self) -> Option<f64> {
        Some(1.0)
    }
}

/// `g(x) = ||x||^2 / 2`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Quadratic;

impl Potential for Quadratic {
    fn value(&self, x: &ImageGrid) -> f64 {
        0.5 * x.norm_sq()
    }

    fn prox(&self, x: &ImageGrid, weight: f64, ws: &mut ProxWorkspace) -> Result<ImageGrid> {
        check_weight(weight)?;
        ws.last = ProxInfo {
            iterations: 0,
            gap: 0.0,
            converged: true,
        };
        Ok(x.scaled(1.0 / (1.0 + weight)))
    }

    fn homogeneity(&self) -> Option<f64> {
        Some(2.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PotentialKind {
    #[default]
    Tv,
    Quadratic,
}

/// Prior `exp(-theta * g(x)) / Z(theta)` plus the Moreau-Yosida smoothing
/// parameter `lambda` used by the sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub potential: PotentialKind,
    pub theta: f64,
    pub lambda: f64,
    #[serde(default)]
    pub tv_solver: TvProxConfig,
}

impl PriorSpec {
    pub fn tv(theta: f64, lambda: f64) -> Self {
        Self {
            potential: PotentialKind::Tv,
            theta,
            lambda,
            tv_solver: TvProxConfig::default(),
        }
    }

    pub fn quadratic(theta: f64, lambda: f64) -> Self {
        Self {
            potential: PotentialKind::Quadratic,
            theta,
            lambda,
            tv_solver: TvProxConfig::default(),
        }
    }

    pub fn with_theta(&self, theta: f64) -> Self {
        Self { theta, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return Err(Error::invalid(format!("theta must be nonnegative, got {}", self.theta)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }

    /// `prox_{theta lambda g}(x)`.
    pub fn prox(&self, x: &ImageGrid, ws: &mut ProxWorkspace) -> Result<ImageGrid> {
        self.prox_weighted(x, self.theta * self.lambda, ws)
    }

    pub fn prox_weighted(&self, x: &ImageGrid, weight: f64, ws: &mut ProxWorkspace) -> Result<ImageGrid> {
        match self.potential {
            PotentialKind::Tv => TotalVariation { solver: self.tv_solver }.prox(x, weight, ws),
            PotentialKind::Quadratic => Quadratic.prox(x, weight, ws),
        }
    }

    pub fn potential_value(&self, x: &ImageGrid) -> f64 {
        match self.potential {
            PotentialKind::Tv => tv_norm(x),
            PotentialKind::Quadratic => Quadratic.value(x),
        }
    }

    pub fn homogeneity(&self) -> Option<f64> {
        match self.potential {
            PotentialKind::Tv => TotalVariation::default().homogeneity(),
            PotentialKind::Quadratic => Quadratic.homogeneity(),
        }
    }
}

/// `d/dtheta log Z(theta) = -d / (q theta)` for a `q`-homogeneous potential.
pub fn grad_log_z(theta: f64, d: usize, q: f64) -> Result<f64> {
    if !(theta > 0.0) {
        return Err(Error::invalid(format!("theta must be positive, got {theta}")));
    }
    if !(q > 0.0) {
        return Err(Error::invalid(format!("homogeneity degree must be positive, got {q}")));
    }
    Ok(-(d as f64) / (q * theta))
}

/// Moreau-Yosida envelope of `theta * g` at `x`:
/// `theta g(u) + ||x - u||^2 / (2 lambda)` with `u = prox_{theta lambda g}(x)`.
pub fn moreau_envelope(x: &ImageGrid, prior: &PriorSpec) -> Result<f64> {
    prior.validate()?;
    let u = prior.prox(x, &mut ProxWorkspace::new())?;
    Ok(prior.theta * prior.potential_value(&u) + x.dist_sq(&u) / (2.0 * prior.lambda))
}

/// TV envelope with an explicit `theta` and `lambda`.
pub fn moreau_envelope_tv(x: &ImageGrid, theta: f64, lambda: f64) -> Result<f64> {
    moreau_envelope(x, &PriorSpec::tv(theta, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> ImageGrid {
        ImageGrid::random_normal(rows, cols, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn prox_objective(u: &ImageGrid, x: &ImageGrid, w: f64) -> f64 {
        w * tv_norm(u) + 0.5 * u.dist_sq(x)
    }

    #[test]
    fn tv_of_constant_is_zero() {
        assert_eq!(tv_norm(&ImageGrid::filled(5, 7, 3.0)), 0.0);
    }

    #[test]
    fn tv_of_vertical_step_counts_both_periodic_edges() {
        let (r, c) = (6, 8);
        let x = ImageGrid::from_fn(r, c, |_, j| if j < 4 { 0.0 } else { 1.0 });
        // direct summation
        let mut want = 0.0;
        for i in 0..r {
            for j in 0..c {
                let dv = x[((i + 1) % r, j)] - x[(i, j)];
                let dh = x[(i, (j + 1) % c)] - x[(i, j)];
                want += (dv * dv + dh * dh).sqrt();
            }
        }
        assert_eq!(want, 2.0 * r as f64);
        assert!((tv_norm(&x) - want).abs() < 1e-12);
    }

    #[test]
    fn adjoint_of_gradient() {
        let (rows, cols) = (5, 7);
        let x = random(rows, cols, 1);
        let p1 = random(rows, cols, 2);
        let p2 = random(rows, cols, 3);
        let mut lhs = 0.0;
        for_each_difference(x.as_slice(), rows, cols, |k, a, b| {
            lhs += a * p1.as_slice()[k] + b * p2.as_slice()[k];
        });
        // u = 0 - (-1) D^T p
        let mut dt = vec![0.0; 35];
        primal_into(&[0.0; 35], p1.as_slice(), p2.as_slice(), -1.0, rows, cols, &mut dt);
        let rhs: f64 = dt.iter().zip(x.as_slice()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_is_identity() {
        let x = random(6, 6, 4);
        assert_eq!(prox_tv(&x, 0.0).unwrap(), x);
        assert!(prox_tv(&x, -1.0).is_err());
    }

    #[test]
    fn constant_image_is_fixed() {
        let x = ImageGrid::filled(8, 8, 17.0);
        let u = prox_tv(&x, 3.0).unwrap();
        assert!(u.dist_sq(&x) < 1e-20);
    }

    #[test]
    fn prox_reaches_small_gap_and_local_optimality() {
        let x = random(8, 8, 5);
        let w = 0.5;
        let mut ws = ProxWorkspace::new();
        let u = prox_tv_with(&x, w, &TvProxConfig::precise(), &mut ws).unwrap();
        assert!(ws.last.converged, "{:?}", ws.last);
        let base = prox_objective(&u, &x, w);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let dir = ImageGrid::random_normal(8, 8, 0.0, 1.0, &mut rng);
            let dir = dir.scaled(1e-3 / dir.norm_sq().sqrt());
            let mut v = u.clone();
            v.axpy(1.0, &dir);
            assert!(prox_objective(&v, &x, w) >= base - ws.last.gap);
        }
    }

    #[test]
    fn warm_start_needs_fewer_iterations() {
        let x = random(32, 32, 8).scaled(10.0);
        let cfg = TvProxConfig {
            gap_tol_per_pixel: 1e-9,
            max_iters: 5000,
            ..TvProxConfig::default()
        };
        let mut ws = ProxWorkspace::new();
        prox_tv_with(&x, 2.0, &cfg, &mut ws).unwrap();
        let cold = ws.last.iterations;
        let mut x2 = x.clone();
        x2.axpy(0.01, &random(32, 32, 9));
        prox_tv_with(&x2, 2.0, &cfg, &mut ws).unwrap();
        assert!(ws.last.iterations < cold, "{} vs {cold}", ws.last.iterations);
    }

    #[test]
    fn grad_log_z_closed_form() {
        assert_eq!(grad_log_z(1.0, 4, 1.0).unwrap(), -4.0);
        assert_eq!(grad_log_z(2.0, 4, 1.0).unwrap(), -2.0);
        assert!(grad_log_z(0.0, 4, 1.0).is_err());
    }

    #[test]
    fn grad_log_z_matches_quadrature() {
        // d = 2, g = |x|^2 / 2: integrate exp(-theta g) on a fine grid.
        let log_z = |theta: f64| {
            let (half, n) = (12.0, 1200);
            let h = 2.0 * half / n as f64;
            let mut acc = 0.0;
            for i in 0..=n {
                for j in 0..=n {
                    let (a, b) = (-half + i as f64 * h, -half + j as f64 * h);
                    let wi = if i == 0 || i == n { 0.5 } else { 1.0 };
                    let wj = if j == 0 || j == n { 0.5 } else { 1.0 };
                    acc += wi * wj * (-theta * 0.5 * (a * a + b * b)).exp();
                }
            }
            (acc * h * h).ln()
        };
        let theta = 0.7;
        let eps = 1e-4;
        let fd = (log_z(theta + eps) - log_z(theta - eps)) / (2.0 * eps);
        let analytic = grad_log_z(theta, 2, Quadratic.homogeneity().unwrap()).unwrap();
        assert!(((fd - analytic) / analytic).abs() < 1e-4, "{fd} vs {analytic}");
    }

    #[test]
    fn envelope_bounds() {
        assert_eq!(moreau_envelope_tv(&ImageGrid::filled(6, 6, 2.0), 0.3, 1.0).unwrap(), 0.0);
        for seed in 0..50 {
            let x = random(8, 8, 100 + seed).scaled(5.0);
            let env = moreau_envelope_tv(&x, 0.3, 1.0).unwrap();
            assert!(env <= 0.3 * tv_norm(&x) + 1e-9);
        }
    }

    #[test]
    fn envelope_small_lambda_limit() {
        let x = random(8, 8, 77);
        let env = moreau_envelope_tv(&x, 0.4, 1e-6).unwrap();
        assert!((env - 0.4 * tv_norm(&x)).abs() < 1e-3);
    }

    #[test]
    fn quadratic_prox_closed_form() {
        let x = random(4, 4, 3);
        let u = Quadratic.prox(&x, 0.5, &mut ProxWorkspace::new()).unwrap();
        assert!(u.dist_sq(&x.scaled(1.0 / 1.5)) < 1e-24);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn tv_is_one_homogeneous(seed in any::<u64>(), c in 0.0f64..50.0) {
            let x = random(6, 9, seed);
            let lhs = tv_norm(&x.scaled(c));
            prop_assert!((lhs - c * tv_norm(&x)).abs() <= 1e-10 * (1.0 + lhs));
        }

        #[test]
        fn prox_is_nonexpansive(seed in any::<u64>(), w in 0.01f64..3.0) {
            let a = random(8, 8, seed);
            let b = random(8, 8, seed.wrapping_add(1));
            let pa = prox_tv(&a, w).unwrap();
            let pb = prox_tv(&b, w).unwrap();
            prop_assert!(pa.dist_sq(&pb).sqrt() <= a.dist_sq(&b).sqrt() + 1e-6);
        }
    }
}
