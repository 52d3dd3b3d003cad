//! Parametric blur families, their circulant operators and the quadratic
//! data-fidelity term with its gradients in `x`, `alpha` and `sigma2`.
//!
//! Kernels are sampled from the closed-form densities at integer offsets on an
//! `s x s` support centred at zero and renormalized to unit sum, so every
//! operator has DC gain 1. Parameter gradients are taken of the normalized
//! discrete kernel (quotient rule over the density gradients).

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{Fft2, Spectrum};
use crate::image::ImageGrid;
use crate::params::Interval;

pub const DEFAULT_SUPPORT: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    /// `a_h a_v / 2pi * exp(-(a_h^2 v^2 + a_v^2 t^2) / 2)`
    Gaussian,
    /// `a^2 / 4 * exp(-a (|v| + |t|))`
    Laplace,
    /// `a1^2 / 2pi * (1 + a1^2 (v^2 + t^2) / a2)^(-(a2 + 2) / 2)`
    Moffat,
}

impl KernelFamily {
    /// Declaration order; also the tie-break order for model selection.
    pub const ALL: [KernelFamily; 3] = [KernelFamily::Gaussian, KernelFamily::Laplace, KernelFamily::Moffat];

    pub fn param_dim(self) -> usize {
        self.param_names().len()
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            KernelFamily::Gaussian => &["alpha_h", "alpha_v"],
            KernelFamily::Laplace => &["alpha"],
            KernelFamily::Moffat => &["alpha_1", "alpha_2"],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Laplace => "laplace",
            KernelFamily::Moffat => "moffat",
        }
    }

    /// Admissible box for `alpha` used by the calibration presets.
    pub fn admissible_box(self) -> Vec<Interval> {
        let bw = Interval { lo: 0.01, hi: 1.0 };
        match self {
            KernelFamily::Gaussian => vec![bw, bw],
            KernelFamily::Laplace => vec![bw],
            KernelFamily::Moffat => vec![bw, Interval { lo: 1.0, hi: 5.0 }],
        }
    }

    fn check_alpha(self, alpha: &[f64]) -> Result<()> {
        if alpha.len() != self.param_dim() {
            return Err(Error::invalid(format!(
                "{} kernel takes {} parameters, got {}",
                self,
                self.param_dim(),
                alpha.len()
            )));
        }
        if let Some(a) = alpha.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::invalid(format!("{self} kernel parameters must be positive and finite, got {a}")));
        }
        Ok(())
    }

    /// Continuous density at horizontal offset `v` and vertical offset `t`.
    pub fn density(self, alpha: &[f64], v: f64, t: f64) -> f64 {
        use std::f64::consts::PI;
        match self {
            KernelFamily::Gaussian => {
                let (ah, av) = (alpha[0], alpha[1]);
                ah * av / (2.0 * PI) * (-0.5 * (ah * ah * v * v + av * av * t * t)).exp()
            }
            KernelFamily::Laplace => {
                let a = alpha[0];
                a * a / 4.0 * (-a * (v.abs() + t.abs())).exp()
            }
            KernelFamily::Moffat => {
                let (a1, a2) = (alpha[0], alpha[1]);
                let r2 = v * v + t * t;
                a1 * a1 / (2.0 * PI) * (1.0 + a1 * a1 * r2 / a2).powf(-(a2 + 2.0) / 2.0)
            }
        }
    }

    /// Logarithmic derivatives `d log(density) / d alpha_j` at `(v, t)`.
    fn log_density_grad(self, alpha: &[f64], v: f64, t: f64, out: &mut [f64]) {
        match self {
            KernelFamily::Gaussian => {
                let (ah, av) = (alpha[0], alpha[1]);
                out[0] = 1.0 / ah - ah * v * v;
                out[1] = 1.0 / av - av * t * t;
            }
            KernelFamily::Laplace => {
                out[0] = 2.0 / alpha[0] - (v.abs() + t.abs());
            }
            KernelFamily::Moffat => {
                let (a1, a2) = (alpha[0], alpha[1]);
                let r2 = v * v + t * t;
                let denom = a2 + a1 * a1 * r2;
                out[0] = 2.0 / a1 - (a2 + 2.0) * a1 * r2 / denom;
                out[1] = -0.5 * (a1 * a1 * r2 / a2).ln_1p() + (a2 + 2.0) * a1 * a1 * r2 / (2.0 * a2 * denom);
            }
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "gauss" => Ok(KernelFamily::Gaussian),
            "laplace" => Ok(KernelFamily::Laplace),
            "moffat" => Ok(KernelFamily::Moffat),
            other => Err(Error::Config(format!("unknown kernel family {other:?}"))),
        }
    }
}

/// A blur family with concrete parameters, realized on a fixed image size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurModel {
    family: KernelFamily,
    alpha: Vec<f64>,
    support: usize,
    dims: (usize, usize),
}

impl BlurModel {
    pub fn new(family: KernelFamily, alpha: Vec<f64>, support: usize, dims: (usize, usize)) -> Result<Self> {
        family.check_alpha(&alpha)?;
        if support == 0 || support % 2 == 0 {
            return Err(Error::invalid(format!("kernel support must be odd and positive, got {support}")));
        }
        if support > dims.0 || support > dims.1 {
            return Err(Error::invalid(format!(
                "kernel support {support} exceeds image size {}x{}",
                dims.0, dims.1
            )));
        }
        Ok(Self { family, alpha, support, dims })
    }

    /// Same model with different parameters.
    pub fn with_alpha(&self, alpha: Vec<f64>) -> Result<Self> {
        Self::new(self.family, alpha, self.support, self.dims)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn support(&self) -> usize {
        self.support
    }

    pub fn image_dims(&self) -> (usize, usize) {
        self.dims
    }

    fn offsets(&self) -> impl Iterator<Item = (usize, usize, f64, f64)> + '_ {
        let s = self.support;
        let half = (s / 2) as f64;
        (0..s).flat_map(move |r| (0..s).map(move |c| (r, c, c as f64 - half, r as f64 - half)))
    }

    /// The `s x s` kernel, centred, unit sum.
    pub fn kernel(&self) -> ImageGrid {
        let s = self.support;
        let mut k = ImageGrid::zeros(s, s);
        for (r, c, v, t) in self.offsets() {
            k[(r, c)] = self.family.density(&self.alpha, v, t);
        }
        let total = k.sum();
        k.map(|x| x / total)
    }

    /// Gradients of [`kernel`](Self::kernel) with respect to each component of `alpha`.
    pub fn kernel_grads(&self) -> Vec<ImageGrid> {
        let s = self.support;
        let p = self.family.param_dim();
        let mut dens = ImageGrid::zeros(s, s);
        let mut dgrad = vec![ImageGrid::zeros(s, s); p];
        let mut buf = vec![0.0; p];
        for (r, c, v, t) in self.offsets() {
            let rho = self.family.density(&self.alpha, v, t);
            self.family.log_density_grad(&self.alpha, v, t, &mut buf);
            dens[(r, c)] = rho;
            for j in 0..p {
                dgrad[j][(r, c)] = rho * buf[j];
            }
        }
        let total = dens.sum();
        dgrad
            .into_iter()
            .map(|g| {
                let gsum = g.sum();
                g.zip_map(&dens, |dg, rho| dg / total - rho * gsum / (total * total))
            })
            .collect()
    }

    /// Places an `s x s` centred kernel into an image-sized grid with its
    /// centre at pixel `(0, 0)` (circular shift).
    pub fn embed(&self, k: &ImageGrid) -> ImageGrid {
        let (rows, cols) = self.dims;
        let s = k.rows();
        let half = (s / 2) as isize;
        let mut out = ImageGrid::zeros(rows, cols);
        for r in 0..s {
            for c in 0..s {
                let rr = (r as isize - half).rem_euclid(rows as isize) as usize;
                let cc = (c as isize - half).rem_euclid(cols as isize) as usize;
                out[(rr, cc)] += k[(r, c)];
            }
        }
        out
    }

    pub fn embedded_kernel(&self) -> ImageGrid {
        self.embed(&self.kernel())
    }

    /// Precomputes the transfer functions for repeated application.
    pub fn operator(&self) -> BlurOperator {
        BlurOperator::new(self.clone())
    }

    pub fn apply(&self, x: &ImageGrid) -> Result<ImageGrid> {
        self.operator().apply(x)
    }

    pub fn apply_adjoint(&self, x: &ImageGrid) -> Result<ImageGrid> {
        self.operator().apply_adjoint(x)
    }
}

/// Circulant operator `H(alpha)` with cached spectra of the kernel and of
/// its parameter gradients.
#[derive(Clone)]
pub struct BlurOperator {
    model: BlurModel,
    fft: Arc<Fft2>,
    transfer: Spectrum,
    grad_transfer: Vec<Spectrum>,
}

impl fmt::Debug for BlurOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BlurOperator").field("model", &self.model).finish()
    }
}

impl BlurOperator {
    pub fn new(model: BlurModel) -> Self {
        let fft = Fft2::for_dims(model.dims.0, model.dims.1);
        let transfer = fft.forward(model.embedded_kernel().as_slice());
        let grad_transfer = model
            .kernel_grads()
            .iter()
            .map(|g| fft.forward(model.embed(g).as_slice()))
            .collect();
        Self { model, fft, transfer, grad_transfer }
    }

    pub fn model(&self) -> &BlurModel {
        &self.model
    }

    pub fn fft(&self) -> &Fft2 {
        &self.fft
    }

    pub fn transfer(&self) -> &Spectrum {
        &self.transfer
    }

    pub fn grad_transfer(&self) -> &[Spectrum] {
        &self.grad_transfer
    }

    fn check_dims(&self, x: &ImageGrid) -> Result<()> {
        if x.dims() != self.model.dims {
            return Err(Error::DimensionMismatch {
                expected: self.model.dims,
                found: x.dims(),
            });
        }
        Ok(())
    }

    pub fn spectrum(&self, x: &ImageGrid) -> Result<Spectrum> {
        self.check_dims(x)?;
        Ok(self.fft.forward(x.as_slice()))
    }

    pub(crate) fn to_image(&self, spec: &Spectrum) -> ImageGrid {
        let (rows, cols) = self.model.dims;
        ImageGrid::from_parts(rows, cols, self.fft.inverse(spec))
    }

    pub fn apply(&self, x: &ImageGrid) -> Result<ImageGrid> {
        let xs = self.spectrum(x)?;
        Ok(self.to_image(&self.transfer.mul(&xs)))
    }

    pub fn apply_adjoint(&self, x: &ImageGrid) -> Result<ImageGrid> {
        let xs = self.spectrum(x)?;
        Ok(self.to_image(&self.transfer.conj_mul(&xs)))
    }

    /// Largest eigenvalue of `H^T H`, i.e. `max |h_hat|^2`.
    pub fn spectral_norm_sq(&self) -> f64 {
        self.transfer.max_abs_sq()
    }

    pub fn fidelity(&self, y: &ImageGrid, x: &ImageGrid, sigma2: f64) -> Result<f64> {
        check_sigma2(sigma2)?;
        self.check_dims(y)?;
        let hx = self.apply(x)?;
        Ok(y.dist_sq(&hx) / (2.0 * sigma2))
    }

    pub fn fidelity_gradients(&self, y: &ImageGrid, x: &ImageGrid, sigma2: f64) -> Result<FidelityGradients> {
        check_sigma2(sigma2)?;
        self.check_dims(y)?;
        let xs = self.spectrum(x)?;
        let ys = self.fft.forward(y.as_slice());
        let resid = self.transfer.mul_sub(&xs, &ys);
        let grad_x = self.to_image(&self.transfer.conj_mul(&resid)).scaled(1.0 / sigma2);
        let grad_alpha = self.grad_alpha_from_spectra(&xs, &resid, sigma2);
        let grad_sigma2 = -resid.norm_sq() / (2.0 * sigma2 * sigma2);
        Ok(FidelityGradients {
            grad_x,
            grad_alpha,
            grad_sigma2,
        })
    }

    /// `(1/sigma2) * <dH/dalpha_j x, Hx - y>` from the spectra of `x` and of
    /// the residual `Hx - y`.
    pub(crate) fn grad_alpha_from_spectra(&self, xs: &Spectrum, resid: &Spectrum, sigma2: f64) -> Vec<f64> {
        self.grad_transfer
            .iter()
            .map(|g| g.product_inner(xs, resid) / sigma2)
            .collect()
    }
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::invalid(format!("sigma2 must be positive, got {sigma2}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FidelityGradients {
    pub grad_x: ImageGrid,
    pub grad_alpha: Vec<f64>,
    pub grad_sigma2: f64,
}

/// `||y - H(alpha) x||^2 / (2 sigma2)`.
pub fn fidelity(y: &ImageGrid, x: &ImageGrid, model: &BlurModel, sigma2: f64) -> Result<f64> {
    model.operator().fidelity(y, x, sigma2)
}

pub fn fidelity_gradients(y: &ImageGrid, x: &ImageGrid, model: &BlurModel, sigma2: f64) -> Result<FidelityGradients> {
    model.operator().fidelity_gradients(y, x, sigma2)
}

/// Grid resolution per parameter for [`lipschitz_bound`].
pub const LIPSCHITZ_GRID: usize = 16;

/// Lipschitz constant of `grad_x f` over the parameter box:
/// `max_alpha ||H(alpha)||^2 / sigma2_min`.
///
/// Unit-sum nonnegative kernels peak at DC with gain 1, so the result equals
/// `1 / sigma2_min`; the grid sweep confirms it.
pub fn lipschitz_bound(
    family: KernelFamily,
    alpha_box: &[Interval],
    support: usize,
    dims: (usize, usize),
    sigma2_min: f64,
) -> Result<f64> {
    check_sigma2(sigma2_min)?;
    if alpha_box.len() != family.param_dim() {
        return Err(Error::invalid(format!(
            "{family} needs {} parameter intervals, got {}",
            family.param_dim(),
            alpha_box.len()
        )));
    }
    for iv in alpha_box {
        iv.validate()?;
    }
    let axes: Vec<Vec<f64>> = alpha_box.iter().map(|iv| iv.grid(LIPSCHITZ_GRID)).collect();
    let mut max_gain: f64 = 0.0;
    let mut idx = vec![0usize; axes.len()];
    loop {
        let alpha: Vec<f64> = idx.iter().zip(&axes).map(|(&i, ax)| ax[i]).collect();
        let model = BlurModel::new(family, alpha, support, dims)?;
        max_gain = max_gain.max(model.operator().spectral_norm_sq());
        // odometer increment
        let mut k = 0;
        loop {
            if k == idx.len() {
                let bound = max_gain / sigma2_min;
                debug_assert!((max_gain - 1.0).abs() < 1e-9, "unit-sum kernel gain {max_gain}");
                return Ok(bound);
            }
            idx[k] += 1;
            if idx[k] < axes[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Sum of absolute differences between two `s x s` kernels.
pub fn kernel_l1_distance(a: &BlurModel, b: &BlurModel) -> Result<f64> {
    if a.support != b.support {
        return Err(Error::invalid("kernels have different supports"));
    }
    Ok(a.kernel().l1_dist(&b.kernel()))
}

/// Plain-text kernel dump: a JSON header line followed by the `s x s` matrix.
pub fn kernel_dump(model: &BlurModel) -> String {
    #[derive(Serialize)]
    struct Header<'a> {
        family: KernelFamily,
        alpha: &'a [f64],
        support: usize,
    }
    let header = serde_json::to_string(&Header {
        family: model.family,
        alpha: &model.alpha,
        support: model.support,
    })
    .expect("header serializes");
    let k = model.kernel();
    let mut out = header;
    out.push('\n');
    for r in 0..k.rows() {
        let row: Vec<String> = (0..k.cols()).map(|c| format!("{:.12e}", k[(r, c)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(family: KernelFamily, alpha: &[f64], dims: (usize, usize)) -> BlurModel {
        BlurModel::new(family, alpha.to_vec(), DEFAULT_SUPPORT, dims).unwrap()
    }

    #[test]
    fn narrow_gaussian_is_a_delta() {
        let k = model(KernelFamily::Gaussian, &[10.0, 10.0], (16, 16)).kernel();
        assert!(k[(3, 3)] > 0.999);
    }

    #[test]
    fn isotropic_gaussian_has_rotation_symmetry() {
        let k = model(KernelFamily::Gaussian, &[0.35, 0.35], (16, 16)).kernel();
        for r in 0..7 {
            for c in 0..7 {
                assert!((k[(r, c)] - k[(c, 6 - r)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gaussian_matches_direct_formula() {
        let (ah, av) = (0.4, 0.3);
        let k = model(KernelFamily::Gaussian, &[ah, av], (16, 16)).kernel();
        let mut raw = [[0.0; 7]; 7];
        let mut total = 0.0;
        for (r, row) in raw.iter_mut().enumerate() {
            for (c, e) in row.iter_mut().enumerate() {
                let v = c as f64 - 3.0;
                let t = r as f64 - 3.0;
                *e = ah * av / (2.0 * std::f64::consts::PI) * (-0.5 * (ah * ah * v * v + av * av * t * t)).exp();
                total += *e;
            }
        }
        for r in 0..7 {
            for c in 0..7 {
                assert!((k[(r, c)] - raw[r][c] / total).abs() < 1e-15);
            }
        }
        // alpha_h acts horizontally: narrower along columns than rows.
        assert!(k[(3, 0)] < k[(0, 3)]);
    }

    #[test]
    fn kernels_sum_to_one_and_grads_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for family in KernelFamily::ALL {
            for _ in 0..20 {
                let alpha: Vec<f64> = family.admissible_box().iter().map(|iv| rng.gen_range(iv.lo..=iv.hi)).collect();
                let m = model(family, &alpha, (9, 9));
                assert!((m.kernel().sum() - 1.0).abs() < 1e-12);
                assert!(m.kernel().as_slice().iter().all(|&v| v >= 0.0));
                for g in m.kernel_grads() {
                    assert!(g.sum().abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn laplace_gradient_matches_central_differences() {
        let m = model(KernelFamily::Laplace, &[0.3], (9, 9));
        let g = &m.kernel_grads()[0];
        let h = 1e-6;
        let kp = m.with_alpha(vec![0.3 + h]).unwrap().kernel();
        let km = m.with_alpha(vec![0.3 - h]).unwrap().kernel();
        let fd = kp.zip_map(&km, |a, b| (a - b) / (2.0 * h));
        let rel = g.dist_sq(&fd).sqrt() / fd.norm_sq().sqrt();
        assert!(rel < 1e-5, "relative error {rel}");
    }

    #[test]
    fn moffat_shape_parameter_is_weakly_identifiable() {
        for a2 in [3.0, 3.25, 3.5, 3.75, 4.0] {
            let g = model(KernelFamily::Moffat, &[0.4, a2], (9, 9)).kernel_grads();
            let n1 = g[0].norm_sq().sqrt();
            let n2 = g[1].norm_sq().sqrt();
            assert!(n2 < 0.1 * n1, "alpha2={a2}: |d/da2|={n2}, |d/da1|={n1}");
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(BlurModel::new(KernelFamily::Moffat, vec![0.4, 0.0], 7, (8, 8)).is_err());
        assert!(BlurModel::new(KernelFamily::Gaussian, vec![0.4], 7, (8, 8)).is_err());
        assert!(BlurModel::new(KernelFamily::Laplace, vec![-0.1], 7, (8, 8)).is_err());
        assert!(BlurModel::new(KernelFamily::Laplace, vec![0.1], 6, (8, 8)).is_err());
        assert!(BlurModel::new(KernelFamily::Laplace, vec![0.1], 9, (8, 8)).is_err());
    }

    #[test]
    fn delta_kernel_apply_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = ImageGrid::random_normal(12, 10, 100.0, 30.0, &mut rng);
        let m = model(KernelFamily::Gaussian, &[10.0, 10.0], (12, 10));
        let hx = m.apply(&x).unwrap();
        let rel = hx.dist_sq(&x).sqrt() / x.norm_sq().sqrt();
        assert!(rel < 1e-6, "{rel}");
    }

    #[test]
    fn constant_image_is_preserved() {
        for family in KernelFamily::ALL {
            let alpha: Vec<f64> = family.admissible_box().iter().map(Interval::midpoint).collect();
            let m = model(family, &alpha, (8, 11));
            let hx = m.apply(&ImageGrid::filled(8, 11, 42.0)).unwrap();
            assert!(hx.as_slice().iter().all(|v| (v - 42.0).abs() < 1e-10));
        }
    }

    #[test]
    fn apply_is_circular_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = ImageGrid::random_normal(9, 8, 0.0, 1.0, &mut rng);
        let m = model(KernelFamily::Laplace, &[0.5], (9, 8));
        let k = m.kernel();
        let hx = m.apply(&x).unwrap();
        for r in 0..9isize {
            for c in 0..8isize {
                let mut acc = 0.0;
                for kr in 0..7isize {
                    for kc in 0..7isize {
                        let sr = (r - (kr - 3)).rem_euclid(9) as usize;
                        let sc = (c - (kc - 3)).rem_euclid(8) as usize;
                        acc += k[(kr as usize, kc as usize)] * x[(sr, sc)];
                    }
                }
                assert!((acc - hx[(r as usize, c as usize)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for family in KernelFamily::ALL {
            for _ in 0..100 {
                let alpha: Vec<f64> = family.admissible_box().iter().map(|iv| rng.gen_range(iv.lo..=iv.hi)).collect();
                let m = model(family, &alpha, (10, 13));
                let op = m.operator();
                let x = ImageGrid::random_normal(10, 13, 0.0, 1.0, &mut rng);
                let z = ImageGrid::random_normal(10, 13, 0.0, 1.0, &mut rng);
                let lhs = op.apply(&x).unwrap().dot(&z);
                let rhs = x.dot(&op.apply_adjoint(&z).unwrap());
                assert!((lhs - rhs).abs() <= 1e-8 * (1.0 + lhs.abs()), "{family}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn fidelity_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = ImageGrid::random_normal(8, 8, 50.0, 10.0, &mut rng);
        let m = model(KernelFamily::Gaussian, &[0.4, 0.3], (8, 8));
        let y = m.apply(&x).unwrap();
        assert!(fidelity(&y, &x, &m, 2.0).unwrap().abs() < 1e-20);
        let y2 = ImageGrid::random_normal(8, 8, 50.0, 10.0, &mut rng);
        let f1 = fidelity(&y2, &x, &m, 1.0).unwrap();
        let f2 = fidelity(&y2, &x, &m, 2.0).unwrap();
        assert!((f1 - 2.0 * f2).abs() < 1e-9 * f1);
        // direct summation oracle
        let hx = m.apply(&x).unwrap();
        let mut acc = 0.0;
        for i in 0..64 {
            let e = y2.as_slice()[i] - hx.as_slice()[i];
            acc += e * e;
        }
        assert!((f1 - acc / 2.0).abs() < 1e-9 * f1);
        assert!(fidelity(&y2, &x, &m, 0.0).is_err());
        assert!(fidelity_gradients(&y2, &x, &m, -1.0).is_err());
    }

    #[test]
    fn zero_residual_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = ImageGrid::random_normal(8, 8, 50.0, 10.0, &mut rng);
        let m = model(KernelFamily::Moffat, &[0.3, 3.5], (8, 8));
        let y = m.apply(&x).unwrap();
        let g = fidelity_gradients(&y, &x, &m, 3.0).unwrap();
        assert!(g.grad_x.norm_sq().sqrt() < 1e-10);
        assert!(g.grad_alpha.iter().all(|v| v.abs() < 1e-10));
        assert!(g.grad_sigma2.abs() < 1e-20);
    }

    #[test]
    fn lipschitz_is_inverse_min_variance() {
        for family in KernelFamily::ALL {
            let l = lipschitz_bound(family, &family.admissible_box(), 7, (16, 16), 0.25).unwrap();
            assert!((l - 4.0).abs() < 1e-12 * 4.0, "{family}: {l}");
            let l2 = lipschitz_bound(family, &family.admissible_box(), 7, (16, 16), 0.125).unwrap();
            assert!((l2 - 2.0 * l).abs() < 1e-12 * l2);
        }
        assert!(lipschitz_bound(KernelFamily::Laplace, &[], 7, (16, 16), 1.0).is_err());
        let empty = [Interval { lo: 1.0, hi: 0.5 }];
        assert!(lipschitz_bound(KernelFamily::Laplace, &empty, 7, (16, 16), 1.0).is_err());
    }

    #[test]
    fn dump_has_header_and_matrix() {
        let dump = kernel_dump(&model(KernelFamily::Laplace, &[0.3], (8, 8)));
        let mut lines = dump.lines();
        let header: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
        assert_eq!(header["family"], "laplace");
        assert_eq!(header["support"], 7);
        assert_eq!(lines.count(), 7);
    }
}
