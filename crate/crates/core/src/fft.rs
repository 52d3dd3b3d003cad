//! Real-to-complex 2-D FFT with periodic boundary.
//!
//! Rows are transformed with a real FFT, leaving `cols / 2 + 1` complex bins
//! per row, then each of those columns gets a full complex FFT. The half
//! spectrum is stored column-major (`bin_col * rows + bin_row`) so that the
//! second pass runs over contiguous memory.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::{Fft, FftPlanner};

pub struct Fft2 {
    rows: usize,
    cols: usize,
    half: usize,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

/// Half spectrum of a real `rows x cols` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

type PlanCache = Mutex<HashMap<(usize, usize), Arc<Fft2>>>;

fn plan_cache() -> &'static PlanCache {
    static CACHE: OnceLock<PlanCache> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

impl Fft2 {
    /// Shared plan for the given grid size.
    pub fn for_dims(rows: usize, cols: usize) -> Arc<Fft2> {
        let mut cache = plan_cache().lock().expect("fft plan cache poisoned");
        cache
            .entry((rows, cols))
            .or_insert_with(|| Arc::new(Fft2::new(rows, cols)))
            .clone()
    }

    fn new(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0);
        let mut real = RealFftPlanner::<f64>::new();
        let mut complex = FftPlanner::<f64>::new();
        Self {
            rows,
            cols,
            half: cols / 2 + 1,
            r2c: real.plan_fft_forward(cols),
            c2r: real.plan_fft_inverse(cols),
            col_fwd: complex.plan_fft_forward(rows),
            col_inv: complex.plan_fft_inverse(rows),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn forward(&self, x: &[f64]) -> Spectrum {
        assert_eq!(x.len(), self.rows * self.cols, "fft input size");
        let (rows, cols, half) = (self.rows, self.cols, self.half);
        let mut row_in = vec![0.0; cols];
        let mut row_out = vec![Complex64::default(); half];
        let mut scratch = self.r2c.make_scratch_vec();
        let mut data = vec![Complex64::default(); rows * half];
        for r in 0..rows {
            row_in.copy_from_slice(&x[r * cols..(r + 1) * cols]);
            self.r2c
                .process_with_scratch(&mut row_in, &mut row_out, &mut scratch)
                .expect("real fft sizes");
            for (k, v) in row_out.iter().enumerate() {
                data[k * rows + r] = *v;
            }
        }
        let mut col_scratch = vec![Complex64::default(); self.col_fwd.get_inplace_scratch_len()];
        self.col_fwd.process_with_scratch(&mut data, &mut col_scratch);
        Spectrum { rows, cols, data }
    }

    /// Inverse transform, normalized so that `inverse(forward(x)) == x`.
    pub fn inverse(&self, spec: &Spectrum) -> Vec<f64> {
        assert_eq!((spec.rows, spec.cols), (self.rows, self.cols), "spectrum size");
        let (rows, cols, half) = (self.rows, self.cols, self.half);
        let mut data = spec.data.clone();
        let mut col_scratch = vec![Complex64::default(); self.col_inv.get_inplace_scratch_len()];
        self.col_inv.process_with_scratch(&mut data, &mut col_scratch);
        let scale = 1.0 / (rows * cols) as f64;
        let mut row_in = vec![Complex64::default(); half];
        let mut row_out = vec![0.0; cols];
        let mut scratch = self.c2r.make_scratch_vec();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for (k, v) in row_in.iter_mut().enumerate() {
                *v = data[k * rows + r];
            }
            // Bins that must be real for a real signal; drop round-off.
            row_in[0].im = 0.0;
            if cols % 2 == 0 {
                row_in[half - 1].im = 0.0;
            }
            self.c2r
                .process_with_scratch(&mut row_in, &mut row_out, &mut scratch)
                .expect("inverse real fft sizes");
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(&row_out) {
                *o = v * scale;
            }
        }
        out
    }
}

impl Spectrum {
    /// Wraps half-spectrum bins laid out as produced by [`Fft2::forward`].
    pub fn from_half(rows: usize, cols: usize, data: Vec<Complex64>) -> Spectrum {
        assert_eq!(data.len(), rows * (cols / 2 + 1), "half spectrum size");
        Spectrum { rows, cols, data }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn half_cols(&self) -> usize {
        self.cols / 2 + 1
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    /// Multiplicity of each stored bin in the full spectrum: 1 for the DC
    /// column (and the Nyquist column for even widths), 2 otherwise.
    fn bin_weight(&self, k: usize) -> f64 {
        if k == 0 || (self.cols % 2 == 0 && k == self.cols / 2) {
            1.0
        } else {
            2.0
        }
    }

    fn zip_with(&self, other: &Spectrum, f: impl Fn(Complex64, Complex64) -> Complex64) -> Spectrum {
        assert_eq!(self.dims(), other.dims());
        Spectrum {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn mul(&self, other: &Spectrum) -> Spectrum {
        self.zip_with(other, |a, b| a * b)
    }

    /// `conj(self) * other`, the correlation (adjoint) product.
    pub fn conj_mul(&self, other: &Spectrum) -> Spectrum {
        self.zip_with(other, |a, b| a.conj() * b)
    }

    /// `self * other - sub`, fused.
    pub fn mul_sub(&self, other: &Spectrum, sub: &Spectrum) -> Spectrum {
        assert_eq!(self.dims(), sub.dims());
        let mut out = self.mul(other);
        for (o, s) in out.data.iter_mut().zip(&sub.data) {
            *o -= s;
        }
        out
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Spectrum {
        Spectrum {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    /// Spatial inner product `<a, b>` of the underlying real grids (Parseval).
    pub fn inner(&self, other: &Spectrum) -> f64 {
        assert_eq!(self.dims(), other.dims());
        let rows = self.rows;
        let mut acc = 0.0;
        for k in 0..self.half_cols() {
            let w = self.bin_weight(k);
            let col = k * rows..(k + 1) * rows;
            let s: f64 = self.data[col.clone()]
                .iter()
                .zip(&other.data[col])
                .map(|(a, b)| a.re * b.re + a.im * b.im)
                .sum();
            acc += w * s;
        }
        acc / (self.rows * self.cols) as f64
    }

    /// `<self * other, with>` without materializing the product.
    pub fn product_inner(&self, other: &Spectrum, with: &Spectrum) -> f64 {
        assert_eq!(self.dims(), other.dims());
        assert_eq!(self.dims(), with.dims());
        let rows = self.rows;
        let mut acc = 0.0;
        for k in 0..self.half_cols() {
            let col = k * rows..(k + 1) * rows;
            let s: f64 = self.data[col.clone()]
                .iter()
                .zip(&other.data[col.clone()])
                .zip(&with.data[col])
                .map(|((a, b), c)| {
                    let p = a * b;
                    p.re * c.re + p.im * c.im
                })
                .sum();
            acc += self.bin_weight(k) * s;
        }
        acc / (self.rows * self.cols) as f64
    }

    pub fn norm_sq(&self) -> f64 {
        self.inner(self)
    }

    /// Largest squared modulus over all frequencies.
    pub fn max_abs_sq(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).fold(0.0, f64::max)
    }

    pub fn dc(&self) -> Complex64 {
        self.data[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_dft(x: &[f64], rows: usize, cols: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); rows * cols];
        for kr in 0..rows {
            for kc in 0..cols {
                let mut acc = Complex64::default();
                for r in 0..rows {
                    for c in 0..cols {
                        let phase = -2.0 * std::f64::consts::PI * ((kr * r) as f64 / rows as f64 + (kc * c) as f64 / cols as f64);
                        acc += x[r * cols + c] * Complex64::from_polar(1.0, phase);
                    }
                }
                out[kr * cols + kc] = acc;
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive_dft() {
        let (rows, cols) = (5, 6);
        let x: Vec<f64> = (0..rows * cols).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let spec = Fft2::for_dims(rows, cols).forward(&x);
        let full = naive_dft(&x, rows, cols);
        for k in 0..spec.half_cols() {
            for r in 0..rows {
                let got = spec.as_slice()[k * rows + r];
                let want = full[r * cols + k];
                assert!((got - want).norm() < 1e-9, "bin ({r},{k})");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn forward_inverse_round_trip(rows in 1usize..12, cols in 1usize..12, seed in any::<u64>()) {
            let x: Vec<f64> = (0..rows * cols)
                .map(|i| (((i as u64).wrapping_mul(6364136223846793005).wrapping_add(seed) >> 33) as f64) / 1e6 - 2000.0)
                .collect();
            let fft = Fft2::for_dims(rows, cols);
            let back = fft.inverse(&fft.forward(&x));
            let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            let err: f64 = x.iter().zip(&back).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            prop_assert!(err / norm < 1e-10);
        }

        #[test]
        fn parseval_inner_product(rows in 1usize..9, cols in 1usize..9, seed in any::<u64>()) {
            let gen = |salt: u64| -> Vec<f64> {
                (0..rows * cols)
                    .map(|i| ((((i as u64) ^ salt).wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(seed) >> 40) as f64) / 1e3 - 8.0)
                    .collect()
            };
            let (a, b) = (gen(1), gen(2));
            let fft = Fft2::for_dims(rows, cols);
            let direct: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let spectral = fft.forward(&a).inner(&fft.forward(&b));
            prop_assert!((direct - spectral).abs() <= 1e-9 * (1.0 + direct.abs()));
        }
    }
}
