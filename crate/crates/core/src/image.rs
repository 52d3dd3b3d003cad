//! Real-valued 2-D pixel grids with periodic boundary semantics.
//!
//! Pixels are stored row-major as `f64`. Images loaded from disk keep their
//! native 8-bit range, so a typical grid lives in `[0, 255]`.

use std::ops::{Index, IndexMut};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default peak intensity used by [`psnr`] callers.
pub const DEFAULT_PEAK: f64 = 255.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    rows: usize,
    cols: usize,
    pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(rows: usize, cols: usize, pixels: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!("image dimensions must be positive, got {rows}x{cols}")));
        }
        if pixels.len() != rows * cols {
            return Err(Error::invalid(format!(
                "pixel buffer has {} entries, expected {}",
                pixels.len(),
                rows * cols
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("pixel buffer contains non-finite values"));
        }
        Ok(Self { rows, cols, pixels })
    }

    /// Builds a grid without validation. Callers guarantee `pixels.len() == rows * cols`.
    pub(crate) fn from_parts(rows: usize, cols: usize, pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), rows * cols);
        Self { rows, cols, pixels }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "image dimensions must be positive");
        Self::from_parts(rows, cols, vec![value; rows * cols])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "image dimensions must be positive");
        let mut pixels = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                pixels.push(f(r, c));
            }
        }
        Self::from_parts(rows, cols, pixels)
    }

    /// I.i.d. standard normal pixels scaled by `std` and shifted by `mean`.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, mean: f64, std: f64, rng: &mut R) -> Self {
        Self::from_fn(rows, cols, |_, _| mean + std * rng.sample::<f64, _>(StandardNormal))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Number of pixels, `d` in the model.
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.pixels
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.pixels
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_dims(&self, other: &ImageGrid) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                found: other.dims(),
            });
        }
        Ok(())
    }

    pub fn dot(&self, other: &ImageGrid) -> f64 {
        debug_assert_eq!(self.dims(), other.dims());
        self.pixels.iter().zip(&other.pixels).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.pixels.iter().map(|v| v * v).sum()
    }

    pub fn sum(&self) -> f64 {
        self.pixels.iter().sum()
    }

    /// Squared Euclidean distance.
    pub fn dist_sq(&self, other: &ImageGrid) -> f64 {
        debug_assert_eq!(self.dims(), other.dims());
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn l1_dist(&self, other: &ImageGrid) -> f64 {
        debug_assert_eq!(self.dims(), other.dims());
        self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b).abs()).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        Self::from_parts(self.rows, self.cols, self.pixels.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &ImageGrid, f: impl Fn(f64, f64) -> f64) -> ImageGrid {
        debug_assert_eq!(self.dims(), other.dims());
        let pixels = self.pixels.iter().zip(&other.pixels).map(|(&a, &b)| f(a, b)).collect();
        Self::from_parts(self.rows, self.cols, pixels)
    }

    pub fn scaled(&self, factor: f64) -> ImageGrid {
        self.map(|v| v * factor)
    }

    /// `self + factor * other`, in place.
    pub fn axpy(&mut self, factor: f64, other: &ImageGrid) {
        debug_assert_eq!(self.dims(), other.dims());
        for (a, b) in self.pixels.iter_mut().zip(&other.pixels) {
            *a += factor * b;
        }
    }

    pub fn clamped(&self, lo: f64, hi: f64) -> ImageGrid {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Centered crop of size `rows x cols`.
    pub fn center_crop(&self, rows: usize, cols: usize) -> Result<ImageGrid> {
        if rows == 0 || cols == 0 || rows > self.rows || cols > self.cols {
            return Err(Error::invalid(format!(
                "cannot crop {rows}x{cols} from a {}x{} image",
                self.rows, self.cols
            )));
        }
        let r0 = (self.rows - rows) / 2;
        let c0 = (self.cols - cols) / 2;
        Ok(Self::from_fn(rows, cols, |r, c| self[(r0 + r, c0 + c)]))
    }
}

impl Index<(usize, usize)> for ImageGrid {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.pixels[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for ImageGrid {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.pixels[r * self.cols + c]
    }
}

/// A decibel figure that may be unbounded (zero residual).
///
/// Serialized as a number, or as the string `"unbounded"` so that output files
/// never carry a float infinity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decibels {
    Finite(f64),
    Unbounded,
}

impl Decibels {
    pub fn value(self) -> Option<f64> {
        match self {
            Decibels::Finite(v) => Some(v),
            Decibels::Unbounded => None,
        }
    }

    pub fn is_unbounded(self) -> bool {
        matches!(self, Decibels::Unbounded)
    }

    /// Finite value, or `f64::INFINITY` for in-memory comparisons.
    pub fn as_f64(self) -> f64 {
        self.value().unwrap_or(f64::INFINITY)
    }
}

impl std::fmt::Display for Decibels {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Decibels::Finite(v) => write!(f, "{v:.3} dB"),
            Decibels::Unbounded => f.write_str("unbounded"),
        }
    }
}

impl Serialize for Decibels {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Decibels::Finite(v) => s.serialize_f64(*v),
            Decibels::Unbounded => s.serialize_str("unbounded"),
        }
    }
}

impl<'de> Deserialize<'de> for Decibels {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Decibels::Finite(v)),
            Raw::Str(s) if s == "unbounded" => Ok(Decibels::Unbounded),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("unexpected decibel value {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: Decibels,
    pub bsnr_db: Decibels,
    pub l2_residual: f64,
}

/// Peak signal-to-noise ratio of `x_hat` against `x_ref`.
pub fn psnr(x_hat: &ImageGrid, x_ref: &ImageGrid, peak: f64) -> Result<Decibels> {
    x_ref.ensure_same_dims(x_hat)?;
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("peak must be positive, got {peak}")));
    }
    let err = x_hat.dist_sq(x_ref);
    if err == 0.0 {
        return Ok(Decibels::Unbounded);
    }
    Ok(Decibels::Finite(10.0 * (peak * peak * x_hat.len() as f64 / err).log10()))
}

/// Blurred signal-to-noise ratio `-10 log10(||y - Hx||^2 / ||Hx||^2)`.
pub fn bsnr(y: &ImageGrid, hx: &ImageGrid) -> Result<Decibels> {
    hx.ensure_same_dims(y)?;
    let signal = hx.norm_sq();
    if signal == 0.0 {
        return Err(Error::ZeroEnergy("blurred image"));
    }
    let noise = y.dist_sq(hx);
    if noise == 0.0 {
        return Ok(Decibels::Unbounded);
    }
    Ok(Decibels::Finite(-10.0 * (noise / signal).log10()))
}

/// Noise variance that yields `bsnr_db` under the large-`d` approximation
/// `||w||^2 ~ d sigma^2`.
pub fn sigma2_for_bsnr(hx: &ImageGrid, bsnr_db: f64) -> Result<f64> {
    let signal = hx.norm_sq();
    if signal == 0.0 || !signal.is_finite() {
        return Err(Error::ZeroEnergy("blurred image"));
    }
    if !bsnr_db.is_finite() {
        return Err(Error::invalid("BSNR must be finite"));
    }
    Ok(signal / (hx.len() as f64 * 10f64.powf(bsnr_db / 10.0)))
}

/// Noise-variance box implied by a BSNR range: returns `(sigma2_max, sigma2_min)`.
///
/// The low BSNR end maps to the large variance.
pub fn sigma2_bounds_from_bsnr(hx: &ImageGrid, bsnr_lo_db: f64, bsnr_hi_db: f64) -> Result<(f64, f64)> {
    if !(bsnr_lo_db < bsnr_hi_db) {
        return Err(Error::invalid(format!(
            "BSNR range must satisfy lo < hi, got [{bsnr_lo_db}, {bsnr_hi_db}]"
        )));
    }
    Ok((sigma2_for_bsnr(hx, bsnr_lo_db)?, sigma2_for_bsnr(hx, bsnr_hi_db)?))
}

/// All three degradation metrics at once.
pub fn metric_report(x_hat: &ImageGrid, x_ref: &ImageGrid, y: &ImageGrid, hx: &ImageGrid, peak: f64) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr_db: psnr(x_hat, x_ref, peak)?,
        bsnr_db: bsnr(y, hx)?,
        l2_residual: y.dist_sq(hx).sqrt(),
    })
}
