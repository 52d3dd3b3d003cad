//! Hyperparameters `(theta, alpha, sigma2)` and their admissible box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let iv = Self { lo, hi };
        iv.validate()?;
        Ok(iv)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(Error::invalid(format!("invalid interval [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.max(self.lo).min(self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// `n` evenly spaced points including both ends (`n == 1` gives the midpoint).
    pub fn grid(&self, n: usize) -> Vec<f64> {
        match n {
            0 => Vec::new(),
            1 => vec![self.midpoint()],
            _ => (0..n)
                .map(|i| self.lo + self.width() * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }
}

/// Model hyperparameters: regularization `theta`, blur parameters `alpha`,
/// noise variance `sigma2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub theta: f64,
    pub alpha: Vec<f64>,
    pub sigma2: f64,
}

impl HyperParams {
    pub fn new(theta: f64, alpha: Vec<f64>, sigma2: f64) -> Self {
        Self { theta, alpha, sigma2 }
    }

    /// Flattened as `[theta, alpha..., sigma2]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.alpha.len() + 2);
        v.push(self.theta);
        v.extend_from_slice(&self.alpha);
        v.push(self.sigma2);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() < 2 {
            return Err(Error::invalid("hyperparameter vector needs at least theta and sigma2"));
        }
        Ok(Self {
            theta: v[0],
            alpha: v[1..v.len() - 1].to_vec(),
            sigma2: v[v.len() - 1],
        })
    }

    pub fn is_finite(&self) -> bool {
        self.theta.is_finite() && self.sigma2.is_finite() && self.alpha.iter().all(|a| a.is_finite())
    }
}

/// The admissible hyper-rectangle for `(theta, alpha, sigma2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperDomain {
    pub theta: Interval,
    pub alpha: Vec<Interval>,
    pub sigma2: Interval,
}

/// Default regularization box.
pub const THETA_BOX: Interval = Interval { lo: 1e-3, hi: 1.0 };

impl HyperDomain {
    pub fn new(theta: Interval, alpha: Vec<Interval>, sigma2: Interval) -> Result<Self> {
        let d = Self { theta, alpha, sigma2 };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        self.theta.validate()?;
        self.sigma2.validate()?;
        for a in &self.alpha {
            a.validate()?;
        }
        if self.theta.lo <= 0.0 {
            return Err(Error::invalid("theta box must be strictly positive"));
        }
        if self.sigma2.lo <= 0.0 {
            return Err(Error::invalid("sigma2 box must be strictly positive"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.alpha.len() + 2
    }

    /// Boxes flattened in the same order as [`HyperParams::to_vec`].
    pub fn intervals(&self) -> Vec<Interval> {
        let mut v = Vec::with_capacity(self.dim());
        v.push(self.theta);
        v.extend_from_slice(&self.alpha);
        v.push(self.sigma2);
        v
    }

    pub fn midpoint(&self) -> HyperParams {
        HyperParams {
            theta: self.theta.midpoint(),
            alpha: self.alpha.iter().map(Interval::midpoint).collect(),
            sigma2: self.sigma2.midpoint(),
        }
    }

    pub fn contains(&self, p: &HyperParams) -> bool {
        p.alpha.len() == self.alpha.len()
            && self.intervals().iter().zip(p.to_vec()).all(|(iv, v)| iv.contains(v))
    }

    pub fn project(&self, p: &HyperParams) -> Result<HyperParams> {
        HyperParams::from_slice(&project_box(&p.to_vec(), self)?)
    }
}

/// Euclidean projection onto the box: a componentwise clamp.
pub fn project_box(v: &[f64], domain: &HyperDomain) -> Result<Vec<f64>> {
    if v.len() != domain.dim() {
        return Err(Error::invalid(format!(
            "vector has {} components but the domain has {}",
            v.len(),
            domain.dim()
        )));
    }
    Ok(domain.intervals().iter().zip(v).map(|(iv, &x)| iv.clamp(x)).collect())
}
