//! Correlation map between a grayed MS image and a PAN image.
//!
//! `S = |corr|^gamma`, where `corr` is the windowed Pearson correlation built
//! from the clipped-window statistics in [`crate::raster`]. Strong positive and
//! strong negative correlation both give `S` near one.

use crate::error::{Error, Result};
use crate::raster::{gray, kernel, Plane, Raster, StatConfig};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrParams {
    pub gamma: f64,
    pub stat: StatConfig,
}

impl CorrParams {
    pub const DEFAULT_GAMMA: f64 = 4.0;

    pub fn new(gamma: f64, stat: StatConfig) -> Result<Self> {
        let p = CorrParams { gamma, stat };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "gamma must be positive and finite, got {}",
                self.gamma
            )));
        }
        self.stat.validate()
    }
}

impl Default for CorrParams {
    fn default() -> Self {
        CorrParams {
            gamma: Self::DEFAULT_GAMMA,
            stat: StatConfig::default(),
        }
    }
}

/// A weighting map with every sample in `[0, 1]`. It is a constant of the
/// loss: nothing differentiates through it.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrMap<T> {
    s: Plane<T>,
}

impl<T: Scalar> CorrMap<T> {
    pub fn from_plane(s: Plane<T>) -> Result<Self> {
        if let Some(i) = s
            .as_slice()
            .iter()
            .position(|&v| v < T::zero() || v > T::one())
        {
            return Err(Error::InvalidInput(format!(
                "correlation map sample {} at pixel ({}, {}) outside [0, 1]",
                s.as_slice()[i],
                i % s.width(),
                i / s.width()
            )));
        }
        Ok(CorrMap { s })
    }

    /// The all-ones map, which disables correlation weighting.
    pub fn ones(width: usize, height: usize) -> Self {
        CorrMap {
            s: Plane::filled(width, height, T::one()),
        }
    }

    pub fn plane(&self) -> &Plane<T> {
        &self.s
    }

    pub fn into_plane(self) -> Plane<T> {
        self.s
    }

    pub fn dims(&self) -> (usize, usize) {
        self.s.dims()
    }

    pub fn mean(&self) -> f64 {
        self.s.mean()
    }
}

/// Windowed Pearson correlation `cov(a, b) / (std(a) std(b))`, clamped to
/// `[-1, 1]`.
pub fn correlation<T: Scalar>(m_gray: &Plane<T>, pan: &Plane<T>, params: &CorrParams) -> Result<Plane<T>> {
    m_gray.check_dims(pan)?;
    let (w, h) = m_gray.dims();
    Ok(Plane::from_f64(w, h, &correlation_f64(m_gray, pan, params)))
}

fn correlation_f64<T: Scalar>(a: &Plane<T>, b: &Plane<T>, params: &CorrParams) -> Vec<f64> {
    let (w, h) = a.dims();
    let win = params.stat.window;
    let eps = params.stat.eps;
    let (a, b) = (a.to_f64_vec(), b.to_f64_vec());
    let cov = kernel::cov(&a, &b, w, h, win);
    let var_a = kernel::cov(&a, &a, w, h, win);
    let var_b = kernel::cov(&b, &b, w, h, win);
    cov.iter()
        .zip(var_a.iter().zip(&var_b))
        .map(|(&c, (&va, &vb))| {
            let denom = kernel::stabilized_std(va, eps) * kernel::stabilized_std(vb, eps);
            (c / denom).clamp(-1.0, 1.0)
        })
        .collect()
}

/// `S = |corr(gray(ms), pan)|^gamma`.
pub fn corr_map<T: Scalar>(ms: &Raster<T>, pan: &Plane<T>, params: &CorrParams) -> Result<CorrMap<T>> {
    params.validate()?;
    let m_gray = gray(ms);
    m_gray.check_dims(pan)?;
    let (w, h) = pan.dims();
    let s: Vec<f64> = correlation_f64(&m_gray, pan, params)
        .into_iter()
        .map(|c| c.abs().powf(params.gamma))
        .collect();
    Ok(CorrMap {
        s: Plane::from_f64(w, h, &s),
    })
}
