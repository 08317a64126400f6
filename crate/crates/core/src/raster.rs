//! Planar image containers, normalization, graying and windowed statistics.
//!
//! Windowed statistics use a box filter whose window is clipped to the image
//! bounds: every output pixel averages only the samples that actually exist,
//! divided by their count. Sums come from `f64` integral images built over
//! data centered on its first sample, which keeps constant planes exact and
//! limits cancellation in `m(ab) - m(a)m(b)`.

use crate::error::{dims_mismatch, Error, Result};
use crate::scalar::Scalar;

/// Resolution level of a raster. Level 0 is the PAN grid, level 1 the MS grid
/// and level 2 the MS grid reduced once more.
pub type Level = u8;

/// A single band of finite samples in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Scalar> Plane<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "plane dimensions must be nonzero, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "plane {width}x{height} needs {} samples, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite sample at pixel ({}, {})",
                i % width,
                i / width
            )));
        }
        Ok(Plane {
            width,
            height,
            data,
        })
    }

    /// Builds a plane from data produced internally from finite inputs.
    pub(crate) fn from_vec_unchecked(width: usize, height: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Plane {
            width,
            height,
            data,
        }
    }

    pub(crate) fn from_f64(width: usize, height: usize, data: &[f64]) -> Self {
        Self::from_vec_unchecked(width, height, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        assert!(width > 0 && height > 0, "plane dimensions must be nonzero");
        assert!(value.is_finite(), "fill value must be finite");
        Plane {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, T::zero())
    }

    /// Builds a plane from `f(x, y)`. Panics if `f` yields a non-finite value.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(width > 0 && height > 0, "plane dimensions must be nonzero");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                assert!(v.is_finite(), "non-finite sample at ({x}, {y})");
                data.push(v);
            }
        }
        Plane {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub(crate) fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.widen()).collect()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Plane::from_vec_unchecked(self.width, self.height, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Plane<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_dims(other)?;
        Ok(Plane::from_vec_unchecked(
            self.width,
            self.height,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn convert<U: Scalar>(&self) -> Plane<U> {
        Plane::from_vec_unchecked(
            self.width,
            self.height,
            self.data.iter().map(|v| U::lit(v.widen())).collect(),
        )
    }

    /// Mean of all samples, accumulated in `f64`.
    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.widen()).sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((self.data[0], self.data[0]), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || x0 + width > self.width || y0 + height > self.height {
            return Err(Error::InvalidInput(format!(
                "crop {width}x{height}+{x0}+{y0} outside {}x{} plane",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            let row = y * self.width;
            data.extend_from_slice(&self.data[row + x0..row + x0 + width]);
        }
        Ok(Plane::from_vec_unchecked(width, height, data))
    }

    pub(crate) fn check_dims(&self, other: &Plane<T>) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(dims_mismatch(self.dims(), other.dims()));
        }
        Ok(())
    }
}

/// A multi-band image: one [`Plane`] per band, all the same size.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    bands: Vec<Plane<T>>,
    level: Level,
    bit_depth: Option<u32>,
}

impl<T: Scalar> Raster<T> {
    pub fn new(bands: Vec<Plane<T>>, level: Level) -> Result<Self> {
        let first = bands
            .first()
            .ok_or_else(|| Error::InvalidInput("raster needs at least one band".into()))?;
        let dims = first.dims();
        if let Some(bad) = bands.iter().find(|b| b.dims() != dims) {
            return Err(dims_mismatch(dims, bad.dims()));
        }
        Ok(Raster {
            bands,
            level,
            bit_depth: None,
        })
    }

    pub fn from_plane(plane: Plane<T>, level: Level) -> Self {
        Raster {
            bands: vec![plane],
            level,
            bit_depth: None,
        }
    }

    pub fn zeros(width: usize, height: usize, bands: usize, level: Level) -> Self {
        assert!(bands > 0, "raster needs at least one band");
        Raster {
            bands: vec![Plane::zeros(width, height); bands],
            level,
            bit_depth: None,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.bands[0].width()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.bands[0].height()
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        self.bands[0].dims()
    }

    #[inline]
    pub fn num_bands(&self) -> usize {
        self.bands.len()
    }

    #[inline]
    pub fn band(&self, b: usize) -> &Plane<T> {
        &self.bands[b]
    }

    pub fn bands(&self) -> &[Plane<T>] {
        &self.bands
    }

    pub fn into_bands(self) -> Vec<Plane<T>> {
        self.bands
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn with_level(mut self, level: Level) -> Self {
        self.level = level;
        self
    }

    /// Bit depth of raw integer counts, or `None` for normalized data.
    pub fn bit_depth(&self) -> Option<u32> {
        self.bit_depth
    }

    pub fn with_bit_depth(mut self, bit_depth: Option<u32>) -> Self {
        self.bit_depth = bit_depth;
        self
    }

    /// Applies `f` to each band, keeping level and bit depth.
    pub fn try_map_bands(&self, f: impl Fn(&Plane<T>) -> Result<Plane<T>>) -> Result<Self> {
        let bands = self.bands.iter().map(f).collect::<Result<Vec<_>>>()?;
        Ok(Raster::new(bands, self.level)?.with_bit_depth(self.bit_depth))
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        self.try_map_bands(|b| b.crop(x0, y0, width, height))
    }

    pub fn convert<U: Scalar>(&self) -> Raster<U> {
        Raster {
            bands: self.bands.iter().map(Plane::convert).collect(),
            level: self.level,
            bit_depth: self.bit_depth,
        }
    }

    pub(crate) fn check_shape(&self, other: &Raster<T>) -> Result<()> {
        if self.dims() != other.dims() || self.num_bands() != other.num_bands() {
            return Err(Error::ShapeMismatch {
                expected: shape_string(self),
                found: shape_string(other),
            });
        }
        Ok(())
    }
}

pub(crate) fn shape_string<T: Scalar>(r: &Raster<T>) -> String {
    format!("{}x{}x{}", r.width(), r.height(), r.num_bands())
}

/// Box-filter window and the stabilizer added under the square root of a
/// windowed variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StatConfig {
    pub window: usize,
    pub eps: f64,
}

impl StatConfig {
    pub const DEFAULT_WINDOW: usize = 31;
    pub const DEFAULT_EPS: f64 = 1e-10;

    pub fn new(window: usize, eps: f64) -> Result<Self> {
        let cfg = StatConfig { window, eps };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!(
                "window must be a positive odd integer, got {}",
                self.window
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "eps must be positive and finite, got {}",
                self.eps
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn radius(&self) -> usize {
        self.window / 2
    }
}

impl Default for StatConfig {
    fn default() -> Self {
        StatConfig {
            window: Self::DEFAULT_WINDOW,
            eps: Self::DEFAULT_EPS,
        }
    }
}

pub const SUPPORTED_BIT_DEPTHS: [u32; 4] = [8, 11, 14, 16];

/// Divides raw integer counts by `2^bit_depth - 1`.
pub fn normalize<T: Scalar>(raster: &Raster<T>, bit_depth: u32) -> Result<Raster<T>> {
    if !SUPPORTED_BIT_DEPTHS.contains(&bit_depth) {
        return Err(Error::InvalidInput(format!(
            "unsupported bit depth {bit_depth}, expected one of {SUPPORTED_BIT_DEPTHS:?}"
        )));
    }
    let max = ((1u64 << bit_depth) - 1) as f64;
    let width = raster.width();
    let mut bands = Vec::with_capacity(raster.num_bands());
    for (b, plane) in raster.bands().iter().enumerate() {
        let mut out = Vec::with_capacity(plane.len());
        for (i, v) in plane.as_slice().iter().enumerate() {
            let v = v.widen();
            if !(0.0..=max).contains(&v) {
                return Err(Error::SampleOutOfRange {
                    bit_depth,
                    band: b,
                    x: i % width,
                    y: i / width,
                    value: v,
                });
            }
            out.push(T::lit(v / max));
        }
        bands.push(Plane::from_vec_unchecked(plane.width(), plane.height(), out));
    }
    Raster::new(bands, raster.level())
}

/// Unweighted per-pixel mean over bands.
pub fn gray<T: Scalar>(ms: &Raster<T>) -> Plane<T> {
    let (w, h) = ms.dims();
    let n = T::lit(ms.num_bands() as f64);
    let mut acc = ms.band(0).as_slice().to_vec();
    for band in &ms.bands()[1..] {
        for (a, &v) in acc.iter_mut().zip(band.as_slice()) {
            *a += v;
        }
    }
    for a in &mut acc {
        *a /= n;
    }
    Plane::from_vec_unchecked(w, h, acc)
}

/// Windowed mean `m(x)` with borders clipped to the image.
pub fn window_mean<T: Scalar>(x: &Plane<T>, cfg: &StatConfig) -> Plane<T> {
    let (w, h) = x.dims();
    Plane::from_f64(w, h, &kernel::box_mean(&x.to_f64_vec(), w, h, cfg.window))
}

/// Windowed covariance `m(ab) - m(a) m(b)`.
pub fn window_cov<T: Scalar>(a: &Plane<T>, b: &Plane<T>, cfg: &StatConfig) -> Result<Plane<T>> {
    a.check_dims(b)?;
    let (w, h) = a.dims();
    Ok(Plane::from_f64(
        w,
        h,
        &kernel::cov(&a.to_f64_vec(), &b.to_f64_vec(), w, h, cfg.window),
    ))
}

/// Windowed standard deviation `sqrt(|cov(x, x)| + eps)`.
pub fn window_std<T: Scalar>(x: &Plane<T>, cfg: &StatConfig) -> Plane<T> {
    let (w, h) = x.dims();
    let xs = x.to_f64_vec();
    let var = kernel::cov(&xs, &xs, w, h, cfg.window);
    let std: Vec<f64> = var.iter().map(|&v| kernel::stabilized_std(v, cfg.eps)).collect();
    Plane::from_f64(w, h, &std)
}

/// `f64` slice kernels shared by the loss and its adjoint.
pub(crate) mod kernel {
    /// Clipped window `[lo, hi)` around `i` along an axis of length `len`.
    #[inline]
    pub fn span(i: usize, radius: usize, len: usize) -> (usize, usize) {
        (i.saturating_sub(radius), (i + radius + 1).min(len))
    }

    /// Integral image of `data - center`, `(w + 1) x (h + 1)` with a zero
    /// top row and left column.
    fn integral(data: &[f64], center: f64, w: usize, h: usize) -> Vec<f64> {
        let stride = w + 1;
        let mut sat = vec![0.0; stride * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += data[y * w + x] - center;
                sat[(y + 1) * stride + x + 1] = sat[y * stride + x + 1] + row;
            }
        }
        sat
    }

    /// Window sums and pixel counts for every output pixel.
    fn window_sums(sat: &[f64], w: usize, h: usize, window: usize, mut f: impl FnMut(usize, f64, f64)) {
        let stride = w + 1;
        let r = window / 2;
        for y in 0..h {
            let (y0, y1) = span(y, r, h);
            for x in 0..w {
                let (x0, x1) = span(x, r, w);
                let s = sat[y1 * stride + x1] - sat[y0 * stride + x1] - sat[y1 * stride + x0]
                    + sat[y0 * stride + x0];
                f(y * w + x, s, ((x1 - x0) * (y1 - y0)) as f64);
            }
        }
    }

    pub fn box_mean(data: &[f64], w: usize, h: usize, window: usize) -> Vec<f64> {
        let center = data[0];
        let sat = integral(data, center, w, h);
        let mut out = vec![0.0; w * h];
        window_sums(&sat, w, h, window, |i, s, n| out[i] = center + s / n);
        out
    }

    /// Adjoint of [`box_mean`]: `y_j = sum over windows i containing j of u_i / n_i`.
    ///
    /// Clipped windows are symmetric (`j` in window `i` iff `i` in window `j`),
    /// so this is a plain window sum of `u / n`.
    pub fn box_mean_adjoint(u: &[f64], w: usize, h: usize, window: usize) -> Vec<f64> {
        let r = window / 2;
        let mut scaled = vec![0.0; w * h];
        for y in 0..h {
            let (y0, y1) = span(y, r, h);
            for x in 0..w {
                let (x0, x1) = span(x, r, w);
                scaled[y * w + x] = u[y * w + x] / ((x1 - x0) * (y1 - y0)) as f64;
            }
        }
        let sat = integral(&scaled, 0.0, w, h);
        let mut out = vec![0.0; w * h];
        window_sums(&sat, w, h, window, |i, s, _| out[i] = s);
        out
    }

    /// Windowed covariance on data centered by each plane's first sample.
    ///
    /// Covariance is invariant to the centering constants, and centering makes
    /// constant planes produce exact zeros.
    pub fn cov(a: &[f64], b: &[f64], w: usize, h: usize, window: usize) -> Vec<f64> {
        let (ca, cb) = (a[0], b[0]);
        let ac: Vec<f64> = a.iter().map(|&v| v - ca).collect();
        let bc: Vec<f64> = b.iter().map(|&v| v - cb).collect();
        let ab: Vec<f64> = ac.iter().zip(&bc).map(|(x, y)| x * y).collect();
        let m_ab = box_mean_centered(&ab, w, h, window);
        let m_a = box_mean_centered(&ac, w, h, window);
        let m_b = if std::ptr::eq(a, b) {
            m_a.clone()
        } else {
            box_mean_centered(&bc, w, h, window)
        };
        m_ab.iter()
            .zip(m_a.iter().zip(&m_b))
            .map(|(&p, (&x, &y))| p - x * y)
            .collect()
    }

    fn box_mean_centered(data: &[f64], w: usize, h: usize, window: usize) -> Vec<f64> {
        let sat = integral(data, 0.0, w, h);
        let mut out = vec![0.0; w * h];
        window_sums(&sat, w, h, window, |i, s, n| out[i] = s / n);
        out
    }

    #[inline]
    pub fn stabilized_std(var: f64, eps: f64) -> f64 {
        (var.abs() + eps).sqrt()
    }
}
