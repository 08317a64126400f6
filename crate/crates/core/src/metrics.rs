//! Quality metrics: ERGAS, SCC and the translation-searched n-ERGAS, plus the
//! four-column per-scene evaluation and its aggregation.
//!
//! ERGAS is `100 * ratio * sqrt(mean_b (RMSE_b / mean_b)^2)` with `ratio` the
//! high/low resolution ratio (`1 / scale`). SCC is the Pearson correlation of
//! 3x3 Laplacian high-passes over the interior (one-pixel border dropped).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dims_mismatch, Error, Result};
use crate::raster::{gray, Plane, Raster};
use crate::scalar::Scalar;
use crate::scalepipe::{degrade, gaussian_kernel, kernel_radius, ScenePair};

/// Smallest reference band mean accepted by [`ergas`].
pub const MIN_BAND_MEAN: f64 = 1e-6;

pub fn ergas<T: Scalar>(test: &Raster<T>, reference: &Raster<T>, resolution_ratio: f64) -> Result<f64> {
    test.check_shape(reference)?;
    if !(resolution_ratio > 0.0 && resolution_ratio.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "resolution ratio must be positive, got {resolution_ratio}"
        )));
    }
    let mut acc = 0.0;
    for (b, (tb, rb)) in test.bands().iter().zip(reference.bands()).enumerate() {
        let mean = rb.mean();
        if mean.abs() < MIN_BAND_MEAN {
            return Err(Error::Degenerate(format!(
                "reference band {b} has near-zero mean {mean}"
            )));
        }
        let mse = tb
            .as_slice()
            .iter()
            .zip(rb.as_slice())
            .map(|(t, r)| (t.widen() - r.widen()).powi(2))
            .sum::<f64>()
            / tb.len() as f64;
        acc += mse / (mean * mean);
    }
    Ok(100.0 * resolution_ratio * (acc / test.num_bands() as f64).sqrt())
}

/// 3x3 Laplacian (center 8, neighbors -1, scaled by 1/8) over the interior.
fn laplacian_interior<T: Scalar>(p: &Plane<T>) -> Result<Vec<f64>> {
    let (w, h) = p.dims();
    if w < 3 || h < 3 {
        return Err(Error::InvalidInput(format!(
            "SCC needs at least 3x3 pixels, got {w}x{h}"
        )));
    }
    let src = p.as_slice();
    let at = |x: usize, y: usize| src[y * w + x].widen();
    let mut out = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let mut nb = 0.0;
            for (dx, dy) in [(0, 0), (1, 0), (2, 0), (0, 1), (2, 1), (0, 2), (1, 2), (2, 2)] {
                nb += at(x + dx - 1, y + dy - 1);
            }
            out.push((8.0 * at(x, y) - nb) / 8.0);
        }
    }
    Ok(out)
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Spatial correlation coefficient between two planes.
pub fn scc<T: Scalar>(a: &Plane<T>, b: &Plane<T>) -> Result<f64> {
    a.check_dims(b)?;
    let (la, lb) = (laplacian_interior(a)?, laplacian_interior(b)?);
    pearson(&la, &lb).ok_or_else(|| Error::Degenerate("high-pass plane has zero variance".into()))
}

/// How a multi-band output is compared against a single-band reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SccMode {
    /// Gray the output, then compare once.
    #[default]
    Gray,
    /// Compare each band against the reference and average.
    BandAverage,
}

pub fn scc_raster<T: Scalar>(a: &Raster<T>, reference: &Plane<T>, mode: SccMode) -> Result<f64> {
    match mode {
        SccMode::Gray => scc(&gray(a), reference),
        SccMode::BandAverage => {
            let mut acc = 0.0;
            for band in a.bands() {
                acc += scc(band, reference)?;
            }
            Ok(acc / a.num_bands() as f64)
        }
    }
}

/// Integer offsets searched by [`n_ergas`], in level-0 pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationSearch {
    pub max_shift: usize,
    pub offsets: Vec<(i32, i32)>,
}

impl TranslationSearch {
    pub const DEFAULT_MAX_SHIFT: usize = 6;

    /// Every offset in `[-max_shift, max_shift]^2`, row-major by `dy` then `dx`.
    pub fn full_grid(max_shift: usize) -> Self {
        let m = max_shift as i32;
        let offsets = (-m..=m).flat_map(|dy| (-m..=m).map(move |dx| (dx, dy))).collect();
        TranslationSearch { max_shift, offsets }
    }

    pub fn new(max_shift: usize, offsets: Vec<(i32, i32)>) -> Result<Self> {
        let s = TranslationSearch { max_shift, offsets };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.offsets.contains(&(0, 0)) {
            return Err(Error::InvalidInput("offset set must contain (0, 0)".into()));
        }
        let m = self.max_shift as i32;
        if let Some(o) = self.offsets.iter().find(|(dx, dy)| dx.abs() > m || dy.abs() > m) {
            return Err(Error::InvalidInput(format!(
                "offset {o:?} exceeds max shift {}",
                self.max_shift
            )));
        }
        Ok(())
    }
}

impl Default for TranslationSearch {
    fn default() -> Self {
        Self::full_grid(Self::DEFAULT_MAX_SHIFT)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NErgas {
    /// Smallest ERGAS over the searched offsets.
    pub value: f64,
    pub best_offset: (i32, i32),
    /// ERGAS at offset (0, 0) on the same cropped support.
    pub at_zero: f64,
}

/// Moves `x` by `(dx, dy)`: `out(x, y) = in(x - dx, y - dy)`, replicating
/// edge pixels into the uncovered band.
pub fn translate<T: Scalar>(x: &Raster<T>, dx: i32, dy: i32) -> Raster<T> {
    let (w, h) = x.dims();
    let src_x: Vec<usize> = (0..w as i64).map(|i| (i - dx as i64).clamp(0, w as i64 - 1) as usize).collect();
    let src_y: Vec<usize> = (0..h as i64).map(|i| (i - dy as i64).clamp(0, h as i64 - 1) as usize).collect();
    x.try_map_bands(|b| {
        let s = b.as_slice();
        let mut out = Vec::with_capacity(w * h);
        for &sy in &src_y {
            out.extend(src_x.iter().map(|&sx| s[sy * w + sx]));
        }
        Ok(Plane::from_vec_unchecked(w, h, out))
    })
    .expect("translation preserves band shapes")
}

/// Level-1 crop margin that keeps edge replication and blur spill out of
/// the compared region for every offset up to `max_shift`.
pub fn n_ergas_margin(max_shift: usize, scale: usize) -> usize {
    (max_shift + kernel_radius(scale)).div_ceil(scale)
}

/// Smallest ERGAS between `degrade(translate(ps0))` and `ms1` over the search
/// set, both cropped by the same margin at level 1. Ties go to the
/// lexicographically smallest `(dx, dy)`.
pub fn n_ergas<T: Scalar>(ps0: &Raster<T>, ms1: &Raster<T>, scale: usize, search: &TranslationSearch) -> Result<NErgas> {
    search.validate()?;
    let expect = (ms1.width() * scale, ms1.height() * scale);
    if ps0.dims() != expect {
        return Err(dims_mismatch(expect, ps0.dims()));
    }
    if ps0.num_bands() != ms1.num_bands() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} bands", ms1.num_bands()),
            found: format!("{} bands", ps0.num_bands()),
        });
    }
    let margin = n_ergas_margin(search.max_shift, scale);
    let (w1, h1) = ms1.dims();
    if w1 <= 2 * margin || h1 <= 2 * margin {
        return Err(Error::InvalidInput(format!(
            "{w1}x{h1} image is too small for a {margin}-pixel search margin"
        )));
    }
    let (cw, ch) = (w1 - 2 * margin, h1 - 2 * margin);
    let reference = ms1.crop(margin, margin, cw, ch)?;
    let ratio = 1.0 / scale as f64;
    let crop = CropGeometry { scale, margin, cw, ch, max_shift: search.max_shift };
    let bands: Vec<Vec<f64>> = ps0.bands().iter().map(|b| b.to_f64_vec()).collect();
    let mut dxs: Vec<i32> = search.offsets.iter().map(|o| o.0).collect();
    dxs.sort_unstable();
    dxs.dedup();
    let scores = dxs
        .par_iter()
        .map(|&dx| {
            let rows: Vec<Vec<f64>> = bands.iter().map(|b| crop.horizontal(b, ps0.width(), dx)).collect();
            search
                .offsets
                .iter()
                .filter(|o| o.0 == dx)
                .map(|&(_, dy)| {
                    let planes = rows.iter().map(|r| Plane::<T>::from_f64(cw, ch, &crop.vertical(r, dy))).collect();
                    let low = Raster::new(planes, reference.level())?;
                    Ok(((dx, dy), ergas(&low, &reference, ratio)?))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    let at_zero = scores.iter().find(|(o, _)| *o == (0, 0)).map(|(_, v)| *v).expect("validated");
    let (best_offset, value) = scores
        .into_iter()
        .min_by(|(oa, va), (ob, vb)| va.total_cmp(vb).then(oa.cmp(ob)))
        .expect("offset set is nonempty");
    Ok(NErgas {
        value,
        best_offset,
        at_zero,
    })
}

/// Degrade-then-crop of a translated level-0 plane, restricted to the
/// cropped support. The margin keeps every tap inside the image, so no
/// border handling is needed and results match translating, degrading and
/// cropping the whole image.
struct CropGeometry {
    scale: usize,
    margin: usize,
    cw: usize,
    ch: usize,
    max_shift: usize,
}

impl CropGeometry {
    fn row_range(&self) -> (usize, usize) {
        let r = kernel_radius(self.scale);
        let lo = self.margin * self.scale - r - self.max_shift;
        let hi = (self.margin + self.ch - 1) * self.scale + r + self.max_shift + 1;
        (lo, hi)
    }

    /// Horizontal pass at the kept columns of the crop for rows in
    /// [`Self::row_range`], with content moved right by `dx`.
    fn horizontal(&self, src: &[f64], w: usize, dx: i32) -> Vec<f64> {
        let taps = gaussian_kernel(self.scale);
        let r = kernel_radius(self.scale) as isize;
        let (lo, hi) = self.row_range();
        let mut out = Vec::with_capacity((hi - lo) * self.cw);
        for y in lo..hi {
            let line = &src[y * w..(y + 1) * w];
            for j in 0..self.cw {
                let start = ((self.margin + j) * self.scale) as isize - r - dx as isize;
                let window = &line[start as usize..start as usize + taps.len()];
                let mut acc = 0.0;
                for (t, v) in taps.iter().zip(window) {
                    acc += t * v;
                }
                out.push(acc);
            }
        }
        out
    }

    /// Vertical pass over the output of [`Self::horizontal`], with content
    /// moved down by `dy`.
    fn vertical(&self, rows: &[f64], dy: i32) -> Vec<f64> {
        let taps = gaussian_kernel(self.scale);
        let r = kernel_radius(self.scale) as isize;
        let lo = self.row_range().0 as isize;
        let mut out = vec![0.0; self.cw * self.ch];
        for i in 0..self.ch {
            let start = ((self.margin + i) * self.scale) as isize - r - dy as isize - lo;
            let dst = &mut out[i * self.cw..(i + 1) * self.cw];
            for (k, t) in taps.iter().enumerate() {
                let row = &rows[(start as usize + k) * self.cw..][..self.cw];
                for (o, v) in dst.iter_mut().zip(row) {
                    *o += t * v;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub search: TranslationSearch,
    pub scc_mode: SccMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            search: TranslationSearch::default(),
            scc_mode: SccMode::Gray,
        }
    }
}

/// One scene's scores at the levels used for original-scale evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// ERGAS between `degrade(g0)` and `m1`.
    pub ergas1: f64,
    /// SCC between `degrade(g0)` and `p1`.
    pub scc1: f64,
    /// SCC between `g0` and `p0`.
    pub scc0: f64,
    /// n-ERGAS of `g0` against `m1`.
    pub n_ergas1: f64,
}

impl MetricRow {
    pub const COLUMNS: [&'static str; 4] = ["ergas1", "scc1", "scc0", "n_ergas1"];

    pub fn values(&self) -> [f64; 4] {
        [self.ergas1, self.scc1, self.scc0, self.n_ergas1]
    }

    fn from_values(v: [f64; 4]) -> Self {
        MetricRow {
            ergas1: v[0],
            scc1: v[1],
            scc0: v[2],
            n_ergas1: v[3],
        }
    }
}

pub fn evaluate_scene<T: Scalar>(sp: &ScenePair<T>, cfg: &EvalConfig) -> Result<MetricRow> {
    sp.validate()?;
    let g0 = sp
        .g0
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("scene has no level-0 output g0".into()))?;
    let g1 = degrade(g0, sp.scale)?.with_level(1);
    let p1 = sp.p1_or_degrade()?;
    let ergas1 = ergas(&g1, &sp.m1, 1.0 / sp.scale as f64)?;
    let scc1 = scc_raster(&g1, &p1, cfg.scc_mode)?;
    let scc0 = scc_raster(g0, &sp.p0, cfg.scc_mode)?;
    let n_ergas1 = n_ergas(g0, &sp.m1, sp.scale, &cfg.search)?.value;
    Ok(MetricRow {
        ergas1,
        scc1,
        scc0,
        n_ergas1,
    })
}

/// Per-scene rows with their mean and standard error of the mean.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean: MetricRow,
    pub std_error: MetricRow,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("cannot aggregate zero scenes".into()));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; 4];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.values()) {
                *m += v / n;
            }
        }
        let mut se = [0.0; 4];
        if rows.len() > 1 {
            for (k, s) in se.iter_mut().enumerate() {
                let var = rows.iter().map(|r| (r.values()[k] - mean[k]).powi(2)).sum::<f64>() / (n - 1.0);
                *s = (var / n).sqrt();
            }
        }
        Ok(MetricReport {
            rows,
            mean: MetricRow::from_values(mean),
            std_error: MetricRow::from_values(se),
        })
    }

    /// CSV with one row per scene followed by `mean` and `stderr` rows.
    pub fn to_csv(&self, labels: &[String]) -> String {
        let mut out = String::from("scene,");
        out.push_str(&MetricRow::COLUMNS.join(","));
        out.push('\n');
        let line = |name: &str, v: [f64; 4]| {
            format!("{name},{:.6},{:.6},{:.6},{:.6}\n", v[0], v[1], v[2], v[3])
        };
        for (i, r) in self.rows.iter().enumerate() {
            let name = labels.get(i).cloned().unwrap_or_else(|| i.to_string());
            out.push_str(&line(&name, r.values()));
        }
        out.push_str(&line("mean", self.mean.values()));
        out.push_str(&line("stderr", self.std_error.values()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalepipe::{synth_scene, upsample, SynthConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_raster(w: usize, h: usize, bands: usize, seed: u64) -> Raster<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planes = (0..bands)
            .map(|_| Plane::from_fn(w, h, |_, _| rng.gen_range(0.1..0.9)))
            .collect();
        Raster::new(planes, 1).unwrap()
    }

    fn ergas_oracle(t: &Raster<f64>, r: &Raster<f64>, ratio: f64) -> f64 {
        let (w, h) = t.dims();
        let mut acc = 0.0;
        for b in 0..t.num_bands() {
            let (mut se, mut sum) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let d = t.band(b).get(x, y) - r.band(b).get(x, y);
                    se += d * d;
                    sum += r.band(b).get(x, y);
                }
            }
            let n = (w * h) as f64;
            let rmse = (se / n).sqrt();
            acc += (rmse / (sum / n)).powi(2);
        }
        100.0 * ratio * (acc / t.num_bands() as f64).sqrt()
    }

    fn scc_oracle(a: &Plane<f64>, b: &Plane<f64>) -> f64 {
        let hp = |p: &Plane<f64>, x: usize, y: usize| {
            let mut s = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    let wgt = if dx == 1 && dy == 1 { 1.0 } else { -1.0 / 8.0 };
                    s += wgt * p.get(x + dx - 1, y + dy - 1);
                }
            }
            s
        };
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for y in 1..a.height() - 1 {
            for x in 1..a.width() - 1 {
                xs.push(hp(a, x, y));
                ys.push(hp(b, x, y));
            }
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn ergas_closed_form() {
        let r = Raster::from_plane(Plane::filled(4, 4, 0.5f64), 1);
        let t = Raster::from_plane(Plane::filled(4, 4, 0.6f64), 1);
        assert!((ergas(&t, &r, 0.25).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(ergas(&r, &r, 0.25).unwrap(), 0.0);
    }

    #[test]
    fn ergas_matches_oracle() {
        let t = random_raster(20, 16, 3, 1);
        let r = random_raster(20, 16, 3, 2);
        assert!((ergas(&t, &r, 0.25).unwrap() - ergas_oracle(&t, &r, 0.25)).abs() < 1e-9);
    }

    #[test]
    fn ergas_rejects_dark_reference() {
        let r = Raster::from_plane(Plane::zeros(4, 4), 1);
        let t = Raster::from_plane(Plane::filled(4, 4, 0.1f64), 1);
        assert!(matches!(ergas(&t, &r, 0.25), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ergas_is_linear_in_residual() {
        let r = random_raster(12, 12, 3, 3);
        let delta = random_raster(12, 12, 3, 4);
        let add = |k: f64| {
            Raster::new(
                (0..3)
                    .map(|b| r.band(b).zip_map(delta.band(b), |a, d| a + k * d * 0.01).unwrap())
                    .collect(),
                1,
            )
            .unwrap()
        };
        let one = ergas(&add(1.0), &r, 0.25).unwrap();
        let two = ergas(&add(2.0), &r, 0.25).unwrap();
        assert!((two - 2.0 * one).abs() < 1e-9);
    }

    #[test]
    fn scc_identities_and_oracle() {
        let a = random_raster(24, 20, 1, 5).into_bands().remove(0);
        let b = random_raster(24, 20, 1, 6).into_bands().remove(0);
        assert!((scc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((scc(&a, &a.map(|v| 0.7 - v)).unwrap() + 1.0).abs() < 1e-12);
        assert!((scc(&a, &b).unwrap() - scc_oracle(&a, &b)).abs() < 1e-9);
        assert!(matches!(scc(&a, &Plane::filled(24, 20, 0.3)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn search_grid_and_validation() {
        let g = TranslationSearch::full_grid(6);
        assert_eq!(g.offsets.len(), 169);
        assert!(g.offsets.contains(&(0, 0)));
        assert!(TranslationSearch::new(2, vec![(1, 0)]).is_err());
        assert!(TranslationSearch::new(2, vec![(0, 0), (3, 0)]).is_err());
    }

    #[test]
    fn translate_moves_content() {
        let r = random_raster(10, 8, 1, 7);
        let t = translate(&r, 3, -2);
        assert_eq!(t.band(0).get(5, 2), r.band(0).get(2, 4));
    }

    #[test]
    fn n_ergas_is_zero_for_consistent_pair() {
        let ps0 = random_raster(96, 96, 3, 8).with_level(0);
        let ms1 = degrade(&ps0, 4).unwrap();
        let r = n_ergas(&ps0, &ms1, 4, &TranslationSearch::default()).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.at_zero, 0.0);
        assert_eq!(r.best_offset, (0, 0));
    }

    #[test]
    fn singleton_search_is_cropped_ergas() {
        let ps0 = random_raster(96, 96, 3, 9).with_level(0);
        let ms1 = random_raster(24, 24, 3, 10);
        let search = TranslationSearch::new(6, vec![(0, 0)]).unwrap();
        let r = n_ergas(&ps0, &ms1, 4, &search).unwrap();
        let m = n_ergas_margin(6, 4);
        let low = degrade(&ps0, 4).unwrap().crop(m, m, 24 - 2 * m, 24 - 2 * m).unwrap();
        let reference = ms1.crop(m, m, 24 - 2 * m, 24 - 2 * m).unwrap();
        assert_eq!(r.value, ergas(&low, &reference, 0.25).unwrap());
        assert_eq!(r.best_offset, (0, 0));
    }

    #[test]
    fn search_matches_translate_degrade_crop() {
        let ps0 = random_raster(64, 56, 2, 11).with_level(0).convert::<f32>();
        let ms1 = random_raster(16, 14, 2, 12).convert::<f32>();
        let m = n_ergas_margin(3, 4);
        let reference = ms1.crop(m, m, 16 - 2 * m, 14 - 2 * m).unwrap();
        for offset in [(0, 0), (3, -2), (-3, 3), (1, 0)] {
            let search = TranslationSearch::new(3, vec![(0, 0), offset]).unwrap();
            let got = n_ergas(&ps0, &ms1, 4, &search).unwrap();
            let moved = translate(&ps0, offset.0, offset.1);
            let low = degrade(&moved, 4).unwrap().crop(m, m, 16 - 2 * m, 14 - 2 * m).unwrap();
            let expect = ergas(&low, &reference, 0.25).unwrap();
            assert_eq!(got.value, got.at_zero.min(expect));
            let singleton = TranslationSearch { max_shift: 3, offsets: vec![(0, 0)] };
            let zero = n_ergas(&moved, &ms1, 4, &singleton).unwrap();
            assert_eq!(zero.value, expect);
        }
    }

    #[test]
    fn n_ergas_rejects_tiny_images() {
        let ps0 = random_raster(24, 24, 1, 1).with_level(0);
        let ms1 = random_raster(6, 6, 1, 2);
        assert!(n_ergas(&ps0, &ms1, 4, &TranslationSearch::default()).is_err());
    }

    #[test]
    fn planted_shift_is_recovered() {
        let cfg = SynthConfig { seed: 2, global_shift: (4.0, 0.0), ..Default::default() };
        let sp: ScenePair<f64> = synth_scene(&cfg).unwrap();
        let ps0 = &sp.truth.as_ref().unwrap().aligned_ms0;
        let r = n_ergas(ps0, &sp.m1, 4, &TranslationSearch::default()).unwrap();
        assert_eq!(r.best_offset, (4, 0));
        assert!(r.value < r.at_zero);
    }

    #[test]
    fn ideal_and_bicubic_outputs() {
        let cfg = SynthConfig { seed: 4, ..Default::default() };
        let sp: ScenePair<f64> = synth_scene(&cfg).unwrap();
        let ideal = sp.truth.as_ref().unwrap().aligned_ms0.clone();
        let row = evaluate_scene(&sp.clone().with_g0(ideal).unwrap(), &EvalConfig::default()).unwrap();
        assert!(row.ergas1 < 1e-9 && row.n_ergas1 < 1e-9);
        assert!((row.scc0 - 1.0).abs() < 1e-9);

        let bicubic = upsample(&sp.m1, 4).unwrap();
        let b = evaluate_scene(&sp.clone().with_g0(bicubic).unwrap(), &EvalConfig::default()).unwrap();
        assert!(b.scc0 < row.scc0);
        assert!(evaluate_scene(&sp, &EvalConfig::default()).is_err());
    }

    #[test]
    fn aggregation() {
        let row = MetricRow { ergas1: 1.0, scc1: 0.5, scc0: 0.4, n_ergas1: 0.9 };
        let rep = MetricReport::from_rows(vec![row, row]).unwrap();
        assert_eq!(rep.mean, row);
        assert_eq!(rep.std_error.values(), [0.0; 4]);
        let other = MetricRow { ergas1: 3.0, ..row };
        let rep = MetricReport::from_rows(vec![row, other]).unwrap();
        assert_eq!(rep.mean.ergas1, 2.0);
        assert!((rep.std_error.ergas1 - 1.0).abs() < 1e-12);
        assert!(rep.to_csv(&[]).starts_with("scene,ergas1,scc1,scc0,n_ergas1\n0,"));
        assert!(MetricReport::from_rows(vec![]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn n_ergas_never_exceeds_zero_offset(seed in any::<u64>()) {
            let ps0 = random_raster(64, 64, 2, seed).with_level(0);
            let ms1 = random_raster(16, 16, 2, seed ^ 77);
            let search = TranslationSearch::full_grid(3);
            let r = n_ergas(&ps0, &ms1, 4, &search).unwrap();
            prop_assert!(r.value <= r.at_zero);
        }
    }
}
