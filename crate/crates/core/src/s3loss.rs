//! The spectral-spatial structure loss and its gradient with respect to the
//! sharpened output.
//!
//! ```text
//! L_c  = sum |G - M| * S                          (over bands and pixels)
//! L_a  = sum |grad(gray G) - grad(P)| * (2 - S)   (over pixels)
//! L_S3 = L_c + w_a * L_a
//! grad(X) = (X - m(X)) / std(X)
//! ```
//!
//! `m` and `std` are the clipped-window statistics of [`crate::raster`]. All
//! sums are plain (no averaging) and accumulate in `f64` in row-major order,
//! so results are deterministic. The correlation map `S` is a constant.

use crate::corrmap::{CorrMap, CorrParams};
use crate::error::{dims_mismatch, Error, Result};
use crate::raster::{kernel, Plane, Raster, StatConfig};
use crate::scalar::{sign0, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the spatial term.
    pub w_a: f64,
    /// Parameters used to build `S`.
    pub corr: CorrParams,
    /// When false, `S` is replaced by all ones.
    pub use_corr_map: bool,
    /// Window and stabilizer of the grad maps.
    pub stat: StatConfig,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_a >= 0.0 && self.w_a.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "w_a must be nonnegative and finite, got {}",
                self.w_a
            )));
        }
        self.corr.validate()?;
        self.stat.validate()
    }

    /// Config with one window and stabilizer shared by `S` and the grad maps.
    pub fn with_stat(mut self, stat: StatConfig) -> Self {
        self.corr.stat = stat;
        self.stat = stat;
        self
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            w_a: 1.0,
            corr: CorrParams::default(),
            use_corr_map: true,
            stat: StatConfig::default(),
        }
    }
}

/// Per-pixel loss contributions before weighting by `w_a`.
#[derive(Clone, Debug, PartialEq)]
pub struct Contributions<T> {
    /// `sum_b |G_b - M_b| * S` at each pixel.
    pub spectral: Plane<T>,
    /// `|grad(gray G) - grad(P)| * (2 - S)` at each pixel.
    pub spatial: Plane<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub l_c: T,
    pub l_a: T,
    /// Always exactly `l_c + w_a * l_a`.
    pub l_s3: T,
    pub contributions: Option<Contributions<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<T> {
    /// `dL_S3 / dG`, shaped like `G`.
    pub d_g: Raster<T>,
}

fn check_inputs<T: Scalar>(g: &Raster<T>, m: Option<&Raster<T>>, pan: Option<&Plane<T>>, s: &CorrMap<T>) -> Result<()> {
    if let Some(m) = m {
        g.check_shape(m)?;
    }
    if let Some(pan) = pan {
        if pan.dims() != g.dims() {
            return Err(dims_mismatch(g.dims(), pan.dims()));
        }
    }
    if s.dims() != g.dims() {
        return Err(dims_mismatch(g.dims(), s.dims()));
    }
    Ok(())
}

fn weights<T: Scalar>(s: &CorrMap<T>, cfg: &LossConfig) -> Vec<f64> {
    if cfg.use_corr_map {
        s.plane().to_f64_vec()
    } else {
        vec![1.0; s.plane().len()]
    }
}

fn spectral_terms<T: Scalar>(g: &Raster<T>, m: &Raster<T>, s: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; s.len()];
    for (gb, mb) in g.bands().iter().zip(m.bands()) {
        for (i, (gv, mv)) in gb.as_slice().iter().zip(mb.as_slice()).enumerate() {
            out[i] += (gv.widen() - mv.widen()).abs() * s[i];
        }
    }
    out
}

/// Gray of `g` in `f64`, band sums in band order.
fn gray_f64<T: Scalar>(g: &Raster<T>) -> Vec<f64> {
    let mut acc = g.band(0).to_f64_vec();
    for band in &g.bands()[1..] {
        for (a, v) in acc.iter_mut().zip(band.as_slice()) {
            *a += v.widen();
        }
    }
    let n = g.num_bands() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Forward intermediates of the grad map, kept for the adjoint.
struct GradMapTape {
    mean: Vec<f64>,
    var: Vec<f64>,
    std: Vec<f64>,
    q: Vec<f64>,
}

fn grad_map_tape(x: &[f64], w: usize, h: usize, cfg: &StatConfig) -> GradMapTape {
    let mean = kernel::box_mean(x, w, h, cfg.window);
    let var = kernel::cov(x, x, w, h, cfg.window);
    let std: Vec<f64> = var.iter().map(|&v| kernel::stabilized_std(v, cfg.eps)).collect();
    let q = x
        .iter()
        .zip(mean.iter().zip(&std))
        .map(|(&v, (&mu, &sd))| (v - mu) / sd)
        .collect();
    GradMapTape { mean, var, std, q }
}

/// Adjoint of the grad map at `x`: returns `J^T u`.
fn grad_map_adjoint(x: &[f64], tape: &GradMapTape, u: &[f64], w: usize, h: usize, cfg: &StatConfig) -> Vec<f64> {
    let n = x.len();
    let mut dx = vec![0.0; n];
    let mut d_mean = vec![0.0; n];
    let mut d_var = vec![0.0; n];
    for i in 0..n {
        let sd = tape.std[i];
        dx[i] = u[i] / sd;
        let d_std = -u[i] * tape.q[i] / sd;
        d_var[i] = d_std * sign0(tape.var[i]) / (2.0 * sd);
        // var = m(x^2) - m(x)^2
        d_mean[i] = -u[i] / sd - 2.0 * tape.mean[i] * d_var[i];
    }
    let back_mean = kernel::box_mean_adjoint(&d_mean, w, h, cfg.window);
    let back_sq = kernel::box_mean_adjoint(&d_var, w, h, cfg.window);
    for i in 0..n {
        dx[i] += back_mean[i] + 2.0 * x[i] * back_sq[i];
    }
    dx
}

fn spatial_terms(q_g: &[f64], q_p: &[f64], s: &[f64]) -> Vec<f64> {
    q_g.iter()
        .zip(q_p)
        .zip(s)
        .map(|((a, b), sv)| (a - b).abs() * (2.0 - sv))
        .collect()
}

fn sum_ordered(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc + x)
}

/// Correlation-weighted L1 distance between `g` and the MS target.
pub fn spectral_loss<T: Scalar>(g: &Raster<T>, m_target: &Raster<T>, s: &CorrMap<T>, cfg: &LossConfig) -> Result<T> {
    check_inputs(g, Some(m_target), None, s)?;
    Ok(T::lit(sum_ordered(&spectral_terms(g, m_target, &weights(s, cfg)))))
}

/// Windowed standardization `(x - m(x)) / std(x)`.
pub fn grad_map<T: Scalar>(x: &Plane<T>, cfg: &StatConfig) -> Plane<T> {
    let (w, h) = x.dims();
    Plane::from_f64(w, h, &grad_map_tape(&x.to_f64_vec(), w, h, cfg).q)
}

/// L1 distance between the grad maps of `gray(g)` and `pan`, weighted by `2 - S`.
pub fn spatial_loss<T: Scalar>(g: &Raster<T>, pan: &Plane<T>, s: &CorrMap<T>, cfg: &LossConfig) -> Result<T> {
    check_inputs(g, None, Some(pan), s)?;
    let (w, h) = g.dims();
    let q_g = grad_map_tape(&gray_f64(g), w, h, &cfg.stat).q;
    let q_p = grad_map_tape(&pan.to_f64_vec(), w, h, &cfg.stat).q;
    Ok(T::lit(sum_ordered(&spatial_terms(&q_g, &q_p, &weights(s, cfg)))))
}

/// Full loss, without per-pixel planes.
pub fn s3_loss<T: Scalar>(
    g: &Raster<T>,
    m_target: &Raster<T>,
    pan: &Plane<T>,
    s: &CorrMap<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown<T>> {
    let mut out = s3_loss_with_contributions(g, m_target, pan, s, cfg)?;
    out.contributions = None;
    Ok(out)
}

pub fn s3_loss_with_contributions<T: Scalar>(
    g: &Raster<T>,
    m_target: &Raster<T>,
    pan: &Plane<T>,
    s: &CorrMap<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown<T>> {
    cfg.validate()?;
    check_inputs(g, Some(m_target), Some(pan), s)?;
    let (w, h) = g.dims();
    let sw = weights(s, cfg);
    let spectral = spectral_terms(g, m_target, &sw);
    let q_g = grad_map_tape(&gray_f64(g), w, h, &cfg.stat).q;
    let q_p = grad_map_tape(&pan.to_f64_vec(), w, h, &cfg.stat).q;
    let spatial = spatial_terms(&q_g, &q_p, &sw);
    let l_c = T::lit(sum_ordered(&spectral));
    let l_a = T::lit(sum_ordered(&spatial));
    Ok(LossBreakdown {
        l_c,
        l_a,
        l_s3: l_c + T::lit(cfg.w_a) * l_a,
        contributions: Some(Contributions {
            spectral: Plane::from_f64(w, h, &spectral),
            spatial: Plane::from_f64(w, h, &spatial),
        }),
    })
}

/// Analytic `dL_S3 / dG` using `sign(0) = 0` at every absolute value.
pub fn s3_loss_grad<T: Scalar>(
    g: &Raster<T>,
    m_target: &Raster<T>,
    pan: &Plane<T>,
    s: &CorrMap<T>,
    cfg: &LossConfig,
) -> Result<LossGrad<T>> {
    cfg.validate()?;
    check_inputs(g, Some(m_target), Some(pan), s)?;
    let (w, h) = g.dims();
    let sw = weights(s, cfg);

    let d_gray = if cfg.w_a > 0.0 {
        let gray = gray_f64(g);
        let tape = grad_map_tape(&gray, w, h, &cfg.stat);
        let q_p = grad_map_tape(&pan.to_f64_vec(), w, h, &cfg.stat).q;
        let u: Vec<f64> = tape
            .q
            .iter()
            .zip(&q_p)
            .zip(&sw)
            .map(|((a, b), sv)| cfg.w_a * (2.0 - sv) * sign0(a - b))
            .collect();
        let mut d = grad_map_adjoint(&gray, &tape, &u, w, h, &cfg.stat);
        let n = g.num_bands() as f64;
        d.iter_mut().for_each(|v| *v /= n);
        Some(d)
    } else {
        None
    };

    let bands = g
        .bands()
        .iter()
        .zip(m_target.bands())
        .map(|(gb, mb)| {
            let d: Vec<f64> = gb
                .as_slice()
                .iter()
                .zip(mb.as_slice())
                .enumerate()
                .map(|(i, (gv, mv))| {
                    let spectral = sign0(gv.widen() - mv.widen()) * sw[i];
                    match &d_gray {
                        Some(dg) => spectral + dg[i],
                        None => spectral,
                    }
                })
                .collect();
            Plane::from_f64(w, h, &d)
        })
        .collect();
    Ok(LossGrad {
        d_g: Raster::new(bands, g.level())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrmap::corr_map;
    use crate::raster::gray;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_raster(w: usize, h: usize, bands: usize, seed: u64) -> Raster<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planes = (0..bands)
            .map(|_| Plane::from_fn(w, h, |_, _| rng.gen::<f64>()))
            .collect();
        Raster::new(planes, 1).unwrap()
    }

    fn small_cfg() -> LossConfig {
        LossConfig::default().with_stat(StatConfig::new(5, 1e-10).unwrap())
    }

    #[test]
    fn spectral_loss_cases() {
        let g = random_raster(8, 8, 3, 1);
        let s = CorrMap::from_plane(Plane::filled(8, 8, 0.3)).unwrap();
        let cfg = LossConfig::default();
        assert_eq!(spectral_loss(&g, &g, &s, &cfg).unwrap(), 0.0);

        let m = random_raster(8, 8, 3, 2);
        let zero = CorrMap::from_plane(Plane::zeros(8, 8)).unwrap();
        assert_eq!(spectral_loss(&g, &m, &zero, &cfg).unwrap(), 0.0);

        let one = |v: f64| Raster::from_plane(Plane::new(1, 1, vec![v]).unwrap(), 1);
        let half = CorrMap::from_plane(Plane::filled(1, 1, 0.5)).unwrap();
        let l = spectral_loss(&one(0.7), &one(0.2), &half, &cfg).unwrap();
        assert!((l - 0.25).abs() < 1e-15);
    }

    #[test]
    fn grad_map_of_constant_is_zero() {
        let c = Plane::filled(9, 9, 0.42f64);
        assert!(grad_map(&c, &StatConfig::default()).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_loss_vanishes_for_matching_structure() {
        let pan = random_raster(12, 12, 1, 5).into_bands().remove(0);
        let s = CorrMap::ones(12, 12);
        let g = Raster::from_plane(pan.clone(), 1);
        assert_eq!(spatial_loss(&g, &pan, &s, &small_cfg()).unwrap(), 0.0);
        // three copies gray back to pan up to rounding
        let g = Raster::new(vec![pan.clone(), pan.clone(), pan.clone()], 1).unwrap();
        assert!(spatial_loss(&g, &pan, &s, &small_cfg()).unwrap() < 1e-9);
    }

    #[test]
    fn spatial_loss_is_affine_invariant() {
        let pan = random_raster(24, 24, 1, 6).into_bands().remove(0);
        let g = Raster::from_plane(pan.map(|v| 2.0 * v + 0.1), 1);
        let s = CorrMap::from_plane(Plane::filled(24, 24, 0.5)).unwrap();
        let l = spatial_loss(&g, &pan, &s, &small_cfg()).unwrap();
        assert!(l <= 1e-3, "{l}");
    }

    #[test]
    fn spatial_weight_is_two_minus_s() {
        // one pixel: grad maps are zero, so inject the difference through
        // the contribution formula directly
        assert!((spatial_terms(&[0.3], &[0.0], &[0.5])[0] - 0.45).abs() < 1e-15);
    }

    #[test]
    fn breakdown_identities() {
        let g = random_raster(16, 16, 3, 7);
        let m = random_raster(16, 16, 3, 8);
        let pan = random_raster(16, 16, 1, 9).into_bands().remove(0);
        let s = corr_map(&m, &pan, &small_cfg().corr).unwrap();
        for w_a in [0.0, 1.0, 2.0] {
            let cfg = LossConfig { w_a, ..small_cfg() };
            let b = s3_loss(&g, &m, &pan, &s, &cfg).unwrap();
            assert_eq!(b.l_s3, b.l_c + w_a * b.l_a);
            assert_eq!(b.l_c, spectral_loss(&g, &m, &s, &cfg).unwrap());
            assert_eq!(b.l_a, spatial_loss(&g, &pan, &s, &cfg).unwrap());
        }
        let b = s3_loss(&g, &m, &pan, &s, &LossConfig { w_a: 0.0, ..small_cfg() }).unwrap();
        assert_eq!(b.l_s3, b.l_c);
    }

    #[test]
    fn ideal_output_has_zero_loss_and_gradient() {
        let m = random_raster(16, 16, 3, 10);
        let pan = gray(&m);
        let s = corr_map(&m, &pan, &small_cfg().corr).unwrap();
        let b = s3_loss(&m, &m, &pan, &s, &small_cfg()).unwrap();
        assert_eq!((b.l_c, b.l_a, b.l_s3), (0.0, 0.0, 0.0));
        let d = s3_loss_grad(&m, &m, &pan, &s, &small_cfg()).unwrap();
        assert!(d.d_g.bands().iter().all(|p| p.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn spectral_only_gradient_is_sign_times_s() {
        let g = random_raster(10, 10, 3, 11);
        let m = random_raster(10, 10, 3, 12);
        let pan = random_raster(10, 10, 1, 13).into_bands().remove(0);
        let s = corr_map(&m, &pan, &small_cfg().corr).unwrap();
        let cfg = LossConfig { w_a: 0.0, ..small_cfg() };
        let d = s3_loss_grad(&g, &m, &pan, &s, &cfg).unwrap();
        for b in 0..3 {
            for i in 0..100 {
                let expect = (g.band(b).as_slice()[i] - m.band(b).as_slice()[i]).signum()
                    * s.plane().as_slice()[i];
                assert_eq!(d.d_g.band(b).as_slice()[i], expect);
            }
        }
    }

    #[test]
    fn ablation_matches_explicit_ones() {
        let g = random_raster(16, 16, 3, 14);
        let m = random_raster(16, 16, 3, 15);
        let pan = random_raster(16, 16, 1, 16).into_bands().remove(0);
        let s = corr_map(&m, &pan, &small_cfg().corr).unwrap();
        let off = LossConfig { use_corr_map: false, ..small_cfg() };
        let a = s3_loss_with_contributions(&g, &m, &pan, &s, &off).unwrap();
        let b = s3_loss_with_contributions(&g, &m, &pan, &CorrMap::ones(16, 16), &small_cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            s3_loss_grad(&g, &m, &pan, &s, &off).unwrap(),
            s3_loss_grad(&g, &m, &pan, &CorrMap::ones(16, 16), &small_cfg()).unwrap()
        );
    }

    #[test]
    fn shape_errors() {
        let g = random_raster(8, 8, 3, 1);
        let m = random_raster(8, 8, 2, 2);
        let pan = Plane::zeros(8, 7);
        let s = CorrMap::ones(8, 8);
        let cfg = LossConfig::default();
        assert!(spectral_loss(&g, &m, &s, &cfg).is_err());
        assert!(spatial_loss(&g, &pan, &s, &cfg).is_err());
        assert!(spectral_loss(&g, &g, &CorrMap::ones(7, 8), &cfg).is_err());
        assert!(s3_loss(&g, &g, &Plane::zeros(8, 8), &s, &LossConfig { w_a: -1.0, ..cfg }).is_err());
    }

    #[test]
    fn grad_map_adjoint_matches_jacobian_vector_products() {
        let (w, h) = (9, 7);
        let cfg = StatConfig::new(5, 1e-10).unwrap();
        let x = random_raster(w, h, 1, 20).band(0).to_f64_vec();
        let u = random_raster(w, h, 1, 21).band(0).to_f64_vec();
        let v = random_raster(w, h, 1, 22).band(0).to_f64_vec();
        let tape = grad_map_tape(&x, w, h, &cfg);
        let jt_u = grad_map_adjoint(&x, &tape, &u, w, h, &cfg);
        // directional derivative along v by central differences
        let step = 1e-6;
        let shifted = |sgn: f64| {
            let xs: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + sgn * step * b).collect();
            grad_map_tape(&xs, w, h, &cfg).q
        };
        let (qp, qm) = (shifted(1.0), shifted(-1.0));
        let jv_u: f64 = (0..x.len()).map(|i| (qp[i] - qm[i]) / (2.0 * step) * u[i]).sum();
        let v_jt_u: f64 = v.iter().zip(&jt_u).map(|(a, b)| a * b).sum();
        assert!((jv_u - v_jt_u).abs() < 1e-6 * jv_u.abs().max(1.0), "{jv_u} vs {v_jt_u}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn smaller_map_never_increases_spectral_or_shrinks_spatial_weight(seed in any::<u64>(), shrink in 0.0f64..1.0) {
            let g = random_raster(12, 12, 3, seed);
            let m = random_raster(12, 12, 3, seed ^ 1);
            let pan = random_raster(12, 12, 1, seed ^ 2).into_bands().remove(0);
            let cfg = small_cfg();
            let s = corr_map(&m, &pan, &cfg.corr).unwrap();
            let s_small = CorrMap::from_plane(s.plane().map(|v| v * shrink)).unwrap();
            let a = s3_loss_with_contributions(&g, &m, &pan, &s, &cfg).unwrap().contributions.unwrap();
            let b = s3_loss_with_contributions(&g, &m, &pan, &s_small, &cfg).unwrap().contributions.unwrap();
            for i in 0..144 {
                prop_assert!(b.spectral.as_slice()[i] <= a.spectral.as_slice()[i]);
                prop_assert!(b.spatial.as_slice()[i] >= a.spatial.as_slice()[i]);
            }
        }

        #[test]
        fn losses_are_nonnegative(seed in any::<u64>(), w_a in 0.0f64..3.0) {
            let g = random_raster(10, 10, 2, seed);
            let m = random_raster(10, 10, 2, seed ^ 5);
            let pan = random_raster(10, 10, 1, seed ^ 6).into_bands().remove(0);
            let cfg = LossConfig { w_a, ..small_cfg() };
            let s = corr_map(&m, &pan, &cfg.corr).unwrap();
            let b = s3_loss(&g, &m, &pan, &s, &cfg).unwrap();
            prop_assert!(b.l_c >= 0.0 && b.l_a >= 0.0);
            prop_assert_eq!(b.l_s3, b.l_c + w_a * b.l_a);
        }
    }
}
