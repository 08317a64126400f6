//! Two-scale protocol: degradation between resolution levels, bicubic
//! upsampling, training-pair construction and synthetic misaligned scenes.
//!
//! Degradation is a separable Gaussian low-pass with `sigma = scale / 2`,
//! radius `ceil(3 sigma)`, half-sample symmetric borders, followed by keeping
//! every `scale`-th sample starting at the top-left pixel. Level-1 pixel `i`
//! therefore sits on level-0 pixel `scale * i`, and [`upsample`] uses the
//! same phase so that `degrade(upsample(x))` stays close to `x`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dims_mismatch, Error, Result};
use crate::raster::{gray, Plane, Raster};
use crate::scalar::Scalar;

pub const DEFAULT_SCALE: usize = 4;

/// Half-width of the degradation kernel.
pub fn kernel_radius(scale: usize) -> usize {
    (3.0 * scale as f64 / 2.0).ceil() as usize
}

/// Normalized Gaussian taps for `scale`, length `2 * radius + 1`.
pub fn gaussian_kernel(scale: usize) -> Vec<f64> {
    let sigma = scale as f64 / 2.0;
    let r = kernel_radius(scale) as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

fn check_scale(scale: usize) -> Result<()> {
    if scale < 2 {
        return Err(Error::InvalidInput(format!("scale must be at least 2, got {scale}")));
    }
    Ok(())
}

/// Low-pass and decimate one plane by `scale`.
pub fn degrade_plane<T: Scalar>(x: &Plane<T>, scale: usize) -> Result<Plane<T>> {
    check_scale(scale)?;
    let (w, h) = x.dims();
    if w % scale != 0 || h % scale != 0 {
        return Err(Error::InvalidInput(format!(
            "dimensions {w}x{h} are not divisible by scale {scale}"
        )));
    }
    let (ow, oh) = (w / scale, h / scale);
    let taps = gaussian_kernel(scale);
    let r = kernel_radius(scale) as isize;
    let src = x.as_slice();

    // horizontal pass, only at the kept columns
    let mut rows = vec![0.0f64; h * ow];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for j in 0..ow {
            let c = (j * scale) as isize;
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * line[reflect(c + k as isize - r, w)].widen();
            }
            rows[y * ow + j] = acc;
        }
    }
    let mut out = vec![0.0f64; ow * oh];
    for i in 0..oh {
        let c = (i * scale) as isize;
        for (k, t) in taps.iter().enumerate() {
            let row = reflect(c + k as isize - r, h) * ow;
            for j in 0..ow {
                out[i * ow + j] += t * rows[row + j];
            }
        }
    }
    Ok(Plane::from_f64(ow, oh, &out))
}

/// Degrades every band and moves the raster one level down in resolution.
pub fn degrade<T: Scalar>(x: &Raster<T>, scale: usize) -> Result<Raster<T>> {
    let out = x.try_map_bands(|b| degrade_plane(b, scale))?;
    Ok(out.with_level(x.level().saturating_add(1)))
}

#[inline]
fn catmull_rom(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t < 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps (clamped indices and weights) for each output coordinate.
fn upsample_taps(len: usize, scale: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..len * scale)
        .map(|o| {
            let base = o / scale;
            let frac = (o % scale) as f64 / scale as f64;
            let mut idx = [0usize; 4];
            let mut wts = [0.0f64; 4];
            for k in 0..4 {
                let i = base as isize + k as isize - 1;
                idx[k] = i.clamp(0, len as isize - 1) as usize;
                wts[k] = catmull_rom(frac - (k as f64 - 1.0));
            }
            (idx, wts)
        })
        .collect()
}

/// Catmull-Rom bicubic upsampling of one plane by `scale`.
pub fn upsample_plane<T: Scalar>(x: &Plane<T>, scale: usize) -> Result<Plane<T>> {
    check_scale(scale)?;
    let (w, h) = x.dims();
    let (ow, oh) = (w * scale, h * scale);
    let cols = upsample_taps(w, scale);
    let rows_taps = upsample_taps(h, scale);
    let src = x.as_slice();
    let mut tmp = vec![0.0f64; h * ow];
    for y in 0..h {
        for (ox, (idx, wts)) in cols.iter().enumerate() {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += wts[k] * src[y * w + idx[k]].widen();
            }
            tmp[y * ow + ox] = acc;
        }
    }
    let mut out = vec![0.0f64; ow * oh];
    for (oy, (idx, wts)) in rows_taps.iter().enumerate() {
        for k in 0..4 {
            let row = idx[k] * ow;
            for ox in 0..ow {
                out[oy * ow + ox] += wts[k] * tmp[row + ox];
            }
        }
    }
    Ok(Plane::from_f64(ow, oh, &out))
}

/// Bicubic upsampling of every band, one level up in resolution.
pub fn upsample<T: Scalar>(x: &Raster<T>, scale: usize) -> Result<Raster<T>> {
    let out = x.try_map_bands(|b| upsample_plane(b, scale))?;
    Ok(out.with_level(x.level().saturating_sub(1)))
}

/// A placed moving object: where it is in the PAN image and where the MS
/// image sees it, both as level-0 top-left corners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedMover {
    pub size: (usize, usize),
    pub pan_origin: (f64, f64),
    pub ms_origin: (f64, f64),
}

/// Ground truth retained by the scene generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTruth<T> {
    /// MS-vs-PAN offset in level-0 pixels.
    pub global_shift: (f64, f64),
    pub movers: Vec<PlacedMover>,
    /// The MS scene rendered at level 0 in PAN alignment; `gray` of it is `p0`.
    pub aligned_ms0: Raster<T>,
}

/// Co-registered rasters across resolution levels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair<T> {
    pub p0: Plane<T>,
    pub m1: Raster<T>,
    pub p1: Option<Plane<T>>,
    pub m2: Option<Raster<T>>,
    pub g1: Option<Raster<T>>,
    pub g0: Option<Raster<T>>,
    pub scale: usize,
    pub truth: Option<SceneTruth<T>>,
}

impl<T: Scalar> ScenePair<T> {
    pub fn new(p0: Plane<T>, m1: Raster<T>, scale: usize) -> Result<Self> {
        let sp = ScenePair {
            p0,
            m1,
            p1: None,
            m2: None,
            g1: None,
            g0: None,
            scale,
            truth: None,
        };
        sp.validate()?;
        Ok(sp)
    }

    /// Checks the dimension contracts between levels.
    pub fn validate(&self) -> Result<()> {
        check_scale(self.scale)?;
        let s = self.scale;
        let (pw, ph) = self.p0.dims();
        let m1 = self.m1.dims();
        if (pw, ph) != (m1.0 * s, m1.1 * s) {
            return Err(dims_mismatch((m1.0 * s, m1.1 * s), (pw, ph)));
        }
        if let Some(p1) = &self.p1 {
            if p1.dims() != m1 {
                return Err(dims_mismatch(m1, p1.dims()));
            }
        }
        if let Some(m2) = &self.m2 {
            if (m2.width() * s, m2.height() * s) != m1 || m2.num_bands() != self.m1.num_bands() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{}x{}x{}", m1.0 / s, m1.1 / s, self.m1.num_bands()),
                    found: crate::raster::shape_string(m2),
                });
            }
        }
        if let Some(g1) = &self.g1 {
            self.m1.check_shape(g1)?;
        }
        if let Some(g0) = &self.g0 {
            if g0.dims() != (pw, ph) || g0.num_bands() != self.m1.num_bands() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{pw}x{ph}x{}", self.m1.num_bands()),
                    found: crate::raster::shape_string(g0),
                });
            }
        }
        Ok(())
    }

    pub fn with_g0(mut self, g0: Raster<T>) -> Result<Self> {
        self.g0 = Some(g0);
        self.validate()?;
        Ok(self)
    }

    /// `p1`, computing it from `p0` when absent.
    pub fn p1_or_degrade(&self) -> Result<Plane<T>> {
        match &self.p1 {
            Some(p1) => Ok(p1.clone()),
            None => degrade_plane(&self.p0, self.scale),
        }
    }
}

/// Fills `p1 = degrade(p0)` and `m2 = degrade(m1)`; `m1` stays the target.
pub fn make_training_pair<T: Scalar>(sp: &ScenePair<T>) -> Result<ScenePair<T>> {
    sp.validate()?;
    let mut out = sp.clone();
    out.p1 = Some(degrade_plane(&sp.p0, sp.scale)?);
    out.m2 = Some(degrade(&sp.m1, sp.scale)?.with_level(2));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoverSpec {
    /// Width and height in level-0 pixels.
    pub size: (usize, usize),
    /// Extra MS-vs-PAN displacement of this object in level-0 pixels.
    pub displacement: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Level-1 width and height.
    pub size: (usize, usize),
    pub scale: usize,
    /// Offset of the whole MS scene relative to PAN, in level-0 pixels.
    pub global_shift: (f64, f64),
    pub movers: Vec<MoverSpec>,
    pub seed: u64,
    /// Per-band gain applied to the background texture; one entry per band.
    pub band_gains: Vec<f64>,
    /// Statistics window the scene has to accommodate; the level-1 size
    /// must be at least four windows.
    pub window: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: (128, 128),
            scale: DEFAULT_SCALE,
            global_shift: (0.0, 0.0),
            movers: Vec::new(),
            seed: 0,
            band_gains: vec![0.92, 1.0, 1.08],
            window: crate::raster::StatConfig::DEFAULT_WINDOW,
        }
    }
}

impl SynthConfig {
    /// Misaligned benchmark scene: a seeded global shift of 3 to 6 level-0
    /// pixels per axis with random signs, plus four 24x16 movers displaced a
    /// further 1.5 to 3 pixels along x.
    pub fn misaligned_benchmark(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbe4c_4a11);
        let mut signed = |lo: f64, hi: f64| {
            let v: f64 = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                -v
            } else {
                v
            }
        };
        let global_shift = (signed(3.0, 6.0).round(), signed(3.0, 6.0).round());
        let movers = (0..4)
            .map(|_| MoverSpec {
                size: (24, 16),
                displacement: ((signed(3.0, 6.0).round() / 2.0), 0.0),
            })
            .collect();
        SynthConfig {
            seed,
            global_shift,
            movers,
            ..SynthConfig::default()
        }
    }

    /// The same scene family with every misalignment removed.
    pub fn aligned_benchmark(seed: u64) -> Self {
        let mut cfg = Self::misaligned_benchmark(seed);
        cfg.global_shift = (0.0, 0.0);
        cfg.movers.iter_mut().for_each(|m| m.displacement = (0.0, 0.0));
        cfg
    }
}

/// Largest misalignment, per axis, accepted by the generator.
pub const MAX_MISALIGNMENT: f64 = 8.0;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        check_scale(self.scale)?;
        let min = 4 * self.window;
        if self.size.0 < min || self.size.1 < min {
            return Err(Error::InvalidInput(format!(
                "scene size {}x{} is below four windows ({min})",
                self.size.0, self.size.1
            )));
        }
        let offsets = std::iter::once(self.global_shift).chain(self.movers.iter().map(|m| m.displacement));
        for (dx, dy) in offsets {
            if !(dx.abs() <= MAX_MISALIGNMENT && dy.abs() <= MAX_MISALIGNMENT) {
                return Err(Error::InvalidInput(format!(
                    "misalignment ({dx}, {dy}) exceeds {MAX_MISALIGNMENT} level-0 pixels"
                )));
            }
        }
        if self.band_gains.is_empty() || self.band_gains.iter().any(|g| !(*g > 0.0 && *g <= 1.25)) {
            return Err(Error::InvalidInput("band gains must be in (0, 1.25]".into()));
        }
        if self.movers.iter().any(|m| m.size.0 == 0 || m.size.1 == 0) {
            return Err(Error::InvalidInput("mover size must be nonzero".into()));
        }
        Ok(())
    }
}

/// Axis-aligned rectangle in continuous level-0 coordinates.
#[derive(Clone, Copy, Debug)]
struct Rect {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl Rect {
    #[inline]
    fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

struct Building {
    rect: Rect,
    color: Vec<f64>,
}

struct Road {
    rect: Rect,
    horizontal: bool,
}

/// Procedural scene: textured background, flat-roofed buildings with
/// textured roofs, flat roads and movers.
struct Scene {
    waves: Vec<Wave>,
    buildings: Vec<Building>,
    roads: Vec<Road>,
    road_color: Vec<f64>,
    gains: Vec<f64>,
}

impl Scene {
    const BASE: f64 = 0.42;

    fn generate(rng: &mut ChaCha8Rng, width: f64, height: f64, gains: &[f64]) -> Self {
        let bands = gains.len();
        let waves = (0..6)
            .map(|_| {
                let cycles_x = rng.gen_range(-24.0..24.0f64).round();
                let cycles_y = rng.gen_range(2.0..24.0f64).round();
                Wave {
                    fx: cycles_x / width,
                    fy: cycles_y / height,
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    amp: rng.gen_range(0.02..0.06),
                }
            })
            .collect();
        let tint = |rng: &mut ChaCha8Rng, spread: f64| -> Vec<f64> {
            (0..bands).map(|_| 1.0 + rng.gen_range(-spread..spread)).collect()
        };
        let n_buildings = ((width * height) / 7000.0).round() as usize;
        let buildings = (0..n_buildings)
            .map(|_| {
                let w = rng.gen_range(20.0..90.0f64).round();
                let h = rng.gen_range(20.0..90.0f64).round();
                let x = rng.gen_range(0.0..width - w).round();
                let y = rng.gen_range(0.0..height - h).round();
                let lum = rng.gen_range(0.15..0.85);
                let t = tint(rng, 0.12);
                Building {
                    rect: Rect { x, y, w, h },
                    color: t.iter().map(|c| lum * c).collect(),
                }
            })
            .collect();
        let road_w = 20.0;
        let mut roads = Vec::new();
        for horizontal in [true, false] {
            let extent = if horizontal { height } else { width };
            for k in 0..2 {
                let lo = extent * (0.15 + 0.45 * k as f64);
                let pos = rng.gen_range(lo..lo + extent * 0.25).round();
                let rect = if horizontal {
                    Rect { x: 0.0, y: pos, w: width, h: road_w }
                } else {
                    Rect { x: pos, y: 0.0, w: road_w, h: height }
                };
                roads.push(Road { rect, horizontal });
            }
        }
        let road_lum = rng.gen_range(0.25..0.35);
        let road_color = tint(rng, 0.03).iter().map(|c| road_lum * c).collect();
        Scene {
            waves,
            buildings,
            roads,
            road_color,
            gains: gains.to_vec(),
        }
    }

    fn texture(&self, x: f64, y: f64) -> f64 {
        let mut t = Self::BASE;
        for w in &self.waves {
            t += w.amp * (std::f64::consts::TAU * (w.fx * x + w.fy * y) + w.phase).sin();
        }
        t
    }

    /// Static layers at a level-0 point, written into `out` (one per band).
    fn sample(&self, x: f64, y: f64, out: &mut [f64]) {
        let tex = self.texture(x, y);
        if self.roads.iter().any(|r| r.rect.contains(x, y)) {
            out.copy_from_slice(&self.road_color);
            return;
        }
        if let Some(b) = self.buildings.iter().rev().find(|b| b.rect.contains(x, y)) {
            for (o, c) in out.iter_mut().zip(&b.color) {
                *o = c + 0.5 * (tex - Self::BASE);
            }
            return;
        }
        for (o, g) in out.iter_mut().zip(&self.gains) {
            *o = g * tex;
        }
    }
}

struct Vehicle {
    size: (usize, usize),
    pan: Rect,
    ms: Rect,
    color: Vec<f64>,
}

fn place_movers(
    rng: &mut ChaCha8Rng,
    scene: &Scene,
    cfg: &SynthConfig,
    width: f64,
    height: f64,
) -> Result<Vec<Vehicle>> {
    let (sx, sy) = cfg.global_shift;
    cfg.movers
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let (w, h) = (spec.size.0 as f64, spec.size.1 as f64);
            let (dx, dy) = (sx + spec.displacement.0, sy + spec.displacement.1);
            // both the PAN and MS footprints must stay on the canvas
            let x_lo = 0f64.max(-dx);
            let x_hi = (width - w).min(width - w - dx);
            let y_lo = 0f64.max(-dy);
            let y_hi = (height - h).min(height - h - dy);
            if x_hi < x_lo || y_hi < y_lo {
                return Err(Error::InvalidInput(format!(
                    "mover {i} of size {}x{} with offset ({dx}, {dy}) does not fit the canvas",
                    spec.size.0, spec.size.1
                )));
            }
            let road = &scene.roads[i % scene.roads.len()];
            let clamp = |v: f64, lo: f64, hi: f64| v.max(lo).min(hi);
            let (x, y) = if road.horizontal {
                let y = road.rect.y + (road.rect.h - h) / 2.0;
                (rng.gen_range(x_lo..=x_hi).round(), clamp(y.round(), y_lo, y_hi))
            } else {
                let x = road.rect.x + (road.rect.w - w) / 2.0;
                (clamp(x.round(), x_lo, x_hi), rng.gen_range(y_lo..=y_hi).round())
            };
            let lum = if rng.gen_bool(0.5) { rng.gen_range(0.75..0.95) } else { rng.gen_range(0.03..0.12) };
            let color = (0..cfg.band_gains.len())
                .map(|_| (lum * (1.0 + rng.gen_range(-0.2..0.2f64))).min(1.0))
                .collect();
            Ok(Vehicle {
                size: spec.size,
                pan: Rect { x, y, w, h },
                ms: Rect { x: x + dx, y: y + dy, w, h },
                color,
            })
        })
        .collect()
}

/// Renders the scene at level 0. `shift` offsets the static layers and
/// `pick` chooses which vehicle footprint to draw.
fn render<T: Scalar>(
    scene: &Scene,
    vehicles: &[Vehicle],
    width: usize,
    height: usize,
    shift: (f64, f64),
    pick: impl Fn(&Vehicle) -> Rect,
) -> Raster<T> {
    let bands = scene.gains.len();
    let mut planes = vec![Vec::with_capacity(width * height); bands];
    let mut px = vec![0.0; bands];
    for y in 0..height {
        for x in 0..width {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            match vehicles.iter().rev().find(|v| pick(v).contains(cx, cy)) {
                Some(v) => px.copy_from_slice(&v.color),
                None => scene.sample(cx - shift.0, cy - shift.1, &mut px),
            }
            for (plane, v) in planes.iter_mut().zip(&px) {
                plane.push(T::lit(v.clamp(0.0, 1.0)));
            }
        }
    }
    let planes = planes
        .into_iter()
        .map(|p| Plane::from_vec_unchecked(width, height, p))
        .collect();
    Raster::new(planes, 0).expect("bands share dimensions")
}

/// Generates a seeded scene pair with planted misalignment.
///
/// `p0` is the gray of the PAN-aligned level-0 scene. `m1` is the same scene
/// with its static content moved by `global_shift`, each mover moved further
/// by its displacement, then degraded to level 1.
pub fn synth_scene<T: Scalar>(cfg: &SynthConfig) -> Result<ScenePair<T>> {
    cfg.validate()?;
    let (w0, h0) = (cfg.size.0 * cfg.scale, cfg.size.1 * cfg.scale);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scene = Scene::generate(&mut rng, w0 as f64, h0 as f64, &cfg.band_gains);
    let vehicles = place_movers(&mut rng, &scene, cfg, w0 as f64, h0 as f64)?;

    let aligned: Raster<T> = render(&scene, &vehicles, w0, h0, (0.0, 0.0), |v| v.pan);
    let shifted: Raster<T> = render(&scene, &vehicles, w0, h0, cfg.global_shift, |v| v.ms);
    let p0 = gray(&aligned);
    let m1 = degrade(&shifted, cfg.scale)?;
    let mut sp = ScenePair::new(p0, m1, cfg.scale)?;
    sp.truth = Some(SceneTruth {
        global_shift: cfg.global_shift,
        movers: vehicles
            .iter()
            .map(|v| PlacedMover {
                size: v.size,
                pan_origin: (v.pan.x, v.pan.y),
                ms_origin: (v.ms.x, v.ms.y),
            })
            .collect(),
        aligned_ms0: aligned,
    });
    Ok(sp)
}
