//! Raster file formats.
//!
//! The raw format stores little-endian `f32` samples band after band in a
//! `.raw` file next to a `.hdr` text sidecar:
//!
//! ```text
//! # s3sharp raster
//! format=f32le-planar
//! width=128
//! height=128
//! bands=3
//! level=1
//! bit_depth=none
//! ```
//!
//! Blank lines and `#` comments are ignored; unknown keys are rejected.
//! `bit_depth` is `none` for normalized data, or the depth of raw integer
//! counts. PNG files carry 16-bit (or 8-bit) gray, RGB or RGBA samples as raw
//! counts. All writes go to a temporary file that is renamed into place.
//!
//! A scene directory holds one raw raster per stage (`p0`, `m1`, `p1`, `m2`,
//! and `g0`, `g1`, `aligned_ms0` when present) plus a `scene.json` manifest
//! recording the scale, the file names and, for synthetic scenes, the
//! generator config and planted misalignment.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Luma, Rgb, Rgba};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Level, Plane, Raster};
use crate::scalar::Scalar;
use crate::scalepipe::{PlacedMover, SceneTruth, ScenePair, SynthConfig};

const RAW_FORMAT_TAG: &str = "f32le-planar";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RasterFormat {
    RawF32,
    Png,
}

impl RasterFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("raw") | Some("hdr") => Ok(RasterFormat::RawF32),
            Some("png") => Ok(RasterFormat::Png),
            _ => Err(Error::UnknownFormat(path.to_path_buf())),
        }
    }
}

/// Data and header paths of a raw raster, whichever of the two was given.
pub fn raw_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("raw"), path.with_extension("hdr"))
}

pub fn load_raster<T: Scalar>(path: &Path, format: RasterFormat) -> Result<Raster<T>> {
    match format {
        RasterFormat::RawF32 => load_raw(path),
        RasterFormat::Png => load_png(path),
    }
}

pub fn save_raster<T: Scalar>(raster: &Raster<T>, path: &Path, format: RasterFormat) -> Result<()> {
    match format {
        RasterFormat::RawF32 => save_raw(raster, path),
        RasterFormat::Png => save_png(raster, path),
    }
}

/// Loads a raster, picking the format from the file extension.
pub fn load<T: Scalar>(path: &Path) -> Result<Raster<T>> {
    load_raster(path, RasterFormat::from_path(path)?)
}

pub fn save<T: Scalar>(raster: &Raster<T>, path: &Path) -> Result<()> {
    save_raster(raster, path, RasterFormat::from_path(path)?)
}

/// Loads a single-band raster as a plane.
pub fn load_plane<T: Scalar>(path: &Path) -> Result<Plane<T>> {
    let r = load::<T>(path)?;
    if r.num_bands() != 1 {
        return Err(Error::format(
            path,
            format!("expected a single band, found {}", r.num_bands()),
        ));
    }
    Ok(r.into_bands().remove(0))
}

pub fn save_plane<T: Scalar>(plane: &Plane<T>, level: Level, path: &Path) -> Result<()> {
    save(&Raster::from_plane(plane.clone(), level), path)
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[derive(Debug)]
struct RawHeader {
    width: usize,
    height: usize,
    bands: usize,
    level: Level,
    bit_depth: Option<u32>,
}

impl RawHeader {
    fn render(&self) -> String {
        format!(
            "# s3sharp raster\nformat={RAW_FORMAT_TAG}\nwidth={}\nheight={}\nbands={}\nlevel={}\nbit_depth={}\n",
            self.width,
            self.height,
            self.bands,
            self.level,
            self.bit_depth.map_or("none".to_string(), |d| d.to_string())
        )
    }

    fn parse(path: &Path, text: &str) -> Result<Self> {
        let (mut width, mut height, mut bands, mut level, mut bit_depth, mut format) =
            (None, None, None, None, None, None);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format(path, format!("line {}: expected key=value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::format(path, format!("line {}: invalid {what} `{value}`", lineno + 1));
            match key {
                "format" => format = Some(value.to_string()),
                "width" => width = Some(value.parse::<usize>().map_err(|_| bad(key))?),
                "height" => height = Some(value.parse::<usize>().map_err(|_| bad(key))?),
                "bands" => bands = Some(value.parse::<usize>().map_err(|_| bad(key))?),
                "level" => level = Some(value.parse::<Level>().map_err(|_| bad(key))?),
                "bit_depth" => {
                    bit_depth = Some(if value == "none" {
                        None
                    } else {
                        Some(value.parse::<u32>().map_err(|_| bad(key))?)
                    })
                }
                _ => return Err(Error::format(path, format!("unknown header key `{key}`"))),
            }
        }
        let missing = |k: &str| Error::format(path, format!("missing header key `{k}`"));
        match format.as_deref() {
            Some(RAW_FORMAT_TAG) => {}
            Some(other) => return Err(Error::format(path, format!("unsupported format `{other}`"))),
            None => return Err(missing("format")),
        }
        let header = RawHeader {
            width: width.ok_or_else(|| missing("width"))?,
            height: height.ok_or_else(|| missing("height"))?,
            bands: bands.ok_or_else(|| missing("bands"))?,
            level: level.ok_or_else(|| missing("level"))?,
            bit_depth: bit_depth.ok_or_else(|| missing("bit_depth"))?,
        };
        if header.width == 0 || header.height == 0 || header.bands == 0 {
            return Err(Error::format(path, "width, height and bands must be nonzero"));
        }
        Ok(header)
    }
}

fn load_raw<T: Scalar>(path: &Path) -> Result<Raster<T>> {
    let (data_path, hdr_path) = raw_paths(path);
    let text = fs::read_to_string(&hdr_path).map_err(|e| Error::io(&hdr_path, e))?;
    let header = RawHeader::parse(&hdr_path, &text)?;
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let plane_len = header.width * header.height;
    let expected = plane_len * header.bands * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            &data_path,
            format!("expected {expected} bytes for the declared header, found {}", bytes.len()),
        ));
    }
    let samples: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let bands = samples
        .chunks_exact(plane_len)
        .map(|chunk| {
            Plane::new(
                header.width,
                header.height,
                chunk.iter().map(|&v| T::lit(v as f64)).collect(),
            )
            .map_err(|e| Error::format(&data_path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Raster::new(bands, header.level)?.with_bit_depth(header.bit_depth))
}

fn save_raw<T: Scalar>(raster: &Raster<T>, path: &Path) -> Result<()> {
    let (data_path, hdr_path) = raw_paths(path);
    let header = RawHeader {
        width: raster.width(),
        height: raster.height(),
        bands: raster.num_bands(),
        level: raster.level(),
        bit_depth: raster.bit_depth(),
    };
    let mut bytes = Vec::with_capacity(header.width * header.height * header.bands * 4);
    for band in raster.bands() {
        for v in band.as_slice() {
            bytes.extend_from_slice(&(v.widen() as f32).to_le_bytes());
        }
    }
    write_atomic(&data_path, &bytes)?;
    write_atomic(&hdr_path, header.render().as_bytes())
}

fn load_png<T: Scalar>(path: &Path) -> Result<Raster<T>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (bit_depth, channels, samples): (u32, usize, Vec<f64>) = match img {
        image::DynamicImage::ImageLuma8(b) => (8, 1, b.into_raw().into_iter().map(f64::from).collect()),
        image::DynamicImage::ImageRgb8(b) => (8, 3, b.into_raw().into_iter().map(f64::from).collect()),
        image::DynamicImage::ImageRgba8(b) => (8, 4, b.into_raw().into_iter().map(f64::from).collect()),
        image::DynamicImage::ImageLuma16(b) => (16, 1, b.into_raw().into_iter().map(f64::from).collect()),
        image::DynamicImage::ImageRgb16(b) => (16, 3, b.into_raw().into_iter().map(f64::from).collect()),
        image::DynamicImage::ImageRgba16(b) => (16, 4, b.into_raw().into_iter().map(f64::from).collect()),
        other => {
            return Err(Error::format(
                path,
                format!("unsupported pixel layout {:?}", other.color()),
            ))
        }
    };
    let bands = (0..channels)
        .map(|c| {
            Plane::from_vec_unchecked(
                w,
                h,
                samples.iter().skip(c).step_by(channels).map(|&v| T::lit(v)).collect(),
            )
        })
        .collect();
    Ok(Raster::new(bands, 0)?.with_bit_depth(Some(bit_depth)))
}

/// Quantizes a raster to 16-bit counts. Rasters that already hold integer
/// counts are written as-is; normalized rasters are scaled by 65535.
fn to_u16_counts<T: Scalar>(raster: &Raster<T>, path: &Path) -> Result<Vec<Vec<u16>>> {
    let (scale, max) = match raster.bit_depth() {
        Some(d) if d <= 16 => (1.0, ((1u64 << d) - 1) as f64),
        Some(d) => return Err(Error::format(path, format!("cannot store {d}-bit data in PNG"))),
        None => (65535.0, 65535.0),
    };
    raster
        .bands()
        .iter()
        .enumerate()
        .map(|(b, plane)| {
            plane
                .as_slice()
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let c = (v.widen() * scale).round();
                    if !(0.0..=max).contains(&c) {
                        return Err(Error::SampleOutOfRange {
                            bit_depth: raster.bit_depth().unwrap_or(16),
                            band: b,
                            x: i % plane.width(),
                            y: i / plane.width(),
                            value: v.widen(),
                        });
                    }
                    Ok(c as u16)
                })
                .collect()
        })
        .collect()
}

fn save_png<T: Scalar>(raster: &Raster<T>, path: &Path) -> Result<()> {
    let counts = to_u16_counts(raster, path)?;
    let (w, h) = (raster.width() as u32, raster.height() as u32);
    let interleaved: Vec<u16> = (0..counts[0].len())
        .flat_map(|i| counts.iter().map(move |band| band[i]))
        .collect();
    let mut buf = Cursor::new(Vec::new());
    let encoded = match raster.num_bands() {
        1 => ImageBuffer::<Luma<u16>, _>::from_raw(w, h, interleaved).map(|b| b.write_to(&mut buf, ImageFormat::Png)),
        3 => ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, interleaved).map(|b| b.write_to(&mut buf, ImageFormat::Png)),
        4 => ImageBuffer::<Rgba<u16>, _>::from_raw(w, h, interleaved).map(|b| b.write_to(&mut buf, ImageFormat::Png)),
        n => {
            return Err(Error::format(
                path,
                format!("PNG holds 1, 3 or 4 bands, raster has {n}"),
            ))
        }
    };
    encoded
        .expect("buffer length matches dimensions")
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    write_atomic(path, &buf.into_inner())
}

/// Writes an 8-bit grayscale heatmap. Values are mapped linearly from
/// `range` (or the plane's own min/max) onto 0..=255.
pub fn save_heatmap<T: Scalar>(plane: &Plane<T>, path: &Path, range: Option<(f64, f64)>) -> Result<()> {
    let (lo, hi) = range.unwrap_or_else(|| {
        let (lo, hi) = plane.min_max();
        (lo.widen(), hi.widen())
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels: Vec<u8> = plane
        .as_slice()
        .iter()
        .map(|v| (((v.widen() - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = ImageBuffer::<Luma<u8>, _>::from_raw(plane.width() as u32, plane.height() as u32, pixels)
        .expect("buffer length matches dimensions");
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    write_atomic(path, &buf.into_inner())
}

/// File name of the manifest inside a scene directory.
pub const SCENE_MANIFEST: &str = "scene.json";
const SCENE_FORMAT_TAG: &str = "s3sharp-scene";

/// Ground truth recorded for generated scenes. The aligned level-0 MS image
/// is stored as a raster file listed under `aligned_ms0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub global_shift: (f64, f64),
    pub movers: Vec<PlacedMover>,
}

/// `scene.json`: scale, raster file names relative to the directory, and the
/// generator settings for synthetic scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub format: String,
    pub scale: usize,
    pub files: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthRecord>,
}

/// Writes every raster present in `sp` as `<name>.raw` plus the manifest.
pub fn save_scene<T: Scalar>(sp: &ScenePair<T>, dir: &Path, synth: Option<&SynthConfig>) -> Result<SceneManifest> {
    sp.validate()?;
    let mut files = BTreeMap::new();
    let mut put = |name: &str, raster: &Raster<T>| -> Result<()> {
        let file = format!("{name}.raw");
        save(raster, &dir.join(&file))?;
        files.insert(name.to_string(), file);
        Ok(())
    };
    put("p0", &Raster::from_plane(sp.p0.clone(), 0))?;
    put("m1", &sp.m1)?;
    if let Some(p1) = &sp.p1 {
        put("p1", &Raster::from_plane(p1.clone(), 1))?;
    }
    if let Some(m2) = &sp.m2 {
        put("m2", m2)?;
    }
    if let Some(g1) = &sp.g1 {
        put("g1", g1)?;
    }
    if let Some(g0) = &sp.g0 {
        put("g0", g0)?;
    }
    if let Some(t) = &sp.truth {
        put("aligned_ms0", &t.aligned_ms0)?;
    }
    let manifest = SceneManifest {
        format: SCENE_FORMAT_TAG.into(),
        scale: sp.scale,
        files,
        synth: synth.cloned(),
        truth: sp.truth.as_ref().map(|t| TruthRecord {
            global_shift: t.global_shift,
            movers: t.movers.clone(),
        }),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_atomic(&dir.join(SCENE_MANIFEST), text.as_bytes())?;
    Ok(manifest)
}

pub fn load_scene<T: Scalar>(dir: &Path) -> Result<(ScenePair<T>, SceneManifest)> {
    let mpath = dir.join(SCENE_MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: SceneManifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if manifest.format != SCENE_FORMAT_TAG {
        return Err(Error::format(&mpath, format!("unsupported format `{}`", manifest.format)));
    }
    let get = |name: &str| -> Result<Option<Raster<T>>> {
        manifest.files.get(name).map(|f| load::<T>(&dir.join(f))).transpose()
    };
    let single = |name: &str| -> Result<Option<Plane<T>>> {
        manifest.files.get(name).map(|f| load_plane::<T>(&dir.join(f))).transpose()
    };
    let p0 = single("p0")?.ok_or_else(|| Error::format(&mpath, "missing file entry `p0`"))?;
    let m1 = get("m1")?.ok_or_else(|| Error::format(&mpath, "missing file entry `m1`"))?;
    let mut sp = ScenePair::new(p0, m1, manifest.scale)?;
    sp.p1 = single("p1")?;
    sp.m2 = get("m2")?;
    sp.g1 = get("g1")?;
    sp.g0 = get("g0")?;
    if let (Some(t), Some(aligned)) = (&manifest.truth, get("aligned_ms0")?) {
        sp.truth = Some(SceneTruth {
            global_shift: t.global_shift,
            movers: t.movers.clone(),
            aligned_ms0: aligned,
        });
    }
    sp.validate()?;
    Ok((sp, manifest))
}
