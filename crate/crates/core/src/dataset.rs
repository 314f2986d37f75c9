//! Paired photo/attribute/portrait data: image I/O, JSON-lines manifests and
//! the procedural toy dataset.
//!
//! Images are `[3, H, W]` `f32` tensors in `[0, 1]`. Mapping to `[-1, 1]`
//! happens at augmentation time.
//!
//! Toy samples render a flat-shaded face on a background. The portrait shows
//! the sample's attributes; the photo shares the portrait's geometry but is
//! rendered from an independently drawn attribute set (`photo_attrs`), so a
//! generator cannot recover the portrait's attributes from the photo alone.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, ImageFormat, Rgb, RgbImage};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{AttributeSchema, AttributeSet};
use crate::seed::derive_seed;

/// Converts a decoded image to a `size × size` tensor (bilinear resampling).
pub fn preprocess(img: &DynamicImage, size: usize) -> Array3<f32> {
    let rgb = img.to_rgb8();
    let rgb = if rgb.width() as usize == size && rgb.height() as usize == size {
        rgb
    } else {
        image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle)
    };
    Array3::from_shape_fn((3, size, size), |(c, y, x)| rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0)
}

pub fn to_rgb_image(t: &Array3<f32>) -> RgbImage {
    let (_, h, w) = t.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (t[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn decode_png(bytes: &[u8], size: usize) -> Result<Array3<f32>> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    Ok(preprocess(&img, size))
}

pub fn encode_png(t: &Array3<f32>) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    to_rgb_image(t).write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn load_image(path: impl AsRef<Path>, size: usize) -> Result<Array3<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)?;
    Ok(preprocess(&img, size))
}

pub fn save_png(path: impl AsRef<Path>, t: &Array3<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_png(t)?).map_err(|e| Error::io(path, e))
}

/// Face placement shared by a photo and its portrait, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceGeometry {
    pub cx: f32,
    pub cy: f32,
    pub rx: f32,
    pub ry: f32,
}

impl FaceGeometry {
    fn ellipse(&self, x: f32, y: f32, cy: f32, sx: f32, sy: f32) -> bool {
        let dx = (x - self.cx) / (self.rx * sx);
        let dy = (y - cy) / (self.ry * sy);
        dx * dx + dy * dy <= 1.0
    }

    pub fn in_face(&self, x: f32, y: f32) -> bool {
        self.ellipse(x, y, self.cy, 1.0, 1.0)
    }

    pub fn in_hair(&self, x: f32, y: f32) -> bool {
        y < self.cy && !self.in_face(x, y) && self.ellipse(x, y, self.cy - 0.2 * self.ry, 1.25, 1.2)
    }

    pub fn in_background(&self, x: f32, y: f32) -> bool {
        !self.ellipse(x, y, self.cy, 1.5, 1.5)
    }

    fn mouth(&self) -> (f32, f32, f32) {
        (self.cy + 0.45 * self.ry, 0.4 * self.rx, 0.15 * self.ry)
    }

    /// Arc height at horizontal offset `dx`; positive `curve` bends the
    /// centre downwards (a smile).
    fn mouth_arc(&self, dx: f32, curve: f32) -> f32 {
        let (y0, half, amp) = self.mouth();
        let u = dx / half;
        y0 + curve * amp * (1.0 - u * u) - curve * amp * 0.5
    }

    pub fn in_mouth(&self, x: f32, y: f32, smile: bool) -> bool {
        let (_, half, _) = self.mouth();
        let dx = x - self.cx;
        let thickness = (0.07 * self.ry).max(1.0);
        dx.abs() <= half && (y - self.mouth_arc(dx, if smile { 1.0 } else { -1.0 })).abs() <= thickness
    }

    fn in_eye(&self, x: f32, y: f32) -> bool {
        let r = (0.1 * self.rx).max(1.0);
        let ey = self.cy - 0.15 * self.ry;
        [-1.0, 1.0].iter().any(|s| {
            let ex = self.cx + s * 0.4 * self.rx;
            (x - ex).powi(2) + (y - ey).powi(2) <= r * r
        })
    }
}

fn luminance(t: &Array3<f32>, y: usize, x: usize) -> f32 {
    0.299 * t[[0, y, x]] + 0.587 * t[[1, y, x]] + 0.114 * t[[2, y, x]]
}

fn region_mean(t: &Array3<f32>, keep: impl Fn(f32, f32) -> bool) -> Option<f32> {
    let (_, h, w) = t.dim();
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if keep(x as f32 + 0.5, y as f32 + 0.5) {
                sum += luminance(t, y, x);
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f32)
}

/// Mean luminance over the hair region.
pub fn hair_luminance(t: &Array3<f32>, g: &FaceGeometry) -> f32 {
    region_mean(t, |x, y| g.in_hair(x, y)).unwrap_or(f32::NAN)
}

/// Mean luminance over the background region.
pub fn background_luminance(t: &Array3<f32>, g: &FaceGeometry) -> f32 {
    region_mean(t, |x, y| g.in_background(x, y)).unwrap_or(f32::NAN)
}

/// Row of the darkness-weighted centre of the mouth band minus that of its
/// corners; positive for a smile.
pub fn mouth_curvature(t: &Array3<f32>, g: &FaceGeometry) -> f32 {
    let (y0, half, amp) = g.mouth();
    let (_, h, w) = t.dim();
    let y_lo = (y0 - 2.0 * amp - 2.0).floor().max(0.0) as usize;
    let y_hi = ((y0 + 2.0 * amp + 2.0).ceil() as usize).min(h);
    let skin = region_mean(t, |x, y| g.in_face(x, y) && (y - y0).abs() > 3.0 * amp + 2.0 && !g.in_eye(x, y))
        .unwrap_or(1.0);
    let band_row = |inner: f32, outer: f32| {
        let (mut wy, mut ws) = (0.0f32, 0.0f32);
        for y in y_lo..y_hi {
            for x in 0..w {
                let dx = ((x as f32 + 0.5) - g.cx).abs() / half;
                if dx >= inner && dx < outer {
                    let dark = (skin - luminance(t, y, x)).max(0.0);
                    wy += dark * (y as f32 + 0.5);
                    ws += dark;
                }
            }
        }
        if ws > 0.0 {
            wy / ws
        } else {
            f32::NAN
        }
    };
    band_row(0.0, 0.3) - band_row(0.6, 1.0)
}

pub const BLOND_MIN: f32 = 0.6;
pub const BLACK_MAX: f32 = 0.3;
pub const BRIGHT_MIN: f32 = 0.6;
pub const DARK_MAX: f32 = 0.4;

pub fn hair_verdict(lum: f32) -> Option<&'static str> {
    if lum > BLOND_MIN {
        Some("Blond")
    } else if lum < BLACK_MAX {
        Some("Black")
    } else {
        None
    }
}

pub fn background_verdict(lum: f32) -> Option<&'static str> {
    if lum > BRIGHT_MIN {
        Some("Bright")
    } else if lum < DARK_MAX {
        Some("Dark")
    } else {
        None
    }
}

/// Reads the toy attributes back from pixels; types whose pixels fall
/// between the oracle thresholds are left out.
pub fn read_toy_attributes(t: &Array3<f32>, g: &FaceGeometry) -> AttributeSet {
    let mut set = AttributeSet::new();
    if let Some(v) = hair_verdict(hair_luminance(t, g)) {
        set.insert("HairColor", v);
    }
    if let Some(v) = background_verdict(background_luminance(t, g)) {
        set.insert("Background", v);
    }
    let c = mouth_curvature(t, g);
    if c.is_finite() && c != 0.0 {
        set.insert("Mouth", if c > 0.0 { "Smile" } else { "Frown" });
    }
    set
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDatasetSpec {
    pub count: usize,
    #[serde(default = "default_size")]
    pub image_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "half")]
    pub p_blond: f64,
    #[serde(default = "half")]
    pub p_smile: f64,
    /// P(Background=Bright | Mouth=Smile); Frown uses the complement.
    #[serde(default = "default_knob")]
    pub p_bright_given_smile: f64,
}

fn default_size() -> usize {
    64
}

fn half() -> f64 {
    0.5
}

fn default_knob() -> f64 {
    0.9
}

impl ToyDatasetSpec {
    pub fn new(count: usize, seed: u64) -> Self {
        Self { count, image_size: 64, seed, p_blond: 0.5, p_smile: 0.5, p_bright_given_smile: 0.9 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidConfig("toy dataset count must be ≥ 1".into()));
        }
        if self.image_size < 64 {
            return Err(Error::InvalidConfig("toy image_size must be ≥ 64".into()));
        }
        for (name, p) in [
            ("p_blond", self.p_blond),
            ("p_smile", self.p_smile),
            ("p_bright_given_smile", self.p_bright_given_smile),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    /// Draws one attribute set from the spec's joint distribution.
    pub fn draw_attributes(&self, rng: &mut impl Rng) -> AttributeSet {
        let blond = rng.gen_bool(self.p_blond);
        let smile = rng.gen_bool(self.p_smile);
        let p_bright = if smile { self.p_bright_given_smile } else { 1.0 - self.p_bright_given_smile };
        let bright = rng.gen_bool(p_bright);
        AttributeSet::new()
            .with("HairColor", if blond { "Blond" } else { "Black" })
            .with("Background", if bright { "Bright" } else { "Dark" })
            .with("Mouth", if smile { "Smile" } else { "Frown" })
    }

    pub fn draw_geometry(&self, rng: &mut impl Rng) -> FaceGeometry {
        let s = self.image_size as f32;
        FaceGeometry {
            cx: s / 2.0 + rng.gen_range(-s / 16.0..s / 16.0),
            cy: s / 2.0 + s * 0.04 + rng.gen_range(-s / 16.0..s / 16.0),
            rx: s * rng.gen_range(0.2..0.25),
            ry: s * rng.gen_range(0.26..0.31),
        }
    }

    /// The `index`-th sample, independent of every other index.
    pub fn sample(&self, index: u64) -> ToySample {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[index]));
        let attrs = self.draw_attributes(&mut rng);
        let photo_attrs = self.draw_attributes(&mut rng);
        let geometry = self.draw_geometry(&mut rng);
        let noise_seed = rng.gen();
        let photo = render_photo(self.image_size, &geometry, &photo_attrs, noise_seed);
        let portrait = render_portrait(self.image_size, &geometry, &attrs, noise_seed);
        ToySample { attrs, photo_attrs, geometry, photo, portrait }
    }
}

#[derive(Debug, Clone)]
pub struct ToySample {
    pub attrs: AttributeSet,
    pub photo_attrs: AttributeSet,
    pub geometry: FaceGeometry,
    pub photo: Array3<f32>,
    pub portrait: Array3<f32>,
}

impl From<ToySample> for PairedSample {
    fn from(s: ToySample) -> Self {
        Self { photo: s.photo, portrait: s.portrait, attrs: s.attrs, geometry: Some(s.geometry) }
    }
}

impl ToyDatasetSpec {
    /// Every sample of the spec, in index order.
    pub fn paired_samples(&self) -> Vec<PairedSample> {
        (0..self.count as u64).map(|i| self.sample(i).into()).collect()
    }
}

struct Palette {
    skin: [f32; 3],
    blond: [f32; 3],
    black: [f32; 3],
    bright: [f32; 3],
    dark: [f32; 3],
    eye: [f32; 3],
    mouth: [f32; 3],
}

const PHOTO: Palette = Palette {
    skin: [0.80, 0.66, 0.56],
    blond: [0.92, 0.84, 0.38],
    black: [0.13, 0.11, 0.10],
    bright: [0.82, 0.82, 0.80],
    dark: [0.20, 0.20, 0.22],
    eye: [0.15, 0.12, 0.12],
    mouth: [0.55, 0.22, 0.22],
};

const PAINT: Palette = Palette {
    skin: [0.93, 0.68, 0.47],
    blond: [0.97, 0.86, 0.42],
    black: [0.08, 0.06, 0.12],
    bright: [0.93, 0.90, 0.70],
    dark: [0.12, 0.16, 0.30],
    eye: [0.10, 0.08, 0.15],
    mouth: [0.62, 0.08, 0.14],
};

fn render(
    size: usize,
    g: &FaceGeometry,
    attrs: &AttributeSet,
    palette: &Palette,
    texture: impl Fn(usize, usize, usize) -> f32,
) -> Array3<f32> {
    let blond = attrs.get("HairColor") == Some("Blond");
    let bright = attrs.get("Background") == Some("Bright");
    let smile = attrs.get("Mouth") == Some("Smile");
    let mut img = Array3::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let color = if g.in_face(fx, fy) {
                if g.in_mouth(fx, fy, smile) {
                    palette.mouth
                } else if g.in_eye(fx, fy) {
                    palette.eye
                } else {
                    palette.skin
                }
            } else if g.in_hair(fx, fy) {
                if blond {
                    palette.blond
                } else {
                    palette.black
                }
            } else if bright {
                palette.bright
            } else {
                palette.dark
            };
            for c in 0..3 {
                img[[c, y, x]] = (color[c] + texture(c, y, x)).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Flat-shaded photo with mild per-pixel noise.
pub fn render_photo(size: usize, g: &FaceGeometry, attrs: &AttributeSet, seed: u64) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
    let noise = Array3::from_shape_fn((3, size, size), |_| rng.gen_range(-0.04f32..0.04));
    render(size, g, attrs, &PHOTO, |c, y, x| noise[[c, y, x]])
}

/// Painterly rendering: shifted palette plus a diagonal brush-stroke ripple.
pub fn render_portrait(size: usize, g: &FaceGeometry, attrs: &AttributeSet, seed: u64) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let noise = Array3::from_shape_fn((3, size, size), |_| rng.gen_range(-0.015f32..0.015));
    render(size, g, attrs, &PAINT, |c, y, x| {
        0.05 * (0.9 * (x as f32 + 0.5 * y as f32) + phase).sin() + noise[[c, y, x]]
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub photo: String,
    pub portrait: String,
    pub attrs: AttributeSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<FaceGeometry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub photo_attrs: Option<AttributeSet>,
}

#[derive(Debug, Clone)]
pub struct PairedSample {
    pub photo: Array3<f32>,
    pub portrait: Array3<f32>,
    pub attrs: AttributeSet,
    pub geometry: Option<FaceGeometry>,
}

pub fn read_manifest_records(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Manifest { index: out.len(), message: format!("line {}: {e}", index + 1) })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest_records(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Loads and validates every record; image paths are relative to the
/// manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>, schema: &AttributeSchema, size: usize) -> Result<Vec<PairedSample>> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let records = read_manifest_records(path)?;
    let mut out = Vec::with_capacity(records.len());
    for (index, rec) in records.into_iter().enumerate() {
        let fail = |message: String| Error::Manifest { index, message };
        schema.resolve(&rec.attrs).map_err(|e| fail(e.to_string()))?;
        let load = |p: &str| -> Result<Array3<f32>> {
            let full: PathBuf = base.join(p);
            if !full.exists() {
                return Err(fail(format!("missing image {}", full.display())));
            }
            load_image(&full, size).map_err(|e| fail(e.to_string()))
        };
        out.push(PairedSample {
            photo: load(&rec.photo)?,
            portrait: load(&rec.portrait)?,
            attrs: rec.attrs,
            geometry: rec.geometry,
        });
    }
    Ok(out)
}

/// Index at which the held-out tail begins (6 % of the samples, at least one
/// when there are two or more).
pub fn split_point(n: usize) -> usize {
    if n < 2 {
        return n;
    }
    let test = ((n as f64 * 0.06).round() as usize).max(1);
    n - test
}

/// Writes photos, portraits, `manifest.jsonl`, `train.jsonl`, `test.jsonl`,
/// `schema.toml` and `spec.toml` under `out`.
pub fn synth_dataset(spec: &ToyDatasetSpec, out: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    spec.validate()?;
    let out = out.as_ref();
    for dir in [out.to_path_buf(), out.join("photos"), out.join("portraits")] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut records = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let s = spec.sample(i as u64);
        let photo = format!("photos/{i:05}.png");
        let portrait = format!("portraits/{i:05}.png");
        save_png(out.join(&photo), &s.photo)?;
        save_png(out.join(&portrait), &s.portrait)?;
        records.push(ManifestRecord {
            photo,
            portrait,
            attrs: s.attrs,
            geometry: Some(s.geometry),
            photo_attrs: Some(s.photo_attrs),
        });
    }
    let cut = split_point(records.len());
    write_manifest_records(out.join("manifest.jsonl"), &records)?;
    write_manifest_records(out.join("train.jsonl"), &records[..cut])?;
    write_manifest_records(out.join("test.jsonl"), &records[cut..])?;
    let write = |name: &str, text: String| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("schema.toml", AttributeSchema::toy().to_toml_string())?;
    write("spec.toml", spec.to_toml_string())?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_sample_satisfies_its_oracles() {
        let spec = ToyDatasetSpec::new(300, 11);
        for i in 0..spec.count as u64 {
            let s = spec.sample(i);
            assert_eq!(read_toy_attributes(&s.portrait, &s.geometry), s.attrs, "portrait {i}");
            assert_eq!(read_toy_attributes(&s.photo, &s.geometry), s.photo_attrs, "photo {i}");
        }
    }

    #[test]
    fn oracles_hold_at_other_sizes() {
        for size in [96, 128] {
            let spec = ToyDatasetSpec { image_size: size, ..ToyDatasetSpec::new(40, 3) };
            spec.validate().unwrap();
            for i in 0..40 {
                let s = spec.sample(i);
                assert_eq!(read_toy_attributes(&s.portrait, &s.geometry), s.attrs);
            }
        }
    }

    #[test]
    fn correlation_knob_controls_joint_frequency() {
        let spec = ToyDatasetSpec::new(2000, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut smile, mut bright_smile) = (0, 0);
        for _ in 0..spec.count {
            let a = spec.draw_attributes(&mut rng);
            if a.get("Mouth") == Some("Smile") {
                smile += 1;
                bright_smile += (a.get("Background") == Some("Bright")) as usize;
            }
        }
        let p = bright_smile as f64 / smile as f64;
        assert!((0.85..=0.95).contains(&p), "P(Bright|Smile) = {p}");
    }

    #[test]
    fn photo_and_portrait_share_geometry() {
        let spec = ToyDatasetSpec::new(20, 2);
        let centroid = |t: &Array3<f32>, skin: [f32; 3]| {
            let (_, h, w) = t.dim();
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let d = (0..3).map(|c| (t[[c, y, x]] - skin[c]).abs()).fold(0.0, f32::max);
                    if d < 0.12 {
                        sx += x as f32;
                        sy += y as f32;
                        n += 1.0;
                    }
                }
            }
            (sx / n, sy / n)
        };
        for i in 0..20 {
            let s = spec.sample(i);
            let a = centroid(&s.photo, PHOTO.skin);
            let b = centroid(&s.portrait, PAINT.skin);
            assert!(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() < 1.0, "sample {i}: {a:?} vs {b:?}");
        }
    }

    #[test]
    fn synthesis_is_deterministic_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToyDatasetSpec::new(12, 4);
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let records = synth_dataset(&spec, &a).unwrap();
        synth_dataset(&spec, &b).unwrap();
        for name in ["manifest.jsonl", "photos/00003.png", "portraits/00011.png", "schema.toml"] {
            assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
        }
        assert_eq!(read_manifest_records(a.join("manifest.jsonl")).unwrap(), records);
        let train = read_manifest_records(a.join("train.jsonl")).unwrap();
        let test = read_manifest_records(a.join("test.jsonl")).unwrap();
        assert_eq!((train.len(), test.len()), (11, 1));
        assert_eq!(test[0], records[11]);

        let loaded = load_manifest(a.join("manifest.jsonl"), &AttributeSchema::toy(), 64).unwrap();
        assert_eq!(loaded.len(), 12);
        let s = spec.sample(5);
        assert_eq!(loaded[5].attrs, s.attrs);
        let max_err = loaded[5].portrait.iter().zip(s.portrait.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn manifest_errors_name_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_manifest(&path, &AttributeSchema::toy(), 8).unwrap().is_empty());
        synth_dataset(&ToyDatasetSpec::new(2, 0), dir.path()).unwrap();
        let mut recs = read_manifest_records(dir.path().join("manifest.jsonl")).unwrap();
        recs[1].attrs.insert("HairColor", "Green");
        write_manifest_records(&path, &recs).unwrap();
        match load_manifest(&path, &AttributeSchema::toy(), 8) {
            Err(Error::Manifest { index, message }) => {
                assert_eq!(index, 1);
                assert!(message.contains("Green"));
            }
            other => panic!("unexpected {other:?}"),
        }
        recs[1].attrs.insert("HairColor", "Black");
        recs[0].photo = "photos/missing.png".into();
        write_manifest_records(&path, &recs).unwrap();
        assert!(matches!(load_manifest(&path, &AttributeSchema::toy(), 8), Err(Error::Manifest { index: 0, .. })));
    }

    #[test]
    fn preprocess_resizes_and_scales() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_fn(128, 128, |x, y| Rgb([(x * 2) as u8, (y * 2) as u8, 255])));
        let t = preprocess(&img, 64);
        assert_eq!(t.dim(), (3, 64, 64));
        assert!(t.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(t[[2, 10, 10]], 1.0);
        let same = preprocess(&DynamicImage::ImageRgb8(to_rgb_image(&t)), 64);
        assert_eq!(same, t);
        let bytes = encode_png(&t).unwrap();
        assert_eq!(decode_png(&bytes, 64).unwrap(), t);
        assert!(decode_png(b"not a png", 64).is_err());
    }

    #[test]
    fn spec_toml_roundtrip_and_validation() {
        let spec = ToyDatasetSpec::new(10, 3);
        assert_eq!(ToyDatasetSpec::from_toml_str(&spec.to_toml_string()).unwrap(), spec);
        assert_eq!(ToyDatasetSpec::from_toml_str("count = 5").unwrap().p_bright_given_smile, 0.9);
        assert!(ToyDatasetSpec::from_toml_str("count = 0").is_err());
        assert!(ToyDatasetSpec::from_toml_str("count = 5\nimage_size = 32").is_err());
        assert!(ToyDatasetSpec::from_toml_str("count = 5\np_blond = 1.5").is_err());
        assert!(ToyDatasetSpec::from_toml_str("count = 5\nbogus = 1").is_err());
    }
}
