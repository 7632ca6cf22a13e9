//! Deterministic ellipse phantoms, contrast/texture anomaly injection and
//! the on-disk dataset format.
//!
//! Layout: `<root>/{train,val,test}/{images,masks}/NNNNN.png` (8-bit
//! grayscale) plus `<root>/manifest.csv` with header
//! `path,split,label,anomaly_type,seed`. Paths are relative to the root and
//! point at the image; the mask lives at the same name under `masks/`.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pdc::gaussian_smooth;

pub const MIN_SIZE: usize = 32;
const MAX_PLACEMENT_ATTEMPTS: usize = 500;
const WINDOW: usize = 7;
const TEXTURE_DRAWS: usize = 32;
/// Largest accepted change of an interior window mean in a texture anomaly.
pub const TEXTURE_MEAN_TOLERANCE: f64 = 0.04;
const MANIFEST_HEADER: &str = "path,split,label,anomaly_type,seed";

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Array2<f64>,
    pub foreground: Array2<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyType {
    None,
    Contrast,
    Texture,
}

macro_rules! str_enum {
    ($t:ty { $($v:ident => $s:literal),* $(,)? }) => {
        impl $t {
            pub fn as_str(self) -> &'static str {
                match self { $(<$t>::$v => $s),* }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(<$t>::$v),)*
                    other => Err(Error::ManifestMismatch(format!("unknown value `{other}`"))),
                }
            }
        }
    };
}

str_enum!(Label { Normal => "normal", Anomalous => "anomalous" });
str_enum!(AnomalyType { None => "none", Contrast => "contrast", Texture => "texture" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

str_enum!(Split { Train => "train", Val => "val", Test => "test" });

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Array2<f64>,
    pub mask: Array2<bool>,
    pub label: Label,
    pub anomaly_type: AnomalyType,
    pub seed: u64,
}

impl LabeledSample {
    pub fn normal(ph: Phantom, seed: u64) -> Self {
        let mask = Array2::from_elem(ph.image.dim(), false);
        Self { image: ph.image, mask, label: Label::Normal, anomaly_type: AnomalyType::None, seed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_train_normal: usize,
    pub n_val_normal: usize,
    pub n_test_normal: usize,
    pub n_test_contrast: usize,
    pub n_test_texture: usize,
    pub size: usize,
    pub master_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_train_normal: 512,
            n_val_normal: 64,
            n_test_normal: 64,
            n_test_contrast: 64,
            n_test_texture: 64,
            size: 64,
            master_seed: 2024,
        }
    }
}

impl DatasetSpec {
    pub fn total(&self) -> usize {
        self.n_train_normal + self.n_val_normal + self.n_test_normal + self.n_test_contrast + self.n_test_texture
    }
}

/// Radii are fractions of the image size; `delta_range` bounds `|delta|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastParams {
    pub radius_range: (f64, f64),
    pub delta_range: (f64, f64),
}

impl Default for ContrastParams {
    fn default() -> Self {
        Self { radius_range: (0.06, 0.12), delta_range: (0.2, 0.4) }
    }
}

/// `grain` is the fine-scale noise correlation length in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureParams {
    pub radius_range: (f64, f64),
    pub noise_sigma: f64,
    pub grain: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self { radius_range: (0.06, 0.12), noise_sigma: 0.15, grain: 2.0 }
    }
}

/// SplitMix64 finalizer, used to derive independent per-sample seeds.
pub fn mix_seed(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn make_phantom(seed: u64, size: usize) -> Result<Phantom> {
    if size < MIN_SIZE {
        return Err(Error::SizeTooSmall { size, min: MIN_SIZE });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let cx = s / 2.0 + rng.random_range(-0.1..0.1) * s;
    let cy = s / 2.0 + rng.random_range(-0.1..0.1) * s;
    let ax = rng.random_range(0.25..0.40) * s;
    let ay = rng.random_range(0.25..0.40) * s;
    let rot = rng.random_range(0.0..PI);
    let (fx, fy) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5));
    let (px, py) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    let (gx, gy) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let noise = Normal::new(0.0, 0.01).expect("valid sigma");
    let (sin, cos) = rot.sin_cos();

    let mut image = Array2::zeros((size, size));
    let mut foreground = Array2::from_elem((size, size), false);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let (rx, ry) = ((dx * cos + dy * sin) / ax, (-dx * sin + dy * cos) / ay);
            let inside = rx * rx + ry * ry <= 1.0;
            let base = if inside {
                0.7 + 0.06 * (2.0 * PI * (fx * u + px)).sin() * (2.0 * PI * (fy * v + py)).cos()
            } else {
                0.2 + gx * (u - 0.5) + gy * (v - 0.5)
            };
            foreground[[y, x]] = inside;
            image[[y, x]] = (base + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(Phantom { image, foreground })
}

/// Seeded union of 1-3 overlapping discs whose `margin`-dilation lies inside
/// the foreground.
fn place_blob<R: Rng>(fg: &Array2<bool>, radius_range: (f64, f64), margin: f64, rng: &mut R) -> Result<Array2<bool>> {
    let (h, w) = fg.dim();
    let s = h as f64;
    let (lo, hi) = radius_range;
    if !(lo > 0.0 && hi >= lo) {
        return Err(Error::Config(format!("invalid radius range ({lo}, {hi})")));
    }
    let centers: Vec<(usize, usize)> = fg.indexed_iter().filter(|(_, &f)| f).map(|(i, _)| i).collect();
    if centers.is_empty() {
        return Err(Error::NoValidPlacement { attempts: 0 });
    }
    let disc_fits = |cx: f64, cy: f64, r: f64| {
        let reach = r + margin;
        let y0 = (cy - reach).floor() as isize;
        let y1 = (cy + reach).ceil() as isize;
        let x0 = (cx - reach).floor() as isize;
        let x1 = (cx + reach).ceil() as isize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let outside = y < 0 || x < 0 || y >= h as isize || x >= w as isize || !fg[[y as usize, x as usize]];
                if dx * dx + dy * dy <= reach * reach && outside {
                    return false;
                }
            }
        }
        true
    };
    let n_discs = rng.random_range(1..=3usize);
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let (cy, cx) = centers[rng.random_range(0..centers.len())];
        let (cx, cy) = (cx as f64 + 0.5, cy as f64 + 0.5);
        let r0 = rng.random_range(lo..=hi) * s;
        let mut discs = vec![(cx, cy, r0)];
        for _ in 1..n_discs {
            let r = rng.random_range(lo..=hi) * s;
            let angle = rng.random_range(0.0..2.0 * PI);
            let dist = rng.random_range(0.0..r0);
            discs.push((cx + dist * angle.cos(), cy + dist * angle.sin(), r));
        }
        if !discs.iter().all(|&(x, y, r)| disc_fits(x, y, r)) {
            continue;
        }
        let mask = Array2::from_shape_fn((h, w), |(y, x)| {
            discs.iter().any(|&(cx, cy, r)| {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                dx * dx + dy * dy <= r * r
            })
        });
        if mask.iter().any(|&m| m) {
            return Ok(mask);
        }
    }
    Err(Error::NoValidPlacement { attempts: MAX_PLACEMENT_ATTEMPTS })
}

/// Adds a signed intensity shift inside a seeded blob.
pub fn inject_contrast_anomaly(ph: &Phantom, seed: u64, params: &ContrastParams) -> Result<LabeledSample> {
    let (lo, hi) = params.delta_range;
    if hi.is_nan() || hi <= 0.0 || lo < 0.0 || lo > hi {
        return Err(Error::ZeroDelta);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = place_blob(&ph.foreground, params.radius_range, 0.0, &mut rng)?;
    let magnitude = rng.random_range(lo..=hi);
    let delta = if rng.random_bool(0.5) { magnitude } else { -magnitude };
    let mut image = ph.image.clone();
    Zip::from(&mut image).and(&mask).for_each(|v, &m| {
        if m {
            *v = (*v + delta).clamp(0.0, 1.0);
        }
    });
    Ok(LabeledSample { image, mask, label: Label::Anomalous, anomaly_type: AnomalyType::Contrast, seed })
}

/// `WINDOW x WINDOW` box mean with edge clamping.
pub fn window_mean(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let r = (WINDOW / 2) as isize;
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                acc += img[[yy, xx]];
            }
        }
        acc / (WINDOW * WINDOW) as f64
    })
}

/// Mask pixels whose whole window lies inside the mask.
fn interior_pixels(mask: &Array2<bool>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let r = (WINDOW / 2) as isize;
    mask.indexed_iter()
        .filter(|&(_, &m)| m)
        .map(|(idx, _)| idx)
        .filter(|&(y, x)| {
            (-r..=r).all(|dy| {
                (-r..=r).all(|dx| {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize && mask[[yy as usize, xx as usize]]
                })
            })
        })
        .collect()
}

/// Replaces the blob's content by its local window mean plus seeded
/// high-frequency noise: the mean intensity stays, the texture changes.
///
/// The noise is white noise blurred to the grain scale, high-passed twice
/// against the window box filter and scaled to `noise_sigma`. Draws whose
/// interior window means drift by more than `TEXTURE_MEAN_TOLERANCE` are
/// redrawn (bounded; the best draw is kept).
pub fn inject_texture_anomaly(ph: &Phantom, seed: u64, params: &TextureParams) -> Result<LabeledSample> {
    if params.noise_sigma < 0.0 || params.grain.is_nan() || params.grain <= 0.0 {
        return Err(Error::Config("texture noise_sigma must be >= 0 and grain > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = (WINDOW / 2) as f64;
    let mask = place_blob(&ph.foreground, params.radius_range, margin, &mut rng)?;
    let (h, w) = ph.image.dim();
    let white = Normal::new(0.0, 1.0).expect("unit normal");
    let local = window_mean(&ph.image);
    let interior = interior_pixels(&mask);
    let mut best: Option<(f64, Array2<f64>)> = None;
    for _ in 0..TEXTURE_DRAWS {
        let field = Array2::from_shape_fn((h, w), |_| white.sample(&mut rng));
        let mut noise = gaussian_smooth(field.view(), 0.5 * params.grain);
        for _ in 0..2 {
            noise = &noise - &window_mean(&noise);
        }
        let std = (noise.mapv(|v| v * v).mean().unwrap_or(0.0)).sqrt();
        let scale = if std > 0.0 { params.noise_sigma / std } else { 0.0 };
        let mut image = ph.image.clone();
        Zip::from(&mut image).and(&mask).and(&local).and(&noise).for_each(|v, &m, &mu, &n| {
            if m {
                *v = (mu + scale * n).clamp(0.0, 1.0);
            }
        });
        let after = window_mean(&image);
        let drift = interior.iter().map(|&idx| (after[idx] - local[idx]).abs()).fold(0.0, f64::max);
        if best.as_ref().is_none_or(|(d, _)| drift < *d) {
            best = Some((drift, image));
        }
        if drift <= TEXTURE_MEAN_TOLERANCE {
            break;
        }
    }
    let (_, image) = best.expect("at least one draw");
    Ok(LabeledSample { image, mask, label: Label::Anomalous, anomaly_type: AnomalyType::Texture, seed })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: String,
    pub split: Split,
    pub label: Label,
    pub anomaly_type: AnomalyType,
    pub seed: u64,
}

pub type Manifest = Vec<ManifestRow>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

fn sample_seed(master: u64, group: u64, index: usize) -> u64 {
    mix_seed(master ^ mix_seed((group << 32) | index as u64))
}

fn injection_seed(seed: u64) -> u64 {
    mix_seed(seed ^ 0xA5A5_5A5A_C3C3_3C3C)
}

/// Generates the sample for one manifest entry.
pub fn generate_sample(anomaly: AnomalyType, seed: u64, size: usize) -> Result<LabeledSample> {
    let ph = make_phantom(seed, size)?;
    match anomaly {
        AnomalyType::None => Ok(LabeledSample::normal(ph, seed)),
        AnomalyType::Contrast => {
            let mut s = inject_contrast_anomaly(&ph, injection_seed(seed), &ContrastParams::default())?;
            s.seed = seed;
            Ok(s)
        }
        AnomalyType::Texture => {
            let mut s = inject_texture_anomaly(&ph, injection_seed(seed), &TextureParams::default())?;
            s.seed = seed;
            Ok(s)
        }
    }
}

fn quantize(img: &Array2<f64>) -> Vec<u8> {
    img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn write_png(path: &Path, size: usize, bytes: Vec<u8>) -> Result<()> {
    let img = image::GrayImage::from_raw(size as u32, size as u32, bytes)
        .ok_or_else(|| Error::ShapeMismatch("pixel buffer does not match image size".into()))?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    img.write_to(&mut out, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    })?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn mask_path(image_path: &str) -> String {
    image_path.replacen("/images/", "/masks/", 1)
}

/// Writes every split plus `manifest.csv`; the result depends only on `spec`.
pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    if spec.size < MIN_SIZE || !spec.size.is_multiple_of(8) {
        return Err(Error::Config(format!("data.size = {} must be a multiple of 8 and >= {MIN_SIZE}", spec.size)));
    }
    let plan: [(Split, AnomalyType, u64, usize); 5] = [
        (Split::Train, AnomalyType::None, 1, spec.n_train_normal),
        (Split::Val, AnomalyType::None, 2, spec.n_val_normal),
        (Split::Test, AnomalyType::None, 3, spec.n_test_normal),
        (Split::Test, AnomalyType::Contrast, 4, spec.n_test_contrast),
        (Split::Test, AnomalyType::Texture, 5, spec.n_test_texture),
    ];
    for split in [Split::Train, Split::Val, Split::Test] {
        for sub in ["images", "masks"] {
            let dir = out_dir.join(split.as_str()).join(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    let mut manifest = Vec::with_capacity(spec.total());
    let mut next_index = [0usize; 3];
    for (split, anomaly, group, count) in plan {
        for i in 0..count {
            let seed = sample_seed(spec.master_seed, group, i);
            let sample = generate_sample(anomaly, seed, spec.size)?;
            let slot = &mut next_index[split as usize];
            let rel = format!("{}/images/{:05}.png", split.as_str(), *slot);
            *slot += 1;
            write_png(&out_dir.join(&rel), spec.size, quantize(&sample.image))?;
            let mask_bytes = sample.mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
            write_png(&out_dir.join(mask_path(&rel)), spec.size, mask_bytes)?;
            manifest.push(ManifestRow {
                path: rel,
                split,
                label: sample.label,
                anomaly_type: sample.anomaly_type,
                seed,
            });
        }
    }
    write_manifest(&out_dir.join("manifest.csv"), &manifest)?;
    Ok(manifest)
}

fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!("{},{},{},{},{}\n", r.path, r.split, r.label, r.anomaly_type, r.seed));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::ManifestMismatch(format!("{} must start with `{MANIFEST_HEADER}`", path.display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::ManifestMismatch(format!("line {}: expected 5 fields", i + 2)));
            }
            Ok(ManifestRow {
                path: f[0].to_string(),
                split: f[1].parse()?,
                label: f[2].parse()?,
                anomaly_type: f[3].parse()?,
                seed: f[4]
                    .parse()
                    .map_err(|_| Error::ManifestMismatch(format!("line {}: bad seed `{}`", i + 2, f[4])))?,
            })
        })
        .collect()
}

fn read_png(path: &Path) -> Result<(usize, Vec<u8>)> {
    if !path.is_file() {
        return Err(Error::ManifestMismatch(format!("missing file {}", path.display())));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: String| Error::CorruptImage { path: PathBuf::from(path), reason };
    let img =
        image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| corrupt(e.to_string()))?;
    let img = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => return Err(corrupt(format!("expected 8-bit grayscale, got {:?}", other.color()))),
    };
    if img.width() != img.height() {
        return Err(corrupt(format!("image is {}x{}, expected square", img.width(), img.height())));
    }
    Ok((img.width() as usize, img.into_raw()))
}

/// Reads a dataset written by [`build_dataset`]. Pixels come back as `v / 255`.
pub fn load_dataset(dir: &Path) -> Result<Splits> {
    let manifest = read_manifest(dir)?;
    let mut splits = Splits::default();
    let mut size = None;
    for row in manifest {
        let (s, pixels) = read_png(&dir.join(&row.path))?;
        let (ms, mask_px) = read_png(&dir.join(mask_path(&row.path)))?;
        if *size.get_or_insert(s) != s || ms != s {
            return Err(Error::ManifestMismatch(format!("{}: inconsistent image size", row.path)));
        }
        let image =
            Array2::from_shape_vec((s, s), pixels.iter().map(|&v| v as f64 / 255.0).collect()).expect("square buffer");
        let mask = Array2::from_shape_vec((s, s), mask_px.iter().map(|&v| v > 127).collect()).expect("square buffer");
        let any = mask.iter().any(|&m| m);
        let consistent = match (row.label, row.anomaly_type) {
            (Label::Normal, AnomalyType::None) => !any,
            (Label::Anomalous, AnomalyType::Contrast | AnomalyType::Texture) => any,
            _ => false,
        };
        if !consistent || (row.split != Split::Test && row.label != Label::Normal) {
            return Err(Error::ManifestMismatch(format!(
                "{}: label {} / type {} disagrees with its mask or split",
                row.path, row.label, row.anomaly_type
            )));
        }
        let sample = LabeledSample { image, mask, label: row.label, anomaly_type: row.anomaly_type, seed: row.seed };
        match row.split {
            Split::Train => splits.train.push(sample),
            Split::Val => splits.val.push(sample),
            Split::Test => splits.test.push(sample),
        }
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_is_deterministic() {
        let a = make_phantom(11, 64).unwrap();
        let b = make_phantom(11, 64).unwrap();
        assert!(a.image.iter().zip(b.image.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.foreground, b.foreground);
        assert_ne!(make_phantom(12, 64).unwrap().foreground, a.foreground);
        assert!(a.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn phantom_size_limit() {
        assert!(matches!(make_phantom(0, 16), Err(Error::SizeTooSmall { size: 16, .. })));
    }

    #[test]
    fn foreground_fraction_sweep() {
        for seed in 0..100 {
            let ph = make_phantom(seed, 64).unwrap();
            let frac = ph.foreground.iter().filter(|&&f| f).count() as f64 / 4096.0;
            assert!((0.15..=0.55).contains(&frac), "seed {seed}: {frac}");
        }
    }

    #[test]
    fn zero_delta_rejected() {
        let ph = make_phantom(1, 64).unwrap();
        let p = ContrastParams { delta_range: (0.0, 0.0), ..Default::default() };
        assert!(matches!(inject_contrast_anomaly(&ph, 2, &p), Err(Error::ZeroDelta)));
    }

    #[test]
    fn oversized_blob_has_no_placement() {
        let ph = make_phantom(1, 64).unwrap();
        let p = ContrastParams { radius_range: (0.6, 0.7), ..Default::default() };
        assert!(matches!(inject_contrast_anomaly(&ph, 2, &p), Err(Error::NoValidPlacement { .. })));
    }

    fn assert_local(ph: &Phantom, s: &LabeledSample) {
        assert!(s.mask.iter().any(|&m| m));
        for ((idx, &m), (&a, &b)) in s.mask.indexed_iter().zip(ph.image.iter().zip(s.image.iter())) {
            if m {
                assert!(ph.foreground[idx]);
            } else {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn contrast_anomalies_are_local_and_visible() {
        let mut strong = 0;
        for seed in 0..200 {
            let ph = make_phantom(seed, 64).unwrap();
            let s = inject_contrast_anomaly(&ph, seed + 1000, &ContrastParams::default()).unwrap();
            assert_local(&ph, &s);
            let (mut total, mut n) = (0.0, 0);
            for ((a, b), &m) in ph.image.iter().zip(s.image.iter()).zip(s.mask.iter()) {
                if m {
                    total += (a - b).abs();
                    n += 1;
                }
            }
            if total / n as f64 >= 0.15 {
                strong += 1;
            }
        }
        assert!(strong >= 190, "{strong} of 200");
    }

    #[test]
    fn zero_noise_texture_is_local_mean() {
        let ph = make_phantom(3, 64).unwrap();
        let p = TextureParams { noise_sigma: 0.0, ..Default::default() };
        let s = inject_texture_anomaly(&ph, 4, &p).unwrap();
        let local = window_mean(&ph.image);
        for ((idx, &m), &v) in s.mask.indexed_iter().zip(s.image.iter()) {
            if m {
                assert_eq!(v, local[idx]);
            }
        }
    }

    #[test]
    fn texture_keeps_window_means() {
        let r = (WINDOW / 2) as isize;
        let mut windows = 0;
        for seed in 0..200 {
            let ph = make_phantom(seed, 64).unwrap();
            let s = inject_texture_anomaly(&ph, seed + 7, &TextureParams::default()).unwrap();
            assert_local(&ph, &s);
            let before = window_mean(&ph.image);
            let after = window_mean(&s.image);
            for ((y, x), &m) in s.mask.indexed_iter() {
                if !m {
                    continue;
                }
                let interior = (-r..=r).all(|dy| {
                    (-r..=r).all(|dx| {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        yy >= 0 && xx >= 0 && yy < 64 && xx < 64 && s.mask[[yy as usize, xx as usize]]
                    })
                });
                if interior {
                    windows += 1;
                    let d = (after[[y, x]] - before[[y, x]]).abs();
                    assert!(d <= 0.05, "seed {seed} at ({y},{x}): {d}");
                }
            }
        }
        assert!(windows > 0);
    }
}
