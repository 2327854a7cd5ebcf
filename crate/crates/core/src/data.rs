//! Seeded synthetic segmentation data: textured backgrounds with randomly
//! colored geometric shapes, one class per shape kind and class 0 for the
//! background. Shape colors are drawn independently of the kind, so only
//! geometry identifies a class.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use dca_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DcaError, Result};
use crate::network::IGNORE_INDEX;

pub const MIN_IMAGE_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
    Cross,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [Self::Disk, Self::Rectangle, Self::Triangle, Self::Cross, Self::Ring];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_images: usize,
    pub image_size: usize,
    /// Background plus `num_classes - 1` shape kinds.
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Probability that a shape after the first repeats the first shape's
    /// kind. Values near 1 make the image as a whole informative about the
    /// class of each object.
    pub kind_coherence: f64,
    /// Shape hues scatter this many degrees around a per-kind base hue, so
    /// color alone only partly identifies the kind once it exceeds half the
    /// spacing between base hues.
    pub hue_jitter_deg: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { num_images: 200, image_size: 64, num_classes: 5, min_shapes: 1, max_shapes: 3, kind_coherence: 0.9, hue_jitter_deg: 90.0, seed: 0 }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > ShapeKind::ALL.len() + 1 {
            return Err(invalid(format!("num_classes must be in 2..={}", ShapeKind::ALL.len() + 1)));
        }
        if self.min_shapes < 1 || self.max_shapes < self.min_shapes {
            return Err(invalid("need 1 <= min_shapes <= max_shapes"));
        }
        if !(0.0..=1.0).contains(&self.kind_coherence) {
            return Err(invalid("kind_coherence must lie in [0, 1]"));
        }
        if !(0.0..=180.0).contains(&self.hue_jitter_deg) {
            return Err(invalid("hue_jitter_deg must lie in [0, 180]"));
        }
        if self.image_size < MIN_IMAGE_SIZE {
            return Err(DcaError::Generation(format!(
                "image size {} is too small to place a shape (minimum {MIN_IMAGE_SIZE})",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn shape_kinds(&self) -> &'static [ShapeKind] {
        &ShapeKind::ALL[..self.num_classes - 1]
    }
}

/// One image with its dense labels and class-presence vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `H * W` row-major labels; `IGNORE_INDEX` marks unlabeled pixels.
    pub labels: Vec<u8>,
    /// `present[k] == 1` iff class `k` occurs in `labels`.
    pub present: Vec<u8>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

pub fn present_vector(labels: &[u8], num_classes: usize) -> Vec<u8> {
    let mut p = vec![0u8; num_classes];
    for &l in labels {
        if l != IGNORE_INDEX && (l as usize) < num_classes {
            p[l as usize] = 1;
        }
    }
    p
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Per-channel image mean over the whole set.
    pub fn mean(&self) -> [f32; 3] {
        let mut sums = [0f64; 3];
        let mut count = 0usize;
        for s in &self.samples {
            let plane = s.height() * s.width();
            for (c, sum) in sums.iter_mut().enumerate() {
                *sum += s.image.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>();
            }
            count += plane;
        }
        sums.map(|v| if count == 0 { 0.0 } else { (v / count as f64) as f32 })
    }

    /// Non-ignored pixel count per class.
    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for s in &self.samples {
            for &l in &s.labels {
                if l != IGNORE_INDEX && (l as usize) < self.num_classes {
                    counts[l as usize] += 1;
                }
            }
        }
        counts
    }

    /// Number of images containing each class.
    pub fn images_per_class(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for s in &self.samples {
            for (k, &p) in s.present.iter().enumerate() {
                counts[k] += p as usize;
            }
        }
        counts
    }
}

struct Placed {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    radius: f64,
    /// Sine and cosine of the rotation angle.
    rot: (f64, f64),
}

impl Placed {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.rot;
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        let r = self.radius;
        match self.kind {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
            ShapeKind::Rectangle => u.abs() <= r && v.abs() <= 0.6 * r,
            ShapeKind::Cross => {
                let arm = 0.3 * r;
                (u.abs() <= r && v.abs() <= arm) || (v.abs() <= r && u.abs() <= arm)
            }
            ShapeKind::Triangle => {
                // Equilateral triangle inscribed in the radius-r circle.
                let h = 3f64.sqrt() / 2.0;
                let verts = [(r, 0.0), (-0.5 * r, h * r), (-0.5 * r, -h * r)];
                let sign = |(x1, y1): (f64, f64), (x2, y2): (f64, f64)| (x2 - x1) * (v - y1) - (y2 - y1) * (u - x1);
                let d = [sign(verts[0], verts[1]), sign(verts[1], verts[2]), sign(verts[2], verts[0])];
                d.iter().all(|&s| s >= 0.0) || d.iter().all(|&s| s <= 0.0)
            }
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h / 60.0).rem_euclid(6.0);
        v - v * s * k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [f(5.0), f(3.0), f(1.0)]
}

/// Desaturated background color.
fn background_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    hsv(rng.random_range(0.0..360.0), rng.random_range(0.0..0.35), rng.random_range(0.35..0.9))
}

/// Saturated color whose hue scatters around the base hue of kind `k`.
fn shape_color(rng: &mut ChaCha8Rng, k: usize, num_kinds: usize, jitter: f64) -> [f64; 3] {
    let hue = 360.0 * k as f64 / num_kinds as f64 + if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
    hsv(hue, rng.random_range(0.6..1.0), rng.random_range(0.55..1.0))
}

/// Renders image `index` of the set described by `spec`. Each image has its
/// own ChaCha stream, so images can be generated in any order.
pub fn generate_sample(spec: &SynthSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let size = spec.image_size;
    let sz = size as f64;

    let base = background_color(&mut rng);
    let freq = [rng.random_range(0.1..0.6), rng.random_range(0.1..0.6)];
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = rng.random_range(0.05..0.2);

    let kinds = spec.shape_kinds();
    let count = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let first = rng.random_range(0..kinds.len());
    let shapes: Vec<(Placed, [f64; 3])> = (0..count)
        .map(|i| {
            let kind = if i == 0 || rng.random_bool(spec.kind_coherence) {
                first
            } else {
                rng.random_range(0..kinds.len())
            };
            let radius = rng.random_range(0.12..0.28) * sz;
            let shape = Placed {
                kind: kinds[kind],
                cx: rng.random_range(0.15..0.85) * sz,
                cy: rng.random_range(0.15..0.85) * sz,
                radius,
                rot: rng.random_range(0.0..std::f64::consts::TAU).sin_cos(),
            };
            (shape, shape_color(&mut rng, kind, kinds.len(), spec.hue_jitter_deg))
        })
        .collect();

    let plane = size * size;
    let mut image = vec![0f32; 3 * plane];
    let mut labels = vec![0u8; plane];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let wave = amp * (freq[0] * px + freq[1] * py + phase).sin();
            let mut color = base.map(|b| b + wave);
            for (shape, fill) in &shapes {
                if shape.contains(px, py) {
                    color = *fill;
                    labels[y * size + x] = 1 + kinds.iter().position(|&s| s == shape.kind).expect("kind in set") as u8;
                }
            }
            for c in 0..3 {
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.03;
                image[c * plane + y * size + x] = (color[c] + noise).clamp(0.0, 1.0) as f32;
            }
        }
    }
    let present = present_vector(&labels, spec.num_classes);
    Ok(Sample { image: Tensor::from_vec(&[3, size, size], image)?, labels, present })
}

pub fn generate_synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.num_images).map(|i| generate_sample(spec, i)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { num_classes: spec.num_classes, samples })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub labels: PathBuf,
    pub present: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `images/NNNN.png` (RGB), `labels/NNNN.png` (indexed gray) and a
/// manifest with relative paths.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let mut entries = Vec::with_capacity(ds.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let image = PathBuf::from(format!("images/{i:04}.png"));
        let labels = PathBuf::from(format!("labels/{i:04}.png"));
        write_image(&dir.join(&image), &s.image)?;
        write_labels(&dir.join(&labels), s.width(), s.height(), &s.labels)?;
        entries.push(ManifestEntry { image, labels, present: s.present.clone() });
    }
    let manifest = Manifest { num_classes: ds.num_classes, entries };
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join(MANIFEST_FILE))?), &manifest)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST_FILE))?))?;
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let image = read_image(&dir.join(&e.image))?;
        let (lw, lh, labels) = read_png(&dir.join(&e.labels), png::ColorType::Grayscale)?;
        if (image.shape()[1], image.shape()[2]) != (lh, lw) {
            return Err(invalid(format!("{} and {} differ in size", e.image.display(), e.labels.display())));
        }
        let present = present_vector(&labels, manifest.num_classes);
        if present != e.present {
            return Err(invalid(format!("manifest presence vector of {} disagrees with its labels", e.labels.display())));
        }
        samples.push(Sample { image, labels, present });
    }
    Ok(Dataset { num_classes: manifest.num_classes, samples })
}

/// Reads an 8-bit RGB PNG as a `[3, H, W]` image in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let (w, h, rgb) = read_png(path, png::ColorType::Rgb)?;
    let plane = w * h;
    let mut image = vec![0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            image[c * plane + p] = rgb[3 * p + c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], image)?)
}

/// Writes a `[3, H, W]` image in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(invalid(format!("expected a [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut rgb = vec![0u8; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            rgb[3 * p + c] = (image.data()[c * plane + p] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    write_png(path, w, h, png::ColorType::Rgb, &rgb)
}

/// Writes a label map as an indexed grayscale PNG (pixel value = class).
pub fn write_labels(path: &Path, width: usize, height: usize, labels: &[u8]) -> Result<()> {
    if labels.len() != width * height {
        return Err(invalid(format!("{} labels for a {width}x{height} map", labels.len())));
    }
    write_png(path, width, height, png::ColorType::Grayscale, labels)
}

pub(crate) fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(data)?;
    writer.finish()?;
    Ok(())
}

pub(crate) fn read_png(path: &Path, want: png::ColorType) -> Result<(usize, usize, Vec<u8>)> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| invalid("png too large"))?];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != want || info.bit_depth != png::BitDepth::Eight {
        return Err(invalid(format!("{}: expected 8-bit {want:?}, got {:?}", path.display(), info.color_type)));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}
