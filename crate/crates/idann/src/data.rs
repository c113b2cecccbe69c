//! Dataset ingestion and generation: IDX binary files, an internal cache
//! format, procedural domain-shift generators, synthetic 2-D point sets,
//! a synthetic digit renderer, stratified subsetting, and feature export.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::DannModel;
use crate::rng::{substream, substream_indexed};
use crate::tensor::Tensor;

/// A batch of images with values in [0, 1], optionally labeled.
#[derive(Debug, Clone)]
pub struct ImageDataset {
    pub name: String,
    pub split: String,
    /// Per-sample shape, `H x W x C` (or `[dims]` for point data).
    pub shape: Vec<usize>,
    pub images: Vec<Tensor>,
    pub labels: Option<Vec<usize>>,
    pub num_labels: usize,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> IdxReader<R> {
    fn read_exact(&mut self, path: &Path, buf: &mut [u8]) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format {
                    path: path.to_path_buf(),
                    offset: at,
                    message: "truncated file".into(),
                }
            } else {
                Error::io(path, e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32_be(&mut self, path: &Path) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(path, &mut b)?;
        Ok(u32::from_be_bytes(b))
    }
}

/// Load an IDX image/label file pair. Pixels are scaled into [0, 1];
/// images come out as `H x W x 1` tensors.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<ImageDataset> {
    let f = File::open(images_path).map_err(|e| Error::io(images_path, e))?;
    let mut r = IdxReader { inner: BufReader::new(f), offset: 0 };
    let magic = r.read_u32_be(images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: images_path.to_path_buf(),
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = r.read_u32_be(images_path)? as usize;
    let rows = r.read_u32_be(images_path)? as usize;
    let cols = r.read_u32_be(images_path)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format {
            path: images_path.to_path_buf(),
            offset: 8,
            message: format!("degenerate image dimensions {rows}x{cols}"),
        });
    }
    let mut images = Vec::with_capacity(count);
    let mut buf = vec![0u8; rows * cols];
    for _ in 0..count {
        r.read_exact(images_path, &mut buf)?;
        let data: Vec<f64> = buf.iter().map(|&p| f64::from(p) / 255.0).collect();
        images.push(Tensor::new(vec![rows, cols, 1], data)?);
    }

    let f = File::open(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let mut r = IdxReader { inner: BufReader::new(f), offset: 0 };
    let magic = r.read_u32_be(labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let label_count = r.read_u32_be(labels_path)? as usize;
    if label_count != count {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            offset: 4,
            message: format!("{label_count} labels for {count} images"),
        });
    }
    let mut raw = vec![0u8; label_count];
    r.read_exact(labels_path, &mut raw)?;
    let labels: Vec<usize> = raw.iter().map(|&l| l as usize).collect();
    let num_labels = labels.iter().copied().max().map_or(0, |m| m + 1);

    Ok(ImageDataset {
        name: images_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "idx".into()),
        split: "train".into(),
        shape: vec![rows, cols, 1],
        images,
        labels: Some(labels),
        num_labels,
    })
}

/// Write single-channel images as an IDX file (values scaled back to u8).
pub fn write_idx_images(ds: &ImageDataset, path: &Path) -> Result<()> {
    if ds.shape.len() != 3 || ds.shape[2] != 1 {
        return Err(Error::Precondition(format!(
            "IDX export needs H x W x 1 images, got {:?}",
            ds.shape
        )));
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    w.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).map_err(io)?;
    w.write_all(&(ds.len() as u32).to_be_bytes()).map_err(io)?;
    w.write_all(&(ds.shape[0] as u32).to_be_bytes()).map_err(io)?;
    w.write_all(&(ds.shape[1] as u32).to_be_bytes()).map_err(io)?;
    for img in &ds.images {
        let bytes: Vec<u8> = img
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_idx_labels(labels: &[usize], path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    w.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).map_err(io)?;
    w.write_all(&(labels.len() as u32).to_be_bytes()).map_err(io)?;
    let bytes: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
    w.write_all(&bytes).map_err(io)?;
    w.flush().map_err(io)
}

// ---------------------------------------------------------------------------
// Internal cache format: "IDSC" magic, version, count, per-sample shape,
// has-labels flag, then little-endian f64 pixels and u32 labels.
// ---------------------------------------------------------------------------

const CACHE_MAGIC: &[u8; 4] = b"IDSC";
const CACHE_VERSION: u32 = 1;

pub fn save_cache(ds: &ImageDataset, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    w.write_all(CACHE_MAGIC).map_err(io)?;
    w.write_all(&CACHE_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(ds.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(ds.shape.len() as u32).to_le_bytes()).map_err(io)?;
    for d in &ds.shape {
        w.write_all(&(*d as u32).to_le_bytes()).map_err(io)?;
    }
    w.write_all(&[u8::from(ds.labels.is_some())]).map_err(io)?;
    w.write_all(&(ds.num_labels as u32).to_le_bytes()).map_err(io)?;
    for img in &ds.images {
        for v in img.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    if let Some(labels) = &ds.labels {
        for l in labels {
            w.write_all(&(*l as u32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_cache(path: &Path) -> Result<ImageDataset> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = IdxReader { inner: BufReader::new(f), offset: 0 };
    let mut magic = [0u8; 4];
    r.read_exact(path, &mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad cache magic {magic:?}, expected \"IDSC\""),
        });
    }
    let read_u32 = |r: &mut IdxReader<_>| -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(path, &mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    let version = read_u32(&mut r)?;
    if version != CACHE_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 4,
            message: format!("unsupported cache version {version}"),
        });
    }
    let count = read_u32(&mut r)? as usize;
    let ndims = read_u32(&mut r)? as usize;
    let mut shape = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        shape.push(read_u32(&mut r)? as usize);
    }
    let mut flag = [0u8; 1];
    r.read_exact(path, &mut flag)?;
    let num_labels = read_u32(&mut r)? as usize;
    let per_sample: usize = shape.iter().product();
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let mut data = Vec::with_capacity(per_sample);
        for _ in 0..per_sample {
            let mut b = [0u8; 8];
            r.read_exact(path, &mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        images.push(Tensor::new(shape.clone(), data)?);
    }
    let labels = if flag[0] != 0 {
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            labels.push(read_u32(&mut r)? as usize);
        }
        Some(labels)
    } else {
        None
    };
    Ok(ImageDataset {
        name: "cache".into(),
        split: "train".into(),
        shape,
        images,
        labels,
        num_labels,
    })
}

// ---------------------------------------------------------------------------
// Procedural domain shifts
// ---------------------------------------------------------------------------

/// Label-preserving procedural transforms standing in for the paper-style
/// synthetic target domains.
#[derive(Debug, Clone, PartialEq)]
pub enum ShiftKind {
    /// `p -> 1 - p`; an involution.
    Invert,
    /// Blend the grayscale image against a random per-sample color field
    /// with per-pixel noise; output always has 3 channels.
    ColorizeNoise { noise_scale: f64, blend: f64 },
    /// Random rotation/translation per sample, bilinear resampling.
    AffineJitter { max_rotate_deg: f64, max_translate: f64 },
    /// Stages applied in order; empty list is the identity.
    Composite(Vec<ShiftKind>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub seed: u64,
}

fn validate_kind(kind: &ShiftKind) -> Result<()> {
    match kind {
        ShiftKind::Invert => Ok(()),
        ShiftKind::ColorizeNoise { noise_scale, blend } => {
            if !(0.0..=1.0).contains(noise_scale) || !(0.0..=1.0).contains(blend) {
                return Err(Error::Config(format!(
                    "colorize-noise parameters must be in [0,1]: scale={noise_scale} blend={blend}"
                )));
            }
            Ok(())
        }
        ShiftKind::AffineJitter { max_rotate_deg, max_translate } => {
            if !(0.0..=180.0).contains(max_rotate_deg) || *max_translate < 0.0 {
                return Err(Error::Config(format!(
                    "affine-jitter out of range: rotate={max_rotate_deg} translate={max_translate}"
                )));
            }
            Ok(())
        }
        ShiftKind::Composite(stages) => stages.iter().try_for_each(validate_kind),
    }
}

fn apply_kind(kind: &ShiftKind, img: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    match kind {
        ShiftKind::Invert => Tensor::new(
            img.shape().to_vec(),
            img.data().iter().map(|p| 1.0 - p).collect(),
        ),
        ShiftKind::ColorizeNoise { noise_scale, blend } => {
            let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
            let base: [f64; 3] = [
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
            ];
            let mut out = vec![0.0; h * w * 3];
            for y in 0..h {
                for x in 0..w {
                    let px = &img.data()[(y * w + x) * c..(y * w + x + 1) * c];
                    let gray = px.iter().sum::<f64>() / c as f64;
                    for ch in 0..3 {
                        let noise = noise_scale * rng.gen_range(-1.0..1.0);
                        let colored = (gray - base[ch] + noise).abs();
                        out[(y * w + x) * 3 + ch] =
                            (blend * colored + (1.0 - blend) * gray).clamp(0.0, 1.0);
                    }
                }
            }
            Tensor::new(vec![h, w, 3], out)
        }
        ShiftKind::AffineJitter { max_rotate_deg, max_translate } => {
            let theta = rng.gen_range(-max_rotate_deg..=*max_rotate_deg).to_radians();
            let tx = rng.gen_range(-max_translate..=*max_translate);
            let ty = rng.gen_range(-max_translate..=*max_translate);
            let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let (sin, cos) = theta.sin_cos();
            let mut out = vec![0.0; h * w * c];
            for y in 0..h {
                for x in 0..w {
                    // Inverse map into the input image.
                    let dy = y as f64 - cy - ty;
                    let dx = x as f64 - cx - tx;
                    let sy = cy + dy * cos - dx * sin;
                    let sx = cx + dy * sin + dx * cos;
                    for ch in 0..c {
                        out[(y * w + x) * c + ch] = bilinear(img.data(), h, w, c, sy, sx, ch);
                    }
                }
            }
            Tensor::new(vec![h, w, c], out)
        }
        ShiftKind::Composite(stages) => {
            let mut cur = img.clone();
            for stage in stages {
                cur = apply_kind(stage, &cur, rng)?;
            }
            Ok(cur)
        }
    }
}

fn bilinear(data: &[f64], h: usize, w: usize, c: usize, y: f64, x: f64, ch: usize) -> f64 {
    let at = |yi: i64, xi: i64| -> f64 {
        if yi < 0 || xi < 0 || yi >= h as i64 || xi >= w as i64 {
            0.0
        } else {
            data[(yi as usize * w + xi as usize) * c + ch]
        }
    };
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as i64, x0 as i64);
    at(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + at(y0, x0 + 1) * (1.0 - fy) * fx
        + at(y0 + 1, x0) * fy * (1.0 - fx)
        + at(y0 + 1, x0 + 1) * fy * fx
}

/// Apply the shift to every sample; deterministic per (spec, seed).
pub fn make_shifted_domain(src: &ImageDataset, spec: &ShiftSpec) -> Result<ImageDataset> {
    validate_kind(&spec.kind)?;
    let mut images = Vec::with_capacity(src.len());
    for (i, img) in src.images.iter().enumerate() {
        let mut rng = substream_indexed(spec.seed, "shift", i as u64);
        images.push(apply_kind(&spec.kind, img, &mut rng)?);
    }
    let shape = images
        .first()
        .map(|t| t.shape().to_vec())
        .unwrap_or_else(|| src.shape.clone());
    Ok(ImageDataset {
        name: format!("{}-shifted", src.name),
        split: src.split.clone(),
        shape,
        images,
        labels: src.labels.clone(),
        num_labels: src.num_labels,
    })
}

/// Replicate grayscale images to `channels` (used to pair a grayscale
/// source with a colorized target).
pub fn replicate_channels(ds: &ImageDataset, channels: usize) -> Result<ImageDataset> {
    if ds.shape.len() != 3 {
        return Err(Error::Precondition(format!(
            "channel replication needs H x W x C images, got {:?}",
            ds.shape
        )));
    }
    let (h, w, c) = (ds.shape[0], ds.shape[1], ds.shape[2]);
    if c == channels {
        return Ok(ds.clone());
    }
    if c != 1 {
        return Err(Error::Precondition(format!(
            "can only replicate single-channel images, got {c} channels"
        )));
    }
    let images = ds
        .images
        .iter()
        .map(|img| {
            let mut out = vec![0.0; h * w * channels];
            for (i, &v) in img.data().iter().enumerate() {
                for ch in 0..channels {
                    out[i * channels + ch] = v;
                }
            }
            Tensor::new(vec![h, w, channels], out)
        })
        .collect::<Result<_>>()?;
    Ok(ImageDataset {
        shape: vec![h, w, channels],
        images,
        ..ds.clone()
    })
}

// ---------------------------------------------------------------------------
// Synthetic 2-D point sets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Synthetic2dKind {
    TwoBlobs,
    TwoMoonsLike,
}

impl Synthetic2dKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "two-blobs" => Ok(Synthetic2dKind::TwoBlobs),
            "two-moons-like" => Ok(Synthetic2dKind::TwoMoonsLike),
            other => Err(Error::Config(format!("unknown 2-D dataset kind: {other}"))),
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller from two uniforms.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn draw_2d(kind: Synthetic2dKind, n_per_class: usize, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Vec<usize>) {
    let mut points = Vec::with_capacity(2 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for i in 0..2 * n_per_class {
        let class = i % 2;
        let (x, y) = match kind {
            Synthetic2dKind::TwoBlobs => {
                let cx = if class == 0 { -1.0 } else { 1.0 };
                (cx + 0.3 * gaussian(rng), 0.3 * gaussian(rng))
            }
            Synthetic2dKind::TwoMoonsLike => {
                let t = rng.gen_range(0.0..std::f64::consts::PI);
                let noise = 0.1;
                if class == 0 {
                    (t.cos() + noise * gaussian(rng), t.sin() + noise * gaussian(rng))
                } else {
                    (
                        1.0 - t.cos() + noise * gaussian(rng),
                        0.5 - t.sin() + noise * gaussian(rng),
                    )
                }
            }
        };
        points.push(Tensor::from_vec(vec![x, y]));
        labels.push(class);
    }
    (points, labels)
}

/// Labeled 2-D source set and an independently drawn, rotated and
/// translated target set with identical label semantics.
pub fn make_synthetic_2d(
    kind: Synthetic2dKind,
    n_per_class: usize,
    rotation_deg: f64,
    translation: (f64, f64),
    seed: u64,
) -> Result<(ImageDataset, ImageDataset)> {
    if n_per_class == 0 {
        return Err(Error::Precondition("n_per_class must be >= 1".into()));
    }
    let mut rng = substream(seed, "synth2d");
    let (src_pts, src_labels) = draw_2d(kind, n_per_class, &mut rng);
    let (tgt_pts, tgt_labels) = draw_2d(kind, n_per_class, &mut rng);
    let theta = rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let tgt_pts: Vec<Tensor> = tgt_pts
        .into_iter()
        .map(|p| {
            let (x, y) = (p.data()[0], p.data()[1]);
            Tensor::from_vec(vec![
                x * cos - y * sin + translation.0,
                x * sin + y * cos + translation.1,
            ])
        })
        .collect();
    let mk = |name: &str, images, labels| ImageDataset {
        name: name.into(),
        split: "train".into(),
        shape: vec![2],
        images,
        labels: Some(labels),
        num_labels: 2,
    };
    Ok((
        mk("synth2d-source", src_pts, src_labels),
        mk("synth2d-target", tgt_pts, tgt_labels),
    ))
}

// ---------------------------------------------------------------------------
// Synthetic digits: a procedural 10-class 28x28 grayscale task with
// per-sample affine and intensity jitter, used as a self-contained
// stand-in for file-based digit corpora.
// ---------------------------------------------------------------------------

const DIGIT_FONT: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
];

fn font_value(digit: usize, row: f64, col: f64) -> f64 {
    // Bilinear interpolation over the 7x5 glyph grid, zero outside.
    let at = |r: i64, c: i64| -> f64 {
        if !(0..7).contains(&r) || !(0..5).contains(&c) {
            return 0.0;
        }
        f64::from((DIGIT_FONT[digit][r as usize] >> (4 - c as usize)) & 1)
    };
    let (r0, c0) = (row.floor(), col.floor());
    let (fr, fc) = (row - r0, col - c0);
    let (r0, c0) = (r0 as i64, c0 as i64);
    at(r0, c0) * (1.0 - fr) * (1.0 - fc)
        + at(r0, c0 + 1) * (1.0 - fr) * fc
        + at(r0 + 1, c0) * fr * (1.0 - fc)
        + at(r0 + 1, c0 + 1) * fr * fc
}

fn render_digit(digit: usize, rng: &mut ChaCha8Rng) -> Tensor {
    const SIZE: usize = 28;
    // Deliberately wide per-sample variation (pose, shear, stroke weight,
    // elastic warp, contrast, noise) so a few thousand samples cannot be
    // memorized in a handful of epochs and feature learning stays active
    // for the whole training schedule.
    let scale = rng.gen_range(2.0..3.2);
    let theta: f64 = rng.gen_range(-0.3..0.3); // ~17 degrees
    let shear = rng.gen_range(-0.15..0.15);
    let cx = 13.5 + rng.gen_range(-2.5..2.5);
    let cy = 13.5 + rng.gen_range(-2.5..2.5);
    let brightness = rng.gen_range(0.7..1.0);
    let noise = rng.gen_range(0.02..0.08);
    // Stroke-weight jitter: remap glyph coverage around a moving cut
    // point so strokes render thinner or fatter per sample.
    let cut = rng.gen_range(0.1..0.3);
    // Low-frequency elastic warp.
    let warp_amp = rng.gen_range(0.0..0.8);
    let warp_kx = rng.gen_range(0.15..0.45);
    let warp_ky = rng.gen_range(0.15..0.45);
    let warp_phase_x = rng.gen_range(0.0..std::f64::consts::TAU);
    let warp_phase_y = rng.gen_range(0.0..std::f64::consts::TAU);
    let (sin, cos) = theta.sin_cos();
    let mut out = vec![0.0; SIZE * SIZE];
    for y in 0..SIZE {
        for x in 0..SIZE {
            let wy = y as f64 + warp_amp * (warp_kx * x as f64 + warp_phase_x).sin();
            let wx = x as f64 + warp_amp * (warp_ky * y as f64 + warp_phase_y).sin();
            let dy = wy - cy;
            let dx = wx - cx + shear * dy;
            let row = (dy * cos - dx * sin) / scale + 3.0;
            let col = (dy * sin + dx * cos) / scale + 2.0;
            let ink = ((font_value(digit, row, col) - cut) / (1.0 - cut)).clamp(0.0, 1.0);
            let v = brightness * ink + noise * rng.gen_range(-1.0..1.0);
            out[y * SIZE + x] = v.clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![SIZE, SIZE, 1], out).expect("fixed shape")
}

/// `n` synthetic digit images, classes cycling 0..=9 so the set is
/// balanced. Deterministic per seed.
pub fn make_synthetic_digits(n: usize, seed: u64, name: &str, split: &str) -> ImageDataset {
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % 10;
        let mut rng = substream_indexed(seed, "digit", i as u64);
        images.push(render_digit(digit, &mut rng));
        labels.push(digit);
    }
    ImageDataset {
        name: name.into(),
        split: split.into(),
        shape: vec![28, 28, 1],
        images,
        labels: Some(labels),
        num_labels: 10,
    }
}

/// Class-stratified seeded subset of `n` samples (random subset when the
/// dataset is unlabeled).
pub fn subset(ds: &ImageDataset, n: usize, seed: u64) -> Result<ImageDataset> {
    if n > ds.len() {
        return Err(Error::Precondition(format!(
            "cannot take {n} samples from a dataset of {}",
            ds.len()
        )));
    }
    let mut rng = substream(seed, "subset");
    let picked: Vec<usize> = match &ds.labels {
        Some(labels) => {
            let num_classes = ds.num_labels.max(1);
            let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
            for (i, &l) in labels.iter().enumerate() {
                per_class[l].push(i);
            }
            for c in per_class.iter_mut() {
                c.shuffle(&mut rng);
            }
            // n / L per class, remainder distributed to the lowest classes.
            let base = n / num_classes;
            let rem = n % num_classes;
            let mut picked = Vec::with_capacity(n);
            for (c, ids) in per_class.iter().enumerate() {
                let want = base + usize::from(c < rem);
                if ids.len() < want {
                    return Err(Error::Precondition(format!(
                        "class {c} has only {} samples, need {want} for a stratified subset",
                        ids.len()
                    )));
                }
                picked.extend_from_slice(&ids[..want]);
            }
            picked.sort_unstable();
            picked
        }
        None => {
            let mut ids: Vec<usize> = (0..ds.len()).collect();
            ids.shuffle(&mut rng);
            ids.truncate(n);
            ids.sort_unstable();
            ids
        }
    };
    Ok(ImageDataset {
        images: picked.iter().map(|&i| ds.images[i].clone()).collect(),
        labels: ds
            .labels
            .as_ref()
            .map(|l| picked.iter().map(|&i| l[i]).collect()),
        ..ds.clone()
    })
}

/// Write one CSV row per sample: id, domain tag, true label (empty when
/// unlabeled), then the flattened feature vector.
pub fn export_features(
    model: &DannModel,
    ds: &ImageDataset,
    domain: &str,
    path: &Path,
) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    let dim = model.feature_dim();
    let header: Vec<String> = ["sample_id", "domain", "true_label"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..dim).map(|i| format!("f_{i}")))
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (i, img) in ds.images.iter().enumerate() {
        let feats = model.features(img)?;
        let label = ds
            .labels
            .as_ref()
            .map(|l| l[i].to_string())
            .unwrap_or_default();
        write!(w, "{i},{domain},{label}").map_err(io)?;
        for v in feats.data() {
            write!(w, ",{v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_digits(n: usize) -> ImageDataset {
        make_synthetic_digits(n, 5, "digits", "train")
    }

    #[test]
    fn idx_round_trip_and_scaling() {
        let dir = tempdir().unwrap();
        let ds = tiny_digits(30);
        let ip = dir.path().join("images.idx");
        let lp = dir.path().join("labels.idx");
        write_idx_images(&ds, &ip).unwrap();
        write_idx_labels(ds.labels.as_ref().unwrap(), &lp).unwrap();
        let loaded = load_idx(&ip, &lp).unwrap();
        assert_eq!(loaded.len(), 30);
        assert_eq!(loaded.shape, vec![28, 28, 1]);
        assert_eq!(loaded.labels.as_ref().unwrap(), ds.labels.as_ref().unwrap());
        for img in &loaded.images {
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn idx_bad_magic_is_positioned() {
        let dir = tempdir().unwrap();
        let ip = dir.path().join("bad.idx");
        let lp = dir.path().join("labels.idx");
        std::fs::write(&ip, 0x0000_0804u32.to_be_bytes()).unwrap();
        write_idx_labels(&[0], &lp).unwrap();
        match load_idx(&ip, &lp) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn idx_count_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let ds = tiny_digits(10);
        let ip = dir.path().join("images.idx");
        let lp = dir.path().join("labels.idx");
        write_idx_images(&ds, &ip).unwrap();
        write_idx_labels(&[0, 1, 2], &lp).unwrap();
        match load_idx(&ip, &lp) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn cache_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let ds = tiny_digits(12);
        let path = dir.path().join("ds.idsc");
        save_cache(&ds, &path).unwrap();
        let loaded = load_cache(&path).unwrap();
        assert_eq!(loaded.len(), ds.len());
        for (a, b) in loaded.images.iter().zip(&ds.images) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(loaded.labels, ds.labels);
    }

    #[test]
    fn invert_is_an_involution() {
        let ds = tiny_digits(5);
        let spec = ShiftSpec { kind: ShiftKind::Invert, seed: 1 };
        let once = make_shifted_domain(&ds, &spec).unwrap();
        let twice = make_shifted_domain(&once, &spec).unwrap();
        for (a, b) in twice.images.iter().zip(&ds.images) {
            // 1 - (1 - p) can differ from p in the last ulp.
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn empty_composite_is_identity() {
        let ds = tiny_digits(4);
        let spec = ShiftSpec { kind: ShiftKind::Composite(vec![]), seed: 9 };
        let out = make_shifted_domain(&ds, &spec).unwrap();
        for (a, b) in out.images.iter().zip(&ds.images) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn colorize_noise_is_deterministic_and_three_channel() {
        let ds = tiny_digits(6);
        let spec = ShiftSpec {
            kind: ShiftKind::ColorizeNoise { noise_scale: 0.1, blend: 1.0 },
            seed: 42,
        };
        let a = make_shifted_domain(&ds, &spec).unwrap();
        let b = make_shifted_domain(&ds, &spec).unwrap();
        assert_eq!(a.shape, vec![28, 28, 3]);
        let checksum = |d: &ImageDataset| -> f64 {
            d.images.iter().flat_map(|t| t.data()).sum()
        };
        assert_eq!(checksum(&a).to_bits(), checksum(&b).to_bits());
        assert_eq!(a.labels, ds.labels);
    }

    #[test]
    fn synthetic_2d_is_deterministic() {
        let (s1, t1) =
            make_synthetic_2d(Synthetic2dKind::TwoBlobs, 20, 30.0, (0.5, 0.0), 3).unwrap();
        let (s2, t2) =
            make_synthetic_2d(Synthetic2dKind::TwoBlobs, 20, 30.0, (0.5, 0.0), 3).unwrap();
        assert_eq!(s1.images[0].data(), s2.images[0].data());
        assert_eq!(t1.images[0].data(), t2.images[0].data());
        assert_eq!(s1.len(), 40);
    }

    #[test]
    fn zero_shift_keeps_distributions_aligned() {
        let (s, t) =
            make_synthetic_2d(Synthetic2dKind::TwoBlobs, 200, 0.0, (0.0, 0.0), 7).unwrap();
        let mean = |ds: &ImageDataset, class: usize| -> f64 {
            let pts: Vec<f64> = ds
                .images
                .iter()
                .zip(ds.labels.as_ref().unwrap())
                .filter(|(_, &l)| l == class)
                .map(|(p, _)| p.data()[0])
                .collect();
            pts.iter().sum::<f64>() / pts.len() as f64
        };
        assert!((mean(&s, 0) - mean(&t, 0)).abs() < 0.2);
        assert!((mean(&s, 1) - mean(&t, 1)).abs() < 0.2);
    }

    #[test]
    fn stratified_subset_balances_classes() {
        let ds = tiny_digits(200);
        let sub = subset(&ds, 50, 13).unwrap();
        let labels = sub.labels.as_ref().unwrap();
        for c in 0..10 {
            assert_eq!(labels.iter().filter(|&&l| l == c).count(), 5);
        }
        let again = subset(&ds, 50, 13).unwrap();
        assert_eq!(again.labels, sub.labels);
        assert!(subset(&ds, 500, 13).is_err());
    }

    #[test]
    fn digits_are_learnable_shapes() {
        let ds = tiny_digits(20);
        // Glyphs must produce non-trivial ink and differ across classes.
        for img in &ds.images {
            let ink: f64 = img.data().iter().sum();
            assert!(ink > 5.0, "digit rendered almost empty");
        }
        let a: f64 = ds.images[0].data().iter().sum();
        let b: f64 = ds.images[1].data().iter().sum();
        assert_ne!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn replicate_channels_triples_grayscale() {
        let ds = tiny_digits(3);
        let rgb = replicate_channels(&ds, 3).unwrap();
        assert_eq!(rgb.shape, vec![28, 28, 3]);
        let first = &rgb.images[0];
        let orig = &ds.images[0];
        for i in 0..10 {
            for ch in 0..3 {
                assert_eq!(first.data()[i * 3 + ch], orig.data()[i]);
            }
        }
    }
}
