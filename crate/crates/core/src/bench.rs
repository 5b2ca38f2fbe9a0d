//! Desk-scale shift benchmark: a procedural dataset of grayscale shapes,
//! severity-parameterized corruptions, and the `TTTD` raw image container.
//!
//! Severity table (index = severity − 1):
//!
//! | kind           | parameter                     | 1    | 2   | 3    | 4    | 5    |
//! |----------------|-------------------------------|------|-----|------|------|------|
//! | gaussian-noise | noise std                     | 0.04 | 0.08| 0.12 | 0.18 | 0.26 |
//! | shot-noise     | photon scale                  | 250  | 100 | 50   | 25   | 12   |
//! | defocus-blur   | box radius × passes           | 1×1  | 1×2 | 2×1  | 2×2  | 3×2  |
//! | contrast       | factor about the image mean   | 0.75 | 0.6 | 0.45 | 0.3  | 0.15 |
//! | brightness     | additive offset               | 0.08 | 0.16| 0.24 | 0.32 | 0.4  |
//! | pixelate       | nearest-neighbor downscale    | 1.33 | 2   | 2.67 | 4    | 8    |
//! | quantize       | gray levels                   | 24   | 16  | 12   | 8    | 5    |
//!
//! Every output is clamped to `[0, 1]`.
//!
//! `TTTD` layout (little endian): magic `b"TTTD"`, then `u32` version (1),
//! count, channels, height, width, then `count·C·H·W` bytes, one per pixel,
//! value `byte / 255`. Labels live in a CSV with header `id,label`, where `id`
//! is the image's position in the container.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Prng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SHAPESET_SIZE: usize = 32;
pub const SHAPESET_CLASSES: [&str; 8] = [
    "disk",
    "square",
    "triangle",
    "cross",
    "ring",
    "bar-horizontal",
    "bar-vertical",
    "checker",
];

pub const RAW_MAGIC: &[u8; 4] = b"TTTD";
pub const RAW_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    DefocusBlur,
    Contrast,
    Brightness,
    Pixelate,
    Quantize,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 7] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::Pixelate,
        CorruptionKind::Quantize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::ShotNoise => "shot-noise",
            CorruptionKind::DefocusBlur => "defocus-blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Quantize => "quantize",
        }
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Config(format!("severity {severity} outside 1..=5")));
        }
        Ok(CorruptionSpec { kind, severity })
    }

    fn level(&self) -> usize {
        self.severity as usize - 1
    }
}

impl fmt::Display for CorruptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.name(), self.severity)
    }
}

/// Parses `kind:severity`, e.g. `gaussian-noise:3`.
impl FromStr for CorruptionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (k, sev) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("corruption `{s}` is not of the form kind:severity")))?;
        let sev = sev
            .parse::<u8>()
            .map_err(|_| Error::Config(format!("bad severity in `{s}`")))?;
        CorruptionSpec::new(k.parse()?, sev)
    }
}

impl Serialize for CorruptionSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CorruptionSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

const GAUSSIAN_STD: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
const SHOT_SCALE: [f64; 5] = [250.0, 100.0, 50.0, 25.0, 12.0];
const BLUR_RADIUS: [usize; 5] = [1, 1, 2, 2, 3];
const BLUR_PASSES: [usize; 5] = [1, 2, 1, 2, 2];
const CONTRAST: [f64; 5] = [0.75, 0.6, 0.45, 0.3, 0.15];
const BRIGHTNESS: [f64; 5] = [0.08, 0.16, 0.24, 0.32, 0.4];
const PIXELATE: [f64; 5] = [1.33, 2.0, 2.67, 4.0, 8.0];
const QUANTIZE: [f64; 5] = [24.0, 16.0, 12.0, 8.0, 5.0];

/// Applies `spec` to an image `[C, H, W]` and clamps to `[0, 1]`.
pub fn corrupt<T: Scalar>(image: &Tensor<T>, spec: CorruptionSpec, rng: &mut Prng) -> Result<Tensor<T>> {
    let out = corrupt_unclamped(image, spec, rng)?;
    Ok(out.map(|v| v.max(T::zero()).min(T::one())))
}

/// [`corrupt`] without the final clamp, for statistical checks.
pub fn corrupt_unclamped<T: Scalar>(image: &Tensor<T>, spec: CorruptionSpec, rng: &mut Prng) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("corrupt", &[1, SHAPESET_SIZE, SHAPESET_SIZE], s));
    }
    CorruptionSpec::new(spec.kind, spec.severity)?;
    let l = spec.level();
    let (h, w) = (s[1], s[2]);
    Ok(match spec.kind {
        CorruptionKind::GaussianNoise => {
            let sd = GAUSSIAN_STD[l];
            let mut out = image.clone();
            for v in out.data_mut() {
                *v += T::lit(sd * rng::normal(rng));
            }
            out
        }
        CorruptionKind::ShotNoise => {
            let k = SHOT_SCALE[l];
            let mut out = image.clone();
            for v in out.data_mut() {
                let lam = v.as_f64().clamp(0.0, 1.0) * k;
                *v = T::lit(rng::poisson(rng, lam) / k);
            }
            out
        }
        CorruptionKind::DefocusBlur => {
            let mut out = image.clone();
            for _ in 0..BLUR_PASSES[l] {
                out = box_blur(&out, h, w, BLUR_RADIUS[l]);
            }
            out
        }
        CorruptionKind::Contrast => {
            let f = T::lit(CONTRAST[l]);
            let mut out = image.clone();
            for plane in out.data_mut().chunks_exact_mut(h * w) {
                let mean = T::lit(plane.iter().map(|v| v.as_f64()).sum::<f64>() / (h * w) as f64);
                for v in plane {
                    *v = mean + (*v - mean) * f;
                }
            }
            out
        }
        CorruptionKind::Brightness => {
            let b = T::lit(BRIGHTNESS[l]);
            image.map(|v| v + b)
        }
        CorruptionKind::Pixelate => {
            let f = PIXELATE[l];
            let sh = ((h as f64 / f).round() as usize).max(1);
            let sw = ((w as f64 / f).round() as usize).max(1);
            let d = image.data();
            Tensor::from_fn(s, |i| {
                let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
                // nearest by pixel centers: output pixel -> small cell -> source pixel
                let (ys, xs) = ((2 * y + 1) * sh / (2 * h), (2 * x + 1) * sw / (2 * w));
                let (y0, x0) = ((2 * ys + 1) * h / (2 * sh), (2 * xs + 1) * w / (2 * sw));
                d[(ch * h + y0) * w + x0]
            })
        }
        CorruptionKind::Quantize => {
            let q = QUANTIZE[l] - 1.0;
            image.map(|v| T::lit((v.as_f64().clamp(0.0, 1.0) * q).round() / q))
        }
    })
}

/// Mean over a `(2r+1)²` window with clamp-to-edge borders.
fn box_blur<T: Scalar>(image: &Tensor<T>, h: usize, w: usize, r: usize) -> Tensor<T> {
    let d = image.data();
    let r = r as isize;
    let inv = T::one() / T::lit(((2 * r + 1) * (2 * r + 1)) as f64);
    Tensor::from_fn(image.shape(), |i| {
        let (ch, y, x) = (i / (h * w), ((i / w) % h) as isize, (i % w) as isize);
        let mut acc = T::zero();
        for dy in -r..=r {
            let yy = (y + dy).clamp(0, h as isize - 1) as usize;
            for dx in -r..=r {
                let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                acc += d[(ch * h + yy) * w + xx];
            }
        }
        acc * inv
    })
}

/// Renders one ShapeSet image of class `label` from its own generator.
pub fn render_shape(label: usize, rng: &mut Prng) -> Tensor<f32> {
    let n = SHAPESET_SIZE;
    let r = rng::uniform(rng, 6.0, 10.0);
    let margin = r + 1.0;
    let cx = rng::uniform(rng, margin, n as f64 - margin);
    let cy = rng::uniform(rng, margin, n as f64 - margin);
    let fg = rng::uniform(rng, 0.6, 1.0);
    let bg = rng::uniform(rng, 0.0, 0.3);
    let (gx, gy) = (rng::uniform(rng, -0.1, 0.1), rng::uniform(rng, -0.1, 0.1));
    // smooth sinusoidal texture with a period of 8 to 16 pixels
    let amp = rng::uniform(rng, 0.02, 0.06);
    let freq = std::f64::consts::TAU / rng::uniform(rng, 8.0, 16.0);
    let theta = rng::uniform(rng, 0.0, std::f64::consts::TAU);
    let phase = rng::uniform(rng, 0.0, std::f64::consts::TAU);
    let (fx, fy) = (freq * theta.cos(), freq * theta.sin());
    let cell = (r / 2.0).max(2.0);
    let inside = |x: f64, y: f64| -> bool {
        let (dx, dy) = (x - cx, y - cy);
        let dist = (dx * dx + dy * dy).sqrt();
        match label {
            0 => dist <= r,
            1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            2 => {
                // apex up, base at cy + r
                let t = (dy + r) / (2.0 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
            3 => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
            4 => dist <= r && dist >= 0.55 * r,
            5 => dx.abs() <= 1.2 * r && dy.abs() <= 0.3 * r,
            6 => dy.abs() <= 1.2 * r && dx.abs() <= 0.3 * r,
            _ => {
                dx.abs() <= r
                    && dy.abs() <= r
                    && (((dx + r) / cell).floor() as i64 + ((dy + r) / cell).floor() as i64) % 2 == 0
            }
        }
    };
    let mut data = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            // 2×2 supersampling for coverage
            let mut cover = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                if inside(x as f64 + ox, y as f64 + oy) {
                    cover += 0.25;
                }
            }
            let base = bg + gx * (x as f64 / n as f64 - 0.5) + gy * (y as f64 / n as f64 - 0.5);
            let texture = amp * (fx * x as f64 + fy * y as f64 + phase).sin();
            let v = base + cover * (fg - base) + texture + 0.01 * rng::normal(rng);
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Tensor::new(&[1, n, n], data).expect("finite pixels")
}

/// `n_per_class` images of each of the eight classes, interleaved by class.
/// Image `i` depends only on `(seed, i)`, so a smaller `n_per_class` yields a
/// prefix of a larger one.
pub fn gen_shapeset(n_per_class: usize, seed: u64) -> Dataset<f32> {
    let k = SHAPESET_CLASSES.len();
    let mut images = Vec::with_capacity(n_per_class * k);
    let mut labels = Vec::with_capacity(n_per_class * k);
    for i in 0..n_per_class * k {
        let label = i % k;
        let mut r = rng::seeded(rng::derive_seed(seed, i as u64));
        images.push(render_shape(label, &mut r));
        labels.push(label);
    }
    let ids = (0..images.len() as u64).collect();
    Dataset {
        images,
        labels,
        ids,
        classes: k,
    }
}

/// Corrupts every image with a generator derived from `(seed, id)`.
pub fn corrupt_dataset<T: Scalar>(data: &Dataset<T>, spec: CorruptionSpec, seed: u64) -> Result<Dataset<T>> {
    let images = data
        .images
        .iter()
        .enumerate()
        .map(|(i, im)| corrupt(im, spec, &mut rng::seeded(rng::derive_seed(seed, data.ids[i]))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        images,
        labels: data.labels.clone(),
        ids: data.ids.clone(),
        classes: data.classes,
    })
}

pub fn save_raw_dataset<T: Scalar>(data: &Dataset<T>, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let (c, h, w) = match data.image_shape() {
        Some(s) => (s[0], s[1], s[2]),
        None => (0, 0, 0),
    };
    let mut bytes = Vec::with_capacity(24 + data.len() * c * h * w);
    bytes.extend_from_slice(RAW_MAGIC);
    for v in [RAW_VERSION, data.len() as u32, c as u32, h as u32, w as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for im in &data.images {
        bytes.extend(im.data().iter().map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    std::fs::write(images, bytes)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(labels)?);
    writeln!(f, "id,label")?;
    for (i, y) in data.labels.iter().enumerate() {
        writeln!(f, "{i},{y}")?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a `TTTD` container and its label CSV. The class count is one more
/// than the largest label unless `classes` is given.
pub fn load_raw_dataset(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    classes: Option<usize>,
) -> Result<Dataset<f32>> {
    let bytes = std::fs::read(images)?;
    let header = |i: usize| -> Result<u32> {
        bytes
            .get(4 + 4 * i..8 + 4 * i)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::Format(format!("truncated image container: {} header bytes", bytes.len())))
    };
    if bytes.len() < 4 || &bytes[..4] != RAW_MAGIC {
        return Err(Error::Format("bad magic, expected TTTD".into()));
    }
    let version = header(0)?;
    if version != RAW_VERSION {
        return Err(Error::Format(format!("unsupported image container version {version}")));
    }
    let (n, c, h, w) = (
        header(1)? as usize,
        header(2)? as usize,
        header(3)? as usize,
        header(4)? as usize,
    );
    let px = c * h * w;
    let want = 24 + n * px;
    if bytes.len() != want {
        return Err(Error::Format(format!(
            "image container length {} does not match header ({want} bytes for {n}×{c}×{h}×{w})",
            bytes.len()
        )));
    }
    let images: Vec<Tensor<f32>> = bytes[24..]
        .chunks_exact(px.max(1))
        .take(n)
        .map(|chunk| Tensor::new(&[c, h, w], chunk.iter().map(|&b| b as f32 / 255.0).collect()).unwrap())
        .collect();

    let text = std::fs::read_to_string(labels)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("id,label") {
        return Err(Error::Format("label CSV must start with header `id,label`".into()));
    }
    let mut found: Vec<Option<usize>> = vec![None; n];
    let mut count = 0;
    for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Format(format!("label CSV line {}: `{line}`", ln + 2));
        let (id, y) = line.split_once(',').ok_or_else(bad)?;
        let id: usize = id.trim().parse().map_err(|_| bad())?;
        let y: usize = y.trim().parse().map_err(|_| bad())?;
        let slot = found.get_mut(id).ok_or_else(|| Error::Format(format!("label id {id} beyond {n} images")))?;
        if slot.replace(y).is_some() {
            return Err(Error::Format(format!("duplicate label id {id}")));
        }
        count += 1;
    }
    if count != n {
        return Err(Error::Format(format!("{count} labels for {n} images")));
    }
    let labels: Vec<usize> = found.into_iter().map(Option::unwrap).collect();
    let k = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(images, labels, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_parsing() {
        let s: CorruptionSpec = "pixelate:4".parse().unwrap();
        assert_eq!(s.kind, CorruptionKind::Pixelate);
        assert_eq!(s.to_string(), "pixelate:4");
        assert!("pixelate:6".parse::<CorruptionSpec>().is_err());
        assert!("fog:1".parse::<CorruptionSpec>().is_err());
        assert!("contrast".parse::<CorruptionSpec>().is_err());
    }

    #[test]
    fn pixelate_sizes() {
        let im = Tensor::<f32>::from_fn(&[1, 32, 32], |i| (i % 7) as f32 / 7.0);
        let out = corrupt(&im, "pixelate:5".parse().unwrap(), &mut rng::seeded(0)).unwrap();
        // 4×4 cells of 8×8 pixels, each showing its center pixel
        assert_eq!(out.data()[0], out.data()[7 * 32 + 7]);
        assert_eq!(out.data()[0], im.data()[4 * 32 + 4]);
        assert_eq!(out.data()[8], im.data()[4 * 32 + 12]);
    }
}
