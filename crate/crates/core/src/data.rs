//! Procedural Gaussian-blob image distributions and the `FRZS` dataset
//! container.
//!
//! Each class has a base hue (golden-angle spaced, independent of the class
//! count) and draws a few soft elliptical blobs over a flat background. The
//! `shift` knob moves every rendering parameter linearly from the source
//! defaults towards a fixed target direction: hue rotation, background
//! colour, blob size, blob count and elongation all change together.

use std::path::Path;

use crate::binio::{decode_kv, encode_kv, kv_get, kv_parse, Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"FRZS";
pub const DATASET_VERSION: u32 = 1;

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;
const CHANNELS: usize = 3;

/// Target-side extremes reached at `shift = 1`.
const SHIFT_HUE: f64 = 2.0 * std::f64::consts::FRAC_PI_3;
const SHIFT_BACKGROUND: [f64; 3] = [0.35, 0.1, -0.3];
const SHIFT_RADIUS_SCALE: f64 = 0.8;
const SHIFT_EXTRA_BLOBS: f64 = 2.0;
const SHIFT_ELONGATION: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_classes: usize,
    /// Inclusive range of blobs per image.
    pub blob_count: (usize, usize),
    /// Blob centres are uniform in this box, as a fraction of the image side.
    pub center_box: (f64, f64),
    /// Blob radius range, as a fraction of the image side.
    pub radius: (f64, f64),
    pub color_jitter: f64,
    pub background: [f64; 3],
    pub shift: f64,
    pub image_size: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_classes: 5,
            blob_count: (1, 3),
            center_box: (0.2, 0.8),
            radius: (0.08, 0.2),
            color_jitter: 0.15,
            background: [-0.8, -0.8, -0.7],
            shift: 0.0,
            image_size: 16,
        }
    }
}

/// Rendering parameters of one class after applying `shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassParams {
    pub color: [f64; 3],
    pub background: [f64; 3],
    pub blob_count: (usize, usize),
    pub radius: (f64, f64),
    pub center_box: (f64, f64),
    pub elongation: f64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.n_classes == 0 || self.image_size == 0 {
            return bad("dataset needs classes and a positive image size".into());
        }
        if self.blob_count.0 == 0 || self.blob_count.0 > self.blob_count.1 {
            return bad(format!("invalid blob count range {:?}", self.blob_count));
        }
        let (lo, hi) = self.center_box;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return bad(format!("invalid centre box {:?}", self.center_box));
        }
        if !(self.radius.0 > 0.0 && self.radius.0 < self.radius.1) {
            return bad(format!("invalid radius range {:?}", self.radius));
        }
        if !(0.0..=1.0).contains(&self.shift) {
            return bad(format!("shift {} outside [0,1]", self.shift));
        }
        if !(self.color_jitter >= 0.0) || self.background.iter().any(|c| !(-1.0..=1.0).contains(c)) {
            return bad("invalid colour parameters".into());
        }
        Ok(())
    }

    pub fn class_params(&self, class: usize) -> ClassParams {
        let s = self.shift;
        let hue = class as f64 * GOLDEN_ANGLE + s * SHIFT_HUE;
        let third = 2.0 * std::f64::consts::FRAC_PI_3;
        let color = [0.85 * hue.cos(), 0.85 * (hue - third).cos(), 0.85 * (hue + third).cos()];
        let mut background = self.background;
        for (b, t) in background.iter_mut().zip(SHIFT_BACKGROUND) {
            *b += s * (t - *b);
        }
        let extra = (s * SHIFT_EXTRA_BLOBS).round() as usize;
        let scale = 1.0 + s * SHIFT_RADIUS_SCALE;
        ClassParams {
            color,
            background,
            blob_count: (self.blob_count.0 + extra, self.blob_count.1 + extra),
            radius: (self.radius.0 * scale, self.radius.1 * scale),
            center_box: self.center_box,
            elongation: 1.0 + s * SHIFT_ELONGATION,
        }
    }

    pub(crate) fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let f = |v: f64| format!("{v:?}");
        vec![
            ("family", "blobs".to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("blob_min", self.blob_count.0.to_string()),
            ("blob_max", self.blob_count.1.to_string()),
            ("center_lo", f(self.center_box.0)),
            ("center_hi", f(self.center_box.1)),
            ("radius_lo", f(self.radius.0)),
            ("radius_hi", f(self.radius.1)),
            ("color_jitter", f(self.color_jitter)),
            ("bg_r", f(self.background[0])),
            ("bg_g", f(self.background[1])),
            ("bg_b", f(self.background[2])),
            ("shift", f(self.shift)),
            ("image_size", self.image_size.to_string()),
        ]
    }

    pub(crate) fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let family = kv_get(pairs, "family")?;
        if family != "blobs" {
            return Err(Error::Format(format!("unknown dataset family {family:?}")));
        }
        Ok(Self {
            n_classes: kv_parse(pairs, "n_classes")?,
            blob_count: (kv_parse(pairs, "blob_min")?, kv_parse(pairs, "blob_max")?),
            center_box: (kv_parse(pairs, "center_lo")?, kv_parse(pairs, "center_hi")?),
            radius: (kv_parse(pairs, "radius_lo")?, kv_parse(pairs, "radius_hi")?),
            color_jitter: kv_parse(pairs, "color_jitter")?,
            background: [
                kv_parse(pairs, "bg_r")?,
                kv_parse(pairs, "bg_g")?,
                kv_parse(pairs, "bg_b")?,
            ],
            shift: kv_parse(pairs, "shift")?,
            image_size: kv_parse(pairs, "image_size")?,
        })
    }

    /// Renders image `index` of class `class`; a pure function of its inputs.
    pub fn render(&self, class: usize, seed: u64, index: u64) -> Vec<f64> {
        let p = self.class_params(class);
        let mut rng = SplitMix64::new(seed ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03));
        rng.next_u64();
        let size = self.image_size;
        let mut img = vec![0.0; CHANNELS * size * size];
        for c in 0..CHANNELS {
            img[c * size * size..(c + 1) * size * size].fill(p.background[c]);
        }
        let span = p.blob_count.1 - p.blob_count.0 + 1;
        let blobs = p.blob_count.0 + rng.below(span);
        for _ in 0..blobs {
            let cx = rng.uniform(p.center_box.0, p.center_box.1);
            let cy = rng.uniform(p.center_box.0, p.center_box.1);
            let r = rng.uniform(p.radius.0, p.radius.1);
            let (rx, ry) = if rng.next_f64() < 0.5 {
                (r * p.elongation, r / p.elongation)
            } else {
                (r / p.elongation, r * p.elongation)
            };
            let mut color = p.color;
            for v in &mut color {
                *v = (*v + rng.uniform(-self.color_jitter, self.color_jitter)).clamp(-1.0, 1.0);
            }
            for y in 0..size {
                let dy = ((y as f64 + 0.5) / size as f64 - cy) / ry;
                for x in 0..size {
                    let dx = ((x as f64 + 0.5) / size as f64 - cx) / rx;
                    let a = (-0.5 * (dx * dx + dy * dy)).exp();
                    for (c, col) in color.iter().enumerate() {
                        let px = &mut img[(c * size + y) * size + x];
                        *px = (*px * (1.0 - a) + col * a).clamp(-1.0, 1.0);
                    }
                }
            }
        }
        img
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, 3, H, W]` in `[-1, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub spec: DatasetSpec,
    pub seed: u64,
}

/// Class-major dataset: `n_per_class` images of class 0, then class 1, ...
pub fn make_dataset(spec: &DatasetSpec, n_per_class: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(Error::config("n_per_class must be at least 1"));
    }
    let n = spec.n_classes * n_per_class;
    let mut data = Vec::with_capacity(n * CHANNELS * spec.image_size * spec.image_size);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.n_classes {
        for i in 0..n_per_class {
            let index = (class * n_per_class + i) as u64;
            data.extend(spec.render(class, seed, index));
            labels.push(class);
        }
    }
    let images = Tensor::new(vec![n, CHANNELS, spec.image_size, spec.image_size], data)?;
    Ok(Dataset {
        images,
        labels,
        spec: spec.clone(),
        seed,
    })
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    /// Uniform sampling with replacement from `rng`.
    pub fn sample_batch(&self, batch: usize, rng: &mut SplitMix64) -> Result<Batch> {
        if self.is_empty() {
            return Err(Error::usage("cannot sample from an empty dataset"));
        }
        if batch == 0 {
            return Err(Error::usage("batch size must be positive"));
        }
        let indices: Vec<usize> = (0..batch).map(|_| rng.below(self.len())).collect();
        Ok(self.gather(&indices))
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        Batch {
            indices: indices.to_vec(),
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        let mut pairs = self.spec.to_pairs();
        pairs.push(("seed", self.seed.to_string()));
        w.blob(&encode_kv(&pairs));
        let s = self.images.shape();
        w.u32(s[0] as u32);
        for &d in &s[1..] {
            w.u32(d as u32);
        }
        for &l in &self.labels {
            w.u32(l as u32);
        }
        w.f64s(self.images.data());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        let version = r.u32("version")?;
        if version != DATASET_VERSION {
            return Err(Error::Version(version));
        }
        let pairs = decode_kv(&r.blob("spec blob")?)?;
        let spec = DatasetSpec::from_pairs(&pairs)?;
        let seed = kv_parse(&pairs, "seed")?;
        let n = r.u32("sample count")? as usize;
        let c = r.u32("channels")? as usize;
        let h = r.u32("height")? as usize;
        let w = r.u32("width")? as usize;
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Format(format!("degenerate dataset shape {n}x{c}x{h}x{w}")));
        }
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            labels.push(r.u32(&format!("label {i}"))? as usize);
        }
        let per = c * h * w;
        let mut data = Vec::with_capacity(n * per);
        for i in 0..n {
            data.extend(r.f64s(per, &format!("image {i}"))?);
        }
        r.finish()?;
        Ok(Self {
            images: Tensor::new(vec![n, c, h, w], data)?,
            labels,
            spec,
            seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
