//! Synthetic fundus-like dataset generation with controllable domain shift.
//!
//! Each class plants blobs with class-specific geometry (count, radius,
//! intensity, color, placement region) on a shared background texture, so
//! class evidence is spatially localized and patch-level supervision has
//! real signal. The domain shift recolors, flattens contrast, blurs, and
//! adds noise — enough to degrade a source-trained classifier without
//! touching lesion geometry.
//!
//! Generation is a pure function of `(spec, shift, n, seed)`: per-sample
//! generators are derived from the master seed by counter, so any sample
//! (and its lesion mask) can be regenerated independently.

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

/// Fractional placement rectangle inside the image (0..1 coordinates).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Region {
    pub y0: f64,
    pub y1: f64,
    pub x0: f64,
    pub x1: f64,
}

/// Per-class blob geometry.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LesionRule {
    pub blob_count: (usize, usize),
    pub radius: (f64, f64),
    pub intensity: (f64, f64),
    /// How the blob intensity lands per channel; negative entries darken.
    pub channel_weights: [f64; 3],
    pub region: Region,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackgroundParams {
    pub base: [f64; 3],
    pub vignette: f64,
    pub texture_amp: f64,
    pub grain: f64,
}

/// Full description of the synthetic benchmark's image distribution.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub lesion_rules: Vec<LesionRule>,
    pub background: BackgroundParams,
    /// Relative class frequencies; uniform by default.
    pub label_weights: Vec<f64>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        // Four classes; the background is class-agnostic so blob geometry is
        // the only class evidence.
        let rules = vec![
            // small bright green-ish spots, upper-left quadrant
            LesionRule {
                blob_count: (2, 4),
                radius: (1.6, 2.8),
                intensity: (0.45, 0.7),
                channel_weights: [0.2, 1.0, 0.25],
                region: Region { y0: 0.05, y1: 0.45, x0: 0.05, x1: 0.45 },
            },
            // bright yellow blobs scattered along the lower band
            LesionRule {
                blob_count: (3, 5),
                radius: (1.4, 2.4),
                intensity: (0.4, 0.65),
                channel_weights: [1.0, 0.85, 0.1],
                region: Region { y0: 0.55, y1: 0.95, x0: 0.05, x1: 0.95 },
            },
            // one large dark disc near the center
            LesionRule {
                blob_count: (1, 1),
                radius: (4.5, 6.5),
                intensity: (0.5, 0.75),
                channel_weights: [-0.9, -0.7, -0.4],
                region: Region { y0: 0.35, y1: 0.65, x0: 0.35, x1: 0.65 },
            },
            // blue-ish cluster in the upper-right quadrant
            LesionRule {
                blob_count: (2, 3),
                radius: (2.0, 3.2),
                intensity: (0.45, 0.7),
                channel_weights: [0.15, 0.3, 1.0],
                region: Region { y0: 0.05, y1: 0.45, x0: 0.55, x1: 0.95 },
            },
        ];
        SynthSpec {
            num_classes: 4,
            image_size: 32,
            channels: 3,
            lesion_rules: rules,
            background: BackgroundParams {
                base: [0.58, 0.34, 0.22],
                vignette: 0.35,
                texture_amp: 0.05,
                grain: 0.015,
            },
            label_weights: vec![1.0; 4],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.lesion_rules.len() != self.num_classes
            || self.label_weights.len() != self.num_classes
        {
            return Err(Error::Config(format!(
                "lesion_rules ({}) and label_weights ({}) must both match num_classes ({})",
                self.lesion_rules.len(),
                self.label_weights.len(),
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Photometric target-domain transform; identity leaves pixels untouched.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DomainShift {
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    pub contrast: f64,
    pub noise_sigma: f64,
    pub blur: bool,
}

impl DomainShift {
    pub fn identity() -> Self {
        DomainShift {
            gain: [1.0; 3],
            bias: [0.0; 3],
            contrast: 1.0,
            noise_sigma: 0.0,
            blur: false,
        }
    }

    /// Default target-domain shift, calibrated so the source model loses
    /// roughly 15–30 average-accuracy points.
    pub fn target_default() -> Self {
        Self::target_scaled(1.0)
    }

    /// Target shift with a strength knob; `scale` = 0 is the identity.
    /// Gains stay at or below 1 and biases are small, so the transform
    /// dims and scrambles color without clipping lesion evidence away.
    pub fn target_scaled(scale: f64) -> Self {
        let s = scale;
        DomainShift {
            gain: [1.0 - 0.18 * s, 1.0 - 0.28 * s, 1.0 - 0.38 * s],
            bias: [0.10 * s, 0.14 * s, 0.18 * s],
            contrast: 1.0 - 0.15 * s,
            noise_sigma: 0.02 * s,
            blur: s >= 0.5,
        }
    }

    pub fn is_identity(&self) -> bool {
        self == &Self::identity()
    }

    fn apply(&self, img: &mut [f64], c: usize, h: usize, w: usize, rng: &mut impl Rng) {
        for ci in 0..c {
            let plane = &mut img[ci * h * w..(ci + 1) * h * w];
            for v in plane.iter_mut() {
                *v = *v * self.gain[ci] + self.bias[ci];
                *v = (*v - 0.5) * self.contrast + 0.5;
            }
        }
        if self.blur {
            box_blur_3x3(img, c, h, w);
        }
        if self.noise_sigma > 0.0 {
            for v in img.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += self.noise_sigma * z;
            }
        }
        for v in img.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

fn box_blur_3x3(img: &mut [f64], c: usize, h: usize, w: usize) {
    let mut tmp = vec![0.0; h * w];
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc += plane[yy * w + xx];
                    }
                }
                tmp[y * w + x] = acc / 9.0;
            }
        }
        plane.copy_from_slice(&tmp);
    }
}

/// In-memory dataset; sample ids are the stable range `0..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Vec<f64>,
    labels: Vec<u16>,
    pub n: usize,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub domain: String,
    pub split: String,
}

/// Label-free borrow of a dataset; the adaptation loop only ever sees this
/// view, so target labels cannot leak into training by construction.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledView<'a> {
    images: &'a [f64],
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LabeledDataset {
    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn image(&self, id: usize) -> &[f64] {
        let sz = self.channels * self.height * self.width;
        &self.images[id * sz..(id + 1) * sz]
    }

    pub fn unlabeled(&self) -> UnlabeledView<'_> {
        UnlabeledView {
            images: &self.images,
            n: self.n,
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }

    /// Copies the given samples into a [B×C×H×W] batch tensor.
    pub fn batch_images(&self, ids: &[usize]) -> Result<Tensor> {
        batch_from(&self.images, self.n, self.channels, self.height, self.width, ids)
    }

    pub fn batch_labels(&self, ids: &[usize]) -> Vec<u16> {
        ids.iter().map(|&i| self.labels[i]).collect()
    }

    /// Exports sample `id` as a binary PGM (channel mean) for inspection.
    pub fn export_pgm(&self, id: usize, path: &Path) -> Result<()> {
        let img = self.image(id);
        let hw = self.height * self.width;
        let gray: Vec<f64> = (0..hw)
            .map(|p| {
                (0..self.channels).map(|c| img[c * hw + p]).sum::<f64>() / self.channels as f64
            })
            .collect();
        write_pgm(&gray, self.width, self.height, path)
    }
}

impl<'a> UnlabeledView<'a> {
    pub fn image(&self, id: usize) -> &'a [f64] {
        let sz = self.channels * self.height * self.width;
        &self.images[id * sz..(id + 1) * sz]
    }

    pub fn batch_images(&self, ids: &[usize]) -> Result<Tensor> {
        batch_from(self.images, self.n, self.channels, self.height, self.width, ids)
    }
}

fn batch_from(
    images: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ids: &[usize],
) -> Result<Tensor> {
    let sz = c * h * w;
    let mut out = Vec::with_capacity(ids.len() * sz);
    for &id in ids {
        if id >= n {
            return Err(Error::UnknownSample { id, len: n });
        }
        out.extend_from_slice(&images[id * sz..(id + 1) * sz]);
    }
    Tensor::new(vec![ids.len(), c, h, w], out)
}

/// Writes grayscale values in [0,1] as binary PGM (maxval 255).
pub fn write_pgm(values: &[f64], width: usize, height: usize, path: &Path) -> Result<()> {
    assert_eq!(values.len(), width * height);
    let mut buf = format!("P5\n{} {}\n255\n", width, height).into_bytes();
    buf.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, buf)?;
    Ok(())
}

// ── generation ──────────────────────────────────────────────────────────

/// Stratified label assignment: largest-remainder quotas per class, then a
/// deterministic shuffle.
fn assign_labels(spec: &SynthSpec, n: usize, seed: u64) -> Vec<u16> {
    let total_w: f64 = spec.label_weights.iter().sum();
    let mut quota: Vec<usize> = Vec::with_capacity(spec.num_classes);
    let mut fracs: Vec<(usize, f64)> = Vec::with_capacity(spec.num_classes);
    let mut assigned = 0;
    for (c, w) in spec.label_weights.iter().enumerate() {
        let exact = w / total_w * n as f64;
        let base = exact.floor() as usize;
        quota.push(base);
        assigned += base;
        fracs.push((c, exact - base as f64));
    }
    fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for i in 0..n - assigned {
        quota[fracs[i % fracs.len()].0] += 1;
    }
    let mut labels: Vec<u16> = Vec::with_capacity(n);
    for (c, &q) in quota.iter().enumerate() {
        labels.extend(std::iter::repeat_n(c as u16, q));
    }
    let mut rng = rng_for(seed, 0xA55, 0, 0);
    for i in (1..labels.len()).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    labels
}

fn synth_sample(spec: &SynthSpec, label: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<bool>) {
    let (c, s) = (spec.channels, spec.image_size);
    let hw = s * s;
    let mut img = vec![0.0; c * hw];
    let mut mask = vec![false; hw];
    let bg = &spec.background;

    let light = 1.0 + rng.random_range(-0.08..0.08);
    let fx = rng.random_range(1.0..2.5);
    let fy = rng.random_range(1.0..2.5);
    let ph1 = rng.random_range(0.0..2.0 * PI);
    let ph2 = rng.random_range(0.0..2.0 * PI);
    let half = (s as f64 - 1.0) / 2.0;

    for y in 0..s {
        for x in 0..s {
            let dy = (y as f64 - half) / half;
            let dx = (x as f64 - half) / half;
            let r2 = dy * dy + dx * dx;
            let vign = 1.0 - bg.vignette * r2 * 0.5;
            let tex = bg.texture_amp
                * (fx * 2.0 * PI * x as f64 / s as f64 + ph1).sin()
                * (fy * 2.0 * PI * y as f64 / s as f64 + ph2).sin();
            for ci in 0..c {
                let z: f64 = StandardNormal.sample(rng);
                img[ci * hw + y * s + x] = bg.base[ci] * light * vign + tex + bg.grain * z;
            }
        }
    }

    let rule = &spec.lesion_rules[label];
    let count = rng.random_range(rule.blob_count.0..=rule.blob_count.1);
    for _ in 0..count {
        let cy = rng.random_range(rule.region.y0 * s as f64..rule.region.y1 * s as f64);
        let cx = rng.random_range(rule.region.x0 * s as f64..rule.region.x1 * s as f64);
        let rad = rng.random_range(rule.radius.0..rule.radius.1);
        let inten = rng.random_range(rule.intensity.0..rule.intensity.1);
        let r2max = rad * rad;
        let y_lo = (cy - rad).floor().max(0.0) as usize;
        let y_hi = ((cy + rad).ceil() as usize).min(s - 1);
        let x_lo = (cx - rad).floor().max(0.0) as usize;
        let x_hi = ((cx + rad).ceil() as usize).min(s - 1);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                if d2 <= r2max {
                    let fall = 1.0 - d2 / r2max;
                    for ci in 0..c {
                        img[ci * hw + y * s + x] += inten * fall * rule.channel_weights[ci];
                    }
                    mask[y * s + x] = true;
                }
            }
        }
    }

    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    (img, mask)
}

/// Generates the dataset together with per-sample lesion masks (h×w booleans).
pub fn generate_with_masks(
    spec: &SynthSpec,
    shift: &DomainShift,
    n: usize,
    seed: u64,
    domain: &str,
    split: &str,
) -> Result<(LabeledDataset, Vec<Vec<bool>>)> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let labels = assign_labels(spec, n, seed);
    let sz = spec.channels * spec.image_size * spec.image_size;
    let mut images = Vec::with_capacity(n * sz);
    let mut masks = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = rng_for(seed, 1, i as u64, 0);
        let (mut img, mask) = synth_sample(spec, label as usize, &mut rng);
        shift.apply(
            &mut img,
            spec.channels,
            spec.image_size,
            spec.image_size,
            &mut rng,
        );
        images.extend_from_slice(&img);
        masks.push(mask);
    }
    Ok((
        LabeledDataset {
            images,
            labels,
            n,
            num_classes: spec.num_classes,
            channels: spec.channels,
            height: spec.image_size,
            width: spec.image_size,
            domain: domain.to_string(),
            split: split.to_string(),
        },
        masks,
    ))
}

/// Concatenates two datasets with matching geometry; ids renumber to
/// `0..a.n + b.n`.
pub fn concat(a: &LabeledDataset, b: &LabeledDataset, domain: &str, split: &str) -> Result<LabeledDataset> {
    if (a.num_classes, a.channels, a.height, a.width)
        != (b.num_classes, b.channels, b.height, b.width)
    {
        return Err(Error::shape(
            "concat",
            format!(
                "incompatible datasets: {}x{}x{} k={} vs {}x{}x{} k={}",
                a.channels, a.height, a.width, a.num_classes, b.channels, b.height, b.width,
                b.num_classes
            ),
        ));
    }
    let mut images = a.images.clone();
    images.extend_from_slice(&b.images);
    let mut labels = a.labels.clone();
    labels.extend_from_slice(&b.labels);
    Ok(LabeledDataset {
        images,
        labels,
        n: a.n + b.n,
        num_classes: a.num_classes,
        channels: a.channels,
        height: a.height,
        width: a.width,
        domain: domain.to_string(),
        split: split.to_string(),
    })
}

/// Class-conditional image generation; deterministic in `(spec, shift, n, seed)`.
pub fn generate(
    spec: &SynthSpec,
    shift: &DomainShift,
    n: usize,
    seed: u64,
    domain: &str,
    split: &str,
) -> Result<LabeledDataset> {
    generate_with_masks(spec, shift, n, seed, domain, split).map(|(ds, _)| ds)
}

// ── augmentation ────────────────────────────────────────────────────────

/// Concrete augmentation transform: horizontal flip, rotation, center zoom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub angle_deg: f64,
    pub zoom: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            flip: false,
            angle_deg: 0.0,
            zoom: 1.0,
        }
    }

    /// Flip with probability 0.5, angle uniform in [−5°,5°), zoom uniform in
    /// [0.9, 1.1). Draw order is fixed: flip, angle, zoom.
    pub fn sample(rng: &mut impl Rng) -> Self {
        AugmentParams {
            flip: rng.random_bool(0.5),
            angle_deg: rng.random_range(-5.0..5.0),
            zoom: rng.random_range(0.9..1.1),
        }
    }

    /// Applies the transform with nearest-neighbor resampling about the
    /// center; out-of-range source pixels replicate the edge. Pixels are
    /// only copied, so outputs stay in [0,1].
    pub fn apply(&self, img: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
        let hw = h * w;
        let mut src = img.to_vec();
        if self.flip {
            for ci in 0..c {
                let plane = &mut src[ci * hw..(ci + 1) * hw];
                for y in 0..h {
                    let row = &mut plane[y * w..(y + 1) * w];
                    row.reverse();
                }
            }
        }
        if self.angle_deg == 0.0 && self.zoom == 1.0 {
            return src;
        }
        let ang = self.angle_deg.to_radians();
        let (sin, cos) = ang.sin_cos();
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let mut out = vec![0.0; c * hw];
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                // inverse map: un-zoom then un-rotate
                let sx = cx + (dx * cos + dy * sin) / self.zoom;
                let sy = cy + (-dx * sin + dy * cos) / self.zoom;
                let sy = (sy.round().max(0.0) as usize).min(h - 1);
                let sx = (sx.round().max(0.0) as usize).min(w - 1);
                for ci in 0..c {
                    out[ci * hw + y * w + x] = src[ci * hw + sy * w + sx];
                }
            }
        }
        out
    }
}

/// Samples flip/rotation/zoom from `seed` and applies them.
pub fn augment(img: &[f64], c: usize, h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, 0, 0, 0);
    AugmentParams::sample(&mut rng).apply(img, c, h, w)
}

// ── batching ────────────────────────────────────────────────────────────

/// Epoch-seeded shuffled id batches over `0..n`.
pub fn batch_ids(n: usize, batch_size: usize, shuffle_seed: u64, drop_last: bool) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1);
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(shuffle_seed, 0x1D5, 0, 0);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    let mut out: Vec<Vec<usize>> = ids.chunks(batch_size).map(|c| c.to_vec()).collect();
    if drop_last {
        out.retain(|b| b.len() == batch_size);
    }
    out
}

// ── on-disk format ──────────────────────────────────────────────────────

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

/// Writes `manifest.txt` + `images.bin` (little-endian f64) + `labels.bin`
/// (little-endian u16) under `dir`. Extra manifest keys record how the data
/// was generated so a run can be replayed from the manifest alone.
pub fn save_dataset(ds: &LabeledDataset, dir: &Path, extra: &[(String, String)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut img_bytes = Vec::with_capacity(ds.images.len() * 8);
    for v in &ds.images {
        img_bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut label_bytes = Vec::with_capacity(ds.labels.len() * 2);
    for l in &ds.labels {
        label_bytes.extend_from_slice(&l.to_le_bytes());
    }
    let mut manifest = String::new();
    manifest.push_str("format_version=1\n");
    manifest.push_str(&format!("n={}\n", ds.n));
    manifest.push_str(&format!("k={}\n", ds.num_classes));
    manifest.push_str(&format!("c={}\n", ds.channels));
    manifest.push_str(&format!("h={}\n", ds.height));
    manifest.push_str(&format!("w={}\n", ds.width));
    manifest.push_str(&format!("domain={}\n", ds.domain));
    manifest.push_str(&format!("split={}\n", ds.split));
    manifest.push_str(&format!("images_sha256={}\n", sha256_hex(&img_bytes)));
    manifest.push_str(&format!("labels_sha256={}\n", sha256_hex(&label_bytes)));
    for (k, v) in extra {
        manifest.push_str(&format!("{}={}\n", k, v));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    let mut f = fs::File::create(dir.join("images.bin"))?;
    f.write_all(&img_bytes)?;
    let mut f = fs::File::create(dir.join("labels.bin"))?;
    f.write_all(&label_bytes)?;
    Ok(())
}

fn dataset_err(dir: &Path, detail: impl Into<String>) -> Error {
    Error::Dataset {
        path: dir.display().to_string(),
        detail: detail.into(),
    }
}

/// Reads a dataset directory back; verifies checksums and lengths.
/// Returns the dataset and the full manifest key/value list.
pub fn load_dataset(dir: &Path) -> Result<(LabeledDataset, Vec<(String, String)>)> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| dataset_err(dir, format!("missing manifest.txt: {e}")))?;
    let mut kv = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| dataset_err(dir, format!("malformed manifest line: {line}")))?;
        kv.push((k.trim().to_string(), v.trim().to_string()));
    }
    let get = |key: &str| -> Result<&str> {
        kv.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| dataset_err(dir, format!("manifest missing key {key}")))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| dataset_err(dir, format!("manifest key {key} is not an integer")))
    };
    let n = parse_usize("n")?;
    let k = parse_usize("k")?;
    let c = parse_usize("c")?;
    let h = parse_usize("h")?;
    let w = parse_usize("w")?;
    let domain = get("domain")?.to_string();
    let split = get("split")?.to_string();

    let mut img_bytes = Vec::new();
    fs::File::open(dir.join("images.bin"))
        .map_err(|e| dataset_err(dir, format!("missing images.bin: {e}")))?
        .read_to_end(&mut img_bytes)?;
    let mut label_bytes = Vec::new();
    fs::File::open(dir.join("labels.bin"))
        .map_err(|e| dataset_err(dir, format!("missing labels.bin: {e}")))?
        .read_to_end(&mut label_bytes)?;

    if sha256_hex(&img_bytes) != get("images_sha256")? {
        return Err(dataset_err(dir, "images.bin checksum mismatch"));
    }
    if sha256_hex(&label_bytes) != get("labels_sha256")? {
        return Err(dataset_err(dir, "labels.bin checksum mismatch"));
    }
    let expect_img = n * c * h * w * 8;
    if img_bytes.len() != expect_img {
        return Err(dataset_err(
            dir,
            format!(
                "images.bin holds {} bytes, manifest implies {}",
                img_bytes.len(),
                expect_img
            ),
        ));
    }
    if label_bytes.len() != n * 2 {
        return Err(dataset_err(
            dir,
            format!(
                "labels.bin holds {} bytes, manifest implies {}",
                label_bytes.len(),
                n * 2
            ),
        ));
    }
    let images: Vec<f64> = img_bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let labels: Vec<u16> = label_bytes
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(dataset_err(dir, format!("label {bad} outside 0..{k}")));
    }
    Ok((
        LabeledDataset {
            images,
            labels,
            n,
            num_classes: k,
            channels: c,
            height: h,
            width: w,
            domain,
            split,
        },
        kv,
    ))
}
