//! Image datasets: CIFAR binary I/O, augmentation, input noise and a
//! synthetic stand-in for quick runs.
//!
//! Images are stored as `[n, 32, 32, 3]` (HWC) `f32` in `[0, 1]`.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_LEN: usize = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;
const PLANE: usize = IMAGE_SIZE * IMAGE_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl ImageDataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset(format!("{split:?} split has no images")));
        }
        if images.len() != labels.len() * IMAGE_LEN {
            return Err(Error::shape(
                "dataset",
                format!("{} labels but {} pixel values", labels.len(), images.len()),
            ));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {l} >= {num_classes} classes")));
        }
        if images.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("pixel outside [0,1]".into()));
        }
        Ok(ImageDataset {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]
    }

    /// Stacks the given images into a `[b,32,32,3]` tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * IMAGE_LEN);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let t = Tensor::new(vec![indices.len(), IMAGE_SIZE, IMAGE_SIZE, CHANNELS], data)
            .expect("batch shape");
        (t, labels)
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        let (t, labels) = self.batch(indices);
        ImageDataset::new(t.into_data(), labels, self.num_classes, split)
    }

    /// The first `n` images (or all of them).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.split)
    }

    /// Holds out `fraction` of the images (chosen by `seed`) as a validation split.
    pub fn split_validation(&self, fraction: f32, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!("validation fraction {fraction}")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        shuffle(&mut idx, &mut seed::rng(seed, &[0x5a11]));
        let n_val = ((self.len() as f32 * fraction).round() as usize).max(1);
        let (val, train) = idx.split_at(n_val);
        let mut val = val.to_vec();
        let mut train = train.to_vec();
        val.sort_unstable();
        train.sort_unstable();
        Ok((self.subset(&train, Split::Train)?, self.subset(&val, Split::Val)?))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

pub(crate) fn shuffle<R: Rng + ?Sized>(v: &mut [usize], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    /// Label bytes preceding the pixel planes in each record.
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + IMAGE_LEN
    }

    fn train_files(self) -> Vec<String> {
        match self {
            CifarVariant::Cifar10 => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            CifarVariant::Cifar100 => vec!["train.bin".into()],
        }
    }

    fn test_file(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "test_batch.bin",
            CifarVariant::Cifar100 => "test.bin",
        }
    }
}

/// Decodes CIFAR binary records (label byte(s), then red, green and blue
/// 32×32 planes). CIFAR-100 uses the fine label.
pub fn decode_cifar(bytes: &[u8], variant: CifarVariant) -> Result<(Vec<f32>, Vec<usize>)> {
    let rec = variant.record_len();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {rec}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let mut images = Vec::with_capacity(n * IMAGE_LEN);
    let mut labels = Vec::with_capacity(n);
    for record in bytes.chunks_exact(rec) {
        let label = record[variant.label_bytes() - 1] as usize;
        if label >= variant.num_classes() {
            return Err(Error::Format(format!("label {label} out of range")));
        }
        labels.push(label);
        let planes = &record[variant.label_bytes()..];
        for p in 0..PLANE {
            for c in 0..CHANNELS {
                images.push(planes[c * PLANE + p] as f32 / 255.0);
            }
        }
    }
    Ok((images, labels))
}

/// Encodes a dataset as CIFAR records. Pixels are rounded to bytes; the
/// CIFAR-100 coarse label is written as 0.
pub fn encode_cifar(data: &ImageDataset, variant: CifarVariant) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * variant.record_len());
    for i in 0..data.len() {
        if variant == CifarVariant::Cifar100 {
            out.push(0);
        }
        out.push(data.labels[i] as u8);
        let img = data.image(i);
        for c in 0..CHANNELS {
            for p in 0..PLANE {
                out.push((img[p * CHANNELS + c] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

pub fn read_cifar_file(path: &Path, variant: CifarVariant, split: Split) -> Result<ImageDataset> {
    let bytes = fs::read(path)?;
    let (images, labels) =
        decode_cifar(&bytes, variant).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    ImageDataset::new(images, labels, variant.num_classes(), split)
}

pub fn write_cifar_file(path: &Path, data: &ImageDataset, variant: CifarVariant) -> Result<()> {
    fs::write(path, encode_cifar(data, variant))?;
    Ok(())
}

/// Loads the shipped train and test splits from a directory holding the
/// standard binary files.
pub fn load_cifar(dir: &Path, variant: CifarVariant) -> Result<(ImageDataset, ImageDataset)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in variant.train_files() {
        let d = read_cifar_file(&dir.join(name), variant, Split::Train)?;
        images.extend_from_slice(d.pixels());
        labels.extend_from_slice(d.labels());
    }
    let train = ImageDataset::new(images, labels, variant.num_classes(), Split::Train)?;
    let test = read_cifar_file(&dir.join(variant.test_file()), variant, Split::Test)?;
    Ok((train, test))
}

/// Per-image geometric augmentation drawn by [`augment`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub angle_deg: f32,
    /// Horizontal shift in pixels (positive moves content right).
    pub shift_x: f32,
    /// Vertical shift in pixels (positive moves content down).
    pub shift_y: f32,
    pub flip: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        angle_deg: 0.0,
        shift_x: 0.0,
        shift_y: 0.0,
        flip: false,
    };

    pub const MAX_ANGLE_DEG: f32 = 20.0;
    pub const MAX_SHIFT_FRACTION: f32 = 0.2;

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let s = Self::MAX_SHIFT_FRACTION * IMAGE_SIZE as f32;
        AugmentParams {
            angle_deg: rng.random_range(-Self::MAX_ANGLE_DEG..=Self::MAX_ANGLE_DEG),
            shift_x: rng.random_range(-s..=s),
            shift_y: rng.random_range(-s..=s),
            flip: rng.random_bool(0.5),
        }
    }
}

pub fn flip_horizontal(img: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; IMAGE_LEN];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let src = (y * IMAGE_SIZE + (IMAGE_SIZE - 1 - x)) * CHANNELS;
            let dst = (y * IMAGE_SIZE + x) * CHANNELS;
            out[dst..dst + CHANNELS].copy_from_slice(&img[src..src + CHANNELS]);
        }
    }
    out
}

/// Flip, then rotate about the image centre and translate, resampling
/// bilinearly. Samples falling outside the image take the nearest edge pixel.
pub fn transform_image(img: &[f32], p: &AugmentParams) -> Vec<f32> {
    let base = if p.flip { flip_horizontal(img) } else { img.to_vec() };
    if p.angle_deg == 0.0 && p.shift_x == 0.0 && p.shift_y == 0.0 {
        return base;
    }
    let (sin, cos) = (p.angle_deg * PI / 180.0).sin_cos();
    let c = (IMAGE_SIZE as f32 - 1.0) / 2.0;
    let max = (IMAGE_SIZE - 1) as f32;
    let mut out = vec![0.0; IMAGE_LEN];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            // inverse map: undo the shift, then rotate back by -angle
            let dx = x as f32 - c - p.shift_x;
            let dy = y as f32 - c - p.shift_y;
            let sx = (cos * dx + sin * dy + c).clamp(0.0, max);
            let sy = (-sin * dx + cos * dy + c).clamp(0.0, max);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(IMAGE_SIZE - 1), (y0 + 1).min(IMAGE_SIZE - 1));
            let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
            let dst = (y * IMAGE_SIZE + x) * CHANNELS;
            for ch in 0..CHANNELS {
                let at = |xx: usize, yy: usize| base[(yy * IMAGE_SIZE + xx) * CHANNELS + ch];
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                out[dst + ch] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Random rotation (±20°), width/height shift (±20%) and horizontal flip
/// (p = 0.5) for every image of a `[b,32,32,3]` batch. Image `i` draws from
/// a stream derived from `(seed, i)`.
pub fn augment(batch: &Tensor, seed: u64) -> Result<Tensor> {
    check_batch(batch)?;
    let mut out = Vec::with_capacity(batch.len());
    for (i, img) in batch.data().chunks(IMAGE_LEN).enumerate() {
        let params = AugmentParams::sample(&mut seed::rng(seed, &[i as u64]));
        out.extend(transform_image(img, &params));
    }
    Tensor::new(batch.shape().to_vec(), out)
}

fn check_batch(batch: &Tensor) -> Result<()> {
    let s = batch.shape();
    if s.len() != 4 || s[1..] != [IMAGE_SIZE, IMAGE_SIZE, CHANNELS] {
        return Err(Error::shape("image batch", format!("expected [b,32,32,3], got {s:?}")));
    }
    Ok(())
}

/// Adds i.i.d. `N(0, sigma²)` noise to every pixel. Values are left
/// unclipped unless `clip` is set.
pub fn add_gaussian_noise(batch: &Tensor, sigma: f32, seed: u64, clip: bool) -> Result<Tensor> {
    add_gaussian_noise_from(batch, sigma, seed, 0, clip)
}

/// As [`add_gaussian_noise`], with image `i` of the batch drawing from the
/// stream of global index `first_index + i`; results do not depend on how a
/// dataset is cut into batches.
pub fn add_gaussian_noise_from(
    batch: &Tensor,
    sigma: f32,
    seed: u64,
    first_index: usize,
    clip: bool,
) -> Result<Tensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(batch.clone());
    }
    let normal = Normal::new(0.0f32, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let per_image = batch.len() / batch.shape().first().copied().unwrap_or(1).max(1);
    let mut out = batch.clone();
    for (i, img) in out.data_mut().chunks_mut(per_image.max(1)).enumerate() {
        let mut rng = seed::rng(seed, &[0x401e, (first_index + i) as u64]);
        for v in img.iter_mut() {
            *v += normal.sample(&mut rng);
            if clip {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Knobs of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// Contrast range of the class texture.
    pub signal: (f32, f32),
    /// Contrast range of the distractor texture.
    pub distractor: (f32, f32),
    /// Probability that an image carries a distractor.
    pub distractor_prob: f64,
    /// Standard deviation of the per-pixel background noise.
    pub pixel_noise: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 4,
            signal: (0.15, 0.35),
            distractor: (0.05, 0.25),
            distractor_prob: 0.7,
            pixel_noise: 0.06,
        }
    }
}

const PALETTE: [[f32; 3]; 10] = [
    [1.0, -0.5, -0.5],
    [-0.5, 1.0, -0.5],
    [-0.5, -0.5, 1.0],
    [0.5, 0.5, -1.0],
    [-1.0, 0.5, 0.5],
    [0.5, -1.0, 0.5],
    [1.0, 0.0, -1.0],
    [-1.0, 1.0, 0.0],
    [0.0, -1.0, 1.0],
    [1.0, 1.0, -2.0],
];

struct Patch {
    class: usize,
    contrast: f32,
    cx: f32,
    cy: f32,
    radius: f32,
    phase: f32,
    angle: f32,
}

fn paint_patch(img: &mut [f32], patch: &Patch) {
    let color = PALETTE[patch.class % PALETTE.len()];
    let period = 4.0 + (patch.class / PALETTE.len()) as f32;
    let (sin, cos) = patch.angle.sin_cos();
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let dx = x as f32 - patch.cx;
            let dy = y as f32 - patch.cy;
            let envelope = (-(dx * dx + dy * dy) / (2.0 * patch.radius * patch.radius)).exp();
            let along = dx * cos + dy * sin;
            let wave = 0.5 + 0.5 * (2.0 * PI * along / period + patch.phase).cos();
            let amp = patch.contrast * envelope * wave;
            let dst = (y * IMAGE_SIZE + x) * CHANNELS;
            for ch in 0..CHANNELS {
                img[dst + ch] += amp * (0.5 + 0.5 * color[ch]);
            }
        }
    }
}

/// Generates `n` labelled 32×32 RGB images. Class `k` is an oriented
/// grating with class-specific orientation and tint under a Gaussian
/// envelope near the image centre; most images also carry a weaker
/// off-centre distractor patch of a different class. Labels cycle
/// round-robin, so classes are balanced to within one image.
pub fn synthetic_dataset(n: usize, spec: &SyntheticSpec, seed: u64) -> Result<ImageDataset> {
    let k = spec.num_classes;
    if k < 2 {
        return Err(Error::InvalidArgument("synthetic data needs at least 2 classes".into()));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!("{n} images for {k} classes")));
    }
    let mut images = Vec::with_capacity(n * IMAGE_LEN);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        let mut rng = seed::rng(seed, &[0x5e7, i as u64]);
        let mut img = vec![0.0f32; IMAGE_LEN];
        let base: f32 = 0.35 + rng.random_range(-0.06..0.06);
        for v in img.iter_mut() {
            *v = base;
        }
        let angle_of = |c: usize| c as f32 * PI / k as f32;
        let jitter: f32 = rng.sample::<f32, _>(StandardNormal) * 0.08;
        let target = Patch {
            class,
            contrast: rng.random_range(spec.signal.0..=spec.signal.1),
            cx: 15.5 + rng.random_range(-4.0..=4.0),
            cy: 15.5 + rng.random_range(-4.0..=4.0),
            radius: rng.random_range(5.5..=8.0),
            phase: rng.random_range(0.0..2.0 * PI),
            angle: angle_of(class) + jitter,
        };
        paint_patch(&mut img, &target);
        if rng.random_bool(spec.distractor_prob) {
            let other = (class + rng.random_range(1..k)) % k;
            let corner_x = if rng.random_bool(0.5) { 6.0 } else { 25.0 };
            let corner_y = if rng.random_bool(0.5) { 6.0 } else { 25.0 };
            let distractor = Patch {
                class: other,
                contrast: rng.random_range(spec.distractor.0..=spec.distractor.1),
                cx: corner_x + rng.random_range(-2.0..=2.0),
                cy: corner_y + rng.random_range(-2.0..=2.0),
                radius: rng.random_range(3.0..=4.5),
                phase: rng.random_range(0.0..2.0 * PI),
                angle: angle_of(other) + jitter,
            };
            paint_patch(&mut img, &distractor);
        }
        for v in img.iter_mut() {
            let noise: f32 = rng.sample(StandardNormal);
            *v = (*v + spec.pixel_noise * noise).clamp(0.0, 1.0);
        }
        images.extend(img);
        labels.push(class);
    }
    ImageDataset::new(images, labels, k, Split::Train)
}

/// Accuracy of a nearest-class-mean classifier on raw pixels, fitted on
/// `train` and scored on `test`.
pub fn nearest_centroid_accuracy(train: &ImageDataset, test: &ImageDataset) -> f32 {
    let k = train.num_classes();
    let mut centroids = vec![vec![0.0f64; IMAGE_LEN]; k];
    let counts = train.class_counts();
    for i in 0..train.len() {
        for (c, &p) in centroids[train.labels()[i]].iter_mut().zip(train.image(i)) {
            *c += p as f64;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        for v in c.iter_mut() {
            *v /= n.max(1) as f64;
        }
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let img = test.image(i);
            let dist = |c: &Vec<f64>| -> f64 { c.iter().zip(img).map(|(a, &b)| (a - b as f64).powi(2)).sum() };
            let best = (0..k)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap();
            best == test.labels()[i]
        })
        .count();
    correct as f32 / test.len() as f32
}
