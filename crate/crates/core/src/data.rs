//! Image datasets: CIFAR-10 binary batches, a synthetic stripe-pattern
//! generator, per-channel normalization and seeded mini-batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::{cast, Real};
use crate::tensor::Tensor;

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];
pub const CIFAR10_SHAPE: [usize; 3] = [3, 32, 32];
pub const CIFAR10_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR10_TEST_FILE: &str = "test_batch.bin";
const CIFAR10_RECORDS_PER_FILE: usize = 10_000;
/// Class names, one per line, as in the CIFAR-10 distribution.
pub const META_FILE: &str = "batches.meta.txt";
/// `C H W` of the images when they are not 3×32×32.
pub const SHAPE_FILE: &str = "shape.txt";

/// Per-channel affine normalization `(x/255 − mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Images kept as raw bytes (channel-planar, row-major) and converted to
/// normalized tensors per batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    image_shape: [usize; 3],
    class_names: Vec<String>,
    norm: Normalization,
}

impl Dataset {
    /// Builds a dataset and normalizes it with its own channel statistics.
    pub fn new(
        pixels: Vec<u8>,
        labels: Vec<u8>,
        image_shape: [usize; 3],
        class_names: Vec<String>,
    ) -> Result<Self> {
        let image_len: usize = image_shape.iter().product();
        if image_len == 0 || pixels.len() != labels.len() * image_len {
            return Err(Error::Data(format!(
                "{} pixel bytes do not hold {} images of shape {image_shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_names.len()) {
            return Err(Error::Data(format!(
                "label {bad} outside [0, {})",
                class_names.len()
            )));
        }
        let mut ds = Dataset {
            pixels,
            labels,
            image_shape,
            class_names,
            norm: Normalization {
                mean: vec![0.0; image_shape[0]],
                std: vec![1.0; image_shape[0]],
            },
        };
        ds.norm = ds.channel_stats();
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    /// Replaces the normalization, e.g. with training-split constants.
    pub fn with_normalization(mut self, norm: Normalization) -> Result<Self> {
        if norm.mean.len() != self.image_shape[0] || norm.std.len() != self.image_shape[0] {
            return Err(Error::Data(format!(
                "normalization for {} channels applied to {}-channel images",
                norm.mean.len(),
                self.image_shape[0]
            )));
        }
        self.norm = norm;
        Ok(self)
    }

    fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image_bytes(&self, index: usize) -> &[u8] {
        let len = self.image_len();
        &self.pixels[index * len..(index + 1) * len]
    }

    /// Mean and (population) standard deviation per channel of `x/255`.
    pub fn channel_stats(&self) -> Normalization {
        let [c, h, w] = self.image_shape;
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut std = vec![1.0; c];
        if self.is_empty() {
            return Normalization { mean, std };
        }
        for ch in 0..c {
            let (mut s, mut s2) = (0u64, 0u64);
            for i in 0..self.len() {
                for &p in &self.image_bytes(i)[ch * plane..(ch + 1) * plane] {
                    s += p as u64;
                    s2 += (p as u64) * (p as u64);
                }
            }
            let n = (self.len() * plane) as f64;
            let m = s as f64 / n;
            let var = (s2 as f64 / n - m * m).max(0.0);
            mean[ch] = m / 255.0;
            std[ch] = if var > 0.0 { var.sqrt() / 255.0 } else { 1.0 };
        }
        Normalization { mean, std }
    }

    /// Normalized `[len, C, H, W]` tensor for the given indices.
    pub fn images<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let [c, h, w] = self.image_shape;
        let plane = h * w;
        let mut data = Vec::with_capacity(indices.len() * c * plane);
        for &i in indices {
            let img = self.image_bytes(i);
            for ch in 0..c {
                let (m, s) = (self.norm.mean[ch], self.norm.std[ch]);
                data.extend(
                    img[ch * plane..(ch + 1) * plane]
                        .iter()
                        .map(|&p| cast::<T>((p as f64 / 255.0 - m) / s)),
                );
            }
        }
        Tensor::new(vec![indices.len(), c, h, w], data).expect("sized from shape")
    }

    pub fn batch<T: Real>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        (
            self.images(indices),
            indices.iter().map(|&i| self.labels[i] as usize).collect(),
        )
    }

    /// Like [`Dataset::batch`] with random crop (zero padding 4) and
    /// horizontal flip, seeded per call.
    pub fn augmented_batch<T: Real>(
        &self,
        indices: &[usize],
        rng: &mut impl Rng,
    ) -> (Tensor<T>, Vec<usize>) {
        let (mut x, labels) = self.batch::<T>(indices);
        let [c, h, w] = self.image_shape;
        let pad = 4isize;
        let n = indices.len();
        let data = x.data_mut();
        let mut plane = vec![T::zero(); h * w];
        for i in 0..n {
            let dy = rng.gen_range(-pad..=pad);
            let dx = rng.gen_range(-pad..=pad);
            let flip = rng.gen_bool(0.5);
            for ch in 0..c {
                let off = (i * c + ch) * h * w;
                plane.copy_from_slice(&data[off..off + h * w]);
                for r in 0..h {
                    for col in 0..w {
                        let sr = r as isize + dy;
                        let sc0 = if flip { w - 1 - col } else { col };
                        let sc = sc0 as isize + dx;
                        data[off + r * w + col] =
                            if sr >= 0 && sc >= 0 && (sr as usize) < h && (sc as usize) < w {
                                plane[sr as usize * w + sc as usize]
                            } else {
                                T::zero()
                            };
                    }
                }
            }
        }
        (x, labels)
    }

    /// Stratified subset with `n_per_class` samples of every class.
    pub fn subset(&self, n_per_class: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen = Vec::new();
        for class in 0..self.num_classes() {
            let mut idx: Vec<usize> = (0..self.len())
                .filter(|&i| self.labels[i] as usize == class)
                .collect();
            if idx.len() < n_per_class {
                return Err(Error::Data(format!(
                    "class {class} has {} samples, {n_per_class} requested",
                    idx.len()
                )));
            }
            idx.shuffle(&mut rng);
            chosen.extend_from_slice(&idx[..n_per_class]);
        }
        chosen.sort_unstable();
        let mut pixels = Vec::with_capacity(chosen.len() * self.image_len());
        for &i in &chosen {
            pixels.extend_from_slice(self.image_bytes(i));
        }
        let labels = chosen.iter().map(|&i| self.labels[i]).collect();
        Ok(Dataset {
            pixels,
            labels,
            image_shape: self.image_shape,
            class_names: self.class_names.clone(),
            norm: self.norm.clone(),
        })
    }

    /// CIFAR binary records: one label byte followed by the image bytes.
    pub fn to_binary(&self) -> Vec<u8> {
        let len = self.image_len();
        let mut out = Vec::with_capacity(self.len() * (len + 1));
        for i in 0..self.len() {
            out.push(self.labels[i]);
            out.extend_from_slice(self.image_bytes(i));
        }
        out
    }
}

/// Parses concatenated records of `1 + C·H·W` bytes.
pub fn parse_records(bytes: &[u8], image_shape: [usize; 3]) -> Result<(Vec<u8>, Vec<u8>)> {
    let image_len: usize = image_shape.iter().product();
    let record = image_len + 1;
    if !bytes.len().is_multiple_of(record) {
        return Err(Error::Data(format!(
            "{} bytes is not a whole number of {record}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * image_len);
    for rec in bytes.chunks_exact(record) {
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_split(
    dir: &Path,
    files: &[&str],
    image_shape: [usize; 3],
    expect_records: Option<usize>,
) -> Result<(Vec<u8>, Vec<u8>)> {
    let record = image_shape.iter().product::<usize>() + 1;
    let (mut pixels, mut labels) = (Vec::new(), Vec::new());
    for name in files {
        let path = dir.join(name);
        if !path.exists() {
            return Err(Error::Data(format!(
                "missing dataset file {}",
                path.display()
            )));
        }
        let bytes = read_file(&path)?;
        if let Some(n) = expect_records {
            if bytes.len() != n * record {
                return Err(Error::Data(format!(
                    "{}: {} bytes, expected {} ({n} records of {record} bytes)",
                    path.display(),
                    bytes.len(),
                    n * record
                )));
            }
        }
        let (p, l) = parse_records(&bytes, image_shape)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        pixels.extend(p);
        labels.extend(l);
    }
    Ok((pixels, labels))
}

/// Train and test splits; the test split uses the training normalization.
pub fn train_test(train: Dataset, test: Dataset) -> Result<(Dataset, Dataset)> {
    let norm = train.normalization().clone();
    Ok((train, test.with_normalization(norm)?))
}

/// Loads the standard CIFAR-10 binary distribution: five 10,000-record
/// training batches and one test batch of 3073-byte records.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let names: Vec<String> = CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect();
    let (p, l) = read_split(
        dir,
        &CIFAR10_TRAIN_FILES,
        CIFAR10_SHAPE,
        Some(CIFAR10_RECORDS_PER_FILE),
    )?;
    let train = Dataset::new(p, l, CIFAR10_SHAPE, names.clone())?;
    let (p, l) = read_split(
        dir,
        &[CIFAR10_TEST_FILE],
        CIFAR10_SHAPE,
        Some(CIFAR10_RECORDS_PER_FILE),
    )?;
    let test = Dataset::new(p, l, CIFAR10_SHAPE, names)?;
    train_test(train, test)
}

/// Loads any directory in the CIFAR binary layout, such as a synthetic
/// export: every `data_batch_*.bin` for training, `test_batch.bin` for test.
/// Image shape and class names come from `shape.txt` and
/// `batches.meta.txt` when present.
pub fn load_binary_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let image_shape = match fs::read_to_string(dir.join(SHAPE_FILE)) {
        Ok(text) => {
            let dims: Vec<usize> = text
                .split_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|_| Error::Data(format!("{SHAPE_FILE}: bad extent {t:?}")))
                })
                .collect::<Result<_>>()?;
            <[usize; 3]>::try_from(dims)
                .map_err(|d| Error::Data(format!("{SHAPE_FILE}: expected 3 extents, got {d:?}")))?
        }
        Err(_) => CIFAR10_SHAPE,
    };
    let mut train_files: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        .collect();
    train_files.sort();
    if train_files.is_empty() {
        return Err(Error::Data(format!(
            "no data_batch_*.bin files in {}",
            dir.display()
        )));
    }
    let train_refs: Vec<&str> = train_files.iter().map(String::as_str).collect();
    let (tp, tl) = read_split(dir, &train_refs, image_shape, None)?;
    let (vp, vl) = read_split(dir, &[CIFAR10_TEST_FILE], image_shape, None)?;
    let names: Vec<String> = match fs::read_to_string(dir.join(META_FILE)) {
        Ok(text) => text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        Err(_) => {
            let max = tl.iter().chain(&vl).copied().max().unwrap_or(0) as usize;
            (0..=max).map(|i| format!("class{i}")).collect()
        }
    };
    train_test(
        Dataset::new(tp, tl, image_shape, names.clone())?,
        Dataset::new(vp, vl, image_shape, names)?,
    )
}

/// Writes both splits in the CIFAR binary layout (one training file).
pub fn write_binary_dir(dir: impl AsRef<Path>, train: &Dataset, test: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))
    };
    write("data_batch_1.bin", &train.to_binary())?;
    write(CIFAR10_TEST_FILE, &test.to_binary())?;
    write(
        META_FILE,
        (train.class_names().join("\n") + "\n").as_bytes(),
    )?;
    let [c, h, w] = train.image_shape();
    write(SHAPE_FILE, format!("{c} {h} {w}\n").as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 4,
            samples_per_class: 64,
            image_size: 16,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

/// Noise-free intensity in [0, 1] of class `class` at channel `ch`, pixel
/// (`r`, `c`): an oriented cosine grating under a Gaussian envelope whose
/// centre, orientation and frequency depend on the class.
fn class_pattern(
    class: usize,
    num_classes: usize,
    size: usize,
    ch: usize,
    r: usize,
    c: usize,
) -> f64 {
    use std::f64::consts::PI;
    let k = class as f64;
    let theta = PI * k / num_classes as f64;
    let freq = (1.5 + (class % 3) as f64) / size as f64;
    let angle = 2.0 * PI * k / num_classes as f64;
    let s = size as f64;
    let (cy, cx) = (
        s / 2.0 + 0.2 * s * angle.sin(),
        s / 2.0 + 0.2 * s * angle.cos(),
    );
    let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
    let sigma = 0.35 * s;
    let envelope = (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * sigma * sigma)).exp();
    let phase = 2.0 * PI * ch as f64 / 3.0;
    let carrier = (2.0 * PI * freq * (x * theta.cos() + y * theta.sin()) + phase).cos();
    0.5 + 0.4 * envelope * carrier
}

/// Class-dependent grating images plus Gaussian pixel noise, quantized to
/// bytes. Patterns are fixed; only the noise depends on the seed.
pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_classes == 0
        || spec.num_classes > 256
        || spec.samples_per_class == 0
        || spec.image_size == 0
    {
        return Err(Error::Config(format!(
            "invalid synthetic dataset spec {spec:?}"
        )));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::Config(format!(
            "noise_std must be finite and ≥ 0, got {}",
            spec.noise_std
        )));
    }
    let size = spec.image_size;
    let shape = [3, size, size];
    let templates: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|k| {
            let mut t = Vec::with_capacity(3 * size * size);
            for ch in 0..3 {
                for r in 0..size {
                    for c in 0..size {
                        t.push(class_pattern(k, spec.num_classes, size, ch, r, c));
                    }
                }
            }
            t
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    let n = spec.num_classes * spec.samples_per_class;
    let mut pixels = Vec::with_capacity(n * 3 * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.num_classes;
        labels.push(class as u8);
        for &v in &templates[class] {
            let noisy = if spec.noise_std > 0.0 {
                v + normal.sample(&mut rng)
            } else {
                v
            };
            pixels.push((noisy.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let names = (0..spec.num_classes)
        .map(|k| format!("pattern{k}"))
        .collect();
    Dataset::new(pixels, labels, shape, names)
}

/// Synthetic train/test pair drawn with independent noise; the test split
/// is normalized with training statistics.
pub fn synthetic_split(spec: &SyntheticSpec, test_per_class: usize) -> Result<(Dataset, Dataset)> {
    let train = synthetic(spec)?;
    let test = synthetic(&SyntheticSpec {
        samples_per_class: test_per_class,
        seed: spec.seed ^ 0x5eed_7e57,
        ..spec.clone()
    })?;
    train_test(train, test)
}

/// Index order of one epoch: a permutation seeded by (`seed`, `epoch`).
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = epoch_rng(seed, epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Generator for everything random within one epoch.
pub fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

/// Splits a seeded permutation into mini-batches; the last one may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::Config(format!(
            "batch size {batch_size} must be in 1..={n} (dataset size)"
        )));
    }
    Ok(epoch_order(n, seed, epoch)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}
