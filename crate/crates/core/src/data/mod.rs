//! Dataset ingestion and batching.
//!
//! Canonical pixel representation is raw [0,1]; per-model normalization
//! lives inside the models themselves.

use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::engine::Tensor;
use crate::scalar::Scalar;

pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_PIXELS: usize = IMAGE_CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
/// 1 label byte + 3 channel planes of 1024 bytes.
pub const RECORD_BYTES: usize = 1 + IMAGE_PIXELS;
pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("format error in {path} at byte {offset}: {detail}")]
    Format { path: String, offset: u64, detail: String },

    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Images [N,3,32,32] in [0,1] plus labels in [0,10).
#[derive(Debug, Clone)]
pub struct Dataset<S> {
    pub images: Tensor<S>,
    pub labels: Vec<u8>,
    pub split: String,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copy of one image as a [1,3,32,32] tensor.
    pub fn image(&self, i: usize) -> Tensor<S> {
        let vals = self.images.values()[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS].to_vec();
        Tensor::new(vec![1, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], vals).expect("image shape")
    }

    /// Deterministic prefix slice (eval subsets).
    pub fn take(&self, n: usize) -> Dataset<S> {
        let n = n.min(self.len());
        let vals = self.images.values()[..n * IMAGE_PIXELS].to_vec();
        Dataset {
            images: Tensor::new(vec![n, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], vals).expect("slice shape"),
            labels: self.labels[..n].to_vec(),
            split: self.split.clone(),
        }
    }

    pub fn in_range(&self) -> bool {
        self.images.values().iter().all(|&v| v >= S::zero() && v <= S::one())
    }
}

/// Load the standard CIFAR-10 binary batches from `dir`.
///
/// Each 3073-byte record is 1 label byte followed by 3x1024 channel-plane
/// bytes, scaled by 1/255. `limit` truncates deterministically from the
/// front of the concatenated batches.
pub fn load_cifar10_binary<S: Scalar>(
    dir: &Path,
    split: Split,
    limit: Option<usize>,
) -> Result<Dataset<S>, DataError> {
    let files: &[&str] = match split {
        Split::Train => &[
            "data_batch_1.bin",
            "data_batch_2.bin",
            "data_batch_3.bin",
            "data_batch_4.bin",
            "data_batch_5.bin",
        ],
        Split::Test => &["test_batch.bin"],
    };
    let mut values: Vec<S> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    let scale = S::from_f64(1.0 / 255.0);
    'files: for name in files {
        let path = dir.join(name);
        let display = path.display().to_string();
        let bytes = std::fs::read(&path).map_err(|source| DataError::Io { path: display.clone(), source })?;
        if bytes.len() % RECORD_BYTES != 0 {
            return Err(DataError::Format {
                path: display,
                offset: (bytes.len() - bytes.len() % RECORD_BYTES) as u64,
                detail: format!("file length {} is not a multiple of {RECORD_BYTES}", bytes.len()),
            });
        }
        for (rec_idx, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
            if let Some(limit) = limit {
                if labels.len() >= limit {
                    break 'files;
                }
            }
            let label = rec[0];
            if label as usize >= NUM_CLASSES {
                return Err(DataError::Format {
                    path: display,
                    offset: (rec_idx * RECORD_BYTES) as u64,
                    detail: format!("label byte {label} out of range [0,{NUM_CLASSES})"),
                });
            }
            labels.push(label);
            values.extend(rec[1..].iter().map(|&b| S::from_f64(b as f64) * scale));
        }
    }
    if let Some(limit) = limit {
        if labels.len() > limit {
            labels.truncate(limit);
            values.truncate(limit * IMAGE_PIXELS);
        }
    }
    let n = labels.len();
    Ok(Dataset {
        images: Tensor::new(vec![n, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], values)
            .expect("record arithmetic"),
        labels,
        split: split.as_str().to_string(),
    })
}

/// Export a dataset in the 3073-byte record format (pixel bytes rounded
/// to u8), one file.
pub fn write_cifar10_records<S: Scalar>(ds: &Dataset<S>, path: &Path) -> Result<(), DataError> {
    let mut out = Vec::with_capacity(ds.len() * RECORD_BYTES);
    for i in 0..ds.len() {
        out.push(ds.labels[i]);
        for &v in &ds.images.values()[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS] {
            let b = (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8;
            out.push(b);
        }
    }
    std::fs::write(path, out)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

/// Class-conditional synthetic dataset: each class is a fixed smooth blob
/// pattern, drawn with random shift, intensity jitter and pixel noise.
/// `separation` scales the pattern against the noise floor; 0 makes the
/// classes indistinguishable.
pub fn synthetic_dataset<S: Scalar>(n: usize, seed: u64, separation: f64) -> Dataset<S> {
    assert!(n > 0, "synthetic_dataset needs n > 0");
    let side = IMAGE_SIDE as i64;

    // Fixed per-class patterns.
    let mut patterns: Vec<Vec<f64>> = Vec::with_capacity(NUM_CLASSES);
    for class in 0..NUM_CLASSES {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(class as u64 + 1)));
        let mut pat = vec![0.0f64; IMAGE_PIXELS];
        let centers = Uniform::new(4.0, 28.0);
        let sigmas = Uniform::new(2.5, 6.0);
        let amps = Uniform::new(-1.0, 1.0);
        for _ in 0..6 {
            let (cx, cy) = (centers.sample(&mut rng), centers.sample(&mut rng));
            let sigma = sigmas.sample(&mut rng);
            let amp: [f64; 3] = [amps.sample(&mut rng), amps.sample(&mut rng), amps.sample(&mut rng)];
            for c in 0..IMAGE_CHANNELS {
                for y in 0..side {
                    for x in 0..side {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        pat[(c * side as usize + y as usize) * side as usize + x as usize] +=
                            amp[c] * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
        }
        let rms = (pat.iter().map(|v| v * v).sum::<f64>() / IMAGE_PIXELS as f64).sqrt().max(1e-12);
        for v in &mut pat {
            *v /= rms;
        }
        patterns.push(pat);
    }

    let mut values: Vec<S> = Vec::with_capacity(n * IMAGE_PIXELS);
    let mut labels: Vec<u8> = Vec::with_capacity(n);
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0x5bd1_e995));
    let shift_dist = Uniform::new_inclusive(-3i64, 3i64);
    let gain_dist = Uniform::new(0.8, 1.2);
    for i in 0..n {
        let class = i % NUM_CLASSES;
        labels.push(class as u8);
        let (dx, dy) = (shift_dist.sample(&mut rng), shift_dist.sample(&mut rng));
        let gain = gain_dist.sample(&mut rng) * separation * 0.22;
        let pat = &patterns[class];
        for c in 0..IMAGE_CHANNELS as i64 {
            for y in 0..side {
                for x in 0..side {
                    let (sx, sy) = (x - dx, y - dy);
                    let p = if (0..side).contains(&sx) && (0..side).contains(&sy) {
                        pat[((c * side + sy) * side + sx) as usize]
                    } else {
                        0.0
                    };
                    // Box-Muller-free normal-ish noise: sum of uniforms.
                    let noise: f64 = (0..4).map(|_| rng.gen_range(-0.5..0.5)).sum::<f64>() * 0.18;
                    let v = (0.5 + gain * p + noise).clamp(0.0, 1.0);
                    values.push(S::from_f64(v));
                }
            }
        }
    }
    Dataset {
        images: Tensor::new(vec![n, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], values).expect("shape"),
        labels,
        split: "synthetic".to_string(),
    }
}

/// Batches of (images, labels) covering every item exactly once.
/// `shuffle_seed = None` preserves insertion order.
pub fn batch_iter<'a, S: Scalar>(
    ds: &'a Dataset<S>,
    batch: usize,
    shuffle_seed: Option<u64>,
) -> impl Iterator<Item = (Tensor<S>, Vec<u8>)> + 'a {
    assert!(batch > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    let chunks: Vec<Vec<usize>> = order.chunks(batch).map(|c| c.to_vec()).collect();
    chunks.into_iter().map(move |idx| gather(ds, &idx))
}

/// Materialize a batch from dataset indices.
pub fn gather<S: Scalar>(ds: &Dataset<S>, idx: &[usize]) -> (Tensor<S>, Vec<u8>) {
    let mut values = Vec::with_capacity(idx.len() * IMAGE_PIXELS);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        values.extend_from_slice(&ds.images.values()[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]);
        labels.push(ds.labels[i]);
    }
    (
        Tensor::new(vec![idx.len(), IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], values).expect("gather shape"),
        labels,
    )
}
