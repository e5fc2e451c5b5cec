//! Deterministic synthetic multi-modal pose regression data.
//!
//! A shared latent vector drives both the target pose and every modality
//! input; per-modality signal-to-noise ratios control how informative
//! each stream is, which is what produces the dominant/inferior modality
//! imbalance this crate studies.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{PerModality, ALL_MODALITIES};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"MBDATA1\0";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    None,
    TanhLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_samples: usize,
    /// Joints per pose; targets are (j, 3) in millimeters.
    pub joints: usize,
    pub latent_dim: usize,
    pub input_dims: PerModality<usize>,
    /// Per-modality signal-to-noise ratio; the noise term has unit scale.
    pub snr: PerModality<f64>,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_samples: 4000,
            joints: 17,
            latent_dim: 24,
            input_dims: PerModality([64, 48, 24, 16]),
            snr: PerModality([8.0, 6.0, 1.0, 0.5]),
            nonlinearity: Nonlinearity::None,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::InvalidDataConfig(format!(
                "n_samples must be >= 2, got {}",
                self.n_samples
            )));
        }
        if self.joints == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidDataConfig("joints and latent_dim must be >= 1".into()));
        }
        for (m, &snr) in self.snr.iter() {
            if !(snr > 0.0) {
                return Err(Error::InvalidDataConfig(format!("snr.{m} must be > 0, got {snr}")));
            }
        }
        for (m, &dim) in self.input_dims.iter() {
            if dim == 0 {
                return Err(Error::InvalidDataConfig(format!("input_dim.{m} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Immutable sample collection; regenerating from the same config is
/// bit-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub split: Split,
    /// Row-major (n, input_dim_m) per modality.
    pub inputs: PerModality<Vec<f64>>,
    /// Row-major (n, joints, 3).
    pub targets: Vec<f64>,
    /// Source sample ids from the generating sequence.
    pub indices: Vec<usize>,
}

/// One mini-batch view: per-modality inputs plus targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: PerModality<Tensor>,
    pub targets: Tensor,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Batch-of-one view of sample `i`, for per-sample gradients.
    pub fn row(&self, i: usize) -> Batch {
        let joints3 = self.targets.numel() / self.len();
        Batch {
            inputs: self.inputs.map(|_, t| {
                let dim = t.shape()[1];
                Tensor::new(vec![1, dim], t.data()[i * dim..(i + 1) * dim].to_vec())
            }),
            targets: Tensor::new(
                vec![1, joints3 / 3, 3],
                self.targets.data()[i * joints3..(i + 1) * joints3].to_vec(),
            ),
            indices: vec![self.indices[i]],
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Materialize rows `rows` (positions within this split) as a batch.
    pub fn gather(&self, rows: &[usize]) -> Batch {
        let j3 = self.config.joints * 3;
        let inputs = self.inputs.map(|m, flat| {
            let dim = self.config.input_dims[m];
            let mut data = Vec::with_capacity(rows.len() * dim);
            for &r in rows {
                data.extend_from_slice(&flat[r * dim..(r + 1) * dim]);
            }
            Tensor::new(vec![rows.len(), dim], data)
        });
        let mut targets = Vec::with_capacity(rows.len() * j3);
        for &r in rows {
            targets.extend_from_slice(&self.targets[r * j3..(r + 1) * j3]);
        }
        Batch {
            inputs,
            targets: Tensor::new(vec![rows.len(), self.config.joints, 3], targets),
            indices: rows.iter().map(|&r| self.indices[r]).collect(),
        }
    }

    /// The whole split as one batch.
    pub fn full_batch(&self) -> Batch {
        let rows: Vec<usize> = (0..self.len()).collect();
        self.gather(&rows)
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            v * scale
        })
        .collect()
}

/// 100 mm target scale puts MPJPE into the familiar tens-of-millimeters
/// range.
const TARGET_SCALE_MM: f64 = 100.0;
/// Gentle soft clip for the tanh-like squash.
const SQUASH_SCALE: f64 = 3.0;

/// Generate the train/test pair: latent z per sample, target
/// y = A z * 100mm, inputs x^m = B_m z * snr_m + noise, 80/20 split by
/// seeded shuffle.
pub fn generate(config: &DataConfig) -> Result<(Dataset, Dataset)> {
    config.validate()?;
    let n = config.n_samples;
    let latent = config.latent_dim;
    let j3 = config.joints * 3;
    let latent_scale = 1.0 / (latent as f64).sqrt();

    // Mixing matrices come from a dedicated stream so sample count does
    // not shift them.
    let mut mix_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1));
    let target_mix = normal_matrix(&mut mix_rng, latent, j3, latent_scale);
    let input_mix = PerModality::from_fn(|m| {
        normal_matrix(&mut mix_rng, latent, config.input_dims[m], latent_scale)
    });

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut targets = vec![0.0; n * j3];
    let mut inputs = PerModality::from_fn(|m| vec![0.0; n * config.input_dims[m]]);
    let mut z = vec![0.0; latent];
    for s in 0..n {
        for zv in z.iter_mut() {
            *zv = rng.sample(StandardNormal);
        }
        for c in 0..j3 {
            let mut acc = 0.0;
            for (k, &zv) in z.iter().enumerate() {
                acc += zv * target_mix[k * j3 + c];
            }
            targets[s * j3 + c] = acc * TARGET_SCALE_MM;
        }
        for m in ALL_MODALITIES {
            let dim = config.input_dims[m];
            let mix = &input_mix[m];
            let snr = config.snr[m];
            // unit output variance regardless of snr: keeps first-layer
            // gradient (and so FIM) scales comparable across modalities
            let norm = (snr * snr + 1.0).sqrt();
            for c in 0..dim {
                let mut acc = 0.0;
                for (k, &zv) in z.iter().enumerate() {
                    acc += zv * mix[k * dim + c];
                }
                let noise: f64 = rng.sample(StandardNormal);
                let mut v = (acc * snr + noise) / norm;
                if config.nonlinearity == Nonlinearity::TanhLike {
                    v = (v / SQUASH_SCALE).tanh() * SQUASH_SCALE;
                }
                inputs[m][s * dim + c] = v;
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng =
        ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(2));
    order.shuffle(&mut split_rng);
    let n_train = (n * 4) / 5;
    let (train_ids, test_ids) = order.split_at(n_train);

    let take = |ids: &[usize], split: Split| -> Dataset {
        let mut sel_targets = Vec::with_capacity(ids.len() * j3);
        for &s in ids {
            sel_targets.extend_from_slice(&targets[s * j3..(s + 1) * j3]);
        }
        let sel_inputs = PerModality::from_fn(|m| {
            let dim = config.input_dims[m];
            let mut out = Vec::with_capacity(ids.len() * dim);
            for &s in ids {
                out.extend_from_slice(&inputs[m][s * dim..(s + 1) * dim]);
            }
            out
        });
        Dataset {
            config: config.clone(),
            split,
            inputs: sel_inputs,
            targets: sel_targets,
            indices: ids.to_vec(),
        }
    };

    Ok((take(train_ids, Split::Train), take(test_ids, Split::Test)))
}

/// Mini-batches in a fresh seeded order. The final short batch is kept
/// when it still has >= 2 samples (Pearson needs at least two) and
/// dropped otherwise.
pub fn batches(ds: &Dataset, batch_size: usize, epoch_seed: u64) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::BatchSizeTooSmall(batch_size));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    order.shuffle(&mut rng);
    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        out.push(ds.gather(chunk));
    }
    Ok(out)
}

// ── Serialization (MBDATA1) ──────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct FileHeader {
    config: DataConfig,
    split: Split,
    n: usize,
}

fn write_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s(bytes: &[u8], pos: &mut usize, n: usize, path: &str) -> Result<Vec<f64>> {
    let need = n * 8;
    if *pos + need > bytes.len() {
        return Err(Error::MalformedFile {
            path: path.into(),
            detail: "array extends past end of file".into(),
        });
    }
    let out = bytes[*pos..*pos + need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    *pos += need;
    Ok(out)
}

/// Serialize: magic, version, JSON header, indices, per-modality inputs,
/// targets, then a SHA-256 of everything preceding it.
pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    let header = serde_json::to_vec(&FileHeader {
        config: ds.config.clone(),
        split: ds.split,
        n: ds.len(),
    })?;
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for &i in &ds.indices {
        buf.extend_from_slice(&(i as u64).to_le_bytes());
    }
    for m in ALL_MODALITIES {
        write_f64s(&mut buf, &ds.inputs[m]);
    }
    write_f64s(&mut buf, &ds.targets);
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    let pstr = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < DATASET_MAGIC.len() + 8 + 32 {
        return Err(Error::MalformedFile { path: pstr, detail: "too short".into() });
    }
    if &bytes[..DATASET_MAGIC.len()] != DATASET_MAGIC {
        return Err(Error::BadMagic { path: pstr, expected: "MBDATA1" });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::ChecksumMismatch { path: pstr });
    }
    let mut pos = DATASET_MAGIC.len();
    let version = u32::from_le_bytes(body[pos..pos + 4].try_into().unwrap());
    pos += 4;
    if version > DATASET_VERSION {
        return Err(Error::VersionMismatch {
            path: pstr,
            found: version,
            supported: DATASET_VERSION,
        });
    }
    let hlen = u32::from_le_bytes(body[pos..pos + 4].try_into().unwrap()) as usize;
    pos += 4;
    if pos + hlen > body.len() {
        return Err(Error::MalformedFile { path: pstr, detail: "header length".into() });
    }
    let header: FileHeader = serde_json::from_slice(&body[pos..pos + hlen])?;
    pos += hlen;
    let n = header.n;
    if pos + n * 8 > body.len() {
        return Err(Error::MalformedFile { path: pstr, detail: "indices".into() });
    }
    let indices = body[pos..pos + n * 8]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    pos += n * 8;
    let mut inputs_vec = Vec::with_capacity(4);
    for m in ALL_MODALITIES {
        inputs_vec.push(read_f64s(body, &mut pos, n * header.config.input_dims[m], &pstr)?);
    }
    let targets = read_f64s(body, &mut pos, n * header.config.joints * 3, &pstr)?;
    if pos != body.len() {
        return Err(Error::MalformedFile { path: pstr, detail: "trailing bytes".into() });
    }
    let mut it = inputs_vec.into_iter();
    Ok(Dataset {
        config: header.config,
        split: header.split,
        inputs: PerModality([
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
        ]),
        targets,
        indices,
    })
}

/// Hex SHA-256 of a file, as printed by `generate`.
pub fn file_checksum(path: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
