//! Adaptive weight constraint machinery: epoch-start snapshots, diagonal
//! Fisher information, the superior/inferior modality partition, and the
//! AWC regularization loss itself.
//!
//! The AWC loss penalizes encoder parameter deviation from the epoch
//! start, weighted by the parameter's Fisher information and by a
//! per-cluster coefficient: dominant modalities get the stronger
//! constraint, inferior ones the milder one.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::models::{CoalitionMask, ModalityId, MultiModalModel, ParamGroup, PerModality, ALL_MODALITIES};
use crate::tensor::{self, ParamId, Tape, Tensor};

/// Deep copy of parameter values at the start of an epoch.
#[derive(Debug, Clone)]
pub struct ParamSnapshot {
    entries: BTreeMap<ParamId, Tensor>,
    pub epoch: usize,
}

impl ParamSnapshot {
    pub fn capture(model: &MultiModalModel, epoch: usize) -> ParamSnapshot {
        ParamSnapshot {
            entries: model.params().snapshot_values(),
            epoch,
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.get(&id)
    }
}

/// Diagonal Fisher information: mean squared per-sample gradient of the
/// task loss, one non-negative value per parameter coordinate.
#[derive(Debug, Clone)]
pub struct FimDiagonal {
    entries: BTreeMap<ParamId, Tensor>,
    pub sample_count: usize,
    pub epoch: usize,
}

impl FimDiagonal {
    pub fn from_entries(
        entries: BTreeMap<ParamId, Tensor>,
        sample_count: usize,
        epoch: usize,
    ) -> FimDiagonal {
        FimDiagonal { entries, sample_count, epoch }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries.iter().map(|(&k, v)| (k, v))
    }

    /// Mean FIM value over the given parameters, for the balance log.
    pub fn mean_over(&self, ids: &[ParamId]) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for id in ids {
            if let Some(t) = self.entries.get(id) {
                total += t.data().iter().sum::<f64>();
                count += t.numel();
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}

/// Core FIM estimator over an abstract per-sample loss: one batch-of-one
/// backward per sample, squared and averaged. Shared by the model-level
/// wrapper and by tests on hand-built models.
pub fn compute_fim_with<F>(
    specs: &[(ParamId, Vec<usize>)],
    n_samples: usize,
    epoch: usize,
    mut per_sample_loss: F,
) -> Result<FimDiagonal>
where
    F: FnMut(&Tape, usize) -> Result<Tensor>,
{
    if n_samples == 0 {
        return Err(Error::EmptyFimSample);
    }
    let mut acc: BTreeMap<ParamId, Vec<f64>> = specs
        .iter()
        .map(|(id, shape)| (*id, vec![0.0; shape.iter().product()]))
        .collect();
    for s in 0..n_samples {
        let tape = Tape::new();
        let loss = per_sample_loss(&tape, s)?;
        let grads = tape.backward(&loss, specs)?;
        for (id, g) in grads.iter() {
            let slot = acc.get_mut(&id).unwrap();
            for (a, &v) in slot.iter_mut().zip(g.data()) {
                *a += v * v;
            }
        }
    }
    let entries = specs
        .iter()
        .map(|(id, shape)| {
            let mut data = acc.remove(id).unwrap();
            for v in data.iter_mut() {
                *v /= n_samples as f64;
            }
            (*id, Tensor::new(shape.clone(), data))
        })
        .collect();
    Ok(FimDiagonal {
        entries,
        sample_count: n_samples,
        epoch,
    })
}

/// Diagonal FIM of the task loss at the current parameters, estimated
/// over the samples of `data` under `mask`. Parameters are read-only
/// here; the model is bit-identical afterwards.
pub fn compute_fim<F>(
    model: &MultiModalModel,
    data: &Batch,
    mask: CoalitionMask,
    epoch: usize,
    loss_fn: F,
) -> Result<FimDiagonal>
where
    F: Fn(&Tape, &Tensor, &Tensor) -> Result<Tensor>,
{
    let specs = model.params().specs();
    compute_fim_with(&specs, data.len(), epoch, |tape, s| {
        let row = data.row(s);
        let pred = model.forward(Some(tape), &row.inputs, mask)?;
        loss_fn(tape, &pred.values, &row.targets)
    })
}

/// Superior/inferior split of the modality set by Shapley score.
#[derive(Debug, Clone)]
pub struct ModalityPartition {
    pub superior: CoalitionMask,
    pub inferior: CoalitionMask,
    pub source_scores: PerModality<f64>,
}

impl ModalityPartition {
    /// All-equal scores collapse to a single cluster; training stays
    /// valid with every modality treated as superior.
    pub fn is_degenerate(&self) -> bool {
        self.inferior.is_empty()
    }

    pub fn alpha_for(&self, m: ModalityId, cfg: &AwcConfig) -> f64 {
        if self.superior.contains(m) {
            cfg.alpha_superior
        } else {
            cfg.alpha_inferior
        }
    }

    /// Treat everything as superior (used before any scores exist).
    pub fn all_superior(scores: PerModality<f64>) -> ModalityPartition {
        ModalityPartition {
            superior: CoalitionMask::FULL,
            inferior: CoalitionMask::EMPTY,
            source_scores: scores,
        }
    }
}

/// 1-D K-means with k=2, centroids initialized at the extremes and Lloyd
/// iterations run to a stable assignment. For k=2 in one dimension this
/// coincides with the best threshold split.
pub fn partition_modalities(scores: &PerModality<f64>) -> ModalityPartition {
    let vals = scores.0;
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max - min == 0.0 {
        return ModalityPartition::all_superior(*scores);
    }
    let mut c = [min, max];
    let mut assign = [0usize; 4];
    loop {
        let mut next = [0usize; 4];
        for (i, &v) in vals.iter().enumerate() {
            next[i] = if (v - c[0]).abs() <= (v - c[1]).abs() { 0 } else { 1 };
        }
        let mut sums = [0.0; 2];
        let mut counts = [0usize; 2];
        for (i, &a) in next.iter().enumerate() {
            sums[a] += vals[i];
            counts[a] += 1;
        }
        for k in 0..2 {
            if counts[k] > 0 {
                c[k] = sums[k] / counts[k] as f64;
            }
        }
        if next == assign {
            break;
        }
        assign = next;
    }
    let mut means = [0.0; 2];
    let mut counts = [0usize; 2];
    for (i, &a) in assign.iter().enumerate() {
        means[a] += vals[i];
        counts[a] += 1;
    }
    for k in 0..2 {
        if counts[k] > 0 {
            means[k] /= counts[k] as f64;
        }
    }
    let hi = if means[0] >= means[1] { 0 } else { 1 };
    let mut superior = CoalitionMask::EMPTY;
    let mut inferior = CoalitionMask::EMPTY;
    for m in ALL_MODALITIES {
        if assign[m.index()] == hi {
            superior = superior.with(m);
        } else {
            inferior = inferior.with(m);
        }
    }
    ModalityPartition {
        superior,
        inferior,
        source_scores: *scores,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AwcConfig {
    pub alpha_superior: f64,
    pub alpha_inferior: f64,
    /// Learning window K: the AWC loss is active while epoch < K.
    pub window_epochs: usize,
    /// Samples drawn for the per-epoch FIM estimate.
    pub fim_sample_size: usize,
}

impl Default for AwcConfig {
    fn default() -> Self {
        AwcConfig {
            alpha_superior: 20_000.0,
            alpha_inferior: 10_000.0,
            window_epochs: 20,
            fim_sample_size: 256,
        }
    }
}

impl AwcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_superior < 0.0 || self.alpha_inferior < 0.0 {
            return Err(Error::Config("alpha coefficients must be >= 0".into()));
        }
        Ok(())
    }
}

/// The AWC loss is active only inside the learning window (strictly
/// `epoch < K`).
pub fn in_window(epoch: usize, cfg: &AwcConfig) -> bool {
    epoch < cfg.window_epochs
}

/// AWC loss over encoder parameter groups:
/// sum_m alpha(m) * sum_i I_ii (theta_i - theta0_i)^2 / 2.
///
/// Built from tape primitives so backward yields
/// alpha(m) * I_ii * (theta_i - theta0_i) per coordinate. Shared
/// fusion/head parameters are never touched.
pub fn awc_loss(
    model: &MultiModalModel,
    snapshot: &ParamSnapshot,
    fim: &FimDiagonal,
    partition: &ModalityPartition,
    cfg: &AwcConfig,
    tape: &Tape,
) -> Result<Tensor> {
    let mut total = Tensor::scalar(0.0);
    for m in ALL_MODALITIES {
        let alpha = partition.alpha_for(m, cfg);
        if alpha == 0.0 {
            continue;
        }
        let mut group_sum: Option<Tensor> = None;
        for id in model.modality_parameters(ParamGroup::Modality(m)) {
            let live = model.params().value(id);
            let theta0 = snapshot.get(id).ok_or_else(|| Error::ParamShapeMismatch {
                what: "snapshot",
                path: model.params().path(id).to_string(),
                expected: live.shape().to_vec(),
                got: vec![],
            })?;
            let fim_t = fim.get(id).ok_or_else(|| Error::ParamShapeMismatch {
                what: "fim",
                path: model.params().path(id).to_string(),
                expected: live.shape().to_vec(),
                got: vec![],
            })?;
            if theta0.shape() != live.shape() {
                return Err(Error::ParamShapeMismatch {
                    what: "snapshot",
                    path: model.params().path(id).to_string(),
                    expected: live.shape().to_vec(),
                    got: theta0.shape().to_vec(),
                });
            }
            if fim_t.shape() != live.shape() {
                return Err(Error::ParamShapeMismatch {
                    what: "fim",
                    path: model.params().path(id).to_string(),
                    expected: live.shape().to_vec(),
                    got: fim_t.shape().to_vec(),
                });
            }
            let theta = tape.leaf_param(id, live);
            let dev = tensor::sub(Some(tape), &theta, theta0)?;
            let weighted = tensor::mul(Some(tape), fim_t, &tensor::square(Some(tape), &dev)?)?;
            let s = tensor::sum(Some(tape), &weighted)?;
            group_sum = Some(match group_sum {
                None => s,
                Some(acc) => tensor::add(Some(tape), &acc, &s)?,
            });
        }
        if let Some(gs) = group_sum {
            let scaled = tensor::mul(Some(tape), &gs, &Tensor::scalar(alpha * 0.5))?;
            total = tensor::add(Some(tape), &total, &scaled)?;
        }
    }
    Ok(total)
}
