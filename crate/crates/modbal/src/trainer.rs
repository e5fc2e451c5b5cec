//! Training loop: MPJPE task loss, AWC regularization inside the
//! learning window, Adam with a step learning-rate schedule, per-batch
//! Shapley score logging, and the scoring-overhead profiler.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{Matrix3, SVD};
use serde::{Deserialize, Serialize};

use crate::balance::{self, FimDiagonal, ModalityPartition, ParamSnapshot};
use crate::config::ExperimentConfig;
use crate::data::{self, Batch, Dataset};
use crate::error::{Error, Result};
use crate::models::{
    apply_mask, CoalitionMask, FusionKind, ModalityId, MultiModalModel, ParamGroup, ParamStore,
    PerModality, ALL_MODALITIES,
};
use crate::shapley::{self, ShapleyReport};
use crate::tensor::{self, GradientMap, ParamId, Tape, Tensor};

// ── Metrics ──────────────────────────────────────────────────────────

/// MPJPE loss: per sample, mean over joints of the Euclidean joint
/// error; then mean over the batch. Gradient-trackable.
pub fn mpjpe_loss(tape: Option<&Tape>, pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "mpjpe_loss",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let diff = tensor::sub(tape, pred, gt)?;
    let norms = tensor::l2norm_lastdim(tape, &diff)?;
    tensor::mean(tape, &norms, None)
}

/// The loss actually backpropagated: MPJPE divided by the model's output
/// scale, i.e. the same objective measured on standardized poses. Keeps
/// optimization dynamics independent of the millimeter units.
pub fn training_loss(
    tape: Option<&Tape>,
    output_scale: f64,
    pred: &Tensor,
    gt: &Tensor,
) -> Result<Tensor> {
    let task = mpjpe_loss(tape, pred, gt)?;
    if output_scale == 1.0 {
        return Ok(task);
    }
    tensor::mul(tape, &task, &Tensor::scalar(1.0 / output_scale))
}

/// PA-MPJPE result; `degenerate` counts samples that fell back to
/// translation-only alignment (joint cloud of rank < 2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaMpjpe {
    pub value: f64,
    pub degenerate: usize,
}

/// MPJPE after per-sample optimal similarity alignment (rotation with
/// det +1, isotropic scale, translation) of the prediction onto the
/// ground truth.
pub fn pa_mpjpe(pred: &Tensor, gt: &Tensor) -> Result<PaMpjpe> {
    if pred.shape() != gt.shape() || pred.shape().len() != 3 || pred.shape()[2] != 3 {
        return Err(Error::ShapeMismatch {
            op: "pa_mpjpe",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let (batch, j) = (pred.shape()[0], pred.shape()[1]);
    let mut total = 0.0;
    let mut degenerate = 0;
    for s in 0..batch {
        let x = &pred.data()[s * j * 3..(s + 1) * j * 3];
        let y = &gt.data()[s * j * 3..(s + 1) * j * 3];
        let (err, degen) = procrustes_error(x, y, j);
        total += err;
        if degen {
            degenerate += 1;
        }
    }
    Ok(PaMpjpe { value: total / batch as f64, degenerate })
}

fn centroid(pts: &[f64], j: usize) -> [f64; 3] {
    let mut c = [0.0; 3];
    for i in 0..j {
        for k in 0..3 {
            c[k] += pts[i * 3 + k];
        }
    }
    for k in c.iter_mut() {
        *k /= j as f64;
    }
    c
}

/// Mean joint error of `x` aligned onto `y` by the similarity transform
/// minimizing squared error; falls back to translation only when the
/// centered x cloud has rank < 2.
fn procrustes_error(x: &[f64], y: &[f64], j: usize) -> (f64, bool) {
    let cx = centroid(x, j);
    let cy = centroid(y, j);
    // cross covariance C = Xc^T Yc, squared norm of Xc, scatter of Xc
    let mut c: Matrix3<f64> = Matrix3::zeros();
    let mut scatter: Matrix3<f64> = Matrix3::zeros();
    let mut x_norm2 = 0.0;
    for i in 0..j {
        let xi = [x[i * 3] - cx[0], x[i * 3 + 1] - cx[1], x[i * 3 + 2] - cx[2]];
        let yi = [y[i * 3] - cy[0], y[i * 3 + 1] - cy[1], y[i * 3 + 2] - cy[2]];
        for a in 0..3 {
            x_norm2 += xi[a] * xi[a];
            for b in 0..3 {
                c[(a, b)] += xi[a] * yi[b];
                scatter[(a, b)] += xi[a] * xi[b];
            }
        }
    }

    let sv = SVD::new(scatter, false, false).singular_values;
    let rank = sv.iter().filter(|&&v: &&f64| v > sv[0].max(1e-300) * 1e-12).count();
    if sv[0] <= 0.0 || rank < 2 {
        // translation-only alignment
        let mut total = 0.0;
        for i in 0..j {
            let mut e2: f64 = 0.0;
            for k in 0..3 {
                let aligned = x[i * 3 + k] - cx[k] + cy[k];
                let d = aligned - y[i * 3 + k];
                e2 += d * d;
            }
            total += e2.sqrt();
        }
        return (total / j as f64, true);
    }

    let svd = SVD::new(c, true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let sigma = svd.singular_values; // sorted descending
    let d0 = (u.determinant() * v_t.determinant()).signum();
    let z = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d0));
    let rot = u * z * v_t;
    let scale = (sigma[0] + sigma[1] + d0 * sigma[2]) / x_norm2;

    let mut total = 0.0;
    for i in 0..j {
        let xi = nalgebra::RowVector3::new(
            x[i * 3] - cx[0],
            x[i * 3 + 1] - cx[1],
            x[i * 3 + 2] - cx[2],
        );
        let aligned = (xi * rot) * scale;
        let mut e2: f64 = 0.0;
        for k in 0..3 {
            let d = aligned[k] + cy[k] - y[i * 3 + k];
            e2 += d * d;
        }
        total += e2.sqrt();
    }
    (total / j as f64, false)
}

// ── Optimizer ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Classic Adam-style L2: added to the gradient before moment updates.
    pub weight_decay: f64,
    /// Multiply lr by `lr_decay_factor` every `lr_decay_every` epochs
    /// (0 disables the schedule).
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        OptimHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            lr_decay_every: 30,
            lr_decay_factor: 0.1,
        }
    }
}

impl OptimHyper {
    /// Scheduled learning rate for an epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            return self.lr;
        }
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Adam moments per parameter plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub hyper: OptimHyper,
    step: u64,
    m: BTreeMap<ParamId, Vec<f64>>,
    v: BTreeMap<ParamId, Vec<f64>>,
}

impl OptimState {
    pub fn new(hyper: OptimHyper) -> OptimState {
        OptimState { hyper, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction and L2 added to the gradient.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &GradientMap,
    state: &mut OptimState,
    epoch: usize,
) -> Result<()> {
    state.step += 1;
    let h = state.hyper;
    let lr = h.lr_at(epoch);
    let bc1 = 1.0 - h.beta1.powi(state.step as i32);
    let bc2 = 1.0 - h.beta2.powi(state.step as i32);
    for (id, grad) in grads.iter() {
        let value = store.value(id);
        if grad.shape() != value.shape() {
            return Err(Error::ParamShapeMismatch {
                what: "gradient",
                path: store.path(id).to_string(),
                expected: value.shape().to_vec(),
                got: grad.shape().to_vec(),
            });
        }
        let n = value.numel();
        let m = state.m.entry(id).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(id).or_insert_with(|| vec![0.0; n]);
        let mut data = value.data().to_vec();
        for k in 0..n {
            let g = grad.data()[k] + h.weight_decay * data[k];
            m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g;
            v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            data[k] -= lr * m_hat / (v_hat.sqrt() + h.eps);
        }
        store.set_data(id, &data);
    }
    Ok(())
}

// ── Seed derivation ──────────────────────────────────────────────────

/// Named RNG streams derived from the master seed, so independent
/// consumers never share state and runs reproduce bitwise.
#[derive(Debug, Clone, Copy)]
pub enum SeedStream {
    ModelInit,
    EpochShuffle,
    FimSubsample,
}

pub fn derive_seed(master: u64, stream: SeedStream, index: u64) -> u64 {
    let tag = match stream {
        SeedStream::ModelInit => 1u64,
        SeedStream::EpochShuffle => 2,
        SeedStream::FimSubsample => 3,
    };
    let mut z = master
        ^ tag.wrapping_mul(0xA076_1D64_78BD_642F)
        ^ index.wrapping_mul(0xE703_7ED1_A0B4_28DB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ── Reports ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_mpjpe: f64,
    pub test_pa_mpjpe: f64,
    pub shapley_mean: PerModality<f64>,
    /// Superior cluster bitmask; 0 outside the learning window.
    pub partition_bits: u8,
    pub degenerate_partition: bool,
    pub awc_loss_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub rows: Vec<EpochRow>,
    pub final_test_mpjpe: f64,
    pub final_test_pa_mpjpe: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRow {
    pub epoch: usize,
    pub batch: usize,
    pub phi: PerModality<f64>,
    pub full_profit: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalanceRow {
    pub epoch: usize,
    pub partition_bits: u8,
    pub alpha_superior: f64,
    pub alpha_inferior: f64,
    pub awc_loss_mean: f64,
    pub fim_sample_size: usize,
    pub fim_mean: PerModality<f64>,
}

/// Wall-clock section times per epoch, milliseconds. Kept out of the
/// numeric report so report bytes stay reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRow {
    pub epoch: usize,
    pub forward_ms: f64,
    pub backward_ms: f64,
    pub scoring_ms: f64,
    pub fim_ms: f64,
    pub eval_ms: f64,
}

pub struct TrainOutput {
    pub report: TrainReport,
    pub model: MultiModalModel,
    pub scores: Vec<ScoreRow>,
    pub balance_log: Vec<BalanceRow>,
    pub timing: Vec<TimingRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub degenerate_alignments: usize,
}

/// Metrics over a dataset under `mask`, covering every sample exactly
/// once in sequential chunks.
pub fn evaluate(model: &MultiModalModel, ds: &Dataset, mask: CoalitionMask) -> Result<EvalMetrics> {
    let chunk = 256;
    let n = ds.len();
    let mut mpjpe_sum = 0.0;
    let mut pa_sum = 0.0;
    let mut degenerate = 0;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let batch = ds.gather(&rows);
        let pred = model.forward(None, &batch.inputs, mask)?;
        let m = mpjpe_loss(None, &pred.values, &batch.targets)?.item();
        let pa = pa_mpjpe(&pred.values, &batch.targets)?;
        let w = rows.len() as f64;
        mpjpe_sum += m * w;
        pa_sum += pa.value * w;
        degenerate += pa.degenerate;
        start = end;
    }
    Ok(EvalMetrics {
        mpjpe: mpjpe_sum / n as f64,
        pa_mpjpe: pa_sum / n as f64,
        degenerate_alignments: degenerate,
    })
}

// ── Training loop ────────────────────────────────────────────────────

struct WindowState {
    snapshot: ParamSnapshot,
    fim: FimDiagonal,
    partition: ModalityPartition,
}

fn subsample_batch(train: &Dataset, size: usize, seed: u64) -> Batch {
    let k = size.min(train.len()).max(1);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let idx = rand::seq::index::sample(&mut rng, train.len(), k).into_vec();
    train.gather(&idx)
}

/// The complete balanced training procedure. Per epoch inside the
/// window: snapshot parameters, estimate the FIM on a seeded subsample,
/// and refresh the partition from the previous epoch's Shapley means
/// (epoch 0 scores one pre-pass batch). Every batch is scored, and the
/// AWC loss joins the task loss while the window is open. Deterministic
/// given the config seed.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let run_mask = cfg.run.mask()?;
    let (train_ds, test_ds) = data::generate(&cfg.data)?;
    let mut model = MultiModalModel::new(
        cfg.model_config(),
        derive_seed(cfg.run.seed, SeedStream::ModelInit, 0),
    );
    let mut optim = OptimState::new(cfg.optim);
    let specs = model.params().specs();
    let awc = &cfg.balance;

    let mut report_rows = Vec::new();
    let mut score_rows: Vec<ScoreRow> = Vec::new();
    let mut balance_rows = Vec::new();
    let mut timing_rows = Vec::new();
    let mut prev_epoch_mean: Option<PerModality<f64>> = None;

    for epoch in 0..cfg.run.epochs {
        let mut timing = TimingRow {
            epoch,
            forward_ms: 0.0,
            backward_ms: 0.0,
            scoring_ms: 0.0,
            fim_ms: 0.0,
            eval_ms: 0.0,
        };
        let epoch_batches = data::batches(
            &train_ds,
            cfg.run.batch_size,
            derive_seed(cfg.run.seed, SeedStream::EpochShuffle, epoch as u64),
        )?;

        let window = if balance::in_window(epoch, awc) {
            let means = match prev_epoch_mean {
                Some(m) => m,
                None => {
                    // pre-pass: score one batch with the initial parameters
                    let t0 = Instant::now();
                    let report = score_batch(&model, &epoch_batches[0], run_mask, epoch, 0)?;
                    timing.scoring_ms += ms_since(t0);
                    report.per_modality
                }
            };
            let partition = balance::partition_modalities(&means);
            if partition.is_degenerate() {
                eprintln!("warning: epoch {epoch}: all Shapley scores equal, single-cluster partition");
            }
            let snapshot = ParamSnapshot::capture(&model, epoch);
            let t0 = Instant::now();
            let fim_batch = subsample_batch(
                &train_ds,
                awc.fim_sample_size,
                derive_seed(cfg.run.seed, SeedStream::FimSubsample, epoch as u64),
            );
            let scale = cfg.model_config().output_scale;
            let fim = balance::compute_fim(&model, &fim_batch, run_mask, epoch, |tape, pred, gt| {
                training_loss(Some(tape), scale, pred, gt)
            })?;
            timing.fim_ms += ms_since(t0);
            balance_rows.push(BalanceRow {
                epoch,
                partition_bits: partition.superior.bits(),
                alpha_superior: awc.alpha_superior,
                alpha_inferior: awc.alpha_inferior,
                awc_loss_mean: 0.0, // filled at epoch end
                fim_sample_size: fim.sample_count,
                fim_mean: PerModality::from_fn(|m| {
                    fim.mean_over(&model.modality_parameters(ParamGroup::Modality(m)))
                }),
            });
            Some(WindowState { snapshot, fim, partition })
        } else {
            None
        };

        let mut loss_sum = 0.0;
        let mut awc_sum = 0.0;
        let mut epoch_phi = PerModality([0.0; 4]);
        let mut scored = 0usize;

        for (b, batch) in epoch_batches.iter().enumerate() {
            if cfg.run.score_every > 0 && b % cfg.run.score_every == 0 {
                let t0 = Instant::now();
                let rep = score_batch(&model, batch, run_mask, epoch, b)?;
                timing.scoring_ms += ms_since(t0);
                for m in ALL_MODALITIES {
                    epoch_phi[m] += rep.per_modality[m];
                }
                scored += 1;
                score_rows.push(ScoreRow {
                    epoch,
                    batch: b,
                    phi: rep.per_modality,
                    full_profit: rep.full_profit,
                });
            }

            let tape = Tape::new();
            let t0 = Instant::now();
            let pred = model.forward(Some(&tape), &batch.inputs, run_mask)?;
            let task = training_loss(
                Some(&tape),
                model.config().output_scale,
                &pred.values,
                &batch.targets,
            )?;
            let total = match &window {
                Some(w) => {
                    let reg = balance::awc_loss(&model, &w.snapshot, &w.fim, &w.partition, awc, &tape)?;
                    awc_sum += reg.item();
                    tensor::add(Some(&tape), &task, &reg)?
                }
                None => task.clone(),
            };
            timing.forward_ms += ms_since(t0);
            if total.item().is_nan() {
                return Err(Error::NanLoss {
                    epoch,
                    batch: b,
                    op: tape.first_nan_op().unwrap_or_else(|| "unknown".into()),
                });
            }
            loss_sum += task.item() * model.config().output_scale;
            let t1 = Instant::now();
            let grads = tape.backward(&total, &specs)?;
            adam_step(model.params_mut(), &grads, &mut optim, epoch)?;
            timing.backward_ms += ms_since(t1);
        }

        let n_batches = epoch_batches.len().max(1);
        if scored > 0 {
            for m in ALL_MODALITIES {
                epoch_phi[m] /= scored as f64;
            }
            prev_epoch_mean = Some(epoch_phi);
        }
        let awc_mean = awc_sum / n_batches as f64;
        if let Some(row) = balance_rows.last_mut() {
            if row.epoch == epoch {
                row.awc_loss_mean = awc_mean;
            }
        }

        let t0 = Instant::now();
        let metrics = evaluate(&model, &test_ds, run_mask)?;
        timing.eval_ms += ms_since(t0);

        report_rows.push(EpochRow {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            test_mpjpe: metrics.mpjpe,
            test_pa_mpjpe: metrics.pa_mpjpe,
            shapley_mean: if scored > 0 { epoch_phi } else { PerModality([0.0; 4]) },
            partition_bits: window.as_ref().map_or(0, |w| w.partition.superior.bits()),
            degenerate_partition: window.as_ref().is_some_and(|w| w.partition.is_degenerate()),
            awc_loss_mean: awc_mean,
        });
        timing_rows.push(timing);

        if cfg.run.log_every > 0 && epoch % cfg.run.log_every == 0 {
            let row = report_rows.last().unwrap();
            eprintln!(
                "epoch {epoch}: train_loss {:.3} test_mpjpe {:.3} test_pa {:.3}",
                row.train_loss, row.test_mpjpe, row.test_pa_mpjpe
            );
        }
    }

    let (final_mpjpe, final_pa) = report_rows
        .last()
        .map(|r| (r.test_mpjpe, r.test_pa_mpjpe))
        .unwrap_or((f64::NAN, f64::NAN));
    Ok(TrainOutput {
        report: TrainReport {
            seed: cfg.run.seed,
            rows: report_rows,
            final_test_mpjpe: final_mpjpe,
            final_test_pa_mpjpe: final_pa,
        },
        model,
        scores: score_rows,
        balance_log: balance_rows,
        timing: timing_rows,
    })
}

/// Shapley scores restricted to the run's active modalities (the full
/// 16-coalition lattice when all four are active).
fn score_batch(
    model: &MultiModalModel,
    batch: &Batch,
    run_mask: CoalitionMask,
    epoch: usize,
    b: usize,
) -> Result<ShapleyReport> {
    if run_mask == CoalitionMask::FULL {
        shapley::shapley_scores(model, batch, epoch, b)
    } else {
        let active: Vec<ModalityId> = ALL_MODALITIES
            .into_iter()
            .filter(|&m| run_mask.contains(m))
            .collect();
        let (profits, _, _) = profile_profit_table(model, batch, &active)?;
        let per_modality = shapley::combine_scores(&profits, &active);
        Ok(ShapleyReport {
            per_modality,
            full_profit: profits[run_mask.bits() as usize],
            batch_index: b,
            epoch_index: epoch,
        })
    }
}

fn ms_since(t0: Instant) -> f64 {
    t0.elapsed().as_secs_f64() * 1e3
}

// ── Overhead profiling ───────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverheadRow {
    pub fusion: String,
    pub n_modalities: usize,
    pub n_params: usize,
    pub forward_ms: f64,
    pub backward_ms: f64,
    pub pose_est_ms: f64,
    pub correlation_ms: f64,
    pub score_calc_ms: f64,
    pub overhead_pct: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverheadReport {
    pub batches_per_row: usize,
    pub rows: Vec<OverheadRow>,
}

/// Profit table split into timed phases: coalition pose estimation
/// (encode once, then one fusion pass per non-empty coalition) and
/// correlation. Returns (profits, pose_est_seconds, correlation_seconds).
fn profile_profit_table(
    model: &MultiModalModel,
    batch: &Batch,
    active: &[ModalityId],
) -> Result<([f64; 16], f64, f64)> {
    let t0 = Instant::now();
    let features = model.encode_all(None, &batch.inputs)?;
    let mut preds: Vec<(usize, Tensor)> = Vec::with_capacity(15);
    for mask in CoalitionMask::all() {
        if mask.is_empty()
            || ALL_MODALITIES.iter().any(|&a| mask.contains(a) && !active.contains(&a))
        {
            continue;
        }
        let masked = apply_mask(&features, mask);
        let pred = model.fuse_predict(None, &masked, mask)?;
        preds.push((mask.bits() as usize, pred.values));
    }
    let pose_est = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mut profits = [0.0; 16];
    for (bits, pred) in &preds {
        profits[*bits] = shapley::profit(&batch.targets, pred)?;
    }
    let correlation = t1.elapsed().as_secs_f64();
    Ok((profits, pose_est, correlation))
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Per-batch wall time of training forward, backward, coalition pose
/// estimation, correlation, and score combination, for every fusion kind
/// and modality count (first n of R, L, M, W active). Medians over
/// `batches_per_row` batches; overhead% = (pose + correlation + combine)
/// / (forward + backward) * 100.
pub fn profile_overhead(cfg: &ExperimentConfig, batches_per_row: usize) -> Result<OverheadReport> {
    let (train_ds, _) = data::generate(&cfg.data)?;
    let all_batches = data::batches(&train_ds, cfg.run.batch_size, 0)?;
    let mut rows = Vec::new();
    for fusion in [FusionKind::Concat, FusionKind::ConcatMlp, FusionKind::Attention] {
        for n_mod in [2usize, 3, 4] {
            let active: Vec<ModalityId> = ALL_MODALITIES[..n_mod].to_vec();
            let mask = CoalitionMask::of(&active);
            let mut model_cfg = cfg.model_config();
            model_cfg.fusion = fusion;
            let model =
                MultiModalModel::new(model_cfg, derive_seed(cfg.run.seed, SeedStream::ModelInit, 0));
            let specs = model.params().specs();

            let mut fwd = Vec::new();
            let mut bwd = Vec::new();
            let mut pose = Vec::new();
            let mut corr = Vec::new();
            let mut comb = Vec::new();
            for i in 0..batches_per_row {
                let batch = &all_batches[i % all_batches.len()];
                let tape = Tape::new();
                let t0 = Instant::now();
                let pred = model.forward(Some(&tape), &batch.inputs, mask)?;
                let loss = training_loss(
                    Some(&tape),
                    model.config().output_scale,
                    &pred.values,
                    &batch.targets,
                )?;
                fwd.push(t0.elapsed().as_secs_f64());
                let t1 = Instant::now();
                let _grads = tape.backward(&loss, &specs)?;
                bwd.push(t1.elapsed().as_secs_f64());

                let (profits, pose_s, corr_s) = profile_profit_table(&model, batch, &active)?;
                pose.push(pose_s);
                corr.push(corr_s);
                let t2 = Instant::now();
                let _scores = shapley::combine_scores(&profits, &active);
                comb.push(t2.elapsed().as_secs_f64());
            }
            let (f, b) = (median(&mut fwd), median(&mut bwd));
            let (p, c, s) = (median(&mut pose), median(&mut corr), median(&mut comb));
            rows.push(OverheadRow {
                fusion: fusion.name().to_string(),
                n_modalities: n_mod,
                n_params: model.params().total_scalars(),
                forward_ms: f * 1e3,
                backward_ms: b * 1e3,
                pose_est_ms: p * 1e3,
                correlation_ms: c * 1e3,
                score_calc_ms: s * 1e3,
                overhead_pct: (p + c + s) / (f + b) * 100.0,
            });
        }
    }
    Ok(OverheadReport { batches_per_row, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(batch: usize, j: usize, vals: Vec<f64>) -> Tensor {
        Tensor::new(vec![batch, j, 3], vals)
    }

    #[test]
    fn mpjpe_zero_for_identical() {
        let p = pose(2, 2, vec![1.0; 12]);
        assert_eq!(mpjpe_loss(None, &p, &p).unwrap().item(), 0.0);
    }

    #[test]
    fn mpjpe_unit_offset() {
        let gt = pose(2, 3, (0..18).map(|i| i as f64).collect());
        let mut shifted = gt.data().to_vec();
        for i in 0..6 {
            shifted[i * 3] += 1.0; // +1 on x of every joint
        }
        let pred = pose(2, 3, shifted);
        let loss = mpjpe_loss(None, &pred, &gt).unwrap().item();
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mpjpe_three_four_five() {
        // joint errors (3,4,0) -> 5 and (0,0,0) -> 0: mean 2.5
        let gt = pose(1, 2, vec![0.0; 6]);
        let pred = pose(1, 2, vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
        let loss = mpjpe_loss(None, &pred, &gt).unwrap().item();
        assert!((loss - 2.5).abs() < 1e-12);
    }

    fn random_cloud(j: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..j * 3).map(|_| rng.gen_range(-100.0..100.0)).collect()
    }

    fn rotation_from_axis_angle(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
        let norm = (axis[0].powi(2) + axis[1].powi(2) + axis[2].powi(2)).sqrt();
        let (x, y, z) = (axis[0] / norm, axis[1] / norm, axis[2] / norm);
        let (c, s) = (angle.cos(), angle.sin());
        let t = 1.0 - c;
        [
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ]
    }

    #[test]
    fn pa_mpjpe_exact_alignability() {
        let j = 17;
        let gt = random_cloud(j, 3);
        let rot = rotation_from_axis_angle([1.0, 2.0, 0.5], 1.1);
        let (s, t) = (1.7, [10.0, -20.0, 5.0]);
        let mut pred = vec![0.0; j * 3];
        for i in 0..j {
            for a in 0..3 {
                let mut v = 0.0;
                for b in 0..3 {
                    v += gt[i * 3 + b] * rot[b][a];
                }
                pred[i * 3 + a] = v * s + t[a];
            }
        }
        let pa = pa_mpjpe(&pose(1, j, pred), &pose(1, j, gt)).unwrap();
        assert!(pa.value <= 1e-8, "pa {}", pa.value);
        assert_eq!(pa.degenerate, 0);
    }

    #[test]
    fn pa_mpjpe_never_exceeds_mpjpe() {
        for seed in 0..50 {
            let j = 17;
            let gt = random_cloud(j, seed * 2);
            let pred = random_cloud(j, seed * 2 + 1);
            let gt_t = pose(1, j, gt);
            let pred_t = pose(1, j, pred);
            let pa = pa_mpjpe(&pred_t, &gt_t).unwrap().value;
            let mp = mpjpe_loss(None, &pred_t, &gt_t).unwrap().item();
            assert!(pa <= mp + 1e-9, "seed {seed}: pa {pa} > mpjpe {mp}");
        }
    }

    #[test]
    fn pa_mpjpe_degenerate_cloud_falls_back() {
        let j = 5;
        let pred = pose(1, j, vec![7.0; j * 3]); // all joints coincide
        let gt = pose(1, j, random_cloud(j, 4));
        let pa = pa_mpjpe(&pred, &gt).unwrap();
        assert_eq!(pa.degenerate, 1);
        assert!(pa.value.is_finite());
    }

    #[test]
    fn adam_fixed_point_on_zero_grads() {
        let mut store = ParamStore::default();
        let id = store.add("w", ParamGroup::Shared, Tensor::new(vec![2], vec![1.0, -2.0]));
        let before = store.value(id).data().to_vec();
        let mut state = OptimState::new(OptimHyper { weight_decay: 0.0, ..Default::default() });
        let grads = GradientMap::from_entries([(id, Tensor::zeros(&[2]))].into_iter().collect());
        adam_step(&mut store, &grads, &mut state, 0).unwrap();
        assert_eq!(store.value(id).data(), &before[..]);
    }

    #[test]
    fn adam_first_step_is_minus_lr() {
        let mut store = ParamStore::default();
        let id = store.add("w", ParamGroup::Shared, Tensor::scalar(0.5));
        let hyper = OptimHyper { weight_decay: 0.0, ..Default::default() };
        let mut state = OptimState::new(hyper);
        let grads = GradientMap::from_entries([(id, Tensor::scalar(1.0))].into_iter().collect());
        adam_step(&mut store, &grads, &mut state, 0).unwrap();
        let update = store.value(id).item() - 0.5;
        // bias-corrected first step: -lr * g / (|g| + eps) ~ -lr
        assert!((update + hyper.lr).abs() < 1e-9, "update {update}");
    }

    #[test]
    fn lr_schedule_decays_every_30_epochs() {
        let h = OptimHyper::default();
        assert!((h.lr_at(0) - 1e-3).abs() < 1e-18);
        assert!((h.lr_at(29) - 1e-3).abs() < 1e-18);
        assert!((h.lr_at(30) - 1e-4).abs() < 1e-12);
        assert!((h.lr_at(60) - 1e-5).abs() < 1e-12);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
