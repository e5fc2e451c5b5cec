//! Exact Shapley-value contribution scoring over the 4-modality lattice.
//!
//! The profit of a coalition is the sum over all joint coordinates of the
//! batch-wise Pearson correlation between ground truth and the coalition's
//! prediction. Absent modalities are zero-padded at the feature level, so
//! all 16 coalitions run through one set of model parameters.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::models::{apply_mask, CoalitionMask, ModalityId, MultiModalModel, PerModality, ALL_MODALITIES};
use crate::tensor::Tensor;

/// Coalition profit. Sum of per-coordinate correlations, so bounded by
/// 3*joints in magnitude.
pub type ProfitScore = f64;

/// Standard deviations below this are treated as degenerate and the
/// correlation defined as 0 (constant predictions carry no signal).
pub const DEGENERATE_STD: f64 = 1e-12;

/// Per-batch contribution scores for every modality.
#[derive(Debug, Clone)]
pub struct ShapleyReport {
    pub per_modality: PerModality<f64>,
    /// Profit of the full coalition on this batch.
    pub full_profit: ProfitScore,
    pub batch_index: usize,
    pub epoch_index: usize,
}

impl ShapleyReport {
    pub fn mean_over(&self, mods: &[ModalityId]) -> f64 {
        if mods.is_empty() {
            return 0.0;
        }
        mods.iter().map(|&m| self.per_modality[m]).sum::<f64>() / mods.len() as f64
    }
}

/// Pearson correlation with population (1/N) normalization. Returns 0
/// when either stream is (numerically) constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::PearsonLength { lhs: a.len(), rhs: b.len() });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    let sa = (va / n).sqrt();
    let sb = (vb / n).sqrt();
    if sa < DEGENERATE_STD || sb < DEGENERATE_STD {
        return Ok(0.0);
    }
    Ok((cov / n) / (sa * sb))
}

/// Profit s(y, yhat): sum over the j*3 coordinate streams of the Pearson
/// correlation along the batch dimension.
pub fn profit(y: &Tensor, yhat: &Tensor) -> Result<ProfitScore> {
    if y.shape() != yhat.shape() {
        return Err(Error::ShapeMismatch {
            op: "profit",
            lhs: y.shape().to_vec(),
            rhs: yhat.shape().to_vec(),
        });
    }
    let batch = y.shape()[0];
    if batch < 2 {
        return Err(Error::ProfitBatch { batch });
    }
    let coords = y.numel() / batch;
    let mut total = 0.0;
    let mut ys = vec![0.0; batch];
    let mut ps = vec![0.0; batch];
    for c in 0..coords {
        for i in 0..batch {
            ys[i] = y.data()[i * coords + c];
            ps[i] = yhat.data()[i * coords + c];
        }
        total += pearson(&ys, &ps)?;
    }
    Ok(total)
}

/// Profit of one coalition: forward under the mask, then `profit`.
/// The empty coalition is the convention value 0 with no forward pass.
pub fn coalition_profit(model: &MultiModalModel, batch: &Batch, mask: CoalitionMask) -> Result<ProfitScore> {
    if mask.is_empty() {
        return Ok(0.0);
    }
    let pred = model.forward(None, &batch.inputs, mask)?;
    profit(&batch.targets, &pred.values)
}

/// Eq. 2 factorial weight for a coalition of size `s` out of `n` players.
fn shapley_weight(s: usize, n: usize) -> f64 {
    fn fact(k: usize) -> f64 {
        (1..=k).map(|v| v as f64).product()
    }
    fact(s) * fact(n - s - 1) / fact(n)
}

/// Combine a full profit table (indexed by mask bits over `active`
/// modalities) into per-modality Shapley values. Pure arithmetic on the
/// 2^n profits; cost is independent of batch size.
pub fn combine_scores(profits: &[f64; 16], active: &[ModalityId]) -> PerModality<f64> {
    let n = active.len();
    let mut out = PerModality([0.0; 4]);
    for &m in active {
        let mut phi = 0.0;
        for sub in CoalitionMask::all() {
            // subsets of active \ {m}
            if sub.contains(m) {
                continue;
            }
            if ALL_MODALITIES.iter().any(|&a| sub.contains(a) && !active.contains(&a)) {
                continue;
            }
            let with_m = sub.with(m);
            let marginal = profits[with_m.bits() as usize] - profits[sub.bits() as usize];
            phi += shapley_weight(sub.len(), n) * marginal;
        }
        out[m] = phi;
    }
    out
}

/// Evaluate all 16 coalition profits once each: encoders run a single
/// time, then each non-empty coalition re-runs masking + fusion on the
/// cached features.
fn profit_table(model: &MultiModalModel, batch: &Batch, active: &[ModalityId]) -> Result<[f64; 16]> {
    let features = model.encode_all(None, &batch.inputs)?;
    let mut profits = [0.0; 16];
    for mask in CoalitionMask::all() {
        if mask.is_empty() {
            continue; // convention: s(empty) = 0, no forward pass
        }
        if ALL_MODALITIES.iter().any(|&a| mask.contains(a) && !active.contains(&a)) {
            continue;
        }
        let masked = apply_mask(&features, mask);
        let pred = model.fuse_predict(None, &masked, mask)?;
        profits[mask.bits() as usize] = profit(&batch.targets, &pred.values)?;
    }
    Ok(profits)
}

/// Exact Shapley scores for one batch: 15 coalition predictions (the
/// empty coalition short-circuits to 0), each profit computed once and
/// reused across marginals.
pub fn shapley_scores(
    model: &MultiModalModel,
    batch: &Batch,
    epoch_index: usize,
    batch_index: usize,
) -> Result<ShapleyReport> {
    let profits = profit_table(model, batch, &ALL_MODALITIES)?;
    let per_modality = combine_scores(&profits, &ALL_MODALITIES);
    Ok(ShapleyReport {
        per_modality,
        full_profit: profits[CoalitionMask::FULL.bits() as usize],
        batch_index,
        epoch_index,
    })
}

/// Permutation-definition oracle: average each modality's marginal
/// profit over all 4! join orders. Independent of the factorial-weight
/// path; used to cross-check `shapley_scores`.
pub fn shapley_oracle(
    model: &MultiModalModel,
    batch: &Batch,
    epoch_index: usize,
    batch_index: usize,
) -> Result<ShapleyReport> {
    let mut memo: [Option<f64>; 16] = [None; 16];
    let mut profit_of = |mask: CoalitionMask| -> Result<f64> {
        if let Some(v) = memo[mask.bits() as usize] {
            return Ok(v);
        }
        let v = coalition_profit(model, batch, mask)?;
        memo[mask.bits() as usize] = Some(v);
        Ok(v)
    };

    let mut totals = PerModality([0.0; 4]);
    let mut count = 0usize;
    let mut order = ALL_MODALITIES;
    permute(&mut order, 0, &mut |perm| -> Result<()> {
        let mut mask = CoalitionMask::EMPTY;
        let mut prev = profit_of(mask)?;
        for &m in perm {
            mask = mask.with(m);
            let cur = profit_of(mask)?;
            totals[m] += cur - prev;
            prev = cur;
        }
        count += 1;
        Ok(())
    })?;

    let per_modality = totals.map(|_, &t| t / count as f64);
    Ok(ShapleyReport {
        per_modality,
        full_profit: profit_of(CoalitionMask::FULL)?,
        batch_index,
        epoch_index,
    })
}

fn permute<T: Copy, E>(
    items: &mut [T; 4],
    k: usize,
    visit: &mut impl FnMut(&[T; 4]) -> std::result::Result<(), E>,
) -> std::result::Result<(), E> {
    if k == items.len() {
        return visit(items);
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit)?;
        items.swap(k, i);
    }
    Ok(())
}
