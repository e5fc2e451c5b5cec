//! CSV emission and plot-ready report tables. Numeric CSVs contain only
//! deterministic values; wall-clock timings go to their own file.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{PerModality, ALL_MODALITIES};
use crate::trainer::{BalanceRow, OverheadReport, ScoreRow, TimingRow, TrainReport};

fn write_file(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content)?;
    Ok(())
}

pub fn report_csv(report: &TrainReport) -> String {
    let mut s = String::from(
        "epoch,train_loss,test_mpjpe,test_pa_mpjpe,phi_R,phi_L,phi_M,phi_W,partition,awc_loss_mean,degenerate_partition\n",
    );
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.train_loss,
            r.test_mpjpe,
            r.test_pa_mpjpe,
            r.shapley_mean.0[0],
            r.shapley_mean.0[1],
            r.shapley_mean.0[2],
            r.shapley_mean.0[3],
            r.partition_bits,
            r.awc_loss_mean,
            r.degenerate_partition as u8,
        );
    }
    s
}

pub fn write_report_csv(path: &Path, report: &TrainReport) -> Result<()> {
    write_file(path, &report_csv(report))
}

pub fn scores_csv(rows: &[ScoreRow]) -> String {
    let mut s = String::from("epoch,batch,phi_R,phi_L,phi_M,phi_W,full_profit\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, r.batch, r.phi.0[0], r.phi.0[1], r.phi.0[2], r.phi.0[3], r.full_profit
        );
    }
    s
}

pub fn write_scores_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    write_file(path, &scores_csv(rows))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRow>> {
    let text = std::fs::read_to_string(path)?;
    let pstr = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(Error::MalformedFile {
                path: pstr,
                detail: format!("line {}: expected 7 columns", i + 1),
            });
        }
        let f = |k: usize| -> Result<f64> {
            cols[k].parse().map_err(|_| Error::MalformedFile {
                path: path.display().to_string(),
                detail: format!("line {}: bad number `{}`", i + 1, cols[k]),
            })
        };
        out.push(ScoreRow {
            epoch: f(0)? as usize,
            batch: f(1)? as usize,
            phi: PerModality([f(2)?, f(3)?, f(4)?, f(5)?]),
            full_profit: f(6)?,
        });
    }
    Ok(out)
}

pub fn balance_csv(rows: &[BalanceRow]) -> String {
    let mut s = String::from(
        "epoch,partition,alpha_S,alpha_I,awc_loss_value,fim_sample_size,fim_mean_R,fim_mean_L,fim_mean_M,fim_mean_W\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.partition_bits,
            r.alpha_superior,
            r.alpha_inferior,
            r.awc_loss_mean,
            r.fim_sample_size,
            r.fim_mean.0[0],
            r.fim_mean.0[1],
            r.fim_mean.0[2],
            r.fim_mean.0[3],
        );
    }
    s
}

pub fn write_balance_csv(path: &Path, rows: &[BalanceRow]) -> Result<()> {
    write_file(path, &balance_csv(rows))
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut s = String::from("epoch,forward_ms,backward_ms,scoring_ms,fim_ms,eval_ms\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch, r.forward_ms, r.backward_ms, r.scoring_ms, r.fim_ms, r.eval_ms
        );
    }
    s
}

pub fn write_timing_csv(path: &Path, rows: &[TimingRow]) -> Result<()> {
    write_file(path, &timing_csv(rows))
}

/// Columns mirror the overhead table: fusion, modality count, parameter
/// count, section times, and the overhead percentage.
pub fn overhead_csv(report: &OverheadReport) -> String {
    let mut s = String::from(
        "fusion,n_modalities,n_params,forward_ms,backward_ms,pose_est_ms,correlation_ms,score_calc_ms,overhead_pct\n",
    );
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.2}",
            r.fusion,
            r.n_modalities,
            r.n_params,
            r.forward_ms,
            r.backward_ms,
            r.pose_est_ms,
            r.correlation_ms,
            r.score_calc_ms,
            r.overhead_pct
        );
    }
    s
}

pub fn write_overhead_csv(path: &Path, report: &OverheadReport) -> Result<()> {
    write_file(path, &overhead_csv(report))
}

/// Per-run summary persisted as JSON next to the CSVs; the report and
/// ablation commands join runs on these fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub epochs: usize,
    pub window_epochs: usize,
    pub alpha_superior: f64,
    pub alpha_inferior: f64,
    pub fusion: String,
    pub modalities: String,
    pub weight_decay: f64,
    pub final_test_mpjpe: f64,
    pub final_test_pa_mpjpe: f64,
}

pub fn write_summary(path: &Path, summary: &RunSummary) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Per-epoch mean Shapley score per modality: the Fig. 3-style curve
/// data, one series column per modality.
pub fn shapley_curves_csv(scores: &[ScoreRow]) -> String {
    let mut epochs: Vec<usize> = scores.iter().map(|r| r.epoch).collect();
    epochs.sort_unstable();
    epochs.dedup();
    let mut s = String::from("epoch,phi_R,phi_L,phi_M,phi_W\n");
    for e in epochs {
        let rows: Vec<&ScoreRow> = scores.iter().filter(|r| r.epoch == e).collect();
        let mut mean = PerModality([0.0; 4]);
        for r in &rows {
            for m in ALL_MODALITIES {
                mean[m] += r.phi[m];
            }
        }
        for m in ALL_MODALITIES {
            mean[m] /= rows.len() as f64;
        }
        let _ = writeln!(s, "{},{},{},{},{}", e, mean.0[0], mean.0[1], mean.0[2], mean.0[3]);
    }
    s
}

/// MPJPE/PA-MPJPE versus learning window length K, one row per run,
/// sorted by K.
pub fn k_sweep_csv(summaries: &[RunSummary]) -> String {
    let mut rows: Vec<&RunSummary> = summaries.iter().collect();
    rows.sort_by_key(|r| r.window_epochs);
    let mut s = String::from("K,mpjpe,pa_mpjpe\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.window_epochs, r.final_test_mpjpe, r.final_test_pa_mpjpe);
    }
    s
}

/// Ablation grid table: per (alpha_S, alpha_I) cell, the metric and its
/// delta against the no-AWC baseline (delta = baseline - run, positive
/// means the run improved on the baseline).
pub fn ablation_csv(baseline: &RunSummary, cells: &[RunSummary]) -> String {
    let mut s = String::from(
        "# delta columns are baseline - run (positive = improvement over no-AWC baseline)\n",
    );
    s.push_str("alpha_S,alpha_I,mpjpe,pa_mpjpe,delta_mpjpe,delta_pa_mpjpe\n");
    let _ = writeln!(
        s,
        "baseline,baseline,{},{},0,0",
        baseline.final_test_mpjpe, baseline.final_test_pa_mpjpe
    );
    for c in cells {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            c.alpha_superior,
            c.alpha_inferior,
            c.final_test_mpjpe,
            c.final_test_pa_mpjpe,
            baseline.final_test_mpjpe - c.final_test_mpjpe,
            baseline.final_test_pa_mpjpe - c.final_test_pa_mpjpe,
        );
    }
    s
}
