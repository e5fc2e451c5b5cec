//! Experiment driver: dataset generation, balanced training, report
//! tables, the alpha ablation grid, and the scoring-overhead profile.
//!
//! Exit codes: 0 success, 2 config error, 3 I/O error, 4 NaN abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use modbal::balance::AwcConfig;
use modbal::checkpoint;
use modbal::config::ExperimentConfig;
use modbal::data;
use modbal::error::Error;
use modbal::report::{self, RunSummary};
use modbal::trainer::{self, TrainOutput};

#[derive(Parser)]
#[command(name = "modbal", about = "Balanced multi-modal regression experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment config file (key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Override run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override any config key, e.g. --set optim.lr=0.01 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Overwrite existing outputs instead of refusing.
    #[arg(long)]
    force_overwrite: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/test dataset files (MBDATA1) and print checksums.
    Generate(CommonArgs),
    /// Run the training loop; writes report, score and balance CSVs,
    /// a summary, and a model checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Disable the AWC learning window (forces balance.window_epochs = 0).
        #[arg(long)]
        no_awc: bool,
    },
    /// Build plot-ready tables from existing outputs.
    Report {
        /// A single run directory (reads scores.csv, emits shapley_curves.csv).
        #[arg(long)]
        run: Option<PathBuf>,
        /// A directory of run subdirectories (reads summary.json files,
        /// emits k_sweep.csv sorted by window length).
        #[arg(long)]
        runs: Option<PathBuf>,
        /// An overhead CSV from `profile` (re-emitted as overhead_table.csv).
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        force_overwrite: bool,
    },
    /// Grid of (alpha_S, alpha_I) cells against a no-AWC baseline.
    Ablate(CommonArgs),
    /// Scoring-overhead breakdown per fusion kind and modality count.
    Profile {
        #[command(flatten)]
        common: CommonArgs,
        /// Batches per table row (medians are taken over these).
        #[arg(long, default_value_t = 50)]
        batches: usize,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::InvalidDataConfig(_)
        | Error::UnknownFusion(_)
        | Error::BatchSizeTooSmall(_) => 2,
        Error::NanLoss { .. } => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(common) => cmd_generate(&common),
        Command::Train { common, no_awc } => cmd_train(&common, no_awc).map(|_| ()),
        Command::Report { run, runs, profile, out, force_overwrite } => {
            cmd_report(run.as_deref(), runs.as_deref(), profile.as_deref(), &out, force_overwrite)
        }
        Command::Ablate(common) => cmd_ablate(&common),
        Command::Profile { common, batches } => cmd_profile(&common, batches),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(&common.config)?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    for set in &common.sets {
        let (key, value) = set
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{set}`")))?;
        cfg.apply_set(key.trim(), value.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn guard_clobber(path: &Path, force: bool) -> Result<(), Error> {
    if !force && path.exists() {
        return Err(Error::WouldClobber(path.display().to_string()));
    }
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn cmd_generate(common: &CommonArgs) -> Result<(), Error> {
    let cfg = load_config(common)?;
    ensure_dir(&common.out)?;
    let train_path = common.out.join("train.mbdata");
    let test_path = common.out.join("test.mbdata");
    guard_clobber(&train_path, common.force_overwrite)?;
    guard_clobber(&test_path, common.force_overwrite)?;
    let (train, test) = data::generate(&cfg.data)?;
    data::save(&train, &train_path)?;
    data::save(&test, &test_path)?;
    println!("{}  {}", data::file_checksum(&train_path)?, train_path.display());
    println!("{}  {}", data::file_checksum(&test_path)?, test_path.display());
    Ok(())
}

fn write_run_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    out: &TrainOutput,
    force: bool,
) -> Result<(), Error> {
    ensure_dir(dir)?;
    let files = [
        "report.csv",
        "scores.csv",
        "balance.csv",
        "timing.csv",
        "summary.json",
        "model.modbal",
        "config.txt",
    ];
    for f in files {
        guard_clobber(&dir.join(f), force)?;
    }
    report::write_report_csv(&dir.join("report.csv"), &out.report)?;
    report::write_scores_csv(&dir.join("scores.csv"), &out.scores)?;
    report::write_balance_csv(&dir.join("balance.csv"), &out.balance_log)?;
    report::write_timing_csv(&dir.join("timing.csv"), &out.timing)?;
    report::write_summary(&dir.join("summary.json"), &summary_of(cfg, out))?;
    checkpoint::save(&out.model, &dir.join("model.modbal"))?;
    std::fs::write(dir.join("config.txt"), cfg.to_key_values())?;
    Ok(())
}

fn summary_of(cfg: &ExperimentConfig, out: &TrainOutput) -> RunSummary {
    RunSummary {
        seed: cfg.run.seed,
        epochs: cfg.run.epochs,
        window_epochs: cfg.balance.window_epochs,
        alpha_superior: cfg.balance.alpha_superior,
        alpha_inferior: cfg.balance.alpha_inferior,
        fusion: cfg.model.fusion.name().to_string(),
        modalities: cfg.run.modalities.clone(),
        weight_decay: cfg.optim.weight_decay,
        final_test_mpjpe: out.report.final_test_mpjpe,
        final_test_pa_mpjpe: out.report.final_test_pa_mpjpe,
    }
}

fn cmd_train(common: &CommonArgs, no_awc: bool) -> Result<RunSummary, Error> {
    let mut cfg = load_config(common)?;
    if no_awc {
        cfg.balance.window_epochs = 0;
    }
    let out = trainer::train(&cfg)?;
    write_run_outputs(&common.out, &cfg, &out, common.force_overwrite)?;
    let summary = summary_of(&cfg, &out);
    println!(
        "final test MPJPE {:.4} mm, PA-MPJPE {:.4} mm ({} epochs, seed {})",
        summary.final_test_mpjpe, summary.final_test_pa_mpjpe, cfg.run.epochs, cfg.run.seed
    );
    Ok(summary)
}

fn cmd_report(
    run: Option<&Path>,
    runs: Option<&Path>,
    profile: Option<&Path>,
    out: &Path,
    force: bool,
) -> Result<(), Error> {
    if run.is_none() && runs.is_none() && profile.is_none() {
        return Err(Error::Config("report needs at least one of --run, --runs, --profile".into()));
    }
    ensure_dir(out)?;
    if let Some(dir) = run {
        let scores = report::read_scores_csv(&dir.join("scores.csv"))?;
        let path = out.join("shapley_curves.csv");
        guard_clobber(&path, force)?;
        std::fs::write(&path, report::shapley_curves_csv(&scores))?;
        println!("wrote {}", path.display());
    }
    if let Some(dir) = runs {
        let mut summaries = Vec::new();
        for entry in std::fs::read_dir(dir)? {
            let sub = entry?.path();
            let summary_path = sub.join("summary.json");
            if summary_path.exists() {
                summaries.push(report::read_summary(&summary_path)?);
            }
        }
        if summaries.is_empty() {
            return Err(Error::MalformedFile {
                path: dir.display().to_string(),
                detail: "no run subdirectories with summary.json".into(),
            });
        }
        let path = out.join("k_sweep.csv");
        guard_clobber(&path, force)?;
        std::fs::write(&path, report::k_sweep_csv(&summaries))?;
        println!("wrote {}", path.display());
    }
    if let Some(file) = profile {
        let text = std::fs::read_to_string(file)?;
        let path = out.join("overhead_table.csv");
        guard_clobber(&path, force)?;
        std::fs::write(&path, text)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// The alpha grid of the sensitivity study; the baseline row is a
/// no-AWC run of the same config.
const ALPHA_GRID: [(f64, f64); 8] = [
    (0.0, 10_000.0),
    (10_000.0, 0.0),
    (10_000.0, 10_000.0),
    (10_000.0, 20_000.0),
    (20_000.0, 0.0),
    (20_000.0, 10_000.0),
    (20_000.0, 20_000.0),
    (30_000.0, 20_000.0),
];

fn worker_threads() -> usize {
    std::env::var("MODBAL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn cmd_ablate(common: &CommonArgs) -> Result<(), Error> {
    let cfg = load_config(common)?;
    ensure_dir(&common.out)?;
    let table_path = common.out.join("ablation.csv");
    guard_clobber(&table_path, common.force_overwrite)?;

    let mut baseline_cfg = cfg.clone();
    baseline_cfg.balance.window_epochs = 0;
    let baseline_out = trainer::train(&baseline_cfg)?;
    let baseline_dir = common.out.join("baseline");
    write_run_outputs(&baseline_dir, &baseline_cfg, &baseline_out, common.force_overwrite)?;
    let baseline = summary_of(&baseline_cfg, &baseline_out);
    println!("baseline (no AWC): MPJPE {:.4}", baseline.final_test_mpjpe);

    let cells: Vec<(usize, ExperimentConfig)> = ALPHA_GRID
        .iter()
        .enumerate()
        .map(|(i, &(a_s, a_i))| {
            let mut c = cfg.clone();
            c.balance = AwcConfig {
                alpha_superior: a_s,
                alpha_inferior: a_i,
                ..cfg.balance.clone()
            };
            (i, c)
        })
        .collect();

    let threads = worker_threads();
    let mut summaries: Vec<Option<RunSummary>> = vec![None; cells.len()];
    for chunk in cells.chunks(threads) {
        let results: Vec<(usize, Result<(ExperimentConfig, TrainOutput), Error>)> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|(i, c)| {
                        let c = c.clone();
                        let i = *i;
                        scope.spawn(move || (i, trainer::train(&c).map(|o| (c, o))))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            });
        for (i, res) in results {
            let (c, out) = res?;
            let dir = common.out.join(format!(
                "alpha_{}_{}",
                c.balance.alpha_superior as u64, c.balance.alpha_inferior as u64
            ));
            write_run_outputs(&dir, &c, &out, common.force_overwrite)?;
            let s = summary_of(&c, &out);
            println!(
                "alpha_S {:>7} alpha_I {:>7}: MPJPE {:.4} (delta {:+.4})",
                c.balance.alpha_superior,
                c.balance.alpha_inferior,
                s.final_test_mpjpe,
                baseline.final_test_mpjpe - s.final_test_mpjpe
            );
            summaries[i] = Some(s);
        }
    }
    let cells: Vec<RunSummary> = summaries.into_iter().map(|s| s.unwrap()).collect();
    std::fs::write(&table_path, report::ablation_csv(&baseline, &cells))?;
    println!("wrote {}", table_path.display());
    Ok(())
}

fn cmd_profile(common: &CommonArgs, batches: usize) -> Result<(), Error> {
    let cfg = load_config(common)?;
    ensure_dir(&common.out)?;
    let path = common.out.join("overhead.csv");
    guard_clobber(&path, common.force_overwrite)?;
    let rep = trainer::profile_overhead(&cfg, batches)?;
    report::write_overhead_csv(&path, &rep)?;
    println!(
        "{:<11} {:>5} {:>9} {:>9} {:>9} {:>9} {:>11} {:>11} {:>9}",
        "fusion", "#mod", "#params", "fwd_ms", "bwd_ms", "pose_ms", "corr_ms", "score_ms", "ovhd_%"
    );
    for r in &rep.rows {
        println!(
            "{:<11} {:>5} {:>9} {:>9.3} {:>9.3} {:>9.3} {:>11.4} {:>11.4} {:>9.2}",
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
    println!("wrote {}", path.display());
    Ok(())
}
