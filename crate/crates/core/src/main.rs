//! Command-line front end for the whole experiment cycle: pretrain a source
//! checkpoint, freeze its statistics, stream the corrupted rounds with or
//! without adaptation, ablate channels, and print cost tables and reports.
//!
//! Artifacts land in the `--out` directory under fixed names, so the
//! subcommands chain without extra plumbing:
//!
//! ```text
//! driftprune --profile ci pretrain
//! driftprune --profile ci collect-stats
//! driftprune --profile ci run
//! driftprune --profile ci direct-test
//! driftprune --profile ci report
//! ```

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use log::info;

use driftprune::archive::{load_checkpoint, load_source_stats, save_checkpoint, save_source_stats};
use driftprune::detector::{finalize_bn_stats, pretrain_source};
use driftprune::error::Error;
use driftprune::flops::{backward_flops, gamma_param_ids};
use driftprune::harness::{
    build_target_sets, channel_ablation_study, corrupt_set, direct_test, evaluate_detector,
    generate_source, read_metrics, run_continual, ExperimentConfig, MetricsWriter, Profile,
    RunArtifacts, RunMeta, SummaryCell, SummaryTable,
};
use driftprune::pruning::derive_mask;
use driftprune::stats::collect_source_stats;

#[derive(Parser)]
#[command(
    name = "driftprune",
    version,
    about = "Continual test-time adaptation of a small detector, pruning the channels that domain shift destabilizes"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML); omitted = the selected profile preset.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides the configured one and rederives sub-seeds.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Stream rounds; overrides the configured count.
    #[arg(long, global = true, value_name = "N")]
    rounds: Option<usize>,
    /// Built-in preset when no --config is given: `full` or `ci`.
    #[arg(long, global = true, value_name = "NAME", default_value = "full")]
    profile: String,
    /// Stream without adapting: evaluation-only passes, no updates.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Directory for checkpoints, logs, and tables.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Log a per-layer sensitivity digest for every adaptation batch.
    #[arg(long, global = true)]
    verbose_sensitivity: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain on clean synthetic scenes and save the source checkpoint.
    Pretrain,
    /// Freeze source feature statistics from the checkpoint.
    CollectStats,
    /// Adapt online over the corrupted stream (respects --dry-run).
    Run,
    /// Evaluate the frozen source checkpoint over the stream; no adaptation.
    DirectTest,
    /// Knock out each prunable channel and score clean/corrupted deltas.
    AblateChannels,
    /// Print the per-layer cost table; uses the adapted checkpoint's mask
    /// when one exists, the all-alive mask otherwise.
    FlopsTable,
    /// Rebuild tables from the saved metrics log.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = if cli.common.verbose_sensitivity {
        "info,driftprune::harness::stream=debug"
    } else {
        "info"
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(filter))
        .format_timestamp(None)
        .init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::preset(Profile::from_str(&common.profile)?),
    };
    if let Some(seed) = common.seed {
        cfg.reseed(seed);
    }
    if let Some(rounds) = common.rounds {
        cfg.stream.rounds = rounds;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Paths {
    checkpoint: PathBuf,
    adapted: PathBuf,
    stats: PathBuf,
    config: PathBuf,
    pretrain_loss: PathBuf,
    ablation: PathBuf,
}

fn require(path: &Path, produced_by: &str) -> Result<(), Error> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{} not found; run `driftprune {produced_by}` first",
            path.display()
        )))
    }
}

impl Paths {
    fn new(out: &Path) -> Paths {
        Paths {
            checkpoint: out.join("source.ckpt"),
            adapted: out.join("adapted.ckpt"),
            stats: out.join("source_stats.dp"),
            config: out.join("config.toml"),
            pretrain_loss: out.join("pretrain_loss.csv"),
            ablation: out.join("ablation.csv"),
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), Error> {
    let out = &cli.common.out;
    std::fs::create_dir_all(out)?;
    let paths = Paths::new(out);

    match cli.cmd {
        Cmd::Pretrain => {
            let cfg = load_config(&cli.common)?;
            cfg.save(&paths.config)?;
            cmd_pretrain(&cfg, &paths)
        }
        Cmd::CollectStats => cmd_collect_stats(&load_config(&cli.common)?, &paths),
        Cmd::Run => cmd_stream(&load_config(&cli.common)?, &paths, out, cli.common.dry_run),
        Cmd::DirectTest => cmd_direct_test(&load_config(&cli.common)?, &paths, out),
        Cmd::AblateChannels => cmd_ablate(&load_config(&cli.common)?, &paths),
        Cmd::FlopsTable => cmd_flops_table(&load_config(&cli.common)?, &paths),
        Cmd::Report => cmd_report(out),
    }
}

fn cmd_pretrain(cfg: &ExperimentConfig, paths: &Paths) -> Result<(), Error> {
    info!("generating {} source scenes", cfg.source_images);
    let data = generate_source(&cfg.scene, cfg.source_images)?;
    info!("pretraining for {} epochs", cfg.pretrain.epochs);
    let (mut state, losses) = pretrain_source(cfg.network.clone(), &data, &cfg.pretrain)?;
    finalize_bn_stats(&mut state, &data, cfg.pretrain.batch_size)?;
    save_checkpoint(&paths.checkpoint, &state)?;

    let mut curve = String::from("epoch,loss\n");
    for (e, l) in losses.iter().enumerate() {
        curve.push_str(&format!("{e},{l:.10}\n"));
    }
    std::fs::write(&paths.pretrain_loss, curve)?;

    let holdout = generate_source(&cfg.holdout_scene(), cfg.holdout_images)?;
    let map = evaluate_detector(&state, &holdout, None, cfg.pretrain.batch_size)?;
    println!(
        "pretrained on {} scenes; clean holdout mAP@50 {:.2}%; checkpoint {}",
        cfg.source_images,
        100.0 * map,
        paths.checkpoint.display()
    );
    Ok(())
}

fn cmd_collect_stats(cfg: &ExperimentConfig, paths: &Paths) -> Result<(), Error> {
    require(&paths.checkpoint, "pretrain")?;
    let state = load_checkpoint(&paths.checkpoint, &cfg.network)?;
    let data = generate_source(&cfg.scene, cfg.source_images)?;
    let stats = collect_source_stats(&state, &data, &cfg.stats)?;
    save_source_stats(&paths.stats, &cfg.network, &stats)?;
    println!(
        "statistics over {} images / {} instances (per class {:?}) written to {}",
        stats.images_seen,
        stats.rois_seen,
        stats.class_count,
        paths.stats.display()
    );
    Ok(())
}

fn write_stream_outputs(
    out: &Path,
    prefix: &str,
    artifacts: &RunArtifacts,
) -> Result<(), Error> {
    std::fs::write(out.join(format!("{prefix}summary.csv")), artifacts.summary.csv())?;
    std::fs::write(out.join(format!("{prefix}summary.txt")), artifacts.summary.text())?;
    std::fs::write(out.join(format!("{prefix}flops.txt")), artifacts.ledger.table())?;
    print!("{}", artifacts.summary.text());
    print!("{}", artifacts.ledger.table());
    Ok(())
}

fn cmd_stream(
    cfg: &ExperimentConfig,
    paths: &Paths,
    out: &Path,
    dry_run: bool,
) -> Result<(), Error> {
    cfg.save(&paths.config)?;
    require(&paths.checkpoint, "pretrain")?;
    require(&paths.stats, "collect-stats")?;
    let mut state = load_checkpoint(&paths.checkpoint, &cfg.network)?;
    let stats = load_source_stats(&paths.stats, &cfg.network)?;
    let targets = build_target_sets(cfg)?;

    let meta = RunMeta::new(cfg.hash(), cfg.seed);
    let mut writer = MetricsWriter::create(&out.join("metrics.csv"), &meta)?;
    let artifacts = run_continual(&mut state, &stats, cfg, &targets, Some(&mut writer), dry_run)?;
    write_stream_outputs(out, "", &artifacts)?;

    if !dry_run {
        save_checkpoint(&paths.adapted, &state)?;
        let ratio = derive_mask(&state, cfg.adapt.prune.threshold).ratio();
        println!(
            "final pruned fraction {:.3}; adapted checkpoint {}",
            ratio,
            paths.adapted.display()
        );
    }
    Ok(())
}

fn cmd_direct_test(cfg: &ExperimentConfig, paths: &Paths, out: &Path) -> Result<(), Error> {
    require(&paths.checkpoint, "pretrain")?;
    require(&paths.stats, "collect-stats")?;
    let state = load_checkpoint(&paths.checkpoint, &cfg.network)?;
    let stats = load_source_stats(&paths.stats, &cfg.network)?;
    let targets = build_target_sets(cfg)?;

    let meta = RunMeta::new(cfg.hash(), cfg.seed);
    let mut writer = MetricsWriter::create(&out.join("direct_metrics.csv"), &meta)?;
    let artifacts = direct_test(&state, &stats, cfg, &targets, Some(&mut writer))?;
    write_stream_outputs(out, "direct_", &artifacts)
}

fn cmd_ablate(cfg: &ExperimentConfig, paths: &Paths) -> Result<(), Error> {
    require(&paths.checkpoint, "pretrain")?;
    let state = load_checkpoint(&paths.checkpoint, &cfg.network)?;
    let in_set = generate_source(&cfg.holdout_scene(), cfg.holdout_images)?;
    let cond = cfg.stream.conditions[0];
    let cross_set = corrupt_set(&in_set, cond, cfg.stream.target_seed, 0)?;
    info!(
        "ablating {} channels against clean and {cond} holdout sets",
        cfg.network.considered_channels().iter().sum::<usize>()
    );
    let report = channel_ablation_study(&state, &in_set, &cross_set, cfg.stream.batch_size)?;
    std::fs::write(&paths.ablation, report.csv())?;
    println!(
        "baseline mAP@50: clean {:.2}%, {cond} {:.2}%",
        100.0 * report.baseline_in,
        100.0 * report.baseline_cross
    );
    println!(
        "removal hurts both: {}; helps under {cond} while hurting clean: {}; \
         hurts under {cond} while helping clean: {}; helps both: {}",
        report.quadrants[0], report.quadrants[1], report.quadrants[2], report.quadrants[3]
    );
    println!("scatter data written to {}", paths.ablation.display());
    Ok(())
}

fn cmd_flops_table(cfg: &ExperimentConfig, paths: &Paths) -> Result<(), Error> {
    let spec = &cfg.network;
    let mask = if paths.adapted.exists() {
        let state = load_checkpoint(&paths.adapted, spec)?;
        let mask = derive_mask(&state, cfg.adapt.prune.threshold);
        println!(
            "per-image cost under the adapted checkpoint's mask (pruned fraction {:.3}):",
            mask.ratio()
        );
        mask
    } else {
        println!("per-image cost with every channel alive:");
        driftprune::pruning::ChannelMask::all_alive(&spec.considered_channels())
    };
    // one image with a full complement of proposals; scale-only training
    let report = backward_flops(spec, &mask, &gamma_param_ids(), 1, spec.proposal.top_k, 1);
    print!("{}", report.table());
    Ok(())
}

fn cmd_report(out: &Path) -> Result<(), Error> {
    let log_path = out.join("metrics.csv");
    require(&log_path, "run")?;
    let (meta, rows) = read_metrics(&log_path)?;
    for (k, v) in &meta {
        println!("{k} = {v}");
    }
    println!("{} batches logged", rows.len());

    // Per-(round, condition) aggregates of what the log itself holds.
    let mut keys: Vec<(usize, String)> = Vec::new();
    for r in &rows {
        let key = (r.round, r.condition.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    println!(
        "{:>6} {:>12} {:>8} {:>12} {:>10} {:>16} {:>16} {:>6} {:>8}",
        "round", "condition", "batches", "mean loss", "end ratio", "fwd", "bwd", "react", "skipped"
    );
    for (round, condition) in &keys {
        let group: Vec<_> =
            rows.iter().filter(|r| r.round == *round && &r.condition == condition).collect();
        let mean_loss =
            group.iter().map(|r| r.total_loss).sum::<f64>() / group.len().max(1) as f64;
        let fwd: u64 = group.iter().map(|r| r.fwd_flops).sum();
        let bwd: u64 = group.iter().map(|r| r.bwd_flops).sum();
        let react: usize = group.iter().map(|r| r.reactivated).sum();
        let skipped = group.iter().filter(|r| r.skipped).count();
        let end_ratio = group.last().map(|r| r.ratio).unwrap_or(0.0);
        println!(
            "{:>6} {:>12} {:>8} {:>12.4} {:>10.3} {:>16} {:>16} {:>6} {:>8}",
            round,
            condition,
            group.len(),
            mean_loss,
            end_ratio,
            fwd,
            bwd,
            react,
            skipped
        );
    }

    // The quality table cannot be rebuilt from batch rows (detections are not
    // logged), so re-render it from the summary artifact when present.
    let summary_path = out.join("summary.csv");
    if summary_path.exists() {
        let text = std::fs::read_to_string(&summary_path)?;
        let mut cells = Vec::new();
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() == 8 && f[0] == "cell" {
                let parse = |s: &str, what: &str| {
                    s.parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad {what} `{s}` in summary.csv")))
                };
                cells.push(SummaryCell {
                    round: f[1]
                        .parse()
                        .map_err(|_| Error::Config(format!("bad round `{}`", f[1])))?,
                    condition: f[2].to_string(),
                    map_percent: parse(f[3], "mAP")?,
                    batches: f[4]
                        .parse()
                        .map_err(|_| Error::Config(format!("bad batches `{}`", f[4])))?,
                    end_ratio: parse(f[5], "ratio")?,
                    fwd_flops: f[6]
                        .parse()
                        .map_err(|_| Error::Config(format!("bad fwd `{}`", f[6])))?,
                    bwd_flops: f[7]
                        .parse()
                        .map_err(|_| Error::Config(format!("bad bwd `{}`", f[7])))?,
                });
            }
        }
        if !cells.is_empty() {
            print!("{}", SummaryTable::compute(cells).text());
        }
    }
    Ok(())
}
