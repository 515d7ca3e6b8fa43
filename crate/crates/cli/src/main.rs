//! `voilab`: run the simulation, estimation and reporting pipeline stage by stage or end to end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use voilab::cli_reporting::{self as report, ExperimentConfig, ExperimentReport, MetricsRow};
use voilab::policy_eval::PolicyValueEstimate;
use voilab::spatial_stats::RsaRow;
use voilab::voi_tests::DeltaResult;

#[derive(Parser)]
#[command(name = "voilab", version, about = "Value-of-information experiments on simulated ad logs")]
struct Cli {
    /// Print stage progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment config; unset fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OutArgs {
    /// Output directory holding the earlier stages' files.
    #[arg(long, default_value = "voilab_out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved config as JSON.
    Config(ConfigArgs),
    /// Sample a market and write the impression log and ground truth.
    Simulate(ConfigArgs),
    /// Split users and write feature tables.
    Features(OutArgs),
    /// Fit one click model per information regime.
    Train(OutArgs),
    /// Estimate logging propensities and covariate balance.
    Propensity(OutArgs),
    /// IPS values of the logging policy and each regime's greedy policy.
    Evaluate(OutArgs),
    /// Aggregate and depth-binned complement/substitute tests.
    Delta(OutArgs),
    /// Residualized spatial autocorrelation tests.
    Rsa(OutArgs),
    /// Descriptive curves, charts and the file index.
    Report(OutArgs),
    /// Every stage in order.
    Run(ConfigArgs),
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::from_json(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn progress(verbose: bool, stage: &str) {
    if verbose {
        eprintln!("[voilab] {stage}");
    }
}

// ── Printing ──

fn print_metrics(rows: &[MetricsRow]) {
    println!("{:<6} {:<10} {:>10} {:>8} {:>7} {:>9}", "regime", "learner", "log_loss", "RIG%", "AUC", "n");
    for r in rows {
        let m = &r.metrics;
        println!("{:<6} {:<10} {:>10.5} {:>8.2} {:>7.4} {:>9}", r.regime.tag(), r.learner, m.log_loss, 100.0 * m.rig, m.auc, m.n);
    }
}

fn print_policies(rows: &[PolicyValueEstimate]) {
    println!("{:<10} {:>9} {:>9} {:>9} {:>9} {:>10}", "policy", "value", "se", "lift%", "ess", "n_matched");
    for e in rows {
        println!("{:<10} {:>9.5} {:>9.5} {:>9.2} {:>9.1} {:>10}", e.policy, e.value, e.se, e.lift_pct, e.ess, e.n_matched);
    }
}

fn print_delta(d: &DeltaResult) {
    println!(
        "delta {:+.5} (se {:.5}, two-sided p {:.4}, one-sided p for delta > 0 {:.3}) -> {} / {}",
        d.delta_hat,
        d.se_clustered,
        d.p_two_sided,
        d.p_delta_pos,
        d.decision.label(),
        d.tier.label()
    );
}

fn print_rsa(rows: &[RsaRow]) {
    println!(
        "{:<7} {:<7} {:<11} {:>8} {:>7} {:>8} {:>7} {:>8}",
        "key", "split", "residual", "moran_I", "p", "geary_C", "p", "regions"
    );
    for r in rows {
        println!(
            "{:<7} {:<7} {:<11} {:>8.4} {:>7.4} {:>8.4} {:>7.4} {:>8}",
            format!("{:?}", r.region_key),
            format!("{:?}", r.split),
            format!("{:?}", r.residual),
            r.moran_i,
            r.moran_p,
            r.geary_c,
            r.geary_p,
            r.n_regions
        );
    }
}

fn print_report(rep: &ExperimentReport, out: &Path) {
    print_metrics(&rep.metrics);
    println!();
    print_policies(&rep.policy_values);
    if let Some(d) = &rep.aggregate_delta {
        println!();
        print_delta(d);
    }
    if let Some(rows) = &rep.rsa {
        println!();
        print_rsa(rows);
    }
    println!("\n{} files in {} (config {})", rep.files.len(), out.display(), &rep.provenance.config_hash[..12]);
}

// ── Commands ──

fn run(cli: Cli) -> Result<()> {
    let verbose = cli.verbose;
    match cli.command {
        Command::Config(args) => {
            println!("{}", load_config(&args)?.resolved().to_json());
        }
        Command::Simulate(args) => {
            let cfg = load_config(&args)?;
            let out = report::output_dir(&cfg, args.out.as_deref());
            progress(verbose, "simulate");
            let log = report::stage_simulate(&cfg, &out)?;
            println!("{} impressions from {} users written to {}", log.len(), cfg.sim.n_users, out.display());
        }
        Command::Features(a) => {
            progress(verbose, "features");
            let split = report::stage_features(&a.out)?;
            println!("{} train users, {} test users", split.train_users.len(), split.test_users.len());
        }
        Command::Train(a) => {
            progress(verbose, "train");
            print_metrics(&report::stage_train(&a.out)?);
        }
        Command::Propensity(a) => {
            progress(verbose, "propensity");
            let s = report::stage_propensity(&a.out)?;
            println!(
                "{} propensities ({}), {} rows dropped, MAE vs truth {:.4}, max post-weighting SB {:.3}",
                s.n_rows, s.source, s.n_dropped, s.mae_vs_truth, s.max_post_balance
            );
            for n in &s.notes {
                println!("note: {n}");
            }
        }
        Command::Evaluate(a) => {
            progress(verbose, "evaluate");
            print_policies(&report::stage_evaluate(&a.out)?);
        }
        Command::Delta(a) => {
            progress(verbose, "delta");
            match report::stage_delta(&a.out)?.aggregate {
                Some(d) => print_delta(&d),
                None => println!("delta skipped"),
            }
        }
        Command::Rsa(a) => {
            progress(verbose, "rsa");
            match report::stage_rsa(&a.out)? {
                Some(rows) => print_rsa(&rows),
                None => println!("rsa skipped"),
            }
        }
        Command::Report(a) => {
            progress(verbose, "report");
            let (index, _) = report::stage_report(&a.out)?;
            println!("{} files indexed in {}", index.files.len(), a.out.join("report.json").display());
        }
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let out = report::output_dir(&cfg, args.out.as_deref());
            let rep = report::run_experiment_with(&cfg, &out, &mut |s| progress(verbose, s))
                .with_context(|| format!("run incomplete; see {}", out.join(report::INCOMPLETE_MARKER).display()))?;
            print_report(&rep, &out);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
