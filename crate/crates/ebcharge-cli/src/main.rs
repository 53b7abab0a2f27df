//! Command-line entry point wiring configuration, data ingestion, training,
//! evaluation, oracle checks, and trace export.
//!
//! Exit codes: 0 success (and oracle PASS), 1 oracle FAIL, 2 usage error,
//! 3 data error, 4 training fault, 5 oracle INCONCLUSIVE.

mod manifest;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use ebcharge_core::agents::{
    evaluate, Mode, PolicyBundle, Trainer, TrainingLogRow, TRAIN_LOG_HEADER,
};
use ebcharge_core::config::Config;
use ebcharge_core::env::Scenario;
use ebcharge_core::oracle::{check_equivalence, load_instance, report_lines, Verdict};
use ebcharge_core::prices::PriceSeries;
use ebcharge_core::trace::write_trace;
use ebcharge_core::{Error, Result};

use manifest::{digest_file, version_string, RunManifest};

const EXIT_ORACLE_FAIL: i32 = 1;
const EXIT_USAGE: i32 = 2;
const EXIT_DATA: i32 = 3;
const EXIT_TRAINING: i32 = 4;
const EXIT_INCONCLUSIVE: i32 = 5;

#[derive(Parser)]
#[command(name = "ebcharge", version, about = "Electric bus charging scheduler")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutArg {
    /// Output directory; defaults to $EBCHARGE_OUT_ROOT/<run-name> (or
    /// ./runs/<run-name>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent and write its curve file and checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// hddqn_her, hddqn, ddqn_original, ddqn_low, or ddqn_high.
        #[arg(long)]
        mode: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Overrides the configured episode count.
        #[arg(long)]
        episodes: Option<usize>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Evaluate a checkpoint greedily on the test span.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also write one trace file per episode.
        #[arg(long)]
        traces: bool,
        #[command(flatten)]
        out: OutArg,
    },
    /// Verify flat-vs-hierarchical optimality on a tabular instance.
    OracleCheck {
        #[arg(long)]
        instance: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train and evaluate several (mode, seed) pairs and tabulate them.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated mode list.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Overrides the configured episode count.
        #[arg(long)]
        episodes: Option<usize>,
        /// Test episodes for the final evaluation of each run.
        #[arg(long, default_value_t = 100)]
        eval_episodes: usize,
        #[command(flatten)]
        out: OutArg,
    },
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    std::process::exit(code);
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Contract(_) => EXIT_USAGE,
        Error::Ingestion(_) | Error::Io(_) => EXIT_DATA,
        Error::Fault(_) | Error::Training(_) => EXIT_TRAINING,
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train {
            config,
            mode,
            seed,
            episodes,
            out,
        } => cmd_train(&config, &mode, seed, episodes, out),
        Command::Evaluate {
            checkpoint,
            config,
            episodes,
            seed,
            traces,
            out,
        } => cmd_evaluate(&checkpoint, &config, episodes, seed, traces, out),
        Command::OracleCheck { instance, out } => cmd_oracle_check(&instance, out),
        Command::Compare {
            config,
            modes,
            seeds,
            episodes,
            eval_episodes,
            out,
        } => cmd_compare(&config, &modes, &seeds, episodes, eval_episodes, out),
    }
}

fn out_dir(arg: OutArg, run_name: &str) -> Result<PathBuf> {
    let dir = match arg.out {
        Some(d) => d,
        None => {
            let root = std::env::var_os("EBCHARGE_OUT_ROOT")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"));
            root.join(run_name)
        }
    };
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Loads the config, applies an episode override, and ingests the price
/// file with its train/test split.
fn load_setup(
    config_path: &Path,
    episodes: Option<usize>,
) -> Result<(Config, Scenario, Arc<PriceSeries>, Arc<PriceSeries>)> {
    let mut cfg = Config::load(config_path)?;
    if let Some(n) = episodes {
        if n == 0 {
            return Err(Error::Config("episode override must be positive".into()));
        }
        cfg.train.episodes = n;
        cfg.train.phase_threshold = cfg.train.phase_threshold.min(n);
        cfg.train.eval_every = cfg.train.eval_every.min(n);
    }
    let price_path = cfg
        .env
        .price_file
        .clone()
        .ok_or_else(|| Error::Config("config must set price_file".into()))?;
    let prices = PriceSeries::load(&price_path, cfg.env.dt_minutes)?;
    let (train, test) = prices.split_train_test(cfg.env.train_boundary_day)?;
    let scenario = Scenario::from_config(&cfg.env);
    Ok((cfg, scenario, Arc::new(train), Arc::new(test)))
}

fn write_curve(path: &Path, rows: &[TrainingLogRow]) -> Result<()> {
    let mut text = String::from(TRAIN_LOG_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.to_csv());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_train(
    config_path: &Path,
    mode_str: &str,
    seed: u64,
    episodes: Option<usize>,
    out: OutArg,
) -> Result<i32> {
    let mode: Mode = mode_str.parse()?;
    let (cfg, scenario, train, test) = load_setup(config_path, episodes)?;
    let dir = out_dir(out, &format!("train-{}-seed{}", mode.as_str(), seed))?;
    let price_path = cfg.env.price_file.clone().unwrap();
    RunManifest {
        version: version_string(),
        command: "train".into(),
        modes: vec![mode.as_str().into()],
        seeds: vec![seed],
        episodes_override: episodes,
        config_path: Some(config_path.to_path_buf()),
        config: Some(cfg.clone()),
        data_digests: vec![digest_file(&price_path)?],
        out_dir: dir.clone(),
    }
    .write(&dir)?;

    let mut trainer = Trainer::new(cfg, scenario, train, test, mode, seed)?;
    let result = trainer.run();
    let bundle = trainer.into_bundle();
    bundle.save(&dir.join("checkpoint.json"))?;
    match result {
        Ok(rows) => {
            write_curve(&dir.join("curve.csv"), &rows)?;
            println!(
                "trained {} for {} episodes; outputs in {}",
                mode.as_str(),
                bundle.episodes_trained,
                dir.display()
            );
            Ok(0)
        }
        Err(e) => {
            eprintln!(
                "training aborted after {} episodes (checkpoint saved): {e}",
                bundle.episodes_trained
            );
            Err(e)
        }
    }
}

/// Expected layer sizes for a mode under a config, mirroring the trainer's
/// network construction.
fn expected_sizes(
    cfg: &Config,
    scenario: &Scenario,
    bounds_len: impl Fn(bool) -> usize,
    mode: Mode,
) -> (Option<Vec<usize>>, Option<Vec<usize>>) {
    let high = mode.has_high_net().then(|| {
        let mut s = vec![bounds_len(false)];
        s.extend(&cfg.train.hidden);
        s.push(scenario.options.n_slots());
        s
    });
    let low = mode.has_low_net().then(|| {
        let (hidden, with_option) = match mode {
            Mode::DdqnLow => (&cfg.train.hidden_ddqn_low, true),
            Mode::DdqnOriginal => (&cfg.train.hidden, false),
            _ => (&cfg.train.hidden, true),
        };
        let mut s = vec![bounds_len(with_option)];
        s.extend(hidden);
        s.push(scenario.actions.n_slots());
        s
    });
    (high, low)
}

fn cmd_evaluate(
    checkpoint: &Path,
    config_path: &Path,
    episodes: usize,
    seed: u64,
    traces: bool,
    out: OutArg,
) -> Result<i32> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let (cfg, scenario, _train, test) = load_setup(config_path, None)?;
    // Peek at the checkpoint's mode first, then re-load with the
    // architecture expected under this config.
    let peek = PolicyBundle::load(checkpoint, None, None)?;
    let mode = peek.mode()?;
    let w_p = scenario.price_window;
    let (high, low) = expected_sizes(
        &cfg,
        &scenario,
        |with_option| 4 + w_p + 1 + usize::from(with_option),
        mode,
    );
    let bundle = PolicyBundle::load(checkpoint, high.as_deref(), low.as_deref())?;
    let dir = out_dir(out, &format!("evaluate-{}", mode.as_str()))?;
    RunManifest {
        version: version_string(),
        command: "evaluate".into(),
        modes: vec![mode.as_str().into()],
        seeds: vec![seed],
        episodes_override: Some(episodes),
        config_path: Some(config_path.to_path_buf()),
        config: Some(cfg.clone()),
        data_digests: vec![
            digest_file(&cfg.env.price_file.clone().unwrap())?,
            digest_file(checkpoint)?,
        ],
        out_dir: dir.clone(),
    }
    .write(&dir)?;

    let summary = evaluate(&bundle.view()?, &scenario, &test, episodes, seed, traces)?;
    let mut text = String::from("episodes,mean_return,stderr,terminal_episodes\n");
    text.push_str(&format!(
        "{},{},{},{}\n",
        episodes, summary.mean, summary.stderr, summary.terminal_episodes
    ));
    std::fs::write(dir.join("summary.csv"), text)?;
    let mut returns = String::from("episode,return\n");
    for (i, r) in summary.returns.iter().enumerate() {
        returns.push_str(&format!("{i},{r}\n"));
    }
    std::fs::write(dir.join("episode_returns.csv"), returns)?;
    if let Some(all) = &summary.traces {
        for (i, rows) in all.iter().enumerate() {
            write_trace(&dir.join(format!("trace_{i:03}.csv")), rows)?;
        }
    }
    println!(
        "evaluated {} over {} episodes: mean return {:.4} (stderr {:.4}), {} terminal entries",
        mode.as_str(),
        episodes,
        summary.mean,
        summary.stderr,
        summary.terminal_episodes
    );
    Ok(0)
}

fn cmd_oracle_check(instance: &Path, out: OutArg) -> Result<i32> {
    let inst = load_instance(instance)?;
    let dir = out_dir(out, &format!("oracle-{}", inst.name))?;
    RunManifest {
        version: version_string(),
        command: "oracle-check".into(),
        modes: vec![],
        seeds: vec![],
        episodes_override: None,
        config_path: None,
        config: None,
        data_digests: vec![digest_file(instance)?],
        out_dir: dir.clone(),
    }
    .write(&dir)?;
    let report = check_equivalence(&inst, None)?;
    std::fs::write(dir.join("report.csv"), report_lines(&report))?;
    let verdict = match report.verdict {
        Verdict::Pass => "PASS",
        Verdict::Fail => "FAIL",
        Verdict::Inconclusive => "INCONCLUSIVE",
    };
    println!("{verdict}: {} ({})", inst.name, report.detail);
    Ok(match report.verdict {
        Verdict::Pass => 0,
        Verdict::Fail => EXIT_ORACLE_FAIL,
        Verdict::Inconclusive => EXIT_INCONCLUSIVE,
    })
}

fn cmd_compare(
    config_path: &Path,
    modes: &[String],
    seeds: &[u64],
    episodes: Option<usize>,
    eval_episodes: usize,
    out: OutArg,
) -> Result<i32> {
    if modes.is_empty() || seeds.is_empty() {
        return Err(Error::Config("compare needs at least one mode and seed".into()));
    }
    let parsed: Vec<Mode> = modes
        .iter()
        .map(|m| m.parse())
        .collect::<Result<Vec<Mode>>>()?;
    let (cfg, scenario, train, test) = load_setup(config_path, episodes)?;
    let dir = out_dir(out, "compare")?;
    RunManifest {
        version: version_string(),
        command: "compare".into(),
        modes: modes.to_vec(),
        seeds: seeds.to_vec(),
        episodes_override: episodes,
        config_path: Some(config_path.to_path_buf()),
        config: Some(cfg.clone()),
        data_digests: vec![digest_file(&cfg.env.price_file.clone().unwrap())?],
        out_dir: dir.clone(),
    }
    .write(&dir)?;

    let mut rows = String::from("mode,seed,mean_return,stderr,terminal_episodes\n");
    let mut table: Vec<(Mode, Vec<f64>)> = Vec::new();
    let mut failures = Vec::new();
    for &mode in &parsed {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let sub = dir.join(format!("{}-seed{}", mode.as_str(), seed));
            std::fs::create_dir_all(&sub)?;
            let run = (|| -> Result<f64> {
                let mut trainer = Trainer::new(
                    cfg.clone(),
                    scenario.clone(),
                    Arc::clone(&train),
                    Arc::clone(&test),
                    mode,
                    seed,
                )?;
                let curve = trainer.run();
                let bundle = trainer.into_bundle();
                bundle.save(&sub.join("checkpoint.json"))?;
                write_curve(&sub.join("curve.csv"), &curve?)?;
                let summary = evaluate(
                    &bundle.view()?,
                    &scenario,
                    &test,
                    eval_episodes,
                    seed,
                    false,
                )?;
                rows.push_str(&format!(
                    "{},{},{},{},{}\n",
                    mode.as_str(),
                    seed,
                    summary.mean,
                    summary.stderr,
                    summary.terminal_episodes
                ));
                Ok(summary.mean)
            })();
            match run {
                Ok(mean) => per_seed.push(mean),
                Err(e) => {
                    eprintln!("{} seed {} failed: {e}", mode.as_str(), seed);
                    failures.push(format!("{} seed {}: {e}", mode.as_str(), seed));
                }
            }
        }
        table.push((mode, per_seed));
    }
    std::fs::write(dir.join("results.csv"), rows)?;

    // Summary laid out per bus (one seed per bus), max, average.
    let mut summary = String::from("mode");
    for (i, seed) in seeds.iter().enumerate() {
        summary.push_str(&format!(",eb_{}(seed {seed})", (b'a' + i as u8) as char));
    }
    summary.push_str(",max,average\n");
    for (mode, per_seed) in &table {
        summary.push_str(mode.as_str());
        for v in per_seed {
            summary.push_str(&format!(",{v}"));
        }
        for _ in per_seed.len()..seeds.len() {
            summary.push(',');
        }
        if per_seed.is_empty() {
            summary.push_str(",,\n");
            continue;
        }
        let max = per_seed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let avg = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        summary.push_str(&format!(",{max},{avg}\n"));
    }
    std::fs::write(dir.join("summary.csv"), &summary)?;
    println!("{summary}");
    if failures.is_empty() {
        Ok(0)
    } else {
        Err(Error::Training(format!(
            "{} of {} runs failed: {}",
            failures.len(),
            parsed.len() * seeds.len(),
            failures.join("; ")
        )))
    }
}
