use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use kppo::knowledge::{
    all_topic_stats, detect_violations, parse_prompt, ratio_to_f64, PruningLimits, ViolationReport,
};
use kppo::optimizer::{Prepared, RunConfig, RunOutcome, SearchConfig, Session};
use kppo::report::build_report;
use kppo::sim::{over_branched_prompt, write_fixture_config, FactFixture, PLAIN_PROMPT};
use kppo::{Error, Result};

#[derive(Parser)]
#[command(name = "kppo", version, about = "Optimize a knowledge-carrying system prompt")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a run from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Check config, data and templates, then exit without model calls.
        #[arg(long)]
        dry_run: bool,
        /// Override the batch-sampling seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many completed steps, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<u64>,
        /// Print the final report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Continue a run from its checkpoint.
    Resume {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stop_after: Option<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Rebuild the report of a run directory from its logs.
    Report {
        run_dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Show the knowledge outline of a prompt file and its structural violations.
    Inspect {
        prompt: PathBuf,
        #[arg(long, default_value_t = 16)]
        max_children: usize,
        #[arg(long, default_value_t = 8.0)]
        max_balance: f64,
        #[arg(long)]
        json: bool,
    },
    /// Write the offline demo task and a config that runs it.
    Fixture {
        dir: PathBuf,
        /// Start from a prompt with one over-full topic.
        #[arg(long)]
        over_branched: bool,
        #[arg(long)]
        pruning: bool,
        #[arg(long, default_value_t = 10)]
        iterations: u64,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run {
            config,
            dry_run,
            seed,
            stop_after,
            json,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.search.seed = seed;
            }
            let prepared = Prepared::load(cfg)?;
            if dry_run {
                print_dry_run(&prepared);
                return Ok(());
            }
            let session = Session::open(prepared)?;
            let state = session.initial_state();
            finish(&session, session.run(state, stop_after)?, json)
        }
        Command::Resume {
            checkpoint,
            config,
            stop_after,
            json,
        } => {
            let session = Session::open(Prepared::load(RunConfig::load(&config)?)?)?;
            let state = session.load_checkpoint(&checkpoint)?;
            finish(&session, session.run(state, stop_after)?, json)
        }
        Command::Report { run_dir, json } => {
            let report = build_report(&run_dir)?;
            if json {
                print!("{}", report.to_json()?);
            } else {
                print!("{}", report.to_text());
            }
            Ok(())
        }
        Command::Inspect {
            prompt,
            max_children,
            max_balance,
            json,
        } => inspect(&prompt, max_children, max_balance, json),
        Command::Fixture {
            dir,
            over_branched,
            pruning,
            iterations,
        } => {
            let prompt = if over_branched {
                over_branched_prompt(20)
            } else {
                PLAIN_PROMPT.to_string()
            };
            let search = SearchConfig {
                iterations,
                candidates_per_parent: 2,
                pruning,
                ..SearchConfig::default()
            };
            let path = write_fixture_config(&dir, &FactFixture::standard(), &prompt, search)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn print_dry_run(p: &Prepared) {
    let s = &p.config.search;
    println!("config ok: {}", p.config.digest());
    println!(
        "task {}: {} instances (train {}, val {}, test {})",
        p.dataset.name,
        p.dataset.instances.len(),
        p.splits.train.len(),
        p.splits.val.len(),
        p.splits.test.len()
    );
    println!(
        "B={} K={} T={} M={} W={} C={} F={} pruning={}",
        s.batch_size, s.window, s.iterations, s.candidates_per_parent, s.beam_width, s.max_children, s.max_balance, s.pruning
    );
    println!(
        "initial prompt: {} topics, {} notes",
        p.initial.tree.topic_count() - 1,
        p.initial.tree.note_count()
    );
    println!("output: {}", p.config.output.dir.display());
}

fn finish(session: &Session, outcome: RunOutcome, json: bool) -> Result<()> {
    match outcome {
        RunOutcome::Stopped { step } => {
            println!(
                "stopped after step {step}; resume with --checkpoint {}",
                session.paths.checkpoint().display()
            );
        }
        RunOutcome::Finished(_) => {
            let report = build_report(&session.paths.dir)?;
            if json {
                print!("{}", report.to_json()?);
            } else {
                print!("{}", report.to_text());
                println!("prompt: {}", session.paths.final_prompt().display());
            }
        }
    }
    Ok(())
}

fn inspect(path: &Path, max_children: usize, max_balance: f64, json: bool) -> Result<()> {
    let limits = PruningLimits::new(max_children, max_balance)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc = parse_prompt(&text);
    let report = detect_violations(&doc.tree, &limits)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    print!("{}", outline(&doc.tree, &report));
    if report.is_empty() {
        println!("no violations");
    } else {
        for v in &report.local_violations {
            println!("LOCAL  {}: outdeg {} > C={}", v.path, v.outdeg, v.limit);
        }
        for v in &report.global_violations {
            println!(
                "GLOBAL {}: beta {:.3} (outdeg {} / bf {:.3}) > F={}",
                v.path, v.beta, v.outdeg, v.branching_factor, v.limit
            );
        }
    }
    Ok(())
}

fn outline(tree: &kppo::knowledge::KnowledgeTree, report: &ViolationReport) -> String {
    let mut out = String::new();
    for (id, stats) in all_topic_stats(tree) {
        let node = tree.node(id).expect("stats refer to tree nodes");
        let mut flags = String::new();
        if report.local_violations.iter().any(|v| v.node == id) {
            flags.push_str(" [local]");
        }
        if report.global_violations.iter().any(|v| v.node == id) {
            flags.push_str(" [global]");
        }
        out.push_str(&format!(
            "{}{}  outdeg={} bf={:.3} beta={:.3}{}\n",
            "  ".repeat(node.depth),
            node.text,
            stats.outdeg,
            ratio_to_f64(stats.branching_factor()),
            ratio_to_f64(stats.balance()),
            flags
        ));
    }
    out
}
