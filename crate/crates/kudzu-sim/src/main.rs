//! Command-line harness: run scenarios, sweep seeds, re-audit saved traces.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use kudzu_sim::audit::audit;
use kudzu_sim::scenario::Scenario;
use kudzu_sim::sim::run_scenario;
use kudzu_sim::trace::RunTrace;

#[derive(Parser)]
#[command(name = "kudzu-sim", about = "Kudzu atomic broadcast simulator and audit harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and audit it.
    Run {
        /// Scenario TOML file.
        #[arg(long)]
        config: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write report, metrics, and trace files here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Also write the full replayable trace (can be large).
        #[arg(long)]
        trace: bool,
    },
    /// Run one scenario across a seed range and merge the verdicts.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// First seed (inclusive).
        #[arg(long, default_value_t = 0)]
        from: u64,
        /// Number of seeds.
        #[arg(long)]
        count: u64,
        /// Worker threads.
        #[arg(long, default_value_t = 4)]
        jobs: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Replay a saved trace from its embedded scenario, verify the replay is
    /// byte-identical, and re-audit it.
    Audit {
        /// Trace file written by `run --trace`.
        #[arg(long)]
        trace: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(pass) => {
            if pass {
                0
            } else {
                1
            }
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            2
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out_dir,
            trace,
        } => run_one(&config, seed, out_dir.as_deref(), trace),
        Command::Sweep {
            config,
            from,
            count,
            jobs,
            out_dir,
        } => sweep(&config, from, count, jobs, out_dir.as_deref()),
        Command::Audit { trace } => reaudit(&trace),
    }
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading scenario {}", path.display()))?;
    let mut scenario = Scenario::from_toml(&text)?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    for warning in scenario.validate()? {
        eprintln!("warning: {warning}");
    }
    Ok(scenario)
}

fn run_one(config: &Path, seed: Option<u64>, out_dir: Option<&Path>, trace: bool) -> Result<bool> {
    let scenario = load_scenario(config, seed)?;
    let run = run_scenario(scenario)?;
    let report = audit(&run);
    print!("{}", report.render());

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.txt"), report.render())?;
        let mut metrics = String::new();
        for row in &report.latency {
            metrics.push_str(&serde_json::to_string(row)?);
            metrics.push('\n');
        }
        fs::write(dir.join("metrics.jsonl"), metrics)?;
        // Finalized logs, one record per line: replica, slot, block hash,
        // payload length, finalization kind, simulated time.
        let mut finalized = String::new();
        for (id, snapshot) in &run.replicas {
            for record in &snapshot.finalized {
                finalized.push_str(&format!(
                    "{}\n",
                    serde_json::json!({
                        "replica": id,
                        "slot": record.slot,
                        "block": record.block,
                        "payload_len": record.payload_len,
                        "kind": record.kind,
                        "at": record.at,
                    })
                ));
            }
        }
        fs::write(dir.join("finalized.jsonl"), finalized)?;
        if trace {
            fs::write(dir.join("trace.jsonl"), run.to_jsonl())?;
        }
    }
    Ok(report.pass())
}

fn sweep(
    config: &Path,
    from: u64,
    count: u64,
    jobs: usize,
    out_dir: Option<&Path>,
) -> Result<bool> {
    if count == 0 {
        bail!("sweep needs at least one seed");
    }
    let base = load_scenario(config, None)?;
    let seeds: Vec<u64> = (from..from + count).collect();
    let failures = Mutex::new(Vec::<String>::new());
    let done = Mutex::new(0u64);

    std::thread::scope(|scope| {
        for chunk in seeds.chunks(seeds.len().div_ceil(jobs.max(1))) {
            let base = base.clone();
            let failures = &failures;
            let done = &done;
            scope.spawn(move || {
                for &seed in chunk {
                    let mut scenario = base.clone();
                    scenario.seed = seed;
                    let outcome = run_scenario(scenario).map(|run| audit(&run));
                    match outcome {
                        Ok(report) if report.pass() => {}
                        Ok(report) => failures
                            .lock()
                            .unwrap()
                            .push(format!("seed {seed}:\n{}", report.render())),
                        Err(err) => failures
                            .lock()
                            .unwrap()
                            .push(format!("seed {seed}: run error: {err:#}")),
                    }
                    *done.lock().unwrap() += 1;
                }
            });
        }
    });

    let failures = failures.into_inner().unwrap();
    println!(
        "sweep {}: {} seeds, {} failures",
        base.name,
        count,
        failures.len()
    );
    for failure in failures.iter().take(5) {
        println!("{failure}");
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("sweep.txt"),
            format!(
                "scenario {}\nseeds {}..{}\nfailures {}\n\n{}",
                base.name,
                from,
                from + count,
                failures.len(),
                failures.join("\n")
            ),
        )?;
    }
    Ok(failures.is_empty())
}

fn reaudit(path: &Path) -> Result<bool> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading trace {}", path.display()))?;
    let saved = RunTrace::from_jsonl(&text)?;
    let replay = run_scenario(saved.scenario.clone())?;
    if replay.to_jsonl() != saved.to_jsonl() {
        println!("replay: MISMATCH (trace is not reproducible from its scenario)");
        return Ok(false);
    }
    println!("replay: byte-identical");
    let report = audit(&saved);
    print!("{}", report.render());
    Ok(report.pass())
}
