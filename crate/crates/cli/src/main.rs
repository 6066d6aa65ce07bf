use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hotcheck::campaign::{
    self, calibrate, run_campaign, CampaignConfig, CampaignReport, DEFAULT_TT,
};
use hotcheck::formats;
use hotcheck_core::scenario::lock_split_fixture;
use hotcheck_core::{GeneratorConfig, ProtocolConfig, ProtocolKind, Scenario};

#[derive(Parser)]
#[command(name = "hotcheck", about = "Liveness checking for HotStuff-family protocols")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

fn protocol_value(s: &str) -> Result<ProtocolKind, String> {
    formats::protocol_from_token(s).ok_or_else(|| {
        format!("unknown protocol '{s}' (expected hotstuff, two-phase-hotstuff or sync-hotstuff)")
    })
}

#[derive(Args)]
struct ProtocolArgs {
    /// One of: hotstuff, two-phase-hotstuff, sync-hotstuff.
    #[arg(long, value_parser = protocol_value)]
    protocol: ProtocolKind,
    /// Replica count; defaults to the smallest n tolerating f faults.
    #[arg(long)]
    n: Option<u8>,
    #[arg(long, default_value_t = 1)]
    f: u8,
}

impl ProtocolArgs {
    fn config(&self) -> Result<ProtocolConfig> {
        let n = self.n.unwrap_or(match self.protocol {
            ProtocolKind::SyncHotStuff => 2 * self.f + 1,
            _ => 3 * self.f + 1,
        });
        ProtocolConfig::new(n, self.f, self.protocol).map_err(|e| anyhow!("{e}"))
    }
}

#[derive(Args)]
struct GeneratorArgs {
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[arg(long, default_value_t = 10)]
    rounds: u32,
    #[arg(long, default_value_t = 1)]
    count: u32,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Skip message-delay injection; partitions and twins only.
    #[arg(long)]
    no_delays: bool,
}

impl GeneratorArgs {
    fn config(&self) -> Result<GeneratorConfig> {
        Ok(GeneratorConfig {
            protocol: self.protocol.config()?,
            rounds: self.rounds,
            count: self.count,
            seed: self.seed,
            with_delays: !self.no_delays,
        })
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate twin scenarios and write them as text files.
    Generate {
        #[command(flatten)]
        gen: GeneratorArgs,
        /// Output directory; single scenarios print to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a built-in scenario (currently only `lock-split`).
    Fixture {
        #[arg(default_value = "lock-split")]
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse scenario files and report whether they are well formed.
    Validate { files: Vec<PathBuf> },
    /// Run one scenario and print per-round snapshots and checker verdicts.
    Replay {
        file: PathBuf,
        /// Temperature threshold.
        #[arg(long, default_value_t = DEFAULT_TT)]
        tt: u32,
        /// Count f potential faulty votes toward quorums when deciding
        /// whether a state is hot.
        #[arg(long)]
        credit_faulty: bool,
        /// Also dump the full message/event trace.
        #[arg(long)]
        trace: bool,
        /// Write the state-transition graph in DOT form.
        #[arg(long)]
        graph_out: Option<PathBuf>,
    },
    /// Generate a scenario set, run every checker over it and report rates.
    Run {
        #[command(flatten)]
        gen: GeneratorArgs,
        /// Temperature thresholds to sweep (repeat or comma-separate).
        #[arg(long, value_delimiter = ',', default_values_t = [DEFAULT_TT])]
        tt: Vec<u32>,
        #[arg(long)]
        credit_faulty: bool,
        /// Write the report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write each flagged scenario into this directory.
        #[arg(long)]
        flagged_dir: Option<PathBuf>,
        /// Write the lasso pass's state graph in DOT form.
        #[arg(long)]
        graph_out: Option<PathBuf>,
    },
    /// Print the time bounds derived from a failure-free run.
    Calibrate {
        #[command(flatten)]
        protocol: ProtocolArgs,
        #[arg(long, default_value_t = 10)]
        rounds: u32,
    },
    /// Run scenario files and export their combined state graph as DOT.
    ExportGraph {
        files: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        credit_faulty: bool,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().cmd) {
        Ok(true) => ExitCode::from(1),
        Ok(false) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn read_scenario(path: &Path) -> Result<Scenario> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    formats::scenario_from_text(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_or_print(out: Option<&Path>, content: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, content).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

/// Returns whether the command found violations (exit code 1).
fn dispatch(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Generate { gen, out } => {
            let cfg = gen.config()?;
            let scenarios = hotcheck_core::scenario::generate(&cfg);
            match out {
                Some(dir) => {
                    fs::create_dir_all(&dir)
                        .with_context(|| format!("creating {}", dir.display()))?;
                    for (i, s) in scenarios.iter().enumerate() {
                        let path = dir.join(format!("scenario-{}-{:04}.txt", cfg.seed, i));
                        fs::write(&path, formats::scenario_to_text(s))
                            .with_context(|| format!("writing {}", path.display()))?;
                    }
                    eprintln!("wrote {} scenarios to {}", scenarios.len(), dir.display());
                }
                None => {
                    if scenarios.len() > 1 {
                        bail!("--out is required when generating more than one scenario");
                    }
                    print!("{}", formats::scenario_to_text(&scenarios[0]));
                }
            }
            Ok(false)
        }
        Cmd::Fixture { name, out } => {
            if name != "lock-split" {
                bail!("unknown fixture '{name}' (available: lock-split)");
            }
            write_or_print(out.as_deref(), &formats::scenario_to_text(&lock_split_fixture()))?;
            Ok(false)
        }
        Cmd::Validate { files } => {
            if files.is_empty() {
                bail!("no scenario files given");
            }
            let mut bad = 0;
            for f in &files {
                match read_scenario(f) {
                    Ok(_) => println!("{}: ok", f.display()),
                    Err(e) => {
                        println!("{}: {e:#}", f.display());
                        bad += 1;
                    }
                }
            }
            if bad > 0 {
                bail!("{bad} of {} files failed to validate", files.len());
            }
            Ok(false)
        }
        Cmd::Replay { file, tt, credit_faulty, trace, graph_out } => {
            let scenario = read_scenario(&file)?;
            let report = campaign::replay(scenario, tt, credit_faulty)?;
            print_replay(&report, tt, trace);
            if let Some(p) = graph_out {
                fs::write(&p, formats::graph_to_dot(&report.graph))
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            Ok(report.any_violation())
        }
        Cmd::Run { gen, tt, credit_faulty, csv, flagged_dir, graph_out } => {
            let cfg = CampaignConfig {
                generator: gen.config()?,
                tt_values: tt,
                credit_faulty,
                time_bounds: None,
            };
            let report = run_campaign(&cfg)?;
            print!("{}", formats::render_report(&report.rows));
            println!(
                "bounds: {}ms / {}ms / {}ms over {} scenarios, {} flagged, {} unsafe",
                report.bounds[0],
                report.bounds[1],
                report.bounds[2],
                report.total,
                report.flagged.len(),
                report.safety_count,
            );
            if let Some(p) = csv {
                fs::write(&p, formats::report_to_csv(&report.rows))
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            if let Some(dir) = flagged_dir {
                write_flagged(&dir, &report)?;
            }
            if let Some(p) = graph_out {
                fs::write(&p, formats::graph_to_dot(&report.graph))
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            Ok(!report.flagged.is_empty() || report.safety_count > 0)
        }
        Cmd::Calibrate { protocol, rounds } => {
            let bounds = calibrate(protocol.config()?, rounds)?;
            println!("t-small: {}", bounds[0]);
            println!("t-mid: {}", bounds[1]);
            println!("t-large: {}", bounds[2]);
            Ok(false)
        }
        Cmd::ExportGraph { files, out, credit_faulty } => {
            if files.is_empty() {
                bail!("no scenario files given");
            }
            let mut graph = hotcheck_core::StateTransitionGraph::new();
            for f in &files {
                let scenario = read_scenario(f)?;
                let config = scenario.config;
                let result = hotcheck_core::Execution::new(scenario)?.run_to_completion()?;
                let mut prev = &result.initial;
                for b in &result.boundaries {
                    graph.update(prev, &b.snapshot, &result.store, &config, credit_faulty)?;
                    prev = &b.snapshot;
                }
            }
            let lassos = graph.find_hot_lassos();
            write_or_print(out.as_deref(), &formats::graph_to_dot(&graph))?;
            eprintln!(
                "{} states ({} hot), {} edges, {} hot lassos",
                graph.state_count(),
                graph.hot_count(),
                graph.edge_count(),
                lassos.len(),
            );
            Ok(!lassos.is_empty())
        }
    }
}

fn print_replay(report: &campaign::ReplayReport, tt: u32, with_trace: bool) {
    let s = &report.result.scenario;
    let twin = s.twin.map_or_else(|| "none".to_string(), |t| t.to_string());
    println!(
        "protocol={} n={} f={} rounds={} twin={twin} seed={}",
        s.config.kind.name(),
        s.config.n,
        s.config.f,
        s.rounds,
        s.seed,
    );
    for (i, b) in report.result.boundaries.iter().enumerate() {
        let hot = if report.analysis.hot_bits[i] { "yes" } else { "no " };
        let locks: Vec<String> = b
            .snapshot
            .state_map()
            .iter()
            .map(|(idx, p)| format!("{idx}={}", p.locked.short_hex()))
            .collect();
        println!("round {:>3} t={:>6} hot={hot} locks: {}", b.round, b.time, locks.join(" "));
    }
    match report.temperature_round {
        Some(r) => println!("temperature(tt={tt}): fired at round {r}"),
        None => println!("temperature(tt={tt}): ok"),
    }
    match report.lasso_round {
        Some(r) => {
            println!("lasso: hot cycle closed at round {r} ({} in graph)", report.graph_lasso_count)
        }
        None => println!("lasso: ok ({} in graph)", report.graph_lasso_count),
    }
    for (bound, hit) in report.bounds.iter().zip(report.bound_hits.iter()) {
        match hit {
            Some(t) => println!("time-bound({bound}ms): no progress by t={t}"),
            None => println!("time-bound({bound}ms): ok"),
        }
    }
    match report.analysis.safety {
        Some((a, b)) => println!("agreement: VIOLATED between replicas {a} and {b}"),
        None => println!("agreement: ok"),
    }
    if report.temperature_round.is_some() || report.lasso_round.is_some() {
        if report.analysis.lock_conflict {
            println!("classification: genuine (correct replicas hold conflicting locks)");
        } else {
            println!("classification: false positive (no conflicting locks at the end)");
        }
    }
    if with_trace {
        print!("{}", formats::render_trace(&report.result));
    }
}

fn write_flagged(dir: &Path, report: &CampaignReport) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut index = String::from("method,threshold,seed,round,safety,false_positive\n");
    for (i, f) in report.flagged.iter().enumerate() {
        let name = format!("flagged-{:04}-{}-{}.txt", i, f.method, f.threshold);
        fs::write(dir.join(&name), formats::scenario_to_text(&f.scenario))
            .with_context(|| format!("writing {}", dir.join(&name).display()))?;
        index.push_str(&format!(
            "{},{},{},{},{},{}\n",
            f.method, f.threshold, f.scenario.seed, f.round, f.safety, f.false_positive
        ));
    }
    fs::write(dir.join("index.csv"), index)
        .with_context(|| format!("writing {}", dir.join("index.csv").display()))?;
    Ok(())
}
