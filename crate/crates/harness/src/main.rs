use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context as _};
use clap::{Parser, Subcommand, ValueEnum};
use oobheap::{PolicyAction, ViolationPolicy};
use oobheap_harness::gen::{generate, GenConfig};
use oobheap_harness::replay::{replay, ReplayConfig};
use oobheap_harness::report::StatsReport;
use oobheap_harness::security::{find_detection, run_detection, security_suite};
use oobheap_harness::stress::{stress, StressConfig, StressKind};
use oobheap_harness::trace::{parse_trace, render_trace};

#[derive(Parser)]
#[command(name = "oobheap", version, about = "Replay, stress and security checks for the oobheap allocator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Ignore,
    Report,
    Abort,
}

impl Policy {
    fn action(self) -> PolicyAction {
        match self {
            Policy::Ignore => PolicyAction::Ignore,
            Policy::Report => PolicyAction::Report,
            Policy::Abort => PolicyAction::ReportAndAbort,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Churn,
    Larson,
    Mstress,
}

#[derive(Subcommand)]
enum Cmd {
    /// Replay a trace file against the allocator and a shadow oracle.
    Replay {
        file: PathBuf,
        #[arg(long, value_enum, default_value = "report")]
        policy: Policy,
        #[arg(long)]
        stats_out: Option<PathBuf>,
    },
    /// Run a randomized stress workload.
    Stress {
        #[arg(long, value_enum, default_value = "churn")]
        kind: Kind,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = 1_000_000)]
        iters: u64,
        #[arg(long, default_value_t = 1)]
        min: usize,
        #[arg(long, default_value_t = 4096)]
        max: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Blocks held per thread (churn, larson).
        #[arg(long, default_value_t = 1024)]
        slots: usize,
        /// Thread generations (larson).
        #[arg(long, default_value_t = 10)]
        generations: usize,
        #[arg(long)]
        stats_out: Option<PathBuf>,
    },
    /// Run the security scenario matrix.
    Security {
        #[arg(long, value_enum, default_value = "report")]
        policy: Policy,
    },
    /// Write a seeded random trace to stdout.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100_000)]
        events: usize,
        #[arg(long, default_value_t = 1)]
        threads: u32,
        #[arg(long, default_value_t = 1)]
        min: usize,
        #[arg(long, default_value_t = 256 << 10)]
        max: usize,
        #[arg(long, default_value_t = 0.0)]
        fault_rate: f64,
    },
    /// Run one detection scenario in this process.
    #[command(hide = true)]
    SecurityScenario { name: String },
}

fn emit(report: &StatsReport, stats_out: Option<&PathBuf>) -> anyhow::Result<()> {
    print!("{}", report.to_kv());
    if let Some(path) = stats_out {
        report
            .write_json(path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Cmd::Replay { file, policy, stats_out } => {
            let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let events = parse_trace(&text).with_context(|| file.display().to_string())?;
            let config = ReplayConfig {
                policy: ViolationPolicy::uniform(policy.action()),
                diagnostics: true,
            };
            match replay(&events, &config) {
                Ok(report) => emit(&report, stats_out.as_ref()),
                Err(e) => {
                    if let Some(i) = e.event_index() {
                        eprintln!("failing prefix ({} events):", i + 1);
                        eprint!("{}", render_trace(&events[..=i]));
                    }
                    bail!(e)
                }
            }
        }
        Cmd::Stress {
            kind,
            threads,
            iters,
            min,
            max,
            seed,
            slots,
            generations,
            stats_out,
        } => {
            let cfg = StressConfig {
                kind: match kind {
                    Kind::Churn => StressKind::Churn,
                    Kind::Larson => StressKind::Larson,
                    Kind::Mstress => StressKind::Mstress,
                },
                threads,
                iters,
                min_size: min,
                max_size: max,
                seed,
                slots,
                generations,
            };
            let report = stress(&cfg)?;
            emit(&report, stats_out.as_ref())
        }
        Cmd::Security { policy } => {
            let exe = std::env::current_exe().context("locating this executable")?;
            let report = security_suite(policy.action(), Some(&exe));
            println!("{report}");
            if !report.all_passed() {
                bail!("{} scenarios failed", report.failures().count());
            }
            Ok(())
        }
        Cmd::Gen {
            seed,
            events,
            threads,
            min,
            max,
            fault_rate,
        } => {
            let cfg = GenConfig {
                seed,
                events,
                threads: threads.max(1),
                min_size: min,
                max_size: max,
                fault_rate,
                ..GenConfig::default()
            };
            print!("{}", render_trace(&generate(&cfg)));
            Ok(())
        }
        Cmd::SecurityScenario { name } => {
            let d = find_detection(&name).with_context(|| format!("no scenario named {name}"))?;
            let policy = ViolationPolicy::from_env().on_double_free;
            // Returning at all under the abort policy is a failure.
            run_detection(&d, policy, true).map_err(anyhow::Error::msg)?;
            bail!("scenario completed without aborting")
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let start = Instant::now();
    let result = run(cli);
    eprintln!("wall_time_ms={}", start.elapsed().as_millis());
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
