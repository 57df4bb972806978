use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use semvar::bench::metrics::summarize;
use semvar::bench::report::{compare, format_comparison, format_report, summarize_trace, write_outputs};
use semvar::bench::{parse_policy, run_experiment, MetricsReport, WorkloadKind, WorkloadSpec};
use semvar::bench::checks::run_checks;
use semvar::config::Config;
use semvar::server::{serve, AppState, ServeOptions};

const EXIT_INVALID: u8 = 2;
const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "semvar", version, about = "Application-aware LLM request manager and benchmark harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one workload under one policy in virtual time.
    Run {
        #[arg(long)]
        workload: String,
        /// app-aware, request-centric or throughput-centric.
        #[arg(long, default_value = "app-aware")]
        mode: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// TOML file overriding workload parameters.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        engines: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two report.json files.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Summarize an engine trace log.
    Trace {
        #[arg(long)]
        log: PathBuf,
    },
    /// Serve the HTTP API with the virtual clock following the wall clock.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "app-aware")]
        mode: String,
        /// Overrides serve.addr from the config.
        #[arg(long)]
        addr: Option<String>,
    },
    /// Run the calibrated simulation scenarios and report pass/fail.
    Check,
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn default_engines(kind: WorkloadKind) -> u32 {
    match kind {
        WorkloadKind::Mixed => 4,
        _ => 1,
    }
}

fn load_report(p: &PathBuf) -> Result<MetricsReport, String> {
    let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Run { workload, mode, seed, config, spec, engines, out } => {
            let Some(kind) = WorkloadKind::parse(&workload) else {
                return fail(EXIT_INVALID, format!("unknown workload `{workload}`"));
            };
            let Some(policy) = parse_policy(&mode) else {
                return fail(EXIT_INVALID, format!("unknown mode `{mode}`"));
            };
            let mut ws = match spec {
                Some(p) => {
                    let text = match std::fs::read_to_string(&p) {
                        Ok(t) => t,
                        Err(e) => return fail(1, format!("{}: {e}", p.display())),
                    };
                    let text = format!("kind = \"{}\"\n{}", kind.name(), text);
                    match WorkloadSpec::from_toml(&text) {
                        Ok(s) => s,
                        Err(e) => return fail(EXIT_INVALID, e),
                    }
                }
                None => WorkloadSpec::preset(kind),
            };
            if let Some(s) = seed {
                ws.seed = s;
            }
            let cfg = match &config {
                Some(p) => match Config::load(p) {
                    Ok(c) => c,
                    Err(e) => return fail(EXIT_INVALID, e),
                },
                None => {
                    let mut c = Config::default();
                    c.cluster.engines = default_engines(kind);
                    c
                }
            };
            let mut cluster = cfg.cluster_config();
            if let Some(n) = engines {
                if n == 0 {
                    return fail(EXIT_INVALID, "--engines must be at least 1");
                }
                cluster.engines = n;
            }
            let run = match run_experiment(&ws, policy, &cluster) {
                Ok(r) => r,
                Err(e) => return fail(EXIT_INVALID, e),
            };
            let report = summarize(&ws, &run);
            print!("{}", format_report(&report));
            if let Some(dir) = out {
                if let Err(e) = write_outputs(&dir, &report, &run) {
                    return fail(1, format!("{}: {e}", dir.display()));
                }
            }
            ExitCode::SUCCESS
        }
        Cmd::Compare { a, b } => {
            let (ra, rb) = match (load_report(&a), load_report(&b)) {
                (Ok(x), Ok(y)) => (x, y),
                (Err(e), _) | (_, Err(e)) => return fail(1, e),
            };
            match compare(&ra, &rb) {
                Ok(rows) => {
                    print!("{}", format_comparison(&rows));
                    ExitCode::SUCCESS
                }
                Err(e) => fail(EXIT_INVALID, e),
            }
        }
        Cmd::Trace { log } => {
            let text = match std::fs::read_to_string(&log) {
                Ok(t) => t,
                Err(e) => return fail(1, format!("{}: {e}", log.display())),
            };
            match summarize_trace(&text) {
                Ok(rows) => {
                    println!("{:>6} {:>8} {:>12} {:>10} {:>10} {:>14}", "engine", "steps", "fill_tokens", "emitted", "max_batch", "last_step_ms");
                    for r in rows {
                        println!(
                            "{:>6} {:>8} {:>12} {:>10} {:>10} {:>14.3}",
                            r.engine, r.steps, r.fill_tokens, r.emitted, r.max_batch, r.last_step_ms
                        );
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(1, e),
            }
        }
        Cmd::Serve { config, mode, addr } => {
            let Some(policy) = parse_policy(&mode) else {
                return fail(EXIT_INVALID, format!("unknown mode `{mode}`"));
            };
            let cfg = match &config {
                Some(p) => match Config::load(p) {
                    Ok(c) => c,
                    Err(e) => return fail(EXIT_INVALID, e),
                },
                None => Config::default(),
            };
            let addr = addr.unwrap_or_else(|| cfg.serve.addr.clone());
            let opts = ServeOptions {
                time_scale: cfg.serve.time_scale,
                get_timeout: std::time::Duration::from_secs_f64(cfg.serve.get_timeout_s),
            };
            let state = AppState::new(cfg.cluster_config(), policy, opts);
            let rt = match tokio::runtime::Runtime::new() {
                Ok(rt) => rt,
                Err(e) => return fail(1, e),
            };
            let result = rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&addr).await?;
                eprintln!("listening on {}", listener.local_addr()?);
                serve(listener, state).await
            });
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(1, e),
            }
        }
        Cmd::Check => {
            let lines = run_checks();
            for l in &lines {
                println!("{l}");
            }
            if lines.iter().all(|l| l.pass) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_CHECK_FAILED)
            }
        }
    }
}
