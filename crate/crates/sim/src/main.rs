use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use namedstream_core::{parse_stream_url, Mode};
use namedstream_sim::{build_broadcast_tree, build_call, build_conference, run_scenario, Scenario};

#[derive(Parser)]
#[command(name = "sim", about = "Named-stream scenario simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunOpts {
    /// Connector spec, e.g. `mem`, `broker`, `sfu`, `storage` or
    /// `broker:ws://127.0.0.1:9000` for a live broker.
    #[arg(long)]
    connector: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the JSON report here (`-` for stdout).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Print the scenario script instead of running it.
    #[arg(long)]
    emit: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file.
    Run {
        file: PathBuf,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Two-party call.
    Call {
        #[arg(default_value = "a")]
        a: String,
        #[arg(default_value = "b")]
        b: String,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// N-party conference.
    Conf {
        n: usize,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Broadcast tree of republishing endpoints.
    Tree {
        depth: u32,
        fanout: u32,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Parse a `web+ezpub:` / `web+ezsub:` URL.
    ParseUrl { url: String },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (scenario, opts) = match cli.cmd {
        Cmd::ParseUrl { url } => return parse_url(&url),
        Cmd::Run { file, opts } => {
            let text = match std::fs::read_to_string(&file) {
                Ok(t) => t,
                Err(e) => return fail(format!("{}: {e}", file.display())),
            };
            match Scenario::parse(&text) {
                Ok(s) => (s, opts),
                Err(e) => return fail(format!("{}: {e}", file.display())),
            }
        }
        Cmd::Call { a, b, opts } => {
            let c = opts.connector.clone().unwrap_or_else(|| "mem".into());
            (build_call(&a, &b, &c), opts)
        }
        Cmd::Conf { n, opts } => {
            let c = opts.connector.clone().unwrap_or_else(|| "mem".into());
            match build_conference(n, &c) {
                Ok(s) => (s, opts),
                Err(e) => return fail(e.to_string()),
            }
        }
        Cmd::Tree { depth, fanout, opts } => {
            let c = opts.connector.clone().unwrap_or_else(|| "mem".into());
            match build_broadcast_tree(depth, fanout, &c) {
                Ok(s) => (s, opts),
                Err(e) => return fail(e.to_string()),
            }
        }
    };
    execute(scenario, opts)
}

fn execute(mut s: Scenario, opts: RunOpts) -> ExitCode {
    if let Some(c) = opts.connector {
        s.connector = c;
    }
    if let Some(seed) = opts.seed {
        s.seed = seed;
    }
    if opts.emit {
        print!("{s}");
        return ExitCode::SUCCESS;
    }
    let report = match run_scenario(&s) {
        Ok(r) => r,
        Err(e) => return fail(e.to_string()),
    };
    for a in &report.assertions {
        let mark = if a.pass { "pass" } else { "FAIL" };
        println!("{mark} @{} {} ({})", a.at, a.expect, a.detail);
    }
    for i in &report.inconsistencies {
        println!("FAIL inconsistent counts: {i}");
    }
    println!(
        "streams {}, links {} (mesh {}, star {})",
        report.streams.len(),
        report.total_links,
        report.mesh_links,
        report.star_links
    );
    match opts.report.as_deref() {
        Some(p) if p.as_os_str() == "-" => println!("{}", report.to_json()),
        Some(p) => {
            if let Err(e) = std::fs::write(p, report.to_json()) {
                return fail(format!("{}: {e}", p.display()));
            }
        }
        None => {}
    }
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn parse_url(url: &str) -> ExitCode {
    match parse_stream_url(url) {
        Ok(u) => {
            let mode = match u.mode {
                Mode::Publish => "publish",
                Mode::Subscribe => "subscribe",
            };
            let out = serde_json::json!({
                "mode": mode,
                "scheme": u.scheme(),
                "locator": u.locator(),
                "stream": u.stream().as_str(),
            });
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(format!("ParseError: {e}")),
    }
}

fn fail(msg: String) -> ExitCode {
    eprintln!("sim: {msg}");
    ExitCode::from(2)
}
