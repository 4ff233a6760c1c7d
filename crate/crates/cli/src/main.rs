use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use formation_core::runtime::{
    load_scenario, replay, run, serve, CommandScript, CsvSink, NullSink, RunSummary, Scenario, ServeConfig,
};

#[derive(Parser)]
#[command(name = "formation-sim", version, about = "Gesture-steerable multi-UAV formation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario to completion.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for metrics.csv, events.jsonl, commands.json and summary.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the scenario duration, seconds.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Serve a live session over WebSocket.
    Serve {
        scenario: PathBuf,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        /// Real-time factor; 0 runs as fast as possible.
        #[arg(long, default_value_t = 1.0)]
        rtf: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the applied command script here when the session ends.
        #[arg(long)]
        record: Option<PathBuf>,
        /// Exit once the scenario ends.
        #[arg(long)]
        exit_when_finished: bool,
        /// Hold the clock until a controller connects.
        #[arg(long)]
        wait_for_controller: bool,
        /// Serve a recorded command script instead of the scenario's requests.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
    /// Re-run a recorded command script against a scenario.
    Replay {
        scenario: PathBuf,
        commands: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path, seed: Option<u64>, duration: Option<f64>) -> Result<Scenario> {
    let mut s = load_scenario(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    if let Some(d) = duration {
        if !(d > 0.0) {
            bail!("--duration must be positive");
        }
        s.duration = d;
        s.requests.retain(|r| r.t <= d);
    }
    Ok(s)
}

fn read_script(path: &Path) -> Result<CommandScript> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).context("parsing command script")
}

fn sink(out: &Path) -> Result<CsvSink<BufWriter<File>, BufWriter<File>>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(CsvSink::new(
        BufWriter::new(File::create(out.join("metrics.csv"))?),
        BufWriter::new(File::create(out.join("events.jsonl"))?),
    ))
}

fn finish(sink: CsvSink<BufWriter<File>, BufWriter<File>>, out: &Path, summary: &RunSummary) -> Result<()> {
    let (mut m, mut e) = sink.into_inner();
    m.flush()?;
    e.flush()?;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(summary)?)?;
    Ok(())
}

fn print_summary(s: &RunSummary) -> Result<()> {
    let mut o = io::stdout().lock();
    match writeln!(o, "{}", serde_json::to_string_pretty(s)?) {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            scenario,
            seed,
            out,
            duration,
        } => {
            let s = load(&scenario, seed, duration)?;
            let summary = match out {
                Some(dir) => {
                    let mut sk = sink(&dir)?;
                    let (summary, commands) = run(s, &mut sk)?;
                    finish(sk, &dir, &summary)?;
                    fs::write(dir.join("commands.json"), serde_json::to_string_pretty(&commands)?)?;
                    summary
                }
                None => run(s, &mut NullSink)?.0,
            };
            print_summary(&summary)
        }
        Command::Serve {
            scenario,
            port,
            rtf,
            seed,
            record,
            exit_when_finished,
            wait_for_controller,
            replay,
        } => {
            let s = load(&scenario, seed, None)?;
            let replay = replay.as_deref().map(read_script).transpose()?;
            let handle = serve(
                s,
                ServeConfig {
                    addr: format!("127.0.0.1:{port}"),
                    rtf,
                    record,
                    exit_when_finished,
                    wait_for_controller,
                    replay,
                    ..ServeConfig::default()
                },
            )?;
            eprintln!("serving on ws://{}", handle.local_addr());
            let (summary, _) = handle.join()?;
            print_summary(&summary)
        }
        Command::Replay {
            scenario,
            commands,
            seed,
            out,
        } => {
            let s = load(&scenario, seed, None)?;
            let script = read_script(&commands)?;
            let summary = match out {
                Some(dir) => {
                    let mut sk = sink(&dir)?;
                    let summary = replay(s, &script, &mut sk)?;
                    finish(sk, &dir, &summary)?;
                    summary
                }
                None => replay(s, &script, &mut NullSink)?,
            };
            print_summary(&summary)
        }
    }
}
