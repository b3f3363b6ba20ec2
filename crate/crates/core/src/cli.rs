//! Command-line front end; the `bcilink` binary is a thin wrapper over [`main_with`].
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 runtime error.
//! Errors go to stderr as one line:
//! `error kind=config field=schedule.repeats message="must be at least 1"`.

use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use crate::config::SessionConfig;
use crate::error::Error;
use crate::gateway;
use crate::session::{replay, run_session, sweep_with, trial_seed, SweepAxis, SweepRow};
use crate::synth::generate_epoch;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "bcilink", version, about = "Simulated SSVEP command loop")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// TOML session config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config and BCILINK_OUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the configured schedule and write transcript and reports.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Run one independent session per value of an axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// snr_db, epoch_s or n_targets.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. -10,-5,0,10,20.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        values: Vec<f64>,
    },
    /// Write synthetic epochs as CSV files.
    ExportEpochs {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Start the gateway and drive it with a scripted console.
    Demo {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        /// Scripted attends; 0 runs the whole schedule.
        #[arg(long, default_value_t = 16)]
        trials: usize,
        /// Keep serving after the script until interrupted.
        #[arg(long)]
        hold: bool,
    },
    /// Re-run a transcript and report the first mismatching line.
    Replay { transcript: PathBuf },
}

struct Failure {
    code: i32,
    line: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { field, message } => Failure {
                code: EXIT_CONFIG,
                line: format!("error kind=config field={field} message={}", quote(&message)),
            },
            Error::Aliasing { .. } => Failure {
                code: EXIT_CONFIG,
                line: format!("error kind=config field=fs_hz message={}", quote(&e.to_string())),
            },
            other => Failure {
                code: EXIT_RUNTIME,
                line: format!("error kind=runtime message={}", quote(&other.to_string())),
            },
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn quote(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

fn usage(field: &str, message: impl Into<String>) -> Failure {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
    .into()
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("{}", f.line);
            f.code
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run { common } => cmd_run(&common),
        Command::Sweep { common, axis, values } => cmd_sweep(&common, &axis, &values),
        Command::ExportEpochs { common, count } => cmd_export(&common, count),
        Command::Demo {
            common,
            bind,
            trials,
            hold,
        } => cmd_demo(&common, &bind, trials, hold),
        Command::Replay { transcript } => cmd_replay(&transcript),
    }
}

fn load_config(common: &Common) -> Result<SessionConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => SessionConfig::load(p)?,
        None => SessionConfig::default(),
    };
    cfg.apply_env_overrides();
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

/// Writes via a temp file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn cmd_run(common: &Common) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let report = run_session(&cfg)?;
    write_atomic(&cfg.output.transcript(), report.transcript().as_bytes())?;
    write_atomic(&cfg.output.report_table(), report.to_table().as_bytes())?;
    write_atomic(&cfg.output.report_kv(), report.to_kv().as_bytes())?;
    println!(
        "ok trials={} accuracy={:.4} decode_accuracy={:.4} itr_bits_per_min={:.2} out={}",
        report.trials.len(),
        report.accuracy,
        report.decode_accuracy,
        report.itr_bits_per_min,
        cfg.output.dir.display()
    );
    Ok(())
}

fn cmd_sweep(common: &Common, axis: &str, values: &[f64]) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let axis: SweepAxis = axis.parse().map_err(|e: Error| usage("--axis", strip(e)))?;
    if values.is_empty() {
        return Err(usage("--values", "empty value list"));
    }
    let dir = cfg.output.dir.join(format!("sweep_{}", axis.name()));
    let rows = sweep_with(&cfg, axis, values, |i, row, report| {
        let stem = dir.join(format!("cell_{i:03}"));
        write_atomic(&stem.with_extension("kv"), format!("{}\n", row_kv(row)).as_bytes())?;
        write_atomic(&stem.with_extension("jsonl"), report.transcript().as_bytes())?;
        Ok(())
    })?;
    let mut table = String::from(SweepRow::TSV_HEADER);
    table.push('\n');
    for r in &rows {
        table.push_str(&r.to_tsv());
        table.push('\n');
    }
    write_atomic(&dir.join("sweep.tsv"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn row_kv(r: &SweepRow) -> String {
    format!(
        "axis={} value={} seed={} trials={} accuracy={:.6} decode_accuracy={:.6} itr_bits_per_min={:.4} mean_margin={:.6}",
        r.axis.name(),
        r.value,
        r.seed,
        r.trials,
        r.accuracy,
        r.decode_accuracy,
        r.itr_bits_per_min,
        r.mean_margin
    )
}

fn strip(e: Error) -> String {
    match e {
        Error::InvalidArgument(m) | Error::Config { message: m, .. } => m,
        other => other.to_string(),
    }
}

fn cmd_export(common: &Common, count: usize) -> Result<(), Failure> {
    if count == 0 {
        return Err(usage("--count", "must be at least 1"));
    }
    let cfg = load_config(common)?;
    cfg.validate()?;
    let montage = cfg.montage_model()?;
    let schedule = cfg.schedule();
    let dir = cfg.output.dir.join("epochs");
    for i in 0..count {
        let attended = schedule[i % schedule.len()];
        let epoch = generate_epoch(
            &cfg.stimulus,
            attended,
            &montage,
            &cfg.noise,
            cfg.epoch_s,
            cfg.fs_hz,
            trial_seed(cfg.seed, i as u64),
        )?;
        let mut buf = Vec::new();
        epoch.write_csv(&mut buf)?;
        write_atomic(&dir.join(format!("epoch_{i:04}.csv")), &buf)?;
    }
    println!("ok epochs={count} out={}", dir.display());
    Ok(())
}

fn cmd_replay(path: &Path) -> Result<(), Failure> {
    let file = fs::File::open(path).map_err(Error::Io)?;
    let outcome = replay(BufReader::new(file))?;
    match outcome.first_mismatch {
        None => {
            println!("ok trials={} identical=true", outcome.trials);
            Ok(())
        }
        Some(line) => Err(Failure {
            code: EXIT_RUNTIME,
            line: format!(
                "error kind=replay_mismatch line={line} message={}",
                quote(&format!("trial on line {line} did not reproduce"))
            ),
        }),
    }
}

fn cmd_demo(common: &Common, bind: &str, trials: usize, hold: bool) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let handle = gateway::serve(&cfg, bind)?;
    let addr = handle.local_addr();
    println!("gateway listening on {addr}");

    let mut schedule = cfg.schedule();
    if trials > 0 {
        schedule = schedule.into_iter().cycle().take(trials).collect();
    }
    let stream = TcpStream::connect(addr)?;
    let mut out = stream.try_clone()?;
    let mut lines = BufReader::new(stream).lines();
    for (seq, k) in schedule.iter().enumerate() {
        writeln!(out, "{}", json!({"type": "attend", "seq": seq, "target_index": k}))?;
    }
    let mut done = 0;
    let mut last_metrics = Value::Null;
    while done < schedule.len() {
        let Some(line) = lines.next() else { break };
        let msg: Value = serde_json::from_str(&line?).map_err(|e| Error::Parse(e.to_string()))?;
        match msg["type"].as_str() {
            Some("hello") => println!("hello protocol={} targets={}", msg["protocol"], msg["config"]["n_targets"]),
            Some("trial_result") => print!(
                "trial={} attended={} predicted={} command={}",
                msg["trial_index"], msg["attended_index"], msg["predicted_index"], msg["command"]
            ),
            Some("feedback") => {
                println!(" status={} color={}", msg["status"], msg["color"]);
            }
            Some("metrics") => {
                last_metrics = msg;
                done += 1;
            }
            Some("error") => {
                println!("gateway error {}", msg["message"]);
                done += 1;
            }
            _ => {}
        }
    }
    let _ = out.shutdown(std::net::Shutdown::Both);
    drop(lines);
    println!(
        "ok trials={} accuracy={} itr_bits_per_min={}",
        last_metrics["trials"], last_metrics["accuracy"], last_metrics["itr_bits_per_min"]
    );
    if hold {
        println!("serving on {addr}; interrupt to stop");
        handle.join();
    } else {
        handle.shutdown();
    }
    Ok(())
}
