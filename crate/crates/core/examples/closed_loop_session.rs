//! Runs a full closed-loop session from a config file and prints the report.
//!
//! cargo run --release --example closed_loop_session -- [configs/lossy_link.toml]

use bcilink::config::SessionConfig;
use bcilink::session::run_session;

fn main() -> bcilink::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => SessionConfig::load(path)?,
        None => SessionConfig::default(),
    };
    let report = run_session(&cfg)?;
    print!("{}", report.to_table());

    let mut late = report.trials.iter().filter(|t| t.delivery.is_some_and(|d| d.outcome.attempts() > 1));
    if let Some(t) = late.next() {
        println!(
            "\ntrial {} needed {} attempts; latencies {:?}",
            t.trial_index,
            t.delivery.map_or(0, |d| d.outcome.attempts()),
            t.latencies
        );
    }
    Ok(())
}
