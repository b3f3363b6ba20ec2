//! Runs a reconnaissance sweep on a world file and draws what the agent mapped.
//!
//! cargo run --example recon_mission -- [worlds/maze.txt]

use bcilink::agent::{AgentConfig, AgentState, EventKind, Mode, World};
use bcilink::codec::{Command, CommandId};

fn main() -> bcilink::Result<()> {
    let world = match std::env::args().nth(1) {
        Some(path) => World::load(path)?,
        None => World::parse(bcilink::config::DEFAULT_WORLD)?,
    };
    let mut agent = AgentState::new(&world, AgentConfig::default())?;
    let recon = Command {
        id: CommandId::ReconArea,
        issued_at: 0,
    };

    let mut tick = 0;
    let mut pending = Some(&recon);
    while tick < 5000 {
        for e in agent.step(&world, pending.take(), tick) {
            match e.kind {
                EventKind::Moved { .. } | EventKind::Mapped { .. } => {}
                _ => println!("{}", e.to_kv()),
            }
        }
        tick += 1;
        if agent.mode() == Mode::Idle {
            break;
        }
    }

    println!("\n{}", agent.known_map().to_ascii());
    println!(
        "{} ticks, battery {:.1} %, {} of {} targets sighted",
        tick,
        agent.battery_pct(),
        agent.sightings().len(),
        world.targets.len()
    );
    Ok(())
}
