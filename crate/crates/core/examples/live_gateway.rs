//! Starts the gateway on an ephemeral port and talks to it as a console would.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;

use bcilink::config::SessionConfig;
use bcilink::gateway;
use serde_json::{json, Value};

fn main() -> bcilink::Result<()> {
    let handle = gateway::serve(&SessionConfig::default(), "127.0.0.1:0")?;
    println!("gateway on {}", handle.local_addr());

    let stream = TcpStream::connect(handle.local_addr())?;
    let mut tx = stream.try_clone()?;
    let mut rx = BufReader::new(stream).lines();
    let mut next = || -> Value { serde_json::from_str(&rx.next().unwrap().unwrap()).unwrap() };

    let hello = next();
    println!("hello: {} targets, commands {}", hello["config"]["n_targets"], hello["config"]["commands"]);

    for (seq, k) in [3, 5, 0, 42].into_iter().enumerate() {
        writeln!(tx, "{}", json!({"type": "attend", "seq": seq, "target_index": k}))?;
    }
    let mut answered = 0;
    while answered < 4 {
        let m = next();
        match m["type"].as_str().unwrap_or("") {
            "trial_result" => println!("#{} result: predicted {} -> {}", m["seq"], m["predicted_index"], m["command"]),
            "feedback" => {
                println!("#{} feedback: {}", m["seq"], m["color"]);
                answered += 1;
            }
            "agent_event" => println!("#{}   {}", m["seq"], m["kv"].as_str().unwrap_or("")),
            "error" => {
                println!("#{} error {}: {}", m["seq"], m["code"], m["message"]);
                answered += 1;
            }
            _ => {}
        }
    }
    drop(tx);

    println!("\ntranscript holds {} trial lines", handle.transcript().lines().skip(1).count());
    handle.shutdown();
    Ok(())
}
