//! Encodes, corrupts and decodes link frames, then pushes commands over a lossy link.

use bcilink::codec::CommandId;
use bcilink::link::{decode_frame, encode_frame, LinkModel, MsgType, ReliableLink, RetryPolicy};

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02X}")).collect::<Vec<_>>().join(" ")
}

fn main() -> bcilink::Result<()> {
    for (seq, id) in CommandId::ALL.iter().enumerate() {
        let frame = encode_frame(MsgType::Command, seq as u16, id.as_str().as_bytes())?;
        println!("{:<13} {}", id.as_str(), hex(&frame));
    }

    let mut frame = encode_frame(MsgType::Command, 9, b"Halt")?;
    frame[9] ^= 0x04;
    println!("\none flipped bit: {}", decode_frame(&frame).unwrap_err());
    println!("cut short:       {}", decode_frame(&frame[..6]).unwrap_err());

    let lossy = LinkModel::with_drop(0.3);
    let policy = RetryPolicy {
        max_retries: 5,
        ack_timeout_ms: 100,
    };
    let mut link = ReliableLink::new(lossy.clone(), lossy, policy)?;
    let (mut acked, mut reached, mut attempts) = (0, 0, 0);
    let n = 1000;
    for i in 0..n {
        let x = link.send(MsgType::Command, b"MoveEast", i * 1000)?;
        acked += u32::from(x.outcome.is_acked());
        reached += u32::from(x.delivered.is_some());
        attempts += x.outcome.attempts();
    }
    println!(
        "\n30 % loss each way, 5 retries: {acked}/{n} acked, {reached}/{n} reached the agent, {:.2} attempts per send",
        attempts as f64 / n as f64
    );
    Ok(())
}
