//! Live session over TCP with newline-delimited JSON messages.
//!
//! One console at a time. Each connection gets a reader thread (parses and
//! sequences client lines), a writer thread (stamps server `seq` and writes)
//! and the accept thread itself drives the session; they talk over mpsc
//! queues. The session outlives connections, so a reconnecting console
//! resynchronizes from the `hello` snapshot.

use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Instant;

use serde::Deserialize;
use serde_json::{json, Map, Value};

use crate::config::SessionConfig;
use crate::error::{Error, Result};
use crate::session::{trial_line, Session, SessionReport, TranscriptHeader, TrialRecord};

pub const PROTOCOL: &str = "bcilink-gateway/1";

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum ClientMsg {
    Hello { seq: u64 },
    Attend { seq: u64, target_index: i64 },
    Configure { seq: u64, patch: Value },
    Metrics { seq: u64 },
}

impl ClientMsg {
    fn seq(&self) -> u64 {
        match *self {
            ClientMsg::Hello { seq }
            | ClientMsg::Attend { seq, .. }
            | ClientMsg::Configure { seq, .. }
            | ClientMsg::Metrics { seq } => seq,
        }
    }
}

struct Incoming {
    msg: ClientMsg,
    received: Instant,
}

#[derive(Default)]
struct Log {
    header: Option<TranscriptHeader>,
    trials: Vec<TrialRecord>,
}

/// Running gateway. Dropping it without [`GatewayHandle::shutdown`] leaves
/// the service running until the process exits.
pub struct GatewayHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    active: Arc<Mutex<Option<TcpStream>>>,
    log: Arc<Mutex<Log>>,
    thread: Option<JoinHandle<()>>,
}

impl GatewayHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Transcript of the current session: the same bytes `run_session`
    /// would produce for the attended indices received so far.
    pub fn transcript(&self) -> String {
        let log = self.log.lock().expect("log lock");
        let mut out = String::new();
        if let Some(h) = &log.header {
            out.push_str(&h.to_line());
            out.push('\n');
        }
        for t in &log.trials {
            out.push_str(&trial_line(t));
            out.push('\n');
        }
        out
    }

    pub fn trials(&self) -> Vec<TrialRecord> {
        self.log.lock().expect("log lock").trials.clone()
    }

    /// Closes any open connection and stops accepting.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(s) = self.active.lock().expect("active lock").take() {
            let _ = s.shutdown(Shutdown::Both);
        }
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Blocks until the service stops.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `bind` (e.g. `127.0.0.1:0`) and serves `config` in the background.
pub fn serve(config: &SessionConfig, bind: &str) -> Result<GatewayHandle> {
    let session = Session::new(config)?;
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let active = Arc::new(Mutex::new(None));
    let log = Arc::new(Mutex::new(Log {
        header: Some(session.header()),
        trials: Vec::new(),
    }));
    let thread = {
        let (stop, active, log) = (stop.clone(), active.clone(), log.clone());
        thread::spawn(move || accept_loop(listener, session, stop, active, log))
    };
    Ok(GatewayHandle {
        addr,
        stop,
        active,
        log,
        thread: Some(thread),
    })
}

fn accept_loop(
    listener: TcpListener,
    mut session: Session,
    stop: Arc<AtomicBool>,
    active: Arc<Mutex<Option<TcpStream>>>,
    log: Arc<Mutex<Log>>,
) {
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        if let Ok(clone) = stream.try_clone() {
            *active.lock().expect("active lock") = Some(clone);
        }
        let _ = serve_connection(stream, &mut session, &log);
        active.lock().expect("active lock").take();
    }
}

fn serve_connection(stream: TcpStream, session: &mut Session, log: &Mutex<Log>) -> std::io::Result<()> {
    let _ = stream.set_nodelay(true);
    let (out_tx, out_rx) = mpsc::channel::<Value>();
    let (in_tx, in_rx) = mpsc::channel::<Incoming>();
    let pending = Arc::new(AtomicUsize::new(0));

    let writer = {
        let s = stream.try_clone()?;
        thread::spawn(move || writer_loop(s, out_rx))
    };
    let reader = {
        let s = stream.try_clone()?;
        let (out_tx, pending) = (out_tx.clone(), pending.clone());
        thread::spawn(move || reader_loop(s, in_tx, out_tx, pending))
    };

    let _ = out_tx.send(hello(session, None));
    for incoming in in_rx {
        drive(incoming, session, log, &out_tx, &pending);
    }
    drop(out_tx);
    let _ = reader.join();
    let _ = writer.join();
    Ok(())
}

fn writer_loop(stream: TcpStream, rx: Receiver<Value>) {
    let mut out = std::io::BufWriter::new(stream);
    for (seq, mut msg) in rx.into_iter().enumerate() {
        if let Value::Object(m) = &mut msg {
            m.insert("seq".into(), json!(seq));
        }
        let line = msg.to_string();
        if writeln!(out, "{line}").and_then(|_| out.flush()).is_err() {
            break;
        }
    }
}

fn reader_loop(stream: TcpStream, in_tx: Sender<Incoming>, out_tx: Sender<Value>, pending: Arc<AtomicUsize>) {
    let mut last_seq: Option<u64> = None;
    for line in BufReader::new(stream).lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let received = Instant::now();
        let msg: ClientMsg = match serde_json::from_str(&line) {
            Ok(m) => m,
            Err(e) => {
                let _ = out_tx.send(error_msg(None, "malformed", &e.to_string()));
                continue;
            }
        };
        let seq = msg.seq();
        if last_seq.is_some_and(|last| seq <= last) {
            let _ = out_tx.send(error_msg(
                Some(seq),
                "seq_order",
                &format!("seq {seq} does not increase on {}", last_seq.unwrap_or_default()),
            ));
            continue;
        }
        last_seq = Some(seq);
        match &msg {
            ClientMsg::Configure { .. } => {
                let n = pending.load(Ordering::SeqCst);
                if n > 0 {
                    let _ = out_tx.send(error_msg(
                        Some(seq),
                        "busy",
                        &format!("configure rejected: {n} attend(s) pending; configure applies between trials"),
                    ));
                    continue;
                }
            }
            ClientMsg::Attend { .. } => {
                pending.fetch_add(1, Ordering::SeqCst);
            }
            _ => {}
        }
        if in_tx.send(Incoming { msg, received }).is_err() {
            break;
        }
    }
}

fn drive(incoming: Incoming, session: &mut Session, log: &Mutex<Log>, out: &Sender<Value>, pending: &AtomicUsize) {
    let Incoming { msg, received } = incoming;
    match msg {
        ClientMsg::Hello { seq } => {
            let _ = out.send(hello(session, Some(seq)));
        }
        ClientMsg::Metrics { seq } => {
            let _ = out.send(metrics(session, log, Some(seq)));
        }
        ClientMsg::Configure { seq, patch } => match reconfigure(session, &patch) {
            Ok(next) => {
                *session = next;
                let mut l = log.lock().expect("log lock");
                l.header = Some(session.header());
                l.trials.clear();
                drop(l);
                let _ = out.send(hello(session, Some(seq)));
            }
            Err(e) => {
                let _ = out.send(error_msg(Some(seq), "config", &e.to_string()));
            }
        },
        ClientMsg::Attend { seq, target_index } => {
            attend(session, log, out, seq, target_index, received);
            pending.fetch_sub(1, Ordering::SeqCst);
        }
    }
}

fn attend(session: &mut Session, log: &Mutex<Log>, out: &Sender<Value>, seq: u64, target: i64, received: Instant) {
    let n = session.config().n_targets();
    if target < 0 || target as usize >= n {
        let _ = out.send(error_msg(
            Some(seq),
            "out_of_range",
            &format!("target_index {target} outside valid range 0..={}", n - 1),
        ));
        return;
    }
    let t = match session.run_trial(target as usize) {
        Ok(t) => t,
        Err(e) => {
            let _ = out.send(error_msg(Some(seq), "runtime", &e.to_string()));
            return;
        }
    };
    let d = t.decision.as_ref();
    let _ = out.send(json!({
        "type": "trial_result",
        "in_reply_to": seq,
        "trial_index": t.trial_index,
        "attended_index": t.attended_index,
        "predicted_index": d.map(|d| d.predicted_index),
        "recognized": d.is_some_and(|d| d.recognized),
        "scores": d.map(|d| d.scores.clone()),
        "margin": d.map(|d| d.margin),
        "gated": t.gated,
        "command": t.command.map(|c| c.id.as_str()),
        "delivery": t.delivery,
    }));
    let _ = out.send(json!({
        "type": "feedback",
        "in_reply_to": seq,
        "trial_index": t.trial_index,
        "status": t.status,
        "color": t.color,
        "blink_hz": t.feedback.blink_hz,
        "duration_s": t.feedback.duration_s,
        "wall_latency_ms": received.elapsed().as_secs_f64() * 1000.0,
    }));
    for e in &t.events {
        let _ = out.send(json!({
            "type": "agent_event",
            "trial_index": t.trial_index,
            "event": e,
            "kv": e.to_kv(),
        }));
    }
    log.lock().expect("log lock").trials.push(t);
    let _ = out.send(metrics(session, log, None));
}

/// Applies a JSON merge patch to the current config and rebuilds the session.
fn reconfigure(session: &Session, patch: &Value) -> Result<Session> {
    if !patch.is_object() {
        return Err(Error::config("patch", "must be a JSON object"));
    }
    let mut current = serde_json::to_value(session.config()).expect("config serializes");
    merge_patch(&mut current, patch);
    let cfg: SessionConfig = serde_path_to_error::deserialize(current).map_err(|e| {
        let field = e.path().to_string();
        Error::config(field, e.into_inner().to_string())
    })?;
    if cfg.world == session.config().world {
        Session::with_world_text(&cfg, session.world_text())
    } else {
        Session::new(&cfg)
    }
}

fn merge_patch(target: &mut Value, patch: &Value) {
    match (target, patch) {
        (Value::Object(t), Value::Object(p)) => {
            for (k, v) in p {
                if v.is_null() {
                    t.remove(k);
                } else {
                    merge_patch(t.entry(k.clone()).or_insert(Value::Null), v);
                }
            }
        }
        (t, p) => *t = p.clone(),
    }
}

fn hello(session: &Session, in_reply_to: Option<u64>) -> Value {
    let cfg = session.config();
    let agent = session.agent();
    let known: Vec<String> = agent.known_map().to_ascii().lines().map(str::to_string).collect();
    let mut m = Map::new();
    m.insert("type".into(), json!("hello"));
    if let Some(s) = in_reply_to {
        m.insert("in_reply_to".into(), json!(s));
    }
    m.insert("protocol".into(), json!(PROTOCOL));
    m.insert(
        "config".into(),
        json!({
            "n_targets": cfg.n_targets(),
            "frequencies_hz": cfg.stimulus.frequencies_hz(),
            "phases_rad": cfg.stimulus.phases_rad(),
            "commands": cfg.command_table.entries().iter().map(|c| c.as_str()).collect::<Vec<_>>(),
            "epoch_s": cfg.epoch_s,
            "fs_hz": cfg.fs_hz,
            "snr_db": cfg.noise.snr_db,
            "decision_margin": cfg.decoder.decision_margin,
            "seed": cfg.seed,
        }),
    );
    m.insert(
        "snapshot".into(),
        json!({
            "trials_run": session.trials_run(),
            "clock_ms": session.clock_ms(),
            "width": agent.known_map().width(),
            "height": agent.known_map().height(),
            "known_map": known,
            "agent": crate::session::AgentSnapshot::of(agent),
            "base": agent.base(),
            "sightings": agent.sightings(),
            "marked": agent.marked().collect::<Vec<_>>(),
        }),
    );
    Value::Object(m)
}

fn metrics(session: &Session, log: &Mutex<Log>, in_reply_to: Option<u64>) -> Value {
    let l = log.lock().expect("log lock");
    let mut m = Map::new();
    m.insert("type".into(), json!("metrics"));
    if let Some(s) = in_reply_to {
        m.insert("in_reply_to".into(), json!(s));
    }
    m.insert("trials".into(), json!(l.trials.len()));
    if let Ok(r) = SessionReport::from_trials(session.config(), session.world_text(), l.trials.clone()) {
        m.insert("accuracy".into(), json!(r.accuracy));
        m.insert("decode_accuracy".into(), json!(r.decode_accuracy));
        m.insert("itr_bits_per_min".into(), json!(r.itr_bits_per_min));
        m.insert("colors".into(), json!(r.colors));
    }
    Value::Object(m)
}

fn error_msg(in_reply_to: Option<u64>, code: &str, message: &str) -> Value {
    json!({
        "type": "error",
        "in_reply_to": in_reply_to,
        "code": code,
        "message": message,
    })
}
