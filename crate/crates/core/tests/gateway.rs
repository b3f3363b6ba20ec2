mod common;

use bcilink::config::SessionConfig;
use bcilink::gateway::{serve, PROTOCOL};
use bcilink::session::run_schedule;
use common::Console;
use serde_json::json;

fn config() -> SessionConfig {
    let mut cfg = SessionConfig::default();
    cfg.noise.snr_db = 0.0;
    cfg.link.drop_prob = 0.1;
    cfg.seed = 5;
    cfg
}

#[test]
fn fifty_attends_pair_up_in_order_and_match_batch_transcript() {
    let cfg = config();
    let gw = serve(&cfg, "127.0.0.1:0").unwrap();
    let mut c = Console::connect(gw.local_addr());
    let hello = c.recv();
    assert_eq!(hello["type"], "hello");
    assert_eq!(hello["protocol"], PROTOCOL);
    assert_eq!(hello["config"]["n_targets"], 8);

    let schedule: Vec<usize> = (0..50).map(|i| (i * 3 + i / 8) % 8).collect();
    let seqs: Vec<u64> = schedule
        .iter()
        .map(|k| c.send(json!({"type": "attend", "target_index": k})))
        .collect();

    let mut server_seq = 0;
    let mut pairs = Vec::new();
    let mut pending_result: Option<serde_json::Value> = None;
    while pairs.len() < 50 {
        let m = c.recv();
        server_seq += 1;
        assert_eq!(m["seq"], server_seq);
        match m["type"].as_str().unwrap() {
            "trial_result" => {
                assert!(pending_result.is_none(), "two results without feedback");
                pending_result = Some(m);
            }
            "feedback" => {
                let r = pending_result.take().expect("feedback before result");
                assert_eq!(r["in_reply_to"], m["in_reply_to"]);
                assert_eq!(r["trial_index"], m["trial_index"]);
                pairs.push((r, m));
            }
            "agent_event" | "metrics" => assert!(pending_result.is_none()),
            other => panic!("unexpected {other}"),
        }
    }
    for (i, (r, f)) in pairs.iter().enumerate() {
        assert_eq!(r["in_reply_to"], seqs[i]);
        assert_eq!(r["attended_index"], schedule[i]);
        let status = f["status"].as_str().unwrap();
        let color = f["color"].as_str().unwrap();
        let expect = match status {
            "NotRecognized" => "Red",
            "RecognizedNotExecuted" => "Yellow",
            "Executed" => "Green",
            s => panic!("status {s}"),
        };
        assert_eq!(color, expect);
        if r["recognized"] == false {
            assert!(r["command"].is_null());
        }
    }
    drop(c);

    let batch = run_schedule(&cfg, &schedule).unwrap();
    assert_eq!(gw.transcript(), batch.transcript());
    let lines: Vec<_> = gw.trials().iter().map(|t| t.color).collect();
    let colors: Vec<_> = pairs.iter().map(|(_, f)| f["color"].as_str().unwrap().to_string()).collect();
    assert_eq!(lines.iter().map(|c| format!("{c:?}")).collect::<Vec<_>>(), colors);
    gw.shutdown();
}

#[test]
fn errors_keep_the_connection_usable() {
    let gw = serve(&config(), "127.0.0.1:0").unwrap();
    let mut c = Console::connect(gw.local_addr());
    c.recv();

    c.raw("{not json");
    let e = c.recv();
    assert_eq!((e["type"].as_str(), e["code"].as_str()), (Some("error"), Some("malformed")));

    let s = c.send(json!({"type": "attend", "target_index": 99}));
    let e = c.recv();
    assert_eq!(e["code"], "out_of_range");
    assert_eq!(e["in_reply_to"], s);
    assert!(e["message"].as_str().unwrap().contains("0..=7"));

    c.raw(r#"{"type":"metrics","seq":0}"#);
    assert_eq!(c.recv()["code"], "seq_order");

    c.raw(r#"{"type":"launch","seq":50}"#);
    assert_eq!(c.recv()["code"], "malformed");

    let s = c.send(json!({"type": "attend", "target_index": 2}));
    let got = c.until("feedback");
    assert_eq!(got[0]["type"], "trial_result");
    assert_eq!(got.last().unwrap()["in_reply_to"], s);
    gw.shutdown();
}

#[test]
fn configure_between_trials_only() {
    let gw = serve(&config(), "127.0.0.1:0").unwrap();
    let mut c = Console::connect(gw.local_addr());
    c.recv();

    for k in 0..6 {
        c.send(json!({"type": "attend", "target_index": k}));
    }
    let s = c.send(json!({"type": "configure", "patch": {"noise": {"snr_db": 15.0}}}));
    let mut busy = false;
    let mut feedbacks = 0;
    while feedbacks < 6 {
        let m = c.recv();
        if m["type"] == "error" {
            assert_eq!(m["code"], "busy");
            assert_eq!(m["in_reply_to"], s);
            busy = true;
        }
        if m["type"] == "feedback" {
            feedbacks += 1;
        }
    }
    assert!(busy);
    c.until("metrics");

    let s = c.send(json!({"type": "configure", "patch": {"decoder": {"n_harmonics": 0}}}));
    let e = c.recv();
    assert_eq!((e["code"].as_str(), e["in_reply_to"].as_u64()), (Some("config"), Some(s)));
    assert!(e["message"].as_str().unwrap().contains("decoder"));

    let s = c.send(json!({"type": "configure", "patch": {"noise": {"snr_db": 15.0}}}));
    let h = c.recv();
    assert_eq!((h["type"].as_str(), h["in_reply_to"].as_u64()), (Some("hello"), Some(s)));
    assert_eq!(h["config"]["snr_db"], 15.0);
    assert_eq!(h["snapshot"]["trials_run"], 0);
    gw.shutdown();
}

#[test]
fn reconnect_resumes_from_snapshot() {
    let gw = serve(&config(), "127.0.0.1:0").unwrap();
    let mut c = Console::connect(gw.local_addr());
    c.recv();
    c.send(json!({"type": "attend", "target_index": 0}));
    let events = c.until("metrics");
    let moved = events
        .iter()
        .filter(|m| m["type"] == "agent_event")
        .filter_map(|m| m["event"]["x"].as_u64().zip(m["event"]["y"].as_u64()))
        .next_back();
    drop(c);

    let mut c = Console::connect(gw.local_addr());
    let h = c.recv();
    assert_eq!(h["type"], "hello");
    let snap = &h["snapshot"];
    assert_eq!(snap["trials_run"], 1);
    assert_eq!(snap["known_map"].as_array().unwrap().len(), 16);
    if let Some((x, y)) = moved {
        assert_eq!((snap["agent"]["x"].as_u64(), snap["agent"]["y"].as_u64()), (Some(x), Some(y)));
    }
    let s = c.send(json!({"type": "hello"}));
    assert_eq!(c.recv()["in_reply_to"], s);
    gw.shutdown();
}
