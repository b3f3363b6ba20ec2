//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::collections::VecDeque;
use std::f64::consts::PI;

use bcilink::agent::{Cell, GridMap, Pos};
use bcilink::dsp::FilterCoeffs;
use nalgebra::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Complex64 = Complex<f64>;

/// Integer line by rounding the minor coordinate of the ideal line, ties
/// going away from the start cell.
pub fn line_cells(a: Pos, b: Pos) -> Vec<Pos> {
    let (ax, ay) = (a.0 as i64, a.1 as i64);
    let (dx, dy) = (b.0 as i64 - ax, b.1 as i64 - ay);
    let steps = dx.abs().max(dy.abs());
    if steps == 0 {
        return vec![a];
    }
    let round = |num: i64| -> i64 {
        // num / steps rounded, half away from zero
        let q = (2 * num.abs() + steps) / (2 * steps);
        q * num.signum()
    };
    (0..=steps)
        .map(|t| {
            let (x, y) = if dx.abs() >= dy.abs() {
                (ax + dx.signum() * t, ay + round(dy * t))
            } else {
                (ax + round(dx * t), ay + dy.signum() * t)
            };
            (x as usize, y as usize)
        })
        .collect()
}

pub fn visible(map: &GridMap, from: Pos, to: Pos, radius: usize) -> bool {
    let cheb = from.0.abs_diff(to.0).max(from.1.abs_diff(to.1));
    if cheb > radius {
        return false;
    }
    let line = line_cells(from, to);
    line.iter()
        .skip(1)
        .take(line.len().saturating_sub(2))
        .all(|&c| map.get(c) != Cell::Obstacle)
}

/// Free cells 4-connected to `start` on the ground-truth map.
pub fn bfs_reachable(map: &GridMap, start: Pos) -> Vec<Pos> {
    let (w, h) = (map.width(), map.height());
    let mut seen = vec![vec![false; w]; h];
    let mut out = vec![start];
    seen[start.1][start.0] = true;
    let mut q = VecDeque::from([start]);
    while let Some((x, y)) = q.pop_front() {
        let cand = [
            (x as i64, y as i64 - 1),
            (x as i64 + 1, y as i64),
            (x as i64, y as i64 + 1),
            (x as i64 - 1, y as i64),
        ];
        for (nx, ny) in cand {
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                continue;
            }
            let p = (nx as usize, ny as usize);
            if !seen[p.1][p.0] && map.get(p) == Cell::Free {
                seen[p.1][p.0] = true;
                out.push(p);
                q.push_back(p);
            }
        }
    }
    out
}

/// Magnitude in dB from the expanded numerator and denominator polynomials.
pub fn transfer_db(coeffs: &FilterCoeffs, freq_hz: f64, fs_hz: f64) -> f64 {
    let mut num = vec![coeffs.gain];
    let mut den = vec![1.0];
    for s in &coeffs.sections {
        num = poly_mul(&num, &s.b);
        den = poly_mul(&den, &s.a);
    }
    let z_inv = Complex64::from_polar(1.0, -2.0 * PI * freq_hz / fs_hz);
    let eval = |p: &[f64]| p.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &c| acc * z_inv + c);
    20.0 * (eval(&num) / eval(&den)).norm().log10()
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn centered_cov(u: &[f64], v: &[f64]) -> f64 {
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    u.iter().zip(v).map(|(a, b)| (a - mu) * (b - mv)).sum::<f64>() / n
}

/// Largest correlation between `x·a` and `y·b` over unit vectors `a`, `b`
/// on a grid of angles in [0, π), for two-row `x` and `y`.
pub fn cca_angle_grid(x: &[Vec<f64>], y: &[Vec<f64>], steps: usize) -> f64 {
    assert_eq!((x.len(), y.len()), (2, 2));
    let c = |u: &[f64], v: &[f64]| centered_cov(u, v);
    let sxx = [[c(&x[0], &x[0]), c(&x[0], &x[1])], [c(&x[1], &x[0]), c(&x[1], &x[1])]];
    let syy = [[c(&y[0], &y[0]), c(&y[0], &y[1])], [c(&y[1], &y[0]), c(&y[1], &y[1])]];
    let sxy = [[c(&x[0], &y[0]), c(&x[0], &y[1])], [c(&x[1], &y[0]), c(&x[1], &y[1])]];
    let quad = |m: &[[f64; 2]; 2], a: [f64; 2], b: [f64; 2]| {
        a[0] * (m[0][0] * b[0] + m[0][1] * b[1]) + a[1] * (m[1][0] * b[0] + m[1][1] * b[1])
    };
    let dirs: Vec<[f64; 2]> = (0..steps)
        .map(|i| {
            let t = PI * i as f64 / steps as f64;
            [t.cos(), t.sin()]
        })
        .collect();
    let mut best = 0.0f64;
    for &a in &dirs {
        let va = quad(&sxx, a, a);
        for &b in &dirs {
            let r = quad(&sxy, a, b) / (va * quad(&syy, b, b)).sqrt();
            best = best.max(r.abs());
        }
    }
    best
}

/// Outcome of one ReconArea mission on ground truth.
pub struct ReconRun {
    /// Agent cell after each tick, starting with the base at tick 0.
    pub visited: Vec<(u64, Pos)>,
    pub state: bcilink::agent::AgentState,
    pub completed: bool,
}

pub fn run_recon(world: &bcilink::agent::World, radius: usize) -> ReconRun {
    use bcilink::agent::{AgentConfig, AgentState, EventKind};
    use bcilink::codec::{Command, CommandId};
    let cfg = AgentConfig {
        sensor_radius: radius,
        battery_capacity: 1e9,
        ..AgentConfig::default()
    };
    let mut state = AgentState::new(world, cfg).unwrap();
    let mut visited = vec![(0, state.pos())];
    let cmd = Command {
        id: CommandId::ReconArea,
        issued_at: 1,
    };
    let mut completed = false;
    for tick in 1..20_000u64 {
        let events = state.step(world, (tick == 1).then_some(&cmd), tick);
        visited.push((tick, state.pos()));
        if events.iter().any(|e| matches!(e.kind, EventKind::MissionComplete { .. })) {
            completed = true;
            break;
        }
    }
    ReconRun {
        visited,
        state,
        completed,
    }
}

/// Coverage and sighting checks against the oracles; `Err` names the first violation.
pub fn check_recon(world: &bcilink::agent::World, radius: usize) -> Result<(), String> {
    let run = run_recon(world, radius);
    if !run.completed {
        return Err("mission did not complete".into());
    }
    for w in run.visited.windows(2) {
        let (a, b) = (w[0].1, w[1].1);
        if a.0.abs_diff(b.0) + a.1.abs_diff(b.1) > 1 || world.map.get(b) != Cell::Free {
            return Err(format!("illegal step {a:?} -> {b:?}"));
        }
    }
    for c in bfs_reachable(&world.map, world.base) {
        let seen = run
            .visited
            .iter()
            .any(|&(_, v)| v.0.abs_diff(c.0).max(v.1.abs_diff(c.1)) <= radius);
        if !seen {
            return Err(format!("reachable cell {c:?} never within sensor radius"));
        }
    }
    let sightings = run.state.sightings();
    for s in sightings {
        let at = run.visited.iter().find(|&&(t, _)| t == s.tick).map(|&(_, p)| p);
        match at {
            Some(p) if visible(&world.map, p, s.cell, radius) => {}
            _ => return Err(format!("sighting of target {} at tick {} not visible", s.target_id, s.tick)),
        }
    }
    for t in &world.targets {
        let first_visible = run
            .visited
            .iter()
            .find(|&&(_, p)| visible(&world.map, p, t.cell, radius))
            .map(|&(tick, _)| tick);
        let sighted = sightings.iter().find(|s| s.target_id == t.id).map(|s| s.tick);
        if first_visible != sighted {
            return Err(format!(
                "target {} first visible at {first_visible:?} but sighted at {sighted:?}",
                t.id
            ));
        }
    }
    Ok(())
}

/// Minimal line-protocol console for driving the gateway in tests.
pub struct Console {
    tx: std::net::TcpStream,
    rx: std::io::Lines<std::io::BufReader<std::net::TcpStream>>,
    next_seq: u64,
}

impl Console {
    pub fn connect(addr: std::net::SocketAddr) -> Self {
        let s = std::net::TcpStream::connect(addr).unwrap();
        s.set_read_timeout(Some(std::time::Duration::from_secs(30))).unwrap();
        let tx = s.try_clone().unwrap();
        Console {
            tx,
            rx: std::io::BufRead::lines(std::io::BufReader::new(s)),
            next_seq: 0,
        }
    }

    /// Sends `msg` with the next client seq filled in; returns that seq.
    pub fn send(&mut self, mut msg: serde_json::Value) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        msg["seq"] = seq.into();
        self.raw(&msg.to_string());
        seq
    }

    pub fn raw(&mut self, line: &str) {
        use std::io::Write;
        writeln!(self.tx, "{line}").unwrap();
    }

    pub fn recv(&mut self) -> serde_json::Value {
        let line = self.rx.next().expect("gateway closed").unwrap();
        serde_json::from_str(&line).unwrap()
    }

    /// Reads until a message of type `ty` arrives; returns everything read.
    pub fn until(&mut self, ty: &str) -> Vec<serde_json::Value> {
        let mut out = Vec::new();
        loop {
            let m = self.recv();
            let done = m["type"] == ty;
            out.push(m);
            if done {
                return out;
            }
        }
    }
}

pub fn gaussian_rows(rng: &mut ChaCha8Rng, rows: usize, n: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

/// Pair `i`: independent noise for even `i`, `y` partly driven by `x` for odd `i`.
pub fn cca_pair(i: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xCCA0 + i);
    let x = gaussian_rows(&mut rng, 2, 200);
    let mut y = gaussian_rows(&mut rng, 2, 200);
    if i % 2 == 1 {
        let k: f64 = 0.2 + 0.3 * i as f64 / 20.0;
        for t in 0..200 {
            y[0][t] += k * (x[0][t] - 0.5 * x[1][t]) * 3.0;
            y[1][t] += k * x[1][t];
        }
    }
    (x, y)
}

pub fn zscore(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = r.len() as f64;
            let m = r.iter().sum::<f64>() / n;
            let sd = (r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            r.iter().map(|v| (v - m) / sd).collect()
        })
        .collect()
}

/// Closed-form ITR written out term by term.
pub fn itr_oracle(n: f64, p: f64, t: f64) -> f64 {
    if p <= 1.0 / n {
        return 0.0;
    }
    let mut bits = n.log2() + p * p.log2();
    if p < 1.0 {
        bits += (1.0 - p) * ((1.0 - p) / (n - 1.0)).log2();
    }
    bits * 60.0 / t
}
