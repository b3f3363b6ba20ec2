//! Grid-world reconnaissance agent.
//!
//! The agent lives on a 4-connected occupancy grid. Its known map starts
//! Unknown and is filled in from ground truth within a Chebyshev sensor
//! radius; targets are sighted when they are inside that radius with an
//! unobstructed Bresenham line. `ReconArea` plans a serpentine coverage route
//! over the known map (Unknown treated as passable) and replans whenever a
//! planned cell turns out to be an obstacle.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Command, CommandId, FeedbackStatus};
use crate::error::{Error, Result};

/// `(x, y)`; `y` grows southward, so north is `y - 1`.
pub type Pos = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cell {
    Free,
    Obstacle,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMap {
    width: usize,
    height: usize,
    cells: Vec<Cell>,
    pub cell_size_m: f64,
}

pub const DEFAULT_CELL_SIZE_M: f64 = 5.0;

impl GridMap {
    pub fn new(width: usize, height: usize, fill: Cell) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("grid dimensions must be at least 1"));
        }
        Ok(Self {
            width,
            height,
            cells: vec![fill; width * height],
            cell_size_m: DEFAULT_CELL_SIZE_M,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, (x, y): Pos) -> Cell {
        self.cells[y * self.width + x]
    }

    pub fn set(&mut self, (x, y): Pos, cell: Cell) {
        self.cells[y * self.width + x] = cell;
    }

    pub fn contains(&self, (x, y): Pos) -> bool {
        x < self.width && y < self.height
    }

    pub fn offset(&self, (x, y): Pos, dx: i64, dy: i64) -> Option<Pos> {
        let nx = x as i64 + dx;
        let ny = y as i64 + dy;
        (nx >= 0 && ny >= 0 && (nx as usize) < self.width && (ny as usize) < self.height)
            .then_some((nx as usize, ny as usize))
    }

    /// In-bounds 4-neighbours in N, E, S, W order.
    pub fn neighbors(&self, p: Pos) -> impl Iterator<Item = Pos> + '_ {
        Heading::ALL
            .into_iter()
            .filter_map(move |h| {
                let (dx, dy) = h.delta();
                self.offset(p, dx, dy)
            })
    }

    pub fn positions(&self) -> impl Iterator<Item = Pos> {
        let w = self.width;
        (0..self.width * self.height).map(move |i| (i % w, i / w))
    }

    pub fn count(&self, cell: Cell) -> usize {
        self.cells.iter().filter(|&&c| c == cell).count()
    }

    /// Cells within Chebyshev distance `r` of `p`, clipped to the grid.
    pub fn square(&self, (x, y): Pos, r: usize) -> impl Iterator<Item = Pos> {
        let x0 = x.saturating_sub(r);
        let y0 = y.saturating_sub(r);
        let x1 = (x + r).min(self.width - 1);
        let y1 = (y + r).min(self.height - 1);
        (y0..=y1).flat_map(move |yy| (x0..=x1).map(move |xx| (xx, yy)))
    }

    /// One line per row: `#` obstacle, `.` free, `?` unknown.
    pub fn to_ascii(&self) -> String {
        let mut s = String::with_capacity((self.width + 1) * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                s.push(match self.get((x, y)) {
                    Cell::Free => '.',
                    Cell::Obstacle => '#',
                    Cell::Unknown => '?',
                });
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::N, Heading::E, Heading::S, Heading::W];

    pub fn delta(self) -> (i64, i64) {
        match self {
            Heading::N => (0, -1),
            Heading::E => (1, 0),
            Heading::S => (0, 1),
            Heading::W => (-1, 0),
        }
    }

    fn between(a: Pos, b: Pos) -> Option<Heading> {
        let d = (b.0 as i64 - a.0 as i64, b.1 as i64 - a.1 as i64);
        Heading::ALL.into_iter().find(|h| h.delta() == d)
    }

    fn of_command(id: CommandId) -> Option<Heading> {
        match id {
            CommandId::MoveNorth => Some(Heading::N),
            CommandId::MoveEast => Some(Heading::E),
            CommandId::MoveSouth => Some(Heading::S),
            CommandId::MoveWest => Some(Heading::W),
            _ => None,
        }
    }
}

impl fmt::Display for Heading {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TargetKind {
    Infantry,
    Vehicle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub id: u32,
    pub kind: TargetKind,
    pub cell: Pos,
}

/// Ground truth: a fully known map, the targets and the start/base cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub map: GridMap,
    pub targets: Vec<Target>,
    pub base: Pos,
}

impl World {
    /// Parses the plain-text world format. `#` obstacle, `.` free, `T`
    /// infantry target, `V` vehicle target, `S` start (exactly one). Trailing
    /// blank lines are ignored; every row must have the same width.
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().map(str::trim_end).collect();
        let n_rows = rows.iter().rposition(|r| !r.is_empty()).map_or(0, |i| i + 1);
        let rows = &rows[..n_rows];
        if rows.is_empty() {
            return Err(Error::Parse("world is empty".into()));
        }
        let width = rows[0].chars().count();
        let mut map = GridMap::new(width.max(1), rows.len(), Cell::Free)?;
        let mut targets = Vec::new();
        let mut base = None;
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::Parse(format!(
                    "world row {} has {} cells, expected {width}",
                    y + 1,
                    row.chars().count()
                )));
            }
            for (x, ch) in row.chars().enumerate() {
                match ch {
                    '#' => map.set((x, y), Cell::Obstacle),
                    '.' => {}
                    'T' | 'V' => targets.push(Target {
                        id: targets.len() as u32,
                        kind: if ch == 'T' { TargetKind::Infantry } else { TargetKind::Vehicle },
                        cell: (x, y),
                    }),
                    'S' => {
                        if base.replace((x, y)).is_some() {
                            return Err(Error::Parse("world has more than one `S`".into()));
                        }
                    }
                    other => {
                        return Err(Error::Parse(format!(
                            "unexpected character `{other}` at row {}, column {}",
                            y + 1,
                            x + 1
                        )))
                    }
                }
            }
        }
        let base = base.ok_or_else(|| Error::Parse("world has no start cell `S`".into()))?;
        Ok(Self { map, targets, base })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("cannot read world {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut grid: Vec<Vec<char>> = (0..self.map.height())
            .map(|y| {
                (0..self.map.width())
                    .map(|x| if self.map.get((x, y)) == Cell::Obstacle { '#' } else { '.' })
                    .collect()
            })
            .collect();
        for t in &self.targets {
            grid[t.cell.1][t.cell.0] = match t.kind {
                TargetKind::Infantry => 'T',
                TargetKind::Vehicle => 'V',
            };
        }
        grid[self.base.1][self.base.0] = 'S';
        grid.into_iter()
            .map(|r| r.into_iter().collect::<String>() + "\n")
            .collect()
    }

    /// Random obstacles at `density`, the base at a free cell and
    /// `n_targets` targets on other free cells. Regions may be disconnected.
    pub fn random(width: usize, height: usize, density: f64, n_targets: usize, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&density) {
            return Err(Error::invalid("obstacle density must be in [0, 1)"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = GridMap::new(width, height, Cell::Free)?;
        for p in map.positions().collect::<Vec<_>>() {
            if rng.gen::<f64>() < density {
                map.set(p, Cell::Obstacle);
            }
        }
        let base = (rng.gen_range(0..width), rng.gen_range(0..height));
        map.set(base, Cell::Free);
        let mut free: Vec<Pos> = map
            .positions()
            .filter(|&p| p != base && map.get(p) == Cell::Free)
            .collect();
        let mut targets = Vec::new();
        for id in 0..n_targets.min(free.len()) {
            let cell = free.swap_remove(rng.gen_range(0..free.len()));
            let kind = if rng.gen::<bool>() { TargetKind::Infantry } else { TargetKind::Vehicle };
            targets.push(Target { id: id as u32, kind, cell });
        }
        Ok(Self { map, targets, base })
    }

    pub fn is_free(&self, p: Pos) -> bool {
        self.map.contains(p) && self.map.get(p) == Cell::Free
    }

    /// No obstacle strictly between `from` and `to` on the Bresenham line.
    pub fn line_of_sight(&self, from: Pos, to: Pos) -> bool {
        let line = bresenham(from, to);
        if line.len() <= 2 {
            return true;
        }
        line[1..line.len() - 1]
            .iter()
            .all(|&c| self.map.get(c) != Cell::Obstacle)
    }
}

/// Cells on the integer line from `a` to `b`, both endpoints included.
pub fn bresenham(a: Pos, b: Pos) -> Vec<Pos> {
    let (mut x, mut y) = (a.0 as i64, a.1 as i64);
    let (x1, y1) = (b.0 as i64, b.1 as i64);
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let sx = if x < x1 { 1 } else { -1 };
    let sy = if y < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx - dy + 1) as usize);
    loop {
        out.push((x as usize, y as usize));
        if x == x1 && y == y1 {
            return out;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

pub fn chebyshev(a: Pos, b: Pos) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

/// Breadth-first path from `from` to the first cell satisfying `goal`,
/// excluding `from`. Neighbours are expanded N, E, S, W.
fn bfs_to(
    map: &GridMap,
    from: Pos,
    passable: impl Fn(Pos) -> bool,
    goal: impl Fn(Pos) -> bool,
) -> Option<Vec<Pos>> {
    let idx = |(x, y): Pos| y * map.width() + x;
    let mut prev: Vec<Option<Pos>> = vec![None; map.width() * map.height()];
    let mut seen = vec![false; map.width() * map.height()];
    let mut queue = VecDeque::from([from]);
    seen[idx(from)] = true;
    while let Some(p) = queue.pop_front() {
        if p != from && goal(p) {
            let mut path = vec![p];
            let mut cur = p;
            while let Some(q) = prev[idx(cur)] {
                if q == from {
                    break;
                }
                path.push(q);
                cur = q;
            }
            path.reverse();
            return Some(path);
        }
        for n in map.neighbors(p) {
            if !seen[idx(n)] && passable(n) {
                seen[idx(n)] = true;
                prev[idx(n)] = Some(p);
                queue.push_back(n);
            }
        }
    }
    None
}

/// Cells 4-connected to `start` through cells that are not obstacles.
pub fn reachable(map: &GridMap, start: Pos) -> Vec<bool> {
    let w = map.width();
    let mut seen = vec![false; w * map.height()];
    if map.get(start) == Cell::Obstacle {
        return seen;
    }
    let mut queue = VecDeque::from([start]);
    seen[start.1 * w + start.0] = true;
    while let Some(p) = queue.pop_front() {
        for n in map.neighbors(p) {
            if !seen[n.1 * w + n.0] && map.get(n) != Cell::Obstacle {
                seen[n.1 * w + n.0] = true;
                queue.push_back(n);
            }
        }
    }
    seen
}

/// Serpentine coverage route starting at `start` (included). Lanes run along
/// rows spaced `2r + 1` apart; blocked lanes are bypassed with shortest paths
/// and anything the lanes miss is picked up nearest-first. Unknown cells are
/// treated as passable. Consecutive waypoints are 4-adjacent.
pub fn plan_coverage(map: &GridMap, start: Pos, sensor_radius: usize) -> Result<Vec<Pos>> {
    plan_route(map, start, sensor_radius, |_| false)
}

fn plan_route(
    map: &GridMap,
    start: Pos,
    r: usize,
    already_covered: impl Fn(Pos) -> bool,
) -> Result<Vec<Pos>> {
    if !map.contains(start) {
        return Err(Error::invalid(format!("start {start:?} is outside the map")));
    }
    if map.get(start) == Cell::Obstacle {
        return Err(Error::invalid(format!("start {start:?} is an obstacle")));
    }
    let w = map.width();
    let h = map.height();
    let region = reachable(map, start);
    let in_region = |p: Pos| region[p.1 * w + p.0];
    let mut covered: Vec<bool> = map
        .positions()
        .map(|p| !in_region(p) || already_covered(p))
        .collect();
    let mark = |covered: &mut Vec<bool>, p: Pos| {
        for q in map.square(p, r) {
            covered[q.1 * w + q.0] = true;
        }
    };

    let mut route = vec![start];
    mark(&mut covered, start);
    let mut cur = start;

    let step = 2 * r + 1;
    let mut lanes: Vec<usize> = (r..h).step_by(step).collect();
    match lanes.last() {
        None => lanes.push(h - 1),
        Some(&last) if last + r < h - 1 => lanes.push((h - 1 - r).max(last + 1)),
        _ => {}
    }
    for (i, &y) in lanes.iter().enumerate() {
        let xs: Vec<usize> = if i % 2 == 0 { (0..w).collect() } else { (0..w).rev().collect() };
        for x in xs {
            let g = (x, y);
            if !in_region(g) || covered[y * w + x] {
                continue;
            }
            let path = bfs_to(map, cur, in_region, |p| p == g).expect("goal lies in the start region");
            for p in path {
                mark(&mut covered, p);
                route.push(p);
            }
            cur = g;
        }
    }
    while let Some(path) = bfs_to(map, cur, in_region, |p| !covered[p.1 * w + p.0]) {
        for &p in &path {
            mark(&mut covered, p);
            route.push(p);
        }
        cur = *path.last().expect("non-empty path");
    }
    Ok(route)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Idle,
    Recon,
    Moving,
    Returning,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSighting {
    pub target_id: u32,
    pub kind: TargetKind,
    pub cell: Pos,
    pub tick: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub sensor_radius: usize,
    pub battery_capacity: f64,
    pub move_cost: f64,
    pub idle_cost: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            sensor_radius: 2,
            battery_capacity: 1000.0,
            move_cost: 1.0,
            idle_cost: 0.2,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.battery_capacity > 0.0) {
            return Err(Error::invalid("battery_capacity must be positive"));
        }
        if !(self.move_cost >= 0.0 && self.idle_cost >= 0.0) {
            return Err(Error::invalid("battery costs must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    Moved { x: usize, y: usize, heading: Heading },
    Blocked { x: i64, y: i64 },
    Mapped { cells: usize },
    Sighted { target_id: u32, kind: TargetKind, x: usize, y: usize },
    Planned { waypoints: usize },
    MissionComplete { known_cells: usize },
    Halted,
    Returned { battery: f64 },
    Marked { target_id: u32 },
    Rejected { command: CommandId, reason: String },
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentEvent {
    pub tick: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl AgentEvent {
    fn new(tick: u64, kind: EventKind) -> Self {
        Self { tick, kind }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            EventKind::Moved { .. } => "moved",
            EventKind::Blocked { .. } => "blocked",
            EventKind::Mapped { .. } => "mapped",
            EventKind::Sighted { .. } => "sighted",
            EventKind::Planned { .. } => "planned",
            EventKind::MissionComplete { .. } => "mission_complete",
            EventKind::Halted => "halted",
            EventKind::Returned { .. } => "returned",
            EventKind::Marked { .. } => "marked",
            EventKind::Rejected { .. } => "rejected",
            EventKind::Failed { .. } => "failed",
        }
    }

    /// Compact `key=value` text used as the agent-event frame payload.
    pub fn to_kv(&self) -> String {
        let head = format!("event={} tick={}", self.name(), self.tick);
        let tail = match &self.kind {
            EventKind::Moved { x, y, heading } => format!(" x={x} y={y} heading={heading}"),
            EventKind::Blocked { x, y } => format!(" x={x} y={y}"),
            EventKind::Mapped { cells } => format!(" cells={cells}"),
            EventKind::Sighted { target_id, kind, x, y } => {
                format!(" target={target_id} kind={kind:?} x={x} y={y}")
            }
            EventKind::Planned { waypoints } => format!(" waypoints={waypoints}"),
            EventKind::MissionComplete { known_cells } => format!(" known={known_cells}"),
            EventKind::Halted => String::new(),
            EventKind::Returned { battery } => format!(" battery={battery}"),
            EventKind::Marked { target_id } => format!(" target={target_id}"),
            EventKind::Rejected { command, reason } => format!(" command={command} reason={reason}"),
            EventKind::Failed { reason } => format!(" reason={reason}"),
        };
        head + &tail
    }
}

/// Ground-truth verdict on a delivered command given the events it caused.
/// Never `NotRecognized`; that branch is decided before delivery.
pub fn execution_status(command: &Command, events: &[AgentEvent]) -> FeedbackStatus {
    if resolution(command.id, events) == Some(true) {
        FeedbackStatus::Executed
    } else {
        FeedbackStatus::RecognizedNotExecuted
    }
}

/// `Some(true)` once the command's success event occurred, `Some(false)` once
/// it was blocked, rejected or the agent failed, `None` while still running.
pub fn resolution(id: CommandId, events: &[AgentEvent]) -> Option<bool> {
    for e in events {
        let done = match (&e.kind, id) {
            (EventKind::Blocked { .. } | EventKind::Rejected { .. } | EventKind::Failed { .. }, _) => {
                Some(false)
            }
            (EventKind::Moved { .. }, id) if id.is_move() => Some(true),
            (EventKind::Halted, CommandId::Halt) => Some(true),
            (EventKind::MissionComplete { .. }, CommandId::ReconArea) => Some(true),
            (EventKind::Returned { .. }, CommandId::ReturnToBase) => Some(true),
            (EventKind::Marked { .. }, CommandId::MarkTarget) => Some(true),
            _ => None,
        };
        if done.is_some() {
            return done;
        }
    }
    None
}

/// Agent pose, resources, mission state and what it has learned so far.
///
/// Mode rules: moves are rejected during Recon and Returning (Halt first);
/// ReconArea and ReturnToBase replace any running mission; every command is
/// rejected once Failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pos: Pos,
    heading: Heading,
    battery: f64,
    mode: Mode,
    known_map: GridMap,
    /// Cells seen with a clear line from some visited cell.
    viewed: Vec<bool>,
    sightings: Vec<TargetSighting>,
    marked: BTreeSet<u32>,
    route: VecDeque<Pos>,
    base: Pos,
    config: AgentConfig,
}

impl AgentState {
    pub fn new(world: &World, config: AgentConfig) -> Result<Self> {
        config.validate()?;
        if !world.is_free(world.base) {
            return Err(Error::invalid("base must be a free cell"));
        }
        let mut known_map = GridMap::new(world.map.width(), world.map.height(), Cell::Unknown)?;
        known_map.cell_size_m = world.map.cell_size_m;
        let mut s = Self {
            pos: world.base,
            heading: Heading::N,
            battery: config.battery_capacity,
            mode: Mode::Idle,
            viewed: vec![false; world.map.width() * world.map.height()],
            known_map,
            sightings: Vec::new(),
            marked: BTreeSet::new(),
            route: VecDeque::new(),
            base: world.base,
            config,
        };
        s.reveal(world);
        s.sense(world, 0, &mut Vec::new());
        Ok(s)
    }

    pub fn pos(&self) -> Pos {
        self.pos
    }

    pub fn heading(&self) -> Heading {
        self.heading
    }

    pub fn battery(&self) -> f64 {
        self.battery
    }

    pub fn battery_pct(&self) -> f64 {
        100.0 * self.battery / self.config.battery_capacity
    }

    /// Drains the battery (fault injection for tests and demos).
    pub fn set_battery(&mut self, units: f64) {
        self.battery = units.clamp(0.0, self.config.battery_capacity);
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn known_map(&self) -> &GridMap {
        &self.known_map
    }

    pub fn sightings(&self) -> &[TargetSighting] {
        &self.sightings
    }

    pub fn marked(&self) -> impl Iterator<Item = u32> + '_ {
        self.marked.iter().copied()
    }

    pub fn base(&self) -> Pos {
        self.base
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn route(&self) -> impl Iterator<Item = Pos> + '_ {
        self.route.iter().copied()
    }

    /// Advances one tick: at most one command consumed, at most one cell moved.
    pub fn step(&mut self, world: &World, command: Option<&Command>, tick: u64) -> Vec<AgentEvent> {
        let mut events = Vec::new();
        if self.mode == Mode::Failed {
            if let Some(c) = command {
                events.push(AgentEvent::new(
                    tick,
                    EventKind::Rejected {
                        command: c.id,
                        reason: "agent_failed".into(),
                    },
                ));
            }
            return events;
        }
        if self.battery <= 0.0 {
            self.mode = Mode::Failed;
            self.route.clear();
            events.push(AgentEvent::new(
                tick,
                EventKind::Failed {
                    reason: "battery_depleted".into(),
                },
            ));
            return events;
        }

        let mut moved = false;
        if let Some(c) = command {
            match c.id {
                CommandId::Halt => {
                    self.route.clear();
                    self.mode = Mode::Idle;
                    events.push(AgentEvent::new(tick, EventKind::Halted));
                }
                CommandId::ReconArea => {
                    self.mode = Mode::Recon;
                    self.replan_recon();
                    events.push(AgentEvent::new(
                        tick,
                        EventKind::Planned {
                            waypoints: self.route.len(),
                        },
                    ));
                }
                CommandId::ReturnToBase => {
                    self.start_return(tick, &mut events);
                }
                CommandId::MarkTarget => self.mark(world, c.id, tick, &mut events),
                id => {
                    let heading = Heading::of_command(id).expect("move command");
                    if matches!(self.mode, Mode::Recon | Mode::Returning) {
                        events.push(AgentEvent::new(
                            tick,
                            EventKind::Rejected {
                                command: id,
                                reason: "mission_in_progress".into(),
                            },
                        ));
                    } else {
                        moved = self.try_move(world, heading, tick, &mut events);
                        if moved {
                            self.mode = Mode::Moving;
                        }
                    }
                }
            }
        }
        if !moved {
            moved = self.follow_route(world, tick, &mut events);
        }
        if !moved && self.mode == Mode::Moving && command.is_none() {
            self.mode = Mode::Idle;
        }

        let cost = if moved { self.config.move_cost } else { self.config.idle_cost };
        self.battery = (self.battery - cost).max(0.0);

        let newly = self.reveal(world);
        if newly > 0 {
            events.push(AgentEvent::new(tick, EventKind::Mapped { cells: newly }));
        }
        self.sense(world, tick, &mut events);

        if self.mode == Mode::Returning && self.pos == self.base {
            self.arrive_home(tick, &mut events);
        }
        if self.mode == Mode::Recon && self.route.is_empty() {
            self.replan_recon();
            if self.route.is_empty() {
                self.mode = Mode::Idle;
                events.push(AgentEvent::new(
                    tick,
                    EventKind::MissionComplete {
                        known_cells: self.known_cells(),
                    },
                ));
            }
        }
        events
    }

    fn known_cells(&self) -> usize {
        self.known_map.width() * self.known_map.height() - self.known_map.count(Cell::Unknown)
    }

    /// Radius coverage of unknown cells first; then visits any known free
    /// cell that was only ever seen through a wall.
    fn replan_recon(&mut self) {
        let known = &self.known_map;
        let plan = plan_route(known, self.pos, self.config.sensor_radius, |p| known.get(p) != Cell::Unknown)
            .expect("agent stands on a free cell");
        self.route = plan.into_iter().skip(1).collect();
        if self.route.is_empty() {
            let w = known.width();
            let free = |p: Pos| known.get(p) == Cell::Free;
            if let Some(path) = bfs_to(known, self.pos, free, |p| free(p) && !self.viewed[p.1 * w + p.0]) {
                self.route = path.into();
            }
        }
    }

    /// True once every known free cell reachable from the agent has been in view.
    pub fn fully_viewed(&self) -> bool {
        let known = &self.known_map;
        let w = known.width();
        let region = reachable(known, self.pos);
        known
            .positions()
            .all(|p| !region[p.1 * w + p.0] || known.get(p) != Cell::Free || self.viewed[p.1 * w + p.0])
    }

    fn start_return(&mut self, tick: u64, events: &mut Vec<AgentEvent>) {
        self.route.clear();
        if self.pos == self.base {
            self.mode = Mode::Returning;
            return;
        }
        let known = &self.known_map;
        match bfs_to(known, self.pos, |p| known.get(p) == Cell::Free, |p| p == self.base) {
            Some(path) => {
                self.mode = Mode::Returning;
                self.route = path.into();
            }
            None => {
                self.mode = Mode::Idle;
                events.push(AgentEvent::new(
                    tick,
                    EventKind::Rejected {
                        command: CommandId::ReturnToBase,
                        reason: "no_known_path".into(),
                    },
                ));
            }
        }
    }

    fn arrive_home(&mut self, tick: u64, events: &mut Vec<AgentEvent>) {
        self.mode = Mode::Idle;
        self.route.clear();
        self.battery = self.config.battery_capacity;
        events.push(AgentEvent::new(tick, EventKind::Returned { battery: self.battery }));
    }

    fn try_move(&mut self, world: &World, heading: Heading, tick: u64, events: &mut Vec<AgentEvent>) -> bool {
        self.heading = heading;
        let (dx, dy) = heading.delta();
        match world.map.offset(self.pos, dx, dy) {
            Some(next) if world.is_free(next) => {
                self.pos = next;
                events.push(AgentEvent::new(
                    tick,
                    EventKind::Moved {
                        x: next.0,
                        y: next.1,
                        heading,
                    },
                ));
                true
            }
            Some(next) => {
                self.known_map.set(next, Cell::Obstacle);
                events.push(AgentEvent::new(
                    tick,
                    EventKind::Blocked {
                        x: next.0 as i64,
                        y: next.1 as i64,
                    },
                ));
                false
            }
            None => {
                events.push(AgentEvent::new(
                    tick,
                    EventKind::Blocked {
                        x: self.pos.0 as i64 + dx,
                        y: self.pos.1 as i64 + dy,
                    },
                ));
                false
            }
        }
    }

    fn follow_route(&mut self, world: &World, tick: u64, events: &mut Vec<AgentEvent>) -> bool {
        let Some(&next) = self.route.front() else {
            return false;
        };
        if !world.is_free(next) {
            // Planned through a cell that was still Unknown.
            self.known_map.set(next, Cell::Obstacle);
            match self.mode {
                Mode::Recon => self.replan_recon(),
                Mode::Returning => {
                    let mut ignored = Vec::new();
                    self.start_return(tick, &mut ignored);
                    events.extend(ignored);
                }
                _ => self.route.clear(),
            }
            return false;
        }
        self.route.pop_front();
        let heading = Heading::between(self.pos, next).expect("route cells are adjacent");
        self.heading = heading;
        self.pos = next;
        events.push(AgentEvent::new(
            tick,
            EventKind::Moved {
                x: next.0,
                y: next.1,
                heading,
            },
        ));
        true
    }

    fn reveal(&mut self, world: &World) -> usize {
        let mut n = 0;
        let w = world.map.width();
        for p in world.map.square(self.pos, self.config.sensor_radius) {
            if self.known_map.get(p) == Cell::Unknown {
                self.known_map.set(p, world.map.get(p));
                n += 1;
            }
            if !self.viewed[p.1 * w + p.0] && world.line_of_sight(self.pos, p) {
                self.viewed[p.1 * w + p.0] = true;
            }
        }
        n
    }

    fn visible(&self, world: &World, cell: Pos) -> bool {
        chebyshev(self.pos, cell) <= self.config.sensor_radius && world.line_of_sight(self.pos, cell)
    }

    fn sense(&mut self, world: &World, tick: u64, events: &mut Vec<AgentEvent>) {
        for t in &world.targets {
            if self.sightings.iter().any(|s| s.target_id == t.id) || !self.visible(world, t.cell) {
                continue;
            }
            self.sightings.push(TargetSighting {
                target_id: t.id,
                kind: t.kind,
                cell: t.cell,
                tick,
            });
            events.push(AgentEvent::new(
                tick,
                EventKind::Sighted {
                    target_id: t.id,
                    kind: t.kind,
                    x: t.cell.0,
                    y: t.cell.1,
                },
            ));
        }
    }

    /// Flags the lowest-id sighted, unmarked target currently in view.
    fn mark(&mut self, world: &World, id: CommandId, tick: u64, events: &mut Vec<AgentEvent>) {
        let candidate = self
            .sightings
            .iter()
            .filter(|s| !self.marked.contains(&s.target_id) && self.visible(world, s.cell))
            .map(|s| s.target_id)
            .min();
        match candidate {
            Some(t) => {
                self.marked.insert(t);
                events.push(AgentEvent::new(tick, EventKind::Marked { target_id: t }));
            }
            None => events.push(AgentEvent::new(
                tick,
                EventKind::Rejected {
                    command: id,
                    reason: "no_target_in_view".into(),
                },
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cmd(id: CommandId) -> Command {
        Command { id, issued_at: 0 }
    }

    fn world(text: &str) -> World {
        World::parse(text).unwrap()
    }

    #[test]
    fn parse_world() {
        let w = world("#S.\n.TV\n\n");
        assert_eq!((w.map.width(), w.map.height()), (3, 2));
        assert_eq!(w.base, (1, 0));
        assert_eq!(w.map.get((0, 0)), Cell::Obstacle);
        assert_eq!(w.targets.len(), 2);
        assert_eq!(w.targets[1].kind, TargetKind::Vehicle);
        assert_eq!(World::parse(&w.to_text()).unwrap(), w);
        assert!(World::parse("..\n.").is_err());
        assert!(World::parse("...").is_err());
        assert!(World::parse("SS").is_err());
        assert!(World::parse("S?").is_err());
    }

    #[test]
    fn move_north_into_free_cell() {
        let w = world("...\n.S.\n...");
        let mut a = AgentState::new(&w, AgentConfig::default()).unwrap();
        let ev = a.step(&w, Some(&cmd(CommandId::MoveNorth)), 1);
        assert_eq!(a.pos(), (1, 0));
        assert_eq!(ev[0].name(), "moved");
        assert_eq!(execution_status(&cmd(CommandId::MoveNorth), &ev), FeedbackStatus::Executed);
        assert!(a.battery() < a.config().battery_capacity);
    }

    #[test]
    fn blocked_by_obstacle_and_edge() {
        let w = world(".#.\n.S.");
        let mut a = AgentState::new(&w, AgentConfig::default()).unwrap();
        let ev = a.step(&w, Some(&cmd(CommandId::MoveNorth)), 1);
        assert_eq!(a.pos(), (1, 1));
        assert_eq!(ev[0].name(), "blocked");
        assert_eq!(
            execution_status(&cmd(CommandId::MoveNorth), &ev),
            FeedbackStatus::RecognizedNotExecuted
        );
        let ev = a.step(&w, Some(&cmd(CommandId::MoveSouth)), 2);
        assert_eq!(ev[0].kind, EventKind::Blocked { x: 1, y: 2 });
    }

    #[test]
    fn empty_battery_fails() {
        let w = world("S..");
        let mut a = AgentState::new(&w, AgentConfig::default()).unwrap();
        a.set_battery(0.0);
        let ev = a.step(&w, Some(&cmd(CommandId::MoveEast)), 1);
        assert_eq!(a.mode(), Mode::Failed);
        assert_eq!(ev[0].name(), "failed");
        assert_eq!(
            execution_status(&cmd(CommandId::MoveEast), &ev),
            FeedbackStatus::RecognizedNotExecuted
        );
        let ev = a.step(&w, Some(&cmd(CommandId::Halt)), 2);
        assert_eq!(ev[0].name(), "rejected");
        assert_eq!(a.pos(), (0, 0));
    }

    #[test]
    fn serpentine_on_open_grid() {
        let m = GridMap::new(4, 4, Cell::Free).unwrap();
        let route = plan_coverage(&m, (0, 0), 0).unwrap();
        let expected: Vec<Pos> = (0..4)
            .flat_map(|y| {
                let xs: Vec<usize> = if y % 2 == 0 { (0..4).collect() } else { (0..4).rev().collect() };
                xs.into_iter().map(move |x| (x, y))
            })
            .collect();
        assert_eq!(route, expected);
    }

    #[test]
    fn single_cell_region() {
        let w = world("###\n#S#\n###");
        assert_eq!(plan_coverage(&w.map, w.base, 2).unwrap(), vec![w.base]);
        assert!(plan_coverage(&w.map, (0, 0), 2).is_err());
    }

    fn assert_route_covers(map: &GridMap, start: Pos, r: usize) {
        let route = plan_coverage(map, start, r).unwrap();
        for pair in route.windows(2) {
            assert_eq!(chebyshev(pair[0], pair[1]), 1);
            assert!(pair[0].0 == pair[1].0 || pair[0].1 == pair[1].1);
        }
        let region = reachable(map, start);
        for p in map.positions() {
            if region[p.1 * map.width() + p.0] {
                assert!(route.iter().any(|&q| chebyshev(p, q) <= r), "{p:?} uncovered");
            }
        }
        assert!(route.iter().all(|&q| map.get(q) != Cell::Obstacle));
    }

    #[test]
    fn covers_around_block() {
        let mut m = GridMap::new(8, 8, Cell::Free).unwrap();
        for p in [(3, 3), (4, 3), (3, 4), (4, 4)] {
            m.set(p, Cell::Obstacle);
        }
        for r in 0..3 {
            assert_route_covers(&m, (0, 0), r);
        }
        let w = world("S.#.....\n..#.##..\n..#..#..\n.....#..");
        assert_route_covers(&w.map, w.base, 0);
        assert_route_covers(&w.map, w.base, 1);
    }

    #[test]
    fn bresenham_lines() {
        assert_eq!(bresenham((0, 0), (3, 0)), vec![(0, 0), (1, 0), (2, 0), (3, 0)]);
        assert_eq!(bresenham((0, 0), (2, 2)), vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(bresenham((2, 1), (0, 0)).len(), 3);
        assert_eq!(bresenham((1, 1), (1, 1)), vec![(1, 1)]);
    }

    #[test]
    fn adjacent_target_sighted_occluded_not() {
        let w = world("ST.");
        let a = AgentState::new(&w, AgentConfig::default()).unwrap();
        assert_eq!(a.sightings()[0].tick, 0);
        let w = world("S...\n...T");
        let mut a = AgentState::new(&w, AgentConfig::default()).unwrap();
        assert!(a.sightings().is_empty());
        a.step(&w, Some(&cmd(CommandId::MoveEast)), 1);
        assert_eq!(a.sightings()[0].tick, 1);

        let w = world("S#T");
        let mut a = AgentState::new(&w, AgentConfig::default()).unwrap();
        a.step(&w, None, 1);
        assert!(a.sightings().is_empty());
    }

    #[test]
    fn recon_completes_and_returns() {
        let w = world(
            "S.......\n\
             .##.....\n\
             .#...T..\n\
             .#..###.\n\
             ....#...\n\
             .V..#...",
        );
        let mut a = AgentState::new(&w, AgentConfig::default()).unwrap();
        let mut all = a.step(&w, Some(&cmd(CommandId::ReconArea)), 0);
        let mut tick = 1;
        while resolution(CommandId::ReconArea, &all).is_none() && tick < 500 {
            all.extend(a.step(&w, None, tick));
            tick += 1;
        }
        assert_eq!(execution_status(&cmd(CommandId::ReconArea), &all), FeedbackStatus::Executed);
        assert_eq!(a.mode(), Mode::Idle);
        assert_eq!(a.sightings().len(), 2);
        assert_eq!(a.known_map().count(Cell::Unknown), 0);

        let mut ev = a.step(&w, Some(&cmd(CommandId::ReturnToBase)), tick);
        while resolution(CommandId::ReturnToBase, &ev).is_none() {
            tick += 1;
            ev.extend(a.step(&w, None, tick));
        }
        assert_eq!(execution_status(&cmd(CommandId::ReturnToBase), &ev), FeedbackStatus::Executed);
        assert_eq!(a.pos(), w.base);
        assert_eq!(a.battery(), a.config().battery_capacity);
    }

    #[test]
    fn radius_zero_recon_discovers_obstacles() {
        let w = world("S..#\n.#..\n...#");
        let cfg = AgentConfig {
            sensor_radius: 0,
            ..AgentConfig::default()
        };
        let mut a = AgentState::new(&w, cfg).unwrap();
        let mut ev = a.step(&w, Some(&cmd(CommandId::ReconArea)), 0);
        let mut tick = 1;
        while resolution(CommandId::ReconArea, &ev).is_none() {
            ev.extend(a.step(&w, None, tick));
            tick += 1;
            assert!(tick < 200);
        }
        let region = reachable(&w.map, w.base);
        for p in w.map.positions() {
            if region[p.1 * 4 + p.0] {
                assert_eq!(a.known_map().get(p), Cell::Free);
            }
        }
    }

    #[test]
    fn moves_rejected_during_recon_and_halt_stops() {
        let w = world("S.......\n........\n........\n........\n........\n........");
        let mut a = AgentState::new(&w, AgentConfig::default()).unwrap();
        a.step(&w, Some(&cmd(CommandId::ReconArea)), 0);
        assert_eq!(a.mode(), Mode::Recon);
        let ev = a.step(&w, Some(&cmd(CommandId::MoveSouth)), 1);
        assert_eq!(ev[0].name(), "rejected");
        let ev = a.step(&w, Some(&cmd(CommandId::Halt)), 2);
        assert_eq!(execution_status(&cmd(CommandId::Halt), &ev), FeedbackStatus::Executed);
        assert_eq!(a.mode(), Mode::Idle);
        assert_eq!(a.route().count(), 0);
    }

    #[test]
    fn mark_requires_target_in_view() {
        let w = world("S...\n...T");
        let mut a = AgentState::new(&w, AgentConfig::default()).unwrap();
        let ev = a.step(&w, Some(&cmd(CommandId::MarkTarget)), 1);
        assert_eq!(
            execution_status(&cmd(CommandId::MarkTarget), &ev),
            FeedbackStatus::RecognizedNotExecuted
        );
        a.step(&w, Some(&cmd(CommandId::MoveEast)), 2);
        let ev = a.step(&w, Some(&cmd(CommandId::MarkTarget)), 3);
        assert_eq!(execution_status(&cmd(CommandId::MarkTarget), &ev), FeedbackStatus::Executed);
        let ev = a.step(&w, Some(&cmd(CommandId::MarkTarget)), 4);
        assert_eq!(ev[0].name(), "rejected");
    }

    #[test]
    fn known_map_monotone_and_deterministic() {
        let w = World::random(12, 12, 0.2, 3, 5).unwrap();
        let run = || {
            let mut a = AgentState::new(&w, AgentConfig::default()).unwrap();
            let mut log = Vec::new();
            let mut prev_known = 0;
            for tick in 0..300 {
                let c = (tick % 37 == 0).then(|| cmd(CommandId::ALL[(tick / 37) as usize % 8]));
                let ev = a.step(&w, c.as_ref(), tick);
                let known = a.known_cells();
                assert!(known >= prev_known);
                prev_known = known;
                assert!(w.is_free(a.pos()));
                log.extend(ev.iter().map(AgentEvent::to_kv));
            }
            log
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn event_kv_text() {
        let e = AgentEvent::new(
            4,
            EventKind::Moved {
                x: 1,
                y: 2,
                heading: Heading::N,
            },
        );
        assert_eq!(e.to_kv(), "event=moved tick=4 x=1 y=2 heading=N");
        let json = serde_json::to_string(&e).unwrap();
        assert_eq!(json, r#"{"tick":4,"event":"moved","x":1,"y":2,"heading":"N"}"#);
    }
}
