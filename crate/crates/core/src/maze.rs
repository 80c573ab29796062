//! Procedural gridworld: generation, dynamics, the egocentric observation
//! window, goal scheduling and the BFS expert.

use std::collections::VecDeque;

use byteorder::{LittleEndian, WriteBytesExt};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum MazeError {
    #[error("maze generation: {0}")]
    Generation(String),
    #[error("maze contract violation: {0}")]
    Contract(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cell {
    Wall,
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    North,
    East,
    South,
    West,
}

impl Action {
    /// Expansion and tie-break order.
    pub const ALL: [Action; 4] = [Action::North, Action::East, Action::South, Action::West];
    pub const COUNT: usize = 4;
    /// Token id of "no previous action" at the start of a stream.
    pub const START_TOKEN: u8 = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn delta(self) -> (isize, isize) {
        match self {
            Action::North => (0, -1),
            Action::East => (1, 0),
            Action::South => (0, 1),
            Action::West => (-1, 0),
        }
    }

    pub fn token(prev: Option<Action>) -> u8 {
        prev.map_or(Self::START_TOKEN, |a| a as u8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pos {
    pub x: usize,
    pub y: usize,
}

impl Pos {
    pub fn new(x: usize, y: usize) -> Self {
        Pos { x, y }
    }
}

/// What one window cell looks like to the agent. Encoded as a byte:
/// 0 wall, 1 free, `2 + id` for object `id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    Wall,
    Free,
    Object(u8),
}

impl Category {
    pub fn code(self) -> u8 {
        match self {
            Category::Wall => 0,
            Category::Free => 1,
            Category::Object(id) => 2 + id,
        }
    }

    pub fn from_code(c: u8) -> Category {
        match c {
            0 => Category::Wall,
            1 => Category::Free,
            n => Category::Object(n - 2),
        }
    }

    /// Number of distinct codes for a maze with `n_objects` objects.
    pub fn vocab_size(n_objects: usize) -> usize {
        2 + n_objects
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Observation {
    /// `(2r+1)²` category codes, row-major from the north-west corner.
    pub window: Vec<u8>,
    pub goal_id: u8,
    /// Previous action token; [`Action::START_TOKEN`] at a stream start.
    pub prev_action: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reached_goal: bool,
    pub step_index: u64,
}

pub const DEFAULT_SIZE: usize = 15;
pub const DEFAULT_OBJECTS: usize = 6;
pub const DEFAULT_RADIUS: usize = 2;
/// Share of separating walls knocked out after carving the perfect maze.
pub const LOOP_FRACTION: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MazeEnv {
    width: usize,
    height: usize,
    grid: Vec<Cell>,
    objects: Vec<Pos>,
    spawn: Pos,
    agent: Pos,
    seed: u64,
    radius: usize,
    goal: Option<u8>,
    prev_action: Option<Action>,
    step_index: u64,
}

/// Carve a maze with a recursive backtracker on the odd lattice, knock out
/// a share of the separating walls, then place objects and the spawn.
pub fn generate_maze(
    seed: u64,
    width: usize,
    height: usize,
    n_objects: usize,
) -> Result<MazeEnv, MazeError> {
    if width.is_multiple_of(2) || height.is_multiple_of(2) || width < 7 || height < 7 {
        return Err(MazeError::Generation(format!(
            "width and height must be odd and >= 7, got {width}x{height}"
        )));
    }
    if n_objects > 254 {
        return Err(MazeError::Generation(format!("{n_objects} objects exceed the id range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = vec![Cell::Wall; width * height];
    let idx = |x: usize, y: usize| y * width + x;

    let (lw, lh) = ((width - 1) / 2, (height - 1) / 2);
    let mut visited = vec![false; lw * lh];
    let start = (rng.gen_range(0..lw), rng.gen_range(0..lh));
    visited[start.1 * lw + start.0] = true;
    grid[idx(2 * start.0 + 1, 2 * start.1 + 1)] = Cell::Free;
    let mut stack = vec![start];
    while let Some(&(cx, cy)) = stack.last() {
        let mut options = Vec::with_capacity(4);
        for a in Action::ALL {
            let (dx, dy) = a.delta();
            let (nx, ny) = (cx as isize + dx, cy as isize + dy);
            if nx >= 0 && ny >= 0 && (nx as usize) < lw && (ny as usize) < lh {
                let (nx, ny) = (nx as usize, ny as usize);
                if !visited[ny * lw + nx] {
                    options.push((nx, ny));
                }
            }
        }
        match options.choose(&mut rng) {
            Some(&(nx, ny)) => {
                visited[ny * lw + nx] = true;
                grid[idx(2 * nx + 1, 2 * ny + 1)] = Cell::Free;
                grid[idx(cx + nx + 1, cy + ny + 1)] = Cell::Free;
                stack.push((nx, ny));
            }
            None => {
                stack.pop();
            }
        }
    }

    // Walls that separate two lattice cells: exactly one coordinate even.
    let separators: Vec<usize> = (1..height - 1)
        .flat_map(|y| (1..width - 1).map(move |x| (x, y)))
        .filter(|&(x, y)| (x % 2 == 0) != (y % 2 == 0))
        .map(|(x, y)| idx(x, y))
        .filter(|&i| grid[i] == Cell::Wall)
        .collect();
    let n_remove = (separators.len() as f64 * LOOP_FRACTION).round() as usize;
    for i in sample(&mut rng, separators.len(), n_remove).into_iter() {
        grid[separators[i]] = Cell::Free;
    }

    let free: Vec<Pos> = (0..height)
        .flat_map(|y| (0..width).map(move |x| Pos::new(x, y)))
        .filter(|p| grid[idx(p.x, p.y)] == Cell::Free)
        .collect();
    if n_objects + 1 > free.len() {
        return Err(MazeError::Generation(format!(
            "{n_objects} objects plus a spawn need {} free cells, maze has {}",
            n_objects + 1,
            free.len()
        )));
    }
    let picks = sample(&mut rng, free.len(), n_objects + 1).into_vec();
    let objects: Vec<Pos> = picks[..n_objects].iter().map(|&i| free[i]).collect();
    let spawn = free[picks[n_objects]];
    Ok(MazeEnv {
        width,
        height,
        grid,
        objects,
        spawn,
        agent: spawn,
        seed,
        radius: DEFAULT_RADIUS,
        goal: None,
        prev_action: None,
        step_index: 0,
    })
}

/// Draw the next goal uniformly over object ids other than `previous`.
pub fn next_goal<R: Rng + ?Sized>(
    goal_rng: &mut R,
    n_objects: usize,
    previous: Option<u8>,
) -> Result<u8, MazeError> {
    if n_objects < 2 {
        return Err(MazeError::Contract(format!(
            "goal scheduling needs at least 2 objects, got {n_objects}"
        )));
    }
    Ok(match previous {
        None => goal_rng.gen_range(0..n_objects) as u8,
        Some(p) => {
            let r = goal_rng.gen_range(0..n_objects - 1) as u8;
            if r >= p {
                r + 1
            } else {
                r
            }
        }
    })
}

impl MazeEnv {
    /// Build an environment from a character map: `#` wall, `.` free,
    /// `0`-`9` object ids (on free cells), `A` agent spawn.
    pub fn from_ascii(rows: &[&str], seed: u64) -> Result<MazeEnv, MazeError> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if height == 0 || rows.iter().any(|r| r.len() != width) {
            return Err(MazeError::Generation("ragged or empty map".into()));
        }
        let mut grid = vec![Cell::Wall; width * height];
        let mut objects: Vec<(u8, Pos)> = Vec::new();
        let mut spawn = None;
        for (y, row) in rows.iter().enumerate() {
            for (x, ch) in row.chars().enumerate() {
                let p = Pos::new(x, y);
                grid[y * width + x] = match ch {
                    '#' => Cell::Wall,
                    '.' => Cell::Free,
                    'A' => {
                        spawn = Some(p);
                        Cell::Free
                    }
                    d if d.is_ascii_digit() => {
                        objects.push((d as u8 - b'0', p));
                        Cell::Free
                    }
                    other => return Err(MazeError::Generation(format!("unknown map char {other:?}"))),
                };
            }
        }
        objects.sort();
        if objects.iter().enumerate().any(|(i, (id, _))| *id as usize != i) {
            return Err(MazeError::Generation("object ids must be 0..n without gaps".into()));
        }
        let spawn = spawn.ok_or_else(|| MazeError::Generation("map has no agent".into()))?;
        Ok(MazeEnv {
            width,
            height,
            grid,
            objects: objects.into_iter().map(|(_, p)| p).collect(),
            spawn,
            agent: spawn,
            seed,
            radius: DEFAULT_RADIUS,
            goal: None,
            prev_action: None,
            step_index: 0,
        })
    }

    pub fn with_radius(mut self, radius: usize) -> Self {
        self.radius = radius;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn objects(&self) -> &[Pos] {
        &self.objects
    }

    pub fn spawn(&self) -> Pos {
        self.spawn
    }

    pub fn agent(&self) -> Pos {
        self.agent
    }

    pub fn goal(&self) -> Option<u8> {
        self.goal
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn cell(&self, p: Pos) -> Cell {
        self.grid[p.y * self.width + p.x]
    }

    pub fn is_free(&self, p: Pos) -> bool {
        p.x < self.width && p.y < self.height && self.cell(p) == Cell::Free
    }

    pub fn free_cells(&self) -> Vec<Pos> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| Pos::new(x, y)))
            .filter(|&p| self.cell(p) == Cell::Free)
            .collect()
    }

    pub fn object_cell(&self, id: u8) -> Option<Pos> {
        self.objects.get(id as usize).copied()
    }

    /// Issue a new goal. Only the goal changes; layout and pose persist.
    pub fn set_goal(&mut self, goal: u8) -> Result<(), MazeError> {
        if goal as usize >= self.objects.len() {
            return Err(MazeError::Contract(format!(
                "goal {goal} outside {} objects",
                self.objects.len()
            )));
        }
        self.goal = Some(goal);
        Ok(())
    }

    pub fn at_goal(&self) -> bool {
        self.goal.and_then(|g| self.object_cell(g)) == Some(self.agent)
    }

    fn neighbor(&self, p: Pos, a: Action) -> Option<Pos> {
        let (dx, dy) = a.delta();
        let (nx, ny) = (p.x as isize + dx, p.y as isize + dy);
        if nx < 0 || ny < 0 {
            return None;
        }
        let q = Pos::new(nx as usize, ny as usize);
        self.is_free(q).then_some(q)
    }

    fn category_at(&self, x: isize, y: isize) -> Category {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return Category::Wall;
        }
        let p = Pos::new(x as usize, y as usize);
        if self.cell(p) == Cell::Wall {
            return Category::Wall;
        }
        match self.objects.iter().position(|&o| o == p) {
            Some(id) => Category::Object(id as u8),
            None => Category::Free,
        }
    }

    /// Egocentric window around the agent plus goal and previous action.
    pub fn observe(&self) -> Observation {
        let r = self.radius as isize;
        let mut window = Vec::with_capacity((2 * self.radius + 1).pow(2));
        for dy in -r..=r {
            for dx in -r..=r {
                window.push(
                    self.category_at(self.agent.x as isize + dx, self.agent.y as isize + dy)
                        .code(),
                );
            }
        }
        Observation {
            window,
            goal_id: self.goal.unwrap_or(0),
            prev_action: Action::token(self.prev_action),
        }
    }

    /// Move one cell unless the target is a wall.
    pub fn step(&mut self, action: Action) -> StepOutcome {
        if let Some(next) = self.neighbor(self.agent, action) {
            self.agent = next;
        }
        self.prev_action = Some(action);
        self.step_index += 1;
        StepOutcome {
            observation: self.observe(),
            reached_goal: self.at_goal(),
            step_index: self.step_index,
        }
    }

    /// BFS distances from `from` to every cell (`usize::MAX` if unreachable).
    pub fn distances_from(&self, from: Pos) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.width * self.height];
        if !self.is_free(from) {
            return dist;
        }
        dist[from.y * self.width + from.x] = 0;
        let mut queue = VecDeque::from([from]);
        while let Some(p) = queue.pop_front() {
            let d = dist[p.y * self.width + p.x];
            for a in Action::ALL {
                if let Some(q) = self.neighbor(p, a) {
                    let slot = &mut dist[q.y * self.width + q.x];
                    if *slot == usize::MAX {
                        *slot = d + 1;
                        queue.push_back(q);
                    }
                }
            }
        }
        dist
    }

    pub fn shortest_path_len(&self, from: Pos, to: Pos) -> Result<usize, MazeError> {
        if !self.is_free(from) || !self.is_free(to) {
            return Err(MazeError::Contract(format!("{from:?} or {to:?} is not a free cell")));
        }
        match self.distances_from(from)[to.y * self.width + to.x] {
            usize::MAX => Err(MazeError::Contract(format!("{to:?} unreachable from {from:?}"))),
            d => Ok(d),
        }
    }

    /// First move of a shortest path to object `goal`; ties go to the
    /// earliest action in N, E, S, W order.
    pub fn expert_action(&self, goal: u8) -> Result<Action, MazeError> {
        let target = self
            .object_cell(goal)
            .ok_or_else(|| MazeError::Contract(format!("unknown goal {goal}")))?;
        if target == self.agent {
            return Err(MazeError::Contract(
                "agent already stands on the goal; a new goal must be issued".into(),
            ));
        }
        let dist = self.distances_from(target);
        let here = dist[self.agent.y * self.width + self.agent.x];
        if here == usize::MAX {
            return Err(MazeError::Contract(format!("goal {goal} unreachable")));
        }
        Action::ALL
            .into_iter()
            .find(|&a| {
                self.neighbor(self.agent, a)
                    .is_some_and(|q| dist[q.y * self.width + q.x] + 1 == here)
            })
            .ok_or_else(|| MazeError::Contract("no descending neighbor".into()))
    }

    /// True when every free cell is reachable from the spawn.
    pub fn is_connected(&self) -> bool {
        let dist = self.distances_from(self.spawn);
        self.free_cells()
            .iter()
            .all(|p| dist[p.y * self.width + p.x] != usize::MAX)
    }

    /// Canonical little-endian bytes: width, height, cells, object table,
    /// spawn, seed.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.grid.len() + 8 * self.objects.len());
        let w = &mut out;
        w.write_u32::<LittleEndian>(self.width as u32).unwrap();
        w.write_u32::<LittleEndian>(self.height as u32).unwrap();
        for c in &self.grid {
            w.push(match c {
                Cell::Wall => 0,
                Cell::Free => 1,
            });
        }
        w.write_u32::<LittleEndian>(self.objects.len() as u32).unwrap();
        for o in &self.objects {
            w.write_u32::<LittleEndian>(o.x as u32).unwrap();
            w.write_u32::<LittleEndian>(o.y as u32).unwrap();
        }
        w.write_u32::<LittleEndian>(self.spawn.x as u32).unwrap();
        w.write_u32::<LittleEndian>(self.spawn.y as u32).unwrap();
        w.write_u64::<LittleEndian>(self.seed).unwrap();
        out
    }

    pub fn canonical_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_bytes()))
    }

    /// Rebuild from [`MazeEnv::canonical_bytes`]; agent at the spawn.
    pub fn from_canonical_bytes(bytes: &[u8], radius: usize) -> Result<MazeEnv, MazeError> {
        use byteorder::ReadBytesExt;
        let mut r = bytes;
        let bad = |e: std::io::Error| MazeError::Generation(format!("env decode: {e}"));
        let width = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let height = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        if r.len() < width * height {
            return Err(MazeError::Generation("env decode: grid truncated".into()));
        }
        let (cells, mut rest) = r.split_at(width * height);
        let grid = cells
            .iter()
            .map(|&b| match b {
                0 => Ok(Cell::Wall),
                1 => Ok(Cell::Free),
                other => Err(MazeError::Generation(format!("env decode: cell byte {other}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let n = rest.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let mut objects = Vec::with_capacity(n);
        for _ in 0..n {
            let x = rest.read_u32::<LittleEndian>().map_err(bad)? as usize;
            let y = rest.read_u32::<LittleEndian>().map_err(bad)? as usize;
            objects.push(Pos::new(x, y));
        }
        let sx = rest.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let sy = rest.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let seed = rest.read_u64::<LittleEndian>().map_err(bad)?;
        if !rest.is_empty() {
            return Err(MazeError::Generation("env decode: trailing bytes".into()));
        }
        let spawn = Pos::new(sx, sy);
        Ok(MazeEnv {
            width,
            height,
            grid,
            objects,
            spawn,
            agent: spawn,
            seed,
            radius,
            goal: None,
            prev_action: None,
            step_index: 0,
        })
    }
}

/// Per-index seed derived from a master seed.
pub fn derive_seed(master: u64, stream: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stream.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
