//! Fair-coin discretisation of the Brownian driver.
//!
//! Each step moves the driver by `±√dt` with probability ½. In recombining
//! mode nodes are identified by their level (and optionally their running
//! maximum, both in level units); in history mode by the full bit history,
//! which the oracle and the measure-valued martingale trees need.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::measures::{DiscreteMeasure, MERGE_TOL};

/// Largest depth accepted in history mode (2^depth leaves).
pub const HISTORY_MAX_DEPTH: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatticeMode {
    Recombining,
    History,
}

fn default_mode() -> LatticeMode {
    LatticeMode::Recombining
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub depth: usize,
    pub dt: f64,
    #[serde(default)]
    pub augment_max: bool,
    #[serde(default = "default_mode")]
    pub mode: LatticeMode,
}

impl LatticeSpec {
    pub fn new(depth: usize, dt: f64, augment_max: bool, mode: LatticeMode) -> Result<Self> {
        let spec = Self {
            depth,
            dt,
            augment_max,
            mode,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn recombining(depth: usize, dt: f64) -> Self {
        Self {
            depth,
            dt,
            augment_max: false,
            mode: LatticeMode::Recombining,
        }
    }

    pub fn history(depth: usize, dt: f64) -> Self {
        Self {
            depth,
            dt,
            augment_max: false,
            mode: LatticeMode::History,
        }
    }

    pub fn with_max(mut self, augment_max: bool) -> Self {
        self.augment_max = augment_max;
        self
    }

    pub fn with_mode(mut self, mode: LatticeMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::InvalidLattice("depth must be at least 1".into()));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidLattice(format!("dt = {} must be positive", self.dt)));
        }
        if self.mode == LatticeMode::History && self.depth > HISTORY_MAX_DEPTH {
            return Err(Error::InvalidLattice(format!(
                "history mode supports depth <= {HISTORY_MAX_DEPTH}, got {}",
                self.depth
            )));
        }
        Ok(())
    }

    pub fn time_of(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    /// Grid of step times `dt, 2dt, …, depth·dt`.
    pub fn step_times(&self) -> Vec<f64> {
        (1..=self.depth).map(|s| self.time_of(s)).collect()
    }

    /// Step index of a time on the grid, rejecting off-grid times and
    /// times outside `(0, depth·dt]`.
    pub fn step_of_time(&self, t: f64) -> Result<usize> {
        let k = (t / self.dt).round();
        let tol = MERGE_TOL * t.abs().max(1.0);
        if !(k >= 1.0) || (k * self.dt - t).abs() > tol {
            return Err(Error::Coverage(format!(
                "time {t} is not a positive multiple of dt = {}",
                self.dt
            )));
        }
        let k = k as usize;
        if k > self.depth {
            return Err(Error::Coverage(format!(
                "time {t} lies beyond the lattice horizon {}",
                self.time_of(self.depth)
            )));
        }
        Ok(k)
    }

    /// Steps of the atoms of `mu`, increasing.
    pub fn atom_steps(&self, mu: &DiscreteMeasure<f64>) -> Result<Vec<usize>> {
        mu.atoms().iter().map(|t| self.step_of_time(*t)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeState {
    Level(i32),
    LevelMax { level: i32, max: i32 },
    /// Bit `j` set means the move at step `j + 1` went up.
    History(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub step: u32,
    pub state: NodeState,
}

impl NodeId {
    pub fn step(&self) -> usize {
        self.step as usize
    }

    pub fn history(step: usize, bits: u32) -> Self {
        Self {
            step: step as u32,
            state: NodeState::History(bits),
        }
    }

    pub fn bits(&self) -> Option<u32> {
        match self.state {
            NodeState::History(b) => Some(b),
            _ => None,
        }
    }

    /// Level in units of `√dt`.
    pub fn level(&self) -> i32 {
        match self.state {
            NodeState::Level(l) | NodeState::LevelMax { level: l, .. } => l,
            NodeState::History(bits) => {
                let ups = (bits & mask(self.step())).count_ones() as i32;
                2 * ups - self.step as i32
            }
        }
    }

    /// Running maximum of the level (at least 0).
    pub fn max_level(&self) -> i32 {
        match self.state {
            NodeState::Level(l) => l.max(0),
            NodeState::LevelMax { max, .. } => max,
            NodeState::History(bits) => {
                let mut level = 0;
                let mut best = 0;
                for j in 0..self.step() {
                    level += if bits >> j & 1 == 1 { 1 } else { -1 };
                    best = best.max(level);
                }
                best
            }
        }
    }

    /// History node of the same path at an earlier step.
    pub fn ancestor(&self, step: usize) -> Option<NodeId> {
        match self.state {
            NodeState::History(bits) if step <= self.step() => {
                Some(NodeId::history(step, bits & mask(step)))
            }
            _ => None,
        }
    }
}

fn mask(step: usize) -> u32 {
    if step >= 32 {
        u32::MAX
    } else {
        (1u32 << step) - 1
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.state {
            NodeState::Level(l) => write!(f, "r/{}/{}", self.step, l),
            NodeState::LevelMax { level, max } => write!(f, "a/{}/{}/{}", self.step, level, max),
            NodeState::History(bits) => {
                write!(f, "h/")?;
                for j in 0..self.step() {
                    write!(f, "{}", if bits >> j & 1 == 1 { 'u' } else { 'd' })?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for NodeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("malformed node id {s:?}"));
        let parts: Vec<&str> = s.split('/').collect();
        let int = |x: &str| x.parse::<i64>().map_err(|_| bad());
        match parts.as_slice() {
            ["h", path] => {
                if path.len() > 32 {
                    return Err(bad());
                }
                let mut bits = 0u32;
                for (j, c) in path.chars().enumerate() {
                    match c {
                        'u' => bits |= 1 << j,
                        'd' => {}
                        _ => return Err(bad()),
                    }
                }
                Ok(NodeId::history(path.len(), bits))
            }
            ["r", step, level] => Ok(NodeId {
                step: u32::try_from(int(step)?).map_err(|_| bad())?,
                state: NodeState::Level(int(level)? as i32),
            }),
            ["a", step, level, max] => Ok(NodeId {
                step: u32::try_from(int(step)?).map_err(|_| bad())?,
                state: NodeState::LevelMax {
                    level: int(level)? as i32,
                    max: int(max)? as i32,
                },
            }),
            _ => Err(bad()),
        }
    }
}

impl Serialize for NodeId {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Driver state observed at a node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathState {
    /// Driver value `level·√dt`.
    pub w: f64,
    /// Running maximum, present on augmented lattices.
    pub m: Option<f64>,
    pub t: f64,
}

/// Built lattice: node lists per step and reverse indices.
#[derive(Clone, Debug)]
pub struct Lattice {
    spec: LatticeSpec,
    nodes: Vec<Vec<NodeId>>,
    index: Vec<HashMap<NodeId, usize>>,
}

impl Lattice {
    pub fn build(spec: LatticeSpec) -> Result<Self> {
        spec.validate()?;
        let mut nodes = Vec::with_capacity(spec.depth + 1);
        for step in 0..=spec.depth {
            nodes.push(enumerate_step(&spec, step));
        }
        let index = match spec.mode {
            // history nodes are indexed by their bit pattern directly
            LatticeMode::History => Vec::new(),
            LatticeMode::Recombining => nodes
                .iter()
                .map(|level| level.iter().enumerate().map(|(i, n)| (*n, i)).collect())
                .collect(),
        };
        Ok(Self { spec, nodes, index })
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn depth(&self) -> usize {
        self.spec.depth
    }

    pub fn dt(&self) -> f64 {
        self.spec.dt
    }

    pub fn mode(&self) -> LatticeMode {
        self.spec.mode
    }

    pub fn is_history(&self) -> bool {
        self.spec.mode == LatticeMode::History
    }

    pub fn root(&self) -> NodeId {
        self.nodes[0][0]
    }

    pub fn nodes_at(&self, step: usize) -> &[NodeId] {
        &self.nodes[step]
    }

    pub fn index_of(&self, node: &NodeId) -> Option<usize> {
        let step = node.step();
        if step > self.spec.depth {
            return None;
        }
        match (self.spec.mode, node.state) {
            (LatticeMode::History, NodeState::History(bits)) => {
                (bits & !mask(step) == 0).then_some(bits as usize)
            }
            (LatticeMode::Recombining, _) => self.index[step].get(node).copied(),
            _ => None,
        }
    }

    pub fn contains(&self, node: &NodeId) -> bool {
        self.index_of(node).is_some()
    }

    fn check(&self, node: &NodeId) -> Result<()> {
        if self.contains(node) {
            Ok(())
        } else {
            Err(Error::ForeignNode {
                node: node.to_string(),
                reason: format!("not reachable on {:?}", self.spec),
            })
        }
    }

    /// Up and down successors, each reached with probability ½.
    pub fn children(&self, node: &NodeId) -> Result<(NodeId, NodeId)> {
        self.check(node)?;
        if node.step() >= self.spec.depth {
            return Err(Error::NoChildren(node.to_string()));
        }
        let step = node.step + 1;
        Ok(match node.state {
            NodeState::Level(l) => (
                NodeId { step, state: NodeState::Level(l + 1) },
                NodeId { step, state: NodeState::Level(l - 1) },
            ),
            NodeState::LevelMax { level, max } => (
                NodeId {
                    step,
                    state: NodeState::LevelMax { level: level + 1, max: max.max(level + 1) },
                },
                NodeId {
                    step,
                    state: NodeState::LevelMax { level: level - 1, max },
                },
            ),
            NodeState::History(bits) => (
                NodeId::history(step as usize, bits | 1 << node.step),
                NodeId::history(step as usize, bits),
            ),
        })
    }

    /// Probability of reaching `node` from the root.
    pub fn node_prob(&self, node: &NodeId) -> f64 {
        let n = node.step();
        let half_n = 0.5f64.powi(n as i32);
        match node.state {
            NodeState::History(_) => half_n,
            NodeState::Level(l) => binom(n, (n as i64 + l as i64) / 2) * half_n,
            NodeState::LevelMax { level, max } => {
                // reflection: #paths ending at l with max >= m is C(n, (n + 2m - l)/2)
                let reach = |m: i64| binom(n, (n as i64 + 2 * m - level as i64) / 2);
                (reach(max as i64) - reach(max as i64 + 1)) * half_n
            }
        }
    }

    pub fn state(&self, node: &NodeId) -> PathState {
        let sq = self.spec.dt.sqrt();
        PathState {
            w: node.level() as f64 * sq,
            m: self.spec.augment_max.then(|| node.max_level() as f64 * sq),
            t: self.spec.time_of(node.step()),
        }
    }

    /// Total number of nodes across all steps.
    pub fn size(&self) -> usize {
        self.nodes.iter().map(Vec::len).sum()
    }
}

fn enumerate_step(spec: &LatticeSpec, step: usize) -> Vec<NodeId> {
    let s = step as i32;
    let id = |state| NodeId { step: step as u32, state };
    match spec.mode {
        LatticeMode::History => (0..1u32 << step).map(|b| NodeId::history(step, b)).collect(),
        LatticeMode::Recombining if !spec.augment_max => {
            (0..=s).map(|ups| id(NodeState::Level(2 * ups - s))).collect()
        }
        LatticeMode::Recombining => {
            let mut out = Vec::new();
            for ups in 0..=s {
                let level = 2 * ups - s;
                for max in level.max(0)..=ups {
                    out.push(id(NodeState::LevelMax { level, max }));
                }
            }
            out
        }
    }
}

/// `C(n, k)` as a float, zero outside `0..=n`.
pub fn binom(n: usize, k: i64) -> f64 {
    if k < 0 || k as usize > n {
        return 0.0;
    }
    let k = (k as usize).min(n - k as usize);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc.round()
}
