//! Backward induction over simplex-valued martingales.
//!
//! For a constraint with atoms at steps `s₁ < … < s_r`, the state at a node
//! is the conditional law `y` of the stopping time over the atoms not yet
//! passed. Between atoms `y` moves as a one-step martingale; at an atom step
//! a fraction `y₁` stops and the rest is renormalized.
//!
//! Two tables are kept per step `n`: the value before the atom at `n` is
//! settled (over atoms at or after `n`) and the continuation value after it
//! (over atoms strictly after `n`). They coincide at steps without an atom.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::CostSpec;
use crate::error::{Error, Result};
use crate::grid::{atom_boundary, one_step_sup_with_argmax, SimplexGrid};
use crate::lattice::{Lattice, LatticeMode, LatticeSpec, NodeId, NodeState};
use crate::measures::DiscreteMeasure;
use crate::mvm::MvmTree;

pub const MAX_ATOMS: usize = 4;
pub const STRONG_MAX_DEPTH: usize = 12;
/// Bound on the scaling-identity residual when checking is enabled.
pub const SCALING_TOL: f64 = 1e-12;
const STRONG_MAX_STATES: usize = 2_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub resolution: u32,
    /// Recompute every atom-boundary value in floating point through the
    /// renormalized form and fail if it drifts from the exact evaluation.
    #[serde(default)]
    pub check_scaling: bool,
}

impl SolveOptions {
    pub fn new(resolution: u32) -> Self {
        Self {
            resolution,
            check_scaling: false,
        }
    }

    pub fn with_scaling_check(mut self) -> Self {
        self.check_scaling = true;
        self
    }
}

#[derive(Clone, Debug)]
pub struct ValueTable {
    spec: LatticeSpec,
    lattice: Lattice,
    cost: CostSpec,
    mu: DiscreteMeasure<f64>,
    atom_steps: Vec<usize>,
    resolution: u32,
    /// `grids[k − 1]` has `k` coordinates.
    grids: Vec<SimplexGrid>,
    pre: Vec<Vec<Vec<f64>>>,
    post: Vec<Option<Vec<Vec<f64>>>>,
    argmax: Vec<Vec<Vec<u32>>>,
    value: f64,
    lipschitz: f64,
    slack: f64,
    scaling_residual: Option<f64>,
}

/// Solves the constrained stopping problem on the recombining lattice with
/// the geometry of `spec`, augmented by the running maximum when the cost
/// needs it.
pub fn solve(spec: &LatticeSpec, cost: &CostSpec, mu: &DiscreteMeasure<f64>, opts: &SolveOptions) -> Result<ValueTable> {
    spec.validate()?;
    if opts.resolution < 1 {
        return Err(Error::Config("resolution must be at least 1".into()));
    }
    if mu.len() > MAX_ATOMS {
        return Err(Error::Config(format!(
            "{} atoms in the constraint; the solver supports at most {MAX_ATOMS}",
            mu.len()
        )));
    }
    let atom_steps = spec.atom_steps(mu)?;
    let last = *atom_steps.last().expect("measure is nonempty");
    let internal = LatticeSpec::new(
        last,
        spec.dt,
        spec.augment_max || cost.requires_max(),
        LatticeMode::Recombining,
    )?;
    cost.check_lattice(&internal)?;
    let lattice = Lattice::build(internal)?;
    let r = atom_steps.len();
    let res = opts.resolution;
    let grids = (1..=r).map(|k| SimplexGrid::new(k, res)).collect::<Result<Vec<_>>>()?;

    let k_post = |n: usize| atom_steps.iter().filter(|s| **s > n).count();
    let mut pre: Vec<Vec<Vec<f64>>> = vec![Vec::new(); last + 1];
    let mut post: Vec<Option<Vec<Vec<f64>>>> = vec![None; last + 1];
    let mut argmax: Vec<Vec<Vec<u32>>> = vec![Vec::new(); last];
    let mut scaling: f64 = 0.0;

    pre[last] = lattice
        .nodes_at(last)
        .iter()
        .map(|n| Ok(vec![cost.evaluate(&lattice.state(n))?]))
        .collect::<Result<_>>()?;

    for n in (0..last).rev() {
        let kp = k_post(n);
        let grid = &grids[kp - 1];
        let atom_here = n > 0 && atom_steps.contains(&n);
        let mut post_n = Vec::with_capacity(lattice.nodes_at(n).len());
        let mut pre_n = Vec::with_capacity(lattice.nodes_at(n).len());
        let mut arg_n = Vec::with_capacity(lattice.nodes_at(n).len());
        for node in lattice.nodes_at(n) {
            let (up, down) = lattice.children(node)?;
            let vu = &pre[n + 1][lattice.index_of(&up).expect("child")];
            let vd = &pre[n + 1][lattice.index_of(&down).expect("child")];
            let (vals, arg) = one_step_sup_with_argmax(grid, vu, vd);
            arg_n.push(arg);
            if atom_here {
                let c = cost.evaluate(&lattice.state(node))?;
                let (t, residual) = boundary_values(&grids[kp], grid, c, &vals, opts.check_scaling);
                scaling = scaling.max(residual);
                pre_n.push(t);
                post_n.push(vals);
            } else {
                pre_n.push(vals);
            }
        }
        pre[n] = pre_n;
        if atom_here {
            post[n] = Some(post_n);
        }
        argmax[n] = arg_n;
    }

    if opts.check_scaling && scaling > SCALING_TOL {
        return Err(Error::Numerical(format!(
            "scaling identity violated at an atom boundary: residual {scaling:e}"
        )));
    }

    let value = grids[r - 1].interpolate(&pre[0][0], mu.weights());
    let mut table = ValueTable {
        spec: spec.clone(),
        lattice,
        cost: cost.clone(),
        mu: mu.clone(),
        atom_steps,
        resolution: res,
        grids,
        pre,
        post,
        argmax,
        value,
        lipschitz: 0.0,
        slack: 0.0,
        scaling_residual: opts.check_scaling.then_some(scaling),
    };
    table.lipschitz = table.estimate_lipschitz();
    // each pair restriction and each interpolation costs at most L·diameter
    let steps = (last + r + 1) as f64;
    table.slack = steps * table.lipschitz * table.grids[r - 1].cell_diameter();
    Ok(table)
}

/// Values at an atom step from the continuation values, one per point of
/// the grid with one more coordinate. Grid points are rational, so the
/// renormalized point is located exactly; with `check` the floating-point
/// [`atom_boundary`] is evaluated too and the largest gap returned.
fn boundary_values(grid_pre: &SimplexGrid, grid_post: &SimplexGrid, cost_now: f64, post: &[f64], check: bool) -> (Vec<f64>, f64) {
    let res = grid_pre.resolution() as u64;
    (0..grid_pre.len())
        .into_par_iter()
        .map(|rank| {
            let y = grid_pre.point(rank);
            let stop = y[0] as u64;
            let v = if stop == res {
                cost_now
            } else {
                let rest: Vec<u64> = y[1..].iter().map(|c| *c as u64).collect();
                let cont: f64 = grid_post
                    .locate_exact(&rest, res - stop)
                    .iter()
                    .map(|(i, w)| w * post[*i])
                    .sum();
                (stop as f64 / res as f64) * cost_now + ((res - stop) as f64 / res as f64) * cont
            };
            let residual = if check {
                (atom_boundary(Some(grid_post), post, cost_now, &grid_pre.point_f64(rank)) - v).abs()
            } else {
                0.0
            };
            (v, residual)
        })
        .collect::<Vec<(f64, f64)>>()
        .into_iter()
        .fold((Vec::with_capacity(grid_pre.len()), 0.0f64), |(mut vs, m), (v, r)| {
            vs.push(v);
            (vs, m.max(r))
        })
}

impl ValueTable {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn slack(&self) -> f64 {
        self.slack
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn scaling_residual(&self) -> Option<f64> {
        self.scaling_residual
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    /// The recombining lattice the table lives on.
    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn cost(&self) -> &CostSpec {
        &self.cost
    }

    pub fn mu(&self) -> &DiscreteMeasure<f64> {
        &self.mu
    }

    pub fn atom_steps(&self) -> &[usize] {
        &self.atom_steps
    }

    fn r(&self) -> usize {
        self.atom_steps.len()
    }

    fn last(&self) -> usize {
        *self.atom_steps.last().expect("nonempty")
    }

    fn atom_index(&self, step: usize) -> Option<usize> {
        self.atom_steps.iter().position(|s| *s == step)
    }

    /// Atoms at or after step `n` (strictly after the root at `n = 0`).
    fn k_pre(&self, n: usize) -> usize {
        self.atom_steps.iter().filter(|s| **s >= n.max(1)).count()
    }

    fn k_post(&self, n: usize) -> usize {
        self.atom_steps.iter().filter(|s| **s > n).count()
    }

    pub fn grid(&self, k: usize) -> &SimplexGrid {
        &self.grids[k - 1]
    }

    pub fn root_grid(&self) -> &SimplexGrid {
        self.grid(self.r())
    }

    pub fn root_values(&self) -> &[f64] {
        &self.pre[0][0]
    }

    /// Node of the table lattice carrying the same driver state.
    pub fn table_node(&self, node: &NodeId) -> Result<NodeId> {
        let step = node.step();
        if step > self.last() {
            return Err(Error::ForeignNode {
                node: node.to_string(),
                reason: "beyond the last atom".into(),
            });
        }
        let state = if self.lattice.spec().augment_max {
            NodeState::LevelMax {
                level: node.level(),
                max: node.max_level(),
            }
        } else {
            NodeState::Level(node.level())
        };
        let id = NodeId {
            step: step as u32,
            state,
        };
        if self.lattice.contains(&id) {
            Ok(id)
        } else {
            Err(Error::ForeignNode {
                node: node.to_string(),
                reason: "no matching state".into(),
            })
        }
    }

    fn index(&self, node: &NodeId) -> Result<usize> {
        let id = self.table_node(node)?;
        Ok(self.lattice.index_of(&id).expect("contained"))
    }

    /// Value at `node` before the atom at its step is settled, for `y` over
    /// the atoms at or after that step.
    pub fn value_at(&self, node: &NodeId, y: &[f64]) -> Result<f64> {
        let n = node.step();
        let k = self.k_pre(n);
        if y.len() != k {
            return Err(Error::Config(format!("expected {k} coordinates, got {}", y.len())));
        }
        Ok(self.grid(k).interpolate(&self.pre[n][self.index(node)?], y))
    }

    /// Continuation value at `node` for `z` over the atoms strictly after it.
    pub fn continuation_at(&self, node: &NodeId, z: &[f64]) -> Result<f64> {
        let n = node.step();
        let k = self.k_post(n);
        if k == 0 {
            return Ok(0.0);
        }
        if z.len() != k {
            return Err(Error::Config(format!("expected {k} coordinates, got {}", z.len())));
        }
        Ok(self.grid(k).interpolate(self.post_values(n, self.index(node)?), z))
    }

    fn post_values(&self, n: usize, idx: usize) -> &[f64] {
        match &self.post[n] {
            Some(p) => &p[idx],
            None => &self.pre[n][idx],
        }
    }

    fn estimate_lipschitz(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for n in 0..=self.last() {
            let g = self.grid(self.k_pre(n).max(1));
            for v in &self.pre[n] {
                worst = worst.max(g.lipschitz(v));
            }
            if let Some(p) = &self.post[n] {
                let g = self.grid(self.k_post(n));
                for v in p {
                    worst = worst.max(g.lipschitz(v));
                }
            }
        }
        worst
    }

    /// Largest midpoint-concavity defect over all stored value functions.
    pub fn concavity_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for n in 0..=self.last() {
            let g = self.grid(self.k_pre(n).max(1));
            for v in &self.pre[n] {
                worst = worst.max(g.concavity_defect(v));
            }
        }
        worst
    }

    /// Every stored value in a fixed order, for digests.
    pub fn raw_values(&self) -> impl Iterator<Item = f64> + '_ {
        let pre = self.pre.iter().flatten().flatten();
        let post = self.post.iter().flatten().flatten().flatten();
        pre.chain(post).copied()
    }

    /// Root value function as CSV: one row per grid point.
    pub fn root_csv(&self) -> String {
        let g = self.root_grid();
        let mut out = String::new();
        for t in self.mu.atoms() {
            out.push_str(&format!("y@{t},"));
        }
        out.push_str("value\n");
        for (rank, v) in self.root_values().iter().enumerate() {
            for c in g.point(rank) {
                out.push_str(&format!("{},", *c as f64 / g.resolution() as f64));
            }
            out.push_str(&format!("{v}\n"));
        }
        out
    }
}

/// Policy attaining the table value: a measure-valued martingale on the
/// history lattice with root `mu`.
///
/// Each node carries a mixture of grid points. Points follow their argmax
/// split to the children; at atom steps the renormalized continuation is
/// expanded into the vertices of its interpolation cell, so the realized
/// objective equals the interpolated table value.
pub fn extract_policy(table: &ValueTable, lattice: &Lattice, mu: &DiscreteMeasure<f64>) -> Result<MvmTree> {
    let same = mu.len() == table.mu.len()
        && mu
            .iter()
            .zip(table.mu.iter())
            .all(|((a, w), (b, v))| (a - b).abs() < 1e-9 && (w - v).abs() < 1e-12);
    if !same {
        return Err(Error::Config("policy requested for a measure the table was not solved for".into()));
    }
    extract_policy_from(table, lattice, &lattice.root(), mu.weights())
}

/// Continuation policy below `node` for the conditional law `z` over the
/// atoms strictly after the node's time. Coordinates of earlier atoms are
/// zero in the output.
pub fn extract_policy_from(table: &ValueTable, lattice: &Lattice, node: &NodeId, z: &[f64]) -> Result<MvmTree> {
    if !lattice.is_history() {
        return Err(Error::Config("policies are written on a history-mode lattice".into()));
    }
    let ls = lattice.spec();
    if (ls.dt - table.spec.dt).abs() > 1e-12 || ls.depth < table.last() {
        return Err(Error::Config("policy lattice does not match the solved geometry".into()));
    }
    if !lattice.contains(node) {
        return Err(Error::ForeignNode {
            node: node.to_string(),
            reason: "not on the policy lattice".into(),
        });
    }
    let n0 = node.step();
    let kp = table.k_post(n0);
    if kp == 0 {
        return Err(Error::Config(format!("no atoms remain after {node}")));
    }
    if z.len() != kp {
        return Err(Error::Config(format!("expected {kp} coordinates, got {}", z.len())));
    }
    let r = table.r();
    let comps = table.grid(kp).locate(z);
    let depth = ls.depth;
    let last = table.last();

    // (frozen past masses, mixture over the current grid)
    type Slot = (Vec<f64>, Vec<(usize, f64)>);
    let mut current: Vec<Slot> = vec![(vec![0.0; r], comps)];
    let mut levels: Vec<Vec<f64>> = Vec::with_capacity(depth - n0 + 1);
    for s in n0..=depth {
        let width = 1usize << (s - n0);
        let mut level = vec![0.0; width * r];
        let mut next: Vec<Slot> = if s < depth {
            vec![(Vec::new(), Vec::new()); width * 2]
        } else {
            Vec::new()
        };
        for (k, (mut past, mut comps)) in current.into_iter().enumerate() {
            let hist = NodeId::history(s, node.bits().expect("history") | (k as u32) << n0);
            if s > n0 && s <= last {
                if let Some(i) = table.atom_index(s) {
                    let g = table.grid(table.k_pre(s));
                    let res = g.resolution() as u64;
                    let kp = table.k_post(s);
                    let mut merged: BTreeMap<usize, f64> = BTreeMap::new();
                    for (rank, lambda) in comps {
                        let y = g.point(rank);
                        let stop = y[0] as u64;
                        past[i] += lambda * stop as f64 / res as f64;
                        if stop < res && kp > 0 {
                            let rest: Vec<u64> = y[1..].iter().map(|c| *c as u64).collect();
                            let alive = lambda * (res - stop) as f64 / res as f64;
                            for (v, w) in table.grid(kp).locate_exact(&rest, res - stop) {
                                *merged.entry(v).or_default() += alive * w;
                            }
                        }
                    }
                    comps = merged.into_iter().collect();
                }
            }
            let kp = table.k_post(s);
            let offset = r - kp;
            let w = &mut level[k * r..(k + 1) * r];
            w.copy_from_slice(&past);
            if kp > 0 {
                let g = table.grid(kp);
                let res = g.resolution() as f64;
                for (rank, lambda) in &comps {
                    for (j, c) in g.point(*rank).iter().enumerate() {
                        w[offset + j] += lambda * *c as f64 / res;
                    }
                }
            }
            if s < depth {
                let up_k = k | 1 << (s - n0);
                let (mut up, mut down) = (Vec::new(), Vec::new());
                if s < last && kp > 0 {
                    let g = table.grid(kp);
                    let idx = table.index(&hist)?;
                    for (rank, lambda) in &comps {
                        let a = table.argmax[s][idx][*rank] as usize;
                        let b: Vec<u32> = g
                            .point(*rank)
                            .iter()
                            .zip(g.point(a))
                            .map(|(y, a)| 2 * y - a)
                            .collect();
                        up.push((a, *lambda));
                        down.push((g.rank(&b), *lambda));
                    }
                }
                next[up_k] = (past.clone(), merge(up));
                next[k] = (past, merge(down));
            }
        }
        levels.push(level);
        current = next;
    }
    MvmTree::from_fn(lattice, table.mu.atoms().to_vec(), *node, |n| {
        let d = n.step() - n0;
        let k = (n.bits().expect("history") >> n0) as usize;
        levels[d][k * r..(k + 1) * r].to_vec()
    })
}

fn merge(mut comps: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    comps.sort_by_key(|c| c.0);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(comps.len());
    for (rank, w) in comps {
        match out.last_mut() {
            Some((r, acc)) if *r == rank => *acc += w,
            _ => out.push((rank, w)),
        }
    }
    out
}

/// Intermediate stopping rules for the dynamic programming identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaRule {
    FixedStep(usize),
    FixedTime(f64),
    /// First step with level ≥ `level`, or `cap` if that comes first.
    HitLevel { level: i32, cap: usize },
}

impl ThetaRule {
    fn resolve(&self, spec: &LatticeSpec) -> Result<ThetaRule> {
        let rule = match self {
            ThetaRule::FixedTime(t) => ThetaRule::FixedStep(spec.step_of_time(*t)?),
            other => other.clone(),
        };
        match &rule {
            ThetaRule::FixedStep(n) if *n == 0 || *n > spec.depth => Err(Error::Coverage(format!(
                "theta step {n} must lie in 1..={}",
                spec.depth
            ))),
            ThetaRule::HitLevel { level, cap } if *level < 1 || *cap == 0 || *cap > spec.depth => {
                Err(Error::Coverage(format!(
                    "hitting rule needs level ≥ 1 and cap in 1..={}",
                    spec.depth
                )))
            }
            _ => Ok(rule),
        }
    }

    fn reached(&self, node: &NodeId) -> bool {
        match self {
            ThetaRule::FixedStep(n) => node.step() == *n,
            ThetaRule::HitLevel { level, cap } => node.step() == *cap || node.level() >= *level,
            ThetaRule::FixedTime(_) => unreachable!("resolved to a step"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DppResidual {
    pub via_theta: f64,
    pub root_value: f64,
    pub residual: f64,
    pub slack: f64,
}

/// Recomputes the root value from the table values at `θ`: above `θ` the
/// one-step sups and atom boundaries are redone on the history tree, at
/// `θ` the table supplies `ξ_θ((θ,∞))·v(θ, ·, ξ_θ^{|θ})` together with any
/// atom at `θ` itself. Returns the gap to the table's root value.
pub fn check_dpp(table: &ValueTable, theta: &ThetaRule) -> Result<DppResidual> {
    let theta = theta.resolve(&table.spec)?;
    let r = table.r();
    let grid = table.grid(r);
    let up = table.w_value(&theta, &NodeId::history(1, 1))?;
    let down = table.w_value(&theta, &NodeId::history(1, 0))?;
    let via_theta: f64 = grid
        .locate(table.mu.weights())
        .iter()
        .map(|(v, w)| w * grid.best_pair(*v, &up, &down).0)
        .sum();
    Ok(DppResidual {
        via_theta,
        root_value: table.value,
        residual: via_theta - table.value,
        slack: table.slack,
    })
}

impl ValueTable {
    fn w_value(&self, theta: &ThetaRule, node: &NodeId) -> Result<Vec<f64>> {
        let s = node.step();
        if theta.reached(node) || s >= self.last() {
            return Ok(self.pre[s.min(self.last())][self.index(node)?].clone());
        }
        let bits = node.bits().expect("history");
        let up = self.w_value(theta, &NodeId::history(s + 1, bits | 1 << s))?;
        let down = self.w_value(theta, &NodeId::history(s + 1, bits))?;
        let kp = self.k_post(s);
        let (post, _) = one_step_sup_with_argmax(self.grid(kp), &up, &down);
        if self.atom_index(s).is_some() {
            let c = self.cost.evaluate(&self.lattice.state(&self.table_node(node)?))?;
            Ok(boundary_values(self.grid(kp + 1), self.grid(kp), c, &post, false).0)
        } else {
            Ok(post)
        }
    }
}

/// Best objective over pure (non-randomized) adapted stopping rules with
/// law exactly `mu` on the history lattice; `-∞` when none exists.
///
/// A pure rule is described per subtree by how many nodes stop at each
/// atom; subtrees with the same driver state have the same attainable
/// counts, so the search runs over recombined states.
pub fn strong_value(spec: &LatticeSpec, cost: &CostSpec, mu: &DiscreteMeasure<f64>) -> Result<f64> {
    spec.validate()?;
    if spec.mode != LatticeMode::History {
        return Err(Error::Config("strong value is defined on a history-mode lattice".into()));
    }
    if spec.depth > STRONG_MAX_DEPTH {
        return Err(Error::SizeGuard(format!(
            "depth {} exceeds {STRONG_MAX_DEPTH} for the pure-rule search",
            spec.depth
        )));
    }
    let steps = spec.atom_steps(mu)?;
    let mut target = Vec::with_capacity(steps.len());
    for (s, w) in steps.iter().zip(mu.weights()) {
        let count = w * (1u64 << s) as f64;
        if (count - count.round()).abs() > 1e-9 {
            return Ok(f64::NEG_INFINITY);
        }
        target.push(count.round() as u32);
    }
    let internal = LatticeSpec::new(
        *steps.last().expect("nonempty"),
        spec.dt,
        spec.augment_max || cost.requires_max(),
        LatticeMode::Recombining,
    )?;
    cost.check_lattice(&internal)?;
    let lattice = Lattice::build(internal)?;
    let mut search = PureSearch {
        lattice: &lattice,
        cost,
        steps: &steps,
        target: &target,
        memo: HashMap::new(),
    };
    let root = search.run(&lattice.root())?;
    Ok(root.get(&target).copied().unwrap_or(f64::NEG_INFINITY))
}

type CountMap = HashMap<Vec<u32>, f64>;

struct PureSearch<'a> {
    lattice: &'a Lattice,
    cost: &'a CostSpec,
    steps: &'a [usize],
    target: &'a [u32],
    memo: HashMap<NodeId, CountMap>,
}

impl PureSearch<'_> {
    fn run(&mut self, node: &NodeId) -> Result<CountMap> {
        if let Some(m) = self.memo.get(node) {
            return Ok(m.clone());
        }
        let r = self.steps.len();
        let s = node.step();
        let mut out = CountMap::new();
        let atom = self.steps.iter().position(|x| *x == s);
        if let Some(i) = atom {
            let mut stop = vec![0; r];
            stop[i] = 1;
            if stop[i] <= self.target[i] {
                out.insert(stop, self.cost.evaluate(&self.lattice.state(node))?);
            }
        }
        if atom.is_none_or(|i| i + 1 < r) {
            let (up, down) = self.lattice.children(node)?;
            let mu = self.run(&up)?;
            let md = self.run(&down)?;
            for (nu, vu) in &mu {
                for (nd, vd) in &md {
                    let n: Vec<u32> = nu.iter().zip(nd).map(|(a, b)| a + b).collect();
                    if n.iter().zip(self.target).any(|(a, t)| a > t) {
                        continue;
                    }
                    let v = 0.5 * (vu + vd);
                    let slot = out.entry(n).or_insert(f64::NEG_INFINITY);
                    if v > *slot {
                        *slot = v;
                    }
                }
                if out.len() > STRONG_MAX_STATES {
                    return Err(Error::SizeGuard("pure-rule search state space too large".into()));
                }
            }
        }
        self.memo.insert(*node, out.clone());
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::ScalarFn;

    fn half() -> DiscreteMeasure<f64> {
        DiscreteMeasure::from_pairs([(1.0, 0.5), (2.0, 0.5)]).unwrap()
    }

    fn ind() -> CostSpec {
        CostSpec::terminal(ScalarFn::IndicatorGe { threshold: 1.0 })
    }

    #[test]
    fn indicator_example() {
        for res in [2, 4, 40] {
            let t = solve(&LatticeSpec::recombining(2, 1.0), &ind(), &half(), &SolveOptions::new(res)).unwrap();
            assert!((t.value() - 0.5).abs() < 1e-12, "res {res}: {}", t.value());
        }
        // (½, ½) is off the grid: interpolation loses at most the slack
        let t = solve(&LatticeSpec::recombining(2, 1.0), &ind(), &half(), &SolveOptions::new(5)).unwrap();
        assert!(t.value() <= 0.5 && t.value() >= 0.5 - t.slack());
    }

    #[test]
    fn control_independent_costs() {
        let mu = DiscreteMeasure::from_pairs([(1.0, 0.3), (2.0, 0.45), (4.0, 0.25)]).unwrap();
        let spec = LatticeSpec::recombining(4, 1.0);
        for res in [1, 3, 10] {
            let id = solve(&spec, &CostSpec::terminal(ScalarFn::Identity), &mu, &SolveOptions::new(res)).unwrap();
            assert!(id.value().abs() < 1e-9);
            let sq = solve(&spec, &CostSpec::terminal(ScalarFn::Square), &mu, &SolveOptions::new(res)).unwrap();
            assert!((sq.value() - mu.mean()).abs() < 1e-9);
        }
    }

    #[test]
    fn input_errors() {
        let spec = LatticeSpec::recombining(2, 1.0);
        assert!(matches!(solve(&spec, &ind(), &half(), &SolveOptions::new(0)), Err(Error::Config(_))));
        let off = DiscreteMeasure::from_pairs([(1.5, 1.0)]).unwrap();
        assert!(matches!(solve(&spec, &ind(), &off, &SolveOptions::new(4)), Err(Error::Coverage(_))));
        let five = DiscreteMeasure::normalized((1..=5).map(|i| (i as f64, 1.0))).unwrap();
        let deep = LatticeSpec::recombining(5, 1.0);
        assert!(matches!(solve(&deep, &ind(), &five, &SolveOptions::new(4)), Err(Error::Config(_))));
    }

    #[test]
    fn scaling_check_passes() {
        let mu = DiscreteMeasure::from_pairs([(1.0, 0.25), (2.0, 0.25), (3.0, 0.5)]).unwrap();
        let t = solve(
            &LatticeSpec::recombining(3, 1.0),
            &CostSpec::terminal(ScalarFn::Abs),
            &mu,
            &SolveOptions::new(12).with_scaling_check(),
        )
        .unwrap();
        assert!(t.scaling_residual().unwrap() <= SCALING_TOL);
    }

    #[test]
    fn policy_for_indicator_example() {
        let t = solve(&LatticeSpec::recombining(2, 1.0), &ind(), &half(), &SolveOptions::new(4)).unwrap();
        let l = Lattice::build(LatticeSpec::history(2, 1.0)).unwrap();
        let tree = extract_policy(&t, &l, &half()).unwrap();
        assert!(tree.validate(&half()).ok);
        assert_eq!(tree.weights_at(&"h/u".parse().unwrap()).unwrap(), &[1.0, 0.0]);
        assert_eq!(tree.weights_at(&"h/d".parse().unwrap()).unwrap(), &[0.0, 1.0]);
        let k = tree.to_kernel(&l).unwrap();
        assert!((k.objective_value(&l, &ind()).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn policy_attains_table_value() {
        let mu = DiscreteMeasure::from_pairs([(1.0, 0.3), (3.0, 0.7)]).unwrap();
        let cost = CostSpec::terminal(ScalarFn::PositivePart { strike: 0.5 });
        let t = solve(&LatticeSpec::recombining(3, 1.0), &cost, &mu, &SolveOptions::new(10)).unwrap();
        let l = Lattice::build(LatticeSpec::history(4, 1.0)).unwrap();
        let tree = extract_policy(&t, &l, &mu).unwrap();
        assert!(tree.validate(&mu).ok);
        let acc = tree.accumulate(&l, &cost, 0.0).unwrap();
        assert!((acc.expected_leaf() - t.value()).abs() < 1e-12);
        let id = CostSpec::terminal(ScalarFn::Identity);
        assert!(tree.accumulate(&l, &id, 0.0).unwrap().expected_leaf().abs() < 1e-12);
    }

    #[test]
    fn dpp_identity_on_indicator_example() {
        let t = solve(&LatticeSpec::recombining(2, 1.0), &ind(), &half(), &SolveOptions::new(6)).unwrap();
        for theta in [
            ThetaRule::FixedStep(1),
            ThetaRule::HitLevel { level: 1, cap: 2 },
            ThetaRule::FixedStep(2),
        ] {
            assert!(check_dpp(&t, &theta).unwrap().residual.abs() <= 1e-9);
        }
        assert!(check_dpp(&t, &ThetaRule::FixedStep(0)).is_err());
        assert!(matches!(check_dpp(&t, &ThetaRule::FixedTime(1.5)), Err(Error::Coverage(_))));
    }

    #[test]
    fn strong_value_examples() {
        let h2 = LatticeSpec::history(2, 1.0);
        assert_eq!(strong_value(&h2, &ind(), &half()).unwrap(), 0.5);
        let third = DiscreteMeasure::from_pairs([(1.0, 1.0 / 3.0), (2.0, 2.0 / 3.0)]).unwrap();
        assert_eq!(strong_value(&h2, &ind(), &third).unwrap(), f64::NEG_INFINITY);
        let id = CostSpec::terminal(ScalarFn::Identity);
        assert_eq!(strong_value(&h2, &id, &half()).unwrap(), 0.0);
        assert!(strong_value(&LatticeSpec::history(13, 1.0), &id, &half()).is_err());
    }

    #[test]
    fn value_grows_with_resolution() {
        let mu = DiscreteMeasure::from_pairs([(1.0, 0.35), (2.0, 0.4), (3.0, 0.25)]).unwrap();
        let cost = CostSpec::terminal(ScalarFn::Abs);
        let spec = LatticeSpec::recombining(3, 1.0);
        let mut prev = f64::NEG_INFINITY;
        for res in [5, 10, 20, 40] {
            let v = solve(&spec, &cost, &mu, &SolveOptions::new(res)).unwrap().value();
            assert!(v >= prev - 1e-12, "res {res}: {v} < {prev}");
            prev = v;
        }
    }
}
