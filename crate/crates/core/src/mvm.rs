//! Measure-valued martingales on history trees.
//!
//! A tree stores, for every node of a history lattice below some root node,
//! a weight vector over a fixed grid of atom times: the conditional law of
//! the stopping time given the path so far.

use serde::{Deserialize, Serialize};

use crate::cost::CostSpec;
use crate::error::{Error, Result};
use crate::lattice::{Lattice, LatticeSpec, NodeId};
use crate::measures::{DiscreteMeasure, MERGE_TOL};
use crate::rst::StoppingKernel;

/// Tolerance of the martingale, freezing and normalization checks.
pub const MVM_TOL: f64 = 1e-12;
const SPLICE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct MvmTree {
    spec: LatticeSpec,
    atom_times: Vec<f64>,
    atom_steps: Vec<usize>,
    root: NodeId,
    /// `weights[s][k·r + i]`: weight on atom `i` at the `k`-th descendant of
    /// the root at depth `s` below it, `k` being the bits of the moves taken.
    weights: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    InitialCondition,
    Adaptedness,
    Martingale,
    Normalization,
    Nonnegativity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub node: NodeId,
    pub property: Property,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violation: Option<Violation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Termination {
    pub terminating: bool,
    /// Per-leaf stopping time, present when every leaf is a point mass.
    pub tau: Option<Vec<(NodeId, f64)>>,
}

impl MvmTree {
    /// Builds a tree rooted at `root` from a weight rule evaluated at every
    /// descendant down to the lattice depth.
    pub fn from_fn<F>(lattice: &Lattice, atom_times: Vec<f64>, root: NodeId, mut rule: F) -> Result<Self>
    where
        F: FnMut(&NodeId) -> Vec<f64>,
    {
        let (atom_steps, r) = prepare(lattice, &atom_times, &root)?;
        let base = root.step();
        let mut weights = Vec::with_capacity(lattice.depth() - base + 1);
        for s in base..=lattice.depth() {
            let width = 1usize << (s - base);
            let mut level = Vec::with_capacity(width * r);
            for k in 0..width {
                let node = descendant(&root, s, k);
                let w = rule(&node);
                if w.len() != r {
                    return Err(Error::Mvm(format!("{node}: {} weights for {r} atoms", w.len())));
                }
                level.extend(w);
            }
            weights.push(level);
        }
        Ok(Self {
            spec: lattice.spec().clone(),
            atom_times,
            atom_steps,
            root,
            weights,
        })
    }

    /// Builds a tree from leaf weights and fills interior nodes by averaging.
    pub fn from_leaves<F>(lattice: &Lattice, atom_times: Vec<f64>, root: NodeId, leaf: F) -> Result<Self>
    where
        F: FnMut(&NodeId) -> Vec<f64>,
    {
        Self::backward(lattice, root, leaf, atom_times)
    }

    fn backward<F>(lattice: &Lattice, root: NodeId, mut leaf: F, atom_times: Vec<f64>) -> Result<Self>
    where
        F: FnMut(&NodeId) -> Vec<f64>,
    {
        let (atom_steps, r) = prepare(lattice, &atom_times, &root)?;
        let base = root.step();
        let depth = lattice.depth();
        let mut weights: Vec<Vec<f64>> = vec![Vec::new(); depth - base + 1];
        let width = 1usize << (depth - base);
        let mut leaves = Vec::with_capacity(width * r);
        for k in 0..width {
            let node = descendant(&root, depth, k);
            let w = leaf(&node);
            if w.len() != r {
                return Err(Error::Mvm(format!("{node}: {} weights for {r} atoms", w.len())));
            }
            leaves.extend(w);
        }
        weights[depth - base] = leaves;
        for d in (0..depth - base).rev() {
            let width = 1usize << d;
            let child = &weights[d + 1];
            let mut level = vec![0.0; width * r];
            for k in 0..width {
                // bit d of the child index is the move out of this node
                let down = k;
                let up = k | 1 << d;
                for i in 0..r {
                    level[k * r + i] = 0.5 * (child[up * r + i] + child[down * r + i]);
                }
            }
            weights[d] = level;
        }
        Ok(Self {
            spec: lattice.spec().clone(),
            atom_times,
            atom_steps,
            root,
            weights,
        })
    }

    /// Deterministic tree equal to `mu` at every node of the lattice.
    pub fn constant(lattice: &Lattice, mu: &DiscreteMeasure<f64>) -> Result<Self> {
        let w = mu.weights().to_vec();
        Self::from_fn(lattice, mu.atoms().to_vec(), lattice.root(), |_| w.clone())
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn atom_times(&self) -> &[f64] {
        &self.atom_times
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn depth(&self) -> usize {
        self.spec.depth
    }

    fn r(&self) -> usize {
        self.atom_times.len()
    }

    fn locate(&self, node: &NodeId) -> Option<(usize, usize)> {
        let base = self.root.step();
        let s = node.step();
        let bits = node.bits()?;
        if s < base || s > self.spec.depth {
            return None;
        }
        if bits & low_mask(base) != self.root.bits()? || bits >> s != 0 {
            return None;
        }
        Some((s - base, (bits >> base) as usize))
    }

    /// Weight vector at `node`, or `None` if the node is outside the tree.
    pub fn weights_at(&self, node: &NodeId) -> Option<&[f64]> {
        let r = self.r();
        self.locate(node).map(|(d, k)| &self.weights[d][k * r..(k + 1) * r])
    }

    pub fn root_weights(&self) -> &[f64] {
        &self.weights[0][..self.r()]
    }

    pub fn measure_at(&self, node: &NodeId) -> Result<DiscreteMeasure<f64>> {
        let w = self.weights_at(node).ok_or_else(|| foreign(node))?;
        DiscreteMeasure::normalized(self.atom_times.iter().copied().zip(w.iter().copied()))
    }

    /// Copy of the tree with the weights at one node replaced.
    pub fn with_weights(mut self, node: &NodeId, w: &[f64]) -> Result<Self> {
        let r = self.r();
        let (d, k) = self.locate(node).ok_or_else(|| foreign(node))?;
        if w.len() != r {
            return Err(Error::Mvm(format!("{} weights for {r} atoms", w.len())));
        }
        self.weights[d][k * r..(k + 1) * r].copy_from_slice(w);
        Ok(self)
    }

    /// All nodes of the tree in breadth-first order.
    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        let base = self.root.step();
        (base..=self.spec.depth).flat_map(move |s| (0..1usize << (s - base)).map(move |k| descendant(&self.root, s, k)))
    }

    /// The conditional continuation below `node`, as a tree rooted there.
    pub fn subtree(&self, node: &NodeId) -> Result<Self> {
        let r = self.r();
        let (d0, k0) = self.locate(node).ok_or_else(|| foreign(node))?;
        let mut weights = Vec::with_capacity(self.weights.len() - d0);
        for (extra, level) in self.weights[d0..].iter().enumerate() {
            let width = 1usize << extra;
            let mut out = Vec::with_capacity(width * r);
            for tail in 0..width {
                let k = k0 | tail << d0;
                out.extend_from_slice(&level[k * r..(k + 1) * r]);
            }
            weights.push(out);
        }
        Ok(Self {
            spec: self.spec.clone(),
            atom_times: self.atom_times.clone(),
            atom_steps: self.atom_steps.clone(),
            root: *node,
            weights,
        })
    }

    /// Checks the initial condition against `mu`, then freezing of past
    /// coordinates, then the martingale identity, then that every node is a
    /// probability vector. Reports the first violation found.
    pub fn validate(&self, mu: &DiscreteMeasure<f64>) -> ValidationReport {
        match self.first_violation(mu) {
            None => ValidationReport { ok: true, violation: None },
            Some(v) => ValidationReport {
                ok: false,
                violation: Some(v),
            },
        }
    }

    fn first_violation(&self, mu: &DiscreteMeasure<f64>) -> Option<Violation> {
        let r = self.r();
        let base = self.root.step();
        let at = |d: usize, k: usize| descendant(&self.root, base + d, k);

        let expected: Vec<f64> = self
            .atom_times
            .iter()
            .map(|t| mu.mass_at(t))
            .collect();
        let covered: f64 = expected.iter().sum();
        let residual = self
            .root_weights()
            .iter()
            .zip(&expected)
            .map(|(a, b)| (a - b).abs())
            .fold((1.0 - covered).abs(), f64::max);
        if residual > MVM_TOL {
            return Some(Violation {
                node: self.root,
                property: Property::InitialCondition,
                residual,
            });
        }

        for d in 0..self.weights.len() - 1 {
            let t_parent = self.spec.time_of(base + d);
            let frozen = self.atom_times.iter().take_while(|t| **t <= t_parent + MERGE_TOL).count();
            for kc in 0..1usize << (d + 1) {
                let kp = kc & ((1 << d) - 1);
                let residual = (0..frozen)
                    .map(|i| (self.weights[d + 1][kc * r + i] - self.weights[d][kp * r + i]).abs())
                    .fold(0.0, f64::max);
                if residual > MVM_TOL {
                    return Some(Violation {
                        node: at(d + 1, kc),
                        property: Property::Adaptedness,
                        residual,
                    });
                }
            }
        }

        for d in 0..self.weights.len() - 1 {
            for k in 0..1usize << d {
                let up = k | 1 << d;
                let residual = (0..r)
                    .map(|i| {
                        let avg = 0.5 * (self.weights[d + 1][up * r + i] + self.weights[d + 1][k * r + i]);
                        (self.weights[d][k * r + i] - avg).abs()
                    })
                    .fold(0.0, f64::max);
                if residual > MVM_TOL {
                    return Some(Violation {
                        node: at(d, k),
                        property: Property::Martingale,
                        residual,
                    });
                }
            }
        }

        for (d, level) in self.weights.iter().enumerate() {
            for (k, w) in level.chunks(r).enumerate() {
                let low = w.iter().copied().fold(0.0, f64::min);
                if low < -MVM_TOL {
                    return Some(Violation {
                        node: at(d, k),
                        property: Property::Nonnegativity,
                        residual: -low,
                    });
                }
                let residual = (w.iter().sum::<f64>() - 1.0).abs();
                if residual > MVM_TOL * r as f64 {
                    return Some(Violation {
                        node: at(d, k),
                        property: Property::Normalization,
                        residual,
                    });
                }
            }
        }
        None
    }

    fn ensure_valid(&self) -> Result<()> {
        let root = DiscreteMeasure::normalized(
            self.atom_times.iter().copied().zip(self.root_weights().iter().copied()),
        )?;
        match self.first_violation(&root) {
            None => Ok(()),
            Some(v) => Err(Error::Mvm(format!("{:?} at {} (residual {:e})", v.property, v.node, v.residual))),
        }
    }

    /// Conditional stopping laws of a kernel: leaves carry the per-path law,
    /// interior nodes the average of their children.
    pub fn from_kernel(kernel: &StoppingKernel, lattice: &Lattice) -> Result<Self> {
        kernel.check_lattice(lattice)?;
        let masses = kernel.path_masses(lattice)?;
        let steps = kernel.atom_steps().to_vec();
        Self::backward(
            lattice,
            lattice.root(),
            |leaf| {
                steps
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let anc = leaf.ancestor(*s).expect("history leaf");
                        masses[i][anc.bits().expect("history") as usize]
                    })
                    .collect()
            },
            kernel.atom_times(),
        )
    }

    /// Reads the per-path law off the frozen coordinates: the weight on atom
    /// `i` at a node of that atom's step is the mass stopped there.
    pub fn to_kernel(&self, lattice: &Lattice) -> Result<StoppingKernel> {
        if self.root != lattice.root() || &self.spec != lattice.spec() {
            return Err(Error::Mvm("to_kernel needs a full tree on this lattice".into()));
        }
        self.ensure_valid()?;
        let r = self.r();
        let masses: Vec<Vec<f64>> = self
            .atom_steps
            .iter()
            .enumerate()
            .map(|(i, s)| self.weights[*s].chunks(r).map(|w| w[i]).collect())
            .collect();
        StoppingKernel::from_absolute_masses(lattice, self.atom_steps.clone(), &masses)
    }

    pub fn termination(&self) -> Termination {
        let r = self.r();
        let leaves = self.weights.last().expect("at least the root level");
        let depth = self.spec.depth;
        let mut tau = Vec::with_capacity(leaves.len() / r);
        for (k, w) in leaves.chunks(r).enumerate() {
            match w.iter().position(|x| (x - 1.0).abs() <= MVM_TOL) {
                Some(i) => tau.push((descendant(&self.root, depth, k), self.atom_times[i])),
                None => {
                    return Termination {
                        terminating: false,
                        tau: None,
                    }
                }
            }
        }
        Termination {
            terminating: true,
            tau: Some(tau),
        }
    }

    /// Replaces the subtree below `node` by `continuation`.
    ///
    /// A continuation whose root equals the measure at `node` is inserted as
    /// is. Otherwise it must be a fresh conditional law over the future
    /// atoms (zero past coordinates); it is then rescaled by the surviving
    /// mass and re-routed through the monotone coupling from its root law
    /// to the future part at `node`, which must be a right shift of it.
    pub fn splice(&self, node: &NodeId, continuation: &MvmTree) -> Result<Self> {
        let r = self.r();
        let here = self.weights_at(node).ok_or_else(|| foreign(node))?.to_vec();
        if continuation.root != *node
            || continuation.spec != self.spec
            || continuation.atom_times != self.atom_times
        {
            return Err(Error::SpliceIncompatible(format!(
                "continuation rooted at {} does not fit node {node}",
                continuation.root
            )));
        }
        let direct = here
            .iter()
            .zip(continuation.root_weights())
            .all(|(a, b)| (a - b).abs() <= SPLICE_TOL);
        let t_node = self.spec.time_of(node.step());
        let past = self.atom_times.iter().take_while(|t| **t <= t_node + MERGE_TOL).count();

        let remap: Box<dyn Fn(&[f64]) -> Vec<f64>> = if direct {
            Box::new(|w: &[f64]| w.to_vec())
        } else {
            let cont_root = continuation.root_weights();
            let stray = cont_root[..past].iter().map(|x| x.abs()).fold(0.0, f64::max);
            if stray > SPLICE_TOL {
                return Err(Error::SpliceIncompatible(format!(
                    "continuation puts {stray:e} on atoms at or before t = {t_node}"
                )));
            }
            let alive = 1.0 - here[..past].iter().sum::<f64>();
            if alive <= SPLICE_TOL {
                return Err(Error::SpliceIncompatible(format!(
                    "no mass survives past t = {t_node} at {node}"
                )));
            }
            let future = |w: &[f64]| -> Result<DiscreteMeasure<f64>> {
                DiscreteMeasure::normalized(self.atom_times[past..].iter().copied().zip(w[past..].iter().copied()))
            };
            let g = future(cont_root)?;
            let f = future(&here)?;
            if !f.is_right_shift_of(&g) {
                return Err(Error::SpliceIncompatible(format!(
                    "measure at {node} is not a right shift of the continuation root"
                )));
            }
            let coupling = g.monotone_coupling(&f);
            // transition matrix on atom indices, row = source atom
            let index = |t: &f64| self.atom_times.iter().position(|x| (x - t).abs() <= MERGE_TOL).expect("grid atom");
            let mut kernel = vec![0.0; r * r];
            for (i, j, c) in coupling.cells() {
                let from = index(&g.atoms()[i]);
                let to = index(&f.atoms()[j]);
                kernel[from * r + to] += c / g.weights()[i];
            }
            let frozen: Vec<f64> = here[..past].to_vec();
            Box::new(move |w: &[f64]| {
                let mut out = frozen.clone();
                out.resize(r, 0.0);
                for (from, x) in w.iter().enumerate().skip(past) {
                    if *x != 0.0 {
                        for to in past..r {
                            out[to] += alive * x * kernel[from * r + to];
                        }
                    }
                }
                out
            })
        };

        let mut out = self.clone();
        let (d0, k0) = self.locate(node).expect("checked above");
        for (extra, level) in continuation.weights.iter().enumerate() {
            for (tail, w) in level.chunks(r).enumerate() {
                let k = k0 | tail << d0;
                out.weights[d0 + extra][k * r..(k + 1) * r].copy_from_slice(&remap(w));
            }
        }
        Ok(out)
    }

    /// Running objective in Mayer form: `Y` starts at `y0` and grows by
    /// `cost·ΔA` where `A_t = ξ_t([0, t])`.
    pub fn accumulate(&self, lattice: &Lattice, cost: &CostSpec, y0: f64) -> Result<Accumulator> {
        if lattice.spec() != &self.spec {
            return Err(Error::Mvm("tree and lattice differ".into()));
        }
        cost.check_lattice(lattice.spec())?;
        let r = self.r();
        let base = self.root.step();
        let cdf = |w: &[f64], t: f64| -> f64 {
            self.atom_times
                .iter()
                .zip(w)
                .take_while(|(a, _)| **a <= t + MERGE_TOL)
                .map(|(_, x)| x)
                .sum()
        };
        let mut y = vec![vec![y0]];
        for d in 1..self.weights.len() {
            let t = self.spec.time_of(base + d);
            let t_prev = self.spec.time_of(base + d - 1);
            let mut level = Vec::with_capacity(1 << d);
            for k in 0..1usize << d {
                let kp = k & ((1 << (d - 1)) - 1);
                let da = cdf(&self.weights[d][k * r..(k + 1) * r], t) - cdf(&self.weights[d - 1][kp * r..(kp + 1) * r], t_prev);
                let mut v = y[d - 1][kp];
                if da != 0.0 {
                    let node = descendant(&self.root, base + d, k);
                    v += cost.evaluate(&lattice.state(&node))? * da;
                }
                level.push(v);
            }
            y.push(level);
        }
        Ok(Accumulator { root: self.root, y })
    }

    /// Largest `W₁` distance between a node's measure and a child's, per step.
    pub fn w1_increments(&self) -> Vec<f64> {
        let r = self.r();
        let mut out = Vec::with_capacity(self.weights.len() - 1);
        for d in 0..self.weights.len() - 1 {
            let mut worst: f64 = 0.0;
            for kc in 0..1usize << (d + 1) {
                let kp = kc & ((1 << d) - 1);
                let (a, b) = (&self.weights[d][kp * r..(kp + 1) * r], &self.weights[d + 1][kc * r..(kc + 1) * r]);
                let (mut fa, mut fb, mut w1) = (0.0, 0.0, 0.0);
                for i in 0..r.saturating_sub(1) {
                    fa += a[i];
                    fb += b[i];
                    w1 += (fa - fb).abs() * (self.atom_times[i + 1] - self.atom_times[i]);
                }
                worst = worst.max(w1);
            }
            out.push(worst);
        }
        out
    }

    pub fn to_dump(&self) -> MvmDump {
        let r = self.r();
        let base = self.root.step();
        let nodes = self
            .weights
            .iter()
            .enumerate()
            .flat_map(|(d, level)| {
                level.chunks(r).enumerate().map(move |(k, w)| MvmEntry {
                    node: descendant(&self.root, base + d, k),
                    weights: w.to_vec(),
                })
            })
            .collect();
        MvmDump {
            lattice: self.spec.clone(),
            atom_times: self.atom_times.clone(),
            root: self.root,
            nodes,
        }
    }

    pub fn from_dump(dump: &MvmDump) -> Result<Self> {
        let lattice = Lattice::build(dump.lattice.clone())?;
        let mut table = std::collections::HashMap::with_capacity(dump.nodes.len());
        for e in &dump.nodes {
            table.insert(e.node, e.weights.clone());
        }
        let mut missing = None;
        let tree = Self::from_fn(&lattice, dump.atom_times.clone(), dump.root, |n| match table.get(n) {
            Some(w) => w.clone(),
            None => {
                missing.get_or_insert(*n);
                vec![0.0; dump.atom_times.len()]
            }
        })?;
        if let Some(n) = missing {
            return Err(Error::Mvm(format!("dump has no weights for {n}")));
        }
        if table.len() != tree.weights.iter().map(|l| l.len()).sum::<usize>() / tree.r() {
            return Err(Error::Mvm("dump lists nodes outside the tree".into()));
        }
        Ok(tree)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Accumulator {
    root: NodeId,
    /// `y[d][k]`: running objective at the `k`-th node `d` steps below the root.
    y: Vec<Vec<f64>>,
}

impl Accumulator {
    pub fn root_value(&self) -> f64 {
        self.y[0][0]
    }

    pub fn at(&self, node: &NodeId) -> Option<f64> {
        let base = self.root.step();
        let d = node.step().checked_sub(base)?;
        let k = (node.bits()? >> base) as usize;
        self.y.get(d)?.get(k).copied()
    }

    pub fn leaves(&self) -> &[f64] {
        self.y.last().expect("root level")
    }

    /// `E[Y]` at the leaves under fair coins.
    pub fn expected_leaf(&self) -> f64 {
        let leaves = self.leaves();
        leaves.iter().sum::<f64>() / leaves.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvmEntry {
    pub node: NodeId,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvmDump {
    pub lattice: LatticeSpec,
    pub atom_times: Vec<f64>,
    pub root: NodeId,
    pub nodes: Vec<MvmEntry>,
}

fn prepare(lattice: &Lattice, atom_times: &[f64], root: &NodeId) -> Result<(Vec<usize>, usize)> {
    if !lattice.is_history() {
        return Err(Error::Config("measure-valued martingales need a history-mode lattice".into()));
    }
    if !lattice.contains(root) {
        return Err(foreign(root));
    }
    if atom_times.is_empty() || atom_times.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Mvm("atom times must be nonempty and increasing".into()));
    }
    let steps = atom_times
        .iter()
        .map(|t| lattice.spec().step_of_time(*t))
        .collect::<Result<Vec<_>>>()?;
    if steps[0] == 0 {
        return Err(Error::Coverage("atom at time 0".into()));
    }
    Ok((steps, atom_times.len()))
}

fn descendant(root: &NodeId, step: usize, tail: usize) -> NodeId {
    let base = root.step();
    NodeId::history(step, root.bits().expect("history root") | (tail as u32) << base)
}

fn low_mask(step: usize) -> u32 {
    if step >= 32 {
        u32::MAX
    } else {
        (1u32 << step) - 1
    }
}

fn foreign(node: &NodeId) -> Error {
    Error::ForeignNode {
        node: node.to_string(),
        reason: "not in this tree".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::ScalarFn;

    fn hist(depth: usize) -> Lattice {
        Lattice::build(LatticeSpec::history(depth, 1.0)).unwrap()
    }

    fn half() -> DiscreteMeasure<f64> {
        DiscreteMeasure::from_pairs([(1.0, 0.5), (2.0, 0.5)]).unwrap()
    }

    fn up_stops(l: &Lattice) -> StoppingKernel {
        StoppingKernel::from_fn(l, vec![1, 2], |_, n| if n.level() > 0 { 1.0 } else { 0.0 }).unwrap()
    }

    fn node(s: &str) -> NodeId {
        s.parse().unwrap()
    }

    #[test]
    fn validate_examples() {
        let l = hist(3);
        let mu = DiscreteMeasure::from_pairs([(2.0, 0.5), (3.0, 0.5)]).unwrap();
        let constant = MvmTree::constant(&l, &mu).unwrap();
        assert!(constant.validate(&mu).ok);

        let tree = MvmTree::from_kernel(&up_stops(&l), &l).unwrap();
        assert!(tree.validate(&half()).ok);
        let bumped = tree.clone().with_weights(&node("h/u"), &[1.0, 1e-3]).unwrap();
        let v = bumped.validate(&half()).violation.unwrap();
        assert_eq!(v.property, Property::Martingale);
        assert_eq!(v.node, node("h/"));
        assert!((v.residual - 5e-4).abs() < 1e-15);

        // atom 1 is frozen from step 1 on
        let moved = tree.clone().with_weights(&node("h/uu"), &[0.9, 0.1]).unwrap();
        let v = moved.validate(&half()).violation.unwrap();
        assert_eq!((v.property, v.node), (Property::Adaptedness, node("h/uu")));

        let wrong = DiscreteMeasure::dirac(1.0).unwrap();
        assert_eq!(tree.validate(&wrong).violation.unwrap().property, Property::InitialCondition);
    }

    #[test]
    fn from_kernel_examples() {
        let l = hist(2);
        let first = StoppingKernel::from_fn(&l, vec![1], |_, _| 1.0).unwrap();
        let t = MvmTree::from_kernel(&first, &l).unwrap();
        assert!(t.nodes().all(|n| t.weights_at(&n).unwrap() == [1.0]));

        let t = MvmTree::from_kernel(&up_stops(&l), &l).unwrap();
        assert_eq!(t.root_weights(), &[0.5, 0.5]);
        assert_eq!(t.weights_at(&node("h/u")).unwrap(), &[1.0, 0.0]);
        assert_eq!(t.weights_at(&node("h/d")).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn kernel_roundtrip() {
        let l = hist(3);
        for k in [
            StoppingKernel::from_fn(&l, vec![1], |_, _| 1.0).unwrap(),
            up_stops(&l),
            StoppingKernel::from_fn(&l, vec![1, 2], |_, _| 0.5).unwrap(),
        ] {
            let tree = MvmTree::from_kernel(&k, &l).unwrap();
            let back = tree.to_kernel(&l).unwrap();
            assert_eq!(back, k.canonical(&l).unwrap());
            assert_eq!(MvmTree::from_kernel(&back, &l).unwrap(), tree);
        }
    }

    #[test]
    fn termination_examples() {
        let l = hist(2);
        let t = MvmTree::constant(&l, &DiscreteMeasure::dirac(2.0).unwrap()).unwrap().termination();
        assert!(t.terminating);
        assert!(t.tau.unwrap().iter().all(|(_, x)| *x == 2.0));
        assert!(!MvmTree::constant(&l, &half()).unwrap().termination().terminating);

        let t = MvmTree::from_kernel(&up_stops(&l), &l).unwrap().termination();
        assert!(t.terminating);
        for (leaf, tau) in t.tau.unwrap() {
            let first_up = leaf.bits().unwrap() & 1 == 1;
            assert_eq!(tau, if first_up { 1.0 } else { 2.0 });
        }
    }

    #[test]
    fn splice_examples() {
        let l = hist(3);
        let tree = MvmTree::from_kernel(&StoppingKernel::from_fn(&l, vec![1, 2, 3], |_, _| 0.5).unwrap(), &l).unwrap();
        let mu = DiscreteMeasure::normalized(tree.atom_times().iter().copied().zip(tree.root_weights().iter().copied())).unwrap();
        let n = node("h/d");
        assert_eq!(tree.splice(&n, &tree.subtree(&n).unwrap()).unwrap(), tree);

        // node h/d has past mass 1/2 on t = 1 and future mass 1/2 on t = 3
        let k = StoppingKernel::from_fn(&l, vec![1, 3], |_, _| 0.5).unwrap();
        let base = MvmTree::from_kernel(&k, &l).unwrap();
        let times = base.atom_times().to_vec();
        let det = MvmTree::from_fn(&l, times.clone(), n, |_| vec![0.0, 1.0]).unwrap();
        let spliced = base.splice(&n, &det).unwrap();
        let mu_base = DiscreteMeasure::normalized(times.iter().copied().zip(base.root_weights().iter().copied())).unwrap();
        assert!(spliced.validate(&mu_base).ok);
        assert_eq!(spliced, base);

        // a continuation stopping earlier is pushed right onto the base future
        let early = MvmTree::from_fn(&l, tree.atom_times().to_vec(), n, |_| vec![0.0, 1.0, 0.0]).unwrap();
        let pushed = tree.splice(&n, &early).unwrap();
        assert!(pushed.validate(&mu).ok);
        assert_eq!(pushed.weights_at(&node("h/u")), tree.weights_at(&node("h/u")));

        // the reverse needs a left shift
        let late = MvmTree::from_fn(&l, times.clone(), node("h/u"), |_| vec![0.0, 1.0]).unwrap();
        let k2 = StoppingKernel::from_fn(&l, vec![1, 2, 3], |i, _| [0.5, 1.0, 1.0][i]).unwrap();
        let t2 = MvmTree::from_kernel(&k2, &l).unwrap();
        let late3 = MvmTree::from_fn(&l, t2.atom_times().to_vec(), node("h/u"), |_| vec![0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(t2.splice(&node("h/u"), &late3), Err(Error::SpliceIncompatible(_))));
        assert!(base.splice(&n, &late).is_err());
    }

    #[test]
    fn accumulate_examples() {
        let l = hist(2);
        let ind = CostSpec::terminal(ScalarFn::IndicatorGe { threshold: 1.0 });
        let acc = MvmTree::from_kernel(&up_stops(&l), &l).unwrap().accumulate(&l, &ind, 0.0).unwrap();
        assert_eq!(acc.expected_leaf(), 0.5);

        let sq = CostSpec::terminal(ScalarFn::Square);
        let stop2 = MvmTree::constant(&l, &DiscreteMeasure::dirac(2.0).unwrap()).unwrap();
        let acc = stop2.accumulate(&l, &sq, 1.5).unwrap();
        for (k, y) in acc.leaves().iter().enumerate() {
            let w = l.state(&NodeId::history(2, k as u32)).w;
            assert!((y - 1.5 - w * w).abs() < 1e-12);
        }

        let l1 = Lattice::build(LatticeSpec::history(1, 1.0)).unwrap();
        let none = MvmTree::constant(&l1, &DiscreteMeasure::dirac(1.0).unwrap())
            .unwrap()
            .subtree(&node("h/u"))
            .unwrap();
        assert!(none.accumulate(&l1, &sq, 0.0).unwrap().leaves().iter().all(|y| *y == 0.0));
    }

    #[test]
    fn dump_roundtrip() {
        let l = hist(2);
        let t = MvmTree::from_kernel(&up_stops(&l), &l).unwrap();
        let json = serde_json::to_string(&t.to_dump()).unwrap();
        let back = MvmTree::from_dump(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, t);
    }
}
