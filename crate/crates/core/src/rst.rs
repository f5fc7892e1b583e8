//! Randomized stopping times on a lattice, stored as adapted stop hazards.
//!
//! A kernel assigns to every node at an atom step the conditional
//! probability `q` of stopping there given survival so far. The stopped mass
//! at atom `i` along a path is `q(nodeᵢ)·Π_{j<i}(1 − q(nodeⱼ))`, and the
//! final atom forces `q = 1`, so each path carries total mass one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::CostSpec;
use crate::error::{Error, Result};
use crate::lattice::{Lattice, LatticeSpec, NodeId};
use crate::measures::{DiscreteMeasure, MonotoneCoupling, MERGE_TOL};

const HAZARD_TOL: f64 = 1e-12;
/// Paths simulated per independently seeded shard.
pub const SIM_SHARD: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
pub struct StoppingKernel {
    spec: LatticeSpec,
    atom_steps: Vec<usize>,
    /// `hazards[i][k]`: stop probability at the `k`-th node of step `atom_steps[i]`.
    hazards: Vec<Vec<f64>>,
}

impl StoppingKernel {
    pub fn new(lattice: &Lattice, atom_steps: Vec<usize>, hazards: Vec<Vec<f64>>) -> Result<Self> {
        check_steps(lattice, &atom_steps)?;
        if hazards.len() != atom_steps.len() {
            return Err(Error::InvalidKernel(format!(
                "{} hazard vectors for {} atoms",
                hazards.len(),
                atom_steps.len()
            )));
        }
        let mut hazards = hazards;
        for (i, (step, qs)) in atom_steps.iter().zip(hazards.iter_mut()).enumerate() {
            if qs.len() != lattice.nodes_at(*step).len() {
                return Err(Error::InvalidKernel(format!(
                    "atom {i}: {} hazards for {} nodes",
                    qs.len(),
                    lattice.nodes_at(*step).len()
                )));
            }
            for q in qs.iter_mut() {
                if !(*q >= -HAZARD_TOL && *q <= 1.0 + HAZARD_TOL) {
                    return Err(Error::InvalidKernel(format!("hazard {q} outside [0, 1]")));
                }
                *q = q.clamp(0.0, 1.0);
            }
        }
        let last = hazards.last_mut().expect("checked nonempty");
        if last.iter().any(|q| (q - 1.0).abs() > HAZARD_TOL) {
            return Err(Error::InvalidKernel("hazard at the final atom must be 1".into()));
        }
        last.iter_mut().for_each(|q| *q = 1.0);
        Ok(Self {
            spec: lattice.spec().clone(),
            atom_steps,
            hazards,
        })
    }

    /// Builds a kernel from a hazard rule; the final atom is forced to 1.
    pub fn from_fn<F>(lattice: &Lattice, atom_steps: Vec<usize>, mut rule: F) -> Result<Self>
    where
        F: FnMut(usize, &NodeId) -> f64,
    {
        check_steps(lattice, &atom_steps)?;
        let last = atom_steps.len() - 1;
        let hazards = atom_steps
            .iter()
            .enumerate()
            .map(|(i, s)| {
                lattice
                    .nodes_at(*s)
                    .iter()
                    .map(|n| if i == last { 1.0 } else { rule(i, n) })
                    .collect()
            })
            .collect();
        Self::new(lattice, atom_steps, hazards)
    }

    /// Builds a kernel from per-path hazards on a history lattice, rejecting
    /// rules that look into the future: every leaf sharing a history up to
    /// an atom step must report the same hazard there.
    pub fn from_path_rule<F>(lattice: &Lattice, atom_steps: Vec<usize>, mut rule: F) -> Result<Self>
    where
        F: FnMut(&NodeId, usize) -> f64,
    {
        require_history(lattice)?;
        check_steps(lattice, &atom_steps)?;
        let depth = lattice.depth();
        let mut hazards: Vec<Vec<Option<f64>>> = atom_steps
            .iter()
            .map(|s| vec![None; lattice.nodes_at(*s).len()])
            .collect();
        for leaf in lattice.nodes_at(depth) {
            for (i, s) in atom_steps.iter().enumerate() {
                let node = leaf.ancestor(*s).expect("history leaf");
                let q = rule(leaf, i);
                let slot = &mut hazards[i][lattice.index_of(&node).expect("on lattice")];
                match slot {
                    Some(prev) if (*prev - q).abs() > HAZARD_TOL => {
                        return Err(Error::InvalidKernel(format!(
                            "not adapted: hazard at {node} differs across continuations ({prev} vs {q})"
                        )))
                    }
                    _ => *slot = Some(q),
                }
            }
        }
        let hazards = hazards
            .into_iter()
            .map(|v| v.into_iter().map(|q| q.unwrap_or(0.0)).collect())
            .collect();
        Self::new(lattice, atom_steps, hazards)
    }

    /// Converts absolute per-path stop masses (history lattice) into hazard
    /// form; nodes never reached alive get hazard 0 (1 at the final atom).
    pub fn from_absolute_masses(lattice: &Lattice, atom_steps: Vec<usize>, masses: &[Vec<f64>]) -> Result<Self> {
        require_history(lattice)?;
        check_steps(lattice, &atom_steps)?;
        let last = atom_steps.len() - 1;
        let mut hazards = Vec::with_capacity(atom_steps.len());
        for (i, s) in atom_steps.iter().enumerate() {
            let mut qs = Vec::with_capacity(lattice.nodes_at(*s).len());
            for node in lattice.nodes_at(*s) {
                let stopped_before: f64 = (0..i)
                    .map(|j| {
                        let anc = node.ancestor(atom_steps[j]).expect("history node");
                        masses[j][lattice.index_of(&anc).expect("on lattice")]
                    })
                    .sum();
                let alive = 1.0 - stopped_before;
                let m = masses[i][lattice.index_of(node).expect("on lattice")];
                let q = if i == last {
                    1.0
                } else if alive > 1e-15 {
                    (m / alive).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                qs.push(q);
            }
            hazards.push(qs);
        }
        Self::new(lattice, atom_steps, hazards)
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn atom_steps(&self) -> &[usize] {
        &self.atom_steps
    }

    pub fn atom_times(&self) -> Vec<f64> {
        self.atom_steps.iter().map(|s| self.spec.time_of(*s)).collect()
    }

    pub fn hazards(&self) -> &[Vec<f64>] {
        &self.hazards
    }

    /// Hazard at atom `i` for `node` (which must sit at that atom's step).
    pub fn hazard(&self, lattice: &Lattice, i: usize, node: &NodeId) -> Option<f64> {
        if node.step() != self.atom_steps[i] {
            return None;
        }
        lattice.index_of(node).map(|k| self.hazards[i][k])
    }

    fn atom_at_step(&self, step: usize) -> Option<usize> {
        self.atom_steps.iter().position(|s| *s == step)
    }

    pub fn check_lattice(&self, lattice: &Lattice) -> Result<()> {
        if lattice.spec() != &self.spec {
            return Err(Error::InvalidKernel(format!(
                "kernel built for {:?}, used with {:?}",
                self.spec,
                lattice.spec()
            )));
        }
        Ok(())
    }

    /// True when every hazard is 0 or 1.
    pub fn is_pure(&self) -> bool {
        self.hazards.iter().flatten().all(|q| *q == 0.0 || *q == 1.0)
    }

    /// Forward pass over surviving probability mass; calls
    /// `visit(atom, node, stopped mass)` with absolute (unconditional) mass.
    fn forward<F: FnMut(usize, &NodeId, f64)>(&self, lattice: &Lattice, mut visit: F) {
        let last = *self.atom_steps.last().expect("nonempty");
        let mut alive = vec![1.0];
        for step in 0..=last {
            if let Some(i) = self.atom_at_step(step) {
                for (k, node) in lattice.nodes_at(step).iter().enumerate() {
                    let stopped = alive[k] * self.hazards[i][k];
                    visit(i, node, stopped);
                    alive[k] -= stopped;
                }
            }
            if step == last {
                break;
            }
            let mut next = vec![0.0; lattice.nodes_at(step + 1).len()];
            for (k, node) in lattice.nodes_at(step).iter().enumerate() {
                if alive[k] == 0.0 {
                    continue;
                }
                let (up, down) = lattice.children(node).expect("step below depth");
                next[lattice.index_of(&up).expect("child")] += 0.5 * alive[k];
                next[lattice.index_of(&down).expect("child")] += 0.5 * alive[k];
            }
            alive = next;
        }
    }

    /// Law of the stopping time as weights over [`Self::atom_times`].
    pub fn marginal_weights(&self, lattice: &Lattice) -> Result<Vec<f64>> {
        self.check_lattice(lattice)?;
        let mut w = vec![0.0; self.atom_steps.len()];
        self.forward(lattice, |i, _, m| w[i] += m);
        Ok(w)
    }

    pub fn marginal_of(&self, lattice: &Lattice) -> Result<DiscreteMeasure<f64>> {
        let w = self.marginal_weights(lattice)?;
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidKernel(format!("stopped mass totals {total}")));
        }
        DiscreteMeasure::normalized(self.atom_times().into_iter().zip(w))
    }

    /// `E[∫ c dA^γ]`: stopped mass times cost, summed over atom-step nodes.
    pub fn objective_value(&self, lattice: &Lattice, cost: &CostSpec) -> Result<f64> {
        self.check_lattice(lattice)?;
        cost.check_lattice(lattice.spec())?;
        let mut total = 0.0;
        let mut err = None;
        self.forward(lattice, |_, node, m| {
            if m != 0.0 {
                match cost.evaluate(&lattice.state(node)) {
                    Ok(c) => total += m * c,
                    Err(e) => err = Some(e),
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(total),
        }
    }

    /// Per-path (conditional) stop masses at every atom-step node of a
    /// history lattice: `masses[i][k]` for node `k` at step `atom_steps[i]`.
    pub fn path_masses(&self, lattice: &Lattice) -> Result<Vec<Vec<f64>>> {
        require_history(lattice)?;
        self.check_lattice(lattice)?;
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(self.atom_steps.len());
        for (i, s) in self.atom_steps.iter().enumerate() {
            let mut row = Vec::with_capacity(lattice.nodes_at(*s).len());
            for (k, node) in lattice.nodes_at(*s).iter().enumerate() {
                let stopped_before: f64 = (0..i)
                    .map(|j| {
                        let anc = node.ancestor(self.atom_steps[j]).expect("history");
                        out[j][lattice.index_of(&anc).expect("on lattice")]
                    })
                    .sum();
                row.push((1.0 - stopped_before).max(0.0) * self.hazards[i][k]);
            }
            out.push(row);
        }
        Ok(out)
    }

    /// Replaces hazards on nodes that no path reaches alive by the
    /// convention 0 (1 at the final atom). History lattices only.
    pub fn canonical(&self, lattice: &Lattice) -> Result<Self> {
        let masses = self.path_masses(lattice)?;
        Self::from_absolute_masses(lattice, self.atom_steps.clone(), &masses)
    }

    pub fn to_dump(&self, lattice: &Lattice) -> Result<KernelDump> {
        self.check_lattice(lattice)?;
        let mut entries = Vec::new();
        for (i, s) in self.atom_steps.iter().enumerate() {
            for (k, node) in lattice.nodes_at(*s).iter().enumerate() {
                entries.push(KernelEntry {
                    node: *node,
                    atom_time: self.spec.time_of(*s),
                    q: self.hazards[i][k],
                });
            }
        }
        Ok(KernelDump {
            lattice: self.spec.clone(),
            entries,
        })
    }

    /// Rebuilds a kernel from a dump; missing hazards default to 0.
    pub fn from_dump(lattice: &Lattice, dump: &KernelDump) -> Result<Self> {
        if &dump.lattice != lattice.spec() {
            return Err(Error::InvalidKernel("dump was written for a different lattice".into()));
        }
        let mut steps: Vec<usize> = dump
            .entries
            .iter()
            .map(|e| lattice.spec().step_of_time(e.atom_time))
            .collect::<Result<_>>()?;
        steps.sort_unstable();
        steps.dedup();
        let mut hazards: Vec<Vec<f64>> = steps.iter().map(|s| vec![0.0; lattice.nodes_at(*s).len()]).collect();
        for e in &dump.entries {
            let s = lattice.spec().step_of_time(e.atom_time)?;
            if e.node.step() != s {
                return Err(Error::InvalidKernel(format!("node {} is not at time {}", e.node, e.atom_time)));
            }
            let i = steps.iter().position(|x| *x == s).expect("collected");
            let k = lattice.index_of(&e.node).ok_or_else(|| Error::ForeignNode {
                node: e.node.to_string(),
                reason: "not on the kernel lattice".into(),
            })?;
            hazards[i][k] = e.q;
        }
        Self::new(lattice, steps, hazards)
    }
}

fn check_steps(lattice: &Lattice, steps: &[usize]) -> Result<()> {
    if steps.is_empty() {
        return Err(Error::InvalidKernel("kernel needs at least one atom".into()));
    }
    if steps[0] == 0 || steps.windows(2).any(|w| w[0] >= w[1]) || *steps.last().unwrap() > lattice.depth() {
        return Err(Error::Coverage(format!(
            "atom steps {steps:?} must be increasing within 1..={}",
            lattice.depth()
        )));
    }
    Ok(())
}

fn require_history(lattice: &Lattice) -> Result<()> {
    if lattice.is_history() {
        Ok(())
    } else {
        Err(Error::Config("operation needs a history-mode lattice".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelEntry {
    pub node: NodeId,
    pub atom_time: f64,
    pub q: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelDump {
    pub lattice: LatticeSpec,
    pub entries: Vec<KernelEntry>,
}

/// A kernel obtained by re-routing stop mass along a right-shift coupling,
/// with the realized `E|τ − τ'|` of the construction.
#[derive(Clone, Debug)]
pub struct PushedKernel {
    pub kernel: StoppingKernel,
    pub expected_displacement: f64,
}

/// Re-routes each unit of stop mass at source atom `tᵢ` to later atoms in
/// the proportions of coupling row `i`. Adaptedness is preserved because a
/// mass decided at `tᵢ` is only spread over times `≥ tᵢ`.
pub fn push_right(
    kernel: &StoppingKernel,
    lattice: &Lattice,
    coupling: &MonotoneCoupling<f64>,
) -> Result<PushedKernel> {
    require_history(lattice)?;
    kernel.check_lattice(lattice)?;
    let source = kernel.marginal_of(lattice)?;
    let cs = coupling.source();
    let same = cs.len() == source.len()
        && cs
            .iter()
            .zip(source.iter())
            .all(|((a, w), (b, v))| (a - b).abs() <= MERGE_TOL && (w - v).abs() <= 1e-9);
    if !same {
        return Err(Error::InvalidKernel(format!(
            "coupling source {cs:?} is not the kernel marginal {source:?}"
        )));
    }
    if !coupling.is_rightward() {
        return Err(Error::RightShift("coupling moves mass to an earlier time".into()));
    }
    let target = coupling.target();
    let target_steps = lattice.spec().atom_steps(target)?;
    let kernel_times = kernel.atom_times();
    // coupling source index -> kernel atom index
    let src_atom: Vec<usize> = cs
        .atoms()
        .iter()
        .map(|t| {
            kernel_times
                .iter()
                .position(|k| (k - t).abs() <= MERGE_TOL)
                .expect("marginal atoms are kernel atoms")
        })
        .collect();

    let masses = kernel.path_masses(lattice)?;
    let mut new_masses: Vec<Vec<f64>> = target_steps.iter().map(|s| vec![0.0; lattice.nodes_at(*s).len()]).collect();
    let mut displacement = 0.0;
    for (ci, row) in coupling.rows().iter().enumerate() {
        let i = src_atom[ci];
        let a_i = cs.weights()[ci];
        let s_i = kernel.atom_steps()[i];
        let t_i = kernel_times[i];
        for (j, c) in row {
            if *c == 0.0 {
                continue;
            }
            let frac = c / a_i;
            let s_j = target_steps[*j];
            let shift = (target.atoms()[*j] - t_i).abs();
            for (k, m) in masses[i].iter().enumerate() {
                if *m == 0.0 {
                    continue;
                }
                let node = lattice.nodes_at(s_i)[k];
                displacement += lattice.node_prob(&node) * m * frac * shift;
                // every continuation of `node` to step s_j inherits the mass
                let span = s_j - s_i;
                for tail in 0..1u32 << span {
                    let bits = node.bits().expect("history") | tail << s_i;
                    new_masses[*j][bits as usize] += m * frac;
                }
            }
        }
    }
    let pushed = StoppingKernel::from_absolute_masses(lattice, target_steps, &new_masses)?;
    Ok(PushedKernel {
        kernel: pushed,
        expected_displacement: displacement,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub n_paths: usize,
    pub seed: u64,
    pub empirical_marginal: DiscreteMeasure<f64>,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Default, Clone)]
struct ShardTally {
    counts: Vec<u64>,
    sum: f64,
    sum_sq: f64,
}

/// Forward Monte Carlo: fair coins for the driver and one uniform per stop
/// decision. Paths are split into fixed shards of [`SIM_SHARD`] paths, each
/// with its own ChaCha stream of the master seed, so results do not depend
/// on the number of worker threads.
pub fn simulate(
    kernel: &StoppingKernel,
    lattice: &Lattice,
    cost: &CostSpec,
    n_paths: usize,
    seed: u64,
) -> Result<SimulationReport> {
    kernel.check_lattice(lattice)?;
    cost.check_lattice(lattice.spec())?;
    if n_paths == 0 {
        return Err(Error::Config("n_paths must be at least 1".into()));
    }
    let r = kernel.atom_steps.len();
    let last = *kernel.atom_steps.last().expect("nonempty");
    // cost per (atom, node index), computed once
    let payoffs: Vec<Vec<f64>> = kernel
        .atom_steps
        .iter()
        .map(|s| {
            lattice
                .nodes_at(*s)
                .iter()
                .map(|n| cost.evaluate(&lattice.state(n)))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let step_atom: Vec<Option<usize>> = (0..=last).map(|s| kernel.atom_at_step(s)).collect();

    let shards = n_paths.div_ceil(SIM_SHARD);
    let tallies: Vec<ShardTally> = (0..shards)
        .into_par_iter()
        .map(|shard| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(shard as u64);
            let paths = SIM_SHARD.min(n_paths - shard * SIM_SHARD);
            let mut tally = ShardTally {
                counts: vec![0; r],
                ..Default::default()
            };
            for _ in 0..paths {
                let mut node = lattice.root();
                for step in 1..=last {
                    let (up, down) = lattice.children(&node).expect("below depth");
                    node = if rng.gen::<bool>() { up } else { down };
                    if let Some(i) = step_atom[step] {
                        let k = lattice.index_of(&node).expect("on lattice");
                        let u: f64 = rng.gen();
                        if u < kernel.hazards[i][k] {
                            let x = payoffs[i][k];
                            tally.counts[i] += 1;
                            tally.sum += x;
                            tally.sum_sq += x * x;
                            break;
                        }
                    }
                }
            }
            tally
        })
        .collect();

    let mut counts = vec![0u64; r];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for t in &tallies {
        for (c, x) in counts.iter_mut().zip(&t.counts) {
            *c += x;
        }
        sum += t.sum;
        sum_sq += t.sum_sq;
    }
    let n = n_paths as f64;
    let mean = sum / n;
    let var = if n_paths > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    let empirical_marginal = DiscreteMeasure::normalized(
        kernel
            .atom_times()
            .into_iter()
            .zip(counts.iter().map(|c| *c as f64 / n)),
    )?;
    Ok(SimulationReport {
        n_paths,
        seed,
        empirical_marginal,
        mean,
        stderr: (var / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::ScalarFn;
    use crate::lattice::LatticeSpec;

    fn hist(depth: usize) -> Lattice {
        Lattice::build(LatticeSpec::history(depth, 1.0)).unwrap()
    }

    // q(u) = 1, q(d) = 0 at t = 1, forced stop at t = 2
    fn up_stops(l: &Lattice) -> StoppingKernel {
        StoppingKernel::from_fn(l, vec![1, 2], |_, n| if n.level() > 0 { 1.0 } else { 0.0 }).unwrap()
    }

    #[test]
    fn marginal_examples() {
        let l = hist(2);
        let first = StoppingKernel::from_fn(&l, vec![1], |_, _| 1.0).unwrap();
        assert_eq!(first.marginal_of(&l).unwrap(), DiscreteMeasure::dirac(1.0).unwrap());
        let half = DiscreteMeasure::from_pairs([(1.0, 0.5), (2.0, 0.5)]).unwrap();
        assert_eq!(up_stops(&l).marginal_of(&l).unwrap(), half);
        let coin = StoppingKernel::from_fn(&l, vec![1, 2], |_, _| 0.5).unwrap();
        assert_eq!(coin.marginal_of(&l).unwrap(), half);
    }

    #[test]
    fn objective_examples() {
        let l = hist(2);
        let ind = CostSpec::terminal(ScalarFn::IndicatorGe { threshold: 1.0 });
        assert_eq!(up_stops(&l).objective_value(&l, &ind).unwrap(), 0.5);
        let id = CostSpec::terminal(ScalarFn::Identity);
        assert_eq!(up_stops(&l).objective_value(&l, &id).unwrap(), 0.0);
        let sq = CostSpec::terminal(ScalarFn::Square);
        assert_eq!(up_stops(&l).objective_value(&l, &sq).unwrap(), 1.5);
    }

    #[test]
    fn final_hazard_is_forced() {
        let l = hist(2);
        assert!(StoppingKernel::new(&l, vec![1, 2], vec![vec![0.0, 1.0], vec![0.5; 4]]).is_err());
        assert!(StoppingKernel::new(&l, vec![1, 2], vec![vec![1.5, 1.0], vec![1.0; 4]]).is_err());
        assert!(StoppingKernel::new(&l, vec![2, 1], vec![vec![1.0; 4], vec![1.0; 2]]).is_err());
        assert!(StoppingKernel::new(&l, vec![3], vec![vec![1.0; 8]]).is_err());
    }

    #[test]
    fn adaptedness_is_enforced_for_path_rules() {
        let l = hist(3);
        // peeks at the move after t = 1
        let peek = StoppingKernel::from_path_rule(&l, vec![1, 3], |leaf, i| {
            if i == 0 && leaf.bits().unwrap() & 0b10 != 0 { 1.0 } else if i == 0 { 0.0 } else { 1.0 }
        });
        assert!(matches!(peek, Err(Error::InvalidKernel(_))));
        let fair = StoppingKernel::from_path_rule(&l, vec![1, 3], |leaf, i| {
            if i == 0 { (leaf.bits().unwrap() & 1) as f64 } else { 1.0 }
        })
        .unwrap();
        assert_eq!(fair.hazards()[0], vec![0.0, 1.0]);
    }

    #[test]
    fn push_right_examples() {
        let l = hist(3);
        let k = StoppingKernel::from_fn(&l, vec![1], |_, _| 1.0).unwrap();
        let src = k.marginal_of(&l).unwrap();
        let tgt = DiscreteMeasure::dirac(2.0).unwrap();
        let pushed = push_right(&k, &l, &src.monotone_coupling(&tgt)).unwrap();
        assert_eq!(pushed.kernel.marginal_of(&l).unwrap(), tgt);
        assert_eq!(pushed.expected_displacement, 1.0);

        let k = up_stops(&Lattice::build(LatticeSpec::history(3, 1.0)).unwrap());
        let src = k.marginal_of(&l).unwrap();
        let same = push_right(&k, &l, &src.monotone_coupling(&src)).unwrap();
        assert_eq!(same.kernel.hazards(), k.hazards());
        assert_eq!(same.expected_displacement, 0.0);

        let tgt = DiscreteMeasure::from_pairs([(2.0, 0.5), (3.0, 0.5)]).unwrap();
        let shifted = push_right(&k, &l, &src.monotone_coupling(&tgt)).unwrap();
        assert_eq!(shifted.kernel.marginal_of(&l).unwrap(), tgt);
        assert!((shifted.expected_displacement - 1.0).abs() < 1e-12);
    }

    #[test]
    fn push_right_rejects_left_moves() {
        let l = hist(3);
        let k = StoppingKernel::from_fn(&l, vec![2], |_, _| 1.0).unwrap();
        let src = k.marginal_of(&l).unwrap();
        let left = src.monotone_coupling(&DiscreteMeasure::dirac(1.0).unwrap());
        assert!(matches!(push_right(&k, &l, &left), Err(Error::RightShift(_))));
        let beyond = src.monotone_coupling(&DiscreteMeasure::dirac(7.0).unwrap());
        assert!(matches!(push_right(&k, &l, &beyond), Err(Error::Coverage(_))));
        let off = src.monotone_coupling(&DiscreteMeasure::dirac(2.5).unwrap());
        assert!(matches!(push_right(&k, &l, &off), Err(Error::Coverage(_))));
    }

    #[test]
    fn simulation_is_reproducible_and_consistent() {
        let l = hist(2);
        let k = up_stops(&l);
        let ind = CostSpec::terminal(ScalarFn::IndicatorGe { threshold: 1.0 });
        let a = simulate(&k, &l, &ind, 200_000, 7).unwrap();
        let b = simulate(&k, &l, &ind, 200_000, 7).unwrap();
        assert_eq!(a, b);
        assert!((a.mean - 0.5).abs() <= 4.0 * a.stderr);
        // deterministic kernel: empirical marginal within 3 binomial stderrs
        let p = a.empirical_marginal.mass_at(&1.0);
        assert!((p - 0.5).abs() <= 3.0 * (0.25f64 / 200_000.0).sqrt());
        let c = simulate(&k, &l, &ind, 200_000, 8).unwrap();
        assert_ne!(a.mean, c.mean);
    }

    #[test]
    fn recombining_markov_kernel() {
        let l = Lattice::build(LatticeSpec::recombining(3, 1.0)).unwrap();
        let k = StoppingKernel::from_fn(&l, vec![1, 3], |_, n| if n.level() > 0 { 1.0 } else { 0.0 }).unwrap();
        let mu = k.marginal_of(&l).unwrap();
        assert_eq!(mu.weights(), &[0.5, 0.5]);
        let sq = CostSpec::terminal(ScalarFn::Square);
        assert!((k.objective_value(&l, &sq).unwrap() - mu.mean()).abs() < 1e-12);
        assert!(k.path_masses(&l).is_err());
    }

    #[test]
    fn dump_roundtrip() {
        let l = hist(2);
        let k = up_stops(&l);
        let dump = k.to_dump(&l).unwrap();
        let json = serde_json::to_string(&dump).unwrap();
        let back: KernelDump = serde_json::from_str(&json).unwrap();
        assert_eq!(StoppingKernel::from_dump(&l, &back).unwrap(), k);
        assert!(json.contains(r#""node":"h/u""#));
    }
}
