//! Brute-force value of the constrained problem on a small history tree.
//!
//! Adapted randomized stopping rules with law `μ` form a polytope in the
//! per-path stop masses `m(node, atom)`; the objective is linear, so the
//! value is an LP optimum.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::cost::CostSpec;
use crate::error::{Error, Result};
use crate::lattice::{Lattice, LatticeMode, LatticeSpec, NodeId};
use crate::measures::DiscreteMeasure;
use crate::rst::StoppingKernel;
use crate::scalar::Scalar;
use crate::simplex::{solve_lp, Certificate, LinearProgram, LpSolution, LpStatus};

pub const ORACLE_MAX_DEPTH: usize = 12;
/// Denominator bound used when rationalizing measure weights.
const RATIONAL_DENOM: u64 = 1 << 20;

#[derive(Clone, Debug)]
pub struct LpModel<S> {
    spec: LatticeSpec,
    atom_steps: Vec<usize>,
    /// `(atom, node)` per column.
    variables: Vec<(usize, NodeId)>,
    path_rows: usize,
    pub lp: LinearProgram<S>,
}

impl<S> LpModel<S> {
    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn variables(&self) -> &[(usize, NodeId)] {
        &self.variables
    }

    pub fn path_rows(&self) -> usize {
        self.path_rows
    }

    pub fn atom_rows(&self) -> usize {
        self.atom_steps.len()
    }
}

fn check_spec(spec: &LatticeSpec, mu: &DiscreteMeasure<f64>) -> Result<Vec<usize>> {
    spec.validate()?;
    if spec.mode != LatticeMode::History {
        return Err(Error::Config("the oracle runs on a history-mode lattice".into()));
    }
    if spec.depth > ORACLE_MAX_DEPTH {
        return Err(Error::SizeGuard(format!(
            "depth {} exceeds the oracle limit {ORACLE_MAX_DEPTH}",
            spec.depth
        )));
    }
    spec.atom_steps(mu)
}

/// Builds the LP with the given conversions for probabilities, costs and
/// measure weights.
fn build_with<S: Scalar>(
    spec: &LatticeSpec,
    cost: &CostSpec,
    mu: &DiscreteMeasure<f64>,
    prob: impl Fn(usize) -> S,
    value: impl Fn(f64) -> S,
    weights: Vec<S>,
) -> Result<LpModel<S>> {
    let steps = check_spec(spec, mu)?;
    let check = spec.clone().with_max(spec.augment_max || cost.requires_max());
    cost.check_lattice(&check)?;
    let lattice = Lattice::build(check.clone())?;
    let last = *steps.last().expect("nonempty");
    let mut variables = Vec::new();
    let mut offsets = Vec::with_capacity(steps.len());
    for (i, s) in steps.iter().enumerate() {
        offsets.push(variables.len());
        variables.extend((0..1u32 << s).map(|bits| (i, NodeId::history(*s, bits))));
    }
    let n = variables.len();
    let paths = 1usize << last;
    let mut a = Vec::with_capacity(paths + steps.len());
    for leaf in 0..paths as u32 {
        let mut row = vec![S::zero(); n];
        for (i, s) in steps.iter().enumerate() {
            row[offsets[i] + (leaf & ((1 << s) - 1)) as usize] = S::one();
        }
        a.push(row);
    }
    let mut c = Vec::with_capacity(n);
    for (i, s) in steps.iter().enumerate() {
        let mut row = vec![S::zero(); n];
        let p = prob(*s);
        for k in 0..1usize << s {
            row[offsets[i] + k] = p.clone();
        }
        a.push(row);
    }
    for (_, node) in &variables {
        let v = cost.evaluate(&lattice.state(node))?;
        c.push(prob(node.step()) * value(v));
    }
    let mut b = vec![S::one(); paths];
    b.extend(weights);
    Ok(LpModel {
        spec: check,
        atom_steps: steps,
        variables,
        path_rows: paths,
        lp: LinearProgram { a, b, c },
    })
}

pub fn build_lp(spec: &LatticeSpec, cost: &CostSpec, mu: &DiscreteMeasure<f64>) -> Result<LpModel<f64>> {
    build_with(spec, cost, mu, |s| 0.5f64.powi(s as i32), |v| v, mu.weights().to_vec())
}

/// Exact model: node probabilities are dyadic rationals, cost values are
/// taken at their exact binary value, and measure weights are rationalized
/// with bounded denominators so that they sum to one exactly.
pub fn build_lp_exact(spec: &LatticeSpec, cost: &CostSpec, mu: &DiscreteMeasure<f64>) -> Result<LpModel<BigRational>> {
    let weights = rationalize(mu.weights())?;
    build_with(
        spec,
        cost,
        mu,
        |s| BigRational::new(BigInt::one(), BigInt::one() << s),
        |v| BigRational::from_float(v).expect("finite cost"),
        weights,
    )
}

fn rationalize(weights: &[f64]) -> Result<Vec<BigRational>> {
    let mut out = Vec::with_capacity(weights.len());
    let mut total = BigRational::zero();
    for w in &weights[..weights.len() - 1] {
        let q = num_rational::Ratio::<i64>::approximate_float(*w)
            .filter(|q| (*q.denom() as u64) <= RATIONAL_DENOM)
            .map(|q| BigRational::new(BigInt::from(*q.numer()), BigInt::from(*q.denom())))
            .or_else(|| BigRational::from_float(*w))
            .ok_or_else(|| Error::InvalidMeasure(format!("weight {w} is not finite")))?;
        total += q.clone();
        out.push(q);
    }
    let last = BigRational::one() - total;
    if last < BigRational::zero() {
        return Err(Error::InvalidMeasure("weights exceed one after rationalizing".into()));
    }
    out.push(last);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub status: LpStatus,
    pub value: Option<f64>,
    /// Exact optimum as `p/q` when solved in rational arithmetic.
    pub exact_value: Option<String>,
    pub certificate: Option<Certificate>,
    pub pivots: usize,
    #[serde(skip)]
    pub kernel: Option<StoppingKernel>,
}

impl<S: Scalar> LpModel<S> {
    /// Converts an LP solution to a kernel on the model's history lattice.
    pub fn to_kernel(&self, lattice: &Lattice, sol: &LpSolution<S>) -> Result<StoppingKernel> {
        if lattice.spec().depth < *self.atom_steps.last().expect("nonempty") || !lattice.is_history() {
            return Err(Error::Config("kernel lattice does not cover the model".into()));
        }
        let mut masses: Vec<Vec<f64>> = self.atom_steps.iter().map(|s| vec![0.0; 1 << s]).collect();
        for ((i, node), x) in self.variables.iter().zip(&sol.x) {
            masses[*i][node.bits().expect("history") as usize] = x.to_f64_lossy().max(0.0);
        }
        StoppingKernel::from_absolute_masses(lattice, self.atom_steps.clone(), &masses)
    }
}

pub fn solve_model<S: Scalar>(model: &LpModel<S>) -> Result<OracleResult> {
    let sol = solve_lp(&model.lp);
    let lattice = Lattice::build(model.spec.clone())?;
    let (kernel, certificate) = match sol.status {
        LpStatus::Optimal => (Some(model.to_kernel(&lattice, &sol)?), Some(model.lp.certificate(&sol))),
        _ => (None, None),
    };
    Ok(OracleResult {
        status: sol.status,
        value: sol.value.as_ref().map(|v| v.to_f64_lossy()),
        exact_value: if S::is_exact() {
            sol.value.as_ref().map(|v| v.to_string())
        } else {
            None
        },
        certificate,
        pivots: sol.pivots,
        kernel,
    })
}

/// LP value in floating point; `exact` re-solves in rational arithmetic.
pub fn oracle_value(spec: &LatticeSpec, cost: &CostSpec, mu: &DiscreteMeasure<f64>, exact: bool) -> Result<OracleResult> {
    let out = if exact {
        solve_model(&build_lp_exact(spec, cost, mu)?)?
    } else {
        solve_model(&build_lp(spec, cost, mu)?)?
    };
    if out.status == LpStatus::Infeasible {
        return Err(Error::Infeasible);
    }
    Ok(out)
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
    fn model_shape() {
        let m = build_lp(&LatticeSpec::history(2, 1.0), &ind(), &half()).unwrap();
        let names: Vec<String> = m.variables().iter().map(|(i, n)| format!("{n}@{i}")).collect();
        assert_eq!(names, ["h/d@0", "h/u@0", "h/dd@1", "h/ud@1", "h/du@1", "h/uu@1"]);
        assert_eq!((m.path_rows(), m.atom_rows()), (4, 2));
        assert_eq!(m.lp.rows(), 6);
    }

    #[test]
    fn indicator_instance() {
        let spec = LatticeSpec::history(2, 1.0);
        let r = oracle_value(&spec, &ind(), &half(), false).unwrap();
        assert_eq!(r.value, Some(0.5));
        let l = Lattice::build(spec.clone()).unwrap();
        let k = r.kernel.unwrap();
        assert_eq!(k.hazard(&l, 0, &"h/u".parse().unwrap()), Some(1.0));
        assert_eq!(k.hazard(&l, 0, &"h/d".parse().unwrap()), Some(0.0));
        assert!(r.certificate.unwrap().duality_gap < 1e-12);

        let exact = oracle_value(&spec, &ind(), &half(), true).unwrap();
        assert_eq!(exact.exact_value.as_deref(), Some("1/2"));
    }

    #[test]
    fn point_mass_and_martingale_cost() {
        let spec = LatticeSpec::history(3, 1.0);
        let two = DiscreteMeasure::dirac(2.0).unwrap();
        let r = oracle_value(&spec, &CostSpec::terminal(ScalarFn::Square), &two, false).unwrap();
        assert!((r.value.unwrap() - 2.0).abs() < 1e-12);
        let l = Lattice::build(spec.clone()).unwrap();
        assert_eq!(r.kernel.unwrap().marginal_of(&l).unwrap(), two);

        let mu = DiscreteMeasure::from_pairs([(1.0, 0.2), (2.0, 0.3), (3.0, 0.5)]).unwrap();
        let id = oracle_value(&spec, &CostSpec::terminal(ScalarFn::Identity), &mu, false).unwrap();
        assert!(id.value.unwrap().abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_instances() {
        let off = DiscreteMeasure::dirac(5.0).unwrap();
        assert!(matches!(
            build_lp(&LatticeSpec::history(3, 1.0), &ind(), &off),
            Err(Error::Coverage(_))
        ));
        assert!(matches!(
            build_lp(&LatticeSpec::history(13, 1.0), &ind(), &half()),
            Err(Error::SizeGuard(_))
        ));
        assert!(build_lp(&LatticeSpec::recombining(2, 1.0), &ind(), &half()).is_err());
    }
}
