//! Stability experiments: right-approximation sweeps, concavity in the
//! constraint, the push-right displacement identity and a usc probe.

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::CostSpec;
use crate::dpp::{solve, SolveOptions};
use crate::error::{Error, Result};
use crate::lattice::{Lattice, LatticeMode, LatticeSpec};
use crate::measures::DiscreteMeasure;
use crate::oracle::oracle_value;
use crate::rst::{push_right, StoppingKernel};

/// Residual allowed when values come from the LP oracle.
pub const ORACLE_SLACK: f64 = 1e-9;
/// Tolerance of the displacement identity.
pub const PUSH_TOL: f64 = 1e-12;

/// How a value `v(μ)` is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Valuer {
    Solver { resolution: u32 },
    /// LP on the history tree of the same geometry.
    Oracle,
}

impl Valuer {
    /// Returns `(value, slack)`.
    pub fn value(&self, spec: &LatticeSpec, cost: &CostSpec, mu: &DiscreteMeasure<f64>) -> Result<(f64, f64)> {
        match self {
            Self::Solver { resolution } => {
                let t = solve(spec, cost, mu, &SolveOptions::new(*resolution))?;
                Ok((t.value(), t.slack()))
            }
            Self::Oracle => {
                let hist = spec.clone().with_mode(LatticeMode::History);
                let r = oracle_value(&hist, cost, mu, false)?;
                let v = r.value.ok_or(Error::Infeasible)?;
                Ok((v, ORACLE_SLACK))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub grid_len: usize,
    /// `W₁(μ, μₙ)`
    pub w1_to_mu: f64,
    /// `W₁(μₙ, μ_fine)`
    pub w1_gap: f64,
    pub value: f64,
    pub slack: f64,
    /// `φ(W₁(μₙ, μ_fine)) + slack`, absent without a modulus.
    pub bound: Option<f64>,
    pub pass: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// Always "finest_grid_projection": the continuum limit is not computed.
    pub reference: String,
    pub rows: Vec<SweepRow>,
    pub modulus_slope: Option<f64>,
    /// `|v(μₙ) − v(μ_fine)|` nonincreasing in `n` up to the slacks.
    pub gaps_nonincreasing: bool,
    /// `None` when the cost has no modulus and nothing is asserted.
    pub pass: Option<bool>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,w1_gap,value,bound\n");
        for r in &self.rows {
            let bound = r.bound.map(|b| b.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.n, r.w1_gap, r.value, bound));
        }
        out
    }
}

fn contains(grid: &[f64], t: f64) -> bool {
    grid.iter().any(|g| (g - t).abs() <= 1e-9 * t.abs().max(1.0))
}

/// Right-approximation sweep over grids ordered coarse to fine.
pub fn convergence_sweep(
    spec: &LatticeSpec,
    cost: &CostSpec,
    mu: &DiscreteMeasure<f64>,
    grids: &[Vec<f64>],
    valuer: Valuer,
) -> Result<SweepReport> {
    if grids.is_empty() {
        return Err(Error::Config("convergence sweep needs at least one grid".into()));
    }
    for (n, pair) in grids.windows(2).enumerate() {
        if let Some(t) = pair[0].iter().find(|t| !contains(&pair[1], **t)) {
            return Err(Error::Config(format!(
                "grid {n} is not contained in grid {}: point {t} missing",
                n + 1
            )));
        }
    }
    let projections = grids
        .iter()
        .map(|g| mu.ceiling_project(g))
        .collect::<Result<Vec<_>>>()?;
    let values = projections
        .par_iter()
        .map(|m| valuer.value(spec, cost, m))
        .collect::<Result<Vec<_>>>()?;
    let fine = projections.last().expect("nonempty");
    let (v_fine, slack_fine) = *values.last().expect("nonempty");
    let modulus = cost.modulus(Some(spec));
    let mut rows = Vec::with_capacity(grids.len());
    for (n, (m, (v, slack))) in projections.iter().zip(&values).enumerate() {
        let w1_gap = m.w1_distance(fine);
        let bound = modulus.map(|p| p.eval(w1_gap) + slack + slack_fine);
        rows.push(SweepRow {
            n,
            grid_len: grids[n].len(),
            w1_to_mu: m.w1_distance(mu),
            w1_gap,
            value: *v,
            slack: *slack,
            bound,
            pass: bound.map(|b| (v - v_fine).abs() <= b),
        });
    }
    let gaps_nonincreasing = rows.windows(2).all(|w| {
        (w[1].value - v_fine).abs() <= (w[0].value - v_fine).abs() + w[0].slack + w[1].slack + 2.0 * slack_fine
    });
    let pass = modulus.map(|_| gaps_nonincreasing && rows.iter().all(|r| r.pass == Some(true)));
    Ok(SweepReport {
        reference: "finest_grid_projection".into(),
        rows,
        modulus_slope: modulus.map(|m| m.slope),
        gaps_nonincreasing,
        pass,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcavityRow {
    /// `λ` as `p/q`.
    pub lambda: String,
    /// `v(λμ₁ + (1−λ)μ₂)`
    pub left: f64,
    /// `λv(μ₁) + (1−λ)v(μ₂)`
    pub right: f64,
    pub slack: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcavityReport {
    pub v1: f64,
    pub v2: f64,
    pub rows: Vec<ConcavityRow>,
    pub pass: bool,
}

/// Checks `v(λμ₁+(1−λ)μ₂) ≥ λv(μ₁)+(1−λ)v(μ₂) − slack` for each rational `λ`.
pub fn concavity_check(
    spec: &LatticeSpec,
    cost: &CostSpec,
    mu1: &DiscreteMeasure<f64>,
    mu2: &DiscreteMeasure<f64>,
    lambdas: &[Ratio<u32>],
    valuer: Valuer,
) -> Result<ConcavityReport> {
    for l in lambdas {
        if *l.numer() == 0 || l.numer() >= l.denom() {
            return Err(Error::Config(format!("lambda {l} is not in (0, 1)")));
        }
    }
    let (v1, s1) = valuer.value(spec, cost, mu1)?;
    let (v2, s2) = valuer.value(spec, cost, mu2)?;
    let rows = lambdas
        .par_iter()
        .map(|l| {
            let lf = *l.numer() as f64 / *l.denom() as f64;
            let mixed = DiscreteMeasure::mix(mu1, mu2, lf)?;
            let (left, s) = valuer.value(spec, cost, &mixed)?;
            let right = lf * v1 + (1.0 - lf) * v2;
            let slack = s + lf * s1 + (1.0 - lf) * s2;
            Ok(ConcavityRow {
                lambda: l.to_string(),
                left,
                right,
                slack,
                pass: left >= right - slack,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConcavityReport {
        v1,
        v2,
        pass: rows.iter().all(|r| r.pass),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PushRow {
    pub target: usize,
    /// `E|τ − τ'|` of the pushed kernel.
    pub displacement: f64,
    pub w1: f64,
    pub residual: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PushReport {
    pub rows: Vec<PushRow>,
    pub pass: bool,
}

/// Pushes `kernel` onto each target and compares the displacement with W₁.
pub fn push_right_identity_check(
    lattice: &Lattice,
    kernel: &StoppingKernel,
    targets: &[DiscreteMeasure<f64>],
) -> Result<PushReport> {
    let source = kernel.marginal_of(lattice)?;
    let rows = targets
        .par_iter()
        .enumerate()
        .map(|(i, target)| {
            let coupling = source.monotone_coupling(target);
            let pushed = push_right(kernel, lattice, &coupling)?;
            let w1 = source.w1_distance(target);
            let residual = (pushed.expected_displacement - w1).abs();
            Ok(PushRow {
                target: i,
                displacement: pushed.expected_displacement,
                w1,
                residual,
                pass: residual <= PUSH_TOL,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PushReport {
        pass: rows.iter().all(|r| r.pass),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UscReport {
    pub value: f64,
    pub slack: f64,
    /// `(ε, W₁(μₙ, μ), v(μₙ))` along the sequence.
    pub sequence: Vec<(f64, f64, f64)>,
    /// `max(v(μₙ) − v(μ), 0)` per term.
    pub excess: Vec<f64>,
    pub pass: bool,
}

/// Upper-semicontinuity probe along the right-shift sequence
/// `μₙ = (1 − 2⁻ⁿ)μ + 2⁻ⁿ·ceil(μ, coarse)`, `n = 1..=terms`.
///
/// Passes when the excess over `v(μ)` is nonincreasing up to slack and the
/// last excess is below `slack + √εₙ`. This is a finite probe, not a proof
/// of usc over arbitrary sequences.
pub fn usc_probe(
    spec: &LatticeSpec,
    cost: &CostSpec,
    mu: &DiscreteMeasure<f64>,
    coarse: &[f64],
    terms: u32,
    valuer: Valuer,
) -> Result<UscReport> {
    if terms == 0 {
        return Err(Error::Config("usc probe needs at least one term".into()));
    }
    let far = mu.ceiling_project(coarse)?;
    let (value, slack) = valuer.value(spec, cost, mu)?;
    let sequence = (1..=terms)
        .into_par_iter()
        .map(|n| {
            let eps = 0.5f64.powi(n as i32);
            let m = DiscreteMeasure::mix(mu, &far, 1.0 - eps)?;
            let (v, s) = valuer.value(spec, cost, &m)?;
            Ok((eps, m.w1_distance(mu), v, s))
        })
        .collect::<Result<Vec<_>>>()?;
    let excess: Vec<f64> = sequence.iter().map(|(_, _, v, _)| (v - value).max(0.0)).collect();
    let monotone = excess
        .windows(2)
        .zip(sequence.windows(2))
        .all(|(e, s)| e[1] <= e[0] + s[0].3 + s[1].3 + 2.0 * slack);
    let (eps, _, _, s_last) = *sequence.last().expect("nonempty");
    let pass = monotone && *excess.last().expect("nonempty") <= slack + s_last + eps.sqrt();
    Ok(UscReport {
        value,
        slack,
        sequence: sequence.into_iter().map(|(e, w, v, _)| (e, w, v)).collect(),
        excess,
        pass,
    })
}

/// Dyadic grids `{T·j/2ⁿ}` for `n = 0..=levels`, restricted to lattice times.
pub fn dyadic_grids(spec: &LatticeSpec, levels: u32) -> Vec<Vec<f64>> {
    (0..=levels)
        .map(|n| {
            let parts = 1usize << n;
            (1..=parts)
                .filter(|j| (spec.depth * j).is_multiple_of(parts))
                .map(|j| spec.time_of(spec.depth * j / parts))
                .collect()
        })
        .collect()
}
