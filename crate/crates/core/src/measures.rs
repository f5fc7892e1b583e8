//! Finitely supported probability measures on (0, ∞) and their W1 geometry.
//!
//! Measures are immutable after construction. Atoms closer than
//! [`MERGE_TOL`] are merged, zero-weight atoms are dropped, and the weights
//! must sum to one within [`WEIGHT_TOL`].

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::{sum, Scalar};

/// Atoms closer than this are merged on construction.
pub const MERGE_TOL: f64 = 1e-9;
/// Allowed deviation of the total mass from one.
pub const WEIGHT_TOL: f64 = 1e-12;
/// Allowed deviation of the total mass when ingesting JSON; the weights are
/// renormalized afterwards.
pub const INGEST_TOL: f64 = 1e-9;

fn residual_tol<S: Scalar>() -> f64 {
    if S::is_exact() {
        0.0
    } else {
        1e-14
    }
}

#[derive(Clone, PartialEq)]
pub struct DiscreteMeasure<S> {
    atoms: Vec<S>,
    weights: Vec<S>,
}

impl<S: Scalar> fmt::Debug for DiscreteMeasure<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut list = f.debug_list();
        for (t, w) in self.iter() {
            list.entry(&format_args!("{:?}@{:?}", w, t));
        }
        list.finish()
    }
}

impl<S: Scalar> DiscreteMeasure<S> {
    pub fn new(atoms: Vec<S>, weights: Vec<S>) -> Result<Self> {
        if atoms.len() != weights.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} atoms but {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        Self::from_pairs(atoms.into_iter().zip(weights))
    }

    pub fn from_pairs<I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, S)>,
    {
        let (atoms, weights) = Self::canonical(pairs)?;
        let total = sum(&weights);
        if !S::close(&total, &S::one(), WEIGHT_TOL) {
            return Err(Error::InvalidMeasure(format!(
                "weights sum to {} instead of 1",
                total.to_f64_lossy()
            )));
        }
        Ok(Self { atoms, weights })
    }

    /// Builds a measure from nonnegative weights of positive total, dividing
    /// by the total.
    pub fn normalized<I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, S)>,
    {
        let (atoms, weights) = Self::canonical(pairs)?;
        let total = sum(&weights);
        if total <= S::zero() {
            return Err(Error::InvalidMeasure("zero total mass".into()));
        }
        let weights = weights.into_iter().map(|w| w / total.clone()).collect();
        Ok(Self { atoms, weights })
    }

    pub fn dirac(t: S) -> Result<Self> {
        Self::from_pairs([(t, S::one())])
    }

    // sort, validate, merge close atoms and drop zero weights
    fn canonical<I>(pairs: I) -> Result<(Vec<S>, Vec<S>)>
    where
        I: IntoIterator<Item = (S, S)>,
    {
        let mut pairs: Vec<(S, S)> = pairs.into_iter().collect();
        for (t, w) in &pairs {
            if !(t > &S::zero()) || !t.to_f64_lossy().is_finite() {
                return Err(Error::InvalidMeasure(format!(
                    "atom {} is not a positive finite time",
                    t.to_f64_lossy()
                )));
            }
            if !(w >= &S::zero()) || !w.to_f64_lossy().is_finite() {
                return Err(Error::InvalidMeasure(format!(
                    "weight {} is negative or not finite",
                    w.to_f64_lossy()
                )));
            }
        }
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("validated atoms"));
        let mut atoms: Vec<S> = Vec::with_capacity(pairs.len());
        let mut weights: Vec<S> = Vec::with_capacity(pairs.len());
        for (t, w) in pairs {
            match atoms.last() {
                Some(last) if S::close(last, &t, MERGE_TOL) => {
                    let k = weights.len() - 1;
                    weights[k] = weights[k].clone() + w;
                }
                _ => {
                    atoms.push(t);
                    weights.push(w);
                }
            }
        }
        let (atoms, weights): (Vec<S>, Vec<S>) = atoms
            .into_iter()
            .zip(weights)
            .filter(|(_, w)| !w.is_zero())
            .unzip();
        if atoms.is_empty() {
            return Err(Error::InvalidMeasure("no atom carries mass".into()));
        }
        Ok((atoms, weights))
    }

    pub fn atoms(&self) -> &[S] {
        &self.atoms
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&S, &S)> {
        self.atoms.iter().zip(self.weights.iter())
    }

    pub fn mean(&self) -> S {
        self.iter()
            .fold(S::zero(), |acc, (t, w)| acc + t.clone() * w.clone())
    }

    /// Mass of `[0, t]`.
    pub fn cdf(&self, t: &S) -> S {
        self.iter()
            .filter(|(a, _)| *a <= t)
            .fold(S::zero(), |acc, (_, w)| acc + w.clone())
    }

    /// Mass of `(t, ∞)`, treating atoms within [`MERGE_TOL`] of `t` as at `t`.
    pub fn mass_above(&self, t: &S) -> S {
        let cut = t.clone() + S::from_f64_lossy(MERGE_TOL);
        self.iter()
            .filter(|(a, _)| *a > &cut)
            .fold(S::zero(), |acc, (_, w)| acc + w.clone())
    }

    /// Weight of the atom at `t`, zero when there is none.
    pub fn mass_at(&self, t: &S) -> S {
        self.iter()
            .find(|(a, _)| S::close(a, t, MERGE_TOL))
            .map(|(_, w)| w.clone())
            .unwrap_or_else(S::zero)
    }

    pub fn is_point_mass(&self) -> bool {
        self.len() == 1
    }

    /// `λ·a + (1−λ)·b`.
    pub fn mix(a: &Self, b: &Self, lambda: S) -> Result<Self> {
        if lambda < S::zero() || lambda > S::one() {
            return Err(Error::InvalidMeasure(format!(
                "mixing weight {} outside [0, 1]",
                lambda.to_f64_lossy()
            )));
        }
        let rest = S::one() - lambda.clone();
        let pairs = a
            .iter()
            .map(|(t, w)| (t.clone(), w.clone() * lambda.clone()))
            .chain(b.iter().map(|(t, w)| (t.clone(), w.clone() * rest.clone())));
        Self::from_pairs(pairs)
    }

    /// First Wasserstein distance, computed as `∫ |F_a − F_b| dt` over the
    /// merged breakpoints of both CDFs.
    pub fn w1_distance(&self, other: &Self) -> S {
        let mut total = S::zero();
        let (mut i, mut j) = (0, 0);
        let (mut fa, mut fb) = (S::zero(), S::zero());
        let mut last: Option<S> = None;
        while i < self.len() || j < other.len() {
            let x = match (self.atoms.get(i), other.atoms.get(j)) {
                (Some(a), Some(b)) => S::min_of(a.clone(), b.clone()),
                (Some(a), None) => a.clone(),
                (None, Some(b)) => b.clone(),
                (None, None) => unreachable!(),
            };
            if let Some(prev) = last.take() {
                total = total + (x.clone() - prev) * (fa.clone() - fb.clone()).abs();
            }
            while i < self.len() && self.atoms[i] <= x {
                fa = fa + self.weights[i].clone();
                i += 1;
            }
            while j < other.len() && other.atoms[j] <= x {
                fb = fb + other.weights[j].clone();
                j += 1;
            }
            last = Some(x);
        }
        total
    }

    /// Quantile-aligned coupling of `self` (source) and `target`.
    pub fn monotone_coupling(&self, target: &Self) -> MonotoneCoupling<S> {
        let eps = residual_tol::<S>();
        let mut rows: Vec<Vec<(usize, S)>> = vec![Vec::new(); self.len()];
        let (mut i, mut j) = (0, 0);
        let mut ra = self.weights.first().cloned().unwrap_or_else(S::zero);
        let mut rb = target.weights.first().cloned().unwrap_or_else(S::zero);
        while i < self.len() && j < target.len() {
            if S::close(&ra, &rb, eps) {
                let m = S::max_of(ra.clone(), rb.clone());
                rows[i].push((j, m));
                i += 1;
                j += 1;
                ra = self.weights.get(i).cloned().unwrap_or_else(S::zero);
                rb = target.weights.get(j).cloned().unwrap_or_else(S::zero);
            } else if ra < rb {
                rows[i].push((j, ra.clone()));
                rb = rb - ra;
                i += 1;
                ra = self.weights.get(i).cloned().unwrap_or_else(S::zero);
            } else {
                rows[i].push((j, rb.clone()));
                ra = ra - rb;
                j += 1;
                rb = target.weights.get(j).cloned().unwrap_or_else(S::zero);
            }
        }
        // rounding leftovers land on the last target atom
        while i < self.len() {
            if ra > S::zero() {
                rows[i].push((target.len() - 1, ra.clone()));
            }
            i += 1;
            ra = self.weights.get(i).cloned().unwrap_or_else(S::zero);
        }
        MonotoneCoupling {
            source: self.clone(),
            target: target.clone(),
            rows,
        }
    }

    /// First-order stochastic dominance: `F_self(t) <= F_source(t)` for all t.
    pub fn is_right_shift_of(&self, source: &Self) -> bool {
        let tol = S::from_f64_lossy(WEIGHT_TOL);
        let mut xs: Vec<S> = self.atoms.iter().chain(source.atoms.iter()).cloned().collect();
        xs.sort_by(|a, b| a.partial_cmp(b).expect("finite atoms"));
        xs.iter()
            .all(|x| self.cdf(x) <= source.cdf(x) + tol.clone())
    }

    /// `ξ^{|t}`: the restriction to `(t, ∞)`, renormalized.
    pub fn restrict_renormalize(&self, t: &S) -> Result<Self> {
        let cut = t.clone() + S::from_f64_lossy(MERGE_TOL);
        let kept: Vec<(S, S)> = self
            .iter()
            .filter(|(a, _)| *a > &cut)
            .map(|(a, w)| (a.clone(), w.clone()))
            .collect();
        let mass = kept.iter().fold(S::zero(), |acc, (_, w)| acc + w.clone());
        if mass <= S::zero() {
            return Err(Error::EmptyTail(t.to_f64_lossy()));
        }
        Self::normalized(kept)
    }

    /// Moves every atom to the smallest grid point at or above it.
    pub fn ceiling_project(&self, grid: &[S]) -> Result<Self> {
        validate_grid(grid)?;
        let tol = S::from_f64_lossy(MERGE_TOL);
        let mut pairs = Vec::with_capacity(self.len());
        for (t, w) in self.iter() {
            let target = grid
                .iter()
                .find(|g| (*g).clone() + tol.clone() >= *t)
                .ok_or_else(|| {
                    Error::Coverage(format!(
                        "atom {} exceeds the last grid point {}",
                        t.to_f64_lossy(),
                        grid.last().map(|g| g.to_f64_lossy()).unwrap_or(f64::NAN)
                    ))
                })?;
            pairs.push((target.clone(), w.clone()));
        }
        Self::from_pairs(pairs)
    }

    /// Weight vector over a fixed increasing time grid. Every atom must sit
    /// on a grid point.
    pub fn weights_on(&self, grid: &[S]) -> Result<Vec<S>> {
        let mut out = vec![S::zero(); grid.len()];
        for (t, w) in self.iter() {
            let k = grid
                .iter()
                .position(|g| S::close(g, t, MERGE_TOL))
                .ok_or_else(|| {
                    Error::Coverage(format!("atom {} is not on the grid", t.to_f64_lossy()))
                })?;
            out[k] = out[k].clone() + w.clone();
        }
        Ok(out)
    }

    pub fn to_f64(&self) -> DiscreteMeasure<f64> {
        DiscreteMeasure {
            atoms: self.atoms.iter().map(|a| a.to_f64_lossy()).collect(),
            weights: self.weights.iter().map(|w| w.to_f64_lossy()).collect(),
        }
    }

    /// Exact conversion into another scalar type (binary expansions of
    /// floats are kept verbatim). The total mass is renormalized in the
    /// target type.
    pub fn convert<T: Scalar>(&self) -> Result<DiscreteMeasure<T>> {
        let pairs: Vec<(T, T)> = self
            .iter()
            .map(|(t, w)| {
                let t = T::from_f64(t.to_f64_lossy());
                let w = T::from_f64(w.to_f64_lossy());
                t.zip(w)
                    .ok_or_else(|| Error::InvalidMeasure("unrepresentable value".into()))
            })
            .collect::<Result<_>>()?;
        DiscreteMeasure::normalized(pairs)
    }
}

/// Largest displacement a ceiling projection onto `grid` can cause:
/// the first grid point (mass may sit just above zero) or the widest gap.
pub fn mesh<S: Scalar>(grid: &[S]) -> S {
    let mut best = grid.first().cloned().unwrap_or_else(S::zero);
    for pair in grid.windows(2) {
        best = S::max_of(best, pair[1].clone() - pair[0].clone());
    }
    best
}

fn validate_grid<S: Scalar>(grid: &[S]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Coverage("empty grid".into()));
    }
    if !(grid[0] > S::zero()) {
        return Err(Error::Coverage("grid points must be positive".into()));
    }
    if grid.windows(2).any(|p| !(p[0] < p[1])) {
        return Err(Error::Coverage("grid must be strictly increasing".into()));
    }
    Ok(())
}

/// A coupling of two discrete measures, stored as per-source-atom rows of
/// `(target atom index, mass)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MonotoneCoupling<S: Scalar> {
    source: DiscreteMeasure<S>,
    target: DiscreteMeasure<S>,
    rows: Vec<Vec<(usize, S)>>,
}

impl<S: Scalar> MonotoneCoupling<S> {
    pub fn source(&self) -> &DiscreteMeasure<S> {
        &self.source
    }

    pub fn target(&self) -> &DiscreteMeasure<S> {
        &self.target
    }

    pub fn rows(&self) -> &[Vec<(usize, S)>] {
        &self.rows
    }

    pub fn row(&self, source_index: usize) -> &[(usize, S)] {
        &self.rows[source_index]
    }

    /// Iterates `(source index, target index, mass)` cells.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, &S)> {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |(j, m)| (i, *j, m)))
    }

    /// Transport cost `Σ mass·|x − y|`.
    pub fn cost(&self) -> S {
        self.cells().fold(S::zero(), |acc, (i, j, m)| {
            acc + m.clone() * (self.target.atoms[j].clone() - self.source.atoms[i].clone()).abs()
        })
    }

    /// True when no mass moves to an earlier time.
    pub fn is_rightward(&self) -> bool {
        let tol = S::from_f64_lossy(MERGE_TOL);
        self.cells()
            .all(|(i, j, m)| m.is_zero() || self.target.atoms[j].clone() + tol.clone() >= self.source.atoms[i])
    }

    pub fn source_marginal(&self) -> Vec<S> {
        self.rows
            .iter()
            .map(|row| row.iter().fold(S::zero(), |acc, (_, m)| acc + m.clone()))
            .collect()
    }

    pub fn target_marginal(&self) -> Vec<S> {
        let mut out = vec![S::zero(); self.target.len()];
        for (_, j, m) in self.cells() {
            out[j] = out[j].clone() + m.clone();
        }
        out
    }

    /// Support is monotone: larger source atoms never map to smaller
    /// target atoms.
    pub fn is_monotone(&self) -> bool {
        let mut highest = 0usize;
        for row in &self.rows {
            for (j, m) in row {
                if m.is_zero() {
                    continue;
                }
                if *j < highest {
                    return false;
                }
                highest = *j;
            }
        }
        true
    }
}

#[derive(Serialize, Deserialize)]
struct AtomJson {
    t: f64,
    w: f64,
}

impl Serialize for DiscreteMeasure<f64> {
    fn serialize<Z: Serializer>(&self, serializer: Z) -> std::result::Result<Z::Ok, Z::Error> {
        let atoms: Vec<AtomJson> = self.iter().map(|(t, w)| AtomJson { t: *t, w: *w }).collect();
        atoms.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DiscreteMeasure<f64> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let atoms = Vec::<AtomJson>::deserialize(deserializer)?;
        from_json_atoms(atoms.into_iter().map(|a| (a.t, a.w))).map_err(serde::de::Error::custom)
    }
}

fn from_json_atoms<I: IntoIterator<Item = (f64, f64)>>(pairs: I) -> Result<DiscreteMeasure<f64>> {
    let pairs: Vec<(f64, f64)> = pairs.into_iter().collect();
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    if !((total - 1.0).abs() <= INGEST_TOL) {
        return Err(Error::InvalidMeasure(format!(
            "weights sum to {total} instead of 1"
        )));
    }
    DiscreteMeasure::normalized(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::ratio;
    use num_rational::BigRational;

    fn m(pairs: &[(f64, f64)]) -> DiscreteMeasure<f64> {
        DiscreteMeasure::from_pairs(pairs.iter().copied()).unwrap()
    }

    #[test]
    fn w1_examples() {
        assert_eq!(m(&[(2.0, 1.0)]).w1_distance(&m(&[(5.0, 1.0)])), 3.0);
        let a = m(&[(1.0, 0.5), (3.0, 0.5)]);
        let b = m(&[(2.0, 0.5), (4.0, 0.5)]);
        assert_eq!(a.w1_distance(&b), 1.0);
        let c = m(&[(1.0, 0.25), (2.0, 0.75)]);
        assert_eq!(c.w1_distance(&m(&[(2.0, 1.0)])), 0.25);
    }

    #[test]
    fn coupling_examples() {
        let c = m(&[(1.0, 1.0)]).monotone_coupling(&m(&[(2.0, 1.0)]));
        assert_eq!(c.rows(), &[vec![(0, 1.0)]]);

        let a = m(&[(1.0, 0.3), (2.5, 0.7)]);
        let diag = a.monotone_coupling(&a);
        assert_eq!(diag.cost(), 0.0);
        assert_eq!(diag.rows(), &[vec![(0, 0.3)], vec![(1, 0.7)]]);

        // all couplings of a 2x1 support coincide: cost 1
        let c = m(&[(1.0, 0.5), (3.0, 0.5)]).monotone_coupling(&m(&[(2.0, 1.0)]));
        assert_eq!(c.rows(), &[vec![(0, 0.5)], vec![(0, 0.5)]]);
        assert_eq!(c.cost(), 1.0);
    }

    #[test]
    fn right_shift_examples() {
        assert!(m(&[(2.0, 1.0)]).is_right_shift_of(&m(&[(1.0, 1.0)])));
        assert!(!m(&[(2.0, 1.0)]).is_right_shift_of(&m(&[(1.0, 0.5), (3.0, 0.5)])));
        let mu = m(&[(1.0, 0.2), (4.0, 0.8)]);
        assert!(mu.is_right_shift_of(&mu));
    }

    #[test]
    fn restrict_examples() {
        let xi = m(&[(1.0, 0.5), (3.0, 0.5)]);
        assert_eq!(xi.restrict_renormalize(&2.0).unwrap(), m(&[(3.0, 1.0)]));
        assert_eq!(xi.restrict_renormalize(&0.0).unwrap(), xi);
        assert_eq!(
            m(&[(1.0, 1.0)]).restrict_renormalize(&2.0),
            Err(Error::EmptyTail(2.0))
        );
        // an atom at t itself belongs to the past
        assert_eq!(xi.restrict_renormalize(&1.0).unwrap(), m(&[(3.0, 1.0)]));
    }

    #[test]
    fn ceiling_examples() {
        let mu = m(&[(0.5, 0.5), (1.7, 0.5)]);
        assert_eq!(
            mu.ceiling_project(&[1.0, 2.0]).unwrap(),
            m(&[(1.0, 0.5), (2.0, 0.5)])
        );
        assert_eq!(m(&[(1.0, 1.0)]).ceiling_project(&[1.0, 2.0]).unwrap(), m(&[(1.0, 1.0)]));
        assert!(matches!(
            m(&[(3.0, 1.0)]).ceiling_project(&[1.0, 2.0]),
            Err(Error::Coverage(_))
        ));
        assert!(mu.ceiling_project(&[2.0, 1.0]).is_err());
    }

    #[test]
    fn construction_rules() {
        // close atoms merge, zero weights vanish
        let mu = m(&[(1.0, 0.25), (1.0 + 1e-12, 0.25), (2.0, 0.5), (3.0, 0.0)]);
        assert_eq!(mu.len(), 2);
        assert_eq!(mu.weights(), &[0.5, 0.5]);
        assert!(DiscreteMeasure::from_pairs([(0.0, 1.0)]).is_err());
        assert!(DiscreteMeasure::from_pairs([(1.0, 0.5)]).is_err());
        assert!(DiscreteMeasure::from_pairs([(1.0, 1.5), (2.0, -0.5)]).is_err());
        assert!(DiscreteMeasure::from_pairs([(f64::NAN, 1.0)]).is_err());
        assert!(DiscreteMeasure::<f64>::new(vec![1.0], vec![]).is_err());
    }

    #[test]
    fn exact_scalars() {
        let a = DiscreteMeasure::from_pairs([(ratio(1, 1), ratio(1, 3)), (ratio(2, 1), ratio(2, 3))]).unwrap();
        let b = DiscreteMeasure::dirac(ratio(2, 1)).unwrap();
        assert_eq!(a.w1_distance(&b), ratio(1, 3));
        assert_eq!(a.monotone_coupling(&b).cost(), ratio(1, 3));
        assert_eq!(a.mean(), ratio(5, 3));
        let exact: DiscreteMeasure<BigRational> = m(&[(1.0, 0.5), (2.0, 0.5)]).convert().unwrap();
        assert_eq!(exact.weights(), &[ratio(1, 2), ratio(1, 2)]);
    }

    #[test]
    fn json_roundtrip_and_tolerance() {
        let mu: DiscreteMeasure<f64> = serde_json::from_str(r#"[{"t":2,"w":0.5},{"t":1,"w":0.5}]"#).unwrap();
        assert_eq!(mu.atoms(), &[1.0, 2.0]);
        let back = serde_json::to_string(&mu).unwrap();
        assert_eq!(back, r#"[{"t":1.0,"w":0.5},{"t":2.0,"w":0.5}]"#);
        let loose: DiscreteMeasure<f64> =
            serde_json::from_str(r#"[{"t":1,"w":0.5000000001},{"t":2,"w":0.5}]"#).unwrap();
        assert!((loose.weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(serde_json::from_str::<DiscreteMeasure<f64>>(r#"[{"t":1,"w":0.6}]"#).is_err());
    }

    #[test]
    fn mesh_includes_leading_gap() {
        assert_eq!(mesh(&[1.0, 2.0, 2.5]), 1.0);
        assert_eq!(mesh(&[0.25, 0.5, 2.0]), 1.5);
    }
}
