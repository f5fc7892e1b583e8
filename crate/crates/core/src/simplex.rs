//! Dense two-phase simplex method with Bland's rule.
//!
//! Solves `max c·x` subject to `A x = b`, `x ≥ 0` over any [`Scalar`]. With
//! `f64` pivots below [`Scalar::pivot_tolerance`] are treated as zero; with
//! exact rationals every comparison is exact.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearProgram<S> {
    pub a: Vec<Vec<S>>,
    pub b: Vec<S>,
    pub c: Vec<S>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution<S> {
    pub status: LpStatus,
    pub value: Option<S>,
    pub x: Vec<S>,
    /// Row multipliers `y` with `c − Aᵀy ≤ 0` at optimality.
    pub duals: Vec<S>,
    pub pivots: usize,
}

/// Optimality certificate residuals, in `f64`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    /// `max |A x − b|`.
    pub primal_residual: f64,
    /// `max (c − Aᵀy)⁺`.
    pub dual_infeasibility: f64,
    /// `max |x_j (c − Aᵀy)_j|`.
    pub complementarity: f64,
    /// `|c·x − b·y|`.
    pub duality_gap: f64,
}

impl<S: Scalar> LinearProgram<S> {
    pub fn rows(&self) -> usize {
        self.a.len()
    }

    pub fn cols(&self) -> usize {
        self.c.len()
    }

    /// Checks a primal/dual pair for feasibility and complementary slackness.
    pub fn certificate(&self, sol: &LpSolution<S>) -> Certificate {
        let f = |x: &S| x.to_f64_lossy();
        let mut primal: f64 = 0.0;
        for (row, bi) in self.a.iter().zip(&self.b) {
            let ax = row.iter().zip(&sol.x).fold(S::zero(), |acc, (a, x)| acc + a.clone() * x.clone());
            primal = primal.max(f(&(ax - bi.clone()).abs()));
        }
        let mut dual_inf: f64 = 0.0;
        let mut comp: f64 = 0.0;
        for j in 0..self.cols() {
            let aty = self
                .a
                .iter()
                .zip(&sol.duals)
                .fold(S::zero(), |acc, (row, y)| acc + row[j].clone() * y.clone());
            let reduced = self.c[j].clone() - aty;
            dual_inf = dual_inf.max(f(&reduced));
            comp = comp.max(f(&(reduced * sol.x[j].clone()).abs()));
        }
        let cx = self.c.iter().zip(&sol.x).fold(S::zero(), |acc, (c, x)| acc + c.clone() * x.clone());
        let by = self.b.iter().zip(&sol.duals).fold(S::zero(), |acc, (b, y)| acc + b.clone() * y.clone());
        Certificate {
            primal_residual: primal,
            dual_infeasibility: dual_inf,
            complementarity: comp,
            duality_gap: f(&(cx - by).abs()),
        }
    }
}

struct Tableau<S> {
    t: Vec<Vec<S>>,
    basis: Vec<usize>,
    /// reduced costs of the current phase, one per column
    d: Vec<S>,
    z: S,
    width: usize,
    pivots: usize,
}

impl<S: Scalar> Tableau<S> {
    fn rhs(&self, i: usize) -> &S {
        &self.t[i][self.width]
    }

    fn pivot(&mut self, row: usize, col: usize) {
        self.pivots += 1;
        let p = self.t[row][col].clone();
        for v in self.t[row].iter_mut() {
            *v = v.clone() / p.clone();
        }
        let pivot_row = self.t[row].clone();
        for (i, r) in self.t.iter_mut().enumerate() {
            if i == row || r[col].is_zero() {
                continue;
            }
            let factor = r[col].clone();
            for (v, pv) in r.iter_mut().zip(&pivot_row) {
                if !pv.is_zero() {
                    *v = v.clone() - factor.clone() * pv.clone();
                }
            }
        }
        let factor = self.d[col].clone();
        if !factor.is_zero() {
            for (v, pv) in self.d.iter_mut().zip(&pivot_row[..self.width]) {
                *v = v.clone() - factor.clone() * pv.clone();
            }
            self.z = self.z.clone() + factor * pivot_row[self.width].clone();
        }
        self.basis[row] = col;
    }

    /// Bland's rule over columns `< allowed`; returns false when unbounded.
    fn optimize(&mut self, allowed: usize) -> bool {
        let tol = S::pivot_tolerance();
        loop {
            let Some(col) = (0..allowed).find(|j| self.d[*j] > tol) else {
                return true;
            };
            let mut best: Option<(usize, S)> = None;
            for i in 0..self.t.len() {
                let a = &self.t[i][col];
                if *a > tol {
                    let ratio = self.rhs(i).clone() / a.clone();
                    let better = match &best {
                        None => true,
                        Some((bi, br)) => ratio < *br || (ratio == *br && self.basis[i] < self.basis[*bi]),
                    };
                    if better {
                        best = Some((i, ratio));
                    }
                }
            }
            match best {
                Some((row, _)) => self.pivot(row, col),
                None => return false,
            }
        }
    }
}

pub fn solve_lp<S: Scalar>(lp: &LinearProgram<S>) -> LpSolution<S> {
    let m = lp.rows();
    let n = lp.cols();
    let tol = S::pivot_tolerance();
    let width = n + m;
    let mut flipped = vec![false; m];
    let mut t = Vec::with_capacity(m);
    for (i, (row, bi)) in lp.a.iter().zip(&lp.b).enumerate() {
        assert_eq!(row.len(), n, "row {i} has the wrong length");
        let neg = *bi < S::zero();
        flipped[i] = neg;
        let mut r: Vec<S> = row.iter().map(|v| if neg { -v.clone() } else { v.clone() }).collect();
        r.extend((0..m).map(|k| if k == i { S::one() } else { S::zero() }));
        r.push(if neg { -bi.clone() } else { bi.clone() });
        t.push(r);
    }
    // phase one: maximize −Σ artificials
    let mut d = vec![S::zero(); width];
    let mut z = S::zero();
    for r in &t {
        for j in 0..n {
            d[j] = d[j].clone() + r[j].clone();
        }
        z = z - r[width].clone();
    }
    let mut tab = Tableau {
        t,
        basis: (n..n + m).collect(),
        d,
        z,
        width,
        pivots: 0,
    };
    tab.optimize(n);
    let infeasible = |z: &S| *z < -(tol.clone() * S::from_f64_lossy((m.max(1)) as f64));
    if infeasible(&tab.z) {
        return LpSolution {
            status: LpStatus::Infeasible,
            value: None,
            x: vec![S::zero(); n],
            duals: vec![S::zero(); m],
            pivots: tab.pivots,
        };
    }
    // drive zero-level artificials out; rows with no usable entry are redundant
    for i in 0..m {
        if tab.basis[i] >= n {
            if let Some(j) = (0..n).find(|j| tab.t[i][*j].clone().abs() > tol) {
                tab.pivot(i, j);
            }
        }
    }
    // phase two
    let cost = |j: usize| if j < n { lp.c[j].clone() } else { S::zero() };
    let mut d: Vec<S> = (0..width).map(cost).collect();
    let mut z = S::zero();
    for (i, bj) in tab.basis.iter().enumerate() {
        let cb = cost(*bj);
        if cb.is_zero() {
            continue;
        }
        for j in 0..width {
            d[j] = d[j].clone() - cb.clone() * tab.t[i][j].clone();
        }
        z = z + cb * tab.t[i][width].clone();
    }
    tab.d = d;
    tab.z = z;
    let bounded = tab.optimize(n);

    let mut x = vec![S::zero(); n];
    for (i, bj) in tab.basis.iter().enumerate() {
        if *bj < n {
            x[*bj] = tab.rhs(i).clone();
        }
    }
    // y_k = c_B · B⁻¹ e_k, read off the artificial columns
    let duals: Vec<S> = (0..m)
        .map(|k| {
            let y = tab
                .basis
                .iter()
                .enumerate()
                .fold(S::zero(), |acc, (i, bj)| acc + cost(*bj) * tab.t[i][n + k].clone());
            if flipped[k] {
                -y
            } else {
                y
            }
        })
        .collect();
    LpSolution {
        status: if bounded { LpStatus::Optimal } else { LpStatus::Unbounded },
        value: bounded.then(|| tab.z.clone()),
        x,
        duals,
        pivots: tab.pivots,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::ratio;
    use num_rational::BigRational;

    #[test]
    fn tiny_programs() {
        let lp = LinearProgram {
            a: vec![vec![1.0, 1.0]],
            b: vec![1.0],
            c: vec![1.0, 1.0],
        };
        let s = solve_lp(&lp);
        assert_eq!(s.status, LpStatus::Optimal);
        assert_eq!(s.value, Some(1.0));
        assert!(lp.certificate(&s).duality_gap < 1e-12);

        let infeasible = LinearProgram {
            a: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
            b: vec![1.0, 2.0],
            c: vec![0.0, 0.0],
        };
        assert_eq!(solve_lp(&infeasible).status, LpStatus::Infeasible);

        let unbounded = LinearProgram {
            a: vec![vec![1.0, -1.0]],
            b: vec![0.0],
            c: vec![1.0, 0.0],
        };
        assert_eq!(solve_lp(&unbounded).status, LpStatus::Unbounded);
    }

    #[test]
    fn redundant_rows_and_negative_rhs() {
        // x + y + z = 1 twice, x − y = −1/2
        let lp = LinearProgram {
            a: vec![vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 1.0], vec![1.0, -1.0, 0.0]],
            b: vec![1.0, 1.0, -0.5],
            c: vec![3.0, 1.0, 2.0],
        };
        let s = solve_lp(&lp);
        assert_eq!(s.status, LpStatus::Optimal);
        // y = x + 1/2 and z = 1/2 − 2x make the objective constant at 3/2
        let cert = lp.certificate(&s);
        assert!(cert.primal_residual < 1e-12);
        assert!(cert.dual_infeasibility < 1e-9);
        assert!(cert.complementarity < 1e-12);
        assert!(cert.duality_gap < 1e-12);
        assert!((s.value.unwrap() - 1.5f64).abs() < 1e-12);
    }

    #[test]
    fn exact_rationals() {
        let q = |n, d| ratio(n, d);
        let lp: LinearProgram<BigRational> = LinearProgram {
            a: vec![vec![q(1, 1), q(1, 1), q(0, 1)], vec![q(1, 3), q(0, 1), q(1, 1)]],
            b: vec![q(1, 1), q(1, 2)],
            c: vec![q(2, 1), q(1, 1), q(1, 7)],
        };
        let s = solve_lp(&lp);
        assert_eq!(s.status, LpStatus::Optimal);
        let cert = lp.certificate(&s);
        assert_eq!(cert.duality_gap, 0.0);
        assert_eq!(cert.complementarity, 0.0);
        // x = 1, z = 1/6: 2 + 1/42
        assert_eq!(s.value.unwrap(), q(85, 42));
    }
}
