//! Rational grids on the probability simplex and the one-step martingale sup.
//!
//! A point of the grid with `k` coordinates and resolution `R` is a vector
//! of nonnegative integer counts summing to `R`; its coordinates are the
//! counts over `R`. Points are ranked in lexicographic order of counts.

use num_bigint::BigInt;
use num_rational::BigRational;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Largest grid the solver will allocate.
pub const MAX_GRID_POINTS: u64 = 5_000_000;
/// Improvements smaller than this do not displace an earlier argmax.
pub const TIE_TOL: f64 = 1e-13;

#[derive(Clone, Debug)]
pub struct SimplexGrid {
    k: usize,
    resolution: u32,
    points: Vec<u32>,
    /// `binom[p][n] = C(n + p, p)` for `n ≤ R`.
    binom: Vec<Vec<u64>>,
}

impl SimplexGrid {
    pub fn new(k: usize, resolution: u32) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("simplex grid needs at least one coordinate".into()));
        }
        if resolution == 0 {
            return Err(Error::Config("resolution must be at least 1".into()));
        }
        let size = Self::expected_len(k, resolution);
        if size > MAX_GRID_POINTS {
            return Err(Error::SizeGuard(format!(
                "{size} grid points for {k} atoms at resolution {resolution}"
            )));
        }
        let r = resolution as usize;
        let binom: Vec<Vec<u64>> = (0..k)
            .map(|p| (0..=r).map(|n| choose((n + p) as u64, p as u64)).collect())
            .collect();
        let mut points = Vec::with_capacity(size as usize * k);
        let mut current = vec![0u32; k];
        enumerate(&mut current, 0, resolution, &mut points);
        debug_assert_eq!(points.len() as u64, size * k as u64);
        Ok(Self {
            k,
            resolution,
            points,
            binom,
        })
    }

    /// `C(R + k − 1, k − 1)`.
    pub fn expected_len(k: usize, resolution: u32) -> u64 {
        choose(resolution as u64 + k as u64 - 1, k as u64 - 1)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, rank: usize) -> &[u32] {
        &self.points[rank * self.k..(rank + 1) * self.k]
    }

    pub fn point_f64(&self, rank: usize) -> Vec<f64> {
        let r = self.resolution as f64;
        self.point(rank).iter().map(|c| *c as f64 / r).collect()
    }

    pub fn rational_point(&self, rank: usize) -> Vec<BigRational> {
        let r = BigInt::from(self.resolution);
        self.point(rank)
            .iter()
            .map(|c| BigRational::new(BigInt::from(*c), r.clone()))
            .collect()
    }

    fn c(&self, p: usize, n: u32) -> u64 {
        self.binom[p][n as usize]
    }

    pub fn rank(&self, counts: &[u32]) -> usize {
        debug_assert_eq!(counts.len(), self.k);
        let mut rem = self.resolution;
        let mut rank = 0u64;
        for (i, a) in counts[..self.k - 1].iter().enumerate() {
            let p = self.k - 1 - i;
            rank += self.c(p, rem) - self.c(p, rem - a);
            rem -= a;
        }
        rank as usize
    }

    /// Rank of `y` when it is a grid point.
    pub fn rank_of(&self, y: &[f64]) -> Option<usize> {
        let loc = self.locate(y);
        (loc.len() == 1).then(|| loc[0].0)
    }

    /// Barycentric coordinates of `y` in the Freudenthal triangulation of
    /// the grid, taken in cumulative coordinates. Zero weights are omitted.
    pub fn locate(&self, y: &[f64]) -> Vec<(usize, f64)> {
        assert_eq!(y.len(), self.k, "point has the wrong dimension");
        if self.k == 1 {
            return vec![(0, 1.0)];
        }
        let r = self.resolution as f64;
        let mut x = Vec::with_capacity(self.k - 1);
        let mut cum = 0.0;
        let mut prev: f64 = 0.0;
        for yi in &y[..self.k - 1] {
            cum += yi.max(0.0);
            let xi = (cum * r).clamp(prev, r);
            // snap values within rounding of an integer
            let xi = if (xi - xi.round()).abs() < 1e-9 { xi.round() } else { xi };
            x.push(xi);
            prev = xi;
        }
        let base: Vec<u32> = x.iter().map(|v| (v.floor() as u32).min(self.resolution)).collect();
        let frac: Vec<f64> = x.iter().zip(&base).map(|(v, b)| v - *b as f64).collect();
        self.walk(base, &frac, |a, b| a - b)
    }

    /// As [`Self::locate`] for the rational point `counts / total`, with
    /// weights computed exactly and rounded once.
    pub fn locate_exact(&self, counts: &[u64], total: u64) -> Vec<(usize, f64)> {
        assert_eq!(counts.len(), self.k, "point has the wrong dimension");
        if self.k == 1 {
            return vec![(0, 1.0)];
        }
        let r = self.resolution as u128;
        let total = total as u128;
        let mut cum = 0u128;
        let mut base = Vec::with_capacity(self.k - 1);
        let mut frac = Vec::with_capacity(self.k - 1);
        for c in &counts[..self.k - 1] {
            cum += *c as u128;
            let scaled = r * cum;
            base.push((scaled / total) as u32);
            frac.push((scaled % total) as i128);
        }
        let t = total as f64;
        self.walk(base, &frac, |a, b| (a - b) as f64 / t)
    }

    fn walk<F, W>(&self, base: Vec<u32>, frac: &[F], diff: W) -> Vec<(usize, f64)>
    where
        F: Copy + PartialOrd + Default,
        W: Fn(F, F) -> f64,
    {
        let m = frac.len();
        let mut order: Vec<usize> = (0..m).collect();
        // larger fractional parts first; ties go to the later coordinate so
        // cumulative coordinates stay nondecreasing
        order.sort_by(|a, b| frac[*b].partial_cmp(&frac[*a]).unwrap().then(b.cmp(a)));
        let zero = F::default();
        let one_minus_first = {
            // weight of the base vertex: 1 − largest fractional part
            let top = frac[order[0]];
            1.0 - diff(top, zero)
        };
        let mut out = Vec::with_capacity(m + 1);
        let mut cumulative = base;
        let push = |cumulative: &[u32], w: f64, out: &mut Vec<(usize, f64)>| {
            if w > 0.0 {
                let counts = self.uncumulate(cumulative);
                out.push((self.rank(&counts), w));
            }
        };
        push(&cumulative, one_minus_first, &mut out);
        for (step, j) in order.iter().enumerate() {
            cumulative[*j] += 1;
            let next = order.get(step + 1).map(|n| frac[*n]).unwrap_or(zero);
            push(&cumulative, diff(frac[*j], next), &mut out);
        }
        let total: f64 = out.iter().map(|(_, w)| w).sum();
        for (_, w) in out.iter_mut() {
            *w /= total;
        }
        out
    }

    fn uncumulate(&self, cumulative: &[u32]) -> Vec<u32> {
        let mut counts = Vec::with_capacity(self.k);
        let mut prev = 0;
        for c in cumulative {
            counts.push(c - prev);
            prev = *c;
        }
        counts.push(self.resolution - prev);
        counts
    }

    pub fn interpolate(&self, values: &[f64], y: &[f64]) -> f64 {
        self.locate(y).iter().map(|(i, w)| w * values[*i]).sum()
    }

    /// Calls `visit(rank a, rank b)` for every pair of grid points with
    /// `a + b = 2·point`, in lexicographic order of `a`.
    pub fn for_each_pair<F: FnMut(usize, usize)>(&self, rank: usize, mut visit: F) {
        let n = self.point(rank);
        let mut cap_tail = vec![0u32; self.k + 1];
        for i in (0..self.k).rev() {
            cap_tail[i] = cap_tail[i + 1] + 2 * n[i];
        }
        self.pairs_rec(0, self.resolution, self.resolution, 0, 0, n, &cap_tail, &mut visit);
    }

    #[allow(clippy::too_many_arguments)]
    fn pairs_rec<F: FnMut(usize, usize)>(
        &self,
        i: usize,
        rem_a: u32,
        rem_b: u32,
        rank_a: u64,
        rank_b: u64,
        n: &[u32],
        cap_tail: &[u32],
        visit: &mut F,
    ) {
        let p = self.k - 1 - i;
        if p == 0 {
            if rem_a <= 2 * n[i] && rem_a + rem_b == 2 * n[i] {
                visit(rank_a as usize, rank_b as usize);
            }
            return;
        }
        let lo = rem_a.saturating_sub(cap_tail[i + 1]);
        let hi = rem_a.min(2 * n[i]);
        for a in lo..=hi {
            let b = 2 * n[i] - a;
            if b > rem_b {
                continue;
            }
            let ra = rank_a + self.c(p, rem_a) - self.c(p, rem_a - a);
            let rb = rank_b + self.c(p, rem_b) - self.c(p, rem_b - b);
            self.pairs_rec(i + 1, rem_a - a, rem_b - b, ra, rb, n, cap_tail, visit);
        }
    }

    /// `max ½(vu(a) + vd(b))` over pairs at one point, with the rank of the
    /// lexicographically smallest maximizing `a`.
    pub fn best_pair(&self, rank: usize, vu: &[f64], vd: &[f64]) -> (f64, u32) {
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0u32;
        self.for_each_pair(rank, |a, b| {
            let v = 0.5 * (vu[a] + vd[b]);
            if v > best + TIE_TOL || best == f64::NEG_INFINITY {
                best = v;
                arg = a as u32;
            }
        });
        (best, arg)
    }

    /// Largest slope of `values` along grid edges, per unit of ℓ¹ distance.
    pub fn lipschitz(&self, values: &[f64]) -> f64 {
        if self.k == 1 {
            return 0.0;
        }
        let step = 2.0 / self.resolution as f64;
        (0..self.len())
            .into_par_iter()
            .map(|rank| {
                let p = self.point(rank);
                let mut worst: f64 = 0.0;
                let mut q = p.to_vec();
                for i in 0..self.k {
                    if p[i] == 0 {
                        continue;
                    }
                    for j in 0..self.k {
                        if i == j {
                            continue;
                        }
                        q[i] -= 1;
                        q[j] += 1;
                        let d = (values[self.rank(&q)] - values[rank]).abs() / step;
                        worst = worst.max(d);
                        q[i] += 1;
                        q[j] -= 1;
                    }
                }
                worst
            })
            .reduce(|| 0.0, f64::max)
    }

    /// Largest violation of midpoint concavity, `½(v(p+d) + v(p−d)) − v(p)`,
    /// over grid points and edge directions `d`.
    pub fn concavity_defect(&self, values: &[f64]) -> f64 {
        (0..self.len())
            .into_par_iter()
            .map(|rank| {
                let mut worst: f64 = 0.0;
                self.for_each_pair(rank, |a, b| {
                    worst = worst.max(0.5 * (values[a] + values[b]) - values[rank]);
                });
                worst
            })
            .reduce(|| 0.0, f64::max)
    }

    /// Length in ℓ¹ of the longest edge of a triangulation cell.
    pub fn cell_diameter(&self) -> f64 {
        if self.k == 1 {
            0.0
        } else {
            2.0 * (self.k - 1) as f64 / self.resolution as f64
        }
    }
}

/// For each grid point, the best split of a one-step martingale:
/// `max ½(vu(a) + vd(b))` over grid pairs with `½(a + b) = y`.
pub fn one_step_sup(grid: &SimplexGrid, vu: &[f64], vd: &[f64]) -> Vec<f64> {
    one_step_sup_with_argmax(grid, vu, vd).0
}

pub fn one_step_sup_with_argmax(grid: &SimplexGrid, vu: &[f64], vd: &[f64]) -> (Vec<f64>, Vec<u32>) {
    assert_eq!(vu.len(), grid.len());
    assert_eq!(vd.len(), grid.len());
    (0..grid.len())
        .into_par_iter()
        .map(|rank| grid.best_pair(rank, vu, vd))
        .unzip()
}

/// Fixpoint of `v ↦ one_step_sup(v, v)`: the smallest midpoint-concave
/// grid function above `v`.
pub fn concavify(grid: &SimplexGrid, values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    for _ in 0..=4 * grid.resolution() as usize * grid.k() {
        let next = one_step_sup(grid, &v, &v);
        let moved = next.iter().zip(&v).map(|(a, b)| a - b).fold(0.0, f64::max);
        v = next;
        if moved <= 1e-15 {
            break;
        }
    }
    v
}

/// Value at an atom time when a fraction `y₁` of the remaining mass stops
/// now: `y₁·cost_now + (1 − y₁)·v_next(y_rest / (1 − y₁))`, interpolating
/// `v_next` on its grid. Returns `cost_now` when `y₁ = 1`.
pub fn atom_boundary(next_grid: Option<&SimplexGrid>, next_values: &[f64], cost_now: f64, y: &[f64]) -> f64 {
    let y1 = y[0];
    let alive = 1.0 - y1;
    if alive <= 0.0 {
        return cost_now;
    }
    let grid = match next_grid {
        Some(g) => g,
        None => return cost_now,
    };
    let z: Vec<f64> = y[1..].iter().map(|v| v / alive).collect();
    y1 * cost_now + alive * grid.interpolate(next_values, &z)
}

fn enumerate(current: &mut Vec<u32>, i: usize, rem: u32, out: &mut Vec<u32>) {
    let k = current.len();
    if i == k - 1 {
        current[i] = rem;
        out.extend_from_slice(current);
        return;
    }
    for a in 0..=rem {
        current[i] = a;
        enumerate(current, i + 1, rem - a, out);
    }
}

fn choose(n: u64, k: u64) -> u64 {
    let k = k.min(n.saturating_sub(k));
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}
