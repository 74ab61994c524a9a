//! Depth-first branch-and-bound over row-to-column assignments with one
//! linear side constraint.
//!
//! Each row picks one column. Columns carry a bitmask of the clusters they
//! consume; two rows may not consume the same cluster and the chosen columns
//! must consume every cluster in `full_mask`. Columns are tried in ascending
//! order and the incumbent is only replaced by a strictly better objective,
//! so among optimal assignments the lexicographically smallest one wins.

pub(crate) struct Problem<'a> {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Row-major objective coefficients (maximized).
    pub obj: &'a [f64],
    /// Row-major side coefficients with the inclusive range of their sum.
    pub side: Option<(&'a [f64], f64, f64)>,
    pub allowed: &'a [bool],
    pub col_mask: &'a [u64],
    pub full_mask: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Assignment {
    pub cols: Vec<usize>,
    pub objective: f64,
    pub side_sum: f64,
}

struct Search<'a, 'p> {
    p: &'a Problem<'p>,
    /// Σ over rows ≥ i of the row's best objective coefficient.
    obj_tail: Vec<f64>,
    side_min_tail: Vec<f64>,
    side_max_tail: Vec<f64>,
    current: Vec<usize>,
    best: Option<Assignment>,
}

fn tol(x: f64) -> f64 {
    1e-12 * (1.0 + x.abs())
}

impl Search<'_, '_> {
    fn visit(&mut self, row: usize, used: u64, obj: f64, side: f64) {
        let p = self.p;
        if row == p.n_rows {
            if used != p.full_mask {
                return;
            }
            if let Some((_, lo, hi)) = p.side {
                if side < lo || side > hi {
                    return;
                }
            }
            if self.best.as_ref().is_none_or(|b| obj > b.objective) {
                self.best = Some(Assignment {
                    cols: self.current.clone(),
                    objective: obj,
                    side_sum: side,
                });
            }
            return;
        }
        let remaining_rows = (p.n_rows - row) as u32;
        if (p.full_mask & !used).count_ones() < remaining_rows {
            return;
        }
        if let Some(b) = &self.best {
            let bound = obj + self.obj_tail[row];
            if bound < b.objective - tol(b.objective) {
                return;
            }
        }
        if let Some((_, lo, hi)) = p.side {
            if side + self.side_min_tail[row] > hi + tol(hi)
                || side + self.side_max_tail[row] < lo - tol(lo)
            {
                return;
            }
        }
        for c in 0..p.n_cols {
            let i = row * p.n_cols + c;
            if !p.allowed[i] || p.col_mask[c] & used != 0 {
                continue;
            }
            let s = p.side.map_or(0.0, |(coef, _, _)| coef[i]);
            self.current[row] = c;
            self.visit(row + 1, used | p.col_mask[c], obj + p.obj[i], side + s);
        }
    }
}

/// Optimal assignment, or `None` when nothing is feasible.
pub(crate) fn solve(p: &Problem<'_>) -> Option<Assignment> {
    let n = p.n_rows;
    let mut obj_tail = vec![0.0; n + 1];
    let mut side_min_tail = vec![0.0; n + 1];
    let mut side_max_tail = vec![0.0; n + 1];
    for row in (0..n).rev() {
        let mut best = f64::NEG_INFINITY;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in 0..p.n_cols {
            let i = row * p.n_cols + c;
            if !p.allowed[i] {
                continue;
            }
            best = best.max(p.obj[i]);
            if let Some((coef, _, _)) = p.side {
                lo = lo.min(coef[i]);
                hi = hi.max(coef[i]);
            }
        }
        if best == f64::NEG_INFINITY {
            return None;
        }
        obj_tail[row] = obj_tail[row + 1] + best;
        if p.side.is_some() {
            side_min_tail[row] = side_min_tail[row + 1] + lo;
            side_max_tail[row] = side_max_tail[row + 1] + hi;
        }
    }
    let mut search = Search {
        p,
        obj_tail,
        side_min_tail,
        side_max_tail,
        current: vec![0; n],
        best: None,
    };
    search.visit(0, 0, 0.0, 0.0);
    search.best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::next_permutation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn paired_masks(n: usize) -> (Vec<u64>, u64) {
        ((0..n).map(|c| 1u64 << c).collect(), (1u64 << n) - 1)
    }

    #[test]
    fn matches_brute_force_with_side_constraint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.random_range(1..=6);
            let obj: Vec<f64> = (0..n * n).map(|_| -rng.random::<f64>() * 3.0).collect();
            let side: Vec<f64> = (0..n * n).map(|_| -rng.random::<f64>() * 3.0).collect();
            let a = -rng.random::<f64>() * 3.0 * n as f64;
            let b = -rng.random::<f64>() * 3.0 * n as f64;
            let (lo, hi) = (a.min(b), a.max(b));
            let allowed = vec![true; n * n];
            let (col_mask, full_mask) = paired_masks(n);
            let p = Problem {
                n_rows: n,
                n_cols: n,
                obj: &obj,
                side: Some((&side, lo, hi)),
                allowed: &allowed,
                col_mask: &col_mask,
                full_mask,
            };
            let got = solve(&p);

            let mut perm: Vec<usize> = (0..n).collect();
            let mut want: Option<(Vec<usize>, f64)> = None;
            loop {
                let o: f64 = (0..n).map(|j| obj[j * n + perm[j]]).sum();
                let s: f64 = (0..n).map(|j| side[j * n + perm[j]]).sum();
                if s >= lo && s <= hi && want.as_ref().is_none_or(|w| o > w.1) {
                    want = Some((perm.clone(), o));
                }
                if !next_permutation(&mut perm) {
                    break;
                }
            }
            match (got, want) {
                (None, None) => {}
                (Some(g), Some(w)) => {
                    assert_eq!(g.cols, w.0);
                    assert_eq!(g.objective, w.1);
                }
                (g, w) => panic!("solver {g:?} vs brute force {w:?}"),
            }
        }
    }

    #[test]
    fn ties_pick_lexicographic_first() {
        let n = 4;
        let obj = vec![-1.0; n * n];
        let allowed = vec![true; n * n];
        let (col_mask, full_mask) = paired_masks(n);
        let p = Problem {
            n_rows: n,
            n_cols: n,
            obj: &obj,
            side: None,
            allowed: &allowed,
            col_mask: &col_mask,
            full_mask,
        };
        assert_eq!(solve(&p).unwrap().cols, vec![0, 1, 2, 3]);
    }

    #[test]
    fn respects_masks_and_coverage() {
        // Two rows, columns {a}, {b}, {c}, {a,b}; clusters a,b,c must all be used.
        let col_mask = [0b001, 0b010, 0b100, 0b011];
        let obj = [0.0, -1.0, -2.0, -0.5, -0.1, 0.0, -3.0, -0.2];
        let allowed = [true, true, true, true, true, true, true, false];
        let p = Problem {
            n_rows: 2,
            n_cols: 4,
            obj: &obj,
            side: None,
            allowed: &allowed,
            col_mask: &col_mask,
            full_mask: 0b111,
        };
        // Feasible: (0:{a,b}, 1:{c}) = −0.5 − 3 and (0:{c}, 1:{a,b}) is disallowed.
        let s = solve(&p).unwrap();
        assert_eq!(s.cols, vec![3, 2]);
        assert_eq!(s.objective, -3.5);
    }
}
