//! Rectangular linear assignment (Hungarian method with potentials).

/// Minimum-cost assignment for a `rows x cols` cost matrix.
///
/// Every row is assigned when `rows <= cols` and every column otherwise.
/// Returns `(row, col)` pairs sorted by row. Costs must be finite.
pub fn solve(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = cost[0].len();
    if cols == 0 {
        return Vec::new();
    }
    debug_assert!(cost.iter().all(|r| r.len() == cols));

    if rows <= cols {
        let mut out = solve_tall(rows, cols, |r, c| cost[r][c]);
        out.sort_unstable();
        out
    } else {
        let mut out: Vec<(usize, usize)> =
            solve_tall(cols, rows, |r, c| cost[c][r]).into_iter().map(|(c, r)| (r, c)).collect();
        out.sort_unstable();
        out
    }
}

/// Assigns every one of `n` rows to a distinct one of `m >= n` columns.
fn solve_tall(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    // 1-based arrays; index 0 is the virtual start column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn total(cost: &[Vec<f64>], a: &[(usize, usize)]) -> f64 {
        a.iter().map(|&(r, c)| cost[r][c]).sum()
    }

    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, need: usize) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let cols = cost[0].len();
            let remaining_rows = cost.len() - row;
            let mut best = f64::INFINITY;
            // a row may stay unassigned only if there are more rows than columns
            if remaining_rows > need {
                best = rec(cost, row + 1, used, need);
            }
            if need > 0 {
                for c in 0..cols {
                    if !used[c] {
                        used[c] = true;
                        best = best.min(cost[row][c] + rec(cost, row + 1, used, need - 1));
                        used[c] = false;
                    }
                }
            }
            best
        }
        let k = cost.len().min(cost[0].len());
        rec(cost, 0, &mut vec![false; cost[0].len()], k)
    }

    #[test]
    fn two_by_two() {
        let cost = vec![vec![0.1, 0.4], vec![0.5, 0.2]];
        let a = solve(&cost);
        assert_eq!(a, vec![(0, 0), (1, 1)]);
        assert!((total(&cost, &a) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn empty() {
        assert!(solve(&[]).is_empty());
        assert!(solve(&[vec![]]).is_empty());
    }

    proptest! {
        #[test]
        fn matches_brute_force(rows in 1usize..5, cols in 1usize..5, seed in proptest::collection::vec(0.0..10.0f64, 16)) {
            let cost: Vec<Vec<f64>> = (0..rows).map(|r| (0..cols).map(|c| seed[r * 4 + c]).collect()).collect();
            let a = solve(&cost);
            prop_assert_eq!(a.len(), rows.min(cols));
            let mut rs: Vec<_> = a.iter().map(|x| x.0).collect();
            let mut cs: Vec<_> = a.iter().map(|x| x.1).collect();
            rs.dedup(); cs.sort_unstable(); cs.dedup();
            prop_assert_eq!(rs.len(), a.len());
            prop_assert_eq!(cs.len(), a.len());
            prop_assert!((total(&cost, &a) - brute_force(&cost)).abs() < 1e-9);
        }
    }
}
