//! Rectangular linear assignment (Hungarian method with potentials).

use nalgebra::DMatrix;

/// Minimum-cost assignment of rows to columns. Every row is matched when
/// `rows <= cols`, otherwise every column is. Costs must be finite.
///
/// Returns `(row, col)` pairs sorted by row.
pub fn solve(cost: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let (n, m) = cost.shape();
    if n == 0 || m == 0 {
        return Vec::new();
    }
    if n <= m {
        hungarian(n, m, |i, j| cost[(i, j)])
    } else {
        let mut pairs: Vec<_> = hungarian(m, n, |i, j| cost[(j, i)]).into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        pairs
    }
}

/// Assignment over a matrix where `f64::INFINITY` (or any non-finite entry)
/// marks a forbidden pair. Maximizes the number of allowed pairs first, then
/// minimizes their total cost. Forbidden pairs never appear in the output.
pub fn solve_gated(cost: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let finite_sum: f64 = cost.iter().filter(|c| c.is_finite()).map(|c| c.abs()).sum();
    let forbidden = 2.0 * finite_sum + 1.0;
    let padded = cost.map(|c| if c.is_finite() { c } else { forbidden });
    solve(&padded).into_iter().filter(|&(i, j)| cost[(i, j)].is_finite()).collect()
}

pub fn total_cost(cost: &DMatrix<f64>, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost[(i, j)]).sum()
}

// n <= m; rows and columns are 1-indexed internally, index 0 is the virtual
// column used to start each augmenting path.
fn hungarian(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
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
    let mut pairs: Vec<_> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Minimum over every injective map from the smaller side.
    fn brute_force(cost: &DMatrix<f64>) -> f64 {
        fn rec(cost: &DMatrix<f64>, row: usize, used: &mut Vec<bool>, transpose: bool) -> f64 {
            let (n, m) = if transpose { (cost.ncols(), cost.nrows()) } else { cost.shape() };
            if row == n {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..m {
                if !used[j] {
                    used[j] = true;
                    let c = if transpose { cost[(j, row)] } else { cost[(row, j)] };
                    best = best.min(c + rec(cost, row + 1, used, transpose));
                    used[j] = false;
                }
            }
            best
        }
        let transpose = cost.nrows() > cost.ncols();
        let m = if transpose { cost.nrows() } else { cost.ncols() };
        rec(cost, 0, &mut vec![false; m], transpose)
    }

    #[test]
    fn classic_example() {
        let c = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0]);
        let pairs = solve(&c);
        assert_eq!(total_cost(&c, &pairs), 5.0);
        assert_eq!(pairs, vec![(0, 1), (1, 0), (2, 2)]);
    }

    #[test]
    fn empty_and_rectangular() {
        assert!(solve(&DMatrix::zeros(0, 3)).is_empty());
        let c = DMatrix::from_row_slice(3, 1, &[5.0, 1.0, 3.0]);
        assert_eq!(solve(&c), vec![(1, 0)]);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let n = rng.random_range(1..6);
            let m = rng.random_range(1..6);
            let c = DMatrix::from_fn(n, m, |_, _| rng.random_range(0.0..10.0));
            let pairs = solve(&c);
            assert_eq!(pairs.len(), n.min(m));
            assert!((total_cost(&c, &pairs) - brute_force(&c)).abs() < 1e-9);
        }
    }

    #[test]
    fn gated_prefers_more_pairs() {
        // (0,0) alone is cheap but blocks two allowed pairs
        let inf = f64::INFINITY;
        let c = DMatrix::from_row_slice(2, 2, &[0.1, 0.9, 0.9, inf]);
        let pairs = solve_gated(&c);
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
        let all_inf = DMatrix::from_element(2, 3, inf);
        assert!(solve_gated(&all_inf).is_empty());
    }
}
