//! Minimum-cost assignment on a rectangular cost matrix.

/// Assigns rows to distinct columns minimizing the total cost. Returns the
/// matched column for each row; with more rows than columns, the surplus
/// rows get `None`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let n = cost.len();
    let m = cost.first().map_or(0, |r| r.len());
    if n == 0 || m == 0 {
        return vec![None; n];
    }
    if n > m {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        let cols = hungarian(&t);
        let mut out = vec![None; n];
        for (j, i) in cols.into_iter().enumerate() {
            if let Some(i) = i {
                out[i] = Some(j);
            }
        }
        return out;
    }
    // Shortest augmenting paths with row/column potentials, 1-based with a
    // virtual column 0.
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
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Total cost of an assignment.
pub fn assignment_cost(cost: &[Vec<f64>], assign: &[Option<usize>]) -> f64 {
    assign
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| cost[i][j]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(cost: &[Vec<f64>]) -> f64 {
        let (n, m) = (cost.len(), cost[0].len());
        fn rec(cost: &[Vec<f64>], i: usize, used: &mut Vec<bool>, k: usize) -> f64 {
            if k == 0 || i == cost.len() {
                return if k == 0 { 0.0 } else { f64::INFINITY };
            }
            let mut best = if cost.len() - i > k { rec(cost, i + 1, used, k) } else { f64::INFINITY };
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[i][j] + rec(cost, i + 1, used, k - 1));
                    used[j] = false;
                }
            }
            best
        }
        rec(cost, 0, &mut vec![false; m], n.min(m))
    }

    #[test]
    fn picks_the_anti_diagonal() {
        let c = vec![vec![5.0, 1.0], vec![1.0, 5.0]];
        assert_eq!(hungarian(&c), vec![Some(1), Some(0)]);
    }

    #[test]
    fn surplus_rows_are_unmatched() {
        let c = vec![vec![3.0], vec![1.0], vec![2.0]];
        assert_eq!(hungarian(&c), vec![None, Some(0), None]);
        assert!(hungarian(&[]).is_empty());
    }

    proptest! {
        #[test]
        fn matches_brute_force(n in 1usize..5, m in 1usize..5, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let c: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.gen_range(0.0..10.0)).collect()).collect();
            let a = hungarian(&c);
            let used: Vec<usize> = a.iter().flatten().copied().collect();
            let mut dedup = used.clone();
            dedup.sort();
            dedup.dedup();
            prop_assert_eq!(used.len(), n.min(m));
            prop_assert_eq!(dedup.len(), used.len());
            prop_assert!((assignment_cost(&c, &a) - brute(&c)).abs() < 1e-9);
        }
    }
}
