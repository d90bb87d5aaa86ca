//! Minimum-cost one-to-one assignment (Hungarian algorithm with
//! potentials, O(n^3)) plus the gated matching used for cluster-to-track
//! association.

/// Cost larger than any gated pair can reach; pairs at or above it are
/// treated as forbidden when the solution is read back.
pub const FORBIDDEN: f64 = 1e9;

/// Solve the square assignment problem, minimizing total cost.
///
/// Returns `row_to_col`: for each row, the column it is assigned to.
/// Shortest-augmenting-path formulation with dual potentials.
pub fn hungarian_square(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    debug_assert!(cost.iter().all(|row| row.len() == n));

    // 1-indexed internals; p[j] = row assigned to column j (0 = none yet).
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
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
            for j in 0..=n {
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

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Result of a gated assignment between two feature sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// (row index, column index) pairs, sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub unassigned_rows: Vec<usize>,
    pub unassigned_cols: Vec<usize>,
}

/// Pad to square: dummy rows/cols cost nothing, forbidden pairs a lot.
pub(crate) fn build_padded(cost: &[Vec<f64>], gate: f64) -> Vec<Vec<f64>> {
    let rows = cost.len();
    let cols = if rows == 0 { 0 } else { cost[0].len() };
    let n = rows.max(cols);
    let mut padded = vec![vec![0.0f64; n]; n];
    for (i, row) in padded.iter_mut().enumerate().take(rows) {
        for (j, c) in row.iter_mut().enumerate().take(cols) {
            *c = if cost[i][j] <= gate { cost[i][j] } else { FORBIDDEN };
        }
    }
    padded
}

/// One-to-one assignment minimizing total cost with pairs above `gate`
/// forbidden. Maximizes the number of admissible pairs first (a single
/// forbidden assignment outweighs any sum of admissible ones), then total
/// cost.
pub fn gated_assignment(cost: &[Vec<f64>], gate: f64) -> Assignment {
    let rows = cost.len();
    let cols = if rows == 0 { 0 } else { cost[0].len() };
    let n = rows.max(cols);
    if n == 0 {
        return Assignment {
            pairs: Vec::new(),
            unassigned_rows: Vec::new(),
            unassigned_cols: Vec::new(),
        };
    }

    let padded = build_padded(cost, gate);
    let row_to_col = hungarian_square(&padded);

    let mut pairs = Vec::new();
    let mut assigned_cols = vec![false; cols];
    for (i, &j) in row_to_col.iter().enumerate().take(rows) {
        if j < cols && padded[i][j] < FORBIDDEN {
            pairs.push((i, j));
            assigned_cols[j] = true;
        }
    }
    pairs.sort_unstable();
    let paired_rows: std::collections::BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
    Assignment {
        unassigned_rows: (0..rows).filter(|i| !paired_rows.contains(i)).collect(),
        unassigned_cols: (0..cols).filter(|j| !assigned_cols[*j]).collect(),
        pairs,
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    /// Total padded cost of the raw Hungarian solution on the same padded
    /// matrix the gated assignment uses.
    fn hungarian_padded_total(cost: &[Vec<f64>], gate: f64) -> f64 {
        let padded = build_padded(cost, gate);
        let rtc = hungarian_square(&padded);
        rtc.iter().enumerate().map(|(i, &j)| padded[i][j]).sum()
    }

    #[test]
    fn simple_two_by_two() {
        let cost = vec![vec![1.0, 10.0], vec![10.0, 1.0]];
        let a = gated_assignment(&cost, f64::INFINITY);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert!(a.unassigned_rows.is_empty());
    }

    #[test]
    fn anti_diagonal_is_cheaper() {
        let cost = vec![vec![10.0, 1.0], vec![1.0, 10.0]];
        let a = gated_assignment(&cost, f64::INFINITY);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn gate_blocks_far_pair() {
        let cost = vec![vec![8.0]];
        let a = gated_assignment(&cost, 4.0);
        assert!(a.pairs.is_empty());
        assert_eq!(a.unassigned_rows, vec![0]);
        assert_eq!(a.unassigned_cols, vec![0]);
    }

    #[test]
    fn rectangular_leaves_extra_unassigned() {
        let cost = vec![vec![1.0, 2.0, 3.0]];
        let a = gated_assignment(&cost, f64::INFINITY);
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.unassigned_cols, vec![1, 2]);
    }

    #[test]
    fn gating_prefers_more_pairs_over_cheaper_single() {
        // Greedy would take (0,0)=1 and strand row 1 (only column 0 is
        // admissible for it); the optimum pairs both rows.
        let cost = vec![vec![1.0, 3.0], vec![2.0, 100.0]];
        let a = gated_assignment(&cost, 10.0);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
    }

    fn lcg(state: &mut u64) -> f64 {
        *state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (*state >> 11) as f64 / (1u64 << 53) as f64
    }

    #[test]
    fn matches_exhaustive_optimum_on_random_instances() {
        let mut state = 42u64;
        for case in 0..200 {
            let rows = 1 + (lcg(&mut state) * 5.0) as usize;
            let cols = 1 + (lcg(&mut state) * 5.0) as usize;
            let gate = if case % 3 == 0 { 0.6 } else { f64::INFINITY };
            let cost: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..cols).map(|_| lcg(&mut state)).collect())
                .collect();
            let a = gated_assignment(&cost, gate);
            let (best, best_valid) = oracle::brute_force(&cost, gate);
            let got = hungarian_padded_total(&cost, gate);
            assert!(
                (got - best).abs() < 1e-9,
                "case {case}: padded cost {got} vs optimum {best} (cost {cost:?}, gate {gate})"
            );
            assert_eq!(a.pairs.len(), best_valid, "case {case}: pair count");
        }
    }

    #[test]
    fn never_worse_than_greedy() {
        let mut state = 7u64;
        for _ in 0..100 {
            let n = 2 + (lcg(&mut state) * 4.0) as usize;
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| lcg(&mut state) * 10.0).collect())
                .collect();
            let a = gated_assignment(&cost, f64::INFINITY);
            let opt: f64 = a.pairs.iter().map(|&(i, j)| cost[i][j]).sum();

            // Greedy nearest neighbor: repeatedly take the globally
            // cheapest remaining pair.
            let mut rows_free: Vec<usize> = (0..n).collect();
            let mut cols_free: Vec<usize> = (0..n).collect();
            let mut greedy = 0.0;
            while !rows_free.is_empty() {
                let mut best = (f64::INFINITY, 0, 0);
                for (ri, &i) in rows_free.iter().enumerate() {
                    for (ci, &j) in cols_free.iter().enumerate() {
                        if cost[i][j] < best.0 {
                            best = (cost[i][j], ri, ci);
                        }
                    }
                }
                greedy += best.0;
                rows_free.remove(best.1);
                cols_free.remove(best.2);
            }
            assert!(opt <= greedy + 1e-12, "{opt} > {greedy}");
        }
    }
}
