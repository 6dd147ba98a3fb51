//! Minimum-cost linear assignment and IoU-gated association.

use crate::geometry::{iou, BBox};

/// Solves the rectangular assignment problem, returning `min(n, m)` pairs
/// `(row, col)` sorted by row.
///
/// Among equal-cost optimal assignments the lexicographically smallest
/// pair list is returned, so replays are byte-identical.
///
/// # Panics
///
/// Panics if the rows have different lengths or a cost is not finite.
pub fn hungarian_assign(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = cost[0].len();
    assert!(
        cost.iter().all(|r| r.len() == cols),
        "cost matrix rows must have equal length"
    );
    assert!(
        cost.iter().flatten().all(|c| c.is_finite()),
        "cost matrix entries must be finite"
    );
    if cols == 0 {
        return Vec::new();
    }

    // Pad to square with zero-cost dummy rows/columns appended last.
    let k = rows.max(cols);
    let at = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            cost[i][j]
        } else {
            0.0
        }
    };

    let (row_pot, col_pot, row_of_col) = solve_square(k, &at);

    let scale = cost
        .iter()
        .flatten()
        .fold(1.0_f64, |m, c| m.max(c.abs()));
    let tol = 1e-9 * scale;
    let tight: Vec<Vec<bool>> = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| at(i, j) - row_pot[i] - col_pot[j] <= tol)
                .collect()
        })
        .collect();

    let mut col_of_row = vec![usize::MAX; k];
    for (j, &i) in row_of_col.iter().enumerate() {
        col_of_row[i] = j;
    }
    lexicographic_refine(&tight, &mut col_of_row, rows);

    (0..rows)
        .filter(|&i| col_of_row[i] < cols)
        .map(|i| (i, col_of_row[i]))
        .collect()
}

/// Shortest augmenting path Hungarian method on a `k x k` matrix.
/// Returns row potentials, column potentials and the row matched to each
/// column; reduced costs `c - u - v` are non-negative and zero on the
/// matching.
fn solve_square(k: usize, at: &dyn Fn(usize, usize) -> f64) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    // 1-based internally, index 0 is the virtual source column.
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; k + 1];
    let mut p = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=k {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=k {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=k {
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
    let row_of_col = (1..=k).map(|j| p[j] - 1).collect();
    (u[1..].to_vec(), v[1..].to_vec(), row_of_col)
}

/// Every perfect matching inside the tight-edge graph is optimal. Walk the
/// real rows in order and give each the smallest tight column that still
/// admits a perfect matching of the remaining rows.
fn lexicographic_refine(tight: &[Vec<bool>], col_of_row: &mut [usize], real_rows: usize) {
    let k = tight.len();
    let mut row_of_col = vec![usize::MAX; k];
    for (i, &j) in col_of_row.iter().enumerate() {
        row_of_col[j] = i;
    }
    let mut fixed_col = vec![false; k];
    for i in 0..real_rows {
        let current = col_of_row[i];
        for c in 0..k {
            if fixed_col[c] || !tight[i][c] {
                continue;
            }
            if c == current {
                break;
            }
            // Row `holder` gives up `c` and must reach the column `i` frees.
            let holder = row_of_col[c];
            let mut visited = vec![false; k];
            let mut path = Vec::new();
            if reroute(tight, holder, current, c, i, &fixed_col, &row_of_col, &mut visited, &mut path) {
                for (r, col) in path {
                    col_of_row[r] = col;
                    row_of_col[col] = r;
                }
                col_of_row[i] = c;
                row_of_col[c] = i;
                break;
            }
        }
        fixed_col[col_of_row[i]] = true;
    }
}

#[allow(clippy::too_many_arguments)]
fn reroute(
    tight: &[Vec<bool>],
    row: usize,
    target: usize,
    banned: usize,
    pinned_row: usize,
    fixed_col: &[bool],
    row_of_col: &[usize],
    visited: &mut [bool],
    path: &mut Vec<(usize, usize)>,
) -> bool {
    for col in 0..tight.len() {
        if col == banned || fixed_col[col] || visited[col] || !tight[row][col] {
            continue;
        }
        visited[col] = true;
        if col == target {
            path.push((row, col));
            return true;
        }
        let next = row_of_col[col];
        if next == pinned_row {
            continue;
        }
        if reroute(tight, next, target, banned, pinned_row, fixed_col, row_of_col, visited, path) {
            path.push((row, col));
            return true;
        }
    }
    false
}

/// Outcome of associating predicted track boxes with detections.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult<Id> {
    /// `(track id, detection index)`.
    pub matches: Vec<(Id, usize)>,
    pub unmatched_tracks: Vec<Id>,
    pub unmatched_detections: Vec<usize>,
}

/// Hungarian assignment on `1 - IoU`; assigned pairs below `gate` are
/// split back into unmatched tracks and detections.
pub fn match_by_iou<Id: Copy>(
    predicted: &[(Id, BBox)],
    detections: &[BBox],
    gate: f64,
) -> MatchResult<Id> {
    let cost: Vec<Vec<f64>> = predicted
        .iter()
        .map(|(_, p)| detections.iter().map(|d| 1.0 - iou(p, d)).collect())
        .collect();
    let pairs = if predicted.is_empty() || detections.is_empty() {
        Vec::new()
    } else {
        hungarian_assign(&cost)
    };

    let mut track_used = vec![false; predicted.len()];
    let mut det_used = vec![false; detections.len()];
    let mut matches = Vec::new();
    for (r, c) in pairs {
        if 1.0 - cost[r][c] >= gate {
            track_used[r] = true;
            det_used[c] = true;
            matches.push((predicted[r].0, c));
        }
    }
    MatchResult {
        matches,
        unmatched_tracks: predicted
            .iter()
            .zip(&track_used)
            .filter(|(_, &u)| !u)
            .map(|((id, _), _)| *id)
            .collect(),
        unmatched_detections: (0..detections.len()).filter(|&j| !det_used[j]).collect(),
    }
}
