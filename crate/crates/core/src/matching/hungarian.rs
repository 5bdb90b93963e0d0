use crate::error::{Error, Result};

/// Dense `rows × cols` matrix of matching costs; rows are prediction slots,
/// columns are ground-truth targets.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("cost_matrix", format!("{rows}x{cols} needs {} entries, got {}", rows * cols, data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("cost_matrix", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Matched `(prediction, target)` pairs sorted by prediction index.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

impl Assignment {
    /// Sum of matched costs, accumulated in ascending target order.
    pub fn total(&self, cost: &CostMatrix) -> f64 {
        let mut by_target = self.pairs.clone();
        by_target.sort_by_key(|&(_, t)| t);
        by_target.iter().map(|&(p, t)| cost.get(p, t)).sum()
    }

    /// Prediction slot assigned to each target, if any.
    pub fn prediction_for(&self, target: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(_, t)| t == target).map(|&(p, _)| p)
    }
}

/// Minimum-cost assignment of `targets` (rows of the internal problem) to
/// `slots` (columns) with shortest augmenting paths and dual potentials.
/// Returns the slot chosen for each target and the optimal total.
fn solve(cost: &CostMatrix, targets: &[usize], slots: &[usize]) -> (Vec<usize>, f64) {
    let n = targets.len();
    let m = slots.len();
    debug_assert!(n <= m);
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let a = |i: usize, j: usize| cost.get(slots[j - 1], targets[i - 1]);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
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
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut slot_of = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            slot_of[owner[j] - 1] = slots[j - 1];
        }
    }
    let total = (0..n).map(|i| cost.get(slot_of[i], targets[i])).sum();
    (slot_of, total)
}

/// Optimal assignment of every target to a distinct prediction slot.
///
/// Among all minimizers, returns the one whose sorted pair list is
/// lexicographically smallest, so ties resolve identically on every run.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let (n_pred, n_tgt) = (cost.rows(), cost.cols());
    if n_tgt > n_pred {
        return Err(Error::Capacity { targets: n_tgt, slots: n_pred });
    }
    if let Some(bad) = cost.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::contract(
            "hungarian",
            format!("non-finite cost at ({}, {})", bad / n_tgt.max(1), bad % n_tgt.max(1)),
        ));
    }
    let scale = cost.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-10 * scale * (n_tgt.max(1) as f64);

    let mut remaining: Vec<usize> = (0..n_tgt).collect();
    let (_, mut budget) = solve(cost, &remaining, &(0..n_pred).collect::<Vec<_>>());
    let mut pairs = Vec::with_capacity(n_tgt);
    let mut next_slot = 0;
    while !remaining.is_empty() {
        let mut chosen = None;
        'search: for p in next_slot..n_pred {
            let later: Vec<usize> = (p + 1..n_pred).collect();
            if later.len() + 1 < remaining.len() {
                break;
            }
            for (k, &t) in remaining.iter().enumerate() {
                let rest: Vec<usize> = remaining.iter().enumerate().filter(|&(q, _)| q != k).map(|(_, &x)| x).collect();
                let (_, rest_cost) = solve(cost, &rest, &later);
                if cost.get(p, t) + rest_cost <= budget + tol {
                    chosen = Some((p, k, rest_cost));
                    break 'search;
                }
            }
        }
        let (p, k, rest_cost) = chosen.expect("an optimal completion always exists");
        pairs.push((p, remaining.remove(k)));
        budget = rest_cost;
        next_slot = p + 1;
    }
    let unmatched = (0..n_pred).filter(|p| !pairs.iter().any(|&(q, _)| q == *p)).collect();
    Ok(Assignment { pairs, unmatched })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total(&c), 2.0);
        assert!(a.unmatched.is_empty());
    }

    #[test]
    fn all_zero_is_identity_prefix() {
        let c = CostMatrix::new(5, 3, vec![0.0; 15]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(a.unmatched, vec![3, 4]);
    }

    #[test]
    fn ties_prefer_lexicographically_smallest() {
        // both (0,1),(1,0) and (0,0),(2,1) cost 2; (0,0),(1,1) costs 3
        let c = CostMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 2.0], vec![9.0, 1.0]]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.total(&c), 2.0);
        assert_eq!(a.pairs, vec![(0, 0), (2, 1)]);
    }

    #[test]
    fn errors() {
        let c = CostMatrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(hungarian(&c), Err(Error::Capacity { targets: 2, slots: 1 })));
        let c = CostMatrix::new(2, 1, vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(hungarian(&c), Err(Error::Contract { .. })));
    }

    #[test]
    fn no_targets() {
        let c = CostMatrix::new(3, 0, vec![]).unwrap();
        let a = hungarian(&c).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched, vec![0, 1, 2]);
    }
}
