//! Envelope (skyline) Cholesky factorization with reverse Cuthill-McKee
//! reordering, for the symmetric positive definite systems of the
//! full-order time stepper.

use std::collections::VecDeque;

use nalgebra::DVector;

use super::dense::dot;
use super::CsrMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SparseCholesky {
    n: usize,
    /// perm[new] = old
    perm: Vec<usize>,
    /// First column of the envelope of each (permuted) row.
    first: Vec<usize>,
    /// Offset of L[i, first[i]] in `values`.
    offset: Vec<usize>,
    values: Vec<f64>,
}

impl SparseCholesky {
    /// Factorizes a symmetric positive definite matrix. Only the lower
    /// triangle (in the permuted ordering) is read.
    pub fn factorize(a: &CsrMatrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Dimension(format!(
                "cannot factorize non-square {}x{} matrix",
                a.nrows(),
                a.ncols()
            )));
        }
        let n = a.nrows();
        let perm = reverse_cuthill_mckee(a);
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }

        let mut first: Vec<usize> = (0..n).collect();
        for (old_i, old_j, _) in a.triplets() {
            let (i, j) = (inv[old_i], inv[old_j]);
            let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
            first[hi] = first[hi].min(lo);
        }
        let mut offset = Vec::with_capacity(n + 1);
        let mut total = 0usize;
        for (i, &f) in first.iter().enumerate() {
            offset.push(total);
            total += i - f + 1;
        }
        offset.push(total);

        let mut values = vec![0.0; total];
        for (old_i, old_j, v) in a.triplets() {
            let (i, j) = (inv[old_i], inv[old_j]);
            if j <= i {
                values[offset[i] + j - first[i]] += v;
            }
        }

        for i in 0..n {
            let fi = first[i];
            let row_i = offset[i];
            for j in fi..i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let row_j = offset[j];
                let s = values[row_i + j - fi]
                    - dot(
                        &values[row_i + k0 - fi..row_i + j - fi],
                        &values[row_j + k0 - fj..row_j + j - fj],
                    );
                let djj = values[row_j + j - fj];
                values[row_i + j - fi] = s / djj;
            }
            let lrow = &values[row_i..row_i + i - fi];
            let d = values[row_i + i - fi] - dot(lrow, lrow);
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Factorization(format!(
                    "matrix not positive definite (pivot {d:e} at row {})",
                    perm[i]
                )));
            }
            values[row_i + i - fi] = d.sqrt();
        }

        Ok(Self {
            n,
            perm,
            first,
            offset,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored factor entries.
    pub fn envelope_size(&self) -> usize {
        self.values.len()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n, "right-hand side length");
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        // L y = b
        for i in 0..self.n {
            let fi = self.first[i];
            let row = self.offset[i];
            let s = y[i] - dot(&self.values[row..row + i - fi], &y[fi..i]);
            y[i] = s / self.values[row + i - fi];
        }
        // L^T x = y
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let row = self.offset[i];
            let xi = y[i] / self.values[row + i - fi];
            y[i] = xi;
            for (yk, l) in y[fi..i].iter_mut().zip(&self.values[row..row + i - fi]) {
                *yk -= l * xi;
            }
        }
        for (new, &old) in self.perm.iter().enumerate() {
            b[old] = y[new];
        }
    }
}

/// Reverse Cuthill-McKee ordering of the symmetrized sparsity pattern.
/// Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &CsrMatrix) -> Vec<usize> {
    let n = a.nrows();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, j, _) in a.triplets() {
        if i != j {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for list in adj.iter_mut() {
        list.sort_unstable();
        list.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();

    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut nodes_by_degree: Vec<usize> = (0..n).collect();
    nodes_by_degree.sort_by_key(|&i| (degree[i], i));

    for &seed in &nodes_by_degree {
        if visited[seed] {
            continue;
        }
        let start = pseudo_peripheral(seed, &adj, &degree);
        let mut queue = VecDeque::new();
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| (degree[w], w));
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

fn bfs_levels(start: usize, adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut seen = std::collections::HashSet::new();
    seen.insert(start);
    let mut levels = vec![vec![start]];
    loop {
        let mut next = Vec::new();
        for &v in levels.last().unwrap() {
            for &w in &adj[v] {
                if seen.insert(w) {
                    next.push(w);
                }
            }
        }
        if next.is_empty() {
            return levels;
        }
        levels.push(next);
    }
}

fn pseudo_peripheral(seed: usize, adj: &[Vec<usize>], degree: &[usize]) -> usize {
    let mut current = seed;
    let mut eccentricity = bfs_levels(current, adj).len();
    for _ in 0..8 {
        let levels = bfs_levels(current, adj);
        let candidate = *levels.last().unwrap().iter().min_by_key(|&&w| (degree[w], w)).unwrap();
        let cand_ecc = bfs_levels(candidate, adj).len();
        if cand_ecc > eccentricity {
            current = candidate;
            eccentricity = cand_ecc;
        } else {
            break;
        }
    }
    current
}
