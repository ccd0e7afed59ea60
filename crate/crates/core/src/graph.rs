//! Task-similarity graph and the Laplacian algebra built on it.
//!
//! The graph is a symmetric, non-negative weight matrix with an empty diagonal.
//! `L = D - M` is its Laplacian and the extended Laplacian `L ⊗ I_p` acts
//! blockwise on a stack of `K` parameter vectors of length `p`. The extended
//! operator is only ever applied, never formed.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::Rng;
use rand_distr::Open01;

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskGraph {
    weights: Array2<f64>,
}

/// Every invariant violation in a raw weight matrix, in scan order.
///
/// Entry checks (diagonal, sign) scan row-major over the whole matrix;
/// symmetry is then checked on the strict lower triangle.
pub fn check_weights(rows: &[Vec<f64>]) -> Vec<Error> {
    let k = rows.len();
    let mut errors = Vec::new();
    if k < 2 {
        errors.push(Error::TooFewClients { count: k });
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != k {
            errors.push(Error::NotSquare {
                row: i,
                len: row.len(),
                expected: k,
            });
        }
    }
    if !errors.is_empty() {
        return errors;
    }
    for (i, row) in rows.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            if i == j {
                if w != 0.0 {
                    errors.push(Error::NonzeroDiagonal { index: i });
                }
            } else if !(w >= 0.0) || !w.is_finite() {
                errors.push(Error::NegativeWeight { row: i, col: j });
            }
        }
    }
    for i in 0..k {
        for j in 0..i {
            if rows[i][j] != rows[j][i] {
                errors.push(Error::AsymmetricWeights { row: i, col: j });
            }
        }
    }
    errors
}

impl TaskGraph {
    /// Validate a raw weight matrix. The first violation found is returned.
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        if let Some(err) = check_weights(rows).into_iter().next() {
            return Err(err);
        }
        let k = rows.len();
        let weights = Array2::from_shape_fn((k, k), |(i, j)| rows[i][j]);
        Ok(Self { weights })
    }

    pub fn from_array(weights: Array2<f64>) -> Result<Self> {
        let rows: Vec<Vec<f64>> = weights.rows().into_iter().map(|r| r.to_vec()).collect();
        Self::new(&rows)
    }

    /// Random symmetric graph: each unordered pair is kept with probability
    /// `density` and kept pairs get a weight drawn from the open interval (0, 1).
    pub fn random(k: usize, density: f64, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::TooFewClients { count: k });
        }
        if !(density > 0.0 && density <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "graph density must be in (0, 1], got {density}"
            )));
        }
        let mut rng = seed::rng(seed);
        let mut weights = Array2::zeros((k, k));
        for i in 0..k {
            for j in (i + 1)..k {
                let keep: f64 = rng.random();
                let w: f64 = rng.sample(Open01);
                if keep < density {
                    weights[[i, j]] = w;
                    weights[[j, i]] = w;
                }
            }
        }
        Ok(Self { weights })
    }

    pub fn num_clients(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    #[inline]
    pub fn weight(&self, k: usize, l: usize) -> f64 {
        self.weights[[k, l]]
    }

    /// `δ_k = Σ_{ℓ≠k} a_kℓ`.
    pub fn degrees(&self) -> Vec<f64> {
        self.weights.rows().into_iter().map(|r| r.sum()).collect()
    }

    pub fn max_degree(&self) -> f64 {
        self.degrees().into_iter().fold(0.0, f64::max)
    }

    /// `L = D - M`.
    pub fn laplacian(&self) -> Array2<f64> {
        let mut lap = self.weights.mapv(|w| -w);
        for (k, d) in self.degrees().into_iter().enumerate() {
            lap[[k, k]] = d;
        }
        lap
    }

    fn check_stack<V: AsRef<[f64]>>(&self, stacked: &[V]) -> Result<usize> {
        let k = self.num_clients();
        if stacked.len() != k {
            return Err(Error::DimensionMismatch {
                context: "stacked client vectors",
                expected: k,
                got: stacked.len(),
            });
        }
        let p = stacked[0].as_ref().len();
        for v in stacked {
            if v.as_ref().len() != p {
                return Err(Error::DimensionMismatch {
                    context: "client vector length",
                    expected: p,
                    got: v.as_ref().len(),
                });
            }
        }
        Ok(p)
    }

    /// Blockwise `(L ⊗ I_p) W`: block `k` is `δ_k v_k - Σ_{ℓ≠k} a_kℓ v_ℓ`.
    pub fn apply_extended_laplacian<V: AsRef<[f64]>>(
        &self,
        stacked: &[V],
    ) -> Result<Vec<Vec<f64>>> {
        let p = self.check_stack(stacked)?;
        let degrees = self.degrees();
        let k = self.num_clients();
        let mut out = Vec::with_capacity(k);
        for i in 0..k {
            let vi = stacked[i].as_ref();
            let mut block: Vec<f64> = vi.iter().map(|x| degrees[i] * x).collect();
            for (l, vl) in stacked.iter().enumerate() {
                let a = self.weights[[i, l]];
                if l == i || a == 0.0 {
                    continue;
                }
                for (b, x) in block.iter_mut().zip(vl.as_ref()) {
                    *b -= a * x;
                }
            }
            debug_assert_eq!(block.len(), p);
            out.push(block);
        }
        Ok(out)
    }

    /// `½ Σ_k Σ_{ℓ≠k} a_kℓ ‖w_k − w_ℓ‖²`.
    pub fn regularization_value<V: AsRef<[f64]>>(&self, stacked: &[V]) -> Result<f64> {
        self.check_stack(stacked)?;
        let k = self.num_clients();
        let mut total = 0.0;
        for i in 0..k {
            for l in 0..k {
                let a = self.weights[[i, l]];
                if l == i || a == 0.0 {
                    continue;
                }
                total += a * squared_distance(stacked[i].as_ref(), stacked[l].as_ref());
            }
        }
        Ok(0.5 * total)
    }

    /// Gershgorin bound `1 / (2 max δ_k)`, never above `1 / λ_max(L)`.
    pub fn safe_step_bound(&self) -> Result<f64> {
        let max = self.max_degree();
        if max <= 0.0 {
            return Err(Error::ZeroDegreeGraph);
        }
        Ok(1.0 / (2.0 * max))
    }

    /// Number of connected components over positive-weight edges.
    pub fn connected_components(&self) -> usize {
        let k = self.num_clients();
        let mut seen = vec![false; k];
        let mut components = 0;
        for start in 0..k {
            if seen[start] {
                continue;
            }
            components += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                for j in 0..k {
                    if !seen[j] && self.weights[[i, j]] > 0.0 {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        components
    }

    pub fn isolated_clients(&self) -> Vec<usize> {
        self.degrees()
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == 0.0)
            .map(|(k, _)| k)
            .collect()
    }

    /// Plain-text matrix: first line `K`, then `K` whitespace-separated rows.
    pub fn to_text(&self) -> String {
        let k = self.num_clients();
        let mut out = format!("{k}\n");
        for row in self.weights.rows() {
            let cells: Vec<String> = row.iter().map(|w| format!("{w:?}")).collect();
            let _ = writeln!(out, "{}", cells.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::new(&parse_matrix_text(text)?)
    }
}

/// Parse the plain-text matrix format without validating graph invariants.
pub fn parse_matrix_text(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty matrix file".into()))?;
    let k: usize = header.parse().map_err(|_| {
        Error::Parse(format!(
            "first line must be the client count, got {header:?}"
        ))
    })?;
    let mut rows = Vec::with_capacity(k);
    for (i, line) in lines.enumerate() {
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("row {i}: bad number {tok:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.len() != k {
        return Err(Error::Parse(format!(
            "header declares {k} rows but file has {}",
            rows.len()
        )));
    }
    Ok(rows)
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> TaskGraph {
        TaskGraph::new(&[
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
        ])
        .unwrap()
    }

    fn complete(k: usize) -> TaskGraph {
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..k).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
            .collect();
        TaskGraph::new(&rows).unwrap()
    }

    #[test]
    fn smallest_valid_graph() {
        let g = TaskGraph::new(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(g.num_clients(), 2);
    }

    #[test]
    fn rejects_asymmetric() {
        let err = TaskGraph::new(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap_err();
        assert_eq!(err, Error::AsymmetricWeights { row: 1, col: 0 });
    }

    #[test]
    fn rejects_negative() {
        let err = TaskGraph::new(&[vec![0.0, -1.0], vec![-1.0, 0.0]]).unwrap_err();
        assert_eq!(err, Error::NegativeWeight { row: 0, col: 1 });
    }

    #[test]
    fn rejects_diagonal_and_small() {
        let err = TaskGraph::new(&[vec![1.0, 1.0], vec![1.0, 0.0]]).unwrap_err();
        assert_eq!(err, Error::NonzeroDiagonal { index: 0 });
        let err = TaskGraph::new(&[vec![0.0]]).unwrap_err();
        assert_eq!(err, Error::TooFewClients { count: 1 });
        let err = TaskGraph::new(&[vec![0.0, 1.0], vec![1.0]]).unwrap_err();
        assert!(matches!(err, Error::NotSquare { row: 1, .. }));
    }

    #[test]
    fn random_pair_graph() {
        let g = TaskGraph::random(2, 1.0, 11).unwrap();
        let w = g.weight(0, 1);
        assert!(w > 0.0 && w < 1.0);
        assert_eq!(w, g.weight(1, 0));
        assert_eq!(g.weight(0, 0), 0.0);
        assert!(matches!(
            TaskGraph::random(1, 1.0, 0),
            Err(Error::TooFewClients { .. })
        ));
    }

    #[test]
    fn random_graph_is_deterministic() {
        let a = TaskGraph::random(5, 1.0, 7).unwrap();
        let b = TaskGraph::random(5, 1.0, 7).unwrap();
        assert!(a
            .weights()
            .iter()
            .zip(b.weights())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn random_graph_edge_count_matches_binomial() {
        let g = TaskGraph::random(80, 0.2, 1).unwrap();
        let mut kept = 0usize;
        for i in 0..80 {
            for j in (i + 1)..80 {
                if g.weight(i, j) > 0.0 {
                    kept += 1;
                }
            }
        }
        let n = 80.0 * 79.0 / 2.0;
        let mean = 0.2 * n;
        let sigma = (n * 0.2 * 0.8f64).sqrt();
        assert_eq!(mean, 632.0);
        assert!((kept as f64 - mean).abs() < 3.0 * sigma, "kept {kept}");
    }

    #[test]
    fn laplacian_of_path() {
        let lap = path3().laplacian();
        let expected = [[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(lap[[i, j]], expected[i][j]);
            }
        }
    }

    #[test]
    fn laplacian_of_complete() {
        let lap = complete(3).laplacian();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(lap[[i, j]], if i == j { 2.0 } else { -1.0 });
            }
        }
    }

    #[test]
    fn extended_laplacian_hand_cases() {
        let g = TaskGraph::new(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let out = g
            .apply_extended_laplacian(&[vec![1.0, 0.0], vec![0.0, 0.0]])
            .unwrap();
        assert_eq!(out, vec![vec![1.0, 0.0], vec![-1.0, 0.0]]);

        let same = vec![vec![0.3, -2.0, 5.0]; 3];
        let out = path3().apply_extended_laplacian(&same).unwrap();
        assert!(out.iter().flatten().all(|x| x.abs() < 1e-12));

        let err = g
            .apply_extended_laplacian(&[vec![1.0], vec![1.0, 2.0]])
            .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
        let err = g.apply_extended_laplacian(&[vec![1.0]]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn regularizer_hand_cases() {
        let g = TaskGraph::new(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(
            g.regularization_value(&[[1.0, 0.0], [0.0, 0.0]]).unwrap(),
            1.0
        );
        assert_eq!(
            g.regularization_value(&[[4.0, 2.0], [4.0, 2.0]]).unwrap(),
            0.0
        );
    }

    #[test]
    fn safe_step_examples() {
        assert_eq!(path3().safe_step_bound().unwrap(), 0.25);
        assert_eq!(complete(3).safe_step_bound().unwrap(), 0.25);
        let empty = TaskGraph::new(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(empty.safe_step_bound().unwrap_err(), Error::ZeroDegreeGraph);
    }

    #[test]
    fn connectivity() {
        assert_eq!(path3().connected_components(), 1);
        let g = TaskGraph::new(&[
            vec![0.0, 0.5, 0.0],
            vec![0.5, 0.0, 0.0],
            vec![0.0, 0.0, 0.0],
        ])
        .unwrap();
        assert_eq!(g.connected_components(), 2);
        assert_eq!(g.isolated_clients(), vec![2]);
    }

    #[test]
    fn text_round_trip() {
        let g = TaskGraph::random(6, 0.5, 3).unwrap();
        let back = TaskGraph::from_text(&g.to_text()).unwrap();
        assert_eq!(g, back);
        assert!(parse_matrix_text("3\n0 1 0\n").is_err());
        assert!(parse_matrix_text("x\n").is_err());
    }
}
