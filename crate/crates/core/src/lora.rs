//! Low-rank adapter over a frozen linear map: `h = W⁰x + s·B(Ax)`.
//!
//! `B` (d×r) starts Gaussian and `A` (r×v) starts at zero, so the adapter
//! contributes nothing until the first update. The frozen base is never
//! handed out mutably.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    base: Array2<f64>,
    b_factor: Array2<f64>,
    a_factor: Array2<f64>,
    scale: f64,
}

/// Gradients of a scalar loss through one adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub b: Array2<f64>,
    pub a: Array2<f64>,
    pub input: Array2<f64>,
}

impl LoraAdapter {
    pub fn init(base: Array2<f64>, rank: usize, init_scale: f64, seed: u64) -> Result<Self> {
        let (d, v) = base.dim();
        let max = d.min(v);
        if rank == 0 || rank > max {
            return Err(Error::RankOutOfRange { rank, max });
        }
        if !(init_scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "init_scale must be positive, got {init_scale}"
            )));
        }
        let mut rng = seed::rng(seed);
        let b_factor = Array2::from_shape_simple_fn((d, rank), || {
            init_scale * rng.sample::<f64, _>(StandardNormal)
        });
        Ok(Self {
            base,
            b_factor,
            a_factor: Array2::zeros((rank, v)),
            scale: 1.0,
        })
    }

    /// Build from explicit factors, checking conformability.
    pub fn from_parts(
        base: Array2<f64>,
        b_factor: Array2<f64>,
        a_factor: Array2<f64>,
    ) -> Result<Self> {
        let (d, v) = base.dim();
        let (bd, r) = b_factor.dim();
        let (ar, av) = a_factor.dim();
        if bd != d {
            return Err(Error::DimensionMismatch {
                context: "B rows",
                expected: d,
                got: bd,
            });
        }
        if av != v {
            return Err(Error::DimensionMismatch {
                context: "A columns",
                expected: v,
                got: av,
            });
        }
        if ar != r {
            return Err(Error::DimensionMismatch {
                context: "A rows",
                expected: r,
                got: ar,
            });
        }
        if r == 0 || r > d.min(v) {
            return Err(Error::RankOutOfRange {
                rank: r,
                max: d.min(v),
            });
        }
        Ok(Self {
            base,
            b_factor,
            a_factor,
            scale: 1.0,
        })
    }

    /// Multiplier on the low-rank term. Defaults to 1.
    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn out_dim(&self) -> usize {
        self.base.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.base.ncols()
    }

    pub fn rank(&self) -> usize {
        self.a_factor.nrows()
    }

    pub fn base(&self) -> &Array2<f64> {
        &self.base
    }

    pub fn b_factor(&self) -> &Array2<f64> {
        &self.b_factor
    }

    pub fn a_factor(&self) -> &Array2<f64> {
        &self.a_factor
    }

    /// `d·r + r·v`.
    pub fn delta_len(&self) -> usize {
        self.b_factor.len() + self.a_factor.len()
    }

    pub fn frozen_len(&self) -> usize {
        self.base.len()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_input(x.len())?;
        let ax = self.a_factor.dot(&x);
        Ok(self.base.dot(&x) + self.b_factor.dot(&ax) * self.scale)
    }

    /// Single-example backward for upstream gradient `g = ∂loss/∂h`.
    pub fn backward(
        &self,
        x: ArrayView1<f64>,
        g: ArrayView1<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>, Array1<f64>)> {
        self.check_input(x.len())?;
        if g.len() != self.out_dim() {
            return Err(Error::DimensionMismatch {
                context: "adapter upstream gradient",
                expected: self.out_dim(),
                got: g.len(),
            });
        }
        let ax = self.a_factor.dot(&x);
        let btg = self.b_factor.t().dot(&g);
        let grad_b = outer(g, ax.view()) * self.scale;
        let grad_a = outer(btg.view(), x) * self.scale;
        let grad_x = self.base.t().dot(&g) + self.a_factor.t().dot(&btg) * self.scale;
        Ok((grad_b, grad_a, grad_x))
    }

    /// Batched forward over rows of `x` (n×v). Returns the output (n×d) and
    /// the rank-space projection `x·Aᵀ` (n×r) needed by the backward pass.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_input(x.ncols())?;
        let projected = x.dot(&self.a_factor.t());
        let mut out = x.dot(&self.base.t());
        out.scaled_add(self.scale, &projected.dot(&self.b_factor.t()));
        Ok((out, projected))
    }

    /// Batched backward. `upstream` (n×d) is the gradient of the scalar loss
    /// with respect to the batch output, so per-example weighting (such as a
    /// batch mean) must already be folded in.
    pub fn backward_batch(
        &self,
        x: ArrayView2<f64>,
        projected: ArrayView2<f64>,
        upstream: ArrayView2<f64>,
    ) -> Result<AdapterGrads> {
        self.check_input(x.ncols())?;
        if upstream.ncols() != self.out_dim() || upstream.nrows() != x.nrows() {
            return Err(Error::DimensionMismatch {
                context: "adapter upstream batch",
                expected: self.out_dim(),
                got: upstream.ncols(),
            });
        }
        let gb = upstream.dot(&self.b_factor);
        let b = upstream.t().dot(&projected) * self.scale;
        let a = gb.t().dot(&x) * self.scale;
        let mut input = upstream.dot(&self.base);
        input.scaled_add(self.scale, &gb.dot(&self.a_factor));
        Ok(AdapterGrads { b, a, input })
    }

    /// Dense `W⁰ + s·BA`.
    pub fn merge(&self) -> Array2<f64> {
        let mut merged = self.base.clone();
        merged.scaled_add(self.scale, &self.b_factor.dot(&self.a_factor));
        merged
    }

    /// Row-major `B` followed by row-major `A`.
    pub fn flatten_delta(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.delta_len());
        self.write_delta(&mut out);
        out
    }

    pub(crate) fn write_delta(&self, out: &mut Vec<f64>) {
        out.extend(self.b_factor.iter());
        out.extend(self.a_factor.iter());
    }

    pub fn load_delta(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.delta_len() {
            return Err(Error::LengthMismatch {
                expected: self.delta_len(),
                got: delta.len(),
            });
        }
        let (head, tail) = delta.split_at(self.b_factor.len());
        for (dst, src) in self.b_factor.iter_mut().zip(head) {
            *dst = *src;
        }
        for (dst, src) in self.a_factor.iter_mut().zip(tail) {
            *dst = *src;
        }
        Ok(())
    }

    /// `factor ← factor − lr·grad` for both factors, taking gradients in the
    /// flattened delta layout.
    pub(crate) fn apply_step(&mut self, grad: &[f64], lr: f64) {
        let (head, tail) = grad.split_at(self.b_factor.len());
        for (p, g) in self.b_factor.iter_mut().zip(head) {
            *p -= lr * g;
        }
        for (p, g) in self.a_factor.iter_mut().zip(tail) {
            *p -= lr * g;
        }
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.in_dim() {
            return Err(Error::DimensionMismatch {
                context: "adapter input",
                expected: self.in_dim(),
                got: len,
            });
        }
        Ok(())
    }
}

fn outer(col: ArrayView1<f64>, row: ArrayView1<f64>) -> Array2<f64> {
    let c = col.insert_axis(Axis(1));
    let r = row.insert_axis(Axis(0));
    c.dot(&r)
}

/// Encode a delta vector as consecutive little-endian `f64`s.
pub fn delta_to_le_bytes(delta: &[f64]) -> Vec<u8> {
    delta.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn delta_from_le_bytes(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Parse(format!(
            "delta byte length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_base(d: usize, v: usize, seed: u64) -> Array2<f64> {
        let mut rng = seed::rng(seed);
        Array2::from_shape_simple_fn((d, v), || rng.sample::<f64, _>(StandardNormal))
    }

    fn randomized(d: usize, v: usize, r: usize, seed: u64) -> LoraAdapter {
        let mut ad = LoraAdapter::init(random_base(d, v, seed), r, 0.5, seed + 1).unwrap();
        let mut rng = seed::rng(seed + 2);
        let delta: Vec<f64> = (0..ad.delta_len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        ad.load_delta(&delta).unwrap();
        ad
    }

    #[test]
    fn init_has_zero_delta() {
        let base = random_base(6, 5, 1);
        let ad = LoraAdapter::init(base.clone(), 3, 0.02, 9).unwrap();
        assert!(ad.b_factor().dot(ad.a_factor()).iter().all(|&x| x == 0.0));
        assert_eq!(ad.merge(), base);
        assert!(ad.a_factor().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn init_rank_bounds() {
        let base = random_base(4, 3, 1);
        assert_eq!(
            LoraAdapter::init(base.clone(), 4, 0.02, 0).unwrap_err(),
            Error::RankOutOfRange { rank: 4, max: 3 }
        );
        assert!(LoraAdapter::init(base.clone(), 0, 0.02, 0).is_err());
        assert!(LoraAdapter::init(base, 2, 0.0, 0).is_err());
    }

    #[test]
    fn init_sample_std_in_chi_square_band() {
        let ad = LoraAdapter::init(Array2::zeros((64, 64)), 8, 0.02, 3).unwrap();
        let n = ad.b_factor().len() as f64;
        assert_eq!(n, 512.0);
        let mean = ad.b_factor().sum() / n;
        let var = ad
            .b_factor()
            .iter()
            .map(|x| (x - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        let std = var.sqrt();
        assert!((0.015..=0.025).contains(&std), "std {std}");
    }

    #[test]
    fn init_is_seeded() {
        let a = LoraAdapter::init(Array2::zeros((5, 5)), 2, 0.02, 4).unwrap();
        let b = LoraAdapter::init(Array2::zeros((5, 5)), 2, 0.02, 4).unwrap();
        let c = LoraAdapter::init(Array2::zeros((5, 5)), 2, 0.02, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.b_factor(), c.b_factor());
    }

    #[test]
    fn forward_hand_case() {
        let ad = LoraAdapter::from_parts(Array2::eye(2), array![[1.0], [0.0]], array![[0.0, 1.0]])
            .unwrap();
        let h = ad.forward(array![3.0, 4.0].view()).unwrap();
        assert_eq!(h, array![7.0, 4.0]);
        assert!(ad.forward(array![1.0].view()).is_err());
    }

    #[test]
    fn fresh_forward_is_base_only() {
        let base = random_base(4, 3, 2);
        let ad = LoraAdapter::init(base.clone(), 2, 0.3, 1).unwrap();
        let x = array![0.2, -1.0, 0.7];
        assert_eq!(ad.forward(x.view()).unwrap(), base.dot(&x));
    }

    #[test]
    fn merge_hand_case() {
        let ad = LoraAdapter::from_parts(
            Array2::zeros((2, 2)),
            array![[1.0], [0.0]],
            array![[0.0, 1.0]],
        )
        .unwrap();
        assert_eq!(ad.merge(), array![[0.0, 1.0], [0.0, 0.0]]);
    }

    #[test]
    fn forward_matches_merge() {
        for seed in 0..10 {
            let ad = randomized(7, 5, 3, seed * 10);
            let x = Array1::from_shape_fn(5, |i| (i as f64 * 0.37 + seed as f64).sin());
            let lhs = ad.forward(x.view()).unwrap();
            let rhs = ad.merge().dot(&x);
            let diff = (&lhs - &rhs).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-12, "diff {diff}");
        }
    }

    #[test]
    fn backward_zero_upstream() {
        let ad = randomized(3, 4, 2, 5);
        let (gb, ga, gx) = ad
            .backward(array![1.0, 2.0, 3.0, 4.0].view(), Array1::zeros(3).view())
            .unwrap();
        assert!(gb
            .iter()
            .chain(ga.iter())
            .chain(gx.iter())
            .all(|&x| x == 0.0));
    }

    #[test]
    fn fresh_adapter_still_trains_a() {
        let ad = LoraAdapter::init(random_base(3, 4, 1), 2, 0.5, 2).unwrap();
        let (gb, ga, _) = ad
            .backward(
                array![1.0, -1.0, 0.5, 2.0].view(),
                array![1.0, 0.0, -1.0].view(),
            )
            .unwrap();
        assert!(gb.iter().all(|&x| x == 0.0));
        assert!(ga.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn batch_backward_matches_single() {
        let ad = randomized(4, 3, 2, 8);
        let x = array![[0.1, 0.2, -0.3], [1.0, -0.5, 0.25]];
        let g = array![[0.5, -1.0, 0.0, 2.0], [-0.3, 0.1, 0.7, 0.0]];
        let (_, proj) = ad.forward_batch(x.view()).unwrap();
        let grads = ad.backward_batch(x.view(), proj.view(), g.view()).unwrap();
        let mut gb = Array2::zeros((4, 2));
        let mut ga = Array2::zeros((2, 3));
        for i in 0..2 {
            let (b, a, gx) = ad.backward(x.row(i), g.row(i)).unwrap();
            gb += &b;
            ga += &a;
            let d = (&gx - &grads.input.row(i))
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(d < 1e-12);
        }
        assert!((&gb - &grads.b).iter().all(|v| v.abs() < 1e-12));
        assert!((&ga - &grads.a).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn flatten_layout_and_round_trip() {
        let ad = LoraAdapter::init(Array2::zeros((8, 6)), 2, 0.02, 1).unwrap();
        assert_eq!(ad.flatten_delta().len(), 28);

        let src = randomized(5, 4, 2, 3);
        let mut dst = LoraAdapter::init(src.base().clone(), 2, 0.1, 99).unwrap();
        dst.load_delta(&src.flatten_delta()).unwrap();
        assert_eq!(dst.b_factor(), src.b_factor());
        assert_eq!(dst.a_factor(), src.a_factor());
        let flat = src.flatten_delta();
        assert_eq!(flat[0], src.b_factor()[[0, 0]]);
        assert_eq!(flat[1], src.b_factor()[[0, 1]]);
        assert_eq!(flat[10], src.a_factor()[[0, 0]]);

        let err = dst.load_delta(&flat[1..]).unwrap_err();
        assert_eq!(
            err,
            Error::LengthMismatch {
                expected: 18,
                got: 17
            }
        );
    }

    #[test]
    fn wire_bytes() {
        let v = vec![1.5, -0.0, f64::MIN_POSITIVE];
        let bytes = delta_to_le_bytes(&v);
        assert_eq!(&bytes[..8], &1.5f64.to_le_bytes());
        let back = delta_from_le_bytes(&bytes).unwrap();
        assert!(v.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(delta_from_le_bytes(&bytes[..7]).is_err());
    }
}
