//! Low-rank reference adapter: `delta(x) = (alpha / r) * B (A x)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};
use crate::matrix::Matrix;

pub const DEFAULT_ALPHA: f64 = 16.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `r x in_dim`
    pub a: Matrix,
    /// `out_dim x r`
    pub b: Matrix,
    pub alpha: f64,
}

impl LoraAdapter {
    /// Standard initialization: Gaussian `A` with std `1/sqrt(in_dim)`, zero `B`.
    pub fn new(in_dim: usize, out_dim: usize, rank: usize, alpha: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (in_dim.max(1) as f64).sqrt();
        Self { a: Matrix::gaussian(rank, in_dim, std, &mut rng), b: Matrix::zeros(out_dim, rank), alpha }
    }

    pub fn from_parts(a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        ensure!(
            a.rows() == b.cols(),
            DimensionMismatch,
            "A is {}x{} but B is {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        );
        ensure!(alpha.is_finite(), InvalidArgument, "alpha must be finite");
        a.check_finite("LoRA A")?;
        b.check_finite("LoRA B")?;
        Ok(Self { a, b, alpha })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    /// `alpha / r`, or zero for a rank-0 adapter.
    pub fn scaling(&self) -> f64 {
        if self.rank() == 0 {
            0.0
        } else {
            self.alpha / self.rank() as f64
        }
    }

    /// Applies the update to a batch of inputs laid out back to back.
    pub fn apply(&self, xs: &[f64]) -> Result<Vec<f64>> {
        let d = self.in_dim();
        ensure!(
            d > 0 && !xs.is_empty() && xs.len() % d == 0,
            DimensionMismatch,
            "input length {} is not a positive multiple of {d}",
            xs.len()
        );
        let s = self.scaling();
        let mut out = Vec::with_capacity(xs.len() / d * self.out_dim());
        for x in xs.chunks(d) {
            let ax = self.a.matvec(x)?;
            out.extend(self.b.matvec(&ax)?.into_iter().map(|v| s * v));
        }
        Ok(out)
    }

    /// Dense `(alpha / r) * B A`.
    pub fn delta_matrix(&self) -> Matrix {
        self.b.matmul(&self.a).expect("A/B extents checked at construction").scale(self.scaling())
    }

    pub fn param_count(&self) -> usize {
        lora_param_count(self.rank(), self.in_dim(), self.out_dim())
    }
}

/// Trainable scalars of a rank-`r` adapter on an `out_dim x in_dim` weight.
pub fn lora_param_count(rank: usize, in_dim: usize, out_dim: usize) -> usize {
    rank * (in_dim + out_dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_adapter_is_zero() {
        let l = LoraAdapter::new(8, 6, 2, DEFAULT_ALPHA, 1);
        assert_eq!(l.apply(&[1.0; 16]).unwrap(), vec![0.0; 12]);
    }

    #[test]
    fn identity_factors_pass_through() {
        let l = LoraAdapter::from_parts(Matrix::identity(5), Matrix::identity(5), 5.0).unwrap();
        let x = [1.0, -2.0, 3.5, 0.0, 9.0];
        assert_eq!(l.apply(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn apply_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::gaussian(4, 16, 1.0, &mut rng);
        let b = Matrix::gaussian(16, 4, 1.0, &mut rng);
        let l = LoraAdapter::from_parts(a, b, 16.0).unwrap();
        let x = Matrix::gaussian(1, 16, 1.0, &mut rng).into_vec();
        let dense = l.delta_matrix().matvec(&x).unwrap();
        for (p, q) in l.apply(&x).unwrap().iter().zip(&dense) {
            assert!((p - q).abs() <= 1e-13 * q.abs().max(1.0));
        }
    }

    #[test]
    fn param_counts() {
        assert_eq!(lora_param_count(0, 4096, 4096), 0);
        assert_eq!(2 * 32 * lora_param_count(128, 4096, 4096), 67_108_864);
        assert_eq!(LoraAdapter::new(10, 3, 2, 1.0, 0).param_count(), 26);
    }

    #[test]
    fn extent_mismatch() {
        assert!(LoraAdapter::from_parts(Matrix::zeros(2, 4), Matrix::zeros(4, 3), 1.0).is_err());
        assert!(LoraAdapter::new(4, 4, 1, 1.0, 0).apply(&[0.0; 3]).is_err());
    }
}
