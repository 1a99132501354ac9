//! Analytic gradients.
//!
//! A circuit is a chain of linear maps, so the gradient of gate `k` is the
//! outer product of the state entering it (gates `< k` applied to `x`) with
//! the cotangent leaving it (transposed gates `> k` applied to the upstream
//! cotangent), summed over batch and every untouched axis position.

use crate::error::{ensure, Result};
use crate::lora::LoraAdapter;
use crate::matrix::Matrix;
use crate::plan::QuantaPlan;

/// Gradients of `sum(upstream * plan(xs))` with respect to every gate.
/// `xs` holds `B` inputs of `input_len`, `upstream` `B` cotangents of
/// `output_len`.
pub fn grad_plan(plan: &QuantaPlan, xs: &[f64], upstream: &[f64]) -> Result<Vec<Matrix>> {
    check_batches(xs.len(), plan.input_len(), upstream.len(), plan.output_len())?;
    let states = plan.forward_trace(xs)?;
    Ok(plan.backward(&states, upstream)?.1)
}

fn check_batches(x_len: usize, in_len: usize, u_len: usize, out_len: usize) -> Result<()> {
    ensure!(
        x_len % in_len == 0 && u_len % out_len == 0 && x_len / in_len == u_len / out_len && x_len > 0,
        DimensionMismatch,
        "inputs ({x_len} / {in_len}) and cotangents ({u_len} / {out_len}) disagree on batch size"
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrads {
    pub a: Matrix,
    pub b: Matrix,
}

/// Gradients of `sum(upstream * lora(xs))` with respect to `A` and `B`.
pub fn grad_lora(adapter: &LoraAdapter, xs: &[f64], upstream: &[f64]) -> Result<LoraGrads> {
    let (din, dout, r) = (adapter.in_dim(), adapter.out_dim(), adapter.rank());
    check_batches(xs.len(), din, upstream.len(), dout)?;
    let s = adapter.scaling();
    let bt = adapter.b.transpose();
    let mut ga = Matrix::zeros(r, din);
    let mut gb = Matrix::zeros(dout, r);
    for (x, u) in xs.chunks(din).zip(upstream.chunks(dout)) {
        let ax = adapter.a.matvec(x)?;
        let btu = bt.matvec(u)?;
        for i in 0..dout {
            for k in 0..r {
                gb.set(i, k, gb.get(i, k) + s * u[i] * ax[k]);
            }
        }
        for k in 0..r {
            for j in 0..din {
                ga.set(k, j, ga.get(k, j) + s * btu[k] * x[j]);
            }
        }
    }
    Ok(LoraGrads { a: ga, b: gb })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{build_plan, PlanScheme};
    use crate::tensor::AxisShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_gate_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = build_plan(&AxisShape::new(vec![2, 3]).unwrap(), &PlanScheme::AllPairs, 1, 1.0).unwrap();
        let xs = Matrix::gaussian(4, 6, 1.0, &mut rng);
        let us = Matrix::gaussian(4, 6, 1.0, &mut rng);
        let g = grad_plan(&plan, xs.as_slice(), us.as_slice()).unwrap();
        let expected = us.transpose().matmul(&xs).unwrap();
        assert!(g[0].max_abs_diff(&expected) < 1e-13);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let plan = build_plan(&AxisShape::new(vec![2, 2, 2]).unwrap(), &PlanScheme::AllPairs, 2, 1.0).unwrap();
        let g = grad_plan(&plan, &[1.0; 16], &[0.0; 16]).unwrap();
        assert!(g.iter().all(|m| m.max_abs() == 0.0));
    }

    #[test]
    fn lora_gradients_match_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::gaussian(2, 5, 1.0, &mut rng);
        let b = Matrix::gaussian(4, 2, 1.0, &mut rng);
        let l = LoraAdapter::from_parts(a.clone(), b.clone(), 3.0).unwrap();
        let xs = Matrix::gaussian(3, 5, 1.0, &mut rng);
        let us = Matrix::gaussian(3, 4, 1.0, &mut rng);
        let g = grad_lora(&l, xs.as_slice(), us.as_slice()).unwrap();
        let s = 1.5;
        // dB = s U^T X A^T, dA = s B^T U^T X
        let utx = us.transpose().matmul(&xs).unwrap();
        let gb = utx.matmul(&a.transpose()).unwrap().scale(s);
        let ga = b.transpose().matmul(&utx).unwrap().scale(s);
        assert!(g.a.max_abs_diff(&ga) < 1e-13 && g.b.max_abs_diff(&gb) < 1e-13);
    }

    #[test]
    fn batch_mismatch() {
        let plan = build_plan(&AxisShape::new(vec![2, 2]).unwrap(), &PlanScheme::AllPairs, 2, 1.0).unwrap();
        assert!(grad_plan(&plan, &[1.0; 8], &[1.0; 4]).is_err());
    }
}
