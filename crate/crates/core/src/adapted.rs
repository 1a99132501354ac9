//! A base linear layer plus a tensor-circuit update.
//!
//! The update starts at exactly zero by pairing the trainable plan with a
//! frozen copy of itself: `y = W0 x + T x - S x`. Since `S` never changes it
//! is folded into the base right away, `W0' = W0 - S`, giving `y = W0' x + T x`.

use crate::error::{ensure, Result};
use crate::matrix::Matrix;
use crate::plan::QuantaPlan;

/// Returns `(trainable, frozen)` with identical gate values.
pub fn init_zero_delta(plan: &QuantaPlan) -> (QuantaPlan, QuantaPlan) {
    (plan.clone(), plan.clone().freeze())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdapterForm {
    /// Frozen plan folded into the base weight.
    #[default]
    Merged,
    /// Keeps `W0 x + (T x - S x)` with the frozen plan evaluated on every
    /// call. Used to check the merged form against.
    ThreeTerm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLinear {
    base: Matrix,
    merged_offset_applied: bool,
    plan: QuantaPlan,
    frozen_plan: Option<QuantaPlan>,
}

impl AdaptedLinear {
    /// Zero-delta initialization around `plan` on top of `base`
    /// (`output_len x input_len`).
    pub fn new(base: Matrix, plan: &QuantaPlan, form: AdapterForm) -> Result<Self> {
        ensure!(
            base.shape() == (plan.output_len(), plan.input_len()),
            DimensionMismatch,
            "base weight is {}x{} but plan maps {} -> {}",
            base.rows(),
            base.cols(),
            plan.input_len(),
            plan.output_len()
        );
        base.check_finite("base weight")?;
        let (trainable, frozen) = init_zero_delta(plan);
        Ok(match form {
            AdapterForm::Merged => {
                let merged = base.sub(&frozen.materialize())?;
                Self { base: merged, merged_offset_applied: true, plan: trainable, frozen_plan: None }
            }
            AdapterForm::ThreeTerm => {
                Self { base, merged_offset_applied: false, plan: trainable, frozen_plan: Some(frozen) }
            }
        })
    }

    /// The stored base weight: `W0'` in merged form, `W0` otherwise.
    pub fn base(&self) -> &Matrix {
        &self.base
    }

    pub fn merged_offset_applied(&self) -> bool {
        self.merged_offset_applied
    }

    pub fn plan(&self) -> &QuantaPlan {
        &self.plan
    }

    pub fn plan_mut(&mut self) -> &mut QuantaPlan {
        &mut self.plan
    }

    pub fn frozen_plan(&self) -> Option<&QuantaPlan> {
        self.frozen_plan.as_ref()
    }

    pub fn input_len(&self) -> usize {
        self.base.cols()
    }

    pub fn output_len(&self) -> usize {
        self.base.rows()
    }

    /// Forward pass over a batch of inputs laid out back to back.
    pub fn forward(&self, xs: &[f64]) -> Result<Vec<f64>> {
        let mut y = batch_matvec(&self.base, xs)?;
        let t = self.plan.apply(xs)?;
        match &self.frozen_plan {
            Some(frozen) => {
                let s = frozen.apply(xs)?;
                for ((yi, ti), si) in y.iter_mut().zip(&t).zip(&s) {
                    *yi += ti - si;
                }
            }
            None => {
                for (yi, ti) in y.iter_mut().zip(&t) {
                    *yi += ti;
                }
            }
        }
        Ok(y)
    }

    /// Dense weight equivalent to [`AdaptedLinear::forward`].
    pub fn merge(&self) -> Result<Matrix> {
        let t = self.plan.materialize();
        match &self.frozen_plan {
            Some(frozen) => self.base.add(&t.sub(&frozen.materialize())?),
            None => self.base.add(&t),
        }
    }
}

pub fn merge(adapted: &AdaptedLinear) -> Result<Matrix> {
    adapted.merge()
}

/// `W x` for every row of `xs`.
pub(crate) fn batch_matvec(w: &Matrix, xs: &[f64]) -> Result<Vec<f64>> {
    ensure!(
        !xs.is_empty() && xs.len() % w.cols() == 0,
        DimensionMismatch,
        "input length {} is not a positive multiple of {}",
        xs.len(),
        w.cols()
    );
    let mut out = Vec::with_capacity(xs.len() / w.cols() * w.rows());
    for x in xs.chunks(w.cols()) {
        out.extend(w.matvec(x)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{build_plan, build_rect_plan, PlanScheme};
    use crate::tensor::AxisShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (Matrix, QuantaPlan, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = AxisShape::new(vec![2, 4, 2]).unwrap();
        let plan = build_plan(&shape, &PlanScheme::AllPairs, seed, 1.0).unwrap();
        let base = Matrix::gaussian(16, 16, 1.0, &mut rng);
        (base, plan, rng)
    }

    #[test]
    fn three_term_form_is_bitwise_base_at_init() {
        let (base, plan, mut rng) = setup(1);
        let layer = AdaptedLinear::new(base.clone(), &plan, AdapterForm::ThreeTerm).unwrap();
        let x = Matrix::gaussian(5, 16, 1.0, &mut rng).into_vec();
        assert_eq!(layer.forward(&x).unwrap(), batch_matvec(&base, &x).unwrap());
        assert_eq!(layer.merge().unwrap(), base);
    }

    #[test]
    fn merged_and_three_term_forms_agree() {
        let (base, plan, mut rng) = setup(2);
        let merged = AdaptedLinear::new(base.clone(), &plan, AdapterForm::Merged).unwrap();
        let three = AdaptedLinear::new(base.clone(), &plan, AdapterForm::ThreeTerm).unwrap();
        assert!(merged.merged_offset_applied() && merged.frozen_plan().is_none());
        let x = Matrix::gaussian(20, 16, 1.0, &mut rng).into_vec();
        let (a, b) = (merged.forward(&x).unwrap(), three.forward(&x).unwrap());
        let diff = a.iter().zip(&b).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        assert!(diff <= 1e-12, "{diff}");
        assert!(merged.merge().unwrap().max_abs_diff(&base) <= 1e-12);
    }

    #[test]
    fn update_moves_forward_off_base() {
        let (base, plan, mut rng) = setup(3);
        let mut layer = AdaptedLinear::new(base.clone(), &plan, AdapterForm::ThreeTerm).unwrap();
        layer.plan_mut().gate_data_mut(0).unwrap()[0] += 0.1;
        let x = Matrix::gaussian(1, 16, 1.0, &mut rng).into_vec();
        assert_ne!(layer.forward(&x).unwrap(), base.matvec(&x).unwrap());
    }

    #[test]
    fn rectangular_merge_has_base_extent() {
        let plan = build_rect_plan(&AxisShape::new(vec![2, 2]).unwrap(), 4, &PlanScheme::AllPairs, 4, 1.0).unwrap();
        let layer = AdaptedLinear::new(Matrix::zeros(8, 4), &plan, AdapterForm::Merged).unwrap();
        assert_eq!(layer.merge().unwrap().shape(), (8, 4));
        assert!(AdaptedLinear::new(Matrix::zeros(4, 8), &plan, AdapterForm::Merged).is_err());
    }
}
