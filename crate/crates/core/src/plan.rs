//! Tensor-circuit plans: an ordered list of two-axis gates acting on an
//! axis-factored hidden vector, with optional pad/truncate at the borders
//! for weight extents that are not the product of the axis extents.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::einsum::all_pairs_order;
use crate::error::{ensure, Error, Result};
use crate::matrix::Matrix;
use crate::tensor::{accumulate_gate_grad, apply_two_axis, check_axes, AxisShape, DenseTensor};

/// One gate: a `(out_m*out_n) x (in_m*in_n)` matrix on axes `(m, n)`.
/// Row index is `i_m * out_n + i_n`, column index `j_m * in_n + j_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSpec {
    pub axes: (usize, usize),
    /// Extents of axes `m`, `n` after the gate. Equal to the incoming
    /// extents for square gates.
    pub out_dims: (usize, usize),
    pub tensor: Matrix,
    pub label: usize,
}

impl GateSpec {
    pub fn square(axes: (usize, usize), tensor: Matrix) -> Self {
        Self { axes, out_dims: (0, 0), tensor, label: 0 }
    }

    pub fn rectangular(axes: (usize, usize), out_dims: (usize, usize), tensor: Matrix) -> Self {
        Self { axes, out_dims, tensor, label: 0 }
    }

    pub fn param_count(&self) -> usize {
        self.tensor.rows() * self.tensor.cols()
    }

    pub fn is_square(&self) -> bool {
        self.tensor.rows() == self.tensor.cols()
    }
}

/// How gates are laid out over the axes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanScheme {
    /// One gate per unordered axis pair, canonical combination order.
    AllPairs,
    /// The all-pairs layout repeated `rounds` times.
    Stacked { rounds: usize },
    /// Gate axes in application order.
    Explicit(Vec<(usize, usize)>),
}

impl PlanScheme {
    pub fn pairs(&self, n_axes: usize) -> Result<Vec<(usize, usize)>> {
        match self {
            PlanScheme::AllPairs => {
                ensure!(n_axes >= 2, InvalidArgument, "all-pairs needs at least 2 axes, got {n_axes}");
                Ok(all_pairs_order(n_axes))
            }
            PlanScheme::Stacked { rounds } => {
                ensure!(n_axes >= 2, InvalidArgument, "all-pairs needs at least 2 axes, got {n_axes}");
                let one = all_pairs_order(n_axes);
                Ok(std::iter::repeat_n(one, *rounds).flatten().collect())
            }
            PlanScheme::Explicit(pairs) => Ok(pairs.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantaPlan {
    in_shape: AxisShape,
    out_shape: AxisShape,
    gates: Vec<GateSpec>,
    input_len: usize,
    output_len: usize,
    frozen: bool,
}

impl QuantaPlan {
    /// Validates a gate sequence by tracing axis extents from `in_shape`.
    /// Gates built with [`GateSpec::square`] get their output extents
    /// filled in here.
    pub fn new(in_shape: AxisShape, mut gates: Vec<GateSpec>) -> Result<Self> {
        let mut current = in_shape.clone();
        for (label, gate) in gates.iter_mut().enumerate() {
            let (m, n) = gate.axes;
            check_axes(current.dims(), gate.axes)?;
            let (dm, dn) = (current.dims()[m], current.dims()[n]);
            if gate.out_dims == (0, 0) {
                gate.out_dims = (dm, dn);
            }
            ensure!(
                gate.out_dims.0 >= 1 && gate.out_dims.1 >= 1,
                PlanValidation,
                "gate {label} has empty output extents"
            );
            ensure!(
                gate.tensor.cols() == dm * dn && gate.tensor.rows() == gate.out_dims.0 * gate.out_dims.1,
                PlanValidation,
                "gate {label} on axes ({m}, {n}) is {}x{}, expected {}x{}",
                gate.tensor.rows(),
                gate.tensor.cols(),
                gate.out_dims.0 * gate.out_dims.1,
                dm * dn
            );
            ensure!(gate.tensor.is_finite(), NonFinite, "gate {label} has non-finite entries");
            gate.label = label;
            current = current.with_axes(gate.axes, gate.out_dims);
        }
        Ok(Self {
            input_len: in_shape.total(),
            output_len: current.total(),
            in_shape,
            out_shape: current,
            gates,
            frozen: false,
        })
    }

    /// Sets the external vector lengths. Inputs are zero-padded or
    /// truncated to the circuit's input size; outputs likewise to
    /// `output_len`.
    pub fn with_io_lens(mut self, input_len: usize, output_len: usize) -> Result<Self> {
        ensure!(input_len >= 1 && output_len >= 1, InvalidArgument, "io lengths must be positive");
        self.input_len = input_len;
        self.output_len = output_len;
        Ok(self)
    }

    pub fn in_shape(&self) -> &AxisShape {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &AxisShape {
        &self.out_shape
    }

    pub fn gates(&self) -> &[GateSpec] {
        &self.gates
    }

    pub fn gate_count(&self) -> usize {
        self.gates.len()
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn output_len(&self) -> usize {
        self.output_len
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn is_square(&self) -> bool {
        self.in_shape == self.out_shape
            && self.input_len == self.output_len
            && self.input_len == self.in_shape.total()
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn param_count(&self) -> usize {
        self.gates.iter().map(GateSpec::param_count).sum()
    }

    /// Mutable access to one gate's entries; refused on frozen plans.
    pub fn gate_data_mut(&mut self, index: usize) -> Result<&mut [f64]> {
        ensure!(!self.frozen, InvalidArgument, "plan is frozen");
        let n = self.gates.len();
        let gate = self
            .gates
            .get_mut(index)
            .ok_or_else(|| Error::InvalidArgument(format!("gate {index} out of range ({n} gates)")))?;
        Ok(gate.tensor.as_mut_slice())
    }

    /// Shapes seen by each gate: entry `k` is the state shape before gate `k`,
    /// and the last entry is `out_shape`.
    pub(crate) fn shape_trace(&self) -> Vec<AxisShape> {
        let mut shapes = Vec::with_capacity(self.gates.len() + 1);
        let mut current = self.in_shape.clone();
        for g in &self.gates {
            shapes.push(current.clone());
            current = current.with_axes(g.axes, g.out_dims);
        }
        shapes.push(current);
        shapes
    }

    fn check_batch(&self, xs: &[f64], len: usize) -> Result<usize> {
        ensure!(
            !xs.is_empty() && xs.len() % len == 0,
            DimensionMismatch,
            "input length {} is not a positive multiple of {len}",
            xs.len()
        );
        Ok(xs.len() / len)
    }

    /// Runs the circuit over a batch of row-major inputs, each of length
    /// `input_len`, and returns each intermediate state: the padded input,
    /// then the state after every gate (before output truncation).
    pub(crate) fn forward_trace(&self, xs: &[f64]) -> Result<Vec<Vec<f64>>> {
        let batch = self.check_batch(xs, self.input_len)?;
        let shapes = self.shape_trace();
        let mut states = Vec::with_capacity(self.gates.len() + 1);
        states.push(resize_rows(xs, batch, self.input_len, self.in_shape.total()));
        for (g, shape) in self.gates.iter().zip(&shapes) {
            let prev = states.last().expect("non-empty");
            states.push(apply_two_axis(prev, batch, shape.dims(), g.axes, &g.tensor, g.out_dims));
        }
        Ok(states)
    }

    /// Applies the plan to a batch of inputs laid out back to back.
    pub fn apply(&self, xs: &[f64]) -> Result<Vec<f64>> {
        let batch = self.check_batch(xs, self.input_len)?;
        let shapes = self.shape_trace();
        let mut state = resize_rows(xs, batch, self.input_len, self.in_shape.total());
        for (g, shape) in self.gates.iter().zip(&shapes) {
            state = apply_two_axis(&state, batch, shape.dims(), g.axes, &g.tensor, g.out_dims);
        }
        Ok(resize_rows(&state, batch, self.out_shape.total(), self.output_len))
    }

    /// Applies the gates to an axis-factored tensor whose shape equals
    /// `in_shape`. Border pad/truncate does not apply here.
    pub fn apply_tensor(&self, x: &DenseTensor) -> Result<DenseTensor> {
        ensure!(
            x.shape() == &self.in_shape,
            DimensionMismatch,
            "tensor shape {} does not match plan input shape {}",
            x.shape(),
            self.in_shape
        );
        let batch = x.batch_count();
        let shapes = self.shape_trace();
        let mut state = x.data().to_vec();
        for (g, shape) in self.gates.iter().zip(&shapes) {
            state = apply_two_axis(&state, batch, shape.dims(), g.axes, &g.tensor, g.out_dims);
        }
        DenseTensor::new(x.batch().to_vec(), self.out_shape.clone(), state)
    }

    /// Propagates output cotangents back through the circuit. Returns the
    /// input cotangent and the gradient of every gate, given the forward
    /// states from [`QuantaPlan::forward_trace`].
    pub(crate) fn backward(&self, states: &[Vec<f64>], upstream: &[f64]) -> Result<(Vec<f64>, Vec<Matrix>)> {
        let batch = self.check_batch(upstream, self.output_len)?;
        ensure!(
            states.len() == self.gates.len() + 1 && states[0].len() == batch * self.in_shape.total(),
            DimensionMismatch,
            "forward states do not match plan or batch"
        );
        let shapes = self.shape_trace();
        let mut cot = resize_rows(upstream, batch, self.output_len, self.out_shape.total());
        let mut grads = vec![Matrix::zeros(0, 0); self.gates.len()];
        for (k, g) in self.gates.iter().enumerate().rev() {
            let in_dims = shapes[k].dims();
            let mut grad = Matrix::zeros(g.tensor.rows(), g.tensor.cols());
            accumulate_gate_grad(&states[k], &cot, batch, in_dims, g.axes, g.out_dims, &mut grad);
            grads[k] = grad;
            let in_ext = (in_dims[g.axes.0], in_dims[g.axes.1]);
            cot = apply_two_axis(&cot, batch, shapes[k + 1].dims(), g.axes, &g.tensor.transpose(), in_ext);
        }
        let input_cot = resize_rows(&cot, batch, self.in_shape.total(), self.input_len);
        Ok((input_cot, grads))
    }

    /// Dense `output_len x input_len` matrix of the whole plan, including
    /// border pad/truncate.
    pub fn materialize(&self) -> Matrix {
        let basis = Matrix::identity(self.input_len);
        let cols = self.apply(basis.as_slice()).expect("identity batch always matches input_len");
        // Row j of `cols` is the image of e_j.
        Matrix::from_vec(self.input_len, self.output_len, cols)
            .expect("apply returns input_len rows")
            .transpose()
    }

    pub fn cost(&self) -> ComplexityReport {
        let shapes = self.shape_trace();
        let per_gate: Vec<GateCost> = self
            .gates
            .iter()
            .zip(&shapes)
            .map(|(g, shape)| {
                let block = g.tensor.cols();
                let positions = (shape.total() / block) as u64;
                GateCost {
                    axes: g.axes,
                    params: g.param_count() as u64,
                    flops: positions * (g.tensor.rows() * g.tensor.cols()) as u64,
                }
            })
            .collect();
        ComplexityReport {
            trainable_params: per_gate.iter().map(|g| g.params).sum(),
            flops_per_token: per_gate.iter().map(|g| g.flops).sum(),
            per_gate,
        }
    }
}

/// Copies `batch` rows of length `from` into rows of length `to`,
/// truncating or zero-padding each row.
pub(crate) fn resize_rows(xs: &[f64], batch: usize, from: usize, to: usize) -> Vec<f64> {
    if from == to {
        return xs.to_vec();
    }
    let keep = from.min(to);
    let mut out = vec![0.0; batch * to];
    for b in 0..batch {
        out[b * to..b * to + keep].copy_from_slice(&xs[b * from..b * from + keep]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GateCost {
    pub axes: (usize, usize),
    pub params: u64,
    /// Multiply-adds per token.
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ComplexityReport {
    pub trainable_params: u64,
    pub flops_per_token: u64,
    pub per_gate: Vec<GateCost>,
}

/// Square plan with Gaussian gates, std `init_scale / sqrt(d_m * d_n)`.
pub fn build_plan(shape: &AxisShape, scheme: &PlanScheme, seed: u64, init_scale: f64) -> Result<QuantaPlan> {
    ensure!(init_scale.is_finite(), InvalidArgument, "init_scale must be finite");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gates = scheme
        .pairs(shape.rank())?
        .into_iter()
        .map(|axes| {
            check_axes(shape.dims(), axes)?;
            let block = shape.dims()[axes.0] * shape.dims()[axes.1];
            let std = init_scale / (block as f64).sqrt();
            Ok(GateSpec::square(axes, Matrix::gaussian(block, block, std, &mut rng)))
        })
        .collect::<Result<Vec<_>>>()?;
    QuantaPlan::new(shape.clone(), gates)
}

/// Square plan whose every gate is the identity.
pub fn identity_plan(shape: &AxisShape, scheme: &PlanScheme) -> Result<QuantaPlan> {
    let gates = scheme
        .pairs(shape.rank())?
        .into_iter()
        .map(|axes| {
            check_axes(shape.dims(), axes)?;
            let block = shape.dims()[axes.0] * shape.dims()[axes.1];
            Ok(GateSpec::square(axes, Matrix::identity(block)))
        })
        .collect::<Result<Vec<_>>>()?;
    QuantaPlan::new(shape.clone(), gates)
}

/// Plan mapping `in_shape` to the same shape with axis 0 resized to
/// `out_first`. The first gate touching axis 0 is rectangular; later gates
/// on axis 0 see the new extent.
pub fn build_rect_plan(
    in_shape: &AxisShape,
    out_first: usize,
    scheme: &PlanScheme,
    seed: u64,
    init_scale: f64,
) -> Result<QuantaPlan> {
    ensure!(out_first >= 1, InvalidArgument, "output extent must be positive");
    let pairs = scheme.pairs(in_shape.rank())?;
    ensure!(
        pairs.iter().any(|&(m, n)| m == 0 || n == 0),
        PlanValidation,
        "no gate touches axis 0, so the plan cannot change its extent"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = in_shape.clone();
    let mut resized = false;
    let mut gates = Vec::with_capacity(pairs.len());
    for axes in pairs {
        check_axes(current.dims(), axes)?;
        let (dm, dn) = (current.dims()[axes.0], current.dims()[axes.1]);
        let mut out_dims = (dm, dn);
        if !resized && (axes.0 == 0 || axes.1 == 0) {
            if axes.0 == 0 {
                out_dims.0 = out_first;
            } else {
                out_dims.1 = out_first;
            }
            resized = true;
        }
        let (rows, cols) = (out_dims.0 * out_dims.1, dm * dn);
        let std = init_scale / (cols as f64).sqrt();
        gates.push(GateSpec::rectangular(axes, out_dims, Matrix::gaussian(rows, cols, std, &mut rng)));
        current = current.with_axes(axes, out_dims);
    }
    QuantaPlan::new(in_shape.clone(), gates)
}
