//! Axis-factored dense tensors and the two-axis gate kernel.
//!
//! A hidden vector of length `d = d1 * d2 * ... * dN` is viewed as an
//! `N`-axis tensor in row-major order (last axis fastest). Any leading
//! extents beyond the factored axes are batch extents.

use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::matrix::Matrix;

/// Factorization of a hidden dimension into axis extents.
#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "ShapeRepr", into = "Vec<usize>")]
pub struct AxisShape {
    dims: Vec<usize>,
}

impl AxisShape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        ensure!(!dims.is_empty(), InvalidArgument, "axis shape needs at least one axis");
        ensure!(
            dims.iter().all(|&d| d >= 1),
            InvalidArgument,
            "axis extents must be positive, got {dims:?}"
        );
        Ok(Self { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn total(&self) -> usize {
        self.dims.iter().product()
    }

    /// Row-major strides, in elements.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.dims)
    }

    pub(crate) fn with_axes(&self, (m, n): (usize, usize), (dm, dn): (usize, usize)) -> Self {
        let mut dims = self.dims.clone();
        dims[m] = dm;
        dims[n] = dn;
        Self { dims }
    }
}

/// Accepts either `[16, 8, 8, 4]` or `"16-8-8-4"`.
#[derive(serde::Deserialize)]
#[serde(untagged)]
enum ShapeRepr {
    List(Vec<usize>),
    Text(String),
}

impl TryFrom<ShapeRepr> for AxisShape {
    type Error = Error;
    fn try_from(r: ShapeRepr) -> Result<Self> {
        match r {
            ShapeRepr::List(dims) => Self::new(dims),
            ShapeRepr::Text(s) => s.parse(),
        }
    }
}

impl TryFrom<Vec<usize>> for AxisShape {
    type Error = Error;
    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Self::new(dims)
    }
}

impl From<AxisShape> for Vec<usize> {
    fn from(s: AxisShape) -> Self {
        s.dims
    }
}

impl std::str::FromStr for AxisShape {
    type Err = Error;

    /// Parses `"16-8-8-4"`, `"16,8,8,4"` or `"16x8x8x4"`.
    fn from_str(s: &str) -> Result<Self> {
        let dims = s
            .split(|c| c == ',' || c == '-' || c == 'x')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad axis extent {t:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(dims)
    }
}

impl std::fmt::Display for AxisShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("-"))
    }
}

pub(crate) fn strides_of(dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; dims.len()];
    for k in (0..dims.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * dims[k + 1];
    }
    strides
}

/// Dense real tensor: leading batch extents followed by the factored axes.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    batch: Vec<usize>,
    shape: AxisShape,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(batch: Vec<usize>, shape: AxisShape, data: Vec<f64>) -> Result<Self> {
        let expected = batch.iter().product::<usize>() * shape.total();
        ensure!(
            data.len() == expected,
            DimensionMismatch,
            "data length {} does not match batch {batch:?} x shape {shape} = {expected}",
            data.len()
        );
        ensure!(data.iter().all(|v| v.is_finite()), NonFinite, "tensor data contains NaN or Inf");
        Ok(Self { batch, shape, data })
    }

    pub fn batch(&self) -> &[usize] {
        &self.batch
    }

    pub fn batch_count(&self) -> usize {
        self.batch.iter().product()
    }

    pub fn shape(&self) -> &AxisShape {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Flattens back into the row-major data buffer.
    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    /// Element at a batch offset and full axis multi-index.
    pub fn at(&self, batch: usize, index: &[usize]) -> f64 {
        let strides = self.shape.strides();
        let off: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[batch * self.shape.total() + off]
    }
}

/// Views a flat vector as an axis-factored tensor. Any multiple of
/// `shape.total()` is accepted; the quotient becomes one leading batch extent.
pub fn reshape_to_axes(vector: &[f64], shape: &AxisShape) -> Result<DenseTensor> {
    let total = shape.total();
    ensure!(
        !vector.is_empty() && vector.len() % total == 0,
        DimensionMismatch,
        "vector length {} is not a positive multiple of {total} (shape {shape})",
        vector.len()
    );
    DenseTensor::new(vec![vector.len() / total], shape.clone(), vector.to_vec())
}

/// Applies a square two-axis gate to axes `(m, n)`:
/// `y[.., i_m, .., i_n, ..] = sum_{j_m, j_n} T[(i_m, i_n), (j_m, j_n)] x[.., j_m, .., j_n, ..]`.
pub fn apply_gate(x: &DenseTensor, gate: &Matrix, axes: (usize, usize)) -> Result<DenseTensor> {
    let dims = x.shape.dims();
    check_axes(dims, axes)?;
    let block = dims[axes.0] * dims[axes.1];
    ensure!(
        gate.shape() == (block, block),
        PlanValidation,
        "gate is {}x{} but axes {axes:?} need {block}x{block}",
        gate.rows(),
        gate.cols()
    );
    let out_ext = (dims[axes.0], dims[axes.1]);
    let data = apply_two_axis(&x.data, x.batch_count(), dims, axes, gate, out_ext);
    Ok(DenseTensor { batch: x.batch.clone(), shape: x.shape.clone(), data })
}

pub(crate) fn check_axes(dims: &[usize], (m, n): (usize, usize)) -> Result<()> {
    ensure!(m != n, PlanValidation, "gate axes must differ, got ({m}, {n})");
    ensure!(
        m < dims.len() && n < dims.len(),
        PlanValidation,
        "gate axes ({m}, {n}) out of range for {} axes",
        dims.len()
    );
    Ok(())
}

/// Offsets of every position of the axes other than `m` and `n`, paired for
/// an input layout and an output layout that differ only on `m`/`n`.
fn rest_offsets(
    dims: &[usize],
    in_strides: &[usize],
    out_strides: &[usize],
    (m, n): (usize, usize),
) -> Vec<(usize, usize)> {
    let rest: Vec<usize> = (0..dims.len()).filter(|&k| k != m && k != n).collect();
    let count: usize = rest.iter().map(|&k| dims[k]).product();
    let mut offsets = Vec::with_capacity(count);
    let mut idx = vec![0usize; rest.len()];
    for _ in 0..count {
        let (mut io, mut oo) = (0, 0);
        for (pos, &k) in rest.iter().enumerate() {
            io += idx[pos] * in_strides[k];
            oo += idx[pos] * out_strides[k];
        }
        offsets.push((io, oo));
        for pos in (0..rest.len()).rev() {
            idx[pos] += 1;
            if idx[pos] < dims[rest[pos]] {
                break;
            }
            idx[pos] = 0;
        }
    }
    offsets
}

/// Layout bookkeeping shared by the forward and gradient kernels.
struct TwoAxisLayout {
    in_total: usize,
    out_total: usize,
    in_step: (usize, usize),
    out_step: (usize, usize),
    in_ext: (usize, usize),
    out_ext: (usize, usize),
    rest: Vec<(usize, usize)>,
}

impl TwoAxisLayout {
    fn new(dims: &[usize], (m, n): (usize, usize), out_ext: (usize, usize)) -> Self {
        let mut out_dims = dims.to_vec();
        out_dims[m] = out_ext.0;
        out_dims[n] = out_ext.1;
        let in_strides = strides_of(dims);
        let out_strides = strides_of(&out_dims);
        Self {
            in_total: dims.iter().product(),
            out_total: out_dims.iter().product(),
            in_step: (in_strides[m], in_strides[n]),
            out_step: (out_strides[m], out_strides[n]),
            in_ext: (dims[m], dims[n]),
            out_ext,
            rest: rest_offsets(dims, &in_strides, &out_strides, (m, n)),
        }
    }

    #[inline]
    fn gather(&self, src: &[f64], base: usize, buf: &mut [f64]) {
        let (em, en) = self.in_ext;
        let (sm, sn) = self.in_step;
        for jm in 0..em {
            for jn in 0..en {
                buf[jm * en + jn] = src[base + jm * sm + jn * sn];
            }
        }
    }

    #[inline]
    fn gather_out(&self, src: &[f64], base: usize, buf: &mut [f64]) {
        let (em, en) = self.out_ext;
        let (sm, sn) = self.out_step;
        for im in 0..em {
            for i_n in 0..en {
                buf[im * en + i_n] = src[base + im * sm + i_n * sn];
            }
        }
    }
}

const PAR_THRESHOLD: usize = 1 << 14;

/// Core kernel: `gate` is `(out_m*out_n) x (in_m*in_n)` and acts on axes
/// `(m, n)` of a row-major buffer holding `batch` blocks of shape `dims`.
/// Every output entry is a fixed-order dot product, so results are
/// bitwise reproducible regardless of how batches are scheduled.
pub(crate) fn apply_two_axis(
    data: &[f64],
    batch: usize,
    dims: &[usize],
    axes: (usize, usize),
    gate: &Matrix,
    out_ext: (usize, usize),
) -> Vec<f64> {
    let layout = TwoAxisLayout::new(dims, axes, out_ext);
    debug_assert_eq!(gate.cols(), layout.in_ext.0 * layout.in_ext.1);
    debug_assert_eq!(gate.rows(), out_ext.0 * out_ext.1);
    debug_assert_eq!(data.len(), batch * layout.in_total);
    let mut out = vec![0.0; batch * layout.out_total];
    if layout.out_total == 0 {
        return out;
    }

    let run = |b: usize, out_block: &mut [f64]| {
        let mut buf = vec![0.0; gate.cols()];
        let in_base = b * layout.in_total;
        for &(io, oo) in &layout.rest {
            layout.gather(data, in_base + io, &mut buf);
            for om in 0..out_ext.0 {
                for on in 0..out_ext.1 {
                    let row = gate.row(om * out_ext.1 + on);
                    let acc: f64 = row.iter().zip(&buf).map(|(g, v)| g * v).sum();
                    out_block[oo + om * layout.out_step.0 + on * layout.out_step.1] = acc;
                }
            }
        }
    };

    if batch > 1 && batch * layout.out_total * gate.cols() >= PAR_THRESHOLD {
        out.par_chunks_mut(layout.out_total)
            .enumerate()
            .for_each(|(b, block)| run(b, block));
    } else {
        for (b, block) in out.chunks_mut(layout.out_total).enumerate() {
            run(b, block);
        }
    }
    out
}

/// Accumulates `sum_{batch, rest} upstream[(i_m, i_n)] * input[(j_m, j_n)]`
/// into `grad[(i_m, i_n), (j_m, j_n)]`: the gradient of a two-axis gate given
/// the tensor it consumed and the cotangent of the tensor it produced.
pub(crate) fn accumulate_gate_grad(
    input: &[f64],
    upstream: &[f64],
    batch: usize,
    dims: &[usize],
    axes: (usize, usize),
    out_ext: (usize, usize),
    grad: &mut Matrix,
) {
    let layout = TwoAxisLayout::new(dims, axes, out_ext);
    let cols = layout.in_ext.0 * layout.in_ext.1;
    let rows = out_ext.0 * out_ext.1;
    debug_assert_eq!(grad.shape(), (rows, cols));
    let mut xin = vec![0.0; cols];
    let mut gout = vec![0.0; rows];
    let g = grad.as_mut_slice();
    for b in 0..batch {
        let in_base = b * layout.in_total;
        let out_base = b * layout.out_total;
        for &(io, oo) in &layout.rest {
            layout.gather(input, in_base + io, &mut xin);
            layout.gather_out(upstream, out_base + oo, &mut gout);
            for (r, &gr) in gout.iter().enumerate() {
                if gr == 0.0 {
                    continue;
                }
                for (dst, &xv) in g[r * cols..(r + 1) * cols].iter_mut().zip(&xin) {
                    *dst += gr * xv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        Matrix::gaussian(1, n, 1.0, rng).into_vec()
    }

    #[test]
    fn reshape_is_row_major() {
        let v: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let shape = AxisShape::new(vec![2, 2, 2]).unwrap();
        let t = reshape_to_axes(&v, &shape).unwrap();
        for i1 in 0..2 {
            for i2 in 0..2 {
                for i3 in 0..2 {
                    assert_eq!(t.at(0, &[i1, i2, i3]), v[4 * i1 + 2 * i2 + i3]);
                }
            }
        }
        assert_eq!(t.into_flat(), v);
    }

    #[test]
    fn reshape_large_and_batched() {
        let shape: AxisShape = "16-8-8-4".parse().unwrap();
        assert_eq!(shape.total(), 4096);
        let t = reshape_to_axes(&vec![0.5; 4096], &shape).unwrap();
        assert_eq!(t.shape().rank(), 4);
        assert_eq!(t.batch(), &[1]);

        let s = AxisShape::new(vec![2, 3, 4]).unwrap();
        assert!(reshape_to_axes(&vec![1.0; 24], &s).is_ok());
        let s55 = AxisShape::new(vec![5, 5]).unwrap();
        assert!(matches!(reshape_to_axes(&vec![1.0; 24], &s55), Err(Error::DimensionMismatch(_))));
        assert_eq!(reshape_to_axes(&vec![1.0; 72], &s).unwrap().batch(), &[3]);
    }

    #[test]
    fn shape_validation() {
        assert!(AxisShape::new(vec![]).is_err());
        assert!(AxisShape::new(vec![2, 0]).is_err());
        assert_eq!("4,4,4".parse::<AxisShape>().unwrap().total(), 64);
        assert_eq!("16x16".parse::<AxisShape>().unwrap().to_string(), "16-16");
    }

    #[test]
    fn identity_gate_is_bitwise_noop() {
        let mut r = rng(1);
        let shape = AxisShape::new(vec![3, 2, 4]).unwrap();
        let x = reshape_to_axes(&random_vec(48, &mut r), &shape).unwrap();
        for axes in [(0, 1), (2, 0), (1, 2)] {
            let block = shape.dims()[axes.0] * shape.dims()[axes.1];
            let y = apply_gate(&x, &Matrix::identity(block), axes).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn two_axis_case_is_plain_matvec() {
        let mut r = rng(2);
        let shape = AxisShape::new(vec![2, 2]).unwrap();
        let g = Matrix::gaussian(4, 4, 1.0, &mut r);
        let v = random_vec(4, &mut r);
        let y = apply_gate(&reshape_to_axes(&v, &shape).unwrap(), &g, (0, 1)).unwrap();
        let expected = g.matvec(&v).unwrap();
        for (a, b) in y.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    /// Direct evaluation of the two-axis gate definition by looping over all
    /// output index tuples.
    fn brute_force_gate(x: &DenseTensor, g: &Matrix, (m, n): (usize, usize)) -> Vec<f64> {
        let dims = x.shape().dims().to_vec();
        let total = x.shape().total();
        let mut out = vec![0.0; x.data().len()];
        for b in 0..x.batch_count() {
            for flat in 0..total {
                let mut idx = vec![0; dims.len()];
                let mut rem = flat;
                for k in (0..dims.len()).rev() {
                    idx[k] = rem % dims[k];
                    rem /= dims[k];
                }
                let mut acc = 0.0;
                for jm in 0..dims[m] {
                    for jn in 0..dims[n] {
                        let mut src = idx.clone();
                        src[m] = jm;
                        src[n] = jn;
                        let row = idx[m] * dims[n] + idx[n];
                        let col = jm * dims[n] + jn;
                        acc += g.get(row, col) * x.at(b, &src);
                    }
                }
                out[b * total + flat] = acc;
            }
        }
        out
    }

    #[test]
    fn matches_brute_force_index_loop() {
        let mut r = rng(3);
        for (dims, axes) in [
            (vec![2, 2, 2], (0, 2)),
            (vec![2, 3, 4], (2, 0)),
            (vec![3, 2, 2, 3], (1, 3)),
        ] {
            let shape = AxisShape::new(dims).unwrap();
            let block = shape.dims()[axes.0] * shape.dims()[axes.1];
            let g = Matrix::gaussian(block, block, 1.0, &mut r);
            let x = reshape_to_axes(&random_vec(3 * shape.total(), &mut r), &shape).unwrap();
            let y = apply_gate(&x, &g, axes).unwrap();
            let oracle = brute_force_gate(&x, &g, axes);
            for (a, b) in y.data().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-13, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn batched_equals_independent_applications_bitwise() {
        let mut r = rng(4);
        let shape = AxisShape::new(vec![4, 4, 4]).unwrap();
        let g = Matrix::gaussian(16, 16, 1.0, &mut r);
        let all = random_vec(64 * 40, &mut r);
        let y = apply_gate(&reshape_to_axes(&all, &shape).unwrap(), &g, (0, 2)).unwrap();
        for (b, chunk) in all.chunks(64).enumerate() {
            let single = apply_gate(&reshape_to_axes(chunk, &shape).unwrap(), &g, (0, 2)).unwrap();
            assert_eq!(single.data(), &y.data()[b * 64..(b + 1) * 64]);
        }
    }

    #[test]
    fn linearity() {
        let mut r = rng(5);
        let shape = AxisShape::new(vec![2, 4, 2]).unwrap();
        let g = Matrix::gaussian(4, 4, 1.0, &mut r);
        let (xv, yv) = (random_vec(16, &mut r), random_vec(16, &mut r));
        let (a, b) = (0.7, -2.3);
        let comb: Vec<f64> = xv.iter().zip(&yv).map(|(x, y)| a * x + b * y).collect();
        let apply = |v: &[f64]| apply_gate(&reshape_to_axes(v, &shape).unwrap(), &g, (2, 0)).unwrap().into_flat();
        let (lhs, gx, gy) = (apply(&comb), apply(&xv), apply(&yv));
        for i in 0..16 {
            let rhs = a * gx[i] + b * gy[i];
            assert!((lhs[i] - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn validation_errors() {
        let shape = AxisShape::new(vec![2, 2, 2]).unwrap();
        let x = reshape_to_axes(&[0.0; 8], &shape).unwrap();
        let g = Matrix::identity(4);
        assert!(matches!(apply_gate(&x, &g, (1, 1)), Err(Error::PlanValidation(_))));
        assert!(matches!(apply_gate(&x, &g, (0, 3)), Err(Error::PlanValidation(_))));
        assert!(matches!(apply_gate(&x, &Matrix::identity(3), (0, 1)), Err(Error::PlanValidation(_))));
        assert!(matches!(
            DenseTensor::new(vec![1], shape, vec![f64::NAN; 8]),
            Err(Error::NonFinite(_))
        ));
    }
}
