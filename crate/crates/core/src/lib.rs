//! Tensor-circuit weight adapters.
//!
//! A hidden vector of length `d = d1 * ... * dN` is reshaped into an
//! `N`-axis tensor, and a weight update is parameterized as a sequence of
//! small gates, each acting on two axes. The crate builds and applies such
//! circuits, materializes and merges them into base weights, analyzes their
//! rank, trains them on synthetic recovery tasks, and reads/writes them in
//! the QTF binary format.

pub mod adapted;
pub mod analysis;
pub mod config;
pub mod einsum;
pub mod error;
pub mod lora;
pub mod matrix;
pub mod plan;
pub mod qtf;
pub mod tensor;
pub mod train;

pub use adapted::{init_zero_delta, merge, AdaptedLinear, AdapterForm};
pub use einsum::{contract, gen_apply_expr, gen_operator_expr, ContractOrder, EinsumExpr};
pub use error::{Error, Result};
pub use lora::{lora_param_count, LoraAdapter};
pub use matrix::Matrix;
pub use plan::{build_plan, build_rect_plan, identity_plan, ComplexityReport, GateSpec, PlanScheme, QuantaPlan};
pub use tensor::{apply_gate, reshape_to_axes, AxisShape, DenseTensor};
