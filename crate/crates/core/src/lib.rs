//! Dispatch-aware learning for DC optimal transmission switching.
//!
//! The crate covers the whole pipeline:
//!
//! - [`matpower`] / [`network`]: read MATPOWER cases into a per-unit DC model.
//! - [`qp`]: dense interior-point QP solver used by every optimization below.
//! - [`dispatch`]: economic dispatch, DC-OPF with relaxed or binary line
//!   statuses, and exact DC-OTS (big-M branch-and-bound or enumeration).
//! - [`diff_opf`]: DC-OPF as a differentiable layer; the backward pass returns
//!   the gradient of generation cost with respect to relaxed line statuses.
//! - [`neural`]: the switching network (MLP with an eta-scaled sigmoid head)
//!   and AdamW.
//! - [`scenarios`]: demand scenario generation and the dataset file format.
//! - [`trainer`]: unsupervised training on dispatched cost, inference with
//!   feasibility fallback, and baseline evaluation.

pub mod cases;
pub mod diff_opf;
pub mod dispatch;
pub mod matpower;
pub mod network;
pub mod neural;
pub mod qp;
pub mod scenarios;
pub mod synthetic;
pub mod trainer;
