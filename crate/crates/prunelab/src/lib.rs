//! A desk-scale structured-pruning laboratory.
//!
//! The crate trains a small decoder-only transformer on a synthetic
//! multi-step arithmetic task, then prunes whole attention heads and MLP
//! channels under controlled seeds. Importance can be scored two ways:
//! a decode-only first-order Taylor saliency computed on calibration
//! traces, or a weight-times-activation-norm baseline. Calibration
//! traces can come from the model's own decoded outputs, from gold task
//! labels, or from random token noise, and can be regenerated from the
//! partially pruned model at every sparsity milestone.
//!
//! See the `book/` guide at the repository root for a narrative tour.

pub mod model;
pub mod task;
pub mod tensor;
