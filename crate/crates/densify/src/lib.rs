//! Regression under covariate shift by densifying a scarce labeled training
//! set with unlabeled context points.
//!
//! The pieces, bottom up:
//! - [`tensor`] — dense f64 tensors and a reverse-mode engine that supports
//!   differentiating through gradients (Hessian-vector products).
//! - [`nets`] — the task learner MLP, the set mixers (DeepSets, Set
//!   Transformer, linear interpolation + reduction), and the composed model
//!   with its train/test forward paths.
//! - [`bilevel`] — inner/outer training: the inner loop fits the task
//!   learner, the outer loop updates the mixer via implicit-function-theorem
//!   hypergradients with Neumann-series inverse-Hessian-vector products.
//! - [`data`] — descriptor-table ingestion, feature alignment, the minibatch
//!   sampling protocol (context sets, pseudo-labeled meta-validation points),
//!   and a synthetic covariate-shift generator.
//! - [`harness`] — experiment runner, ablation grid, hyperparameter search,
//!   embedding export, and reporting; drives everything from a JSON config.

pub mod check;
pub mod nets;
pub mod tensor;
