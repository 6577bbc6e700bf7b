//! A typed tensor language over federated data.
//!
//! Values are either shared tensors or federated tensors (one local block of
//! records per client, stacked along a record axis tracked in the type). The
//! crate provides the type system, two evaluators (per-client and on the
//! virtual global tensor), extraction of encode/merge/decode plans from
//! one-round and iterative programs, server-side optimizers built from
//! per-record gradient expressions, differential-privacy wrappers for plans
//! and a message-level federation simulator.

pub mod ast;
pub mod eval;
pub mod extensions;
pub mod factorize;
pub mod fedsim;
pub mod federated;
pub mod format;
pub mod gen;
pub mod learning;
pub mod linalg;
pub mod privacy;
pub mod programs;
pub mod selfcheck;
pub mod signature;
pub mod tensor;
pub mod typecheck;

pub use ast::{is_client_local, is_shared_only, Context, Expr, FedType, Primitive, TensorType};
pub use eval::{check_consistency, eval_centralized, eval_distributed, Environment, EvalError, Value};
pub use extensions::{audit, ExtKind, ExtPrimitive, Registry};
pub use federated::{ClientId, Federation, FederatedValue};
pub use signature::{builtin_signature, AggSchema, BinaryOp, CompareOp, UnaryOp};
pub use tensor::{broadcast_shape, Permutation, Shape, TensorValue};
pub use typecheck::{typecheck, TypeError, TypeErrorKind};
pub use factorize::{
    extract_plan, run_iterative, run_plan, validate_iterative, validate_one_round, Component, EncodedState,
    IterativeProgram, Merge, OneRoundProgram, SharedStatePlan,
};
pub use fedsim::{deserialize_state, serialize_state, simulate_round, Loopback, MessageLedger, Transport};
pub use format::{load_data, load_program, DataDocument, ProgramDocument};
pub use learning::{build_gaussian_linear, build_logistic, build_optimizer_program, OptimizerKind, OptimizerSpec, RepresentableLoss};
pub use privacy::{apply_mechanism, calibrate_gaussian_sigma, sensitivity_probe, MechanismKind, MechanismSpec, Placement};
