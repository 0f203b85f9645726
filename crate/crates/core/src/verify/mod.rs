//! Verification harness: permission matrix, shadow-model fuzzing, trace
//! audit and the golden scenario suite.

pub mod audit;
pub mod fuzz;
pub mod golden;
pub mod matrix;

pub use audit::{audit_trace, AuditReport};
pub use fuzz::{fuzz_programs, fuzz_with, FuzzConfig, FuzzReport};
pub use golden::{default_golden_dir, scenario_suite, SuiteReport};
pub use matrix::{permission_matrix_check, MatrixReport};
