pub mod error;
pub mod model;
pub mod value_iteration;
pub mod threshold_solver;
pub mod test_rules;
pub mod evaluator;
pub mod io;
pub mod verify;
