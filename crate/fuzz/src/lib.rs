//! Fuzz target bodies. They live in `checks` so the workspace tests can replay
//! the checked-in corpus through the same code on a stable toolchain.

pub mod checks;
