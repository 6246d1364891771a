//! Configuration-driven experiment runner for on-the-fly segmentation
//! adaptation.

pub mod commands;
pub mod config;
pub mod provenance;

pub use config::ExperimentConfig;

/// Exit code for an error chain: the code of the first library error in
/// it, otherwise 1.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    err.chain()
        .find_map(|e| e.downcast_ref::<otfseg::Error>())
        .map_or(1, otfseg::Error::exit_code)
}
