//! Desk-scale episodic reinforcement fine-tuning with an information-gain
//! dense process reward, plus the exact-computation oracles that validate
//! every approximation the reward relies on.

pub mod error;
pub mod numcheck;
pub mod oracle;
pub mod policy;
pub mod proxy;
pub mod reward;
pub mod rng;
pub mod task;
pub mod vocab;

pub use error::{Error, Result};

// Placeholder until the CLI module lands.
pub fn run_cli() -> i32 {
    eprintln!("cli not wired yet");
    2
}
