//! 3D cubic-lattice HP protein folding.
//!
//! The crate bundles a rule-exact folding environment ([`env`]), exact
//! search utilities that back the action mask and certify optima on short
//! chains ([`feasibility`]), a transformer-based dueling Q-network
//! ([`qnet`]), a prioritized replay buffer ([`replay`]), the training loop
//! ([`trainer`]), and the benchmark table plus run-configuration plumbing
//! used by the `hpfold` binary ([`bench`]).

// Training churns through large short-lived buffers; mimalloc keeps them
// off the mmap path.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod bench;
pub mod cli;
pub mod env;
pub mod feasibility;
pub mod qnet;
pub mod replay;
pub mod trainer;
