//! Learning to sample rare trajectories (random-walk bridges) of a 1D random
//! walk with parameterized-quantum-circuit and neural-network policies.

pub mod nn;
pub mod oracle;
pub mod policy;
pub mod qsim;
pub mod train;
pub mod walk;
